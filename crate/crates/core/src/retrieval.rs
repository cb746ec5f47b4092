//! Descriptor database, exact nearest-neighbor queries and recall metrics.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::diffcore::Real;
use crate::error::{Error, Result};
use crate::geometry::{Location, PointCloud, Submap};
use crate::io::Reader;
use crate::model::{GlobalDescriptor, SoeNet};

pub const SDB_MAGIC: &[u8; 4] = b"SDB1";
pub const SDB_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct DbEntry {
    pub id: String,
    pub location: Location,
    pub descriptor: GlobalDescriptor,
}

/// Immutable set of tagged global descriptors of one dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorDB {
    dim: usize,
    entries: Vec<DbEntry>,
}

impl DescriptorDB {
    pub fn new(dim: usize, entries: Vec<DbEntry>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("descriptor dimension must be >= 1".into()));
        }
        let mut seen = HashSet::new();
        for e in &entries {
            if e.descriptor.dim() != dim {
                return Err(Error::Shape(format!(
                    "entry `{}` has dimension {}, database has {dim}",
                    e.id,
                    e.descriptor.dim()
                )));
            }
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Format(format!("duplicate id `{}` in descriptor database", e.id)));
            }
        }
        Ok(DescriptorDB { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[DbEntry] {
        &self.entries
    }

    /// `SDB1`: magic, u32 version, u32 D, u32 count, then per entry the id
    /// (u32 length + UTF-8), easting and northing as f64 and D f32 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SDB_MAGIC);
        out.extend_from_slice(&SDB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.id.len() as u32).to_le_bytes());
            out.extend_from_slice(e.id.as_bytes());
            out.extend_from_slice(&e.location.easting.to_le_bytes());
            out.extend_from_slice(&e.location.northing.to_le_bytes());
            for v in e.descriptor.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses `SDB1`; with `expected_dim`, a different stored dimension is an error.
    pub fn from_bytes(bytes: &[u8], expected_dim: Option<usize>) -> Result<Self> {
        let mut r = Reader::new(bytes, "descriptor index");
        r.magic(SDB_MAGIC)?;
        r.version(SDB_VERSION)?;
        let dim = r.u32()? as usize;
        if let Some(want) = expected_dim {
            if want != dim {
                return Err(Error::Shape(format!("index stores {dim}-d descriptors, expected {want}")));
            }
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let id = r.string()?;
            let location = Location::new(r.f64()?, r.f64()?);
            let descriptor = GlobalDescriptor::new(r.f32s(dim)?)
                .map_err(|e| Error::Format(format!("entry `{id}`: {e}")))?;
            entries.push(DbEntry { id, location, descriptor });
        }
        r.finish()?;
        DescriptorDB::new(dim, entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, expected_dim: Option<usize>) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::from_bytes(&bytes, expected_dim)
    }
}

/// One descriptor per submap, in input order.
pub fn build_index<T: Real>(submaps: &[Submap], net: &SoeNet<T>) -> Result<DescriptorDB> {
    let entries = submaps
        .iter()
        .map(|s| {
            Ok(DbEntry {
                id: s.id.clone(),
                location: s.location,
                descriptor: net.describe(&s.cloud)?,
            })
        })
        .collect::<Result<_>>()?;
    DescriptorDB::new(net.config.out_dim, entries)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    /// Position of the entry in the database.
    pub index: usize,
    pub id: String,
    pub distance: f64,
}

/// The `k` entries closest to `query` in Euclidean distance, ascending;
/// equal distances are ordered by id.
pub fn rank(db: &DescriptorDB, query: &GlobalDescriptor, k: usize) -> Result<Vec<Hit>> {
    if db.is_empty() {
        return Err(Error::Empty("descriptor database"));
    }
    if k == 0 || k > db.len() {
        return Err(Error::Invalid(format!("k must be in 1..={}, got {k}", db.len())));
    }
    if query.dim() != db.dim() {
        return Err(Error::Shape(format!("query has dimension {}, database {}", query.dim(), db.dim())));
    }
    let mut all: Vec<(f64, usize)> = db
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| (e.descriptor.distance(query), i))
        .collect();
    all.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("finite distances")
            .then_with(|| db.entries[a.1].id.cmp(&db.entries[b.1].id))
    });
    Ok(all
        .into_iter()
        .take(k)
        .map(|(distance, index)| Hit {
            index,
            id: db.entries[index].id.clone(),
            distance,
        })
        .collect())
}

/// Embeds `cloud` with `net` and ranks the database against it.
pub fn query_topk<T: Real>(db: &DescriptorDB, cloud: &PointCloud, net: &SoeNet<T>, k: usize) -> Result<Vec<Hit>> {
    rank(db, &net.describe(cloud)?, k)
}

/// A query descriptor with its true location.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub id: String,
    pub location: Location,
    pub descriptor: GlobalDescriptor,
}

pub fn embed_queries<T: Real>(submaps: &[Submap], net: &SoeNet<T>) -> Result<Vec<Query>> {
    submaps
        .iter()
        .map(|s| {
            Ok(Query {
                id: s.id.clone(),
                location: s.location,
                descriptor: net.describe(&s.cloud)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalProtocol {
    /// A retrieval is correct within this many meters of the query.
    pub correct_radius: f64,
    pub top_n: Vec<usize>,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            correct_radius: 25.0,
            top_n: vec![1, 5, 10],
        }
    }
}

/// 0-based rank of the first correct entry, if any.
fn first_correct(db: &DescriptorDB, q: &Query, radius: f64) -> Result<Option<usize>> {
    Ok(rank(db, &q.descriptor, db.len())?
        .iter()
        .position(|h| db.entries[h.index].location.distance(&q.location) <= radius))
}

fn first_correct_all(db: &DescriptorDB, queries: &[Query], radius: f64) -> Result<Vec<Option<usize>>> {
    if queries.is_empty() {
        return Err(Error::Empty("query set"));
    }
    if !(radius > 0.0) {
        return Err(Error::Invalid(format!("correct radius must be > 0, got {radius}")));
    }
    queries.iter().map(|q| first_correct(db, q, radius)).collect()
}

/// Fraction of queries with a correct entry among their top `n`.
pub fn recall_at_n(db: &DescriptorDB, queries: &[Query], n: usize, radius: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::Invalid("n must be >= 1".into()));
    }
    let ranks = first_correct_all(db, queries, radius)?;
    Ok(ranks.iter().filter(|r| r.is_some_and(|r| r < n)).count() as f64 / queries.len() as f64)
}

/// `max(1, round(len / 100))`, halves rounded away from zero.
pub fn one_percent_n(db_len: usize) -> usize {
    ((db_len as f64 / 100.0).round() as usize).max(1)
}

pub fn recall_at_1pct(db: &DescriptorDB, queries: &[Query], radius: f64) -> Result<f64> {
    if db.is_empty() {
        return Err(Error::Empty("descriptor database"));
    }
    recall_at_n(db, queries, one_percent_n(db.len()), radius)
}

/// `(n, recall@n)` for `n = 1..=max_n` (capped at the database size).
pub fn recall_curve(db: &DescriptorDB, queries: &[Query], max_n: usize, radius: f64) -> Result<Vec<(usize, f64)>> {
    let ranks = first_correct_all(db, queries, radius)?;
    Ok((1..=max_n.min(db.len()))
        .map(|n| {
            let hits = ranks.iter().filter(|r| r.is_some_and(|r| r < n)).count();
            (n, hits as f64 / queries.len() as f64)
        })
        .collect())
}

pub fn curve_csv(curve: &[(usize, f64)]) -> String {
    let mut s = String::from("n,recall\n");
    for (n, r) in curve {
        s.push_str(&format!("{n},{r}\n"));
    }
    s
}

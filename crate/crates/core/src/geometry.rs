//! Point clouds, tagged submaps, and the stacked 8-neighborhood (S8N) search.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, Real};
use crate::error::{Error, Result};
use crate::io::Reader;

/// `N x 3` coordinates inside `[-1, 1]^3`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<[f32; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f32; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("point cloud"));
        }
        for (i, p) in points.iter().enumerate() {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue(format!("point {i} of cloud")));
            }
            if p.iter().any(|v| v.abs() > 1.0) {
                return Err(Error::Format(format!(
                    "point {i} {p:?} lies outside the normalized cube [-1, 1]^3"
                )));
            }
        }
        Ok(PointCloud { points })
    }

    pub fn points(&self) -> &[[f32; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Coordinates as an `N x 3` array.
    pub fn to_array<T: Real>(&self) -> Array<T> {
        let data = self
            .points
            .iter()
            .flat_map(|p| p.iter().map(|&v| T::lit(v as f64)))
            .collect();
        Array::new(vec![self.points.len(), 3], data).expect("N x 3")
    }

    /// Reorders points so that `out[i] = self[perm[i]]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        PointCloud {
            points: perm.iter().map(|&i| self.points[i]).collect(),
        }
    }
}

/// Planar world position in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub easting: f64,
    pub northing: f64,
}

impl Location {
    pub fn new(easting: f64, northing: f64) -> Self {
        Location { easting, northing }
    }

    pub fn distance(&self, other: &Location) -> f64 {
        (self.easting - other.easting).hypot(self.northing - other.northing)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Submap {
    pub id: String,
    pub cloud: PointCloud,
    pub location: Location,
}

/// Octant of `point` relative to `center`: `4[dx>=0] + 2[dy>=0] + [dz>=0]`.
pub fn octant_of(center: [f32; 3], point: [f32; 3]) -> usize {
    let bit = |a: f32, b: f32| usize::from(b - a >= 0.0);
    4 * bit(center[0], point[0]) + 2 * bit(center[1], point[1]) + bit(center[2], point[2])
}

fn sq_dist(a: [f32; 3], b: [f32; 3]) -> f32 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

/// Per point, the index of the nearest in-radius neighbor in each octant,
/// ordered `---, --+, -+-, -++, +--, +-+, ++-, +++`. Empty octants point back
/// at the center itself.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborTable {
    rows: Vec<[usize; 8]>,
}

impl NeighborTable {
    pub fn from_rows(rows: Vec<[usize; 8]>) -> Result<Self> {
        let n = rows.len();
        if let Some((i, _)) = rows.iter().enumerate().find(|(_, r)| r.iter().any(|&j| j >= n)) {
            return Err(Error::Shape(format!("neighbor row {i} indexes past {n} points")));
        }
        Ok(NeighborTable { rows })
    }

    /// Table where every octant falls back to the point itself.
    pub fn identity(n: usize) -> Self {
        NeighborTable {
            rows: (0..n).map(|i| [i; 8]).collect(),
        }
    }

    pub fn rows(&self) -> &[[usize; 8]] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Row-major `N x 8` indices, the gather order of the 2x2x2 cube.
    pub fn flat_index(&self) -> Arc<[usize]> {
        self.rows.iter().flatten().copied().collect()
    }
}

/// Stacked 8-neighborhood search by exhaustive scan. Distance ties go to the
/// lower point index.
pub fn s8n_neighbors(cloud: &PointCloud, radius: f64) -> Result<NeighborTable> {
    if !(radius > 0.0) {
        return Err(Error::Invalid(format!("search radius must be > 0, got {radius}")));
    }
    let r2 = (radius * radius) as f32;
    let pts = cloud.points();
    let rows = pts
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let mut best = [(f32::INFINITY, i); 8];
            for (j, &p) in pts.iter().enumerate() {
                if j == i {
                    continue;
                }
                let d = sq_dist(c, p);
                if d > r2 {
                    continue;
                }
                let slot = &mut best[octant_of(c, p)];
                // ascending scan, so strict < keeps the lowest index on ties
                if d < slot.0 {
                    *slot = (d, j);
                }
            }
            best.map(|(_, j)| j)
        })
        .collect();
    Ok(NeighborTable { rows })
}

/// Neighbor features arranged as `N x 2 x 2 x 2 x C`, cube cell
/// `(x-sign, y-sign, z-sign)` holding the neighbor of the matching octant.
pub fn gather_cube<T: Real>(features: &Array<T>, table: &NeighborTable) -> Result<Array<T>> {
    let (n, c) = match features.shape() {
        [n, c] => (*n, *c),
        s => return Err(Error::Shape(format!("features must be N x C, got {s:?}"))),
    };
    if table.len() != n {
        return Err(Error::Shape(format!(
            "neighbor table has {} rows for {n} feature rows",
            table.len()
        )));
    }
    let mut data = Vec::with_capacity(n * 8 * c);
    for row in table.rows() {
        for &j in row {
            if j >= n {
                return Err(Error::Shape(format!("neighbor index {j} out of range for {n} points")));
            }
            data.extend_from_slice(features.row(j));
        }
    }
    Array::new(vec![n, 2, 2, 2, c], data)
}

pub const SPC_MAGIC: &[u8; 4] = b"SPC1";
pub const SPC_VERSION: u32 = 1;

/// `SPC1` layout: magic, u32 version, u32 N, N x 3 f32, all little endian.
pub fn encode_cloud(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + cloud.len() * 12);
    out.extend_from_slice(SPC_MAGIC);
    out.extend_from_slice(&SPC_VERSION.to_le_bytes());
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for p in cloud.points() {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_cloud(bytes: &[u8]) -> Result<PointCloud> {
    let mut r = Reader::new(bytes, "point cloud");
    r.magic(SPC_MAGIC)?;
    r.version(SPC_VERSION)?;
    let n = r.u32()? as usize;
    let flat = r.f32s(n.checked_mul(3).ok_or_else(|| Error::Format("point count overflow".into()))?)?;
    r.finish()?;
    PointCloud::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

pub fn save_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, encode_cloud(cloud))?;
    Ok(())
}

pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    decode_cloud(&fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?)
}

/// One row of a catalog file: `id,file,easting,northing`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogRow {
    pub id: String,
    pub file: String,
    pub easting: f64,
    pub northing: f64,
}

pub fn write_catalog(path: &Path, rows: &[CatalogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_catalog(path: &Path) -> Result<Vec<CatalogRow>> {
    let file = std::fs::File::open(path).map_err(|e| crate::io::io_context(e, path))?;
    let mut r = csv::Reader::from_reader(file);
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "file", "easting", "northing"] {
        return Err(Error::Format(format!(
            "catalog header must be `id,file,easting,northing`, found `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let rows: Vec<CatalogRow> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    let mut seen = HashSet::new();
    for row in &rows {
        if !seen.insert(row.id.as_str()) {
            return Err(Error::Format(format!("duplicate submap id `{}` in catalog", row.id)));
        }
    }
    Ok(rows)
}

/// Loads every submap of a catalog; cloud paths are relative to the catalog's directory.
pub fn load_submaps(catalog: &Path) -> Result<Vec<Submap>> {
    let base: PathBuf = catalog.parent().map(Path::to_path_buf).unwrap_or_default();
    read_catalog(catalog)?
        .into_iter()
        .map(|row| {
            Ok(Submap {
                cloud: load_cloud(&base.join(&row.file))?,
                location: Location::new(row.easting, row.northing),
                id: row.id,
            })
        })
        .collect()
}

//! Seeded synthetic world: places on a metric map, each owning a scene built
//! from walls, boxes and poles, scanned several times ("traversals") with
//! per-point noise and resampling.
//!
//! Scene constants (meters): primitives are placed in a 36 m square around
//! the place center; walls are 5-20 long and 3-10 high, boxes have 2-8 sides,
//! poles are 0.2-0.5 in radius and 4-10 high. No ground plane is generated.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{save_cloud, write_catalog, CatalogRow, Location, PointCloud, Submap};

#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub n_places: usize,
    /// Side of the square map, meters.
    pub extent: f64,
    pub traversals: usize,
    pub points: usize,
    /// Standard deviation of per-point noise, meters.
    pub jitter_sigma: f64,
    /// Fraction of points replaced by fresh surface samples in each scan.
    pub dropout_rate: f64,
    /// Largest offset of a traversal's location tag from its place, meters.
    pub max_shift: f64,
    /// Smallest distance between place centers, meters.
    pub min_separation: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_places: 64,
            extent: 2000.0,
            traversals: 4,
            points: 256,
            jitter_sigma: 0.3,
            dropout_rate: 0.2,
            max_shift: 3.0,
            min_separation: 60.0,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_places < 2 {
            return Err(Error::Invalid(format!("need at least 2 places, got {}", self.n_places)));
        }
        if self.traversals == 0 || self.points == 0 {
            return Err(Error::Invalid("traversals and points must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Invalid(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate)));
        }
        for (name, v) in [("jitter_sigma", self.jitter_sigma), ("max_shift", self.max_shift)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.extent > 0.0 && self.min_separation > 0.0) {
            return Err(Error::Invalid("extent and min_separation must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Vertical rectangle through `center`, running along `heading`.
    Wall { center: [f64; 2], heading: f64, length: f64, height: f64 },
    /// Axis-rotated cuboid standing on the ground; the bottom face is not scanned.
    Box { center: [f64; 2], heading: f64, size: [f64; 3] },
    /// Vertical cylinder.
    Pole { center: [f64; 2], radius: f64, height: f64 },
}

fn rotate(heading: f64, u: f64, v: f64) -> [f64; 2] {
    let (s, c) = heading.sin_cos();
    [c * u - s * v, s * u + c * v]
}

impl Primitive {
    pub fn area(&self) -> f64 {
        match *self {
            Primitive::Wall { length, height, .. } => length * height,
            Primitive::Box { size: [x, y, z], .. } => x * y + 2.0 * z * (x + y),
            Primitive::Pole { radius, height, .. } => 2.0 * PI * radius * height,
        }
    }

    /// Uniform sample on the scanned surface.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        match *self {
            Primitive::Wall { center, heading, length, height } => {
                let [dx, dy] = rotate(heading, rng.gen_range(-0.5..0.5) * length, 0.0);
                [center[0] + dx, center[1] + dy, rng.gen_range(0.0..height)]
            }
            Primitive::Box { center, heading, size: [x, y, z] } => {
                let faces = [x * y, y * z, y * z, x * z, x * z];
                let mut pick = rng.gen_range(0.0..faces.iter().sum::<f64>());
                let mut face = 0;
                while face < 4 && pick >= faces[face] {
                    pick -= faces[face];
                    face += 1;
                }
                let (u, v) = (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
                let (lx, ly, lz) = match face {
                    0 => (u * x, v * y, z),
                    1 => (-0.5 * x, u * y, (v + 0.5) * z),
                    2 => (0.5 * x, u * y, (v + 0.5) * z),
                    3 => (u * x, -0.5 * y, (v + 0.5) * z),
                    _ => (u * x, 0.5 * y, (v + 0.5) * z),
                };
                let [dx, dy] = rotate(heading, lx, ly);
                [center[0] + dx, center[1] + dy, lz]
            }
            Primitive::Pole { center, radius, height } => {
                let t = rng.gen_range(0.0..2.0 * PI);
                [center[0] + radius * t.cos(), center[1] + radius * t.sin(), rng.gen_range(0.0..height)]
            }
        }
    }
}

/// Fixed structure of one place plus the base samples every scan starts from.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    pub base: Vec<[f64; 3]>,
}

impl Scene {
    pub fn random(rng: &mut ChaCha8Rng, points: usize) -> Scene {
        let mut primitives = Vec::new();
        let spot = |rng: &mut ChaCha8Rng| [rng.gen_range(-18.0..18.0), rng.gen_range(-18.0..18.0)];
        for _ in 0..rng.gen_range(1..=3) {
            let center = spot(rng);
            primitives.push(Primitive::Wall {
                center,
                heading: rng.gen_range(0.0..PI),
                length: rng.gen_range(5.0..20.0),
                height: rng.gen_range(3.0..10.0),
            });
        }
        for _ in 0..rng.gen_range(1..=4) {
            let center = spot(rng);
            primitives.push(Primitive::Box {
                center,
                heading: rng.gen_range(0.0..PI),
                size: [rng.gen_range(2.0..8.0), rng.gen_range(2.0..8.0), rng.gen_range(2.0..8.0)],
            });
        }
        for _ in 0..rng.gen_range(0..=5) {
            let center = spot(rng);
            primitives.push(Primitive::Pole {
                center,
                radius: rng.gen_range(0.2..0.5),
                height: rng.gen_range(4.0..10.0),
            });
        }
        let mut scene = Scene { primitives, base: Vec::new() };
        scene.base = (0..points).map(|_| scene.sample(rng)).collect();
        scene
    }

    /// Area-weighted surface sample.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        let total: f64 = self.primitives.iter().map(Primitive::area).sum();
        let mut pick = rng.gen_range(0.0..total);
        for p in &self.primitives {
            if pick < p.area() {
                return p.sample(rng);
            }
            pick -= p.area();
        }
        self.primitives[self.primitives.len() - 1].sample(rng)
    }
}

/// Centers a point set on its centroid and scales it by its largest absolute
/// coordinate, so it fits in `[-1, 1]`.
pub fn normalize_points(points: &[[f64; 3]]) -> Result<PointCloud> {
    if points.is_empty() {
        return Err(Error::Empty("point set"));
    }
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k] / n;
        }
    }
    let scale = points
        .iter()
        .flat_map(|p| (0..3).map(move |k| (p[k] - c[k]).abs()))
        .fold(0.0, f64::max);
    let scale = if scale > 0.0 { scale } else { 1.0 };
    PointCloud::new(
        points
            .iter()
            .map(|p| {
                let q = |k: usize| ((p[k] - c[k]) / scale).clamp(-1.0, 1.0) as f32;
                [q(0), q(1), q(2)]
            })
            .collect(),
    )
}

/// One scan of `scene`: each base point is resampled with probability
/// `dropout_rate`, then jittered, then the set is normalized.
pub fn render_scan(scene: &Scene, config: &WorldConfig, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    let noise = Normal::new(0.0, config.jitter_sigma).map_err(|e| Error::Invalid(e.to_string()))?;
    let points: Vec<[f64; 3]> = (0..config.points)
        .map(|i| {
            let base = scene.base[i % scene.base.len()];
            let mut p = if config.dropout_rate > 0.0 && rng.gen_bool(config.dropout_rate) {
                scene.sample(rng)
            } else {
                base
            };
            if config.jitter_sigma > 0.0 {
                for v in &mut p {
                    *v += noise.sample(rng);
                }
            }
            p
        })
        .collect();
    normalize_points(&points)
}

pub fn submap_id(place: usize, traversal: usize) -> String {
    format!("p{place:03}_t{traversal}")
}

/// Inverse of [`submap_id`].
pub fn parse_submap_id(id: &str) -> Option<(usize, usize)> {
    let (p, t) = id.strip_prefix('p')?.split_once("_t")?;
    Some((p.parse().ok()?, t.parse().ok()?))
}

#[derive(Clone, Debug)]
pub struct Place {
    pub center: Location,
    pub scene: Scene,
}

#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    pub places: Vec<Place>,
    /// Ordered by traversal, then place.
    pub submaps: Vec<Submap>,
}

fn place_centers(config: &WorldConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Location>> {
    let mut centers: Vec<Location> = Vec::with_capacity(config.n_places);
    let mut attempts = 0usize;
    while centers.len() < config.n_places {
        attempts += 1;
        if attempts > 10_000 * config.n_places {
            return Err(Error::Invalid(format!(
                "cannot place {} places {} m apart on a {} m map",
                config.n_places, config.min_separation, config.extent
            )));
        }
        let c = Location::new(rng.gen_range(0.0..config.extent), rng.gen_range(0.0..config.extent));
        if centers.iter().all(|o| o.distance(&c) > config.min_separation) {
            centers.push(c);
        }
    }
    Ok(centers)
}

/// Builds the world deterministically from `config.seed`. Every place and
/// traversal draws from its own ChaCha stream.
pub fn generate_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let stream = |s: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(config.seed);
        r.set_stream(s);
        r
    };
    let centers = place_centers(config, &mut stream(0))?;
    let places: Vec<Place> = centers
        .into_iter()
        .enumerate()
        .map(|(i, center)| Place {
            center,
            scene: Scene::random(&mut stream(1 + i as u64), config.points),
        })
        .collect();
    let mut submaps = Vec::with_capacity(config.n_places * config.traversals);
    for t in 0..config.traversals {
        for (i, place) in places.iter().enumerate() {
            let mut rng = stream(((i as u64 + 1) << 16) | (t as u64 + 1));
            let r = config.max_shift * rng.gen::<f64>().sqrt();
            let a = rng.gen_range(0.0..2.0 * PI);
            let location = Location::new(place.center.easting + r * a.cos(), place.center.northing + r * a.sin());
            submaps.push(Submap {
                id: submap_id(i, t),
                cloud: render_scan(&place.scene, config, &mut rng)?,
                location,
            });
        }
    }
    Ok(World {
        config: config.clone(),
        places,
        submaps,
    })
}

/// Writes one SPC1 file per submap and `catalog.csv` into `dir`; returns the
/// catalog path.
pub fn write_world(submaps: &[Submap], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut rows = Vec::with_capacity(submaps.len());
    for s in submaps {
        let file = format!("{}.spc", s.id);
        save_cloud(&dir.join(&file), &s.cloud)?;
        rows.push(CatalogRow {
            id: s.id.clone(),
            file,
            easting: s.location.easting,
            northing: s.location.northing,
        });
    }
    let catalog = dir.join("catalog.csv");
    write_catalog(&catalog, &rows)?;
    Ok(catalog)
}

/// Submaps whose id names one of `traversals`.
pub fn select_traversals(submaps: &[Submap], traversals: &[usize]) -> Result<Vec<Submap>> {
    let mut out = Vec::new();
    for s in submaps {
        let (_, t) = parse_submap_id(&s.id)
            .ok_or_else(|| Error::Format(format!("submap id `{}` does not name a traversal", s.id)))?;
        if traversals.contains(&t) {
            out.push(s.clone());
        }
    }
    Ok(out)
}

/// Symmetric mean nearest-neighbor distance between two clouds.
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> f64 {
    let one_way = |x: &PointCloud, y: &PointCloud| {
        x.points()
            .iter()
            .map(|p| {
                y.points()
                    .iter()
                    .map(|q| (0..3).map(|k| (p[k] as f64 - q[k] as f64).powi(2)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .sum::<f64>()
            / x.len() as f64
    };
    0.5 * (one_way(a, b) + one_way(b, a))
}

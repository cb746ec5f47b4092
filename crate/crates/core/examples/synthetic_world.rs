//! Generates the default desk world, checks the match-rule geometry, and
//! writes it to disk as SPC1 clouds plus a catalog.
//!
//! ```bash
//! cargo run --release --example synthetic_world -- /tmp/world
//! ```

use soenet::datagen::{chamfer_distance, generate_world, parse_submap_id, write_world, WorldConfig};

fn main() -> soenet::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/synthetic_world".into());
    let config = WorldConfig::default();
    let world = generate_world(&config)?;
    println!("{} places x {} traversals = {} scans", config.n_places, config.traversals, world.submaps.len());

    let mut worst_same: f64 = 0.0;
    let mut closest_other = f64::INFINITY;
    for a in &world.submaps {
        for b in &world.submaps {
            let (pa, pb) = (parse_submap_id(&a.id).unwrap().0, parse_submap_id(&b.id).unwrap().0);
            let d = a.location.distance(&b.location);
            if pa == pb {
                worst_same = worst_same.max(d);
            } else {
                closest_other = closest_other.min(d);
            }
        }
    }
    println!("same place: at most {worst_same:.2} m apart; different places: at least {closest_other:.1} m");

    let n = config.n_places;
    let same = chamfer_distance(&world.submaps[0].cloud, &world.submaps[n].cloud);
    let other = chamfer_distance(&world.submaps[0].cloud, &world.submaps[n + 1].cloud);
    println!("chamfer p000_t0 vs p000_t1: {same:.4}, vs p001_t1: {other:.4}");

    let catalog = write_world(&world.submaps, std::path::Path::new(&out))?;
    println!("catalog written to {}", catalog.display());
    Ok(())
}

//! Descriptor database persistence and ranking with hand-made descriptors.

use soenet::geometry::Location;
use soenet::model::GlobalDescriptor;
use soenet::retrieval::{rank, recall_curve, DbEntry, DescriptorDB, Query};

fn descriptor(angle: f32) -> GlobalDescriptor {
    GlobalDescriptor::new(vec![angle.cos(), angle.sin()]).unwrap()
}

fn main() -> soenet::Result<()> {
    let entries: Vec<DbEntry> = (0..8)
        .map(|i| DbEntry {
            id: format!("ref{i}"),
            location: Location::new(100.0 * i as f64, 0.0),
            descriptor: descriptor(0.3 * i as f32),
        })
        .collect();
    let db = DescriptorDB::new(2, entries)?;

    let path = std::env::temp_dir().join("soenet_example.sdb");
    db.save(&path)?;
    let loaded = DescriptorDB::load(&path, Some(2))?;
    assert_eq!(loaded, db);
    println!("round trip through {} ok", path.display());

    for hit in rank(&loaded, &descriptor(0.65), 3)? {
        println!("{} at {:.4}", hit.id, hit.distance);
    }

    let queries: Vec<Query> = (0..8)
        .map(|i| Query {
            id: format!("q{i}"),
            location: Location::new(100.0 * i as f64 + 5.0, 0.0),
            descriptor: descriptor(0.3 * i as f32 + 0.1),
        })
        .collect();
    for (n, r) in recall_curve(&loaded, &queries, 4, 25.0)? {
        println!("recall@{n} = {r:.3}");
    }
    Ok(())
}

//! Stacked 8-neighborhood search: for every point, the closest in-radius
//! neighbor in each of the eight octants around it.

use soenet::geometry::{octant_of, s8n_neighbors, PointCloud};

fn main() -> soenet::Result<()> {
    let cloud = PointCloud::new(vec![
        [0.0, 0.0, 0.0],
        [0.1, 0.1, 0.1],
        [-0.1, 0.05, 0.1],
        [0.1, -0.1, -0.1],
        [-0.05, -0.05, -0.05],
        [0.9, 0.9, 0.9],
    ])?;
    let table = s8n_neighbors(&cloud, 0.3)?;

    for (i, row) in table.rows().iter().enumerate() {
        println!("point {i}: {row:?}");
        for (k, &j) in row.iter().enumerate() {
            if j != i {
                assert_eq!(octant_of(cloud.points()[i], cloud.points()[j]), k);
            }
        }
    }
    // the isolated point falls back to itself everywhere
    assert!(table.rows()[5].iter().all(|&j| j == 5));
    Ok(())
}

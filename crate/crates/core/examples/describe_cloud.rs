//! Global descriptor of a point cloud, its unit norm, and its invariance to
//! point order.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use soenet::geometry::PointCloud;
use soenet::model::{ModelConfig, SoeNet};

fn main() -> soenet::Result<()> {
    let config = ModelConfig::desk();
    print!("{}", config.to_text());
    let net = SoeNet::<f32>::init(config.clone(), 7)?;
    println!("parameters: {}", net.params.num_values());

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let points: Vec<[f32; 3]> = (0..config.n_points)
        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
        .collect();
    let cloud = PointCloud::new(points)?;

    let d = net.describe(&cloud)?;
    let norm: f32 = d.values().iter().map(|v| v * v).sum::<f32>().sqrt();
    println!("descriptor ({} values, norm {norm:.6}): {:?}", d.dim(), &d.values()[..6]);

    let mut perm: Vec<usize> = (0..cloud.len()).collect();
    perm.shuffle(&mut rng);
    let shuffled = net.describe(&cloud.permuted(&perm))?;
    println!("distance to shuffled copy: {:.2e}", d.distance(&shuffled));

    // attention starts with a zero gate, so before training it passes features through
    for (oe, att, name) in [(false, true, "no OE"), (true, false, "no attention")] {
        let cfg = ModelConfig { use_oe: oe, use_attention: att, ..config.clone() };
        let ablated = SoeNet::<f32>::init(cfg, 7)?;
        println!("{name}: first values {:?}", &ablated.describe(&cloud)?.values()[..3]);
    }
    Ok(())
}

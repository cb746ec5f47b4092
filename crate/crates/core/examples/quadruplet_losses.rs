//! The three tuple losses on one hand-made tuple, with the hardest positive
//! and hardest negative picked out.

use soenet::losses::{hphn_mine, lazy_quadruplet_loss, loss_value, LossConfig, LossKind, TupleBatch};

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn main() -> soenet::Result<()> {
    let tuple = TupleBatch {
        anchor: unit(&[1.0, 0.0, 0.0]),
        positives: vec![unit(&[0.9, 0.1, 0.0]), unit(&[0.6, 0.5, 0.1])],
        negatives: vec![unit(&[0.0, 1.0, 0.0]), unit(&[0.5, 0.0, 0.8]), unit(&[-1.0, 0.1, 0.0])],
        other: unit(&[0.2, 0.0, 1.0]),
    };
    let d = tuple.distances()?;
    println!("d(a, p) = {:?}", d.anchor_pos);
    println!("d(a, n) = {:?}", d.anchor_neg);
    println!("d(n*, n) = {:?}", d.other_neg);

    let m = hphn_mine(&d);
    println!(
        "hardest positive #{} at {:.4}; hardest negative #{} ({:?} branch) at {:.4}",
        m.hardest_positive, m.d_hp, m.hardest_negative, m.branch, m.d_hn
    );

    for kind in LossKind::ALL {
        let cfg = LossConfig { kind, ..LossConfig::default() };
        println!("{kind:>10}: {:.4}", loss_value(&d, &cfg));
    }
    println!("lazy with tighter margins: {:.4}", lazy_quadruplet_loss(&d, 0.1, 0.05));
    Ok(())
}

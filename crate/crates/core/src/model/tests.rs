use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::{Array, Tape};
use crate::geometry::{s8n_neighbors, NeighborTable, PointCloud};

fn tiny() -> ModelConfig {
    ModelConfig {
        mlp_dims: vec![4, 6],
        vlad_k: 3,
        out_dim: 5,
        s8n_radius: 0.8,
        ..ModelConfig::desk()
    }
}

/// Initialized params with every tensor (biases and mu included) randomized.
fn random_params(config: &ModelConfig, seed: u64) -> ModelParams<f64> {
    let mut p = ModelParams::<f64>::init(config, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for (_, t) in p.tensors_mut() {
        for v in t.data_mut() {
            if *v == 0.0 {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }
    p
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect(),
    )
    .unwrap()
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Vec<Vec<f64>> {
    (0..r).map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn to_array(m: &[Vec<f64>]) -> Array<f64> {
    Array::new(vec![m.len(), m[0].len()], m.concat()).unwrap()
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Loop-nest re-implementation of the OE unit for one stage.
fn oe_oracle(f: &[Vec<f64>], table: &NeighborTable, p: &ModelParams<f64>, prefix: &str) -> Vec<Vec<f64>> {
    let c = f[0].len();
    let get = |n: &str| p.get(&format!("{prefix}.{n}")).unwrap().data().to_vec();
    let (wx, wy, wz) = (get("w_x"), get("w_y"), get("w_z"));
    let (bx, by, bz) = (get("b_x"), get("b_y"), get("b_z"));
    table
        .rows()
        .iter()
        .map(|row| {
            (0..c)
                .map(|ch| {
                    let v = |a: usize, b: usize, z: usize| f[row[4 * a + 2 * b + z]][ch];
                    let mut oexy = [0.0; 2];
                    for (z, o) in oexy.iter_mut().enumerate() {
                        let oex0 = relu(wx[ch] * v(0, 0, z) + wx[c + ch] * v(1, 0, z) + bx[ch]);
                        let oex1 = relu(wx[ch] * v(0, 1, z) + wx[c + ch] * v(1, 1, z) + bx[ch]);
                        *o = relu(wy[ch] * oex0 + wy[c + ch] * oex1 + by[ch]);
                    }
                    relu(wz[ch] * oexy[0] + wz[c + ch] * oexy[1] + bz[ch])
                })
                .collect()
        })
        .collect()
}

#[test]
fn oe_unit_matches_loop_nest() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cloud = random_cloud(&mut rng, 4);
    let table = s8n_neighbors(&cloud, 1.5).unwrap();
    let params = random_params(&cfg, 11);
    let feats = random_matrix(&mut rng, 4, 4);
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, &params).unwrap();
    let x = tape.constant(to_array(&feats)).unwrap();
    let out = oe_unit(&mut tape, x, &table.flat_index(), &vars, "pointoe.1.oe").unwrap();
    let expect = oe_oracle(&feats, &table, &params, "pointoe.1.oe");
    assert_eq!(tape.value(out).data(), expect.concat().as_slice());
}

#[test]
fn oe_unit_zero_and_averaging_cases() {
    let cfg = tiny();
    let mut params = ModelParams::<f64>::init(&cfg, 1);
    for (name, t) in params.tensors_mut() {
        if name.starts_with("pointoe.1.oe.w_") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let feats = vec![vec![0.3, 1.0, 0.0, 2.0], vec![0.5, 0.25, 1.0, 0.0]];
    let run = |params: &ModelParams<f64>| {
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, params).unwrap();
        let x = tape.constant(to_array(&feats)).unwrap();
        let out = oe_unit(&mut tape, x, &NeighborTable::identity(2).flat_index(), &vars, "pointoe.1.oe").unwrap();
        tape.value(out).data().to_vec()
    };
    assert!(run(&params).iter().all(|&v| v == 0.0));
    for (name, t) in params.tensors_mut() {
        if name.starts_with("pointoe.1.oe.w_") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.5);
        }
    }
    assert_eq!(run(&params), feats.concat());
}

#[test]
fn pointoe_shapes_and_single_point() {
    let cfg = ModelConfig::desk();
    let params = ModelParams::<f32>::init(&cfg, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cloud = random_cloud(&mut rng, 256);
    let table = s8n_neighbors(&cloud, cfg.s8n_radius).unwrap();
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, &params).unwrap();
    let coords = tape.constant(cloud.to_array()).unwrap();
    let out = pointoe(&mut tape, coords, &table, &cfg, &vars).unwrap();
    assert_eq!(tape.value(out).shape(), &[256, 128]);

    let one = PointCloud::new(vec![[0.1, -0.2, 0.3]]).unwrap();
    let net = SoeNet::<f32>::init(cfg, 0).unwrap();
    assert!(net.describe(&one).is_ok());
}

#[test]
fn pointoe_is_permutation_equivariant() {
    let cfg = tiny();
    let params = random_params(&cfg, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cloud = random_cloud(&mut rng, 12);
    let perm: Vec<usize> = (0..12).rev().collect();
    let local = |c: &PointCloud| {
        let table = s8n_neighbors(c, cfg.s8n_radius).unwrap();
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &params).unwrap();
        let coords = tape.constant(c.to_array()).unwrap();
        let out = pointoe(&mut tape, coords, &table, &cfg, &vars).unwrap();
        tape.value(out).clone()
    };
    let (a, b) = (local(&cloud), local(&cloud.permuted(&perm)));
    for (i, &src) in perm.iter().enumerate() {
        assert_eq!(b.row(i), a.row(src));
    }
}

#[test]
fn attention_identity_at_zero_scale_and_singleton() {
    let cfg = tiny();
    let mut params = random_params(&cfg, 9);
    params.get_mut("attention.mu").unwrap().data_mut()[0] = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let feats = to_array(&random_matrix(&mut rng, 7, 6));
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, &params).unwrap();
    let x = tape.constant(feats.clone()).unwrap();
    let att = self_attention(&mut tape, x, &vars).unwrap();
    assert_eq!(tape.value(att.output), &feats);

    // N = 1: W = [[1]], output = mu * Z + F
    params.get_mut("attention.mu").unwrap().data_mut()[0] = 0.7;
    let single = to_array(&random_matrix(&mut rng, 1, 6));
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, &params).unwrap();
    let x = tape.constant(single.clone()).unwrap();
    let att = self_attention(&mut tape, x, &vars).unwrap();
    assert_eq!(tape.value(att.attention).data(), &[1.0]);
    let wz = params.get("attention.z.weight").unwrap();
    let bz = params.get("attention.z.bias").unwrap();
    for ch in 0..6 {
        let z: f64 = (0..6).map(|i| single.data()[i] * wz.data()[i * 6 + ch]).sum::<f64>() + bz.data()[ch];
        let expect = 0.7 * z + single.data()[ch];
        assert!((tape.value(att.output).data()[ch] - expect).abs() < 1e-12);
    }
}

#[test]
fn attention_matches_dense_loops() {
    let cfg = tiny();
    let params = random_params(&cfg, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f = random_matrix(&mut rng, 5, 6);
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, &params).unwrap();
    let x = tape.constant(to_array(&f)).unwrap();
    let att = self_attention(&mut tape, x, &vars).unwrap();

    let proj = |name: &str| -> Vec<Vec<f64>> {
        let w = params.get(&format!("attention.{name}.weight")).unwrap().data();
        let b = params.get(&format!("attention.{name}.bias")).unwrap().data();
        f.iter()
            .map(|row| (0..6).map(|o| (0..6).map(|i| row[i] * w[i * 6 + o]).sum::<f64>() + b[o]).collect())
            .collect()
    };
    let (xm, ym, zm) = (proj("x"), proj("y"), proj("z"));
    let mut w = vec![vec![0.0; 5]; 5];
    for j in 0..5 {
        let logits: Vec<f64> = (0..5).map(|i| (0..6).map(|c| ym[j][c] * xm[i][c]).sum()).collect();
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for i in 0..5 {
            w[j][i] = (logits[i] - m).exp() / z;
        }
    }
    let mu = params.get("attention.mu").unwrap().data()[0];
    let wv = tape.value(att.attention);
    for j in 0..5 {
        let row: f64 = wv.row(j).iter().sum();
        assert!((row - 1.0).abs() < 1e-6);
        for i in 0..5 {
            assert!((wv.row(j)[i] - w[j][i]).abs() < 1e-12);
        }
    }
    for i in 0..5 {
        for c in 0..6 {
            let a: f64 = (0..5).map(|j| w[j][i] * zm[j][c]).sum();
            let expect = mu * a + f[i][c];
            assert!((tape.value(att.output).row(i)[c] - expect).abs() < 1e-12);
        }
    }
}

fn vlad_of(params: &ModelParams<f64>, f: &[Vec<f64>]) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params).unwrap();
    let x = tape.constant(to_array(f)).unwrap();
    let out = netvlad(&mut tape, x, &vars).unwrap();
    tape.value(out).data().to_vec()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

#[test]
fn netvlad_matches_direct_formula() {
    let cfg = ModelConfig { mlp_dims: vec![2], vlad_k: 2, out_dim: 2, ..tiny() };
    let params = random_params(&cfg, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let f = random_matrix(&mut rng, 3, 2);
    let w = params.get("netvlad.assign.weight").unwrap().data();
    let b = params.get("netvlad.assign.bias").unwrap().data();
    let v = params.get("netvlad.centers").unwrap().data();
    let mut blocks = vec![vec![0.0; 2]; 2];
    for fi in &f {
        let logits: Vec<f64> = (0..2).map(|k| fi[0] * w[k] + fi[1] * w[2 + k] + b[k]).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for k in 0..2 {
            let a = logits[k].exp() / z;
            for c in 0..2 {
                blocks[k][c] += a * (fi[c] - v[k * 2 + c]);
            }
        }
    }
    blocks.iter_mut().for_each(|b| normalize(b));
    let mut expect = blocks.concat();
    normalize(&mut expect);
    let got = vlad_of(&params, &f);
    for (g, e) in got.iter().zip(&expect) {
        assert!((g - e).abs() < 1e-12);
    }
}

#[test]
fn netvlad_single_cluster_and_order_invariance() {
    let cfg = ModelConfig { mlp_dims: vec![3], vlad_k: 1, out_dim: 1, ..tiny() };
    let params = random_params(&cfg, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f = random_matrix(&mut rng, 6, 3);
    let v = params.get("netvlad.centers").unwrap().data();
    let mut expect: Vec<f64> = (0..3).map(|c| f.iter().map(|r| r[c] - v[c]).sum()).collect();
    normalize(&mut expect);
    let got = vlad_of(&params, &f);
    for (g, e) in got.iter().zip(&expect) {
        assert!((g - e).abs() < 1e-12);
    }
    let mut rev = f.clone();
    rev.reverse();
    for (a, b) in vlad_of(&params, &rev).iter().zip(&got) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn head_slice_and_scale_invariance() {
    let cfg = ModelConfig { mlp_dims: vec![2], vlad_k: 2, out_dim: 2, ..tiny() };
    let mut params = random_params(&cfg, 1);
    // identity slice: first two of four inputs
    let w = params.get_mut("head.weight").unwrap();
    w.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    let input = [0.5, 0.5, 0.5, 0.5];
    let run = |params: &ModelParams<f64>| {
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, params).unwrap();
        let x = tape.constant(Array::from_f64(&[1, 4], &input).unwrap()).unwrap();
        let out = head(&mut tape, x, &vars).unwrap();
        tape.value(out).data().to_vec()
    };
    let s = 0.5f64.sqrt();
    let got = run(&params);
    assert!((got[0] - s).abs() < 1e-15 && (got[1] - s).abs() < 1e-15);

    let mut scaled = random_params(&cfg, 1);
    let base = run(&scaled);
    scaled.get_mut("head.weight").unwrap().data_mut().iter_mut().for_each(|v| *v *= 3.7);
    for (a, b) in run(&scaled).iter().zip(&base) {
        assert!((a - b).abs() < 1e-12);
    }

    let mut zero = random_params(&cfg, 1);
    zero.get_mut("head.weight").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, &zero).unwrap();
    let x = tape.constant(Array::from_f64(&[1, 4], &input).unwrap()).unwrap();
    assert!(matches!(head(&mut tape, x, &vars), Err(crate::Error::Degenerate { .. })));
}

#[test]
fn full_size_config_emits_256_dims() {
    let net = SoeNet::<f32>::init(ModelConfig::full_size(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let d = net.describe(&random_cloud(&mut rng, 32)).unwrap();
    assert_eq!(d.dim(), 256);
}

#[test]
fn descriptor_invariance_distinctness_and_budget() {
    let net = SoeNet::<f32>::init(ModelConfig::desk(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = random_cloud(&mut rng, 256);
    let b = random_cloud(&mut rng, 256);
    let start = Instant::now();
    let da = net.describe(&a).unwrap();
    assert!(start.elapsed().as_secs_f64() < 1.0);
    let mut perm: Vec<usize> = (0..256).collect();
    rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
    let dp = net.describe(&a.permuted(&perm)).unwrap();
    let max_diff = da.values().iter().zip(dp.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
    assert!(max_diff < 1e-5, "{max_diff}");
    let db = net.describe(&b).unwrap();
    assert!(da.distance(&db) > 1e-4);
    let norm: f32 = da.values().iter().map(|v| v * v).sum::<f32>().sqrt();
    assert!((norm - 1.0).abs() < 1e-5);
}

#[test]
fn ablated_networks_still_describe() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cloud = random_cloud(&mut rng, 64);
    for (oe, att) in [(false, true), (true, false), (false, false)] {
        let cfg = ModelConfig { use_oe: oe, use_attention: att, ..ModelConfig::desk() };
        let net = SoeNet::<f32>::init(cfg, 0).unwrap();
        assert_eq!(net.describe(&cloud).unwrap().dim(), 32);
    }
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let cfg = ModelConfig::desk();
    let params = ModelParams::<f32>::init(&cfg, 42);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.sck");
    params.save(&path).unwrap();
    assert_eq!(ModelParams::<f32>::load(&path, &cfg).unwrap(), params);

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(ModelParams::<f32>::load(&path, &cfg), Err(crate::Error::Format(_))));

    params.save(&path).unwrap();
    let wrong_k = ModelConfig { vlad_k: 4, ..cfg };
    match ModelParams::<f32>::load(&path, &wrong_k) {
        Err(crate::Error::TensorMismatch { name, .. }) => assert!(name.starts_with("netvlad") || name.starts_with("head")),
        other => panic!("expected tensor mismatch, got {other:?}"),
    }
}

#[test]
fn init_has_zero_scale_and_expected_tensor_count() {
    let cfg = ModelConfig::desk();
    let p = ModelParams::<f32>::init(&cfg, 0);
    assert_eq!(p.get("attention.mu").unwrap().data(), &[0.0]);
    assert_eq!(p.tensors().len(), tensor_specs(&cfg).len());
    assert_eq!(p.get("pointoe.0.oe.w_x").unwrap().shape(), &[2, 1, 1, 3]);
    assert_eq!(p.get("pointoe.3.oe.w_z").unwrap().shape(), &[1, 1, 2, 64]);
    assert_eq!(p.get("head.weight").unwrap().shape(), &[128 * 8, 32]);
}

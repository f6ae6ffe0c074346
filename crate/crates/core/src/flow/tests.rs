use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::*;
use crate::kernel::{render_kernel, sample_params};
use crate::rng::stream;

fn tiny(dim: usize, blocks: usize, seed: u64) -> FlowModel {
    FlowModel::new(&FlowConfig {
        scale: 2,
        dim,
        blocks,
        depth: 3,
        hidden: 6,
        seed,
    })
    .unwrap()
}

/// Random parameters and statistics so every layer is far from identity.
fn randomize(model: &mut FlowModel, seed: u64) {
    let mut rng = stream(seed, "test/randomize");
    let p: Vec<f64> = (0..model.parameter_count()).map(|_| rng.random_range(-0.6..0.6)).collect();
    model.set_parameters(&p);
    for b in model.blocks_mut() {
        for m in &mut b.norm.running_mean {
            *m = rng.random_range(-0.5..0.5);
        }
        for v in &mut b.norm.running_var {
            *v = rng.random_range(0.2..2.0);
        }
    }
}

/// log|det| by Gaussian elimination with partial pivoting.
fn log_abs_det(mut a: Vec<f64>, n: usize) -> f64 {
    let mut acc = 0.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().partial_cmp(&a[j * n + col].abs()).unwrap())
            .unwrap();
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
        }
        let d = a[col * n + col];
        acc += d.abs().ln();
        for r in col + 1..n {
            let f = a[r * n + col] / d;
            for k in col..n {
                a[r * n + k] -= f * a[col * n + k];
            }
        }
    }
    acc
}

fn fd_log_det(model: &FlowModel, x: &[f64]) -> f64 {
    let n = x.len();
    let h = 1e-5;
    let mut jac = vec![0.0; n * n];
    for j in 0..n {
        let mut hi = x.to_vec();
        let mut lo = x.to_vec();
        hi[j] += h;
        lo[j] -= h;
        let (zh, _) = model.forward_batch(&hi).unwrap();
        let (zl, _) = model.forward_batch(&lo).unwrap();
        for i in 0..n {
            jac[i * n + j] = (zh[i] - zl[i]) / (2.0 * h);
        }
    }
    log_abs_det(jac, n)
}

fn gaussian_kernels(n: usize, seed: u64) -> Vec<Kernel> {
    let mut rng = stream(seed, "test/kernels");
    (0..n)
        .map(|_| render_kernel(&sample_params(2, &mut rng).unwrap(), 11).unwrap())
        .collect()
}

#[test]
fn fresh_model_is_identity() {
    let model = FlowModel::identity(&FlowConfig::for_scale(2, 1)).unwrap();
    let k = &gaussian_kernels(1, 3)[0];
    let (z, ld) = model.flow_forward(k).unwrap();
    assert_eq!(z.values(), k.weights());
    assert_eq!(ld, 0.0);
    let back = model.flow_inverse(&LatentVector(k.weights().to_vec())).unwrap();
    assert_eq!(&back, k);
}

#[test]
fn architecture_follows_scale() {
    let cfg = FlowConfig::for_scale(4, 0);
    assert_eq!((cfg.dim, cfg.blocks, cfg.depth, cfg.hidden), (361, 5, 3, 25));
    let model = FlowModel::new(&FlowConfig::for_scale(2, 0)).unwrap();
    let b0 = &model.blocks()[0];
    assert_eq!(b0.scale_net.input_dim(), 61);
    assert_eq!(b0.scale_net.output_dim(), 60);
    assert_eq!(model.blocks()[1].scale_net.input_dim(), 60);
    assert_eq!(model.blocks()[1].scale_net.output_dim(), 61);
    assert_eq!(b0.scale_net.layers.len(), 3);
    assert_eq!(b0.scale_net.layers[1].rows, 15);
    for b in model.blocks() {
        assert!(crate::diff::is_permutation(&b.perm));
    }
}

#[test]
fn permutation_only_model_has_zero_log_det() {
    let model = tiny(8, 3, 4);
    let mut rng = stream(1, "x");
    let x: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
    let (z, ld) = model.forward_batch(&x).unwrap();
    assert_eq!(ld[0], 0.0);
    let mut sorted_z = z.clone();
    let mut sorted_x = x.clone();
    sorted_z.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted_x.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(sorted_z, sorted_x);
}

#[test]
fn log_det_matches_finite_difference_jacobian() {
    for (dim, seed) in [(2usize, 1u64), (4, 2), (8, 3)] {
        let mut model = tiny(dim, 3, seed);
        randomize(&mut model, seed);
        let mut rng = stream(seed, "x");
        for _ in 0..10 {
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (_, ld) = model.forward_batch(&x).unwrap();
            let oracle = fd_log_det(&model, &x);
            let rel = (ld[0] - oracle).abs() / oracle.abs().max(1.0);
            assert!(rel < 1e-4, "dim {dim}: {} vs {oracle}", ld[0]);
        }
    }
}

#[test]
fn normalization_log_det_is_input_independent() {
    let mut model = tiny(4, 1, 9);
    randomize(&mut model, 9);
    // zero the coupling so only the normalization contributes
    let block = &mut model.blocks_mut()[0];
    for net in [&mut block.scale_net, &mut block.shift_net] {
        let last = net.layers.last_mut().unwrap();
        last.weights.iter_mut().for_each(|w| *w = 0.0);
        last.biases.iter_mut().for_each(|w| *w = 0.0);
    }
    let expected = model.blocks()[0].norm.log_det();
    for x in [[0.1, 0.2, 0.3, 0.4], [-3.0, 2.0, 0.0, 1.0]] {
        let (_, ld) = model.forward_batch(&x).unwrap();
        assert!((ld[0] - expected).abs() < 1e-12);
    }
}

#[test]
fn round_trip_random_model() {
    let mut model = FlowModel::new(&FlowConfig::for_scale(2, 5)).unwrap();
    randomize(&mut model, 5);
    let ks = gaussian_kernels(50, 8);
    let rows = flatten(&ks, 121).unwrap();
    let (z, _) = model.forward_batch(&rows).unwrap();
    let back = model.inverse_batch(&z).unwrap();
    let err = rows.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-8, "{err}");
}

#[test]
fn nll_identity_examples() {
    let model = tiny(4, 2, 0);
    let base = 2.0 * LN_2PI_TEST;
    let zero = model.nll_rows(&[0.0; 4]).unwrap();
    assert!((zero - base).abs() < 1e-12);
    let unit = model.nll_rows(&[0.5, 0.5, 0.5, 0.5]).unwrap();
    assert!((unit - (0.5 + base)).abs() < 1e-12);
}

const LN_2PI_TEST: f64 = 1.8378770664093453;

#[test]
fn nll_gradient_matches_finite_differences() {
    let mut model = tiny(6, 3, 12);
    randomize(&mut model, 12);
    let mut rng = stream(3, "rows");
    let rows: Vec<f64> = (0..6 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (loss, grad) = model.nll_gradient(&rows).unwrap();
    assert!((loss - model.nll_rows(&rows).unwrap()).abs() < 1e-12);
    let base = model.parameters();
    let h = 1e-5;
    for idx in (0..base.len()).step_by(7) {
        let mut p = base.clone();
        p[idx] += h;
        model.set_parameters(&p);
        let up = model.nll_rows(&rows).unwrap();
        p[idx] -= 2.0 * h;
        model.set_parameters(&p);
        let down = model.nll_rows(&rows).unwrap();
        model.set_parameters(&base);
        let fd = (up - down) / (2.0 * h);
        let rel = (fd - grad[idx]).abs() / fd.abs().max(grad[idx].abs()).max(1e-3);
        assert!(rel < 1e-4, "param {idx}: {fd} vs {}", grad[idx]);
    }
}

#[test]
fn codec_round_trip_is_bit_exact() {
    let mut model = tiny(8, 3, 21);
    randomize(&mut model, 21);
    assert_eq!(save(&model), Err(CodecError::NotFrozen));
    model.freeze();
    let bytes = save(&model).unwrap();
    let loaded = load(&bytes).unwrap();
    assert_eq!(loaded, model);
    assert_eq!(save(&loaded).unwrap(), bytes);
    let rows: Vec<f64> = (0..16).map(|i| i as f64 * 0.1 - 0.5).collect();
    assert_eq!(
        loaded.nll_rows(&rows).unwrap().to_bits(),
        model.nll_rows(&rows).unwrap().to_bits()
    );
}

#[test]
fn codec_rejects_damage() {
    let mut model = tiny(4, 2, 1);
    model.freeze();
    let bytes = save(&model).unwrap();
    assert_eq!(load(b"FKP2rest"), Err(CodecError::BadMagic));
    assert!(matches!(load(&bytes[..bytes.len() - 3]), Err(CodecError::Truncated { .. })));
    let mut extra = bytes.clone();
    extra.push(0);
    assert_eq!(load(&extra), Err(CodecError::Trailing(1)));
    // duplicate a permutation entry: block 0 perm starts after 4 vectors of D reals
    let perm_at = 4 + 1 + 4 + 1 + 4 * 4 * 8;
    let mut bad = bytes.clone();
    let first = bad[perm_at..perm_at + 4].to_vec();
    bad[perm_at + 4..perm_at + 8].copy_from_slice(&first);
    assert!(matches!(load(&bad), Err(CodecError::Invalid { offset: 10, .. })));
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let cfg = TrainConfig {
        iterations: 60,
        batch_size: 16,
        learning_rate: 1e-3,
        seed: 4,
        shifted: true,
        log_every: 20,
    };
    let model = FlowModel::new(&FlowConfig::for_scale(2, 4)).unwrap();
    let mut losses = Vec::new();
    let mut logs = 0;
    let a = train(model.clone(), &cfg, &mut |p| {
        losses.push(p.nll);
        logs += p.log_point as usize;
    })
    .unwrap();
    let b = train(model, &cfg, &mut |_| {}).unwrap();
    assert!(a.is_frozen());
    assert_eq!(logs, 3);
    assert_eq!(save(&a).unwrap(), save(&b).unwrap());
    let early: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let late: f64 = losses[losses.len() - 5..].iter().sum::<f64>() / 5.0;
    assert!(late < early, "{early} -> {late}");
}

#[test]
fn sampling_contract() {
    let mut model = FlowModel::new(&FlowConfig::for_scale(2, 4)).unwrap();
    randomize(&mut model, 4);
    assert_eq!(sample(&model, &mut stream(1, "s"), true), Err(FlowError::NotFrozen));
    model.freeze();
    let a = sample(&model, &mut stream(1, "s"), true).unwrap();
    let b = sample(&model, &mut stream(1, "s"), true).unwrap();
    assert_eq!(a, b);
    assert!((a.latent.norm() - 11.0).abs() < 1e-9);
    assert!((a.kernel.sum() - 1.0).abs() < 1e-12);
    assert!(a.kernel.weights().iter().all(|&w| w >= 0.0));
    let raw = model.flow_inverse(&a.latent).unwrap();
    assert_eq!(raw.sum(), a.raw_sum);
    assert_eq!(raw.negative_mass(), a.raw_negative_mass);
    let free = sample(&model, &mut stream(1, "s"), false).unwrap();
    assert!((free.latent.norm() - 11.0).abs() > 1e-6);
}

#[test]
fn sphere_projection() {
    let p = project_to_sphere(&[3.0, 4.0]).unwrap();
    assert!((p.norm() - 2f64.sqrt()).abs() < 1e-15);
    assert!(project_to_sphere(&[0.0, 0.0]).is_none());
}

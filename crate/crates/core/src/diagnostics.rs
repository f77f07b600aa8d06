//! Runtime self-checks: the finite-difference gradient suite and a quick
//! invariant sweep used by the `gradcheck` and `selftest` commands.

use serde::Serialize;

use crate::attention::{CafBlock, CafConfig};
use crate::checkpoint::Checkpoint;
use crate::data::{rgb_to_ycbcr, ycbcr_to_rgb, Raster};
use crate::error::Result;
use crate::losses::{content_loss, grad_loss, ssim_loss, total_loss, LossConfig, Reduction, SsimConfig};
use crate::metrics;
use crate::network::{AdaFuseModel, ModelConfig};
use crate::param::{Initializer, ParamStore};
use crate::spectral::{dft2d_naive, fft2d, ifft2d, log_magnitude_spectrum, DEFAULT_LOG_EPS};
use crate::tensor::gradcheck::{check_gradient, random_tensor};
use crate::tensor::Tensor;

pub const ELEMENTWISE_TOL: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-4;
pub const DEFAULT_SEEDS: u64 = 20;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn below(name: &str, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            value,
            tolerance,
            passed: value < tolerance,
        }
    }
}

fn unit_interval(shape: &[usize], seed: u64) -> Tensor<f64> {
    let z = random_tensor::<f64>(shape, seed, 1.0);
    Tensor::new(z.data().iter().map(|v| 0.5 + 0.45 * v.tanh()).collect(), shape).expect("shape")
}

/// Worst relative error of `f(x)·r` summed, over the listed inputs.
fn weighted<F>(f: F, x: &Tensor<f64>, seed: u64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let probe = f(x)?;
    let r = random_tensor::<f64>(probe.shape(), seed ^ 0x5eed, 1.0);
    check_gradient(|t| f(t)?.mul(&r)?.sum(), x)
}

/// CAF block on 2×8×8 inputs with projections scaled up so attention is
/// far from uniform.
pub fn sharp_caf(seed: u64, share_branches: bool) -> Result<(ParamStore<f64>, CafBlock)> {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed, 0);
    let config = CafConfig {
        share_branches,
        ..CafConfig::new(2, 8, 8, 4, 16, 2)
    };
    let blk = CafBlock::build(&mut store, &mut init, "caf", config)?;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.name(id).ends_with("gain") {
            let v = store.get(id).data().iter().map(|x| x * 10.0).collect();
            store.set(id, v)?;
        }
    }
    Ok((store, blk))
}

type Case = (&'static str, f64, fn(u64) -> Result<f64>);

fn cases() -> Vec<Case> {
    vec![
        ("add", ELEMENTWISE_TOL, |s| {
            let y = random_tensor(&[2, 3, 4], s + 1, 1.0);
            weighted(|x| x.add(&y), &random_tensor(&[2, 3, 4], s, 1.0), s)
        }),
        ("mul", ELEMENTWISE_TOL, |s| {
            let y = random_tensor(&[2, 3, 4], s + 1, 1.0);
            weighted(|x| x.mul(&y), &random_tensor(&[2, 3, 4], s, 1.0), s)
        }),
        ("gelu", ELEMENTWISE_TOL, |s| {
            weighted(|x| x.gelu(), &random_tensor(&[2, 3, 4], s, 2.0), s)
        }),
        ("matmul", OP_TOL, |s| {
            let (a, b) = (random_tensor(&[2, 3, 4], s, 1.0), random_tensor(&[2, 4, 5], s + 1, 1.0));
            Ok(weighted(|x| x.matmul(&b), &a, s)?.max(weighted(|x| a.matmul(x), &b, s)?))
        }),
        ("conv2d", OP_TOL, |s| {
            let x = random_tensor(&[2, 6, 6], s, 1.0);
            let w = random_tensor(&[3, 2, 3, 3], s + 1, 0.5);
            let b = random_tensor(&[3], s + 2, 0.5);
            let ex = weighted(|t| t.conv2d(&w, &b), &x, s)?;
            let ew = weighted(|t| x.conv2d(t, &b), &w, s)?;
            let eb = weighted(|t| x.conv2d(&w, t), &b, s)?;
            Ok(ex.max(ew).max(eb))
        }),
        ("maxpool2d", OP_TOL, |s| {
            weighted(|x| x.maxpool2d(), &random_tensor(&[2, 6, 6], s, 1.0), s)
        }),
        ("upsample2x", OP_TOL, |s| {
            weighted(|x| x.upsample2x(), &random_tensor(&[2, 3, 5], s, 1.0), s)
        }),
        ("layernorm", OP_TOL, |s| {
            let x = random_tensor(&[4, 6], s, 1.0);
            let g = random_tensor(&[6], s + 1, 1.0);
            let b = random_tensor(&[6], s + 2, 1.0);
            Ok(weighted(|t| t.layernorm(&g, &b), &x, s)?.max(weighted(|t| x.layernorm(t, &b), &g, s)?))
        }),
        ("softmax", OP_TOL, |s| weighted(|x| x.softmax(), &random_tensor(&[3, 5], s, 1.0), s)),
        ("fft_log_magnitude", OP_TOL, |s| {
            weighted(
                |x| log_magnitude_spectrum(x, DEFAULT_LOG_EPS),
                &random_tensor(&[2, 8, 8], s, 1.0),
                s,
            )
        }),
        ("content_loss", OP_TOL, |s| {
            let (a, b) = (unit_interval(&[1, 16, 16], s + 1), unit_interval(&[1, 16, 16], s + 2));
            check_gradient(|f| content_loss(f, &a, &b, Reduction::Mean), &unit_interval(&[1, 16, 16], s))
        }),
        ("grad_loss", OP_TOL, |s| {
            let (a, b) = (unit_interval(&[1, 16, 16], s + 1), unit_interval(&[1, 16, 16], s + 2));
            check_gradient(|f| grad_loss(f, &a, &b, Reduction::Mean), &unit_interval(&[1, 16, 16], s))
        }),
        ("ssim_loss", OP_TOL, |s| {
            let (a, b) = (unit_interval(&[1, 16, 16], s + 1), unit_interval(&[1, 16, 16], s + 2));
            let cfg = SsimConfig::default();
            check_gradient(|f| ssim_loss(f, &a, &b, 0.5, 0.5, &cfg), &unit_interval(&[1, 16, 16], s))
        }),
        ("caf", OP_TOL, |s| {
            let (store, blk) = sharp_caf(s, true)?;
            let a = random_tensor(&[2, 8, 8], s + 1, 1.0);
            let b = random_tensor(&[2, 8, 8], s + 2, 1.0);
            let ea = weighted(|x| blk.fuse(&store, x, &b), &a, s)?;
            let eb = weighted(|x| blk.fuse(&store, &a, x), &b, s)?;
            Ok(ea.max(eb))
        }),
        ("network", OP_TOL, |s| {
            let model = AdaFuseModel::<f64>::new(ModelConfig {
                seed: s,
                ..ModelConfig::tiny()
            })?;
            let a = unit_interval(&[1, 16, 16], s + 1);
            let b = unit_interval(&[1, 16, 16], s + 2);
            let ea = weighted(|x| model.forward(x, &b), &a, s)?;
            let eb = weighted(|x| model.forward(&a, x), &b, s)?;
            Ok(ea.max(eb))
        }),
    ]
}

pub fn gradcheck_ops() -> Vec<&'static str> {
    cases().into_iter().map(|c| c.0).collect()
}

/// Maximum relative error of every differentiable operation over `seeds`
/// random draws, optionally restricted to the named operations.
pub fn gradcheck_suite(seeds: u64, only: Option<&[String]>) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, tol, case) in cases() {
        if only.is_some_and(|o| !o.iter().any(|n| n == name)) {
            continue;
        }
        let mut worst: f64 = 0.0;
        for seed in 0..seeds {
            let e = case(seed)?;
            worst = if worst.is_nan() || e.is_nan() { f64::NAN } else { worst.max(e) };
        }
        out.push(CheckResult::below(name, worst, tol));
    }
    Ok(out)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Quick sweep of the structural invariants: spectral round trips, CAF
/// algebra, loss zero-cases, metric oracles and serialisation round trips.
pub fn selftest() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();

    let x = random_tensor::<f64>(&[2, 16, 16], 1, 1.0);
    let spec = fft2d(&x)?;
    let back = ifft2d(&spec)?;
    out.push(CheckResult::below(
        "fft_round_trip",
        max_abs_diff(back.real.data(), x.data()),
        1e-10,
    ));
    let energy_x: f64 = x.data().iter().map(|v| v * v).sum();
    let energy_f: f64 = spec.data.iter().map(|z| z.norm_sqr()).sum::<f64>() / 256.0;
    out.push(CheckResult::below("parseval", (energy_x - energy_f).abs() / energy_x, 1e-9));
    let mut naive_err: f64 = 0.0;
    for n in [8, 16] {
        let x = random_tensor::<f64>(&[1, n, n], n as u64, 1.0);
        let (fast, slow) = (fft2d(&x)?, dft2d_naive(&x)?);
        let d = fast.data.iter().zip(&slow.data).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        naive_err = naive_err.max(d);
    }
    out.push(CheckResult::below("naive_dft_agreement", naive_err, 1e-9));

    let (mut comm, mut collapse): (f64, f64) = (0.0, 0.0);
    for seed in 0..10 {
        let (store, blk) = sharp_caf(seed, true)?;
        let a = random_tensor::<f64>(&[2, 8, 8], seed + 100, 1.0);
        let b = random_tensor::<f64>(&[2, 8, 8], seed + 200, 1.0);
        comm = comm.max(max_abs_diff(blk.fuse(&store, &a, &b)?.data(), blk.fuse(&store, &b, &a)?.data()));
        let t = blk.trace(&store, &a, &a)?;
        let twice = blk.unembed(&store, &t.v1.scalar_mul(2.0)?, 8, 8)?;
        collapse = collapse.max(max_abs_diff(t.output.data(), twice.data()));
    }
    out.push(CheckResult::below("caf_commutativity", comm, 1e-6));
    out.push(CheckResult::below("caf_collapse", collapse, 1e-6));

    let a = unit_interval(&[1, 16, 16], 3);
    let b = unit_interval(&[1, 16, 16], 4);
    let mid = a.add(&b)?.scalar_mul(0.5)?;
    out.push(CheckResult::below(
        "content_loss_zero",
        content_loss(&mid, &a, &b, Reduction::Mean)?.item()?,
        1e-12,
    ));
    let flat = Tensor::<f64>::full(&[1, 16, 16], 0.4)?;
    let cfg = LossConfig::default();
    let (_, r) = total_loss(&flat, &flat, &flat, &cfg)?;
    out.push(CheckResult::below("structure_losses_zero", r.grad.abs().max(r.ssim.abs()), 1e-12));
    let (_, r) = total_loss(&a, &mid, &b, &cfg)?;
    out.push(CheckResult::below(
        "total_loss_composition",
        (r.total - (cfg.lambda * r.content + r.grad + r.ssim)).abs(),
        1e-12,
    ));

    let uniform: Vec<u8> = (0..4096).map(|i| (i % 256) as u8).collect();
    out.push(CheckResult::below(
        "entropy_uniform",
        (metrics::entropy(&uniform) - 8.0).abs(),
        1e-15,
    ));
    let q = metrics::quantize_all(&unit_interval(&[1, 64, 64], 5).to_vec());
    out.push(CheckResult::below(
        "mi_self",
        (metrics::mi_component(&q, &q)? - metrics::entropy(&q)).abs(),
        1e-9,
    ));
    out.push(CheckResult::below("cc_self", (metrics::pearson(&q, &q)? - 1.0).abs(), 1e-12));
    out.push(CheckResult::below(
        "fmi_self",
        (metrics::fmi_dct(&q, &q, &q, 64, 64)? - 1.0).abs(),
        1e-9,
    ));

    let model = AdaFuseModel::<f32>::new(ModelConfig::tiny())?;
    let (fa, fb) = (a.cast::<f32>(), b.cast::<f32>());
    let before = model.forward(&fa, &fb)?;
    let restored = AdaFuseModel::<f32>::from_checkpoint(&Checkpoint::from_bytes(&model.to_checkpoint().to_bytes()?)?)?;
    let after = restored.forward(&fa, &fb)?;
    let identical = before.data().iter().zip(after.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    out.push(CheckResult::below("checkpoint_round_trip", if identical { 0.0 } else { 1.0 }, 0.5));

    let rgb = Raster::new(3, 8, 8, unit_interval(&[3, 8, 8], 6).to_vec())?;
    let back = ycbcr_to_rgb(&rgb_to_ycbcr(&rgb)?)?;
    let worst = rgb
        .quantized()
        .iter()
        .zip(back.quantized())
        .map(|(x, y)| (*x as i32 - y as i32).abs())
        .max()
        .unwrap_or(0);
    out.push(CheckResult::below("ycbcr_round_trip_levels", worst as f64, 3.0));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_lists_every_required_op() {
        let ops = gradcheck_ops();
        for op in [
            "add",
            "mul",
            "matmul",
            "conv2d",
            "maxpool2d",
            "upsample2x",
            "layernorm",
            "softmax",
            "gelu",
            "fft_log_magnitude",
            "content_loss",
            "grad_loss",
            "ssim_loss",
            "caf",
            "network",
        ] {
            assert!(ops.contains(&op), "{op}");
        }
    }

    #[test]
    fn filtered_suite_passes() {
        let only = vec!["softmax".to_string(), "conv2d".to_string()];
        let r = gradcheck_suite(3, Some(&only)).unwrap();
        assert_eq!(r.len(), 2);
        assert!(r.iter().all(|c| c.passed), "{r:?}");
    }

    #[test]
    fn selftest_passes() {
        let r = selftest().unwrap();
        assert!(r.iter().all(|c| c.passed), "{r:?}");
        assert!(r.len() >= 14);
    }
}

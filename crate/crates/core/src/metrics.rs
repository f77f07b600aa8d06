//! Fusion quality metrics: EN, PSNR, MI, CC and DCT-feature FMI.
//!
//! Every metric works on 8-bit levels produced by [`quantize`]. Scores
//! against two sources follow the usual fusion conventions: PSNR, CC and
//! FMI average the two comparisons, MI sums them.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use crate::data::quantize;
use crate::data::Raster;
use crate::error::{Error, Result};

pub const LEVELS: usize = 256;
pub const PEAK: f64 = 255.0;
pub const PSNR_CAP_DB: f64 = 100.0;
pub const DCT_BLOCK: usize = 8;
pub const FMI_BINS: usize = 64;

pub fn quantize_all(values: &[f64]) -> Vec<u8> {
    values.iter().map(|&v| quantize(v)).collect()
}

fn check_len(op: &'static str, x: &[u8], y: &[u8]) -> Result<()> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![x.len()],
            rhs: vec![y.len()],
        });
    }
    Ok(())
}

fn entropy_of_counts(counts: &[u64], total: u64) -> f64 {
    let n = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Plug-in mutual information of two label sequences, with both marginal entropies.
fn mutual_info_labels(x: &[usize], y: &[usize], bins: usize) -> (f64, f64, f64) {
    let mut joint = vec![0u64; bins * bins];
    let mut px = vec![0u64; bins];
    let mut py = vec![0u64; bins];
    for (&a, &b) in x.iter().zip(y) {
        joint[a * bins + b] += 1;
        px[a] += 1;
        py[b] += 1;
    }
    let n = x.len() as u64;
    let hx = entropy_of_counts(&px, n);
    let hy = entropy_of_counts(&py, n);
    let hxy = entropy_of_counts(&joint, n);
    ((hx + hy - hxy).max(0.0), hx, hy)
}

fn labels(x: &[u8]) -> Vec<usize> {
    x.iter().map(|&v| v as usize).collect()
}

pub fn entropy(x: &[u8]) -> f64 {
    let mut counts = [0u64; LEVELS];
    x.iter().for_each(|&v| counts[v as usize] += 1);
    entropy_of_counts(&counts, x.len() as u64)
}

pub fn mi_component(f: &[u8], x: &[u8]) -> Result<f64> {
    check_len("mi", f, x)?;
    Ok(mutual_info_labels(&labels(f), &labels(x), LEVELS).0)
}

pub fn mutual_info(f: &[u8], a: &[u8], b: &[u8]) -> Result<f64> {
    Ok(mi_component(f, a)? + mi_component(f, b)?)
}

pub fn psnr_component(f: &[u8], x: &[u8]) -> Result<f64> {
    check_len("psnr", f, x)?;
    let mse = f.iter().zip(x).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum::<f64>() / f.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (PEAK * PEAK / mse).log10()).min(PSNR_CAP_DB))
}

pub fn psnr(f: &[u8], a: &[u8], b: &[u8]) -> Result<f64> {
    Ok(0.5 * (psnr_component(f, a)? + psnr_component(f, b)?))
}

/// Pearson correlation; 0 with a warning when either input is constant.
pub fn pearson(f: &[u8], x: &[u8]) -> Result<f64> {
    check_len("cc", f, x)?;
    let n = f.len() as f64;
    let mf = f.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mx = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sfx, mut sff, mut sxx) = (0.0, 0.0, 0.0);
    for (&p, &q) in f.iter().zip(x) {
        let (df, dx) = (p as f64 - mf, q as f64 - mx);
        sfx += df * dx;
        sff += df * df;
        sxx += dx * dx;
    }
    if sff == 0.0 || sxx == 0.0 {
        log::warn!("correlation of a constant image is undefined; reporting 0");
        return Ok(0.0);
    }
    Ok((sfx / (sff.sqrt() * sxx.sqrt())).clamp(-1.0, 1.0))
}

pub fn correlation_coeff(f: &[u8], a: &[u8], b: &[u8]) -> Result<f64> {
    Ok(0.5 * (pearson(f, a)? + pearson(f, b)?))
}

fn dct_matrix() -> [[f64; DCT_BLOCK]; DCT_BLOCK] {
    let n = DCT_BLOCK as f64;
    let mut m = [[0.0; DCT_BLOCK]; DCT_BLOCK];
    for (k, row) in m.iter_mut().enumerate() {
        let alpha = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        for (i, v) in row.iter_mut().enumerate() {
            *v = alpha * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2.0 * n)).cos();
        }
    }
    m
}

/// Orthonormal 2-D DCT-II of one row-major 8×8 block.
pub fn dct8x8(block: &[f64; 64]) -> [f64; 64] {
    let c = dct_matrix();
    let mut tmp = [0.0; 64];
    for u in 0..DCT_BLOCK {
        for x in 0..DCT_BLOCK {
            tmp[u * DCT_BLOCK + x] = (0..DCT_BLOCK).map(|y| c[u][y] * block[y * DCT_BLOCK + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for u in 0..DCT_BLOCK {
        for v in 0..DCT_BLOCK {
            out[u * DCT_BLOCK + v] = (0..DCT_BLOCK).map(|x| tmp[u * DCT_BLOCK + x] * c[v][x]).sum();
        }
    }
    out
}

/// AC coefficient magnitudes of every 8×8 block, block-major.
pub fn dct_features(x: &[u8], height: usize, width: usize) -> Result<Vec<f64>> {
    if x.len() != height * width {
        return Err(Error::invalid(format!("{} levels cannot be {height}×{width}", x.len())));
    }
    if height == 0 || width == 0 || !height.is_multiple_of(DCT_BLOCK) || !width.is_multiple_of(DCT_BLOCK) {
        return Err(Error::InvalidShape {
            op: "fmi_dct",
            shape: vec![height, width],
            reason: format!("size must be a positive multiple of {DCT_BLOCK}"),
        });
    }
    let mut features = Vec::with_capacity(height * width / 64 * 63);
    let mut block = [0.0; 64];
    for by in (0..height).step_by(DCT_BLOCK) {
        for bx in (0..width).step_by(DCT_BLOCK) {
            for y in 0..DCT_BLOCK {
                for xx in 0..DCT_BLOCK {
                    block[y * DCT_BLOCK + xx] = x[(by + y) * width + bx + xx] as f64;
                }
            }
            features.extend(dct8x8(&block)[1..].iter().map(|v| v.abs()));
        }
    }
    Ok(features)
}

/// Min-max binning into `bins` equal-width bins.
fn bin_features(f: &[f64], bins: usize) -> Vec<usize> {
    let lo = f.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![0; f.len()];
    }
    f.iter()
        .map(|&v| (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1))
        .collect()
}

/// Normalised MI `2·I(F;X)/(H(F)+H(X))` of DCT feature maps; 0 when both are flat.
pub fn fmi_component(f: &[u8], x: &[u8], height: usize, width: usize) -> Result<f64> {
    check_len("fmi", f, x)?;
    let ff = bin_features(&dct_features(f, height, width)?, FMI_BINS);
    let fx = bin_features(&dct_features(x, height, width)?, FMI_BINS);
    let (mi, hf, hx) = mutual_info_labels(&ff, &fx, FMI_BINS);
    if hf + hx == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * mi / (hf + hx))
}

pub fn fmi_dct(f: &[u8], a: &[u8], b: &[u8], height: usize, width: usize) -> Result<f64> {
    Ok(0.5 * (fmi_component(f, a, height, width)? + fmi_component(f, b, height, width)?))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub en: f64,
    pub psnr: f64,
    pub mi: f64,
    pub cc: f64,
    pub fmi: f64,
}

impl MetricsReport {
    pub fn mean(reports: &[MetricsReport]) -> MetricsReport {
        let n = reports.len().max(1) as f64;
        let sum = |g: fn(&MetricsReport) -> f64| reports.iter().map(g).sum::<f64>() / n;
        MetricsReport {
            en: sum(|r| r.en),
            psnr: sum(|r| r.psnr),
            mi: sum(|r| r.mi),
            cc: sum(|r| r.cc),
            fmi: sum(|r| r.fmi),
        }
    }
}

/// Scores a single-channel fused raster against two single-channel sources.
pub fn evaluate(fused: &Raster, a: &Raster, b: &Raster) -> Result<MetricsReport> {
    for r in [a, b] {
        if (r.channels, r.height, r.width) != (fused.channels, fused.height, fused.width) {
            return Err(Error::ShapeMismatch {
                op: "evaluate",
                lhs: vec![fused.channels, fused.height, fused.width],
                rhs: vec![r.channels, r.height, r.width],
            });
        }
    }
    if fused.channels != 1 {
        return Err(Error::invalid("metrics are computed on single-channel images"));
    }
    let (f, qa, qb) = (fused.quantized(), a.quantized(), b.quantized());
    Ok(MetricsReport {
        en: entropy(&f),
        psnr: psnr(&f, &qa, &qb)?,
        mi: mutual_info(&f, &qa, &qb)?,
        cc: correlation_coeff(&f, &qa, &qb)?,
        fmi: fmi_dct(&f, &qa, &qb, fused.height, fused.width)?,
    })
}

/// Parameters recorded alongside every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricParams {
    pub quantization: String,
    pub histogram_bins: usize,
    pub log_base: u32,
    pub psnr_peak: f64,
    pub psnr_cap_db: f64,
    pub psnr_convention: String,
    pub mi_convention: String,
    pub cc_constant_image: f64,
    pub fmi_block: usize,
    pub fmi_bins: usize,
    pub fmi_features: String,
    pub fmi_normalization: String,
}

impl Default for MetricParams {
    fn default() -> Self {
        Self {
            quantization: "round-half-away(clamp(v, 0, 1) * 255)".into(),
            histogram_bins: LEVELS,
            log_base: 2,
            psnr_peak: PEAK,
            psnr_cap_db: PSNR_CAP_DB,
            psnr_convention: "mean over both sources".into(),
            mi_convention: "sum over both sources".into(),
            cc_constant_image: 0.0,
            fmi_block: DCT_BLOCK,
            fmi_bins: FMI_BINS,
            fmi_features: "orthonormal DCT-II AC magnitudes, min-max binned".into(),
            fmi_normalization: "2 I / (H_f + H_i), averaged over both sources".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub pair_id: String,
    #[serde(flatten)]
    pub report: MetricsReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsDocument {
    pub params: MetricParams,
    pub rows: Vec<MetricsRow>,
    pub mean: MetricsReport,
}

pub fn write_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "pair_id,en,psnr,mi,cc,fmi").expect("write to Vec");
    for r in rows {
        let m = &r.report;
        writeln!(out, "{},{},{},{},{},{}", r.pair_id, m.en, m.psnr, m.mi, m.cc, m.fmi).expect("write to Vec");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_json(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let reports: Vec<_> = rows.iter().map(|r| r.report).collect();
    let doc = MetricsDocument {
        params: MetricParams::default(),
        rows: rows.to_vec(),
        mean: MetricsReport::mean(&reports),
    };
    std::fs::write(path, serde_json::to_string_pretty(&doc)?).map_err(|e| Error::io(path, e))
}

//! Training objective: content, structure-tensor gradient and SSIM terms.
//!
//! ```text
//! L_content = Σ ‖I_f − (I₁+I₂)/2‖₂
//! L_grad    = log(1 + Σ ‖Z(I_f) − Z([I₁, I₂])‖²_F)
//! L_ssim    = w₁(1 − SSIM(I_f, I₁)) + w₂(1 − SSIM(I_f, I₂))
//! L         = λ·L_content + L_grad + L_ssim
//! ```
//!
//! `Z` is the per-pixel structure tensor of channel-summed Sobel gradient
//! products. Pixel sums use [`Reduction::Mean`] by default.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Padding, Tensor};

/// Sobel kernel for `∂/∂x` (row-major 3×3, applied as correlation).
pub const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
/// Sobel kernel for `∂/∂y`.
pub const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    fn apply<T: Element>(self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Reduction::Mean => x.mean(),
            Reduction::Sum => x.sum(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range `L` of the pixel values.
    pub data_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimConfig {
    /// Normalised `window × window` Gaussian, row-major.
    pub fn kernel(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let g: Vec<f64> = (0..self.window)
            .map(|i| (-(i as f64 - r).powi(2) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let total: f64 = g.iter().sum();
        let mut k = Vec::with_capacity(self.window * self.window);
        for &gy in &g {
            k.extend(g.iter().map(|&gx| gy * gx / (total * total)));
        }
        k
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerms {
    /// Content term only.
    Content,
    /// Gradient and SSIM terms only.
    Structure,
    #[default]
    Both,
}

impl std::str::FromStr for LossTerms {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "content" => Ok(Self::Content),
            "structure" => Ok(Self::Structure),
            "both" => Ok(Self::Both),
            other => Err(Error::invalid(format!("unknown loss subset {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda: f64,
    pub w1: f64,
    pub w2: f64,
    pub reduction: Reduction,
    pub ssim: SsimConfig,
    pub terms: LossTerms,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            w1: 0.5,
            w2: 0.5,
            reduction: Reduction::Mean,
            ssim: SsimConfig::default(),
            terms: LossTerms::Both,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda, self.w1, self.w2].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        if self.ssim.window.is_multiple_of(2) || self.ssim.sigma <= 0.0 {
            return Err(Error::invalid("SSIM window must be odd with positive sigma"));
        }
        Ok(())
    }
}

/// Loss terms of one evaluation, as plain numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub content: f64,
    pub grad: f64,
    pub ssim: f64,
    pub total: f64,
}

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() == b.shape() && a.rank() == 3 {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

/// Per-pixel Euclidean norm across channels: `[M, H, W] → [H, W]`.
/// The gradient at a zero vector is taken as zero.
pub fn channel_norm<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [m, h, w] = *x.shape() else {
        return Err(Error::InvalidShape {
            op: "channel_norm",
            shape: x.shape().to_vec(),
            reason: "expected [M, H, W]".into(),
        });
    };
    let plane = h * w;
    let xd = x.data();
    let norms: Vec<T> = (0..plane)
        .map(|i| (0..m).map(|ci| xd[ci * plane + i] * xd[ci * plane + i]).sum::<T>().sqrt())
        .collect();
    let input = x.clone();
    Tensor::from_op(
        "channel_norm",
        vec![h, w],
        norms,
        vec![x.clone()],
        Box::new(move |ctx| {
            let xd = input.data();
            let mut g = vec![T::zero(); m * plane];
            for i in 0..plane {
                let n = ctx.output[i];
                if n > T::zero() {
                    for ci in 0..m {
                        g[ci * plane + i] = ctx.grad[i] * xd[ci * plane + i] / n;
                    }
                }
            }
            vec![Some(g)]
        }),
    )
}

/// `reduce ‖I_f − (I₁+I₂)/2‖₂` over pixels.
pub fn content_loss<T: Element>(fused: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>, reduction: Reduction) -> Result<Tensor<T>> {
    same_shape("content_loss", fused, a)?;
    same_shape("content_loss", a, b)?;
    let target = a.add(b)?.scalar_mul(0.5)?;
    reduction.apply(&channel_norm(&fused.sub(&target)?)?)
}

/// The three distinct entries `(Zxx, Zxy, Zyy)`, each `[H, W]`.
pub fn structure_components<T: Element>(x: &Tensor<T>) -> Result<[Tensor<T>; 3]> {
    if x.rank() != 3 {
        return Err(Error::InvalidShape {
            op: "structure_tensor",
            shape: x.shape().to_vec(),
            reason: "expected [M, H, W]".into(),
        });
    }
    let gx = x.correlate_fixed(&SOBEL_X, 3, Padding::Reflect)?;
    let gy = x.correlate_fixed(&SOBEL_Y, 3, Padding::Reflect)?;
    Ok([
        gx.square()?.sum_leading()?,
        gx.mul(&gy)?.sum_leading()?,
        gy.square()?.sum_leading()?,
    ])
}

/// Per-pixel structure tensor `[H, W, 2, 2]` of an `[M, H, W]` image:
/// `Z = Σ_m [[∇ₓ², ∇ₓ∇ᵧ], [∇ₓ∇ᵧ, ∇ᵧ²]]`.
pub fn structure_tensor<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let [xx, xy, yy] = structure_components(x)?;
    let parts = [&xx, &xy, &xy, &yy].map(|t| t.reshape(&[1, h, w]));
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    Tensor::concat(&parts)?.permute(&[1, 2, 0])?.reshape(&[h, w, 2, 2])
}

/// `log(1 + reduce ‖Z(I_f) − Z([I₁, I₂])‖²_F)`.
pub fn grad_loss<T: Element>(fused: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>, reduction: Reduction) -> Result<Tensor<T>> {
    same_shape("grad_loss", a, b)?;
    if fused.rank() != 3 || fused.shape()[1..] != a.shape()[1..] {
        return Err(Error::ShapeMismatch {
            op: "grad_loss",
            lhs: fused.shape().to_vec(),
            rhs: a.shape().to_vec(),
        });
    }
    let zf = structure_components(fused)?;
    let zc = structure_components(&Tensor::concat(&[a.clone(), b.clone()])?)?;
    let dxx = zf[0].sub(&zc[0])?.square()?;
    let dxy = zf[1].sub(&zc[1])?.square()?.scalar_mul(2.0)?;
    let dyy = zf[2].sub(&zc[2])?.square()?;
    reduction.apply(&dxx.add(&dxy)?.add(&dyy)?)?.log1p()
}

/// Mean local SSIM over all channels and valid window positions.
pub fn ssim<T: Element>(a: &Tensor<T>, b: &Tensor<T>, cfg: &SsimConfig) -> Result<Tensor<T>> {
    same_shape("ssim", a, b)?;
    let k = cfg.kernel();
    let win = |x: &Tensor<T>| x.correlate_fixed(&k, cfg.window, Padding::Valid);
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let c2 = (cfg.k2 * cfg.data_range).powi(2);
    let mu_a = win(a)?;
    let mu_b = win(b)?;
    let mu_aa = mu_a.square()?;
    let mu_bb = mu_b.square()?;
    let mu_ab = mu_a.mul(&mu_b)?;
    let var_a = win(&a.square()?)?.sub(&mu_aa)?;
    let var_b = win(&b.square()?)?.sub(&mu_bb)?;
    let cov = win(&a.mul(b)?)?.sub(&mu_ab)?;
    let num = mu_ab.scalar_mul(2.0)?.add_scalar(c1)?.mul(&cov.scalar_mul(2.0)?.add_scalar(c2)?)?;
    let den = mu_aa.add(&mu_bb)?.add_scalar(c1)?.mul(&var_a.add(&var_b)?.add_scalar(c2)?)?;
    num.div(&den)?.mean()
}

/// `w₁(1 − SSIM(I_f, I₁)) + w₂(1 − SSIM(I_f, I₂))`.
pub fn ssim_loss<T: Element>(fused: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>, w1: f64, w2: f64, cfg: &SsimConfig) -> Result<Tensor<T>> {
    if !(w1 >= 0.0 && w2 >= 0.0) {
        return Err(Error::invalid("SSIM weights must be non-negative"));
    }
    let da = ssim(fused, a, cfg)?.neg()?.add_scalar(1.0)?.scalar_mul(w1)?;
    let db = ssim(fused, b, cfg)?.neg()?.add_scalar(1.0)?.scalar_mul(w2)?;
    da.add(&db)
}

/// Weighted objective and its per-term report. Terms excluded by
/// `cfg.terms` are still reported but do not enter the total.
pub fn total_loss<T: Element>(fused: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>, cfg: &LossConfig) -> Result<(Tensor<T>, LossReport)> {
    cfg.validate()?;
    let content = content_loss(fused, a, b, cfg.reduction)?;
    let grad = grad_loss(fused, a, b, cfg.reduction)?;
    let ssim = ssim_loss(fused, a, b, cfg.w1, cfg.w2, &cfg.ssim)?;
    let weighted = content.scalar_mul(cfg.lambda)?;
    let total = match cfg.terms {
        LossTerms::Content => weighted,
        LossTerms::Structure => grad.add(&ssim)?,
        LossTerms::Both => weighted.add(&grad)?.add(&ssim)?,
    };
    let report = LossReport {
        content: content.item()?.as_f64(),
        grad: grad.item()?.as_f64(),
        ssim: ssim.item()?.as_f64(),
        total: total.item()?.as_f64(),
    };
    Ok((total, report))
}

/// Mean of several scalar losses.
pub fn mean_of<T: Element>(losses: &[Tensor<T>]) -> Result<Tensor<T>> {
    let (first, rest) = losses.split_first().ok_or_else(|| Error::invalid("mean of no losses"))?;
    let mut acc = first.clone();
    for l in rest {
        acc = acc.add(l)?;
    }
    acc.scalar_mul(1.0 / losses.len() as f64)
}

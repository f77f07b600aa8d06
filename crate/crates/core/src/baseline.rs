//! Hand-designed feature fusion rules used as ablation baselines.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Padding, Tensor};

/// Guard added to each activity so the L1 weights stay defined on flat regions.
pub const L1_DELTA: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionRule {
    Avg,
    L1,
    Max,
}

impl FromStr for FusionRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "avg" => Ok(Self::Avg),
            "l1" => Ok(Self::L1),
            "max" => Ok(Self::Max),
            other => Err(Error::invalid(format!("unknown fusion rule {other:?}"))),
        }
    }
}

impl fmt::Display for FusionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Avg => "avg",
            Self::L1 => "l1",
            Self::Max => "max",
        })
    }
}

fn activity<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    x.abs()?
        .sum_leading()?
        .reshape(&[1, h, w])?
        .correlate_fixed(&[1.0 / 9.0; 9], 3, Padding::Reflect)
}

/// Per-pixel weights `w_i = (a_i+δ)/(a₁+a₂+2δ)` from 3×3 box-averaged
/// channel-sum L1 activity; each is `[1, H, W]`.
pub fn l1_weights<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let aa = activity(a)?.add_scalar(L1_DELTA)?;
    let ab = activity(b)?.add_scalar(L1_DELTA)?;
    let total = aa.add(&ab)?;
    Ok((aa.div(&total)?, ab.div(&total)?))
}

/// Fuses two same-shape `[C, H, W]` maps with a fixed rule.
pub fn baseline_fuse<T: Element>(a: &Tensor<T>, b: &Tensor<T>, rule: FusionRule) -> Result<Tensor<T>> {
    if a.shape() != b.shape() || a.rank() != 3 {
        return Err(Error::ShapeMismatch {
            op: "baseline_fuse",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    match rule {
        FusionRule::Avg => a.add(b)?.scalar_mul(0.5),
        FusionRule::Max => a.maximum(b),
        FusionRule::L1 => {
            let [c, h, w] = *a.shape() else { unreachable!() };
            let (w1, w2) = l1_weights(a, b)?;
            let spread = |t: Tensor<T>| t.repeat_leading(c)?.reshape(&[c, h, w]);
            a.mul(&spread(w1)?)?.add(&b.mul(&spread(w2)?)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradient, random_tensor};

    #[test]
    fn avg_of_equal_inputs() {
        let x = random_tensor::<f64>(&[2, 4, 4], 1, 1.0);
        assert_eq!(baseline_fuse(&x, &x, FusionRule::Avg).unwrap().data(), x.data());
    }

    #[test]
    fn max_of_disjoint_supports_is_sum() {
        let a = Tensor::<f64>::from_f64(&[1.0, 0.0, 0.0, 3.0], &[1, 2, 2]).unwrap();
        let b = Tensor::<f64>::from_f64(&[0.0, 2.0, 5.0, 0.0], &[1, 2, 2]).unwrap();
        let m = baseline_fuse(&a, &b, FusionRule::Max).unwrap();
        assert_eq!(m.data(), a.add(&b).unwrap().data());
    }

    #[test]
    fn l1_weights_partition_unity() {
        let a = random_tensor::<f64>(&[3, 6, 6], 2, 1.0);
        let mut zeros = random_tensor::<f64>(&[3, 6, 6], 3, 1.0).to_vec();
        zeros[..18].iter_mut().for_each(|v| *v = 0.0);
        let b = Tensor::new(zeros, &[3, 6, 6]).unwrap();
        let (w1, w2) = l1_weights(&a, &b).unwrap();
        for (x, y) in w1.data().iter().zip(w2.data()) {
            assert!((x + y - 1.0).abs() < 1e-9);
        }
        let flat = Tensor::<f64>::zeros(&[1, 4, 4]).unwrap();
        let (w1, _) = l1_weights(&flat, &flat).unwrap();
        assert!(w1.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn l1_prefers_the_active_source() {
        let a = Tensor::<f64>::full(&[1, 4, 4], 2.0).unwrap();
        let b = Tensor::<f64>::full(&[1, 4, 4], 0.5).unwrap();
        let f = baseline_fuse(&a, &b, FusionRule::L1).unwrap();
        let expected = 2.0 * 0.8 + 0.5 * 0.2;
        assert!(f.data().iter().all(|&v| (v - expected).abs() < 1e-9));
    }

    #[test]
    fn rules_parse_and_reject() {
        assert_eq!("AVG".parse::<FusionRule>().unwrap(), FusionRule::Avg);
        assert_eq!(FusionRule::L1.to_string().parse::<FusionRule>().unwrap(), FusionRule::L1);
        assert!("median".parse::<FusionRule>().is_err());
        let a = Tensor::<f64>::zeros(&[1, 2, 2]).unwrap();
        let b = Tensor::<f64>::zeros(&[1, 2, 4]).unwrap();
        assert!(baseline_fuse(&a, &b, FusionRule::Avg).is_err());
    }

    #[test]
    fn l1_rule_gradient() {
        for seed in 0..20 {
            let a = random_tensor::<f64>(&[2, 4, 4], seed, 1.0);
            let b = random_tensor::<f64>(&[2, 4, 4], seed + 50, 1.0);
            let r = random_tensor::<f64>(&[2, 4, 4], seed + 100, 1.0);
            let e = check_gradient(|x| baseline_fuse(x, &b, FusionRule::L1)?.mul(&r)?.sum(), &a).unwrap();
            assert!(e < 1e-5, "seed {seed}: {e:e}");
        }
    }
}

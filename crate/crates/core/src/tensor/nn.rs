use super::{c, Element, Tensor};
use crate::error::{Error, Result};

/// Variance stabiliser for layer normalisation.
pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<T: Element> Tensor<T> {
    /// Normalises each vector along the last axis to zero mean and unit
    /// variance (biased estimator, eps = 1e-5), then applies `gain` and `bias`.
    pub fn layernorm(&self, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let d = *self.shape().last().unwrap_or(&0);
        if d == 0 || gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layernorm",
                lhs: self.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let eps = c::<T>(LAYER_NORM_EPS);
        let inv_d = c::<T>(1.0 / d as f64);
        let rows = self.numel() / d;
        let mut xhat = Vec::with_capacity(self.numel());
        let mut inv_std = Vec::with_capacity(rows);
        for row in self.data().chunks_exact(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            xhat.extend(row.iter().map(|&v| (v - mean) * is));
        }
        let (gd, bd) = (gain.data(), bias.data());
        let out = xhat
            .chunks_exact(d)
            .flat_map(|r| r.iter().zip(gd).zip(bd).map(|((&x, &g), &b)| x * g + b))
            .collect();
        let g_t = gain.clone();
        Tensor::from_op(
            "layernorm",
            self.shape().to_vec(),
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |ctx| {
                let gd = g_t.data();
                let gx = ctx.needs[0].then(|| {
                    let mut gx = Vec::with_capacity(rows * d);
                    for ((gr, xr), &is) in ctx.grad.chunks_exact(d).zip(xhat.chunks_exact(d)).zip(&inv_std) {
                        // dx = inv_std·(ĝ − mean(ĝ) − x̂·mean(ĝ·x̂)), ĝ = g·gain
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for i in 0..d {
                            let gh = gr[i] * gd[i];
                            m1 = m1 + gh;
                            m2 = m2 + gh * xr[i];
                        }
                        m1 = m1 * inv_d;
                        m2 = m2 * inv_d;
                        gx.extend((0..d).map(|i| is * (gr[i] * gd[i] - m1 - xr[i] * m2)));
                    }
                    gx
                });
                let ggain = ctx.needs[1].then(|| {
                    let mut acc = vec![T::zero(); d];
                    for (gr, xr) in ctx.grad.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for i in 0..d {
                            acc[i] = acc[i] + gr[i] * xr[i];
                        }
                    }
                    acc
                });
                let gbias = ctx.needs[2].then(|| {
                    let mut acc = vec![T::zero(); d];
                    for gr in ctx.grad.chunks_exact(d) {
                        acc.iter_mut().zip(gr).for_each(|(a, &g)| *a = *a + g);
                    }
                    acc
                });
                vec![gx, ggain, gbias]
            }),
        )
    }

    /// Softmax over the last axis, computed after subtracting the row max.
    pub fn softmax(&self) -> Result<Tensor<T>> {
        let n = *self.shape().last().ok_or_else(|| Error::InvalidShape {
            op: "softmax",
            shape: Vec::new(),
            reason: "needs rank ≥ 1".into(),
        })?;
        let mut out = Vec::with_capacity(self.numel());
        for row in self.data().chunks_exact(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            out.extend(row.iter().map(|&v| (v - max).exp()));
            let z: T = out[start..].iter().copied().sum();
            out[start..].iter_mut().for_each(|v| *v = *v / z);
        }
        Tensor::from_op(
            "softmax",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = Vec::with_capacity(ctx.grad.len());
                for (gr, yr) in ctx.grad.chunks_exact(n).zip(ctx.output.chunks_exact(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    g.extend(gr.iter().zip(yr).map(|(&gi, &yi)| yi * (gi - dot)));
                }
                vec![Some(g)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradient, random_tensor};

    #[test]
    fn layernorm_standardises_rows() {
        let x = random_tensor::<f64>(&[5, 16], 7, 10.0);
        let y = x.layernorm(&Tensor::ones(&[16]).unwrap(), &Tensor::zeros(&[16]).unwrap()).unwrap();
        for (row, xrow) in y.data().chunks(16).zip(x.data().chunks(16)) {
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            let xm = xrow.iter().sum::<f64>() / 16.0;
            let xv = xrow.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - xv / (xv + LAYER_NORM_EPS)).abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layernorm_of_constant_row_is_bias() {
        let x = Tensor::<f64>::param(vec![3.0; 8], &[1, 8]).unwrap();
        let gain = random_tensor::<f64>(&[8], 1, 1.0);
        let bias = random_tensor::<f64>(&[8], 2, 1.0);
        let y = x.layernorm(&gain, &bias).unwrap();
        assert_eq!(y.data(), bias.data());
        y.mul(&random_tensor(&[1, 8], 3, 1.0)).unwrap().sum().unwrap().backward().unwrap();
        assert!(x.grad().unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn layernorm_dim_mismatch() {
        let x = random_tensor::<f64>(&[2, 8], 1, 1.0);
        let g = Tensor::ones(&[7]).unwrap();
        assert!(x.layernorm(&g, &g).is_err());
    }

    #[test]
    fn layernorm_gradients() {
        for seed in 0..20 {
            let x = random_tensor::<f64>(&[2, 8], seed, 1.0);
            let g = random_tensor::<f64>(&[8], seed + 1, 1.0);
            let b = random_tensor::<f64>(&[8], seed + 2, 1.0);
            let r = random_tensor::<f64>(&[2, 8], seed + 3, 1.0);
            let ex = check_gradient(|x| x.layernorm(&g, &b)?.mul(&r)?.sum(), &x).unwrap();
            let eg = check_gradient(|g| x.layernorm(g, &b)?.mul(&r)?.sum(), &g).unwrap();
            let eb = check_gradient(|b| x.layernorm(&g, b)?.mul(&r)?.sum(), &b).unwrap();
            assert!(ex < 1e-5 && eg < 1e-5 && eb < 1e-5, "seed {seed}: {ex:e} {eg:e} {eb:e}");
        }
    }

    #[test]
    fn softmax_properties() {
        let s = Tensor::<f64>::zeros(&[2]).unwrap().softmax().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let x = random_tensor::<f64>(&[4, 6], 3, 3.0);
        let y = x.softmax().unwrap();
        let shifted = x.add_scalar(123.25).unwrap().softmax().unwrap();
        for (a, b) in y.data().iter().zip(shifted.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for row in y.data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn softmax_gradient() {
        for seed in 0..20 {
            let x = random_tensor::<f64>(&[6], seed, 1.0);
            let r = random_tensor::<f64>(&[6], seed + 1, 1.0);
            let e = check_gradient(|x| x.softmax()?.mul(&r)?.sum(), &x).unwrap();
            assert!(e < 1e-6, "seed {seed}: {e:e}");
        }
    }
}

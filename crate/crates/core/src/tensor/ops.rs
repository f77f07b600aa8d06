//! Elementwise arithmetic, activations and reductions.

use super::{c, Element, Tensor};
use crate::error::{Error, Result};

/// How the two operands of a binary op line up.
#[derive(Clone, Copy)]
enum Pairing {
    Same,
    LhsScalar,
    RhsScalar,
}

fn pairing<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<Pairing> {
    if a.shape() == b.shape() {
        Ok(Pairing::Same)
    } else if b.numel() == 1 && b.rank() == 0 {
        Ok(Pairing::RhsScalar)
    } else if a.numel() == 1 && a.rank() == 0 {
        Ok(Pairing::LhsScalar)
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

/// Gradient of one operand, reduced to a single value when it was broadcast.
fn reduce_if<T: Element>(scalar: bool, g: Vec<T>) -> Vec<T> {
    if scalar {
        vec![g.into_iter().fold(T::zero(), |a, b| a + b)]
    } else {
        g
    }
}

impl<T: Element> Tensor<T> {
    /// Binary op with derivative rules `dfa(x, y)`, `dfb(x, y)`.
    fn binary(&self, other: &Tensor<T>, op: &'static str, f: fn(T, T) -> T, dfa: fn(T, T) -> T, dfb: fn(T, T) -> T) -> Result<Tensor<T>> {
        let pairing = pairing(op, self, other)?;
        let n = self.numel().max(other.numel());
        let shape = match pairing {
            Pairing::LhsScalar => other.shape().to_vec(),
            _ => self.shape().to_vec(),
        };
        let ai = move |i: usize| if matches!(pairing, Pairing::LhsScalar) { 0 } else { i };
        let bi = move |i: usize| if matches!(pairing, Pairing::RhsScalar) { 0 } else { i };
        let (ad, bd) = (self.data(), other.data());
        let data = (0..n).map(|i| f(ad[ai(i)], bd[bi(i)])).collect();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            op,
            shape,
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |ctx| {
                let (ad, bd) = (a.data(), b.data());
                let ga = ctx.needs[0].then(|| {
                    let g = (0..n).map(|i| ctx.grad[i] * dfa(ad[ai(i)], bd[bi(i)])).collect::<Vec<T>>();
                    reduce_if(matches!(pairing, Pairing::LhsScalar), g)
                });
                let gb = ctx.needs[1].then(|| {
                    let g = (0..n).map(|i| ctx.grad[i] * dfb(ad[ai(i)], bd[bi(i)])).collect::<Vec<T>>();
                    reduce_if(matches!(pairing, Pairing::RhsScalar), g)
                });
                vec![ga, gb]
            }),
        )
    }

    /// Unary op whose derivative is expressed through input `x` and output `y`.
    fn unary(&self, op: &'static str, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + Send + Sync + 'static) -> Result<Tensor<T>> {
        let data = self.data().iter().map(|&x| f(x)).collect();
        let x = self.clone();
        Tensor::from_op(
            op,
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let g = x
                    .data()
                    .iter()
                    .zip(ctx.output)
                    .zip(ctx.grad)
                    .map(|((&x, &y), &g)| g * df(x, y))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "add", |x, y| x + y, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "sub", |x, y| x - y, |_, _| T::one(), |_, _| -T::one())
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "mul", |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "div", |x, y| x / y, |_, y| T::one() / y, |x, y| -x / (y * y))
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn maximum(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(
            other,
            "maximum",
            |x, y| if x >= y { x } else { y },
            |x, y| if x >= y { T::one() } else { T::zero() },
            |x, y| if x >= y { T::zero() } else { T::one() },
        )
    }

    pub fn scalar_mul(&self, s: f64) -> Result<Tensor<T>> {
        let s = c::<T>(s);
        self.unary("scalar_mul", move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Result<Tensor<T>> {
        let s = c::<T>(s);
        self.unary("add_scalar", move |x| x + s, |_, _| T::one())
    }

    pub fn neg(&self) -> Result<Tensor<T>> {
        self.unary("neg", |x| -x, |_, _| -T::one())
    }

    pub fn square(&self) -> Result<Tensor<T>> {
        self.unary("square", |x| x * x, |x, _| x + x)
    }

    pub fn sqrt(&self) -> Result<Tensor<T>> {
        self.unary("sqrt", |x| x.sqrt(), |_, y| c::<T>(0.5) / y)
    }

    pub fn exp(&self) -> Result<Tensor<T>> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn log(&self) -> Result<Tensor<T>> {
        self.unary("log", |x| x.ln(), |x, _| T::one() / x)
    }

    pub fn log1p(&self) -> Result<Tensor<T>> {
        self.unary("log1p", |x| x.ln_1p(), |x, _| T::one() / (T::one() + x))
    }

    /// Absolute value with zero derivative at the origin.
    pub fn abs(&self) -> Result<Tensor<T>> {
        self.unary(
            "abs",
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn sigmoid(&self) -> Result<Tensor<T>> {
        self.unary("sigmoid", |x| T::one() / (T::one() + (-x).exp()), |_, y| y * (T::one() - y))
    }

    /// Exact GELU, `x·Φ(x)` with the Gaussian CDF written through `erf`.
    pub fn gelu(&self) -> Result<Tensor<T>> {
        let half = c::<T>(0.5);
        let inv_sqrt2 = T::FRAC_1_SQRT_2();
        let inv_sqrt_2pi = c::<T>(0.5) * T::FRAC_2_SQRT_PI() * inv_sqrt2;
        self.unary(
            "gelu",
            move |x| half * x * (T::one() + (x * inv_sqrt2).erf()),
            move |x, _| {
                let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                let pdf = inv_sqrt_2pi * (-half * x * x).exp();
                cdf + x * pdf
            },
        )
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Result<Tensor<T>> {
        let total = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            Vec::new(),
            vec![total],
            vec![self.clone()],
            Box::new(move |ctx| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    pub fn mean(&self) -> Result<Tensor<T>> {
        let n = self.numel() as f64;
        self.sum()?.scalar_mul(1.0 / n)
    }

    /// Sums over the leading axis: `[M, ...] → [...]`.
    pub fn sum_leading(&self) -> Result<Tensor<T>> {
        if self.rank() < 2 {
            return Err(Error::InvalidShape {
                op: "sum_leading",
                shape: self.shape().to_vec(),
                reason: "needs rank ≥ 2".into(),
            });
        }
        let m = self.shape()[0];
        let inner = self.numel() / m;
        let mut data = vec![T::zero(); inner];
        for chunk in self.data().chunks_exact(inner) {
            data.iter_mut().zip(chunk).for_each(|(a, &b)| *a = *a + b);
        }
        Tensor::from_op(
            "sum_leading",
            self.shape()[1..].to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx| vec![Some(ctx.grad.repeat(m))]),
        )
    }

    /// Repeats `self` `m` times along a new leading axis: `[...] → [m, ...]`.
    pub fn repeat_leading(&self, m: usize) -> Result<Tensor<T>> {
        if m == 0 {
            return Err(Error::invalid("repeat_leading: count must be positive"));
        }
        let inner = self.numel();
        let mut shape = vec![m];
        shape.extend_from_slice(self.shape());
        Tensor::from_op(
            "repeat_leading",
            shape,
            self.data().repeat(m),
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = vec![T::zero(); inner];
                for chunk in ctx.grad.chunks_exact(inner) {
                    g.iter_mut().zip(chunk).for_each(|(a, &b)| *a = *a + b);
                }
                vec![Some(g)]
            }),
        )
    }

    /// Adds a vector along the last axis: `[..., n] + [n]`.
    pub fn add_row(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let n = *self.shape().last().unwrap_or(&1);
        if bias.shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let bd = bias.data();
        let data = self
            .data()
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(bd).map(|(&x, &b)| x + b))
            .collect();
        Tensor::from_op(
            "add_row",
            self.shape().to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |ctx| {
                let gb = ctx.needs[1].then(|| {
                    let mut gb = vec![T::zero(); n];
                    for row in ctx.grad.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                    }
                    gb
                });
                vec![ctx.needs[0].then(|| ctx.grad.to_vec()), gb]
            }),
        )
    }
}

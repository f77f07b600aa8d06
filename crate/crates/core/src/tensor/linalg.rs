use super::{Element, Tensor};
use crate::error::{Error, Result};

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
}

fn matmul_dims<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(MatmulDims, Vec<usize>)> {
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    if a.rank() < 2 || b.rank() < 2 {
        return Err(mismatch());
    }
    let (ar, br) = (a.rank(), b.rank());
    let (m, k) = (a.shape()[ar - 2], a.shape()[ar - 1]);
    let (k2, n) = (b.shape()[br - 2], b.shape()[br - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    let lead = &a.shape()[..ar - 2];
    let shared_rhs = br == 2;
    if !shared_rhs && &b.shape()[..br - 2] != lead {
        return Err(mismatch());
    }
    let mut out = lead.to_vec();
    out.extend([m, n]);
    let batch = lead.iter().product();
    Ok((
        MatmulDims {
            batch,
            m,
            k,
            n,
            shared_rhs,
        },
        out,
    ))
}

impl<T: Element> Tensor<T> {
    /// Matrix product over the last two axes.
    ///
    /// Leading axes are batch axes and must match, except that a rank-2
    /// right operand is shared across every batch of the left operand.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (d, shape) = matmul_dims(self, other)?;
        let MatmulDims {
            batch,
            m,
            k,
            n,
            shared_rhs,
        } = d;
        let (sa, sb, sc) = (m * k, k * n, m * n);
        let mut out = vec![T::zero(); batch * sc];
        let (ad, bd) = (self.data(), other.data());
        if shared_rhs {
            // One tall product: [batch·m, k]·[k, n].
            T::gemm(
                batch * m,
                k,
                n,
                T::one(),
                ad,
                k as isize,
                1,
                bd,
                n as isize,
                1,
                T::zero(),
                &mut out,
                n as isize,
                1,
            );
        } else {
            for bi in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &ad[bi * sa..],
                    k as isize,
                    1,
                    &bd[bi * sb..],
                    n as isize,
                    1,
                    T::zero(),
                    &mut out[bi * sc..],
                    n as isize,
                    1,
                );
            }
        }
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            "matmul",
            shape,
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |ctx| {
                let (ad, bd, g) = (a.data(), b.data(), ctx.grad);
                // dA = G·Bᵀ
                let ga = ctx.needs[0].then(|| {
                    let mut ga = vec![T::zero(); batch * sa];
                    if shared_rhs {
                        T::gemm(
                            batch * m,
                            n,
                            k,
                            T::one(),
                            g,
                            n as isize,
                            1,
                            bd,
                            1,
                            n as isize,
                            T::zero(),
                            &mut ga,
                            k as isize,
                            1,
                        );
                    } else {
                        for bi in 0..batch {
                            T::gemm(
                                m,
                                n,
                                k,
                                T::one(),
                                &g[bi * sc..],
                                n as isize,
                                1,
                                &bd[bi * sb..],
                                1,
                                n as isize,
                                T::zero(),
                                &mut ga[bi * sa..],
                                k as isize,
                                1,
                            );
                        }
                    }
                    ga
                });
                // dB = Aᵀ·G
                let gb = ctx.needs[1].then(|| {
                    if shared_rhs {
                        let mut gb = vec![T::zero(); sb];
                        T::gemm(
                            k,
                            batch * m,
                            n,
                            T::one(),
                            ad,
                            1,
                            k as isize,
                            g,
                            n as isize,
                            1,
                            T::zero(),
                            &mut gb,
                            n as isize,
                            1,
                        );
                        gb
                    } else {
                        let mut gb = vec![T::zero(); batch * sb];
                        for bi in 0..batch {
                            T::gemm(
                                k,
                                m,
                                n,
                                T::one(),
                                &ad[bi * sa..],
                                1,
                                k as isize,
                                &g[bi * sc..],
                                n as isize,
                                1,
                                T::zero(),
                                &mut gb[bi * sb..],
                                n as isize,
                                1,
                            );
                        }
                        gb
                    }
                });
                vec![ga, gb]
            }),
        )
    }

    /// `x·W + b` for `x: [..., in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let y = self.matmul(weight)?;
        match bias {
            Some(b) => y.add_row(b),
            None => Ok(y),
        }
    }
}

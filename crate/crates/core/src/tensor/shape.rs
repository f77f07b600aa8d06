//! Data-movement ops: reshape, axis permutation, concatenation.

use super::{Element, Tensor};
use crate::error::{Error, Result};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output position, the flat input index under `perm`.
fn permutation_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n: usize = shape.iter().product();
    let mut index = Vec::with_capacity(n);
    let mut coord = vec![0usize; out_shape.len()];
    for _ in 0..n {
        index.push(coord.iter().zip(perm).map(|(&c, &p)| c * in_strides[p]).sum());
        for ax in (0..coord.len()).rev() {
            coord[ax] += 1;
            if coord[ax] < out_shape[ax] {
                break;
            }
            coord[ax] = 0;
        }
    }
    index
}

impl<T: Element> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if shape.iter().product::<usize>() != self.numel() || shape.contains(&0) {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape: self.shape().to_vec(),
                reason: format!("cannot view as {shape:?}"),
            });
        }
        Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|ctx| vec![Some(ctx.grad.to_vec())]),
        )
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let mut seen = vec![false; self.rank()];
        let valid = perm.len() == self.rank() && perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::InvalidShape {
                op: "permute",
                shape: self.shape().to_vec(),
                reason: format!("{perm:?} is not a permutation of the axes"),
            });
        }
        let index = permutation_index(self.shape(), perm);
        let src = self.data();
        let data = index.iter().map(|&i| src[i]).collect();
        let shape = perm.iter().map(|&p| self.shape()[p]).collect();
        Tensor::from_op(
            "permute",
            shape,
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = vec![T::zero(); index.len()];
                for (&i, &gi) in index.iter().zip(ctx.grad) {
                    g[i] = gi;
                }
                vec![Some(g)]
            }),
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor<T>> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: self.shape().to_vec(),
                reason: "needs rank ≥ 2".into(),
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// Concatenates along axis 0; trailing axes must agree.
    pub fn concat(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        if first.rank() == 0 {
            return Err(Error::InvalidShape {
                op: "concat",
                shape: Vec::new(),
                reason: "cannot concatenate scalars".into(),
            });
        }
        let tail = &first.shape()[1..];
        let mut lead = 0;
        for p in parts {
            if p.rank() != first.rank() || &p.shape()[1..] != tail {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            lead += p.shape()[0];
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
        let sizes: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
        Tensor::from_op(
            "concat",
            shape,
            data,
            parts.to_vec(),
            Box::new(move |ctx| {
                let mut offset = 0;
                sizes
                    .iter()
                    .zip(ctx.needs)
                    .map(|(&n, &need)| {
                        let g = need.then(|| ctx.grad[offset..offset + n].to_vec());
                        offset += n;
                        g
                    })
                    .collect()
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradient, random_tensor};
    use proptest::prelude::*;

    #[test]
    fn transpose_2d() {
        let x = Tensor::<f64>::from_f64(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let t = x.transpose().unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn permute_rejects_repeated_axis() {
        let x = random_tensor::<f64>(&[2, 3], 0, 1.0);
        assert!(x.permute(&[0, 0]).is_err());
    }

    #[test]
    fn concat_and_gradient() {
        let a = random_tensor::<f64>(&[1, 2, 2], 1, 1.0);
        let b = random_tensor::<f64>(&[2, 2, 2], 2, 1.0);
        let c = Tensor::concat(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.shape(), &[3, 2, 2]);
        let w = random_tensor::<f64>(&[3, 2, 2], 3, 1.0);
        let err = check_gradient(|x| Tensor::concat(&[x.clone(), b.clone()])?.mul(&w)?.sum(), &a).unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn permute_gradient() {
        let x = random_tensor::<f64>(&[2, 3, 4], 4, 1.0);
        let w = random_tensor::<f64>(&[4, 2, 3], 5, 1.0);
        let err = check_gradient(|x| x.permute(&[2, 0, 1])?.mul(&w)?.sum(), &x).unwrap();
        assert!(err < 1e-8);
    }

    proptest! {
        #[test]
        fn permute_then_inverse_is_identity(d0 in 1usize..4, d1 in 1usize..4, d2 in 1usize..4, which in 0usize..6) {
            let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let p = perms[which];
            let mut inv = [0; 3];
            for (i, &pi) in p.iter().enumerate() { inv[pi] = i; }
            let x = random_tensor::<f64>(&[d0, d1, d2], 9, 1.0);
            let y = x.permute(&p).unwrap();
            let expected: Vec<usize> = p.iter().map(|&a| x.shape()[a]).collect();
            prop_assert_eq!(y.shape(), expected.as_slice());
            let back = y.permute(&inv).unwrap();
            prop_assert_eq!(back.data(), x.data());
        }
    }
}

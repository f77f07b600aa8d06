//! Spatial ops on `[C, H, W]` feature maps.

use super::{c, Element, Tensor};
use crate::error::{Error, Result};

/// Border handling for [`Tensor::correlate_fixed`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// No padding; the output shrinks by `k − 1`.
    Valid,
    /// Mirror without repeating the edge sample (`x[-1] = x[1]`).
    Reflect,
    /// Zeros outside the image.
    Zero,
}

fn chw<T: Element>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::InvalidShape {
            op,
            shape: x.shape().to_vec(),
            reason: "expected [C, H, W]".into(),
        }),
    }
}

/// Source index of `i + offset` under reflect padding, for `n ≥ 2`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut j = i;
    if j < 0 {
        j = -j;
    }
    if j >= n {
        j = 2 * (n - 1) - j;
    }
    j as usize
}

/// Bilinear taps for doubling an axis of length `n` (half-pixel centres).
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

impl<T: Element> Tensor<T> {
    /// Stride-1 cross-correlation with `(k−1)/2` zero padding plus bias.
    ///
    /// `self: [C_in, H, W]`, `weight: [C_out, C_in, k, k]`, `bias: [C_out]`.
    pub fn conv2d(&self, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let (cin, h, w) = chw("conv2d", self)?;
        let [cout, wcin, k, k2] = *weight.shape() else {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: weight.shape().to_vec(),
                reason: "weight must be [C_out, C_in, k, k]".into(),
            });
        };
        if wcin != cin || bias.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        if k != k2 || k % 2 == 0 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: weight.shape().to_vec(),
                reason: "kernel must be square with odd size".into(),
            });
        }
        let pad = (k / 2) as isize;
        let hw = h * w;
        let rows = cin * k * k;

        // im2col: col[(ci, dy, dx), (y, x)]; None marks zero padding.
        let mut src_index: Vec<Option<usize>> = Vec::with_capacity(rows * hw);
        for ci in 0..cin {
            for dy in 0..k as isize {
                for dx in 0..k as isize {
                    for y in 0..h as isize {
                        let sy = y + dy - pad;
                        for x in 0..w as isize {
                            let sx = x + dx - pad;
                            let inside = sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize;
                            src_index.push(inside.then(|| ci * hw + sy as usize * w + sx as usize));
                        }
                    }
                }
            }
        }
        let xd = self.data();
        let col: Vec<T> = src_index.iter().map(|s| s.map_or(T::zero(), |i| xd[i])).collect();

        let mut out = vec![T::zero(); cout * hw];
        for (o, &b) in out.chunks_exact_mut(hw).zip(bias.data()) {
            o.fill(b);
        }
        T::gemm(
            cout,
            rows,
            hw,
            T::one(),
            weight.data(),
            rows as isize,
            1,
            &col,
            hw as isize,
            1,
            T::one(),
            &mut out,
            hw as isize,
            1,
        );

        let wt = weight.clone();
        let n_in = self.numel();
        Tensor::from_op(
            "conv2d",
            vec![cout, h, w],
            out,
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |ctx| {
                let g = ctx.grad;
                let gx = ctx.needs[0].then(|| {
                    let mut gcol = vec![T::zero(); rows * hw];
                    // Wᵀ·G
                    T::gemm(
                        rows,
                        cout,
                        hw,
                        T::one(),
                        wt.data(),
                        1,
                        rows as isize,
                        g,
                        hw as isize,
                        1,
                        T::zero(),
                        &mut gcol,
                        hw as isize,
                        1,
                    );
                    let mut gx = vec![T::zero(); n_in];
                    for (s, &v) in src_index.iter().zip(&gcol) {
                        if let Some(i) = *s {
                            gx[i] = gx[i] + v;
                        }
                    }
                    gx
                });
                let gw = ctx.needs[1].then(|| {
                    let mut gw = vec![T::zero(); cout * rows];
                    // G·colᵀ
                    T::gemm(
                        cout,
                        hw,
                        rows,
                        T::one(),
                        g,
                        hw as isize,
                        1,
                        &col,
                        1,
                        hw as isize,
                        T::zero(),
                        &mut gw,
                        rows as isize,
                        1,
                    );
                    gw
                });
                let gb = ctx.needs[2].then(|| g.chunks_exact(hw).map(|r| r.iter().copied().sum()).collect());
                vec![gx, gw, gb]
            }),
        )
    }

    /// 2×2 max pooling with stride 2. Gradients go to the window maximum,
    /// ties to the first element in row-major order.
    pub fn maxpool2d(&self) -> Result<Tensor<T>> {
        let (ch, h, w) = chw("maxpool2d", self)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "maxpool2d",
                shape: self.shape().to_vec(),
                reason: "spatial size must be even".into(),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.data();
        let mut argmax = Vec::with_capacity(ch * oh * ow);
        for ci in 0..ch {
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = ci * h * w + 2 * y * w + 2 * x;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = ci * h * w + (2 * y + dy) * w + 2 * x + dx;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                    argmax.push(best);
                }
            }
        }
        let data = argmax.iter().map(|&i| xd[i]).collect();
        let n_in = self.numel();
        Tensor::from_op(
            "maxpool2d",
            vec![ch, oh, ow],
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = vec![T::zero(); n_in];
                for (&i, &gi) in argmax.iter().zip(ctx.grad) {
                    g[i] = g[i] + gi;
                }
                vec![Some(g)]
            }),
        )
    }

    /// Bilinear 2× upsampling with half-pixel centres (corners not aligned).
    pub fn upsample2x(&self) -> Result<Tensor<T>> {
        let (ch, h, w) = chw("upsample2x", self)?;
        let ty = upsample_taps(h);
        let tx = upsample_taps(w);
        let (oh, ow) = (2 * h, 2 * w);
        let xd = self.data();
        let mut out = Vec::with_capacity(ch * oh * ow);
        for ci in 0..ch {
            let plane = &xd[ci * h * w..(ci + 1) * h * w];
            for &(y0, y1, wy0, wy1) in &ty {
                for &(x0, x1, wx0, wx1) in &tx {
                    let v = c::<T>(wy0 * wx0) * plane[y0 * w + x0]
                        + c::<T>(wy0 * wx1) * plane[y0 * w + x1]
                        + c::<T>(wy1 * wx0) * plane[y1 * w + x0]
                        + c::<T>(wy1 * wx1) * plane[y1 * w + x1];
                    out.push(v);
                }
            }
        }
        let n_in = self.numel();
        Tensor::from_op(
            "upsample2x",
            vec![ch, oh, ow],
            out,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = vec![T::zero(); n_in];
                let mut it = ctx.grad.iter();
                for ci in 0..ch {
                    let base = ci * h * w;
                    for &(y0, y1, wy0, wy1) in &ty {
                        for &(x0, x1, wx0, wx1) in &tx {
                            let gi = *it.next().expect("grad length");
                            g[base + y0 * w + x0] = g[base + y0 * w + x0] + c::<T>(wy0 * wx0) * gi;
                            g[base + y0 * w + x1] = g[base + y0 * w + x1] + c::<T>(wy0 * wx1) * gi;
                            g[base + y1 * w + x0] = g[base + y1 * w + x0] + c::<T>(wy1 * wx0) * gi;
                            g[base + y1 * w + x1] = g[base + y1 * w + x1] + c::<T>(wy1 * wx1) * gi;
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Per-channel cross-correlation with a constant `k×k` kernel.
    ///
    /// Only `self` is differentiated; the kernel is a fixed filter
    /// (Sobel, Gaussian window, box average).
    pub fn correlate_fixed(&self, kernel: &[f64], k: usize, padding: Padding) -> Result<Tensor<T>> {
        let (ch, h, w) = chw("correlate_fixed", self)?;
        if kernel.len() != k * k || k.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "correlate_fixed: kernel must be k×k with odd k, got {} taps for k={k}",
                kernel.len()
            )));
        }
        let r = (k / 2) as isize;
        let (oh, ow) = match padding {
            Padding::Valid => {
                if h < k || w < k {
                    return Err(Error::InvalidShape {
                        op: "correlate_fixed",
                        shape: self.shape().to_vec(),
                        reason: format!("image smaller than the {k}×{k} window"),
                    });
                }
                (h - k + 1, w - k + 1)
            }
            Padding::Reflect => {
                if h <= k / 2 || w <= k / 2 {
                    return Err(Error::InvalidShape {
                        op: "correlate_fixed",
                        shape: self.shape().to_vec(),
                        reason: "image too small to reflect-pad".into(),
                    });
                }
                (h, w)
            }
            Padding::Zero => (h, w),
        };
        let origin = if padding == Padding::Valid { r } else { 0 };
        // taps[(y, x)] → list of (source offset within the plane, weight)
        let mut taps: Vec<Vec<(usize, T)>> = Vec::with_capacity(oh * ow);
        for y in 0..oh as isize {
            for x in 0..ow as isize {
                let mut t = Vec::with_capacity(k * k);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let wv = kernel[((dy + r) as usize) * k + (dx + r) as usize];
                        if wv == 0.0 {
                            continue;
                        }
                        let (sy, sx) = (y + origin + dy, x + origin + dx);
                        let src = match padding {
                            Padding::Reflect => Some((reflect(sy, h), reflect(sx, w))),
                            _ if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize => None,
                            _ => Some((sy as usize, sx as usize)),
                        };
                        if let Some((sy, sx)) = src {
                            t.push((sy * w + sx, c::<T>(wv)));
                        }
                    }
                }
                taps.push(t);
            }
        }
        let xd = self.data();
        let mut out = Vec::with_capacity(ch * oh * ow);
        for ci in 0..ch {
            let plane = &xd[ci * h * w..];
            out.extend(taps.iter().map(|t| t.iter().fold(T::zero(), |a, &(s, wv)| a + wv * plane[s])));
        }
        let n_in = self.numel();
        Tensor::from_op(
            "correlate_fixed",
            vec![ch, oh, ow],
            out,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = vec![T::zero(); n_in];
                for ci in 0..ch {
                    let gout = &ctx.grad[ci * oh * ow..(ci + 1) * oh * ow];
                    let gin = &mut g[ci * h * w..(ci + 1) * h * w];
                    for (t, &gv) in taps.iter().zip(gout) {
                        for &(s, wv) in t {
                            gin[s] = gin[s] + wv * gv;
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }
}

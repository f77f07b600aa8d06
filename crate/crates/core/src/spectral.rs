//! 2-D discrete Fourier transforms over `[C, H, W]` feature maps.
//!
//! Power-of-two axes use an iterative radix-2 Cooley–Tukey transform; any
//! other length falls back to the direct O(N²) sum. The forward transform
//! is unnormalised and the inverse carries the `1/(H·W)` factor.
//!
//! Two differentiable ops feed the Fourier-guided fusion branch:
//! [`log_magnitude_spectrum`] maps features to `log(|FFT(x)| + eps)`, and
//! [`zero_phase_ifft`] brings a fused log-magnitude map back to the spatial
//! domain by treating it as a real, zero-phase spectrum.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::tensor::{c, Element, Tensor};

/// Default stabiliser inside `log(|X| + eps)`.
pub const DEFAULT_LOG_EPS: f64 = 1e-8;

/// Per-channel complex spectrum in row-major `[C, H, W]` order.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum<T: Element> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<Complex<T>>,
}

/// Result of [`ifft2d`]: the real part and the largest discarded imaginary magnitude.
#[derive(Clone, Debug)]
pub struct InverseTransform<T: Element> {
    pub real: Tensor<T>,
    pub max_imag: f64,
}

impl<T: Element> ComplexSpectrum<T> {
    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn magnitudes(&self) -> Vec<T> {
        self.data.iter().map(|z| z.norm()).collect()
    }

    /// Multiplies every coefficient by `e^{iθ}`.
    pub fn rotate_phase(&self, theta: f64) -> Self {
        let r = Complex::from_polar(c::<T>(1.0), c::<T>(theta));
        Self {
            data: self.data.iter().map(|z| z * r).collect(),
            ..self.clone()
        }
    }
}

fn dims<T: Element>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [ch, h, w] => Ok((ch, h, w)),
        _ => Err(Error::InvalidShape {
            op,
            shape: x.shape().to_vec(),
            reason: "expected [C, H, W]".into(),
        }),
    }
}

/// In-place radix-2 transform; `buf.len()` must be a power of two.
/// `sign = -1` for the forward kernel `e^{-2πi kn/N}`, `+1` for the inverse.
fn fft_radix2<T: Element>(buf: &mut [Complex<T>], sign: f64) {
    let n = buf.len();
    let bits = n.trailing_zeros();
    if n <= 1 {
        return;
    }
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    // Twiddles from direct cos/sin evaluation, not repeated multiplication.
    let twiddles: Vec<Complex<T>> = (0..n / 2)
        .map(|k| {
            let a = sign * 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            Complex::new(c::<T>(a.cos()), c::<T>(a.sin()))
        })
        .collect();
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let w = twiddles[k * step];
                let u = buf[start + k];
                let v = buf[start + k + half] * w;
                buf[start + k] = u + v;
                buf[start + k + half] = u - v;
            }
        }
        len <<= 1;
    }
}

/// Direct O(N²) DFT of one sequence.
fn dft_direct<T: Element>(input: &[Complex<T>], sign: f64) -> Vec<Complex<T>> {
    let n = input.len();
    (0..n)
        .map(|k| {
            input.iter().enumerate().fold(Complex::new(T::zero(), T::zero()), |acc, (j, &x)| {
                let a = sign * 2.0 * std::f64::consts::PI * ((k * j) % n) as f64 / n as f64;
                acc + x * Complex::new(c::<T>(a.cos()), c::<T>(a.sin()))
            })
        })
        .collect()
}

fn transform_1d<T: Element>(buf: &mut [Complex<T>], sign: f64) {
    if buf.len().is_power_of_two() {
        fft_radix2(buf, sign);
    } else {
        let out = dft_direct(buf, sign);
        buf.copy_from_slice(&out);
    }
}

/// Unnormalised 2-D transform of each `h×w` plane, rows then columns.
fn transform_planes<T: Element>(data: &mut [Complex<T>], h: usize, w: usize, sign: f64) {
    let mut column = vec![Complex::new(T::zero(), T::zero()); h];
    for plane in data.chunks_exact_mut(h * w) {
        for row in plane.chunks_exact_mut(w) {
            transform_1d(row, sign);
        }
        for x in 0..w {
            for y in 0..h {
                column[y] = plane[y * w + x];
            }
            transform_1d(&mut column, sign);
            for y in 0..h {
                plane[y * w + x] = column[y];
            }
        }
    }
}

fn to_complex<T: Element>(data: &[T]) -> Vec<Complex<T>> {
    data.iter().map(|&v| Complex::new(v, T::zero())).collect()
}

/// Per-channel 2-D DFT, unnormalised.
pub fn fft2d<T: Element>(x: &Tensor<T>) -> Result<ComplexSpectrum<T>> {
    let (channels, height, width) = dims("fft2d", x)?;
    let mut data = to_complex(x.data());
    transform_planes(&mut data, height, width, -1.0);
    Ok(ComplexSpectrum {
        channels,
        height,
        width,
        data,
    })
}

/// Inverse DFT with `1/(H·W)` normalisation, keeping the real part.
pub fn ifft2d<T: Element>(spectrum: &ComplexSpectrum<T>) -> Result<InverseTransform<T>> {
    let [ch, h, w] = spectrum.shape();
    if spectrum.data.len() != ch * h * w {
        return Err(Error::invalid("spectrum data does not match its shape"));
    }
    let mut data = spectrum.data.clone();
    transform_planes(&mut data, h, w, 1.0);
    let scale = c::<T>(1.0 / (h * w) as f64);
    let max_imag = data.iter().map(|z| (z.im * scale).as_f64().abs()).fold(0.0, f64::max);
    let real = Tensor::new(data.iter().map(|z| z.re * scale).collect(), &[ch, h, w])?;
    Ok(InverseTransform { real, max_imag })
}

/// Reference 2-D DFT by direct summation over both axes at once.
pub fn dft2d_naive<T: Element>(x: &Tensor<T>) -> Result<ComplexSpectrum<T>> {
    let (ch, h, w) = dims("dft2d_naive", x)?;
    let mut data = Vec::with_capacity(x.numel());
    for plane in x.data().chunks_exact(h * w) {
        for ky in 0..h {
            for kx in 0..w {
                let mut acc = Complex::new(0.0f64, 0.0);
                for y in 0..h {
                    for xx in 0..w {
                        let phase = -2.0 * std::f64::consts::PI * (((ky * y) % h) as f64 / h as f64 + ((kx * xx) % w) as f64 / w as f64);
                        acc += Complex::from_polar(plane[y * w + xx].as_f64(), phase);
                    }
                }
                data.push(Complex::new(c::<T>(acc.re), c::<T>(acc.im)));
            }
        }
    }
    Ok(ComplexSpectrum {
        channels: ch,
        height: h,
        width: w,
        data,
    })
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("log-magnitude eps must be positive, got {eps}")))
    }
}

/// `log(|X| + eps)` elementwise, as a constant tensor.
pub fn log_magnitude<T: Element>(spectrum: &ComplexSpectrum<T>, eps: f64) -> Result<Tensor<T>> {
    check_eps(eps)?;
    let e = c::<T>(eps);
    let data = spectrum.data.iter().map(|z| (z.norm() + e).ln()).collect();
    Tensor::new(data, &spectrum.shape())
}

/// Differentiable `log(|FFT(x)| + eps)` over `[C, H, W]`.
///
/// The gradient through `|X|` is taken as zero where the coefficient is
/// exactly zero.
pub fn log_magnitude_spectrum<T: Element>(x: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    check_eps(eps)?;
    let spectrum = fft2d(x)?;
    let e = c::<T>(eps);
    let data = spectrum.data.iter().map(|z| (z.norm() + e).ln()).collect();
    let (h, w) = (spectrum.height, spectrum.width);
    Tensor::from_op(
        "log_magnitude_spectrum",
        spectrum.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |ctx| {
            let mut u: Vec<Complex<T>> = spectrum
                .data
                .iter()
                .zip(ctx.grad)
                .map(|(z, &g)| {
                    let m = z.norm();
                    if m > T::zero() {
                        z * (g / ((m + e) * m))
                    } else {
                        Complex::new(T::zero(), T::zero())
                    }
                })
                .collect();
            transform_planes(&mut u, h, w, 1.0);
            vec![Some(u.into_iter().map(|z| z.re).collect())]
        }),
    )
}

/// Differentiable `Re(IFFT(z))` for a real spectrum `z` with zero phase.
pub fn zero_phase_ifft<T: Element>(z: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, h, w) = dims("zero_phase_ifft", z)?;
    let mut buf = to_complex(z.data());
    transform_planes(&mut buf, h, w, 1.0);
    let scale = c::<T>(1.0 / (h * w) as f64);
    let data = buf.iter().map(|v| v.re * scale).collect();
    Tensor::from_op(
        "zero_phase_ifft",
        z.shape().to_vec(),
        data,
        vec![z.clone()],
        Box::new(move |ctx| {
            let mut g = to_complex(ctx.grad);
            transform_planes(&mut g, h, w, -1.0);
            vec![Some(g.into_iter().map(|v| v.re * scale).collect())]
        }),
    )
}

//! Image I/O, YCbCr routing and paired-dataset handling.
//!
//! Rasters are planar `[C, H, W]` arrays of `f64` in `[0, 1]`. Colour
//! sources are split with full-range BT.601:
//!
//! ```text
//! Y  =       0.299    R + 0.587    G + 0.114    B
//! Cb = 0.5 − 0.168736 R − 0.331264 G + 0.5      B
//! Cr = 0.5 + 0.5      R − 0.418688 G − 0.081312 B
//! ```
//!
//! Only luminance goes through the network; chrominance of the colour
//! source is reattached afterwards.

use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageReader, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Round-half-away quantisation of a `[0, 1]` value to `0..=255`.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl Raster {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || data.len() != channels * height * width {
            return Err(Error::invalid(format!(
                "raster of {} values cannot be [{channels}, {height}, {width}]",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "raster" });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, v: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![v; channels * height * width],
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> Raster {
        let p = self.plane();
        Raster {
            channels: 1,
            height: self.height,
            width: self.width,
            data: self.data[c * p..(c + 1) * p].to_vec(),
        }
    }

    pub fn quantized(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn to_tensor<T: Element>(&self) -> Result<Tensor<T>> {
        Tensor::new(
            self.data.iter().map(|&v| T::from_f64(v)).collect(),
            &[self.channels, self.height, self.width],
        )
    }

    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Result<Self> {
        match *t.shape() {
            [c, h, w] => Raster::new(c, h, w, t.to_f64_vec()),
            _ => Err(Error::InvalidShape {
                op: "from_tensor",
                shape: t.shape().to_vec(),
                reason: "expected [C, H, W]".into(),
            }),
        }
    }

    /// Pads to `(height, width)` by mirror reflection about the last row/column.
    pub fn reflect_pad(&self, height: usize, width: usize) -> Result<Raster> {
        if height < self.height || width < self.width {
            return Err(Error::invalid("reflect_pad cannot shrink a raster"));
        }
        let fold = |i: usize, n: usize| {
            if n == 1 {
                return 0;
            }
            let period = 2 * (n - 1);
            let r = i % period;
            if r < n {
                r
            } else {
                period - r
            }
        };
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            for y in 0..height {
                let sy = fold(y, self.height);
                for x in 0..width {
                    data.push(self.data[c * self.plane() + sy * self.width + fold(x, self.width)]);
                }
            }
        }
        Raster::new(self.channels, height, width, data)
    }

    /// Top-left `height × width` window.
    pub fn crop(&self, height: usize, width: usize) -> Result<Raster> {
        if height > self.height || width > self.width {
            return Err(Error::invalid("crop larger than raster"));
        }
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            for y in 0..height {
                let start = c * self.plane() + y * self.width;
                data.extend_from_slice(&self.data[start..start + width]);
            }
        }
        Raster::new(self.channels, height, width, data)
    }
}

/// Reads an 8-bit grayscale or RGB PNG/PGM/PPM into `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Raster> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let unsupported = |what: &str| Error::Decode {
        path: path.to_path_buf(),
        reason: format!("unsupported pixel format: {what}"),
    };
    match img {
        DynamicImage::ImageLuma8(buf) => Raster::new(1, h, w, buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect()),
        DynamicImage::ImageRgb8(buf) => {
            let raw = buf.into_raw();
            let mut data = vec![0.0; 3 * h * w];
            for (i, px) in raw.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    data[c * h * w + i] = px[c] as f64 / 255.0;
                }
            }
            Raster::new(3, h, w, data)
        }
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageRgb16(_) => Err(unsupported("16-bit depth")),
        DynamicImage::ImageLumaA8(_) | DynamicImage::ImageRgba8(_) | DynamicImage::ImageLumaA16(_) | DynamicImage::ImageRgba16(_) => {
            Err(unsupported("alpha channel"))
        }
        other => Err(unsupported(&format!("{:?}", other.color()))),
    }
}

/// Writes a 1- or 3-channel raster; the format follows the file extension.
pub fn save_image(path: &Path, raster: &Raster) -> Result<()> {
    let (w, h) = (raster.width as u32, raster.height as u32);
    let q = raster.quantized();
    let encode_err = |e: image::ImageError| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    match raster.channels {
        1 => GrayImage::from_raw(w, h, q).expect("buffer size").save(path).map_err(encode_err),
        3 => {
            let p = raster.plane();
            let interleaved = (0..p).flat_map(|i| [q[i], q[p + i], q[2 * p + i]]).collect();
            RgbImage::from_raw(w, h, interleaved)
                .expect("buffer size")
                .save(path)
                .map_err(encode_err)
        }
        c => Err(Error::invalid(format!("cannot save a {c}-channel raster"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct YCbCr {
    pub y: Raster,
    pub cb: Raster,
    pub cr: Raster,
}

pub fn rgb_to_ycbcr(rgb: &Raster) -> Result<YCbCr> {
    if rgb.channels != 3 {
        return Err(Error::invalid(format!("expected RGB, got {} channels", rgb.channels)));
    }
    let p = rgb.plane();
    let (mut y, mut cb, mut cr) = (Vec::with_capacity(p), Vec::with_capacity(p), Vec::with_capacity(p));
    for i in 0..p {
        let (r, g, b) = (rgb.data[i], rgb.data[p + i], rgb.data[2 * p + i]);
        y.push((0.299 * r + 0.587 * g + 0.114 * b).clamp(0.0, 1.0));
        cb.push((0.5 - 0.168736 * r - 0.331264 * g + 0.5 * b).clamp(0.0, 1.0));
        cr.push((0.5 + 0.5 * r - 0.418688 * g - 0.081312 * b).clamp(0.0, 1.0));
    }
    let mk = |d| Raster::new(1, rgb.height, rgb.width, d);
    Ok(YCbCr {
        y: mk(y)?,
        cb: mk(cb)?,
        cr: mk(cr)?,
    })
}

pub fn ycbcr_to_rgb(ycc: &YCbCr) -> Result<Raster> {
    let (y, cb, cr) = (&ycc.y, &ycc.cb, &ycc.cr);
    if [cb, cr]
        .iter()
        .any(|c| c.channels != 1 || c.height != y.height || c.width != y.width)
        || y.channels != 1
    {
        return Err(Error::invalid("Y, Cb and Cr must be single-channel rasters of one size"));
    }
    let p = y.plane();
    let mut data = vec![0.0; 3 * p];
    for i in 0..p {
        let (l, u, v) = (y.data[i], cb.data[i] - 0.5, cr.data[i] - 0.5);
        data[i] = (l + 1.402 * v).clamp(0.0, 1.0);
        data[p + i] = (l - 0.344136 * u - 0.714136 * v).clamp(0.0, 1.0);
        data[2 * p + i] = (l + 1.772 * u).clamp(0.0, 1.0);
    }
    Raster::new(3, y.height, y.width, data)
}

/// Fused luminance with the original chrominance, back in RGB.
pub fn recompose_fused(y_fused: &Raster, cb: &Raster, cr: &Raster) -> Result<Raster> {
    ycbcr_to_rgb(&YCbCr {
        y: y_fused.clone(),
        cb: cb.clone(),
        cr: cr.clone(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    #[default]
    #[serde(rename = "structural-structural")]
    StructuralStructural,
    #[serde(rename = "functional-structural")]
    FunctionalStructural,
}

/// One manifest record; paths are relative to the manifest file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: String,
    pub path_a: PathBuf,
    pub path_b: PathBuf,
    #[serde(default)]
    pub modality: Modality,
}

#[derive(Clone, Debug)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<PairRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records: Vec<PairRecord> = serde_json::from_str(&text)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, records })
    }

    pub fn save(path: &Path, records: &[PairRecord]) -> Result<()> {
        let text = serde_json::to_string_pretty(records)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn load_pair(&self, record: &PairRecord) -> Result<ImagePair> {
        ImagePair::new(
            &record.pair_id,
            load_image(&self.resolve(&record.path_a))?,
            load_image(&self.resolve(&record.path_b))?,
            record.modality,
        )
    }

    pub fn load_all(&self) -> Result<Vec<ImagePair>> {
        self.records.iter().map(|r| self.load_pair(r)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct ImagePair {
    pub pair_id: String,
    pub a: Raster,
    pub b: Raster,
    pub modality: Modality,
}

impl ImagePair {
    pub fn new(pair_id: &str, a: Raster, b: Raster, modality: Modality) -> Result<Self> {
        if (a.height, a.width) != (b.height, b.width) {
            return Err(Error::invalid(format!(
                "pair {pair_id}: sources are {}×{} and {}×{}",
                a.height, a.width, b.height, b.width
            )));
        }
        for r in [&a, &b] {
            if r.channels != 1 && r.channels != 3 {
                return Err(Error::invalid(format!("pair {pair_id}: {}-channel source", r.channels)));
            }
        }
        Ok(Self {
            pair_id: pair_id.to_string(),
            a,
            b,
            modality,
        })
    }
}

/// Network-ready luminance pair plus what is needed to undo the preparation.
#[derive(Clone, Debug)]
pub struct PreparedPair {
    pub pair_id: String,
    /// `[1, H', W']` with `H'`, `W'` multiples of 8.
    pub y_a: Raster,
    pub y_b: Raster,
    /// Reference luminance at the original size, for metrics.
    pub ref_a: Raster,
    pub ref_b: Raster,
    pub chroma: Option<(Raster, Raster)>,
    pub height: usize,
    pub width: usize,
}

fn luminance(r: &Raster) -> Result<(Raster, Option<(Raster, Raster)>)> {
    if r.channels == 3 {
        let ycc = rgb_to_ycbcr(r)?;
        Ok((ycc.y, Some((ycc.cb, ycc.cr))))
    } else {
        Ok((r.clone(), None))
    }
}

/// Rounds up to the next multiple of 8.
pub fn padded_size(n: usize) -> usize {
    n.div_ceil(8) * 8
}

impl PreparedPair {
    /// Converts colour sources to luminance (keeping the first source's
    /// chrominance) and reflect-pads to a multiple of 8.
    pub fn new(pair: &ImagePair) -> Result<Self> {
        let (ya, ca) = luminance(&pair.a)?;
        let (yb, cb) = luminance(&pair.b)?;
        let (h, w) = (pair.a.height, pair.a.width);
        let (ph, pw) = (padded_size(h), padded_size(w));
        Ok(Self {
            pair_id: pair.pair_id.clone(),
            y_a: ya.reflect_pad(ph, pw)?,
            y_b: yb.reflect_pad(ph, pw)?,
            ref_a: ya,
            ref_b: yb,
            chroma: ca.or(cb),
            height: h,
            width: w,
        })
    }

    /// Crops fused luminance back to the source size and, for colour
    /// pairs with `color` set, reattaches chrominance.
    pub fn finish(&self, fused: &Raster, color: bool) -> Result<Raster> {
        let y = fused.crop(self.height, self.width)?;
        match (&self.chroma, color) {
            (Some((cb, cr)), true) => recompose_fused(&y, cb, cr),
            _ => Ok(y),
        }
    }
}

/// Seeded split into `(train, test)`; both keep the input order.
pub fn dataset_split<P: Clone>(pairs: &[P], test_count: usize, seed: u64) -> Result<(Vec<P>, Vec<P>)> {
    if test_count >= pairs.len() {
        return Err(Error::invalid(format!("cannot hold out {test_count} of {} pairs", pairs.len())));
    }
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_test = vec![false; pairs.len()];
    idx[..test_count].iter().for_each(|&i| is_test[i] = true);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (p, t) in pairs.iter().zip(is_test) {
        if t {
            test.push(p.clone())
        } else {
            train.push(p.clone())
        }
    }
    Ok((train, test))
}

/// Two complementary single-channel views of one random scene.
///
/// Source A carries sharp structure (rectangles and step edges) plus
/// stripes on its left half; source B carries smooth Gaussian blobs plus
/// stripes on its right half.
pub fn synthetic_pair(size: usize, seed: u64) -> (Raster, Raster) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size as f64;
    let mut structure = vec![0.0; size * size];
    for _ in 0..rng.random_range(2..5) {
        let (x0, y0) = (rng.random_range(0.0..0.7 * n), rng.random_range(0.0..0.7 * n));
        let (w, h) = (rng.random_range(0.15 * n..0.5 * n), rng.random_range(0.15 * n..0.5 * n));
        let level = rng.random_range(0.3..1.0);
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64, y as f64);
                if fx >= x0 && fx < x0 + w && fy >= y0 && fy < y0 + h {
                    structure[y * size + x] = level;
                }
            }
        }
    }
    let mut blobs = vec![0.0; size * size];
    for _ in 0..rng.random_range(2..5) {
        let (cx, cy) = (rng.random_range(0.0..n), rng.random_range(0.0..n));
        let s = rng.random_range(0.08 * n..0.25 * n);
        let amp = rng.random_range(0.4..1.0);
        for y in 0..size {
            for x in 0..size {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                blobs[y * size + x] += amp * (-d2 / (2.0 * s * s)).exp();
            }
        }
    }
    let period = rng.random_range(3.0..8.0);
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut a = Vec::with_capacity(size * size);
    let mut b = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let stripe = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * (x as f64 * ca + y as f64 * sa) / period).sin();
            let left = x < size / 2;
            a.push((0.1 + 0.6 * structure[i] + if left { 0.25 * stripe } else { 0.0 }).clamp(0.0, 1.0));
            b.push((0.05 + 0.7 * blobs[i].min(1.0) + if left { 0.0 } else { 0.2 * stripe }).clamp(0.0, 1.0));
        }
    }
    (
        Raster::new(1, size, size, a).expect("synthetic raster"),
        Raster::new(1, size, size, b).expect("synthetic raster"),
    )
}

pub fn synthetic_dataset(count: usize, size: usize, seed: u64) -> Vec<ImagePair> {
    (0..count)
        .map(|i| {
            let (a, b) = synthetic_pair(size, seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
            ImagePair {
                pair_id: format!("synthetic-{i:03}"),
                a,
                b,
                modality: Modality::StructuralStructural,
            }
        })
        .collect()
}

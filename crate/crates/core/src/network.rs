//! The fusion network: a four-scale convolutional encoder, a
//! spatial-frequential fusion (SFF) stage per scale and a skip-connected
//! decoder.
//!
//! ```text
//! φ₁ = Conv(I)            φⱼ = Conv(MP(φⱼ₋₁))                 j = 2..4
//! ψˢ = CAF(φ¹, φ²)        ψᶠ = IFT(CAF(log|FT φ¹|, log|FT φ²|))
//! ψ  = CAF(ψˢ, ψᶠ)
//! I_f = Conv([↑Conv([↑Conv([↑Conv(ψ₄), ψ₃]), ψ₂]), ψ₁])
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{CafBlock, CafConfig, ComplementRule};
use crate::baseline::{baseline_fuse, FusionRule};
use crate::checkpoint::{Checkpoint, NamedTensor};
use crate::error::{Error, Result};
use crate::param::{Initializer, ParamId, ParamStore};
use crate::spectral::{log_magnitude_spectrum, zero_phase_ifft, DEFAULT_LOG_EPS};
use crate::tensor::{Element, Tensor};

pub const NUM_SCALES: usize = 4;

/// Feature fusion used inside every SFF slot. Serialised as `"caf"`,
/// `"avg"`, `"l1"` or `"max"`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FusionMode {
    #[default]
    Caf,
    Rule(FusionRule),
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("caf") {
            Ok(Self::Caf)
        } else {
            s.parse().map(Self::Rule)
        }
    }
}

impl TryFrom<String> for FusionMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FusionMode> for String {
    fn from(m: FusionMode) -> String {
        m.to_string()
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Caf => f.write_str("caf"),
            Self::Rule(r) => r.fmt(f),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub channels: [usize; NUM_SCALES],
    pub kernel_size: usize,
    /// Both sources go through one encoder.
    pub shared_encoder: bool,
    /// Nominal input size; deep-scale patch sizes are clamped against it.
    pub image_size: usize,
    pub patch_sizes: [usize; NUM_SCALES],
    pub embed_dim: usize,
    pub num_heads: usize,
    pub ffn_ratio: usize,
    pub complement: ComplementRule,
    pub share_caf_branches: bool,
    /// Reuse one CAF block for the three slots of an SFF stage.
    pub share_sff_blocks: bool,
    pub fusion: FusionMode,
    /// Fourier-guided branch on/off.
    pub fgfb: bool,
    pub log_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            out_channels: 1,
            channels: [8, 16, 32, 64],
            kernel_size: 3,
            shared_encoder: true,
            image_size: 64,
            patch_sizes: [8, 4, 2, 1],
            embed_dim: 64,
            num_heads: 2,
            ffn_ratio: 4,
            complement: ComplementRule::Identity,
            share_caf_branches: false,
            share_sff_blocks: false,
            fusion: FusionMode::Caf,
            fgfb: true,
            log_eps: DEFAULT_LOG_EPS,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Full-width preset: 256-dim embedding, 16-pixel top-scale patches.
    pub fn full() -> Self {
        Self {
            channels: [64, 128, 256, 512],
            image_size: 256,
            patch_sizes: [16, 8, 4, 2],
            embed_dim: 256,
            num_heads: 4,
            ..Self::default()
        }
    }

    /// Smallest useful configuration, for gradient checks on 16×16 inputs.
    pub fn tiny() -> Self {
        Self {
            channels: [2, 2, 2, 2],
            image_size: 16,
            patch_sizes: [8, 4, 2, 1],
            embed_dim: 8,
            num_heads: 2,
            ffn_ratio: 2,
            ..Self::default()
        }
    }

    /// Patch size actually used at scale `j` (0-based): `min(p_j, size_j)`.
    pub fn effective_patch(&self, j: usize) -> usize {
        self.patch_sizes[j].min((self.image_size >> j).max(1))
    }

    pub fn caf_config(&self, j: usize) -> CafConfig {
        let size = self.image_size >> j;
        CafConfig {
            ffn_ratio: self.ffn_ratio,
            complement: self.complement,
            share_branches: self.share_caf_branches,
            ..CafConfig::new(
                self.channels[j],
                size,
                size,
                self.effective_patch(j),
                self.embed_dim,
                self.num_heads,
            )
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.channels.contains(&0) {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::invalid(format!("kernel size {} must be odd", self.kernel_size)));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(8) {
            return Err(Error::invalid(format!(
                "image size {} must be a positive multiple of 8",
                self.image_size
            )));
        }
        if self.log_eps.is_nan() || self.log_eps <= 0.0 {
            return Err(Error::invalid("log_eps must be positive"));
        }
        if self.fusion == FusionMode::Caf {
            for j in 0..NUM_SCALES {
                self.caf_config(j).validate()?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvLayer {
    fn build<T: Element>(store: &mut ParamStore<T>, init: &mut Initializer, name: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        Ok(Self {
            weight: store.register(
                format!("{name}.weight"),
                init.he_normal(cout * cin * k * k, cin * k * k),
                &[cout, cin, k, k],
            )?,
            bias: store.register(format!("{name}.bias"), vec![0.0; cout], &[cout])?,
        })
    }

    pub fn forward<T: Element>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(store.get(self.weight), store.get(self.bias))
    }
}

/// The four feature maps of one encoder pass, finest first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<T: Element> {
    pub levels: Vec<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub convs: Vec<ConvLayer>,
}

impl Encoder {
    fn build<T: Element>(store: &mut ParamStore<T>, init: &mut Initializer, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let mut cin = cfg.in_channels;
        let convs = (0..NUM_SCALES)
            .map(|j| {
                let layer = ConvLayer::build(store, init, &format!("{name}.conv{}", j + 1), cin, cfg.channels[j], cfg.kernel_size);
                cin = cfg.channels[j];
                layer
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { convs })
    }

    pub fn encode<T: Element>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        let mut levels: Vec<Tensor<T>> = Vec::with_capacity(NUM_SCALES);
        for conv in &self.convs {
            let input = match levels.last() {
                None => x.clone(),
                Some(prev) => prev.maxpool2d()?,
            };
            levels.push(conv.forward(store, &input)?.gelu()?);
        }
        Ok(FeaturePyramid { levels })
    }
}

/// Fusion stage of one scale.
#[derive(Clone, Debug)]
pub enum Sff {
    Caf {
        spatial: CafBlock,
        /// `None` when the Fourier branch is disabled.
        frequency: Option<CafBlock>,
        cross: Option<CafBlock>,
    },
    Rule {
        rule: FusionRule,
        fgfb: bool,
    },
}

impl Sff {
    fn build<T: Element>(store: &mut ParamStore<T>, cfg: &ModelConfig, j: usize) -> Result<Self> {
        if let FusionMode::Rule(rule) = cfg.fusion {
            return Ok(Sff::Rule { rule, fgfb: cfg.fgfb });
        }
        let caf = cfg.caf_config(j);
        let stream = 16 + 4 * j as u64;
        let name = format!("sff{}", j + 1);
        let spatial = CafBlock::build(
            store,
            &mut Initializer::new(cfg.seed, stream),
            &format!("{name}.spatial"),
            caf.clone(),
        )?;
        let (frequency, cross) = match (cfg.fgfb, cfg.share_sff_blocks) {
            (false, _) => (None, None),
            (true, true) => (Some(spatial.clone()), Some(spatial.clone())),
            (true, false) => (
                Some(CafBlock::build(
                    store,
                    &mut Initializer::new(cfg.seed, stream + 1),
                    &format!("{name}.frequency"),
                    caf.clone(),
                )?),
                Some(CafBlock::build(
                    store,
                    &mut Initializer::new(cfg.seed, stream + 2),
                    &format!("{name}.cross"),
                    caf,
                )?),
            ),
        };
        Ok(Sff::Caf { spatial, frequency, cross })
    }

    fn params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if let Sff::Caf { spatial, frequency, cross } = self {
            for b in std::iter::once(spatial).chain(frequency).chain(cross) {
                ids.extend(b.params());
            }
            ids.sort();
            ids.dedup();
        }
        ids
    }

    fn slot<T: Element>(
        block: Option<&CafBlock>,
        rule: Option<FusionRule>,
        store: &ParamStore<T>,
        a: &Tensor<T>,
        b: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        match (block, rule) {
            (Some(blk), _) => blk.fuse(store, a, b),
            (None, Some(r)) => baseline_fuse(a, b, r),
            (None, None) => unreachable!("fusion slot without block or rule"),
        }
    }

    /// `ψ = fuse_x(fuse_s(φ¹, φ²), IFT(fuse_f(log|FT φ¹|, log|FT φ²|)))`.
    pub fn fuse<T: Element>(&self, store: &ParamStore<T>, a: &Tensor<T>, b: &Tensor<T>, log_eps: f64) -> Result<Tensor<T>> {
        let (spatial, frequency, cross, rule, fgfb) = match self {
            Sff::Caf { spatial, frequency, cross } => (Some(spatial), frequency.as_ref(), cross.as_ref(), None, frequency.is_some()),
            Sff::Rule { rule, fgfb } => (None, None, None, Some(*rule), *fgfb),
        };
        let spatial_fused = Self::slot(spatial, rule, store, a, b)?;
        if !fgfb {
            return Ok(spatial_fused);
        }
        let la = log_magnitude_spectrum(a, log_eps)?;
        let lb = log_magnitude_spectrum(b, log_eps)?;
        let freq_fused = zero_phase_ifft(&Self::slot(frequency, rule, store, &la, &lb)?)?;
        Self::slot(cross, rule, store, &spatial_fused, &freq_fused)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    /// Coarse to fine: `C₄→C₃`, `2C₃→C₂`, `2C₂→C₁`, `2C₁→out`.
    pub convs: Vec<ConvLayer>,
}

impl Decoder {
    fn build<T: Element>(store: &mut ParamStore<T>, init: &mut Initializer, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.channels;
        let k = cfg.kernel_size;
        let dims = [(c[3], c[2]), (2 * c[2], c[1]), (2 * c[1], c[0]), (2 * c[0], cfg.out_channels)];
        let convs = dims
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| ConvLayer::build(store, init, &format!("decoder.conv{}", i + 1), cin, cout, k))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { convs })
    }

    /// Decodes fused features (finest first) to an image in `[0, 1]`.
    pub fn decode<T: Element>(&self, store: &ParamStore<T>, fused: &[Tensor<T>]) -> Result<Tensor<T>> {
        if fused.len() != NUM_SCALES {
            return Err(Error::invalid(format!("decoder needs {NUM_SCALES} scales, got {}", fused.len())));
        }
        for j in 1..NUM_SCALES {
            let (fine, coarse) = (fused[j - 1].shape(), fused[j].shape());
            if fine.len() != 3 || coarse.len() != 3 || fine[1] != 2 * coarse[1] || fine[2] != 2 * coarse[2] {
                return Err(Error::ShapeMismatch {
                    op: "decode",
                    lhs: fine.to_vec(),
                    rhs: coarse.to_vec(),
                });
            }
        }
        let mut x = self.convs[0].forward(store, &fused[3])?.gelu()?;
        for (i, skip) in [&fused[2], &fused[1], &fused[0]].into_iter().enumerate() {
            let merged = Tensor::concat(&[x.upsample2x()?, skip.clone()])?;
            let y = self.convs[i + 1].forward(store, &merged)?;
            x = if i == 2 { y.sigmoid()? } else { y.gelu()? };
        }
        Ok(x)
    }
}

/// Network topology: parameter handles for every stage. Values live in a
/// [`ParamStore`] so the same topology can be evaluated at any precision.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub encoders: Vec<Encoder>,
    pub sff: Vec<Sff>,
    pub decoder: Decoder,
}

/// Everything one forward pass computes.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T: Element> {
    pub pyramid_a: FeaturePyramid<T>,
    pub pyramid_b: FeaturePyramid<T>,
    pub fused: Vec<Tensor<T>>,
    pub output: Tensor<T>,
}

impl Network {
    /// Registers all parameters in `store`. Encoder, decoder and each SFF
    /// stage draw from separate RNG streams, so ablations that swap the
    /// fusion stage keep identical encoder and decoder weights.
    pub fn build<T: Element>(config: ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let n_enc = if config.shared_encoder { 1 } else { 2 };
        let encoders = (0..n_enc)
            .map(|i| {
                let name = if config.shared_encoder {
                    "encoder".to_string()
                } else {
                    format!("encoder{}", i + 1)
                };
                Encoder::build(store, &mut Initializer::new(config.seed, 1 + i as u64), &name, &config)
            })
            .collect::<Result<Vec<_>>>()?;
        let sff = (0..NUM_SCALES).map(|j| Sff::build(store, &config, j)).collect::<Result<Vec<_>>>()?;
        let decoder = Decoder::build(store, &mut Initializer::new(config.seed, 3), &config)?;
        Ok(Self {
            config,
            encoders,
            sff,
            decoder,
        })
    }

    pub fn encoder(&self, branch: usize) -> &Encoder {
        &self.encoders[branch.min(self.encoders.len() - 1)]
    }

    fn check_input<T: Element>(&self, x: &Tensor<T>) -> Result<()> {
        match *x.shape() {
            [c, h, w] if c == self.config.in_channels && h % 8 == 0 && w % 8 == 0 && h > 0 && w > 0 => Ok(()),
            _ => Err(Error::InvalidShape {
                op: "forward",
                shape: x.shape().to_vec(),
                reason: format!("expected [{}, H, W] with H and W divisible by 8", self.config.in_channels),
            }),
        }
    }

    pub fn encode<T: Element>(&self, store: &ParamStore<T>, branch: usize, x: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        self.check_input(x)?;
        self.encoder(branch).encode(store, x)
    }

    pub fn trace<T: Element>(&self, store: &ParamStore<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<ForwardTrace<T>> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let pyramid_a = self.encode(store, 0, a)?;
        let pyramid_b = self.encode(store, 1, b)?;
        let fused = self
            .sff
            .iter()
            .zip(pyramid_a.levels.iter().zip(&pyramid_b.levels))
            .map(|(stage, (fa, fb))| stage.fuse(store, fa, fb, self.config.log_eps))
            .collect::<Result<Vec<_>>>()?;
        let output = self.decoder.decode(store, &fused)?;
        Ok(ForwardTrace {
            pyramid_a,
            pyramid_b,
            fused,
            output,
        })
    }

    pub fn forward<T: Element>(&self, store: &ParamStore<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.trace(store, a, b)?.output)
    }

    /// Parameter ids grouped by stage: encoder(s), fusion, decoder.
    pub fn stage_params(&self) -> [Vec<ParamId>; 3] {
        let conv_ids = |convs: &[ConvLayer]| convs.iter().flat_map(|c| [c.weight, c.bias]).collect::<Vec<_>>();
        let enc = self.encoders.iter().flat_map(|e| conv_ids(&e.convs)).collect();
        let fusion = self.sff.iter().flat_map(|s| s.params()).collect();
        [enc, fusion, conv_ids(&self.decoder.convs)]
    }
}

/// A network together with its parameter values.
#[derive(Clone, Debug)]
pub struct AdaFuseModel<T: Element> {
    pub network: Network,
    pub params: ParamStore<T>,
}

impl<T: Element> AdaFuseModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut params = ParamStore::new();
        let network = Network::build(config, &mut params)?;
        Ok(Self { network, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.network.config
    }

    pub fn forward(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.network.forward(&self.params, a, b)
    }

    pub fn trace(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<ForwardTrace<T>> {
        self.network.trace(&self.params, a, b)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Parameter values as 32-bit blobs, in registration order.
    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        self.params
            .iter()
            .map(|(_, name, t)| NamedTensor::new(name, t.shape(), t.data().iter().map(|v| v.as_f64() as f32).collect()))
            .collect()
    }

    /// Rebuilds the topology from the checkpoint's config and loads every
    /// parameter by name; missing, extra or misshapen tensors are errors.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Self::new(ckpt.config.clone())?;
        if ckpt.params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                ckpt.params.len(),
                model.params.len()
            )));
        }
        for nt in &ckpt.params {
            let id = model
                .params
                .id_of(&nt.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {}", nt.name)))?;
            if model.params.get(id).shape() != nt.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, model expects {:?}",
                    nt.name,
                    nt.shape,
                    model.params.get(id).shape()
                )));
            }
            model.params.set(id, nt.data.iter().map(|&v| T::from_f64(v as f64)).collect())?;
        }
        Ok(model)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.config().clone(), self.named_tensors())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradient, random_tensor};

    fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
        let z = random_tensor::<f64>(shape, seed, 1.0);
        Tensor::new(z.data().iter().map(|v| 0.5 + 0.5 * v.tanh()).collect(), shape).unwrap()
    }

    #[test]
    fn pyramid_shapes() {
        let model = AdaFuseModel::<f64>::new(ModelConfig::default()).unwrap();
        let x = uniform(&[1, 64, 64], 1);
        let p = model.network.encode(&model.params, 0, &x).unwrap();
        let shapes: Vec<_> = p.levels.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![8, 64, 64], vec![16, 32, 32], vec![32, 16, 16], vec![64, 8, 8]]);
        assert!(model.network.encode(&model.params, 0, &uniform(&[1, 60, 64], 1)).is_err());
    }

    #[test]
    fn shared_encoder_uses_one_parameter_set() {
        let model = AdaFuseModel::<f64>::new(ModelConfig::tiny()).unwrap();
        assert!(std::ptr::eq(model.network.encoder(0), model.network.encoder(1)));
        let x = uniform(&[1, 16, 16], 2);
        let t = model.trace(&x, &x).unwrap();
        for (a, b) in t.pyramid_a.levels.iter().zip(&t.pyramid_b.levels) {
            assert_eq!(a.data(), b.data());
        }
        let split = AdaFuseModel::<f64>::new(ModelConfig {
            shared_encoder: false,
            ..ModelConfig::tiny()
        })
        .unwrap();
        assert_eq!(split.network.encoders.len(), 2);
    }

    #[test]
    fn forward_shape_range_and_determinism() {
        let model = AdaFuseModel::<f64>::new(ModelConfig::default()).unwrap();
        let (a, b) = (uniform(&[1, 64, 64], 3), uniform(&[1, 64, 64], 4));
        let y = model.forward(&a, &b).unwrap();
        assert_eq!(y.shape(), &[1, 64, 64]);
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let again = AdaFuseModel::<f64>::new(ModelConfig::default()).unwrap();
        assert_eq!(again.forward(&a, &b).unwrap().data(), y.data());
    }

    #[test]
    fn gradient_reaches_first_conv_from_deepest_scale() {
        let model = AdaFuseModel::<f64>::new(ModelConfig::tiny()).unwrap();
        let p = model.network.encode(&model.params, 0, &uniform(&[1, 16, 16], 5)).unwrap();
        p.levels[3].sum().unwrap().backward().unwrap();
        let w = model.network.encoders[0].convs[0].weight;
        assert!(model.params.get(w).grad().unwrap().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn every_parameter_receives_gradient() {
        for fusion in [FusionMode::Caf, FusionMode::Rule(FusionRule::L1)] {
            for fgfb in [true, false] {
                let cfg = ModelConfig {
                    fusion,
                    fgfb,
                    ..ModelConfig::tiny()
                };
                let model = AdaFuseModel::<f64>::new(cfg).unwrap();
                let y = model.forward(&uniform(&[1, 16, 16], 6), &uniform(&[1, 16, 16], 7)).unwrap();
                y.mul(&random_tensor(&[1, 16, 16], 8, 1.0))
                    .unwrap()
                    .sum()
                    .unwrap()
                    .backward()
                    .unwrap();
                for (_, name, t) in model.params.iter() {
                    let g = t.grad().unwrap_or_default();
                    assert!(g.iter().any(|&v| v != 0.0), "{fusion:?}/{fgfb}: dead parameter {name}");
                }
            }
        }
    }

    #[test]
    fn ablations_keep_encoder_and_decoder_weights() {
        let caf = AdaFuseModel::<f64>::new(ModelConfig::tiny()).unwrap();
        for cfg in [
            ModelConfig {
                fusion: FusionMode::Rule(FusionRule::Avg),
                ..ModelConfig::tiny()
            },
            ModelConfig {
                fgfb: false,
                ..ModelConfig::tiny()
            },
        ] {
            let other = AdaFuseModel::<f64>::new(cfg).unwrap();
            let outer = other
                .params
                .iter()
                .filter(|(_, n, _)| n.starts_with("encoder") || n.starts_with("decoder"));
            for (_, name, t) in outer {
                let id = caf.params.id_of(name).unwrap();
                assert_eq!(caf.params.get(id).data(), t.data());
            }
            // Identical fused features decode identically.
            let x = uniform(&[1, 16, 16], 9);
            let fused = caf.trace(&x, &x).unwrap().fused;
            let d1 = caf.network.decoder.decode(&caf.params, &fused).unwrap();
            let d2 = other.network.decoder.decode(&other.params, &fused).unwrap();
            assert_eq!(d1.data(), d2.data());
        }
    }

    #[test]
    fn sff_shapes_and_fgfb_toggle() {
        let cfg = ModelConfig {
            fgfb: false,
            ..ModelConfig::tiny()
        };
        let model = AdaFuseModel::<f64>::new(cfg).unwrap();
        let a = random_tensor::<f64>(&[2, 16, 16], 1, 1.0);
        let b = random_tensor::<f64>(&[2, 16, 16], 2, 1.0);
        let Sff::Caf { spatial, frequency, cross } = &model.network.sff[0] else {
            panic!()
        };
        assert!(frequency.is_none() && cross.is_none());
        let out = model.network.sff[0].fuse(&model.params, &a, &b, 1e-8).unwrap();
        assert_eq!(out.data(), spatial.fuse(&model.params, &a, &b).unwrap().data());

        let full = AdaFuseModel::<f64>::new(ModelConfig::tiny()).unwrap();
        let out = full.network.sff[0].fuse(&full.params, &a, &b, 1e-8).unwrap();
        assert_eq!(out.shape(), a.shape());
    }

    #[test]
    fn sff_self_fusion_is_finite_and_deterministic() {
        let model = AdaFuseModel::<f64>::new(ModelConfig::tiny()).unwrap();
        for seed in 0..100 {
            let phi = random_tensor::<f64>(&[2, 8, 8], seed, 1.0);
            let x = model.network.sff[1].fuse(&model.params, &phi, &phi, 1e-8).unwrap();
            let y = model.network.sff[1].fuse(&model.params, &phi, &phi, 1e-8).unwrap();
            assert!(x.data().iter().all(|v| v.is_finite()));
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn decode_gradient_on_tiny_pyramid() {
        let model = AdaFuseModel::<f64>::new(ModelConfig::tiny()).unwrap();
        let pyr: Vec<_> = (0..4)
            .map(|j| random_tensor::<f64>(&[2, 16 >> j, 16 >> j], j as u64, 1.0))
            .collect();
        let r = random_tensor::<f64>(&[1, 16, 16], 11, 1.0);
        for j in 0..4 {
            let e = check_gradient(
                |x| {
                    let mut p = pyr.clone();
                    p[j] = x.clone();
                    model.network.decoder.decode(&model.params, &p)?.mul(&r)?.sum()
                },
                &pyr[j],
            )
            .unwrap();
            assert!(e < 1e-4, "scale {j}: {e:e}");
        }
        let bad = vec![pyr[0].clone(), pyr[0].clone(), pyr[2].clone(), pyr[3].clone()];
        assert!(model.network.decoder.decode(&model.params, &bad).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig {
            image_size: 60,
            ..ModelConfig::default()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            kernel_size: 2,
            ..ModelConfig::default()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            num_heads: 3,
            ..ModelConfig::default()
        }
        .validate()
        .is_err());
        let full = ModelConfig::full();
        assert_eq!((full.effective_patch(0), full.effective_patch(3)), (16, 2));
        let clamp = ModelConfig {
            image_size: 16,
            patch_sizes: [16, 16, 16, 16],
            ..ModelConfig::tiny()
        };
        assert_eq!((0..4).map(|j| clamp.effective_patch(j)).collect::<Vec<_>>(), vec![16, 8, 4, 2]);
        assert_eq!("avg".parse::<FusionMode>().unwrap(), FusionMode::Rule(FusionRule::Avg));
        assert_eq!("CAF".parse::<FusionMode>().unwrap(), FusionMode::Caf);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]
        #[test]
        fn pyramid_shape_algebra(h8 in 1usize..5, w8 in 1usize..5) {
            let model = AdaFuseModel::<f64>::new(ModelConfig { fusion: FusionMode::Rule(FusionRule::Avg), ..ModelConfig::tiny() }).unwrap();
            let x = uniform(&[1, 8 * h8, 8 * w8], 1);
            let p = model.network.encode(&model.params, 0, &x).unwrap();
            for j in 0..4 {
                proptest::prop_assert_eq!(p.levels[j].shape(), &[2, (8 * h8) >> j, (8 * w8) >> j]);
            }
            let y = model.forward(&x, &x).unwrap();
            proptest::prop_assert_eq!(y.shape(), &[1, 8 * h8, 8 * w8]);
        }
    }
}

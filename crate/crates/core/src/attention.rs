//! Patch embedding, the pre-norm Transformer encoder and the cross attention
//! fusion (CAF) block.
//!
//! A CAF block takes two `[c, h, w]` feature maps, cuts each into
//! `p × p` patches (tokens of width `D = p²·c`), embeds and encodes them
//! per branch, projects both through shared `W^Q, W^K, W^V` (width `d`),
//! swaps keys between branches and recombines the values:
//!
//! ```text
//! s¹ = softmax(Q¹·K²ᵀ/√d)    s² = softmax(Q²·K¹ᵀ/√d)
//! ψ  = (1−s¹)V¹ + s¹V² + (1−s²)V² + s²V¹
//! ```
//!
//! The fused tokens are projected back to width `D` and folded into
//! `[c, h, w]`. How `(1−s)` acts on a row-stochastic matrix is selected by
//! [`ComplementRule`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{Initializer, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

/// Reading of the score complement `(1−s)` in the fusion sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComplementRule {
    /// `(I − s)·V`: each complementary pair sums to `V` when `s` is shared.
    #[default]
    Identity,
    /// `(J − s)·V / (n − 1)` with `J` all ones: the complement stays an average.
    Normalized,
    /// `(J − s)·V` without rescaling.
    AllOnes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CafConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    #[serde(default = "default_ffn_ratio")]
    pub ffn_ratio: usize,
    #[serde(default)]
    pub complement: ComplementRule,
    /// One patch embedding and Transformer encoder for both inputs.
    #[serde(default)]
    pub share_branches: bool,
}

fn default_ffn_ratio() -> usize {
    4
}

impl CafConfig {
    pub fn new(channels: usize, height: usize, width: usize, patch_size: usize, embed_dim: usize, num_heads: usize) -> Self {
        Self {
            channels,
            height,
            width,
            patch_size,
            embed_dim,
            num_heads,
            ffn_ratio: default_ffn_ratio(),
            complement: ComplementRule::default(),
            share_branches: false,
        }
    }

    /// Width of one flattened patch, `p²·c`.
    pub fn token_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn num_tokens(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if [
            self.channels,
            self.height,
            self.width,
            p,
            self.embed_dim,
            self.num_heads,
            self.ffn_ratio,
        ]
        .contains(&0)
        {
            return Err(Error::invalid(format!("CAF config has a zero field: {self:?}")));
        }
        if !self.height.is_multiple_of(p) || !self.width.is_multiple_of(p) {
            return Err(Error::invalid(format!(
                "patch size {p} does not divide {}×{}",
                self.height, self.width
            )));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::invalid(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if !self.token_dim().is_multiple_of(self.num_heads) {
            return Err(Error::invalid(format!(
                "token width {} not divisible by {} heads",
                self.token_dim(),
                self.num_heads
            )));
        }
        Ok(())
    }
}

/// `[c, h, w] → [(h/p)·(w/p), c·p·p]`, tokens in row-major patch order.
pub fn patchify<T: Element>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let [c, h, w] = *x.shape() else {
        return Err(Error::InvalidShape {
            op: "patchify",
            shape: x.shape().to_vec(),
            reason: "expected [C, H, W]".into(),
        });
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::InvalidShape {
            op: "patchify",
            shape: x.shape().to_vec(),
            reason: format!("patch size {p} does not tile the image"),
        });
    }
    x.reshape(&[c, h / p, p, w / p, p])?
        .permute(&[1, 3, 0, 2, 4])?
        .reshape(&[(h / p) * (w / p), c * p * p])
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Element>(tokens: &Tensor<T>, c: usize, h: usize, w: usize, p: usize) -> Result<Tensor<T>> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) || tokens.shape() != [(h / p) * (w / p), c * p * p] {
        return Err(Error::InvalidShape {
            op: "unpatchify",
            shape: tokens.shape().to_vec(),
            reason: format!("cannot fold into [{c}, {h}, {w}] with patch {p}"),
        });
    }
    tokens
        .reshape(&[h / p, w / p, c, p, p])?
        .permute(&[2, 0, 3, 1, 4])?
        .reshape(&[c, h, w])
}

/// Patch tokens followed by the embedding projection.
pub fn patch_embed<T: Element>(x: &Tensor<T>, p: usize, proj: &Linear, store: &ParamStore<T>) -> Result<Tensor<T>> {
    proj.forward(store, &patchify(x, p)?)
}

/// `[n, d] → [heads, n, d/heads]`.
pub fn split_heads<T: Element>(x: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let [n, d] = *x.shape() else {
        return Err(Error::InvalidShape {
            op: "split_heads",
            shape: x.shape().to_vec(),
            reason: "expected [tokens, width]".into(),
        });
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::invalid(format!("width {d} not divisible by {heads} heads")));
    }
    x.reshape(&[n, heads, d / heads])?.permute(&[1, 0, 2])
}

/// `[heads, n, dh] → [n, heads·dh]`.
pub fn merge_heads<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [h, n, dh] = *x.shape() else {
        return Err(Error::InvalidShape {
            op: "merge_heads",
            shape: x.shape().to_vec(),
            reason: "expected [heads, tokens, width]".into(),
        });
    };
    x.permute(&[1, 0, 2])?.reshape(&[n, h * dh])
}

/// Multi-head self attention with output projection.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl SelfAttention {
    fn build<T: Element>(store: &mut ParamStore<T>, init: &mut Initializer, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            query: Linear::build(store, init, &format!("{name}.query"), dim, dim, true)?,
            key: Linear::build(store, init, &format!("{name}.key"), dim, dim, true)?,
            value: Linear::build(store, init, &format!("{name}.value"), dim, dim, true)?,
            out: Linear::build(store, init, &format!("{name}.out"), dim, dim, true)?,
            heads,
        })
    }

    pub fn forward<T: Element>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let q = split_heads(&self.query.forward(store, x)?, self.heads)?;
        let k = split_heads(&self.key.forward(store, x)?, self.heads)?;
        let v = split_heads(&self.value.forward(store, x)?, self.heads)?;
        let dh = q.shape()[2] as f64;
        let scores = q.matmul(&k.transpose()?)?.scalar_mul(1.0 / dh.sqrt())?.softmax()?;
        self.out.forward(store, &merge_heads(&scores.matmul(&v)?)?)
    }
}

/// Pre-norm Transformer encoder block:
/// `F = x + MSA(LN(x))`, `out = F + FFN(LN(F))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attention: SelfAttention,
    pub norm2: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl TransformerBlock {
    pub fn build<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_ratio: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::build(store, &format!("{name}.norm1"), dim)?,
            attention: SelfAttention::build(store, init, &format!("{name}.attn"), dim, heads)?,
            norm2: LayerNorm::build(store, &format!("{name}.norm2"), dim)?,
            ffn_in: Linear::build(store, init, &format!("{name}.ffn_in"), dim, dim * ffn_ratio, true)?,
            ffn_out: Linear::build(store, init, &format!("{name}.ffn_out"), dim * ffn_ratio, dim, true)?,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let a = &self.attention;
        let mut ids = vec![self.norm1.gain, self.norm1.bias, self.norm2.gain, self.norm2.bias];
        for l in [&a.query, &a.key, &a.value, &a.out, &self.ffn_in, &self.ffn_out] {
            ids.extend(l.params());
        }
        ids
    }
}

/// Runs one encoder block over `[n, D]` tokens.
pub fn transformer_encode<T: Element>(tokens: &Tensor<T>, block: &TransformerBlock, store: &ParamStore<T>) -> Result<Tensor<T>> {
    let f = tokens.add(&block.attention.forward(store, &block.norm1.forward(store, tokens)?)?)?;
    let hidden = block.ffn_in.forward(store, &block.norm2.forward(store, &f)?)?.gelu()?;
    f.add(&block.ffn_out.forward(store, &hidden)?)
}

/// `LN(tokens)` followed by the three bias-free fusion projections.
pub fn qkv_project<T: Element>(
    tokens: &Tensor<T>,
    norm: &LayerNorm,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    store: &ParamStore<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let h = norm.forward(store, tokens)?;
    Ok((h.matmul(store.get(wq))?, h.matmul(store.get(wk))?, h.matmul(store.get(wv))?))
}

/// Cross scores with exchanged keys, per head: `s¹ = softmax(Q¹K²ᵀ/√d)`,
/// `s² = softmax(Q²K¹ᵀ/√d)`. Inputs are `[heads, n, d/heads]`.
pub fn cross_attention_scores<T: Element>(
    q1: &Tensor<T>,
    k2: &Tensor<T>,
    q2: &Tensor<T>,
    k1: &Tensor<T>,
    d: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let shape = q1.shape();
    if [k2, q2, k1].iter().any(|t| t.shape() != shape) {
        return Err(Error::ShapeMismatch {
            op: "cross_attention_scores",
            lhs: shape.to_vec(),
            rhs: [k2, q2, k1].iter().find(|t| t.shape() != shape).unwrap().shape().to_vec(),
        });
    }
    let scale = 1.0 / (d as f64).sqrt();
    let s1 = q1.matmul(&k2.transpose()?)?.scalar_mul(scale)?.softmax()?;
    let s2 = q2.matmul(&k1.transpose()?)?.scalar_mul(scale)?.softmax()?;
    Ok((s1, s2))
}

/// `(1−s)·v` under the chosen rule; `s: [h, n, n]`, `v: [h, n, dh]`.
fn complement_attend<T: Element>(s: &Tensor<T>, v: &Tensor<T>, rule: ComplementRule) -> Result<Tensor<T>> {
    let sv = s.matmul(v)?;
    match rule {
        ComplementRule::Identity => v.sub(&sv),
        ComplementRule::Normalized | ComplementRule::AllOnes => {
            let (h, n) = (s.shape()[0], s.shape()[1]);
            let ones = Tensor::<T>::ones(&[n, n])?.repeat_leading(h)?;
            let jv = ones.matmul(v)?.sub(&sv)?;
            if rule == ComplementRule::Normalized {
                jv.scalar_mul(1.0 / (n.max(2) - 1) as f64)
            } else {
                Ok(jv)
            }
        }
    }
}

/// `(1−s¹)V¹ + s¹V² + (1−s²)V² + s²V¹`.
pub fn combine<T: Element>(s1: &Tensor<T>, s2: &Tensor<T>, v1: &Tensor<T>, v2: &Tensor<T>, rule: ComplementRule) -> Result<Tensor<T>> {
    complement_attend(s1, v1, rule)?
        .add(&s1.matmul(v2)?)?
        .add(&complement_attend(s2, v2, rule)?)?
        .add(&s2.matmul(v1)?)
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub embed: Linear,
    pub encoder: TransformerBlock,
}

/// Parameters of one CAF block.
#[derive(Clone, Debug)]
pub struct CafBlock {
    pub config: CafConfig,
    /// One entry when `share_branches`, otherwise two.
    pub branches: Vec<Branch>,
    pub fuse_norm: LayerNorm,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub unembed: Linear,
}

/// Intermediate values of one CAF evaluation.
#[derive(Clone, Debug)]
pub struct CafTrace<T: Element> {
    pub s1: Tensor<T>,
    pub s2: Tensor<T>,
    pub v1: Tensor<T>,
    pub v2: Tensor<T>,
    pub output: Tensor<T>,
}

impl CafBlock {
    pub fn build<T: Element>(store: &mut ParamStore<T>, init: &mut Initializer, name: &str, config: CafConfig) -> Result<Self> {
        config.validate()?;
        let dim = config.token_dim();
        let d = config.embed_dim;
        let count = if config.share_branches { 1 } else { 2 };
        let branches = (0..count)
            .map(|i| {
                let prefix = format!("{name}.branch{}", i + 1);
                Ok(Branch {
                    embed: Linear::build(store, init, &format!("{prefix}.embed"), dim, dim, true)?,
                    encoder: TransformerBlock::build(store, init, &format!("{prefix}.encoder"), dim, config.num_heads, config.ffn_ratio)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let fuse_norm = LayerNorm::build(store, &format!("{name}.fuse_norm"), dim)?;
        let mut proj = |suffix: &str| {
            store.register(
                format!("{name}.{suffix}"),
                init.trunc_normal(dim * d, crate::param::PROJECTION_STD),
                &[dim, d],
            )
        };
        let (wq, wk, wv) = (proj("w_q")?, proj("w_k")?, proj("w_v")?);
        let unembed = Linear::build(store, init, &format!("{name}.unembed"), d, dim, true)?;
        Ok(Self {
            config,
            branches,
            fuse_norm,
            wq,
            wk,
            wv,
            unembed,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for b in &self.branches {
            ids.extend(b.embed.params());
            ids.extend(b.encoder.params());
        }
        ids.extend([self.fuse_norm.gain, self.fuse_norm.bias, self.wq, self.wk, self.wv]);
        ids.extend(self.unembed.params());
        ids
    }

    fn branch(&self, i: usize) -> &Branch {
        &self.branches[i.min(self.branches.len() - 1)]
    }

    fn encode_branch<T: Element>(&self, store: &ParamStore<T>, i: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.branch(i);
        let tokens = patch_embed(x, self.config.patch_size, &b.embed, store)?;
        transformer_encode(&tokens, &b.encoder, store)
    }

    /// Maps head-split fused values `[heads, n, d/heads]` back to `[c, height, width]`.
    pub fn unembed<T: Element>(&self, store: &ParamStore<T>, values: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
        let c = &self.config;
        let tokens = self.unembed.forward(store, &merge_heads(values)?)?;
        unpatchify(&tokens, c.channels, height, width, c.patch_size)
    }

    pub fn trace<T: Element>(&self, store: &ParamStore<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<CafTrace<T>> {
        let c = &self.config;
        if a.shape() != b.shape() || a.rank() != 3 || a.shape()[0] != c.channels {
            return Err(Error::ShapeMismatch {
                op: "caf_fuse",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let t1 = self.encode_branch(store, 0, a)?;
        let t2 = self.encode_branch(store, 1, b)?;
        let (q1, k1, v1) = qkv_project(&t1, &self.fuse_norm, self.wq, self.wk, self.wv, store)?;
        let (q2, k2, v2) = qkv_project(&t2, &self.fuse_norm, self.wq, self.wk, self.wv, store)?;
        let h = c.num_heads;
        let [q1, k1, v1, q2, k2, v2] = [q1, k1, v1, q2, k2, v2].map(|t| split_heads(&t, h));
        let (q1, k1, v1, q2, k2, v2) = (q1?, k1?, v1?, q2?, k2?, v2?);
        let (s1, s2) = cross_attention_scores(&q1, &k2, &q2, &k1, c.embed_dim)?;
        let fused = combine(&s1, &s2, &v1, &v2, c.complement)?;
        let output = self.unembed(store, &fused, a.shape()[1], a.shape()[2])?;
        Ok(CafTrace { s1, s2, v1, v2, output })
    }

    /// Fuses two `[c, h, w]` maps into one of the same shape. Any spatial
    /// size tiled by the patch size is accepted; the configured size is nominal.
    pub fn fuse<T: Element>(&self, store: &ParamStore<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.trace(store, a, b)?.output)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradient, random_tensor};
    use proptest::prelude::*;

    fn block(config: CafConfig, seed: u64) -> (ParamStore<f64>, CafBlock) {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed, 0);
        let b = CafBlock::build(&mut store, &mut init, "caf", config).unwrap();
        (store, b)
    }

    /// Scales every weight up so attention is far from uniform.
    fn sharpen(store: &mut ParamStore<f64>, factor: f64) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.name(id).ends_with("gain") {
                continue;
            }
            let v = store.get(id).data().iter().map(|x| x * factor).collect();
            store.set(id, v).unwrap();
        }
    }

    #[test]
    fn patch_round_trip_and_token_count() {
        let x = random_tensor::<f64>(&[3, 8, 8], 1, 1.0);
        let t = patchify(&x, 4).unwrap();
        assert_eq!(t.shape(), &[4, 48]);
        assert_eq!(unpatchify(&t, 3, 8, 8, 4).unwrap().data(), x.data());
        assert_eq!(patchify(&x, 8).unwrap().shape(), &[1, 192]);
        assert_eq!(patchify(&Tensor::<f64>::zeros(&[1, 64, 64]).unwrap(), 16).unwrap().shape()[0], 16);
        assert!(patchify(&x, 3).is_err());
        // First token holds the top-left patch, channel-major.
        assert_eq!(t.data()[0], x.data()[0]);
        assert_eq!(t.data()[16], x.data()[64]);
        assert_eq!(t.data()[48], x.data()[4]);
    }

    #[test]
    fn identity_projection_embed_inverts() {
        let x = random_tensor::<f64>(&[2, 4, 4], 2, 1.0);
        let mut store = ParamStore::<f64>::new();
        let mut eye = vec![0.0; 64];
        (0..8).for_each(|i| eye[i * 8 + i] = 1.0);
        let w = store.register("w", eye, &[8, 8]).unwrap();
        let proj = Linear { weight: w, bias: None };
        let tokens = patch_embed(&x, 2, &proj, &store).unwrap();
        let back = unpatchify(&proj.forward(&store, &tokens).unwrap(), 2, 4, 4, 2).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn zeroed_residual_branches_are_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Initializer::new(3, 0);
        let blk = TransformerBlock::build(&mut store, &mut init, "t", 8, 2, 4).unwrap();
        let out = &blk.attention.out;
        for id in out.params().into_iter().chain(blk.ffn_out.params()) {
            let n = store.get(id).numel();
            store.set(id, vec![0.0; n]).unwrap();
        }
        let x = random_tensor::<f64>(&[5, 8], 4, 1.0);
        assert_eq!(transformer_encode(&x, &blk, &store).unwrap().data(), x.data());
    }

    #[test]
    fn transformer_gradient() {
        for seed in 0..20 {
            let mut store = ParamStore::<f64>::new();
            let mut init = Initializer::new(seed, 0);
            let blk = TransformerBlock::build(&mut store, &mut init, "t", 8, 2, 2).unwrap();
            sharpen(&mut store, 20.0);
            let x = random_tensor::<f64>(&[4, 8], seed, 1.0);
            let r = random_tensor::<f64>(&[4, 8], seed + 99, 1.0);
            let e = check_gradient(|x| transformer_encode(x, &blk, &store)?.mul(&r)?.sum(), &x).unwrap();
            assert!(e < 1e-4, "seed {seed}: {e:e}");
            let w = blk.attention.query.weight;
            let e = check_gradient(
                |p| transformer_encode(&x, &blk, &store.with_tensor(w, p.clone())?)?.mul(&r)?.sum(),
                store.get(w),
            )
            .unwrap();
            assert!(e < 1e-4, "seed {seed}: {e:e}");
        }
    }

    #[test]
    fn qkv_shapes_and_zero_weights() {
        let mut store = ParamStore::<f64>::new();
        let norm = LayerNorm::build(&mut store, "ln", 32).unwrap();
        let z = |s: &mut ParamStore<f64>, n: &str| s.register(n, vec![0.0; 32 * 256], &[32, 256]).unwrap();
        let (wq, wk, wv) = (z(&mut store, "q"), z(&mut store, "k"), z(&mut store, "v"));
        let x = random_tensor::<f64>(&[16, 32], 5, 1.0);
        let (q, k, v) = qkv_project(&x, &norm, wq, wk, wv, &store).unwrap();
        assert!(q.data().iter().chain(k.data()).chain(v.data()).all(|&v| v == 0.0));
        assert_eq!(split_heads(&q, 4).unwrap().shape(), &[4, 16, 64]);
    }

    #[test]
    fn zero_queries_and_keys_give_uniform_scores() {
        let z = Tensor::<f64>::zeros(&[2, 5, 3]).unwrap();
        let (s1, s2) = cross_attention_scores(&z, &z, &z, &z, 6).unwrap();
        assert!(s1.data().iter().chain(s2.data()).all(|&p| (p - 0.2).abs() < 1e-15));
        let bad = Tensor::<f64>::zeros(&[2, 4, 3]).unwrap();
        assert!(cross_attention_scores(&z, &bad, &z, &z, 6).is_err());
    }

    #[test]
    fn scores_are_row_stochastic() {
        let q1 = random_tensor::<f64>(&[2, 6, 4], 1, 3.0);
        let k2 = random_tensor::<f64>(&[2, 6, 4], 2, 3.0);
        let (s1, s2) = cross_attention_scores(&q1, &k2, &k2, &q1, 8).unwrap();
        for row in s1.data().chunks(6).chain(s2.data().chunks(6)) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    fn shared(c: usize, hw: usize, p: usize, d: usize, heads: usize) -> CafConfig {
        CafConfig {
            share_branches: true,
            ..CafConfig::new(c, hw, hw, p, d, heads)
        }
    }

    #[test]
    fn identical_inputs_give_identical_scores() {
        let (mut store, blk) = block(shared(2, 8, 4, 16, 2), 7);
        sharpen(&mut store, 10.0);
        let x = random_tensor::<f64>(&[2, 8, 8], 3, 1.0);
        let t = blk.trace(&store, &x, &x).unwrap();
        assert_eq!(t.s1.data(), t.s2.data());
    }

    #[test]
    fn commutes_and_collapses_with_shared_branches() {
        for seed in 0..10 {
            let (mut store, blk) = block(shared(2, 8, 4, 16, 2), seed);
            sharpen(&mut store, 10.0);
            let a = random_tensor::<f64>(&[2, 8, 8], seed + 10, 1.0);
            let b = random_tensor::<f64>(&[2, 8, 8], seed + 20, 1.0);
            let ab = blk.fuse(&store, &a, &b).unwrap();
            let ba = blk.fuse(&store, &b, &a).unwrap();
            for (x, y) in ab.data().iter().zip(ba.data()) {
                assert!((x - y).abs() < 1e-6);
            }
            let t = blk.trace(&store, &a, &a).unwrap();
            let twice = blk.unembed(&store, &t.v1.scalar_mul(2.0).unwrap(), 8, 8).unwrap();
            for (x, y) in t.output.data().iter().zip(twice.data()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn complement_rules_differ() {
        let s = random_tensor::<f64>(&[1, 3, 3], 1, 1.0).softmax().unwrap();
        let v = random_tensor::<f64>(&[1, 3, 2], 2, 1.0);
        let id = complement_attend(&s, &v, ComplementRule::Identity).unwrap();
        let all = complement_attend(&s, &v, ComplementRule::AllOnes).unwrap();
        let norm = complement_attend(&s, &v, ComplementRule::Normalized).unwrap();
        let col: Vec<f64> = (0..2).map(|j| (0..3).map(|i| v.data()[i * 2 + j]).sum()).collect();
        let sv = s.matmul(&v).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let k = i * 2 + j;
                assert!((id.data()[k] - (v.data()[k] - sv.data()[k])).abs() < 1e-14);
                assert!((all.data()[k] - (col[j] - sv.data()[k])).abs() < 1e-14);
                assert!((norm.data()[k] - all.data()[k] / 2.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn caf_shape_errors() {
        let (store, blk) = block(CafConfig::new(2, 8, 8, 4, 16, 2), 0);
        let a = Tensor::<f64>::zeros(&[2, 8, 8]).unwrap();
        let b = Tensor::<f64>::zeros(&[2, 4, 4]).unwrap();
        assert!(blk.fuse(&store, &a, &b).is_err());
        assert!(blk.fuse(&store, &b, &b).is_ok());
        let odd = Tensor::<f64>::zeros(&[2, 6, 6]).unwrap();
        assert!(blk.fuse(&store, &odd, &odd).is_err());
        let wrong_c = Tensor::<f64>::zeros(&[3, 8, 8]).unwrap();
        assert!(blk.fuse(&store, &wrong_c, &wrong_c).is_err());
        assert!(CafConfig::new(2, 8, 8, 3, 16, 2).validate().is_err());
        assert!(CafConfig::new(2, 8, 8, 4, 15, 2).validate().is_err());
    }

    #[test]
    fn caf_end_to_end_gradient() {
        for seed in 0..20 {
            let (mut store, blk) = block(CafConfig::new(2, 8, 8, 4, 16, 2), seed);
            sharpen(&mut store, 10.0);
            let a = random_tensor::<f64>(&[2, 8, 8], seed + 1, 1.0);
            let b = random_tensor::<f64>(&[2, 8, 8], seed + 2, 1.0);
            let r = random_tensor::<f64>(&[2, 8, 8], seed + 3, 1.0);
            let ea = check_gradient(|x| blk.fuse(&store, x, &b)?.mul(&r)?.sum(), &a).unwrap();
            let eb = check_gradient(|x| blk.fuse(&store, &a, x)?.mul(&r)?.sum(), &b).unwrap();
            let ew = check_gradient(
                |w| blk.fuse(&store.with_tensor(blk.wk, w.clone())?, &a, &b)?.mul(&r)?.sum(),
                store.get(blk.wk),
            )
            .unwrap();
            assert!(ea < 1e-4 && eb < 1e-4 && ew < 1e-4, "seed {seed}: {ea:e} {eb:e} {ew:e}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn output_shape_matches_input(c in 1usize..3, tiles in 1usize..3, p in 1usize..3, heads in 1usize..3, seed in 0u64..100, share in any::<bool>()) {
            let hw = tiles * p * 2;
            let d = heads * 2;
            let cfg = CafConfig { share_branches: share, ..CafConfig::new(c, hw, hw, p, d, heads) };
            prop_assume!(cfg.validate().is_ok());
            let (store, blk) = block(cfg, seed);
            let a = random_tensor::<f64>(&[c, hw, hw], seed, 1.0);
            let b = random_tensor::<f64>(&[c, hw, hw], seed + 1, 1.0);
            let y = blk.fuse(&store, &a, &b).unwrap();
            prop_assert_eq!(y.shape(), &[c, hw, hw]);
        }
    }
}

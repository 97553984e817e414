//! Diffusion transformer mapping `(x_t, t)` to a velocity image.
//!
//! Pipeline: patchify → linear patch embedding → + frozen 2D sinusoidal
//! table → `L` adaLN transformer blocks → final adaLN → linear back to
//! patch pixels → unpatchify. The timestep enters only through adaLN
//! modulation: sinusoidal features → linear → SiLU → linear gives `e_t`,
//! and each adaLN derives its per-channel scale and shift from `e_t` with
//! its own linear map.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Image, ImageError};
use crate::rng;
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};

/// Layer-norm epsilon used by every adaLN.
pub const LN_EPS: f64 = 1e-6;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input is {actual:?}, model expects [3, {resolution}, {resolution}]")]
    ResolutionMismatch {
        actual: [usize; 3],
        resolution: usize,
    },
    #[error("timestep {0} outside [0, 1]")]
    InvalidTimestep(f64),
    #[error("{0} images but {1} timesteps")]
    BatchMismatch(usize, usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub resolution: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_dim: usize,
    pub time_freq_dim: usize,
}

impl ModelConfig {
    /// 64×64 input, 8×8 patches, d=384, 8 blocks of 6×64 heads.
    pub fn paper() -> Self {
        Self {
            resolution: 64,
            patch_size: 8,
            hidden_dim: 384,
            blocks: 8,
            heads: 6,
            head_dim: 64,
            mlp_dim: 1536,
            time_freq_dim: 256,
        }
    }

    /// Laptop-scale variant: 32×32 input with 4×4 patches keeps 64 tokens.
    pub fn desk() -> Self {
        Self {
            resolution: 32,
            patch_size: 4,
            hidden_dim: 128,
            blocks: 4,
            heads: 4,
            head_dim: 32,
            mlp_dim: 512,
            time_freq_dim: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.patch_size == 0
            || self.resolution == 0
            || !self.resolution.is_multiple_of(self.patch_size)
        {
            return fail(format!(
                "resolution {} not divisible by patch size {}",
                self.resolution, self.patch_size
            ));
        }
        if self.heads == 0 || self.heads * self.head_dim != self.hidden_dim {
            return fail(format!(
                "{} heads × {} ≠ hidden {}",
                self.heads, self.head_dim, self.hidden_dim
            ));
        }
        if self.mlp_dim != 4 * self.hidden_dim {
            return fail(format!(
                "mlp dim {} ≠ 4 × {}",
                self.mlp_dim, self.hidden_dim
            ));
        }
        if !self.hidden_dim.is_multiple_of(4) {
            return fail(format!("hidden {} not divisible by 4", self.hidden_dim));
        }
        if self.time_freq_dim < 4 || !self.time_freq_dim.is_multiple_of(2) {
            return fail(format!(
                "time frequency dim {} must be even and ≥ 4",
                self.time_freq_dim
            ));
        }
        if self.blocks == 0 {
            return fail("need at least one block".into());
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.resolution / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Values per patch, `p²·3`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Ordered names and shapes of every trainable tensor.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        ParamTree::build(self, |name, shape| {
            out.push((name.to_string(), shape.to_vec()))
        });
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<P> {
    pub weight: P,
    pub bias: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<P> {
    pub ada1: Linear<P>,
    pub qkv: Linear<P>,
    pub attn_out: Linear<P>,
    pub ada2: Linear<P>,
    pub ffn_in: Linear<P>,
    pub ffn_out: Linear<P>,
}

/// The trainable parameters of the model, generic over what is stored per
/// tensor (values, tape handles, gradients, optimizer moments).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTree<P> {
    pub patch_embed: Linear<P>,
    pub time_in: Linear<P>,
    pub time_out: Linear<P>,
    pub blocks: Vec<Block<P>>,
    pub final_ada: Linear<P>,
    pub final_proj: Linear<P>,
}

impl<P> ParamTree<P> {
    /// Constructs a tree in canonical order, calling `make(name, shape)` once
    /// per tensor. [`ParamTree::visit`] yields the same order.
    pub fn build(cfg: &ModelConfig, mut make: impl FnMut(&str, &[usize]) -> P) -> Self {
        let d = cfg.hidden_dim;
        let mut lin = |name: &str, i: usize, o: usize| Linear {
            weight: make(&format!("{name}.weight"), &[i, o]),
            bias: make(&format!("{name}.bias"), &[o]),
        };
        let patch_embed = lin("patch_embed", cfg.patch_dim(), d);
        let time_in = lin("time_mlp.0", cfg.time_freq_dim, d);
        let time_out = lin("time_mlp.2", d, d);
        let blocks = (0..cfg.blocks)
            .map(|b| Block {
                ada1: lin(&format!("blocks.{b}.ada1"), d, 2 * d),
                qkv: lin(&format!("blocks.{b}.qkv"), d, 3 * d),
                attn_out: lin(&format!("blocks.{b}.attn_out"), d, d),
                ada2: lin(&format!("blocks.{b}.ada2"), d, 2 * d),
                ffn_in: lin(&format!("blocks.{b}.ffn_in"), d, cfg.mlp_dim),
                ffn_out: lin(&format!("blocks.{b}.ffn_out"), cfg.mlp_dim, d),
            })
            .collect();
        let final_ada = lin("final.ada", d, 2 * d);
        let final_proj = lin("final.proj", d, cfg.patch_dim());
        Self {
            patch_embed,
            time_in,
            time_out,
            blocks,
            final_ada,
            final_proj,
        }
    }

    fn linears(&self) -> Vec<&Linear<P>> {
        let mut v = vec![&self.patch_embed, &self.time_in, &self.time_out];
        for b in &self.blocks {
            v.extend([&b.ada1, &b.qkv, &b.attn_out, &b.ada2, &b.ffn_in, &b.ffn_out]);
        }
        v.extend([&self.final_ada, &self.final_proj]);
        v
    }

    fn linears_mut(&mut self) -> Vec<&mut Linear<P>> {
        let mut v = vec![&mut self.patch_embed, &mut self.time_in, &mut self.time_out];
        for b in &mut self.blocks {
            v.extend([
                &mut b.ada1,
                &mut b.qkv,
                &mut b.attn_out,
                &mut b.ada2,
                &mut b.ffn_in,
                &mut b.ffn_out,
            ]);
        }
        v.extend([&mut self.final_ada, &mut self.final_proj]);
        v
    }

    /// All tensors in canonical order.
    pub fn flat(&self) -> Vec<&P> {
        self.linears()
            .into_iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn flat_mut(&mut self) -> Vec<&mut P> {
        self.linears_mut()
            .into_iter()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn map<Q>(&self, cfg: &ModelConfig, mut f: impl FnMut(&P) -> Q) -> ParamTree<Q> {
        let mut it = self.flat().into_iter();
        ParamTree::build(cfg, |_, _| f(it.next().expect("tree matches config")))
    }

    /// Rebuilds a tree from tensors in canonical order.
    pub fn from_flat(cfg: &ModelConfig, items: Vec<P>) -> Option<Self> {
        if items.len() != cfg.layout().len() {
            return None;
        }
        let mut it = items.into_iter();
        Some(ParamTree::build(cfg, |_, _| it.next().unwrap()))
    }

    pub fn into_flat(self) -> Vec<P> {
        let mut out = Vec::new();
        let mut push = |l: Linear<P>| {
            out.push(l.weight);
            out.push(l.bias);
        };
        push(self.patch_embed);
        push(self.time_in);
        push(self.time_out);
        for b in self.blocks {
            for l in [b.ada1, b.qkv, b.attn_out, b.ada2, b.ffn_in, b.ffn_out] {
                push(l);
            }
        }
        push(self.final_ada);
        push(self.final_proj);
        out
    }
}

/// Coarse parameter groups used for gradient-flow checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    PatchEmbed,
    TimeMlp,
    Block(usize),
    Final,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name.starts_with("patch_embed") {
            Self::PatchEmbed
        } else if name.starts_with("time_mlp") {
            Self::TimeMlp
        } else if let Some(rest) = name.strip_prefix("blocks.") {
            Self::Block(rest.split('.').next().unwrap().parse().unwrap())
        } else {
            Self::Final
        }
    }
}

/// Weights of the model plus its frozen positional table.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub pos_embed: Tensor<T>,
    pub tree: ParamTree<Tensor<T>>,
}

fn truncated_normal(rng: &mut rng::Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Initialization: weights of the patch embedding, timestep MLP, QKV and
/// first FFN layer ~ N(0, 0.02²) truncated at 2σ; biases zero; every adaLN
/// linear has zero weights with bias (γ=1, β=0); the attention output, the
/// second FFN layer and the final projection are zero. At init each block is
/// the identity and the predicted velocity is zero.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = rng::seeded(seed);
    let d = config.hidden_dim;
    let tree = ParamTree::build(config, |name, shape| {
        let random = [
            "patch_embed.weight",
            "time_mlp.0.weight",
            "time_mlp.2.weight",
            "qkv.weight",
            "ffn_in.weight",
        ]
        .iter()
        .any(|s| name.ends_with(s));
        let is_ada = name.contains("ada");
        if random {
            Tensor::from_fn(shape, |_| T::from_f64(truncated_normal(&mut rng, INIT_STD)))
        } else if is_ada && name.ends_with(".bias") {
            Tensor::from_fn(shape, |i| if i < d { T::one() } else { T::zero() })
        } else {
            Tensor::zeros(shape)
        }
    });
    Ok(ModelParams {
        config: *config,
        pos_embed: pos_encoding_2d(config.grid_side(), d)?,
        tree,
    })
}

impl<T: Scalar> ModelParams<T> {
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config,
            pos_embed: self.pos_embed.cast(),
            tree: self.tree.map(&self.config, |t| t.cast()),
        }
    }

    /// Adds `N(0, std²)` noise to every trainable tensor. Handy for tests and
    /// gradient checks, where the zero-initialized layers would otherwise
    /// block gradient flow.
    pub fn perturb(&mut self, std: f64, seed: u64) {
        let mut rng = rng::seeded(seed);
        for t in self.tree.flat_mut() {
            for v in t.data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = *v + T::from_f64(z * std);
            }
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        self.config
            .layout()
            .into_iter()
            .map(|(n, _)| n)
            .zip(self.tree.flat())
            .collect()
    }
}

/// Splits `[3, res, res]` into `[(res/p)², p²·3]` patches: patches in
/// row-major order over the patch grid, values within a patch ordered by
/// channel, then row, then column.
pub fn patchify<T: Scalar>(image: &Image<T>, p: usize) -> Result<Tensor<T>> {
    let (c, h, w) = (image.channels, image.height, image.width);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(ModelError::Config(format!(
            "{h}×{w} image not divisible into {p}×{p} patches"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let pd = c * p * p;
    let mut out = vec![T::zero(); gh * gw * pd];
    for pr in 0..gh {
        for pc in 0..gw {
            let base = (pr * gw + pc) * pd;
            for ch in 0..c {
                for i in 0..p {
                    let src = (ch * h + pr * p + i) * w + pc * p;
                    let dst = base + ch * p * p + i * p;
                    out[dst..dst + p].copy_from_slice(&image.data[src..src + p]);
                }
            }
        }
    }
    Ok(Tensor::new(vec![gh * gw, pd], out)?)
}

/// Inverse of [`patchify`] for a square RGB image of side `resolution`.
pub fn unpatchify<T: Scalar>(tokens: &Tensor<T>, p: usize, resolution: usize) -> Result<Image<T>> {
    let c = 3;
    if p == 0 || !resolution.is_multiple_of(p) {
        return Err(ModelError::Config(format!(
            "resolution {resolution} not divisible by {p}"
        )));
    }
    let g = resolution / p;
    let pd = c * p * p;
    if tokens.len() != g * g * pd || tokens.last_dim() != pd {
        return Err(TensorError::ShapeMismatch {
            op: "unpatchify",
            lhs: tokens.shape().to_vec(),
            rhs: vec![g * g, pd],
        }
        .into());
    }
    let mut data = vec![T::zero(); c * resolution * resolution];
    let src = tokens.data();
    for pr in 0..g {
        for pc in 0..g {
            let base = (pr * g + pc) * pd;
            for ch in 0..c {
                for i in 0..p {
                    let dst = (ch * resolution + pr * p + i) * resolution + pc * p;
                    let s = base + ch * p * p + i * p;
                    data[dst..dst + p].copy_from_slice(&src[s..s + p]);
                }
            }
        }
    }
    Ok(Image::from_vec(c, resolution, resolution, data)?)
}

/// Frozen `[g², d]` table. Row `row·g + col` encodes `p_x = col` in the first
/// `d/2` dims and `p_y = row` in the last `d/2`; within each half, dims
/// `2i, 2i+1` hold `sin, cos` of `pos / 10000^(2i/(d/2))`.
pub fn pos_encoding_2d<T: Scalar>(g: usize, d: usize) -> Result<Tensor<T>> {
    if d == 0 || !d.is_multiple_of(4) {
        return Err(ModelError::Config(format!(
            "positional dim {d} not divisible by 4"
        )));
    }
    let half = d / 2;
    let mut out = vec![T::zero(); g * g * d];
    for row in 0..g {
        for col in 0..g {
            let base = (row * g + col) * d;
            for (offset, pos) in [(0, col), (half, row)] {
                for i in 0..half / 2 {
                    let denom = 10000f64.powf((2 * i) as f64 / half as f64);
                    let a = pos as f64 / denom;
                    out[base + offset + 2 * i] = T::from_f64(a.sin());
                    out[base + offset + 2 * i + 1] = T::from_f64(a.cos());
                }
            }
        }
    }
    Ok(Tensor::new(vec![g * g, d], out)?)
}

/// Sinusoidal features of the raw timestep: `dim/2` sines followed by
/// `dim/2` cosines at frequencies `10000^(-k/(dim/2 - 1))`.
pub fn timestep_features<T: Scalar>(t: f64, dim: usize) -> Result<Vec<T>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(ModelError::InvalidTimestep(t));
    }
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for k in 0..half {
        let freq = 10000f64.powf(-(k as f64) / (half - 1) as f64);
        out[k] = T::from_f64((t * freq).sin());
        out[half + k] = T::from_f64((t * freq).cos());
    }
    Ok(out)
}

/// `e_t = linear₂(SiLU(linear₁(features(t))))` for a batch of timesteps.
pub fn timestep_embed<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamTree<Var>,
    ts: &[f64],
    freq_dim: usize,
) -> Result<Var> {
    let mut feats = Vec::with_capacity(ts.len() * freq_dim);
    for &t in ts {
        feats.extend(timestep_features::<T>(t, freq_dim)?);
    }
    let f = tape.constant(Tensor::new(vec![ts.len(), freq_dim], feats)?);
    let h = tape.linear(f, vars.time_in.weight, vars.time_in.bias)?;
    let h = tape.silu(h);
    Ok(tape.linear(h, vars.time_out.weight, vars.time_out.bias)?)
}

/// `γ(e) ⊙ LayerNorm(h) + β(e)`, with `[γ | β]` = `linear(e)`.
pub fn adaln_modulate<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    e: Var,
    modulation: &Linear<Var>,
    hidden: usize,
) -> Result<Var> {
    let m = tape.linear(e, modulation.weight, modulation.bias)?;
    let gamma = tape.slice_cols(m, 0, hidden)?;
    let beta = tape.slice_cols(m, hidden, hidden)?;
    let n = tape.layer_norm(h, LN_EPS)?;
    Ok(tape.modulate(n, gamma, beta)?)
}

/// One transformer block on `h: [B·n, d]` with per-sample conditioning
/// `e: [B, d]`.
pub fn block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    e: Var,
    block: &Block<Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let d = cfg.hidden_dim;
    let seq = cfg.tokens();

    let a = adaln_modulate(tape, h, e, &block.ada1, d)?;
    let qkv = tape.linear(a, block.qkv.weight, block.qkv.bias)?;
    let mut heads = [qkv; 3];
    for (i, slot) in heads.iter_mut().enumerate() {
        let part = tape.slice_cols(qkv, i * d, d)?;
        *slot = tape.split_heads(part, cfg.heads, seq)?;
    }
    let att = tape.scaled_attention(heads[0], heads[1], heads[2])?;
    let att = tape.merge_heads(att, cfg.heads)?;
    let att = tape.linear(att, block.attn_out.weight, block.attn_out.bias)?;
    let h = tape.add(h, att)?;

    let f = adaln_modulate(tape, h, e, &block.ada2, d)?;
    let f = tape.linear(f, block.ffn_in.weight, block.ffn_in.bias)?;
    let f = tape.gelu(f);
    let f = tape.linear(f, block.ffn_out.weight, block.ffn_out.bias)?;
    Ok(tape.add(h, f)?)
}

/// Records a batched forward pass on `tape`.
///
/// `patches` is `[B·n, p²·3]` (patchified inputs stacked sample-major) and
/// `ts` holds one timestep per sample. Returns the tape handles of the
/// parameters (registered as differentiable when `trainable`) and the output
/// `[B·n, p²·3]` in patch layout.
pub fn forward_tape<T: Scalar>(
    params: &ModelParams<T>,
    tape: &mut Tape<T>,
    patches: Tensor<T>,
    ts: &[f64],
    trainable: bool,
) -> Result<(ParamTree<Var>, Var)> {
    let cfg = &params.config;
    if patches.rows() != ts.len() * cfg.tokens() || patches.last_dim() != cfg.patch_dim() {
        return Err(TensorError::ShapeMismatch {
            op: "forward",
            lhs: patches.shape().to_vec(),
            rhs: vec![ts.len() * cfg.tokens(), cfg.patch_dim()],
        }
        .into());
    }
    let vars = params.tree.map(cfg, |t| {
        if trainable {
            tape.param(t.clone())
        } else {
            tape.constant(t.clone())
        }
    });
    let x = tape.constant(patches);
    let pe = tape.constant(params.pos_embed.clone());

    let e = timestep_embed(tape, &vars, ts, cfg.time_freq_dim)?;
    let mut h = tape.linear(x, vars.patch_embed.weight, vars.patch_embed.bias)?;
    h = tape.add_tiled(h, pe)?;
    for block in &vars.blocks {
        h = block_forward(tape, h, e, block, cfg)?;
    }
    let h = adaln_modulate(tape, h, e, &vars.final_ada, cfg.hidden_dim)?;
    let out = tape.linear(h, vars.final_proj.weight, vars.final_proj.bias)?;
    Ok((vars, out))
}

fn check_input<T: Scalar>(cfg: &ModelConfig, x: &Image<T>) -> Result<()> {
    if x.shape() != [3, cfg.resolution, cfg.resolution] {
        return Err(ModelError::ResolutionMismatch {
            actual: x.shape(),
            resolution: cfg.resolution,
        });
    }
    Ok(())
}

/// Stacks patchified images into one `[B·n, p²·3]` tensor.
pub fn stack_patches<T: Scalar>(cfg: &ModelConfig, images: &[&Image<T>]) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(images.len() * cfg.tokens() * cfg.patch_dim());
    for img in images {
        check_input(cfg, img)?;
        data.extend(patchify(img, cfg.patch_size)?.into_data());
    }
    Ok(Tensor::new(
        vec![images.len() * cfg.tokens(), cfg.patch_dim()],
        data,
    )?)
}

/// Predicted velocities for a batch of states, each at its own timestep.
pub fn model_forward_batch<T: Scalar>(
    params: &ModelParams<T>,
    xs: &[&Image<T>],
    ts: &[f64],
) -> Result<Vec<Image<T>>> {
    if xs.len() != ts.len() {
        return Err(ModelError::BatchMismatch(xs.len(), ts.len()));
    }
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let cfg = &params.config;
    let patches = stack_patches(cfg, xs)?;
    let mut tape = Tape::new();
    let (_, out) = forward_tape(params, &mut tape, patches, ts, false)?;
    let out = tape.value(out);
    let per = cfg.tokens() * cfg.patch_dim();
    out.data()
        .chunks_exact(per)
        .map(|chunk| {
            let t = Tensor::new(vec![cfg.tokens(), cfg.patch_dim()], chunk.to_vec())?;
            unpatchify(&t, cfg.patch_size, cfg.resolution)
        })
        .collect()
}

/// `v_pred = f_θ(x_t, t)`.
pub fn model_forward<T: Scalar>(
    params: &ModelParams<T>,
    xt: &Image<T>,
    t: f64,
) -> Result<Image<T>> {
    Ok(model_forward_batch(params, &[xt], &[t])?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            resolution: 8,
            patch_size: 2,
            hidden_dim: 8,
            blocks: 2,
            heads: 2,
            head_dim: 4,
            mlp_dim: 32,
            time_freq_dim: 8,
        }
    }

    fn ramp(res: usize) -> Image<f32> {
        Image::from_vec(
            3,
            res,
            res,
            (0..3 * res * res).map(|i| (i % 17) as f32 / 17.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn presets_validate() {
        ModelConfig::paper().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
        assert_eq!(ModelConfig::paper().tokens(), 64);
        assert_eq!(ModelConfig::desk().tokens(), 64);
        let mut bad = ModelConfig::paper();
        bad.heads = 5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn paper_parameter_count() {
        // Per-component count written out independently of the layout code.
        let (d, p, f, m, l) = (384usize, 192usize, 256usize, 1536usize, 8usize);
        let lin = |i: usize, o: usize| i * o + o;
        let block =
            lin(d, 2 * d) + lin(d, 3 * d) + lin(d, d) + lin(d, 2 * d) + lin(d, m) + lin(m, d);
        let want = lin(p, d) + lin(f, d) + lin(d, d) + l * block + lin(d, 2 * d) + lin(d, p);
        assert_eq!(ModelConfig::paper().trainable_count(), want);
        assert_eq!(want, 19_604_544);
    }

    #[test]
    fn patchify_round_trip_and_layout() {
        let img = ramp(64);
        let t = patchify(&img, 8).unwrap();
        assert_eq!(t.shape(), &[64, 192]);
        assert_eq!(unpatchify(&t, 8, 64).unwrap(), img);
        // patch (1, 2), channel 2, row 3, col 5
        let v = t.data()[(8 + 2) * 192 + 2 * 64 + 3 * 8 + 5];
        assert_eq!(v, img.get(2, 8 + 3, 16 + 5));
        assert!(patchify(&ramp(10), 4).is_err());
    }

    #[test]
    fn constant_image_gives_constant_patches() {
        let img = Image::from_vec(3, 16, 16, vec![0.25f32; 768]).unwrap();
        let t = patchify(&img, 4).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn pos_encoding_origin_and_uniqueness() {
        let pe = pos_encoding_2d::<f64>(8, 384).unwrap();
        let row0 = &pe.data()[..384];
        for i in (0..384).step_by(2) {
            assert_eq!(row0[i], 0.0);
            assert_eq!(row0[i + 1], 1.0);
        }
        let rows: Vec<&[f64]> = pe.data().chunks(384).collect();
        for a in 0..64 {
            for b in a + 1..64 {
                assert_ne!(rows[a], rows[b]);
            }
        }
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        assert!(pos_encoding_2d::<f64>(8, 6).is_err());
    }

    #[test]
    fn timestep_features_cases() {
        let f0 = timestep_features::<f64>(0.0, 256).unwrap();
        assert!(f0[..128].iter().all(|&v| v == 0.0));
        assert!(f0[128..].iter().all(|&v| v == 1.0));
        let f1 = timestep_features::<f64>(1.0, 256).unwrap();
        // k = 0 has frequency 1: sin(1), cos(1).
        assert!((f1[0] - 1f64.sin()).abs() < 1e-15);
        assert!((f1[128] - 1f64.cos()).abs() < 1e-15);
        assert!(timestep_features::<f64>(1.5, 256).is_err());
        assert!(timestep_features::<f64>(-0.1, 256).is_err());
    }

    #[test]
    fn zero_velocity_and_identity_blocks_at_init() {
        let cfg = tiny();
        let p = init_params::<f32>(&cfg, 1).unwrap();
        let v = model_forward(&p, &ramp(8), 0.3).unwrap();
        assert_eq!(v.shape(), [3, 8, 8]);
        assert!(v.data.iter().all(|&x| x == 0.0));

        let mut tape = Tape::new();
        let vars = p.tree.map(&cfg, |t| tape.constant(t.clone()));
        let h0 = Tensor::from_fn(&[2 * cfg.tokens(), cfg.hidden_dim], |i| {
            (i as f32 * 0.37).sin()
        });
        let h = tape.constant(h0.clone());
        let e = tape.constant(Tensor::from_fn(&[2, cfg.hidden_dim], |i| i as f32 * 0.1));
        let out = block_forward(&mut tape, h, e, &vars.blocks[0], &cfg).unwrap();
        assert_eq!(tape.value(out), &h0);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = init_params::<f32>(&tiny(), 5).unwrap();
        let b = init_params::<f32>(&tiny(), 5).unwrap();
        let c = init_params::<f32>(&tiny(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn forward_is_deterministic_and_time_sensitive() {
        let mut p = init_params::<f32>(&tiny(), 2).unwrap();
        p.perturb(0.1, 9);
        let x = ramp(8);
        let a = model_forward(&p, &x, 0.4).unwrap();
        let b = model_forward(&p, &x, 0.4).unwrap();
        assert_eq!(a, b);
        let c = model_forward(&p, &x, 0.9).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn batch_matches_single() {
        let mut p = init_params::<f64>(&tiny(), 2).unwrap();
        p.perturb(0.1, 3);
        let x1 = ramp(8);
        let x2 = x1.clamp01().cast::<f64>();
        let x1 = x1.cast::<f64>();
        let batch = model_forward_batch(&p, &[&x1, &x2], &[0.1, 0.7]).unwrap();
        let s2 = model_forward(&p, &x2, 0.7).unwrap();
        for (a, b) in batch[1].data.iter().zip(&s2.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_wrong_resolution() {
        let p = init_params::<f32>(&tiny(), 1).unwrap();
        assert!(matches!(
            model_forward(&p, &ramp(16), 0.5),
            Err(ModelError::ResolutionMismatch { .. })
        ));
        assert!(matches!(
            model_forward(&p, &ramp(8), 1.5),
            Err(ModelError::InvalidTimestep(_))
        ));
    }

    #[test]
    fn layout_names_are_unique_and_grouped() {
        let layout = ModelConfig::desk().layout();
        let names: std::collections::HashSet<_> = layout.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names.len(), layout.len());
        assert_eq!(ParamGroup::of("blocks.3.qkv.weight"), ParamGroup::Block(3));
        assert_eq!(ParamGroup::of("final.proj.bias"), ParamGroup::Final);
        assert_eq!(ParamGroup::of("time_mlp.0.weight"), ParamGroup::TimeMlp);
    }
}

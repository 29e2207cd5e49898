//! Encoder and diffusion decoder networks.
//!
//! The encoder embeds each visible patch with a shared point-wise layer,
//! max-pools over the patch, adds a position embedding of the patch center
//! and runs pre-norm transformer blocks over the visible tokens only. The
//! decoder lays out `[visible latents, mask tokens]`, adds its own position
//! embeddings and a broadcast time embedding, and predicts center-relative
//! patches from the final positions.

use std::fmt::Write as _;

use crate::error::{invalid, Error, Result};
use crate::geometry::{apply_mask, masked_count, segment, MaskSpec, MaskStrategy, Point, PointCloud};
use crate::graph::{Graph, Var};
use crate::optim::{init_rng, trunc_normal, Bound, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub latent_width: usize,
    pub enc_blocks: usize,
    pub enc_heads: usize,
    pub dec_blocks: usize,
    pub dec_heads: usize,
    pub num_groups: usize,
    pub group_size: usize,
    pub mask_ratio: f64,
    pub mask_strategy: MaskStrategy,
    pub timesteps: usize,
    /// Predict every patch instead of only the masked ones.
    pub predict_visible: bool,
    pub upsample_factor: usize,
    pub use_position_embedding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_width: 384,
            enc_blocks: 12,
            enc_heads: 6,
            dec_blocks: 4,
            dec_heads: 4,
            num_groups: 64,
            group_size: 32,
            mask_ratio: 0.75,
            mask_strategy: MaskStrategy::Random,
            timesteps: 200,
            predict_visible: false,
            upsample_factor: 1,
            use_position_embedding: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let l = self.latent_width;
        if l == 0 || self.enc_heads == 0 || self.dec_heads == 0 {
            return invalid("latent width and head counts must be positive");
        }
        if l % self.enc_heads != 0 || l % self.dec_heads != 0 {
            return invalid(format!(
                "latent width {l} must be divisible by encoder heads {} and decoder heads {}",
                self.enc_heads, self.dec_heads
            ));
        }
        if self.num_groups < 2 || self.group_size == 0 {
            return invalid("need at least 2 groups of at least 1 point");
        }
        let m = masked_count(self.num_groups, self.mask_ratio);
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) || m == 0 || m >= self.num_groups {
            return invalid(format!(
                "mask ratio {} leaves {m} of {} patches masked",
                self.mask_ratio, self.num_groups
            ));
        }
        if self.timesteps == 0 || self.upsample_factor == 0 {
            return invalid("timesteps and upsample factor must be positive");
        }
        Ok(())
    }

    pub fn num_masked(&self) -> usize {
        masked_count(self.num_groups, self.mask_ratio)
    }

    pub fn num_visible(&self) -> usize {
        self.num_groups - self.num_masked()
    }

    /// Points produced per predicted patch.
    pub fn points_per_prediction(&self) -> usize {
        self.group_size * self.upsample_factor
    }

    pub fn predicted_patches(&self, mask: &MaskSpec) -> usize {
        if self.predict_visible {
            mask.num_groups()
        } else {
            mask.num_masked()
        }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::InvalidArgument(format!("bad value '{v}' for '{key}'")))
        }
        match key {
            "latent_width" => self.latent_width = num(key, value)?,
            "enc_blocks" => self.enc_blocks = num(key, value)?,
            "enc_heads" => self.enc_heads = num(key, value)?,
            "dec_blocks" => self.dec_blocks = num(key, value)?,
            "dec_heads" => self.dec_heads = num(key, value)?,
            "num_groups" => self.num_groups = num(key, value)?,
            "group_size" => self.group_size = num(key, value)?,
            "mask_ratio" => self.mask_ratio = num(key, value)?,
            "mask_strategy" => self.mask_strategy = value.parse()?,
            "timesteps" => self.timesteps = num(key, value)?,
            "predict_visible" => self.predict_visible = num(key, value)?,
            "upsample_factor" => self.upsample_factor = num(key, value)?,
            "use_position_embedding" => self.use_position_embedding = num(key, value)?,
            other => return invalid(format!("unknown model key '{other}'")),
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let strategy = match self.mask_strategy {
            MaskStrategy::Random => "random",
            MaskStrategy::Block => "block",
        };
        let _ = writeln!(s, "latent_width = {}", self.latent_width);
        let _ = writeln!(s, "enc_blocks = {}", self.enc_blocks);
        let _ = writeln!(s, "enc_heads = {}", self.enc_heads);
        let _ = writeln!(s, "dec_blocks = {}", self.dec_blocks);
        let _ = writeln!(s, "dec_heads = {}", self.dec_heads);
        let _ = writeln!(s, "num_groups = {}", self.num_groups);
        let _ = writeln!(s, "group_size = {}", self.group_size);
        let _ = writeln!(s, "mask_ratio = {}", self.mask_ratio);
        let _ = writeln!(s, "mask_strategy = {strategy}");
        let _ = writeln!(s, "timesteps = {}", self.timesteps);
        let _ = writeln!(s, "predict_visible = {}", self.predict_visible);
        let _ = writeln!(s, "upsample_factor = {}", self.upsample_factor);
        let _ = writeln!(s, "use_position_embedding = {}", self.use_position_embedding);
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("bad config line '{line}'")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

/// Encoder output for one cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSet {
    /// Row-major `num_visible × width` tokens, visible patches in ascending index order.
    pub tokens: Vec<f64>,
    pub width: usize,
    /// All `G` centers in patch index order.
    pub centers: Vec<Point>,
    pub mask: MaskSpec,
}

impl LatentSet {
    pub fn num_tokens(&self) -> usize {
        self.tokens.len() / self.width.max(1)
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.tokens[i * self.width..(i + 1) * self.width]
    }

    fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.width != cfg.latent_width {
            return invalid(format!("latent width {} but model expects {}", self.width, cfg.latent_width));
        }
        if self.centers.len() != self.mask.num_groups() || self.mask.num_groups() != cfg.num_groups {
            return invalid(format!(
                "{} centers and {} mask entries for {} groups",
                self.centers.len(),
                self.mask.num_groups(),
                cfg.num_groups
            ));
        }
        if self.num_tokens() != self.mask.num_visible() || self.tokens.len() % self.width != 0 {
            return invalid(format!(
                "{} latent tokens for {} visible patches",
                self.num_tokens(),
                self.mask.num_visible()
            ));
        }
        Ok(())
    }
}

/// Predicted patches, center-relative, with the patch index each belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    pub patches: Vec<Vec<Point>>,
    pub patch_indices: Vec<usize>,
}

/// Patch indices predicted by the decoder, in output order.
pub fn prediction_order(cfg: &ModelConfig, mask: &MaskSpec) -> Vec<usize> {
    if cfg.predict_visible {
        mask.token_order()
    } else {
        mask.masked_indices()
    }
}

/// Anchor added to a predicted patch when assembling: its center, except for
/// masked patches when position embeddings are disabled, which are predicted
/// in absolute coordinates.
pub fn anchor(cfg: &ModelConfig, mask: &MaskSpec, centers: &[Point], patch: usize) -> Point {
    if cfg.use_position_embedding || !mask.indicator[patch] {
        centers[patch]
    } else {
        [0.0; 3]
    }
}

/// Anything that turns visible patches into latent tokens.
pub trait VisibleEncoder {
    fn config(&self) -> &ModelConfig;

    /// `visible` holds the center-relative visible patches in ascending
    /// index order; `centers` all `G` centers.
    fn encode_patches(&self, visible: &[Vec<Point>], centers: &[Point], mask: &MaskSpec) -> Result<LatentSet>;
}

/// Anything that predicts clean patches from a noisy sample.
pub trait Denoiser {
    fn config(&self) -> &ModelConfig;

    /// `x_t` holds the noisy predicted patches in [`prediction_order`],
    /// `points_per_prediction` points each; returns the same layout.
    fn denoise(&self, latent: &LatentSet, x_t: &[Point], t: usize) -> Result<Vec<Point>>;
}

pub fn decode_output(cfg: &ModelConfig, mask: &MaskSpec, flat: Vec<Point>) -> DecoderOutput {
    let per = cfg.points_per_prediction();
    DecoderOutput {
        patches: flat.chunks(per).map(<[Point]>::to_vec).collect(),
        patch_indices: prediction_order(cfg, mask),
    }
}

// ---------------------------------------------------------------------------
// Layers

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn new<S: Real>(ps: &mut ParamStore<S>, name: &str, din: usize, dout: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let w = ps.add(format!("{name}.weight"), trunc_normal(&[din, dout], INIT_STD, rng));
        let b = ps.add(format!("{name}.bias"), Tensor::zeros(&[dout]));
        Self { w, b }
    }

    fn forward<S: Real>(&self, g: &Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        g.conv1d_pointwise(x, p.var(self.w), p.var(self.b))
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new<S: Real>(ps: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), Tensor::full(&[dim], S::one()));
        let beta = ps.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta }
    }

    fn forward<S: Real>(&self, g: &Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, LN_EPS)?;
        let s = g.mul(n, p.var(self.gamma))?;
        g.add(s, p.var(self.beta))
    }
}

/// Pre-norm transformer block: self-attention then a GELU feed-forward of
/// width `4·L`, each wrapped in a residual connection.
#[derive(Debug, Clone)]
struct Block {
    ln1: Norm,
    qkv: ParamId,
    proj: Linear,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl Block {
    fn new<S: Real>(ps: &mut ParamStore<S>, name: &str, width: usize, heads: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        Self {
            ln1: Norm::new(ps, &format!("{name}.norm1"), width),
            qkv: ps.add(format!("{name}.attn.qkv.weight"), trunc_normal(&[width, 3 * width], INIT_STD, rng)),
            proj: Linear::new(ps, &format!("{name}.attn.proj"), width, width, rng),
            ln2: Norm::new(ps, &format!("{name}.norm2"), width),
            fc1: Linear::new(ps, &format!("{name}.mlp.fc1"), width, 4 * width, rng),
            fc2: Linear::new(ps, &format!("{name}.mlp.fc2"), 4 * width, width, rng),
            heads,
        }
    }

    fn forward<S: Real>(&self, g: &Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let width = g.shape(x)[1];
        let d = width / self.heads;
        let h = self.ln1.forward(g, p, x)?;
        let qkv = g.matmul(h, p.var(self.qkv))?;
        let scale = 1.0 / (d as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let q = g.slice(qkv, 1, head * d, d)?;
            let k = g.slice(qkv, 1, width + head * d, d)?;
            let v = g.slice(qkv, 1, 2 * width + head * d, d)?;
            let kt = g.transpose(k)?;
            let scores = g.scale(g.matmul(q, kt)?, scale);
            let attn = g.softmax(scores, 1)?;
            outs.push(g.matmul(attn, v)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        let x = g.add(x, self.proj.forward(g, p, merged)?)?;
        let h = self.ln2.forward(g, p, x)?;
        let f = self.fc2.forward(g, p, g.gelu(self.fc1.forward(g, p, h)?))?;
        g.add(x, f)
    }
}

fn points_tensor<S: Real>(rows: usize, cols: usize, pts: impl Iterator<Item = Point>) -> Result<Tensor<S>> {
    let data: Vec<S> = pts.flat_map(|p| p.map(S::of)).collect();
    Tensor::new(vec![rows, cols], data)
}

/// Standard sinusoidal embedding: `sin(t·ω_i)` then `cos(t·ω_i)` with
/// `ω_i = 10000^(−i/half)`; odd widths get a trailing zero.
pub fn sinusoid(t: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = (-(i as f64) / half as f64 * 10000f64.ln()).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

// ---------------------------------------------------------------------------
// Encoder

#[derive(Debug, Clone)]
pub(crate) struct EncoderLayout {
    tok1: Linear,
    tok2: Linear,
    pos: Linear,
    blocks: Vec<Block>,
    norm: Norm,
    head: Linear,
}

#[derive(Debug, Clone)]
pub struct Encoder<S: Real> {
    pub cfg: ModelConfig,
    pub params: ParamStore<S>,
    layout: EncoderLayout,
}

impl<S: Real> Encoder<S> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = init_rng(seed);
        let mut ps = ParamStore::new();
        let l = cfg.latent_width;
        let layout = EncoderLayout {
            tok1: Linear::new(&mut ps, "encoder.token.fc1", 3, l, &mut rng),
            tok2: Linear::new(&mut ps, "encoder.token.fc2", l, l, &mut rng),
            pos: Linear::new(&mut ps, "encoder.pos_embed", 3, l, &mut rng),
            blocks: (0..cfg.enc_blocks)
                .map(|i| Block::new(&mut ps, &format!("encoder.blocks.{i}"), l, cfg.enc_heads, &mut rng))
                .collect(),
            norm: Norm::new(&mut ps, "encoder.norm", l),
            head: Linear::new(&mut ps, "encoder.pretrain_head", l, 3 * cfg.group_size, &mut rng),
        };
        Ok(Self {
            cfg: cfg.clone(),
            params: ps,
            layout,
        })
    }

    pub fn head_ids(&self) -> (ParamId, ParamId) {
        (self.layout.head.w, self.layout.head.b)
    }

    pub fn token_final_ids(&self) -> (ParamId, ParamId) {
        (self.layout.tok2.w, self.layout.tok2.b)
    }

    /// Token layer: per-point affine + GELU, max-pool per patch, affine to `L`.
    pub(crate) fn token_embed_graph(&self, g: &Graph<S>, p: &Bound, patches: &[Vec<Point>]) -> Result<Var> {
        let gs = self.cfg.group_size;
        let mut pooled = Vec::with_capacity(patches.len());
        for (i, patch) in patches.iter().enumerate() {
            if patch.len() != gs {
                return Err(Error::Shape(format!("patch {i} has {} points, expected {gs}", patch.len())));
            }
            let x = g.constant(points_tensor(gs, 3, patch.iter().copied())?);
            let h = g.gelu(self.layout.tok1.forward(g, p, x)?);
            pooled.push(g.max_pool(h, 0)?);
        }
        let stacked = if pooled.len() == 1 { pooled[0] } else { g.concat(&pooled, 0)? };
        self.layout.tok2.forward(g, p, stacked)
    }

    pub(crate) fn pos_embed_graph(&self, g: &Graph<S>, p: &Bound, centers: &[Point]) -> Result<Var> {
        let c = g.constant(points_tensor(centers.len(), 3, centers.iter().copied())?);
        Ok(g.gelu(self.layout.pos.forward(g, p, c)?))
    }

    /// Latent tokens `[n_visible, L]` after the final normalization.
    pub(crate) fn encode_graph(&self, g: &Graph<S>, p: &Bound, visible: &[Vec<Point>], vis_centers: &[Point]) -> Result<Var> {
        if visible.is_empty() || visible.len() != vis_centers.len() {
            return invalid(format!("{} visible patches for {} centers", visible.len(), vis_centers.len()));
        }
        let mut x = self.token_embed_graph(g, p, visible)?;
        if self.cfg.use_position_embedding {
            let pe = self.pos_embed_graph(g, p, vis_centers)?;
            x = g.add(x, pe)?;
        }
        for b in &self.layout.blocks {
            x = b.forward(g, p, x)?;
        }
        self.layout.norm.forward(g, p, x)
    }

    /// Pretraining head: `[n, L] → [n, group_size·3]` center-relative points.
    pub(crate) fn head_graph(&self, g: &Graph<S>, p: &Bound, latent: Var) -> Result<Var> {
        self.layout.head.forward(g, p, latent)
    }

    /// Per-patch tokens of the token layer alone (no position, no transformer).
    pub fn token_embed(&self, patches: &[Vec<Point>]) -> Result<Vec<Vec<f64>>> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let v = self.token_embed_graph(&g, &p, patches)?;
        let t = g.value(v);
        Ok(t.to_f64().chunks(self.cfg.latent_width).map(<[f64]>::to_vec).collect())
    }

    pub fn pos_embed(&self, centers: &[Point]) -> Result<Vec<Vec<f64>>> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let v = self.pos_embed_graph(&g, &p, centers)?;
        let t = g.value(v);
        Ok(t.to_f64().chunks(self.cfg.latent_width).map(<[f64]>::to_vec).collect())
    }

    /// Segments the cloud and encodes its visible patches.
    pub fn encode(&self, cloud: &PointCloud, mask: &MaskSpec) -> Result<LatentSet> {
        let ps = segment(cloud, self.cfg.num_groups, self.cfg.group_size)?;
        if mask.num_groups() != ps.num_groups() {
            return invalid(format!("mask over {} patches, cloud has {}", mask.num_groups(), ps.num_groups()));
        }
        let vis: Vec<Vec<Point>> = mask.visible_indices().iter().map(|&i| ps.patches[i].clone()).collect();
        self.encode_patches(&vis, &ps.centers, mask)
    }

    /// Segments, draws a mask with the configured ratio and strategy, encodes.
    pub fn encode_with_seed(&self, cloud: &PointCloud, mask_seed: u64) -> Result<LatentSet> {
        let ps = segment(cloud, self.cfg.num_groups, self.cfg.group_size)?;
        let mask = apply_mask(&ps.centers, self.cfg.mask_ratio, self.cfg.mask_strategy, mask_seed)?;
        let vis: Vec<Vec<Point>> = mask.visible_indices().iter().map(|&i| ps.patches[i].clone()).collect();
        self.encode_patches(&vis, &ps.centers, &mask)
    }

    /// Pretraining-head predictions for every latent token.
    pub fn pretrain_head(&self, latent: &LatentSet) -> Result<Vec<Vec<Point>>> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let n = latent.num_tokens();
        let x = g.constant(Tensor::from_f64(&[n, latent.width], &latent.tokens)?);
        let out = self.head_graph(&g, &p, x)?;
        let vals = g.value(out).to_f64();
        Ok(vals
            .chunks(3 * self.cfg.group_size)
            .map(|row| row.chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
            .collect())
    }
}

impl<S: Real> VisibleEncoder for Encoder<S> {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn encode_patches(&self, visible: &[Vec<Point>], centers: &[Point], mask: &MaskSpec) -> Result<LatentSet> {
        if centers.len() != mask.num_groups() {
            return invalid(format!("{} centers for a mask over {}", centers.len(), mask.num_groups()));
        }
        let vis_idx = mask.visible_indices();
        if vis_idx.len() != visible.len() {
            return invalid(format!("{} visible patches but mask shows {}", visible.len(), vis_idx.len()));
        }
        let vis_centers: Vec<Point> = vis_idx.iter().map(|&i| centers[i]).collect();
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let v = self.encode_graph(&g, &p, visible, &vis_centers)?;
        let t = g.value(v);
        t.assert_finite("encoder")?;
        Ok(LatentSet {
            tokens: t.to_f64(),
            width: self.cfg.latent_width,
            centers: centers.to_vec(),
            mask: mask.clone(),
        })
    }
}

// ---------------------------------------------------------------------------
// Decoder

#[derive(Debug, Clone)]
pub(crate) struct DecoderLayout {
    time: Linear,
    mask_token: Linear,
    pos: Linear,
    blocks: Vec<Block>,
    norm: Norm,
    head: Linear,
}

#[derive(Debug, Clone)]
pub struct Decoder<S: Real> {
    pub cfg: ModelConfig,
    pub params: ParamStore<S>,
    layout: DecoderLayout,
}

impl<S: Real> Decoder<S> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = init_rng(seed);
        let mut ps = ParamStore::new();
        let l = cfg.latent_width;
        let per = 3 * cfg.points_per_prediction();
        let layout = DecoderLayout {
            time: Linear::new(&mut ps, "decoder.time_embed", l, l, &mut rng),
            mask_token: Linear::new(&mut ps, "decoder.mask_token", per, l, &mut rng),
            pos: Linear::new(&mut ps, "decoder.pos_embed", 3, l, &mut rng),
            blocks: (0..cfg.dec_blocks)
                .map(|i| Block::new(&mut ps, &format!("decoder.blocks.{i}"), l, cfg.dec_heads, &mut rng))
                .collect(),
            norm: Norm::new(&mut ps, "decoder.norm", l),
            head: Linear::new(&mut ps, "decoder.prediction_head", l, per, &mut rng),
        };
        Ok(Self {
            cfg: cfg.clone(),
            params: ps,
            layout,
        })
    }

    pub fn head_ids(&self) -> (ParamId, ParamId) {
        (self.layout.head.w, self.layout.head.b)
    }

    pub fn mask_token_ids(&self) -> (ParamId, ParamId) {
        (self.layout.mask_token.w, self.layout.mask_token.b)
    }

    pub(crate) fn time_embed_graph(&self, g: &Graph<S>, p: &Bound, t: usize) -> Result<Var> {
        if t >= self.cfg.timesteps {
            return invalid(format!("timestep {t} outside [0, {})", self.cfg.timesteps));
        }
        let s = g.constant(Tensor::from_f64(&[1, self.cfg.latent_width], &sinusoid(t, self.cfg.latent_width))?);
        Ok(g.gelu(self.layout.time.forward(g, p, s)?))
    }

    /// Mask token layer on a `[patches, points_per_prediction·3]` block.
    pub(crate) fn mask_tokens_graph(&self, g: &Graph<S>, p: &Bound, x_t: Var) -> Result<Var> {
        Ok(g.gelu(self.layout.mask_token.forward(g, p, x_t)?))
    }

    /// Full decoder pass; returns `[predicted patches, points_per_prediction·3]`.
    pub(crate) fn decode_graph(&self, g: &Graph<S>, p: &Bound, latent: Var, x_t: Var, t: usize, centers: &[Point], mask: &MaskSpec) -> Result<Var> {
        let cfg = &self.cfg;
        let n_vis = mask.num_visible();
        let n_groups = mask.num_groups();
        let n_pred = cfg.predicted_patches(mask);
        let per = 3 * cfg.points_per_prediction();
        if g.shape(latent) != [n_vis, cfg.latent_width] {
            return invalid(format!(
                "latent shape {:?} inconsistent with {n_vis} visible patches of width {}",
                g.shape(latent),
                cfg.latent_width
            ));
        }
        if g.shape(x_t) != [n_pred, per] {
            return Err(Error::Shape(format!(
                "noisy input {:?}, expected [{n_pred}, {per}]",
                g.shape(x_t)
            )));
        }
        let tokens = self.mask_tokens_graph(g, p, x_t)?;
        let mut x = if cfg.predict_visible {
            let vis_tok = g.slice(tokens, 0, 0, n_vis)?;
            let vis = g.add(latent, vis_tok)?;
            let masked = g.slice(tokens, 0, n_vis, n_groups - n_vis)?;
            g.concat(&[vis, masked], 0)?
        } else {
            g.concat(&[latent, tokens], 0)?
        };
        if cfg.use_position_embedding {
            let order = mask.token_order();
            let c = g.constant(points_tensor(n_groups, 3, order.iter().map(|&i| centers[i]))?);
            let pe = g.gelu(self.layout.pos.forward(g, p, c)?);
            x = g.add(x, pe)?;
        }
        let te = self.time_embed_graph(g, p, t)?;
        x = g.add(x, te)?;
        for b in &self.layout.blocks {
            x = b.forward(g, p, x)?;
        }
        let x = self.layout.norm.forward(g, p, x)?;
        let x = if cfg.predict_visible { x } else { g.slice(x, 0, n_vis, n_groups - n_vis)? };
        self.layout.head.forward(g, p, x)
    }

    pub fn time_embed(&self, t: usize) -> Result<Vec<f64>> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let v = self.time_embed_graph(&g, &p, t)?;
        let out = g.value(v).to_f64();
        Ok(out)
    }

    /// Mask token layer applied to `patches` noisy patches laid out patch by patch.
    pub fn mask_tokenize(&self, x_t: &[Point], patches: usize) -> Result<Vec<Vec<f64>>> {
        let per = self.cfg.points_per_prediction();
        if x_t.len() != patches * per {
            return Err(Error::Shape(format!("{} noisy points for {patches} patches of {per}", x_t.len())));
        }
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let x = g.constant(points_tensor(patches, 3 * per, x_t.iter().copied())?);
        let v = self.mask_tokens_graph(&g, &p, x)?;
        let out = g.value(v).to_f64();
        Ok(out.chunks(self.cfg.latent_width).map(<[f64]>::to_vec).collect())
    }

    /// One decoder evaluation on a noisy sample.
    pub fn decode(&self, latent: &LatentSet, x_t: &[Point], t: usize) -> Result<DecoderOutput> {
        let flat = self.denoise(latent, x_t, t)?;
        Ok(decode_output(&self.cfg, &latent.mask, flat))
    }
}

impl<S: Real> Denoiser for Decoder<S> {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn denoise(&self, latent: &LatentSet, x_t: &[Point], t: usize) -> Result<Vec<Point>> {
        latent.check(&self.cfg)?;
        let n_pred = self.cfg.predicted_patches(&latent.mask);
        let per = self.cfg.points_per_prediction();
        if x_t.len() != n_pred * per {
            return Err(Error::Shape(format!(
                "{} noisy points, expected {n_pred} patches of {per}",
                x_t.len()
            )));
        }
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let lat = g.constant(Tensor::from_f64(&[latent.num_tokens(), latent.width], &latent.tokens)?);
        let x = g.constant(points_tensor(n_pred, 3 * per, x_t.iter().copied())?);
        let out = self.decode_graph(&g, &p, lat, x, t, &latent.centers, &latent.mask)?;
        let vals = g.value(out);
        vals.assert_finite("decoder")?;
        Ok(vals.to_f64().chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
    }
}

//! The toy multimodal diffusion transformer.
//!
//! Tokens for `[noise, material, depth, normal, lighting]` come from
//! per-role linear patch embeddings. Each block runs layer norm, shared
//! Q/K/V projections with condition-branch adapters, rotary embedding on Q
//! and K, joint attention under the mutual mask, and a two-layer GELU MLP,
//! with residual connections around both sublayers. The timestep enters as
//! sinusoidal features added to noise tokens only; together with the mask
//! semantics this makes every condition row's hidden trajectory independent
//! of both `t` and the denoising state — the invariant the KV cache banks on.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use crate::attention::{build_scma_mask, BranchLayout, RopeFrequencies};
use crate::dataset::{CondInputs, Role, ToyDataset, ROLES};
use crate::error::{Error, Result};
use crate::flow::{self, VelocityModel};
use crate::io;
use crate::rng::Rng;
use crate::shader_lora::{
    lora_delta, project_branches, set_strength, Condition, ConditionAdapterSet, ProjectionWeights,
    CONDITIONS,
};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub lora_rank: usize,
    pub patch_size: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub learning_rate: f64,
    pub mlp_hidden_mult: usize,
    pub rope_base: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 16,
            n_blocks: 2,
            n_heads: 1,
            lora_rank: 4,
            patch_size: 1,
            grid_h: 8,
            grid_w: 8,
            learning_rate: 1e-4,
            mlp_hidden_mult: 4,
            rope_base: 10_000.0,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d_model < 2 || self.d_model % 2 != 0 {
            return fail(format!("d_model must be even and >= 2, got {}", self.d_model));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "n_heads = {} must divide d_model = {}",
                self.n_heads, self.d_model
            ));
        }
        if self.head_dim() % 2 != 0 {
            return fail(format!(
                "head dimension {} must be even for rotary embedding",
                self.head_dim()
            ));
        }
        if self.lora_rank == 0 || self.lora_rank > self.d_model / 2 {
            return fail(format!(
                "lora_rank must be in 1..={}, got {}",
                self.d_model / 2,
                self.lora_rank
            ));
        }
        if self.n_blocks == 0 {
            return fail("n_blocks must be at least 1".into());
        }
        if self.patch_size == 0
            || self.grid_h == 0
            || self.grid_w == 0
            || self.grid_h % self.patch_size != 0
            || self.grid_w % self.patch_size != 0
        {
            return fail(format!(
                "grid {}x{} must be divisible by patch_size {}",
                self.grid_h, self.grid_w, self.patch_size
            ));
        }
        if self.mlp_hidden_mult == 0 {
            return fail("mlp_hidden_mult must be at least 1".into());
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return fail(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if self.rope_base <= 1.0 {
            return fail(format!("rope_base must exceed 1, got {}", self.rope_base));
        }
        if self.ln_eps <= 0.0 {
            return fail(format!("ln_eps must be positive, got {}", self.ln_eps));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.d_model * self.mlp_hidden_mult
    }

    fn patch_in_dim(&self, role: Role) -> usize {
        role.channels() * self.patch_size * self.patch_size
    }

    fn patch_out_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("d_model", self.d_model.to_string()),
            ("n_blocks", self.n_blocks.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("lora_rank", self.lora_rank.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("grid_h", self.grid_h.to_string()),
            ("grid_w", self.grid_w.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("mlp_hidden_mult", self.mlp_hidden_mult.to_string()),
            ("rope_base", self.rope_base.to_string()),
            ("ln_eps", self.ln_eps.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Apply one `key = value` override; `Ok(false)` means the key is not a
    /// model key.
    pub fn apply_pair(&mut self, key: &str, value: &str) -> Result<bool> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for {key}")))
        }
        match key {
            "d_model" => self.d_model = parse(key, value)?,
            "n_blocks" => self.n_blocks = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "lora_rank" => self.lora_rank = parse(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "grid_h" => self.grid_h = parse(key, value)?,
            "grid_w" => self.grid_w = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "mlp_hidden_mult" => self.mlp_hidden_mult = parse(key, value)?,
            "rope_base" => self.rope_base = parse(key, value)?,
            "ln_eps" => self.ln_eps = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone)]
pub struct MlpParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub proj: ProjectionWeights,
    pub adapters: ConditionAdapterSet,
    pub mlp: MlpParams,
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub embeds: Vec<Embedding>, // indexed by ROLES order
    pub blocks: Vec<BlockParams>,
    pub head: HeadParams,
}

impl ModelParams {
    /// Fresh parameters. The head starts at zero, so an untrained model
    /// predicts zero velocity; adapters start as no-ops (B = 0).
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let d = cfg.d_model;
        let mut embeds = Vec::with_capacity(ROLES.len());
        for role in ROLES {
            let in_dim = cfg.patch_in_dim(role);
            let bound = 1.0 / (in_dim as f64).sqrt();
            embeds.push(Embedding {
                w: Tensor::random_uniform(vec![in_dim, d], -bound, bound, rng),
                b: Tensor::zeros(vec![d]),
            });
        }
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for _ in 0..cfg.n_blocks {
            let proj = ProjectionWeights::init(d, rng);
            let adapters = ConditionAdapterSet::init(d, cfg.lora_rank, rng)?;
            let hidden = cfg.mlp_hidden();
            let b1 = 1.0 / (d as f64).sqrt();
            let b2 = 1.0 / (hidden as f64).sqrt();
            let mlp = MlpParams {
                w1: Tensor::random_uniform(vec![d, hidden], -b1, b1, rng),
                b1: Tensor::zeros(vec![hidden]),
                w2: Tensor::random_uniform(vec![hidden, d], -b2, b2, rng),
                b2: Tensor::zeros(vec![d]),
            };
            blocks.push(BlockParams {
                proj,
                adapters,
                mlp,
            });
        }
        let head = HeadParams {
            w: Tensor::zeros(vec![d, cfg.patch_out_dim()]),
            b: Tensor::zeros(vec![cfg.patch_out_dim()]),
        };
        Ok(ModelParams {
            embeds,
            blocks,
            head,
        })
    }

    /// Visit every parameter tensor with its stable name, in a fixed order.
    pub fn for_each(&self, f: &mut impl FnMut(&str, &Tensor)) {
        for (role, e) in ROLES.iter().zip(&self.embeds) {
            f(&format!("embed.{}.w", role.name()), &e.w);
            f(&format!("embed.{}.b", role.name()), &e.b);
        }
        for (bi, b) in self.blocks.iter().enumerate() {
            f(&format!("block{bi}.proj.wq"), &b.proj.wq);
            f(&format!("block{bi}.proj.wk"), &b.proj.wk);
            f(&format!("block{bi}.proj.wv"), &b.proj.wv);
            for cond in CONDITIONS {
                let triple = b.adapters.triple(cond);
                for (slot, ad) in [("q", &triple.q), ("k", &triple.k), ("v", &triple.v)] {
                    f(&format!("block{bi}.adapter.{}.{slot}.a", cond.name()), &ad.a);
                    f(&format!("block{bi}.adapter.{}.{slot}.b", cond.name()), &ad.b);
                }
            }
            f(&format!("block{bi}.mlp.w1"), &b.mlp.w1);
            f(&format!("block{bi}.mlp.b1"), &b.mlp.b1);
            f(&format!("block{bi}.mlp.w2"), &b.mlp.w2);
            f(&format!("block{bi}.mlp.b2"), &b.mlp.b2);
        }
        f("head.w", &self.head.w);
        f("head.b", &self.head.b);
    }

    /// Rebuild the structure with every tensor replaced by `f(name, tensor)`;
    /// adapter strengths and slot labels carry over.
    pub fn map(&self, f: &mut impl FnMut(&str, &Tensor) -> Tensor) -> ModelParams {
        let embeds = ROLES
            .iter()
            .zip(&self.embeds)
            .map(|(role, e)| Embedding {
                w: f(&format!("embed.{}.w", role.name()), &e.w),
                b: f(&format!("embed.{}.b", role.name()), &e.b),
            })
            .collect();
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(bi, b)| {
                let proj = ProjectionWeights {
                    wq: f(&format!("block{bi}.proj.wq"), &b.proj.wq),
                    wk: f(&format!("block{bi}.proj.wk"), &b.proj.wk),
                    wv: f(&format!("block{bi}.proj.wv"), &b.proj.wv),
                };
                let mut adapters = b.adapters.clone();
                for cond in CONDITIONS {
                    let triple = adapters.triple_mut(cond);
                    for (slot, ad) in [
                        ("q", &mut triple.q),
                        ("k", &mut triple.k),
                        ("v", &mut triple.v),
                    ] {
                        ad.a = f(&format!("block{bi}.adapter.{}.{slot}.a", cond.name()), &ad.a);
                        ad.b = f(&format!("block{bi}.adapter.{}.{slot}.b", cond.name()), &ad.b);
                    }
                }
                let mlp = MlpParams {
                    w1: f(&format!("block{bi}.mlp.w1"), &b.mlp.w1),
                    b1: f(&format!("block{bi}.mlp.b1"), &b.mlp.b1),
                    w2: f(&format!("block{bi}.mlp.w2"), &b.mlp.w2),
                    b2: f(&format!("block{bi}.mlp.b2"), &b.mlp.b2),
                };
                BlockParams {
                    proj,
                    adapters,
                    mlp,
                }
            })
            .collect();
        let head = HeadParams {
            w: f("head.w", &self.head.w),
            b: f("head.b", &self.head.b),
        };
        ModelParams {
            embeds,
            blocks,
            head,
        }
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.for_each(&mut |name, t| out.push((name.to_string(), t.detached())));
        out
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        self.for_each(&mut |_, t| flat.extend_from_slice(t.data()));
        flat
    }

    pub fn from_flat(&self, flat: &[f64]) -> ModelParams {
        let mut offset = 0;
        self.map(&mut |_, t| {
            let next = offset + t.len();
            let out = Tensor::internal(t.shape().to_vec(), flat[offset..next].to_vec(), None);
            offset = next;
            out
        })
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, t| n += t.len());
        n
    }
}

#[derive(Debug, Clone)]
pub struct ModelState {
    pub cfg: ModelConfig,
    pub params: ModelParams,
}

impl ModelState {
    pub fn new(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let params = ModelParams::init(&cfg, rng)?;
        Ok(ModelState { cfg, params })
    }

    /// Set one condition's adapter strength across all blocks.
    pub fn set_strength(&mut self, cond: Condition, s: f64) -> Result<()> {
        for b in &mut self.params.blocks {
            set_strength(&mut b.adapters, cond, s)?;
        }
        Ok(())
    }

    pub fn strength(&self, cond: Condition) -> f64 {
        self.params.blocks[0].adapters.strength(cond)
    }

    pub fn conditioned<'a>(&'a self, inputs: &'a CondInputs) -> ConditionedModel<'a> {
        ConditionedModel {
            cfg: &self.cfg,
            params: &self.params,
            inputs,
        }
    }
}

// ---- tokenization --------------------------------------------------------

/// Row-major patch vectors of one latent: `[n_patches x channels*p*p]`.
/// Within a patch, values are ordered channel-major, then row-major.
fn patch_rows(latent: &Tensor, channels: usize, p: usize, role: Role) -> Result<Tensor> {
    let (h, w) = match (channels, latent.shape()) {
        (1, [h, w]) => (*h, *w),
        (c, [c2, h, w]) if c == *c2 => (*h, *w),
        _ => {
            return Err(Error::InvalidShape {
                op: "patch_rows",
                shape: latent.shape().to_vec(),
                detail: format!("role {} wants {channels} channel(s)", role.name()),
            });
        }
    };
    if h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!(
            "grid {h}x{w} of role {} is not divisible by patch size {p}",
            role.name()
        )));
    }
    let (hp, wp) = (h / p, w / p);
    let plane = h * w;
    let d = latent.data();
    let in_dim = channels * p * p;
    let mut rows = Vec::with_capacity(hp * wp * in_dim);
    for py in 0..hp {
        for px in 0..wp {
            for c in 0..channels {
                for dy in 0..p {
                    for dx in 0..p {
                        let y = py * p + dy;
                        let x = px * p + dx;
                        rows.push(d[c * plane + y * w + x]);
                    }
                }
            }
        }
    }
    Ok(Tensor::internal(vec![hp * wp, in_dim], rows, None))
}

pub(crate) fn embed_single_role(
    tape: &Tape,
    cfg: &ModelConfig,
    params: &ModelParams,
    role: Role,
    latent: &Tensor,
) -> Result<Tensor> {
    let rows = patch_rows(latent, role.channels(), cfg.patch_size, role)?;
    let emb = &params.embeds[ROLES.iter().position(|r| *r == role).unwrap()];
    let projected = tape.matmul(&rows, &emb.w)?;
    tape.add_row_vector(&projected, &emb.b)
}

fn check_grid(role: Role, latent: &Tensor, grid: (usize, usize)) -> Result<()> {
    let (h, w) = match latent.shape() {
        [h, w] => (*h, *w),
        [_, h, w] => (*h, *w),
        _ => (0, 0),
    };
    if (h, w) != grid {
        return Err(Error::Config(format!(
            "grid mismatch for role {}: {h}x{w} vs {}x{}",
            role.name(),
            grid.0,
            grid.1
        )));
    }
    Ok(())
}

/// Patch-grid positions, row-major. Condition tokens reuse the same grid
/// positions as the noise tokens they correspond to.
fn grid_positions(hp: usize, wp: usize) -> Vec<usize> {
    (0..hp * wp).collect()
}

/// Embed all roles into one `[n x d]` sequence in block order, with the
/// layout and per-token rotary positions.
pub fn tokenize(
    tape: &Tape,
    cfg: &ModelConfig,
    params: &ModelParams,
    noise_latent: &Tensor,
    inputs: &CondInputs,
) -> Result<(Tensor, BranchLayout, Arc<Vec<usize>>)> {
    let grid = inputs.grid()?;
    check_grid(Role::Noise, noise_latent, grid)?;
    let p = cfg.patch_size;
    let (hp, wp) = (grid.0 / p, grid.1 / p);
    let n_patches = hp * wp;
    let block_positions = grid_positions(hp, wp);

    let noise = embed_single_role(tape, cfg, params, Role::Noise, noise_latent)?;
    let material = embed_single_role(tape, cfg, params, Role::Material, &inputs.material)?;
    let mut parts = vec![noise, material];
    let mut positions = Vec::with_capacity(5 * n_patches);
    positions.extend_from_slice(&block_positions);
    positions.extend_from_slice(&block_positions);

    let mut cond_lengths = Vec::with_capacity(CONDITIONS.len());
    for cond in CONDITIONS {
        match inputs.condition(cond) {
            Some(latent) => {
                let role = match cond {
                    Condition::Depth => Role::Depth,
                    Condition::Normal => Role::Normal,
                    Condition::Lighting => Role::Lighting,
                };
                check_grid(role, latent, grid)?;
                parts.push(embed_single_role(tape, cfg, params, role, latent)?);
                positions.extend_from_slice(&block_positions);
                cond_lengths.push(n_patches);
            }
            None => cond_lengths.push(0),
        }
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    let z = tape.concat_rows(&refs)?;
    let layout = BranchLayout::new(n_patches, n_patches, cond_lengths);
    Ok((z, layout, Arc::new(positions)))
}

// ---- timestep conditioning ------------------------------------------------

const TIME_SCALE: f64 = 1000.0;

/// Sinusoidal features of the timestep, added to noise tokens only.
pub fn timestep_features(t: f64, d: usize) -> Tensor {
    let half = d / 2;
    let mut data = vec![0.0; d];
    for i in 0..half {
        let freq = 10_000.0f64.powf(-(i as f64) / half as f64);
        let angle = t * TIME_SCALE * freq;
        data[2 * i] = angle.sin();
        data[2 * i + 1] = angle.cos();
    }
    Tensor::internal(vec![d], data, None)
}

// ---- block internals (shared with the kv cache) ---------------------------

pub(crate) fn rope_heads(
    tape: &Tape,
    cfg: &ModelConfig,
    x: &Tensor,
    positions: &Arc<Vec<usize>>,
    freqs: &RopeFrequencies,
) -> Result<Tensor> {
    if cfg.n_heads == 1 {
        return crate::attention::apply_rope(tape, x, positions, freqs);
    }
    let hd = cfg.head_dim();
    let mut parts = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let cols = tape.slice_cols(x, h * hd, (h + 1) * hd)?;
        parts.push(crate::attention::apply_rope(tape, &cols, positions, freqs)?);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    tape.concat_cols(&refs)
}

pub(crate) fn attend_heads(
    tape: &Tape,
    cfg: &ModelConfig,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&[f64]>,
) -> Result<Tensor> {
    if cfg.n_heads == 1 {
        return crate::attention::attend(tape, q, k, v, mask);
    }
    let hd = cfg.head_dim();
    let mut parts = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = tape.slice_cols(q, h * hd, (h + 1) * hd)?;
        let kh = tape.slice_cols(k, h * hd, (h + 1) * hd)?;
        let vh = tape.slice_cols(v, h * hd, (h + 1) * hd)?;
        parts.push(crate::attention::attend(tape, &qh, &kh, &vh, mask)?);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    tape.concat_cols(&refs)
}

pub(crate) fn mlp_forward(tape: &Tape, mlp: &MlpParams, x: &Tensor) -> Result<Tensor> {
    let h = tape.matmul(x, &mlp.w1)?;
    let h = tape.add_row_vector(&h, &mlp.b1)?;
    let h = tape.gelu(&h)?;
    let h = tape.matmul(&h, &mlp.w2)?;
    tape.add_row_vector(&h, &mlp.b2)
}

/// Post-rope K and plain V of one block, full width. What the cache stores
/// per condition, and what the timestep-invariance checks inspect.
#[derive(Debug, Clone)]
pub struct BlockKv {
    pub k: Tensor,
    pub v: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    pub blocks: Vec<BlockKv>,
}

#[allow(clippy::too_many_arguments)]
fn block_full(
    tape: &Tape,
    cfg: &ModelConfig,
    bp: &BlockParams,
    h: &Tensor,
    layout: &BranchLayout,
    positions: &Arc<Vec<usize>>,
    mask: &crate::attention::AttentionMask,
    freqs: &RopeFrequencies,
    trace: Option<&mut ForwardTrace>,
) -> Result<Tensor> {
    let ln1 = tape.layer_norm(h, cfg.ln_eps)?;
    let (q, k, v) = project_branches(tape, &ln1, layout, &bp.proj, &bp.adapters)?;
    let q = rope_heads(tape, cfg, &q, positions, freqs)?;
    let k = rope_heads(tape, cfg, &k, positions, freqs)?;
    if let Some(tr) = trace {
        tr.blocks.push(BlockKv {
            k: k.detached(),
            v: v.detached(),
        });
    }
    let attn = attend_heads(tape, cfg, &q, &k, &v, Some(mask.entries()))?;
    let h2 = tape.add(h, &attn)?;
    let ln2 = tape.layer_norm(&h2, cfg.ln_eps)?;
    let m = mlp_forward(tape, &bp.mlp, &ln2)?;
    tape.add(&h2, &m)
}

/// One block of the condition branch: the same arithmetic the full forward
/// applies to this block's rows, runnable without any denoising tokens.
/// Returns the next hidden state plus the (post-rope K, V) pair.
pub(crate) fn cond_block(
    tape: &Tape,
    cfg: &ModelConfig,
    bp: &BlockParams,
    h_c: &Tensor,
    cond: Condition,
    positions: &Arc<Vec<usize>>,
    freqs: &RopeFrequencies,
) -> Result<(Tensor, BlockKv)> {
    let ln1 = tape.layer_norm(h_c, cfg.ln_eps)?;
    let triple = bp.adapters.triple(cond);
    let q = tape.add(
        &tape.matmul(&ln1, &bp.proj.wq)?,
        &lora_delta(tape, &ln1, &triple.q)?,
    )?;
    let k = tape.add(
        &tape.matmul(&ln1, &bp.proj.wk)?,
        &lora_delta(tape, &ln1, &triple.k)?,
    )?;
    let v = tape.add(
        &tape.matmul(&ln1, &bp.proj.wv)?,
        &lora_delta(tape, &ln1, &triple.v)?,
    )?;
    let q = rope_heads(tape, cfg, &q, positions, freqs)?;
    let k = rope_heads(tape, cfg, &k, positions, freqs)?;
    let kv = BlockKv {
        k: k.detached(),
        v: v.detached(),
    };
    let attn = attend_heads(tape, cfg, &q, &k, &v, None)?;
    let h2 = tape.add(h_c, &attn)?;
    let ln2 = tape.layer_norm(&h2, cfg.ln_eps)?;
    let m = mlp_forward(tape, &bp.mlp, &ln2)?;
    Ok((tape.add(&h2, &m)?, kv))
}

/// Plain-projection K/V of a row block (no adapters), as the material rows
/// see it. Used when the material block itself is cached.
pub(crate) fn plain_kv(
    tape: &Tape,
    cfg: &ModelConfig,
    bp: &BlockParams,
    h: &Tensor,
    positions: &Arc<Vec<usize>>,
    freqs: &RopeFrequencies,
) -> Result<BlockKv> {
    let ln1 = tape.layer_norm(h, cfg.ln_eps)?;
    let k = tape.matmul(&ln1, &bp.proj.wk)?;
    let v = tape.matmul(&ln1, &bp.proj.wv)?;
    let k = rope_heads(tape, cfg, &k, positions, freqs)?;
    Ok(BlockKv {
        k: k.detached(),
        v: v.detached(),
    })
}

/// One block over the recomputed (noise / noise+material) rows, attending
/// to their own fresh K/V concatenated with cached block K/V in layout
/// order. The computed rows carry all-zero mask rows, so no mask is applied.
pub(crate) fn computed_rows_block(
    tape: &Tape,
    cfg: &ModelConfig,
    bp: &BlockParams,
    h_rows: &Tensor,
    positions: &Arc<Vec<usize>>,
    cached: &[&BlockKv],
    freqs: &RopeFrequencies,
) -> Result<Tensor> {
    let ln1 = tape.layer_norm(h_rows, cfg.ln_eps)?;
    let q = tape.matmul(&ln1, &bp.proj.wq)?;
    let k = tape.matmul(&ln1, &bp.proj.wk)?;
    let v = tape.matmul(&ln1, &bp.proj.wv)?;
    let q = rope_heads(tape, cfg, &q, positions, freqs)?;
    let k = rope_heads(tape, cfg, &k, positions, freqs)?;
    let mut k_parts = vec![&k];
    let mut v_parts = vec![&v];
    for kv in cached {
        k_parts.push(&kv.k);
        v_parts.push(&kv.v);
    }
    let k_all = tape.concat_rows(&k_parts)?;
    let v_all = tape.concat_rows(&v_parts)?;
    let attn = attend_heads(tape, cfg, &q, &k_all, &v_all, None)?;
    let h2 = tape.add(h_rows, &attn)?;
    let ln2 = tape.layer_norm(&h2, cfg.ln_eps)?;
    let m = mlp_forward(tape, &bp.mlp, &ln2)?;
    tape.add(&h2, &m)
}

/// Map noise-block token outputs back onto the `[H, W]` latent grid.
pub(crate) fn head_output(
    tape: &Tape,
    cfg: &ModelConfig,
    head: &HeadParams,
    noise_rows: &Tensor,
    grid: (usize, usize),
) -> Result<Tensor> {
    let out = tape.matmul(noise_rows, &head.w)?;
    let out = tape.add_row_vector(&out, &head.b)?;
    let (h, w) = grid;
    let p = cfg.patch_size;
    if p == 1 {
        return tape.reshape(&out, vec![h, w]);
    }
    let wp = w / p;
    let mut index = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let row = (y / p) * wp + x / p;
            let offset = (y % p) * p + (x % p);
            index.push(row * p * p + offset);
        }
    }
    tape.gather(&out, Arc::new(index), vec![h, w])
}

/// Full forward pass: velocity prediction over the noise block.
pub fn forward_full(
    tape: &Tape,
    cfg: &ModelConfig,
    params: &ModelParams,
    noise_latent: &Tensor,
    inputs: &CondInputs,
    t: f64,
    mut trace: Option<&mut ForwardTrace>,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidValue {
            what: "t",
            value: t,
            detail: "forward timestep must lie in [0, 1]",
        });
    }
    let grid = inputs.grid()?;
    let (z, layout, positions) = tokenize(tape, cfg, params, noise_latent, inputs)?;

    // timestep features feed noise tokens only
    let t_feat = timestep_features(t, cfg.d_model);
    let noise = tape.slice_rows(&z, 0, layout.n_noise)?;
    let noise = tape.add_row_vector(&noise, &t_feat)?;
    let rest = tape.slice_rows(&z, layout.n_noise, layout.total())?;
    let mut h = tape.concat_rows(&[&noise, &rest])?;

    let mask = build_scma_mask(&layout);
    let freqs = RopeFrequencies::new(cfg.head_dim(), cfg.rope_base)?;
    for bp in &params.blocks {
        h = block_full(
            tape,
            cfg,
            bp,
            &h,
            &layout,
            &positions,
            &mask,
            &freqs,
            trace.as_deref_mut(),
        )?;
    }
    let noise_rows = tape.slice_rows(&h, 0, layout.n_noise)?;
    head_output(tape, cfg, &params.head, &noise_rows, grid)
}

/// A model state bound to conditioning inputs; the velocity field the flow
/// module integrates and trains.
pub struct ConditionedModel<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a ModelParams,
    pub inputs: &'a CondInputs,
}

impl VelocityModel for ConditionedModel<'_> {
    fn velocity(&self, tape: &Tape, xt: &Tensor, t: f64) -> Result<Tensor> {
        forward_full(tape, self.cfg, self.params, xt, self.inputs, t, None)
    }

    fn latent_shape(&self) -> Vec<usize> {
        let (h, w) = self.inputs.grid().expect("validated material grid");
        vec![h, w]
    }
}

// ---- training --------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub steps: usize,
    pub seed: u64,
    pub frozen_base: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 2000,
            seed: 0,
            frozen_base: false,
        }
    }
}

fn is_adapter_param(name: &str) -> bool {
    name.contains(".adapter.")
}

/// Plain SGD (batch size 1) on the flow-matching loss. Per step the rng
/// draws, in order: the sample index, the timestep, then the noise.
/// Returns the per-step loss trace.
pub fn train(state: &mut ModelState, data: &ToyDataset, opts: &TrainOptions) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Config("training needs a non-empty dataset".into()));
    }
    let mut rng = Rng::new(opts.seed);
    let mut losses = Vec::with_capacity(opts.steps);
    let lr = state.cfg.learning_rate;
    for step in 0..opts.steps {
        let sample = &data.samples[rng.below(data.len())];
        let inputs = sample.cond_inputs();
        let tape = Tape::new();
        let tracked = state.params.map(&mut |_, t| tape.leaf(t));
        let model = ConditionedModel {
            cfg: &state.cfg,
            params: &tracked,
            inputs: &inputs,
        };
        let loss = flow::cfm_loss(&tape, &model, &sample.target, &mut rng)?;
        let loss_value = loss.scalar_value()?;
        if !loss_value.is_finite() || loss_value > DIVERGENCE_LIMIT {
            return Err(Error::Diverged {
                step,
                loss: loss_value,
                trace: losses,
            });
        }
        losses.push(loss_value);
        tape.backward(&loss)?;

        let mut grads: HashMap<String, Tensor> = HashMap::new();
        tracked.for_each(&mut |name, t| {
            if let Some(g) = tape.grad(t) {
                grads.insert(name.to_string(), g);
            }
        });
        state.params = state.params.map(&mut |name, t| {
            if opts.frozen_base && !is_adapter_param(name) {
                return t.detached();
            }
            match grads.get(name) {
                Some(g) => t
                    .sub(&g.scale(lr))
                    .expect("gradient shape matches parameter"),
                None => t.detached(),
            }
        });
    }
    Ok(losses)
}

/// Mean of the first and last `window` entries of a loss trace.
pub fn smoothed_endpoints(losses: &[f64], window: usize) -> (f64, f64) {
    if losses.is_empty() {
        return (0.0, 0.0);
    }
    let w = window.clamp(1, losses.len());
    let head: f64 = losses[..w].iter().sum::<f64>() / w as f64;
    let tail: f64 = losses[losses.len() - w..].iter().sum::<f64>() / w as f64;
    (head, tail)
}

// ---- checkpoints -----------------------------------------------------------

pub fn save_checkpoint(state: &ModelState, dir: &Path) -> Result<()> {
    let tensors_dir = dir.join("tensors");
    std::fs::create_dir_all(&tensors_dir)?;

    let mut config_pairs = state.cfg.to_pairs();
    for cond in CONDITIONS {
        config_pairs.push((
            format!("strength_{}", cond.name()),
            state.strength(cond).to_string(),
        ));
    }
    std::fs::write(dir.join("config.txt"), io::format_key_values(&config_pairs))?;

    let mut manifest = String::new();
    manifest.push_str(&format!("lora_rank = {}\n", state.cfg.lora_rank));
    for cond in CONDITIONS {
        manifest.push_str(&format!(
            "strength_{} = {}\n",
            cond.name(),
            state.strength(cond)
        ));
    }
    let mut io_err: Option<Error> = None;
    state.params.for_each(&mut |name, t| {
        if io_err.is_some() {
            return;
        }
        let rel = format!("tensors/{name}.txt");
        if let Err(e) = io::write_tensor(&dir.join(&rel), t) {
            io_err = Some(e);
            return;
        }
        manifest.push_str(&format!("tensor {name} {rel}\n"));
    });
    if let Some(e) = io_err {
        return Err(e);
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<ModelState> {
    let config_text = std::fs::read_to_string(dir.join("config.txt"))?;
    let mut cfg = ModelConfig::default();
    let mut strengths: Vec<(Condition, f64)> = Vec::new();
    for (key, value) in io::parse_key_values(&config_text)? {
        if cfg.apply_pair(&key, &value)? {
            continue;
        }
        if let Some(name) = key.strip_prefix("strength_") {
            let cond = Condition::from_name(name)
                .ok_or_else(|| Error::Config(format!("unknown strength key `{key}`")))?;
            let s: f64 = value
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for {key}")))?;
            strengths.push((cond, s));
            continue;
        }
        return Err(Error::Config(format!("unknown checkpoint config key `{key}`")));
    }
    cfg.validate()?;

    let manifest_text = std::fs::read_to_string(dir.join("manifest.txt"))?;
    let mut files: HashMap<String, String> = HashMap::new();
    for line in manifest_text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("tensor ") {
            let mut it = rest.split_whitespace();
            let name = it
                .next()
                .ok_or_else(|| Error::Parse("manifest tensor line missing name".into()))?;
            let path = it
                .next()
                .ok_or_else(|| Error::Parse("manifest tensor line missing path".into()))?;
            files.insert(name.to_string(), path.to_string());
        }
        // key = value lines restate rank and strengths; config.txt is the authority
    }

    let mut rng = Rng::new(0);
    let mut state = ModelState::new(cfg, &mut rng)?;
    let mut missing: Vec<String> = Vec::new();
    let mut load_err: Option<Error> = None;
    let params = state.params.map(&mut |name, t| match files.get(name) {
        Some(rel) => match io::read_tensor(&dir.join(rel)) {
            Ok(loaded) if loaded.shape() == t.shape() => loaded,
            Ok(loaded) => {
                load_err = Some(Error::ShapeMismatch {
                    op: "load_checkpoint",
                    left: t.shape().to_vec(),
                    right: loaded.shape().to_vec(),
                });
                t.detached()
            }
            Err(e) => {
                load_err = Some(e);
                t.detached()
            }
        },
        None => {
            missing.push(name.to_string());
            t.detached()
        }
    });
    if let Some(e) = load_err {
        return Err(e);
    }
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "checkpoint is missing tensors: {}",
            missing.join(", ")
        )));
    }
    state.params = params;
    for (cond, s) in strengths {
        state.set_strength(cond, s)?;
    }
    Ok(state)
}

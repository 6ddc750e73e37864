//! Timestep-invariant condition KV caching.
//!
//! Condition rows attend only within their own block and never see the
//! timestep, so their per-block K/V tensors are the same at every denoising
//! step. The cache computes them once, then each step recomputes only the
//! noise and material rows and concatenates the cached tensors in layout
//! order. No computed row reads a condition row's attention output, so
//! condition queries are dropped entirely at inference. The contract is
//! exact equivalence with the uncached sampler, not an approximation.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use crate::attention::{BranchLayout, RopeFrequencies};
use crate::dataset::{CondInputs, Role};
use crate::error::{Error, Result};
use crate::flow::{self, FlowConfig};
use crate::model::{self, BlockKv, ModelState};
use crate::rng::Rng;
use crate::shader_lora::{Condition, CONDITIONS};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug)]
pub struct KVCacheStore {
    per_block: Vec<Vec<Option<BlockKv>>>, // [block][condition index]
    material: Option<Vec<BlockKv>>,       // per block, when material caching is on
    cond_forward_count: [AtomicU64; 3],
    layout: BranchLayout,
    /// Conditions that were requested but absent from the inputs.
    pub skipped: Vec<Condition>,
}

impl KVCacheStore {
    pub fn layout(&self) -> &BranchLayout {
        &self.layout
    }

    pub fn entry(&self, block: usize, cond: Condition) -> Option<&BlockKv> {
        self.per_block[block][cond.index()].as_ref()
    }

    pub fn caches_material(&self) -> bool {
        self.material.is_some()
    }

    pub fn cond_forward_count(&self, cond: Condition) -> u64 {
        self.cond_forward_count[cond.index()].load(Ordering::Relaxed)
    }

    pub fn counts(&self) -> [u64; 3] {
        [
            self.cond_forward_count(Condition::Depth),
            self.cond_forward_count(Condition::Normal),
            self.cond_forward_count(Condition::Lighting),
        ]
    }

    pub fn is_empty(&self) -> bool {
        self.material.is_none()
            && self
                .per_block
                .iter()
                .all(|b| b.iter().all(|e| e.is_none()))
    }

    /// Cached K/V for one block, in layout order after the computed rows:
    /// material (when cached) first, then present conditions in block order.
    fn cached_row_blocks(&self, block: usize) -> Vec<&BlockKv> {
        let mut out = Vec::new();
        if let Some(material) = &self.material {
            out.push(&material[block]);
        }
        for cond in CONDITIONS {
            if let Some(kv) = self.per_block[block][cond.index()].as_ref() {
                out.push(kv);
            }
        }
        out
    }
}

fn expected_layout(state: &ModelState, inputs: &CondInputs) -> Result<BranchLayout> {
    let (h, w) = inputs.grid()?;
    let p = state.cfg.patch_size;
    if h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!(
            "grid {h}x{w} is not divisible by patch size {p}"
        )));
    }
    let n = (h / p) * (w / p);
    let cond_lengths = CONDITIONS
        .iter()
        .map(|c| if inputs.condition(*c).is_some() { n } else { 0 })
        .collect();
    Ok(BranchLayout::new(n, n, cond_lengths))
}

/// Run each present condition's branch once through every block and store
/// the per-block K/V pairs. Absent conditions are skipped, not errors.
/// `cache_material` extends the cache to the material block; that is only
/// sound when the material rows' hidden states cannot drift across steps,
/// i.e. for single-block models, and is rejected otherwise.
pub fn precompute_condition_kv(
    state: &ModelState,
    inputs: &CondInputs,
    cache_material: bool,
) -> Result<KVCacheStore> {
    let cfg = &state.cfg;
    if cache_material && cfg.n_blocks != 1 {
        return Err(Error::Cache(format!(
            "material K/V varies across steps once block outputs mix in denoising rows; \
             caching it is exact only for n_blocks = 1 (got {})",
            cfg.n_blocks
        )));
    }
    let layout = expected_layout(state, inputs)?;
    let (h, w) = inputs.grid()?;
    let p = cfg.patch_size;
    let positions = Arc::new((0..(h / p) * (w / p)).collect::<Vec<usize>>());
    let freqs = RopeFrequencies::new(cfg.head_dim(), cfg.rope_base)?;
    let tape = Tape::new();

    let mut per_block: Vec<Vec<Option<BlockKv>>> =
        vec![(0..CONDITIONS.len()).map(|_| None).collect(); cfg.n_blocks];
    let counters = [AtomicU64::new(0), AtomicU64::new(0), AtomicU64::new(0)];
    let mut skipped = Vec::new();

    for cond in CONDITIONS {
        let Some(latent) = inputs.condition(cond) else {
            skipped.push(cond);
            continue;
        };
        counters[cond.index()].fetch_add(1, Ordering::Relaxed);
        let role = match cond {
            Condition::Depth => Role::Depth,
            Condition::Normal => Role::Normal,
            Condition::Lighting => Role::Lighting,
        };
        let mut h_c = model::embed_single_role(&tape, cfg, &state.params, role, latent)?;
        for (bi, bp) in state.params.blocks.iter().enumerate() {
            let (next, kv) = model::cond_block(&tape, cfg, bp, &h_c, cond, &positions, &freqs)?;
            per_block[bi][cond.index()] = Some(kv);
            h_c = next;
        }
    }

    let material = if cache_material {
        let tape = Tape::new();
        let h_m = model::embed_single_role(&tape, cfg, &state.params, Role::Material, &inputs.material)?;
        let mut out = Vec::with_capacity(cfg.n_blocks);
        for bp in &state.params.blocks {
            out.push(model::plain_kv(&tape, cfg, bp, &h_m, &positions, &freqs)?);
        }
        Some(out)
    } else {
        None
    };

    Ok(KVCacheStore {
        per_block,
        material,
        cond_forward_count: counters,
        layout,
        skipped,
    })
}

/// One denoising step against the cache: compute Q/K/V for the noise (and,
/// unless cached, material) rows only, concatenate the stored condition
/// K/V, and return the noise-block velocity.
pub fn cached_forward(
    tape: &Tape,
    state: &ModelState,
    inputs: &CondInputs,
    noise_latent: &Tensor,
    t: f64,
    store: &KVCacheStore,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidValue {
            what: "t",
            value: t,
            detail: "forward timestep must lie in [0, 1]",
        });
    }
    let cfg = &state.cfg;
    let layout = expected_layout(state, inputs)?;
    if layout != store.layout {
        return Err(Error::Cache(format!(
            "store built for layout {:?}, inputs produce {:?}",
            store.layout, layout
        )));
    }
    let grid = inputs.grid()?;
    let p = cfg.patch_size;
    let n_patches = (grid.0 / p) * (grid.1 / p);
    let grid_positions: Vec<usize> = (0..n_patches).collect();

    let noise = model::embed_single_role(tape, cfg, &state.params, Role::Noise, noise_latent)?;
    let t_feat = model::timestep_features(t, cfg.d_model);
    let noise = tape.add_row_vector(&noise, &t_feat)?;

    let (mut h_rows, positions) = if store.caches_material() {
        (noise, Arc::new(grid_positions))
    } else {
        let material =
            model::embed_single_role(tape, cfg, &state.params, Role::Material, &inputs.material)?;
        let rows = tape.concat_rows(&[&noise, &material])?;
        let mut positions = grid_positions.clone();
        positions.extend_from_slice(&grid_positions);
        (rows, Arc::new(positions))
    };

    let freqs = RopeFrequencies::new(cfg.head_dim(), cfg.rope_base)?;
    for (bi, bp) in state.params.blocks.iter().enumerate() {
        let cached = store.cached_row_blocks(bi);
        h_rows = model::computed_rows_block(tape, cfg, bp, &h_rows, &positions, &cached, &freqs)?;
    }
    let noise_rows = tape.slice_rows(&h_rows, 0, layout.n_noise)?;
    model::head_output(tape, cfg, &state.params.head, &noise_rows, grid)
}

/// Euler sampling with the condition branch executed exactly once: the
/// cache is populated at the initial step and reused for every subsequent
/// step. Identical contract (and, in exact arithmetic, identical output)
/// to [`flow::sample_euler`] with the same seed.
pub fn sample_cached(
    state: &ModelState,
    inputs: &CondInputs,
    cfg: &FlowConfig,
    cache_material: bool,
) -> Result<(Tensor, KVCacheStore)> {
    cfg.validate()?;
    let (h, w) = inputs.grid()?;
    let mut rng = Rng::new(cfg.seed);
    let mut x = Tensor::random_normal(vec![h, w], &mut rng);
    let store = precompute_condition_kv(state, inputs, cache_material)?;
    let tape = Tape::new();
    let dt = 1.0 / cfg.num_steps as f64;
    for step in 0..cfg.num_steps {
        let t = 1.0 - step as f64 * dt;
        let v = cached_forward(&tape, state, inputs, &x, t, &store)?;
        x = x.sub(&v.scale(dt))?;
        if !x.all_finite() {
            return Err(Error::NonFiniteState { step });
        }
    }
    Ok((x, store))
}

/// Executed multiply counts for one denoising step, cached vs uncached.
/// Cache precomputation is excluded; it happens once per run, not per step.
pub fn per_step_mul_counts(
    state: &ModelState,
    inputs: &CondInputs,
    t: f64,
) -> Result<(u64, u64)> {
    let (h, w) = inputs.grid()?;
    let mut rng = Rng::new(1);
    let x = Tensor::random_normal(vec![h, w], &mut rng);
    let store = precompute_condition_kv(state, inputs, false)?;

    let tape = Tape::new();
    crate::ops::reset_mul_count();
    cached_forward(&tape, state, inputs, &x, t, &store)?;
    let cached = crate::ops::mul_count();

    crate::ops::reset_mul_count();
    model::forward_full(&tape, &state.cfg, &state.params, &x, inputs, t, None)?;
    let uncached = crate::ops::mul_count();
    Ok((cached, uncached))
}

#[derive(Debug, Clone)]
pub struct KvBenchRecord {
    pub steps: usize,
    pub runs: usize,
    pub cached_ms: f64,
    pub uncached_ms: f64,
    pub speedup: f64,
    pub max_abs_diff: f64,
}

impl KvBenchRecord {
    /// The one-line machine-readable record emitted by `bench-kv`.
    pub fn record_line(&self) -> String {
        format!(
            "steps={} cached_ms={:.3} uncached_ms={:.3} speedup={:.3} maxdiff={:e}",
            self.steps, self.cached_ms, self.uncached_ms, self.speedup, self.max_abs_diff
        )
    }
}

fn median_ms(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

/// Median-of-`runs` wall-clock comparison of cached vs uncached sampling,
/// warm (one untimed run each), single-threaded.
pub fn bench_kv(
    state: &ModelState,
    inputs: &CondInputs,
    cfg: &FlowConfig,
    runs: usize,
) -> Result<KvBenchRecord> {
    if runs == 0 {
        return Err(Error::Config("bench needs at least one run".into()));
    }
    let model = state.conditioned(inputs);
    let uncached_out = flow::sample_euler(&model, cfg)?;
    let (cached_out, _) = sample_cached(state, inputs, cfg, false)?;
    let max_abs_diff = uncached_out.max_abs_diff(&cached_out);

    let mut uncached_times = Vec::with_capacity(runs);
    let mut cached_times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        let out = flow::sample_euler(&model, cfg)?;
        uncached_times.push(start.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);

        let start = Instant::now();
        let out = sample_cached(state, inputs, cfg, false)?;
        cached_times.push(start.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    let cached_ms = median_ms(cached_times);
    let uncached_ms = median_ms(uncached_times);
    Ok(KvBenchRecord {
        steps: cfg.num_steps,
        runs,
        cached_ms,
        uncached_ms,
        speedup: uncached_ms / cached_ms,
        max_abs_diff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic_dataset;
    use crate::model::{forward_full, ForwardTrace, ModelConfig};

    fn test_state(seed: u64, cfg: ModelConfig) -> ModelState {
        let mut rng = Rng::new(seed);
        let mut state = ModelState::new(cfg, &mut rng).unwrap();
        // randomize so adapters and head are live
        let mut r2 = Rng::new(seed.wrapping_add(1));
        state.params = state
            .params
            .map(&mut |_, t| Tensor::random_uniform(t.shape().to_vec(), -0.4, 0.4, &mut r2));
        state
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_blocks: 2,
            n_heads: 2,
            lora_rank: 2,
            grid_h: 4,
            grid_w: 4,
            ..ModelConfig::default()
        }
    }

    fn inputs_for(cfg: &ModelConfig, seed: u64) -> CondInputs {
        let mut rng = Rng::new(seed);
        synthetic_dataset(1, cfg.grid_h, cfg.grid_w, &mut rng).unwrap().samples[0].cond_inputs()
    }

    #[test]
    fn precompute_is_deterministic() {
        let state = test_state(1, small_cfg());
        let inputs = inputs_for(&state.cfg, 2);
        let a = precompute_condition_kv(&state, &inputs, false).unwrap();
        let b = precompute_condition_kv(&state, &inputs, false).unwrap();
        for bi in 0..state.cfg.n_blocks {
            for cond in CONDITIONS {
                let (x, y) = (a.entry(bi, cond).unwrap(), b.entry(bi, cond).unwrap());
                assert!(x.k.same_bits(&y.k) && x.v.same_bits(&y.v));
            }
        }
    }

    #[test]
    fn store_matches_condition_slices_of_uncached_forward() {
        let state = test_state(3, small_cfg());
        let inputs = inputs_for(&state.cfg, 4);
        let store = precompute_condition_kv(&state, &inputs, false).unwrap();

        let mut rng = Rng::new(5);
        let x = Tensor::random_normal(vec![state.cfg.grid_h, state.cfg.grid_w], &mut rng);
        let tape = Tape::new();
        let mut trace = ForwardTrace::default();
        forward_full(
            &tape,
            &state.cfg,
            &state.params,
            &x,
            &inputs,
            0.5,
            Some(&mut trace),
        )
        .unwrap();

        for (bi, block_kv) in trace.blocks.iter().enumerate() {
            for (ci, cond) in CONDITIONS.iter().enumerate() {
                let range = store.layout().cond_range(ci);
                let cached = store.entry(bi, *cond).unwrap();
                for (local, row) in range.clone().enumerate() {
                    assert_eq!(cached.k.row(local), block_kv.k.row(row), "K b{bi} r{row}");
                    assert_eq!(cached.v.row(local), block_kv.v.row(row), "V b{bi} r{row}");
                }
            }
        }
    }

    #[test]
    fn absent_conditions_are_skipped_not_errors() {
        let state = test_state(6, small_cfg());
        let inputs = CondInputs {
            material: inputs_for(&state.cfg, 7).material,
            depth: None,
            normal: None,
            lighting: None,
        };
        let store = precompute_condition_kv(&state, &inputs, false).unwrap();
        assert!(store.is_empty());
        assert_eq!(store.skipped.len(), 3);
        assert_eq!(store.counts(), [0, 0, 0]);
    }

    #[test]
    fn cached_forward_equals_uncached_forward() {
        let state = test_state(8, small_cfg());
        let inputs = inputs_for(&state.cfg, 9);
        let store = precompute_condition_kv(&state, &inputs, false).unwrap();
        let mut rng = Rng::new(10);
        let x = Tensor::random_normal(vec![state.cfg.grid_h, state.cfg.grid_w], &mut rng);
        let tape = Tape::new();
        for t in [0.0, 0.31, 1.0] {
            let fast = cached_forward(&tape, &state, &inputs, &x, t, &store).unwrap();
            let full =
                forward_full(&tape, &state.cfg, &state.params, &x, &inputs, t, None).unwrap();
            assert!(
                fast.max_abs_diff(&full) < 1e-10,
                "t={t}: {}",
                fast.max_abs_diff(&full)
            );
        }
    }

    #[test]
    fn leave_one_out_is_consistent_with_uncached() {
        let state = test_state(11, small_cfg());
        let inputs = inputs_for(&state.cfg, 12).without(Condition::Normal);
        let store = precompute_condition_kv(&state, &inputs, false).unwrap();
        assert_eq!(store.skipped, vec![Condition::Normal]);
        let mut rng = Rng::new(13);
        let x = Tensor::random_normal(vec![state.cfg.grid_h, state.cfg.grid_w], &mut rng);
        let tape = Tape::new();
        let fast = cached_forward(&tape, &state, &inputs, &x, 0.4, &store).unwrap();
        let full = forward_full(&tape, &state.cfg, &state.params, &x, &inputs, 0.4, None).unwrap();
        assert!(fast.max_abs_diff(&full) < 1e-10);
    }

    #[test]
    fn store_layout_mismatch_is_an_error() {
        let state = test_state(14, small_cfg());
        let inputs = inputs_for(&state.cfg, 15);
        let store = precompute_condition_kv(&state, &inputs, false).unwrap();
        let dropped = inputs.without(Condition::Depth);
        let tape = Tape::new();
        let x = Tensor::zeros(vec![state.cfg.grid_h, state.cfg.grid_w]);
        let err = cached_forward(&tape, &state, &dropped, &x, 0.5, &store).unwrap_err();
        assert!(matches!(err, Error::Cache(_)));
    }

    #[test]
    fn cached_sampling_matches_euler_and_counts_one_forward() {
        let state = test_state(16, small_cfg());
        let inputs = inputs_for(&state.cfg, 17);
        for (seed, steps) in [(1u64, 1usize), (2, 5), (3, 25)] {
            let cfg = FlowConfig {
                num_steps: steps,
                seed,
            };
            let uncached = flow::sample_euler(&state.conditioned(&inputs), &cfg).unwrap();
            let (cached, store) = sample_cached(&state, &inputs, &cfg, false).unwrap();
            assert!(
                cached.max_abs_diff(&uncached) < 1e-10,
                "steps={steps} diff={}",
                cached.max_abs_diff(&uncached)
            );
            assert_eq!(store.counts(), [1, 1, 1], "steps={steps}");
        }
    }

    #[test]
    fn per_step_cached_cost_is_strictly_lower() {
        let state = test_state(18, small_cfg());
        let inputs = inputs_for(&state.cfg, 19);
        let (cached, uncached) = per_step_mul_counts(&state, &inputs, 0.5).unwrap();
        assert!(cached < uncached, "{cached} vs {uncached}");
    }

    #[test]
    fn material_caching_requires_a_single_block() {
        let state = test_state(20, small_cfg());
        let inputs = inputs_for(&state.cfg, 21);
        let err = precompute_condition_kv(&state, &inputs, true).unwrap_err();
        assert!(matches!(err, Error::Cache(_)));
    }

    #[test]
    fn material_caching_is_exact_for_one_block() {
        let cfg = ModelConfig {
            n_blocks: 1,
            ..small_cfg()
        };
        let state = test_state(22, cfg);
        let inputs = inputs_for(&state.cfg, 23);
        let flow_cfg = FlowConfig {
            num_steps: 5,
            seed: 7,
        };
        let uncached = flow::sample_euler(&state.conditioned(&inputs), &flow_cfg).unwrap();
        let (cached, store) = sample_cached(&state, &inputs, &flow_cfg, true).unwrap();
        assert!(store.caches_material());
        assert!(
            cached.max_abs_diff(&uncached) < 1e-10,
            "diff {}",
            cached.max_abs_diff(&uncached)
        );
    }
}

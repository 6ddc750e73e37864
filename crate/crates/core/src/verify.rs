//! Named property checks, runnable individually or as a suite.
//!
//! Each check re-derives its expectation from an independent route (brute
//! force enumeration, finite differences, an algebraic identity) and
//! compares the implementation against it. The CLI `verify` command drives
//! this registry; the heavier acceptance-grade versions of some of these
//! live in the integration test suite.

use std::sync::Arc;

use crate::attention::{
    attend, build_causal_mask, build_scma_mask, AttentionMask, BranchLayout,
    RopeFrequencies,
};
use crate::dataset::{synthetic_dataset, CondInputs};
use crate::ensemble::{
    align_depth, depth_objective, depth_objective_parts, ensemble_normals, lighting_residual,
    merge_depth, reconstruct, AffineParams, DepthPredictionSet, NormalPredictionSet,
};
use crate::error::Error;
use crate::flow::{self, FlowConfig, VelocityModel};
use crate::kvcache;
use crate::model::{self, ForwardTrace, ModelConfig, ModelState, TrainOptions};
use crate::ops;
use crate::rng::Rng;
use crate::shader_lora::{lora_delta, LoraAdapter, CONDITIONS};
use crate::tape::{finite_diff_grad, Tape};
use crate::tensor::Tensor;

type CheckResult = std::result::Result<(), String>;

pub struct Check {
    pub name: &'static str,
    pub run: fn() -> CheckResult,
}

pub fn all_checks() -> Vec<Check> {
    vec![
        Check { name: "tensor/matmul-oracle", run: matmul_oracle },
        Check { name: "tensor/softmax-rows", run: softmax_rows },
        Check { name: "tensor/layer-norm-moments", run: layer_norm_moments },
        Check { name: "tensor/backward-vs-fd", run: backward_vs_fd },
        Check { name: "attention/scma-oracle", run: scma_oracle },
        Check { name: "attention/scma-isolation", run: scma_isolation },
        Check { name: "attention/aggregation", run: aggregation },
        Check { name: "attention/causal-rows", run: causal_rows },
        Check { name: "attention/rope-relative", run: rope_relative },
        Check { name: "lora/branch-isolation", run: branch_isolation },
        Check { name: "lora/low-rank", run: low_rank },
        Check { name: "lora/strength-linearity", run: strength_linearity },
        Check { name: "lora/zero-init-neutrality", run: zero_init_neutrality },
        Check { name: "flow/path-endpoints", run: path_endpoints },
        Check { name: "flow/oracle-recovery", run: oracle_recovery },
        Check { name: "flow/loss-positivity", run: loss_positivity },
        Check { name: "flow/sampler-determinism", run: sampler_determinism },
        Check { name: "model/condition-t-invariance", run: condition_t_invariance },
        Check { name: "model/gradcheck-small", run: gradcheck_small },
        Check { name: "model/frozen-base", run: frozen_base },
        Check { name: "model/train-determinism", run: train_determinism },
        Check { name: "kvcache/timestep-guard", run: kvcache_timestep_guard },
        Check { name: "kvcache/equivalence", run: kvcache_equivalence },
        Check { name: "kvcache/single-computation", run: kvcache_single_computation },
        Check { name: "kvcache/monotone-cost", run: kvcache_monotone_cost },
        Check { name: "ensemble/align-monotone", run: align_monotone },
        Check { name: "ensemble/gauge", run: gauge },
        Check { name: "ensemble/median-robustness", run: median_robustness },
        Check { name: "ensemble/normals-membership", run: normals_membership },
        Check { name: "ensemble/lighting-roundtrip", run: lighting_roundtrip },
    ]
}

/// Run all checks whose name contains `filter` (all of them when `None`).
/// Returns `(name, outcome)` pairs.
pub fn run_checks(filter: Option<&str>) -> Vec<(&'static str, CheckResult)> {
    all_checks()
        .into_iter()
        .filter(|c| filter.is_none_or(|f| c.name.contains(f)))
        .map(|c| (c.name, (c.run)()))
        .collect()
}

fn es(e: Error) -> String {
    e.to_string()
}

// ---- tensor ---------------------------------------------------------------

fn matmul_oracle() -> CheckResult {
    let mut rng = Rng::new(101);
    let tape = Tape::new();
    for trial in 0..50 {
        let m = 1 + rng.below(8);
        let k = 1 + rng.below(8);
        let n = 1 + rng.below(8);
        let a = Tensor::random_uniform(vec![m, k], -10.0, 10.0, &mut rng);
        let b = Tensor::random_uniform(vec![k, n], -10.0, 10.0, &mut rng);
        let got = tape.matmul(&a, &b).map_err(es)?;
        // naive i-j-k oracle, deliberately a different loop order
        for i in 0..m {
            for j in 0..n {
                let mut want = 0.0;
                for l in 0..k {
                    want += a.at(&[i, l]) * b.at(&[l, j]);
                }
                let diff = (got.at(&[i, j]) - want).abs();
                if diff > 1e-12 {
                    return Err(format!("trial {trial}: ({i},{j}) off by {diff}"));
                }
            }
        }
    }
    Ok(())
}

fn softmax_rows() -> CheckResult {
    let mut rng = Rng::new(102);
    let tape = Tape::new();
    for _ in 0..20 {
        let rows = 1 + rng.below(5);
        let cols = 1 + rng.below(6);
        let a = Tensor::random_uniform(vec![rows, cols], -4.0, 4.0, &mut rng);
        let y = tape.softmax_rows(&a, None).map_err(es)?;
        for r in 0..rows {
            let sum: f64 = y.row(r).iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(format!("row {r} sums to {sum}"));
            }
        }
        let c = rng.uniform_in(-5.0, 5.0);
        let shifted = tape.softmax_rows(&a.map(|v| v + c), None).map_err(es)?;
        if y.max_abs_diff(&shifted) > 1e-12 {
            return Err(format!(
                "shift by {c} moved softmax by {}",
                y.max_abs_diff(&shifted)
            ));
        }
    }
    Ok(())
}

fn layer_norm_moments() -> CheckResult {
    let mut rng = Rng::new(103);
    let tape = Tape::new();
    for _ in 0..20 {
        let rows = 1 + rng.below(4);
        let d = 2 + rng.below(14);
        let a = Tensor::random_uniform(vec![rows, d], -3.0, 3.0, &mut rng);
        let y = tape.layer_norm(&a, 1e-5).map_err(es)?;
        for r in 0..rows {
            let mean: f64 = y.row(r).iter().sum::<f64>() / d as f64;
            if mean.abs() > 1e-10 {
                return Err(format!("row {r} mean {mean}"));
            }
        }
    }
    Ok(())
}

enum GraphOp {
    Add(usize),
    Sub(usize),
    Mul(usize),
    Scale(f64),
    Gelu,
    LayerNorm,
    Softmax,
    MatConst(Tensor),
    AddRow(Tensor),
}

fn random_graph(rng: &mut Rng) -> (Vec<Tensor>, Vec<GraphOp>) {
    let n_leaves = 1 + rng.below(2);
    let leaves: Vec<Tensor> = (0..n_leaves)
        .map(|_| Tensor::random_uniform(vec![2, 3], -1.0, 1.0, rng))
        .collect();
    let depth = 1 + rng.below(6);
    let ops = (0..depth)
        .map(|_| match rng.below(9) {
            0 => GraphOp::Add(rng.below(n_leaves)),
            1 => GraphOp::Sub(rng.below(n_leaves)),
            2 => GraphOp::Mul(rng.below(n_leaves)),
            3 => GraphOp::Scale(rng.uniform_in(-2.0, 2.0)),
            4 => GraphOp::Gelu,
            5 => GraphOp::LayerNorm,
            6 => GraphOp::Softmax,
            7 => GraphOp::MatConst(Tensor::random_uniform(vec![3, 3], -0.7, 0.7, rng)),
            _ => GraphOp::AddRow(Tensor::random_uniform(vec![3], -1.0, 1.0, rng)),
        })
        .collect();
    (leaves, ops)
}

fn eval_graph(
    tape: &Tape,
    leaves: &[Tensor],
    ops: &[GraphOp],
) -> crate::error::Result<Tensor> {
    let mut v = leaves[0].detached();
    if leaves[0].tracked() {
        v = leaves[0].clone();
    }
    let mut v = v;
    for op in ops {
        v = match op {
            GraphOp::Add(i) => tape.add(&v, &leaves[*i])?,
            GraphOp::Sub(i) => tape.sub(&v, &leaves[*i])?,
            GraphOp::Mul(i) => tape.mul(&v, &leaves[*i])?,
            GraphOp::Scale(c) => tape.scale(&v, *c)?,
            GraphOp::Gelu => tape.gelu(&v)?,
            GraphOp::LayerNorm => tape.layer_norm(&v, 1e-5)?,
            GraphOp::Softmax => tape.softmax_rows(&v, None)?,
            GraphOp::MatConst(m) => tape.matmul(&v, m)?,
            GraphOp::AddRow(row) => tape.add_row_vector(&v, row)?,
        };
    }
    tape.mean(&v)
}

fn backward_vs_fd() -> CheckResult {
    let mut rng = Rng::new(104);
    for graph_idx in 0..20 {
        let (leaves, ops) = random_graph(&mut rng);
        let tape = Tape::new();
        let tracked: Vec<Tensor> = leaves.iter().map(|l| tape.leaf(l)).collect();
        let loss = eval_graph(&tape, &tracked, &ops).map_err(es)?;
        tape.backward(&loss).map_err(es)?;
        for (li, leaf) in leaves.iter().enumerate() {
            let grad = tape.grad(&tracked[li]).ok_or("missing grad")?;
            let fd = finite_diff_grad(
                |x| {
                    let tape = Tape::new();
                    let mut probe: Vec<Tensor> = leaves.iter().map(|l| l.detached()).collect();
                    probe[li] = x.detached();
                    eval_graph(&tape, &probe, &ops)?.scalar_value()
                },
                leaf,
                1e-5,
            )
            .map_err(es)?;
            for (g, f) in grad.data().iter().zip(fd.data()) {
                let denom = g.abs().max(f.abs()).max(1e-6);
                if (g - f).abs() / denom > 1e-4 {
                    return Err(format!(
                        "graph {graph_idx} leaf {li}: tape {g} vs fd {f}"
                    ));
                }
            }
        }
    }
    Ok(())
}

// ---- attention --------------------------------------------------------------

/// Compare a mask builder against a brute-force block-membership oracle on
/// every block-size tuple in `{0..=max_extent}^5`. Returns the first
/// mismatch, if any. Public so a deliberately broken builder can be shown
/// to fail.
pub fn scma_oracle_mismatch(
    build: &dyn Fn(&BranchLayout) -> AttentionMask,
    max_extent: usize,
) -> Option<String> {
    let e = max_extent + 1;
    for idx in 0..e.pow(5) {
        let mut rem = idx;
        let mut dims = [0usize; 5];
        for d in dims.iter_mut() {
            *d = rem % e;
            rem /= e;
        }
        let layout = BranchLayout::new(dims[0], dims[1], vec![dims[2], dims[3], dims[4]]);
        // independent membership tags: 0 noise, 1 material, 2+k condition k
        let mut tags = Vec::with_capacity(layout.total());
        tags.extend(std::iter::repeat_n(0u8, dims[0]));
        tags.extend(std::iter::repeat_n(1u8, dims[1]));
        for (k, len) in dims[2..].iter().enumerate() {
            tags.extend(std::iter::repeat_n(2 + k as u8, *len));
        }
        let mask = build(&layout);
        if mask.size() != layout.total() {
            return Some(format!("layout {dims:?}: mask size {}", mask.size()));
        }
        for i in 0..layout.total() {
            for j in 0..layout.total() {
                let want = tags[i] <= 1 || tags[i] == tags[j];
                if mask.is_allowed(i, j) != want {
                    return Some(format!(
                        "layout {dims:?}: entry ({i},{j}) is {}, oracle says {}",
                        mask.is_allowed(i, j),
                        want
                    ));
                }
            }
        }
    }
    None
}

fn scma_oracle() -> CheckResult {
    match scma_oracle_mismatch(&build_scma_mask, 4) {
        None => Ok(()),
        Some(m) => Err(m),
    }
}

fn scma_isolation() -> CheckResult {
    let mut rng = Rng::new(105);
    let layout = BranchLayout::new(2, 2, vec![3, 2, 2]);
    let n = layout.total();
    let d = 4;
    let mask = build_scma_mask(&layout);
    let tape = Tape::new();
    let q = Tensor::random_normal(vec![n, d], &mut rng);
    let k = Tensor::random_normal(vec![n, d], &mut rng);
    let v = Tensor::random_normal(vec![n, d], &mut rng);
    let base = attend(&tape, &q, &k, &v, Some(mask.entries())).map_err(es)?;
    for a in 0..3 {
        let range_a = layout.cond_range(a);
        let mut v2 = v.data().to_vec();
        for i in range_a.clone() {
            for j in 0..d {
                v2[i * d + j] += 7.5;
            }
        }
        let v2 = Tensor::internal(vec![n, d], v2, None);
        let out = attend(&tape, &q, &k, &v2, Some(mask.entries())).map_err(es)?;
        for b in 0..3 {
            if b == a {
                continue;
            }
            for i in layout.cond_range(b) {
                if base.row(i) != out.row(i) {
                    return Err(format!(
                        "perturbing block {a} moved condition block {b} row {i}"
                    ));
                }
            }
        }
    }
    Ok(())
}

fn aggregation() -> CheckResult {
    let mut rng = Rng::new(106);
    let layout = BranchLayout::new(2, 2, vec![2, 2, 2]);
    let n = layout.total();
    let d = 4;
    let mask = build_scma_mask(&layout);
    let tape = Tape::new();
    let q = Tensor::random_normal(vec![n, d], &mut rng);
    let k = Tensor::random_normal(vec![n, d], &mut rng);
    let v = Tensor::random_normal(vec![n, d], &mut rng);
    let base = attend(&tape, &q, &k, &v, Some(mask.entries())).map_err(es)?;
    let blocks: Vec<std::ops::Range<usize>> = vec![
        0..layout.n_noise,
        layout.n_noise..layout.nm_len(),
        layout.cond_range(0),
        layout.cond_range(1),
        layout.cond_range(2),
    ];
    for (bi, range) in blocks.into_iter().enumerate() {
        let mut v2 = v.data().to_vec();
        for i in range {
            for j in 0..d {
                v2[i * d + j] += 3.0;
            }
        }
        let v2 = Tensor::internal(vec![n, d], v2, None);
        let out = attend(&tape, &q, &k, &v2, Some(mask.entries())).map_err(es)?;
        let moved = (0..layout.n_noise).any(|i| base.row(i) != out.row(i));
        if !moved {
            return Err(format!("noise rows ignored a perturbation of block {bi}"));
        }
    }
    Ok(())
}

fn causal_rows() -> CheckResult {
    let mut rng = Rng::new(107);
    let n = 6;
    let d = 4;
    let mask = build_causal_mask(n);
    let tape = Tape::new();
    let q = Tensor::random_normal(vec![n, d], &mut rng);
    let k = Tensor::random_normal(vec![n, d], &mut rng);
    let v = Tensor::random_normal(vec![n, d], &mut rng);
    let base = attend(&tape, &q, &k, &v, Some(mask.entries())).map_err(es)?;
    for cut in 0..n - 1 {
        // scribble over all rows strictly after `cut`
        let mut k2 = k.data().to_vec();
        let mut v2 = v.data().to_vec();
        for i in cut + 1..n {
            for j in 0..d {
                k2[i * d + j] = rng.uniform_in(-9.0, 9.0);
                v2[i * d + j] = rng.uniform_in(-9.0, 9.0);
            }
        }
        let out = attend(
            &tape,
            &q,
            &Tensor::internal(vec![n, d], k2, None),
            &Tensor::internal(vec![n, d], v2, None),
            Some(mask.entries()),
        )
        .map_err(es)?;
        for i in 0..=cut {
            if base.row(i) != out.row(i) {
                return Err(format!("row {i} saw a change in rows > {cut}"));
            }
        }
    }
    Ok(())
}

fn rope_relative() -> CheckResult {
    let mut rng = Rng::new(108);
    let d = 8;
    let freqs = RopeFrequencies::new(d, 10_000.0).map_err(es)?;
    let tape = Tape::new();
    for trial in 0..50 {
        let q = Tensor::random_normal(vec![1, d], &mut rng);
        let k = Tensor::random_normal(vec![1, d], &mut rng);
        let p1 = rng.below(64);
        let p2 = rng.below(64);
        let s = rng.below(512);
        let dot = |a: &Tensor, b: &Tensor| -> f64 {
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
        };
        let rot = |x: &Tensor, p: usize| {
            crate::attention::apply_rope(&tape, x, &Arc::new(vec![p]), &freqs)
        };
        let base = dot(&rot(&q, p1).map_err(es)?, &rot(&k, p2).map_err(es)?);
        let shifted = dot(&rot(&q, p1 + s).map_err(es)?, &rot(&k, p2 + s).map_err(es)?);
        if (base - shifted).abs() > 1e-9 {
            return Err(format!(
                "trial {trial}: inner product moved by {}",
                (base - shifted).abs()
            ));
        }
    }
    Ok(())
}

// ---- shader lora -------------------------------------------------------------

fn branch_isolation() -> CheckResult {
    let mut rng = Rng::new(109);
    let d = 8;
    let layout = BranchLayout::new(3, 3, vec![2, 2, 2]);
    for trial in 0..20 {
        let tape = Tape::new();
        let z = Tensor::random_normal(vec![layout.total(), d], &mut rng);
        let weights = crate::shader_lora::ProjectionWeights::init(d, &mut rng);
        let mut adapters = crate::shader_lora::ConditionAdapterSet::init(d, 3, &mut rng)
            .map_err(es)?;
        let (q0, k0, v0) =
            crate::shader_lora::project_branches(&tape, &z, &layout, &weights, &adapters)
                .map_err(es)?;
        for cond in CONDITIONS {
            let triple = adapters.triple_mut(cond);
            triple.q.b = Tensor::random_normal(vec![d, 3], &mut rng);
            triple.k.b = Tensor::random_normal(vec![d, 3], &mut rng);
            triple.v.b = Tensor::random_normal(vec![d, 3], &mut rng);
        }
        let (q1, k1, v1) =
            crate::shader_lora::project_branches(&tape, &z, &layout, &weights, &adapters)
                .map_err(es)?;
        for (a, b) in [(&q0, &q1), (&k0, &k1), (&v0, &v1)] {
            for i in 0..layout.nm_len() {
                for j in 0..d {
                    if a.at(&[i, j]).to_bits() != b.at(&[i, j]).to_bits() {
                        return Err(format!("trial {trial}: row {i} changed"));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations. Test-grade
/// and O(n^3) per sweep, which is plenty at adapter widths.
pub fn symmetric_eigenvalues(mut a: Vec<f64>, n: usize) -> Vec<f64> {
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                off = off.max(a[p * n + q].abs());
            }
        }
        if off < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let tau = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

/// Singular values by one-sided Jacobi (Hestenes) rotations: orthogonalize
/// column pairs until convergence; the singular values are the column
/// norms. Resolves an exactly rank-deficient matrix down to machine noise,
/// which the Gram-matrix route cannot.
fn singular_values(m: &Tensor) -> Vec<f64> {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let mut col: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| m.data()[i * cols + j]).collect())
        .collect();
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha: f64 = col[p].iter().map(|x| x * x).sum();
                let beta: f64 = col[q].iter().map(|x| x * x).sum();
                let gamma: f64 = col[p].iter().zip(&col[q]).map(|(x, y)| x * y).sum();
                if gamma * gamma <= 1e-28 * alpha * beta || gamma == 0.0 {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let vp = col[p][i];
                    let vq = col[q][i];
                    col[p][i] = c * vp - s * vq;
                    col[q][i] = s * vp + c * vq;
                }
                rotated = true;
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = col
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

fn low_rank() -> CheckResult {
    let mut rng = Rng::new(110);
    for rank in [1usize, 2, 3] {
        let d = 8;
        let mut adapter = LoraAdapter::init("probe.q".into(), d, rank, 1.3, &mut rng)
            .map_err(es)?;
        adapter.b = Tensor::random_normal(vec![d, rank], &mut rng);
        let eff = adapter.effective_matrix();
        let sv = singular_values(&eff);
        let largest = sv[0];
        if largest <= 0.0 {
            return Err("degenerate adapter draw".into());
        }
        for (i, s) in sv.iter().enumerate().skip(rank) {
            if *s > 1e-10 * largest {
                return Err(format!(
                    "rank {rank}: singular value {i} is {s} (largest {largest})"
                ));
            }
        }
    }
    Ok(())
}

fn strength_linearity() -> CheckResult {
    let mut rng = Rng::new(111);
    let d = 8;
    let tape = Tape::new();
    let mut adapter = LoraAdapter::init("probe.v".into(), d, 2, 0.8, &mut rng).map_err(es)?;
    adapter.b = Tensor::random_normal(vec![d, 2], &mut rng);
    let z = Tensor::random_normal(vec![5, d], &mut rng);
    let once = lora_delta(&tape, &z, &adapter).map_err(es)?;
    adapter.strength *= 2.0;
    let twice = lora_delta(&tape, &z, &adapter).map_err(es)?;
    if !twice.same_bits(&once.scale(2.0)) {
        return Err("delta(2s) != 2 delta(s) bitwise".into());
    }
    Ok(())
}

fn zero_init_neutrality() -> CheckResult {
    let cfg = small_model_cfg();
    let mut rng = Rng::new(112);
    let state_a = ModelState::new(cfg.clone(), &mut rng).map_err(es)?;
    // same base draws, different adapter A draws: outputs must agree because
    // B = 0 makes every fresh adapter a no-op
    let mut state_b = state_a.clone();
    let mut other = Rng::new(999);
    state_b.params = state_b.params.map(&mut |name, t| {
        if name.contains(".adapter.") && name.ends_with(".a") {
            Tensor::random_uniform(t.shape().to_vec(), -0.5, 0.5, &mut other)
        } else {
            t.detached()
        }
    });
    let inputs = toy_inputs(&cfg, 5);
    let mut r = Rng::new(6);
    let x = Tensor::random_normal(vec![cfg.grid_h, cfg.grid_w], &mut r);
    let tape = Tape::new();
    let va = model::forward_full(&tape, &cfg, &state_a.params, &x, &inputs, 0.5, None)
        .map_err(es)?;
    let vb = model::forward_full(&tape, &cfg, &state_b.params, &x, &inputs, 0.5, None)
        .map_err(es)?;
    if va.max_abs_diff(&vb) > 1e-12 {
        return Err(format!("fresh adapters changed output by {}", va.max_abs_diff(&vb)));
    }
    Ok(())
}

// ---- flow ---------------------------------------------------------------------

struct OracleVelocity {
    x0: Tensor,
    eps: Tensor,
}

impl VelocityModel for OracleVelocity {
    fn velocity(&self, _tape: &Tape, _xt: &Tensor, _t: f64) -> crate::error::Result<Tensor> {
        self.eps.sub(&self.x0)
    }
    fn latent_shape(&self) -> Vec<usize> {
        self.x0.shape().to_vec()
    }
}

fn path_endpoints() -> CheckResult {
    let mut rng = Rng::new(113);
    let x0 = Tensor::random_normal(vec![4, 4], &mut rng);
    let eps = Tensor::random_normal(vec![4, 4], &mut rng);
    if !flow::flow_path(&x0, &eps, 0.0).map_err(es)?.same_values(&x0) {
        return Err("t = 0 does not return x0".into());
    }
    if !flow::flow_path(&x0, &eps, 1.0).map_err(es)?.same_values(&eps) {
        return Err("t = 1 does not return eps".into());
    }
    Ok(())
}

fn oracle_recovery() -> CheckResult {
    let mut rng = Rng::new(114);
    let x0 = Tensor::random_normal(vec![3, 3], &mut rng);
    for steps in [1usize, 5, 25] {
        let cfg = FlowConfig {
            num_steps: steps,
            seed: 42,
        };
        let mut probe = Rng::new(cfg.seed);
        let eps = Tensor::random_normal(vec![3, 3], &mut probe);
        let model = OracleVelocity {
            x0: x0.detached(),
            eps,
        };
        let out = flow::sample_euler(&model, &cfg).map_err(es)?;
        let diff = out.max_abs_diff(&x0);
        if diff > 1e-10 {
            return Err(format!("steps {steps}: recovery error {diff}"));
        }
    }
    Ok(())
}

fn loss_positivity() -> CheckResult {
    let mut rng = Rng::new(115);
    let x0 = Tensor::random_normal(vec![5], &mut rng);
    let eps = Tensor::random_normal(vec![5], &mut rng);
    let exact = OracleVelocity {
        x0: x0.detached(),
        eps: eps.detached(),
    };
    let tape = Tape::new();
    let zero_loss = flow::cfm_loss_at(&tape, &exact, &x0, &eps, 0.3)
        .map_err(es)?
        .scalar_value()
        .map_err(es)?;
    if zero_loss != 0.0 {
        return Err(format!("perfect predictor scored {zero_loss}"));
    }
    let wrong = OracleVelocity {
        x0: x0.map(|v| v + 1.0),
        eps: eps.detached(),
    };
    let loss = flow::cfm_loss_at(&tape, &wrong, &x0, &eps, 0.3)
        .map_err(es)?
        .scalar_value()
        .map_err(es)?;
    if loss <= 0.0 {
        return Err(format!("mismatched predictor scored {loss}"));
    }
    Ok(())
}

fn sampler_determinism() -> CheckResult {
    let mut rng = Rng::new(116);
    let x0 = Tensor::random_normal(vec![3, 3], &mut rng);
    let mut probe = Rng::new(7);
    let eps = Tensor::random_normal(vec![3, 3], &mut probe);
    let model = OracleVelocity { x0, eps };
    let cfg = FlowConfig {
        num_steps: 25,
        seed: 7,
    };
    let a = flow::sample_euler(&model, &cfg).map_err(es)?;
    let b = flow::sample_euler(&model, &cfg).map_err(es)?;
    if !a.same_bits(&b) {
        return Err("two runs with one seed disagree".into());
    }
    Ok(())
}

// ---- model ----------------------------------------------------------------------

fn small_model_cfg() -> ModelConfig {
    ModelConfig {
        d_model: 4,
        n_blocks: 1,
        n_heads: 1,
        lora_rank: 2,
        patch_size: 1,
        grid_h: 2,
        grid_w: 2,
        mlp_hidden_mult: 2,
        ..ModelConfig::default()
    }
}

fn toy_inputs(cfg: &ModelConfig, seed: u64) -> CondInputs {
    let mut rng = Rng::new(seed);
    synthetic_dataset(1, cfg.grid_h, cfg.grid_w, &mut rng)
        .expect("synthetic data")
        .samples[0]
        .cond_inputs()
}

fn randomized_state(cfg: ModelConfig, seed: u64) -> ModelState {
    let mut rng = Rng::new(seed);
    let mut state = ModelState::new(cfg, &mut rng).expect("config validates");
    let mut r2 = Rng::new(seed.wrapping_add(1));
    state.params = state
        .params
        .map(&mut |_, t| Tensor::random_uniform(t.shape().to_vec(), -0.4, 0.4, &mut r2));
    state
}

fn condition_t_invariance() -> CheckResult {
    let cfg = small_model_cfg();
    let state = randomized_state(cfg.clone(), 117);
    let inputs = toy_inputs(&cfg, 8);
    let mut rng = Rng::new(9);
    let x = Tensor::random_normal(vec![cfg.grid_h, cfg.grid_w], &mut rng);
    let layout = BranchLayout::new(4, 4, vec![4, 4, 4]);
    let run = |t: f64| -> crate::error::Result<ForwardTrace> {
        let tape = Tape::new();
        let mut trace = ForwardTrace::default();
        model::forward_full(&tape, &cfg, &state.params, &x, &inputs, t, Some(&mut trace))?;
        Ok(trace)
    };
    let reference = run(0.0).map_err(es)?;
    for t in [0.37, 1.0] {
        let other = run(t).map_err(es)?;
        for (bi, (a, b)) in reference.blocks.iter().zip(&other.blocks).enumerate() {
            for k in 0..3 {
                for i in layout.cond_range(k) {
                    if a.k.row(i) != b.k.row(i) || a.v.row(i) != b.v.row(i) {
                        return Err(format!("block {bi} condition row {i} moved with t={t}"));
                    }
                }
            }
        }
    }
    Ok(())
}

fn gradcheck_small() -> CheckResult {
    let cfg = small_model_cfg();
    let state = randomized_state(cfg.clone(), 118);
    let inputs = toy_inputs(&cfg, 10);
    let mut rng = Rng::new(11);
    let target = Tensor::random_normal(vec![cfg.grid_h, cfg.grid_w], &mut rng);
    let eps = Tensor::random_normal(vec![cfg.grid_h, cfg.grid_w], &mut rng);
    let t = 0.37;

    let tape = Tape::new();
    let tracked = state.params.map(&mut |_, p| tape.leaf(p));
    let model = model::ConditionedModel {
        cfg: &cfg,
        params: &tracked,
        inputs: &inputs,
    };
    let loss = flow::cfm_loss_at(&tape, &model, &target, &eps, t).map_err(es)?;
    tape.backward(&loss).map_err(es)?;
    let mut grad_flat = Vec::new();
    tracked.for_each(&mut |_, p| {
        grad_flat.extend_from_slice(tape.grad(p).expect("grad present").data());
    });

    let flat0 = Tensor::internal(
        vec![state.params.num_scalars()],
        state.params.to_flat(),
        None,
    );
    let fd = finite_diff_grad(
        |flat| {
            let params = state.params.from_flat(flat.data());
            let tape = Tape::new();
            let model = model::ConditionedModel {
                cfg: &cfg,
                params: &params,
                inputs: &inputs,
            };
            flow::cfm_loss_at(&tape, &model, &target, &eps, t)?.scalar_value()
        },
        &flat0,
        1e-4,
    )
    .map_err(es)?;
    let mut worst = 0.0f64;
    for (g, f) in grad_flat.iter().zip(fd.data()) {
        let denom = g.abs().max(f.abs()).max(1e-6);
        worst = worst.max((g - f).abs() / denom);
    }
    if worst >= 1e-3 {
        return Err(format!("worst relative gradient error {worst}"));
    }
    Ok(())
}

fn frozen_base() -> CheckResult {
    let cfg = small_model_cfg();
    let mut state = randomized_state(cfg.clone(), 119);
    let before = state.params.named();
    let mut rng = Rng::new(12);
    let data = synthetic_dataset(2, cfg.grid_h, cfg.grid_w, &mut rng).map_err(es)?;
    model::train(
        &mut state,
        &data,
        &TrainOptions {
            steps: 5,
            seed: 13,
            frozen_base: true,
        },
    )
    .map_err(es)?;
    for ((name, a), (_, b)) in before.iter().zip(&state.params.named()) {
        if !name.contains(".adapter.") && !a.same_bits(b) {
            return Err(format!("{name} moved under frozen base"));
        }
    }
    Ok(())
}

fn train_determinism() -> CheckResult {
    let cfg = small_model_cfg();
    let mut rng = Rng::new(14);
    let data = synthetic_dataset(2, cfg.grid_h, cfg.grid_w, &mut rng).map_err(es)?;
    let run = || -> crate::error::Result<Vec<f64>> {
        let mut state = randomized_state(cfg.clone(), 120);
        model::train(
            &mut state,
            &data,
            &TrainOptions {
                steps: 20,
                seed: 15,
                frozen_base: false,
            },
        )
    };
    let (a, b) = (run().map_err(es)?, run().map_err(es)?);
    if a != b {
        return Err("identical seeds produced different loss traces".into());
    }
    Ok(())
}

// ---- kv cache ----------------------------------------------------------------------

fn kvcache_cfg() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_blocks: 2,
        n_heads: 1,
        lora_rank: 2,
        grid_h: 4,
        grid_w: 4,
        ..ModelConfig::default()
    }
}

fn kvcache_timestep_guard() -> CheckResult {
    // soundness precondition for caching: uncached condition K/V must be
    // identical at any two timesteps; if this ever fails the cache is unsound
    let cfg = kvcache_cfg();
    let state = randomized_state(cfg.clone(), 121);
    let inputs = toy_inputs(&cfg, 16);
    let mut rng = Rng::new(17);
    let x = Tensor::random_normal(vec![cfg.grid_h, cfg.grid_w], &mut rng);
    let layout = BranchLayout::new(16, 16, vec![16, 16, 16]);
    let run = |t: f64| -> crate::error::Result<ForwardTrace> {
        let tape = Tape::new();
        let mut trace = ForwardTrace::default();
        model::forward_full(&tape, &cfg, &state.params, &x, &inputs, t, Some(&mut trace))?;
        Ok(trace)
    };
    let a = run(0.0).map_err(es)?;
    for t in [0.37, 1.0] {
        let b = run(t).map_err(es)?;
        for (ba, bb) in a.blocks.iter().zip(&b.blocks) {
            for k in 0..3 {
                for i in layout.cond_range(k) {
                    if ba.k.row(i) != bb.k.row(i) || ba.v.row(i) != bb.v.row(i) {
                        return Err(format!(
                            "caching is unsound: condition row {i} depends on t"
                        ));
                    }
                }
            }
        }
    }
    Ok(())
}

fn kvcache_equivalence() -> CheckResult {
    let cfg = kvcache_cfg();
    let state = randomized_state(cfg.clone(), 122);
    let inputs = toy_inputs(&cfg, 18);
    for seed in [1u64, 2, 3] {
        for steps in [1usize, 5] {
            let fc = FlowConfig {
                num_steps: steps,
                seed,
            };
            let uncached = flow::sample_euler(&state.conditioned(&inputs), &fc).map_err(es)?;
            let (cached, store) =
                kvcache::sample_cached(&state, &inputs, &fc, false).map_err(es)?;
            let diff = cached.max_abs_diff(&uncached);
            if diff >= 1e-10 {
                return Err(format!("seed {seed} steps {steps}: diff {diff}"));
            }
            if store.counts() != [1, 1, 1] {
                return Err(format!("counters {:?}", store.counts()));
            }
        }
    }
    Ok(())
}

fn kvcache_single_computation() -> CheckResult {
    let cfg = kvcache_cfg();
    let state = randomized_state(cfg.clone(), 123);
    let inputs = toy_inputs(&cfg, 19);
    let fc = FlowConfig {
        num_steps: 25,
        seed: 4,
    };
    let (_, store) = kvcache::sample_cached(&state, &inputs, &fc, false).map_err(es)?;
    if store.counts() != [1, 1, 1] {
        return Err(format!(
            "expected one condition forward each, got {:?}",
            store.counts()
        ));
    }
    Ok(())
}

fn kvcache_monotone_cost() -> CheckResult {
    let cfg = kvcache_cfg();
    let state = randomized_state(cfg.clone(), 124);
    let inputs = toy_inputs(&cfg, 20);
    let (cached, uncached) = kvcache::per_step_mul_counts(&state, &inputs, 0.5).map_err(es)?;
    if cached >= uncached {
        return Err(format!("cached step costs {cached} >= uncached {uncached}"));
    }
    Ok(())
}

// ---- ensemble -------------------------------------------------------------------------

fn spanning_base(rng: &mut Rng) -> Tensor {
    let mut base = Tensor::random_uniform(vec![6, 6], 0.0, 1.0, rng);
    let mut data = base.data().to_vec();
    data[0] = 0.0;
    data[35] = 1.0;
    base = Tensor::internal(vec![6, 6], data, None);
    base
}

fn align_monotone() -> CheckResult {
    let mut rng = Rng::new(125);
    let base = spanning_base(&mut rng);
    let preds = DepthPredictionSet::new(vec![
        base.map(|v| v * 1.7 + 0.2),
        base.map(|v| v * 0.6 - 0.1),
        base.map(|v| v * 1.1 + 0.05),
    ])
    .map_err(es)?;
    let out = align_depth(&preds, 0.1, 600, &mut rng).map_err(es)?;
    for w in out.trace.windows(2) {
        if w[1] > w[0] {
            return Err(format!("trace increased: {} -> {}", w[0], w[1]));
        }
    }
    let init = depth_objective(&preds, &AffineParams::identity(3), 0.1).map_err(es)?;
    if out.objective > init {
        return Err(format!("final {} worse than init {init}", out.objective));
    }
    Ok(())
}

fn gauge() -> CheckResult {
    let mut rng = Rng::new(126);
    let base = spanning_base(&mut rng);
    let preds = DepthPredictionSet::new(vec![
        base.map(|v| v * 1.4 + 0.1),
        base.map(|v| v * 0.8 - 0.2),
    ])
    .map_err(es)?;
    let params = AffineParams {
        scales: vec![0.9, 1.2],
        offsets: vec![0.05, 0.1],
    };
    // common affine (s, t) = (2, 0.3) applied on top of the aligned maps
    let jointly_scaled = AffineParams {
        scales: params.scales.iter().map(|s| s * 2.0).collect(),
        offsets: params.offsets.iter().map(|t| t * 2.0 + 0.3).collect(),
    };
    let (p0, _) = depth_objective_parts(&preds, &params).map_err(es)?;
    let (p1, _) = depth_objective_parts(&preds, &jointly_scaled).map_err(es)?;
    if (p0 * 2.0 - p1).abs() > 1e-9 {
        return Err(format!(
            "pairwise term is not affine-equivariant: {p0} vs {p1}"
        ));
    }
    let f0 = depth_objective(&preds, &params, 0.5).map_err(es)?;
    let f1 = depth_objective(&preds, &jointly_scaled, 0.5).map_err(es)?;
    if (f0 - f1).abs() < 1e-9 {
        return Err("full objective ignored a joint affine change".into());
    }
    Ok(())
}

fn median_robustness() -> CheckResult {
    let mut rng = Rng::new(127);
    let n = 5;
    let maps: Vec<Tensor> = (0..n)
        .map(|_| {
            // quantized values produce plenty of ties, where the median is
            // pinned no matter what one map does
            Tensor::random_uniform(vec![4, 4], 0.0, 1.0, &mut rng).map(|v| (v * 4.0).round() / 4.0)
        })
        .collect();
    let preds = DepthPredictionSet::new(maps.clone()).map_err(es)?;
    let identity = AffineParams::identity(n);
    let before = merge_depth(&preds, &identity).map_err(es)?;

    let replaced = 4usize;
    let outlier = maps[replaced].map(|v| v + 1000.0);
    let mut poisoned = maps.clone();
    poisoned[replaced] = outlier;
    let after = merge_depth(
        &DepthPredictionSet::new(poisoned).map_err(es)?,
        &identity,
    )
    .map_err(es)?;

    let need = n / 2 + 1;
    for p in 0..before.len() {
        let m = before.data()[p];
        let others: Vec<f64> = (0..n)
            .filter(|i| *i != replaced)
            .map(|i| maps[i].data()[p])
            .collect();
        let low = others.iter().filter(|v| **v <= m).count();
        let high = others.iter().filter(|v| **v >= m).count();
        if low >= need && high >= need && after.data()[p] != m {
            return Err(format!(
                "pixel {p}: median moved from {m} to {} despite {need}-way bracketing",
                after.data()[p]
            ));
        }
        // weaker containment: the outlier cannot drag the median outside the
        // remaining maps' range
        let min = others.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = others.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if after.data()[p] < min - 1e-12 || after.data()[p] > max + 1e-12 {
            return Err(format!("pixel {p}: median escaped the honest range"));
        }
    }
    Ok(())
}

fn normals_membership() -> CheckResult {
    let mut rng = Rng::new(128);
    let n = 4;
    let plane = 9;
    let maps: Vec<Tensor> = (0..n)
        .map(|_| {
            let mut data = vec![0.0; 3 * plane];
            for p in 0..plane {
                let v = [rng.normal(), rng.normal(), rng.normal() + 2.0];
                let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                data[p] = v[0] / norm;
                data[plane + p] = v[1] / norm;
                data[2 * plane + p] = v[2] / norm;
            }
            Tensor::internal(vec![3, 3, 3], data, None)
        })
        .collect();
    let preds = NormalPredictionSet::new(maps.clone()).map_err(es)?;
    let out = ensemble_normals(&preds).map_err(es)?;
    for p in 0..plane {
        let v = [
            out.data()[p],
            out.data()[plane + p],
            out.data()[2 * plane + p],
        ];
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(format!("pixel {p}: output norm {norm}"));
        }
        let member = maps.iter().any(|m| {
            m.data()[p] == v[0]
                && m.data()[plane + p] == v[1]
                && m.data()[2 * plane + p] == v[2]
        });
        if !member {
            return Err(format!("pixel {p}: output vector is not an input vector"));
        }
    }
    Ok(())
}

fn lighting_roundtrip() -> CheckResult {
    let mut rng = Rng::new(129);
    let img = Tensor::random_uniform(vec![4, 4], 0.0, 1.0, &mut rng);
    let albedo = Tensor::random_uniform(vec![4, 4], 0.0, 1.0, &mut rng);
    let shading = Tensor::random_uniform(vec![4, 4], 0.0, 2.0, &mut rng);
    let r = lighting_residual(&img, &albedo, &shading).map_err(es)?;
    let back = reconstruct(&albedo, &shading, &r).map_err(es)?;
    let diff = back.max_abs_diff(&img);
    if diff >= 1e-15 {
        return Err(format!("round trip error {diff}"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::build_zero_mask;

    #[test]
    fn every_check_passes() {
        for (name, outcome) in run_checks(None) {
            if let Err(msg) = outcome {
                panic!("{name}: {msg}");
            }
        }
    }

    #[test]
    fn filter_selects_by_substring() {
        let results = run_checks(Some("scma"));
        assert!(!results.is_empty());
        assert!(results.iter().all(|(name, _)| name.contains("scma")));
    }

    #[test]
    fn broken_mask_builder_is_caught_by_name() {
        // flip the block rule: conditions attend everywhere, image rows only
        // to themselves — the oracle must name a mismatch
        let broken = |layout: &BranchLayout| {
            let n = layout.total();
            let nm = layout.nm_len();
            let mut text = String::new();
            for i in 0..n {
                for j in 0..n {
                    let allowed = if i < nm { i == j } else { true };
                    text.push(if allowed { '0' } else { '-' });
                }
                text.push('\n');
            }
            AttentionMask::parse_ascii(&text).unwrap()
        };
        let mismatch = scma_oracle_mismatch(&broken, 2);
        assert!(mismatch.is_some());
    }

    #[test]
    fn jacobi_recovers_known_spectrum() {
        // symmetric 2x2 with eigenvalues 3 and 1
        let m = vec![2.0, 1.0, 1.0, 2.0];
        let mut eigs = symmetric_eigenvalues(m, 2);
        eigs.sort_by(f64::total_cmp);
        assert!((eigs[0] - 1.0).abs() < 1e-10);
        assert!((eigs[1] - 3.0).abs() < 1e-10);
    }

    #[test]
    fn zero_mask_is_all_allowed() {
        let m = build_zero_mask(4);
        assert_eq!(m.count_allowed(), 16);
    }
}

//! Branch-isolated low-rank adaptation.
//!
//! Shared projection matrices map every token block to Q/K/V. On top of
//! that, each condition type (depth, normal, lighting) owns a low-rank
//! adapter triple whose delta is added to its own block's rows and nowhere
//! else. Noise and material rows come out of [`project_branches`] untouched
//! by construction: they are row slices of the plain projection, never an
//! operand of adapter arithmetic.

use crate::attention::BranchLayout;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// The three condition branches, in block order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    Depth,
    Normal,
    Lighting,
}

pub const CONDITIONS: [Condition; 3] = [Condition::Depth, Condition::Normal, Condition::Lighting];

impl Condition {
    pub fn index(self) -> usize {
        match self {
            Condition::Depth => 0,
            Condition::Normal => 1,
            Condition::Lighting => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Condition::Depth => "depth",
            Condition::Normal => "normal",
            Condition::Lighting => "lighting",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "depth" => Some(Condition::Depth),
            "normal" => Some(Condition::Normal),
            "lighting" => Some(Condition::Lighting),
            _ => None,
        }
    }

    /// Default strength: 1.0 for depth, 1.2 for normal, 0.8 for lighting.
    pub fn default_strength(self) -> f64 {
        match self {
            Condition::Depth => 1.0,
            Condition::Normal => 1.2,
            Condition::Lighting => 0.8,
        }
    }
}

/// One low-rank pair plus its strength multiplier. `a` is `[r x d]`,
/// `b` is `[d x r]`; `b` starts at zero so a fresh adapter is a no-op.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub slot: String,
    pub a: Tensor,
    pub b: Tensor,
    pub strength: f64,
}

impl LoraAdapter {
    pub fn init(slot: String, d: usize, rank: usize, strength: f64, rng: &mut Rng) -> Result<Self> {
        if rank == 0 || rank > d / 2 {
            return Err(Error::Config(format!(
                "adapter {slot}: rank {rank} must be in 1..={} for width {d}",
                d / 2
            )));
        }
        let bound = 1.0 / (d as f64).sqrt();
        Ok(LoraAdapter {
            slot,
            a: Tensor::random_uniform(vec![rank, d], -bound, bound, rng),
            b: Tensor::zeros(vec![d, rank]),
            strength,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.a.shape()[1]
    }

    /// The effective `d x d` delta matrix `strength * B * A` (untracked;
    /// used by rank diagnostics, not by the forward path).
    pub fn effective_matrix(&self) -> Tensor {
        let d = self.width();
        let r = self.rank();
        let ba = crate::ops::matmul(self.b.data(), d, r, self.a.data(), d);
        Tensor::internal(vec![d, d], ba, None).scale(self.strength)
    }
}

/// `strength * Z_c A^T B^T` for row-token `Z_c`.
pub fn lora_delta(tape: &Tape, z_c: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    let (_, d) = z_c.dims2("lora_delta")?;
    if adapter.width() != d || adapter.b.shape() != [d, adapter.rank()] {
        return Err(Error::AdapterMismatch {
            slot: adapter.slot.clone(),
            detail: format!(
                "tokens of width {d} against A {:?}, B {:?}",
                adapter.a.shape(),
                adapter.b.shape()
            ),
        });
    }
    let za = tape.matmul_nt(z_c, &adapter.a)?; // [n_c x r]
    let zab = tape.matmul_nt(&za, &adapter.b)?; // [n_c x d]
    tape.scale(&zab, adapter.strength)
}

/// Q, K and V adapters for one condition type.
#[derive(Debug, Clone)]
pub struct AdapterTriple {
    pub q: LoraAdapter,
    pub k: LoraAdapter,
    pub v: LoraAdapter,
}

impl AdapterTriple {
    fn init(cond: Condition, d: usize, rank: usize, strength: f64, rng: &mut Rng) -> Result<Self> {
        let mk = |slot: &str, rng: &mut Rng| {
            LoraAdapter::init(format!("{}.{slot}", cond.name()), d, rank, strength, rng)
        };
        Ok(AdapterTriple {
            q: mk("q", rng)?,
            k: mk("k", rng)?,
            v: mk("v", rng)?,
        })
    }

    pub fn set_strength(&mut self, s: f64) {
        self.q.strength = s;
        self.k.strength = s;
        self.v.strength = s;
    }
}

/// One adapter triple per condition type.
#[derive(Debug, Clone)]
pub struct ConditionAdapterSet {
    pub depth: AdapterTriple,
    pub normal: AdapterTriple,
    pub lighting: AdapterTriple,
}

impl ConditionAdapterSet {
    /// Fresh adapters: `A ~ U(-1/sqrt(d), 1/sqrt(d))`, `B = 0`, strengths at
    /// their per-condition defaults.
    pub fn init(d: usize, rank: usize, rng: &mut Rng) -> Result<Self> {
        Ok(ConditionAdapterSet {
            depth: AdapterTriple::init(
                Condition::Depth,
                d,
                rank,
                Condition::Depth.default_strength(),
                rng,
            )?,
            normal: AdapterTriple::init(
                Condition::Normal,
                d,
                rank,
                Condition::Normal.default_strength(),
                rng,
            )?,
            lighting: AdapterTriple::init(
                Condition::Lighting,
                d,
                rank,
                Condition::Lighting.default_strength(),
                rng,
            )?,
        })
    }

    pub fn triple(&self, cond: Condition) -> &AdapterTriple {
        match cond {
            Condition::Depth => &self.depth,
            Condition::Normal => &self.normal,
            Condition::Lighting => &self.lighting,
        }
    }

    pub fn triple_mut(&mut self, cond: Condition) -> &mut AdapterTriple {
        match cond {
            Condition::Depth => &mut self.depth,
            Condition::Normal => &mut self.normal,
            Condition::Lighting => &mut self.lighting,
        }
    }

    pub fn strength(&self, cond: Condition) -> f64 {
        self.triple(cond).q.strength
    }
}

/// Scale a condition's adapter triple. Deltas are linear in the strength;
/// negative strengths are rejected.
pub fn set_strength(
    adapters: &mut ConditionAdapterSet,
    cond: Condition,
    s: f64,
) -> Result<()> {
    if s < 0.0 || !s.is_finite() {
        return Err(Error::InvalidValue {
            what: "strength",
            value: s,
            detail: "adapter strengths must be finite and non-negative",
        });
    }
    adapters.triple_mut(cond).set_strength(s);
    Ok(())
}

/// Shared Q/K/V projection matrices, `[d x d]` each.
#[derive(Debug, Clone)]
pub struct ProjectionWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

impl ProjectionWeights {
    pub fn init(d: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        ProjectionWeights {
            wq: Tensor::random_uniform(vec![d, d], -bound, bound, rng),
            wk: Tensor::random_uniform(vec![d, d], -bound, bound, rng),
            wv: Tensor::random_uniform(vec![d, d], -bound, bound, rng),
        }
    }
}

#[derive(Clone, Copy)]
enum Slot {
    Q,
    K,
    V,
}

/// Project every row with the shared weights, then add each condition
/// block's adapter delta to that block's rows only.
pub fn project_branches(
    tape: &Tape,
    z: &Tensor,
    layout: &BranchLayout,
    weights: &ProjectionWeights,
    adapters: &ConditionAdapterSet,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (rows, _) = z.dims2("project_branches")?;
    if rows != layout.total() {
        return Err(Error::ShapeMismatch {
            op: "project_branches",
            left: z.shape().to_vec(),
            right: vec![layout.total(), z.shape()[1]],
        });
    }
    if layout.num_conditions() > CONDITIONS.len() {
        return Err(Error::Config(format!(
            "layout names {} condition blocks; at most {} are supported",
            layout.num_conditions(),
            CONDITIONS.len()
        )));
    }
    let q = project_slot(tape, z, layout, &weights.wq, adapters, Slot::Q)?;
    let k = project_slot(tape, z, layout, &weights.wk, adapters, Slot::K)?;
    let v = project_slot(tape, z, layout, &weights.wv, adapters, Slot::V)?;
    Ok((q, k, v))
}

fn project_slot(
    tape: &Tape,
    z: &Tensor,
    layout: &BranchLayout,
    w: &Tensor,
    adapters: &ConditionAdapterSet,
    slot: Slot,
) -> Result<Tensor> {
    let base = tape.matmul(z, w)?;
    if layout.cond_lengths.iter().all(|&l| l == 0) {
        return Ok(base);
    }
    let nm = layout.nm_len();
    let mut parts: Vec<Tensor> = Vec::with_capacity(1 + layout.num_conditions());
    if nm > 0 {
        parts.push(tape.slice_rows(&base, 0, nm)?);
    }
    for (k, cond) in CONDITIONS.iter().take(layout.num_conditions()).enumerate() {
        let range = layout.cond_range(k);
        if range.is_empty() {
            continue;
        }
        let triple = adapters.triple(*cond);
        let adapter = match slot {
            Slot::Q => &triple.q,
            Slot::K => &triple.k,
            Slot::V => &triple.v,
        };
        let base_rows = tape.slice_rows(&base, range.start, range.end)?;
        let z_rows = tape.slice_rows(z, range.start, range.end)?;
        let delta = lora_delta(tape, &z_rows, adapter)?;
        parts.push(tape.add(&base_rows, &delta)?);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    tape.concat_rows(&refs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::from_vec(vec![rows, cols], v.to_vec()).unwrap()
    }

    fn toy_adapter(slot: &str, a: Tensor, b: Tensor, strength: f64) -> LoraAdapter {
        LoraAdapter {
            slot: slot.into(),
            a,
            b,
            strength,
        }
    }

    #[test]
    fn zero_b_gives_zero_delta() {
        let tape = Tape::new();
        let adapter = toy_adapter(
            "depth.q",
            t2(1, 2, &[0.7, -0.3]),
            Tensor::zeros(vec![2, 1]),
            1.0,
        );
        let z = t2(3, 2, &[1.0, 2.0, -0.5, 0.25, 4.0, 4.0]);
        let delta = lora_delta(&tape, &z, &adapter).unwrap();
        assert!(delta.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_strength_gives_zero_delta() {
        let tape = Tape::new();
        let adapter = toy_adapter("depth.k", t2(1, 2, &[1.0, 1.0]), t2(2, 1, &[3.0, 5.0]), 0.0);
        let z = t2(1, 2, &[42.0, -1.0]);
        let delta = lora_delta(&tape, &z, &adapter).unwrap();
        assert!(delta.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rank_one_worked_example() {
        let tape = Tape::new();
        let adapter = toy_adapter("depth.q", t2(1, 2, &[1.0, 0.0]), t2(2, 1, &[1.0, 1.0]), 1.0);
        let z = t2(1, 2, &[3.0, 5.0]);
        let delta = lora_delta(&tape, &z, &adapter).unwrap();
        assert_eq!(delta.data(), &[3.0, 3.0]);
        // oracle: the explicit B*A matrix applied to the token
        let eff = adapter.effective_matrix();
        let via_matrix = crate::ops::matmul_nt(z.data(), 1, 2, eff.data(), 2);
        assert_eq!(delta.data(), via_matrix.as_slice());
    }

    #[test]
    fn delta_dimension_mismatch_names_slot() {
        let tape = Tape::new();
        let adapter = toy_adapter("lighting.v", t2(1, 3, &[0.0; 3]), t2(3, 1, &[0.0; 3]), 1.0);
        let z = t2(1, 2, &[1.0, 2.0]);
        let err = lora_delta(&tape, &z, &adapter).unwrap_err();
        assert!(err.to_string().contains("lighting.v"), "{err}");
    }

    fn identity_weights(d: usize) -> ProjectionWeights {
        ProjectionWeights {
            wq: Tensor::eye(d),
            wk: Tensor::eye(d),
            wv: Tensor::eye(d),
        }
    }

    #[test]
    fn fresh_adapters_are_a_no_op() {
        let mut rng = Rng::new(9);
        let tape = Tape::new();
        let d = 4;
        let layout = BranchLayout::new(2, 2, vec![1, 1, 1]);
        let z = Tensor::random_normal(vec![layout.total(), d], &mut rng);
        let weights = ProjectionWeights::init(d, &mut rng);
        let adapters = ConditionAdapterSet::init(d, 2, &mut rng).unwrap();
        let (q, k, v) = project_branches(&tape, &z, &layout, &weights, &adapters).unwrap();
        let plain_q = tape.matmul(&z, &weights.wq).unwrap();
        let plain_k = tape.matmul(&z, &weights.wk).unwrap();
        let plain_v = tape.matmul(&z, &weights.wv).unwrap();
        assert!(q.same_values(&plain_q));
        assert!(k.same_values(&plain_k));
        assert!(v.same_values(&plain_v));
    }

    #[test]
    fn worked_projection_with_depth_adapter() {
        let tape = Tape::new();
        let layout = BranchLayout::new(1, 1, vec![1]);
        let z = t2(3, 2, &[0.1, 0.2, 0.3, 0.4, 3.0, 5.0]);
        let weights = identity_weights(2);
        let mut rng = Rng::new(1);
        let mut adapters = ConditionAdapterSet::init(2, 1, &mut rng).unwrap();
        adapters.depth.q = toy_adapter("depth.q", t2(1, 2, &[1.0, 0.0]), t2(2, 1, &[1.0, 1.0]), 1.0);
        let (q, _, _) = project_branches(&tape, &z, &layout, &weights, &adapters).unwrap();
        assert_eq!(q.row(2), &[6.0, 8.0]);
        // noise and material rows are the identity projection of z
        assert_eq!(q.row(0), z.row(0));
        assert_eq!(q.row(1), z.row(1));
    }

    #[test]
    fn perturbing_one_adapter_leaves_other_rows_bitwise_unchanged() {
        let mut rng = Rng::new(33);
        let tape = Tape::new();
        let d = 6;
        let layout = BranchLayout::new(2, 3, vec![2, 2, 2]);
        let z = Tensor::random_normal(vec![layout.total(), d], &mut rng);
        let weights = ProjectionWeights::init(d, &mut rng);
        let mut adapters = ConditionAdapterSet::init(d, 3, &mut rng).unwrap();
        let (q0, k0, v0) = project_branches(&tape, &z, &layout, &weights, &adapters).unwrap();

        adapters.lighting.q.b = Tensor::random_normal(vec![d, 3], &mut rng);
        adapters.lighting.k.b = Tensor::random_normal(vec![d, 3], &mut rng);
        adapters.lighting.v.b = Tensor::random_normal(vec![d, 3], &mut rng);
        let (q1, k1, v1) = project_branches(&tape, &z, &layout, &weights, &adapters).unwrap();

        let lighting = layout.cond_range(2);
        for (before, after) in [(&q0, &q1), (&k0, &k1), (&v0, &v1)] {
            for i in 0..layout.total() {
                if lighting.contains(&i) {
                    continue;
                }
                for j in 0..d {
                    assert_eq!(
                        before.at(&[i, j]).to_bits(),
                        after.at(&[i, j]).to_bits(),
                        "row {i} moved"
                    );
                }
            }
        }
        // and the lighting rows did move
        assert!(q0.row(lighting.start) != q1.row(lighting.start));
    }

    #[test]
    fn strength_defaults_and_validation() {
        let mut rng = Rng::new(5);
        let mut adapters = ConditionAdapterSet::init(8, 2, &mut rng).unwrap();
        assert_eq!(adapters.strength(Condition::Depth), 1.0);
        assert_eq!(adapters.strength(Condition::Normal), 1.2);
        assert_eq!(adapters.strength(Condition::Lighting), 0.8);
        assert!(set_strength(&mut adapters, Condition::Depth, -0.1).is_err());
        set_strength(&mut adapters, Condition::Depth, 2.5).unwrap();
        assert_eq!(adapters.strength(Condition::Depth), 2.5);
    }

    #[test]
    fn doubling_strength_doubles_delta_exactly() {
        let mut rng = Rng::new(11);
        let tape = Tape::new();
        let d = 6;
        let mut adapter = LoraAdapter::init("normal.q".into(), d, 3, 1.2, &mut rng).unwrap();
        adapter.b = Tensor::random_normal(vec![d, 3], &mut rng);
        let z = Tensor::random_normal(vec![4, d], &mut rng);
        let once = lora_delta(&tape, &z, &adapter).unwrap();
        adapter.strength *= 2.0;
        let twice = lora_delta(&tape, &z, &adapter).unwrap();
        assert!(twice.same_bits(&once.scale(2.0)));
    }

    #[test]
    fn rank_bound_is_enforced() {
        let mut rng = Rng::new(2);
        assert!(LoraAdapter::init("depth.q".into(), 4, 3, 1.0, &mut rng).is_err());
        assert!(LoraAdapter::init("depth.q".into(), 4, 2, 1.0, &mut rng).is_ok());
    }
}

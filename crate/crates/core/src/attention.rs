//! Multimodal attention over block-structured token sequences.
//!
//! Sequences are laid out as `[noise; material; cond_1; ...; cond_m]`. The
//! mutual-attention mask lets noise and material rows attend everywhere
//! while each condition block attends only within itself. That isolation is
//! what makes condition key/value tensors independent of the denoising
//! state, and therefore cacheable across timesteps.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Token-count bookkeeping for the `[noise, material, cond...]` block order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchLayout {
    pub n_noise: usize,
    pub n_material: usize,
    pub cond_lengths: Vec<usize>,
}

impl BranchLayout {
    pub fn new(n_noise: usize, n_material: usize, cond_lengths: Vec<usize>) -> Self {
        BranchLayout {
            n_noise,
            n_material,
            cond_lengths,
        }
    }

    pub fn total(&self) -> usize {
        self.n_noise + self.n_material + self.cond_lengths.iter().sum::<usize>()
    }

    /// Tokens in the noise + material region (the rows recomputed every
    /// denoising step).
    pub fn nm_len(&self) -> usize {
        self.n_noise + self.n_material
    }

    pub fn num_conditions(&self) -> usize {
        self.cond_lengths.len()
    }

    /// Row range of condition block `k`.
    pub fn cond_range(&self, k: usize) -> std::ops::Range<usize> {
        let mut start = self.nm_len();
        for len in &self.cond_lengths[..k] {
            start += len;
        }
        start..start + self.cond_lengths[k]
    }

    /// Condition block index owning row `i`, if any.
    pub fn cond_of(&self, i: usize) -> Option<usize> {
        if i < self.nm_len() {
            return None;
        }
        let mut start = self.nm_len();
        for (k, len) in self.cond_lengths.iter().enumerate() {
            if i < start + len {
                return Some(k);
            }
            start += len;
        }
        None
    }
}

/// Additive attention mask with entries drawn from `{0, -inf}`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    n: usize,
    entries: Vec<f64>,
}

impl AttentionMask {
    fn from_fn(n: usize, allowed: impl Fn(usize, usize) -> bool) -> Self {
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if !allowed(i, j) {
                    entries[i * n + j] = f64::NEG_INFINITY;
                }
            }
        }
        AttentionMask { n, entries }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.entries[i * self.n + j] == 0.0
    }

    pub fn count_allowed(&self) -> usize {
        self.entries.iter().filter(|e| **e == 0.0).count()
    }

    /// Debug dump: `0` for attend, `-` for blocked, one row per line.
    pub fn to_ascii(&self) -> String {
        let mut s = String::with_capacity(self.n * (self.n + 1));
        for i in 0..self.n {
            for j in 0..self.n {
                s.push(if self.is_allowed(i, j) { '0' } else { '-' });
            }
            s.push('\n');
        }
        s
    }

    pub fn parse_ascii(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let n = rows.len();
        let mut entries = Vec::with_capacity(n * n);
        for row in &rows {
            if row.chars().count() != n {
                return Err(Error::Parse(format!(
                    "mask rows must be {n} characters, got `{row}`"
                )));
            }
            for c in row.chars() {
                match c {
                    '0' => entries.push(0.0),
                    '-' => entries.push(f64::NEG_INFINITY),
                    other => {
                        return Err(Error::Parse(format!("bad mask character `{other}`")));
                    }
                }
            }
        }
        Ok(AttentionMask { n, entries })
    }
}

/// Everything-attends-everything (the plain multimodal mask).
pub fn build_zero_mask(n: usize) -> AttentionMask {
    AttentionMask::from_fn(n, |_, _| true)
}

/// Each position attends to itself and the preceding positions.
pub fn build_causal_mask(n: usize) -> AttentionMask {
    AttentionMask::from_fn(n, |i, j| j <= i)
}

/// The mutual-attention mask: noise and material rows attend to every
/// column; rows of condition block `k` attend only within block `k`.
pub fn build_scma_mask(layout: &BranchLayout) -> AttentionMask {
    let nm = layout.nm_len();
    let n = layout.total();
    let cond_of_row: Vec<Option<usize>> = (0..n).map(|i| layout.cond_of(i)).collect();
    AttentionMask::from_fn(n, |i, j| {
        if i < nm {
            true
        } else {
            cond_of_row[i] == cond_of_row[j]
        }
    })
}

/// Per-pair base angles for rotary position embedding.
#[derive(Debug, Clone)]
pub struct RopeFrequencies {
    dim: usize,
    thetas: Arc<Vec<f64>>,
}

impl RopeFrequencies {
    pub fn new(dim: usize, base: f64) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::Config(format!(
                "rope dimension must be a positive even number, got {dim}"
            )));
        }
        if base <= 1.0 {
            return Err(Error::Config(format!("rope base must exceed 1, got {base}")));
        }
        let half = dim / 2;
        let thetas = (0..half)
            .map(|j| base.powf(-2.0 * j as f64 / dim as f64))
            .collect();
        Ok(RopeFrequencies {
            dim,
            thetas: Arc::new(thetas),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }

    pub(crate) fn thetas_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.thetas)
    }
}

/// Rotate each token's consecutive coordinate pairs by `position * theta_j`.
pub fn apply_rope(
    tape: &Tape,
    tokens: &Tensor,
    positions: &Arc<Vec<usize>>,
    freqs: &RopeFrequencies,
) -> Result<Tensor> {
    let (_, d) = tokens.dims2("apply_rope")?;
    if d != freqs.dim() {
        return Err(Error::Config(format!(
            "rope frequencies built for dimension {}, tokens have {d}",
            freqs.dim()
        )));
    }
    tape.rope(tokens, Arc::clone(positions), freqs.thetas_arc())
}

/// Joint attention over all tokens: `softmax(Q K^T / sqrt(d) + M) V`.
pub fn mma(
    tape: &Tape,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &AttentionMask,
) -> Result<Tensor> {
    let (n, _) = q.dims2("mma")?;
    if mask.size() != n {
        return Err(Error::ShapeMismatch {
            op: "mma",
            left: vec![n, n],
            right: vec![mask.size(), mask.size()],
        });
    }
    attend(tape, q, k, v, Some(mask.entries()))
}

/// Rectangular attention core shared by the full, cached, and
/// condition-branch paths. `mask`, when present, must cover
/// `q_rows x k_rows` in row-major order.
pub fn attend(
    tape: &Tape,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&[f64]>,
) -> Result<Tensor> {
    let (_, d) = q.dims2("attend")?;
    let (kn, kd) = k.dims2("attend")?;
    let (vn, _) = v.dims2("attend")?;
    if kd != d || vn != kn {
        return Err(Error::ShapeMismatch {
            op: "attend",
            left: k.shape().to_vec(),
            right: v.shape().to_vec(),
        });
    }
    let logits = tape.matmul_nt(q, k)?;
    let scaled = tape.scale(&logits, 1.0 / (d as f64).sqrt())?;
    let probs = tape.softmax_rows(&scaled, mask)?;
    tape.matmul(&probs, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::from_vec(vec![rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn causal_mask_small_cases() {
        assert_eq!(build_causal_mask(1).to_ascii(), "0\n");
        let m = build_causal_mask(3);
        assert_eq!(m.to_ascii(), "0--\n00-\n000\n");
    }

    #[test]
    fn causal_mask_allowed_count_is_triangular() {
        let m = build_causal_mask(5);
        assert_eq!(m.count_allowed(), 15);
    }

    #[test]
    fn scma_empty_layout() {
        let m = build_scma_mask(&BranchLayout::new(0, 0, vec![]));
        assert_eq!(m.size(), 0);
    }

    #[test]
    fn scma_one_token_per_block() {
        let m = build_scma_mask(&BranchLayout::new(1, 1, vec![1]));
        assert_eq!(m.to_ascii(), "000\n000\n--0\n");
    }

    #[test]
    fn scma_three_conditions() {
        let m = build_scma_mask(&BranchLayout::new(2, 2, vec![1, 1, 1]));
        for i in 0..4 {
            for j in 0..7 {
                assert!(m.is_allowed(i, j));
            }
        }
        for i in 4..7 {
            for j in 0..7 {
                assert_eq!(m.is_allowed(i, j), i == j, "({i},{j})");
            }
        }
    }

    #[test]
    fn scma_diagonal_is_always_allowed() {
        let layout = BranchLayout::new(3, 2, vec![4, 0, 2]);
        let m = build_scma_mask(&layout);
        for i in 0..layout.total() {
            assert!(m.is_allowed(i, i));
        }
    }

    #[test]
    fn ascii_round_trip() {
        let m = build_scma_mask(&BranchLayout::new(1, 2, vec![2, 1]));
        let parsed = AttentionMask::parse_ascii(&m.to_ascii()).unwrap();
        assert_eq!(m, parsed);
    }

    #[test]
    fn rope_at_position_zero_is_identity() {
        let tape = Tape::new();
        let freqs = RopeFrequencies::new(4, 10_000.0).unwrap();
        let x = t2(2, 4, &[0.1, 0.2, 0.3, 0.4, -1.0, 2.0, 0.0, 0.5]);
        let out = apply_rope(&tape, &x, &Arc::new(vec![0, 0]), &freqs).unwrap();
        assert!(x.same_values(&out));
    }

    #[test]
    fn rope_quarter_turn() {
        // theta_0 = 1 at any base, so position pi/2 is impossible with
        // integer positions; build the turn from a custom frequency instead.
        let tape = Tape::new();
        let freqs = RopeFrequencies {
            dim: 2,
            thetas: Arc::new(vec![std::f64::consts::FRAC_PI_2]),
        };
        let x = t2(1, 2, &[1.0, 0.0]);
        let out = apply_rope(&tape, &x, &Arc::new(vec![1]), &freqs).unwrap();
        assert!((out.data()[0]).abs() < 1e-12);
        assert!((out.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rope_preserves_pair_norms() {
        let tape = Tape::new();
        let freqs = RopeFrequencies::new(6, 10_000.0).unwrap();
        let x = t2(1, 6, &[3.0, -4.0, 1.0, 2.0, 0.5, 0.5]);
        let out = apply_rope(&tape, &x, &Arc::new(vec![17]), &freqs).unwrap();
        for j in 0..3 {
            let before = (x.data()[2 * j].powi(2) + x.data()[2 * j + 1].powi(2)).sqrt();
            let after = (out.data()[2 * j].powi(2) + out.data()[2 * j + 1].powi(2)).sqrt();
            assert!((before - after).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_rejects_odd_dimension() {
        assert!(RopeFrequencies::new(3, 10_000.0).is_err());
    }

    #[test]
    fn mma_single_token_returns_value() {
        let tape = Tape::new();
        let q = t2(1, 2, &[3.0, -1.0]);
        let k = t2(1, 2, &[100.0, 5.0]);
        let v = t2(1, 2, &[7.0, 9.0]);
        let out = mma(&tape, &q, &k, &v, &build_zero_mask(1)).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn mma_self_only_mask_returns_own_values() {
        let tape = Tape::new();
        let mask = AttentionMask::from_fn(3, |i, j| i == j);
        let q = t2(3, 2, &[0.3, 1.0, -0.5, 0.2, 2.0, 0.0]);
        let k = t2(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.5, 0.5]);
        let v = t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = mma(&tape, &q, &k, &v, &mask).unwrap();
        assert!(out.same_values(&v));
    }

    #[test]
    fn mma_uniform_weights_average_values() {
        let tape = Tape::new();
        let q = t2(2, 1, &[0.0, 0.0]);
        let k = t2(2, 1, &[0.0, 0.0]);
        let v = t2(2, 1, &[2.0, 4.0]);
        let out = mma(&tape, &q, &k, &v, &build_zero_mask(2)).unwrap();
        assert!((out.data()[0] - 3.0).abs() < 1e-15);
        assert!((out.data()[1] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn causal_attention_ignores_future_rows() {
        let tape = Tape::new();
        let mask = build_causal_mask(3);
        let q = t2(3, 2, &[0.4, -0.2, 1.0, 0.3, -0.6, 0.9]);
        let k = t2(3, 2, &[0.1, 0.8, -0.3, 0.2, 0.7, 0.7]);
        let v = t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let base = mma(&tape, &q, &k, &v, &mask).unwrap();

        // scribble over the last row of K and V; rows 0 and 1 must not move
        let mut k2 = k.data().to_vec();
        let mut v2 = v.data().to_vec();
        k2[4] = 99.0;
        k2[5] = -99.0;
        v2[4] = 1234.0;
        v2[5] = -7.0;
        let changed = mma(
            &tape,
            &q,
            &t2(3, 2, &k2),
            &t2(3, 2, &v2),
            &mask,
        )
        .unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(base.at(&[i, j]), changed.at(&[i, j]));
            }
        }
        assert_ne!(base.at(&[2, 0]), changed.at(&[2, 0]));
    }
}

//! Condition-preparation ensembles.
//!
//! Depth estimators return maps only up to an affine gauge, so N stochastic
//! predictions are aligned by searching per-map scales and offsets that
//! minimize pairwise disagreement, with a range regularizer pinning the
//! merged median to [0, 1]; the merged map is the pixelwise median. Normal
//! maps are ensembled by per-pixel selection of the prediction closest (in
//! cosine) to the normalized mean. Lighting obeys the decomposition
//! `I = A * l + R`, kept here as an exact residual identity.

use crate::error::{Error, Result};
use crate::optim::{nelder_mead, SearchResult};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// N stacked scalar depth maps with one shared `[H, W]` shape.
#[derive(Debug, Clone)]
pub struct DepthPredictionSet {
    maps: Vec<Tensor>,
}

impl DepthPredictionSet {
    pub fn new(maps: Vec<Tensor>) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::Config("a depth set needs at least one map".into()));
        }
        let shape = maps[0].shape().to_vec();
        for m in &maps {
            m.dims2("depth_set")?;
            if m.shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "depth_set",
                    left: shape,
                    right: m.shape().to_vec(),
                });
            }
        }
        Ok(DepthPredictionSet { maps })
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn maps(&self) -> &[Tensor] {
        &self.maps
    }

    pub fn pixels(&self) -> usize {
        self.maps[0].len()
    }
}

/// Per-prediction scale and offset.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub scales: Vec<f64>,
    pub offsets: Vec<f64>,
}

impl AffineParams {
    pub fn identity(n: usize) -> Self {
        AffineParams {
            scales: vec![1.0; n],
            offsets: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    fn from_flat(flat: &[f64]) -> Self {
        let n = flat.len() / 2;
        AffineParams {
            scales: (0..n).map(|i| flat[2 * i]).collect(),
            offsets: (0..n).map(|i| flat[2 * i + 1]).collect(),
        }
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(2 * self.scales.len());
        for (s, t) in self.scales.iter().zip(&self.offsets) {
            flat.push(*s);
            flat.push(*t);
        }
        flat
    }
}

fn aligned_maps(preds: &DepthPredictionSet, params: &AffineParams) -> Vec<Vec<f64>> {
    preds
        .maps
        .iter()
        .zip(params.scales.iter().zip(&params.offsets))
        .map(|(m, (s, t))| m.data().iter().map(|d| d * s + t).collect())
        .collect()
}

fn median_of(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn pixelwise_median(aligned: &[Vec<f64>]) -> Vec<f64> {
    let pixels = aligned[0].len();
    (0..pixels)
        .map(|p| median_of(aligned.iter().map(|m| m[p]).collect()))
        .collect()
}

/// The two pieces of the alignment objective: the pairwise-disagreement
/// term `sqrt(sum_{i<j} |d'_i - d'_j|^2 / C(N,2))` and the range
/// regularizer `|min m| + |1 - max m|`, where `d'_i = d_i * s_i + t_i` and
/// `m` is the pixelwise median of the aligned set. With a single
/// prediction the pairwise term is zero.
pub fn depth_objective_parts(
    preds: &DepthPredictionSet,
    params: &AffineParams,
) -> Result<(f64, f64)> {
    if params.len() != preds.len() {
        return Err(Error::Config(format!(
            "{} affine params for {} predictions",
            params.len(),
            preds.len()
        )));
    }
    let n = preds.len();
    let aligned = aligned_maps(preds, params);

    let mut pairwise = 0.0;
    if n >= 2 {
        let mut sum = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                sum += aligned[i]
                    .iter()
                    .zip(&aligned[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
            }
        }
        let b = (n * (n - 1) / 2) as f64;
        pairwise = (sum / b).sqrt();
    }

    let m = pixelwise_median(&aligned);
    let min = m.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let regularizer = min.abs() + (1.0 - max).abs();
    Ok((pairwise, regularizer))
}

/// `pairwise + lambda * regularizer`; see [`depth_objective_parts`].
pub fn depth_objective(
    preds: &DepthPredictionSet,
    params: &AffineParams,
    lambda_reg: f64,
) -> Result<f64> {
    if lambda_reg < 0.0 {
        return Err(Error::InvalidValue {
            what: "lambda_reg",
            value: lambda_reg,
            detail: "the regularizer weight must be non-negative",
        });
    }
    let (pairwise, regularizer) = depth_objective_parts(preds, params)?;
    let value = pairwise + lambda_reg * regularizer;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            op: "depth_objective",
            index: 0,
        });
    }
    Ok(value)
}

#[derive(Debug, Clone)]
pub struct DepthAlignment {
    pub params: AffineParams,
    pub objective: f64,
    /// Best objective seen so far, one entry per optimizer iteration.
    pub trace: Vec<f64>,
}

/// The joint affine that maps the current merged median onto [0, 1]
/// exactly, zeroing the range regularizer. Applying a common affine to all
/// aligned maps scales the pairwise term but cannot break their agreement.
fn gauge_normalized(preds: &DepthPredictionSet, params: &AffineParams) -> Option<AffineParams> {
    let aligned = aligned_maps(preds, params);
    let m = pixelwise_median(&aligned);
    let min = m.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max - min).is_finite() || max - min < 1e-12 {
        return None;
    }
    let scale = 1.0 / (max - min);
    let offset = -min * scale;
    Some(AffineParams {
        scales: params.scales.iter().map(|s| s * scale).collect(),
        offsets: params.offsets.iter().map(|t| t * scale + offset).collect(),
    })
}

/// Search scales and offsets from the identity initialization. Simplex
/// rounds alternate with an exact gauge fix (median pinned to [0, 1]),
/// each accepted only when it improves, so the best-so-far trace is
/// non-increasing across the whole budget. The result never scores worse
/// than the identity; `iters = 0` returns it unchanged.
pub fn align_depth(
    preds: &DepthPredictionSet,
    lambda_reg: f64,
    iters: usize,
    rng: &mut Rng,
) -> Result<DepthAlignment> {
    let init = AffineParams::identity(preds.len());
    let init_value = depth_objective(preds, &init, lambda_reg)?;
    let mut best = init.to_flat();
    let mut best_value = init_value;
    let mut trace = Vec::with_capacity(iters);

    let rounds = 4usize.min(iters.max(1));
    let per_round = iters / rounds;
    let mut objective = |flat: &[f64]| -> Result<f64> {
        depth_objective(preds, &AffineParams::from_flat(flat), lambda_reg)
    };
    for _ in 0..rounds {
        if per_round == 0 {
            break;
        }
        let radius = (2.0 * best_value).clamp(1e-9, 0.25);
        let SearchResult {
            best: round_best,
            best_value: round_value,
            trace: round_trace,
            ..
        } = nelder_mead(&mut objective, &best, per_round, radius, rng)?;
        trace.extend(round_trace);
        if round_value < best_value {
            best = round_best;
            best_value = round_value;
        }
        if let Some(fixed) = gauge_normalized(preds, &AffineParams::from_flat(&best)) {
            let fixed_value = depth_objective(preds, &fixed, lambda_reg)?;
            if fixed_value < best_value {
                best = fixed.to_flat();
                best_value = fixed_value;
            }
        }
        trace.push(best_value);
    }

    Ok(DepthAlignment {
        params: AffineParams::from_flat(&best),
        objective: best_value,
        trace,
    })
}

/// Pixelwise median of the aligned predictions; an even count averages the
/// two central values.
pub fn merge_depth(preds: &DepthPredictionSet, params: &AffineParams) -> Result<Tensor> {
    if params.len() != preds.len() {
        return Err(Error::Config(format!(
            "{} affine params for {} predictions",
            params.len(),
            preds.len()
        )));
    }
    let aligned = aligned_maps(preds, params);
    let m = pixelwise_median(&aligned);
    Ok(Tensor::internal(preds.maps[0].shape().to_vec(), m, None))
}

/// N stacked normal maps, `[3, H, W]` each, unit length per pixel.
#[derive(Debug, Clone)]
pub struct NormalPredictionSet {
    maps: Vec<Tensor>,
}

impl NormalPredictionSet {
    pub fn new(maps: Vec<Tensor>) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::Config("a normal set needs at least one map".into()));
        }
        let shape = maps[0].shape().to_vec();
        for m in &maps {
            match m.shape() {
                [3, _, _] => {}
                other => {
                    return Err(Error::InvalidShape {
                        op: "normal_set",
                        shape: other.to_vec(),
                        detail: "expected [3, H, W]".into(),
                    });
                }
            }
            if m.shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "normal_set",
                    left: shape,
                    right: m.shape().to_vec(),
                });
            }
            let plane = m.len() / 3;
            for p in 0..plane {
                let norm = vector_at(m, p, plane).iter().map(|v| v * v).sum::<f64>().sqrt();
                if !(1.0 - 1e-6..=1.0 + 1e-6).contains(&norm) {
                    return Err(Error::InvalidValue {
                        what: "normal length",
                        value: norm,
                        detail: "input normals must be unit vectors within 1e-6",
                    });
                }
            }
        }
        Ok(NormalPredictionSet { maps })
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn maps(&self) -> &[Tensor] {
        &self.maps
    }
}

fn vector_at(map: &Tensor, pixel: usize, plane: usize) -> [f64; 3] {
    let d = map.data();
    [d[pixel], d[plane + pixel], d[2 * plane + pixel]]
}

/// Per pixel, pick the prediction with the highest cosine similarity to the
/// normalized mean of the set. Output vectors are members of the input set,
/// never blends. Ties go to the lowest index; a degenerate mean (norm below
/// 1e-8) falls back to prediction 0.
pub fn ensemble_normals(preds: &NormalPredictionSet) -> Result<Tensor> {
    let shape = preds.maps[0].shape().to_vec();
    let plane = preds.maps[0].len() / 3;
    let n = preds.len();
    let mut out = vec![0.0; 3 * plane];
    for p in 0..plane {
        let mut mean = [0.0f64; 3];
        for m in &preds.maps {
            let v = vector_at(m, p, plane);
            for (acc, x) in mean.iter_mut().zip(v) {
                *acc += x;
            }
        }
        for acc in &mut mean {
            *acc /= n as f64;
        }
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        let chosen = if norm < 1e-8 {
            0
        } else {
            let unit = [mean[0] / norm, mean[1] / norm, mean[2] / norm];
            let mut best = 0;
            let mut best_dot = f64::NEG_INFINITY;
            for (i, m) in preds.maps.iter().enumerate() {
                let v = vector_at(m, p, plane);
                let dot = v[0] * unit[0] + v[1] * unit[1] + v[2] * unit[2];
                if dot > best_dot {
                    best_dot = dot;
                    best = i;
                }
            }
            best
        };
        let v = vector_at(&preds.maps[chosen], p, plane);
        out[p] = v[0];
        out[plane + p] = v[1];
        out[2 * plane + p] = v[2];
    }
    Ok(Tensor::internal(shape, out, None))
}

fn broadcast_compatible(image: &Tensor, shading: &Tensor) -> bool {
    if image.shape() == shading.shape() {
        return true;
    }
    matches!(
        (image.shape(), shading.shape()),
        ([c, h, w], [h2, w2]) if *c > 0 && h == h2 && w == w2
    )
}

fn mul_broadcast(albedo: &Tensor, shading: &Tensor) -> Tensor {
    if albedo.shape() == shading.shape() {
        return albedo.hadamard(shading).expect("checked shapes");
    }
    // single-channel shading over each albedo channel
    let plane = shading.len();
    let data = albedo
        .data()
        .iter()
        .enumerate()
        .map(|(i, a)| a * shading.data()[i % plane])
        .collect();
    Tensor::internal(albedo.shape().to_vec(), data, None)
}

/// Non-diffuse residual: `R = I - A * l`. Single-channel shading
/// broadcasts over the albedo's color channels.
pub fn lighting_residual(image: &Tensor, albedo: &Tensor, shading: &Tensor) -> Result<Tensor> {
    if image.shape() != albedo.shape() || !broadcast_compatible(image, shading) {
        return Err(Error::ShapeMismatch {
            op: "lighting_residual",
            left: image.shape().to_vec(),
            right: shading.shape().to_vec(),
        });
    }
    image.sub(&mul_broadcast(albedo, shading))
}

/// `I = A * l + R`; the exact inverse of [`lighting_residual`].
pub fn reconstruct(albedo: &Tensor, shading: &Tensor, residual: &Tensor) -> Result<Tensor> {
    if albedo.shape() != residual.shape() || !broadcast_compatible(albedo, shading) {
        return Err(Error::ShapeMismatch {
            op: "reconstruct",
            left: albedo.shape().to_vec(),
            right: residual.shape().to_vec(),
        });
    }
    mul_broadcast(albedo, shading).add(residual)
}

/// The full decomposition bundle; construction goes through
/// [`lighting_residual`], so the identity holds by construction.
#[derive(Debug, Clone)]
pub struct LightingDecomposition {
    pub image: Tensor,
    pub albedo: Tensor,
    pub shading: Tensor,
    pub residual: Tensor,
}

impl LightingDecomposition {
    pub fn new(image: Tensor, albedo: Tensor, shading: Tensor) -> Result<Self> {
        let residual = lighting_residual(&image, &albedo, &shading)?;
        Ok(LightingDecomposition {
            image,
            albedo,
            shading,
            residual,
        })
    }
}

//! Latent grids and the synthetic training task.
//!
//! The toy task paints the material's mean value into the region where
//! depth < 0.5, modulated by the lighting intensity, on top of a constant
//! latent bias. Every condition channel carries signal the model must read,
//! which is what makes leave-one-out ablations observable at this scale.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io;
use crate::rng::Rng;
use crate::shader_lora::Condition;
use crate::tensor::Tensor;

/// Constant component of every target latent. A large, trivially learnable
/// mode keeps 2000 small-step SGD iterations enough to demonstrate descent.
pub const TARGET_BIAS: f64 = 8.0;
/// Gain on the painted (material x depth-region x lighting) term.
pub const TARGET_GAIN: f64 = 4.0;

/// Token block roles, in sequence order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Noise,
    Material,
    Depth,
    Normal,
    Lighting,
}

pub const ROLES: [Role; 5] = [
    Role::Noise,
    Role::Material,
    Role::Depth,
    Role::Normal,
    Role::Lighting,
];

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Noise => "noise",
            Role::Material => "material",
            Role::Depth => "depth",
            Role::Normal => "normal",
            Role::Lighting => "lighting",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            Role::Normal => 3,
            _ => 1,
        }
    }

    pub fn condition(self) -> Option<Condition> {
        match self {
            Role::Depth => Some(Condition::Depth),
            Role::Normal => Some(Condition::Normal),
            Role::Lighting => Some(Condition::Lighting),
            _ => None,
        }
    }
}

/// A latent grid tagged with its role; shape `[H, W]`, or `[3, H, W]` for
/// normals.
#[derive(Debug, Clone)]
pub struct LatentImage {
    pub role: Role,
    pub data: Tensor,
}

impl LatentImage {
    pub fn new(role: Role, data: Tensor) -> Result<Self> {
        let img = LatentImage { role, data };
        img.validate()?;
        Ok(img)
    }

    pub fn grid(&self) -> (usize, usize) {
        match self.data.shape() {
            [h, w] => (*h, *w),
            [_, h, w] => (*h, *w),
            _ => (0, 0),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok_shape = match (self.role.channels(), self.data.shape()) {
            (1, [_, _]) => true,
            (c, [c2, _, _]) => c == *c2,
            _ => false,
        };
        if !ok_shape {
            return Err(Error::InvalidShape {
                op: "latent",
                shape: self.data.shape().to_vec(),
                detail: format!("role {} wants {} channel(s)", self.role.name(), self.role.channels()),
            });
        }
        match self.role {
            Role::Depth => {
                if self.data.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::Config("depth values must lie in [0, 1]".into()));
                }
            }
            Role::Lighting => {
                if self.data.data().iter().any(|v| *v < 0.0) {
                    return Err(Error::Config("lighting values must be non-negative".into()));
                }
            }
            Role::Normal => {
                let plane = self.data.len() / 3;
                let d = self.data.data();
                for p in 0..plane {
                    let n2 = d[p] * d[p] + d[plane + p] * d[plane + p]
                        + d[2 * plane + p] * d[2 * plane + p];
                    if (n2.sqrt() - 1.0).abs() > 1e-6 {
                        return Err(Error::Config(format!(
                            "normal at pixel {p} has length {}, want 1",
                            n2.sqrt()
                        )));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Conditioning inputs to / of the model; a `None` condition is dropped
/// from the token sequence entirely.
#[derive(Debug, Clone)]
pub struct CondInputs {
    pub material: Tensor,
    pub depth: Option<Tensor>,
    pub normal: Option<Tensor>,
    pub lighting: Option<Tensor>,
}

impl CondInputs {
    pub fn grid(&self) -> Result<(usize, usize)> {
        match self.material.shape() {
            [h, w] => Ok((*h, *w)),
            _ => Err(Error::InvalidShape {
                op: "cond_inputs",
                shape: self.material.shape().to_vec(),
                detail: "material latent must be [H, W]".into(),
            }),
        }
    }

    pub fn condition(&self, cond: Condition) -> Option<&Tensor> {
        match cond {
            Condition::Depth => self.depth.as_ref(),
            Condition::Normal => self.normal.as_ref(),
            Condition::Lighting => self.lighting.as_ref(),
        }
    }

    /// Same inputs with one condition removed (leave-one-out ablation).
    pub fn without(&self, cond: Condition) -> CondInputs {
        let mut out = self.clone();
        match cond {
            Condition::Depth => out.depth = None,
            Condition::Normal => out.normal = None,
            Condition::Lighting => out.lighting = None,
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ToySample {
    pub material: Tensor,
    pub depth: Tensor,
    pub normal: Tensor,
    pub lighting: Tensor,
    pub target: Tensor,
}

impl ToySample {
    pub fn cond_inputs(&self) -> CondInputs {
        CondInputs {
            material: self.material.detached(),
            depth: Some(self.depth.detached()),
            normal: Some(self.normal.detached()),
            lighting: Some(self.lighting.detached()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub samples: Vec<ToySample>,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn grid(&self) -> Result<(usize, usize)> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| Error::Config("dataset is empty".into()))?;
        match first.material.shape() {
            [h, w] => Ok((*h, *w)),
            other => Err(Error::InvalidShape {
                op: "dataset",
                shape: other.to_vec(),
                detail: "material latent must be [H, W]".into(),
            }),
        }
    }
}

fn smooth_field(h: usize, w: usize, lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    let fx = 1.0 + rng.below(2) as f64;
    let fy = 1.0 + rng.below(2) as f64;
    let phase = rng.uniform_in(0.0, std::f64::consts::TAU);
    let mid = 0.5 * (lo + hi);
    let amp = 0.5 * (hi - lo);
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let s = (std::f64::consts::TAU * (fx * x as f64 / w as f64 + fy * y as f64 / h as f64)
                + phase)
                .sin();
            data[y * w + x] = mid + amp * s;
        }
    }
    Tensor::internal(vec![h, w], data, None)
}

fn depth_field(h: usize, w: usize, rng: &mut Rng) -> Tensor {
    // tilted plane through the grid center, clamped to [0, 1]; guarantees
    // regions on both sides of the 0.5 paint threshold
    let a = rng.uniform_in(-1.0, 1.0);
    let b = rng.uniform_in(-1.0, 1.0);
    let (a, b) = if a.abs() + b.abs() < 0.3 { (0.7, 0.4) } else { (a, b) };
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = 0.5 + a * (x as f64 - cx) / w as f64 + b * (y as f64 - cy) / h as f64;
            data[y * w + x] = v.clamp(0.0, 1.0);
        }
    }
    Tensor::internal(vec![h, w], data, None)
}

/// Unit surface normals from the depth map's central differences.
pub fn normals_from_depth(depth: &Tensor) -> Result<Tensor> {
    let (h, w) = depth.dims2("normals_from_depth")?;
    let d = depth.data();
    let at = |y: usize, x: usize| d[y * w + x];
    let slope_gain = 4.0;
    let mut data = vec![0.0; 3 * h * w];
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let dx = match (x, w) {
                (0, _) => at(y, 1.min(w - 1)) - at(y, 0),
                (x, w) if x == w - 1 => at(y, x) - at(y, x - 1),
                _ => 0.5 * (at(y, x + 1) - at(y, x - 1)),
            };
            let dy = match (y, h) {
                (0, _) => at(1.min(h - 1), x) - at(0, x),
                (y, h) if y == h - 1 => at(y, x) - at(y - 1, x),
                _ => 0.5 * (at(y + 1, x) - at(y - 1, x)),
            };
            let v = [-dx * slope_gain, -dy * slope_gain, 1.0];
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            let p = y * w + x;
            data[p] = v[0] / norm;
            data[plane + p] = v[1] / norm;
            data[2 * plane + p] = v[2] / norm;
        }
    }
    Ok(Tensor::internal(vec![3, h, w], data, None))
}

/// `TARGET_BIAS + TARGET_GAIN * mean(material) * [depth < 0.5] * lighting`.
pub fn toy_target(material: &Tensor, depth: &Tensor, lighting: &Tensor) -> Result<Tensor> {
    if material.shape() != depth.shape() || material.shape() != lighting.shape() {
        return Err(Error::ShapeMismatch {
            op: "toy_target",
            left: material.shape().to_vec(),
            right: depth.shape().to_vec(),
        });
    }
    let mean_material = material.mean_value();
    let data = depth
        .data()
        .iter()
        .zip(lighting.data())
        .map(|(d, l)| {
            let paint = if *d < 0.5 { mean_material * l } else { 0.0 };
            TARGET_BIAS + TARGET_GAIN * paint
        })
        .collect();
    Ok(Tensor::internal(material.shape().to_vec(), data, None))
}

/// Deterministic synthetic dataset of `n` samples on an `h x w` grid.
pub fn synthetic_dataset(n: usize, h: usize, w: usize, rng: &mut Rng) -> Result<ToyDataset> {
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let material = smooth_field(h, w, 0.0, 1.0, rng);
        let depth = depth_field(h, w, rng);
        let normal = normals_from_depth(&depth)?;
        let lighting = smooth_field(h, w, 0.25, 1.25, rng);
        let target = toy_target(&material, &depth, &lighting)?;
        samples.push(ToySample {
            material,
            depth,
            normal,
            lighting,
            target,
        });
    }
    Ok(ToyDataset { samples })
}

const SAMPLE_FILES: [&str; 5] = ["material", "depth", "normal", "lighting", "target"];

pub fn save_dataset(dir: &Path, data: &ToyDataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, s) in data.samples.iter().enumerate() {
        let sample_dir = dir.join(format!("sample_{i:04}"));
        std::fs::create_dir_all(&sample_dir)?;
        let tensors = [&s.material, &s.depth, &s.normal, &s.lighting, &s.target];
        for (name, t) in SAMPLE_FILES.iter().zip(tensors) {
            io::write_tensor(&sample_dir.join(format!("{name}.txt")), t)?;
        }
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<ToyDataset> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("sample_"))
        })
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::Config(format!(
            "no sample_* directories under {}",
            dir.display()
        )));
    }
    let mut samples = Vec::with_capacity(entries.len());
    for sample_dir in entries {
        let read = |name: &str| io::read_tensor(&sample_dir.join(format!("{name}.txt")));
        samples.push(ToySample {
            material: read("material")?,
            depth: read("depth")?,
            normal: read("normal")?,
            lighting: read("lighting")?,
            target: read("target")?,
        });
    }
    Ok(ToyDataset { samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_respects_latent_invariants() {
        let mut rng = Rng::new(19);
        let data = synthetic_dataset(4, 8, 8, &mut rng).unwrap();
        assert_eq!(data.len(), 4);
        for s in &data.samples {
            LatentImage::new(Role::Depth, s.depth.detached()).unwrap();
            LatentImage::new(Role::Normal, s.normal.detached()).unwrap();
            LatentImage::new(Role::Lighting, s.lighting.detached()).unwrap();
            // depth threshold splits the grid
            let below = s.depth.data().iter().filter(|v| **v < 0.5).count();
            assert!(below > 0 && below < s.depth.len());
        }
    }

    #[test]
    fn target_paints_only_the_near_region() {
        let material = Tensor::from_vec(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let depth = Tensor::from_vec(vec![1, 2], vec![0.2, 0.9]).unwrap();
        let lighting = Tensor::from_vec(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let target = toy_target(&material, &depth, &lighting).unwrap();
        assert_eq!(target.data()[0], TARGET_BIAS + TARGET_GAIN * 0.5);
        assert_eq!(target.data()[1], TARGET_BIAS);
    }

    #[test]
    fn latent_validation_rejects_bad_ranges() {
        let bad_depth = Tensor::from_vec(vec![1, 2], vec![0.5, 1.5]).unwrap();
        assert!(LatentImage::new(Role::Depth, bad_depth).is_err());
        let bad_light = Tensor::from_vec(vec![1, 2], vec![-0.1, 0.5]).unwrap();
        assert!(LatentImage::new(Role::Lighting, bad_light).is_err());
        let bad_normal = Tensor::from_vec(vec![3, 1, 1], vec![0.5, 0.0, 0.0]).unwrap();
        assert!(LatentImage::new(Role::Normal, bad_normal).is_err());
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let mut rng = Rng::new(23);
        let data = synthetic_dataset(2, 4, 4, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &data).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in data.samples.iter().zip(&back.samples) {
            assert!(a.material.same_bits(&b.material));
            assert!(a.target.same_bits(&b.target));
        }
    }
}

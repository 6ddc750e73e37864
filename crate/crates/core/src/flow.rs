//! Rectified flow: linear noising paths, the flow-matching loss, and the
//! Euler sampler that integrates a learned velocity field from noise back
//! to data.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Sampler / loss configuration. The loss weighting is uniform (the
/// time-dependent weight and signal-to-noise factors are fixed to 1), which
/// is why they do not appear as fields here.
#[derive(Debug, Clone)]
pub struct FlowConfig {
    pub num_steps: usize,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            num_steps: 25,
            seed: 0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::Config("num_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// One draw along the noising path; `xt` is exactly `(1-t) x0 + t eps`.
#[derive(Debug, Clone)]
pub struct FlowSample {
    pub x0: Tensor,
    pub eps: Tensor,
    pub t: f64,
    pub xt: Tensor,
}

impl FlowSample {
    pub fn draw(x0: &Tensor, rng: &mut Rng) -> Result<Self> {
        let t = rng.uniform();
        let eps = Tensor::random_normal(x0.shape().to_vec(), rng);
        let xt = flow_path(x0, &eps, t)?;
        Ok(FlowSample {
            x0: x0.detached(),
            eps,
            t,
            xt,
        })
    }
}

/// `x_t = (1 - t) x0 + t eps`.
pub fn flow_path(x0: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidValue {
            what: "t",
            value: t,
            detail: "flow path time must lie in [0, 1]",
        });
    }
    x0.scale(1.0 - t).add(&eps.scale(t))
}

/// Anything that predicts a velocity field over the noise latent. The
/// conditioning inputs live inside the implementor; `tape` carries
/// gradients when the implementor's parameters are tracked and is inert
/// otherwise.
pub trait VelocityModel {
    fn velocity(&self, tape: &Tape, xt: &Tensor, t: f64) -> Result<Tensor>;

    /// Shape of the latent the model denoises.
    fn latent_shape(&self) -> Vec<usize>;
}

/// Flow-matching loss at a fixed draw: mean squared error between the
/// predicted velocity at `x_t` and the path velocity `eps - x0`.
pub fn cfm_loss_at(
    tape: &Tape,
    model: &impl VelocityModel,
    x0: &Tensor,
    eps: &Tensor,
    t: f64,
) -> Result<Tensor> {
    let xt = flow_path(x0, eps, t)?;
    let target = eps.sub(x0)?;
    let pred = model.velocity(tape, &xt, t)?;
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "cfm_loss",
            left: pred.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    tape.mse(&pred, &target)
}

/// Flow-matching loss with `t ~ U(0, 1)` and `eps ~ N(0, I)` drawn from
/// `rng`. Differentiable with respect to whatever the model tracks.
pub fn cfm_loss(
    tape: &Tape,
    model: &impl VelocityModel,
    x0: &Tensor,
    rng: &mut Rng,
) -> Result<Tensor> {
    let t = rng.uniform();
    let eps = Tensor::random_normal(x0.shape().to_vec(), rng);
    cfm_loss_at(tape, model, x0, &eps, t)
}

/// Integrate the velocity field from `t = 1` (pure noise) down to `t = 0`
/// with uniform Euler steps: `x <- x - dt * v(x, t)`.
pub fn sample_euler(model: &impl VelocityModel, cfg: &FlowConfig) -> Result<Tensor> {
    let mut rng = Rng::new(cfg.seed);
    sample_euler_from(model, cfg, &mut rng)
}

/// As [`sample_euler`] but drawing the initial noise from a caller-owned
/// generator, so cached and uncached samplers can share one stream.
pub fn sample_euler_from(
    model: &impl VelocityModel,
    cfg: &FlowConfig,
    rng: &mut Rng,
) -> Result<Tensor> {
    cfg.validate()?;
    let tape = Tape::new();
    let mut x = Tensor::random_normal(model.latent_shape(), rng);
    let dt = 1.0 / cfg.num_steps as f64;
    for step in 0..cfg.num_steps {
        let t = 1.0 - step as f64 * dt;
        let v = model.velocity(&tape, &x, t)?;
        x = x.sub(&v.scale(dt))?;
        if !x.all_finite() {
            return Err(Error::NonFiniteState { step });
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The true velocity for a known (x0, eps) pair is the constant
    /// `eps - x0`; Euler integration of a constant field is exact.
    struct OraclePath {
        x0: Tensor,
        eps: Tensor,
    }

    impl VelocityModel for OraclePath {
        fn velocity(&self, _tape: &Tape, _xt: &Tensor, _t: f64) -> Result<Tensor> {
            self.eps.sub(&self.x0)
        }

        fn latent_shape(&self) -> Vec<usize> {
            self.x0.shape().to_vec()
        }
    }

    struct ZeroVelocity {
        shape: Vec<usize>,
    }

    impl VelocityModel for ZeroVelocity {
        fn velocity(&self, _tape: &Tape, xt: &Tensor, _t: f64) -> Result<Tensor> {
            Ok(Tensor::zeros(xt.shape().to_vec()))
        }

        fn latent_shape(&self) -> Vec<usize> {
            self.shape.clone()
        }
    }

    #[test]
    fn path_endpoints_are_exact() {
        let mut rng = Rng::new(4);
        let x0 = Tensor::random_normal(vec![3, 3], &mut rng);
        let eps = Tensor::random_normal(vec![3, 3], &mut rng);
        assert!(flow_path(&x0, &eps, 0.0).unwrap().same_values(&x0));
        assert!(flow_path(&x0, &eps, 1.0).unwrap().same_values(&eps));
    }

    #[test]
    fn path_midpoint_of_scalars() {
        let x0 = Tensor::scalar(2.0).unwrap();
        let eps = Tensor::scalar(0.0).unwrap();
        let xt = flow_path(&x0, &eps, 0.5).unwrap();
        assert_eq!(xt.data()[0], 1.0);
    }

    #[test]
    fn path_rejects_out_of_range_time() {
        let x = Tensor::scalar(0.0).unwrap();
        assert!(flow_path(&x, &x, -0.01).is_err());
        assert!(flow_path(&x, &x, 1.01).is_err());
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let mut rng = Rng::new(7);
        let x0 = Tensor::random_normal(vec![4], &mut rng);
        let model = OraclePath {
            x0: x0.detached(),
            eps: Tensor::zeros(vec![4]),
        };
        // force eps used by the loss to match the model's constant
        let tape = Tape::new();
        let loss = cfm_loss_at(&tape, &model, &x0, &model.eps, 0.3).unwrap();
        assert_eq!(loss.scalar_value().unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_costs_its_square() {
        struct Offset {
            inner: OraclePath,
            c: f64,
        }
        impl VelocityModel for Offset {
            fn velocity(&self, tape: &Tape, xt: &Tensor, t: f64) -> Result<Tensor> {
                Ok(self.inner.velocity(tape, xt, t)?.map(|v| v + self.c))
            }
            fn latent_shape(&self) -> Vec<usize> {
                self.inner.latent_shape()
            }
        }
        let mut rng = Rng::new(8);
        let x0 = Tensor::random_normal(vec![5], &mut rng);
        let eps = Tensor::random_normal(vec![5], &mut rng);
        let model = Offset {
            inner: OraclePath {
                x0: x0.detached(),
                eps: eps.detached(),
            },
            c: 0.7,
        };
        let tape = Tape::new();
        let loss = cfm_loss_at(&tape, &model, &x0, &eps, 0.6).unwrap();
        assert!((loss.scalar_value().unwrap() - 0.49).abs() < 1e-12);
    }

    #[test]
    fn one_parameter_model_gradient_matches_finite_differences() {
        // v(x, t) = w * x for one scalar weight w
        struct Linear {
            w: Tensor,
        }
        impl VelocityModel for Linear {
            fn velocity(&self, tape: &Tape, xt: &Tensor, _t: f64) -> Result<Tensor> {
                let rows = tape.reshape(xt, vec![xt.len(), 1])?;
                let out = tape.matmul(&rows, &self.w)?;
                tape.reshape(&out, xt.shape().to_vec())
            }
            fn latent_shape(&self) -> Vec<usize> {
                vec![3]
            }
        }
        let mut rng = Rng::new(10);
        let x0 = Tensor::random_normal(vec![3], &mut rng);
        let eps = Tensor::random_normal(vec![3], &mut rng);
        let t = 0.42;
        let w0 = Tensor::from_vec(vec![1, 1], vec![0.8]).unwrap();

        let tape = Tape::new();
        let model = Linear { w: tape.leaf(&w0) };
        let loss = cfm_loss_at(&tape, &model, &x0, &eps, t).unwrap();
        tape.backward(&loss).unwrap();
        let grad = tape.grad(&model.w).unwrap().data()[0];

        let fd = crate::tape::finite_diff_grad(
            |w| {
                let tape = Tape::new();
                let model = Linear { w: w.detached() };
                cfm_loss_at(&tape, &model, &x0, &eps, t)?.scalar_value()
            },
            &w0,
            1e-5,
        )
        .unwrap()
        .data()[0];
        assert!(
            (grad - fd).abs() / fd.abs().max(1e-6) < 1e-4,
            "{grad} vs {fd}"
        );
    }

    #[test]
    fn oracle_velocity_recovers_x0_in_one_step() {
        let mut rng = Rng::new(21);
        let x0 = Tensor::random_normal(vec![2, 2], &mut rng);
        let model = OraclePath {
            x0: x0.detached(),
            eps: Tensor::zeros(vec![2, 2]),
        };
        // start exactly at eps by seeding, then overriding the state:
        // integrate analytically instead — one Euler step from any x lands on
        // x - (eps - x0); starting at eps this is x0.
        let one = flow_path(&x0, &model.eps, 1.0).unwrap(); // = eps
        let v = model.eps.sub(&x0).unwrap();
        let out = one.sub(&v.scale(1.0)).unwrap();
        assert!(out.max_abs_diff(&x0) < 1e-12);
    }

    #[test]
    fn oracle_recovery_is_independent_of_step_count() {
        let mut rng = Rng::new(22);
        let x0 = Tensor::random_normal(vec![3, 3], &mut rng);
        for steps in [1, 5, 25] {
            let cfg = FlowConfig {
                num_steps: steps,
                seed: 99,
            };
            // the sampler's own initial draw plays eps for the oracle
            let mut probe = Rng::new(cfg.seed);
            let eps = Tensor::random_normal(vec![3, 3], &mut probe);
            let model = OraclePath {
                x0: x0.detached(),
                eps,
            };
            let out = sample_euler(&model, &cfg).unwrap();
            assert!(out.max_abs_diff(&x0) < 1e-10, "steps {steps}");
        }
    }

    #[test]
    fn zero_velocity_returns_initial_noise() {
        let cfg = FlowConfig {
            num_steps: 25,
            seed: 5,
        };
        let model = ZeroVelocity { shape: vec![4, 4] };
        let out = sample_euler(&model, &cfg).unwrap();
        let mut probe = Rng::new(cfg.seed);
        let init = Tensor::random_normal(vec![4, 4], &mut probe);
        assert!(out.same_values(&init));
    }

    #[test]
    fn equal_seeds_give_identical_trajectories() {
        let mut rng = Rng::new(31);
        let x0 = Tensor::random_normal(vec![2, 3], &mut rng);
        let mut probe = Rng::new(77);
        let eps = Tensor::random_normal(vec![2, 3], &mut probe);
        let model = OraclePath {
            x0: x0.detached(),
            eps,
        };
        let cfg = FlowConfig {
            num_steps: 25,
            seed: 77,
        };
        let a = sample_euler(&model, &cfg).unwrap();
        let b = sample_euler(&model, &cfg).unwrap();
        assert!(a.same_bits(&b));
    }

    #[test]
    fn loss_is_non_negative_and_zero_only_at_match() {
        let mut rng = Rng::new(40);
        let x0 = Tensor::random_normal(vec![6], &mut rng);
        let model = ZeroVelocity { shape: vec![6] };
        let tape = Tape::new();
        let eps = Tensor::random_normal(vec![6], &mut rng);
        let loss = cfm_loss_at(&tape, &model, &x0, &eps, 0.5)
            .unwrap()
            .scalar_value()
            .unwrap();
        assert!(loss > 0.0);
    }
}

//! First-order optimizers and checks of how they react to scaled gradients.
//!
//! Writing a relation weight as `alpha = lambda * e` multiplies the gradient
//! that reaches `e` by `lambda`. For SGD, Momentum and Nesterov the update
//! is linear in the gradient, so `e` moves `lambda` times further and
//! `alpha` `lambda^2` times further. Adagrad and Adam (with `eps = 0`)
//! divide the scale back out, so `e` moves as far as before and `alpha`
//! `lambda` times further.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::DenseMatrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Nesterov,
    Adagrad,
    Adam,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 5] = [Self::Sgd, Self::Momentum, Self::Nesterov, Self::Adagrad, Self::Adam];

    /// Whether the update is invariant to a positive rescaling of the gradient.
    pub fn is_adaptive(self) -> bool {
        matches!(self, Self::Adagrad | Self::Adam)
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "momentum" => Ok(Self::Momentum),
            "nesterov" => Ok(Self::Nesterov),
            "adagrad" => Ok(Self::Adagrad),
            "adam" => Ok(Self::Adam),
            other => Err(Error::InvalidArgument(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            weight_decay: 0.0,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be non-negative", self.lr)));
        }
        if self.weight_decay < 0.0 || self.eps < 0.0 || self.momentum < 0.0 {
            return Err(Error::InvalidArgument("weight decay, eps and momentum must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("beta1 and beta2 must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Kind-specific state of one parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Buffers {
    /// Momentum velocity, Adagrad accumulator or Adam first moment.
    pub first: Vec<f64>,
    /// Adam second moment.
    pub second: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    buffers: Vec<Option<Buffers>>,
    t: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            buffers: Vec::new(),
            t: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn buffers(&self, index: usize) -> Option<&Buffers> {
        self.buffers.get(index).and_then(Option::as_ref)
    }

    /// Starts a new step; Adam's bias correction uses the new count.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Computes and applies the update for parameter `index`, returning it.
    pub fn update(&mut self, index: usize, param: &mut DenseMatrix, grad: &DenseMatrix, decay: bool) -> Result<Vec<f64>> {
        if param.shape() != grad.shape() {
            return Err(Error::Shape {
                op: "optimizer update",
                detail: format!("parameter {:?} vs gradient {:?}", param.shape(), grad.shape()),
            });
        }
        if self.t == 0 {
            return Err(Error::InvalidArgument("update called before begin_step".into()));
        }
        let g: Vec<f64> = if decay && self.config.weight_decay > 0.0 {
            grad.data()
                .iter()
                .zip(param.data())
                .map(|(g, p)| g + self.config.weight_decay * p)
                .collect()
        } else {
            grad.data().to_vec()
        };
        let delta = self.delta(index, &g)?;
        for (p, d) in param.data_mut().iter_mut().zip(&delta) {
            *p += d;
        }
        Ok(delta)
    }

    /// The kind-specific update for gradient `g`; buffers advance.
    pub fn delta(&mut self, index: usize, g: &[f64]) -> Result<Vec<f64>> {
        if self.buffers.len() <= index {
            self.buffers.resize(index + 1, None);
        }
        let c = &self.config;
        let buf = self.buffers[index].get_or_insert_with(|| Buffers {
            first: vec![0.0; g.len()],
            second: vec![0.0; g.len()],
        });
        if buf.first.len() != g.len() {
            return Err(Error::Shape {
                op: "optimizer update",
                detail: format!("buffer of {} entries, gradient of {}", buf.first.len(), g.len()),
            });
        }
        let lr = c.lr;
        let out = match c.kind {
            OptimizerKind::Sgd => g.iter().map(|g| -lr * g).collect(),
            OptimizerKind::Momentum => g
                .iter()
                .zip(buf.first.iter_mut())
                .map(|(g, v)| {
                    *v = c.momentum * *v + g;
                    -lr * *v
                })
                .collect(),
            OptimizerKind::Nesterov => g
                .iter()
                .zip(buf.first.iter_mut())
                .map(|(g, v)| {
                    *v = c.momentum * *v + g;
                    -lr * (g + c.momentum * *v)
                })
                .collect(),
            OptimizerKind::Adagrad => g
                .iter()
                .zip(buf.first.iter_mut())
                .map(|(g, acc)| {
                    *acc += g * g;
                    let denom = acc.sqrt() + c.eps;
                    if denom == 0.0 {
                        0.0
                    } else {
                        -lr * g / denom
                    }
                })
                .collect(),
            OptimizerKind::Adam => {
                let t = self.t as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                g.iter()
                    .zip(buf.first.iter_mut().zip(buf.second.iter_mut()))
                    .map(|(g, (m, v))| {
                        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        let denom = v_hat.sqrt() + c.eps;
                        if denom == 0.0 {
                            0.0
                        } else {
                            -lr * m_hat / denom
                        }
                    })
                    .collect()
            }
        };
        Ok(out)
    }
}

/// Per-step outcome of a scaling check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRatio {
    /// Mean over coordinates of `delta_e' / delta_e`.
    pub e_ratio: f64,
    /// Mean over coordinates of `delta_alpha' / delta_alpha`.
    pub alpha_ratio: f64,
    pub max_rel_deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub kind: OptimizerKind,
    pub lambda: f64,
    pub eps: f64,
    pub steps: usize,
    pub expected_e_ratio: f64,
    pub expected_alpha_ratio: f64,
    pub per_step: Vec<StepRatio>,
    /// Includes the buffer relations (`m' = lambda m`, `v' = lambda^2 v`, ...).
    pub max_rel_deviation: f64,
    pub passed: bool,
}

pub const SCALING_TOLERANCE: f64 = 1e-9;

fn rel_dev(observed: f64, expected: f64) -> f64 {
    let scale = observed.abs().max(expected.abs());
    if scale == 0.0 {
        0.0
    } else {
        (observed - expected).abs() / scale
    }
}

/// Runs the optimizer on `alpha` fed `g_t` and, in parallel, on `e` fed
/// `lambda * g_t`, and compares the per-step updates with the predicted
/// ratios. Weight decay is forced to 0; pass `eps = 0` for the exact identity.
pub fn verify_scaling_identity(
    kind: OptimizerKind,
    lambda: f64,
    trace: &[Vec<f64>],
    lr: f64,
    eps: f64,
) -> Result<ScalingReport> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    if trace.is_empty() {
        return Err(Error::InvalidArgument("gradient trace is empty".into()));
    }
    let config = OptimizerConfig {
        weight_decay: 0.0,
        eps,
        ..OptimizerConfig::new(kind, lr)
    };
    let mut plain = Optimizer::new(config.clone())?;
    let mut scaled = Optimizer::new(config)?;
    let expected_e = if kind.is_adaptive() { 1.0 } else { lambda };
    let expected_alpha = lambda * expected_e;
    let mut per_step = Vec::with_capacity(trace.len());
    let mut worst: f64 = 0.0;
    for g in trace {
        plain.begin_step();
        scaled.begin_step();
        let d_alpha = plain.delta(0, g)?;
        let g_scaled: Vec<f64> = g.iter().map(|v| lambda * v).collect();
        let d_e = scaled.delta(0, &g_scaled)?;

        let mut step_worst: f64 = 0.0;
        let (mut e_sum, mut a_sum, mut counted) = (0.0, 0.0, 0usize);
        for (da, de) in d_alpha.iter().zip(&d_e) {
            let d_alpha_scaled = lambda * de;
            step_worst = step_worst
                .max(rel_dev(*de, expected_e * da))
                .max(rel_dev(d_alpha_scaled, expected_alpha * da));
            if *da != 0.0 {
                e_sum += de / da;
                a_sum += d_alpha_scaled / da;
                counted += 1;
            }
        }
        let (b0, b1) = (plain.buffers(0).unwrap(), scaled.buffers(0).unwrap());
        let (first_factor, second_factor) = match kind {
            OptimizerKind::Sgd => (0.0, 0.0),
            OptimizerKind::Momentum | OptimizerKind::Nesterov => (lambda, 0.0),
            OptimizerKind::Adagrad => (lambda * lambda, 0.0),
            OptimizerKind::Adam => (lambda, lambda * lambda),
        };
        for (x, y) in b0.first.iter().zip(&b1.first) {
            if first_factor != 0.0 {
                step_worst = step_worst.max(rel_dev(*y, first_factor * x));
            }
        }
        for (x, y) in b0.second.iter().zip(&b1.second) {
            if second_factor != 0.0 {
                step_worst = step_worst.max(rel_dev(*y, second_factor * x));
            }
        }
        worst = worst.max(step_worst);
        let n = counted.max(1) as f64;
        per_step.push(StepRatio {
            e_ratio: e_sum / n,
            alpha_ratio: a_sum / n,
            max_rel_deviation: step_worst,
        });
    }
    Ok(ScalingReport {
        kind,
        lambda,
        eps,
        steps: trace.len(),
        expected_e_ratio: expected_e,
        expected_alpha_ratio: expected_alpha,
        per_step,
        max_rel_deviation: worst,
        passed: worst < SCALING_TOLERANCE,
    })
}

/// `steps` standard-normal gradients of length `dim`.
pub fn random_trace<R: Rng + ?Sized>(rng: &mut R, steps: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..steps)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_step(kind: OptimizerKind, lr: f64, eps: f64, g: f64) -> f64 {
        let mut opt = Optimizer::new(OptimizerConfig {
            eps,
            ..OptimizerConfig::new(kind, lr)
        })
        .unwrap();
        let mut p = DenseMatrix::scalar(1.0);
        opt.begin_step();
        opt.update(0, &mut p, &DenseMatrix::scalar(g), false).unwrap()[0]
    }

    #[test]
    fn sgd_step() {
        assert!((one_step(OptimizerKind::Sgd, 0.1, 0.0, 2.0) + 0.2).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_by_hand() {
        // m_hat = 0.5, v_hat = 0.25, update = -0.001 * 0.5 / 0.5
        assert!((one_step(OptimizerKind::Adam, 0.001, 0.0, 0.5) + 0.001).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_fixpoint() {
        for kind in OptimizerKind::ALL {
            let mut opt = Optimizer::new(OptimizerConfig {
                eps: 0.0,
                ..OptimizerConfig::new(kind, 0.01)
            })
            .unwrap();
            let mut p = DenseMatrix::row_vector(vec![0.3, -1.0]);
            for _ in 0..5 {
                opt.begin_step();
                opt.update(0, &mut p, &DenseMatrix::zeros(1, 2), false).unwrap();
            }
            assert_eq!(p.data(), &[0.3, -1.0], "{kind:?}");
        }
    }

    #[test]
    fn momentum_and_nesterov_by_hand() {
        let mut m = Optimizer::new(OptimizerConfig::new(OptimizerKind::Momentum, 0.1)).unwrap();
        let mut n = Optimizer::new(OptimizerConfig::new(OptimizerKind::Nesterov, 0.1)).unwrap();
        m.begin_step();
        n.begin_step();
        assert!((m.delta(0, &[1.0]).unwrap()[0] + 0.1).abs() < 1e-15);
        assert!((n.delta(0, &[1.0]).unwrap()[0] + 0.19).abs() < 1e-15);
        m.begin_step();
        n.begin_step();
        // v = 0.9 + 1 = 1.9
        assert!((m.delta(0, &[1.0]).unwrap()[0] + 0.19).abs() < 1e-15);
        assert!((n.delta(0, &[1.0]).unwrap()[0] + 0.1 * (1.0 + 0.9 * 1.9)).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_adds_l2_gradient() {
        let mut opt = Optimizer::new(OptimizerConfig {
            weight_decay: 0.5,
            ..OptimizerConfig::new(OptimizerKind::Sgd, 0.1)
        })
        .unwrap();
        let mut p = DenseMatrix::scalar(2.0);
        opt.begin_step();
        opt.update(0, &mut p, &DenseMatrix::scalar(1.0), true).unwrap();
        assert!((p.get(0, 0) - (2.0 - 0.1 * 2.0)).abs() < 1e-15);
        let mut q = DenseMatrix::scalar(2.0);
        opt.update(1, &mut q, &DenseMatrix::scalar(1.0), false).unwrap();
        assert!((q.get(0, 0) - 1.9).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_configs_and_shapes() {
        assert!(Optimizer::new(OptimizerConfig::new(OptimizerKind::Sgd, -1.0)).is_err());
        let mut opt = Optimizer::new(OptimizerConfig::new(OptimizerKind::Sgd, 0.1)).unwrap();
        opt.begin_step();
        let mut p = DenseMatrix::zeros(1, 2);
        assert!(opt.update(0, &mut p, &DenseMatrix::zeros(2, 1), false).is_err());
        assert!("rmsprop".parse::<OptimizerKind>().is_err());
    }

    #[test]
    fn sgd_alpha_ratio_is_lambda_squared() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let trace = random_trace(&mut rng, 10, 4);
        let r = verify_scaling_identity(OptimizerKind::Sgd, 100.0, &trace, 0.01, 0.0).unwrap();
        assert!(r.passed, "{r:?}");
        for s in &r.per_step {
            assert!((s.alpha_ratio - 10000.0).abs() / 10000.0 < 1e-12);
        }
    }

    #[test]
    fn adam_with_eps_is_close_but_not_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let trace: Vec<Vec<f64>> = random_trace(&mut rng, 50, 3)
            .into_iter()
            .map(|g| g.into_iter().map(|v| v * 1e-6).collect())
            .collect();
        let exact = verify_scaling_identity(OptimizerKind::Adam, 100.0, &trace, 0.001, 0.0).unwrap();
        assert!(exact.passed);
        let approx = verify_scaling_identity(OptimizerKind::Adam, 100.0, &trace, 0.001, 1e-8).unwrap();
        assert!(approx.max_rel_deviation > 0.0);
        assert!(approx.max_rel_deviation < 0.1);
    }
}

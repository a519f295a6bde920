use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr_initial: f64,
    pub lr_end: f64,
    pub total_steps: usize,
    pub decay_power: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr_initial: 1e-3,
            lr_end: 1e-5,
            total_steps: 1000,
            decay_power: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    /// Polynomial decay from `lr_initial` to `lr_end`, clamped past `total_steps`.
    pub fn learning_rate(&self, step: usize) -> f64 {
        let t = step.min(self.total_steps) as f64;
        let frac = 1.0 - t / self.total_steps as f64;
        (self.lr_initial - self.lr_end) * frac.powf(self.decay_power) + self.lr_end
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if !(self.decay_power > 0.0) || self.lr_initial < 0.0 || self.lr_end < 0.0 {
            return Err(Error::Config("invalid learning-rate schedule".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Moments<R> {
    first: Vec<R>,
    second: Vec<R>,
}

/// Adam with bias correction and polynomial learning-rate decay.
#[derive(Clone, Debug)]
pub struct Adam<R = f32> {
    pub config: AdamConfig,
    step: usize,
    moments: Vec<Option<Moments<R>>>,
}

impl<R: Real> Adam<R> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.config.learning_rate(self.step)
    }

    pub fn has_moments(&self, id: ParamId) -> bool {
        self.moments.get(id.index()).is_some_and(Option::is_some)
    }

    /// Applies one update to every parameter holding a gradient, then zeroes gradients.
    pub fn step(&mut self, params: &mut ParamStore<R>) {
        let lr = R::of(self.current_lr());
        let (b1, b2) = (R::of(self.config.beta1), R::of(self.config.beta2));
        let eps = R::of(self.config.epsilon);
        let t = (self.step + 1) as i32;
        let bc1 = R::one() - b1.powi(t);
        let bc2 = R::one() - b2.powi(t);
        if self.moments.len() < params.len() {
            self.moments.resize_with(params.len(), || None);
        }
        for id in params.ids().collect::<Vec<_>>() {
            let p = params.get_mut(id);
            let Some(grad) = p.grad.take() else { continue };
            if p.frozen {
                continue;
            }
            let m = self.moments[id.index()].get_or_insert_with(|| Moments {
                first: vec![R::zero(); grad.len()],
                second: vec![R::zero(); grad.len()],
            });
            let values = p.value.data_mut();
            for (i, &g) in grad.data().iter().enumerate() {
                m.first[i] = b1 * m.first[i] + (R::one() - b1) * g;
                m.second[i] = b2 * m.second[i] + (R::one() - b2) * g * g;
                let mhat = m.first[i] / bc1;
                let vhat = m.second[i] / bc2;
                values[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        self.step += 1;
        params.zero_grad();
    }

    /// Serializable state: step counter and moment buffers keyed by parameter name.
    pub fn to_named_f32(&self, params: &ParamStore<R>) -> Vec<(String, Tensor<f32>)> {
        let mut out = vec![(
            "optim.step".to_string(),
            Tensor::vector(vec![self.step as f32]),
        )];
        for (id, p) in params.iter() {
            if let Some(Some(m)) = self.moments.get(id.index()) {
                let shape = p.value.shape().to_vec();
                let cast = |v: &[R]| {
                    Tensor::new(shape.clone(), v.iter().map(|x| x.as_f64() as f32).collect())
                        .expect("moment shape")
                };
                out.push((format!("optim.m.{}", p.name), cast(&m.first)));
                out.push((format!("optim.v.{}", p.name), cast(&m.second)));
            }
        }
        out
    }

    pub fn load_named(&mut self, params: &ParamStore<R>, named: &[(String, Tensor<f32>)]) -> Result<()> {
        let find = |n: &str| named.iter().find(|(k, _)| k == n).map(|(_, t)| t);
        let step = find("optim.step")
            .ok_or_else(|| Error::Checkpoint("missing optim.step".into()))?;
        self.step = step.data()[0] as usize;
        self.moments = vec![None; params.len()];
        for (id, p) in params.iter() {
            let (Some(m), Some(v)) = (
                find(&format!("optim.m.{}", p.name)),
                find(&format!("optim.v.{}", p.name)),
            ) else {
                continue;
            };
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(Error::Load {
                    name: p.name.clone(),
                    reason: "optimizer moment shape mismatch".into(),
                });
            }
            self.moments[id.index()] = Some(Moments {
                first: m.data().iter().map(|&x| R::of(x as f64)).collect(),
                second: v.data().iter().map(|&x| R::of(x as f64)).collect(),
            });
        }
        Ok(())
    }
}

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::model::ParamStore;

/// Adam with decoupled weight decay. Moment buffers are keyed by parameter name
/// so they can be checkpointed alongside the parameters.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    names: Vec<String>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

/// Biases, norms and the learned tokens are exempt from weight decay.
fn decays(name: &str, t: &Tensor) -> bool {
    t.rank() >= 2 && !name.contains("token") && !name.contains("pos_embed")
}

impl AdamW {
    pub fn new(stores: &[&ParamStore], weight_decay: f64) -> Result<Self> {
        let mut names = Vec::new();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for s in stores {
            for (n, t) in s.iter() {
                names.push(n.to_string());
                first.push(t.zeros_like()?.detach());
                second.push(t.zeros_like()?.detach());
            }
        }
        Ok(Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            names,
            first,
            second,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first, &self.second)
    }

    pub fn set_moments(&mut self, first: Vec<Tensor>, second: Vec<Tensor>) -> Result<()> {
        if first.len() != self.names.len() || second.len() != self.names.len() {
            return Err(Error::shape("optimizer moment count mismatch"));
        }
        for (i, (f, s)) in first.iter().zip(&second).enumerate() {
            if f.shape() != self.first[i].shape() || s.shape() != self.second[i].shape() {
                return Err(Error::shape(format!("optimizer moment shape mismatch for `{}`", self.names[i])));
            }
        }
        self.first = first;
        self.second = second;
        Ok(())
    }

    /// Global L2 norm of the gradients of every parameter in `stores`.
    pub fn grad_norm(stores: &[&ParamStore], grads: &GradStore) -> Result<f64> {
        let mut total = 0.0f64;
        for s in stores {
            for t in s.tensors() {
                if let Some(g) = grads.get(t) {
                    total += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
                }
            }
        }
        Ok(total.sqrt())
    }

    /// One update at learning rate `lr`, clipping the global gradient norm to `clip`.
    /// Returns the pre-clip gradient norm.
    pub fn step(&mut self, stores: &mut [&mut ParamStore], grads: &GradStore, lr: f64, clip: Option<f64>) -> Result<f64> {
        let norm = {
            let views: Vec<&ParamStore> = stores.iter().map(|s| &**s).collect();
            Self::grad_norm(&views, grads)?
        };
        let coef = match clip {
            Some(c) if norm > c => c / (norm + 1e-6),
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut k = 0;
        for store in stores.iter_mut() {
            for i in 0..store.len() {
                let name = store.names()[i].clone();
                if self.names.get(k) != Some(&name) {
                    return Err(Error::invalid(format!("optimizer parameter order changed at `{name}`")));
                }
                let p = store.tensors()[i].clone();
                if let Some(g) = grads.get(&p) {
                    let g = (g * coef)?;
                    let m = ((&self.first[k] * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
                    let v = ((&self.second[k] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
                    let update = ((&m / bc1)?.broadcast_div(&((&v / bc2)?.sqrt()? + self.eps)?))?;
                    let mut next = (p.detach() - (update * lr)?)?;
                    if self.weight_decay > 0.0 && decays(&name, &p) {
                        next = (next - (p.detach() * (lr * self.weight_decay))?)?;
                    }
                    store.set(i, &next)?;
                    self.first[k] = m.detach();
                    self.second[k] = v.detach();
                }
                k += 1;
            }
        }
        Ok(norm)
    }
}

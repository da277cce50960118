//! SGD with momentum and AdamW, operating on any [`ParamSet`].
//!
//! Update rules:
//!
//! SGD (weight decay folded into the gradient, momentum buffer carries it):
//! ```text
//! g   = grad + wd * p
//! buf = momentum * buf + g
//! p  -= lr * buf
//! ```
//!
//! AdamW (decoupled weight decay applied directly to the parameter):
//! ```text
//! p  -= lr * wd * p
//! m   = b1 * m + (1 - b1) * g;   v = b2 * v + (1 - b2) * g^2
//! p  -= lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{flatten, ParamMut, ParamSet};
use crate::error::{Error, Result};
use crate::scalar::{sc, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    AdamW { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd(momentum: f64) -> Self {
        Self::Sgd { momentum }
    }

    pub fn adamw() -> Self {
        Self::AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-tensor optimizer slots, keyed by parameter name.
#[derive(Debug, Clone)]
struct Slot<F> {
    m: Vec<F>,
    /// Second moment; empty for SGD.
    v: Vec<F>,
}

#[derive(Debug, Clone)]
pub struct Optimizer<F> {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    slots: BTreeMap<String, Slot<F>>,
    step_count: u64,
}

/// Serializable snapshot of optimizer state; tensors widen to f64 so the dump
/// round-trips exactly for both scalar types.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerStateDump {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    /// name -> (first moment / momentum buffer, second moment or empty)
    pub slots: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl<F: Scalar> Optimizer<F> {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Self { kind, lr, weight_decay, slots: BTreeMap::new(), step_count: 0 }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Schedules adjust the rate between steps.
    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update. `grads` must have the same visit order and shapes
    /// as `params` (the shared-struct convention guarantees this). Refuses to
    /// touch the parameters if any gradient element is non-finite.
    pub fn step<P: ParamSet<F>>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let gflat = flatten(grads);
        if let Some(pos) = gflat.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient at flat index {pos}; refusing optimizer step"
            )));
        }

        self.step_count += 1;
        let t = self.step_count;
        let lr = sc::<F>(self.lr);
        let wd = sc::<F>(self.weight_decay);

        let mut offset = 0usize;
        let mut result = Ok(());
        let kind = self.kind;
        let slots = &mut self.slots;
        params.visit_mut(&mut |name, p| {
            if result.is_err() {
                return;
            }
            let len = p.len();
            let g = &gflat[offset..offset + len];
            offset += len;
            let slot = slots.entry(name.to_string()).or_insert_with(|| Slot {
                m: vec![F::zero(); len],
                v: match kind {
                    OptimizerKind::Sgd { .. } => Vec::new(),
                    OptimizerKind::AdamW { .. } => vec![F::zero(); len],
                },
            });
            if slot.m.len() != len {
                result = Err(Error::State(format!(
                    "optimizer slot '{name}' has {} elements, parameter has {len}",
                    slot.m.len()
                )));
                return;
            }
            match kind {
                OptimizerKind::Sgd { momentum } => {
                    let mu = sc::<F>(momentum);
                    apply(p, |i, pv| {
                        let gi = g[i] + wd * *pv;
                        slot.m[i] = mu * slot.m[i] + gi;
                        *pv = *pv - lr * slot.m[i];
                    });
                }
                OptimizerKind::AdamW { beta1, beta2, eps } => {
                    let b1 = sc::<F>(beta1);
                    let b2 = sc::<F>(beta2);
                    let epsf = sc::<F>(eps);
                    let one = F::one();
                    let c1 = sc::<F>(1.0 - beta1.powi(t as i32));
                    let c2 = sc::<F>(1.0 - beta2.powi(t as i32));
                    apply(p, |i, pv| {
                        *pv = *pv - lr * wd * *pv;
                        slot.m[i] = b1 * slot.m[i] + (one - b1) * g[i];
                        slot.v[i] = b2 * slot.v[i] + (one - b2) * g[i] * g[i];
                        let mhat = slot.m[i] / c1;
                        let vhat = slot.v[i] / c2;
                        *pv = *pv - lr * mhat / (vhat.sqrt() + epsf);
                    });
                }
            }
        });
        result
    }

    pub fn export_state(&self) -> OptimizerStateDump {
        OptimizerStateDump {
            kind: self.kind,
            lr: self.lr,
            weight_decay: self.weight_decay,
            step_count: self.step_count,
            slots: self
                .slots
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        (
                            s.m.iter().map(|x| x.to_f64_lossy()).collect(),
                            s.v.iter().map(|x| x.to_f64_lossy()).collect(),
                        ),
                    )
                })
                .collect(),
        }
    }

    pub fn import_state(dump: &OptimizerStateDump) -> Self {
        Self {
            kind: dump.kind,
            lr: dump.lr,
            weight_decay: dump.weight_decay,
            step_count: dump.step_count,
            slots: dump
                .slots
                .iter()
                .map(|(k, (m, v))| {
                    (
                        k.clone(),
                        Slot {
                            m: m.iter().map(|x| sc::<F>(*x)).collect(),
                            v: v.iter().map(|x| sc::<F>(*x)).collect(),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Applies `f(flat_index, &mut element)` over one parameter tensor in
/// row-major order, matching the flat layout used everywhere else.
fn apply<F: Scalar>(p: ParamMut<'_, F>, mut f: impl FnMut(usize, &mut F)) {
    match p {
        ParamMut::Vector(v) => {
            for (i, x) in v.iter_mut().enumerate() {
                f(i, x);
            }
        }
        ParamMut::Matrix(m) => {
            let cols = m.ncols();
            for ((r, c), x) in m.indexed_iter_mut() {
                f(r * cols + c, x);
            }
        }
    }
}

//! Named parameter storage and the Adam optimizer.
//!
//! Every trainable array lives in one [`ParamStore`], addressed by a stable
//! [`PId`] assigned at construction. Forward passes bind parameters onto a
//! tape via [`TapeBind`], which remembers the node-to-parameter mapping so
//! gradients can be pulled back out after `backward`.

use crate::autodiff::{Gradients, Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Handle to one parameter tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PId(pub usize);

#[derive(Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn add(&mut self, name: &str, value: ArrayD<f64>) -> PId {
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: value.shape().to_vec(),
            data: value.into_raw_vec_and_offset().0,
        });
        PId(self.entries.len() - 1)
    }

    pub fn value(&self, id: PId) -> ArrayD<f64> {
        let e = &self.entries[id.0];
        ArrayD::from_shape_vec(IxDyn(&e.shape), e.data.clone()).unwrap()
    }

    pub fn name(&self, id: PId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: PId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn set(&mut self, id: PId, value: &ArrayD<f64>) {
        let e = &mut self.entries[id.0];
        assert_eq!(e.shape.as_slice(), value.shape());
        e.data.clear();
        e.data.extend(value.iter());
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Read/write a single scalar by flat index across all entries
    /// (used by the finite-difference gradient checker).
    pub fn get_flat(&self, flat: usize) -> (usize, usize, f64) {
        let mut rem = flat;
        for (i, e) in self.entries.iter().enumerate() {
            if rem < e.data.len() {
                return (i, rem, e.data[rem]);
            }
            rem -= e.data.len();
        }
        panic!("flat index out of range");
    }

    pub fn set_flat(&mut self, flat: usize, value: f64) {
        let mut rem = flat;
        for e in self.entries.iter_mut() {
            if rem < e.data.len() {
                e.data[rem] = value;
                return;
            }
            rem -= e.data.len();
        }
        panic!("flat index out of range");
    }
}

/// Binds store parameters onto a tape, tracking which node belongs to which
/// parameter so gradients can be collected per [`PId`].
pub struct TapeBind {
    bindings: Vec<(usize, PId)>,
}

impl TapeBind {
    pub fn new() -> Self {
        TapeBind {
            bindings: Vec::new(),
        }
    }

    pub fn param(&mut self, tape: &Tape, store: &ParamStore, id: PId) -> Var {
        let v = tape.leaf(store.value(id));
        self.bindings.push((v.id(), id));
        v
    }

    /// Per-parameter gradients, summed over all bindings of the same id.
    pub fn collect(&self, store: &ParamStore, grads: &mut Gradients) -> Vec<ArrayD<f64>> {
        let mut out: Vec<ArrayD<f64>> = store
            .entries()
            .iter()
            .map(|e| ArrayD::zeros(IxDyn(&e.shape)))
            .collect();
        for (node, pid) in &self.bindings {
            if let Some(g) = grads.take_id(*node) {
                out[pid.0] += &g;
            }
        }
        out
    }
}

impl Default for TapeBind {
    fn default() -> Self {
        Self::new()
    }
}

/// Uniform fan-in initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn fan_in_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-bound..bound))
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

/// Adam with global-norm gradient clipping.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    step: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, clip: f64) -> Self {
        let m = store
            .entries()
            .iter()
            .map(|e| ArrayD::zeros(IxDyn(&e.shape)))
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip,
            step: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &mut [ArrayD<f64>]) {
        // Global-norm clipping.
        let total: f64 = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum();
        let norm = total.sqrt();
        if self.clip > 0.0 && norm > self.clip {
            let scale = self.clip / norm;
            for g in grads.iter_mut() {
                g.mapv_inplace(|x| x * scale);
            }
        }
        self.step += 1;
        let b1c = 1.0 - self.beta1.powi(self.step as i32);
        let b2c = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            });
            let mut value = store.value(PId(i));
            ndarray::Zip::from(&mut value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mhat = m / b1c;
                    let vhat = v / b2c;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
            store.set(PId(i), &value);
        }
    }
}

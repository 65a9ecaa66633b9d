//! AdamW with decoupled weight decay, a per-parameter trainable mask, and
//! bit-exact checkpoint persistence (moments stored alongside the model so
//! a resumed run continues the identical trajectory).

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::model::{Checkpoint, ParamSet};

#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
    trainable: Vec<bool>,
}

impl AdamW {
    /// Fresh optimizer over `params`; only parameters whose names satisfy
    /// `trainable` are ever updated (the rest keep zero moments and their
    /// initial values).
    pub fn new(
        params: &ParamSet<f32>,
        lr: f64,
        weight_decay: f64,
        trainable: impl Fn(&str) -> bool,
    ) -> AdamW {
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        let mut mask = Vec::with_capacity(params.len());
        for (name, arr) in params.iter() {
            m.push(ArrayD::zeros(arr.raw_dim()));
            v.push(ArrayD::zeros(arr.raw_dim()));
            mask.push(trainable(name));
        }
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m,
            v,
            trainable: mask,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn is_trainable(&self, id: usize) -> bool {
        self.trainable[id]
    }

    /// One optimizer step: first/second moments in f32, bias corrections in
    /// f64, decoupled decay applied directly to the parameter.
    pub fn apply(&mut self, params: &mut ParamSet<f32>, grads: &[ArrayD<f32>]) -> Result<()> {
        if grads.len() != params.len() || params.len() != self.m.len() {
            return Err(Error::config(format!(
                "optimizer state covers {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let inv_bc1 = (1.0 / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let b1 = self.beta1 as f32;
        let b2 = self.beta2 as f32;
        let omb1 = (1.0 - self.beta1) as f32;
        let omb2 = (1.0 - self.beta2) as f32;
        let lr = self.lr as f32;
        let wd = self.weight_decay as f32;
        let eps = self.eps as f32;

        for id in 0..self.m.len() {
            if !self.trainable[id] {
                continue;
            }
            let theta = params.get_mut(id);
            let g = &grads[id];
            if g.shape() != theta.shape() {
                return Err(Error::numeric(format!(
                    "gradient shape {:?} does not match parameter shape {:?}",
                    g.shape(),
                    theta.shape()
                )));
            }
            ndarray::Zip::from(theta)
                .and(&mut self.m[id])
                .and(&mut self.v[id])
                .and(g)
                .for_each(|t, m, v, &g| {
                    *m = b1 * *m + omb1 * g;
                    *v = b2 * *v + omb2 * g * g;
                    let m_hat = *m * inv_bc1;
                    let v_hat = *v * inv_bc2;
                    *t -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *t);
                });
        }
        Ok(())
    }

    /// Appends moment arrays and hyperparameters under `<prefix>.…` to an
    /// existing checkpoint. Floats are written in Rust's shortest
    /// round-trip decimal form, so reload reproduces them bit-exactly.
    pub fn append_to_checkpoint(
        &self,
        ck: &mut Checkpoint,
        prefix: &str,
        params: &ParamSet<f32>,
    ) {
        ck.meta.insert(format!("{prefix}.step"), self.step.to_string());
        ck.meta.insert(format!("{prefix}.lr"), self.lr.to_string());
        ck.meta.insert(format!("{prefix}.beta1"), self.beta1.to_string());
        ck.meta.insert(format!("{prefix}.beta2"), self.beta2.to_string());
        ck.meta.insert(format!("{prefix}.eps"), self.eps.to_string());
        ck.meta.insert(format!("{prefix}.weight_decay"), self.weight_decay.to_string());
        for (name, _) in params.iter() {
            let id = params.id(name).expect("iterated name resolves");
            ck.arrays.push((format!("{prefix}.m.{name}"), self.m[id].clone()));
            ck.arrays.push((format!("{prefix}.v.{name}"), self.v[id].clone()));
        }
    }

    /// Rebuilds the optimizer from a checkpoint written by
    /// [`AdamW::append_to_checkpoint`]. The trainable predicate comes from
    /// configuration, not the file, so the caller passes it again.
    pub fn from_checkpoint(
        ck: &Checkpoint,
        prefix: &str,
        params: &ParamSet<f32>,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<AdamW> {
        let mut opt = AdamW::new(params, 0.0, 0.0, trainable);
        opt.step = ck.meta_parsed(&format!("{prefix}.step"))?;
        opt.lr = ck.meta_parsed(&format!("{prefix}.lr"))?;
        opt.beta1 = ck.meta_parsed(&format!("{prefix}.beta1"))?;
        opt.beta2 = ck.meta_parsed(&format!("{prefix}.beta2"))?;
        opt.eps = ck.meta_parsed(&format!("{prefix}.eps"))?;
        opt.weight_decay = ck.meta_parsed(&format!("{prefix}.weight_decay"))?;
        for (name, arr) in params.iter() {
            let id = params.id(name).expect("iterated name resolves");
            for (label, slot) in [("m", &mut opt.m), ("v", &mut opt.v)] {
                let key = format!("{prefix}.{label}.{name}");
                let stored = ck
                    .array(&key)
                    .ok_or_else(|| Error::data(format!("checkpoint missing optimizer array {key}")))?;
                if stored.shape() != arr.shape() {
                    return Err(Error::data(format!(
                        "optimizer array {key} has shape {:?}, parameter has {:?}",
                        stored.shape(),
                        arr.shape()
                    )));
                }
                slot[id] = stored.clone();
            }
        }
        Ok(opt)
    }
}

//! Named parameter storage shared by all networks.
//!
//! Every trainable tensor is registered once under a unique dotted name and
//! addressed afterwards by its dense [`ParamId`]. The id layout is stable
//! across precision casts, so a network built against an `f32` set can run
//! against its `f64` shadow for gradient verification.

use std::collections::HashMap;

use ndarray::ArrayD;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::backend::ParamId;
use crate::tensor::Scalar;

#[derive(Clone, Debug)]
pub struct ParamSet<F> {
    names: Vec<String>,
    arrays: Vec<ArrayD<F>>,
    index: HashMap<String, ParamId>,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), arrays: Vec::new(), index: HashMap::new() }
    }

    /// Registers a tensor under `name`; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, array: ArrayD<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "parameter name registered twice: {name}"
        );
        let id = self.arrays.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.arrays.push(array);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<F> {
        &self.arrays[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.arrays[id]
    }

    pub fn arrays(&self) -> &[ArrayD<F>] {
        &self.arrays
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn total_scalars(&self) -> usize {
        self.arrays.iter().map(|a| a.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.arrays.iter())
    }

    /// Casts every tensor to another float width, preserving ids.
    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            names: self.names.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|a| a.mapv(|v| G::from_f64(v.to_f64())))
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Overwrites every tensor with small normal noise. Gradient-check
    /// helper: zero-initialized output projections block gradient flow into
    /// earlier layers, which would leave those paths unverified.
    pub fn randomize_all(&mut self, rng: &mut impl Rng, std: f64) {
        let dist = Normal::new(0.0, std).unwrap();
        for a in &mut self.arrays {
            a.mapv_inplace(|_| F::from_f64(dist.sample(rng)));
        }
    }

    /// Copies values from `other` into this set wherever names match
    /// after stripping each set's leading component (e.g. `disc.` vs
    /// `teacher.`). Returns how many tensors were copied; shape mismatches
    /// are an error.
    pub fn copy_by_suffix(&mut self, other: &ParamSet<F>) -> Result<usize> {
        let strip = |s: &str| -> String {
            match s.split_once('.') {
                Some((_, rest)) => rest.to_string(),
                None => s.to_string(),
            }
        };
        let mut theirs: HashMap<String, usize> = HashMap::new();
        for (i, n) in other.names.iter().enumerate() {
            theirs.insert(strip(n), i);
        }
        let mut copied = 0;
        for (i, n) in self.names.clone().iter().enumerate() {
            if let Some(&j) = theirs.get(&strip(n)) {
                if self.arrays[i].shape() != other.arrays[j].shape() {
                    return Err(Error::config(format!(
                        "parameter {n} shape {:?} does not match source shape {:?}",
                        self.arrays[i].shape(),
                        other.arrays[j].shape()
                    )));
                }
                self.arrays[i] = other.arrays[j].clone();
                copied += 1;
            }
        }
        Ok(copied)
    }
}

/// Normal-initialized tensor with the given standard deviation.
pub fn init_normal<F: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> ArrayD<F> {
    let dist = Normal::new(0.0, std).unwrap();
    ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| F::from_f64(dist.sample(rng)))
}

/// Fan-in-scaled init (`std = 1/sqrt(fan_in)`).
pub fn init_fan_in<F: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> ArrayD<F> {
    init_normal(rng, shape, 1.0 / (fan_in as f64).sqrt())
}

pub fn zeros<F: Scalar>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::zeros(ndarray::IxDyn(shape))
}

pub fn ones<F: Scalar>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::from_elem(ndarray::IxDyn(shape), F::one())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_dense_and_stable_across_cast() {
        let mut ps = ParamSet::<f32>::new();
        let a = ps.add("a.w", zeros::<f32>(&[2, 3]));
        let b = ps.add("b.w", ones::<f32>(&[4]));
        assert_eq!((a, b), (0, 1));
        assert_eq!(ps.id("b.w"), Some(1));
        assert_eq!(ps.name(0), "a.w");

        let ps64 = ps.cast::<f64>();
        assert_eq!(ps64.id("a.w"), Some(0));
        assert_eq!(ps64.get(1).sum(), 4.0);
        assert_eq!(ps64.total_scalars(), 10);
    }

    #[test]
    #[should_panic(expected = "registered twice")]
    fn duplicate_names_panic() {
        let mut ps = ParamSet::<f32>::new();
        ps.add("x", zeros::<f32>(&[1]));
        ps.add("x", zeros::<f32>(&[1]));
    }

    #[test]
    fn suffix_copy_matches_across_prefixes() {
        let mut rng = crate::rng::derive_rng(5, "params-test", 0);
        let mut src = ParamSet::<f32>::new();
        src.add("teacher.down0.conv.w", init_normal(&mut rng, &[3, 3], 1.0));
        src.add("teacher.head.w", init_normal(&mut rng, &[2], 1.0));

        let mut dst = ParamSet::<f32>::new();
        dst.add("disc.down0.conv.w", zeros::<f32>(&[3, 3]));
        dst.add("disc.extra.w", zeros::<f32>(&[5]));
        let copied = dst.copy_by_suffix(&src).unwrap();
        assert_eq!(copied, 1);
        assert_eq!(dst.get(0), src.get(0));
        assert_eq!(dst.get(1).sum(), 0.0);

        let mut bad = ParamSet::<f32>::new();
        bad.add("disc.down0.conv.w", zeros::<f32>(&[9]));
        assert!(bad.copy_by_suffix(&src).is_err());
    }
}

//! Two-level weighted mean/variance pooling of per-view value vectors.
//!
//! Every reduction runs over views sorted by view id, and moments are taken
//! about the most heavily weighted view, so permuting views (with their ids
//! and weights) is bitwise invisible, one-hot weights reproduce a view
//! exactly, and identical views give exactly zero variance.

use crate::error::{invalid, Result};

/// Maps an input vector to a value vector. Implementations must be pure.
pub trait Encoder {
    fn encode(&self, input: &[f64]) -> Vec<f64>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityEncoder;

impl Encoder for IdentityEncoder {
    fn encode(&self, input: &[f64]) -> Vec<f64> {
        input.to_vec()
    }
}

impl<F: Fn(&[f64]) -> Vec<f64>> Encoder for F {
    fn encode(&self, input: &[f64]) -> Vec<f64> {
        self(input)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub inputs: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    /// Canonical keys fixing the accumulation order; must be distinct.
    pub view_ids: Vec<u64>,
    pub target_index: usize,
}

impl FeatureSet {
    /// Feature set whose view ids are the input positions.
    pub fn new(inputs: Vec<Vec<f64>>, weights: Vec<f64>, target_index: usize) -> Result<Self> {
        let view_ids = (0..inputs.len() as u64).collect();
        Self::with_ids(inputs, weights, view_ids, target_index)
    }

    pub fn with_ids(
        inputs: Vec<Vec<f64>>,
        weights: Vec<f64>,
        view_ids: Vec<u64>,
        target_index: usize,
    ) -> Result<Self> {
        let fs = Self {
            inputs,
            weights,
            view_ids,
            target_index,
        };
        fs.validate()?;
        Ok(fs)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.inputs.len();
        if k == 0 {
            return invalid("a feature set needs at least one view");
        }
        if self.weights.len() != k || self.view_ids.len() != k {
            return invalid("inputs, weights and view ids must have one entry per view");
        }
        if self.target_index >= k {
            return invalid(format!("target index {} out of range for {k} views", self.target_index));
        }
        check_weights(&self.weights)?;
        check_dims(&self.inputs)?;
        let mut ids = self.view_ids.clone();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return invalid("view ids must be distinct");
        }
        Ok(())
    }

    /// View indices in ascending view-id order.
    pub fn order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.inputs.len()).collect();
        order.sort_by_key(|&k| self.view_ids[k]);
        order
    }
}

fn check_weights(w: &[f64]) -> Result<()> {
    if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return invalid("weights must be finite and non-negative");
    }
    let total: f64 = w.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return invalid(format!("weights must sum to 1 (sum = {total})"));
    }
    Ok(())
}

fn check_dims(values: &[Vec<f64>]) -> Result<()> {
    let d = values.first().map_or(0, Vec::len);
    if values.iter().any(|v| v.len() != d) {
        return invalid("value vectors differ in dimension");
    }
    Ok(())
}

/// Weighted mean and biased weighted variance, accumulated in `order`.
fn moments_in_order(values: &[Vec<f64>], w: &[f64], order: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let dim = values[0].len();
    // Reference view: the heaviest, ties broken by position in `order`.
    let reference = order
        .iter()
        .copied()
        .fold(order[0], |best, k| if w[k] > w[best] { k } else { best });
    let base = &values[reference];
    let mut mean = base.clone();
    for (i, m) in mean.iter_mut().enumerate() {
        let shift: f64 = order.iter().map(|&k| w[k] * (values[k][i] - base[i])).sum();
        *m += shift;
    }
    let mut var = vec![0.0; dim];
    for (i, v) in var.iter_mut().enumerate() {
        *v = order
            .iter()
            .map(|&k| {
                let d = values[k][i] - mean[i];
                w[k] * d * d
            })
            .sum();
    }
    (mean, var)
}

/// Weighted mean and variance of `values` under probability weights `w`,
/// accumulated in index order.
pub fn weighted_moments(values: &[Vec<f64>], w: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if values.is_empty() || values.len() != w.len() {
        return invalid("need one weight per value vector");
    }
    check_weights(w)?;
    check_dims(values)?;
    let order: Vec<usize> = (0..values.len()).collect();
    Ok(moments_in_order(values, w, &order))
}

fn concat(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

/// Level-1 pooled per-view vectors: `level1([level1(x_k), mean, var])`.
pub fn level1_outputs(features: &FeatureSet, level1: &dyn Encoder) -> Result<Vec<Vec<f64>>> {
    features.validate()?;
    let order = features.order();
    let q: Vec<Vec<f64>> = features.inputs.iter().map(|x| level1.encode(x)).collect();
    check_dims(&q)?;
    let (mean, var) = moments_in_order(&q, &features.weights, &order);
    let out: Vec<Vec<f64>> = q.iter().map(|qk| level1.encode(&concat(&[qk, &mean, &var]))).collect();
    check_dims(&out)?;
    Ok(out)
}

/// Target-view feature: `level2([v_target, mean(v), var(v)])` over the
/// level-1 outputs `v`.
pub fn aggregate(features: &FeatureSet, level1: &dyn Encoder, level2: &dyn Encoder) -> Result<Vec<f64>> {
    let v = level1_outputs(features, level1)?;
    let (mean, var) = moments_in_order(&v, &features.weights, &features.order());
    Ok(level2.encode(&concat(&[&v[features.target_index], &mean, &var])))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moment_cases() {
        let q = vec![vec![0.0], vec![2.0]];
        assert_eq!(weighted_moments(&q, &[0.5, 0.5]).unwrap(), (vec![1.0], vec![1.0]));
        let q = vec![vec![0.1, 7.0], vec![0.3, -1.0], vec![0.7, 2.5]];
        assert_eq!(
            weighted_moments(&q, &[0.0, 1.0, 0.0]).unwrap(),
            (vec![0.3, -1.0], vec![0.0, 0.0])
        );
        assert!(weighted_moments(&[vec![1.0], vec![1.0, 2.0]], &[0.5, 0.5]).is_err());
        assert!(weighted_moments(&q, &[0.5, 0.5, 0.5]).is_err());
    }

    #[test]
    fn identical_views_have_zero_variance() {
        let x = vec![0.1, 0.2, 0.3];
        let a = FeatureSet::new(vec![x.clone(); 3], vec![0.2, 0.3, 0.5], 1).unwrap();
        let b = FeatureSet::new(vec![x.clone(); 3], vec![0.7, 0.1, 0.2], 1).unwrap();
        let ma = aggregate(&a, &IdentityEncoder, &IdentityEncoder).unwrap();
        let mb = aggregate(&b, &IdentityEncoder, &IdentityEncoder).unwrap();
        assert_eq!(ma, mb);
        // [v_t (= [x, x, 0]), mean (= v_t), var (= 0)]
        assert!(ma[6..9].iter().all(|v| *v == 0.0) && ma[24..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn permutation_is_bitwise_invisible() {
        let inputs = vec![vec![0.1, 1.3], vec![-2.0, 0.7], vec![5.5, 0.01], vec![0.3, 0.3]];
        let w = vec![0.1, 0.2, 0.3, 0.4];
        let fs = FeatureSet::new(inputs.clone(), w.clone(), 0).unwrap();
        let perm = [0, 3, 1, 2];
        let p = FeatureSet::with_ids(
            perm.iter().map(|&k| inputs[k].clone()).collect(),
            perm.iter().map(|&k| w[k]).collect(),
            perm.iter().map(|&k| k as u64).collect(),
            0,
        )
        .unwrap();
        let e = IdentityEncoder;
        assert_eq!(aggregate(&fs, &e, &e).unwrap(), aggregate(&p, &e, &e).unwrap());
    }
}

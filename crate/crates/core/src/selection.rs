//! Sample-level uncertainty and top-k selection of LQ samples.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::refinement::ProbStack;

/// Mean over pixels and classes of the population variance across passes.
pub fn sample_uncertainty(stack: &ProbStack) -> f64 {
    // shifted by the first pass, so identical passes give exactly 0
    let m = stack.len() as f64;
    let first = stack.probs[0].data();
    let n = first.len();
    let mut var_sum = 0.0;
    for (i, &base) in first.iter().enumerate() {
        let (mut s, mut s2) = (0.0, 0.0);
        for p in &stack.probs[1..] {
            let d = p.data()[i] - base;
            s += d;
            s2 += d * d;
        }
        var_sum += (s2 / m - (s / m).powi(2)).max(0.0);
    }
    var_sum / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub scores: BTreeMap<String, f64>,
    /// Lowest uncertainty first.
    pub selected: Vec<String>,
    pub residual: Vec<String>,
    pub k_effective: usize,
}

/// Number of selected samples for a batch of `n`.
pub fn k_effective(k_ratio: f64, n: usize) -> usize {
    ((k_ratio * n as f64).round() as usize).min(n)
}

/// Sorts ascending by score (ties by id) and selects the first
/// `round(k_ratio * n)` samples.
pub fn select_top_k(scores: &BTreeMap<String, f64>, k_ratio: f64) -> SelectionResult {
    assert!((0.0..=1.0).contains(&k_ratio), "k_ratio must be in [0, 1]");
    let mut order: Vec<(&String, f64)> = scores.iter().map(|(k, &v)| (k, v)).collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    let k = k_effective(k_ratio, order.len());
    let ids: Vec<String> = order.into_iter().map(|(id, _)| id.clone()).collect();
    let (selected, residual) = ids.split_at(k);
    SelectionResult {
        scores: scores.clone(),
        selected: selected.to_vec(),
        residual: residual.to_vec(),
        k_effective: k,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn identical_slices_have_zero_uncertainty() {
        let t = Tensor::from_vec(&[2, 1, 2], vec![0.1, 0.6, 0.9, 0.4]).unwrap();
        let s = ProbStack::new("a", vec![t.clone(), t.clone(), t]).unwrap();
        assert_eq!(sample_uncertainty(&s), 0.0);
    }

    #[test]
    fn two_pass_single_value_variance() {
        let a = Tensor::from_vec(&[1, 1, 1], vec![0.0]).unwrap();
        let b = Tensor::from_vec(&[1, 1, 1], vec![1.0]).unwrap();
        let s = ProbStack::new("a", vec![a.clone(), b.clone()]).unwrap();
        assert_eq!(sample_uncertainty(&s), 0.25);
        let swapped = ProbStack::new("a", vec![b, a]).unwrap();
        assert_eq!(sample_uncertainty(&swapped), 0.25);
    }

    #[test]
    fn selection_cases() {
        let scores: BTreeMap<String, f64> = [("a", 0.3), ("b", 0.1), ("c", 0.2)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let r = select_top_k(&scores, 2.0 / 3.0);
        assert_eq!(r.selected, vec!["b", "c"]);
        assert_eq!(r.residual, vec!["a"]);
        let all = select_top_k(&scores, 1.0);
        assert!(all.residual.is_empty());
        assert_eq!(select_top_k(&scores, 0.0).selected.len(), 0);

        let eight: BTreeMap<String, f64> =
            (0..8).map(|i| (format!("s{i}"), i as f64 * 0.01)).collect();
        assert_eq!(select_top_k(&eight, 0.5).k_effective, 4);
    }

    #[test]
    fn ties_break_by_id() {
        let scores: BTreeMap<String, f64> = [("z", 0.1), ("a", 0.1), ("m", 0.0)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        assert_eq!(select_top_k(&scores, 2.0 / 3.0).selected, vec!["m", "a"]);
    }
}

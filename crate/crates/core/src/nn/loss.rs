//! Classification loss.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

/// Row-wise softmax of a `[N, K]` buffer, stabilized by the row maximum.
pub fn softmax_rows<T: Real>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let e: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
        let z = e.iter().fold(T::zero(), |a, &b| a + b);
        out.extend(e.into_iter().map(|v| v / z));
    }
    out
}

impl<T: Real> Graph<T> {
    /// Mean over samples of `w[y]·(−log softmax(logits)[y])`.
    pub fn weighted_cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
        let shape = self.value(logits).shape().to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || shape[1] != weights.len() {
            return Err(Error::Shape(format!(
                "cross entropy: logits {shape:?}, {} labels, {} weights",
                labels.len(),
                weights.len()
            )));
        }
        let (n, k) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} outside 0..{k}")));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(format!("class weights must be positive: {weights:?}")));
        }
        let lg = self.value(logits).data();
        let probs = softmax_rows(lg, k);
        let inv_n = T::lit(1.0 / n as f64);
        let mut loss = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = &lg[i * k..(i + 1) * k];
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = mx + row.iter().fold(T::zero(), |a, &v| a + (v - mx).exp()).ln();
            loss = loss + T::lit(weights[y]) * (lse - row[y]);
        }
        let labels = labels.to_vec();
        let w: Vec<T> = weights.iter().map(|&v| T::lit(v)).collect();
        Ok(self.op(
            Tensor::scalar(loss * inv_n),
            &[logits],
            Box::new(move |bw| {
                let g = bw.grad[0] * inv_n;
                let mut d = vec![T::zero(); n * k];
                for (i, &y) in labels.iter().enumerate() {
                    let s = g * w[y];
                    for j in 0..k {
                        let ind = if j == y { T::one() } else { T::zero() };
                        d[i * k + j] = s * (probs[i * k + j] - ind);
                    }
                }
                vec![Some(d)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_two() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(vec![3, 2]));
        let loss = g.weighted_cross_entropy(l, &[0, 1, 1], &[1.0, 1.0]).unwrap();
        assert!((g.value(loss).item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_logits_approach_zero() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::new(vec![2, 2], vec![40.0, -40.0, -40.0, 40.0]).unwrap());
        let loss = g.weighted_cross_entropy(l, &[0, 1], &[1.0, 1.0]).unwrap();
        assert!(g.value(loss).item() < 1e-30);
    }

    #[test]
    fn weights_scale_each_sample_term() {
        let w: [f64; 2] = [1.0 / 0.801, 1.0 / 0.199];
        assert!((w[0] - 1.248).abs() < 1e-3 && (w[1] - 5.025).abs() < 1e-3);
        let logits = vec![0.3, -0.2, 1.1, 0.4];
        let mut g = Graph::<f64>::new();
        for y in 0..2 {
            let l = g.constant(Tensor::new(vec![1, 2], logits[2 * y..2 * y + 2].to_vec()).unwrap());
            let plain = g.weighted_cross_entropy(l, &[y], &[1.0, 1.0]).unwrap();
            let weighted = g.weighted_cross_entropy(l, &[y], &w).unwrap();
            let ratio = g.value(weighted).item() / g.value(plain).item();
            assert!((ratio - w[y]).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_labels() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(vec![1, 2]));
        assert!(g.weighted_cross_entropy(l, &[2], &[1.0, 1.0]).is_err());
        assert!(g.weighted_cross_entropy(l, &[0], &[0.0, 1.0]).is_err());
    }
}

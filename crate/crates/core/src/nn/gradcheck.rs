//! Central-difference gradient verification in double precision.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Step relative to the magnitude of each input element.
pub const REL_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks an evaluator that returns the loss and the analytic gradient of
/// every input. `max_per_input` caps how many elements of each input are
/// perturbed (evenly strided); `None` checks all of them. The step is
/// `rel_step · max(|x|, 1)`.
pub fn gradcheck_with<F>(
    mut eval: F,
    inputs: &[Tensor<f64>],
    max_per_input: Option<usize>,
    floor: f64,
    rel_step: f64,
) -> Result<GradcheckReport>
where
    F: FnMut(&[Tensor<f64>]) -> Result<(f64, Vec<Vec<f64>>)>,
{
    let (f0, analytic) = eval(inputs)?;
    if !f0.is_finite() {
        return Err(Error::NonFinite("loss at the unperturbed inputs".into()));
    }
    let mut work = inputs.to_vec();
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (k, input) in inputs.iter().enumerate() {
        let n = input.len();
        let stride = max_per_input.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        for i in (0..n).step_by(stride) {
            let x = input.data()[i];
            let h = rel_step * x.abs().max(1.0);
            work[k].data_mut()[i] = x + h;
            let (fp, _) = eval(&work)?;
            work[k].data_mut()[i] = x - h;
            let (fm, _) = eval(&work)?;
            work[k].data_mut()[i] = x;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite(format!("loss with input {k} element {i} perturbed")));
            }
            let numeric = (fp - fm) / (2.0 * h);
            let err = relative_error(analytic[k][i], numeric, floor);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (k, i);
            }
        }
    }
    Ok(report)
}

/// Checks a scalar function built on a fresh graph from leaf inputs.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>]) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    gradcheck_with(
        |xs| {
            let mut g = Graph::new();
            let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone())).collect();
            let y = f(&mut g, &vars)?;
            let grads = g.backward(y)?;
            let loss = g.value(y).item();
            let gs = vars
                .iter()
                .zip(xs)
                .map(|(v, t)| grads.get(*v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
                .collect();
            Ok((loss, gs))
        },
        inputs,
        None,
        1e-6,
        REL_STEP,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::BackwardFn;

    #[test]
    fn linear_map_is_exact() {
        let c = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let r = gradcheck(|g, v| g.dot_const(v[0], &c), &[Tensor::new(vec![4], vec![1.0, 2.0, -3.0, 0.1]).unwrap()]).unwrap();
        assert!(r.max_rel_err < 1e-10, "{r:?}");
    }

    #[test]
    fn corrupted_backward_is_reported() {
        let r = gradcheck(
            |g, v| {
                let x = g.value(v[0]).clone();
                let y: Vec<f64> = x.data().iter().map(|a| a * a).collect();
                let back: BackwardFn<f64> = Box::new(|bw| vec![Some(bw.inputs[0].data().iter().zip(bw.grad).map(|(a, g)| 3.0 * a * g).collect())]);
                let sq = g.op(Tensor::new(x.shape().to_vec(), y).unwrap(), &[v[0]], back);
                Ok(g.sum(sq))
            },
            &[Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()],
        )
        .unwrap();
        assert!(r.max_rel_err > 1e-4, "{r:?}");
    }
}

//! Losses with their gradients. All reductions are per-element means.

use super::layers::{sigmoid, softplus};
use super::tensor::TensorGrid;
use super::NeuralError;

/// Mean squared error over every element; returns `(loss, d loss / d pred)`.
pub fn mse(pred: &TensorGrid, target: &[f64]) -> Result<(f64, TensorGrid), NeuralError> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(NeuralError::Shape(format!(
            "mse over {} predictions and {} targets",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len() as f64;
    let mut grad = TensorGrid::zeros(pred.shape);
    let mut loss = 0.0;
    for ((g, p), t) in grad.data.iter_mut().zip(&pred.data).zip(target) {
        let e = p - t;
        loss += e * e;
        *g = 2.0 * e / n;
    }
    Ok((loss / n, grad))
}

/// Mean squared error at selected flat indices of a single-channel
/// prediction. Empty point sets give zero loss and zero gradient.
pub fn point_mse(
    pred: &TensorGrid,
    points: &[(usize, f64)],
) -> Result<(f64, TensorGrid), NeuralError> {
    let mut grad = TensorGrid::zeros(pred.shape);
    if points.is_empty() {
        return Ok((0.0, grad));
    }
    let n = points.len() as f64;
    let mut loss = 0.0;
    for &(i, t) in points {
        let p = *pred
            .data
            .get(i)
            .ok_or_else(|| NeuralError::Shape(format!("point index {i} outside prediction")))?;
        let e = p - t;
        loss += e * e;
        grad.data[i] += 2.0 * e / n;
    }
    Ok((loss / n, grad))
}

/// Binary cross-entropy on logits, averaged over the batch.
pub fn bce_logits(logits: &[f64], labels: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), labels.len(), "one label per logit");
    let n = logits.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(labels)
        .map(|(&l, &y)| {
            loss += softplus(l) - y * l;
            (sigmoid(l) - y) / n
        })
        .collect();
    (loss / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_values() {
        let p = TensorGrid::from_vec([1, 1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(mse(&p, &[1.0, 2.0, 3.0, 4.0]).unwrap().0, 0.0);
        assert_eq!(mse(&p, &[0.0, 1.0, 2.0, 3.0]).unwrap().0, 1.0);
        let (l, g) = point_mse(&p, &[(1, 0.0)]).unwrap();
        assert_eq!(l, 4.0);
        assert_eq!(g.data, vec![0.0, 4.0, 0.0, 0.0]);
        let (l, _) = bce_logits(&[0.0, 0.0], &[1.0, 0.0]);
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let (l, _) = bce_logits(&[800.0], &[1.0]);
        assert!(l.abs() < 1e-300);
    }
}

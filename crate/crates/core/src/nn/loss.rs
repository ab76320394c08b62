use crate::error::{AfmError, Result};
use crate::matrix::Matrix2D;

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits (already divided by the batch size).
pub fn softmax_cross_entropy(logits: &Matrix2D, labels: &[usize]) -> Result<(f64, Matrix2D)> {
    if labels.len() != logits.rows() {
        return Err(AfmError::Input(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    let classes = logits.cols();
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(AfmError::Input(format!("label {l} at row {i} outside [0, {classes})")));
    }
    let n = logits.rows().max(1) as f64;
    let mut grad = Matrix2D::zeros(logits.rows(), classes);
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_sum = sum.ln();
        total += -(row[label] - max - log_sum);
        let g = grad.row_mut(r);
        for (j, &z) in row.iter().enumerate() {
            let p = (z - max - log_sum).exp();
            g[j] = (p - if j == label { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((total / n, grad))
}

/// Per-row negative log-likelihoods (no averaging), used where the caller
/// needs the summed likelihood term.
pub fn softmax_nll_sum(logits: &Matrix2D, labels: &[usize]) -> Result<(f64, Matrix2D)> {
    let (mean, mut grad) = softmax_cross_entropy(logits, labels)?;
    let n = logits.rows() as f64;
    grad.as_mut_slice().iter_mut().for_each(|g| *g *= n);
    Ok((mean * n, grad))
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean per-bit binary cross-entropy between `sigmoid(logits)` and binary
/// targets, with its gradient with respect to the logits.
pub fn bce_with_logits(logits: &Matrix2D, targets: &Matrix2D) -> Result<(f64, Matrix2D)> {
    if logits.shape() != targets.shape() {
        return Err(AfmError::Shape(format!(
            "logits {:?} vs targets {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    let count = (logits.rows() * logits.cols()).max(1) as f64;
    let mut grad = Matrix2D::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for ((g, &z), &t) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(logits.as_slice())
        .zip(targets.as_slice())
    {
        total += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        *g = (sigmoid(z) - t) / count;
    }
    Ok((total / count, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_classes() {
        let (loss, grad) = softmax_cross_entropy(&Matrix2D::zeros(3, 10), &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        for r in 0..3 {
            assert!(grad.row(r).iter().sum::<f64>().abs() < 1e-9);
        }
    }

    #[test]
    fn saturated_margin_drives_loss_to_zero() {
        let mut logits = Matrix2D::zeros(1, 10);
        logits.set(0, 3, 50.0);
        let (loss, _) = softmax_cross_entropy(&logits, &[3]).unwrap();
        assert!((0.0..1e-6).contains(&loss));
    }

    #[test]
    fn scalar_oracle_agreement() {
        let logits = Matrix2D::from_rows(&[
            [0.3, -1.2, 2.5, 0.0],
            [-0.7, 0.1, 0.4, 1.9],
            [5.0, -3.0, 0.2, -0.1],
        ])
        .unwrap();
        let labels = [2, 0, 3];
        let (loss, _) = softmax_cross_entropy(&logits, &labels).unwrap();
        let mut oracle = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = logits.row(r);
            let denom: f64 = row.iter().map(|z| z.exp()).sum();
            oracle += -(row[l].exp() / denom).ln();
        }
        oracle /= 3.0;
        assert!((loss - oracle).abs() < 1e-10);
    }

    #[test]
    fn label_out_of_range() {
        assert!(matches!(
            softmax_cross_entropy(&Matrix2D::zeros(1, 3), &[3]),
            Err(AfmError::Input(_))
        ));
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let targets = Matrix2D::from_rows(&[[1.0, 0.0, 1.0], [0.0, 0.0, 1.0]]).unwrap();
        let (loss, _) = bce_with_logits(&Matrix2D::zeros(2, 3), &targets).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }
}

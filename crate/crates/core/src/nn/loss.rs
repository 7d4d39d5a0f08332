use crate::error::{Error, Result};
use crate::numcore::{log_softmax, Tensor2D};

/// `(1 − ε)·onehot(label) + ε/C`.
pub fn smoothed_targets(label: usize, classes: usize, eps: f64) -> Vec<f64> {
    let off = eps / classes as f64;
    let mut t = vec![off; classes];
    t[label] = (1.0 - eps) + off;
    t
}

fn check_labels(logits: &Tensor2D, labels: &[usize]) -> Result<()> {
    if logits.rows() != labels.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} logit rows for {} labels", logits.rows(), labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.cols()) {
        return Err(Error::Input(format!(
            "label {bad} out of range for {} classes",
            logits.cols()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    Ok(())
}

/// Mean label-smoothed cross-entropy and its gradient with respect to the
/// logits, `(softmax(z) − t) / batch`.
pub fn smoothed_cross_entropy(
    logits: &Tensor2D,
    labels: &[usize],
    eps: f64,
) -> Result<(f64, Tensor2D)> {
    check_labels(logits, labels)?;
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Input(format!(
            "label smoothing {eps} outside [0, 1)"
        )));
    }
    let batch = labels.len() as f64;
    let classes = logits.cols();
    let mut loss = 0.0;
    let mut grad = Tensor2D::zeros(logits.rows(), classes);
    for (r, &label) in labels.iter().enumerate() {
        let logp = log_softmax(logits.row(r));
        let t = smoothed_targets(label, classes, eps);
        let mut row_loss = 0.0;
        for c in 0..classes {
            row_loss -= t[c] * logp[c];
        }
        loss += row_loss;
        for (c, g) in grad.row_mut(r).iter_mut().enumerate() {
            *g = (logp[c].exp() - t[c]) / batch;
        }
    }
    Ok((loss / batch, grad))
}

/// Plain mean cross-entropy `−log p_label`.
pub fn cross_entropy(logits: &Tensor2D, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        loss -= log_softmax(logits.row(r))[label];
    }
    Ok(loss / labels.len() as f64)
}

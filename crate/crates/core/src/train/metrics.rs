use crate::autodiff::DenseMatrix;
use crate::error::{Error, Result};

/// Macro and micro F1 of the row-wise argmax of `logits` over `mask`.
///
/// Classes are `0..logits.cols()`; a class that never occurs in either the
/// predictions or the labels contributes 0 to the macro average.
pub fn evaluate_f1(logits: &DenseMatrix, labels: &[usize], mask: &[usize]) -> Result<(f64, f64)> {
    if mask.is_empty() {
        return Err(Error::InvalidArgument("F1 over an empty mask".into()));
    }
    let classes = logits.cols();
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for &i in mask {
        if i >= logits.rows() || i >= labels.len() {
            return Err(Error::InvalidArgument(format!("mask index {i} out of range")));
        }
        let label = labels[i];
        if label >= classes {
            return Err(Error::InvalidArgument(format!("label {label} exceeds {classes} classes")));
        }
        let pred = logits.argmax_row(i);
        if pred == label {
            tp[label] += 1;
        } else {
            fp[pred] += 1;
            fn_[label] += 1;
        }
    }
    let f1 = |tp: usize, fp: usize, fn_: usize| {
        let denom = 2 * tp + fp + fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        }
    };
    let macro_f1 = (0..classes).map(|c| f1(tp[c], fp[c], fn_[c])).sum::<f64>() / classes as f64;
    let micro_f1 = f1(tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    Ok((macro_f1, micro_f1))
}

//! Cross-entropy loss over logits, with the softmax gradient.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean cross-entropy of `logits` ([batch, classes]) against integer labels.
/// Computed via the log-sum-exp trick, so large logits do not overflow.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (batch, _) = check_batch(logits, labels)?;
    let mut total = 0.0;
    for i in 0..batch {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        total += lse - row[labels[i]];
    }
    Ok(total / batch as f64)
}

/// Row-wise softmax probabilities.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    let classes = logits.shape()[1];
    for i in 0..logits.shape()[0] {
        let row = &mut out.data_mut()[i * classes..(i + 1) * classes];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
}

/// d(mean cross-entropy)/d(logits) = (softmax - onehot) / batch.
pub(crate) fn d_logits(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (batch, classes) = check_batch(logits, labels)?;
    let mut d = softmax_rows(logits);
    let scale = 1.0 / batch as f64;
    for i in 0..batch {
        d.data_mut()[i * classes + labels[i]] -= 1.0;
    }
    d.scale(scale);
    Ok(d)
}

/// Argmax class per row; ties resolve to the lower class index.
pub fn predict(logits: &Tensor) -> Vec<usize> {
    (0..logits.shape()[0])
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn check_batch(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    if logits.shape().len() != 2 {
        return Err(Error::input(format!("logits must be [batch, classes], got {:?}", logits.shape())));
    }
    let (batch, classes) = (logits.shape()[0], logits.shape()[1]);
    if batch == 0 {
        return Err(Error::input("empty batch"));
    }
    if labels.len() != batch {
        return Err(Error::input(format!("{batch} logit rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::input(format!("label {bad} out of range for {classes} classes")));
    }
    Ok((batch, classes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::zeros(&[2, 10]);
        let loss = cross_entropy(&logits, &[3, 7]).unwrap();
        assert!((loss - (10.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_hand_computation() {
        // Logits [1, 2, 3], label 2: loss = ln(e^1 + e^2 + e^3) - 3.
        let logits = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let want = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
        let got = cross_entropy(&logits, &[2]).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let logits = Tensor::from_vec(&[1, 3], vec![1e4, -1e4, 0.0]).unwrap();
        let loss = cross_entropy(&logits, &[1]).unwrap();
        assert!(loss.is_finite());
        assert!((loss - 2e4).abs() < 1.0);
    }

    #[test]
    fn gradient_rows_sum_to_zero_and_match_softmax() {
        let logits = Tensor::from_vec(&[2, 3], vec![0.5, -1.0, 2.0, 0.0, 0.0, 0.0]).unwrap();
        let labels = [2usize, 0];
        let d = d_logits(&logits, &labels).unwrap();
        let p = softmax_rows(&logits);
        for i in 0..2 {
            let row_sum: f64 = d.row(i).iter().sum();
            assert!(row_sum.abs() < 1e-14);
            for j in 0..3 {
                let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                let want = (p.row(i)[j] - onehot) / 2.0;
                assert!((d.row(i)[j] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn predict_breaks_ties_toward_lower_index() {
        let logits = Tensor::from_vec(&[1, 4], vec![1.0, 3.0, 3.0, 0.0]).unwrap();
        assert_eq!(predict(&logits), vec![1]);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(cross_entropy(&logits, &[3]).is_err());
    }
}

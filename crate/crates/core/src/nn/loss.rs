//! Classification losses over target-row logits. Both return the scalar
//! loss and the gradient with respect to the logits, ready to feed the
//! backward pass.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use super::{NnError, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// One class per sample, softmax cross-entropy.
    SingleLabel,
    /// A set of classes per sample, per-class sigmoid cross-entropy.
    MultiLabel,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::SingleLabel => "single",
            TaskKind::MultiLabel => "multi",
        })
    }
}

impl FromStr for TaskKind {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self, NnError> {
        match s {
            "single" => Ok(TaskKind::SingleLabel),
            "multi" => Ok(TaskKind::MultiLabel),
            other => Err(NnError::SchemaError(format!("unknown task kind {other:?}"))),
        }
    }
}

/// Mean softmax cross-entropy. Row i is scored against `classes[i]`;
/// the gradient is (softmax - onehot) / n. Accumulation runs in f64.
pub fn softmax_ce<T: Scalar>(
    logits: &Array2<T>,
    classes: &[u32],
) -> Result<(f64, Array2<T>), NnError> {
    let (n, c) = logits.dim();
    if classes.len() != n {
        return Err(NnError::ShapeError(format!(
            "{n} logit rows but {} labels",
            classes.len()
        )));
    }
    if n == 0 {
        return Err(NnError::ShapeError("empty logits".into()));
    }
    let mut loss = 0.0f64;
    let mut grad = Array2::<T>::zeros((n, c));
    for i in 0..n {
        let y = classes[i] as usize;
        if y >= c {
            return Err(NnError::SchemaError(format!(
                "class {y} out of range for {c} outputs"
            )));
        }
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let mut sum = 0.0f64;
        for v in row.iter() {
            sum += (v.as_f64() - max).exp();
        }
        let lse = max + sum.ln();
        loss += lse - row[y].as_f64();
        for j in 0..c {
            let p = (row[j].as_f64() - max).exp() / sum;
            let target = if j == y { 1.0 } else { 0.0 };
            grad[[i, j]] = T::from_f64((p - target) / n as f64);
        }
    }
    Ok((loss / n as f64, grad))
}

/// Mean per-class sigmoid cross-entropy for multi-label targets;
/// `positives[i]` lists the classes present in sample i. The mean runs
/// over all n*c elements, matching the gradient scale.
pub fn sigmoid_ce<T: Scalar>(
    logits: &Array2<T>,
    positives: &[Vec<u32>],
) -> Result<(f64, Array2<T>), NnError> {
    let (n, c) = logits.dim();
    if positives.len() != n {
        return Err(NnError::ShapeError(format!(
            "{n} logit rows but {} label sets",
            positives.len()
        )));
    }
    if n == 0 || c == 0 {
        return Err(NnError::ShapeError("empty logits".into()));
    }
    let total = (n * c) as f64;
    let mut loss = 0.0f64;
    let mut grad = Array2::<T>::zeros((n, c));
    for i in 0..n {
        let mut hot = vec![false; c];
        for &p in &positives[i] {
            let p = p as usize;
            if p >= c {
                return Err(NnError::SchemaError(format!(
                    "class {p} out of range for {c} outputs"
                )));
            }
            hot[p] = true;
        }
        for j in 0..c {
            let z = logits[[i, j]].as_f64();
            let y = if hot[j] { 1.0 } else { 0.0 };
            // max(z,0) - z*y + ln(1 + exp(-|z|)) is the stable form.
            loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            let sig = 1.0 / (1.0 + (-z).exp());
            grad[[i, j]] = T::from_f64((sig - y) / total);
        }
    }
    Ok((loss / total, grad))
}

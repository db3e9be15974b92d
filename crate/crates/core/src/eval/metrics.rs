use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fraction of rows whose label ranks among the `k` largest logits. A logit
/// equal to the label's counts as ranking above it when its index is lower.
/// `k` larger than the class count is clamped to it.
pub fn topk_accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize], k: usize) -> Result<f64> {
    let shape = logits.shape();
    let [b, classes] = shape[..] else {
        return Err(Error::InvalidShape {
            op: "topk_accuracy",
            detail: format!("expects B×K logits, got {shape:?}"),
        });
    };
    if k == 0 {
        return Err(Error::arg("top-k needs k >= 1"));
    }
    if labels.len() != b {
        return Err(Error::shape("topk_accuracy", &[b], &[labels.len()]));
    }
    let k = k.min(classes);
    if b == 0 {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::arg(format!("label {y} out of range for {classes} classes")));
        }
        let row = logits.row(i);
        let target = row[y];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > target || (v == target && j < y))
            .count();
        hits += usize::from(rank < k);
    }
    Ok(hits as f64 / b as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(logits: &[[f64; 4]], labels: &[usize], k: usize) -> f64 {
        let mut hits = 0;
        for (row, &y) in logits.iter().zip(labels) {
            let mut idx: Vec<usize> = (0..4).collect();
            // Stable sort by descending value keeps lower indices first on ties.
            idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
            hits += usize::from(idx[..k].contains(&y));
        }
        hits as f64 / logits.len() as f64
    }

    #[test]
    fn handcrafted_tie_case() {
        let rows = [[0.1, 0.9, 0.3, 0.2], [0.5, 0.5, 0.1, 0.0], [0.2, 0.1, 0.4, 0.3], [0.0, 0.0, 0.0, 1.0]];
        let labels = [1, 1, 0, 2];
        let t = Tensor::<f64>::from_f64(&[4, 4], &rows.concat()).unwrap();
        for k in 1..=4 {
            assert_eq!(topk_accuracy(&t, &labels, k).unwrap(), brute(&rows, &labels, k), "k={k}");
        }
        // Row 1 ties 0.5/0.5: index 0 wins, so label 1 misses at k=1.
        assert_eq!(topk_accuracy(&t, &labels, 1).unwrap(), 0.25);
    }

    #[test]
    fn trivial_cases_and_errors() {
        let t = Tensor::<f64>::from_f64(&[2, 3], &[3., 1., 2., 0., 5., 1.]).unwrap();
        assert_eq!(topk_accuracy(&t, &[0, 1], 1).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&t, &[2, 0], 3).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&t, &[2, 0], 10).unwrap(), 1.0);
        assert!(topk_accuracy(&t, &[2, 0], 0).is_err());
        assert!(topk_accuracy(&t, &[2], 1).is_err());
        assert!(topk_accuracy(&t, &[2, 3], 1).is_err());
    }
}

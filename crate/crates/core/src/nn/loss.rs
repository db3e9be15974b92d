use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// Mean over rows of `-log softmax(logits)[label]`.
pub fn softmax_cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let [rows, classes] = shape[..] else {
        return Err(Error::InvalidShape {
            op: "softmax_cross_entropy",
            detail: format!("expects B×K logits, got {shape:?}"),
        });
    };
    if labels.len() != rows {
        return Err(Error::InvalidShape {
            op: "softmax_cross_entropy",
            detail: format!("{} labels for {rows} rows", labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::arg(format!("label {bad} out of range for {classes} classes")));
    }
    let logp = g.log_softmax(logits)?;
    let picked = g.gather(logp, labels)?;
    let mean = g.mean(picked)?;
    g.neg(mean)
}

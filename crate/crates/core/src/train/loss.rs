use crate::tensor::{Tape, Tensor, Var};

use super::TrainError;

/// `(2i, 2i + 1)` for `i < n`: the layout used for all view batches.
pub fn adjacent_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).map(|i| (2 * i, 2 * i + 1)).collect()
}

fn targets(rows: usize, pairs: &[(usize, usize)]) -> Result<Vec<usize>, TrainError> {
    if pairs.len() < 2 {
        return Err(TrainError::Config(format!(
            "NT-Xent needs at least two positive pairs, got {}",
            pairs.len()
        )));
    }
    if rows != 2 * pairs.len() {
        return Err(TrainError::Config(format!(
            "{} positive pairs over {rows} embeddings",
            pairs.len()
        )));
    }
    let mut out = vec![usize::MAX; rows];
    for &(a, b) in pairs {
        if a == b || a >= rows || b >= rows || out[a] != usize::MAX || out[b] != usize::MAX {
            return Err(TrainError::Config(format!(
                "pairing is not a perfect matching at ({a}, {b})"
            )));
        }
        out[a] = b;
        out[b] = a;
    }
    Ok(out)
}

/// NT-Xent over the rows of `z`, averaged over all ordered positives.
pub fn nt_xent(tape: &mut Tape, z: Var, pairs: &[(usize, usize)], temperature: f64) -> Result<Var, TrainError> {
    if !(temperature > 0.0) {
        return Err(TrainError::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let targets = targets(tape.value(z).rows(), pairs)?;
    let unit = tape.normalize_rows(z)?;
    let sim = tape.matmul_t(unit, unit)?;
    let logits = tape.scale(sim, 1.0 / temperature);
    Ok(tape.masked_cross_entropy(logits, &targets)?)
}

/// Value-only form of [`nt_xent`].
pub fn nt_xent_value(embeddings: &[Vec<f64>], pairs: &[(usize, usize)], temperature: f64) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::from_rows(embeddings)?);
    let loss = nt_xent(&mut tape, z, pairs, temperature)?;
    Ok(tape.value(loss).data()[0])
}

use mmvq_autodiff::{Scalar, Tensor};

use crate::error::{Error, Result};

/// How the quantizer picks and differentiates codebook entries.
#[derive(Clone, Copy, Debug)]
pub enum QuantMode<'a, T> {
    /// Nearest entry, straight-through gradient to `z`.
    Nearest,
    /// Fixed entry indices with the stop-gradient terms replaced by the
    /// constants `z_anchor` / `e_anchor` and `zq = e_anchor + (z - z_anchor)`.
    /// Agrees with `Nearest` in value and gradient at the anchor point while
    /// being smooth around it, so it can be probed by finite differences.
    Frozen {
        indices: &'a [usize],
        z_anchor: &'a Tensor<T>,
        e_anchor: &'a Tensor<T>,
    },
}

/// Index of the nearest row of `codebook[K, L]` to `z`; ties go to the
/// lowest index.
pub fn nearest_index<T: Scalar>(z: &[T], codebook: &Tensor<T>) -> Result<usize> {
    let l = codebook.shape()[1];
    if z.len() != l {
        return Err(Error::validation(format!(
            "latent has {} values, codebook entries have {l}",
            z.len()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite latent passed to the quantizer"));
    }
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, row) in codebook.data().chunks(l).enumerate() {
        let d: f64 = row
            .iter()
            .zip(z)
            .map(|(&e, &x)| {
                let t = (x - e).to_f64().unwrap_or(f64::NAN);
                t * t
            })
            .sum();
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Quantized<T> {
    pub zq: Vec<T>,
    pub index: usize,
    pub codebook_loss: f64,
    pub commitment_loss: f64,
}

/// Quantizes a single latent vector (inference, no gradients). Both losses
/// equal `‖z - e‖²` in value; they differ only in which side receives
/// gradient during training.
pub fn quantize_vector<T: Scalar>(z: &[T], codebook: &Tensor<T>) -> Result<Quantized<T>> {
    let index = nearest_index(z, codebook)?;
    let l = codebook.shape()[1];
    let zq = codebook.data()[index * l..(index + 1) * l].to_vec();
    let d: f64 = z
        .iter()
        .zip(&zq)
        .map(|(&a, &b)| {
            let t = (a - b).to_f64().unwrap_or(f64::NAN);
            t * t
        })
        .sum();
    Ok(Quantized {
        zq,
        index,
        codebook_loss: d,
        commitment_loss: d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_entry_example() {
        let cb = Tensor::new(&[2, 2], vec![0.0f64, 0.0, 1.0, 1.0]).unwrap();
        let q = quantize_vector(&[0.9, 0.8], &cb).unwrap();
        assert_eq!(q.index, 1);
        assert!((q.codebook_loss - 0.05).abs() < 1e-12);
        assert!((q.commitment_loss - 0.05).abs() < 1e-12);
        let again = quantize_vector(&q.zq, &cb).unwrap();
        assert_eq!((again.index, again.codebook_loss), (1, 0.0));
        assert_eq!(again.zq, q.zq);
    }

    #[test]
    fn ties_pick_lowest_and_nan_rejected() {
        let cb = Tensor::new(&[3, 1], vec![1.0f64, -1.0, 1.0]).unwrap();
        assert_eq!(nearest_index(&[0.0], &cb).unwrap(), 0);
        assert!(matches!(nearest_index(&[f64::NAN], &cb), Err(Error::Numeric(_))));
        assert!(nearest_index(&[0.0, 1.0], &cb).is_err());
    }
}

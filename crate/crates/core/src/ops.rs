//! Value-only forward operations, for callers that do not need gradients.

use crate::error::Result;
use crate::tensor::{self, Tensor};

/// `input · weight + bias` for `input[batch, d_in]`, `weight[d_in, d_out]`.
pub fn affine(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    tensor::affine_kernel(input, weight, bias)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(tensor::relu_scalar)
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(tensor::sigmoid_scalar)
}

/// Mean softmax cross-entropy over the batch.
pub fn softmax_cross_entropy(logits: &Tensor, one_hot_targets: &Tensor) -> Result<f64> {
    tensor::softmax_xent_kernel(logits, one_hot_targets).map(|(loss, _)| loss)
}

/// Row-wise softmax.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (_, c) = logits.matrix_dims("softmax")?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(out)
}

/// Index of the largest entry in each row (lowest index on ties).
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.cols();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_of_zero() {
        assert_eq!(sigmoid(&Tensor::scalar(0.0)).item(), 0.5);
    }

    #[test]
    fn relu_clamps_negatives() {
        assert_eq!(relu(&Tensor::vector(vec![-1.0, 2.0])).data(), &[0.0, 2.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-5.0, 0.0, 5.0]]).unwrap();
        let s = softmax(&t).unwrap();
        for r in 0..2 {
            assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(argmax_rows(&t), vec![2, 2]);
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        let t = Tensor::from_rows(&[vec![1.0, 1.0, 0.0]]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0]);
    }
}

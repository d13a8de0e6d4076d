use super::scalar::Real;
use super::{Backward, Tensor};
use crate::error::{Error, Result};

struct SumRule {
    factor: f64,
}

struct SampleMeanRule {
    per_sample: usize,
}

struct ScaleSamplesRule<T> {
    weights: Vec<T>,
}

impl<T: Real> Backward<T> for SumRule {
    fn backward(&self, inputs: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let g = grad[0] * T::from_f64(self.factor);
        vec![Some(vec![g; inputs[0].numel()])]
    }
}

impl<T: Real> Backward<T> for SampleMeanRule {
    fn backward(&self, _: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let inv = T::ONE / T::from_f64(self.per_sample as f64);
        let mut out = Vec::with_capacity(grad.len() * self.per_sample);
        for &g in grad {
            out.extend(std::iter::repeat(g * inv).take(self.per_sample));
        }
        vec![Some(out)]
    }
}

impl<T: Real> Backward<T> for ScaleSamplesRule<T> {
    fn backward(&self, _: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let per = grad.len() / self.weights.len();
        let out = grad
            .chunks(per)
            .zip(&self.weights)
            .flat_map(|(g, &w)| g.iter().map(move |&v| v * w))
            .collect();
        vec![Some(out)]
    }
}

impl<T: Real> Tensor<T> {
    pub fn sum(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        Tensor::from_op(vec![1], vec![s], vec![self.clone()], SumRule { factor: 1.0 })
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel();
        let s: T = self.data().iter().copied().sum();
        let m = s / T::from_f64(n as f64);
        Tensor::from_op(
            vec![1],
            vec![m],
            vec![self.clone()],
            SumRule {
                factor: 1.0 / n as f64,
            },
        )
    }

    /// Sum of absolute values.
    pub fn l1_norm(&self) -> Tensor<T> {
        self.abs().sum()
    }

    /// Sum of squares.
    pub fn squared_l2_norm(&self) -> Tensor<T> {
        self.square().sum()
    }

    /// Mean over every axis except the leading (batch) one; shape `(N)`.
    pub fn sample_mean(&self) -> Tensor<T> {
        let n = self.shape()[0];
        let per = self.numel() / n;
        let inv = T::ONE / T::from_f64(per as f64);
        let out = self
            .data()
            .chunks(per)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        Tensor::from_op(
            vec![n],
            out,
            vec![self.clone()],
            SampleMeanRule { per_sample: per },
        )
    }

    /// Multiplies every entry of sample `n` by the constant `weights[n]`.
    pub fn scale_samples(&self, weights: &[T]) -> Result<Tensor<T>> {
        let n = self.shape()[0];
        if weights.len() != n {
            return Err(Error::invalid(
                "scale_samples",
                format!("{} weights for batch of {n}", weights.len()),
            ));
        }
        let per = self.numel() / n;
        let out = self
            .data()
            .chunks(per)
            .zip(weights)
            .flat_map(|(c, &w)| c.iter().map(move |&v| v * w))
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            ScaleSamplesRule {
                weights: weights.to_vec(),
            },
        ))
    }
}

use super::scalar::Real;
use super::{Backward, Tensor};
use crate::error::{Error, Result};

struct AddRule;
struct SubRule;
struct MulRule;
struct ScaleRule<T>(T);
struct MapRule<F>(F);

impl<T: Real> Backward<T> for AddRule {
    fn backward(&self, inputs: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        inputs
            .iter()
            .map(|t| t.requires_grad().then(|| grad.to_vec()))
            .collect()
    }
}

impl<T: Real> Backward<T> for SubRule {
    fn backward(&self, inputs: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![
            inputs[0].requires_grad().then(|| grad.to_vec()),
            inputs[1]
                .requires_grad()
                .then(|| grad.iter().map(|&g| -g).collect()),
        ]
    }
}

impl<T: Real> Backward<T> for MulRule {
    fn backward(&self, inputs: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let a = inputs[0].data();
        let b = inputs[1].data();
        vec![
            inputs[0]
                .requires_grad()
                .then(|| grad.iter().zip(b.iter()).map(|(&g, &y)| g * y).collect()),
            inputs[1]
                .requires_grad()
                .then(|| grad.iter().zip(a.iter()).map(|(&g, &x)| g * x).collect()),
        ]
    }
}

impl<T: Real> Backward<T> for ScaleRule<T> {
    fn backward(&self, _: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(grad.iter().map(|&g| g * self.0).collect())]
    }
}

/// Unary op whose local derivative depends on the input and output value.
impl<T: Real, F> Backward<T> for MapRule<F>
where
    F: Fn(T, T) -> T + Send + Sync,
{
    fn backward(&self, inputs: &[Tensor<T>], output: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let x = inputs[0].data();
        vec![Some(
            grad.iter()
                .zip(x.iter().zip(output))
                .map(|(&g, (&x, &y))| g * (self.0)(x, y))
                .collect(),
        )]
    }
}

impl<T: Real> Tensor<T> {
    fn zip_same(
        &self,
        other: &Tensor<T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Vec<T>> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        let a = self.data();
        let b = other.data();
        Ok(a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect())
    }

    fn map_unary(
        &self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + Send + Sync + 'static,
    ) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&v| f(v)).collect();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], MapRule(df))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.zip_same(other, "add", |a, b| a + b)?;
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            AddRule,
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.zip_same(other, "sub", |a, b| a - b)?;
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            SubRule,
        ))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.zip_same(other, "mul", |a, b| a * b)?;
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            MulRule,
        ))
    }

    pub fn scale(&self, factor: T) -> Tensor<T> {
        let out = self.data().iter().map(|&v| v * factor).collect();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], ScaleRule(factor))
    }

    pub fn add_scalar(&self, value: T) -> Tensor<T> {
        self.map_unary(move |v| v + value, |_, _| T::ONE)
    }

    /// `max(x, slope * x)` for `0 <= slope < 1`.
    pub fn leaky_relu(&self, slope: T) -> Tensor<T> {
        self.map_unary(
            move |v| if v > T::ZERO { v } else { v * slope },
            move |x, _| if x > T::ZERO { T::ONE } else { slope },
        )
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.map_unary(|v| v.tanh(), |_, y| T::ONE - y * y)
    }

    /// Elementwise `|x|`; the subgradient at zero is zero.
    pub fn abs(&self) -> Tensor<T> {
        self.map_unary(
            |v| v.abs(),
            |x, _| {
                if x > T::ZERO {
                    T::ONE
                } else if x < T::ZERO {
                    -T::ONE
                } else {
                    T::ZERO
                }
            },
        )
    }

    pub fn square(&self) -> Tensor<T> {
        self.map_unary(|v| v * v, |x, _| x + x)
    }

    /// Elementwise square root of a nonnegative tensor; the gradient at zero
    /// is taken as zero.
    pub fn sqrt(&self) -> Tensor<T> {
        self.map_unary(
            |v| v.sqrt(),
            |_, y| {
                if y > T::ZERO {
                    T::ONE / (y + y)
                } else {
                    T::ZERO
                }
            },
        )
    }

    /// Generalized Charbonnier penalty `(x^2 + eps^2)^alpha`.
    pub fn charbonnier(&self, eps: T, alpha: T) -> Tensor<T> {
        let e2 = eps * eps;
        self.map_unary(
            move |v| (v * v + e2).powf(alpha),
            move |x, y| {
                // d/dx = 2 alpha x (x^2 + eps^2)^(alpha - 1) = 2 alpha x y / (x^2 + eps^2)
                let base = x * x + e2;
                if base > T::ZERO {
                    (alpha + alpha) * x * y / base
                } else {
                    T::ZERO
                }
            },
        )
    }
}

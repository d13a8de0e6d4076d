//! Parameter registry and the small set of layers the networks are built from.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::scalar::Real;
use crate::tensor::Tensor;

/// Negative slope of every leaky rectifier in the networks.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Ordered, named set of trainable tensors.
///
/// Registration order is the serialization order of a checkpoint.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T: Real = f32> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    fn register(&mut self, name: String, tensor: Tensor<T>) -> Tensor<T> {
        debug_assert!(
            self.entries.iter().all(|(n, _)| *n != name),
            "duplicate parameter {name}"
        );
        self.entries.push((name, tensor.clone()));
        tensor
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn num_values(&self) -> usize {
        self.tensors().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&self) {
        self.tensors().for_each(Tensor::zero_grad);
    }

    /// `(name, shape)` for every entry, in order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect()
    }

    /// Copies all values out as `f32`, in registry order.
    pub fn snapshot(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        self.iter()
            .map(|(n, t)| {
                let v = t.data().iter().map(|x| x.to_f64() as f32).collect();
                (n.to_string(), t.shape().to_vec(), v)
            })
            .collect()
    }

    /// Overwrites every parameter from `(name, shape, values)` triples; the
    /// set of names and shapes must match exactly.
    pub fn load(&self, values: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.entries.len(),
                values.len()
            )));
        }
        for ((name, tensor), (vname, vshape, vdata)) in self.entries.iter().zip(values) {
            if name != vname || tensor.shape() != vshape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: model has {name} {:?}, checkpoint has {vname} {vshape:?}",
                    tensor.shape()
                )));
            }
            tensor.set_data(vdata.iter().map(|&v| T::from_f64(v as f64)).collect())?;
        }
        Ok(())
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefixed(&self, prefix: &str) {
        for (name, t) in self.iter() {
            if name.starts_with(prefix) {
                t.set_data(vec![T::ZERO; t.numel()]).expect("leaf parameter");
            }
        }
    }
}

/// Seeded source of initial parameter values that registers every tensor it
/// creates under a dotted name.
pub struct Builder<'a, T: Real> {
    params: &'a mut ParamSet<T>,
    rng: ChaCha8Rng,
    prefix: String,
    trainable: bool,
}

impl<'a, T: Real> Builder<'a, T> {
    pub fn new(params: &'a mut ParamSet<T>, seed: u64) -> Self {
        Builder {
            params,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: String::new(),
            trainable: true,
        }
    }

    /// Like [`Builder::new`], but every tensor is a constant that never
    /// accumulates gradients.
    pub fn frozen(params: &'a mut ParamSet<T>, seed: u64) -> Self {
        Builder {
            trainable: false,
            ..Self::new(params, seed)
        }
    }

    fn make(&self, shape: &[usize], data: Vec<T>) -> Tensor<T> {
        if self.trainable {
            Tensor::parameter(shape, data).expect("builder shape")
        } else {
            Tensor::new(shape, data).expect("builder shape")
        }
    }

    /// Runs `f` with `name` appended to the current prefix.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        let saved = self.prefix.clone();
        if self.prefix.is_empty() {
            self.prefix = name.to_string();
        } else {
            self.prefix = format!("{}.{name}", self.prefix);
        }
        let out = f(self);
        self.prefix = saved;
        out
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(self.rng.gen_range(-bound..=bound)))
            .collect();
        let t = self.make(shape, data);
        let full = self.full_name(name);
        self.params.register(full, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let t = self.make(shape, vec![T::ZERO; n]);
        let full = self.full_name(name);
        self.params.register(full, t)
    }
}

/// How a convolution's weights start out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform fan-in scaling for leaky-rectifier stacks, times a gain.
    FanIn(f64),
    Zero,
}

#[derive(Clone, Debug)]
pub struct Conv2d<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new(
        b: &mut Builder<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        init: Init,
    ) -> Self {
        b.scope(name, |b| {
            let shape = [c_out, c_in, k, k];
            let weight = match init {
                Init::FanIn(gain) => {
                    let fan_in = (c_in * k * k) as f64;
                    let bound = gain * (6.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in)).sqrt();
                    b.uniform("weight", &shape, bound)
                }
                Init::Zero => b.zeros("weight", &shape),
            };
            let bias = b.zeros("bias", &[c_out]);
            Conv2d {
                weight,
                bias,
                stride,
                padding: k / 2,
            }
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(&self.weight, Some(&self.bias), self.stride, self.padding)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

pub fn leaky<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.leaky_relu(T::from_f64(LEAKY_SLOPE))
}

/// `lrelu(x + conv(lrelu(conv(x))))` at constant width.
#[derive(Clone, Debug)]
pub struct ResBlock<T: Real> {
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
}

impl<T: Real> ResBlock<T> {
    pub fn new(b: &mut Builder<'_, T>, name: &str, channels: usize) -> Self {
        b.scope(name, |b| ResBlock {
            conv1: Conv2d::new(b, "conv1", channels, channels, 3, 1, Init::FanIn(1.0)),
            conv2: Conv2d::new(b, "conv2", channels, channels, 3, 1, Init::FanIn(0.5)),
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = leaky(&self.conv1.forward(x)?);
        let h = self.conv2.forward(&h)?;
        Ok(leaky(&x.add(&h)?))
    }
}

//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap handle to an immutable node in a computation graph.
//! Operations on tensors that require gradients record their inputs, and
//! [`Tensor::backward`] walks the recorded graph in reverse topological order,
//! accumulating gradients into every reachable leaf created with
//! `requires_grad = true`. Intermediate gradients are kept only for the
//! duration of the backward pass.
//!
//! Image-like data uses `(N, C, H, W)` layout throughout.

mod conv;
mod correlation;
mod elementwise;
mod reduce;
mod sample;
mod structure;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

use scalar::Real;

pub use sample::{bilinear_at, half_extent, UpsampleMode};

use crate::error::{Error, Result};

pub mod scalar {
    //! The scalar types a [`Tensor`](super::Tensor) can hold.

    use std::fmt::{Debug, Display};
    use std::iter::Sum;
    use std::ops::{AddAssign, MulAssign, SubAssign};

    /// Real scalar: `f64` for verification, `f32` for training.
    pub trait Real:
        Copy
        + Default
        + Debug
        + Display
        + PartialOrd
        + Send
        + Sync
        + Sum
        + AddAssign
        + SubAssign
        + MulAssign
        + std::ops::Add<Output = Self>
        + std::ops::Sub<Output = Self>
        + std::ops::Mul<Output = Self>
        + std::ops::Div<Output = Self>
        + std::ops::Neg<Output = Self>
        + 'static
    {
        const ZERO: Self;
        const ONE: Self;
        const NAME: &'static str;

        fn from_f64(v: f64) -> Self;
        fn to_f64(self) -> f64;
        fn abs(self) -> Self;
        fn sqrt(self) -> Self;
        fn powf(self, e: Self) -> Self;
        fn tanh(self) -> Self;
        fn floor(self) -> Self;
        fn is_finite(self) -> bool;
        fn max(self, other: Self) -> Self;
        fn min(self, other: Self) -> Self;

        /// `C = A * B + beta * C` for row/column strided matrices.
        ///
        /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
        #[allow(clippy::too_many_arguments)]
        fn gemm(
            m: usize,
            k: usize,
            n: usize,
            a: &[Self],
            a_strides: (isize, isize),
            b: &[Self],
            b_strides: (isize, isize),
            beta: Self,
            c: &mut [Self],
            c_strides: (isize, isize),
        );
    }

    fn span(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
        if rows == 0 || cols == 0 {
            return 0;
        }
        ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
    }

    macro_rules! impl_real {
        ($t:ty, $gemm:path) => {
            impl Real for $t {
                const ZERO: Self = 0.0;
                const ONE: Self = 1.0;
                const NAME: &'static str = stringify!($t);

                #[inline]
                fn from_f64(v: f64) -> Self {
                    v as $t
                }
                #[inline]
                fn to_f64(self) -> f64 {
                    self as f64
                }
                #[inline]
                fn abs(self) -> Self {
                    <$t>::abs(self)
                }
                #[inline]
                fn sqrt(self) -> Self {
                    <$t>::sqrt(self)
                }
                #[inline]
                fn powf(self, e: Self) -> Self {
                    <$t>::powf(self, e)
                }
                #[inline]
                fn tanh(self) -> Self {
                    <$t>::tanh(self)
                }
                #[inline]
                fn floor(self) -> Self {
                    <$t>::floor(self)
                }
                #[inline]
                fn is_finite(self) -> bool {
                    <$t>::is_finite(self)
                }
                #[inline]
                fn max(self, other: Self) -> Self {
                    <$t>::max(self, other)
                }
                #[inline]
                fn min(self, other: Self) -> Self {
                    <$t>::min(self, other)
                }

                fn gemm(
                    m: usize,
                    k: usize,
                    n: usize,
                    a: &[Self],
                    a_strides: (isize, isize),
                    b: &[Self],
                    b_strides: (isize, isize),
                    beta: Self,
                    c: &mut [Self],
                    c_strides: (isize, isize),
                ) {
                    assert!(a.len() >= span(m, k, a_strides), "gemm: lhs too short");
                    assert!(b.len() >= span(k, n, b_strides), "gemm: rhs too short");
                    assert!(c.len() >= span(m, n, c_strides), "gemm: out too short");
                    // SAFETY: the asserts above bound every strided access.
                    unsafe {
                        $gemm(
                            m,
                            k,
                            n,
                            1.0,
                            a.as_ptr(),
                            a_strides.0,
                            a_strides.1,
                            b.as_ptr(),
                            b_strides.0,
                            b_strides.1,
                            beta,
                            c.as_mut_ptr(),
                            c_strides.0,
                            c_strides.1,
                        );
                    }
                }
            }
        };
    }

    impl_real!(f32, matrixmultiply::sgemm);
    impl_real!(f64, matrixmultiply::dgemm);
}

/// Gradient rule of a recorded operation.
///
/// Given the operation's inputs, its forward output and the gradient flowing
/// into that output, returns one gradient per input (or `None` for inputs
/// that do not require gradients).
pub(crate) trait Backward<T: Real>: Send + Sync {
    fn backward(&self, inputs: &[Tensor<T>], output: &[T], grad: &[T]) -> Vec<Option<Vec<T>>>;
}

struct Recorded<T: Real> {
    inputs: Vec<Tensor<T>>,
    rule: Box<dyn Backward<T>>,
}

struct Node<T: Real> {
    shape: Vec<usize>,
    data: RwLock<Vec<T>>,
    grad: Mutex<Option<Vec<T>>>,
    requires_grad: bool,
    op: Option<Recorded<T>>,
}

/// Shared handle to a dense tensor node.
pub struct Tensor<T: Real = f32>(Arc<Node<T>>);

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("dtype", &T::NAME)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("recorded", &self.0.op.is_some())
            .finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::invalid("tensor", format!("zero extent in {shape:?}")));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::invalid(
            "tensor",
            format!("shape {shape:?} holds {numel} values, got {len}"),
        ));
    }
    Ok(())
}

impl<T: Real> Tensor<T> {
    fn leaf(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        Tensor(Arc::new(Node {
            shape,
            data: RwLock::new(data),
            grad: Mutex::new(None),
            requires_grad,
            op: None,
        }))
    }

    /// Constant tensor (no gradient tracking).
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    /// Trainable leaf that accumulates gradients.
    pub fn parameter(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::leaf(shape.to_vec(), data, true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::ZERO)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("full: invalid shape")
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf(vec![1], vec![value], false)
    }

    /// Builds the output of an operation, recording it only when some input
    /// needs a gradient.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: Vec<Tensor<T>>,
        rule: impl Backward<T> + 'static,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = inputs.iter().any(Tensor::requires_grad);
        let op = requires_grad.then(|| Recorded {
            inputs,
            rule: Box::new(rule),
        });
        Tensor(Arc::new(Node {
            shape,
            data: RwLock::new(data),
            grad: Mutex::new(None),
            requires_grad,
            op,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<T>> {
        self.0.data.read().expect("tensor data lock poisoned")
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        let d = self.data();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.shape());
        d[0]
    }

    /// Replaces the values of a leaf in place (used by optimizers and loaders).
    pub fn set_data(&self, data: Vec<T>) -> Result<()> {
        if !self.is_leaf() {
            return Err(Error::invalid("set_data", "cannot overwrite a recorded op output"));
        }
        check_shape(&self.0.shape, data.len())?;
        *self.0.data.write().expect("tensor data lock poisoned") = data;
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Copy of this tensor's values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::leaf(self.0.shape.clone(), self.to_vec(), false)
    }

    /// Same values, relabelled with a compatible shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        check_shape(shape, self.numel())?;
        Ok(Self::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            structure::Identity,
        ))
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    fn id(&self) -> usize {
        Arc::as_ptr(&self.0) as *const () as usize
    }

    /// Whether both handles point at the same node.
    pub fn same_node(&self, other: &Tensor<T>) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    /// Every node without a recorded op that this tensor was computed from,
    /// in discovery order. Outputs of unrecorded ops appear here too, since
    /// their history was never kept.
    pub fn graph_leaves(&self) -> Vec<Tensor<T>> {
        let mut out = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack = vec![self.clone()];
        visited.insert(self.id());
        while let Some(node) = stack.pop() {
            match &node.0.op {
                None => out.push(node),
                Some(rec) => {
                    for input in &rec.inputs {
                        if visited.insert(input.id()) {
                            stack.push(input.clone());
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates `d self / d leaf` into every reachable trainable leaf.
    ///
    /// Repeated calls add to existing gradients until [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NotScalar(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Iterative post-order DFS over nodes that carry gradients.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((node, child)) = stack.pop() {
            let inputs = node.0.op.as_ref().map(|r| r.inputs.as_slice()).unwrap_or(&[]);
            if child < inputs.len() {
                let next = inputs[child].clone();
                stack.push((node, child + 1));
                if next.requires_grad() && visited.insert(next.id()) {
                    stack.push((next, 0));
                }
            } else {
                order.push(node);
            }
        }

        let mut grads: HashMap<usize, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::ONE]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.0.op {
                None => {
                    let mut slot = node.0.grad.lock().expect("grad lock poisoned");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        None => *slot = Some(g),
                    }
                }
                Some(rec) => {
                    let input_grads = {
                        let out = node.data();
                        rec.rule.backward(&rec.inputs, &out, &g)
                    };
                    debug_assert_eq!(input_grads.len(), rec.inputs.len());
                    for (input, ig) in rec.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), input.numel());
                        match grads.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += *b),
                            None => {
                                grads.insert(input.id(), ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub(crate) fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape() {
            [n, c, h, w] => Ok((n, c, h, w)),
            ref s => Err(Error::invalid(op, format!("expected (N,C,H,W), got {s:?}"))),
        }
    }
}

/// Per-pixel 2D sampling offsets in normalized coordinates.
///
/// Channel 0 is the horizontal offset and channel 1 the vertical one; the
/// image spans `[-1, 1]` along each axis, so a flow keeps its meaning when
/// resampled to another resolution.
#[derive(Clone, Debug)]
pub struct FlowField<T: Real = f32>(Tensor<T>);

impl<T: Real> FlowField<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        let (_, c, _, _) = tensor.dims4("flow")?;
        if c != 2 {
            return Err(Error::invalid("flow", format!("flow needs 2 channels, got {c}")));
        }
        Ok(FlowField(tensor))
    }

    pub fn zeros(n: usize, h: usize, w: usize) -> Self {
        FlowField(Tensor::zeros(&[n, 2, h, w]))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    /// `(N, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.0.shape();
        (s[0], s[2], s[3])
    }

    pub fn is_finite(&self) -> bool {
        self.0.all_finite()
    }

    pub fn detach(&self) -> Self {
        FlowField(self.0.detach())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f64>::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.scale(2.0);
        assert!(matches!(y.backward(), Err(Error::NotScalar(_))));
    }

    #[test]
    fn sum_gives_ones_and_square_gives_twice() {
        let x = Tensor::<f64>::parameter(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
        x.zero_grad();
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::<f64>::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let loss = x.sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn constants_never_accumulate() {
        let c = Tensor::<f64>::new(&[2], vec![1.0, 2.0]).unwrap();
        let x = Tensor::<f64>::parameter(&[2], vec![3.0, 4.0]).unwrap();
        x.mul(&c).unwrap().sum().backward().unwrap();
        assert!(c.grad().is_none());
        assert_eq!(x.grad().unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn shared_subexpression_gradients_add_up() {
        let x = Tensor::<f64>::parameter(&[1], vec![3.0]).unwrap();
        let y = x.scale(2.0);
        // d/dx (2x + 2x * x) = 2 + 4x
        let loss = y.add(&y.mul(&x).unwrap()).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![14.0]);
    }

    #[test]
    fn detach_cuts_the_graph() {
        let x = Tensor::<f64>::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let d = x.scale(3.0).detach();
        assert!(!d.requires_grad());
        assert_eq!(d.to_vec(), vec![3.0, 6.0]);
    }

    #[test]
    fn flow_needs_two_channels() {
        assert!(FlowField::new(Tensor::<f64>::zeros(&[1, 3, 2, 2])).is_err());
        assert!(FlowField::new(Tensor::<f64>::zeros(&[1, 2, 2, 2])).is_ok());
    }
}

//! Differentiable kernels for the decoder: a dynamic reverse-mode tape over
//! dense row-major tensors, and a finite-difference gradient checker.
//!
//! Training runs in `f32`; gradient verification runs the same kernels in
//! `f64`. Every kernel is single threaded and reduces in a fixed order, so a
//! given input always produces bit-identical output.

mod gradcheck;
mod tape;

pub use gradcheck::{finite_difference_check, finite_difference_check_many};
pub use tape::{Gradients, Tape, Var};

use std::fmt::Debug;
use std::iter::Sum;

/// Floating-point element type usable on the tape.
pub trait Real:
    num_traits::Float + num_traits::FromPrimitive + Default + Debug + Sum + Send + Sync + 'static
{
    const NAME: &'static str;

    /// `C = alpha * A B + beta * C` with arbitrary strides (row stride,
    /// column stride) for each operand. `A` is `m x k`, `B` is `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );

    #[inline]
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("finite constant")
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, (rs, cs): (usize, usize)) {
    if rows > 0 && cols > 0 {
        assert!((rows - 1) * rs + (cols - 1) * cs < len, "gemm operand out of bounds");
    }
}

macro_rules! impl_real {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Real for $t {
            const NAME: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_extent(a.len(), m, k, a_strides);
                check_extent(b.len(), k, n, b_strides);
                check_extent(c.len(), m, n, c_strides);
                // SAFETY: the extent checks above keep every access that the
                // strided kernel performs inside the three slices, and `c`
                // is uniquely borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    );
                }
            }
        }
    };
}

impl_real!(f32, "f32", matrixmultiply::sgemm);
impl_real!(f64, "f64", matrixmultiply::dgemm);

/// Errors raised by kernels.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("{kernel}: shape mismatch: {detail}")]
    Shape { kernel: &'static str, detail: String },
    #[error("{kernel} produced a non-finite value")]
    NonFinite { kernel: &'static str },
    #[error("segment_softmax: segment {0} is empty")]
    EmptySegment(usize),
    #[error("segment index {id} out of range for {count} segments")]
    SegmentRange { id: usize, count: usize },
    #[error("gradient check: {0}")]
    GradCheck(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(NumericsError::Shape {
                kernel: "tensor",
                detail: format!("shape {shape:?} needs {len} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); len],
        }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::c(v)).collect())
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        let d = self.last_dim();
        if d == 0 {
            0
        } else {
            self.data.len() / d
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Grouping of positions into dense segments, e.g. the edges incident to each
/// node of the Tanner graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentIndex {
    segment_of: Vec<usize>,
    segment_count: usize,
    /// Positions of each segment in ascending order.
    members: Vec<Vec<usize>>,
}

impl SegmentIndex {
    pub fn new(segment_of: Vec<usize>, segment_count: usize) -> Result<Self> {
        let mut members = vec![Vec::new(); segment_count];
        for (pos, &id) in segment_of.iter().enumerate() {
            if id >= segment_count {
                return Err(NumericsError::SegmentRange {
                    id,
                    count: segment_count,
                });
            }
            members[id].push(pos);
        }
        Ok(Self {
            segment_of,
            segment_count,
            members,
        })
    }

    pub fn segment_of(&self) -> &[usize] {
        &self.segment_of
    }

    pub fn segment_count(&self) -> usize {
        self.segment_count
    }

    pub fn members(&self, segment: usize) -> &[usize] {
        &self.members[segment]
    }

    pub fn len(&self) -> usize {
        self.segment_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segment_of.is_empty()
    }

    /// First empty segment, if any.
    pub fn empty_segment(&self) -> Option<usize> {
        self.members.iter().position(Vec::is_empty)
    }

    /// Replicates the index for `copies` independent blocks laid out one after
    /// another (block `b` uses segments `b * count ..`).
    pub fn tiled(&self, copies: usize) -> Self {
        let n = self.segment_of.len();
        let mut segment_of = Vec::with_capacity(n * copies);
        for b in 0..copies {
            segment_of.extend(self.segment_of.iter().map(|&s| s + b * self.segment_count));
        }
        Self::new(segment_of, self.segment_count * copies).expect("tiling preserves range")
    }
}

/// `tanh`-approximated GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let k = T::c((2.0 / std::f64::consts::PI).sqrt());
    let u = k * (x + T::c(0.044715) * x * x * x);
    T::c(0.5) * x * (T::one() + u.tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::c((2.0 / std::f64::consts::PI).sqrt());
    let u = k * (x + T::c(0.044715) * x * x * x);
    let t = u.tanh();
    let du = k * (T::one() + T::c(3.0 * 0.044715) * x * x);
    T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * du
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

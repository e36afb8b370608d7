//! Dense N-d arrays, a reverse-mode tape, and the optimizer.
//!
//! Training runs in `f32`; every operator is generic over [`Real`] so the
//! gradient checks can run the same code in `f64`.

mod checkpoint;
mod conv;
mod graph;
mod optim;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use conv::ConvGeometry;
pub use graph::{Activation, Graph, Var};
pub use optim::{cosine_lr, Adam, Parameter};

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, MulAssign, SubAssign};

use crate::error::{Error, Result};

/// Scalar type a [`Tensor`] can hold.
pub trait Real:
    num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = a · b (+ c when accumulate)` on row-major buffers, where `a` is
    /// `m×k` (stored `k×m` when `trans_a`) and `b` is `k×n` (stored `n×k`
    /// when `trans_b`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        c: &mut [Self],
        accumulate: bool,
    );
}

fn gemm_strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // logical rows×cols; stored transposed when `trans`
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

/// Packed GEMM kernels waste most of their work when one operand has only a
/// handful of rows; those shapes run as plain dot products / row updates.
#[allow(clippy::too_many_arguments)]
fn skinny_gemm<T: Copy + Default + std::ops::Add<Output = T> + std::ops::Mul<Output = T> + AddAssign>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) -> bool {
    const SKINNY: usize = 4;
    let a_at = |i: usize, p: usize| if trans_a { a[p * m + i] } else { a[i * k + p] };
    if trans_b && !trans_a && m <= SKINNY {
        for j in 0..n {
            let d = multi_dot(&a[..m * k], k, &b[j * k..(j + 1) * k]);
            for (i, &di) in d.iter().enumerate().take(m) {
                let cij = &mut c[i * n + j];
                *cij = if accumulate { *cij + di } else { di };
            }
        }
        return true;
    }
    if !trans_b && m <= SKINNY {
        if !accumulate {
            c[..m * n].fill(T::default());
        }
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            for i in 0..m {
                let s = a_at(i, p);
                for (cv, &bv) in c[i * n..(i + 1) * n].iter_mut().zip(brow) {
                    *cv += s * bv;
                }
            }
        }
        return true;
    }
    if !trans_b && k <= SKINNY {
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            if !accumulate {
                crow.fill(T::default());
            }
            for p in 0..k {
                let s = a_at(i, p);
                for (cv, &bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *cv += s * bv;
                }
            }
        }
        return true;
    }
    false
}

/// Dot products of up to four contiguous rows of `a` (length `k` each)
/// with one vector, using eight interleaved partial sums per row.
fn multi_dot<T: Copy + Default + std::ops::Add<Output = T> + std::ops::Mul<Output = T> + AddAssign>(
    a: &[T],
    k: usize,
    y: &[T],
) -> [T; 4] {
    let rows = a.len() / k.max(1);
    let mut acc = [[T::default(); 8]; 4];
    let full = k / 8 * 8;
    let mut p = 0;
    while p < full {
        let yv: &[T; 8] = y[p..p + 8].try_into().unwrap();
        for (r, accr) in acc.iter_mut().enumerate().take(rows) {
            let av: &[T; 8] = a[r * k + p..r * k + p + 8].try_into().unwrap();
            for l in 0..8 {
                accr[l] += av[l] * yv[l];
            }
        }
        p += 8;
    }
    let mut out = [T::default(); 4];
    for r in 0..rows {
        let s = &acc[r];
        let mut t = ((s[0] + s[1]) + (s[2] + s[3])) + ((s[4] + s[5]) + (s[6] + s[7]));
        for q in full..k {
            t += a[r * k + q] * y[q];
        }
        out[r] = t;
    }
    out
}

macro_rules! impl_real {
    ($t:ty, $kernel:ident) => {
        impl Real for $t {
            fn lit(v: f64) -> Self {
                v as $t
            }
            fn as_f64(self) -> f64 {
                self as f64
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if skinny_gemm(m, k, n, a, trans_a, b, trans_b, c, accumulate) {
                    return;
                }
                let (rsa, csa) = gemm_strides(m, k, trans_a);
                let (rsb, csb) = gemm_strides(k, n, trans_b);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: bounds asserted above; strides describe dense
                // row-major (or transposed) storage of exactly those extents.
                unsafe {
                    matrixmultiply::$kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}
impl_real!(f32, sgemm);
impl_real!(f64, dgemm);

/// Contiguous row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {numel} elements but {} were supplied",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::lit(v)).collect())
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    /// `(N, C, H, W)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Dimension(format!("expected a rank-4 tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Sum of element-wise products.
    pub fn dot(&self, other: &Tensor<T>) -> T {
        self.data.iter().zip(&other.data).fold(T::zero(), |acc, (&a, &b)| acc + a * b)
    }

    /// Converts element type, e.g. to run an `f32` model check in `f64`.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::lit(v.as_f64())).collect() }
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Contract("cannot stack an empty list".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::Dimension(format!(
                    "cannot stack {:?} with {:?}",
                    first.shape, t.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// The `i`-th slice along the leading axis.
    pub fn index0(&self, i: usize) -> Tensor<T> {
        let inner: usize = self.shape[1..].iter().product();
        Tensor { shape: self.shape[1..].to_vec(), data: self.data[i * inner..(i + 1) * inner].to_vec() }
    }
}

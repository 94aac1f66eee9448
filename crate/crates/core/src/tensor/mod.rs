//! Dense row-major tensors and a small reverse-mode autodiff tape.
//!
//! Everything is generic over [`Scalar`] so that training runs in `f32`
//! while gradient checks can run the same code paths in `f64`.

mod kernels;
mod tape;

pub use kernels::{conv2d_out_dim, Pool};
pub use tape::{GradStore, Tape, Var};

use num_traits::Float;

/// Element type of tensors: `f32` for training/eval, `f64` for checks.
pub trait Scalar:
    Float + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static
{
    /// Dtype tag used in checkpoint headers.
    const DTYPE: &'static str;
    /// Size of one element in bytes.
    const BYTES: usize;
    /// Mantissa bits including the implicit leading one.
    const MANTISSA_BITS: u32;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// C := alpha * A * B + beta * C for row-major strided matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;
    const MANTISSA_BITS: u32 = 24;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;
    const MANTISSA_BITS: u32 = 53;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(b)
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tens<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tens<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    /// Single element of a rank-0/rank-1 tensor holding one value.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor with {} elements", self.numel());
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    pub fn scale_assign(&mut self, c: T) {
        for a in self.data.iter_mut() {
            *a = *a * c;
        }
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum of squares, accumulated in f64.
    pub fn sq_sum_f64(&self) -> f64 {
        self.data.iter().map(|v| {
            let x = v.to_f64();
            x * x
        }).sum()
    }

    /// Row-major 2-D matrix product: (m,k) x (k,n) -> (m,n).
    pub fn matmul(a: &Self, b: &Self) -> Self {
        assert_eq!(a.shape.len(), 2);
        assert_eq!(b.shape.len(), 2);
        let (m, ka) = (a.shape[0], a.shape[1]);
        let (kb, n) = (b.shape[0], b.shape[1]);
        assert_eq!(ka, kb, "matmul inner dim mismatch: {:?} x {:?}", a.shape, b.shape);
        let mut c = Tens::zeros(&[m, n]);
        if m == 0 || n == 0 || ka == 0 {
            return c;
        }
        unsafe {
            T::gemm(
                m, ka, n,
                T::one(),
                a.data.as_ptr(), ka as isize, 1,
                b.data.as_ptr(), n as isize, 1,
                T::zero(),
                c.data.as_mut_ptr(), n as isize, 1,
            );
        }
        c
    }

    /// (m,k) x (n,k)^T -> (m,n). Used for `x . w^T` linear layers.
    pub fn matmul_nt(a: &Self, b: &Self) -> Self {
        assert_eq!(a.shape.len(), 2);
        assert_eq!(b.shape.len(), 2);
        let (m, ka) = (a.shape[0], a.shape[1]);
        let (n, kb) = (b.shape[0], b.shape[1]);
        assert_eq!(ka, kb, "matmul_nt inner dim mismatch: {:?} x {:?}", a.shape, b.shape);
        let mut c = Tens::zeros(&[m, n]);
        if m == 0 || n == 0 || ka == 0 {
            return c;
        }
        unsafe {
            T::gemm(
                m, ka, n,
                T::one(),
                a.data.as_ptr(), ka as isize, 1,
                b.data.as_ptr(), 1, kb as isize,
                T::zero(),
                c.data.as_mut_ptr(), n as isize, 1,
            );
        }
        c
    }

    /// (k,m)^T x (k,n) -> (m,n). Used for weight gradients.
    pub fn matmul_tn(a: &Self, b: &Self) -> Self {
        assert_eq!(a.shape.len(), 2);
        assert_eq!(b.shape.len(), 2);
        let (ka, m) = (a.shape[0], a.shape[1]);
        let (kb, n) = (b.shape[0], b.shape[1]);
        assert_eq!(ka, kb, "matmul_tn inner dim mismatch: {:?} x {:?}", a.shape, b.shape);
        let mut c = Tens::zeros(&[m, n]);
        if m == 0 || n == 0 || ka == 0 {
            return c;
        }
        unsafe {
            T::gemm(
                m, ka, n,
                T::one(),
                a.data.as_ptr(), 1, m as isize,
                b.data.as_ptr(), n as isize, 1,
                T::zero(),
                c.data.as_mut_ptr(), n as isize, 1,
            );
        }
        c
    }
}

/// Uniform values in [lo, hi) from the given rng; deterministic per seed.
pub fn rand_uniform<T: Scalar, R: rand::Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tens<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(lo + (hi - lo) * rng.gen::<f64>()))
        .collect();
    Tens::new(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tens::new(vec![2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tens::new(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = Tens::matmul(&a, &b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_transposed_variants_agree() {
        let a = Tens::new(vec![2, 3], vec![1.0f32, -2.0, 3.0, 0.5, 5.0, -6.0]);
        let bt = Tens::new(vec![4, 3], (0..12).map(|i| i as f32 * 0.3 - 1.0).collect());
        let c1 = Tens::matmul_nt(&a, &bt);
        // build explicit transpose and compare
        let mut b = Tens::zeros(&[3, 4]);
        for i in 0..4 {
            for j in 0..3 {
                b.data_mut()[j * 4 + i] = bt.data()[i * 3 + j];
            }
        }
        let c2 = Tens::matmul(&a, &b);
        for (x, y) in c1.data().iter().zip(c2.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn le_roundtrip() {
        let mut buf = Vec::new();
        1.5f32.write_le(&mut buf);
        (-0.25f32).write_le(&mut buf);
        assert_eq!(f32::read_le(&buf[0..4]), 1.5);
        assert_eq!(f32::read_le(&buf[4..8]), -0.25);
    }
}

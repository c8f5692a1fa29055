use alloc::vec;
use alloc::vec::Vec;

/// Dense row-major tensor of 64-bit floats with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "value count must equal the product of extents"
        );
        Self { shape: shape.to_vec(), values, grad: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape, vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::new(shape, vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(&[1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) {
        assert_eq!(grad.len(), self.values.len(), "gradient must share the tensor's shape");
        self.grad = Some(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.values.len());
        self.shape = shape.to_vec();
        self
    }
}

// Row-major kernels, all accumulating into `c`.

/// `C (m x n) += A (m x k) * B (k x n)`.
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(a, (k, 1), b, (n, 1), c, m, k, n);
}

/// `C (m x n) += A (m x k) * B^T` where `B` is `n x k`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(a, (k, 1), b, (1, k), c, m, k, n);
}

/// `C (m x n) += A^T * B` where `A` is `k x m` and `B` is `k x n`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(a, (1, m), b, (n, 1), c, m, k, n);
}

fn gemm(a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_view(m, k, n, 1.0, View { data: a, offset: 0, strides: sa }, View { data: b, offset: 0, strides: sb }, c, 0, (n, 1));
}

/// Strided read-only window into a row-major buffer.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    /// Row and column stride.
    pub strides: (usize, usize),
}

fn last_index(offset: usize, rows: usize, cols: usize, (rs, cs): (usize, usize)) -> usize {
    offset + (rows - 1) * rs + (cols - 1) * cs
}

/// `C += alpha * A (m x k) * B (k x n)` over strided views; `C` starts at
/// `c_offset` with strides `cs`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_view(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: View<'_>,
    b: View<'_>,
    c: &mut [f64],
    c_offset: usize,
    cs: (usize, usize),
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(last_index(a.offset, m, k, a.strides) < a.data.len());
    assert!(last_index(b.offset, k, n, b.strides) < b.data.len());
    assert!(last_index(c_offset, m, n, cs) < c.len());
    // SAFETY: the assertions bound every index the strides can reach
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.strides.0 as isize,
            a.strides.1 as isize,
            b.data.as_ptr().add(b.offset),
            b.strides.0 as isize,
            b.strides.1 as isize,
            1.0,
            c.as_mut_ptr().add(c_offset),
            cs.0 as isize,
            cs.1 as isize,
        );
    }
}

//! Dense row-major f64 buffers and the small set of kernels the models need.
//!
//! Weight matrices are stored `[inputs, outputs]` so the forward pass is a
//! plain `X[T,in] @ W[in,out]` with contiguous inner loops; the backward
//! kernels are arranged so every inner loop also runs over contiguous
//! memory. Accumulation order is fixed, which keeps results bit-identical
//! across runs.

/// Shape + contiguous values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBuffer {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TensorBuffer {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        TensorBuffer { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/value count mismatch");
        TensorBuffer { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `i` of a 2-d buffer.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.shape[self.shape.len() - 1];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dot product with four fixed accumulators; vectorizes without changing
/// the summation order between runs.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    let mut i = 0;
    while i + 4 <= n {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut tail = 0.0;
    while i < n {
        tail += a[i] * b[i];
        i += 1;
    }
    (s0 + s1) + (s2 + s3) + tail
}

/// y += c * x
#[inline]
pub fn axpy(y: &mut [f64], c: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += c * xi;
    }
}

/// C[M,N] += A[M,K] @ B[K,N]
pub fn matmul_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            axpy(crow, av, &b[p * n..(p + 1) * n]);
        }
    }
}

/// dW[K,N] += A^T[K,M] @ dY[M,N] given A[M,K] (input-gradient of a linear
/// layer's weight, accumulated over the M rows).
pub fn matmul_at_acc(dw: &mut [f64], a: &[f64], dy: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(dy.len(), m * n);
    debug_assert_eq!(dw.len(), k * n);
    for t in 0..m {
        let arow = &a[t * k..(t + 1) * k];
        let dyrow = &dy[t * n..(t + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            axpy(&mut dw[i * n..(i + 1) * n], av, dyrow);
        }
    }
}

/// dX[M,K] += dY[M,N] @ W^T[N,K] given W[K,N].
pub fn matmul_bt_acc(dx: &mut [f64], dy: &[f64], w: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(dy.len(), m * n);
    debug_assert_eq!(w.len(), k * n);
    debug_assert_eq!(dx.len(), m * k);
    for t in 0..m {
        let dyrow = &dy[t * n..(t + 1) * n];
        let dxrow = &mut dx[t * k..(t + 1) * k];
        for i in 0..k {
            dxrow[i] += dot(dyrow, &w[i * n..(i + 1) * n]);
        }
    }
}

/// Numerically stable in-place softmax over `x`.
pub fn softmax_inplace(x: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Tanh-approximated GELU; smooth everywhere, which keeps finite-difference
/// gradient checks clean.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Binary cross-entropy with logits, numerically stable.
#[inline]
pub fn bce_with_logits(logit: f64, label: f64) -> f64 {
    logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p()
}

/// d/dlogit of [`bce_with_logits`]: sigmoid(logit) - label.
#[inline]
pub fn bce_grad(logit: f64, label: f64) -> f64 {
    sigmoid(logit) - label
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

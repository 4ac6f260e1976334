//! Dense row-major f32 tensors and the few BLAS-like kernels the pipeline
//! needs. Parallelism only ever splits work across disjoint output rows and
//! each output element is accumulated in a fixed sequential order, so results
//! are bitwise identical for any thread count.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::rng::Rng;

static THREADS: AtomicUsize = AtomicUsize::new(0);

/// Number of worker threads for the row-parallel kernels.
pub fn threads() -> usize {
    let t = THREADS.load(Ordering::Relaxed);
    if t != 0 {
        return t;
    }
    if cfg!(target_arch = "wasm32") {
        return 1;
    }
    let n = std::thread::available_parallelism().map(|v| v.get()).unwrap_or(1);
    n.min(8)
}

/// 0 restores auto-detection.
pub fn set_threads(n: usize) {
    THREADS.store(n, Ordering::Relaxed);
}

/// Run `f(start, end)` over disjoint chunks of `0..n`, possibly on multiple
/// threads. Chunk boundaries do not affect any output value.
pub fn parallel_ranges<F>(n: usize, f: F)
where
    F: Fn(usize, usize) + Sync,
{
    let t = threads().min(n.max(1));
    if t <= 1 || n < 2 {
        f(0, n);
        return;
    }
    let per = n.div_ceil(t);
    std::thread::scope(|scope| {
        let f = &f;
        let mut start = 0;
        while start < n {
            let end = (start + per).min(n);
            scope.spawn(move || f(start, end));
            start = end;
        }
    });
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::contract(format!(
                "tensor shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.data.len(), "reshape {:?} -> {:?}", self.shape, shape);
        self.shape = shape.to_vec();
        self
    }

    pub fn fill_normal(&mut self, rng: &mut Rng) {
        rng.fill_normal_f32(&mut self.data);
    }

    pub fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
        let mut t = Tensor::zeros(shape);
        t.fill_normal(rng);
        t
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Sequential f64 sum; used for every loss/statistic reduction.
pub fn sum_f64(xs: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for &x in xs {
        acc += x as f64;
    }
    acc
}

pub fn add_assign(out: &mut [f32], other: &[f32]) {
    debug_assert_eq!(out.len(), other.len());
    for (o, &x) in out.iter_mut().zip(other.iter()) {
        *o += x;
    }
}

pub fn axpy(out: &mut [f32], alpha: f32, x: &[f32]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o += alpha * v;
    }
}

/// out[m,n] = a[m,k] * b[k,n]
///
/// Row-blocked so each pass over b updates four output rows; the per-element
/// accumulation order over k is unchanged, so results are bitwise identical
/// to the naive axpy loop for any thread count or block shape.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let t = threads().min(m.max(1));
    let rows_per = (m.div_ceil(t.max(1)).max(1)).div_ceil(4) * 4;
    std::thread::scope(|scope| {
        for (ci, chunk) in out.chunks_mut(rows_per * n).enumerate() {
            let row0 = ci * rows_per;
            scope.spawn(move || {
                chunk.fill(0.0);
                let rows = chunk.len() / n;
                let mut r = 0;
                while r + 4 <= rows {
                    let i = row0 + r;
                    let (o0, rest) = chunk[r * n..].split_at_mut(n);
                    let (o1, rest) = rest.split_at_mut(n);
                    let (o2, rest) = rest.split_at_mut(n);
                    let o3 = &mut rest[..n];
                    for kk in 0..k {
                        let a0 = a[i * k + kk];
                        let a1 = a[(i + 1) * k + kk];
                        let a2 = a[(i + 2) * k + kk];
                        let a3 = a[(i + 3) * k + kk];
                        let brow = &b[kk * n..(kk + 1) * n];
                        if a0 == 0.0 && a1 == 0.0 && a2 == 0.0 && a3 == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            let bv = brow[j];
                            o0[j] += a0 * bv;
                            o1[j] += a1 * bv;
                            o2[j] += a2 * bv;
                            o3[j] += a3 * bv;
                        }
                    }
                    r += 4;
                }
                while r < rows {
                    let i = row0 + r;
                    let orow = &mut chunk[r * n..(r + 1) * n];
                    for kk in 0..k {
                        let av = a[i * k + kk];
                        // zero rows are common (LoRA B starts at 0)
                        if av != 0.0 {
                            axpy(orow, av, &b[kk * n..(kk + 1) * n]);
                        }
                    }
                    r += 1;
                }
            });
        }
    });
}

/// out[m,n] = a[m,k] * b[n,k]^T (b is transposed once, then the nn loop runs)
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let mut bt = vec![0.0f32; k * n];
    for j in 0..n {
        for kk in 0..k {
            bt[kk * n + j] = b[j * k + kk];
        }
    }
    gemm_nn(m, k, n, a, &bt, out);
}

/// out[m,n] = a[k,m]^T * b[k,n]
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], out: &mut [f32]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let t = threads().min(m.max(1));
    let rows_per = m.div_ceil(t.max(1)).max(1);
    std::thread::scope(|scope| {
        for (ci, chunk) in out.chunks_mut(rows_per * n).enumerate() {
            let row0 = ci * rows_per;
            scope.spawn(move || {
                for (ri, orow) in chunk.chunks_exact_mut(n).enumerate() {
                    let i = row0 + ri;
                    orow.fill(0.0);
                    for kk in 0..k {
                        let av = a[kk * m + i];
                        if av != 0.0 {
                            axpy(orow, av, &b[kk * n..(kk + 1) * n]);
                        }
                    }
                }
            });
        }
    });
}

/// Fixed-order vectorizable dot product (4 independent lanes).
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f64;
                for kk in 0..k {
                    s += a[i * k + kk] as f64 * b[kk * n + j] as f64;
                }
                out[i * n + j] = s as f32;
            }
        }
        out
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let mut rng = Rng::new(42);
        for &(m, k, n) in &[(1usize, 1usize, 1usize), (3, 5, 4), (17, 9, 23), (32, 64, 16)] {
            let a = Tensor::randn(&[m, k], &mut rng);
            let b = Tensor::randn(&[k, n], &mut rng);
            let want = naive_nn(m, k, n, a.data(), b.data());

            let mut got = vec![0.0f32; m * n];
            gemm_nn(m, k, n, a.data(), b.data(), &mut got);
            for (g, w) in got.iter().zip(want.iter()) {
                assert!((g - w).abs() < 1e-4, "nn {g} vs {w}");
            }

            // b transposed layout
            let mut bt = vec![0.0f32; k * n];
            for kk in 0..k {
                for j in 0..n {
                    bt[j * k + kk] = b.data()[kk * n + j];
                }
            }
            let mut got_nt = vec![0.0f32; m * n];
            gemm_nt(m, k, n, a.data(), &bt, &mut got_nt);
            for (g, w) in got_nt.iter().zip(want.iter()) {
                assert!((g - w).abs() < 1e-4, "nt {g} vs {w}");
            }

            // a transposed layout
            let mut at = vec![0.0f32; k * m];
            for i in 0..m {
                for kk in 0..k {
                    at[kk * m + i] = a.data()[i * k + kk];
                }
            }
            let mut got_tn = vec![0.0f32; m * n];
            gemm_tn(m, k, n, &at, b.data(), &mut got_tn);
            for (g, w) in got_tn.iter().zip(want.iter()) {
                assert!((g - w).abs() < 1e-4, "tn {g} vs {w}");
            }
        }
    }

    #[test]
    fn gemm_bitwise_invariant_to_thread_count() {
        let mut rng = Rng::new(9);
        let a = Tensor::randn(&[37, 29], &mut rng);
        let b = Tensor::randn(&[29, 41], &mut rng);
        let mut one = vec![0.0f32; 37 * 41];
        let mut many = vec![0.0f32; 37 * 41];
        set_threads(1);
        gemm_nn(37, 29, 41, a.data(), b.data(), &mut one);
        set_threads(4);
        gemm_nn(37, 29, 41, a.data(), b.data(), &mut many);
        set_threads(0); // back to auto
        assert_eq!(one, many);
    }

    #[test]
    fn from_vec_checks_count() {
        assert!(Tensor::from_vec(&[2, 2], vec![0.0; 3]).is_err());
    }
}

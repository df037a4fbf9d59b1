//! Row-partitioned compute kernels with a data-parallel and a sequential path.
//!
//! Every kernel splits work by output rows and never reduces across
//! partitions, so both paths produce bitwise-identical results for any
//! worker count.

use std::sync::atomic::{AtomicU8, Ordering};

use super::scalar::Scalar;

/// Execution strategy for kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

const SEQ: u8 = 0;
const PAR: u8 = 1;

static MODE: AtomicU8 = AtomicU8::new(if cfg!(feature = "parallel") { PAR } else { SEQ });

impl Exec {
    /// Process-wide strategy used by tape operations.
    pub fn current() -> Exec {
        match MODE.load(Ordering::Relaxed) {
            #[cfg(feature = "parallel")]
            PAR => Exec::Parallel,
            _ => Exec::Sequential,
        }
    }

    pub fn set_current(exec: Exec) {
        let code = match exec {
            Exec::Sequential => SEQ,
            #[cfg(feature = "parallel")]
            Exec::Parallel => PAR,
        };
        MODE.store(code, Ordering::Relaxed);
    }
}

/// Minimum rows handed to one parallel task.
const MIN_ROWS: usize = 16;

/// Applies `f(row_index, row)` to every `row_len`-sized row of `data`.
pub fn rows_mut<T, F>(exec: Exec, data: &mut [T], row_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    match exec {
        Exec::Sequential => data
            .chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row)),
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            data.par_chunks_mut(row_len)
                .with_min_len(MIN_ROWS)
                .enumerate()
                .for_each(|(i, row)| f(i, row))
        }
    }
}

/// Applies `f(index, value)` to every element.
pub fn elems_mut<T, F>(exec: Exec, data: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    match exec {
        Exec::Sequential => data.iter_mut().enumerate().for_each(|(i, v)| f(i, v)),
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            data.par_iter_mut()
                .with_min_len(4096)
                .enumerate()
                .for_each(|(i, v)| f(i, v))
        }
    }
}

/// Matrix operand: a row-major buffer optionally read as its transpose.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    /// Rows of the stored (untransposed) matrix.
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    /// Logical (rows, cols) after the optional transpose.
    pub fn dims(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    /// Logical (row stride, column stride).
    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

struct SendPtr<T>(*mut T);
unsafe impl<T> Send for SendPtr<T> {}
unsafe impl<T> Sync for SendPtr<T> {}

/// `out (m×n) = a (m×k) · b (k×n)`, or `out += a·b` when `accumulate`.
pub fn matmul_into<T: Scalar>(
    exec: Exec,
    out: &mut [T],
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    accumulate: bool,
) {
    let (m, k) = a.dims();
    let (kb, n) = b.dims();
    assert_eq!(k, kb, "inner dimensions");
    assert_eq!(out.len(), m * n, "output size");
    assert_eq!(a.data.len(), m * k);
    assert_eq!(b.data.len(), k * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::ONE } else { T::ZERO };
    if k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|v| *v = T::ZERO);
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let block = |r0: usize, r1: usize, c: *mut T| unsafe {
        T::gemm(
            r1 - r0,
            k,
            n,
            T::ONE,
            a.data.as_ptr().offset(r0 as isize * rsa),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c,
            n as isize,
            1,
        )
    };
    match exec {
        Exec::Sequential => block(0, m, out.as_mut_ptr()),
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            let threads = rayon::current_num_threads();
            if threads <= 1 || m < 2 * 64 {
                block(0, m, out.as_mut_ptr());
                return;
            }
            let chunk = m.div_ceil(threads * 2).max(64);
            let base = SendPtr(out.as_mut_ptr());
            let base = &base;
            (0..m.div_ceil(chunk)).into_par_iter().for_each(|ci| {
                let r0 = ci * chunk;
                let r1 = (r0 + chunk).min(m);
                // Disjoint row ranges of `out`.
                block(r0, r1, unsafe { base.0.add(r0 * n) });
            });
        }
    }
}

/// Runs `f(i)` for `i in 0..count` and collects results in index order.
pub fn map_indexed<R, F>(exec: Exec, count: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match exec {
        Exec::Sequential => (0..count).map(f).collect(),
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            (0..count).into_par_iter().map(f).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        out
    }

    #[test]
    fn matmul_matches_naive_with_transposes() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let expect = naive(&a, &b, m, k, n);

        let mut out = vec![0.0; m * n];
        matmul_into(
            Exec::Sequential,
            &mut out,
            MatRef::new(&a, m, k),
            MatRef::new(&b, k, n),
            false,
        );
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }

        // Stored transposes read back through the `t()` view.
        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut out2 = vec![0.0; m * n];
        matmul_into(
            Exec::Sequential,
            &mut out2,
            MatRef::new(&at, k, m).t(),
            MatRef::new(&bt, n, k).t(),
            false,
        );
        for (x, y) in out2.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }

        matmul_into(
            Exec::Sequential,
            &mut out2,
            MatRef::new(&a, m, k),
            MatRef::new(&b, k, n),
            true,
        );
        for (x, y) in out2.iter().zip(&expect) {
            assert!((x - 2.0 * y).abs() < 1e-12);
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_and_sequential_are_bitwise_equal() {
        let (m, k, n) = (300, 33, 17);
        let a: Vec<f32> = (0..m * k)
            .map(|i| ((i * 7919) % 1000) as f32 / 997.0 - 0.5)
            .collect();
        let b: Vec<f32> = (0..k * n)
            .map(|i| ((i * 104729) % 1000) as f32 / 991.0 - 0.5)
            .collect();
        let mut s = vec![0f32; m * n];
        let mut p = vec![0f32; m * n];
        matmul_into(
            Exec::Sequential,
            &mut s,
            MatRef::new(&a, m, k),
            MatRef::new(&b, k, n),
            false,
        );
        matmul_into(
            Exec::Parallel,
            &mut p,
            MatRef::new(&a, m, k),
            MatRef::new(&b, k, n),
            false,
        );
        assert_eq!(s, p);
    }
}

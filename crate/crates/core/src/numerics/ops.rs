//! Forward primitives and their backward rules.
//!
//! Shape checks name the primitive and the offending shapes. A thread-local
//! multiply counter tracks multiplications performed inside `matmul`
//! (forward only); the profiler's instrumented-MACs oracle reads it.

use std::cell::Cell;

use super::tape::accumulate;
use super::{BackwardFn, NumericsError, Result, Tensor};

thread_local! {
    static MUL_COUNT: Cell<u64> = const { Cell::new(0) };
}

/// Multiplications executed by forward `matmul` calls on this thread since
/// the last reset. This is the MAC convention used by the profiler: dense
/// matrix products only, biases and elementwise work excluded.
pub fn mul_counter() -> u64 {
    MUL_COUNT.with(|c| c.get())
}

pub fn reset_mul_counter() {
    MUL_COUNT.with(|c| c.set(0));
}

fn count_muls(n: u64) {
    MUL_COUNT.with(|c| c.set(c.get() + n));
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumericsError::NumericFault { op })
    }
}

fn shape_err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::ShapeMismatch { op, detail }
}

/// Build a result node. Parent links and the backward rule are only kept
/// when some input needs gradients.
fn node(
    op: &'static str,
    shape: Vec<usize>,
    data: Vec<f64>,
    parents: Vec<Tensor>,
    backward_fn: impl Fn(&[f64], &[Tensor]) + 'static,
) -> Result<Tensor> {
    check_finite(op, &data)?;
    let requires = parents.iter().any(|p| p.requires_grad());
    if requires {
        Ok(Tensor::make(
            shape,
            data,
            true,
            false,
            parents,
            Some(Box::new(backward_fn) as BackwardFn),
        ))
    } else {
        Ok(Tensor::make(shape, data, false, true, vec![], None))
    }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(shape_err(op, format!("expected 2-D tensor, got {s:?}"))),
    }
}

impl Tensor {
    /// Matrix product. `[m,k] x [k,n] -> [m,n]`, or `[m,k] x [k] -> [m]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2(self, "matmul")?;
        let (kr, n, vec_rhs) = match rhs.shape() {
            [a, b] => (*a, *b, false),
            [a] => (*a, 1usize, true),
            s => return Err(shape_err("matmul", format!("bad rhs shape {s:?}"))),
        };
        if k != kr {
            return Err(shape_err(
                "matmul",
                format!("inner dims differ: {:?} x {:?}", self.shape(), rhs.shape()),
            ));
        }
        let a = self.data();
        let b = rhs.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        count_muls((m * k * n) as u64);
        drop(a);
        drop(b);
        let out_shape = if vec_rhs { vec![m] } else { vec![m, n] };
        node(
            "matmul",
            out_shape,
            out,
            vec![self.clone(), rhs.clone()],
            move |g, parents| {
                let (a, b) = (&parents[0], &parents[1]);
                if a.requires_grad() {
                    // dA = G . B^T
                    let bd = b.data();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bd[p * n + j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    drop(bd);
                    accumulate(a, &da);
                }
                if b.requires_grad() {
                    // dB = A^T . G
                    let ad = a.data();
                    let mut db = vec![0.0; k * n];
                    for p in 0..k {
                        for i in 0..m {
                            let av = ad[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                    drop(ad);
                    accumulate(b, &db);
                }
            },
        )
    }

    fn binary_broadcast(
        &self,
        rhs: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        dl: impl Fn(f64, f64, f64) -> f64 + 'static, // (a, b, g) -> dL/da
        dr: impl Fn(f64, f64, f64) -> f64 + 'static, // (a, b, g) -> dL/db
    ) -> Result<Tensor> {
        let broadcast = self.shape().len() == 2
            && rhs.shape().len() == 1
            && self.shape()[1] == rhs.shape()[0];
        if !broadcast && self.shape() != rhs.shape() {
            return Err(shape_err(
                op,
                format!("shapes {:?} and {:?}", self.shape(), rhs.shape()),
            ));
        }
        let a = self.data();
        let b = rhs.data();
        let cols = if broadcast { rhs.shape()[0] } else { a.len() };
        let out: Vec<f64> = a
            .iter()
            .enumerate()
            .map(|(i, &av)| f(av, b[if broadcast { i % cols } else { i }]))
            .collect();
        drop(a);
        drop(b);
        node(
            op,
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            move |g, parents| {
                let (a, b) = (&parents[0], &parents[1]);
                let ad = a.to_vec();
                let bd = b.to_vec();
                let bval = |i: usize| bd[if broadcast { i % cols } else { i }];
                if a.requires_grad() {
                    let da: Vec<f64> = (0..ad.len()).map(|i| dl(ad[i], bval(i), g[i])).collect();
                    accumulate(a, &da);
                }
                if b.requires_grad() {
                    let mut db = vec![0.0; bd.len()];
                    for i in 0..ad.len() {
                        let j = if broadcast { i % cols } else { i };
                        db[j] += dr(ad[i], bd[j], g[i]);
                    }
                    accumulate(b, &db);
                }
            },
        )
    }

    /// Elementwise addition; a 1-D rhs broadcasts over the rows of a 2-D lhs.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_broadcast(rhs, "add", |a, b| a + b, |_, _, g| g, |_, _, g| g)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_broadcast(rhs, "sub", |a, b| a - b, |_, _, g| g, |_, _, g| -g)
    }

    /// Elementwise product (Hadamard); same broadcast rule as `add`.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_broadcast(
            rhs,
            "mul",
            |a, b| a * b,
            |_, b, g| g * b,
            |a, _, g| g * a,
        )
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_broadcast(
            rhs,
            "div",
            |a, b| a / b,
            |_, b, g| g / b,
            |a, b, g| -g * a / (b * b),
        )
    }

    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        // (input, output, upstream) -> downstream
        df: impl Fn(f64, f64, f64) -> f64 + 'static,
    ) -> Result<Tensor> {
        let out: Vec<f64> = self.data().iter().map(|&v| f(v)).collect();
        node(
            op,
            self.shape().to_vec(),
            out.clone(),
            vec![self.clone()],
            move |g, parents| {
                let x = parents[0].to_vec();
                let da: Vec<f64> = (0..x.len()).map(|i| df(x[i], out[i], g[i])).collect();
                accumulate(&parents[0], &da);
            },
        )
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary("sigmoid", |v| 1.0 / (1.0 + (-v).exp()), |_, y, g| g * y * (1.0 - y))
    }

    pub fn tanh_t(&self) -> Result<Tensor> {
        self.unary("tanh", f64::tanh, |_, y, g| g * (1.0 - y * y))
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary("relu", |v| v.max(0.0), |x, _, g| if x > 0.0 { g } else { 0.0 })
    }

    pub fn square(&self) -> Result<Tensor> {
        self.unary("square", |v| v * v, |x, _, g| 2.0 * x * g)
    }

    pub fn sqrt_t(&self) -> Result<Tensor> {
        self.unary("sqrt", f64::sqrt, |_, y, g| g * 0.5 / y)
    }

    pub fn ln(&self) -> Result<Tensor> {
        self.unary("ln", f64::ln, |x, _, g| g / x)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.unary("neg", |v| -v, |_, _, g| -g)
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        self.unary("scale", move |v| v * s, move |_, _, g| g * s)
    }

    pub fn add_scalar(&self, s: f64) -> Result<Tensor> {
        self.unary("add_scalar", move |v| v + s, |_, _, g| g)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let s: f64 = self.data().iter().sum();
        node(
            "sum",
            vec![1],
            vec![s],
            vec![self.clone()],
            |g, parents| {
                let da = vec![g[0]; parents[0].numel()];
                accumulate(&parents[0], &da);
            },
        )
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(shape_err("mean", "empty tensor".into()));
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), shape),
            ));
        }
        node(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            |g, parents| accumulate(&parents[0], g),
        )
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        let (m, n) = dims2(self, "transpose2d")?;
        let a = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
        drop(a);
        node(
            "transpose2d",
            vec![n, m],
            out,
            vec![self.clone()],
            move |g, parents| {
                let mut da = vec![0.0; m * n];
                for j in 0..n {
                    for i in 0..m {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                accumulate(&parents[0], &da);
            },
        )
    }

    /// Contiguous range of a 1-D tensor.
    pub fn slice(&self, start: usize, end: usize) -> Result<Tensor> {
        if self.shape().len() != 1 {
            return Err(shape_err("slice", format!("expected 1-D, got {:?}", self.shape())));
        }
        let len = self.shape()[0];
        if start > end || end > len {
            return Err(NumericsError::OutOfBounds {
                op: "slice",
                detail: format!("{start}..{end} of length {len}"),
            });
        }
        node(
            "slice",
            vec![end - start],
            self.data()[start..end].to_vec(),
            vec![self.clone()],
            move |g, parents| {
                let mut da = vec![0.0; len];
                da[start..end].copy_from_slice(g);
                accumulate(&parents[0], &da);
            },
        )
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let (m, n) = dims2(self, "slice_rows")?;
        if start > end || end > m {
            return Err(NumericsError::OutOfBounds {
                op: "slice_rows",
                detail: format!("rows {start}..{end} of {m}"),
            });
        }
        node(
            "slice_rows",
            vec![end - start, n],
            self.data()[start * n..end * n].to_vec(),
            vec![self.clone()],
            move |g, parents| {
                let mut da = vec![0.0; m * n];
                da[start * n..end * n].copy_from_slice(g);
                accumulate(&parents[0], &da);
            },
        )
    }

    /// Columns `start..end` of a 2-D tensor (copied).
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let (m, n) = dims2(self, "slice_cols")?;
        if start > end || end > n {
            return Err(NumericsError::OutOfBounds {
                op: "slice_cols",
                detail: format!("cols {start}..{end} of {n}"),
            });
        }
        let w = end - start;
        let a = self.data();
        let mut out = vec![0.0; m * w];
        for i in 0..m {
            out[i * w..(i + 1) * w].copy_from_slice(&a[i * n + start..i * n + end]);
        }
        drop(a);
        node(
            "slice_cols",
            vec![m, w],
            out,
            vec![self.clone()],
            move |g, parents| {
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    da[i * n + start..i * n + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                accumulate(&parents[0], &da);
            },
        )
    }

    /// Row `i` of a 2-D tensor as a 1-D tensor.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        let (_, n) = dims2(self, "row")?;
        self.slice_rows(i, i + 1)?.reshape(&[n])
    }

    /// Concatenate along `axis` (0 for 1-D/2-D, 1 for 2-D).
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs".into()));
        }
        let rank = parts[0].shape().len();
        if axis >= rank || parts.iter().any(|p| p.shape().len() != rank) {
            return Err(shape_err(
                "concat",
                format!("axis {axis} over rank-{rank} inputs"),
            ));
        }
        match (rank, axis) {
            (1, 0) => {
                let total: usize = parts.iter().map(|p| p.numel()).sum();
                let mut out = Vec::with_capacity(total);
                let mut bounds = Vec::with_capacity(parts.len());
                for p in parts {
                    let s = out.len();
                    out.extend_from_slice(&p.data());
                    bounds.push((s, out.len()));
                }
                node(
                    "concat",
                    vec![total],
                    out,
                    parts.to_vec(),
                    move |g, parents| {
                        for (p, &(s, e)) in parents.iter().zip(&bounds) {
                            if p.requires_grad() {
                                accumulate(p, &g[s..e]);
                            }
                        }
                    },
                )
            }
            (2, 0) => {
                let n = parts[0].shape()[1];
                if parts.iter().any(|p| p.shape()[1] != n) {
                    return Err(shape_err("concat", "column counts differ".into()));
                }
                let rows: usize = parts.iter().map(|p| p.shape()[0]).sum();
                let mut out = Vec::with_capacity(rows * n);
                let mut bounds = Vec::with_capacity(parts.len());
                for p in parts {
                    let s = out.len();
                    out.extend_from_slice(&p.data());
                    bounds.push((s, out.len()));
                }
                node(
                    "concat",
                    vec![rows, n],
                    out,
                    parts.to_vec(),
                    move |g, parents| {
                        for (p, &(s, e)) in parents.iter().zip(&bounds) {
                            if p.requires_grad() {
                                accumulate(p, &g[s..e]);
                            }
                        }
                    },
                )
            }
            (2, 1) => {
                let m = parts[0].shape()[0];
                if parts.iter().any(|p| p.shape()[0] != m) {
                    return Err(shape_err("concat", "row counts differ".into()));
                }
                let widths: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
                let total: usize = widths.iter().sum();
                let mut out = vec![0.0; m * total];
                let mut off = 0;
                for (p, &w) in parts.iter().zip(&widths) {
                    let d = p.data();
                    for i in 0..m {
                        out[i * total + off..i * total + off + w]
                            .copy_from_slice(&d[i * w..(i + 1) * w]);
                    }
                    off += w;
                }
                node(
                    "concat",
                    vec![m, total],
                    out,
                    parts.to_vec(),
                    move |g, parents| {
                        let mut off = 0;
                        for (p, &w) in parents.iter().zip(&widths) {
                            if p.requires_grad() {
                                let mut dp = vec![0.0; m * w];
                                for i in 0..m {
                                    dp[i * w..(i + 1) * w].copy_from_slice(
                                        &g[i * total + off..i * total + off + w],
                                    );
                                }
                                accumulate(p, &dp);
                            }
                            off += w;
                        }
                    },
                )
            }
            _ => Err(shape_err(
                "concat",
                format!("unsupported rank {rank} / axis {axis}"),
            )),
        }
    }

    /// Stack 1-D tensors of equal length into a 2-D `[rows, n]` tensor.
    pub fn stack_rows(rows: &[Tensor]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(shape_err("stack_rows", "no inputs".into()));
        }
        let n = rows[0].numel();
        if rows.iter().any(|r| r.shape().len() != 1 || r.numel() != n) {
            return Err(shape_err("stack_rows", "rows must be 1-D of equal length".into()));
        }
        let mut out = Vec::with_capacity(rows.len() * n);
        for r in rows {
            out.extend_from_slice(&r.data());
        }
        node(
            "stack_rows",
            vec![rows.len(), n],
            out,
            rows.to_vec(),
            move |g, parents| {
                for (i, p) in parents.iter().enumerate() {
                    if p.requires_grad() {
                        accumulate(p, &g[i * n..(i + 1) * n]);
                    }
                }
            },
        )
    }
}

/// Normalization scope for the fused layer-norm primitive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum NormScope {
    /// One group spanning the whole tensor.
    Global,
    /// One group per row of a 2-D tensor (frame-local, causal-safe).
    Rows,
}

impl Tensor {
    /// Zero-mean unit-variance normalization (population variance, `eps`
    /// inside the square root). Affine gain/bias are applied by the caller
    /// with broadcast `mul`/`add` so their gradients fall out of those ops.
    pub(crate) fn normalize(&self, scope: NormScope, eps: f64) -> Result<Tensor> {
        let (groups, gsize) = match scope {
            NormScope::Global => (1usize, self.numel()),
            NormScope::Rows => {
                let (m, n) = dims2(self, "normalize")?;
                (m, n)
            }
        };
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        let mut inv_sigmas = vec![0.0; groups];
        for gidx in 0..groups {
            let s = gidx * gsize;
            let grp = &x[s..s + gsize];
            let mu = grp.iter().sum::<f64>() / gsize as f64;
            let var = grp.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / gsize as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_sigmas[gidx] = inv;
            for (o, &v) in out[s..s + gsize].iter_mut().zip(grp) {
                *o = (v - mu) * inv;
            }
        }
        drop(x);
        let xhat = out.clone();
        node(
            "layer_norm",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            move |g, parents| {
                // dx = inv_sigma * (g - mean(g) - xhat * mean(g * xhat)) per group
                let mut da = vec![0.0; g.len()];
                for gidx in 0..groups {
                    let s = gidx * gsize;
                    let gg = &g[s..s + gsize];
                    let xh = &xhat[s..s + gsize];
                    let mg = gg.iter().sum::<f64>() / gsize as f64;
                    let mgx = gg.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / gsize as f64;
                    for i in 0..gsize {
                        da[s + i] = inv_sigmas[gidx] * (gg[i] - mg - xh[i] * mgx);
                    }
                }
                accumulate(&parents[0], &da);
            },
        )
    }

    /// Sliding windows of a 1-D signal: frame `t` is
    /// `signal[t*stride .. t*stride+kernel]`, stacked into `[T, kernel]`.
    pub fn frames(&self, kernel: usize, stride: usize) -> Result<Tensor> {
        if self.shape().len() != 1 {
            return Err(shape_err("frames", format!("expected 1-D, got {:?}", self.shape())));
        }
        let len = self.shape()[0];
        if len < kernel {
            return Err(shape_err(
                "frames",
                format!("input shorter than one frame: {len} < kernel {kernel}"),
            ));
        }
        let t = (len - kernel) / stride + 1;
        let x = self.data();
        let mut out = Vec::with_capacity(t * kernel);
        for f in 0..t {
            out.extend_from_slice(&x[f * stride..f * stride + kernel]);
        }
        drop(x);
        node(
            "frames",
            vec![t, kernel],
            out,
            vec![self.clone()],
            move |g, parents| {
                let mut da = vec![0.0; len];
                for f in 0..t {
                    for j in 0..kernel {
                        da[f * stride + j] += g[f * kernel + j];
                    }
                }
                accumulate(&parents[0], &da);
            },
        )
    }

    /// Overlap-add of per-frame kernel contributions: frame `t` of a
    /// `[T, kernel]` tensor lands at sample offset `t*stride`. Output is
    /// trimmed or zero-padded to `out_len`.
    pub fn overlap_add(&self, stride: usize, out_len: usize) -> Result<Tensor> {
        let (t, kernel) = dims2(self, "overlap_add")?;
        let x = self.data();
        let mut out = vec![0.0; out_len];
        for f in 0..t {
            let base = f * stride;
            for j in 0..kernel {
                if base + j < out_len {
                    out[base + j] += x[f * kernel + j];
                }
            }
        }
        drop(x);
        node(
            "overlap_add",
            vec![out_len],
            out,
            vec![self.clone()],
            move |g, parents| {
                let mut da = vec![0.0; t * kernel];
                for f in 0..t {
                    let base = f * stride;
                    for j in 0..kernel {
                        if base + j < out_len {
                            da[f * kernel + j] = g[base + j];
                        }
                    }
                }
                accumulate(&parents[0], &da);
            },
        )
    }
}

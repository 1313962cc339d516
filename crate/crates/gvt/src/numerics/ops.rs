//! Built-in tensor operations.
//!
//! Each op computes its value eagerly and registers a backward closure via
//! [`Tape::push`]. Closures capture parent ids, `requires_grad` flags and
//! saved value `Arc`s — accumulation into parent slots happens in a fixed
//! sequential order so backward passes are bit-reproducible.

use std::sync::Arc;

use super::{BackwardFn, Tape, Tensor};

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Tape {
    /// Like [`Tape::push`] but shares an existing buffer (reshape/detach);
    /// skips the finite scan since the values are already on the tape.
    pub(crate) fn push_arc(
        &self,
        op: &'static str,
        shape: Vec<usize>,
        value: Arc<Vec<f64>>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, value.len(), "op `{op}`: shape/buffer mismatch");
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        let requires_grad = requires_grad && backward.is_some();
        inner.nodes.push(super::Node {
            value: Arc::clone(&value),
            op,
            backward: if requires_grad { backward } else { None },
        });
        Tensor {
            tape: self.clone(),
            id,
            shape,
            requires_grad,
            value,
        }
    }
}

impl Tensor {
    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64 + 'static,
    ) -> Tensor {
        let value: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        let (id, rg) = (self.id, self.requires_grad);
        let saved = self.value();
        let backward: BackwardFn = Box::new(move |g, sink| {
            if rg {
                sink.with(id, |gp| {
                    for i in 0..g.len() {
                        gp[i] += g[i] * df(saved[i]);
                    }
                });
            }
        });
        self.tape
            .push(op, self.shape.clone(), value, rg, Some(backward))
    }

    // ── elementwise binary ───────────────────────────────────────────

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.assert_same_tape(other);
        assert_eq!(self.shape, other.shape, "add: shape mismatch");
        let value = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a + b)
            .collect();
        let (ida, rga) = (self.id, self.requires_grad);
        let (idb, rgb) = (other.id, other.requires_grad);
        let backward: BackwardFn = Box::new(move |g, sink| {
            if rga {
                sink.add(ida, g);
            }
            if rgb {
                sink.add(idb, g);
            }
        });
        self.tape
            .push("add", self.shape.clone(), value, rga || rgb, Some(backward))
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.assert_same_tape(other);
        assert_eq!(self.shape, other.shape, "sub: shape mismatch");
        let value = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a - b)
            .collect();
        let (ida, rga) = (self.id, self.requires_grad);
        let (idb, rgb) = (other.id, other.requires_grad);
        let backward: BackwardFn = Box::new(move |g, sink| {
            if rga {
                sink.add(ida, g);
            }
            if rgb {
                sink.add_scaled(idb, g, -1.0);
            }
        });
        self.tape
            .push("sub", self.shape.clone(), value, rga || rgb, Some(backward))
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.assert_same_tape(other);
        assert_eq!(self.shape, other.shape, "mul: shape mismatch");
        let value = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a * b)
            .collect();
        let (ida, rga) = (self.id, self.requires_grad);
        let (idb, rgb) = (other.id, other.requires_grad);
        let va = self.value();
        let vb = other.value();
        let backward: BackwardFn = Box::new(move |g, sink| {
            if rga {
                sink.with(ida, |gp| {
                    for i in 0..g.len() {
                        gp[i] += g[i] * vb[i];
                    }
                });
            }
            if rgb {
                sink.with(idb, |gp| {
                    for i in 0..g.len() {
                        gp[i] += g[i] * va[i];
                    }
                });
            }
        });
        self.tape
            .push("mul", self.shape.clone(), value, rga || rgb, Some(backward))
    }

    pub fn scale(&self, k: f64) -> Tensor {
        let value = self.data().iter().map(|&x| k * x).collect();
        let (id, rg) = (self.id, self.requires_grad);
        let backward: BackwardFn = Box::new(move |g, sink| {
            if rg {
                sink.add_scaled(id, g, k);
            }
        });
        self.tape
            .push("scale", self.shape.clone(), value, rg, Some(backward))
    }

    pub fn add_scalar(&self, k: f64) -> Tensor {
        let value = self.data().iter().map(|&x| x + k).collect();
        let (id, rg) = (self.id, self.requires_grad);
        let backward: BackwardFn = Box::new(move |g, sink| {
            if rg {
                sink.add(id, g);
            }
        });
        self.tape
            .push("add_scalar", self.shape.clone(), value, rg, Some(backward))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    // ── activations ──────────────────────────────────────────────────

    pub fn exp(&self) -> Tensor {
        let value: Vec<f64> = self.data().iter().map(|&x| x.exp()).collect();
        let (id, rg) = (self.id, self.requires_grad);
        let out = Arc::new(value);
        let saved = Arc::clone(&out);
        let backward: BackwardFn = Box::new(move |g, sink| {
            if rg {
                sink.with(id, |gp| {
                    for i in 0..g.len() {
                        gp[i] += g[i] * saved[i];
                    }
                });
            }
        });
        self.tape.push(
            "exp",
            self.shape.clone(),
            Arc::try_unwrap(out).unwrap_or_else(|a| a.as_ref().clone()),
            rg,
            Some(backward),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary("sigmoid", sigmoid_scalar, |x| {
            let s = sigmoid_scalar(x);
            s * (1.0 - s)
        })
    }

    pub fn tanh(&self) -> Tensor {
        self.unary("tanh", f64::tanh, |x| {
            let t = x.tanh();
            1.0 - t * t
        })
    }

    pub fn relu(&self) -> Tensor {
        self.unary("relu", |x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn gelu(&self) -> Tensor {
        self.unary("gelu", gelu_scalar, gelu_grad_scalar)
    }

    /// `ln(1 + e^x)`, numerically stable.
    pub fn softplus(&self) -> Tensor {
        self.unary("softplus", softplus_scalar, sigmoid_scalar)
    }

    /// Wrap values into `[0, period)`. The gradient is the identity almost
    /// everywhere (the wrap is a shift by a locally constant multiple).
    pub fn wrap_periodic(&self, period: f64) -> Tensor {
        assert!(period > 0.0);
        let value = self.data().iter().map(|&x| x.rem_euclid(period)).collect();
        let (id, rg) = (self.id, self.requires_grad);
        let backward: BackwardFn = Box::new(move |g, sink| {
            if rg {
                sink.add(id, g);
            }
        });
        self.tape
            .push("wrap_periodic", self.shape.clone(), value, rg, Some(backward))
    }

    /// Straight-through threshold: forward emits 1.0 where the input is
    /// strictly greater than 0.5 and 0.0 otherwise; backward passes the
    /// upstream gradient through unchanged.
    pub fn hard_gate(&self) -> Tensor {
        let value = self
            .data()
            .iter()
            .map(|&x| if x > 0.5 { 1.0 } else { 0.0 })
            .collect();
        let (id, rg) = (self.id, self.requires_grad);
        let backward: BackwardFn = Box::new(move |g, sink| {
            if rg {
                sink.add(id, g);
            }
        });
        self.tape
            .push("hard_gate", self.shape.clone(), value, rg, Some(backward))
    }

    /// Stop-gradient: same values, no backward path.
    pub fn detach(&self) -> Tensor {
        self.tape
            .push_arc("detach", self.shape.clone(), self.value(), false, None)
    }

    /// Elementwise non-differentiable map with a straight-through (identity)
    /// backward — quantize-dequantize snapping during compression-mode
    /// training.
    pub fn map_ste(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Tensor {
        let value = self.data().iter().map(|&x| f(x)).collect();
        let (id, rg) = (self.id, self.requires_grad);
        let backward: BackwardFn = Box::new(move |g, sink| {
            if rg {
                sink.add(id, g);
            }
        });
        self.tape
            .push(op, self.shape.clone(), value, rg, Some(backward))
    }

    // ── shape ops ────────────────────────────────────────────────────

    pub fn reshape(&self, new_shape: &[usize]) -> Tensor {
        let numel: usize = new_shape.iter().product();
        assert_eq!(numel, self.numel(), "reshape: element count mismatch");
        let (id, rg) = (self.id, self.requires_grad);
        let backward: BackwardFn = Box::new(move |g, sink| {
            if rg {
                sink.add(id, g);
            }
        });
        self.tape
            .push_arc("reshape", new_shape.to_vec(), self.value(), rg, Some(backward))
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor {
        let nd = self.shape.len();
        assert_eq!(axes.len(), nd, "permute: axes rank mismatch");
        let mut seen = vec![false; nd];
        for &a in axes {
            assert!(a < nd && !seen[a], "permute: invalid axes {axes:?}");
            seen[a] = true;
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let value = permute_buf(self.data(), &self.shape, axes);
        let (id, rg) = (self.id, self.requires_grad);
        let in_shape = self.shape.clone();
        let axes_v = axes.to_vec();
        let backward: BackwardFn = Box::new(move |g, sink| {
            if rg {
                // inverse permutation maps output axes back to input axes
                let mut inv = vec![0usize; axes_v.len()];
                for (i, &a) in axes_v.iter().enumerate() {
                    inv[a] = i;
                }
                let out_shape: Vec<usize> = axes_v.iter().map(|&a| in_shape[a]).collect();
                let gin = permute_buf(g, &out_shape, &inv);
                sink.add(id, &gin);
            }
        });
        self.tape.push("permute", out_shape, value, rg, Some(backward))
    }

    pub fn transpose_last2(&self) -> Tensor {
        let nd = self.shape.len();
        assert!(nd >= 2, "transpose_last2 needs rank >= 2");
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(&axes)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let nd = self.shape.len();
        assert!(axis < nd);
        let dim = self.shape[axis];
        assert!(start + len <= dim, "narrow: [{start}, {}) out of {dim}", start + len);
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out_shape = self.shape.clone();
        out_shape[axis] = len;
        let src = self.data();
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            value.extend_from_slice(&src[base..base + len * inner]);
        }
        let (id, rg) = (self.id, self.requires_grad);
        let backward: BackwardFn = Box::new(move |g, sink| {
            if rg {
                sink.with(id, |gp| {
                    for o in 0..outer {
                        let dst = (o * dim + start) * inner;
                        let srcb = o * len * inner;
                        for i in 0..len * inner {
                            gp[dst + i] += g[srcb + i];
                        }
                    }
                });
            }
        });
        self.tape.push("narrow", out_shape, value, rg, Some(backward))
    }

    /// Gather rows (axis 0) at the given indices. Backward scatter-adds in
    /// index order, so repeated indices accumulate deterministically.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        assert!(!self.shape.is_empty());
        let rows = self.shape[0];
        let rsz: usize = self.shape[1..].iter().product();
        let src = self.data();
        let mut value = Vec::with_capacity(indices.len() * rsz);
        for &ix in indices {
            assert!(ix < rows, "select_rows: index {ix} out of {rows}");
            value.extend_from_slice(&src[ix * rsz..(ix + 1) * rsz]);
        }
        let mut out_shape = self.shape.clone();
        out_shape[0] = indices.len();
        let (id, rg) = (self.id, self.requires_grad);
        let idxs = indices.to_vec();
        let backward: BackwardFn = Box::new(move |g, sink| {
            if rg {
                sink.with(id, |gp| {
                    for (r, &ix) in idxs.iter().enumerate() {
                        for c in 0..rsz {
                            gp[ix * rsz + c] += g[r * rsz + c];
                        }
                    }
                });
            }
        });
        self.tape
            .push("select_rows", out_shape, value, rg, Some(backward))
    }

    /// Duplicate the whole tensor `t` times along a new leading axis.
    pub fn repeat_leading(&self, t: usize) -> Tensor {
        let n = self.numel();
        let src = self.data();
        let mut value = Vec::with_capacity(t * n);
        for _ in 0..t {
            value.extend_from_slice(src);
        }
        let mut out_shape = Vec::with_capacity(self.shape.len() + 1);
        out_shape.push(t);
        out_shape.extend_from_slice(&self.shape);
        let (id, rg) = (self.id, self.requires_grad);
        let backward: BackwardFn = Box::new(move |g, sink| {
            if rg {
                sink.with(id, |gp| {
                    for rep in 0..t {
                        for i in 0..n {
                            gp[i] += g[rep * n + i];
                        }
                    }
                });
            }
        });
        self.tape
            .push("repeat_leading", out_shape, value, rg, Some(backward))
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let (id, rg) = (self.id, self.requires_grad);
        let backward: BackwardFn = Box::new(move |g, sink| {
            if rg {
                let k = g[0];
                sink.with(id, |gp| {
                    for v in gp.iter_mut() {
                        *v += k;
                    }
                });
            }
        });
        self.tape.push("sum_all", vec![1], vec![s], rg, Some(backward))
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize) -> Tensor {
        let nd = self.shape.len();
        assert!(axis < nd);
        let dim = self.shape[axis];
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let src = self.data();
        let mut value = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..dim {
                let base = (o * dim + j) * inner;
                let dst = o * inner;
                for i in 0..inner {
                    value[dst + i] += src[base + i];
                }
            }
        }
        let mut out_shape = self.shape.clone();
        out_shape.remove(axis);
        let (id, rg) = (self.id, self.requires_grad);
        let backward: BackwardFn = Box::new(move |g, sink| {
            if rg {
                sink.with(id, |gp| {
                    for o in 0..outer {
                        for j in 0..dim {
                            let dst = (o * dim + j) * inner;
                            let srcb = o * inner;
                            for i in 0..inner {
                                gp[dst + i] += g[srcb + i];
                            }
                        }
                    }
                });
            }
        });
        self.tape.push("sum_axis", out_shape, value, rg, Some(backward))
    }

    // ── broadcast helpers ────────────────────────────────────────────

    /// `self + bias`, broadcasting `bias` over leading axes. The bias shape
    /// must be a suffix of `self.shape`.
    pub fn add_bias(&self, bias: &Tensor) -> Tensor {
        self.assert_same_tape(bias);
        let bn = bias.numel();
        assert!(
            self.shape.ends_with(bias.shape()) && bn > 0,
            "add_bias: {:?} is not a suffix of {:?}",
            bias.shape(),
            self.shape
        );
        let reps = self.numel() / bn;
        let b = bias.data();
        let mut value = self.to_vec();
        for r in 0..reps {
            for i in 0..bn {
                value[r * bn + i] += b[i];
            }
        }
        let (ida, rga) = (self.id, self.requires_grad);
        let (idb, rgb) = (bias.id, bias.requires_grad);
        let backward: BackwardFn = Box::new(move |g, sink| {
            if rga {
                sink.add(ida, g);
            }
            if rgb {
                sink.with(idb, |gp| {
                    for r in 0..reps {
                        for i in 0..bn {
                            gp[i] += g[r * bn + i];
                        }
                    }
                });
            }
        });
        self.tape
            .push("add_bias", self.shape.clone(), value, rga || rgb, Some(backward))
    }

    /// Scale each trailing-dim row of `self` by the matching entry of `s`
    /// (`s.shape == self.shape[..n-1]`).
    pub fn scale_rows(&self, s: &Tensor) -> Tensor {
        self.assert_same_tape(s);
        let nd = self.shape.len();
        assert!(nd >= 1 && s.shape() == &self.shape[..nd - 1], "scale_rows shapes");
        let d = self.shape[nd - 1];
        let rows = s.numel();
        let a = self.data();
        let sv = s.data();
        let mut value = Vec::with_capacity(rows * d);
        for r in 0..rows {
            for c in 0..d {
                value.push(a[r * d + c] * sv[r]);
            }
        }
        let (ida, rga) = (self.id, self.requires_grad);
        let (ids, rgs) = (s.id, s.requires_grad);
        let va = self.value();
        let vs = s.value();
        let backward: BackwardFn = Box::new(move |g, sink| {
            if rga {
                sink.with(ida, |gp| {
                    for r in 0..rows {
                        for c in 0..d {
                            gp[r * d + c] += g[r * d + c] * vs[r];
                        }
                    }
                });
            }
            if rgs {
                sink.with(ids, |gp| {
                    for r in 0..rows {
                        let mut acc = 0.0;
                        for c in 0..d {
                            acc += g[r * d + c] * va[r * d + c];
                        }
                        gp[r] += acc;
                    }
                });
            }
        });
        self.tape
            .push("scale_rows", self.shape.clone(), value, rga || rgs, Some(backward))
    }

    // ── linear algebra ───────────────────────────────────────────────

    /// `self @ w` over the last axis: `[..., k] x [k, n] -> [..., n]`.
    pub fn matmul(&self, w: &Tensor) -> Tensor {
        self.assert_same_tape(w);
        assert_eq!(w.shape().len(), 2, "matmul: weight must be 2-D");
        let k = w.shape()[0];
        let n = w.shape()[1];
        let nd = self.shape.len();
        assert!(nd >= 1 && self.shape[nd - 1] == k, "matmul: inner dim mismatch");
        let rows = self.numel() / k;
        let x = self.data();
        let wv = w.data();
        let mut value = vec![0.0; rows * n];
        for r in 0..rows {
            for i in 0..k {
                let xv = x[r * k + i];
                if xv == 0.0 {
                    continue;
                }
                let wrow = &wv[i * n..(i + 1) * n];
                let orow = &mut value[r * n..(r + 1) * n];
                for j in 0..n {
                    orow[j] += xv * wrow[j];
                }
            }
        }
        let mut out_shape = self.shape.clone();
        out_shape[nd - 1] = n;
        let (idx, rgx) = (self.id, self.requires_grad);
        let (idw, rgw) = (w.id, w.requires_grad);
        let vx = self.value();
        let vw = w.value();
        let backward: BackwardFn = Box::new(move |g, sink| {
            if rgx {
                sink.with(idx, |gp| {
                    for r in 0..rows {
                        for i in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[r * n + j] * vw[i * n + j];
                            }
                            gp[r * k + i] += acc;
                        }
                    }
                });
            }
            if rgw {
                sink.with(idw, |gp| {
                    for r in 0..rows {
                        for i in 0..k {
                            let xv = vx[r * k + i];
                            if xv == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gp[i * n + j] += xv * g[r * n + j];
                            }
                        }
                    }
                });
            }
        });
        self.tape
            .push("matmul", out_shape, value, rgx || rgw, Some(backward))
    }

    /// Batched matmul: `[B.., m, k] x [B.., k, n] -> [B.., m, n]` with
    /// identical leading dims.
    pub fn bmm(&self, other: &Tensor) -> Tensor {
        self.assert_same_tape(other);
        let nda = self.shape.len();
        let ndb = other.shape.len();
        assert!(nda >= 2 && ndb >= 2 && nda == ndb, "bmm: rank mismatch");
        assert_eq!(&self.shape[..nda - 2], &other.shape[..ndb - 2], "bmm: batch dims");
        let m = self.shape[nda - 2];
        let k = self.shape[nda - 1];
        assert_eq!(other.shape[ndb - 2], k, "bmm: inner dim mismatch");
        let n = other.shape[ndb - 1];
        let batch: usize = self.shape[..nda - 2].iter().product();
        let a = self.data();
        let b = other.data();
        let mut value = vec![0.0; batch * m * n];
        for bt in 0..batch {
            let ab = bt * m * k;
            let bb = bt * k * n;
            let ob = bt * m * n;
            for r in 0..m {
                for i in 0..k {
                    let av = a[ab + r * k + i];
                    if av == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        value[ob + r * n + j] += av * b[bb + i * n + j];
                    }
                }
            }
        }
        let mut out_shape = self.shape.clone();
        out_shape[nda - 1] = n;
        let (ida, rga) = (self.id, self.requires_grad);
        let (idb, rgb) = (other.id, other.requires_grad);
        let va = self.value();
        let vb = other.value();
        let backward: BackwardFn = Box::new(move |g, sink| {
            if rga {
                sink.with(ida, |gp| {
                    for bt in 0..batch {
                        let ab = bt * m * k;
                        let bb = bt * k * n;
                        let ob = bt * m * n;
                        for r in 0..m {
                            for i in 0..k {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += g[ob + r * n + j] * vb[bb + i * n + j];
                                }
                                gp[ab + r * k + i] += acc;
                            }
                        }
                    }
                });
            }
            if rgb {
                sink.with(idb, |gp| {
                    for bt in 0..batch {
                        let ab = bt * m * k;
                        let bb = bt * k * n;
                        let ob = bt * m * n;
                        for i in 0..k {
                            for r in 0..m {
                                let av = va[ab + r * k + i];
                                if av == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    gp[bb + i * n + j] += av * g[ob + r * n + j];
                                }
                            }
                        }
                    }
                });
            }
        });
        self.tape
            .push("bmm", out_shape, value, rga || rgb, Some(backward))
    }

    // ── normalization ────────────────────────────────────────────────

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Tensor {
        let nd = self.shape.len();
        assert!(nd >= 1);
        let d = self.shape[nd - 1];
        let rows = self.numel() / d.max(1);
        let x = self.data();
        let mut value = vec![0.0; self.numel()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for i in 0..d {
                let e = (row[i] - mx).exp();
                value[r * d + i] = e;
                sum += e;
            }
            for i in 0..d {
                value[r * d + i] /= sum;
            }
        }
        let (id, rg) = (self.id, self.requires_grad);
        let out = Arc::new(value);
        let saved = Arc::clone(&out);
        let backward: BackwardFn = Box::new(move |g, sink| {
            if rg {
                sink.with(id, |gp| {
                    for r in 0..rows {
                        let s = &saved[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = s.iter().zip(gr).map(|(si, gi)| si * gi).sum();
                        for i in 0..d {
                            gp[r * d + i] += s[i] * (gr[i] - dot);
                        }
                    }
                });
            }
        });
        self.tape.push(
            "softmax",
            self.shape.clone(),
            Arc::try_unwrap(out).unwrap_or_else(|a| a.as_ref().clone()),
            rg,
            Some(backward),
        )
    }
}

/// Layer normalization over the last axis with learned affine terms.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    x.assert_same_tape(gamma);
    x.assert_same_tape(beta);
    let nd = x.shape().len();
    let d = x.shape()[nd - 1];
    assert_eq!(gamma.shape(), &[d], "layer_norm: gamma shape");
    assert_eq!(beta.shape(), &[d], "layer_norm: beta shape");
    let rows = x.numel() / d;
    let xv = x.data();
    let gv = gamma.data();
    let bv = beta.data();
    let mut xhat = vec![0.0; x.numel()];
    let mut invstd = vec![0.0; rows];
    let mut value = vec![0.0; x.numel()];
    for r in 0..rows {
        let row = &xv[r * d..(r + 1) * d];
        let mean: f64 = row.iter().sum::<f64>() / d as f64;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        invstd[r] = inv;
        for i in 0..d {
            let xh = (row[i] - mean) * inv;
            xhat[r * d + i] = xh;
            value[r * d + i] = gv[i] * xh + bv[i];
        }
    }
    let (idx, rgx) = (x.id(), x.requires_grad());
    let (idg, rgg) = (gamma.id(), gamma.requires_grad());
    let (idb, rgb) = (beta.id(), beta.requires_grad());
    let xhat = Arc::new(xhat);
    let invstd = Arc::new(invstd);
    let gsave = gamma.value();
    let backward: BackwardFn = Box::new(move |g, sink| {
        if rgx {
            sink.with(idx, |gp| {
                for r in 0..rows {
                    let inv = invstd[r];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut sum1 = 0.0;
                    let mut sum2 = 0.0;
                    for i in 0..d {
                        let dxh = gr[i] * gsave[i];
                        sum1 += dxh;
                        sum2 += dxh * xh[i];
                    }
                    let dn = d as f64;
                    for i in 0..d {
                        let dxh = gr[i] * gsave[i];
                        gp[r * d + i] += inv * (dxh - sum1 / dn - xh[i] * sum2 / dn);
                    }
                }
            });
        }
        if rgg {
            sink.with(idg, |gp| {
                for r in 0..rows {
                    for i in 0..d {
                        gp[i] += g[r * d + i] * xhat[r * d + i];
                    }
                }
            });
        }
        if rgb {
            sink.with(idb, |gp| {
                for r in 0..rows {
                    for i in 0..d {
                        gp[i] += g[r * d + i];
                    }
                }
            });
        }
    });
    x.tape().push(
        "layer_norm",
        x.shape().to_vec(),
        value,
        rgx || rgg || rgb,
        Some(backward),
    )
}

/// Concatenate tensors along axis 0. Shapes must agree on all other axes.
pub fn concat_rows(parts: &[&Tensor]) -> Tensor {
    assert!(!parts.is_empty(), "concat_rows: no parts");
    let tail = &parts[0].shape()[1..];
    let rsz: usize = tail.iter().product();
    let mut total = 0usize;
    for p in parts {
        parts[0].assert_same_tape(p);
        assert_eq!(&p.shape()[1..], tail, "concat_rows: trailing shape mismatch");
        total += p.shape()[0];
    }
    let mut value = Vec::with_capacity(total * rsz);
    for p in parts {
        value.extend_from_slice(p.data());
    }
    let mut out_shape = parts[0].shape().to_vec();
    out_shape[0] = total;
    let meta: Vec<(usize, bool, usize)> = parts
        .iter()
        .map(|p| (p.id(), p.requires_grad(), p.numel()))
        .collect();
    let any_rg = meta.iter().any(|m| m.1);
    let backward: BackwardFn = Box::new(move |g, sink| {
        let mut off = 0usize;
        for &(id, rg, n) in &meta {
            if rg {
                sink.add(id, &g[off..off + n]);
            }
            off += n;
        }
    });
    parts[0]
        .tape()
        .push("concat_rows", out_shape, value, any_rg, Some(backward))
}

/// 2-D convolution, channels-last: `x [h, w, cin]`, `w [kh, kw, cin, cout]`,
/// `b [cout]`, zero padding.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    x.assert_same_tape(w);
    x.assert_same_tape(b);
    let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, wcin, cout) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cin, wcin, "conv2d: channel mismatch");
    assert_eq!(b.shape(), &[cout]);
    assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d: kernel larger than input");
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let xv = x.data();
    let wv = w.data();
    let bv = b.data();
    let mut value = vec![0.0; ho * wo * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            let out_base = (oy * wo + ox) * cout;
            value[out_base..out_base + cout].copy_from_slice(bv);
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    let in_base = ((iy as usize) * wd + ix as usize) * cin;
                    let w_base = (ky * kw + kx) * cin * cout;
                    for ci in 0..cin {
                        let xvv = xv[in_base + ci];
                        if xvv == 0.0 {
                            continue;
                        }
                        let wrow = &wv[w_base + ci * cout..w_base + (ci + 1) * cout];
                        for co in 0..cout {
                            value[out_base + co] += xvv * wrow[co];
                        }
                    }
                }
            }
        }
    }
    let (idx, rgx) = (x.id(), x.requires_grad());
    let (idw, rgw) = (w.id(), w.requires_grad());
    let (idb, rgb) = (b.id(), b.requires_grad());
    let vx = x.value();
    let vw = w.value();
    let backward: BackwardFn = Box::new(move |g, sink| {
        if rgb {
            sink.with(idb, |gp| {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let out_base = (oy * wo + ox) * cout;
                        for co in 0..cout {
                            gp[co] += g[out_base + co];
                        }
                    }
                }
            });
        }
        if rgx {
            sink.with(idx, |gp| {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let out_base = (oy * wo + ox) * cout;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let in_base = ((iy as usize) * wd + ix as usize) * cin;
                                let w_base = (ky * kw + kx) * cin * cout;
                                for ci in 0..cin {
                                    let mut acc = 0.0;
                                    for co in 0..cout {
                                        acc += g[out_base + co] * vw[w_base + ci * cout + co];
                                    }
                                    gp[in_base + ci] += acc;
                                }
                            }
                        }
                    }
                }
            });
        }
        if rgw {
            sink.with(idw, |gp| {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let out_base = (oy * wo + ox) * cout;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let in_base = ((iy as usize) * wd + ix as usize) * cin;
                                let w_base = (ky * kw + kx) * cin * cout;
                                for ci in 0..cin {
                                    let xvv = vx[in_base + ci];
                                    if xvv == 0.0 {
                                        continue;
                                    }
                                    for co in 0..cout {
                                        gp[w_base + ci * cout + co] += xvv * g[out_base + co];
                                    }
                                }
                            }
                        }
                    }
                }
            });
        }
    });
    x.tape().push(
        "conv2d",
        vec![ho, wo, cout],
        value,
        rgx || rgw || rgb,
        Some(backward),
    )
}

/// Transposed 2-D convolution (stride-s upsampling), channels-last:
/// `x [h, w, cin]`, `w [kh, kw, cin, cout]`, output `[(h-1)s + kh - 2p, ...]`.
pub fn conv2d_transpose(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    x.assert_same_tape(w);
    x.assert_same_tape(b);
    let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, wcin, cout) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cin, wcin, "conv2d_transpose: channel mismatch");
    assert_eq!(b.shape(), &[cout]);
    let ho = (h - 1) * stride + kh - 2 * pad;
    let wo = (wd - 1) * stride + kw - 2 * pad;
    let xv = x.data();
    let wv = w.data();
    let bv = b.data();
    let mut value = vec![0.0; ho * wo * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            let ob = (oy * wo + ox) * cout;
            value[ob..ob + cout].copy_from_slice(bv);
        }
    }
    for iy in 0..h {
        for ix in 0..wd {
            let in_base = (iy * wd + ix) * cin;
            for ky in 0..kh {
                let oy = (iy * stride + ky) as isize - pad as isize;
                if oy < 0 || oy >= ho as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ox = (ix * stride + kx) as isize - pad as isize;
                    if ox < 0 || ox >= wo as isize {
                        continue;
                    }
                    let out_base = ((oy as usize) * wo + ox as usize) * cout;
                    let w_base = (ky * kw + kx) * cin * cout;
                    for ci in 0..cin {
                        let xvv = xv[in_base + ci];
                        if xvv == 0.0 {
                            continue;
                        }
                        let wrow = &wv[w_base + ci * cout..w_base + (ci + 1) * cout];
                        for co in 0..cout {
                            value[out_base + co] += xvv * wrow[co];
                        }
                    }
                }
            }
        }
    }
    let (idx, rgx) = (x.id(), x.requires_grad());
    let (idw, rgw) = (w.id(), w.requires_grad());
    let (idb, rgb) = (b.id(), b.requires_grad());
    let vx = x.value();
    let vw = w.value();
    let backward: BackwardFn = Box::new(move |g, sink| {
        if rgb {
            sink.with(idb, |gp| {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let ob = (oy * wo + ox) * cout;
                        for co in 0..cout {
                            gp[co] += g[ob + co];
                        }
                    }
                }
            });
        }
        if rgx || rgw {
            for iy in 0..h {
                for ix in 0..wd {
                    let in_base = (iy * wd + ix) * cin;
                    for ky in 0..kh {
                        let oy = (iy * stride + ky) as isize - pad as isize;
                        if oy < 0 || oy >= ho as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ox = (ix * stride + kx) as isize - pad as isize;
                            if ox < 0 || ox >= wo as isize {
                                continue;
                            }
                            let out_base = ((oy as usize) * wo + ox as usize) * cout;
                            let w_base = (ky * kw + kx) * cin * cout;
                            if rgx {
                                sink.with(idx, |gp| {
                                    for ci in 0..cin {
                                        let mut acc = 0.0;
                                        for co in 0..cout {
                                            acc += g[out_base + co] * vw[w_base + ci * cout + co];
                                        }
                                        gp[in_base + ci] += acc;
                                    }
                                });
                            }
                            if rgw {
                                sink.with(idw, |gp| {
                                    for ci in 0..cin {
                                        let xvv = vx[in_base + ci];
                                        if xvv == 0.0 {
                                            continue;
                                        }
                                        for co in 0..cout {
                                            gp[w_base + ci * cout + co] += xvv * g[out_base + co];
                                        }
                                    }
                                });
                            }
                        }
                    }
                }
            }
        }
    });
    x.tape().push(
        "conv2d_transpose",
        vec![ho, wo, cout],
        value,
        rgx || rgw || rgb,
        Some(backward),
    )
}

fn permute_buf(src: &[f64], in_shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let nd = in_shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let in_strides = strides(in_shape);
    let numel: usize = in_shape.iter().product();
    let mut out = vec![0.0; numel];
    let mut idx = vec![0usize; nd];
    for (lin, slot) in out.iter_mut().enumerate() {
        let mut rem = lin;
        for i in (0..nd).rev() {
            idx[i] = rem % out_shape[i];
            rem /= out_shape[i];
        }
        let mut src_lin = 0;
        for i in 0..nd {
            src_lin += idx[i] * in_strides[axes[i]];
        }
        *slot = src[src_lin];
    }
    out
}

//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its variables. Calling
//! [`Graph::backward`] on a scalar output walks the tape in reverse and
//! produces a [`Gradients`] table holding the adjoint of every node, which can
//! then be folded into a [`ParamStore`].
//!
//! Operations take `&self`, so expressions nest freely:
//!
//! ```
//! use ctpp::nn::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.constant(Tensor::row_vector(&[1.0, 2.0]));
//! let w = g.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
//! let y = g.sum(g.square(g.matmul(x, w).unwrap()));
//! assert_eq!(g.item(y), 121.0);
//!
//! let grads = g.backward(y).unwrap();
//! // d/dw (x·w)² = 2(x·w)·xᵀ
//! assert_eq!(grads.wrt(w).unwrap().data(), &[22.0, 44.0]);
//! ```

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::tensor::{gemm_nt, gemm_tn};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How a convolution kernel's output is applied to an embedding row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairMode {
    /// Kernel row holds a `d × d` matrix (row-major); `out[r] += Σ_c K[r][c]·e[c]`.
    Full,
    /// Kernel row holds `d` scales; `out[r] += K[r]·e[r]`.
    Depthwise,
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Sin(Var),
    Exp(Var),
    Tanh(Var),
    Sigmoid(Var),
    Ln(Var),
    Square(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    LogSoftmax(Var),
    LogSumExp(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Rc<[usize]>),
    Select { on: Var, off: Var, mask: Rc<[bool]> },
    PairConv {
        kernel: Var,
        input: Var,
        pairs: Rc<[(usize, usize)]>,
        mode: PairMode,
    },
    Pick { x: Var, entries: Rc<[(usize, usize, f64)]> },
    Sum(Var),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

#[derive(Default)]
struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Graph {
    tape: RefCell<Tape>,
}

fn shape_err(what: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape()))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tape.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut tape = self.tape.borrow_mut();
        tape.nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var(tape.nodes.len() - 1)
    }

    /// Shared handle to a node's value.
    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.tape.borrow().nodes[v.0].value)
    }

    /// Value of a `1 × 1` node.
    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    /// A leaf that is not tied to any parameter. Gradients are still tracked,
    /// so inputs can be differentiated too.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Loads a parameter onto the tape. Repeated loads return the same node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.tape.borrow().params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.tape.borrow_mut().params.insert(id, v);
        v
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.matmul(&bv)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn zip_same(&self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(what, &av, &bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(av.rows(), av.cols(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds a `1 × n` row to every row of an `m × n` matrix.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(shape_err("add_row", &av, &rv));
        }
        let mut out = (*av).clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// Adds an `m × 1` column to every column of an `m × n` matrix.
    pub fn add_col(&self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        if cv.cols() != 1 || cv.rows() != av.rows() {
            return Err(shape_err("add_col", &av, &cv));
        }
        let mut out = (*av).clone();
        for r in 0..out.rows() {
            let c = cv.data()[r];
            for o in out.row_mut(r) {
                *o += c;
            }
        }
        Ok(self.push(out, Op::AddCol(a, col)))
    }

    /// Scales row `r` of an `m × n` matrix by entry `r` of an `m × 1` column.
    pub fn mul_col(&self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        if cv.cols() != 1 || cv.rows() != av.rows() {
            return Err(shape_err("mul_col", &av, &cv));
        }
        let mut out = (*av).clone();
        for r in 0..out.rows() {
            let c = cv.data()[r];
            for o in out.row_mut(r) {
                *o *= c;
            }
        }
        Ok(self.push(out, Op::MulCol(a, col)))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddConst(a))
    }

    pub fn sin(&self, a: Var) -> Var {
        let out = self.value(a).map(f64::sin);
        self.push(out, Op::Sin(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn ln(&self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Ln(a))
    }

    pub fn square(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp { x: a, lo, hi })
    }

    /// Row-wise log-softmax, computed with a max shift.
    pub fn log_softmax(&self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = (*av).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let lse = logsumexp(row);
            for x in row {
                *x -= lse;
            }
        }
        self.push(out, Op::LogSoftmax(a))
    }

    /// Row-wise log-sum-exp: `m × n` to `m × 1`.
    pub fn logsumexp(&self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows()).map(|r| logsumexp(av.row(r))).collect();
        let out = Tensor::from_vec(av.rows(), 1, data).expect("column shape");
        self.push(out, Op::LogSumExp(a))
    }

    /// Row-wise layer normalization followed by a per-feature affine map.
    /// Variance is the biased (population) estimate; `eps` is added to it.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let n = xv.cols();
        if n == 0 {
            return Err(Error::Shape("layer_norm over zero features".into()));
        }
        if gv.shape() != (1, n) || bv.shape() != (1, n) {
            return Err(shape_err("layer_norm affine", &xv, &gv));
        }
        let mut out = Tensor::zeros(xv.rows(), n);
        for r in 0..xv.rows() {
            let (mean, inv_std) = row_moments(xv.row(r), eps);
            let o = out.row_mut(r);
            for (c, (&xi, oi)) in xv.row(r).iter().zip(o.iter_mut()).enumerate() {
                *oi = (xi - mean) * inv_std * gv.data()[c] + bv.data()[c];
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, eps }))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let rows = vals.first().map_or(0, |v| v.rows());
        if let Some(bad) = vals.iter().find(|v| v.rows() != rows) {
            return Err(shape_err("concat_cols", &vals[0], bad));
        }
        let cols: usize = vals.iter().map(|v| v.cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for v in &vals {
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
                off += v.cols();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let cols = vals.first().map_or(0, |v| v.cols());
        if let Some(bad) = vals.iter().find(|v| v.cols() != cols) {
            return Err(shape_err("concat_rows", &vals[0], bad));
        }
        let rows: usize = vals.iter().map(|v| v.rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for v in &vals {
            data.extend_from_slice(v.data());
        }
        Ok(self.push(Tensor::from_vec(rows, cols, data)?, Op::ConcatRows(parts.to_vec())))
    }

    /// Output row `k` is row `index[k]` of `a`.
    pub fn gather_rows(&self, a: Var, index: impl Into<Rc<[usize]>>) -> Result<Var> {
        let index = index.into();
        let av = self.value(a);
        let mut out = Tensor::zeros(index.len(), av.cols());
        for (k, &src) in index.iter().enumerate() {
            if src >= av.rows() {
                return Err(Error::Index {
                    index: src,
                    len: av.rows(),
                });
            }
            out.row_mut(k).copy_from_slice(av.row(src));
        }
        Ok(self.push(out, Op::GatherRows(a, index)))
    }

    /// Row `r` comes from `on` where `mask[r]`, else from `off`.
    pub fn select_rows(&self, on: Var, off: Var, mask: impl Into<Rc<[bool]>>) -> Result<Var> {
        let mask = mask.into();
        let (ov, fv) = (self.value(on), self.value(off));
        if ov.shape() != fv.shape() || mask.len() != ov.rows() {
            return Err(shape_err("select_rows", &ov, &fv));
        }
        let mut out = (*fv).clone();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out.row_mut(r).copy_from_slice(ov.row(r));
            }
        }
        Ok(self.push(out, Op::Select { on, off, mask }))
    }

    /// Sparse continuous convolution. `kernel` has one row per `(dst, src)`
    /// pair holding the kernel evaluated at that pair's time offset; output
    /// row `dst` accumulates the kernel applied to `input` row `src`.
    pub fn pair_conv(
        &self,
        kernel: Var,
        input: Var,
        pairs: impl Into<Rc<[(usize, usize)]>>,
        mode: PairMode,
    ) -> Result<Var> {
        let pairs = pairs.into();
        let (kv, ev) = (self.value(kernel), self.value(input));
        let d = ev.cols();
        let width = match mode {
            PairMode::Full => d * d,
            PairMode::Depthwise => d,
        };
        if kv.rows() != pairs.len() || kv.cols() != width {
            return Err(Error::Shape(format!(
                "pair_conv kernel {:?} for {} pairs of width {width}",
                kv.shape(),
                pairs.len()
            )));
        }
        let mut out = Tensor::zeros(ev.rows(), d);
        for (p, &(dst, src)) in pairs.iter().enumerate() {
            if dst >= ev.rows() || src >= ev.rows() {
                return Err(Error::Index {
                    index: dst.max(src),
                    len: ev.rows(),
                });
            }
            let k = kv.row(p);
            let e = ev.row(src);
            let o = out.row_mut(dst);
            match mode {
                PairMode::Full => {
                    for (r, oi) in o.iter_mut().enumerate() {
                        let kr = &k[r * d..(r + 1) * d];
                        *oi += kr.iter().zip(e).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                PairMode::Depthwise => {
                    for ((oi, ki), ei) in o.iter_mut().zip(k).zip(e) {
                        *oi += ki * ei;
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::PairConv {
                kernel,
                input,
                pairs,
                mode,
            },
        ))
    }

    /// Weighted sum of selected entries: `Σ w · x[row, col]`, as `1 × 1`.
    pub fn pick(&self, x: Var, entries: impl Into<Rc<[(usize, usize, f64)]>>) -> Result<Var> {
        let entries = entries.into();
        let xv = self.value(x);
        let mut acc = 0.0;
        for &(r, c, w) in entries.iter() {
            if r >= xv.rows() || c >= xv.cols() {
                return Err(Error::Index {
                    index: r * xv.cols() + c,
                    len: xv.len(),
                });
            }
            acc += w * xv.get(r, c);
        }
        Ok(self.push(Tensor::scalar(acc), Op::Pick { x, entries }))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Reverse sweep from a `1 × 1` output.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let tape = self.tape.borrow();
        let nodes = &tape.nodes;
        if nodes[root.0].value.shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward from a {:?} node; expected a scalar",
                nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            let val = |v: Var| -> &Tensor { &nodes[v.0].value };
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    gemm_nt(&g, bv, &mut ga);
                    let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                    gemm_tn(av, &g, &mut gb);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let ga = zip(&g, val(*b), |x, y| x * y);
                    let gb = zip(&g, val(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &x) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *row, gr);
                }
                Op::AddCol(a, col) => {
                    let data = (0..g.rows()).map(|r| g.row(r).iter().sum()).collect();
                    let gc = Tensor::from_vec(g.rows(), 1, data)?;
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *col, gc);
                }
                Op::MulCol(a, col) => {
                    let (av, cv) = (val(*a), val(*col));
                    let mut ga = g.clone();
                    let mut gc = Tensor::zeros(g.rows(), 1);
                    for r in 0..g.rows() {
                        let c = cv.data()[r];
                        gc.data_mut()[r] = g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum();
                        for x in ga.row_mut(r) {
                            *x *= c;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *col, gc);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.map(|x| x * c)),
                Op::AddConst(a) => accumulate(&mut grads, *a, g.clone()),
                Op::Sin(a) => accumulate(&mut grads, *a, zip(&g, val(*a), |gi, x| gi * x.cos())),
                Op::Exp(_) | Op::Tanh(_) | Op::Sigmoid(_) => {
                    let y = &node.value;
                    let (a, gx) = match &node.op {
                        Op::Exp(a) => (*a, zip(&g, y, |gi, yi| gi * yi)),
                        Op::Tanh(a) => (*a, zip(&g, y, |gi, yi| gi * (1.0 - yi * yi))),
                        Op::Sigmoid(a) => (*a, zip(&g, y, |gi, yi| gi * yi * (1.0 - yi))),
                        _ => unreachable!(),
                    };
                    accumulate(&mut grads, a, gx);
                }
                Op::Ln(a) => accumulate(&mut grads, *a, zip(&g, val(*a), |gi, x| gi / x)),
                Op::Square(a) => accumulate(&mut grads, *a, zip(&g, val(*a), |gi, x| 2.0 * gi * x)),
                Op::Clamp { x, lo, hi } => {
                    let gx = zip(&g, val(*x), |gi, xi| if xi >= *lo && xi <= *hi { gi } else { 0.0 });
                    accumulate(&mut grads, *x, gx);
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let mut gx = g.clone();
                    for r in 0..g.rows() {
                        let s: f64 = g.row(r).iter().sum();
                        for (o, &yi) in gx.row_mut(r).iter_mut().zip(y.row(r)) {
                            *o -= yi.exp() * s;
                        }
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::LogSumExp(a) => {
                    let (av, y) = (val(*a), &node.value);
                    let mut gx = Tensor::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        let (gr, yr) = (g.data()[r], y.data()[r]);
                        for (o, &x) in gx.row_mut(r).iter_mut().zip(av.row(r)) {
                            *o = gr * (x - yr).exp();
                        }
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (xv, gv) = (val(*x), val(*gain));
                    let n = xv.cols();
                    let nf = n as f64;
                    let mut gx = Tensor::zeros(xv.rows(), n);
                    let mut ggain = Tensor::zeros(1, n);
                    let mut gbias = Tensor::zeros(1, n);
                    let mut xhat = vec![0.0; n];
                    let mut dxhat = vec![0.0; n];
                    for r in 0..xv.rows() {
                        let (mean, inv_std) = row_moments(xv.row(r), *eps);
                        let gr = g.row(r);
                        for c in 0..n {
                            xhat[c] = (xv.get(r, c) - mean) * inv_std;
                            dxhat[c] = gr[c] * gv.data()[c];
                            ggain.data_mut()[c] += gr[c] * xhat[c];
                            gbias.data_mut()[c] += gr[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / nf;
                        let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / nf;
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std * (dxhat[c] - mean_d - xhat[c] * mean_dx);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gain, ggain);
                    accumulate(&mut grads, *bias, gbias);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = val(p).cols();
                        let mut gp = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        off += w;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (h, w) = val(p).shape();
                        let gp = Tensor::from_vec(h, w, g.data()[off * w..(off + h) * w].to_vec())?;
                        off += h;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::GatherRows(a, index) => {
                    let av = val(*a);
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    for (k, &src) in index.iter().enumerate() {
                        for (o, &x) in ga.row_mut(src).iter_mut().zip(g.row(k)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Select { on, off, mask } => {
                    let mut gon = Tensor::zeros(g.rows(), g.cols());
                    let mut goff = Tensor::zeros(g.rows(), g.cols());
                    for (r, &m) in mask.iter().enumerate() {
                        let dst = if m { &mut gon } else { &mut goff };
                        dst.row_mut(r).copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *on, gon);
                    accumulate(&mut grads, *off, goff);
                }
                Op::PairConv {
                    kernel,
                    input,
                    pairs,
                    mode,
                } => {
                    let (kv, ev) = (val(*kernel), val(*input));
                    let d = ev.cols();
                    let mut gk = Tensor::zeros(kv.rows(), kv.cols());
                    let mut ge = Tensor::zeros(ev.rows(), d);
                    for (p, &(dst, src)) in pairs.iter().enumerate() {
                        let gd = g.row(dst);
                        let e = ev.row(src);
                        let k = kv.row(p);
                        match mode {
                            PairMode::Full => {
                                let gkp = gk.row_mut(p);
                                for r in 0..d {
                                    for c in 0..d {
                                        gkp[r * d + c] = gd[r] * e[c];
                                    }
                                }
                                let ges = ge.row_mut(src);
                                for r in 0..d {
                                    let kr = &k[r * d..(r + 1) * d];
                                    for (o, &kc) in ges.iter_mut().zip(kr) {
                                        *o += kc * gd[r];
                                    }
                                }
                            }
                            PairMode::Depthwise => {
                                let gkp = gk.row_mut(p);
                                for c in 0..d {
                                    gkp[c] = gd[c] * e[c];
                                }
                                let ges = ge.row_mut(src);
                                for c in 0..d {
                                    ges[c] += k[c] * gd[c];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *kernel, gk);
                    accumulate(&mut grads, *input, ge);
                }
                Op::Pick { x, entries } => {
                    let xv = val(*x);
                    let g0 = g.item();
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    for &(r, c, w) in entries.iter() {
                        let cur = gx.get(r, c);
                        gx.set(r, c, cur + w * g0);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    accumulate(&mut grads, *a, Tensor::filled(r, c, g.item()));
                }
            }
            grads[idx] = Some(g);
        }

        let params = tape.params.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }
}

/// Adjoints of every node reached by a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`; `None` if `v` does not
    /// influence the output.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Parameter gradients in parameter-id order.
    pub fn params(&self) -> Vec<(ParamId, &Tensor)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|&(id, v)| self.wrt(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Adds every parameter gradient into the store's buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (id, g) in self.params() {
            store.accumulate_grad(id, g)?;
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln Σ exp(x)` with a max shift; `-inf` for an empty slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

use std::sync::atomic::{AtomicU64, Ordering};

use super::{axpy, dot, DenseMatrix};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Index of a trainable tensor in the parameter slice a tape was built over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// A scalar function of a contiguous slice of one node, with its own
/// analytic gradient. Used for the Gaussian likelihood heads.
pub trait ScalarKernel: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
}

enum Op {
    Input,
    Param(usize),
    MatVec { w: usize, x: usize },
    AddParam { a: usize, p: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Concat(Vec<usize>),
    Slice { a: usize, start: usize },
    Sum(usize),
    AddN(Vec<usize>),
    ParamSquaredNorm(usize),
    /// `W * v` where `v` is zero except for a few column blocks; each block is
    /// the sum of some recorded vectors.
    BlockSparseMatVec { w: usize, blocks: Vec<(usize, Vec<usize>)> },
    Kernel {
        src: usize,
        start: usize,
        len: usize,
        kernel: Box<dyn ScalarKernel>,
    },
}

/// Record of one forward pass. Values are kept for every node so the
/// backward sweep in [`grad_of_scalar`] can run without recomputation.
///
/// Parameters are borrowed, never copied, except through [`GradTape::param`].
/// Shape errors while recording are programming errors and panic.
pub struct GradTape<'p> {
    id: u64,
    params: &'p [DenseMatrix],
    values: Vec<Vec<f64>>,
    ops: Vec<Op>,
}

impl<'p> GradTape<'p> {
    pub fn new(params: &'p [DenseMatrix]) -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            params,
            values: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p [DenseMatrix] {
        self.params
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.values[self.check(v)]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let x = self.value(v);
        assert_eq!(x.len(), 1, "node is not a scalar");
        x[0]
    }

    fn check(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable recorded on a different tape");
        v.idx
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var {
            tape: self.id,
            idx: self.ops.len() - 1,
        }
    }

    fn param_tensor(&self, p: ParamId) -> &'p DenseMatrix {
        let params = self.params;
        params
            .get(p.0)
            .unwrap_or_else(|| panic!("parameter {} out of range", p.0))
    }

    pub fn input(&mut self, values: Vec<f64>) -> Var {
        self.push(values, Op::Input)
    }

    /// Copy of a whole parameter tensor, flattened row-major.
    pub fn param(&mut self, p: ParamId) -> Var {
        let data = self.param_tensor(p).data().to_vec();
        self.push(data, Op::Param(p.0))
    }

    pub fn matvec(&mut self, w: ParamId, x: Var) -> Var {
        let xi = self.check(x);
        let m = self.param_tensor(w);
        let xv = &self.values[xi];
        assert_eq!(
            m.cols(),
            xv.len(),
            "matvec: {}x{} parameter times vector of length {}",
            m.rows(),
            m.cols(),
            xv.len()
        );
        let out = (0..m.rows()).map(|r| dot(m.row(r), xv)).collect();
        self.push(out, Op::MatVec { w: w.0, x: xi })
    }

    pub fn add_param(&mut self, a: Var, p: ParamId) -> Var {
        let ai = self.check(a);
        let b = self.param_tensor(p).data();
        let av = &self.values[ai];
        assert_eq!(av.len(), b.len(), "add_param: length mismatch");
        let out = av.iter().zip(b).map(|(x, y)| x + y).collect();
        self.push(out, Op::AddParam { a: ai, p: p.0 })
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> (usize, usize, Vec<f64>) {
        let (ai, bi) = (self.check(a), self.check(b));
        let (av, bv) = (&self.values[ai], &self.values[bi]);
        assert_eq!(av.len(), bv.len(), "elementwise op: length mismatch");
        let out = av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect();
        (ai, bi, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ai, bi, out) = self.binary(a, b, |x, y| x + y);
        self.push(out, Op::Add(ai, bi))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ai, bi, out) = self.binary(a, b, |x, y| x - y);
        self.push(out, Op::Sub(ai, bi))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ai, bi, out) = self.binary(a, b, |x, y| x * y);
        self.push(out, Op::Mul(ai, bi))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ai = self.check(a);
        let out = self.values[ai].iter().map(|x| x * s).collect();
        self.push(out, Op::Scale(ai, s))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64) -> (usize, Vec<f64>) {
        let ai = self.check(a);
        (ai, self.values[ai].iter().map(|x| f(*x)).collect())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (ai, out) = self.unary(a, |x| x.max(0.0));
        self.push(out, Op::Relu(ai))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (ai, out) = self.unary(a, sigmoid);
        self.push(out, Op::Sigmoid(ai))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let (ai, out) = self.unary(a, f64::tanh);
        self.push(out, Op::Tanh(ai))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let idx: Vec<usize> = parts.iter().map(|v| self.check(*v)).collect();
        let mut out = Vec::with_capacity(idx.iter().map(|&i| self.values[i].len()).sum());
        for &i in &idx {
            out.extend_from_slice(&self.values[i]);
        }
        self.push(out, Op::Concat(idx))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ai = self.check(a);
        let av = &self.values[ai];
        assert!(start + len <= av.len(), "slice out of bounds");
        let out = av[start..start + len].to_vec();
        self.push(out, Op::Slice { a: ai, start })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let ai = self.check(a);
        let s = self.values[ai].iter().sum();
        self.push(vec![s], Op::Sum(ai))
    }

    /// Elementwise sum of equally sized nodes, accumulated in the given order.
    pub fn add_n(&mut self, parts: &[Var]) -> Var {
        let idx: Vec<usize> = parts.iter().map(|v| self.check(*v)).collect();
        let len = idx.first().map_or(1, |&i| self.values[i].len());
        let mut out = vec![0.0; len];
        for &i in &idx {
            assert_eq!(self.values[i].len(), len, "add_n: length mismatch");
            axpy(1.0, &self.values[i], &mut out);
        }
        self.push(out, Op::AddN(idx))
    }

    pub fn param_squared_norm(&mut self, p: ParamId) -> Var {
        let s = self.param_tensor(p).sum_squares();
        self.push(vec![s], Op::ParamSquaredNorm(p.0))
    }

    /// `W * v` where `v` is made of column blocks of width `block`; block `b`
    /// equals the sum of the listed vectors and every unlisted block is zero.
    pub fn block_sparse_matvec(&mut self, w: ParamId, blocks: &[(usize, Vec<Var>)]) -> Var {
        let m = self.param_tensor(w);
        let mut out = vec![0.0; m.rows()];
        let mut recorded = Vec::with_capacity(blocks.len());
        let mut block_sum = Vec::new();
        for (block, parts) in blocks {
            let idx: Vec<usize> = parts.iter().map(|v| self.check(*v)).collect();
            block_sum.clear();
            if let Some(&first) = idx.first() {
                block_sum.resize(self.values[first].len(), 0.0);
            }
            for &i in &idx {
                assert_eq!(self.values[i].len(), block_sum.len(), "block length mismatch");
                axpy(1.0, &self.values[i], &mut block_sum);
            }
            let width = block_sum.len();
            let offset = block * width;
            assert!(offset + width <= m.cols(), "block {block} outside parameter columns");
            for (r, o) in out.iter_mut().enumerate() {
                *o += dot(&m.row(r)[offset..offset + width], &block_sum);
            }
            recorded.push((*block, idx));
        }
        self.push(
            out,
            Op::BlockSparseMatVec {
                w: w.0,
                blocks: recorded,
            },
        )
    }

    /// Scalar `kernel(a[start..start + len])`.
    pub fn kernel(&mut self, a: Var, start: usize, len: usize, kernel: Box<dyn ScalarKernel>) -> Var {
        let ai = self.check(a);
        let av = &self.values[ai];
        assert!(start + len <= av.len(), "kernel input out of bounds");
        let v = kernel.value(&av[start..start + len]);
        self.push(
            vec![v],
            Op::Kernel {
                src: ai,
                start,
                len,
                kernel,
            },
        )
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-parameter gradients, shaped like the parameter slice of the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    tensors: Vec<DenseMatrix>,
}

impl Gradients {
    pub fn zeros_like(params: &[DenseMatrix]) -> Self {
        Self {
            tensors: params
                .iter()
                .map(|p| DenseMatrix::zeros(p.rows(), p.cols()))
                .collect(),
        }
    }

    pub fn get(&self, p: ParamId) -> &DenseMatrix {
        &self.tensors[p.0]
    }

    pub fn get_mut(&mut self, p: ParamId) -> &mut DenseMatrix {
        &mut self.tensors[p.0]
    }

    pub fn tensors(&self) -> &[DenseMatrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [DenseMatrix] {
        &mut self.tensors
    }

    pub fn clear(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.fill(0.0));
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            axpy(1.0, b.data(), a.data_mut());
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .map(DenseMatrix::sum_squares)
            .sum::<f64>()
            .sqrt()
    }
}

/// Reverse sweep from the scalar `loss`, returning gradients for every
/// parameter the tape was built over.
pub fn grad_of_scalar(tape: &GradTape<'_>, loss: Var) -> Result<Gradients> {
    let mut grads = Gradients::zeros_like(tape.params);
    accumulate_grad(tape, loss, &mut grads)?;
    Ok(grads)
}

/// Like [`grad_of_scalar`] but adds into an existing buffer.
pub fn accumulate_grad(tape: &GradTape<'_>, loss: Var, out: &mut Gradients) -> Result<()> {
    if loss.tape != tape.id {
        return Err(Error::Tape("loss was recorded on a different tape".into()));
    }
    if loss.idx >= tape.ops.len() || tape.values[loss.idx].len() != 1 {
        return Err(Error::Tape("loss node is not a scalar".into()));
    }
    if out.tensors.len() != tape.params.len()
        || out
            .tensors
            .iter()
            .zip(tape.params)
            .any(|(g, p)| g.shape() != p.shape())
    {
        return Err(Error::Tape("gradient buffer does not match the parameters".into()));
    }

    let values = &tape.values;
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.idx + 1];
    grads[loss.idx] = Some(vec![1.0]);

    fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], i: usize, len: usize) -> &'g mut Vec<f64> {
        grads[i].get_or_insert_with(|| vec![0.0; len])
    }

    for i in (0..=loss.idx).rev() {
        let Some(g) = grads[i].take() else { continue };
        match &tape.ops[i] {
            Op::Input => {}
            Op::Param(p) => axpy(1.0, &g, out.tensors[*p].data_mut()),
            Op::MatVec { w, x } => {
                let m = &tape.params[*w];
                let xv = &values[*x];
                let gw = &mut out.tensors[*w];
                for (r, gr) in g.iter().enumerate() {
                    if *gr != 0.0 {
                        axpy(*gr, xv, gw.row_mut(r));
                    }
                }
                let gx = slot(&mut grads, *x, xv.len());
                for (r, gr) in g.iter().enumerate() {
                    if *gr != 0.0 {
                        axpy(*gr, m.row(r), gx);
                    }
                }
            }
            Op::AddParam { a, p } => {
                axpy(1.0, &g, out.tensors[*p].data_mut());
                axpy(1.0, &g, slot(&mut grads, *a, g.len()));
            }
            Op::Add(a, b) => {
                axpy(1.0, &g, slot(&mut grads, *a, g.len()));
                axpy(1.0, &g, slot(&mut grads, *b, g.len()));
            }
            Op::Sub(a, b) => {
                axpy(1.0, &g, slot(&mut grads, *a, g.len()));
                axpy(-1.0, &g, slot(&mut grads, *b, g.len()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&values[*a], &values[*b]);
                {
                    let ga = slot(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * bv[k];
                    }
                }
                let gb = slot(&mut grads, *b, g.len());
                for k in 0..g.len() {
                    gb[k] += g[k] * av[k];
                }
            }
            Op::Scale(a, s) => axpy(*s, &g, slot(&mut grads, *a, g.len())),
            Op::Relu(a) => {
                let av = &values[*a];
                let ga = slot(&mut grads, *a, g.len());
                for k in 0..g.len() {
                    if av[k] > 0.0 {
                        ga[k] += g[k];
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = &values[i];
                let ga = slot(&mut grads, *a, g.len());
                for k in 0..g.len() {
                    ga[k] += g[k] * y[k] * (1.0 - y[k]);
                }
            }
            Op::Tanh(a) => {
                let y = &values[i];
                let ga = slot(&mut grads, *a, g.len());
                for k in 0..g.len() {
                    ga[k] += g[k] * (1.0 - y[k] * y[k]);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = values[p].len();
                    axpy(1.0, &g[offset..offset + len], slot(&mut grads, p, len));
                    offset += len;
                }
            }
            Op::Slice { a, start } => {
                let len = values[*a].len();
                let ga = slot(&mut grads, *a, len);
                axpy(1.0, &g, &mut ga[*start..*start + g.len()]);
            }
            Op::Sum(a) => {
                let len = values[*a].len();
                slot(&mut grads, *a, len).iter_mut().for_each(|v| *v += g[0]);
            }
            Op::AddN(parts) => {
                for &p in parts {
                    axpy(1.0, &g, slot(&mut grads, p, g.len()));
                }
            }
            Op::ParamSquaredNorm(p) => {
                let w = tape.params[*p].data();
                axpy(2.0 * g[0], w, out.tensors[*p].data_mut());
            }
            Op::BlockSparseMatVec { w, blocks } => {
                let m = &tape.params[*w];
                let mut block_sum = Vec::new();
                let mut block_grad = Vec::new();
                for (block, parts) in blocks {
                    let Some(&first) = parts.first() else { continue };
                    let width = values[first].len();
                    let offset = block * width;
                    block_sum.clear();
                    block_sum.resize(width, 0.0);
                    for &p in parts {
                        axpy(1.0, &values[p], &mut block_sum);
                    }
                    block_grad.clear();
                    block_grad.resize(width, 0.0);
                    let gw = &mut out.tensors[*w];
                    for (r, gr) in g.iter().enumerate() {
                        if *gr != 0.0 {
                            axpy(*gr, &block_sum, &mut gw.row_mut(r)[offset..offset + width]);
                            axpy(*gr, &m.row(r)[offset..offset + width], &mut block_grad);
                        }
                    }
                    for &p in parts {
                        axpy(1.0, &block_grad, slot(&mut grads, p, width));
                    }
                }
            }
            Op::Kernel {
                src,
                start,
                len,
                kernel,
            } => {
                let kg = kernel.gradient(&values[*src][*start..*start + *len]);
                let total = values[*src].len();
                axpy(g[0], &kg, &mut slot(&mut grads, *src, total)[*start..*start + *len]);
            }
        }
    }
    Ok(())
}

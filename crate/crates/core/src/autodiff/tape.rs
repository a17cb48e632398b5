//! Reverse-mode recording tape with one node per tensor operation.

use std::collections::HashMap;

use super::backend::{
    affine_forward, binary_forward, broadcast_shape, columns_forward, concat_forward,
    mean_forward, running_max_forward, sum_forward, tame_forward, unary_forward,
    variance_forward, Activation, Backend, Binary, Unary,
};
use super::backend::{bget, check_finite, row_norm};
use super::matrix::{gemm, Matrix};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to an array recorded on a [`Tape`].
///
/// Values live on the tape. An array that depends on no tracked leaf
/// (constants, detached copies, frozen parameters) is recorded as an
/// untracked leaf and never receives an adjoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiffArray {
    id: usize,
    rows: usize,
    cols: usize,
}

impl DiffArray {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Variable,
    /// Store key and parameter.
    Param(u64, ParamId),
    Affine {
        x: usize,
        w: usize,
        b: usize,
        act: Activation,
    },
    Unary {
        x: usize,
        f: Unary,
    },
    Binary {
        a: usize,
        b: usize,
        f: Binary,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    AddScalar {
        x: usize,
    },
    Concat(Vec<usize>),
    Columns {
        x: usize,
        start: usize,
    },
    Tame {
        x: usize,
        dt: f64,
    },
    Mean {
        x: usize,
    },
    Variance {
        x: usize,
        mean: Matrix,
    },
    Sum {
        x: usize,
    },
    RunningMax {
        xs: Vec<usize>,
        arg: Vec<u32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: HashMap<(u64, ParamId), DiffArray>,
    filter: Option<(u64, Vec<bool>)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape on which only parameters of `store` with `mask[id] == true`
    /// are tracked. Parameters of other stores are unaffected.
    pub fn with_param_filter(store: &ParamStore, mask: Vec<bool>) -> Self {
        Self {
            filter: Some((store.key(), mask)),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.param_nodes.clear();
    }

    pub fn is_tracked(&self, x: &DiffArray) -> bool {
        self.nodes[x.id].tracked
    }

    /// A tracked leaf that is not a parameter; its adjoint is available
    /// through [`Tape::gradient`].
    pub fn variable(&mut self, value: Matrix) -> DiffArray {
        self.push_raw(value, Op::Variable, true)
    }

    fn push_raw(&mut self, value: Matrix, op: Op, tracked: bool) -> DiffArray {
        let (rows, cols) = value.shape();
        let id = self.nodes.len();
        self.nodes.push(Node { value, op, tracked });
        DiffArray { id, rows, cols }
    }

    fn push(&mut self, value: Matrix, op: Op, parents: &[usize]) -> DiffArray {
        let tracked = parents.iter().any(|&p| self.nodes[p].tracked);
        if tracked {
            self.push_raw(value, op, true)
        } else {
            self.push_raw(value, Op::Leaf, false)
        }
    }

    fn val(&self, x: &DiffArray) -> &Matrix {
        &self.nodes[x.id].value
    }

    fn param_tracked(&self, store: &ParamStore, id: ParamId) -> bool {
        if store.is_frozen(id) {
            return false;
        }
        match &self.filter {
            Some((key, mask)) if *key == store.key() => mask.get(id.index()).copied().unwrap_or(false),
            _ => true,
        }
    }

    /// Accumulates `d loss / d p` into every tracked parameter's gradient.
    pub fn backward(&self, loss: &DiffArray, store: &mut ParamStore) -> Result<()> {
        let key = store.key();
        self.reverse(loss, &[], |k, id, g| {
            if k == key {
                store.grad_mut(id).add_assign(g)
            }
        })?;
        Ok(())
    }

    /// Adjoints of `loss` with respect to the given arrays (zero for
    /// untracked ones). Parameter gradients are not touched.
    pub fn gradient(&self, loss: &DiffArray, wrt: &[DiffArray]) -> Result<Vec<Matrix>> {
        let keep: Vec<usize> = wrt.iter().map(|x| x.id).collect();
        let mut kept = self.reverse(loss, &keep, |_, _, _| {})?;
        Ok(wrt
            .iter()
            .map(|x| {
                kept.remove(&x.id)
                    .unwrap_or_else(|| Matrix::zeros(x.rows, x.cols))
            })
            .collect())
    }

    fn reverse(
        &self,
        loss: &DiffArray,
        keep: &[usize],
        mut on_param: impl FnMut(u64, ParamId, &Matrix),
    ) -> Result<HashMap<usize, Matrix>> {
        if loss.id >= self.nodes.len() {
            return Err(Error::InvalidBackward("an array from another tape"));
        }
        if loss.shape() != (1, 1) {
            return Err(Error::InvalidBackward("a non-scalar array"));
        }
        let mut kept = HashMap::new();
        if !self.nodes[loss.id].tracked {
            return Ok(kept);
        }
        let mut adj: Vec<Option<Matrix>> = Vec::new();
        adj.resize_with(loss.id + 1, || None);
        adj[loss.id] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.id).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if keep.contains(&i) {
                kept.insert(i, g.clone());
            }
            match &node.op {
                Op::Leaf | Op::Variable => {}
                Op::Param(key, id) => on_param(*key, *id, &g),
                Op::Affine { x, w, b, act } => {
                    self.affine_backward(&mut adj, &node.value, g, *x, *w, *b, *act)
                }
                Op::Unary { x, f } => {
                    let xv = &self.nodes[*x].value;
                    let mut d = g;
                    for ((gv, &xi), &yi) in d
                        .as_mut_slice()
                        .iter_mut()
                        .zip(xv.as_slice())
                        .zip(node.value.as_slice())
                    {
                        *gv *= f.derivative(xi, yi);
                    }
                    self.accumulate(&mut adj, *x, d);
                }
                Op::Binary { a, b, f } => self.binary_backward(&mut adj, g, *a, *b, *f),
                Op::Scale { x, factor } => {
                    let mut d = g;
                    d.scale_in_place(*factor);
                    self.accumulate(&mut adj, *x, d);
                }
                Op::AddScalar { x } => self.accumulate(&mut adj, *x, g),
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.cols();
                        if self.nodes[p].tracked {
                            let d = Matrix::from_fn(g.rows(), w, |r, c| g.get(r, offset + c));
                            self.accumulate(&mut adj, p, d);
                        }
                        offset += w;
                    }
                }
                Op::Columns { x, start } => {
                    let (r, c) = self.nodes[*x].value.shape();
                    let mut d = Matrix::zeros(r, c);
                    for i in 0..r {
                        for j in 0..g.cols() {
                            d.set(i, start + j, g.get(i, j));
                        }
                    }
                    self.accumulate(&mut adj, *x, d);
                }
                Op::Tame { x, dt } => {
                    let xv = &self.nodes[*x].value;
                    let s = dt.sqrt();
                    let c = xv.cols();
                    let mut d = g;
                    for (drow, xrow) in d
                        .as_mut_slice()
                        .chunks_exact_mut(c)
                        .zip(xv.as_slice().chunks_exact(c))
                    {
                        let n = row_norm(xrow);
                        let den = 1.0 + n * s;
                        if n == 0.0 {
                            continue;
                        }
                        let xg: f64 = xrow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                        let k = xg * s / (n * den * den);
                        for (dv, &xi) in drow.iter_mut().zip(xrow) {
                            *dv = *dv / den - k * xi;
                        }
                    }
                    self.accumulate(&mut adj, *x, d);
                }
                Op::Mean { x } => {
                    let (r, c) = self.nodes[*x].value.shape();
                    let inv = 1.0 / r as f64;
                    let d = Matrix::from_fn(r, c, |_, j| g.get(0, j) * inv);
                    self.accumulate(&mut adj, *x, d);
                }
                Op::Variance { x, mean } => {
                    let xv = &self.nodes[*x].value;
                    let (r, c) = xv.shape();
                    let k = 2.0 / (r as f64 - 1.0);
                    let d = Matrix::from_fn(r, c, |i, j| k * (xv.get(i, j) - mean.get(0, j)) * g.get(0, j));
                    self.accumulate(&mut adj, *x, d);
                }
                Op::Sum { x } => {
                    let (r, c) = self.nodes[*x].value.shape();
                    self.accumulate(&mut adj, *x, Matrix::filled(r, c, g.get(0, 0)));
                }
                Op::RunningMax { xs, arg } => {
                    let mut parts: HashMap<usize, Matrix> = HashMap::new();
                    for (e, (&k, &gv)) in arg.iter().zip(g.as_slice()).enumerate() {
                        let p = xs[k as usize];
                        if !self.nodes[p].tracked {
                            continue;
                        }
                        parts
                            .entry(k as usize)
                            .or_insert_with(|| Matrix::zeros(g.rows(), g.cols()))
                            .as_mut_slice()[e] += gv;
                    }
                    let mut order: Vec<usize> = parts.keys().copied().collect();
                    order.sort_unstable();
                    for k in order {
                        let d = parts.remove(&k).unwrap();
                        self.accumulate(&mut adj, xs[k], d);
                    }
                }
            }
        }
        Ok(kept)
    }

    fn accumulate(&self, adj: &mut [Option<Matrix>], p: usize, d: Matrix) {
        if !self.nodes[p].tracked {
            return;
        }
        match &mut adj[p] {
            Some(a) => a.add_assign(&d),
            slot @ None => *slot = Some(d),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn affine_backward(
        &self,
        adj: &mut [Option<Matrix>],
        out: &Matrix,
        mut g: Matrix,
        x: usize,
        w: usize,
        b: usize,
        act: Activation,
    ) {
        if act == Activation::Relu {
            for (gv, &y) in g.as_mut_slice().iter_mut().zip(out.as_slice()) {
                if y <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        let xv = &self.nodes[x].value;
        let wv = &self.nodes[w].value;
        let (n, i) = xv.shape();
        let o = wv.cols();
        if self.nodes[x].tracked {
            let mut dx = Matrix::zeros(n, i);
            gemm(n, o, i, 1.0, g.as_slice(), false, wv.as_slice(), true, 0.0, dx.as_mut_slice());
            self.accumulate(adj, x, dx);
        }
        if self.nodes[w].tracked {
            let mut dw = Matrix::zeros(i, o);
            gemm(i, n, o, 1.0, xv.as_slice(), true, g.as_slice(), false, 0.0, dw.as_mut_slice());
            self.accumulate(adj, w, dw);
        }
        if self.nodes[b].tracked {
            self.accumulate(adj, b, Matrix::row(g.column_sums()));
        }
    }

    fn binary_backward(&self, adj: &mut [Option<Matrix>], g: Matrix, a: usize, b: usize, f: Binary) {
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        let (r, c) = g.shape();
        let same = av.shape() == (r, c) && bv.shape() == (r, c);
        let pick = |m: &Matrix, i: usize, j: usize| if same { m.get(i, j) } else { bget(m, i, j) };
        if self.nodes[a].tracked {
            let da = match f {
                Binary::Add | Binary::Sub => g.clone(),
                Binary::Mul => Matrix::from_fn(r, c, |i, j| g.get(i, j) * pick(bv, i, j)),
                Binary::Div => Matrix::from_fn(r, c, |i, j| g.get(i, j) / pick(bv, i, j)),
            };
            self.accumulate(adj, a, reduce_to(da, av.shape()));
        }
        if self.nodes[b].tracked {
            let db = match f {
                Binary::Add => g,
                Binary::Sub => g.map(|v| -v),
                Binary::Mul => Matrix::from_fn(r, c, |i, j| g.get(i, j) * pick(av, i, j)),
                Binary::Div => Matrix::from_fn(r, c, |i, j| {
                    let bb = pick(bv, i, j);
                    -g.get(i, j) * pick(av, i, j) / (bb * bb)
                }),
            };
            self.accumulate(adj, b, reduce_to(db, bv.shape()));
        }
    }
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(g: Matrix, shape: (usize, usize)) -> Matrix {
    if g.shape() == shape {
        return g;
    }
    let (r, c) = g.shape();
    let mut out = Matrix::zeros(shape.0, shape.1);
    for i in 0..r {
        for j in 0..c {
            let oi = if shape.0 == 1 { 0 } else { i };
            let oj = if shape.1 == 1 { 0 } else { j };
            let v = out.get(oi, oj) + g.get(i, j);
            out.set(oi, oj, v);
        }
    }
    out
}

impl Backend for Tape {
    type Array = DiffArray;

    fn constant(&mut self, value: Matrix) -> DiffArray {
        self.push_raw(value, Op::Leaf, false)
    }

    fn param(&mut self, store: &ParamStore, id: ParamId) -> DiffArray {
        let key = (store.key(), id);
        if let Some(a) = self.param_nodes.get(&key) {
            return *a;
        }
        let tracked = self.param_tracked(store, id);
        let op = if tracked { Op::Param(key.0, id) } else { Op::Leaf };
        let a = self.push_raw(store.value(id).clone(), op, tracked);
        self.param_nodes.insert(key, a);
        a
    }

    fn value<'a>(&'a self, x: &'a DiffArray) -> &'a Matrix {
        self.val(x)
    }

    fn affine(&mut self, x: &DiffArray, w: &DiffArray, b: &DiffArray, act: Activation) -> Result<DiffArray> {
        let v = affine_forward(self.val(x), self.val(w), self.val(b), act)?;
        Ok(self.push(
            v,
            Op::Affine {
                x: x.id,
                w: w.id,
                b: b.id,
                act,
            },
            &[x.id, w.id, b.id],
        ))
    }

    fn unary(&mut self, x: &DiffArray, f: Unary) -> Result<DiffArray> {
        let v = unary_forward(self.val(x), f)?;
        Ok(self.push(v, Op::Unary { x: x.id, f }, &[x.id]))
    }

    fn binary(&mut self, a: &DiffArray, b: &DiffArray, f: Binary) -> Result<DiffArray> {
        broadcast_shape(a.shape(), b.shape(), f.name())?;
        let v = binary_forward(self.val(a), self.val(b), f)?;
        Ok(self.push(v, Op::Binary { a: a.id, b: b.id, f }, &[a.id, b.id]))
    }

    fn scale(&mut self, x: &DiffArray, factor: f64) -> Result<DiffArray> {
        let v = check_finite(self.val(x).map(|e| e * factor), "scale")?;
        Ok(self.push(v, Op::Scale { x: x.id, factor }, &[x.id]))
    }

    fn add_scalar(&mut self, x: &DiffArray, c: f64) -> Result<DiffArray> {
        let v = check_finite(self.val(x).map(|e| e + c), "add_scalar")?;
        Ok(self.push(v, Op::AddScalar { x: x.id }, &[x.id]))
    }

    fn concat_cols(&mut self, xs: &[DiffArray]) -> Result<DiffArray> {
        let vals: Vec<&Matrix> = xs.iter().map(|x| self.val(x)).collect();
        let v = concat_forward(&vals)?;
        let ids: Vec<usize> = xs.iter().map(|x| x.id).collect();
        Ok(self.push(v, Op::Concat(ids.clone()), &ids))
    }

    fn columns(&mut self, x: &DiffArray, start: usize, end: usize) -> Result<DiffArray> {
        let v = columns_forward(self.val(x), start, end)?;
        Ok(self.push(v, Op::Columns { x: x.id, start }, &[x.id]))
    }

    fn tame(&mut self, x: &DiffArray, dt: f64) -> Result<DiffArray> {
        let v = tame_forward(self.val(x), dt)?;
        Ok(self.push(v, Op::Tame { x: x.id, dt }, &[x.id]))
    }

    fn mean(&mut self, x: &DiffArray) -> Result<DiffArray> {
        let v = mean_forward(self.val(x))?;
        Ok(self.push(v, Op::Mean { x: x.id }, &[x.id]))
    }

    fn sample_variance(&mut self, x: &DiffArray) -> Result<DiffArray> {
        let (v, mean) = variance_forward(self.val(x))?;
        Ok(self.push(v, Op::Variance { x: x.id, mean }, &[x.id]))
    }

    fn sum(&mut self, x: &DiffArray) -> Result<DiffArray> {
        let v = sum_forward(self.val(x))?;
        Ok(self.push(v, Op::Sum { x: x.id }, &[x.id]))
    }

    fn running_max(&mut self, xs: &[DiffArray]) -> Result<DiffArray> {
        let vals: Vec<&Matrix> = xs.iter().map(|x| self.val(x)).collect();
        let (v, arg) = running_max_forward(&vals)?;
        let ids: Vec<usize> = xs.iter().map(|x| x.id).collect();
        Ok(self.push(v, Op::RunningMax { xs: ids.clone(), arg }, &ids))
    }

    fn detach(&mut self, x: &DiffArray) -> DiffArray {
        if !self.nodes[x.id].tracked {
            return *x;
        }
        let v = self.val(x).clone();
        self.push_raw(v, Op::Leaf, false)
    }
}

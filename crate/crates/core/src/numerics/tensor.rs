//! Dense `f64` tensors with a dynamically recorded reverse-mode graph.
//!
//! Every operation returns a new [`Tensor`]. When at least one input tracks
//! gradients the result records a closure that maps the output gradient to
//! the gradients of its parents; [`Tensor::backward`] replays those closures in
//! reverse topological order and accumulates into leaf tensors.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::gemm::{gemm, Layout};
use super::{Result, TensorError};

type GradFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    grad_fn: Option<GradFn>,
}

/// Reference-counted handle to a tensor node. Cloning is cheap and shares the
/// node, including its accumulated gradient.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &self.0.data)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits `shape` around `axis` into (outer, dim, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out_shape`, the flat index into a tensor of
/// `in_shape` broadcast against it.
fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - in_shape.len();
    let in_strides = strides(in_shape);
    let mut eff = vec![0usize; rank];
    for i in 0..in_shape.len() {
        if in_shape[i] != 1 {
            eff[i + pad] = in_strides[i];
        }
    }
    let total = numel(out_shape);
    if rank == 0 || total == 0 {
        return vec![0; total];
    }
    let (inner, step) = (out_shape[rank - 1], eff[rank - 1]);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank - 1];
    let mut off = 0usize;
    for _ in 0..total / inner {
        map.extend((0..inner).map(|j| off + j * step));
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn reduce_to(grad: &[f64], map: &[usize], in_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; in_len];
    for (g, &j) in grad.iter().zip(map) {
        out[j] += g;
    }
    out
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

impl Tensor {
    fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        Tensor(Rc::new(Node {
            data,
            shape,
            requires_grad,
            grad: RefCell::new(None),
            parents: Vec::new(),
            grad_fn: None,
        }))
    }

    fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        grad_fn: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Tensor {
        debug_assert_eq!(data.len(), numel(&shape));
        if parents.iter().any(Tensor::requires_grad) {
            Tensor(Rc::new(Node {
                data,
                shape,
                requires_grad: true,
                grad: RefCell::new(None),
                parents,
                grad_fn: Some(Box::new(grad_fn)),
            }))
        } else {
            Tensor::leaf(data, shape, false)
        }
    }

    /// A constant tensor. Fails when `data` does not fill `shape`.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if data.len() != numel(shape) {
            return Err(TensorError::invalid("new", format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(Tensor::leaf(data, shape.to_vec(), false))
    }

    /// A gradient-tracking leaf (a trainable parameter or a checked input).
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(data, shape).map(|t| t.with_grad(true))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::leaf(vec![0.0; numel(shape)], shape.to_vec(), false)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::leaf(vec![1.0; numel(shape)], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::leaf(vec![value; numel(shape)], shape.to_vec(), false)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::leaf(vec![value], Vec::new(), false)
    }

    pub fn eye(n: usize) -> Tensor {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::leaf(data, vec![n, n], false)
    }

    /// Returns a fresh leaf sharing this tensor's values, with gradient
    /// tracking set as requested. The graph behind `self` is not retained.
    pub fn with_grad(&self, requires_grad: bool) -> Tensor {
        Tensor::leaf(self.0.data.clone(), self.0.shape.clone(), requires_grad)
    }

    /// A constant copy cut from the graph.
    pub fn detach(&self) -> Tensor {
        self.with_grad(false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// True when `self` and `other` are the same graph node.
    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    // ---------------------------------------------------------------------
    // backward

    /// Populates gradients of every gradient-tracking leaf reachable from this
    /// scalar. Gradients accumulate across calls until [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        // Iterative post-order DFS.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashMap<*const Node, ()> = HashMap::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&t.0);
            if expanded {
                order.push(t);
                continue;
            }
            if visited.insert(key, ()).is_some() {
                continue;
            }
            stack.push((t.clone(), true));
            for p in &t.0.parents {
                if p.requires_grad() && !visited.contains_key(&Rc::as_ptr(&p.0)) {
                    stack.push((p.clone(), false));
                }
            }
        }

        let mut grads: HashMap<*const Node, Vec<f64>> = HashMap::new();
        grads.insert(Rc::as_ptr(&self.0), vec![1.0]);
        for t in order.iter().rev() {
            let key = Rc::as_ptr(&t.0);
            let Some(g) = grads.remove(&key) else { continue };
            match &t.0.grad_fn {
                None => {
                    let mut slot = t.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(f) => {
                    let pgrads = f(&g);
                    for (p, pg) in t.0.parents.iter().zip(pgrads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        grads
                            .entry(Rc::as_ptr(&p.0))
                            .and_modify(|acc| acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b))
                            .or_insert(pg);
                    }
                }
            }
        }
        Ok(())
    }

    // ---------------------------------------------------------------------
    // elementwise

    fn map_unary(&self, f: impl Fn(f64) -> (f64, f64)) -> Tensor {
        let (vals, derivs): (Vec<f64>, Vec<f64>) = self.data().iter().map(|&x| f(x)).unzip();
        let tracked = self.requires_grad();
        Tensor::from_op(vals, self.shape().to_vec(), vec![self.clone()], move |g| {
            if !tracked {
                return vec![None];
            }
            vec![Some(g.iter().zip(&derivs).map(|(a, b)| a * b).collect())]
        })
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|x| x * c).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |g| {
            vec![Some(g.iter().map(|x| x * c).collect())]
        })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|x| x + c).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], |g| vec![Some(g.to_vec())])
    }

    pub fn exp(&self) -> Tensor {
        self.map_unary(|x| {
            let e = x.exp();
            (e, e)
        })
    }

    pub fn ln(&self) -> Tensor {
        self.map_unary(|x| (x.ln(), 1.0 / x))
    }

    pub fn square(&self) -> Tensor {
        self.map_unary(|x| (x * x, 2.0 * x))
    }

    pub fn tanh(&self) -> Tensor {
        self.map_unary(|x| {
            let t = x.tanh();
            (t, 1.0 - t * t)
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        self.map_unary(gelu_parts)
    }

    pub fn silu(&self) -> Tensor {
        self.map_unary(|x| {
            let s = 1.0 / (1.0 + (-x).exp());
            (x * s, s * (1.0 + x * (1.0 - s)))
        })
    }

    fn binary(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        // partial derivatives (d/da, d/db) at (a, b)
        df: impl Fn(f64, f64) -> (f64, f64) + 'static,
    ) -> Result<Tensor> {
        let (a, b) = (self.clone(), other.clone());
        if a.shape() == b.shape() {
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            let (pa, pb) = (a.clone(), b.clone());
            return Ok(Tensor::from_op(data, a.shape().to_vec(), vec![a, b], move |g| {
                let mut ga = if pa.requires_grad() { Some(Vec::with_capacity(g.len())) } else { None };
                let mut gb = if pb.requires_grad() { Some(Vec::with_capacity(g.len())) } else { None };
                for ((&gi, &x), &y) in g.iter().zip(pa.data()).zip(pb.data()) {
                    let (da, db) = df(x, y);
                    if let Some(v) = ga.as_mut() {
                        v.push(gi * da);
                    }
                    if let Some(v) = gb.as_mut() {
                        v.push(gi * db);
                    }
                }
                vec![ga, gb]
            }));
        }
        let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| TensorError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })?;
        let ma = broadcast_map(&out_shape, a.shape());
        let mb = broadcast_map(&out_shape, b.shape());
        let data = ma.iter().zip(&mb).map(|(&i, &j)| f(a.data()[i], b.data()[j])).collect();
        let (pa, pb) = (a.clone(), b.clone());
        Ok(Tensor::from_op(data, out_shape, vec![a, b], move |g| {
            let mut ga = pa.requires_grad().then(|| vec![0.0; pa.numel()]);
            let mut gb = pb.requires_grad().then(|| vec![0.0; pb.numel()]);
            for k in 0..g.len() {
                let (i, j) = (ma[k], mb[k]);
                let (da, db) = df(pa.data()[i], pb.data()[j]);
                if let Some(v) = ga.as_mut() {
                    v[i] += g[k] * da;
                }
                if let Some(v) = gb.as_mut() {
                    v[j] += g[k] * db;
                }
            }
            vec![ga, gb]
        }))
    }

    /// Elementwise sum with trailing-dimension broadcasting.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        // Linear op: gradients are reductions of g, no per-element closures needed.
        let out_shape = broadcast_shape(self.shape(), other.shape()).ok_or_else(|| TensorError::Shape {
            op: "add",
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        })?;
        if self.shape() == other.shape() {
            let data = self.data().iter().zip(other.data()).map(|(x, y)| x + y).collect();
            return Ok(Tensor::from_op(data, out_shape, vec![self.clone(), other.clone()], |g| {
                vec![Some(g.to_vec()), Some(g.to_vec())]
            }));
        }
        let ma = broadcast_map(&out_shape, self.shape());
        let mb = broadcast_map(&out_shape, other.shape());
        let data = ma.iter().zip(&mb).map(|(&i, &j)| self.data()[i] + other.data()[j]).collect();
        let (la, lb) = (self.numel(), other.numel());
        Ok(Tensor::from_op(data, out_shape, vec![self.clone(), other.clone()], move |g| {
            vec![Some(reduce_to(g, &ma, la)), Some(reduce_to(g, &mb, lb))]
        }))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |x, y| x - y, |_, _| (1.0, -1.0))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |x, y| x * y, |x, y| (y, x))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "div", |x, y| x / y, |x, y| (1.0 / y, -x / (y * y)))
    }

    // ---------------------------------------------------------------------
    // shape manipulation

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(TensorError::Shape { op: "reshape", lhs: self.shape().to_vec(), rhs: shape.to_vec() });
        }
        Ok(Tensor::from_op(self.to_vec(), shape.to_vec(), vec![self.clone()], |g| vec![Some(g.to_vec())]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::invalid("permute", format!("{perm:?} for rank {rank}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let in_strides = strides(self.shape());
        let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let total = self.numel();
        // src[k] = flat input index of output element k
        let mut src = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..total {
            src.push(off);
            for d in (0..rank).rev() {
                idx[d] += 1;
                off += eff[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                off -= eff[d] * idx[d];
                idx[d] = 0;
            }
        }
        let data = src.iter().map(|&i| self.data()[i]).collect();
        Ok(Tensor::from_op(data, out_shape, vec![self.clone()], move |g| {
            let mut out = vec![0.0; g.len()];
            for (k, &i) in src.iter().enumerate() {
                out[i] = g[k];
            }
            vec![Some(out)]
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(TensorError::invalid("transpose", format!("rank {r}")));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        if axis >= first.rank() {
            return Err(TensorError::invalid("concat", format!("axis {axis} for rank {}", first.rank())));
        }
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::Shape { op: "concat", lhs: first.shape().to_vec(), rhs: p.shape().to_vec() });
            }
        }
        let (outer, _, inner) = axis_extents(first.shape(), axis);
        let dims: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total_dim: usize = dims.iter().sum();
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total_dim;
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for (p, &d) in parts.iter().zip(&dims) {
                data.extend_from_slice(&p.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let tracked: Vec<bool> = parts.iter().map(Tensor::requires_grad).collect();
        Ok(Tensor::from_op(data, out_shape, parts.to_vec(), move |g| {
            let mut out: Vec<Option<Vec<f64>>> =
                dims.iter().zip(&tracked).map(|(&d, &t)| t.then(|| Vec::with_capacity(outer * d * inner))).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (slot, &d) in out.iter_mut().zip(&dims) {
                    if let Some(v) = slot.as_mut() {
                        v.extend_from_slice(&g[off..off + d * inner]);
                    }
                    off += d * inner;
                }
            }
            out
        }))
    }

    /// The sub-tensor `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || start + len > self.shape()[axis] {
            return Err(TensorError::invalid(
                "narrow",
                format!("axis {axis} range {start}..{} of shape {:?}", start + len, self.shape()),
            ));
        }
        let (outer, dim, inner) = axis_extents(self.shape(), axis);
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let n = self.numel();
        Ok(Tensor::from_op(data, out_shape, vec![self.clone()], move |g| {
            let mut out = vec![0.0; n];
            for o in 0..outer {
                let base = (o * dim + start) * inner;
                out[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(out)]
        }))
    }

    /// Gathers rows (slices along axis 0) in the given order.
    pub fn index_select(&self, rows: &[usize]) -> Result<Tensor> {
        if self.rank() == 0 {
            return Err(TensorError::invalid("index_select", "rank 0"));
        }
        let n = self.shape()[0];
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(TensorError::invalid("index_select", format!("row {bad} of {n}")));
        }
        let width = self.numel() / n.max(1);
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            data.extend_from_slice(&self.data()[r * width..(r + 1) * width]);
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[0] = rows.len();
        let rows = rows.to_vec();
        let total = self.numel();
        Ok(Tensor::from_op(data, out_shape, vec![self.clone()], move |g| {
            let mut out = vec![0.0; total];
            for (k, &r) in rows.iter().enumerate() {
                for (o, v) in out[r * width..(r + 1) * width].iter_mut().zip(&g[k * width..(k + 1) * width]) {
                    *o += v;
                }
            }
            vec![Some(out)]
        }))
    }

    /// For a `[rows, cols]` tensor, picks `self[i, cols[i]]` into a `[rows]` vector.
    pub fn pick(&self, cols: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 || cols.len() != self.shape()[0] {
            return Err(TensorError::invalid("pick", format!("{} indices for shape {:?}", cols.len(), self.shape())));
        }
        let m = self.shape()[1];
        if let Some(&bad) = cols.iter().find(|&&c| c >= m) {
            return Err(TensorError::invalid("pick", format!("column {bad} of {m}")));
        }
        let data = cols.iter().enumerate().map(|(i, &c)| self.data()[i * m + c]).collect();
        let cols = cols.to_vec();
        let total = self.numel();
        Ok(Tensor::from_op(data, vec![cols.len()], vec![self.clone()], move |g| {
            let mut out = vec![0.0; total];
            for (i, &c) in cols.iter().enumerate() {
                out[i * m + c] = g[i];
            }
            vec![Some(out)]
        }))
    }

    /// Forward value `hard`, backward identity into `self`.
    pub fn straight_through(&self, hard: Vec<f64>) -> Result<Tensor> {
        if hard.len() != self.numel() {
            return Err(TensorError::invalid(
                "straight_through",
                format!("{} hard values for {} soft", hard.len(), self.numel()),
            ));
        }
        Ok(Tensor::from_op(hard, self.shape().to_vec(), vec![self.clone()], |g| vec![Some(g.to_vec())]))
    }

    // ---------------------------------------------------------------------
    // reductions

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![s], Vec::new(), vec![self.clone()], move |g| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let s = self.data().iter().sum::<f64>() / n as f64;
        Tensor::from_op(vec![s], Vec::new(), vec![self.clone()], move |g| vec![Some(vec![g[0] / n as f64; n])])
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(TensorError::invalid("sum_axis", format!("axis {axis} for {:?}", self.shape())));
        }
        let (outer, dim, inner) = axis_extents(self.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &self.data()[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, v) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = self.shape().to_vec();
        out_shape.remove(axis);
        Ok(Tensor::from_op(data, out_shape, vec![self.clone()], move |g| {
            let mut out = Vec::with_capacity(outer * dim * inner);
            for o in 0..outer {
                for _ in 0..dim {
                    out.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(out)]
        }))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let dim = *self
            .shape()
            .get(axis)
            .ok_or_else(|| TensorError::invalid("mean_axis", format!("axis {axis} for {:?}", self.shape())))?;
        Ok(self.sum_axis(axis)?.scale(1.0 / dim as f64))
    }

    // ---------------------------------------------------------------------
    // normalizers

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(TensorError::invalid("softmax", format!("axis {axis} for {:?}", self.shape())));
        }
        let (outer, dim, inner) = axis_extents(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |d: usize| (o * dim + d) * inner + i;
                let max = (0..dim).map(|d| x[at(d)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for d in 0..dim {
                    let e = (x[at(d)] - max).exp();
                    y[at(d)] = e;
                    total += e;
                }
                for d in 0..dim {
                    y[at(d)] /= total;
                }
            }
        }
        let yc = y.clone();
        Ok(Tensor::from_op(y, self.shape().to_vec(), vec![self.clone()], move |g| {
            let mut out = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |d: usize| (o * dim + d) * inner + i;
                    let dot: f64 = (0..dim).map(|d| g[at(d)] * yc[at(d)]).sum();
                    for d in 0..dim {
                        out[at(d)] = yc[at(d)] * (g[at(d)] - dot);
                    }
                }
            }
            vec![Some(out)]
        }))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(TensorError::invalid("log_softmax", format!("axis {axis} for {:?}", self.shape())));
        }
        let (outer, dim, inner) = axis_extents(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |d: usize| (o * dim + d) * inner + i;
                let max = (0..dim).map(|d| x[at(d)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..dim).map(|d| (x[at(d)] - max).exp()).sum::<f64>().ln();
                for d in 0..dim {
                    y[at(d)] = x[at(d)] - lse;
                }
            }
        }
        let yc = y.clone();
        Ok(Tensor::from_op(y, self.shape().to_vec(), vec![self.clone()], move |g| {
            let mut out = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |d: usize| (o * dim + d) * inner + i;
                    let gs: f64 = (0..dim).map(|d| g[at(d)]).sum();
                    for d in 0..dim {
                        out[at(d)] = g[at(d)] - yc[at(d)].exp() * gs;
                    }
                }
            }
            vec![Some(out)]
        }))
    }

    /// Normalizes to zero mean and unit (biased) variance along `axis`.
    /// No affine parameters.
    pub fn layernorm(&self, axis: usize, eps: f64) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(TensorError::invalid("layernorm", format!("axis {axis} for {:?}", self.shape())));
        }
        let (outer, dim, inner) = axis_extents(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |d: usize| (o * dim + d) * inner + i;
                let mean = (0..dim).map(|d| x[at(d)]).sum::<f64>() / dim as f64;
                let var = (0..dim).map(|d| (x[at(d)] - mean).powi(2)).sum::<f64>() / dim as f64;
                let s = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + i] = s;
                for d in 0..dim {
                    y[at(d)] = (x[at(d)] - mean) * s;
                }
            }
        }
        let yc = y.clone();
        Ok(Tensor::from_op(y, self.shape().to_vec(), vec![self.clone()], move |g| {
            let mut out = vec![0.0; g.len()];
            let n = dim as f64;
            for o in 0..outer {
                for i in 0..inner {
                    let at = |d: usize| (o * dim + d) * inner + i;
                    let gm = (0..dim).map(|d| g[at(d)]).sum::<f64>() / n;
                    let gy = (0..dim).map(|d| g[at(d)] * yc[at(d)]).sum::<f64>() / n;
                    let s = inv_std[o * inner + i];
                    for d in 0..dim {
                        out[at(d)] = s * (g[at(d)] - gm - yc[at(d)] * gy);
                    }
                }
            }
            vec![Some(out)]
        }))
    }

    // ---------------------------------------------------------------------
    // matrix products

    /// Matrix product.
    ///
    /// * `[m,k] x [k,n] -> [m,n]`
    /// * `[b,m,k] x [b,k,n] -> [b,m,n]` (batched)
    /// * `[.., k] x [k,n] -> [.., n]` (leading axes flattened)
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.product(other, false)
    }

    /// `self x other^T` over the last two axes, without materializing the transpose.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        self.product(other, true)
    }

    fn product(&self, other: &Tensor, rhs_t: bool) -> Result<Tensor> {
        let err = || TensorError::Shape {
            op: if rhs_t { "matmul_t" } else { "matmul" },
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        };
        let (a_shape, b_shape) = (self.shape(), other.shape());
        if a_shape.len() < 2 || b_shape.len() < 2 {
            return Err(err());
        }
        let (batch, m, k, n, out_shape) = if b_shape.len() == 2 {
            let k = *a_shape.last().unwrap();
            let (bk, bn) = if rhs_t { (b_shape[1], b_shape[0]) } else { (b_shape[0], b_shape[1]) };
            if k != bk {
                return Err(err());
            }
            let m = self.numel() / k;
            let mut out = a_shape.to_vec();
            *out.last_mut().unwrap() = bn;
            (1, m, k, bn, out)
        } else if a_shape.len() == 3 && b_shape.len() == 3 && a_shape[0] == b_shape[0] {
            let (bk, bn) = if rhs_t { (b_shape[2], b_shape[1]) } else { (b_shape[1], b_shape[2]) };
            if a_shape[2] != bk {
                return Err(err());
            }
            (a_shape[0], a_shape[1], a_shape[2], bn, vec![a_shape[0], a_shape[1], bn])
        } else {
            return Err(err());
        };
        let b_layout = if rhs_t { Layout::Trans } else { Layout::Normal };
        let mut c = vec![0.0; batch * m * n];
        for bi in 0..batch {
            gemm(
                m,
                k,
                n,
                &self.data()[bi * m * k..(bi + 1) * m * k],
                Layout::Normal,
                &other.data()[bi * k * n..(bi + 1) * k * n],
                b_layout,
                &mut c[bi * m * n..(bi + 1) * m * n],
            );
        }
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(c, out_shape, vec![self.clone(), other.clone()], move |g| {
            let ga = a.requires_grad().then(|| {
                // dA = dC · B^T   (rhs_t: dA = dC · B)
                let mut out = vec![0.0; a.numel()];
                let layout = if rhs_t { Layout::Normal } else { Layout::Trans };
                for bi in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        &g[bi * m * n..(bi + 1) * m * n],
                        Layout::Normal,
                        &b.data()[bi * k * n..(bi + 1) * k * n],
                        layout,
                        &mut out[bi * m * k..(bi + 1) * m * k],
                    );
                }
                out
            });
            let gb = b.requires_grad().then(|| {
                let mut out = vec![0.0; b.numel()];
                for bi in 0..batch {
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    let asl = &a.data()[bi * m * k..(bi + 1) * m * k];
                    let dst = &mut out[bi * k * n..(bi + 1) * k * n];
                    if rhs_t {
                        // B is [n,k]: dB = dC^T · A
                        gemm(n, m, k, gs, Layout::Trans, asl, Layout::Normal, dst);
                    } else {
                        // dB = A^T · dC
                        gemm(k, m, n, asl, Layout::Trans, gs, Layout::Normal, dst);
                    }
                }
                out
            });
            vec![ga, gb]
        }))
    }
}

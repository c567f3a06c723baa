use std::cell::RefCell;
use std::rc::Rc;

use super::{sigmoid, silu, softplus, Tensor};
use crate::error::{Error, Result};

/// Backward rule: receives the output gradient and, per parent, whether a
/// gradient is wanted. Returns one entry per parent.
type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    shape: Vec<usize>,
    parents: Vec<Option<usize>>,
    // None marks a leaf.
    backward: Option<BackwardFn>,
}

/// Ordered record of differentiable operations.
///
/// Nodes are appended as operations execute, so every node's parents have
/// smaller ids and a reverse sweep over ids is a valid backward order.
/// A tape built with [`Tape::inference`] records nothing; values computed
/// through it are freed as soon as their `Var`s drop.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// A value computed on a [`Tape`].
#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    value: Rc<Tensor>,
    id: Option<usize>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a differentiable value; `None` for constants.
    pub fn get(&self, v: &Var<'_>) -> Option<&Tensor> {
        v.id.and_then(|i| self.grads[i].as_ref())
    }

    pub fn take(&mut self, v: &Var<'_>) -> Option<Tensor> {
        v.id.and_then(|i| self.grads[i].take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    pub fn inference() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that requires a gradient.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        let id = if self.recording {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                shape: t.shape().to_vec(),
                parents: Vec::new(),
                backward: None,
            });
            Some(nodes.len() - 1)
        } else {
            None
        };
        Var {
            tape: self,
            value: Rc::new(t),
            id,
        }
    }

    pub fn constant(&self, t: Tensor) -> Var<'_> {
        Var {
            tape: self,
            value: Rc::new(t),
            id: None,
        }
    }

    /// Record an operation with a caller-supplied backward rule.
    ///
    /// If no input is differentiable the result is a constant and nothing
    /// is recorded.
    pub fn custom<'t, F>(&'t self, inputs: &[&Var<'t>], value: Tensor, backward: F) -> Var<'t>
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let parents: Vec<Option<usize>> = inputs.iter().map(|v| v.id).collect();
        if !self.recording || parents.iter().all(Option::is_none) {
            return self.constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape: value.shape().to_vec(),
            parents,
            backward: Some(Box::new(backward)),
        });
        let id = nodes.len() - 1;
        Var {
            tape: self,
            value: Rc::new(value),
            id: Some(id),
        }
    }

    /// Reverse sweep from a scalar loss.
    ///
    /// Leaves the loss does not reach still receive a zero gradient.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients> {
        if loss.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        let root = loss
            .id
            .ok_or_else(|| Error::contract("loss does not depend on any differentiable leaf"))?;
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(loss.value.shape(), 1.0));
        for i in (0..=root).rev() {
            let node = &nodes[i];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let wanted: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let parent_grads = bw(&g, &wanted);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                if let (Some(p), Some(pg)) = (p, pg) {
                    debug_assert_eq!(pg.shape(), nodes[*p].shape.as_slice());
                    match &mut grads[*p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
        }
        for (i, node) in nodes.iter().enumerate() {
            if node.backward.is_none() && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(&node.shape));
            }
        }
        Ok(Gradients { grads })
    }
}

#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    // The named side repeats with the given period over the other.
    Lhs(usize),
    Rhs(usize),
}

fn strip_leading_ones(s: &[usize]) -> &[usize] {
    let k = s.iter().take_while(|&&d| d == 1).count().min(s.len() - 1);
    &s[k..]
}

fn broadcast(a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    let fits = |big: &[usize], small: &[usize]| {
        let small = strip_leading_ones(small);
        small.len() <= big.len() && big.ends_with(small) || small.iter().product::<usize>() == 1
    };
    if nb <= na && fits(a, b) {
        Ok(Broadcast::Rhs(nb))
    } else if na < nb && fits(b, a) {
        Ok(Broadcast::Lhs(na))
    } else {
        Err(Error::dim(format!("cannot broadcast {a:?} with {b:?}")))
    }
}

/// Sum `g` down to a period-`n` tensor of the given shape.
fn reduce_periodic(g: &Tensor, n: usize, shape: &[usize]) -> Tensor {
    if g.len() == n {
        return g.reshape(shape).unwrap();
    }
    let mut out = vec![0.0; n];
    for (i, &v) in g.data().iter().enumerate() {
        out[i % n] += v;
    }
    Tensor::new(shape, out).unwrap()
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::contract("operands recorded on different tapes"))
        }
    }

    fn unary(
        &self,
        value: Tensor,
        bw: impl Fn(&Tensor, &Tensor) -> Tensor + 'static,
    ) -> Var<'t> {
        let x = self.value.clone();
        self.tape
            .custom(&[self], value, move |g, _| vec![Some(bw(g, &x))])
    }

    fn binary(
        &self,
        other: &Var<'t>,
        f: fn(f64, f64) -> f64,
        da: fn(f64, f64) -> f64,
        db: fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (a, b) = (self.value.clone(), other.value.clone());
        let mode = broadcast(a.shape(), b.shape())?;
        let (out_shape, n) = match mode {
            Broadcast::Lhs(_) => (b.shape().to_vec(), b.len()),
            _ => (a.shape().to_vec(), a.len()),
        };
        let (pa, pb) = match mode {
            Broadcast::Same => (n, n),
            Broadcast::Lhs(k) => (k, n),
            Broadcast::Rhs(k) => (n, k),
        };
        let (ad, bd) = (a.data(), b.data());
        let data: Vec<f64> = (0..n).map(|i| f(ad[i % pa], bd[i % pb])).collect();
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.tape.custom(&[self, other], value, move |g, want| {
            let (ad, bd, gd) = (a.data(), b.data(), g.data());
            let ga = want[0].then(|| {
                let full = Tensor::new(
                    g.shape(),
                    (0..n).map(|i| gd[i] * da(ad[i % pa], bd[i % pb])).collect(),
                )
                .unwrap();
                reduce_periodic(&full, pa, a.shape())
            });
            let gb = want[1].then(|| {
                let full = Tensor::new(
                    g.shape(),
                    (0..n).map(|i| gd[i] * db(ad[i % pa], bd[i % pb])).collect(),
                )
                .unwrap();
                reduce_periodic(&full, pb, b.shape())
            });
            vec![ga, gb]
        }))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.unary(self.value.scale(s), move |g, _| g.scale(s))
    }

    pub fn exp(&self) -> Var<'t> {
        let y = self.value.map(f64::exp);
        self.unary(y, |g, x| g.zip_map(x, |g, x| g * x.exp()))
    }

    pub fn softplus(&self) -> Var<'t> {
        let y = self.value.map(softplus);
        self.unary(y, |g, x| g.zip_map(x, |g, x| g * sigmoid(x)))
    }

    pub fn silu(&self) -> Var<'t> {
        let y = self.value.map(silu);
        self.unary(y, |g, x| {
            g.zip_map(x, |g, x| {
                let s = sigmoid(x);
                g * s * (1.0 + x * (1.0 - s))
            })
        })
    }

    pub fn square(&self) -> Var<'t> {
        let y = self.value.map(|x| x * x);
        self.unary(y, |g, x| g.zip_map(x, |g, x| 2.0 * g * x))
    }

    pub fn sum(&self) -> Var<'t> {
        let shape = self.shape().to_vec();
        let value = Tensor::scalar(self.value.sum());
        self.tape.custom(&[self], value, move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value.len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum along one axis, dropping it (a rank-1 input yields shape `[1]`).
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.value.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += x[(o * len + a) * inner + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.tape.custom(&[self], value, move |g, _| {
            let gd = g.data();
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for a in 0..len {
                    for i in 0..inner {
                        gx[(o * len + a) * inner + i] = gd[o * inner + i];
                    }
                }
            }
            vec![Some(Tensor::new(&shape, gx).unwrap())]
        }))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let len = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::dim(format!("axis {axis} out of range")))?;
        Ok(self.sum_axis(axis)?.scale(1.0 / len as f64))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let value = self.value.matmul(&other.value)?;
        let (a, b) = (self.value.clone(), other.value.clone());
        Ok(self.tape.custom(&[self, other], value, move |g, want| {
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let ga = want[0].then(|| {
                // g · bᵀ
                let (gd, bd) = (g.data(), b.data());
                let mut out = vec![0.0; m * k];
                for i in 0..m {
                    let grow = &gd[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
                Tensor::new(&[m, k], out).unwrap()
            });
            let gb = want[1].then(|| {
                // aᵀ · g
                let (ad, gd) = (a.data(), g.data());
                let mut out = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &gd[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = ad[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for (o, &gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *o += av * gv;
                        }
                    }
                }
                Tensor::new(&[k, n], out).unwrap()
            });
            vec![ga, gb]
        }))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let value = self.value.transpose()?;
        Ok(self
            .tape
            .custom(&[self], value, |g, _| vec![Some(g.transpose().unwrap())]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value.reshape(shape)?;
        let orig = self.shape().to_vec();
        Ok(self.tape.custom(&[self], value, move |g, _| {
            vec![Some(g.reshape(&orig).unwrap())]
        }))
    }

    /// Root-mean-square normalization over the last axis, scaled by `weight`.
    pub fn rmsnorm(&self, weight: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.same_tape(weight)?;
        let d = self.value.cols();
        if weight.shape() != [d] {
            return Err(Error::dim(format!(
                "rmsnorm weight {:?} for last extent {d}",
                weight.shape()
            )));
        }
        let rows = self.value.len() / d;
        let (x, w) = (self.value.clone(), weight.value.clone());
        let inv: Vec<f64> = (0..rows)
            .map(|r| {
                let row = &x.data()[r * d..(r + 1) * d];
                let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
                let denom = (ms + eps).sqrt();
                if denom > 0.0 {
                    1.0 / denom
                } else {
                    0.0
                }
            })
            .collect();
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            for j in 0..d {
                out[r * d + j] = x.data()[r * d + j] * inv[r] * w.data()[j];
            }
        }
        let value = Tensor::new(x.shape(), out)?;
        Ok(self.tape.custom(&[self, weight], value, move |g, want| {
            let (xd, wd, gd) = (x.data(), w.data(), g.data());
            let gx = want[0].then(|| {
                let mut gx = vec![0.0; xd.len()];
                for r in 0..rows {
                    let (xr, gr) = (&xd[r * d..(r + 1) * d], &gd[r * d..(r + 1) * d]);
                    let dot: f64 = (0..d).map(|j| gr[j] * wd[j] * xr[j]).sum();
                    let ir = inv[r];
                    let coef = ir * ir * ir * dot / d as f64;
                    for j in 0..d {
                        gx[r * d + j] = ir * gr[j] * wd[j] - xr[j] * coef;
                    }
                }
                Tensor::new(x.shape(), gx).unwrap()
            });
            let gw = want[1].then(|| {
                let mut gw = vec![0.0; d];
                for r in 0..rows {
                    for j in 0..d {
                        gw[j] += gd[r * d + j] * xd[r * d + j] * inv[r];
                    }
                }
                Tensor::vector(gw)
            });
            vec![gx, gw]
        }))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'t>> {
        if self.value.rank() != 2 || start + len > self.value.cols() || len == 0 {
            return Err(Error::dim(format!(
                "slice_cols {start}+{len} of {:?}",
                self.shape()
            )));
        }
        let (m, n) = (self.value.rows(), self.value.cols());
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&self.value.row(i)[start..start + len]);
        }
        let value = Tensor::new(&[m, len], out)?;
        Ok(self.tape.custom(&[self], value, move |g, _| {
            let mut gx = vec![0.0; m * n];
            for i in 0..m {
                gx[i * n + start..i * n + start + len].copy_from_slice(g.row(i));
            }
            vec![Some(Tensor::new(&[m, n], gx).unwrap())]
        }))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'t>> {
        if self.value.rank() != 2 || start + len > self.value.rows() || len == 0 {
            return Err(Error::dim(format!(
                "slice_rows {start}+{len} of {:?}",
                self.shape()
            )));
        }
        let (m, n) = (self.value.rows(), self.value.cols());
        let value = Tensor::new(
            &[len, n],
            self.value.data()[start * n..(start + len) * n].to_vec(),
        )?;
        Ok(self.tape.custom(&[self], value, move |g, _| {
            let mut gx = vec![0.0; m * n];
            gx[start * n..(start + len) * n].copy_from_slice(g.data());
            vec![Some(Tensor::new(&[m, n], gx).unwrap())]
        }))
    }

    /// Stack matrices with equal column counts vertically.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of nothing"))?;
        let n = first.value.cols();
        let mut data = Vec::new();
        let mut row_counts = Vec::with_capacity(parts.len());
        for p in parts {
            p.same_tape(first)?;
            if p.value.rank() != 2 || p.value.cols() != n {
                return Err(Error::dim(format!("concat_rows with {:?}", p.shape())));
            }
            row_counts.push(p.value.rows());
            data.extend_from_slice(p.value.data());
        }
        let total: usize = row_counts.iter().sum();
        let value = Tensor::new(&[total, n], data)?;
        let refs: Vec<&Var<'t>> = parts.iter().collect();
        Ok(first.tape.custom(&refs, value, move |g, want| {
            let mut off = 0;
            row_counts
                .iter()
                .zip(want)
                .map(|(&r, &w)| {
                    let piece = w.then(|| {
                        Tensor::new(&[r, n], g.data()[off * n..(off + r) * n].to_vec()).unwrap()
                    });
                    off += r;
                    piece
                })
                .collect()
        }))
    }

    /// Join matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of nothing"))?;
        let m = first.value.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            p.same_tape(first)?;
            if p.value.rank() != 2 || p.value.rows() != m {
                return Err(Error::dim(format!("concat_cols with {:?}", p.shape())));
            }
            widths.push(p.value.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                data.extend_from_slice(p.value.row(i));
            }
        }
        let value = Tensor::new(&[m, total], data)?;
        let refs: Vec<&Var<'t>> = parts.iter().collect();
        Ok(first.tape.custom(&refs, value, move |g, want| {
            let mut off = 0;
            widths
                .iter()
                .zip(want)
                .map(|(&w, &needed)| {
                    let piece = needed.then(|| {
                        let mut out = Vec::with_capacity(m * w);
                        for i in 0..m {
                            out.extend_from_slice(&g.row(i)[off..off + w]);
                        }
                        Tensor::new(&[m, w], out).unwrap()
                    });
                    off += w;
                    piece
                })
                .collect()
        }))
    }

    /// Softmax over the last axis of a matrix.
    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        if self.value.rank() != 2 {
            return Err(Error::dim("softmax_rows needs a matrix"));
        }
        let (m, n) = (self.value.rows(), self.value.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = self.value.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                s += e;
            }
            for j in 0..n {
                out[i * n + j] /= s;
            }
        }
        let value = Tensor::new(&[m, n], out)?;
        let y = value.clone();
        Ok(self.tape.custom(&[self], value, move |g, _| {
            let mut gx = vec![0.0; m * n];
            for i in 0..m {
                let (yr, gr) = (y.row(i), g.row(i));
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    gx[i * n + j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(Tensor::new(&[m, n], gx).unwrap())]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let g = tape.backward(&x.sum()).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares_is_twice_x() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let loss = x.mul(&x).unwrap().sum();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn mean_gradient_is_one_over_n() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let m = x.mean();
        assert_eq!(m.value().item(), 2.0);
        let g = tape.backward(&m).unwrap();
        assert!(g.get(&x).unwrap().data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn sum_axis_of_identity() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::eye(2));
        let s = x.sum_axis(0).unwrap();
        assert_eq!(s.value().data(), &[1.0, 1.0]);
        assert!(matches!(x.sum_axis(2), Err(Error::Dimension(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(&x), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_leaf_gets_zero_grad() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.leaf(Tensor::vector(vec![5.0]));
        let g = tape.backward(&x.sum()).unwrap();
        assert_eq!(g.get(&y).unwrap().data(), &[0.0]);
    }

    #[test]
    fn broadcast_bias_over_rows() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3, 2]));
        let b = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = x.add(&b).unwrap();
        assert_eq!(y.value().data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let g = tape.backward(&y.sum()).unwrap();
        assert_eq!(g.get(&b).unwrap().data(), &[3.0, 3.0]);
        let bad = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(x.add(&bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::inference();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = x.exp().sum();
        assert!(!y.requires_grad());
        assert!(tape.is_empty());
    }

    #[test]
    fn rmsnorm_of_constant_row_is_one() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 5], 3.0));
        let w = tape.leaf(Tensor::ones(&[5]));
        let y = x.rmsnorm(&w, 0.0).unwrap();
        assert!(y.value().data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let z = tape.leaf(Tensor::zeros(&[1, 5])).rmsnorm(&w, 1e-5).unwrap();
        assert!(z.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 100.0]).unwrap());
        let y = x.softmax_rows().unwrap();
        for i in 0..2 {
            assert!((y.value().row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

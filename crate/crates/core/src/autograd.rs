//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive executed on [`Var`] handles. Calling
//! [`Tape::backward`] walks the record in exact reverse order and accumulates
//! gradients additively, so a value consumed `k` times receives the sum of its
//! `k` contributions. Tapes are built fresh for every forward pass.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

type BackwardFn = Box<dyn FnOnce(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Ordered record of executed primitives.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by leaf variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` when the leaf is not on the path to the loss.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of a leaf; leaves off the path receive zeros.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.id]),
        }
    }

    /// Moves the gradient out, leaving `None` behind.
    pub fn take(&mut self, var: Var<'_>) -> Tensor {
        self.grads[var.id].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf value.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push_node(Node { value: Rc::new(value), requires_grad, parents: Vec::new(), backward: None })
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Records the result of a primitive. `backward` receives the output
    /// gradient and a mask telling which parents need a gradient; entries for
    /// parents that do not need one may be `None`.
    pub(crate) fn record<F>(&self, value: Tensor, parents: &[Var<'_>], backward: F) -> Var<'_>
    where
        F: FnOnce(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let needs: Vec<bool> = parents.iter().map(|p| self.requires_grad(p.id)).collect();
        let requires_grad = needs.iter().any(|&n| n);
        let backward: Option<BackwardFn> =
            if requires_grad { Some(Box::new(move |g: &Tensor| backward(g, &needs))) } else { None };
        self.push_node(Node {
            value: Rc::new(value),
            requires_grad,
            parents: parents.iter().map(|p| p.id).collect(),
            backward,
        })
    }

    /// Reverse sweep from a scalar loss. Consumes the recorded backward
    /// closures, so a tape can be differentiated once.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if loss.value().len() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar loss, got shape {:?}", loss.shape())));
        }
        let seed = Tensor::ones(loss.value().shape());
        let mut nodes = self.nodes.borrow_mut();
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(seed);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &mut nodes[id];
            match node.backward.take() {
                Some(bw) => {
                    let parent_grads = bw(&g);
                    for (&p, pg) in node.parents.iter().zip(parent_grads) {
                        if let Some(pg) = pg {
                            match &mut grads[p] {
                                Some(acc) => acc.add_assign(&pg),
                                slot @ None => *slot = Some(pg),
                            }
                        }
                    }
                }
                None => {
                    if node.parents.is_empty() && node.requires_grad {
                        grads[id] = Some(g);
                    }
                }
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub(crate) fn record<F>(&self, value: Tensor, parents: &[Var<'t>], backward: F) -> Var<'t>
    where
        F: FnOnce(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        self.tape.record(value, parents, backward)
    }

    fn binary(
        self,
        other: Var<'t>,
        f: impl Fn(f64, f64) -> f64,
        da: impl Fn(f64, f64) -> f64 + 'static,
        db: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, f)?;
        Ok(self.record(out, &[self, other], move |g, needs| {
            let grad = |d: &dyn Fn(f64, f64) -> f64| {
                let data =
                    g.data().iter().zip(a.data().iter().zip(b.data())).map(|(&gi, (&x, &y))| gi * d(x, y)).collect();
                Tensor::from_parts(g.shape().to_vec(), data)
            };
            vec![needs[0].then(|| grad(&da)), needs[1].then(|| grad(&db))]
        }))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.value().add(&other.value())?;
        Ok(self.record(out, &[self, other], |g, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.value().sub(&other.value())?;
        Ok(self
            .record(out, &[self, other], |g, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.scale(-1.0))]))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let out = self.value().scale(s);
        self.record(out, &[self], move |g, _| vec![Some(g.scale(s))])
    }

    /// Adds `bias` whose shape is a suffix of `self`'s shape, repeating it
    /// over the leading axes.
    pub fn add_bcast(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        let (xs, bs) = (x.shape(), b.shape());
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(dim_err!("cannot broadcast {bs:?} onto {xs:?}"));
        }
        let inner = b.len();
        let mut data = x.data().to_vec();
        for chunk in data.chunks_mut(inner) {
            for (v, &bv) in chunk.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let out = Tensor::from_parts(xs.to_vec(), data);
        let bshape = bs.to_vec();
        Ok(self.record(out, &[self, bias], move |g, needs| {
            let gb = needs[1].then(|| {
                let mut acc = vec![0.0; inner];
                for chunk in g.data().chunks(inner) {
                    for (a, &v) in acc.iter_mut().zip(chunk) {
                        *a += v;
                    }
                }
                Tensor::from_parts(bshape, acc)
            });
            vec![needs[0].then(|| g.clone()), gb]
        }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        let orig = self.shape();
        Ok(self.record(out, &[self], move |g, _| vec![Some(Tensor::from_parts(orig, g.data().to_vec()))]))
    }

    /// `out[i] = self[index[i]]`; repeated indices accumulate in backward.
    pub fn gather(self, shape: &[usize], index: Rc<Vec<usize>>) -> Result<Var<'t>> {
        let x = self.value();
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(dim_err!("gather shape {shape:?} does not match {} indices", index.len()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= x.len()) {
            return Err(dim_err!("gather index {bad} out of range for {} elements", x.len()));
        }
        let data = index.iter().map(|&i| x.data()[i]).collect();
        let out = Tensor::from_parts(shape.to_vec(), data);
        let in_shape = x.shape().to_vec();
        Ok(self.record(out, &[self], move |g, _| {
            let mut acc = Tensor::zeros(&in_shape);
            let buf = acc.data_mut();
            for (&i, &v) in index.iter().zip(g.data()) {
                buf[i] += v;
            }
            vec![Some(acc)]
        }))
    }

    /// Weighted scatter: `out[index[i]] += weight[i] * self[i]`.
    pub fn scatter_weighted(self, shape: &[usize], index: Rc<Vec<usize>>, weight: Rc<Vec<f64>>) -> Result<Var<'t>> {
        let x = self.value();
        if index.len() != x.len() || weight.len() != x.len() {
            return Err(dim_err!("scatter map length does not match input of {} elements", x.len()));
        }
        let n: usize = shape.iter().product();
        if index.iter().any(|&i| i >= n) {
            return Err(dim_err!("scatter index out of range for output shape {shape:?}"));
        }
        let mut out = vec![0.0; n];
        for ((&i, &w), &v) in index.iter().zip(weight.iter()).zip(x.data()) {
            out[i] += w * v;
        }
        let out = Tensor::from_parts(shape.to_vec(), out);
        let in_shape = x.shape().to_vec();
        Ok(self.record(out, &[self], move |g, _| {
            let data = index.iter().zip(weight.iter()).map(|(&i, &w)| w * g.data()[i]).collect();
            vec![Some(Tensor::from_parts(in_shape, data))]
        }))
    }

    pub fn concat_last(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let out = a.concat_last(&b)?;
        let (ca, cb) = (*a.shape().last().unwrap(), *b.shape().last().unwrap());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.record(out, &[self, other], move |g, needs| {
            let rows = g.len() / (ca + cb);
            let mut ga = Vec::with_capacity(rows * ca);
            let mut gb = Vec::with_capacity(rows * cb);
            for row in g.data().chunks(ca + cb) {
                ga.extend_from_slice(&row[..ca]);
                gb.extend_from_slice(&row[ca..]);
            }
            vec![needs[0].then(|| Tensor::from_parts(sa, ga)), needs[1].then(|| Tensor::from_parts(sb, gb))]
        }))
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.record(Tensor::scalar(x.sum()), &[self], move |g, _| vec![Some(Tensor::full(&shape, g.data()[0]))])
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum of `self * weights` for a constant weight tensor.
    pub fn dot_const(self, weights: &Tensor) -> Result<Var<'t>> {
        let w = self.tape.constant(weights.clone());
        Ok(self.mul(w)?.sum())
    }

    /// Mean squared difference.
    pub fn mse(self, target: Var<'t>) -> Result<Var<'t>> {
        let d = self.sub(target)?;
        Ok(d.mul(d)?.mean())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_loss_gradient_is_input() {
        let tape = Tape::new();
        let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let w = tape.param(Tensor::new(&[3], vec![0.3, 0.1, 7.0]).unwrap());
        let loss = w.dot_const(&x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(w), x);
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let w = tape.param(Tensor::scalar(3.0));
        let loss = w.mul(w).unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).data(), &[6.0]);
    }

    #[test]
    fn reuse_accumulates_contributions() {
        let tape = Tape::new();
        let w = tape.param(Tensor::scalar(2.0));
        let y = w.add(w).unwrap().add(w).unwrap();
        let grads = tape.backward(y.sum()).unwrap();
        assert_eq!(grads.wrt(w).data(), &[3.0]);
    }

    #[test]
    fn off_path_parameters_get_zero() {
        let tape = Tape::new();
        let w = tape.param(Tensor::scalar(2.0));
        let unused = tape.param(Tensor::zeros(&[2, 2]));
        let grads = tape.backward(w.scale(4.0).sum()).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.wrt(unused), Tensor::zeros(&[2, 2]));
        assert_eq!(grads.wrt(w).data(), &[4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let w = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(w), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_record_no_backward() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2]));
        let b = a.scale(2.0);
        assert!(!b.requires_grad());
    }

    #[test]
    fn gather_repeats_accumulate() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let y = x.gather(&[3], Rc::new(vec![1, 1, 0])).unwrap();
        assert_eq!(y.value().data(), &[2.0, 2.0, 1.0]);
        let grads = tape.backward(y.sum()).unwrap();
        assert_eq!(grads.wrt(x).data(), &[1.0, 2.0]);
    }
}

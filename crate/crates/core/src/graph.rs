//! Reverse-mode differentiation over a recorded tape of tensor operations.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeometry, GroupNormCache, Tensor};

/// Named learnable tensors, kept in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = tensor;
            return i;
        }
        let i = self.tensors.len();
        self.index.insert(name.clone(), i);
        self.names.push(name);
        self.tensors.push(tensor);
        i
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Shape(format!("unknown parameter '{name}'")))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn tensor(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        cache: GroupNormCache,
    },
    Swish(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Concat(Var, Var),
    Upsample(Var),
    /// Scalar-valued loss whose gradients were computed with its value.
    Loss {
        a: Var,
        b: Var,
        grad_a: Option<Tensor>,
        grad_b: Option<Tensor>,
    },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
    param_of: HashMap<Var, usize>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant with no gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that collects gradient, not tied to any parameter store.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers parameter `id` once per graph; repeated calls share the leaf
    /// so that gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: usize) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.tensor(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        self.param_of.insert(v, id);
        v
    }

    pub fn param_named(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        Ok(self.param(store, id))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeometry) -> Result<Var> {
        let out = tensor::conv2d(self.value(x), self.value(w), self.value(b), geom)?;
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (out, cache) =
            tensor::group_norm(self.value(x), self.value(gamma), self.value(beta), groups)?;
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                cache,
            },
            rg,
        ))
    }

    pub fn swish(&mut self, x: Var) -> Var {
        let out = tensor::swish(self.value(x));
        let rg = self.needs(x);
        self.push(out, Op::Swish(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| tensor::sigmoid(v)).collect();
        let out = Tensor::new(src.shape().to_vec(), data).expect("shape");
        let rg = self.needs(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "cannot add {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::concat_channels(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat(a, b), rg))
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let out = tensor::upsample_nearest2x(self.value(x));
        let rg = self.needs(x);
        self.push(out, Op::Upsample(x), rg)
    }

    /// Records a scalar loss node. `grad_a`/`grad_b` are `∂value/∂a` and
    /// `∂value/∂b`, required only for inputs that carry gradient.
    pub fn loss(
        &mut self,
        a: Var,
        b: Var,
        value: f64,
        grad_a: Option<Tensor>,
        grad_b: Option<Tensor>,
    ) -> Var {
        let rg = self.needs(a) || self.needs(b);
        self.push(
            Tensor::scalar(value),
            Op::Loss {
                a,
                b,
                grad_a,
                grad_b,
            },
            rg,
        )
    }

    /// `Σ k_i · v_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let value = terms
            .iter()
            .map(|&(v, k)| k * self.value(v).item())
            .sum::<f64>();
        let rg = terms.iter().any(|&(v, _)| self.needs(v));
        self.push(Tensor::scalar(value), Op::WeightedSum(terms.to_vec()), rg)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Back-propagates from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));

        let accumulate = |grads: &mut Vec<Option<Tensor>>, v: Var, g: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        };

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[i].take() else {
                continue;
            };
            match &node.op {
                // Leaves keep their gradient for the caller.
                Op::Leaf => grads[i] = Some(grad),
                Op::Conv2d { x, w, b, geom } => {
                    let (dx, dw, db) = tensor::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &grad,
                        *geom,
                        self.needs(*x),
                        self.needs(*w) || self.needs(*b),
                    );
                    if let (Some(dx), true) = (dx, self.needs(*x)) {
                        accumulate(&mut grads, *x, dx);
                    }
                    if let (Some(dw), true) = (dw, self.needs(*w)) {
                        accumulate(&mut grads, *w, dw);
                    }
                    if let (Some(db), true) = (db, self.needs(*b)) {
                        let shape = self.value(*b).shape().to_vec();
                        accumulate(&mut grads, *b, Tensor::new(shape, db.into_data()).expect("shape"));
                    }
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    cache,
                } => {
                    let (dx, dg, db) = tensor::group_norm_backward(
                        cache,
                        self.value(*x).shape(),
                        self.value(*gamma),
                        *groups,
                        &grad,
                    );
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.needs(*gamma) {
                        let shape = self.value(*gamma).shape().to_vec();
                        accumulate(&mut grads, *gamma, Tensor::new(shape, dg.into_data()).expect("shape"));
                    }
                    if self.needs(*beta) {
                        let shape = self.value(*beta).shape().to_vec();
                        accumulate(&mut grads, *beta, Tensor::new(shape, db.into_data()).expect("shape"));
                    }
                }
                Op::Swish(x) => {
                    let dx = tensor::swish_backward(self.value(*x), &grad);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let data = y
                        .data()
                        .iter()
                        .zip(grad.data())
                        .map(|(&s, &g)| g * s * (1.0 - s))
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(y.shape().to_vec(), data).expect("shape"));
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, grad.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, grad);
                    }
                }
                Op::Concat(a, b) => {
                    let ca = self.value(*a).dims4().1;
                    let (da, db) = tensor::split_channels(&grad, ca);
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Upsample(x) => {
                    accumulate(&mut grads, *x, tensor::upsample_nearest2x_backward(&grad));
                }
                Op::Loss {
                    a,
                    b,
                    grad_a,
                    grad_b,
                } => {
                    let upstream = grad.item();
                    if self.needs(*a) {
                        let g = grad_a.as_ref().expect("loss gradient for a");
                        accumulate(&mut grads, *a, g.scaled(upstream));
                    }
                    if self.needs(*b) {
                        let g = grad_b.as_ref().expect("loss gradient for b");
                        accumulate(&mut grads, *b, g.scaled(upstream));
                    }
                }
                Op::WeightedSum(terms) => {
                    let upstream = grad.item();
                    for &(v, k) in terms {
                        if self.needs(v) {
                            accumulate(&mut grads, v, Tensor::scalar(k * upstream));
                        }
                    }
                }
            }
        }
        Gradients {
            grads,
            params: self.params.iter().map(|(&id, &v)| (id, v)).collect(),
        }
    }
}

#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients indexed by parameter id; `None` for parameters the root does
    /// not depend on.
    pub fn for_params(&self, count: usize) -> Vec<Option<Tensor>> {
        let mut out = vec![None; count];
        for &(id, v) in &self.params {
            if id < count {
                out[id] = self.grads[v.0].clone();
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_parameter_gradients_accumulate() {
        let mut store = ParamStore::new();
        let id = store.insert("k", Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap());
        store.insert("b", Tensor::zeros(&[1]));
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap());
        let w1 = g.param(&store, id);
        let w2 = g.param(&store, id);
        assert_eq!(w1, w2);
        let b = g.param_named(&store, "b").unwrap();
        let y1 = g.conv2d(x, w1, b, ConvGeometry::same(1)).unwrap();
        let y2 = g.conv2d(y1, w2, b, ConvGeometry::same(1)).unwrap();
        // y2 = k²·x, so ∂y2/∂k = 2k·x = 12
        let t = g.input(Tensor::zeros(&[1, 1, 1, 1]));
        let l = g.loss(y2, t, g.value(y2).item(), Some(Tensor::full(&[1, 1, 1, 1], 1.0)), None);
        let grads = g.backward(l).for_params(store.len());
        assert!((grads[id].as_ref().unwrap().item() - 12.0).abs() < 1e-12);
        assert!((grads[1].as_ref().unwrap().item() - (2.0 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn unused_parameters_have_no_gradient() {
        let mut store = ParamStore::new();
        store.insert("used", Tensor::scalar(1.0));
        store.insert("unused", Tensor::scalar(1.0));
        let mut g = Graph::new();
        let p = g.param(&store, 0);
        let _ = g.param(&store, 1);
        let total = g.weighted_sum(&[(p, 3.0)]);
        let grads = g.backward(total).for_params(2);
        assert_eq!(grads[0].as_ref().unwrap().item(), 3.0);
        assert!(grads[1].is_none());
    }

    #[test]
    fn shape_errors_surface() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[1, 2, 2, 2]));
        let b = g.input(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(g.add(a, b).is_err());
        let w = g.input(Tensor::zeros(&[1, 3, 3, 3]));
        let bias = g.input(Tensor::zeros(&[1]));
        assert!(g.conv2d(a, w, bias, ConvGeometry::same(3)).is_err());
    }
}

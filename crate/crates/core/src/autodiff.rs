//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a Wengert list: nodes are appended in evaluation order, so
//! the tape is acyclic by construction and a reverse sweep visits every node
//! after all of its consumers. Trainable tensors live in a [`ParamSet`]; bind
//! them onto a graph, run the forward ops, call [`Graph::backward`], then
//! [`ParamSet::accumulate`] pulls the leaf gradients back out. Gradients in
//! the `ParamSet` accumulate across calls until [`ParamSet::zero_grad`].

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Abs(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Exp(NodeId),
    Softplus(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    RowSum(NodeId),
    LogSoftmax(NodeId),
    GatherRows(NodeId, Vec<usize>),
    /// Holds the one-hot labels and the softmax computed on the forward pass.
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Tensor,
        probs: Tensor,
    },
}

#[derive(Clone, Debug)]
pub struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
}

impl Node {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    /// Gradient of the last `backward` root with respect to this node, if the
    /// node was reachable from it.
    pub fn gradient(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, grad: None, op });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf. Whether it is "trainable" is only a matter of whether someone
    /// reads its gradient afterwards.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(b).data().contains(&0.0) {
            return Err(Error::DegenerateInput("division by zero".into()));
        }
        let v = self.value(a).div(self.value(b))?;
        Ok(self.push(v, Op::Div(a, b)))
    }

    /// `x[m x n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self.value(x).add_row(self.value(bias))?;
        Ok(self.push(v, Op::AddRow(x, bias)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).relu();
        self.push(v, Op::Relu(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::DegenerateInput("sqrt of a non-positive value".into()));
        }
        let v = self.value(a).map(f64::sqrt);
        Ok(self.push(v, Op::Sqrt(a)))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a))
    }

    /// `[m x n] -> [m]`.
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).row_sums()?;
        Ok(self.push(v, Op::RowSum(a)))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).log_softmax()?;
        Ok(self.push(v, Op::LogSoftmax(a)))
    }

    /// Reorders or repeats rows of a matrix; gradients scatter back.
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let v = self.value(a).select_rows(idx)?;
        Ok(self.push(v, Op::GatherRows(a, idx.to_vec())))
    }

    /// Batch mean of `-y^T log softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &Tensor) -> Result<NodeId> {
        let z = self.value(logits);
        let (b, k) = z.dims2()?;
        if k < 2 {
            return Err(Error::Validation("cross-entropy needs at least 2 classes".into()));
        }
        if labels.shape() != [b, k] {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("logits {:?} vs labels {:?}", z.shape(), labels.shape()),
            ));
        }
        validate_one_hot(labels)?;
        let logp = z.log_softmax()?;
        let loss = -logp.data().iter().zip(labels.data()).map(|(lp, y)| lp * y).sum::<f64>() / b as f64;
        let probs = z.softmax()?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.clone(),
                probs,
            },
        ))
    }

    /// Fills node gradients with `d root / d node` for every node the root
    /// depends on. Previous node gradients are discarded first.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Usage(format!(
                "backward from a non-scalar node of shape {:?}",
                self.value(root).shape()
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[root.0].grad = Some(Tensor::full(self.value(root).shape(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(upstream) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &upstream)?;
            self.nodes[i].grad = Some(upstream);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: Tensor) {
        let slot = &mut self.nodes[id.0].grad;
        match slot {
            Some(g) => {
                for (a, b) in g.raw_data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            None => *slot = Some(delta),
        }
    }

    /// Gradient for a broadcasting binary op: a scalar operand receives the
    /// sum of the elementwise contributions.
    fn accumulate_broadcast(&mut self, id: NodeId, full: Tensor) {
        let shape = self.value(id).shape().to_vec();
        if shape == full.shape() {
            self.accumulate(id, full);
        } else {
            self.accumulate(id, Tensor::from_parts(shape, vec![full.sum()]));
        }
    }

    fn propagate(&mut self, i: usize, op: &Op, up: &Tensor) -> Result<()> {
        let out = self.nodes[i].value.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate_broadcast(*a, up.clone());
                self.accumulate_broadcast(*b, up.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate_broadcast(*a, up.clone());
                self.accumulate_broadcast(*b, up.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let va = broadcast_to(self.value(*a), &out);
                let vb = broadcast_to(self.value(*b), &out);
                let ga = up.mul(&vb)?;
                let gb = up.mul(&va)?;
                self.accumulate_broadcast(*a, ga);
                self.accumulate_broadcast(*b, gb);
            }
            Op::Div(a, b) => {
                let va = broadcast_to(self.value(*a), &out);
                let vb = broadcast_to(self.value(*b), &out);
                let ga = up.div(&vb)?;
                // d(a/b)/db = -a / b^2
                let gb = up.zip_broadcast(&va.div(&vb.mul(&vb)?)?, "div", |g, q| -g * q)?;
                self.accumulate_broadcast(*a, ga);
                self.accumulate_broadcast(*b, gb);
            }
            Op::AddRow(x, bias) => {
                let (_, n) = up.dims2()?;
                let mut gb = vec![0.0; n];
                for row in up.data().chunks(n) {
                    for (g, v) in gb.iter_mut().zip(row) {
                        *g += v;
                    }
                }
                let bias_shape = self.value(*bias).shape().to_vec();
                self.accumulate(*x, up.clone());
                self.accumulate(*bias, Tensor::from_parts(bias_shape, gb));
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                // dA = G . B^T, dB = A^T . G
                let bt = self.value(*b).transpose()?;
                let at = self.value(*a).transpose()?;
                let mut ga = vec![0.0; m * k];
                matmul_into(up.data(), bt.data(), &mut ga, m, n, k);
                let mut gb = vec![0.0; k * n];
                matmul_into(at.data(), up.data(), &mut gb, k, m, n);
                self.accumulate(*a, Tensor::from_parts(vec![m, k], ga));
                self.accumulate(*b, Tensor::from_parts(vec![k, n], gb));
            }
            Op::Scale(a, c) => self.accumulate(*a, up.scale(*c)),
            Op::Relu(a) => {
                let g = up.zip_broadcast(self.value(*a), "relu", |g, x| if x > 0.0 { g } else { 0.0 })?;
                self.accumulate(*a, g);
            }
            Op::Abs(a) => {
                let g = up.zip_broadcast(self.value(*a), "abs", |g, x| g * sign(x))?;
                self.accumulate(*a, g);
            }
            Op::Square(a) => {
                let g = up.zip_broadcast(self.value(*a), "square", |g, x| 2.0 * g * x)?;
                self.accumulate(*a, g);
            }
            Op::Sqrt(a) => {
                let g = up.zip_broadcast(&out, "sqrt", |g, s| g * 0.5 / s)?;
                self.accumulate(*a, g);
            }
            Op::Exp(a) => {
                let g = up.mul(&out)?;
                self.accumulate(*a, g);
            }
            Op::Softplus(a) => {
                let g = up.zip_broadcast(self.value(*a), "softplus", |g, x| g * sigmoid(x))?;
                self.accumulate(*a, g);
            }
            Op::Sum(a) => {
                let g = Tensor::full(self.value(*a).shape(), up.data()[0]);
                self.accumulate(*a, g);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                let g = Tensor::full(self.value(*a).shape(), up.data()[0] / n);
                self.accumulate(*a, g);
            }
            Op::RowSum(a) => {
                let (m, n) = self.value(*a).dims2()?;
                let mut g = Vec::with_capacity(m * n);
                for &u in up.data() {
                    g.extend(std::iter::repeat_n(u, n));
                }
                self.accumulate(*a, Tensor::from_parts(vec![m, n], g));
            }
            Op::LogSoftmax(a) => {
                // dx = g - softmax * rowsum(g)
                let (_, n) = out.dims2()?;
                let mut g = up.data().to_vec();
                for (grow, lrow) in g.chunks_mut(n).zip(out.data().chunks(n)) {
                    let total: f64 = grow.iter().sum();
                    for (gv, lp) in grow.iter_mut().zip(lrow) {
                        *gv -= lp.exp() * total;
                    }
                }
                self.accumulate(*a, Tensor::from_parts(out.shape().to_vec(), g));
            }
            Op::GatherRows(a, idx) => {
                let src = self.value(*a);
                let (m, n) = src.dims2()?;
                let mut g = vec![0.0; m * n];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..n {
                        g[i * n + c] += up.data()[r * n + c];
                    }
                }
                self.accumulate(*a, Tensor::from_parts(vec![m, n], g));
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let (b, _) = probs.dims2()?;
                let c = up.data()[0] / b as f64;
                let g = probs.zip_broadcast(labels, "softmax_cross_entropy", |p, y| c * (p - y))?;
                self.accumulate(*logits, g);
            }
        }
        Ok(())
    }
}

fn broadcast_to(v: &Tensor, out: &Tensor) -> Tensor {
    if v.shape() == out.shape() {
        v.clone()
    } else {
        Tensor::full(out.shape(), v.data()[0])
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn validate_one_hot(labels: &Tensor) -> Result<()> {
    let (_, k) = labels.dims2()?;
    for (i, row) in labels.data().chunks(k).enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != k - 1 {
            return Err(Error::Validation(format!("label row {i} is not one-hot")));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
struct Param {
    name: String,
    value: Tensor,
    grad: Tensor,
}

/// Named trainable tensors, iterated in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

/// Graph nodes holding a [`ParamSet`]'s values, index-aligned with it.
#[derive(Clone, Debug)]
pub struct Bound {
    ids: Vec<NodeId>,
}

impl Bound {
    pub fn id(&self, index: usize) -> NodeId {
        self.ids[index]
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Argument(format!("duplicate parameter name `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param { name, value, grad });
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn value(&self, index: usize) -> &Tensor {
        &self.params[index].value
    }

    pub fn grad(&self, index: usize) -> &Tensor {
        &self.params[index].grad
    }

    pub fn values(&self) -> impl Iterator<Item = &Tensor> {
        self.params.iter().map(|p| &p.value)
    }

    pub fn set_value(&mut self, index: usize, value: Tensor) -> Result<()> {
        if value.shape() != self.params[index].value.shape() {
            return Err(Error::dim("set_value", "parameter shape changed"));
        }
        self.params[index].value = value;
        Ok(())
    }

    /// Pushes a leaf per parameter.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            ids: self.params.iter().map(|p| g.leaf(p.value.clone())).collect(),
        }
    }

    /// Adds the graph's current leaf gradients into the stored gradients.
    /// Parameters the loss did not reach receive nothing.
    pub fn accumulate(&mut self, g: &Graph, bound: &Bound) {
        for (p, id) in self.params.iter_mut().zip(&bound.ids) {
            if let Some(delta) = g.grad(*id) {
                for (a, b) in p.grad.raw_data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    /// `value -= lr * grad` for every parameter.
    pub fn sgd_step(&mut self, lr: f64) {
        for p in &mut self.params {
            let grad = p.grad.data().to_vec();
            for (v, g) in p.value.raw_data_mut().iter_mut().zip(grad) {
                *v -= lr * g;
            }
        }
    }

    /// `value += lr * grad`, for critics that ascend their objective.
    pub fn ascent_step(&mut self, lr: f64) {
        self.sgd_step(-lr);
    }

    pub fn clamp_values(&mut self, lo: f64, hi: f64) {
        for p in &mut self.params {
            for v in p.value.raw_data_mut() {
                *v = v.clamp(lo, hi);
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Runs `backward` from `loss` and accumulates into `params`.
pub fn backward_into(g: &mut Graph, loss: NodeId, bound: &Bound, params: &mut ParamSet) -> Result<()> {
    g.backward(loss)?;
    params.accumulate(g, bound);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }

    /// Central differences of a scalar function of one tensor, h = 1e-4.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-4;
        (0..x.numel())
            .map(|i| {
                let mut plus = x.data().to_vec();
                let mut minus = x.data().to_vec();
                plus[i] += h;
                minus[i] -= h;
                let fp = f(&Tensor::new(x.shape().to_vec(), plus).unwrap());
                let fm = f(&Tensor::new(x.shape().to_vec(), minus).unwrap());
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn matmul_sum_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[4, 5], &mut rng);
        let b = random(&[5, 3], &mut rng);
        let mut g = Graph::new();
        let na = g.leaf(a.clone());
        let nb = g.leaf(b.clone());
        let c = g.matmul(na, nb).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();

        let fa = |t: &Tensor| t.matmul(&b).unwrap().sum();
        let fb = |t: &Tensor| a.matmul(t).unwrap().sum();
        for (an, nu) in g.grad(na).unwrap().data().iter().zip(numeric_grad(&a, &fa)) {
            assert!(rel_err(*an, nu) < 1e-5);
        }
        for (an, nu) in g.grad(nb).unwrap().data().iter().zip(numeric_grad(&b, &fb)) {
            assert!(rel_err(*an, nu) < 1e-5);
        }
    }

    #[test]
    fn relu_add_chain_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[3, 4], &mut rng);
        let y = random(&[3, 4], &mut rng);
        let build = |g: &mut Graph, x: &Tensor| {
            let nx = g.leaf(x.clone());
            let ny = g.leaf(y.clone());
            let s = g.add(nx, ny).unwrap();
            let r = g.relu(s);
            let sc = g.scale(r, 1.5);
            let c = g.leaf(Tensor::scalar(0.3));
            let sh = g.sub(sc, c).unwrap();
            let sq = g.square(sh);
            (nx, g.mean(sq))
        };
        let mut g = Graph::new();
        let (nx, loss) = build(&mut g, &x);
        g.backward(loss).unwrap();
        let f = |t: &Tensor| {
            let mut g = Graph::new();
            let (_, l) = build(&mut g, t);
            g.value(l).item().unwrap()
        };
        for (an, nu) in g.grad(nx).unwrap().data().iter().zip(numeric_grad(&x, &f)) {
            assert!(rel_err(*an, nu) < 1e-5, "{an} vs {nu}");
        }
    }

    #[test]
    fn elementwise_ops_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[3, 4], &mut rng).map(|v| v + 2.0);
        let w = random(&[3, 4], &mut rng);
        let build = |g: &mut Graph, x: &Tensor| {
            let nx = g.leaf(x.clone());
            let nw = g.leaf(w.clone());
            let m = g.mul(nx, nw).unwrap();
            let d = g.div(m, nx).unwrap();
            let e = g.exp(d);
            let sp = g.softplus(nx);
            let sq = g.sqrt(sp).unwrap();
            let a = g.abs(nw);
            let t = g.add(e, sq).unwrap();
            let t = g.sub(t, a).unwrap();
            let ls = g.log_softmax(t).unwrap();
            let rs = g.row_sum(ls).unwrap();
            let gathered = g.gather_rows(t, &[2, 0, 2]).unwrap();
            let s1 = g.sum(rs);
            let s2 = g.mean(gathered);
            (nx, g.add(s1, s2).unwrap())
        };
        let mut g = Graph::new();
        let (nx, loss) = build(&mut g, &x);
        g.backward(loss).unwrap();
        let f = |t: &Tensor| {
            let mut g = Graph::new();
            let (_, l) = build(&mut g, t);
            g.value(l).item().unwrap()
        };
        for (an, nu) in g.grad(nx).unwrap().data().iter().zip(numeric_grad(&x, &f)) {
            assert!(rel_err(*an, nu) < 1e-5, "{an} vs {nu}");
        }
    }

    #[test]
    fn cross_entropy_values_and_gradient() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::zeros(&[1, 10]));
        let y = crate::tensor::one_hot(&[3], 10).unwrap();
        let ce = g.softmax_cross_entropy(z, &y).unwrap();
        assert!((g.value(ce).item().unwrap() - 10f64.ln()).abs() < 1e-12);

        let y = crate::tensor::one_hot(&[0, 2], 3).unwrap();
        let z = g.leaf(y.scale(1e6));
        let ce = g.softmax_cross_entropy(z, &y).unwrap();
        assert!(g.value(ce).item().unwrap().abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = random(&[3, 4], &mut rng);
        let y = crate::tensor::one_hot(&[1, 3, 0], 4).unwrap();
        let mut g = Graph::new();
        let z = g.leaf(logits.clone());
        let ce = g.softmax_cross_entropy(z, &y).unwrap();
        g.backward(ce).unwrap();
        let f = |t: &Tensor| {
            let mut g = Graph::new();
            let z = g.leaf(t.clone());
            let ce = g.softmax_cross_entropy(z, &y).unwrap();
            g.value(ce).item().unwrap()
        };
        for (an, nu) in g.grad(z).unwrap().data().iter().zip(numeric_grad(&logits, &f)) {
            assert!(rel_err(*an, nu) < 1e-4);
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::zeros(&[1, 3]));
        let bad = Tensor::from_rows(&[[0.5, 0.5, 0.0]]).unwrap();
        assert!(matches!(g.softmax_cross_entropy(z, &bad), Err(Error::Validation(_))));
        let z1 = g.leaf(Tensor::zeros(&[1, 1]));
        let y1 = Tensor::from_rows(&[[1.0]]).unwrap();
        assert!(matches!(g.softmax_cross_entropy(z1, &y1), Err(Error::Validation(_))));
    }

    #[test]
    fn param_gradients_sum_and_norm() {
        let theta = Tensor::vector(vec![0.5, -1.0, 2.0]).unwrap();
        let mut ps = ParamSet::new();
        ps.insert("theta", theta.clone()).unwrap();

        let mut g = Graph::new();
        let b = ps.bind(&mut g);
        let s = g.sum(b.id(0));
        backward_into(&mut g, s, &b, &mut ps).unwrap();
        assert_eq!(ps.grad(0).data(), &[1.0, 1.0, 1.0]);

        ps.zero_grad();
        let mut g = Graph::new();
        let b = ps.bind(&mut g);
        let sq = g.square(b.id(0));
        let n = g.sum(sq);
        backward_into(&mut g, n, &b, &mut ps).unwrap();
        assert_eq!(ps.grad(0).data(), theta.scale(2.0).data());

        // accumulation without zeroing
        g.backward(n).unwrap();
        ps.accumulate(&g, &b);
        assert_eq!(ps.grad(0).data(), theta.scale(4.0).data());
    }

    #[test]
    fn backward_twice_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::new();
        ps.insert("w", random(&[4, 3], &mut rng)).unwrap();
        let x = random(&[2, 4], &mut rng);
        let mut g = Graph::new();
        let b = ps.bind(&mut g);
        let nx = g.leaf(x);
        let z = g.matmul(nx, b.id(0)).unwrap();
        let r = g.relu(z);
        let l = g.mean(r);
        backward_into(&mut g, l, &b, &mut ps).unwrap();
        let first = ps.grad(0).clone();
        ps.zero_grad();
        backward_into(&mut g, l, &b, &mut ps).unwrap();
        assert_eq!(&first, ps.grad(0));
    }

    #[test]
    fn backward_needs_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::new();
        ps.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(ps.insert("a", Tensor::scalar(2.0)).is_err());
    }
}

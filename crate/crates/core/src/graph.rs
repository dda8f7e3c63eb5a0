//! Reverse-mode differentiation over eagerly evaluated tensor graphs.
//!
//! Values are computed at node construction; `grad` walks the graph
//! backwards. With `build_graph = true` the backward pass emits new graph
//! nodes instead of raw tensors, so the returned gradients can be
//! differentiated again. Every backward rule is expressed through the same
//! public operations, which keeps the op set closed under differentiation.
//!
//! Graphs are confined to one thread (`Node` is `Rc`-based and !Send);
//! independent graphs on independent threads need no coordination.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smooth-ReLU sharpness used when a graph is built for reconstruction:
/// the backward derivative of ReLU becomes σ(alpha·x) instead of the step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurrogateConfig {
    pub alpha: f64,
}

impl SurrogateConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::contract(format!(
                "surrogate alpha must be positive, got {alpha}"
            )));
        }
        Ok(SurrogateConfig { alpha })
    }
}

thread_local! {
    static NEXT_ID: Cell<usize> = const { Cell::new(0) };
}

fn fresh_id() -> usize {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Node, Node),
    Sub(Node, Node),
    Mul(Node, Node),
    Div(Node, Node),
    Neg(Node),
    Scale(Node, f64),
    /// scalar node × tensor node
    MulScalar(Node, Node),
    MatVec(Node, Node),
    TMatVec(Node, Node),
    Outer(Node, Node),
    MatMul(Node, Node),
    MatMulTA(Node, Node),
    MatMulTB(Node, Node),
    Sum(Node),
    Broadcast(Node),
    Exp(Node),
    Log(Node),
    Sigmoid(Node),
    Relu(Node, Option<f64>),
    Select(Node, usize),
    Scatter(Node, usize),
    Row(Node, usize),
    RowScatter(Node, usize),
    /// λ[m×(C−1)] -> A[m×C] with A[i,yᵢ]=Σⱼλ[i,j], A[i,cⱼ]=−λ[i,j]
    MarginWeights(Node, Rc<Vec<usize>>, usize),
    /// transpose of MarginWeights: M[m×C] -> [m×(C−1)]
    MarginGather(Node, Rc<Vec<usize>>, usize),
}

struct NodeInner {
    id: usize,
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Handle to one node of a computation graph. Cheap to clone.
#[derive(Clone)]
pub struct Node(Rc<NodeInner>);

impl std::fmt::Debug for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Node")
            .field("id", &self.0.id)
            .field("shape", &self.0.value.shape())
            .finish()
    }
}

impl Node {
    fn make(value: Tensor, op: Op, requires_grad: bool) -> Node {
        Node(Rc::new(NodeInner {
            id: fresh_id(),
            value,
            op,
            requires_grad,
        }))
    }

    /// Leaf that participates in differentiation.
    pub fn variable(value: Tensor) -> Node {
        Node::make(value, Op::Leaf, true)
    }

    /// Leaf treated as data (gradient requests against it still work; the
    /// flag only prunes backward traversal through subgraphs that cannot
    /// matter).
    pub fn constant(value: Tensor) -> Node {
        Node::make(value, Op::Leaf, false)
    }

    pub fn scalar_const(v: f64) -> Node {
        Node::constant(Tensor::scalar(v))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    fn unary(value: Tensor, op: Op, p: &Node) -> Node {
        Node::make(value, op, p.0.requires_grad)
    }

    fn binary(value: Tensor, op: Op, a: &Node, b: &Node) -> Node {
        Node::make(value, op, a.0.requires_grad || b.0.requires_grad)
    }

    pub fn add(&self, o: &Node) -> Result<Node> {
        let v = self.0.value.add(&o.0.value)?;
        Ok(Node::binary(v, Op::Add(self.clone(), o.clone()), self, o))
    }

    pub fn sub(&self, o: &Node) -> Result<Node> {
        let v = self.0.value.sub(&o.0.value)?;
        Ok(Node::binary(v, Op::Sub(self.clone(), o.clone()), self, o))
    }

    pub fn mul(&self, o: &Node) -> Result<Node> {
        let v = self.0.value.mul(&o.0.value)?;
        Ok(Node::binary(v, Op::Mul(self.clone(), o.clone()), self, o))
    }

    pub fn div(&self, o: &Node) -> Result<Node> {
        let v = self.0.value.div(&o.0.value)?;
        Ok(Node::binary(v, Op::Div(self.clone(), o.clone()), self, o))
    }

    pub fn neg(&self) -> Node {
        Node::unary(self.0.value.neg(), Op::Neg(self.clone()), self)
    }

    pub fn scale(&self, c: f64) -> Node {
        Node::unary(self.0.value.scale(c), Op::Scale(self.clone(), c), self)
    }

    /// self must be scalar; scales `x` elementwise.
    pub fn mul_scalar(&self, x: &Node) -> Result<Node> {
        let s = self.0.value.scalar_value()?;
        let v = x.0.value.scale(s);
        Ok(Node::binary(
            v,
            Op::MulScalar(self.clone(), x.clone()),
            self,
            x,
        ))
    }

    pub fn matvec(&self, x: &Node) -> Result<Node> {
        let v = self.0.value.matvec(&x.0.value)?;
        Ok(Node::binary(v, Op::MatVec(self.clone(), x.clone()), self, x))
    }

    pub fn tmatvec(&self, g: &Node) -> Result<Node> {
        let v = self.0.value.tmatvec(&g.0.value)?;
        Ok(Node::binary(
            v,
            Op::TMatVec(self.clone(), g.clone()),
            self,
            g,
        ))
    }

    pub fn outer(&self, o: &Node) -> Result<Node> {
        let v = self.0.value.outer(&o.0.value)?;
        Ok(Node::binary(v, Op::Outer(self.clone(), o.clone()), self, o))
    }

    pub fn matmul(&self, o: &Node) -> Result<Node> {
        let v = self.0.value.matmul(&o.0.value)?;
        Ok(Node::binary(v, Op::MatMul(self.clone(), o.clone()), self, o))
    }

    pub fn matmul_ta(&self, o: &Node) -> Result<Node> {
        let v = self.0.value.matmul_ta(&o.0.value)?;
        Ok(Node::binary(
            v,
            Op::MatMulTA(self.clone(), o.clone()),
            self,
            o,
        ))
    }

    pub fn matmul_tb(&self, o: &Node) -> Result<Node> {
        let v = self.0.value.matmul_tb(&o.0.value)?;
        Ok(Node::binary(
            v,
            Op::MatMulTB(self.clone(), o.clone()),
            self,
            o,
        ))
    }

    pub fn sum(&self) -> Node {
        let v = Tensor::scalar(self.0.value.sum());
        Node::unary(v, Op::Sum(self.clone()), self)
    }

    pub fn broadcast(&self, shape: &[usize]) -> Result<Node> {
        let s = self.0.value.scalar_value()?;
        let v = Tensor::filled(shape, s);
        Ok(Node::unary(v, Op::Broadcast(self.clone()), self))
    }

    pub fn exp(&self) -> Node {
        let v = self.0.value.map(f64::exp);
        Node::unary(v, Op::Exp(self.clone()), self)
    }

    pub fn log(&self) -> Node {
        let v = self.0.value.map(f64::ln);
        Node::unary(v, Op::Log(self.clone()), self)
    }

    pub fn sigmoid(&self) -> Node {
        let v = self.0.value.map(sigmoid);
        Node::unary(v, Op::Sigmoid(self.clone()), self)
    }

    /// Forward max(x, 0). The backward derivative is the exact subgradient
    /// (0 at x = 0) unless `surrogate` is given, in which case it is
    /// σ(alpha·x) and stays differentiable for second-order passes.
    pub fn relu(&self, surrogate: Option<SurrogateConfig>) -> Node {
        let v = self.0.value.map(|x| x.max(0.0));
        let alpha = surrogate.map(|s| s.alpha);
        Node::unary(v, Op::Relu(self.clone(), alpha), self)
    }

    /// Vector element -> scalar.
    pub fn select(&self, idx: usize) -> Result<Node> {
        if self.shape().len() != 1 || idx >= self.0.value.len() {
            return Err(Error::contract(format!(
                "select index {idx} out of range for shape {:?}",
                self.shape()
            )));
        }
        let v = Tensor::scalar(self.0.value.data()[idx]);
        Ok(Node::unary(v, Op::Select(self.clone(), idx), self))
    }

    /// Scalar -> vector of zeros with the scalar at `idx`.
    pub fn scatter(&self, idx: usize, len: usize) -> Result<Node> {
        let s = self.0.value.scalar_value()?;
        if idx >= len {
            return Err(Error::contract(format!(
                "scatter index {idx} out of range for length {len}"
            )));
        }
        let mut data = vec![0.0; len];
        data[idx] = s;
        Ok(Node::unary(
            Tensor::from_raw(vec![len], data),
            Op::Scatter(self.clone(), idx),
            self,
        ))
    }

    /// Matrix row -> vector.
    pub fn row(&self, i: usize) -> Result<Node> {
        let r = self.0.value.rows()?;
        if i >= r {
            return Err(Error::contract(format!(
                "row {i} out of range for shape {:?}",
                self.shape()
            )));
        }
        let v = Tensor::from_raw(
            vec![self.0.value.cols()?],
            self.0.value.row_slice(i).to_vec(),
        );
        Ok(Node::unary(v, Op::Row(self.clone(), i), self))
    }

    /// Vector -> matrix of zeros with the vector in row `i`.
    pub fn row_scatter(&self, i: usize, rows: usize) -> Result<Node> {
        if self.shape().len() != 1 {
            return Err(Error::contract(format!(
                "row_scatter expects a vector, got shape {:?}",
                self.shape()
            )));
        }
        if i >= rows {
            return Err(Error::contract(format!(
                "row_scatter row {i} out of range for {rows} rows"
            )));
        }
        let cols = self.0.value.len();
        let mut data = vec![0.0; rows * cols];
        data[i * cols..(i + 1) * cols].copy_from_slice(self.0.value.data());
        Ok(Node::unary(
            Tensor::from_raw(vec![rows, cols], data),
            Op::RowScatter(self.clone(), i),
            self,
        ))
    }

    /// Expand per-pair coefficients λ[m×(C−1)] into logit weights A[m×C]:
    /// A[i, yᵢ] = Σⱼ λ[i,j] and A[i, cᵢⱼ] = −λ[i,j], where cᵢⱼ runs over
    /// the classes ≠ yᵢ in ascending order. sum(A ⊙ logits) is then the
    /// λ-weighted margin sum Σᵢⱼ λᵢⱼ(Φ_yᵢ − Φ_cⱼ).
    pub fn margin_weights(&self, labels: &Rc<Vec<usize>>, classes: usize) -> Result<Node> {
        check_margin_shapes(self.shape(), labels, classes, false)?;
        let v = margin_weights_value(&self.0.value, labels, classes);
        Ok(Node::unary(
            v,
            Op::MarginWeights(self.clone(), labels.clone(), classes),
            self,
        ))
    }

    /// Transpose of `margin_weights`: M[m×C] -> out[i,j] = M[i,yᵢ] − M[i,cᵢⱼ].
    pub fn margin_gather(&self, labels: &Rc<Vec<usize>>, classes: usize) -> Result<Node> {
        check_margin_shapes(self.shape(), labels, classes, true)?;
        let v = margin_gather_value(&self.0.value, labels, classes);
        Ok(Node::unary(
            v,
            Op::MarginGather(self.clone(), labels.clone(), classes),
            self,
        ))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_margin_shapes(
    shape: &[usize],
    labels: &[usize],
    classes: usize,
    full_width: bool,
) -> Result<()> {
    if classes < 2 {
        return Err(Error::contract(format!(
            "margin ops need at least 2 classes, got {classes}"
        )));
    }
    let want_cols = if full_width { classes } else { classes - 1 };
    match shape {
        [m, c] if *c == want_cols && *m == labels.len() => {}
        _ => {
            return Err(Error::shape(
                "margin op",
                shape,
                &[labels.len(), want_cols],
            ))
        }
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::contract(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

fn margin_weights_value(lam: &Tensor, labels: &[usize], classes: usize) -> Tensor {
    let m = labels.len();
    let k = classes - 1;
    let mut out = vec![0.0; m * classes];
    for (i, &y) in labels.iter().enumerate() {
        let lrow = &lam.data()[i * k..(i + 1) * k];
        let orow = &mut out[i * classes..(i + 1) * classes];
        let mut j = 0;
        for c in 0..classes {
            if c == y {
                continue;
            }
            orow[c] = -lrow[j];
            orow[y] += lrow[j];
            j += 1;
        }
    }
    Tensor::from_raw(vec![m, classes], out)
}

fn margin_gather_value(mat: &Tensor, labels: &[usize], classes: usize) -> Tensor {
    let m = labels.len();
    let k = classes - 1;
    let mut out = vec![0.0; m * k];
    for (i, &y) in labels.iter().enumerate() {
        let mrow = &mat.data()[i * classes..(i + 1) * classes];
        let orow = &mut out[i * k..(i + 1) * k];
        let mut j = 0;
        for c in 0..classes {
            if c == y {
                continue;
            }
            orow[j] = mrow[y] - mrow[c];
            j += 1;
        }
    }
    Tensor::from_raw(vec![m, k], out)
}

/// Post-order over the graph below `output`: parents appear before users.
fn topo_order(output: &Node) -> Vec<Node> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    // (node, parents_visited)
    let mut stack: Vec<(Node, bool)> = vec![(output.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !seen.insert(node.0.id) {
            continue;
        }
        stack.push((node.clone(), true));
        for p in parents(&node.0.op) {
            if !seen.contains(&p.0.id) {
                stack.push((p, false));
            }
        }
    }
    order
}

fn parents(op: &Op) -> Vec<Node> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::MulScalar(a, b)
        | Op::MatVec(a, b)
        | Op::TMatVec(a, b)
        | Op::Outer(a, b)
        | Op::MatMul(a, b)
        | Op::MatMulTA(a, b)
        | Op::MatMulTB(a, b) => vec![a.clone(), b.clone()],
        Op::Neg(a)
        | Op::Scale(a, _)
        | Op::Sum(a)
        | Op::Broadcast(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Sigmoid(a)
        | Op::Relu(a, _)
        | Op::Select(a, _)
        | Op::Scatter(a, _)
        | Op::Row(a, _)
        | Op::RowScatter(a, _)
        | Op::MarginWeights(a, _, _)
        | Op::MarginGather(a, _, _) => vec![a.clone()],
    }
}

/// Which nodes can reach a `wrt` target (walking parent edges).
fn mark_dependent(order: &[Node], wrt_ids: &HashSet<usize>) -> HashSet<usize> {
    let mut dep = HashSet::new();
    for node in order {
        if wrt_ids.contains(&node.0.id)
            || parents(&node.0.op).iter().any(|p| dep.contains(&p.0.id))
        {
            dep.insert(node.0.id);
        }
    }
    dep
}

/// The two backward flavours share the traversal; they differ in what an
/// adjoint is (raw tensor vs live node) and in the per-op rule set.
trait Mode {
    type Adj: Clone;
    fn seed(shape: &[usize]) -> Self::Adj;
    fn zero(shape: &[usize]) -> Self::Adj;
    fn accumulate(a: &Self::Adj, b: &Self::Adj) -> Result<Self::Adj>;
    fn rule(node: &Node, adj: &Self::Adj) -> Result<Vec<(Node, Self::Adj)>>;
}

struct ValueMode;

impl Mode for ValueMode {
    type Adj = Tensor;
    fn seed(shape: &[usize]) -> Tensor {
        Tensor::filled(shape, 1.0)
    }
    fn zero(shape: &[usize]) -> Tensor {
        Tensor::zeros(shape)
    }
    fn accumulate(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.add(b)
    }
    fn rule(node: &Node, adj: &Tensor) -> Result<Vec<(Node, Tensor)>> {
        backward_rule_value(node, adj)
    }
}

struct GraphMode;

impl Mode for GraphMode {
    type Adj = Node;
    fn seed(shape: &[usize]) -> Node {
        Node::constant(Tensor::filled(shape, 1.0))
    }
    fn zero(shape: &[usize]) -> Node {
        Node::constant(Tensor::zeros(shape))
    }
    fn accumulate(a: &Node, b: &Node) -> Result<Node> {
        a.add(b)
    }
    fn rule(node: &Node, adj: &Node) -> Result<Vec<(Node, Node)>> {
        backward_rule_graph(node, adj)
    }
}

/// Compute ∂output/∂wrtᵢ for a scalar `output`.
///
/// With `build_graph = false` the result nodes are detached constants
/// (use them for their values). With `build_graph = true` the results are
/// live graph nodes and may be differentiated again. Targets unreachable
/// from `output` get zero gradients.
pub fn grad(output: &Node, wrt: &[Node], build_graph: bool) -> Result<Vec<Node>> {
    if build_graph {
        backward::<GraphMode>(output, wrt)
    } else {
        Ok(grad_values(output, wrt)?
            .into_iter()
            .map(Node::constant)
            .collect())
    }
}

/// Gradient values without building a differentiable backward graph.
pub fn grad_values(output: &Node, wrt: &[Node]) -> Result<Vec<Tensor>> {
    backward::<ValueMode>(output, wrt)
}

fn backward<M: Mode>(output: &Node, wrt: &[Node]) -> Result<Vec<M::Adj>> {
    if !output.value().is_scalar() {
        return Err(Error::contract(format!(
            "grad needs a scalar output, got shape {:?}",
            output.shape()
        )));
    }
    let order = topo_order(output);
    let wrt_ids: HashSet<usize> = wrt.iter().map(|n| n.0.id).collect();
    let dep = mark_dependent(&order, &wrt_ids);

    let mut adjoints: HashMap<usize, M::Adj> = HashMap::new();
    adjoints.insert(output.0.id, M::seed(output.shape()));

    for node in order.iter().rev() {
        if !dep.contains(&node.0.id) {
            continue;
        }
        let Some(adj) = adjoints.get(&node.0.id).cloned() else {
            continue;
        };
        for (parent, contribution) in M::rule(node, &adj)? {
            if !dep.contains(&parent.0.id) {
                continue;
            }
            let merged = match adjoints.get(&parent.0.id) {
                Some(existing) => M::accumulate(existing, &contribution)?,
                None => contribution,
            };
            adjoints.insert(parent.0.id, merged);
        }
    }

    Ok(wrt
        .iter()
        .map(|w| {
            adjoints
                .get(&w.0.id)
                .cloned()
                .unwrap_or_else(|| M::zero(w.shape()))
        })
        .collect())
}

fn backward_rule_graph(node: &Node, g: &Node) -> Result<Vec<(Node, Node)>> {
    let out = match &node.0.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(a.clone(), g.clone()), (b.clone(), g.clone())],
        Op::Sub(a, b) => vec![(a.clone(), g.clone()), (b.clone(), g.neg())],
        Op::Mul(a, b) => vec![(a.clone(), g.mul(b)?), (b.clone(), g.mul(a)?)],
        Op::Div(a, b) => {
            let ga = g.div(b)?;
            let gb = g.mul(node)?.div(b)?.neg();
            vec![(a.clone(), ga), (b.clone(), gb)]
        }
        Op::Neg(a) => vec![(a.clone(), g.neg())],
        Op::Scale(a, c) => vec![(a.clone(), g.scale(*c))],
        Op::MulScalar(s, x) => {
            let gx = s.mul_scalar(g)?;
            let gs = g.mul(x)?.sum();
            vec![(x.clone(), gx), (s.clone(), gs)]
        }
        Op::MatVec(w, x) => vec![(w.clone(), g.outer(x)?), (x.clone(), w.tmatvec(g)?)],
        Op::TMatVec(w, v) => vec![(w.clone(), v.outer(g)?), (v.clone(), w.matvec(g)?)],
        Op::Outer(u, v) => vec![(u.clone(), g.matvec(v)?), (v.clone(), g.tmatvec(u)?)],
        Op::MatMul(a, b) => vec![
            (a.clone(), g.matmul_tb(b)?),
            (b.clone(), a.matmul_ta(g)?),
        ],
        Op::MatMulTA(a, b) => vec![
            (a.clone(), b.matmul_tb(g)?),
            (b.clone(), a.matmul(g)?),
        ],
        Op::MatMulTB(a, b) => vec![
            (a.clone(), g.matmul(b)?),
            (b.clone(), g.matmul_ta(a)?),
        ],
        Op::Sum(a) => vec![(a.clone(), g.broadcast(a.shape())?)],
        Op::Broadcast(s) => vec![(s.clone(), g.sum())],
        Op::Exp(a) => vec![(a.clone(), g.mul(node)?)],
        Op::Log(a) => vec![(a.clone(), g.div(a)?)],
        Op::Sigmoid(a) => {
            let ones = Node::constant(Tensor::filled(node.shape(), 1.0));
            let d = node.mul(&ones.sub(node)?)?;
            vec![(a.clone(), g.mul(&d)?)]
        }
        Op::Relu(a, alpha) => {
            let d = match alpha {
                Some(alpha) => a.scale(*alpha).sigmoid(),
                None => Node::constant(a.value().map(|x| if x > 0.0 { 1.0 } else { 0.0 })),
            };
            vec![(a.clone(), g.mul(&d)?)]
        }
        Op::Select(a, idx) => vec![(a.clone(), g.scatter(*idx, a.value().len())?)],
        Op::Scatter(s, idx) => vec![(s.clone(), g.select(*idx)?)],
        Op::Row(m, i) => vec![(m.clone(), g.row_scatter(*i, m.value().rows()?)?)],
        Op::RowScatter(v, i) => vec![(v.clone(), g.row(*i)?)],
        Op::MarginWeights(lam, labels, classes) => {
            vec![(lam.clone(), g.margin_gather(labels, *classes)?)]
        }
        Op::MarginGather(m, labels, classes) => {
            vec![(m.clone(), g.margin_weights(labels, *classes)?)]
        }
    };
    Ok(out)
}

fn backward_rule_value(node: &Node, g: &Tensor) -> Result<Vec<(Node, Tensor)>> {
    let out = match &node.0.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(a.clone(), g.clone()), (b.clone(), g.clone())],
        Op::Sub(a, b) => vec![(a.clone(), g.clone()), (b.clone(), g.neg())],
        Op::Mul(a, b) => vec![
            (a.clone(), g.mul(b.value())?),
            (b.clone(), g.mul(a.value())?),
        ],
        Op::Div(a, b) => {
            let ga = g.div(b.value())?;
            let gb = g.mul(node.value())?.div(b.value())?.neg();
            vec![(a.clone(), ga), (b.clone(), gb)]
        }
        Op::Neg(a) => vec![(a.clone(), g.neg())],
        Op::Scale(a, c) => vec![(a.clone(), g.scale(*c))],
        Op::MulScalar(s, x) => {
            let sv = s.value().scalar_value()?;
            let gx = g.scale(sv);
            let gs = Tensor::scalar(g.dot(x.value())?);
            vec![(x.clone(), gx), (s.clone(), gs)]
        }
        Op::MatVec(w, x) => vec![
            (w.clone(), g.outer(x.value())?),
            (x.clone(), w.value().tmatvec(g)?),
        ],
        Op::TMatVec(w, v) => vec![
            (w.clone(), v.value().outer(g)?),
            (v.clone(), w.value().matvec(g)?),
        ],
        Op::Outer(u, v) => vec![
            (u.clone(), g.matvec(v.value())?),
            (v.clone(), g.tmatvec(u.value())?),
        ],
        Op::MatMul(a, b) => vec![
            (a.clone(), g.matmul_tb(b.value())?),
            (b.clone(), a.value().matmul_ta(g)?),
        ],
        Op::MatMulTA(a, b) => vec![
            (a.clone(), b.value().matmul_tb(g)?),
            (b.clone(), a.value().matmul(g)?),
        ],
        Op::MatMulTB(a, b) => vec![
            (a.clone(), g.matmul(b.value())?),
            (b.clone(), g.matmul_ta(a.value())?),
        ],
        Op::Sum(a) => {
            let s = g.scalar_value()?;
            vec![(a.clone(), Tensor::filled(a.shape(), s))]
        }
        Op::Broadcast(s) => vec![(s.clone(), Tensor::scalar(g.sum()))],
        Op::Exp(a) => vec![(a.clone(), g.mul(node.value())?)],
        Op::Log(a) => vec![(a.clone(), g.div(a.value())?)],
        Op::Sigmoid(a) => {
            let d = node.value().map(|y| y * (1.0 - y));
            vec![(a.clone(), g.mul(&d)?)]
        }
        Op::Relu(a, alpha) => {
            let d = match alpha {
                Some(alpha) => a.value().map(|x| sigmoid(alpha * x)),
                None => a.value().map(|x| if x > 0.0 { 1.0 } else { 0.0 }),
            };
            vec![(a.clone(), g.mul(&d)?)]
        }
        Op::Select(a, idx) => {
            let s = g.scalar_value()?;
            let mut data = vec![0.0; a.value().len()];
            data[*idx] = s;
            vec![(a.clone(), Tensor::from_raw(vec![data.len()], data))]
        }
        Op::Scatter(s, idx) => vec![(s.clone(), Tensor::scalar(g.data()[*idx]))],
        Op::Row(m, i) => {
            let rows = m.value().rows()?;
            let cols = m.value().cols()?;
            let mut data = vec![0.0; rows * cols];
            data[i * cols..(i + 1) * cols].copy_from_slice(g.data());
            vec![(m.clone(), Tensor::from_raw(vec![rows, cols], data))]
        }
        Op::RowScatter(v, i) => {
            let cols = v.value().len();
            vec![(
                v.clone(),
                Tensor::from_raw(vec![cols], g.row_slice(*i).to_vec()),
            )]
        }
        Op::MarginWeights(lam, labels, classes) => {
            vec![(lam.clone(), margin_gather_value(g, labels, *classes))]
        }
        Op::MarginGather(m, labels, classes) => {
            vec![(m.clone(), margin_weights_value(g, labels, *classes))]
        }
    };
    Ok(out)
}

/// Matrix–vector product with graph support: y = W·x. Exposed as the basic
/// dense layer building block.
pub fn linear_forward(weights: &Node, x: &Node) -> Result<Node> {
    weights.matvec(x)
}

/// −log softmax(logits)[label], numerically stabilized by max subtraction.
/// Built from primitive ops, so it is differentiable to any order we need.
pub fn cross_entropy_logits(logits: &Node, label: usize) -> Result<Node> {
    let n = logits.value().len();
    if logits.shape().len() != 1 {
        return Err(Error::contract(format!(
            "cross_entropy_logits expects a logit vector, got shape {:?}",
            logits.shape()
        )));
    }
    if label >= n {
        return Err(Error::contract(format!(
            "label {label} out of range for {n} classes"
        )));
    }
    let max = logits
        .value()
        .data()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let shift = Node::constant(Tensor::filled(&[n], max));
    let shifted = logits.sub(&shift)?;
    let lse = shifted.exp().sum().log().add(&Node::scalar_const(max))?;
    lse.sub(&logits.select(label)?)
}

/// Plain SGD update θ' = θ − lr·g over matching tensor lists.
pub fn sgd_step(params: &[Tensor], grads: &[Tensor], lr: f64) -> Result<Vec<Tensor>> {
    if !(lr > 0.0) {
        return Err(Error::contract(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    if params.len() != grads.len() {
        return Err(Error::contract(format!(
            "sgd_step: {} parameter tensors vs {} gradient tensors",
            params.len(),
            grads.len()
        )));
    }
    params
        .iter()
        .zip(grads)
        .map(|(p, g)| p.sub(&g.scale(lr)))
        .collect()
}

/// Central-difference gradient oracle: independent of the graph machinery,
/// used by tests to check analytic gradients.
pub fn finite_difference_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    h: f64,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut buf = x.to_vec();
    for i in 0..x.len() {
        let orig = buf[i];
        buf[i] = orig + h;
        let fp = f(&buf);
        buf[i] = orig - h;
        let fm = f(&buf);
        buf[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn square_gradient() {
        let w = Node::variable(Tensor::scalar(3.0));
        let y = w.mul(&w).unwrap();
        let g = grad_values(&y, &[w]).unwrap();
        assert_eq!(g[0].scalar_value().unwrap(), 6.0);
    }

    #[test]
    fn second_derivative_of_square() {
        let w = Node::variable(Tensor::scalar(3.0));
        let y = w.mul(&w).unwrap();
        let g = grad(&y, &[w.clone()], true).unwrap();
        let gg = grad_values(&g[0], &[w]).unwrap();
        assert_eq!(gg[0].scalar_value().unwrap(), 2.0);
    }

    #[test]
    fn linear_forward_examples() {
        let w = Node::constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let x = Node::variable(Tensor::vector(vec![3.0, 4.0]).unwrap());
        let y = linear_forward(&w, &x).unwrap();
        assert_eq!(y.value().data(), &[3.0, 4.0]);

        let w0 = Node::constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let x0 = Node::variable(Tensor::vector(vec![5.0, 7.0]).unwrap());
        assert_eq!(linear_forward(&w0, &x0).unwrap().value().data(), &[0.0]);
    }

    #[test]
    fn linear_forward_input_gradient_is_column_sums() {
        // gradient of sum(Wx) wrt x equals column sums of W
        let wdata = vec![0.3, -1.2, 0.7, 2.0, -0.5, 0.1];
        let w = Node::constant(Tensor::matrix(3, 2, wdata.clone()).unwrap());
        let xv = [0.4, -0.9];
        let x = Node::variable(Tensor::vector(xv.to_vec()).unwrap());
        let y = linear_forward(&w, &x).unwrap().sum();
        let g = grad_values(&y, &[x]).unwrap();

        let fd = finite_difference_gradient(
            |xs| {
                let xt = Tensor::vector(xs.to_vec()).unwrap();
                Tensor::matrix(3, 2, wdata.clone()).unwrap().matvec(&xt).unwrap().sum()
            },
            &xv,
            1e-5,
        );
        for (a, b) in g[0].data().iter().zip(&fd) {
            assert_close(*a, *b, 1e-7);
        }
    }

    #[test]
    fn relu_forward_is_alpha_independent_and_backward_is_sigmoid() {
        let x = Node::variable(Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap());
        let y1 = x.relu(Some(SurrogateConfig::new(10.0).unwrap()));
        let y2 = x.relu(Some(SurrogateConfig::new(400.0).unwrap()));
        assert_eq!(y1.value().data(), &[0.0, 0.0, 2.0]);
        assert_eq!(y1.value().data(), y2.value().data());

        // backward at x = 0 is 0.5 for any alpha
        let x0 = Node::variable(Tensor::scalar(0.0));
        let y = x0.relu(Some(SurrogateConfig::new(77.0).unwrap())).sum();
        let g = grad_values(&y, &[x0]).unwrap();
        assert_eq!(g[0].scalar_value().unwrap(), 0.5);

        // backward at x = 1, alpha = 100 is within 1e-6 of 1
        let x1 = Node::variable(Tensor::scalar(1.0));
        let y = x1.relu(Some(SurrogateConfig::new(100.0).unwrap())).sum();
        let g = grad_values(&y, &[x1]).unwrap();
        assert_close(g[0].scalar_value().unwrap(), 1.0, 1e-6);

        // exact mode: subgradient 0 at the kink
        let xe = Node::variable(Tensor::scalar(0.0));
        let y = xe.relu(None).sum();
        let g = grad_values(&y, &[xe]).unwrap();
        assert_eq!(g[0].scalar_value().unwrap(), 0.0);
    }

    #[test]
    fn cross_entropy_values_and_gradient() {
        let logits = Node::variable(Tensor::vector(vec![0.0, 0.0]).unwrap());
        let ce = cross_entropy_logits(&logits, 0).unwrap();
        assert_close(ce.value().scalar_value().unwrap(), (2.0f64).ln(), 1e-12);

        let logits = Node::variable(Tensor::vector(vec![10.0, -10.0]).unwrap());
        let ce = cross_entropy_logits(&logits, 0).unwrap();
        // ln(1 + e^{-20})
        assert_close(
            ce.value().scalar_value().unwrap(),
            (-20.0f64).exp().ln_1p(),
            1e-15,
        );

        // gradient is softmax − one-hot
        let lv = [0.3, -0.7, 1.1];
        let logits = Node::variable(Tensor::vector(lv.to_vec()).unwrap());
        let ce = cross_entropy_logits(&logits, 1).unwrap();
        let g = grad_values(&ce, &[logits.clone()]).unwrap();
        let z: f64 = lv.iter().map(|v| v.exp()).sum();
        for (k, gk) in g[0].data().iter().enumerate() {
            let soft = lv[k].exp() / z;
            let expected = soft - if k == 1 { 1.0 } else { 0.0 };
            assert_close(*gk, expected, 1e-12);
        }

        assert!(cross_entropy_logits(&logits, 3).is_err());
    }

    #[test]
    fn grad_rejects_nonscalar_and_zeroes_unreachable() {
        let x = Node::variable(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(grad(&x, &[x.clone()], false).is_err());

        let y = x.sum();
        let stranger = Node::variable(Tensor::scalar(5.0));
        let g = grad_values(&y, &[stranger]).unwrap();
        assert_eq!(g[0].scalar_value().unwrap(), 0.0);
    }

    #[test]
    fn sgd_step_examples() {
        let p = vec![Tensor::vector(vec![1.0]).unwrap()];
        let g = vec![Tensor::vector(vec![2.0]).unwrap()];
        assert_eq!(sgd_step(&p, &g, 0.5).unwrap()[0].data(), &[0.0]);

        let p = vec![Tensor::vector(vec![1.0, 2.0]).unwrap()];
        let z = vec![Tensor::vector(vec![0.0, 0.0]).unwrap()];
        assert_eq!(sgd_step(&p, &z, 0.1).unwrap()[0].data(), &[1.0, 2.0]);

        let g = vec![Tensor::vector(vec![1.0, 1.0]).unwrap()];
        let out = sgd_step(&p, &g, 0.1).unwrap();
        assert_close(out[0].data()[0], 0.9, 1e-15);
        assert_close(out[0].data()[1], 1.9, 1e-15);

        let bad = vec![Tensor::vector(vec![1.0]).unwrap(), Tensor::scalar(0.0)];
        assert!(sgd_step(&p, &bad, 0.1).is_err());
    }

    #[test]
    fn graph_and_value_backwards_agree() {
        let w = Node::variable(Tensor::matrix(2, 3, vec![0.1, -0.4, 0.9, 0.2, 0.6, -1.0]).unwrap());
        let x = Node::variable(Tensor::vector(vec![0.5, -0.2, 0.8]).unwrap());
        let y = w
            .matvec(&x)
            .unwrap()
            .relu(Some(SurrogateConfig::new(25.0).unwrap()))
            .sum();
        let gv = grad_values(&y, &[w.clone(), x.clone()]).unwrap();
        let gg = grad(&y, &[w, x], true).unwrap();
        for (a, b) in gv.iter().zip(&gg) {
            assert_eq!(a.data(), b.value().data());
        }
    }

    #[test]
    fn margin_ops_are_mutual_transposes() {
        // <margin_weights(λ), M> == <λ, margin_gather(M)> for random data
        let labels = Rc::new(vec![1usize, 0, 2]);
        let classes = 3;
        let lam =
            Node::variable(Tensor::matrix(3, 2, vec![0.3, -0.7, 1.1, 0.2, -0.5, 0.9]).unwrap());
        let m = Node::variable(
            Tensor::matrix(3, 3, vec![0.1, 0.4, -0.2, 0.7, -0.9, 0.3, 0.5, 0.2, -0.6]).unwrap(),
        );
        let lhs = lam
            .margin_weights(&labels, classes)
            .unwrap()
            .mul(&m)
            .unwrap()
            .sum();
        let rhs = m
            .margin_gather(&labels, classes)
            .unwrap()
            .mul(&lam)
            .unwrap()
            .sum();
        assert_close(
            lhs.value().scalar_value().unwrap(),
            rhs.value().scalar_value().unwrap(),
            1e-12,
        );
    }

    #[test]
    fn evaluating_same_graph_twice_is_bit_identical() {
        let build = || {
            let x = Node::variable(Tensor::vector(vec![0.3, -1.4, 0.9]).unwrap());
            let w = Node::constant(
                Tensor::matrix(2, 3, vec![0.2, 0.1, -0.3, 0.8, -0.6, 0.4]).unwrap(),
            );
            let y = w.matvec(&x).unwrap().relu(None).exp().sum();
            let g = grad_values(&y, &[x]).unwrap();
            (y.value().clone(), g)
        };
        let (y1, g1) = build();
        let (y2, g2) = build();
        assert_eq!(y1.data(), y2.data());
        assert_eq!(g1[0].data(), g2[0].data());
    }
}

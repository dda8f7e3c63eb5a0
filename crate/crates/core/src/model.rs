//! Bias-free ReLU MLP classifiers.
//!
//! No layer carries a bias, so the network is homogeneous:
//! Φ(c·θ; x) = c^L · Φ(θ; x) for every c > 0, where L is the number of
//! weight matrices. The classification head is the last matrix and can be
//! expanded row-wise for class-incremental streams.

use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{grad, sgd_step, Node, SurrogateConfig};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 8] = b"RECLMDL1";

/// Architecture description: [D, h₁, …, h_k, C], all bias-free.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub first_layer_scale: f64,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, first_layer_scale: f64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::contract(format!(
                "need at least input and output sizes, got {:?}",
                layer_sizes
            )));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::contract(format!(
                "layer sizes must be positive, got {:?}",
                layer_sizes
            )));
        }
        if !(first_layer_scale > 0.0) {
            return Err(Error::contract(format!(
                "first_layer_scale must be positive, got {first_layer_scale}"
            )));
        }
        Ok(MlpSpec {
            layer_sizes,
            first_layer_scale,
        })
    }

    /// Number of weight matrices.
    pub fn depth(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }
}

/// The trainable parameters: one weight matrix per layer, no biases.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    matrices: Vec<Tensor>,
}

impl ParamVector {
    pub fn new(matrices: Vec<Tensor>) -> Result<Self> {
        if matrices.is_empty() {
            return Err(Error::contract("parameter vector needs at least one layer"));
        }
        for w in &matrices {
            w.rows()?;
        }
        for pair in matrices.windows(2) {
            if pair[1].cols()? != pair[0].rows()? {
                return Err(Error::shape(
                    "consecutive layers",
                    pair[0].shape(),
                    pair[1].shape(),
                ));
            }
        }
        Ok(ParamVector { matrices })
    }

    pub fn matrices(&self) -> &[Tensor] {
        &self.matrices
    }

    pub fn depth(&self) -> usize {
        self.matrices.len()
    }

    pub fn input_dim(&self) -> usize {
        self.matrices[0].cols().unwrap()
    }

    pub fn n_classes(&self) -> usize {
        self.matrices.last().unwrap().rows().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.matrices.iter().map(Tensor::len).sum()
    }

    /// (layer, rows, cols) triples describing the flat layout.
    pub fn layout(&self) -> Vec<(usize, usize, usize)> {
        self.matrices
            .iter()
            .enumerate()
            .map(|(i, w)| (i, w.rows().unwrap(), w.cols().unwrap()))
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for w in &self.matrices {
            out.extend_from_slice(w.data());
        }
        out
    }

    pub fn from_flat(layout: &[(usize, usize, usize)], flat: &[f64]) -> Result<Self> {
        let total: usize = layout.iter().map(|(_, r, c)| r * c).sum();
        if flat.len() != total {
            return Err(Error::contract(format!(
                "flat length {} does not match layout total {}",
                flat.len(),
                total
            )));
        }
        let mut matrices = Vec::with_capacity(layout.len());
        let mut off = 0;
        for &(_, r, c) in layout {
            matrices.push(Tensor::matrix(r, c, flat[off..off + r * c].to_vec())?);
            off += r * c;
        }
        ParamVector::new(matrices)
    }

    pub fn scale(&self, c: f64) -> ParamVector {
        ParamVector {
            matrices: self.matrices.iter().map(|w| w.scale(c)).collect(),
        }
    }

    /// θ' = θ − lr·g; layouts must match.
    pub fn sgd_step(&self, grads: &[Tensor], lr: f64) -> Result<ParamVector> {
        for (p, g) in self.matrices.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("sgd_step layout", p.shape(), g.shape()));
            }
        }
        Ok(ParamVector {
            matrices: sgd_step(&self.matrices, grads, lr)?,
        })
    }

    /// Leaf nodes over the matrices, one per layer.
    pub fn as_variables(&self) -> Vec<Node> {
        self.matrices
            .iter()
            .map(|w| Node::variable(w.clone()))
            .collect()
    }

    pub fn as_constants(&self) -> Vec<Node> {
        self.matrices
            .iter()
            .map(|w| Node::constant(w.clone()))
            .collect()
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::from_raw(vec![rows, cols], data)
}

/// Gaussian init with std 1/sqrt(fan_in) per layer; the first layer is then
/// shrunk by `first_layer_scale`. Deterministic per seed.
pub fn init_mlp(spec: &MlpSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut matrices = Vec::with_capacity(spec.depth());
    for l in 0..spec.depth() {
        let fan_in = spec.layer_sizes[l];
        let fan_out = spec.layer_sizes[l + 1];
        let std = 1.0 / (fan_in as f64).sqrt();
        let mut w = gaussian_matrix(&mut rng, fan_out, fan_in, std);
        if l == 0 {
            w = w.scale(spec.first_layer_scale);
        }
        matrices.push(w);
    }
    ParamVector { matrices }
}

/// Logits for a single input, as a graph over the given parameter nodes.
pub fn forward_graph(
    params: &[Node],
    x: &Node,
    surrogate: Option<SurrogateConfig>,
) -> Result<Node> {
    let mut h = x.clone();
    for (l, w) in params.iter().enumerate() {
        h = w.matvec(&h)?;
        if l + 1 < params.len() {
            h = h.relu(surrogate);
        }
    }
    Ok(h)
}

/// Logits for a batch laid out row-per-sample: X[n×D] -> [n×C].
pub fn forward_batch_graph(
    params: &[Node],
    x: &Node,
    surrogate: Option<SurrogateConfig>,
) -> Result<Node> {
    let mut h = x.clone();
    for (l, w) in params.iter().enumerate() {
        h = h.matmul_tb(w)?;
        if l + 1 < params.len() {
            h = h.relu(surrogate);
        }
    }
    Ok(h)
}

/// Logits without building a graph (evaluation fast path).
pub fn forward(params: &ParamVector, x: &Tensor) -> Result<Tensor> {
    let mut h = x.clone();
    for (l, w) in params.matrices.iter().enumerate() {
        h = w.matvec(&h)?;
        if l + 1 < params.matrices.len() {
            h = h.map(|v| v.max(0.0));
        }
    }
    Ok(h)
}

/// Batch logits without a graph: X[n×D] -> [n×C].
pub fn forward_batch(params: &ParamVector, x: &Tensor) -> Result<Tensor> {
    let mut h = x.clone();
    for (l, w) in params.matrices.iter().enumerate() {
        h = h.matmul_tb(w)?;
        if l + 1 < params.matrices.len() {
            h = h.map(|v| v.max(0.0));
        }
    }
    Ok(h)
}

/// Returns (Φ(c·θ; x), c^L · Φ(θ; x)); for a homogeneous network the two
/// agree up to float round-off.
pub fn homogeneity_check(
    params: &ParamVector,
    x: &Tensor,
    c: f64,
) -> Result<(Tensor, Tensor)> {
    if !(c > 0.0) {
        return Err(Error::contract(format!(
            "homogeneity scale must be positive, got {c}"
        )));
    }
    let scaled = forward(&params.scale(c), x)?;
    let reference = forward(params, x)?.scale(c.powi(params.depth() as i32));
    Ok((scaled, reference))
}

/// Append rows to the head. Old rows are copied bit-exactly; new rows use
/// the standard fan-in initializer.
pub fn expand_head(params: &ParamVector, extra_classes: usize, seed: u64) -> Result<ParamVector> {
    if extra_classes == 0 {
        return Err(Error::contract("expand_head needs extra_classes >= 1"));
    }
    let mut matrices = params.matrices.clone();
    let head = matrices.pop().unwrap();
    let (rows, cols) = (head.rows()?, head.cols()?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fresh = gaussian_matrix(&mut rng, extra_classes, cols, 1.0 / (cols as f64).sqrt());
    let mut data = head.data().to_vec();
    data.extend_from_slice(fresh.data());
    matrices.push(Tensor::from_raw(vec![rows + extra_classes, cols], data));
    Ok(ParamVector { matrices })
}

/// One SGD training step on the mean cross-entropy of a labeled batch.
/// Returns the updated parameters and the batch loss.
pub fn ce_training_step(
    params: &ParamVector,
    features: &Tensor,
    labels: &[usize],
    lr: f64,
    extra_penalty: Option<&dyn Fn(&[Node]) -> Result<Option<Node>>>,
    transform: Option<&mut dyn FnMut(Vec<Tensor>) -> Result<Vec<Tensor>>>,
) -> Result<(ParamVector, f64)> {
    let param_nodes = params.as_variables();
    let logits = forward_batch_graph(&param_nodes, &Node::constant(features.clone()), None)?;
    let loss = batch_cross_entropy(&logits, labels)?;
    let loss = match extra_penalty {
        Some(f) => match f(&param_nodes)? {
            Some(p) => loss.add(&p)?,
            None => loss,
        },
        None => loss,
    };
    let loss_value = loss.value().scalar_value()?;
    let mut grads = crate::graph::grad_values(&loss, &param_nodes)?;
    if let Some(t) = transform {
        grads = t(grads)?;
    }
    Ok((params.sgd_step(&grads, lr)?, loss_value))
}

/// Mean cross-entropy over batch logits [n×C].
pub fn batch_cross_entropy(logits: &Node, labels: &[usize]) -> Result<Node> {
    let n = logits.value().rows()?;
    if n != labels.len() {
        return Err(Error::contract(format!(
            "{n} logit rows vs {} labels",
            labels.len()
        )));
    }
    let mut total: Option<Node> = None;
    for (i, &y) in labels.iter().enumerate() {
        let ce = crate::graph::cross_entropy_logits(&logits.row(i)?, y)?;
        total = Some(match total {
            Some(t) => t.add(&ce)?,
            None => ce,
        });
    }
    Ok(total.unwrap().scale(1.0 / n as f64))
}

/// ∇_θ of a scalar graph node with respect to parameter nodes, as values.
pub fn param_grads(loss: &Node, params: &[Node]) -> Result<Vec<Tensor>> {
    crate::graph::grad_values(loss, params)
}

/// ∇_θ of a scalar graph node, as differentiable nodes.
pub fn param_grads_graph(loss: &Node, params: &[Node]) -> Result<Vec<Node>> {
    grad(loss, params, true)
}

pub fn save_checkpoint(params: &ParamVector, spec_scale: f64, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let sizes: Vec<usize> = std::iter::once(params.input_dim())
        .chain(params.matrices.iter().map(|w| w.rows().unwrap()))
        .collect();
    buf.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
    for s in &sizes {
        buf.extend_from_slice(&(*s as u32).to_le_bytes());
    }
    buf.extend_from_slice(&spec_scale.to_le_bytes());
    for w in &params.matrices {
        for v in w.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamVector, MlpSpec)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_checkpoint(&bytes)
}

fn parse_checkpoint(bytes: &[u8]) -> Result<(ParamVector, MlpSpec)> {
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(Error::parse(*off, "checkpoint truncated"));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    if take(&mut off, 8)? != CHECKPOINT_MAGIC {
        return Err(Error::parse(0, "bad checkpoint magic"));
    }
    let n_sizes = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    if n_sizes < 2 {
        return Err(Error::parse(off, "checkpoint needs at least 2 layer sizes"));
    }
    let mut sizes = Vec::with_capacity(n_sizes);
    for _ in 0..n_sizes {
        sizes.push(u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize);
    }
    let scale = f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
    let spec = MlpSpec::new(sizes.clone(), scale)?;
    let mut matrices = Vec::with_capacity(spec.depth());
    for l in 0..spec.depth() {
        let (r, c) = (sizes[l + 1], sizes[l]);
        let raw = take(&mut off, r * c * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        matrices.push(Tensor::matrix(r, c, data)?);
    }
    if off != bytes.len() {
        return Err(Error::parse(off, "trailing bytes in checkpoint"));
    }
    Ok((ParamVector::new(matrices)?, spec))
}

/// Labels for graph ops come wrapped in an Rc so node clones stay cheap.
pub fn shared_labels(labels: &[usize]) -> Rc<Vec<usize>> {
    Rc::new(labels.to_vec())
}

//! Weight-space dataset reconstruction.
//!
//! A converged bias-free classifier sits near a stationary point where its
//! weights are a nonnegative combination of per-sample logit-margin
//! gradients. Holding θ fixed, we optimize candidate inputs xᵢ (with fixed,
//! evenly split labels) and coefficients λᵢⱼ so that
//! ‖θ − Σᵢⱼ λᵢⱼ ∇_θ(Φ_yᵢ − Φⱼ)(θ; xᵢ)‖² becomes small, plus a hinge that
//! keeps the coefficients above a floor and a hinge that keeps candidate
//! pixels inside the normalized value range. The recovered samples are then
//! mixed into the next task's training data.

use std::io::Read;
use std::path::Path;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{mix_seed, LabeledDataset, Scenario, Task};
use crate::error::{Error, Result};
use crate::graph::{grad, grad_values, Node, SurrogateConfig};
use crate::model::{expand_head, forward_batch_graph, ParamVector};
use crate::strategies::{train_task, Strategy, TaskContext, TrainConfig};
use crate::tensor::Tensor;

const DUMP_MAGIC: &[u8; 8] = b"RECLCND1";
const SALT_RECON: u64 = 0x10;
const SALT_EXPAND: u64 = 0x11;
const SALT_COMBINE: u64 = 0x12;

/// Reconstruction candidates with fixed labels and dual coefficients.
#[derive(Clone, Debug)]
pub struct CandidateSet {
    /// m×d candidate inputs.
    pub xs: Tensor,
    /// Head-slot labels, evenly split over the target classes.
    pub labels: Vec<usize>,
    /// m×(C−1) coefficients, one per candidate per non-true class.
    pub lambdas: Tensor,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.xs.cols().unwrap()
    }

    /// The candidates as a labeled dataset.
    pub fn as_dataset(&self) -> Result<LabeledDataset> {
        LabeledDataset::new(self.xs.clone(), self.labels.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconHyperparams {
    pub lambda_min: f64,
    pub sigma_x: f64,
    pub lr_x: f64,
    pub lr_lambda: f64,
    pub n_rec: usize,
    pub m: usize,
    pub alpha: f64,
}

impl ReconHyperparams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_min", self.lambda_min),
            ("sigma_x", self.sigma_x),
            ("lr_x", self.lr_x),
            ("lr_lambda", self.lr_lambda),
            ("alpha", self.alpha),
        ] {
            if !(v > 0.0) {
                return Err(Error::contract(format!(
                    "reconstruction hyperparameter {name} must be positive, got {v}"
                )));
            }
        }
        if self.m == 0 {
            return Err(Error::contract("reconstruction needs m >= 1"));
        }
        Ok(())
    }
}

/// xᵢ ~ N(0, σ_x²·I); labels round-robin over the ascending target classes;
/// coefficients start at the constant 0.1.
pub fn init_candidates(
    m: usize,
    d: usize,
    target_classes: &[usize],
    head_size: usize,
    hp: &ReconHyperparams,
    seed: u64,
) -> Result<CandidateSet> {
    if target_classes.is_empty() {
        return Err(Error::contract("init_candidates needs target classes"));
    }
    if m == 0 {
        return Err(Error::contract("init_candidates needs m >= 1"));
    }
    if head_size < 2 {
        return Err(Error::contract(format!(
            "reconstruction needs a head of at least 2 classes, got {head_size}"
        )));
    }
    let mut sorted = target_classes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if let Some(&bad) = sorted.iter().find(|&&c| c >= head_size) {
        return Err(Error::contract(format!(
            "target class {bad} outside head of size {head_size}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..m * d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * hp.sigma_x
        })
        .collect();
    let labels: Vec<usize> = (0..m).map(|i| sorted[i % sorted.len()]).collect();
    Ok(CandidateSet {
        xs: Tensor::from_raw(vec![m, d], data),
        labels,
        lambdas: Tensor::filled(&[m, head_size - 1], 0.1),
    })
}

/// The stationarity residual ‖θ − Σᵢⱼ λᵢⱼ ∇_θ(Φ_yᵢ − Φⱼ)‖²₂, built with the
/// smooth-ReLU backward so it can be differentiated w.r.t. xs and λ.
/// θ enters as constants only.
pub fn loss_rec(
    theta: &ParamVector,
    xs: &Node,
    lambdas: &Node,
    labels: &Rc<Vec<usize>>,
    alpha: f64,
) -> Result<Node> {
    let classes = theta.n_classes();
    let expect = [labels.len(), classes.saturating_sub(1)];
    if lambdas.shape() != expect {
        return Err(Error::shape("lambda coefficients", lambdas.shape(), &expect));
    }
    let theta_nodes = theta.as_constants();
    let surrogate = Some(SurrogateConfig::new(alpha)?);
    let logits = forward_batch_graph(&theta_nodes, xs, surrogate)?;
    let weights = lambdas.margin_weights(labels, classes)?;
    let margin_sum = weights.mul(&logits)?.sum();
    let theta_grads = grad(&margin_sum, &theta_nodes, true)?;

    let mut total: Option<Node> = None;
    for (theta_l, grad_l) in theta_nodes.iter().zip(&theta_grads) {
        let residual = theta_l.sub(grad_l)?;
        let term = residual.mul(&residual)?.sum();
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("model has at least one layer"))
}

/// Σ max{−λ, −λ_min}: pushes any coefficient below the floor upward and is
/// flat above it.
pub fn loss_lambda(lambdas: &Node, lambda_min: f64) -> Result<Node> {
    if !(lambda_min > 0.0) {
        return Err(Error::contract(format!(
            "lambda_min must be positive, got {lambda_min}"
        )));
    }
    let count = lambdas.value().len() as f64;
    let floor = Node::constant(Tensor::filled(lambdas.shape(), lambda_min));
    let hinge = floor.sub(lambdas)?.relu(None).sum();
    hinge.sub(&Node::scalar_const(count * lambda_min))
}

/// Σᵢₖ max{max{xᵢₖ−1, 0}, max{−xᵢₖ−1, 0}}: zero exactly when every
/// coordinate lies in [−1, 1].
pub fn loss_prior(xs: &Node) -> Result<Node> {
    let ones = Node::constant(Tensor::filled(xs.shape(), 1.0));
    let above = xs.sub(&ones)?.relu(None).sum();
    let below = xs.neg().sub(&ones)?.relu(None).sum();
    above.add(&below)
}

/// Per-step record of the three loss components.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct LossTrace {
    pub l_rec: f64,
    pub l_lambda: f64,
    pub l_prior: f64,
    pub l_full: f64,
}

#[derive(Clone, Debug)]
pub struct ReconOutcome {
    pub candidates: CandidateSet,
    pub trace: Vec<LossTrace>,
}

impl ReconOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.trace.last().map(|t| t.l_full)
    }
}

/// Full-batch gradient descent on L_rec + L_λ + L_prior over the candidate
/// set, with independent learning rates for xs and λ. θ is never touched.
/// A non-finite loss aborts with the step index and the loss components.
pub fn reconstruct(
    theta: &ParamVector,
    hp: &ReconHyperparams,
    target_classes: &[usize],
    seed: u64,
) -> Result<ReconOutcome> {
    hp.validate()?;
    let mut cands = init_candidates(
        hp.m,
        theta.input_dim(),
        target_classes,
        theta.n_classes(),
        hp,
        seed,
    )?;
    let labels = crate::model::shared_labels(&cands.labels);
    let mut trace = Vec::with_capacity(hp.n_rec);

    for step in 0..hp.n_rec {
        let xs = Node::variable(cands.xs.clone());
        let lam = Node::variable(cands.lambdas.clone());
        let l_rec = loss_rec(theta, &xs, &lam, &labels, hp.alpha)?;
        let l_lam = loss_lambda(&lam, hp.lambda_min)?;
        let l_pri = loss_prior(&xs)?;
        let l_full = l_rec.add(&l_lam)?.add(&l_pri)?;

        let entry = LossTrace {
            l_rec: l_rec.value().scalar_value()?,
            l_lambda: l_lam.value().scalar_value()?,
            l_prior: l_pri.value().scalar_value()?,
            l_full: l_full.value().scalar_value()?,
        };
        if !entry.l_full.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                l_rec: entry.l_rec,
                l_lambda: entry.l_lambda,
                l_prior: entry.l_prior,
            });
        }
        trace.push(entry);

        let gs = grad_values(&l_full, &[xs, lam])?;
        cands.xs = cands.xs.sub(&gs[0].scale(hp.lr_x))?;
        cands.lambdas = cands.lambdas.sub(&gs[1].scale(hp.lr_lambda))?;
    }

    Ok(ReconOutcome {
        candidates: cands,
        trace,
    })
}

/// Union of the current task's data and the reconstructed candidates,
/// uniformly shuffled.
pub fn combine_with_task(
    train: &LabeledDataset,
    candidates: &CandidateSet,
    seed: u64,
) -> Result<LabeledDataset> {
    let recon = candidates.as_dataset()?;
    Ok(train.concat(&recon)?.shuffled(seed))
}

/// Number of candidates mandated by the counts of previously seen tasks.
pub fn reconstruction_count(prev_counts: &[usize]) -> usize {
    prev_counts.iter().sum()
}

/// One task of reconstruction-augmented training.
///
/// For the first task this is ordinary training. Later tasks first recover
/// candidates from the frozen pre-task parameters (labels evenly split over
/// every previously seen class), then expand the head if the scenario calls
/// for it, mix the candidates into the task's data, and train as usual.
/// Reuses `precomputed` candidates when in-training tuning already ran the
/// winning reconstruction.
#[allow(clippy::too_many_arguments)]
pub fn recl_train_task(
    model: &ParamVector,
    task: &Task,
    new_head_classes: usize,
    strategy: &mut dyn Strategy,
    cfg: &TrainConfig,
    ctx: &TaskContext,
    hp: &ReconHyperparams,
    precomputed: Option<ReconOutcome>,
) -> Result<(ParamVector, Option<ReconOutcome>)> {
    if ctx.task_index == 0 {
        let trained = train_task(model, &task.train, strategy, cfg, ctx)?;
        return Ok((trained, None));
    }

    let targets: Vec<usize> = (0..model.n_classes()).collect();
    let outcome = match precomputed {
        Some(o) => o,
        None => reconstruct(
            model,
            hp,
            &targets,
            mix_seed(mix_seed(ctx.seed, SALT_RECON), ctx.task_index as u64),
        )?,
    };

    let model = match (ctx.scenario, new_head_classes) {
        (Scenario::Cil, extra) if extra > 0 => expand_head(
            model,
            extra,
            mix_seed(mix_seed(ctx.seed, SALT_EXPAND), ctx.task_index as u64),
        )?,
        _ => model.clone(),
    };

    let combined = combine_with_task(
        &task.train,
        &outcome.candidates,
        mix_seed(mix_seed(ctx.seed, SALT_COMBINE), ctx.task_index as u64),
    )?;
    let trained = train_task(&model, &combined, strategy, cfg, ctx)?;
    Ok((trained, Some(outcome)))
}

/// Dump layout: magic, then little-endian m, d, λ-columns, labels (u32),
/// xs, lambdas (f64).
pub fn write_candidate_dump(cands: &CandidateSet, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DUMP_MAGIC);
    let lam_cols = cands.lambdas.cols()?;
    for v in [cands.len() as u32, cands.dim() as u32, lam_cols as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &l in &cands.labels {
        buf.extend_from_slice(&(l as u32).to_le_bytes());
    }
    for v in cands.xs.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in cands.lambdas.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_candidate_dump(path: &Path) -> Result<CandidateSet> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(Error::parse(*off, "candidate dump truncated"));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    if take(&mut off, 8)? != DUMP_MAGIC {
        return Err(Error::parse(0, "bad candidate dump magic"));
    }
    let read_u32 = |off: &mut usize| -> Result<usize> {
        Ok(u32::from_le_bytes(take(off, 4)?.try_into().unwrap()) as usize)
    };
    let m = read_u32(&mut off)?;
    let d = read_u32(&mut off)?;
    let lam_cols = read_u32(&mut off)?;
    let mut labels = Vec::with_capacity(m);
    for _ in 0..m {
        labels.push(read_u32(&mut off)?);
    }
    let read_f64s = |off: &mut usize, n: usize| -> Result<Vec<f64>> {
        let raw = take(off, n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect())
    };
    let xs = Tensor::matrix(m, d, read_f64s(&mut off, m * d)?)?;
    let lambdas = Tensor::matrix(m, lam_cols, read_f64s(&mut off, m * lam_cols)?)?;
    if off != bytes.len() {
        return Err(Error::parse(off, "trailing bytes in candidate dump"));
    }
    Ok(CandidateSet {
        xs,
        labels,
        lambdas,
    })
}

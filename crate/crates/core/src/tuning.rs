//! In-training selection of reconstruction hyperparameters.
//!
//! Three strategies: fixed defaults, random search scored by the final
//! combined reconstruction loss, and random search scored by structural
//! similarity against a small buffer of real reference samples. The random
//! search draws log-uniformly per parameter and is deterministic per seed;
//! ties resolve to the lowest trial index.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{mix_seed, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::ParamVector;
use crate::reconstruction::{reconstruct, ReconHyperparams, ReconOutcome};
use crate::tensor::Tensor;

/// Log-uniform sampling ranges for the four tuned hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct SearchSpace {
    pub lambda_min: (f64, f64),
    pub sigma_x: (f64, f64),
    pub lr_x: (f64, f64),
    pub lr_lambda: (f64, f64),
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            lambda_min: (0.01, 0.5),
            sigma_x: (1e-5, 1.0),
            lr_x: (1e-5, 1.0),
            lr_lambda: (1e-5, 1.0),
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("lambda_min", self.lambda_min),
            ("sigma_x", self.sigma_x),
            ("lr_x", self.lr_x),
            ("lr_lambda", self.lr_lambda),
        ] {
            if !(lo > 0.0 && hi > lo) {
                return Err(Error::contract(format!(
                    "search range for {name} needs 0 < lower < upper, got ({lo}, {hi})"
                )));
            }
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng, base: &ReconHyperparams) -> ReconHyperparams {
        let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| -> f64 {
            let u: f64 = rng.random_range(0.0..1.0);
            (lo.ln() + u * (hi.ln() - lo.ln())).exp()
        };
        ReconHyperparams {
            lambda_min: draw(rng, self.lambda_min),
            sigma_x: draw(rng, self.sigma_x),
            lr_x: draw(rng, self.lr_x),
            lr_lambda: draw(rng, self.lr_lambda),
            ..*base
        }
    }
}

/// Fixed defaults; n_rec, m and alpha come from the run configuration.
pub fn tune_naive(base: &ReconHyperparams) -> ReconHyperparams {
    ReconHyperparams {
        lambda_min: 0.1,
        sigma_x: 1e-3,
        lr_x: 0.01,
        lr_lambda: 0.01,
        ..*base
    }
}

/// One scored search trial.
#[derive(Clone, Debug, serde::Serialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub lambda_min: f64,
    pub sigma_x: f64,
    pub lr_x: f64,
    pub lr_lambda: f64,
    /// Final L_full for the unsupervised strategy (lower is better),
    /// mean SSIM for the supervised one (higher is better). Aborted
    /// trials score infinitely badly.
    pub score: f64,
}

#[derive(Debug)]
pub struct TuningOutcome {
    pub hp: ReconHyperparams,
    /// The winning trial's finished reconstruction, reusable as Step 1.
    pub outcome: Option<ReconOutcome>,
    pub trials: Vec<TrialRecord>,
    /// Set when every trial aborted and the defaults were used instead.
    pub fell_back: bool,
}

/// Random search minimizing the final combined reconstruction loss.
pub fn tune_unsupervised(
    theta: &ParamVector,
    space: &SearchSpace,
    n_trials: usize,
    base: &ReconHyperparams,
    target_classes: &[usize],
    seed: u64,
) -> Result<TuningOutcome> {
    if n_trials == 0 {
        return Err(Error::contract("tuning needs at least one trial"));
    }
    space.validate()?;
    let cand_seed = mix_seed(seed, 0xCA);
    let mut trials = Vec::with_capacity(n_trials);
    let mut best: Option<(usize, ReconHyperparams, ReconOutcome)> = None;

    for trial in 0..n_trials {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, trial as u64));
        let hp = space.sample(&mut rng, base);
        let (score, outcome) = match reconstruct(theta, &hp, target_classes, cand_seed) {
            Ok(out) => (out.final_loss().unwrap_or(f64::INFINITY), Some(out)),
            Err(Error::NonFiniteLoss { .. }) => (f64::INFINITY, None),
            Err(e) => return Err(e),
        };
        trials.push(TrialRecord {
            trial,
            lambda_min: hp.lambda_min,
            sigma_x: hp.sigma_x,
            lr_x: hp.lr_x,
            lr_lambda: hp.lr_lambda,
            score,
        });
        if let Some(out) = outcome {
            let better = match &best {
                Some((_, _, b)) => score < b.final_loss().unwrap_or(f64::INFINITY),
                None => true,
            };
            if better {
                best = Some((trial, hp, out));
            }
        }
    }

    match best {
        Some((_, hp, outcome)) => Ok(TuningOutcome {
            hp,
            outcome: Some(outcome),
            trials,
            fell_back: false,
        }),
        None => Ok(TuningOutcome {
            hp: tune_naive(base),
            outcome: None,
            trials,
            fell_back: true,
        }),
    }
}

/// For each reference row, the index of the squared-L2-closest candidate
/// after standardizing both sets by the references' per-coordinate mean and
/// standard deviation (zero-spread coordinates divide by 1). Ties go to the
/// lowest candidate index.
pub fn match_nearest(references: &Tensor, candidates: &Tensor) -> Result<Vec<usize>> {
    let r = references.rows()?;
    let m = candidates.rows()?;
    let d = references.cols()?;
    if candidates.cols()? != d {
        return Err(Error::shape(
            "match_nearest",
            references.shape(),
            candidates.shape(),
        ));
    }
    if r == 0 || m == 0 {
        return Err(Error::contract("match_nearest needs nonempty inputs"));
    }

    let mut mean = vec![0.0; d];
    for i in 0..r {
        for (mu, v) in mean.iter_mut().zip(references.row_slice(i)) {
            *mu += v / r as f64;
        }
    }
    let mut std = vec![0.0; d];
    for i in 0..r {
        for ((s, v), mu) in std.iter_mut().zip(references.row_slice(i)).zip(&mean) {
            *s += (v - mu) * (v - mu) / r as f64;
        }
    }
    for s in &mut std {
        *s = s.sqrt();
        if *s == 0.0 {
            *s = 1.0;
        }
    }

    let standardize = |row: &[f64]| -> Vec<f64> {
        row.iter()
            .zip(&mean)
            .zip(&std)
            .map(|((v, mu), s)| (v - mu) / s)
            .collect()
    };
    let cand_std: Vec<Vec<f64>> = (0..m)
        .map(|j| standardize(candidates.row_slice(j)))
        .collect();

    let mut pairing = Vec::with_capacity(r);
    for i in 0..r {
        let ref_std = standardize(references.row_slice(i));
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (j, cand) in cand_std.iter().enumerate() {
            let dist: f64 = ref_std
                .iter()
                .zip(cand)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if dist < best_d {
                best_d = dist;
                best = j;
            }
        }
        pairing.push(best);
    }
    Ok(pairing)
}

/// Global single-window structural similarity with the standard stabilizers
/// C1 = (0.01)², C2 = (0.03)² on dynamic range 1.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("ssim", a.shape(), b.shape()));
    }
    if a.is_empty() {
        return Err(Error::contract("ssim needs nonempty inputs"));
    }
    let n = a.len() as f64;
    let mu_a = a.sum() / n;
    let mu_b = b.sum() / n;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    let mut cov = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        var_a += (x - mu_a) * (x - mu_a) / n;
        var_b += (y - mu_b) * (y - mu_b) / n;
        cov += (x - mu_a) * (y - mu_b) / n;
    }
    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;
    Ok(((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)))
}

/// Per-task reference samples for the supervised strategy: k per class.
#[derive(Clone, Debug, Default)]
pub struct ReferenceBuffer {
    samples: Option<LabeledDataset>,
    pub per_class: usize,
}

impl ReferenceBuffer {
    pub fn new(per_class: usize) -> Self {
        ReferenceBuffer {
            samples: None,
            per_class,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.as_ref().map_or(0, LabeledDataset::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn samples(&self) -> Option<&LabeledDataset> {
        self.samples.as_ref()
    }

    /// Store `per_class` samples per class of the finished task.
    pub fn push_task(&mut self, train: &LabeledDataset, seed: u64) -> Result<()> {
        use rand::seq::SliceRandom;
        let mut picked = Vec::new();
        let mut classes = train.class_set().to_vec();
        classes.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for class in classes {
            let mut pool: Vec<usize> = (0..train.len())
                .filter(|&i| train.labels()[i] == class)
                .collect();
            pool.shuffle(&mut rng);
            pool.truncate(self.per_class);
            picked.extend(pool);
        }
        picked.sort_unstable();
        let addition = train.subset(&picked)?;
        self.samples = Some(match &self.samples {
            Some(s) => s.concat(&addition)?,
            None => addition,
        });
        Ok(())
    }
}

/// Score one candidate set against references: re-add the training mean to
/// both, map both through the references' min-max stretch to [0, 1], pair
/// via `match_nearest`, then average the pairwise SSIM.
pub fn supervised_score(
    candidates: &Tensor,
    references: &Tensor,
    train_mean: &Tensor,
) -> Result<f64> {
    let d = references.cols()?;
    if train_mean.shape() != [d] {
        return Err(Error::shape("supervised_score mean", train_mean.shape(), &[d]));
    }
    let add_mean = |t: &Tensor| -> Tensor {
        let rows = t.rows().unwrap();
        let mut data = t.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            for (v, m) in row.iter_mut().zip(train_mean.data()) {
                *v += m;
            }
        }
        Tensor::from_raw(vec![rows, d], data)
    };
    let refs_rem = add_mean(references);
    let cands_rem = add_mean(candidates);

    let lo = refs_rem.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = refs_rem
        .data()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let stretch = |t: &Tensor| t.map(|v| (v - lo) / span);
    let refs01 = stretch(&refs_rem);
    let cands01 = stretch(&cands_rem);

    let pairing = match_nearest(&refs01, &cands01)?;
    let mut total = 0.0;
    for (i, &j) in pairing.iter().enumerate() {
        let a = Tensor::from_raw(vec![d], refs01.row_slice(i).to_vec());
        let b = Tensor::from_raw(vec![d], cands01.row_slice(j).to_vec());
        total += ssim(&a, &b)?;
    }
    Ok(total / pairing.len() as f64)
}

/// Random search maximizing mean SSIM between reconstructed candidates and
/// buffered reference samples.
#[allow(clippy::too_many_arguments)]
pub fn tune_supervised(
    theta: &ParamVector,
    buffer: &ReferenceBuffer,
    space: &SearchSpace,
    n_trials: usize,
    base: &ReconHyperparams,
    target_classes: &[usize],
    train_mean: &Tensor,
    seed: u64,
) -> Result<TuningOutcome> {
    let Some(references) = buffer.samples() else {
        return Err(Error::contract(
            "supervised tuning needs a nonempty reference buffer; use the naive or unsupervised strategy instead",
        ));
    };
    if n_trials == 0 {
        return Err(Error::contract("tuning needs at least one trial"));
    }
    space.validate()?;
    let cand_seed = mix_seed(seed, 0xCA);
    let mut trials = Vec::with_capacity(n_trials);
    let mut best: Option<(f64, ReconHyperparams, ReconOutcome)> = None;

    for trial in 0..n_trials {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, trial as u64));
        let hp = space.sample(&mut rng, base);
        let (score, outcome) = match reconstruct(theta, &hp, target_classes, cand_seed) {
            Ok(out) => {
                let s = supervised_score(&out.candidates.xs, references.features(), train_mean)?;
                (s, Some(out))
            }
            Err(Error::NonFiniteLoss { .. }) => (f64::NEG_INFINITY, None),
            Err(e) => return Err(e),
        };
        trials.push(TrialRecord {
            trial,
            lambda_min: hp.lambda_min,
            sigma_x: hp.sigma_x,
            lr_x: hp.lr_x,
            lr_lambda: hp.lr_lambda,
            score,
        });
        if let Some(out) = outcome {
            let better = match &best {
                Some((b, _, _)) => score > *b,
                None => true,
            };
            if better {
                best = Some((score, hp, out));
            }
        }
    }

    match best {
        Some((_, hp, outcome)) => Ok(TuningOutcome {
            hp,
            outcome: Some(outcome),
            trials,
            fell_back: false,
        }),
        None => Ok(TuningOutcome {
            hp: tune_naive(base),
            outcome: None,
            trials,
            fell_back: true,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_mlp, MlpSpec};

    fn base() -> ReconHyperparams {
        ReconHyperparams {
            lambda_min: 0.1,
            sigma_x: 1e-3,
            lr_x: 0.01,
            lr_lambda: 0.01,
            n_rec: 30,
            m: 4,
            alpha: 100.0,
        }
    }

    #[test]
    fn naive_is_constant_and_inside_search_space() {
        let a = tune_naive(&base());
        let b = tune_naive(&base());
        assert_eq!(a, b);
        let space = SearchSpace::default();
        assert!(a.lambda_min >= space.lambda_min.0 && a.lambda_min <= space.lambda_min.1);
        assert!(a.sigma_x >= space.sigma_x.0 && a.sigma_x <= space.sigma_x.1);
        assert!(a.lr_x >= space.lr_x.0 && a.lr_x <= space.lr_x.1);
        assert!(a.lr_lambda >= space.lr_lambda.0 && a.lr_lambda <= space.lr_lambda.1);
    }

    #[test]
    fn unsupervised_returns_argmin_and_is_deterministic() {
        let spec = MlpSpec::new(vec![2, 6, 2], 1.0).unwrap();
        let theta = init_mlp(&spec, 44);
        let space = SearchSpace::default();
        let out = tune_unsupervised(&theta, &space, 6, &base(), &[0, 1], 5).unwrap();
        assert!(!out.fell_back);
        assert_eq!(out.trials.len(), 6);
        let winner = out.outcome.as_ref().unwrap().final_loss().unwrap();
        for t in &out.trials {
            assert!(winner <= t.score + 1e-15, "winner {winner} vs trial {}", t.score);
        }

        let again = tune_unsupervised(&theta, &space, 6, &base(), &[0, 1], 5).unwrap();
        for (a, b) in out.trials.iter().zip(&again.trials) {
            assert_eq!(a.lambda_min, b.lambda_min);
            assert_eq!(a.score, b.score);
        }

        // single trial returns that trial's sample
        let one = tune_unsupervised(&theta, &space, 1, &base(), &[0, 1], 9).unwrap();
        assert_eq!(one.trials.len(), 1);
        assert_eq!(one.hp.lambda_min, one.trials[0].lambda_min);
    }

    #[test]
    fn match_nearest_exact_and_singleton() {
        let refs = Tensor::matrix(2, 3, vec![0.1, 0.5, 0.9, -0.3, 0.2, 0.4]).unwrap();
        // candidates contain an exact copy of each reference (reversed)
        let cands = Tensor::matrix(
            3,
            3,
            vec![-0.3, 0.2, 0.4, 0.7, 0.7, 0.7, 0.1, 0.5, 0.9],
        )
        .unwrap();
        let pairing = match_nearest(&refs, &cands).unwrap();
        assert_eq!(pairing, vec![2, 0]);

        let one_ref = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let one_cand = Tensor::matrix(1, 2, vec![5.0, 5.0]).unwrap();
        assert_eq!(match_nearest(&one_ref, &one_cand).unwrap(), vec![0]);

        // constant coordinate: zero std replaced by 1, no NaN
        let refs = Tensor::matrix(2, 2, vec![1.0, 0.3, 1.0, 0.8]).unwrap();
        let cands = Tensor::matrix(2, 2, vec![1.0, 0.31, 1.0, 0.79]).unwrap();
        assert_eq!(match_nearest(&refs, &cands).unwrap(), vec![0, 1]);
    }

    #[test]
    fn match_nearest_agrees_with_plain_double_loop() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let r = rng.random_range(1..8usize);
            let m = rng.random_range(1..8usize);
            let d = rng.random_range(1..5usize);
            let refs = Tensor::matrix(
                r,
                d,
                (0..r * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let cands = Tensor::matrix(
                m,
                d,
                (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let got = match_nearest(&refs, &cands).unwrap();

            // independent oracle: recompute standardization and argmin by hand
            let mut mean = vec![0.0; d];
            let mut std = vec![0.0; d];
            for i in 0..r {
                for k in 0..d {
                    mean[k] += refs.get2(i, k) / r as f64;
                }
            }
            for i in 0..r {
                for k in 0..d {
                    std[k] += (refs.get2(i, k) - mean[k]).powi(2) / r as f64;
                }
            }
            for s in &mut std {
                *s = s.sqrt();
                if *s == 0.0 {
                    *s = 1.0;
                }
            }
            for i in 0..r {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for j in 0..m {
                    let mut dist = 0.0;
                    for k in 0..d {
                        let a = (refs.get2(i, k) - mean[k]) / std[k];
                        let b = (cands.get2(j, k) - mean[k]) / std[k];
                        dist += (a - b) * (a - b);
                    }
                    if dist < best_d {
                        best_d = dist;
                        best = j;
                    }
                }
                assert_eq!(got[i], best);
            }
        }
    }

    #[test]
    fn ssim_properties() {
        let a = Tensor::vector(vec![0.1, 0.5, 0.9, 0.2]).unwrap();
        let b = Tensor::vector(vec![0.3, 0.4, 0.8, 0.1]).unwrap();
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-12);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        let v = ssim(&a, &b).unwrap();
        assert!((-1.0..=1.0).contains(&v));

        // constant images: closed-form luminance term only
        let x = Tensor::vector(vec![0.2; 8]).unwrap();
        let y = Tensor::vector(vec![0.7; 8]).unwrap();
        let c1 = 0.0001;
        let c2 = 0.0009;
        let expect = ((2.0 * 0.2 * 0.7 + c1) / (0.04f64 + 0.49 + c1)) * (c2 / c2);
        assert!((ssim(&x, &y).unwrap() - expect).abs() < 1e-12);

        let short = Tensor::vector(vec![0.1]).unwrap();
        assert!(ssim(&a, &short).is_err());
    }

    #[test]
    fn supervised_needs_buffer_and_reaches_one_on_exact_copies() {
        let spec = MlpSpec::new(vec![2, 6, 2], 1.0).unwrap();
        let theta = init_mlp(&spec, 3);
        let empty = ReferenceBuffer::new(10);
        let err = tune_supervised(
            &theta,
            &empty,
            &SearchSpace::default(),
            2,
            &base(),
            &[0, 1],
            &Tensor::vector(vec![0.0, 0.0]).unwrap(),
            1,
        );
        assert!(err.is_err());

        // a candidate set equal to the references scores mean SSIM 1
        let refs = Tensor::matrix(3, 4, vec![0.1, 0.2, 0.3, 0.4, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2])
            .unwrap();
        let mean = Tensor::vector(vec![0.0; 4]).unwrap();
        let score = supervised_score(&refs, &refs, &mean).unwrap();
        assert!((score - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn reference_buffer_grows_per_class() {
        let ds = crate::data::make_blobs(20, 3, 2, 2.0, 5).unwrap();
        let mut buf = ReferenceBuffer::new(4);
        buf.push_task(&ds, 1).unwrap();
        assert_eq!(buf.len(), 12);
        let ds2 = crate::data::make_blobs(20, 2, 2, 2.0, 6).unwrap();
        buf.push_task(&ds2, 2).unwrap();
        assert_eq!(buf.len(), 20);
    }
}

//! Accuracy-matrix bookkeeping and the two continual-learning metrics:
//! average accuracy over all tasks after the last one, and backward
//! transfer (negative values mean forgetting).

use std::collections::BTreeMap;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{forward_batch, ParamVector};

/// acc[(trained_up_to, evaluated)] with 0-based task indices, defined for
/// evaluated ≤ trained_up_to.
#[derive(Clone, Debug, Default)]
pub struct AccuracyMatrix {
    entries: BTreeMap<(usize, usize), f64>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, trained: usize, evaluated: usize, acc: f64) -> Result<()> {
        if evaluated > trained {
            return Err(Error::contract(format!(
                "accuracy entry ({trained}, {evaluated}) is above the diagonal"
            )));
        }
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::contract(format!(
                "accuracy {acc} outside [0, 1]"
            )));
        }
        self.entries.insert((trained, evaluated), acc);
        Ok(())
    }

    pub fn get(&self, trained: usize, evaluated: usize) -> Option<f64> {
        self.entries.get(&(trained, evaluated)).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.entries.iter().map(|(&(t, e), &a)| (t, e, a))
    }

    fn require(&self, trained: usize, evaluated: usize) -> Result<f64> {
        self.get(trained, evaluated).ok_or_else(|| {
            Error::contract(format!("missing accuracy entry ({trained}, {evaluated})"))
        })
    }
}

/// Fraction of samples whose argmax logit equals the label; argmax ties
/// break toward the lowest class index.
pub fn evaluate(model: &ParamVector, testset: &LabeledDataset) -> Result<f64> {
    if testset.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty test set"));
    }
    let head = model.n_classes();
    if let Some(&bad) = testset.labels().iter().find(|&&l| l >= head) {
        return Err(Error::contract(format!(
            "label {bad} outside model head of size {head}"
        )));
    }
    let logits = forward_batch(model, testset.features())?;
    let mut correct = 0usize;
    for (i, &label) in testset.labels().iter().enumerate() {
        let row = logits.row_slice(i);
        let mut best = 0usize;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / testset.len() as f64)
}

/// Mean accuracy over all tasks after training through `trained` (0-based).
pub fn compute_acc(matrix: &AccuracyMatrix, trained: usize) -> Result<f64> {
    let mut total = 0.0;
    for evaluated in 0..=trained {
        total += matrix.require(trained, evaluated)?;
    }
    Ok(total / (trained + 1) as f64)
}

/// Mean change between end-of-stream and just-after-training accuracy over
/// the earlier tasks. Needs at least two tasks.
pub fn compute_bwt(matrix: &AccuracyMatrix, trained: usize) -> Result<f64> {
    if trained < 1 {
        return Err(Error::contract(
            "backward transfer is undefined for a single task",
        ));
    }
    let mut total = 0.0;
    for evaluated in 0..trained {
        total += matrix.require(trained, evaluated)? - matrix.require(evaluated, evaluated)?;
    }
    Ok(total / trained as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_blobs;
    use crate::model::{init_mlp, MlpSpec};
    use crate::tensor::Tensor;

    #[test]
    fn acc_examples() {
        let mut m = AccuracyMatrix::new();
        m.record(0, 0, 0.9).unwrap();
        assert_eq!(compute_acc(&m, 0).unwrap(), 0.9);

        m.record(1, 0, 0.8).unwrap();
        m.record(1, 1, 0.95).unwrap();
        assert_eq!(compute_acc(&m, 1).unwrap(), 0.875);

        let mut c = AccuracyMatrix::new();
        for t in 0..3 {
            for e in 0..=t {
                c.record(t, e, 0.4).unwrap();
            }
        }
        assert!((compute_acc(&c, 2).unwrap() - 0.4).abs() < 1e-15);

        // missing entry is named
        let err = compute_acc(&m, 3).unwrap_err().to_string();
        assert!(err.contains("(3, 0)"), "{err}");
    }

    #[test]
    fn bwt_examples() {
        let mut m = AccuracyMatrix::new();
        m.record(0, 0, 0.99).unwrap();
        m.record(1, 0, 0.80).unwrap();
        m.record(1, 1, 0.90).unwrap();
        assert!((compute_bwt(&m, 1).unwrap() - (-0.19)).abs() < 1e-12);

        assert!(compute_bwt(&m, 0).is_err());

        // final row equals the diagonal -> zero transfer
        let mut z = AccuracyMatrix::new();
        z.record(0, 0, 0.7).unwrap();
        z.record(1, 1, 0.8).unwrap();
        z.record(1, 0, 0.7).unwrap();
        z.record(2, 2, 0.9).unwrap();
        z.record(2, 0, 0.7).unwrap();
        z.record(2, 1, 0.8).unwrap();
        assert_eq!(compute_bwt(&z, 2).unwrap(), 0.0);

        // retrospective improvement is positive
        let mut p = AccuracyMatrix::new();
        p.record(0, 0, 0.5).unwrap();
        p.record(1, 0, 0.6).unwrap();
        p.record(1, 1, 0.9).unwrap();
        assert!(compute_bwt(&p, 1).unwrap() > 0.0);
    }

    #[test]
    fn metrics_stay_in_unit_band() {
        let mut m = AccuracyMatrix::new();
        m.record(0, 0, 1.0).unwrap();
        m.record(1, 0, 0.0).unwrap();
        m.record(1, 1, 1.0).unwrap();
        let acc = compute_acc(&m, 1).unwrap();
        let bwt = compute_bwt(&m, 1).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!((-1.0..=1.0).contains(&bwt));
        assert!(m.record(0, 0, 1.5).is_err());
        assert!(m.record(0, 1, 0.5).is_err());
    }

    #[test]
    fn evaluate_constant_predictor_and_loop_oracle() {
        // zero weights predict class 0 everywhere (tie-break to lowest)
        let spec = MlpSpec::new(vec![3, 4, 2], 1.0).unwrap();
        let zero = crate::model::ParamVector::from_flat(
            &init_mlp(&spec, 0).layout(),
            &vec![0.0; init_mlp(&spec, 0).n_params()],
        )
        .unwrap();
        let ds = make_blobs(10, 2, 3, 2.0, 3).unwrap();
        assert_eq!(evaluate(&zero, &ds).unwrap(), 0.5);

        // agreement with a per-sample loop
        let model = init_mlp(&spec, 9);
        let acc = evaluate(&model, &ds).unwrap();
        let mut correct = 0;
        for i in 0..ds.len() {
            let logits =
                crate::model::forward(&model, &Tensor::vector(ds.sample_row(i).to_vec()).unwrap())
                    .unwrap();
            let mut best = 0;
            for (k, &v) in logits.data().iter().enumerate() {
                if v > logits.data()[best] {
                    best = k;
                }
            }
            if best == ds.labels()[i] {
                correct += 1;
            }
        }
        assert_eq!(acc, correct as f64 / ds.len() as f64);

        // contract errors
        assert!(evaluate(&model, &crate::data::LabeledDataset::empty(3)).is_err());
        let bad = make_blobs(4, 3, 3, 1.0, 5).unwrap();
        assert!(evaluate(&model, &bad).is_err());
    }
}

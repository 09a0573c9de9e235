//! Clean accuracy and attack success rate.

use crate::error::{Error, Result};
use crate::model::{Batch, ClassifierModel};
use crate::poison::{AttackSpec, TokenSample};
use crate::tensor::DenseMatrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub epoch: usize,
    pub cacc: f64,
    pub asr: f64,
    pub n_clean: usize,
    pub n_poison_eval: usize,
    pub loss_clean: f64,
    pub loss_poison: f64,
}

fn predict_all(model: &ClassifierModel, samples: &[TokenSample]) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let tokens: Vec<Vec<u32>> = chunk.iter().map(|s| s.tokens.clone()).collect();
        let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        let batch = Batch::from_samples(&tokens, &labels, model.config.max_len)?;
        preds.extend(model.predict(&batch)?);
    }
    Ok(preds)
}

/// Fraction of clean test samples predicted as their original label.
pub fn cacc(model: &ClassifierModel, clean_test: &[TokenSample]) -> Result<f64> {
    if clean_test.is_empty() {
        return Err(Error::config("clean test set is empty"));
    }
    let preds = predict_all(model, clean_test)?;
    let correct = preds
        .iter()
        .zip(clean_test)
        .filter(|(p, s)| **p == s.original_label)
        .count();
    Ok(correct as f64 / clean_test.len() as f64)
}

/// Fraction of trigger-implanted, non-target-origin samples predicted as
/// the target label.
pub fn asr(
    model: &ClassifierModel,
    poisoned_eval: &[TokenSample],
    target_label: usize,
) -> Result<f64> {
    if poisoned_eval.is_empty() {
        return Err(Error::config("attack evaluation set is empty"));
    }
    for s in poisoned_eval {
        if s.original_label == target_label {
            return Err(Error::contract(
                "attack evaluation sample has target original label",
            ));
        }
        if !s.poisoned {
            return Err(Error::contract(
                "attack evaluation sample is not trigger-implanted",
            ));
        }
    }
    let preds = predict_all(model, poisoned_eval)?;
    let hits = preds.iter().filter(|&&p| p == target_label).count();
    Ok(hits as f64 / poisoned_eval.len() as f64)
}

/// Mean loss of the model over a sample set.
pub fn mean_loss(model: &ClassifierModel, samples: &[TokenSample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for chunk in samples.chunks(64) {
        let tokens: Vec<Vec<u32>> = chunk.iter().map(|s| s.tokens.clone()).collect();
        let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        let batch = Batch::from_samples(&tokens, &labels, model.config.max_len)?;
        total += model.loss(&batch)? * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Full per-epoch evaluation.
pub fn evaluate(
    model: &ClassifierModel,
    clean_test: &[TokenSample],
    poisoned_eval: &[TokenSample],
    attack: &AttackSpec,
    epoch: usize,
) -> Result<EvalReport> {
    Ok(EvalReport {
        epoch,
        cacc: cacc(model, clean_test)?,
        asr: asr(model, poisoned_eval, attack.target_label)?,
        n_clean: clean_test.len(),
        n_poison_eval: poisoned_eval.len(),
        loss_clean: mean_loss(model, clean_test)?,
        loss_poison: mean_loss(model, poisoned_eval)?,
    })
}

/// One-hot rows for a label list.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<DenseMatrix> {
    let mut m = DenseMatrix::zeros(labels.len(), num_classes);
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::input(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        m.set(i, l, 1.0);
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};
    use crate::poison::TriggerKind;
    use crate::rng::RngStream;

    fn toy_samples(labels: &[usize], poisoned: bool, orig: &[usize]) -> Vec<TokenSample> {
        labels
            .iter()
            .zip(orig)
            .map(|(&l, &o)| TokenSample {
                tokens: vec![5, 6, 7],
                label: l,
                original_label: o,
                poisoned,
            })
            .collect()
    }

    fn toy_model() -> ClassifierModel {
        let cfg = ModelConfig {
            vocab_size: 20,
            embed_dim: 8,
            max_len: 8,
            num_heads: 2,
            num_blocks: 1,
            num_classes: 2,
            classifier_hidden: 8,
            ..ModelConfig::default()
        };
        build_model(&cfg, &mut RngStream::new(0)).unwrap()
    }

    #[test]
    fn cacc_hand_count() {
        let model = toy_model();
        // every sample identical -> same prediction for all; with half the
        // labels on each class the accuracy is exactly 0.5
        let samples = toy_samples(&[0, 1, 0, 1, 0, 1, 0, 1, 0, 1], false, &[0, 1, 0, 1, 0, 1, 0, 1, 0, 1]);
        let c = cacc(&model, &samples).unwrap();
        assert!((c - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cacc_rejects_empty() {
        let model = toy_model();
        assert!(cacc(&model, &[]).is_err());
    }

    #[test]
    fn asr_counts_target_predictions() {
        let model = toy_model();
        let samples = toy_samples(&[1, 1, 1, 1], true, &[0, 0, 0, 0]);
        let a = asr(&model, &samples, 1).unwrap();
        // identical samples: prediction is one class for all, so ASR is 0 or 1
        assert!(a == 0.0 || a == 1.0);
        // invariant under reordering
        let mut rev = samples.clone();
        rev.reverse();
        assert_eq!(asr(&model, &rev, 1).unwrap(), a);
    }

    #[test]
    fn asr_rejects_target_origin_samples() {
        let model = toy_model();
        let samples = toy_samples(&[1], true, &[1]);
        assert!(asr(&model, &samples, 1).is_err());
    }

    #[test]
    fn asr_rejects_unimplanted_samples() {
        let model = toy_model();
        let samples = toy_samples(&[1], false, &[0]);
        assert!(asr(&model, &samples, 1).is_err());
    }

    #[test]
    fn one_hot_rows_valid() {
        let m = one_hot(&[0, 1, 1], 2).unwrap();
        assert_eq!(m.as_slice(), &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(one_hot(&[2], 2).is_err());
    }

    #[test]
    fn attack_spec_used_in_evaluate() {
        let model = toy_model();
        let clean = toy_samples(&[0, 1], false, &[0, 1]);
        let eval_set = toy_samples(&[1, 1], true, &[0, 0]);
        let attack = AttackSpec {
            kind: TriggerKind::Word,
            trigger_tokens: vec![1],
            target_label: 1,
            poison_ratio: 0.1,
        };
        let report = evaluate(&model, &clean, &eval_set, &attack, 3).unwrap();
        assert_eq!(report.epoch, 3);
        assert_eq!(report.n_clean, 2);
        assert_eq!(report.n_poison_eval, 2);
        assert!(report.cacc >= 0.0 && report.cacc <= 1.0);
        assert!(report.asr >= 0.0 && report.asr <= 1.0);
    }
}

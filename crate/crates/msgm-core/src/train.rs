//! Optimizer, split protocols, metrics and the fold training loop.

use crate::error::{MsgmError, Result};
use crate::model::{forward, loss_t, save_checkpoint, MsgmConfig, MsgmParams};
use crate::signal::{build_feature_tensors, segment_first_level, FeatureTensor, Recording};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            weight_decay: 0.01,
            label_smoothing: 0.1,
            batch_size: 32,
            epochs: 20,
            patience: 5,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(MsgmError::Config("batch size must be >= 1".into()));
        }
        if self.patience < 1 {
            return Err(MsgmError::Config("patience must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(MsgmError::Config("epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Subject-level cross-validation plan.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SplitPlan {
    pub mode: SplitMode,
    /// Fraction of training segments held out for validation; defaults to
    /// 0.2 for LOSO and 0.1 for leave-n-out.
    #[serde(default)]
    pub val_fraction: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    Loso,
    LeaveNOut { n: usize },
}

impl SplitPlan {
    pub fn loso() -> Self {
        SplitPlan { mode: SplitMode::Loso, val_fraction: None }
    }

    pub fn leave_n_out(n: usize) -> Self {
        SplitPlan { mode: SplitMode::LeaveNOut { n }, val_fraction: None }
    }

    pub fn effective_val_fraction(&self) -> f64 {
        self.val_fraction.unwrap_or(match self.mode {
            SplitMode::Loso => 0.2,
            SplitMode::LeaveNOut { .. } => 0.1,
        })
    }
}

/// One fold: the subjects held out for testing.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Fold {
    pub test_subjects: Vec<u32>,
}

/// Partition subjects into folds. LOSO yields one fold per subject;
/// leave-n-out yields ceil(S/n) folds with disjoint test sets.
pub fn make_splits(subjects: &[u32], plan: &SplitPlan) -> Result<Vec<Fold>> {
    let mut unique: Vec<u32> = subjects.to_vec();
    unique.sort_unstable();
    unique.dedup();
    if unique.len() < 2 {
        return Err(MsgmError::Config(format!(
            "need at least 2 subjects for cross-validation, got {}",
            unique.len()
        )));
    }
    match plan.mode {
        SplitMode::Loso => Ok(unique.iter().map(|&s| Fold { test_subjects: vec![s] }).collect()),
        SplitMode::LeaveNOut { n } => {
            if n == 0 || n >= unique.len() {
                return Err(MsgmError::Config(format!(
                    "leave-n-out requires 0 < n < {} subjects, got n = {n}",
                    unique.len()
                )));
            }
            Ok(unique.chunks(n).map(|chunk| Fold { test_subjects: chunk.to_vec() }).collect())
        }
    }
}

/// Accuracy and macro-averaged F1.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1: f64,
}

/// Argmax with ties broken toward the lowest class index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy and macro F1 from predictions. Classes absent from the ground
/// truth contribute F1 = 0 to the macro average.
pub fn evaluate_predictions(preds: &[usize], labels: &[usize], d_out: usize) -> Result<Metrics> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(MsgmError::Data(format!(
            "evaluation needs matching non-empty predictions and labels ({} vs {})",
            preds.len(),
            labels.len()
        )));
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    let accuracy = correct as f64 / preds.len() as f64;

    let mut f1_sum = 0.0;
    for cls in 0..d_out {
        let tp = preds.iter().zip(labels).filter(|(p, l)| **p == cls && **l == cls).count() as f64;
        let fp = preds.iter().zip(labels).filter(|(p, l)| **p == cls && **l != cls).count() as f64;
        let fn_ = preds.iter().zip(labels).filter(|(p, l)| **p != cls && **l == cls).count() as f64;
        if tp + fp + fn_ > 0.0 {
            f1_sum += 2.0 * tp / (2.0 * tp + fp + fn_);
        }
        // a class with no true samples and no predictions contributes 0
    }
    Ok(Metrics { accuracy, f1: f1_sum / d_out as f64 })
}

// ── AdamW ──────────────────────────────────────────────────────────────────

/// Decoupled-weight-decay Adam with bias-corrected moments.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, moments: HashMap::new() }
    }

    /// One update over every trainable tensor. Gradients are looked up by
    /// parameter name; a missing entry means zero gradient (weight decay
    /// still applies). A non-finite gradient aborts with diagnostics.
    pub fn step(&mut self, params: &mut MsgmParams, grads: &HashMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(MsgmError::Data(format!("non-finite gradient in {name}")));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (lr, b1, b2, eps, wd) = (self.lr, self.beta1, self.beta2, self.eps, self.weight_decay);
        let step_moments = &mut self.moments;
        let mut err = None;
        params.visit_mut(&mut |name, t| {
            if err.is_some() {
                return;
            }
            let n = t.len();
            let (m, v) = step_moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            if m.len() != n {
                err = Some(MsgmError::Config(format!("optimizer state shape drifted for {name}")));
                return;
            }
            let zero = vec![0.0; n];
            let g = grads.get(&name).map(|t| t.data()).unwrap_or(&zero);
            let data = t.data_mut();
            for i in 0..n {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * data[i]);
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

// ── Early stopping ─────────────────────────────────────────────────────────

#[derive(Debug, PartialEq, Eq, Clone, Copy)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience counter over validation accuracy; strict improvement resets it.
pub struct EarlyStopper {
    patience: usize,
    best: Option<f64>,
    since_improvement: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper { patience, best: None, since_improvement: 0 }
    }

    pub fn observe(&mut self, metric: f64) -> StopDecision {
        match self.best {
            Some(best) if metric <= best => {
                self.since_improvement += 1;
                if self.since_improvement >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some(metric);
                self.since_improvement = 0;
                StopDecision::Improved
            }
        }
    }
}

// ── Featurization cache ────────────────────────────────────────────────────

/// Per-scale rPSD tensors for a single first-level segment, plus identity.
#[derive(Clone, Debug)]
pub struct FeaturizedSegment {
    /// One n_k×c×7 tensor per scale.
    pub per_scale: Vec<Tensor>,
    pub label: usize,
    pub subject_id: u32,
    pub trial_id: u32,
}

/// Segment every recording and compute its rPSD features once. Ordering is
/// (recording order, segment index), independent of parallel scheduling.
pub fn featurize(recordings: &[Recording], cfg: &MsgmConfig) -> Result<Vec<FeaturizedSegment>> {
    let spec = cfg.effective_scale_spec();
    let per_rec: Vec<Vec<FeaturizedSegment>> = recordings
        .par_iter()
        .map(|rec| -> Result<Vec<FeaturizedSegment>> {
            let segs = segment_first_level(rec, spec.first_len, spec.first_hop)?;
            let feats = build_feature_tensors(&segs, &spec)?;
            let mut out = Vec::with_capacity(segs.len());
            for (i, seg) in segs.iter().enumerate() {
                let per_scale = feats
                    .iter()
                    .map(|ft| {
                        let stride = ft.segments * ft.channels * crate::signal::NUM_BANDS;
                        Tensor::new(
                            vec![ft.segments, ft.channels, crate::signal::NUM_BANDS],
                            ft.values.data()[i * stride..(i + 1) * stride].to_vec(),
                        )
                    })
                    .collect();
                out.push(FeaturizedSegment {
                    per_scale,
                    label: seg.label,
                    subject_id: seg.subject_id,
                    trial_id: seg.trial_id,
                });
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_rec.into_iter().flatten().collect())
}

/// Stack per-segment features into the batched per-scale tensors the model
/// consumes.
pub fn assemble_batch(segs: &[&FeaturizedSegment]) -> Result<Vec<FeatureTensor>> {
    if segs.is_empty() {
        return Err(MsgmError::Data("cannot assemble an empty batch".into()));
    }
    let scales = segs[0].per_scale.len();
    let mut out = Vec::with_capacity(scales);
    for k in 0..scales {
        let shape = segs[0].per_scale[k].shape().to_vec();
        let (n_k, c, f) = (shape[0], shape[1], shape[2]);
        let mut data = Vec::with_capacity(segs.len() * n_k * c * f);
        for seg in segs {
            if seg.per_scale[k].shape() != shape.as_slice() {
                return Err(MsgmError::Data("heterogeneous feature shapes in batch".into()));
            }
            data.extend_from_slice(seg.per_scale[k].data());
        }
        out.push(FeatureTensor {
            scale: k,
            values: Tensor::new(vec![segs.len(), n_k, c, f], data),
            batch: segs.len(),
            segments: n_k,
            channels: c,
        });
    }
    Ok(out)
}

/// Batched argmax predictions for a set of featurized segments.
pub fn predict(
    params: &MsgmParams,
    cfg: &MsgmConfig,
    segs: &[&FeaturizedSegment],
    batch_size: usize,
) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(segs.len());
    for chunk in segs.chunks(batch_size.max(1)) {
        let feats = assemble_batch(chunk)?;
        let fp = forward(params, cfg, &feats, None)?;
        let logits = fp.tape.value(fp.logits);
        let d = logits.shape()[1];
        for row in logits.data().chunks(d) {
            preds.push(argmax_row(row));
        }
    }
    Ok(preds)
}

/// Evaluate a model on featurized segments.
pub fn evaluate_model(
    params: &MsgmParams,
    cfg: &MsgmConfig,
    segs: &[&FeaturizedSegment],
    batch_size: usize,
) -> Result<Metrics> {
    if segs.is_empty() {
        return Err(MsgmError::Data("cannot evaluate on empty data".into()));
    }
    let preds = predict(params, cfg, segs, batch_size)?;
    let labels: Vec<usize> = segs.iter().map(|s| s.label).collect();
    evaluate_predictions(&preds, &labels, cfg.d_out)
}

// ── Fold training ──────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FoldReport {
    pub fold: usize,
    pub test_subjects: Vec<u32>,
    pub accuracy: f64,
    pub f1: f64,
    pub epochs_ran: usize,
    pub best_epoch: usize,
    pub failed: bool,
    /// Subjects whose data reached graph initialization or gradient updates.
    pub train_visible_subjects: Vec<u32>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainOutcome {
    pub folds: Vec<FoldReport>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_f1: f64,
    pub std_f1: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}

impl TrainOutcome {
    fn from_folds(folds: Vec<FoldReport>) -> Self {
        let ok: Vec<&FoldReport> = folds.iter().filter(|f| !f.failed).collect();
        let accs: Vec<f64> = ok.iter().map(|f| f.accuracy).collect();
        let f1s: Vec<f64> = ok.iter().map(|f| f.f1).collect();
        let (mean_accuracy, std_accuracy) = mean_std(&accs);
        let (mean_f1, std_f1) = mean_std(&f1s);
        TrainOutcome { folds, mean_accuracy, std_accuracy, mean_f1, std_f1 }
    }

    pub fn all_failed(&self) -> bool {
        self.folds.iter().all(|f| f.failed)
    }
}

/// Train one fold: graph priors from the training split, AdamW with early
/// stopping on validation accuracy, final metrics from the best-validation
/// checkpoint on the held-out subjects.
pub fn train_fold(
    all: &[FeaturizedSegment],
    fold_idx: usize,
    fold: &Fold,
    cfg: &MsgmConfig,
    tcfg: &TrainConfig,
    val_fraction: f64,
    checkpoint_dir: Option<&Path>,
) -> Result<FoldReport> {
    let test_set: BTreeSet<u32> = fold.test_subjects.iter().copied().collect();
    let test: Vec<&FeaturizedSegment> =
        all.iter().filter(|s| test_set.contains(&s.subject_id)).collect();
    let mut trainval: Vec<&FeaturizedSegment> =
        all.iter().filter(|s| !test_set.contains(&s.subject_id)).collect();
    if test.is_empty() || trainval.is_empty() {
        return Err(MsgmError::Data(format!(
            "fold {fold_idx}: empty train or test partition"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(fold_idx as u64 * 7919));
    trainval.shuffle(&mut rng);
    let n_val = ((trainval.len() as f64) * val_fraction).round() as usize;
    let n_val = n_val.clamp(1, trainval.len() - 1);
    let (val, train) = trainval.split_at(n_val);

    // graph priors from the training split only
    let train_feats = assemble_batch(train)?;
    let mut params = MsgmParams::init(cfg, Some(&train_feats), tcfg.seed.wrapping_add(fold_idx as u64))?;
    let train_visible: BTreeSet<u32> = train.iter().map(|s| s.subject_id).collect();

    let mut optimizer = AdamW::new(tcfg.lr, tcfg.weight_decay);
    let mut stopper = EarlyStopper::new(tcfg.patience);
    let mut best_params = params.clone();
    let mut best_epoch = 0usize;
    let mut epochs_ran = 0usize;
    let mut failed = false;

    let mut order: Vec<usize> = (0..train.len()).collect();
    'epochs: for epoch in 1..=tcfg.epochs {
        epochs_ran = epoch;
        order.shuffle(&mut rng);
        for batch_ids in order.chunks(tcfg.batch_size) {
            let batch: Vec<&FeaturizedSegment> = batch_ids.iter().map(|&i| train[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let feats = assemble_batch(&batch)?;
            let mut fp = forward(&params, cfg, &feats, Some(&mut rng))?;
            let loss = loss_t(&mut fp.tape, fp.logits, &labels, tcfg.label_smoothing)?;
            let loss_val = fp.tape.value(loss).item();
            if !loss_val.is_finite() {
                failed = true;
                break 'epochs;
            }
            fp.tape.backward(loss)?;
            let grads: HashMap<String, Tensor> = fp
                .binding
                .vars
                .iter()
                .map(|(name, var)| (name.clone(), fp.tape.grad(*var)))
                .collect();
            if optimizer.step(&mut params, &grads).is_err() {
                failed = true;
                break 'epochs;
            }
            params.reapply_masks();
        }
        let val_metrics = evaluate_model(&params, cfg, val, tcfg.batch_size)?;
        match stopper.observe(val_metrics.accuracy) {
            StopDecision::Improved => {
                best_params = params.clone();
                best_epoch = epoch;
            }
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }

    if failed {
        return Ok(FoldReport {
            fold: fold_idx,
            test_subjects: fold.test_subjects.clone(),
            accuracy: 0.0,
            f1: 0.0,
            epochs_ran,
            best_epoch,
            failed: true,
            train_visible_subjects: train_visible.into_iter().collect(),
        });
    }

    if let Some(dir) = checkpoint_dir {
        save_checkpoint(&dir.join(format!("fold{fold_idx}.ckpt")), cfg, &best_params)?;
    }
    let metrics = evaluate_model(&best_params, cfg, &test, tcfg.batch_size)?;
    Ok(FoldReport {
        fold: fold_idx,
        test_subjects: fold.test_subjects.clone(),
        accuracy: metrics.accuracy,
        f1: metrics.f1,
        epochs_ran,
        best_epoch,
        failed: false,
        train_visible_subjects: train_visible.into_iter().collect(),
    })
}

/// Featurize once, then train every fold (folds run in parallel; reports are
/// collected in fold order so results are scheduling-independent).
pub fn train_all_folds(
    recordings: &[Recording],
    cfg: &MsgmConfig,
    tcfg: &TrainConfig,
    plan: &SplitPlan,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    tcfg.validate()?;
    let subjects: Vec<u32> = recordings.iter().map(|r| r.subject_id).collect();
    let folds = make_splits(&subjects, plan)?;
    let segments = featurize(recordings, cfg)?;
    let val_fraction = plan.effective_val_fraction();
    let reports: Vec<FoldReport> = folds
        .par_iter()
        .enumerate()
        .map(|(i, fold)| train_fold(&segments, i, fold, cfg, tcfg, val_fraction, checkpoint_dir))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainOutcome::from_folds(reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_single_step_hand_computation() {
        // w=1, g=2, lr=1e-3, wd=0.01: w' ≈ 1 - 1e-3·(2/√4) - 1e-5 = 0.99899
        let mut w: f64 = 1.0;
        let g: f64 = 2.0;
        let (lr, wd, b1, b2, eps): (f64, f64, f64, f64, f64) = (1e-3, 0.01, 0.9, 0.999, 1e-8);
        let m = (1.0 - b1) * g / (1.0 - b1); // bias-corrected first moment
        let v: f64 = (1.0 - b2) * g * g / (1.0 - b2);
        w -= lr * (m / (v.sqrt() + eps) + wd * w);
        assert!((w - 0.99899).abs() < 1e-6);

        // the optimizer reproduces the same number on a real parameter
        let cfg = test_config(4);
        let mut params = MsgmParams::init(&cfg, None, 1).unwrap();
        params.classifier_b = Tensor::new(vec![2], vec![1.0, 1.0]).with_grad();
        let mut opt = AdamW::new(1e-3, 0.01);
        let mut grads = HashMap::new();
        grads.insert("classifier.b".to_string(), Tensor::new(vec![2], vec![2.0, 2.0]));
        opt.step(&mut params, &grads).unwrap();
        for &v in params.classifier_b.data() {
            assert!((v - 0.99899).abs() < 1e-4, "got {v}");
        }
    }

    #[test]
    fn adamw_zero_gradient_zero_decay_is_fixed_point() {
        let cfg = test_config(4);
        let mut params = MsgmParams::init(&cfg, None, 2).unwrap();
        let before = params.named_tensors();
        let mut opt = AdamW::new(1e-3, 0.0);
        opt.step(&mut params, &HashMap::new()).unwrap();
        let after = params.named_tensors();
        for ((n1, t1), (_, t2)) in before.iter().zip(after.iter()) {
            assert_eq!(t1.data(), t2.data(), "{n1} moved without gradient");
        }
    }

    #[test]
    fn adamw_descends_scalar_quadratic() {
        // f(w) = w² from w = 1 reaches |w| < 0.1 within 2000 steps at lr 1e-3
        // (Adam steps are bounded by lr, so 3e-4 could cover at most 0.6)
        let cfg = test_config(4);
        let mut params = MsgmParams::init(&cfg, None, 3).unwrap();
        params.classifier_b = Tensor::new(vec![2], vec![1.0, 1.0]).with_grad();
        let mut opt = AdamW::new(1e-3, 0.0);
        for _ in 0..2000 {
            let g: Vec<f64> = params.classifier_b.data().iter().map(|w| 2.0 * w).collect();
            let mut grads = HashMap::new();
            grads.insert("classifier.b".to_string(), Tensor::new(vec![2], g));
            opt.step(&mut params, &grads).unwrap();
        }
        for &w in params.classifier_b.data() {
            assert!(w.abs() < 0.1, "w = {w} after 2000 steps");
        }
    }

    #[test]
    fn adamw_rejects_nan_gradient() {
        let cfg = test_config(4);
        let mut params = MsgmParams::init(&cfg, None, 4).unwrap();
        let mut opt = AdamW::new(1e-3, 0.0);
        let mut grads = HashMap::new();
        grads.insert("classifier.b".to_string(), Tensor::new(vec![2], vec![f64::NAN, 0.0]));
        let err = opt.step(&mut params, &grads).unwrap_err().to_string();
        assert!(err.contains("classifier.b"), "{err}");
    }

    #[test]
    fn loso_yields_one_fold_per_subject() {
        let subjects: Vec<u32> = (1..=15).collect();
        let folds = make_splits(&subjects, &SplitPlan::loso()).unwrap();
        assert_eq!(folds.len(), 15);
        for (i, f) in folds.iter().enumerate() {
            assert_eq!(f.test_subjects, vec![subjects[i]]);
        }
    }

    #[test]
    fn leave_two_out_of_four() {
        let folds = make_splits(&[1, 2, 3, 4], &SplitPlan::leave_n_out(2)).unwrap();
        assert_eq!(folds.len(), 2);
        let all: BTreeSet<u32> = folds.iter().flat_map(|f| f.test_subjects.clone()).collect();
        assert_eq!(all.len(), 4);
    }

    #[test]
    fn folds_partition_subjects() {
        for n in 1..5u32 {
            let subjects: Vec<u32> = (0..11).collect();
            if n as usize >= subjects.len() {
                continue;
            }
            let folds = make_splits(&subjects, &SplitPlan::leave_n_out(n as usize)).unwrap();
            let mut seen = BTreeSet::new();
            for f in &folds {
                for s in &f.test_subjects {
                    assert!(seen.insert(*s), "subject {s} in two folds");
                }
            }
            assert_eq!(seen.len(), subjects.len());
        }
    }

    #[test]
    fn invalid_split_configs_rejected() {
        assert!(make_splits(&[1], &SplitPlan::loso()).is_err());
        assert!(make_splits(&[1, 2, 3], &SplitPlan::leave_n_out(3)).is_err());
        assert!(make_splits(&[1, 2, 3], &SplitPlan::leave_n_out(0)).is_err());
    }

    #[test]
    fn evaluation_closed_cases() {
        let perfect = evaluate_predictions(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap();
        assert_eq!(perfect.accuracy, 1.0);
        assert_eq!(perfect.f1, 1.0);

        let wrong = evaluate_predictions(&[1, 0], &[0, 1], 2).unwrap();
        assert_eq!(wrong.accuracy, 0.0);
        assert_eq!(wrong.f1, 0.0);

        let mixed = evaluate_predictions(&[1, 1, 0, 0], &[1, 0, 1, 0], 2).unwrap();
        assert!((mixed.accuracy - 0.5).abs() < 1e-12);
        assert!((mixed.f1 - 0.5).abs() < 1e-12);

        assert!(evaluate_predictions(&[], &[], 2).is_err());
    }

    #[test]
    fn absent_class_contributes_zero_f1() {
        // three classes, class 2 never appears in labels or predictions
        let m = evaluate_predictions(&[0, 1, 0, 1], &[0, 1, 0, 1], 3).unwrap();
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn early_stopping_counter_semantics() {
        // patience 5, non-improving from epoch 1 → stop at epoch 6
        let mut stopper = EarlyStopper::new(5);
        assert_eq!(stopper.observe(0.5), StopDecision::Improved); // epoch 1
        for epoch in 2..=5 {
            assert_eq!(stopper.observe(0.5), StopDecision::Continue, "epoch {epoch}");
        }
        assert_eq!(stopper.observe(0.5), StopDecision::Stop); // epoch 6
    }

    #[test]
    fn early_stopping_never_fires_on_monotone_improvement() {
        let mut stopper = EarlyStopper::new(5);
        for i in 0..50 {
            assert_eq!(stopper.observe(i as f64), StopDecision::Improved);
        }
    }

    #[test]
    fn mean_std_matches_direct_recomputation() {
        let vals = [0.9, 0.8, 0.85, 0.95];
        let (mean, std) = mean_std(&vals);
        let m2 = vals.iter().sum::<f64>() / 4.0;
        let v2 = vals.iter().map(|v| (v - m2).powi(2)).sum::<f64>() / 4.0;
        assert_eq!(mean, m2);
        assert_eq!(std, v2.sqrt());
    }

    fn test_config(c: usize) -> MsgmConfig {
        use crate::graph::RegionMap;
        use crate::signal::ScaleSpec;
        let names: Vec<String> = (0..c).map(|i| format!("CH{i}")).collect();
        let ids: Vec<usize> = (0..c).map(|i| i * 2 / c).collect();
        MsgmConfig {
            h: 8,
            msst_layers: 1,
            cheb_order: 2,
            d_state: 4,
            d_out: 2,
            dropout: 0.0,
            scale_spec: ScaleSpec {
                first_len: 4.0,
                first_hop: 2.0,
                windows: vec![(2.0, 1.0)],
            },
            region_map: RegionMap::from_ids("t", &names, &ids).unwrap(),
            share_msst: true,
            ablation: Default::default(),
        }
    }
}

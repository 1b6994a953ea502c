//! Centralized mini-batch training, evaluation and the two-phase
//! prefix-tuning schedule.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, plain, AugmentedSample, Placement, Sample};
use crate::data::SplitDataset;
use crate::error::{Error, Result};
use crate::identifiers::IdentifierAssignment;
use crate::ids::{TokenId, UserId};
use crate::model::{freeze_mask, Classifier, Mode, Parameters, Phase, Trainable};
use crate::seed;

const EVAL_BATCH: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Evaluate val/test every this many epochs; 0 evaluates only at the end.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: Optimizer::default(),
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("batch_size must be positive and learning_rate non-negative".into()));
        }
        match self.optimizer {
            Optimizer::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                Err(Error::Config("momentum must lie in [0, 1)".into()))
            }
            Optimizer::Adam { beta1, beta2, eps }
                if !(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0 && eps > 0.0) =>
            {
                Err(Error::Config("Adam betas must lie in (0, 1) and eps be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// First-order optimizer with per-tensor state.
pub struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    step: i32,
    first: Parameters,
    second: Parameters,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, lr: f64, params: &Parameters) -> Self {
        let second = match kind {
            Optimizer::Adam { .. } => params.zeros_like(),
            Optimizer::Sgd { .. } => Parameters::default(),
        };
        Self { kind, lr, step: 0, first: params.zeros_like(), second }
    }

    /// Applies one update to the trainable rows of `params`.
    pub fn step(&mut self, params: &mut Parameters, grads: &Parameters, trainable: &Trainable) {
        self.step += 1;
        for (name, rows) in trainable.iter() {
            let (Some(p), Some(g)) = (params.get_mut(name), grads.get(name)) else { continue };
            let cols = p.shape().last().copied().unwrap_or(1);
            let range = match rows {
                Some(r) => r.start * cols..r.end * cols,
                None => 0..p.len(),
            };
            let m = self.first.get_mut(name).expect("state for every parameter");
            let (pd, gd, md) = (&mut p.data_mut()[range.clone()], &g.data()[range.clone()], &mut m.data_mut()[range.clone()]);
            match self.kind {
                Optimizer::Sgd { momentum } => {
                    for ((w, &gi), vi) in pd.iter_mut().zip(gd).zip(md.iter_mut()) {
                        *vi = momentum * *vi + gi;
                        *w -= self.lr * *vi;
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let v = &mut self.second.get_mut(name).expect("adam state").data_mut()[range];
                    let c1 = 1.0 - beta1.powi(self.step);
                    let c2 = 1.0 - beta2.powi(self.step);
                    for (((w, &gi), mi), vi) in pd.iter_mut().zip(gd).zip(md.iter_mut()).zip(v.iter_mut()) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *w -= self.lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// How raw samples become model inputs.
#[derive(Clone, Copy, Debug)]
pub struct Conditioning<'a> {
    pub cls: TokenId,
    /// `None` trains user-agnostically on `[CLS, x]`.
    pub identifiers: Option<&'a IdentifierAssignment>,
    pub placement: Placement,
}

impl<'a> Conditioning<'a> {
    pub fn plain(cls: TokenId) -> Self {
        Self { cls, identifiers: None, placement: Placement::Both }
    }

    pub fn with_identifiers(cls: TokenId, assignment: &'a IdentifierAssignment, placement: Placement) -> Self {
        Self { cls, identifiers: Some(assignment), placement }
    }
}

pub fn prepare(samples: &[Sample], cond: &Conditioning<'_>, classifier: &Classifier) -> Result<Vec<AugmentedSample>> {
    let max = classifier.config.max_seq_len;
    match cond.identifiers {
        Some(a) => samples
            .iter()
            .map(|s| augment(s, a.require(&s.user)?, cond.placement, max, cond.cls))
            .collect(),
        None => {
            let reserved = classifier.config.reserved_positions();
            samples.iter().map(|s| plain(s, max, reserved, cond.cls)).collect()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub n: usize,
    /// Accuracy on samples whose label depends on the writer; `None` when
    /// there are none.
    pub ambiguous_accuracy: Option<f64>,
    pub n_ambiguous: usize,
    /// (correct, total) per user.
    pub per_user: BTreeMap<UserId, (usize, usize)>,
}

impl EvalReport {
    pub fn user_accuracy(&self, user: &UserId) -> Option<f64> {
        self.per_user.get(user).map(|&(c, t)| c as f64 / t as f64)
    }
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate_prepared(classifier: &Classifier, params: &Parameters, data: &[AugmentedSample]) -> Result<EvalReport> {
    let mut rep = EvalReport { n: data.len(), ..Default::default() };
    let (mut correct, mut amb_correct) = (0, 0);
    for chunk in data.chunks(EVAL_BATCH) {
        let refs: Vec<&AugmentedSample> = chunk.iter().collect();
        let logits = classifier.logits(params, &refs)?;
        for (i, s) in chunk.iter().enumerate() {
            let ok = argmax(logits.row(i)) == s.label;
            correct += ok as usize;
            if s.ambiguous {
                rep.n_ambiguous += 1;
                amb_correct += ok as usize;
            }
            let e = rep.per_user.entry(s.user.clone()).or_default();
            e.0 += ok as usize;
            e.1 += 1;
        }
    }
    if rep.n > 0 {
        rep.accuracy = correct as f64 / rep.n as f64;
    }
    if rep.n_ambiguous > 0 {
        rep.ambiguous_accuracy = Some(amb_correct as f64 / rep.n_ambiguous as f64);
    }
    Ok(rep)
}

pub fn evaluate(
    classifier: &Classifier,
    params: &Parameters,
    samples: &[Sample],
    cond: &Conditioning<'_>,
) -> Result<EvalReport> {
    let data = prepare(samples, cond, classifier)?;
    evaluate_prepared(classifier, params, &data)
}

/// Runs `cfg.epochs` epochs of shuffled mini-batch updates in place and
/// returns the mean training loss of each epoch.
pub fn fit(
    classifier: &Classifier,
    params: &mut Parameters,
    data: &[AugmentedSample],
    cfg: &TrainConfig,
    trainable: &Trainable,
    mut on_epoch: impl FnMut(usize, &Parameters) -> Result<()>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("no training samples".into()));
    }
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.learning_rate, params);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&AugmentedSample> = idx.iter().map(|&i| &data[i]).collect();
            let (loss, grads) = classifier.loss_and_grad(params, &batch)?;
            opt.step(params, &grads, trainable);
            total += loss * batch.len() as f64;
        }
        losses.push(total / data.len() as f64);
        on_epoch(epoch, params)?;
    }
    Ok(losses)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Option<EvalReport>,
    pub test: Option<EvalReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub history: Vec<EpochMetrics>,
    pub val: EvalReport,
    pub test: EvalReport,
}

impl Metrics {
    /// Long-format CSV: `epoch,split,metric,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,metric,value\n");
        let eval_rows = |out: &mut String, epoch: &str, split: &str, r: &EvalReport| {
            let _ = writeln!(out, "{epoch},{split},accuracy,{}", r.accuracy);
            if let Some(a) = r.ambiguous_accuracy {
                let _ = writeln!(out, "{epoch},{split},ambiguous_accuracy,{a}");
            }
        };
        for e in &self.history {
            let _ = writeln!(out, "{},train,loss,{}", e.epoch, e.train_loss);
            if let Some(v) = &e.val {
                eval_rows(&mut out, &e.epoch.to_string(), "val", v);
            }
            if let Some(t) = &e.test {
                eval_rows(&mut out, &e.epoch.to_string(), "test", t);
            }
        }
        eval_rows(&mut out, "final", "val", &self.val);
        eval_rows(&mut out, "final", "test", &self.test);
        out
    }
}

fn check_conditioning(classifier: &Classifier, cond: &Conditioning<'_>) -> Result<()> {
    if matches!(classifier.config.mode, Mode::Untied { .. }) && cond.identifiers.is_none() {
        return Err(Error::Config("untied user embeddings need an identifier assignment".into()));
    }
    Ok(())
}

/// Trains every jointly trainable parameter on `dataset.train`.
pub fn train(
    classifier: &Classifier,
    params: Parameters,
    dataset: &SplitDataset,
    cond: &Conditioning<'_>,
    cfg: &TrainConfig,
) -> Result<(Parameters, Metrics)> {
    check_conditioning(classifier, cond)?;
    let train_data = prepare(&dataset.train, cond, classifier)?;
    let val = prepare(&dataset.val, cond, classifier)?;
    let test = prepare(&dataset.test, cond, classifier)?;
    let trainable = freeze_mask(&classifier.config, &Phase::Joint)?;
    let mut params = params;
    let mut evals: BTreeMap<usize, (EvalReport, EvalReport)> = BTreeMap::new();
    let losses = fit(classifier, &mut params, &train_data, cfg, &trainable, |epoch, p| {
        if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 {
            let v = evaluate_prepared(classifier, p, &val)?;
            let t = evaluate_prepared(classifier, p, &test)?;
            evals.insert(epoch, (v, t));
        }
        Ok(())
    })?;
    let history = losses
        .into_iter()
        .enumerate()
        .map(|(epoch, train_loss)| {
            let (val, test) = evals.remove(&epoch).unzip();
            EpochMetrics { epoch, train_loss, val, test }
        })
        .collect();
    let metrics = Metrics {
        history,
        val: evaluate_prepared(classifier, &params, &val)?,
        test: evaluate_prepared(classifier, &params, &test)?,
    };
    Ok((params, metrics))
}

/// Result of the two-phase prefix-tuning baseline.
#[derive(Clone, Debug)]
pub struct AdapterOutcome {
    pub params: Parameters,
    /// Parameters at the end of phase 1.
    pub backbone: Parameters,
    /// Shared model before any per-user tuning.
    pub phase1: Metrics,
    /// After every user's prefix has been tuned.
    pub phase2: Metrics,
}

/// Phase 1 trains the backbone user-agnostically; phase 2 then tunes each
/// user's prefix rows, one user at a time, on that user's training data.
pub fn train_useradapter(
    classifier: &Classifier,
    params: Parameters,
    dataset: &SplitDataset,
    cls: TokenId,
    phase1: &TrainConfig,
    phase2: &TrainConfig,
) -> Result<AdapterOutcome> {
    if !matches!(classifier.config.mode, Mode::Prefix { .. }) {
        return Err(Error::Config("the adapter baseline needs prefix mode".into()));
    }
    let cond = Conditioning::plain(cls);
    let mut backbone = classifier.clone();
    backbone.set_prefix_active(false);
    let (backbone_params, phase1_metrics) = train(&backbone, params, dataset, &cond, phase1)?;
    let mut params = backbone_params.clone();

    let mut tuned = classifier.clone();
    tuned.set_prefix_active(true);
    let mut per_user: BTreeMap<&UserId, Vec<&Sample>> = BTreeMap::new();
    for s in &dataset.train {
        per_user.entry(&s.user).or_default().push(s);
    }
    let mut history = Vec::new();
    for (k, user) in classifier.config.users.iter().enumerate() {
        let Some(samples) = per_user.get(user) else { continue };
        let owned: Vec<Sample> = samples.iter().map(|s| (*s).clone()).collect();
        let data = prepare(&owned, &cond, &tuned)?;
        let mask = freeze_mask(&tuned.config, &Phase::PerUser(user.clone()))?;
        let cfg = TrainConfig { seed: seed::derive(phase2.seed, k as u64), ..phase2.clone() };
        let losses = fit(&tuned, &mut params, &data, &cfg, &mask, |_, _| Ok(()))?;
        if let Some(&last) = losses.last() {
            history.push(EpochMetrics { epoch: k, train_loss: last, val: None, test: None });
        }
    }
    let phase2_metrics = Metrics {
        history,
        val: evaluate(&tuned, &params, &dataset.val, &cond)?,
        test: evaluate(&tuned, &params, &dataset.test, &cond)?,
    };
    Ok(AdapterOutcome { params, backbone: backbone_params, phase1: phase1_metrics, phase2: phase2_metrics })
}

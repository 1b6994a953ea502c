//! FedAvg simulation over per-user clients.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentedSample, Sample};
use crate::data::SplitDataset;
use crate::error::{Error, Result};
use crate::ids::UserId;
use crate::model::{freeze_mask, Classifier, Parameters, Phase};
use crate::seed;
use crate::trainer::{evaluate_prepared, fit, prepare, Conditioning, Optimizer, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FedConfig {
    pub n_rounds: usize,
    pub clients_per_round: usize,
    pub local_epochs: usize,
    /// 0 trains each client full-batch.
    pub local_batch_size: usize,
    pub local_lr: f64,
    /// Fresh state on every client in every round.
    pub local_optimizer: Optimizer,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            n_rounds: 40,
            clients_per_round: 10,
            local_epochs: 1,
            local_batch_size: 16,
            local_lr: 3e-3,
            local_optimizer: Optimizer::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub client: UserId,
    pub weights: Parameters,
    pub n_samples: usize,
    /// Mean training loss of the last local epoch.
    pub loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub clients: Vec<UserId>,
    pub accuracy: f64,
    pub mean_client_loss: Option<f64>,
}

/// Trains a copy of `global` on one client's prepared samples.
/// Returns `None` for a client without data.
pub fn local_update(
    classifier: &Classifier,
    global: &Parameters,
    client: &UserId,
    data: &[AugmentedSample],
    cfg: &FedConfig,
    seed: u64,
) -> Result<Option<ClientUpdate>> {
    if data.is_empty() {
        return Ok(None);
    }
    let train = TrainConfig {
        epochs: cfg.local_epochs,
        batch_size: if cfg.local_batch_size == 0 { data.len() } else { cfg.local_batch_size },
        learning_rate: cfg.local_lr,
        optimizer: cfg.local_optimizer,
        seed,
        eval_every: 0,
    };
    let mask = freeze_mask(&classifier.config, &Phase::Joint)?;
    let mut weights = global.clone();
    let losses = fit(classifier, &mut weights, data, &train, &mask, |_, _| Ok(()))?;
    Ok(Some(ClientUpdate { client: client.clone(), weights, n_samples: data.len(), loss: losses.last().copied() }))
}

/// Sample-count weighted mean of client weights, summed in client-id order.
pub fn aggregate(updates: &[ClientUpdate]) -> Result<Parameters> {
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by(|a, b| a.client.cmp(&b.client));
    let first = sorted.first().ok_or_else(|| Error::Invalid("no client updates to aggregate".into()))?;
    for u in &sorted {
        if u.n_samples == 0 {
            return Err(Error::Invalid(format!("client {} reports no samples", u.client)));
        }
        if !u.weights.same_layout(&first.weights) {
            return Err(Error::Invalid(format!("client {} sent weights with a different layout", u.client)));
        }
    }
    // Accumulating offsets from the first client keeps identical updates
    // bit-exact.
    let total: usize = sorted.iter().map(|u| u.n_samples).sum();
    let mut out = first.weights.clone();
    for u in &sorted[1..] {
        let w = u.n_samples as f64 / total as f64;
        for (name, acc) in out.iter_mut() {
            let base = first.weights.get(name).expect("layout checked").data();
            let src = u.weights.get(name).expect("layout checked").data();
            for ((a, &x), &b) in acc.data_mut().iter_mut().zip(src).zip(base) {
                *a += w * (x - b);
            }
        }
    }
    Ok(out)
}

pub fn rounds_csv(reports: &[RoundReport]) -> String {
    let mut out = String::from("round,n_clients,accuracy,mean_client_loss\n");
    for r in reports {
        let loss = r.mean_client_loss.map(|l| l.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", r.round, r.clients.len(), r.accuracy, loss);
    }
    out
}

fn by_user(samples: &[Sample]) -> BTreeMap<UserId, Vec<Sample>> {
    let mut out: BTreeMap<UserId, Vec<Sample>> = BTreeMap::new();
    for s in samples {
        out.entry(s.user.clone()).or_default().push(s.clone());
    }
    out
}

/// Runs `cfg.n_rounds` of FedAvg, treating every user in the training split
/// as one client, and evaluates the global model on the test split after
/// each round.
pub fn run(
    classifier: &Classifier,
    params: Parameters,
    dataset: &SplitDataset,
    cond: &Conditioning<'_>,
    cfg: &FedConfig,
) -> Result<(Parameters, Vec<RoundReport>)> {
    let clients: Vec<(UserId, Vec<AugmentedSample>)> = by_user(&dataset.train)
        .into_iter()
        .map(|(u, s)| Ok((u, prepare(&s, cond, classifier)?)))
        .collect::<Result<_>>()?;
    if cfg.clients_per_round == 0 || cfg.clients_per_round > clients.len() {
        return Err(Error::Config(format!(
            "clients_per_round {} outside 1..={}",
            cfg.clients_per_round,
            clients.len()
        )));
    }
    let test = prepare(&dataset.test, cond, classifier)?;
    let mut global = params;
    let mut reports = Vec::with_capacity(cfg.n_rounds);
    for round in 0..cfg.n_rounds {
        let round_seed = seed::derive(cfg.seed, round as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(round_seed);
        let mut picked = index::sample(&mut rng, clients.len(), cfg.clients_per_round).into_vec();
        picked.sort_unstable();
        let mut updates = Vec::with_capacity(picked.len());
        for &c in &picked {
            let (user, data) = &clients[c];
            let local_seed = seed::derive(round_seed, c as u64);
            match local_update(classifier, &global, user, data, cfg, local_seed)? {
                Some(u) => updates.push(u),
                None => eprintln!("warning: client {user} has no training samples, skipped"),
            }
        }
        if !updates.is_empty() {
            global = aggregate(&updates)?;
        }
        let losses: Vec<f64> = updates.iter().filter_map(|u| u.loss).collect();
        let mean_client_loss = (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64);
        let accuracy = evaluate_prepared(classifier, &global, &test)?.accuracy;
        reports.push(RoundReport {
            round,
            clients: updates.iter().map(|u| u.client.clone()).collect(),
            accuracy,
            mean_client_loss,
        });
    }
    Ok((global, reports))
}

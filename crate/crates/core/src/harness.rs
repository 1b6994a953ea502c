//! Experiment configuration, method dispatch, the identifier ablation grid
//! and the baseline comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::Placement;
use crate::data::{
    gen_synthetic, read_records, skew_filter, split_per_user, SplitDataset, SplitRatios, SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::federated::{self, FedConfig, RoundReport};
use crate::identifiers::{assign, AssignOptions, IdentifierAssignment, Scheme};
use crate::ids::UserId;
use crate::model::{init, Classifier, Mode, ModelConfig, Parameters};
use crate::seed;
use crate::tokenizer::{build_vocab, Vocabulary, NON_ALNUM_CAP};
use crate::trainer::{train, train_useradapter, Conditioning, Metrics, TrainConfig};

pub const OUT_DIR_ENV: &str = "UID_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "runs";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    /// One user-agnostic model, no conditioning.
    Conventional,
    /// Shared backbone plus per-user trainable prefix tuned in a second phase.
    UserAdapter,
    /// Trainable per-user vectors at the identifier positions.
    UntiedUserEmb,
    UserIdentifier(Scheme),
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Conventional => "conventional",
            Method::UserAdapter => "user_adapter",
            Method::UntiedUserEmb => "untied_user_emb",
            Method::UserIdentifier(_) => "user_identifier",
        }
    }

    pub fn id_type(self) -> &'static str {
        match self {
            Method::Conventional => "none",
            Method::UserAdapter => "prefix",
            Method::UntiedUserEmb => "untied",
            Method::UserIdentifier(s) => s.name(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::UserIdentifier(s) => write!(f, "user_identifier:{s}"),
            m => f.write_str(m.name()),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conventional" => Ok(Method::Conventional),
            "user_adapter" => Ok(Method::UserAdapter),
            "untied_user_emb" => Ok(Method::UntiedUserEmb),
            _ => match s.strip_prefix("user_identifier:") {
                Some(scheme) => Ok(Method::UserIdentifier(scheme.parse()?)),
                None => Err(Error::Config(format!("unknown method {s:?}"))),
            },
        }
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> Self {
        m.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub synthetic: SyntheticConfig,
    /// JSONL corpus to use instead of the synthetic generator.
    pub path: Option<PathBuf>,
    /// Keep only users whose majority class reaches this share.
    pub skew_threshold: Option<f64>,
    pub split: SplitRatios,
    pub vocab_size: usize,
    pub symbol_budget: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticConfig::default(),
            path: None,
            skew_threshold: None,
            split: SplitRatios::default(),
            vocab_size: 2000,
            symbol_budget: NON_ALNUM_CAP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let desk = ModelConfig::desk(1, 2);
        Self {
            d_model: desk.d_model,
            n_heads: desk.n_heads,
            n_layers: desk.n_layers,
            d_ff: desk.d_ff,
            max_seq_len: desk.max_seq_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdentifierConfig {
    pub scheme: Scheme,
    pub length: usize,
    pub placement: Placement,
    pub enforce_unique: bool,
}

impl Default for IdentifierConfig {
    fn default() -> Self {
        Self { scheme: Scheme::RandAll, length: 8, placement: Placement::Both, enforce_unique: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub prefix_len: usize,
    /// Per-user prefix tuning; phase 1 uses the experiment's `train`.
    pub phase2: TrainConfig,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { prefix_len: 4, phase2: TrainConfig { epochs: 5, batch_size: 16, learning_rate: 1e-2, ..Default::default() } }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub types: Vec<Scheme>,
    /// Applies to the random schemes; `default` and `num` have a natural
    /// length and get a single cell.
    pub lengths: Vec<usize>,
    pub placement: Placement,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            types: vec![Scheme::RandDig, Scheme::RandNon, Scheme::RandAll],
            lengths: vec![4, 8, 16, 48],
            placement: Placement::Prefix,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelShape,
    pub train: TrainConfig,
    pub identifier: IdentifierConfig,
    pub adapter: AdapterConfig,
    pub untied_len: usize,
    pub fed: FedConfig,
    pub ablation: AblationConfig,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut methods = vec![Method::Conventional, Method::UserAdapter, Method::UntiedUserEmb];
        methods.extend(Scheme::ALL.into_iter().map(Method::UserIdentifier));
        Self {
            data: DataConfig::default(),
            model: ModelShape::default(),
            train: TrainConfig { epochs: 10, learning_rate: 3e-3, ..Default::default() },
            identifier: IdentifierConfig::default(),
            adapter: AdapterConfig::default(),
            untied_len: 8,
            fed: FedConfig::default(),
            ablation: AblationConfig::default(),
            methods,
            seeds: vec![1, 2, 3],
        }
    }
}

impl ExperimentConfig {
    /// Reads TOML when the extension is `.toml`, JSON otherwise.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: String| Error::Parse { path: path.into(), line: 0, message: m };
        if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| bad(e.to_string()))
        } else {
            serde_json::from_str(&text).map_err(|e| bad(e.to_string()))
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// Methods in first-seen order, without repeats.
    pub fn unique_methods(&self) -> Vec<Method> {
        let mut seen = BTreeSet::new();
        self.methods.iter().copied().filter(|m| seen.insert(*m)).collect()
    }
}

/// Independent seeds for each random component of one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedPlan {
    pub data: u64,
    pub split: u64,
    pub init: u64,
    pub identifiers: u64,
    pub train: u64,
}

impl SeedPlan {
    pub fn new(seed: u64) -> Self {
        Self {
            data: seed::derive(seed, 1),
            split: seed::derive(seed, 2),
            init: seed::derive(seed, 3),
            identifiers: seed::derive(seed, 4),
            train: seed::derive(seed, 5),
        }
    }
}

/// Encoded, split data shared by every method of one seed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub vocab: Vocabulary,
    pub dataset: SplitDataset,
    pub users: Vec<UserId>,
    /// Names used by the `default` scheme; the user id itself.
    pub usernames: BTreeMap<UserId, String>,
    pub n_classes: usize,
}

pub fn prepare_data(cfg: &DataConfig, data_seed: u64, split_seed: u64) -> Result<Prepared> {
    let (vocab, samples, n_classes) = match &cfg.path {
        Some(path) => {
            let records = read_records(path)?;
            let users: BTreeSet<&str> = records.iter().map(|r| r.user.as_str()).collect();
            let corpus = records.iter().map(|r| r.text.as_str()).chain(users);
            let vocab = build_vocab(corpus, cfg.vocab_size, cfg.symbol_budget)?;
            let n_classes = records.iter().map(|r| r.label + 1).max().unwrap_or(2).max(2);
            let samples = records.iter().map(|r| r.encode(&vocab)).collect();
            (vocab, samples, n_classes)
        }
        None => {
            let syn = SyntheticConfig { seed: data_seed, ..cfg.synthetic.clone() };
            let vocab = build_vocab(syn.lexicon(), cfg.vocab_size, cfg.symbol_budget)?;
            let (samples, _) = gen_synthetic(&syn, &vocab)?;
            (vocab, samples, syn.n_classes)
        }
    };
    let samples = match cfg.skew_threshold {
        Some(t) => skew_filter(&samples, t)?,
        None => samples,
    };
    let dataset = split_per_user(&samples, cfg.split, split_seed)?;
    if dataset.train.is_empty() {
        return Err(Error::Invalid("no training samples after filtering".into()));
    }
    let users = dataset.users();
    let usernames = users.iter().map(|u| (u.clone(), u.to_string())).collect();
    Ok(Prepared { vocab, dataset, users, usernames, n_classes })
}

pub fn prepare_for_seed(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let plan = SeedPlan::new(seed);
    prepare_data(&cfg.data, plan.data, plan.split)
}

pub fn assign_identifiers(
    cfg: &ExperimentConfig,
    data: &Prepared,
    scheme: Scheme,
    length: usize,
    seed: u64,
) -> Result<IdentifierAssignment> {
    let opts = AssignOptions {
        enforce_unique: cfg.identifier.enforce_unique,
        ..AssignOptions::new(scheme, length, seed)
    };
    assign(&data.users, &opts, &data.vocab, Some(&data.usernames))
}

pub fn model_config(cfg: &ExperimentConfig, data: &Prepared, mode: Mode, init_seed: u64) -> ModelConfig {
    let users = if mode == Mode::Tied { Vec::new() } else { data.users.clone() };
    ModelConfig {
        d_model: cfg.model.d_model,
        n_heads: cfg.model.n_heads,
        n_layers: cfg.model.n_layers,
        d_ff: cfg.model.d_ff,
        vocab_size: data.vocab.len(),
        n_classes: data.n_classes,
        max_seq_len: cfg.model.max_seq_len,
        mode,
        users,
        seed: init_seed,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunSpec {
    pub method: Method,
    /// Identifier or user-table length; unused by the conventional and
    /// adapter methods.
    pub id_len: usize,
    pub placement: Placement,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub model: ModelConfig,
    pub params: Parameters,
    pub metrics: Metrics,
    pub assignment: Option<IdentifierAssignment>,
}

#[derive(Clone, Debug)]
pub enum RunResult {
    Done(Box<RunOutput>),
    /// The configuration cannot be realized, e.g. the identifier leaves no
    /// room in the sequence.
    Infeasible(String),
}

fn infeasible(e: Error) -> Result<RunResult> {
    match e {
        Error::IdentifierTooLong { .. } | Error::IdentifierSpaceTooSmall { .. } => {
            Ok(RunResult::Infeasible(e.to_string()))
        }
        e => Err(e),
    }
}

/// One full train and evaluation of `spec.method` on `data`.
pub fn run_one(cfg: &ExperimentConfig, data: &Prepared, spec: &RunSpec, seed: u64) -> Result<RunResult> {
    let plan = SeedPlan::new(seed);
    let train_cfg = TrainConfig { seed: plan.train, ..cfg.train.clone() };
    let cls = data.vocab.specials().cls;
    let (mode, scheme) = match spec.method {
        Method::Conventional => (Mode::Tied, None),
        Method::UserAdapter => (Mode::Prefix { len: cfg.adapter.prefix_len }, None),
        // The token ids are replaced by the user table; only the positions matter.
        Method::UntiedUserEmb => (Mode::Untied { len: spec.id_len }, Some(Scheme::RandAll)),
        Method::UserIdentifier(s) => (Mode::Tied, Some(s)),
    };
    let assignment = match scheme {
        Some(s) => match assign_identifiers(cfg, data, s, spec.id_len, plan.identifiers) {
            Ok(a) => Some(a),
            Err(e) => return infeasible(e),
        },
        None => None,
    };
    if let Some(a) = &assignment {
        if 1 + spec.placement.copies() * a.max_len() > cfg.model.max_seq_len {
            return infeasible(Error::IdentifierTooLong {
                ident: a.max_len(),
                copies: spec.placement.copies(),
                max_seq_len: cfg.model.max_seq_len,
            });
        }
    }
    let model = model_config(cfg, data, mode, plan.init);
    let classifier = Classifier::new(model.clone())?;
    let params = init(&model)?;
    let (params, metrics) = match spec.method {
        Method::UserAdapter => {
            let phase2 = TrainConfig { seed: seed::derive(plan.train, 1), ..cfg.adapter.phase2.clone() };
            let out = train_useradapter(&classifier, params, &data.dataset, cls, &train_cfg, &phase2)?;
            (out.params, out.phase2)
        }
        _ => {
            let cond = match &assignment {
                Some(a) => Conditioning::with_identifiers(cls, a, spec.placement),
                None => Conditioning::plain(cls),
            };
            train(&classifier, params, &data.dataset, &cond, &train_cfg)?
        }
    };
    Ok(RunResult::Done(Box::new(RunOutput { model, params, metrics, assignment })))
}

/// One line of a results CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub id_type: String,
    pub id_len: usize,
    pub seed: u64,
    pub split: String,
    pub accuracy: Option<f64>,
    pub status: String,
}

pub type RowKey = (String, String, usize, u64);

impl ResultRow {
    pub fn key(&self) -> RowKey {
        (self.method.clone(), self.id_type.clone(), self.id_len, self.seed)
    }
}

pub const STATUS_OK: &str = "ok";
pub const STATUS_INFEASIBLE: &str = "infeasible";

/// Rows for one finished (or infeasible) run: overall val and test accuracy
/// plus test accuracy on the ambiguous subset when there is one.
pub fn result_rows(method: Method, id_len: usize, seed: u64, result: &RunResult) -> Vec<ResultRow> {
    let row = |split: &str, accuracy: Option<f64>, status: &str| ResultRow {
        method: method.name().into(),
        id_type: method.id_type().into(),
        id_len,
        seed,
        split: split.into(),
        accuracy,
        status: status.into(),
    };
    match result {
        RunResult::Infeasible(_) => vec![row("test", None, STATUS_INFEASIBLE)],
        RunResult::Done(out) => {
            let m = &out.metrics;
            let mut rows = vec![row("val", Some(m.val.accuracy), STATUS_OK), row("test", Some(m.test.accuracy), STATUS_OK)];
            if let Some(a) = m.test.ambiguous_accuracy {
                rows.push(row("test_ambiguous", Some(a), STATUS_OK));
            }
            rows
        }
    }
}

pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| a.key().cmp(&b.key()).then_with(|| a.split.cmp(&b.split)));
}

/// Writes `rows` in canonical order, replacing `path`.
pub fn write_rows(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut sorted = rows.to_vec();
    sort_rows(&mut sorted);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in &sorted {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Appends rows as runs complete, so an interrupted grid can resume.
struct RowSink {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl RowSink {
    fn open(path: &Path) -> Result<Self> {
        let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        let writer = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        Ok(Self { path: path.into(), writer })
    }

    fn push(&mut self, rows: &[ResultRow]) -> Result<()> {
        for r in rows {
            self.writer.serialize(r)?;
        }
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn existing_rows(path: &Path) -> Result<Vec<ResultRow>> {
    match fs::metadata(path) {
        Ok(m) if m.len() > 0 => read_rows(path),
        _ => Ok(Vec::new()),
    }
}

/// Runs every cell of `cells` for every seed, skipping keys already present
/// in `out`, and finally rewrites `out` in canonical order.
fn run_cells(cfg: &ExperimentConfig, cells: &[RunSpec], out: &Path) -> Result<Vec<ResultRow>> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("no seeds configured".into()));
    }
    let mut rows = existing_rows(out)?;
    let done: BTreeSet<RowKey> = rows.iter().map(ResultRow::key).collect();
    let mut sink = RowSink::open(out)?;
    for &seed in &cfg.seeds {
        let mut data = None;
        for spec in cells {
            let key = (spec.method.name().to_string(), spec.method.id_type().to_string(), spec.id_len, seed);
            if done.contains(&key) {
                continue;
            }
            let data = match &mut data {
                Some(d) => d,
                None => data.insert(prepare_for_seed(cfg, seed)?),
            };
            let result = run_one(cfg, data, spec, seed)?;
            let new = result_rows(spec.method, spec.id_len, seed, &result);
            sink.push(&new)?;
            rows.extend(new);
        }
    }
    drop(sink);
    write_rows(out, &rows)?;
    sort_rows(&mut rows);
    Ok(rows)
}

/// Length of the identifiers `scheme` produces; the configured `length` for
/// random schemes.
fn natural_len(cfg: &ExperimentConfig, scheme: Scheme, length: usize) -> Result<usize> {
    if scheme.is_random() {
        return Ok(length);
    }
    let first_seed = *cfg.seeds.first().ok_or_else(|| Error::Config("no seeds configured".into()))?;
    let data = prepare_for_seed(cfg, first_seed)?;
    Ok(assign_identifiers(cfg, &data, scheme, length, 0)?.max_len())
}

/// Identifier type x length grid.
pub fn run_ablation(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<ResultRow>> {
    if cfg.ablation.lengths.is_empty() {
        return Err(Error::Config("ablation needs at least one length".into()));
    }
    if cfg.ablation.types.is_empty() {
        return Err(Error::Config("ablation needs at least one identifier type".into()));
    }
    let mut cells = Vec::new();
    let mut seen = BTreeSet::new();
    for &scheme in &cfg.ablation.types {
        for &len in &cfg.ablation.lengths {
            let id_len = natural_len(cfg, scheme, len)?;
            if seen.insert((scheme, id_len)) {
                cells.push(RunSpec { method: Method::UserIdentifier(scheme), id_len, placement: cfg.ablation.placement });
            }
        }
    }
    run_cells(cfg, &cells, out)
}

/// Every configured method on identical data and seeds.
pub fn compare_baselines(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<ResultRow>> {
    let methods = cfg.unique_methods();
    if methods.is_empty() {
        return Err(Error::Config("no methods configured".into()));
    }
    let mut cells = Vec::with_capacity(methods.len());
    for m in methods {
        let id_len = match m {
            Method::Conventional => 0,
            Method::UserAdapter => cfg.adapter.prefix_len,
            Method::UntiedUserEmb => cfg.untied_len,
            Method::UserIdentifier(s) => natural_len(cfg, s, cfg.identifier.length)?,
        };
        cells.push(RunSpec { method: m, id_len, placement: cfg.identifier.placement });
    }
    run_cells(cfg, &cells, out)
}

/// Mean accuracy over seeds for one (method, id_type, id_len, split).
#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub method: String,
    pub id_type: String,
    pub id_len: usize,
    pub split: String,
    pub mean: f64,
    pub n_seeds: usize,
}

pub fn summarize(rows: &[ResultRow]) -> Vec<CellSummary> {
    let mut acc: BTreeMap<(String, String, usize, String), (f64, usize)> = BTreeMap::new();
    for r in rows {
        if let (STATUS_OK, Some(a)) = (r.status.as_str(), r.accuracy) {
            let e = acc.entry((r.method.clone(), r.id_type.clone(), r.id_len, r.split.clone())).or_default();
            e.0 += a;
            e.1 += 1;
        }
    }
    acc.into_iter()
        .map(|((method, id_type, id_len, split), (sum, n))| CellSummary {
            method,
            id_type,
            id_len,
            split,
            mean: sum / n as f64,
            n_seeds: n,
        })
        .collect()
}

/// Readable table of mean test accuracies, with the margin over the
/// conventional baseline when it is present.
pub fn summary_table(cfg: &ExperimentConfig, rows: &[ResultRow]) -> String {
    let cells = summarize(rows);
    let base = cells
        .iter()
        .find(|c| c.method == Method::Conventional.name() && c.split == "test")
        .map(|c| c.mean);
    let mut out = String::new();
    let _ = writeln!(out, "{:<18} {:<10} {:>6} {:>9} {:>9} {:>6}", "method", "id_type", "id_len", "test_acc", "margin", "seeds");
    for c in cells.iter().filter(|c| c.split == "test") {
        let margin = base.map(|b| format!("{:+.4}", c.mean - b)).unwrap_or_default();
        let _ = writeln!(
            out,
            "{:<18} {:<10} {:>6} {:>9.4} {:>9} {:>6}",
            c.method, c.id_type, c.id_len, c.mean, margin, c.n_seeds
        );
    }
    let infeasible = rows.iter().filter(|r| r.status == STATUS_INFEASIBLE).count();
    if infeasible > 0 {
        let _ = writeln!(out, "{infeasible} cell(s) infeasible at max_seq_len {}", cfg.model.max_seq_len);
    }
    if cfg.data.path.is_none() && rows.iter().any(|r| r.id_type == Scheme::Default.name()) {
        let _ = writeln!(out, "note: synthetic data has no real usernames; `default` identifiers spell the user id");
    }
    out
}

/// Federated training of a tied model, with or without identifiers.
pub fn run_federated(
    cfg: &ExperimentConfig,
    data: &Prepared,
    with_identifiers: bool,
    seed: u64,
) -> Result<(ModelConfig, Parameters, Vec<RoundReport>)> {
    let plan = SeedPlan::new(seed);
    let cls = data.vocab.specials().cls;
    let model = model_config(cfg, data, Mode::Tied, plan.init);
    let classifier = Classifier::new(model.clone())?;
    let params = init(&model)?;
    let fed = FedConfig { seed: plan.train, ..cfg.fed.clone() };
    let assignment = if with_identifiers {
        Some(assign_identifiers(cfg, data, cfg.identifier.scheme, cfg.identifier.length, plan.identifiers)?)
    } else {
        None
    };
    let cond = match &assignment {
        Some(a) => Conditioning::with_identifiers(cls, a, cfg.identifier.placement),
        None => Conditioning::plain(cls),
    };
    let (params, reports) = federated::run(&classifier, params, &data.dataset, &cond, &fed)?;
    Ok((model, params, reports))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_sha256: String,
    pub seed: Option<u64>,
    pub versions: BTreeMap<String, String>,
}

pub fn manifest(command: &str, cfg: &ExperimentConfig, seed: Option<u64>) -> Manifest {
    let versions = BTreeMap::from([
        (env!("CARGO_PKG_NAME").to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("uid-autodiff".to_string(), uid_autodiff::VERSION.to_string()),
    ]);
    Manifest { command: command.into(), config_sha256: cfg.hash(), seed, versions }
}

pub fn write_manifest(dir: &Path, command: &str, cfg: &ExperimentConfig, seed: Option<u64>) -> Result<PathBuf> {
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest(command, cfg, seed))?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Output directory: the explicit flag, then the environment override, then
/// the default.
pub fn resolve_out_dir(flag: Option<&Path>) -> PathBuf {
    match flag {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR)),
    }
}

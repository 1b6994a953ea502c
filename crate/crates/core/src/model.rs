//! Pre-norm transformer encoder classifier read out at the `CLS` position.
//!
//! Three parameterizations share one backbone:
//! * [`Mode::Tied`]: identifier tokens are embedded by the token table, so
//!   there are no user-specific parameters at all.
//! * [`Mode::Untied`]: identifier positions read a per-user trainable
//!   `[n_users, len, d_model]` table instead of the token table.
//! * [`Mode::Prefix`]: `len` per-user trainable vectors are placed right
//!   after `CLS` while the prefix is active.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use uid_autodiff::{Graph, Segment, Tensor, Var};

use crate::augment::AugmentedSample;
use crate::error::{Error, Result};
use crate::ids::UserId;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Tied,
    Untied { len: usize },
    Prefix { len: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub n_classes: usize,
    pub max_seq_len: usize,
    pub mode: Mode,
    /// Row order of the user tables; empty in tied mode.
    pub users: Vec<UserId>,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: 32 wide, 2 heads, 2 layers, 64 positions.
    pub fn desk(vocab_size: usize, n_classes: usize) -> Self {
        Self {
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            d_ff: 64,
            vocab_size,
            n_classes,
            max_seq_len: 64,
            mode: Mode::Tied,
            users: Vec::new(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        if self.n_classes < 2 || self.vocab_size == 0 || self.d_ff == 0 {
            return Err(Error::Config("degenerate model shape".into()));
        }
        match self.mode {
            Mode::Tied => {}
            Mode::Untied { len } | Mode::Prefix { len } => {
                if len == 0 || self.users.is_empty() {
                    return Err(Error::Config("table modes need users and a positive length".into()));
                }
                if matches!(self.mode, Mode::Prefix { .. }) && 1 + len >= self.max_seq_len {
                    return Err(Error::Config("prefix leaves no room for content".into()));
                }
            }
        }
        Ok(())
    }

    /// Positions the model fills itself, ahead of the content.
    pub fn reserved_positions(&self) -> usize {
        match self.mode {
            Mode::Prefix { len } => len,
            _ => 0,
        }
    }

    /// Name and shape of every tensor, in initialization order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut out = vec![
            ("tok_emb".to_string(), vec![self.vocab_size, d]),
            ("pos_emb".to_string(), vec![self.max_seq_len, d]),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            out.extend([
                (p("ln1.gain"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.bq"), vec![d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.bk"), vec![d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.bv"), vec![d]),
                (p("attn.wo"), vec![d, d]),
                (p("attn.bo"), vec![d]),
                (p("ln2.gain"), vec![d]),
                (p("ln2.bias"), vec![d]),
                (p("mlp.w1"), vec![d, f]),
                (p("mlp.b1"), vec![f]),
                (p("mlp.w2"), vec![f, d]),
                (p("mlp.b2"), vec![d]),
            ]);
        }
        out.extend([
            ("ln_f.gain".to_string(), vec![d]),
            ("ln_f.bias".to_string(), vec![d]),
            ("head.w".to_string(), vec![d, self.n_classes]),
            ("head.b".to_string(), vec![self.n_classes]),
        ]);
        match self.mode {
            Mode::Tied => {}
            Mode::Untied { len } => out.push((USER_EMB.to_string(), vec![self.users.len(), len, d])),
            Mode::Prefix { len } => out.push((PREFIX.to_string(), vec![self.users.len(), len, d])),
        }
        out
    }
}

pub const USER_EMB: &str = "user_emb";
pub const PREFIX: &str = "prefix";

/// Named tensors. Also used for gradients and optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Parameters(BTreeMap<String, Tensor>);

impl Parameters {
    pub fn new(map: BTreeMap<String, Tensor>) -> Self {
        Self(map)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.0.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.0.keys().cloned().collect()
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.0.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self(self.0.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect())
    }

    /// Same names with the same shapes.
    pub fn same_layout(&self, other: &Parameters) -> bool {
        self.0.len() == other.0.len()
            && self.0.iter().zip(&other.0).all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }

    pub fn max_abs_diff(&self, other: &Parameters) -> f64 {
        self.0
            .iter()
            .map(|(k, v)| {
                let o = &other.0[k];
                v.data().iter().zip(o.data()).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
            })
            .fold(0.0, f64::max)
    }
}

/// `N(0, INIT_STD^2)` weights, unit layer-norm gains and zero biases.
pub fn init(config: &ModelConfig) -> Result<Parameters> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut map = BTreeMap::new();
    for (name, shape) in config.tensor_shapes() {
        let t = if name.ends_with(".gain") {
            Tensor::full(&shape, 1.0)
        } else if shape.len() == 1 {
            Tensor::zeros(&shape)
        } else {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect())?
        };
        map.insert(name, t);
    }
    Ok(Parameters(map))
}

/// Which part of training is running.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Everything the mode trains jointly.
    Joint,
    /// Only one user's prefix rows; the backbone is frozen.
    PerUser(UserId),
}

/// Trainable tensors, each either whole or restricted to a range of rows of
/// width equal to the last dimension.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trainable(BTreeMap<String, Option<Range<usize>>>);

impl Trainable {
    pub fn all(params: &Parameters) -> Self {
        Self(params.0.keys().map(|k| (k.clone(), None)).collect())
    }

    pub fn names(&self) -> Vec<String> {
        self.0.keys().cloned().collect()
    }

    pub fn rows(&self, name: &str) -> Option<&Option<Range<usize>>> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Option<Range<usize>>)> {
        self.0.iter()
    }
}

pub fn freeze_mask(config: &ModelConfig, phase: &Phase) -> Result<Trainable> {
    match (phase, config.mode) {
        (Phase::Joint, mode) => Ok(Trainable(
            config
                .tensor_shapes()
                .into_iter()
                .filter(|(n, _)| !(matches!(mode, Mode::Prefix { .. }) && n == PREFIX))
                .map(|(n, _)| (n, None))
                .collect(),
        )),
        (Phase::PerUser(user), Mode::Prefix { len }) => {
            let row = config
                .users
                .iter()
                .position(|u| u == user)
                .ok_or_else(|| Error::UnknownUser(user.to_string()))?;
            Ok(Trainable(BTreeMap::from([(PREFIX.to_string(), Some(row * len..(row + 1) * len))])))
        }
        (Phase::PerUser(_), _) => Err(Error::Config("per-user phase requires prefix mode".into())),
    }
}

/// A model configuration plus the lookup structures its forward pass needs.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub config: ModelConfig,
    user_rows: BTreeMap<UserId, usize>,
    prefix_active: bool,
}

/// Tape built by one forward pass.
pub struct Forward {
    pub graph: Graph,
    pub logits: Var,
}

impl Classifier {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let user_rows = config.users.iter().enumerate().map(|(i, u)| (u.clone(), i)).collect();
        Ok(Self { config, user_rows, prefix_active: false })
    }

    /// Whether prefix vectors are inserted (prefix mode only).
    pub fn set_prefix_active(&mut self, on: bool) {
        self.prefix_active = on;
    }

    pub fn prefix_active(&self) -> bool {
        self.prefix_active && matches!(self.config.mode, Mode::Prefix { .. })
    }

    fn user_row(&self, user: &UserId) -> Result<usize> {
        self.user_rows.get(user).copied().ok_or_else(|| Error::UnknownUser(user.to_string()))
    }

    pub fn forward(&self, params: &Parameters, batch: &[&AugmentedSample]) -> Result<Forward> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let cfg = &self.config;
        let mut g = Graph::new();
        let p = |g: &mut Graph, name: &str| -> Result<Var> {
            let t = params.get(name).ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))?;
            Ok(g.param(name, t))
        };
        let tok = p(&mut g, "tok_emb")?;
        let pos = p(&mut g, "pos_emb")?;
        let table = match cfg.mode {
            Mode::Tied => None,
            Mode::Untied { len } => Some((p(&mut g, USER_EMB)?, len)),
            Mode::Prefix { len } => Some((p(&mut g, PREFIX)?, len)),
        };

        let mut picks = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(batch.len());
        for s in batch {
            let start = picks.len();
            match (cfg.mode, table) {
                (Mode::Untied { len }, Some(_)) => {
                    let row = self.user_row(&s.user)?;
                    for (i, t) in s.ids.iter().enumerate() {
                        match s.ident_slot(i) {
                            Some(slot) if slot < len => picks.push((1, row * len + slot)),
                            Some(slot) => {
                                return Err(Error::Invalid(format!(
                                    "identifier slot {slot} beyond user table length {len}"
                                )))
                            }
                            None => picks.push((0, t.index())),
                        }
                    }
                }
                (Mode::Prefix { len }, Some(_)) if self.prefix_active => {
                    let row = self.user_row(&s.user)?;
                    picks.push((0, s.ids[0].index()));
                    picks.extend((0..len).map(|j| (1, row * len + j)));
                    picks.extend(s.ids[1..].iter().map(|t| (0, t.index())));
                }
                _ => picks.extend(s.ids.iter().map(|t| (0, t.index()))),
            }
            let n = picks.len() - start;
            if n > cfg.max_seq_len {
                return Err(Error::Invalid(format!("sequence of {n} exceeds max_seq_len {}", cfg.max_seq_len)));
            }
            positions.extend(0..n);
            segments.push(Segment { start, len: n });
        }

        let sources: Vec<Var> = match table {
            Some((t, _)) => vec![tok, t],
            None => vec![tok],
        };
        let emb = g.gather(&sources, &picks)?;
        let pe = g.embedding_lookup(pos, &positions)?;
        let mut h = g.add(emb, pe)?;

        for l in 0..cfg.n_layers {
            let name = |s: &str| format!("layer{l}.{s}");
            let (g1, b1) = (p(&mut g, &name("ln1.gain"))?, p(&mut g, &name("ln1.bias"))?);
            let a = g.layer_norm(h, g1, b1)?;
            let proj = |g: &mut Graph, w: &str, b: &str, x: Var| -> Result<Var> {
                let wv = p(g, &name(w))?;
                let bv = p(g, &name(b))?;
                let y = g.matmul(x, wv)?;
                Ok(g.add_row_bias(y, bv)?)
            };
            let q = proj(&mut g, "attn.wq", "attn.bq", a)?;
            let k = proj(&mut g, "attn.wk", "attn.bk", a)?;
            let v = proj(&mut g, "attn.wv", "attn.bv", a)?;
            let att = g.segment_attention(q, k, v, &segments, cfg.n_heads)?;
            let o = proj(&mut g, "attn.wo", "attn.bo", att)?;
            h = g.add(h, o)?;

            let (g2, b2) = (p(&mut g, &name("ln2.gain"))?, p(&mut g, &name("ln2.bias"))?);
            let m = g.layer_norm(h, g2, b2)?;
            let f1 = proj(&mut g, "mlp.w1", "mlp.b1", m)?;
            let f1 = g.gelu(f1);
            let f2 = proj(&mut g, "mlp.w2", "mlp.b2", f1)?;
            h = g.add(h, f2)?;
        }

        let (gf, bf) = (p(&mut g, "ln_f.gain")?, p(&mut g, "ln_f.bias")?);
        let hf = g.layer_norm(h, gf, bf)?;
        let starts: Vec<usize> = segments.iter().map(|s| s.start).collect();
        let cls = g.select_rows(hf, &starts)?;
        let (hw, hb) = (p(&mut g, "head.w")?, p(&mut g, "head.b")?);
        let logits = g.matmul(cls, hw)?;
        let logits = g.add_row_bias(logits, hb)?;
        Ok(Forward { graph: g, logits })
    }

    /// `[batch, n_classes]` logits.
    pub fn logits(&self, params: &Parameters, batch: &[&AugmentedSample]) -> Result<Tensor> {
        let f = self.forward(params, batch)?;
        Ok(f.graph.value(f.logits).clone())
    }

    /// Mean cross-entropy over the batch.
    pub fn loss(&self, params: &Parameters, batch: &[&AugmentedSample]) -> Result<f64> {
        Ok(self.loss_and_grad_inner(params, batch, false)?.0)
    }

    pub fn loss_and_grad(&self, params: &Parameters, batch: &[&AugmentedSample]) -> Result<(f64, Parameters)> {
        let (loss, grads) = self.loss_and_grad_inner(params, batch, true)?;
        Ok((loss, grads.expect("requested")))
    }

    fn loss_and_grad_inner(
        &self,
        params: &Parameters,
        batch: &[&AugmentedSample],
        with_grad: bool,
    ) -> Result<(f64, Option<Parameters>)> {
        let Forward { mut graph, logits } = self.forward(params, batch)?;
        let targets: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let loss = graph.cross_entropy(logits, &targets)?;
        let value = graph.value(loss).data()[0];
        if !with_grad {
            return Ok((value, None));
        }
        let grads = graph.backward(loss)?;
        Ok((value, Some(Parameters(grads.into_named()))))
    }
}

const MAGIC: &[u8; 8] = b"UIDCKPT1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    tensors: Vec<(String, Vec<usize>)>,
}

/// Magic, little-endian `u64` header length, JSON header, then each tensor's
/// values as little-endian `f64` in header order.
pub fn write_checkpoint(mut w: impl Write, config: &ModelConfig, params: &Parameters) -> Result<()> {
    let header = CheckpointHeader {
        config: config.clone(),
        tensors: params.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let io = |e| Error::io("<checkpoint>", e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for (_, t) in params.iter() {
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<(ModelConfig, Parameters)> {
    let io = |e| Error::io("<checkpoint>", e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Invalid("not a checkpoint (bad magic)".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(io)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    let mut map = BTreeMap::new();
    for (name, shape) in header.tensors {
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes).map_err(io)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        map.insert(name, Tensor::new(shape, data)?);
    }
    Ok((header.config, Parameters(map)))
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &Parameters) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, config, params)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, Parameters)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(bytes.as_slice())
}

//! Group-aware batch sampling, two-view augmentation, SGD with a cosine
//! schedule, and the pre-training loop for all three objectives.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::VectorDataset;
use crate::embedding::EmbeddingMatrix;
use crate::encoder::{backward, forward, EncoderParams, MomentumPair};
use crate::error::{Error, Result};
use crate::losses::{pairwise_sum, scan_loss, scl_loss, Denominator, LossConfig, PseudoLabeledBatch};
use crate::memory_bank::{BankInit, MemoryBank};
use crate::mining::NeighborTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Instance discrimination: every anchor is its own group.
    Moco,
    /// Anchors grouped with their mined neighbors.
    Scan,
    /// Groups are whole classes within the batch.
    Scl,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moco" => Ok(Mode::Moco),
            "scan" => Ok(Mode::Scan),
            "scl" => Ok(Mode::Scl),
            _ => Err(Error::InvalidConfig(format!("unknown mode {s:?}"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Moco => "moco",
            Mode::Scan => "scan",
            Mode::Scl => "scl",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    /// Std of the multiplicative per-coordinate jitter.
    pub scale_jitter: f64,
    /// Std of the additive Gaussian noise.
    pub noise: f64,
    /// Probability of zeroing each coordinate.
    pub drop_prob: f64,
}

impl Augmentation {
    pub const NONE: Augmentation = Augmentation {
        scale_jitter: 0.0,
        noise: 0.0,
        drop_prob: 0.0,
    };

    fn validate(&self) -> Result<()> {
        if !(self.scale_jitter >= 0.0 && self.scale_jitter.is_finite())
            || !(self.noise >= 0.0 && self.noise.is_finite())
        {
            return Err(Error::InvalidConfig(
                "augmentation strengths must be finite and >= 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(Error::InvalidConfig(format!(
                "drop probability {} outside [0, 1]",
                self.drop_prob
            )));
        }
        Ok(())
    }
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            scale_jitter: 0.1,
            noise: 0.1,
            drop_prob: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Anchors per batch (S).
    pub queries: usize,
    /// Mined neighbors pulled per anchor (K).
    pub neighbors: usize,
    pub temperature: f64,
    pub denominator: Denominator,
    pub lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub bank: usize,
    pub bank_empty: bool,
    pub encoder_momentum: f64,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub augmentation: Augmentation,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Scan,
            queries: 128,
            neighbors: 2,
            temperature: 0.07,
            denominator: Denominator::NegativesOnly,
            lr: 0.05,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 100,
            bank: 4096,
            bank_empty: false,
            encoder_momentum: 0.99,
            hidden: vec![128],
            embedding_dim: 32,
            augmentation: Augmentation::default(),
            seed: 0,
        }
    }
}

/// Keys accepted by [`TrainConfig::set`] and config files.
pub const CONFIG_KEYS: &[&str] = &[
    "mode",
    "queries",
    "neighbors",
    "temperature",
    "denominator",
    "lr",
    "sgd_momentum",
    "weight_decay",
    "epochs",
    "bank",
    "bank_init",
    "encoder_momentum",
    "hidden",
    "embedding_dim",
    "scale_jitter",
    "noise",
    "drop",
    "seed",
];

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidConfig(format!("bad value for {key}: {v:?}")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.queries == 0 {
            return bad("queries must be >= 1".into());
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return bad(format!("sgd_momentum {} outside [0, 1)", self.sgd_momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.encoder_momentum) {
            return bad(format!(
                "encoder_momentum {} outside [0, 1]",
                self.encoder_momentum
            ));
        }
        if self.bank == 0 || self.embedding_dim == 0 || self.hidden.contains(&0) {
            return bad("bank, embedding_dim and hidden widths must be >= 1".into());
        }
        let group = match self.mode {
            Mode::Scan => 1 + self.neighbors,
            Mode::Moco | Mode::Scl => 1,
        };
        if self.queries.saturating_mul(group) > self.bank {
            return bad(format!(
                "a batch of {} instances would not fit the bank of {}",
                self.queries * group,
                self.bank
            ));
        }
        self.augmentation.validate()
    }

    /// Sets one `key = value` pair. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "mode" => self.mode = v.parse()?,
            "queries" => self.queries = parse_num(key, v)?,
            "neighbors" => self.neighbors = parse_num(key, v)?,
            "temperature" => self.temperature = parse_num(key, v)?,
            "denominator" => {
                self.denominator = match v {
                    "paper" => Denominator::NegativesOnly,
                    "infonce" => Denominator::InfoNce,
                    _ => return Err(Error::InvalidConfig(format!("bad denominator {v:?}"))),
                }
            }
            "lr" => self.lr = parse_num(key, v)?,
            "sgd_momentum" => self.sgd_momentum = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "bank" => self.bank = parse_num(key, v)?,
            "bank_init" => {
                self.bank_empty = match v {
                    "random" => false,
                    "empty" => true,
                    _ => return Err(Error::InvalidConfig(format!("bad bank_init {v:?}"))),
                }
            }
            "encoder_momentum" => self.encoder_momentum = parse_num(key, v)?,
            "hidden" => {
                self.hidden = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(|s| parse_num(key, s.trim()))
                        .collect::<Result<_>>()?
                }
            }
            "embedding_dim" => self.embedding_dim = parse_num(key, v)?,
            "scale_jitter" => self.augmentation.scale_jitter = parse_num(key, v)?,
            "noise" => self.augmentation.noise = parse_num(key, v)?,
            "drop" => self.augmentation.drop_prob = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            _ => return Err(Error::InvalidConfig(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` file. Blank lines and `#` comments are
    /// skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected key = value", lineno + 1))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn layer_sizes(&self, input_dim: usize) -> Vec<usize> {
        let mut s = vec![input_dim];
        s.extend(&self.hidden);
        s.push(self.embedding_dim);
        s
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            temperature: self.temperature,
            denominator: self.denominator,
        }
    }
}

/// `x * (1 + eps) + noise`, then each coordinate zeroed with `drop_prob`.
/// Draw order per coordinate: jitter, noise, drop.
pub fn augment<R: Rng>(x: &[f64], aug: &Augmentation, rng: &mut R) -> Vec<f64> {
    let jitter = Normal::new(0.0, aug.scale_jitter).unwrap();
    let noise = Normal::new(0.0, aug.noise).unwrap();
    x.iter()
        .map(|&v| {
            let e: f64 = jitter.sample(rng);
            let n: f64 = noise.sample(rng);
            let keep = rng.gen::<f64>() >= aug.drop_prob;
            if keep {
                v * (1.0 + e) + n
            } else {
                0.0
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupedBatch {
    /// Dataset row of every instance.
    pub sources: Vec<usize>,
    /// Views fed to the query encoder.
    pub view_query: EmbeddingMatrix,
    /// Views fed to the key encoder.
    pub view_key: EmbeddingMatrix,
    pub pseudo_labels: Vec<u32>,
    pub anchors: Vec<bool>,
}

impl GroupedBatch {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }
}

/// Builds one batch from the given anchors. Each anchor `a` at position `p`
/// forms group `p` with its first `k` table neighbors; instances are laid
/// out group by group, anchor first.
pub fn sample_batch<R: Rng>(
    features: &EmbeddingMatrix,
    table: Option<&NeighborTable>,
    anchors: &[usize],
    k: usize,
    aug: &Augmentation,
    rng: &mut R,
) -> Result<GroupedBatch> {
    let n = features.rows();
    if let Some(t) = table {
        if t.len() != n {
            return Err(Error::TableMismatch {
                table: t.len(),
                dataset: n,
            });
        }
        if t.k() < k {
            return Err(Error::InvalidConfig(format!(
                "table mined with k = {} but batches need {k}",
                t.k()
            )));
        }
    } else if k > 0 {
        return Err(Error::InvalidConfig(
            "neighbor table required when k > 0".into(),
        ));
    }

    let mut sources = Vec::new();
    let mut pseudo_labels = Vec::new();
    let mut flags = Vec::new();
    for (g, &a) in anchors.iter().enumerate() {
        if a >= n {
            return Err(Error::IndexOutOfRange { index: a, len: n });
        }
        sources.push(a);
        pseudo_labels.push(g as u32);
        flags.push(true);
        if let Some(t) = table {
            for nb in t.neighbors(a).iter().take(k) {
                sources.push(nb.index as usize);
                pseudo_labels.push(g as u32);
                flags.push(false);
            }
        }
    }
    let d = features.dim();
    let mut vq = Vec::with_capacity(sources.len() * d);
    let mut vk = Vec::with_capacity(sources.len() * d);
    for &s in &sources {
        vq.extend(augment(features.row(s), aug, rng));
        vk.extend(augment(features.row(s), aug, rng));
    }
    Ok(GroupedBatch {
        view_query: EmbeddingMatrix::new(sources.len(), d, vq)?,
        view_key: EmbeddingMatrix::new(sources.len(), d, vk)?,
        sources,
        pseudo_labels,
        anchors: flags,
    })
}

/// Anchor schedule: one shuffled pass over the dataset per epoch, cut into
/// batches of `s`; the last short batch is topped up from the front of the
/// same permutation.
pub fn epoch_batches<R: Rng>(n: usize, s: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let s = s.min(n);
    if s == 0 {
        return Vec::new();
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm.chunks(s)
        .map(|c| {
            let mut b = c.to_vec();
            let mut fill = perm.iter();
            while b.len() < s {
                b.push(*fill.next().unwrap());
            }
            b
        })
        .collect()
}

pub fn steps_per_epoch(n: usize, s: usize) -> usize {
    if n == 0 || s == 0 {
        0
    } else {
        n.div_ceil(s.min(n))
    }
}

pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

/// `v <- momentum * v + grad + wd * theta; theta <- theta - lr * v`
pub fn sgd_step(
    params: &mut EncoderParams,
    grads: &EncoderParams,
    velocity: &mut EncoderParams,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if !params.same_shape(grads) {
        return Err(Error::ShapeMismatch("gradients"));
    }
    if !params.same_shape(velocity) {
        return Err(Error::ShapeMismatch("velocity"));
    }
    for ((p, g), v) in params
        .tensors_mut()
        .zip(grads.tensors())
        .zip(velocity.tensors_mut())
    {
        for ((pi, gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = momentum * *vi + gi + weight_decay * *pi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub bank_occupancy: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub pair: MomentumPair,
    pub log: Vec<EpochLog>,
}

/// Derives independent stream seeds from the run seed.
fn sub_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic per seed: the same dataset, table and config always give
/// bit-identical parameters.
pub fn pretrain(
    dataset: &VectorDataset,
    table: Option<&NeighborTable>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyTrainSet);
    }
    let k = match config.mode {
        Mode::Scan => {
            if table.is_none() {
                return Err(Error::InvalidConfig(
                    "scan mode needs a neighbor table".into(),
                ));
            }
            config.neighbors
        }
        Mode::Moco | Mode::Scl => 0,
    };
    let table = if k > 0 { table } else { None };

    let sizes = config.layer_sizes(dataset.dim());
    let query = EncoderParams::init(&sizes, sub_seed(config.seed, 1))?;
    let mut pair = MomentumPair::new(query, config.encoder_momentum)?;
    let mut velocity = EncoderParams::zeros(&sizes)?;
    let init = if config.bank_empty {
        BankInit::Empty
    } else {
        BankInit::Random(sub_seed(config.seed, 2))
    };
    let mut bank = MemoryBank::new(config.bank, config.embedding_dim, init)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, 3));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, 4));

    let features = dataset.to_matrix();
    let classes = dataset.labels();
    let loss_cfg = config.loss_config();
    let per_epoch = steps_per_epoch(dataset.len(), config.queries);
    let total = per_epoch * config.epochs;
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0;
    let started = Instant::now();

    for epoch in 1..=config.epochs {
        let mut losses = Vec::with_capacity(per_epoch);
        let mut lr = 0.0;
        for anchors in epoch_batches(dataset.len(), config.queries, &mut order_rng) {
            lr = cosine_lr(step, total, config.lr);
            let batch = sample_batch(
                &features,
                table,
                &anchors,
                k,
                &config.augmentation,
                &mut aug_rng,
            )?;
            let (f_emb, cache) = forward(&pair.query, &batch.view_query)?;
            let (g_emb, _) = forward(&pair.key, &batch.view_key)?;
            let negatives = bank.negatives_view();
            let out = match config.mode {
                Mode::Scl => {
                    let labels: Vec<u32> = batch.sources.iter().map(|&s| classes[s]).collect();
                    scl_loss(&f_emb, &g_emb, &labels, &batch.anchors, &negatives, &loss_cfg)?
                }
                Mode::Moco | Mode::Scan => {
                    let b = PseudoLabeledBatch::new(
                        f_emb,
                        g_emb.clone(),
                        batch.pseudo_labels,
                        batch.anchors,
                    )?;
                    scan_loss(&b, &negatives, &loss_cfg)?
                }
            };
            // key-branch gradients are discarded: the key encoder only moves by momentum
            let grads = backward(&pair.query, &cache, &out.grad_f)?;
            sgd_step(
                &mut pair.query,
                &grads,
                &mut velocity,
                lr,
                config.sgd_momentum,
                config.weight_decay,
            )?;
            pair.momentum_update();
            bank.enqueue(&g_emb)?;
            losses.push(out.loss);
            step += 1;
        }
        log.push(EpochLog {
            epoch,
            mean_loss: pairwise_sum(&losses) / losses.len() as f64,
            lr,
            bank_occupancy: bank.occupancy(),
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainOutcome { pair, log })
}

/// Training log as CSV, one row per epoch. Wall time is left out so equal
/// runs write equal logs.
pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,mean_loss,lr,bank_occupancy\n");
    for e in log {
        s.push_str(&format!(
            "{},{},{},{}\n",
            e.epoch, e.mean_loss, e.lr, e.bank_occupancy
        ));
    }
    s
}

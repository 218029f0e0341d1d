//! Downstream measurement: frozen-feature probes, full fine-tuning,
//! few-shot episodes and embedding export.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{patchify, PatchSet, PointCloud};
use crate::model::{Graph, Linear, Model, PatchBatch};
use crate::numerics::init::trunc_normal;
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::rng::{derive_seed, rng_for, tag};
use crate::training::{clip_grad_norm, AdamW, LrSchedule};

/// Transfer protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Protocol {
    /// Backbone and a three-layer head trained together.
    Full,
    /// Frozen backbone, single linear layer.
    Linear,
    /// Frozen backbone, three-layer head with dropout.
    Mlp3,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Full => "full",
            Protocol::Linear => "linear",
            Protocol::Mlp3 => "mlp3",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Protocol::Full),
            "linear" => Ok(Protocol::Linear),
            "mlp3" => Ok(Protocol::Mlp3),
            _ => Err(Error::invalid_arg(format!("unknown protocol `{s}` (expected full, linear or mlp3)"))),
        }
    }
}

/// Head-training recipe shared by every protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    /// Dropout before each hidden layer of the three-layer head.
    pub dropout: f64,
    /// Number of head initialisations; results report their mean and spread.
    pub seeds: usize,
    pub seed: u64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub finetune_batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            lr: 1e-3,
            min_lr: 1e-6,
            weight_decay: 0.05,
            dropout: 0.5,
            seeds: 3,
            seed: 0,
            finetune_epochs: 10,
            finetune_lr: 2e-4,
            finetune_batch_size: 32,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.finetune_epochs == 0 {
            return Err(Error::config("probe.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 || self.finetune_batch_size == 0 {
            return Err(Error::config("probe.batch_size", "must be at least 1"));
        }
        if self.seeds == 0 {
            return Err(Error::config("probe.seeds", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.finetune_lr > 0.0) || !(self.min_lr >= 0.0) {
            return Err(Error::config("probe.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("probe.dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<V: FromStr>(field: &str, v: &str) -> Result<V> {
            v.trim()
                .parse()
                .map_err(|_| Error::config(format!("probe.{field}"), format!("cannot parse `{}`", v.trim())))
        }
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "min_lr" => self.min_lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "seeds" => self.seeds = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "finetune_epochs" => self.finetune_epochs = parse(key, value)?,
            "finetune_lr" => self.finetune_lr = parse(key, value)?,
            "finetune_batch_size" => self.finetune_batch_size = parse(key, value)?,
            _ => return Err(Error::config(format!("probe.{key}"), "unknown key")),
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("min_lr", self.min_lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("dropout", self.dropout.to_string()),
            ("seeds", self.seeds.to_string()),
            ("seed", self.seed.to_string()),
            ("finetune_epochs", self.finetune_epochs.to_string()),
            ("finetune_lr", self.finetune_lr.to_string()),
            ("finetune_batch_size", self.finetune_batch_size.to_string()),
        ]
    }
}

/// Accuracies of repeated runs with their mean and sample standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl ProbeReport {
    pub fn from_accuracies(accuracies: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&accuracies);
        Self { accuracies, mean, std }
    }
}

impl fmt::Display for ProbeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Feature rows with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    /// `[n, dim]`
    pub features: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl FeatureSet {
    pub fn new(features: Tensor<f32>, labels: Vec<usize>) -> Result<Self> {
        if features.rank() != 2 || features.rows() != labels.len() {
            return Err(Error::invalid_arg(format!(
                "feature set: {:?} features for {} labels",
                features.shape(),
                labels.len()
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.last_dim()
    }

    /// Rows `idx`, with labels remapped through `relabel` when given.
    pub fn subset(&self, idx: &[usize], relabel: Option<&dyn Fn(usize) -> usize>) -> FeatureSet {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.features.row(i));
        }
        let labels = idx
            .iter()
            .map(|&i| relabel.map_or(self.labels[i], |f| f(self.labels[i])))
            .collect();
        FeatureSet {
            features: Tensor::new(&[idx.len(), d], data).expect("subset shape"),
            labels,
        }
    }
}

pub fn labels_of(clouds: &[PointCloud]) -> Result<Vec<usize>> {
    clouds
        .iter()
        .enumerate()
        .map(|(i, c)| {
            c.label
                .map(|l| l as usize)
                .ok_or_else(|| Error::InvalidInput(format!("cloud {i} has no label")))
        })
        .collect()
}

/// Deterministic patches for evaluation: FPS always starts at point 0.
pub fn eval_patches(model: &Model, clouds: &[PointCloud]) -> Result<Vec<PatchSet>> {
    clouds
        .iter()
        .map(|c| patchify(c, model.config.n_patches, model.config.k, 0))
        .collect()
}

const EXTRACT_BATCH: usize = 64;

/// Global features `[n, 2D]` of `clouds` from an unmasked eval-mode forward.
pub fn extract_features(model: &Model, store: &ParamStore<f32>, clouds: &[PointCloud]) -> Result<Tensor<f32>> {
    let sets = eval_patches(model, clouds)?;
    features_from_patches(model, store, &sets)
}

fn features_from_patches(model: &Model, store: &ParamStore<f32>, sets: &[PatchSet]) -> Result<Tensor<f32>> {
    let dim = 2 * model.config.dim;
    let mut out = Vec::with_capacity(sets.len() * dim);
    for chunk in sets.chunks(EXTRACT_BATCH) {
        let batch = PatchBatch::<f32>::from_patch_sets(chunk)?;
        let mut tape = Tape::new();
        let mut g = Graph::eval(&mut tape, store);
        let f = model.global_features(&mut g, &batch)?;
        out.extend_from_slice(tape.value(f).data());
    }
    let t = Tensor::new(&[sets.len(), dim], out)?;
    if !t.is_finite() {
        return Err(Error::InvalidInput("non-finite global feature".into()));
    }
    Ok(t)
}

/// Labelled features of a whole split.
pub fn feature_set(model: &Model, store: &ParamStore<f32>, clouds: &[PointCloud]) -> Result<FeatureSet> {
    FeatureSet::new(extract_features(model, store, clouds)?, labels_of(clouds)?)
}

/// Per-dimension standardisation fitted on one feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Tensor<f32>) -> Self {
        let (n, d) = (x.rows(), x.last_dim());
        let mut mean = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for i in 0..n {
            for (j, &v) in x.row(i).iter().enumerate() {
                mean[j] += v as f64;
                sq[j] += (v as f64) * (v as f64);
            }
        }
        let nf = n.max(1) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= nf;
                let var = (s / nf - *m * *m).max(0.0);
                if var > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &Tensor<f32>) -> Tensor<f32> {
        let d = self.mean.len();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| ((v as f64 - self.mean[i % d]) / self.std[i % d]) as f32)
            .collect();
        Tensor::new(x.shape(), data).expect("same shape")
    }

    pub fn apply_set(&self, s: &FeatureSet) -> FeatureSet {
        FeatureSet {
            features: self.apply(&s.features),
            labels: s.labels.clone(),
        }
    }
}

/// Classifier head layers; hidden layers use GELU.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub layers: Vec<Linear>,
}

impl Head {
    /// Adds head parameters named `head.fc{i}` to `store`. `hidden` is
    /// ignored for the linear protocol.
    pub fn init(
        store: &mut ParamStore<f32>,
        protocol: Protocol,
        in_dim: usize,
        hidden: usize,
        classes: usize,
        seed: u64,
    ) -> Result<Head> {
        let dims = match protocol {
            Protocol::Linear => vec![in_dim, classes],
            Protocol::Mlp3 | Protocol::Full => vec![in_dim, hidden, hidden, classes],
        };
        let mut rng = rng_for(seed, &[tag("head")]);
        let mut layers = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            let wid = store.add(format!("head.fc{}.w", i + 1), trunc_normal(&mut rng, &[w[0], w[1]], 0.02), true)?;
            let bid = store.add(format!("head.fc{}.b", i + 1), Tensor::zeros(&[w[1]]), false)?;
            layers.push(Linear { w: wid, b: Some(bid) });
        }
        Ok(Head { layers })
    }

    /// Logits `[rows, classes]`. With `dropout`, hidden inputs are dropped
    /// with inverted scaling.
    pub fn forward(&self, g: &mut Graph<f32>, mut x: Var, mut dropout: Option<(&mut ChaCha8Rng, f64)>) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                if let Some((rng, p)) = dropout.as_mut() {
                    if *p > 0.0 {
                        let keep = 1.0 - *p;
                        let n = g.tape.value(x).len();
                        let m = (0..n)
                            .map(|_| if rng.random::<f64>() < keep { (1.0 / keep) as f32 } else { 0.0 })
                            .collect();
                        x = g.tape.mul_const(x, m)?;
                    }
                }
            }
            x = g.linear(x, l)?;
            if i < last {
                x = g.tape.gelu(x);
            }
        }
        Ok(x)
    }
}

fn num_classes(sets: &[&FeatureSet]) -> usize {
    sets.iter().flat_map(|s| s.labels.iter()).max().map_or(1, |&m| m + 1)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn batch_input(x: &FeatureSet, idx: &[usize]) -> Tensor<f32> {
    x.subset(idx, None).features
}

/// Trains a head on frozen features and returns its test accuracy.
fn train_head_once(
    train: &FeatureSet,
    test: &FeatureSet,
    protocol: Protocol,
    hidden: usize,
    classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    let mut store = ParamStore::new();
    let head = Head::init(&mut store, protocol, train.dim(), hidden, classes, seed)?;
    let mut opt = AdamW::new(&store, cfg.weight_decay);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let schedule = LrSchedule {
        base: cfg.lr,
        min: cfg.min_lr,
        warmup_steps: 0,
        total_steps: cfg.epochs * steps_per_epoch,
    };
    let dropout = if protocol == Protocol::Linear { 0.0 } else { cfg.dropout };
    let mut rng = rng_for(seed, &[tag("probe")]);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let loss = {
                let mut g = Graph::deterministic(&mut tape, &store);
                let x = g.tape.input(batch_input(train, chunk));
                let logits = head.forward(&mut g, x, Some((&mut rng, dropout)))?;
                let targets: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
                g.tape.cross_entropy(logits, &targets)?
            };
            store.zero_grads();
            tape.backward_into(loss, &mut store)?;
            opt.step(&mut store, schedule.lr(step));
            step += 1;
        }
    }
    head_accuracy(&head, &store, test)
}

fn head_accuracy(head: &Head, store: &ParamStore<f32>, test: &FeatureSet) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::invalid_arg("empty test set"));
    }
    let mut tape = Tape::new();
    let mut g = Graph::eval(&mut tape, store);
    let x = g.tape.input(test.features.clone());
    let logits = head.forward(&mut g, x, None)?;
    let out = tape.value(logits);
    let correct = (0..test.len()).filter(|&i| argmax(out.row(i)) == test.labels[i]).count();
    Ok(correct as f64 / test.len() as f64)
}

/// Frozen-feature probe (linear or three-layer) over `cfg.seeds` head seeds.
pub fn probe(train: &FeatureSet, test: &FeatureSet, protocol: Protocol, hidden: usize, cfg: &ProbeConfig) -> Result<ProbeReport> {
    cfg.validate()?;
    if protocol == Protocol::Full {
        return Err(Error::invalid_arg("probe: the full protocol needs a checkpoint, use finetune_full"));
    }
    if train.is_empty() {
        return Err(Error::invalid_arg("probe: empty training set"));
    }
    if train.dim() != test.dim() {
        return Err(Error::invalid_arg("probe: train and test feature widths differ"));
    }
    let classes = num_classes(&[train, test]);
    let accs = (0..cfg.seeds)
        .map(|s| {
            let seed = derive_seed(cfg.seed, &[tag(protocol.name()), s as u64]);
            train_head_once(train, test, protocol, hidden, classes, cfg, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbeReport::from_accuracies(accs))
}

pub fn probe_linear(train: &FeatureSet, test: &FeatureSet, cfg: &ProbeConfig) -> Result<ProbeReport> {
    probe(train, test, Protocol::Linear, 0, cfg)
}

pub fn probe_mlp3(train: &FeatureSet, test: &FeatureSet, hidden: usize, cfg: &ProbeConfig) -> Result<ProbeReport> {
    probe(train, test, Protocol::Mlp3, hidden, cfg)
}

/// Frozen probe of a checkpoint: extracts features of both splits,
/// standardises them with training-split statistics and trains the head.
pub fn probe_checkpoint(
    model: &Model,
    store: &ParamStore<f32>,
    train: &[PointCloud],
    test: &[PointCloud],
    protocol: Protocol,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    if protocol == Protocol::Full {
        return finetune_full(model, store, train, test, cfg);
    }
    let tr = feature_set(model, store, train)?;
    let te = feature_set(model, store, test)?;
    let st = Standardizer::fit(&tr.features);
    probe(&st.apply_set(&tr), &st.apply_set(&te), protocol, model.config.dim, cfg)
}

/// Fine-tunes backbone and a three-layer head together; one run per head seed.
/// Backbone features are standardised with statistics of the starting
/// checkpoint on the training split, and the head trains at `cfg.lr` while the
/// backbone uses `cfg.finetune_lr`. `store` itself is left untouched.
pub fn finetune_full(
    model: &Model,
    store: &ParamStore<f32>,
    train: &[PointCloud],
    test: &[PointCloud],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid_arg("finetune_full: empty split"));
    }
    let train_labels = labels_of(train)?;
    let test_labels = labels_of(test)?;
    let classes = train_labels.iter().chain(&test_labels).max().map_or(1, |&m| m + 1);
    let train_sets = eval_patches(model, train)?;
    let test_sets = eval_patches(model, test)?;
    let d = model.config.dim;
    let st = Standardizer::fit(&extract_features(model, store, train)?);
    let w = 2 * d;
    let scale = Tensor::from_fn(&[w, w], |i| if i / w == i % w { (1.0 / st.std[i % w]) as f32 } else { 0.0 });
    let shift = Tensor::new(&[w], st.mean.iter().zip(&st.std).map(|(m, s)| (-m / s) as f32).collect())?;
    let standardize = |g: &mut Graph<f32>, f: Var| -> Result<Var> {
        let w = g.tape.input(scale.clone());
        let b = g.tape.input(shift.clone());
        g.tape.linear(f, w, Some(b))
    };

    let mut accs = Vec::with_capacity(cfg.seeds);
    for s in 0..cfg.seeds {
        let seed = derive_seed(cfg.seed, &[tag("full"), s as u64]);
        let mut params = store.clone();
        let head = Head::init(&mut params, Protocol::Full, 2 * d, d, classes, seed)?;
        let mut opt = AdamW::new(&params, cfg.weight_decay);
        opt.scale_lr(&params, |name| name.starts_with("head."), cfg.lr / cfg.finetune_lr);
        let steps_per_epoch = train.len().div_ceil(cfg.finetune_batch_size);
        let schedule = LrSchedule {
            base: cfg.finetune_lr,
            min: cfg.min_lr,
            warmup_steps: steps_per_epoch,
            total_steps: cfg.finetune_epochs * steps_per_epoch,
        };
        let mut rng = rng_for(seed, &[tag("finetune")]);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut step = 0u64;
        for _ in 0..cfg.finetune_epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.finetune_batch_size) {
                let sets: Vec<PatchSet> = chunk.iter().map(|&i| train_sets[i].clone()).collect();
                let batch = PatchBatch::<f32>::from_patch_sets(&sets)?;
                let targets: Vec<usize> = chunk.iter().map(|&i| train_labels[i]).collect();
                let mut tape = Tape::new();
                let loss = {
                    let mut g = Graph::train(&mut tape, &params, derive_seed(seed, &[tag("drop"), step]));
                    let f = model.global_features(&mut g, &batch)?;
                    let f = standardize(&mut g, f)?;
                    let logits = head.forward(&mut g, f, Some((&mut rng, cfg.dropout)))?;
                    g.tape.cross_entropy(logits, &targets)?
                };
                let value = tape.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(Error::InvalidInput(format!("finetune_full: non-finite loss at step {step}")));
                }
                params.zero_grads();
                tape.backward_into(loss, &mut params)?;
                clip_grad_norm(&mut params, 10.0);
                opt.step(&mut params, schedule.lr(step as usize));
                step += 1;
            }
        }
        let mut correct = 0;
        for (chunk, labels) in test_sets.chunks(EXTRACT_BATCH).zip(test_labels.chunks(EXTRACT_BATCH)) {
            let batch = PatchBatch::<f32>::from_patch_sets(chunk)?;
            let mut tape = Tape::new();
            let mut g = Graph::eval(&mut tape, &params);
            let f = model.global_features(&mut g, &batch)?;
            let f = standardize(&mut g, f)?;
            let logits = head.forward(&mut g, f, None)?;
            let out = tape.value(logits);
            correct += labels.iter().enumerate().filter(|&(i, &l)| argmax(out.row(i)) == l).count();
        }
        accs.push(correct as f64 / test.len() as f64);
    }
    Ok(ProbeReport::from_accuracies(accs))
}

/// `way`-way `shot`-shot episodes: support drawn from the training split,
/// `queries` per class from the test split.
#[derive(Clone, Debug, PartialEq)]
pub struct FewShotConfig {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self {
            way: 4,
            shot: 10,
            queries: 20,
            trials: 10,
            seed: 0,
        }
    }
}

/// Indices of one episode: `(support, query, classes)`; class `classes[j]`
/// is relabelled `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

fn by_class(labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        out[l].push(i);
    }
    out
}

pub fn sample_episode(
    train_labels: &[usize],
    test_labels: &[usize],
    fs: &FewShotConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    let classes = train_labels.iter().chain(test_labels).max().map_or(0, |&m| m + 1);
    let tr = by_class(train_labels, classes);
    let te = by_class(test_labels, classes);
    let eligible: Vec<usize> = (0..classes)
        .filter(|&c| tr[c].len() >= fs.shot && te[c].len() >= fs.queries)
        .collect();
    if fs.way == 0 || fs.shot == 0 || fs.queries == 0 {
        return Err(Error::invalid_arg("fewshot: way, shot and queries must be at least 1"));
    }
    if eligible.len() < fs.way {
        return Err(Error::invalid_arg(format!(
            "fewshot: only {} classes have {} support and {} query samples, {} needed",
            eligible.len(),
            fs.shot,
            fs.queries,
            fs.way
        )));
    }
    let chosen: Vec<usize> = index::sample(rng, eligible.len(), fs.way).into_iter().map(|i| eligible[i]).collect();
    let mut support = Vec::new();
    let mut query = Vec::new();
    for &c in &chosen {
        support.extend(index::sample(rng, tr[c].len(), fs.shot).into_iter().map(|i| tr[c][i]));
        query.extend(index::sample(rng, te[c].len(), fs.queries).into_iter().map(|i| te[c][i]));
    }
    Ok(Episode {
        classes: chosen,
        support,
        query,
    })
}

/// Few-shot accuracy over `fs.trials` episodes, one linear probe per episode.
pub fn fewshot(train: &FeatureSet, test: &FeatureSet, fs: &FewShotConfig, cfg: &ProbeConfig) -> Result<ProbeReport> {
    cfg.validate()?;
    if fs.trials == 0 {
        return Err(Error::invalid_arg("fewshot: trials must be at least 1"));
    }
    let mut accs = Vec::with_capacity(fs.trials);
    for t in 0..fs.trials {
        let mut rng = rng_for(fs.seed, &[tag("episode"), t as u64]);
        let ep = sample_episode(&train.labels, &test.labels, fs, &mut rng)?;
        let relabel = |l: usize| ep.classes.iter().position(|&c| c == l).expect("episode class");
        let support = train.subset(&ep.support, Some(&relabel));
        let query = test.subset(&ep.query, Some(&relabel));
        let seed = derive_seed(fs.seed, &[tag("episode-head"), t as u64]);
        accs.push(train_head_once(&support, &query, Protocol::Linear, 0, fs.way, cfg, seed)?);
    }
    Ok(ProbeReport::from_accuracies(accs))
}

/// Writes one row per sample: label, then the feature values, tab-separated.
pub fn export_embeddings(path: &Path, set: &FeatureSet) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for i in 0..set.len() {
        let mut line = set.labels[i].to_string();
        for v in set.features.row(i) {
            line.push('\t');
            line.push_str(&v.to_string());
        }
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One line of a results table.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub name: String,
    pub value: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub const RESULTS_HEADER: &str = "name\tvalue\tmean\tstd\tn";

impl ResultRow {
    pub fn from_report(name: impl Into<String>, value: impl Into<String>, r: &ProbeReport) -> Self {
        Self {
            name: name.into(),
            value: value.into(),
            mean: r.mean,
            std: r.std,
            n: r.accuracies.len(),
        }
    }

    pub fn to_line(&self) -> String {
        format!("{}\t{}\t{:.6}\t{:.6}\t{}", self.name, self.value, self.mean, self.std, self.n)
    }
}

/// Writes a results table with its header line.
pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut text = String::from(RESULTS_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.to_line());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses a results table written by [`write_results`].
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(RESULTS_HEADER) {
        return Err(Error::format(path, 0, "missing results header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            let bad = || Error::format(path, 0, format!("bad results row `{l}`"));
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(ResultRow {
                name: f[0].to_string(),
                value: f[1].to_string(),
                mean: f[2].parse().map_err(|_| bad())?,
                std: f[3].parse().map_err(|_| bad())?,
                n: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

//! Training loop for the relatedness module.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{grad_check_with, Array, GradCheckOptions, GradCheckReport, Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::ingest::{encode_tokens, ExpressionRecord, GroundTruthRegion, ImageDetections, Vocabulary, UNK_INDEX};
use crate::model::{
    confidence_survivors, feature_matrix, forward, BoundModel, ModelConfig, ModelParameters, ParamGroup, DEFAULT_DELTA,
};
use crate::objectives::{
    assign_labels, binary_xe_node, ranking_loss_node, sample_pairs, RankingConfig, DEFAULT_MARGIN, DEFAULT_TOP_H,
};
use crate::pseudo_gt::{PseudoGtSet, DEFAULT_GAMMA};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    BinaryXe,
    Ranking,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xe" | "binary_xe" => Ok(LossKind::BinaryXe),
            "rank" | "ranking" => Ok(LossKind::Ranking),
            other => Err(Error::Config(format!("unknown loss `{other}` (expected xe or rank)"))),
        }
    }
}

impl LossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::BinaryXe => "xe",
            LossKind::Ranking => "rank",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub batch_size: usize,
    /// Learning rate of the feature projection.
    pub lr_head: f64,
    /// Learning rate of every other tensor.
    pub lr_rest: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub seed: u64,
    pub delta: f64,
    pub gamma: f64,
    pub margin: f64,
    pub top_h: usize,
    pub word_dim: usize,
    pub hidden: usize,
    pub max_len: usize,
    /// Keep word embeddings at their initial values.
    pub freeze_embeddings: bool,
    /// Multiply both learning rates by `lr_decay_factor` every this many
    /// epochs; 0 disables decay.
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::BinaryXe,
            batch_size: 8,
            lr_head: 4e-4,
            lr_rest: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 3,
            seed: 0,
            delta: DEFAULT_DELTA,
            gamma: DEFAULT_GAMMA,
            margin: DEFAULT_MARGIN,
            top_h: DEFAULT_TOP_H,
            word_dim: crate::model::DEFAULT_WORD_DIM,
            hidden: crate::model::DEFAULT_HIDDEN,
            max_len: 10,
            freeze_embeddings: false,
            lr_decay_every: 0,
            lr_decay_factor: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.lr_head > 0.0 && self.lr_rest > 0.0) {
            return bad("learning rates must be > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be > 0");
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return bad("delta must lie in [0, 1]");
        }
        if self.max_len == 0 || self.word_dim == 0 || self.hidden == 0 {
            return bad("max_len, word_dim and hidden must be >= 1");
        }
        if !(self.lr_decay_factor > 0.0) {
            return bad("lr_decay_factor must be > 0");
        }
        RankingConfig::new(self.margin, self.top_h)?;
        Ok(())
    }

    pub fn ranking(&self) -> RankingConfig {
        RankingConfig {
            margin: self.margin,
            top_h: self.top_h,
        }
    }

    /// Canonical `key = value` rendering; parsing it back yields an equal config.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "loss = {}", self.loss.as_str());
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "lr_head = {:e}", self.lr_head);
        let _ = writeln!(s, "lr_rest = {:e}", self.lr_rest);
        let _ = writeln!(s, "beta1 = {}", self.beta1);
        let _ = writeln!(s, "beta2 = {}", self.beta2);
        let _ = writeln!(s, "adam_eps = {:e}", self.adam_eps);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "delta = {}", self.delta);
        let _ = writeln!(s, "gamma = {}", self.gamma);
        let _ = writeln!(s, "margin = {}", self.margin);
        let _ = writeln!(s, "top_h = {}", self.top_h);
        let _ = writeln!(s, "word_dim = {}", self.word_dim);
        let _ = writeln!(s, "hidden = {}", self.hidden);
        let _ = writeln!(s, "max_len = {}", self.max_len);
        let _ = writeln!(s, "freeze_embeddings = {}", self.freeze_embeddings);
        let _ = writeln!(s, "lr_decay_every = {}", self.lr_decay_every);
        let _ = writeln!(s, "lr_decay_factor = {}", self.lr_decay_factor);
        s
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_config_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_config_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = TrainConfig::default();
        cfg.apply_config_text(&text)?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
        }
        match key {
            "loss" => self.loss = value.parse()?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr_head" => self.lr_head = num(key, value)?,
            "lr_rest" => self.lr_rest = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "delta" => self.delta = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "margin" => self.margin = num(key, value)?,
            "top_h" => self.top_h = num(key, value)?,
            "word_dim" => self.word_dim = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            "freeze_embeddings" => self.freeze_embeddings = num(key, value)?,
            "lr_decay_every" => self.lr_decay_every = num(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// First 8 bytes of the SHA-256 of the canonical rendering, leaving out
    /// `epochs` so that extending a run keeps the hash.
    pub fn hash(&self) -> u64 {
        let canonical: String = self
            .to_config_string()
            .lines()
            .filter(|l| !l.starts_with("epochs "))
            .flat_map(|l| [l, "\n"])
            .collect();
        let digest = Sha256::digest(canonical.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn model_config(&self, vocab_size: usize, feature_dim: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            word_dim: self.word_dim,
            hidden: self.hidden,
            feature_dim,
        }
    }
}

/// Adam moments for every parameter tensor, in tensor order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Array>,
    pub v: Vec<Array>,
}

impl OptimizerState {
    pub fn new(params: &ModelParameters) -> Self {
        let zeros = || -> Vec<Array> {
            params
                .tensors()
                .iter()
                .map(|t| Array::zeros(t.shape().to_vec()))
                .collect()
        };
        OptimizerState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        AdamHyper {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
        }
    }
}

/// Learning rate per tensor name.
pub trait LearningRates {
    fn lr(&self, name: &str) -> f64;
}

impl<F: Fn(&str) -> f64> LearningRates for F {
    fn lr(&self, name: &str) -> f64 {
        self(name)
    }
}

/// Bias-corrected Adam update of every tensor. Gradients must be finite.
pub fn adam_step(
    params: &mut ModelParameters,
    grads: &[Array],
    state: &mut OptimizerState,
    hyper: AdamHyper,
    lrs: &dyn LearningRates,
) -> Result<()> {
    let names = ModelParameters::tensor_names();
    if grads.len() != names.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} gradients for {} tensors", grads.len(), names.len()),
        ));
    }
    for (g, name) in grads.iter().zip(&names) {
        if !g.all_finite() {
            return Err(Error::NonFinite(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (k, p) in params.tensors_mut().into_iter().enumerate() {
        let lr = lrs.lr(&names[k]);
        let (m, v, g) = (state.m[k].data_mut(), state.v[k].data_mut(), grads[k].data());
        for (((pi, mi), vi), &gi) in p.data_mut().iter_mut().zip(m).zip(v).zip(g) {
            *mi = hyper.beta1 * *mi + (1.0 - hyper.beta1) * gi;
            *vi = hyper.beta2 * *vi + (1.0 - hyper.beta2) * gi * gi;
            if lr != 0.0 {
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
            }
        }
    }
    Ok(())
}

/// One training expression with everything needed to label its boxes.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub expression_id: String,
    pub image: usize,
    pub tokens: Vec<usize>,
    /// Referent box followed by the pseudo ground-truth boxes.
    pub foreground: Vec<BBox>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<ImageDetections>,
    pub feature_dim: usize,
    pub examples: Vec<TrainingExample>,
}

impl Dataset {
    /// Joins expressions with their detections and pseudo ground truth.
    /// Expressions whose image has no detections are kept; they are skipped
    /// at training time like any expression with an empty survivor set.
    pub fn build(
        expressions: &[ExpressionRecord],
        images: Vec<ImageDetections>,
        feature_dim: usize,
        regions: &[GroundTruthRegion],
        pseudo: &[PseudoGtSet],
        vocab: &Vocabulary,
    ) -> Result<Self> {
        let mut images = images;
        let mut slot: HashMap<String, usize> = images
            .iter()
            .enumerate()
            .map(|(i, im)| (im.image_id.clone(), i))
            .collect();
        let region_box: HashMap<&str, BBox> = regions.iter().map(|r| (r.region_id.as_str(), r.bbox)).collect();
        let pseudo_by_expr: HashMap<&str, &PseudoGtSet> =
            pseudo.iter().map(|p| (p.expression_id.as_str(), p)).collect();

        let mut examples = Vec::with_capacity(expressions.len());
        for e in expressions {
            let image = *slot.entry(e.image_id.clone()).or_insert_with(|| {
                images.push(ImageDetections {
                    image_id: e.image_id.clone(),
                    records: Vec::new(),
                });
                images.len() - 1
            });
            let mut foreground = vec![e.referent];
            if let Some(p) = pseudo_by_expr.get(e.expression_id.as_str()) {
                for id in &p.region_ids {
                    let b = region_box
                        .get(id.as_str())
                        .ok_or_else(|| Error::Schema(format!("pseudo ground truth names unknown region `{id}`")))?;
                    foreground.push(*b);
                }
            }
            examples.push(TrainingExample {
                expression_id: e.expression_id.clone(),
                image,
                tokens: encode_tokens(&e.tokens, vocab)?,
                foreground,
            });
        }
        Ok(Dataset {
            images,
            feature_dim,
            examples,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParameters,
    pub optimizer: OptimizerState,
    pub vocab: Vocabulary,
    pub epochs_done: usize,
}

impl TrainState {
    pub fn new(params: ModelParameters, vocab: Vocabulary) -> Self {
        TrainState {
            optimizer: OptimizerState::new(&params),
            params,
            vocab,
            epochs_done: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean of the per-batch losses (batch loss averages its usable expressions).
    pub mean_loss: f64,
    pub positives: usize,
    pub negatives: usize,
    pub pairs: usize,
    /// Expressions with no box above the confidence threshold.
    pub skipped: usize,
    /// Optimizer steps taken.
    pub steps: usize,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Learning rate of `name` in `epoch` under `cfg`.
pub fn scheduled_lr(cfg: &TrainConfig, epoch: usize, name: &str) -> f64 {
    if cfg.freeze_embeddings && name == "word_embeddings" {
        return 0.0;
    }
    let base = match ModelParameters::group_of(name) {
        ParamGroup::Head => cfg.lr_head,
        ParamGroup::Rest => cfg.lr_rest,
    };
    match epoch.checked_div(cfg.lr_decay_every) {
        Some(steps) => base * cfg.lr_decay_factor.powi(steps as i32),
        None => base,
    }
}

struct BatchOutcome {
    loss: Option<f64>,
    positives: usize,
    negatives: usize,
    pairs: usize,
    skipped: usize,
    stepped: bool,
}

/// Loss node of one expression; `None` when it contributes no gradient.
fn example_loss(
    g: &mut Graph,
    m: &crate::model::BoundModel,
    data: &Dataset,
    ex: &TrainingExample,
    cfg: &TrainConfig,
    out: &mut BatchOutcome,
) -> Result<Option<Option<Var>>> {
    let image = &data.images[ex.image];
    let survivors = confidence_survivors(image, cfg.delta);
    if survivors.is_empty() {
        out.skipped += 1;
        return Ok(None);
    }
    let feats = g.constant(feature_matrix(image, &survivors, data.feature_dim)?);
    let fwd = forward(g, m, feats, &ex.tokens)?;
    let boxes: Vec<BBox> = survivors.iter().map(|&i| image.records[i].bbox).collect();
    let labels = assign_labels(&boxes, &ex.foreground);
    let pos = labels.iter().filter(|l| l.is_positive()).count();
    out.positives += pos;
    out.negatives += labels.len() - pos;
    match cfg.loss {
        LossKind::BinaryXe => {
            let y: Vec<f64> = labels.iter().map(|l| l.r_star).collect();
            Ok(Some(Some(binary_xe_node(g, fwd.r, &y)?)))
        }
        LossKind::Ranking => {
            let r = g.value(fwd.r).data().to_vec();
            let pairs = sample_pairs(&labels, &r, &cfg.ranking())?;
            out.pairs += pairs.len();
            Ok(Some(ranking_loss_node(g, fwd.r, &pairs, &cfg.ranking())?))
        }
    }
}

fn run_batch(
    state: &mut TrainState,
    data: &Dataset,
    batch: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<BatchOutcome> {
    let mut out = BatchOutcome {
        loss: None,
        positives: 0,
        negatives: 0,
        pairs: 0,
        skipped: 0,
        stepped: false,
    };
    let mut g = Graph::new();
    let m = state.params.bind(&mut g, true);
    let mut losses = Vec::new();
    let mut usable = 0usize;
    for &k in batch {
        match example_loss(&mut g, &m, data, &data.examples[k], cfg, &mut out)? {
            None => {}
            Some(l) => {
                usable += 1;
                losses.extend(l);
            }
        }
    }
    if losses.is_empty() {
        if usable > 0 {
            out.loss = Some(0.0);
        }
        return Ok(out);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l)?;
    }
    let loss = g.scale(total, 1.0 / usable as f64);
    out.loss = Some(g.value(loss).item());
    g.backward(loss)?;

    let grads: Vec<Array> = m
        .vars()
        .iter()
        .zip(state.params.tensors())
        .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Array::zeros(t.shape().to_vec())))
        .collect();
    drop(g);
    let lr = |name: &str| scheduled_lr(cfg, epoch, name);
    adam_step(&mut state.params, &grads, &mut state.optimizer, cfg.into(), &lr)?;
    out.stepped = true;
    Ok(out)
}

/// One pass over the dataset in a seeded order, one optimizer step per batch.
pub fn train_epoch(state: &mut TrainState, data: &Dataset, cfg: &TrainConfig) -> Result<EpochMetrics> {
    cfg.validate()?;
    if state.params.config.feature_dim != data.feature_dim {
        return Err(Error::shape(
            "train",
            format!(
                "model expects {}-d features, dataset has {}",
                state.params.config.feature_dim, data.feature_dim
            ),
        ));
    }
    let epoch = state.epochs_done;
    let mut order: Vec<usize> = (0..data.examples.len()).collect();
    order.shuffle(&mut epoch_rng(cfg.seed, epoch));

    let mut metrics = EpochMetrics {
        epoch,
        ..Default::default()
    };
    let mut loss_sum = 0.0;
    let mut loss_batches = 0usize;
    for batch in order.chunks(cfg.batch_size) {
        let out = run_batch(state, data, batch, cfg, epoch)?;
        metrics.positives += out.positives;
        metrics.negatives += out.negatives;
        metrics.pairs += out.pairs;
        metrics.skipped += out.skipped;
        if let Some(l) = out.loss {
            loss_sum += l;
            loss_batches += 1;
        }
        metrics.steps += out.stepped as usize;
    }
    if loss_batches == 0 {
        return Err(Error::Empty(format!(
            "no usable training expressions ({} skipped)",
            metrics.skipped
        )));
    }
    metrics.mean_loss = loss_sum / loss_batches as f64;
    state.epochs_done += 1;
    info!(
        "epoch {} loss {:.6} pos {} neg {} pairs {} skipped {}",
        epoch, metrics.mean_loss, metrics.positives, metrics.negatives, metrics.pairs, metrics.skipped
    );
    Ok(metrics)
}

/// Runs epochs until `cfg.epochs` have been completed in total.
pub fn train(state: &mut TrainState, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochMetrics>> {
    if data.examples.is_empty() {
        return Err(Error::Empty("training set has no expressions".into()));
    }
    let mut history = Vec::new();
    while state.epochs_done < cfg.epochs {
        let m = train_epoch(state, data, cfg)?;
        debug!("{m:?}");
        history.push(m);
    }
    Ok(history)
}

/// Random instance for [`model_gradient_check`].
#[derive(Clone, Debug)]
pub struct GradCheckSetup {
    pub config: ModelConfig,
    pub boxes: usize,
    pub tokens: usize,
    /// Replace every parameter with U(-s, s) instead of the training
    /// initialization. The initialization leaves some gradients near 1e-9,
    /// where central differences are dominated by round-off.
    pub param_scale: Option<f64>,
    pub seed: u64,
}

/// Finite-difference check of the full model under binary XE on a random
/// instance: random feature rows, random word indices and random 0/1 targets
/// (at least one positive). Parameters and features are both checked.
pub fn model_gradient_check(setup: &GradCheckSetup, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let config = &setup.config;
    if setup.boxes == 0 || setup.tokens == 0 {
        return Err(Error::Range(
            "gradient check needs at least one box and one token".into(),
        ));
    }
    if config.vocab_size <= UNK_INDEX + 1 {
        return Err(Error::Range(
            "gradient check needs a vocabulary beyond <pad> and <unk>".into(),
        ));
    }
    let mut params = ModelParameters::init(config.clone(), None, None, setup.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed ^ 0x5DEE_CE66);
    if let Some(s) = setup.param_scale {
        for t in params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-s..s));
        }
    }
    let (boxes, dim) = (setup.boxes, config.feature_dim);
    let feats: Vec<f64> = (0..boxes * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let indices: Vec<usize> = (0..setup.tokens)
        .map(|_| rng.random_range(UNK_INDEX + 1..config.vocab_size))
        .collect();
    let mut targets: Vec<f64> = (0..boxes).map(|_| rng.random_range(0..2u8) as f64).collect();
    targets[0] = 1.0;

    let mut inputs: Vec<Array> = params.tensors().into_iter().cloned().collect();
    inputs.push(Array::new(vec![boxes, dim], feats)?);
    let n = inputs.len() - 1;
    grad_check_with(
        |g: &mut Graph, v: &[Var]| {
            let m = BoundModel::from_vars(v[..n].to_vec(), config.clone());
            let out = forward(g, &m, v[n], &indices)?;
            binary_xe_node(g, out.r, &targets)
        },
        &inputs,
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::ingest::{DetectionRecord, Split};
    use crate::model::BoundModel;
    use crate::objectives::binary_xe;

    fn tiny_params(seed: u64) -> ModelParameters {
        let cfg = ModelConfig {
            vocab_size: 4,
            word_dim: 4,
            hidden: 3,
            feature_dim: 4,
        };
        ModelParameters::init(cfg, None, None, seed).unwrap()
    }

    fn ones_like(p: &ModelParameters) -> Vec<Array> {
        p.tensors()
            .iter()
            .map(|t| Array::full(t.shape().to_vec(), 1.0))
            .collect()
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = tiny_params(1);
        let before = p.clone();
        let grads: Vec<Array> = p.tensors().iter().map(|t| Array::zeros(t.shape().to_vec())).collect();
        let mut st = OptimizerState::new(&p);
        let cfg = TrainConfig::default();
        adam_step(&mut p, &grads, &mut st, (&cfg).into(), &|_: &str| 1e-3).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = tiny_params(2);
        let before = p.clone();
        let grads = ones_like(&p);
        let mut st = OptimizerState::new(&p);
        let cfg = TrainConfig::default();
        let lr = |n: &str| scheduled_lr(&cfg, 0, n);
        adam_step(&mut p, &grads, &mut st, (&cfg).into(), &lr).unwrap();
        let names = ModelParameters::tensor_names();
        let mut deltas = HashMap::new();
        for ((a, b), n) in p.tensors().iter().zip(before.tensors()).zip(&names) {
            let d = b.data()[0] - a.data()[0];
            let want = lr(n) / (1.0 + cfg.adam_eps);
            assert!((d - want).abs() < 1e-12, "{n}: {d} vs {want}");
            deltas.insert(n.as_str(), d);
        }
        let ratio = deltas["proj.w"] / deltas["mlp_a.w1"];
        assert!((ratio - 4e-4 / 5e-3).abs() < 1e-9);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = tiny_params(3);
        let mut grads = ones_like(&p);
        grads[5].data_mut()[0] = f64::NAN;
        let mut st = OptimizerState::new(&p);
        let err = adam_step(&mut p, &grads, &mut st, (&TrainConfig::default()).into(), &|_: &str| {
            1e-3
        });
        let name = ModelParameters::tensor_names()[5].clone();
        assert!(matches!(err, Err(Error::NonFinite(n)) if n == name));
    }

    #[test]
    fn config_round_trip_and_hash() {
        let mut c = TrainConfig {
            loss: LossKind::Ranking,
            seed: 9,
            lr_head: 1e-3,
            ..Default::default()
        };
        let mut back = TrainConfig::default();
        back.apply_config_text(&c.to_config_string()).unwrap();
        assert_eq!(back, c);
        let h = c.hash();
        c.epochs += 5;
        assert_eq!(c.hash(), h);
        c.seed += 1;
        assert_ne!(c.hash(), h);
        assert!(TrainConfig::default().apply_config_text("bogus = 1").is_err());
        assert!(TrainConfig::default().apply_config_text("batch_size = x").is_err());
        let mut ok = TrainConfig::default();
        ok.apply_config_text("# comment\nloss = rank # trailing\n\nbatch_size = 2")
            .unwrap();
        assert_eq!((ok.loss, ok.batch_size), (LossKind::Ranking, 2));
    }

    #[test]
    fn decay_schedule() {
        let c = TrainConfig {
            lr_decay_every: 2,
            lr_decay_factor: 0.5,
            ..Default::default()
        };
        assert_eq!(scheduled_lr(&c, 1, "mlp_a.w1"), 5e-3);
        assert_eq!(scheduled_lr(&c, 2, "mlp_a.w1"), 2.5e-3);
        assert_eq!(scheduled_lr(&c, 4, "proj.b"), 1e-4);
        let f = TrainConfig {
            freeze_embeddings: true,
            ..Default::default()
        };
        assert_eq!(scheduled_lr(&f, 0, "word_embeddings"), 0.0);
    }

    // Four images, four boxes each: box k has category k and a one-hot feature.
    // Expressions name one category; that box is the referent.
    fn toy_data(n_images: usize) -> (Dataset, Vocabulary) {
        let words = ["<pad>", "<unk>", "cat", "dog"].map(String::from).to_vec();
        let vocab = Vocabulary::from_words(words, 4).unwrap();
        let mut images = Vec::new();
        let mut exprs = Vec::new();
        for i in 0..n_images {
            let records = (0..4)
                .map(|k| {
                    let x = 100.0 * k as f64;
                    let mut feature = vec![0.0; 4];
                    feature[k] = 1.0;
                    DetectionRecord {
                        bbox: BBox::new(x, 0.0, x + 50.0, 50.0).unwrap(),
                        category_id: k as i64,
                        category_name: format!("c{k}"),
                        confidence: 0.9,
                        feature,
                    }
                })
                .collect();
            images.push(ImageDetections {
                image_id: format!("im{i}"),
                records,
            });
            let (word, k) = if i % 2 == 0 { ("cat", 0) } else { ("dog", 1) };
            let x = 100.0 * k as f64;
            exprs.push(ExpressionRecord {
                expression_id: format!("e{i}"),
                image_id: format!("im{i}"),
                tokens: vec!["the".into(), word.into()],
                pos_tags: None,
                referent: BBox::new(x, 0.0, x + 50.0, 50.0).unwrap(),
                split: Split::Train,
            });
        }
        let data = Dataset::build(&exprs, images, 4, &[], &[], &vocab).unwrap();
        (data, vocab)
    }

    fn toy_config(loss: LossKind) -> TrainConfig {
        TrainConfig {
            loss,
            batch_size: 2,
            word_dim: 4,
            hidden: 3,
            max_len: 4,
            epochs: 25,
            seed: 17,
            lr_head: 1e-2,
            lr_rest: 1e-2,
            ..Default::default()
        }
    }

    fn fresh_state(cfg: &TrainConfig, vocab: &Vocabulary) -> TrainState {
        let p = ModelParameters::init(cfg.model_config(vocab.len(), 4), Some(vocab), None, cfg.seed).unwrap();
        TrainState::new(p, vocab.clone())
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let (data, vocab) = toy_data(2);
        let cfg = toy_config(LossKind::BinaryXe);
        let empty = Dataset {
            examples: vec![],
            ..data
        };
        let mut st = fresh_state(&cfg, &vocab);
        assert!(matches!(train(&mut st, &empty, &cfg), Err(Error::Empty(_))));
    }

    #[test]
    fn all_boxes_below_delta_is_an_error() {
        let (mut data, vocab) = toy_data(2);
        for im in &mut data.images {
            im.records.iter_mut().for_each(|r| r.confidence = 0.01);
        }
        let cfg = toy_config(LossKind::BinaryXe);
        let mut st = fresh_state(&cfg, &vocab);
        assert!(matches!(train_epoch(&mut st, &data, &cfg), Err(Error::Empty(_))));
    }

    #[test]
    fn loss_decreases_over_fifty_steps() {
        for loss in [LossKind::BinaryXe, LossKind::Ranking] {
            let (data, vocab) = toy_data(4);
            let cfg = toy_config(loss);
            let mut st = fresh_state(&cfg, &vocab);
            let hist = train(&mut st, &data, &cfg).unwrap();
            assert_eq!(hist.iter().map(|m| m.steps).sum::<usize>(), 50);
            let (first, last) = (hist[0].mean_loss, hist.last().unwrap().mean_loss);
            assert!(last < first, "{loss:?}: {first} -> {last}");
            if loss == LossKind::Ranking {
                assert!(hist[0].pairs > 0);
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let (data, vocab) = toy_data(4);
        let cfg = TrainConfig {
            epochs: 4,
            ..toy_config(LossKind::BinaryXe)
        };
        let mut a = fresh_state(&cfg, &vocab);
        let mut b = fresh_state(&cfg, &vocab);
        train(&mut a, &data, &cfg).unwrap();
        train(&mut b, &data, &cfg).unwrap();
        assert_eq!(a, b);

        let mut c = fresh_state(&cfg, &vocab);
        train(
            &mut c,
            &data,
            &TrainConfig {
                epochs: 2,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_eq!(c.epochs_done, 2);
        train(&mut c, &data, &cfg).unwrap();
        assert_eq!(c, a);
    }

    #[test]
    fn frozen_embeddings_stay_put() {
        let (data, vocab) = toy_data(4);
        let cfg = TrainConfig {
            freeze_embeddings: true,
            ..toy_config(LossKind::BinaryXe)
        };
        let mut st = fresh_state(&cfg, &vocab);
        let emb = st.params.word_embeddings.clone();
        let hist = train(&mut st, &data, &cfg).unwrap();
        assert_eq!(st.params.word_embeddings, emb);
        assert!(hist.last().unwrap().mean_loss < hist[0].mean_loss);
    }

    #[test]
    fn two_expression_loss_gradient() {
        let (data, vocab) = toy_data(2);
        let cfg = toy_config(LossKind::BinaryXe);
        let st = fresh_state(&cfg, &vocab);
        let mcfg = st.params.config.clone();
        let inputs: Vec<Array> = st.params.tensors().into_iter().cloned().collect();
        let feats: Vec<Array> = data
            .images
            .iter()
            .map(|im| feature_matrix(im, &[0, 1, 2, 3], 4).unwrap())
            .collect();
        let targets = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]];

        // the graph loss must agree with the plain-value loss
        let mut plain = 0.0;
        for (k, ex) in data.examples.iter().enumerate() {
            let r = st.params.relatedness(&feats[k], &ex.tokens).unwrap();
            plain += binary_xe(&r, &targets[k]).unwrap() / 2.0;
        }

        let loss_fn = |g: &mut Graph, v: &[Var]| -> Result<Var> {
            let m = BoundModel::from_vars(v.to_vec(), mcfg.clone());
            let mut total = None;
            for (k, ex) in data.examples.iter().enumerate() {
                let f = g.constant(feats[k].clone());
                let out = forward(g, &m, f, &ex.tokens)?;
                let l = binary_xe_node(g, out.r, &targets[k])?;
                total = Some(match total {
                    None => l,
                    Some(t) => g.add(t, l)?,
                });
            }
            Ok(g.scale(total.unwrap(), 0.5))
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|a| g.param(a.clone())).collect();
        let l = loss_fn(&mut g, &vars).unwrap();
        assert!((g.value(l).item() - plain).abs() < 1e-12);

        // Some gradients are ~1e-8, so steps below 1e-4 hit round-off. Check
        // instead that the error shrinks quadratically with the step.
        let coarse = grad_check(loss_fn, &inputs, 1e-3).unwrap();
        let fine = grad_check(loss_fn, &inputs, 1e-4).unwrap();
        assert!(fine < 5e-4, "{fine}");
        assert!(coarse / fine > 50.0, "{coarse} -> {fine}");
    }

    #[test]
    fn random_instance_gradient_check() {
        let setup = GradCheckSetup {
            config: ModelConfig {
                vocab_size: 6,
                word_dim: 4,
                hidden: 3,
                feature_dim: 5,
            },
            boxes: 3,
            tokens: 4,
            param_scale: Some(1.0),
            seed: 3,
        };
        let r = model_gradient_check(&setup, &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        let empty = GradCheckSetup { boxes: 0, ..setup };
        assert!(matches!(
            model_gradient_check(&empty, &GradCheckOptions::default()),
            Err(Error::Range(_))
        ));
    }
}

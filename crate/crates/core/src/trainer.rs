//! Alternating adversarial training with Adam, the three generator variants,
//! the scene classifier, and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, StoredTensor, TensorFile};
use crate::dataset::PairSample;
use crate::error::{invalid, Error, Result};
use crate::evalkit::{ClassifierTarget, ConvClassifier};
use crate::gan::{
    continuity_pad_backward, continuity_pad_with, loss_d, loss_d_backward, loss_g, loss_g_backward,
    sample_pad_columns, Conditioning, Discriminator, DiscriminatorSpec, Generator, GeneratorSaved, GeneratorSpec,
    LossWeights, PadColumns, PadSpec,
};
use crate::image::Image;
use crate::nn::{add_grads, Grads, Mode, Network, OneHotLabel, Param, Pass, Tensor4};
use crate::seed;

/// Which generator family is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// One generator for all classes, gated by the class label.
    Conditioned,
    /// One generator for all classes, no label.
    Independent,
    /// One unconditioned generator per class.
    Specific,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Conditioned => "conditioned",
            Variant::Independent => "independent",
            Variant::Specific => "specific",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "conditioned" => Some(Variant::Conditioned),
            "independent" => Some(Variant::Independent),
            "specific" => Some(Variant::Specific),
            _ => None,
        }
    }

    pub fn conditioning(self) -> Conditioning {
        match self {
            Variant::Conditioned => Conditioning::ClassConditioned,
            Variant::Independent | Variant::Specific => Conditioning::ClassIndependent,
        }
    }
}

/// Deepest U-Net for a given height: one halving per factor of two, at most 8.
pub fn default_depth(height: usize) -> usize {
    (height.trailing_zeros() as usize).min(8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub pad: bool,
    pub variant: Variant,
    pub lambda: f64,
    pub width: usize,
    pub height: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub cap_per_class: Option<usize>,
}

impl TrainConfig {
    /// Defaults for panoramas of the given size.
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 1,
            iterations: 200,
            seed: 0,
            pad: true,
            variant: Variant::Conditioned,
            lambda: LossWeights::default().lambda,
            width,
            height,
            base_channels: 64,
            depth: default_depth(height),
            cap_per_class: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rate_ok = self.learning_rate.is_finite() && self.learning_rate >= 0.0;
        let beta_ok = |b: f64| (0.0..1.0).contains(&b);
        if !rate_ok || !beta_ok(self.beta1) || !beta_ok(self.beta2) {
            return Err(invalid("learning rate must be >= 0 and betas in [0, 1)"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(invalid("lambda must be finite and >= 0"));
        }
        if self.batch_size == 0 || self.iterations == 0 || self.base_channels == 0 {
            return Err(invalid("batch size, iterations and channels must be positive"));
        }
        if self.cap_per_class == Some(0) {
            return Err(invalid("per-class cap must be at least 1"));
        }
        if self.width != 2 * self.height {
            return Err(invalid(format!("image size {}x{} is not 2:1", self.width, self.height)));
        }
        self.generator_spec(1).validate()?;
        self.generator_spec(1).encoder_shapes(self.height, self.width)?;
        if self.pad {
            PadSpec::for_width(self.width).validate(self.width)?;
        }
        self.discriminator_spec(1)?;
        Ok(())
    }

    pub fn generator_spec(&self, k_classes: usize) -> GeneratorSpec {
        GeneratorSpec::new(self.base_channels, self.depth, k_classes, self.variant.conditioning())
    }

    /// The default discriminator, made shallower only if the (padded)
    /// training images are too small for it.
    pub fn discriminator_spec(&self, k_classes: usize) -> Result<DiscriminatorSpec> {
        let p = self.pad_spec();
        let (h, w) = if p.enabled { (self.height + 2, self.width + 2 * p.side_width) } else { (self.height, self.width) };
        DiscriminatorSpec::new(self.base_channels, k_classes, self.variant.conditioning()).fit_to(h, w)
    }

    pub fn pad_spec(&self) -> PadSpec {
        if self.pad {
            PadSpec::for_width(self.width)
        } else {
            PadSpec::disabled()
        }
    }

    fn adam(&self) -> AdamParams {
        AdamParams { lr: self.learning_rate, beta1: self.beta1, beta2: self.beta2, eps: 1e-8 }
    }

    /// Flat `key = value` form, also used for the checkpoint config block.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("learning_rate", self.learning_rate.to_string());
        put("beta1", self.beta1.to_string());
        put("beta2", self.beta2.to_string());
        put("batch_size", self.batch_size.to_string());
        put("iterations", self.iterations.to_string());
        put("seed", self.seed.to_string());
        put("pad", if self.pad { "on" } else { "off" }.to_string());
        put("variant", self.variant.as_str().to_string());
        put("lambda", self.lambda.to_string());
        put("width", self.width.to_string());
        put("height", self.height.to_string());
        put("base_channels", self.base_channels.to_string());
        put("depth", self.depth.to_string());
        put("cap_per_class", self.cap_per_class.map_or("none".to_string(), |c| c.to_string()));
        m
    }

    pub fn from_map(m: &BTreeMap<String, String>) -> Result<Self> {
        fn get<V: std::str::FromStr>(m: &BTreeMap<String, String>, k: &str) -> Result<V> {
            let v = m.get(k).ok_or_else(|| invalid(format!("config key `{k}` missing")))?;
            v.parse().map_err(|_| invalid(format!("config key `{k}` has bad value `{v}`")))
        }
        let pad = match m.get("pad").map(String::as_str) {
            Some("on") => true,
            Some("off") => false,
            other => return Err(invalid(format!("pad must be on or off, got {other:?}"))),
        };
        let variant = m
            .get("variant")
            .and_then(|v| Variant::parse(v))
            .ok_or_else(|| invalid("variant must be conditioned, independent or specific"))?;
        let cap_per_class = match m.get("cap_per_class").map(String::as_str) {
            None | Some("none") => None,
            Some(_) => Some(get(m, "cap_per_class")?),
        };
        let cfg = Self {
            learning_rate: get(m, "learning_rate")?,
            beta1: get(m, "beta1")?,
            beta2: get(m, "beta2")?,
            batch_size: get(m, "batch_size")?,
            iterations: get(m, "iterations")?,
            seed: get(m, "seed")?,
            pad,
            variant,
            lambda: get(m, "lambda")?,
            width: get(m, "width")?,
            height: get(m, "height")?,
            base_channels: get(m, "base_channels")?,
            depth: get(m, "depth")?,
            cap_per_class,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moment estimates aligned with a network's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[&Param<f32>]) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }

    /// One bias-corrected Adam update.
    pub fn update(&mut self, params: Vec<&mut Param<f32>>, grads: &Grads<f32>, hp: AdamParams) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(invalid("optimizer state does not match the parameter list"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - hp.beta1.powi(t);
        let c2 = 1.0 - hp.beta2.powi(t);
        let (b1, b2) = (hp.beta1 as f32, hp.beta2 as f32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if g.len() != p.len() || m.len() != p.len() {
                return Err(invalid("gradient does not match its parameter"));
            }
            for (((w, g), m), v) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = f64::from(*m) / c1;
                let v_hat = f64::from(*v) / c2;
                *w -= (hp.lr * m_hat / (v_hat.sqrt() + hp.eps)) as f32;
            }
        }
        Ok(())
    }
}

/// Generator, discriminator and their optimizers.
#[derive(Clone, Debug, PartialEq)]
pub struct GanState {
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub adam_g: AdamState,
    pub adam_d: AdamState,
    pub iteration: usize,
}

impl GanState {
    pub fn new(cfg: &TrainConfig, k_classes: usize, init_seed: u64) -> Result<Self> {
        let generator = Generator::new(cfg.generator_spec(k_classes), seed::derive(init_seed, "generator", 0))?;
        let discriminator =
            Discriminator::new(cfg.discriminator_spec(k_classes)?, seed::derive(init_seed, "discriminator", 0))?;
        Ok(Self {
            adam_g: AdamState::new(&generator.params()),
            adam_d: AdamState::new(&discriminator.params()),
            generator,
            discriminator,
            iteration: 0,
        })
    }
}

/// Canvas, target and label tensors for one optimisation step.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor4<f32>,
    pub y: Tensor4<f32>,
    pub labels: Vec<OneHotLabel>,
}

impl Batch {
    pub fn from_pairs(pairs: &[&PairSample]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(invalid("empty batch"));
        }
        let x: Vec<_> = pairs.iter().map(|p| p.x.canvas.to_tensor::<f32>()).collect();
        let y: Vec<_> = pairs.iter().map(|p| p.y.to_tensor::<f32>()).collect();
        Ok(Self { x: Tensor4::stack(&x)?, y: Tensor4::stack(&y)?, labels: pairs.iter().map(|p| p.label).collect() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub loss_d: f64,
    pub loss_g_gan: f64,
    pub loss_g_l1: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub steps: Vec<StepLosses>,
}

impl LossHistory {
    /// Mean L1 term over `range` of iterations.
    pub fn mean_l1(&self, range: std::ops::Range<usize>) -> f64 {
        let s = &self.steps[range];
        s.iter().map(|l| l.loss_g_l1).sum::<f64>() / s.len() as f64
    }
}

/// The generator's output for a batch, kept for both players' steps.
pub struct FakeBatch {
    pub fake: Tensor4<f32>,
    saved: GeneratorSaved<f32>,
    cols: Vec<PadColumns>,
}

fn pad(t: &Tensor4<f32>, spec: PadSpec, cols: &[PadColumns]) -> Result<Tensor4<f32>> {
    if spec.enabled {
        continuity_pad_with(t, spec.side_width, cols)
    } else {
        Ok(t.clone())
    }
}

fn diverged(iteration: usize, e: Error) -> Error {
    match e {
        Error::NumericDomain(detail) => Error::Diverged { iteration, detail },
        other => other,
    }
}

fn check_finite(iteration: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { iteration, detail: format!("{what} is {v}") })
    }
}

/// Runs the generator on the batch. Dropout and pad-row choices are seeded
/// by the iteration counter.
pub fn generate_fake(state: &GanState, batch: &Batch, cfg: &TrainConfig) -> Result<FakeBatch> {
    let it = state.iteration as u64;
    let mut pass = Pass::new(Mode::Train, seed::derive(cfg.seed, "dropout", it)).with_labels(batch.labels.clone());
    let (fake, saved) = state.generator.forward(&batch.x, &mut pass)?;
    if !fake.all_finite() {
        return Err(Error::Diverged { iteration: state.iteration, detail: "generator output is not finite".into() });
    }
    let cols = sample_pad_columns(batch.x.n(), batch.x.w(), seed::derive(cfg.seed, "pad", it));
    Ok(FakeBatch { fake, saved, cols })
}

/// Discriminator update on padded (x, y) as real and padded (x, G(x)) as
/// fake. The generator is not touched.
pub fn d_step(state: &mut GanState, batch: &Batch, fake: &FakeBatch, cfg: &TrainConfig) -> Result<f64> {
    let spec = cfg.pad_spec();
    let it = state.iteration;
    let cond = pad(&batch.x, spec, &fake.cols)?;
    let real = pad(&batch.y, spec, &fake.cols)?;
    let gen = pad(&fake.fake, spec, &fake.cols)?;
    let mut pass = Pass::new(Mode::Train, 0).with_labels(batch.labels.clone());
    let d = &state.discriminator;
    let (s_real, saved_real) = d.forward(&cond, &real, &mut pass)?;
    let (s_fake, saved_fake) = d.forward(&cond, &gen, &mut pass)?;
    let loss = loss_d(&s_real, &s_fake).map_err(|e| diverged(it, e))?;
    check_finite(it, "discriminator loss", loss)?;
    let (g_real, g_fake) = loss_d_backward(&s_real, &s_fake);
    let (_, _, mut grads) = d.backward(&saved_real, &g_real)?;
    let (_, _, grads_fake) = d.backward(&saved_fake, &g_fake)?;
    add_grads(&mut grads, &grads_fake);
    state.adam_d.update(state.discriminator.params_mut(), &grads, cfg.adam())?;
    Ok(loss)
}

/// Generator update against the (already updated) discriminator. Returns
/// `(gan term, l1 term)`; the discriminator is not touched.
pub fn g_step(state: &mut GanState, batch: &Batch, fake: &FakeBatch, cfg: &TrainConfig) -> Result<(f64, f64)> {
    let spec = cfg.pad_spec();
    let it = state.iteration;
    let cond = pad(&batch.x, spec, &fake.cols)?;
    let gen = pad(&fake.fake, spec, &fake.cols)?;
    let mut pass = Pass::new(Mode::Train, 0).with_labels(batch.labels.clone());
    let (scores, saved) = state.discriminator.forward(&cond, &gen, &mut pass)?;
    let weights = LossWeights { lambda: cfg.lambda };
    let loss = loss_g(&scores, &batch.y, &fake.fake, weights).map_err(|e| diverged(it, e))?;
    check_finite(it, "generator loss", loss.total)?;
    let (d_scores, mut d_fake) = loss_g_backward(&scores, &batch.y, &fake.fake, weights);
    let (_, d_cand, _) = state.discriminator.backward(&saved, &d_scores)?;
    let d_cand = if spec.enabled { continuity_pad_backward(&d_cand, spec.side_width, &fake.cols)? } else { d_cand };
    d_fake.add_assign(&d_cand);
    let (_, grads) = state.generator.backward(&fake.saved, &d_fake)?;
    state.adam_g.update(state.generator.params_mut(), &grads, cfg.adam())?;
    Ok((loss.gan, loss.l1))
}

/// One discriminator update followed by one generator update.
pub fn train_step(state: &mut GanState, batch: &Batch, cfg: &TrainConfig) -> Result<StepLosses> {
    let fake = generate_fake(state, batch, cfg)?;
    let loss_d = d_step(state, batch, &fake, cfg)?;
    let (loss_g_gan, loss_g_l1) = g_step(state, batch, &fake, cfg)?;
    state.iteration += 1;
    Ok(StepLosses { loss_d, loss_g_gan, loss_g_l1 })
}

/// A trained model with everything needed to resume or generate.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub class_names: Vec<String>,
    /// For class-specific generators, the class this one was trained on.
    pub class_filter: Option<usize>,
    pub state: GanState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub checkpoint: Checkpoint,
    pub history: LossHistory,
}

/// Seeded per-class subsample of item indices, in input order.
pub(crate) fn capped_indices(classes: &[usize], max_n: usize, seed_: u64) -> Vec<usize> {
    let k = classes.iter().max().map_or(0, |m| m + 1);
    let mut keep = Vec::new();
    for class in 0..k {
        let mut idx: Vec<usize> = (0..classes.len()).filter(|i| classes[*i] == class).collect();
        if idx.len() > max_n {
            idx.shuffle(&mut seed::derived_rng(seed_, "cap", class as u64));
            idx.truncate(max_n);
        }
        keep.extend(idx);
    }
    keep.sort_unstable();
    keep
}

/// Training pairs after the optional per-class cap.
pub fn training_indices(pairs: &[PairSample], cfg: &TrainConfig) -> Vec<usize> {
    match cfg.cap_per_class {
        Some(cap) => capped_indices(&pairs.iter().map(|p| p.label.index()).collect::<Vec<_>>(), cap, cfg.seed),
        None => (0..pairs.len()).collect(),
    }
}

/// The first `count` indices of the shared epoch-shuffled stream over
/// `pool` that satisfy `keep`. Every variant trained with one seed walks the
/// same stream, so per-class generators see the data in the same order as
/// the shared ones.
fn data_order(pool: &[usize], seed_: u64, count: usize, keep: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    if !pool.iter().any(|i| keep(*i)) {
        return out;
    }
    let mut epoch = 0;
    while out.len() < count {
        let mut perm = pool.to_vec();
        perm.shuffle(&mut seed::derived_rng(seed_, "order", epoch));
        out.extend(perm.into_iter().filter(|i| keep(*i)).take(count - out.len()));
        epoch += 1;
    }
    out
}

fn fit_one(
    pairs: &[PairSample],
    order: &[usize],
    class_names: &[String],
    class_filter: Option<usize>,
    cfg: &TrainConfig,
) -> Result<FitResult> {
    let k = class_names.len();
    let mut state = GanState::new(cfg, k, seed::derive(cfg.seed, "init", class_filter.map_or(0, |c| c as u64 + 1)))?;
    let mut history = LossHistory::default();
    let log_every = (cfg.iterations / 10).max(1);
    for (it, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let refs: Vec<&PairSample> = chunk.iter().map(|i| &pairs[*i]).collect();
        let losses = train_step(&mut state, &Batch::from_pairs(&refs)?, cfg)?;
        if (it + 1) % log_every == 0 {
            log::info!(
                "{}{} iter {}: d {:.4} g_gan {:.4} l1 {:.4}",
                cfg.variant.as_str(),
                class_filter.map_or(String::new(), |c| format!("[{}]", class_names[c])),
                it + 1,
                losses.loss_d,
                losses.loss_g_gan,
                losses.loss_g_l1
            );
        }
        history.steps.push(losses);
    }
    Ok(FitResult {
        checkpoint: Checkpoint { config: cfg.clone(), class_names: class_names.to_vec(), class_filter, state },
        history,
    })
}

/// Trains the configured variant. Returns one result, or one per class for
/// class-specific generators.
pub fn fit(pairs: &[PairSample], class_names: &[String], cfg: &TrainConfig) -> Result<Vec<FitResult>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(invalid("training set is empty"));
    }
    if class_names.is_empty() || pairs.iter().any(|p| p.label.classes() != class_names.len()) {
        return Err(invalid("labels must match the class list"));
    }
    if pairs.iter().any(|p| (p.y.width(), p.y.height()) != (cfg.width, cfg.height)) {
        return Err(invalid(format!("training pairs must be {}x{}", cfg.width, cfg.height)));
    }
    let pool = training_indices(pairs, cfg);
    let count = cfg.iterations * cfg.batch_size;
    match cfg.variant {
        Variant::Conditioned | Variant::Independent => {
            let order = data_order(&pool, cfg.seed, count, |_| true);
            Ok(vec![fit_one(pairs, &order, class_names, None, cfg)?])
        }
        Variant::Specific => (0..class_names.len())
            .into_par_iter()
            .filter_map(|c| {
                let order = data_order(&pool, cfg.seed, count, |i| pairs[i].label.index() == c);
                if order.is_empty() {
                    log::warn!("class {} has no training pairs; no generator trained", class_names[c]);
                    return None;
                }
                Some(fit_one(pairs, &order, class_names, Some(c), cfg))
            })
            .collect(),
    }
}

fn push_params(out: &mut Vec<StoredTensor>, prefix: &str, names: &[String], params: &[&Param<f32>]) {
    for (n, p) in names.iter().zip(params) {
        out.push(StoredTensor::from_param(format!("{prefix}{n}"), p));
    }
}

fn push_moments(out: &mut Vec<StoredTensor>, prefix: &str, names: &[String], params: &[&Param<f32>], a: &AdamState) {
    for (((n, p), m), v) in names.iter().zip(params).zip(&a.m).zip(&a.v) {
        out.push(StoredTensor { name: format!("{prefix}m.{n}"), shape: p.shape.clone(), data: m.clone() });
        out.push(StoredTensor { name: format!("{prefix}v.{n}"), shape: p.shape.clone(), data: v.clone() });
    }
}

fn restore_moments(file: &TensorFile, prefix: &str, names: &[String], a: &mut AdamState) -> Result<()> {
    let by_name: BTreeMap<&str, &StoredTensor> = file.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    for (i, n) in names.iter().enumerate() {
        for (kind, dst) in [("m", &mut a.m[i]), ("v", &mut a.v[i])] {
            let full = format!("{prefix}{kind}.{n}");
            let t = by_name
                .get(full.as_str())
                .filter(|t| t.data.len() == dst.len())
                .ok_or_else(|| Error::Format { offset: 0, detail: format!("optimizer tensor `{full}` missing or mis-sized") })?;
            dst.copy_from_slice(&t.data);
        }
    }
    Ok(())
}

const CLASS_SEPARATOR: char = '\t';

fn join_classes(names: &[String]) -> Result<String> {
    if names.iter().any(|n| n.is_empty() || n.contains([CLASS_SEPARATOR, '\n'])) {
        return Err(invalid("class names must be non-empty and free of tabs and newlines"));
    }
    Ok(names.join(&CLASS_SEPARATOR.to_string()))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let s = &ckpt.state;
    let mut config = ckpt.config.to_map();
    config.insert("kind".into(), "gan".into());
    config.insert("iteration".into(), s.iteration.to_string());
    config.insert("classes".into(), join_classes(&ckpt.class_names)?);
    config.insert("class_filter".into(), ckpt.class_filter.map_or("none".into(), |c| c.to_string()));
    config.insert("adam_g_step".into(), s.adam_g.step.to_string());
    config.insert("adam_d_step".into(), s.adam_d.step.to_string());
    let mut tensors = Vec::new();
    let (gn, gp) = (s.generator.param_names(), s.generator.params());
    let (dn, dp) = (s.discriminator.param_names(), s.discriminator.params());
    push_params(&mut tensors, "g.", &gn, &gp);
    push_params(&mut tensors, "d.", &dn, &dp);
    push_moments(&mut tensors, "adam_g.", &gn, &gp, &s.adam_g);
    push_moments(&mut tensors, "adam_d.", &dn, &dp, &s.adam_d);
    checkpoint::save(path, &TensorFile { config, tensors })
}

fn expect_kind(file: &TensorFile, kind: &str) -> Result<()> {
    let found = file.get("kind")?;
    if found != kind {
        return Err(Error::Format { offset: 0, detail: format!("expected a {kind} checkpoint, found {found}") });
    }
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let file = checkpoint::load(path)?;
    expect_kind(&file, "gan")?;
    let config = TrainConfig::from_map(&file.config)
        .map_err(|e| Error::Format { offset: 0, detail: format!("stored config is invalid: {e}") })?;
    let class_names: Vec<String> = file.get("classes")?.split(CLASS_SEPARATOR).map(String::from).collect();
    let class_filter = match file.get("class_filter")? {
        "none" => None,
        _ => Some(file.parse("class_filter")?),
    };
    let mut state = GanState::new(&config, class_names.len(), 0)?;
    state.iteration = file.parse("iteration")?;
    state.adam_g.step = file.parse("adam_g_step")?;
    state.adam_d.step = file.parse("adam_d_step")?;
    let (gn, dn) = (state.generator.param_names(), state.discriminator.param_names());
    file.restore("g.", &gn, state.generator.params_mut())?;
    file.restore("d.", &dn, state.discriminator.params_mut())?;
    restore_moments(&file, "adam_g.", &gn, &mut state.adam_g)?;
    restore_moments(&file, "adam_d.", &dn, &mut state.adam_d)?;
    let expected = 2 * (gn.len() + dn.len()) + gn.len() + dn.len();
    if file.tensors.len() != expected {
        return Err(Error::Format {
            offset: 0,
            detail: format!("{} tensors stored, {expected} expected", file.tensors.len()),
        });
    }
    Ok(Checkpoint { config, class_names, class_filter, state })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub base_channels: usize,
    pub seed: u64,
    pub target: ClassifierTarget,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { iterations: 400, batch_size: 8, learning_rate: 1e-3, base_channels: 16, seed: 0, target: ClassifierTarget::Odi }
    }
}

/// Softmax cross-entropy of a logit batch; returns the mean loss and its
/// gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Tensor4<f32>, targets: &[usize]) -> (f64, Tensor4<f32>) {
    let n = logits.n();
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (i, t) in targets.iter().enumerate() {
        let row: Vec<f64> = logits.item(i).iter().map(|v| f64::from(*v)).collect();
        let p = crate::evalkit::softmax(&row);
        loss -= p[*t].max(1e-300).ln();
        for (j, g) in grad.item_mut(i).iter_mut().enumerate() {
            *g = ((p[j] - if j == *t { 1.0 } else { 0.0 }) / n as f64) as f32;
        }
    }
    (loss / n as f64, grad)
}

/// Trains the small scene classifier on labelled images (all the same size).
pub fn fit_classifier(samples: &[(Image, usize)], class_names: &[String], cfg: &ClassifierConfig) -> Result<ConvClassifier> {
    if class_names.len() < 2 {
        return Err(invalid("classifier training needs at least two classes"));
    }
    let first = samples.first().ok_or_else(|| invalid("no classifier training samples"))?;
    let (h, w) = (first.0.height(), first.0.width());
    if samples.iter().any(|(img, c)| (img.height(), img.width()) != (h, w) || *c >= class_names.len()) {
        return Err(invalid("classifier samples must share one size and have valid labels"));
    }
    if cfg.iterations == 0 || cfg.batch_size == 0 || !(cfg.learning_rate.is_finite() && cfg.learning_rate >= 0.0) {
        return Err(invalid("classifier iterations, batch size and rate must be positive"));
    }
    let mut net = ConvClassifier::new(class_names.to_vec(), cfg.target, h, w, cfg.base_channels, cfg.seed)?;
    let tensors: Vec<Tensor4<f32>> = samples.iter().map(|(img, _)| img.to_tensor()).collect();
    let mut adam = AdamState::new(&net.params());
    let hp = AdamParams { lr: cfg.learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
    let all: Vec<usize> = (0..samples.len()).collect();
    let order = data_order(&all, seed::derive(cfg.seed, "classifier", 0), cfg.iterations * cfg.batch_size, |_| true);
    for (it, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let x = Tensor4::stack(&chunk.iter().map(|i| tensors[*i].clone()).collect::<Vec<_>>())?;
        let targets: Vec<usize> = chunk.iter().map(|i| samples[*i].1).collect();
        let (logits, _, saved) = net.forward(&x)?;
        let (loss, grad) = cross_entropy(&logits, &targets);
        check_finite(it, "classifier loss", loss)?;
        let grads = net.backward(&saved, &grad)?;
        adam.update(net.params_mut(), &grads, hp)?;
        if (it + 1) % (cfg.iterations / 5).max(1) == 0 {
            log::info!("classifier iter {}: loss {loss:.4}", it + 1);
        }
    }
    Ok(net)
}

/// Fraction of samples whose predicted class matches the label.
pub fn accuracy(classifier: &ConvClassifier, samples: &[(Image, usize)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid("no samples to score"));
    }
    let hits = samples
        .par_iter()
        .map(|(img, c)| Ok(usize::from(classifier.predict(img)?.class == *c)))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / samples.len() as f64)
}

pub fn save_classifier(c: &ConvClassifier, path: impl AsRef<Path>) -> Result<()> {
    let mut config = BTreeMap::new();
    config.insert("kind".to_string(), "classifier".to_string());
    config.insert("classes".to_string(), join_classes(&c.class_names)?);
    config.insert("target".to_string(), c.target.as_str().to_string());
    config.insert("input_height".to_string(), c.input_height.to_string());
    config.insert("input_width".to_string(), c.input_width.to_string());
    config.insert("base_channels".to_string(), c.params()[0].shape[0].to_string());
    let mut tensors = Vec::new();
    push_params(&mut tensors, "", &c.param_names(), &c.params());
    checkpoint::save(path, &TensorFile { config, tensors })
}

pub fn load_classifier(path: impl AsRef<Path>) -> Result<ConvClassifier> {
    let file = checkpoint::load(path)?;
    expect_kind(&file, "classifier")?;
    let target = ClassifierTarget::parse(file.get("target")?)
        .ok_or_else(|| Error::Format { offset: 0, detail: "unknown classifier target".into() })?;
    let mut c = ConvClassifier::new(
        file.get("classes")?.split(CLASS_SEPARATOR).map(String::from).collect(),
        target,
        file.parse("input_height")?,
        file.parse("input_width")?,
        file.parse("base_channels")?,
        0,
    )?;
    let names = c.param_names();
    file.restore("", &names, c.params_mut())?;
    if file.tensors.len() != names.len() {
        return Err(Error::Format { offset: 0, detail: "unexpected tensors in classifier file".into() });
    }
    Ok(c)
}

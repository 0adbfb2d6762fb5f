//! Evaluation: seam/pole continuity, Fréchet distance between feature sets,
//! scene classifiers and recognition rates of generated panoramas.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::PairSample;
use crate::error::{invalid, Error, Result};
use crate::gan::{generate, GenerateOptions, Generator};
use crate::geometry::{extract_snapshot, CameraPose, SnapshotGeometry};
use crate::image::Image;
use crate::nn::{Conv2d, Layer, Linear, Mode, Network, OneHotLabel, Param, Pass, Real, Saved, Sequential, Tensor4};
use crate::seed;

/// Continuity of a panorama on the 0–255 scale. Lower is better.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContinuityReport {
    pub sigma_top: f64,
    pub sigma_bottom: f64,
    pub sigma_lr: f64,
}

fn population_std(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    (v.map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Per channel: population std of the top and bottom rows, and RMS of the
/// difference between the first and last columns; then averaged over
/// channels.
pub fn continuity_metrics(img: &Image) -> ContinuityReport {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let v = |x: usize, y: usize, ch: usize| f64::from(img.get(x, y, ch)) * 255.0;
    let mut r = ContinuityReport::default();
    for ch in 0..c {
        r.sigma_top += population_std((0..w).map(move |x| v(x, 0, ch)));
        r.sigma_bottom += population_std((0..w).map(move |x| v(x, h - 1, ch)));
        let ms = (0..h).map(|y| (v(0, y, ch) - v(w - 1, y, ch)).powi(2)).sum::<f64>() / h as f64;
        r.sigma_lr += ms.sqrt();
    }
    let n = c as f64;
    ContinuityReport { sigma_top: r.sigma_top / n, sigma_bottom: r.sigma_bottom / n, sigma_lr: r.sigma_lr / n }
}

pub fn mean_continuity(reports: &[ContinuityReport]) -> Result<ContinuityReport> {
    if reports.is_empty() {
        return Err(invalid("no continuity reports to average"));
    }
    let n = reports.len() as f64;
    Ok(ContinuityReport {
        sigma_top: reports.iter().map(|r| r.sigma_top).sum::<f64>() / n,
        sigma_bottom: reports.iter().map(|r| r.sigma_bottom).sum::<f64>() / n,
        sigma_lr: reports.iter().map(|r| r.sigma_lr).sum::<f64>() / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidResult {
    pub value: f64,
    pub dim: usize,
    pub n_real: usize,
    pub n_gen: usize,
    /// Set when either sample count does not exceed the feature dimension,
    /// so at least one covariance is singular.
    pub rank_deficient: bool,
}

fn moments(rows: &[Vec<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.len();
    let x = DMatrix::from_fn(n, dim, |i, j| rows[i][j]);
    let mean = DVector::from_fn(dim, |j, _| x.column(j).mean());
    let mut centred = x;
    for j in 0..dim {
        let m = mean[j];
        centred.column_mut(j).add_scalar_mut(-m);
    }
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    (mean, cov)
}

fn sym_eigen(m: DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let sym = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym)
}

/// Fréchet distance between Gaussian fits of two feature sets.
///
/// The cross term uses `Tr((Σ_g^½ Σ_r Σ_g^½)^½)`, which is symmetric so a
/// symmetric eigendecomposition suffices. Eigenvalues a little below zero
/// from round-off are clamped; clearly negative ones are an error.
pub fn fid(real: &[Vec<f64>], gen: &[Vec<f64>]) -> Result<FidResult> {
    if real.len() < 2 || gen.len() < 2 {
        return Err(invalid("fid needs at least two samples per set"));
    }
    let dim = real[0].len();
    if dim == 0 || real.iter().chain(gen).any(|r| r.len() != dim) {
        return Err(invalid("feature vectors must share one non-zero dimension"));
    }
    if real.iter().chain(gen).flatten().any(|v| !v.is_finite()) {
        return Err(Error::NumericDomain("non-finite feature value".into()));
    }
    let (mu_r, cov_r) = moments(real, dim);
    let (mu_g, cov_g) = moments(gen, dim);
    let scale = cov_r.trace().abs().max(cov_g.trace().abs()).max(1.0);
    let tol = 1e-6 * scale;

    let eg = sym_eigen(cov_g.clone());
    let mut root = eg.eigenvalues.clone();
    for (i, l) in root.iter_mut().enumerate() {
        if *l < -tol {
            return Err(Error::NumericDomain(format!("covariance eigenvalue {i} is {l}")));
        }
        *l = l.max(0.0).sqrt();
    }
    let sqrt_g = &eg.eigenvectors * DMatrix::from_diagonal(&root) * eg.eigenvectors.transpose();
    let inner = sym_eigen(&sqrt_g * &cov_r * &sqrt_g);
    let mut tr_sqrt = 0.0;
    for l in inner.eigenvalues.iter() {
        if *l < -tol {
            return Err(Error::NumericDomain(format!("product eigenvalue {l} is negative")));
        }
        tr_sqrt += l.max(0.0).sqrt();
    }
    let value = (&mu_r - &mu_g).norm_squared() + cov_r.trace() + cov_g.trace() - 2.0 * tr_sqrt;
    Ok(FidResult {
        value,
        dim,
        n_real: real.len(),
        n_gen: gen.len(),
        rank_deficient: real.len() <= dim || gen.len() <= dim,
    })
}

/// Maps an image to a feature vector for [`fid`].
pub trait FeatureExtractor: Sync {
    fn features(&self, img: &Image) -> Result<Vec<f64>>;
}

pub fn fid_images(extractor: &impl FeatureExtractor, real: &[Image], gen: &[Image]) -> Result<FidResult> {
    let feats = |set: &[Image]| set.par_iter().map(|i| extractor.features(i)).collect::<Result<Vec<_>>>();
    fid(&feats(real)?, &feats(gen)?)
}

/// What a classifier was trained to look at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierTarget {
    Odi,
    Snapshot,
}

impl ClassifierTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierTarget::Odi => "odi",
            ClassifierTarget::Snapshot => "snapshot",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "odi" => Some(ClassifierTarget::Odi),
            "snapshot" => Some(ClassifierTarget::Snapshot),
            _ => None,
        }
    }
}

/// Number of stride-2 conv stages in [`ConvClassifier`].
pub const CLASSIFIER_STAGES: usize = 3;

/// Small scene classifier: three stride-2 conv + LeakyReLU stages, global
/// average pooling, and a linear softmax head. The pooled activations are
/// its feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvClassifier {
    pub class_names: Vec<String>,
    pub target: ClassifierTarget,
    pub input_height: usize,
    pub input_width: usize,
    pub body: Sequential<f32>,
    pub head: Sequential<f32>,
}

pub struct ClassifierSaved {
    body: Vec<Saved<f32>>,
    head: Vec<Saved<f32>>,
}

impl ConvClassifier {
    pub fn new(
        class_names: Vec<String>,
        target: ClassifierTarget,
        input_height: usize,
        input_width: usize,
        base_channels: usize,
        init_seed: u64,
    ) -> Result<Self> {
        if class_names.len() < 2 {
            return Err(invalid("a classifier needs at least two classes"));
        }
        if base_channels == 0 {
            return Err(invalid("classifier needs at least one channel"));
        }
        let min = 1 << CLASSIFIER_STAGES;
        if input_height < min || input_width < min {
            return Err(invalid(format!("classifier input {input_width}x{input_height} is smaller than {min}x{min}")));
        }
        let mut rng = seed::derived_rng(init_seed, "classifier", 0);
        let mut layers = Vec::new();
        let mut ch = 3;
        for i in 0..CLASSIFIER_STAGES {
            let out = base_channels << i;
            layers.push(Layer::Conv(Conv2d::down(ch, out, &mut rng)));
            layers.push(Layer::LeakyRelu(0.2));
            ch = out;
        }
        layers.push(Layer::GlobalAvgPool);
        let head = Sequential::new(vec![Layer::FullyConnected(Linear::new(ch, class_names.len(), &mut rng))]);
        Ok(Self { class_names, target, input_height, input_width, body: Sequential::new(layers), head })
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if (h, w) != (self.input_height, self.input_width) {
            return Err(invalid(format!(
                "classifier expects {}x{} input, got {w}x{h}",
                self.input_width, self.input_height
            )));
        }
        Ok(())
    }

    /// Logits for a batch in `[-1, 1]` tensor form, plus the pooled features.
    pub fn forward(&self, x: &Tensor4<f32>) -> Result<(Tensor4<f32>, Tensor4<f32>, ClassifierSaved)> {
        self.check_input(x.h(), x.w())?;
        let mut pass = Pass::new(Mode::Eval, 0);
        let (feat, body) = self.body.forward(x, &mut pass)?;
        let (logits, head) = self.head.forward(&feat, &mut pass)?;
        Ok((logits, feat, ClassifierSaved { body, head }))
    }

    /// Parameter gradients given the gradient of the loss w.r.t. the logits.
    pub fn backward(&self, saved: &ClassifierSaved, grad_logits: &Tensor4<f32>) -> Result<Vec<Vec<f32>>> {
        let (dfeat, mut grads) = self.head.backward(&saved.head, grad_logits)?;
        let (_, body) = self.body.backward(&saved.body, &dfeat)?;
        let mut all = body;
        all.append(&mut grads);
        Ok(all)
    }

    pub fn predict(&self, img: &Image) -> Result<Prediction> {
        let (logits, _, _) = self.forward(&img.to_tensor::<f32>())?;
        Ok(Prediction::from_logits(logits.data().iter().map(|v| f64::from(*v))))
    }
}

impl Network<f32> for ConvClassifier {
    fn params(&self) -> Vec<&Param<f32>> {
        let mut p = self.body.params();
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f32>> {
        let mut p = self.body.params_mut();
        p.extend(self.head.params_mut());
        p
    }

    fn param_names(&self) -> Vec<String> {
        let body = self.body.param_names().into_iter().map(|n| format!("body.{n}"));
        body.chain(self.head.param_names().into_iter().map(|n| format!("head.{n}"))).collect()
    }
}

impl FeatureExtractor for ConvClassifier {
    fn features(&self, img: &Image) -> Result<Vec<f64>> {
        let (_, feat, _) = self.forward(&img.to_tensor::<f32>())?;
        Ok(feat.data().iter().map(|v| f64::from(*v)).collect())
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probs: Vec<f64>,
}

impl Prediction {
    /// Argmax of the softmax; ties go to the lowest class id.
    pub fn from_logits(logits: impl Iterator<Item = f64>) -> Self {
        let logits: Vec<f64> = logits.collect();
        let mut class = 0;
        for (i, l) in logits.iter().enumerate() {
            if *l > logits[class] {
                class = i;
            }
        }
        Self { class, probs: softmax(&logits) }
    }
}

/// A trained network, or a pass-through that returns the true label.
#[derive(Clone, Debug, PartialEq)]
pub enum Classifier {
    Trained(ConvClassifier),
    Ideal { class_names: Vec<String> },
}

impl Classifier {
    pub fn class_names(&self) -> &[String] {
        match self {
            Classifier::Trained(c) => &c.class_names,
            Classifier::Ideal { class_names } => class_names,
        }
    }

    /// `truth` is required by the ideal variant and ignored otherwise.
    pub fn classify(&self, img: &Image, truth: Option<usize>) -> Result<Prediction> {
        match self {
            Classifier::Trained(c) => c.predict(img),
            Classifier::Ideal { class_names } => {
                let class = truth.ok_or_else(|| invalid("ideal classifier needs the true label"))?;
                let label = OneHotLabel::new(class, class_names.len())?;
                Ok(Prediction { class, probs: label.to_vec() })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecognitionMethod {
    Odi,
    Views,
}

/// Recognition rates per class (keyed by class name) and their mean over
/// the classes present in the test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecognitionReport {
    pub method: RecognitionMethod,
    pub per_class: BTreeMap<String, f64>,
    pub trials: BTreeMap<String, usize>,
    pub macro_average: f64,
    pub repetitions: usize,
    pub views: usize,
}

impl RecognitionReport {
    /// Builds a report from `(correct, trials)` per class id.
    pub fn from_counts(
        method: RecognitionMethod,
        class_names: &[String],
        counts: &[(usize, usize)],
        repetitions: usize,
        views: usize,
    ) -> Result<Self> {
        if counts.len() != class_names.len() {
            return Err(invalid("one count pair per class is required"));
        }
        let mut per_class = BTreeMap::new();
        let mut trials = BTreeMap::new();
        for (name, (ok, n)) in class_names.iter().zip(counts) {
            if *n > 0 {
                per_class.insert(name.clone(), *ok as f64 / *n as f64);
                trials.insert(name.clone(), *n);
            }
        }
        if per_class.is_empty() {
            return Err(invalid("no recognition trials"));
        }
        let macro_average = per_class.values().sum::<f64>() / per_class.len() as f64;
        Ok(Self { method, per_class, trials, macro_average, repetitions, views })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// How a recognition run labels inputs, scores outputs and seeds noise.
#[derive(Clone, Copy)]
pub struct RecognitionSetup<'a> {
    /// Labels the input snapshot for conditioning.
    pub conditioning: &'a Classifier,
    /// Judges the generated output.
    pub evaluator: &'a Classifier,
    pub repetitions: usize,
    pub seed: u64,
    pub options: GenerateOptions,
}

/// Evenly spaced longitudes `360k/n` degrees.
pub fn view_longitudes(n_dirs: usize) -> Vec<f64> {
    (0..n_dirs).map(|k| 360.0 * k as f64 / n_dirs as f64).collect()
}

fn recognition<T: Real>(
    generator: &Generator<T>,
    test: &[PairSample],
    setup: &RecognitionSetup<'_>,
    method: RecognitionMethod,
    views: Option<(&[CameraPose], SnapshotGeometry)>,
) -> Result<RecognitionReport> {
    if test.is_empty() {
        return Err(invalid("empty test set"));
    }
    if setup.repetitions == 0 {
        return Err(invalid("at least one repetition is required"));
    }
    let names = setup.evaluator.class_names();
    let per_pair: Vec<(usize, usize, usize)> = test
        .par_iter()
        .map(|pair| {
            let truth = pair.label.index();
            let cond = setup.conditioning.classify(&pair.snapshot, Some(truth))?;
            let label = OneHotLabel::new(cond.class, pair.label.classes())?;
            let (mut ok, mut n) = (0, 0);
            for rep in 0..setup.repetitions {
                // seeded by sample identity so results ignore test-set order
                let noise = seed::derive(setup.seed, &pair.source, rep as u64);
                let odi = generate(generator, &pair.x, label, noise, setup.options)?;
                match views {
                    None => {
                        ok += usize::from(setup.evaluator.classify(&odi, Some(truth))?.class == truth);
                        n += 1;
                    }
                    Some((poses, geom)) => {
                        for pose in poses {
                            let snap = extract_snapshot(&odi, *pose, geom)?;
                            ok += usize::from(setup.evaluator.classify(&snap, Some(truth))?.class == truth);
                            n += 1;
                        }
                    }
                }
            }
            Ok((truth, ok, n))
        })
        .collect::<Result<_>>()?;
    let mut counts = vec![(0, 0); names.len()];
    for (class, ok, n) in per_pair {
        let slot = counts.get_mut(class).ok_or_else(|| invalid(format!("class {class} unknown to the evaluator")))?;
        slot.0 += ok;
        slot.1 += n;
    }
    let n_views = views.map_or(1, |(p, _)| p.len());
    RecognitionReport::from_counts(method, names, &counts, setup.repetitions, n_views)
}

/// Classifies each generated panorama directly.
pub fn recognition_rate_odi<T: Real>(
    generator: &Generator<T>,
    test: &[PairSample],
    setup: &RecognitionSetup<'_>,
) -> Result<RecognitionReport> {
    recognition(generator, test, setup, RecognitionMethod::Odi, None)
}

/// Classifies `n_dirs` horizontal views of each generated panorama and pools
/// the outcomes over views, repetitions and images within a class.
pub fn recognition_rate_views<T: Real>(
    generator: &Generator<T>,
    test: &[PairSample],
    setup: &RecognitionSetup<'_>,
    n_dirs: usize,
    geom: SnapshotGeometry,
) -> Result<RecognitionReport> {
    if n_dirs == 0 {
        return Err(invalid("at least one view direction is required"));
    }
    let poses: Vec<CameraPose> = view_longitudes(n_dirs)
        .into_iter()
        .map(|lon| CameraPose::from_degrees(lon, 0.0))
        .collect::<Result<_>>()?;
    debug_assert!(poses.iter().all(|p| p.theta_c.abs() <= PI));
    recognition(generator, test, setup, RecognitionMethod::Views, Some((&poses, geom)))
}

//! Synthetic open-set proposal benchmark and proposal-level open-set metrics.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::mining::Group;
use crate::model::{ProposalKind, ProposalRecord};

/// Default floor below which a known-class prediction is not counted as an
/// open-set error.
pub const DETECTION_FLOOR: f64 = 0.05;

pub const AR_THRESHOLDS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_base: usize,
    pub num_novel: usize,
    pub num_unknown: usize,
    /// Proposals per class in the base and test stages.
    pub proposals_per_class: usize,
    /// Few-shot proposals per base and novel class.
    pub shots: usize,
    /// Background proposals per foreground proposal.
    pub background_ratio: f64,
    /// Unknown test proposals mix a known and an unknown prototype with a
    /// weight drawn uniformly from this range.
    pub rho_range: (f64, f64),
    /// Per-location noise standard deviation for foreground proposals.
    pub noise: f64,
    /// Per-location noise standard deviation for background proposals.
    pub background_noise: f64,
    /// Weight of the direction shared by every foreground prototype.
    pub shared_component: f64,
    /// Channels reserved for the class-specific part of unknown prototypes;
    /// 0 draws unknowns from the same subspace as the known classes.
    pub unknown_dims: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_base: 10,
            num_novel: 5,
            num_unknown: 5,
            proposals_per_class: 40,
            shots: 5,
            background_ratio: 1.0,
            rho_range: (0.5, 0.9),
            noise: 0.3,
            background_noise: 0.3,
            shared_component: 1.25,
            unknown_dims: 6,
            height: 4,
            width: 4,
            channels: 16,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn num_known(&self) -> usize {
        self.num_base + self.num_novel
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_base", self.num_base),
            ("num_novel", self.num_novel),
            ("num_unknown", self.num_unknown),
            ("proposals_per_class", self.proposals_per_class),
            ("shots", self.shots),
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("synthetic.{name} must be at least 1")));
        }
        let (lo, hi) = self.rho_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::Config(format!("rho range ({lo}, {hi}) must be ordered within [0, 1]")));
        }
        for (name, v) in [
            ("noise", self.noise),
            ("background_noise", self.background_noise),
            ("shared_component", self.shared_component),
            ("background_ratio", self.background_ratio),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("synthetic.{name} must be finite and nonnegative")));
            }
        }
        if self.unknown_dims + 2 > self.channels {
            return Err(Error::Config(format!(
                "synthetic.unknown_dims = {} leaves no known subspace in {} channels",
                self.unknown_dims, self.channels
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DataStage {
    Base,
    Fewshot,
    Test,
}

impl DataStage {
    fn stream(self) -> u64 {
        match self {
            DataStage::Base => 1,
            DataStage::Fewshot => 2,
            DataStage::Test => 3,
        }
    }
}

/// Label layout: base classes `0..num_base`, novel classes up to
/// `num_known`, unknowns collapsed to `num_known`, background `num_known + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub stage: DataStage,
    pub num_base: usize,
    pub num_known: usize,
    pub proposals: Vec<ProposalRecord>,
}

impl SyntheticDataset {
    pub fn unknown_index(&self) -> usize {
        self.num_known
    }

    pub fn background_index(&self) -> usize {
        self.num_known + 1
    }

    pub fn labels(&self) -> Vec<usize> {
        self.proposals.iter().map(|p| p.gt_class).collect()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Known prototypes, unknown prototypes and, for each unknown, the index of
/// its nearest known prototype.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    pub known: Vec<Vec<f64>>,
    pub unknown: Vec<Vec<f64>>,
    pub nearest_known: Vec<usize>,
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Gram-Schmidt on Gaussian draws; row 0 is the shared direction.
fn orthonormal_basis(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v = random_unit(rng, d);
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn prototypes(config: &SyntheticConfig) -> Result<Prototypes> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let c = config.channels;
    let basis = orthonormal_basis(&mut rng, c);
    let known_span = &basis[1..c - config.unknown_dims];
    let unknown_span = if config.unknown_dims == 0 { known_span } else { &basis[c - config.unknown_dims..] };
    let make = |rng: &mut ChaCha8Rng, span: &[Vec<f64>]| {
        let coef = random_unit(rng, span.len());
        let mut v: Vec<f64> = basis[0].iter().map(|s| config.shared_component * s).collect();
        for (a, b) in coef.iter().zip(span) {
            v.iter_mut().zip(b).for_each(|(x, y)| *x += a * y);
        }
        let n = dot(&v, &v).sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let known: Vec<Vec<f64>> = (0..config.num_known()).map(|_| make(&mut rng, known_span)).collect();
    let unknown: Vec<Vec<f64>> = (0..config.num_unknown).map(|_| make(&mut rng, unknown_span)).collect();
    let nearest_known = unknown
        .iter()
        .map(|u| {
            let mut best = 0;
            for (i, k) in known.iter().enumerate() {
                if dot(u, k) > dot(u, &known[best]) {
                    best = i;
                }
            }
            best
        })
        .collect();
    Ok(Prototypes { known, unknown, nearest_known })
}

struct Sampler<'a> {
    config: &'a SyntheticConfig,
    rng: ChaCha8Rng,
    high: Beta<f64>,
    low: Beta<f64>,
    out: Vec<ProposalRecord>,
}

impl Sampler<'_> {
    fn push(&mut self, center: Option<&[f64]>, gt: usize) -> Result<()> {
        let cfg = self.config;
        let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
        let kind = if center.is_some() { ProposalKind::Foreground } else { ProposalKind::Background };
        let sigma = match center {
            Some(_) => cfg.noise * self.rng.random_range(0.5..=1.5),
            None => cfg.background_noise,
        };
        let mut data = Vec::with_capacity(h * w * c);
        for _ in 0..h * w {
            for ch in 0..c {
                let base = center.map_or(0.0, |p| p[ch]);
                let eps: f64 = self.rng.sample(StandardNormal);
                data.push(base + sigma * eps);
            }
        }
        let dist = if center.is_some() { self.high } else { self.low };
        let s_obj = dist.sample(&mut self.rng);
        let s_center = dist.sample(&mut self.rng);
        let id = self.out.len();
        self.out.push(ProposalRecord::new(id, Tensor::new(vec![h, w, c], data)?, gt, kind, s_obj, s_center)?);
        Ok(())
    }

    fn backgrounds(&mut self, foreground: usize, background: usize) -> Result<()> {
        let n = (self.config.background_ratio * foreground as f64).round() as usize;
        for _ in 0..n {
            self.push(None, background)?;
        }
        Ok(())
    }
}

/// Seeded proposals for one stage. Prototypes depend on the seed only, so
/// all stages of one seed share them.
pub fn generate_synthetic(config: &SyntheticConfig, stage: DataStage) -> Result<SyntheticDataset> {
    let protos = prototypes(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stage.stream());
    let mut s = Sampler {
        config,
        rng,
        high: Beta::new(5.0, 2.0).expect("valid beta parameters"),
        low: Beta::new(2.0, 5.0).expect("valid beta parameters"),
        out: Vec::new(),
    };
    let k = config.num_known();
    let background = k + 1;
    let (classes, per_class) = match stage {
        DataStage::Base => (0..config.num_base, config.proposals_per_class),
        DataStage::Fewshot => (0..k, config.shots),
        DataStage::Test => (0..k, config.proposals_per_class),
    };
    for class in classes.clone() {
        for _ in 0..per_class {
            s.push(Some(&protos.known[class]), class)?;
        }
    }
    let mut foreground = classes.len() * per_class;
    if stage == DataStage::Test {
        let (lo, hi) = config.rho_range;
        for (u, proto) in protos.unknown.iter().enumerate() {
            let near = &protos.known[protos.nearest_known[u]];
            for _ in 0..per_class {
                let rho = if hi > lo { s.rng.random_range(lo..=hi) } else { lo };
                let center: Vec<f64> = near.iter().zip(proto).map(|(a, b)| (1.0 - rho) * a + rho * b).collect();
                s.push(Some(&center), k)?;
            }
        }
        foreground += config.num_unknown * per_class;
    }
    s.backgrounds(foreground, background)?;
    Ok(SyntheticDataset { stage, num_base: config.num_base, num_known: k, proposals: s.out })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: usize,
    /// Known class below `K`, unknown `K`, background `K + 1`.
    pub predicted: usize,
    pub confidence: f64,
}

impl PredictionRecord {
    /// Re-applies a confidence threshold, sending low-confidence rows to
    /// `background`.
    pub fn thresholded(self, theta: f64, background: usize) -> Self {
        if self.confidence < theta {
            PredictionRecord { predicted: background, ..self }
        } else {
            self
        }
    }
}

/// Softmax over the row, argmax with ties to the lowest index, and
/// background when the winning probability falls below `theta`.
pub fn classify(id: usize, row: &[f64], theta: f64) -> PredictionRecord {
    classify_masked(id, row, theta, &vec![true; row.len()])
}

/// As [`classify`], with the softmax restricted to columns where `active`
/// is set.
pub fn classify_masked(id: usize, row: &[f64], theta: f64, active: &[bool]) -> PredictionRecord {
    let background = row.len() - 1;
    let max = row.iter().zip(active).filter(|(_, &a)| a).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().zip(active).map(|(v, &a)| if a { (v - max).exp() } else { 0.0 }).collect();
    let z: f64 = exps.iter().sum();
    let mut best = 0;
    for (j, &e) in exps.iter().enumerate() {
        if e > exps[best] {
            best = j;
        }
    }
    PredictionRecord { id, predicted: best, confidence: exps[best] / z }.thresholded(theta, background)
}

pub fn group_of(label: usize, num_known: usize) -> Group {
    if label < num_known {
        Group::Known
    } else if label == num_known {
        Group::Unknown
    } else {
        Group::Background
    }
}

fn check_lengths(predictions: &[PredictionRecord], labels: &[usize]) -> Result<()> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions against {} labels", predictions.len(), labels.len())));
    }
    Ok(())
}

/// `(predicted unknown, total unknown)` over true-unknown proposals.
pub fn unknown_recall_counts(
    predictions: &[PredictionRecord],
    labels: &[usize],
    num_known: usize,
) -> Result<(usize, usize)> {
    check_lengths(predictions, labels)?;
    let mut hits = 0;
    let mut total = 0;
    for (p, &l) in predictions.iter().zip(labels) {
        if l == num_known {
            total += 1;
            hits += usize::from(p.predicted == num_known);
        }
    }
    Ok((hits, total))
}

pub fn recall_unknown(predictions: &[PredictionRecord], labels: &[usize], num_known: usize) -> Result<f64> {
    let (hits, total) = unknown_recall_counts(predictions, labels, num_known)?;
    if total == 0 {
        return Err(Error::UndefinedMetric("no true-unknown proposals".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Mean unknown recall after re-thresholding at each of [`AR_THRESHOLDS`].
pub fn ar_proxy(predictions: &[PredictionRecord], labels: &[usize], num_known: usize) -> Result<f64> {
    let mut acc = 0.0;
    for theta in AR_THRESHOLDS {
        let p: Vec<PredictionRecord> = predictions.iter().map(|p| p.thresholded(theta, num_known + 1)).collect();
        acc += recall_unknown(&p, labels, num_known)?;
    }
    Ok(acc / AR_THRESHOLDS.len() as f64)
}

/// Counts at the wilderness-impact operating point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WildernessPoint {
    pub threshold: f64,
    pub recall: f64,
    pub true_positives: usize,
    pub known_false_positives: usize,
    pub unknown_false_positives: usize,
    pub wi: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WildernessImpact {
    Defined(WildernessPoint),
    Undefined { max_recall: f64 },
}

impl WildernessImpact {
    pub fn value(&self) -> Option<f64> {
        match self {
            WildernessImpact::Defined(p) => Some(p.wi),
            WildernessImpact::Undefined { .. } => None,
        }
    }
}

/// `P_K / P_{K u U} - 1` at the confidence threshold whose known recall is
/// closest to `target_recall` from above. Only true-known and true-unknown
/// proposals enter; background predictions count toward neither precision.
pub fn wilderness_impact(
    predictions: &[PredictionRecord],
    labels: &[usize],
    num_known: usize,
    target_recall: f64,
) -> Result<WildernessImpact> {
    check_lengths(predictions, labels)?;
    let n_known = labels.iter().filter(|&&l| l < num_known).count();
    if n_known == 0 {
        return Err(Error::UndefinedMetric("no true-known proposals".into()));
    }
    let relevant: Vec<(&PredictionRecord, usize)> = predictions
        .iter()
        .zip(labels.iter().copied())
        .filter(|(p, l)| *l <= num_known && p.predicted < num_known)
        .collect();
    let counts_at = |t: f64| {
        let (mut tp, mut fpk, mut fpu) = (0, 0, 0);
        for (p, l) in &relevant {
            if p.confidence < t {
                continue;
            }
            if *l == num_known {
                fpu += 1;
            } else if p.predicted == *l {
                tp += 1;
            } else {
                fpk += 1;
            }
        }
        (tp, fpk, fpu)
    };
    let mut thresholds: Vec<f64> = relevant.iter().map(|(p, _)| p.confidence).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut max_recall: f64 = 0.0;
    for t in thresholds {
        let (tp, fpk, fpu) = counts_at(t);
        let recall = tp as f64 / n_known as f64;
        max_recall = max_recall.max(recall);
        if recall >= target_recall {
            return Ok(WildernessImpact::Defined(WildernessPoint {
                threshold: t,
                recall,
                true_positives: tp,
                known_false_positives: fpk,
                unknown_false_positives: fpu,
                wi: fpu as f64 / (tp + fpk) as f64,
            }));
        }
    }
    Ok(WildernessImpact::Undefined { max_recall })
}

/// True-unknown proposals predicted as a known class with confidence at
/// least `floor`.
pub fn aose(predictions: &[PredictionRecord], labels: &[usize], num_known: usize, floor: f64) -> Result<usize> {
    check_lengths(predictions, labels)?;
    Ok(predictions
        .iter()
        .zip(labels)
        .filter(|(p, &l)| l == num_known && p.predicted < num_known && p.confidence >= floor)
        .count())
}

/// All-point interpolated AP of class `class`: proposals predicted as the
/// class, ranked by confidence (ties by position), against every proposal
/// labelled with it.
pub fn average_precision(predictions: &[PredictionRecord], labels: &[usize], class: usize) -> Result<f64> {
    check_lengths(predictions, labels)?;
    let positives = labels.iter().filter(|&&l| l == class).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric(format!("class {class} has no true proposals")));
    }
    let mut ranked: Vec<usize> = (0..predictions.len()).filter(|&i| predictions[i].predicted == class).collect();
    ranked.sort_by(|&a, &b| predictions[b].confidence.total_cmp(&predictions[a].confidence).then(a.cmp(&b)));
    let mut precision = Vec::with_capacity(ranked.len());
    let mut hit = Vec::with_capacity(ranked.len());
    let mut tp = 0;
    for (rank, &i) in ranked.iter().enumerate() {
        let is_tp = labels[i] == class;
        tp += usize::from(is_tp);
        hit.push(is_tp);
        precision.push(tp as f64 / (rank + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let ap: f64 = precision.iter().zip(&hit).filter(|(_, &h)| h).map(|(p, _)| p).sum();
    Ok(ap / positives as f64)
}

/// Fraction of true-known proposals predicted as their own class.
pub fn known_accuracy(predictions: &[PredictionRecord], labels: &[usize], num_known: usize) -> Result<f64> {
    check_lengths(predictions, labels)?;
    let (mut hit, mut total) = (0, 0);
    for (p, &l) in predictions.iter().zip(labels) {
        if l < num_known {
            total += 1;
            hit += usize::from(p.predicted == l);
        }
    }
    if total == 0 {
        return Err(Error::UndefinedMetric("no true-known proposals".into()));
    }
    Ok(hit as f64 / total as f64)
}

/// Mann-Whitney AUROC of `positive` scores ranking above `negative` ones;
/// ties count one half.
pub fn auroc(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::UndefinedMetric("AUROC needs both groups".into()));
    }
    let mut all: Vec<(f64, bool)> =
        positive.iter().map(|&v| (v, true)).chain(negative.iter().map(|&v| (v, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += mid * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let np = positive.len() as f64;
    let nn = negative.len() as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: usize,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub theta: f64,
    pub num_known: usize,
    pub recall_unknown: Option<f64>,
    /// Mean unknown recall over a confidence-threshold grid, standing in for
    /// an IoU-averaged recall.
    pub ar_proxy: Option<f64>,
    pub wilderness_impact: Option<WildernessImpact>,
    pub aose: usize,
    pub known_accuracy: Option<f64>,
    pub per_class_ap: Vec<ClassAp>,
    pub mean_ap: Option<f64>,
    pub mean_ap_base: Option<f64>,
    pub mean_ap_novel: Option<f64>,
}

pub const CSV_HEADER: [&str; 10] = [
    "recall_unknown",
    "ar_proxy",
    "wi",
    "wi_max_recall",
    "aose",
    "known_accuracy",
    "mean_ap",
    "mean_ap_base",
    "mean_ap_novel",
    "theta",
];

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricReport {
    /// `predictions` are un-thresholded (`theta = 0`); `theta` is applied
    /// here. Known-class metrics cover classes `0..num_known`, split into
    /// base (`< num_base`) and novel.
    pub fn compute(
        predictions: &[PredictionRecord],
        labels: &[usize],
        num_known: usize,
        num_base: usize,
        theta: f64,
    ) -> Result<Self> {
        check_lengths(predictions, labels)?;
        let background = num_known + 1;
        let at_theta: Vec<PredictionRecord> = predictions.iter().map(|p| p.thresholded(theta, background)).collect();
        let has_unknown = labels.contains(&num_known);
        let has_known = labels.iter().any(|&l| l < num_known);
        let mut per_class_ap = Vec::new();
        for class in 0..num_known {
            if labels.contains(&class) {
                per_class_ap.push(ClassAp { class, ap: average_precision(&at_theta, labels, class)? });
            }
        }
        let aps = |f: &dyn Fn(usize) -> bool| {
            mean(&per_class_ap.iter().filter(|c| f(c.class)).map(|c| c.ap).collect::<Vec<_>>())
        };
        Ok(MetricReport {
            theta,
            num_known,
            recall_unknown: has_unknown.then(|| recall_unknown(&at_theta, labels, num_known)).transpose()?,
            ar_proxy: has_unknown.then(|| ar_proxy(predictions, labels, num_known)).transpose()?,
            wilderness_impact: has_known.then(|| wilderness_impact(&at_theta, labels, num_known, 0.8)).transpose()?,
            aose: aose(&at_theta, labels, num_known, DETECTION_FLOOR)?,
            known_accuracy: has_known.then(|| known_accuracy(&at_theta, labels, num_known)).transpose()?,
            mean_ap: aps(&|_| true),
            mean_ap_base: aps(&|c| c < num_base),
            mean_ap_novel: aps(&|c| c >= num_base),
            per_class_ap,
        })
    }

    pub fn csv_row(&self) -> Vec<String> {
        let (wi, max_recall) = match self.wilderness_impact {
            Some(WildernessImpact::Defined(p)) => (Some(p.wi), Some(p.recall)),
            Some(WildernessImpact::Undefined { max_recall }) => (None, Some(max_recall)),
            None => (None, None),
        };
        vec![
            cell(self.recall_unknown),
            cell(self.ar_proxy),
            cell(wi),
            cell(max_recall),
            self.aose.to_string(),
            cell(self.known_accuracy),
            cell(self.mean_ap),
            cell(self.mean_ap_base),
            cell(self.mean_ap_novel),
            self.theta.to_string(),
        ]
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

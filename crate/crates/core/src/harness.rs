//! Experiment configuration, the two-stage training driver, evaluation and
//! ablation sweeps.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientMap, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::evalbench::{
    auroc, classify_masked, generate_synthetic, DataStage, MetricReport, PredictionRecord, SyntheticConfig,
    SyntheticDataset, WildernessImpact, CSV_HEADER,
};
use crate::losses::{
    adc, ced, default_gamma_milestones, evidence, gamma_schedule, lambda_schedule, semantic_align, total_loss,
    visual_align, CedItem, LossParts, MemoryBank, ScheduleState, Stage, Term,
};
use crate::mining::{
    attribution_gradients, distribution_report, global_aggregate, local_aggregate, quantile, select_abnormal_local,
    select_pseudo_unknown, AttributionResult, DistributionReport, Group, GroupedAttribution, MiningConfig,
};
use crate::model::{
    latents_from_features, logits_from_features, pool_project, region_features, JointSpaceModel, ModelDims, ModelVars,
    ProjectionHead, PromptBank, ProposalRecord,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub epsilon: f64,
    pub lambda: f64,
    pub beta: f64,
    pub bank_capacity: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { tau: 0.01, epsilon: 0.1, lambda: 1e-4, beta: 1.0, bank_capacity: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub base_iterations: usize,
    pub novel_iterations: usize,
    pub gamma_milestones: Vec<(f64, f64)>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { base_iterations: 500, novel_iterations: 300, gamma_milestones: default_gamma_milestones() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub novel_lr: f64,
    pub use_momentum: bool,
    pub momentum: f64,
    pub batch_size: usize,
    /// Standard deviation of the noise added to data-initialized prompts.
    pub init_noise: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 2e-4,
            novel_lr: 1e-5,
            use_momentum: false,
            momentum: 0.9,
            batch_size: 64,
            init_noise: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub ced: bool,
    pub adc: bool,
    pub visual: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles { ced: true, adc: true, visual: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub theta: f64,
    pub histogram_bins: usize,
    /// Proposals per group entering the attribution distributions.
    pub group_size: usize,
    /// Known-group quantiles of the local aggregate used as outlier thresholds.
    pub local_quantiles: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            theta: 0.05,
            histogram_bins: 64,
            group_size: 100,
            local_quantiles: vec![0.5, 0.75, 0.9, 0.95, 0.99],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub synthetic: SyntheticConfig,
    pub model: ModelDims,
    pub mining: MiningConfig,
    pub loss: LossConfig,
    pub schedule: ScheduleConfig,
    pub optim: OptimConfig,
    pub toggles: Toggles,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            synthetic: SyntheticConfig::default(),
            model: ModelDims::default(),
            mining: MiningConfig::default(),
            loss: LossConfig::default(),
            schedule: ScheduleConfig::default(),
            optim: OptimConfig::default(),
            toggles: Toggles::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, value) =
        raw.split_once('=').ok_or_else(|| Error::Config(format!("override `{raw}` is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("override key `{key}` has an empty segment")));
    }
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((path, parsed))
}

fn apply_override(table: &mut toml::Table, raw: &str) -> Result<()> {
    let (path, value) = parse_override(raw)?;
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut cur = table;
    for seg in parents {
        let entry = cur.entry(seg.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("override `{raw}`: `{seg}` is not a table")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML text, applies `key.path=value` overrides in order and
    /// validates the result.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Toml(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        Self::from_toml(&self.to_toml()?, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        let m = &self.model;
        if (self.synthetic.height, self.synthetic.width, self.synthetic.channels) != (m.height, m.width, m.channels) {
            return Err(Error::Config(format!(
                "synthetic feature maps {}x{}x{} do not match model dims {}x{}x{}",
                self.synthetic.height, self.synthetic.width, self.synthetic.channels, m.height, m.width, m.channels
            )));
        }
        self.mining.validate(m.height, m.width)?;
        let l = &self.loss;
        if !(l.tau > 0.0) || !(l.epsilon > 0.0) {
            return Err(Error::Config("tau and epsilon must be positive".into()));
        }
        if !(l.lambda > 0.0 && l.lambda <= 1.0) {
            return Err(Error::Config(format!("lambda must lie in (0, 1], got {}", l.lambda)));
        }
        if !(l.beta >= 0.0) || l.bank_capacity == 0 {
            return Err(Error::Config("beta must be nonnegative and bank capacity positive".into()));
        }
        let o = &self.optim;
        if !(o.base_lr > 0.0 && o.novel_lr > 0.0) || o.batch_size == 0 {
            return Err(Error::Config("learning rates and batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&o.momentum) || !(o.init_noise >= 0.0) {
            return Err(Error::Config("momentum must lie in [0, 1) and init noise be nonnegative".into()));
        }
        if self.synthetic.num_known() < 2 && self.toggles.adc {
            return Err(Error::Config("calibration needs at least two known classes".into()));
        }
        if self.eval.histogram_bins == 0 || self.eval.group_size == 0 {
            return Err(Error::Config("histogram bins and group size must be positive".into()));
        }
        let probe = ScheduleState {
            gamma_milestones: self.schedule.gamma_milestones.clone(),
            ..ScheduleState::new(0, 1, l.lambda, l.beta)
        };
        gamma_schedule(&probe)?;
        Ok(())
    }
}

/// Parameters, optimizer state and memory bank at an iteration boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Completed iterations of `stage`.
    pub iteration: usize,
    pub total_iterations: usize,
    /// Prompts below this index are the trained known vocabulary.
    pub active_known: usize,
    pub num_base: usize,
    pub unknown_trained: bool,
    pub tau: f64,
    pub tensors: BTreeMap<String, Tensor>,
    pub velocity: BTreeMap<String, Tensor>,
    pub bank: MemoryBank,
}

impl Checkpoint {
    pub fn model(&self) -> Result<JointSpaceModel> {
        JointSpaceModel::from_named_tensors(&self.tensors, self.tau)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Softmax columns in play at inference: the trained knowns, background,
    /// and the unknown placeholder only once something has trained it.
    pub fn active_columns(&self) -> Vec<bool> {
        let classes = self.tensors["prompts"].shape()[0];
        let unknown = classes - 2;
        (0..classes)
            .map(|j| j < self.active_known || j == unknown + 1 || (j == unknown && self.unknown_trained))
            .collect()
    }
}

/// One training-log row; disabled terms and their gradient norms are zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub stage: Stage,
    pub semantic: f64,
    pub visual: f64,
    pub ced: f64,
    pub adc: f64,
    pub gamma_t: f64,
    pub lambda_t: f64,
    pub beta: f64,
    pub total: f64,
    pub grad_norm_semantic: f64,
    pub grad_norm_visual: f64,
    pub grad_norm_ced: f64,
    pub grad_norm_adc: f64,
    pub visual_skipped: usize,
    pub pseudo_unknown_fg: usize,
    pub pseudo_unknown_bg: usize,
    pub ced_empty: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

fn stage_code(stage: Stage) -> u64 {
    match stage {
        Stage::Base => 1,
        Stage::Novel => 2,
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn region_rows(data: &[&ProposalRecord], head: &ProjectionHead) -> Result<Vec<Vec<f64>>> {
    data.iter().map(|p| pool_project(&p.feature_map, head)).collect()
}

fn anchor(rows: &[Vec<f64>], dim: usize, noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut mean = vec![0.0; dim];
    for r in rows {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    let n = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        mean.iter_mut().for_each(|v| *v /= n);
    }
    let scale = noise / (dim as f64).sqrt();
    mean.iter_mut().for_each(|v| *v += scale * rng.sample::<f64, _>(StandardNormal));
    mean
}

fn random_prompt(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn class_rows<'a>(data: &'a SyntheticDataset, regions: &'a [Vec<f64>], class: usize) -> Vec<Vec<f64>> {
    data.proposals.iter().zip(regions).filter(|(p, _)| p.gt_class == class).map(|(_, r)| r.clone()).collect()
}

/// Fresh base-stage state: orthonormal head, known-base and background
/// prompts at their class means under that head, the rest random.
pub fn init_base_checkpoint(cfg: &ExperimentConfig, base: &SyntheticDataset) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, 0);
    let head = ProjectionHead::init(&cfg.model, &mut rng)?;
    let refs: Vec<&ProposalRecord> = base.proposals.iter().collect();
    let regions = region_rows(&refs, &head)?;
    let k = cfg.synthetic.num_known();
    let d = cfg.model.joint_dim;
    let mut prompts = Vec::with_capacity((k + 2) * d);
    for j in 0..k + 2 {
        let row = if j < cfg.synthetic.num_base || j == k + 1 {
            anchor(&class_rows(base, &regions, j), d, cfg.optim.init_noise, &mut rng)
        } else {
            random_prompt(d, &mut rng)
        };
        prompts.extend(row);
    }
    let bank = PromptBank::new(Tensor::matrix(k + 2, d, prompts)?, cfg.loss.tau)?;
    let model = JointSpaceModel::new(head, bank)?;
    Ok(Checkpoint {
        stage: Stage::Base,
        iteration: 0,
        total_iterations: cfg.schedule.base_iterations,
        active_known: cfg.synthetic.num_base,
        num_base: cfg.synthetic.num_base,
        unknown_trained: false,
        tau: cfg.loss.tau,
        tensors: model.named_tensors(),
        velocity: BTreeMap::new(),
        bank: MemoryBank::new(cfg.loss.bank_capacity, cfg.model.latent_dim)?,
    })
}

/// Moves a finished base checkpoint into the few-shot stage: novel prompts
/// (and the unknown prompt, when a loss will train it) are placed at their
/// few-shot means under the current head.
pub fn begin_fewshot(cfg: &ExperimentConfig, base: &Checkpoint, fewshot: &SyntheticDataset) -> Result<Checkpoint> {
    if base.stage != Stage::Base {
        return Err(Error::Contract("few-shot initialization needs a base-stage checkpoint".into()));
    }
    let model = base.model()?;
    check_compatible(&model, fewshot)?;
    let mut rng = rng_for(cfg.seed, 1 << 40);
    let refs: Vec<&ProposalRecord> = fewshot.proposals.iter().collect();
    let regions = region_rows(&refs, &model.head)?;
    let k = model.bank.num_known();
    let d = model.bank.dim();
    let trains_unknown = cfg.toggles.ced || cfg.toggles.adc;
    let mut prompts = model.bank.embeddings().data().to_vec();
    for j in base.num_base..=k {
        let rows = if j < k {
            class_rows(fewshot, &regions, j)
        } else if trains_unknown {
            fewshot.proposals.iter().zip(&regions).filter(|(p, _)| p.gt_class < k).map(|(_, r)| r.clone()).collect()
        } else {
            continue;
        };
        prompts[j * d..(j + 1) * d].copy_from_slice(&anchor(&rows, d, cfg.optim.init_noise, &mut rng));
    }
    let bank = PromptBank::new(Tensor::matrix(k + 2, d, prompts)?, base.tau)?;
    let model = JointSpaceModel::new(model.head, bank)?;
    Ok(Checkpoint {
        stage: Stage::Novel,
        iteration: 0,
        total_iterations: cfg.schedule.novel_iterations,
        active_known: k,
        num_base: base.num_base,
        unknown_trained: trains_unknown,
        tau: base.tau,
        tensors: model.named_tensors(),
        velocity: BTreeMap::new(),
        bank: base.bank.clone(),
    })
}

fn check_compatible(model: &JointSpaceModel, data: &SyntheticDataset) -> Result<()> {
    if data.num_known != model.bank.num_known() {
        return Err(Error::Config(format!(
            "dataset has {} known classes, checkpoint {}",
            data.num_known,
            model.bank.num_known()
        )));
    }
    if let Some(p) = data.proposals.first() {
        if p.dims().2 != model.head.channels() {
            return Err(Error::Config(format!(
                "dataset has {} channels, checkpoint {}",
                p.dims().2,
                model.head.channels()
            )));
        }
    }
    Ok(())
}

fn param_vars(vars: &ModelVars) -> [(&'static str, Var); 3] {
    [("head.pool_linear", vars.pool_linear), ("head.latent", vars.latent), ("prompts", vars.prompts)]
}

fn grad_norm(grads: &GradientMap) -> f64 {
    grads.leaves().map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

fn stack(rows: impl Iterator<Item = Vec<f64>>, cols: usize) -> Result<Tensor> {
    let data: Vec<f64> = rows.flatten().collect();
    Tensor::matrix(data.len() / cols, cols, data)
}

/// One gradient step at iteration `ckpt.iteration`.
fn train_step(cfg: &ExperimentConfig, ckpt: &mut Checkpoint, data: &SyntheticDataset) -> Result<LogRow> {
    let t = ckpt.iteration;
    let stage = ckpt.stage;
    let novel = stage == Stage::Novel;
    let model = ckpt.model()?;
    let k = model.bank.num_known();

    let mut rng = rng_for(cfg.seed, (stage_code(stage) << 32) | t as u64);
    let mut order: Vec<usize> = (0..data.proposals.len()).collect();
    order.shuffle(&mut rng);
    order.truncate(cfg.optim.batch_size);
    let batch: Vec<&ProposalRecord> = order.iter().map(|&i| &data.proposals[i]).collect();
    let labels: Vec<usize> = batch.iter().map(|p| p.gt_class).collect();
    let c = model.head.channels();

    let state = ScheduleState {
        gamma_milestones: cfg.schedule.gamma_milestones.clone(),
        ..ScheduleState::new(t, ckpt.total_iterations, cfg.loss.lambda, cfg.loss.beta)
    };
    let gamma_t = gamma_schedule(&state)?;
    let lambda_t = if novel { lambda_schedule(&state)? } else { 0.0 };

    let mut tape = Tape::new();
    let vars = model.record(&mut tape, true);
    let pooled = tape.constant(stack(batch.iter().map(|p| p.pooled()), c)?);
    let region = region_features(&mut tape, pooled, &vars)?;
    let logits = logits_from_features(&mut tape, region, vars.prompts, ckpt.tau)?;

    let semantic = semantic_align(&mut tape, logits, &labels, ckpt.active_known)?;
    let mut weighted: Vec<(&str, Var)> = vec![("semantic", semantic)];
    let mut latents = None;
    let mut visual_skipped = 0;
    let visual = if cfg.toggles.visual {
        let z = latents_from_features(&mut tape, region, vars.latent)?;
        latents = Some(z);
        let (lv, stats) = visual_align(&mut tape, z, &labels, &ckpt.bank, cfg.loss.epsilon)?;
        visual_skipped = stats.skipped.len();
        let w = tape.scale(lv, gamma_t);
        weighted.push(("visual", w));
        Some(lv)
    } else {
        None
    };

    let (mut ced_term, mut adc_term) = (None, None);
    let (mut n_fg, mut n_bg, mut ced_empty) = (0, 0, false);
    if novel && (cfg.toggles.ced || cfg.toggles.adc) {
        let maps = attribution_gradients(&batch, &model, ckpt.active_known)?;
        let scored = maps
            .iter()
            .zip(&batch)
            .map(|(g, p)| Ok((global_aggregate(g, cfg.mining.variant)?, p.kind)))
            .collect::<Result<Vec<_>>>()?;
        let picked = select_pseudo_unknown(&scored, &cfg.mining)?;
        n_fg = picked.foreground.len();
        n_bg = picked.background.len();
        let chosen: Vec<(usize, CedItem)> = picked
            .iter()
            .map(|(kind, s)| {
                let p = batch[s.index];
                (s.index, CedItem { gt: p.gt_class, s_percept: p.perception_score(), kind })
            })
            .collect();
        if cfg.toggles.ced {
            let classes = k + 2;
            let idx: Vec<usize> = chosen.iter().flat_map(|(i, _)| (0..classes).map(move |j| i * classes + j)).collect();
            let rows = if chosen.is_empty() {
                None
            } else {
                let g = tape.gather(logits, idx, &[chosen.len(), classes])?;
                Some(evidence(&mut tape, g))
            };
            let items: Vec<CedItem> = chosen.iter().map(|(_, it)| *it).collect();
            let (lc, empty) = match rows {
                Some(alpha) => ced(&mut tape, alpha, &items, k)?,
                None => (tape.scalar(0.0), true),
            };
            ced_empty = empty;
            let w = tape.scale(lc, lambda_t);
            weighted.push(("ced", w));
            ced_term = Some(lc);
        }
        if cfg.toggles.adc && !chosen.is_empty() {
            let mut locals = Vec::new();
            let mut gts = Vec::new();
            for (i, item) in &chosen {
                let a_local = local_aggregate(&maps[*i])?;
                for (x, y) in select_abnormal_local(&a_local, cfg.mining.m)? {
                    locals.push(batch[*i].local_feature(x, y)?.to_vec());
                    gts.push(item.gt);
                }
            }
            let local = tape.constant(stack(locals.into_iter(), c)?);
            let local_region = region_features(&mut tape, local, &vars)?;
            let local_logits = logits_from_features(&mut tape, local_region, vars.prompts, ckpt.tau)?;
            let la = adc(&mut tape, local_logits, &gts, k)?;
            let w = tape.scale(la, lambda_t * cfg.loss.beta);
            weighted.push(("adc", w));
            adc_term = Some(la);
        }
    }

    let mut total = weighted[0].1;
    for &(_, w) in &weighted[1..] {
        total = tape.add(total, w)?;
    }
    let value = |v: Option<Var>| v.map(|v| tape.forward_scalar(v)).transpose();
    let sem_v = tape.forward_scalar(semantic)?;
    let vis_v = value(visual)?;
    let ced_v = value(ced_term)?;
    let adc_v = value(adc_term)?;
    let term = |v: Option<f64>| v.map_or(Term::Disabled, Term::Active);
    let parts = LossParts {
        semantic: sem_v,
        visual: term(vis_v),
        ced: novel.then(|| term(ced_v)),
        adc: novel.then(|| term(adc_v)),
    };
    let report = total_loss(stage, &parts, &state)?;
    let total_v = tape.forward_scalar(total)?;
    if !total_v.is_finite() {
        return Err(Error::Divergence { iteration: t, detail: format!("total loss {total_v}") });
    }

    let mut norms = BTreeMap::new();
    for &(name, w) in &weighted {
        norms.insert(name, grad_norm(&tape.backward(w)?));
    }
    let grads = tape.backward(total)?;

    let mut tensors = ckpt.tensors.clone();
    let lr = if novel { cfg.optim.novel_lr } else { cfg.optim.base_lr };
    for (name, var) in param_vars(&vars) {
        let g = grads.get(var).expect("parameter leaves are registered");
        if !g.is_finite() {
            return Err(Error::Divergence { iteration: t, detail: format!("non-finite gradient for {name}") });
        }
        let step = if cfg.optim.use_momentum {
            let v = ckpt.velocity.entry(name.to_string()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = cfg.optim.momentum * *vi + gi;
            }
            v.clone()
        } else {
            g.clone()
        };
        let p = tensors.get_mut(name).expect("checkpoint holds every parameter");
        for (pi, si) in p.data_mut().iter_mut().zip(step.data()) {
            *pi -= lr * si;
        }
    }
    JointSpaceModel::from_named_tensors(&tensors, ckpt.tau)?;
    ckpt.tensors = tensors;

    if let Some(z) = latents {
        let zv = tape.value(z);
        let rows: Vec<Vec<f64>> = (0..zv.shape()[0]).map(|i| zv.row(i).to_vec()).collect();
        ckpt.bank.update(&rows, &labels)?;
    }
    ckpt.iteration += 1;

    let norm = |name: &str| norms.get(name).copied().unwrap_or(0.0);
    Ok(LogRow {
        iteration: t,
        stage,
        semantic: report.semantic,
        visual: report.visual,
        ced: report.ced,
        adc: report.adc,
        gamma_t,
        lambda_t,
        beta: cfg.loss.beta,
        total: report.total,
        grad_norm_semantic: norm("semantic"),
        grad_norm_visual: norm("visual"),
        grad_norm_ced: norm("ced"),
        grad_norm_adc: norm("adc"),
        visual_skipped,
        pseudo_unknown_fg: n_fg,
        pseudo_unknown_bg: n_bg,
        ced_empty,
    })
}

/// Runs iterations until the stage total or `max_steps` more steps.
pub fn train(
    cfg: &ExperimentConfig,
    ckpt: &mut Checkpoint,
    data: &SyntheticDataset,
    max_steps: Option<usize>,
) -> Result<Vec<LogRow>> {
    check_compatible(&ckpt.model()?, data)?;
    let end = max_steps.map_or(ckpt.total_iterations, |s| (ckpt.iteration + s).min(ckpt.total_iterations));
    let mut log = Vec::with_capacity(end.saturating_sub(ckpt.iteration));
    while ckpt.iteration < end {
        log.push(train_step(cfg, ckpt, data)?);
    }
    Ok(log)
}

pub fn write_log(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<LogRow>, _>>()?)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn run_base_stage(cfg: &ExperimentConfig, out: &Path) -> Result<RunArtifacts> {
    ensure_dir(out)?;
    let data = generate_synthetic(&cfg.synthetic, DataStage::Base)?;
    let mut ckpt = init_base_checkpoint(cfg, &data)?;
    let log = train(cfg, &mut ckpt, &data, None)?;
    let artifacts = RunArtifacts { checkpoint: out.join("checkpoint_base.json"), log: out.join("train_base.csv") };
    ckpt.save(&artifacts.checkpoint)?;
    write_log(&log, &artifacts.log)?;
    Ok(artifacts)
}

/// Starts the few-shot stage from a base checkpoint, or resumes one that is
/// already in it. `max_steps` bounds the iterations run in this call.
pub fn run_fewshot_stage(
    cfg: &ExperimentConfig,
    from: &Checkpoint,
    out: &Path,
    max_steps: Option<usize>,
) -> Result<RunArtifacts> {
    ensure_dir(out)?;
    let data = generate_synthetic(&cfg.synthetic, DataStage::Fewshot)?;
    let mut ckpt = match from.stage {
        Stage::Base => begin_fewshot(cfg, from, &data)?,
        Stage::Novel => from.clone(),
    };
    let log = train(cfg, &mut ckpt, &data, max_steps)?;
    let artifacts =
        RunArtifacts { checkpoint: out.join("checkpoint_fewshot.json"), log: out.join("train_fewshot.csv") };
    ckpt.save(&artifacts.checkpoint)?;
    write_log(&log, &artifacts.log)?;
    Ok(artifacts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    /// AUROC of the global aggregate ranking unknown above known proposals.
    pub a_global_auroc: Option<f64>,
    pub known_median: Option<f64>,
    pub unknown_median: Option<f64>,
    pub report: DistributionReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: MetricReport,
    pub distribution: DistributionSummary,
}

/// Proposals scored by a checkpoint: known classes it has not trained yet
/// are left out.
pub fn predict(ckpt: &Checkpoint, data: &SyntheticDataset) -> Result<(Vec<PredictionRecord>, Vec<usize>, Vec<usize>)> {
    let model = ckpt.model()?;
    check_compatible(&model, data)?;
    let k = model.bank.num_known();
    let active = ckpt.active_columns();
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    let mut kept = Vec::new();
    for (i, p) in data.proposals.iter().enumerate() {
        if p.gt_class >= ckpt.active_known && p.gt_class < k {
            continue;
        }
        let r = pool_project(&p.feature_map, &model.head)?;
        let row = crate::model::compute_logits(&r, &model.bank)?;
        preds.push(classify_masked(p.id, &row.values, 0.0, &active));
        labels.push(p.gt_class);
        kept.push(i);
    }
    Ok((preds, labels, kept))
}

/// Global and local attribution aggregates for up to `group_size` seeded
/// picks per group.
pub fn attribution_distribution(
    ckpt: &Checkpoint,
    data: &SyntheticDataset,
    cfg: &ExperimentConfig,
) -> Result<DistributionSummary> {
    let model = ckpt.model()?;
    check_compatible(&model, data)?;
    let k = model.bank.num_known();
    let mut rng = rng_for(cfg.seed, 3 << 40);
    let mut items = Vec::new();
    for group in Group::ALL {
        let mut members: Vec<&ProposalRecord> = data
            .proposals
            .iter()
            .filter(|p| match group {
                Group::Known => p.gt_class < ckpt.active_known,
                Group::Unknown => p.gt_class == k,
                Group::Background => p.gt_class == k + 1,
            })
            .collect();
        members.shuffle(&mut rng);
        members.truncate(cfg.eval.group_size);
        for chunk in members.chunks(128) {
            for g in attribution_gradients(chunk, &model, ckpt.active_known)? {
                let r = AttributionResult::from_gradient(g, cfg.mining.variant)?;
                items.push(GroupedAttribution { group, a_global: r.a_global, a_local: r.a_local.into_data() });
            }
        }
    }
    let pick = |g: Group| items.iter().filter(move |i| i.group == g);
    let known_local: Vec<f64> = pick(Group::Known).flat_map(|i| i.a_local.iter().copied()).collect();
    let thresholds: Vec<f64> = cfg.eval.local_quantiles.iter().filter_map(|&q| quantile(&known_local, q)).collect();
    let report = distribution_report(&items, cfg.eval.histogram_bins, &thresholds)?;
    let known: Vec<f64> = pick(Group::Known).map(|i| i.a_global).collect();
    let unknown: Vec<f64> = pick(Group::Unknown).map(|i| i.a_global).collect();
    Ok(DistributionSummary {
        a_global_auroc: auroc(&unknown, &known).ok(),
        known_median: report.group(Group::Known).median_a_global,
        unknown_median: report.group(Group::Unknown).median_a_global,
        report,
    })
}

pub fn evaluate(ckpt: &Checkpoint, data: &SyntheticDataset, cfg: &ExperimentConfig, theta: f64) -> Result<Evaluation> {
    let (preds, labels, _) = predict(ckpt, data)?;
    let metrics = MetricReport::compute(&preds, &labels, data.num_known, ckpt.num_base, theta)?;
    let distribution = attribution_distribution(ckpt, data, cfg)?;
    Ok(Evaluation { metrics, distribution })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalArtifacts {
    pub metrics: PathBuf,
    pub histogram: PathBuf,
    pub local_counts: PathBuf,
    pub distribution: PathBuf,
}

pub fn write_evaluation(eval: &Evaluation, out: &Path) -> Result<EvalArtifacts> {
    ensure_dir(out)?;
    let a = EvalArtifacts {
        metrics: out.join("metrics.json"),
        histogram: out.join("histogram_global.csv"),
        local_counts: out.join("local_counts.csv"),
        distribution: out.join("distribution.json"),
    };
    eval.metrics.write_json(&a.metrics)?;
    eval.distribution.report.write_histogram_csv(&a.histogram)?;
    eval.distribution.report.write_local_counts_csv(&a.local_counts)?;
    fs::write(&a.distribution, serde_json::to_vec_pretty(&eval.distribution)?)
        .map_err(|e| Error::io(&a.distribution, e))?;
    Ok(a)
}

/// Artifact paths and the resolved configuration of every verb run into
/// one output directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: Option<ExperimentConfig>,
    pub artifacts: BTreeMap<String, PathBuf>,
}

impl Manifest {
    pub fn path(out: &Path) -> PathBuf {
        out.join("manifest.json")
    }

    pub fn record(out: &Path, cfg: &ExperimentConfig, entries: &[(&str, &Path)]) -> Result<Manifest> {
        ensure_dir(out)?;
        let path = Self::path(out);
        let mut m: Manifest = match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)?,
            Err(_) => Manifest::default(),
        };
        m.config = Some(cfg.clone());
        for (k, p) in entries {
            m.artifacts.insert(k.to_string(), p.to_path_buf());
        }
        fs::write(&path, serde_json::to_vec_pretty(&m)?).map_err(|e| Error::io(&path, e))?;
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutcome {
    pub base: RunArtifacts,
    pub fewshot: RunArtifacts,
    pub evaluation: EvalArtifacts,
    pub metrics: MetricReport,
    pub lambda_t_first: Option<f64>,
    pub lambda_t_last: Option<f64>,
}

/// Base training, few-shot training and test evaluation into `out`.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<PipelineOutcome> {
    let base = run_base_stage(cfg, out)?;
    let base_ckpt = Checkpoint::load(&base.checkpoint)?;
    let fewshot = run_fewshot_stage(cfg, &base_ckpt, out, None)?;
    let ckpt = Checkpoint::load(&fewshot.checkpoint)?;
    let test = generate_synthetic(&cfg.synthetic, DataStage::Test)?;
    let eval = evaluate(&ckpt, &test, cfg, cfg.eval.theta)?;
    let evaluation = write_evaluation(&eval, &out.join("eval"))?;
    let log = read_log(&fewshot.log)?;
    Manifest::record(
        out,
        cfg,
        &[
            ("checkpoint_base", &base.checkpoint),
            ("log_base", &base.log),
            ("checkpoint_fewshot", &fewshot.checkpoint),
            ("log_fewshot", &fewshot.log),
            ("metrics", &evaluation.metrics),
            ("histogram_global", &evaluation.histogram),
            ("local_counts", &evaluation.local_counts),
            ("distribution", &evaluation.distribution),
        ],
    )?;
    Ok(PipelineOutcome {
        base,
        fewshot,
        evaluation,
        metrics: eval.metrics,
        lambda_t_first: log.first().map(|r| r.lambda_t),
        lambda_t_last: log.last().map(|r| r.lambda_t),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub name: String,
    /// `key.path=value` overrides on top of the base configuration.
    #[serde(default)]
    pub set: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default = "one")]
    pub seeds: usize,
    pub points: Vec<SweepPoint>,
}

fn one() -> usize {
    1
}

impl SweepGrid {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Toml(e.to_string()))
    }

    /// Built-in grids: `toggles`, `lambda`, `beta`, `k`, `ratio`, `m`.
    pub fn preset(name: &str, seeds: usize) -> Result<Self> {
        let points: Vec<SweepPoint> = match name {
            "toggles" => [(false, false), (true, false), (false, true), (true, true)]
                .iter()
                .map(|&(c, a)| SweepPoint {
                    name: format!("ced={c},adc={a}"),
                    set: vec![format!("toggles.ced={c}"), format!("toggles.adc={a}")],
                })
                .collect(),
            "lambda" => (1..=6).map(|e| point("loss.lambda", &format!("1e-{e}"))).collect(),
            "beta" => ["0.25", "0.5", "1.0", "2.0"].iter().map(|v| point("loss.beta", v)).collect(),
            "k" => ["1", "3", "5", "10"].iter().map(|v| point("mining.k", v)).collect(),
            "ratio" => ["[1, 1]", "[1, 3]", "[1, 5]"].iter().map(|v| point("mining.fg_bg_ratio", v)).collect(),
            "m" => ["1", "3", "5"].iter().map(|v| point("mining.m", v)).collect(),
            other => return Err(Error::Config(format!("unknown sweep preset `{other}`"))),
        };
        Ok(SweepGrid { seeds, points })
    }
}

fn point(key: &str, value: &str) -> SweepPoint {
    SweepPoint { name: format!("{key}={value}"), set: vec![format!("{key}={value}")] }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub name: String,
    pub runs: usize,
    pub failures: usize,
    pub errors: Vec<String>,
    pub config: Option<ExperimentConfig>,
    pub lambda_t_first: Option<f64>,
    pub lambda_t_last: Option<f64>,
    /// Seed-averaged values in `CSV_HEADER` order.
    pub metrics: Vec<Option<f64>>,
}

fn average(rows: &[Vec<Option<f64>>]) -> Vec<Option<f64>> {
    (0..CSV_HEADER.len())
        .map(|c| {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r[c]).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect()
}

fn numeric_row(m: &MetricReport) -> Vec<Option<f64>> {
    let (wi, max_recall) = match m.wilderness_impact {
        Some(WildernessImpact::Defined(p)) => (Some(p.wi), Some(p.recall)),
        Some(WildernessImpact::Undefined { max_recall }) => (None, Some(max_recall)),
        None => (None, None),
    };
    vec![
        m.recall_unknown,
        m.ar_proxy,
        wi,
        max_recall,
        Some(m.aose as f64),
        m.known_accuracy,
        m.mean_ap,
        m.mean_ap_base,
        m.mean_ap_novel,
        Some(m.theta),
    ]
}

/// Runs every grid point for `grid.seeds` seeds (seed and data seed both
/// offset), in parallel, each in its own directory. Failures are recorded
/// per row.
pub fn ablation_sweep(base: &ExperimentConfig, grid: &SweepGrid, out: &Path) -> Result<Vec<SweepRow>> {
    if grid.points.is_empty() || grid.seeds == 0 {
        return Err(Error::Config("sweep grid needs at least one point and one seed".into()));
    }
    ensure_dir(out)?;
    let jobs: Vec<(usize, usize)> = (0..grid.points.len()).flat_map(|p| (0..grid.seeds).map(move |s| (p, s))).collect();
    let results: Vec<Result<(ExperimentConfig, PipelineOutcome)>> = jobs
        .par_iter()
        .map(|&(p, s)| {
            let mut cfg = base.with_overrides(&grid.points[p].set)?;
            cfg.seed += s as u64;
            cfg.synthetic.seed += s as u64;
            let dir = out.join(format!("point_{p:03}")).join(format!("seed_{s}"));
            let outcome = run_pipeline(&cfg, &dir)?;
            Ok((cfg, outcome))
        })
        .collect();
    let mut rows = Vec::new();
    for (p, sp) in grid.points.iter().enumerate() {
        let mine: Vec<&Result<(ExperimentConfig, PipelineOutcome)>> =
            jobs.iter().zip(&results).filter(|((jp, _), _)| *jp == p).map(|(_, r)| r).collect();
        let ok: Vec<&(ExperimentConfig, PipelineOutcome)> = mine.iter().filter_map(|r| r.as_ref().ok()).collect();
        let errors: Vec<String> = mine.iter().filter_map(|r| r.as_ref().err().map(|e| e.to_string())).collect();
        let config = ok.first().map(|(c, _)| c.clone()).or_else(|| base.with_overrides(&sp.set).ok());
        rows.push(SweepRow {
            name: sp.name.clone(),
            runs: mine.len(),
            failures: errors.len(),
            errors,
            config,
            lambda_t_first: ok.first().and_then(|(_, o)| o.lambda_t_first),
            lambda_t_last: ok.first().and_then(|(_, o)| o.lambda_t_last),
            metrics: average(&ok.iter().map(|(_, o)| numeric_row(&o.metrics)).collect::<Vec<_>>()),
        });
    }
    write_sweep_csv(&rows, &out.join("sweep.csv"))?;
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        "name",
        "runs",
        "failures",
        "errors",
        "ced",
        "adc",
        "visual",
        "k",
        "fg",
        "bg",
        "m",
        "lambda",
        "beta",
        "lambda_t_first",
        "lambda_t_last",
    ];
    header.extend(CSV_HEADER);
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let mut rec = vec![r.name.clone(), r.runs.to_string(), r.failures.to_string(), r.errors.join(" | ")];
        match &r.config {
            Some(c) => rec.extend([
                c.toggles.ced.to_string(),
                c.toggles.adc.to_string(),
                c.toggles.visual.to_string(),
                c.mining.k.to_string(),
                c.mining.fg_bg_ratio.0.to_string(),
                c.mining.fg_bg_ratio.1.to_string(),
                c.mining.m.to_string(),
                c.loss.lambda.to_string(),
                c.loss.beta.to_string(),
            ]),
            None => rec.extend(std::iter::repeat_n(String::new(), 9)),
        }
        rec.push(opt(r.lambda_t_first));
        rec.push(opt(r.lambda_t_last));
        rec.extend(r.metrics.iter().map(|v| opt(*v)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

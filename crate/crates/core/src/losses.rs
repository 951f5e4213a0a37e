//! Training objectives and their scheduled composition.
//!
//! Each loss has a tape builder (used by the trainer and by the gradient
//! checks) and an eager wrapper over plain slices.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{LogitRow, ProposalKind};

/// Logits above this value are clamped before exponentiation.
pub const EVIDENCE_CLAMP: f64 = 40.0;

const UNIT_NORM_TOLERANCE: f64 = 1e-9;

/// Per-class bounded FIFO queues of unit-norm latent embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    queues: BTreeMap<usize, VecDeque<Vec<f64>>>,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("memory bank capacity must be positive".into()));
        }
        Ok(MemoryBank { capacity, dim, queues: BTreeMap::new() })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn queue(&self, class: usize) -> Option<&VecDeque<Vec<f64>>> {
        self.queues.get(&class)
    }

    pub fn len(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Enqueues each embedding under its label, evicting the oldest entries
    /// past capacity.
    pub fn update(&mut self, latents: &[Vec<f64>], labels: &[usize]) -> Result<()> {
        if latents.len() != labels.len() {
            return Err(Error::Shape(format!("{} embeddings with {} labels", latents.len(), labels.len())));
        }
        for z in latents {
            if z.len() != self.dim {
                return Err(Error::Shape(format!("embedding of length {} in a bank of dim {}", z.len(), self.dim)));
            }
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::Contract(format!("memory bank entries must be unit norm, got {norm}")));
            }
        }
        for (z, &label) in latents.iter().zip(labels) {
            let q = self.queues.entry(label).or_default();
            q.push_back(z.clone());
            while q.len() > self.capacity {
                q.pop_front();
            }
        }
        Ok(())
    }

    fn positives_and_negatives(&self, class: usize) -> (Vec<f64>, usize, Vec<f64>, usize) {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        let (mut np, mut nn) = (0, 0);
        for (&c, q) in &self.queues {
            for z in q {
                if c == class {
                    pos.extend_from_slice(z);
                    np += 1;
                } else {
                    neg.extend_from_slice(z);
                    nn += 1;
                }
            }
        }
        (pos, np, neg, nn)
    }
}

fn check_labels_rows(tape: &Tape, logits: Var, labels: &[usize]) -> Result<(usize, usize)> {
    let t = tape.value(logits);
    if t.rank() != 2 || t.shape()[0] != labels.len() {
        return Err(Error::Shape(format!("logits {:?} against {} labels", t.shape(), labels.len())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// Mean of `-log(exp(l_gt) / sum_{c < num_known} exp(l_c))` over rows.
///
/// The normalizer runs over the first `num_known` classes only; `gt` may be
/// one of those or the background index.
pub fn semantic_align(tape: &mut Tape, logits: Var, labels: &[usize], num_known: usize) -> Result<Var> {
    let (n, classes) = check_labels_rows(tape, logits, labels)?;
    if n == 0 {
        return Err(Error::EmptyInput("semantic alignment on an empty batch".into()));
    }
    let unknown = classes - 2;
    let background = classes - 1;
    if num_known == 0 || num_known > unknown {
        return Err(Error::Config(format!("known-class count {num_known} outside 1..={unknown}")));
    }
    for &gt in labels {
        if gt == unknown {
            return Err(Error::Contract("no unknown labels exist during training".into()));
        }
        if gt >= num_known && gt != background {
            return Err(Error::Contract(format!("label {gt} is neither an active known class nor background")));
        }
    }
    let known_idx: Vec<usize> = (0..n).flat_map(|i| (0..num_known).map(move |c| i * classes + c)).collect();
    let known = tape.gather(logits, known_idx, &[n, num_known])?;
    let lse = tape.log_sum_exp(known)?;
    let gt_idx: Vec<usize> = labels.iter().enumerate().map(|(i, &g)| i * classes + g).collect();
    let gt = tape.gather(logits, gt_idx, &[n])?;
    let per_row = tape.sub(lse, gt)?;
    Ok(tape.mean(per_row))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualAlignStats {
    pub used: usize,
    /// Batch indices skipped for lack of positives or negatives in the bank.
    pub skipped: Vec<usize>,
}

/// Contrastive alignment against the memory bank snapshot.
///
/// For each `z_i` the term is the mean over positives `z_j` in its class
/// queue of `z_i.z_j / eps - log sum_{z_k outside the class} exp(z_i.z_k / eps)`;
/// the loss is the negated mean over proposals that have both positives and
/// negatives. Returns a constant zero when every proposal is skipped.
pub fn visual_align(
    tape: &mut Tape,
    latents: Var,
    labels: &[usize],
    bank: &MemoryBank,
    eps: f64,
) -> Result<(Var, VisualAlignStats)> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {eps}")));
    }
    let (n, d) = check_labels_rows(tape, latents, labels)?;
    if d != bank.dim() {
        return Err(Error::Shape(format!("latents of dim {d} against bank dim {}", bank.dim())));
    }
    let mut stats = VisualAlignStats::default();
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let mut partials = Vec::new();
    for (class, rows) in by_class {
        let (pos, np, neg, nn) = bank.positives_and_negatives(class);
        if np == 0 || nn == 0 {
            stats.skipped.extend(rows);
            continue;
        }
        stats.used += rows.len();
        let idx: Vec<usize> = rows.iter().flat_map(|&i| (0..d).map(move |k| i * d + k)).collect();
        let zc = tape.gather(latents, idx, &[rows.len(), d])?;
        let pos_t = tape.constant(Tensor::matrix(d, np, transpose_flat(&pos, np, d))?);
        let neg_t = tape.constant(Tensor::matrix(d, nn, transpose_flat(&neg, nn, d))?);
        let s_pos = tape.matmul(zc, pos_t)?;
        let s_pos = tape.scale(s_pos, 1.0 / (eps * np as f64));
        let pos_mean = tape.sum_last(s_pos)?;
        let s_neg = tape.matmul(zc, neg_t)?;
        let s_neg = tape.scale(s_neg, 1.0 / eps);
        let lse = tape.log_sum_exp(s_neg)?;
        let term = tape.sub(pos_mean, lse)?;
        partials.push(tape.sum(term));
    }
    stats.skipped.sort_unstable();
    let Some((&first, rest)) = partials.split_first() else {
        return Ok((tape.scalar(0.0), stats));
    };
    let mut acc = first;
    for &p in rest {
        acc = tape.add(acc, p)?;
    }
    debug_assert!(stats.used + stats.skipped.len() == n);
    Ok((tape.scale(acc, -1.0 / stats.used as f64), stats))
}

fn transpose_flat(rows: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for k in 0..d {
            out[k * n + i] = rows[i * d + k];
        }
    }
    out
}

/// `alpha = exp(min(l, 40)) + 1`, elementwise.
pub fn evidence(tape: &mut Tape, logits: Var) -> Var {
    let e = tape.exp_clamped(logits, EVIDENCE_CLAMP);
    tape.shift(e, 1.0)
}

fn excluding(n: usize, classes: usize, skip: impl Fn(usize) -> usize) -> Vec<usize> {
    (0..n)
        .flat_map(|i| {
            let s = skip(i);
            (0..classes).filter(move |&j| j != s).map(move |j| i * classes + j)
        })
        .collect()
}

fn check_alpha(tape: &Tape, alpha: Var, gts: &[usize], unknown: usize) -> Result<(usize, usize)> {
    let (n, classes) = check_labels_rows(tape, alpha, gts)?;
    if unknown >= classes {
        return Err(Error::Index { index: unknown, extent: classes });
    }
    for &gt in gts {
        if gt == unknown {
            return Err(Error::Contract("ground truth cannot be the unknown placeholder".into()));
        }
        if gt >= classes {
            return Err(Error::Index { index: gt, extent: classes });
        }
    }
    Ok((n, classes))
}

/// Per-row `psi(sum_{j != gt} alpha_j) - psi(alpha_unknown)`.
pub fn ced_unknown(tape: &mut Tape, alpha: Var, gts: &[usize], unknown: usize) -> Result<Var> {
    let (n, classes) = check_alpha(tape, alpha, gts, unknown)?;
    let rest = tape.gather(alpha, excluding(n, classes, |i| gts[i]), &[n, classes - 1])?;
    let total = tape.sum_last(rest)?;
    let lhs = tape.digamma(total)?;
    let single = tape.gather(alpha, (0..n).map(|i| i * classes + unknown).collect(), &[n])?;
    let rhs = tape.digamma(single)?;
    tape.sub(lhs, rhs)
}

/// Per-row `psi(sum_{j != unknown} alpha_j) - psi(alpha_gt)`.
pub fn ced_gt(tape: &mut Tape, alpha: Var, gts: &[usize], unknown: usize) -> Result<Var> {
    let (n, classes) = check_alpha(tape, alpha, gts, unknown)?;
    let rest = tape.gather(alpha, excluding(n, classes, |_| unknown), &[n, classes - 1])?;
    let total = tape.sum_last(rest)?;
    let lhs = tape.digamma(total)?;
    let single = tape.gather(alpha, gts.iter().enumerate().map(|(i, &g)| i * classes + g).collect(), &[n])?;
    let rhs = tape.digamma(single)?;
    tape.sub(lhs, rhs)
}

/// Per-proposal inputs to the decoupling loss besides `alpha`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CedItem {
    pub gt: usize,
    pub s_percept: f64,
    pub kind: ProposalKind,
}

/// Perception-weighted decoupling loss: the mean foreground contribution
/// `(1 - S) L_ukn + S L_gt` plus the mean background contribution
/// `S L_ukn + (1 - S) L_gt`. An empty set yields a constant zero and `true`.
pub fn ced(tape: &mut Tape, alpha: Var, items: &[CedItem], unknown: usize) -> Result<(Var, bool)> {
    if items.is_empty() {
        return Ok((tape.scalar(0.0), true));
    }
    let gts: Vec<usize> = items.iter().map(|i| i.gt).collect();
    let l_ukn = ced_unknown(tape, alpha, &gts, unknown)?;
    let l_gt = ced_gt(tape, alpha, &gts, unknown)?;
    let n_fg = items.iter().filter(|i| i.kind == ProposalKind::Foreground).count() as f64;
    let n_bg = items.len() as f64 - n_fg;
    let mut w_ukn = Vec::with_capacity(items.len());
    let mut w_gt = Vec::with_capacity(items.len());
    for it in items {
        if !(0.0..=1.0).contains(&it.s_percept) {
            return Err(Error::Domain(format!("perception score {} outside [0, 1]", it.s_percept)));
        }
        match it.kind {
            ProposalKind::Foreground => {
                w_ukn.push((1.0 - it.s_percept) / n_fg);
                w_gt.push(it.s_percept / n_fg);
            }
            ProposalKind::Background => {
                w_ukn.push(it.s_percept / n_bg);
                w_gt.push((1.0 - it.s_percept) / n_bg);
            }
        }
    }
    let wu = tape.constant(Tensor::vector(w_ukn));
    let wg = tape.constant(Tensor::vector(w_gt));
    let a = tape.mul(l_ukn, wu)?;
    let b = tape.mul(l_gt, wg)?;
    let both = tape.add(a, b)?;
    Ok((tape.sum(both), false))
}

/// Calibration on local logits `l'`:
/// `-(1/M) sum_i [ sum_{j < K, j != gt} log sigma(-l'_j) + H_norm(p') log sigma(l'_ukn) ]`,
/// with `p'` the softmax over the `K` known logits. `gt` is a known class or
/// the background index.
pub fn adc(tape: &mut Tape, local_logits: Var, gts: &[usize], num_known: usize) -> Result<Var> {
    let (m, classes) = check_labels_rows(tape, local_logits, gts)?;
    if num_known < 2 {
        return Err(Error::Config("normalized entropy needs at least two known classes".into()));
    }
    if num_known + 2 != classes {
        return Err(Error::Shape(format!("{classes} logits for {num_known} known classes")));
    }
    if m == 0 {
        return Err(Error::EmptyInput("calibration on an empty batch".into()));
    }
    if let Some(&bad) = gts.iter().find(|&&g| g == num_known || g >= classes) {
        return Err(Error::Contract(format!("calibration target {bad} is not a known class or background")));
    }
    let known_idx: Vec<usize> = (0..m).flat_map(|i| (0..num_known).map(move |c| i * classes + c)).collect();
    let known = tape.gather(local_logits, known_idx, &[m, num_known])?;

    let neg = tape.neg(known);
    let ls_neg = tape.log_sigmoid(neg);
    let mask: Vec<f64> =
        gts.iter().flat_map(|&g| (0..num_known).map(move |c| if c == g { 0.0 } else { 1.0 })).collect();
    let mask = tape.constant(Tensor::matrix(m, num_known, mask)?);
    let suppressed = tape.mul(ls_neg, mask)?;
    let suppress_sum = tape.sum_last(suppressed)?;

    let p = tape.softmax(known, 1.0)?;
    let logp = tape.log(p)?;
    let plogp = tape.mul(p, logp)?;
    let ent = tape.sum_last(plogp)?;
    let h_norm = tape.scale(ent, -1.0 / (num_known as f64).ln());

    let ukn = tape.gather(local_logits, (0..m).map(|i| i * classes + num_known).collect(), &[m])?;
    let ls_ukn = tape.log_sigmoid(ukn);
    let weighted = tape.mul(h_norm, ls_ukn)?;
    let per_row = tape.add(suppress_sum, weighted)?;
    let total = tape.sum(per_row);
    Ok(tape.scale(total, -1.0 / m as f64))
}

/// Normalized entropy `-sum p log p / log K` of a probability row.
pub fn normalized_entropy(p: &[f64]) -> Result<f64> {
    if p.len() < 2 {
        return Err(Error::Config("normalized entropy needs at least two classes".into()));
    }
    let h: f64 = p.iter().filter(|&&v| v > 0.0).map(|v| -v * v.ln()).sum();
    Ok(h / (p.len() as f64).ln())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirichletEvidence {
    pub alpha: Vec<f64>,
    pub source: LogitRow,
}

pub fn evidence_params(row: &LogitRow) -> DirichletEvidence {
    DirichletEvidence {
        alpha: row.values.iter().map(|&l| l.min(EVIDENCE_CLAMP).exp() + 1.0).collect(),
        source: row.clone(),
    }
}

fn rows_tensor(rows: &[Vec<f64>]) -> Result<Tensor> {
    let Some(first) = rows.first() else {
        return Err(Error::EmptyInput("no rows".into()));
    };
    let d = first.len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("ragged rows".into()));
    }
    Tensor::matrix(rows.len(), d, rows.concat())
}

pub fn semantic_align_loss(rows: &[Vec<f64>], labels: &[usize], num_known: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(rows_tensor(rows)?);
    let out = semantic_align(&mut tape, l, labels, num_known)?;
    tape.forward_scalar(out)
}

pub fn visual_align_loss(
    latents: &[Vec<f64>],
    labels: &[usize],
    bank: &MemoryBank,
    eps: f64,
) -> Result<(f64, VisualAlignStats)> {
    let mut tape = Tape::new();
    let z = tape.constant(rows_tensor(latents)?);
    let (out, stats) = visual_align(&mut tape, z, labels, bank, eps)?;
    Ok((tape.forward_scalar(out)?, stats))
}

pub fn ced_unknown_term(alpha: &[f64], gt: usize, unknown: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::matrix(1, alpha.len(), alpha.to_vec())?);
    let out = ced_unknown(&mut tape, a, &[gt], unknown)?;
    tape.forward_scalar(out)
}

pub fn ced_gt_term(alpha: &[f64], gt: usize, unknown: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::matrix(1, alpha.len(), alpha.to_vec())?);
    let out = ced_gt(&mut tape, a, &[gt], unknown)?;
    tape.forward_scalar(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CedOutcome {
    pub value: f64,
    /// Set when the pseudo-unknown set was empty.
    pub empty: bool,
}

pub fn ced_loss(alphas: &[Vec<f64>], items: &[CedItem], unknown: usize) -> Result<CedOutcome> {
    if items.is_empty() {
        return Ok(CedOutcome { value: 0.0, empty: true });
    }
    let mut tape = Tape::new();
    let a = tape.constant(rows_tensor(alphas)?);
    let (out, empty) = ced(&mut tape, a, items, unknown)?;
    Ok(CedOutcome { value: tape.forward_scalar(out)?, empty })
}

pub fn adc_loss(rows: &[Vec<f64>], gts: &[usize], num_known: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(rows_tensor(rows)?);
    let out = adc(&mut tape, l, gts, num_known)?;
    tape.forward_scalar(out)
}

/// Iteration state for the weight schedules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub t: usize,
    pub total: usize,
    pub lambda: f64,
    pub beta: f64,
    /// `(iteration fraction, value)`, sorted by fraction.
    pub gamma_milestones: Vec<(f64, f64)>,
}

pub fn default_gamma_milestones() -> Vec<(f64, f64)> {
    vec![(0.0, 0.5), (0.5, 0.25), (0.75, 0.0)]
}

impl ScheduleState {
    pub fn new(t: usize, total: usize, lambda: f64, beta: f64) -> Self {
        ScheduleState { t, total, lambda, beta, gamma_milestones: default_gamma_milestones() }
    }

    fn progress(&self) -> Result<f64> {
        if self.total == 0 {
            return Err(Error::Config("schedule needs a positive total iteration count".into()));
        }
        if self.t > self.total {
            return Err(Error::Config(format!("iteration {} beyond total {}", self.t, self.total)));
        }
        Ok(self.t as f64 / self.total as f64)
    }
}

/// `lambda_t = exp(log(lambda) * (1 - t / T))`, rising from `lambda` to 1.
pub fn lambda_schedule(state: &ScheduleState) -> Result<f64> {
    let progress = state.progress()?;
    if !(state.lambda > 0.0 && state.lambda <= 1.0) {
        return Err(Error::Config(format!("lambda must lie in (0, 1], got {}", state.lambda)));
    }
    Ok((state.lambda.ln() * (1.0 - progress)).exp())
}

/// Piecewise-constant value of the last milestone reached; before the first
/// milestone the first value applies.
pub fn gamma_schedule(state: &ScheduleState) -> Result<f64> {
    let progress = state.progress()?;
    let ms = &state.gamma_milestones;
    let Some(first) = ms.first() else {
        return Err(Error::Config("gamma schedule has no milestones".into()));
    };
    if ms.iter().any(|(f, _)| !(0.0..=1.0).contains(f)) {
        return Err(Error::Config("gamma milestone fractions must lie in [0, 1]".into()));
    }
    if ms.windows(2).any(|w| w[0].0 > w[1].0) {
        return Err(Error::Config("gamma milestones must be sorted by fraction".into()));
    }
    Ok(ms.iter().rev().find(|(f, _)| *f <= progress).unwrap_or(first).1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Base,
    Novel,
}

/// A loss term that is either computed or switched off by configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Term {
    Active(f64),
    Disabled,
}

impl Term {
    pub fn value(self) -> f64 {
        match self {
            Term::Active(v) => v,
            Term::Disabled => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub semantic: f64,
    pub visual: Term,
    /// Required in the novel stage.
    pub ced: Option<Term>,
    /// Required in the novel stage.
    pub adc: Option<Term>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub stage: Stage,
    pub semantic: f64,
    pub visual: f64,
    pub ced: f64,
    pub adc: f64,
    pub gamma_t: f64,
    pub lambda_t: f64,
    pub beta: f64,
    pub total: f64,
    /// Box regression has no counterpart without boxes.
    pub regression: Option<f64>,
}

/// Base: `L_S + gamma_t L_V`. Novel: that plus `lambda_t (L_CED + beta L_ADC)`.
pub fn total_loss(stage: Stage, parts: &LossParts, state: &ScheduleState) -> Result<LossReport> {
    let gamma_t = gamma_schedule(state)?;
    let visual = parts.visual.value();
    let base = parts.semantic + gamma_t * visual;
    let (ced, adc, lambda_t, total) = match stage {
        Stage::Base => (0.0, 0.0, 0.0, base),
        Stage::Novel => {
            let (Some(ced), Some(adc)) = (parts.ced, parts.adc) else {
                return Err(Error::Config("novel stage needs both CED and ADC terms (possibly disabled)".into()));
            };
            let lambda_t = lambda_schedule(state)?;
            let (ced, adc) = (ced.value(), adc.value());
            (ced, adc, lambda_t, base + lambda_t * (ced + state.beta * adc))
        }
    };
    Ok(LossReport {
        stage,
        semantic: parts.semantic,
        visual,
        ced,
        adc,
        gamma_t,
        lambda_t,
        beta: state.beta,
        total,
        regression: None,
    })
}

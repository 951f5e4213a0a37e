//! Attribution-gradient pseudo-unknown mining.
//!
//! The attribution map `G` is the gradient of the best known-class cosine
//! score with respect to the proposal's feature map. Its global aggregate
//! ranks proposals for pseudo-unknown selection, and its channel-averaged
//! local aggregate picks the abnormal positions fed to calibration.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{cosine_matrix, region_features, JointSpaceModel, ProposalKind, ProposalRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MiningVariant {
    /// Nonzero-count factor times absolute mass, per channel.
    #[default]
    Full,
    /// Absolute mass only.
    CountFree,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    /// Foreground selections per batch.
    pub k: usize,
    /// `fg : bg` sampling ratio; background quota is `k * bg / fg` (rounded down).
    pub fg_bg_ratio: (usize, usize),
    /// Abnormal local positions per pseudo-unknown.
    pub m: usize,
    pub variant: MiningVariant,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig { k: 3, fg_bg_ratio: (1, 3), m: 1, variant: MiningVariant::Full }
    }
}

impl MiningConfig {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("mining k must be at least 1".into()));
        }
        if self.fg_bg_ratio.0 == 0 || self.fg_bg_ratio.1 == 0 {
            return Err(Error::Config(format!("fg:bg ratio entries must be positive, got {:?}", self.fg_bg_ratio)));
        }
        if self.m == 0 || self.m > height * width {
            return Err(Error::Config(format!("m = {} must lie in 1..={}", self.m, height * width)));
        }
        Ok(())
    }

    pub fn foreground_quota(&self) -> usize {
        self.k
    }

    pub fn background_quota(&self) -> usize {
        self.k * self.fg_bg_ratio.1 / self.fg_bg_ratio.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    /// `H x W x C`
    pub gradient_map: Tensor,
    pub a_global: f64,
    /// `H x W`
    pub a_local: Tensor,
}

impl AttributionResult {
    pub fn from_gradient(gradient_map: Tensor, variant: MiningVariant) -> Result<Self> {
        let a_global = global_aggregate(&gradient_map, variant)?;
        let a_local = local_aggregate(&gradient_map)?;
        Ok(AttributionResult { gradient_map, a_global, a_local })
    }
}

/// Attribution maps for a batch of proposals, on one tape.
///
/// The score for each proposal is `max_{c < num_known} cos(R, T_c)`, the raw
/// cosine rather than the temperature-scaled logit. A proposal whose region
/// feature is exactly zero gets an all-zero map.
pub fn attribution_gradients(
    proposals: &[&ProposalRecord],
    model: &JointSpaceModel,
    num_known: usize,
) -> Result<Vec<Tensor>> {
    if num_known == 0 || num_known > model.bank.num_known() {
        return Err(Error::Config(format!("known-class count {num_known} outside 1..={}", model.bank.num_known())));
    }
    let Some(first) = proposals.first() else {
        return Ok(Vec::new());
    };
    let (h, w, c) = first.dims();
    if c != model.head.channels() {
        return Err(Error::Shape(format!("proposal has {c} channels, head expects {}", model.head.channels())));
    }

    // Degenerate proposals (R == 0) stay off the tape.
    let mut live = Vec::with_capacity(proposals.len());
    for (i, p) in proposals.iter().enumerate() {
        if p.dims() != (h, w, c) {
            return Err(Error::Shape(format!("proposal {} has dims {:?}", p.id, p.dims())));
        }
        let pooled = p.pooled();
        let wt = model.head.pool_linear();
        let nonzero = (0..wt.shape()[1]).any(|d| {
            let r: f64 = pooled.iter().enumerate().map(|(k, v)| v * wt.data()[k * wt.shape()[1] + d]).sum();
            r != 0.0
        });
        if nonzero {
            live.push(i);
        }
    }
    let mut maps = vec![Tensor::zeros(&[h, w, c]); proposals.len()];
    if live.is_empty() {
        return Ok(maps);
    }

    let mut tape = Tape::new();
    let mut data = Vec::with_capacity(live.len() * h * w * c);
    for &i in &live {
        data.extend_from_slice(proposals[i].feature_map.data());
    }
    let z = tape.leaf(Tensor::new(vec![live.len(), h, w, c], data)?);
    let vars = model.record(&mut tape, false);
    let pooled = tape.mean_pool(z)?;
    let region = region_features(&mut tape, pooled, &vars)?;
    let cos = cosine_matrix(&mut tape, region, vars.prompts)?;
    let classes = model.bank.num_classes();
    let picks: Vec<usize> = tape
        .value(cos)
        .data()
        .chunks_exact(classes)
        .enumerate()
        .map(|(row, scores)| {
            let best = (0..num_known).fold(0, |b, j| if scores[j] > scores[b] { j } else { b });
            row * classes + best
        })
        .collect();
    let n = picks.len();
    let best = tape.gather(cos, picks, &[n])?;
    let total = tape.sum(best);
    let grads = tape.backward(total)?;
    let g = grads.get(z).expect("feature leaf is registered");
    for (slot, chunk) in live.iter().zip(g.data().chunks_exact(h * w * c)) {
        maps[*slot] = Tensor::new(vec![h, w, c], chunk.to_vec())?;
    }
    Ok(maps)
}

pub fn attribution_gradient(proposal: &ProposalRecord, model: &JointSpaceModel, num_known: usize) -> Result<Tensor> {
    Ok(attribution_gradients(&[proposal], model, num_known)?.remove(0))
}

fn check_gradient_map(g: &Tensor) -> Result<(usize, usize, usize)> {
    if g.rank() != 3 {
        return Err(Error::Shape(format!("gradient map must be H x W x C, got {:?}", g.shape())));
    }
    if !g.is_finite() {
        return Err(Error::Domain("gradient map has non-finite entries".into()));
    }
    Ok((g.shape()[0], g.shape()[1], g.shape()[2]))
}

/// Channel-averaged product of nonzero count and absolute mass.
pub fn global_aggregate(g: &Tensor, variant: MiningVariant) -> Result<f64> {
    let (_, _, c) = check_gradient_map(g)?;
    let mut count = vec![0usize; c];
    let mut mass = vec![0.0; c];
    for pos in g.data().chunks_exact(c) {
        for (k, &v) in pos.iter().enumerate() {
            if v != 0.0 {
                count[k] += 1;
            }
            mass[k] += v.abs();
        }
    }
    let total: f64 = match variant {
        MiningVariant::Full => count.iter().zip(&mass).map(|(&n, &s)| n as f64 * s).sum(),
        MiningVariant::CountFree => mass.iter().sum(),
    };
    Ok(total / c as f64)
}

/// Per-position mean absolute gradient over channels, shaped `H x W`.
pub fn local_aggregate(g: &Tensor) -> Result<Tensor> {
    let (h, w, c) = check_gradient_map(g)?;
    let data = g.data().chunks_exact(c).map(|pos| pos.iter().map(|v| v.abs()).sum::<f64>() / c as f64).collect();
    Tensor::new(vec![h, w], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Index into the scored batch.
    pub index: usize,
    pub a_global: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoUnknownSet {
    pub foreground: Vec<Selection>,
    pub background: Vec<Selection>,
}

impl PseudoUnknownSet {
    pub fn len(&self) -> usize {
        self.foreground.len() + self.background.len()
    }

    pub fn is_empty(&self) -> bool {
        self.foreground.is_empty() && self.background.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ProposalKind, &Selection)> {
        self.foreground
            .iter()
            .map(|s| (ProposalKind::Foreground, s))
            .chain(self.background.iter().map(|s| (ProposalKind::Background, s)))
    }
}

fn top_by_score(mut pool: Vec<Selection>, quota: usize) -> Vec<Selection> {
    pool.sort_by(|a, b| b.a_global.total_cmp(&a.a_global).then(a.index.cmp(&b.index)));
    pool.truncate(quota);
    pool
}

/// Picks the `k` foreground and `k * bg / fg` background proposals with the
/// largest `a_global`. Ties go to the lower index; short pools are taken whole.
pub fn select_pseudo_unknown(scores: &[(f64, ProposalKind)], config: &MiningConfig) -> Result<PseudoUnknownSet> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("no proposals to mine".into()));
    }
    let pool = |kind: ProposalKind| {
        scores
            .iter()
            .enumerate()
            .filter(|(_, (_, k))| *k == kind)
            .map(|(index, (a, _))| Selection { index, a_global: *a })
            .collect::<Vec<_>>()
    };
    Ok(PseudoUnknownSet {
        foreground: top_by_score(pool(ProposalKind::Foreground), config.foreground_quota()),
        background: top_by_score(pool(ProposalKind::Background), config.background_quota()),
    })
}

/// The `m` positions with the largest local aggregate, ties in row-major order.
pub fn select_abnormal_local(a_local: &Tensor, m: usize) -> Result<Vec<(usize, usize)>> {
    if a_local.rank() != 2 {
        return Err(Error::Shape(format!("local map must be H x W, got {:?}", a_local.shape())));
    }
    let w = a_local.shape()[1];
    if m == 0 || m > a_local.numel() {
        return Err(Error::Config(format!("m = {m} must lie in 1..={}", a_local.numel())));
    }
    let mut order: Vec<usize> = (0..a_local.numel()).collect();
    order.sort_by(|&a, &b| a_local.data()[b].total_cmp(&a_local.data()[a]).then(a.cmp(&b)));
    Ok(order[..m].iter().map(|&i| (i / w, i % w)).collect())
}

/// Evaluation-time grouping by true label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Known,
    Background,
    Unknown,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Known, Group::Background, Group::Unknown];

    pub fn name(self) -> &'static str {
        match self {
            Group::Known => "known",
            Group::Background => "background",
            Group::Unknown => "unknown",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupedAttribution {
    pub group: Group,
    pub a_global: f64,
    pub a_local: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalThresholdCount {
    pub threshold: f64,
    pub count: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupDistribution {
    pub group: Group,
    pub proposals: usize,
    /// Empty when the group has no proposals.
    pub global_histogram: Vec<HistogramBin>,
    pub median_a_global: Option<f64>,
    pub local_counts: Vec<LocalThresholdCount>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub bins: usize,
    pub upper_edge: f64,
    pub groups: Vec<GroupDistribution>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Linear-interpolated quantile, `q` in `[0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}

/// Shared-bin histograms of `a_global` per group plus counts of `a_local`
/// entries strictly above each threshold. Bins are uniform over
/// `[0, max a_global]`; the last bin is closed.
pub fn distribution_report(
    items: &[GroupedAttribution],
    bins: usize,
    local_thresholds: &[f64],
) -> Result<DistributionReport> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let upper_edge = items.iter().map(|i| i.a_global).fold(0.0, f64::max);
    let width = upper_edge / bins as f64;
    let groups = Group::ALL
        .iter()
        .map(|&group| {
            let members: Vec<&GroupedAttribution> = items.iter().filter(|i| i.group == group).collect();
            let global_histogram = if members.is_empty() {
                Vec::new()
            } else {
                let mut counts = vec![0usize; bins];
                for m in &members {
                    let b = if width > 0.0 { ((m.a_global / width).floor() as usize).min(bins - 1) } else { 0 };
                    counts[b] += 1;
                }
                counts
                    .into_iter()
                    .enumerate()
                    .map(|(b, count)| HistogramBin { lower: b as f64 * width, upper: (b + 1) as f64 * width, count })
                    .collect()
            };
            let globals: Vec<f64> = members.iter().map(|m| m.a_global).collect();
            let total = members.iter().map(|m| m.a_local.len()).sum();
            let local_counts = local_thresholds
                .iter()
                .map(|&threshold| LocalThresholdCount {
                    threshold,
                    count: members.iter().flat_map(|m| m.a_local.iter()).filter(|&&v| v > threshold).count(),
                    total,
                })
                .collect();
            GroupDistribution {
                group,
                proposals: members.len(),
                global_histogram,
                median_a_global: median(&globals),
                local_counts,
            }
        })
        .collect();
    Ok(DistributionReport { bins, upper_edge, groups })
}

impl DistributionReport {
    pub fn group(&self, group: Group) -> &GroupDistribution {
        self.groups.iter().find(|g| g.group == group).expect("all groups present")
    }

    /// `group,bin_lower,bin_upper,count`
    pub fn write_histogram_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["group", "bin_lower", "bin_upper", "count"])?;
        for g in &self.groups {
            for bin in &g.global_histogram {
                w.write_record([
                    g.group.name().to_string(),
                    bin.lower.to_string(),
                    bin.upper.to_string(),
                    bin.count.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// `group,threshold,count,total`
    pub fn write_local_counts_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["group", "threshold", "count", "total"])?;
        for g in &self.groups {
            for c in &g.local_counts {
                w.write_record([
                    g.group.name().to_string(),
                    c.threshold.to_string(),
                    c.count.to_string(),
                    c.total.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Medians and outlier counts per group.
    pub fn write_summary_json(&self, path: &Path) -> Result<()> {
        let summary: Vec<serde_json::Value> = self
            .groups
            .iter()
            .map(|g| {
                serde_json::json!({
                    "group": g.group.name(),
                    "proposals": g.proposals,
                    "median_a_global": g.median_a_global,
                    "local_counts": g.local_counts,
                })
            })
            .collect();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(&mut f, &summary)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference, max_relative_error};
    use crate::model::{ModelDims, ProjectionHead, PromptBank};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_gradient(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, sparsity: f64) -> Tensor {
        let data = (0..h * w * c)
            .map(|_| if rng.random::<f64>() < sparsity { 0.0 } else { rng.sample::<f64, _>(StandardNormal) })
            .collect();
        Tensor::new(vec![h, w, c], data).unwrap()
    }

    /// Literal double-sum transcription of the global aggregate.
    fn global_oracle(g: &Tensor, count_free: bool) -> f64 {
        let (h, w, c) = (g.shape()[0], g.shape()[1], g.shape()[2]);
        let mut total = 0.0;
        for k in 0..c {
            let mut count = 0.0;
            let mut mass = 0.0;
            for i in 0..h {
                for j in 0..w {
                    let v = g.get(&[i, j, k]).unwrap();
                    if v != 0.0 {
                        count += 1.0;
                    }
                    mass += v.abs();
                }
            }
            total += if count_free { mass } else { count * mass };
        }
        total / c as f64
    }

    fn random_model(rng: &mut ChaCha8Rng, classes: usize) -> JointSpaceModel {
        let dims = ModelDims::default();
        let head = ProjectionHead::init(&dims, rng).unwrap();
        let data = (0..classes * dims.joint_dim).map(|_| rng.sample(StandardNormal)).collect();
        let bank = PromptBank::new(Tensor::matrix(classes, dims.joint_dim, data).unwrap(), 0.01).unwrap();
        JointSpaceModel::new(head, bank).unwrap()
    }

    fn random_proposal(rng: &mut ChaCha8Rng, id: usize) -> ProposalRecord {
        let map = Tensor::new(vec![4, 4, 16], (0..256).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        ProposalRecord::new(id, map, 0, ProposalKind::Foreground, 0.9, 0.8).unwrap()
    }

    #[test]
    fn global_aggregate_examples() {
        assert_eq!(global_aggregate(&Tensor::zeros(&[4, 4, 16]), MiningVariant::Full).unwrap(), 0.0);
        let mut g = Tensor::zeros(&[2, 2, 2]);
        g.data_mut()[0] = 0.5;
        assert_eq!(global_aggregate(&g, MiningVariant::Full).unwrap(), 0.25);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = random_gradient(&mut rng, 4, 4, 16, 0.3);
        assert_abs_diff_eq!(
            global_aggregate(&g, MiningVariant::Full).unwrap(),
            global_oracle(&g, false),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            global_aggregate(&g, MiningVariant::CountFree).unwrap(),
            global_oracle(&g, true),
            epsilon = 1e-12
        );
    }

    #[test]
    fn local_aggregate_examples() {
        let zero = local_aggregate(&Tensor::zeros(&[3, 3, 2])).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let mut g = Tensor::zeros(&[2, 2, 2]);
        g.data_mut()[6] = 0.4;
        g.data_mut()[7] = -0.2;
        let a = local_aggregate(&g).unwrap();
        assert_abs_diff_eq!(a.get(&[1, 1]).unwrap(), 0.3, epsilon = 1e-15);
        assert_eq!(a.get(&[0, 0]).unwrap(), 0.0);
    }

    #[test]
    fn attribution_zero_for_null_space_features() {
        // Head maps channel 1 to nothing; a map living only in channel 1 has R == 0.
        let head = ProjectionHead::new(
            Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap(),
            Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap(),
        )
        .unwrap();
        let bank = PromptBank::new(Tensor::matrix(3, 2, vec![1.0, 0.2, 0.3, 1.0, -1.0, 1.0]).unwrap(), 0.01).unwrap();
        let model = JointSpaceModel::new(head, bank).unwrap();
        let map = Tensor::new(vec![2, 2, 2], vec![0.0, 1.0, 0.0, -2.0, 0.0, 0.5, 0.0, 3.0]).unwrap();
        let p = ProposalRecord::new(0, map, 0, ProposalKind::Foreground, 1.0, 1.0).unwrap();
        let g = attribution_gradient(&p, &model, 1).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attribution_matches_hand_derivative_1x1x2() {
        // R = Z with the identity head; d cos(Z, T)/dZ = (T/|T| - cos Z/|Z|) / |Z|.
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let head = ProjectionHead::new(eye.clone(), eye).unwrap();
        let prompts = vec![1.0, 1.0, 0.0, -1.0, 5.0, 5.0, -3.0, 0.2];
        let bank = PromptBank::new(Tensor::matrix(4, 2, prompts).unwrap(), 0.01).unwrap();
        let model = JointSpaceModel::new(head, bank).unwrap();
        let z = [2.0, 1.0];
        let p = ProposalRecord::new(
            0,
            Tensor::new(vec![1, 1, 2], z.to_vec()).unwrap(),
            0,
            ProposalKind::Foreground,
            1.0,
            1.0,
        )
        .unwrap();
        // known classes are 0 and 1; class 0 (1,1) wins over (0,-1).
        let zn = 5f64.sqrt();
        let t = [1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt()];
        let cos = (z[0] * t[0] + z[1] * t[1]) / zn;
        let want = [(t[0] - cos * z[0] / zn) / zn, (t[1] - cos * z[1] / zn) / zn];
        let g = attribution_gradient(&p, &model, 2).unwrap();
        assert_abs_diff_eq!(g.data()[0], want[0], epsilon = 1e-14);
        assert_abs_diff_eq!(g.data()[1], want[1], epsilon = 1e-14);
    }

    #[test]
    fn attribution_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = random_model(&mut rng, 6);
        let p = random_proposal(&mut rng, 0);
        let g = attribution_gradient(&p, &model, 4).unwrap();
        let score = |m: &Tensor| -> Result<f64> {
            let r = crate::model::pool_project(m, &model.head)?;
            (0..4)
                .map(|c| crate::autodiff::cosine_similarity(&r, model.bank.embeddings().row(c)))
                .try_fold(f64::NEG_INFINITY, |b, s| Ok(b.max(s?)))
        };
        let numeric = finite_difference(&p.feature_map, 1e-6, score).unwrap();
        assert!(max_relative_error(&g, &numeric, 1e-6) < 1e-4);
    }

    #[test]
    fn batched_attribution_equals_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = random_model(&mut rng, 5);
        let ps: Vec<ProposalRecord> = (0..4).map(|i| random_proposal(&mut rng, i)).collect();
        let refs: Vec<&ProposalRecord> = ps.iter().collect();
        let batch = attribution_gradients(&refs, &model, 3).unwrap();
        for (p, g) in ps.iter().zip(&batch) {
            let single = attribution_gradient(p, &model, 3).unwrap();
            for (a, b) in g.data().iter().zip(single.data()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn temperature_scaling_leaves_selection_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model = random_model(&mut rng, 6);
        let ps: Vec<ProposalRecord> = (0..8).map(|i| random_proposal(&mut rng, i)).collect();
        let refs: Vec<&ProposalRecord> = ps.iter().collect();
        let maps = attribution_gradients(&refs, &model, 4).unwrap();
        let kinds = [ProposalKind::Foreground, ProposalKind::Background];
        let raw: Vec<(f64, ProposalKind)> = maps
            .iter()
            .enumerate()
            .map(|(i, g)| (global_aggregate(g, MiningVariant::Full).unwrap(), kinds[i % 2]))
            .collect();
        // Differentiating l = cos / tau multiplies every entry of G by 1 / tau.
        let scaled: Vec<(f64, ProposalKind)> = maps
            .iter()
            .enumerate()
            .map(|(i, g)| (global_aggregate(&g.map(|v| v / 0.01), MiningVariant::Full).unwrap(), kinds[i % 2]))
            .collect();
        let cfg = MiningConfig { k: 2, fg_bg_ratio: (1, 1), ..MiningConfig::default() };
        let a = select_pseudo_unknown(&raw, &cfg).unwrap();
        let b = select_pseudo_unknown(&scaled, &cfg).unwrap();
        let idx = |s: &PseudoUnknownSet| s.iter().map(|(_, x)| x.index).collect::<Vec<_>>();
        assert_eq!(idx(&a), idx(&b));
    }

    #[test]
    fn selection_examples() {
        use ProposalKind::{Background as B, Foreground as F};
        // fg = [0.9, 0.1, 0.5] at batch indices 0..3, bg = [0.3, 0.7, 0.2, 0.4] at 3..7.
        let scores = [(0.9, F), (0.1, F), (0.5, F), (0.3, B), (0.7, B), (0.2, B), (0.4, B)];
        let cfg = MiningConfig { k: 1, fg_bg_ratio: (1, 2), ..MiningConfig::default() };
        let s = select_pseudo_unknown(&scores, &cfg).unwrap();
        assert_eq!(s.foreground.iter().map(|x| x.index).collect::<Vec<_>>(), vec![0]);
        // bg-pool positions 1 and 3
        assert_eq!(s.background.iter().map(|x| x.index).collect::<Vec<_>>(), vec![4, 6]);

        let ties = [(0.5, F), (0.5, F), (0.5, F), (0.5, B), (0.5, B)];
        let s = select_pseudo_unknown(&ties, &cfg).unwrap();
        assert_eq!(s.foreground[0].index, 0);
        assert_eq!(s.background.iter().map(|x| x.index).collect::<Vec<_>>(), vec![3, 4]);

        let big = MiningConfig { k: 10, ..MiningConfig::default() };
        let s = select_pseudo_unknown(&scores, &big).unwrap();
        assert_eq!(s.foreground.len(), 3);
        assert_eq!(s.background.len(), 4);

        assert!(matches!(select_pseudo_unknown(&[], &cfg), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn abnormal_local_examples() {
        let mut a = Tensor::zeros(&[3, 3]);
        a.data_mut()[5] = 2.0;
        assert_eq!(select_abnormal_local(&a, 1).unwrap(), vec![(1, 2)]);
        let uniform = Tensor::filled(&[3, 3], 0.7);
        assert_eq!(select_abnormal_local(&uniform, 2).unwrap(), vec![(0, 0), (0, 1)]);
        assert!(matches!(select_abnormal_local(&uniform, 10), Err(Error::Config(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let r = Tensor::new(vec![4, 4], (0..16).map(|_| rng.random::<f64>()).collect()).unwrap();
        let mut sorted: Vec<(f64, usize)> = r.data().iter().cloned().zip(0..).collect();
        sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let want: Vec<(usize, usize)> = sorted[..3].iter().map(|&(_, i)| (i / 4, i % 4)).collect();
        assert_eq!(select_abnormal_local(&r, 3).unwrap(), want);
    }

    #[test]
    fn config_validation() {
        assert!(MiningConfig::default().validate(4, 4).is_ok());
        assert_eq!(MiningConfig::default().background_quota(), 9);
        let bad = MiningConfig { m: 17, ..MiningConfig::default() };
        assert!(matches!(bad.validate(4, 4), Err(Error::Config(_))));
        let bad = MiningConfig { k: 0, ..MiningConfig::default() };
        assert!(bad.validate(4, 4).is_err());
    }

    #[test]
    fn distribution_report_hand_binning() {
        let item = |group, a_global, a_local: Vec<f64>| GroupedAttribution { group, a_global, a_local };
        let items = vec![
            item(Group::Known, 0.1, vec![0.0, 0.2]),
            item(Group::Known, 0.3, vec![0.5, 0.1]),
            item(Group::Background, 0.55, vec![0.3, 0.3]),
            item(Group::Unknown, 0.8, vec![0.6, 0.9]),
            item(Group::Unknown, 0.9, vec![0.7, 0.0]),
            item(Group::Unknown, 1.0, vec![0.1, 0.4]),
        ];
        // 4 bins over [0, 1]: [0,.25) [.25,.5) [.5,.75) [.75,1]
        let r = distribution_report(&items, 4, &[0.25, 0.5]).unwrap();
        let counts = |g: Group| r.group(g).global_histogram.iter().map(|b| b.count).collect::<Vec<_>>();
        assert_eq!(counts(Group::Known), vec![1, 1, 0, 0]);
        assert_eq!(counts(Group::Background), vec![0, 0, 1, 0]);
        assert_eq!(counts(Group::Unknown), vec![0, 0, 0, 3]);
        let lc = &r.group(Group::Unknown).local_counts;
        assert_eq!((lc[0].count, lc[1].count, lc[0].total), (4, 3, 6));
        assert_eq!(r.group(Group::Known).local_counts[1].count, 0);
        assert_eq!(r.group(Group::Known).median_a_global, Some(0.2));

        let only_known = distribution_report(&items[..2], 4, &[]).unwrap();
        assert!(only_known.group(Group::Unknown).global_histogram.is_empty());
        assert_eq!(only_known.group(Group::Unknown).median_a_global, None);
    }

    proptest! {
        #[test]
        fn global_aggregate_is_permutation_invariant(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_gradient(&mut rng, 3, 3, 4, 0.4);
            let base = global_aggregate(&g, MiningVariant::Full).unwrap();
            // reverse spatial order and rotate channels
            let (h, w, c) = (3, 3, 4);
            let mut perm = vec![0.0; h * w * c];
            for p in 0..h * w {
                for k in 0..c {
                    perm[(h * w - 1 - p) * c + (k + 1) % c] = g.data()[p * c + k];
                }
            }
            let pg = Tensor::new(vec![h, w, c], perm).unwrap();
            prop_assert!((global_aggregate(&pg, MiningVariant::Full).unwrap() - base).abs() < 1e-12);
        }

        #[test]
        fn full_dominates_count_free(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_gradient(&mut rng, 3, 3, 4, 0.5);
            let full = global_aggregate(&g, MiningVariant::Full).unwrap();
            let free = global_aggregate(&g, MiningVariant::CountFree).unwrap();
            prop_assert!(full >= free - 1e-15);
            // local sums reproduce the count-free mass
            let local_sum: f64 = local_aggregate(&g).unwrap().data().iter().sum();
            prop_assert!((local_sum - free).abs() < 1e-12);
        }

        #[test]
        fn selection_stable_under_smaller_appends(seed in 0u64..200, extra in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let kinds = [ProposalKind::Foreground, ProposalKind::Background];
            let mut scores: Vec<(f64, ProposalKind)> =
                (0..12).map(|i| (rng.random_range(1.0..2.0), kinds[i % 2])).collect();
            let cfg = MiningConfig { k: 2, fg_bg_ratio: (1, 2), ..MiningConfig::default() };
            let before = select_pseudo_unknown(&scores, &cfg).unwrap();
            for i in 0..extra {
                scores.push((rng.random_range(0.0..0.5), kinds[i % 2]));
            }
            let after = select_pseudo_unknown(&scores, &cfg).unwrap();
            prop_assert_eq!(before, after);
        }
    }

    #[test]
    fn equality_when_single_nonzero_per_channel() {
        let mut g = Tensor::zeros(&[2, 2, 3]);
        g.data_mut()[0] = 0.3; // channel 0
        g.data_mut()[4] = -1.2; // channel 1
        let full = global_aggregate(&g, MiningVariant::Full).unwrap();
        let free = global_aggregate(&g, MiningVariant::CountFree).unwrap();
        assert_eq!(full, free);
        g.data_mut()[3] = 0.1; // second nonzero in channel 0
        assert!(
            global_aggregate(&g, MiningVariant::Full).unwrap()
                > global_aggregate(&g, MiningVariant::CountFree).unwrap()
        );
    }
}

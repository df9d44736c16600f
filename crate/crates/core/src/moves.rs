//! Birth, merge and shuffle moves that change the number and order of active
//! clusters. Every proposal is judged by the ELBO and recorded in a
//! [`MoveRecord`].

use std::collections::HashSet;
use std::io::Write;

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dpmm::{
    elbo, global_step, local_step, summarize, ComponentId, DpmmModel, DpmmPrior,
    Responsibilities, SufficientStats,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoveConfig {
    pub births_enabled: bool,
    pub merges_enabled: bool,
    pub shuffle_enabled: bool,
    /// Minimum subsample size for a birth proposal.
    pub min_atoms_new_comp: usize,
    /// Minimum mass of a cluster before its members may seed a targeted birth.
    pub min_atoms_target_comp: usize,
    /// Proposed clusters with less expected mass are dropped before acceptance.
    pub min_atoms_retain_comp: usize,
    /// Initial cluster count of the fresh model fit to a birth subsample.
    pub fresh_k: usize,
    pub fresh_sweeps: usize,
    /// Coordinate-ascent sweeps on the subsample when scoring a birth.
    pub birth_refine_sweeps: usize,
    pub poor_fit_threshold: f64,
    /// Maximum number of rows kept for a birth subsample.
    pub buffer_cap: usize,
    pub max_merge_candidates: usize,
}

impl Default for MoveConfig {
    fn default() -> Self {
        Self {
            births_enabled: true,
            merges_enabled: true,
            shuffle_enabled: false,
            min_atoms_new_comp: 80,
            min_atoms_target_comp: 100,
            min_atoms_retain_comp: 100,
            fresh_k: 5,
            fresh_sweeps: 10,
            birth_refine_sweeps: 3,
            poor_fit_threshold: 0.5,
            buffer_cap: 2000,
            max_merge_candidates: 50,
        }
    }
}

impl MoveConfig {
    /// All moves switched off.
    pub fn disabled() -> Self {
        Self {
            births_enabled: false,
            merges_enabled: false,
            shuffle_enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_atoms_new_comp == 0
            || self.min_atoms_target_comp == 0
            || self.min_atoms_retain_comp == 0
        {
            return Err(Error::Config("move atom minima must be positive".into()));
        }
        if self.fresh_k == 0 {
            return Err(Error::Config("fresh_k must be positive".into()));
        }
        if !(self.poor_fit_threshold > 0.0 && self.poor_fit_threshold < 1.0) {
            return Err(Error::Config(format!(
                "poor_fit_threshold must lie in (0, 1), got {}",
                self.poor_fit_threshold
            )));
        }
        if self.buffer_cap < self.min_atoms_new_comp {
            return Err(Error::Config(
                "buffer_cap must be at least min_atoms_new_comp".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MoveKind {
    Birth,
    Merge,
    Shuffle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoveRecord {
    pub kind: MoveKind,
    pub elbo_before: f64,
    pub elbo_after: f64,
    pub accepted: bool,
    pub clusters_involved: Vec<ComponentId>,
}

impl MoveRecord {
    fn rejected(kind: MoveKind, elbo: f64, clusters_involved: Vec<ComponentId>) -> Self {
        Self {
            kind,
            elbo_before: elbo,
            elbo_after: elbo,
            accepted: false,
            clusters_involved,
        }
    }
}

/// Append-only history of move proposals.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MoveLog {
    pub records: Vec<MoveRecord>,
}

impl MoveLog {
    pub fn push(&mut self, record: MoveRecord) {
        self.records.push(record);
    }

    pub fn extend(&mut self, records: impl IntoIterator<Item = MoveRecord>) {
        self.records.extend(records);
    }

    pub fn accepted(&self) -> impl Iterator<Item = &MoveRecord> {
        self.records.iter().filter(|r| r.accepted)
    }

    /// One JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Evenly strided subset of `rows`, at most `cap` long.
fn stride_cap(rows: Vec<usize>, cap: usize) -> Vec<usize> {
    if rows.len() <= cap {
        return rows;
    }
    let step = rows.len() as f64 / cap as f64;
    (0..cap).map(|i| rows[(i as f64 * step) as usize]).collect()
}

fn gather(batch: ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    batch.select(Axis(0), rows)
}

/// Rows that no single cluster claims with probability ≥ `poor_fit_threshold`.
/// Empty when fewer than `min_atoms_new_comp` rows qualify.
pub fn collect_poor_fits(
    batch: ArrayView2<f64>,
    resp: &Responsibilities,
    cfg: &MoveConfig,
) -> Array2<f64> {
    let rows: Vec<usize> = resp
        .max_per_row()
        .into_iter()
        .enumerate()
        .filter(|(_, m)| *m < cfg.poor_fit_threshold)
        .map(|(i, _)| i)
        .collect();
    if rows.len() < cfg.min_atoms_new_comp || batch.nrows() != resp.rows() {
        return Array2::zeros((0, batch.ncols()));
    }
    gather(batch, &stride_cap(rows, cfg.buffer_cap))
}

/// Rows that cluster `target` claims with probability ≥ ½, for a targeted
/// birth. Empty when the cluster is lighter than `min_atoms_target_comp` or
/// fewer than `min_atoms_new_comp` rows qualify.
pub fn collect_cluster_members(
    batch: ArrayView2<f64>,
    resp: &Responsibilities,
    target: usize,
    cfg: &MoveConfig,
) -> Array2<f64> {
    let empty = Array2::zeros((0, batch.ncols()));
    if target >= resp.k() || batch.nrows() != resp.rows() {
        return empty;
    }
    let mass: f64 = resp.r.column(target).sum();
    if mass < cfg.min_atoms_target_comp as f64 {
        return empty;
    }
    let rows: Vec<usize> = resp
        .r
        .column(target)
        .iter()
        .enumerate()
        .filter(|(_, &r)| r >= 0.5)
        .map(|(i, _)| i)
        .collect();
    if rows.len() < cfg.min_atoms_new_comp {
        return empty;
    }
    gather(batch, &stride_cap(rows, cfg.buffer_cap))
}

/// k-means++ seeding followed by a few Lloyd iterations; returns hard labels.
fn kmeans_labels(data: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = data.nrows();
    let sq = |a: usize, c: &ndarray::Array1<f64>| -> f64 {
        data.row(a)
            .iter()
            .zip(c.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum()
    };
    let mut centers = vec![data.row(rng.random_range(0..n)).to_owned()];
    let mut dist: Vec<f64> = (0..n).map(|i| sq(i, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &d) in dist.iter().enumerate() {
            if target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        let c = data.row(pick).to_owned();
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq(i, &c));
        }
        centers.push(c);
    }
    let mut labels = vec![0; n];
    for _ in 0..5 {
        for (i, label) in labels.iter_mut().enumerate() {
            *label = (0..centers.len())
                .min_by(|&a, &b| sq(i, &centers[a]).total_cmp(&sq(i, &centers[b])))
                .unwrap_or(0);
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            if !members.is_empty() {
                *center = data.select(Axis(0), &members).mean_axis(Axis(0)).unwrap();
            }
        }
    }
    labels
}

fn one_hot(labels: &[usize], k: usize) -> Responsibilities {
    let mut r = Array2::zeros((labels.len(), k));
    for (i, &l) in labels.iter().enumerate() {
        r[(i, l)] = 1.0;
    }
    Responsibilities { r }
}

/// Fit an independent DPMM with up to `fresh_k` clusters to `data`, followed
/// by merges. Clusters left with less than one unit of mass are discarded.
pub fn fit_fresh_model(
    data: ArrayView2<f64>,
    prior: &DpmmPrior,
    cfg: &MoveConfig,
    seed: u64,
) -> Result<(DpmmModel, SufficientStats)> {
    if data.nrows() == 0 {
        return Err(Error::Contract("fresh model needs data".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = cfg.fresh_k.min(data.nrows());
    let labels = kmeans_labels(data, k, &mut rng);
    let mut stats = summarize(data, &one_hot(&labels, k))?;
    let mut model = global_step(&DpmmModel::with_components(prior.clone(), k)?, &stats)?;
    for _ in 0..cfg.fresh_sweeps {
        let resp = local_step(data, &model)?;
        stats = summarize(data, &resp)?;
        model = global_step(&model, &stats)?;
    }
    // a fused cluster cannot merge again in the same pass, so alternate
    // sweeps and merge passes until nothing fuses
    loop {
        let merged = merge_move(&model, &stats, cfg)?;
        if !merged.records.iter().any(|r| r.accepted) {
            break;
        }
        model = merged.model;
        let resp = local_step(data, &model)?;
        stats = summarize(data, &resp)?;
        model = global_step(&model, &stats)?;
    }
    let keep: Vec<usize> = (0..model.k()).filter(|&c| stats.n_hat[c] >= 1.0).collect();
    if keep.is_empty() {
        return Ok((model, stats));
    }
    Ok((model.select_components(&keep), stats.select(&keep)))
}

/// Run `sweeps` local/global passes of `model` over `subsample` with
/// `base` statistics held fixed; returns the final model, stats and ELBO.
fn score_with_subsample(
    model: &DpmmModel,
    subsample: ArrayView2<f64>,
    base: &SufficientStats,
    sweeps: usize,
) -> Result<(DpmmModel, SufficientStats, f64)> {
    let mut m = model.clone();
    let mut stats = base.clone();
    for _ in 0..sweeps.max(1) {
        let resp = local_step(subsample, &m)?;
        stats = base.clone();
        stats.add_assign(&summarize(subsample, &resp)?)?;
        m = global_step(&m, &stats)?;
    }
    let e = elbo(&m, &stats)?;
    Ok((m, stats, e))
}

pub struct BirthOutcome {
    pub model: DpmmModel,
    pub record: MoveRecord,
}

/// Propose new clusters for `subsample`.
///
/// A fresh model is fit to the subsample and its clusters are appended to
/// `model`. Both the current and the expanded model then absorb the subsample
/// on top of `full_stats`; the expansion is kept only if its ELBO is higher.
/// Proposed clusters that end up with less than `min_atoms_retain_comp` mass
/// are dropped before the comparison.
pub fn birth_move(
    model: &DpmmModel,
    subsample: ArrayView2<f64>,
    full_stats: &SufficientStats,
    cfg: &MoveConfig,
    seed: u64,
) -> Result<BirthOutcome> {
    let current = global_step(model, full_stats)?;
    let base_elbo = elbo(&current, full_stats)?;
    if subsample.nrows() == 0 || subsample.nrows() < cfg.min_atoms_new_comp {
        return Ok(BirthOutcome {
            model: model.clone(),
            record: MoveRecord::rejected(MoveKind::Birth, base_elbo, Vec::new()),
        });
    }
    if subsample.ncols() != model.dim() {
        return Err(Error::Shape(format!(
            "subsample has {} columns, model dimension is {}",
            subsample.ncols(),
            model.dim()
        )));
    }

    let (_, _, elbo_before) =
        score_with_subsample(&current, subsample, full_stats, cfg.birth_refine_sweeps)?;

    let (fresh, fresh_stats) = fit_fresh_model(subsample, &model.prior, cfg, seed)?;
    let k_old = current.k();
    let mut shell = current.clone();
    let new_ids = shell.append_components(fresh.k());
    // existing clusters keep their data; the fresh clusters take the subsample
    let mut seeded = full_stats.pad(fresh.k());
    for o in 0..fresh.k() {
        seeded.n_hat[k_old + o] = fresh_stats.n_hat[o];
        seeded.s1.row_mut(k_old + o).assign(&fresh_stats.s1.row(o));
        seeded.s2.row_mut(k_old + o).assign(&fresh_stats.s2.row(o));
    }
    let expanded = global_step(&shell, &seeded)?;

    let resp = local_step(subsample, &expanded)?;
    let sub_stats = summarize(subsample, &resp)?;
    let mut keep: Vec<usize> = (0..k_old).collect();
    keep.extend(
        (k_old..expanded.k()).filter(|&c| sub_stats.n_hat[c] >= cfg.min_atoms_retain_comp as f64),
    );
    if keep.len() == k_old {
        return Ok(BirthOutcome {
            model: model.clone(),
            record: MoveRecord::rejected(MoveKind::Birth, elbo_before, new_ids),
        });
    }
    let proposal = expanded.select_components(&keep);
    let born: Vec<ComponentId> = proposal.component_ids[k_old..].to_vec();
    let padded = full_stats.pad(proposal.k() - k_old);
    let (proposal, _, elbo_after) =
        score_with_subsample(&proposal, subsample, &padded, cfg.birth_refine_sweeps)?;

    let accepted = elbo_after > elbo_before;
    let record = MoveRecord {
        kind: MoveKind::Birth,
        elbo_before,
        elbo_after,
        accepted,
        clusters_involved: born,
    };
    Ok(BirthOutcome {
        model: if accepted { proposal } else { model.clone() },
        record,
    })
}

pub struct MergeOutcome {
    pub model: DpmmModel,
    pub stats: SufficientStats,
    pub records: Vec<MoveRecord>,
}

fn cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>, origin: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for j in 0..a.len() {
        let x = a[j] - origin[j];
        let y = b[j] - origin[j];
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb).sqrt()
    }
}

/// Candidate pairs `(a, b)`, `a < b`, best first: cosine similarity of the
/// posterior means, boosted by how much the pair's responsibilities overlap.
fn merge_candidates(
    model: &DpmmModel,
    stats: &SufficientStats,
    frozen: &HashSet<ComponentId>,
    limit: usize,
) -> Vec<(usize, usize)> {
    let k = model.k();
    let mut scored = Vec::new();
    for a in 0..k {
        for b in a + 1..k {
            if frozen.contains(&model.component_ids[a]) || frozen.contains(&model.component_ids[b]) {
                continue;
            }
            let delta = stats.pair_entropy_delta[(a, b)];
            if !delta.is_finite() {
                continue;
            }
            let lighter = stats.n_hat[a].min(stats.n_hat[b]).max(1e-12);
            let overlap = (-delta / lighter / std::f64::consts::LN_2).clamp(0.0, 1.0);
            let sim = cosine(model.nw.mu_hat.row(a), model.nw.mu_hat.row(b), &model.prior.mu0);
            scored.push(((sim + 1.0) * (1.0 + overlap), a, b));
        }
    }
    scored.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    scored.into_iter().take(limit).map(|(_, a, b)| (a, b)).collect()
}

/// Repeatedly fuse the best ELBO-improving pair of clusters. The survivor
/// keeps the lower index and its identifier; a fused cluster is not
/// considered again within the same call.
pub fn merge_move(
    model: &DpmmModel,
    full_stats: &SufficientStats,
    cfg: &MoveConfig,
) -> Result<MergeOutcome> {
    let mut current = global_step(model, full_stats)?;
    let mut stats = full_stats.clone();
    let mut records = Vec::new();
    if model.k() < 2 {
        return Ok(MergeOutcome {
            model: model.clone(),
            stats,
            records,
        });
    }
    let mut current_elbo = elbo(&current, &stats)?;
    let mut frozen = HashSet::new();
    loop {
        let mut accepted_any = false;
        for (a, b) in merge_candidates(&current, &stats, &frozen, cfg.max_merge_candidates) {
            let Some(merged_stats) = stats.merged(a, b) else {
                continue;
            };
            let keep: Vec<usize> = (0..current.k()).filter(|&c| c != b).collect();
            let merged = global_step(&current.select_components(&keep), &merged_stats)?;
            let merged_elbo = elbo(&merged, &merged_stats)?;
            let ids = vec![current.component_ids[a], current.component_ids[b]];
            let accepted = merged_elbo >= current_elbo;
            records.push(MoveRecord {
                kind: MoveKind::Merge,
                elbo_before: current_elbo,
                elbo_after: merged_elbo,
                accepted,
                clusters_involved: ids.clone(),
            });
            if accepted {
                frozen.insert(ids[0]);
                current = merged;
                stats = merged_stats;
                current_elbo = merged_elbo;
                accepted_any = true;
                break;
            }
        }
        if !accepted_any || current.k() < 2 {
            break;
        }
    }
    let model = if records.iter().any(|r| r.accepted) {
        current
    } else {
        model.clone()
    };
    Ok(MergeOutcome {
        model,
        stats,
        records,
    })
}

pub struct ShuffleOutcome {
    pub model: DpmmModel,
    pub stats: SufficientStats,
    /// `order[new_index] = old_index`.
    pub order: Vec<usize>,
    pub record: MoveRecord,
}

/// Reorder clusters by descending expected mass and refresh the global
/// parameters. The reordering is kept only if it does not lower the ELBO.
pub fn shuffle_move(model: &DpmmModel, full_stats: &SufficientStats) -> Result<ShuffleOutcome> {
    let current = global_step(model, full_stats)?;
    let elbo_before = elbo(&current, full_stats)?;
    let mut order: Vec<usize> = (0..model.k()).collect();
    order.sort_by(|&a, &b| full_stats.n_hat[b].total_cmp(&full_stats.n_hat[a]));
    let stats = full_stats.select(&order);
    let shuffled = global_step(&model.select_components(&order), &stats)?;
    let elbo_after = elbo(&shuffled, &stats)?;
    let accepted = elbo_after >= elbo_before;
    let record = MoveRecord {
        kind: MoveKind::Shuffle,
        elbo_before,
        elbo_after,
        accepted,
        clusters_involved: shuffled.component_ids.clone(),
    };
    if accepted {
        Ok(ShuffleOutcome {
            model: shuffled,
            stats,
            order,
            record,
        })
    } else {
        Ok(ShuffleOutcome {
            model: current,
            stats: full_stats.clone(),
            order: (0..model.k()).collect(),
            record,
        })
    }
}

//! The alternating training loop: VAE epochs fill a latent buffer, then the
//! DPMM is refit on that buffer with birth, merge and shuffle moves.

use std::io::Write;
use std::ops::Range;
use std::time::Instant;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{apply_schedule, Dataset, IncrementalSchedule};
use crate::dpmm::{
    elbo, global_step, init_model, local_step, summarize, ComponentId, DpmmModel, DpmmPrior,
    Responsibilities, SufficientStats,
};
use crate::error::{Error, Result};
use crate::eval::{clustering_accuracy, LabeledAssignment};
use crate::moves::{
    birth_move, collect_cluster_members, collect_poor_fits, merge_move, shuffle_move, MoveConfig,
    MoveLog, MoveRecord,
};
use crate::vae::{encode_batch, train_step, LossParts, VaeConfig, VaeParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub alpha: f64,
    pub lambda_scale: f64,
    pub s_f: f64,
    /// Defaults to D + 2.
    pub nu: Option<f64>,
    /// Defaults to the origin.
    pub mu0: Option<Vec<f64>>,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lambda_scale: 1e-4,
            s_f: 0.1,
            nu: None,
            mu0: None,
        }
    }
}

impl PriorConfig {
    pub fn build(&self, dim: usize) -> Result<DpmmPrior> {
        let nu = self.nu.unwrap_or(dim as f64 + 2.0);
        let mut prior = DpmmPrior::new(dim, self.alpha, self.lambda_scale, self.s_f, nu)?;
        if let Some(mu0) = &self.mu0 {
            if mu0.len() != dim {
                return Err(Error::Config(format!(
                    "mu0 has {} entries for dimension {dim}",
                    mu0.len()
                )));
            }
            prior.mu0 = mu0.clone();
        }
        prior.validate()?;
        Ok(prior)
    }
}

/// Settings of one DPMM refit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpdateConfig {
    /// Coordinate-ascent steps T per update.
    pub steps: usize,
    /// Rows per memoized batch summary.
    pub memo_batch_size: usize,
    pub moves: MoveConfig,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self {
            steps: 5,
            memo_batch_size: 1000,
            moves: MoveConfig::default(),
        }
    }
}

impl UpdateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.memo_batch_size == 0 {
            return Err(Error::Config("memo_batch_size must be positive".into()));
        }
        self.moves.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DivaConfig {
    pub vae: VaeConfig,
    pub prior: PriorConfig,
    pub update: UpdateConfig,
    pub max_epochs: usize,
    pub seed: u64,
    /// When false the `seconds` metric is left empty so that runs are
    /// byte-for-byte reproducible.
    pub record_timing: bool,
}

impl Default for DivaConfig {
    fn default() -> Self {
        Self {
            vae: VaeConfig::default(),
            prior: PriorConfig::default(),
            update: UpdateConfig::default(),
            max_epochs: 20,
            seed: 0,
            record_timing: true,
        }
    }
}

impl DivaConfig {
    pub fn validate(&self) -> Result<()> {
        self.vae.validate()?;
        self.prior.build(self.vae.latent_dim)?;
        self.update.validate()
    }
}

/// Latent samples gathered during an epoch, with the dataset rows they came from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatentBuffer {
    values: Vec<f64>,
    dim: usize,
    pub source_indices: Vec<usize>,
}

impl LatentBuffer {
    pub fn new(dim: usize) -> Self {
        Self {
            values: Vec::new(),
            dim,
            source_indices: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.source_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_indices.is_empty()
    }

    pub fn push(&mut self, z: ArrayView2<f64>, sources: &[usize]) -> Result<()> {
        if z.ncols() != self.dim || z.nrows() != sources.len() {
            return Err(Error::Shape(format!(
                "buffer of width {} cannot take {:?} with {} sources",
                self.dim,
                z.dim(),
                sources.len()
            )));
        }
        self.values.extend(z.iter());
        self.source_indices.extend_from_slice(sources);
        Ok(())
    }

    pub fn rows(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.len(), self.dim), &self.values).expect("consistent buffer")
    }

    pub fn clear(&mut self) {
        self.values.clear();
        self.source_indices.clear();
    }
}

/// Per-step ELBO within one update; `moved` marks steps with an accepted move.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub elbo: f64,
    pub moved: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateReport {
    pub ids_before: Vec<ComponentId>,
    pub ids_after: Vec<ComponentId>,
    pub records: Vec<MoveRecord>,
    /// ELBO after each global step, before that step's moves.
    pub trace: Vec<StepTrace>,
    /// ELBO of the final model under fresh responsibilities.
    pub elbo: f64,
    /// Most responsible component of every buffer row.
    pub assignments: Vec<ComponentId>,
    pub source_indices: Vec<usize>,
}

impl UpdateReport {
    /// Identifiers taking part in an accepted birth or merge.
    pub fn touched_ids(&self) -> Vec<ComponentId> {
        let mut ids: Vec<ComponentId> = self
            .records
            .iter()
            .filter(|r| r.accepted && r.kind != crate::moves::MoveKind::Shuffle)
            .flat_map(|r| r.clusters_involved.iter().copied())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

fn batch_ranges(n: usize, size: usize) -> Vec<Range<usize>> {
    (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect()
}

/// Local step over every memoized batch; returns the responsibilities and
/// the summed statistics.
fn sweep(model: &DpmmModel, data: ArrayView2<f64>, ranges: &[Range<usize>]) -> Result<(Responsibilities, SufficientStats)> {
    let mut parts = Vec::with_capacity(ranges.len());
    let mut memo = Vec::with_capacity(ranges.len());
    for r in ranges {
        let batch = data.slice(ndarray::s![r.clone(), ..]);
        let resp = local_step(batch, model)?;
        memo.push(summarize(batch, &resp)?);
        parts.push(resp.r);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let r = concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    Ok((Responsibilities { r }, SufficientStats::sum(&memo)?))
}

/// Outcome of [`refit_dpmm`].
#[derive(Debug, Clone)]
pub struct Refit {
    pub model: DpmmModel,
    pub report: UpdateReport,
}

/// Birth subsamples in the order they are tried: poorly explained rows if
/// there are enough of them, then the members of a heavy cluster picked
/// round-robin by mass rank, tagged with that cluster's index.
fn birth_subsamples(
    data: ArrayView2<f64>,
    resp: &Responsibilities,
    stats: &SufficientStats,
    moves: &MoveConfig,
    cursor: &mut usize,
) -> Vec<(Array2<f64>, Option<usize>)> {
    let mut out = Vec::new();
    let poor = collect_poor_fits(data, resp, moves);
    if poor.nrows() > 0 {
        out.push((poor, None));
    }
    let mut order: Vec<usize> = (0..stats.k()).collect();
    order.sort_by(|&a, &b| stats.n_hat[b].total_cmp(&stats.n_hat[a]).then(a.cmp(&b)));
    let heavy: Vec<usize> = order
        .into_iter()
        .filter(|&c| stats.n_hat[c] >= moves.min_atoms_target_comp as f64)
        .collect();
    if !heavy.is_empty() {
        let target = heavy[*cursor % heavy.len()];
        *cursor += 1;
        let members = collect_cluster_members(data, resp, target, moves);
        if members.nrows() > 0 {
            out.push((members, Some(target)));
        }
    }
    out
}

/// Refit `model` to `data` for `cfg.steps` memoized coordinate-ascent steps,
/// each followed by a birth attempt, merges and (optionally) a shuffle.
pub fn refit_dpmm(
    model: &DpmmModel,
    data: ArrayView2<f64>,
    cfg: &UpdateConfig,
    rng: &mut ChaCha8Rng,
    birth_cursor: &mut usize,
) -> Result<Refit> {
    if data.nrows() == 0 {
        return Err(Error::Contract("DPMM refit on no data".into()));
    }
    let ranges = batch_ranges(data.nrows(), cfg.memo_batch_size);
    let moves = &cfg.moves;
    let ids_before = model.component_ids.clone();
    let mut model = model.clone();
    let mut records = Vec::new();
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let (resp, mut stats) = sweep(&model, data, &ranges)?;
        model = global_step(&model, &stats)?;
        let step_elbo = elbo(&model, &stats)?;
        let mut moved = false;

        if moves.births_enabled {
            let seed = rng.random::<u64>();
            for (sub, target) in birth_subsamples(data, &resp, &stats, moves, birth_cursor) {
                let mut out = birth_move(&model, sub.view(), &stats, moves, seed)?;
                if let Some(t) = target {
                    // the parent gives up members, so it takes part in the move
                    out.record.clusters_involved.insert(0, model.component_ids[t]);
                }
                let accepted = out.record.accepted;
                records.push(out.record);
                if accepted {
                    model = out.model;
                    stats = sweep(&model, data, &ranges)?.1;
                    model = global_step(&model, &stats)?;
                    moved = true;
                    break;
                }
            }
        }
        if moves.merges_enabled && model.k() >= 2 {
            let out = merge_move(&model, &stats, moves)?;
            if out.records.iter().any(|r| r.accepted) {
                model = out.model;
                stats = out.stats;
                moved = true;
            }
            records.extend(out.records);
        }
        if moves.shuffle_enabled {
            let out = shuffle_move(&model, &stats)?;
            model = out.model;
            records.push(out.record);
        }
        trace.push(StepTrace {
            elbo: step_elbo,
            moved,
        });
    }
    let (resp, stats) = sweep(&model, data, &ranges)?;
    let final_elbo = elbo(&model, &stats)?;
    let assignments = resp
        .argmax()
        .into_iter()
        .map(|c| model.component_ids[c])
        .collect();
    let report = UpdateReport {
        ids_before,
        ids_after: model.component_ids.clone(),
        records,
        trace,
        elbo: final_elbo,
        assignments,
        source_indices: Vec::new(),
    };
    Ok(Refit { model, report })
}

/// Full training state of the alternating loop.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// Number of completed epochs.
    pub epoch: usize,
    pub vae: VaeParams,
    pub dpmm: DpmmModel,
    pub buffer: LatentBuffer,
    pub moves: MoveLog,
    pub rng: ChaCha8Rng,
    pub birth_cursor: usize,
}

impl TrainState {
    pub fn new(cfg: &DivaConfig) -> Result<Self> {
        cfg.validate()?;
        let prior = cfg.prior.build(cfg.vae.latent_dim)?;
        Ok(Self {
            epoch: 0,
            vae: VaeParams::init(&cfg.vae, cfg.seed)?,
            dpmm: init_model(prior)?,
            buffer: LatentBuffer::new(cfg.vae.latent_dim),
            moves: MoveLog::default(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15)),
            birth_cursor: 0,
        })
    }
}

/// Mean losses over the mini-batches of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochLoss {
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
    pub steps: usize,
}

/// One pass over `features` in shuffled mini-batches. `sources[i]` is the
/// dataset row of `features` row `i` and is what the buffer records.
pub fn run_epoch(
    state: &mut TrainState,
    features: ArrayView2<f64>,
    sources: &[usize],
    cfg: &DivaConfig,
) -> Result<EpochLoss> {
    if features.nrows() == 0 {
        return Err(Error::Contract("epoch over an empty dataset".into()));
    }
    if sources.len() != features.nrows() {
        return Err(Error::Shape(format!(
            "{} source indices for {} rows",
            sources.len(),
            features.nrows()
        )));
    }
    let mut order: Vec<usize> = (0..features.nrows()).collect();
    order.shuffle(&mut state.rng);
    let d = cfg.vae.latent_dim;
    let mut acc = LossParts::default();
    let mut steps = 0;
    for chunk in order.chunks(cfg.vae.batch_size) {
        let batch = features.select(Axis(0), chunk);
        let noise = Array2::from_shape_simple_fn((chunk.len(), d), || state.rng.sample(StandardNormal));
        let out = train_step(&mut state.vae, &cfg.vae, batch.view(), noise.view(), &state.dpmm)?;
        let src: Vec<usize> = chunk.iter().map(|&i| sources[i]).collect();
        state.buffer.push(out.z.view(), &src)?;
        acc.recon += out.loss.recon;
        acc.kl += out.loss.kl;
        acc.total += out.loss.total;
        steps += 1;
    }
    state.epoch += 1;
    let n = steps as f64;
    Ok(EpochLoss {
        recon: acc.recon / n,
        kl: acc.kl / n,
        total: acc.total / n,
        steps,
    })
}

/// Refit the DPMM, warm-started from the current model, on the buffer and
/// clear the buffer. An empty buffer leaves the model as it is.
pub fn update_dpmm(state: &mut TrainState, cfg: &UpdateConfig) -> Result<UpdateReport> {
    let ids = state.dpmm.component_ids.clone();
    if state.buffer.is_empty() {
        log::warn!("DPMM update skipped: latent buffer is empty");
        return Ok(UpdateReport {
            ids_before: ids.clone(),
            ids_after: ids,
            records: Vec::new(),
            trace: Vec::new(),
            elbo: f64::NAN,
            assignments: Vec::new(),
            source_indices: Vec::new(),
        });
    }
    let refit = refit_dpmm(&state.dpmm, state.buffer.rows(), cfg, &mut state.rng, &mut state.birth_cursor)?;
    state.dpmm = refit.model;
    state.moves.extend(refit.report.records.iter().cloned());
    let mut report = refit.report;
    report.source_indices = std::mem::take(&mut state.buffer.source_indices);
    state.buffer.clear();
    Ok(report)
}

/// One row of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub elbo: f64,
    pub recon_loss: Option<f64>,
    pub kl_loss: Option<f64>,
    pub acc: Option<f64>,
    pub seconds: Option<f64>,
}

/// Append-only metrics CSV with header `epoch,K,elbo,recon_loss,kl_loss,acc,seconds`.
pub struct MetricsCsv<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsCsv<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        inner.write_record(["epoch", "K", "elbo", "recon_loss", "kl_loss", "acc", "seconds"])?;
        inner.flush()?;
        Ok(Self { inner })
    }

    /// Writes and flushes one row.
    pub fn push(&mut self, record: &MetricsRecord) -> Result<()> {
        self.inner.serialize(record)?;
        self.inner.flush()?;
        Ok(())
    }
}

pub fn write_metrics_csv<W: Write>(records: &[MetricsRecord], out: W) -> Result<()> {
    let mut w = MetricsCsv::new(out)?;
    for r in records {
        w.push(r)?;
    }
    Ok(())
}

fn accuracy_of(assignments: &[ComponentId], sources: &[usize], labels: Option<&Vec<u64>>) -> Result<Option<f64>> {
    let Some(labels) = labels else {
        return Ok(None);
    };
    if assignments.is_empty() {
        return Ok(None);
    }
    let truth: Vec<u64> = sources.iter().map(|&i| labels[i]).collect();
    Ok(Some(clustering_accuracy(&LabeledAssignment::new(assignments.to_vec(), truth)?)?))
}

/// Everything observable about one epoch of training.
#[derive(Debug, Clone)]
pub struct EpochReport {
    pub metrics: MetricsRecord,
    pub loss: EpochLoss,
    pub update: UpdateReport,
}

/// Run the alternating loop for `cfg.max_epochs` epochs, calling `on_epoch`
/// after each DPMM update.
pub fn train_with<F>(
    dataset: &Dataset,
    schedule: Option<&IncrementalSchedule>,
    cfg: &DivaConfig,
    mut on_epoch: F,
) -> Result<(TrainState, Vec<MetricsRecord>)>
where
    F: FnMut(&TrainState, &EpochReport) -> Result<()>,
{
    cfg.validate()?;
    if dataset.dim() != cfg.vae.input_dim {
        return Err(Error::Config(format!(
            "dataset has {} features, vae.input_dim is {}",
            dataset.dim(),
            cfg.vae.input_dim
        )));
    }
    if let Some(s) = schedule {
        s.validate()?;
    }
    let mut state = TrainState::new(cfg)?;
    let mut history = Vec::with_capacity(cfg.max_epochs);
    let all_rows: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..cfg.max_epochs {
        let start = Instant::now();
        let loss = match schedule {
            Some(s) => {
                let subset = apply_schedule(dataset, s, epoch)?;
                run_epoch(&mut state, subset.data.features.view(), &subset.rows, cfg)?
            }
            None => run_epoch(&mut state, dataset.features.view(), &all_rows, cfg)?,
        };
        let update = update_dpmm(&mut state, &cfg.update)?;
        let acc = accuracy_of(&update.assignments, &update.source_indices, dataset.labels.as_ref())?;
        let metrics = MetricsRecord {
            epoch,
            k: state.dpmm.k(),
            elbo: update.elbo,
            recon_loss: Some(loss.recon),
            kl_loss: Some(loss.kl),
            acc,
            seconds: cfg.record_timing.then(|| start.elapsed().as_secs_f64()),
        };
        log::info!(
            "epoch {epoch}: K = {}, elbo = {:.4}, recon = {:.5}, acc = {:?}",
            metrics.k,
            metrics.elbo,
            loss.recon,
            metrics.acc
        );
        let report = EpochReport {
            metrics: metrics.clone(),
            loss,
            update,
        };
        on_epoch(&state, &report)?;
        history.push(metrics);
    }
    Ok((state, history))
}

pub fn train(
    dataset: &Dataset,
    schedule: Option<&IncrementalSchedule>,
    cfg: &DivaConfig,
) -> Result<(TrainState, Vec<MetricsRecord>)> {
    train_with(dataset, schedule, cfg, |_, _| Ok(()))
}

/// Encoder means of every row, computed in chunks.
pub fn encode_means(params: &VaeParams, cfg: &VaeConfig, features: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((features.nrows(), cfg.latent_dim));
    for r in batch_ranges(features.nrows(), 1024) {
        let (mu, _) = encode_batch(features.slice(ndarray::s![r.clone(), ..]), params, cfg)?;
        out.slice_mut(ndarray::s![r, ..]).assign(&mu);
    }
    Ok(out)
}

/// Most responsible component identifier for every latent row.
pub fn assign_components(model: &DpmmModel, latents: ArrayView2<f64>) -> Result<Vec<ComponentId>> {
    if latents.nrows() == 0 {
        return Ok(Vec::new());
    }
    let resp = local_step(latents, model)?;
    Ok(resp.argmax().into_iter().map(|c| model.component_ids[c]).collect())
}

/// Cluster identifiers of `features` under a trained state, via encoder means.
pub fn predict(state: &TrainState, cfg: &VaeConfig, features: ArrayView2<f64>) -> Result<Vec<ComponentId>> {
    let mu = encode_means(&state.vae, cfg, features)?;
    assign_components(&state.dpmm, mu.view())
}

/// Settings for fitting the DPMM alone on fixed features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpmmFitConfig {
    pub prior: PriorConfig,
    pub update: UpdateConfig,
    pub epochs: usize,
    pub seed: u64,
    pub record_timing: bool,
}

impl Default for DpmmFitConfig {
    fn default() -> Self {
        Self {
            prior: PriorConfig::default(),
            update: UpdateConfig::default(),
            epochs: 10,
            seed: 0,
            record_timing: true,
        }
    }
}

pub struct DpmmFit {
    pub model: DpmmModel,
    pub moves: MoveLog,
    pub metrics: Vec<MetricsRecord>,
    pub reports: Vec<UpdateReport>,
}

/// Fit a DPMM, starting from a single cluster, by `epochs` refits over all of `data`.
pub fn fit_dpmm(data: &Dataset, cfg: &DpmmFitConfig) -> Result<DpmmFit> {
    cfg.update.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("fit_dpmm on an empty dataset".into()));
    }
    let mut model = init_model(cfg.prior.build(data.dim())?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cursor = 0;
    let mut log = MoveLog::default();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut reports = Vec::with_capacity(cfg.epochs);
    let sources: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let refit = refit_dpmm(&model, data.features.view(), &cfg.update, &mut rng, &mut cursor)?;
        model = refit.model;
        let mut report = refit.report;
        report.source_indices = sources.clone();
        log.extend(report.records.iter().cloned());
        metrics.push(MetricsRecord {
            epoch,
            k: model.k(),
            elbo: report.elbo,
            recon_loss: None,
            kl_loss: None,
            acc: accuracy_of(&report.assignments, &sources, data.labels.as_ref())?,
            seconds: cfg.record_timing.then(|| start.elapsed().as_secs_f64()),
        });
        reports.push(report);
    }
    Ok(DpmmFit {
        model,
        moves: log,
        metrics,
        reports,
    })
}

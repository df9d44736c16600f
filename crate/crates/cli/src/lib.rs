//! Command-line experiment runner.

pub mod config;

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use diva_core::diva::{assign_components, encode_means, fit_dpmm, train_with, write_metrics_csv, MetricsCsv, TrainState};
use diva_core::dpmm::{load_checkpoint, save_checkpoint};
use diva_core::eval::{clustering_accuracy, knn_error, LabeledAssignment};
use diva_core::moves::MoveLog;
use diva_core::vae::{load_vae, save_vae};
use ndarray::Array2;
use serde::Serialize;

use crate::config::LoadedConfig;

#[derive(Debug, Parser)]
#[command(name = "diva", version, about = "DIVA deep clustering experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the DPMM alone on the dataset features.
    FitDpmm(RunArgs),
    /// Train the VAE and DPMM jointly.
    TrainDiva(RunArgs),
    /// Encode a dataset with a trained checkpoint and write a latent CSV.
    ExportLatent(ExportArgs),
    /// Score a latent CSV and write a JSON report.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Coordinate-ascent steps per DPMM update.
    #[arg(long)]
    steps: Option<usize>,
    /// Overrides the config's output directory; taken relative to the working directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    no_timing: bool,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    config: PathBuf,
    /// Directory holding dpmm.json, vae.json and vae.bin.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Latent CSV as written by export-latent.
    #[arg(long)]
    latent: PathBuf,
    /// CSV of labels (column `label`, or the only column); defaults to the latent file's labels.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Labeled latent CSV to classify by kNN against `--latent`.
    #[arg(long)]
    test_latent: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "3")]
    knn: Vec<usize>,
    /// Report destination; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failures split by exit code: 2 for usage and configuration, 1 otherwise.
enum Failure {
    Usage(anyhow::Error),
    Run(anyhow::Error),
}

trait UsageContext<T> {
    fn usage(self) -> std::result::Result<T, Failure>;
}

impl<T> UsageContext<T> for Result<T> {
    fn usage(self) -> std::result::Result<T, Failure> {
        self.map_err(Failure::Usage)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

/// Parse `args` (program name first), run the command and return the exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome = match cli.command {
        Command::FitDpmm(a) => cmd_fit_dpmm(&a),
        Command::TrainDiva(a) => cmd_train_diva(&a),
        Command::ExportLatent(a) => cmd_export_latent(&a),
        Command::Eval(a) => cmd_eval(&a),
    };
    match outcome {
        Ok(()) => 0,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            2
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn load_run_config(a: &RunArgs) -> Result<(LoadedConfig, PathBuf)> {
    let mut loaded = LoadedConfig::read(&a.config)?;
    let cfg = &mut loaded.config;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(e) = a.max_epochs {
        cfg.max_epochs = e;
    }
    if let Some(t) = a.steps {
        cfg.update.steps = t;
    }
    if a.no_timing {
        cfg.record_timing = false;
    }
    cfg.validate()?;
    let out = a.output_dir.clone().unwrap_or_else(|| loaded.output_dir());
    Ok((loaded, out))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

fn cmd_fit_dpmm(a: &RunArgs) -> std::result::Result<(), Failure> {
    let (loaded, out) = load_run_config(a).usage()?;
    let data = loaded.dataset().usage()?;
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    let fit = fit_dpmm(&data, &loaded.config.dpmm_fit()).map_err(anyhow::Error::from)?;
    write_metrics_csv(&fit.metrics, create(&out.join("metrics.csv"))?).map_err(anyhow::Error::from)?;
    write_moves(&fit.moves, &out.join("moves.jsonl"))?;
    save_checkpoint(&fit.model, &out.join("dpmm.json")).map_err(anyhow::Error::from)?;
    if let Some(last) = fit.metrics.last() {
        println!("epochs {} K {} elbo {} acc {}", fit.metrics.len(), last.k, last.elbo, fmt_opt(last.acc));
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn write_moves(log: &MoveLog, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    log.write_jsonl(&mut w)?;
    w.flush()?;
    Ok(())
}

fn save_state(state: &TrainState, cfg: &diva_core::vae::VaeConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    save_checkpoint(&state.dpmm, &dir.join("dpmm.json"))?;
    save_vae(&state.vae, cfg, &dir.join("vae.json"), &dir.join("vae.bin"))?;
    Ok(())
}

fn cmd_train_diva(a: &RunArgs) -> std::result::Result<(), Failure> {
    let (loaded, out) = load_run_config(a).usage()?;
    let data = loaded.dataset().usage()?;
    let cfg = &loaded.config;
    let diva = cfg.diva();
    if data.dim() != diva.vae.input_dim {
        return Err(Failure::Usage(anyhow!(
            "dataset has {} features, vae.input_dim is {}",
            data.dim(),
            diva.vae.input_dim
        )));
    }
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut metrics = MetricsCsv::new(create(&out.join("metrics.csv"))?).map_err(anyhow::Error::from)?;
    let mut moves = create(&out.join("moves.jsonl"))?;
    let interval = cfg.checkpoint_interval;
    let (state, history) = train_with(&data, cfg.schedule.as_ref(), &diva, |state, report| {
        metrics.push(&report.metrics)?;
        MoveLog {
            records: report.update.records.clone(),
        }
        .write_jsonl(&mut moves)?;
        moves.flush()?;
        if let Some(every) = interval {
            if state.epoch % every == 0 {
                let dir = out.join("checkpoints").join(format!("epoch-{:04}", state.epoch));
                save_state(state, &diva.vae, &dir).map_err(|e| diva_core::Error::Contract(format!("{e:#}")))?;
            }
        }
        Ok(())
    })
    .map_err(anyhow::Error::from)?;
    save_state(&state, &diva.vae, &out)?;
    if let Some(last) = history.last() {
        println!("epochs {} K {} elbo {} acc {}", history.len(), last.k, last.elbo, fmt_opt(last.acc));
    }
    Ok(())
}

fn cmd_export_latent(a: &ExportArgs) -> std::result::Result<(), Failure> {
    let loaded = LoadedConfig::read(&a.config).usage()?;
    let data = loaded.dataset().usage()?;
    let dpmm = load_checkpoint(&a.checkpoint.join("dpmm.json")).map_err(anyhow::Error::from)?;
    let (vae, vae_cfg) = load_vae(&a.checkpoint.join("vae.json"), &a.checkpoint.join("vae.bin")).map_err(anyhow::Error::from)?;
    if data.dim() != vae_cfg.input_dim {
        return Err(Failure::Usage(anyhow!(
            "dataset has {} features, checkpoint expects {}",
            data.dim(),
            vae_cfg.input_dim
        )));
    }
    let z = encode_means(&vae, &vae_cfg, data.features.view()).map_err(anyhow::Error::from)?;
    let clusters = assign_components(&dpmm, z.view()).map_err(anyhow::Error::from)?;
    write_latent_csv(&a.out, &z, data.labels.as_deref(), &clusters)?;
    println!("wrote {} rows to {}", z.nrows(), a.out.display());
    Ok(())
}

/// Header `z0..z{D-1},label,cluster`; the label cell is empty for unlabeled data.
pub fn write_latent_csv(path: &Path, z: &Array2<f64>, labels: Option<&[u64]>, clusters: &[u64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header: Vec<String> = (0..z.ncols()).map(|j| format!("z{j}")).collect();
    header.push("label".into());
    header.push("cluster".into());
    w.write_record(&header)?;
    for (i, row) in z.rows().into_iter().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(labels.map_or_else(String::new, |l| l[i].to_string()));
        rec.push(clusters[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Contents of a latent CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDump {
    pub z: Array2<f64>,
    pub labels: Option<Vec<u64>>,
    pub clusters: Vec<u64>,
}

pub fn read_latent_csv(path: &Path) -> Result<LatentDump> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let header = r.headers()?.clone();
    let zcols: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with('z') && h[1..].parse::<usize>().is_ok())
        .map(|(i, _)| i)
        .collect();
    let find = |name: &str| header.iter().position(|h| h == name);
    let (Some(lc), Some(cc)) = (find("label"), find("cluster")) else {
        bail!("{} lacks label and cluster columns", path.display());
    };
    if zcols.is_empty() {
        bail!("{} has no latent columns", path.display());
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut clusters = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        for &j in &zcols {
            values.push(rec[j].parse::<f64>().with_context(|| format!("row {} of {}", i + 2, path.display()))?);
        }
        labels.push(rec[lc].to_string());
        clusters.push(rec[cc].parse::<u64>().with_context(|| format!("row {} of {}", i + 2, path.display()))?);
    }
    let n = clusters.len();
    let labels = if labels.iter().all(String::is_empty) {
        None
    } else {
        Some(
            labels
                .iter()
                .map(|l| l.parse::<u64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .with_context(|| format!("bad label in {}", path.display()))?,
        )
    };
    Ok(LatentDump {
        z: Array2::from_shape_vec((n, zcols.len()), values)?,
        labels,
        clusters,
    })
}

fn read_labels(path: &Path) -> Result<Vec<u64>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let header = r.headers()?.clone();
    let col = match header.iter().position(|h| h == "label") {
        Some(c) => c,
        None if header.len() == 1 => 0,
        None => bail!("{} has no label column", path.display()),
    };
    r.records()
        .map(|rec| Ok(rec?[col].parse::<u64>()?))
        .collect::<Result<Vec<_>>>()
        .with_context(|| format!("bad label in {}", path.display()))
}

#[derive(Debug, Serialize)]
struct EvalReport {
    rows: usize,
    clusters: usize,
    acc: Option<f64>,
    knn_error: Vec<KnnEntry>,
}

#[derive(Debug, Serialize)]
struct KnnEntry {
    k: usize,
    error: f64,
}

fn cmd_eval(a: &EvalArgs) -> std::result::Result<(), Failure> {
    let dump = read_latent_csv(&a.latent).usage()?;
    let labels = match &a.labels {
        Some(p) => Some(read_labels(p).usage()?),
        None => dump.labels.clone(),
    };
    if let Some(l) = &labels {
        if l.len() != dump.clusters.len() {
            return Err(Failure::Usage(anyhow!(
                "{} labels for {} latent rows",
                l.len(),
                dump.clusters.len()
            )));
        }
    }
    let mut distinct = dump.clusters.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let acc = match &labels {
        Some(l) if !l.is_empty() => Some(
            clustering_accuracy(&LabeledAssignment::new(dump.clusters.clone(), l.clone()).map_err(anyhow::Error::from)?)
                .map_err(anyhow::Error::from)?,
        ),
        _ => None,
    };
    let mut knn = Vec::new();
    if let Some(test_path) = &a.test_latent {
        let Some(train_labels) = &labels else {
            return Err(Failure::Usage(anyhow!("kNN needs labels for the training latents")));
        };
        let test = read_latent_csv(test_path).usage()?;
        let Some(test_labels) = &test.labels else {
            return Err(Failure::Usage(anyhow!("{} has no labels", test_path.display())));
        };
        for &k in &a.knn {
            let error = knn_error(dump.z.view(), train_labels, test.z.view(), test_labels, k).map_err(anyhow::Error::from)?;
            knn.push(KnnEntry { k, error });
        }
    }
    let report = EvalReport {
        rows: dump.clusters.len(),
        clusters: distinct.len(),
        acc,
        knn_error: knn,
    };
    let text = serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)? + "\n";
    match &a.out {
        Some(p) => fs::write(p, text).with_context(|| format!("cannot write {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latent_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.csv");
        let z = ndarray::array![[0.5, -1.25], [3.0, 1e-9]];
        write_latent_csv(&path, &z, Some(&[4, 2]), &[7, 9]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("z0,z1,label,cluster\n"));
        let back = read_latent_csv(&path).unwrap();
        assert_eq!(back.z, z);
        assert_eq!(back.labels, Some(vec![4, 2]));
        assert_eq!(back.clusters, vec![7, 9]);
    }

    #[test]
    fn unlabeled_latent_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.csv");
        write_latent_csv(&path, &ndarray::array![[1.0]], None, &[0]).unwrap();
        assert_eq!(read_latent_csv(&path).unwrap().labels, None);
    }

    #[test]
    fn labels_file_forms() {
        let dir = tempfile::tempdir().unwrap();
        let one = dir.path().join("a.csv");
        fs::write(&one, "y\n1\n2\n").unwrap();
        assert_eq!(read_labels(&one).unwrap(), vec![1, 2]);
        let named = dir.path().join("b.csv");
        fs::write(&named, "id,label\n0,5\n1,6\n").unwrap();
        assert_eq!(read_labels(&named).unwrap(), vec![5, 6]);
        let bad = dir.path().join("c.csv");
        fs::write(&bad, "id,y\n0,5\n").unwrap();
        assert!(read_labels(&bad).is_err());
    }
}

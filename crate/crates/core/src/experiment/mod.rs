//! Config-driven runs, sweeps and singular-value energy reports.
//!
//! A run directory holds:
//! - `config.kv`: the effective configuration
//! - `metrics.jsonl`: one object per round per model
//! - `summary.json`: final accuracies, traffic and per-round rank statistics
//! - `sigma.jsonl`: aggregated-gradient singular values (when `record_sigma`)
//! - `checkpoints/`: final parameters

mod config;
mod report;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{gen_synthetic, load_csv, partition, partition_label_skew, train_eval_split, Sample};
use crate::distill::LossBreakdown;
use crate::error::{Error, Result};
use crate::federation::{
    codec_by_name, evaluate, run_round, uncompressed_round_bytes, BatchSampler, ClientState, Mode, RoundMetrics,
    ServerState, TeacherState, Traffic,
};
use crate::nn::{init_model, load_checkpoint, save_checkpoint};
use crate::numerics::Rng;

pub use config::{ArchConfig, DataConfig, DataSource, ExperimentConfig, PartitionKind, ENV_PREFIX};
pub use report::{report_energy, EnergyReport, ENERGY_THRESHOLD};

// Independent random streams derived from the run seed.
const STREAM_DATA: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_PARTITION: u64 = 3;
const STREAM_STUDENT: u64 = 4;
const STREAM_SERVER: u64 = 5;
const STREAM_TEACHER: u64 = 1 << 16;
const STREAM_SAMPLER: u64 = 1 << 32;

/// Server, clients and held-out set, ready for the first round.
pub struct Setup {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub eval: Vec<Sample>,
}

pub fn load_dataset(config: &ExperimentConfig) -> Result<Vec<Sample>> {
    let shape = config.sample_shape();
    match config.data.source {
        DataSource::Synthetic => gen_synthetic(
            config.data.num_samples,
            &shape,
            &mut Rng::derive(config.seed, STREAM_DATA),
            config.data.noise,
        ),
        DataSource::Csv => {
            let path = config.data.csv_path.as_deref().ok_or_else(|| Error::Config("missing data.csv_path".into()))?;
            load_csv(path, &shape)
        }
    }
}

/// Builds the initial federation from a config.
pub fn build(config: &ExperimentConfig) -> Result<Setup> {
    config.validate()?;
    let samples = load_dataset(config)?;
    let (train, eval) = train_eval_split(samples, config.eval_fraction, &mut Rng::derive(config.seed, STREAM_SPLIT))?;
    if eval.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    if train.len() < config.n_clients {
        return Err(Error::Config(format!(
            "{} training samples cannot feed {} clients",
            train.len(),
            config.n_clients
        )));
    }
    let mut prng = Rng::derive(config.seed, STREAM_PARTITION);
    let shards = match config.partition {
        PartitionKind::Iid => partition(&train, config.n_clients, &mut prng)?,
        PartitionKind::Dirichlet => partition_label_skew(&train, config.n_clients, config.dirichlet_alpha, &mut prng)?,
    };
    if let Some(s) = shards.iter().find(|s| s.samples.is_empty()) {
        return Err(Error::Config(format!("client {} received no training samples", s.client_id)));
    }

    let shared_cfg = config.shared_model();
    let shared = match &config.init_student {
        Some(path) => load_checkpoint(&shared_cfg, path)?,
        None => init_model(&shared_cfg, &mut Rng::derive(config.seed, STREAM_STUDENT))?,
    };
    let student_cfg = config.student_model();
    let clients = shards
        .into_iter()
        .map(|shard| {
            let id = shard.client_id;
            let teacher = if config.mode.has_teacher() {
                let p = init_model(
                    &config.teacher_model(),
                    &mut Rng::derive(config.seed, STREAM_TEACHER + id as u64),
                )?;
                Some(TeacherState::new(p, &student_cfg, config.teacher_optimizer)?)
            } else {
                None
            };
            Ok(ClientState {
                client_id: id,
                teacher,
                student: shared.clone(),
                sampler: BatchSampler::new(shard.samples.len(), Rng::derive(config.seed, STREAM_SAMPLER + id as u64)),
                shard: shard.samples,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let codec = codec_by_name(&config.codec, config.seed)?;
    let reference = uncompressed_round_bytes(&config.teacher_model(), codec.as_ref())?;
    let server = ServerState::new(
        config.protocol(),
        config.schedule()?,
        codec,
        config.n_clients,
        Rng::derive(config.seed, STREAM_SERVER),
    )?
    .with_reference_bytes(reference);
    Ok(Setup { server, clients, eval })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankStats {
    pub round: usize,
    pub threshold: f64,
    /// Matrices broadcast in factorized form.
    pub factorized: usize,
    pub raw: usize,
    pub min_k: Option<usize>,
    pub max_k: Option<usize>,
    pub mean_k: Option<f64>,
}

impl RankStats {
    fn from_round(m: &RoundMetrics) -> Self {
        let ks: Vec<usize> = m.download_ranks.iter().map(|(_, k)| *k).filter(|&k| k > 0).collect();
        Self {
            round: m.round,
            threshold: m.threshold,
            factorized: ks.len(),
            raw: m.download_ranks.len() - ks.len(),
            min_k: ks.iter().copied().min(),
            max_k: ks.iter().copied().max(),
            mean_k: (!ks.is_empty()).then(|| ks.iter().sum::<usize>() as f64 / ks.len() as f64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: Mode,
    pub seed: u64,
    pub n_clients: usize,
    pub total_rounds: usize,
    /// Held-out accuracy after the last round, by model name.
    pub final_accuracy: IndexMap<String, f64>,
    pub mean_teacher_accuracy: Option<f64>,
    /// Client-mean losses of the last round.
    pub final_losses: LossBreakdown,
    pub traffic: Vec<Traffic>,
    pub total_bytes: u64,
    pub mean_client_bytes: f64,
    /// Per-client bytes the uncompressed teacher-architecture baseline would
    /// have exchanged over the same rounds.
    pub reference_client_bytes: u64,
    /// `reference_client_bytes / mean_client_bytes`.
    pub compression_ratio: f64,
    pub rank_stats: Vec<RankStats>,
}

impl Summary {
    pub fn student_accuracy(&self) -> f64 {
        self.final_accuracy["student"]
    }
}

#[derive(Serialize)]
struct MetricsRow<'a> {
    round: usize,
    model: &'a str,
    #[serde(flatten)]
    losses: LossBreakdown,
    accuracy: Option<f64>,
    upload_bytes: u64,
    download_bytes: u64,
    threshold: f64,
    ranks: IndexMap<&'a str, usize>,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct SigmaRow {
    pub round: usize,
    pub name: String,
    pub sigma: Vec<f64>,
}

fn divergence(e: Error) -> Error {
    match e {
        Error::NonFinite(m) => Error::Divergence(m),
        other => other,
    }
}

fn json_line(out: &mut Vec<u8>, v: &impl Serialize) -> Result<()> {
    serde_json::to_writer(&mut *out, v)?;
    out.push(b'\n');
    Ok(())
}

fn ranks_map(r: &[(String, usize)]) -> IndexMap<&str, usize> {
    r.iter().map(|(n, k)| (n.as_str(), *k)).collect()
}

/// Everything a run produces, before it is written anywhere.
pub struct RunOutput {
    pub summary: Summary,
    pub metrics_jsonl: Vec<u8>,
    pub sigma_jsonl: Option<Vec<u8>>,
    pub setup: Setup,
}

/// Runs all rounds in memory.
pub fn execute(config: &ExperimentConfig) -> Result<RunOutput> {
    let mut setup = build(config)?;
    let n = config.n_clients;
    let mut metrics = Vec::new();
    let mut sigma = config.record_sigma.then(Vec::new);
    let mut rank_stats = Vec::with_capacity(config.total_rounds);
    let mut last_acc: IndexMap<String, f64> = IndexMap::new();
    let mut last_losses = LossBreakdown::default();

    for r in 0..config.total_rounds {
        let m = run_round(&mut setup.server, &mut setup.clients).map_err(divergence)?;
        if !m.mean_losses.is_finite() {
            return Err(Error::Divergence(format!("round {r}: non-finite loss")));
        }
        let eval_now = (r + 1) % config.eval_every == 0 || r + 1 == config.total_rounds;
        let acc: IndexMap<String, f64> = if eval_now {
            evaluate(&setup.clients, &setup.eval)?
                .into_iter()
                .map(|e| (e.model, e.metrics.accuracy))
                .collect()
        } else {
            IndexMap::new()
        };

        if config.mode.has_teacher() {
            for i in 0..n {
                let name = format!("teacher.{i}");
                let Some(losses) = m.client_losses[i] else {
                    continue;
                };
                let ranks = m.upload_ranks[i].as_deref().map(ranks_map).unwrap_or_default();
                json_line(
                    &mut metrics,
                    &MetricsRow {
                        round: r,
                        model: &name,
                        losses,
                        accuracy: acc.get(&name).copied(),
                        upload_bytes: m.traffic[i].upload_bytes,
                        download_bytes: m.traffic[i].download_bytes,
                        threshold: m.threshold,
                        ranks,
                    },
                )?;
            }
        }
        json_line(
            &mut metrics,
            &MetricsRow {
                round: r,
                model: "student",
                losses: m.mean_losses,
                accuracy: acc.get("student").copied(),
                upload_bytes: m.traffic.iter().map(|t| t.upload_bytes).sum(),
                download_bytes: m.traffic.iter().map(|t| t.download_bytes).sum(),
                threshold: m.threshold,
                ranks: ranks_map(&m.download_ranks),
            },
        )?;
        if let Some(buf) = &mut sigma {
            for s in &m.sigma {
                json_line(
                    buf,
                    &SigmaRow {
                        round: r,
                        name: s.name.clone(),
                        sigma: s.sigma.clone(),
                    },
                )?;
            }
        }
        rank_stats.push(RankStats::from_round(&m));
        if eval_now {
            last_acc = acc;
        }
        last_losses = m.mean_losses;
    }

    let ledger = setup.server.ledger();
    let teacher_accs: Vec<f64> = last_acc
        .iter()
        .filter(|(k, _)| k.starts_with("teacher."))
        .map(|(_, v)| *v)
        .collect();
    let reference_client_bytes = ledger.reference_round_bytes().unwrap_or(0) * config.total_rounds as u64;
    let summary = Summary {
        mode: config.mode,
        seed: config.seed,
        n_clients: n,
        total_rounds: config.total_rounds,
        mean_teacher_accuracy: (!teacher_accs.is_empty())
            .then(|| teacher_accs.iter().sum::<f64>() / teacher_accs.len() as f64),
        final_accuracy: last_acc,
        final_losses: last_losses,
        traffic: ledger.totals().to_vec(),
        total_bytes: ledger.total_bytes(),
        mean_client_bytes: ledger.mean_client_bytes(),
        reference_client_bytes,
        compression_ratio: ledger.ratio_vs_reference().unwrap_or(0.0),
        rank_stats,
    };
    Ok(RunOutput {
        summary,
        metrics_jsonl: metrics,
        sigma_jsonl: sigma,
        setup,
    })
}

/// Runs an experiment and writes its artifacts into `out_dir`.
pub fn run_experiment(config: &ExperimentConfig, out_dir: impl AsRef<Path>) -> Result<Summary> {
    let out_dir = out_dir.as_ref();
    config.validate()?;
    let out = execute(config)?;
    fs::create_dir_all(out_dir.join("checkpoints"))?;
    fs::write(out_dir.join("config.kv"), config.to_kv())?;
    fs::write(out_dir.join("metrics.jsonl"), &out.metrics_jsonl)?;
    if let Some(s) = &out.sigma_jsonl {
        fs::write(out_dir.join("sigma.jsonl"), s)?;
    }
    let mut summary = serde_json::to_vec_pretty(&out.summary)?;
    summary.push(b'\n');
    fs::write(out_dir.join("summary.json"), summary)?;
    let ckpt = out_dir.join("checkpoints");
    save_checkpoint(&out.setup.clients[0].student, ckpt.join("student.fkdp"))?;
    for c in &out.setup.clients {
        if let Some(t) = &c.teacher {
            save_checkpoint(&t.params, ckpt.join(format!("teacher.{}.fkdp", c.client_id)))?;
        }
    }
    Ok(out.summary)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    TStart,
    TEnd,
    NClients,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::TStart => "t_start",
            SweepParam::TEnd => "t_end",
            SweepParam::NClients => "n_clients",
        }
    }

    pub fn apply(self, config: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut c = config.clone();
        match self {
            SweepParam::TStart => c.t_start = value,
            SweepParam::TEnd => c.t_end = value,
            SweepParam::NClients => {
                if !(value >= 1.0) || value.fract() != 0.0 {
                    return Err(Error::Config(format!("n_clients sweep value {value} is not a positive integer")));
                }
                c.n_clients = value as usize;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t_start" => Ok(SweepParam::TStart),
            "t_end" => Ok(SweepParam::TEnd),
            "n_clients" => Ok(SweepParam::NClients),
            other => Err(Error::Config(format!("cannot sweep over {other:?}; use t_start, t_end or n_clients"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    /// Shared-model accuracy.
    pub accuracy: f64,
    pub teacher_accuracy: Option<f64>,
    pub total_bytes: u64,
    pub mean_client_bytes: f64,
}

impl SweepRow {
    pub fn from_summary(value: f64, s: &Summary) -> Self {
        Self {
            value,
            accuracy: s.student_accuracy(),
            teacher_accuracy: s.mean_teacher_accuracy,
            total_bytes: s.total_bytes,
            mean_client_bytes: s.mean_client_bytes,
        }
    }
}

/// One run per value, each in `out_dir/<param>_<value>/`, plus
/// `out_dir/sweep.csv`.
pub fn sweep(
    config: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
    out_dir: impl AsRef<Path>,
    parallel: bool,
) -> Result<Vec<SweepRow>> {
    let out_dir = out_dir.as_ref();
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|&v| param.apply(config, v))
        .collect::<Result<Vec<_>>>()?;
    let one = |(v, c): (&f64, &ExperimentConfig)| -> Result<SweepRow> {
        let dir = out_dir.join(format!("{}_{v}", param.name()));
        Ok(SweepRow::from_summary(*v, &run_experiment(c, dir)?))
    };
    let rows: Vec<SweepRow> = if parallel {
        values.par_iter().zip(configs.par_iter()).map(one).collect::<Result<_>>()?
    } else {
        values.iter().zip(configs.iter()).map(one).collect::<Result<_>>()?
    };
    fs::create_dir_all(out_dir)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["value", "accuracy", "teacher_accuracy", "total_bytes", "mean_client_bytes"])
        .map_err(|e| Error::Io(e.into()))?;
    for r in &rows {
        w.write_record([
            r.value.to_string(),
            r.accuracy.to_string(),
            r.teacher_accuracy.map(|a| a.to_string()).unwrap_or_default(),
            r.total_bytes.to_string(),
            r.mean_client_bytes.to_string(),
        ])
        .map_err(|e| Error::Io(e.into()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    fs::File::create(out_dir.join("sweep.csv"))?.write_all(&bytes)?;
    Ok(rows)
}

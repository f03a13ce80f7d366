//! Synchronous client/server round protocol.
//!
//! Every round: clients compute local gradients on one batch, step their
//! teachers, factorize and upload the student gradient; the server decodes,
//! sums in client order, factorizes the sum at the same threshold and
//! broadcasts it; clients apply `Θ_s -= η_s · g / N`. Every payload crosses the
//! boundary as serialized bytes and the ledger records the exact lengths.

mod codec;
mod envelope;
mod eval;
mod ledger;

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compress::{self, factorize, factorize_traced, raw_payload, reconstruct, SigmaSnapshot, ThresholdSchedule};
use crate::data::Sample;
use crate::distill::{
    compose_losses, local_gradients, task_gradients, DistillOptions, LayerMap, LossBreakdown, LossParts, Projection,
};
use crate::error::{Error, Result};
use crate::nn::{GradSet, ModelConfig, Optimizer, OptimizerKind, ParamSet};
use crate::numerics::{Matrix, Rng};

pub use codec::{codec_by_name, Codec, IdentityCodec, XorCodec};
pub use envelope::{envelope_len, Direction, Envelope, SERVER_ID};
pub use eval::{classification_metrics, evaluate_model, predictions, ClassMetrics, Classification};
pub use ledger::{CommLedger, Traffic};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Fedkd,
    FedkdNoAdaptive,
    FedkdNoHidden,
    FedkdNoDistill,
    /// Teacher-architecture model shared directly, gradients sent raw.
    FedavgFull,
    /// Student-architecture model shared directly, gradients sent raw.
    FedavgStudentOnly,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Fedkd,
        Mode::FedkdNoAdaptive,
        Mode::FedkdNoHidden,
        Mode::FedkdNoDistill,
        Mode::FedavgFull,
        Mode::FedavgStudentOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Fedkd => "fedkd",
            Mode::FedkdNoAdaptive => "fedkd_no_adaptive",
            Mode::FedkdNoHidden => "fedkd_no_hidden",
            Mode::FedkdNoDistill => "fedkd_no_distill",
            Mode::FedavgFull => "fedavg_full",
            Mode::FedavgStudentOnly => "fedavg_student_only",
        }
    }

    /// Whether clients keep a private teacher next to the shared model.
    pub fn has_teacher(self) -> bool {
        !matches!(self, Mode::FedavgFull | Mode::FedavgStudentOnly)
    }

    /// Whether payloads go through SVD factorization.
    pub fn compresses(self) -> bool {
        self.has_teacher()
    }

    pub fn distill_options(self) -> DistillOptions {
        let full = DistillOptions::default();
        match self {
            Mode::Fedkd => full,
            Mode::FedkdNoAdaptive => DistillOptions {
                adaptive: false,
                ..full
            },
            Mode::FedkdNoHidden => DistillOptions { hidden: false, ..full },
            Mode::FedkdNoDistill => DistillOptions { mutual: false, ..full },
            Mode::FedavgFull | Mode::FedavgStudentOnly => DistillOptions::task_only(),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

/// Protocol knobs shared by the server and all clients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProtocolConfig {
    pub mode: Mode,
    pub teacher_lr: f64,
    pub student_lr: f64,
    pub batch_size: usize,
    /// Student steps per round. Above 1 the upload is the accumulated student
    /// delta divided by `student_lr`.
    pub local_steps: usize,
    /// Fraction of clients sampled each round; 1 means everyone.
    pub participation: f64,
    pub teacher_optimizer: OptimizerKind,
    pub record_sigma: bool,
    /// Keep a copy of every serialized message on the server.
    pub log_messages: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Fedkd,
            teacher_lr: 0.05,
            student_lr: 0.05,
            batch_size: 16,
            local_steps: 1,
            participation: 1.0,
            teacher_optimizer: OptimizerKind::Sgd,
            record_sigma: false,
            log_messages: false,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [("teacher_lr", self.teacher_lr), ("student_lr", self.student_lr)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.local_steps == 0 {
            return Err(Error::Config("local_steps must be >= 1".into()));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::Config(format!("participation {} outside (0, 1]", self.participation)));
        }
        Ok(())
    }
}

/// Cycles through a shard in reshuffled epochs.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl BatchSampler {
    pub fn new(shard_len: usize, mut rng: Rng) -> Self {
        let mut order: Vec<usize> = (0..shard_len).collect();
        rng.shuffle(&mut order);
        Self { order, pos: 0, rng }
    }

    /// Next `size` indices (fewer if the shard is smaller).
    pub fn next_batch(&mut self, size: usize) -> Result<Vec<usize>> {
        if self.order.is_empty() {
            return Err(Error::InvalidArgument("cannot sample from an empty shard".into()));
        }
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        Ok(out)
    }
}

/// A client's private model: teacher parameters, projection and optimizer.
#[derive(Clone, Debug)]
pub struct TeacherState {
    pub params: ParamSet,
    pub projection: Projection,
    pub map: LayerMap,
    optimizer: Optimizer,
}

impl TeacherState {
    pub fn new(params: ParamSet, student: &ModelConfig, optimizer: OptimizerKind) -> Result<Self> {
        let t = params.config();
        let map = LayerMap::uniform(student.num_layers, t.num_layers)?;
        Ok(Self {
            projection: Projection::identity(t.hidden_dim, student.hidden_dim),
            map,
            params,
            optimizer: Optimizer::new(optimizer),
        })
    }

    /// Applies teacher and projection gradients in one optimizer step.
    pub fn step(&mut self, grads: &GradSet, projection_grad: &Matrix, lr: f64) -> Result<()> {
        grads.check_layout(&self.params)?;
        let params = self
            .params
            .iter_mut()
            .map(|(_, m)| m)
            .chain(std::iter::once(&mut self.projection.w_h));
        let grads = grads.iter().map(|(_, g)| g).chain(std::iter::once(projection_grad));
        self.optimizer.step(params, grads, lr)
    }
}

#[derive(Clone, Debug)]
pub struct ClientState {
    pub client_id: usize,
    pub teacher: Option<TeacherState>,
    /// Local copy of the shared model.
    pub student: ParamSet,
    pub shard: Vec<Sample>,
    pub sampler: BatchSampler,
}

/// Output of one client's local phase.
#[derive(Clone, Debug)]
pub struct LocalUpdate {
    pub student_grad: GradSet,
    pub losses: LossBreakdown,
}

impl ClientState {
    fn batch(&mut self, size: usize) -> Result<Vec<Sample>> {
        Ok(self
            .sampler
            .next_batch(size)?
            .into_iter()
            .map(|i| self.shard[i].clone())
            .collect())
    }

    /// One local gradient computation against `student`, stepping the
    /// teacher immediately.
    fn local_step(&mut self, student: &ParamSet, cfg: &ProtocolConfig) -> Result<LocalUpdate> {
        let batch = self.batch(cfg.batch_size)?;
        match &mut self.teacher {
            Some(t) => {
                let lg = local_gradients(&t.params, student, &t.projection, &t.map, &batch, cfg.mode.distill_options())?;
                t.step(&lg.teacher, &lg.projection, cfg.teacher_lr)?;
                Ok(LocalUpdate {
                    student_grad: lg.student,
                    losses: lg.losses,
                })
            }
            None => {
                let (g, loss) = task_gradients(student, &batch)?;
                Ok(LocalUpdate {
                    student_grad: g,
                    losses: compose_losses(LossParts {
                        task_student: loss,
                        ..Default::default()
                    }),
                })
            }
        }
    }

    /// The client's contribution for one round.
    pub fn local_update(&mut self, cfg: &ProtocolConfig) -> Result<LocalUpdate> {
        if cfg.local_steps == 1 {
            let student = self.student.clone();
            return self.local_step(&student, cfg);
        }
        let mut local = self.student.clone();
        let mut losses = Vec::with_capacity(cfg.local_steps);
        for _ in 0..cfg.local_steps {
            let u = self.local_step(&local, cfg)?;
            local.sgd_step(&u.student_grad, cfg.student_lr)?;
            losses.push(u.losses);
        }
        let tensors: IndexMap<String, Matrix> = self
            .student
            .iter()
            .zip(local.iter())
            .map(|((name, before), (_, after))| {
                let mut d = before.sub(after)?;
                d.scale_in_place(1.0 / cfg.student_lr);
                Ok((name.to_string(), d))
            })
            .collect::<Result<_>>()?;
        Ok(LocalUpdate {
            student_grad: GradSet::from_tensors(tensors),
            losses: LossBreakdown::mean(&losses),
        })
    }
}

/// One serialized message as observed by the server.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoggedMessage {
    pub round: u32,
    pub direction: Direction,
    pub sender: u32,
    pub recipient: u32,
    pub bytes: Vec<u8>,
}

pub struct ServerState {
    round: usize,
    schedule: ThresholdSchedule,
    codec: Box<dyn Codec>,
    config: ProtocolConfig,
    ledger: CommLedger,
    log: Option<Vec<LoggedMessage>>,
    rng: Rng,
}

impl fmt::Debug for ServerState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ServerState")
            .field("round", &self.round)
            .field("schedule", &self.schedule)
            .field("codec", &self.codec.name())
            .field("config", &self.config)
            .finish()
    }
}

impl ServerState {
    pub fn new(
        config: ProtocolConfig,
        schedule: ThresholdSchedule,
        codec: Box<dyn Codec>,
        n_clients: usize,
        rng: Rng,
    ) -> Result<Self> {
        config.validate()?;
        schedule.validate()?;
        if n_clients == 0 {
            return Err(Error::Config("n_clients must be >= 1".into()));
        }
        Ok(Self {
            round: 0,
            schedule,
            codec,
            log: config.log_messages.then(Vec::new),
            config,
            ledger: CommLedger::new(n_clients),
            rng,
        })
    }

    pub fn with_reference_bytes(mut self, round_bytes: u64) -> Self {
        self.ledger = self.ledger.with_reference(round_bytes);
        self
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.config
    }

    pub fn schedule(&self) -> &ThresholdSchedule {
        &self.schedule
    }

    pub fn codec(&self) -> &dyn Codec {
        self.codec.as_ref()
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    pub fn messages(&self) -> Option<&[LoggedMessage]> {
        self.log.as_deref()
    }

    fn participants(&mut self, n: usize) -> Vec<usize> {
        if self.config.participation >= 1.0 {
            return (0..n).collect();
        }
        let k = ((self.config.participation * n as f64).round() as usize).clamp(1, n);
        let mut ids: Vec<usize> = (0..n).collect();
        self.rng.shuffle(&mut ids);
        ids.truncate(k);
        ids.sort_unstable();
        ids
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub threshold: f64,
    pub participants: Vec<usize>,
    /// Indexed by client id; `None` for clients that sat the round out.
    pub client_losses: Vec<Option<LossBreakdown>>,
    pub mean_losses: LossBreakdown,
    pub traffic: Vec<Traffic>,
    /// Per-matrix ranks of each upload (0 = sent raw).
    pub upload_ranks: Vec<Option<Vec<(String, usize)>>>,
    pub download_ranks: Vec<(String, usize)>,
    /// Singular values of the aggregated gradient, when recording is on.
    pub sigma: Vec<SigmaSnapshot>,
}

/// Elementwise sum in slice order.
pub fn aggregate(grads: &[GradSet]) -> Result<GradSet> {
    let (first, rest) = grads
        .split_first()
        .ok_or_else(|| Error::Protocol("nothing to aggregate".into()))?;
    let mut sum = first.clone();
    for g in rest {
        sum.add_assign(g)?;
    }
    Ok(sum)
}

fn seal(fg: &compress::FactorizedGradient, round: u32, sender: u32, direction: Direction, codec: &dyn Codec) -> Vec<u8> {
    Envelope {
        round,
        sender,
        direction,
        codec: codec.name().to_string(),
        payload: codec.encode(&compress::encode(fg)),
    }
    .encode()
}

fn open(
    bytes: &[u8],
    round: u32,
    sender: u32,
    direction: Direction,
    codec: &dyn Codec,
) -> Result<compress::FactorizedGradient> {
    let env = Envelope::decode(bytes)?;
    if env.round != round || env.sender != sender || env.direction != direction {
        return Err(Error::Protocol(format!(
            "unexpected envelope (round {}, sender {}, {:?}); wanted (round {round}, sender {sender}, {direction:?})",
            env.round, env.sender, env.direction
        )));
    }
    if env.codec != codec.name() {
        return Err(Error::Codec(format!("payload encoded with {:?}, expected {:?}", env.codec, codec.name())));
    }
    compress::decode(&codec.decode(&env.payload)?)
}

/// Bytes one client exchanges per round when the given architecture's
/// gradient travels raw in both directions.
pub fn uncompressed_round_bytes(model: &ModelConfig, codec: &dyn Codec) -> Result<u64> {
    model.validate()?;
    let zeros: IndexMap<String, Matrix> = model
        .param_layout()
        .into_iter()
        .map(|(n, (r, c))| (n, Matrix::zeros(r, c)))
        .collect();
    let fg = raw_payload(&GradSet::from_tensors(zeros));
    let up = seal(&fg, 0, 0, Direction::Upload, codec).len();
    let down = seal(&fg, 0, SERVER_ID, Direction::Download, codec).len();
    Ok((up + down) as u64)
}

/// Runs one synchronous round and advances the server's round counter.
pub fn run_round(server: &mut ServerState, clients: &mut [ClientState]) -> Result<RoundMetrics> {
    let n = clients.len();
    if n != server.ledger.n_clients() {
        return Err(Error::Protocol(format!(
            "{n} clients connected, ledger expects {}",
            server.ledger.n_clients()
        )));
    }
    for (i, c) in clients.iter().enumerate() {
        if c.client_id != i {
            return Err(Error::Protocol(format!("client at slot {i} has id {}", c.client_id)));
        }
        if c.teacher.is_some() != server.config.mode.has_teacher() {
            return Err(Error::Protocol(format!("client {i} does not match mode {}", server.config.mode)));
        }
        if c.student.config() != clients[0].student.config() {
            return Err(Error::Protocol(format!("client {i} holds a different shared model")));
        }
    }
    if server.round >= server.schedule.total_rounds {
        return Err(Error::Protocol(format!("all {} rounds already ran", server.schedule.total_rounds)));
    }

    let round = server.round;
    let wire_round = round as u32;
    let threshold = server.schedule.threshold_at(round)?;
    let participants = server.participants(n);
    let cfg = server.config;
    let codec = server.codec.as_ref();

    // Client phase: local gradients, teacher step, compress, upload.
    let mut active: Vec<&mut ClientState> = clients
        .iter_mut()
        .filter(|c| participants.binary_search(&c.client_id).is_ok())
        .collect();
    let uploads: Vec<Result<(usize, Vec<u8>, LossBreakdown, Vec<(String, usize)>)>> = active
        .par_iter_mut()
        .map(|c| {
            let u = c.local_update(&cfg)?;
            let fg = if cfg.mode.compresses() {
                factorize(&u.student_grad, threshold)?
            } else {
                raw_payload(&u.student_grad)
            };
            let bytes = seal(&fg, wire_round, c.client_id as u32, Direction::Upload, codec);
            Ok((c.client_id, bytes, u.losses, fg.ranks()))
        })
        .collect();
    drop(active);

    // Server barrier: decode, reconstruct, sum in client order, re-compress.
    server.ledger.begin_round();
    let mut client_losses = vec![None; n];
    let mut upload_ranks = vec![None; n];
    let mut received = Vec::with_capacity(participants.len());
    for up in uploads {
        let (id, bytes, losses, ranks) = up?;
        server.ledger.record_upload(id, bytes.len())?;
        let g = reconstruct(&open(&bytes, wire_round, id as u32, Direction::Upload, codec)?)?;
        g.check_layout(&clients[id].student)
            .map_err(|e| Error::Protocol(format!("upload from client {id}: {e}")))?;
        if let Some(log) = &mut server.log {
            log.push(LoggedMessage {
                round: wire_round,
                direction: Direction::Upload,
                sender: id as u32,
                recipient: SERVER_ID,
                bytes,
            });
        }
        client_losses[id] = Some(losses);
        upload_ranks[id] = Some(ranks);
        received.push(g);
    }
    let sum = aggregate(&received)?;
    let (compressed, sigma) = if cfg.record_sigma {
        factorize_traced(&sum, threshold)?
    } else if cfg.mode.compresses() {
        (factorize(&sum, threshold)?, Vec::new())
    } else {
        (raw_payload(&sum), Vec::new())
    };
    let broadcast = if cfg.mode.compresses() {
        compressed
    } else {
        raw_payload(&sum)
    };
    let download_ranks = broadcast.ranks();
    let down = seal(&broadcast, wire_round, SERVER_ID, Direction::Download, codec);
    for id in 0..n {
        server.ledger.record_download(id, down.len())?;
        if let Some(log) = &mut server.log {
            log.push(LoggedMessage {
                round: wire_round,
                direction: Direction::Download,
                sender: SERVER_ID,
                recipient: id as u32,
                bytes: down.clone(),
            });
        }
    }

    // Client phase: every client applies the same decoded update.
    let step = cfg.student_lr / participants.len() as f64;
    clients
        .par_iter_mut()
        .map(|c| {
            let g = reconstruct(&open(&down, wire_round, SERVER_ID, Direction::Download, codec)?)?;
            c.student.sgd_step(&g, step)
        })
        .collect::<Result<Vec<()>>>()?;

    server.round += 1;
    let seen: Vec<LossBreakdown> = client_losses.iter().flatten().copied().collect();
    Ok(RoundMetrics {
        round,
        threshold,
        participants,
        client_losses,
        mean_losses: LossBreakdown::mean(&seen),
        traffic: server.ledger.rounds().last().cloned().unwrap_or_default(),
        upload_ranks,
        download_ranks,
        sigma,
    })
}

/// True when every client's shared-model copy matches client 0 bit for bit.
pub fn students_identical(clients: &[ClientState]) -> bool {
    let Some(first) = clients.first() else {
        return true;
    };
    clients.iter().all(|c| {
        c.student.iter().zip(first.student.iter()).all(|((na, a), (nb, b))| {
            na == nb && a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEvaluation {
    /// `teacher.{i}` or `student`.
    pub model: String,
    pub metrics: Classification,
}

/// Scores every client's teacher and the shared model on `eval`.
pub fn evaluate(clients: &[ClientState], eval: &[Sample]) -> Result<Vec<ModelEvaluation>> {
    if eval.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let first = clients
        .first()
        .ok_or_else(|| Error::InvalidArgument("no clients to evaluate".into()))?;
    let mut models: Vec<(String, &ParamSet)> = clients
        .iter()
        .filter_map(|c| c.teacher.as_ref().map(|t| (format!("teacher.{}", c.client_id), &t.params)))
        .collect();
    models.push(("student".to_string(), &first.student));
    models
        .par_iter()
        .map(|(name, p)| {
            Ok(ModelEvaluation {
                model: name.clone(),
                metrics: evaluate_model(p, eval)?,
            })
        })
        .collect()
}

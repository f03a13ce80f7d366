//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use fedkd::compress::{factorize, reconstruct, select_rank, Payload, ThresholdSchedule};
use fedkd::data::Sample;
use fedkd::distill::{
    adaptive_weight, cross_entropy, hidden_mse_terms, kl_divergence, local_gradients, one_hot, task_gradients,
    DistillOptions, LayerMap, Projection,
};
use fedkd::experiment::{build, execute, run_experiment, ArchConfig, DataConfig, ExperimentConfig};
use fedkd::federation::{
    codec_by_name, evaluate_model, run_round, students_identical, uncompressed_round_bytes, Direction,
    Envelope, Mode, RoundMetrics, ServerState,
};
use fedkd::nn::{forward, init_model, GradSet, ModelConfig, ParamSet};
use fedkd::numerics::{svd, Matrix, Rng};
use indexmap::IndexMap;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: fedkd::Error) -> String {
    e.to_string()
}

/// Desk-scale setup shared by the communication and learning criteria.
fn desk_config(seed: u64, mode: Mode, rounds: usize) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        n_clients: 4,
        total_rounds: rounds,
        teacher: ArchConfig {
            num_layers: 4,
            hidden_dim: 32,
            num_heads: 4,
        },
        student: ArchConfig {
            num_layers: 2,
            hidden_dim: 32,
            num_heads: 4,
        },
        input_dim: 8,
        num_classes: 4,
        seq_len: 8,
        teacher_lr: 0.05,
        student_lr: 0.05,
        t_start: 0.95,
        t_end: 0.98,
        mode,
        batch_size: 16,
        data: DataConfig {
            num_samples: 2000,
            noise: 0.3,
            ..Default::default()
        },
        eval_fraction: 0.2,
        eval_every: rounds,
        ..Default::default()
    }
}

// ---------------------------------------------------------------- 1

struct FdProblem {
    teacher: ParamSet,
    student: ParamSet,
    projection: Projection,
    map: LayerMap,
    batch: Vec<Sample>,
    /// Adaptive weights at the base point, held fixed under perturbation.
    weights: Vec<f64>,
}

impl FdProblem {
    fn teacher_loss(&self, teacher: &ParamSet, projection: &Projection) -> f64 {
        let mut total = 0.0;
        for (s, &w) in self.batch.iter().zip(&self.weights) {
            let tt = forward(teacher, &s.features).unwrap();
            let ts = forward(&self.student, &s.features).unwrap();
            let y = one_hot(s.label, teacher.config().num_classes);
            let (mh, ma) = hidden_mse_terms(&tt, &ts, projection, &self.map).unwrap();
            total += cross_entropy(&y, &tt.probs).unwrap() + w * kl_divergence(&ts.probs, &tt.probs).unwrap() + w * (mh + ma);
        }
        total / self.batch.len() as f64
    }

    fn student_loss(&self, student: &ParamSet) -> f64 {
        let mut total = 0.0;
        for (s, &w) in self.batch.iter().zip(&self.weights) {
            let tt = forward(&self.teacher, &s.features).unwrap();
            let ts = forward(student, &s.features).unwrap();
            let y = one_hot(s.label, student.config().num_classes);
            let (mh, ma) = hidden_mse_terms(&tt, &ts, &self.projection, &self.map).unwrap();
            total += cross_entropy(&y, &ts.probs).unwrap() + w * kl_divergence(&tt.probs, &ts.probs).unwrap() + w * (mh + ma);
        }
        total / self.batch.len() as f64
    }
}

const FD_EPS: f64 = 1e-5;

fn within(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= 1e-6 + 1e-4 * numeric.abs()
}

fn fd_params(
    params: &ParamSet,
    grads: &GradSet,
    loss: impl Fn(&ParamSet) -> f64,
    worst: &mut f64,
    checked: &mut usize,
) -> Vec<String> {
    let mut failures = Vec::new();
    let mut p = params.clone();
    for (name, g) in grads.iter() {
        for idx in 0..g.len() {
            let orig = p.get(name).data()[idx];
            p.get_mut(name).unwrap().data_mut()[idx] = orig + FD_EPS;
            let up = loss(&p);
            p.get_mut(name).unwrap().data_mut()[idx] = orig - FD_EPS;
            let down = loss(&p);
            p.get_mut(name).unwrap().data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * FD_EPS);
            let a = g.data()[idx];
            *checked += 1;
            *worst = worst.max((a - numeric).abs() / (1e-6 + 1e-4 * numeric.abs()));
            if !within(a, numeric) {
                failures.push(format!("{name}[{idx}]: analytic {a:e} vs numeric {numeric:e}"));
            }
        }
    }
    failures
}

fn gradient_oracle() -> Outcome {
    let base = ModelConfig {
        num_layers: 4,
        hidden_dim: 16,
        num_heads: 2,
        input_dim: 3,
        num_classes: 3,
        seq_len: 4,
    };
    let mut rng = Rng::new(2024);
    let perturb = |p: &mut ParamSet, rng: &mut Rng| {
        for (_, m) in p.iter_mut() {
            for v in m.data_mut() {
                *v += 0.1 * rng.normal();
            }
        }
    };
    let mut teacher = init_model(&base, &mut rng).map_err(err)?;
    let mut student = init_model(&base.with_layers(2), &mut rng).map_err(err)?;
    perturb(&mut teacher, &mut rng);
    perturb(&mut student, &mut rng);
    let mut projection = Projection::identity(16, 16);
    for v in projection.w_h.data_mut() {
        *v += 0.1 * rng.normal();
    }
    let map = LayerMap::uniform(2, 4).map_err(err)?;
    let batch: Vec<Sample> = (0..2)
        .map(|i| Sample {
            features: Matrix::from_vec(4, 3, (0..12).map(|_| rng.normal()).collect()).unwrap(),
            label: i % 3,
        })
        .collect();
    let weights = batch
        .iter()
        .map(|s| {
            let y = one_hot(s.label, 3);
            let lt = cross_entropy(&y, &forward(&teacher, &s.features).unwrap().probs).unwrap();
            let ls = cross_entropy(&y, &forward(&student, &s.features).unwrap().probs).unwrap();
            adaptive_weight(lt, ls)
        })
        .collect();
    let prob = FdProblem {
        teacher,
        student,
        projection,
        map,
        batch,
        weights,
    };
    let lg = local_gradients(
        &prob.teacher,
        &prob.student,
        &prob.projection,
        &prob.map,
        &prob.batch,
        DistillOptions::default(),
    )
    .map_err(err)?;

    let reported = (prob.teacher_loss(&prob.teacher, &prob.projection) - lg.losses.total_teacher).abs()
        + (prob.student_loss(&prob.student) - lg.losses.total_student).abs();
    if reported > 1e-12 {
        return Err(format!("oracle loss disagrees with reported totals by {reported:e}"));
    }

    let (mut worst, mut checked) = (0.0f64, 0usize);
    let mut failures = fd_params(
        &prob.teacher,
        &lg.teacher,
        |p| prob.teacher_loss(p, &prob.projection),
        &mut worst,
        &mut checked,
    );
    failures.extend(fd_params(&prob.student, &lg.student, |p| prob.student_loss(p), &mut worst, &mut checked));
    let mut proj = prob.projection.clone();
    for idx in 0..proj.w_h.len() {
        let orig = proj.w_h.data()[idx];
        proj.w_h.data_mut()[idx] = orig + FD_EPS;
        let up = prob.teacher_loss(&prob.teacher, &proj);
        proj.w_h.data_mut()[idx] = orig - FD_EPS;
        let down = prob.teacher_loss(&prob.teacher, &proj);
        proj.w_h.data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * FD_EPS);
        let a = lg.projection.data()[idx];
        checked += 1;
        worst = worst.max((a - numeric).abs() / (1e-6 + 1e-4 * numeric.abs()));
        if !within(a, numeric) {
            failures.push(format!("w_h[{idx}]: analytic {a:e} vs numeric {numeric:e}"));
        }
    }
    check(
        failures.is_empty(),
        format!(
            "{checked} gradient entries, worst error at {:.1e} of tolerance{}",
            worst,
            failures.first().map(|f| format!("; first failure {f}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------- 2

fn scan_oracle(sigma: &[f64], t: f64) -> usize {
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return 1;
    }
    for k in 1..=sigma.len() {
        let head: f64 = sigma[..k].iter().map(|s| s * s).sum();
        if head / total > t {
            return k;
        }
    }
    sigma.len()
}

fn rank_selection() -> Outcome {
    let mut rng = Rng::new(7);
    let ts = [0.5, 0.9, 0.95, 0.98, 1.0];
    let mut mismatches = 0;
    for case in 0..1000 {
        let n = 1 + rng.below(64);
        let mut sigma: Vec<f64> = match case % 4 {
            0 => (0..n).map(|_| rng.uniform(0.0, 10.0)).collect(),
            1 => (0..n).map(|i| 0.5f64.powi(i as i32) * rng.uniform(0.5, 2.0)).collect(),
            2 => (0..n).map(|i| if i < n / 2 { rng.uniform(1.0, 2.0) } else { 0.0 }).collect(),
            _ => vec![rng.uniform(0.0, 1.0).round(); n],
        };
        sigma.sort_by(|a, b| b.total_cmp(a));
        for &t in &ts {
            if select_rank(&sigma, t).map_err(err)? != scan_oracle(&sigma, t) {
                mismatches += 1;
            }
        }
    }
    check(mismatches == 0, format!("5000 cases, {mismatches} mismatches"))
}

// ---------------------------------------------------------------- 3

fn random_gradient(rng: &mut Rng) -> Matrix {
    let p = 2 + rng.below(47);
    let q = 2 + rng.below(47);
    let decay = rng.uniform(0.3, 1.0);
    let mut m = Matrix::from_vec(p, q, (0..p * q).map(|_| rng.normal()).collect()).unwrap();
    for j in 0..q {
        let s = decay.powi(j as i32);
        for i in 0..p {
            m.set(i, j, m.get(i, j) * s);
        }
    }
    m
}

fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm()
}

fn energy_bound() -> Outcome {
    let mut rng = Rng::new(11);
    let bound = 0.05f64.sqrt();
    let (mut worst95, mut worst_trunc, mut worst1) = (0.0f64, 0.0f64, 0.0f64);
    let mut factorized = 0;
    for _ in 0..200 {
        let m = random_gradient(&mut rng);
        let g = GradSet::from_tensors(IndexMap::from([("w".to_string(), m.clone())]));
        let fg = factorize(&g, 0.95).map_err(err)?;
        factorized += usize::from(fg.entries[0].rank() > 0);
        worst95 = worst95.max(rel_err(reconstruct(&fg).map_err(err)?.get("w").unwrap(), &m));
        let fg1 = factorize(&g, 1.0).map_err(err)?;
        worst1 = worst1.max(rel_err(reconstruct(&fg1).map_err(err)?.get("w").unwrap(), &m));

        // the truncation itself, whether or not it would be sent factorized
        let d = svd(&m).map_err(err)?;
        let k = select_rank(&d.sigma, 0.95).map_err(err)?;
        let mut s = d.sigma.clone();
        s[k..].iter_mut().for_each(|v| *v = 0.0);
        let approx = fedkd::numerics::SvdResult {
            u: d.u.clone(),
            sigma: s,
            vt: d.vt.clone(),
        }
        .reconstruct();
        worst_trunc = worst_trunc.max(rel_err(&approx, &m));
    }
    check(
        worst95 < bound && worst_trunc < bound && worst1 < 1e-8,
        format!(
            "T=0.95 worst {worst95:.4} (truncation alone {worst_trunc:.4}, {factorized}/200 sent factorized) < {bound:.4}; T=1 worst {worst1:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- 4

fn schedule_exactness() -> Outcome {
    let total = 100;
    let s = ThresholdSchedule::new(0.95, 0.98, total).map_err(err)?;
    let t0 = s.threshold_at(0).map_err(err)?;
    let tr = s.threshold_at(total).map_err(err)?;
    let mut worst = 0.0f64;
    let mut rng = Rng::new(3);
    for _ in 0..1000 {
        let (a, b, c) = (rng.below(total + 1), rng.below(total + 1), rng.below(total + 1));
        let (ta, tb, tc) = (s.threshold_at(a).unwrap(), s.threshold_at(b).unwrap(), s.threshold_at(c).unwrap());
        let cross = (tb - ta) * (c as f64 - a as f64) - (tc - ta) * (b as f64 - a as f64);
        worst = worst.max(cross.abs());
    }
    check(
        (t0 - 0.95).abs() <= 1e-12 && (tr - 0.98).abs() <= 1e-12 && worst <= 1e-12,
        format!("T(0)={t0}, T({total})={tr}, worst collinearity residual {worst:.1e}"),
    )
}

// ---------------------------------------------------------------- 5

fn protocol_equivalence() -> Outcome {
    let config = ExperimentConfig {
        n_clients: 1,
        total_rounds: 10,
        t_start: 1.0,
        t_end: 1.0,
        codec: "identity".into(),
        ..desk_config(5, Mode::Fedkd, 10)
    };
    let mut setup = build(&config).map_err(err)?;
    let mut local = setup.clients[0].clone();
    for _ in 0..10 {
        run_round(&mut setup.server, &mut setup.clients).map_err(err)?;
    }
    // Same client trained alone: same batches, same updates, no messages.
    for _ in 0..10 {
        let batch: Vec<Sample> = local
            .sampler
            .next_batch(config.batch_size)
            .map_err(err)?
            .into_iter()
            .map(|i| local.shard[i].clone())
            .collect();
        let t = local.teacher.as_mut().unwrap();
        let lg = local_gradients(&t.params, &local.student, &t.projection, &t.map, &batch, DistillOptions::default())
            .map_err(err)?;
        t.step(&lg.teacher, &lg.projection, config.teacher_lr).map_err(err)?;
        local.student.sgd_step(&lg.student, config.student_lr).map_err(err)?;
    }
    let diff = |a: &ParamSet, b: &ParamSet| {
        a.iter()
            .zip(b.iter())
            .map(|((_, x), (_, y))| x.max_abs_diff(y))
            .fold(0.0f64, f64::max)
    };
    let ds = diff(&setup.clients[0].student, &local.student);
    let dt = diff(&setup.clients[0].teacher.as_ref().unwrap().params, &local.teacher.as_ref().unwrap().params);
    check(ds <= 1e-8 && dt <= 1e-8, format!("max |Δ| student {ds:.1e}, teacher {dt:.1e} after 10 rounds"))
}

// ---------------------------------------------------------------- 6

fn synchrony_and_locality() -> Outcome {
    let config = desk_config(6, Mode::Fedkd, 50);
    let mut setup = build(&config).map_err(err)?;
    let mut protocol = config.protocol();
    protocol.log_messages = true;
    setup.server = ServerState::new(
        protocol,
        config.schedule().map_err(err)?,
        codec_by_name(&config.codec, config.seed).map_err(err)?,
        config.n_clients,
        Rng::new(6),
    )
    .map_err(err)?;

    // Values with a short mantissa (0, ±1, cancellation residue such as the
    // key-bias gradients) carry no identifying information and are skipped.
    let informative = |b: &u64| (b & ((1u64 << 52) - 1)).trailing_zeros() < 32;
    let teacher_bits = |clients: &[fedkd::federation::ClientState], into: &mut HashSet<u64>| {
        for c in clients {
            let t = c.teacher.as_ref().unwrap();
            for (_, m) in t.params.iter() {
                into.extend(m.data().iter().map(|v| v.to_bits()).filter(informative));
            }
            into.extend(t.projection.w_h.data().iter().map(|v| v.to_bits()).filter(informative));
        }
    };
    let layout: Vec<(String, (usize, usize))> = setup.clients[0]
        .student
        .iter()
        .map(|(n, m)| (n.to_string(), m.shape()))
        .collect();

    let mut desync = Vec::new();
    let mut seen_teacher = HashSet::new();
    let mut logged = 0;
    let mut violations = Vec::new();
    for r in 0..50 {
        teacher_bits(&setup.clients, &mut seen_teacher);
        run_round(&mut setup.server, &mut setup.clients).map_err(err)?;
        teacher_bits(&setup.clients, &mut seen_teacher);
        if !students_identical(&setup.clients) {
            desync.push(r);
        }
        let msgs = setup.server.messages().unwrap();
        for m in &msgs[logged..] {
            let env = Envelope::decode(&m.bytes).map_err(err)?;
            let plain = setup.server.codec().decode(&env.payload).map_err(err)?;
            let fg = fedkd::compress::decode(&plain).map_err(err)?;
            let names: Vec<(String, (usize, usize))> =
                fg.entries.iter().map(|e| (e.name.clone(), e.orig_shape)).collect();
            if names != layout {
                violations.push(format!("round {r}: payload layout is not the student's"));
            }
            let carried = fg.entries.iter().flat_map(|e| -> Vec<f64> {
                match &e.payload {
                    Payload::Raw(m) => m.data().to_vec(),
                    Payload::Factorized { u, sigma, v } => [u.data(), sigma, v.data()].concat(),
                }
            });
            if carried.map(f64::to_bits).any(|b| seen_teacher.contains(&b)) {
                violations.push(format!("round {r}: teacher value found in {:?} message", m.direction));
            }
        }
        logged = msgs.len();
    }
    // control: a payload that does carry teacher weights must be flagged
    let t = &setup.clients[0].teacher.as_ref().unwrap().params;
    let leak = GradSet::from_tensors(t.iter().map(|(n, m)| (n.to_string(), m.clone())).collect());
    let caught = fedkd::compress::raw_payload(&leak)
        .entries
        .iter()
        .any(|e| matches!(&e.payload, Payload::Raw(m) if m.data().iter().any(|v| seen_teacher.contains(&v.to_bits()))));
    if !caught {
        violations.push("audit failed to flag a payload built from teacher weights".into());
    }

    let msgs = setup.server.messages().unwrap();
    let ledger = setup.server.ledger();
    for c in 0..config.n_clients as u32 {
        let up: usize = msgs
            .iter()
            .filter(|m| m.direction == Direction::Upload && m.sender == c)
            .map(|m| m.bytes.len())
            .sum();
        let down: usize = msgs
            .iter()
            .filter(|m| m.direction == Direction::Download && m.recipient == c)
            .map(|m| m.bytes.len())
            .sum();
        let t = ledger.totals()[c as usize];
        if t.upload_bytes != up as u64 || t.download_bytes != down as u64 {
            violations.push(format!("client {c}: ledger disagrees with message log"));
        }
    }
    if !ledger.is_consistent() {
        violations.push("ledger totals differ from per-round sums".into());
    }
    check(
        desync.is_empty() && violations.is_empty(),
        format!(
            "{} messages audited value by value against {} teacher values; desynchronized rounds {:?}; {}",
            msgs.len(),
            seen_teacher.len(),
            desync,
            violations.first().cloned().unwrap_or_else(|| "no violations".into())
        ),
    )
}

// ---------------------------------------------------------------- 7

/// `f64` values a payload carries for one matrix: `PQ` raw, `PK + K + KQ`
/// factorized.
fn payload_floats(shape: (usize, usize), k: usize) -> usize {
    let (p, q) = shape;
    if k == 0 {
        p * q
    } else {
        p * k + k + k * q
    }
}

fn communication_saving() -> Outcome {
    let rounds = 100;
    let config = desk_config(7, Mode::Fedkd, rounds);
    let mut setup = build(&config).map_err(err)?;
    let shapes: IndexMap<String, (usize, usize)> = config.student_model().param_layout().into_iter().collect();
    let student_params = config.student_model().param_count() as f64;
    let teacher_params = config.teacher_model().param_count() as f64;

    let (mut sent, mut raw) = (0usize, 0usize);
    let mut metrics: Vec<RoundMetrics> = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let m = run_round(&mut setup.server, &mut setup.clients).map_err(err)?;
        let mut add = |ranks: &[(String, usize)]| {
            for (name, k) in ranks {
                sent += payload_floats(shapes[name], *k);
                raw += payload_floats(shapes[name], 0);
            }
        };
        for up in m.upload_ranks.iter().flatten() {
            add(up);
        }
        for _ in 0..config.n_clients {
            add(&m.download_ranks);
        }
        metrics.push(m);
    }
    let fedkd_bytes = setup.server.ledger().mean_client_bytes();

    let full = build(&desk_config(7, Mode::FedavgFull, rounds)).map_err(err)?;
    let mut full = full;
    for _ in 0..rounds {
        run_round(&mut full.server, &mut full.clients).map_err(err)?;
    }
    let fedavg_bytes = full.server.ledger().mean_client_bytes();
    let analytic = rounds as f64
        * uncompressed_round_bytes(&config.teacher_model(), full.server.codec()).map_err(err)? as f64;

    let rho = raw as f64 / sent as f64;
    let predicted = student_params / (rho * teacher_params);
    let measured = fedkd_bytes / fedavg_bytes;
    let deviation = (measured - predicted).abs() / predicted;
    check(
        measured < 0.5 && deviation <= 0.2 && fedavg_bytes == analytic,
        format!(
            "fedkd {fedkd_bytes:.0} vs fedavg_full {fedavg_bytes:.0} bytes/client (fraction {measured:.4}); \
             |Θs|/(ρ|Θt|) = {student_params}/({rho:.3}·{teacher_params}) = {predicted:.4}, deviation {:.1}%",
            100.0 * deviation
        ),
    )
}

// ---------------------------------------------------------------- 8 and 9

struct Efficacy {
    teacher_accuracy: Vec<f64>,
    student_accuracy: f64,
}

fn train_desk(seed: u64, mode: Mode) -> Result<Efficacy, String> {
    let s = execute(&desk_config(seed, mode, 300)).map_err(err)?.summary;
    let teacher_accuracy = (0..4).map(|i| s.final_accuracy[&format!("teacher.{i}")]).collect();
    Ok(Efficacy {
        teacher_accuracy,
        student_accuracy: s.student_accuracy(),
    })
}

/// Plain centralized SGD on the pooled training data with the teacher
/// architecture and the same per-round sample budget.
fn centralized_reference(seed: u64) -> Result<f64, String> {
    let config = desk_config(seed, Mode::FedavgFull, 300);
    let setup = build(&config).map_err(err)?;
    let pooled: Vec<Sample> = setup.clients.iter().flat_map(|c| c.shard.iter().cloned()).collect();
    let mut model = setup.clients[0].student.clone();
    let mut sampler = fedkd::federation::BatchSampler::new(pooled.len(), Rng::new(seed));
    for _ in 0..300 {
        let batch: Vec<Sample> = sampler
            .next_batch(config.batch_size * config.n_clients)
            .map_err(err)?
            .into_iter()
            .map(|i| pooled[i].clone())
            .collect();
        let (g, _) = task_gradients(&model, &batch).map_err(err)?;
        model.sgd_step(&g, config.student_lr).map_err(err)?;
    }
    Ok(evaluate_model(&model, &setup.eval).map_err(err)?.accuracy)
}

fn learning_efficacy(run: &Efficacy) -> Outcome {
    let reference = centralized_reference(0)?;
    let min_teacher = run.teacher_accuracy.iter().copied().fold(1.0, f64::min);
    check(
        reference > 0.95 && min_teacher >= 0.9 && run.student_accuracy >= 0.9,
        format!(
            "centralized reference {reference:.4}; teachers {:?}, student {:.4} after 300 rounds",
            run.teacher_accuracy, run.student_accuracy
        ),
    )
}

fn ablation_direction(seed0: &Efficacy) -> Outcome {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut full = Vec::new();
    let mut ablated = Vec::new();
    let mut rows = Vec::new();
    for seed in 0..5u64 {
        let a = if seed == 0 {
            mean(&seed0.teacher_accuracy)
        } else {
            mean(&train_desk(seed, Mode::Fedkd)?.teacher_accuracy)
        };
        let b = mean(&train_desk(seed, Mode::FedkdNoDistill)?.teacher_accuracy);
        rows.push(format!("seed {seed}: {a:.4} vs {b:.4}"));
        full.push(a);
        ablated.push(b);
    }
    let (mf, ma) = (mean(&full), mean(&ablated));
    check(
        mf >= ma - 0.005,
        format!("mean teacher accuracy fedkd {mf:.4} vs fedkd_no_distill {ma:.4} [{}]", rows.join("; ")),
    )
}

// ---------------------------------------------------------------- 10

fn determinism() -> Outcome {
    let config = ExperimentConfig {
        record_sigma: true,
        codec: "xor".into(),
        eval_every: 5,
        ..desk_config(10, Mode::Fedkd, 20)
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_experiment(&config, dir.path().join("a")).map_err(err)?;
    run_experiment(&config, dir.path().join("b")).map_err(err)?;
    let mut compared = Vec::new();
    for f in ["metrics.jsonl", "summary.json", "sigma.jsonl", "checkpoints/student.fkdp"] {
        let a = std::fs::read(dir.path().join("a").join(f)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dir.path().join("b").join(f)).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("{f} differs between identical runs"));
        }
        compared.push(format!("{f} ({} bytes)", a.len()));
    }
    Ok(format!("byte-identical: {}", compared.join(", ")))
}

// ----------------------------------------------------------------

fn main() {
    let mut failed = 0;
    let mut report = |id: usize, name: &str, limit: Option<Duration>, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = f();
        let elapsed = start.elapsed();
        let over = limit.is_some_and(|l| elapsed > l);
        let (status, detail) = match (&outcome, over) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => ("FAIL", format!("{d}; exceeded {:?}", limit.unwrap())),
            (Err(d), _) => ("FAIL", d.clone()),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("criterion {id:>2} [{name}]: {status} ({:.1}s) {detail}", elapsed.as_secs_f64());
    };

    report(1, "gradient oracle", Some(Duration::from_secs(120)), &mut gradient_oracle);
    report(2, "rank selection", Some(Duration::from_secs(5)), &mut rank_selection);
    report(3, "energy bound", Some(Duration::from_secs(30)), &mut energy_bound);
    report(4, "schedule", None, &mut schedule_exactness);
    report(5, "protocol equivalence", Some(Duration::from_secs(60)), &mut protocol_equivalence);
    report(6, "student synchrony", None, &mut synchrony_and_locality);
    report(7, "communication saving", Some(Duration::from_secs(300)), &mut communication_saving);

    let mut seed0 = None;
    report(8, "learning efficacy", Some(Duration::from_secs(600)), &mut || {
        let run = train_desk(0, Mode::Fedkd)?;
        let out = learning_efficacy(&run);
        seed0 = Some(run);
        out
    });
    report(9, "ablation direction", None, &mut || match seed0.take() {
        Some(run) => ablation_direction(&run),
        None => ablation_direction(&train_desk(0, Mode::Fedkd)?),
    });
    report(10, "determinism", None, &mut determinism);

    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}

use std::fs;
use std::path::PathBuf;

use fedkd::experiment::{report_energy, run_experiment, sweep, ArchConfig, DataConfig, ExperimentConfig, SweepParam};
use fedkd::federation::Mode;
use fedkd::nn::load_checkpoint;

fn tiny(mode: Mode) -> ExperimentConfig {
    ExperimentConfig {
        seed: 3,
        n_clients: 2,
        total_rounds: 6,
        teacher: ArchConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
        },
        student: ArchConfig {
            num_layers: 1,
            hidden_dim: 8,
            num_heads: 2,
        },
        input_dim: 4,
        num_classes: 3,
        seq_len: 4,
        mode,
        batch_size: 8,
        data: DataConfig {
            num_samples: 120,
            ..Default::default()
        },
        eval_every: 3,
        record_sigma: true,
        ..Default::default()
    }
}

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

#[test]
fn summary_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&tiny(Mode::Fedkd), dir.path()).unwrap();
    let got = fs::read_to_string(dir.path().join("summary.json")).unwrap();
    let path = golden_path("tiny_summary.json");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, &got).unwrap();
    }
    let want = fs::read_to_string(&path).expect("golden missing; rerun with UPDATE_GOLDEN=1");
    assert_eq!(got, want);
}

#[test]
fn run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(Mode::Fedkd);
    let s = run_experiment(&config, dir.path()).unwrap();
    for f in ["config.kv", "metrics.jsonl", "sigma.jsonl", "summary.json"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let student = load_checkpoint(&config.student_model(), dir.path().join("checkpoints/student.fkdp")).unwrap();
    assert_eq!(student.param_count(), config.student_model().param_count());
    for i in 0..2 {
        load_checkpoint(&config.teacher_model(), dir.path().join(format!("checkpoints/teacher.{i}.fkdp"))).unwrap();
    }

    // one row per model per round
    let metrics = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 6 * 3);
    let last: serde_json::Value = serde_json::from_str(metrics.lines().last().unwrap()).unwrap();
    assert_eq!(last["model"], "student");
    assert_eq!(last["accuracy"].as_f64().unwrap(), s.student_accuracy());

    // the written config reproduces the run
    let again = ExperimentConfig::load(dir.path().join("config.kv")).unwrap();
    assert_eq!(again, config);
}

#[test]
fn config_round_trips_through_both_syntaxes() {
    let c = tiny(Mode::FedkdNoHidden);
    assert_eq!(ExperimentConfig::parse(&c.to_kv()).unwrap(), c);
    assert_eq!(ExperimentConfig::parse(&c.to_json()).unwrap(), c);
}

#[test]
fn ablations_change_the_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let mut losses = Vec::new();
    for mode in Mode::ALL {
        let s = run_experiment(&tiny(mode), dir.path().join(mode.name())).unwrap();
        assert!(s.final_losses.is_finite(), "{mode}");
        losses.push(s.final_losses.total_student);
    }
    for i in 0..losses.len() {
        for j in i + 1..losses.len() {
            assert_ne!(losses[i], losses[j], "{} vs {}", Mode::ALL[i], Mode::ALL[j]);
        }
    }
}

#[test]
fn looser_threshold_never_costs_more() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny(Mode::Fedkd);
    config.t_end = 1.0;
    let rows = sweep(&config, SweepParam::TStart, &[0.5, 0.8, 1.0], dir.path(), false).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].total_bytes <= rows[1].total_bytes);
    assert!(rows[1].total_bytes <= rows[2].total_bytes);
    let table = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
    assert!(dir.path().join("t_start_0.5/summary.json").is_file());
}

#[test]
fn parallel_sweep_matches_sequential() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(Mode::Fedkd);
    let a = sweep(&config, SweepParam::NClients, &[1.0, 2.0], dir.path().join("a"), false).unwrap();
    let b = sweep(&config, SweepParam::NClients, &[1.0, 2.0], dir.path().join("b"), true).unwrap();
    assert_eq!(a, b);
}

#[test]
fn energy_report_from_a_run() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&tiny(Mode::Fedkd), dir.path()).unwrap();
    let r = report_energy(dir.path()).unwrap();
    assert!(!r.ranks.is_empty());
    for p in &r.energy {
        assert!(p.cumulative > 0.0 && p.cumulative <= 1.0 + 1e-12);
    }
    assert!(dir.path().join("energy.csv").is_file());
    assert!(dir.path().join("ranks.csv").is_file());
}

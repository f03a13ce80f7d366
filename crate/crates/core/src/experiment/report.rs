use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::compress::select_rank;
use crate::error::{Error, Result};

use super::SigmaRow;

/// Threshold at which `ranks.csv` reports the required rank.
pub const ENERGY_THRESHOLD: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnergyPoint {
    pub round: usize,
    pub param: String,
    /// 1-based count of leading singular values.
    pub index: usize,
    pub cumulative: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankPoint {
    pub round: usize,
    pub param: String,
    pub k: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EnergyReport {
    pub energy: Vec<EnergyPoint>,
    pub ranks: Vec<RankPoint>,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `sigma.jsonl` from a run directory and writes `energy.csv`
/// (cumulative energy fraction per singular value) and `ranks.csv` (rank
/// needed at [`ENERGY_THRESHOLD`]) next to it.
pub fn report_energy(run_dir: impl AsRef<Path>) -> Result<EnergyReport> {
    let run_dir = run_dir.as_ref();
    let path = run_dir.join("sigma.jsonl");
    let text = fs::read_to_string(&path).map_err(|_| {
        Error::MissingArtifact(format!("{} (rerun with record_sigma = true)", path.display()))
    })?;
    let mut report = EnergyReport::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: SigmaRow = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let total: f64 = row.sigma.iter().map(|s| s * s).sum();
        let mut acc = 0.0;
        for (j, s) in row.sigma.iter().enumerate() {
            acc += s * s;
            report.energy.push(EnergyPoint {
                round: row.round,
                param: row.name.clone(),
                index: j + 1,
                cumulative: if total > 0.0 { acc / total } else { 1.0 },
            });
        }
        report.ranks.push(RankPoint {
            round: row.round,
            param: row.name.clone(),
            k: select_rank(&row.sigma, ENERGY_THRESHOLD)?,
        });
    }
    if report.ranks.is_empty() {
        return Err(Error::MissingArtifact(format!("{} holds no snapshots", path.display())));
    }
    write_csv(&run_dir.join("energy.csv"), &report.energy)?;
    write_csv(&run_dir.join("ranks.csv"), &report.ranks)?;
    Ok(report)
}

//! Dynamic low-rank gradient approximation.
//!
//! Each gradient matrix is decomposed with an SVD and truncated to the
//! smallest rank whose retained energy `Σ_{i≤K} σ_i² / Σ σ_i²` strictly
//! exceeds the threshold `T`. The threshold moves linearly from `t_start` to
//! `t_end` over training. A matrix is only sent factorized when
//! `P·K + K² + K·Q < P·Q`; otherwise it travels raw.

mod wire;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::GradSet;
use crate::numerics::{svd, Matrix};

pub use wire::{decode, encode, encoded_len, HEADER_LEN, MAGIC, VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSchedule {
    pub t_start: f64,
    pub t_end: f64,
    pub total_rounds: usize,
}

impl ThresholdSchedule {
    pub fn new(t_start: f64, t_end: f64, total_rounds: usize) -> Result<Self> {
        let s = Self {
            t_start,
            t_end,
            total_rounds,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("t_start", self.t_start), ("t_end", self.t_end)] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::InvalidArgument(format!("{name} = {t} outside (0, 1]")));
            }
        }
        if self.total_rounds == 0 {
            return Err(Error::InvalidArgument("total_rounds must be >= 1".into()));
        }
        Ok(())
    }

    /// `t_start + (t_end - t_start) * round / total_rounds`.
    pub fn threshold_at(&self, round: usize) -> Result<f64> {
        if round > self.total_rounds {
            return Err(Error::InvalidArgument(format!(
                "round {round} beyond schedule length {}",
                self.total_rounds
            )));
        }
        let frac = round as f64 / self.total_rounds as f64;
        Ok(self.t_start + (self.t_end - self.t_start) * frac)
    }
}

pub fn threshold_at(schedule: &ThresholdSchedule, round: usize) -> Result<f64> {
    schedule.threshold_at(round)
}

/// Smallest `K` whose cumulative energy fraction strictly exceeds `t`; the
/// full length when no prefix does (`t = 1`). All-zero input gives 1.
pub fn select_rank(sigma: &[f64], t: f64) -> Result<usize> {
    if sigma.is_empty() {
        return Err(Error::InvalidArgument("empty singular value list".into()));
    }
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {t} outside (0, 1]")));
    }
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return Ok(1);
    }
    let mut acc = 0.0;
    for (k, s) in sigma.iter().enumerate() {
        acc += s * s;
        if acc / total > t {
            return Ok(k + 1);
        }
    }
    Ok(sigma.len())
}

/// Whether a rank-`k` factorization of a `p x q` matrix is smaller than the
/// matrix itself, counting `Σ` as a full `k x k` block.
pub fn factorization_pays(p: usize, q: usize, k: usize) -> bool {
    p * k + k * k + k * q < p * q
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Raw(Matrix),
    Factorized {
        /// `P x K`
        u: Matrix,
        sigma: Vec<f64>,
        /// `K x Q`
        v: Matrix,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedEntry {
    pub name: String,
    pub orig_shape: (usize, usize),
    pub payload: Payload,
}

impl FactorizedEntry {
    /// Retained rank, 0 for raw entries.
    pub fn rank(&self) -> usize {
        match &self.payload {
            Payload::Raw(_) => 0,
            Payload::Factorized { sigma, .. } => sigma.len(),
        }
    }

    /// Number of `f64` values this entry puts on the wire.
    pub fn float_count(&self) -> usize {
        let (p, q) = self.orig_shape;
        match &self.payload {
            Payload::Raw(_) => p * q,
            Payload::Factorized { sigma, .. } => {
                let k = sigma.len();
                p * k + k + k * q
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let (p, q) = self.orig_shape;
        match &self.payload {
            Payload::Raw(m) if m.shape() == (p, q) => Ok(()),
            Payload::Factorized { u, sigma, v }
                if !sigma.is_empty()
                    && u.shape() == (p, sigma.len())
                    && v.shape() == (sigma.len(), q) =>
            {
                Ok(())
            }
            _ => Err(Error::Shape(format!(
                "entry {} does not match its recorded shape {p}x{q}",
                self.name
            ))),
        }
    }

    pub fn reconstruct(&self) -> Result<Matrix> {
        self.validate()?;
        Ok(match &self.payload {
            Payload::Raw(m) => m.clone(),
            Payload::Factorized { u, sigma, v } => {
                let mut us = u.clone();
                for i in 0..us.rows() {
                    for (x, s) in us.row_mut(i).iter_mut().zip(sigma) {
                        *x *= s;
                    }
                }
                us.mul(v)
            }
        })
    }
}

/// The unit that crosses the client/server boundary.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FactorizedGradient {
    pub entries: Vec<FactorizedEntry>,
}

impl FactorizedGradient {
    /// Per-entry retained ranks (0 = raw), in entry order.
    pub fn ranks(&self) -> Vec<(String, usize)> {
        self.entries.iter().map(|e| (e.name.clone(), e.rank())).collect()
    }
}

/// Singular values observed for one matrix during factorization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaSnapshot {
    pub name: String,
    pub sigma: Vec<f64>,
}

/// Every entry raw; the uncompressed baseline payload.
pub fn raw_payload(grads: &GradSet) -> FactorizedGradient {
    FactorizedGradient {
        entries: grads
            .iter()
            .map(|(name, m)| FactorizedEntry {
                name: name.to_string(),
                orig_shape: m.shape(),
                payload: Payload::Raw(m.clone()),
            })
            .collect(),
    }
}

pub fn factorize(grads: &GradSet, t: f64) -> Result<FactorizedGradient> {
    factorize_traced(grads, t).map(|(fg, _)| fg)
}

/// [`factorize`] that also returns the singular values of every matrix that
/// went through an SVD.
pub fn factorize_traced(grads: &GradSet, t: f64) -> Result<(FactorizedGradient, Vec<SigmaSnapshot>)> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {t} outside (0, 1]")));
    }
    let items: Vec<(&str, &Matrix)> = grads.iter().collect();
    let results: Vec<Result<(FactorizedEntry, Option<SigmaSnapshot>)>> = items
        .par_iter()
        .map(|&(name, m)| factorize_entry(name, m, t))
        .collect();
    let mut entries = Vec::with_capacity(results.len());
    let mut snapshots = Vec::new();
    for r in results {
        let (e, snap) = r?;
        entries.push(e);
        snapshots.extend(snap);
    }
    Ok((FactorizedGradient { entries }, snapshots))
}

fn factorize_entry(name: &str, m: &Matrix, t: f64) -> Result<(FactorizedEntry, Option<SigmaSnapshot>)> {
    if !m.is_finite() {
        return Err(Error::NonFinite(format!("gradient {name}")));
    }
    let (p, q) = m.shape();
    let raw = || FactorizedEntry {
        name: name.to_string(),
        orig_shape: (p, q),
        payload: Payload::Raw(m.clone()),
    };
    if p.min(q) < 2 || m.data().iter().all(|&v| v == 0.0) {
        return Ok((raw(), None));
    }
    let dec = svd(m)?;
    let k = select_rank(&dec.sigma, t)?;
    let snapshot = SigmaSnapshot {
        name: name.to_string(),
        sigma: dec.sigma.clone(),
    };
    if !factorization_pays(p, q, k) {
        return Ok((raw(), Some(snapshot)));
    }
    let u = dec.u.col_block(0, k);
    let v = dec.vt.row_block(0, k);
    let entry = FactorizedEntry {
        name: name.to_string(),
        orig_shape: (p, q),
        payload: Payload::Factorized {
            u,
            sigma: dec.sigma[..k].to_vec(),
            v,
        },
    };
    Ok((entry, Some(snapshot)))
}

pub fn reconstruct(fg: &FactorizedGradient) -> Result<GradSet> {
    let mut tensors = indexmap::IndexMap::with_capacity(fg.entries.len());
    for e in &fg.entries {
        if tensors.insert(e.name.clone(), e.reconstruct()?).is_some() {
            return Err(Error::Wire(format!("duplicate entry {}", e.name)));
        }
    }
    Ok(GradSet::from_tensors(tensors))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    /// Serialized length of the same gradient with every entry raw.
    pub raw_bytes: usize,
    /// Serialized length of the payload as given.
    pub encoded_bytes: usize,
    pub ratio: f64,
}

pub fn measure(fg: &FactorizedGradient) -> SizeReport {
    let encoded_bytes = encoded_len(fg);
    let raw_bytes = HEADER_LEN
        + fg
            .entries
            .iter()
            .map(|e| wire::entry_overhead(&e.name) + 8 * e.orig_shape.0 * e.orig_shape.1)
            .sum::<usize>();
    SizeReport {
        raw_bytes,
        encoded_bytes,
        ratio: raw_bytes as f64 / encoded_bytes as f64,
    }
}

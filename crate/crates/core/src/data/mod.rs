//! Desk-scale datasets: a seeded synthetic sequence-classification generator,
//! a CSV loader and client partitioning.

mod csv_io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

pub use csv_io::{load_csv, write_csv};

/// Feature geometry and label space shared by every sample of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleShape {
    pub seq_len: usize,
    pub input_dim: usize,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `seq_len x input_dim`.
    pub features: Matrix,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub samples: Vec<Sample>,
}

/// Per-class anchor sequences used by [`gen_synthetic`]. Each anchor row is a
/// unit vector.
pub fn class_anchors(shape: &SampleShape, rng: &mut Rng) -> Vec<Matrix> {
    (0..shape.num_classes)
        .map(|_| {
            let mut m = Matrix::zeros(shape.seq_len, shape.input_dim);
            for i in 0..shape.seq_len {
                let row = m.row_mut(i);
                for v in row.iter_mut() {
                    *v = rng.normal();
                }
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                row.iter_mut().for_each(|v| *v /= n);
            }
            m
        })
        .collect()
}

/// Class-conditional Gaussian sequences: `features = anchor[label] + noise * N(0, 1)`.
/// Labels are balanced to within one sample and returned in shuffled order.
pub fn gen_synthetic(num_samples: usize, shape: &SampleShape, rng: &mut Rng, noise: f64) -> Result<Vec<Sample>> {
    if shape.seq_len == 0 || shape.input_dim == 0 || shape.num_classes < 2 {
        return Err(Error::InvalidArgument(format!("invalid sample shape {shape:?}")));
    }
    if num_samples < shape.num_classes {
        return Err(Error::InvalidArgument(format!(
            "{num_samples} samples cannot cover {} classes",
            shape.num_classes
        )));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::InvalidArgument(format!("noise {noise}")));
    }
    let anchors = class_anchors(shape, rng);
    let mut labels: Vec<usize> = (0..num_samples).map(|i| i % shape.num_classes).collect();
    rng.shuffle(&mut labels);
    Ok(labels
        .into_iter()
        .map(|label| {
            let mut features = anchors[label].clone();
            for v in features.data_mut() {
                *v += noise * rng.normal();
            }
            Sample { features, label }
        })
        .collect())
}

/// Random IID split into `n_clients` disjoint shards whose sizes differ by at
/// most one.
pub fn partition(samples: &[Sample], n_clients: usize, rng: &mut Rng) -> Result<Vec<ClientShard>> {
    if n_clients == 0 || n_clients > samples.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} samples across {n_clients} clients",
            samples.len()
        )));
    }
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    rng.shuffle(&mut idx);
    let mut shards: Vec<ClientShard> = (0..n_clients)
        .map(|client_id| ClientShard {
            client_id,
            samples: Vec::with_capacity(samples.len() / n_clients + 1),
        })
        .collect();
    for (pos, i) in idx.into_iter().enumerate() {
        shards[pos % n_clients].samples.push(samples[i].clone());
    }
    Ok(shards)
}

/// Label-skewed split: each class is divided among clients with proportions
/// drawn from a symmetric Dirichlet(`alpha`).
pub fn partition_label_skew(
    samples: &[Sample],
    n_clients: usize,
    alpha: f64,
    rng: &mut Rng,
) -> Result<Vec<ClientShard>> {
    if n_clients == 0 || n_clients > samples.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} samples across {n_clients} clients",
            samples.len()
        )));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("dirichlet alpha {alpha}")));
    }
    let num_classes = samples.iter().map(|s| s.label + 1).max().unwrap_or(0);
    let mut shards: Vec<ClientShard> = (0..n_clients)
        .map(|client_id| ClientShard {
            client_id,
            samples: Vec::new(),
        })
        .collect();
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label == class).collect();
        rng.shuffle(&mut members);
        let draws: Vec<f64> = (0..n_clients).map(|_| rng.gamma(alpha)).collect();
        let total: f64 = draws.iter().sum();
        let mut start = 0;
        let mut acc = 0.0;
        for (k, d) in draws.iter().enumerate() {
            acc += d / total;
            let end = if k + 1 == n_clients {
                members.len()
            } else {
                ((acc * members.len() as f64).round() as usize).clamp(start, members.len())
            };
            shards[k]
                .samples
                .extend(members[start..end].iter().map(|&i| samples[i].clone()));
            start = end;
        }
    }
    Ok(shards)
}

/// Shuffles and splits off the last `eval_fraction` of the samples.
pub fn train_eval_split(mut samples: Vec<Sample>, eval_fraction: f64, rng: &mut Rng) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(0.0..1.0).contains(&eval_fraction) {
        return Err(Error::InvalidArgument(format!("eval fraction {eval_fraction}")));
    }
    rng.shuffle(&mut samples);
    let n_eval = (samples.len() as f64 * eval_fraction).round() as usize;
    let eval = samples.split_off(samples.len() - n_eval);
    Ok((samples, eval))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> SampleShape {
        SampleShape {
            seq_len: 4,
            input_dim: 3,
            num_classes: 3,
        }
    }

    fn key(s: &Sample) -> (usize, Vec<u64>) {
        (s.label, s.features.data().iter().map(|v| v.to_bits()).collect())
    }

    #[test]
    fn noise_free_is_nearest_anchor_separable() {
        let mut rng = Rng::new(0);
        let anchors = class_anchors(&shape(), &mut Rng::new(0));
        let data = gen_synthetic(60, &shape(), &mut rng, 0.0).unwrap();
        for s in &data {
            let best = (0..3)
                .min_by(|&a, &b| {
                    let da = s.features.sub(&anchors[a]).unwrap().frobenius_norm();
                    let db = s.features.sub(&anchors[b]).unwrap().frobenius_norm();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(best, s.label);
        }
    }

    #[test]
    fn deterministic_and_balanced() {
        let a = gen_synthetic(31, &shape(), &mut Rng::new(9), 0.5).unwrap();
        let b = gen_synthetic(31, &shape(), &mut Rng::new(9), 0.5).unwrap();
        assert_eq!(a, b);
        let counts: Vec<usize> = (0..3).map(|c| a.iter().filter(|s| s.label == c).count()).collect();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn generator_rejects_too_few_samples() {
        assert!(gen_synthetic(2, &shape(), &mut Rng::new(0), 0.1).is_err());
    }

    #[test]
    fn single_client_partition_keeps_everything() {
        let data = gen_synthetic(12, &shape(), &mut Rng::new(1), 0.1).unwrap();
        let shards = partition(&data, 1, &mut Rng::new(2)).unwrap();
        assert_eq!(shards.len(), 1);
        let mut a: Vec<_> = shards[0].samples.iter().map(key).collect();
        let mut b: Vec<_> = data.iter().map(key).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn balanced_sizes() {
        let data = gen_synthetic(10, &shape(), &mut Rng::new(1), 0.1).unwrap();
        let shards = partition(&data, 4, &mut Rng::new(2)).unwrap();
        let mut sizes: Vec<usize> = shards.iter().map(|s| s.samples.len()).collect();
        sizes.sort();
        assert_eq!(sizes, vec![2, 2, 3, 3]);
        assert!(partition(&data, 11, &mut Rng::new(2)).is_err());
        assert!(partition(&data, 0, &mut Rng::new(2)).is_err());
    }

    #[test]
    fn label_skew_is_exhaustive() {
        let data = gen_synthetic(90, &shape(), &mut Rng::new(1), 0.1).unwrap();
        let shards = partition_label_skew(&data, 4, 0.3, &mut Rng::new(5)).unwrap();
        let mut a: Vec<_> = shards.iter().flat_map(|s| s.samples.iter().map(key)).collect();
        let mut b: Vec<_> = data.iter().map(key).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn eval_split_sizes() {
        let data = gen_synthetic(100, &shape(), &mut Rng::new(1), 0.1).unwrap();
        let (train, eval) = train_eval_split(data, 0.2, &mut Rng::new(3)).unwrap();
        assert_eq!((train.len(), eval.len()), (80, 20));
    }
}

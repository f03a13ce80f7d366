//! CSV datasets: header `label,f0,f1,...` followed by one sample per row,
//! features flattened row-major (`seq_len x input_dim`).

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::{Sample, SampleShape};

pub fn load_csv(path: impl AsRef<Path>, shape: &SampleShape) -> Result<Vec<Sample>> {
    let n_features = shape.seq_len * shape.input_dim;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path.as_ref())
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Parse {
                line: 0,
                message: format!("{other:?}"),
            },
        })?;
    let mut records = reader.records();

    let header = match records.next() {
        Some(r) => r.map_err(|e| parse_err(1, e))?,
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "missing header row".into(),
            })
        }
    };
    let expected: Vec<String> = std::iter::once("label".to_string())
        .chain((0..n_features).map(|i| format!("f{i}")))
        .collect();
    if header.iter().map(str::trim).ne(expected.iter().map(String::as_str)) {
        return Err(Error::Parse {
            line: 1,
            message: format!("header must be label,f0..f{}", n_features.saturating_sub(1)),
        });
    }

    let mut out = Vec::new();
    for (i, rec) in records.enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(line, e))?;
        if rec.len() != n_features + 1 {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", n_features + 1, rec.len()),
            });
        }
        let label: usize = rec[0].trim().parse().map_err(|_| Error::Parse {
            line,
            message: format!("bad label {:?}", &rec[0]),
        })?;
        if label >= shape.num_classes {
            return Err(Error::Parse {
                line,
                message: format!("label {label} out of range for {} classes", shape.num_classes),
            });
        }
        let mut values = Vec::with_capacity(n_features);
        for field in rec.iter().skip(1) {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("bad number {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("non-finite value {field:?}"),
                });
            }
            values.push(v);
        }
        out.push(Sample {
            features: Matrix::from_vec(shape.seq_len, shape.input_dim, values)?,
            label,
        });
    }
    Ok(out)
}

fn parse_err(line: usize, e: csv::Error) -> Error {
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

pub fn write_csv(path: impl AsRef<Path>, samples: &[Sample], shape: &SampleShape) -> Result<()> {
    let n_features = shape.seq_len * shape.input_dim;
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(|e| Error::Io(e.into()))?;
    let header: Vec<String> = std::iter::once("label".to_string())
        .chain((0..n_features).map(|i| format!("f{i}")))
        .collect();
    w.write_record(&header).map_err(|e| Error::Io(e.into()))?;
    for s in samples {
        let row: Vec<String> = std::iter::once(s.label.to_string())
            .chain(s.features.data().iter().map(|v| v.to_string()))
            .collect();
        w.write_record(&row).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

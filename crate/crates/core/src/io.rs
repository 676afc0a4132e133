//! File formats: CSV datasets with a likelihood sidecar, JSON checkpoints and
//! reports, and JSON-lines training traces.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetMatrix, Likelihood};
use crate::error::{Error, Result};
use crate::model::SparseDgmModel;
use crate::train::{EpochRecord, TrainConfig, TrainTrace};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// Version string recorded in manifests and checkpoints.
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// `<path>.meta.json`, holding the likelihood of a CSV dataset.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetMeta {
    likelihood: Likelihood,
}

fn parse_err(line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        line: line as usize,
        msg: msg.into(),
    }
}

/// Reads a CSV matrix whose first row names the features.
///
/// The likelihood is `likelihood` when given, else the sidecar's, else gaussian.
pub fn load_dataset(path: &Path, likelihood: Option<Likelihood>) -> Result<DatasetMatrix> {
    let likelihood = match likelihood {
        Some(l) => l,
        None => {
            let meta = sidecar_path(path);
            if meta.exists() {
                read_json::<DatasetMeta>(&meta)?.likelihood
            } else {
                Likelihood::Gaussian
            }
        }
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err)?;
    let names: Vec<String> = reader.headers().map_err(csv_err)?.iter().map(str::to_owned).collect();
    if names.is_empty() || names.iter().all(String::is_empty) {
        return Err(parse_err(1, "missing header row"));
    }
    let g = names.len();
    let mut data = Vec::new();
    let mut rows = 0usize;
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        for cell in record.iter() {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(line, format!("not a number: {cell:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite value {cell:?}")));
            }
            if likelihood == Likelihood::Multinomial && (v < 0.0 || v.fract() != 0.0) {
                return Err(parse_err(line, format!("count must be a nonnegative integer, got {cell:?}")));
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(parse_err(2, "no data rows"));
    }
    let values = Array2::from_shape_vec((rows, g), data).expect("row lengths checked by the reader");
    DatasetMatrix::new(values, names, likelihood)
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
            parse_err(line, format!("row has {len} fields, header has {expected_len}"))
        }
        other => parse_err(line, format!("{other:?}")),
    }
}

/// Writes the matrix as CSV plus the likelihood sidecar. Values use the shortest
/// representation that parses back to the same float.
pub fn save_dataset(path: &Path, data: &DatasetMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", data.feature_names.join(","))?;
    for row in data.values.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush()?;
    write_json(
        &sidecar_path(path),
        &DatasetMeta {
            likelihood: data.likelihood,
        },
    )
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub code_version: String,
    pub config: TrainConfig,
    pub model: SparseDgmModel,
}

pub fn save_checkpoint(path: &Path, model: &SparseDgmModel, config: &TrainConfig) -> Result<()> {
    write_json(
        path,
        &Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            code_version: CODE_VERSION.to_owned(),
            config: config.clone(),
            model: model.clone(),
        },
    )
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let raw: serde_json::Value = read_json(path)?;
    let found = raw
        .get("schema_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Config("checkpoint has no schema_version".into()))?;
    if found != CHECKPOINT_SCHEMA_VERSION as u64 {
        return Err(Error::Schema {
            found: found as u32,
            expected: CHECKPOINT_SCHEMA_VERSION,
        });
    }
    let ckpt: Checkpoint = serde_json::from_value(raw)?;
    validate_model(&ckpt.model)?;
    Ok(ckpt)
}

fn validate_model(m: &SparseDgmModel) -> Result<()> {
    let (g, k) = m.selector.dim();
    let bad = |what: &str| Err(Error::Config(format!("checkpoint {what} does not match W ({g}x{k})")));
    if m.decoder.input_dim() != k || m.decoder.output_dim() != g {
        return bad("decoder");
    }
    if m.encoder_mu.input_dim() != g || m.encoder_mu.output_dim() != k {
        return bad("mean encoder");
    }
    if m.encoder_logvar.input_dim() != g || m.encoder_logvar.output_dim() != k {
        return bad("variance encoder");
    }
    if m.log_noise_var.len() != g || m.sigma_z.dim() != (k, k) {
        return bad("noise or factor covariance");
    }
    if m.ssl.gamma_expect.dim() != (g, k) || m.ssl.eta.len() != k {
        return bad("selector prior state");
    }
    Ok(())
}

/// One JSON object per epoch.
pub fn write_trace(path: &Path, trace: &TrainTrace) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in &trace.records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<TrainTrace> {
    let mut records = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: EpochRecord = serde_json::from_str(&line).map_err(|e| parse_err(i as u64 + 1, e.to_string()))?;
        records.push(r);
    }
    Ok(TrainTrace { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn write(path: &Path, text: &str) {
        std::fs::write(path, text).unwrap();
    }

    #[test]
    fn reads_small_csv() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.csv");
        write(&p, "u,v\n1.5,2\n-3,4e2\n");
        let d = load_dataset(&p, None).unwrap();
        assert_eq!(d.values, array![[1.5, 2.0], [-3.0, 400.0]]);
        assert_eq!(d.feature_names, vec!["u", "v"]);
        assert_eq!(d.likelihood, Likelihood::Gaussian);
    }

    #[test]
    fn parse_errors_carry_lines() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.csv");
        let line_of = |text: &str| {
            write(&p, text);
            match load_dataset(&p, None) {
                Err(Error::Parse { line, .. }) => line,
                other => panic!("expected parse error, got {other:?}"),
            }
        };
        assert_eq!(line_of("a,b\n1,2\nNaN,3\n"), 3);
        assert_eq!(line_of("a,b\n1,2\n3,inf\n"), 3);
        assert_eq!(line_of("a,b\n1,2\n3\n"), 3);
        assert_eq!(line_of("a,b\n1,x\n"), 2);
        assert_eq!(line_of("a,b\n"), 2);
        assert_eq!(line_of(""), 1);
    }

    #[test]
    fn sidecar_and_flag_choose_likelihood() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("c.csv");
        let d = DatasetMatrix::unnamed(array![[1.0, 0.0], [2.0, 5.0]], Likelihood::Multinomial).unwrap();
        save_dataset(&p, &d).unwrap();
        assert_eq!(load_dataset(&p, None).unwrap(), d);
        assert_eq!(load_dataset(&p, Some(Likelihood::Gaussian)).unwrap().likelihood, Likelihood::Gaussian);
        write(&p, "a\n1.5\n");
        assert!(matches!(load_dataset(&p, None), Err(Error::Parse { line: 2, .. })));
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_lossless(vals in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 6)) {
            let dir = tempdir().unwrap();
            let p = dir.path().join("r.csv");
            let d = DatasetMatrix::unnamed(Array2::from_shape_vec((3, 2), vals).unwrap(), Likelihood::Gaussian).unwrap();
            save_dataset(&p, &d).unwrap();
            let back = load_dataset(&p, None).unwrap();
            prop_assert!(back.values.iter().zip(d.values.iter()).all(|(a, b)| a.to_bits() == b.to_bits() || (*a == 0.0 && *b == 0.0)));
        }
    }

    #[test]
    fn trace_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        let rec = EpochRecord {
            epoch: 0,
            elbo: -1.25,
            recon: -1.0,
            kl: 0.25,
            ssl_penalty: 0.0,
            ssl_inclusion: 0.0,
            noise_prior: 0.0,
            eta: vec![0.5],
            selector_col_norms: vec![1.0],
        };
        let trace = TrainTrace {
            records: vec![rec.clone(), EpochRecord { epoch: 1, ..rec }],
        };
        write_trace(&p, &trace).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 2);
        assert_eq!(read_trace(&p).unwrap(), trace);
    }
}

//! Synthetic data, CSV input/output and seed derivation.

use std::fs::File;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conformal::RegressionTask;
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::losses::LossSpec;

/// Name of the random generator behind every seeded draw.
pub const RNG_NAME: &str = "ChaCha8";

/// Name of the output column in CSV files.
pub const TARGET_COLUMN: &str = "y";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: String,
    pub seed: Option<u64>,
    pub noise_sd: Option<f64>,
}

/// Labeled regression sample: rows of `x` with outputs `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<f64>, meta: DatasetMeta) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::input(format!(
                "dataset needs matching non-empty inputs and outputs, got {} and {}",
                x.len(),
                y.len()
            )));
        }
        let d = x[0].len();
        if d == 0 || x.iter().any(|r| r.len() != d) {
            return Err(Error::input("all input rows must share a dimension >= 1"));
        }
        if x.iter().flatten().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::input("dataset contains non-finite values"));
        }
        Ok(Dataset { x, y, meta })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x[0].len()
    }

    /// Splits off the last row as the query; returns the task and the query's true output.
    pub fn into_task(mut self, kernel: KernelSpec, loss: LossSpec, lambda: f64) -> Result<(RegressionTask, f64)> {
        if self.len() < 2 {
            return Err(Error::input("need at least two rows to split off a query"));
        }
        let x_query = self.x.pop().unwrap_or_default();
        let y_true = self.y.pop().unwrap_or_default();
        let task = RegressionTask {
            x: self.x,
            y: self.y,
            x_query,
            kernel,
            loss,
            lambda,
        };
        task.validate()?;
        Ok((task, y_true))
    }
}

/// Seed for repetition `index` under `master`, independent of evaluation order.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng.next_u64()
}

/// `10 sin(pi x1 x2) + 20 (x3 - 0.5)^2 + 10 x4 + 5 x5`.
pub fn friedman1_target(x: &[f64]) -> f64 {
    10.0 * (std::f64::consts::PI * x[0] * x[1]).sin() + 20.0 * (x[2] - 0.5).powi(2) + 10.0 * x[3] + 5.0 * x[4]
}

/// `n` draws with inputs uniform on `[0, 1]^10` and Friedman #1 outputs plus Gaussian noise.
pub fn friedman1(n: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::input("friedman1 needs n >= 1"));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::input(format!("noise_sd must be >= 0, got {noise_sd}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..10).map(|_| rng.random::<f64>()).collect();
        let eps: f64 = rng.sample(StandardNormal);
        y.push(friedman1_target(&row) + noise_sd * eps);
        x.push(row);
    }
    Dataset::new(
        x,
        y,
        DatasetMeta {
            generator: format!("friedman1/{RNG_NAME}"),
            seed: Some(seed),
            noise_sd: Some(noise_sd),
        },
    )
}

/// Reads a CSV whose header names the feature columns and a `y` column.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let target = headers
        .iter()
        .position(|h| h == TARGET_COLUMN)
        .ok_or_else(|| parse_err(1, format!("missing target column `{TARGET_COLUMN}`")))?;
    if headers.len() < 2 {
        return Err(parse_err(1, "need at least one feature column".into()));
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let mut row = Vec::with_capacity(headers.len() - 1);
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(line, format!("column `{}`: cannot parse `{field}` as a number", &headers[j])))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("column `{}`: non-finite value", &headers[j])));
            }
            if j == target {
                y.push(v);
            } else {
                row.push(v);
            }
        }
        x.push(row);
    }
    if y.is_empty() {
        return Err(parse_err(2, "no data rows".into()));
    }
    Dataset::new(
        x,
        y,
        DatasetMeta {
            generator: format!("csv:{}", path.display()),
            seed: None,
            noise_sd: None,
        },
    )
}

/// Writes `x1..xd,y` with shortest round-trip float formatting.
pub fn save_csv(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut header: Vec<String> = (1..=ds.dim()).map(|j| format!("x{j}")).collect();
    header.push(TARGET_COLUMN.to_string());
    w.write_record(&header).map_err(|e| csv_io(path, e))?;
    for (row, y) in ds.x.iter().zip(&ds.y) {
        let rec: Vec<String> = row.iter().chain(std::iter::once(y)).map(|v| v.to_string()).collect();
        w.write_record(&rec).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: format!("{other:?}"),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::io::Write;

    #[test]
    fn friedman_formula() {
        assert_relative_eq!(friedman1_target(&[0.5; 10]), 14.571_068, epsilon = 1e-6);
        let mut x = [0.7; 10];
        x[0] = 0.0;
        x[2] = 0.5;
        x[3] = 0.0;
        x[4] = 0.0;
        assert_eq!(friedman1_target(&x), 0.0);
    }

    #[test]
    fn friedman_is_seeded_and_noise_free_by_default() {
        let a = friedman1(30, 0.0, 4).unwrap();
        let b = friedman1(30, 0.0, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, friedman1(30, 0.0, 5).unwrap());
        for (row, y) in a.x.iter().zip(&a.y) {
            assert_eq!(*y, friedman1_target(row));
            assert!(row.iter().all(|v| (0.0..1.0).contains(v)));
        }
        assert!(friedman1(0, 0.0, 1).is_err());
        assert!(friedman1(3, -1.0, 1).is_err());
    }

    #[test]
    fn friedman_marginals() {
        let ds = friedman1(10_000, 1.0, 21).unwrap();
        for j in 0..10 {
            let mean = ds.x.iter().map(|r| r[j]).sum::<f64>() / 10_000.0;
            assert!((mean - 0.5).abs() < 0.02);
        }
    }

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(1, 2), derive_seed(1, 2));
        assert_ne!(derive_seed(1, 2), derive_seed(1, 3));
        assert_ne!(derive_seed(1, 2), derive_seed(2, 2));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds = friedman1(50, 0.3, 8).unwrap();
        save_csv(&path, &ds).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back.x, ds.x);
        assert_eq!(back.y, ds.y);
    }

    #[test]
    fn csv_edge_cases() {
        let dir = tempfile::tempdir().unwrap();
        let one = dir.path().join("one.csv");
        std::fs::write(&one, "a,b,y\n1,2,3\n").unwrap();
        let ds = load_csv(&one).unwrap();
        assert_eq!((ds.len(), ds.dim()), (1, 2));

        let reordered = dir.path().join("reordered.csv");
        std::fs::write(&reordered, "y,a\n3,1\n4,2\n").unwrap();
        let ds = load_csv(&reordered).unwrap();
        assert_eq!(ds.y, vec![3.0, 4.0]);
        assert_eq!(ds.x, vec![vec![1.0], vec![2.0]]);

        let missing = dir.path().join("missing.csv");
        std::fs::write(&missing, "a,b,target\n1,2,3\n").unwrap();
        let err = load_csv(&missing).unwrap_err().to_string();
        assert!(err.contains("`y`"), "{err}");

        let bad = dir.path().join("bad.csv");
        let mut f = File::create(&bad).unwrap();
        writeln!(f, "a,y\n1,2\n3,oops\n").unwrap();
        match load_csv(&bad).unwrap_err() {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("oops"));
            }
            e => panic!("unexpected error {e}"),
        }

        let ragged = dir.path().join("ragged.csv");
        std::fs::write(&ragged, "a,y\n1,2\n3,4,5\n").unwrap();
        assert!(matches!(load_csv(&ragged).unwrap_err(), Error::Parse { line: 3, .. }));

        assert!(matches!(load_csv(dir.path().join("nope.csv")).unwrap_err(), Error::Io { .. }));
    }

    #[test]
    fn into_task_splits_last_row() {
        let ds = friedman1(5, 0.0, 1).unwrap();
        let last = (ds.x[4].clone(), ds.y[4]);
        let (task, y_true) = ds.into_task(KernelSpec::default(), LossSpec::default(), 0.5).unwrap();
        assert_eq!(task.n(), 4);
        assert_eq!((task.x_query, y_true), last);
    }
}

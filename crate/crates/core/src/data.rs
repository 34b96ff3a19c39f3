//! Datasets: synthetic generation, CSV ingestion, splitting and resampling.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// A regression dataset: `inputs` is n x d, `responses` has length n.
/// Row `i` of `inputs` pairs with `responses[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: DMatrix<f64>,
    responses: DVector<f64>,
}

impl Dataset {
    pub fn new(inputs: DMatrix<f64>, responses: DVector<f64>) -> Result<Self> {
        if inputs.nrows() == 0 || inputs.ncols() == 0 {
            return Err(Error::EmptyDataset);
        }
        if inputs.nrows() != responses.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.nrows(),
                got: responses.len(),
            });
        }
        if inputs.iter().any(|v| !v.is_finite()) || responses.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset contains a non-finite value".into()));
        }
        Ok(Self { inputs, responses })
    }

    pub fn n(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn responses(&self) -> &DVector<f64> {
        &self.responses
    }

    pub fn input_row(&self, i: usize) -> Vec<f64> {
        self.inputs.row(i).iter().copied().collect()
    }

    /// Dataset made of the given row indices (rows may repeat).
    pub fn select_rows(&self, idx: &[usize]) -> Dataset {
        let d = self.dim();
        let mut inputs = DMatrix::zeros(idx.len(), d);
        let mut responses = DVector::zeros(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            inputs.row_mut(r).copy_from(&self.inputs.row(i));
            responses[r] = self.responses[i];
        }
        Dataset { inputs, responses }
    }

    pub fn with_responses(&self, responses: DVector<f64>) -> Result<Dataset> {
        Dataset::new(self.inputs.clone(), responses)
    }
}

/// Ground-truth regression families for synthetic data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// g*(x) = sum_i sin(x_i)
    SinSum,
    /// g*(x) = sum_i x_i sin(x_i)
    XSinX,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub family: Family,
    pub dim: usize,
    pub noise_sd: f64,
    #[serde(default = "default_box_high")]
    pub box_high: f64,
}

fn default_box_high() -> f64 {
    0.2
}

impl SyntheticSpec {
    pub fn new(family: Family, dim: usize, noise_sd: f64) -> Self {
        Self {
            family,
            dim,
            noise_sd,
            box_high: default_box_high(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidArgument("dim must be >= 1".into()));
        }
        if self.noise_sd < 0.0 || !self.noise_sd.is_finite() {
            return Err(Error::InvalidArgument("noise_sd must be a nonnegative real".into()));
        }
        Ok(())
    }
}

/// Noise-free regression function g*(x).
pub fn ground_truth(spec: &SyntheticSpec, x: &[f64]) -> Result<f64> {
    if x.len() != spec.dim {
        return Err(Error::DimensionMismatch {
            expected: spec.dim,
            got: x.len(),
        });
    }
    Ok(match spec.family {
        Family::SinSum => x.iter().map(|v| v.sin()).sum(),
        Family::XSinX => x.iter().map(|v| v * v.sin()).sum(),
    })
}

/// Draw n i.i.d. samples: X uniform on [0, box_high]^d, y = g*(x) + N(0, noise_sd^2).
pub fn generate_synthetic(spec: &SyntheticSpec, n: usize, stream: &RngStream) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let mut rng = stream.rng();
    let mut inputs = DMatrix::zeros(n, spec.dim);
    for i in 0..n {
        for j in 0..spec.dim {
            inputs[(i, j)] = rng.gen_range(0.0..spec.box_high);
        }
    }
    let noise = Normal::new(0.0, spec.noise_sd.max(f64::MIN_POSITIVE)).unwrap();
    let mut responses = DVector::zeros(n);
    for i in 0..n {
        let x: Vec<f64> = inputs.row(i).iter().copied().collect();
        let eps = if spec.noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        responses[i] = ground_truth(spec, &x)? + eps;
    }
    Dataset::new(inputs, responses)
}

/// Parse a CSV file with header `x1,...,xd,y`; the response column is last.
pub fn load_csv<P: AsRef<Path>>(path: P) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let path_str = path.display().to_string();
    let csv_err = |message: String| Error::Csv {
        path: path_str.clone(),
        message,
    };

    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| csv_err("empty file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 2 {
        return Err(csv_err("header must have at least one feature column and `y`".into()));
    }
    let d = cols.len() - 1;
    for (j, name) in cols.iter().take(d).enumerate() {
        if *name == "y" {
            return Err(csv_err("response column must be last".into()));
        }
        let expected = format!("x{}", j + 1);
        if *name != expected {
            return Err(csv_err(format!(
                "column {} must be named `{}`, got `{}`",
                j + 1,
                expected,
                name
            )));
        }
    }
    if cols[d] != "y" {
        return Err(csv_err("response column must be last".into()));
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line_no, line) in lines {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != d + 1 {
            return Err(csv_err(format!(
                "row {}: expected {} cells, got {}",
                line_no + 1,
                d + 1,
                cells.len()
            )));
        }
        let mut row = Vec::with_capacity(d + 1);
        for (j, cell) in cells.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                csv_err(format!("row {}, column {}: cannot parse `{}`", line_no + 1, j + 1, cell))
            })?;
            if !v.is_finite() {
                return Err(csv_err(format!(
                    "row {}, column {}: non-finite value `{}`",
                    line_no + 1,
                    j + 1,
                    cell
                )));
            }
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(csv_err("empty dataset".into()));
    }
    let n = rows.len();
    let mut inputs = DMatrix::zeros(n, d);
    let mut responses = DVector::zeros(n);
    for (i, row) in rows.iter().enumerate() {
        for j in 0..d {
            inputs[(i, j)] = row[j];
        }
        responses[i] = row[d];
    }
    Dataset::new(inputs, responses)
}

/// Randomly permute rows and partition them into `m_prime` disjoint batches of
/// size floor(n / m_prime). Remainder rows are dropped so every batch has the
/// same size; a warning is logged when that happens.
pub fn split_batches(data: &Dataset, m_prime: usize, stream: &RngStream) -> Result<Vec<Dataset>> {
    if m_prime < 2 {
        return Err(Error::InvalidArgument("m_prime must be >= 2".into()));
    }
    let n = data.n();
    if n < m_prime {
        return Err(Error::InvalidArgument(format!(
            "cannot split n={} rows into m'={} batches",
            n, m_prime
        )));
    }
    let batch_size = n / m_prime;
    let dropped = n - batch_size * m_prime;
    if dropped > 0 {
        log::warn!("split_batches: dropping {} remainder row(s) of {}", dropped, n);
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stream.rng());
    Ok((0..m_prime)
        .map(|j| data.select_rows(&perm[j * batch_size..(j + 1) * batch_size]))
        .collect())
}

/// Sample n rows uniformly with replacement.
pub fn bootstrap_resample(data: &Dataset, stream: &RngStream) -> Dataset {
    let n = data.n();
    let mut rng = stream.rng();
    let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
    data.select_rows(&idx)
}

/// Add independent Gaussian noise to the responses, keeping inputs fixed.
pub fn simulate_real(data: &Dataset, noise_sd: f64, stream: &RngStream) -> Result<Dataset> {
    if !(noise_sd > 0.0) {
        return Err(Error::InvalidArgument("noise_sd must be > 0".into()));
    }
    let normal = Normal::new(0.0, noise_sd).unwrap();
    let mut rng = stream.rng();
    let responses = data.responses().map(|y| y + normal.sample(&mut rng));
    data.with_responses(responses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::io::Write;

    fn stream(id: u64) -> RngStream {
        RngStream::new(20240817, id)
    }

    #[test]
    fn ground_truth_closed_forms() {
        let s2 = SyntheticSpec::new(Family::SinSum, 2, 0.0);
        assert_abs_diff_eq!(ground_truth(&s2, &[0.0, 0.0]).unwrap(), 0.0);
        let s4 = SyntheticSpec::new(Family::SinSum, 4, 0.0);
        assert_abs_diff_eq!(
            ground_truth(&s4, &[0.1; 4]).unwrap(),
            4.0 * 0.1f64.sin(),
            epsilon = 1e-12
        );
        let x2 = SyntheticSpec::new(Family::XSinX, 2, 0.0);
        assert_abs_diff_eq!(
            ground_truth(&x2, &[0.2, 0.2]).unwrap(),
            2.0 * 0.2 * 0.2f64.sin(),
            epsilon = 1e-12
        );
        assert!(ground_truth(&s2, &[0.1]).is_err());
    }

    #[test]
    fn zero_noise_matches_ground_truth_exactly() {
        let spec = SyntheticSpec::new(Family::SinSum, 2, 0.0);
        let data = generate_synthetic(&spec, 64, &stream(0)).unwrap();
        for i in 0..data.n() {
            let x = data.input_row(i);
            assert_eq!(data.responses()[i], ground_truth(&spec, &x).unwrap());
        }
    }

    #[test]
    fn xsinx_zero_noise_point() {
        let spec = SyntheticSpec::new(Family::XSinX, 16, 0.0);
        let y = ground_truth(&spec, &[0.1; 16]).unwrap();
        assert_abs_diff_eq!(y, 16.0 * 0.1 * 0.1f64.sin(), epsilon = 1e-12);
    }

    #[test]
    fn synthetic_mean_close_to_population_mean() {
        // Monte Carlo oracle for E[g*(X)], X ~ Unif([0, 0.2]^2): frozen from a
        // 10^6-draw run of the expression E[sin U] * 2 with U ~ Unif(0, 0.2).
        // Closed form: E[sin U] = (1 - cos 0.2) / 0.2.
        let expected = 2.0 * (1.0 - 0.2f64.cos()) / 0.2;
        let spec = SyntheticSpec::new(Family::SinSum, 2, 0.001);
        let n = 128;
        let data = generate_synthetic(&spec, n, &stream(1)).unwrap();
        let mean = data.responses().mean();
        // sd of g*(X) for X in [0,0.2]^2 is below 0.09
        let tol = 4.0 * (0.09 / (n as f64).sqrt() + 0.001 / (n as f64).sqrt());
        assert!((mean - expected).abs() < tol, "mean {} vs {}", mean, expected);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec::new(Family::SinSum, 3, 0.01);
        let a = generate_synthetic(&spec, 32, &stream(5)).unwrap();
        let b = generate_synthetic(&spec, 32, &stream(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn load_csv_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.csv");
        writeln!(std::fs::File::create(&good).unwrap(), "x1,y\n0.1,0.5\n0.2,0.7").unwrap();
        let data = load_csv(&good).unwrap();
        assert_eq!((data.n(), data.dim()), (2, 1));
        assert_abs_diff_eq!(data.responses()[1], 0.7);

        let empty = dir.path().join("empty.csv");
        writeln!(std::fs::File::create(&empty).unwrap(), "x1,y").unwrap();
        let err = load_csv(&empty).unwrap_err();
        assert!(err.to_string().contains("empty dataset"), "{err}");

        let bad_header = dir.path().join("bad.csv");
        writeln!(std::fs::File::create(&bad_header).unwrap(), "x1,y,x2\n1,2,3").unwrap();
        let err = load_csv(&bad_header).unwrap_err();
        assert!(err.to_string().contains("response column must be last"), "{err}");

        let bad_cell = dir.path().join("cell.csv");
        writeln!(std::fs::File::create(&bad_cell).unwrap(), "x1,y\n0.1,zzz").unwrap();
        let err = load_csv(&bad_cell).unwrap_err();
        assert!(err.to_string().contains("row 2, column 2"), "{err}");

        assert!(load_csv(dir.path().join("missing.csv")).is_err());
    }

    #[test]
    fn split_batches_partitions_rows() {
        let spec = SyntheticSpec::new(Family::SinSum, 2, 0.0);
        let data = generate_synthetic(&spec, 8, &stream(2)).unwrap();
        let batches = split_batches(&data, 4, &stream(3)).unwrap();
        assert_eq!(batches.len(), 4);
        let mut seen: Vec<f64> = Vec::new();
        for b in &batches {
            assert_eq!(b.n(), 2);
            seen.extend(b.responses().iter());
        }
        let mut orig: Vec<f64> = data.responses().iter().copied().collect();
        seen.sort_by(f64::total_cmp);
        orig.sort_by(f64::total_cmp);
        assert_eq!(seen, orig);
    }

    #[test]
    fn split_batches_drops_remainder() {
        let spec = SyntheticSpec::new(Family::SinSum, 2, 0.0);
        let data = generate_synthetic(&spec, 9, &stream(4)).unwrap();
        let batches = split_batches(&data, 4, &stream(3)).unwrap();
        assert!(batches.iter().all(|b| b.n() == 2));
    }

    #[test]
    fn split_batches_too_few_rows() {
        let spec = SyntheticSpec::new(Family::SinSum, 2, 0.0);
        let data = generate_synthetic(&spec, 3, &stream(4)).unwrap();
        assert!(split_batches(&data, 4, &stream(3)).is_err());
    }

    #[test]
    fn bootstrap_single_row_is_identity() {
        let spec = SyntheticSpec::new(Family::SinSum, 2, 0.0);
        let data = generate_synthetic(&spec, 1, &stream(6)).unwrap();
        let re = bootstrap_resample(&data, &stream(7));
        assert_eq!(re, data);
    }

    #[test]
    fn bootstrap_distinct_fraction_near_one_minus_inv_e() {
        // Standard distinct-fraction oracle: P(row survives) -> 1 - 1/e.
        let spec = SyntheticSpec::new(Family::SinSum, 1, 0.0);
        let data = generate_synthetic(&spec, 1000, &stream(8)).unwrap();
        let mut total = 0.0;
        let reps = 100;
        for r in 0..reps {
            let re = bootstrap_resample(&data, &stream(9).substream(r));
            let mut ys: Vec<f64> = re.responses().iter().copied().collect();
            ys.sort_by(f64::total_cmp);
            ys.dedup();
            total += ys.len() as f64 / 1000.0;
        }
        let frac = total / reps as f64;
        assert!((frac - (1.0 - (-1.0f64).exp())).abs() < 0.05, "{frac}");
    }

    #[test]
    fn bootstrap_deterministic() {
        let spec = SyntheticSpec::new(Family::SinSum, 2, 0.001);
        let data = generate_synthetic(&spec, 50, &stream(10)).unwrap();
        let a = bootstrap_resample(&data, &stream(11));
        let b = bootstrap_resample(&data, &stream(11));
        assert_eq!(a, b);
    }

    #[test]
    fn simulate_real_noise_properties() {
        let spec = SyntheticSpec::new(Family::SinSum, 2, 0.0);
        let data = generate_synthetic(&spec, 10_000, &stream(12)).unwrap();

        assert!(simulate_real(&data, 0.0, &stream(13)).is_err());

        let tiny = simulate_real(&data, 1e-12, &stream(13)).unwrap();
        for i in 0..data.n() {
            assert!((tiny.responses()[i] - data.responses()[i]).abs() < 1e-10);
        }

        // CLT oracle on the mean shift.
        let sd = 0.5;
        let noisy = simulate_real(&data, sd, &stream(14)).unwrap();
        let shift = (noisy.responses() - data.responses()).mean();
        assert!(shift.abs() < 4.0 * sd / 100.0, "{shift}");

        let other = simulate_real(&data, sd, &stream(15)).unwrap();
        assert_ne!(noisy.responses(), other.responses());
    }
}

//! Experiment orchestration: coverage studies (CR / IW / MP over repeated
//! experiments) and MSE benchmarks, with JSON report types.
//!
//! Reports deliberately exclude wall-clock timings from their serialized
//! form so that the same config and seed always produce byte-identical JSON;
//! timings are still available on the in-memory structs and via logs.

use crate::data::{
    generate_synthetic, ground_truth, load_csv, simulate_real, Dataset, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::inference::{
    batching_ci, cheap_bootstrap_ci, ij_ci, t_quantile, ConfidenceInterval, PncFitSpec,
};
use crate::network::{NetConfig, TrainConfig};
use crate::ntk::NtkKernel;
use crate::pnc::{deep_ensemble, fit_pnc, MeanInitSpec};
use crate::rng::RngStream;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::time::Instant;

fn build_id() -> String {
    option_env!("BUILD_ID")
        .unwrap_or(concat!("pnc-core-", env!("CARGO_PKG_VERSION")))
        .to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        #[serde(flatten)]
        spec: SyntheticSpec,
    },
    Csv {
        path: PathBuf,
        /// Response noise used to re-simulate repetitions around the file's
        /// responses; required for coverage runs.
        #[serde(default)]
        noise_sd: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Method {
    Batching {
        #[serde(default = "default_m_prime")]
        m_prime: usize,
    },
    CheapBootstrap {
        #[serde(default = "default_r")]
        replications: usize,
    },
    InfinitesimalJackknife,
}

fn default_m_prime() -> usize {
    4
}

fn default_r() -> usize {
    4
}

fn default_width_factor() -> usize {
    32
}

fn default_depth() -> usize {
    1
}

fn default_levels() -> Vec<f64> {
    vec![0.95, 0.90]
}

fn default_repetitions() -> usize {
    100
}

fn default_seeds() -> usize {
    10
}

fn default_test_size() -> usize {
    2048
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Training-set size drawn per repetition (or per seed).
    pub n: usize,
    #[serde(default = "default_width_factor")]
    pub width_factor: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    pub train: TrainConfig,
    pub method: Method,
    #[serde(default = "default_levels")]
    pub levels: Vec<f64>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    pub x0: Vec<f64>,
    /// Ground truth at x0; derived from the synthetic spec when omitted.
    #[serde(default)]
    pub y0: Option<f64>,
    pub master_seed: u64,
    #[serde(default)]
    pub mean_init: MeanInitSpec,
    /// Seeds for the MSE benchmark.
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n must be >= 1".into()));
        }
        if self.width_factor == 0 {
            return Err(Error::Config("width_factor must be >= 1".into()));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be >= 1".into()));
        }
        if self.seeds == 0 {
            return Err(Error::Config("seeds must be >= 1".into()));
        }
        if self.levels.is_empty() {
            return Err(Error::Config("levels must be non-empty".into()));
        }
        for &l in &self.levels {
            if !(l > 0.0 && l < 1.0) {
                return Err(Error::Config(format!("level {l} outside (0,1)")));
            }
        }
        let d = self.input_dim()?;
        if self.x0.len() != d {
            return Err(Error::Config(format!(
                "x0 has {} coordinates but the data has dimension {d}",
                self.x0.len()
            )));
        }
        match &self.data {
            DataSource::Synthetic { spec } => spec.validate()?,
            DataSource::Csv { .. } => {
                if self.y0.is_none() {
                    return Err(Error::Config(
                        "csv data source requires an explicit y0".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> Result<usize> {
        match &self.data {
            DataSource::Synthetic { spec } => Ok(spec.dim),
            DataSource::Csv { path, .. } => Ok(load_csv(path)?.dim()),
        }
    }

    pub fn net_config(&self, d: usize) -> NetConfig {
        NetConfig {
            input_dim: d,
            depth: self.depth,
            width: self.width_factor * self.n.max(1),
            width_factor: Some(self.width_factor),
        }
    }

    pub fn pipeline(&self, d: usize) -> PncFitSpec {
        PncFitSpec {
            net: self.net_config(d),
            train: self.train.clone(),
            mean_init: self.mean_init,
        }
    }

    fn resolve_y0(&self) -> Result<f64> {
        if let Some(y0) = self.y0 {
            return Ok(y0);
        }
        match &self.data {
            DataSource::Synthetic { spec } => ground_truth(spec, &self.x0),
            DataSource::Csv { .. } => Err(Error::Config(
                "csv data source requires an explicit y0".into(),
            )),
        }
    }

    /// Fresh training set for one repetition/seed.
    pub fn draw_dataset(&self, stream: &RngStream) -> Result<Dataset> {
        match &self.data {
            DataSource::Synthetic { spec } => generate_synthetic(spec, self.n, stream),
            DataSource::Csv { path, noise_sd } => {
                let base = load_csv(path)?;
                let sd = noise_sd.ok_or_else(|| {
                    Error::Config("csv data source requires noise_sd for resampling".into())
                })?;
                simulate_real(&base, sd, stream)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionRecord {
    pub repetition: usize,
    /// One interval per requested level, in config order.
    pub intervals: Vec<ConfidenceInterval>,
    pub covered: Vec<bool>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub level: f64,
    /// Coverage rate over repetitions.
    pub cr: f64,
    /// Mean interval width.
    pub iw: f64,
    /// Mean interval midpoint.
    pub mp: f64,
    /// Exact binomial band for the coverage rate.
    pub cr_clopper_pearson: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub build: String,
    pub config: ExperimentConfig,
    pub y0: f64,
    pub levels: Vec<LevelSummary>,
    pub repetitions: Vec<RepetitionRecord>,
    #[serde(skip)]
    pub total_wall_clock_secs: f64,
}

impl CoverageReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }

    /// Table 1-style CSV: one row per level.
    pub fn to_csv_table(&self) -> String {
        let mut out = String::from("level,cr,iw,mp,cp_lo,cp_hi\n");
        for s in &self.levels {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.level, s.cr, s.iw, s.mp, s.cr_clopper_pearson.0, s.cr_clopper_pearson.1
            ));
        }
        out
    }
}

/// Build one interval per level from a single fitted run. The constructors
/// are pivot-based with a fixed center and scale, so re-leveling only swaps
/// the quantile; this avoids refitting per level.
fn relevel(base: &ConfidenceInterval, levels: &[f64]) -> Result<Vec<ConfidenceInterval>> {
    let q_base = t_quantile(base.df, 1.0 - (1.0 - base.level) / 2.0)?;
    let unit = if q_base > 0.0 {
        base.half_width / q_base
    } else {
        0.0
    };
    levels
        .iter()
        .map(|&level| {
            let q = t_quantile(base.df, 1.0 - (1.0 - level) / 2.0)?;
            Ok(ConfidenceInterval {
                level,
                half_width: q * unit,
                ..base.clone()
            })
        })
        .collect()
}

fn run_repetition(
    config: &ExperimentConfig,
    d: usize,
    rep: usize,
) -> Result<Vec<ConfidenceInterval>> {
    let stream = RngStream::new(config.master_seed, rep as u64);
    let data = config.draw_dataset(&stream.substream(1))?;
    let ci_stream = stream.substream(2);
    let first_level = config.levels[0];
    let base = match config.method {
        Method::Batching { m_prime } => batching_ci(
            &data,
            &config.x0,
            first_level,
            m_prime,
            &config.pipeline(d),
            &ci_stream,
        )?,
        Method::CheapBootstrap { replications } => cheap_bootstrap_ci(
            &data,
            &config.x0,
            first_level,
            replications,
            &config.pipeline(d),
            &ci_stream,
        )?,
        Method::InfinitesimalJackknife => {
            let net = config.net_config(d).resolved_for(config.n);
            let shift = crate::pnc::MeanInitSpec::to_shift(
                config.mean_init,
                &net,
                &ci_stream.substream(0),
            )?;
            ij_ci(
                &data,
                &config.x0,
                first_level,
                NtkKernel::analytic(config.depth),
                config.train.ridge,
                shift,
            )?
        }
    };
    relevel(&base, &config.levels)
}

/// J repetitions, each drawing a fresh dataset and one interval per level at
/// x0, scored against the ground truth y0. Deterministic for a fixed
/// master_seed regardless of thread count.
pub fn run_coverage(config: &ExperimentConfig) -> Result<CoverageReport> {
    config.validate()?;
    let d = config.input_dim()?;
    let y0 = config.resolve_y0()?;
    let total_start = Instant::now();

    let records: Result<Vec<RepetitionRecord>> = (0..config.repetitions)
        .into_par_iter()
        .map(|rep| {
            let start = Instant::now();
            let intervals = run_repetition(config, d, rep).map_err(|e| match e {
                Error::DivergedIn { role, epoch, trace } => Error::DivergedIn {
                    role: format!("repetition {rep}: {role}"),
                    epoch,
                    trace,
                },
                Error::Diverged { epoch, trace } => Error::DivergedIn {
                    role: format!("repetition {rep}"),
                    epoch,
                    trace,
                },
                other => other,
            })?;
            let covered = intervals.iter().map(|ci| ci.contains(y0)).collect();
            Ok(RepetitionRecord {
                repetition: rep,
                intervals,
                covered,
                wall_clock_secs: start.elapsed().as_secs_f64(),
            })
        })
        .collect();
    let records = records?;

    let j = config.repetitions as f64;
    let mut summaries = Vec::with_capacity(config.levels.len());
    for (li, &level) in config.levels.iter().enumerate() {
        let hits = records.iter().filter(|r| r.covered[li]).count();
        let cr = hits as f64 / j;
        let iw = records.iter().map(|r| r.intervals[li].width()).sum::<f64>() / j;
        let mp = records.iter().map(|r| r.intervals[li].center).sum::<f64>() / j;
        let band =
            crate::inference::clopper_pearson(hits as u64, config.repetitions as u64, level)?;
        summaries.push(LevelSummary {
            level,
            cr,
            iw,
            mp,
            cr_clopper_pearson: band,
        });
    }

    Ok(CoverageReport {
        build: build_id(),
        config: config.clone(),
        y0,
        levels: summaries,
        repetitions: records,
        total_wall_clock_secs: total_start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMse {
    pub seed: usize,
    pub single: f64,
    pub pnc: f64,
    pub ensemble2: f64,
    pub ensemble5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMse {
    pub method: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseReport {
    pub build: String,
    pub config: ExperimentConfig,
    pub test_size: usize,
    pub per_seed: Vec<SeedMse>,
    pub methods: Vec<MethodMse>,
    #[serde(skip)]
    pub total_wall_clock_secs: f64,
}

impl MseReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }

    pub fn to_csv_table(&self) -> String {
        let mut out = String::from("method,mean,sd\n");
        for m in &self.methods {
            out.push_str(&format!("{},{},{}\n", m.method, m.mean, m.sd));
        }
        out
    }

    pub fn mean_of(&self, method: &str) -> Option<f64> {
        self.methods.iter().find(|m| m.method == method).map(|m| m.mean)
    }
}

fn mse_against(preds: &[f64], test: &Dataset) -> f64 {
    let n = test.n() as f64;
    preds
        .iter()
        .zip(test.responses().iter())
        .map(|(p, y)| (p - y) * (p - y))
        .sum::<f64>()
        / n
}

/// One seed of the MSE benchmark: a five-member deep ensemble (member 0
/// doubles as the single network, the first two as ensemble(2)) plus a PNC
/// fit, all scored on the same fresh test set.
pub fn mse_one_seed(
    train: &Dataset,
    test: &Dataset,
    net_cfg: &NetConfig,
    train_cfg: &TrainConfig,
    mean_init: &MeanInitSpec,
    stream: &RngStream,
) -> Result<SeedMse> {
    let ensemble = deep_ensemble(train, net_cfg, train_cfg, 5, &stream.substream(0))?;
    let pnc = fit_pnc(train, net_cfg, train_cfg, mean_init, &stream.substream(1))?;

    let n_te = test.n();
    let mut member_preds: Vec<Vec<f64>> = Vec::with_capacity(5);
    for member in ensemble.members() {
        let mut p = Vec::with_capacity(n_te);
        for i in 0..n_te {
            p.push(member.forward(&test.input_row(i))?);
        }
        member_preds.push(p);
    }
    let avg = |k: usize| -> Vec<f64> {
        (0..n_te)
            .map(|i| member_preds[..k].iter().map(|m| m[i]).sum::<f64>() / k as f64)
            .collect()
    };
    let mut pnc_preds = Vec::with_capacity(n_te);
    for i in 0..n_te {
        pnc_preds.push(pnc.predict(&test.input_row(i))?);
    }

    Ok(SeedMse {
        seed: 0,
        single: mse_against(&member_preds[0], test),
        pnc: mse_against(&pnc_preds, test),
        ensemble2: mse_against(&avg(2), test),
        ensemble5: mse_against(&avg(5), test),
    })
}

/// MSE benchmark over `config.seeds` seeds: per seed a fresh training set and
/// a fresh shared test set, reporting mean +- sd per method.
pub fn run_mse(config: &ExperimentConfig) -> Result<MseReport> {
    config.validate()?;
    let d = config.input_dim()?;
    let net_cfg = config.net_config(d);
    let total_start = Instant::now();

    let per_seed: Result<Vec<SeedMse>> = (0..config.seeds)
        .into_par_iter()
        .map(|seed| {
            let stream = RngStream::new(config.master_seed, seed as u64);
            let train = config.draw_dataset(&stream.substream(1))?;
            let test = match &config.data {
                DataSource::Synthetic { spec } => {
                    generate_synthetic(spec, config.test_size, &stream.substream(2))?
                }
                DataSource::Csv { .. } => config.draw_dataset(&stream.substream(2))?,
            };
            let mut m = mse_one_seed(
                &train,
                &test,
                &net_cfg,
                &config.train,
                &config.mean_init,
                &stream.substream(3),
            )
            .map_err(|e| match e {
                Error::DivergedIn { role, epoch, trace } => Error::DivergedIn {
                    role: format!("seed {seed}: {role}"),
                    epoch,
                    trace,
                },
                other => other,
            })?;
            m.seed = seed;
            Ok(m)
        })
        .collect();
    let per_seed = per_seed?;

    let summarize = |name: &str, pick: fn(&SeedMse) -> f64| -> MethodMse {
        let vals: Vec<f64> = per_seed.iter().map(pick).collect();
        let k = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / k;
        let sd = if vals.len() > 1 {
            (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1.0)).sqrt()
        } else {
            0.0
        };
        MethodMse {
            method: name.to_string(),
            mean,
            sd,
        }
    };

    Ok(MseReport {
        build: build_id(),
        config: config.clone(),
        test_size: config.test_size,
        methods: vec![
            summarize("single", |m| m.single),
            summarize("pnc", |m| m.pnc),
            summarize("ensemble2", |m| m.ensemble2),
            summarize("ensemble5", |m| m.ensemble5),
        ],
        per_seed,
        total_wall_clock_secs: total_start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Family;
    use nalgebra::{DMatrix, DVector};

    fn tiny_config(method: Method) -> ExperimentConfig {
        ExperimentConfig {
            data: DataSource::Synthetic {
                spec: SyntheticSpec::new(Family::SinSum, 2, 0.001),
            },
            n: 8,
            width_factor: 16,
            depth: 1,
            train: TrainConfig::new(1e-10, 10.0, 200),
            method,
            levels: vec![0.95, 0.90],
            repetitions: 4,
            x0: vec![0.1, 0.1],
            y0: None,
            master_seed: 777,
            mean_init: MeanInitSpec::Zero,
            seeds: 3,
            test_size: 64,
        }
    }

    #[test]
    fn coverage_report_invariants() {
        for method in [
            Method::Batching { m_prime: 2 },
            Method::CheapBootstrap { replications: 2 },
            Method::InfinitesimalJackknife,
        ] {
            let report = run_coverage(&tiny_config(method)).unwrap();
            assert_eq!(report.repetitions.len(), 4);
            assert_eq!(report.levels.len(), 2);
            assert!((report.y0 - 2.0 * (0.1f64).sin()).abs() < 1e-12);
            for s in &report.levels {
                assert!((0.0..=1.0).contains(&s.cr), "cr {}", s.cr);
                assert!(s.iw >= 0.0);
                let (lo, hi) = s.cr_clopper_pearson;
                assert!(lo <= s.cr && s.cr <= hi, "band [{lo},{hi}] vs {}", s.cr);
            }
            for r in &report.repetitions {
                assert_eq!(r.intervals.len(), 2);
                // 90% interval nested in the 95% one around the same center
                assert!(r.intervals[1].half_width <= r.intervals[0].half_width);
                assert_eq!(r.intervals[1].center, r.intervals[0].center);
            }
        }
    }

    #[test]
    fn coverage_is_deterministic_json() {
        let cfg = tiny_config(Method::Batching { m_prime: 2 });
        let a = run_coverage(&cfg).unwrap().to_json();
        let b = run_coverage(&cfg).unwrap().to_json();
        assert_eq!(a, b);
    }

    #[test]
    fn coverage_rejects_bad_configs() {
        let mut cfg = tiny_config(Method::InfinitesimalJackknife);
        cfg.x0 = vec![0.1];
        assert!(run_coverage(&cfg).is_err());
        let mut cfg = tiny_config(Method::InfinitesimalJackknife);
        cfg.levels = vec![1.5];
        assert!(run_coverage(&cfg).is_err());
        let mut cfg = tiny_config(Method::InfinitesimalJackknife);
        cfg.repetitions = 0;
        assert!(run_coverage(&cfg).is_err());
    }

    #[test]
    fn config_json_roundtrip_with_defaults() {
        let json = r#"{
            "data": {"source": "synthetic", "family": "sin_sum", "dim": 2, "noise_sd": 0.001},
            "n": 128,
            "train": {"ridge": 1e-10, "learning_rate": 10.0, "epochs": 500},
            "method": {"name": "batching"},
            "x0": [0.1, 0.1],
            "master_seed": 42
        }"#;
        let cfg: ExperimentConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.width_factor, 32);
        assert_eq!(cfg.levels, vec![0.95, 0.90]);
        assert_eq!(cfg.repetitions, 100);
        assert_eq!(cfg.method, Method::Batching { m_prime: 4 });
        assert_eq!(cfg.test_size, 2048);
        cfg.validate().unwrap();
        let back: ExperimentConfig =
            serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn mse_report_shape_and_determinism() {
        let cfg = tiny_config(Method::Batching { m_prime: 2 });
        let report = run_mse(&cfg).unwrap();
        assert_eq!(report.per_seed.len(), 3);
        let names: Vec<&str> = report.methods.iter().map(|m| m.method.as_str()).collect();
        assert_eq!(names, ["single", "pnc", "ensemble2", "ensemble5"]);
        for m in &report.methods {
            assert!(m.mean.is_finite() && m.mean >= 0.0);
            assert!(m.sd.is_finite() && m.sd >= 0.0);
        }
        let again = run_mse(&cfg).unwrap();
        assert_eq!(report.to_json(), again.to_json());
        assert!(report.to_csv_table().starts_with("method,mean,sd\n"));
    }

    #[test]
    fn constant_function_fits_to_machine_noise() {
        // zero noise, constant response: every method should reproduce the
        // training responses themselves almost exactly.
        let n = 4;
        let base = generate_synthetic(
            &SyntheticSpec::new(Family::SinSum, 2, 0.001),
            n,
            &RngStream::new(5, 0),
        )
        .unwrap();
        let train = Dataset::new(
            base.inputs().clone(),
            DVector::from_element(n, 0.3),
        )
        .unwrap();
        let net = NetConfig {
            input_dim: 2,
            depth: 1,
            width: 512,
            width_factor: None,
        };
        let tc = TrainConfig::new(1e-10, 20.0, 5000);
        let m = mse_one_seed(
            &train,
            &train,
            &net,
            &tc,
            &MeanInitSpec::Zero,
            &RngStream::new(9, 9),
        )
        .unwrap();
        for (name, v) in [
            ("single", m.single),
            ("pnc", m.pnc),
            ("ensemble2", m.ensemble2),
            ("ensemble5", m.ensemble5),
        ] {
            assert!(v < 1e-6, "{name}: {v}");
        }
    }

    #[test]
    fn csv_source_round_trips_through_coverage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let mut body = String::from("x1,x2,y\n");
        let mut state = 1234u64;
        for _ in 0..8 {
            let mut next = || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                (state >> 11) as f64 / (1u64 << 53) as f64 * 0.2
            };
            let (a, b) = (next(), next());
            body.push_str(&format!("{a},{b},{}\n", a.sin() + b.sin()));
        }
        std::fs::write(&path, body).unwrap();
        let mut cfg = tiny_config(Method::InfinitesimalJackknife);
        cfg.data = DataSource::Csv {
            path: path.clone(),
            noise_sd: Some(0.001),
        };
        assert!(run_coverage(&cfg).is_err()); // y0 required
        cfg.y0 = Some(2.0 * (0.1f64).sin());
        let report = run_coverage(&cfg).unwrap();
        assert_eq!(report.repetitions.len(), 4);
    }
}

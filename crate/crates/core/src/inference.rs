//! Confidence-interval constructors on top of the PNC predictor: batching,
//! cheap bootstrap, and the infinitesimal jackknife on the KRR closed form.
//! Student-t / normal quantiles and Clopper-Pearson binomial intervals are
//! implemented here via the regularized incomplete beta and gamma functions
//! with Newton polishing, and validated against quadrature oracles in the
//! test suites rather than against typed-in tables.

use crate::data::{bootstrap_resample, split_batches, Dataset};
use crate::error::{Error, Result};
use crate::krr::{ensemble_closed_form, KrrSolution, Shift};
use crate::network::{NetConfig, TrainConfig};
use crate::ntk::NtkKernel;
use crate::pnc::{fit_pnc, MeanInitSpec};
use crate::rng::RngStream;
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Special functions
// ---------------------------------------------------------------------------

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        return std::f64::consts::PI.ln()
            - (std::f64::consts::PI * x).sin().ln()
            - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized lower incomplete gamma P(a, x), series + continued fraction.
fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        // series
        let mut ap = a;
        let mut sum = 1.0 / a;
        let mut del = sum;
        for _ in 0..500 {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        sum * (-x + a * x.ln() - ln_gamma(a)).exp()
    } else {
        // continued fraction for Q(a, x)
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        1.0 - (-x + a * x.ln() - ln_gamma(a)).exp() * h
    }
}

pub fn erf(x: f64) -> f64 {
    let p = gamma_p(0.5, x * x);
    if x >= 0.0 {
        p
    } else {
        -p
    }
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Inverse standard normal CDF: Acklam's rational approximation followed by
/// one Halley polish against the accurate CDF.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("p={p} outside (0,1)")));
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_690e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    let p_low = 0.02425;
    let mut x = if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    // Halley step
    let e = normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    x -= u / (1.0 + x * u / 2.0);
    Ok(x)
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < tiny {
        d = tiny;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b).
pub fn beta_inc(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_bt = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let bt = ln_bt.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        bt * beta_cf(a, b, x) / a
    } else {
        1.0 - bt * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Inverse of I_x(a, b) in x: bisection bracket plus Newton polish.
pub fn beta_quantile(p: f64, a: f64, b: f64) -> Result<f64> {
    if !(p >= 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!("p={p} outside [0,1]")));
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    if p == 1.0 {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut x = a / (a + b);
    for _ in 0..80 {
        if beta_inc(a, b, x) > p {
            hi = x;
        } else {
            lo = x;
        }
        x = 0.5 * (lo + hi);
    }
    // Newton polish with the beta density
    let ln_norm = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b);
    for _ in 0..3 {
        let f = beta_inc(a, b, x) - p;
        let pdf = (ln_norm + (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln()).exp();
        if pdf > 0.0 && pdf.is_finite() {
            let step = f / pdf;
            let cand = x - step;
            if cand > lo && cand < hi {
                x = cand;
            }
        }
    }
    Ok(x)
}

/// Degrees of freedom for the t quantile: a positive integer or infinity
/// (the standard normal). Serialized as a JSON number or the string "inf".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Df {
    Finite(u64),
    Infinite,
}

impl Serialize for Df {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Df::Finite(nu) => s.serialize_u64(*nu),
            Df::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Df {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        match v {
            serde_json::Value::Number(n) => n
                .as_u64()
                .map(Df::Finite)
                .ok_or_else(|| serde::de::Error::custom("df must be a non-negative integer")),
            serde_json::Value::String(s) if s == "inf" => Ok(Df::Infinite),
            other => Err(serde::de::Error::custom(format!(
                "df must be an integer or \"inf\", got {other}"
            ))),
        }
    }
}

fn t_cdf(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    let tail = 0.5 * beta_inc(0.5 * df, 0.5, x);
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

fn t_pdf(t: f64, df: f64) -> f64 {
    let ln_c = ln_gamma(0.5 * (df + 1.0))
        - ln_gamma(0.5 * df)
        - 0.5 * (df * std::f64::consts::PI).ln();
    (ln_c - 0.5 * (df + 1.0) * (t * t / df).ln_1p()).exp()
}

/// Inverse CDF of Student t with `df` degrees of freedom (`Df::Infinite`
/// means the standard normal).
pub fn t_quantile(df: Df, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("p={p} outside (0,1)")));
    }
    let nu = match df {
        Df::Infinite => return normal_quantile(p),
        Df::Finite(0) => {
            return Err(Error::InvalidArgument("df must be a positive integer".into()))
        }
        Df::Finite(nu) => nu as f64,
    };
    if p == 0.5 {
        return Ok(0.0);
    }
    // symmetric: solve for p > 0.5
    if p < 0.5 {
        return Ok(-t_quantile(df, 1.0 - p)?);
    }
    // quantile via inverse incomplete beta on the tail:
    // tail = 1 - p = 0.5 I_x(nu/2, 1/2)  =>  x = nu / (nu + t^2)
    let x = beta_quantile(2.0 * (1.0 - p), 0.5 * nu, 0.5)?;
    let mut t = ((nu * (1.0 - x)) / x.max(1e-300)).sqrt();
    // Newton polish on the CDF
    for _ in 0..3 {
        let f = t_cdf(t, nu) - p;
        let dens = t_pdf(t, nu);
        if dens > 0.0 && dens.is_finite() {
            t -= f / dens;
        }
    }
    Ok(t)
}

/// Clopper-Pearson exact binomial confidence interval via Beta quantiles.
pub fn clopper_pearson(successes: u64, trials: u64, level: f64) -> Result<(f64, f64)> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    if successes > trials {
        return Err(Error::InvalidArgument(format!(
            "successes {successes} exceeds trials {trials}"
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("level={level} outside (0,1)")));
    }
    let alpha = 1.0 - level;
    let (s, n) = (successes as f64, trials as f64);
    let lo = if successes == 0 {
        0.0
    } else {
        beta_quantile(alpha / 2.0, s, n - s + 1.0)?
    };
    let hi = if successes == trials {
        1.0
    } else {
        beta_quantile(1.0 - alpha / 2.0, s + 1.0, n - s)?
    };
    Ok((lo, hi))
}

// ---------------------------------------------------------------------------
// Confidence intervals
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    Batching,
    CheapBootstrap,
    InfinitesimalJackknife,
}

/// A symmetric interval [center - half_width, center + half_width] with the
/// diagnostics of the method that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub method: CiMethod,
    pub level: f64,
    pub center: f64,
    pub half_width: f64,
    pub df: Df,
    /// The method's scale statistic: S_B, S_C, or sigma_hat.
    pub scale: f64,
    pub replications: usize,
}

impl ConfidenceInterval {
    pub fn lower(&self) -> f64 {
        self.center - self.half_width
    }

    pub fn upper(&self) -> f64 {
        self.center + self.half_width
    }

    pub fn contains(&self, y: f64) -> bool {
        self.lower() <= y && y <= self.upper()
    }

    pub fn width(&self) -> f64 {
        2.0 * self.half_width
    }
}

/// The training recipe the CI constructors hand to each PNC fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PncFitSpec {
    pub net: NetConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub mean_init: MeanInitSpec,
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("level={level} outside (0,1)")));
    }
    Ok(())
}

/// PNC-enhanced batching: one PNC fit per disjoint batch, then the
/// self-normalized t statistic over the batch predictions.
pub fn batching_ci(
    data: &Dataset,
    x0: &[f64],
    level: f64,
    m_prime: usize,
    pipeline: &PncFitSpec,
    stream: &RngStream,
) -> Result<ConfidenceInterval> {
    check_level(level)?;
    if data.n() / m_prime.max(1) < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch size {} too small (need >= 2)",
            data.n() / m_prime.max(1)
        )));
    }
    let batches = split_batches(data, m_prime, &stream.substream(0))?;
    let preds: Result<Vec<f64>> = batches
        .par_iter()
        .enumerate()
        .map(|(j, batch)| {
            let p = fit_pnc(
                batch,
                &pipeline.net,
                &pipeline.train,
                &pipeline.mean_init,
                &stream.substream(1 + j as u64),
            )
            .map_err(|e| match e {
                Error::DivergedIn { role, epoch, trace } => Error::DivergedIn {
                    role: format!("batch {j} {role}"),
                    epoch,
                    trace,
                },
                other => other,
            })?;
            p.predict(x0)
        })
        .collect();
    let preds = preds?;
    let m = m_prime as f64;
    let psi = preds.iter().sum::<f64>() / m;
    let s_sq = preds.iter().map(|v| (v - psi) * (v - psi)).sum::<f64>() / (m - 1.0);
    let s = s_sq.sqrt();
    let q = t_quantile(Df::Finite(m_prime as u64 - 1), 1.0 - (1.0 - level) / 2.0)?;
    Ok(ConfidenceInterval {
        method: CiMethod::Batching,
        level,
        center: psi,
        half_width: q * s / m.sqrt(),
        df: Df::Finite(m_prime as u64 - 1),
        scale: s,
        replications: m_prime,
    })
}

/// PNC-enhanced cheap bootstrap: one full-data PNC fit plus R resample fits;
/// the half-width is q_t * S_C with no sqrt(R) divisor because the t_R pivot
/// is built directly on the original-vs-resample deviation and absorbs R.
pub fn cheap_bootstrap_ci(
    data: &Dataset,
    x0: &[f64],
    level: f64,
    replications: usize,
    pipeline: &PncFitSpec,
    stream: &RngStream,
) -> Result<ConfidenceInterval> {
    check_level(level)?;
    if replications == 0 {
        return Err(Error::InvalidArgument("R must be >= 1".into()));
    }
    let full = fit_pnc(
        data,
        &pipeline.net,
        &pipeline.train,
        &pipeline.mean_init,
        &stream.substream(0),
    )?;
    let psi = full.predict(x0)?;

    let resample_preds: Result<Vec<f64>> = (1..=replications)
        .into_par_iter()
        .map(|j| {
            let resampled = bootstrap_resample(data, &stream.substream(1000 + j as u64));
            let p = fit_pnc(
                &resampled,
                &pipeline.net,
                &pipeline.train,
                &pipeline.mean_init,
                &stream.substream(j as u64),
            )
            .map_err(|e| match e {
                Error::DivergedIn { role, epoch, trace } => Error::DivergedIn {
                    role: format!("replicate {j} {role}"),
                    epoch,
                    trace,
                },
                other => other,
            })?;
            p.predict(x0)
        })
        .collect();
    let resample_preds = resample_preds?;
    let s_sq = resample_preds
        .iter()
        .map(|v| (v - psi) * (v - psi))
        .sum::<f64>()
        / replications as f64;
    let s = s_sq.sqrt();
    let q = t_quantile(Df::Finite(replications as u64), 1.0 - (1.0 - level) / 2.0)?;
    Ok(ConfidenceInterval {
        method: CiMethod::CheapBootstrap,
        level,
        center: psi,
        half_width: q * s,
        df: Df::Finite(replications as u64),
        scale: s,
        replications,
    })
}

// ---------------------------------------------------------------------------
// Infinitesimal jackknife on the KRR closed form
// ---------------------------------------------------------------------------

/// Plug-in variance estimate sigma_hat^2(x0) and its per-point influence
/// values.
#[derive(Debug, Clone, PartialEq)]
pub struct IjEstimate {
    pub sigma_hat_sq: f64,
    pub per_point_if: Vec<f64>,
}

/// Influence of one sample point z = (z_x, z_y) on the idealized-ensemble
/// prediction at x0:
/// IF(z)(x0) = K(x0, X)(K + lambda0 n I)^{-1} M_z(X) - M_z(x0) with
/// M_z(x) = g(x) - (1/lambda0) (z_y - hstar(z_x)) K(z_x, x), g = hstar - s_bar.
pub fn ij_influence(
    sol: &KrrSolution,
    z_x: &[f64],
    z_y: f64,
    x0: &[f64],
    lambda0: f64,
) -> Result<f64> {
    check_lambda0(sol, lambda0)?;
    let kernel = sol.kernel();
    let xs = sol.train_inputs();
    let k0 = kernel.kernel_vector(x0, xs)?;
    let v = sol.factor().solve(&k0)?;
    let g_train = dual_part_train(sol)?;
    let g_x0 = k0.dot(sol.dual_coef());
    let kz = kernel.kernel_vector(z_x, xs)?;
    let kz_x0 = kernel.eval(z_x, x0)?;
    let hstar_zx = sol.predict(z_x)?;
    Ok(influence_from_parts(
        &v, &g_train, g_x0, &kz, kz_x0, z_y, hstar_zx, lambda0,
    ))
}

fn check_lambda0(sol: &KrrSolution, lambda0: f64) -> Result<()> {
    if !(lambda0 > 0.0) {
        return Err(Error::InvalidArgument("lambda0 must be > 0".into()));
    }
    if (lambda0 - sol.ridge()).abs() > 1e-15 * sol.ridge().max(lambda0) {
        return Err(Error::InvalidArgument(
            "lambda0 must equal the solution's ridge (lambda0 = lambda_n)".into(),
        ));
    }
    Ok(())
}

/// Predictions minus shift at the training points: g(X) = K(X, X) alpha.
fn dual_part_train(sol: &KrrSolution) -> Result<DVector<f64>> {
    let n = sol.gram().n();
    let mut k = sol.gram().values().clone();
    for i in 0..n {
        k[(i, i)] -= sol.ridge() * n as f64;
    }
    Ok(k * sol.dual_coef())
}

#[allow(clippy::too_many_arguments)]
fn influence_from_parts(
    v: &DVector<f64>,
    g_train: &DVector<f64>,
    g_x0: f64,
    kz: &DVector<f64>,
    kz_x0: f64,
    z_y: f64,
    hstar_zx: f64,
    lambda0: f64,
) -> f64 {
    let c = (z_y - hstar_zx) / lambda0;
    let m_train_dot_v = v.dot(g_train) - c * v.dot(kz);
    let m_x0 = g_x0 - c * kz_x0;
    m_train_dot_v - m_x0
}

/// sigma_hat^2(x0) = (1/n) sum_i IF^2(z_i)(x0) over the training points.
pub fn ij_variance(
    sol: &KrrSolution,
    data: &Dataset,
    x0: &[f64],
    lambda0: f64,
) -> Result<IjEstimate> {
    check_lambda0(sol, lambda0)?;
    let n = data.n();
    let kernel = sol.kernel();
    let xs = sol.train_inputs();
    let k0 = kernel.kernel_vector(x0, xs)?;
    let v = sol.factor().solve(&k0)?;
    let g_train = dual_part_train(sol)?;
    let g_x0 = k0.dot(sol.dual_coef());
    let hstar_train = sol.predict_train()?;
    let v_dot_g = v.dot(&g_train);

    // For z equal to training row i, K(z_x, X) is column i of the no-ridge
    // Gram matrix, so the whole sweep reuses the cached assembly.
    let mut k_matrix = sol.gram().values().clone();
    for i in 0..n {
        k_matrix[(i, i)] -= sol.ridge() * n as f64;
    }

    let mut per_point_if = Vec::with_capacity(n);
    for i in 0..n {
        let kz = k_matrix.column(i);
        let kz_x0 = k0[i];
        let c = (data.responses()[i] - hstar_train[i]) / lambda0;
        let m_dot_v = v_dot_g - c * v.dot(&kz);
        let m_x0 = g_x0 - c * kz_x0;
        per_point_if.push(m_dot_v - m_x0);
    }
    let sigma_hat_sq = per_point_if.iter().map(|v| v * v).sum::<f64>() / n as f64;
    Ok(IjEstimate {
        sigma_hat_sq,
        per_point_if,
    })
}

/// Normal-quantile interval around the closed-form idealized-ensemble
/// prediction: [hstar(x0) +- z_{1-alpha/2} sigma_hat / sqrt(n)]. Runs on the
/// KRR path, not trained networks, because the influence function is defined
/// for the KRR functional.
pub fn ij_ci(
    data: &Dataset,
    x0: &[f64],
    level: f64,
    kernel: NtkKernel,
    lambda: f64,
    mean_shift: Shift,
) -> Result<ConfidenceInterval> {
    check_level(level)?;
    let sol = ensemble_closed_form(kernel, data, lambda, mean_shift)?;
    let est = ij_variance(&sol, data, x0, lambda)?;
    let center = sol.predict(x0)?;
    let q = normal_quantile(1.0 - (1.0 - level) / 2.0)?;
    let sigma_hat = est.sigma_hat_sq.sqrt();
    Ok(ConfidenceInterval {
        method: CiMethod::InfinitesimalJackknife,
        level,
        center,
        half_width: q * sigma_hat / (data.n() as f64).sqrt(),
        df: Df::Infinite,
        scale: sigma_hat,
        replications: data.n(),
    })
}

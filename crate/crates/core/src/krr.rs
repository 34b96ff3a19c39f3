//! Closed-form shifted kernel ridge regression. This is the linear-algebra
//! ground truth the trained networks and PNC predictors are checked against:
//! a trained linearized network equals shifted KRR with the NTK, the
//! idealized infinite ensemble is the same solve with the mean-init shift,
//! and the procedural noise is the difference of the two.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{init_he, NetConfig, WideNet};
use crate::ntk::{gram, GramFactor, GramMatrix, NtkKernel};
use crate::rng::RngStream;
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

/// Initial-function shift s(.) used by the shifted-KRR code path. All three
/// closed forms (single net, idealized ensemble, procedural noise) share this
/// evaluator type.
#[derive(Debug, Clone)]
pub enum Shift {
    /// s = 0 (the mean of He-initialized networks in the wide limit).
    Zero,
    /// s = s_{theta_b}: the initialization function of one network.
    InitNet(Arc<WideNet>),
    /// The pointwise average of several networks' initialization functions.
    Average(Vec<Arc<WideNet>>),
    /// Monte Carlo estimate of the mean init function: the average of `count`
    /// freshly initialized networks, deterministic given `stream`.
    MonteCarlo {
        config: NetConfig,
        count: usize,
        stream: RngStream,
    },
}

impl Shift {
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        let xs = DMatrix::from_row_slice(1, x.len(), x);
        Ok(self.eval_batch(&xs)?[0])
    }

    pub fn eval_batch(&self, xs: &DMatrix<f64>) -> Result<DVector<f64>> {
        match self {
            Shift::Zero => Ok(DVector::zeros(xs.nrows())),
            Shift::InitNet(net) => net.forward_init_batch(xs),
            Shift::Average(nets) => {
                if nets.is_empty() {
                    return Err(Error::InvalidArgument("empty shift average".into()));
                }
                let mut acc = DVector::zeros(xs.nrows());
                for net in nets {
                    acc += net.forward_init_batch(xs)?;
                }
                Ok(acc / nets.len() as f64)
            }
            Shift::MonteCarlo {
                config,
                count,
                stream,
            } => {
                if *count == 0 {
                    return Err(Error::InvalidArgument("MonteCarlo shift count must be >= 1".into()));
                }
                let mut acc = DVector::zeros(xs.nrows());
                for k in 0..*count {
                    let net = init_he(config, &stream.substream(k as u64))?;
                    acc += net.forward_init_batch(xs)?;
                }
                Ok(acc / *count as f64)
            }
        }
    }
}

/// Dual-form KRR solution: predict(x) = s(x) + K(x, X) alpha with
/// alpha = (K + lambda n I)^{-1} (y - s(X)).
pub struct KrrSolution {
    kernel: NtkKernel,
    train_inputs: DMatrix<f64>,
    dual_coef: DVector<f64>,
    ridge: f64,
    shift: Shift,
    gram: GramMatrix,
    factor: GramFactor,
}

pub fn solve(kernel: NtkKernel, data: &Dataset, ridge: f64, shift: Shift) -> Result<KrrSolution> {
    if !(ridge > 0.0) {
        return Err(Error::InvalidArgument("ridge must be > 0".into()));
    }
    let g = gram(&kernel, data.inputs(), ridge)?;
    let factor = g.factorize()?;
    let rhs = data.responses() - shift.eval_batch(data.inputs())?;
    let dual_coef = factor.solve(&rhs)?;

    let residual = (g.values() * &dual_coef) - &rhs;
    if residual.norm() > 1e-8 * rhs.norm().max(1e-300) {
        return Err(Error::Factorization(format!(
            "linear-system residual {:.3e} exceeds contract",
            residual.norm()
        )));
    }

    Ok(KrrSolution {
        kernel,
        train_inputs: data.inputs().clone(),
        dual_coef,
        ridge,
        shift,
        gram: g,
        factor,
    })
}

impl KrrSolution {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.train_inputs.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.train_inputs.ncols(),
                got: x.len(),
            });
        }
        let kv = self.kernel.kernel_vector(x, &self.train_inputs)?;
        Ok(self.shift.eval(x)? + kv.dot(&self.dual_coef))
    }

    /// Predictions at the training inputs, using the cached Gram matrix.
    pub fn predict_train(&self) -> Result<DVector<f64>> {
        let n = self.gram.n();
        let mut k = self.gram.values().clone();
        for i in 0..n {
            k[(i, i)] -= self.ridge * n as f64;
        }
        Ok(self.shift.eval_batch(&self.train_inputs)? + k * &self.dual_coef)
    }

    pub fn dual_coef(&self) -> &DVector<f64> {
        &self.dual_coef
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn kernel(&self) -> &NtkKernel {
        &self.kernel
    }

    pub fn shift(&self) -> &Shift {
        &self.shift
    }

    pub fn train_inputs(&self) -> &DMatrix<f64> {
        &self.train_inputs
    }

    pub(crate) fn factor(&self) -> &GramFactor {
        &self.factor
    }

    pub(crate) fn gram(&self) -> &GramMatrix {
        &self.gram
    }
}

/// The idealized deep ensemble: KRR shifted by the mean init function.
pub fn ensemble_closed_form(
    kernel: NtkKernel,
    data: &Dataset,
    ridge: f64,
    mean_shift: Shift,
) -> Result<KrrSolution> {
    solve(kernel, data, ridge, mean_shift)
}

/// Closed-form procedural noise:
/// phi(x) = s_init(x) - s_bar(x) + K(x, X)(K + lambda n I)^{-1}(s_bar(X) - s_init(X)).
pub struct ProceduralNoise {
    kernel: NtkKernel,
    inputs: DMatrix<f64>,
    coef: DVector<f64>,
    s_init: Shift,
    s_bar: Shift,
}

pub fn procedural_noise_closed_form(
    kernel: NtkKernel,
    data_inputs: &DMatrix<f64>,
    ridge: f64,
    s_init: Shift,
    s_bar: Shift,
) -> Result<ProceduralNoise> {
    if !(ridge > 0.0) {
        return Err(Error::InvalidArgument("ridge must be > 0".into()));
    }
    let g = gram(&kernel, data_inputs, ridge)?;
    let factor = g.factorize()?;
    let rhs = s_bar.eval_batch(data_inputs)? - s_init.eval_batch(data_inputs)?;
    let coef = factor.solve(&rhs)?;
    Ok(ProceduralNoise {
        kernel,
        inputs: data_inputs.clone(),
        coef,
        s_init,
        s_bar,
    })
}

impl ProceduralNoise {
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        let kv = self.kernel.kernel_vector(x, &self.inputs)?;
        Ok(self.s_init.eval(x)? - self.s_bar.eval(x)? + kv.dot(&self.coef))
    }
}

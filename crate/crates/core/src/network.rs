//! NTK-parameterized wide MLP: He initialization, forward pass, parameter
//! Jacobian, and full-batch gradient descent on the ridge-regularized MSE
//! loss. Layers carry no bias terms and the activation is ReLU; each hidden
//! layer's post-activation is scaled by sqrt(2 / width).

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub const C_SIGMA: f64 = 2.0; // 1 / E[relu(Z)^2] for Z ~ N(0,1)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_dim: usize,
    /// Number of hidden layers L.
    pub depth: usize,
    /// Neurons per hidden layer.
    pub width: usize,
    /// When set, callers that build nets for a dataset of size n use
    /// width = width_factor * n instead of `width`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width_factor: Option<usize>,
}

impl NetConfig {
    pub fn new(input_dim: usize, depth: usize, width: usize) -> Self {
        Self {
            input_dim,
            depth,
            width,
            width_factor: None,
        }
    }

    /// Resolve the width for a training set of size n: `width_factor * n`
    /// when the factor is set, the fixed `width` otherwise.
    pub fn resolved_for(&self, n: usize) -> NetConfig {
        match self.width_factor {
            Some(f) => NetConfig {
                width: f * n,
                width_factor: None,
                ..*self
            },
            None => *self,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.depth == 0 || self.width == 0 {
            return Err(Error::InvalidArgument(
                "input_dim, depth and width must all be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Layer output dimensions d_1, ..., d_{L+1} (the last is the scalar output).
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.width; self.depth];
        dims.push(1);
        dims
    }

    pub fn param_count(&self) -> usize {
        let mut prev = self.input_dim;
        let mut p = 0;
        for d in self.layer_dims() {
            p += d * prev;
            prev = d;
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Ridge coefficient lambda_n on ||theta - theta_b||^2.
    pub ridge: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(default)]
    pub record_loss: bool,
}

impl TrainConfig {
    pub fn new(ridge: f64, learning_rate: f64, epochs: usize) -> Self {
        Self {
            ridge,
            learning_rate,
            epochs,
            record_loss: false,
        }
    }
}

/// A wide network with its parameters and the immutable initialization
/// snapshot theta_b taken at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct WideNet {
    config: NetConfig,
    params: DVector<f64>,
    init_params: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: NetConfig,
    params: Vec<f64>,
    init_params: Vec<f64>,
}

/// Split a flat parameter vector into per-layer weight matrices
/// (column-major within each layer).
fn unflatten(config: &NetConfig, params: &DVector<f64>) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(config.depth + 1);
    let mut prev = config.input_dim;
    let mut offset = 0;
    for d in config.layer_dims() {
        let len = d * prev;
        out.push(DMatrix::from_column_slice(d, prev, &params.as_slice()[offset..offset + len]));
        offset += len;
        prev = d;
    }
    out
}

fn flatten(config: &NetConfig, weights: &[DMatrix<f64>]) -> DVector<f64> {
    let mut v = Vec::with_capacity(config.param_count());
    for w in weights {
        v.extend_from_slice(w.as_slice());
    }
    DVector::from_vec(v)
}

/// He initialization: every weight i.i.d. N(0, 1); the sqrt(c_sigma / d_l)
/// scaling lives in the forward pass, not in the weights.
pub fn init_he(config: &NetConfig, stream: &RngStream) -> Result<WideNet> {
    config.validate()?;
    let mut rng = stream.rng();
    let p = config.param_count();
    let params = DVector::from_iterator(p, (0..p).map(|_| StandardNormal.sample(&mut rng)));
    Ok(WideNet {
        config: *config,
        init_params: params.clone(),
        params,
    })
}

impl WideNet {
    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &DVector<f64> {
        &self.params
    }

    pub fn init_params(&self) -> &DVector<f64> {
        &self.init_params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.config.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.input_dim,
                got,
            });
        }
        Ok(())
    }

    /// Batch forward pass at the given parameters; rows of `xs` are samples.
    fn forward_batch_at(&self, xs: &DMatrix<f64>, params: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(xs.ncols())?;
        let weights = unflatten(&self.config, params);
        let mut act = xs.clone();
        for (l, w) in weights.iter().enumerate() {
            let mut pre = &act * w.transpose();
            if l < weights.len() - 1 {
                let scale = (C_SIGMA / w.nrows() as f64).sqrt();
                pre.apply(|v| *v = scale * v.max(0.0));
            }
            act = pre;
        }
        Ok(act.column(0).into_owned())
    }

    pub fn forward_batch(&self, xs: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.forward_batch_at(xs, &self.params)
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        let xs = DMatrix::from_row_slice(1, x.len(), x);
        Ok(self.forward_batch(&xs)?[0])
    }

    /// Output of the untouched initialization network s_{theta_b}.
    pub fn forward_init(&self, x: &[f64]) -> Result<f64> {
        let xs = DMatrix::from_row_slice(1, x.len(), x);
        Ok(self.forward_batch_at(&xs, &self.init_params)?[0])
    }

    pub fn forward_init_batch(&self, xs: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.forward_batch_at(xs, &self.init_params)
    }

    /// Gradient of the scalar output with respect to the flat parameter
    /// vector, one row per input row, evaluated at the current parameters.
    pub fn jacobian(&self, xs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(xs.ncols())?;
        let weights = unflatten(&self.config, &self.params);
        let n = xs.nrows();
        let p = self.param_count();

        // Forward, keeping pre-activations and activations per layer.
        let mut acts: Vec<DMatrix<f64>> = vec![xs.clone()];
        let mut pres: Vec<DMatrix<f64>> = Vec::with_capacity(weights.len());
        for (l, w) in weights.iter().enumerate() {
            let pre = acts.last().unwrap() * w.transpose();
            pres.push(pre.clone());
            if l < weights.len() - 1 {
                let scale = (C_SIGMA / w.nrows() as f64).sqrt();
                acts.push(pre.map(|v| scale * v.max(0.0)));
            }
        }

        let mut jac = DMatrix::zeros(n, p);
        // delta[i] holds d out_i / d pre_l for the current layer, going backwards.
        let mut delta = DMatrix::from_element(n, 1, 1.0);
        let mut offset_end = p;
        for l in (0..weights.len()).rev() {
            let w = &weights[l];
            let (dl, dprev) = (w.nrows(), w.ncols());
            let a_prev = &acts[l];
            let start = offset_end - dl * dprev;
            // grad W_l for sample i is delta_i (dl) outer a_prev_i (dprev),
            // stored column-major: entry (r, c) at start + c*dl + r.
            for i in 0..n {
                for c in 0..dprev {
                    let a = a_prev[(i, c)];
                    if a != 0.0 {
                        for r in 0..dl {
                            jac[(i, start + c * dl + r)] = delta[(i, r)] * a;
                        }
                    }
                }
            }
            if l > 0 {
                let mut d_act = &delta * w; // n x dprev
                let pre_prev = &pres[l - 1];
                let scale_prev = (C_SIGMA / weights[l - 1].nrows() as f64).sqrt();
                for i in 0..n {
                    for c in 0..dprev {
                        d_act[(i, c)] *= if pre_prev[(i, c)] > 0.0 { scale_prev } else { 0.0 };
                    }
                }
                delta = d_act;
            }
            offset_end = start;
        }
        Ok(jac)
    }

    /// Regularized training loss at the given weights.
    fn loss(
        &self,
        weights: &[DMatrix<f64>],
        init: &[DMatrix<f64>],
        data: &Dataset,
        ridge: f64,
    ) -> f64 {
        let params = flatten(&self.config, weights);
        let out = self
            .forward_batch_at(data.inputs(), &params)
            .expect("dims checked by train_gd");
        let n = data.n() as f64;
        let mse = (out - data.responses()).norm_squared() / n;
        let reg: f64 = weights
            .iter()
            .zip(init)
            .map(|(w, w0)| (w - w0).norm_squared())
            .sum();
        mse + ridge * reg
    }

    /// Full-batch gradient descent on
    /// (1/n) sum (f(x_i) - y_i)^2 + ridge * ||theta - theta_b||^2.
    pub fn train_gd(&self, data: &Dataset, cfg: &TrainConfig) -> Result<WideNet> {
        Ok(self.train_gd_traced(data, cfg)?.0)
    }

    pub fn train_gd_traced(&self, data: &Dataset, cfg: &TrainConfig) -> Result<(WideNet, Vec<f64>)> {
        self.check_dim(data.dim())?;
        if !(cfg.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning_rate must be > 0".into()));
        }
        if cfg.ridge < 0.0 {
            return Err(Error::InvalidArgument("ridge must be >= 0".into()));
        }
        let init = unflatten(&self.config, &self.init_params);
        let mut weights = unflatten(&self.config, &self.params);
        let n = data.n();
        let xs = data.inputs();
        let y = data.responses();
        let mut trace = Vec::new();

        for epoch in 0..cfg.epochs {
            // Forward with cached activations.
            let mut acts: Vec<DMatrix<f64>> = vec![xs.clone()];
            let mut pres: Vec<DMatrix<f64>> = Vec::with_capacity(weights.len());
            for (l, w) in weights.iter().enumerate() {
                let pre = acts.last().unwrap() * w.transpose();
                pres.push(pre.clone());
                if l < weights.len() - 1 {
                    let scale = (C_SIGMA / w.nrows() as f64).sqrt();
                    acts.push(pre.map(|v| scale * v.max(0.0)));
                }
            }
            let out = pres.last().unwrap().column(0);
            let residual = DVector::from_iterator(n, out.iter().zip(y.iter()).map(|(o, t)| o - t));

            let loss_now = residual.norm_squared() / n as f64
                + cfg.ridge
                    * weights
                        .iter()
                        .zip(&init)
                        .map(|(w, w0)| (w - w0).norm_squared())
                        .sum::<f64>();
            // The overflow guard matters: a wildly unstable step can kill
            // every ReLU and leave the loss finite but the run unusable.
            if !loss_now.is_finite() || loss_now > 1e60 {
                return Err(Error::Diverged { epoch, trace });
            }
            if cfg.record_loss {
                trace.push(loss_now);
            }

            // Backward.
            let mut delta = DMatrix::from_fn(n, 1, |i, _| 2.0 / n as f64 * residual[i]);
            for l in (0..weights.len()).rev() {
                let grad_w = delta.transpose() * &acts[l] + (&weights[l] - &init[l]) * (2.0 * cfg.ridge);
                if l > 0 {
                    let mut d_act = &delta * &weights[l];
                    let pre_prev = &pres[l - 1];
                    let scale_prev = (C_SIGMA / weights[l - 1].nrows() as f64).sqrt();
                    d_act.zip_apply(pre_prev, |v, pre| {
                        *v *= if pre > 0.0 { scale_prev } else { 0.0 };
                    });
                    delta = d_act;
                }
                weights[l] -= grad_w * cfg.learning_rate;
            }
        }

        let final_loss = self.loss(&weights, &init, data, cfg.ridge);
        if !final_loss.is_finite() {
            return Err(Error::Diverged {
                epoch: cfg.epochs,
                trace,
            });
        }

        Ok((
            WideNet {
                config: self.config,
                params: flatten(&self.config, &weights),
                init_params: self.init_params.clone(),
            },
            trace,
        ))
    }

    /// Mean squared error of the current parameters on a dataset.
    pub fn mse(&self, data: &Dataset) -> Result<f64> {
        let out = self.forward_batch(data.inputs())?;
        Ok((out - data.responses()).norm_squared() / data.n() as f64)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&Checkpoint {
            config: self.config,
            params: self.params.as_slice().to_vec(),
            init_params: self.init_params.as_slice().to_vec(),
        })
        .expect("checkpoint serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<WideNet> {
        let ck: Checkpoint =
            serde_json::from_str(s).map_err(|e| Error::Config(format!("bad checkpoint: {e}")))?;
        let p = ck.config.param_count();
        if ck.params.len() != p || ck.init_params.len() != p {
            return Err(Error::Config(format!(
                "checkpoint parameter length {} does not match config ({})",
                ck.params.len(),
                p
            )));
        }
        Ok(WideNet {
            config: ck.config,
            params: DVector::from_vec(ck.params),
            init_params: DVector::from_vec(ck.init_params),
        })
    }
}

//! The procedural-noise-correcting predictor: one base network plus one
//! auxiliary network trained on mean-init labels from the same
//! initialization, whose difference removes the initialization noise. The
//! deep-ensemble baseline lives here too.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::krr::Shift;
use crate::network::{init_he, NetConfig, TrainConfig, WideNet};
use crate::rng::RngStream;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

// Substream tags for the roles inside one fit, so parallel schedules cannot
// change which draws a role sees.
const TAG_INIT: u64 = 0;
const TAG_MEAN_INIT: u64 = 1;
const TAG_MEMBER_BASE: u64 = 0x100;

/// How the mean initialization function s_bar is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanInitSpec {
    /// s_bar = 0 (exact for He init in the wide limit).
    Zero,
    /// Monte Carlo average of `count` fresh initializations.
    MonteCarlo { count: usize },
}

impl Default for MeanInitSpec {
    fn default() -> Self {
        MeanInitSpec::Zero
    }
}

impl MeanInitSpec {
    pub(crate) fn to_shift(self, config: &NetConfig, stream: &RngStream) -> Result<Shift> {
        match self {
            MeanInitSpec::Zero => Ok(Shift::Zero),
            MeanInitSpec::MonteCarlo { count } => {
                if count == 0 {
                    return Err(Error::InvalidArgument("mc_count must be >= 1".into()));
                }
                Ok(Shift::MonteCarlo {
                    config: *config,
                    count,
                    stream: *stream,
                })
            }
        }
    }
}

/// Evaluate s_bar at a point. Zero mode returns 0; MonteCarlo averages
/// `count` freshly initialized forward passes, deterministic given `stream`.
pub fn mean_init_evaluate(
    spec: &MeanInitSpec,
    config: &NetConfig,
    x: &[f64],
    stream: &RngStream,
) -> Result<f64> {
    spec.to_shift(config, stream)?.eval(x)
}

/// Base network and auxiliary artificial-label network sharing one
/// initialization snapshot.
pub struct PncPredictor {
    base: WideNet,
    auxiliary: WideNet,
    mean_init: Shift,
}

/// Train the PNC pair: draw one theta_b, train the base on (X, y) and the
/// auxiliary on (X, s_bar(X)) from the identical initialization, with
/// identical training config.
pub fn fit_pnc(
    data: &Dataset,
    net_cfg: &NetConfig,
    train_cfg: &TrainConfig,
    mean_init: &MeanInitSpec,
    stream: &RngStream,
) -> Result<PncPredictor> {
    let cfg = net_cfg.resolved_for(data.n());
    let net = init_he(&cfg, &stream.substream(TAG_INIT))?;
    let shift = mean_init.to_shift(&cfg, &stream.substream(TAG_MEAN_INIT))?;

    let tag_role = |role: &'static str| {
        move |e: Error| match e {
            Error::Diverged { epoch, trace } => Error::DivergedIn {
                role: role.into(),
                epoch,
                trace,
            },
            other => other,
        }
    };

    let base = net.train_gd(data, train_cfg).map_err(tag_role("base"))?;
    let aux_labels = shift.eval_batch(data.inputs())?;
    let aux_data = data.with_responses(aux_labels)?;
    let auxiliary = net
        .train_gd(&aux_data, train_cfg)
        .map_err(tag_role("auxiliary"))?;

    Ok(PncPredictor {
        base,
        auxiliary,
        mean_init: shift,
    })
}

impl PncPredictor {
    /// base(x) - (auxiliary(x) - s_bar(x)).
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        Ok(self.base.forward(x)? - (self.auxiliary.forward(x)? - self.mean_init.eval(x)?))
    }

    pub fn base(&self) -> &WideNet {
        &self.base
    }

    pub fn auxiliary(&self) -> &WideNet {
        &self.auxiliary
    }

    pub fn mean_init(&self) -> &Shift {
        &self.mean_init
    }
}

/// Average of m independently initialized trained base networks.
pub struct DeepEnsemble {
    members: Vec<WideNet>,
}

pub fn deep_ensemble(
    data: &Dataset,
    net_cfg: &NetConfig,
    train_cfg: &TrainConfig,
    m: usize,
    stream: &RngStream,
) -> Result<DeepEnsemble> {
    if m == 0 {
        return Err(Error::InvalidArgument("ensemble size must be >= 1".into()));
    }
    let cfg = net_cfg.resolved_for(data.n());
    let members: Result<Vec<WideNet>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let member_stream = stream.substream(TAG_MEMBER_BASE + i as u64);
            let net = init_he(&cfg, &member_stream)?;
            net.train_gd(data, train_cfg).map_err(|e| match e {
                Error::Diverged { epoch, trace } => Error::DivergedIn {
                    role: format!("ensemble member {i}"),
                    epoch,
                    trace,
                },
                other => other,
            })
        })
        .collect();
    Ok(DeepEnsemble { members: members? })
}

impl DeepEnsemble {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let mut acc = 0.0;
        for net in &self.members {
            acc += net.forward(x)?;
        }
        Ok(acc / self.members.len() as f64)
    }

    pub fn members(&self) -> &[WideNet] {
        &self.members
    }
}

/// Arc-wrapped view of a predictor's init network, for use as a KRR shift.
pub fn init_shift(p: &PncPredictor) -> Shift {
    Shift::InitNet(Arc::new(p.base.clone()))
}

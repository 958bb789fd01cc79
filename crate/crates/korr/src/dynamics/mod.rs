//! Latent dynamics: the Koopman lift with a linear operator, the nonlinear
//! next-state baseline, closed-form operator fitting and open-loop rollouts.

mod edmd;
mod koopman;
mod nonlinear;
mod rollout;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use edmd::{edmd_fit, EDMD_RIDGE};
pub use koopman::{stack_transitions, ImagineCache, KoopmanModel, LatentState, Lift, Transition};
pub use nonlinear::{NonlinearCache, NonlinearDynModel};
pub use rollout::{aggregate_curves, koopman_rollout, nonlinear_rollout, CurvePoint, OpenLoopRollout};

use crate::error::{KorrError, Result};
use crate::numeric::checkpoint::{Block, Checkpoint};
use crate::numeric::{Matrix, Parameters};

/// Mean latent norm below which the lift is reported as collapsed.
pub const COLLAPSE_NORM: f64 = 1e-3;

/// Mean Euclidean row norm.
pub fn mean_row_norm(z: &Matrix) -> f64 {
    if z.rows() == 0 {
        return 0.0;
    }
    (0..z.rows())
        .map(|r| z.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / z.rows() as f64
}

/// Logs a warning and returns true when the latent states have collapsed
/// towards the trivial zero lift.
pub fn flag_collapse(mean_norm: f64) -> bool {
    let collapsed = mean_norm < COLLAPSE_NORM;
    if collapsed {
        warn!("latent representation collapsed: mean |z| = {mean_norm:e}");
    }
    collapsed
}

/// Architecture of the dynamics model a residual mode needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsConfig {
    pub lift_dim: usize,
    pub lift_hidden: Vec<usize>,
    pub nonlinear_depth: usize,
    pub nonlinear_width: usize,
    /// Fit `A` and `B` in closed form on one collection phase before
    /// training starts.
    pub edmd_warm_start: bool,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            lift_dim: 64,
            lift_hidden: vec![256, 256],
            nonlinear_depth: 2,
            nonlinear_width: 256,
            edmd_warm_start: false,
        }
    }
}

impl DynamicsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lift_dim == 0 || self.nonlinear_width == 0 || self.lift_hidden.iter().any(|&w| w == 0) {
            return Err(KorrError::Config("dynamics widths must be positive".into()));
        }
        if !matches!(self.nonlinear_depth, 2 | 4) {
            return Err(KorrError::Config(format!(
                "dynamics.nonlinear_depth must be 2 or 4, got {}",
                self.nonlinear_depth
            )));
        }
        Ok(())
    }

    /// The model a residual mode conditions on, if any.
    pub fn build<R: Rng + ?Sized>(
        &self,
        mode: crate::residual::ResidualMode,
        state_dim: usize,
        action_dim: usize,
        rng: &mut R,
    ) -> Option<DynamicsModel> {
        use crate::residual::ResidualMode;
        match mode {
            ResidualMode::Korr => Some(DynamicsModel::Koopman(KoopmanModel::new(
                state_dim,
                action_dim,
                self.lift_dim,
                &self.lift_hidden,
                rng,
            ))),
            ResidualMode::ResipNonlinDyn => Some(DynamicsModel::Nonlinear(NonlinearDynModel::new(
                state_dim,
                action_dim,
                self.nonlinear_depth,
                self.nonlinear_width,
                rng,
            ))),
            ResidualMode::Resip => None,
        }
    }
}

/// Either dynamics model behind one imagination interface.
#[derive(Debug, Clone, PartialEq)]
pub enum DynamicsModel {
    Koopman(KoopmanModel),
    Nonlinear(NonlinearDynModel),
}

#[derive(Debug, Clone)]
pub enum DynamicsCache {
    Koopman(ImagineCache),
    Nonlinear(NonlinearCache),
}

impl DynamicsModel {
    /// Width of the imagined next state.
    pub fn output_dim(&self) -> usize {
        match self {
            DynamicsModel::Koopman(m) => m.lift_dim(),
            DynamicsModel::Nonlinear(m) => m.state_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DynamicsModel::Koopman(m) => m.validate(),
            DynamicsModel::Nonlinear(m) => m.validate(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            DynamicsModel::Koopman(m) => DynamicsModel::Koopman(m.zeros_like()),
            DynamicsModel::Nonlinear(m) => DynamicsModel::Nonlinear(m.zeros_like()),
        }
    }

    /// Next latent state `A g(x) + B a` or next state `net(x, a)`, row-wise.
    pub fn imagine_batch(&self, x: &Matrix, u: &Matrix) -> Result<(Matrix, DynamicsCache)> {
        match self {
            DynamicsModel::Koopman(m) => {
                let (out, c) = m.imagine_batch(x, u)?;
                Ok((out, DynamicsCache::Koopman(c)))
            }
            DynamicsModel::Nonlinear(m) => {
                let (out, c) = m.imagine_batch(x, u)?;
                Ok((out, DynamicsCache::Nonlinear(c)))
            }
        }
    }

    pub fn imagine_backward(&self, cache: &DynamicsCache, d_out: &Matrix) -> Result<DynamicsModel> {
        match (self, cache) {
            (DynamicsModel::Koopman(m), DynamicsCache::Koopman(c)) => {
                Ok(DynamicsModel::Koopman(m.imagine_backward(c, d_out)?))
            }
            (DynamicsModel::Nonlinear(m), DynamicsCache::Nonlinear(c)) => {
                Ok(DynamicsModel::Nonlinear(m.imagine_backward(c, d_out)?))
            }
            _ => Err(KorrError::Contract("dynamics cache belongs to the other model kind".into())),
        }
    }

    /// Prediction loss: Koopman latent residual or next-state regression.
    pub fn loss_batch(&self, x: &Matrix, u: &Matrix, x_next: &Matrix) -> Result<(f64, DynamicsModel)> {
        match self {
            DynamicsModel::Koopman(m) => {
                let (l, g) = m.loss_batch(x, u, x_next)?;
                Ok((l, DynamicsModel::Koopman(g)))
            }
            DynamicsModel::Nonlinear(m) => {
                let (l, g) = m.loss_batch(x, u, x_next)?;
                Ok((l, DynamicsModel::Nonlinear(g)))
            }
        }
    }

    /// Metadata needed to rebuild the model from checkpoint blocks.
    pub fn describe(&self) -> Value {
        match self {
            DynamicsModel::Koopman(m) => match &m.lift {
                Lift::Network(_) => json!({ "kind": "koopman", "identity_lift": Value::Null }),
                Lift::Identity { dim } => json!({ "kind": "koopman", "identity_lift": dim }),
            },
            DynamicsModel::Nonlinear(_) => json!({ "kind": "nonlinear" }),
        }
    }

    pub fn write_blocks(&self, ck: &mut Checkpoint, prefix: &str) {
        match self {
            DynamicsModel::Koopman(m) => {
                if let Lift::Network(p) = &m.lift {
                    ck.push(&format!("{prefix}.lift"), Block::Mlp(p.clone()));
                }
                ck.push(&format!("{prefix}.A"), Block::Matrix(m.transition.clone()));
                ck.push(&format!("{prefix}.B"), Block::Matrix(m.input.clone()));
            }
            DynamicsModel::Nonlinear(m) => ck.push(&format!("{prefix}.net"), Block::Mlp(m.net.clone())),
        }
    }

    pub fn read_blocks(ck: &Checkpoint, prefix: &str, description: &Value) -> Result<Self> {
        let model = match description.get("kind").and_then(Value::as_str) {
            Some("koopman") => {
                let lift = match description.get("identity_lift").and_then(Value::as_u64) {
                    Some(dim) => Lift::Identity { dim: dim as usize },
                    None => Lift::Network(ck.mlp(&format!("{prefix}.lift"))?),
                };
                DynamicsModel::Koopman(KoopmanModel {
                    lift,
                    transition: ck.matrix(&format!("{prefix}.A"))?,
                    input: ck.matrix(&format!("{prefix}.B"))?,
                })
            }
            Some("nonlinear") => DynamicsModel::Nonlinear(NonlinearDynModel {
                net: ck.mlp(&format!("{prefix}.net"))?,
            }),
            other => {
                return Err(KorrError::Format(format!("unknown dynamics kind {other:?}")));
            }
        };
        model.validate()?;
        Ok(model)
    }
}

impl Parameters for DynamicsModel {
    fn slices(&self) -> Vec<&[f64]> {
        match self {
            DynamicsModel::Koopman(m) => m.slices(),
            DynamicsModel::Nonlinear(m) => m.slices(),
        }
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            DynamicsModel::Koopman(m) => m.slices_mut(),
            DynamicsModel::Nonlinear(m) => m.slices_mut(),
        }
    }
}

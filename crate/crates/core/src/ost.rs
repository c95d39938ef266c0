//! Online supervised training: heatmap pseudo-labels rendered from the
//! a-posteriori filter state, one optimizer step per scheduled epoch.

use crate::dynamics::ChiefOrbit;
use crate::filter::{predicted_keypoints_full, RelativeState};
use crate::geometry::{CameraModel, GeometryError, KeypointModel, Roi, ROI_OUT_SIZE};
use crate::heatmap::{mse_loss, render_blob, HeatmapStack, BLOB_SIGMA, HEATMAP_SIZE};
use crate::predictor::{backward, optimizer_step, PredictorOutput, PredictorParams};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OstError {
    /// State projects behind the camera; no pseudo-labels this epoch.
    #[error(transparent)]
    BehindCamera(#[from] GeometryError),
    /// Exploding loss; the step is skipped and the run continues.
    #[error("non-finite gradient (norm {norm})")]
    NonFiniteGradient { norm: f64 },
}

/// Which epochs qualify for a training event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    /// Every `period` epochs after warmup.
    #[default]
    Periodic,
    /// Whenever the viewing direction has changed enough since the last
    /// event (after warmup).
    ViewChange,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OstConfig {
    pub enabled: bool,
    /// Epochs between training events.
    pub period: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Epochs to wait for filter convergence before the first event.
    pub warmup_epochs: usize,
    #[serde(default)]
    pub scheduler: SchedulerKind,
    /// Minimum viewing-direction change for the view-change scheduler, deg.
    #[serde(default = "default_view_change_deg")]
    pub view_change_min_deg: f64,
}

fn default_view_change_deg() -> f64 {
    2.0
}

impl Default for OstConfig {
    fn default() -> Self {
        OstConfig {
            enabled: true,
            period: 10,
            lr: 1e-3,
            weight_decay: 0.1,
            warmup_epochs: 360,
            scheduler: SchedulerKind::Periodic,
            view_change_min_deg: default_view_change_deg(),
        }
    }
}

impl OstConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.period == 0 {
            return Err("ost period must be >= 1".into());
        }
        if self.lr <= 0.0 {
            return Err(format!("ost learning rate {} must be positive", self.lr));
        }
        Ok(())
    }
}

/// Telemetry of one training event.
#[derive(Debug, Clone, Copy)]
pub struct OstEvent {
    pub epoch: usize,
    pub loss_before: f64,
    pub grad_norm: f64,
    pub rejected_count: usize,
}

/// Periodic schedule: true iff enabled, past warmup, and on the period.
pub fn should_train(epoch: usize, cfg: &OstConfig) -> bool {
    cfg.enabled && epoch >= cfg.warmup_epochs && (epoch - cfg.warmup_epochs) % cfg.period == 0
}

/// Stateful scheduler covering both kinds; the view-change variant commits
/// the view direction whenever it fires.
#[derive(Debug, Clone)]
pub struct OstScheduler {
    cfg: OstConfig,
    last_view: Option<Vector3<f64>>,
}

impl OstScheduler {
    pub fn new(cfg: OstConfig) -> Self {
        OstScheduler {
            cfg,
            last_view: None,
        }
    }

    pub fn decide(&mut self, epoch: usize, view_dir: &Vector3<f64>) -> bool {
        match self.cfg.scheduler {
            SchedulerKind::Periodic => should_train(epoch, &self.cfg),
            SchedulerKind::ViewChange => {
                if !self.cfg.enabled || epoch < self.cfg.warmup_epochs {
                    return false;
                }
                let fire = match &self.last_view {
                    None => true,
                    Some(prev) => {
                        let cosang = prev.dot(view_dir).clamp(-1.0, 1.0);
                        cosang.acos().to_degrees() >= self.cfg.view_change_min_deg
                    }
                };
                if fire {
                    self.last_view = Some(*view_dir);
                }
                fire
            }
        }
    }
}

/// Render pseudo-label blobs for all K keypoints from the a-posteriori
/// state estimate, including keypoints whose raw predictions were gated
/// out. Fails only if the estimated target is behind the camera.
pub fn make_pseudo_labels(
    state_post: &RelativeState,
    chief: &ChiefOrbit,
    cam: &CameraModel,
    model: &KeypointModel,
    roi: &Roi,
) -> Result<HeatmapStack, OstError> {
    let px = predicted_keypoints_full(state_post, chief, cam, model)?;
    let ratio = (HEATMAP_SIZE as f64 - 1.0) / (ROI_OUT_SIZE as f64 - 1.0);
    let maps = px
        .iter()
        .map(|p| {
            let c = roi.full_to_crop(p);
            render_blob(&[c[0] * ratio, c[1] * ratio], BLOB_SIGMA, HEATMAP_SIZE)
        })
        .collect();
    Ok(HeatmapStack { maps })
}

/// One training event: exactly one backward pass and one optimizer step on
/// the current image, no inner loop. A non-finite gradient skips the step.
pub fn ost_step(
    params: &mut PredictorParams,
    out: &PredictorOutput,
    pl: &HeatmapStack,
    cfg: &OstConfig,
    epoch: usize,
    rejected_count: usize,
) -> Result<OstEvent, OstError> {
    let loss_before = mse_loss(&out.stack, pl);
    let grad = backward(params, out, pl);
    let grad_norm = grad.norm();
    if !grad_norm.is_finite() {
        return Err(OstError::NonFiniteGradient { norm: grad_norm });
    }
    optimizer_step(params, &grad, cfg.lr, cfg.weight_decay);
    Ok(OstEvent {
        epoch,
        loss_before,
        grad_norm,
        rejected_count,
    })
}

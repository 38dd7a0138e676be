//! Backbone pretraining and the two policy training stages.
//!
//! The backbone is trained once with cross-entropy on next-cell prediction
//! and then frozen. Stage I regresses the selector onto the backbone's
//! attention saliency. Stage II rolls out episodes with hard masks in the
//! forward pass and trains selector and predictor jointly through the
//! Gumbel-Softmax and steep-sigmoid relaxations.

mod data;
mod metrics;
mod pipeline;
mod pretrain;
mod stage1;
mod stage2;

pub use data::{episode_set, Grads};
pub use metrics::{mean_ratio_by_class, roc_auc, saliency_auc, write_metrics, MetricRow};
pub use pipeline::{
    load_backbone, load_policy, save_backbone, save_policy, train, Stages, TrainSummary, BACKBONE_KIND, POLICY_KIND,
};
pub use pretrain::{backbone_accuracy, dataset_loss, pretrain_backbone, PretrainReport};
pub use stage1::{alignment_mse, alignment_samples, stage1_align, AlignSample, Stage1Report};
pub use stage2::{stage2_episode, stage2_step, stage2_train, EpisodeOutcome, Stage2Options, Stage2Report};

use serde::Serialize;

/// Losses of one Stage-II step (or their means over a batch).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBundle {
    /// Task cross-entropy `L_VLA`.
    pub task: f64,
    /// Stage-I `L_align` (zero in Stage II).
    pub align: f64,
    /// `L_ratio = −Σ p̃ʲ rⱼ`.
    pub ratio: f64,
    pub lambda: f64,
    /// `L_VLA + λ·L_ratio`.
    pub total: f64,
}

impl LossBundle {
    pub fn stage2(task: f64, ratio: f64, lambda: f64) -> Self {
        LossBundle {
            task,
            align: 0.0,
            ratio,
            lambda,
            total: task + lambda * ratio,
        }
    }

    fn accumulate(&mut self, other: &LossBundle) {
        self.task += other.task;
        self.align += other.align;
        self.ratio += other.ratio;
        self.total += other.total;
        self.lambda = other.lambda;
    }

    fn scaled(mut self, s: f64) -> Self {
        self.task *= s;
        self.align *= s;
        self.ratio *= s;
        self.total *= s;
        self
    }
}

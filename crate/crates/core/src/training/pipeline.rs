use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{mean_ratio_by_class, saliency_auc, write_metrics, MetricRow};
use super::pretrain::{backbone_accuracy, pretrain_backbone};
use super::stage1::stage1_align;
use super::stage2::stage2_train;
use super::episode_set;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::policy::{PolicyConfig, PolicyNet};
use crate::rng;
use crate::transformer::{load_checkpoint, save_checkpoint, Checkpoint, ModelConfig, Transformer};

pub const BACKBONE_KIND: &str = "backbone";
pub const POLICY_KIND: &str = "policy";

pub fn save_backbone(path: &Path, model: &Transformer) -> Result<()> {
    save_checkpoint(
        path,
        &Checkpoint {
            kind: BACKBONE_KIND.into(),
            config: serde_json::to_value(model.config())?,
            params: model.params().clone(),
        },
    )
}

pub fn load_backbone(path: &Path) -> Result<Transformer> {
    let ck = load_checkpoint(path, BACKBONE_KIND)?;
    let cfg: ModelConfig = serde_json::from_value(ck.config)?;
    Transformer::from_params(cfg, ck.params)
}

#[derive(Serialize, Deserialize)]
struct PolicyHeader {
    policy: PolicyConfig,
    geometry: (usize, usize, usize),
}

pub fn save_policy(path: &Path, policy: &PolicyNet) -> Result<()> {
    let header = PolicyHeader {
        policy: policy.config.clone(),
        geometry: policy.geometry,
    };
    save_checkpoint(
        path,
        &Checkpoint {
            kind: POLICY_KIND.into(),
            config: serde_json::to_value(header)?,
            params: policy.params.clone(),
        },
    )
}

pub fn load_policy(path: &Path) -> Result<PolicyNet> {
    let ck = load_checkpoint(path, POLICY_KIND)?;
    let h: PolicyHeader = serde_json::from_value(ck.config)?;
    PolicyNet::from_params(h.policy, h.geometry, ck.params)
}

fn prerequisite<T>(r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::MissingFile(p) => Error::Config(format!("missing prerequisite checkpoint {}", p.display())),
        e => e,
    })
}

/// Which parts of the pipeline to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stages {
    pub pretrain: bool,
    pub stage1: bool,
    pub stage2: bool,
}

impl Stages {
    pub const ALL: Stages = Stages {
        pretrain: true,
        stage1: true,
        stage2: true,
    };

    /// `all`, `pretrain`, `stage1`, `stage2` or `policy` (both stages).
    pub fn parse(s: &str) -> Result<Self> {
        let none = Stages {
            pretrain: false,
            stage1: false,
            stage2: false,
        };
        Ok(match s {
            "all" => Stages::ALL,
            "pretrain" => Stages { pretrain: true, ..none },
            "stage1" => Stages { stage1: true, ..none },
            "stage2" => Stages { stage2: true, ..none },
            "policy" => Stages {
                stage1: true,
                stage2: true,
                ..none
            },
            other => return Err(Error::config(format!("unknown stage `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainSummary {
    pub warnings: Vec<String>,
    pub metrics: Vec<MetricRow>,
}

/// Runs the requested stages, writing checkpoints and `metrics.csv` under
/// `cfg.out_dir`. Stage II without a Stage-I checkpoint trains a freshly
/// initialised selector (the "without Stage I" ablation) and says so in
/// the returned warnings.
pub fn train(cfg: &RunConfig, stages: Stages, on_row: &mut dyn FnMut(&MetricRow)) -> Result<TrainSummary> {
    cfg.validate()?;
    let exec = cfg.execution();
    let mut summary = TrainSummary::default();
    let mut log = |summary: &mut TrainSummary, row: MetricRow| -> Result<()> {
        on_row(&row);
        summary.metrics.push(row);
        write_metrics(&cfg.metrics_path(), &summary.metrics)
    };
    let train_set = episode_set(&cfg.scene, cfg.seed, rng::salt::TRAIN_DATA, cfg.data.train_episodes, exec)?;
    let val_set = episode_set(&cfg.scene, cfg.seed, rng::salt::VALIDATION, cfg.data.validation_episodes, exec)?;
    let geometry = (cfg.model.height, cfg.model.width, cfg.model.patch);

    if stages.pretrain {
        let mut model = Transformer::init(cfg.model.clone(), cfg.seed)?;
        let report = pretrain_backbone(&mut model, &train_set, &cfg.pretrain, cfg.seed, exec)?;
        let acc = backbone_accuracy(&model, &val_set, exec)?;
        for (epoch, loss) in report.epoch_losses.iter().enumerate() {
            let last = epoch + 1 == report.epoch_losses.len();
            let row = MetricRow {
                stage: "pretrain".into(),
                epoch,
                loss_task: Some(*loss),
                loss_total: Some(*loss),
                accuracy: last.then_some(acc),
                ..MetricRow::default()
            };
            log(&mut summary, row)?;
        }
        save_backbone(&cfg.backbone_path(), &model)?;
    }

    if stages.stage1 || stages.stage2 {
        let model = prerequisite(load_backbone(&cfg.backbone_path()))?;
        if model.config() != &cfg.model {
            return Err(Error::config("backbone checkpoint was trained with a different model config"));
        }
        let digest = model.params().digest();
        let mut policy = if stages.stage1 {
            let mut policy = PolicyNet::init(cfg.policy.clone(), geometry, cfg.seed)?;
            let episodes = &train_set[..cfg.stage1.episodes.min(train_set.len())];
            let report = stage1_align(&mut policy, &model, episodes, &cfg.stage1, cfg.seed, exec)?;
            let auc = saliency_auc(&policy, &val_set, exec)?;
            log(
                &mut summary,
                MetricRow {
                    stage: "stage1".into(),
                    epoch: 0,
                    loss_align: Some(report.initial_mse),
                    ..MetricRow::default()
                },
            )?;
            for (epoch, mse) in report.epoch_mse.iter().enumerate() {
                let last = epoch + 1 == report.epoch_mse.len();
                let row = MetricRow {
                    stage: "stage1".into(),
                    epoch: epoch + 1,
                    loss_align: Some(*mse),
                    saliency_auc: if last { auc } else { None },
                    ..MetricRow::default()
                };
                log(&mut summary, row)?;
            }
            save_policy(&cfg.stage1_path(), &policy)?;
            policy
        } else {
            match load_policy(&cfg.stage1_path()) {
                Ok(mut p) => {
                    p.adopt_settings(&cfg.policy)?;
                    p
                }
                Err(Error::MissingFile(path)) => {
                    summary.warnings.push(format!(
                        "no Stage-I checkpoint at {}; running Stage II from a fresh selector (without-Stage-I ablation)",
                        path.display()
                    ));
                    PolicyNet::init(cfg.policy.clone(), geometry, cfg.seed)?
                }
                Err(e) => return Err(e),
            }
        };

        if stages.stage2 {
            let episodes = &train_set[..cfg.stage2.episodes.min(train_set.len())];
            let mut rows = Vec::new();
            stage2_train(&mut policy, &model, episodes, &cfg.stage2, cfg.seed, exec, |epoch, loss, pol| {
                let auc = saliency_auc(pol, &val_set, exec)?;
                let [s, sl, f] = mean_ratio_by_class(pol, &val_set, exec)?;
                let row = MetricRow {
                    stage: "stage2".into(),
                    epoch,
                    loss_task: Some(loss.task),
                    loss_ratio: Some(loss.ratio),
                    loss_total: Some(loss.total),
                    saliency_auc: auc,
                    ratio_static: s,
                    ratio_slow: sl,
                    ratio_fast: f,
                    ..MetricRow::default()
                };
                on_row(&row);
                rows.push(row);
                Ok(())
            })?;
            summary.metrics.extend(rows);
            write_metrics(&cfg.metrics_path(), &summary.metrics)?;
            save_policy(&cfg.policy_path(), &policy)?;
        }
        if model.params().digest() != digest {
            return Err(Error::Integrity("backbone weights changed during policy training".into()));
        }
    }
    Ok(summary)
}

use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::numerics::kernels::argmax;
use crate::par::Execution;
use crate::policy::{motion_input, PolicyNet};
use crate::scenegen::{Episode, SceneClass};

/// Area under the ROC curve of `scores` against binary `labels`
/// (Mann-Whitney, ties counted one half). `None` without both classes.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    // average ranks over tied groups
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

/// Pooled AUC of selector scores against ground-truth token motion over
/// steps `1..T` of every episode.
pub fn saliency_auc(policy: &PolicyNet, episodes: &[Episode], exec: Execution) -> Result<Option<f64>> {
    let patch = policy.geometry.2;
    let per = exec.try_map(episodes, |_, ep| -> Result<(Vec<f64>, Vec<bool>)> {
        let mut s = Vec::new();
        let mut l = Vec::new();
        for t in 1..ep.len() {
            let (v, _) = motion_input(Some(&ep.frames[t - 1]), &ep.frames[t], &policy.config, ep.flow_scale())?;
            s.extend(policy.scores(&v)?.iter().map(|&x| x as f64));
            l.extend(ep.token_motion(t, patch));
        }
        Ok((s, l))
    })?;
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for (s, l) in per {
        scores.extend(s);
        labels.extend(l);
    }
    Ok(roc_auc(&scores, &labels))
}

/// Mean argmax ratio of the predictor over steps `1..T`, per scene class
/// (in [`SceneClass::ALL`] order; `None` for absent classes).
pub fn mean_ratio_by_class(policy: &PolicyNet, episodes: &[Episode], exec: Execution) -> Result<[Option<f64>; 3]> {
    let per = exec.try_map(episodes, |_, ep| -> Result<(SceneClass, f64, usize)> {
        let mut sum = 0.0;
        for t in 1..ep.len() {
            let (v, _) = motion_input(Some(&ep.frames[t - 1]), &ep.frames[t], &policy.config, ep.flow_scale())?;
            sum += policy.config.ratios[argmax(&policy.ratio_logits(&v)?)];
        }
        Ok((ep.class, sum, ep.len().saturating_sub(1)))
    })?;
    let mut out = [None; 3];
    for (k, class) in SceneClass::ALL.iter().enumerate() {
        let (s, n) = per
            .iter()
            .filter(|(c, _, _)| c == class)
            .fold((0.0, 0), |(s, n), (_, x, m)| (s + x, n + m));
        if n > 0 {
            out[k] = Some(s / n as f64);
        }
    }
    Ok(out)
}

/// One row of the training metric log.
///
/// Header: `stage,epoch,loss_task,loss_align,loss_ratio,loss_total,accuracy,
/// saliency_auc,ratio_static,ratio_slow,ratio_fast`. Columns that do not
/// apply to a stage are empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricRow {
    pub stage: String,
    pub epoch: usize,
    pub loss_task: Option<f64>,
    pub loss_align: Option<f64>,
    pub loss_ratio: Option<f64>,
    pub loss_total: Option<f64>,
    pub accuracy: Option<f64>,
    pub saliency_auc: Option<f64>,
    pub ratio_static: Option<f64>,
    pub ratio_slow: Option<f64>,
    pub ratio_fast: Option<f64>,
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

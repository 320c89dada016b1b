//! Recall-sweep tracking metrics: AMOTA, AMOTP and identity switches.
//!
//! Predictions are matched to ground truth per frame by greedy BEV center
//! distance within a class. For each recall level `r` the score cut is the
//! highest one that still yields `ceil(r * P)` true positives in the
//! all-predictions matching; the matching is then redone with only the
//! predictions above the cut. Distances are in meters (no x100 scaling).

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Frame, TrackFrame};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RecallAveraging {
    /// Average over the recall levels the tracker reaches.
    #[default]
    Achievable,
    /// Average over all levels; unreached ones count as MOTAR 0 and a matched
    /// distance equal to the gate.
    AllLevels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Center-distance gate, meters.
    pub dist_gate: f64,
    pub recall_levels: usize,
    pub averaging: RecallAveraging,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            dist_gate: 2.0,
            recall_levels: 10,
            averaging: RecallAveraging::Achievable,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dist_gate > 0.0 && self.dist_gate.is_finite()) {
            return Err(Error::config("eval.dist_gate", "must be positive"));
        }
        if self.recall_levels == 0 {
            return Err(Error::config("eval.recall_levels", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdSwitch {
    pub frame: usize,
    pub instance_id: u64,
    pub from: u64,
    pub to: u64,
}

/// Outcome of matching one class over a sequence.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchSummary {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub ids: usize,
    pub distance_sum: f64,
    /// `(frame, gt index, prediction index, distance)` per match.
    pub matches: Vec<(usize, usize, usize, f64)>,
    pub id_switches: Vec<IdSwitch>,
    pub tp_scores: Vec<f64>,
}

/// Greedy per-frame matching of predictions (score at least `min_score`)
/// against ground truth of one class, counting identity switches against
/// the last id each instance was matched to.
pub fn match_for_eval(
    pred: &[TrackFrame],
    gt: &[Frame],
    class_id: u32,
    dist_gate: f64,
    min_score: f64,
) -> MatchSummary {
    let by_index: HashMap<usize, &TrackFrame> = pred.iter().map(|f| (f.index, f)).collect();
    let mut last_id: HashMap<u64, u64> = HashMap::new();
    let mut out = MatchSummary::default();
    for frame in gt {
        let gts: Vec<usize> = (0..frame.ground_truth.len())
            .filter(|&i| frame.ground_truth[i].class_id == class_id)
            .collect();
        let preds: Vec<usize> = by_index
            .get(&frame.index)
            .map(|f| {
                (0..f.tracks.len())
                    .filter(|&j| f.tracks[j].class_id == class_id && f.tracks[j].score >= min_score)
                    .collect()
            })
            .unwrap_or_default();
        let tracks = by_index.get(&frame.index).map(|f| f.tracks.as_slice()).unwrap_or(&[]);
        let mut pairs = vec![];
        for &i in &gts {
            for &j in &preds {
                let d = (frame.ground_truth[i].bbox.bev_center() - tracks[j].bbox.bev_center()).norm();
                if d <= dist_gate {
                    pairs.push((d, i, j));
                }
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut gt_used = BTreeSet::new();
        let mut pred_used = BTreeSet::new();
        for (d, i, j) in pairs {
            if gt_used.contains(&i) || pred_used.contains(&j) {
                continue;
            }
            gt_used.insert(i);
            pred_used.insert(j);
            let instance = frame.ground_truth[i].instance_id;
            let id = tracks[j].track_id;
            if let Some(prev) = last_id.insert(instance, id) {
                if prev != id {
                    out.ids += 1;
                    out.id_switches.push(IdSwitch {
                        frame: frame.index,
                        instance_id: instance,
                        from: prev,
                        to: id,
                    });
                }
            }
            out.tp += 1;
            out.distance_sum += d;
            out.tp_scores.push(tracks[j].score);
            out.matches.push((frame.index, i, j, d));
        }
        out.fp += preds.len() - pred_used.len();
        out.fn_ += gts.len() - gt_used.len();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub recall: f64,
    pub achieved: bool,
    pub score_threshold: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub ids: usize,
    pub motar: f64,
    /// Mean matched center distance, meters.
    pub motp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: u32,
    pub positives: usize,
    pub amota: f64,
    pub amotp: f64,
    pub ids: usize,
    pub thresholds: Vec<ThresholdRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean over evaluated classes.
    pub amota: f64,
    /// Mean over evaluated classes, meters.
    pub amotp: f64,
    /// Total over evaluated classes.
    pub ids: usize,
    pub classes: Vec<ClassReport>,
    /// Classes that appear only in the predictions.
    pub excluded_classes: Vec<u32>,
    pub config: EvalConfig,
}

fn evaluate_class(pred: &[TrackFrame], gt: &[Frame], class_id: u32, cfg: &EvalConfig) -> ClassReport {
    let positives: usize = gt
        .iter()
        .map(|f| f.ground_truth.iter().filter(|g| g.class_id == class_id).count())
        .sum();
    let all = match_for_eval(pred, gt, class_id, cfg.dist_gate, f64::NEG_INFINITY);
    let mut scores = all.tp_scores.clone();
    scores.sort_by(|a, b| b.total_cmp(a));

    let levels = cfg.recall_levels;
    let mut rows = Vec::with_capacity(levels);
    for k in 1..=levels {
        let r = k as f64 / levels as f64;
        let needed = (k * positives).div_ceil(levels);
        if needed == 0 || needed > scores.len() {
            rows.push(ThresholdRow {
                recall: r,
                achieved: false,
                score_threshold: None,
                tp: 0,
                fp: 0,
                fn_: positives,
                ids: 0,
                motar: 0.0,
                motp: None,
            });
            continue;
        }
        let thr = scores[needed - 1];
        let m = match_for_eval(pred, gt, class_id, cfg.dist_gate, thr);
        // recall reached at this cut, which can exceed the nominal level when
        // several true positives share the cut score
        let p = positives as f64;
        let reached = m.tp as f64 / p;
        let errors = (m.ids + m.fp + m.fn_) as f64 - (1.0 - reached) * p;
        let motar = if m.tp == 0 {
            0.0
        } else {
            (1.0 - errors / (reached * p)).max(0.0)
        };
        rows.push(ThresholdRow {
            recall: r,
            achieved: true,
            score_threshold: Some(thr),
            tp: m.tp,
            fp: m.fp,
            fn_: m.fn_,
            ids: m.ids,
            motar,
            motp: (m.tp > 0).then(|| m.distance_sum / m.tp as f64),
        });
    }

    let used: Vec<&ThresholdRow> = match cfg.averaging {
        RecallAveraging::Achievable => rows.iter().filter(|r| r.achieved).collect(),
        RecallAveraging::AllLevels => rows.iter().collect(),
    };
    let (amota, amotp) = if used.is_empty() {
        (0.0, cfg.dist_gate)
    } else {
        let n = used.len() as f64;
        (
            used.iter().map(|r| r.motar).sum::<f64>() / n,
            used.iter().map(|r| r.motp.unwrap_or(cfg.dist_gate)).sum::<f64>() / n,
        )
    };
    // switches at the best-MOTAR cut; the lowest recall wins ties
    let ids = rows
        .iter()
        .filter(|r| r.achieved)
        .fold(None::<&ThresholdRow>, |best, r| match best {
            Some(b) if b.motar >= r.motar => Some(b),
            _ => Some(r),
        })
        .map(|r| r.ids)
        .unwrap_or(all.ids);
    ClassReport {
        class_id,
        positives,
        amota,
        amotp,
        ids,
        thresholds: rows,
    }
}

pub fn evaluate(pred: &[TrackFrame], gt: &[Frame], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let gt_classes: BTreeSet<u32> = gt.iter().flat_map(|f| f.ground_truth.iter().map(|g| g.class_id)).collect();
    let pred_classes: BTreeSet<u32> = pred.iter().flat_map(|f| f.tracks.iter().map(|t| t.class_id)).collect();
    let classes: Vec<ClassReport> = gt_classes.iter().map(|&c| evaluate_class(pred, gt, c, cfg)).collect();
    let n = classes.len().max(1) as f64;
    Ok(EvalReport {
        amota: classes.iter().map(|c| c.amota).sum::<f64>() / n,
        amotp: if classes.is_empty() {
            0.0
        } else {
            classes.iter().map(|c| c.amotp).sum::<f64>() / n
        },
        ids: classes.iter().map(|c| c.ids).sum(),
        excluded_classes: pred_classes.difference(&gt_classes).copied().collect(),
        classes,
        config: cfg.clone(),
    })
}

impl EvalReport {
    /// One row per class and recall level.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,recall,achieved,score_threshold,tp,fp,fn,ids,motar,motp\n");
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for c in &self.classes {
            for r in &c.thresholds {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{}\n",
                    c.class_id,
                    r.recall,
                    r.achieved,
                    opt(r.score_threshold),
                    r.tp,
                    r.fp,
                    r.fn_,
                    r.ids,
                    r.motar,
                    opt(r.motp)
                ));
            }
        }
        out
    }
}

/// Root-mean-square BEV center error over matched pairs, with the number of
/// matches; `None` without matches.
pub fn position_rmse(pred: &[TrackFrame], gt: &[Frame], dist_gate: f64) -> Option<(f64, usize)> {
    let classes: BTreeMap<u32, ()> = gt
        .iter()
        .flat_map(|f| f.ground_truth.iter().map(|g| (g.class_id, ())))
        .collect();
    let (mut sq, mut n) = (0.0, 0usize);
    for &c in classes.keys() {
        let m = match_for_eval(pred, gt, c, dist_gate, f64::NEG_INFINITY);
        sq += m.matches.iter().map(|x| x.3 * x.3).sum::<f64>();
        n += m.tp;
    }
    (n > 0).then(|| ((sq / n as f64).sqrt(), n))
}

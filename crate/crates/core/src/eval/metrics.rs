use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::eval::associate::RelationInstance;
use crate::eval::trajectory::viou;
use crate::{Error, Result};

/// Predictions and ground truth for one video. Videos are processed — and
/// averaged — in input order, and ranking ties keep input order, so results
/// are deterministic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoEval {
    pub video: String,
    pub preds: Vec<RelationInstance>,
    pub gt: Vec<RelationInstance>,
}

/// Ranking cutoffs conventionally reported for detection recall.
pub const DETECTION_CUTOFFS: [usize; 2] = [50, 100];

/// Ranking cutoffs conventionally reported for tagging precision.
pub const TAGGING_CUTOFFS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy)]
pub struct DetectionOptions {
    /// A prediction localizes a ground-truth instance when both tracklet
    /// vIoUs strictly exceed this.
    pub viou_threshold: f64,
    /// When false, matching ignores tracklets and compares triplets only.
    pub localized: bool,
    /// Also compute average precision over one ranking pooled across videos
    /// instead of averaging per-video scores.
    pub pooled_map: bool,
}

impl Default for DetectionOptions {
    fn default() -> Self {
        DetectionOptions {
            viou_threshold: 0.5,
            localized: true,
            pooled_map: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub map: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pooled_map: Option<f64>,
    /// Per-video average precision; NaN for videos without ground truth,
    /// which are excluded from the averages.
    pub per_video_ap: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggingReport {
    pub precision_at: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognitionReport {
    /// Keyed by entity slot name plus `"relationship"` for the full triplet.
    pub acc_at_1: BTreeMap<String, f64>,
}

pub const ENTITY_NAMES: [&str; 3] = ["subject", "predicate", "object"];

/// One video's predictions ranked by descending score, with a hit flag per
/// rank from greedy one-to-one matching against ground truth.
pub(crate) struct VideoMatches {
    pub(crate) ranked: Vec<usize>,
    pub(crate) tp: Vec<bool>,
    pub(crate) gt_count: usize,
}

fn check_videos(videos: &[VideoEval]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for v in videos {
        if !seen.insert(&v.video) {
            return Err(Error::Config(format!(
                "duplicate video {:?} in evaluation input",
                v.video
            )));
        }
        for inst in v.preds.iter().chain(&v.gt) {
            inst.validate()?;
        }
    }
    Ok(())
}

fn check_cutoffs(ks: &[usize]) -> Result<()> {
    if ks.iter().any(|&k| k == 0) {
        return Err(Error::Config("ranking cutoffs must be at least 1".into()));
    }
    Ok(())
}

/// Indices sorted by descending score; ties keep input order.
fn rank_by_score(instances: &[RelationInstance]) -> Vec<usize> {
    let mut ranked: Vec<usize> = (0..instances.len()).collect();
    ranked.sort_by(|&a, &b| {
        instances[b]
            .score
            .partial_cmp(&instances[a].score)
            .expect("scores validated finite")
            .then(a.cmp(&b))
    });
    ranked
}

pub(crate) fn match_video(v: &VideoEval, opts: &DetectionOptions) -> Result<VideoMatches> {
    let ranked = rank_by_score(&v.preds);
    let mut matched = vec![false; v.gt.len()];
    let mut tp = vec![false; v.preds.len()];
    for (rank, &pi) in ranked.iter().enumerate() {
        let p = &v.preds[pi];
        for (gi, g) in v.gt.iter().enumerate() {
            if matched[gi] || g.triplet != p.triplet {
                continue;
            }
            if opts.localized {
                let (ps, po) = p.tracklets("a prediction")?;
                let (gs, go) = g.tracklets("a ground-truth instance")?;
                if viou(ps, gs) <= opts.viou_threshold || viou(po, go) <= opts.viou_threshold {
                    continue;
                }
            }
            matched[gi] = true;
            tp[rank] = true;
            break;
        }
    }
    Ok(VideoMatches {
        ranked,
        tp,
        gt_count: v.gt.len(),
    })
}

/// Interpolated average precision: each matched instance takes the best
/// precision seen at or after the rank where it was found. NaN without
/// ground truth.
pub(crate) fn average_precision(tp: &[bool], gt_count: usize) -> f64 {
    let mut precisions = Vec::new();
    let mut hits = 0usize;
    for (rank, &is_tp) in tp.iter().enumerate() {
        if is_tp {
            hits += 1;
            precisions.push(hits as f64 / (rank + 1) as f64);
        }
    }
    let mut best = 0.0f64;
    for p in precisions.iter_mut().rev() {
        best = best.max(*p);
        *p = best;
    }
    let mut sum = 0.0;
    for p in &precisions {
        sum += *p;
    }
    sum / gt_count as f64
}

fn pooled_average_precision(videos: &[VideoEval], matches: &[VideoMatches]) -> f64 {
    // One ranking across all videos; ties keep video input order, then
    // within-video rank order.
    let mut entries: Vec<(f64, usize, usize)> = Vec::new();
    for (vi, (v, m)) in videos.iter().zip(matches).enumerate() {
        for (rank, &pi) in m.ranked.iter().enumerate() {
            entries.push((v.preds[pi].score, vi, rank));
        }
    }
    entries.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("scores validated finite")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let total_gt: usize = matches.iter().map(|m| m.gt_count).sum();
    let tp: Vec<bool> = entries
        .iter()
        .map(|&(_, vi, rank)| matches[vi].tp[rank])
        .collect();
    average_precision(&tp, total_gt)
}

/// Detection metrics over ranked per-video predictions.
///
/// A prediction is a hit when an unmatched ground-truth instance carries the
/// same triplet and — in localized mode — both tracklet vIoUs exceed the
/// threshold; ground truth is claimed greedily in rank order, first
/// qualifying instance in input order. Recall@K is the fraction of a video's
/// ground truth found in the top K (the whole list when it is shorter),
/// averaged over videos with ground truth; mAP averages per-video
/// interpolated average precision the same way. With no ground truth
/// anywhere, the averages are NaN.
pub fn detection_metrics(
    videos: &[VideoEval],
    ks: &[usize],
    opts: &DetectionOptions,
) -> Result<DetectionReport> {
    check_videos(videos)?;
    check_cutoffs(ks)?;
    if !opts.viou_threshold.is_finite() || !(0.0..1.0).contains(&opts.viou_threshold) {
        return Err(Error::Config(format!(
            "vIoU threshold must lie in [0, 1), got {}",
            opts.viou_threshold
        )));
    }
    let matches: Vec<VideoMatches> = videos
        .iter()
        .map(|v| match_video(v, opts))
        .collect::<Result<Vec<_>>>()?;

    let mut recall_at = BTreeMap::new();
    for &k in ks {
        let mut sum = 0.0;
        let mut scored = 0usize;
        for m in &matches {
            if m.gt_count == 0 {
                continue;
            }
            let lim = k.min(m.tp.len());
            let found = m.tp[..lim].iter().filter(|&&t| t).count();
            sum += found as f64 / m.gt_count as f64;
            scored += 1;
        }
        recall_at.insert(k, sum / scored as f64);
    }

    let mut per_video_ap = BTreeMap::new();
    let mut sum = 0.0;
    let mut scored = 0usize;
    for (v, m) in videos.iter().zip(&matches) {
        if m.gt_count == 0 {
            per_video_ap.insert(v.video.clone(), f64::NAN);
            continue;
        }
        let ap = average_precision(&m.tp, m.gt_count);
        per_video_ap.insert(v.video.clone(), ap);
        sum += ap;
        scored += 1;
    }
    let map = sum / scored as f64;

    let pooled_map = opts
        .pooled_map
        .then(|| pooled_average_precision(videos, &matches));

    Ok(DetectionReport {
        recall_at,
        map,
        pooled_map,
        per_video_ap,
    })
}

/// Distinct predicted triplets ranked by their best score; for equal scores
/// the triplet seen first ranks first.
pub(crate) fn distinct_ranked_triplets(preds: &[RelationInstance]) -> Vec<[usize; 3]> {
    let mut best: Vec<([usize; 3], f64, usize)> = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        match best.iter_mut().find(|(t, _, _)| *t == p.triplet) {
            Some(entry) => {
                if p.score > entry.1 {
                    entry.1 = p.score;
                }
            }
            None => best.push((p.triplet, p.score, i)),
        }
    }
    best.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("scores validated finite")
            .then(a.2.cmp(&b.2))
    });
    best.into_iter().map(|(t, _, _)| t).collect()
}

/// Tagging precision: per video, the fraction of the top-K distinct
/// predicted triplets that appear in the video's ground-truth triplet set,
/// averaged over all videos. The denominator stays K even when fewer than K
/// distinct triplets were predicted. NaN without videos.
pub fn tagging_metrics(videos: &[VideoEval], ks: &[usize]) -> Result<TaggingReport> {
    check_videos(videos)?;
    check_cutoffs(ks)?;
    let ranked: Vec<Vec<[usize; 3]>> = videos
        .iter()
        .map(|v| distinct_ranked_triplets(&v.preds))
        .collect();
    let gt_sets: Vec<BTreeSet<[usize; 3]>> = videos
        .iter()
        .map(|v| v.gt.iter().map(|g| g.triplet).collect())
        .collect();

    let mut precision_at = BTreeMap::new();
    for &k in ks {
        let mut sum = 0.0;
        for (triplets, gt_set) in ranked.iter().zip(&gt_sets) {
            let hits = triplets.iter().take(k).filter(|t| gt_set.contains(*t)).count();
            sum += hits as f64 / k as f64;
        }
        precision_at.insert(k, sum / videos.len() as f64);
    }
    Ok(TaggingReport { precision_at })
}

/// Top-1 accuracy per entity slot, plus `"relationship"`: the fraction of
/// instances whose whole triplet is correct.
pub fn recognition_metrics(
    preds: &[[usize; 3]],
    golds: &[[usize; 3]],
) -> Result<RecognitionReport> {
    if preds.len() != golds.len() {
        return Err(Error::RecognitionCountMismatch {
            got: preds.len(),
            expected: golds.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = preds.len() as f64;
    let mut acc_at_1 = BTreeMap::new();
    for (slot, name) in ENTITY_NAMES.iter().enumerate() {
        let hits = preds
            .iter()
            .zip(golds)
            .filter(|(p, g)| p[slot] == g[slot])
            .count();
        acc_at_1.insert((*name).to_string(), hits as f64 / n);
    }
    let full = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    acc_at_1.insert("relationship".to_string(), full as f64 / n);
    Ok(RecognitionReport { acc_at_1 })
}

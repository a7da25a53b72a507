//! Evaluation of scored relation predictions against ground truth:
//! tracklet volume-IoU, stitching of chunk-level predictions into
//! video-level instances, detection / tagging / recognition metrics, and a
//! zero-shot filter that keeps only triplets never seen in training.

mod associate;
mod metrics;
mod trajectory;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use associate::{greedy_associate, RelationInstance, ASSOCIATION_VIOU};
pub use metrics::{
    detection_metrics, recognition_metrics, tagging_metrics, DetectionOptions, DetectionReport,
    RecognitionReport, TaggingReport, VideoEval, DETECTION_CUTOFFS, ENTITY_NAMES, TAGGING_CUTOFFS,
};
pub use trajectory::{viou, viou_over, BBox, Trajectory};

/// Keep only ground truth whose triplet never occurs in `train`; predictions
/// pass through untouched. Videos left without ground truth drop out, so a
/// training set covering every evaluation triplet yields an empty list (and
/// metrics over it come out NaN).
pub fn zero_shot_split(train: &BTreeSet<[usize; 3]>, videos: &[VideoEval]) -> Vec<VideoEval> {
    let mut out = Vec::new();
    for v in videos {
        let gt: Vec<RelationInstance> = v
            .gt
            .iter()
            .filter(|g| !train.contains(&g.triplet))
            .cloned()
            .collect();
        if gt.is_empty() {
            continue;
        }
        out.push(VideoEval {
            video: v.video.clone(),
            preds: v.preds.clone(),
            gt,
        });
    }
    out
}

/// Pair flat prediction and ground-truth lists up by video name, in order
/// of first appearance (ground truth first, then prediction-only videos).
pub fn group_by_video(preds: &[RelationInstance], gt: &[RelationInstance]) -> Vec<VideoEval> {
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    let mut out: Vec<VideoEval> = Vec::new();
    for inst in gt.iter().chain(preds) {
        if !index.contains_key(&inst.video) {
            index.insert(inst.video.clone(), out.len());
            out.push(VideoEval {
                video: inst.video.clone(),
                preds: Vec::new(),
                gt: Vec::new(),
            });
        }
    }
    for g in gt {
        out[index[&g.video]].gt.push(g.clone());
    }
    for p in preds {
        out[index[&p.video]].preds.push(p.clone());
    }
    out
}

/// Bundle of evaluation results as written to report files. Maps are keyed
/// by ranking cutoff or entity name; sections that were not computed stay
/// empty (or NaN for `map`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub precision_at: BTreeMap<usize, f64>,
    pub map: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pooled_map: Option<f64>,
    pub acc_at_1: BTreeMap<String, f64>,
    pub per_video_ap: BTreeMap<String, f64>,
}

impl Default for MetricReport {
    fn default() -> Self {
        MetricReport {
            recall_at: BTreeMap::new(),
            precision_at: BTreeMap::new(),
            map: f64::NAN,
            pooled_map: None,
            acc_at_1: BTreeMap::new(),
            per_video_ap: BTreeMap::new(),
        }
    }
}

impl MetricReport {
    pub fn with_detection(mut self, d: DetectionReport) -> Self {
        self.recall_at = d.recall_at;
        self.map = d.map;
        self.pooled_map = d.pooled_map;
        self.per_video_ap = d.per_video_ap;
        self
    }

    pub fn with_tagging(mut self, t: TaggingReport) -> Self {
        self.precision_at = t.precision_at;
        self
    }

    pub fn with_recognition(mut self, r: RecognitionReport) -> Self {
        self.acc_at_1 = r.acc_at_1;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ChunkRange;

    fn plain(video: &str, triplet: [usize; 3], score: f64) -> RelationInstance {
        RelationInstance {
            video: video.to_string(),
            triplet,
            score,
            span: ChunkRange { start: 0, end: 10 },
            straj: None,
            otraj: None,
        }
    }

    #[test]
    fn zero_shot_keeps_only_unseen_triplets() {
        let train: BTreeSet<[usize; 3]> = [[0, 0, 0], [2, 2, 2]].into_iter().collect();
        let videos = vec![VideoEval {
            video: "v0".to_string(),
            preds: vec![plain("v0", [0, 0, 0], 0.9), plain("v0", [1, 1, 1], 0.8)],
            gt: vec![plain("v0", [0, 0, 0], 1.0), plain("v0", [1, 1, 1], 1.0)],
        }];
        let filtered = zero_shot_split(&train, &videos);
        assert_eq!(filtered.len(), 1);
        assert_eq!(filtered[0].gt.len(), 1);
        assert_eq!(filtered[0].gt[0].triplet, [1, 1, 1]);
        // predictions are untouched, even those with seen triplets
        assert_eq!(filtered[0].preds.len(), 2);
    }

    #[test]
    fn covering_training_set_leaves_nothing_and_metrics_go_nan() {
        let train: BTreeSet<[usize; 3]> = [[0, 0, 0], [1, 1, 1]].into_iter().collect();
        let videos = vec![VideoEval {
            video: "v0".to_string(),
            preds: vec![plain("v0", [0, 0, 0], 0.9)],
            gt: vec![plain("v0", [0, 0, 0], 1.0), plain("v0", [1, 1, 1], 1.0)],
        }];
        let filtered = zero_shot_split(&train, &videos);
        assert!(filtered.is_empty());

        let opts = DetectionOptions {
            localized: false,
            ..DetectionOptions::default()
        };
        let report = detection_metrics(&filtered, &[1], &opts).unwrap();
        assert!(report.map.is_nan());
        assert!(report.recall_at[&1].is_nan());
        let tags = tagging_metrics(&filtered, &[1]).unwrap();
        assert!(tags.precision_at[&1].is_nan());
    }

    #[test]
    fn grouping_follows_first_appearance_and_keeps_everything() {
        let preds = vec![
            plain("vb", [0, 0, 0], 0.9),
            plain("va", [1, 1, 1], 0.8),
            plain("vc", [2, 2, 2], 0.7),
        ];
        let gt = vec![plain("va", [1, 1, 1], 1.0), plain("vb", [0, 0, 0], 1.0)];
        let grouped = group_by_video(&preds, &gt);
        let names: Vec<&str> = grouped.iter().map(|v| v.video.as_str()).collect();
        // ground-truth videos first, then the prediction-only one
        assert_eq!(names, ["va", "vb", "vc"]);
        assert_eq!(grouped[0].gt.len(), 1);
        assert_eq!(grouped[0].preds.len(), 1);
        assert_eq!(grouped[2].gt.len(), 0);
        assert_eq!(grouped[2].preds.len(), 1);
        let total: usize = grouped.iter().map(|v| v.preds.len() + v.gt.len()).sum();
        assert_eq!(total, 5);
    }

    #[test]
    fn report_assembles_all_sections() {
        let opts = DetectionOptions {
            localized: false,
            pooled_map: true,
            ..DetectionOptions::default()
        };
        let videos = vec![VideoEval {
            video: "v0".to_string(),
            preds: vec![plain("v0", [0, 0, 0], 0.9)],
            gt: vec![plain("v0", [0, 0, 0], 1.0)],
        }];
        let report = MetricReport::default()
            .with_detection(detection_metrics(&videos, &[50], &opts).unwrap())
            .with_tagging(tagging_metrics(&videos, &[1]).unwrap())
            .with_recognition(recognition_metrics(&[[0, 0, 0]], &[[0, 0, 0]]).unwrap());
        assert_eq!(report.recall_at[&50], 1.0);
        assert_eq!(report.pooled_map, Some(1.0));
        assert_eq!(report.precision_at[&1], 1.0);
        assert_eq!(report.acc_at_1["relationship"], 1.0);
        assert_eq!(report.per_video_ap["v0"], 1.0);
    }
}

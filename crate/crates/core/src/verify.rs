//! Self-check suites. Each one runs a batch of seeded randomized cases
//! against an independent check — central finite differences, exact
//! enumeration, or a second from-scratch metric implementation — and reports
//! the worst statistic observed next to the threshold it must stay under.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::energy::{EnergyMode, EnergyModel, EnergyTables, ModelConfig, PriorConfig};
use crate::eval::{
    detection_metrics, recognition_metrics, tagging_metrics, viou, BBox, DetectionOptions,
    RelationInstance, Trajectory, VideoEval,
};
use crate::graph::{Assignment, ChunkRange, GraphSpec, ObservationInstance};
use crate::inference::{
    exact_inference, free_energy, mean_field_update_node, run_mean_field, InferenceOptions,
};
use crate::learning::finite_diff_check;
use crate::numeric::softmax;
use crate::rng::substream_indexed;
use crate::Result;

/// Result of one suite: the worst-case statistic over all cases and the
/// threshold it is held to (pass when `worst <= threshold`).
#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub cases: usize,
    pub worst: f64,
    pub threshold: f64,
    pub passed: bool,
    pub detail: String,
}

impl SuiteOutcome {
    fn evaluate(name: &'static str, cases: usize, worst: f64, threshold: f64, detail: String) -> Self {
        SuiteOutcome {
            name,
            cases,
            worst,
            threshold,
            passed: worst <= threshold,
            detail,
        }
    }

    pub fn summary_line(&self) -> String {
        format!(
            "{}: {} — worst {:.3e} vs threshold {:.3e} over {} cases{}",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.worst,
            self.threshold,
            self.cases,
            if self.detail.is_empty() {
                String::new()
            } else {
                format!(" ({})", self.detail)
            }
        )
    }
}

// ---------------------------------------------------------------- samplers

fn tiny_spec(rng: &mut ChaCha20Rng, max_steps: usize, max_streams: usize, max_labels: usize) -> GraphSpec {
    let steps = rng.random_range(1..=max_steps);
    let streams = rng.random_range(1..=max_streams);
    let label_sizes: Vec<usize> = (0..streams).map(|_| rng.random_range(2..=max_labels)).collect();
    let feature_dims: Vec<usize> = (0..streams).map(|_| rng.random_range(2..=4)).collect();
    GraphSpec::new(steps, label_sizes, feature_dims).expect("sampled dimensions are valid")
}

fn tiny_instance(rng: &mut ChaCha20Rng, spec: &GraphSpec) -> ObservationInstance {
    let features = (0..spec.num_steps)
        .map(|_| {
            spec.feature_dims
                .iter()
                .map(|&d| {
                    (0..d)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(rng);
                            0.8 * z
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let gold = Assignment::new(
        (0..spec.num_steps)
            .map(|_| spec.label_sizes.iter().map(|&n| rng.random_range(0..n)).collect())
            .collect(),
    );
    ObservationInstance::new(spec.clone(), features, Some(gold)).expect("sampled instance is valid")
}

fn tiny_model(
    rng: &mut ChaCha20Rng,
    spec: &GraphSpec,
    mode: EnergyMode,
    with_prior: bool,
    unary_hidden: Vec<usize>,
) -> Result<EnergyModel> {
    let min_label = *spec.label_sizes.iter().min().expect("at least one stream");
    let rank = rng.random_range(1..=2usize).min(min_label - 1).max(1);
    let prior = with_prior.then(|| {
        let dim = 2;
        let tables = spec
            .label_sizes
            .iter()
            .map(|&n| (0..n * dim).map(|_| rng.random_range(-0.8..0.8)).collect())
            .collect();
        PriorConfig { dim, tables }
    });
    let config = ModelConfig {
        mode,
        rank,
        bandwidth: rng.random_range(2.0..12.0),
        halve_pairwise: rng.random::<f64>() < 0.25,
        unary_hidden,
        prior,
        ..ModelConfig::default()
    };
    let seed: u64 = rng.random();
    EnergyModel::new(spec.clone(), config, seed)
}

// ----------------------------------------------------------- gradient suite

/// Analytic gradients against central finite differences, for each mode plus
/// the prior-augmented gated variant, on seeded tiny models.
pub fn gradcheck_suite(seed: u64) -> Result<SuiteOutcome> {
    const VARIANTS: [(EnergyMode, bool); 5] = [
        (EnergyMode::Ueg, false),
        (EnergyMode::Seg, false),
        (EnergyMode::Steg, false),
        (EnergyMode::Gsteg, false),
        (EnergyMode::Gsteg, true),
    ];
    let mut worst = 0.0f64;
    let mut detail = String::new();
    let mut cases = 0usize;
    for (vi, &(mode, with_prior)) in VARIANTS.iter().enumerate() {
        for c in 0..20 {
            let mut rng = substream_indexed(seed, "gradcheck", (vi * 20 + c) as u64);
            let spec = tiny_spec(&mut rng, 3, 3, 4);
            let hidden = if c % 5 == 4 { vec![2] } else { Vec::new() };
            let model = tiny_model(&mut rng, &spec, mode, with_prior, hidden)?;
            let inst = tiny_instance(&mut rng, &spec);
            let opts = InferenceOptions {
                passes: rng.random_range(1..=3),
                ..InferenceOptions::default()
            };
            let report = finite_diff_check(&model, &inst, &opts, 1e-5)?;
            cases += 1;
            if report.max_rel_error > worst {
                worst = report.max_rel_error;
                detail = format!(
                    "{mode:?}{} case {c}, tensor {}",
                    if with_prior { "+prior" } else { "" },
                    report.worst
                );
            }
        }
    }
    Ok(SuiteOutcome::evaluate("gradcheck", cases, worst, 1e-4, detail))
}

// -------------------------------------------------------- free-energy suite

/// Every sequential single-node update must not increase the variational
/// free energy (beyond fp noise), checked on seeded gated models.
pub fn free_energy_suite(seed: u64) -> Result<SuiteOutcome> {
    let mut worst = f64::NEG_INFINITY;
    let mut detail = String::new();
    let mut cases = 0usize;
    for i in 0..100u64 {
        let mut rng = substream_indexed(seed, "free-energy", i);
        let spec = tiny_spec(&mut rng, 3, 3, 4);
        let model = tiny_model(&mut rng, &spec, EnergyMode::Gsteg, i % 4 == 3, Vec::new())?;
        let inst = tiny_instance(&mut rng, &spec);
        let mut q = crate::inference::init_marginals(&model, &inst)?;
        for pass in 0..3 {
            for (t, k) in model.spec().nodes() {
                let before = free_energy(&model, &inst, &q)?;
                mean_field_update_node(&model, &inst, &mut q, t, k)?;
                let after = free_energy(&model, &inst, &q)?;
                let rise = after - before;
                if rise > worst {
                    worst = rise;
                    detail = format!("case {i}, pass {pass}, node ({t},{k})");
                }
            }
        }
        cases += 1;
    }
    Ok(SuiteOutcome::evaluate("free-energy descent", cases, worst, 1e-9, detail))
}

// ------------------------------------------------------------ oracle suites

/// Max pairwise energy magnitude over every ordered node pair of the model
/// on this instance.
fn max_pairwise_magnitude(model: &EnergyModel, inst: &ObservationInstance) -> Result<f64> {
    let tables = EnergyTables::build(model, inst)?;
    let spec = model.spec();
    let mut m = 0.0f64;
    for a in spec.nodes() {
        for b in spec.nodes() {
            if a == b {
                continue;
            }
            if let Some(phi) = tables.assembled(a, b) {
                for v in phi {
                    m = m.max(v.abs());
                }
            }
        }
    }
    Ok(m)
}

/// Scale the pairwise parameter sources so that every assembled pairwise
/// magnitude lands at or below `cap`. Compatibility tables, the source
/// factor of each gating pair, and the prior's source map are all linear in
/// the assembled table, so one shared factor suffices.
fn rescale_pairwise(mut model: EnergyModel, inst: &ObservationInstance, cap: f64) -> Result<EnergyModel> {
    let magnitude = max_pairwise_magnitude(&model, inst)?;
    if magnitude > cap {
        let s = cap / magnitude * (1.0 - 1e-12);
        for (name, tensor) in model.named_tensors_mut() {
            if name.starts_with("compat[") || name.contains(".src.") {
                for v in tensor.iter_mut() {
                    *v *= s;
                }
            }
        }
    }
    Ok(model)
}

fn weak_case(seed: u64, i: u64) -> Result<(EnergyModel, ObservationInstance)> {
    let mut rng = substream_indexed(seed, "weak-coupling", i);
    let label_sizes: Vec<usize> = (0..2).map(|_| rng.random_range(2..=3)).collect();
    let feature_dims: Vec<usize> = (0..2).map(|_| rng.random_range(2..=4)).collect();
    let spec = GraphSpec::new(2, label_sizes, feature_dims).expect("2x2 spec is valid");
    let mode = match i % 3 {
        0 => EnergyMode::Seg,
        1 => EnergyMode::Steg,
        _ => EnergyMode::Gsteg,
    };
    let model = tiny_model(&mut rng, &spec, mode, i % 4 == 3, Vec::new())?;
    let inst = tiny_instance(&mut rng, &spec);
    let model = rescale_pairwise(model, &inst, 0.1)?;
    Ok((model, inst))
}

fn converged(model: &EnergyModel, inst: &ObservationInstance) -> Result<crate::inference::Marginals> {
    let opts = InferenceOptions {
        passes: 400,
        early_stop: Some(1e-13),
        ..InferenceOptions::default()
    };
    run_mean_field(model, inst, &opts)
}

/// With unary-only energies the variational family contains the true
/// distribution, so mean field must reproduce exact marginals to fp
/// accuracy.
pub fn factorized_exactness_suite(seed: u64) -> Result<SuiteOutcome> {
    let mut worst = 0.0f64;
    let mut detail = String::new();
    let mut cases = 0usize;
    for i in 0..50u64 {
        let mut rng = substream_indexed(seed, "factorized", i);
        let spec = tiny_spec(&mut rng, 3, 3, 4);
        let model = tiny_model(&mut rng, &spec, EnergyMode::Ueg, false, Vec::new())?;
        let inst = tiny_instance(&mut rng, &spec);
        let q = run_mean_field(&model, &inst, &InferenceOptions::default())?;
        let exact = exact_inference(&model, &inst)?;
        for (t, k) in model.spec().nodes() {
            for (qv, pv) in q.get(t, k).iter().zip(exact.marginals.get(t, k)) {
                let gap = (qv - pv).abs();
                if gap > worst {
                    worst = gap;
                    detail = format!("case {i}, node ({t},{k})");
                }
            }
        }
        cases += 1;
    }
    Ok(SuiteOutcome::evaluate("factorized exactness", cases, worst, 1e-12, detail))
}

/// With every pairwise magnitude capped at 0.1, converged mean-field
/// marginals must stay within a small per-node L1 gap of the exact
/// enumeration marginals.
pub fn weak_coupling_suite(seed: u64) -> Result<SuiteOutcome> {
    let mut worst = 0.0f64;
    let mut detail = String::new();
    let mut cases = 0usize;
    for i in 0..50u64 {
        let (model, inst) = weak_case(seed, i)?;
        let magnitude = max_pairwise_magnitude(&model, &inst)?;
        if magnitude > 0.1 {
            return Ok(SuiteOutcome::evaluate(
                "weak-coupling agreement",
                cases,
                f64::INFINITY,
                0.05,
                format!("case {i}: rescale left magnitude {magnitude}"),
            ));
        }
        let q = converged(&model, &inst)?;
        let exact = exact_inference(&model, &inst)?;
        for (t, k) in model.spec().nodes() {
            let l1: f64 = q
                .get(t, k)
                .iter()
                .zip(exact.marginals.get(t, k))
                .map(|(qv, pv)| (qv - pv).abs())
                .sum();
            if l1 > worst {
                worst = l1;
                detail = format!("case {i}, node ({t},{k})");
            }
        }
        cases += 1;
    }
    Ok(SuiteOutcome::evaluate("weak-coupling agreement", cases, worst, 0.05, detail))
}

/// At convergence each node's marginal must equal the softmax of its own
/// update scores (the fixed-point condition), on the weak-coupling cases.
pub fn fixed_point_suite(seed: u64) -> Result<SuiteOutcome> {
    let mut worst = 0.0f64;
    let mut detail = String::new();
    let mut cases = 0usize;
    for i in 0..50u64 {
        let (model, inst) = weak_case(seed, i)?;
        let q = converged(&model, &inst)?;
        let tables = EnergyTables::build(&model, &inst)?;
        for (t, k) in model.spec().nodes() {
            let refreshed = softmax(&tables.update_scores(t, k, &q.values));
            for (rv, qv) in refreshed.iter().zip(q.get(t, k)) {
                let gap = (rv - qv).abs();
                if gap > worst {
                    worst = gap;
                    detail = format!("case {i}, node ({t},{k})");
                }
            }
        }
        cases += 1;
    }
    Ok(SuiteOutcome::evaluate("fixed-point residual", cases, worst, 1e-8, detail))
}

/// The enumeration-oracle suites: factorized exactness, weak-coupling
/// agreement, and the fixed-point residual, in that order.
pub fn oracle_suites(seed: u64) -> Result<Vec<SuiteOutcome>> {
    Ok(vec![
        factorized_exactness_suite(seed)?,
        weak_coupling_suite(seed)?,
        fixed_point_suite(seed)?,
    ])
}

// ----------------------------------------------------------- metrics suite

fn agree(a: f64, b: f64) -> bool {
    a == b || (a.is_nan() && b.is_nan())
}

struct MetricsTally {
    worst: f64,
    detail: String,
}

impl MetricsTally {
    fn new() -> Self {
        MetricsTally {
            worst: 0.0,
            detail: String::new(),
        }
    }

    fn record(&mut self, case: usize, label: &str, got: f64, oracle: f64) {
        if agree(got, oracle) {
            return;
        }
        let gap = (got - oracle).abs();
        let gap = if gap.is_nan() { f64::INFINITY } else { gap };
        if gap >= self.worst {
            self.worst = gap;
            self.detail = format!("case {case}: {label} = {got} vs oracle {oracle}");
        }
    }
}

fn random_track(rng: &mut ChaCha20Rng) -> Trajectory {
    // Coarse 5-unit grid so exact overlaps, containments, and threshold
    // cases all occur.
    let start = rng.random_range(0..4usize);
    let frames = rng.random_range(1..=4usize);
    let boxes = (0..frames)
        .map(|_| {
            let x1 = rng.random_range(0..3usize) as f64 * 5.0;
            let y1 = rng.random_range(0..3usize) as f64 * 5.0;
            let w = rng.random_range(1..=2usize) as f64 * 5.0;
            let h = rng.random_range(1..=2usize) as f64 * 5.0;
            BBox::new(x1, y1, x1 + w, y1 + h).expect("grid boxes are valid")
        })
        .collect();
    Trajectory::new(start, boxes).expect("at least one frame")
}

fn random_instance(rng: &mut ChaCha20Rng, video: &str) -> RelationInstance {
    RelationInstance {
        video: video.to_string(),
        triplet: [
            rng.random_range(0..2),
            rng.random_range(0..2),
            rng.random_range(0..2),
        ],
        score: rng.random_range(0..=8) as f64 / 8.0,
        span: ChunkRange { start: 0, end: 10 },
        straj: Some(random_track(rng)),
        otraj: Some(random_track(rng)),
    }
}

fn random_metric_videos(rng: &mut ChaCha20Rng) -> Vec<VideoEval> {
    (0..rng.random_range(1..=3usize))
        .map(|vi| {
            let name = format!("v{vi}");
            let preds: Vec<RelationInstance> = (0..rng.random_range(0..=7usize))
                .map(|_| random_instance(rng, &name))
                .collect();
            let gt = (0..rng.random_range(0..=4usize))
                .map(|_| {
                    let mut g = random_instance(rng, &name);
                    if !preds.is_empty() && rng.random::<f64>() < 0.5 {
                        // clone a prediction's grounding so matches happen
                        let p = &preds[rng.random_range(0..preds.len())];
                        g.triplet = p.triplet;
                        g.straj = p.straj.clone();
                        g.otraj = p.otraj.clone();
                    }
                    g
                })
                .collect();
            VideoEval {
                video: name,
                preds,
                gt,
            }
        })
        .collect()
}

fn compare_detection(
    tally: &mut MetricsTally,
    case: usize,
    videos: &[VideoEval],
    ks: &[usize],
    opts: &DetectionOptions,
) -> Result<()> {
    let got = detection_metrics(videos, ks, opts)?;
    let oracle = reference::detection_metrics(videos, ks, opts);
    for &k in ks {
        tally.record(case, &format!("recall@{k}"), got.recall_at[&k], oracle.recall_at[&k]);
    }
    tally.record(case, "mAP", got.map, oracle.map);
    match (got.pooled_map, oracle.pooled_map) {
        (Some(a), Some(b)) => tally.record(case, "pooled mAP", a, b),
        (None, None) => {}
        (a, b) => tally.record(
            case,
            "pooled mAP presence",
            a.map_or(f64::NEG_INFINITY, |v| v),
            b.map_or(f64::NEG_INFINITY, |v| v),
        ),
    }
    for (video, ap) in &got.per_video_ap {
        tally.record(case, &format!("AP[{video}]"), *ap, oracle.per_video_ap[video]);
    }
    Ok(())
}

/// Every reported metric against the from-scratch reference implementation,
/// on randomized small cases plus frozen hand cases; agreement must be
/// exact.
pub fn metrics_suite(seed: u64) -> Result<SuiteOutcome> {
    let mut tally = MetricsTally::new();
    let mut cases = 0usize;

    // Hand case: one shared frame, boxes (0,0,10,10) and (5,0,15,10).
    let a = Trajectory::new(0, vec![BBox::new(0.0, 0.0, 10.0, 10.0)?])?;
    let b = Trajectory::new(0, vec![BBox::new(5.0, 0.0, 15.0, 10.0)?])?;
    tally.record(cases, "vIoU hand case", viou(&a, &b), 1.0 / 3.0);
    cases += 1;

    // Hand case: ranked [hit, miss, hit] against two truths.
    let hand = |triplet: [usize; 3], score: f64| RelationInstance {
        video: "hand".to_string(),
        triplet,
        score,
        span: ChunkRange { start: 0, end: 10 },
        straj: None,
        otraj: None,
    };
    let videos = vec![VideoEval {
        video: "hand".to_string(),
        preds: vec![hand([0, 0, 0], 0.9), hand([9, 9, 9], 0.5), hand([1, 1, 1], 0.2)],
        gt: vec![hand([0, 0, 0], 1.0), hand([1, 1, 1], 1.0)],
    }];
    let unlocalized = DetectionOptions {
        localized: false,
        ..DetectionOptions::default()
    };
    let report = detection_metrics(&videos, &[2], &unlocalized)?;
    tally.record(cases, "hand recall@2", report.recall_at[&2], 0.5);
    tally.record(cases, "hand mAP", report.map, (1.0 + 2.0 / 3.0) / 2.0);
    compare_detection(&mut tally, cases, &videos, &[2], &unlocalized)?;
    cases += 1;

    for i in 0..200u64 {
        let mut rng = substream_indexed(seed, "metrics", i);
        let videos = random_metric_videos(&mut rng);
        let opts = DetectionOptions {
            viou_threshold: 0.5,
            localized: rng.random::<f64>() < 0.5,
            pooled_map: i % 3 == 0,
        };
        let ks = [1, 2, 5, 50];
        compare_detection(&mut tally, cases, &videos, &ks, &opts)?;

        let tag_ks = [1, 3, 5];
        let got = tagging_metrics(&videos, &tag_ks)?;
        let oracle = reference::tagging_metrics(&videos, &tag_ks);
        for &k in &tag_ks {
            tally.record(
                cases,
                &format!("precision@{k}"),
                got.precision_at[&k],
                oracle.precision_at[&k],
            );
        }

        let n = rng.random_range(1..=20usize);
        let draw3 = |rng: &mut ChaCha20Rng| -> [usize; 3] {
            [
                rng.random_range(0..3),
                rng.random_range(0..3),
                rng.random_range(0..3),
            ]
        };
        let preds: Vec<[usize; 3]> = (0..n).map(|_| draw3(&mut rng)).collect();
        let golds: Vec<[usize; 3]> = (0..n).map(|_| draw3(&mut rng)).collect();
        let got = recognition_metrics(&preds, &golds)?;
        let oracle = reference::recognition_metrics(&preds, &golds);
        for (name, v) in &got.acc_at_1 {
            tally.record(cases, &format!("acc@1 {name}"), *v, oracle.acc_at_1[name]);
        }

        for _ in 0..2 {
            let ta = random_track(&mut rng);
            let tb = random_track(&mut rng);
            tally.record(cases, "vIoU", viou(&ta, &tb), reference::viou(&ta, &tb));
        }
        cases += 1;
    }

    Ok(SuiteOutcome::evaluate(
        "metric double-entry",
        cases,
        tally.worst,
        0.0,
        tally.detail,
    ))
}

/// From-scratch re-implementations of the reported metrics, coded
/// independently of the main ones so the pair double-checks each other. The
/// shared conventions (descending score with ties in input order, greedy
/// first-qualifying matching, interpolated precision, averaging per video in
/// input order) are pinned design decisions, not implementation accidents.
pub mod reference {
    use std::collections::BTreeMap;

    use crate::eval::{
        BBox, DetectionOptions, DetectionReport, RecognitionReport, RelationInstance,
        TaggingReport, Trajectory, VideoEval, ENTITY_NAMES,
    };

    fn rect_area(b: &BBox) -> f64 {
        (b.x2 - b.x1) * (b.y2 - b.y1)
    }

    fn rect_overlap(a: &BBox, b: &BBox) -> f64 {
        let w = a.x2.min(b.x2) - a.x1.max(b.x1);
        let h = a.y2.min(b.y2) - a.y1.max(b.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn viou(a: &Trajectory, b: &Trajectory) -> f64 {
        let lo = if a.start() < b.start() { a.start() } else { b.start() };
        let hi = if a.end() > b.end() { a.end() } else { b.end() };
        let mut inter = 0.0;
        let mut uni = 0.0;
        for frame in lo..hi {
            let ba = a.box_at(frame);
            let bb = b.box_at(frame);
            if let (Some(x), Some(y)) = (ba, bb) {
                let i = rect_overlap(x, y);
                inter += i;
                uni += rect_area(x) + rect_area(y) - i;
            } else if let Some(x) = ba {
                uni += rect_area(x);
            } else if let Some(y) = bb {
                uni += rect_area(y);
            }
        }
        if uni <= 0.0 {
            0.0
        } else {
            inter / uni
        }
    }

    /// Prediction indices by descending score via selection; equal scores
    /// keep the earlier input index.
    fn selection_order(preds: &[RelationInstance]) -> Vec<usize> {
        let mut remaining: Vec<usize> = (0..preds.len()).collect();
        let mut order = Vec::new();
        while !remaining.is_empty() {
            let mut best = 0;
            for j in 1..remaining.len() {
                if preds[remaining[j]].score > preds[remaining[best]].score {
                    best = j;
                }
            }
            order.push(remaining.remove(best));
        }
        order
    }

    fn qualifies(p: &RelationInstance, g: &RelationInstance, opts: &DetectionOptions) -> bool {
        if p.triplet != g.triplet {
            return false;
        }
        if !opts.localized {
            return true;
        }
        let ps = p.straj.as_ref().expect("localized matching needs tracklets");
        let po = p.otraj.as_ref().expect("localized matching needs tracklets");
        let gs = g.straj.as_ref().expect("localized matching needs tracklets");
        let go = g.otraj.as_ref().expect("localized matching needs tracklets");
        viou(ps, gs) > opts.viou_threshold && viou(po, go) > opts.viou_threshold
    }

    fn literal_ap(flags: &[bool], gt_count: usize) -> f64 {
        let mut precisions = Vec::new();
        let mut hits = 0usize;
        for (i, &f) in flags.iter().enumerate() {
            if f {
                hits += 1;
                precisions.push(hits as f64 / (i + 1) as f64);
            }
        }
        let mut total = 0.0;
        for j in 0..precisions.len() {
            let mut best = 0.0f64;
            for &p in &precisions[j..] {
                if p > best {
                    best = p;
                }
            }
            total += best;
        }
        total / gt_count as f64
    }

    pub fn detection_metrics(
        videos: &[VideoEval],
        ks: &[usize],
        opts: &DetectionOptions,
    ) -> DetectionReport {
        struct Scored {
            flags: Vec<bool>,
            gt: usize,
            order: Vec<usize>,
        }
        let scored: Vec<Scored> = videos
            .iter()
            .map(|v| {
                let order = selection_order(&v.preds);
                let mut taken = vec![false; v.gt.len()];
                let mut flags = vec![false; v.preds.len()];
                for (rank, &pi) in order.iter().enumerate() {
                    for (gi, g) in v.gt.iter().enumerate() {
                        if !taken[gi] && qualifies(&v.preds[pi], g, opts) {
                            taken[gi] = true;
                            flags[rank] = true;
                            break;
                        }
                    }
                }
                Scored {
                    flags,
                    gt: v.gt.len(),
                    order,
                }
            })
            .collect();

        let mut recall_at = BTreeMap::new();
        for &k in ks {
            let mut total = 0.0;
            let mut counted = 0usize;
            for s in &scored {
                if s.gt == 0 {
                    continue;
                }
                let upto = if k < s.flags.len() { k } else { s.flags.len() };
                let mut hits = 0usize;
                for &f in &s.flags[..upto] {
                    if f {
                        hits += 1;
                    }
                }
                total += hits as f64 / s.gt as f64;
                counted += 1;
            }
            recall_at.insert(k, total / counted as f64);
        }

        let mut per_video_ap = BTreeMap::new();
        let mut total = 0.0;
        let mut counted = 0usize;
        for (v, s) in videos.iter().zip(&scored) {
            if s.gt == 0 {
                per_video_ap.insert(v.video.clone(), f64::NAN);
                continue;
            }
            let ap = literal_ap(&s.flags, s.gt);
            per_video_ap.insert(v.video.clone(), ap);
            total += ap;
            counted += 1;
        }
        let map = total / counted as f64;

        let pooled_map = opts.pooled_map.then(|| {
            let mut entries: Vec<(f64, usize, usize)> = Vec::new();
            for (vi, (v, s)) in videos.iter().zip(&scored).enumerate() {
                for (rank, &pi) in s.order.iter().enumerate() {
                    entries.push((v.preds[pi].score, vi, rank));
                }
            }
            // selection by (score desc, video asc, rank asc)
            let mut pooled_flags = Vec::new();
            let mut remaining = entries;
            while !remaining.is_empty() {
                let mut best = 0;
                for j in 1..remaining.len() {
                    if remaining[j].0 > remaining[best].0 {
                        best = j;
                    }
                }
                let (_, vi, rank) = remaining.remove(best);
                pooled_flags.push(scored[vi].flags[rank]);
            }
            let mut total_gt = 0usize;
            for s in &scored {
                total_gt += s.gt;
            }
            literal_ap(&pooled_flags, total_gt)
        });

        DetectionReport {
            recall_at,
            map,
            pooled_map,
            per_video_ap,
        }
    }

    /// Distinct triplets by best score (first appearance wins ties),
    /// assembled with linear scans and an insertion sort.
    fn dedup_rank(preds: &[RelationInstance]) -> Vec<[usize; 3]> {
        let mut entries: Vec<([usize; 3], f64, usize)> = Vec::new();
        for (i, p) in preds.iter().enumerate() {
            let mut found = false;
            for e in entries.iter_mut() {
                if e.0 == p.triplet {
                    found = true;
                    if p.score > e.1 {
                        e.1 = p.score;
                    }
                    break;
                }
            }
            if !found {
                entries.push((p.triplet, p.score, i));
            }
        }
        let mut sorted: Vec<([usize; 3], f64, usize)> = Vec::new();
        for e in entries {
            let mut pos = sorted.len();
            for (j, s) in sorted.iter().enumerate() {
                if e.1 > s.1 || (e.1 == s.1 && e.2 < s.2) {
                    pos = j;
                    break;
                }
            }
            sorted.insert(pos, e);
        }
        sorted.into_iter().map(|e| e.0).collect()
    }

    pub fn tagging_metrics(videos: &[VideoEval], ks: &[usize]) -> TaggingReport {
        let mut precision_at = BTreeMap::new();
        for &k in ks {
            let mut total = 0.0;
            for v in videos {
                let ranked = dedup_rank(&v.preds);
                let mut hits = 0usize;
                for t in ranked.iter().take(k) {
                    if v.gt.iter().any(|g| g.triplet == *t) {
                        hits += 1;
                    }
                }
                total += hits as f64 / k as f64;
            }
            precision_at.insert(k, total / videos.len() as f64);
        }
        TaggingReport { precision_at }
    }

    pub fn recognition_metrics(preds: &[[usize; 3]], golds: &[[usize; 3]]) -> RecognitionReport {
        let n = preds.len() as f64;
        let mut slot_hits = [0usize; 3];
        let mut full_hits = 0usize;
        for (p, g) in preds.iter().zip(golds) {
            let mut all = true;
            for slot in 0..3 {
                if p[slot] == g[slot] {
                    slot_hits[slot] += 1;
                } else {
                    all = false;
                }
            }
            if all {
                full_hits += 1;
            }
        }
        let mut acc_at_1 = BTreeMap::new();
        for (slot, name) in ENTITY_NAMES.iter().enumerate() {
            acc_at_1.insert((*name).to_string(), slot_hits[slot] as f64 / n);
        }
        acc_at_1.insert("relationship".to_string(), full_hits as f64 / n);
        RecognitionReport { acc_at_1 }
    }
}

#[cfg(test)]
mod tests {

    use super::*;

    #[test]
    fn gradient_suite_passes() {
        let outcome = gradcheck_suite(23).unwrap();
        assert_eq!(outcome.cases, 100);
        assert!(outcome.passed, "{}", outcome.summary_line());
    }

    #[test]
    fn free_energy_suite_passes() {
        let outcome = free_energy_suite(23).unwrap();
        assert_eq!(outcome.cases, 100);
        assert!(outcome.passed, "{}", outcome.summary_line());
    }

    #[test]
    fn oracle_suites_pass() {
        for outcome in oracle_suites(23).unwrap() {
            assert_eq!(outcome.cases, 50);
            assert!(outcome.passed, "{}", outcome.summary_line());
        }
    }

    #[test]
    fn metrics_suite_is_exact() {
        let outcome = metrics_suite(23).unwrap();
        assert!(outcome.passed, "{}", outcome.summary_line());
        assert_eq!(outcome.worst, 0.0);
        assert_eq!(outcome.cases, 202);
    }

    #[test]
    fn summary_lines_name_the_verdict() {
        let outcome = SuiteOutcome::evaluate("demo", 3, 0.5, 0.1, "case 2".into());
        assert!(!outcome.passed);
        assert!(outcome.summary_line().contains("FAIL"));
        assert!(outcome.summary_line().contains("demo"));
    }
}

//! Learning by backpropagation through the unrolled mean-field updates.
//!
//! The loss of one instance is the negative log-likelihood of the gold labels
//! under the approximate marginals after a fixed number of passes:
//! `L = -sum_{t,k} ln q_{t,k}[gold_{t,k}]`. The whole computation — unary
//! projections, gated low-rank transitions, prior score maps, and every
//! update — is staged onto a reverse-mode tape, so gradients flow through the
//! inference procedure itself rather than through a surrogate objective.
//!
//! The staged forward pass reproduces [`run_mean_field`] arithmetic (same
//! update order, same term order), so the taped loss and the plain inference
//! path agree to floating-point noise; a test pins that agreement.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::{temporal_kernel, EnergyMode, EnergyModel, Projection};
use crate::error::{Error, Result};
use crate::graph::{GraphSpec, ObservationInstance};
use crate::inference::{InferenceOptions, Schedule};
use crate::rng::substream_indexed;
use crate::tape::{NodeId, Op, Tape};

/// First-order update rule used by [`train`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Classical momentum: `v <- 0.9 v + g`, `theta <- theta - lr * v`.
    SgdMomentum,
    /// Adaptive moments with decay rates `(0.9, 0.999)` and epsilon `1e-8`,
    /// with bias correction.
    AdaptiveMoment,
}

/// Knobs of [`train`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Pass count and schedule of the unrolled updates. `early_stop` must be
    /// `None`: learning differentiates a fixed unroll depth.
    pub inference: InferenceOptions,
    /// Seed of the shuffle and dropout substreams.
    pub seed: u64,
    /// Rescale each batch gradient to this L2 norm when it exceeds it.
    pub gradient_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::AdaptiveMoment,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 30,
            inference: InferenceOptions::default(),
            seed: 0,
            gradient_clip: None,
        }
    }
}

impl TrainConfig {
    /// Alternate preset: plain momentum with a shorter schedule and a deeper
    /// unroll.
    pub fn sgd_preset() -> Self {
        Self {
            optimizer: OptimizerKind::SgdMomentum,
            learning_rate: 5e-3,
            batch_size: 40,
            epochs: 5,
            inference: InferenceOptions { passes: 5, ..Default::default() },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidTrainConfig {
                reason: format!("learning rate {} must be finite and >= 0", self.learning_rate),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidTrainConfig { reason: "batch size must be >= 1".into() });
        }
        if let Some(c) = self.gradient_clip {
            if !(c > 0.0) {
                return Err(Error::InvalidTrainConfig {
                    reason: format!("gradient clip {c} must be > 0"),
                });
            }
        }
        check_unroll_opts(&self.inference)
    }
}

fn check_unroll_opts(opts: &InferenceOptions) -> Result<()> {
    opts.validate()?;
    if opts.early_stop.is_some() {
        return Err(Error::InvalidTrainConfig {
            reason: "learning unrolls a fixed number of passes; disable early_stop".into(),
        });
    }
    Ok(())
}

/// Loss value plus one gradient tensor per parameter tensor, aligned with
/// [`EnergyModel::named_tensors`] order.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub loss: f64,
    pub names: Vec<String>,
    pub tensors: Vec<Vec<f64>>,
}

impl GradientBundle {
    /// L2 norm over every gradient entry.
    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Inverted-dropout mask sampler: kept entries are scaled by `1/(1-rate)` so
/// inference needs no compensation.
struct DropoutSampler {
    rng: ChaCha20Rng,
    rate: f64,
}

impl DropoutSampler {
    fn mask(&mut self, n: usize) -> Vec<f64> {
        let keep = 1.0 - self.rate;
        (0..n)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect()
    }
}

/// Per-layer `(weight, bias)` leaf ids of one staged projection.
struct ProjLeaves {
    layers: Vec<(NodeId, NodeId)>,
}

fn take_proj(param_ids: &[NodeId], cursor: &mut usize, proj: &Projection) -> ProjLeaves {
    let mut layers = Vec::with_capacity(proj.layers.len());
    for _ in &proj.layers {
        let w = param_ids[*cursor];
        let b = param_ids[*cursor + 1];
        *cursor += 2;
        layers.push((w, b));
    }
    ProjLeaves { layers }
}

fn apply_projection(
    tape: &mut Tape,
    leaves: &ProjLeaves,
    proj: &Projection,
    x: NodeId,
    dropout: &mut Option<DropoutSampler>,
) -> NodeId {
    let n = leaves.layers.len();
    let mut cur = x;
    for (i, ((w, b), layer)) in leaves.layers.iter().zip(&proj.layers).enumerate() {
        cur = tape.push(Op::Affine {
            w: *w,
            b: *b,
            x: cur,
            out_dim: layer.out_dim,
            in_dim: layer.in_dim,
        });
        if i + 1 < n {
            cur = tape.push(Op::Relu { x: cur });
            if let Some(sampler) = dropout {
                let mask = sampler.mask(layer.out_dim);
                cur = tape.push(Op::MulMask { x: cur, mask });
            }
        }
    }
    cur
}

/// The staged unrolled computation: tape, parameter leaves in canonical
/// order, and the scalar loss node.
struct StagedLoss {
    tape: Tape,
    names: Vec<String>,
    param_ids: Vec<NodeId>,
    loss_id: NodeId,
}

fn edge_exists(mode: EnergyMode, k: usize, k2: usize, same_step: bool) -> bool {
    match mode {
        EnergyMode::Ueg => false,
        EnergyMode::Seg => same_step && k != k2,
        EnergyMode::Steg | EnergyMode::Gsteg => !(same_step && k == k2),
    }
}

/// Stage the full unrolled loss of one instance onto a fresh tape. The
/// staged arithmetic mirrors [`run_mean_field`]: same initialization, same
/// node order, same per-neighbor term order in each update.
fn build_unrolled_loss(
    model: &EnergyModel,
    inst: &ObservationInstance,
    opts: &InferenceOptions,
    mut dropout: Option<DropoutSampler>,
) -> Result<StagedLoss> {
    check_unroll_opts(opts)?;
    if inst.spec != *model.spec() {
        return Err(Error::SpecMismatch);
    }
    let gold = inst.gold.as_ref().ok_or(Error::MissingGold)?;
    gold.validate(model.spec())?;

    let spec: &GraphSpec = model.spec();
    let streams = spec.num_streams();
    let mode = model.mode();
    let halve = if model.config().halve_pairwise { 0.5 } else { 1.0 };
    let mut tape = Tape::new();

    // Parameter leaves in canonical order, then a cursor walk over the same
    // structure to recover which leaf is which.
    let named = model.named_tensors();
    let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
    let param_ids: Vec<NodeId> = named.iter().map(|(_, v)| tape.leaf((*v).clone())).collect();
    let views = model.projections();
    let mut cursor = 0;
    let unary_leaves: Vec<ProjLeaves> =
        views.unary.iter().map(|p| take_proj(&param_ids, &mut cursor, p)).collect();
    let compat_leaves: Vec<((usize, usize), NodeId)> = views
        .compat
        .keys()
        .map(|key| {
            let id = param_ids[cursor];
            cursor += 1;
            (*key, id)
        })
        .collect();
    let spatial_leaves: Vec<((usize, usize), (ProjLeaves, ProjLeaves))> = views
        .spatial
        .iter()
        .map(|(key, pair)| {
            let src = take_proj(&param_ids, &mut cursor, &pair.source);
            let tgt = take_proj(&param_ids, &mut cursor, &pair.target);
            (*key, (src, tgt))
        })
        .collect();
    let temporal_leaves: Vec<((usize, usize), (ProjLeaves, ProjLeaves))> = views
        .temporal
        .iter()
        .map(|(key, pair)| {
            let src = take_proj(&param_ids, &mut cursor, &pair.source);
            let tgt = take_proj(&param_ids, &mut cursor, &pair.target);
            (*key, (src, tgt))
        })
        .collect();
    let prior_leaves = views.prior_maps.map(|(u, v)| {
        let lu = take_proj(&param_ids, &mut cursor, u);
        let lv = take_proj(&param_ids, &mut cursor, v);
        (lu, lv)
    });
    debug_assert_eq!(cursor, param_ids.len(), "leaf walk must consume every tensor");

    let compat_id = |k: usize, k2: usize| -> NodeId {
        compat_leaves
            .iter()
            .find(|(key, _)| *key == (k, k2))
            .expect("compat table exists for this mode")
            .1
    };

    // Observation leaves and unary energies.
    let mut x_ids = vec![vec![0 as NodeId; streams]; spec.num_steps];
    let mut psi_ids = vec![vec![0 as NodeId; streams]; spec.num_steps];
    for (t, k) in spec.nodes() {
        x_ids[t][k] = tape.leaf(inst.feature(t, k).to_vec());
        psi_ids[t][k] = apply_projection(
            &mut tape,
            &unary_leaves[k],
            &views.unary[k],
            x_ids[t][k],
            &mut dropout,
        );
    }

    // Pairwise base tables per (source node, target stream, same-step flag),
    // kernel-free like the plain inference cache.
    let base_index =
        |t: usize, k: usize, k2: usize, same: bool| ((t * streams + k) * streams + k2) * 2 + same as usize;
    let mut base_ids: Vec<Option<NodeId>> = vec![None; spec.node_count() * streams * 2];
    for (t, k) in spec.nodes() {
        for k2 in 0..streams {
            for same_step in [false, true] {
                if !edge_exists(mode, k, k2, same_step) {
                    continue;
                }
                if !same_step && spec.num_steps == 1 {
                    continue;
                }
                let id = match mode {
                    EnergyMode::Ueg => unreachable!("no edges in unary-only mode"),
                    EnergyMode::Seg | EnergyMode::Steg => compat_id(k, k2),
                    EnergyMode::Gsteg => {
                        let source = if same_step { &views.spatial } else { &views.temporal };
                        let leaves = if same_step { &spatial_leaves } else { &temporal_leaves };
                        let pair = &source[&(k, k2)];
                        let (src_leaves, tgt_leaves) = &leaves
                            .iter()
                            .find(|(key, _)| *key == (k, k2))
                            .expect("gated pair exists")
                            .1;
                        let left = apply_projection(
                            &mut tape,
                            src_leaves,
                            &pair.source,
                            x_ids[t][k],
                            &mut dropout,
                        );
                        let right = apply_projection(
                            &mut tape,
                            tgt_leaves,
                            &pair.target,
                            x_ids[t][k],
                            &mut dropout,
                        );
                        tape.push(Op::LowRank {
                            left,
                            right,
                            rows: spec.label_sizes[k],
                            cols: spec.label_sizes[k2],
                            rank: model.config().rank,
                        })
                    }
                };
                base_ids[base_index(t, k, k2, same_step)] = Some(id);
            }
        }
    }

    // Prior outer tables per ordered stream pair.
    let prior_ids: Option<Vec<NodeId>> = match (&prior_leaves, model.config().prior.as_ref()) {
        (Some((lu, lv)), Some(prior)) => {
            let (u_proj, v_proj) = views.prior_maps.expect("prior maps exist");
            let mut u_vecs = Vec::with_capacity(streams);
            let mut v_vecs = Vec::with_capacity(streams);
            for (k, table) in prior.tables.iter().enumerate() {
                let mut u_parts = Vec::new();
                let mut v_parts = Vec::new();
                for y in 0..spec.label_sizes[k] {
                    let row = table[y * prior.dim..(y + 1) * prior.dim].to_vec();
                    let row_id = tape.leaf(row);
                    u_parts.push(apply_projection(&mut tape, lu, u_proj, row_id, &mut dropout));
                    v_parts.push(apply_projection(&mut tape, lv, v_proj, row_id, &mut dropout));
                }
                u_vecs.push(tape.push(Op::Concat { xs: u_parts }));
                v_vecs.push(tape.push(Op::Concat { xs: v_parts }));
            }
            let mut outers = Vec::with_capacity(streams * streams);
            for k in 0..streams {
                for k2 in 0..streams {
                    outers.push(tape.push(Op::Outer { u: u_vecs[k], v: v_vecs[k2] }));
                }
            }
            Some(outers)
        }
        _ => None,
    };

    // Initialization: q = softmax(-psi).
    let mut q_ids = vec![vec![0 as NodeId; streams]; spec.num_steps];
    for (t, k) in spec.nodes() {
        let neg = tape.push(Op::AddScaled { terms: vec![(psi_ids[t][k], -1.0)] });
        q_ids[t][k] = tape.push(Op::Softmax { x: neg });
    }

    // One update's score node for (t, k), reading marginals from `q_ids`.
    let stage_scores = |tape: &mut Tape, q_ids: &[Vec<NodeId>], t: usize, k: usize| -> Result<NodeId> {
        let mut terms = vec![(psi_ids[t][k], -1.0)];
        for (t2, k2) in spec.nodes() {
            if (t2, k2) == (t, k) {
                continue;
            }
            let qb = q_ids[t2][k2];
            let same = t == t2;
            // Outgoing direction: Phi_{(t,k),(t2,k2)} q_b.
            if let Some(base) = base_ids[base_index(t, k, k2, same)] {
                let kappa = temporal_kernel(t, t2, model.bandwidth())?;
                let mv = tape.push(Op::MatVec {
                    m: base,
                    v: qb,
                    rows: spec.label_sizes[k],
                    cols: spec.label_sizes[k2],
                });
                terms.push((mv, -halve * kappa));
                if let Some(priors) = &prior_ids {
                    let pv = tape.push(Op::MatVec {
                        m: priors[k * streams + k2],
                        v: qb,
                        rows: spec.label_sizes[k],
                        cols: spec.label_sizes[k2],
                    });
                    terms.push((pv, -halve));
                }
            }
            // Incoming direction: Phi_{(t2,k2),(t,k)}^T q_b.
            if let Some(base) = base_ids[base_index(t2, k2, k, same)] {
                let kappa = temporal_kernel(t2, t, model.bandwidth())?;
                let mtv = tape.push(Op::MatTVec {
                    m: base,
                    v: qb,
                    rows: spec.label_sizes[k2],
                    cols: spec.label_sizes[k],
                });
                terms.push((mtv, -halve * kappa));
                if let Some(priors) = &prior_ids {
                    let pv = tape.push(Op::MatTVec {
                        m: priors[k2 * streams + k],
                        v: qb,
                        rows: spec.label_sizes[k2],
                        cols: spec.label_sizes[k],
                    });
                    terms.push((pv, -halve));
                }
            }
        }
        Ok(tape.push(Op::AddScaled { terms }))
    };

    // Unroll the passes.
    let mut last_scores = vec![vec![None as Option<NodeId>; streams]; spec.num_steps];
    for _ in 0..opts.passes {
        match opts.schedule {
            Schedule::Sequential => {
                for (t, k) in spec.nodes() {
                    let s = stage_scores(&mut tape, &q_ids, t, k)?;
                    q_ids[t][k] = tape.push(Op::Softmax { x: s });
                    last_scores[t][k] = Some(s);
                }
            }
            Schedule::Parallel => {
                let old = q_ids.clone();
                for (t, k) in spec.nodes() {
                    let s = stage_scores(&mut tape, &old, t, k)?;
                    let soft = tape.push(Op::Softmax { x: s });
                    q_ids[t][k] = if opts.damping > 0.0 {
                        tape.push(Op::Blend { new: soft, old: old[t][k], damping: opts.damping })
                    } else {
                        soft
                    };
                }
            }
        }
    }

    // Loss: -sum ln q[gold]. Under the sequential schedule the final marginal
    // of each node is the softmax of its last update's scores, so the
    // log-probability comes from a numerically robust log-softmax; the
    // parallel schedule blends marginals, so it takes the log directly.
    let mut loss_terms = Vec::with_capacity(spec.node_count());
    for (t, k) in spec.nodes() {
        let g = gold.labels[t][k];
        let term = match opts.schedule {
            Schedule::Sequential => {
                let s = last_scores[t][k].expect("every node updated at least once");
                let logq = tape.push(Op::LogSoftmax { x: s });
                tape.push(Op::NegPick { x: logq, index: g })
            }
            Schedule::Parallel => {
                let logq = tape.push(Op::Ln { x: q_ids[t][k] });
                tape.push(Op::NegPick { x: logq, index: g })
            }
        };
        loss_terms.push(term);
    }
    let loss_id = tape.push(Op::SumAll { xs: loss_terms });

    Ok(StagedLoss { tape, names, param_ids, loss_id })
}

/// Negative log-likelihood of the gold labels under the unrolled mean-field
/// marginals (no dropout).
pub fn loss(
    model: &EnergyModel,
    inst: &ObservationInstance,
    opts: &InferenceOptions,
) -> Result<f64> {
    let staged = build_unrolled_loss(model, inst, opts, None)?;
    Ok(staged.tape.scalar(staged.loss_id))
}

/// Loss and parameter gradients of one instance (no dropout).
pub fn gradients(
    model: &EnergyModel,
    inst: &ObservationInstance,
    opts: &InferenceOptions,
) -> Result<GradientBundle> {
    gradients_inner(model, inst, opts, None, (0, 0))
}

fn gradients_inner(
    model: &EnergyModel,
    inst: &ObservationInstance,
    opts: &InferenceOptions,
    dropout: Option<DropoutSampler>,
    at: (usize, usize),
) -> Result<GradientBundle> {
    let staged = build_unrolled_loss(model, inst, opts, dropout)?;
    let loss = staged.tape.scalar(staged.loss_id);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { batch: at.0, instance: at.1 });
    }
    let mut grads = staged.tape.backward(staged.loss_id);
    let mut tensors = Vec::with_capacity(staged.param_ids.len());
    for (id, name) in staged.param_ids.iter().zip(&staged.names) {
        let g = std::mem::take(&mut grads[*id]);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { name: name.clone() });
        }
        tensors.push(g);
    }
    Ok(GradientBundle { loss, names: staged.names, tensors })
}

/// Result of [`finite_diff_check`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FiniteDiffReport {
    /// Worst relative error `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
    pub max_rel_error: f64,
    /// Name of the tensor holding the worst entry.
    pub worst: String,
    /// Number of scalar parameters checked.
    pub checked: usize,
}

/// Compare every analytic gradient entry against a central finite difference
/// of the taped loss with step `epsilon`.
pub fn finite_diff_check(
    model: &EnergyModel,
    inst: &ObservationInstance,
    opts: &InferenceOptions,
    epsilon: f64,
) -> Result<FiniteDiffReport> {
    let bundle = gradients(model, inst, opts)?;
    let mut probe = model.clone();
    let mut max_rel_error = 0.0f64;
    let mut worst = String::new();
    let mut checked = 0;
    for (ti, name) in bundle.names.iter().enumerate() {
        for i in 0..bundle.tensors[ti].len() {
            let orig = {
                let mut tensors = probe.named_tensors_mut();
                let v = &mut tensors[ti].1[i];
                let orig = *v;
                *v = orig + epsilon;
                orig
            };
            let plus = loss(&probe, inst, opts)?;
            probe.named_tensors_mut()[ti].1[i] = orig - epsilon;
            let minus = loss(&probe, inst, opts)?;
            probe.named_tensors_mut()[ti].1[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let analytic = bundle.tensors[ti][i];
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
            checked += 1;
            if rel > max_rel_error {
                max_rel_error = rel;
                worst = format!("{name}[{i}]");
            }
        }
    }
    Ok(FiniteDiffReport { max_rel_error, worst, checked })
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub batch: usize,
    /// Mean instance loss of the batch.
    pub loss: f64,
    /// Pre-clip L2 norm of the mean batch gradient.
    pub grad_norm: f64,
    /// Wall-clock duration of the batch. Diagnostic only — never part of any
    /// deterministic output.
    pub wall_ms: u64,
}

/// Optimizer accumulators, aligned with the canonical tensor order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    /// Momentum (velocity) or first-moment estimates.
    pub first: Vec<Vec<f64>>,
    /// Second-moment estimates; empty for plain momentum.
    pub second: Vec<Vec<f64>>,
}

impl OptimizerState {
    fn new(kind: OptimizerKind, shapes: &[usize]) -> Self {
        let zeros: Vec<Vec<f64>> = shapes.iter().map(|&n| vec![0.0; n]).collect();
        let second = match kind {
            OptimizerKind::SgdMomentum => Vec::new(),
            OptimizerKind::AdaptiveMoment => zeros.clone(),
        };
        Self { kind, step: 0, first: zeros, second }
    }

    fn apply(&mut self, model: &mut EnergyModel, grads: &[Vec<f64>], lr: f64) {
        self.step += 1;
        let mut tensors = model.named_tensors_mut();
        match self.kind {
            OptimizerKind::SgdMomentum => {
                for (ti, (_, tensor)) in tensors.iter_mut().enumerate() {
                    for i in 0..tensor.len() {
                        let v = 0.9 * self.first[ti][i] + grads[ti][i];
                        self.first[ti][i] = v;
                        tensor[i] -= lr * v;
                    }
                }
            }
            OptimizerKind::AdaptiveMoment => {
                let (b1, b2, eps) = (0.9_f64, 0.999_f64, 1e-8);
                let c1 = 1.0 - b1.powi(self.step as i32);
                let c2 = 1.0 - b2.powi(self.step as i32);
                for (ti, (_, tensor)) in tensors.iter_mut().enumerate() {
                    for i in 0..tensor.len() {
                        let g = grads[ti][i];
                        let m = b1 * self.first[ti][i] + (1.0 - b1) * g;
                        let s = b2 * self.second[ti][i] + (1.0 - b2) * g * g;
                        self.first[ti][i] = m;
                        self.second[ti][i] = s;
                        tensor[i] -= lr * (m / c1) / ((s / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Everything [`train`] reports back.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean instance loss per epoch, in epoch order.
    pub epoch_losses: Vec<f64>,
    pub records: Vec<LogRecord>,
    pub optimizer: OptimizerState,
}

/// Mini-batch training: shuffle per epoch from a named substream, batch
/// gradients averaged in deterministic order (instances are processed in
/// parallel, reduced sequentially), optional norm clipping, first-order
/// update. Dropout masks, when the model configures a rate, come from a
/// dropout substream indexed by the instance's position in the epoch, so runs
/// are reproducible regardless of thread count.
pub fn train(
    model: &mut EnergyModel,
    data: &[ObservationInstance],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for inst in data {
        if inst.gold.is_none() {
            return Err(Error::MissingGold);
        }
    }

    let shapes: Vec<usize> = model.named_tensors().iter().map(|(_, v)| v.len()).collect();
    let mut state = OptimizerState::new(config.optimizer, &shapes);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut records = Vec::new();
    let n = data.len();
    let dropout_rate = model.config().dropout;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut substream_indexed(config.seed, "shuffle", epoch as u64));
        let mut epoch_loss_sum = 0.0;

        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            let started = Instant::now();
            let batch_offset = batch * config.batch_size;
            let bundles: Vec<GradientBundle> = chunk
                .par_iter()
                .enumerate()
                .map(|(j, &idx)| {
                    let dropout = dropout_rate.map(|rate| DropoutSampler {
                        rng: substream_indexed(
                            config.seed,
                            "dropout",
                            (epoch * n + batch_offset + j) as u64,
                        ),
                        rate,
                    });
                    gradients_inner(model, &data[idx], &config.inference, dropout, (batch, j))
                })
                .collect::<Result<Vec<_>>>()?;

            // Sequential mean in batch order: deterministic reduction.
            let mut mean = vec![vec![0.0; 0]; shapes.len()];
            for (ti, &len) in shapes.iter().enumerate() {
                mean[ti] = vec![0.0; len];
            }
            let mut loss_sum = 0.0;
            for bundle in &bundles {
                loss_sum += bundle.loss;
                for (acc, g) in mean.iter_mut().zip(&bundle.tensors) {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v;
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            for acc in mean.iter_mut() {
                for a in acc.iter_mut() {
                    *a *= scale;
                }
            }
            let mean_loss = loss_sum * scale;
            epoch_loss_sum += loss_sum;

            let grad_norm = mean
                .iter()
                .flat_map(|t| t.iter())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if let Some(clip) = config.gradient_clip {
                if grad_norm > clip {
                    let s = clip / grad_norm;
                    for acc in mean.iter_mut() {
                        for a in acc.iter_mut() {
                            *a *= s;
                        }
                    }
                }
            }

            state.apply(model, &mean, config.learning_rate);
            records.push(LogRecord {
                epoch,
                batch,
                loss: mean_loss,
                grad_norm,
                wall_ms: started.elapsed().as_millis() as u64,
            });
        }
        epoch_losses.push(epoch_loss_sum / n as f64);
    }

    Ok(TrainReport { epoch_losses, records, optimizer: state })
}

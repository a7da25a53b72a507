//! Synthetic data with a planted, context-switched coupling structure.
//!
//! A hidden context `c` (uniform over `num_contexts` values) selects a
//! rank-1 coupling structure over the label grid: same-step tables for every
//! ordered stream pair and adjacent-step tables within each stream. With two
//! or more contexts, consecutive contexts apply *opposite signs* to one
//! shared pattern per pair, so the context-averaged coupling vanishes (for
//! even context counts) and a context-blind compatibility table earns
//! nothing from it. Labels are drawn exactly from the resulting Gibbs
//! distribution by enumeration; observations carry a noisy one-hot encoding
//! of each node's label concatenated with an exact, scaled one-hot encoding
//! of the context.
//!
//! Because the couplings are readable from the observation (through the
//! context block) but invisible to any fixed compatibility matrix, gated
//! pairwise models can exploit them while ungated ones cannot — and the exact
//! posterior computed here by enumeration gives the Bayes ceiling that caps
//! every model.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Assignment, GraphSpec, ObservationInstance, DEFAULT_ENUMERATION_CAP};
use crate::numeric::logsumexp;
use crate::rng::{substream, substream_indexed};

/// Magnitude of the planted rank-1 couplings: each table is
/// `COUPLING_SCALE * s t^T` with `s`, `t` uniform over {-1, +1}. Every entry
/// has the same magnitude, so the two sign-flipped contexts mix to a
/// pairwise distribution with no label-pair preference left — a
/// context-blind compatibility table reads nothing from it, while the
/// context block hands a gated model the whole sign pattern.
const COUPLING_SCALE: f64 = 1.0;

/// Shape and knobs of one synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_steps: usize,
    pub label_sizes: Vec<usize>,
    /// Number of hidden contexts, each with its own coupling structure.
    pub num_contexts: usize,
    /// Scale of the exact context one-hot block in every feature vector.
    pub context_strength: f64,
    /// Standard deviation of the Gaussian noise on the label one-hot block.
    pub noise_std: f64,
    pub num_instances: usize,
    pub seed: u64,
}

impl SynthConfig {
    /// The grid spec of generated instances: feature dimension is
    /// `|Y^k| + num_contexts` (noisy label block plus exact context block).
    pub fn spec(&self) -> Result<GraphSpec> {
        let dims = self.label_sizes.iter().map(|s| s + self.num_contexts).collect();
        GraphSpec::new(self.num_steps, self.label_sizes.clone(), dims)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec()?;
        if self.num_contexts == 0 {
            return Err(Error::InvalidSynthConfig {
                reason: "at least one context is required".into(),
            });
        }
        if !self.context_strength.is_finite() || self.context_strength < 0.0 {
            return Err(Error::InvalidSynthConfig {
                reason: format!("context strength {} must be finite and >= 0", self.context_strength),
            });
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::InvalidSynthConfig {
                reason: format!("noise std {} must be finite and >= 0", self.noise_std),
            });
        }
        Ok(())
    }
}

/// The generating process: per-context coupling tables plus the exact joint
/// distribution of labels under each context, tabulated by enumeration.
pub struct PlantedModel {
    config: SynthConfig,
    spec: GraphSpec,
    /// `spatial[c][k * K + k2]` (`k != k2`): same-step table, `|Y^k| x |Y^k2|`.
    spatial: Vec<Vec<Option<Vec<f64>>>>,
    /// `temporal[c][k]`: adjacent-step table within stream `k`, `|Y^k| x |Y^k|`.
    temporal: Vec<Vec<Vec<f64>>>,
    /// `log_probs[c][idx]`: exact log-probability of the `idx`-th assignment.
    log_probs: Vec<Vec<f64>>,
    probs: Vec<Vec<f64>>,
}

fn rank_one_table<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Vec<f64> {
    let sign = |rng: &mut R| if rng.random::<bool>() { 1.0 } else { -1.0 };
    let u: Vec<f64> = (0..rows).map(|_| sign(rng)).collect();
    let v: Vec<f64> = (0..cols).map(|_| sign(rng)).collect();
    let mut out = Vec::with_capacity(rows * cols);
    for a in &u {
        for b in &v {
            out.push(COUPLING_SCALE * a * b);
        }
    }
    out
}

/// Decode the `idx`-th assignment in enumeration order (last node varies
/// fastest, nodes in lexicographic `(t, k)` order).
pub(crate) fn decode_assignment(spec: &GraphSpec, mut idx: usize) -> Assignment {
    let streams = spec.num_streams();
    let mut flat = vec![0usize; spec.node_count()];
    for node in (0..spec.node_count()).rev() {
        let size = spec.label_sizes[node % streams];
        flat[node] = idx % size;
        idx /= size;
    }
    Assignment::new(flat.chunks(streams).map(|c| c.to_vec()).collect())
}

impl PlantedModel {
    pub fn new(config: SynthConfig) -> Result<Self> {
        config.validate()?;
        let spec = config.spec()?;
        let states = spec.joint_state_count();
        if states > DEFAULT_ENUMERATION_CAP as u128 {
            return Err(Error::StateSpaceTooLarge { states, cap: DEFAULT_ENUMERATION_CAP });
        }
        let states = states as usize;
        let streams = spec.num_streams();

        let mut rng = substream(config.seed, "synth-structure");
        let mut base_spatial = vec![None; streams * streams];
        for k in 0..streams {
            for k2 in 0..streams {
                if k == k2 {
                    continue;
                }
                base_spatial[k * streams + k2] = Some(rank_one_table(
                    spec.label_sizes[k],
                    spec.label_sizes[k2],
                    &mut rng,
                ));
            }
        }
        let base_temporal: Vec<Vec<f64>> = (0..streams)
            .map(|k| rank_one_table(spec.label_sizes[k], spec.label_sizes[k], &mut rng))
            .collect();

        let flip = |table: &[f64], sign: f64| table.iter().map(|v| sign * v).collect::<Vec<f64>>();
        let mut spatial = Vec::with_capacity(config.num_contexts);
        let mut temporal = Vec::with_capacity(config.num_contexts);
        for c in 0..config.num_contexts {
            let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
            spatial.push(
                base_spatial
                    .iter()
                    .map(|t| t.as_ref().map(|t| flip(t, sign)))
                    .collect(),
            );
            temporal.push(base_temporal.iter().map(|t| flip(t, sign)).collect());
        }

        let mut model = Self {
            config,
            spec,
            spatial,
            temporal,
            log_probs: Vec::new(),
            probs: Vec::new(),
        };
        let mut neg_energies = vec![Vec::with_capacity(states); model.config.num_contexts];
        for idx in 0..states {
            let y = decode_assignment(&model.spec, idx);
            for (c, col) in neg_energies.iter_mut().enumerate() {
                col.push(-model.energy(c, &y));
            }
        }
        for col in neg_energies {
            let lz = logsumexp(&col);
            let lp: Vec<f64> = col.iter().map(|v| v - lz).collect();
            model.probs.push(lp.iter().map(|v| v.exp()).collect());
            model.log_probs.push(lp);
        }
        Ok(model)
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    pub fn spec(&self) -> &GraphSpec {
        &self.spec
    }

    /// Planted energy of a full assignment under context `c`: same-step terms
    /// over every ordered stream pair plus adjacent-step terms within each
    /// stream.
    fn energy(&self, c: usize, y: &Assignment) -> f64 {
        let streams = self.spec.num_streams();
        let mut e = 0.0;
        for t in 0..self.spec.num_steps {
            for k in 0..streams {
                for k2 in 0..streams {
                    if k == k2 {
                        continue;
                    }
                    let table = self.spatial[c][k * streams + k2].as_ref().unwrap();
                    e += table[y.labels[t][k] * self.spec.label_sizes[k2] + y.labels[t][k2]];
                }
            }
        }
        for t in 0..self.spec.num_steps.saturating_sub(1) {
            for k in 0..streams {
                let table = &self.temporal[c][k];
                e += table[y.labels[t][k] * self.spec.label_sizes[k] + y.labels[t + 1][k]];
            }
        }
        e
    }

    /// Draw one instance: context uniform, labels exactly from the context's
    /// Gibbs table, features as noisy label one-hots plus the exact context
    /// block. The noise draws happen regardless of `noise_std`, so datasets
    /// with different noise levels but the same seed share gold labels.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> ObservationInstance {
        let c = rng.random_range(0..self.config.num_contexts);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut idx = self.probs[c].len() - 1;
        for (i, p) in self.probs[c].iter().enumerate() {
            acc += p;
            if u < acc {
                idx = i;
                break;
            }
        }
        let gold = decode_assignment(&self.spec, idx);

        let mut features = Vec::with_capacity(self.spec.num_steps);
        for t in 0..self.spec.num_steps {
            let mut row = Vec::with_capacity(self.spec.num_streams());
            for k in 0..self.spec.num_streams() {
                let size = self.spec.label_sizes[k];
                let mut x = Vec::with_capacity(size + self.config.num_contexts);
                for d in 0..size {
                    let clean = if d == gold.labels[t][k] { 1.0 } else { 0.0 };
                    let z: f64 = StandardNormal.sample(rng);
                    x.push(clean + self.config.noise_std * z);
                }
                for d in 0..self.config.num_contexts {
                    x.push(if d == c { self.config.context_strength } else { 0.0 });
                }
                row.push(x);
            }
            features.push(row);
        }
        let mut inst = ObservationInstance::new(self.spec.clone(), features, Some(gold))
            .expect("generated instance is well-formed");
        inst.meta.insert("context".into(), serde_json::Value::from(c as u64));
        inst
    }

    /// Contexts whose exact block matches the instance's context features at
    /// every node. Falls back to *all* contexts when none matches (data not
    /// from this generator), which keeps the posterior well-defined.
    fn admissible_contexts(&self, inst: &ObservationInstance) -> Vec<usize> {
        let beta = self.config.context_strength;
        let mut out = Vec::new();
        'context: for c in 0..self.config.num_contexts {
            for (t, k) in self.spec.nodes() {
                let x = inst.feature(t, k);
                let ctx = &x[self.spec.label_sizes[k]..];
                for (d, v) in ctx.iter().enumerate() {
                    let expect = if d == c { beta } else { 0.0 };
                    if (v - expect).abs() > 1e-9 {
                        continue 'context;
                    }
                }
            }
            out.push(c);
        }
        if out.is_empty() {
            (0..self.config.num_contexts).collect()
        } else {
            out
        }
    }

    /// Log-likelihood of the label blocks given a full assignment, up to an
    /// assignment-independent constant.
    fn label_log_likelihood(&self, inst: &ObservationInstance, y: &Assignment) -> f64 {
        let sigma = self.config.noise_std;
        let mut ll = 0.0;
        for (t, k) in self.spec.nodes() {
            let x = &inst.feature(t, k)[..self.spec.label_sizes[k]];
            if sigma == 0.0 {
                for (d, v) in x.iter().enumerate() {
                    let clean = if d == y.labels[t][k] { 1.0 } else { 0.0 };
                    if (v - clean).abs() > 1e-12 {
                        return f64::NEG_INFINITY;
                    }
                }
            } else {
                for (d, v) in x.iter().enumerate() {
                    let clean = if d == y.labels[t][k] { 1.0 } else { 0.0 };
                    let r = v - clean;
                    ll -= r * r / (2.0 * sigma * sigma);
                }
            }
        }
        ll
    }

    /// Exact per-node posterior marginals `P(y_t^k | X)` by enumeration over
    /// contexts and joint assignments.
    pub fn posterior_marginals(&self, inst: &ObservationInstance) -> Result<Vec<Vec<Vec<f64>>>> {
        if inst.spec != self.spec {
            return Err(Error::SpecMismatch);
        }
        let contexts = self.admissible_contexts(inst);
        let states = self.probs[0].len();

        let mut log_weights = Vec::with_capacity(contexts.len() * states);
        let mut assignments = Vec::with_capacity(states);
        for idx in 0..states {
            let y = decode_assignment(&self.spec, idx);
            let ll = self.label_log_likelihood(inst, &y);
            for &c in &contexts {
                log_weights.push(self.log_probs[c][idx] + ll);
            }
            assignments.push(y);
        }
        let total = logsumexp(&log_weights);
        if !total.is_finite() {
            return Err(Error::Config(
                "degenerate posterior: no assignment explains the observation".into(),
            ));
        }

        let mut values: Vec<Vec<Vec<f64>>> = (0..self.spec.num_steps)
            .map(|_| self.spec.label_sizes.iter().map(|&s| vec![0.0; s]).collect())
            .collect();
        let mut w = 0;
        for y in &assignments {
            for _ in &contexts {
                let p = (log_weights[w] - total).exp();
                w += 1;
                if p == 0.0 {
                    continue;
                }
                for (t, k) in self.spec.nodes() {
                    values[t][k][y.labels[t][k]] += p;
                }
            }
        }
        Ok(values)
    }

    /// Bayes-optimal predictions (posterior marginal argmax per node) scored
    /// against the instances' gold labels.
    pub fn bayes_accuracy_on(&self, data: &[ObservationInstance]) -> Result<AccuracyReport> {
        let mut preds = Vec::with_capacity(data.len());
        let mut golds = Vec::with_capacity(data.len());
        for inst in data {
            let gold = inst.gold.clone().ok_or(Error::MissingGold)?;
            let post = self.posterior_marginals(inst)?;
            let labels = post
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|dist| {
                            let mut best = 0;
                            for (i, v) in dist.iter().enumerate() {
                                if *v > dist[best] {
                                    best = i;
                                }
                            }
                            best
                        })
                        .collect()
                })
                .collect();
            preds.push(Assignment::new(labels));
            golds.push(gold);
        }
        accuracy_of_predictions(&self.spec, &preds, &golds)
    }
}

/// Per-node, per-stream, and per-step-conjunction accuracies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccuracyReport {
    /// Fraction of nodes labeled correctly.
    pub per_node: f64,
    /// Per-stream fraction of correct nodes.
    pub per_stream: Vec<f64>,
    /// Fraction of steps where *every* stream is correct.
    pub joint_steps: f64,
    /// Number of instances scored.
    pub count: usize,
}

/// Score predicted assignments against gold assignments.
pub fn accuracy_of_predictions(
    spec: &GraphSpec,
    preds: &[Assignment],
    golds: &[Assignment],
) -> Result<AccuracyReport> {
    if preds.len() != golds.len() {
        return Err(Error::RecognitionCountMismatch { got: preds.len(), expected: golds.len() });
    }
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let streams = spec.num_streams();
    let mut node_hits = 0usize;
    let mut stream_hits = vec![0usize; streams];
    let mut joint_hits = 0usize;
    for (p, g) in preds.iter().zip(golds) {
        p.validate(spec)?;
        g.validate(spec)?;
        for t in 0..spec.num_steps {
            let mut all = true;
            for k in 0..streams {
                if p.labels[t][k] == g.labels[t][k] {
                    node_hits += 1;
                    stream_hits[k] += 1;
                } else {
                    all = false;
                }
            }
            if all {
                joint_hits += 1;
            }
        }
    }
    let steps = (preds.len() * spec.num_steps) as f64;
    Ok(AccuracyReport {
        per_node: node_hits as f64 / (steps * streams as f64),
        per_stream: stream_hits.iter().map(|&h| h as f64 / steps).collect(),
        joint_steps: joint_hits as f64 / steps,
        count: preds.len(),
    })
}

/// Generate the configured number of instances; instance `i` comes entirely
/// from the indexed `synth-instance` substream, so any prefix of the dataset
/// is stable under changes to `num_instances`.
pub fn generate_dataset(config: &SynthConfig) -> Result<Vec<ObservationInstance>> {
    let planted = PlantedModel::new(config.clone())?;
    Ok((0..config.num_instances)
        .map(|i| {
            let mut rng = substream_indexed(config.seed, "synth-instance", i as u64);
            planted.sample(&mut rng)
        })
        .collect())
}

fn bayes_rng(seed: u64, index: u64) -> ChaCha20Rng {
    substream_indexed(seed, "bayes", index)
}

/// Monte-Carlo estimate of the Bayes-optimal accuracy: fresh held-out draws
/// (disjoint from every dataset substream), scored with the exact posterior.
pub fn bayes_accuracy(config: &SynthConfig, draws: usize) -> Result<AccuracyReport> {
    if draws == 0 {
        return Err(Error::InvalidSynthConfig { reason: "bayes estimate needs draws >= 1".into() });
    }
    let planted = PlantedModel::new(config.clone())?;
    let data: Vec<ObservationInstance> = (0..draws)
        .map(|i| planted.sample(&mut bayes_rng(config.seed, i as u64)))
        .collect();
    planted.bayes_accuracy_on(&data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::enumerate_assignments;

    fn base_config() -> SynthConfig {
        SynthConfig {
            num_steps: 2,
            label_sizes: vec![2, 3],
            num_contexts: 2,
            context_strength: 1.5,
            noise_std: 0.5,
            num_instances: 20,
            seed: 7,
        }
    }

    #[test]
    fn decode_matches_enumeration_order() {
        let spec = GraphSpec::new(2, vec![2, 3], vec![3, 4]).unwrap();
        for (idx, y) in enumerate_assignments(&spec).unwrap().enumerate() {
            assert_eq!(decode_assignment(&spec, idx), y, "index {idx}");
        }
    }

    #[test]
    fn noiseless_posterior_is_exact_recovery() {
        let config = SynthConfig { noise_std: 0.0, ..base_config() };
        let report = bayes_accuracy(&config, 40).unwrap();
        assert_eq!(report.per_node, 1.0);
        assert_eq!(report.joint_steps, 1.0);
        for s in &report.per_stream {
            assert_eq!(*s, 1.0);
        }
    }

    #[test]
    fn overwhelming_noise_on_a_lone_binary_node_is_near_chance() {
        // One node, two labels, no couplings: the posterior reduces to a
        // two-way Gaussian test whose accuracy at sigma = 50 is ~0.5056.
        let config = SynthConfig {
            num_steps: 1,
            label_sizes: vec![2],
            num_contexts: 1,
            context_strength: 0.0,
            noise_std: 50.0,
            num_instances: 0,
            seed: 3,
        };
        let report = bayes_accuracy(&config, 2000).unwrap();
        assert!(
            (report.per_node - 0.5).abs() < 0.04,
            "accuracy {} too far from chance",
            report.per_node
        );
    }

    #[test]
    fn empirical_gold_frequencies_match_the_gibbs_table() {
        let config = SynthConfig {
            num_steps: 1,
            label_sizes: vec![2, 2],
            num_contexts: 1,
            context_strength: 1.0,
            noise_std: 0.5,
            num_instances: 8000,
            seed: 11,
        };
        let planted = PlantedModel::new(config.clone()).unwrap();
        let data = generate_dataset(&config).unwrap();
        let mut counts = vec![0usize; 4];
        for inst in &data {
            let y = inst.gold.as_ref().unwrap();
            counts[y.labels[0][0] * 2 + y.labels[0][1]] += 1;
        }
        for (idx, &count) in counts.iter().enumerate() {
            let want = planted.probs[0][idx];
            let got = count as f64 / config.num_instances as f64;
            // 3+ standard errors at n = 8000.
            assert!(
                (got - want).abs() < 0.025,
                "state {idx}: empirical {got} vs exact {want}"
            );
        }
    }

    #[test]
    fn datasets_are_deterministic_and_context_block_is_exact() {
        let config = base_config();
        let a = generate_dataset(&config).unwrap();
        let b = generate_dataset(&config).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.gold, y.gold);
            for (t, k) in x.spec.nodes() {
                let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(x.feature(t, k)), bits(y.feature(t, k)));
            }
        }

        for inst in &a {
            let c = inst.meta["context"].as_u64().unwrap() as usize;
            for (t, k) in inst.spec.nodes() {
                let x = inst.feature(t, k);
                let ctx = &x[inst.spec.label_sizes[k]..];
                for (d, v) in ctx.iter().enumerate() {
                    let expect = if d == c { config.context_strength } else { 0.0 };
                    assert_eq!(*v, expect, "context block must be exact");
                }
            }
        }
        // With noise, the label block differs from a pure one-hot somewhere.
        let any_noisy = a.iter().any(|inst| {
            let x = inst.feature(0, 0);
            x[..2].iter().all(|v| *v != 0.0 && *v != 1.0)
        });
        assert!(any_noisy);
    }

    #[test]
    fn posterior_marginals_are_normalized() {
        let config = base_config();
        let planted = PlantedModel::new(config.clone()).unwrap();
        let data = generate_dataset(&config).unwrap();
        for inst in data.iter().take(5) {
            let post = planted.posterior_marginals(inst).unwrap();
            for (t, k) in planted.spec().nodes() {
                let sum: f64 = post[t][k].iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "node ({t},{k}) sums to {sum}");
            }
        }
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        assert!(matches!(
            SynthConfig { num_contexts: 0, ..base_config() }.validate(),
            Err(Error::InvalidSynthConfig { .. })
        ));
        assert!(matches!(
            SynthConfig { noise_std: -1.0, ..base_config() }.validate(),
            Err(Error::InvalidSynthConfig { .. })
        ));
        assert!(matches!(
            SynthConfig { context_strength: f64::NAN, ..base_config() }.validate(),
            Err(Error::InvalidSynthConfig { .. })
        ));
        assert!(SynthConfig { label_sizes: vec![1], ..base_config() }.validate().is_err());
        let huge = SynthConfig {
            num_steps: 1,
            label_sizes: vec![4; 10],
            ..base_config()
        };
        assert!(matches!(
            PlantedModel::new(huge),
            Err(Error::StateSpaceTooLarge { .. })
        ));
    }

    #[test]
    fn accuracy_of_predictions_counts_conjunctions() {
        let spec = GraphSpec::new(2, vec![2, 2], vec![3, 3]).unwrap();
        let golds = vec![Assignment::new(vec![vec![0, 1], vec![1, 0]])];
        let preds = vec![Assignment::new(vec![vec![0, 1], vec![1, 1]])];
        let r = accuracy_of_predictions(&spec, &preds, &golds).unwrap();
        assert!((r.per_node - 0.75).abs() < 1e-12);
        assert!((r.joint_steps - 0.5).abs() < 1e-12);
        assert!((r.per_stream[0] - 1.0).abs() < 1e-12);
        assert!((r.per_stream[1] - 0.5).abs() < 1e-12);
        assert!(matches!(
            accuracy_of_predictions(&spec, &preds, &[]),
            Err(Error::RecognitionCountMismatch { .. })
        ));
    }
}

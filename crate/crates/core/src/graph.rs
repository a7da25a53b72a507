//! Graph-shaped data: the spatio-temporal label grid, observation instances,
//! label assignments, and video chunking.
//!
//! An instance is a `T x K` grid of nodes — `T` time steps by `K` label
//! streams. Node `(t, k)` carries a dense feature vector and (for supervised
//! data) a gold label from stream `k`'s label set. The grid is fully
//! connected: every ordered pair of distinct nodes participates in the
//! pairwise energy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on the joint state space for exact enumeration.
pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

/// Shape of the label grid: stream count, step count, per-stream label-set
/// sizes and feature dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSpec {
    /// Number of time steps `T`.
    pub num_steps: usize,
    /// Per-stream label-set sizes, length `K`.
    pub label_sizes: Vec<usize>,
    /// Per-stream feature dimensions, length `K`.
    pub feature_dims: Vec<usize>,
}

impl GraphSpec {
    pub fn new(num_steps: usize, label_sizes: Vec<usize>, feature_dims: Vec<usize>) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::InvalidSpec { reason: "need at least one time step".into() });
        }
        if label_sizes.is_empty() {
            return Err(Error::InvalidSpec { reason: "need at least one label stream".into() });
        }
        if label_sizes.len() != feature_dims.len() {
            return Err(Error::InvalidSpec {
                reason: format!(
                    "label_sizes has {} streams but feature_dims has {}",
                    label_sizes.len(),
                    feature_dims.len()
                ),
            });
        }
        if let Some(k) = label_sizes.iter().position(|&s| s < 2) {
            return Err(Error::InvalidSpec {
                reason: format!("stream {k} has label-set size {} (< 2)", label_sizes[k]),
            });
        }
        if let Some(k) = feature_dims.iter().position(|&d| d == 0) {
            return Err(Error::InvalidSpec { reason: format!("stream {k} has feature dimension 0") });
        }
        Ok(Self { num_steps, label_sizes, feature_dims })
    }

    /// Number of label streams `K`.
    pub fn num_streams(&self) -> usize {
        self.label_sizes.len()
    }

    /// Total node count `T * K`.
    pub fn node_count(&self) -> usize {
        self.num_steps * self.num_streams()
    }

    /// Nodes in lexicographic `(t, k)` order — the canonical visitation order.
    pub fn nodes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let k = self.num_streams();
        (0..self.num_steps).flat_map(move |t| (0..k).map(move |s| (t, s)))
    }

    /// Size of the joint label space, `prod_k |Y^k| ^ T`, without overflow.
    pub fn joint_state_count(&self) -> u128 {
        let mut n: u128 = 1;
        for _ in 0..self.num_steps {
            for &s in &self.label_sizes {
                n = n.saturating_mul(s as u128);
            }
        }
        n
    }
}

/// A full labeling of the grid: `labels[t][k]` is node `(t, k)`'s label index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub labels: Vec<Vec<usize>>,
}

impl Assignment {
    pub fn new(labels: Vec<Vec<usize>>) -> Self {
        Self { labels }
    }

    /// Check shape and label ranges against `spec`.
    pub fn validate(&self, spec: &GraphSpec) -> Result<()> {
        let streams = spec.num_streams();
        if self.labels.len() != spec.num_steps
            || self.labels.iter().any(|row| row.len() != streams)
        {
            return Err(Error::AssignmentShapeMismatch {
                expected_steps: spec.num_steps,
                expected_streams: streams,
                got_steps: self.labels.len(),
                got_streams: self.labels.first().map_or(0, |r| r.len()),
            });
        }
        for (t, row) in self.labels.iter().enumerate() {
            for (k, &label) in row.iter().enumerate() {
                if label >= spec.label_sizes[k] {
                    return Err(Error::LabelOutOfRange { t, k, label, size: spec.label_sizes[k] });
                }
            }
        }
        Ok(())
    }
}

/// One observed instance: features per node, optional gold labels, free-form
/// metadata (video id, chunk range, trajectory references, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationInstance {
    pub spec: GraphSpec,
    /// `features[t][k]` is node `(t, k)`'s dense feature vector.
    pub features: Vec<Vec<Vec<f64>>>,
    pub gold: Option<Assignment>,
    #[serde(default)]
    pub meta: serde_json::Map<String, serde_json::Value>,
}

impl ObservationInstance {
    pub fn new(
        spec: GraphSpec,
        features: Vec<Vec<Vec<f64>>>,
        gold: Option<Assignment>,
    ) -> Result<Self> {
        let inst = Self { spec, features, gold, meta: serde_json::Map::new() };
        validate_instance(&inst)?;
        Ok(inst)
    }

    pub fn feature(&self, t: usize, k: usize) -> &[f64] {
        &self.features[t][k]
    }
}

/// Check an instance's shape, finiteness, and gold-label ranges.
///
/// Idempotent: validating an already-valid instance changes nothing and
/// succeeds again.
pub fn validate_instance(inst: &ObservationInstance) -> Result<()> {
    let spec = &inst.spec;
    let streams = spec.num_streams();
    if inst.features.len() != spec.num_steps
        || inst.features.iter().any(|row| row.len() != streams)
    {
        return Err(Error::FeatureShapeMismatch {
            expected: spec.num_steps,
            expected_streams: streams,
            got_steps: inst.features.len(),
            got_streams: inst.features.first().map_or(0, |r| r.len()),
        });
    }
    for (t, row) in inst.features.iter().enumerate() {
        for (k, x) in row.iter().enumerate() {
            if x.len() != spec.feature_dims[k] {
                return Err(Error::FeatureDimMismatch {
                    t,
                    k,
                    got: x.len(),
                    expected: spec.feature_dims[k],
                });
            }
            if let Some(i) = x.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteFeature { t, k, i });
            }
        }
    }
    if let Some(gold) = &inst.gold {
        gold.validate(spec)?;
    }
    Ok(())
}

/// Half-open frame range `[start, end)` of one chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkRange {
    pub start: usize,
    pub end: usize,
}

impl ChunkRange {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    /// Overlapping frame range with another chunk, if any.
    pub fn overlap(&self, other: &ChunkRange) -> Option<ChunkRange> {
        let start = self.start.max(other.start);
        let end = self.end.min(other.end);
        (start < end).then_some(ChunkRange { start, end })
    }
}

/// Slice a video of `frame_count` frames into fixed-length overlapping
/// chunks: windows of `chunk_len` frames placed every `stride` frames.
///
/// If the last regular window would run past the end, the final window is
/// instead shifted left so it ends exactly at `frame_count`; every frame is
/// covered and all chunks have identical length.
pub fn chunk_video(frame_count: usize, chunk_len: usize, stride: usize) -> Result<Vec<ChunkRange>> {
    if chunk_len == 0 || stride == 0 {
        return Err(Error::DegenerateChunk { chunk_len, stride });
    }
    if chunk_len > frame_count {
        return Err(Error::VideoShorterThanChunk { frame_count, chunk_len });
    }
    if stride > chunk_len {
        return Err(Error::ChunkGap { stride, chunk_len });
    }
    let mut chunks = Vec::new();
    let mut start = 0usize;
    while start + chunk_len <= frame_count {
        chunks.push(ChunkRange { start, end: start + chunk_len });
        start += stride;
    }
    // Tail rule: if the regular grid stopped short of the end, add one final
    // window flush against it.
    let last_end = chunks.last().map(|c| c.end).unwrap_or(0);
    if last_end < frame_count {
        chunks.push(ChunkRange { start: frame_count - chunk_len, end: frame_count });
    }
    Ok(chunks)
}

/// Iterator over all assignments of a spec in lexicographic `(t, k, label)`
/// order: the first assignment is all zeros and the last node's label varies
/// fastest.
pub struct AssignmentIter {
    sizes: Vec<usize>, // per node in (t, k) order
    num_streams: usize,
    current: Option<Vec<usize>>,
}

impl Iterator for AssignmentIter {
    type Item = Assignment;

    fn next(&mut self) -> Option<Assignment> {
        let flat = self.current.as_ref()?.clone();
        // Odometer increment, last position fastest.
        let cur = self.current.as_mut().unwrap();
        let mut pos = cur.len();
        loop {
            if pos == 0 {
                self.current = None;
                break;
            }
            pos -= 1;
            cur[pos] += 1;
            if cur[pos] < self.sizes[pos] {
                break;
            }
            cur[pos] = 0;
        }
        let labels = flat.chunks(self.num_streams).map(|row| row.to_vec()).collect();
        Some(Assignment::new(labels))
    }
}

/// Enumerate every joint assignment of `spec` (the exact-inference oracle's
/// state space), refusing when the count exceeds [`DEFAULT_ENUMERATION_CAP`].
pub fn enumerate_assignments(spec: &GraphSpec) -> Result<AssignmentIter> {
    enumerate_assignments_capped(spec, DEFAULT_ENUMERATION_CAP)
}

/// [`enumerate_assignments`] with an explicit state-space cap.
pub fn enumerate_assignments_capped(spec: &GraphSpec, cap: u64) -> Result<AssignmentIter> {
    let states = spec.joint_state_count();
    if states > cap as u128 {
        return Err(Error::StateSpaceTooLarge { states, cap });
    }
    let mut sizes = Vec::with_capacity(spec.node_count());
    for _ in 0..spec.num_steps {
        sizes.extend_from_slice(&spec.label_sizes);
    }
    Ok(AssignmentIter {
        sizes,
        num_streams: spec.num_streams(),
        current: Some(vec![0; spec.node_count()]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::collections::HashSet;

    fn spec(t: usize, sizes: &[usize], dims: &[usize]) -> GraphSpec {
        GraphSpec::new(t, sizes.to_vec(), dims.to_vec()).unwrap()
    }

    // ===== chunking =====

    #[test]
    fn chunk_even_fit() {
        let chunks = chunk_video(60, 30, 15).unwrap();
        let expect = [(0, 30), (15, 45), (30, 60)];
        assert_eq!(chunks.len(), expect.len());
        for (c, (s, e)) in chunks.iter().zip(expect) {
            assert_eq!((c.start, c.end), (s, e));
        }
    }

    #[test]
    fn chunk_exact_single_window() {
        let chunks = chunk_video(30, 30, 15).unwrap();
        assert_eq!(chunks, vec![ChunkRange { start: 0, end: 30 }]);
    }

    #[test]
    fn chunk_stride_grid_ends_flush() {
        let chunks = chunk_video(26, 10, 4).unwrap();
        let expect = [(0, 10), (4, 14), (8, 18), (12, 22), (16, 26)];
        assert_eq!(chunks.len(), expect.len());
        for (c, (s, e)) in chunks.iter().zip(expect) {
            assert_eq!((c.start, c.end), (s, e));
        }
    }

    #[test]
    fn chunk_tail_window_shifts_left() {
        // Regular grid: [0,30), [15,45); next start 30 would end at 62 > 47,
        // so a final window [17,47) is added flush with the end.
        let chunks = chunk_video(47, 30, 15).unwrap();
        assert_eq!(chunks.last(), Some(&ChunkRange { start: 17, end: 47 }));
        assert_eq!(chunks.len(), 3);
    }

    #[test]
    fn chunk_errors() {
        assert!(matches!(
            chunk_video(10, 30, 15),
            Err(Error::VideoShorterThanChunk { frame_count: 10, chunk_len: 30 })
        ));
        assert!(matches!(chunk_video(60, 10, 11), Err(Error::ChunkGap { stride: 11, chunk_len: 10 })));
        assert!(matches!(chunk_video(60, 0, 1), Err(Error::DegenerateChunk { .. })));
    }

    #[test]
    fn chunk_covers_every_frame_with_uniform_length() {
        // Randomized sweep: coverage, ordering, fixed window length.
        let mut rng = crate::rng::substream(11, "chunk-test");
        for _ in 0..200 {
            let chunk_len = rng.random_range(1..40usize);
            let stride = rng.random_range(1..=chunk_len);
            let frame_count = rng.random_range(chunk_len..200usize);
            let chunks = chunk_video(frame_count, chunk_len, stride).unwrap();
            let mut covered = vec![false; frame_count];
            let mut prev_start = 0usize;
            for (i, c) in chunks.iter().enumerate() {
                assert_eq!(c.len(), chunk_len);
                assert!(c.end <= frame_count);
                if i > 0 {
                    assert!(c.start >= prev_start, "chunks out of order");
                }
                prev_start = c.start;
                for f in c.start..c.end {
                    covered[f] = true;
                }
            }
            assert!(covered.iter().all(|&c| c), "frame left uncovered");
            // All regular (non-tail) consecutive windows overlap by chunk_len - stride.
            for w in chunks.windows(2).take(chunks.len().saturating_sub(2)) {
                assert_eq!(w[1].start - w[0].start, stride);
            }
        }
    }

    // ===== validation =====

    fn tiny_instance() -> ObservationInstance {
        let spec = spec(2, &[2, 3], &[2, 1]);
        let features = vec![
            vec![vec![0.5, -1.0], vec![2.0]],
            vec![vec![1.5, 0.0], vec![-3.0]],
        ];
        let gold = Assignment::new(vec![vec![0, 2], vec![1, 0]]);
        ObservationInstance::new(spec, features, Some(gold)).unwrap()
    }

    #[test]
    fn validate_accepts_and_is_idempotent() {
        let inst = tiny_instance();
        validate_instance(&inst).unwrap();
        validate_instance(&inst).unwrap();
    }

    #[test]
    fn validate_rejects_wrong_feature_dim() {
        let mut inst = tiny_instance();
        inst.features[1][0] = vec![1.0];
        assert!(matches!(
            validate_instance(&inst),
            Err(Error::FeatureDimMismatch { t: 1, k: 0, got: 1, expected: 2 })
        ));
    }

    #[test]
    fn validate_rejects_non_finite_feature() {
        let mut inst = tiny_instance();
        inst.features[0][1][0] = f64::NAN;
        assert!(matches!(
            validate_instance(&inst),
            Err(Error::NonFiniteFeature { t: 0, k: 1, i: 0 })
        ));
    }

    #[test]
    fn validate_rejects_label_out_of_range() {
        let mut inst = tiny_instance();
        inst.gold.as_mut().unwrap().labels[0][0] = 2;
        assert!(matches!(
            validate_instance(&inst),
            Err(Error::LabelOutOfRange { t: 0, k: 0, label: 2, size: 2 })
        ));
    }

    #[test]
    fn spec_rejects_degenerate_shapes() {
        assert!(GraphSpec::new(0, vec![2], vec![1]).is_err());
        assert!(GraphSpec::new(1, vec![], vec![]).is_err());
        assert!(GraphSpec::new(1, vec![1], vec![1]).is_err());
        assert!(GraphSpec::new(1, vec![2, 2], vec![1]).is_err());
        assert!(GraphSpec::new(1, vec![2], vec![0]).is_err());
    }

    // ===== enumeration =====

    #[test]
    fn enumerate_is_lexicographic() {
        let spec = spec(1, &[2, 3], &[1, 1]);
        let all: Vec<Vec<usize>> =
            enumerate_assignments(&spec).unwrap().map(|a| a.labels[0].clone()).collect();
        assert_eq!(
            all,
            vec![
                vec![0, 0],
                vec![0, 1],
                vec![0, 2],
                vec![1, 0],
                vec![1, 1],
                vec![1, 2],
            ]
        );
    }

    #[test]
    fn enumerate_counts_product_of_sizes() {
        let mut rng = crate::rng::substream(13, "enum-test");
        for _ in 0..20 {
            let t = rng.random_range(1..3usize);
            let k = rng.random_range(1..3usize);
            let sizes: Vec<usize> = (0..k).map(|_| rng.random_range(2..4usize)).collect();
            let dims = vec![1; k];
            let spec = GraphSpec::new(t, sizes.clone(), dims).unwrap();
            let expected: usize =
                sizes.iter().map(|&s| s.pow(t as u32)).product();
            let seen: HashSet<Vec<Vec<usize>>> =
                enumerate_assignments(&spec).unwrap().map(|a| a.labels).collect();
            assert_eq!(seen.len(), expected, "distinct assignment count");
        }
    }

    #[test]
    fn enumerate_refuses_oversized_state_space() {
        let spec = spec(7, &[10, 10, 10], &[1, 1, 1]);
        assert!(matches!(
            enumerate_assignments(&spec),
            Err(Error::StateSpaceTooLarge { .. })
        ));
        // A custom cap lets small cases through.
        let small = GraphSpec::new(1, vec![2, 2], vec![1, 1]).unwrap();
        assert!(enumerate_assignments_capped(&small, 4).is_ok());
        assert!(matches!(
            enumerate_assignments_capped(&small, 3),
            Err(Error::StateSpaceTooLarge { states: 4, cap: 3 })
        ));
    }

    #[test]
    fn enumerated_assignments_all_validate() {
        let spec = spec(2, &[2, 2], &[1, 1]);
        for a in enumerate_assignments(&spec).unwrap() {
            a.validate(&spec).unwrap();
        }
    }
}

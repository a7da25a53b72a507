//! File formats: instance lines, model checkpoints, prediction lines,
//! evaluation reports, and training logs.
//!
//! Writers are deterministic — identical inputs produce identical bytes —
//! and every float is written with 17 significant digits, enough to
//! round-trip any `f64` bit-exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::energy::{EnergyModel, ModelConfig, Projection};
use crate::eval::{BBox, MetricReport, RelationInstance, Trajectory};
use crate::graph::{validate_instance, Assignment, ChunkRange, GraphSpec, ObservationInstance};
use crate::learning::{LogRecord, OptimizerState};
use crate::{Error, Result};

/// Schema tag of the checkpoint format this build writes and reads.
pub const CHECKPOINT_SCHEMA: &str = "energraph-model-v1";

/// Compact JSON with floats in scientific notation at 17 significant
/// digits. Non-finite values still serialize as `null`, as the plain
/// serializer does.
struct SciFloats;

impl serde_json::ser::Formatter for SciFloats {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:.16e}")
    }
}

fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, SciFloats);
    value
        .serialize(&mut ser)
        .map_err(|e| Error::Config(format!("serialization failed: {e}")))?;
    Ok(String::from_utf8(out).expect("serializer emits utf-8"))
}

fn parse_line<T: for<'de> Deserialize<'de>>(line: &str, number: usize) -> Result<T> {
    serde_json::from_str(line).map_err(|e| Error::Parse {
        line: number,
        msg: e.to_string(),
    })
}

// ---------------------------------------------------------- instance lines

/// Grid shape as it appears on disk: `K` streams, `T` steps.
#[derive(Serialize, Deserialize)]
struct SpecLine {
    #[serde(rename = "K")]
    streams: usize,
    #[serde(rename = "T")]
    steps: usize,
    label_sizes: Vec<usize>,
    feature_dims: Vec<usize>,
}

impl SpecLine {
    fn from_spec(spec: &GraphSpec) -> Self {
        SpecLine {
            streams: spec.num_streams(),
            steps: spec.num_steps,
            label_sizes: spec.label_sizes.clone(),
            feature_dims: spec.feature_dims.clone(),
        }
    }

    fn into_spec(self) -> Result<GraphSpec> {
        if self.streams != self.label_sizes.len() {
            return Err(Error::Config(format!(
                "spec says K = {} but label_sizes has {} entries",
                self.streams,
                self.label_sizes.len()
            )));
        }
        GraphSpec::new(self.steps, self.label_sizes, self.feature_dims)
    }
}

#[derive(Serialize, Deserialize)]
struct InstanceLine {
    spec: SpecLine,
    features: Vec<Vec<Vec<f64>>>,
    gold: Option<Vec<Vec<usize>>>,
    #[serde(default)]
    meta: serde_json::Map<String, serde_json::Value>,
}

/// Write instances as line-delimited JSON.
pub fn write_instances<P: AsRef<Path>>(path: P, instances: &[ObservationInstance]) -> Result<()> {
    let mut out = String::new();
    for inst in instances {
        validate_instance(inst)?;
        let line = InstanceLine {
            spec: SpecLine::from_spec(&inst.spec),
            features: inst.features.clone(),
            gold: inst.gold.as_ref().map(|g| g.labels.clone()),
            meta: inst.meta.clone(),
        };
        out.push_str(&to_json_string(&line)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read line-delimited instances; parse and validation failures name the
/// 1-based line. Blank lines are skipped.
pub fn read_instances<P: AsRef<Path>>(path: P) -> Result<Vec<ObservationInstance>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let number = i + 1;
        let parsed: InstanceLine = parse_line(line, number)?;
        let spec = parsed.spec.into_spec().map_err(|e| Error::Parse {
            line: number,
            msg: e.to_string(),
        })?;
        let gold = parsed.gold.map(Assignment::new);
        let mut inst =
            ObservationInstance::new(spec, parsed.features, gold).map_err(|e| Error::Parse {
                line: number,
                msg: e.to_string(),
            })?;
        inst.meta = parsed.meta;
        out.push(inst);
    }
    Ok(out)
}

// ------------------------------------------------------------- checkpoints

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    schema: String,
    spec: SpecLine,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerState>,
}

fn push_projection_shapes(
    shapes: &mut BTreeMap<String, Vec<usize>>,
    prefix: &str,
    proj: &Projection,
) {
    for (i, layer) in proj.layers.iter().enumerate() {
        shapes.insert(format!("{prefix}.w{i}"), vec![layer.out_dim, layer.in_dim]);
        shapes.insert(format!("{prefix}.b{i}"), vec![layer.out_dim]);
    }
}

fn tensor_shapes(model: &EnergyModel) -> BTreeMap<String, Vec<usize>> {
    let mut shapes = BTreeMap::new();
    let p = model.projections();
    for (k, proj) in p.unary.iter().enumerate() {
        push_projection_shapes(&mut shapes, &format!("unary[{k}]"), proj);
    }
    let sizes = &model.spec().label_sizes;
    for &(k, k2) in p.compat.keys() {
        shapes.insert(format!("compat[{k},{k2}]"), vec![sizes[k], sizes[k2]]);
    }
    for (&(k, k2), pair) in p.spatial.iter() {
        push_projection_shapes(&mut shapes, &format!("spatial[{k},{k2}].src"), &pair.source);
        push_projection_shapes(&mut shapes, &format!("spatial[{k},{k2}].tgt"), &pair.target);
    }
    for (&(k, k2), pair) in p.temporal.iter() {
        push_projection_shapes(&mut shapes, &format!("temporal[{k},{k2}].src"), &pair.source);
        push_projection_shapes(&mut shapes, &format!("temporal[{k},{k2}].tgt"), &pair.target);
    }
    if let Some((u, v)) = p.prior_maps {
        push_projection_shapes(&mut shapes, "prior.src", u);
        push_projection_shapes(&mut shapes, "prior.tgt", v);
    }
    shapes
}

/// Write a model (and optionally optimizer state) as a single-document JSON
/// checkpoint with named, shaped, row-major flat parameter arrays.
pub fn write_checkpoint<P: AsRef<Path>>(
    path: P,
    model: &EnergyModel,
    optimizer: Option<&OptimizerState>,
) -> Result<()> {
    let shapes = tensor_shapes(model);
    let tensors: Vec<TensorEntry> = model
        .named_tensors()
        .into_iter()
        .map(|(name, values)| {
            let shape = shapes
                .get(&name)
                .cloned()
                .unwrap_or_else(|| vec![values.len()]);
            TensorEntry {
                name,
                shape,
                values: values.clone(),
            }
        })
        .collect();
    let file = CheckpointFile {
        schema: CHECKPOINT_SCHEMA.to_string(),
        spec: SpecLine::from_spec(model.spec()),
        config: model.config().clone(),
        tensors,
        optimizer: optimizer.cloned(),
    };
    let mut text = to_json_string(&file)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Read a checkpoint back into a model (plus optimizer state when stored).
/// The schema tag, tensor name set, shapes, and finiteness are all checked.
pub fn read_checkpoint<P: AsRef<Path>>(path: P) -> Result<(EnergyModel, Option<OptimizerState>)> {
    let text = fs::read_to_string(path)?;
    let file: CheckpointFile = parse_line(&text, 1)?;
    if file.schema != CHECKPOINT_SCHEMA {
        return Err(Error::SchemaMismatch {
            got: file.schema,
            expected: CHECKPOINT_SCHEMA.to_string(),
        });
    }
    let spec = file.spec.into_spec()?;
    let mut model = EnergyModel::new(spec, file.config, 0)?;
    let expected = model.named_tensors().len();
    if file.tensors.len() != expected {
        return Err(Error::Config(format!(
            "checkpoint holds {} tensors but the model defines {expected}",
            file.tensors.len()
        )));
    }
    let mut seen = BTreeSet::new();
    for entry in &file.tensors {
        if !seen.insert(entry.name.clone()) {
            return Err(Error::Config(format!(
                "checkpoint repeats tensor {:?}",
                entry.name
            )));
        }
        let volume: usize = entry.shape.iter().product();
        if volume != entry.values.len() {
            return Err(Error::Config(format!(
                "tensor {:?} declares shape {:?} ({} values) but carries {}",
                entry.name,
                entry.shape,
                volume,
                entry.values.len()
            )));
        }
        if entry.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!(
                "tensor {:?} carries a non-finite parameter",
                entry.name
            )));
        }
        model.set_tensor(&entry.name, &entry.values)?;
    }
    if let Some(state) = &file.optimizer {
        let lens: Vec<usize> = model.named_tensors().iter().map(|(_, v)| v.len()).collect();
        let matches = |moments: &[Vec<f64>]| {
            moments.len() == lens.len()
                && moments.iter().zip(&lens).all(|(m, &n)| m.len() == n)
        };
        // `second` is legitimately empty for plain momentum.
        if !matches(&state.first) || !(state.second.is_empty() || matches(&state.second)) {
            return Err(Error::Config(
                "optimizer state shapes do not match the model parameters".into(),
            ));
        }
    }
    Ok((model, file.optimizer))
}

// ----------------------------------------------------- predictions / labels

/// One trajectory frame on disk: `[frame, x1, y1, x2, y2]`.
type TrajRow = (usize, f64, f64, f64, f64);

#[derive(Serialize, Deserialize)]
struct PredictionLine {
    video: String,
    triplet: [usize; 3],
    score: f64,
    span: [usize; 2],
    #[serde(default)]
    straj: Option<Vec<TrajRow>>,
    #[serde(default)]
    otraj: Option<Vec<TrajRow>>,
}

fn trajectory_rows(t: &Trajectory) -> Vec<TrajRow> {
    t.boxes()
        .iter()
        .enumerate()
        .map(|(i, b)| (t.start() + i, b.x1, b.y1, b.x2, b.y2))
        .collect()
}

fn rows_to_trajectory(rows: &[TrajRow]) -> Result<Trajectory> {
    if rows.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    let start = rows[0].0;
    let mut boxes = Vec::with_capacity(rows.len());
    for (i, &(frame, x1, y1, x2, y2)) in rows.iter().enumerate() {
        if frame != start + i {
            return Err(Error::Config(format!(
                "trajectory frames must be consecutive; row {i} holds frame {frame}, expected {}",
                start + i
            )));
        }
        boxes.push(BBox::new(x1, y1, x2, y2)?);
    }
    Trajectory::new(start, boxes)
}

fn to_prediction_line(p: &RelationInstance) -> PredictionLine {
    PredictionLine {
        video: p.video.clone(),
        triplet: p.triplet,
        score: p.score,
        span: [p.span.start, p.span.end],
        straj: p.straj.as_ref().map(trajectory_rows),
        otraj: p.otraj.as_ref().map(trajectory_rows),
    }
}

fn from_prediction_line(line: PredictionLine) -> Result<RelationInstance> {
    let inst = RelationInstance {
        video: line.video,
        triplet: line.triplet,
        score: line.score,
        span: ChunkRange {
            start: line.span[0],
            end: line.span[1],
        },
        straj: line.straj.as_deref().map(rows_to_trajectory).transpose()?,
        otraj: line.otraj.as_deref().map(rows_to_trajectory).transpose()?,
    };
    inst.validate()?;
    Ok(inst)
}

/// Write scored relation instances as line-delimited JSON, one object per
/// line: `{"video", "triplet", "score", "span": [start, end], "straj":
/// [[frame, x1, y1, x2, y2], ...] | null, "otraj": ...}`.
pub fn write_predictions<P: AsRef<Path>>(path: P, preds: &[RelationInstance]) -> Result<()> {
    let mut out = String::new();
    for p in preds {
        p.validate()?;
        out.push_str(&to_json_string(&to_prediction_line(p))?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read line-delimited relation instances; errors name the 1-based line.
pub fn read_predictions<P: AsRef<Path>>(path: P) -> Result<Vec<RelationInstance>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let number = i + 1;
        let parsed: PredictionLine = parse_line(line, number)?;
        out.push(from_prediction_line(parsed).map_err(|e| Error::Parse {
            line: number,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Per-instance inference output: mean-field marginals and their argmax
/// labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    /// `marginals[t][k]` is node `(t, k)`'s label distribution.
    pub marginals: Vec<Vec<Vec<f64>>>,
    /// `labels[t][k]` is the argmax of that distribution.
    pub labels: Vec<Vec<usize>>,
}

pub fn write_inference_records<P: AsRef<Path>>(
    path: P,
    records: &[InferenceRecord],
) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&to_json_string(r)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_inference_records<P: AsRef<Path>>(path: P) -> Result<Vec<InferenceRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(line, i + 1)?);
    }
    Ok(out)
}

// -------------------------------------------------------- reports and logs

/// One-line JSON rendering of a report (non-finite values become `null`).
pub fn report_to_string(report: &MetricReport) -> Result<String> {
    let mut text = to_json_string(report)?;
    text.push('\n');
    Ok(text)
}

pub fn write_report<P: AsRef<Path>>(path: P, report: &MetricReport) -> Result<()> {
    fs::write(path, report_to_string(report)?)?;
    Ok(())
}

/// Write training log records as line-delimited JSON.
pub fn write_training_log<P: AsRef<Path>>(path: P, records: &[LogRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&to_json_string(r)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

//! Model checkpoints (`RQMD`) and calibration sets (`RQCL`).
//!
//! Both are little-endian. Weights and features are stored as `f32`, so a
//! vector already on the `f32` grid round-trips bit-exactly.

use std::fs;
use std::path::Path;

use requant_core::{CalibSet, ComputationSpec, Error as CoreError, Layout, Result as CoreResult, WeightVector};

use crate::error::{Error, Result};
use crate::wire::{Reader, Writer};

const MODEL_MAGIC: &[u8; 4] = b"RQMD";
const CALIB_MAGIC: &[u8; 4] = b"RQCL";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ComputationSpec,
    pub weights: WeightVector,
    /// `‖∇F‖∞` on the training set when the model was saved, if known.
    pub grad_norm_inf: Option<f64>,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> CoreResult<Vec<u8>> {
    let layout = ck.spec.layout();
    if &layout != ck.weights.layout() {
        return Err(CoreError::Layout("weights do not match the computation spec".into()));
    }
    let mut w = Writer::new(MODEL_MAGIC);
    w.spec(&ck.spec)?;
    w.len_u32(layout.num_layers(), "layer count")?;
    for (l, seg) in layout.segments().iter().enumerate() {
        w.name(&seg.name)?;
        w.len_u32(seg.rows, "rows")?;
        w.len_u32(seg.cols, "cols")?;
        w.u8(seg.has_bias as u8);
        for &v in ck.weights.layer(l) {
            w.f32(v as f32);
        }
    }
    match ck.grad_norm_inf {
        Some(g) => {
            w.u8(1);
            w.f64(g);
        }
        None => w.u8(0),
    }
    Ok(w.0)
}

pub fn decode_checkpoint(data: &[u8]) -> CoreResult<Checkpoint> {
    let mut r = Reader::new(data, MODEL_MAGIC, "checkpoint")?;
    let mut spec = r.spec()?;
    let n = r.usize()?;
    if n != spec.num_layers() {
        return Err(CoreError::Format(format!(
            "checkpoint: {n} layers, spec has {}",
            spec.num_layers()
        )));
    }
    let widths = spec.widths();
    let mut shapes = Vec::with_capacity(n);
    let mut values = Vec::new();
    for l in 0..n {
        let name = r.name()?;
        let rows = r.usize()?;
        let cols = r.usize()?;
        let has_bias = r.bool()?;
        if rows != widths[l + 1] || cols != widths[l] {
            return Err(CoreError::Format(format!(
                "checkpoint: layer {name} is {rows}x{cols}, spec disagrees"
            )));
        }
        let len = rows * cols + if has_bias { rows } else { 0 };
        values.extend(r.f32s(len)?.into_iter().map(f64::from));
        shapes.push((name, rows, cols, has_bias));
    }
    spec.bias = shapes.first().is_some_and(|s| s.3);
    if shapes.iter().any(|s| s.3 != spec.bias) {
        return Err(CoreError::Format("checkpoint: layers disagree on biases".into()));
    }
    let grad_norm_inf = if r.bool()? { Some(r.f64()?) } else { None };
    r.finish()?;
    let layout = Layout::from_shapes(shapes);
    if layout != spec.layout() {
        return Err(CoreError::Format(
            "checkpoint: layer names do not match the spec".into(),
        ));
    }
    Ok(Checkpoint {
        spec,
        weights: WeightVector::new(layout, values)?,
        grad_norm_inf,
    })
}

pub fn encode_calib(c: &CalibSet) -> CoreResult<Vec<u8>> {
    let mut w = Writer::new(CALIB_MAGIC);
    w.len_u32(c.len(), "sample count")?;
    w.len_u32(c.d_in(), "feature dimension")?;
    w.len_u32(c.classes(), "class count")?;
    for i in 0..c.len() {
        let (x, y) = c.sample(i);
        for &v in x {
            w.f32(v as f32);
        }
        w.u32(y);
    }
    Ok(w.0)
}

pub fn decode_calib(data: &[u8]) -> CoreResult<CalibSet> {
    let mut r = Reader::new(data, CALIB_MAGIC, "calibration set")?;
    let n = r.usize()?;
    let d_in = r.usize()?;
    let classes = r.usize()?;
    if d_in == 0 || r.remaining() / (4 * d_in + 4) < n {
        return Err(CoreError::Format(
            "calibration set: truncated or empty feature block".into(),
        ));
    }
    let mut features = Vec::with_capacity(n * d_in);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        features.extend(r.f32s(d_in)?.into_iter().map(f64::from));
        labels.push(r.u32()?);
    }
    r.finish()?;
    CalibSet::new(d_in, classes, features, labels).map_err(|e| CoreError::Format(format!("calibration set: {e}")))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, data: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, data).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_file(path, &encode_checkpoint(ck)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(decode_checkpoint(&read_file(path)?)?)
}

pub fn save_calib(path: &Path, c: &CalibSet) -> Result<()> {
    write_file(path, &encode_calib(c)?)
}

pub fn load_calib(path: &Path) -> Result<CalibSet> {
    Ok(decode_calib(&read_file(path)?)?)
}

//! Quantized model artifacts (`RQQT`).
//!
//! Layout, all little-endian: magic, version `u32`; header (mode `u8`,
//! bits `u8`, group size or codebook size `u32`, integer range `u8`,
//! preprocessing `u8` + exponent `f64`, k-means iterations `u32`,
//! quantizer seed `u64`, `r_o`, `r_s`, `t`, `β` as `f32`, pipeline seed
//! `u64`); computation spec; layer count; then per layer: name, rows,
//! cols, bias flag, code width, packed codes (byte count + bytes, LSB
//! first), steps or codebook as `f32`, optional channel scales, and the
//! outlier and significant-weight triplet blocks (count `u32`, then
//! `u16` row, `u16` col, `f32` value).

use std::path::Path;

use requant_core::model::Coord;
use requant_core::quant::{
    DenseCodes, IntRange, PackedCodes, Preprocess, QuantConfig, QuantMeta, QuantMode, QuantizedLayer, QuantizedModel,
    SparseTriplets, Triplet,
};
use requant_core::{ComputationSpec, Error as CoreError, Result as CoreResult};

use crate::checkpoint::{read_file, write_file};
use crate::error::Result;
use crate::wire::{Reader, Writer};

const MAGIC: &[u8; 4] = b"RQQT";
const MAX_DIM: usize = u16::MAX as usize;

#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub spec: ComputationSpec,
    pub model: QuantizedModel,
}

fn write_triplets(w: &mut Writer, entries: &[Triplet]) -> CoreResult<()> {
    w.len_u32(entries.len(), "overlay count")?;
    for t in entries {
        w.u16(t.coord.row as u16);
        w.u16(t.coord.col as u16);
        w.f32(t.value);
    }
    Ok(())
}

fn read_triplets(r: &mut Reader, layer: usize, out: &mut Vec<Triplet>) -> CoreResult<()> {
    let n = r.usize()?;
    if r.remaining() / 8 < n {
        return Err(CoreError::Format("artifact: truncated overlay block".into()));
    }
    for _ in 0..n {
        let row = r.u16()? as usize;
        let col = r.u16()? as usize;
        out.push(Triplet {
            coord: Coord::new(layer, row, col),
            value: r.f32()?,
        });
    }
    Ok(())
}

pub fn encode_artifact(a: &Artifact) -> CoreResult<Vec<u8>> {
    let qm = &a.model;
    qm.validate()?;
    if qm.layout() != a.spec.layout() {
        return Err(CoreError::Layout(
            "artifact layers do not match the computation spec".into(),
        ));
    }
    let cfg = &qm.config;
    let mut w = Writer::new(MAGIC);
    w.u8(cfg.mode.code());
    w.u8(cfg.bits);
    let (size, iters) = match cfg.mode {
        QuantMode::UniformGroup { group_size } => (group_size, 0),
        QuantMode::KMeansCodebook { iters } => (cfg.codebook_size(), iters),
    };
    w.len_u32(size, "group size")?;
    w.u8(cfg.range.code());
    match cfg.preprocess {
        Preprocess::Identity => {
            w.u8(0);
            w.f64(0.0);
        }
        Preprocess::ActivationScale { exponent } => {
            w.u8(1);
            w.f64(exponent);
        }
    }
    w.len_u32(iters, "k-means iterations")?;
    w.u64(cfg.seed);
    w.f32(qm.meta.r_o);
    w.f32(qm.meta.r_s);
    w.f32(qm.meta.t);
    w.f32(qm.meta.beta);
    w.u64(qm.meta.seed);
    w.spec(&a.spec)?;
    w.len_u32(qm.layers.len(), "layer count")?;
    for (l, layer) in qm.layers.iter().enumerate() {
        if layer.rows > MAX_DIM || layer.cols > MAX_DIM {
            return Err(CoreError::Format(format!(
                "layer {} is {}x{}; overlay indices are limited to {MAX_DIM}",
                layer.name, layer.rows, layer.cols
            )));
        }
        w.name(&layer.name)?;
        w.len_u32(layer.rows, "rows")?;
        w.len_u32(layer.cols, "cols")?;
        w.u8(layer.has_bias as u8);
        let codes = layer.codes();
        w.u8(codes.bits());
        w.len_u32(codes.as_bytes().len(), "code bytes")?;
        w.0.extend_from_slice(codes.as_bytes());
        match &layer.dense {
            DenseCodes::Uniform { scales, col_scales, .. } => {
                w.len_u32(scales.len(), "step count")?;
                scales.iter().for_each(|&s| w.f32(s));
                match col_scales {
                    Some(cs) => {
                        w.u8(1);
                        cs.iter().for_each(|&s| w.f32(s));
                    }
                    None => w.u8(0),
                }
            }
            DenseCodes::Codebook { codebook, .. } => {
                w.len_u32(codebook.len(), "codebook size")?;
                codebook.iter().for_each(|&c| w.f32(c));
            }
        }
        let [outliers, significant] = qm.layer_overlays(l);
        write_triplets(&mut w, outliers)?;
        write_triplets(&mut w, significant)?;
    }
    Ok(w.0)
}

pub fn decode_artifact(data: &[u8]) -> CoreResult<Artifact> {
    let mut r = Reader::new(data, MAGIC, "artifact")?;
    let mode_code = r.u8()?;
    let bits = r.u8()?;
    let size = r.usize()?;
    let range = IntRange::from_code(r.u8()?)?;
    let pre = r.u8()?;
    let exponent = r.f64()?;
    let iters = r.usize()?;
    let seed = r.u64()?;
    let mode = match mode_code {
        0 => QuantMode::UniformGroup { group_size: size },
        1 => QuantMode::KMeansCodebook { iters },
        m => return Err(CoreError::Format(format!("artifact: unknown mode {m}"))),
    };
    let preprocess = match pre {
        0 => Preprocess::Identity,
        1 => Preprocess::ActivationScale { exponent },
        p => return Err(CoreError::Format(format!("artifact: unknown preprocessing {p}"))),
    };
    let config = QuantConfig {
        bits,
        mode,
        range,
        preprocess,
        seed,
    };
    config
        .validate()
        .map_err(|e| CoreError::Format(format!("artifact: {e}")))?;
    if matches!(mode, QuantMode::KMeansCodebook { .. }) && size != config.codebook_size() {
        return Err(CoreError::Format(format!(
            "artifact: codebook size {size} for {bits} bits"
        )));
    }
    let meta = QuantMeta {
        r_o: r.f32()?,
        r_s: r.f32()?,
        t: r.f32()?,
        beta: r.f32()?,
        seed: r.u64()?,
    };
    let mut spec = r.spec()?;
    let n = r.usize()?;
    if n != spec.num_layers() {
        return Err(CoreError::Format(format!(
            "artifact: {n} layers, spec has {}",
            spec.num_layers()
        )));
    }
    let mut layers = Vec::with_capacity(n);
    let mut outliers = Vec::new();
    let mut significant = Vec::new();
    for l in 0..n {
        let name = r.name()?;
        let rows = r.usize()?;
        let cols = r.usize()?;
        let has_bias = r.bool()?;
        let code_bits = r.u8()?;
        if code_bits != config.code_bits() {
            return Err(CoreError::Format(format!(
                "artifact: layer {name} has {code_bits}-bit codes"
            )));
        }
        let nbytes = r.usize()?;
        let len = rows * cols + if has_bias { rows } else { 0 };
        let codes = PackedCodes::from_bytes(code_bits, len, r.bytes(nbytes)?)?;
        let dense = match mode {
            QuantMode::UniformGroup { group_size } => {
                let k = r.usize()?;
                let scales = r.f32s(k)?;
                let col_scales = if r.bool()? { Some(r.f32s(cols)?) } else { None };
                DenseCodes::Uniform {
                    group_size,
                    codes,
                    scales,
                    col_scales,
                }
            }
            QuantMode::KMeansCodebook { .. } => {
                let k = r.usize()?;
                DenseCodes::Codebook {
                    codes,
                    codebook: r.f32s(k)?,
                }
            }
        };
        read_triplets(&mut r, l, &mut outliers)?;
        read_triplets(&mut r, l, &mut significant)?;
        layers.push(QuantizedLayer {
            name,
            rows,
            cols,
            has_bias,
            dense,
        });
    }
    r.finish()?;
    spec.bias = layers.first().is_some_and(|l| l.has_bias);
    let model = QuantizedModel {
        config,
        layers,
        outliers: SparseTriplets::new(outliers)?,
        significant: SparseTriplets::new(significant)?,
        meta,
    };
    model.validate()?;
    if model.layout() != spec.layout() {
        return Err(CoreError::Format(
            "artifact: layers do not match the computation spec".into(),
        ));
    }
    Ok(Artifact { spec, model })
}

pub fn save_artifact(path: &Path, a: &Artifact) -> Result<()> {
    write_file(path, &encode_artifact(a)?)
}

pub fn load_artifact(path: &Path) -> Result<Artifact> {
    Ok(decode_artifact(&read_file(path)?)?)
}

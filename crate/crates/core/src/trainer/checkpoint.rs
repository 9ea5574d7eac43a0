//! Single-file checkpoints: one JSON metadata line followed by raw
//! little-endian f32 data for every named array in manifest order.
//!
//! The array list covers every parameter (in traversal order) plus the
//! optimizer moments as `opt.m.<name>` / `opt.v.<name>`. Values are stored
//! as f32, which is lossless for f32 training runs; resuming replays an
//! uninterrupted run bit-for-bit.

use std::collections::HashMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::PairWeights;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::trainer::optim::OptimizerState;

const FORMAT: &str = "denoiselm-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct ArrayMeta {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the binary section that follows the metadata line.
    offset: u64,
    /// Element count; always the product of `shape`.
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    format: String,
    step: u64,
    opt_t: u64,
    config: serde_json::Value,
    arrays: Vec<ArrayMeta>,
}

pub struct Checkpoint {
    pub config: serde_json::Value,
    pub step: u64,
    pub opt_t: u64,
    arrays: HashMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.arrays.get(name).map(|(s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }
}

pub fn save<S: Scalar>(
    path: &Path,
    config: &serde_json::Value,
    step: u64,
    pair: &PairWeights<S>,
    opt: &OptimizerState<S>,
) -> Result<()> {
    let mut arrays = Vec::new();
    let mut blobs: Vec<Vec<f32>> = Vec::new();
    let mut offset = 0u64;
    let mut push = |name: String, shape: Vec<usize>, data: Vec<f32>, arrays: &mut Vec<ArrayMeta>, blobs: &mut Vec<Vec<f32>>| {
        let len = data.len() as u64;
        arrays.push(ArrayMeta { name, shape, offset, len });
        offset += 4 * len;
        blobs.push(data);
    };

    let mut names = Vec::new();
    pair.for_each_param(|name, t| {
        names.push(name.to_string());
        let data: Vec<f32> = t.data().iter().map(|x| x.as_f32()).collect();
        push(name.to_string(), t.shape().to_vec(), data, &mut arrays, &mut blobs);
    });
    if names.len() != opt.m.len() {
        return Err(Error::checkpoint(format!(
            "optimizer tracks {} buffers but the model has {} parameters",
            opt.m.len(),
            names.len()
        )));
    }
    for (which, moments) in [("m", &opt.m), ("v", &opt.v)] {
        for (name, buf) in names.iter().zip(moments) {
            let data: Vec<f32> = buf.iter().map(|x| x.as_f32()).collect();
            push(format!("opt.{which}.{name}"), vec![buf.len()], data, &mut arrays, &mut blobs);
        }
    }

    let meta = Meta {
        format: FORMAT.to_string(),
        step,
        opt_t: opt.t,
        config: config.clone(),
        arrays,
    };
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &meta).map_err(|e| Error::Json(e.to_string()))?;
    w.write_all(b"\n")?;
    for blob in &blobs {
        for x in blob {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::checkpoint("missing metadata line"))?;
    let meta: Meta = serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Json(e.to_string()))?;
    if meta.format != FORMAT {
        return Err(Error::checkpoint(format!("unknown format `{}`", meta.format)));
    }
    let bin = &bytes[nl + 1..];
    let mut arrays = HashMap::new();
    for a in &meta.arrays {
        let count: usize = a.shape.iter().product();
        if count as u64 != a.len {
            return Err(Error::checkpoint(format!(
                "array {}: shape {:?} disagrees with len {}",
                a.name, a.shape, a.len
            )));
        }
        let start = a.offset as usize;
        let end = start + 4 * count;
        if end > bin.len() {
            return Err(Error::checkpoint(format!(
                "array {} overruns the file ({} > {} bytes)",
                a.name,
                end,
                bin.len()
            )));
        }
        let data: Vec<f32> = bin[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        arrays.insert(a.name.clone(), (a.shape.clone(), data));
    }
    Ok(Checkpoint { config: meta.config, step: meta.step, opt_t: meta.opt_t, arrays })
}

/// Copies a loaded checkpoint into live weights and optimizer state.
/// Every parameter of the current model must be present with its shape.
pub fn restore<S: Scalar>(
    ckpt: &Checkpoint,
    pair: &mut PairWeights<S>,
    opt: &mut OptimizerState<S>,
) -> Result<()> {
    let mut missing = Vec::new();
    let mut names = Vec::new();
    pair.for_each_param_mut(|name, t| {
        names.push(name.to_string());
        match ckpt.arrays.get(name) {
            Some((shape, data)) if shape == t.shape() => {
                for (dst, &src) in t.data_mut().iter_mut().zip(data) {
                    *dst = S::of_f32(src);
                }
            }
            Some((shape, _)) => missing.push(format!("{name}: shape {shape:?} vs {:?}", t.shape())),
            None => missing.push(format!("{name}: absent")),
        }
    });
    if !missing.is_empty() {
        return Err(Error::checkpoint(format!(
            "checkpoint does not match the model: {}",
            missing.join("; ")
        )));
    }
    for (which, moments) in [("m", &mut opt.m), ("v", &mut opt.v)] {
        for (name, buf) in names.iter().zip(moments.iter_mut()) {
            let key = format!("opt.{which}.{name}");
            let (_, data) = ckpt
                .arrays
                .get(&key)
                .ok_or_else(|| Error::checkpoint(format!("{key}: absent")))?;
            if data.len() != buf.len() {
                return Err(Error::checkpoint(format!(
                    "{key}: {} elements vs {}",
                    data.len(),
                    buf.len()
                )));
            }
            for (dst, &src) in buf.iter_mut().zip(data) {
                *dst = S::of_f32(src);
            }
        }
    }
    opt.t = ckpt.opt_t;
    Ok(())
}

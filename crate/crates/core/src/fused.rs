//! Fused vs unfused half-precision kernels with allocation accounting.
//!
//! Inputs and outputs are binary16 bit patterns; all arithmetic runs in f32.
//! The unfused path is the classic "cast up, compute, cast down" pipeline
//! with two full-length f32 buffers. The fused path streams each row through
//! scalar f32 accumulators, re-decoding on the fly, and never allocates an
//! f32 array. Both paths execute the identical per-element f32 operations in
//! the identical order (the shared `*_stats` helpers see bit-equal inputs
//! because half decoding is exact), so their outputs match bit for bit.
//! Rust does not reassociate float reductions, so vectorization cannot
//! break the equivalence.
//!
//! These kernels are a standalone demonstrator; the trainer does not route
//! through them.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::half::{f32_to_half, half_to_f32};
use crate::rng::{RootRng, Stream};
use crate::tensor::kept;

pub const LN_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KernelOp {
    Identity,
    Softmax,
    /// Softmax then inverted dropout with the position-keyed mask shared
    /// with the training graph's dropout op, so fused and unfused consume
    /// the identical stream.
    SoftmaxDropout { p: f64, key: u64 },
    LayerNorm,
}

impl KernelOp {
    pub fn label(&self) -> &'static str {
        match self {
            KernelOp::Identity => "identity",
            KernelOp::Softmax => "softmax",
            KernelOp::SoftmaxDropout { .. } => "softmax-dropout",
            KernelOp::LayerNorm => "layernorm",
        }
    }
}

/// Tracks full-length f32 intermediates. Fresh (zeroed) for every kernel
/// call; the half output buffer is not an intermediate and is never counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AllocCounter {
    pub n_buffers: usize,
    pub n_bytes: usize,
}

impl AllocCounter {
    fn grab(&mut self, len: usize) -> Vec<f32> {
        self.n_buffers += 1;
        self.n_bytes += len * std::mem::size_of::<f32>();
        vec![0.0; len]
    }
}

fn check(op: &KernelOp, n: usize, cols: usize) -> Result<()> {
    if cols == 0 || n == 0 || n % cols != 0 {
        return Err(Error::config(format!(
            "kernel shape: {n} elements do not split into rows of {cols}"
        )));
    }
    if let KernelOp::SoftmaxDropout { p, .. } = op {
        if !(0.0..1.0).contains(p) {
            return Err(Error::config(format!("dropout: p = {p} outside [0,1)")));
        }
    }
    Ok(())
}

fn drop_scale(p: f64) -> f32 {
    (1.0 / (1.0 - p)) as f32
}

/// Row max, then sum of exp(x - max), accumulated left to right in f32.
fn softmax_stats(cols: usize, v: impl Fn(usize) -> f32) -> (f32, f32) {
    let mut m = f32::NEG_INFINITY;
    for i in 0..cols {
        let x = v(i);
        if x > m {
            m = x;
        }
    }
    let mut s = 0.0f32;
    for i in 0..cols {
        s += (v(i) - m).exp();
    }
    (m, s)
}

/// Row mean and 1/sqrt(var + eps), accumulated left to right in f32.
fn layernorm_stats(cols: usize, v: impl Fn(usize) -> f32) -> (f32, f32) {
    let mut sum = 0.0f32;
    for i in 0..cols {
        sum += v(i);
    }
    let mean = sum / cols as f32;
    let mut var = 0.0f32;
    for i in 0..cols {
        let d = v(i) - mean;
        var += d * d;
    }
    (mean, 1.0 / (var / cols as f32 + LN_EPS).sqrt())
}

/// Cast the whole array up to f32 (buffer t1), compute the op into a second
/// full buffer t2, cast back down. Two full-length f32 intermediates by
/// construction.
pub fn unfused_stable_op(x: &[u16], cols: usize, op: &KernelOp) -> Result<(Vec<u16>, AllocCounter)> {
    check(op, x.len(), cols)?;
    let n = x.len();
    let mut counter = AllocCounter::default();
    let mut t1 = counter.grab(n);
    for (dst, &h) in t1.iter_mut().zip(x) {
        *dst = half_to_f32(h);
    }
    let mut t2 = counter.grab(n);
    match *op {
        KernelOp::Identity => t2.copy_from_slice(&t1),
        KernelOp::Softmax => {
            for r in 0..n / cols {
                let base = r * cols;
                let (m, s) = softmax_stats(cols, |i| t1[base + i]);
                for i in 0..cols {
                    t2[base + i] = (t1[base + i] - m).exp() / s;
                }
            }
        }
        KernelOp::SoftmaxDropout { p, key } => {
            let scale = drop_scale(p);
            for r in 0..n / cols {
                let base = r * cols;
                let (m, s) = softmax_stats(cols, |i| t1[base + i]);
                for i in 0..cols {
                    t2[base + i] = (t1[base + i] - m).exp() / s;
                }
            }
            for (j, v) in t2.iter_mut().enumerate() {
                *v = if kept(key, j as u64, p) { *v * scale } else { 0.0 };
            }
        }
        KernelOp::LayerNorm => {
            for r in 0..n / cols {
                let base = r * cols;
                let (mean, inv) = layernorm_stats(cols, |i| t1[base + i]);
                for i in 0..cols {
                    t2[base + i] = (t1[base + i] - mean) * inv;
                }
            }
        }
    }
    let out = t2.iter().map(|&v| f32_to_half(v)).collect();
    Ok((out, counter))
}

/// Stream each row with scalar f32 accumulators, decoding elements on the
/// fly. Row reductions take one extra decoding pass instead of a buffer:
/// max+sum (or mean+var), then a normalize-and-encode pass. Zero f32
/// intermediates.
pub fn fused_stable_op(x: &[u16], cols: usize, op: &KernelOp) -> Result<(Vec<u16>, AllocCounter)> {
    check(op, x.len(), cols)?;
    let n = x.len();
    let counter = AllocCounter::default();
    let mut out = vec![0u16; n];
    match *op {
        KernelOp::Identity => {
            for (dst, &h) in out.iter_mut().zip(x) {
                *dst = f32_to_half(half_to_f32(h));
            }
        }
        KernelOp::Softmax => {
            for r in 0..n / cols {
                let base = r * cols;
                let (m, s) = softmax_stats(cols, |i| half_to_f32(x[base + i]));
                for i in 0..cols {
                    out[base + i] = f32_to_half((half_to_f32(x[base + i]) - m).exp() / s);
                }
            }
        }
        KernelOp::SoftmaxDropout { p, key } => {
            let scale = drop_scale(p);
            for r in 0..n / cols {
                let base = r * cols;
                let (m, s) = softmax_stats(cols, |i| half_to_f32(x[base + i]));
                for i in 0..cols {
                    let j = base + i;
                    let v = (half_to_f32(x[j]) - m).exp() / s;
                    out[j] = f32_to_half(if kept(key, j as u64, p) { v * scale } else { 0.0 });
                }
            }
        }
        KernelOp::LayerNorm => {
            for r in 0..n / cols {
                let base = r * cols;
                let (mean, inv) = layernorm_stats(cols, |i| half_to_f32(x[base + i]));
                for i in 0..cols {
                    out[base + i] = f32_to_half((half_to_f32(x[base + i]) - mean) * inv);
                }
            }
        }
    }
    Ok((out, counter))
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub op: String,
    pub n: usize,
    pub cols: usize,
    pub reps: usize,
    pub ns_per_call_unfused: u64,
    pub ns_per_call_fused: u64,
    /// Unfused time over fused time; > 1 means fusion won. Machine-dependent.
    pub throughput_ratio: f64,
    pub buffers_unfused: usize,
    pub bytes_unfused: usize,
    pub buffers_fused: usize,
    pub bytes_fused: usize,
    /// Max Hamming distance between fused and unfused output patterns.
    /// Anything but 0 is a bug.
    pub max_bit_diff: u32,
}

fn median_ns(mut samples: Vec<u128>) -> u64 {
    samples.sort_unstable();
    samples[samples.len() / 2] as u64
}

const BENCH_SEED: u64 = 0xB05_EED;

fn bench_input(n: usize) -> Vec<u16> {
    let mut s = RootRng::new(BENCH_SEED).stream(Stream::Data, 0, 0);
    (0..n).map(|_| f32_to_half((s.uniform_f64() * 8.0 - 4.0) as f32)).collect()
}

/// Warm up once per path, then time `reps` calls of each and report the
/// medians plus the allocation counters and the output bit diff.
pub fn bench(op: &KernelOp, n: usize, reps: usize) -> Result<BenchReport> {
    if reps < 3 {
        return Err(Error::config(format!("bench: reps = {reps}, need at least 3")));
    }
    let cols = if n >= 1024 && n % 1024 == 0 { 1024 } else { n };
    let x = bench_input(n);

    let (u0, unfused_counter) = unfused_stable_op(&x, cols, op)?;
    let (f0, fused_counter) = fused_stable_op(&x, cols, op)?;
    let max_bit_diff = u0
        .iter()
        .zip(&f0)
        .map(|(a, b)| (a ^ b).count_ones())
        .max()
        .unwrap_or(0);

    let mut unfused_ns = Vec::with_capacity(reps);
    let mut fused_ns = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        std::hint::black_box(unfused_stable_op(std::hint::black_box(&x), cols, op)?);
        unfused_ns.push(t.elapsed().as_nanos());
        let t = Instant::now();
        std::hint::black_box(fused_stable_op(std::hint::black_box(&x), cols, op)?);
        fused_ns.push(t.elapsed().as_nanos());
    }
    let ns_per_call_unfused = median_ns(unfused_ns);
    let ns_per_call_fused = median_ns(fused_ns);
    Ok(BenchReport {
        op: op.label().to_string(),
        n,
        cols,
        reps,
        ns_per_call_unfused,
        ns_per_call_fused,
        throughput_ratio: ns_per_call_unfused as f64 / ns_per_call_fused.max(1) as f64,
        buffers_unfused: unfused_counter.n_buffers,
        bytes_unfused: unfused_counter.n_bytes,
        buffers_fused: fused_counter.n_buffers,
        bytes_fused: fused_counter.n_bytes,
        max_bit_diff,
    })
}

//! Counter-based deterministic randomness.
//!
//! Every random draw in the workspace comes from one root seed through named
//! substreams keyed by (seed, stream, step, op). A draw is a pure function of
//! its key and a counter, so resuming a run at step k replays exactly the
//! draws an uninterrupted run would have made, and fused/unfused kernels can
//! consume the identical dropout mask by sharing a key.

use crate::scalar::Scalar;

const MUL: u64 = 0x517c_c1b7_2722_0a95;
const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// splitmix64 finalizer.
pub(crate) fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn derive(base: u64, salt: u64) -> u64 {
    mix(base.wrapping_mul(MUL).wrapping_add(salt))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init,
    Mask,
    Sample,
    Dropout,
    Perturb,
    Data,
}

impl Stream {
    fn salt(self) -> u64 {
        match self {
            Stream::Init => 0x11,
            Stream::Mask => 0x22,
            Stream::Sample => 0x33,
            Stream::Dropout => 0x44,
            Stream::Perturb => 0x55,
            Stream::Data => 0x66,
        }
    }
}

/// The root generator: just the run seed. Streams are derived, never stored.
#[derive(Clone, Copy, Debug)]
pub struct RootRng {
    seed: u64,
}

impl RootRng {
    pub fn new(seed: u64) -> Self {
        RootRng { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Substream for one (stream, step, op) triple.
    pub fn stream(&self, stream: Stream, step: u64, op: u64) -> StreamRng {
        let key = derive(derive(derive(self.seed, stream.salt()), step), op);
        StreamRng { key, counter: 0 }
    }
}

/// A stateless-by-key generator. Sequential use advances `counter`; kernels
/// that want order-independence index positions directly via [`draw_at`].
#[derive(Clone, Copy, Debug)]
pub struct StreamRng {
    key: u64,
    counter: u64,
}

/// Position-keyed draw: element i of the stream `key`, independent of call order.
pub fn draw_at(key: u64, i: u64) -> u64 {
    mix(key ^ (i.wrapping_add(1)).wrapping_mul(GOLDEN))
}

/// Uniform f32 in [0,1) from raw bits (24-bit mantissa path, exact).
pub fn unit_f32(bits: u64) -> f32 {
    (bits >> 40) as f32 * (1.0 / (1u64 << 24) as f32)
}

impl StreamRng {
    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = draw_at(self.key, self.counter);
        self.counter += 1;
        v
    }

    /// Uniform in [0,1), 53-bit resolution.
    pub fn uniform_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform<S: Scalar>(&mut self) -> S {
        S::of_f64(self.uniform_f64())
    }

    /// Uniform index in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller. Two uniforms per draw; u1 is shifted
    /// into (0,1] so the log never sees zero.
    pub fn normal_f64(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal<S: Scalar>(&mut self) -> S {
        S::of_f64(self.normal_f64())
    }

    /// k distinct elements of `pool`, chosen uniformly (partial Fisher-Yates).
    pub fn choose<T: Copy>(&mut self, pool: &mut Vec<T>, k: usize) -> Vec<T> {
        debug_assert!(k <= pool.len());
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            let i = self.index(pool.len());
            out.push(pool.swap_remove(i));
        }
        out
    }
}

/// Hands out one dropout stream per site in a forward pass. The counter
/// advances whether or not the site ends up dropping anything, so stream
/// assignment never depends on train mode or dropout rates.
pub struct DropoutCtx {
    root: RootRng,
    step: u64,
    next_op: u64,
}

impl DropoutCtx {
    pub fn new(root: RootRng, step: u64) -> Self {
        DropoutCtx { root, step, next_op: 0 }
    }

    pub fn next_site(&mut self) -> StreamRng {
        let s = self.root.stream(Stream::Dropout, self.step, self.next_op);
        self.next_op += 1;
        s
    }
}

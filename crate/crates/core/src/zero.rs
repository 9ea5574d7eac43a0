//! Analytic per-GPU memory planner for ZeRO-style state partitioning.
//!
//! Accounting follows mixed-precision training: fp16 working parameters
//! and gradients (2 bytes each) plus a 16-byte-per-parameter optimizer
//! block (fp32 master weights, fp32 gradient accumulator, Adam m and v).
//! Stage 1 shards the optimizer block across GPUs, stage 2 also shards
//! gradients, stage 3 also shards parameters.

use serde::Serialize;

use crate::error::{Error, Result};

pub const PARAM_BYTES: f64 = 2.0;
pub const GRAD_BYTES: f64 = 2.0;
pub const DEFAULT_OPT_BYTES: f64 = 16.0;

#[derive(Clone, Copy, Debug, Serialize)]
pub struct MemoryPlan {
    pub total_params: f64,
    pub n_gpus: u32,
    pub stage: u8,
    pub params_bytes: f64,
    pub grads_bytes: f64,
    pub optimizer_bytes: f64,
    pub total_bytes: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct BytesConfig {
    pub param_bytes: f64,
    pub grad_bytes: f64,
    pub opt_bytes: f64,
}

impl Default for BytesConfig {
    fn default() -> Self {
        Self { param_bytes: PARAM_BYTES, grad_bytes: GRAD_BYTES, opt_bytes: DEFAULT_OPT_BYTES }
    }
}

pub fn plan(total_params: f64, n_gpus: u32, stage: u8, bytes: BytesConfig) -> Result<MemoryPlan> {
    if !(total_params > 0.0) {
        return Err(Error::config(format!("total_params must be positive, got {total_params}")));
    }
    if n_gpus == 0 {
        return Err(Error::config("n_gpus must be at least 1"));
    }
    if stage > 3 {
        return Err(Error::config(format!("stage must be 0..=3, got {stage}")));
    }
    let shard = f64::from(n_gpus);
    let params_bytes = total_params * bytes.param_bytes / if stage >= 3 { shard } else { 1.0 };
    let grads_bytes = total_params * bytes.grad_bytes / if stage >= 2 { shard } else { 1.0 };
    let optimizer_bytes = total_params * bytes.opt_bytes / if stage >= 1 { shard } else { 1.0 };
    Ok(MemoryPlan {
        total_params,
        n_gpus,
        stage,
        params_bytes,
        grads_bytes,
        optimizer_bytes,
        total_bytes: params_bytes + grads_bytes + optimizer_bytes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Base,
    Large,
    Xl,
    Xxl,
}

pub const PRESET_NAMES: [&str; 4] = ["Base", "Large", "XL", "XXL"];

impl Preset {
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "base" => Ok(Preset::Base),
            "large" => Ok(Preset::Large),
            "xl" => Ok(Preset::Xl),
            "xxl" => Ok(Preset::Xxl),
            _ => Err(Error::config(format!(
                "unknown preset `{name}`; known presets: {}",
                PRESET_NAMES.join(", ")
            ))),
        }
    }

    /// (main encoder, auxiliary encoder) parameter counts.
    pub fn params(self) -> (f64, f64) {
        match self {
            Preset::Base => (184e6, 29e6),
            Preset::Large => (434e6, 116e6),
            Preset::Xl => (1.6e9, 300e6),
            Preset::Xxl => (5.4e9, 600e6),
        }
    }

    pub fn total_params(self) -> f64 {
        let (main, aux) = self.params();
        main + aux
    }
}

pub fn preset_params(name: &str) -> Result<f64> {
    Ok(Preset::parse(name)?.total_params())
}

pub const GB: f64 = 1e9;
pub const GIB: f64 = 1024.0 * 1024.0 * 1024.0;

#[cfg(test)]
mod tests {
    use super::*;

    fn default_plan(params: f64, gpus: u32, stage: u8) -> MemoryPlan {
        plan(params, gpus, stage, BytesConfig::default()).unwrap()
    }

    #[test]
    fn six_billion_params_stage_zero_table_row() {
        let p = default_plan(6.0e9, 256, 0);
        assert_eq!(p.params_bytes / GB, 12.0);
        assert_eq!(p.grads_bytes / GB, 12.0);
        assert_eq!(p.optimizer_bytes / GB, 96.0);
        assert_eq!(p.total_bytes / GB, 120.0);
    }

    #[test]
    fn six_billion_params_stage_one_table_row() {
        let p = default_plan(6.0e9, 256, 1);
        assert_eq!(p.optimizer_bytes, 96e9 / 256.0);
        assert!((p.optimizer_bytes / 1e6 - 375.0).abs() < 1e-9);
        assert!((p.total_bytes / GB - 24.375).abs() < 1e-12);
    }

    #[test]
    fn six_billion_params_stage_three_table_row() {
        let p = default_plan(6.0e9, 256, 3);
        assert!((p.params_bytes / 1e6 - 46.875).abs() < 1e-9);
        assert!((p.grads_bytes / 1e6 - 46.875).abs() < 1e-9);
        assert!((p.optimizer_bytes / 1e6 - 375.0).abs() < 1e-9);
        assert!((p.total_bytes / 1e6 - 468.75).abs() < 1e-9);
    }

    #[test]
    fn stage_two_shards_gradients_too() {
        let p = default_plan(6.0e9, 256, 2);
        assert_eq!(p.params_bytes / GB, 12.0);
        assert_eq!(p.grads_bytes, 12e9 / 256.0);
        assert_eq!(p.optimizer_bytes, 96e9 / 256.0);
    }

    #[test]
    fn components_sum_to_total_always() {
        for stage in 0..=3u8 {
            for gpus in [1u32, 2, 8, 256] {
                let p = default_plan(1.23e9, gpus, stage);
                assert_eq!(p.total_bytes, p.params_bytes + p.grads_bytes + p.optimizer_bytes);
            }
        }
    }

    #[test]
    fn monotone_in_stage_and_gpus() {
        for gpus in [1u32, 4, 64] {
            let mut prev = f64::INFINITY;
            for stage in 0..=3u8 {
                let t = default_plan(2.0e9, gpus, stage).total_bytes;
                assert!(t <= prev, "stage {stage} grew at {gpus} gpus");
                prev = t;
            }
        }
        for stage in 0..=3u8 {
            let mut prev = f64::INFINITY;
            for gpus in [1u32, 2, 4, 8, 16] {
                let t = default_plan(2.0e9, gpus, stage).total_bytes;
                assert!(t <= prev, "gpus {gpus} grew at stage {stage}");
                prev = t;
            }
        }
    }

    #[test]
    fn single_gpu_stages_are_all_equal() {
        let none = default_plan(6.0e9, 1, 0);
        let full = default_plan(6.0e9, 1, 3);
        assert_eq!(none.total_bytes, full.total_bytes);
        assert_eq!(none.params_bytes, full.params_bytes);
        assert_eq!(none.grads_bytes, full.grads_bytes);
        assert_eq!(none.optimizer_bytes, full.optimizer_bytes);
    }

    #[test]
    fn plan_is_pure() {
        let a = default_plan(3.3e8, 7, 2);
        let b = default_plan(3.3e8, 7, 2);
        assert_eq!(a.total_bytes.to_bits(), b.total_bytes.to_bits());
    }

    #[test]
    fn custom_opt_bytes() {
        let bytes = BytesConfig { opt_bytes: 12.0, ..Default::default() };
        let p = plan(1e9, 1, 0, bytes).unwrap();
        assert_eq!(p.optimizer_bytes / GB, 12.0);
    }

    #[test]
    fn preset_totals() {
        assert_eq!(preset_params("XXL").unwrap(), 6.0e9);
        assert_eq!(preset_params("Base").unwrap(), 2.13e8);
        assert_eq!(preset_params("XL").unwrap(), 1.9e9);
        assert_eq!(preset_params("Large").unwrap(), 5.5e8);
        assert_eq!(preset_params("xxl").unwrap(), 6.0e9);
        let err = preset_params("Huge").unwrap_err().to_string();
        for name in PRESET_NAMES {
            assert!(err.contains(name), "{err}");
        }
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert!(plan(0.0, 1, 0, BytesConfig::default()).is_err());
        assert!(plan(1e9, 0, 0, BytesConfig::default()).is_err());
        assert!(plan(1e9, 1, 4, BytesConfig::default()).is_err());
    }
}

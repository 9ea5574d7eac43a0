//! The release gate behind `denoiselm verify`: gradient checks, loss
//! identities, the memory-planner table, and fused-kernel equivalence.
//! Every check is deterministic and prints exactly one line.

use std::f64::consts::LN_2;

use anyhow::{bail, Result};

use denoiselm::fused::{fused_stable_op, unfused_stable_op, KernelOp};
use denoiselm::gradcheck;
use denoiselm::objectives::{total_loss, MainObjective};
use denoiselm::rng::{RootRng, Stream};
use denoiselm::zero::{plan, BytesConfig, MemoryPlan, GB};
use denoiselm::{Scalar, Tape, Tensor};

struct Check {
    name: String,
    ok: bool,
    detail: String,
}

impl Check {
    fn new(name: impl Into<String>, ok: bool, detail: impl Into<String>) -> Self {
        Check { name: name.into(), ok, detail: detail.into() }
    }
}

pub fn run() -> Result<()> {
    let mut checks = Vec::new();
    gradient_checks(&mut checks)?;
    loss_identities(&mut checks)?;
    planner_table(&mut checks)?;
    fused_equivalence(&mut checks)?;

    let failed = checks.iter().filter(|c| !c.ok).count();
    for c in &checks {
        println!("{} {:<26} {}", if c.ok { "ok  " } else { "FAIL" }, c.name, c.detail);
    }
    println!("verify: {} checks, {} failed", checks.len(), failed);
    if failed > 0 {
        bail!("{failed} verification check(s) failed");
    }
    Ok(())
}

fn gradient_checks(checks: &mut Vec<Check>) -> Result<()> {
    for r in gradcheck::run_all(20)? {
        checks.push(Check::new(
            format!("grad {}", r.op),
            r.passed(),
            format!("max rel {:.3e} over {} instances", r.max_rel_err, r.instances),
        ));
    }
    Ok(())
}

fn combined_is_exactly_ten<S: Scalar>() -> denoiselm::Result<bool> {
    let tape: Tape<S> = Tape::new();
    let l_aux = tape.constant(Tensor::scalar(S::of_f64(2.0)));
    let l_rtd = tape.constant(Tensor::scalar(S::of_f64(0.1)));
    let l_sclm = tape.constant(Tensor::scalar(S::of_f64(3.0)));
    let total = total_loss(&tape, &l_aux, &l_rtd, Some(&l_sclm), MainObjective::RtdPlusSclm, 50.0)?;
    Ok(total.item() == S::of_f64(10.0))
}

fn loss_identities(checks: &mut Vec<Check>) -> Result<()> {
    let ok = combined_is_exactly_ten::<f32>()? && combined_is_exactly_ten::<f64>()?;
    checks.push(Check::new("loss total-algebra", ok, "2 + 50*0.1 + 3 == 10 exactly, f32 and f64"));

    let tape: Tape<f64> = Tape::new();
    let mut rtd = Tensor::param(vec![0.3, -0.7, 1.2, 0.05], &[4])?;
    tape.watch(&mut rtd);
    let mut aux = Tensor::param(vec![0.4, -0.2, 0.9, -1.1, 0.3, 0.7], &[2, 3])?;
    tape.watch(&mut aux);
    let l_rtd = tape.bce_with_logits(&rtd, &[true, false, true, false], None)?;
    let l_aux = tape.cross_entropy(&aux, &[2, 0], None)?;
    let total = total_loss(&tape, &l_aux, &l_rtd, None, MainObjective::RtdOnly, 0.0)?;
    let grads = tape.backward(&total)?;
    let rtd_dead = grads.wrt(&rtd).is_none_or(|g| g.iter().all(|&v| v == 0.0));
    let aux_live = grads.wrt(&aux).is_some_and(|g| g.iter().any(|&v| v != 0.0));
    checks.push(Check::new(
        "loss lambda-zero-grad",
        rtd_dead && aux_live,
        "lambda = 0 kills the detection gradient, auxiliary grad stays live",
    ));

    let tape: Tape<f64> = Tape::new();
    let z = tape.constant(Tensor::zeros(&[8]));
    let labels = [true, false, true, true, false, false, true, false];
    let l = tape.bce_with_logits(&z, &labels, None)?.item();
    checks.push(Check::new(
        "loss rtd-zero-logits",
        (l - LN_2).abs() < 1e-12,
        format!("zero logits give ln 2 (off by {:.1e})", (l - LN_2).abs()),
    ));

    let z = tape.constant(Tensor::zeros(&[4, 260]));
    let l = tape.cross_entropy(&z, &[0, 77, 259, 128], None)?.item();
    let want = 260.0f64.ln();
    checks.push(Check::new(
        "loss mlm-uniform-logits",
        (l - want).abs() < 1e-12,
        format!("uniform logits give ln V (off by {:.1e})", (l - want).abs()),
    ));
    Ok(())
}

fn planner_table(checks: &mut Vec<Check>) -> Result<()> {
    // 6.0e9 params on 256 GPUs, the published reference column.
    type Field = fn(&MemoryPlan) -> f64;
    let cells: [(&str, u8, Field, f64); 4] = [
        ("planner stage0-total", 0, |p| p.total_bytes, 120.0),
        ("planner stage1-optimizer", 1, |p| p.optimizer_bytes, 0.4),
        ("planner stage1-total", 1, |p| p.total_bytes, 24.4),
        ("planner stage3-total", 3, |p| p.total_bytes, 0.5),
    ];
    for (name, stage, field, expected) in cells {
        let p = plan(6.0e9, 256, stage, BytesConfig::default())?;
        let got = field(&p) / GB;
        let ok = ((got - expected) / expected).abs() <= 0.10;
        checks.push(Check::new(
            name,
            ok,
            format!("computed {got} GB, expected {expected} GB (within 10%)"),
        ));
    }
    Ok(())
}

/// Bit patterns that stress the half-precision paths: zeros of both signs,
/// subnormals, near-max magnitudes, and ordinary normals.
fn adversarial_halves(count: usize) -> Vec<u16> {
    let mut s = RootRng::new(0xAD5E).stream(Stream::Data, 7, 0);
    (0..count)
        .map(|_| {
            let d = s.next_u64();
            match d % 8 {
                0 => 0x0000,
                1 => 0x8000,
                2 => (d >> 16) as u16 & 0x83FF,
                3 => 0x7BFF - ((d >> 16) % 8) as u16,
                4 => 0xFBFF - ((d >> 16) % 8) as u16,
                _ => {
                    let man = (d >> 16) as u16 & 0x03FF;
                    let sign = ((d >> 32) & 1) as u16;
                    let exp = (1 + ((d >> 40) % 30)) as u16;
                    sign << 15 | exp << 10 | man
                }
            }
        })
        .collect()
}

fn fused_equivalence(checks: &mut Vec<Check>) -> Result<()> {
    let key = RootRng::new(0xD00D).stream(Stream::Dropout, 0, 0).key();
    let ops = [KernelOp::Softmax, KernelOp::SoftmaxDropout { p: 0.1, key }, KernelOp::LayerNorm];
    let x = adversarial_halves(10_240);
    for op in ops {
        let (u, cu) = unfused_stable_op(&x, 64, &op)?;
        let (f, cf) = fused_stable_op(&x, 64, &op)?;
        let max_bit_diff =
            u.iter().zip(&f).map(|(a, b)| (a ^ b).count_ones()).max().unwrap_or(0);
        let ok = max_bit_diff == 0 && cf.n_buffers == 0 && cu.n_buffers >= 2;
        checks.push(Check::new(
            format!("fused {}", op.label()),
            ok,
            format!(
                "{} halves, max bit diff {max_bit_diff}, {} vs {} f32 intermediates",
                x.len(),
                cu.n_buffers,
                cf.n_buffers
            ),
        ));
    }
    Ok(())
}

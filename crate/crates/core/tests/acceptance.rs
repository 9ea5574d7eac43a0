//! Release gate: one test per acceptance criterion, each printing a single
//! PASS/FAIL line (visible with `--nocapture`). Everything here goes through
//! the public API only, so the gate exercises exactly what a caller sees.

use std::time::{Duration, Instant};

use denoiselm::config::RunConfig;
use denoiselm::corpus::{self, Corpus};
use denoiselm::encoder::{init_pair, LayerNormPlacement, ModelConfig, PairWeights};
use denoiselm::finetune::{
    assemble_batch, init_head, parity_task, pdr_loss, FinetuneConfig, Finetuner, Head, PdrConfig,
};
use denoiselm::fused::{bench, fused_stable_op, unfused_stable_op, KernelOp};
use denoiselm::gradcheck;
use denoiselm::objectives::{
    pretrain_losses, sample_corruption, select_masks, total_loss, MainObjective, ObjectiveConfig,
};
use denoiselm::rng::{RootRng, Stream};
use denoiselm::trainer::{self, schedule::ScheduleConfig};
use denoiselm::zero::{plan, BytesConfig, GB};
use denoiselm::{Scalar, Tape, Tensor};
use serde_json::json;

fn p(label: impl Into<String>, ok: bool) -> (String, bool) {
    (label.into(), ok)
}

fn report(n: u32, summary: &str, parts: &[(String, bool)]) {
    let failing: Vec<&str> =
        parts.iter().filter(|(_, ok)| !ok).map(|(l, _)| l.as_str()).collect();
    if failing.is_empty() {
        println!("criterion {n} PASS  {summary}");
    } else {
        println!("criterion {n} FAIL  {summary} (failing: {})", failing.join(", "));
    }
    assert!(failing.is_empty(), "criterion {n} failing parts: {failing:?}");
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// The shared toy model of the fine-tuning unit tests.
fn tiny_cfg(depth_main: usize) -> ModelConfig {
    ModelConfig {
        hidden_size: 32,
        ffn_width: 64,
        depth_main,
        depth_aux: 1,
        attention_heads: 4,
        vocab_size: 260,
        max_seq_len: 16,
        relpos_bins: 8,
        relpos_max_distance: 16,
        layernorm_placement: LayerNormPlacement::Post,
        tupe_reset_cls: true,
        share_word_embeddings: true,
        share_position_embeddings: false,
        share_lm_bias: false,
        dropout_main: 0.1,
        dropout_aux: 0.0,
        init_std: 0.02,
        scaled_init: true,
    }
}

#[test]
fn c1_memory_plan_matches_reference_table() {
    let t0 = Instant::now();
    // 6.0e9 params on 256 GPUs against the published per-GPU table, every
    // cell of every stage within the 10% rounding tolerance.
    let reference: [(u8, [f64; 4]); 4] = [
        (0, [12.0, 12.0, 96.0, 120.0]),
        (1, [12.0, 12.0, 0.4, 24.4]),
        (2, [12.0, 0.05, 0.4, 12.4]),
        (3, [0.05, 0.05, 0.4, 0.5]),
    ];
    let names = ["params", "grads", "optimizer", "total"];
    let mut parts = Vec::new();
    for (stage, cells) in reference {
        let got = plan(6.0e9, 256, stage, BytesConfig::default()).unwrap();
        let gb = [
            got.params_bytes / GB,
            got.grads_bytes / GB,
            got.optimizer_bytes / GB,
            got.total_bytes / GB,
        ];
        for ((g, e), name) in gb.iter().zip(cells).zip(names) {
            parts.push(p(format!("stage{stage} {name}"), (g - e).abs() / e <= 0.10));
        }
    }
    parts.push(p("runtime < 1 s", t0.elapsed() < Duration::from_secs(1)));
    report(1, "memory plan for 6.0e9 params on 256 gpus matches the reference table within 10%", &parts);
}

#[test]
fn c2_every_op_passes_finite_difference_check() {
    let t0 = Instant::now();
    let results = gradcheck::run_all(20).unwrap();
    let mut parts = vec![p("covers 24 ops", results.len() == 24)];
    for r in &results {
        parts.push(p(r.op.clone(), r.passed() && r.instances >= 20));
    }
    parts.push(p("runtime < 30 s", t0.elapsed() < Duration::from_secs(30)));
    report(2, "all tape ops match 64-bit central differences to rel err < 1e-6 over 20 instances", &parts);
}

#[test]
fn c3_replace_rate_starts_near_mask_rate_then_falls() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let text = corpus::generate(300, (200, 800), 13).unwrap();
    std::fs::write(dir.path().join("corpus.txt"), &text).unwrap();
    let corpus = Corpus::from_text(&text).unwrap();
    let cfg = RunConfig::from_json(
        &json!({
            "model": {
                "hidden_size": 64, "ffn_width": 128, "depth_main": 4, "depth_aux": 2,
                "attention_heads": 4, "vocab_size": 260, "max_seq_len": 64
            },
            "schedule": { "peak_lr": 1e-3, "warmup_steps": 100, "max_steps": 2000 },
            "data": {
                "corpus": dir.path().join("corpus.txt").display().to_string(),
                "batch_size": 16, "seq_len": 64
            },
            "seed": 20,
            "metric_every": 100,
            "checkpoint_every": 2000
        })
        .to_string(),
    )
    .unwrap();
    let mut rate = Vec::new();
    trainer::train::<f32, _>(&cfg, &corpus, dir.path(), None, |row| rate.push(row.replace_rate))
        .unwrap();
    let early = mean(&rate[..100]);
    let late = mean(&rate[rate.len() - 100..]);
    let parts = vec![
        p("2000 steps ran", rate.len() == 2000),
        p("first 10 steps in [0.13, 0.16]", rate[..10].iter().all(|r| (0.13..=0.16).contains(r))),
        p("final-100 mean < 0.75 x first-100 mean", late < 0.75 * early),
        p("runtime <= 600 s", t0.elapsed() <= Duration::from_secs(600)),
    ];
    report(
        3,
        &format!("replace rate opens near the mask rate and falls: first-100 mean {early:.4}, final-100 mean {late:.4}"),
        &parts,
    );
}

#[test]
fn c4_scaled_init_std_and_deep_model_stability() {
    // (a) per-layer std of the residual-branch outputs
    let cfg = ModelConfig { hidden_size: 64, ffn_width: 128, ..tiny_cfg(12) };
    let pair = init_pair::<f64>(&cfg, &RootRng::new(1)).unwrap();
    let sample_std = |t: &Tensor<f64>| {
        let d = t.data();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        (d.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d.len() as f64).sqrt()
    };
    let mut parts = Vec::new();
    for (l, layer) in pair.main.layers.iter().enumerate() {
        let want = cfg.init_std / (2.0 * (l as f64 + 1.0)).sqrt();
        for (name, t) in [("wo", &layer.wo), ("w2", &layer.w2)] {
            let got = sample_std(t);
            parts.push(p(format!("layer{l} {name} std"), (got - want).abs() / want <= 0.05));
        }
    }

    // (b) a 12-layer model survives 500 steps at peak_lr 5e-4
    let dir = tempfile::tempdir().unwrap();
    let text = corpus::generate(150, (100, 400), 17).unwrap();
    std::fs::write(dir.path().join("corpus.txt"), &text).unwrap();
    let corpus = Corpus::from_text(&text).unwrap();
    let run_cfg = RunConfig::from_json(
        &json!({
            "model": {
                "hidden_size": 32, "ffn_width": 64, "depth_main": 12, "depth_aux": 2,
                "attention_heads": 4, "vocab_size": 260, "max_seq_len": 32
            },
            "schedule": { "peak_lr": 5e-4, "warmup_steps": 50, "max_steps": 500 },
            "data": {
                "corpus": dir.path().join("corpus.txt").display().to_string(),
                "batch_size": 4, "seq_len": 32
            },
            "seed": 11,
            "metric_every": 100,
            "checkpoint_every": 500
        })
        .to_string(),
    )
    .unwrap();
    let mut finite = true;
    let mut steps = 0u64;
    let outcome = trainer::train::<f32, _>(&run_cfg, &corpus, dir.path(), None, |row| {
        finite &= row.loss_total.is_finite() && row.grad_norm_preclip.is_finite();
        steps = row.step;
    });
    parts.push(p("500 steps completed", outcome.is_ok() && steps == 500));
    parts.push(p("all losses and grad norms finite", finite));
    report(4, "residual-output init std tracks init_std/sqrt(2(l+1)) and a 12-layer run stays finite", &parts);
}

#[test]
fn c5_loss_algebra_identities() {
    fn exactly_ten<S: Scalar>() -> bool {
        let tape: Tape<S> = Tape::new();
        let l_aux = tape.constant(Tensor::scalar(S::of_f64(2.0)));
        let l_rtd = tape.constant(Tensor::scalar(S::of_f64(0.1)));
        let l_sclm = tape.constant(Tensor::scalar(S::of_f64(3.0)));
        let total =
            total_loss(&tape, &l_aux, &l_rtd, Some(&l_sclm), MainObjective::RtdPlusSclm, 50.0)
                .unwrap();
        total.item() == S::of_f64(10.0)
    }
    let mut parts = vec![
        p("total(2.0, 0.1, 3.0, lambda=50) == 10.0 in f32", exactly_ten::<f32>()),
        p("total(2.0, 0.1, 3.0, lambda=50) == 10.0 in f64", exactly_ten::<f64>()),
    ];

    // lambda = 0 must leave every main-model parameter without gradient
    let cfg = tiny_cfg(2);
    let root = RootRng::new(8);
    let mut pair = init_pair::<f64>(&cfg, &root).unwrap();
    let corpus = Corpus::from_text(&corpus::generate(30, (40, 120), 21).unwrap()).unwrap();
    let (ids, pad) = corpus.sample_batch(4, 16, &root, 3);
    let tape = Tape::new();
    pair.watch_all(&tape);
    let objective = ObjectiveConfig {
        lambda: 0.0,
        main_objective: MainObjective::RtdOnly,
        ..ObjectiveConfig::default()
    };
    let losses =
        pretrain_losses(&tape, &cfg, &objective, &pair, &ids, &pad, 4, false, &root, 3).unwrap();
    let grads = tape.backward(&losses.total).unwrap();
    let mut main_dead = true;
    let mut aux_live = false;
    pair.for_each_param(|name, t| {
        let live = grads.wrt(t).is_some_and(|g| g.iter().any(|&v| v != 0.0));
        if name.starts_with("main.") {
            main_dead &= !live;
        } else {
            aux_live |= live;
        }
    });
    parts.push(p("lambda = 0 leaves the main model gradient-free", main_dead));
    parts.push(p("auxiliary gradient stays live", aux_live));

    // fresh weights predict near-uniformly, so the masked LM loss sits at ln V
    let tape2 = Tape::new();
    pair.watch_all(&tape2);
    let (ids2, pad2) = corpus.sample_batch(8, 16, &root, 5);
    let at_init = pretrain_losses(
        &tape2, &cfg, &ObjectiveConfig::default(), &pair, &ids2, &pad2, 8, false, &root, 5,
    )
    .unwrap();
    let l = at_init.l_aux.item();
    let want = 260f64.ln();
    parts.push(p("masked LM loss at init within 5% of ln V", (l - want).abs() / want <= 0.05));
    report(5, "joint loss algebra: exact combination, dead detection path at lambda 0, ln V at init", &parts);
}

#[test]
fn c6_corruption_touches_only_masked_positions() {
    let root = RootRng::new(0xC0117AC7);
    let (batch, seq, vocab) = (2usize, 24usize, 260usize);
    let n = batch * seq;
    let (mut outside_changed, mut mask_id_outside, mut replaced_outside) = (0u64, 0u64, 0u64);
    for trial in 0..10_000u64 {
        let mut data_rng = root.stream(Stream::Data, trial, 0);
        let x_orig: Vec<u32> = (0..n).map(|_| 4 + data_rng.index(vocab - 4) as u32).collect();
        let mut pad = vec![false; n];
        for s in 0..batch {
            let tail = data_rng.index(seq / 2);
            for i in (seq - tail)..seq {
                pad[s * seq + i] = true;
            }
        }
        let mut mask_rng = root.stream(Stream::Mask, trial, 0);
        let (x_mask, mask_set) = select_masks(&x_orig, &pad, batch, 0.15, &mut mask_rng).unwrap();
        let logits = Tensor::<f32>::randn(&[n, vocab], 2.0, &mut data_rng);
        let mut sample_rng = root.stream(Stream::Sample, trial, 0);
        let cb =
            sample_corruption(&logits, &x_orig, &x_mask, &mask_set, &pad, batch, &mut sample_rng)
                .unwrap();
        for i in 0..n {
            if cb.mask_set[i / seq].binary_search(&i).is_err() {
                outside_changed += u64::from(cb.x_noise[i] != x_orig[i]);
                mask_id_outside += u64::from(cb.x_mask[i] != x_orig[i]);
            }
        }
        for &i in &cb.replaced() {
            replaced_outside += u64::from(cb.mask_set[i / seq].binary_search(&i).is_err());
        }
    }
    let mut parts = vec![
        p("no position outside the mask set altered (10^4 batches)", outside_changed == 0),
        p("mask ids only inside the mask set", mask_id_outside == 0),
        p("replacement flags false outside the mask set", replaced_outside == 0),
    ];

    // detection + corrective losses must not reach auxiliary parameters;
    // the shared word table is the one permitted path
    let cfg = tiny_cfg(2);
    let root2 = RootRng::new(6);
    let mut pair = init_pair::<f64>(&cfg, &root2).unwrap();
    let corpus = Corpus::from_text(&corpus::generate(40, (40, 120), 11).unwrap()).unwrap();
    let (ids, pad) = corpus.sample_batch(4, 16, &root2, 1);
    let tape = Tape::new();
    pair.watch_all(&tape);
    let losses = pretrain_losses(
        &tape, &cfg, &ObjectiveConfig::default(), &pair, &ids, &pad, 4, false, &root2, 1,
    )
    .unwrap();
    let scaled_rtd = tape.scale(&losses.l_rtd, 50.0).unwrap();
    let main_only = tape.add(&scaled_rtd, losses.l_sclm.as_ref().unwrap()).unwrap();
    let grads = tape.backward(&main_only).unwrap();
    let mut aux_dead = true;
    let mut others_live = false;
    pair.for_each_param(|name, t| {
        let live = grads.wrt(t).is_some_and(|g| g.iter().any(|&v| v != 0.0));
        if name.starts_with("aux.") {
            aux_dead &= !live;
        } else {
            others_live |= live;
        }
    });
    parts.push(p("main losses reach no auxiliary parameter", aux_dead));
    parts.push(p("backward reached shared and main parameters", others_live));
    report(6, "sampling corrupts only selected positions and carries no gradient back", &parts);
}

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

#[test]
fn c7_fused_kernels_bit_identical_with_zero_intermediates() {
    let key = RootRng::new(0xD00D).stream(Stream::Dropout, 0, 0).key();
    let ops = [KernelOp::Softmax, KernelOp::SoftmaxDropout { p: 0.1, key }, KernelOp::LayerNorm];
    let xs = adversarial_halves(10_000);
    let cols = 50;
    let mut parts = Vec::new();
    for op in &ops {
        let (un, cu) = unfused_stable_op(&xs, cols, op).unwrap();
        let (fu, cf) = fused_stable_op(&xs, cols, op).unwrap();
        parts.push(p(format!("{} bit-identical", op.label()), un == fu));
        parts.push(p(format!("{} fused allocates 0 intermediates", op.label()), cf.n_buffers == 0));
        parts.push(p(format!("{} unfused allocates >= 2", op.label()), cu.n_buffers >= 2));
    }
    // throughput is machine-dependent: reported, never asserted
    for op in &ops {
        let b = bench(op, 16_384, 9).unwrap();
        println!(
            "criterion 7 note  {}: unfused {} ns/call, fused {} ns/call, ratio {:.2}",
            b.op, b.ns_per_call_unfused, b.ns_per_call_fused, b.throughput_ratio
        );
    }
    report(7, "fused kernels reproduce the unfused bit pattern on 10^4 adversarial halves", &parts);
}

#[test]
fn c8_posterior_regularizer_properties() {
    // (a) exact vanilla limits at alpha = 0 and c = 0
    let cfg = tiny_cfg(2);
    let root = RootRng::new(3);
    let mut pair = init_pair::<f32>(&cfg, &root).unwrap();
    let mut rng = root.stream(Stream::Init, 1, 0);
    let mut head = init_head::<f32>(cfg.hidden_size, 2, 0.02, &mut rng);
    let task = parity_task("p", 64, 8, 12, 17);
    let picks: Vec<usize> = (0..4).collect();
    let tb = assemble_batch(&task.train, &picks);
    let run = |pair: &mut PairWeights<f32>, head: &mut Head<f32>, pdr: PdrConfig| {
        let tape = Tape::new();
        pair.watch_all(&tape);
        tape.watch(&mut head.w);
        tape.watch(&mut head.b);
        let parts = pdr_loss(&tape, &cfg, pair, head, &tb, &pdr, true, &root, 1).unwrap();
        (parts.total.data()[0], parts.r.map(|r| r.data()[0]))
    };
    let (vanilla, r_off) =
        run(&mut pair, &mut head, PdrConfig { alpha: 0.0, ..PdrConfig::default() });
    let (zero_c, r_zero) = run(&mut pair, &mut head, PdrConfig { c: 0.0, ..PdrConfig::default() });
    let (active, r_on) = run(&mut pair, &mut head, PdrConfig::default());
    // f32 evaluation can round a divergence of order c^2 a few 1e-8 below
    // zero; exact nonnegativity is established in f64 below
    let mut parts = vec![
        p("alpha = 0 reports no divergence", r_off.is_none()),
        p("c = 0 divergence is exactly zero", r_zero == Some(0.0)),
        p("c = 0 total bitwise equals vanilla", vanilla.to_bits() == zero_c.to_bits()),
        p("active divergence finite", r_on.is_some_and(f32::is_finite)),
        p("active total >= vanilla total", active >= vanilla),
    ];

    // (b) divergence nonnegative over 1000 random batches, both kinds
    let cfg_b = ModelConfig { hidden_size: 16, ffn_width: 32, attention_heads: 2, ..tiny_cfg(1) };
    let root_b = RootRng::new(29);
    let mut pair_b = init_pair::<f64>(&cfg_b, &root_b).unwrap();
    let mut rng_b = root_b.stream(Stream::Init, 1, 0);
    let mut head_b = init_head::<f64>(cfg_b.hidden_size, 3, 0.5, &mut rng_b);
    let task_b = parity_task("p", 512, 8, 10, 3);
    let mut nonneg = true;
    for trial in 0..1000u64 {
        let kind = if trial % 2 == 0 {
            denoiselm::finetune::Divergence::ForwardKl
        } else {
            denoiselm::finetune::Divergence::SymmetricKl
        };
        let pdr = PdrConfig { c: 0.05, divergence: kind, ..PdrConfig::default() };
        let mut pick_rng = root_b.stream(Stream::Data, trial, 0);
        let picks: Vec<usize> = (0..2).map(|_| pick_rng.index(task_b.train.len())).collect();
        let tb = assemble_batch(&task_b.train, &picks);
        let tape = Tape::new();
        pair_b.watch_all(&tape);
        tape.watch(&mut head_b.w);
        tape.watch(&mut head_b.b);
        let out = pdr_loss(&tape, &cfg_b, &pair_b, &head_b, &tb, &pdr, true, &root_b, trial).unwrap();
        let r = out.r.unwrap().data()[0];
        nonneg &= r >= 0.0 && r.is_finite() && out.total.data()[0] >= out.ce.data()[0];
    }
    parts.push(p("divergence nonnegative and finite over 1000 batches", nonneg));

    // (c) the toy task trains to >= 95% dev accuracy
    let cfg_c = tiny_cfg(2);
    let pair_c = init_pair::<f32>(&cfg_c, &RootRng::new(41)).unwrap();
    let fcfg = FinetuneConfig {
        schedule: ScheduleConfig { peak_lr: 3e-3, warmup_steps: 30, max_steps: 300, clip_norm: 2.0 },
        batch_size: 16,
        pdr: PdrConfig { alpha: 0.0, ..PdrConfig::default() },
        seed: 41,
    };
    let mut tuner =
        Finetuner::new(cfg_c, pair_c, vec![parity_task("parity", 256, 64, 12, 5)], fcfg).unwrap();
    let acc = tuner.run(|_| {}).unwrap().accuracy["parity"];
    parts.push(p("toy task dev accuracy >= 0.95", acc >= 0.95));

    // (d) seed-variance comparison is logged, not asserted; the schedule is
    // cut short of convergence so seeds still disagree
    let run_seed = |pdr: PdrConfig, seed: u64| -> f64 {
        let cfg = tiny_cfg(2);
        let pair = init_pair::<f32>(&cfg, &RootRng::new(seed)).unwrap();
        let fcfg = FinetuneConfig {
            schedule: ScheduleConfig {
                peak_lr: 3e-3,
                warmup_steps: 14,
                max_steps: 140,
                clip_norm: 2.0,
            },
            batch_size: 16,
            pdr,
            seed,
        };
        let mut tuner =
            Finetuner::new(cfg, pair, vec![parity_task("parity", 256, 64, 12, 5)], fcfg).unwrap();
        tuner.run(|_| {}).unwrap().accuracy["parity"]
    };
    let seeds = [1u64, 2, 3, 4, 5];
    // heavier than the defaults: at this scale the divergence needs real
    // weight before it moves any dev prediction
    let with_pdr = PdrConfig { alpha: 2.0, c: 0.5, ..PdrConfig::default() };
    let reg: Vec<f64> = seeds.iter().map(|&s| run_seed(with_pdr, s)).collect();
    let van: Vec<f64> =
        seeds.iter().map(|&s| run_seed(PdrConfig { alpha: 0.0, ..PdrConfig::default() }, s)).collect();
    println!(
        "criterion 8 note  dev accuracy across seeds 1-5: regularized {reg:?} (mean {:.3} std {:.4}), vanilla {van:?} (mean {:.3} std {:.4})",
        mean(&reg),
        std_dev(&reg),
        mean(&van),
        std_dev(&van)
    );
    report(8, &format!("regularizer limits exact, divergence nonnegative, toy accuracy {acc:.3}"), &parts);
}

#[test]
fn c9_bitwise_determinism_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let text = corpus::generate(40, (60, 200), 5).unwrap();
    std::fs::write(dir.path().join("corpus.txt"), &text).unwrap();
    let corpus = Corpus::from_text(&text).unwrap();
    let cfg = RunConfig::from_json(
        &json!({
            "model": {
                "hidden_size": 16, "ffn_width": 32, "depth_main": 2, "depth_aux": 1,
                "attention_heads": 2, "vocab_size": 260, "max_seq_len": 16
            },
            "schedule": { "peak_lr": 1e-3, "warmup_steps": 2, "max_steps": 8 },
            "data": {
                "corpus": dir.path().join("corpus.txt").display().to_string(),
                "batch_size": 2, "seq_len": 16
            },
            "seed": 9,
            "metric_every": 2,
            "checkpoint_every": 4
        })
        .to_string(),
    )
    .unwrap();
    let run = |sub: &str, resume: Option<&std::path::Path>| {
        let out = dir.path().join(sub);
        trainer::train::<f32, _>(&cfg, &corpus, &out, resume, |_| {}).unwrap();
        out
    };
    let a = run("a", None);
    let b = run("b", None);
    let resume_from = a.join("checkpoint-4.ckpt");
    let c = run("c", Some(&resume_from));
    let read = |dir: &std::path::Path, name: &str| std::fs::read(dir.join(name)).unwrap();
    let parts = vec![
        p(
            "identical seeds give byte-identical metrics.csv",
            read(&a, "metrics.csv") == read(&b, "metrics.csv"),
        ),
        p(
            "identical seeds give byte-identical final checkpoints",
            read(&a, "checkpoint-final.ckpt") == read(&b, "checkpoint-final.ckpt"),
        ),
        p(
            "resuming mid-run lands on the uninterrupted checkpoint",
            read(&c, "checkpoint-final.ckpt") == read(&a, "checkpoint-final.ckpt"),
        ),
    ];
    report(9, "reruns and resumed runs reproduce artifacts byte for byte", &parts);
}

//! Fine-tuning of the pretrained main encoder: a linear head per task on
//! the [CLS] state, posterior-stability regularization against bounded
//! input-embedding perturbations, and proportional multi-task scheduling.
//!
//! Only the main model and its shared tables train here; auxiliary weights
//! ride along untouched, and each task's head steps only when that task's
//! batch is drawn, so unrelated heads stay bitwise frozen.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::PAD_ID;
use crate::encoder::forward::{forward, forward_perturbed, ForwardOut};
use crate::encoder::{ModelConfig, PairWeights, Which};
use crate::error::{Error, Result};
use crate::rng::{DropoutCtx, RootRng, Stream, StreamRng};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};
use crate::trainer::optim::{adam_update_buffer, clip_gradients, OptimizerState};
use crate::trainer::schedule::{lr_at, ScheduleConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    ForwardKl,
    SymmetricKl,
}

/// Posterior-stability regularizer settings. `c` is the L2 radius of the
/// per-sequence perturbation ball at the embedding sum; `alpha` weights the
/// divergence term against the task loss.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PdrConfig {
    pub alpha: f64,
    pub c: f64,
    pub perturbations_per_step: usize,
    pub divergence: Divergence,
}

impl Default for PdrConfig {
    fn default() -> Self {
        PdrConfig { alpha: 1.0, c: 1e-3, perturbations_per_step: 1, divergence: Divergence::ForwardKl }
    }
}

impl PdrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::config(format!("pdr: alpha = {} must be finite and >= 0", self.alpha)));
        }
        if !(self.c >= 0.0) || !self.c.is_finite() {
            return Err(Error::config(format!("pdr: c = {} must be finite and >= 0", self.c)));
        }
        if self.perturbations_per_step == 0 {
            return Err(Error::config("pdr: perturbations_per_step must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub ids: Vec<u32>,
    pub label: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub n_classes: usize,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
}

impl TaskSpec {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::config(format!("task {}: needs at least 2 classes", self.name)));
        }
        if self.train.is_empty() || self.dev.is_empty() {
            return Err(Error::data(format!("task {}: train and dev must be non-empty", self.name)));
        }
        for (split, examples) in [("train", &self.train), ("dev", &self.dev)] {
            for (i, ex) in examples.iter().enumerate() {
                if ex.label >= self.n_classes {
                    return Err(Error::data(format!(
                        "task {}: {split}[{i}] label {} out of range for {} classes",
                        self.name, ex.label, self.n_classes
                    )));
                }
                if ex.ids.is_empty() || ex.ids.len() > cfg.max_seq_len {
                    return Err(Error::data(format!(
                        "task {}: {split}[{i}] length {} outside 1..={}",
                        self.name,
                        ex.ids.len(),
                        cfg.max_seq_len
                    )));
                }
                if let Some(&bad) = ex.ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
                    return Err(Error::data(format!(
                        "task {}: {split}[{i}] token {bad} outside vocab {}",
                        self.name, cfg.vocab_size
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Linear [d -> n_classes] classifier over the [CLS] hidden state.
pub struct Head<S: Scalar> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

pub fn init_head<S: Scalar>(d: usize, n_classes: usize, std: f64, rng: &mut StreamRng) -> Head<S> {
    Head {
        w: Tensor::randn(&[d, n_classes], S::of_f64(std), rng),
        b: Tensor::param(vec![S::zero(); n_classes], &[n_classes]).expect("bias"),
    }
}

/// Gaussian noise per sequence, projected into the L2 ball of radius `c`:
/// whenever the raw draw is longer than `c` it is rescaled onto the sphere.
/// Returns a flat [seqs*seq_len, d] buffer; c = 0 gives exact zeros.
pub fn perturb_offset<S: Scalar>(
    seqs: usize,
    seq_len: usize,
    d: usize,
    c: f64,
    rng: &mut StreamRng,
) -> Vec<S> {
    let m = seq_len * d;
    let mut out = vec![S::zero(); seqs * m];
    if c == 0.0 {
        // still consume the draws so downstream streams don't shift with c
        for _ in 0..seqs * m {
            rng.next_u64();
        }
        return out;
    }
    let mut z = vec![0.0f64; m];
    for s in 0..seqs {
        let mut norm_sq = 0.0;
        for zi in z.iter_mut() {
            *zi = rng.normal_f64();
            norm_sq += *zi * *zi;
        }
        let norm = norm_sq.sqrt();
        let factor = if norm > c { c / norm } else { 1.0 };
        for (o, &zi) in out[s * m..(s + 1) * m].iter_mut().zip(&z) {
            *o = S::of_f64(zi * factor);
        }
    }
    out
}

/// Mean over rows of KL(softmax(a) || softmax(b)) for [B, K] logits.
/// Composed from tape ops, so gradients flow into both arguments.
pub fn kl_divergence<S: Scalar>(tape: &Tape<S>, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(Error::data(format!(
            "kl_divergence: logit shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let rows = a.shape()[0];
    let p = tape.softmax(a, 1)?;
    let diff = tape.sub(&tape.log_softmax(a, 1)?, &tape.log_softmax(b, 1)?)?;
    tape.scale(&tape.reduce_sum(&tape.mul(&p, &diff)?)?, S::of_f64(1.0 / rows as f64))
}

fn divergence<S: Scalar>(
    tape: &Tape<S>,
    kind: Divergence,
    a: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<Tensor<S>> {
    match kind {
        Divergence::ForwardKl => kl_divergence(tape, a, b),
        Divergence::SymmetricKl => {
            let fwd = kl_divergence(tape, a, b)?;
            let rev = kl_divergence(tape, b, a)?;
            tape.scale(&tape.add(&fwd, &rev)?, S::of_f64(0.5))
        }
    }
}

/// One task batch, sequences padded to a common length.
pub struct TaskBatch {
    pub ids: Vec<u32>,
    pub pad: Vec<bool>,
    pub labels: Vec<usize>,
    pub batch: usize,
}

pub fn assemble_batch(examples: &[Example], picks: &[usize]) -> TaskBatch {
    let seq = picks.iter().map(|&i| examples[i].ids.len()).max().unwrap_or(1);
    let mut ids = Vec::with_capacity(picks.len() * seq);
    let mut pad = Vec::with_capacity(picks.len() * seq);
    let mut labels = Vec::with_capacity(picks.len());
    for &i in picks {
        let ex = &examples[i];
        ids.extend_from_slice(&ex.ids);
        pad.extend(std::iter::repeat(false).take(ex.ids.len()));
        ids.extend(std::iter::repeat(PAD_ID).take(seq - ex.ids.len()));
        pad.extend(std::iter::repeat(true).take(seq - ex.ids.len()));
        labels.push(ex.label);
    }
    TaskBatch { ids, pad, labels, batch: picks.len() }
}

/// Class logits [B, K] from one main-model pass: [CLS] row through the head.
#[allow(clippy::too_many_arguments)]
fn class_logits<S: Scalar>(
    tape: &Tape<S>,
    cfg: &ModelConfig,
    pair: &PairWeights<S>,
    head: &Head<S>,
    tb: &TaskBatch,
    train: bool,
    dropout: &mut DropoutCtx,
    offset: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    let out: ForwardOut<S> = match offset {
        None => forward(tape, cfg, pair, Which::Main, &tb.ids, &tb.pad, tb.batch, train, dropout)?,
        Some(off) => forward_perturbed(
            tape, cfg, pair, Which::Main, &tb.ids, &tb.pad, tb.batch, train, dropout, off,
        )?,
    };
    let seq = tb.ids.len() / tb.batch;
    let cls_rows: Vec<usize> = (0..tb.batch).map(|b| b * seq).collect();
    let cls = tape.gather_rows(&out.hidden, &cls_rows)?;
    tape.add_bias(&tape.matmul(&cls, &head.w)?, &head.b)
}

pub struct PdrParts<S: Scalar> {
    pub total: Tensor<S>,
    pub ce: Tensor<S>,
    /// Divergence term averaged over perturbation draws; None when alpha = 0.
    pub r: Option<Tensor<S>>,
}

/// Task cross-entropy plus alpha times the posterior divergence between the
/// clean pass and perturbed passes. Both passes replay the same dropout
/// sites (same root and step), so the divergence isolates the perturbation.
/// The noise enters as a tape constant: no gradient through the draw.
#[allow(clippy::too_many_arguments)]
pub fn pdr_loss<S: Scalar>(
    tape: &Tape<S>,
    cfg: &ModelConfig,
    pair: &PairWeights<S>,
    head: &Head<S>,
    tb: &TaskBatch,
    pdr: &PdrConfig,
    train: bool,
    root: &RootRng,
    step: u64,
) -> Result<PdrParts<S>> {
    pdr.validate()?;
    let mut drop_clean = DropoutCtx::new(*root, step);
    let clean = class_logits(tape, cfg, pair, head, tb, train, &mut drop_clean, None)?;
    let ce = tape.cross_entropy(&clean, &tb.labels, None)?;
    if pdr.alpha == 0.0 {
        return Ok(PdrParts { total: ce.clone(), ce, r: None });
    }

    let seq = tb.ids.len() / tb.batch;
    let d = cfg.hidden_size;
    let mut r_sum: Option<Tensor<S>> = None;
    for k in 0..pdr.perturbations_per_step {
        let mut rng = root.stream(Stream::Perturb, step, k as u64);
        let eps = perturb_offset::<S>(tb.batch, seq, d, pdr.c, &mut rng);
        let offset = tape.constant(Tensor::from_vec(eps, &[tb.batch * seq, d])?);
        let mut drop_pert = DropoutCtx::new(*root, step);
        let pert = class_logits(tape, cfg, pair, head, tb, train, &mut drop_pert, Some(&offset))?;
        let r_k = divergence(tape, pdr.divergence, &clean, &pert)?;
        r_sum = Some(match r_sum {
            None => r_k,
            Some(acc) => tape.add(&acc, &r_k)?,
        });
    }
    let r = tape.scale(&r_sum.expect("at least one draw"), S::of_f64(1.0 / pdr.perturbations_per_step as f64))?;
    let total = tape.add(&ce, &tape.scale(&r, S::of_f64(pdr.alpha))?)?;
    Ok(PdrParts { total, ce, r: Some(r) })
}

/// Smooth proportional interleave: each step goes to the task with the
/// largest accumulated credit, credits growing by dataset share.
pub fn proportional_schedule(counts: &[usize], steps: usize) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    let mut credit = vec![0.0f64; counts.len()];
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        for (cr, &n) in credit.iter_mut().zip(counts) {
            *cr += n as f64 / total as f64;
        }
        let pick = credit
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        credit[pick] -= 1.0;
        out.push(pick);
    }
    out
}

#[derive(Clone, Debug)]
pub struct StepInfo {
    pub step: u64,
    pub task: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_ce: f64,
    /// NaN when alpha = 0 (no divergence term).
    pub loss_r: f64,
    pub grad_norm_preclip: f64,
    pub clipped: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct FinetuneReport {
    pub steps: u64,
    pub seed: u64,
    /// Task name -> dev accuracy, in name order.
    pub accuracy: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub schedule: ScheduleConfig,
    pub batch_size: usize,
    #[serde(default)]
    pub pdr: PdrConfig,
    pub seed: u64,
}

pub struct Finetuner<S: Scalar> {
    pub cfg: ModelConfig,
    pub pair: PairWeights<S>,
    pub tasks: Vec<TaskSpec>,
    pub heads: Vec<Head<S>>,
    pub fcfg: FinetuneConfig,
    root: RootRng,
    enc_opt: OptimizerState<S>,
    head_opts: Vec<OptimizerState<S>>,
}

fn trains_here(name: &str) -> bool {
    !name.starts_with("aux.")
}

impl<S: Scalar> Finetuner<S> {
    pub fn new(
        cfg: ModelConfig,
        pair: PairWeights<S>,
        tasks: Vec<TaskSpec>,
        fcfg: FinetuneConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        fcfg.schedule.validate()?;
        fcfg.pdr.validate()?;
        if fcfg.batch_size == 0 {
            return Err(Error::config("finetune: batch_size must be at least 1"));
        }
        if tasks.is_empty() {
            return Err(Error::config("finetune: need at least one task"));
        }
        for t in &tasks {
            t.validate(&cfg)?;
        }
        let root = RootRng::new(fcfg.seed);
        let heads: Vec<Head<S>> = tasks
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut rng = root.stream(Stream::Init, 1, i as u64);
                init_head(cfg.hidden_size, t.n_classes, cfg.init_std, &mut rng)
            })
            .collect();
        let mut enc_sizes = Vec::new();
        pair.for_each_param(|name, t| {
            if trains_here(name) {
                enc_sizes.push(t.len());
            }
        });
        let enc_opt = OptimizerState::new(&enc_sizes);
        let head_opts = heads.iter().map(|h| OptimizerState::new(&[h.w.len(), h.b.len()])).collect();
        Ok(Finetuner { cfg, pair, tasks, heads, fcfg, root, enc_opt, head_opts })
    }

    /// One optimization step on a batch of `task`. Steps the shared encoder
    /// and that task's head only.
    pub fn train_step(&mut self, task: usize, step: u64) -> Result<StepInfo> {
        let mut rng = self.root.stream(Stream::Data, step, task as u64);
        let picks: Vec<usize> =
            (0..self.fcfg.batch_size).map(|_| rng.index(self.tasks[task].train.len())).collect();
        let tb = assemble_batch(&self.tasks[task].train, &picks);

        let (losses, mut grads) = {
            let tape = Tape::new();
            self.pair.watch_all(&tape);
            tape.watch(&mut self.heads[task].w);
            tape.watch(&mut self.heads[task].b);
            let parts = pdr_loss(
                &tape,
                &self.cfg,
                &self.pair,
                &self.heads[task],
                &tb,
                &self.fcfg.pdr,
                true,
                &self.root,
                step,
            )?;
            let losses = (
                parts.total.data()[0].as_f64(),
                parts.ce.data()[0].as_f64(),
                parts.r.as_ref().map_or(f64::NAN, |r| r.data()[0].as_f64()),
            );
            let g = tape.backward(&parts.total)?;
            let mut grads: Vec<Vec<S>> = Vec::new();
            self.pair.for_each_param(|name, t| {
                if trains_here(name) {
                    grads.push(g.wrt(t).map_or_else(|| vec![S::zero(); t.len()], <[S]>::to_vec));
                }
            });
            for t in [&self.heads[task].w, &self.heads[task].b] {
                grads.push(g.wrt(t).map_or_else(|| vec![S::zero(); t.len()], <[S]>::to_vec));
            }
            (losses, grads)
        };

        let (grad_norm_preclip, clipped) = clip_gradients(&mut grads, self.fcfg.schedule.clip_norm)?;
        let lr = lr_at(step, &self.fcfg.schedule);

        let k = self.enc_opt.begin_step(lr);
        let (pair, enc_opt) = (&mut self.pair, &mut self.enc_opt);
        let mut idx = 0;
        pair.for_each_param_mut(|name, t| {
            if trains_here(name) {
                adam_update_buffer(t.data_mut(), &grads[idx], &mut enc_opt.m[idx], &mut enc_opt.v[idx], k);
                idx += 1;
            }
        });
        let hk = self.head_opts[task].begin_step(lr);
        let hopt = &mut self.head_opts[task];
        let head = &mut self.heads[task];
        adam_update_buffer(head.w.data_mut(), &grads[idx], &mut hopt.m[0], &mut hopt.v[0], hk);
        adam_update_buffer(head.b.data_mut(), &grads[idx + 1], &mut hopt.m[1], &mut hopt.v[1], hk);

        Ok(StepInfo {
            step,
            task,
            lr,
            loss_total: losses.0,
            loss_ce: losses.1,
            loss_r: losses.2,
            grad_norm_preclip,
            clipped,
        })
    }

    /// Dev-set accuracy for one task, evaluated without dropout.
    pub fn dev_accuracy(&mut self, task: usize) -> Result<f64> {
        let dev = self.tasks[task].dev.clone();
        let mut correct = 0usize;
        for chunk in (0..dev.len()).collect::<Vec<_>>().chunks(self.fcfg.batch_size.max(1)) {
            let tb = assemble_batch(&dev, chunk);
            let tape = Tape::new();
            self.pair.watch_all(&tape);
            tape.watch(&mut self.heads[task].w);
            tape.watch(&mut self.heads[task].b);
            let mut drop = DropoutCtx::new(self.root, 0);
            let logits =
                class_logits(&tape, &self.cfg, &self.pair, &self.heads[task], &tb, false, &mut drop, None)?;
            let k = self.tasks[task].n_classes;
            for (row, &label) in logits.data().chunks(k).zip(&tb.labels) {
                let pred = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                correct += usize::from(pred == label);
            }
        }
        Ok(correct as f64 / dev.len() as f64)
    }

    /// Full run: proportional task interleave for `schedule.max_steps`
    /// steps, then dev accuracy per task.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepInfo)) -> Result<FinetuneReport> {
        let counts: Vec<usize> = self.tasks.iter().map(|t| t.train.len()).collect();
        let order = proportional_schedule(&counts, self.fcfg.schedule.max_steps as usize);
        for (i, &task) in order.iter().enumerate() {
            let info = self.train_step(task, (i + 1) as u64)?;
            on_step(&info);
        }
        let mut accuracy = BTreeMap::new();
        for t in 0..self.tasks.len() {
            accuracy.insert(self.tasks[t].name.clone(), self.dev_accuracy(t)?);
        }
        Ok(FinetuneReport { steps: self.fcfg.schedule.max_steps, seed: self.fcfg.seed, accuracy })
    }
}

/// Mean and population std of per-task accuracy across seed runs.
pub fn accuracy_summary(reports: &[FinetuneReport]) -> BTreeMap<String, (f64, f64)> {
    let mut by_task: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in reports {
        for (task, &acc) in &r.accuracy {
            by_task.entry(task.clone()).or_default().push(acc);
        }
    }
    by_task
        .into_iter()
        .map(|(task, accs)| {
            let n = accs.len() as f64;
            let mean = accs.iter().sum::<f64>() / n;
            let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            (task, (mean, var.sqrt()))
        })
        .collect()
}

/// Toy task: positions 1 and 2 hold marker tokens drawn from {a, b}; the
/// label is 1 when they differ. Fillers are random alphabet bytes, so the
/// model must learn to read exactly the marker slots.
pub fn parity_task(name: &str, n_train: usize, n_dev: usize, seq_len: usize, seed: u64) -> TaskSpec {
    use crate::corpus::{CLS_ID, SEP_ID};
    assert!(seq_len >= 5, "need room for CLS, two markers, filler, SEP");
    let marker = |bit: u64| -> u32 {
        if bit == 0 { u32::from(b'a') + 4 } else { u32::from(b'b') + 4 }
    };
    let root = RootRng::new(seed);
    let gen = |count: usize, salt: u64| -> Vec<Example> {
        let mut rng = root.stream(Stream::Data, salt, 0);
        (0..count)
            .map(|_| {
                let (m1, m2) = (rng.next_u64() & 1, rng.next_u64() & 1);
                let mut ids = vec![CLS_ID, marker(m1), marker(m2)];
                for _ in 3..seq_len - 1 {
                    let ch = crate::corpus::ALPHABET[rng.index(crate::corpus::ALPHABET.len())];
                    ids.push(u32::from(ch) + 4);
                }
                ids.push(SEP_ID);
                Example { ids, label: usize::from(m1 != m2) }
            })
            .collect()
    };
    TaskSpec { name: name.to_string(), n_classes: 2, train: gen(n_train, 0), dev: gen(n_dev, 1) }
}

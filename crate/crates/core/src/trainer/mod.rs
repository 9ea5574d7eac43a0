//! Joint pretraining loop for the auxiliary + main pair: one combined
//! loss, one optimizer over the union of parameters, counter-based
//! randomness keyed by step so a resumed run replays bit-for-bit.

pub mod checkpoint;
pub mod metrics;
pub mod optim;
pub mod schedule;

use std::path::{Path, PathBuf};
use std::sync::mpsc;

use crate::config::RunConfig;
use crate::corpus::Corpus;
use crate::encoder::{init_pair, PairWeights};
use crate::error::{Error, Result};
use crate::objectives::pretrain_losses;
use crate::rng::RootRng;
use crate::scalar::Scalar;
use crate::tensor::Tape;
use metrics::{MetricsRow, MetricsWriter};
use optim::{clip_gradients, OptimizerState};
use schedule::lr_at;

#[derive(Debug)]
pub struct TrainReport {
    pub steps_run: u64,
    pub final_step: u64,
    pub final_checkpoint: PathBuf,
}

/// Per-tensor element counts in traversal order, for sizing optimizer state.
pub fn param_sizes<S: Scalar>(pair: &PairWeights<S>) -> Vec<usize> {
    let mut sizes = Vec::new();
    pair.for_each_param(|_, t| sizes.push(t.len()));
    sizes
}

/// Runs the whole schedule (or the remainder of it when resuming) and
/// invokes `on_row` with every step's metrics. The CSV file in `out_dir`
/// only receives rows at the configured cadence plus abort diagnostics.
pub fn train<S: Scalar, F: FnMut(&MetricsRow)>(
    cfg: &RunConfig,
    corpus: &Corpus,
    out_dir: &Path,
    resume: Option<&Path>,
    mut on_row: F,
) -> Result<TrainReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let root = RootRng::new(cfg.seed);
    let mut pair = init_pair::<S>(&cfg.model, &root)?;
    let mut opt = OptimizerState::<S>::new(&param_sizes(&pair));
    let mut start_step = 1u64;
    if let Some(path) = resume {
        let ckpt = checkpoint::load(path)?;
        checkpoint::restore(&ckpt, &mut pair, &mut opt)?;
        start_step = ckpt.step + 1;
    }

    let csv_path = out_dir.join("metrics.csv");
    let mut csv = if resume.is_some() && csv_path.exists() {
        let file = std::fs::OpenOptions::new().append(true).open(&csv_path)?;
        MetricsWriter::resume(file)
    } else {
        MetricsWriter::new(std::fs::File::create(&csv_path)?)?
    };

    let config_json = cfg.effective_json();
    // Feeding this file back as --config reproduces the run bit for bit.
    let pretty = serde_json::to_string_pretty(&config_json).map_err(|e| Error::Json(e.to_string()))?;
    std::fs::write(out_dir.join("effective-config.json"), pretty + "\n")?;
    let final_path = out_dir.join("checkpoint-final.ckpt");
    let max = cfg.schedule.max_steps;
    if start_step > max {
        checkpoint::save(&final_path, &config_json, max, &pair, &opt)?;
        return Ok(TrainReport { steps_run: 0, final_step: max, final_checkpoint: final_path });
    }

    let (batch_size, seq_len) = (cfg.data.batch_size, cfg.data.seq_len);
    let result: Result<TrainReport> = std::thread::scope(|scope| {
        // Batch prep overlaps the update of the previous step through a
        // small handoff queue; batches are a pure function of (seed, step)
        // so the overlap cannot change any trained value.
        let (tx, rx) = mpsc::sync_channel::<(u64, Vec<u32>, Vec<bool>)>(4);
        scope.spawn(move || {
            for step in start_step..=max {
                let (ids, pad) = corpus.sample_batch(batch_size, seq_len, &root, step);
                if tx.send((step, ids, pad)).is_err() {
                    return;
                }
            }
        });

        for step in start_step..=max {
            let (got, ids, pad) = rx
                .recv()
                .map_err(|_| Error::data("batch producer stopped early"))?;
            debug_assert_eq!(got, step);
            let lr = lr_at(step, &cfg.schedule);

            let abort = |pair: &PairWeights<S>,
                         opt: &OptimizerState<S>,
                         csv: &mut MetricsWriter<std::fs::File>,
                         row: MetricsRow,
                         what: String|
             -> Error {
                let _ = csv.write(&row);
                let _ = csv.flush();
                let last_good = out_dir.join("checkpoint-last-good.ckpt");
                let _ = checkpoint::save(&last_good, &config_json, step - 1, pair, opt);
                Error::NonFinite { step, what }
            };

            let (losses, m, grads) = {
                let tape: Tape<S> = Tape::new();
                pair.watch_all(&tape);
                let out = match pretrain_losses(
                    &tape, &cfg.model, &cfg.objective, &pair, &ids, &pad, batch_size, true,
                    &root, step,
                ) {
                    Ok(out) => out,
                    // Non-finite values tripped a kernel check mid-forward:
                    // same abort protocol as a non-finite loss.
                    Err(Error::Numeric(what)) => {
                        let row = MetricsRow {
                            step,
                            lr,
                            loss_total: f64::NAN,
                            loss_aux: f64::NAN,
                            loss_rtd: f64::NAN,
                            loss_sclm: f64::NAN,
                            replace_rate: f64::NAN,
                            replace_accuracy: f64::NAN,
                            grad_norm_preclip: f64::NAN,
                            clipped: false,
                        };
                        return Err(abort(&pair, &opt, &mut csv, row, what));
                    }
                    Err(e) => return Err(e),
                };
                let losses = [
                    out.total.data()[0].as_f64(),
                    out.l_aux.data()[0].as_f64(),
                    out.l_rtd.data()[0].as_f64(),
                    out.l_sclm.as_ref().map_or(f64::NAN, |t| t.data()[0].as_f64()),
                ];
                let bad = losses[..3].iter().any(|x| !x.is_finite())
                    || (out.l_sclm.is_some() && !losses[3].is_finite());
                if bad {
                    let row = MetricsRow {
                        step,
                        lr,
                        loss_total: losses[0],
                        loss_aux: losses[1],
                        loss_rtd: losses[2],
                        loss_sclm: losses[3],
                        replace_rate: out.metrics.replace_rate,
                        replace_accuracy: out.metrics.replace_accuracy,
                        grad_norm_preclip: f64::NAN,
                        clipped: false,
                    };
                    return Err(abort(&pair, &opt, &mut csv, row, format!("loss {losses:?}")));
                }
                let g = tape.backward(&out.total)?;
                let mut grads: Vec<Vec<S>> = Vec::new();
                pair.for_each_param(|_, t| {
                    grads.push(match g.wrt(t) {
                        Some(s) => s.to_vec(),
                        None => vec![S::zero(); t.len()],
                    });
                });
                (losses, out.metrics, grads)
            };
            let mut grads = grads;

            let (preclip, clipped) = match clip_gradients(&mut grads, cfg.schedule.clip_norm) {
                Ok(x) => x,
                Err(e) => {
                    let row = MetricsRow {
                        step,
                        lr,
                        loss_total: losses[0],
                        loss_aux: losses[1],
                        loss_rtd: losses[2],
                        loss_sclm: losses[3],
                        replace_rate: m.replace_rate,
                        replace_accuracy: m.replace_accuracy,
                        grad_norm_preclip: f64::NAN,
                        clipped: false,
                    };
                    return Err(abort(&pair, &opt, &mut csv, row, e.to_string()));
                }
            };

            let k = opt.begin_step(lr);
            let mut idx = 0;
            pair.for_each_param_mut(|_, t| {
                optim::adam_update_buffer(t.data_mut(), &grads[idx], &mut opt.m[idx], &mut opt.v[idx], k);
                idx += 1;
            });

            let row = MetricsRow {
                step,
                lr,
                loss_total: losses[0],
                loss_aux: losses[1],
                loss_rtd: losses[2],
                loss_sclm: losses[3],
                replace_rate: m.replace_rate,
                replace_accuracy: m.replace_accuracy,
                grad_norm_preclip: preclip,
                clipped,
            };
            on_row(&row);
            if step % cfg.metric_every == 0 || step == max {
                csv.write(&row)?;
            }
            if step % cfg.checkpoint_every == 0 && step != max {
                let path = out_dir.join(format!("checkpoint-{step}.ckpt"));
                checkpoint::save(&path, &config_json, step, &pair, &opt)?;
            }
        }
        csv.flush()?;
        checkpoint::save(&final_path, &config_json, max, &pair, &opt)?;
        Ok(TrainReport {
            steps_run: max - start_step + 1,
            final_step: max,
            final_checkpoint: final_path,
        })
    });
    result
}

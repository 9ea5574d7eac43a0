//! Batched encoder forward pass on a tape. Sequences are flattened row-major
//! ([B, L] -> n = B*L rows), so hidden states come back as [n, d] and the
//! two heads as [n, V] and [n].

use std::rc::Rc;

use super::relpos::bucket_table;
use super::{LayerNormPlacement, ModelConfig, PairWeights, Which};
use crate::error::{Error, Result};
use crate::rng::DropoutCtx;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

pub struct ForwardOut<S: Scalar> {
    /// [n, d]
    pub hidden: Tensor<S>,
    /// [n, V]; tied to the word table, plus this model's LM bias.
    pub mlm_logits: Tensor<S>,
    /// [n]
    pub rtd_logits: Tensor<S>,
}

const PAD_MASK: f64 = -1e9;
const LN_EPS: f64 = 1e-5;

/// One full encoder pass for `which` model. Parameters must already be
/// watched on `tape` (see [`PairWeights::watch_all`]). `pad[i]` marks
/// padding rows, which are excluded from attention as keys. `dropout`
/// advances one site per dropout location whether or not `train` is set,
/// so stream assignment is stable across modes.
#[allow(clippy::too_many_arguments)]
pub fn forward<S: Scalar>(
    tape: &Tape<S>,
    cfg: &ModelConfig,
    pair: &PairWeights<S>,
    which: Which,
    ids: &[u32],
    pad: &[bool],
    batch: usize,
    train: bool,
    dropout: &mut DropoutCtx,
) -> Result<ForwardOut<S>> {
    forward_inner(tape, cfg, pair, which, ids, pad, batch, train, dropout, None)
}

/// [`forward`] with an [n, d] offset added to the token+position embedding
/// sum before the first layer. The fine-tuner perturbs inputs here; pass the
/// offset as a tape constant when no gradient should flow into it.
#[allow(clippy::too_many_arguments)]
pub fn forward_perturbed<S: Scalar>(
    tape: &Tape<S>,
    cfg: &ModelConfig,
    pair: &PairWeights<S>,
    which: Which,
    ids: &[u32],
    pad: &[bool],
    batch: usize,
    train: bool,
    dropout: &mut DropoutCtx,
    offset: &Tensor<S>,
) -> Result<ForwardOut<S>> {
    forward_inner(tape, cfg, pair, which, ids, pad, batch, train, dropout, Some(offset))
}

#[allow(clippy::too_many_arguments)]
fn forward_inner<S: Scalar>(
    tape: &Tape<S>,
    cfg: &ModelConfig,
    pair: &PairWeights<S>,
    which: Which,
    ids: &[u32],
    pad: &[bool],
    batch: usize,
    train: bool,
    dropout: &mut DropoutCtx,
    offset: Option<&Tensor<S>>,
) -> Result<ForwardOut<S>> {
    if batch == 0 || ids.is_empty() || ids.len() % batch != 0 || ids.len() != pad.len() {
        return Err(Error::data(format!(
            "forward: {} ids / {} pad flags do not form a [{}, L] batch",
            ids.len(),
            pad.len(),
            batch
        )));
    }
    let seq = ids.len() / batch;
    if seq > cfg.max_seq_len {
        return Err(Error::data(format!(
            "forward: sequence length {seq} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    let v = cfg.vocab_size;
    if let Some(&bad) = ids.iter().find(|&&t| t as usize >= v) {
        return Err(Error::data(format!("forward: token id {bad} outside vocab {v}")));
    }

    let m = pair.model(which);
    let (d, heads, dh) = (cfg.hidden_size, cfg.attention_heads, cfg.head_dim());
    let n = ids.len();
    let p = cfg.dropout_for(which);

    // embeddings
    let tok_rows: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
    let pos_rows: Vec<usize> = (0..n).map(|i| i % seq).collect();
    let tok = tape.gather_rows(pair.word(which), &tok_rows)?;
    let pos = tape.gather_rows(pair.position(which), &pos_rows)?;
    let mut x = tape.add(&tok, &pos)?;
    if let Some(off) = offset {
        x = tape.add(&x, off)?;
    }
    x = site(tape, x, p, train, dropout)?;

    // one bias per model, shared by all its layers
    let buckets = Rc::new(bucket_table(seq, cfg.relpos_bins, cfg.relpos_max_distance));
    let bias = tape.attention_bias(&m.relpos, &m.theta_q, &m.theta_k, buckets, seq, cfg.tupe_reset_cls)?;
    let bias = tape.reshape(&tape.repeat(&bias, batch)?, &[batch * heads, seq, seq])?;
    let mask = {
        let mut data = vec![S::zero(); batch * heads * seq * seq];
        let neg = S::of_f64(PAD_MASK);
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..seq {
                    let row = ((b * heads + h) * seq + i) * seq;
                    for j in 0..seq {
                        if pad[b * seq + j] {
                            data[row + j] = neg;
                        }
                    }
                }
            }
        }
        tape.constant(Tensor::from_vec(data, &[batch * heads, seq, seq])?)
    };
    let bias = tape.add(&bias, &mask)?;

    let scale = S::of_f64(1.0 / (dh as f64).sqrt());
    let eps = S::of_f64(LN_EPS);
    let to_heads = |t: &Tensor<S>| -> Result<Tensor<S>> {
        let r = tape.reshape(t, &[batch, seq, heads, dh])?;
        let p = tape.permute(&r, &[0, 2, 1, 3])?;
        tape.reshape(&p, &[batch * heads, seq, dh])
    };

    for layer in &m.layers {
        // attention sublayer
        let attn_in = match cfg.layernorm_placement {
            LayerNormPlacement::Post => x.clone(),
            LayerNormPlacement::Pre => tape.layer_norm(&x, &layer.ln1_gamma, &layer.ln1_beta, eps)?,
        };
        let q = to_heads(&tape.matmul(&attn_in, &layer.wq)?)?;
        let k = to_heads(&tape.matmul(&attn_in, &layer.wk)?)?;
        let val = to_heads(&tape.matmul(&attn_in, &layer.wv)?)?;
        let scores = tape.add(&tape.scale(&tape.batch_matmul_nt(&q, &k)?, scale)?, &bias)?;
        let mut probs = tape.softmax(&scores, 2)?;
        probs = site(tape, probs, p, train, dropout)?;
        let ctx = tape.batch_matmul(&probs, &val)?;
        let merged = {
            let r = tape.reshape(&ctx, &[batch, heads, seq, dh])?;
            let pm = tape.permute(&r, &[0, 2, 1, 3])?;
            tape.reshape(&pm, &[n, d])?
        };
        let attn_out = site(tape, tape.matmul(&merged, &layer.wo)?, p, train, dropout)?;
        x = match cfg.layernorm_placement {
            LayerNormPlacement::Post => {
                let sum = tape.add(&x, &attn_out)?;
                tape.layer_norm(&sum, &layer.ln1_gamma, &layer.ln1_beta, eps)?
            }
            LayerNormPlacement::Pre => tape.add(&x, &attn_out)?,
        };

        // feed-forward sublayer
        let ffn_in = match cfg.layernorm_placement {
            LayerNormPlacement::Post => x.clone(),
            LayerNormPlacement::Pre => tape.layer_norm(&x, &layer.ln2_gamma, &layer.ln2_beta, eps)?,
        };
        let h1 = tape.gelu(&tape.add_bias(&tape.matmul(&ffn_in, &layer.w1)?, &layer.b1)?)?;
        let h2 = tape.add_bias(&tape.matmul(&h1, &layer.w2)?, &layer.b2)?;
        let ffn_out = site(tape, h2, p, train, dropout)?;
        x = match cfg.layernorm_placement {
            LayerNormPlacement::Post => {
                let sum = tape.add(&x, &ffn_out)?;
                tape.layer_norm(&sum, &layer.ln2_gamma, &layer.ln2_beta, eps)?
            }
            LayerNormPlacement::Pre => tape.add(&x, &ffn_out)?,
        };
    }

    if let Some((gamma, beta)) = m.final_ln.as_ref() {
        x = tape.layer_norm(&x, gamma, beta, eps)?;
    }

    let word_t = tape.transpose(pair.word(which))?;
    let mlm_logits = tape.add_bias(&tape.matmul(&x, &word_t)?, pair.lm_bias(which))?;
    let rtd_2d = tape.add_bias(&tape.matmul(&x, &m.rtd_w)?, &m.rtd_b)?;
    let rtd_logits = tape.reshape(&rtd_2d, &[n])?;

    Ok(ForwardOut { hidden: x, mlm_logits, rtd_logits })
}

/// One dropout site: always advances the stream counter, only drops in
/// train mode.
fn site<S: Scalar>(
    tape: &Tape<S>,
    t: Tensor<S>,
    p: f64,
    train: bool,
    dropout: &mut DropoutCtx,
) -> Result<Tensor<S>> {
    let rng = dropout.next_site();
    if train && p > 0.0 {
        tape.dropout(&t, p, &rng)
    } else {
        Ok(t)
    }
}

//! Transformer encoder pair: a shallow auxiliary model and the main model,
//! with constrained embedding sharing between them. Post- or Pre-LayerNorm,
//! additive relative-position bias (one bucketed table per model, shared
//! across its layers), learned [CLS] row/column bias resets, and
//! depth-scaled initialization of the residual-branch output projections.

pub mod forward;
pub mod relpos;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{RootRng, Stream};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerNormPlacement {
    Post,
    Pre,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub ffn_width: usize,
    pub depth_main: usize,
    pub depth_aux: usize,
    pub attention_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_relpos_bins")]
    pub relpos_bins: usize,
    #[serde(default = "default_relpos_max_distance")]
    pub relpos_max_distance: usize,
    #[serde(default = "default_layernorm_placement")]
    pub layernorm_placement: LayerNormPlacement,
    #[serde(default = "default_true")]
    pub tupe_reset_cls: bool,
    #[serde(default = "default_true")]
    pub share_word_embeddings: bool,
    #[serde(default)]
    pub share_position_embeddings: bool,
    #[serde(default)]
    pub share_lm_bias: bool,
    #[serde(default = "default_dropout_main")]
    pub dropout_main: f64,
    #[serde(default)]
    pub dropout_aux: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default = "default_true")]
    pub scaled_init: bool,
}

fn default_relpos_bins() -> usize {
    64
}
fn default_relpos_max_distance() -> usize {
    128
}
fn default_layernorm_placement() -> LayerNormPlacement {
    LayerNormPlacement::Post
}
fn default_true() -> bool {
    true
}
fn default_dropout_main() -> f64 {
    0.1
}
fn default_init_std() -> f64 {
    0.02
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.ffn_width == 0 || self.attention_heads == 0 {
            return Err(Error::config("model sizes must be positive"));
        }
        if self.hidden_size % self.attention_heads != 0 {
            return Err(Error::config(format!(
                "hidden_size {} not divisible by attention_heads {}",
                self.hidden_size, self.attention_heads
            )));
        }
        if self.depth_aux == 0 || self.depth_main == 0 {
            return Err(Error::config("depths must be at least 1"));
        }
        if self.depth_aux > self.depth_main {
            return Err(Error::config(format!(
                "depth_aux {} exceeds depth_main {} (auxiliary must be the shallower model)",
                self.depth_aux, self.depth_main
            )));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::config("vocab_size and max_seq_len must be positive"));
        }
        if self.relpos_bins < 4 || self.relpos_bins % 2 != 0 {
            return Err(Error::config(format!(
                "relpos_bins {} must be even and at least 4",
                self.relpos_bins
            )));
        }
        if self.relpos_max_distance == 0 {
            return Err(Error::config("relpos_max_distance must be positive"));
        }
        for (name, p) in [("dropout_main", self.dropout_main), ("dropout_aux", self.dropout_aux)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!("{name} = {p} outside [0,1)")));
            }
        }
        if !(self.init_std > 0.0) {
            return Err(Error::config("init_std must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.attention_heads
    }

    pub fn dropout_for(&self, which: Which) -> f64 {
        match which {
            Which::Aux => self.dropout_aux,
            Which::Main => self.dropout_main,
        }
    }

    pub fn depth_for(&self, which: Which) -> usize {
        match which {
            Which::Aux => self.depth_aux,
            Which::Main => self.depth_main,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    Aux,
    Main,
}

impl Which {
    fn tag(self) -> &'static str {
        match self {
            Which::Aux => "aux",
            Which::Main => "main",
        }
    }
}

pub struct LayerWeights<S: Scalar> {
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
    pub wo: Tensor<S>,
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
    pub ln1_gamma: Tensor<S>,
    pub ln1_beta: Tensor<S>,
    pub ln2_gamma: Tensor<S>,
    pub ln2_beta: Tensor<S>,
}

/// One model's parameters. `word`, `position` and `lm_bias` are None when
/// the pair shares that table (it then lives on [`PairWeights`]).
pub struct EncoderWeights<S: Scalar> {
    pub word: Option<Tensor<S>>,
    pub position: Option<Tensor<S>>,
    pub layers: Vec<LayerWeights<S>>,
    /// Closing norm, Pre-LN only.
    pub final_ln: Option<(Tensor<S>, Tensor<S>)>,
    pub relpos: Tensor<S>,
    pub theta_q: Tensor<S>,
    pub theta_k: Tensor<S>,
    pub lm_bias: Option<Tensor<S>>,
    pub rtd_w: Tensor<S>,
    pub rtd_b: Tensor<S>,
}

/// Auxiliary + main model with the constrained-sharing slots between them.
pub struct PairWeights<S: Scalar> {
    pub shared_word: Option<Tensor<S>>,
    pub shared_position: Option<Tensor<S>>,
    pub shared_lm_bias: Option<Tensor<S>>,
    pub aux: EncoderWeights<S>,
    pub main: EncoderWeights<S>,
}

impl<S: Scalar> PairWeights<S> {
    pub fn model(&self, which: Which) -> &EncoderWeights<S> {
        match which {
            Which::Aux => &self.aux,
            Which::Main => &self.main,
        }
    }

    pub fn word(&self, which: Which) -> &Tensor<S> {
        self.model(which).word.as_ref().or(self.shared_word.as_ref()).expect("word table")
    }

    pub fn position(&self, which: Which) -> &Tensor<S> {
        self.model(which)
            .position
            .as_ref()
            .or(self.shared_position.as_ref())
            .expect("position table")
    }

    pub fn lm_bias(&self, which: Which) -> &Tensor<S> {
        self.model(which).lm_bias.as_ref().or(self.shared_lm_bias.as_ref()).expect("lm bias")
    }

    /// Fixed-order traversal of every trainable tensor: shared slots first,
    /// then auxiliary, then main. Optimizer state, checkpoints and gradient
    /// copies all key off this order and these names.
    pub fn for_each_param(&self, mut f: impl FnMut(&str, &Tensor<S>)) {
        self.visit(|name, t| f(name, t));
    }

    /// Mutable twin of [`Self::for_each_param`]. The two traversals must
    /// stay in the same order with the same names; a test pins that.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<S>)) {
        if let Some(t) = self.shared_word.as_mut() {
            f("shared.word", t);
        }
        if let Some(t) = self.shared_position.as_mut() {
            f("shared.position", t);
        }
        if let Some(t) = self.shared_lm_bias.as_mut() {
            f("shared.lm_bias", t);
        }
        for (which, m) in [(Which::Aux, &mut self.aux), (Which::Main, &mut self.main)] {
            let tag = which.tag();
            if let Some(t) = m.word.as_mut() {
                f(&format!("{tag}.word"), t);
            }
            if let Some(t) = m.position.as_mut() {
                f(&format!("{tag}.position"), t);
            }
            for (l, layer) in m.layers.iter_mut().enumerate() {
                for (part, t) in [
                    ("wq", &mut layer.wq),
                    ("wk", &mut layer.wk),
                    ("wv", &mut layer.wv),
                    ("wo", &mut layer.wo),
                    ("w1", &mut layer.w1),
                    ("b1", &mut layer.b1),
                    ("w2", &mut layer.w2),
                    ("b2", &mut layer.b2),
                    ("ln1_gamma", &mut layer.ln1_gamma),
                    ("ln1_beta", &mut layer.ln1_beta),
                    ("ln2_gamma", &mut layer.ln2_gamma),
                    ("ln2_beta", &mut layer.ln2_beta),
                ] {
                    f(&format!("{tag}.layer{l}.{part}"), t);
                }
            }
            if let Some((g, b)) = m.final_ln.as_mut() {
                f(&format!("{tag}.final_ln.gamma"), g);
                f(&format!("{tag}.final_ln.beta"), b);
            }
            f(&format!("{tag}.relpos"), &mut m.relpos);
            f(&format!("{tag}.theta_q"), &mut m.theta_q);
            f(&format!("{tag}.theta_k"), &mut m.theta_k);
            if let Some(t) = m.lm_bias.as_mut() {
                f(&format!("{tag}.lm_bias"), t);
            }
            f(&format!("{tag}.rtd_w"), &mut m.rtd_w);
            f(&format!("{tag}.rtd_b"), &mut m.rtd_b);
        }
    }

    fn visit(&self, mut f: impl FnMut(&str, &Tensor<S>)) {
        if let Some(t) = self.shared_word.as_ref() {
            f("shared.word", t);
        }
        if let Some(t) = self.shared_position.as_ref() {
            f("shared.position", t);
        }
        if let Some(t) = self.shared_lm_bias.as_ref() {
            f("shared.lm_bias", t);
        }
        for (which, m) in [(Which::Aux, &self.aux), (Which::Main, &self.main)] {
            let tag = which.tag();
            if let Some(t) = m.word.as_ref() {
                f(&format!("{tag}.word"), t);
            }
            if let Some(t) = m.position.as_ref() {
                f(&format!("{tag}.position"), t);
            }
            for (l, layer) in m.layers.iter().enumerate() {
                for (part, t) in [
                    ("wq", &layer.wq),
                    ("wk", &layer.wk),
                    ("wv", &layer.wv),
                    ("wo", &layer.wo),
                    ("w1", &layer.w1),
                    ("b1", &layer.b1),
                    ("w2", &layer.w2),
                    ("b2", &layer.b2),
                    ("ln1_gamma", &layer.ln1_gamma),
                    ("ln1_beta", &layer.ln1_beta),
                    ("ln2_gamma", &layer.ln2_gamma),
                    ("ln2_beta", &layer.ln2_beta),
                ] {
                    f(&format!("{tag}.layer{l}.{part}"), t);
                }
            }
            if let Some((g, b)) = m.final_ln.as_ref() {
                f(&format!("{tag}.final_ln.gamma"), g);
                f(&format!("{tag}.final_ln.beta"), b);
            }
            f(&format!("{tag}.relpos"), &m.relpos);
            f(&format!("{tag}.theta_q"), &m.theta_q);
            f(&format!("{tag}.theta_k"), &m.theta_k);
            if let Some(t) = m.lm_bias.as_ref() {
                f(&format!("{tag}.lm_bias"), t);
            }
            f(&format!("{tag}.rtd_w"), &m.rtd_w);
            f(&format!("{tag}.rtd_b"), &m.rtd_b);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(|_, t| n += t.len());
        n
    }

    /// Register every parameter on `tape` so forward passes can reference
    /// them. Call once per tape before [`forward::forward`].
    pub fn watch_all(&mut self, tape: &Tape<S>) {
        self.for_each_param_mut(|_, t| tape.watch(t));
    }

    pub fn zero_grads(&mut self) {
        self.for_each_param_mut(|_, t| t.zero_grad());
    }
}

/// Fresh weights for the pair. Everything is N(0, init_std^2) except:
/// biases and layernorm betas are 0, layernorm gammas are 1, and with
/// scaled_init the residual-branch outputs Wo / W2 of layer l (0-based)
/// use init_std / sqrt(2 (l + 1)).
pub fn init_pair<S: Scalar>(cfg: &ModelConfig, root: &RootRng) -> Result<PairWeights<S>> {
    cfg.validate()?;
    let mut op = 0u64;
    let mut draw = |shape: &[usize], std: f64| {
        let mut rng = root.stream(Stream::Init, 0, op);
        op += 1;
        Tensor::randn(shape, S::of_f64(std), &mut rng)
    };
    let (v, d, f, h, l) = (
        cfg.vocab_size,
        cfg.hidden_size,
        cfg.ffn_width,
        cfg.attention_heads,
        cfg.max_seq_len,
    );
    let std = cfg.init_std;
    let zeros = |shape: &[usize]| {
        Tensor::param(vec![S::zero(); shape.iter().product()], shape).expect("zeros")
    };
    let ones = |shape: &[usize]| {
        Tensor::param(vec![S::one(); shape.iter().product()], shape).expect("ones")
    };

    let shared_word = cfg.share_word_embeddings.then(|| draw(&[v, d], std));
    let shared_position = cfg.share_position_embeddings.then(|| draw(&[l, d], std));
    let shared_lm_bias = cfg.share_lm_bias.then(|| zeros(&[v]));

    let mut build = |depth: usize| -> EncoderWeights<S> {
        let word = (!cfg.share_word_embeddings).then(|| draw(&[v, d], std));
        let position = (!cfg.share_position_embeddings).then(|| draw(&[l, d], std));
        let layers = (0..depth)
            .map(|li| {
                let out_std = if cfg.scaled_init {
                    std / (2.0 * (li as f64 + 1.0)).sqrt()
                } else {
                    std
                };
                LayerWeights {
                    wq: draw(&[d, d], std),
                    wk: draw(&[d, d], std),
                    wv: draw(&[d, d], std),
                    wo: draw(&[d, d], out_std),
                    w1: draw(&[d, f], std),
                    b1: zeros(&[f]),
                    w2: draw(&[f, d], out_std),
                    b2: zeros(&[d]),
                    ln1_gamma: ones(&[d]),
                    ln1_beta: zeros(&[d]),
                    ln2_gamma: ones(&[d]),
                    ln2_beta: zeros(&[d]),
                }
            })
            .collect();
        let final_ln = (cfg.layernorm_placement == LayerNormPlacement::Pre)
            .then(|| (ones(&[d]), zeros(&[d])));
        EncoderWeights {
            word,
            position,
            layers,
            final_ln,
            relpos: draw(&[h, cfg.relpos_bins], std),
            theta_q: draw(&[h], std),
            theta_k: draw(&[h], std),
            lm_bias: (!cfg.share_lm_bias).then(|| zeros(&[v])),
            rtd_w: draw(&[d, 1], std),
            rtd_b: zeros(&[1]),
        }
    };

    let aux = build(cfg.depth_aux);
    let main = build(cfg.depth_main);
    Ok(PairWeights { shared_word, shared_position, shared_lm_bias, aux, main })
}

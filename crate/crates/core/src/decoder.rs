//! LSTM decoder with coverage attention over the encoder's feature grid.
//!
//! One step, given the previous token `y`, hidden state `h`, cell `s` and
//! coverage map `cov`:
//!
//! ```text
//! e(u,v)  = v_attᵀ · tanh(W_h·h + W_F·F(u,v) + b + w_cov·cov(u,v))
//! α       = softmax over all (u,v) of e
//! c       = Σ α(u,v) · F(u,v)
//! (h, s)  = LSTM([c ; E_y], h, s)
//! logits  = W · (E_y + W_oh·h + W_oc·c) + b_out
//! cov    += α
//! ```
//!
//! Attention reads the previous hidden state, so each step attends first and
//! then advances the LSTM. Coverage starts at zero and is a scalar map; the
//! learned row vector `w_cov` lifts it into the attention space. Because the
//! embedding is added to the projected state and context, `embed_size` is also
//! the width of the output projection.

use rand::Rng;

use crate::encoder::FeatureGrid;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{linear_bound, uniform, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::vocab::{END, START};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub hidden_size: usize,
    pub embed_size: usize,
    pub attention_size: usize,
    pub max_decode_len: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            hidden_size: 256,
            embed_size: 256,
            attention_size: 128,
            max_decode_len: 128,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size < 1
            || self.embed_size < 1
            || self.attention_size < 1
            || self.max_decode_len < 1
        {
            return Err(Error::Argument(
                "decoder config: all sizes must be ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DecoderParams {
    embedding: ParamId,
    att_hidden: ParamId,
    att_feature: ParamId,
    att_bias: ParamId,
    att_coverage: ParamId,
    att_score: ParamId,
    lstm_input: ParamId,
    lstm_hidden: ParamId,
    lstm_bias: ParamId,
    out_hidden: ParamId,
    out_context: ParamId,
    out_weight: ParamId,
    out_bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    config: DecoderConfig,
    feature_channels: usize,
    vocab_size: usize,
    p: DecoderParams,
}

/// Feature grid prepared for repeated attention: flattened features and
/// their step-independent projection.
#[derive(Clone, Copy, Debug)]
pub struct AttentionInput {
    pub features: Var,
    pub projected: Var,
    pub height: usize,
    pub width: usize,
}

/// Recurrent state of one decoding run, all nodes of the same graph.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub h: Var,
    pub cell: Var,
    /// `H×W`, the sum of all attention maps emitted so far.
    pub coverage: Var,
    /// Number of completed steps.
    pub step: usize,
    pub attention_trace: Vec<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    /// `1×|Y|`
    pub logits: Var,
    /// `H×W`
    pub alpha: Var,
    /// `1×C`
    pub context: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Emitted character indices, without `<S>` or `<E>`.
    pub tokens: Vec<usize>,
    /// One `H×W` attention map per step, including the `<E>` step.
    pub trace: Vec<Tensor>,
    /// Set when `max_decode_len` was reached before `<E>`.
    pub truncated: bool,
}

impl Decoder {
    pub fn new(
        config: &DecoderConfig,
        feature_channels: usize,
        vocab_size: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if vocab_size < 3 {
            return Err(Error::Argument("vocabulary needs at least one character".into()));
        }
        let (hd, m, a, c, v) = (
            config.hidden_size,
            config.embed_size,
            config.attention_size,
            feature_channels,
            vocab_size,
        );
        let mut lin = |name: &str, rows: usize, cols: usize, rng: &mut _| {
            store.add(format!("decoder.{name}"), uniform(&[rows, cols], linear_bound(rows), rng))
        };
        let embedding = lin("embedding", v, m, rng);
        let att_hidden = lin("attention.hidden", hd, a, rng);
        let att_feature = lin("attention.feature", c, a, rng);
        let att_coverage = lin("attention.coverage", 1, a, rng);
        let lstm_input = lin("lstm.input", c + m, 4 * hd, rng);
        let lstm_hidden = lin("lstm.hidden", hd, 4 * hd, rng);
        let out_hidden = lin("output.hidden", hd, m, rng);
        let out_context = lin("output.context", c, m, rng);
        let out_weight = lin("output.weight", m, v, rng);
        // a wide score vector lets attention sharpen within a few hundred updates
        let att_score = store.add("decoder.attention.score", uniform(&[a, 1], 1.0, rng));
        let att_bias = store.add("decoder.attention.bias", Tensor::zeros(&[a]));
        // gate order: input, forget, output, candidate; forget bias starts at 1
        let mut b = Tensor::zeros(&[4 * hd]);
        b.data_mut()[hd..2 * hd].fill(1.0);
        let lstm_bias = store.add("decoder.lstm.bias", b);
        let out_bias = store.add("decoder.output.bias", Tensor::zeros(&[v]));
        Ok(Self {
            config: config.clone(),
            feature_channels,
            vocab_size,
            p: DecoderParams {
                embedding,
                att_hidden,
                att_feature,
                att_bias,
                att_coverage,
                att_score,
                lstm_input,
                lstm_hidden,
                lstm_bias,
                out_hidden,
                out_context,
                out_weight,
                out_bias,
            },
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Parameter handles, for tests that hand-set weights.
    pub fn param_ids(&self) -> Vec<(&'static str, ParamId)> {
        let p = &self.p;
        vec![
            ("embedding", p.embedding),
            ("attention.hidden", p.att_hidden),
            ("attention.feature", p.att_feature),
            ("attention.bias", p.att_bias),
            ("attention.coverage", p.att_coverage),
            ("attention.score", p.att_score),
            ("lstm.input", p.lstm_input),
            ("lstm.hidden", p.lstm_hidden),
            ("lstm.bias", p.lstm_bias),
            ("output.hidden", p.out_hidden),
            ("output.context", p.out_context),
            ("output.weight", p.out_weight),
            ("output.bias", p.out_bias),
        ]
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.param_ids()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, id)| id)
    }

    /// Flattens the `H×W×C` grid and applies the step-independent `W_F·F + b`.
    pub fn prepare(&self, g: &mut Graph, params: &[Var], grid: Var) -> Result<AttentionInput> {
        let (h, w, c) = g.value(grid).hwc("attend")?;
        if c != self.feature_channels {
            return Err(Error::shape(
                "attend",
                format!("feature grid has {c} channels, decoder expects {}", self.feature_channels),
            ));
        }
        let features = g.reshape(grid, &[h * w, c])?;
        let proj = g.matmul(features, params[self.p.att_feature.0])?;
        let projected = g.add_bias(proj, params[self.p.att_bias.0])?;
        Ok(AttentionInput {
            features,
            projected,
            height: h,
            width: w,
        })
    }

    /// Zero hidden state, cell and coverage.
    pub fn initial_state(&self, g: &mut Graph, input: &AttentionInput) -> DecoderState {
        let hd = self.config.hidden_size;
        DecoderState {
            h: g.constant(Tensor::zeros(&[1, hd])),
            cell: g.constant(Tensor::zeros(&[1, hd])),
            coverage: g.constant(Tensor::zeros(&[input.height, input.width])),
            step: 0,
            attention_trace: Vec::new(),
        }
    }

    /// Coverage attention: returns `(alpha[H×W], context[1×C])`.
    pub fn attend(
        &self,
        g: &mut Graph,
        params: &[Var],
        input: &AttentionInput,
        h_prev: Var,
        coverage: Var,
    ) -> Result<(Var, Var)> {
        let cells = input.height * input.width;
        let from_hidden = g.matmul(h_prev, params[self.p.att_hidden.0])?;
        let pre = g.add_bias(input.projected, from_hidden)?;
        let cov = g.reshape(coverage, &[cells, 1])?;
        let from_cov = g.matmul(cov, params[self.p.att_coverage.0])?;
        let pre = g.add(pre, from_cov)?;
        let act = g.tanh(pre);
        let energy = g.matmul(act, params[self.p.att_score.0])?;
        let energy = g.reshape(energy, &[input.height, input.width])?;
        let alpha = g.softmax_flat(energy);
        let row = g.reshape(alpha, &[1, cells])?;
        let context = g.matmul(row, input.features)?;
        Ok((alpha, context))
    }

    /// One decoding step consuming `prev_token`.
    pub fn step(
        &self,
        g: &mut Graph,
        params: &[Var],
        input: &AttentionInput,
        state: &DecoderState,
        prev_token: usize,
    ) -> Result<(StepOutput, DecoderState)> {
        if prev_token >= self.vocab_size {
            return Err(Error::Argument(format!(
                "token {prev_token} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        if state.step >= self.config.max_decode_len {
            return Err(Error::LengthExceeded {
                needed: state.step + 1,
                limit: self.config.max_decode_len,
            });
        }
        let hd = self.config.hidden_size;
        let p = &self.p;
        let emb = g.embedding(params[p.embedding.0], prev_token)?;
        let (alpha, context) = self.attend(g, params, input, state.h, state.coverage)?;

        let x = g.concat_last(&[context, emb])?;
        let gx = g.matmul(x, params[p.lstm_input.0])?;
        let gh = g.matmul(state.h, params[p.lstm_hidden.0])?;
        let gates = g.add(gx, gh)?;
        let gates = g.add_bias(gates, params[p.lstm_bias.0])?;
        let gate = |g: &mut Graph, k: usize| g.narrow_last(gates, k * hd, hd);
        let (i, f, o, cand) = (gate(g, 0)?, gate(g, 1)?, gate(g, 2)?, gate(g, 3)?);
        let (i, f, o, cand) = (g.sigmoid(i), g.sigmoid(f), g.sigmoid(o), g.tanh(cand));
        let keep = g.mul(f, state.cell)?;
        let write = g.mul(i, cand)?;
        let cell = g.add(keep, write)?;
        let squashed = g.tanh(cell);
        let h = g.mul(o, squashed)?;

        let from_h = g.matmul(h, params[p.out_hidden.0])?;
        let from_c = g.matmul(context, params[p.out_context.0])?;
        let mix = g.add(emb, from_h)?;
        let mix = g.add(mix, from_c)?;
        let logits = g.matmul(mix, params[p.out_weight.0])?;
        let logits = g.add_bias(logits, params[p.out_bias.0])?;

        let coverage = g.add(state.coverage, alpha)?;
        let mut attention_trace = state.attention_trace.clone();
        attention_trace.push(alpha);
        Ok((
            StepOutput {
                logits,
                alpha,
                context,
            },
            DecoderState {
                h,
                cell,
                coverage,
                step: state.step + 1,
                attention_trace,
            },
        ))
    }

    /// Greedy decoding from `<S>` until `<E>` or `max_decode_len` steps.
    /// Argmax ties go to the lowest token index; `<S>` is excluded.
    pub fn decode_greedy(&self, store: &ParamStore, grid: &FeatureGrid) -> Result<Decoded> {
        let mut g = Graph::new();
        let params = store.bind(&mut g, false);
        let f = g.constant(grid.features.clone());
        let input = self.prepare(&mut g, &params, f)?;
        let mut state = self.initial_state(&mut g, &input);
        let mut prev = START;
        let mut tokens = Vec::new();
        let mut trace = Vec::new();
        loop {
            if state.step >= self.config.max_decode_len {
                return Ok(Decoded {
                    tokens,
                    trace,
                    truncated: true,
                });
            }
            let (out, next) = self.step(&mut g, &params, &input, &state, prev)?;
            trace.push(g.value(out.alpha).clone());
            // <S> is never emitted; ties go to the lowest remaining index
            let logits = g.value(out.logits).data();
            let best = (END..logits.len()).fold(END, |b, i| if logits[i] > logits[b] { i } else { b });
            state = next;
            if best == END {
                return Ok(Decoded {
                    tokens,
                    trace,
                    truncated: false,
                });
            }
            tokens.push(best);
            prev = best;
        }
    }
}

//! Encoder and decoder bundled with their vocabulary and weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{Decoded, Decoder, DecoderConfig};
use crate::encoder::{Encoder, EncoderConfig, FeatureGrid};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::vocab::{Vocabulary, START};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub params: ParamStore,
}

/// Greedy transcription of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Recognition {
    pub tokens: Vec<usize>,
    pub trace: Vec<Tensor>,
    pub truncated: bool,
    pub downsample_factor: usize,
}

impl Model {
    /// Fresh model with weights drawn from a ChaCha stream seeded by `seed`.
    pub fn new(config: &ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&config.encoder, &mut params, &mut rng)?;
        let decoder = Decoder::new(
            &config.decoder,
            config.encoder.output_channels(),
            vocab.len(),
            &mut params,
            &mut rng,
        )?;
        Ok(Self {
            config: config.clone(),
            vocab,
            encoder,
            decoder,
            params,
        })
    }

    /// Rebuilds the layout for `config` and installs `tensors` by name.
    pub fn with_weights(
        config: &ModelConfig,
        vocab: Vocabulary,
        named: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        let mut model = Self::new(config, vocab, 0)?;
        if named.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, t), want) in named.into_iter().zip(model.params.names()) {
            if &name != want {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} found where {want} was expected"
                )));
            }
            tensors.push(t);
        }
        model
            .params
            .set_tensors(tensors)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(model)
    }

    pub fn downsample_factor(&self) -> usize {
        self.config.encoder.downsample_factor()
    }

    /// Teacher-forced negative log-likelihood of `target` (followed by
    /// `<E>`) for `image`, recorded on `g`.
    pub fn sequence_loss(
        &self,
        g: &mut Graph,
        params: &[Var],
        image: Var,
        target: &[usize],
    ) -> Result<Var> {
        if target.is_empty() {
            return Err(Error::Argument("target sequence is empty".into()));
        }
        let steps = target.len() + 1;
        if steps > self.config.decoder.max_decode_len {
            return Err(Error::LengthExceeded {
                needed: steps,
                limit: self.config.decoder.max_decode_len,
            });
        }
        let grid = self.encoder.forward(g, params, image)?;
        let input = self.decoder.prepare(g, params, grid)?;
        let mut state = self.decoder.initial_state(g, &input);
        let mut prev = START;
        let mut total: Option<Var> = None;
        for (t, gold) in target.iter().copied().chain([crate::vocab::END]).enumerate() {
            let (out, next) = self.decoder.step(g, params, &input, &state, prev)?;
            let logp = g.log_softmax(out.logits);
            let picked = g.select(logp, gold)?;
            let nll = g.scale(picked, -1.0);
            let v = g.value(nll).item();
            if !v.is_finite() {
                return Err(Error::Numeric(format!("loss is {v} at decoding step {}", t + 1)));
            }
            total = Some(match total {
                None => nll,
                Some(acc) => g.add(acc, nll)?,
            });
            state = next;
            prev = gold;
        }
        Ok(total.expect("at least one step"))
    }

    /// Loss value and gradients for one sample, in parameter order.
    pub fn loss_and_grads(&self, image: &Tensor, target: &[usize]) -> Result<(Scalar, Vec<Tensor>)> {
        let mut g = Graph::new();
        let params = self.params.bind(&mut g, true);
        let x = g.constant(image.clone());
        let loss = self.sequence_loss(&mut g, &params, x, target)?;
        let value = g.value(loss).item();
        g.backward(loss)?;
        let grads = params
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((value, grads))
    }

    /// Attention map of every step when decoding is forced along `target`
    /// (one map per target character, then one for `<E>`).
    pub fn forced_attention(&self, image: &Tensor, target: &[usize]) -> Result<Vec<Tensor>> {
        let grid = self.encode(image)?;
        let mut g = Graph::new();
        let params = self.params.bind(&mut g, false);
        let f = g.constant(grid.features);
        let input = self.decoder.prepare(&mut g, &params, f)?;
        let mut state = self.decoder.initial_state(&mut g, &input);
        let mut prev = START;
        let mut maps = Vec::with_capacity(target.len() + 1);
        for &gold in target.iter().chain([&crate::vocab::END]) {
            let (out, next) = self.decoder.step(&mut g, &params, &input, &state, prev)?;
            maps.push(g.value(out.alpha).clone());
            state = next;
            prev = gold;
        }
        Ok(maps)
    }

    pub fn encode(&self, image: &Tensor) -> Result<FeatureGrid> {
        self.encoder.encode(&self.params, image)
    }

    pub fn decode(&self, grid: &FeatureGrid) -> Result<Decoded> {
        self.decoder.decode_greedy(&self.params, grid)
    }

    pub fn recognize(&self, image: &Tensor) -> Result<Recognition> {
        let grid = self.encode(image)?;
        let d = self.decode(&grid)?;
        Ok(Recognition {
            tokens: d.tokens,
            trace: d.trace,
            truncated: d.truncated,
            downsample_factor: grid.downsample_factor,
        })
    }
}

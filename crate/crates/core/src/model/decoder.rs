use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::FRAME_BYTES;
use crate::error::{Error, Result};
use crate::netops::{Checkpoint, Graph, Mlp, MlpSpec, ParamStore, Var};
use crate::scalar::Scalar;

use super::config::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Configuration of the world model whose slots are decoded.
    pub model: ModelConfig,
    pub hidden: usize,
}

impl DecoderConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self { model, hidden: 2048 }
    }
}

/// Per-slot decoders with identical architecture and separate weights; the
/// frame is the clamped sum of their sigmoid outputs.
#[derive(Clone, Debug)]
pub struct Decoder<F: Scalar> {
    pub config: DecoderConfig,
    pub store: ParamStore<F>,
    nets: Vec<Mlp>,
}

/// Output of [`Decoder::decode_graph`].
pub struct Decoded {
    /// `batch x 7500`, clamped to `[0, 1]`.
    pub frame: Var,
    /// One `batch x 7500` sigmoid output per slot.
    pub per_slot: Vec<Var>,
}

impl<F: Scalar> Decoder<F> {
    /// The output bias starts at `logit(0.5 / N)` so the initial frame is about 0.5 everywhere.
    pub fn new(config: DecoderConfig, seed: u64) -> Result<Self> {
        let n = config.model.transition.slots;
        let d_s = config.model.transition.slot_dim;
        if config.hidden == 0 {
            return Err(Error::InvalidArgument("decoder hidden width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let target = 0.5 / n as f64;
        let bias = F::of((target / (1.0 - target)).ln());
        let mut nets = Vec::with_capacity(n);
        for i in 0..n {
            let mlp = Mlp::new(&mut store, &mut rng, &format!("dec{i}"), MlpSpec::plain(&[d_s, config.hidden, FRAME_BYTES]))?;
            let last = *mlp.layers().last().expect("mlp has layers");
            store.get_mut(last.bias).value.fill(bias);
            nets.push(mlp);
        }
        Ok(Self { config, store, nets })
    }

    pub fn slots(&self) -> usize {
        self.nets.len()
    }

    /// `slots` is `(batch*N) x d_s`.
    pub fn decode_graph(&self, g: &mut Graph<F>, slots: Var) -> Result<Decoded> {
        let n = self.nets.len();
        let (rows, cols) = g.shape(slots);
        if rows % n != 0 || cols != self.config.model.transition.slot_dim {
            return Err(Error::shape("decode", format!("{rows}x{cols} slots for a {n}-slot decoder")));
        }
        let batch = rows / n;
        let mut per_slot = Vec::with_capacity(n);
        let mut total: Option<Var> = None;
        for (i, net) in self.nets.iter().enumerate() {
            let idx: Vec<usize> = (0..batch).map(|b| b * n + i).collect();
            let x = g.gather_rows(slots, &idx)?;
            let h = net.forward(g, &self.store, x)?;
            let y = g.sigmoid(h)?;
            per_slot.push(y);
            total = Some(match total {
                None => y,
                Some(t) => g.add(t, y)?,
            });
        }
        let frame = g.clamp_unit(total.expect("at least one slot"))?;
        Ok(Decoded { frame, per_slot })
    }

    /// Frame and per-slot images for a batch of slot sets, without gradients.
    pub fn decode(&self, slots: &Array2<F>) -> Result<(Array2<F>, Vec<Array2<F>>)> {
        let mut g = Graph::inference();
        let s = g.constant(slots.clone())?;
        let out = self.decode_graph(&mut g, s)?;
        let per_slot = out.per_slot.iter().map(|&v| g.value(v).clone()).collect();
        Ok((g.value(out.frame).clone(), per_slot))
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::from_store(serde_json::to_string(&self.config)?, &self.store))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: DecoderConfig = serde_json::from_str(&ckpt.config)
            .map_err(|e| Error::ConfigMismatch(format!("not a decoder checkpoint: {e}")))?;
        let mut dec = Self::new(config, 0)?;
        ckpt.load_into(&mut dec.store)?;
        Ok(dec)
    }
}

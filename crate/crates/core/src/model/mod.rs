//! The slotwise world model: encoder, sequential CCI-driven transition with
//! its ablation variants, per-slot decoder and analysis rollouts.
//!
//! Batched slot sets are `(batch*N) x d_s` matrices; row `b*N + i` is slot
//! `i` of element `b`. Action rows use the same layout.

pub mod config;
pub mod decoder;
pub mod encoder;
pub mod transition;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{ModelConfig, TransitionConfig, Variant};
pub use decoder::{Decoded, Decoder, DecoderConfig};
pub use encoder::{encode_actions, stack_observations, Encoder};
pub use transition::{random_orders, Policy, Selections, Transition};

use crate::error::{Error, Result};
use crate::netops::{Checkpoint, Graph, ParamStore, SelectMode};
use crate::scalar::Scalar;

/// Encoder and transition parameters together with the config that shaped them.
#[derive(Clone, Debug)]
pub struct WorldModel<F: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<F>,
    pub encoder: Encoder,
    pub transition: Transition,
}

/// Slot states of a rollout (`states[0]` is the start) and the selections made at each step.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout<F> {
    pub states: Vec<Array2<F>>,
    pub selections: Vec<Selections>,
}

impl<F: Scalar> WorldModel<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let t = &config.transition;
        let encoder = Encoder::new(
            &mut store,
            &mut rng,
            config.input_channels(),
            config.cnn_channels,
            config.encoder_hidden,
            t.slots,
            t.slot_dim,
        )?;
        let transition = Transition::new(&mut store, &mut rng, t)?;
        Ok(Self {
            config,
            store,
            encoder,
            transition,
        })
    }

    pub fn slots(&self) -> usize {
        self.config.transition.slots
    }

    /// Slots for a batch of observations, without gradients.
    pub fn encode(&self, obs: &Array2<F>) -> Result<Array2<F>> {
        let mut g = Graph::inference();
        let x = g.constant(obs.clone())?;
        let s = self.encoder.forward(&mut g, &self.store, x)?;
        Ok(g.value(s).clone())
    }

    /// One transition step without gradients.
    pub fn step<R: Rng>(
        &self,
        slots: &Array2<F>,
        actions: &Array2<F>,
        orders: &[Vec<usize>],
        policy: Policy,
        rng: &mut R,
    ) -> Result<(Array2<F>, Selections)> {
        let mut g = Graph::inference();
        let s = g.constant(slots.clone())?;
        let a = if self.config.transition.action_dim > 0 {
            Some(g.constant(actions.clone())?)
        } else {
            None
        };
        let (next, sel) = self.transition.step(&mut g, &self.store, s, a, orders, policy, rng)?;
        Ok((g.value(next).clone(), sel))
    }

    /// Repeated transition steps with the same slot order throughout.
    pub fn rollout<R: Rng>(
        &self,
        slots0: &Array2<F>,
        actions: &[Array2<F>],
        orders: &[Vec<usize>],
        policy: Policy,
        rng: &mut R,
    ) -> Result<Rollout<F>> {
        let mut states = vec![slots0.clone()];
        let mut selections = Vec::with_capacity(actions.len());
        for a in actions {
            let (next, sel) = self.step(states.last().expect("non-empty"), a, orders, policy, rng)?;
            states.push(next);
            selections.push(sel);
        }
        Ok(Rollout { states, selections })
    }

    /// Infer-mode rollout with every selection overridden to mechanism `j`.
    pub fn forced_mechanism_rollout(
        &self,
        slots0: &Array2<F>,
        actions: &[Array2<F>],
        orders: &[Vec<usize>],
        j: usize,
    ) -> Result<Rollout<F>> {
        if j >= self.config.transition.mechanisms {
            return Err(Error::InvalidArgument(format!(
                "mechanism {j} of {}",
                self.config.transition.mechanisms
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.rollout(slots0, actions, orders, Policy::Forced(j), &mut rng)
    }

    /// Infer-mode rollout using the learned selector.
    pub fn infer_rollout(&self, slots0: &Array2<F>, actions: &[Array2<F>], orders: &[Vec<usize>], seed: u64) -> Result<Rollout<F>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.rollout(slots0, actions, orders, Policy::Learned(SelectMode::Infer), &mut rng)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::from_store(serde_json::to_string(&self.config)?, &self.store))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = model_config_of(ckpt)?;
        let mut model = Self::new(config, 0)?;
        ckpt.load_into(&mut model.store)?;
        Ok(model)
    }

    /// The same parameters at another precision.
    pub fn cast<G: Scalar>(&self) -> WorldModel<G> {
        WorldModel {
            config: self.config.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            transition: self.transition.clone(),
        }
    }
}

/// Reads the model config embedded in a world-model checkpoint.
pub fn model_config_of(ckpt: &Checkpoint) -> Result<ModelConfig> {
    serde_json::from_str(&ckpt.config)
        .map_err(|e| Error::ConfigMismatch(format!("not a world-model checkpoint: {e}")))
}

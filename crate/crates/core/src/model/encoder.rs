use ndarray::Array2;
use rand::Rng;

use crate::envs::{Episode, GridAction, FRAME_BYTES};
use crate::error::{Error, Result};
use crate::netops::{ConvStack, Graph, Mlp, MlpSpec, ParamStore, Var, MAP_SIZE};
use crate::scalar::Scalar;

/// CNN object extractor followed by a per-map MLP with shared weights.
#[derive(Clone, Debug)]
pub struct Encoder {
    cnn: ConvStack,
    mlp: Mlp,
    slots: usize,
}

impl Encoder {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        in_channels: usize,
        cnn_channels: usize,
        hidden: usize,
        slots: usize,
        slot_dim: usize,
    ) -> Result<Self> {
        let cnn = ConvStack::new(store, rng, "enc.cnn", in_channels, cnn_channels, slots)?;
        let mlp = Mlp::new(store, rng, "enc.mlp", MlpSpec::block(MAP_SIZE * MAP_SIZE, hidden, slot_dim))?;
        Ok(Self { cnn, mlp, slots })
    }

    /// `batch x (C*50*50)` observations to `(batch*N) x d_s` slots.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, obs: Var) -> Result<Var> {
        let (batch, width) = g.shape(obs);
        if width != self.cnn.in_channels() * FRAME_BYTES / 3 {
            return Err(Error::shape(
                "encode",
                format!("observation width {width} for {} channels", self.cnn.in_channels()),
            ));
        }
        let maps = self.cnn.forward(g, store, obs)?;
        let per_map = g.reshape(maps, batch * self.slots, MAP_SIZE * MAP_SIZE)?;
        self.mlp.forward(g, store, per_map)
    }

    /// Feature maps alone, `batch x (N*100)`.
    pub fn feature_maps<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, obs: Var) -> Result<Var> {
        self.cnn.forward(g, store, obs)
    }
}

/// Stacks the observations at `(episode, t)` into a `batch x (C*50*50)` matrix in `[0, 1]`.
pub fn stack_observations<F: Scalar>(items: &[(&Episode, usize)]) -> Result<Array2<F>> {
    let Some((first, _)) = items.first() else {
        return Ok(Array2::zeros((0, 0)));
    };
    let width = first.kind.input_frames() * FRAME_BYTES;
    let mut out = Array2::zeros((items.len(), width));
    for (row, &(ep, t)) in out.outer_iter_mut().zip(items) {
        if ep.kind != first.kind {
            return Err(Error::shape("stack_observations", "mixed environment kinds"));
        }
        if t + ep.kind.input_frames() > ep.frames.len() {
            return Err(Error::InvalidArgument(format!(
                "observation {t} past the end of a {}-frame episode",
                ep.frames.len()
            )));
        }
        let mut row = row;
        ep.write_observation(t, row.as_slice_mut().expect("standard layout"));
    }
    Ok(out)
}

/// Per-slot action rows: the targeted slot gets the direction one-hot, all
/// other rows are zero. `actions` is `None` for action-free environments.
pub fn encode_actions<F: Scalar>(
    actions: &[Option<GridAction>],
    slots: usize,
    action_dim: usize,
) -> Result<Array2<F>> {
    let mut out = Array2::zeros((actions.len() * slots, action_dim));
    for (b, action) in actions.iter().enumerate() {
        let Some(a) = action else { continue };
        if action_dim != 4 {
            return Err(Error::ConfigMismatch(format!(
                "grid actions need action_dim 4, model has {action_dim}"
            )));
        }
        if a.object >= slots {
            return Err(Error::ConfigMismatch(format!(
                "action targets object {} but the model has {slots} slots",
                a.object
            )));
        }
        out[[b * slots + a.object, a.direction.index()]] = F::one();
    }
    Ok(out)
}

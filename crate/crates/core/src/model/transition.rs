use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use super::config::{TransitionConfig, Variant};
use crate::error::{Error, Result};
use crate::netops::{
    gumbel_select, uniform_one_hot, Graph, Mlp, MlpSpec, MultiheadAttention, ParamStore, SelectMode, Var,
};
use crate::scalar::Scalar;

/// How mechanisms are chosen for each slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Policy {
    /// Use the selector network (or the uniform choice of the `random_mech` variant).
    Learned(SelectMode),
    /// Uniformly random mechanism, selector bypassed.
    Uniform,
    /// Every slot uses mechanism `j`.
    Forced(usize),
}

/// Selected mechanism per batch element and slot: `selections[b][slot]`.
pub type Selections = Vec<Vec<usize>>;

#[derive(Clone, Debug)]
enum Context {
    Attention { attn: MultiheadAttention, phi: Mlp },
    Flat(Mlp),
}

/// CCI network, selector and mechanism bank.
#[derive(Clone, Debug)]
pub struct Transition {
    pub config: TransitionConfig,
    context: Context,
    psi: Mlp,
    mechanisms: Vec<Mlp>,
}

impl Transition {
    /// Mechanisms start with a zero output layer, so the untrained transition is the identity.
    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, config: &TransitionConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let dm = c.model_dim();
        let context = if c.variant == Variant::MlpCci {
            Context::Flat(Mlp::new(store, rng, "tr.cci_mlp", MlpSpec::block(c.slots * dm, c.hidden, c.cci_dim))?)
        } else {
            Context::Attention {
                attn: MultiheadAttention::new(store, rng, "tr.attn", dm, c.heads)?,
                phi: Mlp::new(store, rng, "tr.phi", MlpSpec::block(dm, c.hidden, c.cci_dim))?,
            }
        };
        let psi = Mlp::new(
            store,
            rng,
            "tr.psi",
            MlpSpec::block(c.cci_dim + c.slot_dim + c.action_dim, c.hidden, c.mechanisms),
        )?;
        let mut mechanisms = Vec::with_capacity(c.mechanisms);
        for j in 0..c.mechanisms {
            let mlp = Mlp::new(
                store,
                rng,
                &format!("tr.mech{j}"),
                MlpSpec::block(c.cci_dim + c.slot_dim, c.hidden, c.slot_dim),
            )?;
            let last = *mlp.layers().last().expect("mlp has layers");
            store.get_mut(last.weight).value.fill(F::zero());
            store.get_mut(last.bias).value.fill(F::zero());
            mechanisms.push(mlp);
        }
        Ok(Self {
            config: c.clone(),
            context,
            psi,
            mechanisms,
        })
    }

    pub fn mechanism(&self, j: usize) -> &Mlp {
        &self.mechanisms[j]
    }

    pub fn selector(&self) -> &Mlp {
        &self.psi
    }

    /// Sets every parameter of the mechanism bank to zero.
    pub fn zero_mechanisms<F: Scalar>(&self, store: &mut ParamStore<F>) {
        for j in 0..self.mechanisms.len() {
            let prefix = format!("tr.mech{j}.");
            let ids: Vec<_> = store.iter().filter(|(_, p)| p.name.starts_with(&prefix)).map(|(id, _)| id).collect();
            for id in ids {
                store.get_mut(id).value.fill(F::zero());
            }
        }
    }

    fn batch_size<F: Scalar>(&self, g: &Graph<F>, slots: Var, actions: Option<Var>) -> Result<usize> {
        let c = &self.config;
        let (rows, cols) = g.shape(slots);
        if cols != c.slot_dim || rows % c.slots != 0 {
            return Err(Error::shape(
                "transition_step",
                format!("slots {rows}x{cols} for N={} d_s={}", c.slots, c.slot_dim),
            ));
        }
        match actions {
            Some(a) if g.shape(a) != (rows, c.action_dim) => {
                return Err(Error::shape("transition_step", "action rows do not match slots"))
            }
            None if c.action_dim != 0 => {
                return Err(Error::shape("transition_step", "missing actions"))
            }
            _ => {}
        }
        Ok(rows / c.slots)
    }

    /// Central contextual information from a `(B*N) x d_s` buffer: attention
    /// over each group of N (slot, action) rows, mean pool, then `phi`.
    /// The flat variant instead concatenates the rows in `orders` and applies an MLP.
    pub fn compute_cci<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        buffer: Var,
        actions: Option<Var>,
        orders: &[Vec<usize>],
    ) -> Result<Var> {
        let n = self.config.slots;
        let batch = self.batch_size(g, buffer, actions)?;
        let x = match actions {
            Some(a) if self.config.action_dim > 0 => g.concat_cols(&[buffer, a])?,
            _ => buffer,
        };
        match &self.context {
            Context::Attention { attn, phi } => {
                let h = attn.forward(g, store, x, n)?;
                let pooled = g.mean_groups(h, n)?;
                phi.forward(g, store, pooled)
            }
            Context::Flat(mlp) => {
                check_orders(orders, batch, n)?;
                let index: Vec<usize> = orders
                    .iter()
                    .enumerate()
                    .flat_map(|(b, o)| o.iter().map(move |&i| b * n + i))
                    .collect();
                let ordered = g.gather_rows(x, &index)?;
                let flat = g.reshape(ordered, batch, n * self.config.model_dim())?;
                mlp.forward(g, store, flat)
            }
        }
    }

    /// One-hot mechanism choice per row of `slot`.
    pub fn select<F: Scalar, R: Rng>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        cci: Var,
        slot: Var,
        action_row: Option<Var>,
        policy: Policy,
        rng: &mut R,
    ) -> Result<Var> {
        let c = &self.config;
        let rows = g.shape(slot).0;
        let policy = match policy {
            Policy::Learned(_) if c.variant == Variant::RandomMech => Policy::Uniform,
            p => p,
        };
        match policy {
            Policy::Uniform => {
                let hot = uniform_one_hot(rows, c.mechanisms, rng);
                g.constant(hot)
            }
            Policy::Forced(j) => {
                if j >= c.mechanisms {
                    return Err(Error::InvalidArgument(format!("mechanism {j} of {}", c.mechanisms)));
                }
                let mut hot = Array2::zeros((rows, c.mechanisms));
                hot.column_mut(j).fill(F::one());
                g.constant(hot)
            }
            Policy::Learned(mode) => {
                let context = if c.variant.cci_in_selector() {
                    cci
                } else {
                    g.zeros(rows, c.cci_dim)?
                };
                let mut parts = vec![context, slot];
                if let Some(a) = action_row.filter(|_| c.action_dim > 0) {
                    parts.push(a);
                }
                let input = g.concat_cols(&parts)?;
                let logits = self.psi.forward(g, store, input)?;
                gumbel_select(g, logits, F::of(c.temperature), mode, rng)
            }
        }
    }

    /// `delta = sum_j weights[:, j] * g_j([cci, slot])`. Without gradient
    /// tracking and with one-hot weights only the selected mechanism is
    /// evaluated for each row.
    pub fn apply<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        cci: Var,
        slot: Var,
        weights: Var,
    ) -> Result<Var> {
        let c = &self.config;
        let rows = g.shape(slot).0;
        let context = if c.variant.cci_in_mechanisms() {
            cci
        } else {
            g.zeros(rows, c.cci_dim)?
        };
        let input = g.concat_cols(&[context, slot])?;
        let hard = g.value(weights).iter().all(|&w| w == F::zero() || w == F::one());
        if g.is_tracking() || !hard {
            let outs = self
                .mechanisms
                .iter()
                .map(|m| m.forward(g, store, input))
                .collect::<Result<Vec<_>>>()?;
            return g.mix_one_hot(&outs, weights);
        }
        let chosen = row_argmax(g.value(weights));
        let mut delta = g.zeros(rows, c.slot_dim)?;
        for (j, mech) in self.mechanisms.iter().enumerate() {
            let idx: Vec<usize> = (0..rows).filter(|&r| chosen[r] == j).collect();
            if idx.is_empty() {
                continue;
            }
            let x = g.gather_rows(input, &idx)?;
            let y = mech.forward(g, store, x)?;
            delta = g.scatter_rows(delta, y, &idx)?;
        }
        Ok(delta)
    }

    /// One transition step. Slots are updated one at a time following each
    /// element's order, recomputing the CCI from the partially updated buffer;
    /// the parallel variant updates all slots from the time-t buffer.
    #[allow(clippy::too_many_arguments)]
    pub fn step<F: Scalar, R: Rng>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        slots: Var,
        actions: Option<Var>,
        orders: &[Vec<usize>],
        policy: Policy,
        rng: &mut R,
    ) -> Result<(Var, Selections)> {
        let c = &self.config;
        let n = c.slots;
        let batch = self.batch_size(g, slots, actions)?;
        check_orders(orders, batch, n)?;
        let needs_cci = c.variant.cci_in_selector() || c.variant.cci_in_mechanisms();
        let mut selections = vec![vec![0usize; n]; batch];

        if c.variant == Variant::Parallel {
            let cci = self.compute_cci(g, store, slots, actions, orders)?;
            let cci = g.repeat_rows(cci, n)?;
            let weights = self.select(g, store, cci, slots, actions, policy, rng)?;
            let delta = self.apply(g, store, cci, slots, weights)?;
            for (r, j) in row_argmax(g.value(weights)).into_iter().enumerate() {
                selections[r / n][r % n] = j;
            }
            return Ok((g.add(slots, delta)?, selections));
        }

        let mut buffer = slots;
        for k in 0..n {
            let index: Vec<usize> = orders.iter().enumerate().map(|(b, o)| b * n + o[k]).collect();
            let cci = if needs_cci {
                self.compute_cci(g, store, buffer, actions, orders)?
            } else {
                g.zeros(batch, c.cci_dim)?
            };
            let slot = g.gather_rows(buffer, &index)?;
            let action_row = match actions {
                Some(a) if c.action_dim > 0 => Some(g.gather_rows(a, &index)?),
                _ => None,
            };
            let weights = self.select(g, store, cci, slot, action_row, policy, rng)?;
            let delta = self.apply(g, store, cci, slot, weights)?;
            for (b, j) in row_argmax(g.value(weights)).into_iter().enumerate() {
                selections[b][orders[b][k]] = j;
            }
            let updated = g.add(slot, delta)?;
            buffer = g.scatter_rows(buffer, updated, &index)?;
        }
        Ok((buffer, selections))
    }
}

fn row_argmax<F: Scalar>(a: &Array2<F>) -> Vec<usize> {
    a.outer_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub(crate) fn check_orders(orders: &[Vec<usize>], batch: usize, n: usize) -> Result<()> {
    if orders.len() != batch {
        return Err(Error::InvalidArgument(format!("{} orders for a batch of {batch}", orders.len())));
    }
    for o in orders {
        let mut seen = vec![false; n];
        if o.len() != n || o.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::InvalidArgument(format!("{o:?} is not a permutation of 0..{n}")));
        }
    }
    Ok(())
}

/// A fresh uniform slot order per batch element.
pub fn random_orders<R: Rng>(batch: usize, n: usize, rng: &mut R) -> Vec<Vec<usize>> {
    (0..batch)
        .map(|_| {
            let mut o: Vec<usize> = (0..n).collect();
            o.shuffle(rng);
            o
        })
        .collect()
}

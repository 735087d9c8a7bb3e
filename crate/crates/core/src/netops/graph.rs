//! Reverse-mode differentiation over 2-D arrays.
//!
//! A [`Graph`] records every op applied during a forward pass together with
//! whatever the backward pass needs. Values are always matrices; batched
//! images and slot sets are stored row-major (one sample or one slot per row)
//! and the ops that care about the inner layout carry it explicitly.

use std::collections::HashMap;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a 2-D convolution over channels-first images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn output_len(&self) -> usize {
        self.out_channels * self.out_height() * self.out_width()
    }
}

enum Op<F> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<F>,
        inv_std: Array1<F>,
    },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    ScatterRows {
        base: Var,
        rows: Var,
        index: Vec<usize>,
    },
    RepeatRows(Var, usize),
    MeanGroups(Var, usize),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Array2<F>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        group: usize,
        heads: usize,
        probs: Vec<Array2<F>>,
    },
    GumbelStraightThrough {
        logits: Var,
        soft: Array2<F>,
        temperature: F,
    },
    MixOneHot {
        outs: Vec<Var>,
        weights: Var,
    },
    RowMse(Var, Var),
    HingeBelow(Var, F),
    Mean(Var),
    Sum(Var),
    Bce {
        pred: Var,
        target: Var,
        eps: F,
    },
    ClampUnit(Var),
}

struct Node<F> {
    value: Array2<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Tape of forward values and the ops that produced them.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Array2<F>>>,
    track: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<F: Scalar>(name: &str, value: &Array2<F>) -> Result<()> {
    if value.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

impl<F: Scalar> Graph<F> {
    /// A graph that records everything needed for [`Graph::backward`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: Vec::new(),
            track: true,
        }
    }

    /// A forward-only graph: nothing requires gradients and op caches are skipped.
    pub fn inference() -> Self {
        Self {
            track: false,
            ..Self::new()
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Gradient of the last [`Graph::backward`] target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Array2<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, name: &str, value: Array2<F>, op: Op<F>, needs_grad: bool) -> Result<Var> {
        check_finite(name, &value)?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.track,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Array2<F>) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    /// Input leaf whose gradient is retained, for probing input sensitivities.
    pub fn input(&mut self, value: Array2<F>) -> Result<Var> {
        self.push("input", value, Op::Leaf, true)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Result<Var> {
        self.constant(Array2::zeros((rows, cols)))
    }

    /// Leaf holding a copy of a stored parameter; one node per parameter per graph.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let p = store.get(id);
        let v = self.push(&p.name, p.value.clone(), Op::Param(id), true)?;
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(Error::shape("matmul", format!("{ar}x{ac} * {br}x{bc}")));
        }
        let value = self.value(a).dot(self.value(b));
        let ng = self.needs(&[a, b]);
        self.push("matmul", value, Op::MatMul(a, b), ng)
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, ac) = self.shape(a);
        if self.shape(bias) != (1, ac) {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} for {ac} columns", self.shape(bias)),
            ));
        }
        let value = self.value(a) + self.value(bias);
        let ng = self.needs(&[a, bias]);
        self.push("add_bias", value, Op::AddBias(a, bias), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let value = self.value(a) + self.value(b);
        let ng = self.needs(&[a, b]);
        self.push("add", value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "sub",
                format!("{:?} - {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let value = self.value(a) - self.value(b);
        let ng = self.needs(&[a, b]);
        self.push("sub", value, Op::Sub(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Result<Var> {
        let value = self.value(a) * c;
        let ng = self.needs(&[a]);
        self.push("scale", value, Op::Scale(a, c), ng)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).mapv(|x| if x > F::zero() { x } else { F::zero() });
        let ng = self.needs(&[a]);
        self.push("relu", value, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).mapv(sigmoid);
        let ng = self.needs(&[a]);
        self.push("sigmoid", value, Op::Sigmoid(a), ng)
    }

    /// Row-wise layer normalization with learned `1 x cols` gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if self.shape(gamma) != (1, cols) || self.shape(beta) != (1, cols) {
            return Err(Error::shape("layer_norm", format!("gain/shift for {cols} columns")));
        }
        let eps = F::of(1e-5);
        let n = F::from_usize(cols).unwrap();
        let xv = self.value(x);
        let mut xhat = Array2::zeros((rows, cols));
        let mut inv_std = Array1::zeros(rows);
        for (r, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let inv = F::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for (c, &v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * inv;
            }
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.needs(&[x, gamma, beta]);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat: if ng { xhat } else { Array2::zeros((0, 0)) },
            inv_std,
        };
        self.push("layer_norm", value, op, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let rows = self.shape(parts[0]).0;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let views: Vec<ArrayView2<F>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| Error::shape("concat_cols", e.to_string()))?;
        let ng = self.needs(parts);
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Row-major reshape preserving element order.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        if ar * ac != rows * cols {
            return Err(Error::shape(
                "reshape",
                format!("{ar}x{ac} into {rows}x{cols}"),
            ));
        }
        let value = self
            .value(a)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((rows, cols))
            .map_err(|e| Error::shape("reshape", e.to_string()))?;
        let ng = self.needs(&[a]);
        self.push("reshape", value, Op::Reshape(a), ng)
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (rows, _) = self.shape(a);
        if index.iter().any(|&i| i >= rows) {
            return Err(Error::shape("gather_rows", "row index out of range"));
        }
        let value = self.value(a).select(Axis(0), index);
        let ng = self.needs(&[a]);
        self.push("gather_rows", value, Op::GatherRows(a, index.to_vec()), ng)
    }

    /// Copy of `base` with row `index[i]` replaced by row `i` of `rows`.
    pub fn scatter_rows(&mut self, base: Var, rows: Var, index: &[usize]) -> Result<Var> {
        let (br, bc) = self.shape(base);
        let (rr, rc) = self.shape(rows);
        if rc != bc || rr != index.len() || index.iter().any(|&i| i >= br) {
            return Err(Error::shape("scatter_rows", "index/rows/base disagree"));
        }
        let mut value = self.value(base).clone();
        let src = self.value(rows);
        for (i, &dst) in index.iter().enumerate() {
            value.row_mut(dst).assign(&src.row(i));
        }
        let ng = self.needs(&[base, rows]);
        let op = Op::ScatterRows {
            base,
            rows,
            index: index.to_vec(),
        };
        self.push("scatter_rows", value, op, ng)
    }

    /// Repeats every row `times` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let (rows, _) = self.shape(a);
        let index: Vec<usize> = (0..rows).flat_map(|r| std::iter::repeat(r).take(times)).collect();
        let value = self.value(a).select(Axis(0), &index);
        let ng = self.needs(&[a]);
        self.push("repeat_rows", value, Op::RepeatRows(a, times), ng)
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn mean_groups(&mut self, a: Var, group: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if group == 0 || rows % group != 0 {
            return Err(Error::shape("mean_groups", format!("{rows} rows in groups of {group}")));
        }
        let value = self
            .value(a)
            .to_shape((rows / group, group, cols))
            .map_err(|e| Error::shape("mean_groups", e.to_string()))?
            .mean_axis(Axis(1))
            .expect("group is non-empty");
        let ng = self.needs(&[a]);
        self.push("mean_groups", value, Op::MeanGroups(a, group), ng)
    }

    /// Batched 2-D convolution. `input` is `batch x (C*H*W)`, `weight` is
    /// `(C*k*k) x out_channels`, `bias` is `1 x out_channels`; the output is
    /// `batch x (out_channels*H'*W')`, channels-first.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, geom: ConvGeom) -> Result<Var> {
        let (batch, len) = self.shape(input);
        if len != geom.input_len()
            || self.shape(weight) != (geom.patch_len(), geom.out_channels)
            || self.shape(bias) != (1, geom.out_channels)
        {
            return Err(Error::shape("conv2d", format!("{geom:?} vs input {batch}x{len}")));
        }
        let cols = im2col(self.value(input), &geom);
        let mut y = cols.dot(self.value(weight));
        y += self.value(bias);
        let value = positions_to_channels_first(&y, batch, &geom);
        let ng = self.needs(&[input, weight, bias]);
        let op = Op::Conv2d {
            input,
            weight,
            bias,
            geom,
            cols: if ng { cols } else { Array2::zeros((0, 0)) },
        };
        self.push("conv2d", value, op, ng)
    }

    /// Scaled dot-product self-attention core over consecutive groups of
    /// `group` rows, split across `heads` column blocks. Inputs are already
    /// projected queries, keys and values.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, group: usize, heads: usize) -> Result<Var> {
        let (rows, dim) = self.shape(q);
        if self.shape(k) != (rows, dim) || self.shape(v) != (rows, dim) {
            return Err(Error::shape("attention", "q/k/v shapes differ"));
        }
        if group == 0 || rows % group != 0 || heads == 0 || dim % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("{rows}x{dim} with group {group}, {heads} heads"),
            ));
        }
        let dh = dim / heads;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Array2::zeros((rows, dim));
        let mut probs = Vec::with_capacity(rows / group * heads);
        for b in 0..rows / group {
            let r = b * group..(b + 1) * group;
            for h in 0..heads {
                let c = h * dh..(h + 1) * dh;
                let qb = qv.slice(s![r.clone(), c.clone()]);
                let kb = kv.slice(s![r.clone(), c.clone()]);
                let vb = vv.slice(s![r.clone(), c.clone()]);
                let mut p = qb.dot(&kb.t()) * scale;
                softmax_rows_in_place(&mut p);
                out.slice_mut(s![r.clone(), c]).assign(&p.dot(&vb));
                probs.push(p);
            }
        }
        let ng = self.needs(&[q, k, v]);
        let op = Op::Attention {
            q,
            k,
            v,
            group,
            heads,
            probs,
        };
        self.push("attention", out, op, ng)
    }

    /// Attention weights recorded by an [`Graph::attention`] node, one
    /// `group x group` matrix per (sample, head), sample-major.
    pub fn attention_weights(&self, v: Var) -> Option<&[Array2<F>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Straight-through Gumbel-max: the forward value is the one-hot argmax of
    /// `logits + noise`; gradients flow through `softmax((logits + noise) / temperature)`.
    pub fn gumbel_straight_through(
        &mut self,
        logits: Var,
        noise: &Array2<F>,
        temperature: F,
    ) -> Result<Var> {
        if self.shape(logits) != noise.dim() {
            return Err(Error::shape("gumbel_straight_through", "noise shape"));
        }
        if temperature <= F::zero() {
            return Err(Error::InvalidArgument("temperature must be positive".into()));
        }
        let perturbed = self.value(logits) + noise;
        let value = one_hot_argmax(&perturbed);
        let mut soft = perturbed / temperature;
        softmax_rows_in_place(&mut soft);
        let ng = self.needs(&[logits]);
        let op = Op::GumbelStraightThrough {
            logits,
            soft,
            temperature,
        };
        self.push("gumbel_straight_through", value, op, ng)
    }

    /// Relaxed Gumbel-softmax: the forward value is `softmax((logits + noise) / temperature)`
    /// itself, with the same backward as [`Graph::gumbel_straight_through`].
    pub fn gumbel_softmax(&mut self, logits: Var, noise: &Array2<F>, temperature: F) -> Result<Var> {
        if self.shape(logits) != noise.dim() {
            return Err(Error::shape("gumbel_softmax", "noise shape"));
        }
        if temperature <= F::zero() {
            return Err(Error::InvalidArgument("temperature must be positive".into()));
        }
        let mut soft = (self.value(logits) + noise) / temperature;
        softmax_rows_in_place(&mut soft);
        let ng = self.needs(&[logits]);
        let op = Op::GumbelStraightThrough {
            logits,
            soft: soft.clone(),
            temperature,
        };
        self.push("gumbel_softmax", soft, op, ng)
    }

    /// Row-wise mixture `sum_j weights[:, j] * outs[j]`. Rows whose weights
    /// are exactly one-hot copy the selected output verbatim.
    pub fn mix_one_hot(&mut self, outs: &[Var], weights: Var) -> Result<Var> {
        let (rows, m) = self.shape(weights);
        if outs.len() != m || m == 0 {
            return Err(Error::shape("mix_one_hot", format!("{} outputs, {m} weights", outs.len())));
        }
        let cols = self.shape(outs[0]).1;
        if outs.iter().any(|&o| self.shape(o) != (rows, cols)) {
            return Err(Error::shape("mix_one_hot", "output shapes differ"));
        }
        let w = self.value(weights);
        let mut value = Array2::zeros((rows, cols));
        for r in 0..rows {
            let wr = w.row(r);
            match exact_one_hot(wr.as_slice().expect("contiguous").iter().copied()) {
                Some(j) => value.row_mut(r).assign(&self.value(outs[j]).row(r)),
                None => {
                    for (j, &o) in outs.iter().enumerate() {
                        let wj = wr[j];
                        value
                            .row_mut(r)
                            .zip_mut_with(&self.value(o).row(r), |acc, &x| *acc += wj * x);
                    }
                }
            }
        }
        let mut deps = outs.to_vec();
        deps.push(weights);
        let ng = self.needs(&deps);
        let op = Op::MixOneHot {
            outs: outs.to_vec(),
            weights,
        };
        self.push("mix_one_hot", value, op, ng)
    }

    /// Per-row mean squared difference, shape `rows x 1`.
    pub fn row_mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "row_mse",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let cols = F::from_usize(self.shape(a).1).unwrap();
        let d = self.value(a) - self.value(b);
        let value = (&d * &d).sum_axis(Axis(1)).insert_axis(Axis(1)) / cols;
        let ng = self.needs(&[a, b]);
        self.push("row_mse", value, Op::RowMse(a, b), ng)
    }

    /// Element-wise `max(0, margin - x)`.
    pub fn hinge_below(&mut self, x: Var, margin: F) -> Result<Var> {
        let value = self.value(x).mapv(|v| (margin - v).max(F::zero()));
        let ng = self.needs(&[x]);
        self.push("hinge_below", value, Op::HingeBelow(x, margin), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a).mean().unwrap_or_else(F::zero);
        let ng = self.needs(&[a]);
        self.push("mean", Array2::from_elem((1, 1), m), Op::Mean(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a).sum();
        let ng = self.needs(&[a]);
        self.push("sum", Array2::from_elem((1, 1), m), Op::Sum(a), ng)
    }

    /// Mean binary cross-entropy; predictions are clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::shape(
                "bce",
                format!("{:?} vs {:?}", self.shape(pred), self.shape(target)),
            ));
        }
        let eps = F::of(1e-7);
        let v = bce_value(self.value(pred), self.value(target), eps);
        let ng = self.needs(&[pred, target]);
        self.push("bce", Array2::from_elem((1, 1), v), Op::Bce { pred, target, eps }, ng)
    }

    /// Clamps to `[0, 1]`. Out-of-range elements pass gradient only when a
    /// descent step would move them back toward the range.
    pub fn clamp_unit(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).mapv(|x| x.max(F::zero()).min(F::one()));
        let ng = self.needs(&[a]);
        self.push("clamp_unit", value, Op::ClampUnit(a), ng)
    }

    /// Back-propagates from the `1 x 1` node `loss`, adding parameter
    /// gradients into `store`. Node gradients stay readable through [`Graph::grad`].
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<F>) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::shape("backward", "loss must be 1x1"));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<F>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(i, &gy, &mut grads);
            if let Op::Param(id) = self.nodes[i].op {
                check_finite(&store.get(id).name, &gy)?;
                store.accumulate(id, &gy)?;
            }
            grads[i] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, gy: &Array2<F>, grads: &mut [Option<Array2<F>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, g: Array2<F>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                acc(*a, gy.dot(&self.value(*b).t()));
                acc(*b, self.value(*a).t().dot(gy));
            }
            Op::AddBias(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Add(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.mapv(|x| -x));
            }
            Op::Scale(a, c) => acc(*a, gy * *c),
            Op::Relu(a) => {
                let mut g = gy.clone();
                Zip::from(&mut g)
                    .and(self.value(*a))
                    .for_each(|g, &x| {
                        if x <= F::zero() {
                            *g = F::zero()
                        }
                    });
                acc(*a, g);
            }
            Op::Sigmoid(a) => {
                let mut g = gy.clone();
                Zip::from(&mut g)
                    .and(&node.value)
                    .for_each(|g, &y| *g *= y * (F::one() - y));
                acc(*a, g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                acc(*beta, gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(*gamma, (gy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                let dxhat = gy * self.value(*gamma);
                let n = F::from_usize(xhat.ncols()).unwrap();
                let mut dx = Array2::zeros(xhat.dim());
                for r in 0..xhat.nrows() {
                    let dr = dxhat.row(r);
                    let xr = xhat.row(r);
                    let mean_d = dr.sum() / n;
                    let mean_dx = dr.dot(&xr) / n;
                    for c in 0..xhat.ncols() {
                        dx[[r, c]] = inv_std[r] * (dr[c] - mean_d - xr[c] * mean_dx);
                    }
                }
                acc(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    acc(p, gy.slice(s![.., start..start + w]).to_owned());
                    start += w;
                }
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a);
                let g = gy
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(shape)
                    .expect("reshape preserves size");
                acc(*a, g);
            }
            Op::GatherRows(a, index) => {
                let mut g = Array2::zeros(self.shape(*a));
                for (i, &r) in index.iter().enumerate() {
                    let mut row = g.row_mut(r);
                    row += &gy.row(i);
                }
                acc(*a, g);
            }
            Op::ScatterRows { base, rows, index } => {
                let mut gb = gy.clone();
                for &r in index {
                    gb.row_mut(r).fill(F::zero());
                }
                acc(*base, gb);
                acc(*rows, gy.select(Axis(0), index));
            }
            Op::RepeatRows(a, times) => {
                let (rows, cols) = self.shape(*a);
                let g = gy
                    .to_shape((rows, *times, cols))
                    .expect("repeat shape")
                    .sum_axis(Axis(1));
                acc(*a, g);
            }
            Op::MeanGroups(a, group) => {
                let inv = F::one() / F::from_usize(*group).unwrap();
                let g = gy.select(
                    Axis(0),
                    &(0..gy.nrows())
                        .flat_map(|r| std::iter::repeat(r).take(*group))
                        .collect::<Vec<_>>(),
                ) * inv;
                acc(*a, g);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let batch = gy.nrows();
                let gpos = channels_first_to_positions(gy, batch, geom);
                acc(*bias, gpos.sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(*weight, cols.t().dot(&gpos));
                if self.nodes[input.0].needs_grad {
                    let gcols = gpos.dot(&self.value(*weight).t());
                    acc(*input, col2im(&gcols, batch, geom));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                group,
                heads,
                probs,
            } => {
                let (rows, dim) = self.shape(*q);
                let dh = dim / heads;
                let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = Array2::zeros((rows, dim));
                let mut dk = Array2::zeros((rows, dim));
                let mut dv = Array2::zeros((rows, dim));
                for b in 0..rows / group {
                    let r = b * group..(b + 1) * group;
                    for h in 0..*heads {
                        let c = h * dh..(h + 1) * dh;
                        let p = &probs[b * heads + h];
                        let go = gy.slice(s![r.clone(), c.clone()]);
                        let qb = qv.slice(s![r.clone(), c.clone()]);
                        let kb = kv.slice(s![r.clone(), c.clone()]);
                        let vb = vv.slice(s![r.clone(), c.clone()]);
                        dv.slice_mut(s![r.clone(), c.clone()]).assign(&p.t().dot(&go));
                        let dp = go.dot(&vb.t());
                        let mut ds = softmax_rows_backward(p, &dp);
                        ds *= scale;
                        dq.slice_mut(s![r.clone(), c.clone()]).assign(&ds.dot(&kb));
                        dk.slice_mut(s![r.clone(), c]).assign(&ds.t().dot(&qb));
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::GumbelStraightThrough {
                logits,
                soft,
                temperature,
            } => {
                let g = softmax_rows_backward(soft, gy) / *temperature;
                acc(*logits, g);
            }
            Op::MixOneHot { outs, weights } => {
                let w = self.value(*weights);
                let mut gw = Array2::zeros(w.dim());
                for (j, &o) in outs.iter().enumerate() {
                    let wj = w.column(j).insert_axis(Axis(1));
                    acc(o, gy * &wj);
                    let dots = (gy * self.value(o)).sum_axis(Axis(1));
                    gw.column_mut(j).assign(&dots);
                }
                acc(*weights, gw);
            }
            Op::RowMse(a, b) => {
                let cols = F::from_usize(self.shape(*a).1).unwrap();
                let two = F::of(2.0);
                let d = (self.value(*a) - self.value(*b)) * gy * (two / cols);
                acc(*b, d.mapv(|x| -x));
                acc(*a, d);
            }
            Op::HingeBelow(x, margin) => {
                let mut g = gy.clone();
                Zip::from(&mut g).and(self.value(*x)).for_each(|g, &v| {
                    *g = if *margin - v > F::zero() { -*g } else { F::zero() }
                });
                acc(*x, g);
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(*a);
                let scale = gy[[0, 0]] / F::from_usize(r * c).unwrap();
                acc(*a, Array2::from_elem((r, c), scale));
            }
            Op::Sum(a) => {
                acc(*a, Array2::from_elem(self.shape(*a), gy[[0, 0]]));
            }
            Op::Bce { pred, target, eps } => {
                let (r, c) = self.shape(*pred);
                let scale = gy[[0, 0]] / F::from_usize(r * c).unwrap();
                let lo = *eps;
                let hi = F::one() - *eps;
                let p = self.value(*pred);
                let y = self.value(*target);
                if self.nodes[pred.0].needs_grad {
                    let mut g = Array2::zeros((r, c));
                    Zip::from(&mut g).and(p).and(y).for_each(|g, &p, &y| {
                        let pc = p.max(lo).min(hi);
                        *g = scale * (pc - y) / (pc * (F::one() - pc));
                    });
                    acc(*pred, g);
                }
                if self.nodes[target.0].needs_grad {
                    let mut g = Array2::zeros((r, c));
                    Zip::from(&mut g).and(p).for_each(|g, &p| {
                        let pc = p.max(lo).min(hi);
                        *g = scale * ((F::one() - pc).ln() - pc.ln());
                    });
                    acc(*target, g);
                }
            }
            Op::ClampUnit(a) => {
                let mut g = gy.clone();
                Zip::from(&mut g).and(self.value(*a)).for_each(|g, &x| {
                    let inward = (x > F::one() && *g > F::zero()) || (x < F::zero() && *g < F::zero());
                    if !(inward || (x >= F::zero() && x <= F::one())) {
                        *g = F::zero();
                    }
                });
                acc(*a, g);
            }
        }
    }
}

pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn softmax_rows_in_place<F: Scalar>(a: &mut Array2<F>) {
    for mut row in a.outer_iter_mut() {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
}

/// `dL/dz` for `p = softmax(z)` row-wise, given `dL/dp`.
fn softmax_rows_backward<F: Scalar>(p: &Array2<F>, dp: &Array2<F>) -> Array2<F> {
    let inner = (p * dp).sum_axis(Axis(1)).insert_axis(Axis(1));
    p * &(dp - &inner)
}

/// One-hot of the per-row argmax; ties go to the lowest index.
pub(crate) fn one_hot_argmax<F: Scalar>(a: &Array2<F>) -> Array2<F> {
    let mut out = Array2::zeros(a.dim());
    for (r, row) in a.outer_iter().enumerate() {
        out[[r, argmax(row.iter().copied())]] = F::one();
    }
    out
}

pub(crate) fn argmax<F: Scalar>(values: impl Iterator<Item = F>) -> usize {
    let mut best = 0;
    let mut best_v = F::neg_infinity();
    for (i, v) in values.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

fn exact_one_hot<F: Scalar>(values: impl Iterator<Item = F>) -> Option<usize> {
    let mut hot = None;
    for (i, v) in values.enumerate() {
        if v == F::one() && hot.is_none() {
            hot = Some(i);
        } else if v != F::zero() {
            return None;
        }
    }
    hot
}

pub(crate) fn bce_value<F: Scalar>(pred: &Array2<F>, target: &Array2<F>, eps: F) -> F {
    let hi = F::one() - eps;
    let n = F::from_usize(pred.len().max(1)).unwrap();
    let total = Zip::from(pred).and(target).fold(F::zero(), |acc, &p, &y| {
        let p = p.max(eps).min(hi);
        acc - (y * p.ln() + (F::one() - y) * (F::one() - p).ln())
    });
    total / n
}

fn im2col<F: Scalar>(input: &Array2<F>, g: &ConvGeom) -> Array2<F> {
    let batch = input.nrows();
    let (oh, ow) = (g.out_height(), g.out_width());
    let mut cols = Array2::zeros((batch * oh * ow, g.patch_len()));
    let pad = g.padding as isize;
    for b in 0..batch {
        let img = input.row(b);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut col = cols.row_mut((b * oh + oy) * ow + ox);
                let mut idx = 0;
                for c in 0..g.in_channels {
                    for ky in 0..g.kernel {
                        let y = (oy * g.stride + ky) as isize - pad;
                        for kx in 0..g.kernel {
                            let x = (ox * g.stride + kx) as isize - pad;
                            if y >= 0 && x >= 0 && (y as usize) < g.height && (x as usize) < g.width {
                                col[idx] = img[(c * g.height + y as usize) * g.width + x as usize];
                            }
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Scalar>(cols: &Array2<F>, batch: usize, g: &ConvGeom) -> Array2<F> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let mut out = Array2::zeros((batch, g.input_len()));
    let pad = g.padding as isize;
    for b in 0..batch {
        let mut img = out.row_mut(b);
        for oy in 0..oh {
            for ox in 0..ow {
                let col = cols.row((b * oh + oy) * ow + ox);
                let mut idx = 0;
                for c in 0..g.in_channels {
                    for ky in 0..g.kernel {
                        let y = (oy * g.stride + ky) as isize - pad;
                        for kx in 0..g.kernel {
                            let x = (ox * g.stride + kx) as isize - pad;
                            if y >= 0 && x >= 0 && (y as usize) < g.height && (x as usize) < g.width {
                                img[(c * g.height + y as usize) * g.width + x as usize] += col[idx];
                            }
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

/// `(batch*positions) x channels` → `batch x (channels*positions)`.
fn positions_to_channels_first<F: Scalar>(y: &Array2<F>, batch: usize, g: &ConvGeom) -> Array2<F> {
    let positions = g.out_height() * g.out_width();
    let mut out = Array2::zeros((batch, g.output_len()));
    for b in 0..batch {
        for p in 0..positions {
            let src = y.row(b * positions + p);
            for c in 0..g.out_channels {
                out[[b, c * positions + p]] = src[c];
            }
        }
    }
    out
}

fn channels_first_to_positions<F: Scalar>(g_out: &Array2<F>, batch: usize, g: &ConvGeom) -> Array2<F> {
    let positions = g.out_height() * g.out_width();
    let mut out = Array2::zeros((batch * positions, g.out_channels));
    for b in 0..batch {
        let src = g_out.row(b);
        for c in 0..g.out_channels {
            for p in 0..positions {
                out[[b * positions + p, c]] = src[c * positions + p];
            }
        }
    }
    out
}

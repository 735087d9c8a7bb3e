//! Parameterized building blocks: dense stacks, the convolutional object
//! extractor and multihead self-attention.

use rand::Rng;

use super::graph::{ConvGeom, Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Sigmoid,
}

/// Layer widths plus, for every hidden layer, whether a LayerNorm sits
/// between the affine map and the activation. The last layer is linear.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    pub dims: Vec<usize>,
    pub layer_norm: Vec<bool>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn plain(dims: &[usize]) -> Self {
        Self {
            dims: dims.to_vec(),
            layer_norm: vec![false; dims.len().saturating_sub(2)],
            activation: Activation::Relu,
        }
    }

    /// `in -> hidden -> hidden -> out` with LayerNorm on the second hidden layer.
    pub fn block(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            dims: vec![input, hidden, hidden, output],
            layer_norm: vec![false, true],
            activation: Activation::Relu,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        prefix: &str,
        input: usize,
        output: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add_fan_in(format!("{prefix}.w"), (input, output), input, rng)?,
            bias: store.add_fan_in(format!("{prefix}.b"), (1, output), input, rng)?,
        })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub spec: MlpSpec,
    layers: Vec<Linear>,
    norms: Vec<Option<(ParamId, ParamId)>>,
}

impl Mlp {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        prefix: &str,
        spec: MlpSpec,
    ) -> Result<Self> {
        if spec.dims.len() < 2 || spec.layer_norm.len() != spec.dims.len() - 2 {
            return Err(Error::InvalidArgument(format!(
                "mlp {prefix}: {} dims with {} norm flags",
                spec.dims.len(),
                spec.layer_norm.len()
            )));
        }
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        for (i, pair) in spec.dims.windows(2).enumerate() {
            layers.push(Linear::new(store, rng, &format!("{prefix}.l{i}"), pair[0], pair[1])?);
            if i + 2 < spec.dims.len() {
                norms.push(if spec.layer_norm[i] {
                    let gamma = store.add(format!("{prefix}.ln{i}.g"), ndarray::Array2::ones((1, pair[1])))?;
                    let beta = store.add(format!("{prefix}.ln{i}.b"), ndarray::Array2::zeros((1, pair[1])))?;
                    Some((gamma, beta))
                } else {
                    None
                });
            }
        }
        Ok(Self { spec, layers, norms })
    }

    pub fn input_dim(&self) -> usize {
        self.spec.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.spec.dims.last().unwrap()
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        if g.shape(x).1 != self.input_dim() {
            return Err(Error::shape(
                "mlp_forward",
                format!("input width {} for first layer {}", g.shape(x).1, self.input_dim()),
            ));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i < last {
                if let Some((gamma, beta)) = self.norms[i] {
                    let gv = g.param(store, gamma)?;
                    let bv = g.param(store, beta)?;
                    h = g.layer_norm(h, gv, bv)?;
                }
                h = match self.spec.activation {
                    Activation::Relu => g.relu(h)?,
                    Activation::Sigmoid => g.sigmoid(h)?,
                };
            }
        }
        Ok(h)
    }
}

/// Side length of the input frames and of the extracted feature maps.
pub const FRAME_SIZE: usize = 50;
pub const MAP_SIZE: usize = 10;

/// Strided convolutional object extractor: `C x 50 x 50` images to `N`
/// sigmoid feature maps of `10 x 10`.
#[derive(Clone, Debug)]
pub struct ConvStack {
    first: (ParamId, ParamId, ConvGeom),
    second: (ParamId, ParamId, ConvGeom),
}

impl ConvStack {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        prefix: &str,
        in_channels: usize,
        hidden_channels: usize,
        maps: usize,
    ) -> Result<Self> {
        let stride = FRAME_SIZE / MAP_SIZE;
        let g1 = ConvGeom {
            in_channels,
            height: FRAME_SIZE,
            width: FRAME_SIZE,
            out_channels: hidden_channels,
            kernel: stride,
            stride,
            padding: 0,
        };
        let g2 = ConvGeom {
            in_channels: hidden_channels,
            height: MAP_SIZE,
            width: MAP_SIZE,
            out_channels: maps,
            kernel: 1,
            stride: 1,
            padding: 0,
        };
        let mut conv = |name: &str, geom: ConvGeom| -> Result<(ParamId, ParamId, ConvGeom)> {
            let fan_in = geom.patch_len();
            let w = store.add_fan_in(format!("{prefix}.{name}.w"), (fan_in, geom.out_channels), fan_in, rng)?;
            let b = store.add_fan_in(format!("{prefix}.{name}.b"), (1, geom.out_channels), fan_in, rng)?;
            Ok((w, b, geom))
        };
        Ok(Self {
            first: conv("conv0", g1)?,
            second: conv("conv1", g2)?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.first.2.in_channels
    }

    pub fn maps(&self) -> usize {
        self.second.2.out_channels
    }

    /// `batch x (C*50*50)` to `batch x (N*10*10)`, values in `(0, 1)`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, images: Var) -> Result<Var> {
        let (w, b, geom) = self.first;
        let (wv, bv) = (g.param(store, w)?, g.param(store, b)?);
        let h = g.conv2d(images, wv, bv, geom)?;
        let h = g.relu(h)?;
        let (w, b, geom) = self.second;
        let (wv, bv) = (g.param(store, w)?, g.param(store, b)?);
        let h = g.conv2d(h, wv, bv, geom)?;
        g.sigmoid(h)
    }
}

/// Multihead self-attention with query/key/value and output projections.
#[derive(Clone, Debug)]
pub struct MultiheadAttention {
    pub model_dim: usize,
    pub heads: usize,
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
}

impl MultiheadAttention {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        prefix: &str,
        model_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || model_dim % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "model dim {model_dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            model_dim,
            heads,
            query: Linear::new(store, rng, &format!("{prefix}.q"), model_dim, model_dim)?,
            key: Linear::new(store, rng, &format!("{prefix}.k"), model_dim, model_dim)?,
            value: Linear::new(store, rng, &format!("{prefix}.v"), model_dim, model_dim)?,
            output: Linear::new(store, rng, &format!("{prefix}.o"), model_dim, model_dim)?,
        })
    }

    /// `x` holds consecutive sequences of `seq_len` rows; returns the same shape.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
        seq_len: usize,
    ) -> Result<Var> {
        Ok(self.forward_with_core(g, store, x, seq_len)?.0)
    }

    /// Like [`MultiheadAttention::forward`], also returning the attention-core
    /// node so callers can inspect the weights.
    pub fn forward_with_core<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
        seq_len: usize,
    ) -> Result<(Var, Var)> {
        if g.shape(x).1 != self.model_dim {
            return Err(Error::shape("multihead_attention", "input width"));
        }
        let q = self.query.forward(g, store, x)?;
        let k = self.key.forward(g, store, x)?;
        let v = self.value.forward(g, store, x)?;
        let core = g.attention(q, k, v, seq_len, self.heads)?;
        Ok((self.output.forward(g, store, core)?, core))
    }

    pub fn value_projection(&self) -> &Linear {
        &self.value
    }

    pub fn output_projection(&self) -> &Linear {
        &self.output
    }
}

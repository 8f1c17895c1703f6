//! Parameterized building blocks over [`Graph`] primitives.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Affine map applied to each column of a `[in, P]` matrix (or to each
/// pixel of a `[in, H, W]` map, which makes it a 1x1 convolution).
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        let weight = store.uniform(&format!("{name}.weight"), vec![outputs, inputs], inputs)?;
        let bias = store.zeros(&format!("{name}.bias"), vec![outputs])?;
        Ok(Self { weight, bias, inputs, outputs })
    }

    /// Same as [`Linear::new`] but with a zero weight matrix.
    pub fn zeroed(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        let weight = store.zeros(&format!("{name}.weight"), vec![outputs, inputs])?;
        let bias = store.zeros(&format!("{name}.bias"), vec![outputs])?;
        Ok(Self { weight, bias, inputs, outputs })
    }

    pub fn num_params(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }

    /// Accepts `[in]`, `[in, P]` or `[in, H, W]`; output keeps the trailing extents.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.first() != Some(&self.inputs) {
            return Err(Error::shape("linear", format!("expected {} input rows, got {:?}", self.inputs, shape)));
        }
        let cols: usize = shape[1..].iter().product();
        let x2 = g.reshape(x, vec![self.inputs, cols])?;
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(w, x2)?;
        let y = g.add_row_bias(y, b)?;
        let mut out = shape;
        out[0] = self.outputs;
        g.reshape(y, out)
    }
}

/// Stack of [`Linear`] layers with ReLU between them (not after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths = [in, hidden.., out]`.
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(format!("mlp `{name}` needs at least two widths")));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// Like [`Mlp::new`], but the final layer starts at zero.
    pub fn zero_last(store: &mut ParamStore, name: &str, widths: &[usize]) -> Result<Self> {
        let n = widths.len();
        if n < 2 {
            return Err(Error::Config(format!("mlp `{name}` needs at least two widths")));
        }
        let mut layers = Vec::with_capacity(n - 1);
        for (i, w) in widths.windows(2).enumerate() {
            let layer = if i + 2 == n {
                Linear::zeroed(store, &format!("{name}.{i}"), w[0], w[1])?
            } else {
                Linear::new(store, &format!("{name}.{i}"), w[0], w[1])?
            };
            layers.push(layer);
        }
        Ok(Self { layers })
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Linear::num_params).sum()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

/// Square-kernel convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// "Same" padding for odd kernels.
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("conv `{name}`: kernel {kernel} must be odd")));
        }
        let fan_in = cin * kernel * kernel;
        let weight = store.uniform(&format!("{name}.weight"), vec![cout, cin, kernel, kernel], fan_in)?;
        let bias = store.zeros(&format!("{name}.bias"), vec![cout])?;
        Ok(Self { weight, bias, cin, cout, kernel, stride, pad: kernel / 2 })
    }

    pub fn num_params(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel + self.cout
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.conv2d(x, w, self.stride, self.pad)?;
        g.add_row_bias(y, b)
    }
}

/// Group normalization followed by a learned per-channel affine.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::Config(format!("norm `{name}`: {groups} groups do not divide {channels} channels")));
        }
        let gamma = store.constant(&format!("{name}.gamma"), vec![channels], 1.0)?;
        let beta = store.zeros(&format!("{name}.beta"), vec![channels])?;
        Ok(Self { gamma, beta, channels, groups })
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        group_normalize(g, x, self.groups, gamma, beta)
    }
}

/// Per-group standardization then `gamma[c] * y + beta[c]`.
pub fn group_normalize(g: &mut Graph, x: Var, groups: usize, gamma: Var, beta: Var) -> Result<Var> {
    let y = g.group_norm(x, groups)?;
    let y = g.mul_row_scale(y, gamma)?;
    g.add_row_bias(y, beta)
}

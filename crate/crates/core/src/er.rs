//! Edge-aware two-vector subspace attached to each decoder level.

use crate::error::{Error, Result};
use crate::numcore::{Conv2d, Graph, ParamId, ParamStore, Var};

/// Edge / non-edge embeddings with the width of the owning decoder level.
#[derive(Clone, Debug)]
pub struct ErSubspace {
    pub edge: ParamId,
    pub non_edge: ParamId,
    pub channels: usize,
}

impl ErSubspace {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            edge: store.uniform(&format!("{name}.edge"), vec![channels], channels)?,
            non_edge: store.uniform(&format!("{name}.non_edge"), vec![channels], channels)?,
            channels,
        })
    }
}

/// Per-pixel coefficient maps, each `[H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct ErCoefficients {
    pub alpha_edge: Var,
    pub alpha_non_edge: Var,
}

/// Three 3x3 convolutions (ReLU between) producing `N` logits per pixel.
#[derive(Clone, Debug)]
pub struct EdgeCoefficientNet {
    pub convs: [Conv2d; 3],
    pub channels: usize,
}

impl EdgeCoefficientNet {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        if channels % 2 != 0 {
            return Err(Error::Config(format!("edge coefficient net `{name}`: channel count {channels} must be even")));
        }
        let conv = |s: &mut ParamStore, i: usize| Conv2d::new(s, &format!("{name}.conv{i}"), channels, channels, 3, 1);
        Ok(Self {
            convs: [conv(store, 0)?, conv(store, 1)?, conv(store, 2)?],
            channels,
        })
    }

    pub fn num_params(&self) -> usize {
        self.convs.iter().map(Conv2d::num_params).sum()
    }

    pub fn logits(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(g, store, h)?;
            if i < 2 {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

/// One decoder level's edge lifting: subspace plus coefficient predictor.
#[derive(Clone, Debug)]
pub struct ErLifting {
    pub subspace: ErSubspace,
    pub ecn: EdgeCoefficientNet,
}

impl ErLifting {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let ecn = EdgeCoefficientNet::new(store, &format!("{name}.ecn"), channels)?;
        let subspace = ErSubspace::new(store, name, channels)?;
        Ok(Self { subspace, ecn })
    }

    pub fn num_params(&self) -> usize {
        self.ecn.num_params() + 2 * self.subspace.channels
    }

    /// Returns the coefficients and `F_dec + F_e`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, fdec: Var) -> Result<(ErCoefficients, Var)> {
        let coeffs = er_coefficients(g, store, &self.ecn, fdec)?;
        let (_, fused) = er_transform(g, store, &self.subspace, coeffs, fdec)?;
        Ok((coeffs, fused))
    }
}

/// `alpha_edge = sum over the first N/2 channels of softmax_channels(f_ECN(F_dec))`,
/// clamped to `[0, 1]` against rounding, and `alpha_non_edge = 1 - alpha_edge`.
pub fn er_coefficients(g: &mut Graph, store: &ParamStore, ecn: &EdgeCoefficientNet, fdec: Var) -> Result<ErCoefficients> {
    let logits = ecn.logits(g, store, fdec)?;
    coefficients_from_logits(g, logits)
}

/// Coefficient rule applied to given `[N, H, W]` logits.
pub fn coefficients_from_logits(g: &mut Graph, logits: Var) -> Result<ErCoefficients> {
    let s = g.shape(logits).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("er_coefficients", format!("expected [N, H, W], got {s:?}")));
    }
    if s[0] % 2 != 0 {
        return Err(Error::Config(format!("edge coefficients need an even channel count, got {}", s[0])));
    }
    let probs = g.softmax(logits);
    let first_half = g.slice_rows(probs, 0, s[0] / 2)?;
    let summed = g.sum_rows(first_half);
    let alpha_edge = g.clamp(summed, 0.0, 1.0);
    let alpha_non_edge = g.affine(alpha_edge, -1.0, 1.0);
    Ok(ErCoefficients {
        alpha_edge,
        alpha_non_edge,
    })
}

/// `F_e = alpha_edge * e_edge + alpha_non_edge * e_non_edge` per pixel;
/// returns `(F_e, F_dec + F_e)`.
pub fn er_transform(g: &mut Graph, store: &ParamStore, ers: &ErSubspace, coeffs: ErCoefficients, fdec: Var) -> Result<(Var, Var)> {
    let s = g.shape(fdec).to_vec();
    if s.len() != 3 || s[0] != ers.channels {
        return Err(Error::shape("er_transform", format!("subspace width {} vs features {s:?}", ers.channels)));
    }
    let (n, hw) = (s[0], s[1] * s[2]);
    if g.shape(coeffs.alpha_edge).iter().product::<usize>() != hw {
        return Err(Error::shape("er_transform", "coefficient map size differs from features"));
    }
    let e1 = g.param(store, ers.edge);
    let e2 = g.param(store, ers.non_edge);
    let e1 = g.reshape(e1, vec![1, n])?;
    let e2 = g.reshape(e2, vec![1, n])?;
    let basis = g.concat(&[e1, e2])?;
    let a1 = g.reshape(coeffs.alpha_edge, vec![1, hw])?;
    let a2 = g.reshape(coeffs.alpha_non_edge, vec![1, hw])?;
    let alphas = g.concat(&[a1, a2])?;
    let fe = g.matmul_t(basis, alphas, true, false)?;
    let fe = g.reshape(fe, s)?;
    let fused = g.add(fdec, fe)?;
    Ok((fe, fused))
}

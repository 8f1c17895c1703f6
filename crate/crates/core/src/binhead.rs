//! Adaptive-bin depth head: global query feature, bin-width predictor,
//! bin centres, probability-weighted depth and the SILog objective.

use crate::error::{Error, Result};
use crate::numcore::{Graph, Linear, Mlp, ParamStore, Tensor, Var};

/// Pooling grids of the pyramid pooling stage.
pub const PYRAMID_GRIDS: [usize; 4] = [1, 2, 3, 6];

/// Probabilities per pixel must sum to one within this slack.
pub const PROB_SUM_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParams {
    /// Scale constant.
    pub alpha: f64,
    /// Variance-minimizing factor.
    pub lambda: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self { alpha: 10.0, lambda: 0.85 }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("loss params need alpha > 0 and 0 <= lambda <= 1, got {self:?}")));
        }
        Ok(())
    }
}

/// Bin widths and centres of one image over `[d_min, d_max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BinPartition {
    pub d_min: f64,
    pub d_max: f64,
    pub widths: Vec<f64>,
    pub centres: Vec<f64>,
}

impl BinPartition {
    pub fn new(widths: Vec<f64>, d_min: f64, d_max: f64) -> Result<Self> {
        let centres = bin_centres(&widths, d_min, d_max)?;
        Ok(Self { d_min, d_max, widths, centres })
    }

    pub fn delta(&self) -> f64 {
        self.d_max - self.d_min
    }
}

/// `bin_k = d_min + (d_max - d_min) * (b_k / 2 + sum_{j<k} b_j)`.
pub fn bin_centres(widths: &[f64], d_min: f64, d_max: f64) -> Result<Vec<f64>> {
    if widths.is_empty() {
        return Err(Error::InvalidInput("no bin widths".into()));
    }
    if let Some(b) = widths.iter().find(|b| !(**b >= 0.0)) {
        return Err(Error::InvalidInput(format!("negative or non-finite bin width {b}")));
    }
    let total: f64 = widths.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!("bin widths sum to {total}, expected 1")));
    }
    if !(d_max > d_min) {
        return Err(Error::InvalidInput(format!("empty depth range [{d_min}, {d_max}]")));
    }
    let delta = d_max - d_min;
    let mut before = 0.0;
    Ok(widths
        .iter()
        .map(|b| {
            let c = d_min + delta * (b / 2.0 + before);
            before += b;
            c
        })
        .collect())
}

/// Differentiable centres from a `[K]` widths node: `d_min + delta * T b`
/// where `T` has `1/2` on the diagonal and ones below it.
pub fn bin_centres_graph(g: &mut Graph, widths: Var, d_min: f64, d_max: f64) -> Result<Var> {
    let k = g.shape(widths).iter().product::<usize>();
    let mut tri = vec![0.0; k * k];
    for i in 0..k {
        tri[i * k + i] = 0.5;
        for j in 0..i {
            tri[i * k + j] = 1.0;
        }
    }
    let tri = g.constant_from(vec![k, k], tri)?;
    let b = g.reshape(widths, vec![k, 1])?;
    let cum = g.matmul(tri, b)?;
    let c = g.affine(cum, d_max - d_min, d_min);
    g.reshape(c, vec![k])
}

/// `d_i = sum_k p_ik * bin_k` for probabilities laid out `[K, P]` row-major.
pub fn depth_from_probs(probs: &[f64], centres: &[f64]) -> Result<Vec<f64>> {
    let k = centres.len();
    if k == 0 || probs.len() % k != 0 {
        return Err(Error::shape("depth_from_probs", format!("{} probabilities for {k} bins", probs.len())));
    }
    let p = probs.len() / k;
    let mut depth = vec![0.0; p];
    for i in 0..p {
        let mut total = 0.0;
        for (kk, c) in centres.iter().enumerate() {
            let pk = probs[kk * p + i];
            if pk < 0.0 {
                return Err(Error::InvalidInput(format!("negative probability at pixel {i}")));
            }
            total += pk;
            depth[i] += pk * c;
        }
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidInput(format!("probabilities at pixel {i} sum to {total}")));
        }
    }
    Ok(depth)
}

/// Graph form of [`depth_from_probs`]: `[K, h, w]` with `[K]` centres to `[h, w]`.
pub fn depth_from_probs_graph(g: &mut Graph, probs: Var, centres: Var) -> Result<Var> {
    let s = g.shape(probs).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("depth_from_probs", format!("expected [K, h, w], got {s:?}")));
    }
    let (k, h, w) = (s[0], s[1], s[2]);
    let c = g.reshape(centres, vec![k, 1])?;
    let p = g.reshape(probs, vec![k, h * w])?;
    let d = g.matmul_t(c, p, true, false)?;
    g.reshape(d, vec![h, w])
}

fn masked_pairs<'a>(pred: &'a [f64], gt: &'a [f64], mask: &'a [bool]) -> Result<Vec<usize>> {
    if pred.len() != gt.len() || gt.len() != mask.len() {
        return Err(Error::shape("silog_loss", format!("pred {}, gt {}, mask {}", pred.len(), gt.len(), mask.len())));
    }
    let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if idx.is_empty() {
        return Err(Error::InvalidInput("empty validity mask".into()));
    }
    if let Some(&i) = idx.iter().find(|&&i| !(pred[i] > 0.0) || !(gt[i] > 0.0)) {
        return Err(Error::InvalidInput(format!("nonpositive depth under mask at pixel {i} (pred {}, gt {})", pred[i], gt[i])));
    }
    Ok(idx)
}

/// `alpha * sqrt(mean(D^2) - lambda * mean(D)^2)` with `D = ln pred - ln gt`
/// over masked pixels. The radicand is clamped at zero.
pub fn silog_loss(pred: &[f64], gt: &[f64], mask: &[bool], lp: &LossParams) -> Result<f64> {
    lp.validate()?;
    let idx = masked_pairs(pred, gt, mask)?;
    let m = idx.len() as f64;
    let d: Vec<f64> = idx.iter().map(|&i| pred[i].ln() - gt[i].ln()).collect();
    let mu = d.iter().sum::<f64>() / m;
    // mean(d^2) - lambda*mu^2 written as a centred variance plus (1 - lambda)*mu^2
    let var = d.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
    Ok(lp.alpha * (var + (1.0 - lp.lambda) * mu * mu).max(0.0).sqrt())
}

/// Differentiable [`silog_loss`] with respect to `pred` (any shape, flat-indexed like `gt`).
pub fn silog_loss_graph(g: &mut Graph, pred: Var, gt: &[f64], mask: &[bool], lp: &LossParams) -> Result<Var> {
    lp.validate()?;
    let idx = masked_pairs(g.value(pred), gt, mask)?;
    let n = idx.len();
    let log_gt: Vec<f64> = idx.iter().map(|&i| gt[i].ln()).collect();
    let sel = g.gather(pred, idx)?;
    let log_pred = g.log(sel);
    let log_gt = g.constant_from(vec![log_gt.len()], log_gt)?;
    let diff = g.sub(log_pred, log_gt)?;
    let mu = g.mean(diff);
    let mu = g.reshape(mu, vec![1, 1])?;
    let ones = g.constant(&Tensor::full(vec![1, n], 1.0));
    let mu_b = g.matmul(mu, ones)?;
    let mu_b = g.reshape(mu_b, vec![n])?;
    let centred = g.sub(diff, mu_b)?;
    let sq = g.square(centred);
    let var = g.mean(sq);
    let mu_sq = g.square(mu);
    let mu_sq = g.reshape(mu_sq, vec![])?;
    let bias = g.scale(mu_sq, 1.0 - lp.lambda);
    let v = g.add(var, bias)?;
    let r = g.sqrt(v);
    Ok(g.scale(r, lp.alpha))
}

/// Pyramid pooling over the coarsest DGR map, producing the decoder's initial query.
#[derive(Clone, Debug)]
pub struct PixelQueryInit {
    pub branches: Vec<Linear>,
    pub fuse: Linear,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl PixelQueryInit {
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, out_channels: usize) -> Result<Self> {
        let bw = (in_channels / 4).max(1);
        let branches = PYRAMID_GRIDS
            .iter()
            .map(|s| Linear::new(store, &format!("{name}.pool{s}"), in_channels, bw))
            .collect::<Result<Vec<_>>>()?;
        let fuse = Linear::new(store, &format!("{name}.fuse"), in_channels + bw * PYRAMID_GRIDS.len(), out_channels)?;
        Ok(Self { branches, fuse, in_channels, out_channels })
    }

    pub fn num_params(&self) -> usize {
        self.branches.iter().map(Linear::num_params).sum::<usize>() + self.fuse.num_params()
    }

    /// `[C, H, W] -> [C_out, H, W]`. Grids larger than the input clamp to its size.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[0] != self.in_channels {
            return Err(Error::shape("pqi", format!("expected [{}, H, W], got {s:?}", self.in_channels)));
        }
        let (h, w) = (s[1], s[2]);
        let mut parts = vec![x];
        for (grid, proj) in PYRAMID_GRIDS.iter().zip(&self.branches) {
            let pooled = g.adaptive_avg_pool(x, *grid, *grid)?;
            let p = proj.forward(g, store, pooled)?;
            parts.push(g.resize_bilinear(p, h, w)?);
        }
        let cat = g.concat(&parts)?;
        self.fuse.forward(g, store, cat)
    }
}

pub fn pqi_global_feature(g: &mut Graph, store: &ParamStore, pqi: &PixelQueryInit, dgr_high: Var) -> Result<Var> {
    pqi.forward(g, store, dgr_high)
}

/// Global average pooling, an MLP to `n_bins` logits, then softmax.
#[derive(Clone, Debug)]
pub struct BinWidthPredictor {
    pub mlp: Mlp,
    pub n_bins: usize,
}

impl BinWidthPredictor {
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, n_bins: usize) -> Result<Self> {
        if n_bins == 0 {
            return Err(Error::Config("n_bins must be positive".into()));
        }
        let mlp = Mlp::new(store, name, &[in_channels, in_channels, n_bins])?;
        Ok(Self { mlp, n_bins })
    }

    pub fn num_params(&self) -> usize {
        self.mlp.num_params()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, dgr_high: Var) -> Result<Var> {
        let pooled = g.global_avg_pool(dgr_high)?;
        let logits = self.mlp.forward(g, store, pooled)?;
        Ok(g.softmax(logits))
    }
}

pub fn predict_bin_widths(g: &mut Graph, store: &ParamStore, bcp: &BinWidthPredictor, dgr_high: Var) -> Result<Var> {
    bcp.forward(g, store, dgr_high)
}

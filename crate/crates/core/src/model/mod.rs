//! The end-to-end network: CNN encoder, shared-frame DGR transforms, decoder
//! blocks with edge enhancement, and the adaptive-bin head.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, BLOB_FILE, MANIFEST_FILE};
pub use train::{mean_loss, train, StepRecord, TrainConfig};

use crate::binhead::{
    bin_centres_graph, depth_from_probs_graph, silog_loss_graph, BinPartition, BinWidthPredictor, LossParams, PixelQueryInit,
};
use crate::dgr::{FrameSubspace, LiftingMap, SfDgr, DecoderBlock};
use crate::er::ErLifting;
use crate::error::{Error, Result};
use crate::numcore::{
    finite_diff_check, Adam, Conv2d, GradCheckOptions, GradCheckReport, Graph, GroupNorm, Linear, ParamGrads, ParamStore, Tensor, Var,
};
use crate::par::{self, Execution};
use crate::scenes::SceneSample;

/// Number of encoder scales (1/4, 1/8, 1/16, 1/32).
pub const SCALES: usize = 4;
/// Input extents must be multiples of the coarsest stride.
pub const STRIDE: usize = 32;
pub const LIFTING_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Encoder widths at 1/4, 1/8, 1/16, 1/32.
    pub encoder_channels: [usize; SCALES],
    /// Decoder widths at 1/32, 1/16, 1/8, 1/4.
    pub decoder_channels: [usize; SCALES],
    pub frame_n: usize,
    pub frame_c: usize,
    pub n_bins: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub seed: u64,
    /// Build the edge-enhancement modules.
    pub use_er: bool,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            height: 64,
            width: 64,
            encoder_channels: [32, 64, 128, 256],
            decoder_channels: [128, 64, 32, 16],
            frame_n: 32,
            frame_c: 8,
            n_bins: 64,
            d_min: 1e-3,
            d_max: 10.0,
            seed: 0,
            use_er: true,
        }
    }

    /// 32x32 preset small enough for exhaustive gradient checks.
    pub fn tiny() -> Self {
        Self {
            height: 32,
            width: 32,
            encoder_channels: [4, 4, 8, 8],
            decoder_channels: [8, 8, 4, 4],
            frame_n: 8,
            frame_c: 4,
            n_bins: 8,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % STRIDE != 0 || self.width % STRIDE != 0 {
            return Err(Error::Config(format!("input {}x{} must be a positive multiple of {STRIDE}", self.height, self.width)));
        }
        if self.encoder_channels.contains(&0) || self.decoder_channels.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.frame_c == 0 || self.frame_n == 0 || self.frame_n % self.frame_c != 0 {
            return Err(Error::Config(format!("frame dimension {} must divide vector count {}", self.frame_c, self.frame_n)));
        }
        if self.n_bins == 0 {
            return Err(Error::Config("n_bins must be positive".into()));
        }
        if !(self.d_min > 0.0) || !(self.d_max > self.d_min) || !self.d_max.is_finite() {
            return Err(Error::Config(format!("depth range [{}, {}] needs 0 < d_min < d_max", self.d_min, self.d_max)));
        }
        if self.use_er {
            if let Some(c) = self.decoder_channels[1..].iter().find(|c| *c % 2 != 0) {
                return Err(Error::Config(format!("edge enhancement needs even decoder widths, got {c}")));
            }
        }
        Ok(())
    }

    /// Spatial size of scale `l` (0 = 1/4 ... 3 = 1/32).
    pub fn encoder_size(&self, l: usize) -> (usize, usize) {
        let f = 4 << l;
        (self.height / f, self.width / f)
    }

    /// Spatial size of the prediction (1/4 of the input).
    pub fn output_size(&self) -> (usize, usize) {
        self.encoder_size(0)
    }
}

/// Groups of 8 channels where possible.
fn norm_groups(c: usize) -> usize {
    if c % 8 == 0 {
        c / 8
    } else {
        1
    }
}

/// 3x3 conv, group norm, ReLU, then 2x2 average pooling.
#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

impl EncoderStage {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, 3, 1)?,
            norm: GroupNorm::new(store, &format!("{name}.norm"), cout, norm_groups(cout))?,
        })
    }

    pub fn num_params(&self) -> usize {
        self.conv.num_params() + self.norm.num_params()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        let y = self.norm.forward(g, store, y)?;
        let y = g.relu(y);
        halve(g, y)
    }
}

fn halve(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    g.adaptive_avg_pool(x, s[1] / 2, s[2] / 2)
}

/// Test switches for [`LiftFormer::forward_graph`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Skip the edge enhancement even when the modules exist.
    pub disable_er: bool,
}

/// Graph nodes of one forward pass. Scale-indexed vectors run coarse to fine
/// for the decoder side (`dgr[0]` is 1/32) and fine to coarse for the encoder.
#[derive(Clone, Debug)]
pub struct GraphTrace {
    pub image: Var,
    pub encoder: Vec<Var>,
    pub dgr: Vec<Var>,
    pub decoder: Vec<Var>,
    pub er_alpha: Vec<Var>,
    pub widths: Var,
    pub centres: Var,
    pub probs: Var,
    pub depth_low: Var,
    pub depth: Var,
}

/// Values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `F_p` at 1/4, 1/8, 1/16, 1/32.
    pub encoder: Vec<Tensor>,
    /// `DGR` at 1/32, 1/16, 1/8, 1/4.
    pub dgr: Vec<Tensor>,
    /// `DF^0` (query from the pooled global feature) through `DF^3`.
    pub decoder: Vec<Tensor>,
    /// Edge coefficient maps after each decoder block (empty without ER).
    pub er_alpha: Vec<Tensor>,
    pub bins: BinPartition,
    /// `[K, h, w]` at 1/4 resolution.
    pub probs: Tensor,
    /// `[h, w]` at 1/4 resolution.
    pub depth_low: Tensor,
    /// `[H, W]`.
    pub depth: Tensor,
}

impl ForwardTrace {
    pub fn all_finite(&self) -> bool {
        self.encoder.iter().chain(&self.dgr).chain(&self.decoder).chain(&self.er_alpha).all(Tensor::all_finite)
            && self.probs.all_finite()
            && self.depth_low.all_finite()
            && self.depth.all_finite()
            && self.bins.centres.iter().chain(&self.bins.widths).all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug)]
pub struct LiftFormer {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Vec<EncoderStage>,
    pub frame: FrameSubspace,
    /// One per decoder scale, 1/32 first, all sharing `frame`.
    pub transforms: Vec<SfDgr>,
    pub pqi: PixelQueryInit,
    pub blocks: Vec<DecoderBlock>,
    pub er: Vec<ErLifting>,
    pub prob_head: Linear,
    pub bcp: BinWidthPredictor,
}

pub fn build_model(cfg: &ModelConfig) -> Result<LiftFormer> {
    LiftFormer::new(cfg.clone())
}

impl LiftFormer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut s = ParamStore::new(config.seed);
        let (enc, dec) = (config.encoder_channels, config.decoder_channels);
        let mut encoder = Vec::with_capacity(SCALES);
        let mut cin = 3;
        for (l, &c) in enc.iter().enumerate() {
            encoder.push(EncoderStage::new(&mut s, &format!("enc{l}"), cin, c)?);
            cin = c;
        }
        let frame = FrameSubspace::construct(&mut s, "frame", config.frame_n, config.frame_c)?;
        let transforms = (0..SCALES)
            .map(|l| SfDgr::new(&mut s, &format!("sfdgr{l}"), enc[SCALES - 1 - l], dec[l], &frame))
            .collect::<Result<Vec<_>>>()?;
        let pqi = PixelQueryInit::new(&mut s, "pqi", dec[0], dec[0])?;
        let mut blocks = Vec::with_capacity(SCALES - 1);
        let mut er = Vec::new();
        for l in 1..SCALES {
            blocks.push(DecoderBlock::new(&mut s, &format!("dec{l}"), dec[l - 1], dec[l], dec[l])?);
            if config.use_er {
                er.push(ErLifting::new(&mut s, &format!("er{l}"), dec[l])?);
            }
        }
        let prob_head = Linear::new(&mut s, "prob_head", dec[SCALES - 1], config.n_bins)?;
        let bcp = BinWidthPredictor::new(&mut s, "bcp", dec[0], config.n_bins)?;
        Ok(Self {
            config,
            params: s,
            encoder,
            frame,
            transforms,
            pqi,
            blocks,
            er,
            prob_head,
            bcp,
        })
    }

    /// Sum of the submodules' declared parameter counts.
    pub fn num_params(&self) -> usize {
        self.encoder.iter().map(EncoderStage::num_params).sum::<usize>()
            + self.frame.count() * self.frame.dim()
            + self.transforms.iter().map(SfDgr::num_params).sum::<usize>()
            + self.pqi.num_params()
            + self.blocks.iter().map(DecoderBlock::num_params).sum::<usize>()
            + self.er.iter().map(ErLifting::num_params).sum::<usize>()
            + self.prob_head.num_params()
            + self.bcp.num_params()
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let want = [3, self.config.height, self.config.width];
        if image.shape() != want {
            return Err(Error::shape("forward", format!("expected image {want:?}, got {:?}", image.shape())));
        }
        Ok(())
    }

    /// Builds the forward pass on `g` using `store` for parameter values
    /// (normally `self.params`).
    pub fn forward_graph(&self, g: &mut Graph, store: &ParamStore, image: &Tensor, opts: ForwardOptions) -> Result<GraphTrace> {
        self.check_image(image)?;
        let img = g.constant(image);
        let mut x = halve(g, img)?;
        let mut encoder = Vec::with_capacity(SCALES);
        for stage in &self.encoder {
            x = stage.forward(g, store, x)?;
            encoder.push(x);
        }
        let mut dgr = Vec::with_capacity(SCALES);
        for (l, t) in self.transforms.iter().enumerate() {
            dgr.push(t.forward(g, store, &self.frame, encoder[SCALES - 1 - l])?.output);
        }
        let mut df = self.pqi.forward(g, store, dgr[0])?;
        let mut decoder = vec![df];
        let mut er_alpha = Vec::new();
        for (l, block) in self.blocks.iter().enumerate() {
            df = block.forward(g, store, df, dgr[l + 1])?;
            if let (false, Some(er)) = (opts.disable_er, self.er.get(l)) {
                let (coeffs, fused) = er.forward(g, store, df)?;
                er_alpha.push(coeffs.alpha_edge);
                df = fused;
            }
            decoder.push(df);
        }
        let logits = self.prob_head.forward(g, store, df)?;
        let probs = g.softmax(logits);
        let widths = self.bcp.forward(g, store, dgr[0])?;
        let centres = bin_centres_graph(g, widths, self.config.d_min, self.config.d_max)?;
        let depth_low = depth_from_probs_graph(g, probs, centres)?;
        let (h, w) = self.config.output_size();
        let d3 = g.reshape(depth_low, vec![1, h, w])?;
        let up = g.resize_bilinear(d3, self.config.height, self.config.width)?;
        let depth = g.reshape(up, vec![self.config.height, self.config.width])?;
        Ok(GraphTrace {
            image: img,
            encoder,
            dgr,
            decoder,
            er_alpha,
            widths,
            centres,
            probs,
            depth_low,
            depth,
        })
    }

    pub fn forward_with(&self, image: &Tensor, opts: ForwardOptions) -> Result<ForwardTrace> {
        let mut g = Graph::new();
        let t = self.forward_graph(&mut g, &self.params, image, opts)?;
        let all = |vs: &[Var]| vs.iter().map(|&v| g.tensor(v)).collect::<Vec<_>>();
        let bins = BinPartition {
            d_min: self.config.d_min,
            d_max: self.config.d_max,
            widths: g.value(t.widths).to_vec(),
            centres: g.value(t.centres).to_vec(),
        };
        Ok(ForwardTrace {
            encoder: all(&t.encoder),
            dgr: all(&t.dgr),
            decoder: all(&t.decoder),
            er_alpha: all(&t.er_alpha),
            bins,
            probs: g.tensor(t.probs),
            depth_low: g.tensor(t.depth_low),
            depth: g.tensor(t.depth),
        })
    }

    pub fn forward(&self, image: &Tensor) -> Result<ForwardTrace> {
        self.forward_with(image, ForwardOptions::default())
    }

    /// Full-resolution depth maps for several images.
    pub fn predict_batch(&self, images: &[&Tensor], exec: Execution) -> Result<Vec<Tensor>> {
        par::map_indexed(exec, images, |_, img| Ok(self.forward(img)?.depth)).into_iter().collect()
    }

    /// SILog loss node of one sample.
    pub fn loss_graph(&self, g: &mut Graph, store: &ParamStore, sample: &SceneSample, lp: &LossParams) -> Result<Var> {
        let t = self.forward_graph(g, store, &sample.image, ForwardOptions::default())?;
        silog_loss_graph(g, t.depth, sample.depth.data(), &sample.mask, lp)
    }

    /// Loss and parameter gradients of one sample.
    pub fn sample_gradients(&self, sample: &SceneSample, lp: &LossParams) -> Result<(f64, ParamGrads)> {
        let mut g = Graph::new();
        let loss = self.loss_graph(&mut g, &self.params, sample, lp)?;
        let grads = g.backward(loss)?;
        Ok((g.scalar(loss), g.param_grads(&grads, self.params.len())))
    }

    /// Mean loss and mean gradients over the samples with a nonempty mask.
    /// Per-sample results are reduced in batch order, so the outcome does not
    /// depend on `exec`.
    pub fn batch_gradients(&self, batch: &[&SceneSample], lp: &LossParams, exec: Execution) -> Result<(f64, ParamGrads)> {
        let usable: Vec<&SceneSample> = batch.iter().copied().filter(|s| s.mask.iter().any(|&m| m)).collect();
        if usable.is_empty() {
            return Err(Error::InvalidInput("every sample in the batch has an empty mask".into()));
        }
        let per = par::map_indexed(exec, &usable, |_, s| self.sample_gradients(s, lp));
        let mut total = 0.0;
        let mut grads = ParamGrads::default();
        for r in per {
            let (l, gr) = r?;
            total += l;
            grads.add_assign(&gr);
        }
        let n = usable.len() as f64;
        for g in grads.0.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v /= n);
        }
        Ok((total / n, grads))
    }

    /// One Adam step on the batch; returns the batch loss before the update.
    pub fn train_step(&mut self, adam: &mut Adam, batch: &[&SceneSample], lr: f64, lp: &LossParams, exec: Execution) -> Result<f64> {
        let (loss, grads) = self.batch_gradients(batch, lp, exec)?;
        self.params.zero_grads();
        self.params.accumulate(&grads, 1.0);
        adam.step(&mut self.params, lr);
        Ok(loss)
    }

    /// Central-difference check of every parameter's gradient of the
    /// sample's SILog loss.
    pub fn gradient_check(&mut self, sample: &SceneSample, lp: &LossParams, opts: &GradCheckOptions) -> Result<GradCheckReport> {
        let mut store = std::mem::take(&mut self.params);
        let report = finite_diff_check(&mut store, |g, s| self.loss_graph(g, s, sample, lp), opts);
        self.params = store;
        report
    }

    /// Test hook: mirror every convolution kernel left-right (averaging the
    /// two halves) so the whole network commutes with horizontal flips.
    pub fn symmetrize_kernels(&mut self) {
        let ids: Vec<_> = self.params.ids().filter(|&id| self.params.get(id).rank() == 4).collect();
        for id in ids {
            let t = self.params.get_mut(id);
            let kw = t.shape()[3];
            for row in t.data_mut().chunks_exact_mut(kw) {
                for x in 0..kw / 2 {
                    let m = 0.5 * (row[x] + row[kw - 1 - x]);
                    row[x] = m;
                    row[kw - 1 - x] = m;
                }
            }
        }
    }

    /// Test hook: every parameter tensor set to one constant.
    pub fn set_constant_params(&mut self, value: f64) {
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            self.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = value);
        }
    }
}

/// Agreement between the lifting map applied per pixel and the model's
/// probability-weighted depth.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftingReport {
    pub pixels: usize,
    /// Largest `|g(sum_k p_k u_k) - sum_k p_k bin_k|` (direct summation).
    pub max_linearity_error: f64,
    /// Largest difference between `g(...)` and the traced low-resolution depth.
    pub max_depth_error: f64,
}

impl LiftingReport {
    pub fn passed(&self) -> bool {
        self.max_linearity_error < LIFTING_TOL && self.max_depth_error < LIFTING_TOL
    }
}

pub fn lifting_consistency(trace: &ForwardTrace) -> LiftingReport {
    let map = LiftingMap::new(trace.bins.centres.clone());
    let k = map.bins();
    let p = trace.depth_low.len();
    let probs = trace.probs.data();
    let mut report = LiftingReport {
        pixels: p,
        max_linearity_error: 0.0,
        max_depth_error: 0.0,
    };
    for i in 0..p {
        let alpha: Vec<f64> = (0..k).map(|kk| probs[kk * p + i]).collect();
        let lifted = map.apply(&map.synthesize(&alpha));
        let mut direct = 0.0;
        for (a, b) in alpha.iter().zip(map.centres()) {
            direct += a * b;
        }
        report.max_linearity_error = report.max_linearity_error.max((lifted - direct).abs());
        report.max_depth_error = report.max_depth_error.max((lifted - trace.depth_low.data()[i]).abs());
    }
    report
}

/// Linear decay from `start` at step 0 to `end` at the last step.
pub fn linear_lr(start: f64, end: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return start;
    }
    let t = step as f64 / (total - 1) as f64;
    start * (1.0 - t) + end * t
}

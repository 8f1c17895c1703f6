//! Depth-oriented frame subspace and the lifting of encoder features into it.
//!
//! A [`FrameSubspace`] holds `n = r * c` learned vectors in `R^c`, split into
//! `r` groups of `c`. [`SfDgr`] predicts per-pixel coefficients against each
//! group, synthesizes `sum_i alpha_ij e_ij`, harmonizes the groups with a
//! per-group norm and 1x1 fusion, and adds a transformed skip of the input.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::numcore::{Conv2d, Graph, GroupNorm, Linear, Mlp, ParamId, ParamStore, Var};

/// Singular values below this count as rank loss within a frame group.
pub const RANK_TOL: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct FrameSubspace {
    pub vectors: ParamId,
    count: usize,
    dim: usize,
}

impl FrameSubspace {
    /// Registers `n` seeded embedding vectors of dimension `c` under `name`.
    pub fn construct(store: &mut ParamStore, name: &str, n: usize, c: usize) -> Result<Self> {
        if c == 0 || n == 0 || n % c != 0 {
            return Err(Error::Config(format!("frame: dimension {c} must divide vector count {n}")));
        }
        let vectors = store.uniform(name, vec![n, c], c)?;
        let fs = Self { vectors, count: n, dim: c };
        for j in 0..fs.groups() {
            let rank = group_rank(fs.group(store, j), c);
            if rank < c {
                return Err(Error::Config(format!("frame group {j} has rank {rank} < {c}")));
            }
        }
        Ok(fs)
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Redundancy `r = n / c`.
    pub fn groups(&self) -> usize {
        self.count / self.dim
    }

    /// All vectors, row-major `n x c`.
    pub fn matrix<'a>(&self, store: &'a ParamStore) -> &'a [f64] {
        store.get(self.vectors).data()
    }

    /// Vectors of group `j`, row-major `c x c` (one vector per row).
    pub fn group<'a>(&self, store: &'a ParamStore, j: usize) -> &'a [f64] {
        let c = self.dim;
        &self.matrix(store)[j * c * c..(j + 1) * c * c]
    }

    /// Test hook: every group becomes the standard basis of `R^c`.
    pub fn set_orthonormal(&self, store: &mut ParamStore) {
        let c = self.dim;
        let data = store.get_mut(self.vectors).data_mut();
        for (k, row) in data.chunks_mut(c).enumerate() {
            row.iter_mut().enumerate().for_each(|(d, v)| *v = if d == k % c { 1.0 } else { 0.0 });
        }
    }

    pub fn bounds(&self, store: &ParamStore) -> (f64, f64) {
        frame_bounds(self.matrix(store), self.dim)
    }
}

/// Extreme eigenvalues `(A, B)` of the frame operator `S = sum_k e_k e_k^T`
/// for row-major vectors of dimension `dim`.
pub fn frame_bounds(vectors: &[f64], dim: usize) -> (f64, f64) {
    assert!(dim > 0 && vectors.len() % dim == 0, "frame_bounds: ragged vectors");
    let mut s = DMatrix::<f64>::zeros(dim, dim);
    for e in vectors.chunks(dim) {
        for a in 0..dim {
            for b in 0..dim {
                s[(a, b)] += e[a] * e[b];
            }
        }
    }
    let eig = SymmetricEigen::new(s);
    let lo = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // eigen-solver noise can leave a rank-deficient operator slightly negative
    (lo.max(0.0), hi)
}

/// Numerical rank of row-major vectors of dimension `dim`.
pub fn group_rank(vectors: &[f64], dim: usize) -> usize {
    let rows = vectors.len() / dim;
    let m = DMatrix::from_row_slice(rows, dim, vectors);
    m.singular_values().iter().filter(|&&s| s > RANK_TOL).count()
}

/// The map `g` from coefficient space to depth: `g(z) = sum_k z_k * bin_k`.
///
/// Each bin owns one direction of the lifted space; `g` sends that direction
/// to the bin centre, so a coefficient vector synthesized from those
/// directions maps to the same weighted sum of centres.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftingMap {
    centres: Vec<f64>,
}

impl LiftingMap {
    pub fn new(centres: Vec<f64>) -> Self {
        Self { centres }
    }

    pub fn bins(&self) -> usize {
        self.centres.len()
    }

    pub fn centres(&self) -> &[f64] {
        &self.centres
    }

    /// `sum_k alpha_k u_k` where `u_k` is the direction paired with bin `k`.
    pub fn synthesize(&self, alpha: &[f64]) -> Vec<f64> {
        assert_eq!(alpha.len(), self.bins(), "one coefficient per bin");
        let mut z = vec![0.0; self.bins()];
        for (k, a) in alpha.iter().enumerate() {
            let mut u = vec![0.0; self.bins()];
            u[k] = 1.0;
            z.iter_mut().zip(&u).for_each(|(zi, ui)| *zi += a * ui);
        }
        z
    }

    pub fn apply(&self, z: &[f64]) -> f64 {
        assert_eq!(z.len(), self.bins(), "vector lives in the lifted space");
        z.iter().zip(&self.centres).map(|(a, b)| a * b).sum()
    }
}

/// Replace learned submodules of [`SfDgr`] by identities (test surface).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SfDgrOverrides {
    pub identity_sf: bool,
    pub identity_dgr: bool,
    pub identity_norm: bool,
    pub identity_fuse: bool,
    pub identity_ffn: bool,
    pub identity_skip: bool,
}

/// Spatial-feature to DGR transform for one decoder scale.
#[derive(Clone, Debug)]
pub struct SfDgr {
    pub in_channels: usize,
    pub out_channels: usize,
    pub dim: usize,
    pub groups: usize,
    /// `f^SF_j`: per-pixel `in -> c -> c`.
    pub sf: Vec<Mlp>,
    /// `f^DGR_j`: per-vector `c -> c -> c`.
    pub dgr: Vec<Mlp>,
    pub norm: Vec<GroupNorm>,
    pub fuse: Vec<Linear>,
    /// `f_c`: `out -> 2 out -> out`.
    pub ffn: Mlp,
    /// `f_p`: 1x1 projection of the input.
    pub skip: Linear,
    pub overrides: SfDgrOverrides,
}

/// Intermediate values of one [`SfDgr::forward`].
#[derive(Clone, Debug)]
pub struct SfDgrOutput {
    /// Per group, `[c, H, W]` coefficients (row `i` is `alpha_{i,j}`).
    pub coefficients: Vec<Var>,
    /// Per group, `sum_i alpha_ij e_ij` as `[c, H, W]`.
    pub representations: Vec<Var>,
    pub output: Var,
}

impl SfDgr {
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, out_channels: usize, frame: &FrameSubspace) -> Result<Self> {
        let (c, r) = (frame.dim(), frame.groups());
        let mut sf = Vec::with_capacity(r);
        let mut dgr = Vec::with_capacity(r);
        let mut norm = Vec::with_capacity(r);
        let mut fuse = Vec::with_capacity(r);
        for j in 0..r {
            sf.push(Mlp::new(store, &format!("{name}.sf{j}"), &[in_channels, c, c])?);
            dgr.push(Mlp::new(store, &format!("{name}.dgr{j}"), &[c, c, c])?);
            norm.push(GroupNorm::new(store, &format!("{name}.norm{j}"), c, 1)?);
            fuse.push(Linear::new(store, &format!("{name}.fuse{j}"), c, out_channels)?);
        }
        let ffn = Mlp::new(store, &format!("{name}.ffn"), &[out_channels, 2 * out_channels, out_channels])?;
        let skip = Linear::new(store, &format!("{name}.skip"), in_channels, out_channels)?;
        Ok(Self {
            in_channels,
            out_channels,
            dim: c,
            groups: r,
            sf,
            dgr,
            norm,
            fuse,
            ffn,
            skip,
            overrides: SfDgrOverrides::default(),
        })
    }

    pub fn num_params(&self) -> usize {
        self.sf.iter().map(Mlp::num_params).sum::<usize>()
            + self.dgr.iter().map(Mlp::num_params).sum::<usize>()
            + self.norm.iter().map(GroupNorm::num_params).sum::<usize>()
            + self.fuse.iter().map(Linear::num_params).sum::<usize>()
            + self.ffn.num_params()
            + self.skip.num_params()
    }

    fn check_input(&self, g: &Graph, fp: Var, frame: &FrameSubspace) -> Result<(usize, usize)> {
        let s = g.shape(fp);
        if s.len() != 3 || s[0] != self.in_channels {
            return Err(Error::shape("sf_dgr", format!("expected [{}, H, W] features, got {s:?}", self.in_channels)));
        }
        if frame.dim() != self.dim || frame.groups() != self.groups {
            return Err(Error::shape("sf_dgr", "frame layout differs from the transform's"));
        }
        let o = &self.overrides;
        if (o.identity_sf && self.in_channels != self.dim)
            || (o.identity_fuse && self.dim != self.out_channels)
            || (o.identity_skip && self.in_channels != self.out_channels)
        {
            return Err(Error::shape("sf_dgr", "identity override needs matching widths"));
        }
        Ok((s[1], s[2]))
    }

    /// Per-group coefficients `alpha_ij = <f^SF_j(F_p), f^DGR_j(e_ij)>`.
    pub fn coefficients(&self, g: &mut Graph, store: &ParamStore, frame: &FrameSubspace, fp: Var) -> Result<Vec<Var>> {
        let (h, w) = self.check_input(g, fp, frame)?;
        let c = self.dim;
        let e = g.param(store, frame.vectors);
        let fp2 = g.reshape(fp, vec![self.in_channels, h * w])?;
        let mut out = Vec::with_capacity(self.groups);
        for j in 0..self.groups {
            let s = if self.overrides.identity_sf { fp2 } else { self.sf[j].forward(g, store, fp2)? };
            let ej = g.slice_rows(e, j * c, (j + 1) * c)?;
            // columns of ej_t are the group's vectors
            let ej_t = g.transpose(ej)?;
            let v = if self.overrides.identity_dgr { ej_t } else { self.dgr[j].forward(g, store, ej_t)? };
            let alpha = g.matmul_t(v, s, true, false)?;
            out.push(g.reshape(alpha, vec![c, h, w])?);
        }
        Ok(out)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, frame: &FrameSubspace, fp: Var) -> Result<SfDgrOutput> {
        let (h, w) = self.check_input(g, fp, frame)?;
        let c = self.dim;
        let coefficients = self.coefficients(g, store, frame, fp)?;
        let e = g.param(store, frame.vectors);
        let mut representations = Vec::with_capacity(self.groups);
        let mut fused: Option<Var> = None;
        for (j, alpha) in coefficients.iter().enumerate() {
            let ej = g.slice_rows(e, j * c, (j + 1) * c)?;
            let a2 = g.reshape(*alpha, vec![c, h * w])?;
            let rep = g.matmul_t(ej, a2, true, false)?;
            let rep = g.reshape(rep, vec![c, h, w])?;
            representations.push(rep);
            let normed = if self.overrides.identity_norm { rep } else { self.norm[j].forward(g, store, rep)? };
            let f = if self.overrides.identity_fuse { normed } else { self.fuse[j].forward(g, store, normed)? };
            fused = Some(match fused {
                None => f,
                Some(acc) => g.add(acc, f)?,
            });
        }
        let fused = fused.ok_or_else(|| Error::Config("frame has no groups".into()))?;
        let y = if self.overrides.identity_ffn { fused } else { self.ffn.forward(g, store, fused)? };
        let skip = if self.overrides.identity_skip { fp } else { self.skip.forward(g, store, fp)? };
        let output = g.add(y, skip)?;
        Ok(SfDgrOutput {
            coefficients,
            representations,
            output,
        })
    }
}

/// Coefficients of every group stacked as `[r, c, H, W]`.
pub fn dgr_coefficients(g: &mut Graph, store: &ParamStore, t: &SfDgr, frame: &FrameSubspace, fp: Var) -> Result<Var> {
    let per_group = t.coefficients(g, store, frame, fp)?;
    let s = g.shape(per_group[0]).to_vec();
    let stacked = g.concat(&per_group)?;
    g.reshape(stacked, vec![t.groups, s[0], s[1], s[2]])
}

pub fn sf_dgr_transform(g: &mut Graph, store: &ParamStore, t: &SfDgr, frame: &FrameSubspace, fp: Var) -> Result<Var> {
    Ok(t.forward(g, store, frame, fp)?.output)
}

/// Residual ranges of the slope and intercept coefficients.
pub const DYRELU_SLOPE_RANGE: f64 = 1.0;
pub const DYRELU_BIAS_RANGE: f64 = 0.5;

/// Channelwise dynamic ReLU. Per-channel `(a1, b1, a2, b2)` come from the
/// pooled input through a two-layer MLP whose last layer starts at zero, so
/// the activation begins as a plain ReLU.
#[derive(Clone, Debug)]
pub struct DyRelu {
    pub channels: usize,
    pub mlp: Mlp,
}

impl DyRelu {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let hidden = (channels / 4).max(2);
        let mlp = Mlp::zero_last(store, name, &[channels, hidden, 4 * channels])?;
        Ok(Self { channels, mlp })
    }

    pub fn num_params(&self) -> usize {
        self.mlp.num_params()
    }

    /// `(1, 0, 0, 0) + range * tanh(mlp(gap(x)))`, laid out `[a1 | b1 | a2 | b2]`,
    /// with range 1 for slopes and 1/2 for intercepts.
    pub fn coefficients(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let pooled = g.global_avg_pool(x)?;
        let raw = self.mlp.forward(g, store, pooled)?;
        let bounded = g.tanh(raw);
        let c = self.channels;
        let mut base = vec![0.0; 4 * c];
        base[..c].iter_mut().for_each(|v| *v = 1.0);
        let range = (0..4 * c)
            .map(|i| if (i / c) % 2 == 0 { DYRELU_SLOPE_RANGE } else { DYRELU_BIAS_RANGE })
            .collect();
        let range = g.constant_from(vec![4 * c], range)?;
        let delta = g.mul(range, bounded)?;
        let base = g.constant_from(vec![4 * c], base)?;
        g.add(base, delta)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let k = self.coefficients(g, store, x)?;
        g.dyrelu(x, k)
    }
}

/// `DF^l = ConvDyRelu(ConvDyRelu(cat(up(DF^{l-1}), DGR^l)))`.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub conv1: Conv2d,
    pub act1: DyRelu,
    pub conv2: Conv2d,
    pub act2: DyRelu,
    pub prev_channels: usize,
    pub skip_channels: usize,
    pub out_channels: usize,
}

impl DecoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, prev_channels: usize, skip_channels: usize, out_channels: usize) -> Result<Self> {
        let cin = prev_channels + skip_channels;
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, out_channels, 3, 1)?,
            act1: DyRelu::new(store, &format!("{name}.act1"), out_channels)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), out_channels, out_channels, 3, 1)?,
            act2: DyRelu::new(store, &format!("{name}.act2"), out_channels)?,
            prev_channels,
            skip_channels,
            out_channels,
        })
    }

    pub fn num_params(&self) -> usize {
        self.conv1.num_params() + self.act1.num_params() + self.conv2.num_params() + self.act2.num_params()
    }

    /// `df_prev` is upsampled x2 and must then match the spatial size of `dgr`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, df_prev: Var, dgr: Var) -> Result<Var> {
        let up = g.upsample2x(df_prev)?;
        let (su, sd) = (g.shape(up).to_vec(), g.shape(dgr).to_vec());
        if su.len() != 3 || sd.len() != 3 || su[1..] != sd[1..] {
            return Err(Error::shape("decoder_block", format!("upsampled {su:?} vs skip {sd:?}")));
        }
        self.forward_aligned(g, store, up, dgr)
    }

    /// Same as [`DecoderBlock::forward`] for inputs already at equal size.
    pub fn forward_aligned(&self, g: &mut Graph, store: &ParamStore, df: Var, dgr: Var) -> Result<Var> {
        let x = g.concat(&[df, dgr])?;
        let x = self.conv1.forward(g, store, x)?;
        let x = self.act1.forward(g, store, x)?;
        let x = self.conv2.forward(g, store, x)?;
        self.act2.forward(g, store, x)
    }
}

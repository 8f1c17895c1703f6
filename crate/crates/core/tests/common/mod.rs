//! Straight-line reference implementations over flat `[C, H, W]` buffers.
#![allow(dead_code)]

pub mod checks;

use liftdepth::numcore::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Overwrites every parameter with uniform noise in `(-scale, scale)`.
pub fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = r.gen_range(-scale..scale);
        }
    }
}

pub fn param(store: &ParamStore, name: &str) -> Vec<f64> {
    store.by_name(name).unwrap_or_else(|| panic!("missing parameter {name}")).data().to_vec()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[derive(Clone, Debug)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Map {
    pub fn new(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w);
        Self { c, h, w, data }
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self::new(c, h, w, vec![0.0; c * h * w])
    }

    pub fn at(&self, ch: usize, y: usize, x: usize) -> f64 {
        self.data[(ch * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, ch: usize, y: usize, x: usize, v: f64) {
        self.data[(ch * self.h + y) * self.w + x] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.c).map(|ch| self.at(ch, y, x)).collect()
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, v: &[f64]) {
        for (ch, val) in v.iter().enumerate() {
            self.set(ch, y, x, *val);
        }
    }

    /// Applies `f` to every pixel vector.
    pub fn map_pixels(&self, out_c: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Map {
        let mut out = Map::zeros(out_c, self.h, self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                out.set_pixel(y, x, &f(&self.pixel(y, x)));
            }
        }
        out
    }

    pub fn concat(&self, other: &Map) -> Map {
        assert_eq!((self.h, self.w), (other.h, other.w));
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Map::new(self.c + other.c, self.h, self.w, data)
    }

    pub fn add(&self, other: &Map) -> Map {
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Map::new(self.c, self.h, self.w, data)
    }

    pub fn relu(&self) -> Map {
        Map::new(self.c, self.h, self.w, self.data.iter().map(|v| v.max(0.0)).collect())
    }
}

/// `W x + b` for a row-major `[out, in]` weight.
pub fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let (o, i) = (b.len(), x.len());
    assert_eq!(w.len(), o * i);
    (0..o).map(|r| b[r] + (0..i).map(|k| w[r * i + k] * x[k]).sum::<f64>()).collect()
}

pub fn linear(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    affine(&param(store, &format!("{name}.weight")), &param(store, &format!("{name}.bias")), x)
}

/// ReLU between layers, none after the last.
pub fn mlp(store: &ParamStore, name: &str, layers: usize, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for i in 0..layers {
        h = linear(store, &format!("{name}.{i}"), &h);
        if i + 1 < layers {
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    h
}

/// Zero-padded 3x3 cross-correlation, stride 1, with bias.
pub fn conv3x3(store: &ParamStore, name: &str, x: &Map) -> Map {
    let w = param(store, &format!("{name}.weight"));
    let b = param(store, &format!("{name}.bias"));
    let cout = b.len();
    let mut out = Map::zeros(cout, x.h, x.w);
    for o in 0..cout {
        for y in 0..x.h {
            for xx in 0..x.w {
                let mut acc = b[o];
                for ci in 0..x.c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = y as isize + ky as isize - 1;
                            let ix = xx as isize + kx as isize - 1;
                            if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                continue;
                            }
                            acc += w[((o * x.c + ci) * 3 + ky) * 3 + kx] * x.at(ci, iy as usize, ix as usize);
                        }
                    }
                }
                out.set(o, y, xx, acc);
            }
        }
    }
    out
}

/// Group statistics over consecutive channels, population variance, eps 1e-5.
pub fn group_norm(x: &Map, groups: usize, gamma: &[f64], beta: &[f64]) -> Map {
    let per = x.c / groups;
    let mut out = x.clone();
    for gi in 0..groups {
        let mut vals = Vec::new();
        for ch in gi * per..(gi + 1) * per {
            for y in 0..x.h {
                for xx in 0..x.w {
                    vals.push(x.at(ch, y, xx));
                }
            }
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        for ch in gi * per..(gi + 1) * per {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let v = (x.at(ch, y, xx) - mean) / (var + 1e-5).sqrt();
                    out.set(ch, y, xx, gamma[ch] * v + beta[ch]);
                }
            }
        }
    }
    out
}

fn source_coord(o: usize, input: usize, output: usize) -> (usize, usize, f64) {
    let s = (o as f64 + 0.5) * input as f64 / output as f64 - 0.5;
    let s = s.clamp(0.0, (input - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(input - 1);
    (i0, i1, s - i0 as f64)
}

/// Half-pixel-centred bilinear resize with edge clamping.
pub fn resize(x: &Map, oh: usize, ow: usize) -> Map {
    let mut out = Map::zeros(x.c, oh, ow);
    for ch in 0..x.c {
        for oy in 0..oh {
            let (y0, y1, ty) = source_coord(oy, x.h, oh);
            for ox in 0..ow {
                let (x0, x1, tx) = source_coord(ox, x.w, ow);
                let v = (1.0 - ty) * (1.0 - tx) * x.at(ch, y0, x0)
                    + (1.0 - ty) * tx * x.at(ch, y0, x1)
                    + ty * (1.0 - tx) * x.at(ch, y1, x0)
                    + ty * tx * x.at(ch, y1, x1);
                out.set(ch, oy, ox, v);
            }
        }
    }
    out
}

/// Adaptive average pooling with windows `[floor(i n / g), ceil((i + 1) n / g))`.
pub fn avg_pool(x: &Map, grid: usize) -> Map {
    let gh = grid.min(x.h);
    let gw = grid.min(x.w);
    let window = |i: usize, n: usize, g: usize| {
        let lo = (i as f64 * n as f64 / g as f64).floor() as usize;
        let hi = ((i + 1) as f64 * n as f64 / g as f64).ceil() as usize;
        (lo, hi)
    };
    let mut out = Map::zeros(x.c, gh, gw);
    for ch in 0..x.c {
        for by in 0..gh {
            let (y0, y1) = window(by, x.h, gh);
            for bx in 0..gw {
                let (x0, x1) = window(bx, x.w, gw);
                let mut acc = 0.0;
                let mut n = 0.0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        acc += x.at(ch, y, xx);
                        n += 1.0;
                    }
                }
                out.set(ch, by, bx, acc / n);
            }
        }
    }
    out
}

pub fn channel_means(x: &Map) -> Vec<f64> {
    (0..x.c)
        .map(|ch| x.data[ch * x.h * x.w..(ch + 1) * x.h * x.w].iter().sum::<f64>() / (x.h * x.w) as f64)
        .collect()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// `max(a1 x + b1, a2 x + b2)` with coefficients from the pooled input.
pub fn dyrelu(store: &ParamStore, name: &str, x: &Map) -> Map {
    let raw = mlp(store, name, 2, &channel_means(x));
    let c = x.c;
    let coeff = |slot: usize, ch: usize| {
        let base = if slot == 0 { 1.0 } else { 0.0 };
        let range = if slot % 2 == 0 { 1.0 } else { 0.5 };
        base + range * raw[slot * c + ch].tanh()
    };
    let mut out = x.clone();
    for ch in 0..c {
        let (a1, b1, a2, b2) = (coeff(0, ch), coeff(1, ch), coeff(2, ch), coeff(3, ch));
        for y in 0..x.h {
            for xx in 0..x.w {
                let v = x.at(ch, y, xx);
                out.set(ch, y, xx, (a1 * v + b1).max(a2 * v + b2));
            }
        }
    }
    out
}

/// Coefficients of group `j` at one pixel: `<f_dgr(e_i), f_sf(p)>` for each vector `e_i` of the group.
pub fn dgr_alpha(store: &ParamStore, name: &str, frame: &[f64], c: usize, j: usize, pixel: &[f64]) -> Vec<f64> {
    let s = mlp(store, &format!("{name}.sf{j}"), 2, pixel);
    (0..c)
        .map(|i| {
            let e = &frame[(j * c + i) * c..(j * c + i + 1) * c];
            let v = mlp(store, &format!("{name}.dgr{j}"), 2, e);
            v.iter().zip(&s).map(|(a, b)| a * b).sum()
        })
        .collect()
}

pub fn sf_dgr(store: &ParamStore, name: &str, frame_name: &str, c: usize, fp: &Map) -> Map {
    let frame = param(store, frame_name);
    let groups = frame.len() / (c * c);
    let out_c = param(store, &format!("{name}.skip.bias")).len();
    let mut fused = Map::zeros(out_c, fp.h, fp.w);
    for j in 0..groups {
        let rep = fp.map_pixels(c, |p| {
            let alpha = dgr_alpha(store, name, &frame, c, j, p);
            let mut r = vec![0.0; c];
            for (i, a) in alpha.iter().enumerate() {
                for d in 0..c {
                    r[d] += a * frame[(j * c + i) * c + d];
                }
            }
            r
        });
        let normed = group_norm(
            &rep,
            1,
            &param(store, &format!("{name}.norm{j}.gamma")),
            &param(store, &format!("{name}.norm{j}.beta")),
        );
        let f = normed.map_pixels(out_c, |p| linear(store, &format!("{name}.fuse{j}"), p));
        fused = fused.add(&f);
    }
    let y = fused.map_pixels(out_c, |p| mlp(store, &format!("{name}.ffn"), 2, p));
    let skip = fp.map_pixels(out_c, |p| linear(store, &format!("{name}.skip"), p));
    y.add(&skip)
}

pub fn decoder_block(store: &ParamStore, name: &str, df_prev: &Map, dgr: &Map) -> Map {
    let up = resize(df_prev, df_prev.h * 2, df_prev.w * 2);
    let x = up.concat(dgr);
    let x = conv3x3(store, &format!("{name}.conv1"), &x);
    let x = dyrelu(store, &format!("{name}.act1"), &x);
    let x = conv3x3(store, &format!("{name}.conv2"), &x);
    dyrelu(store, &format!("{name}.act2"), &x)
}

/// Returns `(alpha_edge, F_e, F_dec + F_e)`.
pub fn er(store: &ParamStore, name: &str, fdec: &Map) -> (Vec<f64>, Map, Map) {
    let h = conv3x3(store, &format!("{name}.ecn.conv0"), fdec).relu();
    let h = conv3x3(store, &format!("{name}.ecn.conv1"), &h).relu();
    let logits = conv3x3(store, &format!("{name}.ecn.conv2"), &h);
    let e1 = param(store, &format!("{name}.edge"));
    let e2 = param(store, &format!("{name}.non_edge"));
    let mut alpha = Vec::with_capacity(fdec.h * fdec.w);
    let mut fe = Map::zeros(fdec.c, fdec.h, fdec.w);
    for y in 0..fdec.h {
        for x in 0..fdec.w {
            let p = softmax(&logits.pixel(y, x));
            let a1: f64 = p[..p.len() / 2].iter().sum();
            alpha.push(a1);
            let v: Vec<f64> = e1.iter().zip(&e2).map(|(u, w)| a1 * u + (1.0 - a1) * w).collect();
            fe.set_pixel(y, x, &v);
        }
    }
    let fused = fdec.add(&fe);
    (alpha, fe, fused)
}

pub fn pqi(store: &ParamStore, name: &str, x: &Map) -> Map {
    let mut cat = x.clone();
    for grid in [1, 2, 3, 6] {
        let pooled = avg_pool(x, grid);
        let bw = param(store, &format!("{name}.pool{grid}.bias")).len();
        let p = pooled.map_pixels(bw, |v| linear(store, &format!("{name}.pool{grid}"), v));
        cat = cat.concat(&resize(&p, x.h, x.w));
    }
    let out = param(store, &format!("{name}.fuse.bias")).len();
    cat.map_pixels(out, |v| linear(store, &format!("{name}.fuse"), v))
}

/// Bin widths from the pooled map.
pub fn bcp(store: &ParamStore, name: &str, x: &Map) -> Vec<f64> {
    softmax(&mlp(store, name, 2, &channel_means(x)))
}

pub fn bin_centres(widths: &[f64], d_min: f64, d_max: f64) -> Vec<f64> {
    (0..widths.len())
        .map(|k| {
            let before: f64 = widths[..k].iter().sum();
            d_min + (d_max - d_min) * (widths[k] / 2.0 + before)
        })
        .collect()
}

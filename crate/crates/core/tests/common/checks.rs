//! Module-versus-reference comparisons over seeded random configurations,
//! each returning the largest absolute deviation found.

use liftdepth::binhead::{pqi_global_feature, PixelQueryInit};
use liftdepth::dgr::{dgr_coefficients, sf_dgr_transform, DecoderBlock, FrameSubspace, SfDgr};
use liftdepth::er::{er_coefficients, er_transform, ErLifting};
use liftdepth::numcore::{Graph, ParamStore, Tensor, Var};
use rand::Rng;

use super::*;

pub fn input(g: &mut Graph, m: &Map) -> Var {
    g.constant(&Tensor::new(vec![m.c, m.h, m.w], m.data.clone()).unwrap())
}

pub fn random_map(seed: u64, c: usize, h: usize, w: usize) -> Map {
    Map::new(c, h, w, random_vec(&mut rng(seed), c * h * w, 1.0))
}

/// Transform output and per-group coefficients against the reference.
pub fn sf_dgr_error(configs: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for cfg in 0..configs {
        let mut r = rng(cfg);
        let c = [2, 3, 4][r.gen_range(0..3)];
        let groups = r.gen_range(1..4);
        let cin = r.gen_range(1..6);
        let cout = r.gen_range(1..6);
        let (h, w) = (r.gen_range(1..5), r.gen_range(1..5));
        let mut store = ParamStore::new(cfg);
        let frame = FrameSubspace::construct(&mut store, "frame", groups * c, c).unwrap();
        let t = SfDgr::new(&mut store, "t", cin, cout, &frame).unwrap();
        randomize(&mut store, 100 + cfg, 0.8);
        let fp = random_map(200 + cfg, cin, h, w);

        let mut g = Graph::new();
        let x = input(&mut g, &fp);
        let y = sf_dgr_transform(&mut g, &store, &t, &frame, x).unwrap();
        assert_eq!(g.shape(y), &[cout, h, w]);
        let expect = sf_dgr(&store, "t", "frame", c, &fp);
        worst = worst.max(max_abs_diff(g.value(y), &expect.data));

        let coeffs = dgr_coefficients(&mut g, &store, &t, &frame, x).unwrap();
        assert_eq!(g.shape(coeffs), &[groups, c, h, w]);
        let fv = param(&store, "frame");
        let got = g.value(coeffs);
        for j in 0..groups {
            for y in 0..h {
                for xx in 0..w {
                    let a = dgr_alpha(&store, "t", &fv, c, j, &fp.pixel(y, xx));
                    for (i, ai) in a.iter().enumerate() {
                        worst = worst.max((got[((j * c + i) * h + y) * w + xx] - ai).abs());
                    }
                }
            }
        }
    }
    worst
}

pub fn decoder_block_error(configs: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for cfg in 0..configs {
        let mut r = rng(1000 + cfg);
        let (cp, cs, co) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
        let (h, w) = (r.gen_range(1..4), r.gen_range(1..4));
        let mut store = ParamStore::new(cfg);
        let block = DecoderBlock::new(&mut store, "b", cp, cs, co).unwrap();
        randomize(&mut store, 1100 + cfg, 0.7);
        let prev = random_map(1200 + cfg, cp, h, w);
        let skip = random_map(1300 + cfg, cs, 2 * h, 2 * w);

        let mut g = Graph::new();
        let a = input(&mut g, &prev);
        let b = input(&mut g, &skip);
        let y = block.forward(&mut g, &store, a, b).unwrap();
        let expect = decoder_block(&store, "b", &prev, &skip);
        worst = worst.max(max_abs_diff(g.value(y), &expect.data));
    }
    worst
}

/// Coefficients, edge feature and fused output, via the free functions and
/// via the module.
pub fn er_error(configs: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for cfg in 0..configs {
        let mut r = rng(2000 + cfg);
        let c = 2 * r.gen_range(1..4);
        let (h, w) = (r.gen_range(1..5), r.gen_range(1..5));
        let mut store = ParamStore::new(cfg);
        let er = ErLifting::new(&mut store, "er", c).unwrap();
        randomize(&mut store, 2100 + cfg, 1.0);
        let fdec = random_map(2200 + cfg, c, h, w);

        let mut g = Graph::new();
        let x = input(&mut g, &fdec);
        let coeffs = er_coefficients(&mut g, &store, &er.ecn, x).unwrap();
        let (fe, fused) = er_transform(&mut g, &store, &er.subspace, coeffs, x).unwrap();
        let (alpha, fe_ref, fused_ref) = super::er(&store, "er", &fdec);
        let a2: Vec<f64> = alpha.iter().map(|a| 1.0 - a).collect();
        worst = worst
            .max(max_abs_diff(g.value(coeffs.alpha_edge), &alpha))
            .max(max_abs_diff(g.value(coeffs.alpha_non_edge), &a2))
            .max(max_abs_diff(g.value(fe), &fe_ref.data))
            .max(max_abs_diff(g.value(fused), &fused_ref.data));

        let mut g2 = Graph::new();
        let x2 = input(&mut g2, &fdec);
        let (_, lifted) = er.forward(&mut g2, &store, x2).unwrap();
        worst = worst.max(max_abs_diff(g2.value(lifted), &fused_ref.data));
    }
    worst
}

pub fn pqi_error(configs: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for cfg in 0..configs {
        let mut r = rng(3000 + cfg);
        let cin = r.gen_range(1..9);
        let cout = r.gen_range(1..6);
        let (h, w) = (r.gen_range(1..9), r.gen_range(1..9));
        let mut store = ParamStore::new(cfg);
        let pqi = PixelQueryInit::new(&mut store, "pqi", cin, cout).unwrap();
        randomize(&mut store, 3100 + cfg, 0.9);
        let x = random_map(3200 + cfg, cin, h, w);

        let mut g = Graph::new();
        let xv = input(&mut g, &x);
        let y = pqi_global_feature(&mut g, &store, &pqi, xv).unwrap();
        let expect = super::pqi(&store, "pqi", &x);
        worst = worst.max(max_abs_diff(g.value(y), &expect.data));
    }
    worst
}

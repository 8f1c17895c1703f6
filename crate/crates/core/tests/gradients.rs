mod common;

use common::*;
use liftdepth::binhead::{bin_centres_graph, depth_from_probs_graph, silog_loss_graph, BinWidthPredictor, LossParams, PixelQueryInit};
use liftdepth::dgr::{DecoderBlock, FrameSubspace, SfDgr};
use liftdepth::er::ErLifting;
use liftdepth::numcore::{finite_diff_check, GradCheckOptions, GradCheckReport, Graph, ParamStore, Tensor, Var};
use liftdepth::Result;
use proptest::prelude::*;

fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n = shape.iter().product();
    let w = g.constant(&Tensor::new(shape, random_vec(&mut rng(seed), n, 1.0))?);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn map_tensor(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    Tensor::new(vec![c, h, w], random_vec(&mut rng(seed), c * h * w, 1.0)).unwrap()
}

fn check(store: &mut ParamStore, f: impl Fn(&mut Graph, &ParamStore) -> Result<Var>) -> GradCheckReport {
    finite_diff_check(store, f, &GradCheckOptions { eps: 1e-6, ..Default::default() }).unwrap()
}

#[test]
fn sf_dgr_gradients() {
    let mut store = ParamStore::new(3);
    let frame = FrameSubspace::construct(&mut store, "frame", 8, 4).unwrap();
    let t = SfDgr::new(&mut store, "t", 3, 4, &frame).unwrap();
    let x = map_tensor(3, 4, 4, 9);
    let r = check(&mut store, |g, s| {
        let xv = g.constant(&x);
        let y = t.forward(g, s, &frame, xv)?.output;
        probe(g, y, 11)
    });
    assert!(r.passed() && r.max_rel_error() < 1e-4, "{r}");
    assert!(r.params.iter().any(|p| p.name == "frame"));
}

#[test]
fn er_gradients() {
    let mut store = ParamStore::new(4);
    let er = ErLifting::new(&mut store, "er", 4).unwrap();
    randomize(&mut store, 40, 0.7);
    let x = map_tensor(4, 4, 4, 41);
    let r = check(&mut store, |g, s| {
        let xv = g.constant(&x);
        let (_, y) = er.forward(g, s, xv)?;
        probe(g, y, 42)
    });
    assert!(r.passed() && r.max_rel_error() < 1e-4, "{r}");
}

#[test]
fn decoder_block_gradients() {
    let mut store = ParamStore::new(5);
    let block = DecoderBlock::new(&mut store, "b", 3, 2, 4).unwrap();
    randomize(&mut store, 50, 0.5);
    let prev = map_tensor(3, 2, 2, 51);
    let skip = map_tensor(2, 4, 4, 52);
    let r = check(&mut store, |g, s| {
        let a = g.constant(&prev);
        let b = g.constant(&skip);
        let y = block.forward(g, s, a, b)?;
        probe(g, y, 53)
    });
    assert!(r.passed(), "{r}");
}

#[test]
fn bin_head_gradients() {
    let mut store = ParamStore::new(6);
    let pqi = PixelQueryInit::new(&mut store, "pqi", 4, 3).unwrap();
    let bcp = BinWidthPredictor::new(&mut store, "bcp", 4, 5).unwrap();
    let head = liftdepth::numcore::Linear::new(&mut store, "head", 3, 5).unwrap();
    let x = map_tensor(4, 3, 3, 61);
    let gt: Vec<f64> = (0..9).map(|i| 1.0 + 0.3 * i as f64).collect();
    let mask = vec![true; 9];
    let r = check(&mut store, |g, s| {
        let xv = g.constant(&x);
        let q = pqi.forward(g, s, xv)?;
        let logits = head.forward(g, s, q)?;
        let probs = g.softmax(logits);
        let widths = bcp.forward(g, s, xv)?;
        let centres = bin_centres_graph(g, widths, 0.5, 6.0)?;
        let d = depth_from_probs_graph(g, probs, centres)?;
        silog_loss_graph(g, d, &gt, &mask, &LossParams::default())
    });
    assert!(r.passed(), "{r}");
}

#[test]
fn silog_gradient_wrt_prediction() {
    let mut store = ParamStore::new(7);
    let pred = store.insert("pred", Tensor::new(vec![2, 3], vec![1.2, 0.7, 3.1, 2.2, 0.9, 5.0]).unwrap()).unwrap();
    let gt = [1.0, 1.1, 2.5, 2.0, 0.4, 6.0];
    let mask = [true, true, false, true, true, true];
    let r = check(&mut store, |g, s| {
        let p = g.param(s, pred);
        silog_loss_graph(g, p, &gt, &mask, &LossParams::default())
    });
    assert!(r.passed() && r.max_rel_error() < 1e-6, "{r}");
    let masked = &r.params[0];
    assert_eq!(masked.entries, 6);
}

/// A random composition of primitives over a `[c, h, w]` parameter.
fn primitive_chain(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (c, h, w) = (s[0], s[1], s[2]);
    let a = g.tanh(x);
    let b = g.affine(a, 1.7, 0.3);
    let sq = g.square(x);
    let sum = g.add(b, sq)?;
    let n = g.group_norm(sum, 1)?;
    let sm = g.softmax(n);
    let up = g.resize_bilinear(sm, h + 1, 2 * w)?;
    let pooled = g.adaptive_avg_pool(up, 2, 3)?;
    let wk = g.constant(&Tensor::new(vec![2, c, 3, 3], random_vec(&mut rng(seed), 18 * c, 0.5))?);
    let conv = g.conv2d(x, wk, 1, 1)?;
    let r = g.relu(conv);
    let coeffs = g.constant(&Tensor::new(vec![8], random_vec(&mut rng(seed ^ 3), 8, 1.0))?);
    let dy = g.dyrelu(r, coeffs)?;
    let pos = g.affine(sm, 1.0, 0.5);
    let lg = g.log(pos);
    let rt = g.sqrt(pos);
    let p1 = probe(g, pooled, seed ^ 5)?;
    let p2 = probe(g, dy, seed ^ 6)?;
    let p3 = probe(g, lg, seed ^ 7)?;
    let p4 = probe(g, rt, seed ^ 8)?;
    let cl = g.clamp(b, -0.5, 1.5);
    let cat = g.concat(&[cl, x])?;
    let top = g.slice_rows(cat, 1, c + 1)?;
    let flat = g.reshape(top, vec![c, h * w])?;
    let gram = g.matmul_t(flat, flat, false, true)?;
    let p5 = probe(g, gram, seed ^ 9)?;
    let p4 = g.add(p4, p5)?;
    let s12 = g.add(p1, p2)?;
    let s34 = g.add(p3, p4)?;
    g.add(s12, s34)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    #[test]
    fn primitive_gradients_match_differences(
        c in 1usize..4,
        h in 1usize..5,
        w in 1usize..5,
        seed in any::<u64>(),
    ) {
        let mut store = ParamStore::new(seed);
        let id = store.insert("x", Tensor::new(vec![c, h, w], random_vec(&mut rng(seed), c * h * w, 1.0)).unwrap()).unwrap();
        let r = finite_diff_check(
            &mut store,
            |g, s| {
                let x = g.param(s, id);
                primitive_chain(g, x, seed)
            },
            &GradCheckOptions { eps: 1e-6, tol: 1e-4, ..Default::default() },
        )
        .unwrap();
        prop_assert!(r.passed(), "{}", r);
    }
}

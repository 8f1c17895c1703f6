use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use liftdepth::model::{build_model, load_checkpoint};
use liftdepth::numcore::lftd;
use liftdepth::scenes::{read_manifest, read_pfm, MANIFEST};
use liftdepth_cli::{parse_text, RunConfig, EXIT_DATA, EXIT_FAILED, EXIT_USAGE};
use proptest::prelude::*;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_liftdepth"));
    c.env_remove("LIFTDEPTH_SEED");
    c
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().expect("spawn liftdepth")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn ok(o: Output) -> String {
    assert_eq!(code(&o), 0, "stdout:\n{}\nstderr:\n{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: [&str; 6] = ["--set", "preset=tiny", "--set", "data_dir=data", "--set", "out_dir=run"];

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

fn trained(dir: &Path) {
    ok(run(&with(&["gen"], &TINY), dir));
    ok(run(&with(&["train"], &TINY), dir));
}

fn tiny_config(dir: &Path) -> RunConfig {
    let items = parse_text("preset = tiny\ndata_dir = data\nout_dir = run\n", "test").unwrap();
    let mut cfg = RunConfig::from_assignments(&items, None).unwrap();
    cfg.checkpoint = dir.join("run/checkpoint");
    cfg
}

#[test]
fn gen_writes_pairs_and_manifest() {
    let t = TempDir::new().unwrap();
    ok(run(&["gen", "--set", "samples=3", "--set", "height=32", "--set", "width=32", "--out", "d"], t.path()));
    let mut names: Vec<String> = fs::read_dir(t.path().join("d")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["0000.pfm", "0000.ppm", "0001.pfm", "0001.ppm", "0002.pfm", "0002.ppm", MANIFEST]);
    assert_eq!(read_manifest(&t.path().join("d")).unwrap().len(), 3);
}

#[test]
fn gen_with_zero_samples_writes_an_empty_manifest() {
    let t = TempDir::new().unwrap();
    ok(run(&["gen", "--set", "samples=0", "--out", "d"], t.path()));
    assert!(read_manifest(&t.path().join("d")).unwrap().is_empty());
    let files: Vec<_> = fs::read_dir(t.path().join("d")).unwrap().collect();
    assert_eq!(files.len(), 1);
}

#[test]
fn gen_is_identical_across_worker_counts() {
    let t = TempDir::new().unwrap();
    ok(run(&with(&["gen", "--workers", "1", "--out", "a"], &TINY), t.path()));
    ok(run(&with(&["gen", "--workers", "3", "--out", "b"], &TINY), t.path()));
    for e in fs::read_dir(t.path().join("a")).unwrap() {
        let name = e.unwrap().file_name();
        assert_eq!(fs::read(t.path().join("a").join(&name)).unwrap(), fs::read(t.path().join("b").join(&name)).unwrap());
    }
}

#[test]
fn unwritable_output_is_a_usage_error() {
    let t = TempDir::new().unwrap();
    fs::write(t.path().join("file"), b"x").unwrap();
    let o = run(&["gen", "--set", "samples=1", "--out", "file/sub"], t.path());
    assert_eq!(code(&o), EXIT_USAGE);
}

#[test]
fn bad_configuration_is_a_usage_error() {
    let t = TempDir::new().unwrap();
    assert_eq!(code(&run(&["train", "--set", "no_such_key=1"], t.path())), EXIT_USAGE);
    assert_eq!(code(&run(&["train", "--set", "epochs=-1"], t.path())), EXIT_USAGE);
    assert_eq!(code(&run(&["train", "--set", "epochs"], t.path())), EXIT_USAGE);
    assert_eq!(code(&run(&["train", "--config", "missing.cfg"], t.path())), EXIT_USAGE);
    assert_eq!(code(&run(&["frobnicate"], t.path())), EXIT_USAGE);
    assert_eq!(code(&run(&["dump", "--what", "weights"], t.path())), EXIT_USAGE);
    fs::write(t.path().join("bad.cfg"), "epochs 3\n").unwrap();
    assert_eq!(code(&run(&["train", "--config", "bad.cfg"], t.path())), EXIT_USAGE);
}

#[test]
fn training_without_data_is_a_usage_error() {
    let t = TempDir::new().unwrap();
    assert_eq!(code(&run(&with(&["train"], &TINY), t.path())), EXIT_USAGE);
}

#[test]
fn config_file_and_overrides_combine() {
    let t = TempDir::new().unwrap();
    fs::write(t.path().join("run.cfg"), "# tiny run\npreset = tiny\nsamples = 2\ndata_dir = data\nout_dir = run\n").unwrap();
    ok(run(&["gen", "--config", "run.cfg", "--set", "samples=4"], t.path()));
    assert_eq!(read_manifest(&t.path().join("data")).unwrap().len(), 4);
}

#[test]
fn zero_epochs_saves_the_initial_parameters() {
    let t = TempDir::new().unwrap();
    ok(run(&with(&["gen"], &TINY), t.path()));
    ok(run(&with(&["train", "--set", "epochs=0"], &TINY), t.path()));
    assert_eq!(fs::read_to_string(t.path().join("run/loss.log")).unwrap(), "");
    let cfg = tiny_config(t.path());
    let init = build_model(&cfg.model).unwrap();
    let mut loaded = build_model(&cfg.model).unwrap();
    load_checkpoint(&cfg.checkpoint, &mut loaded.params).unwrap();
    assert!(loaded.params.same_values(&init.params));
}

#[test]
fn training_logs_are_reproducible() {
    let t = TempDir::new().unwrap();
    trained(t.path());
    let first = fs::read(t.path().join("run/loss.log")).unwrap();
    let ckpt = fs::read(t.path().join("run/checkpoint/params.f64")).unwrap();
    ok(run(&with(&["train"], &TINY), t.path()));
    assert_eq!(fs::read(t.path().join("run/loss.log")).unwrap(), first);
    assert_eq!(fs::read(t.path().join("run/checkpoint/params.f64")).unwrap(), ckpt);
    let lines: Vec<&str> = std::str::from_utf8(&first).unwrap().lines().collect();
    assert_eq!(lines.len(), 4);
    for (i, l) in lines.iter().enumerate() {
        let f: Vec<&str> = l.split(' ').collect();
        assert_eq!(f.len(), 3);
        assert_eq!(f[0], i.to_string());
        assert!(f[1].parse::<f64>().unwrap().is_finite());
    }
}

#[test]
fn seed_environment_variable_changes_the_run() {
    let t = TempDir::new().unwrap();
    ok(run(&with(&["gen"], &TINY), t.path()));
    let a = bin().args(with(&["train", "--set", "out_dir=a"], &TINY[..4])).current_dir(t.path()).output().unwrap();
    let b = bin().args(with(&["train", "--set", "out_dir=b"], &TINY[..4])).env("LIFTDEPTH_SEED", "77").current_dir(t.path()).output().unwrap();
    ok(a);
    ok(b);
    assert_ne!(fs::read(t.path().join("a/loss.log")).unwrap(), fs::read(t.path().join("b/loss.log")).unwrap());
}

#[test]
fn eval_writes_reports_and_predictions() {
    let t = TempDir::new().unwrap();
    trained(t.path());
    ok(run(&with(&["eval", "--workers", "2", "--set", "error_maps=true"], &TINY), t.path()));
    let dir = t.path().join("run/eval");
    let csv = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 1 + 8 + 1);
    assert!(rows[0].starts_with("sample,"));
    assert!(rows[9].starts_with("mean,"));
    let text = fs::read_to_string(dir.join("metrics.txt")).unwrap();
    assert!(text.contains("rmse ") && text.contains("zeta1 "));
    for i in 0..8 {
        let pred = read_pfm(&dir.join(format!("{i:04}.pred.pfm"))).unwrap();
        assert_eq!(pred.shape(), &[32, 32]);
        assert!(pred.data().iter().all(|d| d.is_finite() && *d > 0.0));
        assert!(dir.join(format!("{i:04}.err.ppm")).is_file());
    }
}

#[test]
fn ground_truth_predictor_scores_perfectly() {
    let t = TempDir::new().unwrap();
    ok(run(&with(&["gen"], &TINY), t.path()));
    ok(run(&with(&["eval", "--set", "predictor=ground-truth"], &TINY), t.path()));
    let text = fs::read_to_string(t.path().join("run/eval/metrics.txt")).unwrap();
    let get = |k: &str| -> f64 { text.lines().find_map(|l| l.strip_prefix(&format!("{k} "))).unwrap().parse().unwrap() };
    assert_eq!(get("rmse"), 0.0);
    assert_eq!(get("abs_rel"), 0.0);
    assert_eq!(get("zeta1"), 1.0);
}

#[test]
fn depth_cap_removes_every_pixel_when_tiny() {
    let t = TempDir::new().unwrap();
    ok(run(&with(&["gen"], &TINY), t.path()));
    let out = ok(run(&with(&["eval", "--set", "predictor=ground-truth", "--set", "depth_cap=0.001"], &TINY), t.path()));
    assert!(out.contains("skipped"));
    let text = fs::read_to_string(t.path().join("run/eval/metrics.txt")).unwrap();
    assert!(text.contains("samples 0"));
    assert!(text.contains("skipped 8"));
}

#[test]
fn eval_with_a_mismatched_model_is_a_data_error() {
    let t = TempDir::new().unwrap();
    trained(t.path());
    let o = run(&with(&["eval", "--set", "encoder_channels=8,8,8,8"], &TINY), t.path());
    assert_eq!(code(&o), EXIT_DATA, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&with(&["eval", "--set", "checkpoint=nowhere"], &TINY), t.path());
    assert_eq!(code(&o), EXIT_DATA);
}

#[test]
fn eval_on_images_of_another_size_is_a_data_error() {
    let t = TempDir::new().unwrap();
    trained(t.path());
    ok(run(&["gen", "--set", "samples=1", "--set", "height=64", "--set", "width=64", "--out", "big"], t.path()));
    let o = run(&with(&["eval", "--set", "eval_dir=big"], &TINY), t.path());
    assert_eq!(code(&o), EXIT_DATA, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn infer_writes_one_depth_map() {
    let t = TempDir::new().unwrap();
    trained(t.path());
    ok(run(&with(&["infer", "--image", "data/0003.ppm", "--output", "d.pfm"], &TINY), t.path()));
    let d = read_pfm(&t.path().join("d.pfm")).unwrap();
    assert_eq!(d.shape(), &[32, 32]);
    let pred = {
        ok(run(&with(&["eval"], &TINY), t.path()));
        read_pfm(&t.path().join("run/eval/0003.pred.pfm")).unwrap()
    };
    assert_eq!(d.data(), pred.data());
}

fn dumped(dir: &Path, names: &[&str]) -> Vec<liftdepth::numcore::Tensor> {
    names.iter().map(|n| lftd::read(&dir.join("run/dump").join(n)).unwrap()).collect()
}

#[test]
fn dumps_have_documented_shapes() {
    let t = TempDir::new().unwrap();
    trained(t.path());
    let cfg = tiny_config(t.path());
    ok(run(&with(&["dump", "--what", "frame"], &TINY), t.path()));
    let f = &dumped(t.path(), &["frame.lftd"])[0];
    assert_eq!(f.shape(), &[cfg.model.frame_n, cfg.model.frame_c]);

    ok(run(&with(&["dump", "--what", "dgr"], &TINY), t.path()));
    let d = dumped(t.path(), &["dgr0.lftd", "dgr1.lftd", "dgr2.lftd", "dgr3.lftd"]);
    for (l, t) in d.iter().enumerate() {
        assert_eq!(&t.shape()[1..], &[1 << l, 1 << l]);
    }

    ok(run(&with(&["dump", "--what", "er-alpha", "--image", "data/0001.ppm"], &TINY), t.path()));
    let a = dumped(t.path(), &["er_alpha1.lftd", "er_alpha2.lftd", "er_alpha3.lftd"]);
    for (i, t) in a.iter().enumerate() {
        assert_eq!(t.shape(), &[2 << i, 2 << i]);
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    ok(run(&with(&["dump", "--what", "depth", "--image", "data/0003.ppm"], &TINY), t.path()));
    let depth = &dumped(t.path(), &["depth.lftd"])[0];
    ok(run(&with(&["infer", "--image", "data/0003.ppm", "--output", "d.pfm"], &TINY), t.path()));
    assert_eq!(depth.data(), read_pfm(&t.path().join("d.pfm")).unwrap().data());
}

#[test]
fn dump_without_edge_enhancement_is_rejected() {
    let t = TempDir::new().unwrap();
    let o = run(&with(&["dump", "--untrained", "--what", "er-alpha", "--set", "use_er=false"], &TINY), t.path());
    assert_eq!(code(&o), EXIT_USAGE);
    ok(run(&with(&["dump", "--untrained", "--what", "frame"], &TINY), t.path()));
}

#[test]
fn dump_without_checkpoint_is_a_data_error() {
    let t = TempDir::new().unwrap();
    assert_eq!(code(&run(&with(&["dump", "--what", "frame"], &TINY), t.path())), EXIT_DATA);
}

#[test]
fn gradcheck_of_an_empty_model_passes() {
    let t = TempDir::new().unwrap();
    let out = ok(run(&["gradcheck", "--empty"], t.path()));
    assert!(out.contains("PASS"));
}

#[test]
fn gradcheck_names_a_corrupted_parameter() {
    let t = TempDir::new().unwrap();
    let o = run(&["gradcheck", "--corrupt", "prob_head.bias"], t.path());
    assert_eq!(code(&o), EXIT_FAILED);
    let out = String::from_utf8_lossy(&o.stdout);
    let first = out.lines().find(|l| l.starts_with("worst offender")).unwrap();
    assert!(first.contains("prob_head.bias"), "{out}");
    assert_eq!(code(&run(&["gradcheck", "--corrupt", "no.such.param"], t.path())), EXIT_USAGE);
}

fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("run/checkpoint")
}

#[test]
fn truncated_checkpoint_is_a_data_error() {
    let t = TempDir::new().unwrap();
    trained(t.path());
    let blob = checkpoint_path(t.path()).join("params.f64");
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
    assert_eq!(code(&run(&with(&["eval"], &TINY), t.path())), EXIT_DATA);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_text_round_trips(epochs in 0usize..50, batch in 1usize..9, lr in 1e-6f64..1.0, seed in 0u64..1000, er in any::<bool>()) {
        let text = format!("preset = tiny\nepochs = {epochs}\nbatch_size = {batch}\nlr_start = {lr}\nseed = {seed}\nuse_er = {er}\n");
        let cfg = RunConfig::from_assignments(&parse_text(&text, "p").unwrap(), None).unwrap();
        prop_assert_eq!(cfg.train.epochs, epochs);
        prop_assert_eq!(cfg.train.lr_start, lr);
        prop_assert_eq!(cfg.model.use_er, er);
        let again = RunConfig::from_assignments(&parse_text(&cfg.to_text(), "q").unwrap(), None).unwrap();
        prop_assert_eq!(again.to_text(), cfg.to_text());
    }
}

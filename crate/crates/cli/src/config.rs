//! Flat `key = value` run configuration with command-line overrides.

use std::fmt;
use std::path::{Path, PathBuf};

use liftdepth::binhead::LossParams;
use liftdepth::model::{ModelConfig, TrainConfig};
use liftdepth::scenes::SceneSpec;

pub const SEED_ENV: &str = "LIFTDEPTH_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Predictor {
    Model,
    /// Test hook: the prediction is the ground truth itself.
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub scene: SceneSpec,
    pub samples: usize,
    pub train: TrainConfig,
    pub data_dir: PathBuf,
    pub eval_dir: PathBuf,
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub depth_cap: Option<f64>,
    pub error_maps: bool,
    pub predictor: Predictor,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

pub const KEYS: &[&str] = &[
    "preset",
    "seed",
    "data_seed",
    "samples",
    "height",
    "width",
    "encoder_channels",
    "decoder_channels",
    "frame_n",
    "frame_c",
    "n_bins",
    "d_min",
    "d_max",
    "use_er",
    "min_objects",
    "max_objects",
    "d_near",
    "d_far",
    "background_min",
    "albedo_min",
    "albedo_max",
    "tint",
    "epochs",
    "batch_size",
    "lr_start",
    "lr_end",
    "shuffle",
    "loss_alpha",
    "loss_lambda",
    "data_dir",
    "eval_dir",
    "out_dir",
    "checkpoint",
    "depth_cap",
    "error_maps",
    "predictor",
];

/// One `key = value` assignment and where it came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub key: String,
    pub value: String,
    pub origin: String,
}

pub fn parse_assignment(text: &str, origin: &str) -> Result<Assignment> {
    let (k, v) = text
        .split_once('=')
        .ok_or_else(|| ConfigError(format!("{origin}: expected `key = value`, got `{text}`")))?;
    let key = k.trim().to_string();
    if !KEYS.contains(&key.as_str()) {
        return Err(ConfigError(format!("{origin}: unknown key `{key}`")));
    }
    Ok(Assignment {
        key,
        value: v.trim().to_string(),
        origin: origin.to_string(),
    })
}

/// Lines of a config file; `#` starts a comment.
pub fn parse_text(text: &str, name: &str) -> Result<Vec<Assignment>> {
    text.lines()
        .enumerate()
        .filter_map(|(i, line)| {
            let body = line.split('#').next().unwrap_or("").trim();
            (!body.is_empty()).then(|| parse_assignment(body, &format!("{name}:{}", i + 1)))
        })
        .collect()
}

fn preset_model(name: &str) -> Option<(ModelConfig, usize, TrainConfig)> {
    match name {
        "desk" => Some((ModelConfig::desk(), 200, TrainConfig::default())),
        "tiny" => Some((ModelConfig::tiny(), 8, TrainConfig { epochs: 2, ..TrainConfig::default() })),
        "overfit" => Some((ModelConfig::desk(), 4, TrainConfig { epochs: 200, shuffle: false, ..TrainConfig::default() })),
        _ => None,
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset("desk").expect("desk preset exists")
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (model, samples, train) = preset_model(name).ok_or_else(|| ConfigError(format!("unknown preset `{name}` (desk, tiny, overfit)")))?;
        let scene = SceneSpec {
            seed: 0,
            height: model.height,
            width: model.width,
            ..SceneSpec::default()
        };
        let out_dir = absolute(Path::new("run"));
        Ok(Self {
            model,
            scene,
            samples,
            train,
            data_dir: absolute(Path::new("data")),
            eval_dir: absolute(Path::new("data")),
            checkpoint: out_dir.join("checkpoint"),
            out_dir,
            depth_cap: None,
            error_maps: false,
            predictor: Predictor::Model,
        })
    }

    /// Builds a config from assignments applied in order after the preset
    /// (the last `preset` wins), then the seed from `env_seed` when given.
    /// Paths are made absolute; `eval_dir` and `checkpoint` default to
    /// `data_dir` and `out_dir/checkpoint`.
    pub fn from_assignments(items: &[Assignment], env_seed: Option<&str>) -> Result<Self> {
        let preset = items.iter().rev().find(|a| a.key == "preset").map_or("desk", |a| a.value.as_str());
        let mut cfg = Self::preset(preset)?;
        let (mut eval_dir, mut checkpoint) = (None, None);
        for a in items {
            cfg.apply(a, &mut eval_dir, &mut checkpoint)?;
        }
        if let Some(s) = env_seed {
            let seed = s.trim().parse().map_err(|_| ConfigError(format!("{SEED_ENV}: `{s}` is not an unsigned integer")))?;
            cfg.set_seed(seed);
        }
        cfg.eval_dir = eval_dir.unwrap_or_else(|| cfg.data_dir.clone());
        cfg.checkpoint = checkpoint.unwrap_or_else(|| cfg.out_dir.join("checkpoint"));
        cfg.validate()?;
        Ok(cfg)
    }

    fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
    }

    fn apply(&mut self, a: &Assignment, eval_dir: &mut Option<PathBuf>, checkpoint: &mut Option<PathBuf>) -> Result<()> {
        let v = a.value.as_str();
        let bad = |what: &str| ConfigError(format!("{}: `{}` expects {what}, got `{v}`", a.origin, a.key));
        let uint = || v.parse::<usize>().map_err(|_| bad("an unsigned integer"));
        let float = || v.parse::<f64>().map_err(|_| bad("a number")).and_then(|x| if x.is_finite() { Ok(x) } else { Err(bad("a finite number")) });
        let boolean = || match v {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(bad("true or false")),
        };
        let widths = || -> Result<[usize; 4]> {
            let parts: Vec<usize> = v.split(',').map(|p| p.trim().parse::<usize>()).collect::<std::result::Result<_, _>>().map_err(|_| bad("four comma-separated widths"))?;
            parts.try_into().map_err(|_| bad("four comma-separated widths"))
        };
        match a.key.as_str() {
            "preset" => {}
            "seed" => self.set_seed(v.parse().map_err(|_| bad("an unsigned integer"))?),
            "data_seed" => self.scene.seed = v.parse().map_err(|_| bad("an unsigned integer"))?,
            "samples" => self.samples = uint()?,
            "height" => {
                self.model.height = uint()?;
                self.scene.height = self.model.height;
            }
            "width" => {
                self.model.width = uint()?;
                self.scene.width = self.model.width;
            }
            "encoder_channels" => self.model.encoder_channels = widths()?,
            "decoder_channels" => self.model.decoder_channels = widths()?,
            "frame_n" => self.model.frame_n = uint()?,
            "frame_c" => self.model.frame_c = uint()?,
            "n_bins" => self.model.n_bins = uint()?,
            "d_min" => self.model.d_min = float()?,
            "d_max" => self.model.d_max = float()?,
            "use_er" => self.model.use_er = boolean()?,
            "min_objects" => self.scene.min_objects = uint()?,
            "max_objects" => self.scene.max_objects = uint()?,
            "d_near" => self.scene.d_near = float()?,
            "d_far" => self.scene.d_far = float()?,
            "background_min" => self.scene.background_min = float()?,
            "albedo_min" => self.scene.albedo_min = float()?,
            "albedo_max" => self.scene.albedo_max = float()?,
            "tint" => self.scene.tint = float()?,
            "epochs" => self.train.epochs = uint()?,
            "batch_size" => self.train.batch_size = uint()?,
            "lr_start" => self.train.lr_start = float()?,
            "lr_end" => self.train.lr_end = float()?,
            "shuffle" => self.train.shuffle = boolean()?,
            "loss_alpha" => self.train.loss.alpha = float()?,
            "loss_lambda" => self.train.loss.lambda = float()?,
            "data_dir" => self.data_dir = absolute(Path::new(v)),
            "eval_dir" => *eval_dir = Some(absolute(Path::new(v))),
            "out_dir" => self.out_dir = absolute(Path::new(v)),
            "checkpoint" => *checkpoint = Some(absolute(Path::new(v))),
            "depth_cap" => {
                self.depth_cap = match v {
                    "none" | "off" => None,
                    _ => Some(float()?).filter(|c| *c > 0.0),
                }
            }
            "error_maps" => self.error_maps = boolean()?,
            "predictor" => {
                self.predictor = match v {
                    "model" => Predictor::Model,
                    "ground-truth" => Predictor::GroundTruth,
                    _ => return Err(bad("`model` or `ground-truth`")),
                }
            }
            other => return Err(ConfigError(format!("{}: unknown key `{other}`", a.origin))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let err = |e: liftdepth::Error| ConfigError(e.to_string());
        self.model.validate().map_err(err)?;
        self.scene.validate().map_err(err)?;
        self.train.loss.validate().map_err(err)?;
        if self.train.batch_size == 0 {
            return Err(ConfigError("batch_size must be positive".into()));
        }
        if !(self.train.lr_start >= 0.0) || !(self.train.lr_end >= 0.0) {
            return Err(ConfigError("learning rates must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn loss(&self) -> LossParams {
        self.train.loss
    }

    /// The resolved configuration as `key = value` lines.
    pub fn to_text(&self) -> String {
        let join = |w: [usize; 4]| w.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let cap = self.depth_cap.map_or("none".to_string(), |c| c.to_string());
        let predictor = match self.predictor {
            Predictor::Model => "model",
            Predictor::GroundTruth => "ground-truth",
        };
        let rows: Vec<(&str, String)> = vec![
            ("seed", self.model.seed.to_string()),
            ("data_seed", self.scene.seed.to_string()),
            ("samples", self.samples.to_string()),
            ("height", self.model.height.to_string()),
            ("width", self.model.width.to_string()),
            ("encoder_channels", join(self.model.encoder_channels)),
            ("decoder_channels", join(self.model.decoder_channels)),
            ("frame_n", self.model.frame_n.to_string()),
            ("frame_c", self.model.frame_c.to_string()),
            ("n_bins", self.model.n_bins.to_string()),
            ("d_min", self.model.d_min.to_string()),
            ("d_max", self.model.d_max.to_string()),
            ("use_er", self.model.use_er.to_string()),
            ("min_objects", self.scene.min_objects.to_string()),
            ("max_objects", self.scene.max_objects.to_string()),
            ("d_near", self.scene.d_near.to_string()),
            ("d_far", self.scene.d_far.to_string()),
            ("background_min", self.scene.background_min.to_string()),
            ("albedo_min", self.scene.albedo_min.to_string()),
            ("albedo_max", self.scene.albedo_max.to_string()),
            ("tint", self.scene.tint.to_string()),
            ("epochs", self.train.epochs.to_string()),
            ("batch_size", self.train.batch_size.to_string()),
            ("lr_start", self.train.lr_start.to_string()),
            ("lr_end", self.train.lr_end.to_string()),
            ("shuffle", self.train.shuffle.to_string()),
            ("loss_alpha", self.train.loss.alpha.to_string()),
            ("loss_lambda", self.train.loss.lambda.to_string()),
            ("data_dir", self.data_dir.display().to_string()),
            ("eval_dir", self.eval_dir.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("checkpoint", self.checkpoint.display().to_string()),
            ("depth_cap", cap),
            ("error_maps", self.error_maps.to_string()),
            ("predictor", predictor.to_string()),
        ];
        rows.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

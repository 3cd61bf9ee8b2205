//! Run configuration: a flat `key = value` text file.
//!
//! Blank lines and `#` comments are ignored. Every key is optional and falls
//! back to its default; unknown or repeated keys are errors. Relative paths
//! are resolved against the directory holding the config file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use glandseg_core::{AugmentConfig, FusionConfig, NetworkConfig, PadMode, TrainConfig};

use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 24,
            height: 256,
            width: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset_root: PathBuf,
    pub output_dir: PathBuf,
    /// Defaults to `<output_dir>/model.gsck`.
    pub checkpoint: Option<PathBuf>,
    /// Defaults to `output_dir`.
    pub predictions_dir: Option<PathBuf>,
    pub split_manifest: Option<PathBuf>,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub fusion: FusionConfig,
    /// Rescale `min_object_px` from the 775×522 reference frame to each image.
    pub scale_min_object: bool,
    pub band_width: usize,
    pub pad_mode: PadMode,
    pub infer_batch: usize,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset_root: PathBuf::from("data"),
            output_dir: PathBuf::from("out"),
            checkpoint: None,
            predictions_dir: None,
            split_manifest: None,
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            fusion: FusionConfig::default(),
            scale_min_object: true,
            band_width: glandseg_core::dataset::DEFAULT_BAND_WIDTH,
            pad_mode: PadMode::Reflect,
            infer_batch: 8,
            synth: SynthConfig::default(),
        }
    }
}

/// Every accepted key, in the order [`RunConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "dataset_root",
    "output_dir",
    "checkpoint",
    "predictions_dir",
    "split_manifest",
    "seed",
    "depth",
    "base_filters",
    "kernel",
    "patch_size",
    "bn_momentum",
    "bn_eps",
    "epochs",
    "batch_size",
    "learning_rate",
    "rho",
    "rmsprop_eps",
    "dice_smooth",
    "weight_gland",
    "weight_contour",
    "aug_factor",
    "aug_shift",
    "aug_rotation",
    "aug_zoom_min",
    "aug_zoom_max",
    "aug_flip_h",
    "aug_flip_v",
    "band_width",
    "pad_mode",
    "infer_batch",
    "tau_gland",
    "tau_contour",
    "min_object_px",
    "scale_min_object",
    "fill_holes",
    "restore_dilate_px",
    "synth_count",
    "synth_height",
    "synth_width",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("invalid value {value:?} for {key}"))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base).map_err(|m| CliError::Input(format!("{}: {m}", path.display())))
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self, String> {
        let mut cfg = Self::default();
        cfg.dataset_root = base.join(&cfg.dataset_root);
        cfg.output_dir = base.join(&cfg.output_dir);
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |m: String| format!("line {}: {m}", i + 1);
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let Some(&known) = KEYS.iter().find(|&&k| k == key) else {
                return Err(at(format!("unknown key {key:?}")));
            };
            if seen.contains(&known) {
                return Err(at(format!("duplicate key {key:?}")));
            }
            seen.push(known);
            cfg.set(key, value, base).map_err(at)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<(), String> {
        let path = || {
            if value.is_empty() {
                return Err(format!("{key} must not be empty"));
            }
            Ok(base.join(value))
        };
        let (n, t, a, f) = (&mut self.network, &mut self.train, &mut self.augment, &mut self.fusion);
        match key {
            "dataset_root" => self.dataset_root = path()?,
            "output_dir" => self.output_dir = path()?,
            "checkpoint" => self.checkpoint = Some(path()?),
            "predictions_dir" => self.predictions_dir = Some(path()?),
            "split_manifest" => self.split_manifest = Some(path()?),
            "seed" => {
                t.seed = parse(key, value)?;
                a.seed = t.seed;
            }
            "depth" => n.depth = parse(key, value)?,
            "base_filters" => n.base_filters = parse(key, value)?,
            "kernel" => n.kernel = parse(key, value)?,
            "patch_size" => n.input_size = parse(key, value)?,
            "bn_momentum" => n.bn_momentum = parse(key, value)?,
            "bn_eps" => n.bn_eps = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "learning_rate" => t.lr = parse(key, value)?,
            "rho" => t.rho = parse(key, value)?,
            "rmsprop_eps" => t.eps = parse(key, value)?,
            "dice_smooth" => t.dice_smooth = parse(key, value)?,
            "weight_gland" => t.head_weights.0 = parse(key, value)?,
            "weight_contour" => t.head_weights.1 = parse(key, value)?,
            "aug_factor" => a.factor = parse(key, value)?,
            "aug_shift" => a.shift_frac = parse(key, value)?,
            "aug_rotation" => a.rot_deg = parse(key, value)?,
            "aug_zoom_min" => a.zoom_min = parse(key, value)?,
            "aug_zoom_max" => a.zoom_max = parse(key, value)?,
            "aug_flip_h" => a.flip_h = parse(key, value)?,
            "aug_flip_v" => a.flip_v = parse(key, value)?,
            "band_width" => self.band_width = parse(key, value)?,
            "pad_mode" => self.pad_mode = value.parse().map_err(|e: glandseg_core::Error| e.to_string())?,
            "infer_batch" => self.infer_batch = parse(key, value)?,
            "tau_gland" => f.tau_gland = parse(key, value)?,
            "tau_contour" => f.tau_contour = parse(key, value)?,
            "min_object_px" => f.min_object_px = parse(key, value)?,
            "scale_min_object" => self.scale_min_object = parse(key, value)?,
            "fill_holes" => f.fill_holes = parse(key, value)?,
            "restore_dilate_px" => f.restore_dilate_px = parse(key, value)?,
            "synth_count" => self.synth.count = parse(key, value)?,
            "synth_height" => self.synth.height = parse(key, value)?,
            "synth_width" => self.synth.width = parse(key, value)?,
            _ => unreachable!("key list and setter out of sync: {key}"),
        }
        Ok(())
    }

    /// Validate the numeric sections used by training and inference.
    pub fn validate(&self) -> Result<(), CliError> {
        self.network.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        self.fusion.validate()?;
        if self.network.input_size < glandseg_core::tiling::MIN_PATCH_SIZE {
            return Err(CliError::Input(format!(
                "patch_size {} is below {}",
                self.network.input_size,
                glandseg_core::tiling::MIN_PATCH_SIZE
            )));
        }
        if self.infer_batch == 0 {
            return Err(CliError::Input("infer_batch must be positive".into()));
        }
        Ok(())
    }

    /// Redirect outputs to `dir` while the checkpoint keeps being read from
    /// where the config points.
    pub fn redirect_output(&mut self, dir: PathBuf) {
        self.checkpoint = Some(self.checkpoint_path());
        self.output_dir = dir;
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.output_dir.join("model.gsck"))
    }

    pub fn predictions_path(&self) -> PathBuf {
        self.predictions_dir.clone().unwrap_or_else(|| self.output_dir.clone())
    }

    pub fn split_spec(&self) -> glandseg_core::SplitSpec {
        match &self.split_manifest {
            Some(p) => glandseg_core::SplitSpec::Manifest(p.clone()),
            None => glandseg_core::SplitSpec::Auto,
        }
    }

    /// Fusion settings for an `h`×`w` image.
    pub fn fusion_for(&self, h: usize, w: usize) -> FusionConfig {
        if self.scale_min_object {
            self.fusion.for_image(h, w)
        } else {
            self.fusion.clone()
        }
    }

    /// Every effective setting with absolute paths; parses back to `self`.
    pub fn to_text(&self) -> String {
        let (n, t, a, f) = (&self.network, &self.train, &self.augment, &self.fusion);
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let p = |p: &Path| p.display().to_string();
        put("dataset_root", p(&self.dataset_root));
        put("output_dir", p(&self.output_dir));
        if let Some(c) = &self.checkpoint {
            put("checkpoint", p(c));
        }
        if let Some(c) = &self.predictions_dir {
            put("predictions_dir", p(c));
        }
        if let Some(c) = &self.split_manifest {
            put("split_manifest", p(c));
        }
        put("seed", t.seed.to_string());
        put("depth", n.depth.to_string());
        put("base_filters", n.base_filters.to_string());
        put("kernel", n.kernel.to_string());
        put("patch_size", n.input_size.to_string());
        put("bn_momentum", n.bn_momentum.to_string());
        put("bn_eps", n.bn_eps.to_string());
        put("epochs", t.epochs.to_string());
        put("batch_size", t.batch_size.to_string());
        put("learning_rate", t.lr.to_string());
        put("rho", t.rho.to_string());
        put("rmsprop_eps", t.eps.to_string());
        put("dice_smooth", t.dice_smooth.to_string());
        put("weight_gland", t.head_weights.0.to_string());
        put("weight_contour", t.head_weights.1.to_string());
        put("aug_factor", a.factor.to_string());
        put("aug_shift", a.shift_frac.to_string());
        put("aug_rotation", a.rot_deg.to_string());
        put("aug_zoom_min", a.zoom_min.to_string());
        put("aug_zoom_max", a.zoom_max.to_string());
        put("aug_flip_h", a.flip_h.to_string());
        put("aug_flip_v", a.flip_v.to_string());
        put("band_width", self.band_width.to_string());
        put(
            "pad_mode",
            match self.pad_mode {
                PadMode::Reflect => "reflect".into(),
                PadMode::Zero => "zero".into(),
            },
        );
        put("infer_batch", self.infer_batch.to_string());
        put("tau_gland", f.tau_gland.to_string());
        put("tau_contour", f.tau_contour.to_string());
        put("min_object_px", f.min_object_px.to_string());
        put("scale_min_object", self.scale_min_object.to_string());
        put("fill_holes", f.fill_holes.to_string());
        put("restore_dilate_px", f.restore_dilate_px.to_string());
        put("synth_count", self.synth.count.to_string());
        put("synth_height", self.synth.height.to_string());
        put("synth_width", self.synth.width.to_string());
        s
    }
}

//! Flat `section.key = value` run configuration.
//!
//! Every key has a default except `run.seed`. Parsing reports all problems
//! at once. [`RunConfig::to_text`] writes the effective configuration back
//! out in a form that parses to the same value.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::regression::LoopParams;
use crate::synthgen::{CountRange, SynthConfig};
use crate::vessel::{ColorParams, VesselSource};
use crate::vlcore::{EncoderConfig, Optimizer, TrainHyper};
use crate::{LESION_NAMES, NUM_GRADES, NUM_LESIONS};

#[derive(Debug, Error, PartialEq)]
#[error("invalid config:\n  {}", .0.join("\n  "))]
pub struct ConfigError(pub Vec<String>);

#[derive(Clone, Debug, PartialEq)]
pub enum InpainterSetting {
    Harmonic,
    External { command: String, timeout_secs: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub output_dir: PathBuf,
    /// Description file; `None` uses the built-in set.
    pub descriptions: Option<PathBuf>,
}

impl Paths {
    /// Relative paths are taken relative to `root`.
    pub fn resolve(&self, root: &Path) -> Paths {
        let r = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                root.join(p)
            }
        };
        Paths {
            data_dir: r(&self.data_dir),
            checkpoint: r(&self.checkpoint),
            output_dir: r(&self.output_dir),
            descriptions: self.descriptions.as_deref().map(r),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for `run`; 0 means one per core.
    pub workers: usize,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub train_per_grade: usize,
    pub test_per_grade: usize,
    pub encoder: EncoderConfig,
    pub train: TrainHyper,
    pub color: ColorParams,
    pub max_iterations: usize,
    pub dilate: bool,
    /// Where repair gets its raw vessel maps.
    pub vessel_source: VesselSource,
    pub inpainter: InpainterSetting,
}

impl RunConfig {
    /// Defaults for everything, with the given seed.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            workers: 0,
            paths: Paths {
                data_dir: "data".into(),
                checkpoint: "model/model.ckpt".into(),
                output_dir: "out".into(),
                descriptions: None,
            },
            synth: SynthConfig {
                seed,
                ..SynthConfig::default()
            },
            train_per_grade: 30,
            test_per_grade: 10,
            encoder: EncoderConfig {
                patch_size: 8,
                ..EncoderConfig::default()
            },
            train: TrainHyper {
                lr: 0.001,
                epochs: 200,
                batch_size: 16,
                seed,
                optimizer: Optimizer::Adam,
                augment: true,
            },
            color: ColorParams::default(),
            max_iterations: 10,
            dilate: false,
            vessel_source: VesselSource::GroundTruth,
            inpainter: InpainterSetting::Harmonic,
        }
    }

    /// Change the run seed everywhere it is copied.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
        self.train.seed = seed;
    }

    pub fn loop_params(&self) -> LoopParams {
        LoopParams {
            max_iterations: self.max_iterations,
            dilate: self.dilate,
            color: self.color.clone(),
            seed: self.seed,
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut errors = Vec::new();
        let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                errors.push(format!("line {}: expected `key = value`", i + 1));
                continue;
            };
            let k = k.trim().to_string();
            if entries
                .insert(k.clone(), (i + 1, v.trim().to_string()))
                .is_some()
            {
                errors.push(format!("line {}: duplicate key {k}", i + 1));
            }
        }

        let seed = match entries.remove("run.seed") {
            Some((line, v)) => v.parse().unwrap_or_else(|_| {
                errors.push(format!(
                    "line {line}: run.seed: expected an unsigned integer, got {v:?}"
                ));
                0
            }),
            None => {
                errors.push("run.seed is required".into());
                0
            }
        };
        let mut c = Self::with_seed(seed);
        let mut take = |key: &str| entries.remove(key);

        fn set<T: std::str::FromStr>(
            errors: &mut Vec<String>,
            key: &str,
            entry: Option<(usize, String)>,
            dst: &mut T,
        ) {
            if let Some((line, v)) = entry {
                match v.parse() {
                    Ok(x) => *dst = x,
                    Err(_) => errors.push(format!(
                        "line {line}: {key}: cannot parse {v:?} as {}",
                        std::any::type_name::<T>()
                    )),
                }
            }
        }
        macro_rules! field {
            ($key:literal, $dst:expr) => {
                set(&mut errors, $key, take($key), &mut $dst)
            };
        }

        field!("run.workers", c.workers);
        if let Some((_, v)) = take("paths.data_dir") {
            c.paths.data_dir = v.into();
        }
        if let Some((_, v)) = take("paths.checkpoint") {
            c.paths.checkpoint = v.into();
        }
        if let Some((_, v)) = take("paths.output_dir") {
            c.paths.output_dir = v.into();
        }
        if let Some((_, v)) = take("paths.descriptions") {
            c.paths.descriptions = (!v.is_empty()).then(|| v.into());
        }

        field!("synth.image_size", c.synth.image_size);
        field!("synth.vessel_count", c.synth.vessel_count);
        field!("synth.disc_radius", c.synth.disc_radius);
        field!("synth.vessel_width", c.synth.vessel_width);
        field!("synth.train_per_grade", c.train_per_grade);
        field!("synth.test_per_grade", c.test_per_grade);
        for g in 0..NUM_GRADES {
            for k in 0..NUM_LESIONS {
                let key = budget_key(g, k);
                if let Some((line, v)) = take(&key) {
                    match parse_range(&v) {
                        Some(r) => c.synth.lesion_budget.0[g][k] = r,
                        None => errors
                            .push(format!("line {line}: {key}: expected `min-max`, got {v:?}")),
                    }
                }
            }
        }

        field!("encoder.patch_size", c.encoder.patch_size);
        field!("encoder.dim", c.encoder.dim);
        field!("encoder.layers", c.encoder.layers);
        field!("encoder.heads", c.encoder.heads);
        field!("encoder.ff_dim", c.encoder.ff_dim);
        c.encoder.image_size = c.synth.image_size as usize;

        field!("train.lr", c.train.lr);
        field!("train.epochs", c.train.epochs);
        field!("train.batch_size", c.train.batch_size);
        field!("train.augment", c.train.augment);
        if let Some((line, v)) = take("train.optimizer") {
            match v.as_str() {
                "sgd" => c.train.optimizer = Optimizer::Sgd,
                "adam" => c.train.optimizer = Optimizer::Adam,
                _ => errors.push(format!(
                    "line {line}: train.optimizer: expected sgd or adam, got {v:?}"
                )),
            }
        }

        field!("color.beta_dark", c.color.beta_dark);
        field!("color.gamma_distance", c.color.gamma_distance);
        field!("color.delta_noise", c.color.delta_noise);
        field!("color.alpha_vessel", c.color.alpha_vessel);
        field!("color.alpha_inter", c.color.alpha_inter);

        field!("loop.max_iterations", c.max_iterations);
        field!("loop.dilate", c.dilate);
        if let Some((line, v)) = take("loop.vessel_source") {
            c.vessel_source = match v.as_str() {
                "ground_truth" => VesselSource::GroundTruth,
                "ridge" => VesselSource::Ridge,
                "none" => VesselSource::Disabled,
                s if s.starts_with("dir:") => VesselSource::Directory(s[4..].into()),
                _ => {
                    errors.push(format!(
                        "line {line}: loop.vessel_source: expected ground_truth, ridge, none or dir:PATH, got {v:?}"
                    ));
                    VesselSource::GroundTruth
                }
            };
        }
        let kind = take("inpaint.method");
        let command = take("inpaint.command");
        let mut timeout_secs = 60u64;
        set(
            &mut errors,
            "inpaint.timeout_secs",
            take("inpaint.timeout_secs"),
            &mut timeout_secs,
        );
        match kind.as_ref().map(|(l, v)| (*l, v.as_str())) {
            None | Some((_, "harmonic")) => {}
            Some((line, "external")) => match command {
                Some((_, cmd)) if !cmd.is_empty() => {
                    c.inpainter = InpainterSetting::External {
                        command: cmd,
                        timeout_secs,
                    }
                }
                _ => errors.push(format!(
                    "line {line}: inpaint.method = external needs inpaint.command"
                )),
            },
            Some((line, v)) => errors.push(format!(
                "line {line}: inpaint.method: expected harmonic or external, got {v:?}"
            )),
        }

        for (k, (line, _)) in &entries {
            errors.push(format!("line {line}: unknown key {k}"));
        }
        c.synth.seed = c.seed;
        c.train.seed = c.seed;
        errors.extend(c.validate());
        if errors.is_empty() {
            Ok(c)
        } else {
            Err(ConfigError(errors))
        }
    }

    /// Semantic checks on the assembled config.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if let Err(e) = self.synth.validate() {
            errs.push(e.to_string());
        }
        if let Err(e) = self.encoder.validate() {
            errs.push(e.to_string());
        }
        if let Err(e) = self.train.validate() {
            errs.push(e.to_string());
        }
        if let Err(e) = self.color.validate() {
            errs.push(e.to_string());
        }
        if self.max_iterations == 0 {
            errs.push("loop.max_iterations must be >= 1".into());
        }
        errs
    }

    /// Effective configuration, one key per line in a fixed order.
    pub fn to_text(&self) -> String {
        let mut lines = vec![
            format!("run.seed = {}", self.seed),
            format!("run.workers = {}", self.workers),
            format!("paths.data_dir = {}", self.paths.data_dir.display()),
            format!("paths.checkpoint = {}", self.paths.checkpoint.display()),
            format!("paths.output_dir = {}", self.paths.output_dir.display()),
            format!(
                "paths.descriptions = {}",
                self.paths
                    .descriptions
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default()
            ),
            format!("synth.image_size = {}", self.synth.image_size),
            format!("synth.vessel_count = {}", self.synth.vessel_count),
            format!("synth.disc_radius = {}", self.synth.disc_radius),
            format!("synth.vessel_width = {}", self.synth.vessel_width),
            format!("synth.train_per_grade = {}", self.train_per_grade),
            format!("synth.test_per_grade = {}", self.test_per_grade),
        ];
        for g in 0..NUM_GRADES {
            for k in 0..NUM_LESIONS {
                let r = self.synth.lesion_budget.0[g][k];
                lines.push(format!("{} = {}-{}", budget_key(g, k), r.min, r.max));
            }
        }
        let opt = match self.train.optimizer {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        };
        lines.extend([
            format!("encoder.patch_size = {}", self.encoder.patch_size),
            format!("encoder.dim = {}", self.encoder.dim),
            format!("encoder.layers = {}", self.encoder.layers),
            format!("encoder.heads = {}", self.encoder.heads),
            format!("encoder.ff_dim = {}", self.encoder.ff_dim),
            format!("train.lr = {}", self.train.lr),
            format!("train.epochs = {}", self.train.epochs),
            format!("train.batch_size = {}", self.train.batch_size),
            format!("train.optimizer = {opt}"),
            format!("train.augment = {}", self.train.augment),
            format!("color.beta_dark = {}", self.color.beta_dark),
            format!("color.gamma_distance = {}", self.color.gamma_distance),
            format!("color.delta_noise = {}", self.color.delta_noise),
            format!("color.alpha_vessel = {}", self.color.alpha_vessel),
            format!("color.alpha_inter = {}", self.color.alpha_inter),
            format!("loop.max_iterations = {}", self.max_iterations),
            format!("loop.dilate = {}", self.dilate),
            format!(
                "loop.vessel_source = {}",
                match &self.vessel_source {
                    VesselSource::GroundTruth => "ground_truth".to_string(),
                    VesselSource::Ridge => "ridge".to_string(),
                    VesselSource::Disabled => "none".to_string(),
                    VesselSource::Directory(p) => format!("dir:{}", p.display()),
                }
            ),
        ]);
        match &self.inpainter {
            InpainterSetting::Harmonic => lines.push("inpaint.method = harmonic".into()),
            InpainterSetting::External {
                command,
                timeout_secs,
            } => lines.extend([
                "inpaint.method = external".into(),
                format!("inpaint.command = {command}"),
                format!("inpaint.timeout_secs = {timeout_secs}"),
            ]),
        }
        lines.join("\n") + "\n"
    }
}

fn budget_key(grade: usize, lesion: usize) -> String {
    format!(
        "synth.budget.g{grade}.{}",
        LESION_NAMES[lesion].to_lowercase()
    )
}

fn parse_range(v: &str) -> Option<CountRange> {
    let (a, b) = v.split_once('-')?;
    Some(CountRange::new(
        a.trim().parse().ok()?,
        b.trim().parse().ok()?,
    ))
}

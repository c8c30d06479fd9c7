//! The five pipeline stages behind the command line: generate, train, run,
//! evaluate, report.
//!
//! Each stage reads its upstream artifacts from the paths in [`RunConfig`],
//! writes its own, and drops a copy of the effective config (`config.txt`)
//! next to them.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, InpainterSetting, RunConfig};
use crate::evaluation::{
    classification_metrics, reduction_curve, segmentation_report, transition_flow, write_report,
    Label, MetricReport, SegItem,
};
use crate::inpaint::{ExternalInpainter, HarmonicInpainter, Inpainter};
use crate::mask::BinaryMask;
use crate::plots::{montage, reduction_curve_plot, transition_heatmap, MontageRow};
use crate::regression::{
    classify_referable, read_final_mask, read_trace_record, run_batch, write_trace_dir, BatchItem,
    TraceRecord,
};
use crate::seeds::{derive_seed, rng_from};
use crate::synthgen::{generate_dataset, read_dataset, write_dataset, FundusSample, SynthConfig};
use crate::vlcore::{
    encode_text, load_checkpoint, save_checkpoint, train, DescriptionSet, EncoderParams,
    LabeledImage, PredictionRecord, TargetVector, TrainHyper, VlModel,
};
use crate::NUM_GRADES;

pub const CONFIG_FILE: &str = "config.txt";
pub const RESULTS_FILE: &str = "results.json";
pub const REPORT_FILE: &str = "report.json";
pub const TRAIN_LOG_FILE: &str = "train_log.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing artifact {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: String },
    #[error("{stage} failed at {path}: {reason}")]
    Io {
        stage: &'static str,
        path: PathBuf,
        reason: String,
    },
    #[error("{stage} failed: {reason}")]
    Stage { stage: &'static str, reason: String },
}

impl PipelineError {
    /// Short machine-readable error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::MissingArtifact { .. } => "missing_artifact",
            PipelineError::Io { .. } => "io",
            PipelineError::Stage { .. } => "stage",
        }
    }

    pub fn path(&self) -> Option<&Path> {
        match self {
            PipelineError::MissingArtifact { path, .. } | PipelineError::Io { path, .. } => {
                Some(path)
            }
            _ => None,
        }
    }

    /// Individual problems; one entry unless this is a config error.
    pub fn details(&self) -> Vec<String> {
        match self {
            PipelineError::Config(c) => c.0.clone(),
            e => vec![e.to_string()],
        }
    }
}

fn stage_err(stage: &'static str) -> impl Fn(&dyn std::fmt::Display) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        reason: e.to_string(),
    }
}

fn io_err<'a>(
    stage: &'static str,
    path: &'a Path,
) -> impl FnOnce(std::io::Error) -> PipelineError + 'a {
    move |e| PipelineError::Io {
        stage,
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn require(path: &Path, hint: &str) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::MissingArtifact {
            path: path.to_path_buf(),
            hint: hint.into(),
        })
    }
}

/// Read and parse a config file.
pub fn load_config(path: &Path) -> Result<RunConfig, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::MissingArtifact {
        path: path.to_path_buf(),
        hint: format!("cannot read config: {e}"),
    })?;
    Ok(RunConfig::parse(&text)?)
}

/// A config plus the directory its relative paths resolve against.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub config: RunConfig,
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(config: RunConfig, root: impl Into<PathBuf>) -> Self {
        Self {
            config,
            root: root.into(),
        }
    }

    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.path(&self.config.paths.data_dir)
    }
    pub fn train_dir(&self) -> PathBuf {
        self.data_dir().join("train")
    }
    pub fn test_dir(&self) -> PathBuf {
        self.data_dir().join("test")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.path(&self.config.paths.checkpoint)
    }
    pub fn output_dir(&self) -> PathBuf {
        self.path(&self.config.paths.output_dir)
    }
    pub fn traces_dir(&self) -> PathBuf {
        self.output_dir().join("traces")
    }
    pub fn plots_dir(&self) -> PathBuf {
        self.output_dir().join("plots")
    }

    fn write_effective_config(&self, stage: &'static str, dir: &Path) -> Result<(), PipelineError> {
        fs::create_dir_all(dir).map_err(io_err(stage, dir))?;
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, self.config.to_text()).map_err(io_err(stage, &path))
    }

    fn descriptions(&self) -> Result<DescriptionSet, PipelineError> {
        let dim = self.config.encoder.dim;
        match &self.config.paths.descriptions {
            None => Ok(DescriptionSet::default_set(dim)),
            Some(p) => {
                let path = self.path(p);
                let src =
                    fs::read_to_string(&path).map_err(|e| PipelineError::MissingArtifact {
                        path: path.clone(),
                        hint: format!("description file: {e}"),
                    })?;
                DescriptionSet::parse(&src, dim).map_err(|e| stage_err("train")(&e))
            }
        }
    }

    fn read_split(
        &self,
        dir: &Path,
        stage: &'static str,
    ) -> Result<Vec<FundusSample>, PipelineError> {
        require(&dir.join("labels.csv"), "run `generate` first")?;
        read_dataset(dir).map_err(|e| stage_err(stage)(&e))
    }
}

fn split_config(config: &RunConfig, split: &str) -> SynthConfig {
    SynthConfig {
        seed: derive_seed(config.seed, &format!("synth.{split}")),
        ..config.synth.clone()
    }
}

fn replace_dir(stage: &'static str, dir: &Path) -> Result<(), PipelineError> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(io_err(stage, dir))?;
    }
    fs::create_dir_all(dir).map_err(io_err(stage, dir))
}

/// Write the train and test splits under `data_dir`. Returns sample counts.
pub fn cmd_generate(ws: &Workspace) -> Result<(usize, usize), PipelineError> {
    const STAGE: &str = "generate";
    let c = &ws.config;
    let mut sizes = [0; 2];
    for (i, (split, per_grade, dir)) in [
        ("train", c.train_per_grade, ws.train_dir()),
        ("test", c.test_per_grade, ws.test_dir()),
    ]
    .into_iter()
    .enumerate()
    {
        let samples = generate_dataset(&split_config(c, split), &[per_grade; NUM_GRADES])
            .map_err(|e| stage_err(STAGE)(&e))?;
        replace_dir(STAGE, &dir)?;
        write_dataset(&samples, &dir).map_err(|e| stage_err(STAGE)(&e))?;
        sizes[i] = samples.len();
    }
    ws.write_effective_config(STAGE, &ws.data_dir())?;
    Ok((sizes[0], sizes[1]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub samples: usize,
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
}

/// Train on the train split and save the checkpoint.
pub fn cmd_train(ws: &Workspace) -> Result<TrainLog, PipelineError> {
    const STAGE: &str = "train";
    let c = &ws.config;
    let samples = ws.read_split(&ws.train_dir(), STAGE)?;
    let text = encode_text(&ws.descriptions()?).map_err(|e| stage_err(STAGE)(&e))?;
    let data = samples
        .into_iter()
        .map(|s| {
            Ok(LabeledImage {
                target: TargetVector::new(s.grade, s.lesion_flags)?,
                image: s.image,
            })
        })
        .collect::<Result<Vec<_>, crate::vlcore::VlError>>()
        .map_err(|e| stage_err(STAGE)(&e))?;
    let mut init_rng = rng_from(derive_seed(c.seed, "encoder.init"));
    let params = EncoderParams::init(c.encoder, &mut init_rng).map_err(|e| stage_err(STAGE)(&e))?;
    let hyper = TrainHyper {
        seed: derive_seed(c.seed, "train"),
        ..c.train.clone()
    };
    let outcome = train(&data, params, &text, &hyper).map_err(|e| stage_err(STAGE)(&e))?;
    let log = TrainLog {
        samples: data.len(),
        initial_loss: outcome.initial_loss,
        epoch_losses: outcome.epoch_losses.clone(),
    };
    let model = VlModel::new(outcome.params, text).map_err(|e| stage_err(STAGE)(&e))?;
    let ckpt = ws.checkpoint();
    let dir = ckpt
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ws.root.clone());
    fs::create_dir_all(&dir).map_err(io_err(STAGE, &dir))?;
    save_checkpoint(&model, &ckpt).map_err(|e| stage_err(STAGE)(&e))?;
    let log_path = dir.join(TRAIN_LOG_FILE);
    let json = serde_json::to_string_pretty(&log).map_err(|e| stage_err(STAGE)(&e))?;
    fs::write(&log_path, json + "\n").map_err(io_err(STAGE, &log_path))?;
    ws.write_effective_config(STAGE, &dir)?;
    Ok(log)
}

/// One image's outcome in `results.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub id: String,
    pub label_grade: usize,
    /// Prediction on the unmodified image, absent if the model failed on it.
    pub initial: Option<PredictionRecord>,
    pub trace: Option<TraceRecord>,
    pub error: Option<String>,
}

fn build_inpainter(ws: &Workspace) -> Box<dyn Inpainter> {
    match &ws.config.inpainter {
        InpainterSetting::Harmonic => Box::new(HarmonicInpainter::default()),
        InpainterSetting::External {
            command,
            timeout_secs,
        } => Box::new(ExternalInpainter {
            command: command.clone(),
            work_dir: ws.output_dir().join("inpaint_work"),
            timeout: Duration::from_secs(*timeout_secs),
        }),
    }
}

/// Run the regression loop on every test image. Per-image failures are
/// recorded in `results.json`, not raised.
pub fn cmd_run(ws: &Workspace) -> Result<Vec<RunEntry>, PipelineError> {
    const STAGE: &str = "run";
    let c = &ws.config;
    let ckpt = ws.checkpoint();
    require(&ckpt, "run `train` first")?;
    let model = load_checkpoint(&ckpt).map_err(|e| stage_err(STAGE)(&e))?;
    let samples = ws.read_split(&ws.test_dir(), STAGE)?;
    if let crate::vessel::VesselSource::Directory(d) = &c.vessel_source {
        require(&ws.path(d), "vessel map directory")?;
    }
    let mut items = Vec::with_capacity(samples.len());
    for s in &samples {
        let raw = c
            .vessel_source
            .raw_map(&s.id, &s.image, Some(&s.vessel_mask))
            .map_err(|e| stage_err(STAGE)(&e))?;
        items.push(BatchItem {
            id: s.id.clone(),
            image: s.image.clone(),
            raw_vessels: raw,
        });
    }
    let inpainter = build_inpainter(ws);
    let results = run_batch(
        &items,
        &model,
        inpainter.as_ref(),
        &c.loop_params(),
        c.workers,
    )
    .map_err(|e| stage_err(STAGE)(&e))?;

    let out = ws.output_dir();
    fs::create_dir_all(&out).map_err(io_err(STAGE, &out))?;
    replace_dir(STAGE, &ws.traces_dir())?;
    let mut entries = Vec::with_capacity(samples.len());
    for (s, r) in samples.iter().zip(results) {
        let entry = match r {
            Ok(res) => {
                write_trace_dir(&ws.traces_dir().join(&s.id), &s.id, &s.image, &res)
                    .map_err(|e| stage_err(STAGE)(&e))?;
                RunEntry {
                    id: s.id.clone(),
                    label_grade: s.grade,
                    initial: Some(res.initial.clone()),
                    trace: Some(TraceRecord::from_result(&s.id, &res)),
                    error: None,
                }
            }
            Err(e) => {
                log::warn!("{}: {e}", s.id);
                RunEntry {
                    id: s.id.clone(),
                    label_grade: s.grade,
                    initial: model.predict_image(&s.image).ok(),
                    trace: None,
                    error: Some(e.to_string()),
                }
            }
        };
        entries.push(entry);
    }
    let path = out.join(RESULTS_FILE);
    let json = serde_json::to_string_pretty(&entries).map_err(|e| stage_err(STAGE)(&e))?;
    fs::write(&path, json + "\n").map_err(io_err(STAGE, &path))?;
    ws.write_effective_config(STAGE, &out)?;
    Ok(entries)
}

fn read_results(ws: &Workspace) -> Result<Vec<RunEntry>, PipelineError> {
    let path = ws.output_dir().join(RESULTS_FILE);
    require(&path, "run `run` first")?;
    let raw = fs::read_to_string(&path).map_err(io_err("evaluate", &path))?;
    serde_json::from_str(&raw).map_err(|e| PipelineError::Io {
        stage: "evaluate",
        path,
        reason: e.to_string(),
    })
}

/// Compute classification, segmentation and loop metrics; writes
/// `metrics.csv` and `report.json` into the output directory.
pub fn cmd_evaluate(ws: &Workspace) -> Result<MetricReport, PipelineError> {
    const STAGE: &str = "evaluate";
    let entries = read_results(ws)?;
    let samples = ws.read_split(&ws.test_dir(), STAGE)?;
    let mut notes = Vec::new();

    let mut preds = Vec::new();
    let mut labels = Vec::new();
    let mut masks: Vec<(BinaryMask, usize)> = Vec::new();
    let mut records = Vec::new();
    for e in &entries {
        let Some(s) = samples.iter().position(|s| s.id == e.id) else {
            return Err(stage_err(STAGE)(&format!(
                "{} is in results but not in the test set",
                e.id
            )));
        };
        if let Some(p) = &e.initial {
            preds.push(p.clone());
            labels.push(Label {
                grade: samples[s].grade,
                lesions: samples[s].lesion_flags,
            });
        }
        match &e.trace {
            Some(_) => {
                let dir = ws.traces_dir().join(&e.id);
                require(&dir.join(crate::regression::TRACE_FILE), "run `run` first")?;
                records.push(read_trace_record(&dir).map_err(|e| stage_err(STAGE)(&e))?);
                masks.push((read_final_mask(&dir).map_err(|e| stage_err(STAGE)(&e))?, s));
            }
            None => notes.push(format!(
                "{} excluded from segmentation and loop metrics: {}",
                e.id,
                e.error.as_deref().unwrap_or("no trace")
            )),
        }
    }

    let classification =
        classification_metrics(&preds, &labels).map_err(|e| stage_err(STAGE)(&e))?;
    for k in &classification.skipped {
        notes.push(format!(
            "{k}: undefined on this set (single label value), left out of macro means"
        ));
    }
    let items: Vec<SegItem<'_>> = masks
        .iter()
        .map(|(m, s)| SegItem {
            predicted: m,
            lesions: &samples[*s].lesion_masks,
        })
        .collect();
    let segmentation = segmentation_report(&items);
    notes.push(
        "segmentation counts pooled over images; a lesion class absent from every image has undefined sensitivity"
            .into(),
    );
    let label_grades: Vec<usize> = masks.iter().map(|(_, s)| samples[*s].grade).collect();
    let finals: Vec<usize> = records.iter().map(|r| r.final_class).collect();
    let referable: Vec<&TraceRecord> = records
        .iter()
        .filter(|r| classify_referable(r.initial_class))
        .collect();
    let mean_iterations = (!referable.is_empty()).then(|| {
        referable.iter().map(|r| r.iterations as f64).sum::<f64>() / referable.len() as f64
    });

    let report = MetricReport {
        images: entries.len(),
        classification,
        segmentation,
        reduction_curve: reduction_curve(&records),
        transition_flow: transition_flow(&label_grades, &finals),
        mean_iterations,
        notes,
    };
    let out = ws.output_dir();
    write_report(&report, &out).map_err(io_err(STAGE, &out))?;
    ws.write_effective_config(STAGE, &out)?;
    Ok(report)
}

fn load_rgb(stage: &'static str, path: &Path) -> Result<RgbImage, PipelineError> {
    require(path, "trace directory is incomplete")?;
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|e| PipelineError::Io {
            stage,
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

fn save_plot(stage: &'static str, img: &RgbImage, path: &Path) -> Result<(), PipelineError> {
    img.save(path).map_err(|e| PipelineError::Io {
        stage,
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Render plots into `output_dir/plots`: the reduction curve, the grade
/// transition heat map and one montage per image that went through at
/// least one cycle. Returns the written files.
pub fn cmd_report(ws: &Workspace) -> Result<Vec<PathBuf>, PipelineError> {
    const STAGE: &str = "report";
    let report_path = ws.output_dir().join(REPORT_FILE);
    require(&report_path, "run `evaluate` first")?;
    let raw = fs::read_to_string(&report_path).map_err(io_err(STAGE, &report_path))?;
    let report: MetricReport = serde_json::from_str(&raw).map_err(|e| PipelineError::Io {
        stage: STAGE,
        path: report_path.clone(),
        reason: e.to_string(),
    })?;
    let entries = read_results(ws)?;

    let dir = ws.plots_dir();
    replace_dir(STAGE, &dir)?;
    let mut written = Vec::new();
    let p = dir.join("reduction_curve.png");
    save_plot(
        STAGE,
        &reduction_curve_plot(&report.reduction_curve.values),
        &p,
    )?;
    written.push(p);
    let p = dir.join("transition_flow.png");
    save_plot(STAGE, &transition_heatmap(&report.transition_flow), &p)?;
    written.push(p);

    for e in &entries {
        let Some(trace) = &e.trace else { continue };
        if trace.iterations == 0 {
            continue;
        }
        let tdir = ws.traces_dir().join(&e.id);
        let mut entering = load_rgb(STAGE, &tdir.join("original.png"))?;
        let mut tiles = Vec::new();
        for rec in &trace.per_iteration {
            let t = rec.iteration;
            let sal_path = tdir.join(format!("iter_{t}_saliency.png"));
            require(&sal_path, "trace directory is incomplete")?;
            let sal = image::open(&sal_path)
                .map_err(|e| stage_err(STAGE)(&e))?
                .to_luma8();
            let mask_path = tdir.join(format!("iter_{t}_mask.png"));
            require(&mask_path, "trace directory is incomplete")?;
            let mask = BinaryMask::from_gray(
                &image::open(&mask_path)
                    .map_err(|e| stage_err(STAGE)(&e))?
                    .to_luma8(),
            );
            let repaired = load_rgb(STAGE, &tdir.join(format!("iter_{t}_repaired.png")))?;
            tiles.push((entering, sal, mask, repaired.clone()));
            entering = repaired;
        }
        let rows: Vec<MontageRow<'_>> = tiles
            .iter()
            .map(|(o, s, m, i)| MontageRow {
                original: o,
                saliency: s,
                mask: m,
                inpainted: i,
            })
            .collect();
        let p = dir.join(format!("montage_{}.png", e.id));
        save_plot(STAGE, &montage(&rows), &p)?;
        written.push(p);
    }
    ws.write_effective_config(STAGE, &dir)?;
    Ok(written)
}

//! The five pipeline stages over files: generate HR frames, build the
//! patch datasets, train, predict full volumes and evaluate them.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::build::{nominal_venc, TEST_HR_FILE, TEST_LR_FILE, TRAIN_FILE, VAL_FILE, DEFAULT_HR_INTENSITY};
use crate::dataset::{
    build_dataset, synthetic_frames, BuildConfig, ContainerHeader, ContainerReader, ContainerWriter,
    DatasetManifest, HrFrame, SourceInfo, SourceInput, SourceRole, VolumeRecord,
};
use crate::error::{Error, Result};
use crate::eval::{metric_report, upsample_tricubic_baseline, upsample_trilinear_baseline, EvaluationReport, FrameReport, ReportOptions};
use crate::flowfield::{FlowSpec, FluidMask, VelocityField};
use crate::infer::{predict_record, DEFAULT_INFER_PATCH};
use crate::kspace::sinc_upsample_field;
use crate::net::{Checkpoint, ModelParameters, NetConfig};
use crate::seed::derive_seed;
use crate::train::{train_loop, TrainConfig, TrainReport, TrainSample};
use crate::volume::Grid3;

pub const REPORT_FILE: &str = "report.json";
pub const FRAMES_TSV: &str = "frames.tsv";

/// One synthetic geometry and the split it feeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    pub name: String,
    pub role: SourceRole,
    pub flow: FlowSpec,
}

/// Output locations. Relative paths are resolved against the directory of
/// the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// One HR frame container per source, `<name>.f4d`.
    pub frames_dir: PathBuf,
    pub dataset_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub train_log: PathBuf,
    pub prediction: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            frames_dir: "frames".into(),
            dataset_dir: "dataset".into(),
            checkpoint: "model.f4dw".into(),
            train_log: "train_log.tsv".into(),
            prediction: "prediction.f4d".into(),
            report_dir: "report".into(),
        }
    }
}

impl PathsConfig {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.frames_dir,
            &mut self.dataset_dir,
            &mut self.checkpoint,
            &mut self.train_log,
            &mut self.prediction,
            &mut self.report_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    /// HR grid shared by every source.
    pub grid: Grid3,
    pub n_frames: usize,
    pub sources: Vec<SourceConfig>,
    #[serde(default)]
    pub dataset: BuildConfig,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Train on at most this many patches, taken from the start of the
    /// training container.
    #[serde(default)]
    pub max_train_patches: Option<usize>,
    #[serde(default = "default_infer_patch")]
    pub infer_patch: usize,
    #[serde(default)]
    pub eval: ReportOptions,
    #[serde(default)]
    pub paths: PathsConfig,
}

fn default_infer_patch() -> usize {
    DEFAULT_INFER_PATCH
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

impl PipelineConfig {
    /// Read a JSON config; relative paths are taken from its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.paths.resolve(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Set the base seed every stage seed is derived from.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Stage configs with the top-level seed applied.
    pub fn build_config(&self) -> BuildConfig {
        let mut b = self.dataset.clone();
        b.seed = derive_seed(self.seed, &[1]);
        b.policy.seed = derive_seed(self.seed, &[2]);
        b
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, &[3]),
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = || -> Result<()> {
            self.grid.validate()?;
            if self.n_frames == 0 {
                return Err(Error::Config("n_frames must be >= 1".into()));
            }
            if self.sources.is_empty() {
                return Err(Error::Config("no sources configured".into()));
            }
            let mut names: Vec<&str> = self.sources.iter().map(|s| s.name.as_str()).collect();
            names.sort();
            if names.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Config("source names must be unique".into()));
            }
            for s in &self.sources {
                if s.name.is_empty() || s.name.contains(['/', '\\']) {
                    return Err(Error::Config(format!("invalid source name {:?}", s.name)));
                }
                s.flow.validate(&self.grid)?;
            }
            self.build_config().validate()?;
            self.net.validate()?;
            self.train.validate()?;
            if self.infer_patch < crate::net::MIN_INPUT {
                return Err(Error::Config(format!("infer_patch {} is below {}", self.infer_patch, crate::net::MIN_INPUT)));
            }
            Ok(())
        };
        check().map_err(config_err)
    }

    fn source_infos(&self) -> Vec<SourceInfo> {
        self.sources
            .iter()
            .map(|s| SourceInfo {
                name: s.name.clone(),
                role: s.role,
                n_frames: self.n_frames,
            })
            .collect()
    }

    pub fn frames_path(&self, source: &str) -> PathBuf {
        self.paths.frames_dir.join(format!("{source}.f4d"))
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn require_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist")))
    }
}

/// Write one container of HR frames per source into `paths.frames_dir`,
/// which must exist. Returns the written paths.
pub fn generate(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let dir = &cfg.paths.frames_dir;
    require_dir(dir)?;
    let policy = cfg.build_config().policy;
    let mut out = Vec::new();
    for s in &cfg.sources {
        let path = cfg.frames_path(&s.name);
        let mut header = ContainerHeader::volumes(cfg.grid.dims, cfg.grid.spacing, "hr_frames", cfg.n_frames, cfg.seed);
        header.sources = vec![s.name.clone()];
        let mut w = ContainerWriter::create(&path, header)?;
        for frame in synthetic_frames(&s.flow, &cfg.grid, cfg.n_frames)? {
            let frame = frame?;
            let venc = nominal_venc(&policy, frame.field.max_abs_components())?;
            w.write_volume(&frame.to_record(DEFAULT_HR_INTENSITY, venc)?)?;
        }
        w.finish()?;
        log::info!("{}: {} frames -> {}", s.name, cfg.n_frames, path.display());
        out.push(path);
    }
    Ok(out)
}

fn frame_stream(path: PathBuf, spacing: [f64; 3]) -> Result<Box<dyn Iterator<Item = Result<HrFrame>> + Send>> {
    let mut reader = ContainerReader::open(&path)?;
    Ok(Box::new(std::iter::from_fn(move || {
        reader.next_volume().map(|r| r.and_then(|rec| HrFrame::from_record(&rec, spacing)))
    })))
}

/// Read the generated frames and write train/val/test containers plus the
/// manifest into `paths.dataset_dir`.
pub fn build(cfg: &PipelineConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mut inputs = Vec::new();
    for info in cfg.source_infos() {
        let path = cfg.frames_path(&info.name);
        let header = ContainerReader::open(&path)?.header().clone();
        if header.dims != cfg.grid.dims || header.count != cfg.n_frames {
            return Err(Error::Format(format!(
                "{}: holds {} frames of {:?}, config expects {} of {:?}",
                path.display(),
                header.count,
                header.dims,
                cfg.n_frames,
                cfg.grid.dims
            )));
        }
        inputs.push(SourceInput {
            frames: frame_stream(path, header.spacing_mm)?,
            info,
        });
    }
    let manifest = build_dataset(&cfg.build_config(), &cfg.grid, inputs, &cfg.paths.dataset_dir)?;
    log::info!(
        "dataset: {} train, {} val, {} test frames",
        manifest.counts.train,
        manifest.counts.val,
        manifest.counts.test
    );
    Ok(manifest)
}

fn load_samples(path: &Path, limit: Option<usize>) -> Result<Vec<TrainSample<f32>>> {
    let mut reader = ContainerReader::open(path)?;
    let n = limit.unwrap_or(usize::MAX);
    let mut out = Vec::new();
    for p in reader.patches().take(n) {
        out.push(TrainSample::from_patch(&p?)?);
    }
    Ok(out)
}

/// Train from `paths.dataset_dir`, keeping the best checkpoint at
/// `paths.checkpoint` and the per-step log at `paths.train_log`.
pub fn train(cfg: &PipelineConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let dir = &cfg.paths.dataset_dir;
    let train_set = load_samples(&dir.join(TRAIN_FILE), cfg.max_train_patches)?;
    let val_set = load_samples(&dir.join(VAL_FILE), None)?;
    log::info!("training on {} patches, validating on {}", train_set.len(), val_set.len());
    ensure_parent(&cfg.paths.checkpoint)?;
    ensure_parent(&cfg.paths.train_log)?;
    let mut params = ModelParameters::<f32>::init(cfg.net, derive_seed(cfg.seed, &[4]))?;
    let log_path = &cfg.paths.train_log;
    let mut log = BufWriter::new(File::create(log_path).map_err(|e| Error::io(log_path, e))?);
    train_loop(&mut params, &train_set, &val_set, &cfg.train_config(), Some(&cfg.paths.checkpoint), &mut log)
}

/// Super-resolve every frame of an LR volume container with the checkpoint.
pub fn predict(cfg: &PipelineConfig, input: &Path, checkpoint: &Path, out: &Path) -> Result<usize> {
    cfg.validate()?;
    let ck = Checkpoint::load(checkpoint)?;
    let mut reader = ContainerReader::open(input)?;
    let h = reader.header().clone();
    if h.kind != crate::dataset::RecordKind::Volumes {
        return Err(Error::Format(format!("{}: expected a volume container", input.display())));
    }
    let mut header = ContainerHeader::volumes(h.dims.map(|d| 2 * d), h.spacing_mm.map(|s| s / 2.0), "prediction", h.count, h.seed);
    header.sources = h.sources.clone();
    ensure_parent(out)?;
    let mut w = ContainerWriter::create(out, header)?;
    let n = cfg.infer_patch.min(h.dims.iter().copied().min().unwrap_or(0));
    for rec in reader.volumes() {
        w.write_volume(&predict_record(&rec?, &ck.params, n)?)?;
    }
    w.finish()?;
    Ok(h.count)
}

fn field_of(rec: &VolumeRecord, spacing: [f64; 3]) -> Result<VelocityField> {
    VelocityField::from_components(Grid3::new(rec.dims(), spacing)?, rec.velocity.each_ref().map(|v| v.to_f64()))
}

/// Compare predicted SR frames and the three interpolation baselines of the
/// LR frames with the ground truth, frame by frame.
pub fn evaluate(cfg: &PipelineConfig, truth: &Path, lr: &Path, prediction: &Path) -> Result<EvaluationReport> {
    cfg.validate()?;
    let mut rt = ContainerReader::open(truth)?;
    let mut rl = ContainerReader::open(lr)?;
    let mut rp = ContainerReader::open(prediction)?;
    let (ht, hl, hp) = (rt.header().clone(), rl.header().clone(), rp.header().clone());
    if ht.count != hp.count || ht.count != hl.count {
        return Err(Error::Format(format!(
            "frame counts differ: truth {}, LR {}, prediction {}",
            ht.count, hl.count, hp.count
        )));
    }
    if hp.dims != ht.dims || hl.dims.map(|d| 2 * d) != ht.dims {
        return Err(Error::Format(format!(
            "shapes differ: truth {:?}, LR {:?}, prediction {:?}",
            ht.dims, hl.dims, hp.dims
        )));
    }
    let mut frames = Vec::with_capacity(ht.count);
    for frame in 0..ht.count {
        let next = |r: &mut ContainerReader<_>| {
            r.next_volume().unwrap_or_else(|| Err(Error::Truncated(format!("frame {frame} missing"))))
        };
        let (t, l, p) = (next(&mut rt)?, next(&mut rl)?, next(&mut rp)?);
        let truth_f = field_of(&t, ht.spacing_mm)?;
        let mask = FluidMask::new(truth_f.grid, t.mask.clone())?;
        let lr_f = field_of(&l, hl.spacing_mm)?;
        let mut methods = BTreeMap::new();
        let candidates = [
            ("network", field_of(&p, ht.spacing_mm)?),
            ("trilinear", upsample_trilinear_baseline(&lr_f)?),
            ("tricubic", upsample_tricubic_baseline(&lr_f)?),
            ("sinc", sinc_upsample_field(&lr_f)?),
        ];
        for (name, f) in candidates {
            let f = VelocityField::from_components(truth_f.grid, f.components().map(|c| c.clone()))?;
            methods.insert(name.to_string(), metric_report(&f, &truth_f, &mask, &cfg.eval)?);
        }
        frames.push(FrameReport { frame, methods });
    }
    Ok(EvaluationReport::new(frames))
}

/// Write `report.json` and `frames.tsv` into `dir`.
pub fn write_report(report: &EvaluationReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join(REPORT_FILE);
    fs::write(&json, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(&json, e))?;
    let tsv = dir.join(FRAMES_TSV);
    let f = File::create(&tsv).map_err(|e| Error::io(&tsv, e))?;
    report.write_tsv(BufWriter::new(f))
}

/// Default input paths of `predict` and `evaluate`.
pub fn test_lr_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.paths.dataset_dir.join(TEST_LR_FILE)
}

pub fn test_hr_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.paths.dataset_dir.join(TEST_HR_FILE)
}

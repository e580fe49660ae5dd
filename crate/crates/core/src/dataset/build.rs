//! Dataset construction: HR frames are encoded with per-frame random
//! parameters, downsampled through k-space with noise, cut into patches and
//! rotated. Training patches come from the training sources; validation
//! patches and the full-volume test frames come from the held-out source.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::{Augmentation, AugmentationPolicy};
use super::container::{ContainerHeader, ContainerWriter, VolumeRecord, FORMAT_VERSION};
use super::patch::{
    extract_patches, normalize_pair, require_origins, rotation_variants, PatchOrigin, PatchPair, RawPatch,
    LR_PATCH,
};
use crate::error::{ensure, Error, Result};
use crate::flowfield::{generate_field, frame_times, FlowSpec, FluidMask, VelocityField};
use crate::kspace::{downsample_with_noise, NoiseSpec};
use crate::mrencode::{decode_velocity, encode_phase, from_complex, synth_magnitude, to_complex};
use crate::seed::derive_seed;
use crate::volume::{Grid3, Volume};

pub const TRAIN_FILE: &str = "train.f4d";
pub const VAL_FILE: &str = "val.f4d";
pub const TEST_LR_FILE: &str = "test_lr.f4d";
pub const TEST_HR_FILE: &str = "test_hr.f4d";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Rotation variants stored per patch origin: the original plus nine.
pub const VARIANTS: usize = 10;

/// Fluid intensity written into generated HR frames.
pub const DEFAULT_HR_INTENSITY: f64 = 150.0;

const TAG_TRAIN: u64 = 1;
const TAG_VAL: u64 = 2;
const TAG_TEST: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceRole {
    Train,
    Holdout,
}

/// A ground-truth frame on the HR grid, velocities in cm/s.
#[derive(Clone, Debug)]
pub struct HrFrame {
    pub field: VelocityField,
    pub mask: FluidMask,
}

impl HrFrame {
    pub fn from_record(rec: &VolumeRecord, spacing_mm: [f64; 3]) -> Result<Self> {
        let grid = Grid3::new(rec.dims(), spacing_mm)?;
        Ok(HrFrame {
            field: VelocityField::from_components(grid, rec.velocity.each_ref().map(|v| v.to_f64()))?,
            mask: FluidMask::new(grid, rec.mask.clone())?,
        })
    }

    /// Record with the given magnitude intensity and VENCs as metadata.
    pub fn to_record(&self, intensity: f64, venc: [f64; 3]) -> Result<VolumeRecord> {
        let mag = synth_magnitude(&self.mask, intensity)?;
        Ok(VolumeRecord {
            velocity: self.field.components().map(|v| v.to_f32()),
            magnitude: mag.components().map(|m| m.to_f32()),
            mask: self.mask.inside.clone(),
            venc: venc.map(|v| v as f32),
            fluid_fraction: self.mask.fraction() as f32,
        })
    }
}

/// Smallest admissible VENC per component, used as the nominal encoding of
/// generated ground-truth frames.
pub fn nominal_venc(policy: &AugmentationPolicy, frame_max_speed: [f64; 3]) -> Result<[f64; 3]> {
    let mut out = [0.0; 3];
    for (c, &m) in frame_max_speed.iter().enumerate() {
        out[c] = *policy
            .venc_choices
            .iter()
            .find(|&&v| v > m.abs())
            .ok_or_else(|| Error::Unsatisfiable(format!("component {c} max |v| = {m:.2} cm/s exceeds every VENC")))?;
    }
    Ok(out)
}

/// Lazily evaluated frames of a synthetic flow: the spatial field is built
/// once and scaled per frame.
pub fn synthetic_frames(
    spec: &FlowSpec,
    grid: &Grid3,
    n_frames: usize,
) -> Result<impl Iterator<Item = Result<HrFrame>> + Send + 'static> {
    let times = frame_times(&spec.waveform, n_frames)?;
    let (base, mask) = generate_field(spec, grid)?;
    let waveform = spec.waveform.clone();
    Ok(times.into_iter().map(move |t| {
        Ok(HrFrame {
            field: base.scaled(waveform.value_at(t)?),
            mask: mask.clone(),
        })
    }))
}

/// A simulated low-resolution acquisition of one frame.
#[derive(Clone, Debug)]
pub struct LrFrame {
    /// Decoded velocities in cm/s on the halved grid.
    pub velocity: VelocityField,
    /// Magnitudes of the three velocity encodings.
    pub magnitude: [Volume<f64>; 3],
    pub mask: FluidMask,
    pub augmentation: Augmentation,
}

impl LrFrame {
    pub fn to_record(&self) -> VolumeRecord {
        VolumeRecord {
            velocity: self.velocity.components().map(|v| v.to_f32()),
            magnitude: self.magnitude.each_ref().map(|m| m.to_f32()),
            mask: self.mask.inside.clone(),
            venc: self.augmentation.venc.map(|v| v as f32),
            fluid_fraction: self.mask.fraction() as f32,
        }
    }
}

/// Encode each component as a complex MR signal, downsample it in k-space
/// with noise at the drawn SNR, and decode the LR phase back to velocity.
pub fn simulate_lr(frame: &HrFrame, aug: &Augmentation, noise_seed: u64) -> Result<LrFrame> {
    let grid = frame.field.grid;
    let lr_grid = grid.halved()?;
    let mag = synth_magnitude(&frame.mask, aug.intensity)?;
    let mut vel = Vec::with_capacity(3);
    let mut mags = Vec::with_capacity(3);
    for (c, (v, m)) in frame.field.components().iter().zip(mag.components()).enumerate() {
        let phase = encode_phase(&grid, v, aug.venc[c])?;
        let noise = NoiseSpec {
            target_snr_db: aug.snr_db,
            seed: derive_seed(noise_seed, &[c as u64]),
        };
        let lr = downsample_with_noise(&to_complex(&phase, m)?, &noise)?;
        let (lr_phase, lr_mag) = from_complex(&lr);
        vel.push(decode_velocity(&lr_phase, aug.venc[c])?);
        mags.push(lr_mag);
    }
    let vel: [Volume<f64>; 3] = vel.try_into().expect("three components");
    Ok(LrFrame {
        velocity: VelocityField::from_components(lr_grid, vel)?,
        magnitude: mags.try_into().expect("three components"),
        mask: frame.mask.downsample2()?,
        augmentation: *aug,
    })
}

/// Cut the patch at `origin` from the LR acquisition and the clean HR frame,
/// normalise it and return it with its nine rotations.
pub fn patch_variants(hr: &HrFrame, lr: &LrFrame, origin: &PatchOrigin, size: usize) -> Result<Vec<PatchPair>> {
    let lr_size = [size; 3];
    let hr_size = [2 * size; 3];
    let crop3 = |vols: [&Volume<f64>; 3], o: [usize; 3], s: [usize; 3]| -> Result<[Volume<f64>; 3]> {
        Ok([vols[0].crop(o, s)?, vols[1].crop(o, s)?, vols[2].crop(o, s)?])
    };
    let raw = RawPatch {
        lr_velocity: crop3(lr.velocity.components(), origin.lr, lr_size)?,
        lr_magnitude: crop3(lr.magnitude.each_ref(), origin.lr, lr_size)?,
        hr_velocity: crop3(hr.field.components(), origin.hr(), hr_size)?,
        venc: lr.augmentation.venc,
        fluid_fraction: origin.fluid_fraction,
    };
    rotation_variants(&normalize_pair(&raw)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    pub policy: AugmentationPolicy,
    pub seed: u64,
    pub patches_per_frame: usize,
    pub min_fluid: f64,
    pub patch_size: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            policy: AugmentationPolicy::default(),
            seed: 0,
            patches_per_frame: 10,
            min_fluid: 0.2,
            patch_size: LR_PATCH,
        }
    }
}

impl BuildConfig {
    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        ensure(self.patches_per_frame >= 1, || "patches_per_frame must be >= 1".into())?;
        ensure((0.0..=1.0).contains(&self.min_fluid), || {
            format!("min_fluid {} must lie in [0, 1]", self.min_fluid)
        })?;
        ensure(self.patch_size >= 1, || "patch_size must be >= 1".into())
    }

    fn draw_index(&self, tag: u64, source: usize, frame: usize) -> u64 {
        derive_seed(self.seed, &[tag, source as u64, frame as u64])
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceInfo {
    pub name: String,
    pub role: SourceRole,
    pub n_frames: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Record counts implied by the sources, known before any frame is processed.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPlan {
    pub sources: Vec<SourceInfo>,
    pub patches_per_frame: usize,
}

impl DatasetPlan {
    pub fn new(sources: Vec<SourceInfo>, config: &BuildConfig) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::Config("no sources configured".into()));
        }
        if !sources.iter().any(|s| s.role == SourceRole::Train) {
            return Err(Error::Config("at least one training source is required".into()));
        }
        let holdouts = sources.iter().filter(|s| s.role == SourceRole::Holdout).count();
        if holdouts > 1 {
            return Err(Error::Config(format!("expected at most one holdout source, got {holdouts}")));
        }
        Ok(DatasetPlan {
            sources,
            patches_per_frame: config.patches_per_frame,
        })
    }

    pub fn counts(&self) -> SplitCounts {
        let frames = |role| -> usize {
            self.sources.iter().filter(|s| s.role == role).map(|s| s.n_frames).sum()
        };
        SplitCounts {
            train: frames(SourceRole::Train) * self.patches_per_frame * VARIANTS,
            val: frames(SourceRole::Holdout) * VARIANTS,
            test: frames(SourceRole::Holdout),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub counts: SplitCounts,
    pub sources: Vec<SourceInfo>,
    pub policy: AugmentationPolicy,
    /// Split name to file name, relative to the manifest.
    pub files: BTreeMap<String, String>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// A source to build from: its description and its HR frames in order.
pub struct SourceInput {
    pub info: SourceInfo,
    pub frames: Box<dyn Iterator<Item = Result<HrFrame>> + Send>,
}

/// The four output containers.
pub struct DatasetSinks<W: Write> {
    pub train: ContainerWriter<W>,
    pub val: ContainerWriter<W>,
    pub test_lr: ContainerWriter<W>,
    pub test_hr: ContainerWriter<W>,
}

/// Container headers for a plan, given the HR grid shared by all sources.
pub fn split_headers(plan: &DatasetPlan, config: &BuildConfig, hr_grid: &Grid3) -> Result<[ContainerHeader; 4]> {
    let counts = plan.counts();
    let lr_grid = hr_grid.halved()?;
    let with_meta = |mut h: ContainerHeader, role: SourceRole| {
        h.policy = Some(config.policy.clone());
        h.sources = plan
            .sources
            .iter()
            .filter(|s| s.role == role)
            .map(|s| s.name.clone())
            .collect();
        h
    };
    let p = [config.patch_size; 3];
    Ok([
        with_meta(
            ContainerHeader::patches(p, hr_grid.spacing, "train", counts.train, config.seed),
            SourceRole::Train,
        ),
        with_meta(
            ContainerHeader::patches(p, hr_grid.spacing, "val", counts.val, config.seed),
            SourceRole::Holdout,
        ),
        with_meta(
            ContainerHeader::volumes(lr_grid.dims, lr_grid.spacing, "test_lr", counts.test, config.seed),
            SourceRole::Holdout,
        ),
        with_meta(
            ContainerHeader::volumes(hr_grid.dims, hr_grid.spacing, "test_hr", counts.test, config.seed),
            SourceRole::Holdout,
        ),
    ])
}

enum FrameOutput {
    Train(Vec<PatchPair>),
    Holdout {
        val: Vec<PatchPair>,
        lr: VolumeRecord,
        hr: VolumeRecord,
    },
}

fn process_frame(config: &BuildConfig, source: usize, info: &SourceInfo, index: usize, hr: &HrFrame) -> Result<FrameOutput> {
    let label = format!("{}#{index}", info.name);
    let max = hr.field.max_abs_components();
    match info.role {
        SourceRole::Train => {
            let draw = config.draw_index(TAG_TRAIN, source, index);
            let aug = config.policy.sample(max, draw)?;
            let lr = simulate_lr(hr, &aug, derive_seed(draw, &[0]))?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(draw, &[1]));
            let draws = extract_patches(&lr.mask, config.patches_per_frame, config.min_fluid, config.patch_size, &mut rng)?;
            let origins = require_origins(draws, &label)?;
            let mut out = Vec::with_capacity(origins.len() * VARIANTS);
            for o in &origins {
                out.extend(patch_variants(hr, &lr, o, config.patch_size)?);
            }
            Ok(FrameOutput::Train(out))
        }
        SourceRole::Holdout => {
            let draw = config.draw_index(TAG_VAL, source, index);
            let aug = config.policy.sample(max, draw)?;
            let lr = simulate_lr(hr, &aug, derive_seed(draw, &[0]))?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(draw, &[1]));
            // Two draws so the first is the fluid-constrained one.
            let draws = extract_patches(&lr.mask, 2, config.min_fluid, config.patch_size, &mut rng)?;
            let origin = require_origins(draws, &label)?[0];
            let val = patch_variants(hr, &lr, &origin, config.patch_size)?;

            let draw = config.draw_index(TAG_TEST, source, index);
            let aug = config.policy.sample(max, draw)?;
            let test = simulate_lr(hr, &aug, derive_seed(draw, &[0]))?;
            Ok(FrameOutput::Holdout {
                val,
                lr: test.to_record(),
                hr: hr.to_record(aug.intensity, aug.venc)?,
            })
        }
    }
}

/// Build every split into `sinks`. Frames are pulled in chunks and processed
/// in parallel; records are written in frame order so output is independent
/// of the thread count.
pub fn build_into<W: Write>(
    config: &BuildConfig,
    sources: Vec<SourceInput>,
    sinks: &mut DatasetSinks<W>,
) -> Result<DatasetManifest> {
    config.validate()?;
    let plan = DatasetPlan::new(sources.iter().map(|s| s.info.clone()).collect(), config)?;
    let chunk = rayon::current_num_threads().max(1) * 2;
    for (si, mut src) in sources.into_iter().enumerate() {
        let mut index = 0;
        loop {
            let batch: Vec<HrFrame> = src.frames.by_ref().take(chunk).collect::<Result<_>>()?;
            if batch.is_empty() {
                break;
            }
            let info = &src.info;
            let outputs: Vec<FrameOutput> = batch
                .par_iter()
                .enumerate()
                .map(|(k, hr)| process_frame(config, si, info, index + k, hr))
                .collect::<Result<_>>()?;
            for out in outputs {
                match out {
                    FrameOutput::Train(patches) => {
                        for p in &patches {
                            sinks.train.write_patch(p)?;
                        }
                    }
                    FrameOutput::Holdout { val, lr, hr } => {
                        for p in &val {
                            sinks.val.write_patch(p)?;
                        }
                        sinks.test_lr.write_volume(&lr)?;
                        sinks.test_hr.write_volume(&hr)?;
                    }
                }
            }
            index += batch.len();
            log::info!("{}: {index} frames processed", src.info.name);
        }
        ensure(index == src.info.n_frames, || {
            format!("source {} declared {} frames but yielded {index}", src.info.name, src.info.n_frames)
        })?;
    }
    let files = [
        ("train", TRAIN_FILE),
        ("val", VAL_FILE),
        ("test_lr", TEST_LR_FILE),
        ("test_hr", TEST_HR_FILE),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    Ok(DatasetManifest {
        format_version: FORMAT_VERSION,
        seed: config.seed,
        counts: plan.counts(),
        sources: plan.sources,
        policy: config.policy.clone(),
        files,
    })
}

/// Build into `out_dir`, writing the four containers and `manifest.json`.
pub fn build_dataset(
    config: &BuildConfig,
    hr_grid: &Grid3,
    sources: Vec<SourceInput>,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    config.validate()?;
    let plan = DatasetPlan::new(sources.iter().map(|s| s.info.clone()).collect(), config)?;
    let [h_train, h_val, h_lr, h_hr] = split_headers(&plan, config, hr_grid)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut sinks = DatasetSinks {
        train: ContainerWriter::create(&out_dir.join(TRAIN_FILE), h_train)?,
        val: ContainerWriter::create(&out_dir.join(VAL_FILE), h_val)?,
        test_lr: ContainerWriter::create(&out_dir.join(TEST_LR_FILE), h_lr)?,
        test_hr: ContainerWriter::create(&out_dir.join(TEST_HR_FILE), h_hr)?,
    };
    let manifest = build_into(config, sources, &mut sinks)?;
    sinks.train.finish()?;
    sinks.val.finish()?;
    sinks.test_lr.finish()?;
    sinks.test_hr.finish()?;
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowfield::Waveform;
    use crate::volume::Axis;
    use std::io;

    fn grid() -> Grid3 {
        Grid3::isotropic([32, 32, 32], 0.594).unwrap()
    }

    fn spec() -> FlowSpec {
        FlowSpec::poiseuille(Axis::Z, 7.0, 80.0).with_waveform(Waveform::constant(1.0))
    }

    fn source(name: &str, role: SourceRole, n: usize) -> SourceInput {
        SourceInput {
            info: SourceInfo {
                name: name.into(),
                role,
                n_frames: n,
            },
            frames: Box::new(synthetic_frames(&spec(), &grid(), n).unwrap()),
        }
    }

    fn sinks(plan: &DatasetPlan, config: &BuildConfig) -> DatasetSinks<Vec<u8>> {
        let [a, b, c, d] = split_headers(plan, config, &grid()).unwrap();
        DatasetSinks {
            train: ContainerWriter::new(Vec::new(), a).unwrap(),
            val: ContainerWriter::new(Vec::new(), b).unwrap(),
            test_lr: ContainerWriter::new(Vec::new(), c).unwrap(),
            test_hr: ContainerWriter::new(Vec::new(), d).unwrap(),
        }
    }

    fn build(seed: u64) -> (DatasetManifest, Vec<Vec<u8>>) {
        let config = BuildConfig { seed, ..Default::default() };
        let srcs = vec![source("a", SourceRole::Train, 2), source("h", SourceRole::Holdout, 2)];
        let plan = DatasetPlan::new(srcs.iter().map(|s| s.info.clone()).collect(), &config).unwrap();
        let mut s = sinks(&plan, &config);
        let m = build_into(&config, srcs, &mut s).unwrap();
        let bytes = vec![
            s.train.finish().unwrap(),
            s.val.finish().unwrap(),
            s.test_lr.finish().unwrap(),
            s.test_hr.finish().unwrap(),
        ];
        (m, bytes)
    }

    #[test]
    fn small_build_counts_and_determinism() {
        let (m, bytes) = build(5);
        assert_eq!(m.counts, SplitCounts { train: 200, val: 20, test: 2 });
        let (_, again) = build(5);
        assert_eq!(bytes, again);
        let (_, other) = build(6);
        assert_ne!(bytes[0], other[0]);
    }

    #[test]
    fn plan_rejects_bad_source_lists() {
        let c = BuildConfig::default();
        assert!(matches!(DatasetPlan::new(vec![], &c), Err(Error::Config(_))));
        let holdout_only = vec![SourceInfo {
            name: "h".into(),
            role: SourceRole::Holdout,
            n_frames: 3,
        }];
        assert!(DatasetPlan::new(holdout_only, &c).is_err());
    }

    #[test]
    fn lr_simulation_is_close_to_truth_at_high_snr() {
        let hr = synthetic_frames(&spec(), &grid(), 1).unwrap().next().unwrap().unwrap();
        let aug = Augmentation {
            venc: [100.0; 3],
            intensity: 200.0,
            snr_db: 60.0,
        };
        let lr = simulate_lr(&hr, &aug, 1).unwrap();
        assert_eq!(lr.velocity.grid.dims, [16; 3]);
        // Deep inside the tube the LR axial speed matches the smooth profile.
        let v = lr.velocity.vz.get(8, 8, 8);
        assert!(v > 60.0 && v <= 80.5, "{v}");
    }

    #[test]
    fn sink_accepts_streamed_records() {
        let config = BuildConfig::default();
        let srcs = vec![source("a", SourceRole::Train, 1)];
        let plan = DatasetPlan::new(srcs.iter().map(|s| s.info.clone()).collect(), &config).unwrap();
        let [a, b, c, d] = split_headers(&plan, &config, &grid()).unwrap();
        let mut s = DatasetSinks {
            train: ContainerWriter::new(io::sink(), a).unwrap(),
            val: ContainerWriter::new(io::sink(), b).unwrap(),
            test_lr: ContainerWriter::new(io::sink(), c).unwrap(),
            test_hr: ContainerWriter::new(io::sink(), d).unwrap(),
        };
        let m = build_into(&config, srcs, &mut s).unwrap();
        assert_eq!(m.counts.train, 100);
        s.train.finish().unwrap();
    }
}

//! Training loops and checkpoints: the alternating VAE-GAN + motor
//! optimisation, the motor-only fine-tune pass, and the no-attention
//! baseline (as a single policy or one policy per task/object cell).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::dataset::splitmix;
use crate::corpus::{iterate, DatasetHandle, Split};
use crate::motor::{mdn_nll, Motor, MotorConfig, MotorError, MotorState};
use crate::nn::{Adam, Binding, Graph, GradBuffer, NodeId, ParamSet, Tensor};
use crate::sim::types::Verb;
use crate::teacher::AttnCache;
use crate::vision::{
    class_nll_node, cycle_node, fake_mass_node, feature_match_node, gaussian_kl_node, mse_node,
    PlainVae, Vision, VisionConfig, VisionError,
};

pub const CKPT_MAGIC: &[u8; 4] = b"TFAC";
pub const CKPT_SCHEMA: &str = "tfa-checkpoint";
pub const CKPT_VERSION: u32 = 1;

// Seed stream tags: initialization, batch order, frame/window picks,
// sampling noise, validation subsets.
const TAG_VISION_INIT: u64 = 0x7a11;
const TAG_MOTOR_INIT: u64 = 0x7a12;
const TAG_ORDER: u64 = 0x7a21;
const TAG_PLAN: u64 = 0x7a22;
const TAG_NOISE: u64 = 0x7a23;
const TAG_VAL: u64 = 0x7a24;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("vision: {0}")]
    Vision(#[from] VisionError),
    #[error("motor: {0}")]
    Motor(#[from] MotorError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
        /// Parameter state at the point of failure, for post-mortems.
        checkpoint: Box<Checkpoint>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    TfaFull,
    BaselineNoTfa,
}

impl ModelVariant {
    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::TfaFull => "tfa_full",
            ModelVariant::BaselineNoTfa => "baseline_no_tfa",
        }
    }
}

/// One weight per loss term. The discriminator optimises
/// real + fake + noise; the encoder/generator side optimises
/// prior + adversarial + feature + reconstruction (+ cycle), and the motor
/// term rides on the same step so its gradient reaches the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub real: f64,
    pub fake: f64,
    pub noise: f64,
    pub prior: f64,
    pub adversarial: f64,
    pub feature: f64,
    pub reconstruction: f64,
    pub cycle: f64,
    pub motor: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            real: 1.0,
            fake: 1.0,
            noise: 1.0,
            prior: 1.0,
            adversarial: 1.0,
            feature: 1.0,
            reconstruction: 1.0,
            cycle: 0.0,
            motor: 1.0,
        }
    }
}

impl LossWeights {
    fn validate(&self) -> Result<(), TrainError> {
        let all = [
            ("real", self.real),
            ("fake", self.fake),
            ("noise", self.noise),
            ("prior", self.prior),
            ("adversarial", self.adversarial),
            ("feature", self.feature),
            ("reconstruction", self.reconstruction),
            ("cycle", self.cycle),
            ("motor", self.motor),
        ];
        for (name, w) in all {
            if !w.is_finite() || w < 0.0 {
                return Err(TrainError::Config(format!(
                    "loss weight {name} must be finite and >= 0, got {w}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: ModelVariant,
    pub epochs: usize,
    /// Demonstrations per batch.
    pub batch_size: usize,
    /// Frames sampled per demo per batch for the image-side losses.
    pub frames_per_demo: usize,
    /// Length of the contiguous window per demo on which the motor loss is
    /// unrolled (capped by the shortest demo in the batch).
    pub motor_window: usize,
    pub lr: f64,
    /// Global-norm gradient clip per parameter set; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
    #[serde(default)]
    pub weights: LossWeights,
    pub vision: VisionConfig,
    pub motor: MotorConfig,
    /// Fixed validation subsample sizes (frames for L_rec, demos for L_motor).
    #[serde(default = "default_val_frames")]
    pub val_frames: usize,
    #[serde(default = "default_val_demos")]
    pub val_demos: usize,
}

fn default_val_frames() -> usize {
    64
}

fn default_val_demos() -> usize {
    4
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: ModelVariant::TfaFull,
            epochs: 10,
            batch_size: 4,
            frames_per_demo: 4,
            motor_window: 32,
            lr: 1e-3,
            grad_clip: 5.0,
            seed: 0,
            weights: LossWeights::default(),
            vision: VisionConfig::default(),
            motor: MotorConfig::default(),
            val_frames: default_val_frames(),
            val_demos: default_val_demos(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if self.frames_per_demo == 0 {
            return Err(TrainError::Config("frames_per_demo must be positive".into()));
        }
        if self.motor_window == 0 {
            return Err(TrainError::Config("motor_window must be positive".into()));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(TrainError::Config(format!("lr must be finite and positive, got {}", self.lr)));
        }
        if !self.grad_clip.is_finite() || self.grad_clip < 0.0 {
            return Err(TrainError::Config(format!(
                "grad_clip must be finite and >= 0, got {}",
                self.grad_clip
            )));
        }
        self.weights.validate()?;
        self.vision.validate()?;
        if self.vision.d_z != self.motor.d_z {
            return Err(TrainError::Config(format!(
                "vision d_z {} and motor d_z {} disagree",
                self.vision.d_z, self.motor.d_z
            )));
        }
        Ok(())
    }
}

/// Per-batch loss record. `overall` is the value of the combined graph
/// objectives; it must equal the weighted sum of the components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub epoch: usize,
    pub step: usize,
    pub d_real: f64,
    pub d_fake: f64,
    pub d_noise: f64,
    pub d_total: f64,
    pub prior: f64,
    pub adversarial: f64,
    pub feature: f64,
    pub reconstruction: f64,
    pub cycle: f64,
    pub motor: f64,
    pub overall: f64,
}

impl StepLosses {
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        w.real * self.d_real
            + w.fake * self.d_fake
            + w.noise * self.d_noise
            + w.prior * self.prior
            + w.adversarial * self.adversarial
            + w.feature * self.feature
            + w.reconstruction * self.reconstruction
            + w.cycle * self.cycle
            + w.motor * self.motor
    }

    fn all_finite(&self) -> bool {
        [
            self.d_real,
            self.d_fake,
            self.d_noise,
            self.d_total,
            self.prior,
            self.adversarial,
            self.feature,
            self.reconstruction,
            self.cycle,
            self.motor,
            self.overall,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Per-epoch summary: batch means plus fixed-subsample validation metrics.
/// Row 0 records the validation metrics at initialization (train fields 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub d_real: f64,
    pub d_fake: f64,
    pub d_noise: f64,
    pub prior: f64,
    pub adversarial: f64,
    pub feature: f64,
    pub reconstruction: f64,
    pub cycle: f64,
    pub motor: f64,
    pub overall: f64,
    pub val_reconstruction: Option<f64>,
    pub val_motor: Option<f64>,
}

impl EpochLosses {
    fn init_row(val_rec: Option<f64>, val_motor: Option<f64>) -> Self {
        EpochLosses {
            epoch: 0,
            d_real: 0.0,
            d_fake: 0.0,
            d_noise: 0.0,
            prior: 0.0,
            adversarial: 0.0,
            feature: 0.0,
            reconstruction: 0.0,
            cycle: 0.0,
            motor: 0.0,
            overall: 0.0,
            val_reconstruction: val_rec,
            val_motor,
        }
    }

    fn from_steps(
        epoch: usize,
        steps: &[StepLosses],
        val_rec: Option<f64>,
        val_motor: Option<f64>,
    ) -> Self {
        let n = steps.len().max(1) as f64;
        let mean = |f: fn(&StepLosses) -> f64| steps.iter().map(f).sum::<f64>() / n;
        EpochLosses {
            epoch,
            d_real: mean(|s| s.d_real),
            d_fake: mean(|s| s.d_fake),
            d_noise: mean(|s| s.d_noise),
            prior: mean(|s| s.prior),
            adversarial: mean(|s| s.adversarial),
            feature: mean(|s| s.feature),
            reconstruction: mean(|s| s.reconstruction),
            cycle: mean(|s| s.cycle),
            motor: mean(|s| s.motor),
            overall: mean(|s| s.overall),
            val_reconstruction: val_rec,
            val_motor,
        }
    }
}

/// The demo indices, sampled frames, and window starts a batch consumed, in
/// order. Identical across model variants run with the same seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchTrace {
    pub demos: Vec<usize>,
    pub frames: Vec<usize>,
    pub windows: Vec<usize>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub steps: Vec<StepLosses>,
    pub epochs: Vec<EpochLosses>,
    pub trace: Vec<BatchTrace>,
}

/// One task/object cell: the unit at which separate baseline policies are
/// trained, since the baseline has no task conditioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub verb: Verb,
    pub shape_id: usize,
    pub color_id: usize,
}

impl CellKey {
    pub fn label(&self) -> String {
        format!("{}_{}_{}", self.verb.name(), self.shape_id, self.color_id)
    }
}

pub struct CellOutcome {
    pub key: CellKey,
    pub steps: Vec<StepLosses>,
    pub epochs: Vec<EpochLosses>,
}

pub struct BaselineCellsOutcome {
    pub checkpoint: Checkpoint,
    pub cells: Vec<CellOutcome>,
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlob {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSection {
    pub name: String,
    pub params: Vec<ParamBlob>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema: String,
    pub version: u32,
    pub variant: ModelVariant,
    pub epoch: usize,
    pub config: TrainConfig,
    /// Task/object cells for a per-cell baseline checkpoint; empty otherwise.
    pub cells: Vec<CellKey>,
    pub loss_history: Vec<EpochLosses>,
    /// Per-cell loss histories, parallel to `cells`.
    pub cell_histories: Vec<Vec<EpochLosses>>,
}

/// Single-file archive of every parameter set plus the run metadata,
/// guarded by a trailing content digest.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub sections: Vec<ParamSection>,
}

fn section_from(name: &str, ps: &ParamSet) -> ParamSection {
    ParamSection {
        name: name.to_string(),
        params: ps
            .iter()
            .map(|(_, p)| ParamBlob {
                name: p.name.clone(),
                dims: p.value.shape().to_vec(),
                data: p.value.data().to_vec(),
            })
            .collect(),
    }
}

fn apply_section(sec: &ParamSection, ps: &mut ParamSet) -> Result<(), TrainError> {
    if sec.params.len() != ps.len() {
        return Err(TrainError::Checkpoint(format!(
            "section {}: {} stored parameters but the net has {}",
            sec.name,
            sec.params.len(),
            ps.len()
        )));
    }
    for blob in &sec.params {
        let id = ps.by_name(&blob.name).ok_or_else(|| {
            TrainError::Checkpoint(format!("section {}: unknown parameter {}", sec.name, blob.name))
        })?;
        let t = ps.get_mut(id);
        if t.shape() != blob.dims.as_slice() {
            return Err(TrainError::Checkpoint(format!(
                "section {}: parameter {} has shape {:?}, checkpoint stores {:?}",
                sec.name,
                blob.name,
                t.shape(),
                blob.dims
            )));
        }
        t.data_mut().copy_from_slice(&blob.data);
    }
    Ok(())
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_str(out: &mut Vec<u8>, s: &str) {
    push_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.pos + n > self.buf.len() {
            return Err(TrainError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, TrainError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| TrainError::Checkpoint("invalid utf-8 in checkpoint".into()))
    }
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        let meta = serde_json::to_vec(&self.meta).expect("checkpoint meta serializes");
        push_u32(&mut out, meta.len() as u32);
        out.extend_from_slice(&meta);
        push_u32(&mut out, self.sections.len() as u32);
        for sec in &self.sections {
            push_str(&mut out, &sec.name);
            push_u32(&mut out, sec.params.len() as u32);
            for p in &sec.params {
                push_str(&mut out, &p.name);
                push_u32(&mut out, p.dims.len() as u32);
                for &d in &p.dims {
                    push_u32(&mut out, d as u32);
                }
                for &v in &p.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, TrainError> {
        if bytes.len() < CKPT_MAGIC.len() + 32 {
            return Err(TrainError::Checkpoint("file too short for a checkpoint".into()));
        }
        let (payload, stored) = bytes.split_at(bytes.len() - 32);
        let digest = Sha256::digest(payload);
        if digest.as_slice() != stored {
            return Err(TrainError::Checkpoint("content checksum mismatch".into()));
        }
        let mut r = Reader { buf: payload, pos: 0 };
        if r.take(4)? != CKPT_MAGIC {
            return Err(TrainError::Checkpoint("bad magic".into()));
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| TrainError::Checkpoint(format!("meta: {e}")))?;
        if meta.schema != CKPT_SCHEMA {
            return Err(TrainError::Checkpoint(format!("unknown schema {:?}", meta.schema)));
        }
        if meta.version != CKPT_VERSION {
            return Err(TrainError::Checkpoint(format!(
                "unsupported version {} (expected {CKPT_VERSION})",
                meta.version
            )));
        }
        let n_sections = r.u32()? as usize;
        let mut sections = Vec::with_capacity(n_sections);
        for _ in 0..n_sections {
            let name = r.string()?;
            let n_params = r.u32()? as usize;
            let mut params = Vec::with_capacity(n_params);
            for _ in 0..n_params {
                let pname = r.string()?;
                let ndim = r.u32()? as usize;
                let mut dims = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    dims.push(r.u32()? as usize);
                }
                let numel: usize = dims.iter().product();
                let raw = r.take(numel * 8)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                params.push(ParamBlob { name: pname, dims, data });
            }
            sections.push(ParamSection { name, params });
        }
        if r.pos != payload.len() {
            return Err(TrainError::Checkpoint("trailing bytes in checkpoint".into()));
        }
        Ok(Checkpoint { meta, sections })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, TrainError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Hex digest of the serialized payload (the same value stored in the
    /// file trailer).
    pub fn checksum_hex(&self) -> String {
        let bytes = self.to_bytes();
        hex(&bytes[bytes.len() - 32..])
    }

    fn section(&self, name: &str) -> Result<&ParamSection, TrainError> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| TrainError::Checkpoint(format!("missing section {name}")))
    }

    /// Rebuild the trained nets this checkpoint stores.
    pub fn build(&self) -> Result<PolicyBundle, TrainError> {
        let cfg = &self.meta.config;
        match self.meta.variant {
            ModelVariant::TfaFull => {
                let mut vision = Vision::new(cfg.vision.clone(), 0)?;
                apply_section(self.section("enc")?, &mut vision.enc)?;
                apply_section(self.section("gen")?, &mut vision.gen)?;
                apply_section(self.section("disc")?, &mut vision.disc)?;
                let mut motor = Motor::new(cfg.motor.clone(), 0)?;
                apply_section(self.section("motor")?, &mut motor.ps)?;
                Ok(PolicyBundle::Tfa { vision, motor })
            }
            ModelVariant::BaselineNoTfa => {
                let mut cells = Vec::new();
                if self.meta.cells.is_empty() {
                    let mut vae = PlainVae::new(cfg.vision.clone(), 0)?;
                    apply_section(self.section("enc")?, &mut vae.enc)?;
                    apply_section(self.section("gen")?, &mut vae.gen)?;
                    let mut motor = Motor::new(cfg.motor.clone(), 0)?;
                    apply_section(self.section("motor")?, &mut motor.ps)?;
                    cells.push((None, BaselinePolicy { vae, motor }));
                } else {
                    for (i, key) in self.meta.cells.iter().enumerate() {
                        let mut vae = PlainVae::new(cfg.vision.clone(), 0)?;
                        apply_section(self.section(&format!("cell{i}.enc"))?, &mut vae.enc)?;
                        apply_section(self.section(&format!("cell{i}.gen"))?, &mut vae.gen)?;
                        let mut motor = Motor::new(cfg.motor.clone(), 0)?;
                        apply_section(self.section(&format!("cell{i}.motor"))?, &mut motor.ps)?;
                        cells.push((Some(*key), BaselinePolicy { vae, motor }));
                    }
                }
                Ok(PolicyBundle::Baseline { cells })
            }
        }
    }
}

pub struct BaselinePolicy {
    pub vae: PlainVae,
    pub motor: Motor,
}

pub enum PolicyBundle {
    Tfa { vision: Vision, motor: Motor },
    Baseline { cells: Vec<(Option<CellKey>, BaselinePolicy)> },
}

impl PolicyBundle {
    /// Resolve the baseline policy for a cell: an exact match, else the
    /// single unkeyed policy if that is all the checkpoint holds.
    pub fn baseline_policy(&self, key: &CellKey) -> Option<&BaselinePolicy> {
        match self {
            PolicyBundle::Tfa { .. } => None,
            PolicyBundle::Baseline { cells } => cells
                .iter()
                .find(|(k, _)| k.as_ref() == Some(key))
                .or_else(|| cells.iter().find(|(k, _)| k.is_none()))
                .map(|(_, p)| p),
        }
    }
}

fn tfa_checkpoint(
    cfg: &TrainConfig,
    epoch: usize,
    history: &[EpochLosses],
    vision: &Vision,
    motor: &Motor,
) -> Checkpoint {
    Checkpoint {
        meta: CheckpointMeta {
            schema: CKPT_SCHEMA.into(),
            version: CKPT_VERSION,
            variant: ModelVariant::TfaFull,
            epoch,
            config: cfg.clone(),
            cells: vec![],
            loss_history: history.to_vec(),
            cell_histories: vec![],
        },
        sections: vec![
            section_from("enc", &vision.enc),
            section_from("gen", &vision.gen),
            section_from("disc", &vision.disc),
            section_from("motor", &motor.ps),
        ],
    }
}

fn baseline_checkpoint(
    cfg: &TrainConfig,
    epoch: usize,
    history: &[EpochLosses],
    vae: &PlainVae,
    motor: &Motor,
) -> Checkpoint {
    Checkpoint {
        meta: CheckpointMeta {
            schema: CKPT_SCHEMA.into(),
            version: CKPT_VERSION,
            variant: ModelVariant::BaselineNoTfa,
            epoch,
            config: cfg.clone(),
            cells: vec![],
            loss_history: history.to_vec(),
            cell_histories: vec![],
        },
        sections: vec![
            section_from("enc", &vae.enc),
            section_from("gen", &vae.gen),
            section_from("motor", &motor.ps),
        ],
    }
}

// ---------------------------------------------------------------------------
// Shared batch plumbing
// ---------------------------------------------------------------------------

fn stream_seed(seed: u64, tag: u64, epoch: usize) -> u64 {
    splitmix(splitmix(seed ^ tag) ^ epoch as u64)
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn clip_grads(buf: &mut GradBuffer, clip: f64) {
    if clip > 0.0 {
        let norm = buf.global_norm();
        if norm > clip {
            buf.scale(clip / norm);
        }
    }
}

/// Frames and the motor window each demo contributes to one batch.
struct BatchPlan {
    /// (demo index, frame) pairs for the image-side losses.
    picks: Vec<(usize, usize)>,
    /// (demo index, window start) pairs for the motor loss.
    windows: Vec<(usize, usize)>,
    /// Window length, shared across the batch.
    w: usize,
}

fn sample_plan(
    rng: &mut ChaCha8Rng,
    handle: &DatasetHandle,
    demos: &[usize],
    cfg: &TrainConfig,
) -> BatchPlan {
    let w = demos
        .iter()
        .map(|&i| handle.demos[i].len() - 1)
        .min()
        .unwrap_or(1)
        .min(cfg.motor_window);
    let mut picks = Vec::with_capacity(demos.len() * cfg.frames_per_demo);
    for &i in demos {
        let len = handle.demos[i].len();
        for _ in 0..cfg.frames_per_demo {
            picks.push((i, rng.gen_range(0..len)));
        }
    }
    let mut windows = Vec::with_capacity(demos.len());
    for &i in demos {
        let hi = handle.demos[i].len() - 1 - w;
        windows.push((i, rng.gen_range(0..=hi)));
    }
    BatchPlan { picks, windows, w }
}

fn trace_of(demos: &[usize], plan: &BatchPlan) -> BatchTrace {
    BatchTrace {
        demos: demos.to_vec(),
        frames: plan.picks.iter().map(|&(_, t)| t).collect(),
        windows: plan.windows.iter().map(|&(_, st)| st).collect(),
    }
}

/// Shuffled demo-index batches for one epoch; mirrors the dataset iterator's
/// seeding so full-split runs and cell-subset runs use the same protocol.
fn subset_batches(indices: &[usize], batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx = indices.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn full_split_batches(handle: &DatasetHandle, cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    iterate(handle, Split::Train, cfg.batch_size, stream_seed(cfg.seed, TAG_ORDER, epoch))
        .iter()
        .map(|b| b.demos.iter().map(|(i, _)| *i).collect())
        .collect()
}

struct VisFrames {
    x: Vec<f64>,
    maps: Vec<f64>,
    shapes: Vec<usize>,
    colors: Vec<usize>,
    n: usize,
}

fn assemble_vis(
    handle: &DatasetHandle,
    attn: Option<&AttnCache>,
    picks: &[(usize, usize)],
) -> VisFrames {
    let mut out = VisFrames {
        x: Vec::new(),
        maps: Vec::new(),
        shapes: Vec::with_capacity(picks.len()),
        colors: Vec::with_capacity(picks.len()),
        n: picks.len(),
    };
    for &(di, t) in picks {
        let d = &handle.demos[di];
        out.x.extend(d.frame_f64(t));
        if let Some(a) = attn {
            out.maps.extend_from_slice(&a.demos[di].p[t]);
        }
        out.shapes.push(d.command.shape_id);
        out.colors.push(d.command.color_id);
    }
    out
}

/// Time-major motor window batch: row t*B + b is demo b at window step t.
struct MotorSeq {
    x: Vec<f64>,
    shapes: Vec<usize>,
    colors: Vec<usize>,
    /// One [B, n_joints] target per window step.
    targets: Vec<Tensor>,
    w: usize,
    b: usize,
}

fn assemble_motor(handle: &DatasetHandle, windows: &[(usize, usize)], w: usize) -> MotorSeq {
    let b = windows.len();
    let jd = handle.joint_dim;
    let mut x = Vec::new();
    let mut shapes = Vec::with_capacity(w * b);
    let mut colors = Vec::with_capacity(w * b);
    for t in 0..w {
        for &(di, st) in windows {
            let d = &handle.demos[di];
            x.extend(d.frame_f64(st + t));
            shapes.push(d.command.shape_id);
            colors.push(d.command.color_id);
        }
    }
    let targets = (0..w)
        .map(|t| {
            let mut buf = Vec::with_capacity(b * jd);
            for &(di, st) in windows {
                buf.extend_from_slice(&handle.demos[di].joints[st + t + 1]);
            }
            Tensor::from_vec(&[b, jd], buf)
        })
        .collect();
    MotorSeq { x, shapes, colors, targets, w, b }
}

/// z_t rows for a time-major latent batch [W*B, d]: block t is rows
/// t*B..(t+1)*B, extracted through a flat view.
fn latent_steps(g: &mut Graph, z_all: NodeId, w: usize, b: usize, d: usize) -> Vec<NodeId> {
    let flat = g.reshape(z_all, &[1, w * b * d]);
    (0..w)
        .map(|t| {
            let sl = g.slice_cols(flat, t * b * d, (t + 1) * b * d);
            g.reshape(sl, &[b, d])
        })
        .collect()
}

fn params_finite(sets: &[&ParamSet]) -> bool {
    sets.iter().all(|ps| ps.iter().all(|(_, p)| p.value.is_finite()))
}

/// Fixed validation subsample, chosen once per run so epoch metrics are
/// comparable.
struct ValPlan {
    rec: Vec<(usize, usize)>,
    motor_demos: Vec<usize>,
}

fn make_val_plan(handle: &DatasetHandle, indices: &[usize], cfg: &TrainConfig) -> ValPlan {
    let val: Vec<usize> = indices
        .iter()
        .copied()
        .filter(|&i| handle.demos[i].split == Split::Val)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ TAG_VAL));
    let mut rec: Vec<(usize, usize)> = val
        .iter()
        .flat_map(|&i| (0..handle.demos[i].len()).map(move |t| (i, t)))
        .collect();
    rec.shuffle(&mut rng);
    rec.truncate(cfg.val_frames);
    let mut motor_demos = val;
    motor_demos.shuffle(&mut rng);
    motor_demos.truncate(cfg.val_demos);
    ValPlan { rec, motor_demos }
}

/// Encoder means for every frame of a demo, flattened to [T * d_z].
fn demo_means(
    handle: &DatasetHandle,
    di: usize,
    encode: &mut dyn FnMut(&[f64], usize, &[usize], &[usize]) -> Vec<f64>,
) -> Vec<f64> {
    let d = &handle.demos[di];
    let t_n = d.len();
    let mut x = Vec::new();
    for t in 0..t_n {
        x.extend(d.frame_f64(t));
    }
    let shapes = vec![d.command.shape_id; t_n];
    let colors = vec![d.command.color_id; t_n];
    encode(&x, t_n, &shapes, &colors)
}

fn motor_val_nll(
    handle: &DatasetHandle,
    motor: &Motor,
    plan: &ValPlan,
    encode: &mut dyn FnMut(&[f64], usize, &[usize], &[usize]) -> Vec<f64>,
) -> Result<Option<f64>, TrainError> {
    if plan.motor_demos.is_empty() {
        return Ok(None);
    }
    let dz = motor.config.d_z;
    let mut total = 0.0;
    let mut count = 0usize;
    for &di in &plan.motor_demos {
        let d = &handle.demos[di];
        let mus = demo_means(handle, di, encode);
        let steps = d.len() - 1;
        let mut state = MotorState::zeros(&motor.config);
        let params = motor.motor_forward(&mus[..steps * dz], &mut state)?;
        for (t, p) in params.iter().enumerate() {
            total += mdn_nll(p, &d.joints[t + 1])?;
            count += 1;
        }
    }
    Ok(Some(total / count.max(1) as f64))
}

// ---------------------------------------------------------------------------
// TFA training
// ---------------------------------------------------------------------------

struct TfaOpt {
    e: Adam,
    g: Adam,
    d: Adam,
    m: Adam,
}

fn validate_common(handle: &DatasetHandle, cfg: &TrainConfig) -> Result<(), TrainError> {
    cfg.validate()?;
    if handle.image_size != cfg.vision.image_size {
        return Err(TrainError::Config(format!(
            "dataset images are {}px but the vision net expects {}px",
            handle.image_size, cfg.vision.image_size
        )));
    }
    if handle.joint_dim != cfg.motor.n_joints {
        return Err(TrainError::Config(format!(
            "dataset joint dim {} but the motor net outputs {}",
            handle.joint_dim, cfg.motor.n_joints
        )));
    }
    for (i, d) in handle.demos.iter().enumerate() {
        if d.len() < 2 {
            return Err(TrainError::Data(format!(
                "demo {i} has {} frames; need at least 2 for next-step targets",
                d.len()
            )));
        }
        if d.joints.len() != d.len() {
            return Err(TrainError::Data(format!("demo {i}: joints and frames disagree")));
        }
    }
    Ok(())
}

fn validate_tfa(handle: &DatasetHandle, maps: &AttnCache, cfg: &TrainConfig) -> Result<(), TrainError> {
    validate_common(handle, cfg)?;
    for (i, d) in handle.demos.iter().enumerate() {
        if d.command.shape_id >= cfg.vision.n_shapes || d.command.color_id >= cfg.vision.n_colors {
            return Err(TrainError::Data(format!("demo {i}: command labels out of range")));
        }
    }
    if maps.k != cfg.vision.k() {
        return Err(TrainError::Config(format!(
            "teacher maps have k={} regions but the vision grid needs {}",
            maps.k,
            cfg.vision.k()
        )));
    }
    if maps.demos.len() != handle.demos.len() {
        return Err(TrainError::Data(format!(
            "attention cache covers {} demos, dataset has {}",
            maps.demos.len(),
            handle.demos.len()
        )));
    }
    for (i, (m, d)) in maps.demos.iter().zip(&handle.demos).enumerate() {
        if m.p.len() != d.len() {
            return Err(TrainError::Data(format!(
                "attention cache demo {i} has {} frames, dataset has {}",
                m.p.len(),
                d.len()
            )));
        }
    }
    Ok(())
}

fn tfa_val_metrics(
    vision: &Vision,
    motor: &Motor,
    handle: &DatasetHandle,
    plan: &ValPlan,
) -> Result<(Option<f64>, Option<f64>), TrainError> {
    let s = vision.config.image_size;
    let rec = if plan.rec.is_empty() {
        None
    } else {
        let vis = assemble_vis(handle, None, &plan.rec);
        let cond = vision.condition_rows(&vis.shapes, &vis.colors)?;
        let mut g = Graph::new();
        let mut be = Binding::new(&vision.enc);
        let mut bg = Binding::new(&vision.gen);
        let x = g.constant(Tensor::from_vec(&[vis.n, 3, s, s], vis.x));
        let c = g.constant(cond);
        let (mu, _) = vision.encode_nodes(&mut g, &mut be, &vision.enc, x, c);
        let (xp, _) = vision.generate_nodes(&mut g, &mut bg, &vision.gen, mu, c);
        let l = mse_node(&mut g, xp, x);
        Some(g.val(l).item())
    };
    let mut encode = |x: &[f64], n: usize, shapes: &[usize], colors: &[usize]| -> Vec<f64> {
        let cond = vision.condition_rows(shapes, colors).expect("validated labels");
        let mut g = Graph::new();
        let mut be = Binding::new(&vision.enc);
        let xn = g.constant(Tensor::from_vec(&[n, 3, s, s], x.to_vec()));
        let cn = g.constant(cond);
        let (mu, _) = vision.encode_nodes(&mut g, &mut be, &vision.enc, xn, cn);
        g.val(mu).data().to_vec()
    };
    let motor_nll = motor_val_nll(handle, motor, plan, &mut encode)?;
    Ok((rec, motor_nll))
}

struct TfaStepValues {
    d_real: f64,
    d_fake: f64,
    d_noise: f64,
    d_total: f64,
    prior: f64,
    adversarial: f64,
    feature: f64,
    reconstruction: f64,
    cycle: f64,
    motor: f64,
    overall: f64,
}

#[allow(clippy::too_many_arguments)]
fn tfa_batch_step(
    vision: &mut Vision,
    motor: &mut Motor,
    handle: &DatasetHandle,
    maps: &AttnCache,
    plan: &BatchPlan,
    cfg: &TrainConfig,
    opt: &mut TfaOpt,
    noise: &mut ChaCha8Rng,
) -> Result<TfaStepValues, TrainError> {
    let s = cfg.vision.image_size;
    let k = cfg.vision.k();
    let dz = cfg.vision.d_z;
    let wts = &cfg.weights;
    let vis = assemble_vis(handle, Some(maps), &plan.picks);
    let mot = assemble_motor(handle, &plan.windows, plan.w);
    let cond_vis = vision.condition_rows(&vis.shapes, &vis.colors)?;
    let cond_mot = vision.condition_rows(&mot.shapes, &mot.colors)?;

    // One batch of sampling noise, in a fixed draw order.
    let eps_vis = normals(noise, vis.n * dz);
    let z_noise = normals(noise, vis.n * dz);
    let eps_mot = normals(noise, mot.b * mot.w * dz);

    // --- Discriminator step on L_real + L_fake + L_noise, with the fake
    // batches produced by a gradient-free forward pass of the current E/G.
    let d_active = wts.real > 0.0 || wts.fake > 0.0 || wts.noise > 0.0;
    let (mut d_real, mut d_fake, mut d_noise, mut d_total) = (0.0, 0.0, 0.0, 0.0);
    if d_active {
        let (fake_x, fake_p, noise_x, noise_p) = {
            let mut g = Graph::new();
            let mut be = Binding::new(&vision.enc);
            let mut bg = Binding::new(&vision.gen);
            let x = g.constant(Tensor::from_vec(&[vis.n, 3, s, s], vis.x.clone()));
            let c = g.constant(cond_vis.clone());
            let (mu, lv) = vision.encode_nodes(&mut g, &mut be, &vision.enc, x, c);
            let e = g.constant(Tensor::from_vec(&[vis.n, dz], eps_vis.clone()));
            let z = Vision::sample_node(&mut g, mu, lv, e);
            let (xp, pp) = vision.generate_nodes(&mut g, &mut bg, &vision.gen, z, c);
            let zn = g.constant(Tensor::from_vec(&[vis.n, dz], z_noise.clone()));
            let (xn, pn) = vision.generate_nodes(&mut g, &mut bg, &vision.gen, zn, c);
            (
                g.val(xp).data().to_vec(),
                g.val(pp).data().to_vec(),
                g.val(xn).data().to_vec(),
                g.val(pn).data().to_vec(),
            )
        };
        let mut g = Graph::new();
        let mut bd = Binding::new(&vision.disc);
        let xr = g.constant(Tensor::from_vec(&[vis.n, 3, s, s], vis.x.clone()));
        let mr = g.constant(Tensor::from_vec(&[vis.n, k], vis.maps.clone()));
        let (sl, cl, _) = vision.discriminate_nodes(&mut g, &mut bd, &vision.disc, xr, mr);
        let nr = {
            let a = class_nll_node(&mut g, sl, &vis.shapes);
            let b = class_nll_node(&mut g, cl, &vis.colors);
            g.add(a, b)
        };
        let fake_mass = |g: &mut Graph, bd: &mut Binding, xv: Vec<f64>, pv: Vec<f64>| {
            let x = g.constant(Tensor::from_vec(&[vis.n, 3, s, s], xv));
            let p = g.constant(Tensor::from_vec(&[vis.n, k], pv));
            let (sl, cl, _) = vision.discriminate_nodes(g, bd, &vision.disc, x, p);
            let a = fake_mass_node(g, sl, cfg.vision.n_shapes);
            let b = fake_mass_node(g, cl, cfg.vision.n_colors);
            g.add(a, b)
        };
        let nf = fake_mass(&mut g, &mut bd, fake_x, fake_p);
        let nn = fake_mass(&mut g, &mut bd, noise_x, noise_p);
        let t1 = g.scale(nr, wts.real);
        let t2 = g.scale(nf, wts.fake);
        let t3 = g.scale(nn, wts.noise);
        let t12 = g.add(t1, t2);
        let total = g.add(t12, t3);
        g.backward(total);
        let mut grads = GradBuffer::zeros_like(&vision.disc);
        bd.accumulate_grads(&g, &mut grads);
        clip_grads(&mut grads, cfg.grad_clip);
        opt.d.step(&mut vision.disc, &grads);
        d_real = g.val(nr).item();
        d_fake = g.val(nf).item();
        d_noise = g.val(nn).item();
        d_total = g.val(total).item();
    }

    // --- One joint E/G + motor step: prior + adversarial + feature +
    // reconstruction (+ cycle) and the motor NLL through sampled z.
    let mut g = Graph::new();
    let mut be = Binding::new(&vision.enc);
    let mut bg = Binding::new(&vision.gen);
    let mut bd = Binding::new(&vision.disc);
    let mut bm = Binding::new(&motor.ps);
    let xr = g.constant(Tensor::from_vec(&[vis.n, 3, s, s], vis.x.clone()));
    let cn = g.constant(cond_vis);
    let (mu, lv) = vision.encode_nodes(&mut g, &mut be, &vision.enc, xr, cn);
    let e = g.constant(Tensor::from_vec(&[vis.n, dz], eps_vis));
    let z = Vision::sample_node(&mut g, mu, lv, e);
    let (xp, pp) = vision.generate_nodes(&mut g, &mut bg, &vision.gen, z, cn);

    let l_prior = (wts.prior > 0.0).then(|| gaussian_kl_node(&mut g, mu, lv));
    let l_rec = (wts.reconstruction > 0.0).then(|| mse_node(&mut g, xp, xr));
    let noise_gen = (wts.adversarial > 0.0 || wts.cycle > 0.0).then(|| {
        let zn = g.constant(Tensor::from_vec(&[vis.n, dz], z_noise));
        let (xn, pn) = vision.generate_nodes(&mut g, &mut bg, &vision.gen, zn, cn);
        (zn, xn, pn)
    });
    let fake_disc = (wts.adversarial > 0.0 || wts.feature > 0.0)
        .then(|| vision.discriminate_nodes(&mut g, &mut bd, &vision.disc, xp, pp));
    let l_adv = (wts.adversarial > 0.0).then(|| {
        let (sl1, cl1, _) = fake_disc.unwrap();
        let n1 = {
            let a = class_nll_node(&mut g, sl1, &vis.shapes);
            let b = class_nll_node(&mut g, cl1, &vis.colors);
            g.add(a, b)
        };
        let (_, xn, pn) = noise_gen.unwrap();
        let (sl2, cl2, _) = vision.discriminate_nodes(&mut g, &mut bd, &vision.disc, xn, pn);
        let n2 = {
            let a = class_nll_node(&mut g, sl2, &vis.shapes);
            let b = class_nll_node(&mut g, cl2, &vis.colors);
            g.add(a, b)
        };
        // Both fake sources pooled with equal weight.
        let sum = g.add(n1, n2);
        g.scale(sum, 0.5)
    });
    let l_fea = (wts.feature > 0.0).then(|| {
        let mr = g.constant(Tensor::from_vec(&[vis.n, k], vis.maps.clone()));
        let (_, _, fr) = vision.discriminate_nodes(&mut g, &mut bd, &vision.disc, xr, mr);
        let (_, _, ff) = fake_disc.unwrap();
        feature_match_node(&mut g, fr, ff, cfg.vision.per_pair_feature_matching)
    });
    let l_cycle = (wts.cycle > 0.0).then(|| {
        let (zn, xn, _) = noise_gen.unwrap();
        let (mu2, _) = vision.encode_nodes(&mut g, &mut be, &vision.enc, xn, cn);
        cycle_node(&mut g, mu2, zn)
    });
    let l_motor = (wts.motor > 0.0).then(|| {
        let xm = g.constant(Tensor::from_vec(&[mot.b * mot.w, 3, s, s], mot.x.clone()));
        let cm = g.constant(cond_mot);
        let (mu_m, lv_m) = vision.encode_nodes(&mut g, &mut be, &vision.enc, xm, cm);
        let em = g.constant(Tensor::from_vec(&[mot.b * mot.w, dz], eps_mot));
        let zm = Vision::sample_node(&mut g, mu_m, lv_m, em);
        let z_ts = latent_steps(&mut g, zm, mot.w, mot.b, dz);
        let mut state = motor.zero_state_nodes(&mut g, mot.b);
        let steps = motor.unroll_nodes(&mut g, &mut bm, &motor.ps, &z_ts, &mut state);
        let mut acc: Option<NodeId> = None;
        for (t, stp) in steps.iter().enumerate() {
            let tgt = g.constant(mot.targets[t].clone());
            let l = motor.mdn_loss_node(&mut g, stp, tgt);
            acc = Some(match acc {
                None => l,
                Some(prev) => g.add(prev, l),
            });
        }
        let sum = acc.expect("window has at least one step");
        g.scale(sum, 1.0 / mot.w as f64)
    });

    let mut total: Option<NodeId> = None;
    for (node, w) in [
        (l_prior, wts.prior),
        (l_adv, wts.adversarial),
        (l_fea, wts.feature),
        (l_rec, wts.reconstruction),
        (l_cycle, wts.cycle),
        (l_motor, wts.motor),
    ] {
        if let Some(n) = node {
            let sc = g.scale(n, w);
            total = Some(match total {
                None => sc,
                Some(prev) => g.add(prev, sc),
            });
        }
    }
    let eg_total = total.unwrap_or_else(|| g.constant(Tensor::scalar(0.0)));
    g.backward(eg_total);
    let mut ge = GradBuffer::zeros_like(&vision.enc);
    let mut gg = GradBuffer::zeros_like(&vision.gen);
    let mut gm = GradBuffer::zeros_like(&motor.ps);
    be.accumulate_grads(&g, &mut ge);
    bg.accumulate_grads(&g, &mut gg);
    bm.accumulate_grads(&g, &mut gm);
    clip_grads(&mut ge, cfg.grad_clip);
    clip_grads(&mut gg, cfg.grad_clip);
    clip_grads(&mut gm, cfg.grad_clip);
    let value = |n: Option<NodeId>| n.map(|n| g.val(n).item()).unwrap_or(0.0);
    let vals = TfaStepValues {
        d_real,
        d_fake,
        d_noise,
        d_total,
        prior: value(l_prior),
        adversarial: value(l_adv),
        feature: value(l_fea),
        reconstruction: value(l_rec),
        cycle: value(l_cycle),
        motor: value(l_motor),
        overall: d_total + g.val(eg_total).item(),
    };
    opt.e.step(&mut vision.enc, &ge);
    opt.g.step(&mut vision.gen, &gg);
    opt.m.step(&mut motor.ps, &gm);
    Ok(vals)
}

fn train_tfa_from(
    vision: &mut Vision,
    motor: &mut Motor,
    handle: &DatasetHandle,
    maps: &AttnCache,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    validate_tfa(handle, maps, cfg)?;
    let train = handle.split_indices(Split::Train);
    if cfg.epochs > 0 && train.is_empty() {
        return Err(TrainError::Data("no training demos in the dataset".into()));
    }
    let all: Vec<usize> = (0..handle.demos.len()).collect();
    let vplan = make_val_plan(handle, &all, cfg);
    let mut steps: Vec<StepLosses> = Vec::new();
    let mut history: Vec<EpochLosses> = Vec::new();
    let mut trace: Vec<BatchTrace> = Vec::new();
    if cfg.epochs > 0 {
        if !params_finite(&[&vision.enc, &vision.gen, &vision.disc, &motor.ps]) {
            return Err(TrainError::Diverged {
                epoch: 1,
                batch: 0,
                detail: "non-finite parameters at start".into(),
                checkpoint: Box::new(tfa_checkpoint(cfg, 0, &history, vision, motor)),
            });
        }
        let (vr, vm) = tfa_val_metrics(vision, motor, handle, &vplan)?;
        history.push(EpochLosses::init_row(vr, vm));
    }
    let mut opt = TfaOpt {
        e: Adam::new(cfg.lr),
        g: Adam::new(cfg.lr),
        d: Adam::new(cfg.lr),
        m: Adam::new(cfg.lr),
    };
    for epoch in 1..=cfg.epochs {
        let mut plan_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, TAG_PLAN, epoch));
        let mut noise_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, TAG_NOISE, epoch));
        let epoch_start = steps.len();
        for (bi, demos) in full_split_batches(handle, cfg, epoch).iter().enumerate() {
            let plan = sample_plan(&mut plan_rng, handle, demos, cfg);
            trace.push(trace_of(demos, &plan));
            let v = tfa_batch_step(vision, motor, handle, maps, &plan, cfg, &mut opt, &mut noise_rng)?;
            let rec = StepLosses {
                epoch,
                step: bi,
                d_real: v.d_real,
                d_fake: v.d_fake,
                d_noise: v.d_noise,
                d_total: v.d_total,
                prior: v.prior,
                adversarial: v.adversarial,
                feature: v.feature,
                reconstruction: v.reconstruction,
                cycle: v.cycle,
                motor: v.motor,
                overall: v.overall,
            };
            if !rec.all_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: bi,
                    detail: format!("non-finite loss record {rec:?}"),
                    checkpoint: Box::new(tfa_checkpoint(cfg, epoch - 1, &history, vision, motor)),
                });
            }
            steps.push(rec);
            if !params_finite(&[&vision.enc, &vision.gen, &vision.disc, &motor.ps]) {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: bi,
                    detail: "non-finite parameters after the update".into(),
                    checkpoint: Box::new(tfa_checkpoint(cfg, epoch - 1, &history, vision, motor)),
                });
            }
        }
        let (vr, vm) = tfa_val_metrics(vision, motor, handle, &vplan)?;
        history.push(EpochLosses::from_steps(epoch, &steps[epoch_start..], vr, vm));
    }
    let checkpoint = tfa_checkpoint(cfg, cfg.epochs, &history, vision, motor);
    Ok(TrainOutcome { checkpoint, steps, epochs: history, trace })
}

/// End-to-end training: alternating per batch, one discriminator step then
/// one joint encoder/generator + motor step. Dispatches to the baseline
/// loop when the config selects the no-TFA variant.
pub fn train_end_to_end(
    handle: &DatasetHandle,
    maps: &AttnCache,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    match cfg.variant {
        ModelVariant::TfaFull => {
            let mut vision =
                Vision::new(cfg.vision.clone(), splitmix(cfg.seed ^ TAG_VISION_INIT))?;
            let mut motor = Motor::new(cfg.motor.clone(), splitmix(cfg.seed ^ TAG_MOTOR_INIT))?;
            train_tfa_from(&mut vision, &mut motor, handle, maps, cfg)
        }
        ModelVariant::BaselineNoTfa => train_baseline(handle, cfg),
    }
}

// ---------------------------------------------------------------------------
// Baseline training
// ---------------------------------------------------------------------------

struct VaeOpt {
    e: Adam,
    g: Adam,
    m: Adam,
}

fn baseline_val_metrics(
    vae: &PlainVae,
    motor: &Motor,
    handle: &DatasetHandle,
    plan: &ValPlan,
) -> Result<(Option<f64>, Option<f64>), TrainError> {
    let s = vae.config.image_size;
    let rec = if plan.rec.is_empty() {
        None
    } else {
        let vis = assemble_vis(handle, None, &plan.rec);
        let mut g = Graph::new();
        let mut be = Binding::new(&vae.enc);
        let mut bg = Binding::new(&vae.gen);
        let x = g.constant(Tensor::from_vec(&[vis.n, 3, s, s], vis.x));
        let (mu, _) = vae.encode_nodes(&mut g, &mut be, &vae.enc, x);
        let xp = vae.generate_nodes(&mut g, &mut bg, &vae.gen, mu);
        let l = mse_node(&mut g, xp, x);
        Some(g.val(l).item())
    };
    let mut encode = |x: &[f64], n: usize, _shapes: &[usize], _colors: &[usize]| -> Vec<f64> {
        let mut g = Graph::new();
        let mut be = Binding::new(&vae.enc);
        let xn = g.constant(Tensor::from_vec(&[n, 3, s, s], x.to_vec()));
        let (mu, _) = vae.encode_nodes(&mut g, &mut be, &vae.enc, xn);
        g.val(mu).data().to_vec()
    };
    let motor_nll = motor_val_nll(handle, motor, plan, &mut encode)?;
    Ok((rec, motor_nll))
}

#[allow(clippy::too_many_arguments)]
fn baseline_batch_step(
    vae: &mut PlainVae,
    motor: &mut Motor,
    handle: &DatasetHandle,
    plan: &BatchPlan,
    cfg: &TrainConfig,
    opt: &mut VaeOpt,
    noise: &mut ChaCha8Rng,
) -> Result<TfaStepValues, TrainError> {
    let s = cfg.vision.image_size;
    let dz = cfg.vision.d_z;
    let wts = &cfg.weights;
    let vis = assemble_vis(handle, None, &plan.picks);
    let mot = assemble_motor(handle, &plan.windows, plan.w);
    let eps_vis = normals(noise, vis.n * dz);
    let eps_mot = normals(noise, mot.b * mot.w * dz);

    let mut g = Graph::new();
    let mut be = Binding::new(&vae.enc);
    let mut bg = Binding::new(&vae.gen);
    let mut bm = Binding::new(&motor.ps);
    let xr = g.constant(Tensor::from_vec(&[vis.n, 3, s, s], vis.x.clone()));
    let (mu, lv) = vae.encode_nodes(&mut g, &mut be, &vae.enc, xr);
    let e = g.constant(Tensor::from_vec(&[vis.n, dz], eps_vis));
    let z = Vision::sample_node(&mut g, mu, lv, e);
    let xp = vae.generate_nodes(&mut g, &mut bg, &vae.gen, z);
    let l_prior = (wts.prior > 0.0).then(|| gaussian_kl_node(&mut g, mu, lv));
    let l_rec = (wts.reconstruction > 0.0).then(|| mse_node(&mut g, xp, xr));
    let l_motor = (wts.motor > 0.0).then(|| {
        let xm = g.constant(Tensor::from_vec(&[mot.b * mot.w, 3, s, s], mot.x.clone()));
        let (mu_m, lv_m) = vae.encode_nodes(&mut g, &mut be, &vae.enc, xm);
        let em = g.constant(Tensor::from_vec(&[mot.b * mot.w, dz], eps_mot));
        let zm = Vision::sample_node(&mut g, mu_m, lv_m, em);
        let z_ts = latent_steps(&mut g, zm, mot.w, mot.b, dz);
        let mut state = motor.zero_state_nodes(&mut g, mot.b);
        let steps = motor.unroll_nodes(&mut g, &mut bm, &motor.ps, &z_ts, &mut state);
        let mut acc: Option<NodeId> = None;
        for (t, stp) in steps.iter().enumerate() {
            let tgt = g.constant(mot.targets[t].clone());
            let l = motor.mdn_loss_node(&mut g, stp, tgt);
            acc = Some(match acc {
                None => l,
                Some(prev) => g.add(prev, l),
            });
        }
        let sum = acc.expect("window has at least one step");
        g.scale(sum, 1.0 / mot.w as f64)
    });
    let mut total: Option<NodeId> = None;
    for (node, w) in [
        (l_prior, wts.prior),
        (l_rec, wts.reconstruction),
        (l_motor, wts.motor),
    ] {
        if let Some(n) = node {
            let sc = g.scale(n, w);
            total = Some(match total {
                None => sc,
                Some(prev) => g.add(prev, sc),
            });
        }
    }
    let eg_total = total.unwrap_or_else(|| g.constant(Tensor::scalar(0.0)));
    g.backward(eg_total);
    let mut ge = GradBuffer::zeros_like(&vae.enc);
    let mut gg = GradBuffer::zeros_like(&vae.gen);
    let mut gm = GradBuffer::zeros_like(&motor.ps);
    be.accumulate_grads(&g, &mut ge);
    bg.accumulate_grads(&g, &mut gg);
    bm.accumulate_grads(&g, &mut gm);
    clip_grads(&mut ge, cfg.grad_clip);
    clip_grads(&mut gg, cfg.grad_clip);
    clip_grads(&mut gm, cfg.grad_clip);
    let value = |n: Option<NodeId>| n.map(|n| g.val(n).item()).unwrap_or(0.0);
    let vals = TfaStepValues {
        d_real: 0.0,
        d_fake: 0.0,
        d_noise: 0.0,
        d_total: 0.0,
        prior: value(l_prior),
        adversarial: 0.0,
        feature: 0.0,
        reconstruction: value(l_rec),
        cycle: 0.0,
        motor: value(l_motor),
        overall: g.val(eg_total).item(),
    };
    opt.e.step(&mut vae.enc, &ge);
    opt.g.step(&mut vae.gen, &gg);
    opt.m.step(&mut motor.ps, &gm);
    Ok(vals)
}

/// Inner baseline loop over a fixed demo subset. `batches_for` supplies the
/// per-epoch batch order so full-split runs share the dataset iterator's
/// seeding with the TFA variant.
fn baseline_loop(
    vae: &mut PlainVae,
    motor: &mut Motor,
    handle: &DatasetHandle,
    subset: &[usize],
    cfg: &TrainConfig,
    batches_for: &dyn Fn(usize) -> Vec<Vec<usize>>,
) -> Result<TrainOutcome, TrainError> {
    let train: Vec<usize> = subset
        .iter()
        .copied()
        .filter(|&i| handle.demos[i].split == Split::Train)
        .collect();
    if cfg.epochs > 0 && train.is_empty() {
        return Err(TrainError::Data("no training demos in the subset".into()));
    }
    let vplan = make_val_plan(handle, subset, cfg);
    let mut steps: Vec<StepLosses> = Vec::new();
    let mut history: Vec<EpochLosses> = Vec::new();
    let mut trace: Vec<BatchTrace> = Vec::new();
    if cfg.epochs > 0 {
        if !params_finite(&[&vae.enc, &vae.gen, &motor.ps]) {
            return Err(TrainError::Diverged {
                epoch: 1,
                batch: 0,
                detail: "non-finite parameters at start".into(),
                checkpoint: Box::new(baseline_checkpoint(cfg, 0, &history, vae, motor)),
            });
        }
        let (vr, vm) = baseline_val_metrics(vae, motor, handle, &vplan)?;
        history.push(EpochLosses::init_row(vr, vm));
    }
    let mut opt = VaeOpt { e: Adam::new(cfg.lr), g: Adam::new(cfg.lr), m: Adam::new(cfg.lr) };
    for epoch in 1..=cfg.epochs {
        let mut plan_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, TAG_PLAN, epoch));
        let mut noise_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, TAG_NOISE, epoch));
        let epoch_start = steps.len();
        for (bi, demos) in batches_for(epoch).iter().enumerate() {
            let plan = sample_plan(&mut plan_rng, handle, demos, cfg);
            trace.push(trace_of(demos, &plan));
            let v = baseline_batch_step(vae, motor, handle, &plan, cfg, &mut opt, &mut noise_rng)?;
            let rec = StepLosses {
                epoch,
                step: bi,
                d_real: v.d_real,
                d_fake: v.d_fake,
                d_noise: v.d_noise,
                d_total: v.d_total,
                prior: v.prior,
                adversarial: v.adversarial,
                feature: v.feature,
                reconstruction: v.reconstruction,
                cycle: v.cycle,
                motor: v.motor,
                overall: v.overall,
            };
            if !rec.all_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: bi,
                    detail: format!("non-finite loss record {rec:?}"),
                    checkpoint: Box::new(baseline_checkpoint(cfg, epoch - 1, &history, vae, motor)),
                });
            }
            steps.push(rec);
            if !params_finite(&[&vae.enc, &vae.gen, &motor.ps]) {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: bi,
                    detail: "non-finite parameters after the update".into(),
                    checkpoint: Box::new(baseline_checkpoint(cfg, epoch - 1, &history, vae, motor)),
                });
            }
        }
        let (vr, vm) = baseline_val_metrics(vae, motor, handle, &vplan)?;
        history.push(EpochLosses::from_steps(epoch, &steps[epoch_start..], vr, vm));
    }
    let checkpoint = baseline_checkpoint(cfg, cfg.epochs, &history, vae, motor);
    Ok(TrainOutcome { checkpoint, steps, epochs: history, trace })
}

/// One plain-VAE baseline policy trained on the whole train split, with the
/// same seed protocol and batch orders as the TFA variant.
pub fn train_baseline(handle: &DatasetHandle, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if cfg.variant != ModelVariant::BaselineNoTfa {
        return Err(TrainError::Config("train_baseline needs model_variant = baseline_no_tfa".into()));
    }
    validate_common(handle, cfg)?;
    let mut vae = PlainVae::new(cfg.vision.clone(), splitmix(cfg.seed ^ TAG_VISION_INIT))?;
    let mut motor = Motor::new(cfg.motor.clone(), splitmix(cfg.seed ^ TAG_MOTOR_INIT))?;
    let all: Vec<usize> = (0..handle.demos.len()).collect();
    baseline_loop(&mut vae, &mut motor, handle, &all, cfg, &|epoch| {
        full_split_batches(handle, cfg, epoch)
    })
}

/// Cells present in the dataset, sorted for deterministic ordering.
pub fn dataset_cells(handle: &DatasetHandle) -> Vec<CellKey> {
    let mut keys: Vec<CellKey> = Vec::new();
    for d in &handle.demos {
        let key = CellKey {
            verb: d.command.verb,
            shape_id: d.command.shape_id,
            color_id: d.command.color_id,
        };
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.sort_by_key(|k| (k.verb.name(), k.shape_id, k.color_id));
    keys
}

/// One baseline policy per task/object cell, each trained on that cell's
/// demos only: without (s,c) conditioning a single baseline cannot select
/// the task, so the eval pairs every cell with its own policy.
pub fn train_baseline_cells(
    handle: &DatasetHandle,
    cfg: &TrainConfig,
) -> Result<BaselineCellsOutcome, TrainError> {
    cfg.validate()?;
    if cfg.variant != ModelVariant::BaselineNoTfa {
        return Err(TrainError::Config(
            "train_baseline_cells needs model_variant = baseline_no_tfa".into(),
        ));
    }
    validate_common(handle, cfg)?;
    let keys = dataset_cells(handle);
    if keys.is_empty() {
        return Err(TrainError::Data("dataset has no demos".into()));
    }
    let mut sections = Vec::new();
    let mut cell_histories = Vec::new();
    let mut cells = Vec::new();
    for (i, key) in keys.iter().enumerate() {
        let subset: Vec<usize> = (0..handle.demos.len())
            .filter(|&di| {
                let c = &handle.demos[di].command;
                c.verb == key.verb && c.shape_id == key.shape_id && c.color_id == key.color_id
            })
            .collect();
        let cell_seed = splitmix(cfg.seed ^ (0xce11 + i as u64));
        let cell_cfg = TrainConfig { seed: cell_seed, ..cfg.clone() };
        let mut vae = PlainVae::new(cfg.vision.clone(), splitmix(cell_seed ^ TAG_VISION_INIT))?;
        let mut motor = Motor::new(cfg.motor.clone(), splitmix(cell_seed ^ TAG_MOTOR_INIT))?;
        let train: Vec<usize> = subset
            .iter()
            .copied()
            .filter(|&di| handle.demos[di].split == Split::Train)
            .collect();
        let outcome = baseline_loop(&mut vae, &mut motor, handle, &subset, &cell_cfg, &|epoch| {
            subset_batches(&train, cfg.batch_size, stream_seed(cell_seed, TAG_ORDER, epoch))
        })?;
        sections.push(section_from(&format!("cell{i}.enc"), &vae.enc));
        sections.push(section_from(&format!("cell{i}.gen"), &vae.gen));
        sections.push(section_from(&format!("cell{i}.motor"), &motor.ps));
        cell_histories.push(outcome.epochs.clone());
        cells.push(CellOutcome { key: *key, steps: outcome.steps, epochs: outcome.epochs });
    }
    let checkpoint = Checkpoint {
        meta: CheckpointMeta {
            schema: CKPT_SCHEMA.into(),
            version: CKPT_VERSION,
            variant: ModelVariant::BaselineNoTfa,
            epoch: cfg.epochs,
            config: cfg.clone(),
            cells: keys,
            loss_history: vec![],
            cell_histories,
        },
        sections,
    };
    Ok(BaselineCellsOutcome { checkpoint, cells })
}

// ---------------------------------------------------------------------------
// Motor fine-tuning
// ---------------------------------------------------------------------------

/// Latent mean sequences for the demos a fine-tune run touches, indexed by
/// demo id.
fn collect_means(
    handle: &DatasetHandle,
    indices: &[usize],
    encode: &mut dyn FnMut(&[f64], usize, &[usize], &[usize]) -> Vec<f64>,
) -> Vec<Option<Vec<f64>>> {
    let mut out = vec![None; handle.demos.len()];
    for &di in indices {
        out[di] = Some(demo_means(handle, di, encode));
    }
    out
}

/// Motor-only epochs over full demo sequences with frozen-encoder mean
/// latents. Gradients accumulate per batch across whole demos.
#[allow(clippy::too_many_arguments)]
fn finetune_loop(
    motor: &mut Motor,
    handle: &DatasetHandle,
    means: &[Option<Vec<f64>>],
    cfg: &TrainConfig,
    batches_for: &dyn Fn(usize) -> Vec<Vec<usize>>,
    val_nll: &mut dyn FnMut(&Motor) -> Result<Option<f64>, TrainError>,
    snapshot: &dyn Fn(&Motor, usize, &[EpochLosses]) -> Checkpoint,
) -> Result<(Vec<StepLosses>, Vec<EpochLosses>, Vec<BatchTrace>), TrainError> {
    let dz = motor.config.d_z;
    let mut steps: Vec<StepLosses> = Vec::new();
    let mut history: Vec<EpochLosses> = Vec::new();
    let mut trace: Vec<BatchTrace> = Vec::new();
    if !params_finite(&[&motor.ps]) {
        return Err(TrainError::Diverged {
            epoch: 1,
            batch: 0,
            detail: "non-finite motor parameters at start".into(),
            checkpoint: Box::new(snapshot(motor, 0, &history)),
        });
    }
    history.push(EpochLosses::init_row(None, val_nll(motor)?));
    let mut opt = Adam::new(cfg.lr);
    for epoch in 1..=cfg.epochs {
        let epoch_start = steps.len();
        for (bi, demos) in batches_for(epoch).iter().enumerate() {
            let mut grads = GradBuffer::zeros_like(&motor.ps);
            let mut batch_loss = 0.0;
            for &di in demos {
                let d = &handle.demos[di];
                let mus = means[di].as_ref().expect("means precomputed for trained demos");
                let t_n = d.len() - 1;
                let mut g = Graph::new();
                let mut bm = Binding::new(&motor.ps);
                let z_ts: Vec<NodeId> = (0..t_n)
                    .map(|t| {
                        g.constant(Tensor::from_vec(&[1, dz], mus[t * dz..(t + 1) * dz].to_vec()))
                    })
                    .collect();
                let mut state = motor.zero_state_nodes(&mut g, 1);
                let out = motor.unroll_nodes(&mut g, &mut bm, &motor.ps, &z_ts, &mut state);
                let mut acc: Option<NodeId> = None;
                for (t, stp) in out.iter().enumerate() {
                    let tgt = g.constant(Tensor::from_vec(&[1, motor.config.n_joints], d.joints[t + 1].clone()));
                    let l = motor.mdn_loss_node(&mut g, stp, tgt);
                    acc = Some(match acc {
                        None => l,
                        Some(prev) => g.add(prev, l),
                    });
                }
                let sum = acc.expect("demo has at least one step");
                let mean = g.scale(sum, 1.0 / t_n as f64);
                let scaled = g.scale(mean, cfg.weights.motor / demos.len() as f64);
                g.backward(scaled);
                bm.accumulate_grads(&g, &mut grads);
                batch_loss += g.val(mean).item() / demos.len() as f64;
            }
            clip_grads(&mut grads, cfg.grad_clip);
            opt.step(&mut motor.ps, &grads);
            let rec = StepLosses {
                epoch,
                step: bi,
                d_real: 0.0,
                d_fake: 0.0,
                d_noise: 0.0,
                d_total: 0.0,
                prior: 0.0,
                adversarial: 0.0,
                feature: 0.0,
                reconstruction: 0.0,
                cycle: 0.0,
                motor: batch_loss,
                overall: cfg.weights.motor * batch_loss,
            };
            if !rec.all_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: bi,
                    detail: format!("non-finite loss record {rec:?}"),
                    checkpoint: Box::new(snapshot(motor, epoch - 1, &history)),
                });
            }
            trace.push(BatchTrace { demos: demos.clone(), frames: vec![], windows: vec![] });
            steps.push(rec);
            if !params_finite(&[&motor.ps]) {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: bi,
                    detail: "non-finite motor parameters after the update".into(),
                    checkpoint: Box::new(snapshot(motor, epoch - 1, &history)),
                });
            }
        }
        let vm = val_nll(motor)?;
        history.push(EpochLosses::from_steps(epoch, &steps[epoch_start..], None, vm));
    }
    Ok((steps, history, trace))
}

/// Fine-tune only the motor net of a trained checkpoint: vision parameters
/// are frozen bit-exactly and z is the frozen encoder's mean, with no
/// sampling noise.
pub fn finetune_motor(
    ckpt: &Checkpoint,
    handle: &DatasetHandle,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if cfg.variant != ckpt.meta.variant {
        return Err(TrainError::Config(format!(
            "config variant {} does not match checkpoint variant {}",
            cfg.variant.name(),
            ckpt.meta.variant.name()
        )));
    }
    validate_common(handle, cfg)?;
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            checkpoint: ckpt.clone(),
            steps: vec![],
            epochs: vec![],
            trace: vec![],
        });
    }
    let train = handle.split_indices(Split::Train);
    if train.is_empty() {
        return Err(TrainError::Data("no training demos in the dataset".into()));
    }
    match ckpt.build()? {
        PolicyBundle::Tfa { vision, mut motor } => {
            for (i, d) in handle.demos.iter().enumerate() {
                if d.command.shape_id >= cfg.vision.n_shapes
                    || d.command.color_id >= cfg.vision.n_colors
                {
                    return Err(TrainError::Data(format!("demo {i}: command labels out of range")));
                }
            }
            let s = vision.config.image_size;
            let mut encode = |x: &[f64], n: usize, shapes: &[usize], colors: &[usize]| -> Vec<f64> {
                let cond = vision.condition_rows(shapes, colors).expect("validated labels");
                let mut g = Graph::new();
                let mut be = Binding::new(&vision.enc);
                let xn = g.constant(Tensor::from_vec(&[n, 3, s, s], x.to_vec()));
                let cn = g.constant(cond);
                let (mu, _) = vision.encode_nodes(&mut g, &mut be, &vision.enc, xn, cn);
                g.val(mu).data().to_vec()
            };
            let means = collect_means(handle, &train, &mut encode);
            let all: Vec<usize> = (0..handle.demos.len()).collect();
            let vplan = make_val_plan(handle, &all, cfg);
            let mut val = |m: &Motor| -> Result<Option<f64>, TrainError> {
                Ok(tfa_val_metrics(&vision, m, handle, &vplan)?.1)
            };
            let base_epoch = ckpt.meta.epoch;
            let snapshot = |m: &Motor, extra: usize, hist: &[EpochLosses]| {
                let mut history = ckpt.meta.loss_history.clone();
                history.extend(hist.iter().cloned());
                tfa_checkpoint(cfg, base_epoch + extra, &history, &vision, m)
            };
            let (steps, ft_hist, trace) = finetune_loop(
                &mut motor,
                handle,
                &means,
                cfg,
                &|epoch| full_split_batches(handle, cfg, epoch),
                &mut val,
                &snapshot,
            )?;
            let mut history = ckpt.meta.loss_history.clone();
            history.extend(ft_hist.iter().cloned());
            let checkpoint =
                tfa_checkpoint(cfg, base_epoch + cfg.epochs, &history, &vision, &motor);
            Ok(TrainOutcome { checkpoint, steps, epochs: ft_hist, trace })
        }
        PolicyBundle::Baseline { mut cells } => {
            if ckpt.meta.cells.is_empty() {
                let (_, policy) = &mut cells[0];
                let BaselinePolicy { vae, motor } = policy;
                let s = vae.config.image_size;
                let enc = &vae.enc;
                let vae_ref: &PlainVae = vae;
                let mut encode =
                    |x: &[f64], n: usize, _s: &[usize], _c: &[usize]| -> Vec<f64> {
                        let mut g = Graph::new();
                        let mut be = Binding::new(enc);
                        let xn = g.constant(Tensor::from_vec(&[n, 3, s, s], x.to_vec()));
                        let (mu, _) = vae_ref.encode_nodes(&mut g, &mut be, enc, xn);
                        g.val(mu).data().to_vec()
                    };
                let means = collect_means(handle, &train, &mut encode);
                let all: Vec<usize> = (0..handle.demos.len()).collect();
                let vplan = make_val_plan(handle, &all, cfg);
                let mut val = |m: &Motor| -> Result<Option<f64>, TrainError> {
                    Ok(baseline_val_metrics(vae_ref, m, handle, &vplan)?.1)
                };
                let base_epoch = ckpt.meta.epoch;
                let snapshot = |m: &Motor, extra: usize, hist: &[EpochLosses]| {
                    let mut history = ckpt.meta.loss_history.clone();
                    history.extend(hist.iter().cloned());
                    baseline_checkpoint(cfg, base_epoch + extra, &history, vae_ref, m)
                };
                let (steps, ft_hist, trace) = finetune_loop(
                    motor,
                    handle,
                    &means,
                    cfg,
                    &|epoch| full_split_batches(handle, cfg, epoch),
                    &mut val,
                    &snapshot,
                )?;
                let mut history = ckpt.meta.loss_history.clone();
                history.extend(ft_hist.iter().cloned());
                let checkpoint =
                    baseline_checkpoint(cfg, base_epoch + cfg.epochs, &history, vae_ref, motor);
                Ok(TrainOutcome { checkpoint, steps, epochs: ft_hist, trace })
            } else {
                finetune_baseline_cells(ckpt, handle, cfg, &mut cells)
            }
        }
    }
}

fn finetune_baseline_cells(
    ckpt: &Checkpoint,
    handle: &DatasetHandle,
    cfg: &TrainConfig,
    cells: &mut [(Option<CellKey>, BaselinePolicy)],
) -> Result<TrainOutcome, TrainError> {
    let mut sections = Vec::new();
    let mut cell_histories = Vec::new();
    let mut all_steps = Vec::new();
    let mut all_trace = Vec::new();
    let mut last_hist: Vec<EpochLosses> = Vec::new();
    for (i, (key, policy)) in cells.iter_mut().enumerate() {
        let key = key.expect("cell checkpoints carry keys");
        let subset: Vec<usize> = (0..handle.demos.len())
            .filter(|&di| {
                let c = &handle.demos[di].command;
                c.verb == key.verb && c.shape_id == key.shape_id && c.color_id == key.color_id
            })
            .collect();
        let train: Vec<usize> = subset
            .iter()
            .copied()
            .filter(|&di| handle.demos[di].split == Split::Train)
            .collect();
        if train.is_empty() {
            return Err(TrainError::Data(format!("cell {} has no training demos", key.label())));
        }
        let cell_seed = splitmix(cfg.seed ^ (0xce11 + i as u64));
        let cell_cfg = TrainConfig { seed: cell_seed, ..cfg.clone() };
        let BaselinePolicy { vae, motor } = policy;
        let s = vae.config.image_size;
        let vae_ref: &PlainVae = vae;
        let mut encode = |x: &[f64], n: usize, _s: &[usize], _c: &[usize]| -> Vec<f64> {
            let mut g = Graph::new();
            let mut be = Binding::new(&vae_ref.enc);
            let xn = g.constant(Tensor::from_vec(&[n, 3, s, s], x.to_vec()));
            let (mu, _) = vae_ref.encode_nodes(&mut g, &mut be, &vae_ref.enc, xn);
            g.val(mu).data().to_vec()
        };
        let means = collect_means(handle, &train, &mut encode);
        let vplan = make_val_plan(handle, &subset, &cell_cfg);
        let mut val = |m: &Motor| -> Result<Option<f64>, TrainError> {
            Ok(baseline_val_metrics(vae_ref, m, handle, &vplan)?.1)
        };
        let snapshot = |m: &Motor, extra: usize, hist: &[EpochLosses]| {
            // Diagnostic snapshot of the failing cell alone.
            let mut c = baseline_checkpoint(&cell_cfg, ckpt.meta.epoch + extra, hist, vae_ref, m);
            c.meta.cells = vec![key];
            c
        };
        let (steps, ft_hist, trace) = finetune_loop(
            motor,
            handle,
            &means,
            &cell_cfg,
            &|epoch| {
                subset_batches(&train, cfg.batch_size, stream_seed(cell_seed, TAG_ORDER, epoch))
            },
            &mut val,
            &snapshot,
        )?;
        sections.push(section_from(&format!("cell{i}.enc"), &vae_ref.enc));
        sections.push(section_from(&format!("cell{i}.gen"), &vae_ref.gen));
        sections.push(section_from(&format!("cell{i}.motor"), &policy.motor.ps));
        let mut hist = ckpt.meta.cell_histories.get(i).cloned().unwrap_or_default();
        hist.extend(ft_hist.iter().cloned());
        cell_histories.push(hist);
        all_steps.extend(steps);
        all_trace.extend(trace);
        last_hist = ft_hist;
    }
    let checkpoint = Checkpoint {
        meta: CheckpointMeta {
            schema: CKPT_SCHEMA.into(),
            version: CKPT_VERSION,
            variant: ModelVariant::BaselineNoTfa,
            epoch: ckpt.meta.epoch + cfg.epochs,
            config: cfg.clone(),
            cells: ckpt.meta.cells.clone(),
            loss_history: vec![],
            cell_histories,
        },
        sections,
    };
    Ok(TrainOutcome { checkpoint, steps: all_steps, epochs: last_hist, trace: all_trace })
}

/// Loss history as CSV, one row per batch.
pub fn write_loss_csv(steps: &[StepLosses], path: &Path) -> Result<(), TrainError> {
    let mut out = String::from(
        "epoch,step,d_real,d_fake,d_noise,d_total,prior,adversarial,feature,reconstruction,cycle,motor,overall\n",
    );
    for s in steps {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            s.epoch,
            s.step,
            s.d_real,
            s.d_fake,
            s.d_noise,
            s.d_total,
            s.prior,
            s.adversarial,
            s.feature,
            s.reconstruction,
            s.cycle,
            s.motor,
            s.overall
        );
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, out)?;
    Ok(())
}

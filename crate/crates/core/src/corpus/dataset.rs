//! Demonstration dataset: generation, on-disk layout, loading, batching.
//!
//! Layout under the dataset root:
//!   manifest.json            schema, catalogs, vocabulary, demo index, checksums
//!   demos/00000/frame_00000.png ...   one directory per demonstration
//!   demos/00000/traj.jsonl            one line per step: {"t":., "joints":[..]}
//!   demos/00000/masks.bin             bit-packed per-frame, per-object masks

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::grammar::{grammar_sample, Command, Vocabulary};
use crate::sim::catalog;
use crate::sim::expert::run_expert;
use crate::sim::render::render;
use crate::sim::types::{Scene, SceneConfig, SimError, SimParams, TaskSpec, Verb};
use crate::sim::world::make_scene;

pub const SCHEMA: &str = "tfa-dataset";
pub const SCHEMA_VERSION: u32 = 1;
/// Scene-seed retries per demonstration before giving up.
const MAX_ATTEMPTS: u64 = 64;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("manifest parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unknown dataset schema {schema:?} version {version}")]
    Version { schema: String, version: u32 },
    #[error("corrupt dataset: checksum mismatch for {path}")]
    Corrupt { path: PathBuf },
    #[error("corrupt dataset: {0}")]
    Inconsistent(String),
    #[error("dataset catalog does not match the compiled catalog: {0}")]
    CatalogMismatch(String),
    #[error("cell {verb} {shape}/{color}: no feasible scene after {attempts} seeds")]
    Exhausted {
        verb: String,
        shape: String,
        color: String,
        attempts: u64,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            _ => None,
        }
    }
}

/// Validation demos are the scene seeds ending in 9: a fixed 10% slice that
/// is disjoint from training by construction.
pub fn split_of(scene_seed: u64) -> Split {
    if scene_seed % 10 == 9 {
        Split::Val
    } else {
        Split::Train
    }
}

#[derive(Clone, Debug)]
pub struct DatasetConfig {
    /// (verb, object) cells to demonstrate.
    pub cells: Vec<TaskSpec>,
    pub demos_per_cell: usize,
    /// Distractor objects added per scene (total objects = 1 + distractors).
    pub distractors: usize,
    pub max_steps: usize,
    pub params: SimParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            cells: default_cells(),
            demos_per_cell: 150,
            distractors: 1,
            max_steps: 160,
            params: SimParams::default(),
        }
    }
}

/// The default task/object grid: verb is a function of the object so the
/// word classifier target is recoverable from vision alone, and each shape
/// and color appears under both verbs somewhere in the grid.
pub fn default_cells() -> Vec<TaskSpec> {
    let pick = [(0, 0), (1, 1), (2, 2), (3, 3), (4, 0), (5, 1)];
    let push = [(1, 2), (0, 3), (3, 0), (2, 1)];
    let mut cells = Vec::new();
    for (s, c) in pick {
        cells.push(TaskSpec {
            verb: Verb::PickUp,
            shape_id: s,
            color_id: c,
        });
    }
    for (s, c) in push {
        cells.push(TaskSpec {
            verb: Verb::PushLeft,
            shape_id: s,
            color_id: c,
        });
    }
    cells
}

/// One recorded demonstration, fully resident in memory.
#[derive(Clone, Debug)]
pub struct Demonstration {
    /// Directory of the demo relative to the dataset root.
    pub dir: String,
    pub command: Command,
    /// Per-frame RGB bytes in [3,S,S] channel-major order (8-bit grid).
    pub frames: Vec<Vec<u8>>,
    /// Arm state at each frame (revolute joints + aperture).
    pub joints: Vec<Vec<f64>>,
    /// Bit-packed object masks as masks[frame][object] (row-major, MSB
    /// first). Object 0 is the commanded target.
    pub masks: Vec<Vec<Vec<u8>>>,
    /// (shape_id, color_id) per scene object, target first.
    pub objects: Vec<(usize, usize)>,
    pub scene_seed: u64,
    pub split: Split,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frame as [3,S,S] f64 values on the 8-bit grid.
    pub fn frame_f64(&self, t: usize) -> Vec<f64> {
        self.frames[t].iter().map(|b| *b as f64 / 255.0).collect()
    }

    /// Object mask as S*S f64 in {0,1}; object 0 is the target.
    pub fn mask_f64(&self, t: usize, object: usize, image_size: usize) -> Vec<f64> {
        let n = image_size * image_size;
        let mut out = vec![0.0; n];
        for (i, v) in out.iter_mut().enumerate() {
            if self.masks[t][object][i / 8] >> (7 - i % 8) & 1 == 1 {
                *v = 1.0;
            }
        }
        out
    }
}

pub struct DatasetHandle {
    pub root: PathBuf,
    pub vocab: Vocabulary,
    pub image_size: usize,
    pub joint_dim: usize,
    pub seed: u64,
    pub demos: Vec<Demonstration>,
}

impl DatasetHandle {
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.demos.len())
            .filter(|i| self.demos[*i].split == split)
            .collect()
    }

    pub fn total_frames(&self) -> usize {
        self.demos.iter().map(|d| d.len()).sum()
    }
}

/// A batch is a set of whole demonstrations; recurrent training consumes
/// each demo's frames in order, pairing frame t with joints t and t+1.
pub struct Batch<'a> {
    pub demos: Vec<(usize, &'a Demonstration)>,
}

/// Seeded permutation of the split's demos, chunked by batch_size (last
/// batch may be partial).
pub fn iterate(
    handle: &DatasetHandle,
    split: Split,
    batch_size: usize,
    seed: u64,
) -> Vec<Batch<'_>> {
    assert!(batch_size > 0, "batch_size must be positive");
    let mut idx = handle.split_indices(split);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx.chunks(batch_size)
        .map(|chunk| Batch {
            demos: chunk.iter().map(|i| (*i, &handle.demos[*i])).collect(),
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema: String,
    version: u32,
    seed: u64,
    image_size: usize,
    joint_dim: usize,
    shapes: Vec<String>,
    colors: Vec<String>,
    vocabulary: Vec<String>,
    demos: Vec<DemoEntry>,
    files: Vec<FileEntry>,
}

#[derive(Serialize, Deserialize)]
struct DemoEntry {
    dir: String,
    verb: String,
    shape_id: usize,
    color_id: usize,
    /// (shape_id, color_id) of every scene object, target first.
    objects: Vec<(usize, usize)>,
    scene_seed: u64,
    frames: usize,
    split: String,
    tokens: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct FileEntry {
    path: String,
    sha256: String,
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn demo_stream_seed(master: u64, cell: usize, demo: usize, attempt: u64) -> u64 {
    splitmix(splitmix(splitmix(splitmix(master) ^ cell as u64) ^ demo as u64) ^ attempt)
}

/// Pick a distractor object for the scene: mostly hard negatives that share
/// the target's shape or color, so neither cue alone identifies the target.
fn sample_distractor(task: TaskSpec, rng: &mut ChaCha8Rng) -> (usize, usize) {
    loop {
        let r: f64 = rng.gen();
        let pair = if r < 0.4 {
            let mut c = rng.gen_range(0..catalog::n_colors());
            if c == task.color_id {
                c = (c + 1) % catalog::n_colors();
            }
            (task.shape_id, c)
        } else if r < 0.8 {
            let mut s = rng.gen_range(0..catalog::n_shapes());
            if s == task.shape_id {
                s = (s + 1) % catalog::n_shapes();
            }
            (s, task.color_id)
        } else {
            (
                rng.gen_range(0..catalog::n_shapes()),
                rng.gen_range(0..catalog::n_colors()),
            )
        };
        if pair != (task.shape_id, task.color_id) {
            return pair;
        }
    }
}

fn pack_mask(mask: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; mask.len().div_ceil(8)];
    for (i, b) in mask.iter().enumerate() {
        if *b {
            out[i / 8] |= 1 << (7 - i % 8);
        }
    }
    out
}

/// Generate one successful demonstration for the cell, retrying scene seeds
/// that are over-dense, infeasible, or on which the expert fails.
fn generate_demo(
    cell: TaskSpec,
    config: &DatasetConfig,
    master: u64,
    cell_idx: usize,
    demo_idx: usize,
) -> Result<(Scene, crate::sim::expert::Rollout, Command, u64), CorpusError> {
    for attempt in 0..MAX_ATTEMPTS {
        let scene_seed = demo_stream_seed(master, cell_idx, demo_idx, attempt);
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(scene_seed ^ 0xD15));
        let mut objects = vec![(cell.shape_id, cell.color_id)];
        for _ in 0..config.distractors {
            objects.push(sample_distractor(cell, &mut rng));
        }
        let scene = match make_scene(&SceneConfig::new(objects), &config.params, scene_seed) {
            Ok(s) => s,
            Err(SimError::OverDense { .. }) => continue,
            Err(e) => return Err(e.into()),
        };
        let rollout = match run_expert(&scene, cell, &config.params, config.max_steps) {
            Ok(r) => r,
            Err(SimError::InfeasibleTask { .. }) | Err(SimError::NoPushRoom { .. }) => continue,
            Err(e) => return Err(e.into()),
        };
        if !rollout.success {
            continue;
        }
        let command = grammar_sample(&scene.objects[0], cell.verb, splitmix(scene_seed ^ 0x6AA));
        return Ok((scene, rollout, command, scene_seed));
    }
    Err(CorpusError::Exhausted {
        verb: cell.verb.name().to_string(),
        shape: catalog::shape_name(cell.shape_id).to_string(),
        color: catalog::color_name(cell.color_id).to_string(),
        attempts: MAX_ATTEMPTS,
    })
}

/// Build, persist, and reload a dataset. Returning through the loader means
/// every build is also a full round-trip integrity check.
pub fn build_dataset(
    config: &DatasetConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetHandle, CorpusError> {
    let vocab = Vocabulary::standard();
    fs::create_dir_all(out_dir.join("demos")).map_err(io_err(out_dir))?;
    let mut entries = Vec::new();
    let mut files = Vec::new();
    let mut demo_counter = 0usize;
    for (cell_idx, cell) in config.cells.iter().enumerate() {
        for demo_idx in 0..config.demos_per_cell {
            let (scene0, rollout, command, scene_seed) =
                generate_demo(*cell, config, seed, cell_idx, demo_idx)?;
            let dir_rel = format!("demos/{demo_counter:05}");
            let dir = out_dir.join(&dir_rel);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;

            let n_objects = scene0.objects.len();
            let mut n_frames = 0;
            let mut traj = String::new();
            let mut masks_blob: Vec<u8> = Vec::new();
            for (t, scene) in rollout.scenes.iter().enumerate() {
                let out = render(scene, &config.params);
                let png_rel = format!("{dir_rel}/frame_{t:05}.png");
                let png_path = out_dir.join(&png_rel);
                crate::sim::render::save_png(&out.image, &png_path).map_err(|source| {
                    CorpusError::Image {
                        path: png_path.clone(),
                        source,
                    }
                })?;
                files.push((png_rel, sha256_of_file(&png_path)?));
                for mask in &out.object_masks {
                    masks_blob.extend(pack_mask(mask));
                }
                let line = serde_json::json!({"t": t, "joints": scene.arm.joints});
                traj.push_str(&line.to_string());
                traj.push('\n');
                n_frames += 1;
            }
            let traj_rel = format!("{dir_rel}/traj.jsonl");
            fs::write(out_dir.join(&traj_rel), &traj).map_err(io_err(out_dir))?;
            files.push((traj_rel, sha256_hex(traj.as_bytes())));

            let s = config.params.image_size;
            let mut masks_file = Vec::with_capacity(20 + masks_blob.len());
            masks_file.extend_from_slice(b"TFAM");
            masks_file.extend_from_slice(&(n_frames as u32).to_le_bytes());
            masks_file.extend_from_slice(&(n_objects as u32).to_le_bytes());
            masks_file.extend_from_slice(&(s as u32).to_le_bytes());
            masks_file.extend_from_slice(&(s as u32).to_le_bytes());
            masks_file.extend_from_slice(&masks_blob);
            let masks_rel = format!("{dir_rel}/masks.bin");
            fs::write(out_dir.join(&masks_rel), &masks_file).map_err(io_err(out_dir))?;
            files.push((masks_rel, sha256_hex(&masks_file)));

            entries.push(DemoEntry {
                dir: dir_rel,
                verb: cell.verb.name().to_string(),
                shape_id: cell.shape_id,
                color_id: cell.color_id,
                objects: scene0
                    .objects
                    .iter()
                    .map(|o| (o.shape_id, o.color_id))
                    .collect(),
                scene_seed,
                frames: n_frames,
                split: split_of(scene_seed).name().to_string(),
                tokens: command.tokens.clone(),
            });
            demo_counter += 1;
        }
    }
    files.sort_by(|a, b| a.0.cmp(&b.0));
    let manifest = Manifest {
        schema: SCHEMA.to_string(),
        version: SCHEMA_VERSION,
        seed,
        image_size: config.params.image_size,
        joint_dim: config.params.dof(),
        shapes: catalog::SHAPES.iter().map(|s| s.to_string()).collect(),
        colors: catalog::COLORS.iter().map(|s| s.to_string()).collect(),
        vocabulary: vocab.words().to_vec(),
        demos: entries,
        files: files
            .into_iter()
            .map(|(path, sha256)| FileEntry { path, sha256 })
            .collect(),
    };
    let manifest_path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, text).map_err(io_err(&manifest_path))?;
    load_dataset(out_dir)
}

fn sha256_of_file(path: &Path) -> Result<String, CorpusError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(sha256_hex(&bytes))
}

fn png_bytes_chw(path: &Path) -> Result<(usize, Vec<u8>), CorpusError> {
    let img = image::open(path)
        .map_err(|source| CorpusError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0u8; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for ch in 0..3 {
            data[ch * h * w + y as usize * w + x as usize] = p.0[ch];
        }
    }
    Ok((h, data))
}

/// Load and fully verify a dataset directory.
pub fn load_dataset(root: &Path) -> Result<DatasetHandle, CorpusError> {
    let manifest_path = root.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.schema != SCHEMA || manifest.version != SCHEMA_VERSION {
        return Err(CorpusError::Version {
            schema: manifest.schema,
            version: manifest.version,
        });
    }
    let shapes: Vec<String> = catalog::SHAPES.iter().map(|s| s.to_string()).collect();
    let colors: Vec<String> = catalog::COLORS.iter().map(|s| s.to_string()).collect();
    if manifest.shapes != shapes || manifest.colors != colors {
        return Err(CorpusError::CatalogMismatch(format!(
            "dataset has {:?}/{:?}",
            manifest.shapes, manifest.colors
        )));
    }
    for f in &manifest.files {
        let path = root.join(&f.path);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        if sha256_hex(&bytes) != f.sha256 {
            return Err(CorpusError::Corrupt { path });
        }
    }
    let vocab = Vocabulary::new(manifest.vocabulary.clone())
        .map_err(CorpusError::Inconsistent)?;
    let s = manifest.image_size;
    let mask_len = (s * s).div_ceil(8);
    let mut demos = Vec::with_capacity(manifest.demos.len());
    for entry in &manifest.demos {
        let verb = Verb::parse(&entry.verb)
            .ok_or_else(|| CorpusError::Inconsistent(format!("bad verb {:?}", entry.verb)))?;
        let command = Command::from_tokens(
            entry.tokens.clone(),
            verb,
            entry.shape_id,
            entry.color_id,
            &vocab,
        )
        .map_err(CorpusError::Inconsistent)?;
        let dir = root.join(&entry.dir);

        let mut frames = Vec::with_capacity(entry.frames);
        for t in 0..entry.frames {
            let (h, data) = png_bytes_chw(&dir.join(format!("frame_{t:05}.png")))?;
            if h != s {
                return Err(CorpusError::Inconsistent(format!(
                    "{}: frame size {h} != manifest {s}",
                    entry.dir
                )));
            }
            frames.push(data);
        }

        let traj_path = dir.join("traj.jsonl");
        let file = fs::File::open(&traj_path).map_err(io_err(&traj_path))?;
        let mut joints = Vec::with_capacity(entry.frames);
        for line in BufReader::new(file).lines() {
            let line = line.map_err(io_err(&traj_path))?;
            let v: serde_json::Value = serde_json::from_str(&line)?;
            let j: Vec<f64> = v["joints"]
                .as_array()
                .ok_or_else(|| CorpusError::Inconsistent("traj line missing joints".into()))?
                .iter()
                .map(|x| x.as_f64().unwrap_or(f64::NAN))
                .collect();
            if j.len() != manifest.joint_dim || j.iter().any(|x| !x.is_finite()) {
                return Err(CorpusError::Inconsistent(format!(
                    "{}: bad joints line",
                    entry.dir
                )));
            }
            joints.push(j);
        }
        if joints.len() != entry.frames || entry.frames < 2 {
            return Err(CorpusError::Inconsistent(format!(
                "{}: {} joints lines for {} frames",
                entry.dir,
                joints.len(),
                entry.frames
            )));
        }

        let n_objects = entry.objects.len();
        let masks_path = dir.join("masks.bin");
        let blob = fs::read(&masks_path).map_err(io_err(&masks_path))?;
        let header_ok = blob.len() == 20 + entry.frames * n_objects * mask_len
            && &blob[0..4] == b"TFAM"
            && u32::from_le_bytes(blob[4..8].try_into().unwrap()) as usize == entry.frames
            && u32::from_le_bytes(blob[8..12].try_into().unwrap()) as usize == n_objects
            && u32::from_le_bytes(blob[12..16].try_into().unwrap()) as usize == s
            && u32::from_le_bytes(blob[16..20].try_into().unwrap()) as usize == s;
        if !header_ok {
            return Err(CorpusError::Inconsistent(format!(
                "{}: bad masks.bin header",
                entry.dir
            )));
        }
        if n_objects == 0 || entry.objects[0] != (entry.shape_id, entry.color_id) {
            return Err(CorpusError::Inconsistent(format!(
                "{}: object list does not lead with the target",
                entry.dir
            )));
        }
        let masks = blob[20..]
            .chunks(n_objects * mask_len)
            .map(|frame| frame.chunks(mask_len).map(|c| c.to_vec()).collect())
            .collect::<Vec<Vec<Vec<u8>>>>();

        demos.push(Demonstration {
            dir: entry.dir.clone(),
            command,
            frames,
            joints,
            masks,
            objects: entry.objects.clone(),
            scene_seed: entry.scene_seed,
            split: Split::parse(&entry.split)
                .ok_or_else(|| CorpusError::Inconsistent(format!("bad split {:?}", entry.split)))?,
        });
    }
    Ok(DatasetHandle {
        root: root.to_path_buf(),
        vocab,
        image_size: s,
        joint_dim: manifest.joint_dim,
        seed: manifest.seed,
        demos,
    })
}

#[cfg(test)]
pub(crate) fn synthetic_handle(n_demos: usize) -> DatasetHandle {
    use crate::sim::types::Vec2;
    let vocab = Vocabulary::standard();
    let demos = (0..n_demos)
        .map(|i| {
            let obj = crate::sim::types::SceneObject {
                shape_id: 0,
                color_id: 0,
                position: Vec2::new(3.0, 0.8),
                size: 0.8,
                held: false,
            };
            let command = grammar_sample(&obj, Verb::PickUp, i as u64);
            Demonstration {
                dir: format!("demos/{i:05}"),
                command,
                frames: vec![vec![0u8; 12]; 2],
                joints: vec![vec![0.0; 4]; 2],
                masks: vec![vec![vec![0u8; 1]]; 2],
                objects: vec![(0, 0)],
                scene_seed: i as u64,
                split: split_of(i as u64),
            }
        })
        .collect();
    DatasetHandle {
        root: PathBuf::new(),
        vocab,
        image_size: 2,
        joint_dim: 4,
        seed: 0,
        demos,
    }
}

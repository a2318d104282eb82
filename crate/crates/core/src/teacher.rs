//! Task-focused attention teacher: a compact convolutional trunk turns a
//! frame into k region features, the sentence encoding steers a soft
//! attention map over them, and an auxiliary word classifier trains the
//! whole stack — attention emerges from reconstructing the command's word
//! set, with no spatial labels anywhere.

use std::fs;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::dataset::{sha256_hex, splitmix};
use crate::corpus::{DatasetHandle, Demonstration, Split};
use crate::nn::layers::xavier;
use crate::nn::{Adam, Binding, Conv, GradBuffer, Graph, Linear, NodeId, ParamId, ParamSet, Tensor};
use crate::sim::catalog;
use crate::text::{TextEncoder, TextError};

/// Probability clip for the word-reconstruction cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

pub const ATTN_SCHEMA: &str = "tfa-attn";
pub const ATTN_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error("image must be 3x{expected}x{expected} in [0,1], got {got} values")]
    ImageShape { expected: usize, got: usize },
    #[error("{what} contains a non-finite value")]
    NonFinite { what: String },
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("text: {0}")]
    Text(#[from] TextError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Inconsistent(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TeacherConfig {
    /// Input frames are 3 x image_size x image_size; must be a multiple of 8
    /// (the trunk halves the resolution three times).
    pub image_size: usize,
    pub c1: usize,
    pub c2: usize,
    pub d_phi: usize,
    pub d_psi: usize,
    pub d_tau: usize,
    pub d_x: usize,
    pub d_h: usize,
    pub max_len: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Frames sampled per demonstration for the word objective; the scene is
    /// nearly static per demo, so a handful of frames carries the signal.
    pub frames_per_demo: usize,
    /// Use the literal one-sided loss -X log X_hat instead of full binary
    /// cross-entropy (ablation only; the one-sided form is degenerate).
    pub one_sided: bool,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            image_size: 64,
            c1: 16,
            c2: 32,
            d_phi: 64,
            d_psi: 64,
            d_tau: 64,
            d_x: 32,
            d_h: 64,
            max_len: 12,
            epochs: 30,
            batch: 32,
            lr: 1e-3,
            frames_per_demo: 6,
            one_sided: false,
        }
    }
}

/// Per-region feature vectors from the trunk: phi_f is k x d_phi, row i is
/// the feature vector of grid cell i (row-major over the cell grid).
#[derive(Clone, Debug)]
pub struct RegionFeatures {
    pub phi_f: Tensor,
    pub grid: (usize, usize),
}

/// A soft attention map over the k regions; entries are strictly positive
/// and sum to 1.
#[derive(Clone, Debug)]
pub struct AttentionMap {
    pub p: Vec<f64>,
    pub grid: (usize, usize),
}

impl AttentionMap {
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.p.iter().enumerate() {
            if *v > self.p[best] {
                best = i;
            }
        }
        best
    }
}

/// Everything the teacher produces for one (frame, sentence) pair.
pub struct TeacherForward {
    pub map: AttentionMap,
    /// Attention-pooled region features s (length d_phi).
    pub pooled: Vec<f64>,
    /// Sentence encoding u (length d_h).
    pub text: Vec<f64>,
    /// Predicted word-set probabilities (length |V|).
    pub words: Vec<f64>,
}

pub struct Teacher {
    pub config: TeacherConfig,
    pub vocab_size: usize,
    pub ps: ParamSet,
    pub text: TextEncoder,
    conv1: Conv,
    conv2: Conv,
    conv3: Conv,
    w_f: ParamId,
    w_u: ParamId,
    w_p: ParamId,
    tau1: Linear,
    tau2: Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// None when the dataset has no validation demos.
    pub val_loss: Option<f64>,
}

impl Teacher {
    pub fn new(config: TeacherConfig, vocab_size: usize, seed: u64) -> Result<Self, TeacherError> {
        let s = config.image_size;
        if s < 8 || s % 8 != 0 {
            return Err(TeacherError::Dim(format!(
                "image size {s} is not a positive multiple of 8"
            )));
        }
        if config.d_phi == 0 || config.d_psi == 0 || config.d_tau == 0 || vocab_size == 0 {
            return Err(TeacherError::Dim("zero-sized layer".into()));
        }
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = TextEncoder::new(
            &mut ps,
            &mut rng,
            vocab_size,
            config.d_x,
            config.d_h,
            config.max_len,
        );
        let conv1 = Conv::new(&mut ps, &mut rng, "teacher.conv1", 3, config.c1, 3, 2, 1);
        let conv2 = Conv::new(&mut ps, &mut rng, "teacher.conv2", config.c1, config.c2, 3, 2, 1);
        let conv3 = Conv::new(&mut ps, &mut rng, "teacher.conv3", config.c2, config.d_phi, 3, 2, 1);
        let w_f = ps.add(
            "teacher.w_f",
            xavier(&mut rng, &[config.d_phi, config.d_psi], config.d_phi, config.d_psi),
        );
        let w_u = ps.add(
            "teacher.w_u",
            xavier(&mut rng, &[config.d_h, config.d_psi], config.d_h, config.d_psi),
        );
        let w_p = ps.add(
            "teacher.w_p",
            xavier(&mut rng, &[config.d_psi, 1], config.d_psi, 1),
        );
        let tau1 = Linear::new(&mut ps, &mut rng, "teacher.tau1", config.d_phi, config.d_tau);
        let tau2 = Linear::new(&mut ps, &mut rng, "teacher.tau2", config.d_tau, vocab_size);
        Ok(Teacher {
            config,
            vocab_size,
            ps,
            text,
            conv1,
            conv2,
            conv3,
            w_f,
            w_u,
            w_p,
            tau1,
            tau2,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.config.image_size / 8;
        (g, g)
    }

    /// Number of attention regions (final trunk map cells).
    pub fn k(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    /// Trunk: three stride-2 convolutions, relu between, reshaped so row i
    /// of the result is region i's d_phi-vector.
    fn trunk_node(
        &self,
        g: &mut Graph,
        bind: &mut Binding,
        ps: &ParamSet,
        image: &[f64],
    ) -> Result<NodeId, TeacherError> {
        let s = self.config.image_size;
        if image.len() != 3 * s * s {
            return Err(TeacherError::ImageShape {
                expected: s,
                got: image.len(),
            });
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err(TeacherError::NonFinite {
                what: "image".into(),
            });
        }
        let x = g.constant(Tensor::from_vec(&[1, 3, s, s], image.to_vec()));
        let c1 = self.conv1.forward(g, bind, ps, x);
        let r1 = g.relu(c1);
        let c2 = self.conv2.forward(g, bind, ps, r1);
        let r2 = g.relu(c2);
        let c3 = self.conv3.forward(g, bind, ps, r2);
        let r3 = g.relu(c3);
        // [1, d_phi, gr, gc] -> [d_phi, k] -> [k, d_phi]
        let flat = g.reshape(r3, &[self.config.d_phi, self.k()]);
        Ok(g.transpose(flat))
    }

    /// psi = tanh(phi W_f + repeat(u W_u)); p = softmax(psi W_p).
    fn attend_node(
        &self,
        g: &mut Graph,
        bind: &mut Binding,
        ps: &ParamSet,
        phi: NodeId,
        u: NodeId,
    ) -> NodeId {
        let wf = bind.node(g, ps, self.w_f);
        let wu = bind.node(g, ps, self.w_u);
        let wp = bind.node(g, ps, self.w_p);
        let k = g.val(phi).rows();
        let fw = g.matmul(phi, wf);
        let uw = g.matmul(u, wu);
        let uw_rep = g.repeat_rows(uw, k);
        let pre = g.add(fw, uw_rep);
        let psi = g.tanh(pre);
        let scores = g.matmul(psi, wp);
        let row = g.reshape(scores, &[1, k]);
        g.softmax(row)
    }

    /// X_hat = sigmoid(tau(s)) with a two-layer tanh perceptron.
    fn predict_node(&self, g: &mut Graph, bind: &mut Binding, ps: &ParamSet, s: NodeId) -> NodeId {
        let h = self.tau1.forward(g, bind, ps, s);
        let a = g.tanh(h);
        let o = self.tau2.forward(g, bind, ps, a);
        g.sigmoid(o)
    }

    fn loss_node(&self, g: &mut Graph, x_hat: NodeId, word_set: &[u8]) -> NodeId {
        let v = word_set.len();
        let clipped = g.clamp(x_hat, BCE_EPS, 1.0 - BCE_EPS);
        let x: Vec<f64> = word_set.iter().map(|b| *b as f64).collect();
        let ln_p = g.ln(clipped);
        let xc = g.constant(Tensor::from_vec(&[1, v], x.clone()));
        let pos = g.mul(xc, ln_p);
        let terms = if self.config.one_sided {
            pos
        } else {
            let one_minus_p = g.scale_shift(clipped, -1.0, 1.0);
            let ln_q = g.ln(one_minus_p);
            let xq = g.constant(Tensor::from_vec(
                &[1, v],
                x.iter().map(|b| 1.0 - b).collect(),
            ));
            let neg = g.mul(xq, ln_q);
            g.add(pos, neg)
        };
        let total = g.sum_all(terms);
        g.scale_shift(total, -1.0 / v as f64, 0.0)
    }

    /// Word-reconstruction loss of one (frame, sentence, word-set) triple;
    /// accumulates parameter gradients when `grads` is given.
    fn loss_parts(
        &self,
        ps: &ParamSet,
        image: &[f64],
        token_ids: &[usize],
        word_set: &[u8],
        grads: Option<&mut GradBuffer>,
    ) -> Result<f64, TeacherError> {
        if word_set.len() != self.vocab_size {
            return Err(TeacherError::Dim(format!(
                "word set has {} entries for vocabulary of {}",
                word_set.len(),
                self.vocab_size
            )));
        }
        let mut g = Graph::new();
        let mut bind = Binding::new(ps);
        let phi = self.trunk_node(&mut g, &mut bind, ps, image)?;
        let (u, _) = self.text.encode_ids(&mut g, &mut bind, ps, token_ids)?;
        let p = self.attend_node(&mut g, &mut bind, ps, phi, u);
        let s = g.matmul(p, phi);
        let x_hat = self.predict_node(&mut g, &mut bind, ps, s);
        let loss = self.loss_node(&mut g, x_hat, word_set);
        let value = g.val(loss).data()[0];
        if let Some(gb) = grads {
            g.backward(loss);
            bind.accumulate_grads(&g, gb);
        }
        Ok(value)
    }

    /// Region features of one frame (flat [3,S,S] values in [0,1]).
    pub fn region_features(&self, image: &[f64]) -> Result<RegionFeatures, TeacherError> {
        let mut g = Graph::new();
        let mut bind = Binding::new(&self.ps);
        let phi = self.trunk_node(&mut g, &mut bind, &self.ps, image)?;
        Ok(RegionFeatures {
            phi_f: g.val(phi).clone(),
            grid: self.grid(),
        })
    }

    /// Attention map for region features and a sentence encoding u.
    pub fn attend(&self, phi: &RegionFeatures, u: &[f64]) -> Result<AttentionMap, TeacherError> {
        let expect = [self.k(), self.config.d_phi];
        if phi.phi_f.shape() != expect {
            return Err(TeacherError::Dim(format!(
                "phi_f is {:?}, teacher expects {:?}",
                phi.phi_f.shape(),
                expect
            )));
        }
        if u.len() != self.config.d_h {
            return Err(TeacherError::Dim(format!(
                "u has {} entries, teacher expects {}",
                u.len(),
                self.config.d_h
            )));
        }
        if phi.phi_f.data().iter().any(|v| !v.is_finite()) {
            return Err(TeacherError::NonFinite {
                what: "phi_f".into(),
            });
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(TeacherError::NonFinite { what: "u".into() });
        }
        let mut g = Graph::new();
        let mut bind = Binding::new(&self.ps);
        let phin = g.constant(phi.phi_f.clone());
        let un = g.constant(Tensor::from_vec(&[1, self.config.d_h], u.to_vec()));
        let p = self.attend_node(&mut g, &mut bind, &self.ps, phin, un);
        Ok(AttentionMap {
            p: g.val(p).data().to_vec(),
            grid: phi.grid,
        })
    }

    /// Attention-pooled features s = sum_i p_i phi_f[i].
    pub fn pool(&self, phi: &RegionFeatures, p: &AttentionMap) -> Vec<f64> {
        let d = phi.phi_f.cols();
        assert_eq!(phi.phi_f.rows(), p.p.len());
        let mut out = vec![0.0; d];
        for (i, pi) in p.p.iter().enumerate() {
            for (j, o) in out.iter_mut().enumerate() {
                *o += pi * phi.phi_f.data()[i * d + j];
            }
        }
        out
    }

    /// Word-set probabilities from pooled features.
    pub fn predict_words(&self, s: &[f64]) -> Vec<f64> {
        assert_eq!(s.len(), self.config.d_phi);
        let mut g = Graph::new();
        let mut bind = Binding::new(&self.ps);
        let sn = g.constant(Tensor::from_vec(&[1, self.config.d_phi], s.to_vec()));
        let x_hat = self.predict_node(&mut g, &mut bind, &self.ps, sn);
        g.val(x_hat).data().to_vec()
    }

    /// Sentence encoding u for a tokenised command.
    pub fn encode_text(&self, token_ids: &[usize]) -> Result<Vec<f64>, TeacherError> {
        Ok(self.text.encode_vec(&self.ps, token_ids)?)
    }

    /// Full pipeline on one frame and sentence, in a single graph.
    pub fn forward(&self, image: &[f64], token_ids: &[usize]) -> Result<TeacherForward, TeacherError> {
        let mut g = Graph::new();
        let mut bind = Binding::new(&self.ps);
        let phi = self.trunk_node(&mut g, &mut bind, &self.ps, image)?;
        let (u, _) = self.text.encode_ids(&mut g, &mut bind, &self.ps, token_ids)?;
        let p = self.attend_node(&mut g, &mut bind, &self.ps, phi, u);
        let s = g.matmul(p, phi);
        let x_hat = self.predict_node(&mut g, &mut bind, &self.ps, s);
        Ok(TeacherForward {
            map: AttentionMap {
                p: g.val(p).data().to_vec(),
                grid: self.grid(),
            },
            pooled: g.val(s).data().to_vec(),
            text: g.val(u).data().to_vec(),
            words: g.val(x_hat).data().to_vec(),
        })
    }
}

/// Scalar word-reconstruction loss: full binary cross-entropy over the
/// vocabulary (or the literal one-sided form), probabilities clipped at
/// BCE_EPS, averaged over |V|.
pub fn attention_loss(x_hat: &[f64], word_set: &[u8], one_sided: bool) -> f64 {
    assert_eq!(x_hat.len(), word_set.len());
    let mut total = 0.0;
    for (p, x) in x_hat.iter().zip(word_set) {
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        let x = *x as f64;
        total += x * p.ln();
        if !one_sided {
            total += (1.0 - x) * (1.0 - p).ln();
        }
    }
    -total / x_hat.len() as f64
}

/// Evenly spaced frame indices: all frames when the demo is short, else n
/// indices from first to last.
fn frame_subsample(len: usize, n: usize) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    let n = n.max(1);
    if len <= n {
        return (0..len).collect();
    }
    if n == 1 {
        return vec![0];
    }
    (0..n)
        .map(|j| (j as f64 * (len - 1) as f64 / (n - 1) as f64).round() as usize)
        .collect()
}

fn samples_of(handle: &DatasetHandle, split: Split, frames_per_demo: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, d) in handle.demos.iter().enumerate() {
        if d.split != split {
            continue;
        }
        for t in frame_subsample(d.len(), frames_per_demo) {
            out.push((i, t));
        }
    }
    out
}

fn demo_token_ids(handle: &DatasetHandle) -> Result<Vec<Vec<usize>>, TeacherError> {
    handle
        .demos
        .iter()
        .map(|d| d.command.token_ids(&handle.vocab).map_err(TeacherError::Inconsistent))
        .collect()
}

/// Train a fresh teacher on the dataset's train split.
pub fn train_teacher(
    handle: &DatasetHandle,
    config: &TeacherConfig,
    seed: u64,
) -> Result<(Teacher, Vec<EpochRecord>), TeacherError> {
    let mut teacher = Teacher::new(config.clone(), handle.vocab.len(), seed)?;
    let records = train_teacher_from(&mut teacher, handle, seed)?;
    Ok((teacher, records))
}

/// Train an existing teacher in place (also the resume path).
pub fn train_teacher_from(
    teacher: &mut Teacher,
    handle: &DatasetHandle,
    seed: u64,
) -> Result<Vec<EpochRecord>, TeacherError> {
    let config = teacher.config.clone();
    if handle.image_size != config.image_size {
        return Err(TeacherError::Dim(format!(
            "dataset frames are {0}x{0}, teacher expects {1}x{1}",
            handle.image_size, config.image_size
        )));
    }
    let token_ids = demo_token_ids(handle)?;
    let train = samples_of(handle, Split::Train, config.frames_per_demo);
    let val = samples_of(handle, Split::Val, config.frames_per_demo);
    if train.is_empty() {
        return Err(TeacherError::Inconsistent(
            "dataset has no training demos".into(),
        ));
    }
    let mut adam = Adam::new(config.lr);
    let mut grads = GradBuffer::zeros_like(&teacher.ps);
    let mut records = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order = train.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed) ^ epoch as u64));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch, chunk) in order.chunks(config.batch.max(1)).enumerate() {
            // Catch blown-up parameters before they enter a graph, so
            // divergence surfaces as an error rather than a debug assert.
            if teacher.ps.iter().any(|(_, p)| !p.value.is_finite()) {
                return Err(TeacherError::Diverged {
                    epoch,
                    batch,
                    loss: f64::NAN,
                });
            }
            grads.zero();
            let mut batch_loss = 0.0;
            for &(di, t) in chunk {
                let demo = &handle.demos[di];
                batch_loss += teacher.loss_parts(
                    &teacher.ps,
                    &demo.frame_f64(t),
                    &token_ids[di],
                    &demo.command.word_set,
                    Some(&mut grads),
                )?;
            }
            let mean = batch_loss / chunk.len() as f64;
            if !mean.is_finite() {
                return Err(TeacherError::Diverged {
                    epoch,
                    batch,
                    loss: mean,
                });
            }
            grads.scale(1.0 / chunk.len() as f64);
            adam.step(&mut teacher.ps, &grads);
            loss_sum += batch_loss;
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            let mut s = 0.0;
            for &(di, t) in &val {
                let demo = &handle.demos[di];
                s += teacher.loss_parts(
                    &teacher.ps,
                    &demo.frame_f64(t),
                    &token_ids[di],
                    &demo.command.word_set,
                    None,
                )?;
            }
            Some(s / val.len() as f64)
        };
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
        });
    }
    Ok(records)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttnFileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttnManifest {
    pub schema: String,
    pub version: u32,
    pub k: usize,
    pub d_phi: usize,
    pub d_h: usize,
    pub files: Vec<AttnFileEntry>,
}

/// Precomputed teacher outputs for one demonstration.
pub struct DemoMaps {
    /// Sentence encoding u (d_h).
    pub u: Vec<f64>,
    /// Per-frame attention maps (k entries each).
    pub p: Vec<Vec<f64>>,
    /// Per-frame pooled features s (d_phi entries each).
    pub s: Vec<Vec<f64>>,
}

pub struct AttnCache {
    pub k: usize,
    pub d_phi: usize,
    pub d_h: usize,
    pub demos: Vec<DemoMaps>,
}

fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> TeacherError + '_ {
    move |source| TeacherError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Run the trained teacher over every frame of every demo and persist the
/// results next to the frames, so policy training never re-runs the teacher.
///
/// Layout of `attn.bin`: magic "TFAA", then u32 LE n_frames, k, d_phi, d_h,
/// then the demo's sentence encoding u (d_h f64 LE), then per frame the
/// attention map p (k f64) followed by the pooled features s (d_phi f64).
pub fn precompute_maps(
    teacher: &Teacher,
    handle: &DatasetHandle,
) -> Result<AttnManifest, TeacherError> {
    let mut files = Vec::with_capacity(handle.demos.len());
    for demo in &handle.demos {
        let ids = demo
            .command
            .token_ids(&handle.vocab)
            .map_err(TeacherError::Inconsistent)?;
        let mut blob = Vec::new();
        blob.extend_from_slice(b"TFAA");
        for dim in [demo.len(), teacher.k(), teacher.config.d_phi, teacher.config.d_h] {
            blob.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        let mut frame_part = Vec::new();
        let mut u_part = Vec::new();
        for t in 0..demo.len() {
            let fwd = teacher.forward(&demo.frame_f64(t), &ids)?;
            if t == 0 {
                for v in &fwd.text {
                    u_part.extend_from_slice(&v.to_le_bytes());
                }
            }
            for v in fwd.map.p.iter().chain(&fwd.pooled) {
                frame_part.extend_from_slice(&v.to_le_bytes());
            }
        }
        blob.extend_from_slice(&u_part);
        blob.extend_from_slice(&frame_part);
        let rel = format!("{}/attn.bin", demo.dir);
        let path = handle.root.join(&rel);
        fs::write(&path, &blob).map_err(io_err(&path))?;
        files.push(AttnFileEntry {
            path: rel,
            sha256: sha256_hex(&blob),
        });
    }
    let manifest = AttnManifest {
        schema: ATTN_SCHEMA.to_string(),
        version: ATTN_VERSION,
        k: teacher.k(),
        d_phi: teacher.config.d_phi,
        d_h: teacher.config.d_h,
        files,
    };
    let path = handle.root.join("attn_manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}

/// Load precomputed maps, verifying checksums and per-demo consistency.
pub fn load_maps(handle: &DatasetHandle) -> Result<AttnCache, TeacherError> {
    let path = handle.root.join("attn_manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: AttnManifest = serde_json::from_str(&text)?;
    if manifest.schema != ATTN_SCHEMA || manifest.version != ATTN_VERSION {
        return Err(TeacherError::Inconsistent(format!(
            "attention cache is {} v{}, this build reads {} v{}",
            manifest.schema, manifest.version, ATTN_SCHEMA, ATTN_VERSION
        )));
    }
    if manifest.files.len() != handle.demos.len() {
        return Err(TeacherError::Inconsistent(format!(
            "attention cache covers {} demos, dataset has {}",
            manifest.files.len(),
            handle.demos.len()
        )));
    }
    let (k, d_phi, d_h) = (manifest.k, manifest.d_phi, manifest.d_h);
    let mut demos = Vec::with_capacity(handle.demos.len());
    for (demo, entry) in handle.demos.iter().zip(&manifest.files) {
        if entry.path != format!("{}/attn.bin", demo.dir) {
            return Err(TeacherError::Inconsistent(format!(
                "cache entry {} does not match demo {}",
                entry.path, demo.dir
            )));
        }
        let path = handle.root.join(&entry.path);
        let blob = fs::read(&path).map_err(io_err(&path))?;
        if sha256_hex(&blob) != entry.sha256 {
            return Err(TeacherError::Inconsistent(format!(
                "{}: checksum mismatch",
                entry.path
            )));
        }
        let frame_bytes = (k + d_phi) * 8;
        let expect = 20 + d_h * 8 + demo.len() * frame_bytes;
        let header_ok = blob.len() == expect
            && &blob[0..4] == b"TFAA"
            && u32::from_le_bytes(blob[4..8].try_into().unwrap()) as usize == demo.len()
            && u32::from_le_bytes(blob[8..12].try_into().unwrap()) as usize == k
            && u32::from_le_bytes(blob[12..16].try_into().unwrap()) as usize == d_phi
            && u32::from_le_bytes(blob[16..20].try_into().unwrap()) as usize == d_h;
        if !header_ok {
            return Err(TeacherError::Inconsistent(format!(
                "{}: bad attn.bin header",
                entry.path
            )));
        }
        let floats: Vec<f64> = blob[20..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if floats.iter().any(|v| !v.is_finite()) {
            return Err(TeacherError::NonFinite {
                what: format!("{} contents", entry.path),
            });
        }
        let u = floats[..d_h].to_vec();
        let mut p = Vec::with_capacity(demo.len());
        let mut s = Vec::with_capacity(demo.len());
        for t in 0..demo.len() {
            let at = d_h + t * (k + d_phi);
            let pt = floats[at..at + k].to_vec();
            let sum: f64 = pt.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || pt.iter().any(|v| *v <= 0.0) {
                return Err(TeacherError::Inconsistent(format!(
                    "{}: frame {t} attention map is not a distribution",
                    entry.path
                )));
            }
            p.push(pt);
            s.push(floats[at + k..at + k + d_phi].to_vec());
        }
        demos.push(DemoMaps { u, p, s });
    }
    Ok(AttnCache { k, d_phi, d_h, demos })
}

/// Grid cells the mask touches (any pixel inside the cell on).
fn mask_cells(mask: &[f64], image_size: usize, grid: (usize, usize)) -> Vec<bool> {
    let (gr, gc) = grid;
    assert_eq!(mask.len(), image_size * image_size);
    let ch = image_size / gr;
    let cw = image_size / gc;
    let mut cells = vec![false; gr * gc];
    for (i, c) in cells.iter_mut().enumerate() {
        let (r0, c0) = (i / gc * ch, i % gc * cw);
        *c = (r0..r0 + ch)
            .any(|y| (c0..c0 + cw).any(|x| mask[y * image_size + x] > 0.5));
    }
    cells
}

/// Fraction of attention mass inside the cells the object's mask touches.
pub fn localization_mass(map: &AttentionMap, mask: &[f64], image_size: usize) -> f64 {
    let cells = mask_cells(mask, image_size, map.grid);
    map.p
        .iter()
        .zip(&cells)
        .filter(|(_, in_mask)| **in_mask)
        .map(|(p, _)| p)
        .sum()
}

#[derive(Clone, Debug, Serialize)]
pub struct TeacherMetrics {
    /// Mean attention mass on the commanded target (validation frames).
    pub localization: f64,
    /// Fraction of validation samples whose thresholded word set is exact.
    pub word_recall: f64,
    /// Fraction of two-object validation scenes where swapping the
    /// commanded color moves the attention argmax from the target's cells
    /// to the distractor's.
    pub color_swap: f64,
    pub n_localization: usize,
    pub n_word: usize,
    pub n_swap: usize,
}

fn swap_color_tokens(
    demo: &Demonstration,
    from_color: usize,
    to_color: usize,
    handle: &DatasetHandle,
) -> Result<Vec<usize>, TeacherError> {
    let from = catalog::color_name(from_color);
    let to = catalog::color_name(to_color);
    demo.command
        .tokens
        .iter()
        .map(|t| {
            let w = if t == from { to } else { t.as_str() };
            handle
                .vocab
                .index_of(w)
                .ok_or_else(|| TeacherError::Inconsistent(format!("{w:?} not in vocabulary")))
        })
        .collect()
}

/// Measure the trained teacher on the validation split.
pub fn evaluate_teacher(
    teacher: &Teacher,
    handle: &DatasetHandle,
) -> Result<TeacherMetrics, TeacherError> {
    let size = handle.image_size;
    let (mut loc_sum, mut n_loc) = (0.0, 0usize);
    let (mut word_hits, mut n_word) = (0usize, 0usize);
    let (mut swap_hits, mut n_swap) = (0usize, 0usize);
    for demo in handle.demos.iter().filter(|d| d.split == Split::Val) {
        let ids = demo
            .command
            .token_ids(&handle.vocab)
            .map_err(TeacherError::Inconsistent)?;
        for t in frame_subsample(demo.len(), teacher.config.frames_per_demo) {
            let fwd = teacher.forward(&demo.frame_f64(t), &ids)?;
            loc_sum += localization_mass(&fwd.map, &demo.mask_f64(t, 0, size), size);
            n_loc += 1;
            let set: Vec<u8> = fwd.words.iter().map(|p| u8::from(*p >= 0.5)).collect();
            word_hits += usize::from(set == demo.command.word_set);
            n_word += 1;
        }
        // Color-swap sensitivity needs a same-shape distractor in another
        // color, so the swapped sentence names exactly the other object.
        if demo.objects.len() >= 2 {
            let (ts, tc) = demo.objects[0];
            let (ds, dc) = demo.objects[1];
            if ds == ts && dc != tc {
                let swapped = swap_color_tokens(demo, tc, dc, handle)?;
                let image = demo.frame_f64(0);
                let p_orig = teacher.forward(&image, &ids)?.map;
                let p_swap = teacher.forward(&image, &swapped)?.map;
                let target_cells = mask_cells(&demo.mask_f64(0, 0, size), size, p_orig.grid);
                let other_cells = mask_cells(&demo.mask_f64(0, 1, size), size, p_swap.grid);
                swap_hits +=
                    usize::from(target_cells[p_orig.argmax()] && other_cells[p_swap.argmax()]);
                n_swap += 1;
            }
        }
    }
    Ok(TeacherMetrics {
        localization: loc_sum / n_loc.max(1) as f64,
        word_recall: word_hits as f64 / n_word.max(1) as f64,
        color_swap: swap_hits as f64 / n_swap.max(1) as f64,
        n_localization: n_loc,
        n_word,
        n_swap,
    })
}

//! Synthetic multi-subject fMRI datasets and the frozen teacher encoder.
//!
//! A stimulus is a class id plus a small vector of geometry parameters. A
//! shared nonlinear latent code of the stimulus is mixed into each subject's
//! voxel space through a spatially smooth basis that all subjects share,
//! perturbed per subject by `subject_variability`. The teacher maps the same
//! stimulus to image-side and text-side token blocks; it is a fixed random
//! affine map and never trained.
//!
//! On-disk layout:
//!
//! ```text
//! manifest.json          DatasetManifest (UTF-8 JSON)
//! stimuli.json           all StimulusSpec records
//! teacher.bin            f32 LE, per stimulus: image tokens then text tokens
//! subj_<id>/voxels.bin   f32 LE, recordings in stimulus-id order, M_i * D_i values
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed;

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Parameters of the frozen teacher encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub seed: u64,
    pub classes: usize,
    pub geometry_dim: usize,
    /// T_g
    pub image_tokens: usize,
    /// T_s
    pub text_tokens: usize,
    /// D_b
    pub width: usize,
    /// Standard deviation of the per-token offsets shared by all stimuli.
    pub offset_scale: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self { seed: 0, classes: 20, geometry_dim: 8, image_tokens: 17, text_tokens: 9, width: 64, offset_scale: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StimulusSpec {
    pub stimulus_id: u32,
    pub class_id: u32,
    pub geometry_params: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherFeatures {
    /// (T_g × D_b)
    pub image_tokens: Array2<f32>,
    /// (T_s × D_b)
    pub text_tokens: Array2<f32>,
}

/// Frozen teacher: image tokens are an affine function of
/// `[one_hot(class), geometry]`, text tokens of `one_hot(class)` only.
#[derive(Clone, Debug)]
pub struct Teacher {
    cfg: TeacherConfig,
    image_map: Array2<f64>,
    image_offset: Array1<f64>,
    text_map: Array2<f64>,
    text_offset: Array1<f64>,
}

impl Teacher {
    pub fn new(cfg: &TeacherConfig) -> Self {
        let (c, p) = (cfg.classes, cfg.geometry_dim);
        let img_len = cfg.image_tokens * cfg.width;
        let txt_len = cfg.text_tokens * cfg.width;
        let img_std = 1.0 / (1.0 + p as f64 / 3.0).sqrt();
        let mut rng = seed::rng(cfg.seed, "teacher.image", 0);
        let image_map = crate::nn::gaussian(&mut rng, c + p, img_len, img_std);
        let image_offset = crate::nn::gaussian(&mut rng, 1, img_len, cfg.offset_scale).row(0).to_owned();
        let mut rng = seed::rng(cfg.seed, "teacher.text", 0);
        let text_map = crate::nn::gaussian(&mut rng, c, txt_len, 1.0);
        let text_offset = crate::nn::gaussian(&mut rng, 1, txt_len, cfg.offset_scale).row(0).to_owned();
        Self { cfg: cfg.clone(), image_map, image_offset, text_map, text_offset }
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.cfg
    }

    pub fn encode(&self, spec: &StimulusSpec) -> Result<TeacherFeatures> {
        let cfg = &self.cfg;
        let class = spec.class_id as usize;
        if class >= cfg.classes {
            return Err(Error::Domain(format!("class_id {} out of range [0, {})", class, cfg.classes)));
        }
        if spec.geometry_params.len() != cfg.geometry_dim {
            return Err(Error::Shape(format!(
                "geometry has {} parameters, teacher expects {}",
                spec.geometry_params.len(),
                cfg.geometry_dim
            )));
        }
        // one_hot(class) · map selects a row
        let mut img = &self.image_offset + &self.image_map.row(class);
        for (k, &g) in spec.geometry_params.iter().enumerate() {
            img.scaled_add(g, &self.image_map.row(cfg.classes + k));
        }
        let txt = &self.text_offset + &self.text_map.row(class);
        let to_f32 = |v: Array1<f64>, rows: usize| {
            v.mapv(|x| x as f32).into_shape_with_order((rows, cfg.width)).expect("token shape")
        };
        Ok(TeacherFeatures { image_tokens: to_f32(img, cfg.image_tokens), text_tokens: to_f32(txt, cfg.text_tokens) })
    }
}

pub fn teacher_encode(spec: &StimulusSpec, cfg: &TeacherConfig) -> Result<TeacherFeatures> {
    Teacher::new(cfg).encode(spec)
}

/// Generator settings. Defaults are the desk-scale sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataGenConfig {
    pub seed: u64,
    /// N
    pub subjects: usize,
    /// M_i, identical for every subject
    pub samples_per_subject: usize,
    /// D_i is drawn uniformly from this inclusive range unless `voxel_counts` is set.
    pub voxel_min: usize,
    pub voxel_max: usize,
    pub voxel_counts: Option<Vec<usize>>,
    pub latent_dim: usize,
    /// σ_subj
    pub subject_variability: f64,
    pub noise_sigma: f64,
    pub test_fraction: f64,
    /// Fraction of each subject's stimuli drawn from a pool shared by all subjects.
    pub overlap: f64,
    pub smoothing_window: usize,
    pub teacher: TeacherConfig,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            subjects: 4,
            samples_per_subject: 2000,
            voxel_min: 500,
            voxel_max: 1024,
            voxel_counts: None,
            latent_dim: 32,
            subject_variability: 0.1,
            noise_sigma: 0.3,
            test_fraction: 0.1,
            overlap: 1.0,
            smoothing_window: 5,
            teacher: TeacherConfig::default(),
        }
    }
}

impl DataGenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.subjects == 0 || self.samples_per_subject == 0 {
            return bad("subjects and samples_per_subject must be positive".into());
        }
        if let Some(v) = &self.voxel_counts {
            if v.len() != self.subjects {
                return bad(format!("voxel_counts has {} entries for {} subjects", v.len(), self.subjects));
            }
            if v.iter().any(|&d| d < 2) {
                return bad("voxel counts must be at least 2".into());
            }
        } else if self.voxel_min < 2 || self.voxel_min > self.voxel_max {
            return bad(format!("invalid voxel range [{}, {}]", self.voxel_min, self.voxel_max));
        }
        if !(0.0..=1.0).contains(&self.overlap) || !(0.0..1.0).contains(&self.test_fraction) {
            return bad("overlap must lie in [0,1] and test_fraction in [0,1)".into());
        }
        if self.subject_variability < 0.0 || self.noise_sigma < 0.0 {
            return bad("subject_variability and noise_sigma must be nonnegative".into());
        }
        if self.teacher.classes == 0 || self.latent_dim == 0 || self.smoothing_window == 0 {
            return bad("classes, latent_dim and smoothing_window must be positive".into());
        }
        Ok(())
    }

    fn voxel_count(&self, subject: usize) -> usize {
        match &self.voxel_counts {
            Some(v) => v[subject],
            None => seed::rng(self.seed, "voxel_count", subject as u64).gen_range(self.voxel_min..=self.voxel_max),
        }
    }

    fn shared_pool(&self) -> usize {
        (self.overlap * self.samples_per_subject as f64).round() as usize
    }

    /// Number of distinct stimuli across all subjects.
    pub fn unique_stimuli(&self) -> usize {
        let shared = self.shared_pool();
        shared + self.subjects * (self.samples_per_subject - shared)
    }
}

#[derive(Clone, Debug)]
pub struct SubjectProfile {
    pub subject_id: u32,
    pub voxel_count: usize,
    /// (D_i × d_f)
    pub mixing_matrix: Array2<f64>,
    pub noise_sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FmriRecording {
    pub subject_id: u32,
    pub stimulus_id: u32,
    pub voxels: Vec<f32>,
}

/// Moving average along rows, truncated at the edges, rescaled so that
/// i.i.d. unit-variance input keeps roughly unit variance.
fn smooth_rows(x: &Array2<f64>, window: usize) -> Array2<f64> {
    let n = x.nrows();
    let half = window / 2;
    let mut out = Array2::zeros(x.raw_dim());
    for i in 0..n {
        let lo = i.saturating_sub(half);
        let hi = (i + window - half).min(n);
        let mean = x.slice(s![lo..hi, ..]).mean_axis(ndarray::Axis(0)).expect("nonempty window");
        out.row_mut(i).assign(&(mean * ((hi - lo) as f64).sqrt()));
    }
    out
}

/// Resample `base` (L × d) to `rows` rows by linear interpolation on the
/// normalized voxel axis.
fn resample_rows(base: &Array2<f64>, rows: usize) -> Array2<f64> {
    let l = base.nrows();
    let mut out = Array2::zeros((rows, base.ncols()));
    for v in 0..rows {
        let pos = if rows > 1 { v as f64 * (l - 1) as f64 / (rows - 1) as f64 } else { 0.0 };
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(l - 1);
        let t = pos - i0 as f64;
        let row = &base.row(i0) * (1.0 - t) + &base.row(i1) * t;
        out.row_mut(v).assign(&row);
    }
    out
}

/// Shared generative structure: latent code map and the smooth voxel basis.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    cfg: DataGenConfig,
    latent_map: Array2<f64>,
    latent_bias: Array1<f64>,
    basis: Array2<f64>,
}

impl SyntheticWorld {
    pub fn new(cfg: &DataGenConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, p, df) = (cfg.teacher.classes, cfg.teacher.geometry_dim, cfg.latent_dim);
        let mut rng = seed::rng(cfg.seed, "latent", 0);
        let latent_map = crate::nn::gaussian(&mut rng, df, c + p, 1.5 / (1.0 + p as f64 / 3.0).sqrt());
        let latent_bias = crate::nn::gaussian(&mut rng, 1, df, 0.1).row(0).to_owned();
        let base_len = (0..cfg.subjects).map(|i| cfg.voxel_count(i)).max().unwrap_or(2).max(cfg.voxel_max);
        let mut rng = seed::rng(cfg.seed, "basis", 0);
        let raw = crate::nn::gaussian(&mut rng, base_len, df, 1.0 / (df as f64).sqrt());
        let basis = smooth_rows(&raw, cfg.smoothing_window);
        Ok(Self { cfg: cfg.clone(), latent_map, latent_bias, basis })
    }

    /// Deterministic latent code shared by all subjects:
    /// `tanh(R [one_hot(class), geometry] + b)`.
    pub fn latent(&self, spec: &StimulusSpec) -> Array1<f64> {
        let c = self.cfg.teacher.classes;
        let mut pre = &self.latent_bias + &self.latent_map.column(spec.class_id as usize % c);
        for (k, &g) in spec.geometry_params.iter().enumerate() {
            pre.scaled_add(g, &self.latent_map.column(c + k));
        }
        pre.mapv(f64::tanh)
    }

    pub fn profile(&self, subject_id: u32) -> SubjectProfile {
        let d = self.cfg.voxel_count(subject_id as usize);
        let mut mixing = resample_rows(&self.basis, d);
        if self.cfg.subject_variability > 0.0 {
            let mut rng = seed::rng(self.cfg.seed, "subject_perturbation", u64::from(subject_id));
            let raw = crate::nn::gaussian(&mut rng, d, self.cfg.latent_dim, 1.0 / (self.cfg.latent_dim as f64).sqrt());
            let pert = smooth_rows(&raw, self.cfg.smoothing_window);
            mixing.scaled_add(self.cfg.subject_variability, &pert);
        }
        SubjectProfile { subject_id, voxel_count: d, mixing_matrix: mixing, noise_sigma: self.cfg.noise_sigma }
    }

    pub fn synthesize_recording<R: Rng>(
        &self,
        profile: &SubjectProfile,
        spec: &StimulusSpec,
        rng: &mut R,
    ) -> FmriRecording {
        synthesize_recording(profile, &self.latent(spec), spec.stimulus_id, rng)
    }
}

/// `voxels = mixing · latent + N(0, noise_sigma²)`.
pub fn synthesize_recording<R: Rng>(
    profile: &SubjectProfile,
    latent: &Array1<f64>,
    stimulus_id: u32,
    rng: &mut R,
) -> FmriRecording {
    let clean = profile.mixing_matrix.dot(latent);
    let voxels = if profile.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, profile.noise_sigma).expect("valid sigma");
        clean.iter().map(|&v| (v + normal.sample(rng)) as f32).collect()
    } else {
        clean.iter().map(|&v| v as f32).collect()
    };
    FmriRecording { subject_id: profile.subject_id, stimulus_id, voxels }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub subject_id: u32,
    pub voxel_count: usize,
    pub samples: usize,
    /// Stimuli seen by this subject, ascending; recordings are stored in this order.
    pub stimulus_ids: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub subjects: usize,
    pub classes: usize,
    pub geometry_dim: usize,
    pub latent_dim: usize,
    pub subject_variability: f64,
    pub noise_sigma: f64,
    pub teacher: TeacherConfig,
    pub subject_entries: Vec<SubjectEntry>,
    pub train_stimuli: Vec<u32>,
    pub test_stimuli: Vec<u32>,
    pub generator: DataGenConfig,
    /// Relative path → digest, for every payload file.
    pub files: BTreeMap<String, FileDigest>,
}

impl DatasetManifest {
    pub fn total_recordings(&self) -> usize {
        self.subject_entries.iter().map(|s| s.samples).sum()
    }

    pub fn subject_ids(&self) -> Vec<u32> {
        self.subject_entries.iter().map(|s| s.subject_id).collect()
    }

    /// Hex SHA-256 of the serialized manifest.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec_pretty(self).expect("manifest serializes")))
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "dataset: {} subjects, {} recordings, {} train / {} test stimuli, sigma_subj={}, seed={}\n",
            self.subjects,
            self.total_recordings(),
            self.train_stimuli.len(),
            self.test_stimuli.len(),
            self.subject_variability,
            self.seed
        );
        for e in &self.subject_entries {
            s.push_str(&format!("  subject {}: D_i={} M_i={}\n", e.subject_id, e.voxel_count, e.samples));
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectData {
    pub subject_id: u32,
    pub voxel_count: usize,
    pub stimulus_ids: Vec<u32>,
    /// M_i * D_i, recordings concatenated in `stimulus_ids` order
    pub voxels: Vec<f32>,
}

impl SubjectData {
    pub fn recording(&self, pos: usize) -> &[f32] {
        &self.voxels[pos * self.voxel_count..(pos + 1) * self.voxel_count]
    }
}

/// Reference to one recording: subject position in the dataset and
/// recording position within that subject.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleRef {
    pub subject: usize,
    pub pos: usize,
}

/// A recording together with its teacher targets.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub subject_id: u32,
    pub stimulus_id: u32,
    pub voxels: &'a [f32],
    pub image_tokens: ArrayView2<'a, f32>,
    pub text_tokens: ArrayView2<'a, f32>,
}

/// An in-memory dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub stimuli: Vec<StimulusSpec>,
    pub subjects: Vec<SubjectData>,
    /// Per stimulus (indexed by id): T_g·D_b image values then T_s·D_b text values.
    pub teacher: Vec<f32>,
    test_mask: Vec<bool>,
}

fn digest(bytes: &[u8]) -> FileDigest {
    FileDigest { bytes: bytes.len() as u64, sha256: hex::encode(Sha256::digest(bytes)) }
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn f32_from_bytes(b: &[u8]) -> Vec<f32> {
    b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

impl Dataset {
    /// Generate a dataset in memory. Fully determined by `cfg`.
    pub fn generate(cfg: &DataGenConfig) -> Result<Self> {
        let world = SyntheticWorld::new(cfg)?;
        let teacher = Teacher::new(&cfg.teacher);
        let n_stim = cfg.unique_stimuli();
        let shared = cfg.shared_pool();
        let per_subject_unique = cfg.samples_per_subject - shared;

        let mut rng = seed::rng(cfg.seed, "stimuli", 0);
        let stimuli: Vec<StimulusSpec> = (0..n_stim as u32)
            .map(|id| StimulusSpec {
                stimulus_id: id,
                class_id: rng.gen_range(0..cfg.teacher.classes as u32),
                geometry_params: (0..cfg.teacher.geometry_dim).map(|_| rng.gen_range(-1.0..=1.0)).collect(),
            })
            .collect();

        let n_test = (cfg.test_fraction * n_stim as f64).ceil() as usize;
        let mut order: Vec<u32> = (0..n_stim as u32).collect();
        order.shuffle(&mut seed::rng(cfg.seed, "split", 0));
        let mut test_stimuli = order[..n_test].to_vec();
        let mut train_stimuli = order[n_test..].to_vec();
        test_stimuli.sort_unstable();
        train_stimuli.sort_unstable();

        let mut teacher_buf =
            Vec::with_capacity(n_stim * (cfg.teacher.image_tokens + cfg.teacher.text_tokens) * cfg.teacher.width);
        for spec in &stimuli {
            let f = teacher.encode(spec)?;
            teacher_buf.extend(f.image_tokens.iter());
            teacher_buf.extend(f.text_tokens.iter());
        }

        let latents: Vec<Array1<f64>> = stimuli.iter().map(|s| world.latent(s)).collect();
        let mut subjects = Vec::with_capacity(cfg.subjects);
        let mut entries = Vec::with_capacity(cfg.subjects);
        for i in 0..cfg.subjects {
            let profile = world.profile(i as u32);
            let start = (shared + i * per_subject_unique) as u32;
            let stimulus_ids: Vec<u32> = (0..shared as u32).chain(start..start + per_subject_unique as u32).collect();
            let mut noise_rng = seed::rng(cfg.seed, "noise", i as u64);
            let mut voxels = Vec::with_capacity(stimulus_ids.len() * profile.voxel_count);
            for &sid in &stimulus_ids {
                let rec = synthesize_recording(&profile, &latents[sid as usize], sid, &mut noise_rng);
                voxels.extend_from_slice(&rec.voxels);
            }
            entries.push(SubjectEntry {
                subject_id: i as u32,
                voxel_count: profile.voxel_count,
                samples: stimulus_ids.len(),
                stimulus_ids: stimulus_ids.clone(),
            });
            subjects.push(SubjectData { subject_id: i as u32, voxel_count: profile.voxel_count, stimulus_ids, voxels });
        }

        let mut manifest = DatasetManifest {
            format_version: DATASET_FORMAT_VERSION,
            seed: cfg.seed,
            subjects: cfg.subjects,
            classes: cfg.teacher.classes,
            geometry_dim: cfg.teacher.geometry_dim,
            latent_dim: cfg.latent_dim,
            subject_variability: cfg.subject_variability,
            noise_sigma: cfg.noise_sigma,
            teacher: cfg.teacher.clone(),
            subject_entries: entries,
            train_stimuli,
            test_stimuli,
            generator: cfg.clone(),
            files: BTreeMap::new(),
        };
        let mut ds =
            Self { manifest: manifest.clone(), stimuli, subjects, teacher: teacher_buf, test_mask: Vec::new() };
        manifest.files = ds.payloads().into_iter().map(|(name, bytes)| (name, digest(&bytes))).collect();
        ds.manifest = manifest;
        ds.rebuild_index();
        Ok(ds)
    }

    fn rebuild_index(&mut self) {
        self.test_mask = vec![false; self.stimuli.len()];
        for &t in &self.manifest.test_stimuli {
            if let Some(m) = self.test_mask.get_mut(t as usize) {
                *m = true;
            }
        }
    }

    fn payloads(&self) -> Vec<(String, Vec<u8>)> {
        let mut out = vec![
            ("stimuli.json".to_string(), serde_json::to_vec_pretty(&self.stimuli).expect("stimuli serialize")),
            ("teacher.bin".to_string(), f32_bytes(&self.teacher)),
        ];
        for s in &self.subjects {
            out.push((format!("subj_{}/voxels.bin", s.subject_id), f32_bytes(&s.voxels)));
        }
        out
    }

    /// Write the on-disk layout into `dir` (created if missing).
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, bytes) in self.payloads() {
            let path = dir.join(&name);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        let path = dir.join("manifest.json");
        let json = serde_json::to_vec_pretty(&self.manifest).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    /// Load and verify a dataset directory. Any payload whose size or digest
    /// disagrees with the manifest is reported as an integrity error naming the file.
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let raw = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: DatasetManifest = serde_json::from_slice(&raw).map_err(|e| Error::json(&mpath, e))?;
        if manifest.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::integrity(&mpath, format!("unsupported format_version {}", manifest.format_version)));
        }
        let read_checked = |name: &str| -> Result<Vec<u8>> {
            let path = dir.join(name);
            let expected = manifest
                .files
                .get(name)
                .ok_or_else(|| Error::integrity(&mpath, format!("manifest lists no digest for {name}")))?;
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let got = digest(&bytes);
            if got.bytes != expected.bytes {
                return Err(Error::integrity(&path, format!("size {} != manifest {}", got.bytes, expected.bytes)));
            }
            if got.sha256 != expected.sha256 {
                return Err(Error::integrity(&path, "sha256 digest does not match manifest"));
            }
            Ok(bytes)
        };

        let spath = dir.join("stimuli.json");
        let stimuli: Vec<StimulusSpec> =
            serde_json::from_slice(&read_checked("stimuli.json")?).map_err(|e| Error::json(&spath, e))?;
        for (i, s) in stimuli.iter().enumerate() {
            if s.stimulus_id as usize != i {
                return Err(Error::integrity(&spath, format!("stimulus at position {i} has id {}", s.stimulus_id)));
            }
        }
        let tcfg = &manifest.teacher;
        let per_stim = (tcfg.image_tokens + tcfg.text_tokens) * tcfg.width;
        let teacher = f32_from_bytes(&read_checked("teacher.bin")?);
        if teacher.len() != per_stim * stimuli.len() {
            return Err(Error::integrity(dir.join("teacher.bin"), "length disagrees with stimulus count"));
        }

        let mut subjects = Vec::with_capacity(manifest.subject_entries.len());
        for e in &manifest.subject_entries {
            let name = format!("subj_{}/voxels.bin", e.subject_id);
            let voxels = f32_from_bytes(&read_checked(&name)?);
            let path = dir.join(&name);
            if voxels.len() != e.samples * e.voxel_count || e.stimulus_ids.len() != e.samples {
                return Err(Error::integrity(&path, "recording count or length disagrees with manifest"));
            }
            if voxels.iter().any(|v| !v.is_finite()) {
                return Err(Error::integrity(&path, "non-finite voxel value"));
            }
            if e.stimulus_ids.iter().any(|&s| s as usize >= stimuli.len()) {
                return Err(Error::integrity(
                    &mpath,
                    format!("subject {} references an unknown stimulus", e.subject_id),
                ));
            }
            subjects.push(SubjectData {
                subject_id: e.subject_id,
                voxel_count: e.voxel_count,
                stimulus_ids: e.stimulus_ids.clone(),
                voxels,
            });
        }
        let train: BTreeSet<u32> = manifest.train_stimuli.iter().copied().collect();
        if manifest.test_stimuli.iter().any(|t| train.contains(t)) {
            return Err(Error::integrity(&mpath, "train and test stimulus sets overlap"));
        }
        let mut ds = Self { manifest, stimuli, subjects, teacher, test_mask: Vec::new() };
        ds.rebuild_index();
        Ok(ds)
    }

    pub fn teacher_config(&self) -> &TeacherConfig {
        &self.manifest.teacher
    }

    pub fn is_test(&self, stimulus_id: u32) -> bool {
        self.test_mask.get(stimulus_id as usize).copied().unwrap_or(false)
    }

    pub fn subject_index(&self, subject_id: u32) -> Option<usize> {
        self.subjects.iter().position(|s| s.subject_id == subject_id)
    }

    pub fn teacher_features(&self, stimulus_id: u32) -> (ArrayView2<'_, f32>, ArrayView2<'_, f32>) {
        let t = &self.manifest.teacher;
        let img = t.image_tokens * t.width;
        let per = img + t.text_tokens * t.width;
        let base = stimulus_id as usize * per;
        let image = ArrayView2::from_shape((t.image_tokens, t.width), &self.teacher[base..base + img]).expect("shape");
        let text =
            ArrayView2::from_shape((t.text_tokens, t.width), &self.teacher[base + img..base + per]).expect("shape");
        (image, text)
    }

    pub fn sample(&self, r: SampleRef) -> Sample<'_> {
        let subj = &self.subjects[r.subject];
        let stimulus_id = subj.stimulus_ids[r.pos];
        let (image_tokens, text_tokens) = self.teacher_features(stimulus_id);
        Sample { subject_id: subj.subject_id, stimulus_id, voxels: subj.recording(r.pos), image_tokens, text_tokens }
    }

    pub fn recording(&self, r: SampleRef) -> FmriRecording {
        let s = self.sample(r);
        FmriRecording { subject_id: s.subject_id, stimulus_id: s.stimulus_id, voxels: s.voxels.to_vec() }
    }

    /// All recordings of the listed subjects (all subjects if `None`) in
    /// the requested split, in (subject, stimulus) order.
    pub fn sample_refs(&self, subjects: Option<&[u32]>, split: Split) -> Vec<SampleRef> {
        let mut out = Vec::new();
        for (si, s) in self.subjects.iter().enumerate() {
            if subjects.is_some_and(|f| !f.contains(&s.subject_id)) {
                continue;
            }
            for (pos, &stim) in s.stimulus_ids.iter().enumerate() {
                let keep = match split {
                    Split::All => true,
                    Split::Test => self.is_test(stim),
                    Split::Train => !self.is_test(stim),
                };
                if keep {
                    out.push(SampleRef { subject: si, pos });
                }
            }
        }
        out
    }

    /// Sequential batches over a subject filter and split.
    pub fn batches<'a>(
        &'a self,
        subjects: Option<&[u32]>,
        split: Split,
        batch_size: usize,
    ) -> impl Iterator<Item = Vec<Sample<'a>>> + 'a {
        let refs = self.sample_refs(subjects, split);
        let size = batch_size.max(1);
        (0..refs.len().div_ceil(size))
            .map(move |b| refs[b * size..((b + 1) * size).min(refs.len())].iter().map(|&r| self.sample(r)).collect())
    }
}

/// Generate a dataset and write it to `out`.
pub fn generate_dataset(cfg: &DataGenConfig, out: &Path) -> Result<DatasetManifest> {
    let ds = Dataset::generate(cfg)?;
    ds.write(out)?;
    Ok(ds.manifest)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path)
}

/// Path of a subject's voxel payload inside a dataset directory.
pub fn voxels_path(dir: &Path, subject_id: u32) -> PathBuf {
    dir.join(format!("subj_{subject_id}/voxels.bin"))
}

/// Pearson correlation of two equal-length vectors.
pub fn correlation(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let mb = b.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (f64::from(x) - ma, f64::from(y) - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    sab / (saa * sbb).sqrt().max(1e-300)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> DataGenConfig {
        DataGenConfig { samples_per_subject: 64, voxel_min: 40, voxel_max: 80, ..Default::default() }
    }

    #[test]
    fn teacher_is_deterministic_and_text_ignores_geometry() {
        let cfg = TeacherConfig::default();
        let a = StimulusSpec { stimulus_id: 0, class_id: 3, geometry_params: vec![0.1; 8] };
        let mut b = a.clone();
        b.geometry_params[2] = -0.7;
        let fa = teacher_encode(&a, &cfg).unwrap();
        assert_eq!(fa, teacher_encode(&a, &cfg).unwrap());
        let fb = teacher_encode(&b, &cfg).unwrap();
        assert_eq!(fa.text_tokens, fb.text_tokens);
        assert_ne!(fa.image_tokens, fb.image_tokens);
        assert_eq!(fa.image_tokens.dim(), (17, 64));
        assert_eq!(fa.text_tokens.dim(), (9, 64));
    }

    #[test]
    fn teacher_rejects_out_of_range_class() {
        let spec = StimulusSpec { stimulus_id: 0, class_id: 20, geometry_params: vec![0.0; 8] };
        assert!(matches!(teacher_encode(&spec, &TeacherConfig::default()), Err(Error::Domain(_))));
    }

    #[test]
    fn teacher_tokens_have_positive_norm() {
        let ds = Dataset::generate(&small_cfg()).unwrap();
        for id in 0..ds.stimuli.len() as u32 {
            let (img, txt) = ds.teacher_features(id);
            for r in img.outer_iter().chain(txt.outer_iter()) {
                let n = r.dot(&r).sqrt();
                assert!(n.is_finite() && n > 0.0);
            }
        }
    }

    #[test]
    fn noise_free_identical_subjects_match() {
        let cfg = DataGenConfig {
            subject_variability: 0.0,
            noise_sigma: 0.0,
            voxel_counts: Some(vec![600, 600]),
            subjects: 2,
            ..small_cfg()
        };
        let world = SyntheticWorld::new(&cfg).unwrap();
        let spec = StimulusSpec { stimulus_id: 5, class_id: 1, geometry_params: vec![0.3; 8] };
        let (p0, p1) = (world.profile(0), world.profile(1));
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let a = world.synthesize_recording(&p0, &spec, &mut r1);
        let b = world.synthesize_recording(&p1, &spec, &mut r2);
        assert_eq!(a.voxels, b.voxels);
        // same subject, different rng, no noise
        let c = world.synthesize_recording(&p0, &spec, &mut r1);
        assert_eq!(a.voxels, c.voxels);
    }

    #[test]
    fn recording_length_follows_profile() {
        for d in [500usize, 731, 1024] {
            let cfg = DataGenConfig { subjects: 1, voxel_counts: Some(vec![d]), ..small_cfg() };
            let world = SyntheticWorld::new(&cfg).unwrap();
            let spec = StimulusSpec { stimulus_id: 0, class_id: 0, geometry_params: vec![0.0; 8] };
            let rec = world.synthesize_recording(&world.profile(0), &spec, &mut ChaCha8Rng::seed_from_u64(0));
            assert_eq!(rec.voxels.len(), d);
        }
    }

    #[test]
    fn bookkeeping_and_split() {
        let cfg = DataGenConfig { samples_per_subject: 100, ..small_cfg() };
        let ds = Dataset::generate(&cfg).unwrap();
        assert_eq!(ds.manifest.subject_entries.len(), 4);
        assert_eq!(ds.manifest.total_recordings(), 400);
        assert_eq!(ds.manifest.test_stimuli.len(), 10); // ceil(0.1 * 100)
        let train: BTreeSet<_> = ds.manifest.train_stimuli.iter().collect();
        assert!(ds.manifest.test_stimuli.iter().all(|t| !train.contains(t)));
    }

    #[test]
    fn partial_overlap_counts() {
        let cfg = DataGenConfig { samples_per_subject: 50, overlap: 0.4, test_fraction: 0.1, ..small_cfg() };
        assert_eq!(cfg.unique_stimuli(), 20 + 4 * 30);
        let ds = Dataset::generate(&cfg).unwrap();
        assert_eq!(ds.stimuli.len(), 140);
        assert_eq!(ds.manifest.test_stimuli.len(), 14);
        assert!(ds.subjects.iter().all(|s| s.stimulus_ids.len() == 50));
    }

    #[test]
    fn filter_excludes_subjects() {
        let ds = Dataset::generate(&small_cfg()).unwrap();
        for batch in ds.batches(Some(&[0, 1, 2]), Split::All, 16) {
            assert!(batch.iter().all(|s| s.subject_id != 3));
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = DataGenConfig { voxel_counts: Some(vec![10]), ..small_cfg() };
        assert!(matches!(Dataset::generate(&cfg), Err(Error::Config(_))));
    }
}

//! Deterministic moving-shapes video sequences with per-frame segmentation.
//!
//! Every sequence holds [`NUM_FRAMES`] RGB frames; frame [`ANNOTATED_INDEX`]
//! is the prediction target. Objects move with constant integer velocity
//! and wrap around the canvas edges. Later objects occlude earlier ones.
//!
//! Sequence `i` (train first, then val) is generated from
//! `derive_seed(cfg.seed, SYNTH_STREAM, i)`, so sequences are independent
//! of each other and of the thread count.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::parallel::par_map;
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NUM_FRAMES: usize = 30;
pub const ANNOTATED_INDEX: usize = 19;
pub const INDEX_FILE: &str = "index.json";
pub const SYNTH_STREAM: u64 = 1;

const BACKGROUND: [f32; 3] = [0.35, 0.35, 0.35];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Circle,
    Triangle,
    Cross,
}

impl ShapeKind {
    /// Shape drawn for class `class` (1-based; 0 is background).
    pub fn for_class(class: u8) -> Self {
        match (class - 1) % 4 {
            0 => Self::Rectangle,
            1 => Self::Circle,
            2 => Self::Triangle,
            _ => Self::Cross,
        }
    }

    /// Whether offset `(dx, dy)` from the center lies inside a shape of
    /// half-extent `s`.
    pub fn contains(self, dx: i64, dy: i64, s: i64) -> bool {
        match self {
            Self::Rectangle => dx.abs() <= s && dy.abs() <= (2 * s / 3).max(1),
            Self::Circle => dx * dx + dy * dy <= s * s,
            Self::Triangle => dy.abs() <= s && 2 * dx.abs() <= dy + s,
            Self::Cross => {
                let arm = (s / 3).max(1);
                (dx.abs() <= s && dy.abs() <= arm) || (dy.abs() <= s && dx.abs() <= arm)
            }
        }
    }
}

/// Canonical RGB color of a class.
pub fn class_color(class: u8) -> [f32; 3] {
    match class {
        0 => BACKGROUND,
        c => match (c - 1) % 4 {
            0 => [0.9, 0.1, 0.1],
            1 => [0.1, 0.8, 0.2],
            2 => [0.15, 0.25, 0.9],
            _ => [0.9, 0.85, 0.1],
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Velocity components are drawn from `[-max_speed, max_speed]`.
    pub max_speed: i64,
    /// Half-extent range of the shapes in pixels.
    pub min_size: i64,
    pub max_size: i64,
    /// Amplitude of the uniform background noise.
    pub noise: f32,
    pub seed: u64,
    pub train_count: usize,
    pub val_count: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_classes: 5,
            min_shapes: 2,
            max_shapes: 5,
            max_speed: 3,
            min_size: 4,
            max_size: 9,
            noise: 0.05,
            seed: 0,
            train_count: 200,
            val_count: 50,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=5).contains(&self.num_classes) {
            return Err(Error::invalid("num_classes", "must be in [2, 5]"));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::invalid(
                "min_shapes",
                "need 1 ≤ min_shapes ≤ max_shapes",
            ));
        }
        if self.min_size < 1 || self.min_size > self.max_size {
            return Err(Error::invalid("min_size", "need 1 ≤ min_size ≤ max_size"));
        }
        if self.max_speed < 0 {
            return Err(Error::invalid("max_speed", "must be non-negative"));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::invalid("noise", "must be in [0, 0.5]"));
        }
        let extent = 2 * self.max_size as usize + 1;
        if self.height < extent || self.width < extent {
            return Err(Error::invalid(
                "height/width",
                format!(
                    "canvas {}×{} too small for shapes of extent {extent}",
                    self.height, self.width
                ),
            ));
        }
        Ok(())
    }

    pub fn total_count(&self) -> usize {
        self.train_count + self.val_count
    }
}

/// One moving object; its center at frame `t` is `(x + vx·t, y + vy·t)`
/// modulo the canvas.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthObject {
    pub class: u8,
    pub shape: ShapeKind,
    pub x: i64,
    pub y: i64,
    pub vx: i64,
    pub vy: i64,
    pub size: i64,
}

fn wrap_offset(d: i64, n: i64) -> i64 {
    let m = d.rem_euclid(n);
    if m >= n - n / 2 {
        m - n
    } else {
        m
    }
}

impl SynthObject {
    pub fn center_at(&self, t: usize, height: usize, width: usize) -> (i64, i64) {
        let t = t as i64;
        (
            (self.x + self.vx * t).rem_euclid(width as i64),
            (self.y + self.vy * t).rem_euclid(height as i64),
        )
    }

    pub fn covers(&self, t: usize, height: usize, width: usize, px: usize, py: usize) -> bool {
        let (cx, cy) = self.center_at(t, height, width);
        let dx = wrap_offset(px as i64 - cx, width as i64);
        let dy = wrap_offset(py as i64 - cy, height as i64);
        self.shape.contains(dx, dy, self.size)
    }

    /// Row-major coverage mask at frame `t`.
    pub fn mask_at(&self, t: usize, height: usize, width: usize) -> Vec<bool> {
        (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| self.covers(t, height, width, x, y))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    /// `[3, H, W]` frames in `[0, 1]`.
    pub frames: Vec<Tensor<f32>>,
    pub labels: Vec<LabelMap>,
    pub annotated_index: usize,
}

impl SequenceSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frame `i` as a `[1, 3, H, W]` network input.
    pub fn frame_batch<T: Scalar>(&self, i: usize) -> Result<Tensor<T>> {
        let f = self.frames.get(i).ok_or_else(|| {
            Error::invalid(
                "frame",
                format!("index {i} of {} frames", self.frames.len()),
            )
        })?;
        let mut shape = vec![1];
        shape.extend_from_slice(f.shape());
        f.cast::<T>().reshape(shape)
    }

    pub fn annotated_label(&self) -> &LabelMap {
        &self.labels[self.annotated_index]
    }
}

/// Draws the objects of sequence `index`.
pub fn sample_objects(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<SynthObject> {
    let n = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    (0..n)
        .map(|_| {
            let class = rng.random_range(1..cfg.num_classes as u8);
            SynthObject {
                class,
                shape: ShapeKind::for_class(class),
                x: rng.random_range(0..cfg.width as i64),
                y: rng.random_range(0..cfg.height as i64),
                vx: rng.random_range(-cfg.max_speed..=cfg.max_speed),
                vy: rng.random_range(-cfg.max_speed..=cfg.max_speed),
                size: rng.random_range(cfg.min_size..=cfg.max_size),
            }
        })
        .collect()
}

/// Renders frame `t`: label map by draw order, then colors, then noise on
/// background pixels.
pub fn render_frame(
    cfg: &SynthConfig,
    objects: &[SynthObject],
    t: usize,
    rng: &mut ChaCha8Rng,
) -> (Tensor<f32>, LabelMap) {
    let (h, w) = (cfg.height, cfg.width);
    let mut label = LabelMap::filled(h, w, 0);
    for obj in objects {
        for (p, covered) in obj.mask_at(t, h, w).into_iter().enumerate() {
            if covered {
                label.data_mut()[p] = obj.class;
            }
        }
    }
    let plane = h * w;
    let mut data = vec![0f32; 3 * plane];
    for (p, &class) in label.data().iter().enumerate() {
        let color = class_color(class);
        for c in 0..3 {
            let v = if class == 0 && cfg.noise > 0.0 {
                color[c] + rng.random_range(-cfg.noise..=cfg.noise)
            } else {
                color[c]
            };
            data[c * plane + p] = v.clamp(0.0, 1.0);
        }
    }
    let frame = Tensor::from_vec(vec![3, h, w], data).expect("consistent shape");
    (frame, label)
}

pub fn sequence_seed(cfg: &SynthConfig, index: usize) -> u64 {
    derive_seed(cfg.seed, SYNTH_STREAM, index as u64)
}

/// Objects and frames of sequence `index`.
pub fn generate_sequence_with_objects(
    cfg: &SynthConfig,
    index: usize,
) -> (Vec<SynthObject>, SequenceSample) {
    let mut rng = ChaCha8Rng::seed_from_u64(sequence_seed(cfg, index));
    let objects = sample_objects(cfg, &mut rng);
    let (frames, labels) = (0..NUM_FRAMES)
        .map(|t| render_frame(cfg, &objects, t, &mut rng))
        .unzip();
    let sample = SequenceSample {
        frames,
        labels,
        annotated_index: ANNOTATED_INDEX,
    };
    (objects, sample)
}

pub fn generate_sequence(cfg: &SynthConfig, index: usize) -> Result<SequenceSample> {
    cfg.validate()?;
    Ok(generate_sequence_with_objects(cfg, index).1)
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub train: Vec<SequenceSample>,
    pub val: Vec<SequenceSample>,
}

/// Generates the whole dataset in memory.
pub fn generate_in_memory(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let indices: Vec<usize> = (0..cfg.total_count()).collect();
    let mut all = par_map(&indices, |&i| generate_sequence_with_objects(cfg, i).1);
    let val = all.split_off(cfg.train_count);
    Ok(SynthDataset {
        config: cfg.clone(),
        train: all,
        val,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub index: usize,
    pub split: Split,
    pub seed: u64,
    pub objects: Vec<SynthObject>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub format: String,
    pub version: u32,
    pub config: SynthConfig,
    pub num_frames: usize,
    pub annotated_index: usize,
    pub sequences: Vec<IndexEntry>,
}

pub fn sequence_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("seq_{index:05}"))
}

pub fn frame_path(root: &Path, index: usize, t: usize) -> PathBuf {
    sequence_dir(root, index).join(format!("frame_{t:02}.cwmt"))
}

pub fn label_path(root: &Path, index: usize, t: usize) -> PathBuf {
    sequence_dir(root, index).join(format!("label_{t:02}.cwmt"))
}

fn write_sequence(root: &Path, index: usize, sample: &SequenceSample) -> Result<()> {
    let dir = sequence_dir(root, index);
    fs::create_dir_all(&dir).map_err(|e| Error::Io(e).in_file(&dir))?;
    for t in 0..sample.len() {
        sample.frames[t].save(frame_path(root, index, t))?;
        sample.labels[t]
            .to_tensor::<f32>()
            .save(label_path(root, index, t))?;
    }
    Ok(())
}

/// Writes the dataset to `dir` and returns its index.
pub fn generate(cfg: &SynthConfig, dir: impl AsRef<Path>) -> Result<DatasetIndex> {
    cfg.validate()?;
    let root = dir.as_ref();
    fs::create_dir_all(root).map_err(|e| Error::Io(e).in_file(root))?;
    let indices: Vec<usize> = (0..cfg.total_count()).collect();
    let entries = par_map(&indices, |&i| -> Result<IndexEntry> {
        let (objects, sample) = generate_sequence_with_objects(cfg, i);
        write_sequence(root, i, &sample)?;
        Ok(IndexEntry {
            index: i,
            split: if i < cfg.train_count {
                Split::Train
            } else {
                Split::Val
            },
            seed: sequence_seed(cfg, i),
            objects,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let index = DatasetIndex {
        format: "cwm-synth".into(),
        version: 1,
        config: cfg.clone(),
        num_frames: NUM_FRAMES,
        annotated_index: ANNOTATED_INDEX,
        sequences: entries,
    };
    let path = root.join(INDEX_FILE);
    let json = serde_json::to_string_pretty(&index)?;
    fs::write(&path, json).map_err(|e| Error::Io(e).in_file(&path))?;
    Ok(index)
}

pub fn load_index(dir: impl AsRef<Path>) -> Result<DatasetIndex> {
    let path = dir.as_ref().join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Io(e).in_file(&path))?;
    let index: DatasetIndex =
        serde_json::from_str(&text).map_err(|e| Error::Json(e).in_file(&path))?;
    index.config.validate().map_err(|e| e.in_file(&path))?;
    Ok(index)
}

/// Loads sequence `index` written by [`generate`].
pub fn load_sequence(dir: impl AsRef<Path>, index: usize) -> Result<SequenceSample> {
    let root = dir.as_ref();
    let meta = load_index(root)?;
    load_with_index(root, &meta, index)
}

fn load_with_index(root: &Path, meta: &DatasetIndex, index: usize) -> Result<SequenceSample> {
    if index >= meta.sequences.len() {
        return Err(Error::invalid(
            "index",
            format!(
                "sequence {index} out of range ({} sequences)",
                meta.sequences.len()
            ),
        ));
    }
    let (h, w) = (meta.config.height, meta.config.width);
    let mut frames = Vec::with_capacity(meta.num_frames);
    let mut labels = Vec::with_capacity(meta.num_frames);
    for t in 0..meta.num_frames {
        let fp = frame_path(root, index, t);
        let frame = Tensor::<f32>::load(&fp)?;
        if frame.shape() != [3, h, w] {
            return Err(
                Error::shape("load_sequence", format!("frame shape {:?}", frame.shape()))
                    .in_file(&fp),
            );
        }
        let lp = label_path(root, index, t);
        let label =
            LabelMap::from_tensor(&Tensor::<f32>::load(&lp)?).map_err(|e| e.in_file(&lp))?;
        if (label.height(), label.width()) != (h, w) {
            return Err(
                Error::shape("load_sequence", "label size differs from frame").in_file(&lp),
            );
        }
        label
            .validate(meta.config.num_classes)
            .map_err(|e| e.in_file(&lp))?;
        frames.push(frame);
        labels.push(label);
    }
    Ok(SequenceSample {
        frames,
        labels,
        annotated_index: meta.annotated_index,
    })
}

/// Loads every sequence of a generated dataset.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<SynthDataset> {
    let root = dir.as_ref();
    let meta = load_index(root)?;
    let indices: Vec<usize> = (0..meta.sequences.len()).collect();
    let mut all = par_map(&indices, |&i| load_with_index(root, &meta, i))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let split = meta
        .sequences
        .iter()
        .position(|e| e.split == Split::Val)
        .unwrap_or(all.len());
    let val = all.split_off(split);
    Ok(SynthDataset {
        config: meta.config,
        train: all,
        val,
    })
}

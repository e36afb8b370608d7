//! Procedural moving-shapes clips labelled by motion direction, plus the
//! manifest, batching and augmentation around them.
//!
//! Shape colour, size, kind and start position are drawn independently of
//! the label, so the first frame alone says nothing about the class.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::codec::{FrameShape, RawClip};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipRecord {
    /// Relative to the manifest's directory.
    pub clip_path: PathBuf,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub num_clips: usize,
    pub classes: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub shapes_per_clip: usize,
    /// Pixels per frame.
    pub speed_range: (f64, f64),
    /// Inclusive range of a shape's side length or diameter in pixels.
    pub size_range: (usize, usize),
    pub val_fraction: f64,
    /// Frame extents must be multiples of this.
    pub block_size: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_clips: 1000,
            classes: 4,
            frames: 6,
            height: 32,
            width: 32,
            channels: 3,
            shapes_per_clip: 2,
            speed_range: (0.4, 0.8),
            size_range: (7, 12),
            val_fraction: 0.2,
            block_size: 8,
            seed: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return err(format!("classes must be at least 2, got {}", self.classes));
        }
        if self.frames < 2 {
            return err(format!("frames must be at least 2, got {}", self.frames));
        }
        if self.num_clips == 0 || self.shapes_per_clip == 0 || self.channels == 0 {
            return err("num_clips, shapes_per_clip and channels must be positive".into());
        }
        if self.block_size == 0 || self.height % self.block_size != 0 || self.width % self.block_size != 0 {
            return err(format!(
                "{}x{} frames are not a multiple of block size {}",
                self.height, self.width, self.block_size
            ));
        }
        let (lo, hi) = self.size_range;
        if lo == 0 || lo > hi {
            return err(format!("invalid shape size range {lo}..={hi}"));
        }
        if hi > self.height.min(self.width) {
            return err(format!("shapes of size {hi} do not fit a {}x{} frame", self.height, self.width));
        }
        let (s0, s1) = self.speed_range;
        if !(s0.is_finite() && s1.is_finite() && 0.0 <= s0 && s0 <= s1) {
            return err(format!("invalid speed range {s0}..{s1}"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return err(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        Ok(())
    }

    pub fn frame_shape(&self) -> FrameShape {
        FrameShape::new(self.channels, self.height, self.width)
    }
}

/// Unit velocity `(vy, vx)` of a class in image coordinates (y down).
///
/// Two classes are right/left and four are right/left/up/down; any other
/// count spreads the directions evenly around the circle starting at right.
pub fn class_direction(label: usize, classes: usize) -> (f64, f64) {
    match (classes, label) {
        (2 | 4, 0) => (0.0, 1.0),
        (2 | 4, 1) => (0.0, -1.0),
        (4, 2) => (-1.0, 0.0),
        (4, 3) => (1.0, 0.0),
        _ => {
            let a = std::f64::consts::TAU * label as f64 / classes as f64;
            (-a.sin(), a.cos())
        }
    }
}

/// Label of a horizontally mirrored clip, or `None` when mirroring maps the
/// class direction onto no class.
pub fn flipped_label(label: usize, classes: usize) -> Option<usize> {
    match classes {
        2 | 4 => Some(match label {
            0 => 1,
            1 => 0,
            l => l,
        }),
        k if k % 2 == 0 => Some((k / 2 + k - label) % k),
        _ => None,
    }
}

#[derive(Clone, Copy, Debug)]
enum Kind {
    Rect { h: usize, w: usize },
    Disc { d: usize },
}

#[derive(Clone, Debug)]
struct Shape {
    kind: Kind,
    color: Vec<u8>,
    y0: f64,
    x0: f64,
    vy: f64,
    vx: f64,
}

impl Shape {
    fn covers(&self, t: usize, y: usize, x: usize) -> bool {
        let top = (self.y0 + self.vy * t as f64).round() as isize;
        let left = (self.x0 + self.vx * t as f64).round() as isize;
        let (y, x) = (y as isize - top, x as isize - left);
        match self.kind {
            Kind::Rect { h, w } => (0..h as isize).contains(&y) && (0..w as isize).contains(&x),
            Kind::Disc { d } => {
                // centre at (d-1)/2 on both axes
                let (cy, cx) = (2 * y - (d as isize - 1), 2 * x - (d as isize - 1));
                cy * cy + cx * cx <= (d * d) as isize
            }
        }
    }
}

fn clip_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    rng
}

/// Renders clip `index` of the dataset. Pure in `(config, index)`.
pub fn render_clip(config: &GeneratorConfig, index: usize) -> Result<(RawClip, usize)> {
    config.validate()?;
    let label = index % config.classes;
    let mut rng = clip_rng(config.seed, index as u64);
    let shape = config.frame_shape();
    let (h, w, c) = (config.height, config.width, config.channels);

    let base: Vec<i32> = (0..c).map(|_| rng.random_range(90..=150)).collect();
    let mut background = vec![0u8; shape.len()];
    for ch in 0..c {
        for v in &mut background[ch * h * w..(ch + 1) * h * w] {
            *v = (base[ch] + rng.random_range(-12..=12)) as u8;
        }
    }

    let (vy_dir, vx_dir) = class_direction(label, config.classes);
    let mut shapes = Vec::with_capacity(config.shapes_per_clip);
    for _ in 0..config.shapes_per_clip {
        let (lo, hi) = config.size_range;
        let kind = if rng.random_bool(0.5) {
            Kind::Rect { h: rng.random_range(lo..=hi), w: rng.random_range(lo..=hi) }
        } else {
            Kind::Disc { d: rng.random_range(lo..=hi) }
        };
        // keep every channel well away from the background level
        let color = base
            .iter()
            .map(|&b| match rng.random_bool(0.5) {
                true => rng.random_range(0..=b - 60) as u8,
                false => rng.random_range(b + 60..=255) as u8,
            })
            .collect();
        let (sh, sw) = match kind {
            Kind::Rect { h, w } => (h, w),
            Kind::Disc { d } => (d, d),
        };
        let speed = if config.speed_range.0 < config.speed_range.1 {
            rng.random_range(config.speed_range.0..=config.speed_range.1)
        } else {
            config.speed_range.0
        };
        shapes.push(Shape {
            kind,
            color,
            y0: rng.random_range(0..=(h - sh)) as f64,
            x0: rng.random_range(0..=(w - sw)) as f64,
            vy: vy_dir * speed,
            vx: vx_dir * speed,
        });
    }

    let mut pixels = Vec::with_capacity(config.frames * shape.len());
    for t in 0..config.frames {
        let mut frame = background.clone();
        for s in &shapes {
            for y in 0..h {
                for x in 0..w {
                    if s.covers(t, y, x) {
                        for ch in 0..c {
                            frame[ch * h * w + y * w + x] = s.color[ch];
                        }
                    }
                }
            }
        }
        pixels.extend_from_slice(&frame);
    }
    Ok((RawClip::new(config.frames, shape, pixels)?, label))
}

/// Class-stratified split: within each class a seeded shuffle sends the
/// first `round(val_fraction · n_class)` clips to validation.
fn assign_splits(config: &GeneratorConfig) -> Vec<Split> {
    let mut splits = vec![Split::Train; config.num_clips];
    let mut rng = clip_rng(config.seed, u64::MAX - 1);
    for k in 0..config.classes {
        let mut idx: Vec<usize> = (k..config.num_clips).step_by(config.classes).collect();
        idx.shuffle(&mut rng);
        let n_val = (config.val_fraction * idx.len() as f64).round() as usize;
        for &i in &idx[..n_val] {
            splits[i] = Split::Val;
        }
    }
    splits
}

/// Writes every clip plus `manifest.txt` under `out_dir`.
pub fn generate_moving_shapes(config: &GeneratorConfig, out_dir: &Path) -> Result<Manifest> {
    config.validate()?;
    let clips_dir = out_dir.join("clips");
    fs::create_dir_all(&clips_dir).map_err(|e| Error::io(&clips_dir, e))?;
    let splits = assign_splits(config);
    let records = (0..config.num_clips)
        .into_par_iter()
        .map(|i| {
            let (clip, label) = render_clip(config, i)?;
            let rel = PathBuf::from("clips").join(format!("clip_{i:05}.rvid"));
            clip.save(&out_dir.join(&rel))?;
            Ok(ClipRecord { clip_path: rel, label, split: splits[i] })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest { root: out_dir.to_path_buf(), records };
    manifest.save()?;
    log::info!("wrote {} clips to {}", config.num_clips, out_dir.display());
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory the record paths are relative to.
    pub root: PathBuf,
    pub records: Vec<ClipRecord>,
}

impl Manifest {
    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse { line: i + 1, message };
            let fields: Vec<&str> = line.split('\t').collect();
            let [path, label, split] = fields[..] else {
                return Err(err(format!("expected 3 tab-separated fields, found {}", fields.len())));
            };
            let label = label.parse().map_err(|_| err(format!("invalid label `{label}`")))?;
            let split = split.parse().map_err(err)?;
            records.push(ClipRecord { clip_path: PathBuf::from(path), label, split });
        }
        Ok(Self { root: root.to_path_buf(), records })
    }

    /// Reads `dir/manifest.txt`, or the file itself when given one.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &root).map_err(|e| Error::Load { path: file, source: Box::new(e) })
    }

    pub fn to_text(&self) -> String {
        self.records
            .iter()
            .map(|r| format!("{}\t{}\t{}\n", r.clip_path.display(), r.label, r.split))
            .collect()
    }

    pub fn save(&self) -> Result<()> {
        let file = self.root.join(MANIFEST_NAME);
        fs::write(&file, self.to_text()).map_err(|e| Error::io(&file, e))
    }

    pub fn split(&self, split: Split) -> Vec<ClipRecord> {
        self.records.iter().filter(|r| r.split == split).cloned().collect()
    }

    /// One more than the largest label.
    pub fn classes(&self) -> usize {
        self.records.iter().map(|r| r.label + 1).max().unwrap_or(0)
    }

    pub fn load_clip(&self, record: &ClipRecord) -> Result<RawClip> {
        RawClip::load(&self.root.join(&record.clip_path))
    }
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, shuffle_seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order
}

/// Batches of record indices for one epoch; the last batch may be short.
pub fn batch_indices(n: usize, batch_size: usize, shuffle_seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    Ok(epoch_order(n, shuffle_seed, epoch).chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Clips decoded on demand, in the epoch's seeded order.
pub struct Batches<'a> {
    manifest: &'a Manifest,
    records: &'a [ClipRecord],
    batches: std::vec::IntoIter<Vec<usize>>,
}

impl Iterator for Batches<'_> {
    type Item = Result<(Vec<RawClip>, Vec<usize>)>;

    fn next(&mut self) -> Option<Self::Item> {
        let idx = self.batches.next()?;
        let load = || {
            let clips = idx.iter().map(|&i| self.manifest.load_clip(&self.records[i])).collect::<Result<Vec<_>>>()?;
            Ok((clips, idx.iter().map(|&i| self.records[i].label).collect()))
        };
        Some(load())
    }
}

pub fn iterate_batches<'a>(
    manifest: &'a Manifest,
    records: &'a [ClipRecord],
    batch_size: usize,
    shuffle_seed: u64,
    epoch: usize,
) -> Result<Batches<'a>> {
    let batches = batch_indices(records.len(), batch_size, shuffle_seed, epoch)?;
    Ok(Batches { manifest, records, batches: batches.into_iter() })
}

/// Mirrors the width axis of every frame when `apply` is set.
pub fn flip_horizontal(clip: &RawClip, apply: bool) -> RawClip {
    let mut out = clip.clone();
    if !apply {
        return out;
    }
    let w = clip.shape().width;
    for t in 0..clip.frames() {
        for row in out.frame_mut(t).chunks_exact_mut(w) {
            row.reverse();
        }
    }
    out
}

pub fn normalize_pixel(p: u8) -> f32 {
    p as f32 / 127.5 - 1.0
}

/// Inverse of [`normalize_pixel`], rounded and saturated.
pub fn denormalize_pixel(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn normalize_frame(frame: &[u8]) -> Vec<f32> {
    frame.iter().map(|&p| normalize_pixel(p)).collect()
}

/// `[T, C, H, W]` tensor with values in `[−1, 1]`.
pub fn normalize_clip(clip: &RawClip) -> Tensor {
    let s = clip.shape();
    Tensor::new(&[clip.frames(), s.channels, s.height, s.width], normalize_frame(clip.pixels()))
        .expect("clip extents match its buffer")
}

//! Block-matching codec turning a clip into a key frame plus per-frame
//! motion fields and exact residuals.
//!
//! Every P-frame is predicted from the key frame (never from the previous
//! frame), motion is integer-pel, and source coordinates that fall outside
//! the frame are clamped to the border, so `warp` is total and the round
//! trip is lossless.

use std::fs;
use std::path::Path;

use crate::bytes::Reader;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RVID_MAGIC: &[u8; 8] = b"RVID0001";
pub const CVID_MAGIC: &[u8; 8] = b"CVID0001";
pub const DEFAULT_BLOCK_SIZE: usize = 8;
pub const DEFAULT_SEARCH_RANGE: usize = 4;
/// Displacements are stored as signed bytes.
pub const MAX_SEARCH_RANGE: usize = 127;

/// Extents of one `C×H×W` frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FrameShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FrameShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.channels * self.pixels()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_tiling(&self, block_size: usize) -> Result<()> {
        if block_size == 0 || block_size > self.height || block_size > self.width {
            return Err(Error::Dimension(format!(
                "block size {block_size} does not fit a {}x{} frame",
                self.height, self.width
            )));
        }
        if self.height % block_size != 0 || self.width % block_size != 0 {
            return Err(Error::Dimension(format!(
                "{}x{} frame is not a multiple of block size {block_size}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// `T×C×H×W` 8-bit samples, frame-major then channel-major then row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawClip {
    frames: usize,
    shape: FrameShape,
    pixels: Vec<u8>,
}

impl RawClip {
    pub fn new(frames: usize, shape: FrameShape, pixels: Vec<u8>) -> Result<Self> {
        if frames < 2 {
            return Err(Error::Validation(format!("a clip needs at least 2 frames, got {frames}")));
        }
        if shape.is_empty() {
            return Err(Error::Validation(format!("empty frame shape {shape:?}")));
        }
        if pixels.len() != frames * shape.len() {
            return Err(Error::Dimension(format!(
                "{} samples for {frames} frames of {shape:?}",
                pixels.len()
            )));
        }
        Ok(Self { frames, shape, pixels })
    }

    /// Concatenates equally shaped frames.
    pub fn from_frames(shape: FrameShape, frames: &[Vec<u8>]) -> Result<Self> {
        if let Some(bad) = frames.iter().position(|f| f.len() != shape.len()) {
            return Err(Error::Dimension(format!("frame {bad} does not match {shape:?}")));
        }
        Self::new(frames.len(), shape, frames.concat())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn shape(&self) -> FrameShape {
        self.shape
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.shape.len();
        &self.pixels[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [u8] {
        let n = self.shape.len();
        &mut self.pixels[t * n..(t + 1) * n]
    }

    /// Frames `start..start + len` as a clip of their own.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames {
            return Err(Error::Contract(format!(
                "window {start}..{} exceeds {} frames",
                start + len,
                self.frames
            )));
        }
        let n = self.shape.len();
        Self::new(len, self.shape, self.pixels[start * n..(start + len) * n].to_vec())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.pixels.len());
        out.extend_from_slice(RVID_MAGIC);
        for v in [self.frames, self.shape.channels, self.shape.height, self.shape.width] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8, "magic")? != RVID_MAGIC {
            return Err(Error::format("magic", "not an RVID0001 clip"));
        }
        let frames = r.u32("T")? as usize;
        let shape = read_shape(&mut r)?;
        let n = frames.checked_mul(shape.len()).ok_or_else(|| Error::format("T", "extent product overflows"))?;
        let pixels = r.take(n, "pixels")?.to_vec();
        r.finish()?;
        Self::new(frames, shape, pixels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Load { path: path.to_path_buf(), source: Box::new(e) })
    }
}

fn read_shape(r: &mut Reader) -> Result<FrameShape> {
    let c = r.u32("C")? as usize;
    let h = r.u32("H")? as usize;
    let w = r.u32("W")? as usize;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::format("C", format!("empty extents {c}x{h}x{w}")));
    }
    Ok(FrameShape::new(c, h, w))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// One integer displacement `(dy, dx)` per block; block `(by, bx)` of the
/// predicted frame is read from the reference at its origin plus `(dy, dx)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MotionField {
    block_size: usize,
    rows: usize,
    cols: usize,
    vectors: Vec<(i32, i32)>,
}

impl MotionField {
    pub fn zeros(block_size: usize, rows: usize, cols: usize) -> Self {
        Self { block_size, rows, cols, vectors: vec![(0, 0); rows * cols] }
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn vectors(&self) -> &[(i32, i32)] {
        &self.vectors
    }

    pub fn get(&self, by: usize, bx: usize) -> (i32, i32) {
        self.vectors[by * self.cols + bx]
    }

    pub fn set(&mut self, by: usize, bx: usize, v: (i32, i32)) -> Result<()> {
        let lim = MAX_SEARCH_RANGE as i32;
        if v.0.abs() > lim || v.1.abs() > lim {
            return Err(Error::Contract(format!("displacement {v:?} exceeds ±{lim}")));
        }
        self.vectors[by * self.cols + bx] = v;
        Ok(())
    }

    /// Largest absolute component over all blocks.
    pub fn max_abs(&self) -> i32 {
        self.vectors.iter().map(|&(dy, dx)| dy.abs().max(dx.abs())).max().unwrap_or(0)
    }
}

/// Signed difference between a frame and its prediction, in `[−255, 255]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResidualMap {
    shape: FrameShape,
    values: Vec<i16>,
}

impl ResidualMap {
    pub fn zeros(shape: FrameShape) -> Self {
        Self { shape, values: vec![0; shape.len()] }
    }

    pub fn shape(&self) -> FrameShape {
        self.shape
    }

    pub fn values(&self) -> &[i16] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [i16] {
        &mut self.values
    }

    /// Sum of squared residuals.
    pub fn energy(&self) -> u64 {
        self.values.iter().map(|&v| (v as i64 * v as i64) as u64).sum()
    }
}

fn clamp_coord(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

fn block_sad(
    reference: &[u8],
    target: &[u8],
    shape: FrameShape,
    origin: (usize, usize),
    bs: usize,
    d: (i32, i32),
    bound: u64,
) -> u64 {
    let (h, w) = (shape.height, shape.width);
    let mut sad = 0u64;
    for c in 0..shape.channels {
        let plane = c * shape.pixels();
        for y in origin.0..origin.0 + bs {
            let sy = clamp_coord(y as isize + d.0 as isize, h);
            let trow = &target[plane + y * w..plane + (y + 1) * w];
            let rrow = &reference[plane + sy * w..plane + (sy + 1) * w];
            for x in origin.1..origin.1 + bs {
                let sx = clamp_coord(x as isize + d.1 as isize, w);
                sad += (trow[x] as i32 - rrow[sx] as i32).unsigned_abs() as u64;
            }
            if sad > bound {
                return sad;
            }
        }
    }
    sad
}

fn check_frames(reference: &[u8], target: &[u8], shape: FrameShape) -> Result<()> {
    if reference.len() != shape.len() || target.len() != shape.len() {
        return Err(Error::Dimension(format!(
            "frames of {} and {} samples for shape {shape:?}",
            reference.len(),
            target.len()
        )));
    }
    Ok(())
}

/// Exhaustive SAD search over `±search_range` in both axes.
///
/// Ties go to the smaller `|dy| + |dx|`, then to the earlier candidate in
/// row-major order (`dy` outer, `dx` inner, both ascending).
pub fn estimate_motion(
    reference: &[u8],
    target: &[u8],
    shape: FrameShape,
    block_size: usize,
    search_range: usize,
) -> Result<MotionField> {
    shape.check_tiling(block_size)?;
    check_frames(reference, target, shape)?;
    if search_range > MAX_SEARCH_RANGE {
        return Err(Error::Config(format!("search range {search_range} exceeds {MAX_SEARCH_RANGE}")));
    }
    let (rows, cols) = (shape.height / block_size, shape.width / block_size);
    let mut field = MotionField::zeros(block_size, rows, cols);
    let r = search_range as i32;
    for by in 0..rows {
        for bx in 0..cols {
            let origin = (by * block_size, bx * block_size);
            let mut best = (u64::MAX, i32::MAX, (0, 0));
            for dy in -r..=r {
                for dx in -r..=r {
                    let sad = block_sad(reference, target, shape, origin, block_size, (dy, dx), best.0);
                    let l1 = dy.abs() + dx.abs();
                    if (sad, l1) < (best.0, best.1) {
                        best = (sad, l1, (dy, dx));
                    }
                }
            }
            field.vectors[by * cols + bx] = best.2;
        }
    }
    Ok(field)
}

/// Motion-compensated prediction: every block copies the reference block at
/// its origin plus its displacement, with clamped source coordinates.
pub fn warp(reference: &[u8], shape: FrameShape, motion: &MotionField) -> Result<Vec<u8>> {
    let bs = motion.block_size;
    shape.check_tiling(bs)?;
    if reference.len() != shape.len() || motion.rows * bs != shape.height || motion.cols * bs != shape.width {
        return Err(Error::Dimension(format!(
            "{}x{} motion grid of block {bs} does not tile {shape:?}",
            motion.rows, motion.cols
        )));
    }
    let (h, w) = (shape.height, shape.width);
    let mut out = vec![0u8; shape.len()];
    for c in 0..shape.channels {
        let plane = c * shape.pixels();
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = motion.get(y / bs, x / bs);
                let sy = clamp_coord(y as isize + dy as isize, h);
                let sx = clamp_coord(x as isize + dx as isize, w);
                out[plane + y * w + x] = reference[plane + sy * w + sx];
            }
        }
    }
    Ok(out)
}

/// Predicted frame plus residual, saturated to 8 bits.
pub fn apply_residual(prediction: &[u8], residual: &ResidualMap) -> Vec<u8> {
    prediction
        .iter()
        .zip(&residual.values)
        .map(|(&p, &r)| (p as i32 + r as i32).clamp(0, 255) as u8)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PFrame {
    pub motion: MotionField,
    pub residual: ResidualMap,
}

/// Key frame plus one `(motion, residual)` pair for every later frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompressedClip {
    shape: FrameShape,
    block_size: usize,
    search_range: usize,
    i_frame: Vec<u8>,
    p_frames: Vec<PFrame>,
}

impl CompressedClip {
    pub fn shape(&self) -> FrameShape {
        self.shape
    }

    pub fn frames(&self) -> usize {
        self.p_frames.len() + 1
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn search_range(&self) -> usize {
        self.search_range
    }

    pub fn i_frame(&self) -> &[u8] {
        &self.i_frame
    }

    pub fn p_frames(&self) -> &[PFrame] {
        &self.p_frames
    }

    /// Mutable access for experiments on the representation; the motion
    /// grid and residual extents cannot be changed through it.
    pub fn p_frame_mut(&mut self, i: usize) -> (&mut MotionField, &mut ResidualMap) {
        let p = &mut self.p_frames[i];
        (&mut p.motion, &mut p.residual)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CVID_MAGIC);
        let header = [
            self.frames(),
            self.shape.channels,
            self.shape.height,
            self.shape.width,
            self.block_size,
            self.search_range,
        ];
        for v in header {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.i_frame);
        for p in &self.p_frames {
            for &(dy, dx) in &p.motion.vectors {
                out.push(dy as i8 as u8);
                out.push(dx as i8 as u8);
            }
            for &r in &p.residual.values {
                out.extend_from_slice(&r.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8, "magic")? != CVID_MAGIC {
            return Err(Error::format("magic", "not a CVID0001 stream"));
        }
        let frames = r.u32("T")? as usize;
        let shape = read_shape(&mut r)?;
        let block_size = r.u32("block_size")? as usize;
        let search_range = r.u32("search_range")? as usize;
        if frames < 2 {
            return Err(Error::Validation(format!("a clip needs at least 2 frames, got {frames}")));
        }
        if shape.check_tiling(block_size).is_err() {
            return Err(Error::format("block_size", format!("{block_size} does not tile {}x{}", shape.height, shape.width)));
        }
        if search_range > MAX_SEARCH_RANGE {
            return Err(Error::format("search_range", format!("{search_range} exceeds {MAX_SEARCH_RANGE}")));
        }
        let i_frame = r.take(shape.len(), "i_frame")?.to_vec();
        let (rows, cols) = (shape.height / block_size, shape.width / block_size);
        let mut p_frames = Vec::with_capacity(frames - 1);
        for t in 0..frames - 1 {
            let field = format!("p_frame[{t}].motion");
            let raw = r.take(2 * rows * cols, &field)?;
            let vectors: Vec<(i32, i32)> =
                raw.chunks_exact(2).map(|p| (p[0] as i8 as i32, p[1] as i8 as i32)).collect();
            if vectors.iter().any(|&(dy, dx)| dy.unsigned_abs() as usize > search_range || dx.unsigned_abs() as usize > search_range) {
                return Err(Error::format(field, format!("displacement outside ±{search_range}")));
            }
            let field = format!("p_frame[{t}].residual");
            let raw = r.take(2 * shape.len(), &field)?;
            let values: Vec<i16> = raw.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])).collect();
            if values.iter().any(|v| v.abs() > 255) {
                return Err(Error::format(field, "residual outside [-255, 255]"));
            }
            p_frames.push(PFrame {
                motion: MotionField { block_size, rows, cols, vectors },
                residual: ResidualMap { shape, values },
            });
        }
        r.finish()?;
        Ok(Self { shape, block_size, search_range, i_frame, p_frames })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Load { path: path.to_path_buf(), source: Box::new(e) })
    }
}

/// Estimates every frame's motion against the first frame and stores the
/// exact residual of the resulting prediction.
pub fn compress_clip(clip: &RawClip, block_size: usize, search_range: usize) -> Result<CompressedClip> {
    let shape = clip.shape();
    let key = clip.frame(0);
    let mut p_frames = Vec::with_capacity(clip.frames() - 1);
    for t in 1..clip.frames() {
        let target = clip.frame(t);
        let motion = estimate_motion(key, target, shape, block_size, search_range)?;
        let prediction = warp(key, shape, &motion)?;
        let values = target.iter().zip(&prediction).map(|(&a, &b)| a as i16 - b as i16).collect();
        p_frames.push(PFrame { motion, residual: ResidualMap { shape, values } });
    }
    Ok(CompressedClip { shape, block_size, search_range, i_frame: key.to_vec(), p_frames })
}

pub fn reconstruct_clip(compressed: &CompressedClip) -> RawClip {
    let shape = compressed.shape;
    let mut pixels = Vec::with_capacity(compressed.frames() * shape.len());
    pixels.extend_from_slice(&compressed.i_frame);
    for p in &compressed.p_frames {
        let prediction = warp(&compressed.i_frame, shape, &p.motion).expect("grid validated at construction");
        pixels.extend(apply_residual(&prediction, &p.residual));
    }
    RawClip { frames: compressed.frames(), shape, pixels }
}

/// Block-constant `[2, H, W]` expansion: channel 0 holds `dy / normalizer`,
/// channel 1 holds `dx / normalizer`.
pub fn motion_to_dense(motion: &MotionField, normalizer: f32) -> Result<Tensor<f32>> {
    if normalizer <= 0.0 || !normalizer.is_finite() {
        return Err(Error::Config(format!("motion normalizer must be positive, got {normalizer}")));
    }
    let (h, w) = (motion.rows * motion.block_size, motion.cols * motion.block_size);
    let mut data = vec![0f32; 2 * h * w];
    let (dys, dxs) = data.split_at_mut(h * w);
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = motion.get(y / motion.block_size, x / motion.block_size);
            dys[y * w + x] = dy as f32 / normalizer;
            dxs[y * w + x] = dx as f32 / normalizer;
        }
    }
    Tensor::new(&[2, h, w], data)
}

//! Network-facing tensors built from compressed clips.
//!
//! Compressed mode stacks `[x₁ (C); m₂ (2), r₂ (C); …; m_T (2), r_T (C)]`
//! with pixels in `[−1, 1]`, motion divided by the search range and
//! residuals divided by 255.

use std::str::FromStr;

use crate::codec::{motion_to_dense, reconstruct_clip, CompressedClip, RawClip};
use crate::dataset::{normalize_clip, normalize_frame};
use crate::error::{Error, Result};
use crate::models::motion_channels;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputMode {
    Compressed,
    /// All frames, normalized and channel-stacked.
    Raw,
    /// Compressed layout with the key-frame channels zeroed.
    MotionOnly,
}

impl InputMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InputMode::Compressed => "compressed",
            InputMode::Raw => "raw",
            InputMode::MotionOnly => "motion_only",
        }
    }

    pub fn input_channels(self, frames: usize, channels: usize) -> usize {
        match self {
            InputMode::Raw => frames * channels,
            _ => channels + motion_channels(frames, channels),
        }
    }
}

impl FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "compressed" => Ok(InputMode::Compressed),
            "raw" => Ok(InputMode::Raw),
            "motion_only" => Ok(InputMode::MotionOnly),
            other => Err(Error::Config(format!("unknown input mode `{other}`"))),
        }
    }
}

fn motion_normalizer(c: &CompressedClip) -> f32 {
    c.search_range().max(1) as f32
}

/// `[(T−1)(2+C), H, W]`: per P-frame the dense motion then the residual.
pub fn motion_targets(c: &CompressedClip) -> Result<Tensor> {
    let s = c.shape();
    let mut data = Vec::with_capacity(motion_channels(c.frames(), s.channels) * s.pixels());
    for p in c.p_frames() {
        data.extend_from_slice(motion_to_dense(&p.motion, motion_normalizer(c))?.data());
        data.extend(p.residual.values().iter().map(|&r| r as f32 / 255.0));
    }
    Tensor::new(&[motion_channels(c.frames(), s.channels), s.height, s.width], data)
}

/// Normalized key frame `[C, H, W]`.
pub fn key_frame(c: &CompressedClip) -> Tensor {
    let s = c.shape();
    Tensor::new(&[s.channels, s.height, s.width], normalize_frame(c.i_frame())).expect("frame extents")
}

/// Generator input `[Cin, H, W]` for one clip.
pub fn assemble_input(c: &CompressedClip, mode: InputMode) -> Result<Tensor> {
    let s = c.shape();
    let cin = mode.input_channels(c.frames(), s.channels);
    let data = match mode {
        InputMode::Raw => normalize_clip(&reconstruct_clip(c)).into_data(),
        InputMode::Compressed | InputMode::MotionOnly => {
            let mut data = if mode == InputMode::Compressed {
                normalize_frame(c.i_frame())
            } else {
                vec![0.0; s.len()]
            };
            data.extend_from_slice(motion_targets(c)?.data());
            data
        }
    };
    Tensor::new(&[cin, s.height, s.width], data)
}

/// Per-frame channel means of the normalized clip, `[T, C]`.
pub fn frame_channel_means(clip: &RawClip) -> Tensor {
    let s = clip.shape();
    let mut means = Vec::with_capacity(clip.frames() * s.channels);
    for t in 0..clip.frames() {
        for plane in clip.frame(t).chunks_exact(s.pixels()) {
            let sum: f64 = plane.iter().map(|&p| crate::dataset::normalize_pixel(p) as f64).sum();
            means.push((sum / s.pixels() as f64) as f32);
        }
    }
    Tensor::new(&[clip.frames(), s.channels], means).expect("extents")
}

/// Fails unless every clip has the same frame count and frame shape.
pub fn check_uniform(clips: &[CompressedClip]) -> Result<()> {
    let Some(first) = clips.first() else {
        return Err(Error::Contract("empty batch".into()));
    };
    if let Some(bad) = clips.iter().find(|c| c.frames() != first.frames() || c.shape() != first.shape()) {
        return Err(Error::Contract(format!(
            "batch mixes clips of {} and {} frames ({:?} vs {:?})",
            first.frames(),
            bad.frames(),
            first.shape(),
            bad.shape()
        )));
    }
    Ok(())
}

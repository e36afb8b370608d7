//! Inference-time synthesis, frame sources for the downstream classifier,
//! score-averaged top-1 evaluation and PPM dumps.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::assemble::{assemble_input, key_frame, motion_targets};
use crate::codec::{compress_clip, RawClip};
use crate::dataset::{denormalize_pixel, normalize_frame, normalize_pixel, Manifest, Split};
use crate::error::{Error, Result};
use crate::models::{Bind, EncoderDecoder, IfsModels};
use crate::tensor::{Graph, Tensor};
use crate::trainer::{first_window, load_ifs_checkpoint, softmax_rows, ClassifierModel, IfsMeta};

const SYNTH_CHUNK: usize = 32;

/// A frozen generator plus what it needs to turn raw windows into inputs.
pub struct Synthesizer {
    pub generator: EncoderDecoder,
    pub meta: IfsMeta,
    /// Checkpoint file name and step, e.g. `ifs_best.ckpt@1200`.
    pub checkpoint_id: String,
}

impl Synthesizer {
    pub fn load(path: &Path) -> Result<Self> {
        let (models, meta) = load_ifs_checkpoint(path)?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string());
        Ok(Self { generator: models.generator, meta, checkpoint_id: format!("{name}@{}", meta.step) })
    }

    /// Window length the generator was trained on.
    pub fn frames(&self) -> usize {
        self.meta.frames
    }

    fn input(&self, window: &RawClip) -> Result<Tensor> {
        if window.frames() != self.meta.frames {
            return Err(Error::Contract(format!("window has {} frames, generator expects {}", window.frames(), self.meta.frames)));
        }
        let c = compress_clip(window, self.meta.block_size, self.meta.search_range)?;
        assemble_input(&c, self.meta.input_mode)
    }

    /// Synthetic frames `[C, H, W]` for windows of exactly `frames()` frames.
    pub fn synthesize_batch(&self, windows: &[RawClip]) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(SYNTH_CHUNK) {
            let inputs = chunk.iter().map(|w| self.input(w)).collect::<Result<Vec<_>>>()?;
            let mut g = Graph::new();
            let x = g.input(Tensor::stack(&inputs)?);
            let y = self.generator.forward(&mut g, x, Bind::Frozen)?;
            let y = g.value(y);
            out.extend((0..chunk.len()).map(|i| y.index0(i)));
        }
        Ok(out)
    }

    pub fn synthesize(&self, window: &RawClip) -> Result<Tensor> {
        Ok(self.synthesize_batch(std::slice::from_ref(window))?.remove(0))
    }

    pub fn synthesize_frame(&self, window: &RawClip, source_clip: &str, window_offset: usize) -> Result<SyntheticFrame> {
        Ok(SyntheticFrame {
            frame: self.synthesize(window)?,
            source_clip: source_clip.to_string(),
            window_offset,
            checkpoint_id: self.checkpoint_id.clone(),
        })
    }
}

/// Generator output with where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticFrame {
    /// `[C, H, W]` in `(−1, 1)`.
    pub frame: Tensor,
    pub source_clip: String,
    pub window_offset: usize,
    pub checkpoint_id: String,
}

/// One synthetic frame per non-overlapping window; the ragged tail is
/// dropped.
pub fn synthesize_clip_summary(synth: &Synthesizer, video: &RawClip, source_clip: &str) -> Result<Vec<SyntheticFrame>> {
    let window = synth.frames();
    let n = video.frames() / window;
    if n == 0 {
        return Err(Error::Contract(format!("video of {} frames is shorter than one {window}-frame window", video.frames())));
    }
    let windows = (0..n).map(|i| video.window(i * window, window)).collect::<Result<Vec<_>>>()?;
    let frames = synth.synthesize_batch(&windows)?;
    Ok(frames
        .into_iter()
        .enumerate()
        .map(|(i, frame)| SyntheticFrame {
            frame,
            source_clip: source_clip.to_string(),
            window_offset: i * window,
            checkpoint_id: synth.checkpoint_id.clone(),
        })
        .collect())
}

/// Start frames of `samples` uniformly spread non-overlapping windows:
/// window `i` of `k` is slot `floor(i·n/k)` of the `n` slots that fit.
pub fn window_starts(len: usize, window: usize, samples: usize) -> Result<Vec<usize>> {
    if window == 0 || samples == 0 {
        return Err(Error::Contract("window and sample count must be positive".into()));
    }
    let n = len / window;
    if n == 0 {
        return Err(Error::Contract(format!("video of {len} frames is shorter than one {window}-frame window")));
    }
    let k = samples.min(n);
    Ok((0..k).map(|i| i * n / k * window).collect())
}

/// What the downstream classifier sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameSource {
    /// Synthetic frame of the full IFS generator.
    Ifs,
    /// The key frame alone.
    IFrame,
    /// Per-pixel temporal mean of the window.
    Ave,
    /// Synthetic frame of a generator trained without the appearance task.
    IfsMot,
}

impl FrameSource {
    pub const ALL: [FrameSource; 4] = [FrameSource::Ifs, FrameSource::IFrame, FrameSource::Ave, FrameSource::IfsMot];

    pub fn as_str(self) -> &'static str {
        match self {
            FrameSource::Ifs => "ifs",
            FrameSource::IFrame => "i_frame",
            FrameSource::Ave => "ave",
            FrameSource::IfsMot => "ifs_mot",
        }
    }

    pub fn needs_generator(self) -> bool {
        matches!(self, FrameSource::Ifs | FrameSource::IfsMot)
    }

    pub fn code(self) -> usize {
        Self::ALL.iter().position(|&s| s == self).expect("listed")
    }

    pub fn from_code(code: usize) -> Result<Self> {
        Self::ALL.get(code).copied().ok_or_else(|| Error::format("meta.cls.source", format!("unknown code {code}")))
    }
}

impl fmt::Display for FrameSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FrameSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown frame source `{s}` (expected ifs, i_frame, ave or ifs_mot)")))
    }
}

/// Per-pixel temporal mean of the normalized frames, `[C, H, W]`.
pub fn baseline_ave_frame(window: &RawClip) -> Tensor {
    let s = window.shape();
    let mut acc = vec![0f64; s.len()];
    for t in 0..window.frames() {
        for (a, &p) in acc.iter_mut().zip(window.frame(t)) {
            *a += normalize_pixel(p) as f64;
        }
    }
    let n = window.frames() as f64;
    Tensor::new(&[s.channels, s.height, s.width], acc.into_iter().map(|v| (v / n) as f32).collect()).expect("frame extents")
}

pub fn i_frame(window: &RawClip) -> Tensor {
    let s = window.shape();
    Tensor::new(&[s.channels, s.height, s.width], normalize_frame(window.frame(0))).expect("frame extents")
}

/// One `[C, H, W]` frame per window.
pub fn source_frames(source: FrameSource, synth: Option<&Synthesizer>, windows: &[RawClip]) -> Result<Vec<Tensor>> {
    match source {
        FrameSource::IFrame => Ok(windows.iter().map(i_frame).collect()),
        FrameSource::Ave => Ok(windows.iter().map(baseline_ave_frame).collect()),
        FrameSource::Ifs | FrameSource::IfsMot => synth
            .ok_or_else(|| Error::Contract(format!("frame source `{source}` needs a generator checkpoint")))?
            .synthesize_batch(windows),
    }
}

/// Frames of one validation video, ready for scoring.
#[derive(Clone, Debug)]
pub struct EvalVideo {
    pub name: String,
    pub label: usize,
    pub frames: Vec<Tensor>,
}

/// Cuts `samples` windows of `window` frames from every clip and turns each
/// into a frame of `source`.
pub fn load_eval_videos(
    clips: &[RawClip],
    labels: &[usize],
    names: &[String],
    window: usize,
    samples: usize,
    source: FrameSource,
    synth: Option<&Synthesizer>,
) -> Result<Vec<EvalVideo>> {
    let mut windows = Vec::new();
    let mut counts = Vec::with_capacity(clips.len());
    for clip in clips {
        let starts = window_starts(clip.frames(), window, samples)?;
        counts.push(starts.len());
        for s in starts {
            windows.push(clip.window(s, window)?);
        }
    }
    let mut frames = source_frames(source, synth, &windows)?.into_iter();
    Ok(counts
        .iter()
        .zip(labels)
        .zip(names)
        .map(|((&k, &label), name)| EvalVideo { name: name.clone(), label, frames: frames.by_ref().take(k).collect() })
        .collect())
}

/// Anything that maps frames to class probabilities.
pub trait Scorer {
    fn probabilities(&self, frames: &[Tensor]) -> Result<Vec<Vec<f64>>>;
}

impl Scorer for ClassifierModel {
    fn probabilities(&self, frames: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        ClassifierModel::probabilities(self, frames)
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Averages probabilities over each video's frames and predicts the argmax.
pub fn predict_videos<S: Scorer + ?Sized>(scorer: &S, videos: &[EvalVideo]) -> Result<Vec<usize>> {
    let all: Vec<Tensor> = videos.iter().flat_map(|v| v.frames.iter().cloned()).collect();
    let mut probs = scorer.probabilities(&all)?.into_iter();
    videos
        .iter()
        .map(|v| {
            if v.frames.is_empty() {
                return Err(Error::Contract(format!("video {} has no frames", v.name)));
            }
            let rows: Vec<Vec<f64>> = probs.by_ref().take(v.frames.len()).collect();
            let mut mean = vec![0.0; rows[0].len()];
            for r in &rows {
                for (m, p) in mean.iter_mut().zip(r) {
                    *m += p / rows.len() as f64;
                }
            }
            Ok(argmax(&mean))
        })
        .collect()
}

pub fn evaluate_top1<S: Scorer + ?Sized>(scorer: &S, videos: &[EvalVideo]) -> Result<f64> {
    if videos.is_empty() {
        return Err(Error::Contract("evaluation split is empty".into()));
    }
    let predictions = predict_videos(scorer, videos)?;
    let hits = predictions.iter().zip(videos).filter(|(p, v)| **p == v.label).count();
    Ok(hits as f64 / videos.len() as f64)
}

/// Softmax of a `[N, K]` logit tensor, convenience for stub scorers.
pub fn probabilities_from_logits(logits: &Tensor) -> Vec<Vec<f64>> {
    softmax_rows(logits)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub top1: f64,
    pub videos: usize,
    pub samples_per_video: usize,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        format!("top1={}\nvideos={}\nsamples_per_video={}\n", self.top1, self.videos, self.samples_per_video)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut top1 = None;
        let mut videos = None;
        let mut samples = None;
        for (i, line) in text.lines().enumerate() {
            let bad = |m: String| Error::Parse { line: i + 1, message: m };
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("expected key=value, got `{line}`")))?;
            match k {
                "top1" => top1 = Some(v.parse::<f64>().map_err(|e| bad(e.to_string()))?),
                "videos" => videos = Some(v.parse::<usize>().map_err(|e| bad(e.to_string()))?),
                "samples_per_video" => samples = Some(v.parse::<usize>().map_err(|e| bad(e.to_string()))?),
                other => return Err(bad(format!("unknown key `{other}`"))),
            }
        }
        match (top1, videos, samples) {
            (Some(top1), Some(videos), Some(samples_per_video)) => Ok(Self { top1, videos, samples_per_video }),
            _ => Err(Error::format("report", "missing top1, videos or samples_per_video")),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Scores the validation split of `manifest` with `samples` windows per
/// video. The window length follows the generator when one is given.
pub fn evaluate_manifest(
    model: &ClassifierModel,
    manifest: &Manifest,
    synth: Option<&Synthesizer>,
    window: usize,
    samples: usize,
) -> Result<EvalReport> {
    let records = manifest.split(Split::Val);
    if records.is_empty() {
        return Err(Error::Contract("validation split is empty".into()));
    }
    let window = synth.map_or(window, Synthesizer::frames);
    let clips = records.par_iter().map(|r| manifest.load_clip(r)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
    let names: Vec<String> = records.iter().map(|r| r.clip_path.display().to_string()).collect();
    let videos = load_eval_videos(&clips, &labels, &names, window, samples, model.source, synth)?;
    let samples_per_video = videos.iter().map(|v| v.frames.len()).max().unwrap_or(0);
    Ok(EvalReport { top1: evaluate_top1(model, &videos)?, videos: videos.len(), samples_per_video })
}

/// Mean over clips and channels of `|Ave(x̂) − Ave(window)|`, where `Ave`
/// is the spatial mean and, for the window, also the mean over its frames.
/// Each clip contributes its first window.
pub fn channel_mean_gap(synth: &Synthesizer, clips: &[RawClip]) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::Contract("colour gap needs at least one clip".into()));
    }
    let windows = clips.iter().map(|c| first_window(c, synth.frames())).collect::<Result<Vec<_>>>()?;
    let frames = synth.synthesize_batch(&windows)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (w, f) in windows.iter().zip(&frames) {
        let (clip_ave, synth_ave) = (baseline_ave_frame(w), f);
        let c = w.shape().channels;
        let plane = w.shape().pixels();
        for ch in 0..c {
            let mean = |t: &Tensor| t.data()[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
            total += (mean(synth_ave) - mean(&clip_ave)).abs();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Named `[3, H, W]` panels for one clip window: the synthetic frame, the
/// I-frame recovered from it, and per P-frame the estimated and true
/// motion and residual maps.
pub fn inspection_panels(models: &IfsModels, meta: &IfsMeta, clip: &RawClip) -> Result<Vec<(String, Tensor)>> {
    if meta.arch.output_channels != 3 {
        return Err(Error::Contract("panels need 3-channel frames".into()));
    }
    let window = first_window(clip, meta.frames)?;
    let c = compress_clip(&window, meta.block_size, meta.search_range)?;
    let input = assemble_input(&c, meta.input_mode)?;
    let targets = motion_targets(&c)?;
    let mut g = Graph::new();
    let x = g.input(Tensor::stack(&[input])?);
    let xhat = models.generator.forward(&mut g, x, Bind::Frozen)?;
    let rec = models.appearance.forward(&mut g, xhat, Bind::Frozen)?;
    let mot = models.motion.forward(&mut g, xhat, Bind::Frozen)?;
    let mut panels = vec![
        ("synthetic".to_string(), g.value(xhat).index0(0)),
        ("i_frame".to_string(), key_frame(&c)),
        ("i_frame_estimated".to_string(), g.value(rec).index0(0)),
    ];
    let (est, truth) = (g.value(mot).index0(0), targets);
    let (h, w) = (meta.arch.height, meta.arch.width);
    let plane = h * w;
    let per = 2 + 3;
    let slice = |t: &Tensor, start: usize, len: usize| {
        Tensor::new(&[len, h, w], t.data()[start * plane..(start + len) * plane].to_vec()).expect("extents")
    };
    for p in 0..meta.frames - 1 {
        let t = p + 2;
        for (tag, src) in [("estimated", &est), ("true", &truth)] {
            panels.push((format!("motion_{t}_{tag}"), motion_panel(&slice(src, p * per, 2))?));
            panels.push((format!("residual_{t}_{tag}"), residual_panel(&slice(src, p * per + 2, 3), 4.0)));
        }
    }
    Ok(panels)
}

/// Encodes a `[3, H, W]` frame in `[−1, 1]` as binary PPM.
pub fn ppm_bytes(frame: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = match frame.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::Dimension(format!("PPM needs a [3, H, W] frame, got {s:?}"))),
    };
    if c != 3 {
        return Err(Error::Dimension(format!("PPM needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = frame.data();
    let plane = h * w;
    for i in 0..plane {
        for ch in 0..3 {
            out.push(denormalize_pixel(d[ch * plane + i]));
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, frame: &Tensor) -> Result<()> {
    fs::write(path, ppm_bytes(frame)?).map_err(|e| Error::io(path, e))
}

fn ppm_token<'a>(bytes: &'a [u8], pos: &mut usize, field: &str) -> Result<&'a str> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if bytes.get(*pos) == Some(&b'#') {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format(field, "truncated header"));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| Error::format(field, "not ASCII"))
}

/// Decodes a binary PPM with maxval 255 into a normalized `[3, H, W]` frame.
pub fn parse_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    if ppm_token(bytes, &mut pos, "magic")? != "P6" {
        return Err(Error::format("magic", "expected P6"));
    }
    let mut num = |field: &str| -> Result<usize> {
        ppm_token(bytes, &mut pos, field)?.parse().map_err(|_| Error::format(field, "not an integer"))
    };
    let (w, h, max) = (num("width")?, num("height")?, num("maxval")?);
    if max != 255 {
        return Err(Error::format("maxval", format!("only 255 is supported, got {max}")));
    }
    let body = &bytes[pos + 1..];
    if body.len() != 3 * w * h {
        return Err(Error::format("pixels", format!("expected {} bytes, found {}", 3 * w * h, body.len())));
    }
    let plane = w * h;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in body.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * plane + i] = normalize_pixel(px[ch]);
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ppm(&bytes).map_err(|e| Error::Load { path: path.to_path_buf(), source: Box::new(e) })
}

/// Maps a dense `[2, H, W]` motion map to an RGB panel: dy in red, dx in
/// green, blue at mid grey.
pub fn motion_panel(dense: &Tensor) -> Result<Tensor> {
    let (_, h, w) = match dense.shape() {
        &[2, h, w] => (2, h, w),
        s => return Err(Error::Dimension(format!("motion panel needs [2, H, W], got {s:?}"))),
    };
    let mut data = dense.data().to_vec();
    data.extend(std::iter::repeat_n(0.0, h * w));
    Tensor::new(&[3, h, w], data)
}

/// Scales a residual `[C, H, W]` by `gain` into `[−1, 1]` for display.
pub fn residual_panel(residual: &Tensor, gain: f32) -> Tensor {
    residual.map(|v| (v * gain).clamp(-1.0, 1.0))
}

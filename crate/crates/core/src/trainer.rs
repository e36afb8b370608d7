//! Joint training of the five networks, downstream classifier training and
//! checkpoint I/O.
//!
//! One IFS step first updates the discriminator on the synthetic frame, then
//! runs every enabled head on the same synthetic frame, backpropagates the
//! unweighted sum once and takes one Adam step over the generator side.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::assemble::{assemble_input, frame_channel_means, key_frame, motion_targets, InputMode};
use crate::codec::{compress_clip, RawClip, DEFAULT_BLOCK_SIZE, DEFAULT_SEARCH_RANGE};
use crate::dataset::{batch_indices, flip_horizontal, flipped_label, Manifest, Split};
use crate::error::{Error, Result};
use crate::losses::{self, AdversarialLabels, LossFlags, LossReport, LOSS_CSV_HEADER};
use crate::models::{ArchConfig, Bind, Encoder, IfsModels, Network};
use crate::recognition::{self, FrameSource, Synthesizer};
use crate::tensor::{cosine_lr, Adam, Checkpoint, Graph, Parameter, Tensor, Var};

pub const IFS_LAST: &str = "ifs_last.ckpt";
pub const IFS_BEST: &str = "ifs_best.ckpt";
pub const LOSS_CSV: &str = "loss.csv";
pub const EPOCH_CSV: &str = "epochs.csv";
pub const CLASSIFIER_CKPT: &str = "classifier.ckpt";
pub const CLASSIFIER_CSV: &str = "classifier.csv";

/// Everything that shapes a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub adam: Adam,
    pub flags: LossFlags,
    /// Use real→1, fake→0 adversarial targets instead of real→0, fake→1.
    pub swap_adv_labels: bool,
    /// Update the discriminator every this many steps.
    pub d_every: usize,
    pub input_mode: InputMode,
    pub base_width: usize,
    pub n_res_blocks: usize,
    pub frames: usize,
    pub block_size: usize,
    pub search_range: usize,
    /// Random horizontal flips with left/right label swap.
    pub flip: bool,
    pub seed: u64,
    /// Train on the first this many training clips; 0 keeps all.
    pub max_train_clips: usize,
    /// Stop after this many steps in total; 0 means no limit.
    pub max_steps: u64,
    pub cls_epochs: usize,
    pub cls_lr: f64,
    pub cls_batch_size: usize,
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            base_lr: 0.001,
            adam: Adam::default(),
            flags: LossFlags::ALL,
            swap_adv_labels: false,
            d_every: 1,
            input_mode: InputMode::Compressed,
            base_width: 16,
            n_res_blocks: 3,
            frames: 6,
            block_size: DEFAULT_BLOCK_SIZE,
            search_range: DEFAULT_SEARCH_RANGE,
            flip: false,
            seed: 7,
            max_train_clips: 0,
            max_steps: 0,
            cls_epochs: 30,
            cls_lr: 0.001,
            cls_batch_size: 32,
            eval_samples: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.cls_batch_size == 0 {
            return bad("batch sizes must be at least 1");
        }
        if self.frames < 2 {
            return bad("frames must be at least 2");
        }
        if self.d_every == 0 {
            return bad("d_every must be at least 1");
        }
        if self.eval_samples == 0 {
            return bad("eval_samples must be at least 1");
        }
        if !(self.base_lr > 0.0 && self.cls_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) || self.adam.eps <= 0.0 {
            return bad("Adam needs beta1, beta2 in [0, 1) and eps > 0");
        }
        if !(self.flags.app || self.flags.cat || self.flags.mot) {
            return bad("at least one task must be enabled");
        }
        if self.base_width == 0 || self.n_res_blocks == 0 {
            return bad("base_width and n_res_blocks must be positive");
        }
        Ok(())
    }

    pub fn adversarial_labels(&self) -> AdversarialLabels {
        AdversarialLabels::new(self.swap_adv_labels)
    }
}

/// Network-ready tensors of one clip window.
#[derive(Clone, Debug)]
pub struct Sample {
    pub input: Tensor,
    pub x1: Tensor,
    pub targets: Tensor,
    /// `[T, C]` channel means of every frame.
    pub means: Tensor,
    pub label: usize,
}

/// Compresses the first `config.frames` frames of `clip` and builds every
/// tensor the step needs.
pub fn prepare_sample(clip: &RawClip, label: usize, config: &TrainConfig) -> Result<Sample> {
    let window = first_window(clip, config.frames)?;
    let c = compress_clip(&window, config.block_size, config.search_range)?;
    Ok(Sample {
        input: assemble_input(&c, config.input_mode)?,
        x1: key_frame(&c),
        targets: motion_targets(&c)?,
        means: frame_channel_means(&window),
        label,
    })
}

pub(crate) fn first_window(clip: &RawClip, frames: usize) -> Result<RawClip> {
    match clip.frames() {
        n if n == frames => Ok(clip.clone()),
        n if n > frames => clip.window(0, frames),
        n => Err(Error::Contract(format!("clip has {n} frames, the model expects {frames}"))),
    }
}

/// A collated mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Tensor,
    pub x1: Tensor,
    pub targets: Tensor,
    /// One `[N, C]` tensor per frame.
    pub frame_means: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn collate(samples: &[&Sample]) -> Result<Self> {
        let stack = |f: &dyn Fn(&Sample) -> &Tensor| Tensor::stack(&samples.iter().map(|s| f(s).clone()).collect::<Vec<_>>());
        let means = stack(&|s| &s.means)?;
        let (n, t, c) = match means.shape() {
            &[n, t, c] => (n, t, c),
            s => return Err(Error::Dimension(format!("frame means of shape {s:?}"))),
        };
        let frame_means = (0..t)
            .map(|ti| {
                let data = (0..n).flat_map(|i| means.data()[(i * t + ti) * c..(i * t + ti + 1) * c].to_vec()).collect();
                Tensor::new(&[n, c], data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            inputs: stack(&|s| &s.input)?,
            x1: stack(&|s| &s.x1)?,
            targets: stack(&|s| &s.targets)?,
            frame_means,
            labels: samples.iter().map(|s| s.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Per-step switches of [`train_ifs_step`].
#[derive(Clone, Copy, Debug)]
pub struct StepOptions {
    pub flags: LossFlags,
    pub labels: AdversarialLabels,
    pub adam: Adam,
    pub update_discriminator: bool,
}

impl StepOptions {
    pub fn from_config(config: &TrainConfig, step: u64) -> Self {
        Self {
            flags: config.flags,
            labels: config.adversarial_labels(),
            adam: config.adam,
            update_discriminator: step % config.d_every as u64 == 0,
        }
    }
}

fn diverged(term: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) => Error::Divergence(term.to_string()),
        other => other,
    }
}

fn add_term(g: &mut Graph<'_>, total: Option<Var>, term: Var) -> Result<Option<Var>> {
    Ok(Some(match total {
        Some(t) => g.add(t, term)?,
        None => term,
    }))
}

fn scalar(g: &Graph<'_>, v: Var) -> f64 {
    g.value(v).item() as f64
}

/// Discriminator update on a detached synthetic frame. Returns `r_adv_d`.
fn discriminator_phase(d: &mut Encoder, x1: &Tensor, xhat: Tensor, opts: &StepOptions, lr: f64) -> Result<f64> {
    d.zero_grad();
    let value = {
        let mut g = Graph::new();
        let real = g.input(x1.clone());
        let fake = g.input(xhat);
        let sr = d.forward(&mut g, real, Bind::Train).map_err(diverged("r_adv_d"))?;
        let sf = d.forward(&mut g, fake, Bind::Train).map_err(diverged("r_adv_d"))?;
        let loss = losses::discriminator_loss(&mut g, sr, sf, opts.labels).map_err(diverged("r_adv_d"))?;
        g.backward(loss)?;
        scalar(&g, loss)
    };
    opts.adam.step(d.parameters_mut(), lr)?;
    Ok(value)
}

/// One joint step. Gradients are reset at the start of each phase and left
/// in place afterwards.
pub fn train_ifs_step(models: &mut IfsModels, batch: &Batch, lr: f64, opts: &StepOptions) -> Result<LossReport> {
    let flags = opts.flags;
    let IfsModels { generator, appearance, motion, classifier, discriminator } = models;
    for net in [&*generator as &dyn Network, &*appearance, &*motion, &*classifier] {
        net.zero_grad();
    }
    let channels = generator.config.output_channels;
    let mut report = LossReport::default();

    let mut g = Graph::new();
    let inputs = g.input(batch.inputs.clone());
    let xhat = generator.forward(&mut g, inputs, Bind::Train).map_err(diverged("x_hat"))?;

    // The generator is untouched until the end of the step, so its current
    // output is exactly the detached frame the discriminator trains on.
    if flags.adv && opts.update_discriminator {
        report.r_adv_d = discriminator_phase(discriminator, &batch.x1, g.value(xhat).clone(), opts, lr)?;
    }

    let mut total = None;
    if flags.app {
        let rec = appearance.forward(&mut g, xhat, Bind::Train).map_err(diverged("l_app"))?;
        let x1 = g.input(batch.x1.clone());
        let l = losses::appearance_loss(&mut g, x1, rec).map_err(diverged("l_app"))?;
        report.l_app = scalar(&g, l);
        total = add_term(&mut g, total, l)?;
    }
    if flags.cat {
        let logits = classifier.forward(&mut g, xhat, Bind::Train).map_err(diverged("l_cat"))?;
        let l = losses::categorization_loss(&mut g, logits, &batch.labels).map_err(diverged("l_cat"))?;
        report.l_cat = scalar(&g, l);
        total = add_term(&mut g, total, l)?;
    }
    if flags.mot {
        let pred = motion.forward(&mut g, xhat, Bind::Train).map_err(diverged("l_mot"))?;
        let target = g.input(batch.targets.clone());
        let l = losses::motion_loss(&mut g, pred, target, channels).map_err(diverged("l_mot"))?;
        report.l_mot = scalar(&g, l);
        total = add_term(&mut g, total, l)?;
    }
    if flags.adv {
        let scores = discriminator.forward(&mut g, xhat, Bind::Frozen).map_err(diverged("r_adv_g"))?;
        let l = losses::generator_adversarial_loss(&mut g, scores, opts.labels).map_err(diverged("r_adv_g"))?;
        report.r_adv_g = scalar(&g, l);
        total = add_term(&mut g, total, l)?;
    }
    if flags.color {
        let l = losses::color_consistency_loss(&mut g, &batch.frame_means, xhat).map_err(diverged("r_color"))?;
        report.r_color = scalar(&g, l);
        total = add_term(&mut g, total, l)?;
    }
    let total = total.ok_or_else(|| Error::Config("no task enabled".into()))?;
    report.total = scalar(&g, total);
    if let Some(term) = report.non_finite_term() {
        return Err(Error::Divergence(term.to_string()));
    }
    g.backward(total)?;
    drop(g);

    let mut params = generator.parameters_mut();
    if flags.app {
        params.extend(appearance.parameters_mut());
    }
    if flags.cat {
        params.extend(classifier.parameters_mut());
    }
    if flags.mot {
        params.extend(motion.parameters_mut());
    }
    opts.adam.step(params, lr)?;
    Ok(report)
}

/// All terms on one batch without any update.
pub fn evaluate_ifs_batch(models: &IfsModels, batch: &Batch, flags: LossFlags, labels: AdversarialLabels) -> Result<LossReport> {
    let channels = models.generator.config.output_channels;
    let mut r = LossReport::default();
    let mut g = Graph::new();
    let inputs = g.input(batch.inputs.clone());
    let xhat = models.generator.forward(&mut g, inputs, Bind::Frozen)?;
    let x1 = g.input(batch.x1.clone());
    if flags.app {
        let rec = models.appearance.forward(&mut g, xhat, Bind::Frozen)?;
        let l = losses::appearance_loss(&mut g, x1, rec)?;
        r.l_app = scalar(&g, l);
    }
    if flags.cat {
        let logits = models.classifier.forward(&mut g, xhat, Bind::Frozen)?;
        let l = losses::categorization_loss(&mut g, logits, &batch.labels)?;
        r.l_cat = scalar(&g, l);
    }
    if flags.mot {
        let pred = models.motion.forward(&mut g, xhat, Bind::Frozen)?;
        let target = g.input(batch.targets.clone());
        let l = losses::motion_loss(&mut g, pred, target, channels)?;
        r.l_mot = scalar(&g, l);
    }
    if flags.adv {
        let sf = models.discriminator.forward(&mut g, xhat, Bind::Frozen)?;
        let sr = models.discriminator.forward(&mut g, x1, Bind::Frozen)?;
        let ld = losses::discriminator_loss(&mut g, sr, sf, labels)?;
        let lg = losses::generator_adversarial_loss(&mut g, sf, labels)?;
        r.r_adv_d = scalar(&g, ld);
        r.r_adv_g = scalar(&g, lg);
    }
    if flags.color {
        let l = losses::color_consistency_loss(&mut g, &batch.frame_means, xhat)?;
        r.r_color = scalar(&g, l);
    }
    r.total = r.total_of(flags);
    Ok(r)
}

/// Run-level facts stored next to the parameters of an IFS checkpoint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IfsMeta {
    pub arch: ArchConfig,
    pub frames: usize,
    pub classes: usize,
    pub block_size: usize,
    pub search_range: usize,
    pub input_mode: InputMode,
    pub flags: LossFlags,
    /// Epochs completed.
    pub epoch: usize,
    /// Steps completed.
    pub step: u64,
    pub best_val: f64,
}

fn mode_code(m: InputMode) -> f32 {
    match m {
        InputMode::Compressed => 0.0,
        InputMode::Raw => 1.0,
        InputMode::MotionOnly => 2.0,
    }
}

fn flag_bits(f: LossFlags) -> f32 {
    [f.app, f.cat, f.mot, f.adv, f.color].iter().enumerate().map(|(i, &b)| (b as u32) << i).sum::<u32>() as f32
}

impl IfsMeta {
    fn store(&self, ckpt: &mut Checkpoint) {
        self.arch.store(ckpt, "ifs");
        ckpt.insert_scalar("meta.frames", self.frames as f32);
        ckpt.insert_scalar("meta.classes", self.classes as f32);
        ckpt.insert_scalar("meta.block_size", self.block_size as f32);
        ckpt.insert_scalar("meta.search_range", self.search_range as f32);
        ckpt.insert_scalar("meta.input_mode", mode_code(self.input_mode));
        ckpt.insert_scalar("meta.flags", flag_bits(self.flags));
        ckpt.insert_scalar("meta.epoch", self.epoch as f32);
        // split so step counts beyond f32 precision survive
        ckpt.insert_scalar("meta.step_hi", (self.step >> 20) as f32);
        ckpt.insert_scalar("meta.step_lo", (self.step & 0xF_FFFF) as f32);
        ckpt.insert_scalar("meta.best_val", self.best_val as f32);
    }

    fn load(ckpt: &Checkpoint) -> Result<Self> {
        let u = |k: &str| ckpt.scalar(k).map(|v| v as usize);
        let input_mode = match u("meta.input_mode")? {
            0 => InputMode::Compressed,
            1 => InputMode::Raw,
            2 => InputMode::MotionOnly,
            v => return Err(Error::format("meta.input_mode", format!("unknown code {v}"))),
        };
        let bits = u("meta.flags")?;
        let bit = |i: usize| bits >> i & 1 == 1;
        Ok(Self {
            arch: ArchConfig::load(ckpt, "ifs")?,
            frames: u("meta.frames")?,
            classes: u("meta.classes")?,
            block_size: u("meta.block_size")?,
            search_range: u("meta.search_range")?,
            input_mode,
            flags: LossFlags { app: bit(0), cat: bit(1), mot: bit(2), adv: bit(3), color: bit(4) },
            epoch: u("meta.epoch")?,
            step: ((u("meta.step_hi")? as u64) << 20) | u("meta.step_lo")? as u64,
            best_val: ckpt.scalar("meta.best_val")? as f64,
        })
    }
}

pub fn save_ifs_checkpoint(models: &IfsModels, meta: &IfsMeta, path: &Path) -> Result<()> {
    let mut ckpt = Checkpoint::new();
    meta.store(&mut ckpt);
    ckpt.add_parameters(models.all_parameters());
    ckpt.save(path)
}

/// Rebuilds the models described by the checkpoint and restores their
/// parameters and optimizer state.
pub fn load_ifs_checkpoint(path: &Path) -> Result<(IfsModels, IfsMeta)> {
    let ckpt = Checkpoint::load(path)?;
    let wrap = |e: Error| Error::Load { path: path.to_path_buf(), source: Box::new(e) };
    let meta = IfsMeta::load(&ckpt).map_err(wrap)?;
    let mut models = IfsModels::new(meta.arch, meta.frames, meta.classes, &mut ChaCha8Rng::seed_from_u64(0)).map_err(wrap)?;
    ckpt.restore_parameters(models.all_parameters_mut()).map_err(wrap)?;
    Ok((models, meta))
}

/// Like [`load_ifs_checkpoint`] but rejects a checkpoint built for another
/// architecture.
pub fn load_ifs_checkpoint_for(path: &Path, expected: &ArchConfig) -> Result<(IfsModels, IfsMeta)> {
    let (models, meta) = load_ifs_checkpoint(path)?;
    if &meta.arch != expected {
        return Err(Error::Load {
            path: path.to_path_buf(),
            source: Box::new(Error::format("meta.ifs", format!("checkpoint holds {:?}, expected {expected:?}", meta.arch))),
        });
    }
    Ok((models, meta))
}

/// One epoch of an IFS run.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossReport,
    pub val: LossReport,
}

#[derive(Clone, Debug)]
pub struct IfsOutcome {
    pub history: Vec<EpochRecord>,
    pub steps: u64,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

struct LoadedSplit {
    clips: Vec<RawClip>,
    labels: Vec<usize>,
    names: Vec<String>,
}

fn load_split(manifest: &Manifest, split: Split, limit: usize) -> Result<LoadedSplit> {
    let mut records = manifest.split(split);
    if limit > 0 {
        records.truncate(limit);
    }
    let clips = records.par_iter().map(|r| manifest.load_clip(r)).collect::<Result<Vec<_>>>()?;
    Ok(LoadedSplit {
        clips,
        labels: records.iter().map(|r| r.label).collect(),
        names: records.iter().map(|r| r.clip_path.display().to_string()).collect(),
    })
}

fn check_flip(config_flip: bool, classes: usize) -> Result<()> {
    if config_flip && flipped_label(0, classes).is_none() {
        return Err(Error::Config(format!("horizontal flips have no label mapping for {classes} classes")));
    }
    Ok(())
}

/// Seeded per-sample flip decision.
fn flip_decision(seed: u64, epoch: usize, index: usize) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f11b);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng.random_bool(0.5)
}

fn flipped(clip: &RawClip, label: usize, classes: usize, apply: bool) -> (RawClip, usize) {
    if apply {
        (flip_horizontal(clip, true), flipped_label(label, classes).expect("checked"))
    } else {
        (clip.clone(), label)
    }
}

fn prepare_all(clips: &[RawClip], labels: &[usize], config: &TrainConfig) -> Result<Vec<Sample>> {
    clips.par_iter().zip(labels).map(|(c, &l)| prepare_sample(c, l, config)).collect()
}

fn open_csv(path: &Path, header: &str, append: bool) -> Result<File> {
    let exists = append && path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(exists)
        .truncate(!exists)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if !exists {
        writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
    }
    Ok(f)
}

fn mean_report(reports: &[(LossReport, usize)]) -> LossReport {
    let n: usize = reports.iter().map(|r| r.1).sum();
    let mut acc = LossReport::default();
    for (r, k) in reports {
        acc.accumulate(r, *k as f64 / n.max(1) as f64);
    }
    acc
}

/// Trains all five networks on the manifest's training split, validating
/// every epoch. With `resume`, continues from `out_dir/ifs_last.ckpt` when
/// it exists.
pub fn train_ifs(config: &TrainConfig, manifest: &Manifest, out_dir: &Path, resume: bool) -> Result<IfsOutcome> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let train = load_split(manifest, Split::Train, config.max_train_clips)?;
    let val = load_split(manifest, Split::Val, 0)?;
    let first = train.clips.first().ok_or_else(|| Error::Contract("training split is empty".into()))?;
    let classes = manifest.classes();
    check_flip(config.flip, classes)?;
    let shape = first.shape();
    let arch = ArchConfig {
        base_width: config.base_width,
        n_res_blocks: config.n_res_blocks,
        input_channels: config.input_mode.input_channels(config.frames, shape.channels),
        output_channels: shape.channels,
        height: shape.height,
        width: shape.width,
    };

    let last_path = out_dir.join(IFS_LAST);
    let best_path = out_dir.join(IFS_BEST);
    let resuming = resume && last_path.exists();
    let (mut models, mut meta) = if resuming {
        let (m, meta) = load_ifs_checkpoint_for(&last_path, &arch)?;
        log::info!("resuming from {} at epoch {} step {}", last_path.display(), meta.epoch, meta.step);
        (m, meta)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let models = IfsModels::new(arch, config.frames, classes, &mut rng)?;
        let meta = IfsMeta {
            arch,
            frames: config.frames,
            classes,
            block_size: config.block_size,
            search_range: config.search_range,
            input_mode: config.input_mode,
            flags: config.flags,
            epoch: 0,
            step: 0,
            best_val: f64::INFINITY,
        };
        (models, meta)
    };

    let cached = if config.flip { None } else { Some(prepare_all(&train.clips, &train.labels, config)?) };
    let val_samples = prepare_all(&val.clips, &val.labels, config)?;
    let mut loss_csv = open_csv(&out_dir.join(LOSS_CSV), LOSS_CSV_HEADER, resuming)?;
    let mut epoch_csv = open_csv(&out_dir.join(EPOCH_CSV), "epoch,lr,train_total,val_total", resuming)?;
    let mut history = Vec::new();

    'epochs: for epoch in meta.epoch..config.epochs {
        let lr = cosine_lr(config.base_lr, epoch as f64, config.epochs as f64);
        let mut train_reports = Vec::new();
        let mut stopped = false;
        for idx in batch_indices(train.clips.len(), config.batch_size, config.seed, epoch)? {
            if config.max_steps > 0 && meta.step >= config.max_steps {
                stopped = true;
                break;
            }
            let fresh: Vec<Sample>;
            let samples: Vec<&Sample> = match &cached {
                Some(all) => idx.iter().map(|&i| &all[i]).collect(),
                None => {
                    fresh = idx
                        .par_iter()
                        .map(|&i| {
                            let apply = flip_decision(config.seed, epoch, i);
                            let (clip, label) = flipped(&train.clips[i], train.labels[i], classes, apply);
                            prepare_sample(&clip, label, config)
                        })
                        .collect::<Result<_>>()?;
                    fresh.iter().collect()
                }
            };
            let batch = Batch::collate(&samples)?;
            let opts = StepOptions::from_config(config, meta.step);
            let report = train_ifs_step(&mut models, &batch, lr, &opts)?;
            meta.step += 1;
            writeln!(loss_csv, "{}", report.csv_line(meta.step, lr)).map_err(|e| Error::io(out_dir.join(LOSS_CSV), e))?;
            train_reports.push((report, batch.len()));
        }
        if train_reports.is_empty() {
            break 'epochs;
        }
        let mut val_reports = Vec::new();
        for chunk in val_samples.chunks(config.batch_size) {
            let batch = Batch::collate(&chunk.iter().collect::<Vec<_>>())?;
            val_reports.push((evaluate_ifs_batch(&models, &batch, config.flags, config.adversarial_labels())?, batch.len()));
        }
        let record = EpochRecord { epoch, lr, train: mean_report(&train_reports), val: mean_report(&val_reports) };
        log::info!("epoch {epoch} lr {lr:.6} train [{}] val [{}]", record.train, record.val);
        writeln!(epoch_csv, "{epoch},{lr:e},{:e},{:e}", record.train.total, record.val.total)
            .map_err(|e| Error::io(out_dir.join(EPOCH_CSV), e))?;
        meta.epoch = epoch + 1;
        let val_total = if val_reports.is_empty() { record.train.total } else { record.val.total };
        if val_total < meta.best_val {
            meta.best_val = val_total;
            save_ifs_checkpoint(&models, &meta, &best_path)?;
        }
        save_ifs_checkpoint(&models, &meta, &last_path)?;
        history.push(record);
        if stopped {
            break;
        }
    }
    if !last_path.exists() {
        save_ifs_checkpoint(&models, &meta, &last_path)?;
    }
    if !best_path.exists() {
        fs::copy(&last_path, &best_path).map_err(|e| Error::io(&best_path, e))?;
    }
    Ok(IfsOutcome { history, steps: meta.step, last_checkpoint: last_path, best_checkpoint: best_path })
}

/// Classifier checkpoint: the network plus what it was trained on.
#[derive(Clone, Debug)]
pub struct ClassifierModel {
    pub net: Encoder,
    pub source: FrameSource,
    pub height: usize,
    pub width: usize,
}

const CLASSIFIER_NAME: &str = "Cls";

impl ClassifierModel {
    pub fn new(base_width: usize, channels: usize, classes: usize, height: usize, width: usize, source: FrameSource, seed: u64) -> Result<Self> {
        let net = Encoder::classifier(CLASSIFIER_NAME, base_width, channels, classes, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(Self { net, source, height, width })
    }

    pub fn classes(&self) -> usize {
        self.net.classes().expect("classifier head")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ckpt = Checkpoint::new();
        let in_ch = self.net.convs[0].weight.value.shape()[1];
        let base = self.net.convs[0].weight.value.shape()[0];
        for (k, v) in [
            ("base_width", base),
            ("in_channels", in_ch),
            ("classes", self.classes()),
            ("height", self.height),
            ("width", self.width),
            ("source", self.source.code()),
        ] {
            ckpt.insert_scalar(format!("meta.cls.{k}"), v as f32);
        }
        ckpt.add_parameters(self.net.parameters());
        ckpt.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let wrap = |e: Error| Error::Load { path: path.to_path_buf(), source: Box::new(e) };
        let u = |k: &str| ckpt.scalar(&format!("meta.cls.{k}")).map(|v| v as usize).map_err(wrap);
        let source = FrameSource::from_code(u("source")?).map_err(wrap)?;
        let mut m = Self::new(u("base_width")?, u("in_channels")?, u("classes")?, u("height")?, u("width")?, source, 0).map_err(wrap)?;
        ckpt.restore_parameters(m.net.parameters_mut()).map_err(wrap)?;
        Ok(m)
    }

    /// Softmax probabilities `[N][K]` for `[C, H, W]` frames.
    pub fn probabilities(&self, frames: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(64) {
            let mut g = Graph::new();
            let x = g.input(Tensor::stack(chunk)?);
            let logits = self.net.forward(&mut g, x, Bind::Frozen)?;
            out.extend(softmax_rows(g.value(logits)));
        }
        Ok(out)
    }
}

pub fn softmax_rows(logits: &Tensor) -> Vec<Vec<f64>> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
            let e: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_top1: f64,
}

#[derive(Clone, Debug)]
pub struct ClassifierOutcome {
    pub history: Vec<ClassifierEpoch>,
    /// Validation top-1 of the final model.
    pub val_top1: f64,
    pub checkpoint: PathBuf,
}

/// Frames for every clip, in both orientations when flips are enabled.
fn source_frames_for(
    clips: &[RawClip],
    labels: &[usize],
    classes: usize,
    source: FrameSource,
    synth: Option<&Synthesizer>,
    config: &TrainConfig,
    with_flips: bool,
) -> Result<(Vec<Tensor>, Option<(Vec<Tensor>, Vec<usize>)>)> {
    let windows = clips.iter().map(|c| first_window(c, config.frames)).collect::<Result<Vec<_>>>()?;
    let frames = recognition::source_frames(source, synth, &windows)?;
    if !with_flips {
        return Ok((frames, None));
    }
    let flipped_windows: Vec<RawClip> = windows.iter().map(|w| flip_horizontal(w, true)).collect();
    let flipped_labels = labels.iter().map(|&l| flipped_label(l, classes).expect("checked")).collect();
    Ok((frames, Some((recognition::source_frames(source, synth, &flipped_windows)?, flipped_labels))))
}

/// Trains a fresh classifier on frames produced by `source` (the generator
/// stays frozen) and reports validation top-1 each epoch.
pub fn train_classifier(
    config: &TrainConfig,
    manifest: &Manifest,
    source: FrameSource,
    synth: Option<&Synthesizer>,
    out_dir: &Path,
) -> Result<ClassifierOutcome> {
    config.validate()?;
    if source.needs_generator() && synth.is_none() {
        return Err(Error::Contract(format!("frame source `{source}` needs a generator checkpoint")));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let train = load_split(manifest, Split::Train, config.max_train_clips)?;
    let val = load_split(manifest, Split::Val, 0)?;
    let classes = manifest.classes();
    check_flip(config.flip, classes)?;
    let first = train.clips.first().ok_or_else(|| Error::Contract("training split is empty".into()))?;
    let shape = first.shape();

    let (frames, flips) = source_frames_for(&train.clips, &train.labels, classes, source, synth, config, config.flip)?;
    let val_videos = recognition::load_eval_videos(&val.clips, &val.labels, &val.names, config.frames, config.eval_samples, source, synth)?;
    let mut model = ClassifierModel::new(config.base_width, shape.channels, classes, shape.height, shape.width, source, config.seed ^ 0xc1a5)?;
    let mut csv = open_csv(&out_dir.join(CLASSIFIER_CSV), "epoch,lr,train_loss,val_top1", false)?;
    let mut history = Vec::new();
    let mut step = 0u64;
    for epoch in 0..config.cls_epochs {
        let lr = cosine_lr(config.cls_lr, epoch as f64, config.cls_epochs as f64);
        let mut loss_sum = 0.0;
        for idx in batch_indices(frames.len(), config.cls_batch_size, config.seed ^ 0xc1a5, epoch)? {
            let mut xs = Vec::with_capacity(idx.len());
            let mut ys = Vec::with_capacity(idx.len());
            for &i in &idx {
                match &flips {
                    Some((ff, fl)) if flip_decision(config.seed, epoch, i) => {
                        xs.push(ff[i].clone());
                        ys.push(fl[i]);
                    }
                    _ => {
                        xs.push(frames[i].clone());
                        ys.push(train.labels[i]);
                    }
                }
            }
            model.net.zero_grad();
            let loss = {
                let mut g = Graph::new();
                let x = g.input(Tensor::stack(&xs)?);
                let logits = model.net.forward(&mut g, x, Bind::Train).map_err(diverged("l_cat"))?;
                let l = losses::categorization_loss(&mut g, logits, &ys).map_err(diverged("l_cat"))?;
                g.backward(l)?;
                scalar(&g, l)
            };
            config.adam.step(model.net.parameters_mut(), lr)?;
            loss_sum += loss * idx.len() as f64;
            step += 1;
        }
        let val_top1 = if val_videos.is_empty() { f64::NAN } else { recognition::evaluate_top1(&model, &val_videos)? };
        let rec = ClassifierEpoch { epoch, lr, train_loss: loss_sum / frames.len() as f64, val_top1 };
        log::info!("classifier[{source}] epoch {epoch} loss {:.4} val top1 {:.3}", rec.train_loss, val_top1);
        writeln!(csv, "{epoch},{lr:e},{:e},{}", rec.train_loss, val_top1).map_err(|e| Error::io(out_dir.join(CLASSIFIER_CSV), e))?;
        history.push(rec);
    }
    log::debug!("classifier finished after {step} steps");
    let checkpoint = out_dir.join(CLASSIFIER_CKPT);
    model.save(&checkpoint)?;
    let val_top1 = history.last().map(|h| h.val_top1).unwrap_or(f64::NAN);
    Ok(ClassifierOutcome { history, val_top1, checkpoint })
}

/// Names of parameters whose value differs between two snapshots.
pub fn changed_parameters(before: &[Parameter], after: &[&Parameter]) -> Vec<String> {
    before
        .iter()
        .zip(after)
        .filter(|(a, b)| a.value != b.value)
        .map(|(a, _)| a.name.clone())
        .collect()
}

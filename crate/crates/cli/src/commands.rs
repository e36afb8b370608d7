use std::fs;
use std::path::{Path, PathBuf};

use clap::ArgMatches;
use ifs_core::codec::{compress_clip, reconstruct_clip, CompressedClip, RawClip, CVID_MAGIC, RVID_MAGIC};
use ifs_core::config::{RunConfig, KEYS};
use ifs_core::dataset::{generate_moving_shapes, Manifest, Split};
use ifs_core::recognition::{evaluate_manifest, inspection_panels, synthesize_clip_summary, write_ppm, FrameSource, Synthesizer};
use ifs_core::tensor::{Checkpoint, CHECKPOINT_MAGIC};
use ifs_core::trainer::{load_ifs_checkpoint, train_classifier, train_ifs, ClassifierModel};
use ifs_core::{Error, Result};

pub const RUN_CONFIG_NAME: &str = "run.cfg";

fn path(m: &ArgMatches, name: &str) -> PathBuf {
    PathBuf::from(m.get_one::<String>(name).expect("required by clap"))
}

fn opt_path(m: &ArgMatches, name: &str) -> Option<PathBuf> {
    m.get_one::<String>(name).map(PathBuf::from)
}

fn run_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut overrides: Vec<(String, String)> = KEYS
        .iter()
        .filter(|(k, _)| *k != "seed")
        .filter_map(|(k, _)| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
        .collect();
    if let Some(seed) = m.get_one::<u64>("seed") {
        overrides.insert(0, ("seed".into(), seed.to_string()));
    }
    RunConfig::load(opt_path(m, "config").as_deref(), &overrides)
}

fn save_run_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join(RUN_CONFIG_NAME);
    fs::write(&p, cfg.to_text()).map_err(|e| Error::io(&p, e))
}

fn generator(m: &ArgMatches, source: FrameSource) -> Result<Option<Synthesizer>> {
    match (source.needs_generator(), opt_path(m, "checkpoint")) {
        (true, Some(p)) => Ok(Some(Synthesizer::load(&p)?)),
        (true, None) => Err(Error::Config(format!("--source {source} needs --checkpoint"))),
        (false, _) => Ok(None),
    }
}

pub fn run(m: &ArgMatches) -> Result<()> {
    match m.subcommand() {
        Some(("gen-data", m)) => gen_data(m),
        Some(("encode", m)) => encode(m),
        Some(("train-ifs", m)) => train_ifs_cmd(m),
        Some(("synthesize", m)) => synthesize(m),
        Some(("train-classifier", m)) => train_classifier_cmd(m),
        Some(("evaluate", m)) => evaluate(m),
        Some(("inspect", m)) => inspect(m),
        _ => unreachable!("clap requires a subcommand"),
    }
}

fn gen_data(m: &ArgMatches) -> Result<()> {
    let cfg = run_config(m)?;
    let out = path(m, "out");
    let manifest = generate_moving_shapes(&cfg.data, &out)?;
    println!(
        "wrote {} clips ({} train, {} val) to {}",
        manifest.records.len(),
        manifest.split(Split::Train).len(),
        manifest.split(Split::Val).len(),
        out.display()
    );
    Ok(())
}

fn encode(m: &ArgMatches) -> Result<()> {
    let clip = RawClip::load(&path(m, "in"))?;
    let c = compress_clip(&clip, *m.get_one("block").expect("default"), *m.get_one("search").expect("default"))?;
    let out = path(m, "out");
    c.save(&out)?;
    let energy: u64 = c.p_frames().iter().map(|p| p.residual.energy()).sum();
    println!("{} frames {:?} -> {} (residual energy {energy})", c.frames(), c.shape(), out.display());
    Ok(())
}

fn train_ifs_cmd(m: &ArgMatches) -> Result<()> {
    let cfg = run_config(m)?;
    let manifest = Manifest::load(&path(m, "data"))?;
    let out = path(m, "out");
    save_run_config(&cfg, &out)?;
    let outcome = train_ifs(&cfg.train, &manifest, &out, m.get_flag("resume"))?;
    if let Some(last) = outcome.history.last() {
        println!("epoch {} train [{}] val [{}]", last.epoch, last.train, last.val);
    }
    println!("{} steps; checkpoints {} and {}", outcome.steps, outcome.last_checkpoint.display(), outcome.best_checkpoint.display());
    Ok(())
}

fn synthesize(m: &ArgMatches) -> Result<()> {
    let synth = Synthesizer::load(&path(m, "checkpoint"))?;
    let input = path(m, "in");
    let video = RawClip::load(&input)?;
    let out = path(m, "out");
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    for (i, f) in synthesize_clip_summary(&synth, &video, &input.display().to_string())?.iter().enumerate() {
        let p = out.join(format!("frame_{i:03}.ppm"));
        write_ppm(&p, &f.frame)?;
        println!("{}\tsource={}\toffset={}\tcheckpoint={}", p.display(), f.source_clip, f.window_offset, f.checkpoint_id);
    }
    Ok(())
}

fn train_classifier_cmd(m: &ArgMatches) -> Result<()> {
    let cfg = run_config(m)?;
    let source: FrameSource = m.get_one::<String>("source").expect("required").parse()?;
    let synth = generator(m, source)?;
    let manifest = Manifest::load(&path(m, "data"))?;
    let out = path(m, "out");
    save_run_config(&cfg, &out)?;
    let outcome = train_classifier(&cfg.train, &manifest, source, synth.as_ref(), &out)?;
    println!("source={source} val_top1={} checkpoint={}", outcome.val_top1, outcome.checkpoint.display());
    Ok(())
}

fn evaluate(m: &ArgMatches) -> Result<()> {
    let cfg = run_config(m)?;
    let model = ClassifierModel::load(&path(m, "classifier"))?;
    let synth = generator(m, model.source)?;
    let manifest = Manifest::load(&path(m, "data"))?;
    let samples = m.get_one::<usize>("samples").copied().unwrap_or(cfg.train.eval_samples);
    let report = evaluate_manifest(&model, &manifest, synth.as_ref(), cfg.train.frames, samples)?;
    print!("{}", report.to_text());
    if let Some(out) = opt_path(m, "out") {
        report.save(&out)?;
    }
    Ok(())
}

fn inspect(m: &ArgMatches) -> Result<()> {
    if let Some(cvid) = opt_path(m, "decode") {
        let clip = reconstruct_clip(&CompressedClip::load(&cvid)?);
        let out = opt_path(m, "out").unwrap_or_else(|| cvid.with_extension("decoded.rvid"));
        clip.save(&out)?;
        println!("decoded {} frames {:?} -> {}", clip.frames(), clip.shape(), out.display());
        return Ok(());
    }
    if let Some(ckpt) = opt_path(m, "checkpoint") {
        let clip_path = opt_path(m, "clip").ok_or_else(|| Error::Config("--checkpoint needs --clip".into()))?;
        let out = opt_path(m, "out").ok_or_else(|| Error::Config("panels need --out DIR".into()))?;
        let (models, meta) = load_ifs_checkpoint(&ckpt)?;
        let clip = RawClip::load(&clip_path)?;
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        for (name, panel) in inspection_panels(&models, &meta, &clip)? {
            let p = out.join(format!("{name}.ppm"));
            write_ppm(&p, &panel)?;
            println!("{}", p.display());
        }
        return Ok(());
    }
    let file = opt_path(m, "file").ok_or_else(|| Error::Config("nothing to inspect: give FILE, --decode or --checkpoint".into()))?;
    describe(&file)
}

fn describe(file: &Path) -> Result<()> {
    if file.is_dir() {
        return describe_manifest(&Manifest::load(file)?);
    }
    let bytes = fs::read(file).map_err(|e| Error::io(file, e))?;
    if bytes.starts_with(RVID_MAGIC) {
        let c = RawClip::from_bytes(&bytes)?;
        println!("raw clip: {} frames {:?}", c.frames(), c.shape());
    } else if bytes.starts_with(CVID_MAGIC) {
        let c = CompressedClip::from_bytes(&bytes)?;
        println!("compressed clip: {} frames {:?} block {} search {}", c.frames(), c.shape(), c.block_size(), c.search_range());
        for (i, p) in c.p_frames().iter().enumerate() {
            println!("  t={} max|motion|={} residual energy={}", i + 2, p.motion.max_abs(), p.residual.energy());
        }
    } else if bytes.starts_with(CHECKPOINT_MAGIC) {
        let ckpt = Checkpoint::from_bytes(&bytes)?;
        println!("checkpoint: {} tensors", ckpt.len());
        for name in ckpt.names().filter(|n| n.starts_with("meta.")) {
            println!("  {name} = {}", ckpt.scalar(name)?);
        }
    } else {
        describe_manifest(&Manifest::load(file)?)?;
    }
    Ok(())
}

fn describe_manifest(manifest: &Manifest) -> Result<()> {
    println!(
        "manifest: {} clips, {} classes, {} train, {} val",
        manifest.records.len(),
        manifest.classes(),
        manifest.split(Split::Train).len(),
        manifest.split(Split::Val).len()
    );
    Ok(())
}

//! Moving-shapes generator, manifests and batching.

mod common;

use std::collections::BTreeMap;
use std::fs;

use ifs_core::codec::{compress_clip, RawClip};
use ifs_core::dataset::{
    batch_indices, flip_horizontal, flipped_label, generate_moving_shapes, iterate_batches, normalize_clip, normalize_pixel,
    render_clip, GeneratorConfig, Manifest, Split,
};
use ifs_core::Error;
use proptest::prelude::*;

fn small(seed: u64) -> GeneratorConfig {
    GeneratorConfig { num_clips: 40, seed, ..GeneratorConfig::default() }
}

fn tree(dir: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for sub in [dir.to_path_buf(), dir.join("clips")] {
        for e in fs::read_dir(&sub).unwrap() {
            let p = e.unwrap().path();
            if p.is_file() {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn same_seed_writes_identical_trees() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_moving_shapes(&small(3), a.path()).unwrap();
    generate_moving_shapes(&small(3), b.path()).unwrap();
    generate_moving_shapes(&small(4), c.path()).unwrap();
    let (ta, tb, tc) = (tree(a.path()), tree(b.path()), tree(c.path()));
    assert_eq!(ta.len(), 41);
    assert_eq!(ta, tb);
    assert_ne!(ta, tc);
}

#[test]
fn labels_are_balanced_and_the_split_is_stratified() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_moving_shapes(&small(5), dir.path()).unwrap();
    assert_eq!(m.classes(), 4);
    for k in 0..4 {
        let of = |s| m.split(s).iter().filter(|r| r.label == k).count();
        assert_eq!(of(Split::Train) + of(Split::Val), 10);
        assert_eq!(of(Split::Val), 2);
    }
    let reloaded = Manifest::load(dir.path()).unwrap();
    assert_eq!(reloaded.records, m.records);
    for r in &m.records {
        let clip = m.load_clip(r).unwrap();
        assert_eq!((clip.frames(), clip.shape().height, clip.shape().width, clip.shape().channels), (6, 32, 32, 3));
    }
}

/// Sum of displacements over blocks that moved, across all P-frames.
fn net_motion(clip: &RawClip) -> (i64, i64) {
    let c = compress_clip(clip, 8, 4).unwrap();
    let mut acc = (0i64, 0i64);
    for p in c.p_frames() {
        for &(dy, dx) in p.motion.vectors() {
            acc.0 += dy as i64;
            acc.1 += dx as i64;
        }
    }
    acc
}

#[test]
fn codec_motion_reveals_the_class_direction() {
    // a block that moves by v reads its reference at −v
    let cfg = GeneratorConfig::default();
    let mut correct = 0;
    let n = 80;
    for i in 0..n {
        let (clip, label) = render_clip(&cfg, i).unwrap();
        let (dy, dx) = net_motion(&clip);
        let guess = match (dy.abs() > dx.abs(), dy, dx) {
            (false, _, dx) if dx < 0 => 0,
            (false, _, _) => 1,
            (true, dy, _) if dy > 0 => 2,
            _ => 3,
        };
        correct += (guess == label) as usize;
    }
    assert!(correct * 10 >= n * 9, "{correct}/{n}");
}

#[test]
fn first_frames_alone_do_not_reveal_the_class() {
    // per-class mean of the first frame is indistinguishable at the 2% level
    let cfg = GeneratorConfig::default();
    let mut means = [0.0f64; 4];
    let mut counts = [0usize; 4];
    for i in 0..400 {
        let (clip, label) = render_clip(&cfg, i).unwrap();
        means[label] += clip.frame(0).iter().map(|&p| p as f64).sum::<f64>() / clip.shape().len() as f64;
        counts[label] += 1;
    }
    let means: Vec<f64> = means.iter().zip(counts).map(|(s, c)| s / c as f64).collect();
    let spread = means.iter().cloned().fold(f64::MIN, f64::max) - means.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread < 0.02 * 255.0, "{means:?}");
}

#[test]
fn flipping_mirrors_the_motion() {
    let cfg = GeneratorConfig::default();
    for i in 0..8 {
        let (clip, label) = render_clip(&cfg, i).unwrap();
        let flipped = flip_horizontal(&clip, true);
        assert_eq!(flip_horizontal(&flipped, true), clip);
        assert_eq!(flip_horizontal(&clip, false), clip);
        let ((dy, dx), (fy, fx)) = (net_motion(&clip), net_motion(&flipped));
        if label < 2 {
            assert!(dx * fx < 0, "clip {i}: {dx} vs {fx}");
            assert_eq!(flipped_label(label, 4), Some(1 - label));
        } else {
            assert_eq!(dy.signum(), fy.signum());
            assert_eq!(flipped_label(label, 4), Some(label));
        }
    }
}

#[test]
fn background_stays_static_between_frames() {
    let cfg = GeneratorConfig::default();
    let (clip, _) = render_clip(&cfg, 9).unwrap();
    let changed = clip.frame(0).iter().zip(clip.frame(5)).filter(|(a, b)| a != b).count();
    // two shapes of at most 12×12 pixels, before and after, on 3 channels
    assert!(changed <= 2 * 2 * 144 * 3);
    assert!(changed > 0);
}

#[test]
fn missing_clip_names_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_moving_shapes(&GeneratorConfig { num_clips: 4, ..GeneratorConfig::default() }, dir.path()).unwrap();
    fs::remove_file(dir.path().join(&m.records[2].clip_path)).unwrap();
    let err = iterate_batches(&m, &m.records, 4, 0, 0).unwrap().next().unwrap().unwrap_err();
    assert!(matches!(err, Error::Load { .. } | Error::Io { .. }), "{err:?}");
    assert!(err.to_string().contains("clip_00002.rvid"), "{err}");
}

#[test]
fn normalization_maps_the_byte_range_onto_unit_interval() {
    assert_eq!(normalize_pixel(0), -1.0);
    assert_eq!(normalize_pixel(255), 1.0);
    assert!((normalize_pixel(128) - 0.003_921_6).abs() < 1e-6);
    let (clip, _) = render_clip(&GeneratorConfig::default(), 0).unwrap();
    let t = normalize_clip(&clip);
    assert_eq!(t.shape(), &[6, 3, 32, 32]);
    assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

proptest! {
    #[test]
    fn batches_partition_the_records(n in 1usize..60, bs in 1usize..12, seed in any::<u64>(), epoch in 0usize..4) {
        let batches = batch_indices(n, bs, seed, epoch).unwrap();
        prop_assert_eq!(batches.len(), n.div_ceil(bs));
        prop_assert!(batches[..batches.len() - 1].iter().all(|b| b.len() == bs));
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(batch_indices(n, bs, seed, epoch).unwrap(), batches);
    }

    #[test]
    fn rendering_is_pure_in_config_and_index(seed in any::<u64>(), index in 0usize..500) {
        let cfg = GeneratorConfig { seed, ..GeneratorConfig::default() };
        let (a, la) = render_clip(&cfg, index).unwrap();
        let (b, lb) = render_clip(&cfg, index).unwrap();
        prop_assert_eq!(la, index % 4);
        prop_assert_eq!(la, lb);
        prop_assert_eq!(a, b);
    }
}

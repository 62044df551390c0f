use std::fs;
use std::path::Path;

use proptest::prelude::*;
use saliency_prior::data::{
    decode_pnm, encode_pgm, generate_synthetic, load_checkpoint, render_heatmap_overlay, resize_bilinear_image,
    save_checkpoint, synthesize, warm_start_from_checkpoint, Dataset, GrayImage, Raster, SynthParams,
};
use saliency_prior::explain::{ExplainerKind, SaliencyMap};
use saliency_prior::nn::{ArchConfig, DefectNet, Mode};
use saliency_prior::Error;

fn tiny_arch() -> ArchConfig {
    ArchConfig {
        height: 16,
        width: 16,
        widths: vec![4, 6],
        seg_width: 3,
        hidden: 5,
        ..ArchConfig::default()
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

proptest! {
    #[test]
    fn pgm_round_trip(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let levels: Vec<u8> = (0..h * w).map(|i| (seed.wrapping_mul(i as u64 + 7) >> 13) as u8).collect();
        let r = Raster { height: h, width: w, levels };
        prop_assert_eq!(decode_pnm(&encode_pgm(&r)).unwrap(), r);
    }
}

#[test]
fn resize_identity_and_constant() {
    let img = GrayImage::new(3, 5, (0..15).map(|i| i as f32 / 15.0).collect()).unwrap();
    assert_eq!(resize_bilinear_image(&img, 3, 5), img);
    let flat = GrayImage::new(4, 4, vec![0.3; 16]).unwrap();
    let up = resize_bilinear_image(&flat, 8, 8);
    assert!(up.values.iter().all(|&v| (v - 0.3).abs() < 1e-6));
}

#[test]
fn resize_checker_matches_hand_table() {
    let img = GrayImage::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let up = resize_bilinear_image(&img, 4, 4);
    #[rustfmt::skip]
    let want = [
        0.0, 0.25, 0.75, 1.0,
        0.25, 0.375, 0.625, 0.75,
        0.75, 0.625, 0.375, 0.25,
        1.0, 0.75, 0.25, 0.0,
    ];
    for (a, b) in up.values.iter().zip(want) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn generator_is_byte_deterministic() {
    let params = SynthParams {
        n_normal: 5,
        n_defect: 5,
        size: 64,
        seed: 7,
        ..SynthParams::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_synthetic(&params, a.path()).unwrap();
    generate_synthetic(&params, b.path()).unwrap();
    let (fa, fb) = (dir_bytes(a.path()), dir_bytes(b.path()));
    assert_eq!(fa.len(), 1 + 10 + 5);
    assert_eq!(fa, fb);

    let loaded = Dataset::load(a.path()).unwrap();
    let direct: Vec<_> = synthesize(&params).unwrap().into_iter().map(|s| s.sample).collect();
    assert_eq!(loaded.samples, direct);
    assert_eq!(loaded.generator, Some(params));
}

#[test]
fn defect_masks_are_small_and_visible() {
    let params = SynthParams {
        n_normal: 1,
        n_defect: 100,
        size: 64,
        seed: 3,
        ..SynthParams::default()
    };
    let pixels = 64 * 64;
    for s in synthesize(&params).unwrap().into_iter().filter(|s| s.sample.label == 1) {
        let mask = s.sample.gt_mask.as_ref().unwrap();
        let count = mask.count();
        assert!(count >= 1 && count as f64 <= 0.15 * pixels as f64, "{}: {count} px", s.sample.id);
        let diff: f64 = (0..pixels)
            .filter(|&i| mask.bits[i] == 1)
            .map(|i| (s.sample.image.values[i] - s.background.values[i]).abs() as f64)
            .sum::<f64>()
            / count as f64;
        assert!(diff >= 0.1, "{}: contrast {diff}", s.sample.id);
    }
}

#[test]
fn loader_names_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let params = SynthParams {
        n_normal: 2,
        n_defect: 2,
        size: 16,
        seed: 1,
        ..SynthParams::default()
    };
    generate_synthetic(&params, dir.path()).unwrap();
    let victim = dir.path().join("masks/defect_0001.pgm");
    fs::remove_file(&victim).unwrap();
    match Dataset::load(dir.path()) {
        Err(Error::MissingFile(p)) => assert_eq!(p, victim),
        other => panic!("expected missing-file error, got {other:?}"),
    }
}

#[test]
fn loader_rejects_duplicate_ids() {
    let dir = tempfile::tempdir().unwrap();
    let params = SynthParams {
        n_normal: 2,
        n_defect: 1,
        size: 16,
        seed: 1,
        ..SynthParams::default()
    };
    generate_synthetic(&params, dir.path()).unwrap();
    let path = dir.path().join("manifest.json");
    let text = fs::read_to_string(&path).unwrap().replace("normal_0001", "normal_0000");
    fs::write(&path, text).unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(Error::Format(m)) if m.contains("duplicate")));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let net = DefectNet::<f32>::init(tiny_arch(), 11, Mode::Guided).unwrap();
    save_checkpoint(&net, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.param_names(), net.param_names());
    for ((_, a), (_, b)) in back.params().zip(net.params()) {
        let bits = |t: &[f32]| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.data()), bits(b.data()));
    }
    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], b"DKPT0001");
}

#[test]
fn corrupted_blob_fails_digest() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let net = DefectNet::<f32>::init(tiny_arch(), 1, Mode::Baseline).unwrap();
    save_checkpoint(&net, &path).unwrap();
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 3;
    bytes[last] ^= 0x40;
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Digest { .. })));
}

#[test]
fn unknown_parameter_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let net = DefectNet::<f32>::init(tiny_arch(), 1, Mode::Baseline).unwrap();
    save_checkpoint(&net, &path).unwrap();
    let bytes = fs::read(&path).unwrap();
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let json = String::from_utf8(bytes[12..12 + len].to_vec()).unwrap();
    let renamed = json.replace("head.feat.bias", "head.fear.bias");
    let mut out = bytes[..8].to_vec();
    out.extend((renamed.len() as u32).to_le_bytes());
    out.extend(renamed.as_bytes());
    out.extend(&bytes[12 + len..]);
    fs::write(&path, out).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format(m)) if m.contains("head.fear.bias")));

    let versioned = json.replace("\"format_version\":1", "\"format_version\":2");
    let mut out = bytes[..8].to_vec();
    out.extend((versioned.len() as u32).to_le_bytes());
    out.extend(versioned.as_bytes());
    out.extend(&bytes[12 + len..]);
    fs::write(&path, out).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format(m)) if m.contains("version")));
}

#[test]
fn baseline_checkpoint_warm_starts_guided_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("base.ckpt");
    let base = DefectNet::<f32>::init(tiny_arch(), 2, Mode::Baseline).unwrap();
    save_checkpoint(&base, &path).unwrap();
    let mut guided = DefectNet::<f32>::init(tiny_arch(), 9, Mode::Guided).unwrap();
    let fresh = guided.clone();
    let skipped = warm_start_from_checkpoint(&mut guided, &path).unwrap();
    assert_eq!(skipped, vec!["head.decision.weight".to_string()]);
    for name in guided.param_names() {
        let now = guided.param(name).unwrap();
        if DefectNet::<f32>::is_seg_param(name) || name == "head.decision.weight" {
            assert_eq!(now, fresh.param(name).unwrap(), "{name}");
        } else {
            assert_eq!(now, base.param(name).unwrap(), "{name}");
        }
    }
}

fn map(h: usize, w: usize, values: Vec<f64>) -> SaliencyMap {
    SaliencyMap {
        height: h,
        width: w,
        values,
        explainer: ExplainerKind::FullGrad,
        sample_id: None,
        class: 1,
    }
}

#[test]
fn overlay_layout() {
    let dir = tempfile::tempdir().unwrap();
    let img = GrayImage::new(3, 4, vec![0.5; 12]).unwrap();
    let zero = render_heatmap_overlay(&img, &map(3, 4, vec![0.0; 12]), &dir.path().join("a.pgm")).unwrap();
    assert_eq!((zero.height, zero.width), (3, 12));
    for y in 0..3 {
        assert!(zero.levels[y * 12..y * 12 + 4].iter().all(|&l| l == 128));
        assert!(zero.levels[y * 12 + 4..(y + 1) * 12].iter().all(|&l| l == 0));
    }

    let mut hot = vec![0.0; 12];
    hot[2 * 4 + 1] = 1.0;
    let r = render_heatmap_overlay(&img, &map(3, 4, hot), &dir.path().join("b.pgm")).unwrap();
    let on_disk = decode_pnm(&fs::read(dir.path().join("b.pgm")).unwrap()).unwrap();
    assert_eq!(on_disk, r);
    let bright: Vec<usize> = (0..36).filter(|&i| r.levels[i] == 255).collect();
    assert_eq!(bright, vec![2 * 12 + 4 + 1, 2 * 12 + 8 + 1]);

    assert!(render_heatmap_overlay(&img, &map(4, 3, vec![0.0; 12]), &dir.path().join("c.pgm")).is_err());
}

use std::collections::BTreeMap;
use std::path::Path;

use consensus_diffusion::consensus::{build_consensus_stack, AnnotationSet};
use consensus_diffusion::data::{
    apply_affine, augment, gen_synthetic, load_dataset, resize_nearest, synthesize, write_gray8, AffineDraw,
    AugmentParams, LoadOptions, SynthSpec, MANIFEST_FILE,
};
use consensus_diffusion::eval::pairwise_dice;
use consensus_diffusion::maps::Mask;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for sub in ["", "images", "masks"] {
        for e in std::fs::read_dir(dir.join(sub)).unwrap() {
            let p = e.unwrap().path();
            if p.is_file() {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn generation_is_byte_identical_per_seed() {
    let spec = SynthSpec {
        count: 5,
        test_count: 2,
        ..Default::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen_synthetic(&spec, a.path()).unwrap();
    gen_synthetic(&spec, b.path()).unwrap();
    let ta = tree(a.path());
    assert_eq!(ta.len(), 1 + 5 * (1 + 3));
    assert_eq!(ta, tree(b.path()));
    let c = tempfile::tempdir().unwrap();
    gen_synthetic(&SynthSpec { seed: 1, ..spec }, c.path()).unwrap();
    assert_ne!(ta, tree(c.path()));
}

#[test]
fn moderate_noise_lands_in_agreement_band() {
    let spec = SynthSpec {
        count: 32,
        ..Default::default()
    };
    let d = 100.0 * pairwise_dice(&synthesize(&spec).unwrap()).unwrap();
    assert!((80.0..=95.0).contains(&d), "pairwise Dice {d}");
}

#[test]
fn noise_free_annotators_agree_perfectly() {
    let spec = SynthSpec {
        radial_noise: 0.0,
        offset_noise: 0.0,
        ..Default::default()
    };
    assert_eq!(pairwise_dice(&synthesize(&spec).unwrap()).unwrap(), 1.0);
}

#[test]
fn downsampled_masks_stay_binary() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        count: 2,
        test_count: 0,
        image_size: 64,
        ..Default::default()
    };
    gen_synthetic(&spec, dir.path()).unwrap();
    let opts = LoadOptions {
        image_size: Some(32),
        strict: true,
        split: None,
    };
    let ds = load_dataset(&dir.path().join(MANIFEST_FILE), &opts).unwrap();
    assert_eq!(ds.dims(), (32, 32));
    for s in &ds.samples {
        for m in s.masks() {
            assert!(m.data().iter().all(|&v| v <= 1));
        }
        assert!(s.image().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn mismatched_mask_size_names_file() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        count: 1,
        test_count: 0,
        image_size: 8,
        ..Default::default()
    };
    gen_synthetic(&spec, dir.path()).unwrap();
    write_gray8(&dir.path().join("masks/0000_a1.png"), 4, 4, &[0; 16]).unwrap();
    let err = load_dataset(&dir.path().join(MANIFEST_FILE), &LoadOptions::default())
        .unwrap_err()
        .to_string();
    assert!(err.contains("0000_a1.png"), "{err}");
}

#[test]
fn augmentation_preserves_binarity_and_nesting() {
    let samples = synthesize(&SynthSpec::default()).unwrap();
    let params = AugmentParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for s in samples.iter().take(8) {
        for _ in 0..10 {
            let (img, masks) = augment(s.image(), s.masks(), &params, &mut rng);
            assert_eq!(masks.len(), s.annotator_count());
            assert_eq!(img.dims(), s.dims());
            let aug = AnnotationSet::new(s.sample_id.clone(), img, masks).unwrap();
            assert!(build_consensus_stack(&aug).is_nested());
            for m in aug.masks() {
                assert!(m.data().iter().all(|&v| v <= 1));
            }
        }
    }
}

#[test]
fn shared_transform_moves_masks_together() {
    let s = &synthesize(&SynthSpec::default()).unwrap()[0];
    let draw = AffineDraw {
        scale: 1.05,
        rotation_deg: -9.0,
        translation: (0.05, -0.03),
        hflip: true,
        vflip: false,
    };
    let (_, together) = apply_affine(s.image(), s.masks(), &draw);
    for (i, m) in s.masks().iter().enumerate() {
        let (_, alone) = apply_affine(s.image(), std::slice::from_ref(m), &draw);
        assert_eq!(alone[0], together[i]);
    }
}

#[test]
fn nearest_resize_upsamples_blocks() {
    let m = Mask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
    let r = resize_nearest(&m, 4, 4);
    assert_eq!(r.data(), &[1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1]);
}

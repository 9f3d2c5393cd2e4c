use std::fs;

use coen::data::{
    degrade, generate, load_dataset, load_split, make_batches, render_clean, write_dataset, DegradationDraws, Scenario,
    Signature, SynthConfig,
};
use coen::params::{stream_rng, streams};
use coen::spectral::Spectrum;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(scenario: Scenario) -> SynthConfig {
    SynthConfig {
        n_identities: 3,
        train_per_id: 2,
        query_per_id: 1,
        gallery_per_id: 1,
        height: 16,
        width: 32,
        seed: 9,
        scenario,
        ..Default::default()
    }
}

#[test]
fn generation_is_deterministic() {
    let cfg = small(Scenario::Mixed);
    let a = generate(&cfg).unwrap();
    let b = generate(&cfg).unwrap();
    assert_eq!(a.train.samples, b.train.samples);
    assert_eq!(a.gallery.samples, b.gallery.samples);
    let c = generate(&SynthConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(a.train.samples[0].images, c.train.samples[0].images);
}

#[test]
fn flare_severity_targets_rgb_and_nir() {
    let ds = generate(&SynthConfig {
        severity_min: 0.8,
        severity_max: 0.9,
        ..small(Scenario::Flare)
    })
    .unwrap();
    for s in &ds.train.samples {
        assert!(s.severity[0] >= 0.8 && s.severity[1] >= 0.8, "{:?}", s.severity);
        assert_eq!(s.severity[2], 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Raising the flare level never brings RGB or NIR closer to the clean
    /// render, and thermal is never touched.
    #[test]
    fn flare_distance_grows_with_severity(seed in any::<u64>(), lo in 0.0f64..0.5, step in 0.1f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sig = Signature::draw(&mut rng);
        let clean = render_clean(&sig, 16, 32, &mut rng);
        let draws = DegradationDraws::draw(&mut rng, 16, 32);
        let (weak, _) = degrade(&clean, Scenario::Flare, lo, &draws);
        let (strong, _) = degrade(&clean, Scenario::Flare, lo + step, &draws);
        for sp in [Spectrum::Rgb, Spectrum::Nir] {
            let i = sp.index();
            prop_assert!(strong[i].mean_abs_diff(&clean[i]) + 1e-3 >= weak[i].mean_abs_diff(&clean[i]));
        }
        prop_assert_eq!(&strong[2], &clean[2]);
    }

    #[test]
    fn batches_have_p_identities_of_k(seed in any::<u64>(), p in 2usize..5, k in 2usize..5) {
        let labels: Vec<usize> = (0..6).flat_map(|id| std::iter::repeat_n(id, 3)).collect();
        let mut rng = stream_rng(seed, streams::EPOCH, 0);
        let batches = make_batches(&labels, p, k, &mut rng).unwrap();
        prop_assert_eq!(batches.len(), 6usize.div_ceil(p));
        for b in &batches {
            prop_assert_eq!(b.len(), p * k);
            let mut ids: Vec<usize> = b.iter().map(|&i| labels[i]).collect();
            ids.sort();
            ids.dedup();
            prop_assert_eq!(ids.len(), p);
        }
        let again = make_batches(&labels, p, k, &mut stream_rng(seed, streams::EPOCH, 0)).unwrap();
        prop_assert_eq!(batches, again);
    }
}

#[test]
fn too_few_identities_for_p_is_a_config_error() {
    let labels = [0, 0, 1, 1];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(make_batches(&labels, 4, 2, &mut rng), Err(coen::Error::Config(_))));
}

#[test]
fn png_round_trip_preserves_quantised_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(&small(Scenario::Flare)).unwrap();
    write_dataset(dir.path(), &ds).unwrap();
    let back = load_dataset(dir.path(), 16, 32).unwrap();
    assert_eq!(back.train.len(), ds.train.len());
    assert_eq!(back.query.len(), ds.query.len());
    assert_eq!(back.gallery.len(), ds.gallery.len());
    for (a, b) in ds.train.samples.iter().zip(&back.train.samples) {
        assert_eq!(a.identity, b.identity);
        assert_eq!(a.label, b.label);
        assert_eq!(a.scenario, b.scenario);
        for sp in 0..3 {
            assert!(a.images[sp].mean_abs_diff(&b.images[sp]) < 1e-12);
        }
        assert!((a.severity[0] - b.severity[0]).abs() < 1e-12);
    }
}

#[test]
fn loader_counts_and_labels() {
    // 2 identities × 2 cameras × 1 image.
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(&SynthConfig {
        n_identities: 2,
        train_per_id: 2,
        query_per_id: 0,
        gallery_per_id: 0,
        n_cams: 2,
        ..small(Scenario::Normal)
    })
    .unwrap();
    write_dataset(dir.path(), &ds).unwrap();
    let mut split = load_split(&dir.path().join("train"), 16, 32).unwrap();
    split.reindex();
    assert_eq!(split.len(), 4);
    let mut labels = split.labels();
    labels.sort();
    assert_eq!(labels, vec![0, 0, 1, 1]);
    let mut cams = split.cams();
    cams.sort();
    assert_eq!(cams, vec![0, 0, 1, 1]);
}

#[test]
fn missing_thermal_file_is_named_in_the_error() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(&small(Scenario::Normal)).unwrap();
    write_dataset(dir.path(), &ds).unwrap();
    let victim = dir.path().join("train/tir").join(format!("{}.png", ds.train.samples[0].file_stem()));
    fs::remove_file(&victim).unwrap();
    let err = load_dataset(dir.path(), 16, 32).unwrap_err();
    assert!(matches!(err, coen::Error::Data(_)));
    assert!(err.to_string().contains(&victim.display().to_string()), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn empty_or_malformed_directories_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_dataset(&dir.path().join("absent"), 16, 32).is_err());
    for sp in ["rgb", "nir", "tir"] {
        fs::create_dir_all(dir.path().join("train").join(sp)).unwrap();
    }
    assert!(load_dataset(dir.path(), 16, 32).is_err());
    fs::write(dir.path().join("train/rgb/not-a-name.png"), b"").unwrap();
    let err = load_split(&dir.path().join("train"), 16, 32).unwrap_err();
    assert!(err.to_string().contains("not-a-name"), "{err}");
}

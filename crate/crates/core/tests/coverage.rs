use std::collections::HashSet;

use smart::cli::coverage_report;
use smart::data::{generate_synthetic, DatasetConfig};
use smart::metrics::{coverage, ObjectAnnotation};

const THRESHOLDS: [f64; 4] = [0.01, 0.03, 0.05, 0.10];

#[test]
fn self_captions_have_full_coverage_at_every_threshold() {
    let d = generate_synthetic(&DatasetConfig {
        num_scenes: 500,
        ..DatasetConfig::default()
    })
    .unwrap();
    let lexicon: HashSet<String> = d.lexicon.iter().cloned().collect();
    let scenes: Vec<_> = d.scenes.iter().collect();
    for c in 0..d.config.captions_per_scene {
        let captions: Vec<&str> = d.scenes.iter().map(|s| s.captions[c].as_str()).collect();
        let report =
            coverage_report(&captions, &scenes, &d.word_vectors, &lexicon, &THRESHOLDS).unwrap();
        assert_eq!(report.thresholds, THRESHOLDS);
        assert_eq!(report.n_images, 500);
        assert!(
            report.coverage.iter().all(|&x| x == 1.0),
            "{:?}",
            report.coverage
        );
        assert!(report.coverage.windows(2).all(|w| w[1] <= w[0]));
        assert!(report.vacuous.windows(2).all(|w| w[1] >= w[0]));
    }
}

#[test]
fn raising_the_threshold_can_raise_coverage() {
    // A caption that names only the large object: the small one counts
    // against it until the threshold removes it.
    let d = generate_synthetic(&DatasetConfig {
        num_scenes: 1,
        ..DatasetConfig::default()
    })
    .unwrap();
    let lexicon: HashSet<String> = d.lexicon.iter().cloned().collect();
    let objects = vec![
        ObjectAnnotation {
            class: "cup".into(),
            area_frac: 0.3,
        },
        ObjectAnnotation {
            class: "dog".into(),
            area_frac: 0.02,
        },
    ];
    let low = coverage("a red cup", &objects, &d.word_vectors, &lexicon, 0.01);
    let high = coverage("a red cup", &objects, &d.word_vectors, &lexicon, 0.05);
    assert_eq!(low.score, 0.5);
    assert_eq!(high.score, 1.0);
}

#[test]
fn synonyms_earn_partial_credit() {
    let d = generate_synthetic(&DatasetConfig {
        num_scenes: 1,
        ..DatasetConfig::default()
    })
    .unwrap();
    let lexicon: HashSet<String> = d.lexicon.iter().cloned().collect();
    let objects = vec![ObjectAnnotation {
        class: "cup".into(),
        area_frac: 0.3,
    }];
    let r = coverage("a blue mug", &objects, &d.word_vectors, &lexicon, 0.01);
    let cos = d.word_vectors.profit("mug", "cup");
    assert!(cos > 0.0 && cos < 1.0);
    assert!((r.score - cos).abs() < 1e-12);
}

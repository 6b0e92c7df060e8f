use proptest::prelude::*;
use stanncr::featurestore::{
    load_dataset, save_dataset, synth_generate, Dataset, DatasetMeta, LocalFeature, SynthSpec, VideoSample,
};
use stanncr::Error;

fn small_dataset() -> Dataset {
    Dataset {
        meta: DatasetMeta {
            name: "tiny".into(),
            seed: None,
            provenance: "hand written".into(),
            locations_normalized: false,
        },
        descriptor_dim: 2,
        classes: vec!["walk".into(), "run".into()],
        samples: vec![
            VideoSample {
                id: "a".into(),
                label: "walk".into(),
                group: 0,
                extent: [320.0, 240.0, 100.0],
                features: vec![LocalFeature {
                    location: [160.0, 120.0, 50.0],
                    descriptor: vec![0.1, -2.5],
                }],
            },
            VideoSample {
                id: "b".into(),
                label: "run".into(),
                group: 1,
                extent: [320.0, 240.0, 100.0],
                features: vec![],
            },
        ],
    }
}

#[test]
fn json_and_binary_roundtrips_are_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = synth_generate(&SynthSpec::location_discriminative(3, 4, 7, 5, 1), 9).unwrap();
    for name in ["d.json", "d.bin"] {
        let path = tmp.path().join(name);
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds, "{name}");
    }
}

#[test]
fn empty_sample_survives_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = small_dataset();
    let path = tmp.path().join("d.json");
    save_dataset(&ds, &path).unwrap();
    let back = load_dataset(&path).unwrap();
    assert!(back.samples[1].features.is_empty());
}

#[test]
fn malformed_json_reports_position() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    std::fs::write(&path, "{\n  \"meta\": 3,\n}").unwrap();
    match load_dataset(&path) {
        Err(Error::Parse(msg)) => assert!(msg.contains("line"), "{msg}"),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn unknown_label_is_a_schema_error() {
    let mut ds = small_dataset();
    ds.samples[0].label = "jump".into();
    assert!(matches!(ds.validate(), Err(Error::Schema(_))));
}

#[test]
fn normalization_maps_into_unit_cube() {
    let ds = small_dataset().normalize_locations().unwrap();
    assert!(ds.meta.locations_normalized);
    assert_eq!(ds.samples[0].features[0].location, [0.5, 0.5, 0.5]);
    // already normalized: a second pass changes nothing
    assert_eq!(ds.normalize_locations().unwrap(), ds);
}

#[test]
fn synth_is_deterministic_per_seed() {
    let spec = SynthSpec::location_discriminative(3, 5, 10, 4, 2);
    let a = synth_generate(&spec, 5).unwrap();
    assert_eq!(a, synth_generate(&spec, 5).unwrap());
    assert_ne!(a, synth_generate(&spec, 6).unwrap());
}

#[test]
fn synth_round_robin_labels_and_unit_locations() {
    let spec = SynthSpec::location_discriminative(3, 4, 6, 4, 2);
    let ds = synth_generate(&spec, 0).unwrap();
    assert_eq!(ds.samples.len(), 12);
    let labels = ds.label_indices();
    assert_eq!(labels, (0..12).map(|i| i % 3).collect::<Vec<_>>());
    assert!(ds
        .samples
        .iter()
        .flat_map(|s| &s.features)
        .all(|f| f.location.iter().all(|v| (0.0..=1.0).contains(v))));
    let groups = ds.groups();
    assert_eq!(groups.iter().copied().max(), Some(3));
    assert!(groups.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn location_discriminative_classes_share_descriptors_but_not_layouts() {
    let spec = SynthSpec::location_discriminative(3, 2, 2, 6, 4);
    let means = |c: usize| -> Vec<Vec<f64>> {
        spec.classes[c]
            .descriptor_clusters
            .iter()
            .map(|d| d.mean.clone())
            .collect()
    };
    assert_eq!(means(0), means(1));
    assert_eq!(means(1), means(2));
    let loc = |c: usize| spec.classes[c].location_clusters[0].mean;
    assert_ne!(loc(0), loc(1));
    assert_ne!(loc(1), loc(2));
}

proptest! {
    #[test]
    fn normalize_then_denormalize_is_identity(
        x in 0.0f64..=1.0, y in 0.0f64..=1.0, t in 0.0f64..=1.0,
        ex in 1.0f64..2000.0, ey in 1.0f64..2000.0, et in 1.0f64..2000.0,
    ) {
        let s = VideoSample {
            id: "p".into(),
            label: "l".into(),
            group: 0,
            extent: [ex, ey, et],
            features: vec![LocalFeature { location: [x * ex, y * ey, t * et], descriptor: vec![0.0] }],
        };
        let n = s.normalize_locations().unwrap();
        for v in n.features[0].location {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let back = n.denormalize_locations();
        for a in 0..3 {
            let scale = s.extent[a];
            prop_assert!((back.features[0].location[a] - s.features[0].location[a]).abs() <= 1e-12 * scale);
        }
    }
}

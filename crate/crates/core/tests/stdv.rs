use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use stanncr::bovw::{WeightedLocation, WordLocationSet};
use stanncr::stdv::{
    fisher_vector_weighted, fit_location_gmms, fit_weighted_gmm, FvNormalization, GmmBank, GmmConfig, LocationGmm,
};

fn random_gmm(rng: &mut ChaCha8Rng, g: usize) -> LocationGmm {
    let raw: Vec<f64> = (0..g).map(|_| 0.2 + rng.random::<f64>()).collect();
    let s: f64 = raw.iter().sum();
    LocationGmm::new(
        raw.iter().map(|r| r / s).collect(),
        (0..g).map(|_| [rng.random(), rng.random(), rng.random()]).collect(),
        (0..g)
            .map(|_| {
                [
                    0.05 + 0.3 * rng.random::<f64>(),
                    0.05 + 0.3 * rng.random::<f64>(),
                    0.05 + 0.3 * rng.random::<f64>(),
                ]
            })
            .collect(),
    )
    .unwrap()
}

fn random_set(rng: &mut ChaCha8Rng, n: usize, unit_weights: bool) -> WordLocationSet {
    WordLocationSet {
        entries: (0..n)
            .map(|_| WeightedLocation {
                location: [rng.random(), rng.random(), rng.random()],
                weight: if unit_weights { 1.0 } else { 0.05 + rng.random::<f64>() },
            })
            .collect(),
    }
}

/// Unweighted Fisher vector written directly from the per-component
/// definitions, with explicit Gaussian densities.
fn unweighted_fv(gmm: &LocationGmm, locs: &[[f64; 3]]) -> Vec<f64> {
    let g = gmm.priors.len();
    let t = locs.len() as f64;
    let mut out = vec![0.0; g * 6];
    for l in locs {
        let dens: Vec<f64> = (0..g)
            .map(|c| {
                (0..3).fold(gmm.priors[c], |p, a| {
                    let s = gmm.sigmas[c][a];
                    let z = (l[a] - gmm.means[c][a]) / s;
                    p * (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
                })
            })
            .collect();
        let total: f64 = dens.iter().sum();
        for c in 0..g {
            let gamma = dens[c] / total;
            for a in 0..3 {
                let z = (l[a] - gmm.means[c][a]) / gmm.sigmas[c][a];
                out[c * 6 + a] += gamma * z / (t * gmm.priors[c].sqrt());
                out[c * 6 + 3 + a] += gamma * (z * z - 1.0) / (t * (2.0 * gmm.priors[c]).sqrt());
            }
        }
    }
    out
}

#[test]
fn unit_weights_reduce_to_the_unweighted_fisher_vector() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let gmm = random_gmm(&mut rng, 3);
        let set = random_set(&mut rng, 40, true);
        let locs: Vec<[f64; 3]> = set.entries.iter().map(|e| e.location).collect();
        let got = fisher_vector_weighted(&gmm, &set).unwrap();
        let want = unweighted_fv(&gmm, &locs);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn scaling_all_weights_leaves_the_fisher_vector_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let gmm = random_gmm(&mut rng, 4);
        let set = random_set(&mut rng, 30, false);
        let base = fisher_vector_weighted(&gmm, &set).unwrap();
        for c in [0.1, 7.0] {
            let scaled = WordLocationSet {
                entries: set
                    .entries
                    .iter()
                    .map(|e| WeightedLocation {
                        location: e.location,
                        weight: e.weight * c,
                    })
                    .collect(),
            };
            let x = fisher_vector_weighted(&gmm, &scaled).unwrap();
            for (a, b) in x.iter().zip(&base) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn fisher_vector_vanishes_at_the_fitted_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let centers = [[0.2, 0.3, 0.4], [0.7, 0.6, 0.3], [0.4, 0.8, 0.8]];
    let noise = Normal::new(0.0, 0.06).unwrap();
    let set = WordLocationSet {
        entries: (0..3000)
            .map(|i| {
                let c = centers[i % 3];
                WeightedLocation {
                    location: [
                        c[0] + noise.sample(&mut rng),
                        c[1] + noise.sample(&mut rng),
                        c[2] + noise.sample(&mut rng),
                    ],
                    weight: 0.5 + rng.random::<f64>(),
                }
            })
            .collect(),
    };
    let (gmm, report) = fit_weighted_gmm(&set.entries, 3, 9, 0.01, 1e-12, 1000).unwrap();
    assert!(report.converged);
    let fv = fisher_vector_weighted(&gmm, &set).unwrap();
    let norm = fv.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm < 1e-4, "gradient norm {norm}");
}

#[test]
fn bank_roundtrip_and_encoding_length() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pooled: Vec<WordLocationSet> = (0..4)
        .map(|k| random_set(&mut rng, if k == 3 { 2 } else { 50 }, false))
        .collect();
    let cfg = GmmConfig {
        n_components: 2,
        ..GmmConfig::default()
    };
    let bank = fit_location_gmms(&pooled, &cfg, 3).unwrap();
    assert_eq!(bank.uses_fallback, vec![false, false, false, true]);
    assert_eq!(bank.stdv_len(), 4 * 2 * 6);
    let path = tmp.path().join("gmm.mat");
    bank.save(&path, Some(FvNormalization::default())).unwrap();
    let back = GmmBank::load(&path).unwrap();
    assert_eq!(back, bank);
    let z = bank.encode(&pooled, FvNormalization::default()).unwrap();
    assert_eq!(z.z.len(), 48);
    assert!((z.z.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn fitting_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pooled: Vec<WordLocationSet> = (0..3).map(|_| random_set(&mut rng, 40, false)).collect();
    let cfg = GmmConfig {
        n_components: 3,
        ..GmmConfig::default()
    };
    assert_eq!(
        fit_location_gmms(&pooled, &cfg, 1).unwrap(),
        fit_location_gmms(&pooled, &cfg, 1).unwrap()
    );
}

proptest! {
    #[test]
    fn responsibilities_form_a_distribution(seed in 0u64..2000, g in 1usize..6,
                                            x in -0.5f64..1.5, y in -0.5f64..1.5, t in -0.5f64..1.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gmm = random_gmm(&mut rng, g);
        let r = gmm.responsibilities(&[x, y, t]);
        prop_assert_eq!(r.len(), g);
        prop_assert!(r.iter().all(|v| *v >= 0.0 && *v <= 1.0));
        prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn duplicating_a_set_changes_nothing(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gmm = random_gmm(&mut rng, 2);
        let set = random_set(&mut rng, 12, false);
        let mut twice = set.clone();
        twice.entries.extend_from_slice(&set.entries);
        let a = fisher_vector_weighted(&gmm, &set).unwrap();
        let b = fisher_vector_weighted(&gmm, &twice).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

use probeforge_core::aggregators::{Mechanism, ProbeConfig};
use probeforge_core::analysis::attention_report;
use probeforge_core::hstore::{DType, Split, Store, DATA_FILE, MANIFEST_FILE};
use probeforge_core::synth::{
    class_directions, closed_form_oracle_accuracy, dilution_instance, example, generate, mean_pool_oracle_accuracy,
    oracle_accuracy, SignalSite, SplitFractions, SynthMode, SynthSpec, TokenPolicy,
};
use probeforge_core::trainer::{train_store, Data, EarlyStopMetric, TrainPlan};
use probeforge_core::ProbeError;

fn planted(n_classes: usize, mu: f64, sites: Vec<SignalSite>, n: usize, seed: u64) -> SynthSpec {
    SynthSpec {
        n_layers: 4,
        t_range: (2, 8),
        d: 16,
        n_classes,
        n_examples: n,
        signal_sites: sites,
        signal_strength: mu,
        noise_sigma: 1.0,
        seed,
        mode: SynthMode::Planted,
        splits: SplitFractions::default(),
        dtype: DType::F32,
    }
}

fn site(layer: usize, tokens: TokenPolicy) -> SignalSite {
    SignalSite { layer, tokens }
}

/// Three-sigma binomial half-width around `p` for `n` trials.
fn ci(p: f64, n: usize) -> f64 {
    3.0 * (p * (1.0 - p) / n as f64).sqrt()
}

#[test]
fn zero_signal_oracle_is_chance() {
    for c in [2, 3, 5] {
        let spec = planted(c, 0.0, vec![site(1, TokenPolicy::All)], 3000, 40 + c as u64);
        let dir = tempfile::tempdir().unwrap();
        generate(&spec, dir.path()).unwrap();
        let acc = oracle_accuracy(&spec, &Store::open(dir.path()).unwrap()).unwrap();
        let chance = 1.0 / c as f64;
        assert!((acc - chance).abs() <= ci(chance, 3000), "C={c}: {acc}");
    }
}

#[test]
fn strong_single_site_oracle_is_near_perfect() {
    let spec = planted(2, 10.0, vec![site(2, TokenPolicy::Fixed(0))], 2000, 1);
    let dir = tempfile::tempdir().unwrap();
    let m = generate(&spec, dir.path()).unwrap();
    let acc = oracle_accuracy(&spec, &Store::open(dir.path()).unwrap()).unwrap();
    assert!(acc >= 0.999, "{acc}");
    assert_eq!(m.provenance["oracle_accuracy"].as_f64().unwrap(), acc);
    assert!(m.provenance["oracle_closed_form_accuracy"].as_f64().unwrap() >= 0.999);
}

#[test]
fn closed_form_matches_empirical_oracle() {
    let cases = [
        (0.7, vec![site(1, TokenPolicy::Fixed(1))]),
        (0.5, vec![site(0, TokenPolicy::RandomOne), site(3, TokenPolicy::RandomOne)]),
        (0.4, vec![site(2, TokenPolicy::All)]),
        (0.6, vec![site(2, TokenPolicy::RandomOne), site(2, TokenPolicy::RandomOne)]),
    ];
    for (k, (mu, sites)) in cases.into_iter().enumerate() {
        let spec = planted(2, mu, sites, 4000, 100 + k as u64);
        let dir = tempfile::tempdir().unwrap();
        generate(&spec, dir.path()).unwrap();
        let emp = oracle_accuracy(&spec, &Store::open(dir.path()).unwrap()).unwrap();
        let cf = closed_form_oracle_accuracy(&spec).unwrap().unwrap();
        assert!((emp - cf).abs() <= ci(cf, 4000), "case {k}: empirical {emp}, closed form {cf}");
    }
    assert_eq!(closed_form_oracle_accuracy(&planted(3, 1.0, vec![], 10, 0)).unwrap(), None);
}

#[test]
fn same_seed_gives_identical_bytes() {
    let spec = planted(3, 1.5, vec![site(1, TokenPolicy::RandomOne)], 700, 5);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate(&spec, a.path()).unwrap();
    generate(&spec, b.path()).unwrap();
    for f in [DATA_FILE, MANIFEST_FILE] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
    let other = SynthSpec { seed: 6, ..spec.clone() };
    let c = tempfile::tempdir().unwrap();
    generate(&other, c.path()).unwrap();
    assert_ne!(std::fs::read(a.path().join(DATA_FILE)).unwrap(), std::fs::read(c.path().join(DATA_FILE)).unwrap());
}

#[test]
fn generated_store_invariants() {
    let spec = planted(3, 2.0, vec![site(3, TokenPolicy::Fixed(1))], 500, 8);
    let dir = tempfile::tempdir().unwrap();
    generate(&spec, dir.path()).unwrap();
    let store = Store::open(dir.path()).unwrap();
    assert_eq!(store.len(), 500);
    let mut counts = [0usize; 3];
    for i in 0..store.len() {
        let rec = store.record(i).unwrap();
        assert!((2..=8).contains(&rec.t));
        assert!(rec.tensor.iter().all(|v| v.is_finite()));
        assert_eq!(rec.tensor, example(&spec, i).unwrap().tensor);
        counts[rec.label] += 1;
    }
    // balanced up to one example
    assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    assert_eq!(store.split_indices(Split::Train).len(), 400);
    assert_eq!(store.split_indices(Split::Val).len(), 50);
    assert_eq!(store.split_indices(Split::Test).len(), 50);
    let prov = &store.manifest().provenance;
    assert_eq!(prov["positive_class"], 1);
    let echoed: SynthSpec = serde_json::from_value(prov["synth"].clone()).unwrap();
    assert_eq!(echoed, spec);
}

#[test]
fn noise_has_the_requested_scale() {
    let mut spec = planted(2, 0.0, vec![], 400, 3);
    spec.noise_sigma = 2.5;
    let (mut s, mut ss, mut n) = (0.0f64, 0.0f64, 0usize);
    for i in 0..spec.n_examples {
        for &v in &example(&spec, i).unwrap().tensor {
            s += f64::from(v);
            ss += f64::from(v) * f64::from(v);
            n += 1;
        }
    }
    let mean = s / n as f64;
    let sd = (ss / n as f64 - mean * mean).sqrt();
    assert!(mean.abs() < 0.05, "{mean}");
    assert!((sd - 2.5).abs() < 0.05, "{sd}");
}

#[test]
fn class_directions_are_orthonormal() {
    let spec = planted(5, 1.0, vec![], 1, 77);
    let u = class_directions(&spec);
    for a in 0..5 {
        for b in 0..5 {
            let dot: f64 = (0..16).map(|j| u[a * 16 + j] * u[b * 16 + j]).sum();
            assert!((dot - f64::from(u8::from(a == b))).abs() < 1e-12);
        }
    }
}

fn dilution_spec(n: usize, seed: u64) -> SynthSpec {
    SynthSpec {
        n_layers: 8,
        t_range: (4, 16),
        d: 32,
        n_classes: 2,
        n_examples: n,
        signal_sites: (0..8).map(|l| site(l, TokenPolicy::All)).collect(),
        signal_strength: 6.0,
        noise_sigma: 1.0,
        seed,
        mode: SynthMode::Dilution,
        splits: SplitFractions::default(),
        dtype: DType::F32,
    }
}

#[test]
fn dilution_defeats_mean_pooling_only() {
    let spec = dilution_spec(1500, 5);
    let dir = tempfile::tempdir().unwrap();
    let m = dilution_instance(&spec, dir.path()).unwrap();
    let mean = m.provenance["mean_pool_oracle_accuracy"].as_f64().unwrap();
    let single = m.provenance["single_site_oracle_accuracy"].as_f64().unwrap();
    assert!(mean <= 0.6, "mean-pool oracle {mean}");
    assert!(single >= 0.99, "single-site oracle {single}");
    let store = Store::open(dir.path()).unwrap();
    assert_eq!(mean_pool_oracle_accuracy(&spec, &store).unwrap(), mean);
}

#[test]
fn dilution_token_mean_is_class_free() {
    let spec = dilution_spec(4, 9);
    let noiseless = SynthSpec { noise_sigma: 1e-9, ..spec.clone() };
    for i in 0..4 {
        let rec = example(&noiseless, i).unwrap();
        for l in 0..8 {
            let layer = rec.layer(l);
            for j in 0..32 {
                let mean: f64 = (0..rec.t).map(|tok| f64::from(layer[tok * 32 + j])).sum::<f64>() / rec.t as f64;
                assert!(mean.abs() < 1e-5);
            }
        }
    }
}

#[test]
fn dilution_refuses_single_token_sequences() {
    let mut spec = dilution_spec(10, 1);
    spec.t_range = (1, 6);
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(dilution_instance(&spec, dir.path()), Err(ProbeError::Config(_))));
}

#[test]
fn dilution_is_seeded() {
    let spec = dilution_spec(200, 12);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    dilution_instance(&spec, a.path()).unwrap();
    dilution_instance(&spec, b.path()).unwrap();
    assert_eq!(std::fs::read(a.path().join(DATA_FILE)).unwrap(), std::fs::read(b.path().join(DATA_FILE)).unwrap());
}

#[test]
fn invalid_specs_are_rejected() {
    let base = planted(2, 1.0, vec![site(1, TokenPolicy::All)], 10, 0);
    let bad = [
        SynthSpec { signal_sites: vec![site(4, TokenPolicy::All)], ..base.clone() },
        SynthSpec { signal_sites: vec![site(0, TokenPolicy::Fixed(2))], ..base.clone() },
        SynthSpec { signal_strength: -1.0, ..base.clone() },
        SynthSpec { noise_sigma: 0.0, ..base.clone() },
        SynthSpec { n_classes: 17, ..base.clone() },
        SynthSpec { t_range: (3, 2), ..base.clone() },
    ];
    for (k, s) in bad.iter().enumerate() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate(s, dir.path()).is_err(), "case {k}");
    }
}

#[test]
fn probe_on_zero_signal_stays_at_chance() {
    let mut spec = planted(2, 0.0, vec![site(1, TokenPolicy::All)], 1000, 21);
    spec.splits = SplitFractions { train: 0.6, val: 0.2, test: 0.2 };
    let dir = tempfile::tempdir().unwrap();
    generate(&spec, dir.path()).unwrap();
    let store = Store::open(dir.path()).unwrap();
    let cfg = ProbeConfig::new(Mechanism::ScoringGate, 4, 16, 2);
    let plan = TrainPlan {
        max_epochs: 20,
        learning_rate: 1e-2,
        early_stop_metric: EarlyStopMetric::Accuracy,
        ..TrainPlan::default()
    };
    let out = train_store(&cfg, &plan, &store).unwrap();
    let test = out.report.test.unwrap();
    assert_eq!(test.n, 200);
    assert!((test.accuracy - 0.5).abs() <= ci(0.5, 200), "{}", test.accuracy);
}

#[test]
fn scoring_gate_localizes_the_signal_layer() {
    let spec = SynthSpec {
        n_layers: 8,
        t_range: (4, 16),
        d: 32,
        n_classes: 2,
        n_examples: 2500,
        signal_sites: vec![site(5, TokenPolicy::All)],
        signal_strength: 6.0,
        noise_sigma: 1.0,
        seed: 11,
        mode: SynthMode::Planted,
        splits: SplitFractions { train: 0.8, val: 0.2, test: 0.0 },
        dtype: DType::F32,
    };
    let dir = tempfile::tempdir().unwrap();
    generate(&spec, dir.path()).unwrap();
    let store = Store::open(dir.path()).unwrap();
    let cfg = ProbeConfig::new(Mechanism::ScoringGate, 8, 32, 2);
    let plan = TrainPlan {
        early_stop_metric: EarlyStopMetric::Accuracy,
        ..TrainPlan::default()
    };
    let out = train_store(&cfg, &plan, &store).unwrap();
    let rep = attention_report(&out.params, &Data::new(&store).unwrap(), Split::Val).unwrap();
    for g in rep.groups.iter().filter(|g| g.correct && g.n > 0) {
        assert!(g.mean_weight[5] >= 2.0 / 8.0, "label {}: {:?}", g.label, g.mean_weight);
    }
}

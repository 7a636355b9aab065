use probeforge_core::aggregators::{forward, Mechanism, ProbeConfig, ProbeParams};
use probeforge_core::analysis::{attention_report, position_bucket, token_report, token_report_csv, N_BUCKETS};
use probeforge_core::hstore::{batch_tight, DType, Split, Store};
use probeforge_core::synth::{example, generate, SignalSite, SplitFractions, SynthMode, SynthSpec, TokenPolicy};
use probeforge_core::trainer::{train_store, Data, EarlyStopMetric, TrainPlan};
use probeforge_core::ProbeError;
use tempfile::TempDir;

fn spec(n_layers: usize, t_range: (usize, usize), d: usize, n: usize, sites: Vec<SignalSite>, mu: f64) -> SynthSpec {
    SynthSpec {
        n_layers,
        t_range,
        d,
        n_classes: 2,
        n_examples: n,
        signal_sites: sites,
        signal_strength: mu,
        noise_sigma: 1.0,
        seed: 3,
        mode: SynthMode::Planted,
        splits: SplitFractions { train: 0.6, val: 0.2, test: 0.2 },
        dtype: DType::F32,
    }
}

fn build(s: &SynthSpec) -> (TempDir, Store) {
    let dir = tempfile::tempdir().unwrap();
    generate(s, dir.path()).unwrap();
    let store = Store::open(dir.path()).unwrap();
    (dir, store)
}

fn zero_gate(n_layers: usize, d: usize) -> ProbeParams<f32> {
    let mut p = ProbeParams::<f32>::init(&ProbeConfig::new(Mechanism::ScoringGate, n_layers, d, 2)).unwrap();
    p.fill_prefix("gate.", 0.0);
    p
}

#[test]
fn zero_gate_profile_is_uniform() {
    let (_d, store) = build(&spec(29, (1, 6), 4, 60, vec![], 0.0));
    let data = Data::new(&store).unwrap();
    let rep = attention_report(&zero_gate(29, 4), &data, Split::Test).unwrap();
    assert!((rep.uniform_baseline - 0.0345).abs() < 5e-4);
    assert_eq!(rep.groups.len(), 4);
    for g in rep.groups.iter().filter(|g| g.n > 0) {
        let sum: f64 = g.mean_weight.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-4);
        for (&m, &s) in g.mean_weight.iter().zip(&g.std_weight) {
            assert!((m - 1.0 / 29.0).abs() < 1e-6);
            assert!(s < 1e-6);
        }
    }
    assert_eq!(rep.groups.iter().map(|g| g.n).sum::<usize>(), 12);
}

#[test]
fn single_example_group_is_its_trace() {
    let mut s = spec(3, (2, 6), 4, 10, vec![], 0.0);
    s.splits = SplitFractions { train: 0.9, val: 0.0, test: 0.1 };
    let (_d, store) = build(&s);
    let cfg = ProbeConfig::new(Mechanism::ScoringGate, 3, 4, 2).with_seed(8);
    let p = ProbeParams::<f32>::init(&cfg).unwrap();
    let data = Data::new(&store).unwrap();
    let rep = attention_report(&p, &data, Split::Test).unwrap();
    let group = rep.groups.iter().find(|g| g.n == 1).unwrap();
    assert_eq!(rep.groups.iter().filter(|g| g.n > 0).count(), 1);
    let rec = store.record(9).unwrap();
    let out = forward(&p, &batch_tight(&[rec]).unwrap(), true).unwrap();
    let trace = out.traces.unwrap()[0].clone().unwrap();
    assert_eq!(group.mean_weight, trace.layer_weights);
    assert!(group.std_weight.iter().all(|&s| s == 0.0));
}

#[test]
fn pooling_and_empty_split_are_rejected() {
    let mut s = spec(2, (2, 4), 4, 20, vec![], 0.0);
    s.splits = SplitFractions { train: 0.5, val: 0.5, test: 0.0 };
    let (_d, store) = build(&s);
    let data = Data::new(&store).unwrap();
    let pool = ProbeParams::<f32>::init(&ProbeConfig::new(Mechanism::Pooling, 2, 4, 2)).unwrap();
    assert!(matches!(attention_report(&pool, &data, Split::Val), Err(ProbeError::Unsupported(_))));
    assert!(matches!(token_report(&pool, &data, Split::Val, 3), Err(ProbeError::Unsupported(_))));
    assert!(matches!(
        attention_report(&zero_gate(2, 4), &data, Split::Test),
        Err(ProbeError::EmptySplit(_))
    ));
}

#[test]
fn mha_probes_report_diagnostic_traces() {
    let (_d, store) = build(&spec(3, (2, 6), 8, 40, vec![], 0.0));
    let data = Data::new(&store).unwrap();
    let p = ProbeParams::<f32>::init(&ProbeConfig::new(Mechanism::Mha, 3, 8, 2).with_mha(2, 2)).unwrap();
    let rep = attention_report(&p, &data, Split::Test).unwrap();
    for g in rep.groups.iter().filter(|g| g.n > 0) {
        assert!((g.mean_weight.iter().sum::<f64>() - 1.0).abs() <= 1e-4);
    }
    let rows = token_report(&p, &data, Split::Test, 2).unwrap();
    assert_eq!(rows.len(), 3 * 2);
}

#[test]
fn signal_layer_is_the_peak() {
    let s = SynthSpec {
        n_examples: 1500,
        ..spec(6, (4, 12), 16, 0, vec![SignalSite { layer: 4, tokens: TokenPolicy::All }], 3.0)
    };
    let (_d, store) = build(&s);
    let plan = TrainPlan {
        early_stop_metric: EarlyStopMetric::Accuracy,
        ..TrainPlan::default()
    };
    let out = train_store(&ProbeConfig::new(Mechanism::ScoringGate, 6, 16, 2), &plan, &store).unwrap();
    let rep = attention_report(&out.params, &Data::new(&store).unwrap(), Split::Test).unwrap();
    let positive = rep.groups.iter().find(|g| g.label == 1 && g.correct).unwrap();
    let peak = (0..6).max_by(|&a, &b| positive.mean_weight[a].total_cmp(&positive.mean_weight[b])).unwrap();
    assert_eq!(peak, 4, "{:?}", positive.mean_weight);
    // mirror check numbers are emitted for every non-empty error group
    let errors = rep.groups.iter().filter(|g| !g.correct && g.n > 0).count();
    assert_eq!(rep.mirror.len(), errors);
}

#[test]
fn attention_csv_layout() {
    let (_d, store) = build(&spec(3, (2, 5), 4, 50, vec![], 0.0));
    let data = Data::new(&store).unwrap();
    let p = ProbeParams::<f32>::init(&ProbeConfig::new(Mechanism::ScoringGate, 3, 4, 2).with_seed(2)).unwrap();
    let rep = attention_report(&p, &data, Split::Test).unwrap();
    let csv = rep.to_csv();
    let comments: Vec<&str> = csv.lines().take_while(|l| l.starts_with('#')).collect();
    assert!(comments.iter().any(|l| l.contains(&rep.checkpoint_sha256)));
    assert!(comments.iter().any(|l| l.contains("uniform_baseline")));
    assert_eq!(comments.len(), 4 + rep.mirror.len());
    let body: Vec<&str> = csv.lines().skip(comments.len()).collect();
    assert_eq!(body[0], "group_label,group_correct,layer,mean_weight,std_weight,n");
    let nonempty = rep.groups.iter().filter(|g| g.n > 0).count();
    assert_eq!(body.len() - 1, nonempty * 3);
}

#[test]
fn single_token_sequences_fill_one_bucket() {
    let (_d, store) = build(&spec(2, (1, 1), 4, 30, vec![], 0.0));
    let data = Data::new(&store).unwrap();
    let p = ProbeParams::<f32>::init(&ProbeConfig::new(Mechanism::ScoringGate, 2, 4, 2).with_seed(5)).unwrap();
    let rows = token_report(&p, &data, Split::Train, 10).unwrap();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert_eq!(r.bucket, 0);
        assert!((r.mean_weight - 1.0).abs() < 1e-6);
    }
}

#[test]
fn uniform_gate_spreads_evenly() {
    let (_d, store) = build(&spec(2, (20, 60), 4, 200, vec![], 0.0));
    let data = Data::new(&store).unwrap();
    let rows = token_report(&zero_gate(2, 4), &data, Split::Train, N_BUCKETS).unwrap();
    assert_eq!(rows.len(), 2 * N_BUCKETS);
    for l in 0..2 {
        let layer: Vec<_> = rows.iter().filter(|r| r.layer == l).collect();
        let total: f64 = layer.iter().map(|r| r.mean_weight).sum();
        assert!(total <= 1.0 + 1e-6);
        for r in layer {
            assert!((r.mean_weight - 0.1).abs() <= 0.02, "{r:?}");
        }
    }
    let csv = token_report_csv(&rows);
    assert!(csv.starts_with("layer,rank,bucket,position_range,mean_weight\n"));
    assert!(csv.contains(",0.0-0.1,"));
}

#[test]
fn fixed_signal_token_bucket_dominates() {
    let s = SynthSpec {
        n_examples: 1500,
        ..spec(3, (10, 20), 16, 0, vec![SignalSite { layer: 1, tokens: TokenPolicy::Fixed(0) }], 4.0)
    };
    let (_d, store) = build(&s);
    let plan = TrainPlan {
        early_stop_metric: EarlyStopMetric::Accuracy,
        learning_rate: 1e-2,
        ..TrainPlan::default()
    };
    let out = train_store(&ProbeConfig::new(Mechanism::ScoringGate, 3, 16, 2), &plan, &store).unwrap();
    let rows = token_report(&out.params, &Data::new(&store).unwrap(), Split::Test, 1).unwrap();
    let top = rows.iter().find(|r| r.layer == 1).unwrap();
    assert_eq!(top.bucket, 0);
    assert_eq!(position_bucket(0, 10), 0);
}

#[test]
fn dilution_signal_token_attracts_weight() {
    let s = SynthSpec {
        n_layers: 4,
        t_range: (8, 16),
        d: 16,
        n_classes: 2,
        n_examples: 1500,
        signal_sites: (0..4).map(|layer| SignalSite { layer, tokens: TokenPolicy::All }).collect(),
        signal_strength: 6.0,
        noise_sigma: 1.0,
        seed: 4,
        mode: SynthMode::Dilution,
        splits: SplitFractions::default(),
        dtype: DType::F32,
    };
    let (_d, store) = build(&s);
    let plan = TrainPlan {
        early_stop_metric: EarlyStopMetric::Accuracy,
        learning_rate: 1e-2,
        ..TrainPlan::default()
    };
    let out = train_store(&ProbeConfig::new(Mechanism::ScoringGate, 4, 16, 2), &plan, &store).unwrap();
    assert!(out.report.test.as_ref().unwrap().accuracy >= 0.9);
    // replaying an example without noise reveals its signal token
    let quiet = SynthSpec { noise_sigma: 1e-6, ..s.clone() };
    let (mut signal_w, mut uniform_w) = (0.0, 0.0);
    let test = store.split_indices(Split::Test);
    for &i in &test {
        let rec = store.record(i).unwrap();
        let clean = example(&quiet, i).unwrap();
        let norm = |tok: usize| clean.layer(0)[tok * 16..(tok + 1) * 16].iter().map(|v| v * v).sum::<f32>();
        let sig = (0..clean.t).max_by(|&a, &b| norm(a).total_cmp(&norm(b))).unwrap();
        let tr = forward(&out.params, &batch_tight(&[rec]).unwrap(), true).unwrap().traces.unwrap()[0].clone().unwrap();
        for l in 0..4 {
            signal_w += tr.token_row(l)[sig];
            uniform_w += 1.0 / clean.t as f64;
        }
    }
    assert!(signal_w > 2.0 * uniform_w, "signal {signal_w} vs uniform {uniform_w}");
}

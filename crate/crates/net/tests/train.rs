use docalign_core::synth::{make_procedural_triplet, SynthParams};
use docalign_net::train::{
    load_samples, mean_alignment_loss, selfsup_finetune, train_supervised, write_loss_log, Pair, Sample, SelfSupConfig,
    TrainConfig,
};
use docalign_net::{Model, ModelConfig, NetError};

fn small() -> ModelConfig {
    ModelConfig {
        pyramid_channels: [8, 8, 8, 8],
        decoder_widths: [12, 12, 8, 8, 4],
        global_grid: 2,
        local_radius: 2,
        refine_radius: 2,
        hidden: 12,
        motion: 8,
        context: 8,
        iterations: 2,
        seed: 1,
    }
}

fn samples(n: u64) -> Vec<Sample> {
    let p = SynthParams::scaled(64);
    (0..n)
        .map(|s| {
            let t = make_procedural_triplet(&p, s).unwrap();
            Sample::new(&format!("s{s}"), &t.photo, &t.clean, &t.flow).unwrap()
        })
        .collect()
}

#[test]
fn single_sample_overfits() {
    let data = samples(1);
    let mut m = Model::<f32>::new(ModelConfig::tiny()).unwrap();
    let cfg = TrainConfig { lr: 1e-3, epochs: 200, batch_size: 1, ..TrainConfig::default() };
    let log = train_supervised(&mut m, &data, &cfg, |_, _| {}).unwrap();
    assert_eq!(log.len(), 200);
    assert!(log.iter().all(|e| e.loss.is_finite()));
    let (first, last) = (log[0].loss, log[199].loss);
    assert!(last < 0.25 * first, "loss {first} -> {last}");
}

#[test]
fn training_is_reproducible_and_thread_independent() {
    let data = samples(4);
    let cfg = TrainConfig { lr: 1e-3, epochs: 2, batch_size: 2, seed: 3, ..TrainConfig::default() };
    let run = |threads| {
        let mut m = Model::<f32>::new(small()).unwrap();
        let log = train_supervised(&mut m, &data, &TrainConfig { threads, ..cfg.clone() }, |_, _| {}).unwrap();
        (log, m)
    };
    let (a, ma) = run(0);
    let (b, mb) = run(0);
    let (c, mc) = run(2);
    assert_eq!(a.len(), 4);
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert_eq!(ma, mb);
    assert_eq!(ma, mc);

    let mut m = Model::<f32>::new(small()).unwrap();
    let short = train_supervised(&mut m, &data, &TrainConfig { max_steps: Some(3), ..cfg.clone() }, |_, _| {}).unwrap();
    assert_eq!(short, a[..3]);
}

#[test]
fn learning_rate_schedule() {
    let cfg = TrainConfig { lr: 1.0, decay: 0.3, decay_every: 30, ..TrainConfig::default() };
    assert_eq!(cfg.lr_at(29), 1.0);
    assert!((cfg.lr_at(30) - 0.3).abs() < 1e-15);
    assert!((cfg.lr_at(65) - 0.09).abs() < 1e-15);
}

#[test]
fn bad_inputs_are_rejected() {
    let mut m = Model::<f32>::new(small()).unwrap();
    let err = train_supervised(&mut m, &[], &TrainConfig::default(), |_, _| {}).unwrap_err();
    assert!(matches!(err, NetError::InvalidArgument(_)));
    let bad = TrainConfig { lr: 0.0, ..TrainConfig::default() };
    assert!(train_supervised(&mut m, &samples(1), &bad, |_, _| {}).is_err());
    let t = make_procedural_triplet(&SynthParams::scaled(48), 0).unwrap();
    assert!(Sample::new("x", &t.photo, &t.clean, &t.flow).is_err());
}

#[test]
fn loss_log_and_manifest_loading() {
    let dir = tempfile::tempdir().unwrap();
    let p = SynthParams { seed: 2, ..SynthParams::scaled(64) };
    let opts = docalign_core::synth::DatasetOptions { count: 2, split: "train".into(), sources: None };
    docalign_core::synth::generate_dataset(&opts, &p, dir.path()).unwrap();
    let data = load_samples(&dir.path().join(docalign_core::synth::MANIFEST_NAME)).unwrap();
    assert_eq!(data.len(), 2);
    assert_eq!(data[1].id, "train_00001");

    let mut m = Model::<f32>::new(small()).unwrap();
    let log = train_supervised(&mut m, &data, &TrainConfig { epochs: 1, batch_size: 1, ..TrainConfig::default() }, |_, _| {})
        .unwrap();
    let path = dir.path().join("loss.csv");
    write_loss_log(&path, &log).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,step,loss");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("0,1,"));
}

#[test]
fn selfsup_reduces_alignment_loss() {
    let p = SynthParams::scaled(64);
    let pairs: Vec<Pair> = (20..22)
        .map(|s| {
            let t = make_procedural_triplet(&p, s).unwrap();
            Pair { source: t.photo, target: t.clean }
        })
        .collect();
    let mut m = Model::<f32>::new(small()).unwrap();
    let before = mean_alignment_loss(&m, &pairs, 0).unwrap();
    let cfg = SelfSupConfig { lr: 1e-3, epochs: 3, seed: 5, ..SelfSupConfig::default() };
    let report = selfsup_finetune(&mut m, &pairs, &cfg).unwrap();
    assert_eq!(report.initial_loss, before);
    assert_eq!(report.epoch_losses.len(), 3);
    assert_eq!(report.steps.len(), 6);
    assert!(report.steps.iter().all(|s| s.loss >= 0.0));
    assert!(report.final_loss < before, "{before} -> {}", report.final_loss);
    assert_eq!(report.final_loss, mean_alignment_loss(&m, &pairs, 0).unwrap());
}

#[test]
fn dihedral_relabeling_preserves_consistency() {
    use docalign_net::{Graph, ParamStore};
    let s = &samples(1)[0];
    let store = ParamStore::new();
    let residual = |s: &Sample| {
        let mut g = Graph::inference(&store);
        let src = g.input(s.source.clone());
        let f = g.input(s.flow.clone());
        let w = g.warp(src, f, true).unwrap();
        let l = g.l1(w, &s.target).unwrap();
        g.value(l).item()
    };
    let base = residual(s);
    for k in 0..8 {
        let d = docalign_net::train::dihedral(s, k).unwrap();
        assert!((residual(&d) - base).abs() < 1e-5, "k = {k}");
        if k > 0 {
            assert_ne!(d.flow, s.flow);
        }
    }
    let twice = docalign_net::train::dihedral(&docalign_net::train::dihedral(s, 3).unwrap(), 3).unwrap();
    assert_eq!(twice.flow, s.flow);
    assert_eq!(twice.source, s.source);
}

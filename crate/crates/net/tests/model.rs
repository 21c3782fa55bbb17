use docalign_core::synth::{make_procedural_triplet, SynthParams};
use docalign_core::Image;
use docalign_net::model::{
    convex_upsample, convgru_cell, extract_pyramid, flow_decoder, forward, hierarchical_align, image_tensor,
    refine_recurrent, resize_flow_tensor, sidecar,
};
use docalign_net::train::{mean_alignment_loss, supervised_loss};
use docalign_net::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> ModelConfig {
    ModelConfig {
        pyramid_channels: [8, 6, 5, 4],
        decoder_widths: [8, 6, 6, 4, 4],
        global_grid: 2,
        local_radius: 2,
        refine_radius: 2,
        hidden: 8,
        motion: 6,
        context: 5,
        iterations: 3,
        seed: 4,
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn page(n: usize, seed: u64) -> Image {
    make_procedural_triplet(&SynthParams::scaled(n), seed).unwrap().clean
}

#[test]
fn pyramid_levels_follow_the_strides() {
    let m = Model::<f32>::new(small()).unwrap();
    let mut g = Graph::inference(&m.params);
    let a = g.input(image_tensor(&page(64, 1)));
    let b = g.input(image_tensor(&page(64, 1)));
    let pa = extract_pyramid(&mut g, a).unwrap();
    let pb = extract_pyramid(&mut g, b).unwrap();
    for (l, n) in [2, 4, 8, 16].into_iter().enumerate() {
        assert_eq!(g.value(pa[l]).shape(), [small().pyramid_channels[l], n, n]);
        assert_eq!(g.value(pa[l]), g.value(pb[l]));
    }
    let c = g.input(Tensor::zeros(&[3, 48, 64]));
    let err = extract_pyramid(&mut g, c).unwrap_err().to_string();
    assert!(err.contains("multiples of 32"), "{err}");
}

#[test]
fn decoder_shapes_and_zero_weights() {
    let cfg = small();
    let mut m = Model::<f32>::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, &[27, 5, 7], -1.0, 1.0);
    {
        let mut g = Graph::inference(&m.params);
        let v = g.input(x.clone());
        let out = flow_decoder(&mut g, 2, v).unwrap();
        assert_eq!(g.value(out).shape(), [2, 5, 7]);
        assert!(g.value(out).max_abs() > 0.0);
        let bad = g.input(Tensor::zeros(&[26, 5, 7]));
        assert!(flow_decoder(&mut g, 2, bad).is_err());
    }
    for i in 0..m.params.len() {
        if m.params.name(i).starts_with("dec2.") {
            m.params.tensor_mut(i).scale_assign(0.0);
        }
    }
    let mut g = Graph::inference(&m.params);
    let v = g.input(x);
    let out = flow_decoder(&mut g, 2, v).unwrap();
    assert!(g.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn hierarchical_flow_is_at_stride_eight() {
    let m = Model::<f32>::new(small()).unwrap();
    let mut g = Graph::inference(&m.params);
    let a = g.input(image_tensor(&page(96, 2)));
    let b = g.input(image_tensor(&page(96, 3)));
    let pa = extract_pyramid(&mut g, a).unwrap();
    let pb = extract_pyramid(&mut g, b).unwrap();
    let f = hierarchical_align(&mut g, &m.config, &pa, &pb).unwrap();
    assert_eq!(g.value(f[0]).shape(), [2, 3, 3]);
    assert_eq!(g.value(f[1]).shape(), [2, 6, 6]);
    assert_eq!(g.value(f[2]).shape(), [2, 12, 12]);
}

#[test]
fn refinement_without_iterations_keeps_the_flow() {
    let m = Model::<f32>::new(small()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::inference(&m.params);
    let f = g.input(random(&mut rng, &[2, 32, 32], -2.0, 2.0));
    let xs = g.input(random(&mut rng, &[4, 8, 8], 0.0, 1.0));
    let xt = g.input(random(&mut rng, &[4, 8, 8], 0.0, 1.0));
    assert!(refine_recurrent(&mut g, &m.config, f, xs, xt, 0).unwrap().is_empty());
    let steps = refine_recurrent(&mut g, &m.config, f, xs, xt, 3).unwrap();
    assert_eq!(steps.len(), 3);
    for s in &steps {
        assert_eq!(g.value(s.flow).shape(), [2, 32, 32]);
        assert!(g.value(s.hidden).data().iter().all(|v| v.abs() < 1.0));
    }
    let bad = g.input(Tensor::zeros(&[2, 30, 32]));
    assert!(refine_recurrent(&mut g, &m.config, bad, xs, xt, 1).is_err());
}

#[test]
fn gru_gates_select_state_or_candidate() {
    let cfg = small();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[cfg.context + cfg.motion, 4, 6], -2.0, 2.0);
    let h = random(&mut rng, &[cfg.hidden, 4, 6], -0.99, 0.99);
    let run = |bias: f32| {
        let mut m = Model::<f64>::new(cfg.clone()).unwrap();
        if bias != 0.0 {
            let b = m.params.get_mut("gru.z.b").unwrap();
            b.data_mut().iter_mut().for_each(|v| *v = bias as f64);
            m.params.get_mut("gru.z.w").unwrap().scale_assign(0.0);
        }
        let mut g = Graph::inference(&m.params);
        let xv = g.input(x.cast());
        let hv = g.input(h.cast());
        let out = convgru_cell(&mut g, xv, hv).unwrap();
        // candidate with the update gate ignored: tanh(W_q [r * h, x])
        let hx = g.concat(&[hv, xv]).unwrap();
        let (rw, rb) = (g.param("gru.r.w").unwrap(), g.param("gru.r.b").unwrap());
        let r = g.conv(hx, rw, Some(rb), 1, 1).unwrap();
        let r = g.sigmoid(r);
        let rh = g.mul(r, hv).unwrap();
        let rhx = g.concat(&[rh, xv]).unwrap();
        let (qw, qb) = (g.param("gru.q.w").unwrap(), g.param("gru.q.b").unwrap());
        let q = g.conv(rhx, qw, Some(qb), 1, 1).unwrap();
        let q = g.tanh(q);
        (g.value(out).clone(), g.value(q).clone())
    };
    let (keep, _) = run(-100.0);
    assert_eq!(keep, h.cast());
    let (take, cand) = run(100.0);
    assert_eq!(take, cand);
    let (mixed, _) = run(0.0);
    assert!(mixed.data().iter().all(|v| v.abs() < 1.0));
}

#[test]
fn convex_upsample_fixed_cases() {
    let (h, w) = (3, 4);
    let c = Tensor::new(vec![2, h, w], [vec![1.5; h * w], vec![-0.25; h * w]].concat()).unwrap();
    let uniform = Tensor::filled(&[144, h, w], 1.0f64 / 9.0);
    let out = convex_upsample(&c, &uniform).unwrap();
    assert_eq!(out.shape(), [2, 12, 16]);
    assert!(out.data()[..192].iter().all(|v| (v - 6.0).abs() < 1e-12));
    assert!(out.data()[192..].iter().all(|v| (v + 1.0).abs() < 1e-12));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let r = random(&mut rng, &[2, h, w], -3.0, 3.0);
    let center = Tensor::from_fn(&[144, h, w], |i| if (i / (h * w)) % 9 == 4 { 1.0f32 } else { 0.0 });
    let out = convex_upsample(&r, &center).unwrap();
    for c in 0..2 {
        for y in 0..4 * h {
            for x in 0..4 * w {
                assert_eq!(out.data()[(c * 4 * h + y) * 4 * w + x], 4.0 * r.data()[(c * h + y / 4) * w + x / 4]);
            }
        }
    }

    let mut bad = uniform.clone();
    bad.data_mut()[0] = 0.5;
    assert!(convex_upsample(&c, &bad).is_err());
    let mut neg = uniform.clone();
    neg.data_mut()[0] = -0.1;
    neg.data_mut()[h * w] += 0.1 + 1.0 / 9.0;
    assert!(convex_upsample(&c, &neg).is_err());
}

#[test]
fn convex_upsample_is_bounded_by_its_neighborhood() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = ParamStore::<f64>::new();
    for _ in 0..100 {
        let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
        let r = Tensor::from_fn(&[2, h, w], |_| rng.random_range(-5.0..5.0));
        let logits = Tensor::from_fn(&[144, h, w], |_| rng.random_range(-4.0..4.0));
        let mut g = Graph::inference(&params);
        let l = g.input(logits);
        let wv = g.softmax9(l).unwrap();
        let out = convex_upsample(&r, g.value(wv)).unwrap();
        for c in 0..2 {
            for y in 0..4 * h {
                for x in 0..4 * w {
                    let (cy, cx) = (y / 4, x / 4);
                    let mut lo = f64::INFINITY;
                    let mut hi = f64::NEG_INFINITY;
                    for ny in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
                        for nx in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                            let v = 4.0 * r.data()[(c * h + ny) * w + nx];
                            lo = lo.min(v);
                            hi = hi.max(v);
                        }
                    }
                    let v = out.data()[(c * 4 * h + y) * 4 * w + x];
                    assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }
    }
}

#[test]
fn forward_shape_and_determinism() {
    let m = Model::<f32>::new(small()).unwrap();
    for n in [64, 96, 128] {
        let f = m.predict(&page(n, 5), &page(n, 6)).unwrap();
        assert_eq!(f.dims(), (n, n));
        assert!(f.data().iter().all(|v| v.is_finite()));
    }
    let a = m.predict(&page(64, 7), &page(64, 8)).unwrap();
    let b = Model::<f32>::new(small()).unwrap().predict(&page(64, 7), &page(64, 8)).unwrap();
    assert_eq!(a, b);
    assert!(m.predict(&page(64, 7), &page(96, 8)).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let m = Model::<f32>::new(small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.dapm");
    m.save(&path).unwrap();
    assert!(sidecar(&path).exists());
    assert_eq!(&std::fs::read(&path).unwrap()[..4], b"DAPM");
    let back = Model::<f32>::load(&path).unwrap();
    assert_eq!(back, m);
    std::fs::write(sidecar(&path), serde_json::to_string(&ModelConfig::tiny()).unwrap()).unwrap();
    assert!(Model::<f32>::load(&path).is_err());
}

#[test]
fn injected_ground_truth_has_zero_loss() {
    let t = make_procedural_triplet(&SynthParams::scaled(64), 9).unwrap();
    let gt = docalign_net::model::flow_tensor::<f32>(&t.flow);
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let levels: Vec<Var> = [2, 4, 8].iter().map(|&n| g.input(resize_flow_tensor(&gt, n, n).unwrap())).collect();
    let iters: Vec<Var> = (0..7).map(|_| g.input(gt.clone())).collect();
    let loss = supervised_loss(&mut g, &levels, &iters, &gt, &TrainConfig::default()).unwrap();
    assert_eq!(g.value(loss).item(), 0.0);

    let mut g = Graph::new(&store);
    let zero: Vec<Var> = (0..7).map(|_| g.input(Tensor::zeros(&[2, 64, 64]))).collect();
    let loss = supervised_loss(&mut g, &[], &zero, &gt, &TrainConfig::default()).unwrap();
    let mean_abs = t.flow.data().iter().map(|v| v.abs() as f64).sum::<f64>() / (2 * 64 * 64) as f64;
    assert!((g.value(loss).item() as f64 - 7.0 * mean_abs).abs() < 1e-3 * mean_abs);
}

#[test]
fn zero_flow_model_on_identical_pair_has_zero_alignment_loss() {
    let mut m = Model::<f32>::new(small()).unwrap();
    for name in ["dec1.c5.w", "dec2.c5.w", "dec3.c5.w", "fdec.c1.w"] {
        m.params.get_mut(name).unwrap().scale_assign(0.0);
    }
    let img = page(64, 10);
    let pair = train::Pair { source: img.clone(), target: img };
    assert_eq!(mean_alignment_loss(&m, &[pair.clone()], 0).unwrap(), 0.0);
    let other = train::Pair { source: page(64, 11), target: pair.target.clone() };
    assert!(mean_alignment_loss(&Model::new(small()).unwrap(), &[other], 0).unwrap() > 0.0);
}

#[test]
fn forward_graph_exposes_every_supervised_flow() {
    let m = Model::<f32>::new(small()).unwrap();
    let mut g = Graph::inference(&m.params);
    let s = g.input(image_tensor(&page(64, 12)));
    let t = g.input(image_tensor(&page(64, 13)));
    let out = forward(&mut g, &m.config, s, t).unwrap();
    assert_eq!(out.iterations.len(), 3);
    assert_eq!(out.flow, *out.iterations.last().unwrap());
    assert_eq!(g.value(out.initial).shape(), [2, 64, 64]);
}

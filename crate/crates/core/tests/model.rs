use cadenza::model::{
    event_log_probs, event_output_gradient, init_model, next_event_distribution, per_example_gradient, train,
    GradientTarget, ModelCheckpoint, ModelConfig, ModelError, OutputFn, Precision, TrainHyper, Trainer,
    TrainingExample,
};
use cadenza::midi::EventSequence;
use cadenza::seed;
use cadenza::Exec;
use rand::Rng;

fn tiny(context_length: usize, layers: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        context_length,
        embed_dim: 8,
        num_layers: layers,
        num_heads: heads,
        hidden_dim: 16,
        precision: Precision::Float64,
        ..ModelConfig::default()
    }
}

/// Fully random parameters, so every block carries gradient.
fn scrambled(config: &ModelConfig, s: u64) -> ModelCheckpoint {
    let mut m = init_model(config).unwrap();
    let mut rng = seed::rng(s);
    for p in &mut m.params {
        *p = rng.random_range(-0.5..0.5);
    }
    m
}

fn seq(v: &[u16]) -> EventSequence {
    EventSequence::new(v.to_vec()).unwrap()
}

fn random_tokens(rng: &mut impl Rng, n: usize) -> Vec<u16> {
    (0..n).map(|_| rng.random_range(0..388)).collect()
}

fn fd_check(model: &ModelCheckpoint, context: &[u16], events: &[u16], output_fn: OutputFn, coords: usize, s: u64) {
    let (context, events) = (seq(context), seq(events));
    let target = GradientTarget { context: &context, events: &events };
    let grad = per_example_gradient(model, target, output_fn);
    let mut rng = seed::rng(s);
    let h = 1e-5;
    let mut probe = model.clone();
    for _ in 0..coords {
        let j = rng.random_range(0..model.params.len());
        probe.params[j] = model.params[j] + h;
        let up = event_output_gradient(&probe, target, output_fn).value;
        probe.params[j] = model.params[j] - h;
        let down = event_output_gradient(&probe, target, output_fn).value;
        probe.params[j] = model.params[j];
        let numeric = (up - down) / (2.0 * h);
        let err = (grad[j] - numeric).abs() / grad[j].abs().max(numeric.abs()).max(1e-6);
        assert!(err < 1e-4, "coordinate {j}: analytic {} numeric {numeric}", grad[j]);
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = seed::rng(11);
    for (k, (layers, heads)) in [(1, 1), (2, 2), (1, 4)].into_iter().enumerate() {
        let model = scrambled(&tiny(12, layers, heads), k as u64);
        for output_fn in [OutputFn::LogProb, OutputFn::LogitMargin] {
            let ctx = random_tokens(&mut rng, 5);
            let ev = random_tokens(&mut rng, 4);
            fd_check(&model, &ctx, &ev, output_fn, 60, k as u64);
            // Longer than the context window: one truncated pass per event.
            let ctx = random_tokens(&mut rng, 10);
            let ev = random_tokens(&mut rng, 6);
            fd_check(&model, &ctx, &ev, output_fn, 30, 100 + k as u64);
            // Empty context starts from the learned start vector.
            fd_check(&model, &[], &ev, output_fn, 30, 200 + k as u64);
        }
    }
}

#[test]
fn gradient_covers_every_parameter_block() {
    let model = scrambled(&tiny(8, 2, 2), 3);
    let (ctx, ev) = (seq(&[1, 300, 70]), seq(&[200, 360, 61]));
    let g = per_example_gradient(&model, GradientTarget { context: &ctx, events: &ev }, OutputFn::LogProb);
    let layout = model.layout();
    for l in &layout.layers {
        for r in [&l.qkv, &l.attn_out, &l.fc, &l.proj, &l.ln1_gain, &l.ln2_gain] {
            assert!(g[r.clone()].iter().any(|&v| v != 0.0));
        }
    }
}

#[test]
fn future_events_do_not_leak() {
    let model = scrambled(&tiny(16, 2, 2), 9);
    let mut rng = seed::rng(4);
    let ctx = seq(&random_tokens(&mut rng, 3));
    let events = random_tokens(&mut rng, 10);
    let base = event_log_probs(&model, &seq(&events), &ctx);
    for k in 0..events.len() {
        let mut changed = events.clone();
        changed[k] = (changed[k] + 1) % 388;
        let lp = event_log_probs(&model, &seq(&changed), &ctx);
        assert_eq!(lp[..k], base[..k], "event {k} influenced earlier predictions");
        assert_ne!(lp[k], base[k]);
    }
    // The same holds one event at a time.
    let mut running = ctx.clone();
    for (i, &e) in events.iter().enumerate() {
        let p = next_event_distribution(&model, &running).unwrap();
        assert!((p[usize::from(e)].ln() - base[i]).abs() < 1e-12);
        running.push(e);
    }
}

fn windows(n: usize, len: usize, s: u64) -> Vec<TrainingExample> {
    let mut rng = seed::rng(s);
    (0..n)
        .map(|i| {
            // Short repeating motifs are learnable.
            let motif = random_tokens(&mut rng, 4);
            let tokens: Vec<u16> = (0..len).map(|t| motif[t % 4]).collect();
            TrainingExample { tokens: seq(&tokens), work_id: format!("w{i}") }
        })
        .collect()
}

#[test]
fn overfits_a_single_window() {
    let data = windows(1, 12, 1);
    let config = ModelConfig { seed: 1, ..ModelConfig::desk(12) };
    let hyper = TrainHyper { epochs: 300, batch_size: 1, learning_rate: 1e-2, ..TrainHyper::default() };
    let m = train(&data, None, &config, &hyper).unwrap();
    let empty = EventSequence::empty();
    let g = event_output_gradient(&m, GradientTarget { context: &empty, events: &data[0].tokens }, OutputFn::LogProb);
    // Motif positions after the first repetition are predictable.
    assert!(g.p_correct[4..].iter().all(|&p| p > 0.9), "{:?}", g.p_correct);
    assert!(m.provenance.final_loss.unwrap() < m.provenance.initial_loss.unwrap());
}

#[test]
fn training_is_deterministic_and_worker_independent() {
    let data = windows(10, 16, 2);
    let config = ModelConfig { seed: 5, ..ModelConfig::desk(16) };
    let hyper = TrainHyper { epochs: 3, learning_rate: 3e-3, ..TrainHyper::default() };
    let a = train(&data, None, &config, &hyper).unwrap();
    let b = train(&data, None, &config, &TrainHyper { exec: Exec::Sequential, ..hyper.clone() }).unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    let c = train(&data, None, &ModelConfig { seed: 6, ..config }, &hyper).unwrap();
    assert_ne!(a.params, c.params);
    assert!(a.params.iter().all(|&p| f64::from(p as f32) == p), "float32 parameters stay representable");
}

#[test]
fn loss_decreases_on_structured_data() {
    let data = windows(16, 16, 3);
    let t = Trainer::new(
        ModelConfig { seed: 2, ..ModelConfig::desk(16) },
        TrainHyper { epochs: 40, learning_rate: 3e-3, ..TrainHyper::default() },
    );
    let m = t.fit(&data, None).unwrap();
    let (start, end) = (m.provenance.initial_loss.unwrap(), m.provenance.final_loss.unwrap());
    assert!((start - 388f64.ln()).abs() < 1e-3, "fresh model is uniform");
    assert!(end < 0.7 * start, "{start} -> {end}");
}

#[test]
fn subsets_are_recorded_and_validated() {
    let data = windows(6, 8, 4);
    let t = Trainer::new(
        ModelConfig { seed: 0, ..ModelConfig::desk(8) },
        TrainHyper { epochs: 1, ..TrainHyper::default() },
    );
    let mask = vec![true, false, true, false, true, false];
    let m = t.fit(&data, Some(&mask)).unwrap();
    assert_eq!(m.provenance.subset_mask.as_deref(), Some(mask.as_slice()));
    assert_eq!(m.provenance.epochs, 1);

    // Excluded works have no effect on the result.
    let mut altered = data.clone();
    altered[1].tokens = seq(&[7; 8]);
    assert_eq!(t.fit(&altered, Some(&mask)).unwrap().params, m.params);

    assert!(matches!(t.fit(&data, Some(&[false; 6])), Err(ModelError::EmptyCorpus)));
    assert!(matches!(t.fit(&data, Some(&[true; 3])), Err(ModelError::InvalidConfig(_))));
    let short = vec![TrainingExample { tokens: seq(&[1, 2]), work_id: "x".into() }];
    assert!(matches!(t.fit(&short, None), Err(ModelError::BadExample { index: 0, .. })));
}

#[test]
fn checkpoints_survive_disk() {
    let data = windows(4, 8, 5);
    let m = Trainer::new(ModelConfig::desk(8), TrainHyper { epochs: 1, ..TrainHyper::default() })
        .fit(&data, None)
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ackp");
    m.save(&path).unwrap();
    let back = ModelCheckpoint::load(&path).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.params_hash(), m.params_hash());
}

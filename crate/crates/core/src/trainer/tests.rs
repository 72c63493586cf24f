use super::*;
use crate::numerics::{finite_diff_grad, grad_rel_error};
use crate::synthdata::{make_closed_split, SceneGenerator, SynthConfig};

fn tiny_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        num_classes: 3,
        latent_dim: 4,
        grid_h: 3,
        grid_w: 3,
        source_region_frac: 0.45,
        feature_noise_std: 0.3,
        samples_per_class: 1,
        test_samples_per_class: 1,
        faulty_positive_rate: 0.3,
        seed,
    }
}

fn tiny_batch(seed: u64) -> Vec<SyntheticScene> {
    let gen = SceneGenerator::new(tiny_synth(seed)).unwrap();
    let mut rng = RngStream::new(seed, 99);
    (0..3).map(|k| gen.generate_scene(k, &mut rng).unwrap()).collect()
}

fn loss_at(enc: &ToyEncoder, flat: &[f64], scenes: &[&SyntheticScene], cfg: &LossConfig) -> f64 {
    let mut e = enc.clone();
    e.set_flat_params(flat);
    forward_scenes(&e, scenes, cfg).unwrap().0
}

/// Backward pass against central differences of the forward loss.
fn grad_check(seed: u64, hidden: Option<usize>, normalize: bool, detach: bool) -> f64 {
    let scenes = tiny_batch(seed);
    let refs: Vec<&SyntheticScene> = scenes.iter().collect();
    let enc_cfg = EncoderConfig { embed_dim: 4, hidden_dim: hidden, normalize_output: normalize };
    let enc = ToyEncoder::random(4, &enc_cfg, seed).unwrap();
    // A softer threshold keeps the loss smooth enough for a 1e-5 step on random weights.
    let cfg = LossConfig {
        tau: 0.2,
        margin: -0.2,
        pool: PoolConfig { epsilon: 0.3, beta: 0.2, detach_weights: detach },
        symmetric: false,
    };
    let (_, cache) = forward_scenes(&enc, &refs, &cfg).unwrap();
    let analytic = backward_batch(&cache).flatten();
    let numeric = if detach {
        // Pooling weights frozen at the evaluation point: differentiate the
        // surrogate whose weights are constants.
        let frozen = cache.pool_grads.clone();
        let s0 = cache.similarity().clone();
        let alpha0 = cache.alphas.clone();
        finite_diff_grad(
            |x| {
                let mut e = enc.clone();
                e.set_flat_params(x);
                let (_, c) = forward_scenes(&e, &refs, &cfg).unwrap();
                let n = s0.n();
                let s = Mat2::from_fn(n, n, |i, j| {
                    let k = i * n + j;
                    s0.get(i, j)
                        + frozen[k]
                            .as_slice()
                            .iter()
                            .zip(&c.alphas[k])
                            .zip(&alpha0[k])
                            .map(|((w, a), a0)| w * (a - a0))
                            .sum::<f64>()
                });
                margin_nce_loss(&SimilarityMatrix::new(s).unwrap(), &cfg)
            },
            &enc.flat_params(),
            1e-5,
        )
        .unwrap()
    } else {
        finite_diff_grad(|x| loss_at(&enc, x, &refs, &cfg), &enc.flat_params(), 1e-5).unwrap()
    };
    grad_rel_error(&analytic, &numeric)
}

#[test]
fn backward_matches_finite_differences() {
    for seed in 0..12 {
        for (hidden, normalize) in [(None, true), (Some(3), true), (None, false), (Some(5), false)] {
            for detach in [false, true] {
                let err = grad_check(seed, hidden, normalize, detach);
                assert!(err < 1e-3, "seed {seed} hidden {hidden:?} norm {normalize} detach {detach}: {err}");
            }
        }
    }
}

#[test]
fn backward_default_hyperparameters() {
    // ε=0.65, β=0.03, τ=0.07: the sharp default regime.
    for seed in 0..5 {
        let scenes = tiny_batch(seed);
        let refs: Vec<&SyntheticScene> = scenes.iter().collect();
        let enc = ToyEncoder::random(4, &EncoderConfig { embed_dim: 4, hidden_dim: None, normalize_output: true }, seed).unwrap();
        let cfg = LossConfig::default();
        let (_, cache) = forward_scenes(&enc, &refs, &cfg).unwrap();
        let analytic = backward_batch(&cache).flatten();
        let numeric = finite_diff_grad(|x| loss_at(&enc, x, &refs, &cfg), &enc.flat_params(), 1e-6).unwrap();
        let err = grad_rel_error(&analytic, &numeric);
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}

#[test]
fn singleton_batch_has_no_signal() {
    let scenes = tiny_batch(1);
    let enc = ToyEncoder::random(4, &EncoderConfig::default(), 1).unwrap();
    let (loss, cache) = forward_scenes(&enc, &[&scenes[0]], &LossConfig::default()).unwrap();
    assert_eq!(loss, 0.0);
    assert!(backward_batch(&cache).is_zero());
}

#[test]
fn forward_errors() {
    let scenes = tiny_batch(2);
    let enc = ToyEncoder::random(5, &EncoderConfig::default(), 1).unwrap();
    let refs: Vec<&SyntheticScene> = scenes.iter().collect();
    assert!(matches!(forward_scenes(&enc, &refs, &LossConfig::default()), Err(TrainError::Dimension(_))));
    assert!(matches!(forward_scenes(&enc, &[], &LossConfig::default()), Err(TrainError::EmptyBatch)));
    let img: Vec<&Grid3> = refs.iter().map(|s| &s.image).collect();
    let aud: Vec<&Vec1> = refs.iter().take(2).map(|s| &s.audio).collect();
    let enc = ToyEncoder::random(4, &EncoderConfig::default(), 1).unwrap();
    assert!(forward_batch(&enc, &img, &aud, &LossConfig::default()).is_err());
}

#[test]
fn gradient_structure_follows_encoder() {
    let scenes = tiny_batch(3);
    let refs: Vec<&SyntheticScene> = scenes.iter().collect();
    let enc = ToyEncoder::random(4, &EncoderConfig { embed_dim: 4, hidden_dim: None, normalize_output: true }, 3).unwrap();
    let (_, cache) = forward_scenes(&enc, &refs, &LossConfig::default()).unwrap();
    let g = backward_batch(&cache);
    assert_eq!(g.names(), ["image.0", "audio.0"]);
    assert_eq!(g.flatten().len(), enc.num_params());
}

fn orthogonal_scenes(n: usize) -> (ToyEncoder, Vec<SyntheticScene>) {
    // Noiseless scenes whose prototypes are standard basis vectors.
    let dim = n;
    let scenes = (0..n)
        .map(|k| {
            let mut proto = vec![0.0; dim];
            proto[k] = 1.0;
            let bg = {
                let mut b = vec![0.0; dim];
                b[(k + 1) % dim] = 1.0;
                b
            };
            let cols: Vec<Vec<f64>> = (0..16).map(|p| if p % 4 < 2 { proto.clone() } else { bg.clone() }).collect();
            SyntheticScene {
                id: format!("s{k}"),
                image: Grid3::from_columns(4, 4, &cols).unwrap(),
                audio: Vec1::new(proto).unwrap(),
                gt_region: crate::metrics::Rect::new(0.0, 0.0, 0.5, 1.0).unwrap(),
                class_id: k,
                audio_class: k,
                is_faulty_positive: false,
            }
        })
        .collect();
    (ToyEncoder::identity(dim, true), scenes)
}

#[test]
fn identity_encoder_on_orthogonal_scenes() {
    let (enc, scenes) = orthogonal_scenes(6);
    let refs: Vec<&SyntheticScene> = scenes.iter().collect();
    let cfg = LossConfig { margin: 0.0, ..LossConfig::default() };
    let (loss, cache) = forward_scenes(&enc, &refs, &cfg).unwrap();
    let direct = margin_nce_loss(cache.similarity(), &cfg);
    assert_eq!(loss, direct);
    assert!(loss < (6f64).ln());
    let eval = evaluate(&enc, &scenes, &cfg.pool, &EvalOptions { eval_batch_size: 6, ..EvalOptions::default() }).unwrap();
    assert_eq!(eval.retrieval_accuracy, 1.0);
    assert!(eval.localization.mean_ciou() >= 0.9);
}

#[test]
fn identity_encoder_localizes_noiseless_synthetic_scenes() {
    let cfg = SynthConfig { feature_noise_std: 0.0, faulty_positive_rate: 0.0, samples_per_class: 2, test_samples_per_class: 4, ..SynthConfig::default() };
    let split = make_closed_split(&cfg).unwrap();
    let enc = ToyEncoder::identity(cfg.latent_dim, true);
    let eval = evaluate(&enc, &split.heard_test, &PoolConfig::default(), &EvalOptions::default()).unwrap();
    assert_eq!(eval.retrieval_accuracy, 1.0);
    assert!(eval.localization.mean_ciou() >= 0.9, "{}", eval.localization.mean_ciou());
}

#[test]
fn forward_is_deterministic() {
    let scenes = tiny_batch(4);
    let refs: Vec<&SyntheticScene> = scenes.iter().collect();
    let enc = ToyEncoder::random(4, &EncoderConfig::default(), 4).unwrap();
    let a = forward_scenes(&enc, &refs, &LossConfig::default()).unwrap().0;
    let b = forward_scenes(&enc, &refs, &LossConfig::default()).unwrap().0;
    assert_eq!(a.to_bits(), b.to_bits());
}

fn small_train_setup(rate: f64) -> (SynthConfig, TrainConfig) {
    let synth = SynthConfig {
        num_classes: 6,
        latent_dim: 16,
        samples_per_class: 16,
        test_samples_per_class: 8,
        faulty_positive_rate: rate,
        seed: 5,
        ..SynthConfig::default()
    };
    let train = TrainConfig {
        batch_size: 16,
        epochs: 6,
        learning_rate: Some(1e-2),
        encoder: EncoderConfig { embed_dim: 8, hidden_dim: None, normalize_output: true },
        seed: 5,
        ..TrainConfig::default()
    };
    (synth, train)
}

#[test]
fn training_reduces_loss_on_clean_data() {
    let (synth, cfg) = small_train_setup(0.0);
    let split = make_closed_split(&synth).unwrap();
    let enc = ToyEncoder::random(synth.latent_dim, &cfg.encoder, cfg.seed).unwrap();
    let state = train(enc, &split.train, &cfg).unwrap();
    assert_eq!(state.loss_history.len(), cfg.epochs);
    assert!(state.loss_history.last().unwrap() < state.loss_history.first().unwrap(), "{:?}", state.loss_history);
}

#[test]
fn training_is_deterministic_and_resumable() {
    let (synth, cfg) = small_train_setup(0.2);
    let split = make_closed_split(&synth).unwrap();
    let enc = ToyEncoder::random(synth.latent_dim, &cfg.encoder, cfg.seed).unwrap();
    let a = train(enc.clone(), &split.train, &cfg).unwrap();
    let b = train(enc.clone(), &split.train, &cfg).unwrap();
    assert_eq!(a, b);

    let half = TrainConfig { epochs: 3, ..cfg.clone() };
    let first = train(enc, &split.train, &half).unwrap();
    let resumed = resume(first, &split.train, &cfg).unwrap();
    assert_eq!(resumed, a);
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let (synth, mut cfg) = small_train_setup(0.2);
    cfg.learning_rate = Some(0.0);
    cfg.weight_decay = 0.0;
    cfg.epochs = 2;
    let split = make_closed_split(&synth).unwrap();
    let enc = ToyEncoder::random(synth.latent_dim, &cfg.encoder, cfg.seed).unwrap();
    let state = train(enc.clone(), &split.train, &cfg).unwrap();
    assert_eq!(state.encoder, enc);

    cfg.optimizer = OptimizerKind::Sgd;
    cfg.learning_rate = Some(0.0);
    let state = train(enc.clone(), &split.train, &cfg).unwrap();
    assert_eq!(state.encoder, enc);
}

#[test]
fn zero_epochs_returns_initial_state() {
    let (synth, mut cfg) = small_train_setup(0.2);
    cfg.epochs = 0;
    let split = make_closed_split(&synth).unwrap();
    let enc = ToyEncoder::random(synth.latent_dim, &cfg.encoder, cfg.seed).unwrap();
    let state = train(enc.clone(), &split.train, &cfg).unwrap();
    assert_eq!(state.encoder, enc);
    assert!(state.loss_history.is_empty());
}

#[test]
fn divergence_names_epoch_and_batch() {
    let (synth, mut cfg) = small_train_setup(0.2);
    cfg.learning_rate = Some(1e308);
    cfg.optimizer = OptimizerKind::Sgd;
    let split = make_closed_split(&synth).unwrap();
    let enc = ToyEncoder::random(synth.latent_dim, &cfg.encoder, cfg.seed).unwrap();
    match train(enc, &split.train, &cfg) {
        Err(TrainError::NonFiniteLoss { epoch, batch, .. }) => assert!(epoch >= 1 && batch >= 1),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn initial_loss_respects_softmax_bound() {
    let (synth, cfg) = small_train_setup(0.2);
    let split = make_closed_split(&synth).unwrap();
    for seed in 0..5 {
        let enc = ToyEncoder::random(synth.latent_dim, &cfg.encoder, seed).unwrap();
        for batch in epoch_batches(split.train.len(), cfg.batch_size, seed, 0) {
            let scenes: Vec<&SyntheticScene> = batch.iter().map(|&k| &split.train[k]).collect();
            let n = scenes.len() as f64;
            for &m in &[-0.2, 0.0, 0.2] {
                let loss_cfg = cfg.loss.with_margin(m);
                let loss = forward_scenes(&enc, &scenes, &loss_cfg).unwrap().0;
                // pooled scores lie in [-1, 1]
                let bound = n.ln() + (2.0 + m.abs()) / loss_cfg.tau;
                assert!(loss <= bound + 1e-9);
            }
        }
    }
}

#[test]
fn evaluate_rejects_empty_set() {
    let enc = ToyEncoder::identity(4, true);
    assert_eq!(
        evaluate(&enc, &[], &PoolConfig::default(), &EvalOptions::default()).unwrap_err(),
        TrainError::EmptyTestSet
    );
}

#[test]
fn random_encoder_retrieval_near_chance() {
    // Pure-noise scenes carry no correspondence, so any encoder ranks at chance.
    let synth = SynthConfig {
        num_classes: 4,
        latent_dim: 12,
        feature_noise_std: 3.0,
        faulty_positive_rate: 0.0,
        samples_per_class: 1,
        test_samples_per_class: 100,
        seed: 31,
        ..SynthConfig::default()
    };
    let split = make_closed_split(&synth).unwrap();
    let opts = EvalOptions { eval_batch_size: 8, ..EvalOptions::default() };
    let mut accs = Vec::new();
    for seed in 0..5 {
        let enc = ToyEncoder::random(12, &EncoderConfig::default(), 100 + seed).unwrap();
        accs.push(evaluate(&enc, &split.heard_test, &PoolConfig::default(), &opts).unwrap().retrieval_accuracy);
    }
    let rows = (split.heard_test.len() * accs.len()) as f64;
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let p = 1.0 / 8.0;
    let sigma = (p * (1.0 - p) / rows).sqrt();
    assert!((mean - p).abs() < 3.0 * sigma, "mean {mean} vs chance {p} (3σ = {})", 3.0 * sigma);
}

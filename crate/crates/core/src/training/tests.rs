use super::*;
use crate::data::{generate, SynthSpec};
use crate::distributions::DiagGaussian;
use crate::models::{ConditionKind, SampleMode};

fn small_dataset(seed: u64) -> Dataset {
    generate(&SynthSpec {
        n_per_condition: 25,
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn small_config(model: ModelKind) -> RunConfig {
    RunConfig {
        model,
        primary_hidden: vec![16],
        csvae_hidden: vec![8],
        epochs: 3,
        log_every: 1,
        anneal: AnnealSchedule {
            start_step: 2,
            warmup_steps: 5,
            ..AnnealSchedule::default()
        },
        seed: 7,
        ..RunConfig::default()
    }
}

#[test]
fn anneal_zero_before_start() {
    let s = AnnealSchedule {
        start_step: 100,
        ..AnnealSchedule::default()
    };
    assert_eq!(anneal_weight(&s, 0), 0.0);
    assert_eq!(anneal_weight(&s, 99), 0.0);
}

#[test]
fn anneal_linear_endpoint_and_midpoint() {
    let s = AnnealSchedule {
        start_step: 100,
        warmup_steps: 200,
        max_weight: 0.8,
        shape: AnnealShape::Linear,
    };
    assert_eq!(s.weight(300), 0.8);
    assert_eq!(s.weight(10_000), 0.8);
    assert!((s.weight(200) - 0.4).abs() < 1e-15);
}

#[test]
fn anneal_sigmoid_endpoints() {
    let s = AnnealSchedule {
        shape: AnnealShape::Sigmoid,
        start_step: 10,
        warmup_steps: 100,
        max_weight: 1.0,
    };
    assert_eq!(s.weight(10), 0.0);
    assert!((s.weight(110) - 1.0).abs() < 1e-15);
    assert!((s.weight(60) - 0.5).abs() < 1e-12);
}

#[test]
fn anneal_rejects_bad_schedules() {
    let zero = AnnealSchedule {
        warmup_steps: 0,
        ..AnnealSchedule::default()
    };
    assert!(zero.validate().is_err());
    for w in [0.0, 1.5, f64::NAN] {
        let s = AnnealSchedule {
            max_weight: w,
            ..AnnealSchedule::default()
        };
        assert!(s.validate().is_err());
    }
}

fn fixed_output(g: &mut Graph, x: &Tensor, rec: &Tensor, q: &[DiagGaussian]) -> (ModelOutput, Var) {
    let xv = g.constant(x.clone());
    let reconstruction = g.constant(rec.clone());
    let primary_posterior = GaussianVars::constant(g, q).unwrap();
    let out = ModelOutput {
        reconstruction,
        primary_posterior,
        conditional_posterior: None,
        latent: xv,
        csvae_latent: None,
        csvae_reconstruction: None,
    };
    (out, xv)
}

#[test]
fn cvae_loss_perfect_reconstruction_standard_posterior() {
    let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
    let mut g = Graph::new();
    let (out, xv) = fixed_output(&mut g, &x, &x, &vec![DiagGaussian::standard(3); 2]);
    let l = cvae_loss(&mut g, &out, xv, 1.0).unwrap().breakdown(&g);
    assert_eq!(l.total, 0.0);
}

#[test]
fn cvae_loss_zero_weight_is_reconstruction() {
    let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
    let rec = Tensor::from_rows(&[vec![0.0, 2.0], vec![-1.0, 1.5]]).unwrap();
    let q = DiagGaussian::new(vec![1.0, -1.0], vec![0.3, 0.1]).unwrap();
    let mut g = Graph::new();
    let (out, xv) = fixed_output(&mut g, &x, &rec, &[q.clone(), q]);
    let l = cvae_loss(&mut g, &out, xv, 0.0).unwrap().breakdown(&g);
    assert_eq!(l.total, l.recon_primary);
    // (1 + 0 + 0 + 1) / 2 rows
    assert_eq!(l.recon_primary, 1.0);
    assert!(l.kl_primary > 0.0);
}

fn model_batch(kind: ModelKind) -> (Model, Batch, BatchNoise) {
    let ds = small_dataset(3);
    let cfg = small_config(kind);
    let model = build_model(&cfg, &ds).unwrap();
    let batch = ds.batch(&[0, 30, 60, 90]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise = BatchNoise::draw(&mut rng, 4, cfg.latent_dim);
    (model, batch, noise)
}

#[test]
fn cvae_loss_matches_hand_recomposition() {
    let (model, batch, noise) = model_batch(ModelKind::Cvae);
    let lambda = 0.37;
    let l = evaluate_loss(&model, &batch, &noise, lambda).unwrap();
    let enc = model.encode(&batch, &noise).unwrap();
    let n = batch.ids.len() as f64;
    let mse: f64 = enc
        .reconstruction
        .data()
        .iter()
        .zip(batch.x.data())
        .map(|(r, x)| (r - x).powi(2))
        .sum::<f64>()
        / n;
    let kl: f64 = enc
        .primary_posterior
        .iter()
        .map(DiagGaussian::kl_to_standard_normal)
        .sum::<f64>()
        / n;
    assert!((l.recon_primary - mse).abs() < 1e-12);
    assert!((l.kl_primary - kl).abs() < 1e-12);
    assert!((l.total - (lambda * kl + mse)).abs() < 1e-12);
    assert_eq!(l.total, l.recomposed_total());
}

#[test]
fn lcpvae_loss_fixed_points() {
    let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
    let c = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
    let cond = DiagGaussian::new(vec![2.0, -1.0], vec![0.5, -0.3]).unwrap();
    for (cq, kl_c_zero) in [(cond, false), (DiagGaussian::standard(2), true)] {
        let mut g = Graph::new();
        let (mut out, xv) = fixed_output(&mut g, &x, &x, &[DiagGaussian::standard(2)]);
        out.conditional_posterior = Some(GaussianVars::constant(&mut g, &[cq]).unwrap());
        let cv = g.constant(c.clone());
        out.csvae_reconstruction = Some(cv);
        let l = lcpvae_loss(&mut g, &out, xv, cv, 1.0).unwrap().breakdown(&g);
        assert!(l.kl_primary.abs() < 1e-15);
        assert_eq!(l.kl_csvae == 0.0, kl_c_zero);
    }
}

#[test]
fn lcpvae_loss_requires_secondary_outputs() {
    let x = Tensor::from_rows(&[vec![1.0]]).unwrap();
    let mut g = Graph::new();
    let (out, xv) = fixed_output(&mut g, &x, &x, &[DiagGaussian::standard(1)]);
    assert!(matches!(
        lcpvae_loss(&mut g, &out, xv, xv, 1.0),
        Err(Error::Incompatible(_))
    ));
}

fn max_abs(ts: &[Tensor], idx: &[usize]) -> f64 {
    idx.iter()
        .flat_map(|&i| ts[i].data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
}

#[test]
fn kl_primary_never_reaches_secondary_vae() {
    let (model, batch, noise) = model_batch(ModelKind::Lcpvae);
    let cs = model.csvae_param_indices();
    let enc = model.params().indices_with_prefix("csvae_encoder");
    let dec = model.params().indices_with_prefix("csvae_decoder");
    for freeze in [FreezeScope::KlOnly, FreezeScope::Full] {
        let gr = |t| term_gradients(&model, &batch, &noise, 0.5, freeze, t).unwrap();
        let kl_p = gr(LossTerm::KlPrimary);
        assert!(cs.iter().all(|&i| kl_p[i].data().iter().all(|v| *v == 0.0)));
        // The primary encoder does get KL gradient.
        assert!(max_abs(&kl_p, &model.params().indices_with_prefix("encoder.")) > 0.0);

        let kl_c = gr(LossTerm::KlCsvae);
        assert!(max_abs(&kl_c, &enc) > 0.0);
        assert_eq!(max_abs(&kl_c, &dec), 0.0);
        assert!(max_abs(&gr(LossTerm::ReconCsvae), &enc) > 0.0);

        // Reconstruction reaches the secondary encoder only through the sampler.
        let rec = gr(LossTerm::ReconPrimary);
        match freeze {
            FreezeScope::KlOnly => assert!(max_abs(&rec, &enc) > 0.0),
            FreezeScope::Full => assert_eq!(max_abs(&rec, &enc), 0.0),
        }
    }
}

#[test]
fn per_term_gradients_sum_to_total() {
    let (model, batch, noise) = model_batch(ModelKind::Lcpvae);
    let lambda = 0.6;
    let gr = |t| term_gradients(&model, &batch, &noise, lambda, FreezeScope::KlOnly, t).unwrap();
    let total = gr(LossTerm::Total);
    let parts = [
        (gr(LossTerm::KlCsvae), lambda),
        (gr(LossTerm::KlPrimary), lambda),
        (gr(LossTerm::ReconCsvae), 1.0),
        (gr(LossTerm::ReconPrimary), 1.0),
    ];
    for (i, t) in total.iter().enumerate() {
        for (j, v) in t.data().iter().enumerate() {
            let s: f64 = parts.iter().map(|(p, w)| w * p[i].data()[j]).sum();
            assert!((v - s).abs() < 1e-10 * (1.0 + v.abs()));
        }
    }
}

#[test]
fn ablation_loss_uses_statistics() {
    let (model, batch, noise) = model_batch(ModelKind::LcpvaeAblation);
    let l = evaluate_loss(&model, &batch, &noise, 1.0).unwrap();
    let enc = model.encode(&batch, &noise).unwrap();
    let stats = model.stats_for(&batch.ids).unwrap();
    let kl: f64 = enc
        .primary_posterior
        .iter()
        .zip(&stats)
        .map(|(q, c)| q.compose(c).unwrap().kl(c).unwrap())
        .sum::<f64>()
        / 4.0;
    assert!((l.kl_primary - kl).abs() < 1e-12);
    assert_eq!((l.kl_csvae, l.recon_csvae), (0.0, 0.0));
}

#[test]
fn adam_zero_gradient_is_identity() {
    let mut params = vec![Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap()];
    let before = params.clone();
    let mut opt = OptimizerState::new(AdamConfig::default(), &params);
    let g = vec![Tensor::zeros(&[1, 2])];
    for _ in 0..5 {
        opt.step(&mut params, &g, &[]).unwrap();
    }
    assert_eq!(params, before);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut params = vec![Tensor::scalar(3.0).unwrap()];
    let cfg = AdamConfig {
        learning_rate: 0.1,
        ..AdamConfig::default()
    };
    let mut opt = OptimizerState::new(cfg, &params);
    opt.step(&mut params, &[Tensor::scalar(1.0).unwrap()], &[]).unwrap();
    // m_hat = 1, v_hat = 1: step = 0.1 / (1 + 1e-8)
    let moved = 3.0 - params[0].item().unwrap();
    assert!((moved - 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
}

#[test]
fn adam_rejects_malformed_gradients() {
    let mut params = vec![Tensor::zeros(&[2, 2])];
    let mut opt = OptimizerState::new(AdamConfig::default(), &params);
    let names = vec!["w".to_string()];
    assert!(matches!(
        opt.step(&mut params, &[Tensor::zeros(&[2, 3])], &names),
        Err(Error::Shape { .. })
    ));
    assert!(opt.step(&mut params, &[], &names).is_err());
    let bad = vec![Tensor::zeros(&[2, 2]); 1];
    let mut bad_vals = bad[0].clone();
    bad_vals.data_mut()[3] = f64::NAN;
    match opt.step(&mut params, &[bad_vals], &names) {
        Err(Error::NonFiniteGradient { param, .. }) => assert_eq!(param, "w"),
        other => panic!("expected non-finite gradient error, got {other:?}"),
    }
    assert_eq!(params[0], Tensor::zeros(&[2, 2]));
    assert_eq!(opt.step, 0);
}

#[test]
fn zero_epochs_keeps_initial_weights() {
    let ds = small_dataset(1);
    let cfg = RunConfig {
        epochs: 0,
        ..small_config(ModelKind::Lcpvae)
    };
    let art = train(&cfg, &ds).unwrap();
    assert_eq!(art.model, build_model(&cfg, &ds).unwrap());
    assert!(art.metrics.is_empty());
    assert_eq!(art.steps, 0);
}

#[test]
fn training_is_bit_reproducible() {
    let ds = small_dataset(1);
    for kind in ModelKind::ALL {
        let cfg = small_config(kind);
        let a = train(&cfg, &ds).unwrap();
        let b = train(&cfg, &ds).unwrap();
        assert_eq!(a, b);
        let c = train(&RunConfig { seed: 8, ..cfg }, &ds).unwrap();
        assert_ne!(a.model, c.model);
    }
}

#[test]
fn logged_totals_recompose_exactly() {
    let ds = small_dataset(2);
    for kind in ModelKind::ALL {
        let art = train(&small_config(kind), &ds).unwrap();
        assert_eq!(art.metrics.len() as u64, art.steps);
        for m in &art.metrics {
            let b = m.breakdown();
            assert_eq!(b.total, b.recomposed_total(), "{kind} step {}", m.step);
            assert!(b.kl_primary >= 0.0 && b.kl_csvae >= 0.0);
            assert_eq!(b.lambda, small_config(kind).anneal.weight(m.step));
        }
    }
}

#[test]
fn cvae_training_descends() {
    let ds = small_dataset(4);
    let cfg = RunConfig {
        epochs: 30,
        ..small_config(ModelKind::Cvae)
    };
    let art = train(&cfg, &ds).unwrap();
    assert!(art.final_loss.total < art.initial_loss.total);
}

#[test]
fn exploding_run_aborts_with_last_good_model() {
    let ds = small_dataset(5);
    let cfg = RunConfig {
        optimizer: AdamConfig {
            learning_rate: 1e200,
            ..AdamConfig::default()
        },
        ..small_config(ModelKind::Cvae)
    };
    let mut t = Trainer::new(&cfg, &ds).unwrap();
    let err = t.run().unwrap_err();
    assert!(
        matches!(err, Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. }),
        "{err:?}"
    );
    assert!(t
        .model()
        .params()
        .tensors()
        .iter()
        .all(|p| p.data().iter().all(|v| v.is_finite())));
    // The surviving weights still evaluate.
    let ids = [0usize];
    t.model()
        .infer_sample(&ids, &Tensor::zeros(&[1, cfg.latent_dim]), SampleMode::Prior)
        .unwrap();
}

#[test]
fn embedding_conditions_train() {
    let ds = small_dataset(6);
    let cfg = RunConfig {
        condition_input: ConditionKind::Embedding,
        ..small_config(ModelKind::Lcpvae)
    };
    let art = train(&cfg, &ds).unwrap();
    assert_eq!(art.model.conditions().dim(), ds.embeddings().dim);
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::distributions::noise_tensor;

const D: usize = 3;
const K: usize = 3;
const LATENT: usize = 2;

fn arch(kind: ModelKind) -> Architecture {
    Architecture::new(kind, D, LATENT).with_hidden(vec![5], vec![4])
}

fn stats() -> Vec<DiagGaussian> {
    (0..K)
        .map(|k| {
            let k = k as f64;
            DiagGaussian::new(vec![k, -k], vec![-0.5 + 0.1 * k, 0.2]).unwrap()
        })
        .collect()
}

fn model(kind: ModelKind) -> Model {
    Model::new(arch(kind), ConditionTable::one_hot(K), Some(stats()), 11).unwrap()
}

fn batch() -> Batch {
    Batch {
        x: Tensor::from_rows(&[
            vec![0.5, -1.0, 0.2],
            vec![1.5, 0.3, -0.7],
            vec![-0.4, 0.9, 1.1],
            vec![0.0, 0.1, 0.2],
        ])
        .unwrap(),
        ids: vec![0, 2, 1, 2],
    }
}

fn noise() -> BatchNoise {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    BatchNoise::draw(&mut rng, 4, LATENT)
}

fn zero_block(m: &mut Model, prefix: &str) {
    let idx = m.params().indices_with_prefix(prefix);
    for i in idx {
        let shape = m.params().tensors()[i].shape().to_vec();
        m.params_mut().tensors_mut()[i] = Tensor::zeros(&shape);
    }
}

fn encode(m: &Model, n: &BatchNoise) -> Encoded {
    m.encode(&batch(), n).unwrap()
}

#[test]
fn cvae_zero_noise_latent_is_mean() {
    let m = model(ModelKind::Cvae);
    let e = encode(&m, &BatchNoise::zeros(4, LATENT));
    for (i, q) in e.primary_posterior.iter().enumerate() {
        assert_eq!(e.latent.row(i), q.mean());
    }
}

#[test]
fn cvae_batch_order_is_irrelevant() {
    let m = model(ModelKind::Cvae);
    let b = batch();
    let n = noise();
    let out = m.encode(&b, &n).unwrap();
    let perm = [2usize, 0, 3, 1];
    let pick = |t: &Tensor| Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
    let pb = Batch {
        x: pick(&b.x),
        ids: perm.iter().map(|&i| b.ids[i]).collect(),
    };
    let pn = BatchNoise {
        primary: pick(&n.primary),
        conditional: pick(&n.conditional),
    };
    let pout = m.encode(&pb, &pn).unwrap();
    assert_eq!(pout.reconstruction, pick(&out.reconstruction));
    assert_eq!(pout.latent, pick(&out.latent));
}

// Plain-f64 forward of a tanh MLP, independent of the graph engine.
fn mlp_ref(m: &Model, prefix: &str, layers: usize, input: &[f64]) -> Vec<f64> {
    let mut h = input.to_vec();
    for l in 0..layers {
        let w = m.params().get(&format!("{prefix}.{l}.weight")).unwrap();
        let b = m.params().get(&format!("{prefix}.{l}.bias")).unwrap();
        let (fi, fo) = (w.shape()[0], w.shape()[1]);
        let mut out = b.data().to_vec();
        for (j, o) in out.iter_mut().enumerate() {
            for (i, hi) in h.iter().enumerate().take(fi) {
                *o += hi * w.data()[i * fo + j];
            }
        }
        if l + 1 < layers {
            out.iter_mut().for_each(|v| *v = v.tanh());
        }
        h = out;
    }
    h
}

fn one_hot(k: usize) -> Vec<f64> {
    let mut v = vec![0.0; K];
    v[k] = 1.0;
    v
}

#[test]
fn cvae_matches_hand_composition() {
    let m = model(ModelKind::Cvae);
    let b = batch();
    let n = noise();
    let out = m.encode(&b, &n).unwrap();
    let i = 1;
    let mut input = b.x.row(i).to_vec();
    input.extend(one_hot(b.ids[i]));
    let enc = mlp_ref(&m, "encoder", 2, &input);
    let z: Vec<f64> = (0..LATENT)
        .map(|j| enc[j] + enc[LATENT + j].clamp(-7.0, 4.0).exp() * n.primary.row(i)[j])
        .collect();
    let mut dec_in = z.clone();
    dec_in.extend(one_hot(b.ids[i]));
    let rec = mlp_ref(&m, "decoder", 2, &dec_in);
    for (a, e) in out.reconstruction.row(i).iter().zip(&rec) {
        assert!((a - e).abs() < 1e-13);
    }
    for (a, e) in out.latent.row(i).iter().zip(&z) {
        assert!((a - e).abs() < 1e-14);
    }
}

#[test]
fn lcpvae_standard_primary_gives_csvae_sample() {
    let mut m = model(ModelKind::Lcpvae);
    zero_block(&mut m, "encoder.");
    // Same noise on both samplers: z must equal z_c.
    let n = noise();
    let shared = BatchNoise {
        primary: n.conditional.clone(),
        conditional: n.conditional.clone(),
    };
    let out = encode(&m, &shared);
    assert_eq!(Some(&out.latent), out.csvae_latent.as_ref());
}

#[test]
fn lcpvae_shared_condition_shares_posterior() {
    let m = model(ModelKind::Lcpvae);
    let out = encode(&m, &noise());
    let cond = out.conditional_posterior.unwrap();
    // rows 1 and 3 both have condition 2
    assert_eq!(cond[1], cond[3]);
    assert_ne!(cond[0], cond[1]);
}

#[test]
fn lcpvae_latent_matches_extended_trick() {
    let m = model(ModelKind::Lcpvae);
    let b = batch();
    let n = noise();
    let out = m.encode(&b, &n).unwrap();
    for i in 0..4 {
        let cs = mlp_ref(&m, "csvae_encoder", 2, &one_hot(b.ids[i]));
        let mut input = b.x.row(i).to_vec();
        input.extend(one_hot(b.ids[i]));
        let pr = mlp_ref(&m, "encoder", 2, &input);
        for j in 0..LATENT {
            let (mu, sigma) = (pr[j], pr[LATENT + j].clamp(-7.0, 4.0).exp());
            let (mu_c, sigma_c) = (cs[j], cs[LATENT + j].clamp(-7.0, 4.0).exp());
            let z = (mu + sigma * mu_c) + (sigma * sigma_c) * n.primary.row(i)[j];
            assert!((out.latent.row(i)[j] - z).abs() < 1e-13);
        }
    }
}

#[test]
fn ablation_matches_extended_trick() {
    let m = model(ModelKind::LcpvaeAblation);
    let b = batch();
    let n = noise();
    let out = m.encode(&b, &n).unwrap();
    let st = stats();
    for i in 0..4 {
        let mut input = b.x.row(i).to_vec();
        input.extend(one_hot(b.ids[i]));
        let pr = mlp_ref(&m, "encoder", 2, &input);
        let c = &st[b.ids[i]];
        for j in 0..LATENT {
            let (mu, sigma) = (pr[j], pr[LATENT + j].clamp(-7.0, 4.0).exp());
            let z = (mu + sigma * c.mean()[j]) + (sigma * c.std()[j]) * n.primary.row(i)[j];
            assert!((out.latent.row(i)[j] - z).abs() < 1e-13);
        }
    }
}

#[test]
fn ablation_standard_primary_samples_stats() {
    let mut m = model(ModelKind::LcpvaeAblation);
    zero_block(&mut m, "encoder.");
    let b = batch();
    let n = noise();
    let out = m.encode(&b, &n).unwrap();
    for i in 0..4 {
        let c = &stats()[b.ids[i]];
        let z = c
            .sample(&crate::distributions::NoiseVector::new(n.primary.row(i).to_vec()))
            .unwrap();
        for (a, e) in out.latent.row(i).iter().zip(&z) {
            assert!((a - e).abs() < 1e-14);
        }
    }
}

#[test]
fn ablation_standard_stats_reduce_to_plain_trick() {
    let std_stats = vec![DiagGaussian::standard(LATENT); K];
    let m = Model::new(
        arch(ModelKind::LcpvaeAblation),
        ConditionTable::one_hot(K),
        Some(std_stats),
        11,
    )
    .unwrap();
    let out = encode(&m, &noise());
    let n = noise();
    for (i, q) in out.primary_posterior.iter().enumerate() {
        let z = q
            .sample(&crate::distributions::NoiseVector::new(n.primary.row(i).to_vec()))
            .unwrap();
        assert_eq!(out.latent.row(i), z.as_slice());
    }
}

#[test]
fn ablation_stats_dim_mismatch() {
    let bad = vec![DiagGaussian::standard(LATENT + 1); K];
    let r = Model::new(
        arch(ModelKind::LcpvaeAblation),
        ConditionTable::one_hot(K),
        Some(bad),
        1,
    );
    assert!(matches!(r, Err(Error::Shape { .. })));
    let r = Model::new(arch(ModelKind::LcpvaeAblation), ConditionTable::one_hot(K), None, 1);
    assert!(r.is_err());
}

#[test]
fn forward_rejects_bad_shapes() {
    let m = model(ModelKind::Cvae);
    let mut b = batch();
    b.x = Tensor::zeros(&[4, D + 1]);
    assert!(m.encode(&b, &noise()).is_err());
    assert!(m.encode(&batch(), &BatchNoise::zeros(4, LATENT + 1)).is_err());
}

#[test]
fn forward_is_deterministic() {
    for kind in ModelKind::ALL {
        let m = model(kind);
        let a = encode(&m, &noise());
        let b = encode(&m, &noise());
        assert_eq!(a.reconstruction, b.reconstruction);
        assert_eq!(a.latent, b.latent);
    }
}

#[test]
fn infer_zero_noise_gives_condition_center() {
    let m = model(ModelKind::Lcpvae);
    let ids = [0, 1, 2];
    let g = m
        .infer_sample(&ids, &Tensor::zeros(&[3, LATENT]), SampleMode::ConditionalPosterior)
        .unwrap();
    let post = m.conditional_posterior(&ids).unwrap();
    for (i, q) in post.iter().enumerate() {
        assert_eq!(g.latent.row(i), q.mean());
    }
}

#[test]
fn infer_distinct_noise_distinct_latents() {
    let m = model(ModelKind::Lcpvae);
    let eps = Tensor::from_rows(&[vec![0.1, 0.2], vec![-0.3, 0.5]]).unwrap();
    let g = m
        .infer_sample(&[1, 1], &eps, SampleMode::ConditionalPosterior)
        .unwrap();
    assert_ne!(g.latent.row(0), g.latent.row(1));
}

#[test]
fn infer_latent_moments_follow_posterior() {
    let m = model(ModelKind::Lcpvae);
    let n = 10_000;
    let ids = vec![2; n];
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eps = noise_tensor(&mut rng, n, LATENT);
    let g = m
        .infer_sample(&ids, &eps, SampleMode::ConditionalPosterior)
        .unwrap();
    let q = &m.conditional_posterior(&[2]).unwrap()[0];
    let std = q.std();
    for j in 0..LATENT {
        let col: Vec<f64> = (0..n).map(|i| g.latent.row(i)[j]).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se_mean = std[j] / (n as f64).sqrt();
        assert!((mean - q.mean()[j]).abs() < 3.0 * se_mean);
        // std of the sample std of a normal is about sigma / sqrt(2(n-1))
        let se_std = std[j] / (2.0 * (n - 1) as f64).sqrt();
        assert!((var.sqrt() - std[j]).abs() < 3.0 * se_std);
    }
}

#[test]
fn infer_mode_compatibility() {
    let eps = Tensor::zeros(&[1, LATENT]);
    let cvae = model(ModelKind::Cvae);
    assert!(matches!(
        cvae.infer_sample(&[0], &eps, SampleMode::ConditionalPosterior),
        Err(Error::Incompatible(_))
    ));
    assert!(cvae.infer_sample(&[0], &eps, SampleMode::Prior).is_ok());
    assert!(cvae.infer_sample(&[K], &eps, SampleMode::Prior).is_err());
    let abl = model(ModelKind::LcpvaeAblation);
    let g = abl
        .infer_sample(&[1], &eps, SampleMode::ConditionalPosterior)
        .unwrap();
    assert_eq!(g.latent.row(0), stats()[1].mean());
}

#[test]
fn csvae_params_only_in_lcpvae() {
    assert!(model(ModelKind::Cvae).csvae_param_indices().is_empty());
    assert_eq!(model(ModelKind::Lcpvae).csvae_param_indices().len(), 8);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for kind in ModelKind::ALL {
        let m = model(kind);
        let path = dir.path().join(format!("{kind}.json"));
        m.to_checkpoint(None).save(&path).unwrap();
        let back = Model::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}

#[test]
fn checkpoint_rejects_wrong_version() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    let mut c = model(ModelKind::Cvae).to_checkpoint(None);
    c.version = 99;
    c.save(&path).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Version { .. })));
    std::fs::write(&path, "{\"format\": 3}").unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Schema { .. })));
}

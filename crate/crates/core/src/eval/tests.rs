use rand::seq::SliceRandom;

use super::*;
use crate::config::RunConfig;
use crate::data::{generate, SynthSpec};
use crate::models::{Architecture, ConditionTable};
use crate::training::{build_model, evaluate_loss};

fn two_blobs(n: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut p = vec![vec![0.0, 0.0]; n];
    p.extend(vec![vec![100.0, 0.0]; n]);
    let l = (0..2 * n).map(|i| i / n).collect();
    (p, l)
}

#[test]
fn silhouette_separated_clusters() {
    let (p, l) = two_blobs(5);
    assert_eq!(silhouette(&p, &l).unwrap(), 1.0);
}

#[test]
fn silhouette_matches_brute_force_oracle() {
    let p = vec![
        vec![0.0, 0.0],
        vec![1.0, 0.5],
        vec![0.3, 1.2],
        vec![4.0, 4.0],
        vec![5.0, 3.5],
        vec![3.2, 5.1],
    ];
    let s = silhouette(&p, &[0, 0, 0, 1, 1, 1]).unwrap();
    assert!((s - 0.7387878693778444).abs() < 1e-12);

    let p = vec![
        vec![0.0, 0.0],
        vec![0.2, 0.1],
        vec![3.0, 0.0],
        vec![3.1, 0.4],
        vec![2.9, -0.3],
        vec![1.5, 0.2],
    ];
    let s = silhouette(&p, &[0, 0, 1, 1, 1, 0]).unwrap();
    assert!((s - 0.6553174660110663).abs() < 1e-12);
}

#[test]
fn silhouette_shuffled_labels_near_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pts = noise_tensor(&mut rng, 400, 3).to_rows();
    let mut labels: Vec<usize> = (0..400).map(|i| i % 4).collect();
    labels.shuffle(&mut rng);
    let s = silhouette(&pts, &labels).unwrap();
    assert!(s.abs() < 0.05, "{s}");
}

#[test]
fn silhouette_degenerate_inputs() {
    let p = vec![vec![0.0], vec![1.0], vec![2.0]];
    assert!(matches!(silhouette(&p, &[0, 0, 0]), Err(Error::Degenerate(_))));
    assert!(matches!(silhouette(&p, &[0, 0, 1]), Err(Error::Degenerate(_))));
    assert!(silhouette(&p, &[0, 1]).is_err());
}

#[test]
fn intra_inter_ratio_cases() {
    let (p, l) = two_blobs(3);
    assert_eq!(intra_inter_ratio(&p, &l).unwrap(), 0.0);
    let p = vec![vec![0.0], vec![1.0], vec![3.0], vec![4.0]];
    // intra: (1 + 1) / 2; inter: (3 + 4 + 2 + 3) / 4
    assert_eq!(intra_inter_ratio(&p, &[0, 0, 1, 1]).unwrap(), 1.0 / 3.0);
}

#[test]
fn condition_accuracy_cases() {
    let c = vec![vec![0.0, 0.0], vec![5.0, 0.0], vec![0.0, 5.0], vec![5.0, 5.0]];
    let exact: Vec<_> = c.iter().cloned().enumerate().collect();
    assert_eq!(condition_accuracy(&exact, &c).unwrap(), 1.0);
    let constant: Vec<_> = (0..4).map(|k| (k, c[0].clone())).collect();
    assert_eq!(condition_accuracy(&constant, &c).unwrap(), 0.25);
    assert!(matches!(
        condition_accuracy(&[(4, vec![0.0, 0.0])], &c),
        Err(Error::Data(_))
    ));
}

#[test]
fn condition_accuracy_random_generator() {
    let c = vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 10_000;
    let gen: Vec<_> = (0..n)
        .map(|_| {
            let mut ks = [0usize, 1, 2, 3];
            ks.shuffle(&mut rng);
            let mut xs = [0.0, 1.0, 2.0, 3.0];
            xs.shuffle(&mut rng);
            (ks[0], vec![xs[0]])
        })
        .collect();
    let acc = condition_accuracy(&gen, &c).unwrap();
    let se = (0.25f64 * 0.75 / n as f64).sqrt();
    assert!((acc - 0.25).abs() < 3.0 * se, "{acc}");
}

fn dataset() -> Dataset {
    generate(&SynthSpec {
        n_per_condition: 20,
        seed: 9,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn zero_params(m: &mut Model) {
    let shapes: Vec<Vec<usize>> = m.params().tensors().iter().map(|t| t.shape().to_vec()).collect();
    for (t, s) in m.params_mut().tensors_mut().iter_mut().zip(shapes) {
        *t = Tensor::zeros(&s);
    }
}

fn config(kind: ModelKind) -> RunConfig {
    RunConfig {
        model: kind,
        primary_hidden: vec![8],
        csvae_hidden: vec![6],
        latent_dim: 3,
        seed: 4,
        ..RunConfig::default()
    }
}

#[test]
fn per_dim_kl_zero_weights_is_zero() {
    let ds = dataset();
    for kind in ModelKind::ALL {
        let mut m = build_model(&config(kind), &ds).unwrap();
        zero_params(&mut m);
        let v = per_dim_kl(&m, &ds, ds.split(Split::Train)).unwrap();
        assert_eq!(v.len(), 3);
        assert!(v.iter().all(|x| x.abs() < 1e-15), "{kind}: {v:?}");
    }
}

#[test]
fn per_dim_kl_sums_to_loss_term() {
    let ds = dataset();
    let idx = &ds.split(Split::Train)[..10];
    for kind in ModelKind::ALL {
        let m = build_model(&config(kind), &ds).unwrap();
        let v = per_dim_kl(&m, &ds, idx).unwrap();
        let batch = ds.batch(idx).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = BatchNoise::draw(&mut rng, idx.len(), 3);
        let l = evaluate_loss(&m, &batch, &noise, 1.0).unwrap();
        let s: f64 = v.iter().sum();
        assert!((s - l.kl_primary).abs() < 1e-10, "{kind}: {s} vs {}", l.kl_primary);
    }
}

#[test]
fn one_active_dimension_detected() {
    let q = DiagGaussian::new(vec![0.0, 1.5, 0.0, 0.0], vec![0.0, -1.0, 0.0, 0.0]).unwrap();
    let v = per_dim_kl_of(&[q.clone(), q], None).unwrap();
    assert_eq!(active_dims(&v), 1);
    assert!(v[1] > ACTIVE_DIM_THRESHOLD);
}

#[test]
fn variability_zero_when_decoder_ignores_latent() {
    let ds = dataset();
    let mut m = build_model(&config(ModelKind::Cvae), &ds).unwrap();
    let w = m.params().indices_with_prefix("decoder.0.weight")[0];
    let mut t = m.params().tensors()[w].clone();
    // rows 0..d of the first decoder layer read the latent
    for v in &mut t.data_mut()[..3 * 8] {
        *v = 0.0;
    }
    m.params_mut().tensors_mut()[w] = t;
    let v = output_variability(&m, 1, 20, 0, SampleMode::Prior).unwrap();
    assert!(v < 1e-12, "{v}");
    assert!(output_variability(&m, 1, 1, 0, SampleMode::Prior).is_err());
}

#[test]
fn variability_of_identity_decoder_is_one() {
    // Linear decoder d = D = 2 with identity weights, no conditions.
    let arch = Architecture::new(ModelKind::Vae, 2, 2).with_hidden(vec![], vec![]);
    let mut m = Model::new(arch, ConditionTable::one_hot(1), None, 0).unwrap();
    let w = m.params().indices_with_prefix("decoder.0.weight")[0];
    let b = m.params().indices_with_prefix("decoder.0.bias")[0];
    m.params_mut().tensors_mut()[w] = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    m.params_mut().tensors_mut()[b] = Tensor::zeros(&[1, 2]);
    let n = 20_000;
    let v = output_variability(&m, 0, n, 5, SampleMode::Prior).unwrap();
    // std of the sample std is about 1 / sqrt(2(n - 1)); averaged over 2 dims
    let se = 1.0 / (2.0 * (n - 1) as f64).sqrt() / 2f64.sqrt();
    assert!((v - 1.0).abs() < 3.0 * se, "{v}");
}

#[test]
fn pca_matches_eigensolver_oracle() {
    let x = vec![
        vec![1.0, 2.0, 0.5],
        vec![-0.5, 0.3, 1.1],
        vec![2.2, -1.0, 0.0],
        vec![0.4, 0.9, -0.7],
        vec![-1.3, 1.5, 0.2],
    ];
    let expect = [
        [-0.26636243330445997, 1.2578795479629912],
        [-0.523191575483095, -1.0704684457216307],
        [2.5233886762144517, -0.30516162063038293],
        [0.03895963833177297, 0.4160502111504258],
        [-1.7727943057586695, -0.2982996927614032],
    ];
    let p = pca_project(&x, 2).unwrap();
    for (r, e) in p.iter().zip(expect) {
        for (a, b) in r.iter().zip(e) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
    assert_eq!(pca_project(&x, 2).unwrap(), p);
}

#[test]
fn pca_preserves_planar_distances() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let basis = noise_tensor(&mut rng, 2, 8).to_rows();
    // orthonormalize the two directions
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let u: Vec<f64> = basis[0].iter().map(|x| x / norm(&basis[0])).collect();
    let dot: f64 = u.iter().zip(&basis[1]).map(|(a, b)| a * b).sum();
    let w: Vec<f64> = basis[1].iter().zip(&u).map(|(b, a)| b - dot * a).collect();
    let w: Vec<f64> = w.iter().map(|x| x / norm(&w)).collect();
    let coords = noise_tensor(&mut rng, 12, 2).to_rows();
    let pts: Vec<Vec<f64>> = coords
        .iter()
        .map(|c| (0..8).map(|j| 3.0 + c[0] * u[j] + c[1] * w[j]).collect())
        .collect();
    let p = pca_project(&pts, 2).unwrap();
    for i in 0..pts.len() {
        for j in 0..pts.len() {
            let d_in = distance(&pts[i], &pts[j]);
            let d_out = distance(&p[i], &p[j]);
            assert!((d_in - d_out).abs() < 1e-9);
        }
    }
}

#[test]
fn pca_degenerate_inputs() {
    assert!(pca_project(&[vec![1.0, 2.0]], 2).is_err());
    assert!(matches!(
        pca_project(&[vec![1.0, 2.0], vec![1.0, 2.0]], 1),
        Err(Error::Degenerate(_))
    ));
}

#[test]
fn latent_dump_csv_round_trip() {
    let rows = vec![
        LatentRow {
            condition_id: 1,
            source: LatentSource::EncoderPosterior,
            z: vec![0.1, -2.5e-7],
        },
        LatentRow {
            condition_id: 0,
            source: LatentSource::InferenceSample,
            z: vec![3.0, 1.0 / 3.0],
        },
    ];
    let d = LatentDump::new(ModelKind::Lcpvae, 2, rows).unwrap();
    let csv = d.to_csv().unwrap();
    assert!(csv.starts_with("condition_id,source,z_0,z_1\n"));
    assert_eq!(LatentDump::from_csv(ModelKind::Lcpvae, 2, &csv).unwrap(), d);
    assert!(LatentDump::from_csv(ModelKind::Lcpvae, 2, "a,b\n").is_err());
    let bad = vec![
        LatentRow {
            condition_id: 0,
            source: LatentSource::InferenceSample,
            z: vec![1.0],
        },
        LatentRow {
            condition_id: 0,
            source: LatentSource::InferenceSample,
            z: vec![1.0, 2.0],
        },
    ];
    assert!(LatentDump::new(ModelKind::Vae, 0, bad).is_err());
}

#[test]
fn evaluate_is_deterministic_and_routes_spaces() {
    let ds = dataset();
    let m = build_model(&config(ModelKind::Lcpvae), &ds).unwrap();
    let opts = EvalOptions {
        samples_per_condition: 10,
        ..EvalOptions::default()
    };
    let a = evaluate(&m, &ds, &opts).unwrap();
    let b = evaluate(&m, &ds, &opts).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.report.to_json().unwrap(), b.report.to_json().unwrap());
    let n_test = ds.split(Split::Test).len();
    assert_eq!(a.dump.rows().len(), n_test + 4 * 10);

    let cs = evaluate(
        &m,
        &ds,
        &EvalOptions {
            space: DumpSpace::Csvae,
            ..opts
        },
    )
    .unwrap();
    assert_ne!(
        cs.dump.filter(LatentSource::EncoderPosterior),
        a.dump.filter(LatentSource::EncoderPosterior)
    );
    // Inference samples come from the same conditional posterior in both spaces.
    assert_eq!(
        cs.dump.filter(LatentSource::InferenceSample),
        a.dump.filter(LatentSource::InferenceSample)
    );

    let cvae = build_model(&config(ModelKind::Cvae), &ds).unwrap();
    let r = evaluate(
        &cvae,
        &ds,
        &EvalOptions {
            space: DumpSpace::Csvae,
            ..opts
        },
    );
    assert!(matches!(r, Err(Error::Incompatible(_))));
    let r = evaluate(&cvae, &ds, &opts).unwrap().report;
    assert_eq!(r.sample_mode, SampleMode::Prior);
    assert!((-1.0..=1.0).contains(&r.silhouette));
    assert!((0.0..=1.0).contains(&r.condition_accuracy));
}

#[test]
fn untrained_prior_samples_have_no_structure() {
    let ds = dataset();
    let m = build_model(&config(ModelKind::Cvae), &ds).unwrap();
    let r = evaluate(&m, &ds, &EvalOptions::default()).unwrap().report;
    assert!(r.silhouette.abs() < 0.1, "{}", r.silhouette);
}

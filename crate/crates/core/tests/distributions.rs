//! Closed-form KL against Monte-Carlo estimates, and the two factorings of
//! the extended reparametrization.

use lcpvae::autodiff::{Graph, Tensor};
use lcpvae::distributions::{
    extended_reparam_sample, kl_diag_gaussians, kl_to_standard_normal, DiagGaussian, GaussianVars,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const MC_SAMPLES: usize = 1_000_000;

fn random_gaussian(rng: &mut ChaCha8Rng, d: usize) -> DiagGaussian {
    let mean = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let log_std = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    DiagGaussian::new(mean, log_std).unwrap()
}

/// Log-density up to the shared `-d/2 log(2 pi)` term, which cancels in
/// the log-ratio.
struct Density {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    log_norm: f64,
}

impl Density {
    fn new(q: &DiagGaussian) -> Self {
        Density {
            mean: q.mean().to_vec(),
            inv_std: q.log_std().iter().map(|l| (-l).exp()).collect(),
            log_norm: -q.log_std().iter().sum::<f64>(),
        }
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        let mut quad = 0.0;
        for ((z, m), s) in z.iter().zip(&self.mean).zip(&self.inv_std) {
            let u = (z - m) * s;
            quad += u * u;
        }
        self.log_norm - 0.5 * quad
    }
}

/// Mean and standard error of `log q(z) - log p(z)` over draws from `q`.
fn monte_carlo_kl(q: &DiagGaussian, p: &DiagGaussian, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let std = q.std();
    let (dq, dp) = (Density::new(q), Density::new(p));
    let mut z = vec![0.0; q.dim()];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..MC_SAMPLES {
        for (i, zi) in z.iter_mut().enumerate() {
            let e: f64 = rng.sample(StandardNormal);
            *zi = q.mean()[i] + std[i] * e;
        }
        let r = dq.log_density(&z) - dp.log_density(&z);
        sum += r;
        sum_sq += r * r;
    }
    let n = MC_SAMPLES as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn graph_kl(q: &DiagGaussian, p: Option<&DiagGaussian>) -> f64 {
    let mut g = Graph::new();
    let qv = GaussianVars::constant(&mut g, std::slice::from_ref(q)).unwrap();
    let kl = match p {
        Some(p) => {
            let pv = GaussianVars::constant(&mut g, std::slice::from_ref(p)).unwrap();
            kl_diag_gaussians(&mut g, &qv, &pv).unwrap()
        }
        None => kl_to_standard_normal(&mut g, &qv).unwrap(),
    };
    g.value(kl).item().unwrap()
}

#[test]
fn kl_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for d in [1, 8, 32] {
        for draw in 0..20 {
            let q = random_gaussian(&mut rng, d);
            let p = random_gaussian(&mut rng, d);
            let standard = DiagGaussian::standard(d);
            for (target, closed) in [
                (&standard, graph_kl(&q, None)),
                (&p, graph_kl(&q, Some(&p))),
            ] {
                let (mc, se) = monte_carlo_kl(&q, target, &mut rng);
                assert!(
                    (closed - mc).abs() <= 3.0 * se,
                    "d={d} draw={draw}: closed {closed} vs mc {mc} (se {se})"
                );
            }
            assert!((q.kl_to_standard_normal() - graph_kl(&q, None)).abs() < 1e-12);
            assert!((q.kl(&p).unwrap() - graph_kl(&q, Some(&p))).abs() < 1e-12);
        }
    }
}

#[test]
fn extended_trick_factorings_agree() {
    const D: usize = 8;
    const N: usize = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut draw = |scale: f64| -> Vec<Vec<f64>> {
        (0..N)
            .map(|_| (0..D).map(|_| rng.random_range(-scale..scale)).collect())
            .collect()
    };
    let (mu, log_sigma, mu_c, log_sigma_c, eps) = (draw(3.0), draw(2.0), draw(3.0), draw(2.0), draw(3.0));

    let mut g = Graph::new();
    let mut c = |rows: &[Vec<f64>]| g.constant(Tensor::from_rows(rows).unwrap());
    let primary = GaussianVars {
        mean: c(&mu),
        log_std: c(&log_sigma),
    };
    let conditional = GaussianVars {
        mean: c(&mu_c),
        log_std: c(&log_sigma_c),
    };
    let e = c(&eps);
    let z = extended_reparam_sample(&mut g, &primary, &conditional, e).unwrap();
    let z = g.value(z);

    for i in 0..N {
        for j in 0..D {
            // Nested form: draw from the conditional posterior, then map it
            // through the primary affine transform.
            let z_c = mu_c[i][j] + log_sigma_c[i][j].exp() * eps[i][j];
            let nested = mu[i][j] + log_sigma[i][j].exp() * z_c;
            let got = z.row(i)[j];
            assert!(
                (got - nested).abs() <= 1e-12 * nested.abs().max(1.0),
                "row {i} dim {j}: {got} vs {nested}"
            );
        }
    }
}

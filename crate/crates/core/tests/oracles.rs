//! Concept extraction and steering checked against plain nested loops.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use steerlab_core::activation::ActivationTensor;
use steerlab_core::concepts::{
    concept_delta, fit_normalization_stats, group_means, normalize, spatial_average,
};
use steerlab_core::steering::steer;
use steerlab_core::LayerId;

const SHAPE: [usize; 4] = [2, 3, 4, 5];
const EPS: f64 = 1e-6;

fn random_set(rng: &mut ChaCha8Rng, n: usize) -> Vec<ActivationTensor<f64>> {
    (0..n)
        .map(|i| {
            let data = Array4::from_shape_simple_fn(SHAPE, || rng.random_range(-2.0..2.0));
            ActivationTensor::new(data, LayerId(1), format!("s{i}"))
        })
        .collect()
}

fn flat(a: &ActivationTensor<f64>) -> Vec<f64> {
    a.data.iter().copied().collect()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + b.abs())
}

/// Per-position mean and population std.
fn oracle_stats(set: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = set.len() as f64;
    let len = set[0].len();
    let mut mean = vec![0.0; len];
    let mut std = vec![0.0; len];
    for i in 0..len {
        let mut s = 0.0;
        for x in set {
            s += x[i];
        }
        mean[i] = s / n;
        let mut v = 0.0;
        for x in set {
            v += (x[i] - mean[i]) * (x[i] - mean[i]);
        }
        std[i] = (v / n).sqrt();
    }
    (mean, std)
}

fn oracle_mean(set: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; set[0].len()];
    for x in set {
        for (o, v) in out.iter_mut().zip(x) {
            *o += v;
        }
    }
    out.iter().map(|v| v / set.len() as f64).collect()
}

#[test]
fn normalization_matches_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let set = random_set(&mut rng, 8);
        let stats = fit_normalization_stats(&set, EPS).unwrap();
        let raw: Vec<Vec<f64>> = set.iter().map(flat).collect();
        let (mean, std) = oracle_stats(&raw);
        for (i, (m, s)) in stats.mean.iter().zip(stats.std.iter()).enumerate() {
            assert!(close(*m, mean[i], 1e-6) && close(*s, std[i], 1e-6));
        }
        for (a, x) in set.iter().zip(&raw) {
            let n = flat(&normalize(a, &stats).unwrap());
            for i in 0..x.len() {
                assert!(close(n[i], (x[i] - mean[i]) / (std[i] + EPS), 1e-6));
            }
        }
    }
}

#[test]
fn group_means_delta_and_channel_average_match_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let f = random_set(&mut rng, 8);
        let nf = random_set(&mut rng, 8);
        let g = group_means(&f, &nf).unwrap();
        let mu = oracle_mean(&f.iter().map(flat).collect::<Vec<_>>());
        let nu = oracle_mean(&nf.iter().map(flat).collect::<Vec<_>>());
        let dir = spatial_average(&concept_delta(&g, "c")).unwrap();
        let full: Vec<f64> = dir.full.as_ref().unwrap().iter().copied().collect();
        for i in 0..mu.len() {
            assert!(close(g.mu.iter().nth(i).copied().unwrap(), mu[i], 1e-6));
            assert!(close(full[i], mu[i] - nu[i], 1e-6));
        }
        let [t, c, w, h] = SHAPE;
        let channel = dir.channel.as_ref().unwrap();
        for ci in 0..c {
            let mut s = 0.0;
            for ti in 0..t {
                for x in 0..w {
                    for y in 0..h {
                        let idx = ((ti * c + ci) * w + x) * h + y;
                        s += mu[idx] - nu[idx];
                    }
                }
            }
            assert!(close(channel[ci], s / (t * w * h) as f64, 1e-6));
        }
    }
}

#[test]
fn delta_is_exactly_antisymmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = random_set(&mut rng, 8);
    let nf = random_set(&mut rng, 8);
    let d1 = concept_delta(&group_means(&f, &nf).unwrap(), "c").full.unwrap();
    let d2 = concept_delta(&group_means(&nf, &f).unwrap(), "c").full.unwrap();
    assert_eq!(d1, d2.mapv(|v| -v));
}

#[test]
fn steer_matches_loop_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let a = &random_set(&mut rng, 1)[0];
        let d = &random_set(&mut rng, 1)[0];
        let alpha: f64 = rng.random_range(-2.0..2.0);
        let (x, dv) = (flat(a), flat(d));
        let aa: f64 = x.iter().map(|v| v * v).sum();
        let dd: f64 = dv.iter().map(|v| v * v).sum();
        let pre: Vec<f64> = x.iter().zip(&dv).map(|(a, d)| a + alpha * aa * d / dd).collect();
        let pn: f64 = pre.iter().map(|v| v * v).sum::<f64>().sqrt();
        let got = flat(&steer(a, &d.data, alpha).unwrap());
        for (g, p) in got.iter().zip(&pre) {
            assert!(close(*g, p * aa.sqrt() / pn, 1e-9));
        }
    }
}

//! Difference-of-means concept directions over captured activations.
//!
//! Activations are normalised per position `(t, c, w, h)` with statistics
//! fitted on both contrast groups together, averaged per group, and the
//! group difference is the concept direction. Averaging it over
//! `(t, w, h)` leaves a per-channel direction.

mod extract;
mod io;

pub use extract::{extract_activations, window_starts};
pub use io::{
    load_direction, load_group_stats, read_direction, read_group_stats, save_direction,
    save_group_stats, write_direction, write_group_stats, DIRECTION_MAGIC, STATS_MAGIC,
};

use ndarray::{Array1, Array4, Axis, Zip};
use sha2::{Digest, Sha256};

use crate::activation::{ActivationTensor, LayerId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Per-position mean and population standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizationStats<T> {
    pub mean: Array4<T>,
    pub std: Array4<T>,
    pub epsilon: f64,
    /// Description of the activation set the statistics were fitted on.
    pub source: String,
}

impl<T: Scalar> NormalizationStats<T> {
    pub fn shape(&self) -> [usize; 4] {
        let d = self.mean.dim();
        [d.0, d.1, d.2, d.3]
    }

    /// SHA-256 over shape, epsilon and the float32 values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for d in self.shape() {
            h.update((d as u64).to_le_bytes());
        }
        h.update(self.epsilon.to_le_bytes());
        for v in self.mean.iter().chain(self.std.iter()) {
            h.update(v.to_f32_lossy().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn check_same<T: Scalar>(expected: [usize; 4], a: &ActivationTensor<T>, what: &str) -> Result<()> {
    a.check_shape(expected, what)
}

/// Fits per-position statistics (two-pass, accumulated in f64).
pub fn fit_normalization_stats<T: Scalar>(
    acts: &[ActivationTensor<T>],
    epsilon: f64,
) -> Result<NormalizationStats<T>> {
    if acts.len() < 2 {
        return Err(Error::InsufficientData {
            what: "activation tensors for normalization statistics",
            got: acts.len(),
            need: 2,
        });
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidParams(format!("epsilon must be finite and >= 0, got {epsilon}")));
    }
    let shape = acts[0].shape();
    for a in acts {
        check_same(shape, a, "normalization statistics")?;
    }
    let n = acts.len() as f64;
    let mut sum = Array4::<f64>::zeros(acts[0].data.raw_dim());
    for a in acts {
        Zip::from(&mut sum).and(&a.data).for_each(|s, &v| *s += v.to_f64_lossy());
    }
    let mean = sum.mapv(|s| s / n);
    let mut sq = Array4::<f64>::zeros(mean.raw_dim());
    for a in acts {
        Zip::from(&mut sq)
            .and(&a.data)
            .and(&mean)
            .for_each(|s, &v, &m| *s += (v.to_f64_lossy() - m).powi(2));
    }
    Ok(NormalizationStats {
        mean: mean.mapv(T::lit),
        std: sq.mapv(|s| T::lit((s / n).sqrt())),
        epsilon,
        source: format!("{} activations at {}", acts.len(), acts[0].layer),
    })
}

/// `(a − mean) / (std + epsilon)`, elementwise.
pub fn normalize<T: Scalar>(
    a: &ActivationTensor<T>,
    stats: &NormalizationStats<T>,
) -> Result<ActivationTensor<T>> {
    check_same(stats.shape(), a, "normalize")?;
    let eps = T::lit(stats.epsilon);
    let mut out = a.data.clone();
    Zip::from(&mut out)
        .and(&stats.mean)
        .and(&stats.std)
        .for_each(|v, &m, &s| *v = (*v - m) / (s + eps));
    Ok(a.with_data(out))
}

/// Inverse of [`normalize`].
pub fn denormalize<T: Scalar>(
    a: &ActivationTensor<T>,
    stats: &NormalizationStats<T>,
) -> Result<ActivationTensor<T>> {
    check_same(stats.shape(), a, "denormalize")?;
    let eps = T::lit(stats.epsilon);
    let mut out = a.data.clone();
    Zip::from(&mut out)
        .and(&stats.mean)
        .and(&stats.std)
        .for_each(|v, &m, &s| *v = *v * (s + eps) + m);
    Ok(a.with_data(out))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupStatistics<T> {
    pub mu: Array4<T>,
    pub nu: Array4<T>,
    pub count_f: usize,
    pub count_not_f: usize,
    pub layer: LayerId,
}

fn mean_of<T: Scalar>(group: &[ActivationTensor<T>], shape: [usize; 4], what: &str) -> Result<Array4<T>> {
    let mut sum = Array4::<f64>::zeros(shape);
    for a in group {
        check_same(shape, a, what)?;
        Zip::from(&mut sum).and(&a.data).for_each(|s, &v| *s += v.to_f64_lossy());
    }
    let n = group.len() as f64;
    Ok(sum.mapv(|s| T::lit(s / n)))
}

/// Elementwise means of each (already normalised) group.
pub fn group_means<T: Scalar>(
    group_f: &[ActivationTensor<T>],
    group_not_f: &[ActivationTensor<T>],
) -> Result<GroupStatistics<T>> {
    for (g, what) in [(group_f, "concept group"), (group_not_f, "contrast group")] {
        if g.is_empty() {
            return Err(Error::InsufficientData { what, got: 0, need: 1 });
        }
    }
    let shape = group_f[0].shape();
    Ok(GroupStatistics {
        mu: mean_of(group_f, shape, "concept group")?,
        nu: mean_of(group_not_f, shape, "contrast group")?,
        count_f: group_f.len(),
        count_not_f: group_not_f.len(),
        layer: group_f[0].layer,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptDirection<T> {
    pub name: String,
    /// `[T, C, W, H]`.
    pub full: Option<Array4<T>>,
    /// `[C]`.
    pub channel: Option<Array1<T>>,
    /// Hash of the normalization statistics used.
    pub stats_ref: String,
    pub layer: LayerId,
}

impl<T: Scalar> ConceptDirection<T> {
    pub fn channels(&self) -> Option<usize> {
        self.full
            .as_ref()
            .map(|f| f.dim().1)
            .or(self.channel.as_ref().map(|c| c.len()))
    }

    /// The channel direction, averaging `full` if it was not stored.
    pub fn channel_or_average(&self) -> Result<Array1<T>> {
        match (&self.channel, &self.full) {
            (Some(c), _) => Ok(c.clone()),
            (None, Some(f)) => Ok(channel_mean(f)),
            (None, None) => Err(Error::MissingFullDirection(self.name.clone())),
        }
    }

    pub fn content_hash(&self) -> String {
        let mut buf = Vec::new();
        write_direction(&mut buf, self).expect("in-memory write");
        hex::encode(Sha256::digest(&buf))
    }
}

/// `μ − ν`. The channel direction is left for [`spatial_average`].
pub fn concept_delta<T: Scalar>(stats: &GroupStatistics<T>, name: &str) -> ConceptDirection<T> {
    ConceptDirection {
        name: name.to_string(),
        full: Some(&stats.mu - &stats.nu),
        channel: None,
        stats_ref: String::new(),
        layer: stats.layer,
    }
}

fn channel_mean<T: Scalar>(full: &Array4<T>) -> Array1<T> {
    let (t, c, w, h) = full.dim();
    let count = (t * w * h) as f64;
    let mut out = Array1::zeros(c);
    for (ci, o) in out.iter_mut().enumerate() {
        let s: f64 = full
            .index_axis(Axis(1), ci)
            .iter()
            .map(|v| v.to_f64_lossy())
            .sum();
        *o = T::lit(s / count);
    }
    out
}

/// Mean over `(t, w, h)` per channel; keeps `full`.
pub fn spatial_average<T: Scalar>(dir: &ConceptDirection<T>) -> Result<ConceptDirection<T>> {
    let full = dir
        .full
        .as_ref()
        .ok_or_else(|| Error::MissingFullDirection(dir.name.clone()))?;
    Ok(ConceptDirection {
        channel: Some(channel_mean(full)),
        ..dir.clone()
    })
}

/// Scalar projection of a normalised activation onto a direction.
pub fn projection<T: Scalar>(a: &ActivationTensor<T>, full: &Array4<T>) -> Result<f64> {
    check_same([full.dim().0, full.dim().1, full.dim().2, full.dim().3], a, "projection")?;
    let mut dot = 0.0;
    let mut nn = 0.0;
    Zip::from(&a.data).and(full).for_each(|&x, &d| {
        let d = d.to_f64_lossy();
        dot += x.to_f64_lossy() * d;
        nn += d * d;
    });
    if nn == 0.0 {
        return Err(Error::ZeroDirection { alpha: 0.0 });
    }
    Ok(dot / nn.sqrt())
}

/// Probability that a random positive outscores a random negative (ties
/// count half).
pub fn separation_auc(positive: &[f64], negative: &[f64]) -> Option<f64> {
    if positive.is_empty() || negative.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for p in positive {
        for n in negative {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (positive.len() * negative.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn act(data: Array4<f64>) -> ActivationTensor<f64> {
        ActivationTensor::new(data, LayerId(1), "test")
    }

    fn random(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> ActivationTensor<f64> {
        act(Array::from_shape_simple_fn(shape, || rng.random_range(-3.0..3.0)))
    }

    #[test]
    fn two_values_give_mean_and_std() {
        let a = act(Array4::from_elem([1, 2, 1, 1], 1.0));
        let b = act(Array4::from_elem([1, 2, 1, 1], 3.0));
        let s = fit_normalization_stats(&[a, b], 1e-6).unwrap();
        assert!(s.mean.iter().all(|&m| m == 2.0));
        assert!(s.std.iter().all(|&d| d == 1.0));
    }

    #[test]
    fn identical_inputs_have_zero_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, [2, 3, 2, 2]);
        let s = fit_normalization_stats(&[a.clone(), a.clone()], 0.5).unwrap();
        assert!(s.std.iter().all(|&d| d == 0.0));
        let z = normalize(&a, &s).unwrap();
        assert!(z.data.iter().all(|&v| v == 0.0));
        let shifted = a.with_data(&a.data + 1.0);
        let z = normalize(&shifted, &s).unwrap();
        assert!(z.data.iter().all(|&v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn too_few_or_mismatched_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, [2, 3, 2, 2]);
        let b = random(&mut rng, [2, 3, 2, 3]);
        assert!(matches!(
            fit_normalization_stats(&[a.clone()], 1e-6),
            Err(Error::InsufficientData { got: 1, .. })
        ));
        assert!(matches!(
            fit_normalization_stats(&[a.clone(), b.clone()], 1e-6),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(group_means(&[a.clone()], &[]), Err(Error::InsufficientData { .. })));
        assert!(matches!(group_means(&[a], &[b]), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn unit_stats_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, [2, 2, 3, 2]);
        let s = NormalizationStats {
            mean: Array4::zeros([2, 2, 3, 2]),
            std: Array4::ones([2, 2, 3, 2]),
            epsilon: 0.0,
            source: String::new(),
        };
        assert_eq!(normalize(&a, &s).unwrap(), a);
    }

    #[test]
    fn singleton_groups_and_negation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&mut rng, [1, 2, 2, 2]);
        let b = random(&mut rng, [1, 2, 2, 2]);
        let g = group_means(&[a.clone()], &[b.clone()]).unwrap();
        assert_eq!(g.mu, a.data);
        assert_eq!(g.nu, b.data);
        let neg = a.with_data(-&a.data);
        let g = group_means(&[a, neg], &[b]).unwrap();
        assert!(g.mu.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn equal_groups_give_zero_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&mut rng, [1, 2, 2, 2]);
        let g = group_means(&[a.clone()], &[a]).unwrap();
        let d = concept_delta(&g, "none");
        assert!(d.full.unwrap().iter().all(|&v| v == 0.0));
        assert!(d.channel.is_none());
    }

    #[test]
    fn spatial_average_special_cases() {
        let v = [0.5, -2.0, 3.0];
        let full = Array4::from_shape_fn([2, 3, 4, 2], |(_, c, _, _)| v[c]);
        let d = ConceptDirection {
            name: "c".into(),
            full: Some(full),
            channel: None,
            stats_ref: String::new(),
            layer: LayerId(0),
        };
        let avg = spatial_average(&d).unwrap();
        assert_eq!(avg.channel.unwrap().to_vec(), v.to_vec());

        let alternating = Array4::from_shape_fn([2, 3, 4, 2], |(t, c, w, h)| {
            if (t + w + h) % 2 == 0 { c as f64 + 1.0 } else { -(c as f64) - 1.0 }
        });
        let d = ConceptDirection { full: Some(alternating), ..d };
        assert!(spatial_average(&d).unwrap().channel.unwrap().iter().all(|&x| x == 0.0));

        let empty = ConceptDirection { full: None, ..d };
        assert!(matches!(spatial_average(&empty), Err(Error::MissingFullDirection(_))));
    }

    #[test]
    fn auc_extremes() {
        assert_eq!(separation_auc(&[2.0, 3.0], &[0.0, 1.0]), Some(1.0));
        assert_eq!(separation_auc(&[0.0], &[1.0]), Some(0.0));
        assert_eq!(separation_auc(&[1.0], &[1.0]), Some(0.5));
        assert_eq!(separation_auc(&[], &[1.0]), None);
    }

    fn arb_tensor(shape: [usize; 4]) -> impl Strategy<Value = Array4<f64>> {
        let n: usize = shape.iter().product();
        proptest::collection::vec(-100.0f64..100.0, n)
            .prop_map(move |v| Array4::from_shape_vec(shape, v).unwrap())
    }

    fn dir(full: Array4<f64>) -> ConceptDirection<f64> {
        ConceptDirection {
            name: "p".into(),
            full: Some(full),
            channel: None,
            stats_ref: String::new(),
            layer: LayerId(0),
        }
    }

    proptest! {
        #[test]
        fn delta_is_antisymmetric(
            f in proptest::collection::vec(arb_tensor([2, 3, 2, 2]), 1..4),
            g in proptest::collection::vec(arb_tensor([2, 3, 2, 2]), 1..4),
        ) {
            let f: Vec<_> = f.into_iter().map(act).collect();
            let g: Vec<_> = g.into_iter().map(act).collect();
            let d = concept_delta(&group_means(&f, &g).unwrap(), "x").full.unwrap();
            let r = concept_delta(&group_means(&g, &f).unwrap(), "x").full.unwrap();
            prop_assert_eq!(d, -r);
        }

        #[test]
        fn spatial_average_is_linear(
            x in arb_tensor([2, 3, 3, 2]),
            y in arb_tensor([2, 3, 3, 2]),
            c in -5.0f64..5.0,
        ) {
            let ax = spatial_average(&dir(x.clone())).unwrap().channel.unwrap();
            let ay = spatial_average(&dir(y.clone())).unwrap().channel.unwrap();
            let sum = spatial_average(&dir(&x + &y)).unwrap().channel.unwrap();
            let scaled = spatial_average(&dir(&x * c)).unwrap().channel.unwrap();
            for k in 0..3 {
                let tol = 1e-6 * (1.0 + ax[k].abs() + ay[k].abs());
                prop_assert!((sum[k] - ax[k] - ay[k]).abs() <= tol);
                prop_assert!((scaled[k] - c * ax[k]).abs() <= 1e-6 * (1.0 + (c * ax[k]).abs()));
            }
        }

        #[test]
        fn denormalize_inverts_normalize(
            samples in proptest::collection::vec(arb_tensor([1, 2, 2, 2]), 2..6),
            probe in arb_tensor([1, 2, 2, 2]),
        ) {
            let acts: Vec<_> = samples.into_iter().map(act).collect();
            let stats = fit_normalization_stats(&acts, 1e-9).unwrap();
            prop_assume!(stats.std.iter().all(|&s| s > 1e-2));
            let a = act(probe);
            let back = denormalize(&normalize(&a, &stats).unwrap(), &stats).unwrap();
            for (x, y) in a.data.iter().zip(back.data.iter()) {
                prop_assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0));
            }
        }
    }
}

//! Injecting concept directions into the residual stream during rollouts.

mod align;
mod rollout;

pub use align::{align_spatial, broadcast_channel, Align};
pub use rollout::{rollout, RolloutResult, SteeringInjector, SteeringRecord};

use ndarray::{Array4, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::activation::{ActivationTensor, LayerId};
use crate::concepts::ConceptDirection;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_ALPHA_LIMIT: f64 = 10.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Use the full `[T, C, W, H]` direction.
    #[default]
    FullSpatial,
    /// Broadcast the per-channel direction over `(t, w, h)`.
    ChannelBroadcast,
}

/// Which norms the injection uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Renorm {
    /// One norm over the whole tensor.
    #[default]
    Global,
    /// Norms over channels, separately for every token `(t, w, h)`.
    PerToken,
}

fn sq_norm<'a, T: Scalar>(it: impl IntoIterator<Item = &'a T>) -> f64 {
    it.into_iter().map(|v| v.to_f64_lossy().powi(2)).sum()
}

fn check_pair<T: Scalar>(a: &ActivationTensor<T>, delta: &Array4<T>) -> Result<()> {
    let d = delta.dim();
    a.check_shape([d.0, d.1, d.2, d.3], "steering direction")
}

/// `a + α‖a‖²Δ/‖Δ‖²` before renormalisation, global norms.
pub fn steer_pre<T: Scalar>(a: &ActivationTensor<T>, delta: &Array4<T>, alpha: f64) -> Result<Array4<T>> {
    check_pair(a, delta)?;
    let dd = sq_norm(delta);
    if dd == 0.0 {
        return Err(Error::ZeroDirection { alpha });
    }
    let coef = T::lit(alpha * sq_norm(&a.data) / dd);
    let mut out = a.data.clone();
    Zip::from(&mut out).and(delta).for_each(|o, &d| *o += coef * d);
    Ok(out)
}

/// Shifts `a` along `delta` by `α` in units of `‖a‖`, then rescales the
/// result back to `‖a‖`.
pub fn steer<T: Scalar>(a: &ActivationTensor<T>, delta: &Array4<T>, alpha: f64) -> Result<ActivationTensor<T>> {
    check_pair(a, delta)?;
    if alpha == 0.0 {
        return Ok(a.clone());
    }
    let mut out = steer_pre(a, delta, alpha)?;
    let target = sq_norm(&a.data).sqrt();
    let got = sq_norm(&out).sqrt();
    if got > 0.0 {
        let k = T::lit(target / got);
        out.mapv_inplace(|v| v * k);
    }
    Ok(a.with_data(out))
}

/// Like [`steer`] but with norms over channels per token. Tokens where the
/// direction vanishes are left untouched.
pub fn steer_per_token<T: Scalar>(
    a: &ActivationTensor<T>,
    delta: &Array4<T>,
    alpha: f64,
) -> Result<ActivationTensor<T>> {
    check_pair(a, delta)?;
    if alpha == 0.0 {
        return Ok(a.clone());
    }
    if sq_norm(delta) == 0.0 {
        return Err(Error::ZeroDirection { alpha });
    }
    let mut out = a.data.clone();
    for (mut ot, dt) in out.axis_iter_mut(Axis(0)).zip(delta.axis_iter(Axis(0))) {
        let (_, w, h) = ot.dim();
        for x in 0..w {
            for y in 0..h {
                let mut tok = ot.slice_mut(ndarray::s![.., x, y]);
                let d = dt.slice(ndarray::s![.., x, y]);
                let dd = sq_norm(d.iter());
                if dd == 0.0 {
                    continue;
                }
                let aa = sq_norm(tok.iter());
                let coef = T::lit(alpha * aa / dd);
                Zip::from(&mut tok).and(&d).for_each(|o, &dv| *o += coef * dv);
                let got = sq_norm(tok.iter()).sqrt();
                if got > 0.0 {
                    let k = T::lit(aa.sqrt() / got);
                    tok.mapv_inplace(|v| v * k);
                }
            }
        }
    }
    Ok(a.with_data(out))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SteeringConfig<T> {
    pub direction: ConceptDirection<T>,
    pub alpha: f64,
    pub layer: LayerId,
    pub mode: Mode,
    pub align: Align,
    pub renorm: Renorm,
    /// Largest accepted `|α|`.
    pub alpha_limit: f64,
}

impl<T: Scalar> SteeringConfig<T> {
    pub fn new(direction: ConceptDirection<T>, alpha: f64, mode: Mode) -> Self {
        Self {
            layer: direction.layer,
            direction,
            alpha,
            mode,
            align: Align::None,
            renorm: Renorm::Global,
            alpha_limit: DEFAULT_ALPHA_LIMIT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() {
            return Err(Error::InvalidSteering(format!("alpha {} is not finite", self.alpha)));
        }
        if self.alpha.abs() > self.alpha_limit {
            return Err(Error::InvalidSteering(format!(
                "|alpha| = {} exceeds the limit {}; raise alpha_limit to override",
                self.alpha.abs(),
                self.alpha_limit
            )));
        }
        match self.mode {
            Mode::FullSpatial if self.direction.full.is_none() => {
                Err(Error::MissingFullDirection(self.direction.name.clone()))
            }
            Mode::ChannelBroadcast if self.direction.full.is_none() && self.direction.channel.is_none() => {
                Err(Error::MissingFullDirection(self.direction.name.clone()))
            }
            _ => Ok(()),
        }
    }

    /// The direction as a tensor of `target` shape.
    pub fn resolve(&self, target: [usize; 4]) -> Result<Array4<T>> {
        self.validate()?;
        match self.mode {
            Mode::FullSpatial => {
                align_spatial(self.direction.full.as_ref().expect("validated"), target, self.align)
            }
            Mode::ChannelBroadcast => broadcast_channel(&self.direction.channel_or_average()?, target),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array};
    use proptest::prelude::*;

    fn act(v: Array4<f64>) -> ActivationTensor<f64> {
        ActivationTensor::new(v, LayerId(0), "")
    }

    #[test]
    fn two_element_example() {
        let a = act(Array::from_shape_vec([1, 2, 1, 1], vec![3.0, 4.0]).unwrap());
        let d = Array::from_shape_vec([1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
        let pre = steer_pre(&a, &d, 0.1).unwrap();
        assert_eq!(pre.iter().copied().collect::<Vec<_>>(), vec![5.5, 4.0]);
        let s = steer(&a, &d, 0.1).unwrap();
        let k = 5.0 / (5.5f64.powi(2) + 16.0).sqrt();
        assert!((s.data[[0, 0, 0, 0]] - 5.5 * k).abs() < 1e-12);
        assert!((s.data[[0, 1, 0, 0]] - 4.0 * k).abs() < 1e-12);
        assert!((s.data[[0, 0, 0, 0]] - 4.0437).abs() < 1e-4);
        assert!((s.data[[0, 1, 0, 0]] - 2.9409).abs() < 1e-4);
    }

    #[test]
    fn zero_direction_and_shape_errors() {
        let a = act(Array4::ones([1, 2, 2, 2]));
        let z = Array4::zeros([1, 2, 2, 2]);
        assert!(matches!(steer(&a, &z, 0.5), Err(Error::ZeroDirection { .. })));
        assert_eq!(steer(&a, &z, 0.0).unwrap(), a);
        assert!(matches!(
            steer(&a, &Array4::ones([1, 2, 2, 3]), 0.5),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn per_token_preserves_token_norms() {
        let a = act(Array::from_shape_fn([2, 3, 2, 2], |(t, c, w, h)| {
            (t + 2 * c + 3 * w + h) as f64 * 0.37 - 1.0
        }));
        let d = Array::from_shape_fn([2, 3, 2, 2], |(_, c, _, _)| c as f64 - 0.5);
        let s = steer_per_token(&a, &d, 0.7).unwrap();
        for t in 0..2 {
            for w in 0..2 {
                for h in 0..2 {
                    let n0 = sq_norm(a.data.slice(ndarray::s![t, .., w, h]).iter());
                    let n1 = sq_norm(s.data.slice(ndarray::s![t, .., w, h]).iter());
                    assert!((n0 - n1).abs() < 1e-10 * n0.max(1.0));
                }
            }
        }
        assert_ne!(s, a);
    }

    #[test]
    fn alpha_guard() {
        let dir = ConceptDirection {
            name: "v".into(),
            full: None,
            channel: Some(arr1(&[1.0f64, 0.0])),
            stats_ref: String::new(),
            layer: LayerId(1),
        };
        let mut cfg = SteeringConfig::new(dir, 11.0, Mode::ChannelBroadcast);
        assert!(matches!(cfg.validate(), Err(Error::InvalidSteering(_))));
        cfg.alpha_limit = 20.0;
        cfg.validate().unwrap();
        cfg.alpha = f64::NAN;
        assert!(cfg.validate().is_err());
        cfg.alpha = 1.0;
        cfg.mode = Mode::FullSpatial;
        assert!(matches!(cfg.validate(), Err(Error::MissingFullDirection(_))));
    }

    fn arb_pair() -> impl Strategy<Value = (Array4<f64>, Array4<f64>)> {
        let v = proptest::collection::vec(-10.0f64..10.0, 24);
        (v.clone(), v).prop_map(|(a, d)| {
            (
                Array::from_shape_vec([2, 3, 2, 2], a).unwrap(),
                Array::from_shape_vec([2, 3, 2, 2], d).unwrap(),
            )
        })
    }

    proptest! {
        #[test]
        fn norm_is_preserved((a, d) in arb_pair(), alpha in -10.0f64..10.0) {
            prop_assume!(sq_norm(&d) > 1e-6 && sq_norm(&a) > 1e-6);
            let a = act(a);
            let s = steer(&a, &d, alpha).unwrap();
            let r = (sq_norm(&s.data) / sq_norm(&a.data)).sqrt();
            prop_assert!((r - 1.0).abs() <= 1e-5);
        }

        #[test]
        fn zero_alpha_is_identity((a, d) in arb_pair()) {
            let a = act(a);
            prop_assert_eq!(steer(&a, &d, 0.0).unwrap(), a);
        }

        #[test]
        fn pre_perturbation_is_antisymmetric((a, d) in arb_pair(), alpha in -5.0f64..5.0) {
            prop_assume!(sq_norm(&d) > 1e-6);
            let a = act(a);
            let up = &steer_pre(&a, &d, alpha).unwrap() - &a.data;
            let down = &steer_pre(&a, &d, -alpha).unwrap() - &a.data;
            for (u, v) in up.iter().zip(down.iter()) {
                prop_assert!((u + v).abs() <= 1e-12 * (1.0 + u.abs()));
            }
        }

        #[test]
        fn direction_scale_trades_against_alpha(
            (a, d) in arb_pair(),
            alpha in -3.0f64..3.0,
            c in prop::sample::select(vec![0.5, 2.0, 10.0]),
        ) {
            prop_assume!(sq_norm(&d) > 1e-6 && sq_norm(&a) > 1e-6);
            let a = act(a);
            let x = steer(&a, &(&d * c), alpha).unwrap();
            let y = steer(&a, &d, alpha / c).unwrap();
            let scale = sq_norm(&a.data).sqrt();
            for (u, v) in x.data.iter().zip(y.data.iter()) {
                prop_assert!((u - v).abs() <= 1e-6 * scale);
            }
        }

        #[test]
        fn collinear_direction_changes_nothing(a in proptest::collection::vec(-10.0f64..10.0, 24), alpha in -0.9f64..5.0) {
            let a = act(Array::from_shape_vec([2, 3, 2, 2], a).unwrap());
            prop_assume!(sq_norm(&a.data) > 1e-6);
            let s = steer(&a, &a.data, alpha).unwrap();
            for (u, v) in s.data.iter().zip(a.data.iter()) {
                prop_assert!((u - v).abs() <= 1e-6 * (1.0 + v.abs()));
            }
        }
    }
}

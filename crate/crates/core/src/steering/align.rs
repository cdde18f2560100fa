use ndarray::{Array1, Array4, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// How to reconcile a direction whose `T`, `W` or `H` differ from the
/// target by one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Align {
    /// Shapes must match exactly.
    #[default]
    None,
    /// Zero-pad or crop the trailing plane.
    Pad,
    /// Linear resampling with aligned end points.
    Interpolate,
}

fn dims<T>(a: &Array4<T>) -> [usize; 4] {
    let d = a.dim();
    [d.0, d.1, d.2, d.3]
}

/// 1-D linear resampling of `src` to `m` points, end points aligned.
pub(crate) fn resample<T: Scalar>(src: ArrayView1<T>, m: usize) -> Array1<T> {
    let n = src.len();
    Array1::from_shape_fn(m, |i| {
        if n == 1 || m == 1 {
            return src[0];
        }
        let x = i as f64 * (n - 1) as f64 / (m - 1) as f64;
        let lo = (x.floor() as usize).min(n - 2);
        let f = x - lo as f64;
        let (a, b) = (src[lo].to_f64_lossy(), src[lo + 1].to_f64_lossy());
        T::lit(a + (b - a) * f)
    })
}

fn resample_axis<T: Scalar>(a: &Array4<T>, axis: usize, m: usize) -> Array4<T> {
    let mut shape = dims(a);
    shape[axis] = m;
    let mut out = Array4::zeros(shape);
    for (src, mut dst) in a.lanes(Axis(axis)).into_iter().zip(out.lanes_mut(Axis(axis))) {
        dst.assign(&resample(src, m));
    }
    out
}

/// Brings `dir` (`[T, C, W, H]`) to `target`.
pub fn align_spatial<T: Scalar>(dir: &Array4<T>, target: [usize; 4], align: Align) -> Result<Array4<T>> {
    let from = dims(dir);
    if from == target {
        return Ok(dir.clone());
    }
    let fail = |reason: &str| Error::IncompatibleShapes {
        from: from.to_vec(),
        to: target.to_vec(),
        reason: reason.to_string(),
    };
    if from[1] != target[1] {
        return Err(fail("channel counts differ"));
    }
    if align == Align::None {
        return Err(fail("shapes differ and no alignment was requested"));
    }
    if from.iter().zip(&target).any(|(a, b)| a.abs_diff(*b) > 1) {
        return Err(fail("a dimension differs by more than one"));
    }
    match align {
        Align::Pad => {
            let mut out = Array4::zeros(target);
            let common: Vec<usize> = from.iter().zip(&target).map(|(a, b)| *a.min(b)).collect();
            let sl = ndarray::s![..common[0], ..common[1], ..common[2], ..common[3]];
            out.slice_mut(sl).assign(&dir.slice(sl));
            Ok(out)
        }
        Align::Interpolate => {
            let mut out = dir.clone();
            for axis in [0, 2, 3] {
                if from[axis] != target[axis] {
                    out = resample_axis(&out, axis, target[axis]);
                }
            }
            Ok(out)
        }
        Align::None => unreachable!(),
    }
}

/// `out[t, c, w, h] = channel[c]`.
pub fn broadcast_channel<T: Scalar>(channel: &Array1<T>, target: [usize; 4]) -> Result<Array4<T>> {
    if channel.len() != target[1] {
        return Err(Error::ChannelMismatch {
            expected: target[1],
            found: channel.len(),
        });
    }
    Ok(Array4::from_shape_fn(target, |(_, c, _, _)| channel[c]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn ramp(shape: [usize; 4]) -> Array4<f64> {
        Array4::from_shape_fn(shape, |(t, c, w, h)| (t * 1000 + c * 100 + w * 10 + h) as f64 + 1.0)
    }

    #[test]
    fn matching_shape_is_identity() {
        let a = ramp([2, 3, 4, 4]);
        for al in [Align::None, Align::Pad, Align::Interpolate] {
            assert_eq!(align_spatial(&a, [2, 3, 4, 4], al).unwrap(), a);
        }
    }

    #[test]
    fn pad_adds_zero_plane_and_crop_drops_it() {
        let a = ramp([4, 2, 8, 8]);
        let p = align_spatial(&a, [4, 2, 8, 9], Align::Pad).unwrap();
        assert!(p.slice(ndarray::s![.., .., .., 8]).iter().all(|&v| v == 0.0));
        assert_eq!(p.slice(ndarray::s![.., .., .., ..8]), a);
        let c = align_spatial(&p, [4, 2, 8, 8], Align::Pad).unwrap();
        assert_eq!(c, a);
    }

    #[test]
    fn gaps_and_channels_rejected() {
        let a = ramp([4, 2, 8, 8]);
        for (target, al) in [
            ([4, 2, 8, 10], Align::Pad),
            ([4, 3, 8, 8], Align::Interpolate),
            ([4, 2, 8, 9], Align::None),
        ] {
            assert!(matches!(align_spatial(&a, target, al), Err(Error::IncompatibleShapes { .. })));
        }
    }

    #[test]
    fn resample_end_points_and_midpoint() {
        let r = resample(arr1(&[0.0, 2.0, 4.0]).view(), 5);
        assert_eq!(r.to_vec(), vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        let r = resample(arr1(&[1.0, 3.0]).view(), 3);
        assert_eq!(r.to_vec(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn broadcast_cases() {
        let z = broadcast_channel(&Array1::<f64>::zeros(3), [2, 3, 2, 2]).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        let one_hot = broadcast_channel(&arr1(&[0.0, 1.0, 0.0]), [2, 3, 2, 2]).unwrap();
        for ((_, c, _, _), &v) in one_hot.indexed_iter() {
            assert_eq!(v != 0.0, c == 1);
        }
        assert!(matches!(
            broadcast_channel(&arr1(&[1.0]), [1, 2, 1, 1]),
            Err(Error::ChannelMismatch { expected: 2, found: 1 })
        ));
    }
}

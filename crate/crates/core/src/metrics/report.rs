use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{time_to_threshold, Metric, MetricSeries};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::steering::RolloutResult;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    /// Frame at which the sign pattern is judged; the last frame if unset.
    pub eval_frame: Option<usize>,
    /// If set, time-to-threshold is reported per α.
    pub threshold: Option<f64>,
}

/// Ordering of the metric at α > 0, α = 0 and α < 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// Every positive α above baseline, every negative α below.
    Increasing,
    /// Every positive α below baseline, every negative α above.
    Decreasing,
    /// All rollouts equal.
    NoEffect,
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub series: MetricSeries,
    pub at_eval: f64,
    /// L2 distance of the final frame from the α = 0 rollout.
    pub l2_from_baseline: f64,
    pub time_to_threshold: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteeringReport {
    pub concept: String,
    pub metric: Metric,
    pub alpha_grid: Vec<f64>,
    pub eval_frame: usize,
    pub threshold: Option<f64>,
    pub rows: Vec<AlphaRow>,
    pub verdict: Verdict,
    /// Metric at the evaluation frame is non-decreasing in α.
    pub monotone_nondecreasing: bool,
    /// Spread of the metric over the grid at the evaluation frame.
    pub spread: f64,
    /// `(m(α_max) − m(α_min)) / |m(0)|`.
    pub relative_separation: f64,
    pub spearman: Option<f64>,
    /// Rank correlation between α and the metric at every frame.
    pub spearman_per_frame: Vec<Option<f64>>,
    /// Final-frame L2 distance is non-decreasing in |α|.
    pub l2_monotone_in_abs_alpha: bool,
    pub baseline_hash: String,
}

impl SteeringReport {
    pub fn row(&self, alpha: f64) -> Option<&AlphaRow> {
        self.rows.iter().find(|r| r.alpha == alpha)
    }

    pub fn baseline(&self) -> &AlphaRow {
        self.row(0.0).expect("grid contains 0")
    }

    /// Stable key/value text with a table per α.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| format!("{x:.9e}"));
        let _ = writeln!(s, "concept: {}", self.concept);
        let _ = writeln!(s, "metric: {}", self.metric);
        let grid: Vec<String> = self.alpha_grid.iter().map(|a| format!("{a}")).collect();
        let _ = writeln!(s, "alpha_grid: [{}]", grid.join(", "));
        let _ = writeln!(s, "eval_frame: {}", self.eval_frame);
        let _ = writeln!(s, "threshold: {}", opt(self.threshold));
        let _ = writeln!(s, "baseline_hash: {}", self.baseline_hash);
        let _ = writeln!(s, "verdict: {}", serde_json::to_value(self.verdict).unwrap().as_str().unwrap());
        let _ = writeln!(s, "monotone_nondecreasing: {}", self.monotone_nondecreasing);
        let _ = writeln!(s, "spread: {:.9e}", self.spread);
        let _ = writeln!(s, "relative_separation: {:.9e}", self.relative_separation);
        let _ = writeln!(s, "spearman: {}", opt(self.spearman));
        let _ = writeln!(s, "l2_monotone_in_abs_alpha: {}", self.l2_monotone_in_abs_alpha);
        let _ = writeln!(s);
        let _ = writeln!(s, "alpha\tat_eval\tfinal\tl2_from_baseline\ttime_to_threshold");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{:.9e}\t{}\t{:.9e}\t{}",
                r.alpha,
                r.at_eval,
                opt(r.series.last()),
                r.l2_from_baseline,
                r.time_to_threshold.map_or("none".into(), |t| t.to_string())
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "frame\tspearman\t{}", grid.iter().map(|a| format!("a={a}")).collect::<Vec<_>>().join("\t"));
        for (k, rho) in self.spearman_per_frame.iter().enumerate() {
            let vals: Vec<String> = self.rows.iter().map(|r| format!("{:.9e}", r.series.values[k])).collect();
            let _ = writeln!(s, "{k}\t{}\t{}", opt(*rho), vals.join("\t"));
        }
        s
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties; `None` when
/// either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

fn final_l2<T: Scalar>(a: &RolloutResult<T>, b: &RolloutResult<T>) -> f64 {
    let n = a.len();
    if n == 0 {
        return 0.0;
    }
    let (fa, fb) = (a.trajectory.frame(n - 1), b.trajectory.frame(n - 1));
    fa.iter()
        .zip(fb.iter())
        .map(|(x, y)| (x.to_f64_lossy() - y.to_f64_lossy()).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Compares a metric across an α sweep of rollouts from a common start.
pub fn steering_report<T: Scalar>(
    rollouts: &[(f64, RolloutResult<T>)],
    concept: &str,
    metric: &Metric,
    opts: &ReportOptions,
) -> Result<SteeringReport> {
    let inconsistent = |m: String| Err(Error::InconsistentRollouts(m));
    let Some((_, base)) = rollouts.iter().find(|(a, _)| *a == 0.0) else {
        return inconsistent("alpha grid has no 0 (unsteered) entry".into());
    };
    if base.steering.as_ref().is_some_and(|s| s.alpha != 0.0) {
        return inconsistent("alpha 0 entry is steered".into());
    }
    let mut sorted: Vec<&(f64, RolloutResult<T>)> = rollouts.iter().collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    for w in sorted.windows(2) {
        if w[0].0 == w[1].0 {
            return inconsistent(format!("alpha {} appears twice", w[0].0));
        }
    }
    for (a, r) in &sorted {
        if !a.is_finite() {
            return inconsistent(format!("alpha {a} is not finite"));
        }
        let same = r.len() == base.len()
            && r.trajectory.grid() == base.trajectory.grid()
            && r.trajectory.field_names() == base.trajectory.field_names()
            && r.trajectory.params == base.trajectory.params
            && r.trajectory.seed == base.trajectory.seed;
        if !same {
            return inconsistent(format!("rollout for alpha {a} differs in length, grid, fields or origin"));
        }
    }
    let n = base.len();
    if n == 0 {
        return inconsistent("rollouts are empty".into());
    }
    let eval_frame = opts.eval_frame.unwrap_or(n - 1);
    if eval_frame >= n {
        return inconsistent(format!("eval frame {eval_frame} beyond rollout length {n}"));
    }

    let mut rows = Vec::with_capacity(sorted.len());
    for (alpha, r) in &sorted {
        let series = metric.compute(&r.trajectory)?;
        rows.push(AlphaRow {
            alpha: *alpha,
            at_eval: series.values[eval_frame],
            l2_from_baseline: final_l2(r, base),
            time_to_threshold: opts.threshold.map(|t| time_to_threshold(&series, t)).flatten(),
            series,
        });
    }
    let alphas: Vec<f64> = rows.iter().map(|r| r.alpha).collect();
    let vals: Vec<f64> = rows.iter().map(|r| r.at_eval).collect();
    let b = rows.iter().find(|r| r.alpha == 0.0).expect("checked").at_eval;
    let pos: Vec<f64> = rows.iter().filter(|r| r.alpha > 0.0).map(|r| r.at_eval).collect();
    let neg: Vec<f64> = rows.iter().filter(|r| r.alpha < 0.0).map(|r| r.at_eval).collect();
    let spread = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let identical = rows.iter().all(|r| r.series.values == rows[0].series.values);
    let verdict = if identical {
        Verdict::NoEffect
    } else if pos.iter().all(|&v| v > b) && neg.iter().all(|&v| v < b) {
        Verdict::Increasing
    } else if pos.iter().all(|&v| v < b) && neg.iter().all(|&v| v > b) {
        Verdict::Decreasing
    } else {
        Verdict::Mixed
    };
    let relative_separation = if b != 0.0 {
        (vals[vals.len() - 1] - vals[0]) / b.abs()
    } else {
        0.0
    };
    let spearman_per_frame = (0..n)
        .map(|k| {
            let v: Vec<f64> = rows.iter().map(|r| r.series.values[k]).collect();
            spearman(&alphas, &v)
        })
        .collect();
    let mut by_abs: Vec<(f64, f64)> = rows.iter().map(|r| (r.alpha.abs(), r.l2_from_baseline)).collect();
    by_abs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let l2_monotone_in_abs_alpha = by_abs.windows(2).all(|w| w[0].0 == w[1].0 || w[1].1 >= w[0].1);
    Ok(SteeringReport {
        concept: concept.to_string(),
        metric: metric.clone(),
        alpha_grid: alphas.clone(),
        eval_frame,
        threshold: opts.threshold,
        monotone_nondecreasing: vals.windows(2).all(|w| w[1] >= w[0]),
        spread,
        relative_separation,
        spearman: spearman(&alphas, &vals),
        spearman_per_frame,
        l2_monotone_in_abs_alpha,
        baseline_hash: base.content_hash(),
        verdict,
        rows,
    })
}

//! Static checks of an [`ExperimentConfig`].

use std::collections::BTreeSet;
use std::path::Path;

use steerlab_core::metrics::Metric;
use steerlab_core::pde::{RegimeGroupSpec, System};

use crate::config::{ExperimentConfig, Threshold};
use crate::error::Diagnostic;
use crate::presets;

/// Closest candidate by edit distance, if reasonably close.
pub fn suggest<'a>(name: &str, candidates: impl IntoIterator<Item = &'a str>) -> Option<&'a str> {
    candidates
        .into_iter()
        .map(|c| (strsim::levenshtein(name, c), c))
        .filter(|(d, c)| *d <= (c.len().max(name.len()) / 2).max(2))
        .min()
        .map(|(_, c)| c)
}

fn unknown(kind: &str, name: &str, candidates: &[&str]) -> String {
    match suggest(name, candidates.iter().copied()) {
        Some(s) => format!("unknown {kind} `{name}`; did you mean `{s}`?"),
        None => format!("unknown {kind} `{name}` (known: {})", candidates.join(", ")),
    }
}

fn group_system(name: &str) -> Option<System> {
    RegimeGroupSpec::preset(name).and_then(|s| s.group_f.first().map(|m| m.params.system))
}

/// All problems found; empty means valid.
pub fn validate(c: &ExperimentConfig) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut err = |path: &str, msg: String| out.push(Diagnostic::new(path, msg));

    if c.name.trim().is_empty() {
        err("name", "must not be empty".into());
    }

    let [h, w] = c.data.grid;
    let pow2 = c.data.system == System::ShearFlow;
    if h < 4 || w < 4 || (pow2 && !(h.is_power_of_two() && w.is_power_of_two())) {
        err(
            "data.grid",
            format!("{h}x{w} is not a valid grid (at least 4, powers of two for shear flow)"),
        );
    }
    if c.data.training.is_empty() {
        err("data.training", "needs at least one regime-group preset".into());
    }
    for (i, g) in c.data.training.iter().enumerate() {
        match group_system(g) {
            None => err(&format!("data.training[{i}]"), unknown("regime-group preset", g, &RegimeGroupSpec::PRESETS)),
            Some(s) if s != c.data.system => err(
                &format!("data.training[{i}]"),
                format!("preset `{g}` simulates {s:?}, but data.system is {:?}", c.data.system),
            ),
            _ => {}
        }
    }

    let model = c.model_config();
    if let Err(e) = model.validate() {
        err("model", e.to_string());
    }
    if c.data.frames <= c.model.window_t {
        err(
            "data.frames",
            format!("{} frames leave no training target for window_t = {}", c.data.frames, c.model.window_t),
        );
    }
    let t = &c.training;
    if !(t.lr.is_finite() && t.lr > 0.0) {
        err("training.lr", format!("must be positive, got {}", t.lr));
    }
    if t.batch == 0 {
        err("training.batch", "must be >= 1".into());
    }
    if !(0.0..1.0).contains(&t.holdout_fraction) {
        err("training.holdout_fraction", "must lie in [0, 1)".into());
    }

    match &c.concept.source {
        Some(src) => {
            if presets::preset(src).is_none() && !Path::new(src).is_file() {
                err("concept.source", unknown("experiment", src, &presets::PRESETS));
            }
        }
        None => {
            let g = c.concept.groups_preset();
            let path = if c.concept.groups.is_some() { "concept.groups" } else { "concept.name" };
            match group_system(g) {
                None => err(path, unknown("concept preset", g, &RegimeGroupSpec::PRESETS)),
                Some(s) if s != c.data.system => {
                    err(path, format!("preset `{g}` simulates {s:?}, but data.system is {:?}", c.data.system))
                }
                _ => {}
            }
        }
    }
    if let Some(l) = c.concept.layer {
        if l.0 >= c.model.n_blocks {
            err("concept.layer", format!("{l} does not exist; the model has {} blocks", c.model.n_blocks));
        }
    }
    if !(c.concept.epsilon.is_finite() && c.concept.epsilon >= 0.0) {
        err("concept.epsilon", "must be finite and >= 0".into());
    }

    let s = &c.steering;
    if !s.alphas.contains(&0.0) {
        err("steering.alphas", "the alpha grid must contain 0 (the unsteered baseline)".into());
    }
    let mut seen = BTreeSet::new();
    for (i, a) in s.alphas.iter().enumerate() {
        if !a.is_finite() {
            err(&format!("steering.alphas[{i}]"), format!("{a} is not finite"));
        } else if a.abs() > s.alpha_limit {
            err(
                &format!("steering.alphas[{i}]"),
                format!("|{a}| exceeds alpha_limit {}; raise the limit to override", s.alpha_limit),
            );
        } else if !seen.insert(a.to_bits()) {
            err(&format!("steering.alphas[{i}]"), format!("{a} appears twice"));
        }
    }
    if s.rollout_steps == 0 {
        err("steering.rollout_steps", "must be >= 1".into());
    }
    if let Some(f) = s.eval_frame {
        if f >= s.rollout_steps {
            err("steering.eval_frame", format!("{f} is beyond the {}-step rollout", s.rollout_steps));
        }
    }
    match &s.threshold {
        Some(Threshold::Calibrated { calibrate_frame }) if *calibrate_frame >= s.rollout_steps => err(
            "steering.threshold.calibrate_frame",
            format!("{calibrate_frame} is beyond the {}-step rollout", s.rollout_steps),
        ),
        Some(Threshold::Value(v)) if !v.is_finite() => err("steering.threshold", "must be finite".into()),
        _ => {}
    }
    if s.inits.is_empty() {
        err("steering.inits", "needs at least one initial condition".into());
    }
    let mut names = BTreeSet::new();
    for (i, init) in s.inits.iter().enumerate() {
        if let Err(m) = init.params(c.data.system) {
            err(&format!("steering.inits[{i}]"), m);
        }
        if !names.insert(init.name.as_str()) {
            err(&format!("steering.inits[{i}].name"), format!("`{}` is used twice", init.name));
        }
    }
    let fields = c.data.system.field_names();
    match &s.metric {
        Metric::MeanAbsVorticity | Metric::Enstrophy if c.data.system != System::ShearFlow => {
            err("steering.metric", format!("{} needs velocity fields (shear flow)", s.metric))
        }
        Metric::InterfaceSharpness(f) if !fields.contains(&f.as_str()) => {
            err("steering.metric", unknown("field", f, fields))
        }
        _ => {}
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for p in presets::PRESETS {
            assert_eq!(validate(&presets::preset(p).unwrap()), vec![], "{p}");
        }
    }

    #[test]
    fn missing_zero_alpha_names_the_rule() {
        let mut c = presets::vortex_shear();
        c.steering.alphas = vec![-0.5, 0.5];
        let d = validate(&c);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].path, "steering.alphas");
        assert!(d[0].message.contains("must contain 0"));
    }

    #[test]
    fn unknown_concept_gets_suggestion() {
        let mut c = presets::vortex_shear();
        c.concept.name = "vortx".into();
        let d = validate(&c);
        assert_eq!(d.len(), 1);
        assert!(d[0].message.contains("did you mean `vortex`"), "{}", d[0]);
    }

    #[test]
    fn suggestion_needs_closeness() {
        assert_eq!(suggest("spede", ["speed", "vortex"]), Some("speed"));
        assert_eq!(suggest("zzzzzzzz", ["speed", "vortex"]), None);
    }
}

//! The experiment stages and their caching.
//!
//! `generate → train → extract → delta → steer → report`. Each stage
//! computes a key from its inputs; when `<out>/<stage>/manifest.json`
//! carries the same key and every recorded output still hashes to the
//! recorded value, the stage is skipped.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use steerlab_core::concepts::{
    concept_delta, fit_normalization_stats, group_means, load_direction, load_group_stats, normalize,
    projection, save_direction, save_group_stats, separation_auc, spatial_average, extract_activations,
    ConceptDirection,
};
use steerlab_core::metrics::{render_frames, steering_report, value_range, Metric, Palette, ReportOptions};
use steerlab_core::pde::{
    load_trajectory, save_trajectory, subsample_stride, GroupMember, RegimeGroupSpec, TrajectoryCache,
};
use steerlab_core::steering::{rollout, RolloutResult, SteeringConfig, SteeringRecord};
use steerlab_core::surrogate::{load_checkpoint, save_checkpoint, train_with_progress};
use steerlab_core::{Checkpoint, Error as CoreError, Trajectory};

use crate::config::{ExperimentConfig, Threshold};
use crate::error::{PipelineError, Result};
use crate::manifest::{hash_json, Artifact, Manifest, Roots};
use crate::{presets, validate};

pub const STAGES: [&str; 7] = ["generate", "train", "extract", "delta", "steer", "report", "all"];

/// Per-stage seed: the first eight bytes of `sha256("<master>:<stage>")`,
/// little-endian.
pub fn derive_seed(master: u64, stage: &str) -> u64 {
    let d = Sha256::digest(format!("{master}:{stage}").as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

/// File-name form of an α value.
pub fn alpha_label(alpha: f64) -> String {
    format!("alpha_{alpha}")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageRun {
    pub stage: String,
    /// Nothing was recomputed.
    pub hit: bool,
}

pub struct Pipeline {
    pub config: ExperimentConfig,
    pub roots: Roots,
    pub runs: Vec<StageRun>,
    pub quiet: bool,
}

impl Pipeline {
    /// Validates `config` and fixes the output roots.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let diags = validate::validate(&config);
        if !diags.is_empty() {
            return Err(PipelineError::Config(diags));
        }
        let roots = Roots {
            out: config.out_dir(),
            cache: config.cache_dir(),
        };
        Ok(Self {
            config,
            roots,
            runs: Vec::new(),
            quiet: false,
        })
    }

    pub fn all_hits(&self) -> bool {
        self.runs.iter().all(|r| r.hit)
    }

    fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("[{}] {}", self.config.name, msg.as_ref());
        }
    }

    fn seed(&self, stage: &str) -> u64 {
        derive_seed(self.config.seed, stage)
    }

    fn record(&mut self, stage: &str, hit: bool) {
        self.log(format!("{stage}: {}", if hit { "up to date" } else { "done" }));
        self.runs.push(StageRun {
            stage: stage.to_string(),
            hit,
        });
    }

    /// A stage manifest that must exist and be intact.
    fn upstream(&self, stage: &'static str, what: &str) -> Result<Manifest> {
        let m = self.roots.load(stage, what)?;
        self.roots.verify(&m)?;
        Ok(m)
    }

    fn cached(&mut self, stage: &str, key: &str) -> Option<Manifest> {
        let m = self.roots.hit(stage, key)?;
        self.record(stage, true);
        Some(m)
    }

    fn commit(&mut self, m: Manifest) -> Result<Manifest> {
        self.roots.write(&m)?;
        self.record(&m.stage, false);
        Ok(m)
    }

    fn manifest(&self, stage: &str, key: String, inputs: BTreeMap<String, String>) -> Manifest {
        Manifest {
            stage: stage.into(),
            key,
            seed: self.seed(stage),
            inputs,
            outputs: BTreeMap::new(),
            summary: Value::Null,
        }
    }

    fn stage_dir(&self, stage: &str) -> Result<PathBuf> {
        let d = self.roots.out.join(stage);
        fs::create_dir_all(&d)?;
        Ok(d)
    }

    fn is_transfer(&self) -> bool {
        self.config.concept.source.is_some()
    }

    fn traj_cache(&self) -> Result<TrajectoryCache> {
        Ok(TrajectoryCache::new(self.roots.cache.join("trajectories"))?)
    }

    // ---- generate -------------------------------------------------------

    fn init_frames(&self) -> usize {
        self.config.model.window_t + self.config.steering.rollout_steps
    }

    fn init_members(&self) -> Vec<(String, GroupMember)> {
        let system = self.config.data.system;
        self.config
            .steering
            .inits
            .iter()
            .map(|i| {
                let params = i.params(system).expect("validated");
                (i.name.clone(), GroupMember { params, seed: i.seed })
            })
            .collect()
    }

    fn concept_groups(&self) -> Option<RegimeGroupSpec> {
        if self.is_transfer() {
            return None;
        }
        RegimeGroupSpec::preset(self.config.concept.groups_preset())
    }

    pub fn generate(&mut self) -> Result<Manifest> {
        let c = &self.config;
        let grid = (c.data.grid[0], c.data.grid[1]);
        let frames = c.data.frames;
        let key_of = |m: &GroupMember, frames| TrajectoryCache::key(m, grid, frames);

        let mut jobs: Vec<(String, GroupMember, usize)> = Vec::new();
        let mut seen = BTreeSet::new();
        let mut push = |m: &GroupMember, frames: usize, jobs: &mut Vec<_>| {
            let k = key_of(m, frames);
            if seen.insert(k.clone()) {
                jobs.push((k.clone(), m.clone(), frames));
            }
            k
        };
        let mut training = Vec::new();
        for name in &c.data.training {
            let spec = RegimeGroupSpec::preset(name).expect("validated");
            for m in spec.group_f.iter().chain(&spec.group_not_f) {
                let k = push(m, frames, &mut jobs);
                if !training.contains(&k) {
                    training.push(k);
                }
            }
        }
        let groups = self.concept_groups().map(|spec| {
            let f: Vec<String> = spec.group_f.iter().map(|m| push(m, frames, &mut jobs)).collect();
            let n: Vec<String> = spec.group_not_f.iter().map(|m| push(m, frames, &mut jobs)).collect();
            json!({"f": f, "not_f": n, "stride_f": spec.stride_f, "stride_not_f": spec.stride_not_f})
        });
        let inits: BTreeMap<String, String> = self
            .init_members()
            .iter()
            .map(|(name, m)| (name.clone(), push(m, self.init_frames(), &mut jobs)))
            .collect();

        let summary = json!({
            "grid": [grid.0, grid.1],
            "training": training,
            "groups": groups,
            "inits": inits,
        });
        let key = hash_json(&json!({"stage": "generate", "plan": summary}));
        if let Some(m) = self.cached("generate", &key) {
            return Ok(m);
        }

        self.log(format!("generating up to {} trajectories", jobs.len()));
        let cache = self.traj_cache()?;
        jobs.par_iter()
            .map(|(_, m, frames)| cache.get_or_generate::<f32>(m, grid, *frames).map(|_| ()))
            .collect::<std::result::Result<Vec<()>, CoreError>>()?;

        let mut m = self.manifest("generate", key, BTreeMap::new());
        for (k, _, _) in &jobs {
            m.outputs
                .insert(format!("traj/{k}"), self.roots.artifact(traj_logical(k))?);
        }
        m.summary = summary;
        self.commit(m)
    }

    fn load_traj(&self, gen: &Manifest, key: &str) -> Result<Trajectory> {
        let a = gen.outputs.get(&format!("traj/{key}")).ok_or_else(|| PipelineError::StaleArtifact {
            path: traj_logical(key),
            expected: "an entry in the generate manifest".into(),
            found: "none".into(),
        })?;
        Ok(load_trajectory(&self.roots.resolve(&a.path))?)
    }

    fn load_trajs(&self, gen: &Manifest, keys: &Value) -> Result<Vec<Trajectory>> {
        str_list(keys)
            .par_iter()
            .map(|k| self.load_traj(gen, k))
            .collect()
    }

    // ---- train ----------------------------------------------------------

    pub fn train(&mut self) -> Result<Manifest> {
        let gen = self.upstream("generate", "generated trajectories")?;
        let keys = str_list(&gen.summary["training"]);
        let data: Vec<&str> = keys
            .iter()
            .map(|k| gen.outputs[&format!("traj/{k}")].sha256.as_str())
            .collect();
        let model = self.config.model_config();
        let opts = self.config.train_options(self.seed("train"));
        let key = hash_json(&json!({
            "stage": "train",
            "data": data,
            "model": model,
            "options": opts,
        }));
        if let Some(m) = self.cached("train", &key) {
            return Ok(m);
        }

        let logical = format!("cache/models/{key}.sckpt");
        let path = self.roots.resolve(&logical);
        let ckpt: Checkpoint = match load_checkpoint(&path) {
            Ok(c) => {
                self.log("reusing cached checkpoint");
                c
            }
            Err(_) => {
                let trajs = self.load_trajs(&gen, &gen.summary["training"])?;
                self.log(format!(
                    "training on {} trajectories for {} steps",
                    trajs.len(),
                    opts.steps
                ));
                let quiet = self.quiet;
                let name = self.config.name.clone();
                let every = (opts.steps / 10).max(1);
                let ckpt = train_with_progress(&trajs, model, &opts, |step, loss| {
                    if !quiet && step % every == 0 {
                        eprintln!("[{name}] step {step:>5} loss {loss:.5}");
                    }
                })?;
                fs::create_dir_all(path.parent().expect("models dir"))?;
                let tmp = path.with_extension(format!("tmp{}", std::process::id()));
                save_checkpoint(&ckpt, &tmp)?;
                fs::rename(&tmp, &path)?;
                ckpt
            }
        };
        let mut m = self.manifest("train", key, sha_inputs(&gen, &keys));
        m.outputs.insert("checkpoint".into(), self.roots.artifact(logical)?);
        m.summary = json!({
            "meta": ckpt.meta,
            "skill_ratio": ckpt.meta.skill_ratio(),
            "parameters": ckpt.model.parameter_count(),
        });
        self.commit(m)
    }

    fn load_ckpt(&self) -> Result<(Manifest, Checkpoint)> {
        let m = self.upstream("train", "trained checkpoint")?;
        let ckpt = load_checkpoint(&self.roots.resolve(&m.outputs["checkpoint"].path))?;
        Ok((m, ckpt))
    }

    // ---- extract --------------------------------------------------------

    /// The experiment a transfer takes its direction from, sharing this
    /// experiment's cache and writing under `<out>/source`.
    fn source_pipeline(&self) -> Result<Pipeline> {
        let src = self.config.concept.source.as_deref().expect("transfer");
        let mut cfg = match presets::preset(src) {
            Some(c) => c,
            None => ExperimentConfig::from_toml(&fs::read_to_string(src)?)?,
        };
        cfg.outputs.dir = Some(self.roots.out.join("source"));
        cfg.outputs.cache = Some(self.roots.cache.clone());
        cfg.outputs.render = false;
        let mut p = Pipeline::new(cfg)?;
        p.quiet = self.quiet;
        Ok(p)
    }

    pub fn extract(&mut self) -> Result<Manifest> {
        if self.is_transfer() {
            return self.extract_transfer();
        }
        let gen = self.upstream("generate", "generated trajectories")?;
        let (train, ckpt) = self.load_ckpt()?;
        let groups = &gen.summary["groups"];
        let (fk, nk) = (str_list(&groups["f"]), str_list(&groups["not_f"]));
        let layer = self.config.layer();
        let mut inputs = sha_inputs(&gen, &fk.iter().chain(&nk).cloned().collect::<Vec<_>>());
        inputs.insert("checkpoint".into(), train.outputs["checkpoint"].sha256.clone());
        let key = hash_json(&json!({
            "stage": "extract",
            "inputs": inputs,
            "groups": groups,
            "layer": layer,
            "epsilon": self.config.concept.epsilon,
        }));
        if let Some(m) = self.cached("extract", &key) {
            return Ok(m);
        }

        let stride = |v: &Value| v.as_u64().unwrap_or(1) as usize;
        let acts = |keys: &Value, s: usize| -> Result<Vec<_>> {
            let trajs = self.load_trajs(&gen, keys)?;
            let per: Vec<Vec<_>> = trajs
                .par_iter()
                .map(|t| extract_activations(&ckpt, &subsample_stride(t, s)?, layer))
                .collect::<std::result::Result<_, CoreError>>()?;
            Ok(per.into_iter().flatten().collect())
        };
        let a_f = acts(&groups["f"], stride(&groups["stride_f"]))?;
        let a_n = acts(&groups["not_f"], stride(&groups["stride_not_f"]))?;
        let union: Vec<_> = a_f.iter().chain(&a_n).cloned().collect();
        let stats = fit_normalization_stats(&union, self.config.concept.epsilon)?;
        let norm = |v: &[_]| -> std::result::Result<Vec<_>, CoreError> {
            v.iter().map(|a| normalize(a, &stats)).collect()
        };
        let (n_f, n_n) = (norm(&a_f)?, norm(&a_n)?);
        let g = group_means(&n_f, &n_n)?;

        let delta = &g.mu - &g.nu;
        let proj = |v: &[_]| -> std::result::Result<Vec<f64>, CoreError> {
            v.iter().map(|a| projection(a, &delta)).collect()
        };
        let auc = separation_auc(&proj(&n_f)?, &proj(&n_n)?);

        let logical = format!("out/extract/{}.sgst", self.config.concept.name);
        self.stage_dir("extract")?;
        save_group_stats(&stats, &g, &self.roots.resolve(&logical))?;
        let mut m = self.manifest("extract", key, inputs);
        m.outputs.insert("group_stats".into(), self.roots.artifact(logical)?);
        m.summary = json!({
            "layer": layer,
            "count_f": g.count_f,
            "count_not_f": g.count_not_f,
            "activation_shape": stats.shape(),
            "projection_auc": auc,
        });
        self.commit(m)
    }

    fn extract_transfer(&mut self) -> Result<Manifest> {
        let mut src = self.source_pipeline()?;
        let result = src.through_delta();
        self.runs
            .extend(src.runs.iter().map(|r| StageRun {
                stage: format!("source/{}", r.stage),
                hit: r.hit,
            }));
        let src_delta = result?;
        let art = &src_delta.outputs["direction"];
        let key = hash_json(&json!({
            "stage": "extract",
            "source": src.config.name,
            "source_delta": src_delta.key,
            "direction": art.sha256,
        }));
        if let Some(m) = self.cached("extract", &key) {
            return Ok(m);
        }
        let logical = "out/extract/source.scdir".to_string();
        self.stage_dir("extract")?;
        fs::copy(src.roots.resolve(&art.path), self.roots.resolve(&logical))?;
        let mut inputs = BTreeMap::new();
        inputs.insert("source_direction".into(), art.sha256.clone());
        let mut m = self.manifest("extract", key, inputs);
        m.outputs.insert("source_direction".into(), self.roots.artifact(logical)?);
        m.summary = json!({"source": src.config.name, "source_summary": src_delta.summary});
        self.commit(m)
    }

    // ---- delta ----------------------------------------------------------

    pub fn delta(&mut self) -> Result<Manifest> {
        let ext = self.upstream("extract", "extracted activation statistics")?;
        let (name, input) = if self.is_transfer() {
            ("source_direction", &ext.outputs["source_direction"])
        } else {
            ("group_stats", &ext.outputs["group_stats"])
        };
        let mut inputs = BTreeMap::new();
        inputs.insert(name.to_string(), input.sha256.clone());
        let key = hash_json(&json!({
            "stage": "delta",
            "concept": self.config.concept.name,
            "inputs": inputs,
        }));
        if let Some(m) = self.cached("delta", &key) {
            return Ok(m);
        }

        let path = self.roots.resolve(&input.path);
        let dir: ConceptDirection<f32> = if self.is_transfer() {
            let src: ConceptDirection<f32> = load_direction(&path)?;
            ConceptDirection {
                channel: Some(src.channel_or_average()?),
                full: None,
                ..src
            }
        } else {
            let (stats, groups) = load_group_stats::<f32>(&path)?;
            let mut d = spatial_average(&concept_delta(&groups, &self.config.concept.name))?;
            d.stats_ref = stats.content_hash();
            d
        };
        let l2 = |v: Option<f64>| v.map(f64::sqrt);
        let full_norm = l2(dir.full.as_ref().map(|f| f.iter().map(|&x| (x as f64).powi(2)).sum()));
        let channel_norm = l2(dir.channel.as_ref().map(|c| c.iter().map(|&x| (x as f64).powi(2)).sum()));
        if full_norm.or(channel_norm) == Some(0.0) {
            return Err(CoreError::ZeroDirection { alpha: f64::NAN }.into());
        }

        let logical = format!("out/delta/{}.scdir", self.config.concept.name);
        self.stage_dir("delta")?;
        save_direction(&dir, &self.roots.resolve(&logical))?;
        let mut m = self.manifest("delta", key, inputs);
        m.outputs.insert("direction".into(), self.roots.artifact(logical)?);
        m.summary = json!({
            "concept": dir.name,
            "layer": dir.layer,
            "channels": dir.channels(),
            "full_norm": full_norm,
            "channel_norm": channel_norm,
            "direction_hash": dir.content_hash(),
        });
        self.commit(m)
    }

    /// Runs the stages up to and including `delta`.
    pub fn through_delta(&mut self) -> Result<Manifest> {
        if !self.is_transfer() {
            self.generate()?;
            self.train()?;
        }
        self.extract()?;
        self.delta()
    }

    // ---- steer ----------------------------------------------------------

    pub fn steer(&mut self) -> Result<Manifest> {
        let delta = self.upstream("delta", "concept direction")?;
        let gen = self.upstream("generate", "generated trajectories")?;
        let (train, ckpt) = self.load_ckpt()?;
        let dir_art = &delta.outputs["direction"];
        let direction: ConceptDirection<f32> = load_direction(&self.roots.resolve(&dir_art.path))?;
        let s = self.config.steering.clone();
        let layer = self.config.concept.layer.unwrap_or(direction.layer);
        let inits: BTreeMap<String, String> = serde_json::from_value(gen.summary["inits"].clone())
            .map_err(|e| stale("generate manifest", e))?;

        let mut inputs = sha_inputs(&gen, &inits.values().cloned().collect::<Vec<_>>());
        inputs.insert("checkpoint".into(), train.outputs["checkpoint"].sha256.clone());
        inputs.insert("direction".into(), dir_art.sha256.clone());
        let key = hash_json(&json!({
            "stage": "steer",
            "inputs": inputs,
            "inits": inits,
            "alphas": s.alphas,
            "mode": s.mode,
            "align": s.align,
            "renorm": s.renorm,
            "alpha_limit": s.alpha_limit,
            "layer": layer,
            "steps": s.rollout_steps,
        }));
        if let Some(m) = self.cached("steer", &key) {
            return Ok(m);
        }

        let wt = ckpt.model.config.window_t;
        let mut m = self.manifest("steer", key, inputs);
        let mut hashes = BTreeMap::new();
        for (name, tkey) in &inits {
            let init = self.load_traj(&gen, tkey)?.slice_frames(0, wt);
            let results: Vec<RolloutResult<f32>> = s
                .alphas
                .par_iter()
                .map(|&alpha| {
                    let cfg = (alpha != 0.0).then(|| {
                        let mut c = SteeringConfig::new(direction.clone(), alpha, s.mode);
                        c.layer = layer;
                        c.align = s.align;
                        c.renorm = s.renorm;
                        c.alpha_limit = s.alpha_limit;
                        c
                    });
                    rollout(&ckpt, &init, s.rollout_steps, cfg.as_ref())
                })
                .collect::<std::result::Result<_, CoreError>>()?;
            let base_hash = results[s.alphas.iter().position(|&a| a == 0.0).expect("validated")].content_hash();
            self.stage_dir(&format!("steer/{name}"))?;
            let mut per = BTreeMap::new();
            for (&alpha, mut r) in s.alphas.iter().zip(results) {
                if alpha != 0.0 {
                    r.trajectory.extra.insert("baseline_ref".into(), Value::from(base_hash.clone()));
                }
                let logical = format!("out/steer/{name}/{}.straj", alpha_label(alpha));
                save_trajectory(&r.trajectory, &self.roots.resolve(&logical))?;
                per.insert(alpha.to_string(), r.content_hash());
                m.outputs.insert(format!("{name}/{alpha}"), self.roots.artifact(logical)?);
            }
            hashes.insert(name.clone(), per);
        }
        m.summary = json!({
            "layer": layer,
            "mode": s.mode,
            "alphas": s.alphas,
            "steps": s.rollout_steps,
            "inits": inits.keys().collect::<Vec<_>>(),
            "rollouts": hashes,
        });
        self.commit(m)
    }

    // ---- report ---------------------------------------------------------

    pub fn report(&mut self) -> Result<Manifest> {
        let steer = self.upstream("steer", "steered rollouts")?;
        let gen = self.upstream("generate", "generated trajectories")?;
        let s = self.config.steering.clone();
        let alphas: Vec<f64> =
            serde_json::from_value(steer.summary["alphas"].clone()).map_err(|e| stale("steer manifest", e))?;
        let inits: BTreeMap<String, String> = serde_json::from_value(gen.summary["inits"].clone())
            .map_err(|e| stale("generate manifest", e))?;

        let mut inputs: BTreeMap<String, String> =
            steer.outputs.iter().map(|(k, a)| (k.clone(), a.sha256.clone())).collect();
        inputs.extend(sha_inputs(&gen, &inits.values().cloned().collect::<Vec<_>>()));
        let key = hash_json(&json!({
            "stage": "report",
            "inputs": inputs,
            "metric": s.metric,
            "eval_frame": s.eval_frame,
            "threshold": s.threshold,
            "render": self.config.outputs.render,
        }));
        if let Some(m) = self.cached("report", &key) {
            return Ok(m);
        }

        let wt = self.config.model.window_t;
        let first_init = self.config.steering.inits.first().map(|i| i.name.clone());
        let threshold = match &s.threshold {
            None => None,
            Some(Threshold::Value(v)) => Some(*v),
            Some(Threshold::Calibrated { calibrate_frame }) => {
                let name = first_init.as_ref().expect("validated");
                let gt = self.load_traj(&gen, &inits[name])?;
                Some(s.metric.compute(&gt)?.values[wt + calibrate_frame])
            }
        };
        let opts = ReportOptions {
            eval_frame: s.eval_frame,
            threshold,
        };

        let out_dir = self.stage_dir("report")?;
        let mut m = self.manifest("report", key, inputs);
        let mut text = format!(
            "experiment: {}\nconcept: {}\nlayer: {}\nmode: {:?}\nmetric: {}\n",
            self.config.name, self.config.concept.name, steer.summary["layer"].as_str().unwrap_or("?"),
            s.mode, s.metric
        );
        let mut per_init = Vec::new();
        for (name, tkey) in &inits {
            let rollouts: Vec<(f64, RolloutResult<f32>)> = alphas
                .iter()
                .map(|&a| {
                    let path = self.roots.resolve(&steer.outputs[&format!("{name}/{a}")].path);
                    Ok((a, read_rollout(&path)?))
                })
                .collect::<Result<_>>()?;
            let report = steering_report(&rollouts, &self.config.concept.name, &s.metric, &opts)?;
            let gt = self.load_traj(&gen, tkey)?;
            let gt_series = s.metric.compute(&gt.slice_frames(wt, gt.frames()))?;
            text.push_str(&format!("\n[init {name}]\n"));
            text.push_str(&report.to_text());
            text.push_str(&format!(
                "ground_truth_at_eval: {:.6}\n",
                gt_series.values.get(report.eval_frame).copied().unwrap_or(f64::NAN)
            ));
            if self.config.outputs.render {
                self.render(&mut m, name, &rollouts, &gt, &s.metric)?;
            }
            per_init.push(json!({
                "init": name,
                "report": report,
                "ground_truth": gt_series,
            }));
        }
        let doc = json!({
            "experiment": self.config.name,
            "concept": self.config.concept.name,
            "layer": steer.summary["layer"],
            "mode": s.mode,
            "metric": s.metric,
            "threshold": threshold,
            "inits": per_init,
        });
        fs::write(out_dir.join("report.txt"), &text)?;
        let mut json_text = serde_json::to_string_pretty(&doc).expect("report serialises");
        json_text.push('\n');
        fs::write(out_dir.join("report.json"), json_text)?;
        for f in ["report.txt", "report.json"] {
            m.outputs.insert(f.into(), self.roots.artifact(format!("out/report/{f}"))?);
        }
        m.summary = json!({
            "threshold": threshold,
            "verdicts": per_init
                .iter()
                .map(|p| (p["init"].as_str().unwrap_or("").to_string(), p["report"]["verdict"].clone()))
                .collect::<BTreeMap<_, _>>(),
        });
        self.commit(m)
    }

    fn render(
        &self,
        m: &mut Manifest,
        init: &str,
        rollouts: &[(f64, RolloutResult<f32>)],
        gt: &Trajectory,
        metric: &Metric,
    ) -> Result<()> {
        let field = match metric {
            Metric::InterfaceSharpness(f) => f.clone(),
            _ => gt.field_names()[0].clone(),
        };
        let scale = value_range(rollouts.iter().map(|(_, r)| &r.trajectory), &field)?;
        let base = self.roots.out.join("report").join("render").join(init);
        for (alpha, r) in rollouts {
            let dir = base.join(alpha_label(*alpha));
            fs::create_dir_all(&dir)?;
            for p in render_frames(&r.trajectory, &field, Palette::Viridis, &dir, Some(scale))? {
                let rel = p.strip_prefix(&self.roots.out).expect("under out");
                let logical = format!("out/{}", rel.to_string_lossy());
                m.outputs.insert(logical.clone(), self.roots.artifact(logical)?);
            }
        }
        Ok(())
    }

    // ---- all ------------------------------------------------------------

    pub fn all(&mut self) -> Result<Manifest> {
        let mut keys = BTreeMap::new();
        for (stage, f) in [
            ("generate", Self::generate as fn(&mut Self) -> Result<Manifest>),
            ("train", Self::train),
            ("extract", Self::extract),
            ("delta", Self::delta),
            ("steer", Self::steer),
            ("report", Self::report),
        ] {
            keys.insert(stage.to_string(), f(self)?.key);
        }
        let key = hash_json(&json!({"stage": "all", "stages": keys}));
        if let Some(m) = self.cached("all", &key) {
            return Ok(m);
        }
        let mut m = self.manifest("all", key, keys);
        m.summary = json!({"config_hash": self.config.content_hash()});
        self.commit(m)
    }

    pub fn run(&mut self, stage: &str) -> Result<Manifest> {
        match stage {
            "generate" => self.generate(),
            "train" => self.train(),
            "extract" => self.extract(),
            "delta" => self.delta(),
            "steer" => self.steer(),
            "report" => self.report(),
            "all" => self.all(),
            other => Err(PipelineError::Config(vec![crate::error::Diagnostic::new(
                "<stage>",
                format!("unknown stage `{other}`"),
            )])),
        }
    }
}

fn traj_logical(key: &str) -> String {
    format!("cache/trajectories/{key}.straj")
}

fn str_list(v: &Value) -> Vec<String> {
    v.as_array()
        .map(|a| a.iter().filter_map(|s| s.as_str().map(String::from)).collect())
        .unwrap_or_default()
}

fn sha_inputs(gen: &Manifest, keys: &[String]) -> BTreeMap<String, String> {
    keys.iter()
        .map(|k| {
            let name = format!("traj/{k}");
            let sha = gen.outputs.get(&name).map(|a: &Artifact| a.sha256.clone()).unwrap_or_default();
            (name, sha)
        })
        .collect()
}

fn stale(what: &str, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::StaleArtifact {
        path: what.into(),
        expected: "readable fields".into(),
        found: e.to_string(),
    }
}

/// Reloads a saved rollout with its steering metadata.
pub fn read_rollout(path: &Path) -> Result<RolloutResult<f32>> {
    let trajectory: Trajectory = load_trajectory(path)?;
    let steering: Option<SteeringRecord> = trajectory
        .extra
        .get("steering")
        .cloned()
        .and_then(|v| serde_json::from_value(v).ok());
    let baseline_ref = trajectory
        .extra
        .get("baseline_ref")
        .and_then(|v| v.as_str().map(String::from));
    Ok(RolloutResult {
        trajectory,
        steering,
        baseline_ref,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_differ_per_stage_and_are_stable() {
        assert_ne!(derive_seed(7, "train"), derive_seed(7, "generate"));
        assert_ne!(derive_seed(7, "train"), derive_seed(8, "train"));
        let d = Sha256::digest(b"7:train");
        assert_eq!(derive_seed(7, "train"), u64::from_le_bytes(d[..8].try_into().unwrap()));
    }

    #[test]
    fn alpha_labels() {
        assert_eq!(alpha_label(-0.25), "alpha_-0.25");
        assert_eq!(alpha_label(0.0), "alpha_0");
        assert_eq!(alpha_label(0.5), "alpha_0.5");
    }
}

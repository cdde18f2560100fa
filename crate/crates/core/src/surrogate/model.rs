//! The spatiotemporal transformer: patch embedding, axial blocks and a
//! linear decoder to per-patch deltas of the last input frame.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::layers::{
    join, normal, Attention, AttentionCache, LayerNorm,
    LayerNormCache, Linear, Mlp, MlpCache, Sequences, Visit,
};
use crate::activation::{ActivationTensor, LayerId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Replaces the residual stream after one block during a forward pass.
pub trait Injector<T>: Sync {
    fn layer(&self) -> LayerId;
    fn inject(&self, activation: &ActivationTensor<T>) -> Result<ActivationTensor<T>>;
}

/// An [`Injector`] backed by a closure.
pub struct InjectFn<F> {
    pub layer: LayerId,
    pub f: F,
}

impl<T, F> Injector<T> for InjectFn<F>
where
    F: Fn(&ActivationTensor<T>) -> Result<ActivationTensor<T>> + Sync,
{
    fn layer(&self) -> LayerId {
        self.layer
    }
    fn inject(&self, activation: &ActivationTensor<T>) -> Result<ActivationTensor<T>> {
        (self.f)(activation)
    }
}

const AXES: [&str; 3] = ["attn_w", "attn_h", "attn_t"];

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    /// Pre-norm attention sublayers over W, H and T (empty when attention is
    /// disabled).
    attn: Vec<(LayerNorm<T>, Attention<T>)>,
    ln_mlp: LayerNorm<T>,
    mlp: Mlp<T>,
}

struct BlockCache<T> {
    attn: Vec<(LayerNormCache<T>, AttentionCache<T>)>,
    ln_mlp: LayerNormCache<T>,
    mlp: MlpCache<T>,
}

impl<T: Scalar> Block<T> {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.embed_dim;
        let out_std = 0.5 / ((c * 2 * cfg.n_blocks.max(1)) as f64).sqrt();
        let attn = if cfg.attention {
            (0..3)
                .map(|_| (LayerNorm::new(c), Attention::new(c, cfg.n_heads, out_std, rng)))
                .collect()
        } else {
            Vec::new()
        };
        Self {
            attn,
            ln_mlp: LayerNorm::new(c),
            mlp: Mlp::new(c, c * cfg.mlp_ratio, out_std, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            attn: self
                .attn
                .iter()
                .map(|(ln, a)| (ln.zeros_like(), a.zeros_like()))
                .collect(),
            ln_mlp: self.ln_mlp.zeros_like(),
            mlp: self.mlp.zeros_like(),
        }
    }

    fn forward(&self, mut x: Array2<T>, axes: &[Sequences; 3]) -> (Array2<T>, BlockCache<T>) {
        let mut attn_caches = Vec::with_capacity(self.attn.len());
        for ((ln, attn), seqs) in self.attn.iter().zip(axes) {
            let (normed, ln_cache) = ln.forward(&x);
            let (y, a_cache) = attn.forward(normed, seqs);
            x += &y;
            attn_caches.push((ln_cache, a_cache));
        }
        let (normed, ln_cache) = self.ln_mlp.forward(&x);
        let (y, mlp_cache) = self.mlp.forward(normed);
        x += &y;
        (
            x,
            BlockCache {
                attn: attn_caches,
                ln_mlp: ln_cache,
                mlp: mlp_cache,
            },
        )
    }

    fn backward(
        &self,
        cache: &BlockCache<T>,
        mut dx: Array2<T>,
        axes: &[Sequences; 3],
        grad: &mut Self,
    ) -> Array2<T> {
        let d = self.mlp.backward(&cache.mlp, &dx, &mut grad.mlp);
        dx += &self.ln_mlp.backward(&cache.ln_mlp, &d, &mut grad.ln_mlp);
        for (k, ((ln, attn), (ln_cache, a_cache))) in
            self.attn.iter().zip(&cache.attn).enumerate().rev()
        {
            let (g_ln, g_attn) = &mut grad.attn[k];
            let d = attn.backward(a_cache, &dx, &axes[k], g_attn);
            dx += &ln.backward(ln_cache, &d, g_ln);
        }
        dx
    }
}

impl<T: Scalar> Visit<T> for Block<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        for ((ln, attn), axis) in self.attn.iter().zip(AXES) {
            ln.visit(&join(prefix, &format!("ln_{}", &axis[5..])), f);
            attn.visit(&join(prefix, axis), f);
        }
        self.ln_mlp.visit(&join(prefix, "ln_mlp"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        for ((ln, attn), axis) in self.attn.iter_mut().zip(AXES) {
            ln.visit_mut(&join(prefix, &format!("ln_{}", &axis[5..])), f);
            attn.visit_mut(&join(prefix, axis), f);
        }
        self.ln_mlp.visit_mut(&join(prefix, "ln_mlp"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

/// Output of an inference forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    /// `[F, H, W]`, in normalised field units: next = last input frame + delta.
    pub delta: Array3<T>,
    pub taps: BTreeMap<LayerId, ActivationTensor<T>>,
}

pub(crate) struct TrainCache<T> {
    patches: Array2<T>,
    blocks: Vec<BlockCache<T>>,
    last_rows: Array2<T>,
}

/// Patch-based axial transformer predicting next-frame deltas.
#[derive(Clone, Debug, PartialEq)]
pub struct Surrogate<T> {
    pub config: ModelConfig,
    embed: Linear<T>,
    pos_t: Array2<T>,
    pos_h: Array2<T>,
    pos_w: Array2<T>,
    blocks: Vec<Block<T>>,
    decoder: Linear<T>,
    /// Per-field multiplier from decoder output to normalised delta units.
    /// Not trained.
    pub output_scale: Array1<T>,
}

impl<T: Scalar> Surrogate<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.embed_dim;
        let pf = config.patch_features();
        let embed = Linear::new(pf, c, 1.0 / (pf as f64).sqrt(), &mut rng);
        let pos_t = Array2::from_shape_simple_fn((config.window_t, c), || normal(&mut rng, 0.1));
        let pos_h = Array2::from_shape_simple_fn((config.tokens_h(), c), || normal(&mut rng, 0.1));
        let pos_w = Array2::from_shape_simple_fn((config.tokens_w(), c), || normal(&mut rng, 0.1));
        let blocks = (0..config.n_blocks).map(|_| Block::new(&config, &mut rng)).collect();
        let decoder = Linear::new(c, pf, 0.02 / (c as f64).sqrt(), &mut rng);
        let output_scale = Array1::ones(config.field_count);
        Ok(Self {
            config,
            embed,
            pos_t,
            pos_h,
            pos_w,
            blocks,
            decoder,
            output_scale,
        })
    }

    /// Same shapes, all parameters zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            embed: self.embed.zeros_like(),
            pos_t: Array2::zeros(self.pos_t.raw_dim()),
            pos_h: Array2::zeros(self.pos_h.raw_dim()),
            pos_w: Array2::zeros(self.pos_w.raw_dim()),
            blocks: self.blocks.iter().map(Block::zeros_like).collect(),
            decoder: self.decoder.zeros_like(),
            output_scale: self.output_scale.clone(),
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn last_layer(&self) -> Option<LayerId> {
        self.blocks.len().checked_sub(1).map(LayerId)
    }

    pub fn check_layer(&self, layer: LayerId) -> Result<()> {
        if layer.0 >= self.blocks.len() {
            return Err(Error::UnknownLayer {
                layer: layer.to_string(),
                n_blocks: self.blocks.len(),
            });
        }
        Ok(())
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.embed.visit("embed", f);
        visit_array!(self.pos_t, "pos_t", f);
        visit_array!(self.pos_h, "pos_h", f);
        visit_array!(self.pos_w, "pos_w", f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&LayerId(i).to_string(), f);
        }
        self.decoder.visit("decoder", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.embed.visit_mut("embed", f);
        visit_array_mut!(self.pos_t, "pos_t", f);
        visit_array_mut!(self.pos_h, "pos_h", f);
        visit_array_mut!(self.pos_w, "pos_w", f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&LayerId(i).to_string(), f);
        }
        self.decoder.visit_mut("decoder", f);
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, d| n += d.len());
        n
    }

    /// All parameters concatenated in visiting order.
    pub fn flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.parameter_count());
        self.visit(&mut |_, _, d| out.extend_from_slice(d));
        out
    }

    fn axes(&self) -> [Sequences; 3] {
        let (t, h, w) = (
            self.config.window_t,
            self.config.tokens_h(),
            self.config.tokens_w(),
        );
        let plane = h * w;
        let along_w = Sequences {
            starts: (0..t).flat_map(|ti| (0..h).map(move |hi| ti * plane + hi * w)).collect(),
            step: 1,
            len: w,
        };
        let along_h = Sequences {
            starts: (0..t).flat_map(|ti| (0..w).map(move |wi| ti * plane + wi)).collect(),
            step: w,
            len: h,
        };
        let along_t = Sequences {
            starts: (0..plane).collect(),
            step: plane,
            len: t,
        };
        [along_w, along_h, along_t]
    }

    fn check_window(&self, window: &Array4<T>) -> Result<()> {
        let c = &self.config;
        let expected = [c.window_t, c.field_count, c.height, c.width];
        if window.shape() != expected {
            return Err(Error::ShapeMismatch {
                context: "surrogate input window [T, F, H, W]".into(),
                expected: expected.to_vec(),
                found: window.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// `[T, F, H, W]` → `[T·Hp·Wp, F·p·p]`, token rows ordered (t, y, x).
    fn patchify(&self, window: &Array4<T>) -> Array2<T> {
        let c = &self.config;
        let (p, hp, wp) = (c.patch_size, c.tokens_h(), c.tokens_w());
        let mut out = Array2::zeros((c.tokens(), c.patch_features()));
        for t in 0..c.window_t {
            for hy in 0..hp {
                for wx in 0..wp {
                    let mut row = out.row_mut((t * hp + hy) * wp + wx);
                    let mut k = 0;
                    for f in 0..c.field_count {
                        for py in 0..p {
                            for px in 0..p {
                                row[k] = window[[t, f, hy * p + py, wx * p + px]];
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Decoder rows `[Hp·Wp, F·p·p]` → `[F, H, W]`.
    fn unpatchify(&self, rows: &Array2<T>) -> Array3<T> {
        let c = &self.config;
        let (p, hp, wp) = (c.patch_size, c.tokens_h(), c.tokens_w());
        let mut out = Array3::zeros((c.field_count, c.height, c.width));
        for hy in 0..hp {
            for wx in 0..wp {
                let row = rows.row(hy * wp + wx);
                let mut k = 0;
                for f in 0..c.field_count {
                    for py in 0..p {
                        for px in 0..p {
                            out[[f, hy * p + py, wx * p + px]] = row[k];
                            k += 1;
                        }
                    }
                }
            }
        }
        out
    }

    fn patchify_grad(&self, d: &Array3<T>) -> Array2<T> {
        let c = &self.config;
        let (p, hp, wp) = (c.patch_size, c.tokens_h(), c.tokens_w());
        let mut rows = Array2::zeros((hp * wp, c.patch_features()));
        for hy in 0..hp {
            for wx in 0..wp {
                let mut row = rows.row_mut(hy * wp + wx);
                let mut k = 0;
                for f in 0..c.field_count {
                    for py in 0..p {
                        for px in 0..p {
                            row[k] = d[[f, hy * p + py, wx * p + px]];
                            k += 1;
                        }
                    }
                }
            }
        }
        rows
    }

    fn embed(&self, patches: &Array2<T>) -> Array2<T> {
        let c = &self.config;
        let (hp, wp) = (c.tokens_h(), c.tokens_w());
        let mut x = self.embed.forward(&patches.view());
        for t in 0..c.window_t {
            for hy in 0..hp {
                for wx in 0..wp {
                    let mut row = x.row_mut((t * hp + hy) * wp + wx);
                    row += &self.pos_t.row(t);
                    row += &self.pos_h.row(hy);
                    row += &self.pos_w.row(wx);
                }
            }
        }
        x
    }

    /// Token matrix → `[T, C, W, H]`.
    pub(crate) fn tokens_to_activation(&self, x: &Array2<T>) -> Array4<T> {
        let c = &self.config;
        let (hp, wp) = (c.tokens_h(), c.tokens_w());
        Array4::from_shape_fn((c.window_t, c.embed_dim, wp, hp), |(t, ch, wx, hy)| {
            x[[(t * hp + hy) * wp + wx, ch]]
        })
    }

    pub(crate) fn activation_to_tokens(&self, a: &Array4<T>) -> Array2<T> {
        let c = &self.config;
        let (hp, wp) = (c.tokens_h(), c.tokens_w());
        Array2::from_shape_fn((c.tokens(), c.embed_dim), |(row, ch)| {
            let t = row / (hp * wp);
            let hy = (row / wp) % hp;
            let wx = row % wp;
            a[[t, ch, wx, hy]]
        })
    }

    fn last_rows<'a>(&self, x: &'a Array2<T>) -> ArrayView2<'a, T> {
        let c = &self.config;
        let plane = c.tokens_h() * c.tokens_w();
        x.slice(s![(c.window_t - 1) * plane.., ..])
    }

    /// Decoder applied to a full residual stream, in normalised delta units.
    pub fn decode(&self, x: &Array2<T>) -> Array3<T> {
        let mut delta = self.unpatchify(&self.decoder.forward(&self.last_rows(x)));
        for (mut field, &s) in delta.outer_iter_mut().zip(self.output_scale.iter()) {
            field *= s;
        }
        delta
    }

    /// Predicts the delta of the frame after `window` (`[T, F, H, W]`,
    /// normalised). Taps are the post-block residual streams, recorded after
    /// any injection.
    pub fn forward(
        &self,
        window: &Array4<T>,
        injector: Option<&dyn Injector<T>>,
        taps: &[LayerId],
    ) -> Result<ForwardOutput<T>> {
        self.check_window(window)?;
        for &l in taps {
            self.check_layer(l)?;
        }
        if let Some(inj) = injector {
            self.check_layer(inj.layer())?;
        }
        let axes = self.axes();
        let mut x = self.embed(&self.patchify(window));
        let mut captured = BTreeMap::new();
        let expected = self.config.activation_shape();
        for (i, block) in self.blocks.iter().enumerate() {
            let layer = LayerId(i);
            x = block.forward(x, &axes).0;
            if let Some(inj) = injector.filter(|inj| inj.layer() == layer) {
                let act = ActivationTensor::new(self.tokens_to_activation(&x), layer, "");
                let steered = inj.inject(&act)?;
                steered.check_shape(expected, "injected activation")?;
                x = self.activation_to_tokens(&steered.data);
            }
            if taps.contains(&layer) {
                captured.insert(
                    layer,
                    ActivationTensor::new(self.tokens_to_activation(&x), layer, ""),
                );
            }
        }
        Ok(ForwardOutput {
            delta: self.decode(&x),
            taps: captured,
        })
    }

    /// Forward pass keeping what backpropagation needs. Returns the raw
    /// decoder output (before `output_scale`).
    pub(crate) fn forward_train(&self, window: &Array4<T>) -> Result<(Array3<T>, TrainCache<T>)> {
        self.check_window(window)?;
        let axes = self.axes();
        let patches = self.patchify(window);
        let mut x = self.embed(&patches);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, cache) = block.forward(x, &axes);
            x = y;
            caches.push(cache);
        }
        let last_rows = self.last_rows(&x).to_owned();
        let out = self.unpatchify(&self.decoder.forward(&last_rows.view()));
        Ok((
            out,
            TrainCache {
                patches,
                blocks: caches,
                last_rows,
            },
        ))
    }

    /// Accumulates `∂L/∂θ` into `grad` given `∂L/∂(raw output)`.
    pub(crate) fn backward(&self, cache: &TrainCache<T>, d_out: &Array3<T>, grad: &mut Self) {
        let c = &self.config;
        let (hp, wp) = (c.tokens_h(), c.tokens_w());
        let plane = hp * wp;
        let d_rows = self.patchify_grad(d_out);
        let d_last = self
            .decoder
            .backward(&cache.last_rows.view(), &d_rows.view(), &mut grad.decoder);
        let mut dx = Array2::zeros((c.tokens(), c.embed_dim));
        dx.slice_mut(s![(c.window_t - 1) * plane.., ..]).assign(&d_last);
        let axes = self.axes();
        for (k, block) in self.blocks.iter().enumerate().rev() {
            dx = block.backward(&cache.blocks[k], dx, &axes, &mut grad.blocks[k]);
        }
        for t in 0..c.window_t {
            for hy in 0..hp {
                for wx in 0..wp {
                    let row = dx.row((t * hp + hy) * wp + wx);
                    let mut gt = grad.pos_t.row_mut(t);
                    gt += &row;
                    let mut gh = grad.pos_h.row_mut(hy);
                    gh += &row;
                    let mut gw = grad.pos_w.row_mut(wx);
                    gw += &row;
                }
            }
        }
        self.embed
            .backward(&cache.patches.view(), &dx.view(), &mut grad.embed);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> Surrogate<f64> {
        let mut cfg = ModelConfig::tiny(2, 16, 16);
        cfg.patch_size = 4;
        cfg.embed_dim = 8;
        cfg.n_blocks = 2;
        cfg.n_heads = 2;
        cfg.window_t = 3;
        Surrogate::new(cfg, seed).unwrap()
    }

    fn window(m: &Surrogate<f64>) -> Array4<f64> {
        let c = &m.config;
        Array4::from_shape_fn((c.window_t, c.field_count, c.height, c.width), |(t, f, y, x)| {
            ((t + 1) as f64 * 0.3 + f as f64 * 0.7 + y as f64 * 0.11 - x as f64 * 0.05).sin()
        })
    }

    #[test]
    fn token_layout_round_trips() {
        let m = tiny(0);
        let x = Array2::from_shape_fn((m.config.tokens(), 8), |(r, c)| (r * 8 + c) as f64);
        let a = m.tokens_to_activation(&x);
        assert_eq!(a.shape(), &[3, 8, 4, 4]);
        assert_eq!(m.activation_to_tokens(&a), x);
        let w = window(&m);
        let rows = m.patchify(&w).slice(s![2 * 16.., ..]).to_owned();
        let last = w.index_axis(ndarray::Axis(0), 2).to_owned();
        assert_eq!(m.unpatchify(&rows), last);
    }

    #[test]
    fn identity_injection_is_bit_identical() {
        let m = tiny(1);
        let w = window(&m);
        let plain = m.forward(&w, None, &[LayerId(1)]).unwrap();
        let inj = InjectFn {
            layer: LayerId(1),
            f: |a: &ActivationTensor<f64>| Ok(a.clone()),
        };
        let injected = m.forward(&w, Some(&inj), &[LayerId(1)]).unwrap();
        assert_eq!(plain.delta, injected.delta);
        assert_eq!(plain.taps[&LayerId(1)].data, injected.taps[&LayerId(1)].data);
    }

    #[test]
    fn zeroing_final_block_yields_decoder_of_zeros() {
        let m = tiny(2);
        let w = window(&m);
        let inj = InjectFn {
            layer: LayerId(1),
            f: |a: &ActivationTensor<f64>| Ok(a.with_data(Array4::zeros(a.data.raw_dim()))),
        };
        let zeroed = m.forward(&w, Some(&inj), &[]).unwrap();
        let expected = m.decode(&Array2::zeros((m.config.tokens(), 8)));
        assert_eq!(zeroed.delta, expected);
        let plain = m.forward(&w, None, &[]).unwrap();
        assert_ne!(plain.delta, zeroed.delta);
    }

    #[test]
    fn tap_feeds_next_block() {
        let m = tiny(3);
        let w = window(&m);
        let out = m.forward(&w, None, &[LayerId(0), LayerId(1)]).unwrap();
        let x0 = m.activation_to_tokens(&out.taps[&LayerId(0)].data);
        let (x1, _) = m.blocks[1].forward(x0, &m.axes());
        assert_eq!(m.tokens_to_activation(&x1), out.taps[&LayerId(1)].data);
    }

    #[test]
    fn unknown_layer_and_bad_shape_rejected() {
        let m = tiny(4);
        let w = window(&m);
        assert!(matches!(
            m.forward(&w, None, &[LayerId(7)]),
            Err(Error::UnknownLayer { .. })
        ));
        let bad = Array4::zeros((3, 2, 16, 12));
        assert!(matches!(m.forward(&bad, None, &[]), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn default_tiny_tap_shape() {
        let m = Surrogate::<f32>::new(
            ModelConfig {
                embed_dim: 32,
                n_blocks: 2,
                ..ModelConfig::tiny(4, 64, 64)
            },
            0,
        )
        .unwrap();
        let w = Array4::zeros((4, 4, 64, 64));
        let out = m.forward(&w, None, &[LayerId(1)]).unwrap();
        assert_eq!(out.taps[&LayerId(1)].shape(), [4, 32, 8, 8]);
        assert_eq!(out.delta.shape(), &[4, 64, 64]);
    }

    #[test]
    fn parameter_names_are_unique() {
        let m = tiny(5);
        let mut names = Vec::new();
        m.visit(&mut |n, _, _| names.push(n.to_string()));
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert!(names.contains(&"blocks.1.attn_t.qkv.weight".to_string()));
        assert!(names.contains(&"blocks.0.ln_w.gamma".to_string()));
    }
}

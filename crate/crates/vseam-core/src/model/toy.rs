//! Bundled deterministic toy VLM.
//!
//! A decoder-style pre-norm transformer in double precision with seeded
//! weights. Image content enters as one contiguous block of patch-intensity
//! tokens; the forward pass applies an [`InterventionPlan`] inline and
//! captures a full [`ActivationCache`].

use ndarray::{s, Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, VseamError};
use crate::model::cache::ActivationCache;
use crate::model::config::ToyConfig;
use crate::model::geometry::PatchGrid;
use crate::model::plan::InterventionPlan;
use crate::model::tokenizer::ToyTokenizer;
use crate::model::{CaptureOptions, ModuleKind, TokenSequence};

const RMS_EPS: f64 = 1e-12;

/// Per-layer weights. All linear maps are bias-free; `x.dot(w)` convention.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub attn_norm_gain: Array1<f64>,
    pub w_query: Array2<f64>,
    pub w_key: Array2<f64>,
    pub w_value: Array2<f64>,
    pub w_output: Array2<f64>,
    pub mlp_norm_gain: Array1<f64>,
    pub w_mlp_in: Array2<f64>,
    pub w_mlp_out: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyWeights {
    pub token_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    pub final_norm_gain: Array1<f64>,
    pub unembedding: Array2<f64>,
}

/// The toy model: config, weights, and a word-level tokenizer.
#[derive(Debug, Clone)]
pub struct ToyVlm {
    config: ToyConfig,
    weights: ToyWeights,
    tokenizer: ToyTokenizer,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

impl ToyVlm {
    /// Build a toy model with seeded random weights.
    pub fn seeded(config: ToyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_scale = 1.0 / (d as f64).sqrt();
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                attn_norm_gain: Array1::ones(d),
                w_query: uniform(&mut rng, d, d, w_scale),
                w_key: uniform(&mut rng, d, d, w_scale),
                w_value: uniform(&mut rng, d, d, w_scale),
                w_output: uniform(&mut rng, d, d, w_scale),
                mlp_norm_gain: Array1::ones(d),
                w_mlp_in: uniform(&mut rng, d, config.mlp_dim(), w_scale),
                w_mlp_out: uniform(&mut rng, config.mlp_dim(), d, w_scale),
            })
            .collect();
        let weights = ToyWeights {
            token_embedding: uniform(&mut rng, config.vocab_size, d, 0.5),
            position_embedding: uniform(&mut rng, config.max_seq_len, d, 0.1),
            layers,
            final_norm_gain: Array1::ones(d),
            unembedding: uniform(&mut rng, d, config.vocab_size, w_scale),
        };
        Ok(ToyVlm::from_parts(config, weights))
    }

    /// Build a toy model in which every head of every layer computes the
    /// same output (head-0's query/key/value column blocks are copied to
    /// all heads). Masking any head then replaces it with the mean of
    /// identical vectors, which is the identity up to rounding.
    pub fn identical_heads(config: ToyConfig, seed: u64) -> Result<Self> {
        let mut model = Self::seeded(config, seed)?;
        let dh = config.head_dim;
        for layer in &mut model.weights.layers {
            for w in [&mut layer.w_query, &mut layer.w_key, &mut layer.w_value] {
                let base = w.slice(s![.., 0..dh]).to_owned();
                for h in 1..config.num_heads {
                    w.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&base);
                }
            }
        }
        Ok(model)
    }

    pub fn from_parts(config: ToyConfig, weights: ToyWeights) -> Self {
        let tokenizer = ToyTokenizer::new(config.vocab_size, planted::IMAGE_LEVELS);
        ToyVlm {
            config,
            weights,
            tokenizer,
        }
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn weights(&self) -> &ToyWeights {
        &self.weights
    }

    pub fn tokenizer(&self) -> &ToyTokenizer {
        &self.tokenizer
    }

    /// 4x4 grid of 2x2-pixel patches for the default 16-token image block.
    /// Non-square token counts fall back to a single row.
    pub fn patch_grid(&self) -> PatchGrid {
        let n = self.config.image_token_count;
        let side = (n as f64).sqrt() as usize;
        if side * side == n {
            PatchGrid {
                rows: side,
                cols: side,
                patch_w: 2,
                patch_h: 2,
            }
        } else {
            PatchGrid {
                rows: 1,
                cols: n,
                patch_w: 2,
                patch_h: 2,
            }
        }
    }

    fn rms_norm(x: &Array2<f64>, gain: &Array1<f64>) -> Array2<f64> {
        let d = x.ncols() as f64;
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            row *= inv;
        }
        out * &gain.view().insert_axis(ndarray::Axis(0))
    }

    fn silu(x: f64) -> f64 {
        x / (1.0 + (-x).exp())
    }

    /// Run the model over `seq`, applying `plan` inline.
    ///
    /// Returns per-position logits (`T x V`) and the activation cache of
    /// the executed (post-intervention) pass. With an empty plan this is
    /// the clean forward pass.
    pub fn forward(
        &self,
        seq: &TokenSequence,
        plan: &InterventionPlan,
        capture: CaptureOptions,
    ) -> Result<(Array2<f64>, ActivationCache)> {
        let cfg = &self.config;
        let t = seq.len();
        if t > cfg.max_seq_len {
            return Err(VseamError::SequenceTooLong {
                len: t,
                max: cfg.max_seq_len,
            });
        }
        for &id in seq.ids() {
            if id as usize >= cfg.vocab_size {
                return Err(VseamError::TokenOutOfRange {
                    token: id,
                    vocab: cfg.vocab_size,
                });
            }
        }
        plan.validate(cfg.num_layers, cfg.num_heads, cfg.hidden_dim, t)?;

        let d = cfg.hidden_dim;
        let dh = cfg.head_dim;
        let heads = cfg.num_heads;

        let mut x = Array2::<f64>::zeros((t, d));
        for (pos, &id) in seq.ids().iter().enumerate() {
            let row = &self.weights.token_embedding.row(id as usize)
                + &self.weights.position_embedding.row(pos);
            x.row_mut(pos).assign(&row);
        }
        let embedding = x.clone();

        let mut att_states = Vec::with_capacity(cfg.num_layers);
        let mut mlp_states = Vec::with_capacity(cfg.num_layers);
        let mut all_head_outputs = Vec::with_capacity(cfg.num_layers);
        let mut all_attention = capture.attention.then(Vec::new);

        for (l, lw) in self.weights.layers.iter().enumerate() {
            let normed = Self::rms_norm(&x, &lw.attn_norm_gain);
            let q = normed.dot(&lw.w_query);
            let k = normed.dot(&lw.w_key);
            let v = normed.dot(&lw.w_value);

            let mut head_outputs: Vec<Array2<f64>> = Vec::with_capacity(heads);
            let mut attn_capture = all_attention
                .as_ref()
                .map(|_| Array3::<f64>::zeros((heads, t, t)));
            let inv_sqrt = 1.0 / (dh as f64).sqrt();
            for h in 0..heads {
                let qh = q.slice(s![.., h * dh..(h + 1) * dh]);
                let kh = k.slice(s![.., h * dh..(h + 1) * dh]);
                let vh = v.slice(s![.., h * dh..(h + 1) * dh]);
                let mut out = Array2::<f64>::zeros((t, dh));
                for i in 0..t {
                    // Causal attention over positions 0..=i.
                    let mut scores = vec![0.0; i + 1];
                    let mut max = f64::NEG_INFINITY;
                    for (j, sc) in scores.iter_mut().enumerate() {
                        *sc = qh.row(i).dot(&kh.row(j)) * inv_sqrt;
                        max = max.max(*sc);
                    }
                    let mut denom = 0.0;
                    for sc in &mut scores {
                        *sc = (*sc - max).exp();
                        denom += *sc;
                    }
                    for (j, sc) in scores.iter().enumerate() {
                        let w = sc / denom;
                        if let Some(a) = attn_capture.as_mut() {
                            a[[h, i, j]] = w;
                        }
                        let mut row_i = out.row_mut(i);
                        row_i.scaled_add(w, &vh.row(j));
                    }
                }
                head_outputs.push(out);
            }
            if let (Some(all), Some(a)) = (all_attention.as_mut(), attn_capture) {
                all.push(a);
            }

            // Head interventions. Masks are computed jointly from the
            // unmodified head outputs; rescales apply afterwards.
            let masks = plan.masks_at(l);
            if !masks.is_empty() {
                if heads < 2 {
                    return Err(VseamError::SingleHeadMask);
                }
                let originals = head_outputs.clone();
                for &m in &masks {
                    let mut mean = Array2::<f64>::zeros((t, dh));
                    for (h, out) in originals.iter().enumerate() {
                        if h != m {
                            mean += out;
                        }
                    }
                    mean /= (heads - 1) as f64;
                    head_outputs[m] = mean;
                }
            }
            for (h, factor) in plan.rescales_at(l) {
                head_outputs[h].mapv_inplace(|v| v * factor);
            }

            let mut ctx = Array2::<f64>::zeros((t, d));
            for (h, out) in head_outputs.iter().enumerate() {
                ctx.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(out);
            }
            x = &x + &ctx.dot(&lw.w_output);

            if let Some((positions, donor)) = plan.patches_at(l, ModuleKind::Attention) {
                let src = donor.module_state(l, ModuleKind::Attention);
                for &p in positions {
                    x.row_mut(p).assign(&src.row(p));
                }
            }
            att_states.push(x.clone());

            let normed2 = Self::rms_norm(&x, &lw.mlp_norm_gain);
            let hidden = normed2.dot(&lw.w_mlp_in).mapv(Self::silu);
            x = &x + &hidden.dot(&lw.w_mlp_out);

            if let Some((positions, donor)) = plan.patches_at(l, ModuleKind::Mlp) {
                let src = donor.module_state(l, ModuleKind::Mlp);
                for &p in positions {
                    x.row_mut(p).assign(&src.row(p));
                }
            }
            mlp_states.push(x.clone());
            all_head_outputs.push(head_outputs);
        }

        let final_state = Self::rms_norm(&x, &self.weights.final_norm_gain);
        let logits = final_state.dot(&self.weights.unembedding);

        let cache = ActivationCache::new(
            t,
            d,
            dh,
            embedding,
            att_states,
            mlp_states,
            all_head_outputs,
            all_attention,
        );
        Ok((logits, cache))
    }

    /// Final RMS norm followed by the unembedding, for logit-lens projections.
    pub fn project_to_vocab(&self, state: &Array1<f64>) -> Array1<f64> {
        let d = state.len() as f64;
        let ms = state.iter().map(|v| v * v).sum::<f64>() / d;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        let normed = state.mapv(|v| v * inv) * &self.weights.final_norm_gain;
        normed.dot(&self.weights.unembedding)
    }
}

/// Hand-constructed model in which one designated head carries the image
/// brightness signal and one designated head injects a distracting parity
/// signal. Everything else is near-zero, so masking any other head has
/// exactly no effect on the logits.
pub mod planted {
    use super::*;

    pub const SIGNAL_LAYER: usize = 1;
    pub const SIGNAL_HEAD: usize = 2;
    pub const NOISE_LAYER: usize = 2;
    pub const NOISE_HEAD: usize = 1;

    /// Residual channel written by image-token embeddings: +1 for bright
    /// patches (level >= 8), -1 for dark.
    pub const BRIGHTNESS_CHANNEL: usize = 0;
    /// Residual channel carrying patch-level parity: +1 odd, -1 even.
    pub const PARITY_CHANNEL: usize = 1;
    /// Residual channel the planted heads write; the unembedding maps it
    /// to the yes/no logit difference.
    pub const ANSWER_CHANNEL: usize = 2;

    pub const IMAGE_LEVELS: usize = 16;
    const SIGNAL_GAIN: f64 = 1.0;
    const NOISE_GAIN: f64 = 0.35;
    const ANSWER_LOGIT_GAIN: f64 = 10.0;
    const BACKGROUND_SCALE: f64 = 1e-3;

    /// Build the planted-head model. `seed` only drives the tiny background
    /// noise that breaks ties; the planted structure is fixed.
    pub fn build(seed: u64) -> ToyVlm {
        let config = ToyConfig::default();
        let d = config.hidden_dim;
        let dh = config.head_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut noise =
            |rows: usize, cols: usize| uniform(&mut rng, rows, cols, BACKGROUND_SCALE);

        let mut token_embedding = noise(config.vocab_size, d);
        let tokenizer = ToyTokenizer::new(config.vocab_size, IMAGE_LEVELS);
        for level in 0..IMAGE_LEVELS {
            let id = tokenizer.image_level_token(level) as usize;
            token_embedding[[id, BRIGHTNESS_CHANNEL]] = if level >= 8 { 1.0 } else { -1.0 };
            token_embedding[[id, PARITY_CHANNEL]] = if level % 2 == 1 { 1.0 } else { -1.0 };
        }
        let position_embedding = noise(config.max_seq_len, d);

        let layers = (0..config.num_layers)
            .map(|l| {
                let mut w_value = Array2::<f64>::zeros((d, d));
                let mut w_output = Array2::<f64>::zeros((d, d));
                if l == SIGNAL_LAYER {
                    w_value[[BRIGHTNESS_CHANNEL, SIGNAL_HEAD * dh]] = 1.0;
                    w_output[[SIGNAL_HEAD * dh, ANSWER_CHANNEL]] = SIGNAL_GAIN;
                }
                if l == NOISE_LAYER {
                    w_value[[PARITY_CHANNEL, NOISE_HEAD * dh]] = 1.0;
                    w_output[[NOISE_HEAD * dh, ANSWER_CHANNEL]] = -NOISE_GAIN;
                }
                LayerWeights {
                    attn_norm_gain: Array1::ones(d),
                    // Zero queries/keys give uniform attention over the
                    // causal prefix, so the planted heads pool the image
                    // channels position-wise.
                    w_query: Array2::zeros((d, d)),
                    w_key: Array2::zeros((d, d)),
                    w_value,
                    w_output,
                    mlp_norm_gain: Array1::ones(d),
                    w_mlp_in: noise(d, config.mlp_dim()),
                    w_mlp_out: Array2::zeros((config.mlp_dim(), d)),
                }
            })
            .collect();

        let mut unembedding = noise(d, config.vocab_size);
        unembedding[[ANSWER_CHANNEL, tokenizer.yes_id() as usize]] = ANSWER_LOGIT_GAIN;
        unembedding[[ANSWER_CHANNEL, tokenizer.no_id() as usize]] = -ANSWER_LOGIT_GAIN;

        let weights = ToyWeights {
            token_embedding,
            position_embedding,
            layers,
            final_norm_gain: Array1::ones(d),
            unembedding,
        };
        ToyVlm::from_parts(config, weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Modality;

    fn probe_seq(model: &ToyVlm) -> TokenSequence {
        let img: Vec<u32> = (0..model.config().image_token_count)
            .map(|i| model.tokenizer().image_level_token(i % 16))
            .collect();
        let text = model.tokenizer().encode("is the picture light");
        let mut ids = img.clone();
        ids.extend(&text);
        let mut tags = vec![Modality::Image; img.len()];
        tags.extend(vec![Modality::Text; text.len()]);
        TokenSequence::new(ids, tags).unwrap()
    }

    #[test]
    fn seeded_model_is_deterministic() {
        let a = ToyVlm::seeded(ToyConfig::default(), 7).unwrap();
        let b = ToyVlm::seeded(ToyConfig::default(), 7).unwrap();
        let seq = probe_seq(&a);
        let (la, _) = a
            .forward(&seq, &InterventionPlan::empty(), CaptureOptions::default())
            .unwrap();
        let (lb, _) = b
            .forward(&seq, &InterventionPlan::empty(), CaptureOptions::default())
            .unwrap();
        assert_eq!(la, lb);
    }

    #[test]
    fn different_seeds_give_different_logits() {
        let a = ToyVlm::seeded(ToyConfig::default(), 7).unwrap();
        let b = ToyVlm::seeded(ToyConfig::default(), 8).unwrap();
        let seq = probe_seq(&a);
        let (la, _) = a
            .forward(&seq, &InterventionPlan::empty(), CaptureOptions::default())
            .unwrap();
        let (lb, _) = b
            .forward(&seq, &InterventionPlan::empty(), CaptureOptions::default())
            .unwrap();
        let max_abs = (&la - &lb).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_abs > 1e-6, "seeds 7 and 8 should differ, got {max_abs}");
    }

    #[test]
    fn bad_dimensions_are_rejected() {
        let cfg = ToyConfig {
            head_dim: 7,
            ..ToyConfig::default()
        };
        assert!(matches!(
            ToyVlm::seeded(cfg, 0),
            Err(VseamError::InvalidDimensions { .. })
        ));
    }

    #[test]
    fn head_decomposition_reproduces_attention_contribution() {
        let model = ToyVlm::seeded(ToyConfig::default(), 11).unwrap();
        let seq = probe_seq(&model);
        let (_, cache) = model
            .forward(&seq, &InterventionPlan::empty(), CaptureOptions::default())
            .unwrap();
        let cfg = model.config();
        for l in 0..cfg.num_layers {
            let mut ctx = Array2::<f64>::zeros((seq.len(), cfg.hidden_dim));
            for h in 0..cfg.num_heads {
                ctx.slice_mut(s![.., h * cfg.head_dim..(h + 1) * cfg.head_dim])
                    .assign(cache.head_output(l, h));
            }
            let recon = ctx.dot(&model.weights().layers[l].w_output);
            let contrib = cache.attention_contribution(l);
            let max_abs = (&recon - &contrib).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max_abs < 1e-9, "layer {l}: decomposition off by {max_abs}");
        }
    }

    #[test]
    fn unit_rescale_is_identity() {
        let model = ToyVlm::seeded(ToyConfig::default(), 3).unwrap();
        let seq = probe_seq(&model);
        let (clean, _) = model
            .forward(&seq, &InterventionPlan::empty(), CaptureOptions::default())
            .unwrap();
        let plan = InterventionPlan::from_actions([crate::model::Action::RescaleHead {
            layer: 2,
            head: 1,
            factor: 1.0,
        }])
        .unwrap();
        let (scaled, _) = model
            .forward(&seq, &plan, CaptureOptions::default())
            .unwrap();
        assert_eq!(clean, scaled);
    }

    #[test]
    fn self_donor_full_patch_is_identity() {
        let model = ToyVlm::seeded(ToyConfig::default(), 5).unwrap();
        let seq = probe_seq(&model);
        let (clean, cache) = model
            .forward(&seq, &InterventionPlan::empty(), CaptureOptions::default())
            .unwrap();
        let donor = std::sync::Arc::new(cache);
        let all: Vec<usize> = (0..seq.len()).collect();
        let plan = InterventionPlan::from_actions([
            crate::model::Action::Patch {
                layer: 1,
                module: ModuleKind::Attention,
                positions: all.clone(),
                donor: donor.clone(),
            },
            crate::model::Action::Patch {
                layer: 1,
                module: ModuleKind::Mlp,
                positions: all,
                donor,
            },
        ])
        .unwrap();
        let (patched, _) = model
            .forward(&seq, &plan, CaptureOptions::default())
            .unwrap();
        assert_eq!(clean, patched);
    }
}

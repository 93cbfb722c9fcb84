//! Logit lens: project intermediate attention/MLP states through the final
//! normalization and unembedding into per-layer top-k token grids.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VseamError};
use crate::model::{CaptureOptions, InterventionPlan, ModelHandle, ModuleKind, TokenSequence};

/// What to project through the lens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LensMode {
    /// Residual-stream state after the module (default: the final layer's
    /// MLP row then reproduces the model's actual next-token ranking).
    Residual,
    /// The module's raw contribution (state minus incoming residual).
    RawModule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensEntry {
    pub token: u32,
    pub text: String,
    pub logit: f64,
}

/// Per-layer top-k projections at one position.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LensGrid {
    pub tau: ModuleKind,
    pub position: usize,
    pub k: usize,
    pub mode: LensMode,
    /// `layers[l]` holds exactly `min(k, V)` entries sorted by logit
    /// descending (ties by token id ascending).
    pub layers: Vec<Vec<LensEntry>>,
}

impl LensGrid {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Project module `tau`'s state at `position` through the unembedding for
/// every layer and keep the top-k tokens.
pub fn lens_grid(
    model: &ModelHandle,
    seq: &TokenSequence,
    tau: ModuleKind,
    position: usize,
    k: usize,
    mode: LensMode,
) -> Result<LensGrid> {
    if position >= seq.len() {
        return Err(VseamError::PositionOutOfRange {
            position,
            len: seq.len(),
        });
    }
    let (_, cache) =
        model.forward_with_capture(seq, &InterventionPlan::empty(), CaptureOptions::default())?;
    let take = k.max(1).min(model.vocab_size());

    let mut layers = Vec::with_capacity(model.num_layers());
    for l in 0..model.num_layers() {
        let state = match mode {
            LensMode::Residual => cache.module_state(l, tau).row(position).to_owned(),
            LensMode::RawModule => match tau {
                ModuleKind::Attention => {
                    (&cache.module_state(l, ModuleKind::Attention).row(position)
                        - &cache.residual_before(l).row(position))
                        .to_owned()
                }
                ModuleKind::Mlp => (&cache.module_state(l, ModuleKind::Mlp).row(position)
                    - &cache.module_state(l, ModuleKind::Attention).row(position))
                    .to_owned(),
            },
        };
        let logits = model.backend().project_to_vocab(state.view());
        let mut indexed: Vec<(u32, f64)> = logits
            .iter()
            .enumerate()
            .map(|(i, &v)| (i as u32, v))
            .collect();
        indexed.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        layers.push(
            indexed
                .into_iter()
                .take(take)
                .map(|(token, logit)| LensEntry {
                    token,
                    text: model.token_text(token),
                    logit,
                })
                .collect(),
        );
    }

    Ok(LensGrid {
        tau,
        position,
        k: take,
        mode,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ToyConfig;

    fn probe(model: &ModelHandle) -> TokenSequence {
        let img: Vec<u32> = (0..16).map(|i| 48 + (i % 16) as u32).collect();
        TokenSequence::from_blocks(img, model.tokenize("is the picture light")).unwrap()
    }

    #[test]
    fn full_vocab_lens_is_a_permutation() {
        let model = ModelHandle::toy(ToyConfig::default(), 12).unwrap();
        let seq = probe(&model);
        let grid = lens_grid(
            &model,
            &seq,
            ModuleKind::Attention,
            seq.last_position(),
            64,
            LensMode::Residual,
        )
        .unwrap();
        for layer in &grid.layers {
            assert_eq!(layer.len(), 64);
            let mut tokens: Vec<u32> = layer.iter().map(|e| e.token).collect();
            tokens.sort_unstable();
            assert_eq!(tokens, (0..64).collect::<Vec<u32>>());
            for pair in layer.windows(2) {
                assert!(pair[0].logit >= pair[1].logit);
            }
        }
    }

    #[test]
    fn final_mlp_residual_lens_matches_model_argmax() {
        let model = ModelHandle::toy(ToyConfig::default(), 19).unwrap();
        let seq = probe(&model);
        let (logits, _) = model.forward(&seq, &InterventionPlan::empty()).unwrap();
        let last = logits.row(seq.last_position());
        let argmax = last
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i as u32)
            .unwrap();
        let grid = lens_grid(
            &model,
            &seq,
            ModuleKind::Mlp,
            seq.last_position(),
            5,
            LensMode::Residual,
        )
        .unwrap();
        assert_eq!(grid.layers.last().unwrap()[0].token, argmax);
    }

    #[test]
    fn lens_is_deterministic() {
        let model = ModelHandle::toy(ToyConfig::default(), 23).unwrap();
        let seq = probe(&model);
        let a = lens_grid(&model, &seq, ModuleKind::Attention, 5, 5, LensMode::RawModule).unwrap();
        let b = lens_grid(&model, &seq, ModuleKind::Attention, 5, 5, LensMode::RawModule).unwrap();
        assert_eq!(a.layers.len(), b.layers.len());
        for (x, y) in a.layers.iter().zip(&b.layers) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn out_of_range_position_is_rejected() {
        let model = ModelHandle::toy(ToyConfig::default(), 1).unwrap();
        let seq = probe(&model);
        assert!(matches!(
            lens_grid(&model, &seq, ModuleKind::Mlp, seq.len(), 5, LensMode::Residual),
            Err(VseamError::PositionOutOfRange { .. })
        ));
    }
}

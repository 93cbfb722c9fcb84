//! Intervention-capable model abstraction and the bundled toy backend.
//!
//! [`ModelHandle`] wraps any backend implementing [`InterventionVlm`], the
//! adapter contract for hooking a transformer VLM: expose layer/head counts,
//! apply [`InterventionPlan`] actions at `(layer, module)` and
//! `(layer, head)` granularity during a forward pass, and return final
//! logits plus an [`ActivationCache`].
//!
//! Handles are cheap to clone; independent clones may run forwards in
//! parallel workers. A single handle runs its forwards one at a time
//! (`forward` takes `&self` and the bundled backend is pure, so this is
//! enforced by construction rather than locking).

mod cache;
mod config;
mod geometry;
mod plan;
mod serialize;
mod tokenizer;
mod toy;

use std::path::Path;
use std::sync::Arc;

use image::GrayImage;
use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

pub use cache::ActivationCache;
pub use config::ToyConfig;
pub use geometry::{PatchGrid, PixelBox};
pub use plan::{Action, InterventionPlan};
pub use serialize::{load_toy_model, save_toy_model};
pub use tokenizer::ToyTokenizer;
pub use toy::{planted, LayerWeights, ToyVlm, ToyWeights};

use crate::error::{Result, VseamError};

/// Which sublayer of a transformer block an operation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleKind {
    #[serde(rename = "att")]
    Attention,
    Mlp,
}

impl std::fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModuleKind::Attention => write!(f, "att"),
            ModuleKind::Mlp => write!(f, "mlp"),
        }
    }
}

impl std::str::FromStr for ModuleKind {
    type Err = VseamError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "att" | "attention" => Ok(ModuleKind::Attention),
            "mlp" => Ok(ModuleKind::Mlp),
            other => Err(VseamError::Config {
                field: "tau".to_string(),
                message: format!("unknown module `{other}` (expected att|mlp)"),
            }),
        }
    }
}

/// Modality tag for one sequence position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

/// Token ids plus aligned modality tags. Image positions must form one
/// contiguous block, mirroring projected visual tokens inserted into the
/// text sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
    tags: Vec<Modality>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, tags: Vec<Modality>) -> Result<Self> {
        if ids.is_empty() {
            return Err(VseamError::InvalidSequence("empty sequence".to_string()));
        }
        if ids.len() != tags.len() {
            return Err(VseamError::InvalidSequence(format!(
                "{} ids but {} modality tags",
                ids.len(),
                tags.len()
            )));
        }
        let image_positions: Vec<usize> = tags
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == Modality::Image)
            .map(|(i, _)| i)
            .collect();
        if let (Some(&first), Some(&last)) = (image_positions.first(), image_positions.last()) {
            if last - first + 1 != image_positions.len() {
                return Err(VseamError::InvalidSequence(
                    "image positions are not contiguous".to_string(),
                ));
            }
        }
        Ok(TokenSequence { ids, tags })
    }

    /// Image block followed by text, the layout used by the toy backend.
    pub fn from_blocks(image_ids: Vec<u32>, text_ids: Vec<u32>) -> Result<Self> {
        let mut ids = image_ids.clone();
        ids.extend(&text_ids);
        let mut tags = vec![Modality::Image; image_ids.len()];
        tags.extend(vec![Modality::Text; text_ids.len()]);
        Self::new(ids, tags)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn tags(&self) -> &[Modality] {
        &self.tags
    }

    /// Positions of the contiguous image block, if any.
    pub fn image_range(&self) -> Option<std::ops::Range<usize>> {
        let first = self.tags.iter().position(|t| *t == Modality::Image)?;
        let count = self.tags.iter().filter(|t| **t == Modality::Image).count();
        Some(first..first + count)
    }

    pub fn text_positions(&self) -> Vec<usize> {
        self.tags
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == Modality::Text)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn last_position(&self) -> usize {
        self.ids.len() - 1
    }
}

/// What to capture during a forward pass. Module states and per-head
/// outputs are always captured; attention weights are opt-in.
#[derive(Debug, Clone, Copy, Default)]
pub struct CaptureOptions {
    pub attention: bool,
}

impl CaptureOptions {
    pub fn with_attention() -> Self {
        CaptureOptions { attention: true }
    }
}

/// Backend provenance tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Toy,
    ExternalAdapter,
}

/// Adapter contract for intervention-capable backends.
///
/// An external model (e.g. a full-scale VLM served elsewhere) can join the
/// toolkit by implementing this trait: report dimensions, tokenize, encode
/// images to the token block, and run hooked forwards that honor an
/// [`InterventionPlan`].
pub trait InterventionVlm: Send + Sync {
    fn num_layers(&self) -> usize;
    fn num_heads(&self) -> usize;
    fn hidden_dim(&self) -> usize;
    fn head_dim(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn image_token_count(&self) -> usize;
    fn max_seq_len(&self) -> usize;
    fn patch_grid(&self) -> PatchGrid;
    fn backend_kind(&self) -> BackendKind;

    fn tokenize(&self, text: &str) -> Vec<u32>;
    fn token_text(&self, id: u32) -> String;
    fn encode_image(&self, image: &GrayImage) -> Result<Vec<u32>>;

    fn forward(
        &self,
        seq: &TokenSequence,
        plan: &InterventionPlan,
        capture: CaptureOptions,
    ) -> Result<(Array2<f64>, ActivationCache)>;

    /// Final normalization plus unembedding, for logit-lens projections.
    fn project_to_vocab(&self, state: ArrayView1<f64>) -> Array1<f64>;

    /// Access to toy weights when the backend is the bundled toy model.
    fn as_toy(&self) -> Option<&ToyVlm> {
        None
    }
}

impl InterventionVlm for ToyVlm {
    fn num_layers(&self) -> usize {
        self.config().num_layers
    }
    fn num_heads(&self) -> usize {
        self.config().num_heads
    }
    fn hidden_dim(&self) -> usize {
        self.config().hidden_dim
    }
    fn head_dim(&self) -> usize {
        self.config().head_dim
    }
    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }
    fn image_token_count(&self) -> usize {
        self.config().image_token_count
    }
    fn max_seq_len(&self) -> usize {
        self.config().max_seq_len
    }
    fn patch_grid(&self) -> PatchGrid {
        ToyVlm::patch_grid(self)
    }
    fn backend_kind(&self) -> BackendKind {
        BackendKind::Toy
    }

    fn tokenize(&self, text: &str) -> Vec<u32> {
        self.tokenizer().encode(text)
    }

    fn token_text(&self, id: u32) -> String {
        self.tokenizer().decode(id)
    }

    fn encode_image(&self, image: &GrayImage) -> Result<Vec<u32>> {
        let grid = ToyVlm::patch_grid(self);
        if image.width() as usize != grid.image_width()
            || image.height() as usize != grid.image_height()
        {
            return Err(VseamError::Image(format!(
                "expected a {}x{} image, got {}x{}",
                grid.image_width(),
                grid.image_height(),
                image.width(),
                image.height()
            )));
        }
        let levels = self.tokenizer().image_levels() as f64;
        let mut tokens = Vec::with_capacity(grid.patch_count());
        for p in 0..grid.patch_count() {
            let rect = grid.patch_rect(p);
            let mut sum = 0.0;
            let mut n = 0.0;
            for y in rect.y0 as u32..rect.y1 as u32 {
                for x in rect.x0 as u32..rect.x1 as u32 {
                    sum += f64::from(image.get_pixel(x, y).0[0]);
                    n += 1.0;
                }
            }
            let level = ((sum / n) / (256.0 / levels)).floor() as usize;
            let level = level.min(self.tokenizer().image_levels() - 1);
            tokens.push(self.tokenizer().image_level_token(level));
        }
        Ok(tokens)
    }

    fn forward(
        &self,
        seq: &TokenSequence,
        plan: &InterventionPlan,
        capture: CaptureOptions,
    ) -> Result<(Array2<f64>, ActivationCache)> {
        ToyVlm::forward(self, seq, plan, capture)
    }

    fn project_to_vocab(&self, state: ArrayView1<f64>) -> Array1<f64> {
        ToyVlm::project_to_vocab(self, &state.to_owned())
    }

    fn as_toy(&self) -> Option<&ToyVlm> {
        Some(self)
    }
}

/// Binary yes/no prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinaryAnswer {
    Yes,
    No,
}

impl BinaryAnswer {
    pub fn as_str(&self) -> &'static str {
        match self {
            BinaryAnswer::Yes => "yes",
            BinaryAnswer::No => "no",
        }
    }

    pub fn from_str_answer(s: &str) -> Option<Self> {
        match s.to_lowercase().as_str() {
            "yes" => Some(BinaryAnswer::Yes),
            "no" => Some(BinaryAnswer::No),
            _ => None,
        }
    }
}

/// Cloneable handle to an intervention-capable model.
#[derive(Clone)]
pub struct ModelHandle {
    inner: Arc<dyn InterventionVlm>,
}

impl std::fmt::Debug for ModelHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelHandle")
            .field("backend", &self.inner.backend_kind())
            .field("layers", &self.inner.num_layers())
            .field("heads", &self.inner.num_heads())
            .finish()
    }
}

impl ModelHandle {
    pub fn new(backend: Arc<dyn InterventionVlm>) -> Self {
        ModelHandle { inner: backend }
    }

    /// Seeded random toy model.
    pub fn toy(config: ToyConfig, seed: u64) -> Result<Self> {
        Ok(Self::new(Arc::new(ToyVlm::seeded(config, seed)?)))
    }

    /// Toy model with the planted signal/noise heads.
    pub fn planted(seed: u64) -> Self {
        Self::new(Arc::new(planted::build(seed)))
    }

    /// Toy model whose heads all compute identical outputs.
    pub fn identical_heads(config: ToyConfig, seed: u64) -> Result<Self> {
        Ok(Self::new(Arc::new(ToyVlm::identical_heads(config, seed)?)))
    }

    pub fn from_weights_file(path: &Path) -> Result<Self> {
        Ok(Self::new(Arc::new(load_toy_model(path)?)))
    }

    pub fn backend(&self) -> &dyn InterventionVlm {
        self.inner.as_ref()
    }

    pub fn num_layers(&self) -> usize {
        self.inner.num_layers()
    }

    pub fn num_heads(&self) -> usize {
        self.inner.num_heads()
    }

    pub fn hidden_dim(&self) -> usize {
        self.inner.hidden_dim()
    }

    pub fn head_dim(&self) -> usize {
        self.inner.head_dim()
    }

    pub fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    pub fn image_token_count(&self) -> usize {
        self.inner.image_token_count()
    }

    pub fn patch_grid(&self) -> PatchGrid {
        self.inner.patch_grid()
    }

    pub fn forward(
        &self,
        seq: &TokenSequence,
        plan: &InterventionPlan,
    ) -> Result<(Array2<f64>, ActivationCache)> {
        self.inner.forward(seq, plan, CaptureOptions::default())
    }

    pub fn forward_with_capture(
        &self,
        seq: &TokenSequence,
        plan: &InterventionPlan,
        capture: CaptureOptions,
    ) -> Result<(Array2<f64>, ActivationCache)> {
        self.inner.forward(seq, plan, capture)
    }

    /// Resolve `answer` to a single token id, erroring when it does not
    /// tokenize to exactly one token.
    pub fn answer_token(&self, answer: &str) -> Result<u32> {
        let ids = self.inner.tokenize(answer);
        if ids.len() != 1 {
            return Err(VseamError::UntokenizableAnswer {
                answer: answer.to_string(),
            });
        }
        Ok(ids[0])
    }

    pub fn yes_no_tokens(&self) -> Result<(u32, u32)> {
        Ok((self.answer_token("yes")?, self.answer_token("no")?))
    }

    /// Combined image-block + question sequence for the toy layout.
    pub fn encode_input(&self, question: &str, image: &GrayImage) -> Result<TokenSequence> {
        let image_ids = self.inner.encode_image(image)?;
        let text_ids = self.inner.tokenize(question);
        TokenSequence::from_blocks(image_ids, text_ids)
    }

    /// Binary prediction: compare the final-position logits of the yes and
    /// no tokens (argmax restricted to the candidate answers).
    pub fn binary_answer(
        &self,
        seq: &TokenSequence,
        plan: &InterventionPlan,
    ) -> Result<BinaryAnswer> {
        let (logits, _) = self.forward(seq, plan)?;
        let last = logits.row(seq.last_position());
        let (yes, no) = self.yes_no_tokens()?;
        Ok(if last[yes as usize] >= last[no as usize] {
            BinaryAnswer::Yes
        } else {
            BinaryAnswer::No
        })
    }

    pub fn token_text(&self, id: u32) -> String {
        self.inner.token_text(id)
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        self.inner.tokenize(text)
    }
}

/// Raw logit and full-vocabulary softmax probability of `answer_token`
/// in a final-position logit row (temperature 1).
pub fn readout(final_logits: ArrayView1<f64>, answer_token: u32) -> Result<(f64, f64)> {
    let v = final_logits.len();
    if answer_token as usize >= v {
        return Err(VseamError::TokenOutOfRange {
            token: answer_token,
            vocab: v,
        });
    }
    let logit = final_logits[answer_token as usize];
    let max = final_logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let denom: f64 = final_logits.iter().map(|&x| (x - max).exp()).sum();
    let prob = (logit - max).exp() / denom;
    Ok((logit, prob))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    #[test]
    fn uniform_logits_give_uniform_probability() {
        let logits = Array1::from_elem(64, 3.25);
        let (_, p) = readout(logits.view(), 17).unwrap();
        assert!((p - 1.0 / 64.0).abs() < 1e-15);
    }

    #[test]
    fn dominant_logit_takes_nearly_all_mass() {
        let mut logits = Array1::zeros(64);
        logits[3] = 20.0;
        let (l, p) = readout(logits.view(), 3).unwrap();
        assert_eq!(l, 20.0);
        assert!(p > 0.999);
    }

    #[test]
    fn shifting_logits_shifts_logit_but_not_probability() {
        let logits = Array1::from_shape_fn(64, |i| (i as f64 * 0.37).sin());
        let shifted = logits.mapv(|v| v + 5.5);
        let (l0, p0) = readout(logits.view(), 10).unwrap();
        let (l1, p1) = readout(shifted.view(), 10).unwrap();
        assert!((l1 - (l0 + 5.5)).abs() < 1e-12);
        assert!((p1 - p0).abs() < 1e-12);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let logits = Array1::from_shape_fn(64, |i| (i as f64 * 1.1).cos() * 4.0);
        let total: f64 = (0..64)
            .map(|t| readout(logits.view(), t as u32).unwrap().1)
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_vocab_token_is_rejected() {
        let logits = Array1::zeros(64);
        assert!(matches!(
            readout(logits.view(), 64),
            Err(VseamError::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn non_contiguous_image_block_is_rejected() {
        let err = TokenSequence::new(
            vec![1, 2, 3],
            vec![Modality::Image, Modality::Text, Modality::Image],
        )
        .unwrap_err();
        assert!(matches!(err, VseamError::InvalidSequence(_)));
    }
}

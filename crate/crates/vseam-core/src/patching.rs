//! Activation patching: corrupted-token indexing, single-site patched
//! logit deltas, and dataset-averaged layer-by-token causal grids.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::{triple_sequence, VQATriple};
use crate::error::{Result, VseamError};
use crate::model::{
    Action, ActivationCache, InterventionPlan, ModelHandle, ModuleKind, TokenSequence,
};
use crate::workers::par_map;

/// How to pick the corrupted-token index set for a triple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum CorruptionStrategy {
    /// Every image-token position.
    AllImage,
    /// Image positions whose patch footprint intersects any annotated box
    /// (the edit is local, so only footprint-intersecting tokens count as
    /// corrupted).
    BboxPatches,
    /// Question-token positions of the substituted semantic unit, found by
    /// diffing the original question against the counterfactual one.
    TextSpan { counterfactual_question: String },
    /// The whole sequence.
    AllPositions,
}

impl CorruptionStrategy {
    pub fn tag(&self) -> &'static str {
        match self {
            CorruptionStrategy::AllImage => "all-image",
            CorruptionStrategy::BboxPatches => "bbox-patches",
            CorruptionStrategy::TextSpan { .. } => "text-span",
            CorruptionStrategy::AllPositions => "all-positions",
        }
    }
}

/// Sorted corrupted-token positions for one triple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionIndex {
    pub triple_id: String,
    pub strategy: String,
    pub positions: Vec<usize>,
}

/// Compute the corrupted-token index set for `triple` under `strategy`.
pub fn corrupted_indices(
    triple: &VQATriple,
    model: &ModelHandle,
    seq: &TokenSequence,
    strategy: &CorruptionStrategy,
) -> Result<CorruptionIndex> {
    let image_range = seq.image_range().unwrap_or(0..0);
    let positions: Vec<usize> = match strategy {
        CorruptionStrategy::AllImage => image_range.collect(),
        CorruptionStrategy::BboxPatches => {
            if triple.boxes.is_empty() {
                return Err(VseamError::MissingBoxes {
                    id: triple.id.clone(),
                });
            }
            let grid = model.patch_grid();
            let mut patches: Vec<usize> = triple
                .boxes
                .iter()
                .flat_map(|b| grid.patches_intersecting(&b.rect()))
                .collect();
            patches.sort_unstable();
            patches.dedup();
            patches
                .into_iter()
                .map(|p| image_range.start + p)
                .collect()
        }
        CorruptionStrategy::TextSpan {
            counterfactual_question,
        } => {
            let orig = model.tokenize(&triple.question);
            let cf = model.tokenize(counterfactual_question);
            let mut prefix = 0;
            while prefix < orig.len() && prefix < cf.len() && orig[prefix] == cf[prefix] {
                prefix += 1;
            }
            let mut suffix = 0;
            while suffix < orig.len() - prefix
                && suffix < cf.len() - prefix
                && orig[orig.len() - 1 - suffix] == cf[cf.len() - 1 - suffix]
            {
                suffix += 1;
            }
            let text = seq.text_positions();
            (prefix..orig.len() - suffix)
                .filter_map(|i| text.get(i).copied())
                .collect()
        }
        CorruptionStrategy::AllPositions => (0..seq.len()).collect(),
    };
    if positions.is_empty() {
        return Err(VseamError::EmptyCorruptionSet {
            strategy: strategy.tag().to_string(),
            id: triple.id.clone(),
        });
    }
    Ok(CorruptionIndex {
        triple_id: triple.id.clone(),
        strategy: strategy.tag().to_string(),
        positions,
    })
}

/// Per-triple patching context. Captures the clean cache once and memoizes
/// the corrupted baseline logit so grid sweeps reuse both.
pub struct TriplePatcher {
    model: ModelHandle,
    corrupted_seq: TokenSequence,
    answer_token: u32,
    clean_cache: Arc<ActivationCache>,
    baseline_logit: f64,
}

impl TriplePatcher {
    pub fn new(
        model: &ModelHandle,
        clean_seq: &TokenSequence,
        corrupted_seq: TokenSequence,
        answer_token: u32,
    ) -> Result<Self> {
        let (_, clean_cache) = model.forward(clean_seq, &InterventionPlan::empty())?;
        let (logits, _) = model.forward(&corrupted_seq, &InterventionPlan::empty())?;
        let baseline_logit = logits[[corrupted_seq.last_position(), answer_token as usize]];
        Ok(TriplePatcher {
            model: model.clone(),
            corrupted_seq,
            answer_token,
            clean_cache: Arc::new(clean_cache),
            baseline_logit,
        })
    }

    pub fn baseline_logit(&self) -> f64 {
        self.baseline_logit
    }

    pub fn clean_cache(&self) -> &Arc<ActivationCache> {
        &self.clean_cache
    }

    /// Patched logit minus the corrupted baseline logit for one site.
    pub fn delta(&self, layer: usize, module: ModuleKind, positions: &[usize]) -> Result<f64> {
        let plan = InterventionPlan::from_actions([Action::Patch {
            layer,
            module,
            positions: positions.to_vec(),
            donor: self.clean_cache.clone(),
        }])?;
        let (logits, _) = self.model.forward(&self.corrupted_seq, &plan)?;
        let patched =
            logits[[self.corrupted_seq.last_position(), self.answer_token as usize]];
        Ok(patched - self.baseline_logit)
    }
}

/// One-shot patched logit delta (runs the clean capture and corrupted
/// baseline itself; sweeps should use [`TriplePatcher`] directly).
pub fn patched_logit_delta(
    model: &ModelHandle,
    clean_seq: &TokenSequence,
    corrupted_seq: &TokenSequence,
    answer_token: u32,
    layer: usize,
    module: ModuleKind,
    positions: &[usize],
) -> Result<f64> {
    TriplePatcher::new(model, clean_seq, corrupted_seq.clone(), answer_token)?
        .delta(layer, module, positions)
}

/// Token-group axis of a causal grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenGrouping {
    /// One pooled group: the strategy's image positions.
    PooledImage,
    /// One pooled group: all question-token positions.
    PooledText,
    /// One group per question token, optionally preceded by the pooled
    /// image group. Requires aligned question lengths across triples.
    QuestionTokens { include_image_group: bool },
    /// One group per image token (costs an extra forward per token).
    PerImageToken,
}

/// Layers-by-token-groups matrix of averaged logit deltas.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CausalGrid {
    pub tau: ModuleKind,
    pub layers: usize,
    pub groups: Vec<String>,
    /// `values[layer][group]`, each the mean of exactly `n` per-triple deltas.
    pub values: Vec<Vec<f64>>,
    pub n: usize,
}

impl CausalGrid {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn group_positions(
    triple: &VQATriple,
    model: &ModelHandle,
    seq: &TokenSequence,
    strategy: &CorruptionStrategy,
    grouping: &TokenGrouping,
) -> Result<Vec<(String, Vec<usize>)>> {
    let image_positions = match strategy {
        CorruptionStrategy::BboxPatches => {
            corrupted_indices(triple, model, seq, strategy)?.positions
        }
        _ => seq.image_range().map(|r| r.collect()).unwrap_or_default(),
    };
    let text_positions = seq.text_positions();
    let mut groups = Vec::new();
    match grouping {
        TokenGrouping::PooledImage => {
            groups.push(("image".to_string(), image_positions));
        }
        TokenGrouping::PooledText => {
            groups.push(("question".to_string(), text_positions));
        }
        TokenGrouping::QuestionTokens {
            include_image_group,
        } => {
            if *include_image_group {
                groups.push(("image".to_string(), image_positions));
            }
            for (i, &pos) in text_positions.iter().enumerate() {
                let label = format!("q{i}:{}", model.token_text(seq.ids()[pos]));
                groups.push((label, vec![pos]));
            }
        }
        TokenGrouping::PerImageToken => {
            for (i, &pos) in image_positions.iter().enumerate() {
                groups.push((format!("img{i}"), vec![pos]));
            }
        }
    }
    for (_, positions) in &groups {
        if positions.is_empty() {
            return Err(VseamError::EmptyCorruptionSet {
                strategy: strategy.tag().to_string(),
                id: triple.id.clone(),
            });
        }
    }
    Ok(groups)
}

/// Average the per-triple patched logit deltas over a filtered dataset into
/// a layers-by-groups grid (Eq. 3 with one cell per layer and token group).
pub fn causal_score_grid(
    model: &ModelHandle,
    triples: &[VQATriple],
    images_root: &Path,
    tau: ModuleKind,
    strategy: &CorruptionStrategy,
    grouping: &TokenGrouping,
) -> Result<CausalGrid> {
    if triples.is_empty() {
        return Err(VseamError::EmptyDataset);
    }
    let layers = model.num_layers();

    // Group labels come from the first triple; every other triple must have
    // a matching group count (aligned question lengths for per-token grids).
    let first_seq = triple_sequence(model, &triples[0], images_root, false)?;
    let labels: Vec<String> =
        group_positions(&triples[0], model, &first_seq, strategy, grouping)?
            .into_iter()
            .map(|(label, _)| label)
            .collect();

    let per_triple: Vec<Vec<Vec<f64>>> = par_map(triples, |triple| {
        let clean_seq = triple_sequence(model, triple, images_root, false)?;
        let corrupted_seq = triple_sequence(model, triple, images_root, true)?;
        let groups = group_positions(triple, model, &clean_seq, strategy, grouping)?;
        if groups.len() != labels.len() {
            return Err(VseamError::MisalignedQuestions(labels.len(), groups.len()));
        }
        let answer_token = model.answer_token(&triple.answer)?;
        let patcher = TriplePatcher::new(model, &clean_seq, corrupted_seq, answer_token)?;
        let mut grid = vec![vec![0.0; groups.len()]; layers];
        for (row, layer_grid) in grid.iter_mut().enumerate() {
            for (g, (_, positions)) in groups.iter().enumerate() {
                layer_grid[g] = patcher.delta(row, tau, positions)?;
            }
        }
        Ok(grid)
    })?;

    let n = per_triple.len();
    let mut values = vec![vec![0.0; labels.len()]; layers];
    for grid in &per_triple {
        for (l, row) in grid.iter().enumerate() {
            for (g, v) in row.iter().enumerate() {
                values[l][g] += v;
            }
        }
    }
    for row in &mut values {
        for v in row.iter_mut() {
            *v /= n as f64;
        }
    }

    Ok(CausalGrid {
        tau,
        layers,
        groups: labels,
        values,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{BoundingBox, Category};
    use crate::model::{Modality, ToyConfig};

    fn toy_triple(boxes: Vec<BoundingBox>) -> VQATriple {
        VQATriple {
            id: "t0".to_string(),
            question: "is the panel white?".to_string(),
            image: "clean.png".to_string(),
            edited_image: Some("edited.png".to_string()),
            answer: "yes".to_string(),
            level: Category::Color.level(),
            category: Category::Color,
            boxes,
            relations: None,
        }
    }

    fn toy_seq(model: &ModelHandle, text: &str) -> TokenSequence {
        let img: Vec<u32> = (0..16).map(|i| 48 + (i % 16) as u32).collect();
        TokenSequence::from_blocks(img, model.tokenize(text)).unwrap()
    }

    #[test]
    fn all_image_selects_the_image_block() {
        let model = ModelHandle::toy(ToyConfig::default(), 1).unwrap();
        let triple = toy_triple(vec![]);
        let seq = toy_seq(&model, &triple.question);
        let idx =
            corrupted_indices(&triple, &model, &seq, &CorruptionStrategy::AllImage).unwrap();
        assert_eq!(idx.positions, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn bbox_strategy_matches_patch_intersection() {
        let model = ModelHandle::toy(ToyConfig::default(), 1).unwrap();
        let triple = toy_triple(vec![BoundingBox {
            label: "panel".to_string(),
            bbox: [0.0, 0.0, 4.0, 4.0],
        }]);
        let seq = toy_seq(&model, &triple.question);
        let idx =
            corrupted_indices(&triple, &model, &seq, &CorruptionStrategy::BboxPatches).unwrap();
        assert_eq!(idx.positions, vec![0, 1, 4, 5]);
    }

    #[test]
    fn one_pixel_box_selects_one_patch() {
        let model = ModelHandle::toy(ToyConfig::default(), 1).unwrap();
        let triple = toy_triple(vec![BoundingBox {
            label: "dot".to_string(),
            bbox: [7.0, 5.0, 8.0, 6.0],
        }]);
        let seq = toy_seq(&model, &triple.question);
        let idx =
            corrupted_indices(&triple, &model, &seq, &CorruptionStrategy::BboxPatches).unwrap();
        assert_eq!(idx.positions, vec![11]);
    }

    #[test]
    fn bbox_without_boxes_is_an_error() {
        let model = ModelHandle::toy(ToyConfig::default(), 1).unwrap();
        let triple = toy_triple(vec![]);
        let seq = toy_seq(&model, &triple.question);
        assert!(matches!(
            corrupted_indices(&triple, &model, &seq, &CorruptionStrategy::BboxPatches),
            Err(VseamError::MissingBoxes { .. })
        ));
    }

    #[test]
    fn text_span_finds_the_substituted_unit() {
        let model = ModelHandle::toy(ToyConfig::default(), 1).unwrap();
        let triple = toy_triple(vec![]);
        let seq = toy_seq(&model, &triple.question);
        let strategy = CorruptionStrategy::TextSpan {
            counterfactual_question: "is the panel black?".to_string(),
        };
        let idx = corrupted_indices(&triple, &model, &seq, &strategy).unwrap();
        // "white" is the 4th question word, at sequence position 16 + 3.
        assert_eq!(idx.positions, vec![19]);
    }

    #[test]
    fn empty_patch_has_zero_delta() {
        let model = ModelHandle::toy(ToyConfig::default(), 2).unwrap();
        let clean = toy_seq(&model, "is the panel white?");
        let mut corrupted_ids = clean.ids().to_vec();
        corrupted_ids[3] = 55;
        let corrupted =
            TokenSequence::new(corrupted_ids, clean.tags().to_vec()).unwrap();
        let patcher = TriplePatcher::new(&model, &clean, corrupted, 0).unwrap();
        for layer in 0..model.num_layers() {
            for tau in [ModuleKind::Attention, ModuleKind::Mlp] {
                assert_eq!(patcher.delta(layer, tau, &[]).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn grid_of_single_triple_equals_its_deltas() {
        // Build a tiny on-disk fixture: one triple with distinct images.
        let dir = tempfile::tempdir().unwrap();
        let model = ModelHandle::toy(ToyConfig::default(), 3).unwrap();
        let clean = image::GrayImage::from_fn(8, 8, |x, y| image::Luma([(x * y * 4) as u8]));
        let edited = image::GrayImage::from_fn(8, 8, |x, y| image::Luma([255 - (x * y * 4) as u8]));
        crate::img::save_gray(&clean, &dir.path().join("clean.png")).unwrap();
        crate::img::save_gray(&edited, &dir.path().join("edited.png")).unwrap();
        let triple = toy_triple(vec![]);

        let grid = causal_score_grid(
            &model,
            &[triple.clone()],
            dir.path(),
            ModuleKind::Attention,
            &CorruptionStrategy::AllImage,
            &TokenGrouping::PooledImage,
        )
        .unwrap();
        assert_eq!(grid.n, 1);
        assert_eq!(grid.groups, vec!["image"]);

        let clean_seq = triple_sequence(&model, &triple, dir.path(), false).unwrap();
        let corrupted_seq = triple_sequence(&model, &triple, dir.path(), true).unwrap();
        let answer = model.answer_token("yes").unwrap();
        let patcher = TriplePatcher::new(&model, &clean_seq, corrupted_seq, answer).unwrap();
        let positions: Vec<usize> = (0..16).collect();
        for layer in 0..model.num_layers() {
            let expected = patcher
                .delta(layer, ModuleKind::Attention, &positions)
                .unwrap();
            assert!((grid.values[layer][0] - expected).abs() < 1e-12);
        }

        // Duplicating the dataset leaves the mean unchanged.
        let grid2 = causal_score_grid(
            &model,
            &[triple.clone(), triple],
            dir.path(),
            ModuleKind::Attention,
            &CorruptionStrategy::AllImage,
            &TokenGrouping::PooledImage,
        )
        .unwrap();
        assert_eq!(grid2.n, 2);
        for layer in 0..model.num_layers() {
            assert!((grid2.values[layer][0] - grid.values[layer][0]).abs() < 1e-12);
        }
    }
}

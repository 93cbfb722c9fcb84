//! Attention-head attribution: masking, probability deltas, split-averaged
//! causal scores, top-K selection, and the bbox attention-overlap
//! diagnostic.

use std::cmp::Ordering;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::{triple_sequence, DatasetSplit, VQATriple, Verdict};
use crate::error::{Result, VseamError};
use crate::model::{
    readout, ActivationCache, Action, CaptureOptions, InterventionPlan, ModelHandle, PatchGrid,
    PixelBox, TokenSequence,
};
use crate::workers::par_map;

/// Replacement for a masked head: the position-wise average of the
/// remaining heads' pre-projection outputs at the same layer.
pub fn mask_head_output(
    cache: &ActivationCache,
    layer: usize,
    head: usize,
) -> Result<Array2<f64>> {
    let heads = cache.num_heads();
    if heads < 2 {
        return Err(VseamError::SingleHeadMask);
    }
    if head >= heads {
        return Err(VseamError::HeadOutOfRange { head, heads });
    }
    let mut mean = Array2::<f64>::zeros((cache.seq_len(), cache.head_dim()));
    for (h, out) in cache.head_outputs(layer).iter().enumerate() {
        if h != head {
            mean += out;
        }
    }
    mean /= (heads - 1) as f64;
    Ok(mean)
}

/// Per-triple head scoring context: memoizes the unmasked probability.
pub struct HeadProber {
    model: ModelHandle,
    seq: TokenSequence,
    answer_token: u32,
    clean_prob: f64,
}

impl HeadProber {
    pub fn new(model: &ModelHandle, seq: TokenSequence, answer_token: u32) -> Result<Self> {
        let (logits, _) = model.forward(&seq, &InterventionPlan::empty())?;
        let (_, clean_prob) = readout(logits.row(seq.last_position()), answer_token)?;
        Ok(HeadProber {
            model: model.clone(),
            seq,
            answer_token,
            clean_prob,
        })
    }

    pub fn clean_prob(&self) -> f64 {
        self.clean_prob
    }

    /// Probability of the answer with `(layer, head)` masked, minus the
    /// unmasked probability.
    pub fn delta(&self, layer: usize, head: usize) -> Result<f64> {
        let plan = InterventionPlan::from_actions([Action::MaskHead { layer, head }])?;
        let (logits, _) = self.model.forward(&self.seq, &plan)?;
        let (_, masked_prob) = readout(logits.row(self.seq.last_position()), self.answer_token)?;
        Ok(masked_prob - self.clean_prob)
    }
}

/// One-shot probability delta for masking a head on a triple's clean image.
/// Head analysis runs on unedited inputs.
pub fn head_prob_delta(
    model: &ModelHandle,
    triple: &VQATriple,
    images_root: &Path,
    layer: usize,
    head: usize,
) -> Result<f64> {
    let seq = triple_sequence(model, triple, images_root, false)?;
    let answer_token = model.answer_token(&triple.answer)?;
    HeadProber::new(model, seq, answer_token)?.delta(layer, head)
}

/// Split-averaged causal score of one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub layer: usize,
    pub head: usize,
    /// Mean probability delta over the correctly answered triples
    /// (absent when that bucket is empty).
    pub c_correct: Option<f64>,
    pub c_incorrect: Option<f64>,
    pub n_correct: usize,
    pub n_incorrect: usize,
}

impl HeadScore {
    pub fn label(&self) -> String {
        format!("L{}.H{}", self.layer, self.head)
    }
}

/// Score every head of every layer over both buckets of a split. Warns
/// (via an absent score) rather than failing when one bucket is empty.
pub fn head_causal_scores(
    model: &ModelHandle,
    split: &DatasetSplit,
    images_root: &Path,
) -> Result<Vec<HeadScore>> {
    if split.triples.is_empty() {
        return Err(VseamError::EmptyDataset);
    }
    let layers = model.num_layers();
    let heads = model.num_heads();

    // One clean forward plus L*H masked forwards per triple.
    let per_triple: Vec<(Verdict, Vec<Vec<f64>>)> = par_map(&split.triples, |triple| {
        let verdict = *split
            .membership
            .get(&triple.id)
            .expect("split membership covers all triples");
        let seq = triple_sequence(model, triple, images_root, false)?;
        let answer_token = model.answer_token(&triple.answer)?;
        let prober = HeadProber::new(model, seq, answer_token)?;
        let mut deltas = vec![vec![0.0; heads]; layers];
        for (l, row) in deltas.iter_mut().enumerate() {
            for (h, cell) in row.iter_mut().enumerate() {
                *cell = prober.delta(l, h)?;
            }
        }
        Ok((verdict, deltas))
    })?;

    let mut scores = Vec::with_capacity(layers * heads);
    for l in 0..layers {
        for h in 0..heads {
            let mut sum_c = 0.0;
            let mut n_c = 0usize;
            let mut sum_i = 0.0;
            let mut n_i = 0usize;
            for (verdict, deltas) in &per_triple {
                match verdict {
                    Verdict::Correct => {
                        sum_c += deltas[l][h];
                        n_c += 1;
                    }
                    Verdict::Incorrect => {
                        sum_i += deltas[l][h];
                        n_i += 1;
                    }
                }
            }
            scores.push(HeadScore {
                layer: l,
                head: h,
                c_correct: (n_c > 0).then(|| sum_c / n_c as f64),
                c_incorrect: (n_i > 0).then(|| sum_i / n_i as f64),
                n_correct: n_c,
                n_incorrect: n_i,
            });
        }
    }
    Ok(scores)
}

/// A selected head with the split score that ranked it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredHead {
    pub layer: usize,
    pub head: usize,
    /// `c_correct` for positive heads, `c_incorrect` for negative heads.
    pub score: f64,
}

impl ScoredHead {
    pub fn label(&self) -> String {
        format!("L{}.H{}", self.layer, self.head)
    }
}

/// Top-K positive and negative heads, with overlap between the two sets
/// dropped from both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSetSelection {
    pub k: usize,
    pub positive: Vec<ScoredHead>,
    pub negative: Vec<ScoredHead>,
    pub dropped_overlap: Vec<String>,
}

fn rank_by<F>(scores: &[HeadScore], key: F, k: usize) -> Vec<ScoredHead>
where
    F: Fn(&HeadScore) -> Option<(f64, f64)>,
{
    // key returns (ranking value, reported score); higher ranking value first,
    // ties broken by (layer asc, head asc).
    let mut ranked: Vec<(f64, ScoredHead)> = scores
        .iter()
        .filter_map(|s| {
            key(s).map(|(rank, score)| {
                (
                    rank,
                    ScoredHead {
                        layer: s.layer,
                        head: s.head,
                        score,
                    },
                )
            })
        })
        .collect();
    ranked.sort_by(|a, b| match b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal) {
        Ordering::Equal => (a.1.layer, a.1.head).cmp(&(b.1.layer, b.1.head)),
        other => other,
    });
    ranked.into_iter().take(k).map(|(_, s)| s).collect()
}

/// Select positive heads (largest drop in correct-answer probability when
/// masked on the correct bucket) and negative heads (largest gain on the
/// incorrect bucket).
pub fn select_key_heads(scores: &[HeadScore], k: usize) -> HeadSetSelection {
    let positive = rank_by(scores, |s| s.c_correct.map(|c| (-c, c)), k);
    let negative = rank_by(scores, |s| s.c_incorrect.map(|c| (c, c)), k);

    let pos_keys: Vec<(usize, usize)> = positive.iter().map(|s| (s.layer, s.head)).collect();
    let neg_keys: Vec<(usize, usize)> = negative.iter().map(|s| (s.layer, s.head)).collect();
    let overlap: Vec<(usize, usize)> = pos_keys
        .iter()
        .filter(|key| neg_keys.contains(key))
        .copied()
        .collect();

    HeadSetSelection {
        k,
        positive: positive
            .into_iter()
            .filter(|s| !overlap.contains(&(s.layer, s.head)))
            .collect(),
        negative: negative
            .into_iter()
            .filter(|s| !overlap.contains(&(s.layer, s.head)))
            .collect(),
        dropped_overlap: overlap
            .into_iter()
            .map(|(l, h)| format!("L{l}.H{h}"))
            .collect(),
    }
}

/// Write head scores as CSV with columns
/// `layer,head,c_correct,c_incorrect,n_correct,n_incorrect`.
pub fn scores_to_csv(scores: &[HeadScore]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer", "head", "c_correct", "c_incorrect", "n_correct", "n_incorrect"])
        .map_err(|e| VseamError::Config {
            field: "csv".to_string(),
            message: e.to_string(),
        })?;
    for s in scores {
        w.write_record([
            s.layer.to_string(),
            s.head.to_string(),
            s.c_correct.map(|v| format!("{v:.12}")).unwrap_or_default(),
            s.c_incorrect.map(|v| format!("{v:.12}")).unwrap_or_default(),
            s.n_correct.to_string(),
            s.n_incorrect.to_string(),
        ])
        .map_err(|e| VseamError::Config {
            field: "csv".to_string(),
            message: e.to_string(),
        })?;
    }
    let bytes = w.into_inner().map_err(|e| VseamError::Config {
        field: "csv".to_string(),
        message: e.to_string(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is utf8"))
}

pub fn scores_from_csv(content: &str) -> Result<Vec<HeadScore>> {
    let mut reader = csv::Reader::from_reader(content.as_bytes());
    let mut scores = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| VseamError::Config {
            field: "csv".to_string(),
            message: e.to_string(),
        })?;
        let parse_opt = |s: &str| -> Option<f64> {
            if s.is_empty() {
                None
            } else {
                s.parse().ok()
            }
        };
        scores.push(HeadScore {
            layer: record[0].parse().map_err(|_| VseamError::Config {
                field: "layer".to_string(),
                message: record[0].to_string(),
            })?,
            head: record[1].parse().map_err(|_| VseamError::Config {
                field: "head".to_string(),
                message: record[1].to_string(),
            })?,
            c_correct: parse_opt(&record[2]),
            c_incorrect: parse_opt(&record[3]),
            n_correct: record[4].parse().unwrap_or(0),
            n_incorrect: record[5].parse().unwrap_or(0),
        });
    }
    Ok(scores)
}

/// Fraction of one head's final-position attention mass over image tokens
/// that falls on patches intersecting `target`. The query position is the
/// final token; the paper leaves the source position unstated.
pub fn bbox_attention_overlap(
    cache: &ActivationCache,
    layer: usize,
    head: usize,
    seq: &TokenSequence,
    target: &PixelBox,
    grid: &PatchGrid,
) -> Result<f64> {
    let weights = cache.attention_weights(layer)?;
    let image_range = seq
        .image_range()
        .ok_or_else(|| VseamError::InvalidSequence("no image block".to_string()))?;
    let row = seq.last_position();
    let in_box_patches = grid.patches_intersecting(target);

    let mut total = 0.0;
    let mut inside = 0.0;
    for (patch, pos) in image_range.enumerate() {
        let w = weights[[head, row, pos]];
        total += w;
        if in_box_patches.contains(&patch) {
            inside += w;
        }
    }
    if total == 0.0 {
        return Err(VseamError::InvalidSequence(
            "zero attention mass on image tokens".to_string(),
        ));
    }
    Ok(inside / total)
}

/// Mean overlap of a set of heads, the per-group summary used to compare
/// positive and negative selections.
pub fn mean_overlap(
    model: &ModelHandle,
    triples: &[VQATriple],
    images_root: &Path,
    heads: &[ScoredHead],
) -> Result<f64> {
    if triples.is_empty() || heads.is_empty() {
        return Err(VseamError::EmptyDataset);
    }
    let grid = model.patch_grid();
    let mut sum = 0.0;
    let mut n = 0usize;
    for triple in triples {
        let Some(first_box) = triple.boxes.first() else {
            continue;
        };
        let seq = triple_sequence(model, triple, images_root, false)?;
        let (_, cache) = model.forward_with_capture(
            &seq,
            &InterventionPlan::empty(),
            CaptureOptions::with_attention(),
        )?;
        for head in heads {
            sum += bbox_attention_overlap(
                &cache,
                head.layer,
                head.head,
                &seq,
                &first_box.rect(),
                &grid,
            )?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(VseamError::EmptyDataset);
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModuleKind, ToyConfig};

    fn probe_seq(model: &ModelHandle) -> TokenSequence {
        let img: Vec<u32> = (0..16).map(|i| 48 + (i % 16) as u32).collect();
        TokenSequence::from_blocks(img, model.tokenize("is the picture light")).unwrap()
    }

    #[test]
    fn mask_replacement_matches_explicit_sum() {
        let model = ModelHandle::toy(ToyConfig::default(), 9).unwrap();
        let seq = probe_seq(&model);
        let (_, cache) = model.forward(&seq, &InterventionPlan::empty()).unwrap();
        for layer in 0..model.num_layers() {
            for head in 0..model.num_heads() {
                let replacement = mask_head_output(&cache, layer, head).unwrap();
                // Independent summation in a different order.
                let mut explicit =
                    Array2::<f64>::zeros((cache.seq_len(), cache.head_dim()));
                for h in (0..model.num_heads()).rev() {
                    if h != head {
                        explicit += cache.head_output(layer, h);
                    }
                }
                explicit /= (model.num_heads() - 1) as f64;
                let max = (&replacement - &explicit)
                    .iter()
                    .fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(max < 1e-12);
            }
        }
    }

    #[test]
    fn two_head_mask_is_the_other_head() {
        let cfg = ToyConfig {
            num_heads: 2,
            head_dim: 16,
            ..ToyConfig::default()
        };
        let model = ModelHandle::toy(cfg, 4).unwrap();
        let seq = probe_seq(&model);
        let (_, cache) = model.forward(&seq, &InterventionPlan::empty()).unwrap();
        let replacement = mask_head_output(&cache, 1, 0).unwrap();
        assert_eq!(&replacement, cache.head_output(1, 1));
    }

    #[test]
    fn single_head_mask_is_undefined() {
        let cfg = ToyConfig {
            num_heads: 1,
            head_dim: 32,
            ..ToyConfig::default()
        };
        let model = ModelHandle::toy(cfg, 4).unwrap();
        let seq = probe_seq(&model);
        let (_, cache) = model.forward(&seq, &InterventionPlan::empty()).unwrap();
        assert!(matches!(
            mask_head_output(&cache, 0, 0),
            Err(VseamError::SingleHeadMask)
        ));
    }

    #[test]
    fn identical_heads_give_zero_deltas() {
        let model = ModelHandle::identical_heads(ToyConfig::default(), 21).unwrap();
        let seq = probe_seq(&model);
        let prober = HeadProber::new(&model, seq, 0).unwrap();
        for layer in 0..model.num_layers() {
            for head in 0..model.num_heads() {
                let dp = prober.delta(layer, head).unwrap();
                assert!(dp.abs() < 1e-12, "L{layer}.H{head}: {dp}");
            }
        }
    }

    #[test]
    fn selection_ordering_and_ties() {
        let mk = |layer, head, c_corr: f64, c_inc: f64| HeadScore {
            layer,
            head,
            c_correct: Some(c_corr),
            c_incorrect: Some(c_inc),
            n_correct: 5,
            n_incorrect: 5,
        };
        let scores = vec![
            mk(0, 0, -0.05, 0.00),
            mk(1, 0, -0.30, 0.01),
            mk(1, 1, -0.30, 0.02),
            mk(2, 1, -0.50, -0.10),
            mk(3, 3, 0.20, 0.40),
        ];
        let sel = select_key_heads(&scores, 3);
        // Most negative c_correct first; exact tie broken by (layer, head).
        assert_eq!(sel.positive[0].label(), "L2.H1");
        assert_eq!(sel.positive[1].label(), "L1.H0");
        assert_eq!(sel.positive[2].label(), "L1.H1");
        assert_eq!(sel.negative[0].label(), "L3.H3");
        assert!(sel.dropped_overlap.is_empty());

        // Determinism.
        let sel2 = select_key_heads(&scores, 3);
        assert_eq!(sel, sel2);
    }

    #[test]
    fn overlapping_heads_are_dropped_from_both() {
        let mk = |layer, head, c_corr: f64, c_inc: f64| HeadScore {
            layer,
            head,
            c_correct: Some(c_corr),
            c_incorrect: Some(c_inc),
            n_correct: 1,
            n_incorrect: 1,
        };
        // L0.H0 ranks first on both sides.
        let scores = vec![mk(0, 0, -0.9, 0.9), mk(0, 1, -0.5, 0.1), mk(1, 0, -0.1, 0.5)];
        let sel = select_key_heads(&scores, 2);
        assert_eq!(sel.dropped_overlap, vec!["L0.H0"]);
        assert!(sel.positive.iter().all(|s| s.label() != "L0.H0"));
        assert!(sel.negative.iter().all(|s| s.label() != "L0.H0"));
    }

    #[test]
    fn csv_roundtrip() {
        let scores = vec![
            HeadScore {
                layer: 0,
                head: 1,
                c_correct: Some(-0.25),
                c_incorrect: None,
                n_correct: 3,
                n_incorrect: 0,
            },
            HeadScore {
                layer: 2,
                head: 0,
                c_correct: Some(0.5),
                c_incorrect: Some(0.125),
                n_correct: 3,
                n_incorrect: 2,
            },
        ];
        let csv = scores_to_csv(&scores).unwrap();
        let parsed = scores_from_csv(&csv).unwrap();
        assert_eq!(scores, parsed);
    }

    #[test]
    fn overlap_is_mass_inside_box_over_total() {
        // Hand-built attention: uniform over all 16 image patches.
        let model = ModelHandle::toy(ToyConfig::default(), 15).unwrap();
        let seq = probe_seq(&model);
        let (_, cache) = model
            .forward_with_capture(
                &seq,
                &InterventionPlan::empty(),
                CaptureOptions::with_attention(),
            )
            .unwrap();
        let grid = model.patch_grid();
        // Box covering 4 of 16 patches with uniform synthetic mass.
        let target = PixelBox::new(0.0, 0.0, 4.0, 4.0);
        // Use the real cache but verify on a synthetic row via the raw kernel:
        // replicate by direct summation here instead.
        let weights = cache.attention_weights(1).unwrap();
        let row = seq.last_position();
        let total: f64 = (0..16).map(|p| weights[[2, row, p]]).sum();
        let inside: f64 = [0usize, 1, 4, 5]
            .iter()
            .map(|&p| weights[[2, row, p]])
            .sum();
        let expected = inside / total;
        let got = bbox_attention_overlap(&cache, 1, 2, &seq, &target, &grid).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn overlap_requires_attention_capture() {
        let model = ModelHandle::toy(ToyConfig::default(), 15).unwrap();
        let seq = probe_seq(&model);
        let (_, cache) = model.forward(&seq, &InterventionPlan::empty()).unwrap();
        let grid = model.patch_grid();
        assert!(matches!(
            bbox_attention_overlap(
                &cache,
                0,
                0,
                &seq,
                &PixelBox::new(0.0, 0.0, 2.0, 2.0),
                &grid
            ),
            Err(VseamError::AttentionNotCaptured)
        ));
    }

    #[test]
    fn grow_box_overlap_is_monotone() {
        let model = ModelHandle::toy(ToyConfig::default(), 33).unwrap();
        let seq = probe_seq(&model);
        let (_, cache) = model
            .forward_with_capture(
                &seq,
                &InterventionPlan::empty(),
                CaptureOptions::with_attention(),
            )
            .unwrap();
        let grid = model.patch_grid();
        let mut prev = 0.0;
        for size in 1..=8 {
            let b = PixelBox::new(0.0, 0.0, f64::from(size), f64::from(size));
            let r = bbox_attention_overlap(&cache, 3, 1, &seq, &b, &grid).unwrap();
            assert!(r + 1e-15 >= prev, "overlap shrank when the box grew");
            assert!((0.0..=1.0 + 1e-15).contains(&r));
            prev = r;
        }
        assert!((prev - 1.0).abs() < 1e-12, "full-image box should reach 1.0");
    }
}

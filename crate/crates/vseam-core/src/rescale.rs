//! Head-embedding rescaling: importance normalization, strategy plans,
//! and the strategy evaluation harness (full-set, subsample, and transfer
//! protocols).

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{triple_sequence, Category, DatasetSplit, SemanticLevel, VQATriple};
use crate::error::{Result, VseamError};
use crate::heads::{head_causal_scores, select_key_heads, HeadSetSelection};
use crate::model::{Action, BinaryAnswer, InterventionPlan, ModelHandle};
use crate::workers::par_map;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

/// One selected head with its importance and normalized weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescaleEntry {
    pub layer: usize,
    pub head: usize,
    pub polarity: Polarity,
    /// Importance: |c_correct| for positives, |c_incorrect| for negatives.
    pub c: f64,
    /// Min-max-normalized weight in [0, 1].
    pub lambda: f64,
}

impl RescaleEntry {
    /// Multiplier applied to the head output: `1 + lambda` for positives,
    /// `1 - lambda` for negatives.
    pub fn scale_factor(&self) -> f64 {
        match self.polarity {
            Polarity::Positive => 1.0 + self.lambda,
            Polarity::Negative => 1.0 - self.lambda,
        }
    }
}

/// Min-max metadata for one polarity group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupNormalization {
    pub c_min: f64,
    pub c_max: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RescaleMeta {
    pub positive: Option<GroupNormalization>,
    pub negative: Option<GroupNormalization>,
    pub source: Option<String>,
    pub seed: Option<u64>,
}

/// Selected heads with polarity, importance, and normalized weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescalePlan {
    pub entries: Vec<RescaleEntry>,
    pub meta: RescaleMeta,
}

impl RescalePlan {
    pub fn positives(&self) -> impl Iterator<Item = &RescaleEntry> {
        self.entries
            .iter()
            .filter(|e| e.polarity == Polarity::Positive)
    }

    pub fn negatives(&self) -> impl Iterator<Item = &RescaleEntry> {
        self.entries
            .iter()
            .filter(|e| e.polarity == Polarity::Negative)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(content: &str) -> Result<Self> {
        Ok(serde_json::from_str(content)?)
    }
}

fn normalize_group(
    heads: &[(usize, usize, f64)],
    polarity: Polarity,
) -> (Vec<RescaleEntry>, Option<GroupNormalization>) {
    if heads.is_empty() {
        return (Vec::new(), None);
    }
    let c_min = heads.iter().map(|(_, _, c)| *c).fold(f64::INFINITY, f64::min);
    let c_max = heads
        .iter()
        .map(|(_, _, c)| *c)
        .fold(f64::NEG_INFINITY, f64::max);
    // A lone head (or an all-equal group) gets full modulation.
    let degenerate = heads.len() == 1 || c_max == c_min;
    let entries = heads
        .iter()
        .map(|&(layer, head, c)| RescaleEntry {
            layer,
            head,
            polarity,
            c,
            lambda: if degenerate {
                1.0
            } else {
                (c - c_min) / (c_max - c_min)
            },
        })
        .collect();
    (entries, Some(GroupNormalization { c_min, c_max }))
}

/// Convert a head selection into a rescale plan: importance is the
/// absolute split score, min-max normalized to [0, 1] separately within
/// each polarity group.
pub fn build_rescale_plan(selection: &HeadSetSelection) -> RescalePlan {
    let positives: Vec<(usize, usize, f64)> = selection
        .positive
        .iter()
        .map(|s| (s.layer, s.head, s.score.abs()))
        .collect();
    let negatives: Vec<(usize, usize, f64)> = selection
        .negative
        .iter()
        .map(|s| (s.layer, s.head, s.score.abs()))
        .collect();
    let (mut entries, pos_norm) = normalize_group(&positives, Polarity::Positive);
    let (neg_entries, neg_norm) = normalize_group(&negatives, Polarity::Negative);
    entries.extend(neg_entries);
    RescalePlan {
        entries,
        meta: RescaleMeta {
            positive: pos_norm,
            negative: neg_norm,
            source: None,
            seed: None,
        },
    }
}

/// The five head-editing strategies of the evaluation harness.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum EditingStrategy {
    /// No intervention.
    Original,
    /// Scale positives by `1 + lambda` and negatives by `1 - lambda`.
    Rescaling,
    /// Mask the negative heads only.
    WoNegative,
    /// Mask the positive heads only.
    WoPositive,
    /// Mask a seeded uniform sample of heads.
    RandomRemove { seed: u64, count: usize },
}

impl EditingStrategy {
    pub fn tag(&self) -> &'static str {
        match self {
            EditingStrategy::Original => "original",
            EditingStrategy::Rescaling => "rescaling",
            EditingStrategy::WoNegative => "wo-negative",
            EditingStrategy::WoPositive => "wo-positive",
            EditingStrategy::RandomRemove { .. } => "random-remove",
        }
    }
}

/// Materialize a strategy as an intervention plan.
pub fn plan_to_interventions(
    plan: &RescalePlan,
    strategy: &EditingStrategy,
    num_layers: usize,
    num_heads: usize,
) -> Result<InterventionPlan> {
    match strategy {
        EditingStrategy::Original => Ok(InterventionPlan::empty()),
        EditingStrategy::Rescaling => InterventionPlan::from_actions(plan.entries.iter().map(
            |e| Action::RescaleHead {
                layer: e.layer,
                head: e.head,
                factor: e.scale_factor(),
            },
        )),
        EditingStrategy::WoNegative => {
            InterventionPlan::from_actions(plan.negatives().map(|e| Action::MaskHead {
                layer: e.layer,
                head: e.head,
            }))
        }
        EditingStrategy::WoPositive => {
            InterventionPlan::from_actions(plan.positives().map(|e| Action::MaskHead {
                layer: e.layer,
                head: e.head,
            }))
        }
        EditingStrategy::RandomRemove { seed, count } => {
            let available = num_layers * num_heads;
            if *count > available {
                return Err(VseamError::RandomSampleTooLarge {
                    requested: *count,
                    available,
                });
            }
            let mut all: Vec<(usize, usize)> = (0..num_layers)
                .flat_map(|l| (0..num_heads).map(move |h| (l, h)))
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            all.shuffle(&mut rng);
            InterventionPlan::from_actions(all.into_iter().take(*count).map(|(layer, head)| {
                Action::MaskHead { layer, head }
            }))
        }
    }
}

/// Accuracy and per-example correctness for one strategy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyResult {
    pub strategy: String,
    pub per_category: BTreeMap<String, f64>,
    pub per_level: BTreeMap<String, f64>,
    /// Unweighted mean of the three level accuracies.
    pub average: f64,
    pub overall: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    /// id -> correct on the full evaluation set.
    pub per_example: BTreeMap<String, bool>,
    /// Mean average per repeat when subsampling (fraction < 1).
    pub repeat_averages: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub fraction: f64,
    pub repeats: usize,
    pub seed: u64,
    pub k: usize,
    pub strategies: Vec<StrategyResult>,
}

impl EvalReport {
    pub fn strategy(&self, tag: &str) -> Option<&StrategyResult> {
        self.strategies.iter().find(|s| s.strategy == tag)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Accuracy table in the harness layout: one row per strategy, one
    /// column per category plus the level average.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["strategy".to_string()];
        header.extend(Category::all().iter().map(|c| c.as_str().to_string()));
        header.extend(
            SemanticLevel::all()
                .iter()
                .map(|l| l.as_str().to_string()),
        );
        header.push("avg".to_string());
        w.write_record(&header).map_err(|e| VseamError::Config {
            field: "csv".to_string(),
            message: e.to_string(),
        })?;
        for s in &self.strategies {
            let mut row = vec![s.strategy.clone()];
            for c in Category::all() {
                row.push(
                    s.per_category
                        .get(c.as_str())
                        .map(|v| format!("{:.4}", v * 100.0))
                        .unwrap_or_default(),
                );
            }
            for l in SemanticLevel::all() {
                row.push(
                    s.per_level
                        .get(l.as_str())
                        .map(|v| format!("{:.4}", v * 100.0))
                        .unwrap_or_default(),
                );
            }
            row.push(format!("{:.4}", s.average * 100.0));
            w.write_record(&row).map_err(|e| VseamError::Config {
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
}

/// Evaluation parameters. With `sample_fraction < 1`, head identification
/// and plan construction run on a seeded category-stratified subsample
/// while accuracy is measured on the full set, repeated `repeats` times.
#[derive(Debug, Clone)]
pub struct EvalParams {
    pub strategies: Vec<EditingStrategy>,
    pub sample_fraction: f64,
    pub repeats: usize,
    pub seed: u64,
    pub k: usize,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            strategies: vec![EditingStrategy::Original, EditingStrategy::Rescaling],
            sample_fraction: 1.0,
            repeats: 10,
            seed: 0,
            k: 10,
        }
    }
}

fn accuracy_breakdown(
    triples: &[VQATriple],
    correct: &[bool],
) -> (BTreeMap<String, f64>, BTreeMap<String, f64>, f64, f64) {
    let mut per_cat: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut per_level: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut hits = 0usize;
    for (t, &ok) in triples.iter().zip(correct) {
        let c = per_cat.entry(t.category.as_str().to_string()).or_default();
        c.1 += 1;
        let l = per_level.entry(t.level.as_str().to_string()).or_default();
        l.1 += 1;
        if ok {
            c.0 += 1;
            l.0 += 1;
            hits += 1;
        }
    }
    let cat_acc: BTreeMap<String, f64> = per_cat
        .into_iter()
        .map(|(k, (h, n))| (k, h as f64 / n as f64))
        .collect();
    let level_acc: BTreeMap<String, f64> = per_level
        .into_iter()
        .map(|(k, (h, n))| (k, h as f64 / n as f64))
        .collect();
    let average = if level_acc.is_empty() {
        0.0
    } else {
        level_acc.values().sum::<f64>() / level_acc.len() as f64
    };
    let overall = hits as f64 / triples.len() as f64;
    (cat_acc, level_acc, average, overall)
}

fn precision_recall_f1(triples: &[VQATriple], predictions: &[BinaryAnswer]) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (t, pred) in triples.iter().zip(predictions) {
        let gold_yes = matches!(t.binary_answer(), Ok(BinaryAnswer::Yes));
        let pred_yes = matches!(pred, BinaryAnswer::Yes);
        match (pred_yes, gold_yes) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

fn evaluate_with_plan(
    model: &ModelHandle,
    triples: &[VQATriple],
    images_root: &Path,
    interventions: &InterventionPlan,
) -> Result<Vec<BinaryAnswer>> {
    par_map(triples, |t| {
        let seq = triple_sequence(model, t, images_root, false)?;
        model.binary_answer(&seq, interventions)
    })
}

/// Category-stratified subsample: ceil(fraction * n) per category, minimum 1.
fn stratified_subsample(
    triples: &[VQATriple],
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<VQATriple> {
    let mut out = Vec::new();
    for cat in Category::all() {
        let mut in_cat: Vec<&VQATriple> = triples.iter().filter(|t| t.category == cat).collect();
        if in_cat.is_empty() {
            continue;
        }
        let take = ((in_cat.len() as f64 * fraction).ceil() as usize)
            .clamp(1, in_cat.len());
        in_cat.shuffle(rng);
        out.extend(in_cat.into_iter().take(take).cloned());
    }
    out
}

/// Rebuild a rescale plan from scratch on `triples`: bucket by correctness,
/// score every head, select top-K, normalize.
pub fn identify_and_build_plan(
    model: &ModelHandle,
    triples: &[VQATriple],
    images_root: &Path,
    k: usize,
) -> Result<RescalePlan> {
    let split = DatasetSplit::from_model(model, triples.to_vec(), images_root)?;
    let scores = head_causal_scores(model, &split, images_root)?;
    let selection = select_key_heads(&scores, k);
    Ok(build_rescale_plan(&selection))
}

/// Evaluate the strategies over `eval_triples`.
///
/// With `sample_fraction == 1` the provided `plan` is used as-is (which is
/// also how a plan transfers unchanged to an out-of-distribution set).
/// With `sample_fraction < 1` the plan is re-identified per repeat on a
/// stratified subsample and accuracies are averaged over repeats; the
/// reported per-category numbers come from the first repeat's plan.
pub fn evaluate_strategies(
    model: &ModelHandle,
    eval_triples: &[VQATriple],
    images_root: &Path,
    plan: &RescalePlan,
    params: &EvalParams,
) -> Result<EvalReport> {
    if eval_triples.is_empty() {
        return Err(VseamError::EmptyDataset);
    }
    if params.strategies.is_empty() {
        return Err(VseamError::EmptyStrategyList);
    }
    let (layers, heads) = (model.num_layers(), model.num_heads());
    let full_sample = params.sample_fraction >= 1.0;
    let repeats = if full_sample { 1 } else { params.repeats.max(1) };

    let mut plans = Vec::with_capacity(repeats);
    if full_sample {
        plans.push(plan.clone());
    } else {
        for r in 0..repeats {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(r as u64));
            let subsample =
                stratified_subsample(eval_triples, params.sample_fraction, &mut rng);
            plans.push(identify_and_build_plan(
                model,
                &subsample,
                images_root,
                params.k,
            )?);
        }
    }

    let mut results = Vec::new();
    for strategy in &params.strategies {
        let mut repeat_averages = Vec::with_capacity(repeats);
        let mut first: Option<StrategyResult> = None;
        for rebuilt in &plans {
            let interventions = plan_to_interventions(rebuilt, strategy, layers, heads)?;
            let predictions =
                evaluate_with_plan(model, eval_triples, images_root, &interventions)?;
            let correct: Vec<bool> = eval_triples
                .iter()
                .zip(&predictions)
                .map(|(t, p)| matches!(t.binary_answer(), Ok(gold) if gold == *p))
                .collect();
            let (per_category, per_level, average, overall) =
                accuracy_breakdown(eval_triples, &correct);
            repeat_averages.push(average);
            if first.is_none() {
                let (precision, recall, f1) = precision_recall_f1(eval_triples, &predictions);
                first = Some(StrategyResult {
                    strategy: strategy.tag().to_string(),
                    per_category,
                    per_level,
                    average,
                    overall,
                    precision: Some(precision),
                    recall: Some(recall),
                    f1: Some(f1),
                    per_example: eval_triples
                        .iter()
                        .zip(&correct)
                        .map(|(t, &ok)| (t.id.clone(), ok))
                        .collect(),
                    repeat_averages: None,
                });
            }
        }
        let mut result = first.expect("at least one repeat");
        if !full_sample {
            result.average = repeat_averages.iter().sum::<f64>() / repeat_averages.len() as f64;
            result.repeat_averages = Some(repeat_averages);
        }
        results.push(result);
    }

    Ok(EvalReport {
        n: eval_triples.len(),
        fraction: params.sample_fraction,
        repeats,
        seed: params.seed,
        k: params.k,
        strategies: results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::ScoredHead;

    fn selection(pos: &[(usize, usize, f64)], neg: &[(usize, usize, f64)]) -> HeadSetSelection {
        HeadSetSelection {
            k: 10,
            positive: pos
                .iter()
                .map(|&(layer, head, score)| ScoredHead { layer, head, score })
                .collect(),
            negative: neg
                .iter()
                .map(|&(layer, head, score)| ScoredHead { layer, head, score })
                .collect(),
            dropped_overlap: vec![],
        }
    }

    #[test]
    fn minmax_endpoints() {
        let sel = selection(
            &[(0, 0, -0.4), (1, 0, -0.1), (1, 1, -0.1)],
            &[],
        );
        let plan = build_rescale_plan(&sel);
        let lambdas: Vec<f64> = plan.entries.iter().map(|e| e.lambda).collect();
        assert_eq!(lambdas, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn degenerate_single_negative_gets_full_weight() {
        let sel = selection(&[], &[(2, 3, 0.3)]);
        let plan = build_rescale_plan(&sel);
        assert_eq!(plan.entries.len(), 1);
        assert_eq!(plan.entries[0].lambda, 1.0);
        assert_eq!(plan.entries[0].scale_factor(), 0.0);
    }

    #[test]
    fn interior_lambda_by_hand() {
        // c = {0.2, 0.5, 0.8} -> lambda = {0, (0.5-0.2)/0.6, 1} = {0, 0.5, 1}.
        let sel = selection(
            &[(0, 0, -0.2), (0, 1, -0.5), (0, 2, -0.8)],
            &[],
        );
        let plan = build_rescale_plan(&sel);
        let lambdas: Vec<f64> = plan.entries.iter().map(|e| e.lambda).collect();
        assert_eq!(lambdas, vec![0.0, 0.5, 1.0]);
        let factors: Vec<f64> = plan.entries.iter().map(|e| e.scale_factor()).collect();
        assert_eq!(factors, vec![1.0, 1.5, 2.0]);
    }

    #[test]
    fn strategy_cardinalities() {
        let sel = selection(
            &[(0, 0, -0.4), (1, 1, -0.2)],
            &[(2, 0, 0.3), (2, 1, 0.2), (3, 3, 0.1)],
        );
        let plan = build_rescale_plan(&sel);
        assert!(
            plan_to_interventions(&plan, &EditingStrategy::Original, 4, 4)
                .unwrap()
                .is_empty()
        );
        assert_eq!(
            plan_to_interventions(&plan, &EditingStrategy::WoNegative, 4, 4)
                .unwrap()
                .len(),
            3
        );
        assert_eq!(
            plan_to_interventions(&plan, &EditingStrategy::WoPositive, 4, 4)
                .unwrap()
                .len(),
            2
        );
        assert_eq!(
            plan_to_interventions(&plan, &EditingStrategy::Rescaling, 4, 4)
                .unwrap()
                .len(),
            5
        );
    }

    #[test]
    fn random_remove_is_seeded_and_bounded() {
        let plan = RescalePlan {
            entries: vec![],
            meta: RescaleMeta::default(),
        };
        let a = plan_to_interventions(
            &plan,
            &EditingStrategy::RandomRemove { seed: 5, count: 10 },
            4,
            4,
        )
        .unwrap();
        let b = plan_to_interventions(
            &plan,
            &EditingStrategy::RandomRemove { seed: 5, count: 10 },
            4,
            4,
        )
        .unwrap();
        assert_eq!(a.len(), 10);
        let keys = |p: &InterventionPlan| -> Vec<(usize, usize)> {
            p.actions()
                .iter()
                .map(|act| match act {
                    Action::MaskHead { layer, head } => (*layer, *head),
                    _ => panic!("random-remove should only mask"),
                })
                .collect()
        };
        assert_eq!(keys(&a), keys(&b));

        assert!(matches!(
            plan_to_interventions(
                &plan,
                &EditingStrategy::RandomRemove { seed: 5, count: 17 },
                4,
                4,
            ),
            Err(VseamError::RandomSampleTooLarge { .. })
        ));
    }

    #[test]
    fn plan_json_roundtrip() {
        let sel = selection(&[(0, 0, -0.4)], &[(2, 3, 0.3)]);
        let plan = build_rescale_plan(&sel);
        let json = plan.to_json().unwrap();
        let parsed = RescalePlan::from_json(&json).unwrap();
        assert_eq!(plan, parsed);
    }
}

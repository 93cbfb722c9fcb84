//! VQA triples: JSONL loading, the causal-pair filter, and yes/no balancing.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VseamError};
use crate::img::load_gray;
use crate::model::{BinaryAnswer, InterventionPlan, ModelHandle, PixelBox, TokenSequence};
use crate::workers::par_map;

/// Concept level of a question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SemanticLevel {
    Attribute,
    Object,
    Relation,
}

impl SemanticLevel {
    pub fn as_str(&self) -> &'static str {
        match self {
            SemanticLevel::Attribute => "attribute",
            SemanticLevel::Object => "object",
            SemanticLevel::Relation => "relation",
        }
    }

    pub fn all() -> [SemanticLevel; 3] {
        [
            SemanticLevel::Attribute,
            SemanticLevel::Object,
            SemanticLevel::Relation,
        ]
    }
}

impl std::str::FromStr for SemanticLevel {
    type Err = VseamError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attribute" => Ok(SemanticLevel::Attribute),
            "object" => Ok(SemanticLevel::Object),
            "relation" => Ok(SemanticLevel::Relation),
            other => Err(VseamError::UnknownSemanticType(other.to_string())),
        }
    }
}

/// The seven benchmark categories, frozen; unknown categories are rejected
/// rather than coerced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Material,
    Color,
    Animal,
    Vehicle,
    Indoor,
    Spatial,
    Action,
}

impl Category {
    pub fn level(&self) -> SemanticLevel {
        match self {
            Category::Material | Category::Color => SemanticLevel::Attribute,
            Category::Animal | Category::Vehicle | Category::Indoor => SemanticLevel::Object,
            Category::Spatial | Category::Action => SemanticLevel::Relation,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Category::Material => "material",
            Category::Color => "color",
            Category::Animal => "animal",
            Category::Vehicle => "vehicle",
            Category::Indoor => "indoor",
            Category::Spatial => "spatial",
            Category::Action => "action",
        }
    }

    pub fn all() -> [Category; 7] {
        [
            Category::Material,
            Category::Color,
            Category::Animal,
            Category::Vehicle,
            Category::Indoor,
            Category::Spatial,
            Category::Action,
        ]
    }
}

/// Annotated object box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub label: String,
    pub bbox: [f64; 4],
}

impl BoundingBox {
    pub fn rect(&self) -> PixelBox {
        PixelBox::new(self.bbox[0], self.bbox[1], self.bbox[2], self.bbox[3])
    }
}

/// One question/image/answer unit.
///
/// JSONL schema (one record per line):
/// `{"id", "question", "image", "edited_image", "answer", "level",
///   "category", "boxes", "relations"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VQATriple {
    pub id: String,
    pub question: String,
    pub image: String,
    pub edited_image: Option<String>,
    pub answer: String,
    pub level: SemanticLevel,
    pub category: Category,
    #[serde(default)]
    pub boxes: Vec<BoundingBox>,
    #[serde(default)]
    pub relations: Option<Vec<(String, String, String)>>,
}

impl VQATriple {
    pub fn binary_answer(&self) -> Result<BinaryAnswer> {
        BinaryAnswer::from_str_answer(&self.answer).ok_or_else(|| VseamError::NonBinaryAnswer {
            id: self.id.clone(),
            answer: self.answer.clone(),
        })
    }

    fn validate(&self) -> Result<()> {
        if self.binary_answer().is_err() {
            return Err(VseamError::NonBinaryAnswer {
                id: self.id.clone(),
                answer: self.answer.clone(),
            });
        }
        if self.category.level() != self.level {
            return Err(VseamError::InvalidTriple {
                id: self.id.clone(),
                message: format!(
                    "category `{}` belongs to level `{}`, not `{}`",
                    self.category.as_str(),
                    self.category.level().as_str(),
                    self.level.as_str()
                ),
            });
        }
        for b in &self.boxes {
            if !b.rect().is_well_formed() {
                return Err(VseamError::InvalidTriple {
                    id: self.id.clone(),
                    message: format!(
                        "box `{}` [{}, {}, {}, {}] violates 0 <= x0 < x1, 0 <= y0 < y1",
                        b.label, b.bbox[0], b.bbox[1], b.bbox[2], b.bbox[3]
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Load and validate triples from a JSONL file. Malformed lines are
/// rejected with their line number and the serde message naming the field.
pub fn load_triples(path: &Path) -> Result<Vec<VQATriple>> {
    let content = fs::read_to_string(path).map_err(|e| VseamError::io_at(path, e))?;
    let mut triples = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in content.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let triple: VQATriple = serde_json::from_str(line).map_err(|e| VseamError::Schema {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        triple.validate().map_err(|e| VseamError::Schema {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        if !seen.insert(triple.id.clone()) {
            return Err(VseamError::DuplicateId {
                id: triple.id,
                line: line_no,
            });
        }
        triples.push(triple);
    }
    Ok(triples)
}

pub fn write_triples(triples: &[VQATriple], path: &Path) -> Result<()> {
    let mut out = String::new();
    for t in triples {
        out.push_str(&serde_json::to_string(t)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| VseamError::io_at(path, e))?;
    Ok(())
}

/// Resolve a triple's image path (relative paths are joined to `root`).
pub fn image_path(root: &Path, reference: &str) -> PathBuf {
    let p = Path::new(reference);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Token sequence for a triple's clean or edited image.
pub fn triple_sequence(
    model: &ModelHandle,
    triple: &VQATriple,
    images_root: &Path,
    edited: bool,
) -> Result<TokenSequence> {
    let reference = if edited {
        triple
            .edited_image
            .as_deref()
            .ok_or_else(|| VseamError::MissingEditedImage {
                id: triple.id.clone(),
            })?
    } else {
        &triple.image
    };
    let image = load_gray(&image_path(images_root, reference))?;
    model.encode_input(&triple.question, &image)
}

/// Correct/incorrect bucket for one triple under one model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Correct,
    Incorrect,
}

/// Triples plus each one's correct/incorrect membership under a model.
/// The membership partitions the split: every id is in exactly one bucket.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub triples: Vec<VQATriple>,
    pub membership: BTreeMap<String, Verdict>,
}

impl DatasetSplit {
    /// Run the clean-image binary prediction for every triple and bucket it.
    pub fn from_model(
        model: &ModelHandle,
        triples: Vec<VQATriple>,
        images_root: &Path,
    ) -> Result<Self> {
        if triples.is_empty() {
            return Err(VseamError::EmptyDataset);
        }
        let verdicts = par_map(&triples, |t| {
            let seq = triple_sequence(model, t, images_root, false)?;
            let pred = model.binary_answer(&seq, &InterventionPlan::empty())?;
            let gold = t.binary_answer()?;
            Ok(if pred == gold {
                Verdict::Correct
            } else {
                Verdict::Incorrect
            })
        })?;
        let membership = triples
            .iter()
            .zip(verdicts)
            .map(|(t, v)| (t.id.clone(), v))
            .collect();
        Ok(DatasetSplit {
            triples,
            membership,
        })
    }

    pub fn bucket(&self, verdict: Verdict) -> Vec<&VQATriple> {
        self.triples
            .iter()
            .filter(|t| self.membership.get(&t.id) == Some(&verdict))
            .collect()
    }
}

/// Keep exactly the triples where the model answers correctly on the clean
/// image and incorrectly on the edited one. Order is preserved.
pub fn filter_causal_pairs(
    model: &ModelHandle,
    triples: &[VQATriple],
    images_root: &Path,
) -> Result<Vec<VQATriple>> {
    let keep = par_map(triples, |t| {
        if t.edited_image.is_none() {
            return Err(VseamError::MissingEditedImage { id: t.id.clone() });
        }
        let gold = t.binary_answer()?;
        let clean_seq = triple_sequence(model, t, images_root, false)?;
        let clean_pred = model.binary_answer(&clean_seq, &InterventionPlan::empty())?;
        if clean_pred != gold {
            return Ok(false);
        }
        let edited_seq = triple_sequence(model, t, images_root, true)?;
        let edited_pred = model.binary_answer(&edited_seq, &InterventionPlan::empty())?;
        Ok(edited_pred != gold)
    })?;
    Ok(triples
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(t, _)| t.clone())
        .collect())
}

/// Per-category yes/no counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub category: Category,
    pub level: SemanticLevel,
    pub yes: usize,
    pub no: usize,
}

impl CategoryCounts {
    pub fn total(&self) -> usize {
        self.yes + self.no
    }
}

/// Balancing report: input counts in benchmark-table layout (levels in
/// attribute/object/relation order, ascending size within each level),
/// kept counts, and the shuffle seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BalanceReport {
    pub seed: u64,
    pub input: Vec<CategoryCounts>,
    pub kept: Vec<CategoryCounts>,
    pub input_total: usize,
    pub kept_total: usize,
}

fn count_categories(triples: &[VQATriple]) -> Result<Vec<CategoryCounts>> {
    let mut counts: BTreeMap<Category, (usize, usize)> = BTreeMap::new();
    for t in triples {
        let entry = counts.entry(t.category).or_default();
        match t.binary_answer()? {
            BinaryAnswer::Yes => entry.0 += 1,
            BinaryAnswer::No => entry.1 += 1,
        }
    }
    let mut rows: Vec<CategoryCounts> = counts
        .into_iter()
        .map(|(category, (yes, no))| CategoryCounts {
            category,
            level: category.level(),
            yes,
            no,
        })
        .collect();
    rows.sort_by_key(|r| (r.level, r.total(), r.category));
    Ok(rows)
}

/// Down-sample the majority answer class within each category with a
/// seeded shuffle until |#yes - #no| <= 1 (the min rule gives 0).
pub fn balance_and_stats(
    triples: &[VQATriple],
    seed: u64,
) -> Result<(Vec<VQATriple>, BalanceReport)> {
    let input = count_categories(triples)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drop: BTreeSet<String> = BTreeSet::new();
    for cat in Category::all() {
        let mut yes_ids = Vec::new();
        let mut no_ids = Vec::new();
        for t in triples.iter().filter(|t| t.category == cat) {
            match t.binary_answer()? {
                BinaryAnswer::Yes => yes_ids.push(t.id.clone()),
                BinaryAnswer::No => no_ids.push(t.id.clone()),
            }
        }
        let keep = yes_ids.len().min(no_ids.len());
        for ids in [&mut yes_ids, &mut no_ids] {
            if ids.len() > keep {
                ids.shuffle(&mut rng);
                for id in ids.iter().skip(keep) {
                    drop.insert(id.clone());
                }
            }
        }
    }

    let kept_triples: Vec<VQATriple> = triples
        .iter()
        .filter(|t| !drop.contains(&t.id))
        .cloned()
        .collect();
    let kept = count_categories(&kept_triples)?;
    let report = BalanceReport {
        seed,
        input_total: triples.len(),
        kept_total: kept_triples.len(),
        input,
        kept,
    };
    Ok((kept_triples, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mk(id: &str, category: Category, answer: &str) -> VQATriple {
        VQATriple {
            id: id.to_string(),
            question: "is the panel white?".to_string(),
            image: "img.png".to_string(),
            edited_image: None,
            answer: answer.to_string(),
            level: category.level(),
            category,
            boxes: vec![],
            relations: None,
        }
    }

    #[test]
    fn majority_is_downsampled_to_minority() {
        let mut triples = Vec::new();
        for i in 0..10 {
            triples.push(mk(&format!("y{i}"), Category::Color, "yes"));
        }
        for i in 0..4 {
            triples.push(mk(&format!("n{i}"), Category::Color, "no"));
        }
        let (kept, report) = balance_and_stats(&triples, 0).unwrap();
        assert_eq!(kept.len(), 8);
        assert_eq!(report.kept[0].yes, 4);
        assert_eq!(report.kept[0].no, 4);
    }

    #[test]
    fn balanced_input_is_unchanged() {
        let mut triples = Vec::new();
        for i in 0..5 {
            triples.push(mk(&format!("y{i}"), Category::Spatial, "yes"));
            triples.push(mk(&format!("n{i}"), Category::Spatial, "no"));
        }
        let (kept, _) = balance_and_stats(&triples, 123).unwrap();
        assert_eq!(kept, triples);
    }

    #[test]
    fn balancing_is_deterministic_and_never_grows() {
        let mut triples = Vec::new();
        for i in 0..9 {
            triples.push(mk(&format!("y{i}"), Category::Animal, "yes"));
        }
        for i in 0..3 {
            triples.push(mk(&format!("n{i}"), Category::Animal, "no"));
        }
        let (a, _) = balance_and_stats(&triples, 7).unwrap();
        let (b, _) = balance_and_stats(&triples, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= triples.len());
        let (c, _) = balance_and_stats(&triples, 8).unwrap();
        assert_eq!(c.len(), a.len());
    }

    /// Benchmark-scale counts: seven categories totalling 12,647.
    #[test]
    fn benchmark_table_counts() {
        let sizes = [
            (Category::Material, 1300),
            (Category::Color, 1500),
            (Category::Animal, 1070),
            (Category::Vehicle, 1740),
            (Category::Indoor, 2092),
            (Category::Spatial, 1950),
            (Category::Action, 2995),
        ];
        let mut triples = Vec::new();
        for (cat, n) in sizes {
            for i in 0..n {
                let answer = if i % 2 == 0 { "yes" } else { "no" };
                triples.push(mk(&format!("{}-{i}", cat.as_str()), cat, answer));
            }
        }
        let (_, report) = balance_and_stats(&triples, 0).unwrap();
        assert_eq!(report.input_total, 12_647);
        let layout: Vec<(Category, usize)> = report
            .input
            .iter()
            .map(|r| (r.category, r.total()))
            .collect();
        assert_eq!(
            layout,
            vec![
                (Category::Material, 1300),
                (Category::Color, 1500),
                (Category::Animal, 1070),
                (Category::Vehicle, 1740),
                (Category::Indoor, 2092),
                (Category::Spatial, 1950),
                (Category::Action, 2995),
            ]
        );
    }

    #[test]
    fn loader_surfaces_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = serde_json::to_string(&mk("a", Category::Color, "yes")).unwrap();
        std::fs::write(
            &path,
            format!("{good}\n{{\"id\": \"b\", \"question\": \"q\", \"image\": \"i\"}}\n"),
        )
        .unwrap();
        let err = load_triples(&path).unwrap_err();
        match err {
            VseamError::Schema { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("answer"), "message was: {message}");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn loader_rejects_inverted_boxes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("box.jsonl");
        let mut t = mk("a", Category::Color, "yes");
        t.boxes.push(BoundingBox {
            label: "panel".to_string(),
            bbox: [4.0, 0.0, 2.0, 2.0],
        });
        std::fs::write(&path, serde_json::to_string(&t).unwrap() + "\n").unwrap();
        let err = load_triples(&path).unwrap_err();
        assert!(matches!(err, VseamError::Schema { line: 1, .. }));
    }

    #[test]
    fn loader_rejects_duplicate_ids_and_level_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.jsonl");
        let t = mk("a", Category::Color, "yes");
        let line = serde_json::to_string(&t).unwrap();
        std::fs::write(&path, format!("{line}\n{line}\n")).unwrap();
        assert!(matches!(
            load_triples(&path).unwrap_err(),
            VseamError::DuplicateId { line: 2, .. }
        ));

        let path2 = dir.path().join("lvl.jsonl");
        let mut t2 = mk("b", Category::Color, "yes");
        t2.level = SemanticLevel::Relation;
        std::fs::write(&path2, serde_json::to_string(&t2).unwrap() + "\n").unwrap();
        assert!(matches!(
            load_triples(&path2).unwrap_err(),
            VseamError::Schema { .. }
        ));
    }
}

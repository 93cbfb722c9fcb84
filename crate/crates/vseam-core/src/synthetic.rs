//! Deterministic synthetic fixture: a small VQA benchmark whose causal
//! structure is known by construction.
//!
//! Built around the planted toy model, where the answer is carried by the
//! image's patch-brightness majority through one designated signal head,
//! and a designated noise head injects a patch-parity distractor. Every
//! triple is generated to a per-role contract and verified against the
//! model before it is written:
//!
//! - reliable triples ("easy"): answered correctly, flipped by the edit,
//!   and constructed so that masking the signal head flips them;
//! - distracted triples ("hard"): answered incorrectly because of the
//!   parity distractor, answered correctly once the noise head is masked.
//!
//! Images are 8x8 grayscale PNGs over a 4x4 patch grid; the annotated box
//! covers the 12-patch object region that edits invert.

use std::path::{Path, PathBuf};

use image::GrayImage;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_triples, BoundingBox, Category, VQATriple};
use crate::error::{Result, VseamError};
use crate::img::save_gray;
use crate::model::{planted, Action, InterventionPlan, ModelHandle, PixelBox};

/// Object region used by every fixture triple: patch rows 0..2 (12 of 16).
const OBJECT_BOX: [f64; 4] = [0.0, 0.0, 8.0, 6.0];
const INSIDE_PATCHES: usize = 12;
const TOTAL_PATCHES: usize = 16;
const ATTEMPTS: usize = 200;

#[derive(Debug, Clone, Copy)]
pub struct FixtureOptions {
    /// Triples per category; the last third (at least two when >= 4) are
    /// distracted triples.
    pub per_category: usize,
    pub seed: u64,
    /// Seed of the planted model the fixture is verified against.
    pub model_seed: u64,
}

impl Default for FixtureOptions {
    fn default() -> Self {
        FixtureOptions {
            per_category: 6,
            seed: 7,
            model_seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureSummary {
    pub triples_path: PathBuf,
    pub images_root: PathBuf,
    pub total: usize,
    pub reliable: usize,
    pub distracted: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    /// Correct on clean, flipped by the edit.
    Easy,
    /// Incorrect on clean, correct when the noise head is masked.
    Hard,
}

/// Patch-count targets for one triple.
struct LayoutSpec {
    /// Bright patches inside the object box (of 12).
    bright_inside: usize,
    /// Bright patches outside the box (of 4).
    bright_outside: usize,
    /// Odd-parity patches over the whole image (of 16).
    odd_total: usize,
}

/// Targets chosen so the planted model's pooled decision value has the
/// required sign per role (brightness margin vs. 0.35-weighted parity).
fn layout_spec(role: Role, answer_yes: bool) -> LayoutSpec {
    match (role, answer_yes) {
        // Margin +6, parity +4: correct; masking the signal head leaves
        // the negative parity term, flipping the prediction.
        (Role::Easy, true) => LayoutSpec {
            bright_inside: 11,
            bright_outside: 0,
            odd_total: 10,
        },
        (Role::Easy, false) => LayoutSpec {
            bright_inside: 1,
            bright_outside: 4,
            odd_total: 6,
        },
        // Margin +2 overwhelmed by parity +14: incorrect until the noise
        // head is masked.
        (Role::Hard, true) => LayoutSpec {
            bright_inside: 9,
            bright_outside: 0,
            odd_total: 15,
        },
        (Role::Hard, false) => LayoutSpec {
            bright_inside: 3,
            bright_outside: 4,
            odd_total: 1,
        },
    }
}

/// Render patch levels as an 8x8 image; all four pixels of a patch share
/// one value `16 * level + jitter`, so patch means quantize back exactly.
fn render(levels: &[usize; TOTAL_PATCHES], jitter: &[u8; TOTAL_PATCHES]) -> GrayImage {
    let mut img = GrayImage::new(8, 8);
    for (p, (&level, &j)) in levels.iter().zip(jitter).enumerate() {
        let (row, col) = (p / 4, p % 4);
        let value = (level * 16) as u8 + j;
        for dy in 0..2 {
            for dx in 0..2 {
                img.put_pixel((col * 2 + dx) as u32, (row * 2 + dy) as u32, image::Luma([value]));
            }
        }
    }
    img
}

/// Invert the object-box pixels, the canonical pre-generated edit.
fn invert_box(img: &GrayImage) -> GrayImage {
    let mut out = img.clone();
    for y in OBJECT_BOX[1] as u32..OBJECT_BOX[3] as u32 {
        for x in OBJECT_BOX[0] as u32..OBJECT_BOX[2] as u32 {
            let v = out.get_pixel(x, y).0[0];
            out.put_pixel(x, y, image::Luma([255 - v]));
        }
    }
    out
}

fn build_candidate(spec: &LayoutSpec, rng: &mut ChaCha8Rng) -> (GrayImage, GrayImage) {
    let mut bright = [false; TOTAL_PATCHES];
    let mut inside: Vec<usize> = (0..INSIDE_PATCHES).collect();
    inside.shuffle(rng);
    for &p in inside.iter().take(spec.bright_inside) {
        bright[p] = true;
    }
    let mut outside: Vec<usize> = (INSIDE_PATCHES..TOTAL_PATCHES).collect();
    outside.shuffle(rng);
    for &p in outside.iter().take(spec.bright_outside) {
        bright[p] = true;
    }

    let mut odd = [false; TOTAL_PATCHES];
    let mut all: Vec<usize> = (0..TOTAL_PATCHES).collect();
    all.shuffle(rng);
    for &p in all.iter().take(spec.odd_total) {
        odd[p] = true;
    }

    let mut levels = [0usize; TOTAL_PATCHES];
    let mut jitter = [0u8; TOTAL_PATCHES];
    for p in 0..TOTAL_PATCHES {
        // Levels by class: bright >= 8, odd parity matches the flag.
        let base: &[usize] = match (bright[p], odd[p]) {
            (true, true) => &[9, 11, 13, 15],
            (true, false) => &[8, 10, 12, 14],
            (false, true) => &[1, 3, 5, 7],
            (false, false) => &[0, 2, 4, 6],
        };
        levels[p] = base[rng.random_range(0..base.len())];
        jitter[p] = rng.random_range(0..16) as u8;
    }
    let clean = render(&levels, &jitter);
    let edited = invert_box(&clean);
    (clean, edited)
}

struct CategoryTemplate {
    category: Category,
    question: fn(usize) -> String,
    relations: fn(usize) -> Option<Vec<(String, String, String)>>,
    label: fn(usize) -> String,
}

fn nth<const N: usize>(items: [&str; N], i: usize) -> &str {
    items[i % N]
}

fn templates() -> Vec<CategoryTemplate> {
    vec![
        CategoryTemplate {
            category: Category::Color,
            question: |i| format!("Is the {} white?", nth(["panel", "mug", "towel", "door", "floor", "wall"], i)),
            relations: |_| None,
            label: |i| nth(["panel", "mug", "towel", "door", "floor", "wall"], i).to_string(),
        },
        CategoryTemplate {
            category: Category::Material,
            question: |i| format!("Is the {} made of marble?", nth(["counter", "bench", "statue", "bowl", "vase", "sink"], i)),
            relations: |_| None,
            label: |i| nth(["counter", "bench", "statue", "bowl", "vase", "sink"], i).to_string(),
        },
        CategoryTemplate {
            category: Category::Animal,
            question: |i| format!("Is there a white {} in this picture?", nth(["cat", "horse", "bird", "rabbit", "goat", "sheep"], i)),
            relations: |_| None,
            label: |i| nth(["cat", "horse", "bird", "rabbit", "goat", "sheep"], i).to_string(),
        },
        CategoryTemplate {
            category: Category::Vehicle,
            question: |i| format!("Is there a white {} in this picture?", nth(["van", "bus", "truck", "car", "boat", "tram"], i)),
            relations: |_| None,
            label: |i| nth(["van", "bus", "truck", "car", "boat", "tram"], i).to_string(),
        },
        CategoryTemplate {
            category: Category::Indoor,
            question: |i| format!("Is there a white {} in this picture?", nth(["lamp", "sofa", "shelf", "chair", "table", "mirror"], i)),
            relations: |_| None,
            label: |i| nth(["lamp", "sofa", "shelf", "chair", "table", "mirror"], i).to_string(),
        },
        CategoryTemplate {
            category: Category::Spatial,
            question: |i| {
                let pairs = [("lamp", "sofa"), ("mug", "plate"), ("vase", "mirror"), ("box", "door"), ("chair", "table"), ("bowl", "tray")];
                let (a, b) = pairs[i % pairs.len()];
                format!("Is the {a} to the left of the {b}?")
            },
            relations: |i| {
                let pairs = [("lamp", "sofa"), ("mug", "plate"), ("vase", "mirror"), ("box", "door"), ("chair", "table"), ("bowl", "tray")];
                let (a, b) = pairs[i % pairs.len()];
                Some(vec![(a.to_string(), "left of".to_string(), b.to_string())])
            },
            label: |i| {
                let pairs = [("lamp", "sofa"), ("mug", "plate"), ("vase", "mirror"), ("box", "door"), ("chair", "table"), ("bowl", "tray")];
                pairs[i % pairs.len()].0.to_string()
            },
        },
        CategoryTemplate {
            category: Category::Action,
            question: |i| {
                let pairs = [("man", "lamp"), ("woman", "bowl"), ("man", "towel"), ("woman", "mug"), ("man", "vase"), ("woman", "tray")];
                let (a, b) = pairs[i % pairs.len()];
                format!("Is the {a} holding the {b}?")
            },
            relations: |i| {
                let pairs = [("man", "lamp"), ("woman", "bowl"), ("man", "towel"), ("woman", "mug"), ("man", "vase"), ("woman", "tray")];
                let (a, b) = pairs[i % pairs.len()];
                Some(vec![(a.to_string(), "holding".to_string(), b.to_string())])
            },
            label: |i| {
                let pairs = [("man", "lamp"), ("woman", "bowl"), ("man", "towel"), ("woman", "mug"), ("man", "vase"), ("woman", "tray")];
                pairs[i % pairs.len()].1.to_string()
            },
        },
    ]
}

fn noise_mask_plan() -> InterventionPlan {
    InterventionPlan::from_actions([Action::MaskHead {
        layer: planted::NOISE_LAYER,
        head: planted::NOISE_HEAD,
    }])
    .expect("single action")
}

fn signal_mask_plan() -> InterventionPlan {
    InterventionPlan::from_actions([Action::MaskHead {
        layer: planted::SIGNAL_LAYER,
        head: planted::SIGNAL_HEAD,
    }])
    .expect("single action")
}

fn meets_contract(
    model: &ModelHandle,
    question: &str,
    answer_yes: bool,
    role: Role,
    clean: &GrayImage,
    edited: &GrayImage,
) -> Result<bool> {
    let gold = if answer_yes {
        crate::model::BinaryAnswer::Yes
    } else {
        crate::model::BinaryAnswer::No
    };
    let clean_seq = model.encode_input(question, clean)?;
    let clean_pred = model.binary_answer(&clean_seq, &InterventionPlan::empty())?;
    let denoised_pred = model.binary_answer(&clean_seq, &noise_mask_plan())?;
    match role {
        Role::Easy => {
            if clean_pred != gold || denoised_pred != gold {
                return Ok(false);
            }
            // The designated signal head must be load-bearing.
            let designalled = model.binary_answer(&clean_seq, &signal_mask_plan())?;
            if designalled == gold {
                return Ok(false);
            }
            let edited_seq = model.encode_input(question, edited)?;
            let edited_pred = model.binary_answer(&edited_seq, &InterventionPlan::empty())?;
            Ok(edited_pred != gold)
        }
        Role::Hard => Ok(clean_pred != gold && denoised_pred == gold),
    }
}

/// Generate the fixture into `dir`: `triples.jsonl` plus `images/`.
pub fn generate_fixture(dir: &Path, options: FixtureOptions) -> Result<FixtureSummary> {
    std::fs::create_dir_all(dir).map_err(|e| VseamError::io_at(dir, e))?;
    let model = ModelHandle::planted(options.model_seed);
    let images_dir = dir.join("images");

    let per_cat = options.per_category.max(2);
    let hard_per_cat = if per_cat >= 4 { 2 } else { 0 };
    let easy_per_cat = per_cat - hard_per_cat;

    let mut triples = Vec::new();
    let mut reliable = 0usize;
    let mut distracted = 0usize;

    for (cat_idx, template) in templates().iter().enumerate() {
        for item in 0..per_cat {
            let role = if item < easy_per_cat { Role::Easy } else { Role::Hard };
            let answer_yes = item % 2 == 0;
            let spec = layout_spec(role, answer_yes);
            let question = (template.question)(item);

            let mut accepted = None;
            for attempt in 0..ATTEMPTS {
                let stream = (cat_idx as u64) << 32 | (item as u64) << 16 | attempt as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15));
                let (clean, edited) = build_candidate(&spec, &mut rng);
                if meets_contract(&model, &question, answer_yes, role, &clean, &edited)? {
                    accepted = Some((clean, edited));
                    break;
                }
            }
            let (clean, edited) = accepted.ok_or_else(|| VseamError::Config {
                field: "fixture".to_string(),
                message: format!(
                    "no candidate met the {role:?} contract for {} item {item}",
                    template.category.as_str()
                ),
            })?;

            let id = format!("{}-{item:02}", template.category.as_str());
            let clean_ref = format!("images/{id}.png");
            let edited_ref = format!("images/{id}_edited.png");
            save_gray(&clean, &images_dir.join(format!("{id}.png")))?;
            save_gray(&edited, &images_dir.join(format!("{id}_edited.png")))?;

            match role {
                Role::Easy => reliable += 1,
                Role::Hard => distracted += 1,
            }
            triples.push(VQATriple {
                id,
                question,
                image: clean_ref,
                edited_image: Some(edited_ref),
                answer: if answer_yes { "yes" } else { "no" }.to_string(),
                level: template.category.level(),
                category: template.category,
                boxes: vec![BoundingBox {
                    label: (template.label)(item),
                    bbox: OBJECT_BOX,
                }],
                relations: (template.relations)(item),
            });
        }
    }

    let triples_path = dir.join("triples.jsonl");
    write_triples(&triples, &triples_path)?;
    Ok(FixtureSummary {
        triples_path,
        images_root: dir.to_path_buf(),
        total: triples.len(),
        reliable,
        distracted,
    })
}

/// The object-region box shared by all fixture triples.
pub fn object_box() -> PixelBox {
    PixelBox::new(OBJECT_BOX[0], OBJECT_BOX[1], OBJECT_BOX[2], OBJECT_BOX[3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{filter_causal_pairs, load_triples};

    #[test]
    fn fixture_is_deterministic_and_meets_contracts() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let opts = FixtureOptions {
            per_category: 4,
            ..FixtureOptions::default()
        };
        let s1 = generate_fixture(dir1.path(), opts).unwrap();
        let s2 = generate_fixture(dir2.path(), opts).unwrap();
        assert_eq!(s1.total, 28);
        assert_eq!(
            std::fs::read(&s1.triples_path).unwrap(),
            std::fs::read(&s2.triples_path).unwrap()
        );

        // The Eq.-4 filter keeps exactly the reliable triples: clean
        // prediction correct, edited prediction flipped.
        let model = ModelHandle::planted(opts.model_seed);
        let triples = load_triples(&s1.triples_path).unwrap();
        let kept = filter_causal_pairs(&model, &triples, dir1.path()).unwrap();
        assert_eq!(kept.len(), s1.reliable);
    }
}

//! Tool-client interfaces and deterministic stubs.
//!
//! The pipeline's heavy external tools (language model, segmenter,
//! inpainter, feature encoder) sit behind these traits. The bundled stubs
//! are deterministic stand-ins used by tests and desk-scale runs; real
//! deployments implement the same traits against their tools of choice.

use image::GrayImage;

use crate::error::{Result, VseamError};
use crate::model::PixelBox;

pub trait LanguageClient: Send + Sync {
    fn name(&self) -> &str;
    /// Complete a few-shot prompt; expected to return only the rewritten
    /// question.
    fn complete(&self, prompt: &str) -> Result<String>;
}

pub trait SegmenterClient: Send + Sync {
    fn name(&self) -> &str;
    /// Refine a box to a binary mask (255 = edit region, 0 = keep).
    fn segment(&self, image: &GrayImage, region: &PixelBox) -> Result<GrayImage>;
}

pub trait InpainterClient: Send + Sync {
    fn name(&self) -> &str;
    /// Repaint the masked region guided by `prompt`; must leave unmasked
    /// pixels untouched.
    fn inpaint(&self, image: &GrayImage, mask: &GrayImage, prompt: &str) -> Result<GrayImage>;
}

pub trait EncoderClient: Send + Sync {
    fn name(&self) -> &str;
    /// Global feature vector for QC similarity.
    fn encode(&self, image: &GrayImage) -> Result<Vec<f64>>;
}

/// Box-to-box-mask segmenter stub.
#[derive(Debug, Clone, Default)]
pub struct StubSegmenter;

impl SegmenterClient for StubSegmenter {
    fn name(&self) -> &str {
        "stub-segmenter"
    }

    fn segment(&self, image: &GrayImage, region: &PixelBox) -> Result<GrayImage> {
        if !region.is_well_formed()
            || region.x1 > f64::from(image.width())
            || region.y1 > f64::from(image.height())
        {
            return Err(VseamError::RegionOutOfBounds);
        }
        let mut mask = GrayImage::new(image.width(), image.height());
        for y in region.y0 as u32..region.y1 as u32 {
            for x in region.x0 as u32..region.x1 as u32 {
                mask.put_pixel(x, y, image::Luma([255]));
            }
        }
        Ok(mask)
    }
}

/// How the stub inpainter chooses new pixel values.
#[derive(Debug, Clone)]
enum FillRule {
    Constant(u8),
    /// Pick the fill level from the first recognized word of the prompt,
    /// inverting the region when no word matches.
    PromptGuided,
}

/// Inpainter stub: repaints exactly the masked pixels.
#[derive(Debug, Clone)]
pub struct StubInpainter {
    rule: FillRule,
}

/// Prompt words the stub understands, with their fill intensities.
const FILL_WORDS: &[(&str, u8)] = &[
    ("white", 245),
    ("black", 10),
    ("light", 200),
    ("dark", 55),
    ("marble", 230),
    ("charcoal", 25),
    ("gray", 128),
];

impl StubInpainter {
    pub fn constant(value: u8) -> Self {
        StubInpainter {
            rule: FillRule::Constant(value),
        }
    }

    pub fn prompt_guided() -> Self {
        StubInpainter {
            rule: FillRule::PromptGuided,
        }
    }

    fn fill_for(&self, prompt: &str, original: u8) -> u8 {
        match &self.rule {
            FillRule::Constant(v) => *v,
            FillRule::PromptGuided => {
                let lower = prompt.to_lowercase();
                for word in lower.split(|c: char| !c.is_alphanumeric()) {
                    if let Some((_, v)) = FILL_WORDS.iter().find(|(w, _)| *w == word) {
                        return *v;
                    }
                }
                255 - original
            }
        }
    }
}

impl InpainterClient for StubInpainter {
    fn name(&self) -> &str {
        "stub-inpainter"
    }

    fn inpaint(&self, image: &GrayImage, mask: &GrayImage, prompt: &str) -> Result<GrayImage> {
        if mask.dimensions() != image.dimensions() {
            return Err(VseamError::Client {
                client: self.name().to_string(),
                message: "mask dimensions do not match the image".to_string(),
            });
        }
        let mut out = image.clone();
        for (x, y, m) in mask.enumerate_pixels() {
            if m.0[0] > 0 {
                let v = self.fill_for(prompt, image.get_pixel(x, y).0[0]);
                out.put_pixel(x, y, image::Luma([v]));
            }
        }
        Ok(out)
    }
}

/// Mean-pooled block features, the stub stand-in for a vision encoder.
#[derive(Debug, Clone)]
pub struct StubEncoder {
    /// Block side length in pixels.
    pub block: u32,
}

impl Default for StubEncoder {
    fn default() -> Self {
        StubEncoder { block: 2 }
    }
}

impl EncoderClient for StubEncoder {
    fn name(&self) -> &str {
        "stub-encoder"
    }

    fn encode(&self, image: &GrayImage) -> Result<Vec<f64>> {
        let bw = self.block.max(1);
        let cols = image.width().div_ceil(bw);
        let rows = image.height().div_ceil(bw);
        let mut features = Vec::with_capacity((rows * cols) as usize);
        for r in 0..rows {
            for c in 0..cols {
                let mut sum = 0.0;
                let mut n = 0.0;
                for y in r * bw..((r + 1) * bw).min(image.height()) {
                    for x in c * bw..((c + 1) * bw).min(image.width()) {
                        sum += f64::from(image.get_pixel(x, y).0[0]);
                        n += 1.0;
                    }
                }
                features.push(sum / n);
            }
        }
        Ok(features)
    }
}

/// Word-pair substitution language stub. It reads the final
/// `Original Question:` line of the few-shot prompt and swaps the first
/// word found in its pair table, mirroring what the prompt asks for.
#[derive(Debug, Clone, Default)]
pub struct StubLanguageClient;

const SWAP_PAIRS: &[(&str, &str)] = &[
    ("white", "black"),
    ("light", "dark"),
    ("marble", "charcoal"),
    ("left", "right"),
    ("under", "above"),
    ("holding", "dropping"),
    ("riding", "feeding"),
    ("cat", "dog"),
];

impl LanguageClient for StubLanguageClient {
    fn name(&self) -> &str {
        "stub-language"
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let target = prompt
            .rfind("Original Question:")
            .map(|i| &prompt[i + "Original Question:".len()..])
            .and_then(|rest| rest.split(" Answer:").next())
            .map(str::trim)
            .ok_or_else(|| VseamError::Client {
                client: self.name().to_string(),
                message: "prompt has no final `Original Question:` slot".to_string(),
            })?;

        let mut rewritten = Vec::new();
        let mut swapped = false;
        for word in target.split_whitespace() {
            let bare = word.trim_end_matches('?');
            let suffix = if word.ends_with('?') { "?" } else { "" };
            let lower = bare.to_lowercase();
            let replacement = if swapped {
                None
            } else {
                SWAP_PAIRS.iter().find_map(|(a, b)| {
                    if *a == lower {
                        Some((*b).to_string())
                    } else if *b == lower {
                        Some((*a).to_string())
                    } else {
                        None
                    }
                })
            };
            match replacement {
                Some(r) => {
                    swapped = true;
                    rewritten.push(format!("{r}{suffix}"));
                }
                None => rewritten.push(word.to_string()),
            }
        }
        if !swapped {
            return Err(VseamError::Client {
                client: self.name().to_string(),
                message: format!("no known semantic unit to swap in `{target}`"),
            });
        }
        Ok(rewritten.join(" "))
    }
}

/// Retry a client call with exponential backoff.
pub fn with_retries<T>(
    attempts: usize,
    base_delay_ms: u64,
    mut call: impl FnMut() -> Result<T>,
) -> Result<T> {
    let mut delay = base_delay_ms;
    let mut last = None;
    for attempt in 0..attempts.max(1) {
        match call() {
            Ok(v) => return Ok(v),
            Err(e) => {
                last = Some(e);
                if attempt + 1 < attempts && delay > 0 {
                    std::thread::sleep(std::time::Duration::from_millis(delay));
                    delay = delay.saturating_mul(2);
                }
            }
        }
    }
    Err(last.expect("at least one attempt"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stub_language_swaps_one_unit() {
        let client = StubLanguageClient;
        let prompt = "...\nNow please complete the following. Only output the rewritten counterfactual question, without explanation:\nOriginal Question: Is the panel white? Answer: Yes. Full Answer: The panel is white. Counterfactual Question:";
        assert_eq!(client.complete(prompt).unwrap(), "Is the panel black?");
    }

    #[test]
    fn stub_language_errors_without_known_units() {
        let client = StubLanguageClient;
        let prompt = "Original Question: Is it weird? Answer: Yes. Full Answer: It is. Counterfactual Question:";
        assert!(matches!(
            client.complete(prompt),
            Err(VseamError::Client { .. })
        ));
    }

    #[test]
    fn stub_inpainter_uses_prompt_colors() {
        let img = GrayImage::from_pixel(4, 4, image::Luma([100]));
        let mut mask = GrayImage::new(4, 4);
        mask.put_pixel(1, 1, image::Luma([255]));
        let inp = StubInpainter::prompt_guided();
        let out = inp.inpaint(&img, &mask, "Is the panel black?").unwrap();
        assert_eq!(out.get_pixel(1, 1).0[0], 10);
        let out = inp.inpaint(&img, &mask, "Is the lamp above the desk?").unwrap();
        assert_eq!(out.get_pixel(1, 1).0[0], 155); // inverted
        assert_eq!(out.get_pixel(0, 0).0[0], 100);
    }

    #[test]
    fn retries_return_first_success() {
        let mut calls = 0;
        let result = with_retries(3, 0, || {
            calls += 1;
            if calls < 3 {
                Err(VseamError::EmptyMask)
            } else {
                Ok(calls)
            }
        });
        assert_eq!(result.unwrap(), 3);
    }
}

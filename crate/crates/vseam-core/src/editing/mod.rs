//! Semantic visual editing: counterfactual prompts, region editing through
//! tool clients, and cosine-similarity quality control.

pub mod clients;
mod prompt;
mod validate;

use image::GrayImage;
use serde::{Deserialize, Serialize};

pub use prompt::build_counterfactual_prompt;
pub use validate::{
    validate_counterfactual, CounterfactualVerdict, RejectReason, DEFAULT_STOP_LIST,
};

use crate::dataset::SemanticLevel;
use crate::error::{Result, VseamError};
use crate::model::PixelBox;
use clients::{InpainterClient, SegmenterClient};

/// One region-edit job derived from a validated counterfactual question.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditRequest {
    pub triple_id: String,
    pub semantic_type: SemanticLevel,
    pub question: String,
    pub answer: String,
    pub full_answer: String,
    pub counterfactual_question: String,
    pub region: PixelBox,
    pub inpaint_prompt: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EditStatus {
    Accepted,
    RejectedQc,
    /// Human review is a recorded status transition, not an automated step.
    RejectedHuman,
}

/// Tool provenance for one edit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditProvenance {
    pub segmenter: String,
    pub inpainter: String,
    pub dilation: u32,
    pub prompt: String,
}

/// Outcome of one edit job.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditResult {
    pub triple_id: String,
    pub edited_image: String,
    pub provenance: EditProvenance,
    pub qc_cosine: f64,
    pub status: EditStatus,
}

/// Knobs for [`edit_region`].
#[derive(Debug, Clone, Copy)]
pub struct EditOptions {
    /// Chebyshev dilation radius applied to the mask before the locality
    /// check, absorbing inpainter boundary blending.
    pub dilation: u32,
}

impl Default for EditOptions {
    fn default() -> Self {
        EditOptions { dilation: 2 }
    }
}

fn dilate(mask: &GrayImage, radius: u32) -> GrayImage {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = mask.dimensions();
    let r = radius as i64;
    let mut out = GrayImage::new(w, h);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut hit = false;
            'scan: for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx >= 0
                        && ny >= 0
                        && nx < w as i64
                        && ny < h as i64
                        && mask.get_pixel(nx as u32, ny as u32).0[0] > 0
                    {
                        hit = true;
                        break 'scan;
                    }
                }
            }
            if hit {
                out.put_pixel(x as u32, y as u32, image::Luma([255]));
            }
        }
    }
    out
}

/// Segment the region, inpaint it, and enforce edit locality: every pixel
/// outside the dilated mask must be bitwise-equal to the original. A client
/// that modifies pixels outside the mask breaks its contract and surfaces
/// as an error carrying the client name.
pub fn edit_region(
    image: &GrayImage,
    region: &PixelBox,
    inpaint_prompt: &str,
    segmenter: &dyn SegmenterClient,
    inpainter: &dyn InpainterClient,
    options: EditOptions,
) -> Result<(GrayImage, EditProvenance)> {
    if !region.is_well_formed()
        || region.x1 > f64::from(image.width())
        || region.y1 > f64::from(image.height())
    {
        return Err(VseamError::RegionOutOfBounds);
    }
    let mask = segmenter.segment(image, region)?;
    if mask.pixels().all(|p| p.0[0] == 0) {
        return Err(VseamError::EmptyMask);
    }
    let edited = inpainter.inpaint(image, &mask, inpaint_prompt)?;
    if edited.dimensions() != image.dimensions() {
        return Err(VseamError::Client {
            client: inpainter.name().to_string(),
            message: "edited image dimensions changed".to_string(),
        });
    }

    let allowed = dilate(&mask, options.dilation);
    let mut violations = 0usize;
    for (x, y, p) in edited.enumerate_pixels() {
        if allowed.get_pixel(x, y).0[0] == 0 && p.0[0] != image.get_pixel(x, y).0[0] {
            violations += 1;
        }
    }
    if violations > 0 {
        return Err(VseamError::ClientContract {
            client: inpainter.name().to_string(),
            changed: violations,
        });
    }

    Ok((
        edited,
        EditProvenance {
            segmenter: segmenter.name().to_string(),
            inpainter: inpainter.name().to_string(),
            dilation: options.dilation,
            prompt: inpaint_prompt.to_string(),
        },
    ))
}

/// Cosine similarity between two global feature vectors.
pub fn qc_similarity(clean: &[f64], edited: &[f64]) -> Result<f64> {
    if clean.len() != edited.len() {
        return Err(VseamError::FeatureLengthMismatch(clean.len(), edited.len()));
    }
    let dot: f64 = clean.iter().zip(edited).map(|(a, b)| a * b).sum();
    let na: f64 = clean.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb: f64 = edited.iter().map(|b| b * b).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(VseamError::ZeroNormVector);
    }
    Ok(dot / (na * nb))
}

#[cfg(test)]
mod tests {
    use super::clients::{StubEncoder, StubInpainter, StubSegmenter};
    use super::*;
    use crate::editing::clients::EncoderClient;

    fn test_image() -> GrayImage {
        GrayImage::from_fn(8, 8, |x, y| image::Luma([(x * 8 + y) as u8 * 3 + 1]))
    }

    #[test]
    fn stub_edit_changes_exactly_the_masked_pixels() {
        let img = test_image();
        let region = PixelBox::new(2.0, 2.0, 6.0, 6.0);
        let (edited, prov) = edit_region(
            &img,
            &region,
            "fill",
            &StubSegmenter,
            &StubInpainter::constant(200),
            EditOptions::default(),
        )
        .unwrap();
        let changed = img
            .pixels()
            .zip(edited.pixels())
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(changed, 16);
        assert_eq!(prov.inpainter, "stub-inpainter");
    }

    #[test]
    fn pixels_outside_mask_are_bitwise_identical() {
        let img = test_image();
        let region = PixelBox::new(0.0, 0.0, 3.0, 3.0);
        let (edited, _) = edit_region(
            &img,
            &region,
            "x",
            &StubSegmenter,
            &StubInpainter::constant(9),
            EditOptions::default(),
        )
        .unwrap();
        for (x, y, p) in edited.enumerate_pixels() {
            if x >= 3 || y >= 3 {
                assert_eq!(p.0[0], img.get_pixel(x, y).0[0]);
            }
        }
    }

    #[test]
    fn empty_region_is_an_error() {
        let img = test_image();
        let err = edit_region(
            &img,
            &PixelBox::new(3.0, 3.0, 3.0, 5.0),
            "x",
            &StubSegmenter,
            &StubInpainter::constant(0),
            EditOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, VseamError::RegionOutOfBounds));
    }

    #[test]
    fn locality_violation_names_the_client() {
        struct BadInpainter;
        impl InpainterClient for BadInpainter {
            fn name(&self) -> &str {
                "bad-inpainter"
            }
            fn inpaint(&self, image: &GrayImage, _: &GrayImage, _: &str) -> Result<GrayImage> {
                Ok(GrayImage::from_pixel(
                    image.width(),
                    image.height(),
                    image::Luma([7]),
                ))
            }
        }
        let img = test_image();
        let err = edit_region(
            &img,
            &PixelBox::new(0.0, 0.0, 1.0, 1.0),
            "x",
            &StubSegmenter,
            &BadInpainter,
            EditOptions { dilation: 0 },
        )
        .unwrap_err();
        match err {
            VseamError::ClientContract { client, .. } => assert_eq!(client, "bad-inpainter"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn identical_images_have_unit_similarity() {
        let img = test_image();
        let f = StubEncoder::default().encode(&img).unwrap();
        let sim = qc_similarity(&f, &f).unwrap();
        assert!((sim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_features_have_zero_similarity() {
        let a = vec![1.0, 0.0, 2.0, 0.0];
        let b = vec![0.0, 3.0, 0.0, 1.0];
        assert_eq!(qc_similarity(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn zero_norm_vector_is_rejected() {
        assert!(matches!(
            qc_similarity(&[0.0, 0.0], &[1.0, 1.0]),
            Err(VseamError::ZeroNormVector)
        ));
    }

    /// With the mean-pool encoder, zero-filling a larger area never raises
    /// similarity on an all-positive image.
    #[test]
    fn growing_zero_fill_never_increases_similarity() {
        let img = GrayImage::from_fn(8, 8, |x, y| image::Luma([40 + (x + y) as u8 * 5]));
        let encoder = StubEncoder::default();
        let clean = encoder.encode(&img).unwrap();
        let inpainter = StubInpainter::constant(0);
        let mut prev = 1.0;
        for size in 1..=8 {
            let region = PixelBox::new(0.0, 0.0, f64::from(size), f64::from(size));
            let (edited, _) = edit_region(
                &img,
                &region,
                "x",
                &StubSegmenter,
                &inpainter,
                EditOptions { dilation: 0 },
            )
            .unwrap();
            let sim = qc_similarity(&clean, &encoder.encode(&edited).unwrap()).unwrap();
            assert!(
                sim <= prev + 1e-12,
                "similarity rose from {prev} to {sim} at size {size}"
            );
            prev = sim;
        }
    }
}

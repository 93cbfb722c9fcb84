//! Pixel boxes and the image-token patch grid.

use serde::{Deserialize, Serialize};

/// Axis-aligned pixel rectangle, half-open: `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl PixelBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        PixelBox { x0, y0, x1, y1 }
    }

    /// Coordinate sanity: `0 <= x0 < x1` and `0 <= y0 < y1`.
    pub fn is_well_formed(&self) -> bool {
        self.x0 >= 0.0 && self.y0 >= 0.0 && self.x0 < self.x1 && self.y0 < self.y1
    }

    pub fn intersects(&self, other: &PixelBox) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }
}

/// Geometry of the image-token grid: `rows x cols` patches, each
/// `patch_w x patch_h` pixels. Patch index `p = row * cols + col` maps to
/// image-token position `image_start + p` in the combined sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_w: usize,
    pub patch_h: usize,
}

impl PatchGrid {
    pub fn patch_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image_width(&self) -> usize {
        self.cols * self.patch_w
    }

    pub fn image_height(&self) -> usize {
        self.rows * self.patch_h
    }

    /// Pixel footprint of patch `p`.
    pub fn patch_rect(&self, p: usize) -> PixelBox {
        let row = p / self.cols;
        let col = p % self.cols;
        PixelBox::new(
            (col * self.patch_w) as f64,
            (row * self.patch_h) as f64,
            ((col + 1) * self.patch_w) as f64,
            ((row + 1) * self.patch_h) as f64,
        )
    }

    /// Indices of patches whose pixel footprint intersects `region`, ascending.
    pub fn patches_intersecting(&self, region: &PixelBox) -> Vec<usize> {
        (0..self.patch_count())
            .filter(|&p| self.patch_rect(p).intersects(region))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrant_box_hits_four_patches() {
        let grid = PatchGrid {
            rows: 4,
            cols: 4,
            patch_w: 2,
            patch_h: 2,
        };
        // Top-left quadrant of an 8x8 image.
        let b = PixelBox::new(0.0, 0.0, 4.0, 4.0);
        assert_eq!(grid.patches_intersecting(&b), vec![0, 1, 4, 5]);
    }

    #[test]
    fn one_pixel_box_hits_one_patch() {
        let grid = PatchGrid {
            rows: 4,
            cols: 4,
            patch_w: 2,
            patch_h: 2,
        };
        // One pixel inside patch row 2, col 3 => index 2*4+3 = 11.
        let b = PixelBox::new(7.0, 5.0, 8.0, 6.0);
        assert_eq!(grid.patches_intersecting(&b), vec![11]);
    }

    #[test]
    fn degenerate_box_is_rejected() {
        assert!(!PixelBox::new(3.0, 0.0, 3.0, 2.0).is_well_formed());
        assert!(!PixelBox::new(-1.0, 0.0, 3.0, 2.0).is_well_formed());
        assert!(PixelBox::new(0.0, 0.0, 1.0, 1.0).is_well_formed());
    }
}

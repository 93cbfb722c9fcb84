//! Grayscale PNG helpers shared by the dataset, editing, and fixture code.

use std::path::Path;

use image::GrayImage;

use crate::error::{Result, VseamError};

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path)
        .map_err(|e| VseamError::Image(format!("{}: {e}", path.display())))?;
    Ok(img.into_luma8())
}

pub fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| VseamError::io_at(parent, e))?;
    }
    img.save(path)
        .map_err(|e| VseamError::Image(format!("{}: {e}", path.display())))
}

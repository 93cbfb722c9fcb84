//! Deterministic SVG heatmaps for causal grids and lens grids.
//!
//! Causal grids use a diverging colormap centered at zero (blue for
//! negative, white at zero, red for positive). Lens grids show one row per
//! top-k rank with token text annotated per cell. Rendering is pure string
//! assembly: identical inputs produce byte-identical files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VseamError};
use crate::lens::LensGrid;
use crate::patching::CausalGrid;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeatmapStyle {
    pub cell_width: u32,
    pub cell_height: u32,
    /// Write the numeric value (or token text) inside each cell.
    pub annotate: bool,
    pub title: Option<String>,
}

impl Default for HeatmapStyle {
    fn default() -> Self {
        HeatmapStyle {
            cell_width: 56,
            cell_height: 28,
            annotate: true,
            title: None,
        }
    }
}

/// Grid payloads accepted by [`render_heatmap`].
pub enum HeatmapData<'a> {
    Causal(&'a CausalGrid),
    Lens(&'a LensGrid),
}

/// Diverging blue-white-red map over [-1, 1]; each channel is monotone in
/// the input.
fn diverging_color(v: f64) -> (u8, u8, u8) {
    let v = v.clamp(-1.0, 1.0);
    if v >= 0.0 {
        let t = v;
        let g = (255.0 - t * 200.0).round() as u8;
        let b = (255.0 - t * 215.0).round() as u8;
        (255, g, b)
    } else {
        let t = -v;
        let r = (255.0 - t * 215.0).round() as u8;
        let g = (255.0 - t * 170.0).round() as u8;
        (r, g, 255)
    }
}

struct Cell {
    value: f64,
    label: String,
}

struct Matrix {
    row_labels: Vec<String>,
    col_labels: Vec<String>,
    rows: Vec<Vec<Cell>>,
    /// Symmetric color scale bound (max absolute value).
    scale: f64,
}

fn causal_matrix(grid: &CausalGrid) -> Result<Matrix> {
    if grid.values.is_empty() || grid.groups.is_empty() {
        return Err(VseamError::EmptyGrid);
    }
    // Rows = token groups, columns = layers (heatmap layout with layers on
    // one axis, groups on the other).
    let scale = grid
        .values
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let rows = (0..grid.groups.len())
        .map(|g| {
            (0..grid.layers)
                .map(|l| Cell {
                    value: grid.values[l][g],
                    label: format!("{:.3}", grid.values[l][g]),
                })
                .collect()
        })
        .collect();
    Ok(Matrix {
        row_labels: grid.groups.clone(),
        col_labels: (0..grid.layers).map(|l| format!("L{l}")).collect(),
        rows,
        scale,
    })
}

fn lens_matrix(grid: &LensGrid) -> Result<Matrix> {
    if grid.layers.is_empty() || grid.k == 0 {
        return Err(VseamError::EmptyGrid);
    }
    let scale = grid
        .layers
        .iter()
        .flatten()
        .fold(0.0f64, |m, e| m.max(e.logit.abs()));
    let rows = (0..grid.k)
        .map(|rank| {
            grid.layers
                .iter()
                .map(|layer| {
                    let e = &layer[rank];
                    Cell {
                        value: e.logit,
                        label: e.text.clone(),
                    }
                })
                .collect()
        })
        .collect();
    Ok(Matrix {
        row_labels: (1..=grid.k).map(|r| format!("top{r}")).collect(),
        col_labels: (0..grid.layers.len()).map(|l| format!("L{l}")).collect(),
        rows,
        scale,
    })
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Render a grid to an SVG file. Deterministic given the style.
pub fn render_heatmap(data: HeatmapData<'_>, style: &HeatmapStyle, path: &Path) -> Result<()> {
    let matrix = match data {
        HeatmapData::Causal(g) => causal_matrix(g)?,
        HeatmapData::Lens(g) => lens_matrix(g)?,
    };
    let label_w = 90u32;
    let header_h = if style.title.is_some() { 48u32 } else { 24u32 };
    let width = label_w + style.cell_width * matrix.col_labels.len() as u32 + 8;
    let height = header_h + style.cell_height * matrix.rows.len() as u32 + 8;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"monospace\" font-size=\"10\">\n"
    ));
    if let Some(title) = &style.title {
        svg.push_str(&format!(
            "<text x=\"4\" y=\"14\" font-size=\"12\">{}</text>\n",
            escape(title)
        ));
    }
    for (c, label) in matrix.col_labels.iter().enumerate() {
        let x = label_w + c as u32 * style.cell_width + style.cell_width / 2;
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            header_h - 6,
            escape(label)
        ));
    }
    for (r, (row, row_label)) in matrix.rows.iter().zip(&matrix.row_labels).enumerate() {
        let y = header_h + r as u32 * style.cell_height;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            label_w - 4,
            y + style.cell_height / 2 + 3,
            escape(row_label)
        ));
        for (c, cell) in row.iter().enumerate() {
            let x = label_w + c as u32 * style.cell_width;
            let normalized = if matrix.scale == 0.0 {
                0.0
            } else {
                cell.value / matrix.scale
            };
            let (red, green, blue) = diverging_color(normalized);
            svg.push_str(&format!(
                "<rect x=\"{x}\" y=\"{y}\" width=\"{}\" height=\"{}\" fill=\"rgb({red},{green},{blue})\" stroke=\"#ccc\"/>\n",
                style.cell_width, style.cell_height
            ));
            if style.annotate {
                svg.push_str(&format!(
                    "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
                    x + style.cell_width / 2,
                    y + style.cell_height / 2 + 3,
                    escape(&cell.label)
                ));
            }
        }
    }
    svg.push_str("</svg>\n");

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| VseamError::io_at(parent, e))?;
    }
    std::fs::write(path, svg).map_err(|e| VseamError::io_at(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModuleKind;

    fn grid(values: Vec<Vec<f64>>, groups: Vec<&str>) -> CausalGrid {
        CausalGrid {
            tau: ModuleKind::Attention,
            layers: values.len(),
            groups: groups.into_iter().map(str::to_string).collect(),
            values,
            n: 1,
        }
    }

    fn extract_fills(svg: &str) -> Vec<(u8, u8, u8)> {
        svg.match_indices("fill=\"rgb(")
            .map(|(i, _)| {
                let rest = &svg[i + 10..];
                let end = rest.find(')').unwrap();
                let parts: Vec<u8> = rest[..end]
                    .split(',')
                    .map(|p| p.trim().parse().unwrap())
                    .collect();
                (parts[0], parts[1], parts[2])
            })
            .collect()
    }

    #[test]
    fn single_cell_grid_is_annotated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.svg");
        let g = grid(vec![vec![0.5]], vec!["image"]);
        render_heatmap(HeatmapData::Causal(&g), &HeatmapStyle::default(), &path).unwrap();
        let svg = std::fs::read_to_string(&path).unwrap();
        assert!(svg.contains("0.500"));
        assert_eq!(extract_fills(&svg).len(), 1);
    }

    #[test]
    fn all_zero_grid_is_uniform_midpoint_color() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zero.svg");
        let g = grid(vec![vec![0.0, 0.0], vec![0.0, 0.0]], vec!["a", "b"]);
        render_heatmap(HeatmapData::Causal(&g), &HeatmapStyle::default(), &path).unwrap();
        let fills = extract_fills(&std::fs::read_to_string(&path).unwrap());
        assert!(fills.iter().all(|&c| c == (255, 255, 255)));
    }

    #[test]
    fn cell_colors_are_monotone_in_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mono.svg");
        // 4 layers x 3 groups with strictly increasing values.
        let values: Vec<Vec<f64>> = (0..4)
            .map(|l| (0..3).map(|g| (l * 3 + g) as f64 - 5.0).collect())
            .collect();
        let g = grid(values.clone(), vec!["g0", "g1", "g2"]);
        render_heatmap(HeatmapData::Causal(&g), &HeatmapStyle::default(), &path).unwrap();
        let fills = extract_fills(&std::fs::read_to_string(&path).unwrap());
        // Fills appear row-major over (group, layer); re-pair with values.
        let mut pairs: Vec<(f64, (u8, u8, u8))> = Vec::new();
        for (r, fill_row) in fills.chunks(4).enumerate() {
            for (c, &fill) in fill_row.iter().enumerate() {
                pairs.push((values[c][r], fill));
            }
        }
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        // Blue channel falls (weakly) as the value rises; red rises.
        for w in pairs.windows(2) {
            assert!(w[1].1 .0 >= w[0].1 .0, "red not monotone");
            assert!(w[1].1 .2 <= w[0].1 .2, "blue not monotone");
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let g = grid(vec![vec![0.1, -0.4], vec![0.9, 0.0]], vec!["a", "b"]);
        let p1 = dir.path().join("a.svg");
        let p2 = dir.path().join("b.svg");
        render_heatmap(HeatmapData::Causal(&g), &HeatmapStyle::default(), &p1).unwrap();
        render_heatmap(HeatmapData::Causal(&g), &HeatmapStyle::default(), &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn empty_grid_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let g = grid(vec![], vec![]);
        assert!(matches!(
            render_heatmap(
                HeatmapData::Causal(&g),
                &HeatmapStyle::default(),
                &dir.path().join("x.svg")
            ),
            Err(VseamError::EmptyGrid)
        ));
    }
}

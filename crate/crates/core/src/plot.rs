//! Raster plot emission for evaluation reports. Everything is drawn onto
//! plain pixel buffers with integer primitives, so the output bytes are a
//! pure function of the report: no fonts, no system toolkits, no timestamps.
//! Sections absent from the report are skipped with a log line.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{Result, SedaError};
use crate::evalkit::EvaluationReport;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GRID: Rgb<u8> = Rgb([210, 210, 210]);
const TEXTUAL_LINE: Rgb<u8> = Rgb([36, 80, 190]);
const VISUAL_LINE: Rgb<u8> = Rgb([220, 120, 30]);
const REFERENCE_LINE: Rgb<u8> = Rgb([150, 150, 150]);

/// Writes one PNG per populated report section into `out_dir` and returns
/// the paths actually written: `confusion.png`, `trajectory.png`,
/// `projection.png`.
pub fn render_report(report: &EvaluationReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    if let Some(confusion) = &report.confusion {
        let path = out_dir.join("confusion.png");
        save(render_confusion(confusion), &path)?;
        written.push(path);
    } else {
        log::info!("report carries no confusion matrix, skipping confusion.png");
    }

    if let Some(trajectory) = &report.trajectory {
        let path = out_dir.join("trajectory.png");
        save(
            render_trajectory(
                &trajectory.mean_dist_to_textual,
                &trajectory.mean_dist_to_visual,
                trajectory.raw_visual_dist_to_textual,
            ),
            &path,
        )?;
        written.push(path);
    } else {
        log::info!("report carries no trajectory, skipping trajectory.png");
    }

    if let Some(projection) = &report.projection {
        let path = out_dir.join("projection.png");
        save(
            render_projection(
                &projection.visual,
                &projection.aligned,
                &projection.textual_centroids,
                &projection.point_classes,
            ),
            &path,
        )?;
        written.push(path);
    } else {
        log::info!("report carries no projection, skipping projection.png");
    }

    Ok(written)
}

fn save(img: RgbImage, path: &Path) -> Result<()> {
    img.save(path)
        .map_err(|e| SedaError::format(format!("could not write {}: {e}", path.display())))
}

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new(width: u32, height: u32) -> Self {
        Canvas {
            img: RgbImage::from_pixel(width, height, WHITE),
        }
    }

    fn set(&mut self, x: i64, y: i64, color: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, color);
        }
    }

    fn line(&mut self, mut x0: i64, mut y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.set(x0, y0, color);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let doubled = 2 * err;
            if doubled >= dy {
                err += dy;
                x0 += sx;
            }
            if doubled <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    fn rect_filled(&mut self, x: i64, y: i64, w: i64, h: i64, color: Rgb<u8>) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.set(xx, yy, color);
            }
        }
    }

    fn rect_outline(&mut self, x: i64, y: i64, w: i64, h: i64, color: Rgb<u8>) {
        self.line(x, y, x + w - 1, y, color);
        self.line(x, y + h - 1, x + w - 1, y + h - 1, color);
        self.line(x, y, x, y + h - 1, color);
        self.line(x + w - 1, y, x + w - 1, y + h - 1, color);
    }

    fn disc(&mut self, cx: i64, cy: i64, r: i64, color: Rgb<u8>) {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    self.set(cx + dx, cy + dy, color);
                }
            }
        }
    }

    fn ring(&mut self, cx: i64, cy: i64, r: i64, color: Rgb<u8>) {
        for dy in -r..=r {
            for dx in -r..=r {
                let d2 = dx * dx + dy * dy;
                if d2 <= r * r && d2 > (r - 1) * (r - 1) {
                    self.set(cx + dx, cy + dy, color);
                }
            }
        }
    }
}

/// Stable per-class color via golden-ratio hue rotation; adjacent class ids
/// land far apart on the wheel.
fn class_color(class: usize) -> Rgb<u8> {
    let hue = (class as f64 * 0.618_033_988_749_895).fract();
    hsv_to_rgb(hue, 0.68, 0.82)
}

fn lighten(color: Rgb<u8>, amount: f64) -> Rgb<u8> {
    let mix = |c: u8| -> u8 { (c as f64 + (255.0 - c as f64) * amount).round() as u8 };
    Rgb([mix(color[0]), mix(color[1]), mix(color[2])])
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> Rgb<u8> {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    let (r, g, b) = match (i as i64).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    Rgb([
        (r * 255.0).round() as u8,
        (g * 255.0).round() as u8,
        (b * 255.0).round() as u8,
    ])
}

/// Heatmap of the count matrix, white for zero up to full blue at the
/// global maximum, with a light grid between cells.
fn render_confusion(matrix: &[Vec<u64>]) -> RgbImage {
    let classes = matrix.len() as i64;
    let cell: i64 = (512 / classes.max(1)).clamp(6, 40);
    let margin: i64 = 4;
    let side = (classes * cell + 2 * margin) as u32;
    let mut canvas = Canvas::new(side.max(1), side.max(1));
    let max = matrix
        .iter()
        .flat_map(|row| row.iter())
        .copied()
        .max()
        .unwrap_or(0);
    for (i, row) in matrix.iter().enumerate() {
        for (j, &count) in row.iter().enumerate() {
            let t = if max == 0 { 0.0 } else { count as f64 / max as f64 };
            let shade = Rgb([
                (255.0 - t * (255.0 - 32.0)) as u8,
                (255.0 - t * (255.0 - 64.0)) as u8,
                (255.0 - t * (255.0 - 160.0)) as u8,
            ]);
            canvas.rect_filled(
                margin + j as i64 * cell,
                margin + i as i64 * cell,
                cell,
                cell,
                shade,
            );
        }
    }
    for k in 0..=classes {
        let offset = margin + k * cell;
        canvas.line(offset, margin, offset, margin + classes * cell, GRID);
        canvas.line(margin, offset, margin + classes * cell, offset, GRID);
    }
    canvas.rect_outline(
        margin,
        margin,
        classes * cell + 1,
        classes * cell + 1,
        BLACK,
    );
    canvas.img
}

/// Distance-to-centroid curves over the chain trajectory, plus a horizontal
/// reference at the raw-visual distance. Position 0 is the chain start.
fn render_trajectory(to_textual: &[f64], to_visual: &[f64], raw_reference: f64) -> RgbImage {
    let width: i64 = 640;
    let height: i64 = 420;
    let margin: i64 = 40;
    let mut canvas = Canvas::new(width as u32, height as u32);
    let points = to_textual.len().max(to_visual.len());
    let y_max = to_textual
        .iter()
        .chain(to_visual.iter())
        .chain(std::iter::once(&raw_reference))
        .fold(0.0f64, |a, &b| a.max(b))
        .max(1e-12)
        * 1.05;
    let x_of = |i: usize| -> i64 {
        if points <= 1 {
            width / 2
        } else {
            margin + (i as i64) * (width - 2 * margin) / (points as i64 - 1)
        }
    };
    let y_of = |v: f64| -> i64 { height - margin - ((v / y_max) * (height - 2 * margin) as f64) as i64 };

    // frame and tick marks; five even divisions on the y axis
    canvas.rect_outline(margin, margin, width - 2 * margin, height - 2 * margin, BLACK);
    for k in 0..=5 {
        let y = y_of(y_max * k as f64 / 5.0);
        canvas.line(margin - 4, y, margin, y, BLACK);
    }
    let tick_every = points.div_ceil(20).max(1);
    for i in (0..points).step_by(tick_every) {
        let x = x_of(i);
        canvas.line(x, height - margin, x, height - margin + 4, BLACK);
    }

    let reference_y = y_of(raw_reference);
    let mut x = margin;
    while x < width - margin {
        canvas.line(x, reference_y, (x + 5).min(width - margin), reference_y, REFERENCE_LINE);
        x += 10;
    }

    let mut polyline = |values: &[f64], color: Rgb<u8>| {
        for window in 0..values.len().saturating_sub(1) {
            canvas.line(
                x_of(window),
                y_of(values[window]),
                x_of(window + 1),
                y_of(values[window + 1]),
                color,
            );
        }
        for (i, &v) in values.iter().enumerate() {
            canvas.disc(x_of(i), y_of(v), 2, color);
        }
    };
    polyline(to_textual, TEXTUAL_LINE);
    polyline(to_visual, VISUAL_LINE);
    canvas.img
}

/// Scatter of the projected clouds: hollow rings for raw visual features,
/// filled dots for aligned features, large rimmed discs for the textual
/// class centroids. Colors follow the class palette.
fn render_projection(
    visual: &[[f64; 2]],
    aligned: &[[f64; 2]],
    centroids: &[[f64; 2]],
    point_classes: &[u32],
) -> RgbImage {
    let side: i64 = 640;
    let margin: i64 = 30;
    let mut canvas = Canvas::new(side as u32, side as u32);

    let all = visual.iter().chain(aligned.iter()).chain(centroids.iter());
    let mut min = [f64::INFINITY; 2];
    let mut max = [f64::NEG_INFINITY; 2];
    for p in all {
        for axis in 0..2 {
            min[axis] = min[axis].min(p[axis]);
            max[axis] = max[axis].max(p[axis]);
        }
    }
    for axis in 0..2 {
        if !(max[axis] > min[axis]) {
            min[axis] -= 1.0;
            max[axis] += 1.0;
        }
        let pad = (max[axis] - min[axis]) * 0.05;
        min[axis] -= pad;
        max[axis] += pad;
    }
    let place = |p: &[f64; 2]| -> (i64, i64) {
        let x = margin
            + (((p[0] - min[0]) / (max[0] - min[0])) * (side - 2 * margin) as f64) as i64;
        // image rows grow downward, flip the second axis
        let y = side
            - margin
            - (((p[1] - min[1]) / (max[1] - min[1])) * (side - 2 * margin) as f64) as i64;
        (x, y)
    };

    canvas.rect_outline(margin, margin, side - 2 * margin, side - 2 * margin, BLACK);
    for (p, &class) in visual.iter().zip(point_classes.iter()) {
        let (x, y) = place(p);
        canvas.ring(x, y, 3, lighten(class_color(class as usize), 0.35));
    }
    for (p, &class) in aligned.iter().zip(point_classes.iter()) {
        let (x, y) = place(p);
        canvas.disc(x, y, 2, class_color(class as usize));
    }
    for (class, p) in centroids.iter().enumerate() {
        let (x, y) = place(p);
        canvas.disc(x, y, 6, BLACK);
        canvas.disc(x, y, 4, class_color(class));
    }
    canvas.img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabelMode;
    use crate::evalkit::{EvalMode, ProjectionScatter, TrajectoryDiagnostic};
    use std::collections::BTreeMap;

    fn sample_report() -> EvaluationReport {
        EvaluationReport {
            fingerprint: "ab".repeat(32),
            seed: 7,
            mode: EvalMode::Chain,
            label_mode: LabelMode::Single,
            num_classes: 3,
            test_rows: 4,
            noise_scale: 1.0,
            stride: 1,
            metrics: BTreeMap::from([("acc@1".to_string(), 0.75)]),
            confusion: Some(vec![vec![2, 0, 0], vec![1, 1, 0], vec![0, 0, 0]]),
            trajectory: Some(TrajectoryDiagnostic {
                visited_steps: vec![3, 2, 1],
                mean_dist_to_textual: vec![4.0, 2.5, 1.5, 1.0],
                mean_dist_to_visual: vec![1.0, 1.4, 1.9, 2.2],
                raw_visual_dist_to_textual: 3.0,
            }),
            projection: Some(ProjectionScatter {
                aligned: vec![[0.1, 0.2], [1.0, -0.5], [-1.2, 0.4], [0.3, 0.9]],
                visual: vec![[0.5, 0.5], [1.5, -0.1], [-0.8, 0.0], [0.0, 1.2]],
                textual_centroids: vec![[0.0, 0.0], [1.0, 0.0], [-1.0, 0.5]],
                point_classes: vec![0, 1, 2, 0],
            }),
            wall_time_seconds: 0.0,
        }
    }

    #[test]
    fn writes_one_png_per_populated_section() {
        let dir = tempfile::tempdir().unwrap();
        let written = render_report(&sample_report(), dir.path()).unwrap();
        assert_eq!(written.len(), 3);
        for path in &written {
            let img = image::open(path).unwrap();
            assert!(img.width() > 0 && img.height() > 0);
        }
        assert!(dir.path().join("confusion.png").exists());
        assert!(dir.path().join("trajectory.png").exists());
        assert!(dir.path().join("projection.png").exists());
    }

    #[test]
    fn skips_sections_the_report_does_not_carry() {
        let mut report = sample_report();
        report.confusion = None;
        report.trajectory = None;
        let dir = tempfile::tempdir().unwrap();
        let written = render_report(&report, dir.path()).unwrap();
        assert_eq!(written.len(), 1);
        assert!(!dir.path().join("confusion.png").exists());
        assert!(!dir.path().join("trajectory.png").exists());
        assert!(dir.path().join("projection.png").exists());
    }

    #[test]
    fn rendering_is_byte_deterministic() {
        let report = sample_report();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        render_report(&report, dir_a.path()).unwrap();
        render_report(&report, dir_b.path()).unwrap();
        for name in ["confusion.png", "trajectory.png", "projection.png"] {
            let a = std::fs::read(dir_a.path().join(name)).unwrap();
            let b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical renders");
        }
    }

    #[test]
    fn confusion_cells_scale_with_class_count() {
        let small = render_confusion(&[vec![1, 0], vec![0, 1]]);
        let large = render_confusion(&vec![vec![0u64; 40]; 40]);
        assert!(small.width() < large.width());
        // cells clamp at 6 px, so even 100 classes stay drawable
        let huge = render_confusion(&vec![vec![0u64; 100]; 100]);
        assert_eq!(huge.width(), (100 * 6 + 8) as u32);
    }

    #[test]
    fn degenerate_projection_bounds_do_not_panic() {
        // every point identical: the bounds guard must expand the box
        let img = render_projection(
            &[[1.0, 1.0], [1.0, 1.0]],
            &[[1.0, 1.0], [1.0, 1.0]],
            &[[1.0, 1.0]],
            &[0, 0],
        );
        assert_eq!(img.width(), 640);
    }

    #[test]
    fn distinct_classes_get_distinct_colors() {
        let colors: Vec<Rgb<u8>> = (0..20).map(class_color).collect();
        for i in 0..colors.len() {
            for j in i + 1..colors.len() {
                assert_ne!(colors[i], colors[j], "classes {i} and {j} collide");
            }
        }
    }
}

//! Chart rendering with no plotting dependencies: accuracy curves become
//! PNG line charts, generator samples become image grids. Output is a pure
//! function of the inputs, so repeated renders are byte-identical.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::ArrayD;

use crate::error::{DfdgError, Result};

const WIDTH: u32 = 800;
const HEIGHT: u32 = 600;
const MARGIN_LEFT: u32 = 78;
const MARGIN_RIGHT: u32 = 24;
const MARGIN_TOP: u32 = 42;
const MARGIN_BOTTOM: u32 = 58;

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
];

/// One labeled curve.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

// ---------------------------------------------------------------------------
// a 5x7 bitmap font (uppercase, digits, and the punctuation the charts use)

const GLYPH_W: u32 = 5;
const GLYPH_H: u32 = 7;

fn glyph(c: char) -> [u8; 7] {
    match c {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '/' => [0x01, 0x02, 0x02, 0x04, 0x08, 0x08, 0x10],
        '%' => [0x19, 0x1A, 0x02, 0x04, 0x08, 0x0B, 0x13],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '=' => [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00],
        _ => [0x00; 7], // unknown characters render as spaces
    }
}

fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str, color: Rgb<u8>) {
    let mut cx = x;
    for c in text.to_ascii_uppercase().chars() {
        let rows = glyph(c);
        for (ry, bits) in rows.iter().enumerate() {
            for rx in 0..GLYPH_W {
                if bits & (1 << (GLYPH_W - 1 - rx)) != 0 {
                    let px = cx + rx;
                    let py = y + ry as u32;
                    if px < img.width() && py < img.height() {
                        img.put_pixel(px, py, color);
                    }
                }
            }
        }
        cx += GLYPH_W + 1;
    }
}

fn text_width(text: &str) -> u32 {
    text.chars().count() as u32 * (GLYPH_W + 1)
}

fn draw_line(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let (mut x, mut y) = (x0, y0);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 100.0 || (v.fract() == 0.0 && v.abs() >= 1.0) || v == 0.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    }
}

/// Render labeled curves to a PNG line chart with axes, grid lines, tick
/// labels, and a legend.
pub fn render_line_plot(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<()> {
    if series.iter().all(|s| s.points.is_empty()) {
        return Err(DfdgError::Config("nothing to plot: all series are empty".into()));
    }
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BACKGROUND);
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for &(x, y) in &s.points {
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
    }
    if x_max == x_min {
        x_max = x_min + 1.0;
    }
    if y_max == y_min {
        y_max = y_min + 1.0;
    }
    let y_pad = 0.05 * (y_max - y_min);
    y_min -= y_pad;
    y_max += y_pad;

    let plot_w = (WIDTH - MARGIN_LEFT - MARGIN_RIGHT) as f64;
    let plot_h = (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM) as f64;
    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let px = MARGIN_LEFT as f64 + (x - x_min) / (x_max - x_min) * plot_w;
        let py = (HEIGHT - MARGIN_BOTTOM) as f64 - (y - y_min) / (y_max - y_min) * plot_h;
        (px.round() as i64, py.round() as i64)
    };

    // grid and ticks
    const TICKS: u32 = 5;
    for t in 0..=TICKS {
        let fx = x_min + (x_max - x_min) * t as f64 / TICKS as f64;
        let fy = y_min + (y_max - y_min) * t as f64 / TICKS as f64;
        let (px, _) = to_px(fx, y_min);
        let (_, py) = to_px(x_min, fy);
        draw_line(&mut img, px, MARGIN_TOP as i64, px, (HEIGHT - MARGIN_BOTTOM) as i64, GRID);
        draw_line(
            &mut img,
            MARGIN_LEFT as i64,
            py,
            (WIDTH - MARGIN_RIGHT) as i64,
            py,
            GRID,
        );
        let xl = fmt_tick(fx);
        draw_text(
            &mut img,
            (px - text_width(&xl) as i64 / 2).max(0) as u32,
            HEIGHT - MARGIN_BOTTOM + 8,
            &xl,
            AXIS,
        );
        let yl = fmt_tick(fy);
        draw_text(
            &mut img,
            MARGIN_LEFT.saturating_sub(text_width(&yl) + 8),
            (py - GLYPH_H as i64 / 2).max(0) as u32,
            &yl,
            AXIS,
        );
    }

    // axes on top of the grid
    draw_line(
        &mut img,
        MARGIN_LEFT as i64,
        MARGIN_TOP as i64,
        MARGIN_LEFT as i64,
        (HEIGHT - MARGIN_BOTTOM) as i64,
        AXIS,
    );
    draw_line(
        &mut img,
        MARGIN_LEFT as i64,
        (HEIGHT - MARGIN_BOTTOM) as i64,
        (WIDTH - MARGIN_RIGHT) as i64,
        (HEIGHT - MARGIN_BOTTOM) as i64,
        AXIS,
    );

    // curves
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let px: Vec<(i64, i64)> = s.points.iter().map(|&(x, y)| to_px(x, y)).collect();
        for w in px.windows(2) {
            // 2px strokes: the line plus a one-pixel vertical offset
            draw_line(&mut img, w[0].0, w[0].1, w[1].0, w[1].1, color);
            draw_line(&mut img, w[0].0, w[0].1 + 1, w[1].0, w[1].1 + 1, color);
        }
        for &(x, y) in &px {
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let (mx, my) = (x + dx, y + dy);
                    if mx >= 0 && my >= 0 && (mx as u32) < WIDTH && (my as u32) < HEIGHT {
                        img.put_pixel(mx as u32, my as u32, color);
                    }
                }
            }
        }
    }

    // labels and legend
    draw_text(&mut img, (WIDTH - text_width(title)) / 2, 14, title, AXIS);
    draw_text(&mut img, (WIDTH - text_width(x_label)) / 2, HEIGHT - 22, x_label, AXIS);
    draw_text(&mut img, 8, MARGIN_TOP.saturating_sub(16), y_label, AXIS);
    let legend_w = series.iter().map(|s| text_width(&s.label)).max().unwrap_or(0) + 26;
    let lx = WIDTH - MARGIN_RIGHT - legend_w;
    let mut ly = MARGIN_TOP + 8;
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for dy in 0..GLYPH_H {
            for dx in 0..10 {
                img.put_pixel(lx + dx, ly + dy, color);
            }
        }
        draw_text(&mut img, lx + 14, ly, &s.label, AXIS);
        ly += GLYPH_H + 5;
    }

    img.save(path)?;
    Ok(())
}

/// Render a `[N, C, H, W]` batch of images in `[-1, 1]` as a padded grid
/// with `cols` columns (grayscale for C = 1, RGB for C = 3).
pub fn render_image_grid(images: &ArrayD<f64>, cols: usize, path: &Path) -> Result<()> {
    let shape = images.shape();
    if shape.len() != 4 {
        return Err(DfdgError::Config(format!("image grid expects [N, C, H, W], got {shape:?}")));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if n == 0 || cols == 0 {
        return Err(DfdgError::Config("image grid needs at least one image and column".into()));
    }
    if c != 1 && c != 3 {
        return Err(DfdgError::Config(format!("image grid supports 1 or 3 channels, got {c}")));
    }
    let rows = n.div_ceil(cols);
    const PAD: usize = 2;
    let out_w = (cols * (w + PAD) + PAD) as u32;
    let out_h = (rows * (h + PAD) + PAD) as u32;
    let mut img = RgbImage::from_pixel(out_w, out_h, Rgb([235, 235, 235]));
    let to_u8 = |v: f64| -> u8 { (((v + 1.0) / 2.0) * 255.0).clamp(0.0, 255.0).round() as u8 };
    for i in 0..n {
        let (row, col) = (i / cols, i % cols);
        let (ox, oy) = (PAD + col * (w + PAD), PAD + row * (h + PAD));
        for y in 0..h {
            for x in 0..w {
                let pixel = if c == 1 {
                    let v = to_u8(images[[i, 0, y, x]]);
                    Rgb([v, v, v])
                } else {
                    Rgb([
                        to_u8(images[[i, 0, y, x]]),
                        to_u8(images[[i, 1, y, x]]),
                        to_u8(images[[i, 2, y, x]]),
                    ])
                };
                img.put_pixel((ox + x) as u32, (oy + y) as u32, pixel);
            }
        }
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn png_magic(path: &Path) -> bool {
        let bytes = std::fs::read(path).unwrap();
        bytes.len() > 8 && bytes[..8] == [0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A]
    }

    #[test]
    fn line_plot_renders_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let series = vec![
            Series {
                label: "dfdg".into(),
                points: vec![(0.0, 0.1), (5.0, 0.55), (10.0, 0.71)],
            },
            Series {
                label: "fedavg_only".into(),
                points: vec![(0.0, 0.1), (5.0, 0.12), (10.0, 0.13)],
            },
        ];
        let p1 = dir.path().join("a.png");
        let p2 = dir.path().join("b.png");
        render_line_plot(&p1, "test accuracy", "outer iteration", "accuracy", &series).unwrap();
        render_line_plot(&p2, "test accuracy", "outer iteration", "accuracy", &series).unwrap();
        assert!(png_magic(&p1));
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        // empty input is an error, not an empty file
        assert!(render_line_plot(
            &dir.path().join("c.png"),
            "t",
            "x",
            "y",
            &[Series { label: "e".into(), points: vec![] }]
        )
        .is_err());
    }

    #[test]
    fn image_grid_maps_the_value_range() {
        let dir = tempfile::tempdir().unwrap();
        // two 1-channel 4x4 images: all -1 (black) and all +1 (white)
        let mut data = ArrayD::from_elem(IxDyn(&[2, 1, 4, 4]), -1.0);
        data.slice_mut(ndarray::s![1, .., .., ..]).fill(1.0);
        let p = dir.path().join("grid.png");
        render_image_grid(&data, 2, &p).unwrap();
        assert!(png_magic(&p));
        let loaded = image::open(&p).unwrap().to_rgb8();
        // first cell starts at (2, 2): black; second cell at (2 + 4 + 2, 2): white
        assert_eq!(loaded.get_pixel(2, 2), &Rgb([0, 0, 0]));
        assert_eq!(loaded.get_pixel(8, 2), &Rgb([255, 255, 255]));
        // wrong rank is rejected
        let flat = ArrayD::zeros(IxDyn(&[4, 4]));
        assert!(render_image_grid(&flat, 2, &dir.path().join("bad.png")).is_err());
    }
}

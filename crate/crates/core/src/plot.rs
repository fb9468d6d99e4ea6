//! Anomaly score curves rendered to PNG: the fused score as a line over
//! frames, with anomalous spans shaded red.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;
use crate::scoring::ScoreSeries;

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const SPAN: Rgb<u8> = Rgb([250, 200, 200]);
const AXIS: Rgb<u8> = Rgb([120, 120, 120]);
const CURVE: Rgb<u8> = Rgb([20, 60, 200]);
const MARGIN: u32 = 8;

/// Draws `s_f` against frame index. Scores are assumed to lie in `[0, 1]`.
pub fn render_score_curve(series: &ScoreSeries, width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, BACKGROUND);
    let n = series.len();
    if n == 0 || width <= 2 * MARGIN || height <= 2 * MARGIN {
        return img;
    }
    let (x0, x1) = (MARGIN as f64, (width - MARGIN - 1) as f64);
    let (y0, y1) = (MARGIN as f64, (height - MARGIN - 1) as f64);
    let fx = |t: f64| {
        if n == 1 {
            (x0 + x1) / 2.0
        } else {
            x0 + (x1 - x0) * t / (n - 1) as f64
        }
    };
    let fy = |s: f64| y1 - (y1 - y0) * s.clamp(0.0, 1.0);

    // each frame owns the half-open column range around its x position
    for (t, &label) in series.labels.iter().enumerate() {
        if label == 0 {
            continue;
        }
        let left = fx(t as f64 - 0.5).max(x0).round() as u32;
        let right = fx(t as f64 + 0.5).min(x1).round() as u32;
        for x in left..=right {
            for y in MARGIN..height - MARGIN {
                img.put_pixel(x, y, SPAN);
            }
        }
    }
    for x in MARGIN..width - MARGIN {
        img.put_pixel(x, y1 as u32, AXIS);
    }
    for y in MARGIN..height - MARGIN {
        img.put_pixel(x0 as u32, y, AXIS);
    }
    let pts: Vec<(f64, f64)> = series
        .s_f
        .iter()
        .enumerate()
        .map(|(t, &s)| (fx(t as f64), fy(s)))
        .collect();
    for w in pts.windows(2) {
        draw_line(&mut img, w[0], w[1]);
    }
    if let [p] = pts[..] {
        img.put_pixel(p.0 as u32, p.1 as u32, CURVE);
    }
    img
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64)) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for k in 0..=steps {
        let f = k as f64 / steps as f64;
        let x = (a.0 + (b.0 - a.0) * f).round() as u32;
        let y = (a.1 + (b.1 - a.1) * f).round() as u32;
        if x < img.width() && y < img.height() {
            img.put_pixel(x, y, CURVE);
        }
    }
}

pub fn save_score_curve(series: &ScoreSeries, path: impl AsRef<Path>) -> Result<()> {
    render_score_curve(series, 480, 160).save(path.as_ref())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Category;

    #[test]
    fn anomalous_frames_are_shaded() {
        let s = ScoreSeries {
            clip_id: "c".into(),
            category: Category::Normal,
            s_e: vec![0.0; 10],
            s_l: vec![0.0; 10],
            s_f: (0..10).map(|t| t as f64 / 9.0).collect(),
            labels: vec![0, 0, 0, 0, 0, 1, 1, 1, 0, 0],
        };
        let img = render_score_curve(&s, 200, 60);
        // column of frame 6 carries span colour away from the curve
        let x = (8.0 + (191.0 - 8.0) * 6.0 / 9.0) as u32;
        assert_eq!(*img.get_pixel(x, 12), SPAN);
        let x = (8.0 + (191.0 - 8.0) * 2.0 / 9.0) as u32;
        assert_eq!(*img.get_pixel(x, 12), BACKGROUND);
    }
}

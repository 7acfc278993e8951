//! SVG scanpath overlays: the scene raster as background, the target box,
//! and numbered fixation circles joined by arrows in temporal order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;

use crate::domain::{ImageRaster, Scanpath, TargetBox};
use crate::error::{Error, Result};

const RADIUS: f64 = 9.0;

/// Hue family per scanpath; packs step through the family so neighbouring
/// packs are distinguishable.
struct Style {
    class: &'static str,
    hue_start: f64,
    hue_span: f64,
    dash: &'static str,
}

const GT_STYLE: Style = Style {
    class: "gt",
    hue_start: 90.0,
    hue_span: 90.0,
    dash: "",
};

const PRED_STYLE: Style = Style {
    class: "pred",
    hue_start: 330.0,
    hue_span: 60.0,
    dash: " stroke-dasharray=\"4 3\"",
};

fn png_data_uri(image: &ImageRaster) -> Result<String> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, image.width() as u32, image.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Io(std::io::Error::other(e)))?;
        w.write_image_data(image.bytes())
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    Ok(format!("data:image/png;base64,{}", STANDARD.encode(buf)))
}

fn hue(style: &Style, pack: usize, n_packs: usize) -> f64 {
    let step = if n_packs > 1 { style.hue_span / (n_packs - 1) as f64 } else { 0.0 };
    (style.hue_start + step * pack as f64) % 360.0
}

fn draw_scanpath(out: &mut String, path: &Scanpath, style: &Style, w: f64, h: f64) {
    let n_packs = path.packs.len();
    let points: Vec<(f64, f64, usize)> = path
        .packs
        .iter()
        .enumerate()
        .flat_map(|(j, p)| p.fixations.iter().map(move |f| (f.x * w, f.y * h, j)))
        .collect();
    let _ = writeln!(out, "  <g class=\"{}\">", style.class);
    for pair in points.windows(2) {
        let ((x0, y0, _), (x1, y1, j)) = (pair[0], pair[1]);
        let _ = writeln!(
            out,
            "    <line class=\"{}-step\" x1=\"{x0:.1}\" y1=\"{y0:.1}\" x2=\"{x1:.1}\" y2=\"{y1:.1}\" stroke=\"hsl({:.0},80%,55%)\" stroke-width=\"2\"{} marker-end=\"url(#arrow-{})\"/>",
            style.class,
            hue(style, j, n_packs),
            style.dash,
            style.class
        );
    }
    for (k, (x, y, j)) in points.iter().enumerate() {
        let _ = writeln!(
            out,
            "    <circle class=\"{}-fix\" data-pack=\"{j}\" cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"{RADIUS}\" fill=\"hsl({:.0},80%,55%)\" fill-opacity=\"0.8\" stroke=\"white\"/>",
            style.class,
            hue(style, *j, n_packs)
        );
        let _ = writeln!(
            out,
            "    <text class=\"{}-label\" x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\" fill=\"black\">{}</text>",
            style.class,
            y + 3.5,
            k + 1
        );
    }
    let _ = writeln!(out, "  </g>");
}

fn marker(out: &mut String, class: &str, color: &str) {
    let _ = writeln!(
        out,
        "    <marker id=\"arrow-{class}\" viewBox=\"0 0 10 10\" refX=\"{}\" refY=\"5\" markerWidth=\"6\" markerHeight=\"6\" orient=\"auto\"><path d=\"M0,0 L10,5 L0,10 z\" fill=\"{color}\"/></marker>",
        10.0 + RADIUS / 2.0
    );
}

/// Deterministic SVG text. `pred` may be absent or empty.
pub fn render_svg(image: &ImageRaster, target: Option<&TargetBox>, gt: &Scanpath, pred: Option<&Scanpath>) -> Result<String> {
    let (w, h) = (image.width() as f64, image.height() as f64);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">"
    );
    out.push_str("  <defs>\n");
    marker(&mut out, "gt", "#7fdc5a");
    marker(&mut out, "pred", "#f0508c");
    out.push_str("  </defs>\n");
    let _ = writeln!(
        out,
        "  <image x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" href=\"{}\"/>",
        png_data_uri(image)?
    );
    if let Some(b) = target {
        let _ = writeln!(
            out,
            "  <rect class=\"target-box\" x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"white\" stroke-width=\"2\" stroke-dasharray=\"6 4\"/>",
            b.x0 * w,
            b.y0 * h,
            (b.x1 - b.x0) * w,
            (b.y1 - b.y0) * h
        );
    }
    draw_scanpath(&mut out, gt, &GT_STYLE, w, h);
    if let Some(p) = pred {
        draw_scanpath(&mut out, p, &PRED_STYLE, w, h);
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn write_svg(path: &Path, image: &ImageRaster, target: Option<&TargetBox>, gt: &Scanpath, pred: Option<&Scanpath>) -> Result<()> {
    fs::write(path, render_svg(image, target, gt, pred)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticConfig};
    use crate::domain::{Fixation, FixationPack};

    fn trial() -> crate::domain::Trial {
        generate(&SyntheticConfig {
            n_trials: 1,
            seed: 1,
            ..SyntheticConfig::default()
        })
        .unwrap()
        .remove(0)
    }

    #[test]
    fn empty_prediction_draws_ground_truth_only() {
        let t = trial();
        let empty = Scanpath::new(vec![FixationPack::default(); t.gt_scanpath.packs.len()]);
        let svg = render_svg(&t.image, t.target_box.as_ref(), &t.gt_scanpath, Some(&empty)).unwrap();
        assert_eq!(svg.matches("class=\"pred-fix\"").count(), 0);
        assert_eq!(svg.matches("class=\"gt-fix\"").count(), t.gt_scanpath.fixation_count());
        assert!(svg.contains("class=\"target-box\""));
        assert!(svg.contains("data:image/png;base64,"));
    }

    #[test]
    fn prediction_circles_are_numbered_in_order() {
        let t = trial();
        let pred = Scanpath::new(vec![
            FixationPack::new(vec![Fixation::new(0.2, 0.2), Fixation::new(0.3, 0.3)]),
            FixationPack::new(vec![Fixation::new(0.6, 0.4)]),
        ]);
        let svg = render_svg(&t.image, None, &t.gt_scanpath, Some(&pred)).unwrap();
        assert_eq!(svg.matches("class=\"pred-fix\"").count(), 3);
        for k in 1..=3 {
            assert!(svg.contains("class=\"pred-label\"") && svg.contains(&format!(">{k}</text>")));
        }
        assert_eq!(svg.matches("class=\"pred-step\"").count(), 2);
    }

    #[test]
    fn output_is_deterministic() {
        let t = trial();
        let a = render_svg(&t.image, t.target_box.as_ref(), &t.gt_scanpath, None).unwrap();
        let b = render_svg(&t.image, t.target_box.as_ref(), &t.gt_scanpath, None).unwrap();
        assert_eq!(a, b);
    }
}

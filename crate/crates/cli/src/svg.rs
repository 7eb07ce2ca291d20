//! Minimal SVG rendering of a motion: the x-y path plus one strip per
//! channel.

use motive_core::toymotion::{MotionSequence, CH_POS_X, CH_POS_Y, D_M};

const CHANNEL_NAMES: [&str; D_M] =
    ["pos_x", "pos_y", "heading", "left_limb", "right_limb", "bounce"];

const WIDTH: f64 = 720.0;
const PATH_HEIGHT: f64 = 360.0;
const STRIP_HEIGHT: f64 = 56.0;
const MARGIN: f64 = 24.0;

fn polyline(points: &[(f64, f64)], stroke: &str) -> String {
    let coords: Vec<String> =
        points.iter().map(|(x, y)| format!("{:.2},{:.2}", x, y)).collect();
    format!(
        "<polyline fill=\"none\" stroke=\"{stroke}\" stroke-width=\"1.5\" points=\"{}\"/>",
        coords.join(" ")
    )
}

/// Scales values into [lo, hi]; a constant series maps to the midline.
fn scaled(values: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let vmin = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let vmax = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = vmax - vmin;
    values
        .iter()
        .map(|v| {
            if span <= 1e-12 {
                (lo + hi) / 2.0
            } else {
                lo + (v - vmin) / span * (hi - lo)
            }
        })
        .collect()
}

pub fn motion_svg(motion: &MotionSequence) -> String {
    let total_height = PATH_HEIGHT + D_M as f64 * STRIP_HEIGHT + MARGIN;
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{total_height}\" \
         viewBox=\"0 0 {WIDTH} {total_height}\">\n"
    ));
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    let xs = motion.channel(CH_POS_X);
    let ys = motion.channel(CH_POS_Y);
    let px = scaled(&xs, MARGIN, WIDTH - MARGIN);
    // SVG y grows downward; flip so +y points up.
    let py = scaled(&ys, PATH_HEIGHT - MARGIN, MARGIN);
    let pts: Vec<(f64, f64)> = px.into_iter().zip(py).collect();
    out.push_str(&polyline(&pts, "#1a4f8b"));
    out.push_str(&format!(
        "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"#2c9437\"/>\n",
        pts[0].0, pts[0].1
    ));
    let last = pts[pts.len() - 1];
    out.push_str(&format!(
        "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"#b03030\"/>\n",
        last.0, last.1
    ));
    out.push_str(&format!(
        "<text x=\"{MARGIN}\" y=\"16\" font-family=\"monospace\" font-size=\"12\">x-y path \
         ({} frames @ {} fps)</text>\n",
        motion.len(),
        motion.frame_rate()
    ));

    for ch in 0..D_M {
        let top = PATH_HEIGHT + ch as f64 * STRIP_HEIGHT;
        let values = motion.channel(ch);
        let n = values.len();
        let sy = scaled(&values, top + STRIP_HEIGHT - 6.0, top + 14.0);
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|i| (MARGIN + i as f64 / (n - 1).max(1) as f64 * (WIDTH - 2.0 * MARGIN), sy[i]))
            .collect();
        out.push_str(&format!(
            "<line x1=\"{MARGIN}\" y1=\"{top:.2}\" x2=\"{:.2}\" y2=\"{top:.2}\" \
             stroke=\"#cccccc\"/>\n",
            WIDTH - MARGIN
        ));
        out.push_str(&polyline(&pts, "#333333"));
        out.push_str(&format!(
            "<text x=\"{MARGIN}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"11\">{}</text>\n",
            top + 12.0,
            CHANNEL_NAMES[ch]
        ));
    }
    out.push_str("</svg>\n");
    out
}

//! Energy-surface grids over a 2-D slice of the latent space, with CSV and
//! SVG contour output.

use crate::error::{Error, Result};
use crate::numerics::Tensor2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Two scalar latent coordinates to vary, with their value ranges.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneSpec {
    pub coord_a: (usize, usize),
    pub coord_b: (usize, usize),
    pub a_range: (f64, f64),
    pub b_range: (f64, f64),
}

impl PlaneSpec {
    pub fn validate(&self, anchor: &Tensor2) -> Result<()> {
        for (name, (r, c)) in [("a", self.coord_a), ("b", self.coord_b)] {
            if r >= anchor.rows() || c >= anchor.cols() {
                return Err(Error::invalid(format!(
                    "plane coordinate {name} = ({r},{c}) outside anchor shape {:?}",
                    anchor.shape()
                )));
            }
        }
        if self.coord_a == self.coord_b {
            return Err(Error::invalid("plane coordinates must differ"));
        }
        for (name, (lo, hi)) in [("a", self.a_range), ("b", self.b_range)] {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::invalid(format!("bad {name} range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyGrid {
    pub values: Tensor2,
    pub plane: PlaneSpec,
}

fn lerp(lo: f64, hi: f64, i: usize, n: usize) -> f64 {
    lo + (hi - lo) * i as f64 / (n - 1) as f64
}

/// Evaluates ‖score(z, t)‖² over an evenly spaced grid on the plane through
/// the anchor. Rows follow coordinate a, columns coordinate b.
pub fn energy_grid<F>(
    score_fn: F,
    z_anchor: &Tensor2,
    t: f64,
    plane: &PlaneSpec,
    resolution: (usize, usize),
) -> Result<EnergyGrid>
where
    F: Fn(&Tensor2, f64) -> Result<Tensor2> + Sync,
{
    plane.validate(z_anchor)?;
    let (rows, cols) = resolution;
    if rows < 2 || cols < 2 {
        return Err(Error::invalid(format!("resolution {rows}x{cols} below 2x2")));
    }
    let row_values: Vec<Vec<f64>> = (0..rows)
        .into_par_iter()
        .map(|i| {
            let a = lerp(plane.a_range.0, plane.a_range.1, i, rows);
            let mut out = Vec::with_capacity(cols);
            for j in 0..cols {
                let b = lerp(plane.b_range.0, plane.b_range.1, j, cols);
                let mut z = z_anchor.clone();
                z.set(plane.coord_a.0, plane.coord_a.1, a);
                z.set(plane.coord_b.0, plane.coord_b.1, b);
                let eps = score_fn(&z, t)?;
                out.push(eps.frob_norm().powi(2));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let values = Tensor2::from_fn(rows, cols, |i, j| row_values[i][j]);
    values.check_finite("energy grid")?;
    Ok(EnergyGrid { values, plane: *plane })
}

impl EnergyGrid {
    pub fn flat_values(&self) -> &[f64] {
        self.values.data()
    }

    /// Row-major CSV with the plane recorded in comment headers. Values are
    /// printed in shortest round-trip form, so parsing recovers them exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let p = &self.plane;
        writeln!(out, "# energy-grid v1").unwrap();
        writeln!(out, "# coord_a {} {} range {} {}", p.coord_a.0, p.coord_a.1, p.a_range.0, p.a_range.1)
            .unwrap();
        writeln!(out, "# coord_b {} {} range {} {}", p.coord_b.0, p.coord_b.1, p.b_range.0, p.b_range.1)
            .unwrap();
        for i in 0..self.values.rows() {
            let row: Vec<String> =
                (0..self.values.cols()).map(|j| format!("{}", self.values.get(i, j))).collect();
            writeln!(out, "{}", row.join(",")).unwrap();
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let magic = lines.next().ok_or_else(|| Error::Format("empty grid file".into()))?;
        if magic.trim() != "# energy-grid v1" {
            return Err(Error::Format(format!("unexpected grid header '{magic}'")));
        }
        let mut parse_axis = |name: &str| -> Result<((usize, usize), (f64, f64))> {
            let line = lines
                .next()
                .ok_or_else(|| Error::Format(format!("missing {name} axis header")))?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 7 || parts[1] != name || parts[4] != "range" {
                return Err(Error::Format(format!("bad axis header '{line}'")));
            }
            let coord = (
                parts[2].parse().map_err(|_| Error::Format(format!("bad index in '{line}'")))?,
                parts[3].parse().map_err(|_| Error::Format(format!("bad index in '{line}'")))?,
            );
            let range = (
                parts[5].parse().map_err(|_| Error::Format(format!("bad range in '{line}'")))?,
                parts[6].parse().map_err(|_| Error::Format(format!("bad range in '{line}'")))?,
            );
            Ok((coord, range))
        };
        let (coord_a, a_range) = parse_axis("coord_a")?;
        let (coord_b, b_range) = parse_axis("coord_b")?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Format(format!("bad cell '{v}'"))))
                .collect::<std::result::Result<_, _>>()?;
            if let Some(first) = rows.first() {
                if row.len() != first.len() {
                    return Err(Error::Format("ragged grid rows".into()));
                }
            }
            rows.push(row);
        }
        if rows.len() < 2 || rows[0].len() < 2 {
            return Err(Error::Format("grid smaller than 2x2".into()));
        }
        let values = Tensor2::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j]);
        Ok(EnergyGrid { values, plane: PlaneSpec { coord_a, coord_b, a_range, b_range } })
    }

    /// Grayscale heatmap with contour polylines. Smoothing affects only this
    /// rendering, never the stored values.
    pub fn to_svg(&self, smooth_sigma: Option<f64>, levels: usize) -> String {
        let values =
            if let Some(s) = smooth_sigma { gaussian_smooth(&self.values, s) } else { self.values.clone() };
        let (rows, cols) = values.shape();
        let cell = 8.0;
        let (w, h) = (cols as f64 * cell, rows as f64 * cell);
        let lo = values.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-300);
        let mut out = String::new();
        writeln!(
            out,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">"
        )
        .unwrap();
        for i in 0..rows {
            for j in 0..cols {
                let v = (values.get(i, j) - lo) / span;
                let shade = (255.0 * (1.0 - v)).round() as u8;
                writeln!(
                    out,
                    "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({shade},{shade},{shade})\"/>",
                    j as f64 * cell,
                    i as f64 * cell
                )
                .unwrap();
            }
        }
        for k in 1..=levels {
            let level = lo + span * k as f64 / (levels + 1) as f64;
            for seg in contour_segments(&values, level) {
                writeln!(
                    out,
                    "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#c33\" stroke-width=\"0.8\"/>",
                    (seg.0 .1 + 0.5) * cell,
                    (seg.0 .0 + 0.5) * cell,
                    (seg.1 .1 + 0.5) * cell,
                    (seg.1 .0 + 0.5) * cell
                )
                .unwrap();
            }
        }
        writeln!(out, "</svg>").unwrap();
        out
    }
}

/// Separable Gaussian blur with kernel radius 3σ and replicated edges.
pub fn gaussian_smooth(values: &Tensor2, sigma: f64) -> Tensor2 {
    if sigma <= 0.0 {
        return values.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for k in -radius..=radius {
        kernel.push((-0.5 * (k as f64 / sigma).powi(2)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }
    let (rows, cols) = values.shape();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let horizontal = Tensor2::from_fn(rows, cols, |i, j| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, &w)| w * values.get(i, clamp(j as isize + k as isize - radius, cols)))
            .sum()
    });
    Tensor2::from_fn(rows, cols, |i, j| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, &w)| w * horizontal.get(clamp(i as isize + k as isize - radius, rows), j))
            .sum()
    })
}

type Point = (f64, f64);

/// Marching-squares level crossings; points are (row, col) in cell units.
fn contour_segments(values: &Tensor2, level: f64) -> Vec<(Point, Point)> {
    let (rows, cols) = values.shape();
    let mut segments = Vec::new();
    let interp = |va: f64, vb: f64| {
        if (vb - va).abs() < 1e-300 {
            0.5
        } else {
            ((level - va) / (vb - va)).clamp(0.0, 1.0)
        }
    };
    for i in 0..rows - 1 {
        for j in 0..cols - 1 {
            let v = [
                values.get(i, j),
                values.get(i, j + 1),
                values.get(i + 1, j + 1),
                values.get(i + 1, j),
            ];
            let mut case = 0usize;
            for (bit, &val) in v.iter().enumerate() {
                if val >= level {
                    case |= 1 << bit;
                }
            }
            if case == 0 || case == 15 {
                continue;
            }
            let (fi, fj) = (i as f64, j as f64);
            let top = (fi, fj + interp(v[0], v[1]));
            let right = (fi + interp(v[1], v[2]), fj + 1.0);
            let bottom = (fi + 1.0, fj + interp(v[3], v[2]));
            let left = (fi + interp(v[0], v[3]), fj);
            let mut push = |a: Point, b: Point| segments.push((a, b));
            match case {
                1 | 14 => push(left, top),
                2 | 13 => push(top, right),
                3 | 12 => push(left, right),
                4 | 11 => push(right, bottom),
                6 | 9 => push(top, bottom),
                7 | 8 => push(left, bottom),
                5 => {
                    push(left, top);
                    push(right, bottom);
                }
                10 => {
                    push(top, right);
                    push(left, bottom);
                }
                _ => unreachable!(),
            }
        }
    }
    segments
}

/// Pearson correlation of two equal-length value lists.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid("correlation needs two equal-length lists of at least 2"));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return Err(Error::invalid("correlation undefined for constant lists"));
    }
    Ok(cov / (va * vb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    fn unit_plane() -> PlaneSpec {
        PlaneSpec {
            coord_a: (0, 0),
            coord_b: (0, 1),
            a_range: (-1.0, 1.0),
            b_range: (-2.0, 2.0),
        }
    }

    #[test]
    fn constant_score_gives_a_constant_grid() {
        let anchor = Tensor2::zeros(2, 3);
        let grid = energy_grid(
            |_z, _t| Ok(Tensor2::filled(2, 3, 0.5)),
            &anchor,
            10.0,
            &unit_plane(),
            (4, 5),
        )
        .unwrap();
        assert_eq!(grid.values.shape(), (4, 5));
        let want = 0.5f64.powi(2) * 6.0;
        for &v in grid.values.data() {
            assert!((v - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn grid_probes_the_requested_coordinates() {
        let anchor = Tensor2::filled(2, 2, 7.0);
        // Energy = value at the probed coordinates only; anchor elsewhere.
        let grid = energy_grid(
            |z, _t| Ok(Tensor2::from_vec(1, 2, vec![z.get(0, 0), z.get(0, 1)]).unwrap()),
            &anchor,
            0.0,
            &unit_plane(),
            (3, 3),
        )
        .unwrap();
        // Center cell probes a=0, b=0.
        assert!((grid.values.get(1, 1) - 0.0).abs() <= 1e-12);
        // Corner probes a=-1, b=-2 so energy 1 + 4.
        assert!((grid.values.get(0, 0) - 5.0).abs() <= 1e-12);
    }

    #[test]
    fn csv_round_trips_bit_exactly() {
        let mut rng = SeedStream::new(5);
        let values = Tensor2::randn(6, 4, 3.7, &mut rng);
        let grid = EnergyGrid { values, plane: unit_plane() };
        let text = grid.to_csv();
        let back = EnergyGrid::from_csv(&text).unwrap();
        assert_eq!(grid, back);
    }

    #[test]
    fn csv_rejects_malformed_input() {
        assert!(EnergyGrid::from_csv("").is_err());
        assert!(EnergyGrid::from_csv("# wrong\n1,2\n3,4\n").is_err());
        let grid = EnergyGrid { values: Tensor2::zeros(2, 2), plane: unit_plane() };
        let ragged = grid.to_csv().replace("0,0", "0");
        assert!(EnergyGrid::from_csv(&ragged).is_err());
    }

    #[test]
    fn resolution_and_plane_are_validated() {
        let anchor = Tensor2::zeros(2, 2);
        let score = |_z: &Tensor2, _t: f64| Ok(Tensor2::zeros(1, 1));
        assert!(energy_grid(score, &anchor, 0.0, &unit_plane(), (1, 5)).is_err());
        let mut bad = unit_plane();
        bad.coord_b = (0, 0);
        assert!(energy_grid(score, &anchor, 0.0, &bad, (3, 3)).is_err());
        let mut outside = unit_plane();
        outside.coord_a = (5, 0);
        assert!(energy_grid(score, &anchor, 0.0, &outside, (3, 3)).is_err());
        let mut empty = unit_plane();
        empty.a_range = (1.0, 1.0);
        assert!(energy_grid(score, &anchor, 0.0, &empty, (3, 3)).is_err());
    }

    #[test]
    fn smoothing_preserves_constant_grids_and_mass() {
        let constant = Tensor2::filled(8, 8, 2.5);
        let smoothed = gaussian_smooth(&constant, 1.0);
        for &v in smoothed.data() {
            assert!((v - 2.5).abs() <= 1e-12);
        }
        let mut spike = Tensor2::zeros(9, 9);
        spike.set(4, 4, 1.0);
        let blurred = gaussian_smooth(&spike, 1.0);
        assert!(blurred.get(4, 4) < 1.0);
        assert!(blurred.get(4, 5) > 0.0);
        assert!((blurred.sum() - 1.0).abs() <= 1e-9, "interior mass preserved");
    }

    #[test]
    fn svg_renders_with_and_without_smoothing() {
        let mut rng = SeedStream::new(6);
        let grid = EnergyGrid { values: Tensor2::randn(5, 5, 1.0, &mut rng), plane: unit_plane() };
        let svg = grid.to_svg(Some(1.0), 4);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("<rect"));
        assert!(svg.contains("<line"));
        assert!(svg.trim_end().ends_with("</svg>"));
        let raw = grid.to_svg(None, 4);
        assert!(raw.contains("<rect"));
    }

    #[test]
    fn pearson_closed_forms() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [2.0, 4.0, 6.0, 8.0];
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() <= 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() <= 1e-12);
        assert!(pearson(&x, &[1.0, 1.0, 1.0, 1.0]).is_err());
        assert!(pearson(&x, &y[..2]).is_err());
    }
}

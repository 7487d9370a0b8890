//! Minimal SVG writer and marching-squares contour tracer.

use std::collections::HashMap;
use std::fmt::Write;

pub type Polyline = Vec<[f64; 2]>;

/// Scalar field sampled on a regular grid; `values[j * nx + i]` sits at
/// `(x0 + i dx, y0 + j dy)`. NaN marks missing data.
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub x0: f64,
    pub y0: f64,
    pub dx: f64,
    pub dy: f64,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn sample(lo: [f64; 2], hi: [f64; 2], nx: usize, ny: usize, f: impl Fn([f64; 2]) -> f64) -> Self {
        let dx = (hi[0] - lo[0]) / (nx - 1) as f64;
        let dy = (hi[1] - lo[1]) / (ny - 1) as f64;
        let values = (0..nx * ny)
            .map(|k| f([lo[0] + (k % nx) as f64 * dx, lo[1] + (k / nx) as f64 * dy]))
            .collect();
        Self { nx, ny, x0: lo[0], y0: lo[1], dx, dy, values }
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.nx + i]
    }

    fn point(&self, i: usize, j: usize) -> [f64; 2] {
        [self.x0 + i as f64 * self.dx, self.y0 + j as f64 * self.dy]
    }
}

/// Edge of the grid as (lower-left vertex, direction): 0 horizontal, 1 vertical.
type EdgeKey = (usize, usize, u8);

/// Traces `{value = level}` as polylines. Cells touching NaN are skipped;
/// saddle cells are split using the cell-centre average.
pub fn marching_squares(grid: &Grid, level: f64) -> Vec<Polyline> {
    let mut segments: Vec<(EdgeKey, EdgeKey)> = Vec::new();
    for j in 0..grid.ny - 1 {
        for i in 0..grid.nx - 1 {
            let v = [grid.at(i, j), grid.at(i + 1, j), grid.at(i + 1, j + 1), grid.at(i, j + 1)];
            if v.iter().any(|x| x.is_nan()) {
                continue;
            }
            let idx = v
                .iter()
                .enumerate()
                .fold(0u8, |acc, (k, x)| acc | (u8::from(*x > level) << k));
            // Edges: bottom, right, top, left.
            let e = [(i, j, 0), (i + 1, j, 1), (i, j + 1, 0), (i, j, 1)];
            let centre_above = v.iter().sum::<f64>() / 4.0 > level;
            let pairs: &[(usize, usize)] = match idx {
                0 | 15 => &[],
                1 | 14 => &[(3, 0)],
                2 | 13 => &[(0, 1)],
                3 | 12 => &[(3, 1)],
                4 | 11 => &[(1, 2)],
                6 | 9 => &[(0, 2)],
                7 | 8 => &[(3, 2)],
                5 if centre_above => &[(3, 2), (0, 1)],
                5 => &[(3, 0), (1, 2)],
                10 if centre_above => &[(3, 0), (1, 2)],
                10 => &[(0, 1), (3, 2)],
                _ => unreachable!(),
            };
            for &(a, b) in pairs {
                segments.push((e[a], e[b]));
            }
        }
    }
    let crossing = |k: EdgeKey| -> [f64; 2] {
        let (i, j, d) = k;
        let (i2, j2) = if d == 0 { (i + 1, j) } else { (i, j + 1) };
        let (a, b) = (grid.at(i, j), grid.at(i2, j2));
        let t = if a == b { 0.5 } else { ((level - a) / (b - a)).clamp(0.0, 1.0) };
        let (p, q) = (grid.point(i, j), grid.point(i2, j2));
        [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
    };
    chain(&segments).into_iter().map(|keys| keys.into_iter().map(crossing).collect()).collect()
}

/// Joins segments that share edge crossings into maximal chains.
fn chain(segments: &[(EdgeKey, EdgeKey)]) -> Vec<Vec<EdgeKey>> {
    let mut touching: HashMap<EdgeKey, Vec<usize>> = HashMap::new();
    for (s, (a, b)) in segments.iter().enumerate() {
        touching.entry(*a).or_default().push(s);
        touching.entry(*b).or_default().push(s);
    }
    let mut used = vec![false; segments.len()];
    let mut lines = Vec::new();
    let next = |key: EdgeKey, used: &[bool]| touching[&key].iter().copied().find(|&s| !used[s]);
    for start in 0..segments.len() {
        if used[start] {
            continue;
        }
        used[start] = true;
        let (a, b) = segments[start];
        let mut forward = vec![a, b];
        while let Some(s) = next(*forward.last().unwrap(), &used) {
            used[s] = true;
            let (p, q) = segments[s];
            forward.push(if p == *forward.last().unwrap() { q } else { p });
        }
        let mut backward = Vec::new();
        let mut head = a;
        while let Some(s) = next(head, &used) {
            used[s] = true;
            let (p, q) = segments[s];
            head = if p == head { q } else { p };
            backward.push(head);
        }
        backward.reverse();
        backward.extend(forward);
        lines.push(backward);
    }
    lines
}

/// SVG canvas mapping a data rectangle onto a fixed pixel size with the
/// y axis pointing up.
pub struct Svg {
    lo: [f64; 2],
    hi: [f64; 2],
    width: f64,
    height: f64,
    body: String,
}

impl Svg {
    pub fn new(lo: [f64; 2], hi: [f64; 2], width: f64) -> Self {
        let height = width * (hi[1] - lo[1]) / (hi[0] - lo[0]);
        Self { lo, hi, width, height, body: String::new() }
    }

    fn px(&self, p: [f64; 2]) -> (f64, f64) {
        (
            (p[0] - self.lo[0]) / (self.hi[0] - self.lo[0]) * self.width,
            (self.hi[1] - p[1]) / (self.hi[1] - self.lo[1]) * self.height,
        )
    }

    fn points(&self, pts: &[[f64; 2]]) -> String {
        pts.iter()
            .map(|p| {
                let (x, y) = self.px(*p);
                format!("{x:.2},{y:.2}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn rect(&mut self, min: [f64; 2], max: [f64; 2], class: &str) {
        let (x0, y1) = self.px(min);
        let (x1, y0) = self.px(max);
        let _ = writeln!(
            self.body,
            r#"<rect class="{class}" x="{x0:.2}" y="{y0:.2}" width="{:.2}" height="{:.2}"/>"#,
            x1 - x0,
            y1 - y0
        );
    }

    pub fn circle(&mut self, centre: [f64; 2], radius: f64, class: &str) {
        let (cx, cy) = self.px(centre);
        let r = radius / (self.hi[0] - self.lo[0]) * self.width;
        let _ = writeln!(self.body, r#"<circle class="{class}" cx="{cx:.2}" cy="{cy:.2}" r="{r:.2}"/>"#);
    }

    pub fn polyline(&mut self, pts: &[[f64; 2]], class: &str) {
        let _ = writeln!(self.body, r#"<polyline class="{class}" points="{}"/>"#, self.points(pts));
    }

    /// Contour pieces as a single `<path>` so they do not count as polylines.
    pub fn path(&mut self, lines: &[Polyline], class: &str) {
        let d: String = lines
            .iter()
            .filter(|l| l.len() > 1)
            .map(|l| format!("M{}", self.points(l).replace(' ', " L")))
            .collect::<Vec<_>>()
            .join(" ");
        if !d.is_empty() {
            let _ = writeln!(self.body, r#"<path class="{class}" d="{d}"/>"#);
        }
    }

    pub fn finish(self) -> String {
        format!(
            concat!(
                r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.2} {h:.2}">"#,
                "\n<style>",
                ".workspace{{fill:none;stroke:#000;stroke-width:1}} ",
                ".obstacle{{fill:#999;stroke:none}} ",
                ".boundary{{fill:none;stroke:#c00;stroke-width:2}} ",
                ".contour{{fill:none;stroke:#36c;stroke-width:0.6}} ",
                ".ball{{fill:none;stroke:#c00;stroke-width:2}} ",
                ".trajectory{{fill:none;stroke:#080;stroke-width:1.2}} ",
                ".goal{{fill:#000}}",
                "</style>\n{body}</svg>\n"
            ),
            w = self.width,
            h = self.height,
            body = self.body
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circle_contour_is_closed_and_round() {
        let g = Grid::sample([-1.0, -1.0], [1.0, 1.0], 81, 81, |p| p[0].hypot(p[1]));
        let lines = marching_squares(&g, 0.5);
        assert_eq!(lines.len(), 1);
        let l = &lines[0];
        assert!((l[0][0] - l[l.len() - 1][0]).abs() < 1e-12);
        for p in l {
            assert!((p[0].hypot(p[1]) - 0.5).abs() < 2e-3);
        }
    }

    #[test]
    fn nan_cells_are_skipped() {
        let g = Grid::sample([0.0, 0.0], [1.0, 1.0], 11, 11, |p| if p[0] > 0.5 { f64::NAN } else { p[1] });
        let lines = marching_squares(&g, 0.55);
        assert_eq!(lines.len(), 1);
        assert!(lines[0].iter().all(|p| p[0] <= 0.5 + 1e-12));
    }

    #[test]
    fn svg_counts_polylines() {
        let mut s = Svg::new([0.0, 0.0], [1.0, 1.0], 100.0);
        s.polyline(&[[0.0, 0.0], [1.0, 1.0]], "trajectory");
        s.path(&[vec![[0.0, 1.0], [1.0, 0.0]]], "contour");
        let out = s.finish();
        assert_eq!(out.matches("<polyline").count(), 1);
        assert!(out.contains("M0.00,0.00 L100.00,100.00"));
    }
}

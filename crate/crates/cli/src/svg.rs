//! Static SVG figures written as plain geometry.

use std::fmt::Write;

use teb_core::hji::Projection;
use teb_core::planner::{PlanTrajectory, Raster, Workspace};
use teb_core::sim::SimLog;

const PX_PER_M: f64 = 200.0;
const PAD: f64 = 30.0;

struct Canvas {
    x0: f64,
    y1: f64,
    body: String,
    width: f64,
    height: f64,
}

impl Canvas {
    fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        Self {
            x0: x.0,
            y1: y.1,
            body: String::new(),
            width: (x.1 - x.0) * PX_PER_M + 2.0 * PAD,
            height: (y.1 - y.0) * PX_PER_M + 2.0 * PAD,
        }
    }

    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        (PAD + (x - self.x0) * PX_PER_M, PAD + (self.y1 - y) * PX_PER_M)
    }

    fn rect(&mut self, x: (f64, f64), y: (f64, f64), style: &str) {
        let (a, b) = self.px(x.0, y.1);
        let (w, h) = ((x.1 - x.0) * PX_PER_M, (y.1 - y.0) * PX_PER_M);
        let _ = writeln!(self.body, r#"<rect x="{a:.2}" y="{b:.2}" width="{w:.2}" height="{h:.2}" {style}/>"#);
    }

    fn polyline(&mut self, pts: &[[f64; 2]], style: &str) {
        let mut d = String::new();
        for p in pts {
            let (a, b) = self.px(p[0], p[1]);
            let _ = write!(d, "{a:.2},{b:.2} ");
        }
        let _ = writeln!(self.body, r#"<polyline points="{}" fill="none" {style}/>"#, d.trim_end());
    }

    fn circle(&mut self, x: f64, y: f64, r_px: f64, style: &str) {
        let (a, b) = self.px(x, y);
        let _ = writeln!(self.body, r#"<circle cx="{a:.2}" cy="{b:.2}" r="{r_px:.2}" {style}/>"#);
    }

    fn text(&mut self, x: f64, y: f64, s: &str) {
        let (a, b) = self.px(x, y);
        let _ = writeln!(self.body, r#"<text x="{a:.2}" y="{b:.2}" font-size="12" font-family="sans-serif">{s}</text>"#);
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }
}

fn cells(c: &mut Canvas, p: &Projection, style: &str) {
    let (hx, hy) = (p.x_axis.spacing(), p.y_axis.spacing());
    for ix in 0..p.x_axis.n {
        for iy in 0..p.y_axis.n {
            if p.is_member(ix, iy) {
                let (x, y) = (p.x_axis.coord(ix), p.y_axis.coord(iy));
                c.rect((x - 0.5 * hx, x + 0.5 * hx), (y - 0.5 * hy, y + 0.5 * hy), style);
            }
        }
    }
}

/// `(label, projection, fill)` layers on the `x_r`–`y_r` plane, first drawn first.
pub fn teb_comparison(layers: &[(String, Projection, &str)]) -> String {
    let Some((_, first, _)) = layers.first() else {
        return Canvas::new((0.0, 1.0), (0.0, 1.0)).finish();
    };
    let x = (first.x_axis.lo, first.x_axis.hi);
    let y = (first.y_axis.lo, first.y_axis.hi);
    let mut c = Canvas::new(x, y);
    c.rect(x, y, r#"fill="none" stroke="black""#);
    for (k, (label, p, fill)) in layers.iter().enumerate() {
        cells(&mut c, p, &format!(r#"fill="{fill}" fill-opacity="0.55" stroke="none""#));
        c.text(x.0 + 0.05, y.1 - 0.08 * (k + 1) as f64, &format!("{label}: {:.3} m²", p.area()));
    }
    c.circle(0.0, 0.0, 2.5, r#"fill="black""#);
    c.finish()
}

/// Workspace with obstacles, augmented raster, goal, plan and rollout path.
pub fn trajectory(ws: &Workspace, augmented: &Raster, plan: Option<&PlanTrajectory>, log: Option<&SimLog>, title: &str) -> String {
    let mut c = Canvas::new(ws.x_range_m, ws.y_range_m);
    c.rect(ws.x_range_m, ws.y_range_m, r#"fill="none" stroke="black""#);
    let (ax, ay) = (&augmented.spec.axes[0], &augmented.spec.axes[1]);
    let (hx, hy) = (ax.spacing(), ay.spacing());
    for ix in 0..ax.n {
        for iy in 0..ay.n {
            if augmented.is_blocked(ix, iy) {
                let (x, y) = (ax.coord(ix), ay.coord(iy));
                c.rect((x - 0.5 * hx, x + 0.5 * hx), (y - 0.5 * hy, y + 0.5 * hy), r#"fill="red" fill-opacity="0.35" stroke="none""#);
            }
        }
    }
    for o in &ws.obstacles {
        c.rect(o.x_m, o.y_m, r#"fill="black""#);
    }
    c.rect(ws.goal.x_m, ws.goal.y_m, r#"fill="green" fill-opacity="0.4" stroke="green""#);
    if let Some(p) = plan.filter(|p| p.feasible) {
        for q in &p.positions {
            c.circle(q[0], q[1], 3.0, r#"fill="none" stroke="blue""#);
        }
    }
    if let Some(l) = log {
        let pts: Vec<[f64; 2]> = l.records.iter().map(|r| [r.s[0], r.s[1]]).collect();
        c.polyline(&pts, r##"stroke="#8b0000" stroke-width="2""##);
    }
    c.text(ws.x_range_m.0 + 0.05, ws.y_range_m.1 - 0.08, title);
    c.finish()
}

//! Self-contained SVG log-log scatter with an optional fitted curve.

use std::fmt::Write;

use cellscale_core::fit::{FitResult, ScalingPoint};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 72.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;
const CURVE_SAMPLES: usize = 200;

struct LogAxis {
    lo: f64,
    hi: f64,
    pixel_lo: f64,
    pixel_hi: f64,
}

impl LogAxis {
    fn new(min: f64, max: f64, pixel_lo: f64, pixel_hi: f64, pad: f64) -> Self {
        let (mut lo, mut hi) = (min.log10(), max.log10());
        if hi - lo < 1e-9 {
            lo -= 0.5;
            hi += 0.5;
        }
        let span = hi - lo;
        Self {
            lo: lo - pad * span,
            hi: hi + pad * span,
            pixel_lo,
            pixel_hi,
        }
    }

    fn map(&self, v: f64) -> f64 {
        self.pixel_lo
            + (v.log10() - self.lo) / (self.hi - self.lo) * (self.pixel_hi - self.pixel_lo)
    }

    /// Decades inside the range, or 1-2-5 steps when fewer than two decades fit.
    fn ticks(&self) -> Vec<f64> {
        let decades: Vec<f64> = (self.lo.ceil() as i32..=self.hi.floor() as i32)
            .map(|e| 10f64.powi(e))
            .collect();
        if decades.len() >= 2 {
            return decades;
        }
        let mut out = Vec::new();
        for e in (self.lo.floor() as i32)..=(self.hi.ceil() as i32) {
            for m in [1.0, 2.0, 5.0] {
                let v = m * 10f64.powi(e);
                let l = v.log10();
                if l >= self.lo && l <= self.hi {
                    out.push(v);
                }
            }
        }
        out
    }
}

fn tick_label(v: f64) -> String {
    if (1e-3..1e4).contains(&v.abs()) {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.0e}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Log-log scatter of `points` (one circle per run) with the fitted curve and
/// its floor when `fit` is given.
pub fn loglog_svg(
    points: &[ScalingPoint],
    fit: Option<&FitResult>,
    title: &str,
    y_label: &str,
) -> String {
    let xs = points.iter().map(|p| p.x);
    let ys = points.iter().map(|p| p.loss);
    let (x_min, x_max) = (
        xs.clone().fold(f64::INFINITY, f64::min),
        xs.fold(0.0, f64::max),
    );
    let (mut y_min, y_max) = (
        ys.clone().fold(f64::INFINITY, f64::min),
        ys.fold(0.0, f64::max),
    );
    if let Some(f) = fit {
        if f.c > 0.0 {
            y_min = y_min.min(f.c);
        }
    }
    let x_axis = LogAxis::new(x_min, x_max, LEFT, WIDTH - RIGHT, 0.05);
    let y_axis = LogAxis::new(y_min, y_max, HEIGHT - BOTTOM, TOP, 0.08);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, HEIGHT - BOTTOM, TOP);
    let _ = writeln!(
        s,
        r#"<rect x="{x0}" y="{y1}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#,
        x1 - x0,
        y0 - y1
    );
    for t in x_axis.ticks() {
        let px = x_axis.map(t);
        let _ = writeln!(
            s,
            r##"<line x1="{px:.2}" y1="{y0}" x2="{px:.2}" y2="{y1}" stroke="#ddd"/><text x="{px:.2}" y="{:.1}" text-anchor="middle">{}</text>"##,
            y0 + 16.0,
            tick_label(t)
        );
    }
    for t in y_axis.ticks() {
        let py = y_axis.map(t);
        let _ = writeln!(
            s,
            r##"<line x1="{x0}" y1="{py:.2}" x2="{x1}" y2="{py:.2}" stroke="#ddd"/><text x="{:.1}" y="{:.2}" text-anchor="end">{}</text>"##,
            x0 - 6.0,
            py + 4.0,
            tick_label(t)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">parameter count P</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 14.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );

    if let Some(f) = fit {
        let (lo, hi) = (x_axis.lo, x_axis.hi);
        let path: Vec<String> = (0..=CURVE_SAMPLES)
            .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / CURVE_SAMPLES as f64))
            .map(|x| (x_axis.map(x), y_axis.map(f.predict(x))))
            .filter(|(_, py)| py.is_finite() && (y1..=y0).contains(py))
            .map(|(px, py)| format!("{px:.2},{py:.2}"))
            .collect();
        if path.len() >= 2 {
            let _ = writeln!(
                s,
                r##"<polyline points="{}" fill="none" stroke="#c0392b" stroke-width="2"/>"##,
                path.join(" ")
            );
        }
        if f.c > 0.0 {
            let py = y_axis.map(f.c);
            if (y1..=y0).contains(&py) {
                let _ = writeln!(
                    s,
                    r##"<line x1="{x0}" y1="{py:.2}" x2="{x1}" y2="{py:.2}" stroke="#c0392b" stroke-dasharray="6 4"/>"##
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">alpha = {:.3}, a = {:.3}, c = {:.4}, R² = {:.3}</text>"#,
            x1 - 8.0,
            y1 + 18.0,
            f.alpha,
            f.a,
            f.c,
            f.r2
        );
    }
    for p in points {
        let _ = writeln!(
            s,
            r##"<circle cx="{:.2}" cy="{:.2}" r="4" fill="#2c7fb8" fill-opacity="0.8"><title>{} ({}, {})</title></circle>"##,
            x_axis.map(p.x),
            y_axis.map(p.loss),
            escape(&p.tag),
            p.x,
            p.loss
        );
    }
    s.push_str("</svg>\n");
    s
}

//! Minimal SVG plots: panels of points with error bars, optional curves and a
//! dashed reference line. The plotted numbers are embedded as a CSV comment.

use std::fmt::Write;

const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 260.0;
const MARGIN_L: f64 = 52.0;
const MARGIN_B: f64 = 58.0;
const MARGIN_T: f64 = 34.0;
const MARGIN_R: f64 = 14.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    /// Interval drawn as a vertical bar.
    pub lo: Option<f64>,
    pub hi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum XAxis {
    /// Points at positions 0, 1, … labelled with these names.
    Categories(Vec<String>),
    Numeric { label: String, lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub title: String,
    pub x: XAxis,
    pub y_label: String,
    pub y_range: (f64, f64),
    pub points: Vec<Point>,
    pub curve: Vec<(f64, f64)>,
    pub reference: Option<f64>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace("--", "- -")
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "NA".into()
    }
}

impl Panel {
    fn x_range(&self) -> (f64, f64) {
        match &self.x {
            XAxis::Categories(c) => (-0.5, c.len().max(1) as f64 - 0.5),
            XAxis::Numeric { lo, hi, .. } => {
                if hi > lo {
                    (*lo, *hi)
                } else {
                    (lo - 0.5, lo + 0.5)
                }
            }
        }
    }

    fn render(&self, out: &mut String, ox: f64) {
        let (x0, x1) = self.x_range();
        let (y0, y1) = self.y_range;
        let w = PANEL_W - MARGIN_L - MARGIN_R;
        let h = PANEL_H - MARGIN_T - MARGIN_B;
        let px = |x: f64| ox + MARGIN_L + (x - x0) / (x1 - x0) * w;
        let py = |y: f64| MARGIN_T + (1.0 - (y.clamp(y0, y1) - y0) / (y1 - y0)) * h;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
            ox + MARGIN_L + w / 2.0,
            esc(&self.title)
        );
        let _ = writeln!(
            out,
            r#"<rect x="{:.1}" y="{MARGIN_T:.1}" width="{w:.1}" height="{h:.1}" fill="none" stroke="black"/>"#,
            ox + MARGIN_L
        );
        for i in 0..=4 {
            let v = y0 + (y1 - y0) * i as f64 / 4.0;
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{v:.2}</text>"#,
                ox + MARGIN_L - 4.0,
                py(v) + 3.0
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="11" transform="rotate(-90 {:.1} {:.1})">{}</text>"#,
            ox + 12.0,
            MARGIN_T + h / 2.0,
            ox + 12.0,
            MARGIN_T + h / 2.0,
            esc(&self.y_label)
        );
        match &self.x {
            XAxis::Categories(names) => {
                for (i, n) in names.iter().enumerate() {
                    let _ = writeln!(
                        out,
                        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10">{}</text>"#,
                        px(i as f64),
                        MARGIN_T + h + 14.0,
                        esc(n)
                    );
                }
            }
            XAxis::Numeric { label, .. } => {
                for i in 0..=4 {
                    let v = x0 + (x1 - x0) * i as f64 / 4.0;
                    let _ = writeln!(
                        out,
                        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10">{v:.2}</text>"#,
                        px(v),
                        MARGIN_T + h + 14.0
                    );
                }
                let _ = writeln!(
                    out,
                    r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="11">{}</text>"#,
                    ox + MARGIN_L + w / 2.0,
                    MARGIN_T + h + 32.0,
                    esc(label)
                );
            }
        }
        if let Some(r) = self.reference {
            let _ = writeln!(
                out,
                r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="grey" stroke-dasharray="5,4"/>"#,
                px(x0),
                py(r),
                px(x1),
                py(r)
            );
        }
        if self.curve.len() >= 2 {
            let pts: Vec<String> = self.curve.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
            let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="1.5"/>"#, pts.join(" "));
        }
        for p in &self.points {
            if !p.y.is_finite() {
                continue;
            }
            if let (Some(lo), Some(hi)) = (p.lo, p.hi) {
                if lo.is_finite() && hi.is_finite() {
                    let _ = writeln!(
                        out,
                        r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="black"/>"#,
                        py(lo),
                        py(hi),
                        x = px(p.x)
                    );
                }
            }
            let _ = writeln!(out, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="black"/>"#, px(p.x), py(p.y));
        }
    }
}

/// Panels side by side in one SVG document.
pub fn render(title: &str, panels: &[Panel]) -> String {
    let width = PANEL_W * panels.len().max(1) as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{PANEL_H:.0}" viewBox="0 0 {width:.0} {PANEL_H:.0}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, "<title>{}</title>", esc(title));
    let _ = writeln!(out, "<!-- data\npanel,x,y,lo,hi");
    for p in panels {
        for pt in &p.points {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                esc(&p.title),
                num(pt.x),
                num(pt.y),
                pt.lo.map(num).unwrap_or_default(),
                pt.hi.map(num).unwrap_or_default()
            );
        }
    }
    let _ = writeln!(out, "-->");
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, p) in panels.iter().enumerate() {
        p.render(&mut out, i as f64 * PANEL_W);
    }
    out.push_str("</svg>\n");
    out
}

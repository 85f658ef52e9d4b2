//! Plain SVG figures: metric table, correlation scatter with fit, lesion
//! curves, and the healthy/diseased histogram with a categorical scatter.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use episeg::eval::MeanSd;
use episeg::io::write_atomic;
use episeg::Condition;

use crate::commands::EvalSummary;
use crate::failure::CmdResult;

const W: f64 = 560.0;
const H: f64 = 380.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const HEALTHY: &str = "#2b7bb9";
const DISEASED: &str = "#d7301f";

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Fixed-precision number for coordinates, so output is stable text.
fn n(v: f64) -> String {
    format!("{v:.2}")
}

fn label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}").trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

struct Plot {
    body: String,
    x: (f64, f64),
    y: (f64, f64),
}

impl Plot {
    fn new(title: &str, xlabel: &str, ylabel: &str, x: (f64, f64), y: (f64, f64)) -> Self {
        let pad = |(lo, hi): (f64, f64)| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        let mut p = Plot {
            body: String::new(),
            x: pad(x),
            y: pad(y),
        };
        let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
        writeln!(
            p.body,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            n(W / 2.0),
            esc(title)
        )
        .unwrap();
        writeln!(
            p.body,
            r#"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            n(x0),
            n(y0),
            n(x1 - x0),
            n(y1 - y0)
        )
        .unwrap();
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let xv = p.x.0 + f * (p.x.1 - p.x.0);
            let yv = p.y.0 + f * (p.y.1 - p.y.0);
            let (px, py) = (p.px(xv), p.py(yv));
            writeln!(
                p.body,
                r#"<line x1="{0}" y1="{1}" x2="{0}" y2="{2}" stroke="black"/><text x="{0}" y="{3}" text-anchor="middle" font-size="11">{4}</text>"#,
                n(px),
                n(y1),
                n(y1 + 5.0),
                n(y1 + 18.0),
                label(xv)
            )
            .unwrap();
            writeln!(
                p.body,
                r#"<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="black"/><text x="{3}" y="{4}" text-anchor="end" font-size="11">{5}</text>"#,
                n(x0 - 5.0),
                n(py),
                n(x0),
                n(x0 - 8.0),
                n(py + 4.0),
                label(yv)
            )
            .unwrap();
        }
        writeln!(
            p.body,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#,
            n((x0 + x1) / 2.0),
            n(H - 12.0),
            esc(xlabel)
        )
        .unwrap();
        writeln!(
            p.body,
            r#"<text x="16" y="{0}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {0})">{1}</text>"#,
            n((y0 + y1) / 2.0),
            esc(ylabel)
        )
        .unwrap();
        p
    }

    fn px(&self, v: f64) -> f64 {
        LEFT + (v - self.x.0) / (self.x.1 - self.x.0) * (W - RIGHT - LEFT)
    }

    fn py(&self, v: f64) -> f64 {
        H - BOTTOM - (v - self.y.0) / (self.y.1 - self.y.0) * (H - BOTTOM - TOP)
    }

    fn points(&mut self, pts: &[(f64, f64)], color: &str) {
        for &(x, y) in pts {
            writeln!(
                self.body,
                r#"<circle cx="{}" cy="{}" r="3.5" fill="{color}" fill-opacity="0.75"/>"#,
                n(self.px(x)),
                n(self.py(y))
            )
            .unwrap();
        }
    }

    fn line(&mut self, pts: &[(f64, f64)], color: &str, dashed: bool) {
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{},{}", n(self.px(x)), n(self.py(y))))
            .collect();
        let dash = if dashed { r#" stroke-dasharray="6 4""# } else { "" };
        writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#,
            coords.join(" ")
        )
        .unwrap();
    }

    fn bar(&mut self, x0: f64, x1: f64, height: f64, color: &str) {
        let (a, b) = (self.px(x0), self.px(x1));
        let top = self.py(height);
        writeln!(
            self.body,
            r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{color}" fill-opacity="0.5" stroke="{color}"/>"#,
            n(a),
            n(top),
            n(b - a),
            n(self.py(self.y.0) - top)
        )
        .unwrap();
    }

    fn legend(&mut self, items: &[(&str, &str)]) {
        for (i, (name, color)) in items.iter().enumerate() {
            let y = TOP + 14.0 + 16.0 * i as f64;
            writeln!(
                self.body,
                r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/><text x="{}" y="{}" font-size="11">{}</text>"#,
                n(W - RIGHT - 130.0),
                n(y - 9.0),
                n(W - RIGHT - 115.0),
                n(y),
                esc(name)
            )
            .unwrap();
        }
    }

    fn finish(self) -> String {
        svg(&self.body, W, H)
    }
}

fn svg(body: &str, w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" viewBox=\"0 0 {0} {1}\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{body}</svg>\n",
        n(w),
        n(h)
    )
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn cell(m: &MeanSd) -> String {
    format!("{:.3} ({:.3})", m.mean, m.sd)
}

pub fn summary_csv(summaries: &[EvalSummary]) -> String {
    let mut s = String::from(
        "variant,volumes,empty_pairs,precision_mean,precision_sd,recall_mean,recall_sd,dice_mean,dice_sd\n",
    );
    for e in summaries {
        if let Some(p) = &e.pixel {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                e.variant,
                p.volumes,
                p.empty_pairs,
                p.precision.mean,
                p.precision.sd,
                p.recall.mean,
                p.recall.sd,
                p.dice.mean,
                p.dice.sd
            )
            .unwrap();
        }
    }
    s
}

/// Precision, recall and Dice as mean (sd) per variant.
pub fn summary_svg(summaries: &[EvalSummary]) -> String {
    let row_h = 26.0;
    let cols = [20.0, 200.0, 330.0, 460.0];
    let mut body = String::new();
    let header = ["variant", "precision", "recall", "dice"];
    for (x, h) in cols.iter().zip(header) {
        writeln!(body, r#"<text x="{}" y="30" font-size="13" font-weight="bold">{h}</text>"#, n(*x)).unwrap();
    }
    let mut y = 30.0;
    for e in summaries {
        let Some(p) = &e.pixel else { continue };
        y += row_h;
        let cells = [e.variant.to_string(), cell(&p.precision), cell(&p.recall), cell(&p.dice)];
        for (x, c) in cols.iter().zip(cells) {
            writeln!(body, r#"<text x="{}" y="{}" font-size="13">{}</text>"#, n(*x), n(y), esc(&c)).unwrap();
        }
    }
    writeln!(
        body,
        r#"<line x1="15" y1="38" x2="{}" y2="38" stroke="black"/>"#,
        n(W - 15.0)
    )
    .unwrap();
    svg(&body, W, y + 20.0)
}

/// Uncertainty sum against reference anomaly area, with the least-squares
/// line.
pub fn correlation_svg(summary: &EvalSummary) -> String {
    let pts: Vec<(f64, f64)> = summary
        .volumes
        .iter()
        .filter(|r| r.condition == Condition::Diseased)
        .map(|r| (r.gt_area as f64, r.uncertainty_sum))
        .collect();
    let title = match (&summary.correlation, &summary.correlation_error) {
        (Some(c), _) => format!("Uncertainty vs anomaly area (rho = {:.3}, n = {})", c.rho, c.n),
        (None, Some(e)) => format!("Uncertainty vs anomaly area ({e})"),
        _ => "Uncertainty vs anomaly area".to_string(),
    };
    let xr = range(pts.iter().map(|p| p.0));
    let yr = range(pts.iter().map(|p| p.1));
    let (xr, yr) = if pts.is_empty() { ((0.0, 1.0), (0.0, 1.0)) } else { (xr, yr) };
    let mut plot = Plot::new(&title, "reference anomaly area [pixels]", "total uncertainty", xr, yr);
    plot.points(&pts, DISEASED);
    if let Some(c) = &summary.correlation {
        let (a, b) = plot.x;
        plot.line(&[(a, c.slope * a + c.intercept), (b, c.slope * b + c.intercept)], "black", true);
    }
    plot.finish()
}

/// Lesion-detection recall and precision against the Dice cut-off.
pub fn lesion_svg(summary: &EvalSummary) -> String {
    let mut plot = Plot::new(
        &format!("Lesion detection ({})", summary.variant),
        "Dice cut-off d",
        "rate",
        (0.0, 1.0),
        (0.0, 1.0),
    );
    if let Some(l) = &summary.lesion {
        let series = |v: &[Option<f64>]| -> Vec<(f64, f64)> {
            l.d.iter().zip(v).filter_map(|(&d, y)| y.map(|y| (d, y))).collect()
        };
        plot.line(&series(&l.ld_re), HEALTHY, false);
        plot.line(&series(&l.ld_pr), DISEASED, true);
    }
    plot.legend(&[("LD recall", HEALTHY), ("LD precision", DISEASED)]);
    plot.finish()
}

/// Histogram of the mean predicted area per B-scan by condition, with the
/// individual volumes as a strip underneath.
pub fn separation_svg(summary: &EvalSummary) -> String {
    let Some(rep) = &summary.separation else {
        let mut plot = Plot::new("Volume separation (needs healthy and diseased volumes)", "", "", (0.0, 1.0), (0.0, 1.0));
        plot.legend(&[]);
        return plot.finish();
    };
    let h = &rep.histogram;
    let max_count = h.healthy.iter().chain(&h.diseased).copied().max().unwrap_or(1).max(1) as f64;
    let xr = (h.edges[0], *h.edges.last().expect("edges"));
    let mut plot = Plot::new(
        &format!("Mean anomalous area per B-scan (AUC = {:.3}, overlap = {})", rep.auc, rep.overlap),
        "mean predicted anomalous pixels per B-scan",
        "volumes",
        xr,
        (-0.25 * max_count, max_count),
    );
    for i in 0..h.healthy.len() {
        let (a, b) = (h.edges[i], h.edges[i + 1]);
        let mid = (a + b) / 2.0;
        plot.bar(a, mid, h.healthy[i] as f64, HEALTHY);
        plot.bar(mid, b, h.diseased[i] as f64, DISEASED);
    }
    for (c, y, color) in [
        (Condition::Healthy, -0.08, HEALTHY),
        (Condition::Diseased, -0.17, DISEASED),
    ] {
        let pts: Vec<(f64, f64)> = summary
            .volumes
            .iter()
            .filter(|r| r.condition == c)
            .map(|r| (r.mean_area, y * max_count))
            .collect();
        plot.points(&pts, color);
    }
    plot.legend(&[("healthy", HEALTHY), ("diseased", DISEASED)]);
    plot.finish()
}

/// Writes every figure; the scatter, lesion and separation figures use the
/// first summary (the full variant when present).
pub fn write_report(dir: &Path, summaries: &[EvalSummary]) -> CmdResult<Vec<PathBuf>> {
    let main = &summaries[0];
    let files = [
        ("summary.csv", summary_csv(summaries)),
        ("summary.svg", summary_svg(summaries)),
        ("correlation.svg", correlation_svg(main)),
        ("lesion_curves.svg", lesion_svg(main)),
        ("separation.svg", separation_svg(main)),
    ];
    let mut out = Vec::new();
    for (name, text) in files {
        let path = dir.join(name);
        write_atomic(&path, text.as_bytes())?;
        out.push(path);
    }
    Ok(out)
}

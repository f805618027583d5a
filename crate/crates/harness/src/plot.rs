//! SVG learning curves: reward with a min/max band over seeds, and
//! cumulative violations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use aasc_core::{EnvParams, KvMap};
use serde_json::json;

use crate::error::{HarnessError, Result};
use crate::report::{load_method, MethodRuns};

const W: f64 = 720.0;
const H: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Per-step mean, min and max over seeds, truncated to the shortest seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub steps: Vec<f64>,
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

pub fn band(runs: &MethodRuns, value: impl Fn(&crate::report::MetricsRow) -> f64) -> Band {
    let len = runs.seeds.iter().map(|(_, r)| r.len()).min().unwrap_or(0);
    let mut b = Band {
        steps: Vec::with_capacity(len),
        mean: Vec::with_capacity(len),
        min: Vec::with_capacity(len),
        max: Vec::with_capacity(len),
    };
    for i in 0..len {
        let vals: Vec<f64> = runs.seeds.iter().map(|(_, r)| value(&r[i])).filter(|v| v.is_finite()).collect();
        if vals.is_empty() {
            continue;
        }
        b.steps.push(runs.seeds[0].1[i].step as f64);
        b.mean.push(vals.iter().sum::<f64>() / vals.len() as f64);
        b.min.push(vals.iter().copied().fold(f64::INFINITY, f64::min));
        b.max.push(vals.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
    b
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0).max(1e-12) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y0) / (self.y1 - self.y0).max(1e-12) * (H - TOP - BOTTOM)
    }
}

fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-9);
    let raw = span / n as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= n as f64).unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * step {
        out.push(if t.abs() < 1e-9 * step { 0.0 } else { t });
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{}k", v / 1000.0)
    } else if v.fract() == 0.0 {
        format!("{v}")
    } else {
        format!("{v:.2}")
    }
}

pub struct Curve<'a> {
    pub label: String,
    pub band: &'a Band,
    pub note: Option<&'a str>,
}

/// A single-panel line chart; bands are drawn when min and max differ.
pub fn render_svg(title: &str, y_label: &str, curves: &[Curve]) -> String {
    let all_x = curves.iter().flat_map(|c| c.band.steps.iter().copied());
    let x1 = all_x.fold(1.0f64, f64::max);
    let lo = curves.iter().flat_map(|c| c.band.min.iter().copied()).fold(f64::INFINITY, f64::min);
    let hi = curves.iter().flat_map(|c| c.band.max.iter().copied()).fold(f64::NEG_INFINITY, f64::max);
    let (mut y0, mut y1) = if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) };
    if y1 - y0 < 1e-9 {
        y0 -= 1.0;
        y1 += 1.0;
    }
    let pad = 0.05 * (y1 - y0);
    let f = Frame {
        x0: 0.0,
        x1,
        y0: y0 - pad,
        y1: y1 + pad,
    };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let (bx0, bx1, by0, by1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = writeln!(s, r#"<rect x="{bx0}" y="{by0}" width="{}" height="{}" fill="none" stroke="black"/>"#, bx1 - bx0, by1 - by0);
    for t in nice_ticks(f.x0, f.x1, 6) {
        let x = f.px(t);
        let _ = writeln!(s, r##"<line x1="{x:.1}" y1="{by1}" x2="{x:.1}" y2="{:.1}" stroke="#ccc"/>"##, by1 + 5.0);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, by1 + 18.0, fmt_tick(t));
    }
    for t in nice_ticks(f.y0, f.y1, 6) {
        let y = f.py(t);
        let _ = writeln!(s, r##"<line x1="{:.1}" y1="{y:.1}" x2="{bx1}" y2="{y:.1}" stroke="#eee"/>"##, bx0 - 5.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, bx0 - 8.0, y + 4.0, fmt_tick(t));
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">environment steps</text>"#, (bx0 + bx1) / 2.0, H - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (by0 + by1) / 2.0,
        (by0 + by1) / 2.0,
        escape(y_label)
    );

    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let b = c.band;
        if b.steps.is_empty() {
            continue;
        }
        if b.min.iter().zip(&b.max).any(|(a, z)| z > a) {
            let mut pts: Vec<String> = b.steps.iter().zip(&b.max).map(|(x, y)| format!("{:.1},{:.1}", f.px(*x), f.py(*y))).collect();
            pts.extend(b.steps.iter().zip(&b.min).rev().map(|(x, y)| format!("{:.1},{:.1}", f.px(*x), f.py(*y))));
            let _ = writeln!(s, r#"<polygon points="{}" fill="{color}" fill-opacity="0.18" stroke="none"/>"#, pts.join(" "));
        }
        let line: Vec<String> = b.steps.iter().zip(&b.mean).map(|(x, y)| format!("{:.1},{:.1}", f.px(*x), f.py(*y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"><title>{}</title></polyline>"#,
            line.join(" "),
            escape(&c.label)
        );
        let ly = TOP + 16.0 + 20.0 * i as f64;
        let lx = W - RIGHT + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/>"#, lx + 22.0);
        let label = match c.note {
            Some(n) => format!("{} ({n})", c.label),
            None => c.label.clone(),
        };
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" class="legend">{}</text>"#, lx + 28.0, ly + 4.0, escape(&label));
        if let Some(n) = c.note {
            let (x, y) = (f.px(*b.steps.last().unwrap()), f.py(*b.mean.last().unwrap()));
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end" fill="{color}">{}</text>"#, x - 4.0, y - 6.0, escape(n));
        }
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn env_of(dir: &Path) -> Option<EnvParams> {
    let first = std::fs::read_dir(dir).ok()?.filter_map(|e| e.ok()).find(|e| e.path().join("run.txt").is_file())?;
    let kv = KvMap::parse(&std::fs::read_to_string(first.path().join("run.txt")).ok()?).ok()?;
    EnvParams::from_kv(&kv.section("env")).ok()
}

/// Writes `<group>_reward.svg` and `<group>_violations.svg` per environment,
/// plus `manifest.json` describing every image and curve.
pub fn plot_runs(dirs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    if dirs.is_empty() {
        return Err(HarnessError::Usage("plot needs at least one run directory".into()));
    }
    std::fs::create_dir_all(out)?;
    let mut groups: Vec<(Option<EnvParams>, Vec<MethodRuns>)> = Vec::new();
    for d in dirs {
        let runs = load_method(d)?;
        let env = env_of(d);
        match groups.iter_mut().find(|(e, _)| *e == env) {
            Some((_, v)) => v.push(runs),
            None => groups.push((env, vec![runs])),
        }
    }
    let mut written = Vec::new();
    let mut images = Vec::new();
    for (gi, (env, methods)) in groups.iter().enumerate() {
        let group = match env {
            Some(e) if *e == EnvParams::target() => "target".to_string(),
            _ => format!("env{gi}"),
        };
        let rewards: Vec<Band> = methods.iter().map(|m| band(m, |r| r.reward)).collect();
        let violations: Vec<Band> = methods.iter().map(|m| band(m, |r| r.cumulative_violations as f64)).collect();
        let zero: Vec<bool> = violations.iter().map(|b| b.max.iter().all(|v| *v == 0.0)).collect();

        let reward_curves: Vec<Curve> = methods
            .iter()
            .zip(&rewards)
            .map(|(m, b)| Curve {
                label: m.label.clone(),
                band: b,
                note: None,
            })
            .collect();
        let viol_curves: Vec<Curve> = methods
            .iter()
            .zip(&violations)
            .zip(&zero)
            .map(|((m, b), z)| Curve {
                label: m.label.clone(),
                band: b,
                note: z.then_some("zero violations"),
            })
            .collect();
        for (kind, title, y, curves) in [
            ("reward", "Mean episodic reward", "reward", &reward_curves),
            ("violations", "Cumulative safety violations", "violations", &viol_curves),
        ] {
            let file = format!("{group}_{kind}.svg");
            let path = out.join(&file);
            std::fs::write(&path, render_svg(&format!("{title} ({group})"), y, curves))?;
            written.push(path);
            images.push(json!({
                "file": file,
                "kind": kind,
                "environment": group,
                "curves": methods.iter().zip(&zero).map(|(m, z)| json!({
                    "label": m.label,
                    "seeds": m.seeds.len(),
                    "zero_violations": z,
                })).collect::<Vec<_>>(),
            }));
        }
    }
    let manifest = json!({ "images": images });
    let path = out.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).expect("json"))?;
    written.push(path);
    Ok(written)
}

//! Success-rate curve as a standalone SVG.

use std::fmt::Write;

use crate::train::MetricsRow;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const STAGE_COLOURS: [&str; 3] = ["#1f77b4", "#d62728", "#2ca02c"];

/// Best row: highest success, earliest on ties.
pub fn best_row(rows: &[MetricsRow]) -> Option<&MetricsRow> {
    rows.iter()
        .fold(None, |best: Option<&MetricsRow>, r| match best {
            Some(b) if b.success >= r.success => Some(b),
            _ => Some(r),
        })
}

pub fn summary_line(rows: &[MetricsRow]) -> String {
    match best_row(rows) {
        Some(b) => format!(
            "best success {:.3} at step {} (stage {})",
            b.success, b.step, b.stage
        ),
        None => "no evaluations recorded".to_string(),
    }
}

/// Success rate against train step, one polyline per stage, and a dashed
/// vertical marker wherever the stage changes.
pub fn render_svg(rows: &[MetricsRow]) -> String {
    let (lo, hi) = match (rows.first(), rows.last()) {
        (Some(a), Some(b)) if b.step > a.step => (a.step as f64, b.step as f64),
        (Some(a), _) => (a.step as f64 - 1.0, a.step as f64 + 1.0),
        _ => (0.0, 1.0),
    };
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let x = |step: f64| LEFT + (step - lo) / (hi - lo) * pw;
    let y = |s: f64| TOP + (1.0 - s) * ph;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="14">Evaluation success rate</text>"#,
        W / 2.0
    );
    for k in 0..=4 {
        let s = k as f64 / 4.0;
        let _ = writeln!(
            out,
            r##"<line x1="{LEFT:.2}" y1="{yy:.2}" x2="{:.2}" y2="{yy:.2}" stroke="#dddddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{s:.2}</text>"##,
            W - RIGHT,
            LEFT - 6.0,
            y(s) + 4.0,
            yy = y(s)
        );
    }
    for k in 0..=4 {
        let step = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{:.0}</text>"#,
            x(step),
            H - BOTTOM + 18.0,
            step
        );
    }
    let _ = writeln!(
        out,
        r#"<rect x="{LEFT:.2}" y="{TOP:.2}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">train step</text>"#,
        LEFT + pw / 2.0,
        H - 12.0
    );

    for pair in rows.windows(2) {
        if pair[1].stage != pair[0].stage {
            let bx = x(pair[0].step as f64);
            let _ = writeln!(
                out,
                r#"<line class="stage-boundary" x1="{bx:.2}" y1="{TOP:.2}" x2="{bx:.2}" y2="{:.2}" stroke="black" stroke-dasharray="6,4"/><text x="{:.2}" y="{:.2}">stage {}</text>"#,
                TOP + ph,
                bx + 4.0,
                TOP + 14.0,
                pair[1].stage
            );
        }
    }

    let mut start = 0;
    while start < rows.len() {
        let stage = rows[start].stage;
        let end = rows[start..]
            .iter()
            .position(|r| r.stage != stage)
            .map_or(rows.len(), |p| start + p);
        let colour = STAGE_COLOURS[(stage as usize).saturating_sub(1) % STAGE_COLOURS.len()];
        let pts: Vec<String> = rows[start..end]
            .iter()
            .map(|r| format!("{:.2},{:.2}", x(r.step as f64), y(r.success)))
            .collect();
        if pts.len() > 1 {
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
                pts.join(" ")
            );
        }
        for r in &rows[start..end] {
            let _ = writeln!(
                out,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{colour}"/>"#,
                x(r.step as f64),
                y(r.success)
            );
        }
        start = end;
    }
    out.push_str("</svg>\n");
    out
}

//! Markdown run summaries and the sweep chart.

use std::fmt::Write;

use spackle_core::training::{MetricRow, SweepPoint};

pub fn training_section(
    out: &mut String,
    history: &[MetricRow],
    best_iteration: usize,
    best_val: f64,
) {
    let _ = writeln!(out, "## Training\n");
    let _ = writeln!(out, "- validation checks: {}", history.len());
    let _ = writeln!(out, "- selected iteration: {best_iteration}");
    let _ = writeln!(out, "- best validation MSE: {best_val:.6}");
    if let Some(last) = history.last() {
        let _ = writeln!(out, "- final validation MSE: {:.6}", last.val_mse);
        if let Some(t) = last.train_mse {
            let _ = writeln!(out, "- final training MSE: {t:.6}");
        }
    }
    out.push('\n');
}

pub fn sweep_section(out: &mut String, points: &[SweepPoint]) {
    let _ = writeln!(out, "## Corruption sweep\n");
    let _ = writeln!(
        out,
        "| rho | entries | SpaCKLE MSE | median MSE | MSE ratio | SpaCKLE PCC | median PCC |"
    );
    let _ = writeln!(out, "|---|---|---|---|---|---|---|");
    for p in points {
        let _ = writeln!(
            out,
            "| {} | {} | {:.4} | {:.4} | {:.3} | {:.4} | {:.4} |",
            p.rho,
            p.spackle.num_evaluated_entries,
            p.spackle.mse,
            p.median.mse,
            p.median.mse / p.spackle.mse,
            p.spackle.pcc,
            p.median.pcc
        );
    }
    out.push('\n');
}

/// Line chart of MSE against the masked fraction for both methods.
pub fn sweep_svg(points: &[SweepPoint]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 48.0;
    let xs: Vec<f64> = points.iter().map(|p| p.rho).collect();
    let ys = points.iter().flat_map(|p| [p.spackle.mse, p.median.mse]);
    let (x0, x1) = (
        xs.iter().copied().fold(f64::INFINITY, f64::min),
        xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );
    let y1 = ys.fold(0.0_f64, f64::max).max(1e-12);
    let span = if x1 > x0 { x1 - x0 } else { 1.0 };
    let px = |x: f64| PAD + (x - x0) / span * (W - 2.0 * PAD);
    let py = |y: f64| H - PAD - y / y1 * (H - 2.0 * PAD);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect width="{W}" height="{H}" fill="white"/><line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    for &x in &xs {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{x}</text>"#,
            px(x),
            H - PAD + 16.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{y1:.3}</text><text x="{:.1}" y="{:.1}" text-anchor="end">0</text>"#,
        PAD - 4.0,
        PAD + 4.0,
        PAD - 4.0,
        H - PAD + 4.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">masked fraction</text><text x="12" y="{:.1}" transform="rotate(-90 12 {:.1})" text-anchor="middle">MSE</text>"#,
        W / 2.0,
        H - 8.0,
        H / 2.0,
        H / 2.0
    );
    for (name, color, pick) in [
        ("SpaCKLE", "#1f77b4", 0usize),
        ("median", "#d62728", 1usize),
    ] {
        let coords: Vec<String> = points
            .iter()
            .map(|p| {
                let y = if pick == 0 {
                    p.spackle.mse
                } else {
                    p.median.mse
                };
                format!("{:.1},{:.1}", px(p.rho), py(y))
            })
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            coords.join(" ")
        );
        let ly = PAD + 14.0 * pick as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{name}</text>"#,
            W - PAD - 90.0,
            W - PAD - 70.0,
            W - PAD - 64.0,
            ly + 4.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

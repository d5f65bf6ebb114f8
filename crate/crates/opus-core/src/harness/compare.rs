//! Run comparison: metrics tables and an optional SVG chart of
//! validation loss against update tokens.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub name: String,
    pub fingerprint: String,
    pub final_step: u64,
    pub final_tokens: u64,
    pub final_val_loss: f64,
    /// (update_tokens, val_loss) per metrics row.
    pub curve: Vec<(u64, f64)>,
}

fn parse_metrics(path: &Path) -> Result<RunSummary> {
    let text = std::fs::read_to_string(path)?;
    let name = path
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    let mut fingerprint = String::new();
    let mut curve = Vec::new();
    let mut header_seen = false;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(fp) = rest.split("fingerprint=").nth(1) {
                fingerprint = fp.trim().to_string();
            }
            continue;
        }
        if !header_seen {
            // column header row
            header_seen = true;
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 4 {
            return Err(Error::Config(format!("{}: malformed metrics row", path.display())));
        }
        let tokens: u64 = cols[1]
            .parse()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let val: f64 = cols[3]
            .parse()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let step: u64 = cols[0]
            .parse()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        curve.push((tokens, val));
        if curve.len() == 1 || step > 0 {
            // final row wins
        }
    }
    if curve.is_empty() {
        return Err(Error::Empty(format!("{}: no metrics rows", path.display())));
    }
    let text_last = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .last()
        .unwrap_or_default();
    let cols: Vec<&str> = text_last.split(',').collect();
    let final_step = cols[0].parse().unwrap_or(0);
    Ok(RunSummary {
        name,
        fingerprint,
        final_step,
        final_tokens: curve.last().unwrap().0,
        final_val_loss: curve.last().unwrap().1,
        curve,
    })
}

/// Load and order run summaries by final validation loss ascending.
///
/// Token-matched comparison: refuses inputs whose final update-token counts
/// differ unless `allow_mismatch`.
pub fn compare_runs(paths: &[std::path::PathBuf], allow_mismatch: bool) -> Result<Vec<RunSummary>> {
    if paths.is_empty() {
        return Err(Error::Empty("no metrics files given".into()));
    }
    let mut rows: Vec<RunSummary> = paths.iter().map(|p| parse_metrics(p)).collect::<Result<_>>()?;
    if !allow_mismatch {
        let t0 = rows[0].final_tokens;
        if let Some(bad) = rows.iter().find(|r| r.final_tokens != t0) {
            return Err(Error::Config(format!(
                "update-token budgets differ ({} vs {}); pass --allow-mismatch to compare anyway",
                t0, bad.final_tokens
            )));
        }
    }
    rows.sort_by(|a, b| {
        a.final_val_loss
            .partial_cmp(&b.final_val_loss)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.name.cmp(&b.name))
    });
    Ok(rows)
}

pub fn render_table(rows: &[RunSummary]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<24} {:>10} {:>14} {:>12}  fingerprint\n",
        "run", "steps", "update_tokens", "val_loss"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:<24} {:>10} {:>14} {:>12.6} {}\n",
            r.name, r.final_step, r.final_tokens, r.final_val_loss, r.fingerprint
        ));
    }
    out
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Line chart of validation loss vs update tokens.
pub fn render_svg(rows: &[RunSummary]) -> String {
    let (w, h) = (720.0, 440.0);
    let (ml, mr, mt, mb) = (70.0, 20.0, 20.0, 50.0);
    let max_x = rows.iter().flat_map(|r| &r.curve).map(|&(t, _)| t).max().unwrap_or(1) as f64;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in rows {
        for &(_, v) in &r.curve {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    if !lo.is_finite() || lo == hi {
        lo = 0.0;
        hi = 1.0;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let px = |t: f64| ml + (w - ml - mr) * t / max_x.max(1.0);
    let py = |v: f64| mt + (h - mt - mb) * (hi - v) / (hi - lo);

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    s.push_str(&format!(
        "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n<g stroke=\"#333\" stroke-width=\"1\">\
         <line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\"/><line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\"/></g>\n",
        h - mb, w - mr, h - mb, h - mb
    ));
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let t = max_x * i as f64 / 4.0;
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\">{:.3}</text>\n",
            ml - 6.0,
            py(v) + 4.0,
            v
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{:.2e}</text>\n",
            px(t),
            h - mb + 16.0,
            t
        ));
    }
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">update tokens</text>\n",
        (ml + w - mr) / 2.0,
        h - 12.0
    ));
    s.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">val loss</text>\n",
        (mt + h - mb) / 2.0,
        (mt + h - mb) / 2.0
    ));
    for (i, r) in rows.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = r
            .curve
            .iter()
            .filter(|&&(_, v)| v.is_finite())
            .map(|&(t, v)| format!("{:.1},{:.1}", px(t as f64), py(v)))
            .collect();
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{}</text>\n",
            w - mr - 180.0,
            mt + 16.0 * (i as f64 + 1.0),
            r.name
        ));
    }
    s.push_str("</svg>\n");
    s
}

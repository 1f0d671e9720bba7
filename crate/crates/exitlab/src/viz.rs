//! Exit-depth visualizations and training-curve export.
//!
//! Tokens are colored by the layer where their forward pass stopped: shallow
//! exits are warm, full depth is cool. Terminal output uses standard
//! 256-color escapes; the HTML export is a single self-contained document.
//! Both renderings are byte-deterministic for a fixed input.

use crate::error::{Error, Result};
use crate::metrics::ExitRecord;

/// Warm-to-cool bucket colors (shallow exit first).
const BUCKET_COLORS: [(u8, u8, u8); 8] = [
    (0xd7, 0x30, 0x27),
    (0xf4, 0x6d, 0x43),
    (0xfd, 0xae, 0x61),
    (0xfe, 0xe0, 0x90),
    (0xe0, 0xf3, 0xf8),
    (0xab, 0xd9, 0xe9),
    (0x74, 0xad, 0xd1),
    (0x45, 0x75, 0xb4),
];

#[derive(Debug, Clone, Copy)]
pub struct Palette {
    /// Suppress escape codes entirely and emit plain token text.
    pub no_color: bool,
}

impl Default for Palette {
    fn default() -> Self {
        Palette { no_color: false }
    }
}

pub fn bucket_count() -> usize {
    BUCKET_COLORS.len()
}

/// Map a 1-based exit layer onto a palette bucket (0 = shallowest).
fn bucket_for(exit_layer: usize, l_total: usize) -> usize {
    debug_assert!(exit_layer >= 1 && exit_layer <= l_total);
    if l_total <= 1 {
        return BUCKET_COLORS.len() - 1;
    }
    ((exit_layer - 1) * BUCKET_COLORS.len() / l_total).min(BUCKET_COLORS.len() - 1)
}

/// Nearest xterm-256 color-cube index for an RGB triple.
fn xterm_index((r, g, b): (u8, u8, u8)) -> u8 {
    let level = |v: u8| -> u8 { ((v as u16 * 5 + 127) / 255) as u8 };
    16 + 36 * level(r) + 6 * level(g) + level(b)
}

/// Terminal rendering: each token wrapped in a 256-color background escape.
pub fn render_exit_map_ansi(records: &[ExitRecord], l_total: usize, palette: &Palette) -> String {
    if palette.no_color {
        return records.iter().map(|r| r.token.as_str()).collect();
    }
    let mut out = String::new();
    for r in records {
        let idx = xterm_index(BUCKET_COLORS[bucket_for(r.exit_layer, l_total)]);
        out.push_str(&format!("\x1b[48;5;{idx}m\x1b[30m{}\x1b[0m", r.token));
    }
    out
}

fn html_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Self-contained HTML document with a legend mapping layers to colors.
pub fn render_exit_map_html(records: &[ExitRecord], l_total: usize) -> String {
    let mut html = String::new();
    html.push_str("<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n");
    html.push_str("<title>Per-token exit depth</title>\n<style>\n");
    html.push_str("body { font-family: monospace; margin: 2em; }\n");
    html.push_str(".tok { padding: 1px 0; color: #111; white-space: pre-wrap; }\n");
    html.push_str(".legend { margin-top: 1.5em; }\n");
    html.push_str(".swatch { display: inline-block; width: 3em; text-align: center; margin-right: 0.5em; color: #111; }\n");
    for (i, (r, g, b)) in BUCKET_COLORS.iter().enumerate() {
        html.push_str(&format!(".b{i} {{ background: #{r:02x}{g:02x}{b:02x}; }}\n"));
    }
    html.push_str("</style>\n</head>\n<body>\n<div>\n");
    for r in records {
        let b = bucket_for(r.exit_layer, l_total);
        html.push_str(&format!(
            "<span class=\"tok b{b}\" title=\"layer {}/{l_total}\">{}</span>",
            r.exit_layer,
            html_escape(&r.token)
        ));
    }
    html.push_str("\n</div>\n<div class=\"legend\">\n");
    html.push_str("<p>Exit layer (shallow = warm, deep = cool):</p>\n");
    let n = BUCKET_COLORS.len();
    for i in 0..n {
        // inclusive layer range covered by bucket i
        let lo = (i * l_total) / n + 1;
        let hi = (((i + 1) * l_total).div_ceil(n)).min(l_total);
        if lo > hi || lo > l_total {
            continue;
        }
        let label = if lo == hi { format!("{lo}") } else { format!("{lo}-{hi}") };
        html.push_str(&format!("<span class=\"swatch b{i}\">{label}</span>"));
    }
    html.push_str("\n</div>\n</body>\n</html>\n");
    html
}

/// Write history rows as CSV. Every row must match the header's width.
/// Whole numbers are written as integers; everything else keeps nine
/// significant digits so a parse-back reproduces the value.
pub fn export_curves(header: &[&str], rows: &[Vec<f64>]) -> Result<String> {
    for (i, row) in rows.iter().enumerate() {
        if row.len() != header.len() {
            return Err(Error::Export(format!(
                "row {i} has {} fields, header has {}",
                row.len(),
                header.len()
            )));
        }
    }
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        let fields: Vec<String> = row.iter().map(|&v| format_value(v)).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn format_value(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e12 {
        format!("{}", v as i64)
    } else {
        format!("{v:.8e}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(layers: &[usize]) -> Vec<ExitRecord> {
        layers
            .iter()
            .enumerate()
            .map(|(i, &l)| ExitRecord {
                token: format!("t{i} "),
                exit_layer: l,
                position: i,
            })
            .collect()
    }

    #[test]
    fn all_final_is_single_color() {
        let records = rec(&[8, 8, 8, 8]);
        let ansi = render_exit_map_ansi(&records, 8, &Palette::default());
        let codes: Vec<&str> = ansi.matches("48;5;").collect();
        assert_eq!(codes.len(), 4);
        // one distinct color index
        let first = ansi.split("48;5;").nth(1).unwrap().split('m').next().unwrap();
        for part in ansi.split("48;5;").skip(1) {
            assert_eq!(part.split('m').next().unwrap(), first);
        }
    }

    #[test]
    fn endpoints_map_to_palette_extremes() {
        assert_eq!(bucket_for(1, 8), 0);
        assert_eq!(bucket_for(8, 8), bucket_count() - 1);
        assert_eq!(bucket_for(1, 28), 0);
        assert_eq!(bucket_for(28, 28), bucket_count() - 1);
    }

    #[test]
    fn no_color_fallback_is_plain_text() {
        let records = rec(&[1, 8]);
        let plain = render_exit_map_ansi(&records, 8, &Palette { no_color: true });
        assert_eq!(plain, "t0 t1 ");
    }

    #[test]
    fn html_preserves_token_text() {
        let mut records = rec(&[2, 5, 8]);
        records[1].token = "a<b&c>".into();
        let html = render_exit_map_html(&records, 8);
        assert!(html.contains("a&lt;b&amp;c&gt;"));
        assert!(html.contains("legend"));
        // rendering is deterministic
        assert_eq!(html, render_exit_map_html(&records, 8));
    }

    #[test]
    fn export_header_only_for_empty_history() {
        let csv = export_curves(&["step", "x"], &[]).unwrap();
        assert_eq!(csv, "step,x\n");
    }

    #[test]
    fn export_counts_lines_and_round_trips() {
        let rows = vec![
            vec![0.0, 0.123456789123, 1.0],
            vec![1.0, -5.5e-9, 0.5],
            vec![2.0, 98765.4321, 3.0],
        ];
        let csv = export_curves(&["step", "a", "b"], &rows).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        for (li, row) in rows.iter().enumerate() {
            let parsed: Vec<f64> = lines[li + 1]
                .split(',')
                .map(|f| f.parse::<f64>().unwrap())
                .collect();
            for (p, v) in parsed.iter().zip(row) {
                let denom = v.abs().max(1e-300);
                assert!(
                    ((p - v) / denom).abs() < 1e-8,
                    "parse-back {p} vs {v}"
                );
            }
        }
    }

    #[test]
    fn export_rejects_schema_mismatch() {
        let err = export_curves(&["a", "b"], &[vec![1.0]]);
        assert!(matches!(err, Err(Error::Export(_))));
    }
}

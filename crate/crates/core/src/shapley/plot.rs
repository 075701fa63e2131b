//! Attribution bar-chart data.
//!
//! The CSV has columns `tool,value,std_error,n_samples`, sorted ascending by
//! value with ties broken by tool name. An SVG bar chart with error bars is
//! written next to it with the `.svg` extension.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::ShapleyEstimate;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("no estimates to plot")]
    Empty,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

fn sorted(estimates: &[ShapleyEstimate]) -> Vec<&ShapleyEstimate> {
    let mut v: Vec<&ShapleyEstimate> = estimates.iter().collect();
    v.sort_by(|a, b| a.value.total_cmp(&b.value).then_with(|| a.tool_name.cmp(&b.tool_name)));
    v
}

/// Write `out_path` (CSV) and its `.svg` sibling; returns both paths.
pub fn emit_attribution_plot_data(
    estimates: &[ShapleyEstimate],
    out_path: impl AsRef<Path>,
) -> Result<Vec<PathBuf>, PlotError> {
    if estimates.is_empty() {
        return Err(PlotError::Empty);
    }
    let out = out_path.as_ref();
    let rows = sorted(estimates);
    let csv_err = |source| PlotError::Csv {
        path: out.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(out).map_err(csv_err)?;
    w.write_record(["tool", "value", "std_error", "n_samples"])
        .map_err(csv_err)?;
    for e in &rows {
        w.write_record([
            e.tool_name.clone(),
            e.value.to_string(),
            e.std_error.to_string(),
            e.n_samples.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|source| PlotError::Io {
        path: out.to_path_buf(),
        source,
    })?;

    let svg_path = out.with_extension("svg");
    std::fs::write(&svg_path, render_svg(estimates)).map_err(|source| PlotError::Io {
        path: svg_path.clone(),
        source,
    })?;
    Ok(vec![out.to_path_buf(), svg_path])
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Horizontal bars, one per tool, lowest value on top, with ±std_error
/// whiskers and a zero line.
pub fn render_svg(estimates: &[ShapleyEstimate]) -> String {
    let rows = sorted(estimates);
    let (label_w, plot_w, bar_h, pad) = (160.0, 420.0, 28.0, 20.0);
    let lo = rows.iter().map(|e| e.value - e.std_error).fold(0.0_f64, f64::min);
    let hi = rows.iter().map(|e| e.value + e.std_error).fold(0.0_f64, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let x = |v: f64| label_w + (v - lo) / span * plot_w;
    let height = pad * 2.0 + bar_h * rows.len() as f64 + 20.0;
    let width = label_w + plot_w + pad * 2.0;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    for (k, e) in rows.iter().enumerate() {
        let y = pad + k as f64 * bar_h;
        let (x0, x1) = (x(0.0).min(x(e.value)), x(0.0).max(x(e.value)));
        let fill = if e.value < 0.0 { "#d9534f" } else { "#4a7fb5" };
        let _ = writeln!(
            svg,
            r#"  <text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            label_w - 8.0,
            y + bar_h * 0.65,
            escape(&e.tool_name)
        );
        let _ = writeln!(
            svg,
            r#"  <rect x="{x0:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{fill}"/>"#,
            y + 4.0,
            (x1 - x0).max(0.5),
            bar_h - 8.0
        );
        let (ex0, ex1, ey) = (x(e.value - e.std_error), x(e.value + e.std_error), y + bar_h / 2.0);
        let _ = writeln!(
            svg,
            r#"  <line x1="{ex0:.1}" y1="{ey:.1}" x2="{ex1:.1}" y2="{ey:.1}" stroke="black"/>"#
        );
    }
    let zx = x(0.0);
    let _ = writeln!(
        svg,
        r##"  <line x1="{zx:.1}" y1="{pad:.1}" x2="{zx:.1}" y2="{:.1}" stroke="#444" stroke-dasharray="3,3"/>"##,
        height - pad - 20.0
    );
    let _ = writeln!(
        svg,
        r#"  <text x="{:.1}" y="{:.1}" text-anchor="middle">Shapley value</text>"#,
        label_w + plot_w / 2.0,
        height - pad / 2.0
    );
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn est(name: &str, value: f64, se: f64) -> ShapleyEstimate {
        ShapleyEstimate {
            tool_name: name.into(),
            value,
            std_error: se,
            n_samples: 374,
        }
    }

    #[test]
    fn sorted_ascending_with_name_ties() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("attr.csv");
        let es = [
            est("qwen_omni", 0.098016, 0.026723),
            est("tavily", -0.018462, 0.012952),
            est("audio_flamingo3", 0.092903, 0.022510),
        ];
        let paths = emit_attribution_plot_data(&es, &out).unwrap();
        let text = std::fs::read_to_string(&out).unwrap();
        let tools: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(tools, ["tavily", "audio_flamingo3", "qwen_omni"]);
        assert!(text.contains("tavily,-0.018462,0.012952,374"));
        let svg = std::fs::read_to_string(&paths[1]).unwrap();
        assert_eq!(svg.matches("<rect").count(), 3);

        let ties = [est("b", 0.1, 0.0), est("a", 0.1, 0.0)];
        emit_attribution_plot_data(&ties, &out).unwrap();
        let text = std::fs::read_to_string(&out).unwrap();
        assert_eq!(text.lines().nth(1).unwrap().split(',').next(), Some("a"));

        emit_attribution_plot_data(&[est("solo", 0.2, 0.01)], &out).unwrap();
        assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 2);
        assert!(matches!(emit_attribution_plot_data(&[], &out), Err(PlotError::Empty)));
    }
}

use std::fmt::Write;
use std::str::FromStr;

use super::SaliencyReport;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenderFormat {
    Json,
    Ansi,
    Html,
}

impl FromStr for RenderFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(RenderFormat::Json),
            "ansi" => Ok(RenderFormat::Ansi),
            "html" => Ok(RenderFormat::Html),
            _ => Err(Error::UnknownFormat(s.to_string())),
        }
    }
}

/// Rank of each score scaled to `[0, 1]`; ties share the lowest rank.
pub(super) fn quantiles(scores: &[f64]) -> Vec<f64> {
    let n = scores.len();
    if n <= 1 {
        return vec![1.0; n];
    }
    scores
        .iter()
        .map(|s| scores.iter().filter(|&&o| o < *s).count() as f64 / (n - 1) as f64)
        .collect()
}

/// Green for positive contributions, red for negative, brighter for
/// higher-scoring tokens.
fn rgb(sign: i8, q: f64) -> (u8, u8, u8) {
    let hot = (80.0 + 175.0 * q).round() as u8;
    let dim = (80.0 * (1.0 - q)).round() as u8;
    match sign {
        1 => (dim, hot, dim),
        -1 => (hot, dim, dim),
        _ => (hot / 2 + 40, hot / 2 + 40, hot / 2 + 40),
    }
}

fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(ch),
        }
    }
    out
}

pub fn render_saliency(report: &SaliencyReport, format: RenderFormat) -> Result<String> {
    let q = quantiles(&report.scores);
    let mut out = String::new();
    match format {
        RenderFormat::Json => {
            out = serde_json::to_string_pretty(report).map_err(|e| Error::Format(e.to_string()))?;
            out.push('\n');
        }
        RenderFormat::Ansi => {
            for (i, tok) in report.tokens.iter().enumerate() {
                let (r, g, b) = rgb(report.signs[i], q[i]);
                if i > 0 {
                    out.push(' ');
                }
                write!(out, "\x1b[1;38;2;{r};{g};{b}m{tok}\x1b[0m").unwrap();
            }
            writeln!(out, "  [predicted {}, label {}]", report.predicted, report.label).unwrap();
        }
        RenderFormat::Html => {
            writeln!(
                out,
                "<div class=\"saliency\" data-predicted=\"{}\" data-label=\"{}\">",
                report.predicted, report.label
            )
            .unwrap();
            for (i, tok) in report.tokens.iter().enumerate() {
                let (r, g, b) = rgb(report.signs[i], q[i]);
                writeln!(
                    out,
                    "<span style=\"background-color:rgb({r},{g},{b});color:#fff;padding:0 2px\" title=\"{:.6e}\">{}</span>",
                    report.scores[i],
                    escape_html(tok)
                )
                .unwrap();
            }
            out.push_str("</div>\n");
        }
    }
    Ok(out)
}


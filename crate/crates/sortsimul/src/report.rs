//! Evaluation reports as JSON, latency-quality curves as CSV/SVG, and
//! read/write traces as JSON lines.

use std::fmt::Write;

use serde::Serialize;
use sortsimul_core::metrics::EvalReport;

#[derive(Serialize)]
struct SentenceJson<'a> {
    hypothesis: &'a [u32],
    reference: &'a [u32],
    chrf: f64,
    al: Option<f64>,
    al_ca_ms: Option<f64>,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    k: usize,
    bleu: f64,
    chrf: f64,
    al: f64,
    al_ca_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle_bleu: Option<f64>,
    sentences: Vec<SentenceJson<'a>>,
}

pub fn reports_json(reports: &[EvalReport]) -> serde_json::Value {
    let rows: Vec<ReportJson<'_>> = reports
        .iter()
        .map(|r| ReportJson {
            k: r.k,
            bleu: r.bleu,
            chrf: r.chrf,
            al: r.al,
            al_ca_ms: r.al_ca_ms,
            oracle_bleu: r.oracle_bleu,
            sentences: r
                .sentences
                .iter()
                .map(|s| SentenceJson {
                    hypothesis: &s.hypothesis,
                    reference: &s.reference,
                    chrf: s.chrf,
                    al: s.al,
                    al_ca_ms: s.al_ca_ms,
                })
                .collect(),
        })
        .collect();
    serde_json::to_value(rows).expect("plain data")
}

/// One row per delay: `k,bleu,chrf,al,al_ca_ms[,oracle_bleu]`.
pub fn curve_csv(reports: &[EvalReport]) -> String {
    let oracle = reports.iter().any(|r| r.oracle_bleu.is_some());
    let mut s = String::from("k,bleu,chrf,al,al_ca_ms");
    if oracle {
        s.push_str(",oracle_bleu");
    }
    s.push('\n');
    for r in reports {
        let _ = write!(
            s,
            "{},{:.4},{:.4},{:.4},{:.4}",
            r.k, r.bleu, r.chrf, r.al, r.al_ca_ms
        );
        if oracle {
            let _ = write!(s, ",{:.4}", r.oracle_bleu.unwrap_or(f64::NAN));
        }
        s.push('\n');
    }
    s
}

#[derive(Serialize)]
struct TraceLine {
    k: usize,
    sentence: usize,
    token: u32,
    g: usize,
    ms: f64,
}

/// `{"k", "sentence", "token", "g", "ms"}` per emitted token.
pub fn traces_jsonl(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    for r in reports {
        for (i, s) in r.sentences.iter().enumerate() {
            for e in &s.trace.emissions {
                let line = TraceLine {
                    k: r.k,
                    sentence: i,
                    token: e.token,
                    g: e.g,
                    ms: e.ms,
                };
                out.push_str(&serde_json::to_string(&line).expect("plain data"));
                out.push('\n');
            }
        }
    }
    out
}

/// BLEU against AL as a line plot with one labelled point per delay.
pub fn curve_svg(reports: &[EvalReport]) -> String {
    let (w, h, pad) = (480.0, 360.0, 48.0);
    let pts: Vec<(f64, f64, usize)> = reports
        .iter()
        .filter(|r| r.al.is_finite() && r.bleu.is_finite())
        .map(|r| (r.al, r.bleu, r.k))
        .collect();
    let max_al = pts.iter().map(|p| p.0).fold(1.0, f64::max) * 1.1;
    let x = |al: f64| pad + al / max_al * (w - 2.0 * pad);
    let y = |b: f64| h - pad - b / 100.0 * (h - 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{b}" stroke="black"/>"#,
        b = h - pad,
        r = w - pad
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">AL (tokens)</text><text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">BLEU</text>"#,
        w / 2.0,
        h - 12.0,
        h / 2.0,
        h / 2.0
    );
    let path: Vec<String> = pts
        .iter()
        .map(|p| format!("{:.2},{:.2}", x(p.0), y(p.1)))
        .collect();
    let _ = writeln!(
        s,
        r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#,
        path.join(" ")
    );
    for (al, b, k) in &pts {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"/><text x="{:.2}" y="{:.2}">k={k}</text>"#,
            x(*al),
            y(*b),
            x(*al) + 5.0,
            y(*b) - 5.0
        );
    }
    s.push_str("</svg>\n");
    s
}

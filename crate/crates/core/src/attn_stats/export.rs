//! Single-head attention matrices as CSV and SVG.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use ndarray::Array2;

use super::StatsError;
use crate::corpus::SegmentedSentence;
use crate::encoder::ForwardTrace;

/// Attention of one head on one sentence, labelled with its tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix {
    /// 0-based.
    pub layer: usize,
    /// 0-based.
    pub head: usize,
    pub tokens: Vec<String>,
    /// Token indices at which a gold word starts.
    pub boundaries: Vec<usize>,
    pub values: Array2<f32>,
}

/// Copies head `(layer, head)` out of a trace of `[CLS] sent [SEP]`.
pub fn export_matrix(
    trace: &ForwardTrace,
    layer: usize,
    head: usize,
    sent: &SegmentedSentence,
    tokens: Vec<String>,
) -> Result<AttentionMatrix, StatsError> {
    if layer >= trace.layers || head >= trace.heads {
        return Err(StatsError::IndexOutOfRange(format!(
            "layer {} head {} in a {}x{} model",
            layer + 1,
            head + 1,
            trace.layers,
            trace.heads
        )));
    }
    let n = trace.n_tokens();
    if tokens.len() != n || sent.len() + 2 != n {
        return Err(StatsError::ShapeMismatch(format!(
            "{} tokens and {} characters for a trace of {n}",
            tokens.len(),
            sent.len()
        )));
    }
    Ok(AttentionMatrix {
        layer,
        head,
        tokens,
        boundaries: sent.spans().iter().map(|&(s, _)| s + 1).collect(),
        values: trace.attention(layer, head).to_owned(),
    })
}

impl AttentionMatrix {
    /// A `# boundaries:` line, a token header, then one row per source token.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), StatsError> {
        let b: Vec<String> = self.boundaries.iter().map(|x| x.to_string()).collect();
        writeln!(w, "# layer: {} head: {}", self.layer + 1, self.head + 1)?;
        writeln!(w, "# boundaries: {}", b.join(","))?;
        let mut out = csv::Writer::from_writer(w);
        out.write_record(&self.tokens)?;
        for row in self.values.rows() {
            out.write_record(row.iter().map(|v| v.to_string()))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(mut r: R) -> Result<AttentionMatrix, StatsError> {
        let mut line = String::new();
        let (mut layer, mut head, mut boundaries) = (None, None, None);
        while r.fill_buf()?.first() == Some(&b'#') {
            line.clear();
            r.read_line(&mut line)?;
            let body = line.trim_start_matches('#').trim();
            if let Some(rest) = body.strip_prefix("boundaries:") {
                let rest = rest.trim();
                let parsed: Result<Vec<usize>, _> =
                    if rest.is_empty() { Ok(Vec::new()) } else { rest.split(',').map(|x| x.trim().parse()).collect() };
                boundaries = Some(parsed.map_err(|e| StatsError::Format(format!("boundaries: {e}")))?);
            } else if let Some(rest) = body.strip_prefix("layer:") {
                let mut it = rest.split_whitespace();
                let l = it.next().and_then(|x| x.parse::<usize>().ok());
                let h = match (it.next(), it.next()) {
                    (Some("head:"), Some(h)) => h.parse::<usize>().ok(),
                    _ => None,
                };
                match (l, h) {
                    (Some(l), Some(h)) if l > 0 && h > 0 => {
                        layer = Some(l - 1);
                        head = Some(h - 1);
                    }
                    _ => return Err(StatsError::Format(format!("bad header line {line:?}"))),
                }
            }
        }
        let boundaries = boundaries.ok_or_else(|| StatsError::Format("missing boundaries line".into()))?;
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let tokens: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
        let n = tokens.len();
        let mut values = Vec::with_capacity(n * n);
        for rec in rdr.records() {
            let rec = rec?;
            for field in rec.iter() {
                values.push(field.parse::<f32>().map_err(|e| StatsError::Format(format!("{field:?}: {e}")))?);
            }
        }
        let values = Array2::from_shape_vec((values.len() / n.max(1), n), values)
            .map_err(|e| StatsError::Format(e.to_string()))?;
        if values.nrows() != n {
            return Err(StatsError::Format(format!("{} rows for {n} tokens", values.nrows())));
        }
        Ok(AttentionMatrix { layer: layer.unwrap_or(0), head: head.unwrap_or(0), tokens, boundaries, values })
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Heat map with gold word boundaries drawn as lines.
pub fn render_svg(m: &AttentionMatrix, cell: usize) -> String {
    let n = m.tokens.len();
    let margin = 3 * cell;
    let size = margin + n * cell;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" font-size="{}">"#,
        cell * 3 / 4
    );
    for (i, tok) in m.tokens.iter().enumerate() {
        let c = margin + i * cell + cell / 2;
        let t = escape(tok);
        let _ = writeln!(s, r#"<text x="{c}" y="{}" text-anchor="middle">{t}</text>"#, margin - cell / 2);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{t}</text>"#, margin - cell / 4, c + cell / 4);
    }
    for ((i, j), &v) in m.values.indexed_iter() {
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="navy" fill-opacity="{:.4}"/>"#,
            margin + j * cell,
            margin + i * cell,
            v.clamp(0.0, 1.0)
        );
    }
    for &b in &m.boundaries {
        let p = margin + b * cell;
        let _ = writeln!(s, r#"<line x1="{p}" y1="{margin}" x2="{p}" y2="{size}" stroke="red"/>"#);
        let _ = writeln!(s, r#"<line x1="{margin}" y1="{p}" x2="{size}" y2="{p}" stroke="red"/>"#);
    }
    s.push_str("</svg>\n");
    s
}

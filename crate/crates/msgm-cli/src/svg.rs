//! Dependency-free SVG heatmaps for adjacency matrices.

use msgm_core::tensor::Tensor;

const CELL: f64 = 12.0;
const MARGIN: f64 = 64.0;

fn color(v: f64, max: f64) -> String {
    // white → deep blue ramp
    let t = if max > 0.0 { (v / max).clamp(0.0, 1.0) } else { 0.0 };
    let r = (255.0 * (1.0 - t * 0.85)) as u8;
    let g = (255.0 * (1.0 - t * 0.65)) as u8;
    let b = (255.0 * (1.0 - t * 0.15)) as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Render a c×c matrix with channel labels on both axes.
pub fn adjacency_heatmap(matrix: &Tensor, labels: &[String], title: &str) -> String {
    let c = matrix.shape()[0];
    let size = MARGIN + c as f64 * CELL + 16.0;
    let max = matrix.data().iter().cloned().fold(0.0, f64::max);
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size:.0}\" height=\"{size:.0}\" viewBox=\"0 0 {size:.0} {size:.0}\">\n"
    ));
    out.push_str(&format!(
        "  <title>{}</title>\n  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
        escape(title)
    ));
    out.push_str(&format!(
        "  <text x=\"{MARGIN}\" y=\"16\" font-family=\"monospace\" font-size=\"12\">{}</text>\n",
        escape(title)
    ));
    for i in 0..c {
        for j in 0..c {
            let v = matrix.at(&[i, j]);
            let x = MARGIN + j as f64 * CELL;
            let y = MARGIN + i as f64 * CELL;
            out.push_str(&format!(
                "  <rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"{}\"><title>{} - {}: {v:.4}</title></rect>\n",
                color(v, max),
                escape(&labels[i]),
                escape(&labels[j]),
            ));
        }
    }
    for (i, label) in labels.iter().enumerate() {
        let y = MARGIN + i as f64 * CELL + CELL * 0.75;
        out.push_str(&format!(
            "  <text x=\"4\" y=\"{y:.1}\" font-family=\"monospace\" font-size=\"7\">{}</text>\n",
            escape(label)
        ));
        let x = MARGIN + i as f64 * CELL + CELL * 0.5;
        out.push_str(&format!(
            "  <text x=\"{x:.1}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"7\" transform=\"rotate(-90 {x:.1} {:.1})\">{}</text>\n",
            MARGIN - 6.0,
            MARGIN - 6.0,
            escape(label)
        ));
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Minimal well-formedness check: every opened tag closes, no stray '<'.
    pub fn xml_balanced(doc: &str) -> bool {
        let mut stack: Vec<String> = Vec::new();
        let mut rest = doc;
        while let Some(start) = rest.find('<') {
            rest = &rest[start + 1..];
            let end = match rest.find('>') {
                Some(e) => e,
                None => return false,
            };
            let tag = &rest[..end];
            rest = &rest[end + 1..];
            if let Some(name) = tag.strip_prefix('/') {
                match stack.pop() {
                    Some(open) if open == name => {}
                    _ => return false,
                }
            } else if tag.ends_with('/') || tag.starts_with('?') || tag.starts_with('!') {
                // self-closing or prolog
            } else {
                let name: String =
                    tag.split_whitespace().next().unwrap_or("").to_string();
                stack.push(name);
            }
        }
        stack.is_empty()
    }

    #[test]
    fn heatmap_is_balanced_xml() {
        let m = Tensor::new(vec![2, 2], vec![0.0, 0.7, 0.7, 0.0]);
        let labels = vec!["C<3".to_string(), "F&Z".to_string()];
        let svg = adjacency_heatmap(&m, &labels, "test & <demo>");
        assert!(svg.starts_with("<svg"));
        assert!(xml_balanced(&svg), "unbalanced svg:\n{svg}");
    }
}

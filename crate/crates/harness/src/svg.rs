//! Minimal static SVG charts: severity line curves and benchmark bars.

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const PALETTE: [&str; 8] = [
    "#4363d8", "#e6194b", "#3cb44b", "#f58231", "#911eb4", "#46f0f0", "#808000", "#000075",
];

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_B: f64 = 50.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_R: f64 = 150.0;

fn y_of(v: f64, vmax: f64) -> f64 {
    let span = H - MARGIN_T - MARGIN_B;
    H - MARGIN_B - (v / vmax) * span
}

/// Line chart: one polyline per series over shared categorical x labels.
pub fn line_chart(
    title: &str,
    x_labels: &[String],
    series: &[(String, Vec<f64>)],
    y_label: &str,
) -> String {
    let vmax = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-9)
        * 1.15;
    let n = x_labels.len().max(1);
    let x_of = |i: usize| -> f64 {
        let span = W - MARGIN_L - MARGIN_R;
        MARGIN_L + if n == 1 { span / 2.0 } else { span * i as f64 / (n - 1) as f64 }
    };
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    s.push_str(&format!(
        "  <text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        esc(title)
    ));
    // Axes.
    s.push_str(&format!(
        "  <line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MARGIN_B
    ));
    s.push_str(&format!(
        "  <line x1=\"{MARGIN_L}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MARGIN_B,
        W - MARGIN_R,
        H - MARGIN_B
    ));
    // Y ticks.
    for t in 0..=4 {
        let v = vmax * t as f64 / 4.0;
        let y = y_of(v, vmax);
        s.push_str(&format!(
            "  <line x1=\"{}\" y1=\"{y}\" x2=\"{MARGIN_L}\" y2=\"{y}\" stroke=\"black\"/>\n",
            MARGIN_L - 4.0
        ));
        s.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{v:.2}</text>\n",
            MARGIN_L - 8.0,
            y + 4.0
        ));
    }
    s.push_str(&format!(
        "  <text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        H / 2.0,
        H / 2.0,
        esc(y_label)
    ));
    // X labels.
    for (i, label) in x_labels.iter().enumerate() {
        s.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
            x_of(i),
            H - MARGIN_B + 20.0,
            esc(label)
        ));
    }
    // Series.
    for (si, (name, values)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.2},{:.2}", x_of(i), y_of(v, vmax)))
            .collect();
        s.push_str(&format!(
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        for (i, &v) in values.iter().enumerate() {
            s.push_str(&format!(
                "  <circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                x_of(i),
                y_of(v, vmax)
            ));
        }
        let ly = MARGIN_T + 18.0 * si as f64;
        s.push_str(&format!(
            "  <rect x=\"{}\" y=\"{}\" width=\"12\" height=\"12\" fill=\"{color}\"/>\n",
            W - MARGIN_R + 10.0,
            ly
        ));
        s.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
            W - MARGIN_R + 28.0,
            ly + 10.0,
            esc(name)
        ));
    }
    s.push_str("</svg>\n");
    s
}

/// Grouped bar chart: one bar per (label, value).
pub fn bar_chart(title: &str, bars: &[(String, f64)], y_label: &str) -> String {
    let vmax = bars.iter().map(|(_, v)| *v).fold(0.0f64, f64::max).max(1e-9) * 1.15;
    let n = bars.len().max(1);
    let span = W - MARGIN_L - MARGIN_R;
    let slot = span / n as f64;
    let bw = (slot * 0.6).min(60.0);
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    s.push_str(&format!(
        "  <text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        esc(title)
    ));
    s.push_str(&format!(
        "  <line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MARGIN_B
    ));
    s.push_str(&format!(
        "  <line x1=\"{MARGIN_L}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MARGIN_B,
        W - MARGIN_R,
        H - MARGIN_B
    ));
    for t in 0..=4 {
        let v = vmax * t as f64 / 4.0;
        let y = y_of(v, vmax);
        s.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{v:.2}</text>\n",
            MARGIN_L - 8.0,
            y + 4.0
        ));
    }
    s.push_str(&format!(
        "  <text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        H / 2.0,
        H / 2.0,
        esc(y_label)
    ));
    for (i, (label, v)) in bars.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let x = MARGIN_L + slot * i as f64 + (slot - bw) / 2.0;
        let y = y_of(*v, vmax);
        s.push_str(&format!(
            "  <rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{bw:.2}\" height=\"{:.2}\" fill=\"{color}\"/>\n",
            (H - MARGIN_B) - y
        ));
        s.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            x + bw / 2.0,
            H - MARGIN_B + 16.0,
            esc(label)
        ));
        s.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{v:.3}</text>\n",
            x + bw / 2.0,
            y - 4.0
        ));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Tiny well-formedness check: tags balance and attributes are quoted.
    pub fn is_well_formed_xml(text: &str) -> bool {
        let mut stack: Vec<String> = Vec::new();
        let mut rest = text.trim();
        if rest.starts_with("<?xml") {
            match rest.find("?>") {
                Some(i) => rest = &rest[i + 2..],
                None => return false,
            }
        }
        let mut chars = rest.char_indices().peekable();
        while let Some((i, c)) = chars.next() {
            if c != '<' {
                continue;
            }
            let close = match rest[i..].find('>') {
                Some(j) => i + j,
                None => return false,
            };
            let inner = &rest[i + 1..close];
            if let Some(name) = inner.strip_prefix('/') {
                match stack.pop() {
                    Some(open) if open == name.trim() => {}
                    _ => return false,
                }
            } else if !inner.ends_with('/') {
                let name = inner.split_whitespace().next().unwrap_or("");
                if name.is_empty() {
                    return false;
                }
                stack.push(name.to_string());
            }
            while let Some(&(j, _)) = chars.peek() {
                if j <= close {
                    chars.next();
                } else {
                    break;
                }
            }
        }
        stack.is_empty()
    }

    #[test]
    fn charts_parse_as_xml() {
        let line = line_chart(
            "severity & trends",
            &["VL".into(), "L".into(), "M".into(), "H".into()],
            &[
                ("A_ctc".into(), vec![0.2, 0.3, 0.5, 0.8]),
                ("D_qformer".into(), vec![0.1, 0.15, 0.2, 0.3]),
            ],
            "WER",
        );
        assert!(is_well_formed_xml(&line), "{line}");
        let bar = bar_chart(
            "benchmark <micro>",
            &[("A_ctc".into(), 0.5), ("B_seq2seq".into(), 0.4)],
            "WER",
        );
        assert!(is_well_formed_xml(&bar), "{bar}");
    }

    #[test]
    fn single_point_series_does_not_divide_by_zero() {
        let svg = line_chart("one", &["H".into()], &[("a".into(), vec![0.4])], "WER");
        assert!(svg.contains("circle"));
        assert!(is_well_formed_xml(&svg));
    }
}

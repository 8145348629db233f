use std::fmt::Write as _;

use super::roc::RocCurve;

pub struct SvgCurve<'a> {
    pub label: &'a str,
    pub curve: &'a RocCurve,
    pub dashed: bool,
}

const W: f64 = 420.0;
const H: f64 = 420.0;
const LEFT: f64 = 56.0;
const TOP: f64 = 36.0;
const SIZE: f64 = 320.0;
const COLORS: [&str; 4] = ["#1f4e9c", "#c0392b", "#2e8b57", "#8e44ad"];

fn xy(fpr: f64, tpr: f64) -> (f64, f64) {
    (LEFT + fpr * SIZE, TOP + (1.0 - tpr) * SIZE)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Standalone SVG plot of one or more ROC curves for a class (FPR on x,
/// TPR on y).
pub fn roc_svg(title: &str, curves: &[SvgCurve<'_>]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, LEFT + SIZE / 2.0, escape(title));
    let _ = writeln!(s, r##"<rect x="{LEFT}" y="{TOP}" width="{SIZE}" height="{SIZE}" fill="none" stroke="#333"/>"##);
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let (x, y) = xy(v, v);
        let _ = writeln!(s, r##"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="#333"/>"##, TOP + SIZE, TOP + SIZE + 4.0);
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{v:.1}</text>"#, TOP + SIZE + 17.0);
        let _ = writeln!(s, r##"<line x1="{}" y1="{y}" x2="{LEFT}" y2="{y}" stroke="#333"/>"##, LEFT - 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.1}</text>"#, LEFT - 7.0, y + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">False positive rate</text>"#, LEFT + SIZE / 2.0, TOP + SIZE + 34.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">True positive rate</text>"#,
        TOP + SIZE / 2.0,
        TOP + SIZE / 2.0
    );
    let (x0, y0) = xy(0.0, 0.0);
    let (x1, y1) = xy(1.0, 1.0);
    let _ = writeln!(s, r##"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y1}" stroke="#bbb" stroke-dasharray="2 3"/>"##);
    for (i, c) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = c
            .curve
            .points
            .iter()
            .map(|p| {
                let (x, y) = xy(p.fpr, p.tpr);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let dash = if c.dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#, pts.join(" "));
        let ly = TOP + SIZE - 14.0 - 18.0 * (curves.len() - 1 - i) as f64;
        let lx = LEFT + SIZE - 170.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"{dash}/>"#, lx + 24.0);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">{} (AUC {:.3})</text>"#,
            lx + 30.0,
            ly + 4.0,
            escape(c.label),
            c.curve.auc
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::roc_curve;

    #[test]
    fn dashed_and_solid_overlay() {
        let a = roc_curve(&[0.9, 0.2, 0.6, 0.4], &[true, false, true, false]).unwrap();
        let b = roc_curve(&[0.9, 0.5, 0.4, 0.6], &[true, false, true, false]).unwrap();
        let svg = roc_svg(
            "Benign <one-vs-rest>",
            &[SvgCurve { label: "original", curve: &b, dashed: true }, SvgCurve { label: "preprocessed", curve: &a, dashed: false }],
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches(r#"stroke-dasharray="6 4""#).count(), 2);
        assert!(svg.contains("&lt;one-vs-rest&gt;"));
        assert!(svg.contains("preprocessed (AUC 1.000)"));
    }
}

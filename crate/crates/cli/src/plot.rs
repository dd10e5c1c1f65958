//! Minimal SVG rendering of a precision/recall curve.

use std::fmt::Write as _;

const SIZE: f64 = 400.0;
const MARGIN: f64 = 50.0;

/// (recall, precision) pairs in file order.
pub fn parse_curve(text: &str) -> Result<Vec<(f64, f64)>, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty file")?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let find = |name: &str| {
        cols.iter()
            .position(|c| *c == name)
            .ok_or_else(|| format!("missing column {name}"))
    };
    let (pi, ri) = (find("precision")?, find("recall")?);
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let get = |i: usize| -> Result<f64, String> {
            f.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| format!("line {}: bad value", n + 2))
        };
        out.push((get(ri)?, get(pi)?));
    }
    if out.is_empty() {
        return Err("no data rows".into());
    }
    Ok(out)
}

fn sx(v: f64) -> f64 {
    MARGIN + v.clamp(0.0, 1.0) * SIZE
}

fn sy(v: f64) -> f64 {
    MARGIN + (1.0 - v.clamp(0.0, 1.0)) * SIZE
}

pub fn render_svg(points: &[(f64, f64)]) -> String {
    let full = SIZE + 2.0 * MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{full}" height="{full}" viewBox="0 0 {full} {full}">"#
    );
    let _ = writeln!(s, r#"<rect width="{full}" height="{full}" fill="white"/>"#);
    for i in 0..=10 {
        let v = i as f64 / 10.0;
        let _ = writeln!(
            s,
            r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#ddd"/>"##,
            sx(v),
            sy(0.0),
            sx(v),
            sy(1.0)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#ddd"/>"##,
            sx(0.0),
            sy(v),
            sx(1.0),
            sy(v)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{v:.1}</text>"#,
            sx(v),
            sy(0.0) + 15.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{v:.1}</text>"#,
            sx(0.0) - 5.0,
            sy(v) + 3.0
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#
    );
    let path: Vec<String> = points
        .iter()
        .map(|&(r, p)| format!("{:.2},{:.2}", sx(r), sy(p)))
        .collect();
    let _ = writeln!(
        s,
        r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#,
        path.join(" ")
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">Recall</text>"#,
        MARGIN + SIZE / 2.0,
        full - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{:.1}" font-size="12" text-anchor="middle" transform="rotate(-90 15 {:.1})">Precision</text>"#,
        MARGIN + SIZE / 2.0,
        MARGIN + SIZE / 2.0
    );
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_renders() {
        let pts = parse_curve("threshold,precision,recall\n0,0.5,1.0\n255,1.0,0.0\n").unwrap();
        assert_eq!(pts, vec![(1.0, 0.5), (0.0, 1.0)]);
        let svg = render_svg(&pts);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("450.00,250.00 50.00,50.00"));
    }

    #[test]
    fn rejects_missing_column() {
        assert!(parse_curve("threshold,precision\n0,1\n").is_err());
    }
}

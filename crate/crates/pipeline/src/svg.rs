//! Minimal standalone SVG charts for the report CSVs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    /// Comma-separated, first line is the header; no quoting.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<String> = lines
            .next()
            .ok_or("empty CSV")?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let row: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
            if row.len() != header.len() {
                return Err(format!("row {}: {} fields, header has {}", i + 2, row.len(), header.len()));
            }
            rows.push(row);
        }
        Ok(Self { header, rows })
    }

    fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(title: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title));
    out
}

/// One polyline through `(x, y)` in order.
pub fn line_chart(points: &[(f64, f64)], title: &str, x_label: &str, y_label: &str) -> Result<String, String> {
    if points.is_empty() {
        return Err("no numeric points to plot".into());
    }
    let span = |v: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, hi + 0.5)
        }
    };
    let (x0, x1) = span(&mut points.iter().map(|p| p.0));
    let (y0, y1) = span(&mut points.iter().map(|p| p.1));
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut out = open(title);
    let _ = writeln!(
        out,
        r#"<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    let _ = writeln!(out, r#"<text x="{PAD}" y="{}" text-anchor="middle">{x0:.4}</text>"#, H - PAD + 14.0);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{x1:.4}</text>"#, W - PAD, H - PAD + 14.0);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{y0:.4}</text>"#, PAD - 4.0, H - PAD);
    let _ = writeln!(out, r#"<text x="{}" y="{PAD}" text-anchor="end">{y1:.4}</text>"#, PAD - 4.0);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 10.0, escape(x_label));
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    let pts: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
    let _ = writeln!(out, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, pts.join(" "));
    out.push_str("</svg>\n");
    Ok(out)
}

/// Diverging blue–white–red cells, symmetric around 0.
pub fn heatmap(rows: &[String], cols: &[String], values: &[Vec<f64>], title: &str) -> Result<String, String> {
    if rows.is_empty() || cols.is_empty() {
        return Err("empty heatmap".into());
    }
    let scale = values
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    let cw = (W - 2.0 * PAD) / cols.len() as f64;
    let ch = (H - 2.0 * PAD) / rows.len() as f64;
    let mut out = open(title);
    for (i, row) in values.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let t = (v / scale).clamp(-1.0, 1.0);
            let (r, g, b) = if t >= 0.0 {
                (255.0, 255.0 * (1.0 - t), 255.0 * (1.0 - t))
            } else {
                (255.0 * (1.0 + t), 255.0 * (1.0 + t), 255.0)
            };
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="rgb({},{},{})"><title>{} / {}: {v}</title></rect>"#,
                PAD + j as f64 * cw,
                PAD + i as f64 * ch,
                cw,
                ch,
                r as u8,
                g as u8,
                b as u8,
                escape(&rows[i]),
                escape(&cols[j])
            );
        }
    }
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
            PAD - 4.0,
            PAD + (i as f64 + 0.5) * ch + 4.0,
            escape(r)
        );
    }
    for (j, c) in cols.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            PAD + (j as f64 + 0.5) * cw,
            PAD - 6.0,
            escape(c)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">scale ±{scale:.4}</text>"#,
        W / 2.0,
        H - 14.0
    );
    out.push_str("</svg>\n");
    Ok(out)
}

fn num(s: &str, what: &str) -> Result<f64, String> {
    s.parse().map_err(|_| format!("{what}: {s:?} is not a number"))
}

/// Chooses the chart from the header: `i,j,value` and ablation tables
/// become heatmaps, anything else a line of the last numeric column against
/// the first (rows without both values are skipped).
pub fn render(t: &Table, title: &str) -> Result<String, String> {
    if t.header == ["i", "j", "value"] {
        let mut cells = BTreeMap::new();
        let mut n = 0;
        for r in &t.rows {
            let i = num(&r[0], "i")? as usize;
            let j = num(&r[1], "j")? as usize;
            n = n.max(i).max(j);
            cells.insert((i, j), num(&r[2], "value")?);
        }
        let labels: Vec<String> = (1..=n).map(|i| i.to_string()).collect();
        let values: Vec<Vec<f64>> = (1..=n)
            .map(|i| (1..=n).map(|j| cells.get(&(i, j)).copied().unwrap_or(0.0)).collect())
            .collect();
        return heatmap(&labels, &labels, &values, title);
    }
    if let (Some(rc), Some(kc), Some(dc)) = (t.column("region"), t.column("reward"), t.column("delta")) {
        let mut regions: Vec<String> = Vec::new();
        let mut kinds: Vec<String> = Vec::new();
        let mut cells = BTreeMap::new();
        for r in t.rows.iter().filter(|r| r[rc] != "baseline") {
            if !regions.contains(&r[rc]) {
                regions.push(r[rc].clone());
            }
            if !kinds.contains(&r[kc]) {
                kinds.push(r[kc].clone());
            }
            cells.insert((r[rc].clone(), r[kc].clone()), num(&r[dc], "delta")?);
        }
        let values: Vec<Vec<f64>> = regions
            .iter()
            .map(|g| kinds.iter().map(|k| cells.get(&(g.clone(), k.clone())).copied().unwrap_or(0.0)).collect())
            .collect();
        return heatmap(&regions, &kinds, &values, &format!("{title} (reward delta)"));
    }
    if t.header.len() < 2 {
        return Err("need at least two columns".into());
    }
    let last = t.header.len() - 1;
    let points: Vec<(f64, f64)> = t
        .rows
        .iter()
        .filter_map(|r| Some((r[0].parse().ok()?, r[last].parse().ok()?)))
        .collect();
    line_chart(&points, title, &t.header[0], &t.header[last])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_csv_gives_one_polyline_with_a_point_per_layer() {
        let csv = "layer,score\n1,0.1\n2,0.3\n3,0.2\n4,0.5\n";
        let doc = render(&Table::parse(csv).unwrap(), "sweep").unwrap();
        assert_eq!(doc.matches("<polyline").count(), 1);
        let pts = doc.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        assert_eq!(pts.split(' ').count(), 4);
    }

    #[test]
    fn similarity_csv_gives_a_cell_per_entry() {
        let mut csv = String::from("i,j,value\n");
        for i in 1..=3 {
            for j in 1..=3 {
                csv += &format!("{i},{j},{}\n", if i == j { 1.0 } else { -0.5 });
            }
        }
        let doc = render(&Table::parse(&csv).unwrap(), "sim").unwrap();
        assert_eq!(doc.matches("<rect x=").count(), 9);
        assert!(doc.contains("rgb(255,0,0)"));
    }

    #[test]
    fn ragged_or_empty_input_is_rejected() {
        assert!(Table::parse("").is_err());
        assert!(Table::parse("a,b\n1\n").is_err());
        assert!(render(&Table::parse("a,b\nx,y\n").unwrap(), "t").is_err());
    }
}

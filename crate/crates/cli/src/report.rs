//! Static SVG curves from a results CSV: one file per condition, with a
//! bAcc panel and a fraction-of-positives-deferred panel against the
//! deferral rate.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use deferbench::sweep::RESULT_HEADER;
use deferbench::{Error, Result};

pub const BACC_RANGE: (f64, f64) = (0.4, 1.0);
pub const RATE_RANGE: (f64, f64) = (0.0, 1.0);

const METHOD_COLOURS: [(&str, &str); 7] = [
    ("softmax", "#1f77b4"),
    ("ensemble", "#ff7f0e"),
    ("swag", "#2ca02c"),
    ("mc_dropout", "#d62728"),
    ("bnn", "#9467bd"),
    ("learned_one_stage", "#8c564b"),
    ("learned_two_stage", "#e377c2"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub condition: String,
    pub level: u8,
    pub seed: u64,
    pub param_kind: String,
    pub deferral_rate: Option<f64>,
    pub bacc: Option<f64>,
    pub frac_pos_deferred: Option<f64>,
    pub status: String,
}

fn parse_opt(value: &str, row: usize, column: &str) -> Result<Option<f64>> {
    if value.is_empty() {
        return Ok(None);
    }
    value
        .parse()
        .map(Some)
        .map_err(|_| Error::Parse { row, reason: format!("{column} '{value}' is not a number") })
}

/// Parses a results CSV. Rows are numbered from 1 for the first data row.
pub fn parse_results<R: std::io::Read>(input: R) -> Result<Vec<ReportRow>> {
    let mut reader = csv::Reader::from_reader(input);
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse { row: 0, reason: e.to_string() })?
        .clone();
    if headers.iter().ne(RESULT_HEADER.iter().copied()) {
        return Err(Error::Parse { row: 0, reason: format!("unexpected header {:?}", headers.iter().collect::<Vec<_>>()) });
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let r = record.map_err(|e| Error::Parse { row, reason: e.to_string() })?;
        let get = |k: usize| r.get(k).unwrap_or("");
        let status = get(13).to_string();
        if !["ok", "absent", "failed"].contains(&status.as_str()) {
            return Err(Error::Parse { row, reason: format!("unknown status '{status}'") });
        }
        rows.push(ReportRow {
            method: get(0).to_string(),
            condition: get(1).to_string(),
            level: get(2)
                .parse()
                .map_err(|_| Error::Parse { row, reason: format!("level '{}' is not an integer", get(2)) })?,
            seed: get(3)
                .parse()
                .map_err(|_| Error::Parse { row, reason: format!("seed '{}' is not an integer", get(3)) })?,
            param_kind: get(4).to_string(),
            deferral_rate: parse_opt(get(6), row, "deferral_rate")?,
            bacc: parse_opt(get(7), row, "bacc")?,
            frac_pos_deferred: parse_opt(get(12), row, "frac_pos_deferred")?,
            status,
        });
    }
    if rows.is_empty() {
        return Err(Error::Empty("results CSV has no rows to report".into()));
    }
    Ok(rows)
}

fn colour(method: &str) -> &'static str {
    METHOD_COLOURS
        .iter()
        .find(|(m, _)| *m == method)
        .map_or("#7f7f7f", |(_, c)| c)
}

struct Panel {
    left: f64,
    top: f64,
    width: f64,
    height: f64,
    y_range: (f64, f64),
}

impl Panel {
    fn x(&self, v: f64) -> f64 {
        self.left + (v.clamp(RATE_RANGE.0, RATE_RANGE.1) - RATE_RANGE.0) / (RATE_RANGE.1 - RATE_RANGE.0) * self.width
    }

    fn y(&self, v: f64) -> f64 {
        let (lo, hi) = self.y_range;
        self.top + self.height - (v.clamp(lo, hi) - lo) / (hi - lo) * self.height
    }

    fn frame(&self, svg: &mut String, title: &str, y_label: &str) {
        let (lo, hi) = self.y_range;
        let _ = writeln!(
            svg,
            r#"<g class="panel" data-x-min="{}" data-x-max="{}" data-y-min="{lo}" data-y-max="{hi}">"#,
            RATE_RANGE.0, RATE_RANGE.1
        );
        let _ = writeln!(
            svg,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#333"/>"##,
            self.left, self.top, self.width, self.height
        );
        for k in 0..=5 {
            let t = k as f64 / 5.0;
            let xv = RATE_RANGE.0 + t * (RATE_RANGE.1 - RATE_RANGE.0);
            let yv = lo + t * (hi - lo);
            let _ = writeln!(
                svg,
                r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">{xv:.1}</text>"#,
                self.x(xv),
                self.top + self.height + 16.0
            );
            let _ = writeln!(
                svg,
                r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{yv:.1}</text>"#,
                self.left - 6.0,
                self.y(yv) + 4.0
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="13" text-anchor="middle">{title}</text>"#,
            self.left + self.width / 2.0,
            self.top - 10.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">deferral rate</text>"#,
            self.left + self.width / 2.0,
            self.top + self.height + 34.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle" transform="rotate(-90 {:.2} {:.2})">{y_label}</text>"#,
            self.left - 36.0,
            self.top + self.height / 2.0,
            self.left - 36.0,
            self.top + self.height / 2.0
        );
    }

    fn curve(&self, svg: &mut String, method: &str, seed: u64, points: &[(f64, f64)]) {
        if points.is_empty() {
            return;
        }
        let coords: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", self.x(x), self.y(y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="curve" data-method="{method}" data-seed="{seed}" fill="none" stroke="{}" stroke-width="1.2" points="{}"/>"#,
            colour(method),
            coords.join(" ")
        );
        if points.len() == 1 || method.starts_with("learned") {
            for &(x, y) in points {
                let _ = writeln!(
                    svg,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}"/>"#,
                    self.x(x),
                    self.y(y),
                    colour(method)
                );
            }
        }
    }
}

/// SVG for one condition. Rows that are absent or failed are omitted, so
/// curves stop where the remainder stops being evaluable.
pub fn render_condition(title: &str, rows: &[&ReportRow]) -> String {
    let bacc_panel = Panel { left: 70.0, top: 50.0, width: 380.0, height: 300.0, y_range: BACC_RANGE };
    let frac_panel = Panel { left: 560.0, top: 50.0, width: 380.0, height: 300.0, y_range: (0.0, 1.0) };
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="1000" height="440" viewBox="0 0 1000 440">"#
    );
    let _ = writeln!(svg, r#"<title>{title}</title>"#);
    let _ = writeln!(svg, r#"<rect width="1000" height="440" fill="white"/>"#);

    let mut curves: BTreeMap<(usize, String, u64), Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        let order = METHOD_COLOURS.iter().position(|(m, _)| *m == r.method).unwrap_or(usize::MAX);
        curves.entry((order, r.method.clone(), r.seed)).or_default().push(r);
    }
    bacc_panel.frame(&mut svg, &format!("{title}: bAcc of non-deferred"), "bAcc");
    for ((_, method, seed), pts) in &curves {
        let mut xy: Vec<(f64, f64)> = pts
            .iter()
            .filter(|r| r.status == "ok")
            .filter_map(|r| Some((r.deferral_rate?, r.bacc?)))
            .collect();
        if method.starts_with("learned") {
            xy.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
        bacc_panel.curve(&mut svg, method, *seed, &xy);
    }
    svg.push_str("</g>\n");
    frac_panel.frame(&mut svg, &format!("{title}: positives deferred"), "fraction of positives deferred");
    for ((_, method, seed), pts) in &curves {
        let mut xy: Vec<(f64, f64)> = pts
            .iter()
            .filter(|r| r.status == "ok")
            .filter_map(|r| Some((r.deferral_rate?, r.frac_pos_deferred?)))
            .collect();
        if method.starts_with("learned") {
            xy.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
        frac_panel.curve(&mut svg, method, *seed, &xy);
    }
    svg.push_str("</g>\n");

    let mut methods: Vec<&String> = curves.keys().map(|k| &k.1).collect();
    methods.dedup();
    for (i, m) in methods.iter().enumerate() {
        let x = 70.0 + 125.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{x:.2}" y="412" width="12" height="12" fill="{}"/><text x="{:.2}" y="422" font-size="11">{m}</text>"#,
            colour(m),
            x + 16.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `<condition>_<level>.svg` for every condition in the CSV and
/// returns the paths in condition order.
pub fn write_report(results_csv: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let rows = parse_results(fs::File::open(results_csv)?)?;
    let mut by_condition: BTreeMap<(String, u8), Vec<&ReportRow>> = BTreeMap::new();
    for r in &rows {
        by_condition.entry((r.condition.clone(), r.level)).or_default().push(r);
    }
    let mut written = Vec::new();
    for ((condition, level), rs) in &by_condition {
        let title = if condition == "id" { "id".to_string() } else { format!("{condition} level {level}") };
        let path = out_dir.join(format!("{condition}_{level}.svg"));
        fs::write(&path, render_condition(&title, rs))?;
        written.push(path);
    }
    Ok(written)
}

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::experiment::{ExperimentPlan, Method};
use super::ShapeName;
use crate::error::{Error, Result};

/// Distance after one step of one policy run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    pub shape: ShapeName,
    pub variant: usize,
    pub repeat: usize,
    pub seed: u64,
    /// Index of the keyframe the step aimed for (1-based; 0 marks a cell
    /// that failed before any step).
    pub step: usize,
    pub distance: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotRow {
    pub method: Method,
    pub variant: usize,
    pub repeat: usize,
    pub seed: u64,
    pub crossings: usize,
    pub final_distance: Option<f64>,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub plan: ExperimentPlan,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    pub knot: Vec<KnotRow>,
    pub meta: RunMeta,
}

/// Mean ± sample standard deviation of the distances at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: Method,
    pub shape: ShapeName,
    pub step: usize,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    /// Runs whose last step produced a distance.
    pub n: usize,
    pub mean_final: f64,
    pub std_final: f64,
    pub failed_steps: usize,
    pub knot_successes: usize,
    pub knot_trials: usize,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n;
    let s = if v.len() > 1 { (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (m, s)
}

impl ExperimentReport {
    pub fn aggregates(&self) -> Vec<Aggregate> {
        aggregates_of(&self.rows)
    }

    /// Last-step distance of every run, keyed by (method, shape, variant, repeat).
    pub fn final_distances(&self) -> BTreeMap<(Method, ShapeName, usize, usize), Option<f64>> {
        let mut last: BTreeMap<_, (usize, Option<f64>)> = BTreeMap::new();
        for r in &self.rows {
            let e = last.entry((r.method, r.shape, r.variant, r.repeat)).or_insert((0, None));
            if r.step >= e.0 {
                *e = (r.step, r.distance);
            }
        }
        last.into_iter().map(|(k, v)| (k, v.1)).collect()
    }

    /// Mean final-step distance of `method` over `shapes` (all shapes when empty).
    pub fn mean_final(&self, method: Method, shapes: &[ShapeName]) -> f64 {
        let v: Vec<f64> = self
            .final_distances()
            .into_iter()
            .filter(|((m, s, _, _), _)| *m == method && (shapes.is_empty() || shapes.contains(s)))
            .filter_map(|(_, d)| d)
            .collect();
        mean_std(&v).0
    }

    /// Per-method summaries ordered by mean final-step distance, best first.
    pub fn summaries(&self) -> Vec<MethodSummary> {
        let finals = self.final_distances();
        let mut methods: Vec<Method> = self.rows.iter().map(|r| r.method).collect();
        methods.sort();
        methods.dedup();
        let mut out: Vec<MethodSummary> = methods
            .into_iter()
            .map(|m| {
                let v: Vec<f64> = finals.iter().filter(|(k, _)| k.0 == m).filter_map(|(_, d)| *d).collect();
                let (mean_final, std_final) = mean_std(&v);
                let knots: Vec<&KnotRow> = self.knot.iter().filter(|k| k.method == m).collect();
                MethodSummary {
                    method: m,
                    n: v.len(),
                    mean_final,
                    std_final,
                    failed_steps: self.rows.iter().filter(|r| r.method == m && r.error.is_some()).count(),
                    knot_successes: knots.iter().filter(|k| k.success).count(),
                    knot_trials: knots.len(),
                }
            })
            .collect();
        out.sort_by(|a, b| a.mean_final.total_cmp(&b.mean_final).then(a.method.cmp(&b.method)));
        out
    }

    pub fn knot_success_rate(&self, method: Method) -> Option<f64> {
        let k: Vec<&KnotRow> = self.knot.iter().filter(|k| k.method == method).collect();
        (!k.is_empty()).then(|| k.iter().filter(|k| k.success).count() as f64 / k.len() as f64)
    }

    pub fn summary_markdown(&self) -> String {
        let mut s = String::new();
        let p = &self.meta.plan;
        let _ = writeln!(s, "# Experiment summary\n");
        let _ = writeln!(
            s,
            "shapes: {}; variants: {}; repeats: {}; keyframe stride: {}; seed: {}; elapsed: {:.1} s\n",
            p.shapes.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", "),
            p.variants,
            p.repeats,
            p.stride,
            p.seed,
            self.meta.elapsed_s
        );
        let _ = writeln!(s, "| method | runs | final distance (px) | failed steps | knot successes |");
        let _ = writeln!(s, "|---|---|---|---|---|");
        for m in self.summaries() {
            let knot = if m.knot_trials > 0 { format!("{}/{}", m.knot_successes, m.knot_trials) } else { "-".into() };
            let _ = writeln!(s, "| {} | {} | {:.3} ± {:.3} | {} | {} |", m.method, m.n, m.mean_final, m.std_final, m.failed_steps, knot);
        }
        let _ = writeln!(s, "\n## Per step\n\n| method | shape | step | n | mean | std |\n|---|---|---|---|---|---|");
        for a in self.aggregates() {
            let _ = writeln!(s, "| {} | {} | {} | {} | {:.3} | {:.3} |", a.method, a.shape, a.step, a.n, a.mean, a.std);
        }
        s
    }
}

/// Per (method, shape, step) statistics over rows with a distance.
pub fn aggregates_of(rows: &[ReportRow]) -> Vec<Aggregate> {
    let mut groups: BTreeMap<(Method, ShapeName, usize), Vec<f64>> = BTreeMap::new();
    for r in rows {
        if let Some(d) = r.distance {
            groups.entry((r.method, r.shape, r.step)).or_default().push(d);
        }
    }
    groups
        .into_iter()
        .map(|((method, shape, step), v)| {
            let (mean, std) = mean_std(&v);
            Aggregate { method, shape, step, n: v.len(), mean, std }
        })
        .collect()
}

const ROW_HEADER: [&str; 8] = ["method", "shape", "variant", "repeat", "seed", "step", "distance", "error"];

fn write_rows_csv(rows: &[ReportRow], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(ROW_HEADER)?;
    for r in rows {
        w.write_record([
            r.method.to_string(),
            r.shape.to_string(),
            r.variant.to_string(),
            r.repeat.to_string(),
            r.seed.to_string(),
            r.step.to_string(),
            r.distance.map(|d| format!("{d:?}")).unwrap_or_default(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a `rows.csv` written by [`export_report`].
pub fn read_rows_csv(path: &Path) -> Result<Vec<ReportRow>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let bad = |what: &str, v: &str| Error::InvalidConfig(format!("rows.csv: bad {what} `{v}`"));
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize, what: &str| f(i).parse::<u64>().map_err(|_| bad(what, f(i)));
        out.push(ReportRow {
            method: f(0).parse()?,
            shape: f(1).parse()?,
            variant: num(2, "variant")? as usize,
            repeat: num(3, "repeat")? as usize,
            seed: num(4, "seed")?,
            step: num(5, "step")? as usize,
            distance: if f(6).is_empty() { None } else { Some(f(6).parse().map_err(|_| bad("distance", f(6)))?) },
            error: (!f(7).is_empty()).then(|| f(7).to_string()),
        });
    }
    Ok(out)
}

/// Writes `rows.csv`, `knot.csv`, `summary.md` and `report.json` into `dir`.
pub fn export_report(report: &ExperimentReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_rows_csv(&report.rows, &dir.join("rows.csv"))?;
    let mut k = csv::WriterBuilder::new().has_headers(false).from_path(dir.join("knot.csv"))?;
    k.write_record(["method", "variant", "repeat", "seed", "crossings", "final_distance", "success"])?;
    for r in &report.knot {
        k.write_record([
            r.method.to_string(),
            r.variant.to_string(),
            r.repeat.to_string(),
            r.seed.to_string(),
            r.crossings.to_string(),
            r.final_distance.map(|d| format!("{d:?}")).unwrap_or_default(),
            r.success.to_string(),
        ])?;
    }
    k.flush()?;
    std::fs::write(dir.join("summary.md"), report.summary_markdown())?;
    serde_json::to_writer_pretty(std::fs::File::create(dir.join("report.json"))?, report)?;
    Ok(())
}

const PALETTE: [&str; 5] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#7f7f7f"];

/// Mean ± std distance against step for one shape, one line per method.
pub fn write_svg(report: &ExperimentReport, shape: ShapeName, path: &Path) -> Result<()> {
    let aggs: Vec<Aggregate> = report.aggregates().into_iter().filter(|a| a.shape == shape).collect();
    let (w, h, m) = (480.0, 320.0, 48.0);
    let max_step = aggs.iter().map(|a| a.step).max().unwrap_or(1).max(1) as f64;
    let max_d = aggs.iter().map(|a| a.mean + a.std).fold(1.0f64, f64::max) * 1.1;
    let x = |s: f64| m + (s - 1.0).max(0.0) / (max_step - 1.0).max(1.0) * (w - 2.0 * m);
    let y = |d: f64| h - m - d / max_d * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">shape {shape}</text>"#, w / 2.0);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">keyframe</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">distance (px)</text>"#, h / 2.0, h / 2.0);
    for k in 0..=4 {
        let d = max_d * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{d:.1}</text>"#, m - 4.0, y(d) + 4.0);
    }
    for st in 1..=max_step as usize {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{st}</text>"#, x(st as f64), h - m + 14.0);
    }
    let mut methods: Vec<Method> = aggs.iter().map(|a| a.method).collect();
    methods.dedup();
    methods.sort();
    methods.dedup();
    for (i, meth) in methods.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let pts: Vec<&Aggregate> = aggs.iter().filter(|a| a.method == *meth).collect();
        let line: Vec<String> = pts.iter().map(|a| format!("{:.1},{:.1}", x(a.step as f64), y(a.mean))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#, line.join(" "));
        for a in &pts {
            let px = x(a.step as f64);
            let _ = writeln!(s, r#"<line x1="{px:.1}" y1="{:.1}" x2="{px:.1}" y2="{:.1}" stroke="{c}"/>"#, y(a.mean - a.std), y(a.mean + a.std));
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{c}">{meth}</text>"#, w - m - 100.0, m + 14.0 * i as f64);
    }
    s.push_str("</svg>\n");
    std::fs::write(path, s)?;
    Ok(())
}

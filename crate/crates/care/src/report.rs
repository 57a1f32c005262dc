//! CSV and Markdown tables: evaluation reports, training logs, comparisons.
//!
//! Undefined values (all pixels abstained, constant correlation inputs) are
//! written as empty fields.

use std::fs;
use std::path::Path;

use care_core::eval::{zeta_label, Comparison, EvalReport, ZetaMetrics};
use care_core::train::EpochLog;

use crate::error::{Error, Result};

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| {
        let offset = e.position().map(|p| p.byte()).unwrap_or(0);
        match e.into_kind() {
            csv::ErrorKind::Io(source) => Error::Io {
                path: path.to_path_buf(),
                source,
            },
            kind => Error::Format {
                path: path.to_path_buf(),
                offset,
                msg: format!("{kind:?}"),
            },
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn report_header(zetas: &[f64]) -> Vec<String> {
    let mut h: Vec<String> = ["model", "n", "err_mean", "err_median", "mse"].map(String::from).into();
    for &z in zetas {
        let l = zeta_label(z);
        h.push(format!("mse_{l}"));
        h.push(format!("frac_{l}"));
    }
    h.push("pearson_r".into());
    h
}

fn report_row(r: &EvalReport) -> Vec<String> {
    let mut row = vec![
        r.model.clone(),
        r.n.map(|n| n.to_string()).unwrap_or_default(),
        r.mean_discrepancy.to_string(),
        r.median_discrepancy.to_string(),
        r.mse.to_string(),
    ];
    for z in &r.at_zeta {
        row.push(opt(z.mse));
        row.push(z.retained.to_string());
    }
    row.push(opt(r.pearson_r));
    row
}

/// Renders reports sharing one ζ list as CSV text.
pub fn reports_csv(reports: &[EvalReport]) -> Result<String> {
    let zetas: Vec<f64> = reports.first().map(|r| r.at_zeta.iter().map(|z| z.zeta).collect()).unwrap_or_default();
    let mut w = csv::Writer::from_writer(Vec::new());
    let path = Path::new("<report>");
    w.write_record(report_header(&zetas)).map_err(csv_err(path))?;
    for r in reports {
        if r.at_zeta.iter().map(|z| z.zeta).ne(zetas.iter().copied()) {
            return Err(Error::config("reports in one table must share the zeta list"));
        }
        w.write_record(report_row(r)).map_err(csv_err(path))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn write_reports(reports: &[EvalReport], path: &Path) -> Result<()> {
    fs::write(path, reports_csv(reports)?).map_err(Error::io(path))
}

fn parse_zeta(label: &str) -> Option<f64> {
    label.replace('p', ".").parse::<f64>().ok().map(|v| v / 100.0)
}

pub fn read_reports(path: &Path) -> Result<Vec<EvalReport>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = rd.headers().map_err(csv_err(path))?.iter().map(String::from).collect();
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        msg,
    };
    let fixed = ["model", "n", "err_mean", "err_median", "mse"];
    if header.len() < 6 || header[..5] != fixed || header.last().map(String::as_str) != Some("pearson_r") || (header.len() - 6) % 2 != 0 {
        return Err(bad(format!("unexpected report columns {header:?}")));
    }
    let mut zetas = Vec::new();
    for pair in header[5..header.len() - 1].chunks(2) {
        let z = match (pair[0].strip_prefix("mse_"), pair[1].strip_prefix("frac_")) {
            (Some(a), Some(b)) if a == b => parse_zeta(a),
            _ => None,
        };
        zetas.push(z.ok_or_else(|| bad(format!("unexpected report columns {pair:?}")))?);
    }
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err(path))?;
        let offset = rec.position().map(|p| p.byte()).unwrap_or(0);
        let field = |i: usize| -> Result<Option<f64>> {
            let s = rec.get(i).unwrap_or("");
            if s.is_empty() {
                return Ok(None);
            }
            s.parse().map(Some).map_err(|_| Error::Format {
                path: path.to_path_buf(),
                offset,
                msg: format!("column {} is not a number: {s:?}", header[i]),
            })
        };
        let required = |i: usize| -> Result<f64> {
            field(i)?.ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                offset,
                msg: format!("column {} is empty", header[i]),
            })
        };
        let n = match rec.get(1).unwrap_or("") {
            "" => None,
            s => Some(s.parse().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                offset,
                msg: format!("column n is not a count: {s:?}"),
            })?),
        };
        let at_zeta = zetas
            .iter()
            .enumerate()
            .map(|(k, &zeta)| {
                Ok(ZetaMetrics {
                    zeta,
                    mse: field(5 + 2 * k)?,
                    retained: required(6 + 2 * k)?,
                })
            })
            .collect::<Result<_>>()?;
        out.push(EvalReport {
            model: rec.get(0).unwrap_or("").to_string(),
            n,
            split: None,
            seed: None,
            mean_discrepancy: required(2)?,
            median_discrepancy: required(3)?,
            mse: required(4)?,
            at_zeta,
            pearson_r: field(header.len() - 1)?,
            tiles: 0,
        });
    }
    if out.is_empty() {
        return Err(bad("report has no rows".into()));
    }
    Ok(out)
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,phase,L0,L1,total\n");
    for e in log {
        s.push_str(&format!("{},{},{},{},{}\n", e.epoch, e.phase, e.l0, e.l1, e.total));
    }
    s
}

fn comparison_header(c: &Comparison) -> Vec<String> {
    let mut h = vec!["model".to_string(), "n".to_string()];
    if let Some(row) = c.rows.first() {
        h.extend(row.improvements.iter().map(|(m, _)| m.clone()));
    }
    h
}

/// Improvement (percent) of the reference model over each row.
pub fn comparison_csv(c: &Comparison) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(comparison_header(c)).expect("in-memory write");
    for row in &c.rows {
        let mut rec = vec![row.model.clone(), row.n.map(|n| n.to_string()).unwrap_or_default()];
        rec.extend(row.improvements.iter().map(|(_, v)| opt(*v)));
        w.write_record(rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
}

/// Aligned Markdown table, two decimals, `-` for undefined.
pub fn comparison_markdown(c: &Comparison) -> String {
    let header = comparison_header(c);
    let mut rows: Vec<Vec<String>> = vec![header];
    for row in &c.rows {
        let mut r = vec![row.model.clone(), row.n.map(|n| n.to_string()).unwrap_or_else(|| "-".into())];
        r.extend(
            row.improvements
                .iter()
                .map(|(_, v)| v.map(|v| format!("{v:.2}%")).unwrap_or_else(|| "-".into())),
        );
        rows.push(r);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0).max(3))
        .collect();
    let line = |r: &[String]| {
        let cells: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(i, s)| if i < 2 { format!("{s:<w$}", w = widths[i]) } else { format!("{s:>w$}", w = widths[i]) })
            .collect();
        format!("| {} |\n", cells.join(" | "))
    };
    let mut out = format!("Improvement of {} over each model\n\n", c.reference);
    out.push_str(&line(&rows[0]));
    let rule: Vec<String> = widths
        .iter()
        .enumerate()
        .map(|(i, &w)| if i < 2 { "-".repeat(w) } else { format!("{}:", "-".repeat(w - 1)) })
        .collect();
    out.push_str(&format!("| {} |\n", rule.join(" | ")));
    for r in &rows[1..] {
        out.push_str(&line(r));
    }
    out
}

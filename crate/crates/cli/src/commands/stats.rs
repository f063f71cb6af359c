//! Mann-Whitney U tests between two groups of per-case results.

use std::collections::BTreeMap;
use std::path::Path;

use hepeval_core::metrics::{mann_whitney_u, MannWhitneyResult};
use serde::Serialize;

use crate::args::{GlobalArgs, StatsArgs};
use crate::failure::{CmdResult, Failure};
use crate::io::{ensure_dir, write_atomic, write_json_atomic};
use crate::manifest::RunManifest;

/// Columns in file order with their non-empty numeric values.
fn read_columns(path: &Path) -> CmdResult<Vec<(String, Vec<f64>)>> {
    let fail = |e: &dyn std::fmt::Display| Failure::Usage(format!("{}: {e}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| fail(&e))?;
    let header: Vec<String> = reader.headers().map_err(|e| fail(&e))?.iter().map(String::from).collect();
    let mut columns: Vec<(String, Vec<f64>)> = header.iter().map(|h| (h.clone(), Vec::new())).collect();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| fail(&e))?;
        for (col, field) in columns.iter_mut().zip(record.iter()) {
            if col.0 == "case_id" || field.trim().is_empty() {
                continue;
            }
            let v: f64 = field.trim().parse().map_err(|_| {
                fail(&format!("row {}: `{field}` in column `{}` is not a number", line + 2, col.0))
            })?;
            col.1.push(v);
        }
    }
    columns.retain(|(name, _)| name != "case_id");
    Ok(columns)
}

#[derive(Debug, Serialize)]
struct Comparison {
    structure: String,
    n_a: usize,
    n_b: usize,
    /// Null when either group has no values.
    test: Option<MannWhitneyResult>,
}

pub fn run(global: &GlobalArgs, args: &StatsArgs) -> CmdResult {
    let a = read_columns(&args.a)?;
    let b: BTreeMap<String, Vec<f64>> = read_columns(&args.b)?.into_iter().collect();
    let mut comparisons = Vec::new();
    for (name, xs) in &a {
        let Some(ys) = b.get(name) else { continue };
        let test = if xs.is_empty() || ys.is_empty() {
            None
        } else {
            Some(mann_whitney_u(xs, ys)?)
        };
        comparisons.push(Comparison {
            structure: name.clone(),
            n_a: xs.len(),
            n_b: ys.len(),
            test,
        });
    }
    if comparisons.is_empty() {
        return Err(Failure::Usage("the two tables share no columns".into()));
    }
    let value = serde_json::json!({ "a": args.a, "b": args.b, "comparisons": comparisons });
    println!("{}", serde_json::to_string_pretty(&value).expect("JSON values serialize"));

    if let Some(out) = &global.out {
        ensure_dir(out)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Failure::Usage(format!("CSV: {e}"));
        w.write_record(["structure", "n_a", "n_b", "u", "p_two_sided", "method"]).map_err(csv_err)?;
        for c in &comparisons {
            let (u, p, method) = match &c.test {
                Some(t) => (
                    t.u.to_string(),
                    t.p_two_sided.to_string(),
                    serde_json::to_value(t.method).expect("method serializes").as_str().unwrap_or("").to_string(),
                ),
                None => Default::default(),
            };
            w.write_record([c.structure.clone(), c.n_a.to_string(), c.n_b.to_string(), u, p, method])
                .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Failure::Usage(format!("CSV: {e}")))?;
        let mut manifest = RunManifest::new("stats", serde_json::Value::Null);
        manifest.add_input(&args.a);
        manifest.add_input(&args.b);
        write_json_atomic(&out.join("stats.json"), &value)?;
        write_atomic(&out.join("stats.csv"), &bytes)?;
        manifest.add_output(&out.join("stats.json"));
        manifest.add_output(&out.join("stats.csv"));
        manifest.write(out)?;
    }
    Ok(())
}

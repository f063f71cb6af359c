//! Batch evaluation of prediction/ground-truth pairs.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use hepeval_core::metrics::{aggregate, evaluate_case, CaseReport, EvalConfig};
use hepeval_core::nifti::read_labels;
use hepeval_core::LabelSchema;
use rayon::prelude::*;
use serde::Serialize;

use crate::args::{EvalArgs, GlobalArgs};
use crate::config::Config;
use crate::failure::{CmdResult, Failure};
use crate::io::{case_id, ensure_dir, out_dir, write_atomic, write_json_atomic};
use crate::manifest::RunManifest;

struct Case {
    id: String,
    gt: PathBuf,
    pred: PathBuf,
}

#[derive(Debug, Serialize)]
struct CaseFailure {
    case_id: String,
    gt: PathBuf,
    pred: PathBuf,
    error: String,
}

fn evaluate_one(case: &Case, config: &EvalConfig, out: &Path) -> Result<CaseReport, String> {
    let schema = LabelSchema::default();
    let gt = read_labels(&case.gt, schema.clone())
        .map_err(|e| format!("{}: {e}", case.gt.display()))?;
    let pred = read_labels(&case.pred, schema).map_err(|e| format!("{}: {e}", case.pred.display()))?;
    let report = evaluate_case(&case.id, &gt, &pred, config).map_err(|e| e.to_string())?;
    write_json_atomic(&out.join("cases").join(format!("{}.json", case.id)), &report.to_json())
        .map_err(|e| e.to_string())?;
    log::info!("evaluated {}", case.id);
    Ok(report)
}

/// One row per case: every overlap value, then the lesion counts. Missing
/// values are empty fields.
fn cases_csv(reports: &[CaseReport]) -> CmdResult<Vec<u8>> {
    let mut keys: Vec<String> = Vec::new();
    for r in reports {
        for (k, _) in r.metric_values() {
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["case_id".to_string()];
    header.extend(keys.iter().cloned());
    header.extend(["detection_rate", "n_lesions", "n_detected", "false_positives"].map(String::from));
    let csv_err = |e: csv::Error| Failure::Usage(format!("CSV: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for r in reports {
        let values = r.metric_values();
        let mut row = vec![r.case_id.clone()];
        for k in &keys {
            let v = values.iter().find(|(key, _)| key == k).and_then(|(_, v)| *v);
            row.push(v.map(|x| x.to_string()).unwrap_or_default());
        }
        let l = &r.lesions;
        row.push(if l.n_gt > 0 { l.detection_rate.to_string() } else { String::new() });
        row.push(l.n_gt.to_string());
        row.push(l.n_detected.to_string());
        row.push(l.n_false_positive.to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Failure::Usage(format!("CSV: {e}")))
}

pub fn run(global: &GlobalArgs, args: &EvalArgs) -> CmdResult {
    let config = Config::resolve(global)?;
    if args.gt.len() != args.pred.len() {
        return Err(Failure::Usage(format!(
            "{} ground-truth paths but {} prediction paths",
            args.gt.len(),
            args.pred.len()
        )));
    }
    let cases: Vec<Case> = args
        .gt
        .iter()
        .zip(&args.pred)
        .map(|(gt, pred)| Case {
            id: case_id(gt),
            gt: gt.clone(),
            pred: pred.clone(),
        })
        .collect();
    let mut seen = BTreeSet::new();
    for c in &cases {
        if !seen.insert(&c.id) {
            return Err(Failure::Usage(format!("duplicate case id `{}`", c.id)));
        }
    }

    let out = out_dir(&global.out);
    ensure_dir(&out.join("cases"))?;
    let mut manifest = RunManifest::new(
        "eval",
        serde_json::to_value(&config).expect("config serializes"),
    );
    for c in &cases {
        manifest.add_input(&c.gt);
        manifest.add_input(&c.pred);
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs())
        .build()
        .map_err(|e| Failure::Usage(format!("worker pool: {e}")))?;
    let results: Vec<Result<CaseReport, String>> = pool.install(|| {
        cases
            .par_iter()
            .map(|c| evaluate_one(c, &config.eval, &out))
            .collect()
    });

    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (case, result) in cases.iter().zip(results) {
        match result {
            Ok(r) => {
                manifest.add_output(&out.join("cases").join(format!("{}.json", case.id)));
                reports.push(r);
            }
            Err(error) => {
                log::error!("case {} failed: {error}", case.id);
                failures.push(CaseFailure {
                    case_id: case.id.clone(),
                    gt: case.gt.clone(),
                    pred: case.pred.clone(),
                    error,
                });
            }
        }
    }
    reports.sort_by(|a, b| a.case_id.cmp(&b.case_id));

    if !reports.is_empty() {
        let summary = aggregate(&reports)?;
        write_json_atomic(&out.join("summary.json"), &summary.to_json())?;
        write_atomic(&out.join("summary.csv"), summary.to_csv().as_bytes())?;
        write_atomic(&out.join("cases.csv"), &cases_csv(&reports)?)?;
        for name in ["summary.json", "summary.csv", "cases.csv"] {
            manifest.add_output(&out.join(name));
        }
    }
    write_json_atomic(
        &out.join("failures.json"),
        &serde_json::to_value(&failures).expect("failures serialize"),
    )?;
    manifest.add_output(&out.join("failures.json"));
    manifest.write(&out)?;

    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Partial(format!(
            "{} of {} cases failed; see {}",
            failures.len(),
            cases.len(),
            out.join("failures.json").display()
        )))
    }
}

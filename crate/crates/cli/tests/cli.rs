//! End-to-end runs of the `hepeval` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use hepeval_core::metrics::{evaluate_case, mann_whitney_u, EvalConfig};
use hepeval_core::nifti::{read_labels, write_nifti};
use hepeval_core::phantom::{degrade, fixtures, generate_case, Blob, DegradeSpec, PhantomSpec};
use hepeval_core::{BinaryMask, LabelSchema, ProbVolume};
use serde_json::Value;
use sha2::{Digest, Sha256};

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn hepeval(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_hepeval"))
        .args(args)
        .output()
        .expect("binary runs");
    Run {
        code: out.status.code().expect("exited"),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn assert_schema(name: &str, value: &Value) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(format!("{name}.schema.json"));
    let schema = read_json(&path);
    let compiled = jsonschema::JSONSchema::compile(&schema).expect("schema compiles");
    let msgs: Vec<String> = match compiled.validate(value) {
        Ok(()) => Vec::new(),
        Err(errors) => errors.map(|e| format!("{} at {}", e, e.instance_path)).collect(),
    };
    assert!(msgs.is_empty(), "{name} schema violations: {msgs:?}");
}

fn sha256(p: &Path) -> String {
    Sha256::digest(fs::read(p).unwrap()).iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn phantom_default_spec() {
    let dir = tempfile::tempdir().unwrap();
    let r = hepeval(&["phantom", "--out", s(dir.path())]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let labels = read_labels(dir.path().join("truth.nii.gz"), LabelSchema::default()).unwrap();
    assert!(labels.labels().iter().all(|&l| LabelSchema::default().contains(l)));
    assert!(!dir.path().join("pred.nii.gz").exists());
    assert_schema("truth_manifest", &read_json(&dir.path().join("truth.json")));
    assert_schema("run_manifest", &read_json(&dir.path().join("manifest.json")));
}

#[test]
fn phantom_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let job = dir.path().join("job.json");
    fs::write(&job, r#"{"degrade": {"seed": 4, "relabel_fraction": 0.01}}"#).unwrap();
    let digests = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let r = hepeval(&["phantom", s(&job), "--seed", seed, "--out", s(&out)]);
        assert_eq!(r.code, 0, "{}", r.stderr);
        (sha256(&out.join("truth.nii.gz")), sha256(&out.join("pred.nii.gz")))
    };
    let a = digests("a", "9");
    assert_eq!(a, digests("b", "9"));
    assert_ne!(a.0, digests("c", "10").0);
}

#[test]
fn phantom_rejects_tumor_outside_parenchyma() {
    let dir = tempfile::tempdir().unwrap();
    let job = dir.path().join("job.json");
    fs::write(
        &job,
        r#"{"phantom": {"tumors": [{"center": [150, 150, 200], "radius": 5},
                                  {"center": [4, 4, 6], "radius": 3}]}}"#,
    )
    .unwrap();
    let r = hepeval(&["phantom", s(&job), "--out", s(dir.path())]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("tumors[1]"), "{}", r.stderr);
    assert!(!dir.path().join("truth.nii.gz").exists());

    fs::write(&job, r#"{"phantom": {"sead": 3}}"#).unwrap();
    let r = hepeval(&["phantom", s(&job)]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("sead"), "{}", r.stderr);
}

fn write_pair(dir: &Path, id: &str, degrade_spec: Option<&DegradeSpec>, spec: &PhantomSpec) -> (PathBuf, PathBuf) {
    let truth = generate_case(spec).unwrap();
    let gt = dir.join("gt").join(format!("{id}.nii.gz"));
    let pred = dir.join("pred").join(format!("{id}.nii.gz"));
    fs::create_dir_all(gt.parent().unwrap()).unwrap();
    fs::create_dir_all(pred.parent().unwrap()).unwrap();
    write_nifti(&truth.labels, &gt).unwrap();
    match degrade_spec {
        Some(d) => write_nifti(&degrade(&truth, d).unwrap(), &pred).unwrap(),
        None => write_nifti(&truth.labels, &pred).unwrap(),
    }
    (gt, pred)
}

#[test]
fn eval_self_pair_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let (gt, pred) = write_pair(dir.path(), "self", None, &PhantomSpec::default());
    let out = dir.path().join("out");
    let r = hepeval(&["eval", "--gt", s(&gt), "--pred", s(&pred), "--out", s(&out)]);
    assert_eq!(r.code, 0, "{}", r.stderr);

    let summary = read_json(&out.join("summary.json"));
    assert_schema("summary", &summary);
    for row in summary["rows"].as_array().unwrap() {
        if row["structure"] == "gallbladder" {
            assert!(row["mean"].is_null());
        } else {
            assert_eq!(row["mean"], 1.0, "{row}");
        }
    }
    let report = read_json(&out.join("cases").join("self.json"));
    assert_schema("case_report", &report);
    assert_eq!(report["lesions"]["detection_rate"], 1.0);
    assert_eq!(report["lesions"]["n_false_positive"], 0);

    let manifest = read_json(&out.join("manifest.json"));
    assert_schema("run_manifest", &manifest);
    let inputs = manifest["inputs"].as_array().unwrap();
    assert_eq!(inputs.len(), 2);
    assert_eq!(inputs[0]["sha256"], sha256(&gt));
    assert_eq!(inputs[1]["sha256"], sha256(&pred));
    assert!(fs::read_to_string(out.join("summary.csv")).unwrap().starts_with("structure,mean,sd"));
}

#[test]
fn eval_continues_past_unreadable_case() {
    let dir = tempfile::tempdir().unwrap();
    let spec = fixtures::tree_spec(1, 0);
    let (g1, p1) = write_pair(dir.path(), "a", None, &spec);
    let (g2, p2) = write_pair(dir.path(), "b", None, &spec);
    let g3 = dir.path().join("gt").join("c.nii.gz");
    fs::write(&g3, b"not a volume").unwrap();
    let p3 = dir.path().join("pred").join("c.nii.gz");
    let out = dir.path().join("out");
    let r = hepeval(&[
        "eval", "--gt", s(&g1), s(&g2), s(&g3), "--pred", s(&p1), s(&p2), s(&p3), "--out", s(&out),
        "--jobs", "2",
    ]);
    assert_eq!(r.code, 2, "{}", r.stderr);
    let mut written: Vec<String> = fs::read_dir(out.join("cases"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    written.sort();
    assert_eq!(written, vec!["a.json", "b.json"]);
    let failures = read_json(&out.join("failures.json"));
    assert_schema("failures", &failures);
    assert_eq!(failures.as_array().unwrap().len(), 1);
    assert_eq!(failures[0]["case_id"], "c");
    assert_eq!(read_json(&out.join("summary.json"))["n_cases"], 2);
}

#[test]
fn eval_rejects_bad_usage() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    fs::write(&config, r#"{"eval": {"min_overlap": 2}}"#).unwrap();
    let a = s(&config);
    assert_eq!(hepeval(&["eval", "--gt", a, "--pred", a, "--config", a]).code, 1);
    assert_eq!(hepeval(&["eval", "--gt", a, a, "--pred", a]).code, 1);
    assert_eq!(hepeval(&["eval", "--gt", a, "--pred", a, "--connectivity", "7"]).code, 1);
    assert_eq!(hepeval(&["frobnicate"]).code, 1);
    assert_eq!(hepeval(&["--help"]).code, 0);
}

#[test]
fn eval_csv_matches_module_level_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let mut cases = Vec::new();
    for seed in 0..3u64 {
        let spec = PhantomSpec {
            seed,
            ..PhantomSpec::default()
        };
        let mut d = DegradeSpec {
            seed,
            drop_edge_ids: vec![1 + seed as u32],
            spurious_blobs: vec![Blob {
                center: [127.0, 127.0, 160.5],
                radius: 5.0,
                label: LabelSchema::TUMOR,
            }],
            ..DegradeSpec::default()
        };
        d.erode_steps.insert("hepatic_vein".into(), 1);
        let id = format!("case{seed}");
        let (gt, pred) = write_pair(dir.path(), &id, Some(&d), &spec);
        cases.push((id, gt, pred));
    }
    let out = dir.path().join("out");
    let mut args = vec!["eval", "--out", s(&out), "--connectivity", "18", "--gt"];
    args.extend(cases.iter().map(|c| s(&c.1)));
    args.push("--pred");
    args.extend(cases.iter().map(|c| s(&c.2)));
    let r = hepeval(&args);
    assert_eq!(r.code, 0, "{}", r.stderr);

    let config = EvalConfig {
        connectivity: hepeval_core::Connectivity::Eighteen,
        ..EvalConfig::default()
    };
    let mut reader = csv::Reader::from_path(out.join("cases.csv")).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    for ((id, gt, pred), row) in cases.iter().zip(&rows) {
        assert_eq!(&row[0], id);
        let schema = LabelSchema::default();
        let report = evaluate_case(
            id,
            &read_labels(gt, schema.clone()).unwrap(),
            &read_labels(pred, schema).unwrap(),
            &config,
        )
        .unwrap();
        for (key, want) in report.metric_values() {
            let col = header.iter().position(|h| *h == key).unwrap();
            let got: Option<f64> = (!row[col].is_empty()).then(|| row[col].parse().unwrap());
            assert_eq!(got, want, "{id} {key}");
        }
        let col = |name: &str| header.iter().position(|h| h == name).unwrap();
        assert_eq!(row[col("false_positives")].parse::<usize>().unwrap(), report.lesions.n_false_positive);
        assert_eq!(row[col("n_lesions")].parse::<usize>().unwrap(), report.lesions.n_gt);
    }
}

fn tube_files(dir: &Path) -> (PathBuf, PathBuf) {
    let gt = fixtures::straight_tube();
    let pred = ProbVolume::from(&gt);
    let (gp, pp) = (dir.join("gt.nii"), dir.join("pred.nii.gz"));
    write_nifti(&gt, &gp).unwrap();
    write_nifti(&pred, &pp).unwrap();
    (gp, pp)
}

#[test]
fn loss_on_perfect_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let (gt, pred) = tube_files(dir.path());
    let run = |epoch: &str| hepeval(&["loss", "--pred", s(&pred), "--gt", s(&gt), "--epoch", epoch]);

    let r = run("0");
    assert_eq!(r.code, 0, "{}", r.stderr);
    let v: Value = serde_json::from_str(&r.stdout).unwrap();
    assert_schema("loss", &v);
    assert_eq!(v["k_used"], 1.0);
    assert!(v["combined"].as_f64().unwrap() < 1e-5, "{v}");

    let v: Value = serde_json::from_str(&run("400").stdout).unwrap();
    assert_eq!(v["k_used"], 0.15);
    let v: Value = serde_json::from_str(&run("499").stdout).unwrap();
    assert_eq!(v["k_used"], 0.5);

    let r = run("500");
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("out of range"), "{}", r.stderr);
}

#[test]
fn loss_writes_output_file() {
    let dir = tempfile::tempdir().unwrap();
    let (gt, pred) = tube_files(dir.path());
    let out = dir.path().join("out");
    let r = hepeval(&["loss", "--pred", s(&pred), "--gt", s(&gt), "--epoch", "450", "--out", s(&out)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let v = read_json(&out.join("loss.json"));
    assert_eq!(v, serde_json::from_str::<Value>(&r.stdout).unwrap());
    assert_schema("run_manifest", &read_json(&out.join("manifest.json")));
}

#[test]
fn skeleton_of_y_phantom() {
    let dir = tempfile::tempdir().unwrap();
    let truth = fixtures::y_phantom();
    let mask = truth.labels.extract_mask(LabelSchema::PORTAL_VEIN).unwrap();
    let path = dir.path().join("vessel.nii.gz");
    write_nifti(&mask, &path).unwrap();
    let out = dir.path().join("out");
    let r = hepeval(&["skeleton", s(&path), "--out", s(&out)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let graph = read_json(&out.join("graph.json"));
    assert_schema("graph", &graph);
    assert_eq!(graph["edges"].as_array().unwrap().len(), 3);
    let root = graph["root_edge"].as_u64().unwrap() as usize;
    assert_eq!(graph["edges"][root]["strahler"], 2);
    assert_eq!(graph["edges"][root]["generation"], 0);

    let central = hepeval_core::nifti::read_mask(out.join("central.nii.gz")).unwrap();
    let peripheral = hepeval_core::nifti::read_mask(out.join("peripheral.nii.gz")).unwrap();
    // one bifurcation: everything is trunk or primary branch
    assert_eq!(central, mask);
    assert!(peripheral.is_empty());
    for name in ["skeleton.nii.gz", "centerline.nii.gz", "manifest.json"] {
        assert!(out.join(name).exists(), "{name}");
    }
}

#[test]
fn skeleton_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let g = fixtures::straight_tube().geometry().clone();
    let empty = dir.path().join("empty.nii");
    write_nifti(&BinaryMask::empty(g), &empty).unwrap();
    let out = dir.path().join("out");
    let r = hepeval(&["skeleton", s(&empty), "--out", s(&out)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stderr.contains("no foreground"), "{}", r.stderr);
    assert_eq!(read_json(&out.join("graph.json"))["edges"], serde_json::json!([]));
    assert!(hepeval_core::nifti::read_mask(out.join("skeleton.nii.gz")).unwrap().is_empty());

    let labels = dir.path().join("labels.nii.gz");
    write_nifti(&fixtures::y_phantom().labels, &labels).unwrap();
    let r = hepeval(&["skeleton", s(&labels), "--out", s(&out)]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("type error"), "{}", r.stderr);
}

#[test]
fn stats_between_groups() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    fs::write(&a, "case_id,portal_vein,gallbladder\nx,0.70,\ny,0.74,\nz,0.81,\n").unwrap();
    fs::write(&b, "case_id,portal_vein,gallbladder,tumor\nu,0.60,0.9,1\nv,0.65,,1\nw,0.72,0.8,1\nq,0.55,,1\n").unwrap();
    let out = dir.path().join("out");
    let r = hepeval(&["stats", s(&a), s(&b), "--out", s(&out)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let v: Value = serde_json::from_str(&r.stdout).unwrap();
    assert_schema("stats", &v);
    let cmp = v["comparisons"].as_array().unwrap();
    assert_eq!(cmp.len(), 2);
    let want = mann_whitney_u(&[0.70, 0.74, 0.81], &[0.60, 0.65, 0.72, 0.55]).unwrap();
    assert_eq!(cmp[0]["structure"], "portal_vein");
    assert_eq!(cmp[0]["test"]["p_two_sided"], want.p_two_sided);
    assert_eq!(cmp[0]["test"]["method"], "exact");
    assert!(cmp[1]["test"].is_null());
    assert_eq!(read_json(&out.join("stats.json")), v);
    assert!(out.join("stats.csv").exists());

    fs::write(&b, "case_id,portal_vein\nu,high\n").unwrap();
    assert_eq!(hepeval(&["stats", s(&a), s(&b)]).code, 1);
}

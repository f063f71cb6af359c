//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

mod oracles;

use std::fs;
use std::io::Read;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use hepeval_core::losses::{
    bootstrapped_ce_loss, cl_dice_loss, combined_loss, cross_entropy_loss, finite_difference_check,
    k_schedule, soft_dice_loss, GradedScalar, LossConfig,
};
use hepeval_core::metrics::{cl_dice_metric, dsc, lesion_match, mann_whitney_u, MwMethod};
use hepeval_core::morphology::{max_pool, squared_distance_transform};
use hepeval_core::nifti::{read_labels, read_nifti, read_probabilities, write_nifti, DataType};
use hepeval_core::phantom::{
    degrade, fixtures, generate_case, Blob, DegradeSpec, PhantomSpec, Sphere,
};
use hepeval_core::vessel::{classify_central_peripheral, vessel_graph};
use hepeval_core::{BinaryMask, Connectivity, Geometry, LabelSchema, LabelVolume, ProbVolume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn hepeval(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_hepeval"))
        .args(args)
        .output()
        .expect("binary runs");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Uniform values in (0.02, 0.98), all distinct.
fn tie_free_volume(rng: &mut ChaCha8Rng, g: &Geometry) -> ProbVolume {
    loop {
        let v: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(0.02..0.98)).collect();
        let mut sorted = v.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).all(|w| w[0] != w[1]) {
            return ProbVolume::new(g.clone(), v).unwrap();
        }
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let g = Geometry::new([8, 8, 8], [1.0; 3]).unwrap();
    let config = LossConfig::default();
    let (eps, clip) = (config.epsilon, config.ce_clip);
    let mut worst_cl: f64 = 0.0;
    let mut worst_other: f64 = 0.0;
    let mut worst_name = String::new();
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = tie_free_volume(&mut rng, &g);
        let gt = BinaryMask::from_fn(g.clone(), |_| rng.gen_bool(0.4));
        let n = g.len();
        let check = |f: &dyn Fn(&ProbVolume) -> hepeval_core::Result<GradedScalar>| {
            finite_difference_check(f, &pred, n, 1e-6, seed).unwrap()
        };
        let mut others: Vec<(String, f64)> = vec![
            ("soft dice".into(), check(&|p| soft_dice_loss(p, &gt, eps))),
            ("cross-entropy".into(), check(&|p| Ok(cross_entropy_loss(p, &gt, clip)?.mean))),
        ];
        for k in [0.15, 0.5, 1.0] {
            others.push((format!("bootstrapped CE k={k}"), check(&|p| bootstrapped_ce_loss(p, &gt, k, clip))));
        }
        for epoch in [0, 450, 499] {
            others.push((
                format!("combined epoch {epoch}"),
                check(&|p| Ok(combined_loss(p, &gt, epoch, &config)?.total)),
            ));
        }
        let cl = check(&|p| cl_dice_loss(p, &gt, config.skeleton_iterations, eps));
        worst_cl = worst_cl.max(cl);
        for (name, e) in others {
            if e > worst_other {
                worst_other = e;
                worst_name = format!("{name}, seed {seed}");
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(worst_cl < 1e-3, || format!("clDice relative error {worst_cl:.3e}"))?;
    ensure(worst_other < 1e-4, || format!("relative error {worst_other:.3e} ({worst_name})"))?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "max rel. error clDice {worst_cl:.1e}, others {worst_other:.1e}; {:.1} s",
        elapsed.as_secs_f64()
    ))
}

fn schedule_exactness() -> Outcome {
    let c = LossConfig::default();
    for epoch in 0..400 {
        ensure(k_schedule(epoch, &c).unwrap() == 1.0, || format!("epoch {epoch}"))?;
    }
    ensure(k_schedule(400, &c).unwrap() == 0.15, || "epoch 400".into())?;
    ensure(k_schedule(499, &c).unwrap() == 0.50, || "epoch 499".into())?;
    for epoch in 400..499 {
        let (a, b) = (k_schedule(epoch, &c).unwrap(), k_schedule(epoch + 1, &c).unwrap());
        ensure(a < b, || format!("not increasing at epoch {epoch}"))?;
    }
    ensure(k_schedule(500, &c).is_err(), || "epoch 500 accepted".into())?;
    Ok("k = 1 on 0..399, 0.15 at 400, 0.5 at 499, increasing on the ramp".into())
}

fn reduction_identity() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let g = Geometry::new([rng.gen_range(4..16), rng.gen_range(4..16), rng.gen_range(4..16)], [1.0; 3]).unwrap();
        let pred = tie_free_volume(&mut rng, &g);
        let gt = BinaryMask::from_fn(g, |_| rng.gen_bool(0.3));
        let b = bootstrapped_ce_loss(&pred, &gt, 1.0, 1e-7).unwrap().value;
        let m = cross_entropy_loss(&pred, &gt, 1e-7).unwrap().mean.value;
        worst = worst.max((b - m).abs());
    }
    ensure(worst <= 1e-12, || format!("difference {worst:e}"))?;
    Ok(format!("max |bootstrapped(k=1) - mean CE| = {worst:e} over 10 volumes"))
}

fn topology_sensitivity() -> Outcome {
    let gt = fixtures::straight_tube();
    let (fat, _) = max_pool(&ProbVolume::from(&gt));
    let fat = BinaryMask::from_fn(gt.geometry().clone(), |i| fat.values()[i] > 0.5);
    let (cl, d) = (cl_dice_metric(&fat, &gt, 10).unwrap(), dsc(&fat, &gt).unwrap());
    ensure(cl == 1.0 && d < 0.9, || format!("dilated tube: clDice {cl}, DSC {d}"))?;

    let truth = fixtures::y_phantom();
    let pred = degrade(&truth, &DegradeSpec { drop_edge_ids: vec![1], ..DegradeSpec::default() }).unwrap();
    let a = truth.labels.extract_mask(LabelSchema::PORTAL_VEIN).unwrap();
    let b = pred.extract_mask(LabelSchema::PORTAL_VEIN).unwrap();
    let (ycl, yd) = (cl_dice_metric(&b, &a, 10).unwrap(), dsc(&b, &a).unwrap());
    ensure(ycl < yd, || format!("Y minus branch: clDice {ycl} >= DSC {yd}"))?;
    Ok(format!("dilated tube clDice {cl} DSC {d:.3}; Y minus branch clDice {ycl:.3} < DSC {yd:.3}"))
}

fn strahler_oracle() -> Outcome {
    let mut worst: f64 = 1.0;
    for levels in 1..=4 {
        for seed in 0..3 {
            let truth = generate_case(&fixtures::tree_spec(levels, seed)).unwrap();
            let vessel = truth.labels.extract_mask(LabelSchema::PORTAL_VEIN).unwrap();
            let graph = vessel_graph(&vessel).unwrap();
            let root = &graph.edges[graph.root_edge.unwrap() as usize];
            ensure(root.strahler as usize == levels + 1, || {
                format!("b={levels} seed {seed}: root Strahler {}", root.strahler)
            })?;
            let split = classify_central_peripheral(&graph, &vessel).unwrap();
            let built = truth.generation_mask(LabelSchema::PORTAL_VEIN, 1);
            let agree = vessel.indices().filter(|&i| split.central.get(i) == built.get(i)).count();
            let frac = agree as f64 / vessel.count() as f64;
            ensure(frac >= 0.99, || format!("b={levels} seed {seed}: agreement {frac:.4}"))?;
            worst = worst.min(frac);
        }
    }
    Ok(format!("root order b+1 for b=1..4 (3 seeds each); min agreement {worst:.4}"))
}

fn random_degraded_case(seed: u64) -> (LabelVolume, LabelVolume) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = PhantomSpec { seed, ..PhantomSpec::default() };
    let inside = |rng: &mut ChaCha8Rng| {
        let p = &spec.parenchyma;
        loop {
            let u: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            if u.iter().map(|x| x * x).sum::<f64>() <= 1.0 {
                return [0, 1, 2].map(|k| p.center[k] + 0.6 * u[k] * p.semi_axes[k]);
            }
        }
    };
    let tumors = (0..rng.gen_range(0..5))
        .map(|_| Sphere { center: inside(&mut rng), radius: rng.gen_range(5.0..12.0) })
        .collect();
    let truth = generate_case(&PhantomSpec { tumors, ..spec.clone() }).unwrap();
    let mut d = DegradeSpec { seed, ..DegradeSpec::default() };
    d.erode_steps.insert("tumor".into(), rng.gen_range(0..3));
    d.spurious_blobs = (0..rng.gen_range(0..4))
        .map(|_| Blob { center: inside(&mut rng), radius: rng.gen_range(4.0..9.0), label: LabelSchema::TUMOR })
        .collect();
    d.relabel_fraction = if rng.gen_bool(0.5) { 0.01 } else { 0.0 };
    let pred = degrade(&truth, &d).unwrap();
    (truth.labels, pred)
}

fn lesion_oracle() -> Outcome {
    let (mut lesions, mut fps) = (0, 0);
    for seed in 0..20 {
        let (gt, pred) = random_degraded_case(seed);
        let a = gt.extract_mask(LabelSchema::TUMOR).unwrap();
        let b = pred.extract_mask(LabelSchema::TUMOR).unwrap();
        let report = lesion_match(&a, &b, Connectivity::TwentySix, 1).unwrap();
        let (ca, cb) = (oracles::flood_components(&a), oracles::flood_components(&b));
        let detected = ca.iter().filter(|x| cb.iter().any(|y| oracles::overlap(x, y) > 0)).count();
        let fp = cb.iter().filter(|y| ca.iter().all(|x| oracles::overlap(x, y) == 0)).count();
        let rate = if ca.is_empty() { 0.0 } else { detected as f64 / ca.len() as f64 };
        ensure(
            report.n_gt == ca.len()
                && report.n_detected == detected
                && report.detection_rate == rate
                && report.n_false_positive == fp,
            || format!("seed {seed}: library {}/{} fp {}, oracle {detected}/{} fp {fp}",
                report.n_detected, report.n_gt, report.n_false_positive, ca.len()),
        )?;
        lesions += ca.len();
        fps += fp;
    }
    Ok(format!("20 phantoms, {lesions} lesions, {fps} false positives, all equal"))
}

fn edt_oracle() -> Outcome {
    for spacing in [[1.0, 1.0, 1.0], [2.0, 2.0, 3.0]] {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let density = rng.gen_range(0.5..0.95);
            let g = Geometry::new([16, 16, 16], spacing).unwrap();
            let mask = BinaryMask::from_fn(g, |_| rng.gen_bool(density));
            let fast = squared_distance_transform(&mask);
            ensure(fast.values() == oracles::brute_squared_distance(&mask).as_slice(), || {
                format!("spacing {spacing:?} seed {seed}")
            })?;
        }
    }
    Ok("20 random 16^3 masks equal brute force exactly".into())
}

fn mann_whitney_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.gen_range(2..=10);
        let n1 = rng.gen_range(1..n);
        let values: Vec<f64> = rand::seq::index::sample(&mut rng, 1000, n)
            .iter()
            .map(|v| v as f64 / 10.0)
            .collect();
        let (xs, ys) = values.split_at(n1);
        let r = mann_whitney_u(xs, ys).unwrap();
        ensure(r.method == MwMethod::Exact, || format!("{xs:?} {ys:?} not exact"))?;
        worst = worst.max((r.p_two_sided - oracles::permutation_p(xs, ys)).abs());
    }
    ensure(worst < 1e-9, || format!("p differs by {worst:e}"))?;
    for _ in 0..200 {
        let xs: Vec<f64> = (0..rng.gen_range(1..20)).map(|_| rng.gen_range(0..6) as f64).collect();
        let ys: Vec<f64> = (0..rng.gen_range(1..20)).map(|_| rng.gen_range(0..6) as f64).collect();
        let r = mann_whitney_u(&xs, &ys).unwrap();
        ensure(r.u_x + r.u_y == (xs.len() * ys.len()) as f64, || format!("U sum on {xs:?} {ys:?}"))?;
    }
    Ok(format!("50 exact cases within {worst:.1e}; U_x + U_y = n1 n2 on 200 tied samples"))
}

fn self_evaluation() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut ids = Vec::new();
    for (id, gallbladder) in [("with_gb", true), ("no_gb", false)] {
        let spec = PhantomSpec { seed: 11, gallbladder_present: gallbladder, ..PhantomSpec::default() };
        let path = dir.path().join(format!("{id}.nii.gz"));
        write_nifti(&generate_case(&spec).unwrap().labels, &path).unwrap();
        ids.push((id, path));
    }
    let out = dir.path().join("out");
    let (code, err) = hepeval(&[
        "eval", "--gt", s(&ids[0].1), s(&ids[1].1), "--pred", s(&ids[0].1), s(&ids[1].1), "--out", s(&out),
    ]);
    ensure(code == 0, || format!("exit {code}: {err}"))?;
    for (id, _) in &ids {
        let r: Value = serde_json::from_str(&fs::read_to_string(out.join("cases").join(format!("{id}.json"))).unwrap()).unwrap();
        for (name, v) in r["dsc"].as_object().unwrap() {
            // the schema's separate gallbladder label is never drawn by the phantom
            let want = if name == "gallbladder" { Value::Null } else { 1.0.into() };
            ensure(*v == want, || format!("{id}: DSC {name} = {v}"))?;
        }
        for (name, reg) in r["regions"].as_object().unwrap() {
            let central_null = *id == "no_gb" && name == "biliary_tree";
            let want_central = if central_null { Value::Null } else { 1.0.into() };
            ensure(reg["central"] == want_central && reg["peripheral"] == 1.0, || {
                format!("{id}: regions {name} = {reg}")
            })?;
        }
        ensure(r["lesions"]["detection_rate"] == 1.0 && r["lesions"]["n_false_positive"] == 0, || {
            format!("{id}: lesions {}", r["lesions"])
        })?;
    }
    Ok("DSC 1.0 everywhere, 100% detection, 0 FP, null central biliary without gallbladder".into())
}

fn header_bytes(path: &Path) -> Vec<u8> {
    let raw = fs::read(path).unwrap();
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice()).read_to_end(&mut out).unwrap();
        out
    } else {
        raw
    }
}

fn format_fidelity() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let schema = LabelSchema::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..50 {
        let dims = [rng.gen_range(1..12), rng.gen_range(1..12), rng.gen_range(1..9)];
        let g = Geometry::new(dims, [rng.gen_range(1..8) as f64 * 0.25, 1.0, rng.gen_range(1..5) as f64])
            .unwrap()
            .with_placement([rng.gen_range(-100..100) as f64, 0.5, -7.25], [[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]])
            .unwrap();
        let ext = if case % 2 == 0 { "nii" } else { "nii.gz" };
        let path = dir.path().join(format!("v{case}.{ext}"));
        if case % 3 == 0 {
            let p = ProbVolume::new(g.clone(), (0..g.len()).map(|_| rng.gen::<f32>() as f64).collect()).unwrap();
            write_nifti(&p, &path).unwrap();
            let (back, _) = read_probabilities(&path).unwrap();
            let bits = |v: &ProbVolume| v.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            ensure(bits(&back) == bits(&p) && back.geometry() == p.geometry(), || format!("case {case}"))?;
            ensure(read_nifti(&path).unwrap().datatype == DataType::Float32, || format!("case {case} dtype"))?;
        } else {
            let l = LabelVolume::new(g.clone(), (0..g.len()).map(|_| rng.gen_range(0..=6)).collect(), schema.clone()).unwrap();
            write_nifti(&l, &path).unwrap();
            ensure(read_labels(&path, schema.clone()).unwrap() == l, || format!("case {case}"))?;
        }
        let h = header_bytes(&path);
        ensure(h[0..4] == 348i32.to_le_bytes() && &h[344..348] == b"n+1\0", || format!("case {case} header"))?;
    }
    Ok("50 volumes (25 .nii.gz) bit-identical; sizeof_hdr 348 and magic n+1\\0".into())
}

fn end_to_end_runtime() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let job = dir.path().join("job.json");
    fs::write(
        &job,
        r#"{"degrade": {"seed": 1, "erode_steps": {"portal_vein": 1, "hepatic_vein": 1},
            "drop_edge_ids": [3], "relabel_fraction": 0.001,
            "spurious_blobs": [{"center": [127, 127, 160.5], "radius": 6, "label": 2}]}}"#,
    )
    .unwrap();
    let start = Instant::now();
    let ph = dir.path().join("phantom");
    let (code, err) = hepeval(&["phantom", s(&job), "--out", s(&ph), "--jobs", "1"]);
    ensure(code == 0, || format!("phantom exit {code}: {err}"))?;
    let out = dir.path().join("eval");
    let (code, err) = hepeval(&[
        "eval", "--gt", s(&ph.join("truth.nii.gz")), "--pred", s(&ph.join("pred.nii.gz")), "--out", s(&out), "--jobs", "1",
    ]);
    ensure(code == 0, || format!("eval exit {code}: {err}"))?;
    let elapsed = start.elapsed();
    ensure(out.join("summary.csv").exists(), || "no summary".into())?;
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!("128^3 generate + degrade + evaluate in {:.2} s", elapsed.as_secs_f64()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("gradient suite", gradient_suite),
        ("schedule exactness", schedule_exactness),
        ("reduction identity", reduction_identity),
        ("topology sensitivity", topology_sensitivity),
        ("Strahler oracle", strahler_oracle),
        ("lesion oracle", lesion_oracle),
        ("EDT oracle", edt_oracle),
        ("Mann-Whitney oracle", mann_whitney_oracle),
        ("self-evaluation identity", self_evaluation),
        ("format fidelity", format_fidelity),
        ("end-to-end runtime", end_to_end_runtime),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS  {:>2}. {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {:>2}. {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

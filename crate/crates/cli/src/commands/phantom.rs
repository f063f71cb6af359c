//! Phantom generation from a JSON job file.

use std::fs;

use hepeval_core::phantom::{degrade, generate_case, DegradeSpec, PhantomSpec};
use serde::{Deserialize, Serialize};

use crate::args::{GlobalArgs, PhantomArgs};
use crate::failure::{CmdResult, Failure};
use crate::io::{ensure_dir, out_dir, write_json_atomic, write_nifti_atomic};
use crate::manifest::RunManifest;

/// What to generate: the truth phantom and, optionally, a degraded copy.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomJob {
    pub phantom: PhantomSpec,
    pub degrade: Option<DegradeSpec>,
}

pub fn run(global: &GlobalArgs, args: &PhantomArgs) -> CmdResult {
    let mut job: PhantomJob = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::Usage(format!("invalid phantom spec {}: {e}", path.display())))?
        }
        None => PhantomJob::default(),
    };
    if let Some(seed) = global.seed {
        job.phantom.seed = seed;
    }

    let truth = generate_case(&job.phantom)?;
    let pred = job.degrade.as_ref().map(|d| degrade(&truth, d)).transpose()?;

    let out = out_dir(&global.out);
    ensure_dir(&out)?;
    let mut manifest = RunManifest::new("phantom", serde_json::to_value(&job).expect("job serializes"));
    if let Some(path) = &args.spec {
        manifest.add_input(path);
    }
    let truth_path = out.join("truth.nii.gz");
    write_nifti_atomic(&truth.labels, &truth_path)?;
    manifest.add_output(&truth_path);
    let truth_json = out.join("truth.json");
    write_json_atomic(
        &truth_json,
        &serde_json::to_value(truth.manifest()).expect("truth manifest serializes"),
    )?;
    manifest.add_output(&truth_json);
    if let Some(pred) = &pred {
        let p = out.join("pred.nii.gz");
        write_nifti_atomic(pred, &p)?;
        manifest.add_output(&p);
    }
    manifest.write(&out)
}

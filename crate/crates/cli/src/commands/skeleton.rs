//! Standalone vessel analysis of one binary mask.

use hepeval_core::nifti::read_mask;
use hepeval_core::vessel::{centerline, classify_with_rule, skeletonize, vessel_graph};

use crate::args::{GlobalArgs, SkeletonArgs};
use crate::config::Config;
use crate::failure::CmdResult;
use crate::io::{ensure_dir, out_dir, write_json_atomic, write_nifti_atomic};
use crate::manifest::RunManifest;

/// Writes the soft skeleton, the thinned centerline the graph is built on,
/// the graph and the central/peripheral masks.
pub fn run(global: &GlobalArgs, args: &SkeletonArgs) -> CmdResult {
    let config = Config::resolve(global)?;
    let mask = read_mask(&args.mask)?;
    if mask.is_empty() {
        log::warn!("{} has no foreground; writing empty outputs", args.mask.display());
    }
    let skeleton = skeletonize(&mask, config.eval.skeleton_iterations)?;
    let line = centerline(&mask);
    let graph = vessel_graph(&mask)?;
    let split = classify_with_rule(&graph, &mask, config.eval.central_rule)?;

    let out = out_dir(&global.out);
    ensure_dir(&out)?;
    let mut manifest = RunManifest::new(
        "skeleton",
        serde_json::to_value(&config.eval).expect("config serializes"),
    );
    manifest.add_input(&args.mask);
    for (name, m) in [
        ("skeleton.nii.gz", &skeleton),
        ("centerline.nii.gz", &line),
        ("central.nii.gz", &split.central),
        ("peripheral.nii.gz", &split.peripheral),
    ] {
        let p = out.join(name);
        write_nifti_atomic(m, &p)?;
        manifest.add_output(&p);
    }
    let p = out.join("graph.json");
    write_json_atomic(&p, &graph.to_json())?;
    manifest.add_output(&p);
    manifest.write(&out)
}

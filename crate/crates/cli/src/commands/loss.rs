//! Combined training loss of one prediction.

use hepeval_core::losses::combined_loss;
use hepeval_core::nifti::{read_labels, read_mask, read_probabilities};
use hepeval_core::LabelSchema;
use serde::Serialize;

use crate::args::{GlobalArgs, LossArgs};
use crate::config::Config;
use crate::failure::CmdResult;
use crate::io::{ensure_dir, write_json_atomic};
use crate::manifest::RunManifest;

#[derive(Debug, Serialize)]
struct LossOutput {
    epoch: usize,
    cl_dice: f64,
    bootstrapped_ce: f64,
    combined: f64,
    k_used: f64,
    gradient_norm: f64,
}

pub fn run(global: &GlobalArgs, args: &LossArgs) -> CmdResult {
    let config = Config::resolve(global)?;
    let (pred, _) = read_probabilities(&args.pred)?;
    let gt = match args.label {
        Some(id) => read_labels(&args.gt, LabelSchema::default())?.extract_mask(id)?,
        None => read_mask(&args.gt)?,
    };
    let l = combined_loss(&pred, &gt, args.epoch, &config.loss)?;
    let output = LossOutput {
        epoch: args.epoch,
        cl_dice: l.cl_dice.value,
        bootstrapped_ce: l.bootstrapped_ce.value,
        combined: l.total.value,
        k_used: l.k,
        gradient_norm: l.total.gradient.norm(),
    };
    let value = serde_json::to_value(&output).expect("loss output serializes");
    println!("{}", serde_json::to_string_pretty(&value).expect("JSON values serialize"));

    if let Some(out) = &global.out {
        ensure_dir(out)?;
        let mut manifest = RunManifest::new("loss", serde_json::to_value(&config).expect("config serializes"));
        manifest.add_input(&args.pred);
        manifest.add_input(&args.gt);
        let path = out.join("loss.json");
        write_json_atomic(&path, &value)?;
        manifest.add_output(&path);
        manifest.write(out)?;
    }
    Ok(())
}

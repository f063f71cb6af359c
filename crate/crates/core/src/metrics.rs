//! Evaluation protocol: overlap scores, lesion detection, per-case reports,
//! cohort summaries and the Mann-Whitney U test.

use std::collections::BTreeMap;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{connected_components, Connectivity, DEFAULT_SKELETON_ITERATIONS};
use crate::vessel::{
    classify_with_rule, identify_gallbladder_with, skeletonize, vessel_graph, CentralRule,
    GallbladderConfig,
};
use crate::volume::{BinaryMask, LabelSchema, LabelVolume};

/// Dice similarity coefficient `2|a & b| / (|a| + |b|)`, 1 when both are
/// empty.
pub fn dsc(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.geometry().ensure_same_grid(b.geometry())?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.values().iter().zip(b.values()) {
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Binary clDice: harmonic mean of skeleton precision against `gt` and
/// skeleton sensitivity against `pred`.
pub fn cl_dice_metric(pred: &BinaryMask, gt: &BinaryMask, iterations: usize) -> Result<f64> {
    pred.geometry().ensure_same_grid(gt.geometry())?;
    let sp = skeletonize(pred, iterations)?;
    let sg = skeletonize(gt, iterations)?;
    let (np, ng) = (sp.count(), sg.count());
    match (np, ng) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let hits = |s: &BinaryMask, m: &BinaryMask| {
        s.values()
            .iter()
            .zip(m.values())
            .filter(|&(&a, &b)| a && b)
            .count() as f64
    };
    let tprec = hits(&sp, gt) / np as f64;
    let tsens = hits(&sg, pred) / ng as f64;
    if tprec + tsens == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * tprec * tsens / (tprec + tsens))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionRow {
    pub id: u32,
    pub volume_mm3: f64,
    pub detected: bool,
    /// Best DSC against a single overlapping predicted component.
    pub best_overlap_dsc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FalsePositiveRow {
    pub id: u32,
    pub volume_mm3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionReport {
    pub n_gt: usize,
    pub n_detected: usize,
    /// `n_detected / max(n_gt, 1)`.
    pub detection_rate: f64,
    pub n_false_positive: usize,
    pub rows: Vec<LesionRow>,
    pub fp_rows: Vec<FalsePositiveRow>,
}

/// Lesion-wise matching of connected components. A ground-truth lesion is
/// detected when one predicted component overlaps it by at least
/// `min_overlap_voxels`; a predicted component touching no lesion at all is
/// a false positive.
pub fn lesion_match(
    gt: &BinaryMask,
    pred: &BinaryMask,
    connectivity: Connectivity,
    min_overlap_voxels: usize,
) -> Result<LesionReport> {
    gt.geometry().ensure_same_grid(pred.geometry())?;
    if min_overlap_voxels == 0 {
        return Err(Error::param("min_overlap_voxels must be at least 1"));
    }
    let cg = connected_components(gt, connectivity);
    let cp = connected_components(pred, connectivity);
    let vv = gt.geometry().voxel_volume();

    // overlap counts for every touching (gt, pred) pair
    let mut overlap: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for (&a, &b) in cg.ids().iter().zip(cp.ids()) {
        if a != 0 && b != 0 {
            *overlap.entry((a, b)).or_insert(0) += 1;
        }
    }

    let mut rows = Vec::with_capacity(cg.count());
    for id in 1..=cg.count() as u32 {
        let mut detected = false;
        let mut best: f64 = 0.0;
        for (&(_, p), &n) in overlap.range((id, 0)..=(id, u32::MAX)) {
            detected |= n >= min_overlap_voxels;
            let d = 2.0 * n as f64 / (cg.size(id) + cp.size(p)) as f64;
            best = best.max(d);
        }
        rows.push(LesionRow {
            id,
            volume_mm3: cg.size(id) as f64 * vv,
            detected,
            best_overlap_dsc: best,
        });
    }
    let touched: std::collections::BTreeSet<u32> = overlap.keys().map(|&(_, p)| p).collect();
    let fp_rows: Vec<FalsePositiveRow> = (1..=cp.count() as u32)
        .filter(|p| !touched.contains(p))
        .map(|id| FalsePositiveRow {
            id,
            volume_mm3: cp.size(id) as f64 * vv,
        })
        .collect();

    let n_gt = rows.len();
    let n_detected = rows.iter().filter(|r| r.detected).count();
    Ok(LesionReport {
        n_gt,
        n_detected,
        detection_rate: n_detected as f64 / n_gt.max(1) as f64,
        n_false_positive: fp_rows.len(),
        rows,
        fp_rows,
    })
}

/// Options for [`evaluate_case`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Connectivity for lesion components.
    pub connectivity: Connectivity,
    pub min_overlap_voxels: usize,
    /// Soft-skeleton iterations for the clDice metric.
    pub skeleton_iterations: usize,
    pub central_rule: CentralRule,
    pub gallbladder: GallbladderConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            connectivity: Connectivity::TwentySix,
            min_overlap_voxels: 1,
            skeleton_iterations: DEFAULT_SKELETON_ITERATIONS,
            central_rule: CentralRule::Generation,
            gallbladder: GallbladderConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_overlap_voxels == 0 {
            return Err(Error::param("min_overlap_voxels must be at least 1"));
        }
        if self.skeleton_iterations == 0 {
            return Err(Error::param("skeleton_iterations must be positive"));
        }
        let gb = &self.gallbladder;
        if !(gb.min_volume_mm3 >= 0.0 && gb.min_sphericity >= 0.0) {
            return Err(Error::param("gallbladder thresholds must be >= 0"));
        }
        Ok(())
    }
}

/// DSC inside the central and the peripheral region of a structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionDsc {
    pub central: Option<f64>,
    pub peripheral: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case_id: String,
    /// DSC per schema structure; null for an optional structure absent from
    /// both volumes.
    pub dsc: BTreeMap<String, Option<f64>>,
    /// Central/peripheral DSC for the portal vein, the hepatic vein and the
    /// biliary tree (gallbladder/ducts).
    pub regions: BTreeMap<String, RegionDsc>,
    /// clDice metric for the two veins and the bile ducts.
    pub cl_dice: BTreeMap<String, f64>,
    pub lesions: LesionReport,
    pub gallbladder_absent_gt: bool,
    pub gallbladder_absent_pred: bool,
}

impl CaseReport {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("report serializes")
    }

    /// Overlap values keyed as in [`Summary::rows`]: `<structure>`,
    /// `<structure>_central`, `<structure>_peripheral`, `cldice_<name>`.
    pub fn metric_values(&self) -> Vec<(String, Option<f64>)> {
        let mut out: Vec<(String, Option<f64>)> =
            self.dsc.iter().map(|(k, v)| (k.clone(), *v)).collect();
        for (name, reg) in &self.regions {
            out.push((format!("{name}_central"), reg.central));
            out.push((format!("{name}_peripheral"), reg.peripheral));
        }
        out.extend(self.cl_dice.iter().map(|(k, v)| (format!("cldice_{k}"), Some(*v))));
        out
    }
}

pub const BILE_DUCTS: &str = "bile_ducts";

fn structure_name(schema: &LabelSchema, id: u8) -> Result<String> {
    schema
        .name(id)
        .map(str::to_string)
        .ok_or_else(|| Error::Schema(format!("schema lacks label id {id}")))
}

/// Compare a predicted label volume with the ground truth.
pub fn evaluate_case(
    case_id: &str,
    gt: &LabelVolume,
    pred: &LabelVolume,
    config: &EvalConfig,
) -> Result<CaseReport> {
    config.validate()?;
    if gt.schema() != pred.schema() {
        return Err(Error::Schema(format!(
            "case {case_id}: ground truth and prediction use different label schemas"
        )));
    }
    gt.geometry().ensure_same_grid(pred.geometry())?;
    let schema = gt.schema();

    let mut dsc_map = BTreeMap::new();
    for s in schema.foreground() {
        let (a, b) = (gt.extract_mask(s.id)?, pred.extract_mask(s.id)?);
        let value = if s.optional && a.is_empty() && b.is_empty() {
            None
        } else {
            Some(dsc(&a, &b)?)
        };
        dsc_map.insert(s.name.clone(), value);
    }

    let mut regions = BTreeMap::new();
    let mut cl_dice = BTreeMap::new();
    for id in [LabelSchema::PORTAL_VEIN, LabelSchema::HEPATIC_VEIN] {
        let name = structure_name(schema, id)?;
        let (a, b) = (gt.extract_mask(id)?, pred.extract_mask(id)?);
        regions.insert(name.clone(), vessel_regions(&a, &b, config.central_rule)?);
        cl_dice.insert(name, cl_dice_metric(&b, &a, config.skeleton_iterations)?);
    }

    // a separately labelled gallbladder counts as part of the biliary system
    let biliary_ids = [LabelSchema::BILIARY_TREE, LabelSchema::GALLBLADDER];
    let bg = identify_gallbladder_with(&gt.mask_of_any(&biliary_ids), &config.gallbladder);
    let bp = identify_gallbladder_with(&pred.mask_of_any(&biliary_ids), &config.gallbladder);
    let gallbladder_absent_gt = bg.gallbladder.is_empty();
    let gallbladder_absent_pred = bp.gallbladder.is_empty();
    regions.insert(
        structure_name(schema, LabelSchema::BILIARY_TREE)?,
        RegionDsc {
            central: if gallbladder_absent_gt {
                None
            } else {
                Some(dsc(&bg.gallbladder, &bp.gallbladder)?)
            },
            peripheral: Some(dsc(&bg.ducts, &bp.ducts)?),
        },
    );
    cl_dice.insert(
        BILE_DUCTS.to_string(),
        cl_dice_metric(&bp.ducts, &bg.ducts, config.skeleton_iterations)?,
    );

    let lesions = lesion_match(
        &gt.extract_mask(LabelSchema::TUMOR)?,
        &pred.extract_mask(LabelSchema::TUMOR)?,
        config.connectivity,
        config.min_overlap_voxels,
    )?;
    debug!(
        "case {case_id}: {}/{} lesions detected, {} false positives",
        lesions.n_detected, lesions.n_gt, lesions.n_false_positive
    );

    Ok(CaseReport {
        case_id: case_id.to_string(),
        dsc: dsc_map,
        regions,
        cl_dice,
        lesions,
        gallbladder_absent_gt,
        gallbladder_absent_pred,
    })
}

/// Central/peripheral DSC with regions taken from the ground-truth vessel
/// graph and applied to both masks.
fn vessel_regions(gt: &BinaryMask, pred: &BinaryMask, rule: CentralRule) -> Result<RegionDsc> {
    let graph = vessel_graph(gt)?;
    let union = gt.or(pred)?;
    let split = classify_with_rule(&graph, &union, rule)?;
    let inside = |m: &BinaryMask, r: &BinaryMask| m.and(r);
    let central = dsc(&inside(gt, &split.central)?, &inside(pred, &split.central)?)?;
    let peripheral = dsc(&inside(gt, &split.peripheral)?, &inside(pred, &split.peripheral)?)?;
    Ok(RegionDsc {
        central: Some(central),
        peripheral: Some(peripheral),
    })
}

/// Descriptive statistics of one reported quantity across cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub structure: String,
    pub n: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation (n - 1); 0 for a single value.
    pub sd: Option<f64>,
    pub median: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

impl SummaryRow {
    fn from_values(structure: String, mut v: Vec<f64>) -> Self {
        let n = v.len();
        if n == 0 {
            return SummaryRow {
                structure,
                n,
                mean: None,
                sd: None,
                median: None,
                min: None,
                max: None,
            };
        }
        v.sort_by(f64::total_cmp);
        let mean = v.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        SummaryRow {
            structure,
            n,
            mean: Some(mean),
            sd: Some(sd),
            median: Some(median_sorted(&v)),
            min: Some(v[0]),
            max: Some(v[n - 1]),
        }
    }

    /// `mean ± sd`, or `n/a`.
    pub fn mean_sd(&self) -> String {
        match (self.mean, self.sd) {
            (Some(m), Some(s)) => format!("{m:.3} ± {s:.3}"),
            _ => "n/a".to_string(),
        }
    }
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n_cases: usize,
    /// Case ids in the order they were aggregated.
    pub case_ids: Vec<String>,
    /// DSC rows (`<structure>`, `<structure>_central`,
    /// `<structure>_peripheral`) followed by clDice rows (`cldice_<name>`).
    pub rows: Vec<SummaryRow>,
    /// Per-case detection rate over cases with at least one lesion.
    pub detection_rate: SummaryRow,
    /// All detected lesions over all lesions.
    pub pooled_detection_rate: Option<f64>,
    pub median_false_positives: f64,
}

impl Summary {
    pub fn row(&self, structure: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.structure == structure)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("summary serializes")
    }

    /// CSV with columns `structure,mean,sd,median,min,max`; undefined
    /// entries are empty fields.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut out = String::from("structure,mean,sd,median,min,max\n");
        for r in self.rows.iter().chain(std::iter::once(&self.detection_rate)) {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.structure,
                cell(r.mean),
                cell(r.sd),
                cell(r.median),
                cell(r.min),
                cell(r.max)
            ));
        }
        out
    }
}

/// Summarise case reports. Reports are taken in case-id order so the result
/// does not depend on the order they finished in.
pub fn aggregate(reports: &[CaseReport]) -> Result<Summary> {
    if reports.is_empty() {
        return Err(Error::param("cannot aggregate zero case reports"));
    }
    let mut sorted: Vec<&CaseReport> = reports.iter().collect();
    sorted.sort_by(|a, b| a.case_id.cmp(&b.case_id));

    let mut series: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    let mut push = |key: String, v: Option<f64>| {
        if !series.contains_key(&key) {
            order.push(key.clone());
        }
        let e = series.entry(key).or_default();
        if let Some(v) = v {
            e.push(v);
        }
    };
    for r in &sorted {
        for (key, v) in r.metric_values() {
            push(key, v);
        }
    }
    let rows = order
        .into_iter()
        .map(|k| {
            let v = series.remove(&k).unwrap_or_default();
            SummaryRow::from_values(k, v)
        })
        .collect();

    let rates: Vec<f64> = sorted
        .iter()
        .filter(|r| r.lesions.n_gt > 0)
        .map(|r| r.lesions.detection_rate)
        .collect();
    let (found, total) = sorted.iter().fold((0, 0), |(f, t), r| {
        (f + r.lesions.n_detected, t + r.lesions.n_gt)
    });
    let mut fps: Vec<f64> = sorted
        .iter()
        .map(|r| r.lesions.n_false_positive as f64)
        .collect();
    fps.sort_by(f64::total_cmp);

    Ok(Summary {
        n_cases: sorted.len(),
        case_ids: sorted.iter().map(|r| r.case_id.clone()).collect(),
        rows,
        detection_rate: SummaryRow::from_values("detection_rate".to_string(), rates),
        pooled_detection_rate: (total > 0).then(|| found as f64 / total as f64),
        median_false_positives: median_sorted(&fps),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MwMethod {
    Exact,
    NormalApproximation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MannWhitneyResult {
    /// `U` of the first sample.
    pub u: f64,
    pub u_x: f64,
    pub u_y: f64,
    pub p_two_sided: f64,
    pub method: MwMethod,
    pub tie_correction_applied: bool,
}

/// Largest combined sample size for which the exact null distribution is
/// used (when there are no ties).
pub const EXACT_MAX_N: usize = 12;

/// Unpaired two-sided Mann-Whitney U test.
pub fn mann_whitney_u(xs: &[f64], ys: &[f64]) -> Result<MannWhitneyResult> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::param("Mann-Whitney needs two non-empty samples"));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::param("Mann-Whitney samples must be finite"));
    }
    let (n1, n2) = (xs.len(), ys.len());
    let n = n1 + n2;

    // midranks over the pooled sample
    let mut pooled: Vec<(f64, bool)> = xs
        .iter()
        .map(|&v| (v, true))
        .chain(ys.iter().map(|&v| (v, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_x = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_x += pooled[i..=j].iter().filter(|p| p.1).count() as f64 * midrank;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let u_x = rank_sum_x - (n1 * (n1 + 1)) as f64 / 2.0;
    let u_y = (n1 * n2) as f64 - u_x;
    let mean = (n1 * n2) as f64 / 2.0;
    let has_ties = tie_term > 0.0;

    let (p, method) = if n <= EXACT_MAX_N && !has_ties {
        let counts = u_distribution(n1, n2);
        let total: f64 = counts.iter().sum();
        let u = u_x.round() as usize;
        let tail: f64 = if u_x <= mean {
            counts[..=u].iter().sum()
        } else {
            counts[u..].iter().sum()
        };
        ((2.0 * tail / total).min(1.0), MwMethod::Exact)
    } else {
        let nf = n as f64;
        let var = (n1 * n2) as f64 / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
        let p = if var <= 0.0 {
            1.0
        } else {
            let z = ((u_x - mean).abs() - 0.5).max(0.0) / var.sqrt();
            (libm::erfc(z / std::f64::consts::SQRT_2)).min(1.0)
        };
        (p, MwMethod::NormalApproximation)
    };
    Ok(MannWhitneyResult {
        u: u_x,
        u_x,
        u_y,
        p_two_sided: p,
        method,
        tie_correction_applied: has_ties && method == MwMethod::NormalApproximation,
    })
}

/// Number of arrangements giving each `U = 0..=n1 n2` under the null, by the
/// recurrence `f(m, n, u) = f(m - 1, n, u - n) + f(m, n - 1, u)`.
fn u_distribution(n1: usize, n2: usize) -> Vec<f64> {
    let max_u = n1 * n2;
    // table[m][k] holds the distribution for sizes (m, k)
    let mut table: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); n2 + 1]; n1 + 1];
    for m in 0..=n1 {
        for k in 0..=n2 {
            let mut d = vec![0.0; m * k + 1];
            if m == 0 || k == 0 {
                d[0] = 1.0;
            } else {
                for (u, slot) in d.iter_mut().enumerate() {
                    let a = if u >= k {
                        table[m - 1][k].get(u - k).copied().unwrap_or(0.0)
                    } else {
                        0.0
                    };
                    let b = table[m][k - 1].get(u).copied().unwrap_or(0.0);
                    *slot = a + b;
                }
            }
            table[m][k] = d;
        }
    }
    let d = std::mem::take(&mut table[n1][n2]);
    debug_assert_eq!(d.len(), max_u + 1);
    d
}

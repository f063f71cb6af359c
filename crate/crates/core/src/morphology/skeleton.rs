//! Iterative soft skeleton built from min/max pooling residues, with a tape
//! that replays the forward pass from its pooling traces and propagates
//! gradients back to the input.

use super::pool::{pool, pool_values, PoolKind, PoolTrace};
use crate::error::{Error, Result};
use crate::volume::{Geometry, ProbVolume};

pub const DEFAULT_SKELETON_ITERATIONS: usize = 10;

/// Everything needed to recompute the soft skeleton and its gradient.
#[derive(Debug, Clone)]
pub struct SkeletonTape {
    input: ProbVolume,
    /// Erosion trace of level `k` (maps level-`k` image to level `k+1`).
    erosions: Vec<PoolTrace>,
    /// Dilation trace closing the opening at level `k`.
    dilations: Vec<PoolTrace>,
}

/// Soft skeleton together with the tape that produced it.
#[derive(Debug, Clone)]
pub struct SoftSkeleton {
    pub skeleton: ProbVolume,
    pub tape: SkeletonTape,
}

fn check_iterations(iterations: usize) -> Result<()> {
    if iterations == 0 {
        return Err(Error::param("soft skeleton needs at least one iteration"));
    }
    Ok(())
}

/// Soft skeleton of `v`:
///
/// ```text
/// S = relu(I - open(I))
/// repeat `iterations` times:
///     I = erode(I)
///     S = S + (1 - S) * relu(I - open(I))
/// ```
///
/// with `erode` the 3x3x3 min pool and `open(I) = max_pool(min_pool(I))`.
/// The erosion inside `open` at one level is the image of the next level, so
/// each level records one min-pool and one max-pool trace.
pub fn soft_skeleton(v: &ProbVolume, iterations: usize) -> Result<SoftSkeleton> {
    check_iterations(iterations)?;
    let geometry = v.geometry();
    let mut erosions = Vec::with_capacity(iterations + 1);
    let mut dilations = Vec::with_capacity(iterations + 1);
    let mut img = v.values().to_vec();
    let mut skel = vec![0.0; img.len()];
    for level in 0..=iterations {
        let (eroded, et) = pool(&img, geometry, PoolKind::Min);
        let (opened, dt) = pool(&eroded, geometry, PoolKind::Max);
        accumulate(&mut skel, &img, &opened, level == 0);
        erosions.push(et);
        dilations.push(dt);
        img = eroded;
    }
    Ok(SoftSkeleton {
        skeleton: ProbVolume::from_raw(geometry.clone(), skel),
        tape: SkeletonTape {
            input: v.clone(),
            erosions,
            dilations,
        },
    })
}

/// Soft skeleton without keeping traces.
pub fn soft_skeleton_values(v: &ProbVolume, iterations: usize) -> Result<ProbVolume> {
    check_iterations(iterations)?;
    let geometry = v.geometry();
    let mut img = v.values().to_vec();
    let mut skel = vec![0.0; img.len()];
    for level in 0..=iterations {
        let eroded = pool_values(&img, geometry, PoolKind::Min);
        let opened = pool_values(&eroded, geometry, PoolKind::Max);
        accumulate(&mut skel, &img, &opened, level == 0);
        img = eroded;
    }
    Ok(ProbVolume::from_raw(geometry.clone(), skel))
}

#[inline]
fn residue(img: f64, opened: f64) -> f64 {
    (img - opened).max(0.0)
}

fn accumulate(skel: &mut [f64], img: &[f64], opened: &[f64], first: bool) {
    for ((s, &i), &o) in skel.iter_mut().zip(img).zip(opened) {
        let d = residue(i, o);
        *s = if first { d } else { *s + (1.0 - *s) * d };
    }
}

/// Forward quantities the backward pass needs, per level.
struct Replay {
    residues: Vec<Vec<f64>>,
    skeletons: Vec<Vec<f64>>,
}

impl SkeletonTape {
    pub fn geometry(&self) -> &Geometry {
        self.input.geometry()
    }

    pub fn iterations(&self) -> usize {
        self.erosions.len() - 1
    }

    /// Traces in forward order: erosion then dilation, level by level.
    pub fn traces(&self) -> impl Iterator<Item = &PoolTrace> {
        self.erosions
            .iter()
            .zip(&self.dilations)
            .flat_map(|(e, d)| [e, d])
    }

    fn replay(&self) -> Replay {
        let levels = self.erosions.len();
        let mut residues = Vec::with_capacity(levels);
        let mut skeletons: Vec<Vec<f64>> = Vec::with_capacity(levels);
        let mut img = self.input.values().to_vec();
        for k in 0..levels {
            let eroded = self.erosions[k].gather(&img);
            let opened = self.dilations[k].gather(&eroded);
            let d: Vec<f64> = img
                .iter()
                .zip(&opened)
                .map(|(&i, &o)| residue(i, o))
                .collect();
            let s = match skeletons.last() {
                None => d.clone(),
                Some(prev) => prev
                    .iter()
                    .zip(&d)
                    .map(|(&s, &dk)| s + (1.0 - s) * dk)
                    .collect(),
            };
            residues.push(d);
            skeletons.push(s);
            img = eroded;
        }
        Replay {
            residues,
            skeletons,
        }
    }

    /// Recompute the skeleton by gathering through the recorded traces.
    pub fn replay_skeleton(&self) -> ProbVolume {
        let mut r = self.replay();
        ProbVolume::from_raw(
            self.geometry().clone(),
            r.skeletons.pop().expect("at least one level"),
        )
    }

    /// Vector-Jacobian product: given dL/dS, return dL/dI.
    ///
    /// Residue gates use the strict `I - open(I) > 0` side, so the
    /// derivative of `relu` at 0 is taken as 0.
    pub fn backward(&self, upstream: &[f64]) -> Vec<f64> {
        let n = self.input.values().len();
        assert_eq!(upstream.len(), n, "upstream gradient has the wrong length");
        let replay = self.replay();
        let levels = replay.residues.len();

        let mut g_skel = upstream.to_vec();
        // gradient reaching the level-(k+1) image, which is the erosion of level k
        let mut g_next = vec![0.0; n];
        let mut g_res = vec![0.0; n];
        let mut g_open = vec![0.0; n];

        for k in (0..levels).rev() {
            let d = &replay.residues[k];
            if k > 0 {
                let prev = &replay.skeletons[k - 1];
                for i in 0..n {
                    g_res[i] = g_skel[i] * (1.0 - prev[i]);
                    g_skel[i] *= 1.0 - d[i];
                }
            } else {
                g_res.copy_from_slice(&g_skel);
            }

            let mut g_img = vec![0.0; n];
            for i in 0..n {
                if d[i] > 0.0 {
                    g_img[i] = g_res[i];
                    g_open[i] = -g_res[i];
                } else {
                    g_open[i] = 0.0;
                }
            }
            // open = dilate(eroded); eroded is also the next level's image
            let mut g_eroded = std::mem::take(&mut g_next);
            self.dilations[k].scatter_add(&g_open, &mut g_eroded);
            self.erosions[k].scatter_add(&g_eroded, &mut g_img);
            g_next = g_img;
        }
        g_next
    }
}

use crate::volume::{Geometry, ProbVolume};

/// Marks a pooling result taken from outside the grid.
pub const EXTERIOR: u32 = u32::MAX;

/// For each output voxel, the linear index of the input voxel that attained
/// the extremum of its 3x3x3 neighbourhood, or [`EXTERIOR`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolTrace {
    sources: Vec<u32>,
}

impl PoolTrace {
    pub fn sources(&self) -> &[u32] {
        &self.sources
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    /// `out[i] = input[source(i)]`, exterior sources read as 0.
    pub fn gather(&self, input: &[f64]) -> Vec<f64> {
        self.sources
            .iter()
            .map(|&s| if s == EXTERIOR { 0.0 } else { input[s as usize] })
            .collect()
    }

    /// Adjoint of [`gather`](Self::gather): `acc[source(i)] += grad[i]`.
    pub fn scatter_add(&self, grad: &[f64], acc: &mut [f64]) {
        for (&s, &g) in self.sources.iter().zip(grad) {
            if s != EXTERIOR && g != 0.0 {
                acc[s as usize] += g;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum PoolKind {
    Max,
    Min,
}

/// Total order used to select the pooled element: value first, then
/// interior over exterior, then the smaller linear index.
#[inline]
fn better(kind: PoolKind, va: f64, ia: u32, vb: f64, ib: u32) -> bool {
    if va != vb {
        return match kind {
            PoolKind::Max => va > vb,
            PoolKind::Min => va < vb,
        };
    }
    let (ea, eb) = (ia == EXTERIOR, ib == EXTERIOR);
    if ea != eb {
        return !ea;
    }
    ia < ib
}

/// 3x3x3 pooling with zero exterior, as three separable 3-tap passes.
///
/// Picking the best element under a total order is associative, so the
/// separable passes select exactly the element a full 27-neighbour scan would.
pub(crate) fn pool(values: &[f64], geometry: &Geometry, kind: PoolKind) -> (Vec<f64>, PoolTrace) {
    let n = geometry.len();
    assert!(n < EXTERIOR as usize, "grid too large for 32-bit pool traces");
    let dims = geometry.dims();
    let strides = [1usize, dims[0], dims[0] * dims[1]];

    let mut cur_v = values.to_vec();
    let mut cur_i: Vec<u32> = (0..n as u32).collect();
    let mut next_v = vec![0.0; n];
    let mut next_i = vec![0u32; n];

    for axis in 0..3 {
        let len = dims[axis];
        let stride = strides[axis];
        for idx in 0..n {
            let pos = (idx / stride) % len;
            let mut bv = cur_v[idx];
            let mut bi = cur_i[idx];
            let mut consider = |v: f64, i: u32| {
                if better(kind, v, i, bv, bi) {
                    bv = v;
                    bi = i;
                }
            };
            if pos > 0 {
                consider(cur_v[idx - stride], cur_i[idx - stride]);
            } else {
                consider(0.0, EXTERIOR);
            }
            if pos + 1 < len {
                consider(cur_v[idx + stride], cur_i[idx + stride]);
            } else {
                consider(0.0, EXTERIOR);
            }
            next_v[idx] = bv;
            next_i[idx] = bi;
        }
        std::mem::swap(&mut cur_v, &mut next_v);
        std::mem::swap(&mut cur_i, &mut next_i);
    }
    (cur_v, PoolTrace { sources: cur_i })
}

/// Values of [`pool`] without the trace. Ties do not matter for the value,
/// so this walks whole lines with plain comparisons.
pub(crate) fn pool_values(values: &[f64], geometry: &Geometry, kind: PoolKind) -> Vec<f64> {
    let pick = match kind {
        PoolKind::Max => f64::max,
        PoolKind::Min => f64::min,
    };
    let dims = geometry.dims();
    let strides = [1usize, dims[0], dims[0] * dims[1]];
    let mut cur = values.to_vec();
    let mut next = vec![0.0; cur.len()];
    for axis in 0..3 {
        let len = dims[axis];
        let stride = strides[axis];
        let block = stride * len;
        for base in (0..cur.len()).step_by(block) {
            for off in 0..stride {
                let start = base + off;
                for p in 0..len {
                    let idx = start + p * stride;
                    let lo = if p > 0 { cur[idx - stride] } else { 0.0 };
                    let hi = if p + 1 < len { cur[idx + stride] } else { 0.0 };
                    next[idx] = pick(pick(cur[idx], lo), hi);
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// Maximum over each voxel's 3x3x3 neighbourhood; voxels outside the grid
/// count as 0.
pub fn max_pool(v: &ProbVolume) -> (ProbVolume, PoolTrace) {
    let (out, trace) = pool(v.values(), v.geometry(), PoolKind::Max);
    (ProbVolume::from_raw(v.geometry().clone(), out), trace)
}

/// Minimum over each voxel's 3x3x3 neighbourhood; voxels outside the grid
/// count as 0, so structures touching the border erode from it.
pub fn min_pool(v: &ProbVolume) -> (ProbVolume, PoolTrace) {
    let (out, trace) = pool(v.values(), v.geometry(), PoolKind::Min);
    (ProbVolume::from_raw(v.geometry().clone(), out), trace)
}

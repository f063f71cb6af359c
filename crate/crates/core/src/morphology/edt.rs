//! Exact anisotropic Euclidean distance transform.
//!
//! Squared distances are computed with three separable lower-envelope passes
//! (Felzenszwalb & Huttenlocher). The grid is treated as if surrounded by one
//! layer of background, which each 1D pass models as virtual zero-cost sites
//! just outside both ends of the line.

use crate::volume::{BinaryMask, ScalarField};

/// Squared mm distance from each foreground voxel to the nearest background
/// voxel (0 on background).
pub fn squared_distance_transform(mask: &BinaryMask) -> ScalarField {
    let g = mask.geometry();
    let dims = g.dims();
    let spacing = g.spacing();
    let mut f: Vec<f64> = mask
        .values()
        .iter()
        .map(|&b| if b { f64::INFINITY } else { 0.0 })
        .collect();

    let strides = [1usize, dims[0], dims[0] * dims[1]];
    let max_len = *dims.iter().max().unwrap();
    let mut line = vec![0.0; max_len];
    let mut out = vec![0.0; max_len];
    let mut env = Envelope::with_capacity(max_len + 2);

    for axis in 0..3 {
        let len = dims[axis];
        let stride = strides[axis];
        // every line along `axis` starts at an index whose `axis` coordinate is 0
        for start in 0..g.len() {
            if (start / stride) % len != 0 {
                continue;
            }
            for p in 0..len {
                line[p] = f[start + p * stride];
            }
            env.transform(&line[..len], spacing[axis], &mut out[..len]);
            for p in 0..len {
                f[start + p * stride] = out[p];
            }
        }
    }
    ScalarField::new(g.clone(), f).expect("same grid")
}

/// Distance in mm from each foreground voxel to the nearest background voxel.
pub fn distance_transform(mask: &BinaryMask) -> ScalarField {
    let sq = squared_distance_transform(mask);
    let g = sq.geometry().clone();
    ScalarField::new(g, sq.into_values().into_iter().map(f64::sqrt).collect())
        .expect("same grid")
}

struct Envelope {
    /// Site positions (mm) and their costs.
    pos: Vec<f64>,
    cost: Vec<f64>,
    /// Boundaries between consecutive parabolas.
    bounds: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Envelope {
            pos: Vec::with_capacity(n),
            cost: Vec::with_capacity(n),
            bounds: Vec::with_capacity(n + 1),
        }
    }

    fn push_site(&mut self, x: f64, c: f64) {
        loop {
            let Some(&last_x) = self.pos.last() else {
                self.pos.push(x);
                self.cost.push(c);
                self.bounds.push(f64::NEG_INFINITY);
                return;
            };
            let last_c = *self.cost.last().unwrap();
            let s = ((c + x * x) - (last_c + last_x * last_x)) / (2.0 * (x - last_x));
            if s <= *self.bounds.last().unwrap() {
                self.pos.pop();
                self.cost.pop();
                self.bounds.pop();
                continue;
            }
            self.pos.push(x);
            self.cost.push(c);
            self.bounds.push(s);
            return;
        }
    }

    fn transform(&mut self, f: &[f64], step: f64, out: &mut [f64]) {
        self.pos.clear();
        self.cost.clear();
        self.bounds.clear();
        let n = f.len();
        self.push_site(-step, 0.0);
        for (q, &c) in f.iter().enumerate() {
            if c.is_finite() {
                self.push_site(q as f64 * step, c);
            }
        }
        self.push_site(n as f64 * step, 0.0);

        let mut k = 0;
        for (p, o) in out.iter_mut().enumerate() {
            let x = p as f64 * step;
            while k + 1 < self.pos.len() && self.bounds[k + 1] < x {
                k += 1;
            }
            let d = x - self.pos[k];
            *o = self.cost[k] + d * d;
        }
    }
}

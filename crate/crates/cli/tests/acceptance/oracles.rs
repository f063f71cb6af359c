//! Brute-force reference computations, independent of the library code
//! they check.

use hepeval_core::BinaryMask;

/// Squared distance to the nearest background voxel by scanning all of
/// them, the grid padded with one layer of background.
pub fn brute_squared_distance(mask: &BinaryMask) -> Vec<f64> {
    let g = mask.geometry();
    let d = g.dims().map(|v| v as isize);
    let s = g.spacing();
    let mut background = Vec::new();
    for z in -1..=d[2] {
        for y in -1..=d[1] {
            for x in -1..=d[0] {
                let outside = x < 0 || y < 0 || z < 0 || x == d[0] || y == d[1] || z == d[2];
                if outside || !mask.get(g.index(x as usize, y as usize, z as usize)) {
                    background.push([x, y, z]);
                }
            }
        }
    }
    (0..g.len())
        .map(|i| {
            if !mask.get(i) {
                return 0.0;
            }
            let c = g.coords(i).map(|v| v as isize);
            background
                .iter()
                .map(|b| {
                    (0..3)
                        .map(|k| {
                            let t = (c[k] - b[k]) as f64 * s[k];
                            t * t
                        })
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// 26-connected components as sorted voxel lists, by breadth-first flood
/// fill.
pub fn flood_components(m: &BinaryMask) -> Vec<Vec<usize>> {
    let g = m.geometry();
    let mut seen = vec![false; g.len()];
    let mut out = Vec::new();
    for start in m.indices() {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut comp = vec![start];
        let mut k = 0;
        while k < comp.len() {
            let c = g.coords(comp[k]);
            k += 1;
            for dz in -1..=1isize {
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        if let Some(w) =
                            g.checked_index(c[0] as isize + dx, c[1] as isize + dy, c[2] as isize + dz)
                        {
                            if m.get(w) && !seen[w] {
                                seen[w] = true;
                                comp.push(w);
                            }
                        }
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

pub fn overlap(a: &[usize], b: &[usize]) -> usize {
    a.iter().filter(|v| b.binary_search(v).is_ok()).count()
}

/// Two-sided Mann-Whitney p by enumerating every assignment of the pooled
/// ranks to the first group.
pub fn permutation_p(xs: &[f64], ys: &[f64]) -> f64 {
    let n1 = xs.len();
    let n = n1 + ys.len();
    let mut pooled: Vec<f64> = xs.iter().chain(ys).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let rank = |v: f64| pooled.iter().position(|&p| p == v).unwrap() as f64 + 1.0;
    let u_of = |ranks: &[f64]| ranks.iter().sum::<f64>() - (n1 * (n1 + 1)) as f64 / 2.0;
    let observed = u_of(&xs.iter().map(|&x| rank(x)).collect::<Vec<_>>());
    let (mut le, mut ge, mut total) = (0.0, 0.0, 0.0);
    for bits in 0u32..(1 << n) {
        if bits.count_ones() as usize != n1 {
            continue;
        }
        let ranks: Vec<f64> = (0..n).filter(|i| bits >> i & 1 == 1).map(|i| i as f64 + 1.0).collect();
        let u = u_of(&ranks);
        total += 1.0;
        le += (u <= observed) as u8 as f64;
        ge += (u >= observed) as u8 as f64;
    }
    (2.0 * le.min(ge) / total).min(1.0)
}

//! Distance-ordered homotopic thinning to a curve skeleton.
//!
//! Border voxels are deleted when they are simple points (deletion changes
//! neither the number of objects, cavities nor tunnels) and not curve
//! endpoints. What remains is a one-voxel-thin, topology-equivalent
//! centerline.

use std::sync::OnceLock;

use super::edt::squared_distance_transform;
use crate::volume::BinaryMask;

/// Positions `0..27` of the 3x3x3 neighbourhood, `13` being the centre.
fn pos(dx: isize, dy: isize, dz: isize) -> usize {
    ((dz + 1) * 9 + (dy + 1) * 3 + (dx + 1)) as usize
}

struct Tables {
    /// 26-adjacency among neighbourhood positions.
    adj26: Vec<Vec<usize>>,
    /// 6-adjacency among the 18-neighbourhood positions.
    adj6: Vec<Vec<usize>>,
    in18: [bool; 27],
    faces: [usize; 6],
}

fn tables() -> &'static Tables {
    static T: OnceLock<Tables> = OnceLock::new();
    T.get_or_init(|| {
        let coord = |p: usize| [(p % 3) as isize - 1, ((p / 3) % 3) as isize - 1, (p / 9) as isize - 1];
        let mut in18 = [false; 27];
        for (p, slot) in in18.iter_mut().enumerate() {
            let c = coord(p);
            let nz = c.iter().filter(|&&v| v != 0).count();
            *slot = (1..=2).contains(&nz);
        }
        let mut adj26 = vec![Vec::new(); 27];
        let mut adj6 = vec![Vec::new(); 27];
        for p in 0..27 {
            for q in 0..27 {
                if p == q || p == 13 || q == 13 {
                    continue;
                }
                let (a, b) = (coord(p), coord(q));
                let d: Vec<isize> = (0..3).map(|k| (a[k] - b[k]).abs()).collect();
                if d.iter().all(|&v| v <= 1) {
                    adj26[p].push(q);
                    if d.iter().sum::<isize>() == 1 && in18[p] && in18[q] {
                        adj6[p].push(q);
                    }
                }
            }
        }
        let faces = [
            pos(-1, 0, 0),
            pos(1, 0, 0),
            pos(0, -1, 0),
            pos(0, 1, 0),
            pos(0, 0, -1),
            pos(0, 0, 1),
        ];
        Tables {
            adj26,
            adj6,
            in18,
            faces,
        }
    })
}

/// Whether deleting the centre of a neighbourhood (`nb[p]` = foreground)
/// preserves topology under (26, 6) connectivity.
pub(crate) fn is_simple(nb: &[bool; 27]) -> bool {
    let t = tables();
    let mut seen = [false; 27];
    let mut stack = Vec::with_capacity(27);

    // exactly one 26-component of foreground in N26
    let mut fg_components = 0;
    for p in 0..27 {
        if p == 13 || !nb[p] || seen[p] {
            continue;
        }
        fg_components += 1;
        if fg_components > 1 {
            return false;
        }
        seen[p] = true;
        stack.push(p);
        while let Some(q) = stack.pop() {
            for &r in &t.adj26[q] {
                if nb[r] && !seen[r] {
                    seen[r] = true;
                    stack.push(r);
                }
            }
        }
    }
    if fg_components != 1 {
        return false;
    }

    // exactly one 6-component of background in N18 touching a face neighbour
    let mut seen = [false; 27];
    let mut bg_components = 0;
    for &f in &t.faces {
        if nb[f] || seen[f] {
            continue;
        }
        bg_components += 1;
        if bg_components > 1 {
            return false;
        }
        seen[f] = true;
        stack.push(f);
        while let Some(q) = stack.pop() {
            for &r in &t.adj6[q] {
                if t.in18[r] && !nb[r] && !seen[r] {
                    seen[r] = true;
                    stack.push(r);
                }
            }
        }
    }
    bg_components == 1
}

/// Thin `mask` to a curve skeleton.
///
/// Each pass peels the border in the six face directions in turn. Within a
/// direction the candidates are fixed up front (so only one layer goes) and
/// visited in increasing distance, then linear index, re-checking each
/// before deletion. Peeling symmetrically keeps thin branches from being
/// eaten from their tips.
pub fn thin(mask: &BinaryMask) -> BinaryMask {
    let g = mask.geometry();
    let dist = squared_distance_transform(mask);
    let dist = dist.values();
    let mut alive: Vec<bool> = mask.values().to_vec();
    let t = tables();

    let neighbourhood = |alive: &[bool], v: usize| -> [bool; 27] {
        let c = g.coords(v);
        let mut nb = [false; 27];
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let p = pos(dx, dy, dz);
                    if p == 13 {
                        continue;
                    }
                    if let Some(w) =
                        g.checked_index(c[0] as isize + dx, c[1] as isize + dy, c[2] as isize + dz)
                    {
                        nb[p] = alive[w];
                    }
                }
            }
        }
        nb
    };
    let deletable = |nb: &[bool; 27]| nb.iter().filter(|&&b| b).count() > 1 && is_simple(nb);

    let mut live: Vec<usize> = mask.indices().collect();
    loop {
        let mut changed = false;
        for &face in &t.faces {
            let mut candidates: Vec<usize> = live
                .iter()
                .copied()
                .filter(|&v| alive[v])
                .filter(|&v| {
                    let nb = neighbourhood(&alive, v);
                    !nb[face] && deletable(&nb)
                })
                .collect();
            // squared distances are non-negative, so their bit patterns order
            // like the values
            candidates.sort_unstable_by_key(|&v| (dist[v].to_bits(), v));
            for v in candidates {
                if deletable(&neighbourhood(&alive, v)) {
                    alive[v] = false;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
        live.retain(|&v| alive[v]);
    }
    BinaryMask::new(g.clone(), alive).expect("same grid")
}

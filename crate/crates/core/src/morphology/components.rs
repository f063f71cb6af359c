use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::volume::{BinaryMask, Geometry};

/// Voxel adjacency: face (6), face+edge (18) or full (26).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    Eighteen,
    #[default]
    TwentySix,
}

impl Connectivity {
    /// Neighbour offsets `(dx, dy, dz)` in lexicographic `(dz, dy, dx)` order.
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let max_nonzero = match self {
            Connectivity::Six => 1,
            Connectivity::Eighteen => 2,
            Connectivity::TwentySix => 3,
        };
        let mut out = Vec::with_capacity(26);
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let nz = [dx, dy, dz].iter().filter(|&&d| d != 0).count();
                    if nz > 0 && nz <= max_nonzero {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self, Error> {
        match v {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            other => Err(Error::Parameter(format!(
                "connectivity must be 6, 18 or 26, got {other}"
            ))),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

impl fmt::Display for Connectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

/// Inclusive voxel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BoundingBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

/// Connected components of a mask. Ids run `1..=count`; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentLabeling {
    geometry: Geometry,
    ids: Vec<u32>,
    sizes: Vec<usize>,
    boxes: Vec<BoundingBox>,
}

impl ComponentLabeling {
    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    /// Voxel count of component `id` (1-based).
    pub fn size(&self, id: u32) -> usize {
        self.sizes[id as usize - 1]
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn bounding_box(&self, id: u32) -> BoundingBox {
        self.boxes[id as usize - 1]
    }

    /// Mask of a single component.
    pub fn component_mask(&self, id: u32) -> BinaryMask {
        BinaryMask::from_fn(self.geometry.clone(), |i| self.ids[i] == id)
    }
}

/// Label connected foreground regions. Components are numbered in order of
/// their lowest linear index.
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> ComponentLabeling {
    let g = mask.geometry();
    let offsets = connectivity.offsets();
    let mut ids = vec![0u32; g.len()];
    let mut sizes = Vec::new();
    let mut boxes = Vec::new();
    let mut queue = VecDeque::new();

    for start in 0..g.len() {
        if !mask.get(start) || ids[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        ids[start] = id;
        queue.push_back(start);
        let mut size = 0;
        let c0 = g.coords(start);
        let mut bb = BoundingBox { min: c0, max: c0 };
        while let Some(cur) = queue.pop_front() {
            size += 1;
            let c = g.coords(cur);
            for k in 0..3 {
                bb.min[k] = bb.min[k].min(c[k]);
                bb.max[k] = bb.max[k].max(c[k]);
            }
            for off in &offsets {
                let Some(nb) = g.checked_index(
                    c[0] as isize + off[0],
                    c[1] as isize + off[1],
                    c[2] as isize + off[2],
                ) else {
                    continue;
                };
                if mask.get(nb) && ids[nb] == 0 {
                    ids[nb] = id;
                    queue.push_back(nb);
                }
            }
        }
        sizes.push(size);
        boxes.push(bb);
    }

    ComponentLabeling {
        geometry: g.clone(),
        ids,
        sizes,
        boxes,
    }
}

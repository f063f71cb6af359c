//! Dense 3D volumes over a shared voxel grid.
//!
//! All grids are stored x-fastest: the voxel `(x, y, z)` lives at linear
//! index `x + nx * (y + ny * z)`, which is the NIfTI on-disk order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-6;

/// Voxel grid and its placement in physical (mm) space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GeometryRepr", into = "GeometryRepr")]
pub struct Geometry {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    /// Row-major 3x3 matrix; column `j` is the direction of voxel axis `j`.
    orientation: [[f64; 3]; 3],
}

#[derive(Serialize, Deserialize)]
struct GeometryRepr {
    dims: [usize; 3],
    spacing: [f64; 3],
    #[serde(default)]
    origin: [f64; 3],
    #[serde(default = "identity")]
    orientation: [[f64; 3]; 3],
}

fn identity() -> [[f64; 3]; 3] {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

impl TryFrom<GeometryRepr> for Geometry {
    type Error = Error;

    fn try_from(r: GeometryRepr) -> Result<Self> {
        Geometry::new(r.dims, r.spacing)?.with_placement(r.origin, r.orientation)
    }
}

impl From<Geometry> for GeometryRepr {
    fn from(g: Geometry) -> Self {
        GeometryRepr {
            dims: g.dims,
            spacing: g.spacing,
            origin: g.origin,
            orientation: g.orientation,
        }
    }
}

impl Geometry {
    /// Grid with identity orientation and zero origin.
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::param(format!("dims must be positive, got {dims:?}")));
        }
        if dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .is_none()
        {
            return Err(Error::param(format!("dims {dims:?} overflow the voxel count")));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::param(format!(
                "spacing must be finite and positive, got {spacing:?}"
            )));
        }
        Ok(Geometry {
            dims,
            spacing,
            origin: [0.0; 3],
            orientation: identity(),
        })
    }

    pub fn with_placement(mut self, origin: [f64; 3], orientation: [[f64; 3]; 3]) -> Result<Self> {
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::param(format!("origin must be finite, got {origin:?}")));
        }
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = (0..3).map(|r| orientation[r][a] * orientation[r][b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                if !((dot - want).abs() <= ORTHONORMAL_TOL) {
                    return Err(Error::param(format!(
                        "orientation columns are not orthonormal (col {a} . col {b} = {dot})"
                    )));
                }
            }
        }
        self.origin = origin;
        self.orientation = orientation;
        Ok(self)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn orientation(&self) -> [[f64; 3]; 3] {
        self.orientation
    }

    /// Total number of voxels.
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Volume of a single voxel in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Index of a signed coordinate, `None` when it falls outside the grid.
    #[inline]
    pub fn checked_index(&self, x: isize, y: isize, z: isize) -> Option<usize> {
        if x < 0 || y < 0 || z < 0 {
            return None;
        }
        let (x, y, z) = (x as usize, y as usize, z as usize);
        if x >= self.dims[0] || y >= self.dims[1] || z >= self.dims[2] {
            return None;
        }
        Some(self.index(x, y, z))
    }

    /// Voxel-grid position in mm, ignoring origin and orientation.
    pub fn grid_position(&self, idx: usize) -> [f64; 3] {
        let c = self.coords(idx);
        [
            c[0] as f64 * self.spacing[0],
            c[1] as f64 * self.spacing[1],
            c[2] as f64 * self.spacing[2],
        ]
    }

    /// World position of a voxel centre in mm.
    pub fn world_position(&self, idx: usize) -> [f64; 3] {
        let g = self.grid_position(idx);
        let mut out = self.origin;
        for (r, o) in out.iter_mut().enumerate() {
            *o += (0..3).map(|c| self.orientation[r][c] * g[c]).sum::<f64>();
        }
        out
    }

    /// Squared mm distance between two voxel centres.
    pub fn distance_sq(&self, a: usize, b: usize) -> f64 {
        let ca = self.coords(a);
        let cb = self.coords(b);
        (0..3)
            .map(|k| {
                let d = (ca[k] as f64 - cb[k] as f64) * self.spacing[k];
                d * d
            })
            .sum()
    }

    /// True when both grids have identical dims.
    pub fn same_grid(&self, other: &Geometry) -> bool {
        self.dims == other.dims
    }

    pub(crate) fn ensure_same_grid(&self, other: &Geometry) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::Shape {
                expected: self.dims,
                found: other.dims,
            })
        }
    }
}

/// Foreground probabilities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVolume {
    geometry: Geometry,
    values: Vec<f64>,
}

impl ProbVolume {
    pub fn new(geometry: Geometry, values: Vec<f64>) -> Result<Self> {
        check_len(&geometry, values.len())?;
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(Error::Range(format!(
                "probability at voxel {i} is {v}, outside [0, 1]"
            )));
        }
        Ok(ProbVolume { geometry, values })
    }

    /// Build from arbitrary finite values, clamping into `[0, 1]`.
    /// Returns the volume and how many values were clamped.
    pub fn clamped(geometry: Geometry, mut values: Vec<f64>) -> Result<(Self, usize)> {
        check_len(&geometry, values.len())?;
        let mut clamped = 0;
        for v in values.iter_mut() {
            if !v.is_finite() {
                return Err(Error::Range(format!("non-finite probability {v}")));
            }
            if *v < 0.0 || *v > 1.0 {
                *v = v.clamp(0.0, 1.0);
                clamped += 1;
            }
        }
        Ok((ProbVolume { geometry, values }, clamped))
    }

    pub fn zeros(geometry: Geometry) -> Self {
        let n = geometry.len();
        ProbVolume {
            geometry,
            values: vec![0.0; n],
        }
    }

    pub(crate) fn from_raw(geometry: Geometry, values: Vec<f64>) -> Self {
        debug_assert_eq!(geometry.len(), values.len());
        ProbVolume { geometry, values }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Elementwise `1 - v`.
    pub fn complement(&self) -> ProbVolume {
        ProbVolume::from_raw(
            self.geometry.clone(),
            self.values.iter().map(|v| 1.0 - v).collect(),
        )
    }

    /// Replace one voxel, keeping the `[0, 1]` invariant.
    pub fn with_value(&self, idx: usize, value: f64) -> Result<ProbVolume> {
        if !(value.is_finite() && (0.0..=1.0).contains(&value)) {
            return Err(Error::Range(format!("probability {value} outside [0, 1]")));
        }
        let mut values = self.values.clone();
        values[idx] = value;
        Ok(ProbVolume::from_raw(self.geometry.clone(), values))
    }
}

impl From<&BinaryMask> for ProbVolume {
    fn from(mask: &BinaryMask) -> Self {
        ProbVolume::from_raw(
            mask.geometry.clone(),
            mask.values.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }
}

/// Binary membership grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    geometry: Geometry,
    values: Vec<bool>,
}

impl BinaryMask {
    pub fn new(geometry: Geometry, values: Vec<bool>) -> Result<Self> {
        check_len(&geometry, values.len())?;
        Ok(BinaryMask { geometry, values })
    }

    pub fn empty(geometry: Geometry) -> Self {
        let n = geometry.len();
        BinaryMask {
            geometry,
            values: vec![false; n],
        }
    }

    pub fn from_fn(geometry: Geometry, mut f: impl FnMut(usize) -> bool) -> Self {
        let values = (0..geometry.len()).map(&mut f).collect();
        BinaryMask { geometry, values }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn get(&self, idx: usize) -> bool {
        self.values[idx]
    }

    pub fn set(&mut self, idx: usize, v: bool) {
        self.values[idx] = v;
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.values.iter().any(|&b| b)
    }

    /// Linear indices of foreground voxels in ascending order.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn and_not(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> Result<usize> {
        self.geometry.ensure_same_grid(&other.geometry)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .filter(|(&a, &b)| a && b)
            .count())
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> Result<BinaryMask> {
        self.geometry.ensure_same_grid(&other.geometry)?;
        Ok(BinaryMask {
            geometry: self.geometry.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }
}

/// Real-valued field over a grid (distances, gradients, per-voxel losses).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    geometry: Geometry,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(geometry: Geometry, values: Vec<f64>) -> Result<Self> {
        check_len(&geometry, values.len())?;
        Ok(ScalarField { geometry, values })
    }

    pub fn zeros(geometry: Geometry) -> Self {
        let n = geometry.len();
        ScalarField {
            geometry,
            values: vec![0.0; n],
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Euclidean norm of the field.
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// One named structure in a label map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Structure {
    pub id: u8,
    pub name: String,
    /// Optional structures may be legitimately absent from a case.
    #[serde(default)]
    pub optional: bool,
}

/// Mapping from label ids to hepatic structure names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Structure>", into = "Vec<Structure>")]
pub struct LabelSchema {
    structures: Vec<Structure>,
}

impl LabelSchema {
    pub const BACKGROUND: u8 = 0;
    pub const PARENCHYMA: u8 = 1;
    pub const TUMOR: u8 = 2;
    pub const PORTAL_VEIN: u8 = 3;
    pub const HEPATIC_VEIN: u8 = 4;
    pub const BILIARY_TREE: u8 = 5;
    pub const GALLBLADDER: u8 = 6;

    pub fn new(structures: Vec<Structure>) -> Result<Self> {
        let mut ids = std::collections::BTreeSet::new();
        let mut names = std::collections::BTreeSet::new();
        for s in &structures {
            if s.name.trim().is_empty() {
                return Err(Error::Schema(format!("label {} has an empty name", s.id)));
            }
            if !ids.insert(s.id) {
                return Err(Error::Schema(format!("duplicate label id {}", s.id)));
            }
            if !names.insert(s.name.clone()) {
                return Err(Error::Schema(format!("duplicate structure name `{}`", s.name)));
            }
        }
        match structures.iter().find(|s| s.id == Self::BACKGROUND) {
            Some(s) if s.name == "background" => {}
            Some(s) => {
                return Err(Error::Schema(format!(
                    "id 0 is reserved for background, found `{}`",
                    s.name
                )))
            }
            None => return Err(Error::Schema("schema lacks background id 0".into())),
        }
        Ok(LabelSchema { structures })
    }

    pub fn structures(&self) -> &[Structure] {
        &self.structures
    }

    pub fn contains(&self, id: u8) -> bool {
        self.structures.iter().any(|s| s.id == id)
    }

    pub fn name(&self, id: u8) -> Option<&str> {
        self.structures
            .iter()
            .find(|s| s.id == id)
            .map(|s| s.name.as_str())
    }

    pub fn id_of(&self, name: &str) -> Option<u8> {
        self.structures.iter().find(|s| s.name == name).map(|s| s.id)
    }

    /// Non-background structures in schema order.
    pub fn foreground(&self) -> impl Iterator<Item = &Structure> {
        self.structures.iter().filter(|s| s.id != Self::BACKGROUND)
    }
}

impl Default for LabelSchema {
    fn default() -> Self {
        let s = |id, name: &str, optional| Structure {
            id,
            name: name.to_string(),
            optional,
        };
        LabelSchema {
            structures: vec![
                s(Self::BACKGROUND, "background", false),
                s(Self::PARENCHYMA, "parenchyma", false),
                s(Self::TUMOR, "tumor", false),
                s(Self::PORTAL_VEIN, "portal_vein", false),
                s(Self::HEPATIC_VEIN, "hepatic_vein", false),
                s(Self::BILIARY_TREE, "biliary_tree", false),
                s(Self::GALLBLADDER, "gallbladder", true),
            ],
        }
    }
}

impl TryFrom<Vec<Structure>> for LabelSchema {
    type Error = Error;

    fn try_from(v: Vec<Structure>) -> Result<Self> {
        LabelSchema::new(v)
    }
}

impl From<LabelSchema> for Vec<Structure> {
    fn from(s: LabelSchema) -> Self {
        s.structures
    }
}

/// Multi-structure label map.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    geometry: Geometry,
    labels: Vec<u8>,
    schema: LabelSchema,
}

impl LabelVolume {
    pub fn new(geometry: Geometry, labels: Vec<u8>, schema: LabelSchema) -> Result<Self> {
        check_len(&geometry, labels.len())?;
        let mut seen = [false; 256];
        for &l in &labels {
            seen[l as usize] = true;
        }
        if let Some(bad) = (0..256).find(|&l| seen[l] && !schema.contains(l as u8)) {
            return Err(Error::Schema(format!("label {bad} is not in the schema")));
        }
        Ok(LabelVolume {
            geometry,
            labels,
            schema,
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn schema(&self) -> &LabelSchema {
        &self.schema
    }

    pub fn into_labels(self) -> Vec<u8> {
        self.labels
    }

    /// Mask of voxels carrying label `id`.
    pub fn extract_mask(&self, id: u8) -> Result<BinaryMask> {
        if !self.schema.contains(id) {
            return Err(Error::Schema(format!("label id {id} is not in the schema")));
        }
        Ok(BinaryMask {
            geometry: self.geometry.clone(),
            values: self.labels.iter().map(|&l| l == id).collect(),
        })
    }

    /// Mask of voxels carrying any of the given labels; ids absent from the
    /// schema are ignored.
    pub fn mask_of_any(&self, ids: &[u8]) -> BinaryMask {
        BinaryMask {
            geometry: self.geometry.clone(),
            values: self.labels.iter().map(|l| ids.contains(l)).collect(),
        }
    }

    pub fn count(&self, id: u8) -> usize {
        self.labels.iter().filter(|&&l| l == id).count()
    }
}

/// Free-function form of [`LabelVolume::extract_mask`].
pub fn extract_mask(volume: &LabelVolume, id: u8) -> Result<BinaryMask> {
    volume.extract_mask(id)
}

/// Foreground volume in mm³.
pub fn physical_volume(mask: &BinaryMask) -> f64 {
    mask.count() as f64 * mask.geometry().voxel_volume()
}

fn check_len(geometry: &Geometry, len: usize) -> Result<()> {
    if geometry.len() != len {
        return Err(Error::param(format!(
            "value count {len} does not match grid of {} voxels",
            geometry.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(dims: [usize; 3]) -> Geometry {
        Geometry::new(dims, [1.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(Geometry::new([0, 2, 2], [1.0; 3]).is_err());
        assert!(Geometry::new([2, 2, 2], [1.0, -1.0, 1.0]).is_err());
        assert!(Geometry::new([2, 2, 2], [1.0, f64::NAN, 1.0]).is_err());
        let g = geom([2, 2, 2]);
        let skew = [[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(g.clone().with_placement([0.0; 3], skew).is_err());
        let rot = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(g.with_placement([1.0, 2.0, 3.0], rot).is_ok());
    }

    #[test]
    fn index_roundtrip() {
        let g = geom([4, 3, 2]);
        for i in 0..g.len() {
            let [x, y, z] = g.coords(i);
            assert_eq!(g.index(x, y, z), i);
        }
        assert_eq!(g.index(1, 0, 0), 1);
        assert_eq!(g.index(0, 1, 0), 4);
        assert_eq!(g.index(0, 0, 1), 12);
    }

    #[test]
    fn extract_mask_by_label() {
        let g = geom([4, 1, 1]);
        let v = LabelVolume::new(g, vec![1, 2, 2, 0], LabelSchema::default()).unwrap();
        let m = v.extract_mask(2).unwrap();
        assert_eq!(m.values(), &[false, true, true, false]);
        assert!(matches!(v.extract_mask(7), Err(Error::Schema(_))));
    }

    #[test]
    fn masks_partition_voxels() {
        let g = geom([3, 3, 3]);
        let labels: Vec<u8> = (0..27).map(|i| (i % 7) as u8).collect();
        let v = LabelVolume::new(g, labels, LabelSchema::default()).unwrap();
        let total: usize = v
            .schema()
            .structures()
            .iter()
            .map(|s| v.extract_mask(s.id).unwrap().count())
            .sum();
        assert_eq!(total, 27);
    }

    #[test]
    fn label_outside_schema_rejected() {
        let g = geom([2, 1, 1]);
        assert!(matches!(
            LabelVolume::new(g, vec![0, 9], LabelSchema::default()),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn schema_validation() {
        let s = |id, name: &str| Structure {
            id,
            name: name.into(),
            optional: false,
        };
        assert!(LabelSchema::new(vec![s(0, "background"), s(1, "a"), s(1, "b")]).is_err());
        assert!(LabelSchema::new(vec![s(0, "background"), s(1, "a"), s(2, "a")]).is_err());
        assert!(LabelSchema::new(vec![s(0, "liver")]).is_err());
        assert!(LabelSchema::new(vec![s(1, "a")]).is_err());
        assert!(LabelSchema::new(vec![s(0, "background"), s(3, " ")]).is_err());
    }

    #[test]
    fn physical_volume_uses_spacing() {
        let g = Geometry::new([10, 1, 1], [2.0, 2.0, 3.0]).unwrap();
        let m = BinaryMask::from_fn(g.clone(), |_| true);
        assert_eq!(physical_volume(&m), 120.0);
        assert_eq!(physical_volume(&BinaryMask::empty(g)), 0.0);
        let full = BinaryMask::from_fn(geom([4, 4, 4]), |_| true);
        assert_eq!(physical_volume(&full), 64.0);
    }

    #[test]
    fn probabilities_validated_or_clamped() {
        let g = geom([3, 1, 1]);
        assert!(ProbVolume::new(g.clone(), vec![0.0, 1.2, 0.5]).is_err());
        let (p, n) = ProbVolume::clamped(g, vec![-0.1, 1.2, 0.5]).unwrap();
        assert_eq!(n, 2);
        assert_eq!(p.values(), &[0.0, 1.0, 0.5]);
    }
}

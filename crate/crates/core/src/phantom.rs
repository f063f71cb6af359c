//! Procedural liver phantoms with known topology, and controlled
//! degradations of them that stand in for network predictions.
//!
//! All positions and lengths are in mm in the grid frame: voxel `(x, y, z)`
//! has its centre at `(x sx, y sy, z sz)`, regardless of the geometry's
//! origin and orientation.

use std::collections::{BTreeMap, VecDeque};
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{max_pool, min_pool};
use crate::volume::{BinaryMask, Geometry, LabelSchema, LabelVolume, ProbVolume};

/// Tag value of voxels that belong to no tree edge.
pub const NO_TAG: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    /// `sum(((p - c) / a)^2)`; at most 1 inside.
    fn level(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|k| {
                let t = (p[k] - self.center[k]) / self.semi_axes[k];
                t * t
            })
            .sum()
    }

    pub fn volume(&self) -> f64 {
        4.0 / 3.0 * PI * self.semi_axes.iter().product::<f64>()
    }
}

/// A symmetric bifurcating tree. `levels` counts bifurcations, so a tree has
/// `2^(levels + 1) - 1` edges; `levels = 0` is a single straight tube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeSpec {
    pub root: [f64; 3],
    pub direction: [f64; 3],
    pub levels: usize,
    pub root_radius: f64,
    #[serde(default = "default_radius_decay")]
    pub radius_decay: f64,
    pub segment_length: f64,
    #[serde(default = "default_length_decay")]
    pub length_decay: f64,
    #[serde(default = "default_branch_angle")]
    pub branch_angle_deg: f64,
}

fn default_radius_decay() -> f64 {
    0.75
}

fn default_length_decay() -> f64 {
    0.8
}

fn default_branch_angle() -> f64 {
    40.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub seed: u64,
    pub geometry: Geometry,
    pub parenchyma: Ellipsoid,
    pub portal_vein: Option<TreeSpec>,
    pub hepatic_vein: Option<TreeSpec>,
    pub biliary_tree: Option<TreeSpec>,
    pub gallbladder_present: bool,
    pub gallbladder: Sphere,
    pub tumors: Vec<Sphere>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        // grid centre of 128^3 at (2, 2, 3) mm is (127, 127, 190.5)
        PhantomSpec {
            seed: 0,
            geometry: Geometry::new([128, 128, 128], [2.0, 2.0, 3.0]).expect("valid default"),
            parenchyma: Ellipsoid {
                center: [127.0, 127.0, 190.5],
                semi_axes: [100.0, 80.0, 90.0],
            },
            portal_vein: Some(TreeSpec {
                root: [52.0, 117.0, 170.5],
                direction: [1.0, 0.0, 0.15],
                levels: 3,
                root_radius: 7.0,
                radius_decay: 0.75,
                segment_length: 45.0,
                length_decay: 0.75,
                branch_angle_deg: 40.0,
            }),
            hepatic_vein: Some(TreeSpec {
                root: [202.0, 142.0, 215.5],
                direction: [-1.0, 0.1, 0.0],
                levels: 3,
                root_radius: 6.0,
                radius_decay: 0.75,
                segment_length: 36.0,
                length_decay: 0.75,
                branch_angle_deg: 40.0,
            }),
            biliary_tree: Some(TreeSpec {
                root: [87.0, 167.0, 150.5],
                direction: [1.0, -0.2, 0.0],
                levels: 2,
                root_radius: 3.0,
                radius_decay: 0.75,
                segment_length: 35.0,
                length_decay: 0.75,
                branch_angle_deg: 40.0,
            }),
            gallbladder_present: true,
            gallbladder: Sphere {
                center: [162.0, 87.0, 155.5],
                radius: 16.0,
            },
            tumors: vec![
                Sphere {
                    center: [157.0, 157.0, 230.5],
                    radius: 10.0,
                },
                Sphere {
                    center: [107.0, 82.0, 220.5],
                    radius: 8.0,
                },
            ],
        }
    }
}

/// One tree edge as constructed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchEdge {
    pub id: u32,
    /// Label id of the tree this edge belongs to.
    pub structure: u8,
    pub generation: u8,
    pub parent: Option<u32>,
    pub children: Vec<u32>,
    pub radius_mm: f64,
    pub length_mm: f64,
    /// Centerline polyline (start and end of the straight segment).
    pub centerline: Vec<[f64; 3]>,
}

impl BranchEdge {
    fn start(&self) -> [f64; 3] {
        self.centerline[0]
    }

    fn end(&self) -> [f64; 3] {
        *self.centerline.last().expect("non-empty centerline")
    }

    /// Analytic cylinder volume `pi r^2 L` (caps excluded).
    pub fn analytic_volume(&self) -> f64 {
        PI * self.radius_mm * self.radius_mm * self.length_mm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticVolumes {
    pub parenchyma: f64,
    pub gallbladder: Option<f64>,
    pub tumors: Vec<f64>,
    /// Indexed by edge id.
    pub edges: Vec<f64>,
}

/// A generated case with everything known by construction.
#[derive(Debug, Clone)]
pub struct PhantomTruth {
    pub labels: LabelVolume,
    /// Edge id of every tree voxel; [`NO_TAG`] elsewhere, including the
    /// gallbladder.
    pub tags: Vec<u32>,
    pub edges: Vec<BranchEdge>,
    pub analytic_volumes: AnalyticVolumes,
    pub spec: PhantomSpec,
}

/// JSON-friendly summary of a [`PhantomTruth`] without the voxel arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthManifest {
    pub spec: PhantomSpec,
    pub edges: Vec<ManifestEdge>,
    pub analytic_volumes: AnalyticVolumes,
    pub label_counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEdge {
    #[serde(flatten)]
    pub edge: BranchEdge,
    pub voxel_count: usize,
}

impl PhantomTruth {
    pub fn edge(&self, id: u32) -> Option<&BranchEdge> {
        self.edges.get(id as usize)
    }

    /// Number of voxels tagged with edge `id`.
    pub fn tag_count(&self, id: u32) -> usize {
        self.tags.iter().filter(|&&t| t == id).count()
    }

    /// Mask of voxels of `structure` whose construction generation is at
    /// most `max_generation`.
    pub fn generation_mask(&self, structure: u8, max_generation: u8) -> BinaryMask {
        BinaryMask::from_fn(self.labels.geometry().clone(), |i| {
            let t = self.tags[i];
            t != NO_TAG && {
                let e = &self.edges[t as usize];
                e.structure == structure && e.generation <= max_generation
            }
        })
    }

    pub fn manifest(&self) -> TruthManifest {
        let mut counts = vec![0usize; self.edges.len()];
        for &t in &self.tags {
            if t != NO_TAG {
                counts[t as usize] += 1;
            }
        }
        let schema = self.labels.schema();
        let label_counts = schema
            .structures()
            .iter()
            .map(|s| (s.name.clone(), self.labels.count(s.id)))
            .collect();
        TruthManifest {
            spec: self.spec.clone(),
            edges: self
                .edges
                .iter()
                .zip(counts)
                .map(|(e, voxel_count)| ManifestEdge {
                    edge: e.clone(),
                    voxel_count,
                })
                .collect(),
            analytic_volumes: self.analytic_volumes.clone(),
            label_counts,
        }
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    scale(a, 1.0 / dot(a, a).sqrt())
}

/// Distance from `p` to the segment `a`-`b`.
fn segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 > 0.0 {
        (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let d = sub(p, add(a, scale(ab, t)));
    dot(d, d).sqrt()
}

fn gen_err(structure: impl Into<String>, detail: impl Into<String>) -> Error {
    Error::Generation {
        structure: structure.into(),
        detail: detail.into(),
    }
}

fn check_positive(structure: &str, what: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(gen_err(structure, format!("{what} must be positive, got {v}")))
    }
}

/// Axis-aligned extent of the grid's voxel centres, in mm.
fn grid_extent(g: &Geometry) -> [f64; 3] {
    let d = g.dims();
    let s = g.spacing();
    [
        (d[0] - 1) as f64 * s[0],
        (d[1] - 1) as f64 * s[1],
        (d[2] - 1) as f64 * s[2],
    ]
}

fn check_in_bounds(structure: &str, g: &Geometry, lo: [f64; 3], hi: [f64; 3]) -> Result<()> {
    let ext = grid_extent(g);
    for k in 0..3 {
        if lo[k] < 0.0 || hi[k] > ext[k] {
            return Err(gen_err(
                structure,
                format!(
                    "extends to [{:.1}, {:.1}] mm along axis {k}, grid spans [0, {:.1}] mm",
                    lo[k], hi[k], ext[k]
                ),
            ));
        }
    }
    Ok(())
}

/// Points spread evenly over the unit sphere.
fn sphere_directions(n: usize) -> impl Iterator<Item = [f64; 3]> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n).map(move |i| {
        let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        let r = (1.0 - y * y).sqrt();
        let th = golden * i as f64;
        [r * th.cos(), y, r * th.sin()]
    })
}

fn check_sphere(name: &str, s: &Sphere, spec: &PhantomSpec) -> Result<()> {
    check_positive(name, "radius", s.radius)?;
    let r = [s.radius; 3];
    check_in_bounds(name, &spec.geometry, sub(s.center, r), add(s.center, r))?;
    // the axis extremes plus a dense set of surface points must lie inside
    let axes = [
        [1.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, -1.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 0.0, -1.0],
    ];
    for d in axes.into_iter().chain(sphere_directions(256)) {
        if spec.parenchyma.level(add(s.center, scale(d, s.radius))) > 1.0 {
            return Err(gen_err(name, "sphere is not inside the parenchyma"));
        }
    }
    Ok(())
}

impl PhantomSpec {
    /// Check everything that does not depend on the generated tree layout.
    pub fn validate(&self) -> Result<()> {
        let p = &self.parenchyma;
        for &a in &p.semi_axes {
            check_positive("parenchyma", "semi-axis", a)?;
        }
        check_in_bounds(
            "parenchyma",
            &self.geometry,
            sub(p.center, p.semi_axes),
            add(p.center, p.semi_axes),
        )?;
        for (name, tree) in self.trees() {
            check_positive(name, "root_radius", tree.root_radius)?;
            check_positive(name, "segment_length", tree.segment_length)?;
            for (what, v) in [
                ("radius_decay", tree.radius_decay),
                ("length_decay", tree.length_decay),
            ] {
                if !(v > 0.0 && v <= 1.0) {
                    return Err(gen_err(name, format!("{what} must be in (0, 1], got {v}")));
                }
            }
            if tree.levels > 4 {
                return Err(gen_err(
                    name,
                    format!("at most 4 bifurcation levels, got {}", tree.levels),
                ));
            }
            if !(tree.branch_angle_deg > 0.0 && tree.branch_angle_deg < 90.0) {
                return Err(gen_err(
                    name,
                    format!("branch_angle_deg must be in (0, 90), got {}", tree.branch_angle_deg),
                ));
            }
            if dot(tree.direction, tree.direction) == 0.0 {
                return Err(gen_err(name, "direction must be non-zero"));
            }
        }
        if self.gallbladder_present {
            check_sphere("gallbladder", &self.gallbladder, self)?;
        }
        for (i, t) in self.tumors.iter().enumerate() {
            check_sphere(&format!("tumors[{i}]"), t, self)?;
        }
        Ok(())
    }

    fn trees(&self) -> impl Iterator<Item = (&'static str, &TreeSpec)> {
        [
            ("portal_vein", self.portal_vein.as_ref()),
            ("hepatic_vein", self.hepatic_vein.as_ref()),
            ("biliary_tree", self.biliary_tree.as_ref()),
        ]
        .into_iter()
        .filter_map(|(n, t)| t.map(|t| (n, t)))
    }
}

fn structure_of(name: &str) -> u8 {
    match name {
        "portal_vein" => LabelSchema::PORTAL_VEIN,
        "hepatic_vein" => LabelSchema::HEPATIC_VEIN,
        _ => LabelSchema::BILIARY_TREE,
    }
}

/// Lay out one tree's edges breadth-first, so ids increase with generation.
fn build_tree(
    name: &str,
    tree: &TreeSpec,
    rng: &mut ChaCha8Rng,
    first_id: u32,
) -> Vec<BranchEdge> {
    let structure = structure_of(name);
    let d0 = normalize(tree.direction);
    // any unit vector perpendicular to the root direction, then a small roll
    let helper = if d0[0].abs() < 0.9 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let u = normalize(cross(d0, helper));
    let v = cross(d0, u);
    let roll: f64 = rng.gen_range(-PI / 12.0..PI / 12.0);
    let u0 = add(scale(u, roll.cos()), scale(v, roll.sin()));

    let angle = tree.branch_angle_deg.to_radians();
    let mut edges: Vec<BranchEdge> = Vec::new();
    // (start, direction, in-plane frame vector, radius, nominal length, generation, parent)
    let mut queue = VecDeque::new();
    queue.push_back((tree.root, d0, u0, tree.root_radius, tree.segment_length, 0u8, None));
    while let Some((start, dir, frame, radius, nominal, generation, parent)) = queue.pop_front() {
        let id = first_id + edges.len() as u32;
        let length = nominal * rng.gen_range(0.9..1.1);
        let end = add(start, scale(dir, length));
        if let Some(p) = parent {
            edges[(p - first_id) as usize].children.push(id);
        }
        edges.push(BranchEdge {
            id,
            structure,
            generation,
            parent,
            children: Vec::new(),
            radius_mm: radius,
            length_mm: length,
            centerline: vec![start, end],
        });
        if (generation as usize) < tree.levels {
            // children bifurcate in the plane of `dir` and `frame`; their own
            // plane is turned by 90 degrees
            let next_frame = cross(dir, frame);
            for sign in [1.0, -1.0] {
                let child = normalize(add(
                    scale(dir, angle.cos()),
                    scale(frame, sign * angle.sin()),
                ));
                queue.push_back((
                    end,
                    child,
                    next_frame,
                    radius * tree.radius_decay,
                    nominal * tree.length_decay,
                    generation + 1,
                    Some(id),
                ));
            }
        }
    }
    edges
}

/// Voxel index range along one axis covering `[lo, hi]` mm.
fn axis_range(lo: f64, hi: f64, step: f64, n: usize) -> std::ops::Range<usize> {
    let a = (lo / step).ceil().max(0.0) as usize;
    let b = ((hi / step).floor() + 1.0).clamp(0.0, n as f64) as usize;
    a.min(b)..b
}

/// Visit voxels whose centre lies within the axis-aligned box `[lo, hi]`.
fn for_box(g: &Geometry, lo: [f64; 3], hi: [f64; 3], mut f: impl FnMut(usize, [f64; 3])) {
    let d = g.dims();
    let s = g.spacing();
    let rx = axis_range(lo[0], hi[0], s[0], d[0]);
    let ry = axis_range(lo[1], hi[1], s[1], d[1]);
    let rz = axis_range(lo[2], hi[2], s[2], d[2]);
    for z in rz {
        for y in ry.clone() {
            for x in rx.clone() {
                let p = [x as f64 * s[0], y as f64 * s[1], z as f64 * s[2]];
                f(g.index(x, y, z), p);
            }
        }
    }
}

fn rasterize_sphere(g: &Geometry, s: &Sphere, mut f: impl FnMut(usize)) {
    let r = [s.radius; 3];
    let r2 = s.radius * s.radius;
    for_box(g, sub(s.center, r), add(s.center, r), |i, p| {
        let d = sub(p, s.center);
        if dot(d, d) <= r2 {
            f(i);
        }
    });
}

/// Voxels whose centre lies within `radius` of the segment `a`-`b`, with
/// their distance to the axis.
fn rasterize_tube(
    g: &Geometry,
    a: [f64; 3],
    b: [f64; 3],
    radius: f64,
    mut f: impl FnMut(usize, f64),
) {
    let lo = [
        a[0].min(b[0]) - radius,
        a[1].min(b[1]) - radius,
        a[2].min(b[2]) - radius,
    ];
    let hi = [
        a[0].max(b[0]) + radius,
        a[1].max(b[1]) + radius,
        a[2].max(b[2]) + radius,
    ];
    for_box(g, lo, hi, |i, p| {
        let d = segment_distance(p, a, b);
        if d <= radius {
            f(i, d);
        }
    });
}

/// Mask of a capped cylinder around the segment `a`-`b`.
pub fn tube_mask(g: &Geometry, a: [f64; 3], b: [f64; 3], radius: f64) -> BinaryMask {
    let mut m = BinaryMask::empty(g.clone());
    rasterize_tube(g, a, b, radius, |i, _| m.set(i, true));
    m
}

/// Mask of a ball.
pub fn sphere_mask(g: &Geometry, center: [f64; 3], radius: f64) -> BinaryMask {
    let mut m = BinaryMask::empty(g.clone());
    rasterize_sphere(g, &Sphere { center, radius }, |i| m.set(i, true));
    m
}

/// Generate a phantom. Pure function of `spec`, including its seed.
pub fn generate_case(spec: &PhantomSpec) -> Result<PhantomTruth> {
    spec.validate()?;
    let g = &spec.geometry;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut edges = Vec::new();
    let mut tree_ranges = Vec::new();
    for (name, tree) in spec.trees() {
        let first = edges.len() as u32;
        let tree_edges = build_tree(name, tree, &mut rng, first);
        for e in &tree_edges {
            let (a, b, r) = (e.start(), e.end(), e.radius_mm);
            let lo = [a[0].min(b[0]) - r, a[1].min(b[1]) - r, a[2].min(b[2]) - r];
            let hi = [a[0].max(b[0]) + r, a[1].max(b[1]) + r, a[2].max(b[2]) + r];
            check_in_bounds(name, g, lo, hi)?;
            for p in [a, b] {
                if spec.parenchyma.level(p) > 1.0 {
                    return Err(gen_err(
                        name,
                        format!("edge {} leaves the parenchyma at {p:?}", e.id),
                    ));
                }
            }
        }
        tree_ranges.push((structure_of(name), first..first + tree_edges.len() as u32));
        edges.extend(tree_edges);
    }

    let n = g.len();
    let mut labels = vec![LabelSchema::BACKGROUND; n];
    let mut tags = vec![NO_TAG; n];

    for (i, l) in labels.iter_mut().enumerate() {
        if spec.parenchyma.level(g.grid_position(i)) <= 1.0 {
            *l = LabelSchema::PARENCHYMA;
        }
    }
    if spec.gallbladder_present {
        // the gallbladder is part of the biliary label, as a separate component
        rasterize_sphere(g, &spec.gallbladder, |i| labels[i] = LabelSchema::BILIARY_TREE);
    }

    // trees in precedence order: biliary < hepatic < portal
    let order = [
        LabelSchema::BILIARY_TREE,
        LabelSchema::HEPATIC_VEIN,
        LabelSchema::PORTAL_VEIN,
    ];
    for structure in order {
        for (s, range) in &tree_ranges {
            if *s != structure {
                continue;
            }
            // nearest axis wins; equal distances keep the lower edge id
            let mut best: BTreeMap<usize, (f64, u32)> = BTreeMap::new();
            for id in range.clone() {
                let e = &edges[id as usize];
                rasterize_tube(g, e.start(), e.end(), e.radius_mm, |i, d| {
                    let slot = best.entry(i).or_insert((f64::INFINITY, NO_TAG));
                    if d < slot.0 {
                        *slot = (d, id);
                    }
                });
            }
            for (i, (_, id)) in best {
                labels[i] = structure;
                tags[i] = id;
            }
        }
    }
    for t in &spec.tumors {
        rasterize_sphere(g, t, |i| {
            labels[i] = LabelSchema::TUMOR;
            tags[i] = NO_TAG;
        });
    }

    let analytic_volumes = AnalyticVolumes {
        parenchyma: spec.parenchyma.volume(),
        gallbladder: spec
            .gallbladder_present
            .then(|| 4.0 / 3.0 * PI * spec.gallbladder.radius.powi(3)),
        tumors: spec
            .tumors
            .iter()
            .map(|t| 4.0 / 3.0 * PI * t.radius.powi(3))
            .collect(),
        edges: edges.iter().map(BranchEdge::analytic_volume).collect(),
    };

    Ok(PhantomTruth {
        labels: LabelVolume::new(g.clone(), labels, LabelSchema::default())?,
        tags,
        edges,
        analytic_volumes,
        spec: spec.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Blob {
    pub center: [f64; 3],
    pub radius: f64,
    pub label: u8,
}

/// Controlled corruption of a truth volume. Erosion and dilation counts are
/// keyed by structure name.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradeSpec {
    pub seed: u64,
    pub erode_steps: BTreeMap<String, usize>,
    pub dilate_steps: BTreeMap<String, usize>,
    pub drop_edge_ids: Vec<u32>,
    pub spurious_blobs: Vec<Blob>,
    pub relabel_fraction: f64,
}

impl DegradeSpec {
    pub fn validate(&self, schema: &LabelSchema) -> Result<()> {
        for name in self.erode_steps.keys().chain(self.dilate_steps.keys()) {
            if schema.id_of(name).is_none() {
                return Err(Error::Schema(format!("unknown structure `{name}`")));
            }
        }
        for (name, &e) in &self.erode_steps {
            if e > 0 && self.dilate_steps.get(name).copied().unwrap_or(0) > 0 {
                return Err(Error::param(format!(
                    "`{name}` cannot be both eroded and dilated"
                )));
            }
        }
        for b in &self.spurious_blobs {
            if !schema.contains(b.label) {
                return Err(Error::Schema(format!("blob label {} is not in the schema", b.label)));
            }
            if !(b.radius > 0.0) {
                return Err(Error::param(format!("blob radius must be positive, got {}", b.radius)));
            }
        }
        if !(0.0..1.0).contains(&self.relabel_fraction) {
            return Err(Error::param(format!(
                "relabel_fraction must be in [0, 1), got {}",
                self.relabel_fraction
            )));
        }
        Ok(())
    }
}

fn pool_steps(mask: &BinaryMask, steps: usize, erode: bool) -> BinaryMask {
    let mut v = ProbVolume::from(mask);
    for _ in 0..steps {
        v = if erode { min_pool(&v).0 } else { max_pool(&v).0 };
    }
    let g = mask.geometry().clone();
    BinaryMask::new(g, v.values().iter().map(|&x| x >= 0.5).collect()).expect("same grid")
}

/// Apply, in order: per-structure erosion and dilation, removal of dropped
/// edges, spurious blobs, and random relabelling of foreground to
/// background.
///
/// Eroded and dropped vessel, tumor and biliary voxels fall back to
/// parenchyma; eroded parenchyma falls back to background. Dilation only
/// claims background and parenchyma (background only for parenchyma).
pub fn degrade(truth: &PhantomTruth, d: &DegradeSpec) -> Result<LabelVolume> {
    let schema = truth.labels.schema().clone();
    d.validate(&schema)?;
    for &id in &d.drop_edge_ids {
        if truth.edge(id).is_none() {
            return Err(Error::param(format!("unknown edge id {id}")));
        }
    }
    let g = truth.labels.geometry().clone();
    let mut labels = truth.labels.labels().to_vec();

    let fallback = |s: u8| {
        if s == LabelSchema::PARENCHYMA {
            LabelSchema::BACKGROUND
        } else {
            LabelSchema::PARENCHYMA
        }
    };

    for (name, &steps) in &d.erode_steps {
        let s = schema.id_of(name).expect("validated");
        if steps == 0 {
            continue;
        }
        let mask = BinaryMask::from_fn(g.clone(), |i| labels[i] == s);
        let kept = pool_steps(&mask, steps, true);
        for i in mask.indices() {
            if !kept.get(i) {
                labels[i] = fallback(s);
            }
        }
    }
    for (name, &steps) in &d.dilate_steps {
        let s = schema.id_of(name).expect("validated");
        if steps == 0 {
            continue;
        }
        let mask = BinaryMask::from_fn(g.clone(), |i| labels[i] == s);
        let grown = pool_steps(&mask, steps, false);
        for i in grown.indices() {
            let l = labels[i];
            let claimable = l == LabelSchema::BACKGROUND
                || (l == LabelSchema::PARENCHYMA && s != LabelSchema::PARENCHYMA);
            if claimable {
                labels[i] = s;
            }
        }
    }
    for &id in &d.drop_edge_ids {
        let s = truth.edges[id as usize].structure;
        for (i, l) in labels.iter_mut().enumerate() {
            if truth.tags[i] == id && *l == s {
                *l = LabelSchema::PARENCHYMA;
            }
        }
    }
    for b in &d.spurious_blobs {
        let s = Sphere {
            center: b.center,
            radius: b.radius,
        };
        rasterize_sphere(&g, &s, |i| labels[i] = b.label);
    }
    if d.relabel_fraction > 0.0 {
        let fg: Vec<usize> = (0..labels.len())
            .filter(|&i| labels[i] != LabelSchema::BACKGROUND)
            .collect();
        let m = (d.relabel_fraction * fg.len() as f64).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
        for k in rand::seq::index::sample(&mut rng, fg.len(), m).iter() {
            labels[fg[k]] = LabelSchema::BACKGROUND;
        }
    }
    LabelVolume::new(g, labels, schema)
}

/// Small fixed phantoms used by tests and benchmarks.
pub mod fixtures {
    use super::*;

    /// 40-voxel straight tube of radius 3 voxels along x at unit spacing.
    pub fn straight_tube() -> BinaryMask {
        let g = Geometry::new([48, 17, 17], [1.0; 3]).expect("valid");
        tube_mask(&g, [4.0, 8.0, 8.0], [43.0, 8.0, 8.0], 3.0)
    }

    /// Spec of a single-tree phantom at unit spacing with `levels`
    /// bifurcations of the portal tree and nothing else but parenchyma.
    /// Branches are long relative to their radius so junction regions stay a
    /// small share of the vessel volume, and leaves stay above one voxel in
    /// radius up to four levels.
    pub fn tree_spec(levels: usize, seed: u64) -> PhantomSpec {
        PhantomSpec {
            seed,
            geometry: Geometry::new([160, 160, 160], [1.0; 3]).expect("valid"),
            parenchyma: Ellipsoid {
                center: [79.5, 79.5, 79.5],
                semi_axes: [78.0, 78.0, 78.0],
            },
            portal_vein: Some(TreeSpec {
                root: [8.0, 79.5, 79.5],
                direction: [1.0, 0.0, 0.0],
                levels,
                root_radius: 3.25,
                radius_decay: 0.8,
                segment_length: 44.0,
                length_decay: 0.7,
                branch_angle_deg: 40.0,
            }),
            hepatic_vein: None,
            biliary_tree: None,
            gallbladder_present: false,
            gallbladder: PhantomSpec::default().gallbladder,
            tumors: Vec::new(),
        }
    }

    /// One-bifurcation tree: trunk plus two branches.
    ///
    /// The trunk is thinner than in [`tree_spec`]: from a radius of about
    /// 2.6 voxels the soft skeleton of a rasterized tube grows into a
    /// multi-voxel star per slice, which inflates the trunk's share of the
    /// skeleton above its share of the volume.
    pub fn y_phantom() -> PhantomTruth {
        let mut spec = tree_spec(1, 0);
        if let Some(tree) = spec.portal_vein.as_mut() {
            tree.root_radius = 2.5;
        }
        generate_case(&spec).expect("fixture spec is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::physical_volume;

    fn small_spec() -> PhantomSpec {
        fixtures::tree_spec(1, 7)
    }

    #[test]
    fn default_spec_generates() {
        let t = generate_case(&PhantomSpec::default()).unwrap();
        for s in LabelSchema::default().structures() {
            if s.id != LabelSchema::GALLBLADDER {
                assert!(t.labels.count(s.id) > 0, "{} missing", s.name);
            }
        }
        assert_eq!(t.edges.len(), 15 + 15 + 7);
    }

    #[test]
    fn deterministic() {
        let s = small_spec();
        let a = generate_case(&s).unwrap();
        let b = generate_case(&s).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.tags, b.tags);
        assert_eq!(a.edges, b.edges);
    }

    #[test]
    fn one_level_tree_generations() {
        let t = generate_case(&small_spec()).unwrap();
        let gens: Vec<u8> = t.edges.iter().map(|e| e.generation).collect();
        assert_eq!(gens, vec![0, 1, 1]);
        assert_eq!(t.edges[0].children, vec![1, 2]);
    }

    #[test]
    fn tags_cover_vessel_voxels() {
        let t = generate_case(&PhantomSpec::default()).unwrap();
        for (i, &l) in t.labels.labels().iter().enumerate() {
            let vessel = matches!(l, LabelSchema::PORTAL_VEIN | LabelSchema::HEPATIC_VEIN)
                || (l == LabelSchema::BILIARY_TREE && t.tags[i] != NO_TAG);
            if t.tags[i] != NO_TAG {
                assert_eq!(t.edges[t.tags[i] as usize].structure, l);
            } else {
                assert!(!vessel);
            }
        }
    }

    #[test]
    fn centerlines_inside_their_branch() {
        let t = generate_case(&small_spec()).unwrap();
        let g = t.labels.geometry();
        let s = g.spacing();
        for e in &t.edges {
            for k in 0..=20 {
                let f = k as f64 / 20.0;
                let p = add(e.start(), scale(sub(e.end(), e.start()), f));
                let idx = g.index(
                    (p[0] / s[0]).round() as usize,
                    (p[1] / s[1]).round() as usize,
                    (p[2] / s[2]).round() as usize,
                );
                assert_eq!(t.labels.labels()[idx], e.structure);
            }
        }
    }

    #[test]
    fn tube_volume_near_analytic() {
        let g = Geometry::new([80, 20, 20], [1.0; 3]).unwrap();
        let m = tube_mask(&g, [10.0, 10.0, 10.0], [70.0, 10.0, 10.0], 4.0);
        let analytic = PI * 16.0 * 60.0;
        assert!((analytic - 3015.93).abs() < 0.01);
        let rel = (physical_volume(&m) - analytic).abs() / analytic;
        assert!(rel < 0.15, "{rel}");
    }

    #[test]
    fn sphere_volume_near_analytic() {
        let g = Geometry::new([40, 40, 30], [2.0, 2.0, 3.0]).unwrap();
        let m = sphere_mask(&g, [40.0, 40.0, 45.0], 16.0);
        let analytic = 4.0 / 3.0 * PI * 16f64.powi(3);
        assert!((physical_volume(&m) - analytic).abs() / analytic < 0.05);
    }

    #[test]
    fn tumor_outside_parenchyma_is_named() {
        let mut s = PhantomSpec::default();
        s.tumors.push(Sphere {
            center: [20.0, 20.0, 30.0],
            radius: 5.0,
        });
        match generate_case(&s) {
            Err(Error::Generation { structure, .. }) => assert_eq!(structure, "tumors[2]"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_bounds_tree_is_named() {
        let mut s = PhantomSpec::default();
        s.hepatic_vein.as_mut().unwrap().segment_length = 400.0;
        match generate_case(&s) {
            Err(Error::Generation { structure, .. }) => assert_eq!(structure, "hepatic_vein"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn identity_degrade() {
        let t = generate_case(&small_spec()).unwrap();
        assert_eq!(degrade(&t, &DegradeSpec::default()).unwrap(), t.labels);
    }

    #[test]
    fn dropping_an_edge_removes_its_tagged_voxels() {
        let t = generate_case(&small_spec()).unwrap();
        let d = DegradeSpec {
            drop_edge_ids: vec![1],
            ..Default::default()
        };
        let out = degrade(&t, &d).unwrap();
        let before = t.labels.count(LabelSchema::PORTAL_VEIN);
        let after = out.count(LabelSchema::PORTAL_VEIN);
        assert_eq!(before - after, t.tag_count(1));
        assert!(degrade(
            &t,
            &DegradeSpec {
                drop_edge_ids: vec![99],
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn conflicting_morphology_rejected() {
        let t = generate_case(&small_spec()).unwrap();
        let mut d = DegradeSpec::default();
        d.erode_steps.insert("portal_vein".into(), 1);
        d.dilate_steps.insert("portal_vein".into(), 1);
        assert!(degrade(&t, &d).is_err());
    }

    #[test]
    fn erosion_shrinks_and_dilation_grows() {
        let t = generate_case(&small_spec()).unwrap();
        let n0 = t.labels.count(LabelSchema::PORTAL_VEIN);
        let mut d = DegradeSpec::default();
        d.erode_steps.insert("portal_vein".into(), 1);
        let eroded = degrade(&t, &d).unwrap();
        assert!(eroded.count(LabelSchema::PORTAL_VEIN) < n0);
        assert_eq!(
            eroded.count(LabelSchema::BACKGROUND),
            t.labels.count(LabelSchema::BACKGROUND)
        );
        let mut d = DegradeSpec::default();
        d.dilate_steps.insert("portal_vein".into(), 1);
        assert!(degrade(&t, &d).unwrap().count(LabelSchema::PORTAL_VEIN) > n0);
    }

    #[test]
    fn relabel_is_seeded() {
        let t = generate_case(&small_spec()).unwrap();
        let d = DegradeSpec {
            seed: 5,
            relabel_fraction: 0.1,
            ..Default::default()
        };
        let a = degrade(&t, &d).unwrap();
        assert_eq!(a, degrade(&t, &d).unwrap());
        let fg = |v: &LabelVolume| v.labels().iter().filter(|&&l| l != 0).count();
        let n = fg(&t.labels);
        assert_eq!(n - fg(&a), (0.1 * n as f64).round() as usize);
    }
}

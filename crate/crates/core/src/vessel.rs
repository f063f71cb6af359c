//! Skeleton graphs of vessel masks: node/edge extraction, generations,
//! Strahler orders, the central/peripheral split, and gallbladder
//! identification in the biliary tree.

use std::collections::{HashMap, VecDeque};

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{
    connected_components, distance_transform, soft_skeleton_values, thin, Connectivity,
};
use crate::volume::{BinaryMask, Geometry, ProbVolume};

/// Binary skeleton: the soft skeleton of the 0/1 field thresholded at 0.5.
///
/// Computed on the mask's bounding box grown by one voxel: the exterior
/// counts as zero, so the crop changes no value.
pub fn skeletonize(mask: &BinaryMask, iterations: usize) -> Result<BinaryMask> {
    let g = mask.geometry();
    let dims = g.dims();
    let mut lo = dims;
    let mut hi = [0usize; 3];
    for v in mask.indices() {
        let c = g.coords(v);
        for k in 0..3 {
            lo[k] = lo[k].min(c[k]);
            hi[k] = hi[k].max(c[k]);
        }
    }
    if iterations == 0 {
        return Err(Error::param("soft skeleton needs at least one iteration"));
    }
    if mask.is_empty() {
        return Ok(BinaryMask::empty(g.clone()));
    }
    for k in 0..3 {
        lo[k] = lo[k].saturating_sub(1);
        hi[k] = (hi[k] + 1).min(dims[k] - 1);
    }
    let sub_dims = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
    let sub = Geometry::new(sub_dims, g.spacing())?;
    let at = |c: [usize; 3]| g.index(c[0] + lo[0], c[1] + lo[1], c[2] + lo[2]);
    let crop = BinaryMask::from_fn(sub.clone(), |i| mask.get(at(sub.coords(i))));
    let soft = soft_skeleton_values(&ProbVolume::from(&crop), iterations)?;
    let mut out = BinaryMask::empty(g.clone());
    for (i, &s) in soft.values().iter().enumerate() {
        // the residues of a 0/1 field are 0/1 and lie inside it, so the
        // mask test only guards the subset property
        if s >= 0.5 && crop.get(i) {
            out.set(at(sub.coords(i)), true);
        }
    }
    Ok(out)
}

/// Curve skeleton used for graph extraction: homotopic thinning of the mask.
///
/// The thresholded soft skeleton of a tube more than about two voxels thick
/// keeps off-axis corner lines and breaks up along oblique tubes, so it is
/// not a usable centerline; it remains the skeleton of the clDice terms.
pub fn centerline(mask: &BinaryMask) -> BinaryMask {
    thin(mask)
}

/// [`build_graph`] on the [`centerline`] of `mask`.
pub fn vessel_graph(mask: &BinaryMask) -> Result<SkeletonGraph> {
    build_graph(&centerline(mask), mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Endpoint,
    Junction,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphNode {
    pub id: u32,
    pub voxel: [usize; 3],
    #[serde(skip)]
    pub index: usize,
    pub kind: NodeKind,
    pub degree: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphEdge {
    pub id: u32,
    pub nodes: [u32; 2],
    /// Voxel indices from `nodes[0]` to `nodes[1]`, both node voxels included.
    #[serde(skip)]
    pub path: Vec<usize>,
    pub length_mm: f64,
    pub mean_radius_mm: f64,
    /// Hops from the root edge of the edge's connected component.
    pub generation: u32,
    pub strahler: u32,
    /// Connected component of the graph the edge belongs to.
    pub component: u32,
}

impl GraphEdge {
    /// Path voxels that are not node voxels.
    pub fn interior(&self) -> &[usize] {
        &self.path[1..self.path.len() - 1]
    }
}

/// Tuning of graph extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    /// Terminal chains no longer than `spur_factor * r + max spacing`, with
    /// `r` the vessel radius at their junction, are removed as spurs.
    pub spur_factor: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig { spur_factor: 1.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkeletonGraph {
    #[serde(skip)]
    geometry: Geometry,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    /// Edge with the greatest mean radius overall.
    pub root_edge: Option<u32>,
    /// Root edge of each connected component, indexed by component.
    pub component_roots: Vec<u32>,
    /// Voxel adjacencies dropped to break cycles.
    pub removed_links: usize,
    /// Skeleton voxels discarded as spurs or isolated voxels.
    pub pruned_voxels: usize,
}

#[derive(Serialize)]
struct EdgeJson<'a> {
    #[serde(flatten)]
    edge: &'a GraphEdge,
    path: Vec<[usize; 3]>,
}

impl SkeletonGraph {
    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Edges incident to each node, in edge id order.
    pub fn incidence(&self) -> Vec<Vec<u32>> {
        let mut inc = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            inc[e.nodes[0] as usize].push(e.id);
            if e.nodes[1] != e.nodes[0] {
                inc[e.nodes[1] as usize].push(e.id);
            }
        }
        inc
    }

    /// JSON export with voxel paths as `[x, y, z]` triples.
    pub fn to_json(&self) -> serde_json::Value {
        let edges: Vec<EdgeJson> = self
            .edges
            .iter()
            .map(|e| EdgeJson {
                edge: e,
                path: e.path.iter().map(|&i| self.geometry.coords(i)).collect(),
            })
            .collect();
        serde_json::json!({
            "nodes": self.nodes,
            "edges": edges,
            "root_edge": self.root_edge,
            "component_roots": self.component_roots,
            "removed_links": self.removed_links,
            "pruned_voxels": self.pruned_voxels,
        })
    }

    /// `(voxel, edge)` for every graph voxel; node voxels are attributed to
    /// their incident edge with the lowest generation, then lowest id.
    fn voxel_edges(&self) -> Vec<(usize, u32)> {
        let inc = self.incidence();
        let mut out = Vec::new();
        for e in &self.edges {
            out.extend(e.interior().iter().map(|&v| (v, e.id)));
        }
        for n in &self.nodes {
            let best = inc[n.id as usize]
                .iter()
                .min_by_key(|&&id| (self.edges[id as usize].generation, id))
                .copied();
            if let Some(id) = best {
                out.push((n.index, id));
            }
        }
        out.sort_unstable();
        out
    }
}

struct Dsu {
    parent: Vec<u32>,
}

impl Dsu {
    fn new(n: usize) -> Self {
        Dsu {
            parent: (0..n as u32).collect(),
        }
    }

    fn find(&mut self, mut a: u32) -> u32 {
        while self.parent[a as usize] != a {
            let p = self.parent[a as usize];
            self.parent[a as usize] = self.parent[p as usize];
            a = p;
        }
        a
    }

    fn union(&mut self, a: u32, b: u32) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi as usize] = lo;
        true
    }
}

/// The 13 offsets of the 26-neighbourhood that come later in linear order.
fn forward_offsets() -> Vec<[isize; 3]> {
    Connectivity::TwentySix
        .offsets()
        .into_iter()
        .filter(|o| (o[2], o[1], o[0]) > (0, 0, 0))
        .collect()
}

fn step_length(g: &Geometry, a: usize, b: usize) -> f64 {
    g.distance_sq(a, b).sqrt()
}

/// Voxel-level spanning forest of the skeleton as adjacency lists over
/// skeleton slots.
struct Forest {
    voxels: Vec<usize>,
    adj: Vec<Vec<u32>>,
    alive: Vec<bool>,
}

impl Forest {
    fn degree(&self, s: u32) -> usize {
        self.adj[s as usize]
            .iter()
            .filter(|&&t| self.alive[t as usize])
            .count()
    }

    fn alive_neighbours(&self, s: u32) -> impl Iterator<Item = u32> + '_ {
        self.adj[s as usize]
            .iter()
            .copied()
            .filter(|&t| self.alive[t as usize])
    }

    /// Follow a chain from `start` through `next` until a slot whose degree
    /// is not 2. Returns the slots visited, `start` included.
    fn walk(&self, start: u32, next: u32) -> Vec<u32> {
        let mut chain = vec![start, next];
        let (mut prev, mut cur) = (start, next);
        while self.degree(cur) == 2 {
            let nxt = self
                .alive_neighbours(cur)
                .find(|&t| t != prev)
                .expect("degree-2 slot has another neighbour");
            if nxt == start {
                break;
            }
            chain.push(nxt);
            prev = cur;
            cur = nxt;
        }
        chain
    }
}

/// Maximum spanning forest over 26-adjacent skeleton voxels. Links are taken
/// in order of the smaller vessel radius at their ends (descending), then
/// step length, then voxel indices, so loops are cut at their thinnest link.
fn spanning_forest(g: &Geometry, voxels: Vec<usize>, radius: &[f64]) -> (Forest, usize) {
    let n = g.len();
    let mut slot = vec![u32::MAX; n];
    for (s, &v) in voxels.iter().enumerate() {
        slot[v] = s as u32;
    }
    let offsets = forward_offsets();
    let mut links = Vec::new();
    for (s, &v) in voxels.iter().enumerate() {
        let c = g.coords(v);
        for o in &offsets {
            let Some(w) = g.checked_index(c[0] as isize + o[0], c[1] as isize + o[1], c[2] as isize + o[2])
            else {
                continue;
            };
            let t = slot[w];
            if t != u32::MAX {
                let weight = radius[v].min(radius[w]);
                links.push((weight, step_length(g, v, w), s as u32, t));
            }
        }
    }
    links.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });
    let mut dsu = Dsu::new(voxels.len());
    let mut adj = vec![Vec::new(); voxels.len()];
    let mut removed = 0;
    for &(_, _, a, b) in &links {
        if dsu.union(a, b) {
            adj[a as usize].push(b);
            adj[b as usize].push(a);
        } else {
            removed += 1;
        }
    }
    for a in &mut adj {
        a.sort_unstable();
    }
    let alive = vec![true; voxels.len()];
    (Forest { voxels, adj, alive }, removed)
}

/// Remove short terminal chains, shortest first, never taking a junction
/// below degree 2. Repeats until nothing changes; returns voxels removed.
fn prune_spurs(g: &Geometry, f: &mut Forest, radius: &[f64], factor: f64) -> usize {
    let max_spacing = g.spacing().iter().cloned().fold(0.0, f64::max);
    let mut removed = 0;
    loop {
        let mut spurs = Vec::new();
        for s in 0..f.voxels.len() as u32 {
            if !f.alive[s as usize] || f.degree(s) != 1 {
                continue;
            }
            let next = f.alive_neighbours(s).next().expect("degree 1");
            let chain = f.walk(s, next);
            let junction = *chain.last().unwrap();
            if f.degree(junction) < 3 {
                continue; // a bare path is not a spur
            }
            let length: f64 = chain
                .windows(2)
                .map(|w| step_length(g, f.voxels[w[0] as usize], f.voxels[w[1] as usize]))
                .sum();
            spurs.push((length, s, chain));
        }
        spurs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut changed = false;
        for (length, _, chain) in spurs {
            let junction = *chain.last().unwrap();
            let r = radius[f.voxels[junction as usize]];
            if length > factor * r + max_spacing || f.degree(junction) < 3 {
                continue;
            }
            // the chain may have been shortened by an earlier removal
            if chain[..chain.len() - 1].iter().any(|&s| !f.alive[s as usize]) {
                continue;
            }
            for &s in &chain[..chain.len() - 1] {
                f.alive[s as usize] = false;
                removed += 1;
            }
            changed = true;
        }
        if !changed {
            return removed;
        }
    }
}

/// Build the skeleton graph with default settings.
pub fn build_graph(skeleton: &BinaryMask, vessel_mask: &BinaryMask) -> Result<SkeletonGraph> {
    build_graph_with(skeleton, vessel_mask, &GraphConfig::default())
}

/// Graph over 26-connected skeleton voxels.
///
/// Cycles are broken on a voxel-level maximum spanning forest weighted by
/// vessel radius, short spurs are pruned, then voxels of degree other than 2
/// become nodes and the chains between them edges. Each connected component
/// is rooted at its edge of greatest mean radius; generations count hops
/// from that edge and Strahler orders follow the usual recurrence.
pub fn build_graph_with(
    skeleton: &BinaryMask,
    vessel_mask: &BinaryMask,
    config: &GraphConfig,
) -> Result<SkeletonGraph> {
    let g = skeleton.geometry();
    g.ensure_same_grid(vessel_mask.geometry())?;
    if skeleton.indices().any(|i| !vessel_mask.get(i)) {
        return Err(Error::param("skeleton is not contained in the vessel mask"));
    }
    let radius = distance_transform(vessel_mask);
    let radius = radius.values();
    let voxels: Vec<usize> = skeleton.indices().collect();
    let total = voxels.len();

    let (mut forest, removed_links) = spanning_forest(g, voxels, radius);
    if removed_links > 0 {
        debug!("skeleton graph: dropped {removed_links} voxel links to break cycles");
    }
    prune_spurs(g, &mut forest, radius, config.spur_factor);
    for s in 0..forest.voxels.len() as u32 {
        if forest.alive[s as usize] && forest.degree(s) == 0 {
            forest.alive[s as usize] = false;
        }
    }
    let alive_count = forest.alive.iter().filter(|&&a| a).count();

    // nodes in increasing voxel order
    let mut node_of = vec![u32::MAX; forest.voxels.len()];
    let mut nodes = Vec::new();
    for s in 0..forest.voxels.len() as u32 {
        if !forest.alive[s as usize] {
            continue;
        }
        let d = forest.degree(s);
        if d != 2 {
            let v = forest.voxels[s as usize];
            node_of[s as usize] = nodes.len() as u32;
            nodes.push(GraphNode {
                id: nodes.len() as u32,
                voxel: g.coords(v),
                index: v,
                kind: if d == 1 {
                    NodeKind::Endpoint
                } else {
                    NodeKind::Junction
                },
                degree: d,
            });
        }
    }

    let mut edges = Vec::new();
    let mut seen_first_step = std::collections::HashSet::new();
    for node in &nodes {
        let s = forest.voxels.binary_search(&node.index).expect("node is a skeleton voxel") as u32;
        let nbrs: Vec<u32> = forest.alive_neighbours(s).collect();
        for t in nbrs {
            if !seen_first_step.insert((s, t)) {
                continue;
            }
            let chain = forest.walk(s, t);
            let end = *chain.last().unwrap();
            let before_end = chain[chain.len() - 2];
            seen_first_step.insert((end, before_end));
            let path: Vec<usize> = chain.iter().map(|&c| forest.voxels[c as usize]).collect();
            let length_mm = path.windows(2).map(|w| step_length(g, w[0], w[1])).sum();
            let mean_radius_mm = path.iter().map(|&v| radius[v]).sum::<f64>() / path.len() as f64;
            edges.push(GraphEdge {
                id: edges.len() as u32,
                nodes: [node_of[s as usize], node_of[end as usize]],
                path,
                length_mm,
                mean_radius_mm,
                generation: 0,
                strahler: 1,
                component: 0,
            });
        }
    }

    let mut graph = SkeletonGraph {
        geometry: g.clone(),
        nodes,
        edges,
        root_edge: None,
        component_roots: Vec::new(),
        removed_links,
        pruned_voxels: total - alive_count,
    };
    order_edges(&mut graph);
    Ok(graph)
}

/// Assign components, roots, generations and Strahler orders.
fn order_edges(graph: &mut SkeletonGraph) {
    let inc = graph.incidence();
    let n_edges = graph.edges.len();
    let mut component = vec![u32::MAX; n_edges];
    let mut roots = Vec::new();

    // components by edge adjacency, discovered in edge id order
    for start in 0..n_edges {
        if component[start] != u32::MAX {
            continue;
        }
        let c = roots.len() as u32;
        let mut members = vec![start as u32];
        component[start] = c;
        let mut i = 0;
        while i < members.len() {
            let e = &graph.edges[members[i] as usize];
            for &node in &e.nodes {
                for &other in &inc[node as usize] {
                    if component[other as usize] == u32::MAX {
                        component[other as usize] = c;
                        members.push(other);
                    }
                }
            }
            i += 1;
        }
        let root = *members
            .iter()
            .max_by(|&&a, &&b| {
                let (ea, eb) = (&graph.edges[a as usize], &graph.edges[b as usize]);
                ea.mean_radius_mm
                    .total_cmp(&eb.mean_radius_mm)
                    .then(b.cmp(&a))
            })
            .expect("non-empty component");
        roots.push(root);
    }

    let mut generation = vec![u32::MAX; n_edges];
    // parent node each edge hangs from (None for roots)
    let mut via: Vec<Option<u32>> = vec![None; n_edges];
    let mut bfs_order = Vec::with_capacity(n_edges);
    for &root in &roots {
        generation[root as usize] = 0;
        let mut queue = VecDeque::from([root]);
        while let Some(e) = queue.pop_front() {
            bfs_order.push(e);
            let edge = &graph.edges[e as usize];
            for &node in &edge.nodes {
                if Some(node) == via[e as usize] {
                    continue;
                }
                for &other in &inc[node as usize] {
                    if generation[other as usize] == u32::MAX {
                        generation[other as usize] = generation[e as usize] + 1;
                        via[other as usize] = Some(node);
                        queue.push_back(other);
                    }
                }
            }
        }
    }

    // Strahler in reverse BFS order: children are edges hanging from this
    // edge's far node(s)
    let mut strahler = vec![1u32; n_edges];
    for &e in bfs_order.iter().rev() {
        let edge = &graph.edges[e as usize];
        let mut child_orders = Vec::new();
        for &node in &edge.nodes {
            if Some(node) == via[e as usize] {
                continue;
            }
            for &other in &inc[node as usize] {
                if other != e && via[other as usize] == Some(node) && generation[other as usize] == generation[e as usize] + 1 {
                    child_orders.push(strahler[other as usize]);
                }
            }
        }
        if let Some(&max) = child_orders.iter().max() {
            let ties = child_orders.iter().filter(|&&o| o == max).count();
            strahler[e as usize] = if ties >= 2 { max + 1 } else { max };
        }
    }

    for (i, e) in graph.edges.iter_mut().enumerate() {
        e.component = component[i];
        e.generation = generation[i];
        e.strahler = strahler[i];
    }
    graph.root_edge = roots.iter().copied().max_by(|&a, &b| {
        graph.edges[a as usize]
            .mean_radius_mm
            .total_cmp(&graph.edges[b as usize].mean_radius_mm)
            .then(b.cmp(&a))
    });
    graph.component_roots = roots;
}

/// Which edges count as central.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentralRule {
    /// Generation at most 1: the trunk and the branches arising from it.
    #[default]
    Generation,
    /// Strahler order at least the root's order minus 1.
    Strahler,
}

impl CentralRule {
    fn is_central(self, graph: &SkeletonGraph, edge: &GraphEdge) -> bool {
        match self {
            CentralRule::Generation => edge.generation <= 1,
            CentralRule::Strahler => {
                let root = graph.component_roots[edge.component as usize];
                let top = graph.edges[root as usize].strahler;
                edge.strahler + 1 >= top
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VesselRegionSplit {
    pub central: BinaryMask,
    pub peripheral: BinaryMask,
}

/// Nearest-voxel lookup over a fixed set of seed voxels.
pub(crate) struct NearestSeed<'a> {
    geometry: &'a Geometry,
    /// Slot per grid voxel, `u32::MAX` where there is no seed.
    slot: Vec<u32>,
    max_shell: usize,
}

impl<'a> NearestSeed<'a> {
    pub(crate) fn new(geometry: &'a Geometry, seeds: &[usize]) -> Self {
        let mut slot = vec![u32::MAX; geometry.len()];
        for (s, &v) in seeds.iter().enumerate() {
            slot[v] = s as u32;
        }
        let max_shell = *geometry.dims().iter().max().unwrap();
        NearestSeed {
            geometry,
            slot,
            max_shell,
        }
    }

    /// Slot of the seed closest to `v` in mm; ties go to the smallest seed
    /// voxel index. `None` when there are no seeds.
    pub(crate) fn nearest(&self, v: usize) -> Option<u32> {
        let g = self.geometry;
        let sp = g.spacing();
        let min_sp = sp.iter().cloned().fold(f64::INFINITY, f64::min);
        let c = g.coords(v);
        let mut best: Option<(f64, usize, u32)> = None;
        for r in 0..=self.max_shell as isize {
            if let Some((d2, _, _)) = best {
                let bound = r as f64 * min_sp;
                if bound * bound > d2 {
                    break;
                }
            }
            for dz in -r..=r {
                for dy in -r..=r {
                    let on_face = dz.abs() == r || dy.abs() == r;
                    let step = if on_face { 1 } else { (2 * r).max(1) as usize };
                    for dx in (-r..=r).step_by(step) {
                        let Some(w) = g.checked_index(c[0] as isize + dx, c[1] as isize + dy, c[2] as isize + dz)
                        else {
                            continue;
                        };
                        let s = self.slot[w];
                        if s == u32::MAX {
                            continue;
                        }
                        let d2 = (dx as f64 * sp[0]).powi(2)
                            + (dy as f64 * sp[1]).powi(2)
                            + (dz as f64 * sp[2]).powi(2);
                        let better = match best {
                            None => true,
                            Some((bd, bw, _)) => d2 < bd || (d2 == bd && w < bw),
                        };
                        if better {
                            best = Some((d2, w, s));
                        }
                    }
                }
            }
        }
        best.map(|(_, _, s)| s)
    }
}

/// A node voxel is shared by all its edges. Voxels whose nearest skeleton
/// voxel is a node whose edges disagree on the class take the class of the
/// nearest interior voxel among those edges; otherwise the node's whole
/// basin, a slice across the vessel, would go to one side of the junction.
struct JunctionResolver<'a> {
    geometry: &'a Geometry,
    /// Interior voxels of each incident edge with the edge's class, for
    /// nodes whose edges disagree.
    mixed: HashMap<usize, Vec<(bool, &'a [usize])>>,
}

impl<'a> JunctionResolver<'a> {
    fn new(graph: &'a SkeletonGraph, rule: CentralRule) -> Self {
        let inc = graph.incidence();
        let mut mixed = HashMap::new();
        for n in &graph.nodes {
            let sides: Vec<(bool, &[usize])> = inc[n.id as usize]
                .iter()
                .map(|&e| {
                    let e = &graph.edges[e as usize];
                    (rule.is_central(graph, e), e.interior())
                })
                .filter(|(_, interior)| !interior.is_empty())
                .collect();
            let central = sides.iter().filter(|(c, _)| *c).count();
            if central > 0 && central < sides.len() {
                mixed.insert(n.index, sides);
            }
        }
        JunctionResolver {
            geometry: &graph.geometry,
            mixed,
        }
    }

    /// Class of `v` when its nearest skeleton voxel `seed` is a mixed node.
    fn resolve(&self, seed: usize, v: usize) -> Option<bool> {
        let sides = self.mixed.get(&seed)?;
        let sp = self.geometry.spacing();
        let c = self.geometry.coords(v);
        let mut best: Option<(f64, usize, bool)> = None;
        for &(class, interior) in sides {
            for &w in interior {
                let cw = self.geometry.coords(w);
                let d2: f64 = (0..3)
                    .map(|k| ((c[k] as f64 - cw[k] as f64) * sp[k]).powi(2))
                    .sum();
                if best.is_none_or(|(bd, bw, _)| d2 < bd || (d2 == bd && w < bw)) {
                    best = Some((d2, w, class));
                }
            }
        }
        best.map(|(_, _, class)| class)
    }
}

/// Split `vessel_mask` with the default (generation) rule.
pub fn classify_central_peripheral(
    graph: &SkeletonGraph,
    vessel_mask: &BinaryMask,
) -> Result<VesselRegionSplit> {
    classify_with_rule(graph, vessel_mask, CentralRule::Generation)
}

/// Give every voxel of `mask` the class of its nearest graph voxel. `mask`
/// need not be the mask the graph was built from, which lets a split derived
/// from one mask partition another.
pub fn classify_with_rule(
    graph: &SkeletonGraph,
    mask: &BinaryMask,
    rule: CentralRule,
) -> Result<VesselRegionSplit> {
    let g = mask.geometry();
    graph.geometry.ensure_same_grid(g)?;
    let mut central = BinaryMask::empty(g.clone());
    let mut peripheral = BinaryMask::empty(g.clone());
    if graph.is_empty() {
        if !mask.is_empty() {
            warn!("empty skeleton graph: all {} voxels classed peripheral", mask.count());
        }
        return Ok(VesselRegionSplit {
            central,
            peripheral: mask.clone(),
        });
    }
    let voxel_edges = graph.voxel_edges();
    let seeds: Vec<usize> = voxel_edges.iter().map(|&(v, _)| v).collect();
    let seed_central: Vec<bool> = voxel_edges
        .iter()
        .map(|&(_, e)| rule.is_central(graph, &graph.edges[e as usize]))
        .collect();
    let lookup = NearestSeed::new(&graph.geometry, &seeds);
    let resolver = JunctionResolver::new(graph, rule);
    for v in mask.indices() {
        let s = lookup.nearest(v).expect("graph has voxels");
        let is_central = resolver
            .resolve(seeds[s as usize], v)
            .unwrap_or(seed_central[s as usize]);
        if is_central {
            central.set(v, true);
        } else {
            peripheral.set(v, true);
        }
    }
    Ok(VesselRegionSplit {
        central,
        peripheral,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GallbladderConfig {
    pub min_volume_mm3: f64,
    pub min_sphericity: f64,
}

impl Default for GallbladderConfig {
    fn default() -> Self {
        GallbladderConfig {
            min_volume_mm3: 5000.0,
            min_sphericity: 0.5,
        }
    }
}

/// Surface area in mm² of a voxel set by counting exposed faces.
pub fn face_area(mask: &BinaryMask, ids: &[u32], id: u32) -> f64 {
    let g = mask.geometry();
    let s = g.spacing();
    let face = [s[1] * s[2], s[0] * s[2], s[0] * s[1]];
    let mut area = 0.0;
    for (v, &cid) in ids.iter().enumerate() {
        if cid != id {
            continue;
        }
        let c = g.coords(v);
        for axis in 0..3 {
            for dir in [-1isize, 1] {
                let mut n = [c[0] as isize, c[1] as isize, c[2] as isize];
                n[axis] += dir;
                let inside = g
                    .checked_index(n[0], n[1], n[2])
                    .is_some_and(|w| ids[w] == id);
                if !inside {
                    area += face[axis];
                }
            }
        }
    }
    area
}

/// `pi^(1/3) (6V)^(2/3) / A`; 1 for a perfect ball.
pub fn sphericity(volume: f64, area: f64) -> f64 {
    if area <= 0.0 {
        return 0.0;
    }
    PI_CBRT * (6.0 * volume).powf(2.0 / 3.0) / area
}

const PI_CBRT: f64 = 1.464_591_887_561_523_2;

#[derive(Debug, Clone, PartialEq)]
pub struct BiliarySplit {
    pub gallbladder: BinaryMask,
    pub ducts: BinaryMask,
}

/// Split a biliary mask into gallbladder and ducts with default thresholds.
pub fn identify_gallbladder(biliary_mask: &BinaryMask) -> BiliarySplit {
    identify_gallbladder_with(biliary_mask, &GallbladderConfig::default())
}

/// The gallbladder is the 26-connected component maximising
/// `volume * sphericity` among those passing both thresholds; when none
/// passes the gallbladder is empty.
pub fn identify_gallbladder_with(biliary_mask: &BinaryMask, config: &GallbladderConfig) -> BiliarySplit {
    let g = biliary_mask.geometry();
    let cc = connected_components(biliary_mask, Connectivity::TwentySix);
    let vv = g.voxel_volume();
    let mut best: Option<(f64, u32)> = None;
    for id in 1..=cc.count() as u32 {
        let volume = cc.size(id) as f64 * vv;
        if volume < config.min_volume_mm3 {
            continue;
        }
        let sph = sphericity(volume, face_area(biliary_mask, cc.ids(), id));
        if sph < config.min_sphericity {
            continue;
        }
        let score = volume * sph;
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, id));
        }
    }
    match best {
        Some((_, id)) => {
            let gallbladder = cc.component_mask(id);
            let ducts = biliary_mask.and_not(&gallbladder).expect("same grid");
            BiliarySplit { gallbladder, ducts }
        }
        None => BiliarySplit {
            gallbladder: BinaryMask::empty(g.clone()),
            ducts: biliary_mask.clone(),
        },
    }
}

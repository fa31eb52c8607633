//! Quadrilateral meshes: uniform backgrounds, balanced quadtree refinement, tensor-product
//! and imported meshes, node classification and audits.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Aabb, BoxDomain, MaterialField, Point};

/// Finest representable refinement level below a background cell.
pub const MAX_LEVEL: u32 = 24;

/// Quadtree cell address: `level` below the background grid and integer anchor `(i, j)` at that level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellKey {
    pub level: u32,
    pub i: u64,
    pub j: u64,
}

impl CellKey {
    pub fn parent(self) -> Option<CellKey> {
        (self.level > 0).then(|| CellKey { level: self.level - 1, i: self.i >> 1, j: self.j >> 1 })
    }

    pub fn children(self) -> [CellKey; 4] {
        let (l, i, j) = (self.level + 1, 2 * self.i, 2 * self.j);
        [
            CellKey { level: l, i, j },
            CellKey { level: l, i: i + 1, j },
            CellKey { level: l, i: i + 1, j: j + 1 },
            CellKey { level: l, i, j: j + 1 },
        ]
    }

    /// Integer corner coordinates at the finest scale, counterclockwise from the lower left.
    pub fn corner_keys(self) -> [[u64; 2]; 4] {
        let s = 1u64 << (MAX_LEVEL - self.level);
        let (x, y) = (self.i * s, self.j * s);
        [[x, y], [x + s, y], [x + s, y + s], [x, y + s]]
    }
}

#[derive(Clone, Debug)]
struct Tree {
    background: [usize; 2],
    leaves: Vec<CellKey>,
    index: HashMap<CellKey, usize>,
}

impl Tree {
    fn extent(&self, level: u32) -> [u64; 2] {
        [(self.background[0] as u64) << level, (self.background[1] as u64) << level]
    }

    /// Leaf that equals or contains `k`, if any.
    fn covering_leaf(&self, k: CellKey) -> Option<usize> {
        let mut c = k;
        loop {
            if let Some(&id) = self.index.get(&c) {
                return Some(id);
            }
            c = c.parent()?;
        }
    }

    /// Same-size neighbour across side `s` (0 bottom, 1 right, 2 top, 3 left).
    fn neighbour(&self, k: CellKey, s: usize) -> Option<CellKey> {
        let ext = self.extent(k.level);
        let (i, j) = (k.i as i64, k.j as i64);
        let (ni, nj) = match s {
            0 => (i, j - 1),
            1 => (i + 1, j),
            2 => (i, j + 1),
            _ => (i - 1, j),
        };
        if ni < 0 || nj < 0 || ni as u64 >= ext[0] || nj as u64 >= ext[1] {
            None
        } else {
            Some(CellKey { level: k.level, i: ni as u64, j: nj as u64 })
        }
    }

    /// Leaves adjacent to leaf `k` across side `s`.
    fn leaves_across(&self, k: CellKey, s: usize, out: &mut Vec<usize>) {
        let Some(n) = self.neighbour(k, s) else { return };
        if let Some(id) = self.covering_leaf(n) {
            out.push(id);
            return;
        }
        let mut stack = vec![n];
        while let Some(c) = stack.pop() {
            if let Some(&id) = self.index.get(&c) {
                out.push(id);
                continue;
            }
            if c.level >= MAX_LEVEL {
                continue;
            }
            let ch = c.children();
            // children of the neighbour that touch the shared side
            let facing = match s {
                0 => [ch[3], ch[2]],
                1 => [ch[0], ch[3]],
                2 => [ch[0], ch[1]],
                _ => [ch[1], ch[2]],
            };
            stack.extend(facing);
        }
    }
}

#[derive(Clone, Debug)]
struct Locator {
    lo: Point,
    h: [f64; 2],
    dims: [usize; 2],
    buckets: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct QuadMesh {
    bbox: Aabb,
    nodes: Vec<Point>,
    cells: Vec<[usize; 4]>,
    parents: Vec<Option<[usize; 2]>>,
    tree: Option<Tree>,
    locator: Option<Locator>,
}

/// Results of the exhaustive structural scans.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeshAudit {
    pub max_interior_nodes_per_edge: usize,
    pub max_level_jump: u32,
    pub area_rel_error: f64,
    pub hanging_midpoint_error: f64,
}

impl MeshAudit {
    pub fn passes(&self) -> bool {
        self.max_interior_nodes_per_edge <= 1
            && self.max_level_jump <= 1
            && self.area_rel_error <= 1e-12
            && self.hanging_midpoint_error <= 1e-12
    }
}

impl QuadMesh {
    /// Uniform `be_x × be_y` background mesh of the domain box.
    pub fn build_uniform(domain: &BoxDomain, be_x: usize, be_y: usize) -> Result<Self> {
        if be_x == 0 || be_y == 0 {
            return Err(Error::Config(format!(
                "background subdivisions must be positive, got ({be_x}, {be_y})"
            )));
        }
        let hx = domain.lengths[0] / be_x as f64;
        let hy = domain.lengths[1] / be_y as f64;
        if ((hx - hy) / hx).abs() > 1e-12 {
            log::warn!("background cells are not square (hx = {hx}, hy = {hy})");
        }
        let mut leaves = Vec::with_capacity(be_x * be_y);
        for j in 0..be_y as u64 {
            for i in 0..be_x as u64 {
                leaves.push(CellKey { level: 0, i, j });
            }
        }
        Ok(Self::from_leaves(domain.bbox(), [be_x, be_y], leaves))
    }

    /// Tensor-product mesh on strictly increasing breakpoints.
    pub fn build_tensor(xs: &[f64], ys: &[f64]) -> Result<Self> {
        let inc = |v: &[f64]| v.len() >= 2 && v.windows(2).all(|w| w[0] < w[1]);
        if !inc(xs) || !inc(ys) {
            return Err(Error::Config("tensor breakpoints must be strictly increasing".into()));
        }
        let nx = xs.len();
        let mut nodes = Vec::with_capacity(nx * ys.len());
        for &y in ys {
            for &x in xs {
                nodes.push([x, y]);
            }
        }
        let mut cells = Vec::with_capacity((nx - 1) * (ys.len() - 1));
        for j in 0..ys.len() - 1 {
            for i in 0..nx - 1 {
                let a = j * nx + i;
                cells.push([a, a + 1, a + nx + 1, a + nx]);
            }
        }
        Self::from_nodes_cells(nodes, cells)
    }

    /// Generic mesh from nodes and counterclockwise quad connectivity.
    /// Nodes at the midpoint of another cell's edge are classified as hanging.
    pub fn from_nodes_cells(nodes: Vec<Point>, cells: Vec<[usize; 4]>) -> Result<Self> {
        if nodes.is_empty() || cells.is_empty() {
            return Err(Error::Config("mesh needs at least one node and one cell".into()));
        }
        for (c, cell) in cells.iter().enumerate() {
            if cell.iter().any(|&n| n >= nodes.len()) {
                return Err(Error::Config(format!("cell {c} references a missing node")));
            }
            let poly: Vec<Point> = cell.iter().map(|&n| nodes[n]).collect();
            if crate::geometry::polygon_area(&poly) <= 0.0 {
                return Err(Error::Config(format!("cell {c} is not counterclockwise")));
            }
        }
        let mut lo = nodes[0];
        let mut hi = nodes[0];
        for p in &nodes {
            lo = [lo[0].min(p[0]), lo[1].min(p[1])];
            hi = [hi[0].max(p[0]), hi[1].max(p[1])];
        }
        let bbox = Aabb::new(lo, hi);
        let q = 1e-9 * bbox.diameter();
        let key = |p: Point| [(p[0] / q).round() as i64, (p[1] / q).round() as i64];
        let lookup: HashMap<[i64; 2], usize> =
            nodes.iter().enumerate().map(|(i, &p)| (key(p), i)).collect();
        let mut parents = vec![None; nodes.len()];
        for cell in &cells {
            for e in 0..4 {
                let (a, b) = (cell[e], cell[(e + 1) % 4]);
                let m = [0.5 * (nodes[a][0] + nodes[b][0]), 0.5 * (nodes[a][1] + nodes[b][1])];
                if let Some(&h) = lookup.get(&key(m)) {
                    if h != a && h != b {
                        parents[h] = Some([a.min(b), a.max(b)]);
                    }
                }
            }
        }
        let mut mesh = QuadMesh { bbox, nodes, cells, parents, tree: None, locator: None };
        mesh.locator = Some(mesh.build_locator());
        Ok(mesh)
    }

    fn from_leaves(bbox: Aabb, background: [usize; 2], mut leaves: Vec<CellKey>) -> Self {
        let fine = |k: &CellKey| {
            let s = MAX_LEVEL - k.level;
            (k.j << s, k.i << s, k.level)
        };
        leaves.sort_by_key(fine);
        let mut keys: Vec<[u64; 2]> = leaves.iter().flat_map(|k| k.corner_keys()).collect();
        keys.sort_by_key(|k| (k[1], k[0]));
        keys.dedup();
        let node_of: HashMap<[u64; 2], usize> =
            keys.iter().enumerate().map(|(i, &k)| (k, i)).collect();
        let nx = (background[0] as f64) * (1u64 << MAX_LEVEL) as f64;
        let ny = (background[1] as f64) * (1u64 << MAX_LEVEL) as f64;
        let w = [bbox.hi[0] - bbox.lo[0], bbox.hi[1] - bbox.lo[1]];
        let nodes: Vec<Point> = keys
            .iter()
            .map(|k| {
                [
                    bbox.lo[0] + w[0] * (k[0] as f64 / nx),
                    bbox.lo[1] + w[1] * (k[1] as f64 / ny),
                ]
            })
            .collect();
        let cells: Vec<[usize; 4]> = leaves
            .iter()
            .map(|k| k.corner_keys().map(|c| node_of[&c]))
            .collect();
        let mut parents = vec![None; nodes.len()];
        for k in &leaves {
            let c = k.corner_keys();
            for e in 0..4 {
                let (a, b) = (c[e], c[(e + 1) % 4]);
                let m = [(a[0] + b[0]) / 2, (a[1] + b[1]) / 2];
                if let Some(&h) = node_of.get(&m) {
                    let (na, nb) = (node_of[&a], node_of[&b]);
                    parents[h] = Some([na.min(nb), na.max(nb)]);
                }
            }
        }
        let index = leaves.iter().enumerate().map(|(i, &k)| (k, i)).collect();
        QuadMesh {
            bbox,
            nodes,
            cells,
            parents,
            tree: Some(Tree { background, leaves, index }),
            locator: None,
        }
    }

    /// Replaces every marked leaf by its four children and refines further until the
    /// mesh is 2:1 balanced across edges.
    pub fn refine(&self, marked: &[usize]) -> Result<Self> {
        let tree = self
            .tree
            .as_ref()
            .ok_or_else(|| Error::Config("only quadtree meshes can be refined".into()))?;
        let mut set: HashSet<CellKey> = tree.leaves.iter().copied().collect();
        for &m in marked {
            let k = *tree.leaves.get(m).ok_or_else(|| {
                Error::Config(format!("marked leaf {m} does not exist"))
            })?;
            if k.level >= MAX_LEVEL {
                return Err(Error::Config(format!("refinement beyond level {MAX_LEVEL}")));
            }
            if set.remove(&k) {
                set.extend(k.children());
            }
        }
        balance(tree.background, &mut set);
        Ok(Self::from_leaves(self.bbox, tree.background, set.into_iter().collect()))
    }

    /// `steps` rounds of marking all leaves that overlap a fracture, each followed by refinement.
    pub fn amr_against_fractures(&self, field: &MaterialField, steps: usize) -> Result<Self> {
        let mut mesh = self.clone();
        for _ in 0..steps {
            let marked: Vec<usize> = (0..mesh.num_cells())
                .into_par_iter()
                .filter(|&c| field.box_hits_any_fracture(&mesh.cell_bbox(c)))
                .collect();
            if marked.is_empty() {
                break;
            }
            mesh = mesh.refine(&marked)?;
        }
        Ok(mesh)
    }

    pub fn bbox(&self) -> Aabb {
        self.bbox
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> Point {
        self.nodes[i]
    }

    pub fn cells(&self) -> &[[usize; 4]] {
        &self.cells
    }

    pub fn cell(&self, c: usize) -> [usize; 4] {
        self.cells[c]
    }

    pub fn cell_corners(&self, c: usize) -> [Point; 4] {
        self.cells[c].map(|n| self.nodes[n])
    }

    pub fn cell_bbox(&self, c: usize) -> Aabb {
        let p = self.cell_corners(c);
        let mut lo = p[0];
        let mut hi = p[0];
        for q in &p[1..] {
            lo = [lo[0].min(q[0]), lo[1].min(q[1])];
            hi = [hi[0].max(q[0]), hi[1].max(q[1])];
        }
        Aabb::new(lo, hi)
    }

    pub fn cell_level(&self, c: usize) -> u32 {
        self.tree.as_ref().map_or(0, |t| t.leaves[c].level)
    }

    pub fn cell_key(&self, c: usize) -> Option<CellKey> {
        self.tree.as_ref().map(|t| t.leaves[c])
    }

    pub fn background(&self) -> Option<[usize; 2]> {
        self.tree.as_ref().map(|t| t.background)
    }

    pub fn is_hanging(&self, n: usize) -> bool {
        self.parents[n].is_some()
    }

    /// Endpoints of the edge on whose midpoint the hanging node `n` sits.
    pub fn hanging_parents(&self, n: usize) -> Option<[usize; 2]> {
        self.parents[n]
    }

    /// (regular, hanging) node ids, each sorted.
    pub fn classify_nodes(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.nodes.len()).partition(|&n| self.parents[n].is_none())
    }

    pub fn num_hanging(&self) -> usize {
        self.parents.iter().filter(|p| p.is_some()).count()
    }

    /// Cells sharing a positive-length piece of an edge with cell `c`.
    pub fn edge_neighbors(&self, c: usize) -> Vec<usize> {
        let mut out = Vec::new();
        match &self.tree {
            Some(t) => {
                for s in 0..4 {
                    t.leaves_across(t.leaves[c], s, &mut out);
                }
            }
            None => {
                let bb = self.cell_bbox(c);
                let tol = 1e-10 * self.bbox.diameter();
                let grown = Aabb::new(
                    [bb.lo[0] - tol, bb.lo[1] - tol],
                    [bb.hi[0] + tol, bb.hi[1] + tol],
                );
                for d in self.candidates(&grown) {
                    if d != c && shares_edge(&self.cell_corners(c), &self.cell_corners(d), tol) {
                        out.push(d);
                    }
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Cell containing `p` (closed cells, first match).
    pub fn locate(&self, p: Point) -> Option<usize> {
        let tol = 1e-12 * self.bbox.diameter();
        if !self.bbox.contains(p, tol) {
            return None;
        }
        if let Some(t) = &self.tree {
            let n = [
                (t.background[0] as u64) << MAX_LEVEL,
                (t.background[1] as u64) << MAX_LEVEL,
            ];
            let w = [self.bbox.hi[0] - self.bbox.lo[0], self.bbox.hi[1] - self.bbox.lo[1]];
            let fx = ((p[0] - self.bbox.lo[0]) / w[0] * n[0] as f64).floor();
            let fy = ((p[1] - self.bbox.lo[1]) / w[1] * n[1] as f64).floor();
            let x = (fx.max(0.0) as u64).min(n[0] - 1);
            let y = (fy.max(0.0) as u64).min(n[1] - 1);
            for level in 0..=MAX_LEVEL {
                let s = MAX_LEVEL - level;
                let k = CellKey { level, i: x >> s, j: y >> s };
                if let Some(&id) = t.index.get(&k) {
                    return Some(id);
                }
            }
            return None;
        }
        let pb = Aabb::new(p, p);
        self.candidates(&pb)
            .into_iter()
            .find(|&c| point_in_quad(&self.cell_corners(c), p, tol))
    }

    fn build_locator(&self) -> Locator {
        let n = self.cells.len();
        let side = ((n as f64).sqrt().ceil() as usize).max(1);
        let lo = self.bbox.lo;
        let h = [
            ((self.bbox.hi[0] - lo[0]) / side as f64).max(f64::MIN_POSITIVE),
            ((self.bbox.hi[1] - lo[1]) / side as f64).max(f64::MIN_POSITIVE),
        ];
        let mut buckets = vec![Vec::new(); side * side];
        let clampi = |v: f64| (v.floor().max(0.0) as usize).min(side - 1);
        for c in 0..n {
            let bb = self.cell_bbox(c);
            let (i0, i1) = (clampi((bb.lo[0] - lo[0]) / h[0]), clampi((bb.hi[0] - lo[0]) / h[0]));
            let (j0, j1) = (clampi((bb.lo[1] - lo[1]) / h[1]), clampi((bb.hi[1] - lo[1]) / h[1]));
            for j in j0..=j1 {
                for i in i0..=i1 {
                    buckets[j * side + i].push(c);
                }
            }
        }
        Locator { lo, h, dims: [side, side], buckets }
    }

    /// Cells whose bucket overlaps the query box (superset of true hits).
    fn candidates(&self, q: &Aabb) -> Vec<usize> {
        let loc = self.locator.as_ref().expect("generic meshes carry a locator");
        let side = loc.dims[0];
        let clampi = |v: f64| (v.floor().max(0.0) as usize).min(side - 1);
        let (i0, i1) = (clampi((q.lo[0] - loc.lo[0]) / loc.h[0]), clampi((q.hi[0] - loc.lo[0]) / loc.h[0]));
        let (j0, j1) = (clampi((q.lo[1] - loc.lo[1]) / loc.h[1]), clampi((q.hi[1] - loc.lo[1]) / loc.h[1]));
        let mut out = Vec::new();
        for j in j0..=j1 {
            for i in i0..=i1 {
                out.extend_from_slice(&loc.buckets[j * side + i]);
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Exhaustive structural audit.
    pub fn audit(&self) -> MeshAudit {
        let tol = 1e-10 * self.bbox.diameter();
        // nodes strictly inside each cell edge, via per-line sorted coordinate lists
        let mut by_line: HashMap<(u8, i64), Vec<f64>> = HashMap::new();
        let q = 1e-9 * self.bbox.diameter();
        let qk = |v: f64| (v / q).round() as i64;
        for p in &self.nodes {
            by_line.entry((0, qk(p[1]))).or_default().push(p[0]);
            by_line.entry((1, qk(p[0]))).or_default().push(p[1]);
        }
        for v in by_line.values_mut() {
            v.sort_by(f64::total_cmp);
        }
        let mut max_interior = 0usize;
        let mut generic_edges = false;
        for c in 0..self.cells.len() {
            let p = self.cell_corners(c);
            for e in 0..4 {
                let (a, b) = (p[e], p[(e + 1) % 4]);
                let count = if (a[1] - b[1]).abs() <= tol {
                    by_line.get(&(0, qk(a[1]))).map_or(0, |v| count_between(v, a[0], b[0], tol))
                } else if (a[0] - b[0]).abs() <= tol {
                    by_line.get(&(1, qk(a[0]))).map_or(0, |v| count_between(v, a[1], b[1], tol))
                } else {
                    generic_edges = true;
                    self.nodes
                        .iter()
                        .filter(|&&x| strictly_inside_segment(a, b, x, tol))
                        .count()
                };
                max_interior = max_interior.max(count);
            }
        }
        let _ = generic_edges;
        let mut max_jump = 0u32;
        if let Some(t) = &self.tree {
            let mut buf = Vec::new();
            for (c, &k) in t.leaves.iter().enumerate() {
                for s in 0..4 {
                    buf.clear();
                    t.leaves_across(k, s, &mut buf);
                    for &d in &buf {
                        let l = t.leaves[d].level;
                        max_jump = max_jump.max(l.abs_diff(t.leaves[c].level));
                    }
                }
            }
        }
        let (mut area, mut comp) = (0.0f64, 0.0f64);
        for c in 0..self.cells.len() {
            let a = crate::geometry::polygon_area(&self.cell_corners(c));
            let t = area + a;
            comp += if area.abs() >= a.abs() { (area - t) + a } else { (a - t) + area };
            area = t;
        }
        let area = area + comp;
        let mut mid_err = 0.0f64;
        for (h, par) in self.parents.iter().enumerate() {
            if let Some([a, b]) = par {
                let m = [
                    0.5 * (self.nodes[*a][0] + self.nodes[*b][0]),
                    0.5 * (self.nodes[*a][1] + self.nodes[*b][1]),
                ];
                let d = (m[0] - self.nodes[h][0]).hypot(m[1] - self.nodes[h][1]);
                mid_err = mid_err.max(d / self.bbox.diameter());
            }
        }
        MeshAudit {
            max_interior_nodes_per_edge: max_interior,
            max_level_jump: max_jump,
            area_rel_error: (area - self.bbox.area()).abs() / self.bbox.area(),
            hanging_midpoint_error: mid_err,
        }
    }
}

fn count_between(sorted: &[f64], a: f64, b: f64, tol: f64) -> usize {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let start = sorted.partition_point(|&v| v <= lo + tol);
    let end = sorted.partition_point(|&v| v < hi - tol);
    end.saturating_sub(start)
}

fn strictly_inside_segment(a: Point, b: Point, x: Point, tol: f64) -> bool {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len = d[0].hypot(d[1]);
    let v = [x[0] - a[0], x[1] - a[1]];
    let cross = (d[0] * v[1] - d[1] * v[0]) / len;
    let t = (d[0] * v[0] + d[1] * v[1]) / len;
    cross.abs() <= tol && t > tol && t < len - tol
}

fn shares_edge(a: &[Point; 4], b: &[Point; 4], tol: f64) -> bool {
    for e in 0..4 {
        let (p, q) = (a[e], a[(e + 1) % 4]);
        for f in 0..4 {
            let (r, s) = (b[f], b[(f + 1) % 4]);
            let d = [q[0] - p[0], q[1] - p[1]];
            let len = d[0].hypot(d[1]);
            let col = |x: Point| ((d[0] * (x[1] - p[1]) - d[1] * (x[0] - p[0])) / len).abs() <= tol;
            if !(col(r) && col(s)) {
                continue;
            }
            let t = |x: Point| (d[0] * (x[0] - p[0]) + d[1] * (x[1] - p[1])) / len;
            let (t0, t1) = (t(r).min(t(s)), t(r).max(t(s)));
            if t0.max(0.0) < t1.min(len) - tol {
                return true;
            }
        }
    }
    false
}

/// Closed point-in-convex-quad test.
pub fn point_in_quad(c: &[Point; 4], p: Point, tol: f64) -> bool {
    (0..4).all(|e| {
        let (a, b) = (c[e], c[(e + 1) % 4]);
        let d = [b[0] - a[0], b[1] - a[1]];
        let len = d[0].hypot(d[1]);
        (d[0] * (p[1] - a[1]) - d[1] * (p[0] - a[0])) / len >= -tol
    })
}

/// Refines leaves until edge-adjacent leaves differ by at most one level.
fn balance(background: [usize; 2], set: &mut HashSet<CellKey>) {
    let mut tree = Tree { background, leaves: Vec::new(), index: HashMap::new() };
    loop {
        let mut leaves: Vec<CellKey> = set.iter().copied().collect();
        leaves.sort();
        tree.index = leaves.iter().enumerate().map(|(i, &k)| (k, i)).collect();
        let mut buf = Vec::new();
        let split: Vec<CellKey> = leaves
            .iter()
            .copied()
            .filter(|&k| {
                (0..4).any(|s| {
                    buf.clear();
                    tree.leaves_across(k, s, &mut buf);
                    buf.iter().any(|&d| leaves[d].level > k.level + 1)
                })
            })
            .collect();
        if split.is_empty() {
            return;
        }
        for k in split {
            set.remove(&k);
            set.extend(k.children());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Fracture, Material, MatrixRegion};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit() -> BoxDomain {
        BoxDomain::all_neumann([0.0, 0.0], [1.0, 1.0]).unwrap()
    }

    fn field_with(fr: Vec<Fracture>) -> MaterialField {
        let d = unit();
        MaterialField::new(
            &d,
            vec![MatrixRegion { bbox: d.bbox(), material: Material { k: 1.0, phi: 1.0 } }],
            Material { k: 1e4, phi: 1.0 },
            fr,
        )
        .unwrap()
    }

    #[test]
    fn uniform_counts() {
        let m = QuadMesh::build_uniform(&unit(), 2, 2).unwrap();
        assert_eq!((m.num_cells(), m.num_nodes(), m.num_hanging()), (4, 9, 0));
        let m = QuadMesh::build_uniform(&unit(), 80, 80).unwrap();
        assert_eq!((m.num_cells(), m.num_nodes()), (6400, 6561));
        assert!(QuadMesh::build_uniform(&unit(), 0, 3).is_err());
        let d = BoxDomain::all_neumann([0.0, 0.0], [700.0, 600.0]).unwrap();
        let be = 14;
        let m = QuadMesh::build_uniform(&d, be, 6 * be / 7).unwrap();
        let bb = m.cell_bbox(0);
        assert!(((bb.hi[0] - bb.lo[0]) - (bb.hi[1] - bb.lo[1])).abs() < 1e-9);
    }

    #[test]
    fn refine_one_corner() {
        let m = QuadMesh::build_uniform(&unit(), 2, 2).unwrap();
        let r = m.refine(&[0]).unwrap();
        assert_eq!(r.num_cells(), 7);
        assert_eq!(r.num_hanging(), 2);
        let (reg, hang) = r.classify_nodes();
        assert_eq!(reg.len() + hang.len(), r.num_nodes());
        for h in hang {
            let [a, b] = r.hanging_parents(h).unwrap();
            assert!(!r.is_hanging(a) && !r.is_hanging(b));
        }
        let all: Vec<usize> = (0..4).collect();
        let u = m.refine(&all).unwrap();
        assert_eq!((u.num_cells(), u.num_hanging()), (16, 0));
    }

    #[test]
    fn repeated_corner_refinement_is_balanced() {
        let mut m = QuadMesh::build_uniform(&unit(), 4, 4).unwrap();
        for _ in 0..3 {
            let c = m.locate([0.3, 0.3]).unwrap();
            m = m.refine(&[c]).unwrap();
        }
        let a = m.audit();
        assert!(a.passes(), "{a:?}");
        // brute-force level jump check via point sampling along every edge
        let h = 1.0 / (4.0 * 8.0 * 4.0);
        for c in 0..m.num_cells() {
            let bb = m.cell_bbox(c);
            let l = m.cell_level(c);
            let mut t = bb.lo[0] + 0.5 * h;
            while t < bb.hi[0] {
                for y in [bb.lo[1] - 0.5 * h, bb.hi[1] + 0.5 * h] {
                    if let Some(d) = m.locate([t, y]) {
                        assert!(m.cell_level(d).abs_diff(l) <= 1);
                    }
                }
                t += h;
            }
        }
    }

    #[test]
    fn amr_strip_refines_overlapping_rows() {
        let f = Fracture::from_endpoints([0.0, 0.55], [1.0, 0.55], 0.02).unwrap();
        let fld = field_with(vec![f]);
        let m = QuadMesh::build_uniform(&unit(), 4, 4).unwrap();
        let r = m.amr_against_fractures(&fld, 1).unwrap();
        // row j = 2 overlaps the strip [0.54, 0.56]; all other rows untouched (no closure needed)
        assert_eq!(r.num_cells(), 16 - 4 + 16);
        for c in 0..r.num_cells() {
            let bb = r.cell_bbox(c);
            let in_row = bb.lo[1] >= 0.5 - 1e-12 && bb.hi[1] <= 0.75 + 1e-12;
            assert_eq!(r.cell_level(c) == 1, in_row);
        }
        let g = Fracture::from_endpoints([0.0, 0.5], [1.0, 0.5], 0.02).unwrap();
        let r = m.amr_against_fractures(&field_with(vec![g]), 1).unwrap();
        assert_eq!(r.num_cells(), 8 + 32);
        assert_eq!(m.amr_against_fractures(&fld, 0).unwrap().num_cells(), 16);
    }

    #[test]
    fn amr_deterministic_and_audited() {
        let fr = vec![
            Fracture::from_endpoints([0.1, 0.2], [0.9, 0.7], 1e-3).unwrap(),
            Fracture::from_endpoints([0.3, 0.9], [0.6, 0.05], 1e-3).unwrap(),
        ];
        let fld = field_with(fr);
        let m = QuadMesh::build_uniform(&unit(), 5, 5).unwrap();
        let a = m.amr_against_fractures(&fld, 5).unwrap();
        let b = m.amr_against_fractures(&fld, 5).unwrap();
        assert_eq!(a.cells(), b.cells());
        assert_eq!(a.nodes(), b.nodes());
        let au = a.audit();
        assert!(au.passes(), "{au:?}");
        assert!(a.num_hanging() > 0);
    }

    #[test]
    fn locate_finds_containing_cell() {
        let f = Fracture::from_endpoints([0.1, 0.2], [0.9, 0.7], 1e-3).unwrap();
        let m = QuadMesh::build_uniform(&unit(), 3, 3)
            .unwrap()
            .amr_against_fractures(&field_with(vec![f]), 3)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let p = [rng.random::<f64>(), rng.random::<f64>()];
            let c = m.locate(p).unwrap();
            assert!(m.cell_bbox(c).contains(p, 1e-14));
        }
        let t = QuadMesh::build_tensor(&[0.0, 0.3, 1.0], &[0.0, 0.5, 0.6, 1.0]).unwrap();
        let c = t.locate([0.5, 0.55]).unwrap();
        assert!(t.cell_bbox(c).contains([0.5, 0.55], 0.0));
        assert_eq!(t.edge_neighbors(c).len(), 3);
    }

    #[test]
    fn imported_mesh_detects_hanging() {
        // two fine cells on the left of one coarse cell
        let nodes = vec![
            [0.0, 0.0], [0.5, 0.0], [1.5, 0.0],
            [0.0, 0.5], [0.5, 0.5],
            [0.0, 1.0], [0.5, 1.0], [1.5, 1.0],
        ];
        let cells = vec![[0, 1, 4, 3], [3, 4, 6, 5], [1, 2, 7, 6]];
        let m = QuadMesh::from_nodes_cells(nodes, cells).unwrap();
        assert_eq!(m.num_hanging(), 1);
        assert_eq!(m.hanging_parents(4), Some([1, 6]));
        assert_eq!(m.audit().max_interior_nodes_per_edge, 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn random_refinement_keeps_invariants(seed in 0u64..10_000, rounds in 1usize..5) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut m = QuadMesh::build_uniform(&unit(), 3, 2).unwrap();
                for _ in 0..rounds {
                    let n = m.num_cells();
                    let marked: Vec<usize> = (0..n).filter(|_| rng.random::<f64>() < 0.2).collect();
                    m = m.refine(&marked).unwrap();
                }
                let a = m.audit();
                prop_assert!(a.passes(), "{:?}", a);
                let (r, h) = m.classify_nodes();
                prop_assert_eq!(r.len() + h.len(), m.num_nodes());
            }
        }
    }
}

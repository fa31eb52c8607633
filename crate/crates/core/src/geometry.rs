//! Box domain, thin rotated fracture rectangles and piecewise-constant material fields.

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Axis-aligned box `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub lo: Point,
    pub hi: Point,
}

impl Aabb {
    pub fn new(lo: Point, hi: Point) -> Self {
        Aabb { lo, hi }
    }

    pub fn area(&self) -> f64 {
        (self.hi[0] - self.lo[0]) * (self.hi[1] - self.lo[1])
    }

    pub fn center(&self) -> Point {
        [0.5 * (self.lo[0] + self.hi[0]), 0.5 * (self.lo[1] + self.hi[1])]
    }

    pub fn contains(&self, p: Point, tol: f64) -> bool {
        p[0] >= self.lo[0] - tol
            && p[0] <= self.hi[0] + tol
            && p[1] >= self.lo[1] - tol
            && p[1] <= self.hi[1] + tol
    }

    /// Corners in counterclockwise order starting at `lo`.
    pub fn corners(&self) -> [Point; 4] {
        [
            self.lo,
            [self.hi[0], self.lo[1]],
            self.hi,
            [self.lo[0], self.hi[1]],
        ]
    }

    /// True when the open boxes overlap with positive area.
    pub fn overlaps_open(&self, other: &Aabb) -> bool {
        self.lo[0].max(other.lo[0]) < self.hi[0].min(other.hi[0])
            && self.lo[1].max(other.lo[1]) < self.hi[1].min(other.hi[1])
    }

    pub fn diameter(&self) -> f64 {
        (self.hi[0] - self.lo[0]).hypot(self.hi[1] - self.lo[1])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Bottom,
    Right,
    Top,
    Left,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Bottom, Side::Right, Side::Top, Side::Left];

    pub fn parse(s: &str) -> Option<Side> {
        match s {
            "bottom" => Some(Side::Bottom),
            "right" => Some(Side::Right),
            "top" => Some(Side::Top),
            "left" => Some(Side::Left),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Side::Bottom => "bottom",
            Side::Right => "right",
            Side::Top => "top",
            Side::Left => "left",
        }
    }

    /// Outward unit normal.
    pub fn normal(self) -> Point {
        match self {
            Side::Bottom => [0.0, -1.0],
            Side::Right => [1.0, 0.0],
            Side::Top => [0.0, 1.0],
            Side::Left => [-1.0, 0.0],
        }
    }

    /// Index of the coordinate that varies along this side.
    pub fn tangent_axis(self) -> usize {
        match self {
            Side::Bottom | Side::Top => 0,
            Side::Left | Side::Right => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundaryTag {
    Dirichlet,
    Neumann,
}

/// A piece of one side of the box, parameterised by the coordinate running along that side.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundarySegment {
    pub name: String,
    pub side: Side,
    pub range: [f64; 2],
    pub tag: BoundaryTag,
}

#[derive(Clone, Debug)]
pub struct BoxDomain {
    pub origin: Point,
    pub lengths: [f64; 2],
    segments: Vec<BoundarySegment>,
}

impl BoxDomain {
    /// Builds a domain whose boundary partition is exactly `segments`.
    pub fn new(origin: Point, lengths: [f64; 2], segments: Vec<BoundarySegment>) -> Result<Self> {
        let d = BoxDomain { origin, lengths, segments };
        let errs = d.validate();
        if errs.is_empty() {
            Ok(d)
        } else {
            Err(Error::ConfigList(errs))
        }
    }

    /// Builds a domain from the given segments and covers every uncovered boundary
    /// portion with homogeneous Neumann segments named `<side>_rest<k>`.
    pub fn with_neumann_fill(
        origin: Point,
        lengths: [f64; 2],
        mut segments: Vec<BoundarySegment>,
    ) -> Result<Self> {
        let probe = BoxDomain { origin, lengths, segments: segments.clone() };
        let mut errs = probe.validate_lengths();
        for side in Side::ALL {
            let (a, b) = probe.side_extent(side);
            let mut iv: Vec<[f64; 2]> = segments
                .iter()
                .filter(|s| s.side == side)
                .map(|s| s.range)
                .collect();
            iv.sort_by(|x, y| x[0].total_cmp(&y[0]));
            let tol = 1e-12 * (b - a).abs().max(1.0);
            let mut cursor = a;
            let mut k = 0;
            let mut fill = Vec::new();
            for r in &iv {
                if r[0] > cursor + tol {
                    fill.push([cursor, r[0]]);
                }
                cursor = cursor.max(r[1]);
            }
            if b > cursor + tol {
                fill.push([cursor, b]);
            }
            for r in fill {
                segments.push(BoundarySegment {
                    name: format!("{}_rest{}", side.name(), k),
                    side,
                    range: r,
                    tag: BoundaryTag::Neumann,
                });
                k += 1;
            }
        }
        let d = BoxDomain { origin, lengths, segments };
        errs.extend(d.validate());
        errs.dedup();
        if errs.is_empty() {
            Ok(d)
        } else {
            Err(Error::ConfigList(errs))
        }
    }

    /// Unit-free convenience: whole boundary Neumann.
    pub fn all_neumann(origin: Point, lengths: [f64; 2]) -> Result<Self> {
        Self::with_neumann_fill(origin, lengths, Vec::new())
    }

    pub fn segments(&self) -> &[BoundarySegment] {
        &self.segments
    }

    pub fn bbox(&self) -> Aabb {
        Aabb::new(
            self.origin,
            [self.origin[0] + self.lengths[0], self.origin[1] + self.lengths[1]],
        )
    }

    pub fn area(&self) -> f64 {
        self.lengths[0] * self.lengths[1]
    }

    fn side_extent(&self, side: Side) -> (f64, f64) {
        let ax = side.tangent_axis();
        (self.origin[ax], self.origin[ax] + self.lengths[ax])
    }

    fn validate_lengths(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.lengths[0] > 0.0 && self.lengths[1] > 0.0) {
            errs.push(format!(
                "domain lengths must be positive, got [{}, {}]",
                self.lengths[0], self.lengths[1]
            ));
        }
        errs
    }

    fn validate(&self) -> Vec<String> {
        let mut errs = self.validate_lengths();
        if !errs.is_empty() {
            return errs;
        }
        let mut names = std::collections::BTreeSet::new();
        for s in &self.segments {
            if !names.insert(s.name.as_str()) {
                errs.push(format!("duplicate boundary segment name '{}'", s.name));
            }
            let (a, b) = self.side_extent(s.side);
            let tol = 1e-12 * (b - a).abs().max(1.0);
            if !(s.range[0] < s.range[1]) {
                errs.push(format!("boundary segment '{}' has empty range", s.name));
            } else if s.range[0] < a - tol || s.range[1] > b + tol {
                errs.push(format!(
                    "boundary segment '{}' range [{}, {}] leaves side {} = [{}, {}]",
                    s.name,
                    s.range[0],
                    s.range[1],
                    s.side.name(),
                    a,
                    b
                ));
            }
        }
        for side in Side::ALL {
            let (a, b) = self.side_extent(side);
            let tol = 1e-9 * (b - a).abs().max(1.0);
            let mut iv: Vec<&BoundarySegment> =
                self.segments.iter().filter(|s| s.side == side).collect();
            iv.sort_by(|x, y| x.range[0].total_cmp(&y.range[0]));
            let mut cursor = a;
            for s in iv {
                if s.range[0] < cursor - tol {
                    errs.push(format!(
                        "boundary segment '{}' overlaps another segment on side {}",
                        s.name,
                        side.name()
                    ));
                } else if s.range[0] > cursor + tol {
                    errs.push(format!(
                        "side {} is not covered on [{}, {}]",
                        side.name(),
                        cursor,
                        s.range[0]
                    ));
                }
                cursor = cursor.max(s.range[1]);
            }
            if cursor < b - tol {
                errs.push(format!("side {} is not covered on [{}, {}]", side.name(), cursor, b));
            }
        }
        errs
    }

    /// Side on which the boundary point `p` lies (first match in Bottom, Right, Top, Left order).
    pub fn side_of(&self, p: Point) -> Option<Side> {
        let bb = self.bbox();
        let tol = 1e-10 * bb.diameter();
        if !bb.contains(p, tol) {
            return None;
        }
        if (p[1] - bb.lo[1]).abs() <= tol {
            Some(Side::Bottom)
        } else if (p[0] - bb.hi[0]).abs() <= tol {
            Some(Side::Right)
        } else if (p[1] - bb.hi[1]).abs() <= tol {
            Some(Side::Top)
        } else if (p[0] - bb.lo[0]).abs() <= tol {
            Some(Side::Left)
        } else {
            None
        }
    }

    /// Segment containing the straight boundary edge `a`–`b`, decided at its midpoint.
    pub fn segment_of_edge(&self, a: Point, b: Point) -> Option<&BoundarySegment> {
        let sa = self.sides_containing(a);
        let sb = self.sides_containing(b);
        let side = sa.iter().copied().find(|s| sb.contains(s))?;
        let m = [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])];
        let t = m[side.tangent_axis()];
        self.segments
            .iter()
            .find(|s| s.side == side && t >= s.range[0] && t <= s.range[1])
    }

    /// All sides whose closed extent contains `p`.
    pub fn sides_containing(&self, p: Point) -> Vec<Side> {
        let bb = self.bbox();
        let tol = 1e-10 * bb.diameter();
        let mut out = Vec::new();
        if !bb.contains(p, tol) {
            return out;
        }
        if (p[1] - bb.lo[1]).abs() <= tol {
            out.push(Side::Bottom);
        }
        if (p[0] - bb.hi[0]).abs() <= tol {
            out.push(Side::Right);
        }
        if (p[1] - bb.hi[1]).abs() <= tol {
            out.push(Side::Top);
        }
        if (p[0] - bb.lo[0]).abs() <= tol {
            out.push(Side::Left);
        }
        out
    }

    /// True when `p` lies on the closure of a segment with the given tag.
    pub fn point_has_tag(&self, p: Point, tag: BoundaryTag) -> bool {
        let tol = 1e-10 * self.bbox().diameter();
        self.sides_containing(p).into_iter().any(|side| {
            let t = p[side.tangent_axis()];
            self.segments.iter().any(|s| {
                s.side == side && s.tag == tag && t >= s.range[0] - tol && t <= s.range[1] + tol
            })
        })
    }
}

/// Thin rectangle `|ξ₁| ≤ half_length`, `|ξ₂| ≤ half_aperture` in the frame rotated by `angle`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fracture {
    pub center: Point,
    pub half_length: f64,
    pub half_aperture: f64,
    pub angle: f64,
}

impl Fracture {
    pub fn new(center: Point, half_length: f64, half_aperture: f64, angle: f64) -> Result<Self> {
        if !(half_aperture > 0.0) {
            return Err(Error::Config(format!(
                "fracture half aperture must be positive, got {half_aperture}"
            )));
        }
        if !(half_aperture <= half_length) {
            return Err(Error::Config(format!(
                "fracture half aperture {half_aperture} exceeds half length {half_length}"
            )));
        }
        Ok(Fracture { center, half_length, half_aperture, angle })
    }

    /// Fracture whose axis runs from `a` to `b` with full aperture `aperture`.
    pub fn from_endpoints(a: Point, b: Point, aperture: f64) -> Result<Self> {
        let dx = b[0] - a[0];
        let dy = b[1] - a[1];
        Self::new(
            [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])],
            0.5 * dx.hypot(dy),
            0.5 * aperture,
            dy.atan2(dx),
        )
    }

    /// Fracture from four rectangle corners given in cyclic order.
    pub fn from_corners(c: [Point; 4]) -> Result<Self> {
        let center = [
            0.25 * (c[0][0] + c[1][0] + c[2][0] + c[3][0]),
            0.25 * (c[0][1] + c[1][1] + c[2][1] + c[3][1]),
        ];
        let e0 = [c[1][0] - c[0][0], c[1][1] - c[0][1]];
        let e1 = [c[2][0] - c[1][0], c[2][1] - c[1][1]];
        let l0 = e0[0].hypot(e0[1]);
        let l1 = e1[0].hypot(e1[1]);
        let dot = e0[0] * e1[0] + e0[1] * e1[1];
        if l0 == 0.0 || l1 == 0.0 || dot.abs() > 1e-8 * l0 * l1 {
            return Err(Error::Config("fracture corners do not form a rectangle".into()));
        }
        let (long, ll, ls) = if l0 >= l1 { (e0, l0, l1) } else { (e1, l1, l0) };
        Self::new(center, 0.5 * ll, 0.5 * ls, long[1].atan2(long[0]))
    }

    fn axes(&self) -> (Point, Point) {
        let (s, c) = self.angle.sin_cos();
        ([c, s], [-s, c])
    }

    /// Coordinates of `p` in the fracture frame.
    pub fn local(&self, p: Point) -> Point {
        let (u, n) = self.axes();
        let d = [p[0] - self.center[0], p[1] - self.center[1]];
        [d[0] * u[0] + d[1] * u[1], d[0] * n[0] + d[1] * n[1]]
    }

    /// Closed-rectangle membership.
    pub fn contains(&self, p: Point) -> bool {
        let l = self.local(p);
        l[0].abs() <= self.half_length && l[1].abs() <= self.half_aperture
    }

    pub fn corners(&self) -> [Point; 4] {
        let (u, n) = self.axes();
        let (a, b) = (self.half_length, self.half_aperture);
        let at = |s: f64, t: f64| {
            [
                self.center[0] + s * a * u[0] + t * b * n[0],
                self.center[1] + s * a * u[1] + t * b * n[1],
            ]
        };
        [at(-1.0, -1.0), at(1.0, -1.0), at(1.0, 1.0), at(-1.0, 1.0)]
    }

    /// Endpoints of the fracture axis.
    pub fn axis_endpoints(&self) -> (Point, Point) {
        let (u, _) = self.axes();
        let h = self.half_length;
        (
            [self.center[0] - h * u[0], self.center[1] - h * u[1]],
            [self.center[0] + h * u[0], self.center[1] + h * u[1]],
        )
    }

    pub fn bbox(&self) -> Aabb {
        let c = self.corners();
        let mut lo = c[0];
        let mut hi = c[0];
        for p in &c[1..] {
            lo = [lo[0].min(p[0]), lo[1].min(p[1])];
            hi = [hi[0].max(p[0]), hi[1].max(p[1])];
        }
        Aabb::new(lo, hi)
    }

    pub fn area(&self) -> f64 {
        4.0 * self.half_length * self.half_aperture
    }
}

/// Separating-axis overlap test for two convex polygons with positive-area intersection.
/// Candidate axes are the edge normals of both polygons; touching shapes do not overlap.
pub fn convex_overlap(a: &[Point], b: &[Point]) -> bool {
    for poly in [a, b] {
        let n = poly.len();
        for i in 0..n {
            let p = poly[i];
            let q = poly[(i + 1) % n];
            let axis = [q[1] - p[1], p[0] - q[0]];
            if axis[0] == 0.0 && axis[1] == 0.0 {
                continue;
            }
            let proj = |s: &[Point]| {
                s.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    let d = v[0] * axis[0] + v[1] * axis[1];
                    (lo.min(d), hi.max(d))
                })
            };
            let (alo, ahi) = proj(a);
            let (blo, bhi) = proj(b);
            if alo.max(blo) >= ahi.min(bhi) {
                return false;
            }
        }
    }
    true
}

/// True iff the open box and the open fracture rectangle share positive area.
pub fn box_intersects_fracture(cell: &Aabb, f: &Fracture) -> bool {
    if !cell.overlaps_open(&f.bbox()) {
        return false;
    }
    convex_overlap(&cell.corners(), &f.corners())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Material {
    pub k: f64,
    pub phi: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixRegion {
    pub bbox: Aabb,
    pub material: Material,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Region {
    Fracture(usize),
    Matrix(usize),
}

#[derive(Clone, Debug)]
pub struct MaterialField {
    domain: Aabb,
    regions: Vec<MatrixRegion>,
    fracture: Material,
    fractures: Vec<Fracture>,
    fracture_boxes: Vec<Aabb>,
}

impl MaterialField {
    pub fn new(
        domain: &BoxDomain,
        regions: Vec<MatrixRegion>,
        fracture: Material,
        fractures: Vec<Fracture>,
    ) -> Result<Self> {
        let bb = domain.bbox();
        let mut errs = Vec::new();
        let check = |m: &Material, what: &str, errs: &mut Vec<String>| {
            if !(m.k > 0.0 && m.k.is_finite()) {
                errs.push(format!("{what}: permeability must be positive, got {}", m.k));
            }
            if !(m.phi > 0.0 && m.phi <= 1.0) {
                errs.push(format!("{what}: porosity must lie in (0, 1], got {}", m.phi));
            }
        };
        if regions.is_empty() {
            errs.push("at least one matrix region is required".into());
        }
        for (i, r) in regions.iter().enumerate() {
            check(&r.material, &format!("matrix region {i}"), &mut errs);
        }
        if !fractures.is_empty() {
            check(&fracture, "fracture material", &mut errs);
        }
        let tol = 1e-9 * bb.diameter();
        for (i, f) in fractures.iter().enumerate() {
            let (a, b) = f.axis_endpoints();
            if !(bb.contains(a, tol) && bb.contains(b, tol)) {
                errs.push(format!(
                    "fracture {i} axis ({:.6}, {:.6})-({:.6}, {:.6}) leaves the domain",
                    a[0], a[1], b[0], b[1]
                ));
            }
        }
        if !regions.is_empty() && !covers(&bb, &regions) {
            errs.push("matrix regions do not cover the domain".into());
        }
        if !errs.is_empty() {
            return Err(Error::ConfigList(errs));
        }
        let fracture_boxes = fractures.iter().map(|f| f.bbox()).collect();
        Ok(MaterialField { domain: bb, regions, fracture, fractures, fracture_boxes })
    }

    /// One matrix material everywhere, no fractures.
    pub fn homogeneous(domain: &BoxDomain, m: Material) -> Result<Self> {
        Self::new(domain, vec![MatrixRegion { bbox: domain.bbox(), material: m }], m, Vec::new())
    }

    pub fn fractures(&self) -> &[Fracture] {
        &self.fractures
    }

    pub fn regions(&self) -> &[MatrixRegion] {
        &self.regions
    }

    pub fn fracture_material(&self) -> Material {
        self.fracture
    }

    pub fn domain(&self) -> Aabb {
        self.domain
    }

    pub fn classify_point(&self, p: Point) -> Result<Region> {
        if !self.domain.contains(p, 1e-12 * self.domain.diameter()) {
            return Err(Error::OutOfDomain { x: p[0], y: p[1] });
        }
        Ok(self.classify_unchecked(p))
    }

    /// Classification without the domain check; points outside all regions map to region 0.
    pub fn classify_unchecked(&self, p: Point) -> Region {
        for (i, f) in self.fractures.iter().enumerate() {
            if self.fracture_boxes[i].contains(p, 0.0) && f.contains(p) {
                return Region::Fracture(i);
            }
        }
        let idx = self
            .regions
            .iter()
            .rposition(|r| r.bbox.contains(p, 0.0))
            .unwrap_or(0);
        Region::Matrix(idx)
    }

    pub fn material_of(&self, r: Region) -> Material {
        match r {
            Region::Fracture(_) => self.fracture,
            Region::Matrix(i) => self.regions[i].material,
        }
    }

    pub fn material_at(&self, p: Point) -> Result<Material> {
        Ok(self.material_of(self.classify_point(p)?))
    }

    pub fn material_unchecked(&self, p: Point) -> Material {
        self.material_of(self.classify_unchecked(p))
    }

    /// True when the open box overlaps some fracture with positive area.
    pub fn box_hits_any_fracture(&self, cell: &Aabb) -> bool {
        self.fractures
            .iter()
            .zip(&self.fracture_boxes)
            .any(|(f, fb)| cell.overlaps_open(fb) && convex_overlap(&cell.corners(), &f.corners()))
    }

    /// True when the material may vary inside the box: it hits a fracture or straddles a region border.
    pub fn box_is_heterogeneous(&self, cell: &Aabb) -> bool {
        if self.box_hits_any_fracture(cell) {
            return true;
        }
        let c = cell.center();
        let m = self.material_unchecked(c);
        self.regions.iter().any(|r| {
            r.material != m
                && r.bbox.overlaps_open(cell)
                && !(r.bbox.contains(cell.lo, 0.0) && r.bbox.contains(cell.hi, 0.0))
        })
    }
}

/// Exact union-of-boxes coverage test over the grid of region breakpoints.
fn covers(domain: &Aabb, regions: &[MatrixRegion]) -> bool {
    let mut xs = vec![domain.lo[0], domain.hi[0]];
    let mut ys = vec![domain.lo[1], domain.hi[1]];
    for r in regions {
        for (v, lo, hi) in [(&mut xs, 0, 0), (&mut ys, 1, 1)] {
            for c in [r.bbox.lo[lo], r.bbox.hi[hi]] {
                if c > domain.lo[lo] && c < domain.hi[lo] {
                    v.push(c);
                }
            }
        }
    }
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    ys.sort_by(f64::total_cmp);
    ys.dedup();
    for wx in xs.windows(2) {
        for wy in ys.windows(2) {
            let c = [0.5 * (wx[0] + wx[1]), 0.5 * (wy[0] + wy[1])];
            if !regions.iter().any(|r| r.bbox.contains(c, 0.0)) {
                return false;
            }
        }
    }
    true
}

/// Signed area of a polygon (positive for counterclockwise order).
pub fn polygon_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let o = poly[0];
    let mut s = 0.0;
    for i in 1..n - 1 {
        let p = [poly[i][0] - o[0], poly[i][1] - o[1]];
        let q = [poly[i + 1][0] - o[0], poly[i + 1][1] - o[1]];
        s += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * s
}

/// Sutherland–Hodgman clip of a convex polygon to the half-plane `n·x ≤ c`.
pub fn clip_halfplane(poly: &[Point], n: Point, c: f64) -> Vec<Point> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    let len = poly.len();
    for i in 0..len {
        let p = poly[i];
        let q = poly[(i + 1) % len];
        let dp = n[0] * p[0] + n[1] * p[1] - c;
        let dq = n[0] * q[0] + n[1] * q[1] - c;
        if dp <= 0.0 {
            out.push(p);
        }
        if (dp < 0.0 && dq > 0.0) || (dp > 0.0 && dq < 0.0) {
            let t = dp / (dp - dq);
            out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
        }
    }
    out
}

/// Parameter interval `[t0, t1]` of the segment `a + t(b - a)` inside a convex counterclockwise polygon.
pub fn clip_segment_convex(a: Point, b: Point, poly: &[Point]) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    let d = [b[0] - a[0], b[1] - a[1]];
    let len = poly.len();
    for i in 0..len {
        let p = poly[i];
        let q = poly[(i + 1) % len];
        let n = [q[1] - p[1], p[0] - q[0]];
        let num = n[0] * (p[0] - a[0]) + n[1] * (p[1] - a[1]);
        let den = n[0] * d[0] + n[1] * d[1];
        if den == 0.0 {
            if num < 0.0 {
                return None;
            }
        } else {
            let t = num / den;
            if den > 0.0 {
                t1 = t1.min(t);
            } else {
                t0 = t0.max(t);
            }
        }
        if t0 >= t1 {
            return None;
        }
    }
    Some((t0, t1))
}

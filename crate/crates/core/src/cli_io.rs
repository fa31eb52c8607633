//! Batch front end: configuration parsing, run orchestration and file emitters.
//!
//! Configuration files are TOML with `version = 1`:
//!
//! ```toml
//! version = 1
//!
//! [domain]
//! origin = [0.0, 0.0]
//! size = [1.0, 1.0]
//! boundary = [
//!   { name = "inlet", side = "left", range = [0.0, 1.0], type = "neumann" },
//!   { name = "outlet", side = "right", range = [0.0, 1.0], type = "dirichlet" },
//! ]
//!
//! [materials]
//! matrix = { k = 1.0, phi = 1.0 }
//! fracture = { k = 1e4, phi = 1.0 }
//! regions = [{ lo = [0.0, 0.0], hi = [1.0, 0.1], k = 1e-2, phi = 0.5 }]
//!
//! [[fractures]]
//! a = [0.0, 0.5]
//! b = [1.0, 0.5]
//! aperture = 1e-4
//!
//! [mesh]
//! be = [80, 80]
//! amr_steps = 5
//!
//! [flow]
//! stabilize = true
//! values = { inlet = -1.0, outlet = 1.0 }
//!
//! [transport]
//! dt = 0.025
//! t_fin = 0.5
//! inflow = { inlet = 1.0 }
//!
//! [[postprocess.interfaces]]
//! id = "BB'"
//! kind = "line"
//! a = [0.0, 0.7]
//! b = [1.0, 0.7]
//!
//! [[postprocess.samples]]
//! id = "AA'"
//! a = [0.5, 0.0]
//! b = [0.5, 1.0]
//! n = 201
//!
//! [output]
//! dir = "out"
//! ```
//!
//! Boundary portions not listed under `domain.boundary` are homogeneous Neumann. Flow values
//! are pressures on Dirichlet segments and outward normal velocities on Neumann segments.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fespace::FeSpace;
use crate::flow::{
    dirichlet_boundary_flux, flux_error, flux_profile, interface_flux, solve_flow, FlowConfig, FlowProblem,
    FlowSolution, FluxProfile, FluxResult, FluxSide, Interface, InterfaceKind,
};
use crate::geometry::{
    Aabb, BoundarySegment, BoundaryTag, BoxDomain, Fracture, Material, MaterialField, MatrixRegion, Point, Side,
};
use crate::mesh::QuadMesh;
use crate::transport::{run_transport, InflowData, Limiter, TransportConfig, TransportOperators, TransportRun};

pub const SCHEMA_VERSION: i64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum MeshSpec {
    /// Uniform background refined toward the fractures.
    Amr { be: [usize; 2], amr_steps: usize },
    /// Tensor-product mesh fitted to axis-aligned fractures, `fe` elements across each aperture.
    Resolved { be: [usize; 2], fe: usize },
    /// External quad mesh from node and connectivity CSV files.
    Import { nodes: PathBuf, cells: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleField {
    Pressure,
    Concentration,
}

#[derive(Clone, Debug)]
pub struct SampleSpec {
    pub id: String,
    pub a: Point,
    pub b: Point,
    pub n: usize,
}

#[derive(Clone, Debug)]
pub struct ReferenceFlux {
    pub interface: String,
    pub path: PathBuf,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub domain: BoxDomain,
    pub field: MaterialField,
    pub mesh: MeshSpec,
    pub flow: FlowConfig,
    pub transport: Option<TransportConfig>,
    pub interfaces: Vec<Interface>,
    pub samples: Vec<SampleSpec>,
    pub reference_fluxes: Vec<ReferenceFlux>,
    pub output_dir: PathBuf,
    /// SHA-256 of the configuration text.
    pub hash: String,
}

pub fn config_hash(text: &str) -> String {
    let d = Sha256::digest(text.as_bytes());
    d.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

// ===========================================================================
// Strict TOML walker
// ===========================================================================

struct Errors(RefCell<Vec<String>>);

impl Errors {
    fn push(&self, s: String) {
        self.0.borrow_mut().push(s);
    }
}

struct Node<'a> {
    path: String,
    table: &'a toml::Table,
    used: RefCell<BTreeSet<String>>,
    errs: &'a Errors,
}

impl<'a> Node<'a> {
    fn new(path: &str, table: &'a toml::Table, errs: &'a Errors) -> Self {
        Node { path: path.into(), table, used: RefCell::new(BTreeSet::new()), errs }
    }

    fn key(&self, k: &str) -> String {
        if self.path.is_empty() {
            k.to_string()
        } else {
            format!("{}.{}", self.path, k)
        }
    }

    fn raw(&self, k: &str) -> Option<&'a toml::Value> {
        self.used.borrow_mut().insert(k.to_string());
        self.table.get(k)
    }

    fn missing(&self, k: &str) {
        self.errs.push(format!("missing required key '{}'", self.key(k)));
    }

    fn wrong(&self, k: &str, what: &str) {
        self.errs.push(format!("'{}' must be {what}", self.key(k)));
    }

    fn f64_opt(&self, k: &str) -> Option<f64> {
        match self.raw(k)? {
            toml::Value::Float(x) => Some(*x),
            toml::Value::Integer(i) => Some(*i as f64),
            _ => {
                self.wrong(k, "a number");
                None
            }
        }
    }

    fn f64_req(&self, k: &str) -> Option<f64> {
        if self.table.contains_key(k) {
            self.f64_opt(k)
        } else {
            self.raw(k);
            self.missing(k);
            None
        }
    }

    fn usize_opt(&self, k: &str) -> Option<usize> {
        match self.raw(k)? {
            toml::Value::Integer(i) if *i >= 0 => Some(*i as usize),
            _ => {
                self.wrong(k, "a non-negative integer");
                None
            }
        }
    }

    fn bool_opt(&self, k: &str) -> Option<bool> {
        match self.raw(k)? {
            toml::Value::Boolean(b) => Some(*b),
            _ => {
                self.wrong(k, "a boolean");
                None
            }
        }
    }

    fn str_opt(&self, k: &str) -> Option<&'a str> {
        match self.raw(k)? {
            toml::Value::String(s) => Some(s.as_str()),
            _ => {
                self.wrong(k, "a string");
                None
            }
        }
    }

    fn str_req(&self, k: &str) -> Option<&'a str> {
        if self.table.contains_key(k) {
            self.str_opt(k)
        } else {
            self.raw(k);
            self.missing(k);
            None
        }
    }

    fn numbers(&self, k: &str, n: usize) -> Option<Vec<f64>> {
        let v = self.raw(k)?;
        let arr = v.as_array().filter(|a| a.len() == n).and_then(|a| {
            a.iter()
                .map(|x| match x {
                    toml::Value::Float(f) => Some(*f),
                    toml::Value::Integer(i) => Some(*i as f64),
                    _ => None,
                })
                .collect::<Option<Vec<f64>>>()
        });
        if arr.is_none() {
            self.wrong(k, &format!("an array of {n} numbers"));
        }
        arr
    }

    fn point_opt(&self, k: &str) -> Option<Point> {
        self.numbers(k, 2).map(|v| [v[0], v[1]])
    }

    fn point_req(&self, k: &str) -> Option<Point> {
        if self.table.contains_key(k) {
            self.point_opt(k)
        } else {
            self.raw(k);
            self.missing(k);
            None
        }
    }

    fn numbers_any(&self, k: &str) -> Option<Vec<f64>> {
        let v = self.raw(k)?;
        let arr = v.as_array().and_then(|a| {
            a.iter()
                .map(|x| match x {
                    toml::Value::Float(f) => Some(*f),
                    toml::Value::Integer(i) => Some(*i as f64),
                    _ => None,
                })
                .collect::<Option<Vec<f64>>>()
        });
        if arr.is_none() {
            self.wrong(k, "an array of numbers");
        }
        arr
    }

    fn table_opt(&self, k: &str) -> Option<Node<'a>> {
        match self.raw(k)? {
            toml::Value::Table(t) => Some(Node::new(&self.key(k), t, self.errs)),
            _ => {
                self.wrong(k, "a table");
                None
            }
        }
    }

    fn table_req(&self, k: &str) -> Option<Node<'a>> {
        if self.table.contains_key(k) {
            self.table_opt(k)
        } else {
            self.raw(k);
            self.missing(k);
            None
        }
    }

    fn tables(&self, k: &str) -> Vec<Node<'a>> {
        let Some(v) = self.raw(k) else { return Vec::new() };
        let Some(arr) = v.as_array() else {
            self.wrong(k, "an array of tables");
            return Vec::new();
        };
        arr.iter()
            .enumerate()
            .filter_map(|(i, x)| match x {
                toml::Value::Table(t) => Some(Node::new(&format!("{}[{i}]", self.key(k)), t, self.errs)),
                _ => {
                    self.errs.push(format!("'{}[{i}]' must be a table", self.key(k)));
                    None
                }
            })
            .collect()
    }

    /// Map of name → number.
    fn number_map(&self, k: &str) -> BTreeMap<String, f64> {
        let Some(t) = self.table_opt(k) else { return BTreeMap::new() };
        let mut out = BTreeMap::new();
        for (name, v) in t.table {
            t.used.borrow_mut().insert(name.clone());
            match v {
                toml::Value::Float(f) => {
                    out.insert(name.clone(), *f);
                }
                toml::Value::Integer(i) => {
                    out.insert(name.clone(), *i as f64);
                }
                _ => t.wrong(name, "a number"),
            }
        }
        out
    }
}

impl Drop for Node<'_> {
    fn drop(&mut self) {
        let used = self.used.borrow();
        for k in self.table.keys() {
            if !used.contains(k) {
                self.errs.push(format!("unknown key '{}'", self.key(k)));
            }
        }
    }
}

fn material(n: &Node) -> Option<Material> {
    let k = n.f64_req("k");
    let phi = n.f64_opt("phi").unwrap_or(1.0);
    Some(Material { k: k?, phi })
}

/// Parses and validates a configuration; relative paths are resolved against `base`.
/// All problems found are reported together.
pub fn parse_config(text: &str, base: &Path) -> Result<RunConfig> {
    let root: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(format!("malformed TOML: {e}")))?;
    let errs = Errors(RefCell::new(Vec::new()));
    let cfg = parse_root(&root, base, &errs);
    let mut list = errs.0.into_inner();
    match cfg {
        Some(c) if list.is_empty() => Ok(RunConfig { hash: config_hash(text), ..c }),
        _ => {
            if list.is_empty() {
                list.push("invalid configuration".into());
            }
            Err(Error::ConfigList(list))
        }
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text, path.parent().unwrap_or(Path::new(".")))
}

fn parse_root(root: &toml::Table, base: &Path, errs: &Errors) -> Option<RunConfig> {
    let top = Node::new("", root, errs);
    match top.raw("version") {
        Some(toml::Value::Integer(v)) if *v == SCHEMA_VERSION => {}
        Some(_) => errs.push(format!("unsupported schema version (expected {SCHEMA_VERSION})")),
        None => top.missing("version"),
    }
    let domain = top.table_req("domain").and_then(|d| parse_domain(&d, errs));
    let field = match (&domain, top.table_opt("materials")) {
        (Some(dom), m) => parse_field(dom, m.as_ref(), &top.tables("fractures"), errs),
        (None, _) => {
            top.tables("fractures");
            None
        }
    };
    let mesh = top.table_req("mesh").and_then(|m| parse_mesh(&m, base));
    let flow = top.table_opt("flow").map(|f| {
        let stabilize = f.bool_opt("stabilize").unwrap_or(true);
        FlowConfig::new(f.number_map("values"), stabilize)
    });
    let transport = top.table_opt("transport").and_then(|t| {
        if t.bool_opt("enabled") == Some(false) {
            for k in t.table.keys() {
                t.used.borrow_mut().insert(k.clone());
            }
            return None;
        }
        let dt = t.f64_req("dt");
        let t_fin = t.f64_req("t_fin");
        let c0 = t.f64_opt("c0").unwrap_or(0.0);
        let inflow = t.number_map("inflow");
        let limiter = match t.str_opt("limiter") {
            None => Some(Limiter::Zalesak),
            Some(s) => {
                let l = Limiter::parse(s);
                if l.is_none() {
                    errs.push(format!("transport.limiter must be one of zalesak, none, unity (got '{s}')"));
                }
                l
            }
        };
        let snapshots = t.numbers_any("snapshots").unwrap_or_default();
        Some(TransportConfig { dt: dt?, t_fin: t_fin?, c0, inflow, limiter: limiter?, snapshots })
    });
    let mut interfaces = Vec::new();
    let mut samples = Vec::new();
    let mut reference_fluxes = Vec::new();
    if let Some(pp) = top.table_opt("postprocess") {
        for it in pp.tables("interfaces") {
            let id = it.str_req("id");
            let kind = it.str_req("kind");
            match (id, kind) {
                (Some(id), Some("line")) => {
                    if let (Some(a), Some(b)) = (it.point_req("a"), it.point_req("b")) {
                        interfaces.push(Interface::line(id, a, b));
                    }
                }
                (Some(id), Some("fractures")) => interfaces.push(Interface::fractures(id)),
                (_, Some(k)) => errs.push(format!("{}: unknown interface kind '{k}' (line, fractures)", it.path)),
                _ => {}
            }
            if let (Some(id), Some(r)) = (id, it.str_opt("reference")) {
                reference_fluxes.push(ReferenceFlux { interface: id.to_string(), path: base.join(r) });
            }
        }
        for s in pp.tables("samples") {
            let id = s.str_req("id");
            let a = s.point_req("a");
            let b = s.point_req("b");
            let n = s.usize_opt("n").unwrap_or(201);
            if n < 2 {
                errs.push(format!("{}: n must be at least 2", s.path));
            }
            if let (Some(id), Some(a), Some(b)) = (id, a, b) {
                samples.push(SampleSpec { id: id.to_string(), a, b, n });
            }
        }
    }
    let output_dir = top
        .table_opt("output")
        .and_then(|o| o.str_opt("dir").map(|d| base.join(d)))
        .unwrap_or_else(|| base.join("out"));

    let (domain, field, mesh) = (domain?, field?, mesh?);
    let flow = flow.unwrap_or_else(|| FlowConfig::new(BTreeMap::new(), true));
    if let Err(e) = flow.validate(&domain) {
        push_error(errs, e);
    }
    if let Some(t) = &transport {
        if let Err(e) = t.validate(&domain) {
            push_error(errs, e);
        }
    }
    let mut ids = BTreeSet::new();
    for it in &interfaces {
        if !ids.insert(it.id.clone()) {
            errs.push(format!("duplicate interface id '{}'", it.id));
        }
        if let Err(e) = it.validate(&domain, &field) {
            push_error(errs, e);
        }
    }
    let bb = domain.bbox();
    let tol = 1e-9 * bb.diameter();
    for s in &samples {
        if !bb.contains(s.a, tol) || !bb.contains(s.b, tol) {
            errs.push(format!("sample line '{}' leaves the domain", s.id));
        }
    }
    if let MeshSpec::Resolved { .. } = mesh {
        if field.fractures().iter().any(|f| !axis_aligned(f)) {
            errs.push("resolved meshes need axis-aligned fractures".into());
        }
    }
    Some(RunConfig {
        domain,
        field,
        mesh,
        flow,
        transport,
        interfaces,
        samples,
        reference_fluxes,
        output_dir,
        hash: String::new(),
    })
}

fn push_error(errs: &Errors, e: Error) {
    match e {
        Error::ConfigList(v) => v.into_iter().for_each(|s| errs.push(s)),
        other => errs.push(other.to_string()),
    }
}

fn parse_domain(d: &Node, errs: &Errors) -> Option<BoxDomain> {
    let origin = d.point_opt("origin").unwrap_or([0.0, 0.0]);
    let size = d.point_req("size");
    let mut segs = Vec::new();
    for b in d.tables("boundary") {
        let name = b.str_req("name");
        let side = b.str_req("side").and_then(|s| {
            let r = Side::parse(s);
            if r.is_none() {
                errs.push(format!("{}: unknown side '{s}' (bottom, right, top, left)", b.path));
            }
            r
        });
        let range = b.point_req("range");
        let tag = b.str_req("type").and_then(|t| match t {
            "dirichlet" => Some(BoundaryTag::Dirichlet),
            "neumann" => Some(BoundaryTag::Neumann),
            _ => {
                errs.push(format!("{}: type must be dirichlet or neumann (got '{t}')", b.path));
                None
            }
        });
        if let (Some(name), Some(side), Some(range), Some(tag)) = (name, side, range, tag) {
            segs.push(BoundarySegment { name: name.to_string(), side, range, tag });
        }
    }
    let size = size?;
    match BoxDomain::with_neumann_fill(origin, size, segs) {
        Ok(dom) => Some(dom),
        Err(e) => {
            push_error(errs, e);
            None
        }
    }
}

fn parse_field(domain: &BoxDomain, m: Option<&Node>, fr: &[Node], errs: &Errors) -> Option<MaterialField> {
    let Some(m) = m else {
        errs.push("missing required key 'materials'".into());
        return None;
    };
    let matrix = m.table_req("matrix").and_then(|t| material(&t));
    let fracture = m.table_opt("fracture").and_then(|t| material(&t));
    let mut regions = Vec::new();
    if let Some(mm) = matrix {
        regions.push(MatrixRegion { bbox: domain.bbox(), material: mm });
    }
    for r in m.tables("regions") {
        let lo = r.point_req("lo");
        let hi = r.point_req("hi");
        let mat = material(&r);
        if let (Some(lo), Some(hi), Some(mat)) = (lo, hi, mat) {
            regions.push(MatrixRegion { bbox: Aabb::new(lo, hi), material: mat });
        }
    }
    let mut fractures = Vec::new();
    for f in fr {
        let aperture = f.f64_req("aperture");
        let parsed = if f.table.contains_key("a") || f.table.contains_key("b") {
            match (f.point_req("a"), f.point_req("b"), aperture) {
                (Some(a), Some(b), Some(ap)) => Some(Fracture::from_endpoints(a, b, ap)),
                _ => None,
            }
        } else {
            let c = f.point_req("center");
            let l = f.f64_req("length");
            let ang = f.f64_opt("angle_deg").unwrap_or(0.0);
            match (c, l, aperture) {
                (Some(c), Some(l), Some(ap)) => Some(Fracture::new(c, 0.5 * l, 0.5 * ap, ang.to_radians())),
                _ => None,
            }
        };
        match parsed {
            Some(Ok(x)) => fractures.push(x),
            Some(Err(e)) => push_error(errs, e),
            None => {}
        }
    }
    if !fractures.is_empty() && fracture.is_none() && !m.table.contains_key("fracture") {
        errs.push("missing required key 'materials.fracture' (fractures are present)".into());
    }
    let fmat = fracture.unwrap_or(Material { k: 1.0, phi: 1.0 });
    matrix?;
    match MaterialField::new(domain, regions, fmat, fractures) {
        Ok(f) => Some(f),
        Err(e) => {
            push_error(errs, e);
            None
        }
    }
}

fn parse_mesh(m: &Node, base: &Path) -> Option<MeshSpec> {
    let be = m.raw("be").and_then(|v| {
        let arr = v.as_array().filter(|a| a.len() == 2).and_then(|a| {
            let x: Vec<usize> = a.iter().filter_map(|x| x.as_integer()).filter(|&i| i > 0).map(|i| i as usize).collect();
            (x.len() == 2).then(|| [x[0], x[1]])
        });
        if arr.is_none() {
            m.wrong("be", "an array of two positive integers");
        }
        arr
    });
    if let Some(imp) = m.table_opt("import") {
        let nodes = imp.str_req("nodes");
        let cells = imp.str_req("cells");
        return Some(MeshSpec::Import { nodes: base.join(nodes?), cells: base.join(cells?) });
    }
    if let Some(fe) = m.usize_opt("resolved_fe") {
        if fe == 0 {
            m.wrong("resolved_fe", "a positive integer");
            return None;
        }
        if m.table.contains_key("amr_steps") {
            m.errs.push("mesh: amr_steps and resolved_fe are mutually exclusive".into());
        }
        let be = be.or_else(|| {
            m.missing("be");
            None
        })?;
        return Some(MeshSpec::Resolved { be, fe });
    }
    let amr_steps = m.usize_opt("amr_steps").unwrap_or(0);
    let be = be.or_else(|| {
        if !m.table.contains_key("be") {
            m.missing("be");
        }
        None
    })?;
    Some(MeshSpec::Amr { be, amr_steps })
}

fn axis_aligned(f: &Fracture) -> bool {
    let s = f.angle.sin().abs();
    let c = f.angle.cos().abs();
    s < 1e-12 || c < 1e-12
}

// ===========================================================================
// Mesh construction
// ===========================================================================

/// Breakpoints of one axis for a fitted tensor mesh: a uniform grid of `be` intervals, the
/// strip edges, and `fe` equal intervals inside each strip. Grid points falling strictly inside
/// a strip are dropped.
pub fn resolved_axis(lo: f64, hi: f64, be: usize, strips: &[(f64, f64)], fe: usize) -> Vec<f64> {
    let len = hi - lo;
    let tol = 1e-12 * len.abs().max(1.0);
    let inside = |x: f64| strips.iter().any(|&(a, b)| x > a + tol && x < b - tol);
    let mut pts: Vec<f64> = (0..=be).map(|i| lo + len * i as f64 / be as f64).filter(|&x| !inside(x)).collect();
    for &(a, b) in strips {
        let (a, b) = (a.max(lo), b.min(hi));
        if b <= a {
            continue;
        }
        for k in 0..=fe {
            pts.push(a + (b - a) * k as f64 / fe as f64);
        }
    }
    pts.sort_by(f64::total_cmp);
    pts.dedup_by(|x, y| (*x - *y).abs() <= tol);
    pts
}

pub fn build_mesh(cfg: &RunConfig) -> Result<QuadMesh> {
    match &cfg.mesh {
        MeshSpec::Amr { be, amr_steps } => {
            let m = QuadMesh::build_uniform(&cfg.domain, be[0], be[1])?;
            if *amr_steps == 0 || cfg.field.fractures().is_empty() {
                Ok(m)
            } else {
                m.amr_against_fractures(&cfg.field, *amr_steps)
            }
        }
        MeshSpec::Resolved { be, fe } => {
            let bb = cfg.domain.bbox();
            let (mut sx, mut sy) = (Vec::new(), Vec::new());
            for f in cfg.field.fractures() {
                if !axis_aligned(f) {
                    return Err(Error::Config("resolved meshes need axis-aligned fractures".into()));
                }
                let b = f.bbox();
                // a strip across x (vertical fracture) or across y (horizontal fracture)
                if b.hi[0] - b.lo[0] < b.hi[1] - b.lo[1] {
                    sx.push((b.lo[0], b.hi[0]));
                } else {
                    sy.push((b.lo[1], b.hi[1]));
                }
            }
            let xs = resolved_axis(bb.lo[0], bb.hi[0], be[0], &sx, *fe);
            let ys = resolved_axis(bb.lo[1], bb.hi[1], be[1], &sy, *fe);
            QuadMesh::build_tensor(&xs, &ys)
        }
        MeshSpec::Import { nodes, cells } => {
            let nodes = read_nodes_csv(nodes)?;
            let cells = read_cells_csv(cells)?;
            QuadMesh::from_nodes_cells(nodes, cells)
        }
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))
}

/// Node table with header `x,y`.
pub fn read_nodes_csv(path: &Path) -> Result<Vec<Point>> {
    let mut r = csv_reader(path)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let x: Option<Vec<f64>> = rec.iter().take(2).map(|s| s.parse().ok()).collect();
        match x {
            Some(v) if v.len() == 2 => out.push([v[0], v[1]]),
            _ => return Err(Error::Config(format!("{}: bad node row {}", path.display(), i + 1))),
        }
    }
    Ok(out)
}

/// Connectivity table with header `n0,n1,n2,n3` (counterclockwise, zero based).
pub fn read_cells_csv(path: &Path) -> Result<Vec<[usize; 4]>> {
    let mut r = csv_reader(path)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let x: Option<Vec<usize>> = rec.iter().take(4).map(|s| s.parse().ok()).collect();
        match x {
            Some(v) if v.len() == 4 => out.push([v[0], v[1], v[2], v[3]]),
            _ => return Err(Error::Config(format!("{}: bad cell row {}", path.display(), i + 1))),
        }
    }
    Ok(out)
}

// ===========================================================================
// Emitters
// ===========================================================================

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Clone, Debug)]
pub enum VtkField<'a> {
    Point(&'a str, &'a [f64]),
    Cell(&'a str, &'a [f64]),
}

/// Legacy ASCII VTK unstructured grid of quads.
pub fn vtk_string(mesh: &QuadMesh, fields: &[VtkField], hash: &str) -> Result<String> {
    let (n, nc) = (mesh.num_nodes(), mesh.num_cells());
    let mut s = String::new();
    let _ = writeln!(s, "# vtk DataFile Version 3.0");
    let _ = writeln!(s, "fracfem config_sha256={hash}");
    let _ = writeln!(s, "ASCII\nDATASET UNSTRUCTURED_GRID");
    let _ = writeln!(s, "POINTS {n} double");
    for p in mesh.nodes() {
        let _ = writeln!(s, "{} {} 0", fmt_f64(p[0]), fmt_f64(p[1]));
    }
    let _ = writeln!(s, "CELLS {nc} {}", 5 * nc);
    for c in mesh.cells() {
        let _ = writeln!(s, "4 {} {} {} {}", c[0], c[1], c[2], c[3]);
    }
    let _ = writeln!(s, "CELL_TYPES {nc}");
    for _ in 0..nc {
        let _ = writeln!(s, "9");
    }
    let point: Vec<_> = fields.iter().filter_map(|f| if let VtkField::Point(a, b) = f { Some((*a, *b)) } else { None }).collect();
    let cell: Vec<_> = fields.iter().filter_map(|f| if let VtkField::Cell(a, b) = f { Some((*a, *b)) } else { None }).collect();
    for (sec, list, len) in [("POINT_DATA", &point, n), ("CELL_DATA", &cell, nc)] {
        if list.is_empty() {
            continue;
        }
        let _ = writeln!(s, "{sec} {len}");
        for (name, v) in list.iter() {
            if v.len() != len {
                return Err(Error::Dimension { expected: len, got: v.len() });
            }
            let _ = writeln!(s, "SCALARS {name} double 1\nLOOKUP_TABLE default");
            for x in v.iter() {
                let _ = writeln!(s, "{}", fmt_f64(*x));
            }
        }
    }
    Ok(s)
}

pub fn write_vtk(path: &Path, mesh: &QuadMesh, fields: &[VtkField], hash: &str) -> Result<()> {
    fs::write(path, vtk_string(mesh, fields, hash)?)?;
    Ok(())
}

/// Contents of a legacy VTK file written by [`vtk_string`].
#[derive(Clone, Debug, Default)]
pub struct VtkData {
    pub title: String,
    pub points: Vec<Point>,
    pub cells: Vec<[usize; 4]>,
    pub point_data: BTreeMap<String, Vec<f64>>,
    pub cell_data: BTreeMap<String, Vec<f64>>,
}

pub fn read_vtk(text: &str) -> Result<VtkData> {
    let bad = |m: &str| Error::Config(format!("VTK parse error: {m}"));
    let mut lines = text.lines();
    let mut out = VtkData::default();
    lines.next().filter(|l| l.starts_with("# vtk")).ok_or_else(|| bad("missing header"))?;
    out.title = lines.next().unwrap_or_default().to_string();
    let mut toks = lines.flat_map(|l| l.split_whitespace());
    let mut next = || toks.next().ok_or_else(|| bad("unexpected end of file"));
    let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad number '{s}'")));
    let int = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad integer '{s}'")));
    let mut section: Option<(bool, usize)> = None;
    while let Ok(t) = next() {
        match t {
            "ASCII" | "DATASET" | "UNSTRUCTURED_GRID" => {}
            "POINTS" => {
                let n = int(next()?)?;
                next()?;
                for _ in 0..n {
                    let x = num(next()?)?;
                    let y = num(next()?)?;
                    next()?;
                    out.points.push([x, y]);
                }
            }
            "CELLS" => {
                let n = int(next()?)?;
                next()?;
                for _ in 0..n {
                    if int(next()?)? != 4 {
                        return Err(bad("only quadrilateral cells are supported"));
                    }
                    let c = [int(next()?)?, int(next()?)?, int(next()?)?, int(next()?)?];
                    out.cells.push(c);
                }
            }
            "CELL_TYPES" => {
                let n = int(next()?)?;
                for _ in 0..n {
                    if next()? != "9" {
                        return Err(bad("cell type must be 9"));
                    }
                }
            }
            "POINT_DATA" => section = Some((true, int(next()?)?)),
            "CELL_DATA" => section = Some((false, int(next()?)?)),
            "SCALARS" => {
                let name = next()?.to_string();
                next()?;
                if next()? != "1" {
                    return Err(bad("only single-component scalars are supported"));
                }
                if next()? != "LOOKUP_TABLE" {
                    return Err(bad("expected LOOKUP_TABLE"));
                }
                next()?;
                let (is_point, n) = section.ok_or_else(|| bad("SCALARS outside a data section"))?;
                let v = (0..n).map(|_| next().and_then(num)).collect::<Result<Vec<f64>>>()?;
                if is_point {
                    out.point_data.insert(name, v);
                } else {
                    out.cell_data.insert(name, v);
                }
            }
            other => return Err(bad(&format!("unexpected token '{other}'"))),
        }
    }
    Ok(out)
}

/// Values of an FE field along a segment.
#[derive(Clone, Debug, PartialEq)]
pub struct LineSample {
    pub a: Point,
    pub b: Point,
    pub s: Vec<f64>,
    pub points: Vec<Point>,
    pub values: Vec<f64>,
}

/// Evaluates the conforming function with all-node coefficients `all` at `n` equispaced points.
pub fn sample_line(mesh: &QuadMesh, space: &FeSpace, all: &[f64], a: Point, b: Point, n: usize) -> Result<LineSample> {
    if n < 2 {
        return Err(Error::Config("a line sample needs at least 2 points".into()));
    }
    let len = (b[0] - a[0]).hypot(b[1] - a[1]);
    let mut out = LineSample { a, b, s: Vec::with_capacity(n), points: Vec::with_capacity(n), values: Vec::with_capacity(n) };
    for k in 0..n {
        let t = k as f64 / (n - 1) as f64;
        let p = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
        let v = space.evaluate(mesh, all, p).ok_or(Error::OutOfDomain { x: p[0], y: p[1] })?;
        out.s.push(t * len);
        out.points.push(p);
        out.values.push(v);
    }
    Ok(out)
}

fn csv_header(hash: &str) -> String {
    format!("# fracfem config_sha256={hash}\n")
}

pub fn write_csv(path: &Path, hash: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut buf = csv_header(hash).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Reads a two-column `(s, q)` reference flux profile.
pub fn read_profile_csv(path: &Path) -> Result<FluxProfile> {
    let mut r = csv_reader(path)?;
    let (mut s, mut q) = (Vec::new(), Vec::new());
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let v: Option<Vec<f64>> = rec.iter().take(2).map(|x| x.parse().ok()).collect();
        match v {
            Some(v) if v.len() == 2 => {
                s.push(v[0]);
                q.push(v[1]);
            }
            _ => return Err(Error::Config(format!("{}: bad profile row {}", path.display(), i + 1))),
        }
    }
    if s.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(format!("{}: arc length must increase strictly", path.display())));
    }
    Ok(FluxProfile { s, q })
}

// ===========================================================================
// Orchestration
// ===========================================================================

/// Everything a run computed.
pub struct RunState {
    pub mesh: QuadMesh,
    pub space: FeSpace,
    pub flow: Option<FlowSolution>,
    pub dirichlet: Option<FluxResult>,
    pub fluxes: Vec<FluxResult>,
    pub transport: Option<TransportRun>,
    pub files: Vec<PathBuf>,
}

pub fn mesh_only(cfg: &RunConfig) -> Result<RunState> {
    let mesh = build_mesh(cfg)?;
    let space = FeSpace::build(&mesh)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join("mesh.vtk");
    write_mesh_vtk(&path, &mesh, &cfg.field, &cfg.hash)?;
    Ok(RunState { mesh, space, flow: None, dirichlet: None, fluxes: Vec::new(), transport: None, files: vec![path] })
}

fn write_mesh_vtk(path: &Path, mesh: &QuadMesh, field: &MaterialField, hash: &str) -> Result<()> {
    let level: Vec<f64> = (0..mesh.num_cells()).map(|c| mesh.cell_level(c) as f64).collect();
    let kc: Vec<f64> = (0..mesh.num_cells()).map(|c| field.material_unchecked(mesh.cell_bbox(c).center()).k).collect();
    let hanging: Vec<f64> = (0..mesh.num_nodes()).map(|n| mesh.is_hanging(n) as u8 as f64).collect();
    write_vtk(
        path,
        mesh,
        &[VtkField::Point("hanging", &hanging), VtkField::Cell("level", &level), VtkField::Cell("k_center", &kc)],
        hash,
    )
}

/// Flux of both sides of one interface.
pub fn interface_pair(
    cfg: &RunConfig,
    mesh: &QuadMesh,
    space: &FeSpace,
    sol: &FlowSolution,
    df: &crate::flow::DirichletFlux,
    iface: &Interface,
) -> Result<[FluxResult; 2]> {
    let f = |side| interface_flux(mesh, space, &cfg.field, &cfg.domain, &cfg.flow, sol, df, iface, side);
    Ok([f(FluxSide::Omega1)?, f(FluxSide::Omega2)?])
}

/// Runs mesh, flow, flux post-processing and (when configured) transport, writing all outputs.
/// `only_interface` restricts flux post-processing to one interface and skips transport.
pub fn run(cfg: &RunConfig, only_interface: Option<&str>) -> Result<RunState> {
    let mesh = build_mesh(cfg)?;
    let space = FeSpace::build(&mesh)?;
    let audit = mesh.audit();
    if !audit.passes() {
        return Err(Error::Invariant(format!("mesh audit failed: {audit:?}")));
    }
    log::info!("mesh: {} cells, {} nodes, {} hanging", mesh.num_cells(), mesh.num_nodes(), mesh.num_hanging());
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    let mut files = Vec::new();
    let hash = &cfg.hash;

    let mesh_path = out.join("mesh.vtk");
    write_mesh_vtk(&mesh_path, &mesh, &cfg.field, hash)?;
    files.push(mesh_path);

    let sol = solve_flow(&FlowProblem { mesh: &mesh, space: &space, field: &cfg.field, domain: &cfg.domain, cfg: &cfg.flow })?;
    let (pmin, pmax) = sol.min_max();
    log::info!("flow: p in [{pmin:e}, {pmax:e}]");
    let stab: Vec<f64> = sol.stabilized.iter().map(|&b| b as u8 as f64).collect();
    let p_path = out.join("pressure.vtk");
    write_vtk(&p_path, &mesh, &[VtkField::Point("pressure", &sol.all), VtkField::Cell("stabilized", &stab)], hash)?;
    files.push(p_path);

    let df = dirichlet_boundary_flux(&mesh, &space, &sol)?;
    let selected: Vec<&Interface> = match only_interface {
        None => cfg.interfaces.iter().collect(),
        Some(id) => {
            let it = cfg
                .interfaces
                .iter()
                .find(|i| i.id == id)
                .ok_or_else(|| Error::Config(format!("no interface with id '{id}'")))?;
            vec![it]
        }
    };
    let mut fluxes = Vec::new();
    let mut report = vec![vec![
        "dirichlet".to_string(),
        "dirichlet".to_string(),
        fmt_f64(df.result.total),
        fmt_f64(0.0),
        fmt_f64(df.result.balance_residual),
        "0".into(),
        fmt_f64(0.0),
    ]];
    let mut errors = Vec::new();
    for iface in &selected {
        let pair = interface_pair(cfg, &mesh, &space, &sol, &df, iface)?;
        for r in &pair {
            report.push(vec![
                r.id.clone(),
                r.side.name().into(),
                fmt_f64(r.total),
                fmt_f64(r.dirichlet_share),
                fmt_f64(r.balance_residual),
                r.dropped.to_string(),
                fmt_f64(r.representation_residual),
            ]);
            let dens_path = out.join(format!("flux_{}_{}.csv", sanitize(&r.id), r.side.name()));
            let rows: Vec<Vec<String>> = match &iface.kind {
                InterfaceKind::Line { a, b } => {
                    let n = (mesh.num_cells() as f64).sqrt().ceil() as usize * 8 + 1;
                    let prof = flux_profile(&mesh, &space, r, *a, *b, n.max(1001));
                    prof.s.iter().zip(&prof.q).map(|(s, q)| vec![fmt_f64(*s), fmt_f64(*q)]).collect()
                }
                InterfaceKind::Fractures => r
                    .nodes
                    .iter()
                    .zip(&r.coefficients)
                    .map(|(&k, &q)| {
                        let p = mesh.node(space.regular_nodes()[k]);
                        vec![fmt_f64(p[0]), fmt_f64(p[1]), fmt_f64(q)]
                    })
                    .collect(),
            };
            let header: &[&str] = if matches!(iface.kind, InterfaceKind::Line { .. }) { &["s", "q"] } else { &["x", "y", "q"] };
            write_csv(&dens_path, hash, header, &rows)?;
            files.push(dens_path);
            if let (Some(rf), InterfaceKind::Line { a, b }) =
                (cfg.reference_fluxes.iter().find(|rf| rf.interface == r.id), &iface.kind)
            {
                let reference = read_profile_csv(&rf.path)?;
                let len = (b[0] - a[0]).hypot(b[1] - a[1]);
                let prof = flux_profile(&mesh, &space, r, *a, *b, 4001);
                errors.push(vec![r.id.clone(), r.side.name().into(), fmt_f64(flux_error(&prof, &reference, len, 4000))]);
            }
        }
        fluxes.extend(pair);
    }
    let rep_path = out.join("flux_report.csv");
    write_csv(&rep_path, hash, &["interface", "side", "Q", "dirichlet_share", "balance_residual", "dropped", "representation_residual"], &report)?;
    files.push(rep_path);
    if !errors.is_empty() {
        let p = out.join("flux_error.csv");
        write_csv(&p, hash, &["interface", "side", "e_q"], &errors)?;
        files.push(p);
    }

    let mut transport = None;
    let mut conc_all: Option<Vec<f64>> = None;
    if let (Some(tc), None) = (&cfg.transport, only_interface) {
        let inflow = InflowData::from_segments(&mesh, &space, &cfg.domain, &tc.inflow);
        let ops = TransportOperators::from_flow(&mesh, &space, &cfg.field, &cfg.domain, &cfg.flow, &sol, tc.dt, inflow)?;
        let r = run_transport(&ops, tc)?;
        for (t, c) in &r.snapshots {
            let all = space.prolong(c);
            let p = out.join(format!("conc_{}.vtk", fmt_time(*t)));
            write_vtk(&p, &mesh, &[VtkField::Point("concentration", &all)], hash)?;
            files.push(p);
        }
        let rows: Vec<Vec<String>> = r
            .monitor
            .iter()
            .map(|m| vec![m.step.to_string(), fmt_f64(m.t), fmt_f64(m.min), fmt_f64(m.max), fmt_f64(m.mass)])
            .collect();
        let p = out.join("dmp_monitor.csv");
        write_csv(&p, hash, &["step", "t", "min_c", "max_c", "lumped_mass"], &rows)?;
        files.push(p);
        conc_all = Some(space.prolong(&r.final_c));
        transport = Some(r);
    }

    if !cfg.samples.is_empty() && only_interface.is_none() {
        let dir = out.join("samples");
        fs::create_dir_all(&dir)?;
        for s in &cfg.samples {
            let ls = sample_line(&mesh, &space, &sol.all, s.a, s.b, s.n)?;
            let conc = conc_all.as_ref().map(|c| sample_line(&mesh, &space, c, s.a, s.b, s.n)).transpose()?;
            let rows: Vec<Vec<String>> = (0..ls.s.len())
                .map(|k| {
                    let mut r = vec![fmt_f64(ls.s[k]), fmt_f64(ls.points[k][0]), fmt_f64(ls.points[k][1]), fmt_f64(ls.values[k])];
                    if let Some(c) = &conc {
                        r.push(fmt_f64(c.values[k]));
                    }
                    r
                })
                .collect();
            let header: &[&str] = if conc.is_some() { &["s", "x", "y", "pressure", "concentration"] } else { &["s", "x", "y", "pressure"] };
            let p = dir.join(format!("{}.csv", sanitize(&s.id)));
            write_csv(&p, hash, header, &rows)?;
            files.push(p);
        }
    }
    Ok(RunState { mesh, space, flow: Some(sol), dirichlet: Some(df.result), fluxes, transport, files })
}

/// File-name-safe version of an identifier.
pub fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else if c == '\'' { 'p' } else { '_' })
        .collect()
}

fn fmt_time(t: f64) -> String {
    let s = format!("{t}");
    s.replace('.', "p")
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fracfem::cli_io::{config_hash, load_config, read_vtk};
use tempfile::TempDir;

const FLOW_ONLY: &str = r#"version = 1

[domain]
origin = [0.0, 0.0]
size = [1.0, 1.0]
boundary = [
  { name = "inflow", side = "left", range = [0.0, 1.0], type = "neumann" },
  { name = "outflow", side = "right", range = [0.0, 1.0], type = "dirichlet" },
]

[materials]
matrix = { k = 1.0, phi = 1.0 }
fracture = { k = 1e4, phi = 1.0 }

[[fractures]]
a = [0.0, 0.5]
b = [1.0, 0.5]
aperture = 1e-3

[[fractures]]
a = [0.3, 0.1]
b = [0.8, 0.9]
aperture = 2e-3

[mesh]
be = [8, 8]
amr_steps = 3

[flow]
stabilize = true
values = { inflow = -1.0, outflow = 1.0 }

[[postprocess.interfaces]]
id = "BB'"
kind = "line"
a = [1.0, 0.7]
b = [0.0, 0.7]

[[postprocess.interfaces]]
id = "Gamma"
kind = "fractures"

[[postprocess.samples]]
id = "AA'"
a = [0.5, 0.0]
b = [0.5, 1.0]
n = 21

[output]
dir = "out"
"#;

const TRANSPORT: &str = r#"
[transport]
dt = 0.05
t_fin = 0.2
c0 = 0.0
limiter = "zalesak"
snapshots = [0.1, 0.2]
inflow = { inflow = 1.0 }
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fracfem"));
    c.env_remove("FRACFEM_THREADS");
    c
}

fn write_config(dir: &TempDir, text: &str) -> PathBuf {
    let p = dir.path().join("case.cfg");
    fs::write(&p, text).unwrap();
    p
}

fn fracfem(args: &[&str], cfg: &Path) -> Output {
    bin().args(args).arg(cfg).output().unwrap()
}

fn listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    names
}

#[test]
fn validate_accepts_bundled_configs() {
    for name in ["regular.cfg", "single.cfg"] {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
        let out = fracfem(&["validate"], &path);
        assert_eq!(out.status.code(), Some(0), "{name}: {}", String::from_utf8_lossy(&out.stderr));
        let hash = config_hash(&fs::read_to_string(&path).unwrap());
        assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), format!("ok {hash}"));
    }
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = TempDir::new().unwrap();
    let cases = [
        FLOW_ONLY.replace("version = 1", "version = 7"),
        FLOW_ONLY.replace("be = [8, 8]", "be = [8, 8]\nbogus_key = 1"),
        FLOW_ONLY.replace("values = { inflow = -1.0, outflow = 1.0 }", "values = { inflow = -1.0 }"),
        FLOW_ONLY.replace("aperture = 1e-3", "aperture = -1e-3"),
        "this is = = not toml".to_string(),
    ];
    for text in &cases {
        let cfg = write_config(&dir, text);
        for sub in ["validate", "run", "mesh"] {
            let out = fracfem(&[sub], &cfg);
            assert_eq!(out.status.code(), Some(2), "{sub}: {}", String::from_utf8_lossy(&out.stderr));
            assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
        }
    }
    let out = fracfem(&["validate"], &dir.path().join("missing.cfg"));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_interface_exits_with_code_2() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, FLOW_ONLY);
    let out = bin().args(["flux"]).arg(&cfg).args(["--interface", "ZZ'"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ZZ'"));
}

#[test]
fn solver_failure_exits_with_code_3() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, &FLOW_ONLY.replace("matrix = { k = 1.0, phi = 1.0 }", "matrix = { k = 1e308, phi = 1.0 }"));
    let out = fracfem(&["run"], &cfg);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn invalid_thread_count_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, FLOW_ONLY);
    let out = bin().env("FRACFEM_THREADS", "zero").arg("validate").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flux_subcommand_reports_both_sides() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, FLOW_ONLY);
    let out = bin().args(["flux"]).arg(&cfg).args(["--interface", "BB'"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let q: Vec<f64> = text
        .lines()
        .map(|l| l.split_whitespace().find_map(|w| w.strip_prefix("Q=")).unwrap().parse().unwrap())
        .collect();
    assert_eq!(q.len(), 2);
    assert!((q[0] + q[1]).abs() <= 1e-10 * q[0].abs());
    assert!(!dir.path().join("out/dmp_monitor.csv").exists());
}

#[test]
fn mesh_subcommand_writes_only_the_mesh() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, &format!("{FLOW_ONLY}{TRANSPORT}"));
    let out = fracfem(&["mesh"], &cfg);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(listing(&dir.path().join("out")), vec!["mesh.vtk"]);
}

#[test]
fn flow_only_run_writes_no_transport_artifacts() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, FLOW_ONLY);
    let out = fracfem(&["run"], &cfg);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let names = listing(&dir.path().join("out"));
    assert!(names.iter().all(|n| !n.starts_with("conc_") && n != "dmp_monitor.csv"), "{names:?}");
    for n in ["mesh.vtk", "pressure.vtk", "flux_report.csv", "flux_BBp_omega1.csv", "flux_Gamma_omega2.csv", "samples"] {
        assert!(names.iter().any(|m| m == n), "missing {n}");
    }
    let sample = fs::read_to_string(dir.path().join("out/samples/AAp.csv")).unwrap();
    assert_eq!(sample.lines().nth(1), Some("s,x,y,pressure"));
}

#[test]
fn transport_run_writes_snapshots_and_monitor() {
    let dir = TempDir::new().unwrap();
    let text = format!("{FLOW_ONLY}{TRANSPORT}");
    let cfg = write_config(&dir, &text);
    let out = fracfem(&["run"], &cfg);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let names = listing(&dir.path().join("out"));
    assert!(names.contains(&"conc_0p1.vtk".to_string()) && names.contains(&"conc_0p2.vtk".to_string()), "{names:?}");
    let monitor = fs::read_to_string(dir.path().join("out/dmp_monitor.csv")).unwrap();
    let mut lines = monitor.lines();
    assert_eq!(lines.next().unwrap(), format!("# fracfem config_sha256={}", config_hash(&text)));
    assert_eq!(lines.next().unwrap(), "step,t,min_c,max_c,lumped_mass");
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 5);
    for r in &rows {
        assert!(r[2] >= -1e-12 && r[3] <= 1.0 + 1e-12, "{r:?}");
    }
    let sample = fs::read_to_string(dir.path().join("out/samples/AAp.csv")).unwrap();
    assert_eq!(sample.lines().nth(1), Some("s,x,y,pressure,concentration"));
}

#[test]
fn every_csv_carries_the_config_hash() {
    let dir = TempDir::new().unwrap();
    let text = format!("{FLOW_ONLY}{TRANSPORT}");
    let cfg = write_config(&dir, &text);
    assert_eq!(fracfem(&["run"], &cfg).status.code(), Some(0));
    let expected = format!("# fracfem config_sha256={}", config_hash(&text));
    let mut stack = vec![dir.path().join("out")];
    let mut seen = 0;
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                let first = fs::read_to_string(&p).unwrap().lines().next().unwrap().to_string();
                assert_eq!(first, expected, "{}", p.display());
                seen += 1;
            } else if p.extension().is_some_and(|x| x == "vtk") {
                assert!(fs::read_to_string(&p).unwrap().lines().nth(1).unwrap().contains(&config_hash(&text)));
            }
        }
    }
    assert!(seen >= 6);
}

#[test]
fn runs_are_byte_identical_across_directories_and_thread_counts() {
    let text = format!("{FLOW_ONLY}{TRANSPORT}");
    let mut outputs = Vec::new();
    for threads in ["1", "4"] {
        let dir = TempDir::new().unwrap();
        let cfg = write_config(&dir, &text);
        let out = bin().env("FRACFEM_THREADS", threads).arg("run").arg(&cfg).output().unwrap();
        assert_eq!(out.status.code(), Some(0));
        let mut files = Vec::new();
        let mut stack = vec![dir.path().join("out")];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(dir.path()).unwrap().to_path_buf();
                    files.push((rel, fs::read(&p).unwrap()));
                }
            }
        }
        files.sort();
        outputs.push(files);
    }
    assert_eq!(outputs[0].len(), outputs[1].len());
    for (a, b) in outputs[0].iter().zip(&outputs[1]) {
        assert_eq!(a.0, b.0);
        assert!(a.1 == b.1, "{} differs", a.0.display());
    }
}

#[test]
fn pressure_vtk_round_trips() {
    let dir = TempDir::new().unwrap();
    let cfg_path = write_config(&dir, FLOW_ONLY);
    assert_eq!(fracfem(&["run"], &cfg_path).status.code(), Some(0));
    let cfg = load_config(&cfg_path).unwrap();
    let st = fracfem::cli_io::run(&cfg, Some("BB'")).unwrap();
    let data = read_vtk(&fs::read_to_string(dir.path().join("out/pressure.vtk")).unwrap()).unwrap();
    assert_eq!(data.points.len(), st.mesh.num_nodes());
    assert_eq!(data.cells, st.mesh.cells());
    for (p, q) in data.points.iter().zip(st.mesh.nodes()) {
        assert_eq!(p, q);
    }
    let flow = st.flow.unwrap();
    let p = &data.point_data["pressure"];
    for (a, b) in p.iter().zip(&flow.all) {
        assert_eq!(a, b);
    }
    let stab = &data.cell_data["stabilized"];
    assert_eq!(stab.len(), st.mesh.num_cells());
    assert!(stab.iter().zip(&flow.stabilized).all(|(&s, &b)| s == b as u8 as f64));
}

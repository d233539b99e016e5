//! Browser bindings: run a configuration and return node fields for drawing,
//! run a small convergence study, and inspect the side-condition matrix of a
//! user-defined scheme. Every entry point takes and returns JSON text.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use mrcouple::config::{
    parse_config, prepare, run_convergence, summarize, ReferenceChoice, RunSummary, TargetChoice,
};
use mrcouple::coupling::{run_simulation, Trajectory};
use mrcouple::mesh::Mesh;
use mrcouple::timepoly::{build_dtilde, SchemeSpec};

#[derive(Serialize)]
struct MeshView {
    nodes: Vec<[f64; 2]>,
    elements: Vec<[usize; 4]>,
}

#[derive(Serialize)]
struct WindowRow {
    t: f64,
    energy: [f64; 2],
    conservation: Option<f64>,
    interfacial: Option<f64>,
}

#[derive(Serialize)]
struct Simulation {
    summary: RunSummary,
    meshes: Vec<MeshView>,
    /// `frames[k][i][node]`: subdomain `i` at synchronization time `k`
    /// (zero on the exterior boundary).
    frames: Vec<[Vec<f64>; 2]>,
    windows: Vec<WindowRow>,
}

fn node_values(mesh: &Mesh, dofs: &nalgebra::DVector<f64>) -> Vec<f64> {
    (0..mesh.nodes().len())
        .map(|n| mesh.dof(n).map_or(0.0, |d| dofs[d]))
        .collect()
}

fn windows(traj: &Trajectory) -> Vec<WindowRow> {
    (0..=traj.windows.len())
        .map(|k| WindowRow {
            t: traj.config.sync_time(k),
            energy: traj.energies[k],
            conservation: k.checked_sub(1).and_then(|w| traj.conservation[w]),
            interfacial: k.checked_sub(1).and_then(|w| traj.interfacial[w]),
        })
        .collect()
}

pub fn simulate_json(config: &str) -> Result<String, String> {
    let cfg = parse_config(config).map_err(|e| e.to_string())?;
    let prepared = prepare(&cfg).map_err(|e| e.to_string())?;
    let traj = run_simulation(
        &prepared.problem,
        &prepared.spec,
        &prepared.window,
        &prepared.options,
        None,
    )
    .map_err(|e| e.to_string())?;
    let geometry = prepared.problem.ops.geometry().ok_or("operators carry no mesh")?;
    let meshes = &geometry.meshes;
    let mut frames = vec![[
        node_values(&meshes[0], &prepared.problem.initial[0]),
        node_values(&meshes[1], &prepared.problem.initial[1]),
    ]];
    for w in &traj.windows {
        frames.push([
            node_values(&meshes[0], w.final_state(0)),
            node_values(&meshes[1], w.final_state(1)),
        ]);
    }
    let out = Simulation {
        summary: summarize(&prepared, &traj),
        meshes: meshes
            .iter()
            .map(|m| MeshView {
                nodes: m.nodes().to_vec(),
                elements: m.elements().to_vec(),
            })
            .collect(),
        frames,
        windows: windows(&traj),
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct RateView {
    dt: Vec<f64>,
    err_l2: Vec<f64>,
    err_sync: Vec<f64>,
    rate_running: Vec<Option<f64>>,
    observed_rate: f64,
}

pub fn convergence_json(config: &str, levels: usize) -> Result<String, String> {
    let cfg = parse_config(config).map_err(|e| e.to_string())?;
    let prepared = prepare(&cfg).map_err(|e| e.to_string())?;
    let table = run_convergence(
        &prepared,
        levels,
        TargetChoice::L2,
        ReferenceChoice::CrankNicolson,
        1,
    )
    .map_err(|e| e.to_string())?;
    let view = RateView {
        dt: table.rows.iter().map(|r| r.dt).collect(),
        err_l2: table
            .rows
            .iter()
            .map(|r| r.err_l2.iter().map(|e| e * e).sum::<f64>().sqrt())
            .collect(),
        err_sync: table.rows.iter().map(|r| r.err_sync).collect(),
        rate_running: table
            .rows
            .iter()
            .map(|r| Some(r.rate_running).filter(|v| v.is_finite()))
            .collect(),
        observed_rate: table.observed_rate,
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

#[derive(Deserialize)]
struct SchemeInput {
    q: usize,
    thetas: Vec<f64>,
    /// Rows of `D`, one per node.
    side_matrix: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct SchemeView {
    dtilde: Vec<Vec<f64>>,
    determinant: f64,
    nonsingular: bool,
    /// Outcome of the validating constructor.
    accepted: Result<(), String>,
}

pub fn inspect_scheme_json(input: &str) -> Result<String, String> {
    let input: SchemeInput = serde_json::from_str(input).map_err(|e| e.to_string())?;
    let rows = input.side_matrix.len();
    let cols = input.side_matrix.first().map_or(0, Vec::len);
    if input.side_matrix.iter().any(|r| r.len() != cols) {
        return Err("side_matrix rows differ in length".into());
    }
    let flat: Vec<f64> = input.side_matrix.concat();
    let d = DMatrix::from_row_slice(rows, cols, &flat);
    let spec = SchemeSpec::new_unchecked("custom", input.q, input.thetas.clone(), d.clone())
        .map_err(|e| e.to_string())?;
    let report = build_dtilde(&spec);
    let view = SchemeView {
        dtilde: report
            .matrix
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect(),
        determinant: report.determinant,
        nonsingular: report.nonsingular,
        accepted: SchemeSpec::new("custom", input.q, input.thetas, d)
            .map(|_| ())
            .map_err(|e| e.to_string()),
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn simulate(config: &str) -> Result<String, JsError> {
    simulate_json(config).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn convergence(config: &str, levels: usize) -> Result<String, JsError> {
    convergence_json(config, levels).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn inspect_scheme(input: &str) -> Result<String, JsError> {
    inspect_scheme_json(input).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const CONFIG: &str = r#"{
        "geometry": {"nx": 4, "ny": [4, 4]},
        "problem": {"nu": [1.0, 0.5], "coupling": [[1.0, -1.0], [-1.0, 1.0]], "initial": "bump"},
        "scheme": {"kind": "crank-nicolson"},
        "window": {"t_final": 0.5, "windows": 5, "substeps": [1, 2], "flux_orders": [1, 1]}
    }"#;

    #[test]
    fn simulation_frames_cover_every_node() {
        let v: serde_json::Value = serde_json::from_str(&simulate_json(CONFIG).unwrap()).unwrap();
        assert_eq!(v["frames"].as_array().unwrap().len(), 6);
        assert_eq!(v["windows"].as_array().unwrap().len(), 6);
        assert_eq!(v["frames"][3][0].as_array().unwrap().len(), 25);
        assert!(v["windows"][0]["conservation"].is_null());
        assert!(v["windows"][2]["conservation"].as_f64().unwrap() < 1e-11);
    }

    #[test]
    fn crank_nicolson_side_matrix() {
        let out =
            inspect_scheme_json(r#"{"q": 1, "thetas": [0, 1], "side_matrix": [[0, 1], [1, 0]]}"#).unwrap();
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["dtilde"], serde_json::json!([[1.0, -1.0], [1.0, 1.0]]));
        assert_eq!(v["determinant"], 2.0);
        assert!(v["accepted"].get("Ok").is_some());
    }

    #[test]
    fn repeated_nodes_are_rejected() {
        let out =
            inspect_scheme_json(r#"{"q": 1, "thetas": [0.5, 0.5], "side_matrix": [[1], [1]]}"#).unwrap();
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["nonsingular"], false);
        assert!(v["accepted"].get("Err").is_some());
    }

    #[test]
    fn convergence_without_manufactured_forcing_is_an_error() {
        assert!(convergence_json(CONFIG, 3).unwrap_err().contains("manufactured"));
    }
}

//! Batch command-line interface: feasibility checks, extension construction,
//! pointwise and grid evaluation, level-set surface extraction, the planar
//! two-region benchmark harness, and a conjugate debug probe.
//!
//! Exit codes: 0 success/feasible, 2 infeasible or other domain-level
//! negative, 1 operational error (I/O, malformed input, bad flags).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use cvxjet::conditions::{coercivity_witness, feasibility_report, GridSpec};
use cvxjet::extend::{
    extend_c11loc, extend_c1omega, extend_global, extend_nonconvex, extend_with_projection,
    CoerciveVariant, ExtendOptions, ExtensionModel,
};
use cvxjet::repro::{run as repro_run, ReproConfig};
use cvxjet::surface::{level_set_extract, surface_from_normals, BoundingBox, NormalData};
use cvxjet::{Error, Jet, JetSet, Modulus};

#[derive(Parser)]
#[command(name = "cvxjet", version, about = "Convex C^{1,1}-loc extension of 1-jets")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct BuildFlags {
    /// Margin parameter of the localizer-augmented pieces.
    #[arg(long, default_value_t = 0.5)]
    a: f64,
    /// Largest radius index for the semi-global constants.
    #[arg(long)]
    k_max: Option<usize>,
    /// Interpolation check tolerance, in (0, 1e-2].
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// global | ak | phi | projected | c1omega | nonconvex
    #[arg(long, default_value = "ak")]
    method: String,
    /// identity | power:ALPHA | table:PATH (c1omega method only).
    #[arg(long)]
    omega: Option<String>,
    /// JSON array of curvature bounds (nonconvex method only).
    #[arg(long)]
    mk: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Feasibility report for a jet file: global constant, per-radius
    /// constants, gradient span dimension, coercivity witness.
    Check {
        input: PathBuf,
        #[arg(long)]
        k_max: Option<usize>,
        #[arg(long, default_value_t = 10.0)]
        grid_radius: f64,
        #[arg(long, default_value_t = 101)]
        grid_points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build an extension and write its manifest.
    Extend {
        input: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        #[command(flatten)]
        flags: BuildFlags,
    },
    /// Evaluate a manifest at points given as comma-separated coordinates.
    Eval {
        model: PathBuf,
        /// Points with negative coordinates start with a hyphen; accept them.
        #[arg(allow_hyphen_values = true)]
        points: Vec<String>,
    },
    /// Evaluate a manifest on a uniform lattice and write CSV.
    Grid {
        model: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        #[arg(long, default_value_t = 2.0)]
        radius: f64,
        #[arg(long, default_value_t = 101)]
        resolution: usize,
    },
    /// Build a surface through prescribed points/normals and extract its
    /// zero level set (CSV polyline in 2D, OBJ in 3D, JSON sidecar).
    Surface {
        input: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 0.5)]
        a: f64,
        /// Half-width of the extraction box; 0 means auto from the data.
        #[arg(long, default_value_t = 0.0)]
        radius: f64,
    },
    /// Planar two-region benchmark: verifies the nine case inequalities on a
    /// grid, builds the extensions, tabulates seminorm estimates.
    ReproProp31 {
        #[arg(long, short)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        j_min: usize,
        #[arg(long, default_value_t = 5)]
        j_max: usize,
        #[arg(long, default_value_t = 3)]
        k_max: usize,
        #[arg(long, default_value_t = 201)]
        resolution: usize,
        #[arg(long, default_value_t = 30)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Debug probe: conjugate of the piece minimum at a dual point.
    Conjugate {
        model: PathBuf,
        #[arg(allow_hyphen_values = true)]
        point: String,
    },
}

#[derive(Serialize, Deserialize)]
struct LiftInfo {
    #[serde(rename = "X_basis")]
    x_basis: Vec<Vec<f64>>,
    v: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ManifestFlags {
    k_max: Option<usize>,
    tol: f64,
    seed: u64,
    omega: Option<String>,
    mk: Option<Vec<f64>>,
}

/// Self-contained model description: flags plus the jets, so reloading
/// rebuilds the identical model.
#[derive(Serialize, Deserialize)]
struct Manifest {
    method: String,
    a: f64,
    #[serde(rename = "A")]
    a_sequence: Vec<f64>,
    lift: Option<LiftInfo>,
    flags: ManifestFlags,
    residuals: Residuals,
    jets: JetSet,
}

#[derive(Serialize, Deserialize)]
struct Residuals {
    max_value_err: f64,
    max_gradient_err: f64,
}

fn load_jets(path: &Path) -> cvxjet::Result<JetSet> {
    let text = std::fs::read_to_string(path)?;
    let raw: JetSet = serde_json::from_str(&text)?;
    // Re-run the constructor invariants on deserialized data.
    JetSet::new(raw.dim, raw.jets, raw.base_point_index)
}

fn parse_omega(spec: Option<&str>) -> cvxjet::Result<Modulus> {
    let m = match spec {
        None | Some("identity") => Modulus::Identity,
        Some(s) if s.starts_with("power:") => {
            let alpha: f64 = s["power:".len()..]
                .parse()
                .map_err(|_| Error::InvalidParameter(format!("bad omega spec: {s}")))?;
            Modulus::Power { alpha }
        }
        Some(s) if s.starts_with("table:") => {
            let text = std::fs::read_to_string(&s["table:".len()..])?;
            let rows: Vec<(f64, f64)> = serde_json::from_str(&text)?;
            let (ts, ws) = rows.into_iter().unzip();
            Modulus::Table { ts, ws }
        }
        Some(s) => return Err(Error::InvalidParameter(format!("unknown omega: {s}"))),
    };
    m.validate()?;
    Ok(m)
}

fn validate_flags(f: &BuildFlags) -> cvxjet::Result<()> {
    if !(f.a > 0.0) {
        return Err(Error::InvalidParameter("--a must be > 0".into()));
    }
    if let Some(k) = f.k_max {
        if k < 1 {
            return Err(Error::InvalidParameter("--k-max must be >= 1".into()));
        }
    }
    if !(f.tol > 0.0 && f.tol <= 1e-2) {
        return Err(Error::InvalidParameter("--tol must lie in (0, 1e-2]".into()));
    }
    Ok(())
}

/// Splits auxiliary-flagged jets out and remaps the base index.
fn split_aux(js: &JetSet) -> cvxjet::Result<(JetSet, Vec<Jet>)> {
    let mut primary = Vec::new();
    let mut aux = Vec::new();
    let mut base = None;
    for (i, j) in js.jets.iter().enumerate() {
        if j.is_auxiliary {
            if i == js.base_point_index {
                return Err(Error::InvalidParameter("base jet cannot be auxiliary".into()));
            }
            let mut a = j.clone();
            a.is_auxiliary = false;
            aux.push(a);
        } else {
            if i == js.base_point_index {
                base = Some(primary.len());
            }
            primary.push(j.clone());
        }
    }
    let base = base.ok_or_else(|| Error::InvalidParameter("no primary base jet".into()))?;
    Ok((JetSet::new(js.dim, primary, base)?, aux))
}

fn build_model(
    js: &JetSet,
    method: &str,
    a: f64,
    k_max: Option<usize>,
    omega: Option<&str>,
    mks: &[f64],
) -> cvxjet::Result<ExtensionModel> {
    let mk_opts = |variant| ExtendOptions { a, k_max, variant };
    match method {
        "global" => extend_global(js, &mk_opts(CoerciveVariant::Ak)),
        "ak" => extend_c11loc(js, &mk_opts(CoerciveVariant::Ak)),
        "phi" => extend_c11loc(js, &mk_opts(CoerciveVariant::Phi)),
        "projected" => {
            let (primary, aux) = split_aux(js)?;
            extend_with_projection(&primary, None, &aux, &mk_opts(CoerciveVariant::Ak))
        }
        "c1omega" => {
            let (primary, aux) = split_aux(js)?;
            let om = parse_omega(omega)?;
            extend_c1omega(&primary, &om, None, &aux, &mk_opts(CoerciveVariant::Ak))
        }
        "nonconvex" => extend_nonconvex(js, mks, &mk_opts(CoerciveVariant::Ak)),
        other => Err(Error::InvalidParameter(format!("unknown method: {other}"))),
    }
}

fn rebuild(man: &Manifest) -> cvxjet::Result<ExtensionModel> {
    let js = JetSet::new(man.jets.dim, man.jets.jets.clone(), man.jets.base_point_index)?;
    build_model(
        &js,
        &man.method,
        man.a,
        man.flags.k_max,
        man.flags.omega.as_deref(),
        man.flags.mk.as_deref().unwrap_or(&[]),
    )
}

fn load_manifest(path: &Path) -> cvxjet::Result<(Manifest, ExtensionModel)> {
    let man: Manifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let model = rebuild(&man)?;
    Ok((man, model))
}

fn parse_point(s: &str, dim: usize) -> cvxjet::Result<DVector<f64>> {
    let coords: Vec<f64> = s
        .split(',')
        .map(|c| c.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Error::InvalidParameter(format!("bad point: {s}")))?;
    if coords.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: coords.len() });
    }
    Ok(DVector::from_vec(coords))
}

fn cmd_check(
    input: &Path,
    k_max: Option<usize>,
    grid_radius: f64,
    grid_points: usize,
    seed: u64,
) -> cvxjet::Result<bool> {
    let js = load_jets(input)?;
    let report = feasibility_report(&js, k_max);
    let grid = GridSpec { radius: grid_radius, points_per_axis: grid_points };
    let coercivity = if report.is_feasible() {
        coercivity_witness(&js, &grid, seed)
    } else {
        None
    };
    let mut out = report.to_json();
    out["coercivity"] = match &coercivity {
        Some(w) => serde_json::to_value(w)?,
        None => serde_json::Value::Null,
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(report.is_feasible())
}

fn cmd_extend(input: &Path, output: &Path, flags: &BuildFlags) -> cvxjet::Result<()> {
    validate_flags(flags)?;
    let js = load_jets(input)?;
    let mks: Vec<f64> = match &flags.mk {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => Vec::new(),
    };
    let model = build_model(
        &js,
        &flags.method,
        flags.a,
        flags.k_max,
        flags.omega.as_deref(),
        &mks,
    )?;
    let mut value_err = 0.0f64;
    let mut grad_err = 0.0f64;
    // Interpolation residuals over the non-auxiliary jets.
    for j in js.jets.iter().filter(|j| !j.is_auxiliary) {
        let r = model.eval(&j.point);
        value_err = value_err.max((r.value - j.value).abs() / (1.0 + j.value.abs()));
        grad_err = grad_err.max((r.gradient - &j.gradient).norm() / (1.0 + j.gradient.norm()));
    }
    if value_err > flags.tol.max(1e-6) {
        eprintln!("warning: interpolation residual {value_err:.3e} above tolerance");
    }
    let man = Manifest {
        method: model.method.as_str().to_string(),
        a: model.a,
        a_sequence: model.a_sequence.clone(),
        lift: model.lift().map(|(x, v)| LiftInfo {
            x_basis: (0..x.dim()).map(|i| x.basis_vector(i).as_slice().to_vec()).collect(),
            v: v.as_slice().to_vec(),
        }),
        flags: ManifestFlags {
            k_max: flags.k_max,
            tol: flags.tol,
            seed: flags.seed,
            omega: flags.omega.clone(),
            mk: if mks.is_empty() { None } else { Some(mks) },
        },
        residuals: Residuals { max_value_err: value_err, max_gradient_err: grad_err },
        jets: js,
    };
    std::fs::write(output, serde_json::to_string_pretty(&man)?)?;
    println!(
        "wrote {} ({} pieces, method {})",
        output.display(),
        man.jets.jets.len(),
        man.method
    );
    Ok(())
}

fn cmd_eval(model_path: &Path, points: &[String]) -> cvxjet::Result<()> {
    let (_, model) = load_manifest(model_path)?;
    for p in points {
        let x = parse_point(p, model.dim)?;
        let r = model.eval(&x);
        let row = serde_json::json!({
            "point": x.as_slice(),
            "value": r.value,
            "gradient": r.gradient.as_slice(),
            "dual_gap": r.kkt_residual,
            "converged": r.converged,
            "approximate": r.approximate,
        });
        println!("{row}");
    }
    Ok(())
}

fn cmd_grid(model_path: &Path, output: &Path, radius: f64, resolution: usize) -> cvxjet::Result<()> {
    let (_, model) = load_manifest(model_path)?;
    let n = model.dim;
    let res = resolution.max(2);
    let mut header: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
    header.push("F".into());
    header.extend((0..n).map(|i| format!("g{i}")));
    header.push("dual_gap".into());
    header.push("converged".into());
    let mut out = header.join(",");
    out.push('\n');
    let mut idx = vec![0usize; n];
    loop {
        let x = DVector::from_fn(n, |i, _| {
            -radius + 2.0 * radius * idx[i] as f64 / (res - 1) as f64
        });
        let r = model.eval(&x);
        let mut row: Vec<String> = x.iter().map(|c| format!("{c:.12e}")).collect();
        row.push(format!("{:.12e}", r.value));
        row.extend(r.gradient.iter().map(|c| format!("{c:.12e}")));
        row.push(format!("{:.3e}", r.kkt_residual));
        row.push(if r.converged { "1".into() } else { "0".into() });
        out.push_str(&row.join(","));
        out.push('\n');
        let mut carry = 0;
        while carry < n {
            idx[carry] += 1;
            if idx[carry] < res {
                break;
            }
            idx[carry] = 0;
            carry += 1;
        }
        if carry == n {
            break;
        }
    }
    std::fs::write(output, out)?;
    Ok(())
}

fn cmd_surface(input: &Path, output: &Path, resolution: usize, a: f64, radius: f64) -> cvxjet::Result<()> {
    let text = std::fs::read_to_string(input)?;
    let nd = NormalData::from_json(&text)?;
    let opts = ExtendOptions { a, ..Default::default() };
    let s = surface_from_normals(&nd, &opts)?;
    let half = if radius > 0.0 {
        radius
    } else {
        2.0 + 2.0 * s.points.iter().map(|p| p.norm()).fold(0.0, f64::max)
    };
    let mesh = level_set_extract(&s.model, &BoundingBox::cube(nd.dim, half), resolution)?;
    let sidecar = output.with_extension("json");
    if nd.dim == 2 {
        mesh.write_polyline_csv(output)?;
    } else {
        mesh.write_obj(output)?;
    }
    mesh.write_sidecar(&sidecar)?;
    println!(
        "wrote {} ({} vertices, {} rays dropped, max residual {:.3e})",
        output.display(),
        mesh.vertices.len(),
        mesh.dropped_rays,
        mesh.max_residual
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_repro(
    output: Option<&Path>,
    j_min: usize,
    j_max: usize,
    k_max: usize,
    resolution: usize,
    samples: usize,
    seed: u64,
) -> cvxjet::Result<()> {
    let cfg = ReproConfig {
        j_min,
        j_max,
        grid_points: resolution,
        samples_per_region: samples,
        k_max,
        seed,
        ..Default::default()
    };
    let report = repro_run(&cfg)?;
    for jr in &report.j_reports {
        let worst = jr.h_min.iter().cloned().fold(f64::INFINITY, f64::min);
        println!("j={}: min case value {:.3e}, interp err {:.3e}", jr.j, worst, jr.interp_value_err);
        for k in 0..=k_max {
            println!(
                "  k={k}: mu {:.6} (cap {:.6}), rho {:.6}",
                jr.mu[k], jr.mu_cap[k], jr.rho[k]
            );
        }
    }
    if let Some(p) = output {
        std::fs::write(p, report.to_json())?;
    }
    Ok(())
}

fn cmd_conjugate(model_path: &Path, point: &str) -> cvxjet::Result<()> {
    let (_, model) = load_manifest(model_path)?;
    let v = parse_point(point, model.dim)?;
    match model.dual_value(&v) {
        Some(val) => {
            println!("{val:.12e}");
            Ok(())
        }
        None => Err(Error::InvalidParameter(
            "conjugate probe is unsupported for lifted or shifted models".into(),
        )),
    }
}

fn exit_for(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Json(_) | Error::InvalidParameter(_) | Error::UnsupportedModulus(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: cvxjet::Result<bool> = match &cli.cmd {
        Cmd::Check { input, k_max, grid_radius, grid_points, seed } => {
            cmd_check(input, *k_max, *grid_radius, *grid_points, *seed)
        }
        Cmd::Extend { input, output, flags } => cmd_extend(input, output, flags).map(|_| true),
        Cmd::Eval { model, points } => cmd_eval(model, points).map(|_| true),
        Cmd::Grid { model, output, radius, resolution } => {
            cmd_grid(model, output, *radius, *resolution).map(|_| true)
        }
        Cmd::Surface { input, output, resolution, a, radius } => {
            cmd_surface(input, output, *resolution, *a, *radius).map(|_| true)
        }
        Cmd::ReproProp31 { output, j_min, j_max, k_max, resolution, samples, seed } => {
            cmd_repro(output.as_deref(), *j_min, *j_max, *k_max, *resolution, *samples, *seed)
                .map(|_| true)
        }
        Cmd::Conjugate { model, point } => cmd_conjugate(model, point).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            if let Error::Infeasible { witness } = &e {
                if let Ok(w) = serde_json::to_string(witness) {
                    println!("{{\"infeasible\":true,\"witness\":{w}}}");
                }
            }
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}

//! Batch driver behind the `wentzell` binary.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::carleman::{
    build_eta0, carleman_sweep, eta0_report, random_smooth_data, sweep_csv, weights,
};
use crate::config::{ExperimentConfig, Format, InitialState, Mode};
use crate::control::{free_terminal_norm, penalized_hum, ControlResult, WeightedProblem};
use crate::error::{Error, Result};
use crate::evolution::{residual_distributional, solve_forward, SourceData};
use crate::fields::{norm, L2Pair};
use crate::geometry::{control_mask, ControlRegion, Mesh};
use crate::observability::{check_forward_final_state, estimate_backward_observability};
use crate::operators::{assemble, DiscreteOperator};
use crate::semilinear::{history_csv, picard_control};
use crate::verify;

#[derive(Debug, Parser)]
#[command(
    name = "wentzell",
    version,
    about = "Heat equations with dynamic boundary conditions: simulation and null control"
)]
pub struct Cli {
    /// Worker threads for parallel sweeps.
    #[arg(long, env = "WENTZELL_THREADS", global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment described by a TOML config.
    Run {
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a built-in verification suite.
    Verify { suite: String },
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

fn report_error(err: &Error) {
    let payload = json!({ "error": err.category(), "message": err.to_string() });
    eprintln!("{payload}");
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        // Fails only if the global pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    match cli.command {
        Command::Run {
            config,
            output_dir,
            seed,
        } => {
            match ExperimentConfig::load(&config).and_then(|cfg| {
                let dir = output_dir.unwrap_or_else(|| PathBuf::from(&cfg.output.directory));
                run(&cfg, &dir, seed)
            }) {
                Ok(manifest) => {
                    println!(
                        "{}",
                        serde_json::to_string_pretty(&manifest.headline).unwrap_or_default()
                    );
                    EXIT_OK
                }
                Err(e) => {
                    report_error(&e);
                    exit_code_for(&e)
                }
            }
        }
        Command::Verify { suite } => match verify::run_suite(&suite) {
            Ok(checks) => {
                for c in &checks {
                    println!("{c}");
                }
                if checks.iter().all(|c| c.passed) {
                    EXIT_OK
                } else {
                    EXIT_FAILURE
                }
            }
            Err(e) => {
                report_error(&e);
                exit_code_for(&e)
            }
        },
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub mode: &'static str,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub wall_time_seconds: f64,
    pub headline: Value,
    pub artifacts: Vec<String>,
}

struct Output {
    root: PathBuf,
    csv: bool,
    binary: bool,
    written: Vec<String>,
}

impl Output {
    fn new(root: &Path, formats: &[Format]) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Output {
            root: root.to_path_buf(),
            csv: formats.contains(&Format::Csv),
            binary: formats.contains(&Format::Binary),
            written: Vec::new(),
        })
    }

    fn text(&mut self, name: &str, content: &str) -> Result<()> {
        fs::write(self.root.join(name), content)?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn csv(&mut self, name: &str, content: impl FnOnce() -> String) -> Result<()> {
        if self.csv {
            self.text(name, &content())?;
        }
        Ok(())
    }

    fn trajectory(&mut self, stem: &str, tr: &crate::fields::Trajectory) -> Result<()> {
        self.csv(&format!("{stem}.csv"), || tr.to_csv())?;
        if self.binary {
            let name = format!("{stem}.bin");
            let mut buf = Vec::new();
            tr.write_binary(&mut buf)?;
            fs::write(self.root.join(&name), buf)?;
            self.written.push(name);
        }
        Ok(())
    }
}

fn pair_csv(p: &L2Pair) -> String {
    let mut out = String::from("node_id,component,value\n");
    let nb = p.n_bulk();
    for (i, v) in p.as_slice().iter().enumerate() {
        let comp = if i < nb { "bulk" } else { "surface" };
        let _ = writeln!(out, "{i},{comp},{v:.17e}");
    }
    out
}

fn history_table(h: &[f64]) -> String {
    let mut out = String::from("iteration,relative_residual\n");
    for (k, r) in h.iter().enumerate() {
        let _ = writeln!(out, "{k},{r:.17e}");
    }
    out
}

fn region_for(cfg: &ExperimentConfig, mesh: &Mesh) -> Result<ControlRegion> {
    match &cfg.control.region {
        Some(crate::geometry::RegionDescriptor::Full) | None => {
            Ok(ControlRegion::full_observation(mesh))
        }
        Some(d) => control_mask(mesh, d),
    }
}

fn control_artifacts(
    out: &mut Output,
    mesh: &Mesh,
    cfg: &ExperimentConfig,
    r: &ControlResult,
) -> Result<()> {
    out.trajectory("state", &r.y)?;
    let v = r.v.to_trajectory(mesh, cfg.time.t_final)?;
    out.csv("control.csv", || v.to_csv())?;
    out.csv("cg_history.csv", || history_table(&r.cg_history))
}

/// Executes one experiment and writes its artifacts under `dir`.
pub fn run(cfg: &ExperimentConfig, dir: &Path, seed: Option<u64>) -> Result<Manifest> {
    let started = Instant::now();
    let seed = seed.unwrap_or(cfg.seed);
    let mesh = Mesh::build(&cfg.geometry)?;
    let op = assemble(&mesh, cfg.physics.d, cfg.physics.delta)?;
    let pot = cfg.potentials();
    let ev = cfg.evolution();
    let mut out = Output::new(dir, &cfg.output.formats)?;
    out.csv("mesh.csv", || mesh.to_csv())?;
    out.text("stiffness.txt", &op.stiffness.to_triplet_text())?;
    out.text("mass.txt", &op.mass_triplet_text())?;

    let y0 = cfg.physics.initial.build(&mesh, seed)?;
    let (f, g) = cfg.sources(&mesh);
    let src = SourceData { f, g, v: None, y0 };
    let headline = match cfg.control.mode {
        Mode::Simulate => simulate(&mut out, &op, cfg, &src)?,
        Mode::Hum => {
            let region = region_for(cfg, &mesh)?;
            let r = penalized_hum(&op, &pot, &src, &region, &ev, &cfg.hum_options())?;
            control_artifacts(&mut out, &mesh, cfg, &r.result)?;
            out.csv("phi_hat.csv", || pair_csv(&r.phi_hat))?;
            let with_v = SourceData {
                v: Some(r.result.v.clone()),
                ..src.clone()
            };
            json!({
                "summary": r.result.summary(),
                "identity_residual": r.identity_residual,
                "phi_hat_norm": r.phi_hat_norm,
                "free_terminal_norm": free_terminal_norm(&op, &pot, &src, &ev)?,
                "initial_norm": norm(&src.y0, &mesh)?,
                "residual": residual_distributional(&r.result.y, &op, &pot, &with_v, &ev)?,
            })
        }
        Mode::Weighted => {
            let region = region_for(cfg, &mesh)?;
            let cw = carleman_weights(cfg, &mesh, &region)?;
            let prob =
                WeightedProblem::new(&op, &pot, &src, &region, &cw, &ev, &cfg.weighted_options())?;
            let r = prob.solve()?;
            control_artifacts(&mut out, &mesh, cfg, &r)?;
            json!({
                "summary": r.summary(),
                "weighted_state_norm": WeightedProblem::weighted_state_norm(&r),
                "source_norms_sq": [prob.source_norms_sq.0, prob.source_norms_sq.1],
                "initial_norm": norm(&src.y0, &mesh)?,
            })
        }
        Mode::Semilinear => {
            let region = region_for(cfg, &mesh)?;
            let nl = cfg.nonlinearity()?;
            let cw = carleman_weights(cfg, &mesh, &region).ok();
            let r = picard_control(
                &op,
                &nl,
                &src,
                &region,
                cw.as_ref(),
                &ev,
                &cfg.picard_options(),
            )?;
            control_artifacts(&mut out, &mesh, cfg, &r.control)?;
            out.csv("picard.csv", || history_csv(&r.history))?;
            json!({
                "summary": r.control.summary(),
                "linear_terminal_norm": r.linear_terminal_norm,
                "iterations": r.history.len(),
                "relinearization_change": r.relinearization_change,
                "semi_implicit_residual": r.semi_implicit_residual,
                "initial_norm": norm(&src.y0, &mesh)?,
            })
        }
        Mode::Observability => {
            let region = region_for(cfg, &mesh)?;
            let rep = estimate_backward_observability(
                &op,
                &pot,
                &region,
                &ev,
                &cfg.control.observability,
            )?;
            let mut samples = vec![L2Pair::constant(&mesh, 1.0)];
            for k in 0..cfg.control.forward_samples {
                samples.push(
                    InitialState::Random { amplitude: 1.0 }
                        .build(&mesh, seed.wrapping_add(k as u64))?,
                );
            }
            let fwd =
                check_forward_final_state(&op, &pot, &region, &ev, &samples, Some(rep.constant))?;
            out.csv("maximizer.csv", || pair_csv(&rep.maximizer))?;
            out.csv("forward.csv", || {
                let mut s = String::from("sample,quotient\n");
                for (k, q) in fwd.quotients.iter().enumerate() {
                    let _ = writeln!(s, "{k},{q:.17e}");
                }
                s
            })?;
            out.csv("power_iteration.csv", || history_table(&rep.history))?;
            json!({
                "constant": rep.constant,
                "iterations": rep.iterations,
                "residual": rep.residual,
                "shift": rep.shift,
                "trace_estimate": rep.trace_estimate,
                "constant_datum_quotient": rep.constant_datum_quotient,
                "modal_quotient": rep.modal_quotient,
                "forward_quotients": fwd.quotients,
                "forward_within_bound": fwd.within_bound,
            })
        }
        Mode::CarlemanSweep => {
            let region = region_for(cfg, &mesh)?;
            let inner = control_mask(&mesh, &region.descriptor.shrunk_half())?;
            let eta = build_eta0(&mesh, &inner)?;
            let data = random_smooth_data(&mesh, cfg.control.sweep_samples, seed);
            let recs = carleman_sweep(
                &op,
                &pot,
                &region,
                &eta,
                cfg.weights.m,
                &cfg.control.s_values,
                &cfg.control.lambda_values,
                &data,
                &ev,
            )?;
            out.csv("carleman_sweep.csv", || sweep_csv(&recs))?;
            let max = recs.iter().map(|r| r.ratio).fold(0.0, f64::max);
            json!({
                "max_ratio": max,
                "records": recs.len(),
                "anomalies": recs.iter().filter(|r| r.anomaly).count(),
                "eta0": eta0_report(&op, &eta, &inner),
            })
        }
    };
    let manifest = Manifest {
        tool: "wentzell",
        version: env!("CARGO_PKG_VERSION"),
        mode: cfg.control.mode.name(),
        seed,
        config: cfg.clone(),
        wall_time_seconds: started.elapsed().as_secs_f64(),
        headline,
        artifacts: out.written.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    out.text("manifest.json", &text)?;
    Ok(manifest)
}

fn carleman_weights(
    cfg: &ExperimentConfig,
    mesh: &Mesh,
    region: &ControlRegion,
) -> Result<crate::carleman::CarlemanWeights> {
    let inner = control_mask(mesh, &region.descriptor.shrunk_half())?;
    let eta = build_eta0(mesh, &inner)?;
    weights(cfg.carleman_params(), cfg.time.t_final, eta)
}

fn simulate(
    out: &mut Output,
    op: &DiscreteOperator,
    cfg: &ExperimentConfig,
    src: &SourceData,
) -> Result<Value> {
    let ev = cfg.evolution();
    let pot = cfg.potentials();
    let tr = solve_forward(op, &pot, src, &ev)?;
    let mass_of = |s: &L2Pair| {
        s.as_slice()
            .iter()
            .zip(&op.mass)
            .map(|(v, m)| v * m)
            .sum::<f64>()
    };
    let masses: Vec<f64> = tr.states.iter().map(mass_of).collect();
    let norms: Vec<f64> = tr
        .states
        .iter()
        .map(|s| norm(s, &op.mesh))
        .collect::<Result<_>>()?;
    let m0 = masses[0];
    let drift =
        masses.iter().map(|m| (m - m0).abs()).fold(0.0, f64::max) / m0.abs().max(f64::MIN_POSITIVE);
    out.trajectory("trajectory", &tr)?;
    out.csv("norms.csv", || {
        let mut s = String::from("t,norm,mass\n");
        for (n, (a, b)) in norms.iter().zip(&masses).enumerate() {
            let _ = writeln!(s, "{:.17e},{a:.17e},{b:.17e}", tr.time(n));
        }
        s
    })?;
    Ok(json!({
        "mass_initial": m0,
        "mass_final": masses[masses.len() - 1],
        "mass_drift": drift,
        "initial_norm": norms[0],
        "final_norm": norms[norms.len() - 1],
        "residual": residual_distributional(&tr, op, &pot, src, &ev)?,
    }))
}

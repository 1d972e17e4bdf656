//! Command-line driver. Every subcommand reads one JSON run configuration
//! and writes JSON/VTK artifacts; numeric output carries nine significant
//! digits so runs diff cleanly.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::Matrix3;
use serde_json::json;

use dca::clustering::kmeans;
use dca::deflation::idcg_newton;
use dca::fem::element_operators;
use dca::homogenize::{compare_fields, MicroFe};
use dca::mcr::{measure_descriptors, reconstruct, remove_isolated_solids, voxel_to_tets, voxelize};
use dca::mesh::{LengthUnit, Mesh};
use dca::multiscale::{fmt9, MicroModel, Multiscale, RunConfig};
use dca::rom::{broadcast_cluster_von_mises, MicroRom, RomOptions};
use dca::vtk::{write_vtk, ScalarField};
use dca::Error;

#[derive(Parser)]
#[command(name = "dca", about = "Reduced-order multiscale elastoplastic FEM toolkit")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output path (file or directory prefix depending on subcommand).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the configured RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured cluster count.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Worker thread cap (reserved; solves currently run on one thread).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reconstructs a periodic porous RVE mesh from target descriptors.
    GenerateRve,
    /// Partitions mesh nodes into clusters and reports the assignment.
    Cluster,
    /// Drives one RVE through a deformation-gradient schedule.
    SolveMicro,
    /// Single-scale elastoplastic solve of the macro mesh.
    SolveMacro,
    /// Elastic condensed tangent of the RVE.
    Homogenize,
    /// Two-scale coupled solve.
    SolveMultiscale,
    /// Normalized L2 comparison of two scalar fields (JSON arrays).
    CompareFields {
        a: PathBuf,
        b: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match &e {
                Error::Config(_) | Error::LengthMismatch { .. } | Error::Mesh(_) => 2,
                Error::Convergence(_) => 3,
                Error::Io(_) | Error::Json(_) => 4,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn load_config(cli: &Cli) -> dca::Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required for this subcommand".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(k) = cli.k {
        cfg.k_micro = k;
        cfg.k_macro = k;
    }
    Ok(cfg)
}

fn out_path(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn load_rve(cfg: &RunConfig) -> dca::Result<Mesh> {
    let path = cfg
        .rve_mesh
        .as_ref()
        .ok_or_else(|| Error::Config("config must set rve_mesh".into()))?;
    Mesh::load(path)
}

fn load_macro(cfg: &RunConfig) -> dca::Result<Mesh> {
    let path = cfg
        .macro_mesh
        .as_ref()
        .ok_or_else(|| Error::Config("config must set macro_mesh".into()))?;
    Mesh::load(path)
}

fn gradients(cfg: &RunConfig) -> dca::Result<Vec<Matrix3<f64>>> {
    if cfg.deformation_gradients.is_empty() {
        return Err(Error::Config("config must set deformation_gradients".into()));
    }
    Ok(cfg
        .deformation_gradients
        .iter()
        .map(|rows| {
            Matrix3::from_fn(|i, j| rows[i][j])
        })
        .collect())
}

fn response_json(r: &dca::homogenize::HomogenizedResponse) -> serde_json::Value {
    let s: Vec<Vec<String>> =
        (0..3).map(|i| (0..3).map(|j| fmt9(r.s[(i, j)])).collect()).collect();
    let c: Vec<Vec<String>> =
        (0..6).map(|i| (0..6).map(|j| fmt9(r.c[(i, j)])).collect()).collect();
    json!({ "stress": s, "tangent": c })
}

fn run(cli: &Cli) -> dca::Result<()> {
    match &cli.command {
        Command::GenerateRve => {
            let cfg = load_config(cli)?;
            let desc = cfg
                .descriptors
                .as_ref()
                .ok_or_else(|| Error::Config("config must set descriptors".into()))?;
            let pores = reconstruct(desc, cfg.seed, cfg.resolution)?;
            let grid = remove_isolated_solids(&voxelize(&pores, cfg.resolution))?;
            let mesh = voxel_to_tets(&grid, desc.side_length, LengthUnit::Micrometer)?;
            let achieved = measure_descriptors(&pores, &grid);
            let out = out_path(cli, "rve.json");
            mesh.save(&out)?;
            write_vtk(&mesh, &[], &[], out.with_extension("vtk"))?;
            println!(
                "{}",
                json!({
                    "mesh": out,
                    "nodes": mesh.n_nodes(),
                    "tets": mesh.n_tets(),
                    "achieved": {
                        "volume_fraction": fmt9(achieved.volume_fraction),
                        "pore_count": achieved.pore_count,
                        "aspect_ratio": fmt9(achieved.aspect_ratio),
                        "mean_neighbor_distance": fmt9(achieved.mean_neighbor_distance),
                    }
                })
            );
            Ok(())
        }
        Command::Cluster => {
            let cfg = load_config(cli)?;
            let mesh = if cfg.macro_mesh.is_some() { load_macro(&cfg)? } else { load_rve(&cfg)? };
            let part = kmeans(&mesh.nodes, cfg.k_micro, cfg.seed)?;
            let out = out_path(cli, "clusters.json");
            std::fs::write(
                &out,
                serde_json::to_string_pretty(&json!({
                    "k": part.k,
                    "assignment": part.assignment,
                }))?,
            )?;
            println!("{}", json!({ "k": part.k, "objective": fmt9(part.objective(&mesh.nodes)) }));
            Ok(())
        }
        Command::SolveMicro => {
            let cfg = load_config(cli)?;
            let mesh = load_rve(&cfg)?;
            let elastic = cfg.material.elastic()?;
            let hardening = cfg.material.hardening_curve()?;
            let schedule = gradients(&cfg)?;
            let out = out_path(cli, "micro.json");
            let mut records = Vec::new();
            if cfg.micro == "fe" {
                let mut model = MicroFe::new(mesh.clone(), elastic, hardening)?;
                for f in &schedule {
                    let step = model.solve_step(f)?;
                    records.push(json!({
                        "newton_iters": step.newton_iters,
                        "response": response_json(&step.response),
                    }));
                }
            } else {
                let options = RomOptions {
                    tol_newton: cfg.tol_newton,
                    constrain_boundary_rotations: cfg.constrain_boundary_rotations,
                    seed: cfg.seed,
                    ..RomOptions::default()
                };
                let mut model = MicroRom::new(mesh.clone(), cfg.k_micro, elastic, hardening, options)?;
                for (i, f) in schedule.iter().enumerate() {
                    let step = model.solve_step(f)?;
                    let vm = broadcast_cluster_von_mises(&model.partition, &step.cluster_stress);
                    write_vtk(
                        &mesh,
                        &[ScalarField { name: "von_mises", values: &vm }],
                        &[],
                        out.with_extension(format!("step{i}.vtk")),
                    )?;
                    records.push(json!({
                        "newton_iters": step.newton_iters,
                        "response": response_json(&step.response),
                    }));
                }
            }
            std::fs::write(&out, serde_json::to_string_pretty(&records)?)?;
            println!("{}", json!({ "steps": records.len(), "out": out }));
            Ok(())
        }
        Command::SolveMacro => {
            let cfg = load_config(cli)?;
            let mesh = load_macro(&cfg)?;
            let ops = element_operators(&mesh);
            let elastic = cfg.material.elastic()?;
            let hardening = cfg.material.hardening_curve()?;
            let prescribed = cfg.macro_constraints(&mesh)?;
            let problem = dca::fem::NewtonProblem {
                mesh: &mesh,
                ops: &ops,
                elastic,
                hardening: &hardening,
                prescribed,
                load_factors: cfg.load_steps.clone(),
                tol_newton: cfg.tol_newton,
                max_newton_iters: cfg.max_newton_iters,
            };
            let part = kmeans(&mesh.nodes, cfg.k_macro, cfg.seed)?;
            let (steps, _, stats) = idcg_newton(&problem, &part, cfg.tol_cg)?;
            let out = out_path(cli, "macro.json");
            let records: Vec<_> = steps
                .iter()
                .zip(&cfg.load_steps)
                .map(|(s, factor)| {
                    json!({
                        "load_factor": factor,
                        "newton_iters": s.newton_iters,
                        "linear_iters": s.linear_iters,
                        "residual": fmt9(s.residual),
                        "reactions": s.reactions.iter()
                            .map(|(d, f)| json!([d, fmt9(*f)])).collect::<Vec<_>>(),
                    })
                })
                .collect();
            std::fs::write(&out, serde_json::to_string_pretty(&records)?)?;
            if let Some(last) = steps.last() {
                let mag: Vec<f64> = (0..mesh.n_nodes())
                    .map(|n| {
                        let u = &last.displacement;
                        (u[3 * n].powi(2) + u[3 * n + 1].powi(2) + u[3 * n + 2].powi(2)).sqrt()
                    })
                    .collect();
                write_vtk(
                    &mesh,
                    &[ScalarField { name: "displacement_magnitude", values: &mag }],
                    &[],
                    out.with_extension("vtk"),
                )?;
            }
            println!(
                "{}",
                json!({ "steps": steps.len(), "yielded_per_iter": stats.yielded_counts, "out": out })
            );
            Ok(())
        }
        Command::Homogenize => {
            let cfg = load_config(cli)?;
            let mesh = load_rve(&cfg)?;
            let elastic = cfg.material.elastic()?;
            let hardening = cfg.material.hardening_curve()?;
            let response = if cfg.micro == "fe" {
                let model = MicroFe::new(mesh, elastic, hardening)?;
                let (step, _) = model.trial_step(&Matrix3::identity())?;
                step.response
            } else {
                let options = RomOptions {
                    constrain_boundary_rotations: cfg.constrain_boundary_rotations,
                    seed: cfg.seed,
                    ..RomOptions::default()
                };
                let model = MicroRom::new(mesh, cfg.k_micro, elastic, hardening, options)?;
                let (step, _) = model.trial_step(&Matrix3::identity())?;
                step.response
            };
            let out = out_path(cli, "tangent.json");
            std::fs::write(&out, serde_json::to_string_pretty(&response_json(&response))?)?;
            println!("{}", json!({ "out": out }));
            Ok(())
        }
        Command::SolveMultiscale => {
            let cfg = load_config(cli)?;
            let mesh = load_macro(&cfg)?;
            let elastic = cfg.material.elastic()?;
            let hardening = cfg.material.hardening_curve()?;
            let rve = load_rve(&cfg)?;
            let point = if cfg.micro == "fe" {
                MicroModel::Fe(MicroFe::new(rve, elastic, hardening)?)
            } else {
                let options = RomOptions {
                    tol_newton: cfg.tol_newton,
                    constrain_boundary_rotations: cfg.constrain_boundary_rotations,
                    seed: cfg.seed,
                    ..RomOptions::default()
                };
                MicroModel::Rom(MicroRom::new(rve, cfg.k_micro, elastic, hardening, options)?)
            };
            let points = vec![point; mesh.n_tets()];
            let prescribed = cfg.macro_constraints(&mesh)?;
            let mut ms = Multiscale::new(
                mesh,
                points,
                prescribed,
                cfg.k_macro,
                cfg.seed,
                cfg.tol_newton,
                cfg.tol_cg,
                cfg.max_newton_iters,
            )?;
            if let Some(cp_path) = &cfg.checkpoint {
                if cp_path.exists() {
                    let text = std::fs::read_to_string(cp_path)?;
                    ms.restore(serde_json::from_str(&text)?)?;
                    eprintln!("resumed at load factor {}", ms.committed_factor());
                }
            }
            let steps = ms.run(&cfg.load_steps)?;
            if let Some(cp_path) = &cfg.checkpoint {
                std::fs::write(cp_path, serde_json::to_string(&ms.checkpoint())?)?;
            }
            let out = out_path(cli, "multiscale.json");
            let records: Vec<_> = steps
                .iter()
                .map(|s| {
                    json!({
                        "load_factor": s.load_factor,
                        "newton_iters": s.newton_iters,
                        "linear_iters": s.linear_iters,
                        "yielded_per_iter": s.yielded_counts,
                        "reactions": s.reactions.iter()
                            .map(|(d, f)| json!([d, fmt9(*f)])).collect::<Vec<_>>(),
                    })
                })
                .collect();
            std::fs::write(&out, serde_json::to_string_pretty(&records)?)?;
            println!("{}", json!({ "steps": steps.len(), "out": out }));
            Ok(())
        }
        Command::CompareFields { a, b } => {
            let fa: Vec<f64> = serde_json::from_str(&std::fs::read_to_string(a)?)?;
            let fb: Vec<f64> = serde_json::from_str(&std::fs::read_to_string(b)?)?;
            let cmp = compare_fields(&fa, &fb)?;
            println!("{}", json!({ "e": fmt9(cmp.e) }));
            Ok(())
        }
    }
}

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use elastodg::config::ProblemConfig;
use elastodg::driver::{convergence_study, observed_order, run, Problem};
use elastodg::mesh::{CellClass, FaceKind};
use elastodg::quadrature::circle_quadrature_study;
use elastodg::{Error, Result};

#[derive(Parser)]
#[command(
    name = "elastodg",
    version,
    about = "Cut-cell DG solver for 2D linear elastodynamics"
)]
struct Cli {
    /// Worker threads; 1 gives bitwise-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation from a config file or preset name.
    Run {
        config: String,
        /// Output directory (default: `out/<name>`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the final time.
        #[arg(long)]
        end: Option<f64>,
        /// Override the grid, e.g. `128,96`.
        #[arg(long, value_delimiter = ',')]
        cells: Option<Vec<usize>>,
    },
    /// Plane-wave convergence study over grids and degrees.
    Converge {
        config: String,
        #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
        grids: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        degrees: Vec<usize>,
        /// Write the rate table here as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Area and circumference of a circle by summed cut-cell quadrature.
    Quadtest {
        #[arg(long, default_value_t = 4)]
        q: usize,
        #[arg(long, value_delimiter = ',', default_value = "8,16,32,64")]
        grids: Vec<usize>,
        #[arg(long, default_value_t = 0.25)]
        radius: f64,
    },
    /// Print the cell classification and element structure of a config.
    Meshdump {
        config: String,
        /// Also list every element.
        #[arg(long)]
        elements: bool,
    },
    /// List the built-in presets.
    Presets,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run {
            config,
            out,
            end,
            cells,
        } => {
            let mut cfg = ProblemConfig::load(&config)?;
            if end.is_some() {
                cfg.time.end = end;
            }
            if let Some(c) = cells {
                let [a, b] = c[..] else {
                    return Err(Error::Config(format!("--cells takes two counts, got {}", c.len())));
                };
                cfg.domain.cells = [a, b];
            }
            let out = out.unwrap_or_else(|| PathBuf::from("out").join(&cfg.name));
            let report = run(&Problem::new(cfg)?, Some(&out))?;
            println!(
                "{}: {} steps to t = {:.6e}, {} elements, energy {:.6e} -> {:.6e}",
                report.name,
                report.steps,
                report.final_time,
                report.elements,
                report.initial_energy,
                report.final_energy
            );
            if let Some((linf, l2)) = report.errors {
                println!("e_linf = {linf:.6e}, e_l2 = {l2:.6e}");
            }
            println!("outputs in {}", out.display());
        }
        Command::Converge {
            config,
            grids,
            degrees,
            csv,
        } => {
            let problem = Problem::new(ProblemConfig::load(&config)?)?;
            let table = convergence_study(&problem, &grids, &degrees)?;
            let text = table.to_csv();
            print!("{text}");
            if let Some(path) = csv {
                elastodg::output::write_text(&path, &text)?;
            }
        }
        Command::Quadtest { q, grids, radius } => {
            let rows = circle_quadrature_study(radius, &grids, q)?;
            println!("cells,area,length,area_error,length_error");
            for r in &rows {
                println!(
                    "{},{:.17e},{:.17e},{:e},{:e}",
                    r.cells, r.area, r.length, r.area_error, r.length_error
                );
            }
            let h: Vec<f64> = rows.iter().map(|r| 1.0 / r.cells as f64).collect();
            let fmt = |o: Option<f64>| o.map_or_else(|| "exact".to_string(), |v| format!("{v:.3}"));
            let ea: Vec<f64> = rows.iter().map(|r| r.area_error).collect();
            let el: Vec<f64> = rows.iter().map(|r| r.length_error).collect();
            println!(
                "order: area {}, length {}",
                fmt(observed_order(&h, &ea)),
                fmt(observed_order(&h, &el))
            );
        }
        Command::Meshdump { config, elements } => {
            let problem = Problem::new(ProblemConfig::load(&config)?)?;
            let cfg = &problem.config;
            let disc = problem.discretization(cfg.domain.cells, cfg.discretization.degree)?;
            print!("{}", mesh_summary(&disc.mesh, elements));
        }
        Command::Presets => {
            for (name, _) in elastodg::config::PRESETS {
                println!("{name}");
            }
        }
    }
    Ok(())
}

fn mesh_summary(mesh: &elastodg::mesh::ImplicitMesh, list: bool) -> String {
    let mut s = String::new();
    let g = &mesh.grid;
    let _ = writeln!(
        s,
        "grid {}x{}, q = {}, cut_q = {}, fbar = {}",
        g.n[0], g.n[1], mesh.q, mesh.cut_q, mesh.fbar
    );
    for (p, phase) in mesh.phases.iter().enumerate() {
        let count = |c: CellClass| mesh.classes[p].iter().filter(|&&k| k == c).count();
        let _ = writeln!(
            s,
            "phase {phase}: entire {}, large {}, small {}, empty {}, volume {:.12e}",
            count(CellClass::Entire),
            count(CellClass::Large),
            count(CellClass::Small),
            count(CellClass::Empty),
            mesh.phase_volume(*phase)
        );
    }
    let merged = mesh.elements.iter().filter(|e| !e.merged.is_empty()).count();
    let _ = writeln!(s, "elements {}, merged {merged}", mesh.elements.len());
    let mut kinds: BTreeMap<String, usize> = BTreeMap::new();
    for f in &mesh.faces {
        let name = match f.kind {
            FaceKind::OuterBoundary(side) => format!("boundary-{}", side.name()),
            FaceKind::Intraphase => "intraphase".into(),
            FaceKind::EmbeddedBoundary => "embedded-boundary".into(),
            FaceKind::Interface => "interface".into(),
            FaceKind::CoarseFine => "coarse-fine".into(),
        };
        *kinds.entry(name).or_default() += 1;
    }
    for (k, n) in kinds {
        let _ = writeln!(s, "faces {k}: {n}");
    }
    if list {
        let _ = writeln!(s, "element,phase,primary,merged,volume");
        for (k, e) in mesh.elements.iter().enumerate() {
            let merged: Vec<String> = e.merged.iter().map(usize::to_string).collect();
            let _ = writeln!(s, "{k},{},{},{},{:e}", e.phase, e.primary, merged.join(" "), e.volume());
        }
    }
    s
}

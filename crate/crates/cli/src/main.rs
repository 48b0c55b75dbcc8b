use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use slitlab::asymptotics::{a_coeff, c_coeff, decompose, predict_multiple, TaylorTable};
use slitlab::experiments::{
    capacity_csv, capacity_sweep, mesh_eigen, plot_svg, reference_tables, resolve_target, run_sweep, spectrum_levels,
    sweep_csv, verify_sweep, CapacityData, ExperimentConfig, ExperimentError, SweepResult,
};
use slitlab::geometry::{generate_mesh, Mesh};

mod presets;

#[derive(Parser, Debug)]
#[command(name = "slitlab", version, about = "Dirichlet eigenvalues of domains with a small removed segment")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config: a TOML file or a built-in preset name.
    #[arg(long, global = true)]
    config: Option<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Override a config value, e.g. `--set mesh.h_max=0.03`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for the sweep.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed of the eigensolver start vectors.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a mesh of the config domain, with the slit at `--eps`.
    Mesh {
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Lowest Dirichlet eigenvalues, from the config or from a mesh file.
    Eigs {
        #[arg(long)]
        mesh: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        /// Fix the slit nodes of the mesh.
        #[arg(long)]
        slit: bool,
        /// Number of mesh levels for Richardson extrapolation (config mode).
        #[arg(long, default_value_t = 1)]
        levels: usize,
    },
    /// Slit capacities over the eps sweep.
    Capacity {
        #[arg(long, value_enum, default_value_t = DataArg::Target)]
        data: DataArg,
    },
    /// Closed-form coefficients C_k and A_{j,k}.
    Ck {
        #[arg(long, default_value_t = 6)]
        max_k: usize,
    },
    /// Decompose the target eigenspace by x1-vanishing order at the slit center.
    Decompose,
    /// Run the eps sweep and write sweep.csv.
    Sweep,
    /// Run the sweep and compare with the predictions.
    Verify,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum DataArg {
    Constant,
    X1,
    Target,
}

enum Failure {
    Validation(String),
    Computation(String),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Computation(e.to_string())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Computation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let c = &cli.common;
    if let Some(n) = c.threads {
        if n == 0 {
            return Err(Failure::Validation("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Computation(e.to_string()))?;
    }
    match &cli.command {
        Command::Ck { max_k } => ck(c, *max_k),
        Command::Eigs { mesh: Some(path), count, slit, .. } => eigs_from_mesh(c, path, count.unwrap_or(6), *slit),
        Command::Eigs { mesh: None, count, levels, .. } => {
            let cfg = load_config(c)?;
            eigs_from_config(c, &cfg, *count, *levels)
        }
        Command::Mesh { eps } => {
            let cfg = load_config(c)?;
            mesh_cmd(c, &cfg, *eps)
        }
        Command::Capacity { data } => {
            let cfg = load_config(c)?;
            capacity_cmd(c, &cfg, *data)
        }
        Command::Decompose => {
            let cfg = load_config(c)?;
            decompose_cmd(c, &cfg)
        }
        Command::Sweep => {
            let cfg = load_config(c)?;
            let sweep = run_sweep(&cfg)?;
            write_sweep(c, &cfg, &sweep)?;
            println!("{} records written to {}", sweep.records.len(), c.out.join("sweep.csv").display());
            Ok(())
        }
        Command::Verify => {
            let cfg = load_config(c)?;
            let sweep = run_sweep(&cfg)?;
            write_sweep(c, &cfg, &sweep)?;
            let report = verify_sweep(&sweep);
            write_atomic(&c.out, "report.json", &report.to_json())?;
            write_atomic(&c.out, "plot.svg", &plot_svg(&sweep, &report))?;
            for chk in &report.checks {
                let branch = chk.branch.map(|b| format!("[{b}]")).unwrap_or_default();
                println!("{:?} {}{branch}: {}", chk.status, chk.check, chk.detail);
            }
            println!("{}", report.tolerance_note);
            Ok(())
        }
    }
}

/// Reads the config, applies `--set` overrides and then `--seed`.
fn load_config(c: &Common) -> Result<ExperimentConfig, Failure> {
    let name = c.config.as_deref().ok_or_else(|| Failure::Validation("--config is required".into()))?;
    let text = if Path::new(name).is_file() {
        fs::read_to_string(name).map_err(|e| Failure::Validation(format!("cannot read config {name}: {e}")))?
    } else if let Some(t) = presets::get(name) {
        t.to_string()
    } else {
        return Err(Failure::Validation(format!(
            "config {name} not found (not a file, and not one of the presets: {})",
            presets::NAMES.join(", ")
        )));
    };
    let mut table: toml::Table =
        toml::from_str(&text).map_err(|e| Failure::Validation(format!("config {name}: {e}")))?;
    for o in &c.overrides {
        apply_override(&mut table, o).map_err(Failure::Validation)?;
    }
    if let Some(seed) = c.seed {
        let solver = table.entry("solver").or_insert_with(|| toml::Value::Table(toml::Table::new()));
        match solver {
            toml::Value::Table(t) => {
                let seed = i64::try_from(seed).map_err(|_| Failure::Validation("--seed too large".into()))?;
                t.insert("seed".into(), toml::Value::Integer(seed));
            }
            _ => return Err(Failure::Validation("`solver` must be a table".into())),
        }
    }
    Ok(ExperimentConfig::from_table(table)?)
}

/// `a.b.c=value`; the value is parsed as TOML and falls back to a string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), String> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| format!("override {spec:?} is not KEY=VALUE"))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(format!("override key {key:?} is malformed"));
    }
    let value = parse_value(raw.trim());
    let mut cur = table;
    for (i, part) in path.iter().enumerate() {
        if i + 1 == path.len() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        let next = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match next {
            toml::Value::Table(t) => t,
            _ => return Err(format!("override {key:?}: `{part}` is not a table")),
        };
    }
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn write_atomic(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    let io = |e: std::io::Error| Failure::Computation(format!("writing {}: {e}", dir.join(name).display()));
    fs::create_dir_all(dir).map_err(|e| Failure::Validation(format!("output directory {}: {e}", dir.display())))?;
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(contents.as_bytes()).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, dir.join(name)).map_err(io)?;
    Ok(())
}

fn write_config(c: &Common, cfg: &ExperimentConfig) -> Result<(), Failure> {
    write_atomic(&c.out, "config.toml", &cfg.to_toml_string())
}

fn write_sweep(c: &Common, cfg: &ExperimentConfig, sweep: &SweepResult) -> Result<(), Failure> {
    write_config(c, cfg)?;
    write_atomic(&c.out, "sweep.csv", &sweep_csv(sweep))?;
    let json = serde_json::to_string_pretty(sweep).map_err(|e| Failure::Computation(e.to_string()))?;
    write_atomic(&c.out, "sweep.json", &json)
}

fn ck(c: &Common, max_k: usize) -> Result<(), Failure> {
    let mut csv = String::from("k,C_k\n");
    println!("{:>3} {:>24}", "k", "C_k");
    for k in 0..=max_k {
        println!("{k:>3} {:>24.16e}", c_coeff(k));
        csv.push_str(&format!("{k},{:.16e}\n", c_coeff(k)));
    }
    let mut a = String::from("j,k,A_jk\n");
    for k in 0..=max_k {
        for j in 0..=k {
            a.push_str(&format!("{j},{k},{:.16e}\n", a_coeff(j, k)));
        }
    }
    write_atomic(&c.out, "ck.csv", &csv)?;
    write_atomic(&c.out, "ajk.csv", &a)
}

fn mesh_cmd(c: &Common, cfg: &ExperimentConfig, eps: Option<f64>) -> Result<(), Failure> {
    let slit = eps.map(|e| cfg.slit_at(e));
    if let Some(s) = &slit {
        s.check_margin(&cfg.domain).map_err(|e| Failure::Validation(format!("--eps: {e}")))?;
    }
    let mesh = generate_mesh(&cfg.domain, slit.as_ref(), &cfg.mesh).map_err(|e| Failure::Computation(e.to_string()))?;
    write_config(c, cfg)?;
    write_atomic(&c.out, "mesh.txt", &mesh.to_text())?;
    println!(
        "{} vertices, {} triangles, {} slit nodes, h_max {:.16e}",
        mesh.num_nodes(),
        mesh.triangles.len(),
        mesh.slit_nodes.len(),
        mesh.h_max
    );
    Ok(())
}

fn eigen_table(values: &[f64], residuals: &[f64]) -> String {
    let mut s = String::from("index,eigenvalue,residual\n");
    for (i, (v, r)) in values.iter().zip(residuals).enumerate() {
        s.push_str(&format!("{},{v:.16e},{r:.16e}\n", i + 1));
    }
    s
}

fn eigs_from_mesh(c: &Common, path: &Path, count: usize, slit: bool) -> Result<(), Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Validation(format!("cannot read mesh {}: {e}", path.display())))?;
    let mesh = Mesh::from_text(&text).map_err(|e| Failure::Validation(format!("mesh {}: {e}", path.display())))?;
    let seed = c.seed.unwrap_or(slitlab::eigensolve::EigenOptions::default().seed);
    let e = mesh_eigen(&mesh, count, slit, seed)?;
    for (i, v) in e.eigenvalues.iter().enumerate() {
        println!("{:>4} {v:.16e}", i + 1);
    }
    write_atomic(&c.out, "eigs.csv", &eigen_table(&e.eigenvalues, &e.residuals))
}

fn eigs_from_config(c: &Common, cfg: &ExperimentConfig, count: Option<usize>, levels: usize) -> Result<(), Failure> {
    let count = match count {
        Some(n) => n,
        None => {
            let t = resolve_target(cfg)?;
            t.index + t.multiplicity - 1
        }
    };
    if levels == 0 {
        return Err(Failure::Validation("--levels must be positive".into()));
    }
    let s = spectrum_levels(&cfg.domain, None, &cfg.mesh, count, levels, cfg.solver.seed)?;
    let mut csv = String::from("level,h_max,nodes,index,eigenvalue\n");
    for (l, vals) in s.eigenvalues.iter().enumerate() {
        for (i, v) in vals.iter().enumerate() {
            csv.push_str(&format!("{l},{:.16e},{},{},{v:.16e}\n", s.h_max[l], s.nodes[l], i + 1));
        }
    }
    if let Some(ext) = &s.extrapolated {
        for (i, v) in ext.iter().enumerate() {
            csv.push_str(&format!("ext,,,{},{v:.16e}\n", i + 1));
        }
    }
    let shown = s.extrapolated.as_ref().unwrap_or(&s.eigenvalues[0]);
    for (i, v) in shown.iter().enumerate() {
        println!("{:>4} {v:.16e}", i + 1);
    }
    write_config(c, cfg)?;
    write_atomic(&c.out, "eigs.csv", &csv)
}

fn capacity_cmd(c: &Common, cfg: &ExperimentConfig, data: DataArg) -> Result<(), Failure> {
    let data = match data {
        DataArg::Constant => CapacityData::Constant,
        DataArg::X1 => CapacityData::X1,
        DataArg::Target => CapacityData::Target,
    };
    let recs = capacity_sweep(cfg, data)?;
    for r in &recs {
        println!("eps {:.16e} cap {:.16e} err {:.3e}", r.eps, r.cap, r.err);
    }
    write_config(c, cfg)?;
    write_atomic(&c.out, "capacity.csv", &capacity_csv(&recs))
}

fn decompose_cmd(c: &Common, cfg: &ExperimentConfig) -> Result<(), Failure> {
    let target = resolve_target(cfg)?;
    let sweep = SweepResult { config: cfg.clone(), target, records: Vec::new() };
    let tables = reference_tables(&sweep)?;
    let n = tables.len();
    let gram: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let comp = |e: slitlab::asymptotics::AsymptoticsError| Failure::Computation(e.to_string());
    let dec = decompose(&tables, &gram).map_err(comp)?;
    let out_tables: Vec<TaylorTable> = dec.tables(&tables);
    let preds = predict_multiple(&dec, &out_tables).map_err(comp)?;
    let labels: Vec<String> = sweep.target.reference.iter().flat_map(|r| r.modes.iter().map(|m| m.label())).collect();
    println!("modes: {}", labels.join(", "));
    for ((k, v), p) in dec.kappa().iter().zip(dec.basis()).zip(&preds) {
        let coeffs: Vec<String> = v.iter().map(|x| format!("{x:.16e}")).collect();
        println!("kappa1 {k}: [{}] -> {}", coeffs.join(", "), p.description);
    }
    let json = serde_json::json!({
        "modes": labels,
        "kappa1": dec.kappa().iter().map(|k| k.to_string()).collect::<Vec<_>>(),
        "decomposition": dec,
        "predictions": preds,
    });
    write_config(c, cfg)?;
    write_atomic(&c.out, "decompose.json", &serde_json::to_string_pretty(&json).expect("json"))
}

use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use somatlas::analysis::{
    AnalysisRequest, DistributionRequest, ForcingTimelineRequest, PairRequest, RunTimelineRequest, Selection,
    SideBySideRequest,
};
use somatlas::cluster::ClusterParams;
use somatlas::compare::{BootstrapParams, GroundCost};
use somatlas::data::{
    flatten_samples, generate_synthetic_ensemble, load_counties, save_ensemble, synthetic_counties, MonthFilter,
};
use somatlas::distribution::KdeParams;
use somatlas::embed::{embed_grid, MdeConfig};
use somatlas::project::{load_project, save_project, Project, ProjectSettings};
use somatlas::som::{load_checkpoint, metrics, save_checkpoint, train_som, SomConfig};
use somatlas_cli::{llm_client, sweep, synthetic_spec, write_sweep_csv, CliError, Result};
use somatlas_service::{open_dataset, AppState, Workspace};

#[derive(Parser)]
#[command(name = "somatlas", version, about = "SOM-based abstraction of climate ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic two-archetype ensemble and a matching county file.
    Synth(SynthArgs),
    /// Train a SOM and write its checkpoint plus a metrics JSON.
    Train(TrainArgs),
    /// Train over a kR × kS grid and print quality metrics as CSV.
    Sweep(SweepArgs),
    /// Create or inspect project files.
    #[command(subcommand)]
    Project(ProjectCommand),
    /// Run one analysis against a project and write the response JSON.
    Analyze(AnalyzeArgs),
    /// Serve the HTTP API for a project.
    Serve(ServeArgs),
}

fn parse_ks(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("kS must lie in (0, 1], got {v}"))
    }
}

fn parse_kr(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("kR must be positive, got {v}"))
    }
}

fn parse_months(s: &str) -> std::result::Result<MonthFilter, String> {
    s.parse().map_err(|e| format!("{e}"))
}

#[derive(Args)]
struct SynthArgs {
    /// Output ensemble directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    rows: usize,
    #[arg(long, default_value_t = 8)]
    cols: usize,
    #[arg(long, default_value_t = 30)]
    years: usize,
    #[arg(long, default_value_t = 4)]
    gcms: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct SomArgs {
    #[arg(long, default_value_t = 30)]
    rows: usize,
    #[arg(long, default_value_t = 30)]
    cols: usize,
    /// Training steps; defaults to 20 passes over the samples.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Months to train on, e.g. `all`, `1,2,12` or `10-5`.
    #[arg(long, default_value = "all", value_parser = parse_months)]
    months: MonthFilter,
}

#[derive(Args)]
struct TrainArgs {
    /// Ensemble directory.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Metrics JSON path; defaults to the checkpoint path with `.metrics.json`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long = "kR", default_value_t = 0.03, value_parser = parse_kr)]
    k_r: f64,
    #[arg(long = "kS", default_value_t = 0.2, value_parser = parse_ks)]
    k_s: f64,
    #[command(flatten)]
    som: SomArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long = "kR-list", value_delimiter = ',', required = true, value_parser = parse_kr)]
    k_r: Vec<f64>,
    #[arg(long = "kS-list", value_delimiter = ',', required = true, value_parser = parse_ks)]
    k_s: Vec<f64>,
    /// Trainings run concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    som: SomArgs,
}

#[derive(Subcommand)]
enum ProjectCommand {
    /// Create a project from a dataset and, optionally, a checkpoint.
    Init {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        som: Option<PathBuf>,
        #[arg(long)]
        counties: Option<PathBuf>,
        #[arg(long, default_value = "all", value_parser = parse_months)]
        months: MonthFilter,
    },
    /// Print a project summary.
    Info { path: PathBuf },
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    project: PathBuf,
    /// Output path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    kind: AnalyzeKind,
}

#[derive(Args)]
struct PairArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    from: Vec<String>,
    #[arg(long, value_delimiter = ',', required = true)]
    to: Vec<String>,
    #[arg(long, default_value = "all")]
    months: String,
    /// Months of the `to` side; defaults to `--months`.
    #[arg(long)]
    to_months: Option<String>,
}

impl PairArgs {
    fn selections(&self) -> (Selection, Selection) {
        let to_months = self.to_months.as_deref().unwrap_or(&self.months);
        (
            Selection::new(self.from.clone(), &self.months),
            Selection::new(self.to.clone(), to_months),
        )
    }
}

#[derive(Args)]
struct BootstrapArgs {
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum)]
    ground: Option<Ground>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Ground {
    Euclidean,
    SquaredEuclidean,
}

impl BootstrapArgs {
    fn params(&self) -> BootstrapParams {
        BootstrapParams {
            k: self.k,
            n: self.n,
            seed: self.seed,
            ground: match self.ground {
                Some(Ground::Euclidean) => GroundCost::Euclidean,
                Some(Ground::SquaredEuclidean) => GroundCost::SquaredEuclidean,
                None => BootstrapParams::default().ground,
            },
        }
    }
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long, default_value_t = 3)]
    min_cluster_size: usize,
    #[arg(long, default_value_t = 2)]
    min_samples: usize,
    /// Inline each cluster's aggregate payload.
    #[arg(long)]
    include_aggregates: bool,
}

impl ClusterArgs {
    fn params(&self) -> ClusterParams {
        ClusterParams {
            min_cluster_size: self.min_cluster_size,
            min_samples: self.min_samples,
        }
    }
}

#[derive(Subcommand)]
enum AnalyzeKind {
    Distribution {
        #[arg(long, value_delimiter = ',', required = true)]
        members: Vec<String>,
        #[arg(long, default_value = "all")]
        months: String,
        #[arg(long, default_value_t = 128)]
        grid: usize,
    },
    SideBySide {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long, default_value_t = 128)]
        grid: usize,
    },
    VectorField {
        #[command(flatten)]
        pair: PairArgs,
        #[command(flatten)]
        bootstrap: BootstrapArgs,
    },
    Transitions {
        #[command(flatten)]
        pair: PairArgs,
        #[command(flatten)]
        bootstrap: BootstrapArgs,
    },
    /// Monthly clustering of runs.
    Runs {
        /// Empty means every member.
        #[arg(long, value_delimiter = ',')]
        members: Vec<String>,
        #[arg(long, default_value = "all")]
        months: String,
        #[command(flatten)]
        cluster: ClusterArgs,
    },
    /// Monthly clustering of per-GCM forcing fields.
    Forcings {
        #[arg(long)]
        ssp: String,
        /// Empty means every GCM with historical and SSP runs.
        #[arg(long, value_delimiter = ',')]
        gcms: Vec<String>,
        #[arg(long, default_value = "all")]
        months: String,
        #[command(flatten)]
        bootstrap: BootstrapArgs,
        #[command(flatten)]
        cluster: ClusterArgs,
    },
    /// A request as JSON, tagged by `kind`.
    Request { file: PathBuf },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    project: PathBuf,
    /// Overrides the `PORT` environment variable (default 8080).
    #[arg(long)]
    port: Option<u16>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Use the offline LLM stub even when a key is configured.
    #[arg(long)]
    llm_stub: bool,
}

fn som_config(som: &SomArgs, k_r: f64, k_s: f64) -> SomConfig {
    SomConfig {
        rows: som.rows,
        cols: som.cols,
        k_r,
        k_s,
        iterations: som.iters,
        seed: som.seed,
        ..Default::default()
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(CliError::io(path))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = synthetic_spec(a.rows, a.cols, a.years, a.gcms, a.noise, a.seed);
    let dataset = generate_synthetic_ensemble(&spec, a.seed)?;
    save_ensemble(&dataset, &a.out)?;
    let counties = a.out.join("counties.geojson");
    fs::write(&counties, synthetic_counties(&dataset.grid).to_geojson()).map_err(CliError::io(&counties))?;
    println!("wrote {} members to {}", dataset.members.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let config = som_config(&a.som, a.k_r, a.k_s);
    config.validate()?;
    println!("{}", serde_json::to_string(&config)?);
    let dataset = open_dataset(&a.data)?;
    let samples = flatten_samples(&dataset, &a.som.months)?;
    let grid = train_som(&samples, &config, None)?;
    save_checkpoint(&grid, &a.out)?;
    let m = metrics(&grid, &samples)?;
    let path = a.metrics.unwrap_or_else(|| a.out.with_extension("metrics.json"));
    write_json(&path, &m)?;
    println!("{}", serde_json::to_string(&m)?);
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let dataset = open_dataset(&a.data)?;
    let samples = flatten_samples(&dataset, &a.som.months)?;
    let base = som_config(&a.som, 0.03, 0.2);
    let rows = sweep(&samples, &base, &a.k_r, &a.k_s, a.jobs)?;
    match &a.out {
        Some(p) => write_sweep_csv(&rows, fs::File::create(p).map_err(CliError::io(p))?),
        None => write_sweep_csv(&rows, std::io::stdout().lock()),
    }
}

fn absolute(p: &Path) -> Result<PathBuf> {
    fs::canonicalize(p).map_err(CliError::io(p))
}

fn cmd_project(c: ProjectCommand) -> Result<()> {
    match c {
        ProjectCommand::Init {
            data,
            out,
            som,
            counties,
            months,
        } => {
            let dataset = open_dataset(&data)?;
            if let Some(c) = &counties {
                load_counties(c)?;
            }
            let mut project = Project::new(ProjectSettings {
                dataset: Some(absolute(&data)?),
                counties: counties.as_deref().map(absolute).transpose()?,
                training_months: months,
                ..Default::default()
            });
            if let Some(path) = som {
                let grid = load_checkpoint(&path)?;
                if grid.dim != dataset.num_cells() {
                    return Err(CliError::Usage(format!(
                        "checkpoint has {} cells, dataset has {}",
                        grid.dim,
                        dataset.num_cells()
                    )));
                }
                project.settings.som = grid.config.clone();
                project.embedding = Some(embed_grid(&grid, &MdeConfig::default())?);
                project.som = Some(grid);
            }
            save_project(&project, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        ProjectCommand::Info { path } => {
            let p = load_project(&path)?;
            let info = serde_json::json!({
                "settings": p.settings,
                "has_som": p.som.is_some(),
                "nodes": p.som.as_ref().map(|g| g.num_nodes()),
                "annotations": p.annotations.len(),
            });
            println!("{}", serde_json::to_string_pretty(&info)?);
            Ok(())
        }
    }
}

fn analysis_request(kind: AnalyzeKind) -> Result<AnalysisRequest> {
    Ok(match kind {
        AnalyzeKind::Distribution { members, months, grid } => AnalysisRequest::Distribution(DistributionRequest {
            selection: Selection::new(members, &months),
            kde: KdeParams { grid, ..Default::default() },
        }),
        AnalyzeKind::SideBySide { pair, grid } => {
            let (from, to) = pair.selections();
            AnalysisRequest::SideBySide(SideBySideRequest {
                from,
                to,
                kde: KdeParams { grid, ..Default::default() },
            })
        }
        AnalyzeKind::VectorField { pair, bootstrap } => {
            let (from, to) = pair.selections();
            AnalysisRequest::VectorField(PairRequest {
                from,
                to,
                bootstrap: bootstrap.params(),
            })
        }
        AnalyzeKind::Transitions { pair, bootstrap } => {
            let (from, to) = pair.selections();
            AnalysisRequest::Transitions(PairRequest {
                from,
                to,
                bootstrap: bootstrap.params(),
            })
        }
        AnalyzeKind::Runs { members, months, cluster } => AnalysisRequest::RunTimeline(RunTimelineRequest {
            members,
            months,
            cluster: cluster.params(),
            include_aggregates: cluster.include_aggregates,
        }),
        AnalyzeKind::Forcings {
            ssp,
            gcms,
            months,
            bootstrap,
            cluster,
        } => AnalysisRequest::ForcingTimeline(ForcingTimelineRequest {
            gcms,
            ssp,
            months,
            bootstrap: bootstrap.params(),
            cluster: cluster.params(),
            include_aggregates: cluster.include_aggregates,
        }),
        AnalyzeKind::Request { file } => {
            let text = fs::read_to_string(&file).map_err(CliError::io(&file))?;
            serde_json::from_str(&text)?
        }
    })
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<()> {
    let req = analysis_request(a.kind)?;
    let ws = Workspace::open(&a.project)?;
    let bytes = ws.analyze(&req)?;
    match &a.out {
        Some(p) => fs::write(p, &bytes).map_err(CliError::io(p)),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(&bytes).and_then(|_| out.flush()).map_err(CliError::io(Path::new("<stdout>")))
        }
    }
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let port = match a.port {
        Some(p) => p,
        None => match std::env::var("PORT") {
            Ok(v) => v.parse().map_err(|_| CliError::Usage(format!("invalid PORT {v}")))?,
            Err(_) => 8080,
        },
    };
    let addr: SocketAddr = format!("{}:{port}", a.host)
        .parse()
        .map_err(|e| CliError::Usage(format!("invalid address: {e}")))?;
    let state = AppState::new(Workspace::open(&a.project)?, llm_client(a.llm_stub));
    let rt = tokio::runtime::Runtime::new().map_err(CliError::io(Path::new("<runtime>")))?;
    rt.block_on(somatlas_service::serve(state, addr)).map_err(CliError::io(Path::new("<socket>")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Project(c) => cmd_project(c),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Serve(a) => cmd_serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let envelope = serde_json::to_string(&e.envelope()).unwrap_or_else(|_| e.to_string());
            eprintln!("{envelope}");
            ExitCode::FAILURE
        }
    }
}

//! Command-line front end: fit point clouds, recover hierarchies, sample
//! surfaces, generate synthetic fixtures and run benchmark sweeps.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sqrec::bench::{self, ExperimentKind, SyntheticSpec};
use sqrec::ems::{self, AreaMode, FitConfig};
use sqrec::error::Error;
use sqrec::geometry::{sample_surface_equidistant, PointCloud, Superquadric};
use sqrec::hier::{self, ClusterRadius, HierConfig};
use sqrec::io::{self, CloudFormat, ResultDocument, SqParams};
use sqrec::math::Pose;

#[derive(Parser)]
#[command(name = "sqrec", version, about = "Superquadric recovery from point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct FitFlags {
    /// RNG seed for all stochastic steps
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Prior outlier probability of the Gaussian-uniform model
    #[arg(long = "w-o", default_value_t = 0.1)]
    w_o: f64,
    /// Total EM iteration budget
    #[arg(long = "max-iters", default_value_t = 100)]
    max_iters: usize,
    /// Relative NLL tolerance for convergence
    #[arg(long = "rel-tol", default_value_t = 1e-6)]
    rel_tol: f64,
    /// Maximum accepted switches
    #[arg(long = "max-switches", default_value_t = 4)]
    max_switches: usize,
    /// Surface-area evaluation: fast (bilinear corner blend) or quadrature
    #[arg(long = "area-mode", default_value = "fast", value_parser = parse_area_mode)]
    area_mode: AreaMode,
}

fn parse_area_mode(s: &str) -> Result<AreaMode, String> {
    match s {
        "fast" => Ok(AreaMode::Fast),
        "quadrature" => Ok(AreaMode::Quadrature),
        other => Err(format!("unknown area mode '{other}' (expected fast or quadrature)")),
    }
}

fn parse_cluster_radius(s: &str) -> Result<ClusterRadius, String> {
    if s == "auto" {
        return Ok(ClusterRadius::Auto);
    }
    let r: f64 = s.parse().map_err(|_| format!("invalid cluster radius '{s}'"))?;
    if r > 0.0 && r.is_finite() {
        Ok(ClusterRadius::Fixed(r))
    } else {
        Err(format!("cluster radius must be positive, got '{s}'"))
    }
}

impl FitFlags {
    fn to_config(&self) -> FitConfig {
        FitConfig {
            max_em_iters: self.max_iters,
            rel_tol_nll: self.rel_tol,
            max_switches: self.max_switches,
            w_o: self.w_o,
            area_mode: self.area_mode,
            seed: self.seed,
            ..FitConfig::default()
        }
    }
}

#[derive(Args, Clone)]
struct IoFlags {
    /// Cloud format; inferred from the file extension when omitted
    #[arg(long, value_parser = CloudFormat::from_str)]
    format: Option<CloudFormat>,
    /// Output path (standard output when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a single superquadric to a point cloud
    Fit {
        input: PathBuf,
        #[command(flatten)]
        fit: FitFlags,
        #[command(flatten)]
        io: IoFlags,
        /// Include per-point inlier probabilities in the document
        #[arg(long)]
        weights: bool,
    },
    /// Recover a hierarchy of superquadrics
    FitMulti {
        input: PathBuf,
        #[command(flatten)]
        fit: FitFlags,
        #[command(flatten)]
        io: IoFlags,
        #[arg(long = "max-layers", default_value_t = 3)]
        max_layers: usize,
        /// Minimum cluster size carried to the next layer
        #[arg(long, default_value_t = 60)]
        prune: usize,
        /// Euclidean clustering radius, or "auto"
        #[arg(long = "cluster-radius", default_value = "auto",
              value_parser = parse_cluster_radius)]
        cluster_radius: ClusterRadius,
    },
    /// Sample a superquadric surface to a cloud file
    Sample {
        /// Result document to sample; omit to use the inline parameters
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        spacing: f64,
        #[arg(long, default_value_t = 1.0)]
        eps1: f64,
        #[arg(long, default_value_t = 1.0)]
        eps2: f64,
        #[arg(long, default_value_t = 1.0)]
        ax: f64,
        #[arg(long, default_value_t = 1.0)]
        ay: f64,
        #[arg(long, default_value_t = 1.0)]
        az: f64,
        #[command(flatten)]
        io: IoFlags,
    },
    /// Generate seeded synthetic ground-truth clouds
    Synth {
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.2)]
        spacing: f64,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = CloudFormat::from_str, default_value = "xyz")]
        format: CloudFormat,
    },
    /// Run a corruption-robustness benchmark sweep
    Bench {
        /// Experiment kind: partial, outlier or noise
        kind: String,
        /// Comma-separated corruption levels
        levels: String,
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[command(flatten)]
        fit: FitFlags,
        /// Output directory for report.json and report.csv
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("SQ_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 3,
        Error::Parse { .. } => 4,
        _ => 5,
    }
}

fn emit(out: &Option<PathBuf>, content: &str) -> Result<(), Error> {
    match out {
        Some(path) => std::fs::write(path, content).map_err(Error::from),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(content.as_bytes())?;
            Ok(())
        }
    }
}

fn read_cloud(path: &Path, format: Option<CloudFormat>) -> Result<PointCloud, Error> {
    let format = format.unwrap_or_else(|| CloudFormat::from_path(path));
    let file = std::fs::File::open(path)?;
    io::read_cloud(file, format)
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Fit { input, fit, io: ioflags, weights } => {
            let cloud = read_cloud(&input, ioflags.format)?;
            let result = ems::ems_fit(&cloud, &fit.to_config())?;
            let doc = ResultDocument::from_fit(&result, weights);
            emit(&ioflags.out, &(doc.to_json() + "\n"))
        }
        Command::FitMulti { input, fit, io: ioflags, max_layers, prune, cluster_radius } => {
            let cloud = read_cloud(&input, ioflags.format)?;
            let cfg = HierConfig {
                max_layers,
                prune_min_points: prune,
                cluster_radius,
                fit: fit.to_config(),
                ..HierConfig::default()
            };
            let graph = hier::recover_hierarchy(&cloud, &cfg)?;
            let labels = hier::segment_points(&graph, &cloud);
            let doc = ResultDocument::from_hierarchy(&graph, labels);
            emit(&ioflags.out, &(doc.to_json() + "\n"))
        }
        Command::Sample { input, spacing, eps1, eps2, ax, ay, az, io: ioflags } => {
            let sq = match input {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)?;
                    ResultDocument::from_json(&text)?.superquadric.to_superquadric()?
                }
                None => Superquadric::new(eps1, eps2, ax, ay, az, Pose::IDENTITY)?,
            };
            let samples = sample_surface_equidistant(&sq, spacing)?;
            let format = ioflags.format.unwrap_or_else(|| {
                ioflags.out.as_deref().map(CloudFormat::from_path).unwrap_or(CloudFormat::XyzAscii)
            });
            let mut buf = Vec::new();
            io::write_cloud(&mut buf, &samples.points, format)?;
            emit(&ioflags.out, std::str::from_utf8(&buf).expect("ascii output"))
        }
        Command::Synth { count, seed, spacing, out, format } => {
            std::fs::create_dir_all(&out)?;
            let spec = SyntheticSpec { count, spacing, seed, ..SyntheticSpec::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in 0..count {
                let truth = bench::random_superquadric(&spec, &mut rng);
                let samples = sample_surface_equidistant(&truth, spacing)?;
                let ext = match format {
                    CloudFormat::XyzAscii => "xyz",
                    CloudFormat::PlyAscii => "ply",
                };
                let cloud_path = out.join(format!("cloud_{i:03}.{ext}"));
                let mut buf = Vec::new();
                io::write_cloud(&mut buf, &samples.points, format)?;
                std::fs::write(cloud_path, buf)?;
                let truth_json = serde_json::to_string_pretty(&SqParams::from_superquadric(
                    &truth,
                ))
                .expect("params serialize");
                std::fs::write(out.join(format!("truth_{i:03}.json")), truth_json + "\n")?;
            }
            Ok(())
        }
        Command::Bench { kind, levels, instances, fit, out } => {
            let kind: ExperimentKind = kind
                .parse()
                .map_err(|e: String| Error::InvalidParam(e))?;
            let levels: Vec<f64> = levels
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::InvalidParam(format!("invalid level '{t}'")))
                })
                .collect::<Result<_, _>>()?;
            if levels.is_empty() {
                return Err(Error::InvalidParam("no levels given".into()));
            }
            let spec = SyntheticSpec { seed: fit.seed, ..SyntheticSpec::default() };
            let report = bench::run_experiment(
                kind,
                &levels,
                instances,
                &spec,
                &fit.to_config(),
                0.02,
                0.02,
            );
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir)?;
                    let json = serde_json::to_string_pretty(&report)
                        .expect("report serializes");
                    std::fs::write(dir.join("report.json"), json + "\n")?;
                    std::fs::write(dir.join("report.csv"), report.to_csv())?;
                    Ok(())
                }
                None => {
                    let json = serde_json::to_string_pretty(&report)
                        .expect("report serializes");
                    emit(&None, &(json + "\n"))
                }
            }
        }
    }
}

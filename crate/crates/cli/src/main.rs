//! `marsnet`: batch pipeline from LiDAR footprints and satellite rasters to
//! wall-to-wall canopy dominant-height maps.

mod commands;
mod failure;
mod logging;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use failure::Failure;

#[derive(Parser, Debug)]
#[command(name = "marsnet", version, about = "Canopy dominant-height mapping pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
pub struct Global {
    /// TOML run configuration; sections per subcommand, unknown keys rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic world: source imagery, stacks, footprints and plots.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
    },
    /// Apply the quality, sensitivity, NDVI and forest-mask footprint filters.
    FilterGedi {
        #[arg(long)]
        footprints: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ndvi: Option<PathBuf>,
        #[arg(long)]
        forest_mask: Option<PathBuf>,
        /// Drop-reason report; defaults to `<out>.report.json`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Fit the RH98 to dominant-height calibration and label the footprints.
    Calibrate {
        #[arg(long)]
        plots: PathBuf,
        #[arg(long)]
        footprints: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Derive the four modality stacks from source imagery.
    BuildStack {
        #[arg(long)]
        sources: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// SAR speckle filter radius in meters (0 disables).
        #[arg(long)]
        speckle_radius: Option<f64>,
    },
    /// Rasterize labels, tile into patches, split and fit standardization.
    Patchify {
        #[arg(long)]
        stacks: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a patch dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Predict a wall-to-wall height map.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        stacks: PathBuf,
        #[arg(long)]
        forest_mask: PathBuf,
        /// Standardization statistics; defaults to `norm_stats.json` beside the checkpoint.
        #[arg(long)]
        norm_stats: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a map against footprints, or a checkpoint on the test patches.
    Evaluate {
        #[arg(long, requires = "labels", conflicts_with_all = ["checkpoint", "dataset"])]
        map: Option<PathBuf>,
        #[arg(long, requires = "map")]
        labels: Option<PathBuf>,
        #[arg(long, requires = "dataset")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score every ablation variant on one split.
    Ablate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Binned height distributions of two maps, as a table and a bar chart.
    Histogram {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out_csv: PathBuf,
        #[arg(long)]
        out_png: PathBuf,
        #[arg(long)]
        bin_width: Option<f64>,
    },
}

#[derive(Args, Debug, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Encoder stage widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return report(Failure::Input(e.to_string().trim().replace('\n', " "))),
    };
    logging::init();
    match commands::run(&cli.global, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> ExitCode {
    eprintln!("{}", f.to_json_line());
    ExitCode::from(f.exit_code())
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowdistill::pipeline::DistillMode;

mod commands;

#[derive(Parser)]
#[command(name = "flowdistill", version, about = "Parser-free try-on training with adjustable distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Key-value configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the parser-based tutor network.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to write (default: `out` key, else `teacher.ckpt`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-epoch loss log (default: checkpoint path with a `.log` extension).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the parser-free student against a trained tutor.
    TrainStudent {
        #[command(flatten)]
        common: Common,
        /// Tutor checkpoint (default: `teacher` key).
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Overrides the `distill` key.
        #[arg(long, value_parser = parse_mode)]
        distill: Option<DistillMode>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Dress a person image in a garment image with a trained student.
    Infer {
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        person: PathBuf,
        #[arg(long)]
        clothes: PathBuf,
        /// Output image; `.png` writes PNG, anything else binary PPM.
        #[arg(long)]
        out: PathBuf,
        /// Also write the warped garment next to the output.
        #[arg(long)]
        dump_warp: bool,
    },
    /// Write a synthetic dataset as images plus a manifest.
    MakeDataset {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<DistillMode, String> {
    s.parse().map_err(|e: flowdistill::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainTeacher { common, out, log } => commands::train_teacher(&common.config, common.seed, out, log),
        Command::TrainStudent {
            common,
            teacher,
            distill,
            out,
            log,
        } => commands::train_student(&common.config, common.seed, teacher, distill, out, log),
        Command::Infer {
            student,
            person,
            clothes,
            out,
            dump_warp,
        } => commands::infer(&student, &person, &clothes, &out, dump_warp),
        Command::MakeDataset { common, out } => commands::make_dataset(&common.config, common.seed, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("flowdistill: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

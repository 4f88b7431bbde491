// SPDX-License-Identifier: MIT OR Apache-2.0

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::*;

/// Typographic attention circuits in ViT encoders: data, scores, circuits,
/// probes and sink analysis.
#[derive(Parser, Debug)]
#[command(name = "typolens", version)]
struct Cli {
    /// Directory for reports and generated artifacts.
    #[arg(long, global = true, env = "TYPOLENS_OUT", default_value = "typolens-out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic clean/typographic dataset pair.
    GenData(GenDataArgs),
    /// Generate a planted-circuit model and its class prototypes.
    GenPlanted(GenPlantedArgs),
    /// Typographic attention score of every head.
    Score(ScoreArgs),
    /// Linear probes at every capture point.
    Probe(ProbeArgs),
    /// Greedy circuit search under a control-accuracy budget.
    BuildCircuit(BuildCircuitArgs),
    /// Zero-shot accuracy with and without a circuit ablated.
    AblateEval(AblateEvalArgs),
    /// Zero-shot behaviour as the circuit's cls attention is forced to α.
    AlphaSweep(AlphaSweepArgs),
    /// Intrinsic dimensionality along the residual stream.
    Id(IdArgs),
    /// Spatial attention norm of one head as a clean/typo detector.
    SinkRoc(SinkRocArgs),
    /// Write weights plus a circuit sidecar.
    ExportDyslexic(ExportArgs),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    std::fs::create_dir_all(&cli.out)?;
    let out = cli.out.as_path();
    match cli.command {
        Command::GenData(a) => gen_data(out, a),
        Command::GenPlanted(a) => gen_planted(out, a),
        Command::Score(a) => score(out, a),
        Command::Probe(a) => probe(out, a),
        Command::BuildCircuit(a) => build_circuit(out, a),
        Command::AblateEval(a) => ablate_eval(out, a),
        Command::AlphaSweep(a) => alpha_sweep(out, a),
        Command::Id(a) => id(out, a),
        Command::SinkRoc(a) => sink_roc(out, a),
        Command::ExportDyslexic(a) => export_dyslexic(out, a),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{EvalArgs, GenDataArgs, RelabelArgs, ReplayArgs, SweepArgs, TrainHlArgs, TrainSkillsArgs};

/// Discrete diffusion skills: offline skill discovery and hierarchical control.
#[derive(Debug, Parser)]
#[command(name = "dds", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a scripted offline dataset.
    GenData(GenDataArgs),
    /// Train encoder, codebook and diffusion decoder.
    TrainSkills(TrainSkillsArgs),
    /// Label H-step windows with skill indices.
    Relabel(RelabelArgs),
    /// Train the high-level IQL learner on relabeled data.
    TrainHl(TrainHlArgs),
    /// Evaluate the hierarchical policy over several seeds.
    Eval(EvalArgs),
    /// Roll out single skills for whole episodes and record traces.
    ReplaySkill(ReplayArgs),
    /// Train and evaluate a grid of (K, D_z) and H settings.
    Sweep(SweepArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::TrainSkills(a) => commands::train_skills(a),
        Command::Relabel(a) => commands::relabel(a),
        Command::TrainHl(a) => commands::train_hl(a),
        Command::Eval(a) => commands::eval(a),
        Command::ReplaySkill(a) => commands::replay_skill(a),
        Command::Sweep(a) => commands::sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dds: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

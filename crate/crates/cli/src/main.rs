use anyhow::Result;
use bgnn_cli::{cmd_bench, cmd_convert, cmd_distill, cmd_infer, cmd_synth, cmd_train, Options, SplitArg};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bgnn", version, about = "Binary graph neural networks: training, distillation, inference and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model: from scratch, or one distillation stage.
    Train(Options),
    /// Three-stage cascaded distillation into a binary model.
    Distill(Options),
    /// Classify a dataset split with a saved model.
    Infer {
        #[command(flatten)]
        opts: Options,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Strip a checkpoint to a deployment model file.
    Convert(Options),
    /// Kernel and end-to-end benchmarks.
    Bench(Options),
    /// Write the synthetic point-cloud dataset to a directory.
    Synth(Options),
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(o) => {
            let r = cmd_train(&o)?;
            println!("model\t{}", r.model.display());
            if let Some(a) = r.final_test_accuracy {
                println!("test_accuracy\t{a}");
            }
        }
        Command::Distill(o) => {
            let r = cmd_distill(&o)?;
            if let Some(a) = r.base_test_accuracy {
                println!("base\ttest_accuracy\t{a}");
            }
            for (i, (a, p)) in r.stage_test_accuracy.iter().zip(&r.stage_models).enumerate() {
                println!("stage{}\t{}\ttest_accuracy\t{}", i + 1, p.display(), a.map_or("-".into(), |a| a.to_string()));
            }
        }
        Command::Infer { opts, split } => {
            cmd_infer(&opts, split, &mut std::io::stdout().lock())?;
        }
        Command::Convert(o) => {
            let p = cmd_convert(&o)?;
            println!("model\t{}", p.display());
        }
        Command::Bench(o) => {
            let r = cmd_bench(&o)?;
            print!("{}", r.to_tsv());
        }
        Command::Synth(o) => {
            let p = cmd_synth(&o)?;
            println!("dataset\t{}", p.display());
        }
    }
    Ok(())
}

use std::path::PathBuf;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use extract_edit::text::Language;

/// Extract-edit unsupervised translation on synthetic cipher pairs.
///
/// Any `--key=value` argument that is not a flag of the subcommand overrides
/// the configuration key of the same name.
#[derive(Debug, Parser)]
#[command(name = "extract-edit", version)]
pub struct Cli {
    /// Root directory for run outputs.
    #[arg(long, global = true, env = "EXTRACT_EDIT_ROOT", default_value = "run")]
    pub root: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a cipher language pair.
    GenCorpus(GenCorpusArgs),
    /// Pretrain, then train in the configured mode.
    Train(TrainArgs),
    /// Greedy translation of a file, one sentence per line.
    Translate(TranslateArgs),
    /// Dump extracted and edited neighbors for every source sentence.
    Extract(ExtractArgs),
    /// BLEU, token accuracy and Hits@k reports for a checkpoint.
    Evaluate(EvaluateArgs),
    /// One run per k from a shared pretrained model.
    SweepK(SweepArgs),
}

#[derive(Debug, clap::Args)]
pub struct RunArgs {
    /// Run name; outputs go to <root>/<name>.
    #[arg(long)]
    pub name: String,
    /// Replace an existing run directory.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, clap::Args)]
pub struct GenCorpusArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Flat `key = value` corpus spec.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Corpus directory written by gen-corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Flat `key = value` training config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Steps between checkpoints.
    #[arg(long, default_value_t = 500)]
    pub checkpoint_every: u64,
    /// Continue from the run's latest checkpoint.
    #[arg(long, conflicts_with = "overwrite")]
    pub resume: bool,
    /// Pause after this many total steps; the run can be resumed later.
    #[arg(long)]
    pub stop_after: Option<u64>,
    /// Directory with `s2t.tsv` / `t2s.tsv` extraction dumps for mle-retrain.
    #[arg(long)]
    pub dumps: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Direction {
    S2t,
    T2s,
}

impl Direction {
    pub fn input(self) -> Language {
        match self {
            Direction::S2t => Language::Source,
            Direction::T2s => Language::Target,
        }
    }

    pub fn output(self) -> Language {
        self.input().other()
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::S2t => "s2t",
            Direction::T2s => "t2s",
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct TranslateArgs {
    /// Checkpoint directory (card.json, model.bin, vocab.txt).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value_t = Direction::S2t)]
    pub direction: Direction,
}

#[derive(Debug, clap::Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value_t = Direction::S2t)]
    pub direction: Direction,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Only the first N training sentences.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Bleu,
    Accuracy,
    Hits,
}

#[derive(Debug, clap::Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus directory with the gold test set and distractors.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Comma-separated; an empty list writes only the manifest.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "bleu,accuracy,hits", num_args = 0..)]
    pub metrics: Vec<Metric>,
    /// Hits@k noise ratios.
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,0.9")]
    pub noise: Vec<f64>,
    /// Unsmoothed BLEU.
    #[arg(long)]
    pub no_smoothing: bool,
}

#[derive(Debug, clap::Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,8,10")]
    pub ks: Vec<usize>,
    /// Run the branches concurrently, each with its own seed.
    #[arg(long)]
    pub parallel: bool,
}

/// Splits `--key=value` config overrides from the arguments clap understands.
pub fn split_overrides(argv: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let cmd = Cli::command();
    let longs = |c: &clap::Command| -> Vec<String> { c.get_arguments().filter_map(|a| a.get_long().map(String::from)).collect() };
    let mut known = longs(&cmd);
    known.extend(["help".to_string(), "version".to_string()]);
    let mut kept = Vec::with_capacity(argv.len());
    let mut overrides = Vec::new();
    let mut sub_seen = false;
    for arg in argv {
        if !sub_seen {
            if let Some(sub) = cmd.find_subcommand(&arg) {
                known.extend(longs(sub));
                sub_seen = true;
            }
            kept.push(arg);
            continue;
        }
        if let Some((k, v)) = arg.strip_prefix("--").and_then(|a| a.split_once('=')) {
            if !known.iter().any(|x| x == k) {
                overrides.push((k.to_string(), v.to_string()));
                continue;
            }
        }
        kept.push(arg);
    }
    (kept, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn overrides_are_separated_from_flags() {
        let (kept, ov) = split_overrides(argv("extract-edit train --name a --corpus=c --k=5 --lambda=0.25 --overwrite"));
        assert_eq!(kept, argv("extract-edit train --name a --corpus=c --overwrite"));
        assert_eq!(ov, vec![("k".into(), "5".into()), ("lambda".into(), "0.25".into())]);
        let cli = Cli::try_parse_from(kept).unwrap();
        assert!(matches!(cli.command, Command::Train(_)));
    }

    #[test]
    fn metric_lists_parse() {
        let cli = Cli::try_parse_from(argv("x evaluate --name e --checkpoint c --corpus d --metrics bleu,hits")).unwrap();
        let Command::Evaluate(a) = cli.command else { panic!() };
        assert_eq!(a.metrics, vec![Metric::Bleu, Metric::Hits]);
        assert_eq!(a.noise, vec![0.0, 0.5, 0.9]);
    }
}

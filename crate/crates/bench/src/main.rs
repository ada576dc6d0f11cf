use std::io::{self, Write};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, ValueEnum};
use maskfold_bench::report::{write_csv, write_json_lines};
use maskfold_bench::{memory_report, run_benchmark, BenchmarkSpec, Mode, Preset, Report};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ConfigArg {
    A,
    B,
    C,
    Custom,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Fused,
    Reference,
    Both,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ReportFormat {
    JsonLines,
    Csv,
}

/// Times fused against reference generation on seeded fake prompts.
///
/// Shape flags accept comma-separated lists; every combination is run.
#[derive(Debug, Parser)]
#[command(name = "maskfold-bench", version)]
struct Cli {
    /// Base shape. Desk-sized unless --memory-only, which uses full sizes.
    #[arg(long, value_enum, ignore_case = true, default_value = "a")]
    config: ConfigArg,
    #[arg(long, value_delimiter = ',')]
    batch: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    hidden: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    layers: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    heads: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    prompt: Vec<usize>,
    #[arg(long)]
    max_seq: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    padding_ratio: Vec<f64>,
    #[arg(long, value_enum, default_value = "both")]
    mode: ModeArg,
    /// Tokens to generate; defaults to filling the sequence, capped by the preset.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long, value_enum, default_value = "json-lines")]
    report: ReportFormat,
    /// Closed-form memory breakdown only; nothing is allocated or run.
    #[arg(long)]
    memory_only: bool,
}

fn or_default<T: Copy>(values: &[T], default: T) -> Vec<T> {
    if values.is_empty() {
        vec![default]
    } else {
        values.to_vec()
    }
}

impl Cli {
    fn base(&self) -> BenchmarkSpec {
        let preset = match self.config {
            ConfigArg::A => Preset::A,
            ConfigArg::B => Preset::B,
            ConfigArg::C => Preset::C,
            ConfigArg::Custom => Preset::Custom,
        };
        let mut base = if self.memory_only {
            BenchmarkSpec::full_size(preset)
        } else {
            BenchmarkSpec::desk(preset)
        };
        base.mode = match self.mode {
            ModeArg::Fused => Mode::Fused,
            ModeArg::Reference => Mode::Reference,
            ModeArg::Both => Mode::Both,
        };
        base.repetitions = self.reps;
        base.seed = self.seed;
        if let Some(v) = self.vocab {
            base.vocab = v;
        }
        if let Some(s) = self.max_seq {
            base.max_seq = s;
        }
        base
    }

    fn specs(&self) -> Vec<BenchmarkSpec> {
        let base = self.base();
        let mut specs = Vec::new();
        for &batch in &or_default(&self.batch, base.batch) {
            for &hidden in &or_default(&self.hidden, base.hidden) {
                for &layers in &or_default(&self.layers, base.layers) {
                    for &heads in &or_default(&self.heads, base.heads) {
                        for &prompt in &or_default(&self.prompt, base.prompt) {
                            for &padding_ratio in &or_default(&self.padding_ratio, base.padding_ratio) {
                                let steps = self
                                    .steps
                                    .unwrap_or_else(|| base.steps.min(base.max_seq.saturating_sub(prompt)));
                                specs.push(BenchmarkSpec {
                                    batch,
                                    hidden,
                                    layers,
                                    heads,
                                    prompt,
                                    padding_ratio,
                                    steps,
                                    ..base.clone()
                                });
                            }
                        }
                    }
                }
            }
        }
        specs
    }
}

fn run(cli: &Cli) -> Result<()> {
    let mut reports: Vec<Report> = Vec::new();
    for spec in cli.specs() {
        let report = if cli.memory_only {
            memory_report(&spec)
        } else {
            run_benchmark(&spec)
        };
        reports.push(report.with_context(|| format!("config {} {:?}", spec.name, spec))?);
    }
    let stdout = io::stdout().lock();
    match cli.report {
        ReportFormat::JsonLines => write_json_lines(&reports, stdout)?,
        ReportFormat::Csv => write_csv(&reports, stdout)?,
    }
    io::stdout().flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

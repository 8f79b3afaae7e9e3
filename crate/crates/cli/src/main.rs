mod config;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

/// Simultaneous translation with a learned read/write policy.
#[derive(Parser, Debug)]
#[command(name = "simulmt", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Configuration file of `key = value` lines
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory [config: run_dir]
    #[arg(long, global = true)]
    run_dir: Option<String>,
    /// Root seed [config: seed]
    #[arg(long, global = true)]
    seed: Option<String>,
    /// Override any configuration key, e.g. `--set train_base.lr=1e-3`
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic parallel corpus and its train/dev/test split
    GenData(GenData),
    /// Train a translation model
    TrainBase(TrainBase),
    /// Fine-tune the causal model with future source hidden at the label offsets
    Adapt(Adapt),
    /// Dump teacher-forced attention of a trained model
    ExportAlign(ExportAlign),
    /// Turn attention dumps into read/write labels
    GenLabels(GenLabels),
    /// Train the read/write classifier on the frozen streaming model
    TrainPolicy(TrainPolicy),
    /// Stream-decode a split, writing hypotheses, delays and decision traces
    Decode(Decode),
    /// Decode a split and report BLEU and Average Lagging
    Eval(Decode),
    /// Evaluate one trained policy at several thresholds
    Sweep(Sweep),
    /// Compare analytic and finite-difference gradients
    Gradcheck(Gradcheck),
    /// Run the built-in consistency checks
    Selftest,
    /// Print the resolved configuration with a description of every key
    ShowConfig,
}

#[derive(Args, Debug)]
struct GenData {
    /// [config: gen_data.size]
    #[arg(long)]
    size: Option<String>,
    /// [config: gen_data.vocab_size]
    #[arg(long)]
    vocab_size: Option<String>,
    /// [config: gen_data.fertility_rate]
    #[arg(long)]
    fertility_rate: Option<String>,
    /// [config: gen_data.merge_rate]
    #[arg(long)]
    merge_rate: Option<String>,
    /// [config: gen_data.swap_probability]
    #[arg(long)]
    swap_probability: Option<String>,
    /// [config: gen_data.min_len]
    #[arg(long)]
    min_len: Option<String>,
    /// [config: gen_data.max_len]
    #[arg(long)]
    max_len: Option<String>,
    /// [config: gen_data.dev_size]
    #[arg(long)]
    dev_size: Option<String>,
    /// [config: gen_data.test_size]
    #[arg(long)]
    test_size: Option<String>,
}

#[derive(Args, Debug)]
struct TrainBase {
    /// Encoder mode: full or causal
    #[arg(long)]
    mode: simulmt::seq2seq::EncoderMode,
    /// [config: train_base.d_model]
    #[arg(long)]
    d_model: Option<String>,
    /// [config: train_base.n_enc_layers]
    #[arg(long)]
    n_enc_layers: Option<String>,
    /// [config: train_base.n_dec_layers]
    #[arg(long)]
    n_dec_layers: Option<String>,
    /// [config: train_base.max_len]
    #[arg(long)]
    max_len: Option<String>,
    /// [config: train_base.lr]
    #[arg(long)]
    lr: Option<String>,
    /// [config: train_base.warmup_steps]
    #[arg(long)]
    warmup_steps: Option<String>,
    /// [config: train_base.batch_tokens]
    #[arg(long)]
    batch_tokens: Option<String>,
    /// [config: train_base.epochs]
    #[arg(long)]
    epochs: Option<String>,
}

#[derive(Args, Debug)]
struct Adapt {
    /// [config: adapt.epochs]
    #[arg(long)]
    epochs: Option<String>,
    /// [config: adapt.lr]
    #[arg(long)]
    lr: Option<String>,
    /// [config: adapt.mask_rate]
    #[arg(long)]
    mask_rate: Option<String>,
    /// [config: adapt.mask_slack]
    #[arg(long)]
    mask_slack: Option<String>,
}

#[derive(Args, Debug)]
struct ExportAlign {
    /// [config: export_align.model]
    #[arg(long)]
    model: Option<String>,
    /// [config: export_align.split]
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args, Debug)]
struct GenLabels {
    /// [config: gen_labels.gamma]
    #[arg(long)]
    gamma: Option<String>,
}

#[derive(Args, Debug)]
struct TrainPolicy {
    /// [config: train_policy.lr]
    #[arg(long)]
    lr: Option<String>,
    /// [config: train_policy.epochs]
    #[arg(long)]
    epochs: Option<String>,
    /// [config: train_policy.d_p]
    #[arg(long)]
    d_p: Option<String>,
    /// [config: train_policy.batch_size]
    #[arg(long)]
    batch_size: Option<String>,
    /// [config: train_policy.full_grid]
    #[arg(long)]
    full_grid: Option<String>,
}

#[derive(Args, Debug)]
struct Decode {
    /// [config: decode.split]
    #[arg(long)]
    split: Option<String>,
    /// [config: decode.policy]
    #[arg(long)]
    policy: Option<String>,
    /// [config: decode.delta]
    #[arg(long)]
    delta: Option<String>,
    /// [config: decode.wait_k]
    #[arg(long)]
    wait_k: Option<String>,
    /// [config: decode.beam_size]
    #[arg(long)]
    beam_size: Option<String>,
    /// [config: decode.max_len_factor]
    #[arg(long)]
    max_len_factor: Option<String>,
    /// [config: eval.min_source_len]
    #[arg(long)]
    min_source_len: Option<String>,
    /// [config: eval.threads]
    #[arg(long)]
    threads: Option<String>,
}

#[derive(Args, Debug)]
struct Sweep {
    /// [config: sweep.deltas]
    #[arg(long)]
    deltas: Option<String>,
    /// [config: decode.split]
    #[arg(long)]
    split: Option<String>,
    /// [config: decode.beam_size]
    #[arg(long)]
    beam_size: Option<String>,
    /// [config: eval.min_source_len]
    #[arg(long)]
    min_source_len: Option<String>,
    /// [config: eval.threads]
    #[arg(long)]
    threads: Option<String>,
    /// [config: sweep.svg]
    #[arg(long)]
    svg: Option<String>,
}

#[derive(Args, Debug)]
struct Gradcheck {
    /// [config: gradcheck.epsilon]
    #[arg(long)]
    epsilon: Option<String>,
    /// [config: gradcheck.tolerance]
    #[arg(long)]
    tolerance: Option<String>,
    /// [config: gradcheck.samples]
    #[arg(long)]
    samples: Option<String>,
}

fn apply(cfg: &mut RunConfig, overrides: &[(&str, &Option<String>)]) -> simulmt::Result<()> {
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    Ok(())
}

fn resolve(cli: &Cli) -> simulmt::Result<RunConfig> {
    let mut cfg = match &cli.common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    apply(&mut cfg, &[("run_dir", &cli.common.run_dir), ("seed", &cli.common.seed)])?;
    for kv in &cli.common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| simulmt::Error::config(kv.as_str(), "expected KEY=VALUE"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    match &cli.command {
        Command::GenData(a) => apply(
            &mut cfg,
            &[
                ("gen_data.size", &a.size),
                ("gen_data.vocab_size", &a.vocab_size),
                ("gen_data.fertility_rate", &a.fertility_rate),
                ("gen_data.merge_rate", &a.merge_rate),
                ("gen_data.swap_probability", &a.swap_probability),
                ("gen_data.min_len", &a.min_len),
                ("gen_data.max_len", &a.max_len),
                ("gen_data.dev_size", &a.dev_size),
                ("gen_data.test_size", &a.test_size),
            ],
        )?,
        Command::TrainBase(a) => apply(
            &mut cfg,
            &[
                ("train_base.d_model", &a.d_model),
                ("train_base.n_enc_layers", &a.n_enc_layers),
                ("train_base.n_dec_layers", &a.n_dec_layers),
                ("train_base.max_len", &a.max_len),
                ("train_base.lr", &a.lr),
                ("train_base.warmup_steps", &a.warmup_steps),
                ("train_base.batch_tokens", &a.batch_tokens),
                ("train_base.epochs", &a.epochs),
            ],
        )?,
        Command::Adapt(a) => apply(
            &mut cfg,
            &[
                ("adapt.epochs", &a.epochs),
                ("adapt.lr", &a.lr),
                ("adapt.mask_rate", &a.mask_rate),
                ("adapt.mask_slack", &a.mask_slack),
            ],
        )?,
        Command::ExportAlign(a) => apply(
            &mut cfg,
            &[("export_align.model", &a.model), ("export_align.split", &a.split)],
        )?,
        Command::GenLabels(a) => apply(&mut cfg, &[("gen_labels.gamma", &a.gamma)])?,
        Command::TrainPolicy(a) => apply(
            &mut cfg,
            &[
                ("train_policy.lr", &a.lr),
                ("train_policy.epochs", &a.epochs),
                ("train_policy.d_p", &a.d_p),
                ("train_policy.batch_size", &a.batch_size),
                ("train_policy.full_grid", &a.full_grid),
            ],
        )?,
        Command::Decode(a) | Command::Eval(a) => apply(
            &mut cfg,
            &[
                ("decode.split", &a.split),
                ("decode.policy", &a.policy),
                ("decode.delta", &a.delta),
                ("decode.wait_k", &a.wait_k),
                ("decode.beam_size", &a.beam_size),
                ("decode.max_len_factor", &a.max_len_factor),
                ("eval.min_source_len", &a.min_source_len),
                ("eval.threads", &a.threads),
            ],
        )?,
        Command::Sweep(a) => apply(
            &mut cfg,
            &[
                ("sweep.deltas", &a.deltas),
                ("decode.split", &a.split),
                ("decode.beam_size", &a.beam_size),
                ("eval.min_source_len", &a.min_source_len),
                ("eval.threads", &a.threads),
                ("sweep.svg", &a.svg),
            ],
        )?,
        Command::Gradcheck(a) => apply(
            &mut cfg,
            &[
                ("gradcheck.epsilon", &a.epsilon),
                ("gradcheck.tolerance", &a.tolerance),
                ("gradcheck.samples", &a.samples),
            ],
        )?,
        Command::Selftest | Command::ShowConfig => {}
    }
    Ok(cfg)
}

fn run(cli: &Cli, cfg: RunConfig) -> anyhow::Result<()> {
    let cfg = &cfg;
    match &cli.command {
        Command::GenData(_) => stages::gen_data(cfg),
        Command::TrainBase(a) => stages::train_base(cfg, a.mode),
        Command::Adapt(_) => stages::adapt(cfg),
        Command::ExportAlign(_) => stages::export_align(cfg),
        Command::GenLabels(_) => stages::gen_labels(cfg),
        Command::TrainPolicy(_) => stages::train_policy(cfg),
        Command::Decode(_) => stages::decode(cfg, false),
        Command::Eval(_) => stages::decode(cfg, true),
        Command::Sweep(_) => stages::sweep(cfg),
        Command::Gradcheck(_) => stages::gradcheck(cfg),
        Command::Selftest => stages::selftest(),
        Command::ShowConfig => {
            print!("{}", cfg.render_annotated());
            Ok(())
        }
    }
}

/// 1 for usage and configuration problems, 2 for bad data or files,
/// 3 for numeric failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    use simulmt::Error as E;
    match err.chain().find_map(|e| e.downcast_ref::<E>()) {
        Some(E::Config { .. }) => 1,
        Some(E::Divergence { .. } | E::GradientCheck { .. } | E::ModelState(_)) => 3,
        Some(_) => 2,
        None if err.downcast_ref::<stages::CheckFailed>().is_some() => 3,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    // anything wrong with the configuration itself is a usage error
    let cfg = match resolve(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match run(&cli, cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // causes already quoted by their parent are not repeated
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}

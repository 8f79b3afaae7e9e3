use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde_json::json;

use simulmt::corpus::{self, Corpus, GeneratorParams, ParallelPair};
use simulmt::decoder::{
    beam_stream, greedy_full, greedy_stream, write_trace, DecodeOptions, ForcedReadPolicy, LearnedPolicy,
    ReadWritePolicy, SampledPolicy, WaitKPolicy,
};
use simulmt::labels::{self, PolicyLabelMatrix};
use simulmt::metrics::{self, evaluate_corpus, sweep_csv, sweep_delta, sweep_svg};
use simulmt::policy::{self, PolicyHyper, PolicyParams, PolicyTrainingSet};
use simulmt::rng::SplitMix64;
use simulmt::seq2seq::{self, EncoderMode, ModelConfig, Seq2SeqModel, StreamingMasks, TrainHyper};
use simulmt::{Error, Result};

use crate::config::RunConfig;

/// A self-test or check that ran but did not pass.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    create_parent(path)?;
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn split_path(cfg: &RunConfig, split: &str, ext: &str) -> PathBuf {
    cfg.path("paths.data_dir").join(format!("{split}.{ext}"))
}

fn load_model(path: &Path) -> Result<Seq2SeqModel> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "model checkpoint not found (run train-base or adapt first)"),
        ));
    }
    Seq2SeqModel::load(path)
}

/// Loads a split against the model's vocabularies.
fn load_split(cfg: &RunConfig, model: &Seq2SeqModel, split: &str) -> Result<Corpus> {
    let path = split_path(cfg, split, "tsv");
    let Some((sv, tv)) = &model.vocabs else {
        return Err(Error::ModelState("checkpoint carries no vocabularies".into()));
    };
    corpus::load_tsv_with_vocab(&path, None, sv, tv)
}

fn load_labels(cfg: &RunConfig, split: &str) -> Result<Vec<PolicyLabelMatrix>> {
    let path = cfg.path("paths.labels_dir").join(format!("{split}.plbl"));
    if !path.exists() {
        return Err(Error::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "label dump not found (run gen-labels first)"),
        ));
    }
    labels::read_label_dump(&path)
}

pub fn gen_data(cfg: &RunConfig) -> anyhow::Result<()> {
    let params = GeneratorParams {
        size: cfg.get("gen_data.size")?,
        vocab_size: cfg.get("gen_data.vocab_size")?,
        fertility_rate: cfg.get("gen_data.fertility_rate")?,
        merge_rate: cfg.get("gen_data.merge_rate")?,
        swap_probability: cfg.get("gen_data.swap_probability")?,
        min_len: cfg.get("gen_data.min_len")?,
        max_len: cfg.get("gen_data.max_len")?,
    };
    let dev: usize = cfg.get("gen_data.dev_size")?;
    let test: usize = cfg.get("gen_data.test_size")?;
    if dev + test > params.size {
        return Err(Error::config("gen_data.dev_size", "dev and test sizes exceed gen_data.size").into());
    }
    cfg.echo("gen-data")?;
    let all = corpus::generate_synthetic(&params, cfg.stage_seed("gen_data")?)?;
    let n = params.size.max(1) as f64;
    let fractions = ((params.size - dev - test) as f64 / n, dev as f64 / n, test as f64 / n);
    let fractions = if params.size == 0 { (1.0, 0.0, 0.0) } else { fractions };
    let (tr, dv, te) = corpus::split(&all, fractions, cfg.stage_seed("split")?)?;
    for (name, c) in [("train", &tr), ("dev", &dv), ("test", &te)] {
        let tsv = split_path(cfg, name, "tsv");
        create_parent(&tsv)?;
        c.write_tsv(&tsv)?;
        c.write_alignments(&split_path(cfg, name, "align"))?;
        println!("{name}: {} pairs -> {}", c.len(), tsv.display());
    }
    Ok(())
}

pub fn train_base(cfg: &RunConfig, mode: EncoderMode) -> anyhow::Result<()> {
    let train_path = split_path(cfg, "train", "tsv");
    let data = corpus::load_tsv(&train_path, None)?;
    if data.is_empty() {
        return Err(Error::Data(format!("{}: no usable pairs", train_path.display())).into());
    }
    let config = ModelConfig {
        d_model: cfg.get("train_base.d_model")?,
        n_enc_layers: cfg.get("train_base.n_enc_layers")?,
        n_dec_layers: cfg.get("train_base.n_dec_layers")?,
        max_len: cfg.get("train_base.max_len")?,
        ..ModelConfig::new(data.source_vocab.len(), data.target_vocab.len(), 0, mode)
    };
    if config.max_len < data.max_sentence_len() + 2 {
        return Err(Error::config(
            "train_base.max_len",
            format!("must be at least {} for this data", data.max_sentence_len() + 2),
        )
        .into());
    }
    let hyper = TrainHyper {
        lr: cfg.get("train_base.lr")?,
        beta1: cfg.get("train_base.beta1")?,
        beta2: cfg.get("train_base.beta2")?,
        warmup_steps: cfg.get("train_base.warmup_steps")?,
        batch_tokens: cfg.get("train_base.batch_tokens")?,
        epochs: cfg.get("train_base.epochs")?,
        seed: cfg.stage_seed(&format!("train_base.{mode}"))?,
        clip_norm: cfg.get("train_base.clip_norm")?,
    };
    cfg.echo(&format!("train-base-{mode}"))?;
    let mut model = Seq2SeqModel::new(config, hyper.seed)?
        .with_vocabs(data.source_vocab.clone(), data.target_vocab.clone());
    let report = seq2seq::train_with(&mut model, &data, &hyper, None, |epoch, loss, _| {
        eprintln!("epoch {epoch:>3}  loss {loss:.4}");
    })?;
    let key = match mode {
        EncoderMode::Full => "paths.full_model",
        EncoderMode::Causal => "paths.causal_model",
    };
    let path = cfg.path(key);
    create_parent(&path)?;
    model.save(&path)?;
    println!(
        "{mode} model: {} steps in {:.1}s, final loss {:.4} -> {}",
        report.steps,
        report.seconds,
        report.epoch_loss.last().copied().unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

/// Fine-tunes the causal model so that it translates well from a source
/// cut at the label offsets, which is what it sees while streaming.
pub fn adapt(cfg: &RunConfig) -> anyhow::Result<()> {
    let mut model = load_model(&cfg.path("paths.causal_model"))?;
    if model.config.encoder_mode != EncoderMode::Causal {
        return Err(Error::ModelState("paths.causal_model does not hold a causal-encoder model".into()).into());
    }
    let data = load_split(cfg, &model, "train")?;
    let labels = load_labels(cfg, "train")?;
    if labels.len() != data.len() {
        return Err(Error::Data(format!("{} label matrices for {} training pairs", labels.len(), data.len())).into());
    }
    let offsets = labels
        .iter()
        .map(|l| Ok(labels::read_offsets(l)?.0))
        .collect::<Result<Vec<_>>>()?;
    let masks = StreamingMasks {
        offsets: &offsets,
        rate: cfg.get("adapt.mask_rate")?,
        slack: cfg.get("adapt.mask_slack")?,
    };
    let hyper = TrainHyper {
        lr: cfg.get("adapt.lr")?,
        beta1: cfg.get("train_base.beta1")?,
        beta2: cfg.get("train_base.beta2")?,
        warmup_steps: cfg.get("train_base.warmup_steps")?,
        batch_tokens: cfg.get("train_base.batch_tokens")?,
        epochs: cfg.get("adapt.epochs")?,
        seed: cfg.stage_seed("adapt")?,
        clip_norm: cfg.get("train_base.clip_norm")?,
    };
    cfg.echo("adapt")?;
    let report = seq2seq::train_with(&mut model, &data, &hyper, Some(masks), |epoch, loss, _| {
        eprintln!("epoch {epoch:>3}  loss {loss:.4}");
    })
    .map_err(|e| match e {
        Error::Config { field, reason } if field == "mask_rate" => Error::config("adapt.mask_rate", reason),
        e => e,
    })?;
    let path = cfg.path("paths.streaming_model");
    create_parent(&path)?;
    model.save(&path)?;
    println!(
        "adapted model: {} steps in {:.1}s, final loss {:.4} -> {}",
        report.steps,
        report.seconds,
        report.epoch_loss.last().copied().unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

pub fn export_align(cfg: &RunConfig) -> anyhow::Result<()> {
    let which: String = cfg.get("export_align.model")?;
    let (key, mode) = match which.as_str() {
        "causal" => ("paths.causal_model", EncoderMode::Causal),
        "full" => ("paths.full_model", EncoderMode::Full),
        other => return Err(Error::config("export_align.model", format!("{other:?} is not causal or full")).into()),
    };
    let model = load_model(&cfg.path(key))?;
    if model.config.encoder_mode != mode {
        return Err(Error::ModelState(format!("{key} does not hold a {mode}-encoder model")).into());
    }
    cfg.echo("export-align")?;
    for split in cfg.list::<String>("export_align.split")? {
        let data = load_split(cfg, &model, &split)?;
        let mats = data
            .pairs
            .iter()
            .enumerate()
            .map(|(k, p)| {
                model
                    .extract_attention(p, mode)
                    .with_context(|| format!("{split} pair {}", k + 1))
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        let path = cfg.path("paths.align_dir").join(format!("{split}.attn"));
        create_parent(&path)?;
        seq2seq::write_attention_dump(&path, &mats)?;
        println!("{split}: {} attention matrices -> {}", mats.len(), path.display());
    }
    Ok(())
}

pub fn gen_labels(cfg: &RunConfig) -> anyhow::Result<()> {
    let gamma: f32 = cfg.get("gen_labels.gamma")?;
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::config("gen_labels.gamma", format!("{gamma} is outside (0, 1]")).into());
    }
    cfg.echo("gen-labels")?;
    let dir = cfg.path("paths.align_dir");
    let mut done = 0;
    for split in ["train", "dev", "test"] {
        let path = dir.join(format!("{split}.attn"));
        if !path.exists() {
            continue;
        }
        let mats = seq2seq::read_attention_dump(&path)?;
        let labels = mats
            .iter()
            .map(|a| labels::gen_policy_labels(a, gamma))
            .collect::<Result<Vec<_>>>()?;
        let out = cfg.path("paths.labels_dir").join(format!("{split}.plbl"));
        create_parent(&out)?;
        labels::write_label_dump(&out, &labels)?;
        let stats = labels::label_stats(&labels)?;
        println!(
            "{split}: {} label matrices, density {:.3}, mean offset {:.3} of |x| -> {}",
            stats.matrices,
            stats.density,
            stats.mean_offset_fraction,
            out.display()
        );
        done += 1;
    }
    if done == 0 {
        bail!(Error::io(
            &dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no attention dumps (run export-align first)")
        ));
    }
    Ok(())
}

pub fn train_policy(cfg: &RunConfig) -> anyhow::Result<()> {
    let model = load_model(&cfg.path("paths.streaming_model"))?;
    if model.config.encoder_mode != EncoderMode::Causal {
        return Err(Error::ModelState("paths.streaming_model does not hold a causal-encoder model".into()).into());
    }
    let full_grid: bool = cfg.get("train_policy.full_grid")?;
    let hyper = PolicyHyper {
        lr: cfg.get("train_policy.lr")?,
        epochs: cfg.get("train_policy.epochs")?,
        seed: cfg.stage_seed("train_policy")?,
        d_p: cfg.get("train_policy.d_p")?,
        batch_size: cfg.get("train_policy.batch_size")?,
    };
    let data = load_split(cfg, &model, "train")?;
    let labels = load_labels(cfg, "train")?;
    cfg.echo("train-policy")?;
    let before = model.checksum();
    let set = policy::build_training_set(&model, &data, &labels, full_grid)?;
    println!(
        "training set: {} examples, {} positive, positive weight {:.3}",
        set.examples.len(),
        set.positives(),
        set.positive_weight
    );
    let (params, report) = policy::train_policy_with(&set, &hyper, |epoch, loss| {
        eprintln!("epoch {epoch:>3}  loss {loss:.4}");
    })?;
    if model.checksum() != before {
        return Err(Error::ModelState("translation model changed during policy training".into()).into());
    }
    let held_out = match load_labels(cfg, "dev") {
        Ok(dev_labels) => {
            let dev = load_split(cfg, &model, "dev")?;
            let dev_set: PolicyTrainingSet = policy::build_training_set(&model, &dev, &dev_labels, false)?;
            Some(policy::evaluate(&params, &dev_set, 0.5)?)
        }
        Err(_) => None,
    };
    let path = cfg.path("paths.policy");
    create_parent(&path)?;
    params.save(&path)?;
    let t = report.train;
    println!(
        "train: accuracy {:.4} precision {:.4} recall {:.4} (gradient check max rel. error {:.2e})",
        t.accuracy, t.precision, t.recall, report.gradcheck_max_error
    );
    if let Some(d) = held_out {
        println!("dev:   accuracy {:.4} precision {:.4} recall {:.4}", d.accuracy, d.precision, d.recall);
    }
    let out = cfg.path("paths.output_dir").join("policy_report.json");
    write_file(
        &out,
        serde_json::to_string_pretty(&json!({
            "epoch_loss": report.epoch_loss,
            "train": {"accuracy": t.accuracy, "precision": t.precision, "recall": t.recall, "examples": t.examples},
            "dev": held_out.map(|d| json!({"accuracy": d.accuracy, "precision": d.precision, "recall": d.recall, "examples": d.examples})),
            "gradcheck_max_error": report.gradcheck_max_error,
            "model_checksum": format!("{before:016x}"),
        }))?,
    )?;
    println!("policy -> {}", path.display());
    Ok(())
}

fn make_policy(cfg: &RunConfig) -> anyhow::Result<Box<dyn ReadWritePolicy + Sync>> {
    let kind: String = cfg.get("decode.policy")?;
    Ok(match kind.as_str() {
        "learned" => {
            let params = PolicyParams::load(&cfg.path("paths.policy"))?;
            Box::new(LearnedPolicy::new(params, cfg.get("decode.delta")?).map_err(|e| match e {
                Error::Config { reason, .. } => Error::config("decode.delta", reason),
                e => e,
            })?)
        }
        "sampled" => {
            let params = PolicyParams::load(&cfg.path("paths.policy"))?;
            Box::new(SampledPolicy::new(params, cfg.stage_seed("decode.sample")?))
        }
        "wait-k" => Box::new(WaitKPolicy::new(cfg.get("decode.wait_k")?).map_err(|e| match e {
            Error::Config { reason, .. } => Error::config("decode.wait_k", reason),
            e => e,
        })?),
        "forced-read" => Box::new(ForcedReadPolicy),
        other => {
            return Err(Error::config(
                "decode.policy",
                format!("{other:?} is not one of learned, wait-k, forced-read, sampled"),
            )
            .into())
        }
    })
}

fn decode_options(cfg: &RunConfig) -> Result<DecodeOptions> {
    let opts = DecodeOptions {
        beam_size: cfg.get("decode.beam_size")?,
        max_len_factor: cfg.get("decode.max_len_factor")?,
    };
    if opts.beam_size == 0 {
        return Err(Error::config("decode.beam_size", "must be at least 1"));
    }
    Ok(opts)
}

pub fn decode(cfg: &RunConfig, score: bool) -> anyhow::Result<()> {
    let model = load_model(&cfg.path("paths.streaming_model"))?;
    let policy = make_policy(cfg)?;
    let opts = decode_options(cfg)?;
    let split: String = cfg.get("decode.split")?;
    let min_len: usize = cfg.get("eval.min_source_len")?;
    let threads: usize = cfg.get("eval.threads")?;
    let data = load_split(cfg, &model, &split)?;
    if data.is_empty() {
        return Err(Error::Data(format!("split {split} is empty")).into());
    }
    cfg.echo(if score { "eval" } else { "decode" })?;
    let report = evaluate_corpus(&model, policy.as_ref(), &data, &opts, min_len, threads)?;

    let out_dir = cfg.path("paths.output_dir");
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let tv = &model.vocabs.as_ref().expect("checked by load_split").1;
    let open = |ext: &str| -> Result<(PathBuf, BufWriter<fs::File>)> {
        let p = out_dir.join(format!("{split}.{ext}"));
        let f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
        Ok((p, BufWriter::new(f)))
    };
    let (hyp_path, mut hyp) = open("hyp")?;
    let (delay_path, mut delays) = open("delays")?;
    let (trace_path, mut trace) = open("trace")?;
    for (k, out) in report.outputs.iter().enumerate() {
        let io = |e| Error::io(&hyp_path, e);
        match out {
            Ok(r) => {
                writeln!(hyp, "{}", tv.decode(&r.tokens)).map_err(io)?;
                let d: Vec<String> = r.delays.iter().map(usize::to_string).collect();
                writeln!(delays, "{}", d.join(" ")).map_err(|e| Error::io(&delay_path, e))?;
                write_trace(&mut trace, k + 1, &r.trace).map_err(|e| Error::io(&trace_path, e))?;
            }
            Err(msg) => {
                eprintln!("warning: pair {} failed to decode: {msg}", k + 1);
                writeln!(hyp).map_err(io)?;
                writeln!(delays).map_err(|e| Error::io(&delay_path, e))?;
            }
        }
    }
    for (p, mut w) in [(hyp_path, hyp), (delay_path, delays), (trace_path, trace)] {
        w.flush().map_err(|e| Error::io(&p, e))?;
    }
    println!("decoded {} sentences ({} failed) -> {}", data.len(), report.failures(), out_dir.display());
    if score {
        let b = &report.bleu;
        println!(
            "BLEU {:.4} (p1-4 {:.4} {:.4} {:.4} {:.4}, BP {:.4})",
            b.score, b.precisions[0], b.precisions[1], b.precisions[2], b.precisions[3], b.brevity_penalty
        );
        println!(
            "AL {:.4} over {} sentences ({} shorter than {min_len} excluded), mean reads {:.4}",
            report.latency.mean_al,
            data.len() - report.latency.excluded,
            report.latency.excluded,
            report.mean_reads
        );
        write_file(
            &out_dir.join(format!("eval_{split}.json")),
            serde_json::to_string_pretty(&json!({
                "split": split,
                "policy": cfg.raw("decode.policy"),
                "delta": cfg.raw("decode.delta"),
                "beam_size": opts.beam_size,
                "bleu": b.score,
                "precisions": b.precisions,
                "brevity_penalty": b.brevity_penalty,
                "al": report.latency.mean_al,
                "al_excluded": report.latency.excluded,
                "mean_reads": report.mean_reads,
                "sentences": data.len(),
                "failures": report.failures(),
            }))?,
        )?;
    }
    if report.failures() > 0 {
        return Err(Error::Data(format!("{} sentences failed to decode", report.failures())).into());
    }
    Ok(())
}

pub fn sweep(cfg: &RunConfig) -> anyhow::Result<()> {
    let model = load_model(&cfg.path("paths.streaming_model"))?;
    let params = PolicyParams::load(&cfg.path("paths.policy"))?;
    let deltas: Vec<f32> = cfg.list("sweep.deltas")?;
    if deltas.is_empty() {
        return Err(Error::config("sweep.deltas", "no thresholds given").into());
    }
    for &d in &deltas {
        if !(d > 0.0 && d < 1.0) {
            return Err(Error::config("sweep.deltas", format!("{d} is outside (0, 1)")).into());
        }
    }
    if deltas.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::config("sweep.deltas", "must be sorted ascending").into());
    }
    let opts = decode_options(cfg)?;
    let split: String = cfg.get("decode.split")?;
    let data = load_split(cfg, &model, &split)?;
    cfg.echo("sweep")?;
    let rows = sweep_delta(
        &model,
        &params,
        &data,
        &deltas,
        &opts,
        cfg.get("eval.min_source_len")?,
        cfg.get("eval.threads")?,
    )?;
    for r in &rows {
        if let Some(e) = &r.error {
            eprintln!("warning: delta {:.4} failed: {e}", r.delta);
        } else if r.failures > 0 {
            eprintln!("warning: delta {:.4}: {} sentences failed to decode", r.delta, r.failures);
        }
    }
    let csv = sweep_csv(&rows);
    let out_dir = cfg.path("paths.output_dir");
    write_file(&out_dir.join("sweep.csv"), &csv)?;
    if cfg.get::<bool>("sweep.svg")? {
        write_file(&out_dir.join("sweep.svg"), sweep_svg(&rows))?;
    }
    print!("{csv}");
    Ok(())
}

fn short_pair(cfg: &RunConfig) -> Result<Corpus> {
    let params = GeneratorParams {
        size: 1,
        vocab_size: 12,
        min_len: 4,
        max_len: 4,
        fertility_rate: 0.2,
        merge_rate: 0.0,
        swap_probability: 0.2,
    };
    corpus::generate_synthetic(&params, cfg.stage_seed("gradcheck")?)
}

pub fn gradcheck(cfg: &RunConfig) -> anyhow::Result<()> {
    let eps: f64 = cfg.get("gradcheck.epsilon")?;
    let tol: f64 = cfg.get("gradcheck.tolerance")?;
    let samples: usize = cfg.get("gradcheck.samples")?;
    let seed = cfg.stage_seed("gradcheck")?;
    cfg.echo("gradcheck")?;
    let data = short_pair(cfg)?;
    let pair: &ParallelPair = &data.pairs[0];
    let mut failed = Vec::new();
    for mode in [EncoderMode::Full, EncoderMode::Causal] {
        let config = ModelConfig {
            d_model: cfg.get("train_base.d_model")?,
            n_enc_layers: cfg.get("train_base.n_enc_layers")?,
            n_dec_layers: cfg.get("train_base.n_dec_layers")?,
            ..ModelConfig::new(data.source_vocab.len(), data.target_vocab.len(), 10, mode)
        };
        let model = Seq2SeqModel::new(config, seed)?;
        let r = seq2seq::gradient_check(&model, pair, eps, tol, samples, seed).map_err(|e| match e {
            Error::Config { reason, .. } => Error::config("gradcheck.epsilon", reason),
            e => e,
        })?;
        println!(
            "seq2seq ({mode}): {} coordinates, max rel. error {:.2e} at {}",
            r.checked, r.max_error, r.worst
        );
        if !r.passed() {
            failed.push(r.into_result().unwrap_err());
        }
    }

    let d = cfg.get::<usize>("train_base.d_model")?;
    let mut rng = SplitMix64::new(seed);
    let examples = (0..32)
        .map(|k| policy::PolicyExample {
            decoder_state: (0..d).map(|_| rng.symmetric_f32(1.0)).collect(),
            encoder_state: (0..d).map(|_| rng.symmetric_f32(1.0)).collect(),
            label: (k % 3 == 0) as u8,
            pair: 0,
            i: 1,
            j: 1,
        })
        .collect();
    let set = PolicyTrainingSet {
        examples,
        positive_weight: 2.0,
    };
    let params = PolicyParams::new(d, cfg.get("train_policy.d_p")?, seed)?;
    let worst = policy::policy_gradient_check(&params, &set, eps, samples, seed)?;
    println!("policy: {samples} coordinates, max rel. error {worst:.2e}");
    if worst > tol {
        failed.push(Error::GradientCheck {
            failed: 1,
            checked: samples,
            tolerance: tol,
            worst_param: "policy".into(),
            worst_error: worst,
        });
    }
    match failed.into_iter().next() {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

pub fn selftest() -> anyhow::Result<()> {
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        println!("{} {name}", if ok { "ok  " } else { "FAIL" });
        if !ok {
            failures.push(name.to_string());
        }
    };

    let mut rng = SplitMix64::new(11);
    let mut agree = true;
    for _ in 0..2000 {
        let t = 1 + rng.below(6);
        let s = 1 + rng.below(6);
        let rows: Vec<Vec<f32>> = (0..t)
            .map(|_| {
                let raw: Vec<f32> = (0..s).map(|_| rng.next_f32()).collect();
                let sum: f32 = raw.iter().sum();
                raw.iter().map(|x| x / sum).collect()
            })
            .collect();
        let a = seq2seq::AttentionMatrix::from_rows(&rows)?;
        for gamma in [0.3, 0.5, 0.6, 0.9, 1.0] {
            agree &= labels::gen_policy_labels(&a, gamma)? == labels::brute_force_labels(&a, gamma)?;
        }
    }
    check("label generator matches the brute-force oracle", agree);

    let full = vec![10usize; 10];
    let wait3: Vec<usize> = (1..=10).map(|i| (i + 2).min(10)).collect();
    let simul: Vec<usize> = (1..=10).collect();
    let al = |g: &[usize]| metrics::average_lag(g, 10, 10);
    check("AL of non-streaming delays is |x|", (al(&full)? - 10.0).abs() < 1e-6);
    check("AL of wait-3 delays is 3", (al(&wait3)? - 3.0).abs() < 1e-6);
    check("AL of fully simultaneous delays is 1", (al(&simul)? - 1.0).abs() < 1e-6);

    let config = ModelConfig {
        d_model: 16,
        ..ModelConfig::new(14, 14, 32, EncoderMode::Causal)
    };
    let model = Seq2SeqModel::new(config, 5)?;
    let mut same = true;
    let mut reference = true;
    for n in 1..8 {
        let src: Vec<u32> = (0..n).map(|_| 4 + rng.below(10) as u32).collect();
        for k in 1..4 {
            let p = WaitKPolicy::new(k)?;
            let g = greedy_stream(&model, &p, &src, 2)?;
            let (b, t) = beam_stream(&model, &p, &src, &DecodeOptions::default())?;
            same &= g == b && t.sync_violations == 0;
        }
        reference &= greedy_stream(&model, &ForcedReadPolicy, &src, 2)?.tokens == greedy_full(&model, &src, 2)?;
    }
    check("beam size 1 reproduces greedy decoding", same);
    check("forced-read streaming reproduces full-sentence decoding", reference);

    if failures.is_empty() {
        Ok(())
    } else {
        Err(CheckFailed(format!("self-test failed: {}", failures.join("; "))).into())
    }
}

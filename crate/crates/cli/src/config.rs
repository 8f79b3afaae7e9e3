//! `key = value` run configuration with one namespace per stage.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use simulmt::rng::derive_seed;
use simulmt::{Error, Result};

pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

macro_rules! keys {
    ($($name:literal = $default:literal, $help:literal;)*) => {
        pub const KEYS: &[Key] = &[$(Key { name: $name, default: $default, help: $help }),*];
    };
}

keys! {
    "seed" = "1", "root seed; every stage derives its own from it";
    "run_dir" = "run", "directory holding all stage inputs and outputs";
    "paths.data_dir" = "data", "train/dev/test TSV files and alignment sidecars";
    "paths.full_model" = "models/full.absm", "full-encoder model checkpoint";
    "paths.causal_model" = "models/causal.absm", "causal-encoder model checkpoint";
    "paths.streaming_model" = "models/streaming.absm", "causal model adapted to partial sources; frozen under the policy";
    "paths.align_dir" = "align", "attention dumps, one per split";
    "paths.labels_dir" = "labels", "policy label dumps, one per split";
    "paths.policy" = "models/policy.absm", "policy checkpoint";
    "paths.output_dir" = "out", "decodes, traces, reports";
    "gen_data.size" = "6000", "number of generated pairs";
    "gen_data.vocab_size" = "40", "source word types";
    "gen_data.fertility_rate" = "0.1", "fraction of source words translated as two tokens";
    "gen_data.merge_rate" = "0.05", "fraction of bigrams merged into one token";
    "gen_data.swap_probability" = "0.15", "fraction of source words that swap with the next word";
    "gen_data.min_len" = "5", "shortest source sentence";
    "gen_data.max_len" = "14", "longest source sentence";
    "gen_data.dev_size" = "500", "pairs held out for dev";
    "gen_data.test_size" = "500", "pairs held out for test";
    "train_base.d_model" = "64", "state width";
    "train_base.n_enc_layers" = "2", "encoder layers";
    "train_base.n_dec_layers" = "2", "decoder layers";
    "train_base.max_len" = "40", "longest sentence the model accepts";
    "train_base.lr" = "3e-3", "peak learning rate";
    "train_base.beta1" = "0.9", "Adam beta1";
    "train_base.beta2" = "0.98", "Adam beta2";
    "train_base.warmup_steps" = "200", "linear warmup steps";
    "train_base.batch_tokens" = "400", "target tokens per step";
    "train_base.epochs" = "30", "training epochs";
    "train_base.clip_norm" = "5", "global gradient norm cap";
    "adapt.epochs" = "10", "fine-tuning epochs on partially visible sources";
    "adapt.lr" = "3e-3", "peak learning rate for fine-tuning";
    "adapt.mask_rate" = "0.5", "share of pairs per epoch trained with the source cut at the label offsets";
    "adapt.mask_slack" = "2", "a masked prediction sees up to this many extra source tokens, drawn uniformly";
    "export_align.model" = "causal", "checkpoint whose attention becomes the alignment: causal or full";
    "export_align.split" = "train,dev", "splits to export attention for";
    "gen_labels.gamma" = "0.5", "cumulative attention threshold in (0, 1]";
    "train_policy.lr" = "3e-3", "policy learning rate";
    "train_policy.epochs" = "30", "policy epochs";
    "train_policy.d_p" = "32", "policy projection width";
    "train_policy.batch_size" = "64", "examples per step";
    "train_policy.full_grid" = "false", "also train on cells off the label staircase";
    "decode.split" = "test", "split to decode";
    "decode.policy" = "learned", "learned | wait-k | forced-read | sampled";
    "decode.delta" = "0.5", "write threshold of the learned policy";
    "decode.wait_k" = "3", "k of the wait-k policy";
    "decode.beam_size" = "1", "1 for greedy";
    "decode.max_len_factor" = "2", "output cap is factor * |x| + 10";
    "eval.min_source_len" = "8", "shorter sources are left out of AL";
    "eval.threads" = "1", "decoding threads";
    "sweep.deltas" = "0.5,0.8,0.9", "comma-separated thresholds, ascending";
    "sweep.svg" = "true", "also write sweep.svg";
    "gradcheck.epsilon" = "1e-4", "finite-difference step";
    "gradcheck.tolerance" = "1e-3", "largest accepted relative error";
    "gradcheck.samples" = "200", "coordinates checked per model";
}

pub fn key(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|k| (k.name, k.default.to_string())).collect(),
        }
    }
}

impl RunConfig {
    /// Overlays `key = value` lines on the defaults. `#` starts a comment.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |reason: String| Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                reason,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_err("expected `key = value`".into()))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        let k = key(name).ok_or_else(|| Error::config(name, "unknown configuration key"))?;
        self.values.insert(k.name, value.to_string());
        Ok(())
    }

    pub fn raw(&self, name: &str) -> &str {
        self.values.get(name).map(String::as_str).unwrap_or_else(|| panic!("no key {name}"))
    }

    pub fn get<T: FromStr>(&self, name: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let raw = self.raw(name);
        raw.parse()
            .map_err(|e| Error::config(name, format!("cannot parse {raw:?}: {e}")))
    }

    pub fn list<T: FromStr>(&self, name: &str) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        self.raw(name)
            .split(',')
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e| Error::config(name, format!("cannot parse {s:?}: {e}")))
            })
            .collect()
    }

    pub fn run_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("run_dir"))
    }

    /// A `paths.*` value, resolved against the run directory when relative.
    pub fn path(&self, name: &str) -> PathBuf {
        let p = PathBuf::from(self.raw(name));
        if p.is_absolute() {
            p
        } else {
            self.run_dir().join(p)
        }
    }

    pub fn stage_seed(&self, stage: &str) -> Result<u64> {
        Ok(derive_seed(self.get("seed")?, stage))
    }

    /// Every key, sorted, in the file syntax; parsing it gives back `self`.
    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// [`render`](Self::render) with each key's description as a comment.
    pub fn render_annotated(&self) -> String {
        KEYS.iter()
            .map(|k| format!("# {}\n{} = {}\n", k.help, k.name, self.values[k.name]))
            .collect()
    }

    /// Writes the resolved configuration as `<run_dir>/config/<stage>.conf`.
    pub fn echo(&self, stage: &str) -> Result<PathBuf> {
        let dir = self.run_dir().join("config");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!("{stage}.conf"));
        std::fs::write(&path, self.render()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

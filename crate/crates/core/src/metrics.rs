//! Corpus BLEU-4, Average Lagging and the delta sweep.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::corpus::Corpus;
use crate::decoder::{decode_stream, DecodeOptions, DecodeResult, LearnedPolicy, ReadWritePolicy};
use crate::error::{Error, Result};
use crate::policy::PolicyParams;
use crate::seq2seq::Seq2SeqModel;

/// Sentences with fewer source tokens are left out of latency means.
pub const DEFAULT_MIN_SOURCE_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BleuReport {
    /// In `[0, 1]`.
    pub score: f64,
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hypothesis_len: usize,
    pub reference_len: usize,
}

fn ngram_counts(tokens: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut counts = HashMap::new();
    for g in tokens.windows(n) {
        *counts.entry(g).or_insert(0) += 1;
    }
    counts
}

/// Corpus BLEU-4 with add-one smoothing on the 2- to 4-gram precisions.
pub fn bleu(hypotheses: &[Vec<u32>], references: &[Vec<u32>]) -> Result<BleuReport> {
    if hypotheses.is_empty() {
        return Err(Error::Metric("no hypotheses".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Metric(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0, 0);
    for (h, rf) in hypotheses.iter().zip(references) {
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            let refs = ngram_counts(rf, n);
            for (g, count) in ngram_counts(h, n) {
                matched[n - 1] += count.min(refs.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0; 4];
    for n in 0..4 {
        precisions[n] = if n == 0 {
            if total[0] == 0 {
                0.0
            } else {
                matched[0] as f64 / total[0] as f64
            }
        } else {
            (matched[n] + 1) as f64 / (total[n] + 1) as f64
        };
    }
    let brevity_penalty = if c == 0 {
        0.0
    } else if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    let score = if precisions[0] == 0.0 || brevity_penalty == 0.0 {
        0.0
    } else {
        brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp()
    };
    Ok(BleuReport {
        score,
        precisions,
        brevity_penalty,
        hypothesis_len: c,
        reference_len: r,
    })
}

/// Average Lagging of one sentence. `delays` are `g(1..|y|)`; `target_len`
/// is `|y|`. An empty output counts as lagging the whole source.
pub fn average_lag(delays: &[usize], source_len: usize, target_len: usize) -> Result<f64> {
    if source_len == 0 {
        return Err(Error::Contract("average lag of an empty source".into()));
    }
    if delays.is_empty() || target_len == 0 {
        return Ok(source_len as f64);
    }
    let rate = target_len as f64 / source_len as f64;
    let g = |i: usize| delays[i].min(source_len) as f64;
    let tau = delays.iter().position(|&d| d >= source_len).map_or(delays.len(), |p| p + 1);
    let sum: f64 = (0..tau).map(|i| g(i) - i as f64 / rate).sum();
    Ok(sum / tau as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    /// Mean AL over included sentences; NaN when none qualify.
    pub mean_al: f64,
    /// `None` for sentences below the length filter.
    pub per_sentence: Vec<Option<f64>>,
    pub excluded: usize,
}

/// `items` holds `(delays, source_len)` per sentence; the output length is
/// taken as `delays.len()`.
pub fn latency_report(items: &[(&[usize], usize)], min_source_len: usize) -> Result<LatencyReport> {
    let mut per_sentence = Vec::with_capacity(items.len());
    let (mut sum, mut count) = (0.0, 0usize);
    for &(delays, n) in items {
        if n < min_source_len {
            per_sentence.push(None);
            continue;
        }
        let al = average_lag(delays, n, delays.len())?;
        sum += al;
        count += 1;
        per_sentence.push(Some(al));
    }
    Ok(LatencyReport {
        mean_al: if count == 0 { f64::NAN } else { sum / count as f64 },
        excluded: items.len() - count,
        per_sentence,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub bleu: BleuReport,
    pub latency: LatencyReport,
    /// Mean over sentences of the average `g(i)`.
    pub mean_reads: f64,
    /// Decodes per pair; `Err` text for failures.
    pub outputs: Vec<std::result::Result<DecodeResult, String>>,
}

impl EvalReport {
    pub fn failures(&self) -> usize {
        self.outputs.iter().filter(|o| o.is_err()).count()
    }
}

/// Decodes every pair with `policy` and scores the result. Decoding is split
/// over `threads` workers; results are gathered in corpus order so the
/// report does not depend on the thread count.
pub fn evaluate_corpus(
    model: &Seq2SeqModel,
    policy: &(dyn ReadWritePolicy + Sync),
    corpus: &Corpus,
    opts: &DecodeOptions,
    min_source_len: usize,
    threads: usize,
) -> Result<EvalReport> {
    let decode = |k: usize| decode_stream(model, policy, &corpus.pairs[k].source, opts).map_err(|e| e.to_string());
    let n = corpus.len();
    let threads = threads.max(1).min(n.max(1));
    let outputs: Vec<_> = if threads == 1 {
        (0..n).map(decode).collect()
    } else {
        let chunk = n.div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let decode = &decode;
                    s.spawn(move || (t * chunk..((t + 1) * chunk).min(n)).map(decode).collect::<Vec<_>>())
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("decode worker panicked")).collect()
        })
    };

    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    let mut lat = Vec::new();
    let mut reads = 0.0;
    for (pair, out) in corpus.pairs.iter().zip(&outputs) {
        let Ok(r) = out else { continue };
        hyps.push(r.tokens.clone());
        refs.push(pair.target.clone());
        lat.push((r.delays.as_slice(), pair.source.len()));
        reads += if r.delays.is_empty() {
            pair.source.len() as f64
        } else {
            r.delays.iter().sum::<usize>() as f64 / r.delays.len() as f64
        };
    }
    if hyps.is_empty() {
        return Err(Error::Metric("every sentence failed to decode".into()));
    }
    let bleu = bleu(&hyps, &refs)?;
    let latency = latency_report(&lat, min_source_len)?;
    Ok(EvalReport {
        bleu,
        latency,
        mean_reads: reads / hyps.len() as f64,
        outputs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub delta: f32,
    pub bleu: f64,
    pub al: f64,
    pub mean_reads: f64,
    pub sentences: usize,
    /// Sentences that failed to decode, or the reason the whole row failed.
    pub failures: usize,
    pub error: Option<String>,
}

/// Decodes `corpus` once per delta with the same trained classifier.
#[allow(clippy::too_many_arguments)]
pub fn sweep_delta(
    model: &Seq2SeqModel,
    params: &PolicyParams,
    corpus: &Corpus,
    deltas: &[f32],
    opts: &DecodeOptions,
    min_source_len: usize,
    threads: usize,
) -> Result<Vec<SweepRow>> {
    if deltas.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::config("deltas", "must be sorted ascending"));
    }
    let mut rows = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let policy = LearnedPolicy::new(params.clone(), delta)?;
        let row = match evaluate_corpus(model, &policy, corpus, opts, min_source_len, threads) {
            Ok(r) => SweepRow {
                delta,
                bleu: r.bleu.score,
                al: r.latency.mean_al,
                mean_reads: r.mean_reads,
                sentences: corpus.len() - r.failures(),
                failures: r.failures(),
                error: None,
            },
            Err(e) => SweepRow {
                delta,
                bleu: f64::NAN,
                al: f64::NAN,
                mean_reads: f64::NAN,
                sentences: 0,
                failures: corpus.len(),
                error: Some(e.to_string()),
            },
        };
        rows.push(row);
    }
    Ok(rows)
}

pub const SWEEP_CSV_HEADER: &str = "delta,bleu,al,mean_reads,sentences";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{:.4},{:.4},{:.4},{:.4},{}",
            r.delta, r.bleu, r.al, r.mean_reads, r.sentences
        );
    }
    s
}

/// A bare SVG line chart of AL against delta.
pub fn sweep_svg(rows: &[SweepRow]) -> String {
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.al.is_finite())
        .map(|r| (r.delta as f64, r.al))
        .collect();
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n");
    let _ = writeln!(
        s,
        "<line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>",
        h - pad,
        w - pad,
        h - pad,
        h - pad
    );
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"12\">delta</text>", w / 2.0, h - 12.0);
    let _ = writeln!(s, "<text x=\"8\" y=\"{}\" font-size=\"12\">AL</text>", pad - 12.0);
    if !pts.is_empty() {
        let (x0, x1) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
        let (y0, y1) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
        let sx = |x: f64| pad + if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.5 } * (w - 2.0 * pad);
        let sy = |y: f64| h - pad - if y1 > y0 { (y - y0) / (y1 - y0) } else { 0.5 } * (h - 2.0 * pad);
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"steelblue\" points=\"{}\"/>", path.join(" "));
        for &(x, y) in &pts {
            let _ = writeln!(
                s,
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\"/><text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\">{x:.2}: {y:.2}</text>",
                sx(x),
                sy(y),
                sx(x) + 4.0,
                sy(y) - 4.0
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<u32> {
        s.bytes().filter(|b| *b != b' ').map(|b| b as u32).collect()
    }

    #[test]
    fn identical_corpus_scores_one() {
        let refs = vec![toks("a b c d e f"), toks("g h i")];
        let r = bleu(&refs, &refs).unwrap();
        assert_eq!(r.score, 1.0);
        assert_eq!(r.brevity_penalty, 1.0);
    }

    #[test]
    fn disjoint_tokens_score_zero() {
        let r = bleu(&[toks("a b c")], &[toks("x y z")]).unwrap();
        assert_eq!(r.score, 0.0);
    }

    #[test]
    fn short_hypothesis_is_penalized() {
        let r = bleu(&[toks("a b c d")], &[toks("a b c d e")]).unwrap();
        assert_eq!(r.precisions, [1.0; 4]);
        let bp = (1.0f64 - 5.0 / 4.0).exp();
        assert!((r.brevity_penalty - bp).abs() < 1e-12);
        assert!((r.score - 0.7788).abs() < 1e-4);
    }

    #[test]
    fn bleu_input_errors() {
        assert!(bleu(&[], &[]).is_err());
        assert!(bleu(&[toks("a")], &[]).is_err());
    }

    #[test]
    fn al_hand_cases() {
        let full = vec![10; 10];
        assert_eq!(average_lag(&full, 10, 10).unwrap(), 10.0);
        let wait3: Vec<usize> = (1..=10).map(|i| (i + 2).min(10)).collect();
        assert!((average_lag(&wait3, 10, 10).unwrap() - 3.0).abs() < 1e-12);
        let simul: Vec<usize> = (1..=10).collect();
        assert!((average_lag(&simul, 10, 10).unwrap() - 1.0).abs() < 1e-12);
        assert!(average_lag(&[1], 0, 1).is_err());
    }

    #[test]
    fn short_sentences_are_filtered() {
        let a = [3usize, 3, 3];
        let b = vec![9usize; 9];
        let r = latency_report(&[(&a, 3), (&b, 9)], 8).unwrap();
        assert_eq!(r.excluded, 1);
        assert_eq!(r.per_sentence[0], None);
        assert_eq!(r.mean_al, 9.0);
    }

    #[test]
    fn csv_format() {
        let row = SweepRow {
            delta: 0.5,
            bleu: 0.91234,
            al: 3.5,
            mean_reads: 4.0,
            sentences: 500,
            failures: 0,
            error: None,
        };
        assert_eq!(
            sweep_csv(std::slice::from_ref(&row)),
            "delta,bleu,al,mean_reads,sentences\n0.5000,0.9123,3.5000,4.0000,500\n"
        );
        assert!(sweep_svg(&[row]).starts_with("<svg"));
    }
}

//! Streaming inference: the read/write policy interface, greedy and beam
//! decoders that interleave reads and writes, and an incremental session.
//!
//! A decision at the newest source position `j` is only taken once token
//! `j + 1` has arrived or the stream has been closed, because whether the
//! source is exhausted changes the decision (forced WRITE, EOS unmasked).
//! With that one-token lookahead, pushing tokens one at a time gives exactly
//! the result of decoding the whole sentence at once.

use std::io::Write;
use std::sync::Mutex;

use crate::corpus::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::policy::{check_delta, Action, Decision, PolicyParams};
use crate::rng::SplitMix64;
use crate::seq2seq::{CausalEncoder, DecoderState, EncoderMode, EncoderStates, Seq2SeqModel};
use crate::tensor::{argmax, log_softmax_masked};

/// What a policy sees when asked to read or write.
#[derive(Debug, Clone, Copy)]
pub struct PolicyContext<'a> {
    /// Prospective last-layer decoder state for target `i`.
    pub decoder_state: &'a [f32],
    /// Newest visible encoder state `h_j`.
    pub encoder_state: &'a [f32],
    pub i: usize,
    pub j: usize,
    pub source_exhausted: bool,
}

pub trait ReadWritePolicy {
    /// The policy's own decision, ignoring exhaustion.
    fn score(&self, ctx: &PolicyContext<'_>) -> Result<Decision>;

    /// Like [`score`](Self::score), but always WRITE once the source is exhausted.
    fn decide(&self, ctx: &PolicyContext<'_>) -> Result<Decision> {
        let mut d = self.score(ctx)?;
        if ctx.source_exhausted {
            d.action = Action::Write;
        }
        Ok(d)
    }
}

/// The trained classifier thresholded at `delta`.
#[derive(Debug, Clone)]
pub struct LearnedPolicy {
    pub params: PolicyParams,
    delta: f32,
}

impl LearnedPolicy {
    pub fn new(params: PolicyParams, delta: f32) -> Result<Self> {
        check_delta(delta)?;
        Ok(LearnedPolicy { params, delta })
    }

    pub fn delta(&self) -> f32 {
        self.delta
    }

    pub fn with_delta(&self, delta: f32) -> Result<Self> {
        LearnedPolicy::new(self.params.clone(), delta)
    }
}

impl ReadWritePolicy for LearnedPolicy {
    fn score(&self, ctx: &PolicyContext<'_>) -> Result<Decision> {
        self.params.decide(ctx.decoder_state, ctx.encoder_state, self.delta)
    }
}

/// Samples WRITE with probability `p_write`. Not deterministic across
/// calls; kept for experiments only.
#[derive(Debug)]
pub struct SampledPolicy {
    pub params: PolicyParams,
    rng: Mutex<SplitMix64>,
}

impl SampledPolicy {
    pub fn new(params: PolicyParams, seed: u64) -> Self {
        SampledPolicy {
            params,
            rng: Mutex::new(SplitMix64::new(seed)),
        }
    }
}

impl ReadWritePolicy for SampledPolicy {
    fn score(&self, ctx: &PolicyContext<'_>) -> Result<Decision> {
        let p = self.params.write_probability(ctx.decoder_state, ctx.encoder_state)?;
        let u = self.rng.lock().unwrap_or_else(|e| e.into_inner()).next_f32();
        Ok(Decision {
            p_write: p,
            action: if u < p { Action::Write } else { Action::Read },
            delta: u,
        })
    }
}

/// Wait-k: read `k` tokens, then alternate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WaitKPolicy {
    k: usize,
}

impl WaitKPolicy {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("k", "wait-k needs k >= 1"));
        }
        Ok(WaitKPolicy { k })
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

/// WRITE iff `j >= i + k - 1` or the source is exhausted, which yields
/// `g(i) = min(i + k - 1, |x|)`.
pub fn wait_k_decide(k: usize, i: usize, j: usize, source_exhausted: bool) -> Decision {
    let write = source_exhausted || j + 1 >= i + k;
    Decision {
        p_write: if write { 1.0 } else { 0.0 },
        action: if write { Action::Write } else { Action::Read },
        delta: 0.5,
    }
}

impl ReadWritePolicy for WaitKPolicy {
    fn score(&self, ctx: &PolicyContext<'_>) -> Result<Decision> {
        Ok(wait_k_decide(self.k, ctx.i, ctx.j, ctx.source_exhausted))
    }
}

/// Reads the whole source before writing anything.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForcedReadPolicy;

impl ReadWritePolicy for ForcedReadPolicy {
    fn score(&self, _: &PolicyContext<'_>) -> Result<Decision> {
        Ok(Decision::threshold(0.0, 0.5))
    }
}

/// Never reads voluntarily.
#[derive(Debug, Clone, Copy, Default)]
pub struct AllWritePolicy;

impl ReadWritePolicy for AllWritePolicy {
    fn score(&self, _: &PolicyContext<'_>) -> Result<Decision> {
        Ok(Decision::threshold(1.0, 0.5))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeOptions {
    pub beam_size: usize,
    /// Output is capped at `max_len_factor * |x| + 10` tokens.
    pub max_len_factor: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            beam_size: 1,
            max_len_factor: 2,
        }
    }
}

impl DecodeOptions {
    fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::config("beam_size", "must be at least 1"));
        }
        Ok(())
    }

    fn cap(&self, source_len: usize) -> usize {
        self.max_len_factor * source_len + 10
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecisionRecord {
    pub i: usize,
    pub j: usize,
    pub p_write: f32,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    /// Emitted tokens, EOS excluded.
    pub tokens: Vec<u32>,
    /// `g(i)`: source tokens read when token `i` was written.
    pub delays: Vec<usize>,
    pub trace: Vec<DecisionRecord>,
    pub reads_total: usize,
    pub calls: usize,
    /// Hit the length cap before EOS.
    pub truncated: bool,
}

/// Read-synchrony bookkeeping of a beam decode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BeamTrace {
    pub iterations: usize,
    pub sync_violations: usize,
}

/// Writes one `pair_id i j p_write action` line per decision.
pub fn write_trace(out: &mut impl Write, pair_id: usize, trace: &[DecisionRecord]) -> std::io::Result<()> {
    for r in trace {
        writeln!(out, "{pair_id} {} {} {:.6} {}", r.i, r.j, r.p_write, r.action)?;
    }
    Ok(())
}

fn output_log_probs(logits: &[f32], exhausted: bool) -> Vec<f32> {
    log_softmax_masked(logits, |t| {
        let t = t as u32;
        t != PAD && t != BOS && (exhausted || t != EOS)
    })
}

fn check_causal(model: &Seq2SeqModel) -> Result<()> {
    if model.config.encoder_mode != EncoderMode::Causal {
        return Err(Error::Contract("streaming decoding needs a causal-encoder model".into()));
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct GreedyCore {
    i: usize,
    j: usize,
    state: DecoderState,
    prev: u32,
    tokens: Vec<u32>,
    delays: Vec<usize>,
    trace: Vec<DecisionRecord>,
    calls: usize,
    finished: bool,
    truncated: bool,
}

impl GreedyCore {
    fn new(model: &Seq2SeqModel) -> Self {
        GreedyCore {
            i: 1,
            j: 0,
            state: model.initial_state(),
            prev: BOS,
            tokens: Vec::new(),
            delays: Vec::new(),
            trace: Vec::new(),
            calls: 0,
            finished: false,
            truncated: false,
        }
    }

    /// Runs until finished or until more input is needed.
    fn advance(
        &mut self,
        model: &Seq2SeqModel,
        policy: &dyn ReadWritePolicy,
        enc: &EncoderStates,
        done: bool,
        opts: &DecodeOptions,
    ) -> Result<()> {
        let n = enc.len();
        while !self.finished && n > 0 {
            self.j = self.j.max(1);
            if self.j == n && !done {
                return Ok(());
            }
            if self.tokens.len() >= opts.cap(n) {
                if done {
                    self.finished = true;
                    self.truncated = true;
                }
                return Ok(());
            }
            let exhausted = done && self.j == n;
            let step = model.decode_step(self.prev, &self.state, enc, self.j)?;
            self.calls += 1;
            let d = policy.decide(&PolicyContext {
                decoder_state: step.state.top(),
                encoder_state: enc.row(self.j - 1),
                i: self.i,
                j: self.j,
                source_exhausted: exhausted,
            })?;
            let action = if exhausted { Action::Write } else { d.action };
            self.trace.push(DecisionRecord {
                i: self.i,
                j: self.j,
                p_write: d.p_write,
                action,
            });
            match action {
                Action::Read => self.j += 1,
                Action::Write => {
                    let tok = argmax(&output_log_probs(&step.logits, exhausted)) as u32;
                    if tok == EOS {
                        self.finished = true;
                    } else {
                        self.tokens.push(tok);
                        self.delays.push(self.j);
                    }
                    self.state = step.state;
                    self.prev = tok;
                    self.i += 1;
                }
            }
        }
        Ok(())
    }

    fn result(&self) -> DecodeResult {
        DecodeResult {
            tokens: self.tokens.clone(),
            delays: self.delays.clone(),
            trace: self.trace.clone(),
            reads_total: self.j,
            calls: self.calls,
            truncated: self.truncated,
        }
    }
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<u32>,
    delays: Vec<usize>,
    trace: Vec<DecisionRecord>,
    logprob: f32,
    state: DecoderState,
    prev: u32,
    reads: usize,
    /// Classified READ at the current `j`; waits for the group read.
    pending_read: bool,
    finished: bool,
    truncated: bool,
}

impl Hypothesis {
    fn normalized_score(&self) -> f32 {
        let eos = usize::from(self.finished && !self.truncated);
        self.logprob / (self.tokens.len() + eos).max(1) as f32
    }
}

/// Top `k` allowed tokens by log-probability, ties to the smaller id.
fn top_k(logp: &[f32], k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..logp.len()).filter(|&t| logp[t] > f32::NEG_INFINITY).collect();
    ids.sort_by(|&a, &b| logp[b].total_cmp(&logp[a]).then(a.cmp(&b)));
    ids.truncate(k);
    ids
}

fn best_hypothesis(beam: &[Hypothesis]) -> &Hypothesis {
    let mut best = &beam[0];
    for h in &beam[1..] {
        if h.normalized_score() > best.normalized_score() {
            best = h;
        }
    }
    best
}

#[derive(Debug, Clone)]
struct BeamCore {
    beam: Vec<Hypothesis>,
    j: usize,
    calls: usize,
    done: bool,
    stats: BeamTrace,
}

impl BeamCore {
    fn new(model: &Seq2SeqModel) -> Self {
        BeamCore {
            beam: vec![Hypothesis {
                tokens: Vec::new(),
                delays: Vec::new(),
                trace: Vec::new(),
                logprob: 0.0,
                state: model.initial_state(),
                prev: BOS,
                reads: 0,
                pending_read: false,
                finished: false,
                truncated: false,
            }],
            j: 0,
            calls: 0,
            done: false,
            stats: BeamTrace::default(),
        }
    }

    fn advance(
        &mut self,
        model: &Seq2SeqModel,
        policy: &dyn ReadWritePolicy,
        enc: &EncoderStates,
        done: bool,
        opts: &DecodeOptions,
    ) -> Result<()> {
        let n = enc.len();
        let k = opts.beam_size;
        let cap = opts.cap(n);
        while !self.done && n > 0 {
            if self.j == 0 {
                self.j = 1;
                for h in &mut self.beam {
                    h.reads = 1;
                }
            }
            if self.j == n && !done {
                return Ok(());
            }
            let exhausted = done && self.j == n;
            let j = self.j;
            // Expand WRITE-classified hypotheses at this j until the whole
            // beam wants to read.
            loop {
                self.stats.iterations += 1;
                if self.beam.iter().any(|h| h.reads != j) {
                    self.stats.sync_violations += 1;
                }
                debug_assert!(self.beam.iter().all(|h| h.reads == j));
                let over_cap = |h: &Hypothesis| !h.finished && !h.pending_read && h.tokens.len() >= cap;
                if self.beam.iter().any(over_cap) {
                    if !done {
                        return Ok(());
                    }
                    for h in self.beam.iter_mut().filter(|h| over_cap(h)) {
                        h.finished = true;
                        h.truncated = true;
                    }
                }
                let mut candidates = Vec::with_capacity(self.beam.len() * k);
                let mut any_write = false;
                for mut h in std::mem::take(&mut self.beam) {
                    if h.finished || h.pending_read {
                        candidates.push(h);
                        continue;
                    }
                    let step = model.decode_step(h.prev, &h.state, enc, j)?;
                    self.calls += 1;
                    let i = h.tokens.len() + 1;
                    let d = policy.decide(&PolicyContext {
                        decoder_state: step.state.top(),
                        encoder_state: enc.row(j - 1),
                        i,
                        j,
                        source_exhausted: exhausted,
                    })?;
                    let action = if exhausted { Action::Write } else { d.action };
                    h.trace.push(DecisionRecord {
                        i,
                        j,
                        p_write: d.p_write,
                        action,
                    });
                    if action == Action::Read {
                        h.pending_read = true;
                        candidates.push(h);
                        continue;
                    }
                    any_write = true;
                    let logp = output_log_probs(&step.logits, exhausted);
                    for tok in top_k(&logp, k) {
                        let tok = tok as u32;
                        let mut next = Hypothesis {
                            tokens: h.tokens.clone(),
                            delays: h.delays.clone(),
                            trace: h.trace.clone(),
                            logprob: h.logprob + logp[tok as usize],
                            state: step.state.clone(),
                            prev: tok,
                            reads: j,
                            pending_read: false,
                            finished: tok == EOS,
                            truncated: false,
                        };
                        if tok != EOS {
                            next.tokens.push(tok);
                            next.delays.push(j);
                        }
                        candidates.push(next);
                    }
                }
                if !any_write {
                    self.beam = candidates;
                    break;
                }
                // stable: equal scores keep generation order
                candidates.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
                candidates.truncate(k);
                self.beam = candidates;
                if self.beam.iter().all(|h| h.finished) {
                    break;
                }
            }
            if exhausted || self.beam.iter().all(|h| h.finished) {
                self.done = true;
                return Ok(());
            }
            self.j += 1;
            for h in &mut self.beam {
                h.pending_read = false;
                h.reads = self.j;
            }
        }
        Ok(())
    }

    /// Tokens shared by every hypothesis in the beam; later beams only
    /// extend it.
    fn common_prefix(&self) -> &[u32] {
        let first = &self.beam[0].tokens;
        let len = self.beam[1..].iter().fold(first.len(), |len, h| {
            first[..len].iter().zip(&h.tokens).take_while(|(a, b)| a == b).count()
        });
        &first[..len]
    }

    fn result(&self) -> DecodeResult {
        let best = best_hypothesis(&self.beam);
        DecodeResult {
            tokens: best.tokens.clone(),
            delays: best.delays.clone(),
            trace: best.trace.clone(),
            reads_total: self.j,
            calls: self.calls,
            truncated: best.truncated,
        }
    }
}

#[derive(Debug, Clone)]
enum Core {
    Greedy(GreedyCore),
    Beam(BeamCore),
}

impl Core {
    fn new(model: &Seq2SeqModel, opts: &DecodeOptions) -> Self {
        if opts.beam_size == 1 {
            Core::Greedy(GreedyCore::new(model))
        } else {
            Core::Beam(BeamCore::new(model))
        }
    }
}

/// Greedy streaming decode of a complete source sentence.
pub fn greedy_stream(
    model: &Seq2SeqModel,
    policy: &dyn ReadWritePolicy,
    source: &[u32],
    max_len_factor: usize,
) -> Result<DecodeResult> {
    check_causal(model)?;
    if source.is_empty() {
        return Err(Error::Contract("source must be non-empty".into()));
    }
    let enc = model.encode(source, EncoderMode::Causal)?;
    let opts = DecodeOptions {
        beam_size: 1,
        max_len_factor,
    };
    let mut core = GreedyCore::new(model);
    core.advance(model, policy, &enc, true, &opts)?;
    Ok(core.result())
}

/// Beam streaming decode with group reads; returns the best hypothesis.
pub fn beam_stream(
    model: &Seq2SeqModel,
    policy: &dyn ReadWritePolicy,
    source: &[u32],
    opts: &DecodeOptions,
) -> Result<(DecodeResult, BeamTrace)> {
    opts.validate()?;
    check_causal(model)?;
    if source.is_empty() {
        return Err(Error::Contract("source must be non-empty".into()));
    }
    let enc = model.encode(source, EncoderMode::Causal)?;
    let mut core = BeamCore::new(model);
    core.advance(model, policy, &enc, true, opts)?;
    Ok((core.result(), core.stats))
}

/// Greedy for `beam_size == 1`, beam search otherwise.
pub fn decode_stream(
    model: &Seq2SeqModel,
    policy: &dyn ReadWritePolicy,
    source: &[u32],
    opts: &DecodeOptions,
) -> Result<DecodeResult> {
    opts.validate()?;
    if opts.beam_size == 1 {
        greedy_stream(model, policy, source, opts.max_len_factor)
    } else {
        Ok(beam_stream(model, policy, source, opts)?.0)
    }
}

/// Conventional greedy decoding with the whole source visible.
pub fn greedy_full(model: &Seq2SeqModel, source: &[u32], max_len_factor: usize) -> Result<Vec<u32>> {
    let enc = model.encode(source, model.config.encoder_mode)?;
    let n = enc.len();
    let mut state = model.initial_state();
    let mut prev = BOS;
    let mut out = Vec::new();
    while out.len() < max_len_factor * n + 10 {
        let step = model.decode_step(prev, &state, &enc, n)?;
        let tok = argmax(&output_log_probs(&step.logits, true)) as u32;
        if tok == EOS {
            break;
        }
        out.push(tok);
        state = step.state;
        prev = tok;
    }
    Ok(out)
}

/// Conventional beam search with the whole source visible.
pub fn beam_full(model: &Seq2SeqModel, source: &[u32], opts: &DecodeOptions) -> Result<Vec<u32>> {
    opts.validate()?;
    let enc = model.encode(source, model.config.encoder_mode)?;
    let n = enc.len();
    let cap = opts.cap(n);
    let mut beam = BeamCore::new(model).beam;
    while !beam.iter().all(|h| h.finished) {
        let mut candidates = Vec::new();
        for h in beam {
            if h.finished {
                candidates.push(h);
            } else if h.tokens.len() >= cap {
                candidates.push(Hypothesis {
                    finished: true,
                    truncated: true,
                    ..h
                });
            } else {
                let step = model.decode_step(h.prev, &h.state, &enc, n)?;
                let logp = output_log_probs(&step.logits, true);
                for tok in top_k(&logp, opts.beam_size) {
                    let mut next = h.clone();
                    next.logprob += logp[tok];
                    next.state = step.state.clone();
                    next.prev = tok as u32;
                    if tok as u32 == EOS {
                        next.finished = true;
                    } else {
                        next.tokens.push(tok as u32);
                    }
                    candidates.push(next);
                }
            }
        }
        candidates.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
        candidates.truncate(opts.beam_size);
        beam = candidates;
    }
    Ok(best_hypothesis(&beam).tokens.clone())
}

/// Incremental decoding over a source that arrives one token at a time.
pub struct StreamSession<'a> {
    model: &'a Seq2SeqModel,
    policy: &'a dyn ReadWritePolicy,
    opts: DecodeOptions,
    encoder: CausalEncoder,
    core: Core,
    finished: bool,
    committed: Vec<u32>,
}

impl<'a> StreamSession<'a> {
    pub fn new(model: &'a Seq2SeqModel, policy: &'a dyn ReadWritePolicy, opts: DecodeOptions) -> Result<Self> {
        opts.validate()?;
        check_causal(model)?;
        Ok(StreamSession {
            model,
            policy,
            opts,
            encoder: CausalEncoder::new(model),
            core: Core::new(model, &opts),
            finished: false,
            committed: Vec::new(),
        })
    }

    pub fn push_token(&mut self, id: u32) -> Result<()> {
        if self.finished {
            return Err(Error::Session("push_token after finish".into()));
        }
        self.encoder.push(self.model, id)?;
        self.run(false)
    }

    /// Marks the end of the source and completes the translation.
    pub fn finish(&mut self) -> Result<()> {
        if self.finished {
            return Err(Error::Session("finish called twice".into()));
        }
        if self.encoder.states().is_empty() {
            return Err(Error::Session("finish before any source token".into()));
        }
        self.finished = true;
        self.run(true)
    }

    fn run(&mut self, done: bool) -> Result<()> {
        let enc = self.encoder.states();
        match &mut self.core {
            Core::Greedy(c) => {
                c.advance(self.model, self.policy, enc, done, &self.opts)?;
                self.committed.clone_from(&c.tokens);
            }
            Core::Beam(c) => {
                c.advance(self.model, self.policy, enc, done, &self.opts)?;
                let out = if c.done { c.result().tokens } else { c.common_prefix().to_vec() };
                if out.len() > self.committed.len() {
                    self.committed = out;
                }
            }
        }
        Ok(())
    }

    /// Tokens committed so far. Never shrinks or changes.
    pub fn pull_outputs(&self) -> &[u32] {
        &self.committed
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn source_len(&self) -> usize {
        self.encoder.states().len()
    }

    /// The final result, available after [`finish`](Self::finish).
    pub fn result(&self) -> Option<DecodeResult> {
        if !self.finished {
            return None;
        }
        Some(match &self.core {
            Core::Greedy(c) => c.result(),
            Core::Beam(c) => c.result(),
        })
    }

    pub fn beam_trace(&self) -> Option<BeamTrace> {
        match &self.core {
            Core::Beam(c) => Some(c.stats),
            Core::Greedy(_) => None,
        }
    }
}

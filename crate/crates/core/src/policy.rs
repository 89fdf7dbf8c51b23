//! Autoregressive token policies with exact log-probabilities and
//! closed-form gradients.
//!
//! Two parameterisations are provided:
//!
//! * **tabular**: a conditional softmax whose logit row is selected by the
//!   last `order` tokens of `prompt ⊕ prefix` (begin-of-sequence padded).
//! * **linear bag**: logits are a linear function of context features. Row
//!   features (bias, answer position, previous token, bag of prompt tokens,
//!   bag of the previous-answer and feedback segments of a feedback-augmented
//!   prompt) each own a logit row; relational features (copy-from-feedback,
//!   copy-from-previous-answer, repeat) each own a single scalar weight that
//!   is added to the logit of every token they fire for. Because feedback
//!   tokens are features of every position, feedback in a FAP shifts all
//!   subsequent logits.
//!
//! All log-probabilities are of the temperature-scaled softmax, clamped at
//! [`PROB_FLOOR`] before the log.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::vocab::{TokenId, Vocab};
use crate::{Error, Result};

pub const PROB_FLOOR: f64 = 1e-30;

const CHECKPOINT_MAGIC: &[u8; 8] = b"FBOSPOL\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureSpec {
    pub bias: bool,
    pub position: bool,
    pub prev_token: bool,
    pub prompt_bag: bool,
    /// Conjunction of each prompt token with the answer position.
    pub prompt_position: bool,
    pub answer_bag: bool,
    pub feedback_bag: bool,
    pub copy_feedback: bool,
    pub copy_answer: bool,
    pub repeat: bool,
    /// Positions at or beyond this share the last position slot.
    pub max_position: usize,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            bias: true,
            position: true,
            prev_token: true,
            prompt_bag: true,
            prompt_position: true,
            answer_bag: true,
            feedback_bag: true,
            copy_feedback: true,
            copy_answer: true,
            repeat: true,
            max_position: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyKind {
    Tabular { order: usize, max_rows: usize },
    LinearBag(FeatureSpec),
}

impl PolicyKind {
    pub fn tabular(order: usize) -> Self {
        PolicyKind::Tabular {
            order,
            max_rows: 1 << 16,
        }
    }
}

/// Row offsets of the linear-bag weight matrix.
#[derive(Debug, Clone)]
struct BagLayout {
    position: Option<usize>,
    prev: Option<usize>,
    prompt_bag: Option<usize>,
    prompt_position: Option<usize>,
    answer_bag: Option<usize>,
    feedback_bag: Option<usize>,
    rows: usize,
    copy_feedback: Option<usize>,
    copy_answer: Option<usize>,
    repeat: Option<usize>,
    relational: usize,
}

impl BagLayout {
    fn new(spec: &FeatureSpec, v: usize) -> Self {
        let mut rows = 0usize;
        let mut take = |on: bool, n: usize| {
            on.then(|| {
                let at = rows;
                rows += n;
                at
            })
        };
        let p = spec.max_position.max(1);
        let _bias = take(spec.bias, 1);
        let position = take(spec.position, p);
        let prev = take(spec.prev_token, v + 1);
        let prompt_bag = take(spec.prompt_bag, v);
        let prompt_position = take(spec.prompt_position, v * p);
        let answer_bag = take(spec.answer_bag, v);
        let feedback_bag = take(spec.feedback_bag, v);
        let mut relational = 0usize;
        let mut rel = |on: bool| {
            on.then(|| {
                let at = relational;
                relational += 1;
                at
            })
        };
        let copy_feedback = rel(spec.copy_feedback);
        let copy_answer = rel(spec.copy_answer);
        let repeat = rel(spec.repeat);
        BagLayout {
            position,
            prev,
            prompt_bag,
            prompt_position,
            answer_bag,
            feedback_bag,
            rows,
            copy_feedback,
            copy_answer,
            repeat,
            relational,
        }
    }
}

#[derive(Debug, Clone)]
enum Layout {
    Tabular { order: usize, exact_rows: usize },
    Bag(BagLayout),
}

/// Live policy parameters θ.
#[derive(Debug, Clone)]
pub struct PolicyParams {
    kind: PolicyKind,
    vocab: Vocab,
    temperature: f64,
    weights: Vec<f64>,
    layout: Layout,
}

impl PartialEq for PolicyParams {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.vocab == other.vocab
            && self.temperature.to_bits() == other.temperature.to_bits()
            && self.weights.len() == other.weights.len()
            && self
                .weights
                .iter()
                .zip(&other.weights)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// A prompt split into the three segments of a feedback-augmented prompt.
/// Plain prompts have empty answer and feedback segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSegments<'a> {
    pub query: &'a [TokenId],
    pub answer: &'a [TokenId],
    pub feedback: &'a [TokenId],
}

pub fn split_segments<'a>(vocab: &Vocab, prompt: &'a [TokenId]) -> PromptSegments<'a> {
    let [s1, s2, s3] = vocab.separators();
    let Some(p1) = prompt.iter().position(|&t| t == s1) else {
        return PromptSegments {
            query: prompt,
            answer: &[],
            feedback: &[],
        };
    };
    let rest = &prompt[p1 + 1..];
    let p2 = rest.iter().position(|&t| t == s2).unwrap_or(rest.len());
    let answer = &rest[..p2];
    let rest = rest.get(p2 + 1..).unwrap_or(&[]);
    let p3 = rest.iter().position(|&t| t == s3).unwrap_or(rest.len());
    PromptSegments {
        query: &prompt[..p1],
        answer,
        feedback: &rest[..p3],
    }
}

fn distinct(tokens: &[TokenId]) -> Vec<TokenId> {
    let mut v = tokens.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// Per-prompt feature cache, computed once per rollout.
#[derive(Debug, Clone)]
pub struct Prepared {
    prompt: Vec<TokenId>,
    static_rows: Vec<usize>,
    query_tokens: Vec<TokenId>,
    answer_tokens: Vec<TokenId>,
    feedback_tokens: Vec<TokenId>,
}

/// A conditioning prompt together with the answer prefix generated so far.
#[derive(Debug, Clone, Copy)]
pub struct Context<'a> {
    pub prompt: &'a [TokenId],
    pub prefix: &'a [TokenId],
}

impl<'a> Context<'a> {
    pub fn new(prompt: &'a [TokenId], prefix: &'a [TokenId]) -> Self {
        Context { prompt, prefix }
    }
}

/// Sparse ∂ log π(token | context) / ∂θ.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LogProbGradient {
    pub entries: Vec<(usize, f64)>,
}

impl LogProbGradient {
    pub fn get(&self, index: usize) -> f64 {
        self.entries.iter().filter(|(i, _)| *i == index).map(|(_, g)| g).sum()
    }

    pub fn to_dense(&self, len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        for &(i, g) in &self.entries {
            out[i] += g;
        }
        out
    }
}

/// Log-probability of one token plus the full next-token distribution it
/// was read from.
#[derive(Debug, Clone)]
pub struct TokenEval {
    pub log_prob: f64,
    pub probs: Vec<f64>,
    pub clamped: bool,
}

fn log_softmax(logits: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    let logp: Vec<f64> = logits.iter().map(|z| z - lse).collect();
    let probs = logp.iter().map(|l| l.exp()).collect();
    (logp, probs)
}

fn floored_log(logp: f64) -> (f64, bool) {
    if logp < PROB_FLOOR.ln() {
        (PROB_FLOOR.ln(), true)
    } else {
        (logp, false)
    }
}

impl PolicyParams {
    /// All-zero (uniform) initialisation.
    pub fn uniform(kind: PolicyKind, vocab: Vocab) -> Result<Self> {
        Self::with_temperature(kind, vocab, 1.0)
    }

    pub fn with_temperature(kind: PolicyKind, vocab: Vocab, temperature: f64) -> Result<Self> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::InvalidPolicy(format!(
                "temperature must be positive and finite, got {temperature}"
            )));
        }
        let v = vocab.size();
        let (layout, len) = match &kind {
            PolicyKind::Tabular { order, max_rows } => {
                if *order == 0 {
                    return Err(Error::InvalidPolicy("tabular order must be >= 1".into()));
                }
                if *max_rows == 0 {
                    return Err(Error::InvalidPolicy("max_rows must be >= 1".into()));
                }
                let exact = (v as u128 + 1).checked_pow(*order as u32).unwrap_or(u128::MAX);
                let exact_rows = exact.min(*max_rows as u128) as usize;
                // One extra row serves every context key that does not fit.
                let rows = exact_rows + 1;
                (
                    Layout::Tabular {
                        order: *order,
                        exact_rows,
                    },
                    rows * v,
                )
            }
            PolicyKind::LinearBag(spec) => {
                if spec.max_position == 0 {
                    return Err(Error::InvalidPolicy("max_position must be >= 1".into()));
                }
                let l = BagLayout::new(spec, v);
                if l.rows == 0 && l.relational == 0 {
                    return Err(Error::InvalidPolicy("linear bag needs at least one feature".into()));
                }
                let len = l.rows * v + l.relational;
                (Layout::Bag(l), len)
            }
        };
        Ok(PolicyParams {
            kind,
            vocab,
            temperature,
            weights: vec![0.0; len],
            layout,
        })
    }

    /// Weights drawn uniformly from `[-scale, scale]`.
    pub fn randomized(kind: PolicyKind, vocab: Vocab, scale: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut p = Self::uniform(kind, vocab)?;
        for w in &mut p.weights {
            *w = rng.random_range(-scale..=scale);
        }
        Ok(p)
    }

    pub fn kind(&self) -> &PolicyKind {
        &self.kind
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn num_params(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn set_weights(&mut self, w: &[f64]) -> Result<()> {
        if w.len() != self.weights.len() {
            return Err(Error::InvalidPolicy(format!(
                "weight length {} does not match policy ({})",
                w.len(),
                self.weights.len()
            )));
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidPolicy("non-finite weight".into()));
        }
        self.weights.copy_from_slice(w);
        Ok(())
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        tokens.iter().try_for_each(|&t| self.vocab.check(t))
    }

    /// Builds the per-prompt feature cache.
    pub fn prepare(&self, prompt: &[TokenId]) -> Prepared {
        let mut prep = Prepared {
            prompt: prompt.to_vec(),
            static_rows: Vec::new(),
            query_tokens: Vec::new(),
            answer_tokens: Vec::new(),
            feedback_tokens: Vec::new(),
        };
        if let Layout::Bag(l) = &self.layout {
            let seg = split_segments(&self.vocab, prompt);
            prep.query_tokens = distinct(seg.query);
            prep.answer_tokens = distinct(seg.answer);
            prep.feedback_tokens = distinct(seg.feedback);
            if let PolicyKind::LinearBag(spec) = &self.kind {
                if spec.bias {
                    prep.static_rows.push(0);
                }
            }
            if let Some(o) = l.prompt_bag {
                prep.static_rows
                    .extend(prep.query_tokens.iter().map(|&t| o + t as usize));
            }
            if let Some(o) = l.answer_bag {
                prep.static_rows
                    .extend(prep.answer_tokens.iter().map(|&t| o + t as usize));
            }
            if let Some(o) = l.feedback_bag {
                prep.static_rows
                    .extend(prep.feedback_tokens.iter().map(|&t| o + t as usize));
            }
            debug_assert!(prep.static_rows.iter().all(|&r| r < l.rows));
        }
        prep
    }

    fn max_position(&self) -> usize {
        match &self.kind {
            PolicyKind::LinearBag(s) => s.max_position.max(1),
            PolicyKind::Tabular { .. } => 1,
        }
    }

    /// Active logit rows (all with feature value 1) for the next token.
    fn active_rows(&self, prep: &Prepared, prefix: &[TokenId], out: &mut Vec<usize>) {
        out.clear();
        let v = self.vocab.size();
        match &self.layout {
            Layout::Tabular { order, exact_rows, .. } => {
                let bos = v as u128;
                let mut key: u128 = 0;
                let mut overflow = false;
                let full = prep.prompt.iter().chain(prefix.iter());
                let n_ctx = prep.prompt.len() + prefix.len();
                let mut ctx: Vec<u128> = full.skip(n_ctx.saturating_sub(*order)).map(|&t| t as u128).collect();
                while ctx.len() < *order {
                    ctx.insert(0, bos);
                }
                for d in ctx {
                    match key.checked_mul(v as u128 + 1).and_then(|k| k.checked_add(d)) {
                        Some(k) => key = k,
                        None => {
                            overflow = true;
                            break;
                        }
                    }
                }
                let row = if overflow || key >= *exact_rows as u128 {
                    *exact_rows
                } else {
                    key as usize
                };
                out.push(row);
            }
            Layout::Bag(l) => {
                out.extend_from_slice(&prep.static_rows);
                let pos = prefix.len().min(self.max_position() - 1);
                if let Some(o) = l.position {
                    out.push(o + pos);
                }
                if let Some(o) = l.prev {
                    let prev = prefix.last().map_or(v, |&t| t as usize);
                    out.push(o + prev);
                }
                if let Some(o) = l.prompt_position {
                    let p = self.max_position();
                    out.extend(prep.query_tokens.iter().map(|&t| o + t as usize * p + pos));
                }
            }
        }
    }

    /// Relational features firing for the next token: (scalar weight index,
    /// tokens the feature is 1 for).
    fn relational<'p>(&self, prep: &'p Prepared, prefix: &'p [TokenId]) -> Vec<(usize, &'p [TokenId])> {
        let mut out = Vec::new();
        if let Layout::Bag(l) = &self.layout {
            let base = l.rows * self.vocab.size();
            if let Some(i) = l.copy_feedback {
                out.push((base + i, prep.feedback_tokens.as_slice()));
            }
            if let Some(i) = l.copy_answer {
                out.push((base + i, prep.answer_tokens.as_slice()));
            }
            if let Some(i) = l.repeat {
                out.push((base + i, prefix));
            }
        }
        out
    }

    fn logits_with(&self, prep: &Prepared, prefix: &[TokenId], rows: &mut Vec<usize>) -> Vec<f64> {
        let v = self.vocab.size();
        self.active_rows(prep, prefix, rows);
        let mut z = vec![0.0; v];
        for &r in rows.iter() {
            let w = &self.weights[r * v..(r + 1) * v];
            for (zi, wi) in z.iter_mut().zip(w) {
                *zi += wi;
            }
        }
        for (idx, toks) in self.relational(prep, prefix) {
            let u = self.weights[idx];
            // Binary features: each distinct token counts once.
            let mut seen = distinct(toks);
            seen.retain(|&t| (t as usize) < v);
            for t in seen {
                z[t as usize] += u;
            }
        }
        if self.temperature != 1.0 {
            for zi in &mut z {
                *zi /= self.temperature;
            }
        }
        z
    }

    pub fn logits(&self, prep: &Prepared, prefix: &[TokenId]) -> Vec<f64> {
        self.logits_with(prep, prefix, &mut Vec::new())
    }

    /// Log-probabilities of every next token (unfloored).
    pub fn next_log_probs(&self, prep: &Prepared, prefix: &[TokenId]) -> Vec<f64> {
        log_softmax(&self.logits(prep, prefix)).0
    }

    pub fn eval_token(&self, prep: &Prepared, prefix: &[TokenId], token: TokenId) -> TokenEval {
        let (logp, probs) = log_softmax(&self.logits(prep, prefix));
        let (log_prob, clamped) = floored_log(logp[token as usize]);
        TokenEval {
            log_prob,
            probs,
            clamped,
        }
    }

    /// Adds `scale · ∂ log π(token) / ∂θ` into `grad`, reusing the
    /// distribution from [`eval_token`](Self::eval_token).
    pub fn add_log_prob_grad(
        &self,
        prep: &Prepared,
        prefix: &[TokenId],
        token: TokenId,
        eval: &TokenEval,
        scale: f64,
        grad: &mut [f64],
    ) {
        if eval.clamped || scale == 0.0 {
            return;
        }
        let v = self.vocab.size();
        let s = scale / self.temperature;
        let mut rows = Vec::new();
        self.active_rows(prep, prefix, &mut rows);
        for &r in &rows {
            let g = &mut grad[r * v..(r + 1) * v];
            for (gi, p) in g.iter_mut().zip(&eval.probs) {
                *gi -= s * p;
            }
            g[token as usize] += s;
        }
        for (idx, toks) in self.relational(prep, prefix) {
            let mut set = distinct(toks);
            set.retain(|&t| (t as usize) < v);
            let fired = set.binary_search(&token).is_ok() as u8 as f64;
            let expected: f64 = set.iter().map(|&t| eval.probs[t as usize]).sum();
            grad[idx] += s * (fired - expected);
        }
    }

    pub fn log_prob(&self, ctx: Context<'_>, token: TokenId) -> Result<f64> {
        self.check_tokens(ctx.prompt)?;
        self.check_tokens(ctx.prefix)?;
        self.vocab.check(token)?;
        let prep = self.prepare(ctx.prompt);
        Ok(self.eval_token(&prep, ctx.prefix, token).log_prob)
    }

    pub fn log_prob_grad(&self, ctx: Context<'_>, token: TokenId) -> Result<LogProbGradient> {
        self.check_tokens(ctx.prompt)?;
        self.check_tokens(ctx.prefix)?;
        self.vocab.check(token)?;
        let prep = self.prepare(ctx.prompt);
        let eval = self.eval_token(&prep, ctx.prefix, token);
        if eval.clamped {
            return Ok(LogProbGradient::default());
        }
        let v = self.vocab.size();
        let s = 1.0 / self.temperature;
        let mut rows = Vec::new();
        self.active_rows(&prep, ctx.prefix, &mut rows);
        let mut entries = Vec::with_capacity(rows.len() * v + 3);
        for &r in &rows {
            for (slot, p) in eval.probs.iter().enumerate() {
                let ind = (slot == token as usize) as u8 as f64;
                entries.push((r * v + slot, s * (ind - p)));
            }
        }
        for (idx, toks) in self.relational(&prep, ctx.prefix) {
            let set = distinct(toks);
            let fired = set.binary_search(&token).is_ok() as u8 as f64;
            let expected: f64 = set.iter().map(|&t| eval.probs[t as usize]).sum();
            entries.push((idx, s * (fired - expected)));
        }
        Ok(LogProbGradient { entries })
    }

    /// Entropy (nats) of the next-token distribution.
    pub fn entropy(&self, ctx: Context<'_>) -> Result<f64> {
        self.check_tokens(ctx.prompt)?;
        self.check_tokens(ctx.prefix)?;
        let prep = self.prepare(ctx.prompt);
        Ok(self.entropy_prepared(&prep, ctx.prefix))
    }

    pub fn entropy_prepared(&self, prep: &Prepared, prefix: &[TokenId]) -> f64 {
        let (logp, probs) = log_softmax(&self.logits(prep, prefix));
        -probs
            .iter()
            .zip(&logp)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, l)| p * l)
            .sum::<f64>()
    }

    /// Adds `value` to the context-free logit of each of `tokens`: the bias
    /// row of a linear bag, every row of a table.
    pub fn add_token_prior(&mut self, tokens: &[TokenId], value: f64) -> Result<()> {
        let v = self.vocab.size();
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= v) {
            return Err(Error::UnknownToken {
                token: bad,
                vocab_size: v,
            });
        }
        let rows = match (&self.kind, &self.layout) {
            (PolicyKind::LinearBag(spec), _) if spec.bias => 0..1,
            (PolicyKind::LinearBag(_), _) => {
                return Err(Error::InvalidPolicy("a token prior needs the bias feature".into()))
            }
            (_, Layout::Tabular { exact_rows, .. }) => 0..exact_rows + 1,
            _ => unreachable!("layout follows kind"),
        };
        for row in rows {
            for &t in tokens {
                let slot = self.row_slot(row, t);
                self.weights[slot] += value;
            }
        }
        Ok(())
    }

    /// The logit slot of `(row, token)`; tabular rows are context keys,
    /// linear-bag rows are feature rows.
    pub fn row_slot(&self, row: usize, token: TokenId) -> usize {
        row * self.vocab.size() + token as usize
    }

    /// Rows selected by `ctx`, exposed for tests of the softmax identity.
    pub fn active_row_indices(&self, ctx: Context<'_>) -> Vec<usize> {
        let prep = self.prepare(ctx.prompt);
        let mut rows = Vec::new();
        self.active_rows(&prep, ctx.prefix, &mut rows);
        rows
    }

    /// Index of the scalar weight of the copy-from-feedback feature.
    pub fn copy_feedback_index(&self) -> Option<usize> {
        match &self.layout {
            Layout::Bag(l) => l.copy_feedback.map(|i| l.rows * self.vocab.size() + i),
            Layout::Tabular { .. } => None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&CheckpointHeader {
            kind: self.kind.clone(),
            vocab: self.vocab.clone(),
            num_weights: self.weights.len(),
        })
        .expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(32 + header.len() + 8 * self.weights.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.temperature.to_bits().to_le_bytes());
        for w in &self.weights {
            out.extend_from_slice(&w.to_bits().to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(read_array(&mut r)?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(read_array(&mut r)?) as usize;
        if hlen > r.len() {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&r[..hlen])?;
        r = &r[hlen..];
        let temperature = f64::from_bits(u64::from_le_bytes(read_array(&mut r)?));
        let mut p = PolicyParams::with_temperature(header.kind, header.vocab, temperature)?;
        if p.weights.len() != header.num_weights || r.len() != 8 * header.num_weights {
            return Err(Error::Checkpoint(format!(
                "weight count mismatch: header {}, layout {}, payload {} bytes",
                header.num_weights,
                p.weights.len(),
                r.len()
            )));
        }
        for (w, chunk) in p.weights.iter_mut().zip(r.chunks_exact(8)) {
            *w = f64::from_bits(u64::from_le_bytes(chunk.try_into().expect("8-byte chunk")));
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    kind: PolicyKind,
    vocab: Vocab,
    num_weights: usize,
}

fn read_exact(r: &mut &[u8], out: &mut [u8]) -> Result<()> {
    if r.len() < out.len() {
        return Err(Error::Checkpoint("unexpected end of file".into()));
    }
    out.copy_from_slice(&r[..out.len()]);
    *r = &r[out.len()..];
    Ok(())
}

fn read_array<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut a = [0u8; N];
    read_exact(r, &mut a)?;
    Ok(a)
}

/// Frozen behaviour parameters θ_old.
#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    params: Arc<PolicyParams>,
    step_id: usize,
}

impl PolicySnapshot {
    pub fn freeze(params: &PolicyParams, step_id: usize) -> Self {
        PolicySnapshot {
            params: Arc::new(params.clone()),
            step_id,
        }
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn step_id(&self) -> usize {
        self.step_id
    }
}

/// Tokens and their behaviour log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSequence {
    pub tokens: Vec<TokenId>,
    pub log_probs: Vec<f64>,
}

/// Samples an answer until end-of-sequence (inclusive) or `max_len` tokens.
pub fn sample_rollout(
    snapshot: &PolicySnapshot,
    prompt: &[TokenId],
    max_len: usize,
    rng: &mut impl Rng,
) -> SampledSequence {
    let policy = snapshot.params();
    let prep = policy.prepare(prompt);
    let eos = policy.vocab().eos();
    let mut tokens = Vec::with_capacity(max_len);
    let mut log_probs = Vec::with_capacity(max_len);
    let mut rows = Vec::new();
    while tokens.len() < max_len.max(1) {
        let (logp, probs) = log_softmax(&policy.logits_with(&prep, &tokens, &mut rows));
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = probs.len() - 1;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = i;
                break;
            }
        }
        // Never land on a zero-probability tail token through rounding.
        while probs[pick] == 0.0 && pick > 0 {
            pick -= 1;
        }
        tokens.push(pick as TokenId);
        log_probs.push(floored_log(logp[pick]).0);
        if pick as TokenId == eos {
            break;
        }
    }
    SampledSequence { tokens, log_probs }
}

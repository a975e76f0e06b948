//! Synthetic long-context tasks over a small closed vocabulary.
//!
//! Every instance is a pure function of `(kind, seed, config)`. The prompt a
//! model sees is `context ++ question`; the gold response for supervised
//! warm-up is a fixed think/answer template around the answer string.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenId;

pub const N_FILLERS: usize = 40;
pub const N_KEYS: usize = 16;
pub const N_VALUES: usize = 16;
pub const N_VARS: usize = 12;
pub const N_COMMON: usize = 10;

pub const EOS: &str = "<eos>";
pub const THINK: &str = "<think>";
pub const THINK_END: &str = "</think>";
pub const ANSWER: &str = "<answer>";
pub const ANSWER_END: &str = "</answer>";
pub const QUERY: &str = "<q>";

const STRUCTURAL: [&str; 18] = [
    EOS, THINK, THINK_END, ANSWER, ANSWER_END, QUERY, "=", ";", "locate", "key", "read", "value", "count", "words",
    "follow", "chain", "most", "common",
];

/// Bijective token-string / id table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Config(format!("token `{t}` is empty or contains whitespace")));
            }
            if ids.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Config(format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocab { tokens, ids })
    }

    /// The shared task vocabulary (122 tokens).
    pub fn standard() -> &'static Vocab {
        static V: OnceLock<Vocab> = OnceLock::new();
        V.get_or_init(|| {
            let mut t: Vec<String> = STRUCTURAL.iter().map(|s| s.to_string()).collect();
            t.extend((0..N_FILLERS).map(|i| format!("f{i:02}")));
            t.extend((0..N_KEYS).map(|i| format!("k{i:02}")));
            t.extend((0..N_VALUES).map(|i| format!("v{i:02}")));
            t.extend((0..10).map(|i| i.to_string()));
            t.extend((0..N_VARS).map(|i| format!("X{i}")));
            t.extend((0..N_COMMON).map(|i| format!("c{i:02}")));
            Vocab::new(t).expect("standard vocabulary is well formed")
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<TokenId> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| Error::Index(format!("unknown token `{token}`")))
    }

    pub fn token(&self, id: TokenId) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| Error::Index(format!("token id {id} outside vocabulary of {}", self.len())))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Space-joined rendering; unknown ids render as `<unk:ID>`.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| match self.tokens.get(i as usize) {
                Some(t) => t.clone(),
                None => format!("<unk:{i}>"),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn ids_of(&self, words: &[String]) -> Vec<TokenId> {
        words.iter().map(|w| self.ids[w.as_str()]).collect()
    }
}

fn filler(i: usize) -> String {
    format!("f{i:02}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Niah,
    CommonWords,
    VarTracking,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Niah, TaskKind::CommonWords, TaskKind::VarTracking];

    fn salt(self) -> u64 {
        match self {
            TaskKind::Niah => 0x6e69_6168,
            TaskKind::CommonWords => 0x636f_6d6d,
            TaskKind::VarTracking => 0x7661_7274,
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::Niah => "niah",
            TaskKind::CommonWords => "common_words",
            TaskKind::VarTracking => "var_tracking",
        })
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "niah" => Ok(TaskKind::Niah),
            "common_words" => Ok(TaskKind::CommonWords),
            "var_tracking" => Ok(TaskKind::VarTracking),
            other => Err(Error::Config(format!("unknown task kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskInstance {
    pub kind: TaskKind,
    pub seed: u64,
    pub context: Vec<TokenId>,
    pub question: Vec<TokenId>,
    pub answer: String,
}

impl TaskInstance {
    pub fn prompt(&self) -> Vec<TokenId> {
        let mut p = self.context.clone();
        p.extend_from_slice(&self.question);
        p
    }

    /// Reasoning placed inside the think tags of the gold response. For
    /// retrieval it names the located key and the value read after it.
    pub fn think_text(&self) -> String {
        match self.kind {
            TaskKind::Niah => {
                let key = self.question.get(1).map_or("key", |&k| Vocab::standard().token(k).unwrap_or("key"));
                format!("locate {key} {}", self.answer)
            }
            TaskKind::CommonWords => "count words".into(),
            TaskKind::VarTracking => "follow chain".into(),
        }
    }

    /// `<think> reasoning </think> <answer> answer </answer> <eos>`.
    pub fn gold_response_text(&self) -> String {
        format!(
            "{THINK} {} {THINK_END} {ANSWER} {} {ANSWER_END} {EOS}",
            self.think_text(),
            self.answer
        )
    }

    pub fn gold_response(&self, vocab: &Vocab) -> Result<Vec<TokenId>> {
        vocab.encode(&self.gold_response_text())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub context_len: usize,
    pub n_distractors: usize,
    pub n_common: usize,
    /// Occurrences of each planted word in a common-words context.
    pub common_freq: usize,
    pub chain_len: usize,
    /// Supervised contexts are drawn uniformly from `sft_min_context_len..=context_len`;
    /// the RL and eval splits always use `context_len`.
    pub sft_min_context_len: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            context_len: 256,
            n_distractors: 3,
            n_common: 2,
            common_freq: 20,
            chain_len: 2,
            sft_min_context_len: 16,
        }
    }
}

impl TaskConfig {
    /// Context length of the supervised instance with this seed.
    pub fn sft_context_len(&self, seed: u64) -> usize {
        let lo = self.sft_min_context_len.min(self.context_len);
        if lo == self.context_len {
            return lo;
        }
        ChaCha8Rng::seed_from_u64(seed ^ 0x7366_745f_6c65_6e).gen_range(lo..=self.context_len)
    }
}

/// Splits `total` free slots into `parts + 1` gaps uniformly over compositions.
fn gaps(rng: &mut ChaCha8Rng, free: usize, parts: usize) -> Vec<usize> {
    let mut cuts: Vec<usize> = (0..parts).map(|_| rng.gen_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(parts + 1);
    let mut prev = 0;
    for c in cuts {
        out.push(c - prev);
        prev = c;
    }
    out.push(free - prev);
    out
}

/// Lays `items` out in order between uniform filler tokens.
fn interleave(rng: &mut ChaCha8Rng, len: usize, items: &[Vec<String>]) -> Result<Vec<String>> {
    let used: usize = items.iter().map(Vec::len).sum();
    if used > len {
        return Err(Error::Config(format!(
            "context of {len} tokens cannot hold {used} planted tokens"
        )));
    }
    let g = gaps(rng, len - used, items.len());
    let mut out = Vec::with_capacity(len);
    for (i, gap) in g.iter().enumerate() {
        out.extend((0..*gap).map(|_| filler(rng.gen_range(0..N_FILLERS))));
        if let Some(item) = items.get(i) {
            out.extend(item.iter().cloned());
        }
    }
    Ok(out)
}

fn rng_for(kind: TaskKind, seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ kind.salt().rotate_left(32))
}

fn finish(kind: TaskKind, seed: u64, context: Vec<String>, question: Vec<String>, answer: String) -> Result<TaskInstance> {
    let vocab = Vocab::standard();
    let inst = TaskInstance {
        kind,
        seed,
        context: vocab.ids_of(&context),
        question: vocab.ids_of(&question),
        answer,
    };
    match extract_answer(&inst, vocab) {
        Some(a) if a == inst.answer => Ok(inst),
        other => Err(Error::Contract(format!(
            "{kind} seed {seed}: generated answer {:?} but extraction gives {other:?}",
            inst.answer
        ))),
    }
}

/// One target key-value pair plus `n_distractors` decoy pairs with distinct keys.
pub fn gen_niah(seed: u64, context_len: usize, n_distractors: usize) -> Result<TaskInstance> {
    if n_distractors + 1 > N_KEYS {
        return Err(Error::Config(format!(
            "{n_distractors} distractors need more than {N_KEYS} distinct keys"
        )));
    }
    if context_len < 2 * (n_distractors + 1) {
        return Err(Error::Config(format!(
            "context_len {context_len} too short for {} key-value pairs",
            n_distractors + 1
        )));
    }
    let mut rng = rng_for(TaskKind::Niah, seed);
    let keys: Vec<usize> = rand::seq::index::sample(&mut rng, N_KEYS, n_distractors + 1).into_vec();
    let pairs: Vec<Vec<String>> = keys
        .iter()
        .map(|&k| vec![format!("k{k:02}"), format!("v{:02}", rng.gen_range(0..N_VALUES))])
        .collect();
    let target = rng.gen_range(0..pairs.len());
    let (question_key, answer) = (pairs[target][0].clone(), pairs[target][1].clone());
    let context = interleave(&mut rng, context_len, &pairs)?;
    finish(TaskKind::Niah, seed, context, vec![QUERY.into(), question_key], answer)
}

/// `n_common` words each planted `freq` times among fillers that all occur
/// fewer than `freq` times.
pub fn gen_common_words_with(seed: u64, context_len: usize, n_common: usize, freq: usize) -> Result<TaskInstance> {
    if n_common == 0 || n_common > N_COMMON {
        return Err(Error::Config(format!("n_common must be in 1..={N_COMMON}, got {n_common}")));
    }
    let planted = n_common * freq;
    let rest = context_len.checked_sub(planted).ok_or_else(|| {
        Error::Config(format!("context_len {context_len} cannot hold {n_common} x {freq} planted words"))
    })?;
    if freq < 2 || rest > N_FILLERS * (freq - 1) {
        return Err(Error::Config(format!(
            "fillers would not stay rarer than the planted frequency {freq}"
        )));
    }
    let mut rng = rng_for(TaskKind::CommonWords, seed);
    let words: BTreeSet<usize> = rand::seq::index::sample(&mut rng, N_COMMON, n_common).into_iter().collect();
    let mut counts = [0usize; N_FILLERS];
    let mut tokens: Vec<String> = Vec::with_capacity(context_len);
    for _ in 0..rest {
        let open: Vec<usize> = (0..N_FILLERS).filter(|&f| counts[f] + 1 < freq).collect();
        let f = *open.choose(&mut rng).expect("capacity checked above");
        counts[f] += 1;
        tokens.push(filler(f));
    }
    for &w in &words {
        tokens.extend((0..freq).map(|_| format!("c{w:02}")));
    }
    tokens.shuffle(&mut rng);
    let answer = words.iter().map(|w| format!("c{w:02}")).collect::<Vec<_>>().join(" ");
    finish(
        TaskKind::CommonWords,
        seed,
        tokens,
        vec![QUERY.into(), "most".into(), "common".into()],
        answer,
    )
}

/// Planted frequency is `2 * ceil(context_len / 40) + 1`, above any filler.
pub fn gen_common_words(seed: u64, context_len: usize, n_common: usize) -> Result<TaskInstance> {
    gen_common_words_with(seed, context_len, n_common, 2 * context_len.div_ceil(N_FILLERS) + 1)
}

/// `Xa = d ;` followed by `Xb = Xa ;` links; the question names the last variable.
pub fn gen_var_tracking(seed: u64, context_len: usize, chain_len: usize) -> Result<TaskInstance> {
    if chain_len == 0 || chain_len > N_VARS {
        return Err(Error::Config(format!("chain_len must be in 1..={N_VARS}, got {chain_len}")));
    }
    let mut rng = rng_for(TaskKind::VarTracking, seed);
    let vars: Vec<String> = rand::seq::index::sample(&mut rng, N_VARS, chain_len)
        .into_iter()
        .map(|v| format!("X{v}"))
        .collect();
    let digit = rng.gen_range(0..10).to_string();
    let links: Vec<Vec<String>> = (0..chain_len)
        .map(|i| {
            let src = if i == 0 { digit.clone() } else { vars[i - 1].clone() };
            vec![vars[i].clone(), "=".into(), src, ";".into()]
        })
        .collect();
    let context = interleave(&mut rng, context_len, &links)?;
    let last = vars[chain_len - 1].clone();
    finish(TaskKind::VarTracking, seed, context, vec![QUERY.into(), last], digit)
}

pub fn gen_instance(kind: TaskKind, seed: u64, cfg: &TaskConfig) -> Result<TaskInstance> {
    match kind {
        TaskKind::Niah => gen_niah(seed, cfg.context_len, cfg.n_distractors),
        TaskKind::CommonWords => gen_common_words_with(seed, cfg.context_len, cfg.n_common, cfg.common_freq),
        TaskKind::VarTracking => gen_var_tracking(seed, cfg.context_len, cfg.chain_len),
    }
}

/// The extraction rule each generator checks itself against.
pub fn extract_answer(inst: &TaskInstance, vocab: &Vocab) -> Option<String> {
    let ctx: Vec<&str> = inst.context.iter().map(|&t| vocab.token(t).ok()).collect::<Option<_>>()?;
    let q: Vec<&str> = inst.question.iter().map(|&t| vocab.token(t).ok()).collect::<Option<_>>()?;
    match inst.kind {
        TaskKind::Niah => {
            let key = q.get(1)?;
            let mut found = ctx.windows(2).filter(|w| w[0] == *key).map(|w| w[1]);
            let v = found.next()?;
            found.next().is_none().then(|| v.to_string())
        }
        TaskKind::CommonWords => {
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for t in &ctx {
                *counts.entry(t).or_default() += 1;
            }
            let top = *counts.values().max()?;
            let mut best: Vec<&str> = counts.into_iter().filter(|(_, c)| *c == top).map(|(w, _)| w).collect();
            best.sort_unstable();
            Some(best.join(" "))
        }
        TaskKind::VarTracking => {
            let mut var = *q.get(1)?;
            for _ in 0..=N_VARS {
                let src = ctx
                    .windows(4)
                    .find(|w| w[0] == var && w[1] == "=" && w[3] == ";")
                    .map(|w| w[2])?;
                if src.starts_with('X') {
                    var = src;
                } else {
                    return Some(src.to_string());
                }
            }
            None
        }
    }
}

/// Half-open seed interval `[start, start + count)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRange {
    pub start: u64,
    pub count: u64,
}

impl SeedRange {
    pub fn new(start: u64, count: u64) -> Self {
        SeedRange { start, count }
    }

    pub fn end(&self) -> u64 {
        self.start + self.count
    }

    pub fn overlaps(&self, other: &SeedRange) -> bool {
        self.count > 0 && other.count > 0 && self.start < other.end() && other.start < self.end()
    }

    pub fn iter(&self) -> std::ops::Range<u64> {
        self.start..self.end()
    }
}

/// Proportions of niah / common-words / var-tracking instances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMix {
    pub niah: f64,
    pub common_words: f64,
    pub var_tracking: f64,
}

impl TaskMix {
    pub const NIAH_ONLY: TaskMix = TaskMix {
        niah: 1.0,
        common_words: 0.0,
        var_tracking: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let parts = [self.niah, self.common_words, self.var_tracking];
        if parts.iter().any(|p| !(*p >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("task mix {parts:?} must be non-negative and sum to 1")));
        }
        Ok(())
    }

    /// Kind assigned to `seed`; depends on nothing else.
    pub fn kind_for(&self, seed: u64) -> TaskKind {
        let u: f64 = ChaCha8Rng::seed_from_u64(seed ^ 0x6d69_7865_645f_6b69).gen();
        let weights = [self.niah, self.common_words, self.var_tracking];
        let mut acc = 0.0;
        for (kind, w) in TaskKind::ALL.into_iter().zip(weights) {
            acc += w;
            if u < acc {
                return kind;
            }
        }
        let last = weights.iter().rposition(|&w| w > 0.0).unwrap_or(0);
        TaskKind::ALL[last]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub sft: SeedRange,
    pub rl: SeedRange,
    pub eval: SeedRange,
    pub mix: TaskMix,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            sft: SeedRange::new(0, 50_000),
            rl: SeedRange::new(100_000, 4000),
            eval: SeedRange::new(900_000, 200),
            mix: TaskMix::NIAH_ONLY,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        self.mix.validate()?;
        let named = [("sft", &self.sft), ("rl", &self.rl), ("eval", &self.eval)];
        for (i, (a, ra)) in named.iter().enumerate() {
            for (b, rb) in &named[i + 1..] {
                if ra.overlaps(rb) {
                    return Err(Error::Config(format!("{a} and {b} seed ranges overlap")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub instances: Vec<TaskInstance>,
    /// Present for supervised splits.
    pub responses: Option<Vec<Vec<TokenId>>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub sft: Dataset,
    pub rl: Dataset,
    pub eval: Dataset,
}

fn build_split(range: &SeedRange, mix: &TaskMix, cfg: &TaskConfig, gold: bool) -> Result<Dataset> {
    let instances = range
        .iter()
        .map(|s| {
            if gold {
                let len = cfg.sft_context_len(s);
                let c = TaskConfig {
                    context_len: len,
                    common_freq: if len < cfg.context_len {
                        2 * len.div_ceil(N_FILLERS) + 1
                    } else {
                        cfg.common_freq
                    },
                    ..cfg.clone()
                };
                gen_instance(mix.kind_for(s), s, &c)
            } else {
                gen_instance(mix.kind_for(s), s, cfg)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let responses = if gold {
        let v = Vocab::standard();
        Some(instances.iter().map(|i| i.gold_response(v)).collect::<Result<_>>()?)
    } else {
        None
    };
    Ok(Dataset { instances, responses })
}

pub fn make_splits(split: &SplitConfig, cfg: &TaskConfig) -> Result<Splits> {
    split.validate()?;
    Ok(Splits {
        sft: build_split(&split.sft, &split.mix, cfg, true)?,
        rl: build_split(&split.rl, &split.mix, cfg, false)?,
        eval: build_split(&split.eval, &split.mix, cfg, false)?,
    })
}

#[derive(Serialize, Deserialize)]
struct Record {
    kind: TaskKind,
    seed: u64,
    context: String,
    question: String,
    answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    response: Option<String>,
}

/// One JSON object per line with fields `kind, seed, context, question, answer[, response]`.
pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let vocab = Vocab::standard();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut out = Vec::new();
    for (i, inst) in ds.instances.iter().enumerate() {
        let rec = Record {
            kind: inst.kind,
            seed: inst.seed,
            context: vocab.decode(&inst.context),
            question: vocab.decode(&inst.question),
            answer: inst.answer.clone(),
            response: ds.responses.as_ref().map(|r| vocab.decode(&r[i])),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let vocab = Vocab::standard();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |ln: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        msg: format!("line {ln}: {msg}"),
    };
    let mut instances = Vec::new();
    let mut responses = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| bad(i + 1, e.to_string()))?;
        let enc = |s: &str| vocab.encode(s).map_err(|e| bad(i + 1, e.to_string()));
        instances.push(TaskInstance {
            kind: rec.kind,
            seed: rec.seed,
            context: enc(&rec.context)?,
            question: enc(&rec.question)?,
            answer: rec.answer,
        });
        responses.push(rec.response.as_deref().map(enc).transpose()?);
    }
    let responses = if !responses.is_empty() && responses.iter().all(Option::is_some) {
        Some(responses.into_iter().map(Option::unwrap).collect())
    } else {
        None
    };
    Ok(Dataset { instances, responses })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_is_bijective() {
        let v = Vocab::standard();
        assert!(v.len() <= 128);
        for i in 0..v.len() as TokenId {
            assert_eq!(v.id(v.token(i).unwrap()).unwrap(), i);
        }
        assert!(v.id("nope").is_err());
        assert!(Vocab::new(vec!["a".into(), "a".into()]).is_err());
        assert_eq!(v.encode("<think> k01 </think>").unwrap().len(), 3);
    }

    #[test]
    fn niah_without_distractors_has_one_pair() {
        let v = Vocab::standard();
        let inst = gen_niah(5, 64, 0).unwrap();
        assert_eq!(inst.context.len(), 64);
        let keys = inst.context.iter().filter(|&&t| v.token(t).unwrap().starts_with('k')).count();
        let vals = inst.context.iter().filter(|&&t| v.token(t).unwrap().starts_with('v')).count();
        assert_eq!((keys, vals), (1, 1));
    }

    #[test]
    fn generators_are_deterministic() {
        let cfg = TaskConfig::default();
        for kind in TaskKind::ALL {
            assert_eq!(gen_instance(kind, 17, &cfg).unwrap(), gen_instance(kind, 17, &cfg).unwrap());
            assert_ne!(gen_instance(kind, 17, &cfg).unwrap(), gen_instance(kind, 18, &cfg).unwrap());
        }
    }

    #[test]
    fn infeasible_lengths_are_rejected() {
        assert!(gen_niah(0, 5, 3).is_err());
        assert!(gen_niah(0, 256, 16).is_err());
        assert!(gen_common_words(0, 4, 3).is_err());
        assert!(gen_var_tracking(0, 256, 0).is_err());
        assert!(gen_var_tracking(0, 7, 2).is_err());
    }

    #[test]
    fn single_common_word_wins() {
        let inst = gen_common_words(3, 256, 1).unwrap();
        let w = Vocab::standard().id(&inst.answer).unwrap();
        assert_eq!(inst.context.iter().filter(|&&t| t == w).count(), 2 * 7 + 1);
    }

    #[test]
    fn direct_lookup_chain() {
        let v = Vocab::standard();
        let inst = gen_var_tracking(9, 32, 1).unwrap();
        let text = v.decode(&inst.context);
        let var = v.token(inst.question[1]).unwrap();
        assert!(text.contains(&format!("{var} = {} ;", inst.answer)));
    }

    #[test]
    fn splits_are_disjoint_and_mixed_as_asked() {
        let split = SplitConfig {
            sft: SeedRange::new(0, 20),
            rl: SeedRange::new(20, 20),
            eval: SeedRange::new(40, 20),
            mix: TaskMix::NIAH_ONLY,
        };
        let s = make_splits(&split, &TaskConfig::default()).unwrap();
        assert!(s.sft.instances.iter().chain(&s.rl.instances).chain(&s.eval.instances).all(|i| i.kind == TaskKind::Niah));
        assert_eq!(s.sft.responses.as_ref().unwrap().len(), 20);
        assert!(s.eval.responses.is_none());
        let bad = SplitConfig {
            eval: SeedRange::new(10, 5),
            ..split
        };
        assert!(make_splits(&bad, &TaskConfig::default()).is_err());
    }

    #[test]
    fn mix_respects_proportions() {
        let mix = TaskMix {
            niah: 0.5,
            common_words: 0.25,
            var_tracking: 0.25,
        };
        let mut c = HashMap::new();
        for s in 0..4000 {
            *c.entry(mix.kind_for(s)).or_insert(0usize) += 1;
        }
        assert!((c[&TaskKind::Niah] as f64 / 4000.0 - 0.5).abs() < 0.04);
        assert!((c[&TaskKind::VarTracking] as f64 / 4000.0 - 0.25).abs() < 0.04);
        assert!(TaskMix { niah: 0.5, common_words: 0.0, var_tracking: 0.0 }.validate().is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let split = SplitConfig {
            sft: SeedRange::new(0, 6),
            rl: SeedRange::new(6, 3),
            eval: SeedRange::new(9, 3),
            mix: TaskMix {
                niah: 0.4,
                common_words: 0.3,
                var_tracking: 0.3,
            },
        };
        let s = make_splits(&split, &TaskConfig::default()).unwrap();
        for (name, ds) in [("sft", &s.sft), ("eval", &s.eval)] {
            let p = dir.path().join(format!("{name}.jsonl"));
            write_dataset(ds, &p).unwrap();
            assert_eq!(&read_dataset(&p).unwrap(), ds);
        }
        let first = fs::read_to_string(dir.path().join("sft.jsonl")).unwrap();
        assert!(first.starts_with("{\"kind\":"));
    }
}

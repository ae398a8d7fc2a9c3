//! Corpus ingestion: CoNLL-style TSV reading/writing, vocabulary
//! construction with the singleton-`<unk>` rule, IOB validation, and
//! slot-value augmentation.
//!
//! Tokens are opaque UTF-8 strings; no tokenization or normalization happens
//! here, so pre-segmented corpora in any script work unchanged. All files
//! are UTF-8 with LF line endings.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
/// Begin-of-sequence label fed to the decoder before the first real tag.
pub const BOS_TAG: &str = "<s>";
/// Its reserved id in every tag vocabulary.
pub const BOS_TAG_ID: usize = 0;
pub const OUTSIDE: &str = "O";

/// A pre-tokenized input sentence. `token_ids` are attached by
/// [`Vocabulary::encode_pair`]; they are empty straight after parsing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub token_ids: Vec<usize>,
}

impl Sentence {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        Sentence {
            tokens,
            token_ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// The IOB tag sequence paired with a sentence, same length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TagSequence {
    pub tags: Vec<String>,
    pub tag_ids: Vec<usize>,
}

impl TagSequence {
    pub fn from_tags(tags: Vec<String>) -> Self {
        TagSequence {
            tags,
            tag_ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }
}

pub type Pair = (Sentence, TagSequence);

/// Reads token<TAB>tag lines with blank-line sentence separators.
/// Fails on empty files; use [`read_tokens`] for possibly-empty inputs.
pub fn read_conll(path: impl AsRef<Path>) -> Result<Vec<Pair>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let name = path.display().to_string();
    let mut pairs = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut tags: Vec<String> = Vec::new();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: name.clone(),
        line,
        msg,
    };

    let line_count = text.split('\n').count();
    for (idx, line) in text.split('\n').enumerate() {
        let lineno = idx + 1;
        if line.ends_with('\r') {
            return Err(parse_err(lineno, "CRLF line ending; files must use LF".into()));
        }
        if line.is_empty() {
            if tokens.is_empty() {
                // The phantom fragment after the file's final newline is not
                // a separator; any other blank here means an empty sentence.
                if lineno < line_count {
                    let msg = if pairs.is_empty() {
                        "blank line before any sentence"
                    } else {
                        "consecutive blank lines (empty sentence)"
                    };
                    return Err(parse_err(lineno, msg.into()));
                }
                continue;
            }
            pairs.push((
                Sentence::from_tokens(std::mem::take(&mut tokens)),
                TagSequence::from_tags(std::mem::take(&mut tags)),
            ));
            continue;
        }
        let mut fields = line.split('\t');
        let token = fields.next().unwrap_or_default();
        let tag = fields.next().ok_or_else(|| {
            parse_err(lineno, format!("expected token<TAB>tag, got {line:?}"))
        })?;
        if fields.next().is_some() {
            return Err(parse_err(lineno, format!("more than two fields in {line:?}")));
        }
        if token.is_empty() || tag.is_empty() {
            return Err(parse_err(lineno, format!("empty token or tag in {line:?}")));
        }
        tokens.push(token.to_string());
        tags.push(tag.to_string());
    }
    if !tokens.is_empty() {
        pairs.push((
            Sentence::from_tokens(tokens),
            TagSequence::from_tags(tags),
        ));
    }
    if pairs.is_empty() {
        return Err(parse_err(1, "empty file: no sentences".into()));
    }
    Ok(pairs)
}

/// Reads sentences for tagging: either two-column CoNLL (tags ignored) or one
/// token per line. An empty file yields an empty list.
pub fn read_tokens(path: impl AsRef<Path>) -> Result<Vec<Sentence>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let name = path.display().to_string();
    let mut sentences = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    for (idx, line) in text.split('\n').enumerate() {
        if line.ends_with('\r') {
            return Err(Error::Parse {
                path: name,
                line: idx + 1,
                msg: "CRLF line ending; files must use LF".into(),
            });
        }
        if line.is_empty() {
            if !tokens.is_empty() {
                sentences.push(Sentence::from_tokens(std::mem::take(&mut tokens)));
            }
            continue;
        }
        let token = line.split('\t').next().unwrap_or_default();
        if token.is_empty() {
            return Err(Error::Parse {
                path: name,
                line: idx + 1,
                msg: format!("empty token in {line:?}"),
            });
        }
        tokens.push(token.to_string());
    }
    if !tokens.is_empty() {
        sentences.push(Sentence::from_tokens(tokens));
    }
    Ok(sentences)
}

/// Canonical CoNLL serialization: token<TAB>tag lines, one blank line after
/// every sentence. `read_conll` followed by `write_conll` is byte-identical
/// for files already in this form.
pub fn format_conll(pairs: &[Pair]) -> String {
    let mut out = String::new();
    for (sentence, tags) in pairs {
        for (token, tag) in sentence.tokens.iter().zip(&tags.tags) {
            let _ = writeln!(out, "{token}\t{tag}");
        }
        out.push('\n');
    }
    out
}

pub fn write_conll(pairs: &[Pair], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, format_conll(pairs))?;
    Ok(())
}

/// Word and tag lookup tables. Word ids reserve `<pad>` (0) and `<unk>` (1);
/// tag ids reserve `<s>` (0). Remaining ids are assigned by descending
/// training frequency, ties broken lexicographically, so construction is
/// independent of input order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    word_ids: HashMap<String, usize>,
    tags: Vec<String>,
    tag_ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds the vocabulary from training pairs. Words below `min_count`
    /// occurrences are dropped and will look up as `<unk>`; with the default
    /// `min_count = 2` that is exactly the singleton rule.
    pub fn build(train: &[Pair], min_count: usize) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::contract("build_vocab: empty training set"));
        }
        let mut word_counts: HashMap<&str, usize> = HashMap::new();
        let mut tag_counts: HashMap<&str, usize> = HashMap::new();
        for (sentence, tags) in train {
            if sentence.tokens.len() != tags.tags.len() {
                return Err(Error::contract(format!(
                    "sentence/tag length mismatch: {} vs {}",
                    sentence.tokens.len(),
                    tags.tags.len()
                )));
            }
            if sentence.tokens.is_empty() {
                return Err(Error::contract("empty sentence in training set"));
            }
            for token in &sentence.tokens {
                *word_counts.entry(token).or_insert(0) += 1;
            }
            for tag in &tags.tags {
                *tag_counts.entry(tag).or_insert(0) += 1;
            }
        }
        let order = |counts: HashMap<&str, usize>, min: usize| -> Vec<String> {
            let mut kept: Vec<(&str, usize)> = counts
                .into_iter()
                .filter(|&(_, c)| c >= min)
                .collect();
            kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
            kept.into_iter().map(|(w, _)| w.to_string()).collect()
        };
        let mut words = vec![PAD.to_string(), UNK.to_string()];
        words.extend(order(word_counts, min_count));
        let mut tags = vec![BOS_TAG.to_string()];
        tags.extend(order(tag_counts, 1));
        Self::from_lists(words, tags)
    }

    /// Rebuilds a vocabulary from its id-ordered lists (checkpoint load).
    pub fn from_lists(words: Vec<String>, tags: Vec<String>) -> Result<Self> {
        if words.first().map(String::as_str) != Some(PAD)
            || words.get(1).map(String::as_str) != Some(UNK)
        {
            return Err(Error::contract(format!(
                "word list must reserve {PAD:?} at 0 and {UNK:?} at 1"
            )));
        }
        if tags.first().map(String::as_str) != Some(BOS_TAG) {
            return Err(Error::contract(format!(
                "tag list must reserve {BOS_TAG:?} at 0"
            )));
        }
        let word_ids: HashMap<String, usize> = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        let tag_ids: HashMap<String, usize> = tags
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        if word_ids.len() != words.len() || tag_ids.len() != tags.len() {
            return Err(Error::contract("duplicate entries in vocabulary lists"));
        }
        Ok(Vocabulary {
            words,
            word_ids,
            tags,
            tag_ids,
        })
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    pub fn tag_count(&self) -> usize {
        self.tags.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn unk_id(&self) -> usize {
        1
    }

    pub fn bos_tag_id(&self) -> usize {
        0
    }

    /// Id for a word; out-of-vocabulary words map to `<unk>`.
    pub fn word_id(&self, word: &str) -> usize {
        self.word_ids.get(word).copied().unwrap_or(self.unk_id())
    }

    pub fn tag_id(&self, tag: &str) -> Option<usize> {
        self.tag_ids.get(tag).copied()
    }

    pub fn tag_name(&self, id: usize) -> &str {
        &self.tags[id]
    }

    /// Attaches word and tag ids to a parsed pair. Unknown tags are an
    /// error: tags come from the training set by construction.
    pub fn encode_pair(&self, pair: &Pair) -> Result<Pair> {
        let token_ids = pair.0.tokens.iter().map(|t| self.word_id(t)).collect();
        let tag_ids = pair
            .1
            .tags
            .iter()
            .map(|t| {
                self.tag_id(t).ok_or_else(|| {
                    Error::contract(format!("tag {t:?} not in training tag vocabulary"))
                })
            })
            .collect::<Result<Vec<usize>>>()?;
        Ok((
            Sentence {
                tokens: pair.0.tokens.clone(),
                token_ids,
            },
            TagSequence {
                tags: pair.1.tags.clone(),
                tag_ids,
            },
        ))
    }

    pub fn encode_pairs(&self, pairs: &[Pair]) -> Result<Vec<Pair>> {
        pairs.iter().map(|p| self.encode_pair(p)).collect()
    }

    pub fn word_hash(&self) -> String {
        hash_lines(&self.words)
    }

    pub fn tag_hash(&self) -> String {
        hash_lines(&self.tags)
    }
}

fn hash_lines(lines: &[String]) -> String {
    let mut hasher = Sha256::new();
    for line in lines {
        hasher.update(line.as_bytes());
        hasher.update(b"\n");
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        let _ = write!(out, "{byte:02x}");
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IobMode {
    /// Reject dangling `I-X` tags.
    Strict,
    /// Rewrite a dangling `I-X` to `B-X` (model output is unconstrained).
    Repair,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum IobTag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

fn parse_iob(tag: &str) -> Option<IobTag<'_>> {
    if tag == OUTSIDE {
        Some(IobTag::Outside)
    } else if let Some(kind) = tag.strip_prefix("B-") {
        (!kind.is_empty()).then_some(IobTag::Begin(kind))
    } else if let Some(kind) = tag.strip_prefix("I-") {
        (!kind.is_empty()).then_some(IobTag::Inside(kind))
    } else {
        None
    }
}

/// Validates (or repairs) an IOB tag sequence. Repair decisions see the
/// already-repaired prefix, so `[I-x, I-x]` becomes `[B-x, I-x]`.
/// Reported positions are 1-based.
pub fn validate_iob(tags: &[String], mode: IobMode) -> Result<Vec<String>> {
    let mut out: Vec<String> = Vec::with_capacity(tags.len());
    let mut prev_kind: Option<String> = None;
    for (i, tag) in tags.iter().enumerate() {
        let parsed = parse_iob(tag).ok_or_else(|| {
            Error::contract(format!(
                "invalid IOB tag {tag:?} at position {} (expected O, B-X or I-X)",
                i + 1
            ))
        })?;
        match parsed {
            IobTag::Outside => {
                out.push(OUTSIDE.to_string());
                prev_kind = None;
            }
            IobTag::Begin(kind) => {
                out.push(tag.clone());
                prev_kind = Some(kind.to_string());
            }
            IobTag::Inside(kind) => {
                let continues = prev_kind.as_deref() == Some(kind);
                if continues {
                    out.push(tag.clone());
                } else {
                    match mode {
                        IobMode::Strict => {
                            return Err(Error::contract(format!(
                                "dangling {tag:?} at position {}",
                                i + 1
                            )));
                        }
                        IobMode::Repair => out.push(format!("B-{kind}")),
                    }
                }
                prev_kind = Some(kind.to_string());
            }
        }
    }
    Ok(out)
}

/// `(slot type, start, end)` runs of `B-X (I-X)*` in a valid tag sequence,
/// 0-based inclusive indices.
pub(crate) fn iob_runs(tags: &[String]) -> Vec<(String, usize, usize)> {
    let mut runs = Vec::new();
    let mut current: Option<(String, usize)> = None;
    for (i, tag) in tags.iter().enumerate() {
        match parse_iob(tag) {
            Some(IobTag::Begin(kind)) => {
                if let Some((k, start)) = current.take() {
                    runs.push((k, start, i - 1));
                }
                current = Some((kind.to_string(), i));
            }
            Some(IobTag::Inside(kind))
                if current.as_ref().is_some_and(|(k, _)| k == kind) => {}
            _ => {
                if let Some((k, start)) = current.take() {
                    runs.push((k, start, i - 1));
                }
            }
        }
    }
    if let Some((k, start)) = current {
        runs.push((k, start, tags.len() - 1));
    }
    runs
}

/// Slot type to the set of surface values (token sequences) seen with it in
/// training annotations. Values are kept sorted and deduplicated so sampling
/// and serialization are deterministic.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SlotLexicon {
    values: BTreeMap<String, Vec<Vec<String>>>,
}

impl SlotLexicon {
    /// Collects every slot chunk's surface value from strictly valid pairs.
    pub fn harvest(pairs: &[Pair]) -> Result<Self> {
        let mut sets: BTreeMap<String, BTreeSet<Vec<String>>> = BTreeMap::new();
        for (sentence, tags) in pairs {
            validate_iob(&tags.tags, IobMode::Strict)?;
            for (kind, start, end) in iob_runs(&tags.tags) {
                let value = sentence.tokens[start..=end].to_vec();
                sets.entry(kind).or_default().insert(value);
            }
        }
        Ok(SlotLexicon {
            values: sets
                .into_iter()
                .map(|(k, v)| (k, v.into_iter().collect()))
                .collect(),
        })
    }

    pub fn values(&self, slot: &str) -> Option<&[Vec<String>]> {
        self.values.get(slot).map(Vec::as_slice)
    }

    pub fn slot_types(&self) -> impl Iterator<Item = &String> {
        self.values.keys()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Serializes as `slot<TAB>value` lines, values space-joined, sorted.
    pub fn format(&self) -> String {
        let mut out = String::new();
        for (slot, values) in &self.values {
            for value in values {
                let _ = writeln!(out, "{slot}\t{}", value.join(" "));
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.format())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut sets: BTreeMap<String, BTreeSet<Vec<String>>> = BTreeMap::new();
        for (idx, line) in text.split('\n').enumerate() {
            if line.is_empty() {
                continue;
            }
            let (slot, value) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                msg: format!("expected slot<TAB>value, got {line:?}"),
            })?;
            let tokens: Vec<String> = value.split(' ').map(str::to_string).collect();
            if slot.is_empty() || tokens.iter().any(String::is_empty) {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: idx + 1,
                    msg: format!("empty slot or value in {line:?}"),
                });
            }
            sets.entry(slot.to_string()).or_default().insert(tokens);
        }
        Ok(SlotLexicon {
            values: sets
                .into_iter()
                .map(|(k, v)| (k, v.into_iter().collect()))
                .collect(),
        })
    }
}

/// Which slot chunks of a sentence get replaced per variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReplaceMode {
    /// Every slot chunk is independently resampled (default).
    AllSlots,
    /// One uniformly chosen chunk is resampled, the rest stay.
    OneSlot,
}

/// Expands a corpus by slot-value replacement. Each original sentence yields
/// itself plus `factor - 1` variants in which slot chunk values are replaced
/// by same-type values sampled from the lexicon, with tags re-emitted to
/// match the replacement length. Output order is original-then-variants, so
/// the input corpus is a subset of the output and
/// `output.len() == factor * input.len()`.
pub fn augment(
    pairs: &[Pair],
    lexicon: &SlotLexicon,
    factor: usize,
    mode: ReplaceMode,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Pair>> {
    if factor < 1 {
        return Err(Error::contract("augment: factor must be >= 1"));
    }
    let mut out = Vec::with_capacity(pairs.len() * factor);
    for pair in pairs {
        validate_iob(&pair.1.tags, IobMode::Strict)?;
        out.push((
            Sentence::from_tokens(pair.0.tokens.clone()),
            TagSequence::from_tags(pair.1.tags.clone()),
        ));
        for _ in 1..factor {
            out.push(replace_slots(pair, lexicon, mode, rng));
        }
    }
    Ok(out)
}

fn replace_slots(
    pair: &Pair,
    lexicon: &SlotLexicon,
    mode: ReplaceMode,
    rng: &mut ChaCha8Rng,
) -> Pair {
    let (sentence, tags) = pair;
    let runs = iob_runs(&tags.tags);
    let chosen: Option<usize> = match mode {
        ReplaceMode::AllSlots => None,
        ReplaceMode::OneSlot if runs.is_empty() => None,
        ReplaceMode::OneSlot => Some(rng.random_range(0..runs.len())),
    };
    let mut new_tokens = Vec::with_capacity(sentence.tokens.len());
    let mut new_tags = Vec::with_capacity(tags.tags.len());
    let mut pos = 0;
    for (run_idx, (kind, start, end)) in runs.iter().enumerate() {
        while pos < *start {
            new_tokens.push(sentence.tokens[pos].clone());
            new_tags.push(tags.tags[pos].clone());
            pos += 1;
        }
        let replace = chosen.is_none_or(|c| c == run_idx);
        let value: &[String] = match lexicon.values(kind) {
            Some(values) if replace && !values.is_empty() => {
                &values[rng.random_range(0..values.len())]
            }
            _ => &sentence.tokens[*start..=*end],
        };
        for (i, token) in value.iter().enumerate() {
            new_tokens.push(token.clone());
            new_tags.push(if i == 0 {
                format!("B-{kind}")
            } else {
                format!("I-{kind}")
            });
        }
        pos = end + 1;
    }
    while pos < sentence.tokens.len() {
        new_tokens.push(sentence.tokens[pos].clone());
        new_tags.push(tags.tags[pos].clone());
        pos += 1;
    }
    (
        Sentence::from_tokens(new_tokens),
        TagSequence::from_tags(new_tags),
    )
}

/// Builds pairs from `(tokens, tags)` string slices; test and fixture helper.
pub fn pair_from_strs(tokens: &[&str], tags: &[&str]) -> Pair {
    (
        Sentence::from_tokens(tokens.iter().map(|s| s.to_string()).collect()),
        TagSequence::from_tags(tags.iter().map(|s| s.to_string()).collect()),
    )
}

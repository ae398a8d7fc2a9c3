//! Length-constrained beam-search decoding and chunk-level F1 evaluation.
//!
//! Decoding emits exactly one tag per input token for both mechanisms. The
//! scorer is conlleval-compatible: predictions are repaired to valid IOB
//! first (the models are unconstrained), then chunks match when type, start
//! and end all agree.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::{self, IobMode, Pair, Sentence, TagSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{BoundModel, ContextMechanism, LstmState, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Tape;

/// A partial decode: the tags emitted so far, their cumulative
/// log-probability, and the decoder state that produced them.
pub struct Hypothesis<F> {
    pub tag_ids: Vec<usize>,
    pub log_prob: F,
    pub state: LstmState,
}

/// Beam-search decode over tag ids. Expands every live hypothesis with every
/// tag except the begin-of-sequence label (whose output logit is masked),
/// keeps the `beam_size` best by cumulative log-probability, and returns the
/// best complete sequence after exactly `token_ids.len()` steps.
///
/// Ties in pruning and final selection go to the lexicographically smaller
/// tag sequence, so decoding is fully deterministic.
pub fn decode_ids<F: Scalar>(
    params: &ModelParams<F>,
    mechanism: ContextMechanism,
    token_ids: &[usize],
    bos_tag: usize,
    beam_size: usize,
) -> Result<Vec<usize>> {
    if beam_size < 1 {
        return Err(Error::contract("decode: beam_size must be >= 1"));
    }
    let mut tape: Tape<F> = Tape::new();
    let model = BoundModel::bind(&mut tape, params);
    let enc = model.encode(&mut tape, token_ids, None)?;
    let s0 = model.init_decoder_state(&mut tape, &enc)?;
    let tag_count = model.tag_count();

    let mut beam: Vec<Hypothesis<F>> = vec![Hypothesis {
        tag_ids: Vec::new(),
        log_prob: F::zero(),
        state: s0,
    }];
    for t in 1..=token_ids.len() {
        let mut candidates: Vec<Hypothesis<F>> =
            Vec::with_capacity(beam.len() * (tag_count - 1));
        for hyp in &beam {
            let y_prev = hyp.tag_ids.last().copied().unwrap_or(bos_tag);
            let context = model.context(&mut tape, mechanism, &hyp.state, &enc, t)?;
            let (state, dist) =
                model.decoder_step(&mut tape, &hyp.state, y_prev, context, Some(bos_tag), None)?;
            let probs = tape.value(dist);
            for tag in 0..tag_count {
                if tag == bos_tag {
                    continue;
                }
                let mut tag_ids = Vec::with_capacity(hyp.tag_ids.len() + 1);
                tag_ids.extend_from_slice(&hyp.tag_ids);
                tag_ids.push(tag);
                candidates.push(Hypothesis {
                    tag_ids,
                    log_prob: hyp.log_prob + probs[tag].ln(),
                    state,
                });
            }
        }
        candidates.sort_by(|a, b| {
            b.log_prob
                .total_ord(a.log_prob)
                .then_with(|| a.tag_ids.cmp(&b.tag_ids))
        });
        candidates.truncate(beam_size);
        beam = candidates;
    }
    Ok(beam.remove(0).tag_ids)
}

/// Decodes a sentence into a [`TagSequence`]. Token ids are taken from the
/// sentence when attached, otherwise looked up (unknown words become
/// `<unk>`).
pub fn decode<F: Scalar>(
    params: &ModelParams<F>,
    vocab: &Vocabulary,
    mechanism: ContextMechanism,
    sentence: &Sentence,
    beam_size: usize,
) -> Result<TagSequence> {
    let ids: Vec<usize> = if sentence.token_ids.len() == sentence.tokens.len() {
        sentence.token_ids.clone()
    } else {
        sentence.tokens.iter().map(|t| vocab.word_id(t)).collect()
    };
    let tag_ids = decode_ids(params, mechanism, &ids, vocab.bos_tag_id(), beam_size)?;
    let tags = tag_ids
        .iter()
        .map(|&id| vocab.tag_name(id).to_string())
        .collect();
    Ok(TagSequence { tags, tag_ids })
}

/// Decodes many sentences, optionally across `jobs` threads. Output order
/// always matches input order.
pub fn decode_batch<F: Scalar>(
    params: &ModelParams<F>,
    vocab: &Vocabulary,
    mechanism: ContextMechanism,
    sentences: &[Sentence],
    beam_size: usize,
    jobs: usize,
) -> Result<Vec<TagSequence>> {
    if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::contract(format!("thread pool: {e}")))?;
        pool.install(|| {
            sentences
                .par_iter()
                .map(|s| decode(params, vocab, mechanism, s, beam_size))
                .collect()
        })
    } else {
        sentences
            .iter()
            .map(|s| decode(params, vocab, mechanism, s, beam_size))
            .collect()
    }
}

/// A maximal `B-X (I-X)*` run; indices are 0-based and inclusive.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct ChunkSpan {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

/// Chunks of a valid IOB sequence (repair first if the tags may be raw
/// model output). A chunk starts at `B-X`, extends through consecutive
/// `I-X` of the same type, and ends before any other tag; adjacent `B-X`
/// tags are separate chunks.
pub fn extract_chunks(tags: &[String]) -> Result<Vec<ChunkSpan>> {
    // Surface malformed tags as errors rather than walking past them.
    corpus::validate_iob(tags, IobMode::Strict)?;
    Ok(chunks_of_valid(tags))
}

fn chunks_of_valid(tags: &[String]) -> Vec<ChunkSpan> {
    corpus::iob_runs(tags)
        .into_iter()
        .map(|(label, start, end)| ChunkSpan { label, start, end })
        .collect()
}

/// Gold/predicted/correct chunk tallies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ChunkCounts {
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

impl ChunkCounts {
    fn add(&mut self, other: ChunkCounts) {
        self.gold += other.gold;
        self.predicted += other.predicted;
        self.correct += other.correct;
    }

    /// Precision in percent; 0 when nothing was predicted.
    pub fn precision(&self) -> f64 {
        if self.predicted == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.predicted as f64
        }
    }

    /// Recall in percent; 0 when there are no gold chunks.
    pub fn recall(&self) -> f64 {
        if self.gold == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.gold as f64
        }
    }

    /// Harmonic mean of precision and recall, in percent; 0 when both are 0.
    pub fn f1(&self) -> f64 {
        let p = self.precision();
        let r = self.recall();
        if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) }
    }
}

/// Chunk-level evaluation result: micro-averaged totals plus a per-type
/// breakdown, and how much IOB repair the inputs needed.
#[derive(Clone, Debug, Serialize)]
pub struct F1Report {
    pub overall: ChunkCounts,
    pub per_type: BTreeMap<String, ChunkCounts>,
    pub sentences: usize,
    pub tokens: usize,
    pub repaired_predictions: usize,
    pub repaired_gold: usize,
}

impl F1Report {
    pub fn precision(&self) -> f64 {
        self.overall.precision()
    }

    pub fn recall(&self) -> f64 {
        self.overall.recall()
    }

    pub fn f1(&self) -> f64 {
        self.overall.f1()
    }

    /// conlleval-style text block; percentages to two decimals.
    pub fn text_block(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "IOB repair before scoring: {} predicted / {} gold tags rewritten",
            self.repaired_predictions, self.repaired_gold
        );
        let _ = writeln!(
            out,
            "processed {} sentences, {} tokens with {} chunks; found: {} chunks; correct: {}",
            self.sentences, self.tokens, self.overall.gold, self.overall.predicted,
            self.overall.correct
        );
        let _ = writeln!(
            out,
            "overall: precision: {:6.2}%; recall: {:6.2}%; F1: {:6.2}",
            self.precision(),
            self.recall(),
            self.f1()
        );
        for (label, counts) in &self.per_type {
            let _ = writeln!(
                out,
                "{label:>16}: precision: {:6.2}%; recall: {:6.2}%; F1: {:6.2}  (gold {}, found {})",
                counts.precision(),
                counts.recall(),
                counts.f1(),
                counts.gold,
                counts.predicted
            );
        }
        out
    }
}

/// Scores predictions against gold annotations. Both sides are repaired to
/// valid IOB before chunking; a predicted chunk is correct only when its
/// type, start and end all match a gold chunk of the same sentence.
pub fn f1_score(gold: &[Pair], predicted: &[TagSequence]) -> Result<F1Report> {
    if gold.len() != predicted.len() {
        return Err(Error::contract(format!(
            "f1_score: {} gold sentences vs {} predictions",
            gold.len(),
            predicted.len()
        )));
    }
    let mut report = F1Report {
        overall: ChunkCounts::default(),
        per_type: BTreeMap::new(),
        sentences: gold.len(),
        tokens: 0,
        repaired_predictions: 0,
        repaired_gold: 0,
    };
    for (index, ((_, gold_tags), pred_tags)) in gold.iter().zip(predicted).enumerate() {
        if gold_tags.len() != pred_tags.len() {
            return Err(Error::contract(format!(
                "f1_score: sentence {index}: gold length {} vs predicted length {}",
                gold_tags.len(),
                pred_tags.len()
            )));
        }
        report.tokens += gold_tags.len();
        let gold_fixed = corpus::validate_iob(&gold_tags.tags, IobMode::Repair)?;
        let pred_fixed = corpus::validate_iob(&pred_tags.tags, IobMode::Repair)?;
        report.repaired_gold += diff_count(&gold_tags.tags, &gold_fixed);
        report.repaired_predictions += diff_count(&pred_tags.tags, &pred_fixed);

        let gold_chunks = chunks_of_valid(&gold_fixed);
        let pred_chunks = chunks_of_valid(&pred_fixed);
        let gold_set: HashSet<&ChunkSpan> = gold_chunks.iter().collect();

        for chunk in &gold_chunks {
            report.overall.gold += 1;
            report.per_type.entry(chunk.label.clone()).or_default().gold += 1;
        }
        for chunk in &pred_chunks {
            report.overall.predicted += 1;
            let entry = report.per_type.entry(chunk.label.clone()).or_default();
            entry.predicted += 1;
            if gold_set.contains(chunk) {
                report.overall.correct += 1;
                entry.correct += 1;
            }
        }
    }
    Ok(report)
}

fn diff_count(a: &[String], b: &[String]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Tags every sentence of `input` (CoNLL or one-token-per-line) and writes
/// `token<TAB>predicted_tag` with sentence boundaries preserved. An empty
/// input produces an empty output.
pub fn tag_file<F: Scalar>(
    params: &ModelParams<F>,
    vocab: &Vocabulary,
    mechanism: ContextMechanism,
    beam_size: usize,
    jobs: usize,
    input: impl AsRef<Path>,
    output: impl AsRef<Path>,
) -> Result<TagSummary> {
    let sentences = corpus::read_tokens(input)?;
    if sentences.is_empty() {
        std::fs::write(output, "")?;
        return Ok(TagSummary {
            sentences: 0,
            tokens: 0,
        });
    }
    let tags = decode_batch(params, vocab, mechanism, &sentences, beam_size, jobs)?;
    let tokens = sentences.iter().map(Sentence::len).sum();
    let pairs: Vec<Pair> = sentences.into_iter().zip(tags).collect();
    corpus::write_conll(&pairs, output)?;
    Ok(TagSummary {
        sentences: pairs.len(),
        tokens,
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct TagSummary {
    pub sentences: usize,
    pub tokens: usize,
}

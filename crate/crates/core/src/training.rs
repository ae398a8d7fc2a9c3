//! Cross-entropy training: uniform initialization, teacher-forced sequence
//! loss with inverted dropout, plain per-sentence SGD, validation-based
//! model selection, and learning-rate grid search.

use std::time::Instant;

use rand::Rng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{Pair, Sentence, Vocabulary};
use crate::error::{Error, Result};
use crate::infer;
use crate::model::{BoundModel, ContextMechanism, ModelConfig, ModelParams};
use crate::rng::Prng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorId};

/// Probability floor under the loss's log; gold probabilities that underflow
/// it contribute a constant term (and no gradient) instead of an infinity.
const LOG_FLOOR: f64 = 1e-30;

/// Everything a training run needs. The same seed, config and corpus give a
/// bit-identical run in 64-bit precision.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub dropout: f64,
    pub init_range: f64,
    pub seed: u64,
    pub mechanism: ContextMechanism,
    /// Beam width for the per-epoch validation decode (and test decoding).
    pub beam_size: usize,
    /// Words below this training frequency become `<unk>`.
    pub min_count: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.008,
            epochs: 100,
            dropout: 0.5,
            init_range: 0.2,
            seed: 0,
            mechanism: ContextMechanism::Focus,
            beam_size: 2,
            min_count: 2,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::contract(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs < 1 {
            return Err(Error::contract("epochs must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::contract(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.init_range <= 0.0 {
            return Err(Error::contract("init_range must be positive"));
        }
        if self.beam_size < 1 {
            return Err(Error::contract("beam_size must be >= 1"));
        }
        if self.min_count < 1 {
            return Err(Error::contract("min_count must be >= 1"));
        }
        self.model.validate()
    }
}

/// The learning rates tried by default, spanning 0.004 to 0.04.
pub fn default_grid() -> Vec<f64> {
    vec![0.004, 0.008, 0.016, 0.032, 0.04]
}

/// Samples every learnable value i.i.d. uniform on `(-range, range)`.
pub fn init_params<F: Scalar>(
    config: ModelConfig,
    vocab_size: usize,
    tag_count: usize,
    range: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ModelParams<F>> {
    let mut params = ModelParams::zeros(config, vocab_size, tag_count)?;
    params.for_each_tensor_mut(|_, tensor| {
        for v in tensor.data_mut() {
            *v = F::from_f(rng.random_range(-range..range));
        }
    });
    Ok(params)
}

/// Inverted-dropout masks for one sentence: one per-position mask over the
/// word embedding and one over the decoder hidden state ahead of the output
/// layer. Entries are `0` or `1/(1-p)`, so evaluation needs no rescaling.
#[derive(Clone, Debug)]
pub struct DropoutMasks<F> {
    pub embed: Vec<Vec<F>>,
    pub hidden: Vec<Vec<F>>,
}

pub fn sample_masks<F: Scalar>(
    t_len: usize,
    embed_dim: usize,
    decoder_hidden: usize,
    p: f64,
    rng: &mut ChaCha8Rng,
) -> DropoutMasks<F> {
    let keep = F::from_f(1.0 / (1.0 - p));
    let mut draw = |dim: usize| -> Vec<F> {
        (0..dim)
            .map(|_| {
                if rng.random_range(0.0..1.0) < p {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect()
    };
    DropoutMasks {
        embed: (0..t_len).map(|_| draw(embed_dim)).collect(),
        hidden: (0..t_len).map(|_| draw(decoder_hidden)).collect(),
    }
}

/// A built loss node plus diagnostics.
pub struct SequenceLoss {
    pub loss: TensorId,
    /// Steps whose gold probability underflowed [`LOG_FLOOR`].
    pub clamped: usize,
}

/// Teacher-forced negative log-likelihood of a tagged sentence:
/// `-sum_t log dist_t[gold_t]`, with the gold previous label fed at each
/// step. Dropout masks, when given, must have been sampled for this
/// sentence's length; freezing them makes the loss a deterministic function
/// of the parameters (which the gradient check relies on).
pub fn sequence_loss<F: Scalar>(
    tape: &mut Tape<F>,
    model: &BoundModel,
    mechanism: ContextMechanism,
    token_ids: &[usize],
    tag_ids: &[usize],
    bos_tag: usize,
    masks: Option<&DropoutMasks<F>>,
) -> Result<SequenceLoss> {
    if token_ids.is_empty() || token_ids.len() != tag_ids.len() {
        return Err(Error::contract(format!(
            "sequence_loss: {} tokens vs {} tags",
            token_ids.len(),
            tag_ids.len()
        )));
    }
    if let Some(m) = masks {
        if m.embed.len() != token_ids.len() || m.hidden.len() != token_ids.len() {
            return Err(Error::contract("dropout masks do not match sentence length"));
        }
    }
    let enc = model.encode(tape, token_ids, masks.map(|m| m.embed.as_slice()))?;
    let mut state = model.init_decoder_state(tape, &enc)?;
    let mut y_prev = bos_tag;
    let mut clamped = 0;
    let mut total: Option<TensorId> = None;
    for (t, &gold) in tag_ids.iter().enumerate() {
        let context = model.context(tape, mechanism, &state, &enc, t + 1)?;
        let hidden_mask = masks.map(|m| m.hidden[t].as_slice());
        let (next, dist) =
            model.decoder_step(tape, &state, y_prev, context, None, hidden_mask)?;
        let p = tape.index(dist, gold)?;
        let term = if tape.value(p)[0].to_f() < LOG_FLOOR {
            clamped += 1;
            tape.scalar(F::from_f(-LOG_FLOOR.ln()))
        } else {
            let lp = tape.log(p);
            tape.neg(lp)
        };
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
        state = next;
        y_prev = gold;
    }
    Ok(SequenceLoss {
        loss: total.unwrap(),
        clamped,
    })
}

/// Gradients harvested from a tape, aligned with the canonical parameter
/// order. Consumed by [`sgd_step`].
pub struct Gradients<F> {
    named: Vec<(String, Vec<F>)>,
}

impl<F: Scalar> Gradients<F> {
    pub fn harvest(tape: &Tape<F>, model: &BoundModel) -> Self {
        let named = model
            .named_handles()
            .iter()
            .map(|(name, id)| {
                (
                    name.clone(),
                    tape.grad(*id).expect("backward populated gradients").to_vec(),
                )
            })
            .collect();
        Gradients { named }
    }

    pub fn named(&self) -> &[(String, Vec<F>)] {
        &self.named
    }
}

/// One plain SGD update, `theta <- theta - lr * grad`, over every learnable
/// tensor. A non-finite gradient aborts before any parameter is touched,
/// naming the offending tensor. The gradients are consumed (cleared).
pub fn sgd_step<F: Scalar>(
    params: &mut ModelParams<F>,
    grads: Gradients<F>,
    learning_rate: f64,
) -> Result<()> {
    for (name, g) in &grads.named {
        if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
            return Err(Error::numeric(name.clone(), format!("gradient entry {bad}")));
        }
    }
    let lr = F::from_f(learning_rate);
    let mut cursor = 0;
    let mut mismatch: Option<String> = None;
    params.for_each_tensor_mut(|name, tensor| {
        if mismatch.is_some() {
            return;
        }
        let Some((gname, g)) = grads.named.get(cursor) else {
            mismatch = Some(format!("missing gradient for {name}"));
            return;
        };
        if gname != name || g.len() != tensor.len() {
            mismatch = Some(format!("gradient {gname} does not match parameter {name}"));
            return;
        }
        for (v, &gv) in tensor.data_mut().iter_mut().zip(g) {
            *v = *v - lr * gv;
        }
        cursor += 1;
    });
    if let Some(msg) = mismatch {
        return Err(Error::contract(msg));
    }
    Ok(())
}

/// Outcome of one training example (forward, backward, update).
pub struct StepOutcome {
    pub loss: f64,
    pub clamped: usize,
}

/// Full cycle on one encoded pair: fresh tape, forward loss with freshly
/// sampled dropout masks, backward, SGD update.
pub fn train_example<F: Scalar>(
    params: &mut ModelParams<F>,
    mechanism: ContextMechanism,
    token_ids: &[usize],
    tag_ids: &[usize],
    bos_tag: usize,
    dropout: f64,
    learning_rate: f64,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    let masks = (dropout > 0.0).then(|| {
        sample_masks::<F>(
            token_ids.len(),
            params.config.embed_dim,
            params.config.decoder_hidden,
            dropout,
            dropout_rng,
        )
    });
    let mut tape: Tape<F> = Tape::new();
    let model = BoundModel::bind(&mut tape, params);
    let built = sequence_loss(
        &mut tape,
        &model,
        mechanism,
        token_ids,
        tag_ids,
        bos_tag,
        masks.as_ref(),
    )?;
    let loss = tape.value(built.loss)[0].to_f();
    tape.backward(built.loss)?;
    let grads = Gradients::harvest(&tape, &model);
    sgd_step(params, grads, learning_rate)?;
    Ok(StepOutcome {
        loss,
        clamped: built.clamped,
    })
}

#[derive(Clone, Debug)]
pub struct EpochRecord {
    /// 1-based epoch index.
    pub epoch: usize,
    /// Mean training loss per sentence.
    pub loss: f64,
    /// Chunk F1 of the validation decode, in percent.
    pub val_f1: f64,
    pub wall_secs: f64,
}

/// A finished training run: the per-epoch trace and the parameters of the
/// best validation epoch.
pub struct TrainRecord<F> {
    pub epochs: Vec<EpochRecord>,
    /// 1-based; earliest epoch on F1 ties.
    pub best_epoch: usize,
    pub best_f1: f64,
    pub params: ModelParams<F>,
    pub vocab: Vocabulary,
    pub mechanism: ContextMechanism,
    /// Total loss terms clamped at the log floor across the run.
    pub clamped: usize,
}

/// Trains on `train_pairs` with per-sentence SGD at a fixed learning rate.
/// The vocabulary is built from the training pairs only. After every epoch
/// the validation set is decoded (beam `config.beam_size`) and scored; the
/// parameters of the best epoch are kept.
pub fn train<F: Scalar>(
    config: &TrainConfig,
    train_pairs: &[Pair],
    valid_pairs: &[Pair],
) -> Result<TrainRecord<F>> {
    config.validate()?;
    if valid_pairs.is_empty() {
        return Err(Error::contract("train: empty validation set"));
    }
    let vocab = Vocabulary::build(train_pairs, config.min_count)?;
    let encoded = vocab.encode_pairs(train_pairs)?;
    let valid_sentences: Vec<Sentence> = valid_pairs
        .iter()
        .map(|(s, _)| Sentence {
            tokens: s.tokens.clone(),
            token_ids: s.tokens.iter().map(|t| vocab.word_id(t)).collect(),
        })
        .collect();

    let prng = Prng::new(config.seed);
    let mut init_rng = prng.stream("init");
    let mut params: ModelParams<F> = init_params(
        config.model,
        vocab.word_count(),
        vocab.tag_count(),
        config.init_range,
        &mut init_rng,
    )?;
    let mut dropout_rng = prng.stream("dropout");
    let bos = vocab.bos_tag_id();

    let mut records: Vec<EpochRecord> = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelParams<F>)> = None;
    let mut clamped_total = 0;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..encoded.len()).collect();
        order.shuffle(&mut prng.stream_indexed("shuffle", epoch as u64));

        let mut loss_sum = 0.0;
        for &i in &order {
            let (sentence, tags) = &encoded[i];
            let outcome = train_example(
                &mut params,
                config.mechanism,
                &sentence.token_ids,
                &tags.tag_ids,
                bos,
                config.dropout,
                config.learning_rate,
                &mut dropout_rng,
            )?;
            loss_sum += outcome.loss;
            clamped_total += outcome.clamped;
        }

        let decoded = infer::decode_batch(
            &params,
            &vocab,
            config.mechanism,
            &valid_sentences,
            config.beam_size,
            1,
        )?;
        let report = infer::f1_score(valid_pairs, &decoded)?;
        let val_f1 = report.f1();
        if best.as_ref().is_none_or(|(f1, _, _)| val_f1 > *f1) {
            best = Some((val_f1, epoch, params.clone()));
        }
        records.push(EpochRecord {
            epoch,
            loss: loss_sum / encoded.len() as f64,
            val_f1,
            wall_secs: started.elapsed().as_secs_f64(),
        });
    }

    let (best_f1, best_epoch, best_params) = best.unwrap();
    Ok(TrainRecord {
        epochs: records,
        best_epoch,
        best_f1,
        params: best_params,
        vocab,
        mechanism: config.mechanism,
        clamped: clamped_total,
    })
}

/// One grid cell's fate; failures are recorded, not fatal to the search.
#[derive(Clone, Debug)]
pub struct GridCell {
    pub learning_rate: f64,
    pub val_f1: Option<f64>,
    pub best_epoch: Option<usize>,
    pub error: Option<String>,
}

pub struct GridOutcome<F> {
    pub cells: Vec<GridCell>,
    pub best: TrainRecord<F>,
    pub best_rate: f64,
}

/// Runs one independent training per learning rate (each cell gets its own
/// derived seed) and keeps the run with the highest validation F1, breaking
/// ties toward the smaller rate. Cells may run on parallel threads.
pub fn grid_search<F: Scalar>(
    base: &TrainConfig,
    rates: &[f64],
    train_pairs: &[Pair],
    valid_pairs: &[Pair],
    jobs: usize,
) -> Result<GridOutcome<F>> {
    if rates.is_empty() {
        return Err(Error::contract("grid_search: empty learning-rate grid"));
    }
    let prng = Prng::new(base.seed);
    let run_cell = |(i, &rate): (usize, &f64)| -> (f64, Result<TrainRecord<F>>) {
        let cell_config = TrainConfig {
            learning_rate: rate,
            seed: prng.derive("grid", i as u64),
            ..base.clone()
        };
        (rate, train(&cell_config, train_pairs, valid_pairs))
    };
    let results: Vec<(f64, Result<TrainRecord<F>>)> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::contract(format!("thread pool: {e}")))?;
        pool.install(|| rates.par_iter().enumerate().map(run_cell).collect())
    } else {
        rates.iter().enumerate().map(run_cell).collect()
    };

    let mut cells = Vec::with_capacity(results.len());
    let mut best: Option<(f64, TrainRecord<F>)> = None;
    for (rate, outcome) in results {
        match outcome {
            Ok(record) => {
                cells.push(GridCell {
                    learning_rate: rate,
                    val_f1: Some(record.best_f1),
                    best_epoch: Some(record.best_epoch),
                    error: None,
                });
                let better = match &best {
                    None => true,
                    Some((best_rate, best_record)) => {
                        record.best_f1 > best_record.best_f1
                            || (record.best_f1 == best_record.best_f1 && rate < *best_rate)
                    }
                };
                if better {
                    best = Some((rate, record));
                }
            }
            Err(e) => cells.push(GridCell {
                learning_rate: rate,
                val_f1: None,
                best_epoch: None,
                error: Some(e.to_string()),
            }),
        }
    }
    let (best_rate, best) =
        best.ok_or_else(|| Error::contract("grid_search: every cell failed"))?;
    Ok(GridOutcome {
        cells,
        best,
        best_rate,
    })
}

/// Deterministic seeded split of a corpus into train/validation parts.
/// `fraction` is the training share; both sides are guaranteed non-empty.
pub fn split_pairs(pairs: &[Pair], fraction: f64, seed: u64) -> Result<(Vec<Pair>, Vec<Pair>)> {
    if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
        return Err(Error::contract(format!(
            "split fraction must be in (0, 1), got {fraction}"
        )));
    }
    if pairs.len() < 2 {
        return Err(Error::contract("split needs at least two sentences"));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut Prng::new(seed).stream("split"));
    let n_train = ((pairs.len() as f64 * fraction).round() as usize)
        .clamp(1, pairs.len() - 1);
    let train = order[..n_train].iter().map(|&i| pairs[i].clone()).collect();
    let valid = order[n_train..].iter().map(|&i| pairs[i].clone()).collect();
    Ok((train, valid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::pair_from_strs;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            embed_dim: 4,
            hidden: 5,
            label_embed_dim: 4,
            decoder_hidden: 10,
            peepholes: true,
        }
    }

    fn tiny_corpus() -> Vec<Pair> {
        vec![
            pair_from_strs(&["go", "to", "rome"], &["O", "O", "B-loc"]),
            pair_from_strs(&["go", "to", "pisa"], &["O", "O", "B-loc"]),
            pair_from_strs(&["leave", "rome", "now"], &["O", "B-loc", "B-when"]),
            pair_from_strs(&["leave", "pisa", "now"], &["O", "B-loc", "B-when"]),
            pair_from_strs(&["go", "now"], &["O", "B-when"]),
            pair_from_strs(&["leave", "now"], &["O", "B-when"]),
        ]
    }

    #[test]
    fn init_values_stay_inside_open_range() {
        let mut rng = Prng::new(0).stream("init");
        let params: ModelParams<f64> =
            init_params(tiny_model(), 20, 6, 0.2, &mut rng).unwrap();
        for (name, tensor) in params.named_tensors() {
            for &v in tensor.data() {
                assert!(v > -0.2 && v < 0.2, "{name}: {v} outside (-0.2, 0.2)");
            }
        }
    }

    #[test]
    fn init_is_deterministic_under_seed() {
        let draw = || {
            let mut rng = Prng::new(7).stream("init");
            init_params::<f64>(tiny_model(), 10, 4, 0.2, &mut rng).unwrap()
        };
        let a = draw();
        let b = draw();
        for ((_, ta), (_, tb)) in a.named_tensors().iter().zip(b.named_tensors()) {
            let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn init_sample_mean_is_near_zero() {
        let mut rng = Prng::new(1).stream("init-mean");
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| rng.random_range(-0.2..0.2))
            .sum::<f64>()
            / n as f64;
        assert!(mean.abs() < 0.01, "sample mean {mean}");
    }

    #[test]
    fn zero_model_loss_is_length_times_log_tags() {
        let tag_count = 5;
        let params: ModelParams<f64> =
            ModelParams::zeros(tiny_model(), 8, tag_count).unwrap();
        let mut tape = Tape::new();
        let model = BoundModel::bind(&mut tape, &params);
        let token_ids = [1usize, 2, 3, 4];
        let tag_ids = [1usize, 2, 1, 3];
        let built =
            sequence_loss(&mut tape, &model, ContextMechanism::Focus, &token_ids, &tag_ids, 0, None)
                .unwrap();
        let loss = tape.value(built.loss)[0];
        let expected = 4.0 * (tag_count as f64).ln();
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    }

    #[test]
    fn loss_without_dropout_is_deterministic() {
        let mut rng = Prng::new(3).stream("init");
        let params: ModelParams<f64> = init_params(tiny_model(), 8, 4, 0.2, &mut rng).unwrap();
        let eval = || {
            let mut tape = Tape::new();
            let model = BoundModel::bind(&mut tape, &params);
            let built = sequence_loss(
                &mut tape,
                &model,
                ContextMechanism::Attention,
                &[1, 2, 3],
                &[1, 2, 1],
                0,
                None,
            )
            .unwrap();
            tape.value(built.loss)[0]
        };
        assert_eq!(eval().to_bits(), eval().to_bits());
    }

    #[test]
    fn dropout_masks_scale_kept_units() {
        let mut rng = Prng::new(4).stream("dropout");
        let masks: DropoutMasks<f64> = sample_masks(3, 50, 20, 0.5, &mut rng);
        assert_eq!(masks.embed.len(), 3);
        assert_eq!(masks.hidden.len(), 3);
        for mask in masks.embed.iter().chain(&masks.hidden) {
            assert!(mask.iter().all(|&v| v == 0.0 || v == 2.0));
        }
        let kept: usize = masks
            .embed
            .iter()
            .flatten()
            .filter(|&&v| v != 0.0)
            .count();
        // 150 draws at p = 0.5; a wildly skewed count means the mask
        // sampling is broken rather than unlucky
        assert!(kept > 40 && kept < 110, "kept {kept} of 150");
    }

    #[test]
    fn sgd_analytic_cases() {
        let mut params: ModelParams<f64> = ModelParams::zeros(tiny_model(), 4, 3).unwrap();
        params.b_out.data_mut()[0] = 1.0;
        // build gradients of matching shape, all zero except b_out[0] = 2
        let mut tape: Tape<f64> = Tape::new();
        let model = BoundModel::bind(&mut tape, &params);
        let built = sequence_loss(
            &mut tape,
            &model,
            ContextMechanism::Focus,
            &[1],
            &[1],
            0,
            None,
        )
        .unwrap();
        tape.backward(built.loss).unwrap();
        let mut grads = Gradients::harvest(&tape, &model);
        for (name, g) in &mut grads.named {
            g.iter_mut().for_each(|v| *v = 0.0);
            if name == "out.b" {
                g[0] = 2.0;
            }
        }
        sgd_step(&mut params, grads, 0.1).unwrap();
        assert!((params.b_out.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_rate_changes_nothing() {
        let mut rng = Prng::new(5).stream("init");
        let mut params: ModelParams<f64> = init_params(tiny_model(), 6, 4, 0.2, &mut rng).unwrap();
        let before: Vec<Vec<f64>> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| t.data().to_vec())
            .collect();
        let mut tape = Tape::new();
        let model = BoundModel::bind(&mut tape, &params);
        let built = sequence_loss(
            &mut tape,
            &model,
            ContextMechanism::Focus,
            &[1, 2],
            &[1, 1],
            0,
            None,
        )
        .unwrap();
        tape.backward(built.loss).unwrap();
        let grads = Gradients::harvest(&tape, &model);
        sgd_step(&mut params, grads, 0.0).unwrap();
        let after: Vec<Vec<f64>> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| t.data().to_vec())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn sgd_rejects_non_finite_gradient_by_name() {
        let mut params: ModelParams<f64> = ModelParams::zeros(tiny_model(), 4, 3).unwrap();
        let mut tape = Tape::new();
        let model = BoundModel::bind(&mut tape, &params);
        let built = sequence_loss(
            &mut tape,
            &model,
            ContextMechanism::Focus,
            &[1],
            &[1],
            0,
            None,
        )
        .unwrap();
        tape.backward(built.loss).unwrap();
        let mut grads = Gradients::harvest(&tape, &model);
        for (name, g) in &mut grads.named {
            if name == "enc.fwd.W_xc" {
                g[0] = f64::NAN;
            }
        }
        let err = sgd_step(&mut params, grads, 0.1).unwrap_err();
        assert!(err.to_string().contains("enc.fwd.W_xc"), "{err}");
    }

    #[test]
    fn one_sgd_step_descends_a_quadratic() {
        // f(x) = (x - 3)^2 via the tape, one step from x = 0
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(
            crate::tensor::Tensor::new(vec![1], vec![0.0])
                .unwrap()
                .with_requires_grad(),
        );
        let c = tape.scalar(-3.0);
        let d = tape.add(x, c).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let loss = tape.sum(sq);
        let before = tape.value(loss)[0];
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap()[0];
        let x_new = 0.0 - 0.1 * g;
        let after = (x_new - 3.0_f64).powi(2);
        assert!(after < before);
    }

    #[test]
    fn train_single_epoch_produces_one_record() {
        let corpus = tiny_corpus();
        let config = TrainConfig {
            epochs: 1,
            model: tiny_model(),
            min_count: 1,
            dropout: 0.5,
            ..TrainConfig::default()
        };
        let record: TrainRecord<f64> = train(&config, &corpus, &corpus).unwrap();
        assert_eq!(record.epochs.len(), 1);
        assert_eq!(record.best_epoch, 1);
    }

    #[test]
    fn train_rejects_empty_validation() {
        let corpus = tiny_corpus();
        let config = TrainConfig {
            epochs: 1,
            model: tiny_model(),
            ..TrainConfig::default()
        };
        assert!(matches!(
            train::<f64>(&config, &corpus, &[]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn training_is_bit_reproducible() {
        let corpus = tiny_corpus();
        let config = TrainConfig {
            epochs: 3,
            model: tiny_model(),
            min_count: 1,
            seed: 11,
            ..TrainConfig::default()
        };
        let a: TrainRecord<f64> = train(&config, &corpus, &corpus).unwrap();
        let b: TrainRecord<f64> = train(&config, &corpus, &corpus).unwrap();
        for (ra, rb) in a.epochs.iter().zip(&b.epochs) {
            assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
            assert_eq!(ra.val_f1.to_bits(), rb.val_f1.to_bits());
        }
        for ((_, ta), (_, tb)) in a
            .params
            .named_tensors()
            .iter()
            .zip(b.params.named_tensors())
        {
            let bits = |t: &crate::tensor::Tensor<f64>| {
                t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            };
            assert_eq!(bits(ta), bits(tb));
        }
    }

    #[test]
    fn grid_of_one_rate_equals_plain_train() {
        let corpus = tiny_corpus();
        let base = TrainConfig {
            epochs: 2,
            model: tiny_model(),
            min_count: 1,
            seed: 3,
            ..TrainConfig::default()
        };
        let grid: GridOutcome<f64> =
            grid_search(&base, &[0.008], &corpus, &corpus, 1).unwrap();
        let solo_config = TrainConfig {
            learning_rate: 0.008,
            seed: Prng::new(3).derive("grid", 0),
            ..base
        };
        let solo: TrainRecord<f64> = train(&solo_config, &corpus, &corpus).unwrap();
        assert_eq!(grid.best_rate, 0.008);
        assert_eq!(grid.best.best_f1.to_bits(), solo.best_f1.to_bits());
    }

    #[test]
    fn default_grid_spans_the_published_range() {
        let grid = default_grid();
        assert_eq!(grid.first(), Some(&0.004));
        assert_eq!(grid.last(), Some(&0.04));
        assert!(grid.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn grid_winner_dominates_cells() {
        let corpus = tiny_corpus();
        let base = TrainConfig {
            epochs: 2,
            model: tiny_model(),
            min_count: 1,
            ..TrainConfig::default()
        };
        let grid: GridOutcome<f64> =
            grid_search(&base, &[0.004, 0.016], &corpus, &corpus, 1).unwrap();
        for cell in &grid.cells {
            assert!(grid.best.best_f1 >= cell.val_f1.unwrap());
        }
    }

    #[test]
    fn split_is_seeded_and_non_empty() {
        let pairs: Vec<Pair> = (0..10)
            .map(|i| pair_from_strs(&[&format!("w{i}")], &["O"]))
            .collect();
        let (train_a, valid_a) = split_pairs(&pairs, 0.8, 42).unwrap();
        let (train_b, valid_b) = split_pairs(&pairs, 0.8, 42).unwrap();
        assert_eq!(train_a, train_b);
        assert_eq!(valid_a, valid_b);
        assert_eq!(train_a.len(), 8);
        assert_eq!(valid_a.len(), 2);
        let (train_c, _) = split_pairs(&pairs, 0.8, 43).unwrap();
        assert_ne!(train_a, train_c);
        assert!(split_pairs(&pairs[..1], 0.8, 0).is_err());
        assert!(split_pairs(&pairs, 0.0, 0).is_err());
        assert!(split_pairs(&pairs, 1.0, 0).is_err());
    }

    #[test]
    fn evaluation_is_dropout_free() {
        // decoding the same checkpoint twice gives identical tags and F1
        let corpus = tiny_corpus();
        let config = TrainConfig {
            epochs: 2,
            model: tiny_model(),
            min_count: 1,
            dropout: 0.5,
            ..TrainConfig::default()
        };
        let record: TrainRecord<f64> = train(&config, &corpus, &corpus).unwrap();
        let score = || {
            let decoded = infer::decode_batch(
                &record.params,
                &record.vocab,
                record.mechanism,
                &corpus.iter().map(|(s, _)| s.clone()).collect::<Vec<_>>(),
                2,
                1,
            )
            .unwrap();
            infer::f1_score(&corpus, &decoded).unwrap().f1()
        };
        assert_eq!(score().to_bits(), score().to_bits());
    }

    #[test]
    fn best_epoch_checkpoint_reproduces_recorded_f1() {
        let corpus = tiny_corpus();
        let config = TrainConfig {
            epochs: 4,
            model: tiny_model(),
            min_count: 1,
            seed: 9,
            ..TrainConfig::default()
        };
        let record: TrainRecord<f64> = train(&config, &corpus, &corpus).unwrap();
        let decoded = infer::decode_batch(
            &record.params,
            &record.vocab,
            record.mechanism,
            &corpus.iter().map(|(s, _)| s.clone()).collect::<Vec<_>>(),
            config.beam_size,
            1,
        )
        .unwrap();
        let rescored = infer::f1_score(&corpus, &decoded).unwrap().f1();
        assert_eq!(rescored.to_bits(), record.best_f1.to_bits());
        let max = record
            .epochs
            .iter()
            .map(|e| e.val_f1)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(record.best_f1, max);
    }
}

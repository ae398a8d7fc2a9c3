//! The BLSTM-LSTM encoder-decoder with interchangeable attention and focus
//! context mechanisms.
//!
//! A bidirectional LSTM encoder turns the sentence into per-position states
//! `h_i = [h_bwd_i, h_fwd_i]` (backward half first). A unidirectional LSTM
//! decoder emits one tag distribution per input position; its step input is
//! the previous label's embedding concatenated with a context vector. The
//! two mechanisms differ only in how that context is produced: attention
//! takes a softmax-weighted average of all encoder states, focus takes the
//! encoder state exactly aligned with the output position.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorId};

/// How the decoder's per-step context vector is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContextMechanism {
    Attention,
    Focus,
}

impl ContextMechanism {
    pub fn name(&self) -> &'static str {
        match self {
            ContextMechanism::Attention => "attention",
            ContextMechanism::Focus => "focus",
        }
    }
}

impl FromStr for ContextMechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(ContextMechanism::Attention),
            "focus" => Ok(ContextMechanism::Focus),
            other => Err(Error::contract(format!(
                "unknown mechanism {other:?} (expected \"attention\" or \"focus\")"
            ))),
        }
    }
}

/// Layer sizes. Defaults follow the reference configuration: 100-dimensional
/// word embeddings, 100 hidden units per encoder direction, decoder width
/// twice the encoder's so the context and decoder state are commensurate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub label_embed_dim: usize,
    pub decoder_hidden: usize,
    /// Peephole connections from the cell to the gates (the reference cell
    /// has them); disable for ablation.
    pub peepholes: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::with_hidden(100, 100, 100)
    }
}

impl ModelConfig {
    pub fn with_hidden(embed_dim: usize, hidden: usize, label_embed_dim: usize) -> Self {
        ModelConfig {
            embed_dim,
            hidden,
            label_embed_dim,
            decoder_hidden: 2 * hidden,
            peepholes: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.embed_dim,
            self.hidden,
            self.label_embed_dim,
            self.decoder_hidden,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!("model dimensions must be positive: {self:?}")));
        }
        if self.decoder_hidden < self.hidden {
            return Err(Error::contract(format!(
                "decoder_hidden ({}) must be >= hidden ({}) so the decoder start \
                 state can hold the first backward encoder state",
                self.decoder_hidden, self.hidden
            )));
        }
        Ok(())
    }

    /// Width of the attention scorer's hidden layer.
    pub fn scorer_width(&self) -> usize {
        self.hidden
    }

    /// Dimension of a concatenated encoder state.
    pub fn encoder_state_dim(&self) -> usize {
        2 * self.hidden
    }

    /// Dimension of the decoder LSTM's input.
    pub fn decoder_input_dim(&self) -> usize {
        self.label_embed_dim + self.encoder_state_dim()
    }
}

/// Parameters of one LSTM cell with input/forget/output gates and diagonal
/// peephole connections to the cell.
#[derive(Clone, Debug)]
pub struct LstmCellParams<F> {
    pub w_xi: Tensor<F>,
    pub w_hi: Tensor<F>,
    pub p_i: Option<Tensor<F>>,
    pub b_i: Tensor<F>,
    pub w_xf: Tensor<F>,
    pub w_hf: Tensor<F>,
    pub p_f: Option<Tensor<F>>,
    pub b_f: Tensor<F>,
    pub w_xc: Tensor<F>,
    pub w_hc: Tensor<F>,
    pub b_c: Tensor<F>,
    pub w_xo: Tensor<F>,
    pub w_ho: Tensor<F>,
    pub p_o: Option<Tensor<F>>,
    pub b_o: Tensor<F>,
}

impl<F: Scalar> LstmCellParams<F> {
    pub fn zeros(input_dim: usize, hidden: usize, peepholes: bool) -> Self {
        let mat = || Tensor::zeros(vec![hidden, input_dim]);
        let rec = || Tensor::zeros(vec![hidden, hidden]);
        let vec1 = || Tensor::zeros(vec![hidden]);
        let peep = || peepholes.then(|| Tensor::zeros(vec![hidden]));
        LstmCellParams {
            w_xi: mat(),
            w_hi: rec(),
            p_i: peep(),
            b_i: vec1(),
            w_xf: mat(),
            w_hf: rec(),
            p_f: peep(),
            b_f: vec1(),
            w_xc: mat(),
            w_hc: rec(),
            b_c: vec1(),
            w_xo: mat(),
            w_ho: rec(),
            p_o: peep(),
            b_o: vec1(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b_i.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.w_xi.shape()[1]
    }

    pub fn has_peepholes(&self) -> bool {
        self.p_i.is_some()
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<F>)>) {
        let mut push = |name: &str, t: &'a Tensor<F>| out.push((format!("{prefix}.{name}"), t));
        push("W_xi", &self.w_xi);
        push("W_hi", &self.w_hi);
        if let Some(p) = &self.p_i {
            push("w_ci", p);
        }
        push("b_i", &self.b_i);
        push("W_xf", &self.w_xf);
        push("W_hf", &self.w_hf);
        if let Some(p) = &self.p_f {
            push("w_cf", p);
        }
        push("b_f", &self.b_f);
        push("W_xc", &self.w_xc);
        push("W_hc", &self.w_hc);
        push("b_c", &self.b_c);
        push("W_xo", &self.w_xo);
        push("W_ho", &self.w_ho);
        if let Some(p) = &self.p_o {
            push("w_co", p);
        }
        push("b_o", &self.b_o);
    }
}

/// Attention scorer: a one-hidden-layer feed-forward net
/// `score_i = v . tanh(W_s s_prev + W_h h_i + b)`.
#[derive(Clone, Debug)]
pub struct AttentionParams<F> {
    pub w_s: Tensor<F>,
    pub w_h: Tensor<F>,
    pub b: Tensor<F>,
    pub v: Tensor<F>,
}

impl<F: Scalar> AttentionParams<F> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let width = config.scorer_width();
        AttentionParams {
            w_s: Tensor::zeros(vec![width, config.decoder_hidden]),
            w_h: Tensor::zeros(vec![width, config.encoder_state_dim()]),
            b: Tensor::zeros(vec![width]),
            v: Tensor::zeros(vec![width]),
        }
    }
}

/// All learnable tensors of the model.
#[derive(Clone, Debug)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    /// Word embedding matrix, `vocab_size x embed_dim`.
    pub embedding: Tensor<F>,
    /// Label embedding matrix, `tag_count x label_embed_dim`.
    pub label_embedding: Tensor<F>,
    pub enc_fwd: LstmCellParams<F>,
    pub enc_bwd: LstmCellParams<F>,
    pub dec: LstmCellParams<F>,
    pub attention: AttentionParams<F>,
    /// Output layer, `tag_count x decoder_hidden` plus bias.
    pub w_out: Tensor<F>,
    pub b_out: Tensor<F>,
}

impl<F: Scalar> ModelParams<F> {
    /// All-zero parameters of the given geometry.
    pub fn zeros(config: ModelConfig, vocab_size: usize, tag_count: usize) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 || tag_count == 0 {
            return Err(Error::contract("vocab_size and tag_count must be positive"));
        }
        Ok(ModelParams {
            config,
            embedding: Tensor::zeros(vec![vocab_size, config.embed_dim]),
            label_embedding: Tensor::zeros(vec![tag_count, config.label_embed_dim]),
            enc_fwd: LstmCellParams::zeros(config.embed_dim, config.hidden, config.peepholes),
            enc_bwd: LstmCellParams::zeros(config.embed_dim, config.hidden, config.peepholes),
            dec: LstmCellParams::zeros(
                config.decoder_input_dim(),
                config.decoder_hidden,
                config.peepholes,
            ),
            attention: AttentionParams::zeros(&config),
            w_out: Tensor::zeros(vec![tag_count, config.decoder_hidden]),
            b_out: Tensor::zeros(vec![tag_count]),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.shape()[0]
    }

    pub fn tag_count(&self) -> usize {
        self.label_embedding.shape()[0]
    }

    /// Canonical `(name, tensor)` listing in a fixed order; checkpoint
    /// entries, gradient harvesting and SGD all follow this order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out: Vec<(String, &Tensor<F>)> = Vec::new();
        out.push(("embed.words".into(), &self.embedding));
        out.push(("embed.labels".into(), &self.label_embedding));
        self.enc_fwd.named("enc.fwd", &mut out);
        self.enc_bwd.named("enc.bwd", &mut out);
        self.dec.named("dec", &mut out);
        out.push(("attn.W_s".into(), &self.attention.w_s));
        out.push(("attn.W_h".into(), &self.attention.w_h));
        out.push(("attn.b".into(), &self.attention.b));
        out.push(("attn.v".into(), &self.attention.v));
        out.push(("out.W".into(), &self.w_out));
        out.push(("out.b".into(), &self.b_out));
        out
    }

    /// Mutable traversal in the same canonical order.
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<F>)) {
        f("embed.words", &mut self.embedding);
        f("embed.labels", &mut self.label_embedding);
        for (prefix, cell) in [
            ("enc.fwd", &mut self.enc_fwd),
            ("enc.bwd", &mut self.enc_bwd),
            ("dec", &mut self.dec),
        ] {
            f(&format!("{prefix}.W_xi"), &mut cell.w_xi);
            f(&format!("{prefix}.W_hi"), &mut cell.w_hi);
            if let Some(p) = &mut cell.p_i {
                f(&format!("{prefix}.w_ci"), p);
            }
            f(&format!("{prefix}.b_i"), &mut cell.b_i);
            f(&format!("{prefix}.W_xf"), &mut cell.w_xf);
            f(&format!("{prefix}.W_hf"), &mut cell.w_hf);
            if let Some(p) = &mut cell.p_f {
                f(&format!("{prefix}.w_cf"), p);
            }
            f(&format!("{prefix}.b_f"), &mut cell.b_f);
            f(&format!("{prefix}.W_xc"), &mut cell.w_xc);
            f(&format!("{prefix}.W_hc"), &mut cell.w_hc);
            f(&format!("{prefix}.b_c"), &mut cell.b_c);
            f(&format!("{prefix}.W_xo"), &mut cell.w_xo);
            f(&format!("{prefix}.W_ho"), &mut cell.w_ho);
            if let Some(p) = &mut cell.p_o {
                f(&format!("{prefix}.w_co"), p);
            }
            f(&format!("{prefix}.b_o"), &mut cell.b_o);
        }
        f("attn.W_s", &mut self.attention.w_s);
        f("attn.W_h", &mut self.attention.w_h);
        f("attn.b", &mut self.attention.b);
        f("attn.v", &mut self.attention.v);
        f("out.W", &mut self.w_out);
        f("out.b", &mut self.b_out);
    }
}

/// Hidden and cell memory of one LSTM, as tape handles.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: TensorId,
    pub c: TensorId,
}

/// The encoder's output: one concatenated state per input position.
pub struct EncoderStates {
    /// `h_i = [h_bwd_i, h_fwd_i]`, one per token.
    pub states: Vec<TensorId>,
    /// The backward state at position 1, used to start the decoder.
    pub first_backward: TensorId,
    /// The states stacked as a `T x 2H` matrix (attention's weighted sum).
    pub matrix: TensorId,
}

impl EncoderStates {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Tape handles for one cell's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BoundCell {
    w_xi: TensorId,
    w_hi: TensorId,
    p_i: Option<TensorId>,
    b_i: TensorId,
    w_xf: TensorId,
    w_hf: TensorId,
    p_f: Option<TensorId>,
    b_f: TensorId,
    w_xc: TensorId,
    w_hc: TensorId,
    b_c: TensorId,
    w_xo: TensorId,
    w_ho: TensorId,
    p_o: Option<TensorId>,
    b_o: TensorId,
    hidden: usize,
    input_dim: usize,
}

impl BoundCell {
    fn bind<F: Scalar>(tape: &mut Tape<F>, params: &LstmCellParams<F>) -> Self {
        let mut load = |t: &Tensor<F>| tape.leaf(t.clone().with_requires_grad());
        BoundCell {
            w_xi: load(&params.w_xi),
            w_hi: load(&params.w_hi),
            p_i: params.p_i.as_ref().map(&mut load),
            b_i: load(&params.b_i),
            w_xf: load(&params.w_xf),
            w_hf: load(&params.w_hf),
            p_f: params.p_f.as_ref().map(&mut load),
            b_f: load(&params.b_f),
            w_xc: load(&params.w_xc),
            w_hc: load(&params.w_hc),
            b_c: load(&params.b_c),
            w_xo: load(&params.w_xo),
            w_ho: load(&params.w_ho),
            p_o: params.p_o.as_ref().map(&mut load),
            b_o: load(&params.b_o),
            hidden: params.hidden(),
            input_dim: params.input_dim(),
        }
    }

    /// `(name, handle)` pairs in the same order as `LstmCellParams::named`.
    fn named(&self, prefix: &str, out: &mut Vec<(String, TensorId)>) {
        let mut push = |name: &str, id: TensorId| out.push((format!("{prefix}.{name}"), id));
        push("W_xi", self.w_xi);
        push("W_hi", self.w_hi);
        if let Some(p) = self.p_i {
            push("w_ci", p);
        }
        push("b_i", self.b_i);
        push("W_xf", self.w_xf);
        push("W_hf", self.w_hf);
        if let Some(p) = self.p_f {
            push("w_cf", p);
        }
        push("b_f", self.b_f);
        push("W_xc", self.w_xc);
        push("W_hc", self.w_hc);
        push("b_c", self.b_c);
        push("W_xo", self.w_xo);
        push("W_ho", self.w_ho);
        if let Some(p) = self.p_o {
            push("w_co", p);
        }
        push("b_o", self.b_o);
    }

    pub fn zero_state<F: Scalar>(&self, tape: &mut Tape<F>) -> LstmState {
        let h = tape.constant(Tensor::zeros(vec![self.hidden]));
        let c = tape.constant(Tensor::zeros(vec![self.hidden]));
        LstmState { h, c }
    }

    /// One LSTM step:
    /// ```text
    /// i  = sigmoid(W_xi x + W_hi h + w_ci*c + b_i)
    /// f  = sigmoid(W_xf x + W_hf h + w_cf*c + b_f)
    /// c' = f*c + i*tanh(W_xc x + W_hc h + b_c)
    /// o  = sigmoid(W_xo x + W_ho h + w_co*c' + b_o)
    /// h' = o*tanh(c')
    /// ```
    /// where `*` is elementwise and the peephole terms are present only when
    /// the cell was built with them.
    pub fn step<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        prev: &LstmState,
        input: TensorId,
    ) -> Result<LstmState> {
        if tape.shape(input) != [self.input_dim] {
            return Err(Error::Shape {
                op: "lstm_cell_step",
                lhs: vec![self.input_dim],
                rhs: tape.shape(input).to_vec(),
            });
        }
        let gate = |tape: &mut Tape<F>,
                    w_x: TensorId,
                    w_h: TensorId,
                    peep: Option<(TensorId, TensorId)>,
                    b: TensorId|
         -> Result<TensorId> {
            let xa = tape.matmul(w_x, input)?;
            let ha = tape.matmul(w_h, prev.h)?;
            let mut pre = tape.add(xa, ha)?;
            if let Some((p, c)) = peep {
                let pc = tape.mul(p, c)?;
                pre = tape.add(pre, pc)?;
            }
            tape.add(pre, b)
        };

        let i_pre = gate(tape, self.w_xi, self.w_hi, self.p_i.map(|p| (p, prev.c)), self.b_i)?;
        let i = tape.sigmoid(i_pre);
        let f_pre = gate(tape, self.w_xf, self.w_hf, self.p_f.map(|p| (p, prev.c)), self.b_f)?;
        let f = tape.sigmoid(f_pre);
        let cand_pre = gate(tape, self.w_xc, self.w_hc, None, self.b_c)?;
        let cand = tape.tanh(cand_pre);

        let keep = tape.mul(f, prev.c)?;
        let write = tape.mul(i, cand)?;
        let c_new = tape.add(keep, write)?;

        let o_pre = gate(tape, self.w_xo, self.w_ho, self.p_o.map(|p| (p, c_new)), self.b_o)?;
        let o = tape.sigmoid(o_pre);
        let c_act = tape.tanh(c_new);
        let h_new = tape.mul(o, c_act)?;
        Ok(LstmState { h: h_new, c: c_new })
    }
}

/// The model's parameters loaded onto a tape, ready to build a forward pass.
pub struct BoundModel {
    pub embedding: TensorId,
    pub label_embedding: TensorId,
    pub enc_fwd: BoundCell,
    pub enc_bwd: BoundCell,
    pub dec: BoundCell,
    pub attn_w_s: TensorId,
    pub attn_w_h: TensorId,
    pub attn_b: TensorId,
    pub attn_v: TensorId,
    pub w_out: TensorId,
    pub b_out: TensorId,
    pub config: ModelConfig,
    vocab_size: usize,
    tag_count: usize,
    named: Vec<(String, TensorId)>,
}

impl BoundModel {
    /// Loads every parameter onto the tape as a gradient-tracked leaf.
    pub fn bind<F: Scalar>(tape: &mut Tape<F>, params: &ModelParams<F>) -> Self {
        let embedding = tape.leaf(params.embedding.clone().with_requires_grad());
        let label_embedding = tape.leaf(params.label_embedding.clone().with_requires_grad());
        let enc_fwd = BoundCell::bind(tape, &params.enc_fwd);
        let enc_bwd = BoundCell::bind(tape, &params.enc_bwd);
        let dec = BoundCell::bind(tape, &params.dec);
        let attn_w_s = tape.leaf(params.attention.w_s.clone().with_requires_grad());
        let attn_w_h = tape.leaf(params.attention.w_h.clone().with_requires_grad());
        let attn_b = tape.leaf(params.attention.b.clone().with_requires_grad());
        let attn_v = tape.leaf(params.attention.v.clone().with_requires_grad());
        let w_out = tape.leaf(params.w_out.clone().with_requires_grad());
        let b_out = tape.leaf(params.b_out.clone().with_requires_grad());

        let mut named = Vec::new();
        named.push(("embed.words".to_string(), embedding));
        named.push(("embed.labels".to_string(), label_embedding));
        enc_fwd.named("enc.fwd", &mut named);
        enc_bwd.named("enc.bwd", &mut named);
        dec.named("dec", &mut named);
        named.push(("attn.W_s".to_string(), attn_w_s));
        named.push(("attn.W_h".to_string(), attn_w_h));
        named.push(("attn.b".to_string(), attn_b));
        named.push(("attn.v".to_string(), attn_v));
        named.push(("out.W".to_string(), w_out));
        named.push(("out.b".to_string(), b_out));

        BoundModel {
            embedding,
            label_embedding,
            enc_fwd,
            enc_bwd,
            dec,
            attn_w_s,
            attn_w_h,
            attn_b,
            attn_v,
            w_out,
            b_out,
            config: params.config,
            vocab_size: params.vocab_size(),
            tag_count: params.tag_count(),
            named,
        }
    }

    pub fn tag_count(&self) -> usize {
        self.tag_count
    }

    /// `(name, handle)` pairs in canonical parameter order.
    pub fn named_handles(&self) -> &[(String, TensorId)] {
        &self.named
    }

    /// Runs the bidirectional encoder over a sentence of token ids.
    /// `embed_masks`, when given, is one dropout mask per position applied
    /// to the word embedding before it enters either direction's cell.
    pub fn encode<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        token_ids: &[usize],
        embed_masks: Option<&[Vec<F>]>,
    ) -> Result<EncoderStates> {
        let t_len = token_ids.len();
        if t_len == 0 {
            return Err(Error::contract("encode: empty sentence"));
        }
        if let Some(bad) = token_ids.iter().find(|&&id| id >= self.vocab_size) {
            return Err(Error::contract(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.vocab_size
            )));
        }
        if let Some(masks) = embed_masks {
            if masks.len() != t_len {
                return Err(Error::contract(format!(
                    "embedding masks ({}) must match sentence length ({t_len})",
                    masks.len()
                )));
            }
        }

        let mut inputs = Vec::with_capacity(t_len);
        for (i, &id) in token_ids.iter().enumerate() {
            let mut x = tape.row(self.embedding, id)?;
            if let Some(masks) = embed_masks {
                let mask = tape.constant(Tensor::new(
                    vec![self.config.embed_dim],
                    masks[i].clone(),
                )?);
                x = tape.mul(x, mask)?;
            }
            inputs.push(x);
        }

        let mut forward = Vec::with_capacity(t_len);
        let mut state = self.enc_fwd.zero_state(tape);
        for &x in &inputs {
            state = self.enc_fwd.step(tape, &state, x)?;
            forward.push(state.h);
        }

        let mut backward = vec![None; t_len];
        let mut state = self.enc_bwd.zero_state(tape);
        for i in (0..t_len).rev() {
            state = self.enc_bwd.step(tape, &state, inputs[i])?;
            backward[i] = Some(state.h);
        }

        let mut states = Vec::with_capacity(t_len);
        for i in 0..t_len {
            let h = tape.concat(backward[i].unwrap(), forward[i])?;
            states.push(h);
        }
        let stacked = tape.concat_n(&states)?;
        let matrix = tape.reshape(stacked, vec![t_len, self.config.encoder_state_dim()])?;
        Ok(EncoderStates {
            first_backward: backward[0].unwrap(),
            states,
            matrix,
        })
    }

    /// Attention context for one decoder step: scores every encoder state
    /// against the previous decoder hidden state, normalizes with softmax,
    /// and returns the weighted sum along with the weights.
    pub fn attention_context<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        s_prev_h: TensorId,
        enc: &EncoderStates,
    ) -> Result<(TensorId, TensorId)> {
        let s_proj = tape.matmul(self.attn_w_s, s_prev_h)?;
        let mut scores = Vec::with_capacity(enc.len());
        for &h in &enc.states {
            let h_proj = tape.matmul(self.attn_w_h, h)?;
            let sum = tape.add(s_proj, h_proj)?;
            let pre = tape.add(sum, self.attn_b)?;
            let z = tape.tanh(pre);
            scores.push(tape.matmul(self.attn_v, z)?);
        }
        let score_vec = tape.concat_n(&scores)?;
        let alpha = tape.softmax(score_vec)?;
        let context = self.weighted_context(tape, alpha, enc)?;
        Ok((context, alpha))
    }

    /// The weighted-sum half of the attention path: `c = alpha . H`.
    /// Exposed separately so a caller can force the weights (a one-hot
    /// alpha here reproduces the focus context exactly).
    pub fn weighted_context<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        alpha: TensorId,
        enc: &EncoderStates,
    ) -> Result<TensorId> {
        tape.matmul(alpha, enc.matrix)
    }

    /// Focus context for decoder step `t` (1-based): the aligned encoder
    /// state, i.e. attention with a one-hot weight at position `t`.
    pub fn focus_context(&self, enc: &EncoderStates, t: usize) -> Result<TensorId> {
        if t == 0 || t > enc.len() {
            return Err(Error::contract(format!(
                "focus step {t} out of range 1..={} (focus cannot emit more labels than words)",
                enc.len()
            )));
        }
        Ok(enc.states[t - 1])
    }

    /// Decoder start state: hidden is the first backward encoder state
    /// zero-padded to the decoder width, cell memory is zero.
    pub fn init_decoder_state<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        enc: &EncoderStates,
    ) -> Result<LstmState> {
        let pad = self.config.decoder_hidden - self.config.hidden;
        let h = if pad == 0 {
            enc.first_backward
        } else {
            let zeros = tape.constant(Tensor::zeros(vec![pad]));
            tape.concat(enc.first_backward, zeros)?
        };
        let c = tape.constant(Tensor::zeros(vec![self.config.decoder_hidden]));
        Ok(LstmState { h, c })
    }

    /// One decoder step. The step input is the previous label's embedding
    /// concatenated with the context vector; the emitted distribution is the
    /// softmax of the output layer over the new hidden state.
    ///
    /// `masked_tag` suppresses one tag (the begin-of-sequence label during
    /// decoding) by pushing its logit far below the rest, which zeroes its
    /// probability. `hidden_mask` is the output-side dropout mask; it only
    /// affects the distribution, never the recurrent state.
    pub fn decoder_step<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        prev: &LstmState,
        y_prev: usize,
        context: TensorId,
        masked_tag: Option<usize>,
        hidden_mask: Option<&[F]>,
    ) -> Result<(LstmState, TensorId)> {
        if y_prev >= self.tag_count {
            return Err(Error::contract(format!(
                "tag id {y_prev} out of range for {} labels",
                self.tag_count
            )));
        }
        let label = tape.row(self.label_embedding, y_prev)?;
        let input = tape.concat(label, context)?;
        let state = self.dec.step(tape, prev, input)?;

        let mut h_out = state.h;
        if let Some(mask) = hidden_mask {
            let mask = tape.constant(Tensor::new(vec![mask.len()], mask.to_vec())?);
            h_out = tape.mul(h_out, mask)?;
        }
        let proj = tape.matmul(self.w_out, h_out)?;
        let mut logits = tape.add(proj, self.b_out)?;
        if let Some(tag) = masked_tag {
            if tag >= self.tag_count {
                return Err(Error::contract(format!(
                    "masked tag id {tag} out of range for {} labels",
                    self.tag_count
                )));
            }
            let mut mask = vec![F::zero(); self.tag_count];
            mask[tag] = F::from_f(-1.0e30);
            let mask = tape.constant(Tensor::new(vec![self.tag_count], mask)?);
            logits = tape.add(logits, mask)?;
        }
        let dist = tape.softmax(logits)?;
        Ok((state, dist))
    }

    /// The context vector for step `t` (1-based) under the given mechanism.
    /// Attention derives it from the previous decoder hidden state; focus
    /// picks the aligned encoder state.
    pub fn context<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        mechanism: ContextMechanism,
        prev: &LstmState,
        enc: &EncoderStates,
        t: usize,
    ) -> Result<TensorId> {
        match mechanism {
            ContextMechanism::Attention => {
                Ok(self.attention_context(tape, prev.h, enc)?.0)
            }
            ContextMechanism::Focus => self.focus_context(enc, t),
        }
    }
}

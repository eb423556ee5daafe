//! Pre-norm Transformer encoder-decoder with one embedding matrix shared by
//! the encoder input, the decoder input and the output projection.

use ndarray::s;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::SequenceBatch;
use super::graph::{AttentionLayout, Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, keyed_rng, tag};
use crate::subword::{BOS_ID, PAD_ID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Encoder layers; the decoder has the same number.
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub vocab_size: usize,
    pub max_positions: usize,
}

impl ModelConfig {
    /// 2+2 layers, width 64, 4 heads, FFN 128.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            layers: 2,
            model_dim: 64,
            heads: 4,
            ffn_dim: 128,
            dropout: 0.1,
            label_smoothing: 0.1,
            vocab_size,
            max_positions: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must be in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if self.vocab_size <= crate::subword::RESERVED.len() || self.max_positions < 2 {
            return Err(Error::Config(
                "vocabulary or position table too small".into(),
            ));
        }
        if self.layers == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("layers and ffn_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Named trainable tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Mat>,
}

impl ModelParams {
    pub fn new(names: Vec<String>, tensors: Vec<Mat>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::Checkpoint("name/tensor count mismatch".into()));
        }
        Ok(Self { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Mat] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Mat] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Same names and shapes.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.dim() == b.dim())
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Embedding,
    Xavier,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Debug, Clone, Copy)]
struct Ffn {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    self_norm: Norm,
    self_attn: Attn,
    ffn_norm: Norm,
    ffn: Ffn,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    self_norm: Norm,
    self_attn: Attn,
    cross_norm: Norm,
    cross_attn: Attn,
    ffn_norm: Norm,
    ffn: Ffn,
}

struct Alloc {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    inits: Vec<Init>,
}

impl Alloc {
    fn add(&mut self, name: String, shape: (usize, usize), init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gain: self.add(format!("{prefix}.gain"), (1, d), Init::Ones),
            bias: self.add(format!("{prefix}.bias"), (1, d), Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> Attn {
        let mut lin = |n: &str| {
            (
                self.add(format!("{prefix}.{n}.weight"), (d, d), Init::Xavier),
                self.add(format!("{prefix}.{n}.bias"), (1, d), Init::Zeros),
            )
        };
        let (wq, bq) = lin("q");
        let (wk, bk) = lin("k");
        let (wv, bv) = lin("v");
        let (wo, bo) = lin("out");
        Attn {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> Ffn {
        Ffn {
            w1: self.add(format!("{prefix}.fc1.weight"), (d, f), Init::Xavier),
            b1: self.add(format!("{prefix}.fc1.bias"), (1, f), Init::Zeros),
            w2: self.add(format!("{prefix}.fc2.weight"), (f, d), Init::Xavier),
            b2: self.add(format!("{prefix}.fc2.bias"), (1, d), Init::Zeros),
        }
    }
}

/// Encoder states for one source sentence, reused across decoding steps.
#[derive(Debug, Clone)]
pub struct EncodedSource {
    pub memory: Mat,
    pub len: usize,
}

/// The network definition: parameter layout plus forward computation.
pub struct Transformer {
    config: ModelConfig,
    embed: usize,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Norm,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Norm,
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    inits: Vec<Init>,
    positions: Mat,
}

fn sinusoids(max_positions: usize, d: usize) -> Mat {
    let half = d / 2;
    Mat::from_shape_fn((max_positions, d), |(pos, i)| {
        let k = i % half.max(1);
        let freq = (-(10_000f64.ln()) * k as f64 / half.max(1) as f64).exp();
        let angle = pos as f64 * freq;
        if i < half {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

struct Params<'p> {
    vars: &'p [Var],
}

impl Params<'_> {
    fn get(&self, i: usize) -> Var {
        self.vars[i]
    }
}

impl Transformer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let mut a = Alloc {
            names: Vec::new(),
            shapes: Vec::new(),
            inits: Vec::new(),
        };
        let embed = a.add("embed".into(), (config.vocab_size, d), Init::Embedding);
        let encoder = (0..config.layers)
            .map(|l| EncoderLayer {
                self_norm: a.norm(&format!("encoder.{l}.self_attn_norm"), d),
                self_attn: a.attn(&format!("encoder.{l}.self_attn"), d),
                ffn_norm: a.norm(&format!("encoder.{l}.ffn_norm"), d),
                ffn: a.ffn(&format!("encoder.{l}"), d, config.ffn_dim),
            })
            .collect();
        let encoder_norm = a.norm("encoder.norm", d);
        let decoder = (0..config.layers)
            .map(|l| DecoderLayer {
                self_norm: a.norm(&format!("decoder.{l}.self_attn_norm"), d),
                self_attn: a.attn(&format!("decoder.{l}.self_attn"), d),
                cross_norm: a.norm(&format!("decoder.{l}.cross_attn_norm"), d),
                cross_attn: a.attn(&format!("decoder.{l}.cross_attn"), d),
                ffn_norm: a.norm(&format!("decoder.{l}.ffn_norm"), d),
                ffn: a.ffn(&format!("decoder.{l}"), d, config.ffn_dim),
            })
            .collect();
        let decoder_norm = a.norm("decoder.norm", d);
        let positions = sinusoids(config.max_positions, d);
        Ok(Self {
            config,
            embed,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            names: a.names,
            shapes: a.shapes,
            inits: a.inits,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    /// Fresh parameters; each tensor draws from its own stream of `seed`.
    pub fn init_params(&self, seed: u64) -> ModelParams {
        let base = derive_seed(seed, tag::MODEL_INIT);
        let d = self.config.model_dim as f64;
        let tensors = self
            .shapes
            .iter()
            .zip(&self.inits)
            .enumerate()
            .map(|(i, (&(r, c), init))| {
                let mut rng = keyed_rng(base, i as u64);
                let mut uniform = |bound: f64| {
                    Mat::from_shape_simple_fn((r, c), || (rng.random::<f64>() * 2.0 - 1.0) * bound)
                };
                match init {
                    // Unit variance after the sqrt(d) input scaling.
                    Init::Embedding => uniform((3.0 / d).sqrt()),
                    Init::Xavier => uniform((6.0 / (r + c) as f64).sqrt()),
                    Init::Zeros => Mat::zeros((r, c)),
                    Init::Ones => Mat::ones((r, c)),
                }
            })
            .collect();
        ModelParams {
            names: self.names.clone(),
            tensors,
        }
    }

    /// Checks that `params` matches this network's layout.
    pub fn check_params(&self, params: &ModelParams) -> Result<()> {
        let ok = params.names == self.names
            && params
                .tensors
                .iter()
                .zip(&self.shapes)
                .all(|(t, &s)| t.dim() == s);
        if ok {
            Ok(())
        } else {
            Err(Error::Checkpoint(
                "parameters do not match model layout".into(),
            ))
        }
    }

    fn bind<'a>(&self, g: &mut Graph<'a>, params: &'a ModelParams) -> Vec<Var> {
        params
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| g.param(i, t))
            .collect()
    }

    fn embed_tokens(&self, g: &mut Graph<'_>, p: &Params, ids: &[u32], seq_len: usize) -> Var {
        let d = self.config.model_dim;
        let x = g.gather(p.get(self.embed), ids);
        let x = g.scale(x, (d as f64).sqrt());
        let rows = ids.len();
        let mut pos = Mat::zeros((rows, d));
        for r in 0..rows {
            pos.row_mut(r).assign(&self.positions.row(r % seq_len));
        }
        let pos = g.constant(pos);
        let x = g.add(x, pos);
        g.dropout(x, self.config.dropout)
    }

    fn norm(&self, g: &mut Graph<'_>, p: &Params, x: Var, n: Norm) -> Var {
        g.layer_norm(x, p.get(n.gain), p.get(n.bias))
    }

    fn attend(
        &self,
        g: &mut Graph<'_>,
        p: &Params,
        query: Var,
        memory: Var,
        a: Attn,
        layout: AttentionLayout,
    ) -> Var {
        let q = g.linear(query, p.get(a.wq), p.get(a.bq));
        let k = g.linear(memory, p.get(a.wk), p.get(a.bk));
        let v = g.linear(memory, p.get(a.wv), p.get(a.bv));
        let ctx = g.attention(q, k, v, layout);
        g.linear(ctx, p.get(a.wo), p.get(a.bo))
    }

    fn feed_forward(&self, g: &mut Graph<'_>, p: &Params, x: Var, f: Ffn) -> Var {
        let h = g.linear(x, p.get(f.w1), p.get(f.b1));
        let h = g.gelu(h);
        let h = g.dropout(h, self.config.dropout);
        g.linear(h, p.get(f.w2), p.get(f.b2))
    }

    fn residual(&self, g: &mut Graph<'_>, x: Var, branch: Var) -> Var {
        let b = g.dropout(branch, self.config.dropout);
        g.add(x, b)
    }

    fn encode_graph(
        &self,
        g: &mut Graph<'_>,
        p: &Params,
        ids: &[u32],
        batch: usize,
        len: usize,
        lengths: &[usize],
    ) -> Var {
        let mut x = self.embed_tokens(g, p, ids, len);
        for layer in &self.encoder {
            let h = self.norm(g, p, x, layer.self_norm);
            let layout = AttentionLayout {
                batch,
                q_len: len,
                k_len: len,
                heads: self.config.heads,
                key_lengths: lengths.to_vec(),
                causal: false,
            };
            let a = self.attend(g, p, h, h, layer.self_attn, layout);
            x = self.residual(g, x, a);
            let h = self.norm(g, p, x, layer.ffn_norm);
            let f = self.feed_forward(g, p, h, layer.ffn);
            x = self.residual(g, x, f);
        }
        self.norm(g, p, x, self.encoder_norm)
    }

    #[allow(clippy::too_many_arguments)]
    fn decode_graph(
        &self,
        g: &mut Graph<'_>,
        p: &Params,
        memory: Var,
        src_len: usize,
        src_lengths: &[usize],
        dec_in: &[u32],
        batch: usize,
        tgt_len: usize,
        tgt_lengths: &[usize],
    ) -> Var {
        let mut y = self.embed_tokens(g, p, dec_in, tgt_len);
        for layer in &self.decoder {
            let h = self.norm(g, p, y, layer.self_norm);
            let layout = AttentionLayout {
                batch,
                q_len: tgt_len,
                k_len: tgt_len,
                heads: self.config.heads,
                key_lengths: tgt_lengths.to_vec(),
                causal: true,
            };
            let a = self.attend(g, p, h, h, layer.self_attn, layout);
            y = self.residual(g, y, a);
            let h = self.norm(g, p, y, layer.cross_norm);
            let layout = AttentionLayout {
                batch,
                q_len: tgt_len,
                k_len: src_len,
                heads: self.config.heads,
                key_lengths: src_lengths.to_vec(),
                causal: false,
            };
            let a = self.attend(g, p, h, memory, layer.cross_attn, layout);
            y = self.residual(g, y, a);
            let h = self.norm(g, p, y, layer.ffn_norm);
            let f = self.feed_forward(g, p, h, layer.ffn);
            y = self.residual(g, y, f);
        }
        let out = self.norm(g, p, y, self.decoder_norm);
        g.matmul_t(out, p.get(self.embed))
    }

    fn batch_logits<'a>(
        &self,
        g: &mut Graph<'a>,
        params: &'a ModelParams,
        batch: &SequenceBatch,
    ) -> Result<Var> {
        batch.validate(self.config.vocab_size)?;
        if batch.src_len > self.config.max_positions || batch.tgt_len > self.config.max_positions {
            return Err(Error::Input("sequence longer than max_positions".into()));
        }
        let vars = self.bind(g, params);
        let p = Params { vars: &vars };
        let memory = self.encode_graph(
            g,
            &p,
            &batch.src_ids,
            batch.batch,
            batch.src_len,
            &batch.src_lengths,
        );
        Ok(self.decode_graph(
            g,
            &p,
            memory,
            batch.src_len,
            &batch.src_lengths,
            &batch.dec_in,
            batch.batch,
            batch.tgt_len,
            &batch.tgt_lengths,
        ))
    }

    /// Teacher-forced logits, `(batch × tgt_len) × vocab`, without dropout.
    pub fn logits(&self, params: &ModelParams, batch: &SequenceBatch) -> Result<Mat> {
        let mut g = Graph::new();
        let l = self.batch_logits(&mut g, params, batch)?;
        Ok(g.value(l).clone())
    }

    /// Label-smoothed token-mean loss and the number of target tokens.
    /// `dropout` enables dropout with the given mask stream.
    pub fn forward_loss(
        &self,
        params: &ModelParams,
        batch: &SequenceBatch,
        dropout: Option<ChaCha8Rng>,
    ) -> Result<(f64, usize)> {
        let mut g = dropout.map_or_else(Graph::new, Graph::with_dropout);
        let logits = self.batch_logits(&mut g, params, batch)?;
        let (loss, count) =
            g.cross_entropy(logits, &batch.dec_out, PAD_ID, self.config.label_smoothing);
        Ok((g.value(loss)[[0, 0]], count))
    }

    /// Loss, token count, and the gradient of every parameter.
    pub fn loss_and_grads(
        &self,
        params: &ModelParams,
        batch: &SequenceBatch,
        dropout: Option<ChaCha8Rng>,
    ) -> Result<(f64, usize, Vec<Mat>)> {
        let mut g = dropout.map_or_else(Graph::new, Graph::with_dropout);
        let logits = self.batch_logits(&mut g, params, batch)?;
        let (loss, count) =
            g.cross_entropy(logits, &batch.dec_out, PAD_ID, self.config.label_smoothing);
        let grads = g
            .backward(loss, params.len())
            .into_iter()
            .zip(&params.tensors)
            .map(|(gr, t)| gr.unwrap_or_else(|| Mat::zeros(t.raw_dim())))
            .collect();
        Ok((g.value(loss)[[0, 0]], count, grads))
    }

    /// Runs the encoder on one source sequence (an `</s>` is appended).
    pub fn encode(&self, params: &ModelParams, source: &[u32]) -> Result<EncodedSource> {
        let max = self.config.max_positions - 1;
        let mut ids: Vec<u32> = source.iter().copied().take(max).collect();
        ids.push(crate::subword::EOS_ID);
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::Input(format!("token id {bad} out of range")));
        }
        let len = ids.len();
        let mut g = Graph::new();
        let vars = self.bind(&mut g, params);
        let p = Params { vars: &vars };
        let m = self.encode_graph(&mut g, &p, &ids, 1, len, &[len]);
        Ok(EncodedSource {
            memory: g.value(m).clone(),
            len,
        })
    }

    /// Next-token log-probabilities after each prefix (all prefixes the same
    /// length, `<s>` implied).
    pub fn next_log_probs(
        &self,
        params: &ModelParams,
        source: &EncodedSource,
        prefixes: &[Vec<u32>],
    ) -> Result<Vec<Vec<f64>>> {
        let batch = prefixes.len();
        if batch == 0 {
            return Ok(Vec::new());
        }
        let tgt_len = prefixes[0].len() + 1;
        if prefixes.iter().any(|p| p.len() + 1 != tgt_len) {
            return Err(Error::Input("prefixes must share one length".into()));
        }
        if tgt_len > self.config.max_positions {
            return Err(Error::Input("prefix longer than max_positions".into()));
        }
        let mut dec_in = Vec::with_capacity(batch * tgt_len);
        for p in prefixes {
            dec_in.push(BOS_ID);
            dec_in.extend_from_slice(p);
        }
        let d = self.config.model_dim;
        let mut memory = Mat::zeros((batch * source.len, d));
        for b in 0..batch {
            memory
                .slice_mut(s![b * source.len..(b + 1) * source.len, ..])
                .assign(&source.memory);
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g, params);
        let p = Params { vars: &vars };
        let mem = g.constant(memory);
        let logits = self.decode_graph(
            &mut g,
            &p,
            mem,
            source.len,
            &vec![source.len; batch],
            &dec_in,
            batch,
            tgt_len,
            &vec![tgt_len; batch],
        );
        let lv = g.value(logits);
        Ok((0..batch)
            .map(|b| {
                let row = lv.row(b * tgt_len + tgt_len - 1);
                let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                row.iter().map(|x| x - lse).collect()
            })
            .collect())
    }
}

//! A small pre-norm causal transformer over plan tokens.
//!
//! Training evaluates a static graph per sequence; inference replays the
//! same arithmetic one position at a time with cached keys and values so
//! decoding costs one position per token.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{Array, Bindings, Gradients, GraphBuilder, NodeId, NumericsError, ParameterSet};

use super::vocab::Token;
use super::RefinerError;

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_hidden: usize,
    pub window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: super::Vocab::new().len(),
            d_model: 64,
            heads: 4,
            blocks: 2,
            ffn_hidden: 128,
            window: 256,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("blocks", self.blocks),
            ("ffn_hidden", self.ffn_hidden),
            ("window", self.window),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(format!("{name} must be positive"));
        }
        if self.d_model % self.heads != 0 {
            return Err(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        Ok(())
    }

    /// Every parameter name with its shape.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, f, dh) = (self.vocab_size, self.d_model, self.ffn_hidden, self.head_dim());
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![self.window, d]),
        ];
        for l in 0..self.blocks {
            out.push((format!("b{l}.ln1.g"), vec![d]));
            out.push((format!("b{l}.ln1.b"), vec![d]));
            for h in 0..self.heads {
                for w in ["wq", "wk", "wv"] {
                    out.push((format!("b{l}.h{h}.{w}"), vec![d, dh]));
                }
                out.push((format!("b{l}.h{h}.wo"), vec![dh, d]));
            }
            out.push((format!("b{l}.ln2.g"), vec![d]));
            out.push((format!("b{l}.ln2.b"), vec![d]));
            out.push((format!("b{l}.ffn.w1"), vec![d, f]));
            out.push((format!("b{l}.ffn.b1"), vec![f]));
            out.push((format!("b{l}.ffn.w2"), vec![f, d]));
            out.push((format!("b{l}.ffn.b2"), vec![d]));
        }
        out.push(("lnf.g".to_string(), vec![d]));
        out.push(("lnf.b".to_string(), vec![d]));
        out.push(("head.w".to_string(), vec![d, v]));
        out.push(("head.b".to_string(), vec![v]));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    config: ModelConfig,
    params: ParameterSet,
}

fn sinusoid(window: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; window * d];
    for p in 0..window {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            out[p * d + 2 * i] = (p as f64 * freq).sin();
            out[p * d + 2 * i + 1] = (p as f64 * freq).cos();
        }
    }
    out
}

impl Transformer {
    /// Random initialization: fan-in scaled linear maps, residual outputs
    /// shrunk by `1/sqrt(2·blocks)`, positions started from sinusoids.
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self, RefinerError> {
        config.validate().map_err(RefinerError::Config)?;
        let mut params = ParameterSet::new();
        let residual = 1.0 / (2.0 * config.blocks as f64).sqrt();
        for (name, shape) in config.parameter_shapes() {
            let fan_in = shape[0] as f64;
            let leaf = name.rsplit('.').next().unwrap_or(&name);
            match leaf {
                "g" => params.insert_constant(&name, &shape, 1.0)?,
                "b" | "b1" | "b2" => params.insert_constant(&name, &shape, 0.0)?,
                "tok_emb" => params.insert_normal(&name, &shape, 0.1, rng)?,
                "pos_emb" => {
                    let data = sinusoid(config.window, config.d_model)
                        .into_iter()
                        .map(|x| 0.1 * x)
                        .collect();
                    params.insert(&name, Array::new(shape, data)?)?
                }
                "wo" | "w2" => params.insert_normal(&name, &shape, residual / fan_in.sqrt(), rng)?,
                _ => params.insert_normal(&name, &shape, 1.0 / fan_in.sqrt(), rng)?,
            }
        }
        Ok(Transformer { config, params })
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParameterSet) -> Result<Self, RefinerError> {
        config.validate().map_err(RefinerError::Config)?;
        let expected = config.parameter_shapes();
        if expected.len() != params.len() {
            return Err(RefinerError::Config(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in expected {
            match params.get(&name) {
                Some(a) if a.shape() == shape.as_slice() => {}
                Some(a) => {
                    return Err(RefinerError::Config(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        a.shape()
                    )))
                }
                None => return Err(RefinerError::Config(format!("missing parameter `{name}`"))),
            }
        }
        Ok(Transformer { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn into_params(self) -> ParameterSet {
        self.params
    }

    fn p(&self, name: &str) -> &[f64] {
        self.params.get(name).expect("shape-checked parameter").data()
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<(), RefinerError> {
        if tokens.is_empty() {
            return Err(RefinerError::EmptySequence);
        }
        if tokens.len() > self.config.window {
            return Err(RefinerError::SequenceTooLong {
                len: tokens.len(),
                window: self.config.window,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(RefinerError::UnknownToken(t));
        }
        Ok(())
    }

    /// Builds the graph for `tokens` and returns the logits node for the
    /// requested positions, shape `[rows.len(), vocab]`.
    fn build(&self, b: &mut GraphBuilder, tokens: &[Token], rows: &[usize]) -> Result<NodeId, NumericsError> {
        let c = &self.config;
        let (t, d, dh) = (tokens.len(), c.d_model, c.head_dim());
        let tok = b.input("tok_emb", &[c.vocab_size, d])?;
        let pos = b.input("pos_emb", &[c.window, d])?;
        let te = b.embedding(tok, tokens)?;
        let positions: Vec<usize> = (0..t).collect();
        let pe = b.embedding(pos, &positions)?;
        let mut x = b.add(te, pe)?;

        let mut mask = vec![0.0; t * t];
        for i in 0..t {
            for j in i + 1..t {
                mask[i * t + j] = MASKED;
            }
        }
        let mask = b.constant_shared(Arc::new(Array::new(vec![t, t], mask)?));
        let inv_sqrt = 1.0 / (dh as f64).sqrt();

        let affine_norm = |b: &mut GraphBuilder, x: NodeId, prefix: &str| -> Result<NodeId, NumericsError> {
            let g = b.input(&format!("{prefix}.g"), &[d])?;
            let bias = b.input(&format!("{prefix}.b"), &[d])?;
            let n = b.layer_norm(x)?;
            let n = b.mul(n, g)?;
            b.add(n, bias)
        };

        for l in 0..c.blocks {
            let h = affine_norm(b, x, &format!("b{l}.ln1"))?;
            let mut attn: Option<NodeId> = None;
            for head in 0..c.heads {
                let w = |b: &mut GraphBuilder, which: &str, shape: &[usize]| {
                    b.input(&format!("b{l}.h{head}.{which}"), shape)
                };
                let wq = w(b, "wq", &[d, dh])?;
                let wk = w(b, "wk", &[d, dh])?;
                let wv = w(b, "wv", &[d, dh])?;
                let wo = w(b, "wo", &[dh, d])?;
                let q = b.matmul(h, wq)?;
                let k = b.matmul(h, wk)?;
                let v = b.matmul(h, wv)?;
                let scores = b.matmul_t(q, k)?;
                let scores = b.scale(scores, inv_sqrt)?;
                let scores = b.add(scores, mask)?;
                let weights = b.softmax(scores)?;
                let mixed = b.matmul(weights, v)?;
                let out = b.matmul(mixed, wo)?;
                attn = Some(match attn {
                    None => out,
                    Some(acc) => b.add(acc, out)?,
                });
            }
            x = b.add(x, attn.expect("at least one head"))?;
            let h = affine_norm(b, x, &format!("b{l}.ln2"))?;
            let w1 = b.input(&format!("b{l}.ffn.w1"), &[d, c.ffn_hidden])?;
            let b1 = b.input(&format!("b{l}.ffn.b1"), &[c.ffn_hidden])?;
            let w2 = b.input(&format!("b{l}.ffn.w2"), &[c.ffn_hidden, d])?;
            let b2 = b.input(&format!("b{l}.ffn.b2"), &[d])?;
            let f = b.matmul(h, w1)?;
            let f = b.add(f, b1)?;
            let f = b.tanh(f);
            let f = b.matmul(f, w2)?;
            let f = b.add(f, b2)?;
            x = b.add(x, f)?;
        }
        // Row selection commutes with the row-wise final norm.
        let picked = b.embedding(x, rows)?;
        let h = affine_norm(b, picked, "lnf")?;
        let w = b.input("head.w", &[d, c.vocab_size])?;
        let bias = b.input("head.b", &[c.vocab_size])?;
        let logits = b.matmul(h, w)?;
        b.add(logits, bias)
    }

    /// Next-token logits at each position in `rows`, via the full graph.
    pub fn logits_at(&self, tokens: &[Token], rows: &[usize]) -> Result<Array, RefinerError> {
        self.check_tokens(tokens)?;
        if let Some(&r) = rows.iter().find(|&&r| r >= tokens.len()) {
            return Err(RefinerError::Config(format!("row {r} outside sequence")));
        }
        let mut b = GraphBuilder::new();
        let logits = self.build(&mut b, tokens, rows)?;
        b.output("logits", logits);
        let graph = b.finish();
        let mut bindings = Bindings::new();
        bindings.bind_params(&self.params);
        let fwd = graph.forward(&bindings)?;
        Ok(fwd.output("logits")?.clone())
    }

    /// Mean teacher-forced cross-entropy of `target` after `prompt`, and its
    /// gradient for every parameter.
    pub fn loss_and_grad(&self, prompt: &[Token], target: &[Token]) -> Result<(f64, Gradients), RefinerError> {
        let (graph, _) = self.loss_graph(prompt, target)?;
        let mut bindings = Bindings::new();
        bindings.bind_params(&self.params);
        let fwd = graph.forward(&bindings)?;
        let loss = fwd.output("loss")?.item();
        let names: Vec<&str> = self.params.names().collect();
        let grads = fwd.vjp("loss", &Array::scalar(1.0), &names)?;
        Ok((loss, grads))
    }

    /// Loss only; valid with differentiation disabled.
    pub fn loss(&self, prompt: &[Token], target: &[Token]) -> Result<f64, RefinerError> {
        let (graph, _) = self.loss_graph(prompt, target)?;
        let mut bindings = Bindings::new();
        bindings.bind_params(&self.params);
        let fwd = graph.forward(&bindings)?;
        Ok(fwd.output("loss")?.item())
    }

    fn loss_graph(&self, prompt: &[Token], target: &[Token]) -> Result<(crate::numerics::Graph, usize), RefinerError> {
        if prompt.is_empty() || target.is_empty() {
            return Err(RefinerError::EmptySequence);
        }
        let total = prompt.len() + target.len() - 1;
        if total > self.config.window {
            return Err(RefinerError::SequenceTooLong {
                len: total,
                window: self.config.window,
            });
        }
        let mut tokens = prompt.to_vec();
        tokens.extend_from_slice(&target[..target.len() - 1]);
        self.check_tokens(&tokens)?;
        if let Some(&t) = target.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(RefinerError::UnknownToken(t));
        }
        let rows: Vec<usize> = (prompt.len() - 1..tokens.len()).collect();
        let labels: Vec<Option<usize>> = target.iter().map(|&t| Some(t)).collect();
        let mut b = GraphBuilder::new();
        let logits = self.build(&mut b, &tokens, &rows)?;
        let loss = b.cross_entropy(logits, &labels)?;
        b.output("loss", loss);
        Ok((b.finish(), rows.len()))
    }

    /// Starts an incremental decoding session.
    pub fn session(&self) -> Session<'_> {
        let c = &self.config;
        Session {
            model: self,
            keys: vec![vec![Vec::new(); c.heads]; c.blocks],
            values: vec![vec![Vec::new(); c.heads]; c.blocks],
            len: 0,
            hidden: Vec::new(),
        }
    }
}

/// Cached keys and values for the positions fed so far.
pub struct Session<'a> {
    model: &'a Transformer,
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
    len: usize,
    /// Final-normed state of the last position.
    hidden: Vec<f64>,
}

fn affine_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(v, (gi, bi))| (v - mean) * inv * gi + bi)
        .collect()
}

/// `x · w` for a row vector `x` and row-major `w` of shape `[x.len(), n]`.
fn vecmat(x: &[f64], w: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * n..(i + 1) * n];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
    out
}

impl Session<'_> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Logits for the token after the last one fed.
    pub fn logits(&self) -> Vec<f64> {
        let m = self.model;
        let mut logits = vecmat(&self.hidden, m.p("head.w"), m.config.vocab_size);
        for (li, bi) in logits.iter_mut().zip(m.p("head.b")) {
            *li += bi;
        }
        logits
    }

    /// Feeds one token and updates the next-token logits.
    pub fn push(&mut self, token: Token) -> Result<(), RefinerError> {
        let m = self.model;
        let c = &m.config;
        if self.len >= c.window {
            return Err(RefinerError::SequenceTooLong {
                len: self.len + 1,
                window: c.window,
            });
        }
        if token >= c.vocab_size {
            return Err(RefinerError::UnknownToken(token));
        }
        let (d, dh, t) = (c.d_model, c.head_dim(), self.len);
        let mut x: Vec<f64> = m.p("tok_emb")[token * d..(token + 1) * d]
            .iter()
            .zip(&m.p("pos_emb")[t * d..(t + 1) * d])
            .map(|(a, b)| a + b)
            .collect();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for l in 0..c.blocks {
            let h = affine_norm(&x, m.p(&format!("b{l}.ln1.g")), m.p(&format!("b{l}.ln1.b")));
            let mut attn = vec![0.0; d];
            for head in 0..c.heads {
                let name = |w: &str| format!("b{l}.h{head}.{w}");
                let q = vecmat(&h, m.p(&name("wq")), dh);
                let k = vecmat(&h, m.p(&name("wk")), dh);
                let v = vecmat(&h, m.p(&name("wv")), dh);
                let keys = &mut self.keys[l][head];
                let values = &mut self.values[l][head];
                keys.extend_from_slice(&k);
                values.extend_from_slice(&v);
                let scores: Vec<f64> = keys
                    .chunks(dh)
                    .map(|kj| q.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt)
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                let mut mixed = vec![0.0; dh];
                for (e, vj) in exps.iter().zip(values.chunks(dh)) {
                    let a = e / z;
                    for (mi, vi) in mixed.iter_mut().zip(vj) {
                        *mi += a * vi;
                    }
                }
                for (a, o) in attn.iter_mut().zip(vecmat(&mixed, m.p(&name("wo")), d)) {
                    *a += o;
                }
            }
            for (xi, a) in x.iter_mut().zip(&attn) {
                *xi += a;
            }
            let h = affine_norm(&x, m.p(&format!("b{l}.ln2.g")), m.p(&format!("b{l}.ln2.b")));
            let mut f = vecmat(&h, m.p(&format!("b{l}.ffn.w1")), c.ffn_hidden);
            for (fi, bi) in f.iter_mut().zip(m.p(&format!("b{l}.ffn.b1"))) {
                *fi = (*fi + bi).tanh();
            }
            let out = vecmat(&f, m.p(&format!("b{l}.ffn.w2")), d);
            for ((xi, o), bi) in x.iter_mut().zip(&out).zip(m.p(&format!("b{l}.ffn.b2"))) {
                *xi += o + bi;
            }
        }
        self.hidden = affine_norm(&x, m.p("lnf.g"), m.p("lnf.b"));
        self.len += 1;
        Ok(())
    }
}

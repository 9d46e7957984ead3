//! Tiny decoder-only transformer used as the frozen language model.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::container::{Container, KvLines};
use crate::error::{Error, Result};
use crate::ndtensor::{Float, Graph, Tensor, Var};
use crate::optim::{AdamW, AdamWConfig};
use crate::seeds;

pub const SPECIALS: [&str; 7] = ["<pad>", "<bos>", "<eos>", "<sep>", ";", ":", "|"];
pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
/// Separates the input segment from the target segment.
pub const ANSWER: usize = 6;

const MASK_NEG: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Tokenizer {
    /// Specials first, then `content` in the order given.
    pub fn new(content: &[String]) -> Result<Self> {
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(content.iter().cloned())
            .collect();
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::contract(format!("invalid vocabulary token {t:?}")));
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::contract(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Tokenizer { tokens, ids })
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Content tokens, i.e. everything after the specials.
    pub fn content(&self) -> &[String] {
        &self.tokens[SPECIALS.len()..]
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| Error::contract(format!("unknown token {token:?}")))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&i| {
                self.tokens
                    .get(i)
                    .map(String::as_str)
                    .ok_or_else(|| Error::contract(format!("token id {i} outside vocabulary")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    /// `input |` and `target <eos>`. No `<bos>`: prompt rows take the prefix slot.
    pub fn encode_example(&self, input: &str, target: &str) -> Result<Example> {
        let mut input_ids = self.encode(input)?;
        input_ids.push(ANSWER);
        let mut target_ids = self.encode(target)?;
        target_ids.push(EOS);
        Ok(Example {
            input_ids,
            target_ids,
        })
    }

    /// Decodes generated ids up to the first `<eos>`.
    pub fn decode_generated(&self, ids: &[usize]) -> Result<String> {
        let end = ids.iter().position(|&i| i == EOS).unwrap_or(ids.len());
        self.decode(&ids[..end])
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub input_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
}

impl Example {
    pub fn len(&self) -> usize {
        self.input_ids.len() + self.target_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub tie_output: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            vocab_size: 64 + SPECIALS.len(),
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            max_seq_len: 160,
            tie_output: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.d_ff == 0
        {
            return Err(Error::contract("backbone dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::contract(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len == 0 {
            return Err(Error::contract("max_seq_len must be positive"));
        }
        Ok(())
    }

    fn to_kv(&self, kv: &mut KvLines) {
        kv.push("vocab_size", self.vocab_size);
        kv.push("d_model", self.d_model);
        kv.push("n_layers", self.n_layers);
        kv.push("n_heads", self.n_heads);
        kv.push("d_ff", self.d_ff);
        kv.push("max_seq_len", self.max_seq_len);
        kv.push("tie_output", self.tie_output);
    }

    fn from_kv(kv: &KvLines) -> Result<Self> {
        let c = BackboneConfig {
            vocab_size: kv.parse("vocab_size")?,
            d_model: kv.parse("d_model")?,
            n_layers: kv.parse("n_layers")?,
            n_heads: kv.parse("n_heads")?,
            d_ff: kv.parse("d_ff")?,
            max_seq_len: kv.parse("max_seq_len")?,
            tie_output: kv.parse("tie_output")?,
        };
        c.validate().map_err(|e| Error::format(e.to_string()))?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<E: Float> {
    pub ln1_gain: Tensor<E>,
    pub ln1_bias: Tensor<E>,
    pub wq: Tensor<E>,
    pub wk: Tensor<E>,
    pub wv: Tensor<E>,
    pub wo: Tensor<E>,
    pub ln2_gain: Tensor<E>,
    pub ln2_bias: Tensor<E>,
    pub w1: Tensor<E>,
    pub b1: Tensor<E>,
    pub w2: Tensor<E>,
    pub b2: Tensor<E>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights<E: Float> {
    pub tok_emb: Tensor<E>,
    pub layers: Vec<LayerWeights<E>>,
    pub lnf_gain: Tensor<E>,
    pub lnf_bias: Tensor<E>,
    /// Absent when the output projection is tied to `tok_emb`.
    pub w_out: Option<Tensor<E>>,
}

const LAYER_NAMES: [&str; 12] = [
    "ln1.gain", "ln1.bias", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ln2.gain", "ln2.bias",
    "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
];

impl<E: Float> LayerWeights<E> {
    fn refs(&self) -> [&Tensor<E>; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn refs_mut(&mut self) -> [&mut Tensor<E>; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

impl<E: Float> BackboneWeights<E> {
    /// Freshly initialized weights: N(0,1) embeddings, N(0, 1/sqrt(fan_in))
    /// projections with residual outputs further scaled by 1/sqrt(2·layers).
    pub fn init(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeds::rng(seeds::mix_str(seed, "backbone-init"));
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
        let resid = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let sd = 1.0 / (d as f64).sqrt();
        let sf = 1.0 / (f as f64).sqrt();
        let tok_emb = Tensor::randn(&[v, d], 0.0, 1.0, &mut rng)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                ln1_gain: Tensor::ones(&[d])?,
                ln1_bias: Tensor::zeros(&[d])?,
                wq: Tensor::randn(&[d, d], 0.0, sd, &mut rng)?,
                wk: Tensor::randn(&[d, d], 0.0, sd, &mut rng)?,
                wv: Tensor::randn(&[d, d], 0.0, sd, &mut rng)?,
                wo: Tensor::randn(&[d, d], 0.0, sd * resid, &mut rng)?,
                ln2_gain: Tensor::ones(&[d])?,
                ln2_bias: Tensor::zeros(&[d])?,
                w1: Tensor::randn(&[d, f], 0.0, sd, &mut rng)?,
                b1: Tensor::zeros(&[f])?,
                w2: Tensor::randn(&[f, d], 0.0, sf * resid, &mut rng)?,
                b2: Tensor::zeros(&[d])?,
            });
        }
        let w_out = if config.tie_output {
            None
        } else {
            Some(Tensor::randn(&[d, v], 0.0, sd, &mut rng)?)
        };
        Ok(BackboneWeights {
            tok_emb,
            layers,
            lnf_gain: Tensor::ones(&[d])?,
            lnf_bias: Tensor::zeros(&[d])?,
            w_out,
        })
    }

    /// Tensors in canonical serialization order.
    pub fn named(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb)];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_NAMES.iter().zip(l.refs()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("lnf.gain".into(), &self.lnf_gain));
        out.push(("lnf.bias".into(), &self.lnf_bias));
        if let Some(w) = &self.w_out {
            out.push(("w_out".into(), w));
        }
        out
    }

    /// Same order as [`named`](Self::named).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<E>> {
        let mut out = vec![&mut self.tok_emb];
        for l in &mut self.layers {
            out.extend(l.refs_mut());
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        if let Some(w) = &mut self.w_out {
            out.push(w);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<F: Float>(&self) -> BackboneWeights<F> {
        let layer = |l: &LayerWeights<E>| LayerWeights {
            ln1_gain: l.ln1_gain.cast(),
            ln1_bias: l.ln1_bias.cast(),
            wq: l.wq.cast(),
            wk: l.wk.cast(),
            wv: l.wv.cast(),
            wo: l.wo.cast(),
            ln2_gain: l.ln2_gain.cast(),
            ln2_bias: l.ln2_bias.cast(),
            w1: l.w1.cast(),
            b1: l.b1.cast(),
            w2: l.w2.cast(),
            b2: l.b2.cast(),
        };
        BackboneWeights {
            tok_emb: self.tok_emb.cast(),
            layers: self.layers.iter().map(layer).collect(),
            lnf_gain: self.lnf_gain.cast(),
            lnf_bias: self.lnf_bias.cast(),
            w_out: self.w_out.as_ref().map(Tensor::cast),
        }
    }
}

/// Low-rank additive updates on the query and value projections:
/// `W + scale · B·A` with `B: d×r`, `A: r×d`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayer<E: Float> {
    pub q_b: Tensor<E>,
    pub q_a: Tensor<E>,
    pub v_b: Tensor<E>,
    pub v_a: Tensor<E>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraWeights<E: Float> {
    pub layers: Vec<LoraLayer<E>>,
    pub scale: f64,
}

impl<E: Float> LoraWeights<E> {
    pub fn tensors(&self) -> Vec<&Tensor<E>> {
        self.layers
            .iter()
            .flat_map(|l| [&l.q_b, &l.q_a, &l.v_b, &l.v_a])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<E>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.q_b, &mut l.q_a, &mut l.v_b, &mut l.v_a])
            .collect()
    }

    pub fn bind(&self, g: &mut Graph<E>) -> BoundLora {
        BoundLora {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    [
                        g.leaf(&l.q_b),
                        g.leaf(&l.q_a),
                        g.leaf(&l.v_b),
                        g.leaf(&l.v_a),
                    ]
                })
                .collect(),
            scale: self.scale,
        }
    }
}

pub struct BoundLora {
    /// Per layer: `[q_b, q_a, v_b, v_a]`.
    pub layers: Vec<[Var; 4]>,
    pub scale: f64,
}

impl BoundLora {
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flatten().copied().collect()
    }
}

struct BoundLayer {
    w: [Var; 12],
}

/// Backbone weights recorded on a graph.
pub struct BoundBackbone {
    tok_emb: Var,
    layers: Vec<BoundLayer>,
    lnf_gain: Var,
    lnf_bias: Var,
    w_out: Option<Var>,
}

impl BoundBackbone {
    /// Same order as [`BackboneWeights::tensors_mut`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb];
        for l in &self.layers {
            out.extend(l.w);
        }
        out.push(self.lnf_gain);
        out.push(self.lnf_bias);
        out.extend(self.w_out);
        out
    }
}

/// Output of a teacher-forced pass over `prompt ++ input ++ target`.
pub struct Scored {
    /// `(L+n) × vocab` pre-softmax logits.
    pub logits: Var,
    /// `(L+n) × d` final-layer hidden states.
    pub hidden: Var,
    /// Next-token id for each row; only meaningful where `loss_mask` is set.
    pub next_ids: Vec<usize>,
    /// Exactly `target_ids.len()` rows are set.
    pub loss_mask: Vec<bool>,
    pub prompt_len: usize,
}

impl Scored {
    /// Rows holding tokens rather than prompt vectors.
    pub fn token_mask(&self) -> Vec<bool> {
        (0..self.loss_mask.len())
            .map(|i| i >= self.prompt_len)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneCheckpoint<E: Float = f32> {
    pub config: BackboneConfig,
    pub tokenizer: Tokenizer,
    pub weights: BackboneWeights<E>,
    pub frozen: bool,
    positions: Vec<E>,
}

pub fn sinusoidal_positions<E: Float>(max_len: usize, d: usize) -> Vec<E> {
    let mut out = vec![E::zero(); max_len * d];
    for pos in 0..max_len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            out[pos * d + i] = E::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    out
}

impl<E: Float> BackboneCheckpoint<E> {
    pub fn new(
        config: BackboneConfig,
        tokenizer: Tokenizer,
        weights: BackboneWeights<E>,
    ) -> Result<Self> {
        config.validate()?;
        if tokenizer.vocab_size() != config.vocab_size {
            return Err(Error::contract(format!(
                "tokenizer has {} tokens, config expects {}",
                tokenizer.vocab_size(),
                config.vocab_size
            )));
        }
        let positions = sinusoidal_positions(config.max_seq_len, config.d_model);
        Ok(BackboneCheckpoint {
            config,
            tokenizer,
            weights,
            frozen: false,
            positions,
        })
    }

    pub fn random(config: BackboneConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        let weights = BackboneWeights::init(&config, seed)?;
        Self::new(config, tokenizer, weights)
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        for t in self.weights.tensors_mut() {
            t.set_requires_grad(false);
        }
    }

    pub fn cast<F: Float>(&self) -> BackboneCheckpoint<F> {
        BackboneCheckpoint {
            config: self.config.clone(),
            tokenizer: self.tokenizer.clone(),
            weights: self.weights.cast(),
            frozen: self.frozen,
            positions: sinusoidal_positions(self.config.max_seq_len, self.config.d_model),
        }
    }

    pub fn to_container(&self) -> Container {
        let mut kv = KvLines::default();
        kv.push("kind", "backbone");
        kv.push("dtype", if E::DTYPE_CODE == 8 { "f64" } else { "f32" });
        self.config.to_kv(&mut kv);
        kv.push("frozen", self.frozen);
        kv.push("vocab", self.tokenizer.content().join(" "));
        let mut c = Container::new(kv);
        for (name, t) in self.weights.named() {
            c.add(&name, t);
        }
        c
    }

    /// FNV-1a over the serialized parameters.
    pub fn content_hash(&self) -> u64 {
        self.to_container().content_hash()
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.config.require("kind")? != "backbone" {
            return Err(Error::format("container is not a backbone checkpoint"));
        }
        let config = BackboneConfig::from_kv(&c.config)?;
        let vocab: Vec<String> = c
            .config
            .require("vocab")?
            .split(' ')
            .map(String::from)
            .collect();
        let tokenizer = Tokenizer::new(&vocab)?;
        let mut weights = BackboneWeights::<E>::init(&config, 0)?;
        let names: Vec<String> = weights.named().into_iter().map(|(n, _)| n).collect();
        if names.len() != c.tensors.len() {
            return Err(Error::format(format!(
                "expected {} tensors, found {}",
                names.len(),
                c.tensors.len()
            )));
        }
        for (name, slot) in names.iter().zip(weights.tensors_mut()) {
            let t: Tensor<E> = c.tensor(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        let mut ck = Self::new(config, tokenizer, weights)?;
        if c.config.parse::<bool>("frozen")? {
            ck.freeze();
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    /// Records the weights on `g`. With `trainable` false they enter as
    /// constants regardless of their own grad flags.
    pub fn bind(&self, g: &mut Graph<E>, trainable: bool) -> BoundBackbone {
        let mut put = |t: &Tensor<E>| {
            if trainable {
                g.leaf(t)
            } else {
                g.constant(t.shape(), t.data().to_vec())
                    .expect("weight shape invariant")
            }
        };
        let w = &self.weights;
        let tok_emb = put(&w.tok_emb);
        let layers = w
            .layers
            .iter()
            .map(|l| BoundLayer {
                w: l.refs().map(&mut put),
            })
            .collect();
        let lnf_gain = put(&w.lnf_gain);
        let lnf_bias = put(&w.lnf_bias);
        let w_out = w.w_out.as_ref().map(&mut put);
        BoundBackbone {
            tok_emb,
            layers,
            lnf_gain,
            lnf_bias,
            w_out,
        }
    }

    /// Rebuilds a binding from vars in [`BoundBackbone::vars`] order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundBackbone> {
        let n = self.weights.named().len();
        if vars.len() != n {
            return Err(Error::contract(format!(
                "expected {n} weight vars, got {}",
                vars.len()
            )));
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("length checked");
        let tok_emb = next();
        let layers = (0..self.config.n_layers)
            .map(|_| BoundLayer {
                w: std::array::from_fn(|_| next()),
            })
            .collect();
        let lnf_gain = next();
        let lnf_bias = next();
        let w_out = self.weights.w_out.as_ref().map(|_| next());
        Ok(BoundBackbone {
            tok_emb,
            layers,
            lnf_gain,
            lnf_bias,
            w_out,
        })
    }

    /// Runs the stack over `prompt` rows followed by the embeddings of `tokens`.
    /// Returns `(logits, hidden)`.
    pub fn forward(
        &self,
        g: &mut Graph<E>,
        b: &BoundBackbone,
        prompt: Option<Var>,
        tokens: &[usize],
        lora: Option<&BoundLora>,
    ) -> Result<(Var, Var)> {
        let d = self.config.d_model;
        let l = match prompt {
            Some(p) => {
                let s = g.shape(p);
                if s.len() != 2 || s[1] != d {
                    return Err(Error::Dimension {
                        op: "forward_with_prompt",
                        lhs: s.to_vec(),
                        rhs: vec![0, d],
                    });
                }
                s[0]
            }
            None => 0,
        };
        let n = l + tokens.len();
        if n > self.config.max_seq_len {
            return Err(Error::Length {
                len: n,
                max: self.config.max_seq_len,
            });
        }
        if n == 0 {
            return Err(Error::contract("forward over an empty sequence"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::contract(format!(
                "token id {bad} outside vocabulary"
            )));
        }
        if let Some(lo) = lora {
            if lo.layers.len() != self.config.n_layers {
                return Err(Error::contract("LoRA layer count does not match backbone"));
            }
        }

        let mut parts = Vec::with_capacity(2);
        if let Some(p) = prompt {
            parts.push(p);
        }
        if !tokens.is_empty() {
            parts.push(g.gather_rows(b.tok_emb, tokens)?);
        }
        let x0 = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat_rows(&parts)?
        };
        let pos = g.constant(&[n, d], self.positions[..n * d].to_vec())?;
        let mut x = g.add(x0, pos)?;

        let mut mask = vec![E::zero(); n * n];
        for i in 0..n {
            for j in i + 1..n {
                mask[i * n + j] = E::from_f64(MASK_NEG);
            }
        }
        let mask = g.constant(&[n, n], mask)?;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let inv_sqrt = E::from_f64(1.0 / (dh as f64).sqrt());

        for (li, layer) in b.layers.iter().enumerate() {
            let [ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2] = layer.w;
            let h = g.layer_norm(x, ln1_g, ln1_b)?;
            let mut q = g.matmul(h, wq)?;
            let k = g.matmul(h, wk)?;
            let mut v = g.matmul(h, wv)?;
            if let Some(lo) = lora {
                let [q_b, q_a, v_b, v_a] = lo.layers[li];
                let s = E::from_f64(lo.scale);
                let hq = g.matmul(h, q_b)?;
                let dq = g.matmul(hq, q_a)?;
                let dq = g.scale(dq, s);
                q = g.add(q, dq)?;
                let hv = g.matmul(h, v_b)?;
                let dv = g.matmul(hv, v_a)?;
                let dv = g.scale(dv, s);
                v = g.add(v, dv)?;
            }
            let mut outs = Vec::with_capacity(heads);
            for hi in 0..heads {
                let (qh, kh, vh) = if heads == 1 {
                    (q, k, v)
                } else {
                    (
                        g.slice_cols(q, hi * dh, dh)?,
                        g.slice_cols(k, hi * dh, dh)?,
                        g.slice_cols(v, hi * dh, dh)?,
                    )
                };
                let s = g.matmul_nt(qh, kh)?;
                let s = g.scale(s, inv_sqrt);
                let s = g.add(s, mask)?;
                let p = g.softmax_rows(s)?;
                outs.push(g.matmul(p, vh)?);
            }
            let o = if heads == 1 {
                outs[0]
            } else {
                g.concat_cols(&outs)?
            };
            let a = g.matmul(o, wo)?;
            x = g.add(x, a)?;
            let h2 = g.layer_norm(x, ln2_g, ln2_b)?;
            let f = g.matmul(h2, w1)?;
            let f = g.add_row(f, b1)?;
            let f = g.gelu(f);
            let f = g.matmul(f, w2)?;
            let f = g.add_row(f, b2)?;
            x = g.add(x, f)?;
        }
        let hidden = g.layer_norm(x, b.lnf_gain, b.lnf_bias)?;
        let logits = match b.w_out {
            Some(w) => g.matmul(hidden, w)?,
            None => g.matmul_nt(hidden, b.tok_emb)?,
        };
        Ok((logits, hidden))
    }

    /// Teacher-forced pass over `prompt ++ input_ids ++ target_ids`.
    pub fn forward_with_prompt(
        &self,
        g: &mut Graph<E>,
        b: &BoundBackbone,
        prompt: Option<Var>,
        input_ids: &[usize],
        target_ids: &[usize],
        lora: Option<&BoundLora>,
    ) -> Result<Scored> {
        if input_ids.is_empty() {
            return Err(Error::contract(
                "forward_with_prompt needs at least one input token",
            ));
        }
        let tokens: Vec<usize> = input_ids.iter().chain(target_ids).copied().collect();
        let (logits, hidden) = self.forward(g, b, prompt, &tokens, lora)?;
        let rows = g.shape(logits)[0];
        let l = rows - tokens.len();
        let mut next_ids = vec![PAD; rows];
        let mut loss_mask = vec![false; rows];
        for (j, &t) in target_ids.iter().enumerate() {
            let row = l + input_ids.len() - 1 + j;
            next_ids[row] = t;
            loss_mask[row] = true;
        }
        Ok(Scored {
            logits,
            hidden,
            next_ids,
            loss_mask,
            prompt_len: l,
        })
    }

    /// Argmax decoding (lowest id on ties) until `<eos>`, `max_new` tokens,
    /// or the sequence limit. The returned ids include the `<eos>` if produced.
    pub fn generate_greedy(
        &self,
        prompt: Option<&Tensor<E>>,
        lora: Option<&LoraWeights<E>>,
        input_ids: &[usize],
        max_new: usize,
    ) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        if max_new == 0 {
            return Ok(out);
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let p = prompt
            .map(|t| g.constant(t.shape(), t.data().to_vec()))
            .transpose()?;
        let lo = lora.map(|w| w.bind(&mut g));
        let l = prompt.map_or(0, |t| t.rows());
        let mark = g.len();
        let mut seq = input_ids.to_vec();
        while out.len() < max_new {
            if l + seq.len() > self.config.max_seq_len && !out.is_empty() {
                break;
            }
            let (logits, _) = self.forward(&mut g, &b, p, &seq, lo.as_ref())?;
            let v = self.config.vocab_size;
            let vals = g.value(logits);
            let last = &vals[vals.len() - v..];
            let next = crate::ndtensor::kernels::argmax(last);
            g.truncate(mark);
            out.push(next);
            if next == EOS {
                break;
            }
            seq.push(next);
        }
        Ok(out)
    }

    /// Mean next-token NLL, exponentiated, over `<bos> line <eos>` streams.
    pub fn perplexity(&self, streams: &[Vec<usize>]) -> Result<f64> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let mark = g.len();
        let (mut total, mut count) = (0.0, 0usize);
        for s in streams {
            if s.len() < 2 {
                continue;
            }
            let (logits, _) = self.forward(&mut g, &b, None, s, None)?;
            let mut targets = s[1..].to_vec();
            targets.push(PAD);
            let mut mask = vec![true; s.len()];
            mask[s.len() - 1] = false;
            let ce = g.cross_entropy(logits, &targets, &mask)?;
            total += g.scalar(ce).as_f64() * (s.len() - 1) as f64;
            count += s.len() - 1;
            g.truncate(mark);
        }
        if count == 0 {
            return Err(Error::contract("perplexity over an empty corpus"));
        }
        Ok((total / count as f64).exp())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 3,
            lr: 1e-3,
            batch_size: 16,
            seed: 7,
        }
    }
}

/// Encodes each corpus line as `<bos> line <eos>`.
pub fn encode_stream(tokenizer: &Tokenizer, lines: &[String]) -> Result<Vec<Vec<usize>>> {
    lines
        .iter()
        .map(|line| {
            let mut ids = vec![BOS];
            ids.extend(tokenizer.encode(line)?);
            ids.push(EOS);
            Ok(ids)
        })
        .collect()
}

/// Next-token pretraining followed by freezing. Returns the checkpoint and
/// the mean training loss of every epoch.
pub fn pretrain_backbone(
    streams: &[Vec<usize>],
    config: BackboneConfig,
    tokenizer: Tokenizer,
    pcfg: &PretrainConfig,
) -> Result<(BackboneCheckpoint, Vec<f64>)> {
    if pcfg.batch_size == 0 {
        return Err(Error::contract("batch_size must be positive"));
    }
    if streams.len() < pcfg.batch_size {
        return Err(Error::contract(format!(
            "pretraining corpus has {} sequences, fewer than one batch of {}",
            streams.len(),
            pcfg.batch_size
        )));
    }
    if let Some(s) = streams.iter().find(|s| s.len() < 2) {
        return Err(Error::contract(format!(
            "pretraining sequence too short: {s:?}"
        )));
    }
    let mut ck = BackboneCheckpoint::<f32>::random(config, tokenizer, pcfg.seed)?;
    for t in ck.weights.tensors_mut() {
        t.set_requires_grad(true);
    }
    let mut opt = {
        let named = ck.weights.named();
        let refs: Vec<&Tensor<f32>> = named.iter().map(|(_, t)| *t).collect();
        AdamW::new(AdamWConfig::with_lr(pcfg.lr), &refs)
    };
    let mut rng = seeds::rng(seeds::mix_str(pcfg.seed, "pretrain-order"));
    let mut order: Vec<usize> = (0..streams.len()).collect();
    let mut epoch_losses = Vec::with_capacity(pcfg.epochs);
    let mut g = Graph::<f32>::new();
    for _ in 0..pcfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0, 0usize);
        for batch in order.chunks(pcfg.batch_size) {
            if batch.len() < pcfg.batch_size {
                break;
            }
            g.reset();
            let b = ck.bind(&mut g, true);
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = &streams[i];
                let (logits, _) = ck.forward(&mut g, &b, None, s, None)?;
                let mut targets = s[1..].to_vec();
                targets.push(PAD);
                let mut mask = vec![true; s.len()];
                mask[s.len() - 1] = false;
                losses.push(g.cross_entropy(logits, &targets, &mask)?);
            }
            let total = g.add_all(&losses)?;
            let loss = g.scale(total, 1.0 / batch.len() as f32);
            let value = g.scalar(loss) as f64;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("pretraining loss became {value}")));
            }
            let grads = g.backward(loss)?;
            let vars = b.vars();
            let mut params = ck.weights.tensors_mut();
            for (v, t) in vars.iter().zip(params.iter_mut()) {
                grads.absorb_into(*v, t)?;
            }
            opt.step(&mut params)?;
            sum += value;
            batches += 1;
        }
        epoch_losses.push(sum / batches as f64);
    }
    ck.freeze();
    Ok((ck, epoch_losses))
}


#[cfg(test)]
mod pretrain_tests {
    use super::*;
    use crate::taskforge::{generate_world, WorldSpec};

    #[test]
    fn pretraining_lowers_held_out_perplexity() {
        let world = generate_world(&WorldSpec::default()).unwrap();
        let tok = Tokenizer::new(world.vocabulary()).unwrap();
        let all = encode_stream(&tok, &world.pretrain_corpus).unwrap();
        let (streams, held) = all.split_at(all.len() - 100);
        let cfg = BackboneConfig {
            vocab_size: tok.vocab_size(),
            ..BackboneConfig::default()
        };
        let t0 = std::time::Instant::now();
        let random = BackboneCheckpoint::<f32>::random(cfg.clone(), tok.clone(), 7).unwrap();
        let before = random.perplexity(held).unwrap();
        let (ck, losses) =
            pretrain_backbone(streams, cfg, tok, &PretrainConfig::default()).unwrap();
        let after = ck.perplexity(held).unwrap();
        eprintln!(
            "ppl {before:.2} -> {after:.2}, losses {losses:?}, {:?}",
            t0.elapsed()
        );
        assert!(after < before);
        assert!(ck.frozen);
    }
}

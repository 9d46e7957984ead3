//! Comparison methods run under the same protocol as MPT: vanilla prompt
//! tuning, LoRA on the query and value projections, and full fine-tuning.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::adapter::{AdaptConfig, Binding, MptTunable, Tunable};
use crate::backbone::{BackboneCheckpoint, LoraLayer, LoraWeights};
use crate::container::{Container, KvLines, PromptFile, CONTAINER_MAGIC};
use crate::corpus::TaskData;
use crate::distillery::Distilled;
use crate::error::{Error, Result};
use crate::ndtensor::{Graph, Tensor};
use crate::promptkit::{
    init_prompt_from_vocab, CompressedPrompt, PromptArtifact, SharedMetaPrompt, TargetAdapter,
};
use crate::seeds;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    FullFt,
    Lora,
    Pt,
    Mpt,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::FullFt, Method::Lora, Method::Pt, Method::Mpt];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::FullFt => "fullft",
            Method::Lora => "lora",
            Method::Pt => "pt",
            Method::Mpt => "mpt",
        }
    }

    /// Row label in reports.
    pub fn display_name(self) -> &'static str {
        match self {
            Method::FullFt => "Full FT",
            Method::Lora => "LoRA",
            Method::Pt => "PT",
            Method::Mpt => "MPT",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::contract(format!(
                    "unknown method {s:?} (expected fullft, lora, pt or mpt)"
                ))
            })
    }
}

/// Parses a comma-separated method list, keeping the given order.
pub fn parse_methods(s: &str) -> Result<Vec<Method>> {
    let out = s
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<Result<Vec<Method>>>()?;
    if out.is_empty() {
        return Err(Error::contract("empty method list"));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineConfig {
    pub prompt_len: usize,
    pub lora_rank: usize,
    pub lora_init_std: f64,
    pub lora_lr: f64,
    pub fullft_lr: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            prompt_len: 8,
            lora_rank: 2,
            lora_init_std: 0.02,
            lora_lr: 0.01,
            fullft_lr: 1e-4,
        }
    }
}

/// Vanilla prompt tuning: a free `L×d` prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct PtTunable {
    pub prompt: Tensor,
}

impl PtTunable {
    /// Vocabulary-sampled initialization, seeded per target task.
    pub fn init(ck: &BackboneCheckpoint, task: &str, prompt_len: usize, seed: u64) -> Result<Self> {
        let prompt =
            init_prompt_from_vocab(ck, prompt_len, seeds::mix_str(seed, &format!("pt-{task}")))?;
        Ok(PtTunable {
            prompt: prompt.with_requires_grad(true),
        })
    }
}

impl Tunable for PtTunable {
    fn method(&self) -> Method {
        Method::Pt
    }

    fn trainable(&self) -> Vec<&Tensor> {
        vec![&self.prompt]
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.prompt]
    }

    fn bind(&self, g: &mut Graph, shared: &BackboneCheckpoint) -> Result<Binding> {
        let backbone = shared.bind(g, false);
        let p = g.leaf(&self.prompt);
        Ok(Binding {
            backbone,
            prompt: Some(p),
            lora: None,
            params: vec![p],
        })
    }
}

/// Rank-`r` updates on `W_q` and `W_v` of every layer; `B` starts at zero so
/// the adapted model initially equals the backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraTunable {
    pub weights: LoraWeights<f32>,
    pub lr: f64,
}

impl LoraTunable {
    pub fn init(
        ck: &BackboneCheckpoint,
        task: &str,
        cfg: &BaselineConfig,
        seed: u64,
    ) -> Result<Self> {
        let (d, r) = (ck.config.d_model, cfg.lora_rank);
        if r == 0 || r > d {
            return Err(Error::contract(format!(
                "LoRA rank {r} must lie in 1..={d}"
            )));
        }
        let mut rng = seeds::rng(seeds::mix_str(seed, &format!("lora-{task}")));
        let mut layers = Vec::with_capacity(ck.config.n_layers);
        for _ in 0..ck.config.n_layers {
            let q_b = Tensor::zeros(&[d, r])?.with_requires_grad(true);
            let q_a =
                Tensor::randn(&[r, d], 0.0, cfg.lora_init_std, &mut rng)?.with_requires_grad(true);
            let v_b = Tensor::zeros(&[d, r])?.with_requires_grad(true);
            let v_a =
                Tensor::randn(&[r, d], 0.0, cfg.lora_init_std, &mut rng)?.with_requires_grad(true);
            layers.push(LoraLayer { q_b, q_a, v_b, v_a });
        }
        // alpha = r, so the update scale alpha / r is 1.
        Ok(LoraTunable {
            weights: LoraWeights { layers, scale: 1.0 },
            lr: cfg.lora_lr,
        })
    }
}

impl Tunable for LoraTunable {
    fn method(&self) -> Method {
        Method::Lora
    }

    fn trainable(&self) -> Vec<&Tensor> {
        self.weights.tensors()
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights.tensors_mut()
    }

    fn bind(&self, g: &mut Graph, shared: &BackboneCheckpoint) -> Result<Binding> {
        let backbone = shared.bind(g, false);
        let lora = self.weights.bind(g);
        let params = lora.vars();
        Ok(Binding {
            backbone,
            prompt: None,
            lora: Some(lora),
            params,
        })
    }

    fn lr(&self, _cfg: &AdaptConfig) -> f64 {
        self.lr
    }
}

/// Every backbone weight trains, on a private copy.
#[derive(Clone, Debug, PartialEq)]
pub struct FullFtTunable {
    pub ck: BackboneCheckpoint,
    pub lr: f64,
}

impl FullFtTunable {
    pub fn init(shared: &BackboneCheckpoint, cfg: &BaselineConfig) -> Self {
        let mut ck = shared.clone();
        ck.frozen = false;
        for t in ck.weights.tensors_mut() {
            t.set_requires_grad(true);
        }
        FullFtTunable {
            ck,
            lr: cfg.fullft_lr,
        }
    }
}

impl Tunable for FullFtTunable {
    fn method(&self) -> Method {
        Method::FullFt
    }

    fn trainable(&self) -> Vec<&Tensor> {
        self.ck
            .weights
            .named()
            .into_iter()
            .map(|(_, t)| t)
            .collect()
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        self.ck.weights.tensors_mut()
    }

    fn backbone<'a>(&'a self, _shared: &'a BackboneCheckpoint) -> &'a BackboneCheckpoint {
        &self.ck
    }

    fn bind(&self, g: &mut Graph, _shared: &BackboneCheckpoint) -> Result<Binding> {
        let backbone = self.ck.bind(g, true);
        let params = backbone.vars();
        Ok(Binding {
            backbone,
            prompt: None,
            lora: None,
            params,
        })
    }

    fn lr(&self, _cfg: &AdaptConfig) -> f64 {
        self.lr
    }
}

/// Any of the four methods behind one type.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTunable {
    FullFt(FullFtTunable),
    Lora(LoraTunable),
    Pt(PtTunable),
    Mpt(MptTunable),
}

macro_rules! dispatch {
    ($self:expr, $t:ident => $e:expr) => {
        match $self {
            AnyTunable::FullFt($t) => $e,
            AnyTunable::Lora($t) => $e,
            AnyTunable::Pt($t) => $e,
            AnyTunable::Mpt($t) => $e,
        }
    };
}

impl AnyTunable {
    /// The deterministic starting point of `method` on `task`.
    pub fn initial(
        method: Method,
        shared: &BackboneCheckpoint,
        distilled: &Distilled,
        task: &TaskData,
        bcfg: &BaselineConfig,
        acfg: &AdaptConfig,
    ) -> Result<Self> {
        Ok(match method {
            Method::FullFt => AnyTunable::FullFt(FullFtTunable::init(shared, bcfg)),
            Method::Lora => AnyTunable::Lora(LoraTunable::init(
                shared,
                &task.dataset_id,
                bcfg,
                acfg.seed,
            )?),
            Method::Pt => AnyTunable::Pt(PtTunable::init(
                shared,
                &task.dataset_id,
                bcfg.prompt_len,
                acfg.seed,
            )?),
            Method::Mpt => AnyTunable::Mpt(MptTunable::init(distilled, task, acfg.seed)?),
        })
    }

    /// Writes the trained state: a prompt file for MPT, a container otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let c = match self {
            AnyTunable::Mpt(m) => return m.adapter.save(path),
            AnyTunable::FullFt(f) => {
                let mut c = f.ck.to_container();
                c.config
                    .0
                    .iter_mut()
                    .filter(|(k, _)| k == "kind")
                    .for_each(|(_, v)| *v = "fullft".into());
                c.config.push("lr", f.lr);
                c
            }
            other => {
                let mut kv = KvLines::default();
                kv.push("kind", other.method().as_str());
                if let AnyTunable::Lora(l) = other {
                    kv.push("rank", l.weights.layers.first().map_or(0, |x| x.q_a.rows()));
                    kv.push("scale", l.weights.scale);
                    kv.push("lr", l.lr);
                }
                let mut c = Container::new(kv);
                for (i, t) in other.trainable().into_iter().enumerate() {
                    c.add(&format!("p{i}"), t);
                }
                c
            }
        };
        c.save(path)
    }
}

/// A trained state read back from disk.
pub struct LoadedArtifact {
    pub tunable: AnyTunable,
    /// The method that produced it; a compressed MPT prompt runs as a fixed prompt.
    pub method: Method,
}

/// Reads any artifact written by [`AnyTunable::save`] or a compressed prompt.
/// MPT adapters need the shared meta-prompt they were trained against.
pub fn load_artifact(path: &Path, meta: Option<&SharedMetaPrompt>) -> Result<LoadedArtifact> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::contract(format!("cannot read {}: {e}", path.display())))?;
    if bytes.starts_with(CONTAINER_MAGIC) {
        let mut c = Container::from_bytes(&bytes)?;
        let kind = c.config.require("kind")?.to_string();
        let method: Method = kind
            .parse()
            .map_err(|_| Error::format(format!("unexpected artifact kind {kind:?}")))?;
        let tunable = match method {
            Method::FullFt => {
                c.config
                    .0
                    .iter_mut()
                    .filter(|(k, _)| k == "kind")
                    .for_each(|(_, v)| *v = "backbone".into());
                let mut ck = BackboneCheckpoint::from_container(&c)?;
                ck.frozen = false;
                let lr = c.config.parse("lr")?;
                AnyTunable::FullFt(FullFtTunable { ck, lr })
            }
            Method::Pt => AnyTunable::Pt(PtTunable {
                prompt: c.tensor("p0")?.with_requires_grad(true),
            }),
            Method::Lora => {
                let n = c.tensors.len();
                if n == 0 || n % 4 != 0 {
                    return Err(Error::format(format!("LoRA artifact holds {n} tensors")));
                }
                let t = |i: usize| -> Result<Tensor> {
                    Ok(c.tensor::<f32>(&format!("p{i}"))?.with_requires_grad(true))
                };
                let layers = (0..n / 4)
                    .map(|l| {
                        Ok(LoraLayer {
                            q_b: t(4 * l)?,
                            q_a: t(4 * l + 1)?,
                            v_b: t(4 * l + 2)?,
                            v_a: t(4 * l + 3)?,
                        })
                    })
                    .collect::<Result<_>>()?;
                let weights = LoraWeights {
                    layers,
                    scale: c.config.parse("scale")?,
                };
                AnyTunable::Lora(LoraTunable {
                    weights,
                    lr: c.config.parse("lr")?,
                })
            }
            Method::Mpt => return Err(Error::format("MPT adapters are stored as prompt files")),
        };
        return Ok(LoadedArtifact { tunable, method });
    }
    let f = PromptFile::from_bytes(&bytes)?;
    match f.field("kind")? {
        "adapter" => {
            let meta =
                meta.ok_or_else(|| Error::contract("an MPT adapter needs the shared meta-prompt"))?;
            let adapter = TargetAdapter::from_file(&f)?;
            if adapter.u.numel() != meta.p_star.rows() || adapter.v.numel() != meta.p_star.cols() {
                return Err(Error::contract(
                    "adapter shape does not match the meta-prompt",
                ));
            }
            Ok(LoadedArtifact {
                tunable: AnyTunable::Mpt(MptTunable::new(meta, adapter)),
                method: Method::Mpt,
            })
        }
        "compressed" => {
            let c = CompressedPrompt::from_file(&f)?;
            Ok(LoadedArtifact {
                tunable: AnyTunable::Pt(PtTunable { prompt: c.prompt }),
                method: Method::Mpt,
            })
        }
        other => Err(Error::format(format!("cannot evaluate a {other} file"))),
    }
}

impl Tunable for AnyTunable {
    fn method(&self) -> Method {
        dispatch!(self, t => t.method())
    }

    fn trainable(&self) -> Vec<&Tensor> {
        dispatch!(self, t => t.trainable())
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        dispatch!(self, t => t.trainable_mut())
    }

    fn backbone<'a>(&'a self, shared: &'a BackboneCheckpoint) -> &'a BackboneCheckpoint {
        dispatch!(self, t => t.backbone(shared))
    }

    fn bind(&self, g: &mut Graph, shared: &BackboneCheckpoint) -> Result<Binding> {
        dispatch!(self, t => t.bind(g, shared))
    }

    fn lr(&self, cfg: &AdaptConfig) -> f64 {
        dispatch!(self, t => t.lr(cfg))
    }
}

/// Trainable scalars as a percentage of the backbone's parameters.
pub fn params_pct(trainable: usize, backbone_params: usize) -> f64 {
    100.0 * trainable as f64 / backbone_params as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, Tokenizer};
    use crate::ndtensor::Graph;

    fn tiny() -> BackboneCheckpoint {
        let vocab: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
        let tok = Tokenizer::new(&vocab).unwrap();
        let cfg = BackboneConfig {
            vocab_size: tok.vocab_size(),
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 32,
            tie_output: false,
        };
        let mut ck = BackboneCheckpoint::random(cfg, tok, 3).unwrap();
        ck.freeze();
        ck
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("adapter".parse::<Method>().is_err());
        assert_eq!(
            parse_methods("mpt,pt,lora").unwrap(),
            vec![Method::Mpt, Method::Pt, Method::Lora]
        );
    }

    #[test]
    fn lora_counts_and_rank_limit() {
        let ck = tiny();
        let cfg = BaselineConfig::default();
        let l = LoraTunable::init(&ck, "t", &cfg, 1).unwrap();
        // 2 layers, q and v, B and A each d*r
        assert_eq!(l.trainable_scalars(), 2 * 2 * 2 * 8 * 2);
        let bad = BaselineConfig {
            lora_rank: 9,
            ..cfg
        };
        assert!(LoraTunable::init(&ck, "t", &bad, 1).is_err());
    }

    #[test]
    fn lora_starts_at_the_backbone() {
        let ck = tiny();
        let l = LoraTunable::init(&ck, "t", &BaselineConfig::default(), 1).unwrap();
        let ids = [1, 7, 8, 9, 6];
        let mut g = Graph::new();
        let b = ck.bind(&mut g, false);
        let (plain, _) = ck.forward(&mut g, &b, None, &ids, None).unwrap();
        let bnd = l.bind(&mut g, &ck).unwrap();
        let (adapted, _) = ck
            .forward(&mut g, &bnd.backbone, None, &ids, bnd.lora.as_ref())
            .unwrap();
        assert_eq!(g.value(plain), g.value(adapted));
    }

    #[test]
    fn pt_counts_prompt_scalars() {
        let ck = tiny();
        let p = PtTunable::init(&ck, "t", 4, 1).unwrap();
        assert_eq!(p.trainable_scalars(), 4 * 8);
        let q = PtTunable::init(&ck, "t", 4, 1).unwrap();
        assert!(p.prompt.bits_eq(&q.prompt));
    }

    #[test]
    fn fullft_trains_a_private_copy() {
        let ck = tiny();
        let f = FullFtTunable::init(&ck, &BaselineConfig::default());
        assert_eq!(f.trainable_scalars(), ck.weights.param_count());
        assert!(!ck.weights.tok_emb.requires_grad());
        assert!(f.ck.weights.tok_emb.requires_grad());
        assert!(
            (params_pct(f.trainable_scalars(), ck.weights.param_count()) - 100.0).abs() < 1e-12
        );
    }

    #[test]
    fn artifacts_round_trip() {
        let ck = tiny();
        let dir = tempfile::tempdir().unwrap();
        let cfg = BaselineConfig::default();
        let all = [
            AnyTunable::Pt(PtTunable::init(&ck, "t", 4, 1).unwrap()),
            AnyTunable::Lora(LoraTunable::init(&ck, "t", &cfg, 1).unwrap()),
            AnyTunable::FullFt(FullFtTunable::init(&ck, &cfg)),
        ];
        for a in all {
            let p = dir.path().join(a.method().as_str());
            a.save(&p).unwrap();
            let back = load_artifact(&p, None).unwrap();
            assert_eq!(back.method, a.method());
            assert_eq!(back.tunable.state_bytes(), a.state_bytes());
            assert_eq!(
                back.tunable.lr(&AdaptConfig::default()),
                a.lr(&AdaptConfig::default())
            );
        }
    }
}

//! The full tagger: encoder, local and global consolidation, tag head.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::decoder::{decode_tables, label_tables};
use crate::diffcore::{Graph, Real, Tensor, Var};
use crate::encoder::{build_grid, EncoderConfig};
use crate::error::{Error, Result};
use crate::globalattn::{global_consolidate, GlobalConfig};
use crate::params::{ParamStore, ParamVars};
use crate::pdconv::{local_consolidate, LocalStackConfig};
use crate::tagger::{score_tables, tag_loss, HeadConfig, TagTable};
use crate::tokenize::{TokenSeq, Vocab};
use crate::triple::{RelSchema, Triple};

const CONFIG_FILE: &str = "model.toml";
const VOCAB_FILE: &str = "vocab.txt";
const RELATIONS_FILE: &str = "relations.txt";
const PARAMS_FILE: &str = "params.ckpt";

/// An inspectable intermediate grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// The fused grid `M^so`.
    Fused,
    /// Output of conv block `b` (1-based).
    Block(usize),
    /// Output of the attention module.
    Global,
    /// The grid read by the head.
    Final,
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('_', "");
        match key.as_str() {
            "mso" | "fused" => Ok(Stage::Fused),
            "global" => Ok(Stage::Global),
            "tso" | "final" => Ok(Stage::Final),
            _ => key
                .strip_prefix("block")
                .and_then(|b| b.parse().ok())
                .filter(|&b| b >= 1)
                .map(Stage::Block)
                .ok_or_else(|| Error::config(format!("unknown stage {s:?}, expected mso, block<k>, global or tso"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Fused => f.write_str("mso"),
            Stage::Block(b) => write!(f, "block{b}"),
            Stage::Global => f.write_str("global"),
            Stage::Final => f.write_str("tso"),
        }
    }
}

/// Graph handles for one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub fused: Var,
    pub blocks: Vec<Var>,
    pub global: Option<Var>,
    pub last: Var,
    pub logits: Var,
}

impl Forward {
    pub fn stage(&self, stage: Stage) -> Result<Var> {
        match stage {
            Stage::Fused => Ok(self.fused),
            Stage::Block(b) => self
                .blocks
                .get(b - 1)
                .copied()
                .ok_or_else(|| Error::config(format!("model has {} conv blocks, asked for {stage}", self.blocks.len()))),
            Stage::Global => self.global.ok_or_else(|| Error::config("model has no attention module")),
            Stage::Final => Ok(self.last),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub schema: RelSchema,
    pub params: ParamStore,
    encoder: EncoderConfig,
    local: Option<LocalStackConfig>,
    global: Option<GlobalConfig>,
    head: HeadConfig,
}

impl Model {
    /// A freshly initialized model. Equal seeds give equal parameters.
    pub fn new(config: ModelConfig, vocab: Vocab, schema: RelSchema, seed: u64) -> Result<Self> {
        let mut model = Self::skeleton(config, vocab, schema)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.encoder.init(&mut model.params, &mut rng);
        if let Some(l) = &model.local {
            l.init(&mut model.params, &mut rng);
        }
        if let Some(gc) = &model.global {
            gc.init(&mut model.params, &mut rng);
        }
        model.head.init(&mut model.params, &mut rng);
        Ok(model)
    }

    fn skeleton(config: ModelConfig, vocab: Vocab, schema: RelSchema) -> Result<Self> {
        config.validate()?;
        if schema.is_empty() {
            return Err(Error::config("relation schema is empty"));
        }
        let encoder = EncoderConfig {
            kind: config.encoder,
            vocab_size: vocab.len(),
            embed_dim: config.embed_dim,
            d_h: config.d_h,
            d_p: config.d_p,
            d_a: config.d_a,
            attn_head_dim: config.attn_head_dim,
            max_len: config.max_len,
            relative_position: config.relative_position,
            use_position: config.use_position,
            use_attention: config.use_attention,
        };
        encoder.validate()?;
        let local = if config.use_local {
            Some(LocalStackConfig::new(&config.stack_kinds()?, config.d_h, config.residual, config.ln_eps)?)
        } else {
            None
        };
        let global = config.use_global.then_some(GlobalConfig {
            channels: config.d_h,
            order: config.global_order,
            residual: config.residual,
        });
        let head = HeadConfig {
            d_h: config.d_h,
            hidden: config.head_hidden(),
            relations: schema.len(),
            keep_prob: config.keep_prob,
        };
        Ok(Model {
            config,
            vocab,
            schema,
            params: ParamStore::new(),
            encoder,
            local,
            global,
            head,
        })
    }

    pub fn relations(&self) -> usize {
        self.schema.len()
    }

    pub fn max_len(&self) -> usize {
        self.config.max_len
    }

    pub fn ids(&self, seq: &TokenSeq) -> Vec<usize> {
        self.vocab.ids(seq)
    }

    /// Builds the forward pass over parameters bound as `pv`. Dropout runs
    /// only when `rng` is given.
    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        pv: &ParamVars,
        ids: &[usize],
        rng: Option<&mut R>,
    ) -> Result<Forward> {
        let (fused, _) = build_grid(g, pv, ids, &self.encoder)?;
        let blocks = match &self.local {
            Some(l) => local_consolidate(g, pv, fused, l)?,
            None => Vec::new(),
        };
        let mut last = blocks.last().copied().unwrap_or(fused);
        let global = match &self.global {
            Some(gc) => {
                last = global_consolidate(g, pv, last, gc)?;
                Some(last)
            }
            None => None,
        };
        let logits = score_tables(g, pv, last, &self.head, rng)?;
        Ok(Forward {
            fused,
            blocks,
            global,
            last,
            logits,
        })
    }

    /// Loss on one sentence and its gradient for every parameter, in store
    /// order.
    pub fn loss_and_grads<R: Rng + ?Sized>(
        &self,
        ids: &[usize],
        gold: &TagTable,
        rng: Option<&mut R>,
    ) -> Result<(f32, Vec<Vec<f32>>)> {
        let mut g = Graph::<f32>::new();
        let pv = self.params.bind(&mut g);
        let fwd = self.forward(&mut g, &pv, ids, rng)?;
        let loss = tag_loss(&mut g, fwd.logits, gold, None)?;
        let grads = g.backward(loss)?;
        let out = pv
            .iter()
            .zip(self.params.iter())
            .map(|((_, v), (_, t))| grads.get(v).map_or_else(|| vec![0.0; t.len()], <[f32]>::to_vec))
            .collect();
        Ok((g.scalar(loss), out))
    }

    /// Evaluation-mode loss on one sentence.
    pub fn loss(&self, ids: &[usize], gold: &TagTable) -> Result<f32> {
        let mut g = Graph::<f32>::new();
        let pv = self.params.bind(&mut g);
        let fwd = self.forward::<f32, ChaCha8Rng>(&mut g, &pv, ids, None)?;
        let loss = tag_loss(&mut g, fwd.logits, gold, None)?;
        Ok(g.scalar(loss))
    }

    pub fn predict_table(&self, ids: &[usize]) -> Result<TagTable> {
        let mut g = Graph::<f32>::new();
        let pv = self.params.bind(&mut g);
        let fwd = self.forward::<f32, ChaCha8Rng>(&mut g, &pv, ids, None)?;
        label_tables(g.value(fwd.logits), ids.len(), self.relations())
    }

    pub fn predict_ids(&self, ids: &[usize]) -> Result<Vec<Triple>> {
        Ok(decode_tables(&self.predict_table(ids)?))
    }

    pub fn predict(&self, seq: &TokenSeq) -> Result<Vec<Triple>> {
        self.predict_ids(&self.ids(seq))
    }

    /// Values of an intermediate grid `[N, N, C]`.
    pub fn stage_grid(&self, ids: &[usize], stage: Stage) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let pv = self.params.bind(&mut g);
        let fwd = self.forward::<f32, ChaCha8Rng>(&mut g, &pv, ids, None)?;
        Ok(g.tensor(fwd.stage(stage)?))
    }

    /// Writes the config, vocabulary, relation names and parameters into
    /// `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let cfg = toml::to_string(&self.config).map_err(|e| Error::config(e.to_string()))?;
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, cfg).map_err(|e| Error::file(&path, e))?;
        self.vocab.save(dir.join(VOCAB_FILE))?;
        self.schema.save(dir.join(RELATIONS_FILE))?;
        self.params.save(dir.join(PARAMS_FILE))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(CONFIG_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
        let config: ModelConfig = toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let vocab = Vocab::load(dir.join(VOCAB_FILE))?;
        let schema = RelSchema::load(dir.join(RELATIONS_FILE))?;
        let mut model = Self::new(config, vocab, schema, 0)?;
        let stored = ParamStore::load(dir.join(PARAMS_FILE))?;
        if stored.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, model expects {}",
                stored.len(),
                model.params.len()
            )));
        }
        model.params.assign_from(&stored)?;
        Ok(model)
    }

    /// Replaces parameter values from a bare checkpoint file.
    pub fn load_params(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.params.assign_from(&ParamStore::load(path)?)
    }
}

//! Mini-batch Adam training with dev-set model selection.
//!
//! Every random draw comes from a stream keyed by the seed and the position
//! in the schedule: shuffling from `(seed, epoch)`, dropout from
//! `(seed, epoch, batch, sentence)`. A resumed run therefore replays the
//! exact updates of an uninterrupted one.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::corpus::Example;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::metrics::{prf1, sentence_counts, Counts, MatchMode, Prf};
use crate::model::Model;
use crate::params::{load_arrays, save_arrays, ParamStore};
use crate::tagger::{build_gold_table, TagTable};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_DIR: &str = "best";
pub const STATE_FILE: &str = "state.ckpt";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamConfig {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
        }
    }
}

/// One bias-corrected Adam update of `p` at step `t >= 1`.
pub fn adam_update(p: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32], t: u64, hp: &AdamConfig) {
    let c1 = 1.0 - hp.beta1.powi(t as i32);
    let c2 = 1.0 - hp.beta2.powi(t as i32);
    for i in 0..p.len() {
        let gi = g[i] as f64;
        let mi = hp.beta1 * m[i] as f64 + (1.0 - hp.beta1) * gi;
        let vi = hp.beta2 * v[i] as f64 + (1.0 - hp.beta2) * gi * gi;
        m[i] = mi as f32;
        v[i] = vi as f32;
        p[i] = (p[i] as f64 - hp.lr * (mi / c1) / ((vi / c2).sqrt() + hp.eps)) as f32;
    }
}

/// Optimizer state, aligned with a [`ParamStore`]'s order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub hp: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl Adam {
    pub fn new(hp: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f32>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Adam {
            hp,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f32>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::shape("adam", &[grads.len()], &[self.m.len()]));
        }
        self.t += 1;
        for (i, (_, p)) in store.iter_mut().enumerate() {
            adam_update(p.data_mut(), &grads[i], &mut self.m[i], &mut self.v[i], self.t, &self.hp);
        }
        Ok(())
    }

    fn arrays(&self, store: &ParamStore) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::with_capacity(2 * self.m.len() + 1);
        for (i, (name, t)) in store.iter().enumerate() {
            out.push((format!("adam.m.{name}"), Tensor::new(t.shape().to_vec(), self.m[i].clone()).expect("aligned")));
            out.push((format!("adam.v.{name}"), Tensor::new(t.shape().to_vec(), self.v[i].clone()).expect("aligned")));
        }
        out.push(("adam.t".into(), Tensor::full(&[1], self.t as f32)));
        out
    }

    fn restore(&mut self, store: &ParamStore, arrays: &IndexMap<String, Tensor<f32>>) -> Result<()> {
        let get = |key: String, len: usize| -> Result<Vec<f32>> {
            match arrays.get(&key) {
                Some(t) if t.len() == len => Ok(t.data().to_vec()),
                Some(_) => Err(Error::Checkpoint(format!("{key} has the wrong size"))),
                None => Err(Error::Checkpoint(format!("{key} missing from state"))),
            }
        };
        for (i, (name, t)) in store.iter().enumerate() {
            self.m[i] = get(format!("adam.m.{name}"), t.len())?;
            self.v[i] = get(format!("adam.v.{name}"), t.len())?;
        }
        self.t = get("adam.t".into(), 1)?[0] as u64;
        Ok(())
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// A 64-bit stream key from schedule coordinates.
pub fn stream_seed(parts: &[u64]) -> u64 {
    // splitmix64 finalizer folded over the parts
    parts.iter().fold(0x9e37_79b9_7f4a_7c15, |h, &x| {
        let mut z = (h ^ x).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    })
}

/// Triple-level F1 of `model` on `examples`.
pub fn corpus_f1(model: &Model, examples: &[Example], mode: MatchMode) -> Result<Prf> {
    let mut c = Counts::default();
    for ex in examples {
        let pred = model.predict(&ex.seq)?;
        c.add(sentence_counts(&pred, &ex.triples, mode));
    }
    Ok(prf1(c.tp, c.fp, c.fn_))
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub train_f1: Option<f64>,
    pub dev_f1: f64,
    pub dev_exact_f1: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOptions {
    /// Where to write metrics, the best model and resumable state.
    pub out_dir: Option<PathBuf>,
    /// Continue from `out_dir/state.ckpt` when it exists.
    pub resume: bool,
    /// Stop after this many epochs in this call, even if the schedule has
    /// more.
    pub max_epochs_this_run: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_dev_f1: f64,
    pub reached_target: bool,
}

impl TrainOutcome {
    pub fn epochs_run(&self) -> usize {
        self.history.last().map_or(0, |h| h.epoch)
    }
}

struct Prepared<'a> {
    ex: &'a Example,
    ids: Vec<usize>,
    gold: TagTable,
}

fn prepare<'a>(model: &Model, examples: &'a [Example]) -> Result<Vec<Prepared<'a>>> {
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        if ex.seq.len() > model.max_len() {
            warn!("skipping {}: {} tokens exceed max_len {}", ex.id, ex.seq.len(), model.max_len());
            continue;
        }
        out.push(Prepared {
            ex,
            ids: model.ids(&ex.seq),
            gold: build_gold_table(&ex.triples, ex.seq.len(), model.relations())?,
        });
    }
    Ok(out)
}

fn fits(ex: &Example, model: &Model) -> bool {
    ex.seq.len() <= model.max_len()
}

/// Trains `model` in place. On return the model holds the parameters of the
/// epoch with the best dev partial F1 (the last epoch when `dev` is empty).
pub fn train(
    model: &mut Model,
    train_set: &[Example],
    dev_set: &[Example],
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = prepare(model, train_set)?;
    if data.is_empty() {
        return Err(Error::data("no usable training sentences"));
    }
    let dev: Vec<Example> = dev_set.iter().filter(|e| fits(e, model)).cloned().collect();
    let mut adam = Adam::new(AdamConfig::from(cfg), &model.params);
    let mut start = 0;
    let mut outcome = TrainOutcome {
        history: Vec::new(),
        best_epoch: 0,
        best_dev_f1: f64::NEG_INFINITY,
        reached_target: false,
    };
    let mut best = model.params.clone();

    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let state = dir.join(STATE_FILE);
        if opts.resume && state.exists() {
            let arrays = load_arrays(&state)?;
            restore_params(&mut model.params, &arrays)?;
            adam.restore(&model.params, &arrays)?;
            start = scalar(&arrays, "train.epoch")? as usize;
            outcome.best_epoch = scalar(&arrays, "train.best_epoch")? as usize;
            outcome.best_dev_f1 = scalar(&arrays, "train.best_dev_f1")? as f64;
            best = match Model::load(dir.join(BEST_DIR)) {
                Ok(m) => m.params,
                Err(_) => model.params.clone(),
            };
            info!("resuming after epoch {start}");
        } else if !opts.resume {
            let _ = fs::remove_file(dir.join(METRICS_FILE));
        }
    }

    let end = opts.max_epochs_this_run.map_or(cfg.epochs, |m| cfg.epochs.min(start + m));
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in start + 1..=end {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(&[cfg.seed, epoch as u64])));
        let (mut loss_sum, mut norm_max) = (0.0f64, 0.0f64);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc: Vec<Vec<f32>> = model.params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
            for (s, &ix) in batch.iter().enumerate() {
                let d = &data[ix];
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[cfg.seed, epoch as u64, b as u64, s as u64]));
                let (loss, grads) = model.loss_and_grads(&d.ids, &d.gold, Some(&mut rng))?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite { op: "loss" });
                }
                loss_sum += loss as f64;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.iter_mut().zip(g).for_each(|(a, g)| *a += g);
                }
            }
            let inv = 1.0 / batch.len() as f32;
            acc.iter_mut().flatten().for_each(|g| *g *= inv);
            if acc.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite { op: "gradient" });
            }
            let norm = match cfg.clip_norm {
                Some(c) => clip_global_norm(&mut acc, c),
                None => clip_global_norm(&mut acc, f64::INFINITY),
            };
            norm_max = norm_max.max(norm);
            adam.step(&mut model.params, &acc)?;
        }

        let train_f1 = if cfg.eval_train {
            let ex: Vec<Example> = data.iter().map(|d| d.ex.clone()).collect();
            Some(corpus_f1(model, &ex, MatchMode::Partial)?.f1)
        } else {
            None
        };
        let dev_f1 = corpus_f1(model, &dev, MatchMode::Partial)?.f1;
        let dev_exact_f1 = corpus_f1(model, &dev, MatchMode::Exact)?.f1;
        let log = EpochLog {
            epoch,
            steps: adam.steps(),
            loss: loss_sum / data.len() as f64,
            grad_norm: norm_max,
            train_f1,
            dev_f1,
            dev_exact_f1,
        };
        info!(
            "epoch {epoch}: loss {:.5} train_f1 {} dev_f1 {:.4}",
            log.loss,
            train_f1.map_or("-".into(), |f| format!("{f:.4}")),
            dev_f1
        );
        let improved = dev_f1 > outcome.best_dev_f1;
        if improved {
            outcome.best_dev_f1 = dev_f1;
            outcome.best_epoch = epoch;
            best = model.params.clone();
        }
        if let Some(dir) = &opts.out_dir {
            append_log(&dir.join(METRICS_FILE), &log)?;
            if improved {
                let mut snapshot = model.clone();
                snapshot.params = best.clone();
                snapshot.save(dir.join(BEST_DIR))?;
            }
            save_state(&dir.join(STATE_FILE), model, &adam, epoch, &outcome)?;
        }
        outcome.history.push(log);

        let train_ok = match cfg.target_train_f1 {
            Some(t) => train_f1.is_some_and(|f| f >= t),
            None => true,
        };
        let dev_ok = cfg.target_dev_f1.is_some_and(|t| dev_f1 >= t);
        if cfg.target_dev_f1.is_some() && train_ok && dev_ok {
            outcome.reached_target = true;
            info!("targets reached at epoch {epoch}");
            break;
        }
    }
    if outcome.best_epoch > 0 {
        model.params = best;
    }
    Ok(outcome)
}

fn scalar(arrays: &IndexMap<String, Tensor<f32>>, key: &str) -> Result<f32> {
    arrays
        .get(key)
        .and_then(|t| t.data().first().copied())
        .ok_or_else(|| Error::Checkpoint(format!("{key} missing from state")))
}

fn restore_params(store: &mut ParamStore, arrays: &IndexMap<String, Tensor<f32>>) -> Result<()> {
    let mut src = ParamStore::new();
    for (name, _) in store.iter() {
        let key = format!("param.{name}");
        let t = arrays
            .get(&key)
            .ok_or_else(|| Error::Checkpoint(format!("{key} missing from state")))?;
        src.insert(name, t.clone());
    }
    store.assign_from(&src)
}

fn save_state(path: &Path, model: &Model, adam: &Adam, epoch: usize, outcome: &TrainOutcome) -> Result<()> {
    let mut arrays: Vec<(String, Tensor<f32>)> =
        model.params.iter().map(|(k, t)| (format!("param.{k}"), t.clone())).collect();
    arrays.extend(adam.arrays(&model.params));
    arrays.push(("train.epoch".into(), Tensor::full(&[1], epoch as f32)));
    arrays.push(("train.best_epoch".into(), Tensor::full(&[1], outcome.best_epoch as f32)));
    arrays.push(("train.best_dev_f1".into(), Tensor::full(&[1], outcome.best_dev_f1 as f32)));
    save_arrays(path, arrays.iter().map(|(k, t)| (k.as_str(), t)))
}

fn append_log(path: &Path, log: &EpochLog) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::file(path, e))?;
    serde_json::to_writer(&mut f, log)?;
    f.write_all(b"\n").map_err(|e| Error::file(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::synth::{generate, SynthConfig};
    use crate::tokenize::Vocab;

    const HP: AdamConfig = AdamConfig {
        lr: 0.1,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![0.5f32, -1.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, &HP);
        assert_eq!(p, vec![0.5, -1.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = vec![0.0f32; 3];
        let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
        adam_update(&mut p, &[2.0, -0.01, 300.0], &mut m, &mut v, 1, &HP);
        for (x, want) in p.iter().zip([-0.1, 0.1, -0.1]) {
            assert!((x - want).abs() < 1e-5, "{p:?}");
        }
    }

    #[test]
    fn constant_gradient_steps_approach_lr_times_sign() {
        let hp = AdamConfig { lr: 1e-3, ..HP };
        let (mut p, mut m, mut v) = (vec![0.0f32; 2], vec![0.0; 2], vec![0.0; 2]);
        let mut prev = p.clone();
        for t in 1..=500 {
            adam_update(&mut p, &[0.7, -40.0], &mut m, &mut v, t, &hp);
            for (i, want) in [-1e-3, 1e-3].into_iter().enumerate() {
                let step = (p[i] - prev[i]) as f64;
                assert!((step - want).abs() < 1e-5, "t={t} step {step}");
            }
            prev = p.clone();
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let hp = AdamConfig { lr: 1e-2, ..HP };
        let mut p = vec![1.0f32, -0.5];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        let mut hit = None;
        for t in 1..=2000 {
            let g: Vec<f32> = p.iter().map(|x| 2.0 * x).collect();
            adam_update(&mut p, &g, &mut m, &mut v, t, &hp);
            if hit.is_none() && p.iter().map(|x| x * x).sum::<f32>() < 1e-6 {
                hit = Some(t);
            }
        }
        assert!(hit.is_some(), "loss still {:?}", p.iter().map(|x| x * x).sum::<f32>());
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = vec![vec![3.0f32], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-6 && (g[1][0] - 0.8).abs() < 1e-6);
        let mut small = vec![vec![0.3f32]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.3);
    }

    #[test]
    fn stream_seeds_separate_coordinates() {
        let a = stream_seed(&[1, 2, 3]);
        assert_eq!(a, stream_seed(&[1, 2, 3]));
        assert_ne!(a, stream_seed(&[1, 3, 2]));
        assert_ne!(stream_seed(&[0]), stream_seed(&[0, 0]));
    }

    fn small_setup() -> (Model, Vec<Example>, Vec<Example>, TrainConfig) {
        let corpus = generate(&SynthConfig { train: 6, dev: 3, seed: 1 });
        let mut cfg = Config::preset("synthetic").unwrap();
        cfg.model.d_h = 8;
        cfg.model.embed_dim = 6;
        cfg.model.d_p = 4;
        cfg.model.d_a = 2;
        cfg.model.attn_head_dim = 2;
        cfg.train.batch_size = 4;
        cfg.train.epochs = 2;
        cfg.train.target_dev_f1 = None;
        let vocab = Vocab::build(corpus.train.iter().map(|e| &e.seq));
        let model = Model::new(cfg.model.clone(), vocab, corpus.schema.clone(), 5).unwrap();
        (model, corpus.train, corpus.dev, cfg.train)
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (mut model, tr, dev, mut cfg) = small_setup();
        cfg.lr = 0.0;
        let before = model.params.clone();
        let out = train(&mut model, &tr, &dev, &cfg, &TrainOptions::default()).unwrap();
        assert_eq!(model.params, before);
        assert_eq!(out.history.len(), 2);
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let (model, tr, dev, cfg) = small_setup();
        let mut straight = model.clone();
        let a = train(&mut straight, &tr, &dev, &cfg, &TrainOptions::default()).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mut resumed = model.clone();
        let first = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            resume: false,
            max_epochs_this_run: Some(1),
        };
        train(&mut resumed, &tr, &dev, &cfg, &first).unwrap();
        let mut fresh = model.clone();
        let b = train(&mut fresh, &tr, &dev, &cfg, &TrainOptions { resume: true, max_epochs_this_run: None, ..first }).unwrap();
        assert_eq!(b.history.len(), 1);
        assert_eq!(a.history[1], b.history[0]);
        assert_eq!(fresh.params, straight.params);
        let lines = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(lines.lines().count(), 2);
    }

    #[test]
    fn runs_are_reproducible() {
        let (model, tr, dev, cfg) = small_setup();
        let (mut x, mut y) = (model.clone(), model);
        let a = train(&mut x, &tr, &dev, &cfg, &TrainOptions::default()).unwrap();
        let b = train(&mut y, &tr, &dev, &cfg, &TrainOptions::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(x.params, y.params);
    }
}

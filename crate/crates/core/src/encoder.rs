//! Sentence encoding into the fused pair grid `M^so`.
//!
//! Token vectors come from a small trainable encoder. The grid stacks three
//! views per cell `(i, j)`: the self-cross concatenation `h_i ⊕ h_j`, a
//! position embedding and a bank of bilinear attention scores.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, PoolAxis, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{glorot, uniform, ParamStore, ParamVars};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    /// Each token's embedding next to the sentence mean, projected.
    EmbeddingBag,
    /// One bidirectional GRU layer; each direction has `D_h / 2` units.
    #[default]
    BiRecurrent,
    /// One single-head self-attention layer over sinusoid-tagged embeddings.
    SelfAttention,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub d_h: usize,
    pub d_p: usize,
    pub d_a: usize,
    pub attn_head_dim: usize,
    pub max_len: usize,
    pub relative_position: bool,
    pub use_position: bool,
    pub use_attention: bool,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("d_h", self.d_h),
            ("d_p", self.d_p),
            ("d_a", self.d_a),
            ("attn_head_dim", self.attn_head_dim),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.kind == EncoderKind::BiRecurrent && !self.d_h.is_multiple_of(2) {
            return Err(Error::config(format!("bi-recurrent encoder needs an even d_h, got {}", self.d_h)));
        }
        Ok(())
    }

    /// Width of the concatenated grid fed to the fusion layer.
    pub fn fused_input_dim(&self) -> usize {
        2 * self.d_h + if self.use_position { self.d_p } else { 0 } + if self.use_attention { self.d_a } else { 0 }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let (v, e, d) = (self.vocab_size, self.embed_dim, self.d_h);
        let mut table = uniform(rng, &[v, e], 0.1);
        table.data_mut()[..e].fill(0.0);
        store.insert("embed.table", table);
        match self.kind {
            EncoderKind::EmbeddingBag => {
                store.insert("enc.bag.weight", glorot(rng, &[2 * e, d], 2 * e, d));
                store.insert("enc.bag.bias", Tensor::zeros(&[d]));
            }
            EncoderKind::BiRecurrent => {
                let h = d / 2;
                for dir in ["fwd", "bwd"] {
                    store.insert(format!("enc.gru.{dir}.wx"), glorot(rng, &[e, 3 * h], e, 3 * h));
                    store.insert(format!("enc.gru.{dir}.uzr"), glorot(rng, &[h, 2 * h], h, 2 * h));
                    store.insert(format!("enc.gru.{dir}.un"), glorot(rng, &[h, h], h, h));
                    store.insert(format!("enc.gru.{dir}.bias"), Tensor::zeros(&[3 * h]));
                }
            }
            EncoderKind::SelfAttention => {
                store.insert("enc.attn.input", glorot(rng, &[e, d], e, d));
                for m in ["query", "key", "value"] {
                    store.insert(format!("enc.attn.{m}"), glorot(rng, &[d, d], d, d));
                }
                store.insert("enc.attn.ln_gain", Tensor::full(&[d], 1.0));
                store.insert("enc.attn.ln_bias", Tensor::zeros(&[d]));
            }
        }
        if self.use_position {
            store.insert("grid.position", uniform(rng, &[2 * self.max_len + 1, self.d_p], 0.1));
        }
        if self.use_attention {
            let w = self.d_a * self.attn_head_dim;
            store.insert("grid.attn.query", glorot(rng, &[d, w], d, w));
            store.insert("grid.attn.key", glorot(rng, &[d, w], d, w));
        }
        let f = self.fused_input_dim();
        store.insert("fuse.weight", glorot(rng, &[f, d], f, d));
        store.insert("fuse.bias", Tensor::zeros(&[d]));
    }
}

/// Token vectors `[N, D_h]` for vocabulary ids `ids`.
pub fn encode_tokens<T: Real>(g: &mut Graph<T>, pv: &ParamVars, ids: &[usize], cfg: &EncoderConfig) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::data("empty sentence"));
    }
    if ids.len() > cfg.max_len {
        return Err(Error::TooLong {
            len: ids.len(),
            max_len: cfg.max_len,
        });
    }
    let emb = g.gather_rows(pv.get("embed.table")?, ids)?;
    match cfg.kind {
        EncoderKind::EmbeddingBag => {
            let mean = g.avg_pool(emb, PoolAxis::Spatial);
            let bag = g.gather_rows(mean, &vec![0; ids.len()])?;
            let x = g.concat(&[emb, bag])?;
            let y = g.matmul(x, pv.get("enc.bag.weight")?)?;
            let y = g.add_row(y, pv.get("enc.bag.bias")?)?;
            Ok(g.tanh(y))
        }
        EncoderKind::BiRecurrent => {
            let fwd = gru(g, pv, "fwd", emb, ids.len(), cfg.d_h / 2, false)?;
            let bwd = gru(g, pv, "bwd", emb, ids.len(), cfg.d_h / 2, true)?;
            g.concat(&[fwd, bwd])
        }
        EncoderKind::SelfAttention => {
            let n = ids.len();
            let x = g.matmul(emb, pv.get("enc.attn.input")?)?;
            let pe = g.constant(&[n, cfg.d_h], sinusoid(n, cfg.d_h))?;
            let x = g.add(x, pe)?;
            let q = g.matmul(x, pv.get("enc.attn.query")?)?;
            let k = g.matmul(x, pv.get("enc.attn.key")?)?;
            let v = g.matmul(x, pv.get("enc.attn.value")?)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, T::of(1.0 / (cfg.d_h as f64).sqrt()));
            let a = g.softmax(scores);
            let ctx = g.matmul(a, v)?;
            let y = g.add(x, ctx)?;
            g.layer_norm(y, pv.get("enc.attn.ln_gain")?, pv.get("enc.attn.ln_bias")?, 1e-5)
        }
    }
}

fn sinusoid<T: Real>(n: usize, d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * d);
    for pos in 0..n {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 / rate;
            out.push(T::of(if i % 2 == 0 { a.sin() } else { a.cos() }));
        }
    }
    out
}

/// GRU over the rows of `x`; outputs stay in token order when `reverse`.
fn gru<T: Real>(g: &mut Graph<T>, pv: &ParamVars, dir: &str, x: Var, n: usize, h: usize, reverse: bool) -> Result<Var> {
    let xw = g.matmul(x, pv.get(&format!("enc.gru.{dir}.wx"))?)?;
    let xw = g.add_row(xw, pv.get(&format!("enc.gru.{dir}.bias"))?)?;
    let uzr = pv.get(&format!("enc.gru.{dir}.uzr"))?;
    let un = pv.get(&format!("enc.gru.{dir}.un"))?;
    let mut state = g.constant(&[1, h], vec![T::zero(); h])?;
    let mut outs = vec![state; n];
    let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
    for t in order {
        let xt = g.slice_rows(xw, t, 1)?;
        let xz = g.slice_cols(xt, 0, h)?;
        let xr = g.slice_cols(xt, h, h)?;
        let xn = g.slice_cols(xt, 2 * h, h)?;
        let hu = g.matmul(state, uzr)?;
        let hz = g.slice_cols(hu, 0, h)?;
        let hr = g.slice_cols(hu, h, h)?;
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z);
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r);
        let rh = g.mul(r, state)?;
        let nh = g.matmul(rh, un)?;
        let cand = g.add(xn, nh)?;
        let cand = g.tanh(cand);
        // h' = (1 - z) * cand + z * h = cand + z * (h - cand)
        let delta = g.sub(state, cand)?;
        let gated = g.mul(z, delta)?;
        state = g.add(cand, gated)?;
        outs[t] = state;
    }
    g.concat_rows(&outs)
}

/// `[N, N, 2D]` grid with `h_i ⊕ h_j` at cell `(i, j)`.
pub fn self_cross<T: Real>(g: &mut Graph<T>, h: Var) -> Result<Var> {
    let s = g.shape(h).to_vec();
    if s.len() != 2 {
        return Err(Error::shape("self_cross", &s, &[]));
    }
    let (n, d) = (s[0], s[1]);
    let rows: Vec<usize> = (0..n * n).map(|c| c / n).collect();
    let cols: Vec<usize> = (0..n * n).map(|c| c % n).collect();
    let hi = g.gather_rows(h, &rows)?;
    let hj = g.gather_rows(h, &cols)?;
    let cat = g.concat(&[hi, hj])?;
    g.reshape(cat, &[n, n, 2 * d])
}

/// Position code of cell `(i, j)`, both 1-based, in a sentence of `n`
/// tokens: `n - i` above the diagonal and `j - n` elsewhere, or `j - i`
/// when `relative`.
pub fn position_index(n: usize, i: usize, j: usize, relative: bool) -> i64 {
    let (n, i, j) = (n as i64, i as i64, j as i64);
    if relative {
        j - i
    } else if j > i {
        n - i
    } else {
        j - n
    }
}

/// `[N, N, D_p]` lookup of [`position_index`] codes in `table`, whose row
/// `max_len + p` embeds code `p`.
pub fn position_grid<T: Real>(g: &mut Graph<T>, n: usize, table: Var, max_len: usize, relative: bool) -> Result<Var> {
    let s = g.shape(table).to_vec();
    if s.len() != 2 || s[0] != 2 * max_len + 1 {
        return Err(Error::config(format!(
            "position table shape {s:?} does not match max_len {max_len}"
        )));
    }
    let mut idx = Vec::with_capacity(n * n);
    for i in 1..=n {
        for j in 1..=n {
            let p = position_index(n, i, j, relative) + max_len as i64;
            if p < 0 || p > 2 * max_len as i64 {
                return Err(Error::config(format!(
                    "position code for ({i}, {j}) of {n} tokens falls outside the table for max_len {max_len}"
                )));
            }
            idx.push(p as usize);
        }
    }
    let rows = g.gather_rows(table, &idx)?;
    g.reshape(rows, &[n, n, s[1]])
}

/// `[N, N, heads]` bilinear scores `(h_i Q_d) · (h_j K_d) / sqrt(head_dim)`.
pub fn attention_grid<T: Real>(g: &mut Graph<T>, h: Var, q_w: Var, k_w: Var, heads: usize) -> Result<Var> {
    let q = g.matmul(h, q_w)?;
    let k = g.matmul(h, k_w)?;
    let width = g.shape(q)[1];
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(Error::config(format!("{width} attention columns do not split into {heads} heads")));
    }
    let scale = T::of(1.0 / ((width / heads) as f64).sqrt());
    g.pair_bilinear(q, k, heads, scale)
}

/// `ELU(concat(parts) W_so + b_so)` per cell.
pub fn fuse<T: Real>(g: &mut Graph<T>, parts: &[Var], w_so: Var, b_so: Var) -> Result<Var> {
    let cat = g.concat(parts)?;
    let width = *g.shape(cat).last().unwrap();
    let ws = g.shape(w_so).to_vec();
    if ws.len() != 2 || ws[0] != width || g.shape(b_so) != [ws[1]] {
        return Err(Error::config(format!(
            "fusion weight {ws:?} and bias {:?} do not fit a {width}-wide grid",
            g.shape(b_so)
        )));
    }
    let y = g.matmul(cat, w_so)?;
    let y = g.add_row(y, b_so)?;
    Ok(g.elu(y, T::one()))
}

/// Builds `M^so` for a sentence. Also returns the token vectors.
pub fn build_grid<T: Real>(g: &mut Graph<T>, pv: &ParamVars, ids: &[usize], cfg: &EncoderConfig) -> Result<(Var, Var)> {
    let h = encode_tokens(g, pv, ids, cfg)?;
    let n = ids.len();
    let mut parts = Vec::with_capacity(3);
    if cfg.use_position {
        parts.push(position_grid(g, n, pv.get("grid.position")?, cfg.max_len, cfg.relative_position)?);
    }
    if cfg.use_attention {
        parts.push(attention_grid(g, h, pv.get("grid.attn.query")?, pv.get("grid.attn.key")?, cfg.d_a)?);
    }
    parts.push(self_cross(g, h)?);
    let mso = fuse(g, &parts, pv.get("fuse.weight")?, pv.get("fuse.bias")?)?;
    Ok((mso, h))
}

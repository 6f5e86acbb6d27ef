//! Per-relation tag tables: the classification head, the loss and gold
//! table construction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{glorot, ParamStore, ParamVars};
use crate::triple::Triple;

/// Label set `{N/A, B-B, B-E, E-E}`.
pub const NUM_TAGS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Tag {
    None = 0,
    BeginBegin = 1,
    BeginEnd = 2,
    EndEnd = 3,
}

impl Tag {
    pub fn from_id(id: u8) -> Option<Tag> {
        match id {
            0 => Some(Tag::None),
            1 => Some(Tag::BeginBegin),
            2 => Some(Tag::BeginEnd),
            3 => Some(Tag::EndEnd),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tag::None => "N/A",
            Tag::BeginBegin => "B-B",
            Tag::BeginEnd => "B-E",
            Tag::EndEnd => "E-E",
        }
    }

    /// Collision rank: a higher rank wins a shared cell.
    fn precedence(self) -> u8 {
        match self {
            Tag::None => 0,
            Tag::EndEnd => 1,
            Tag::BeginBegin => 2,
            Tag::BeginEnd => 3,
        }
    }
}

/// `N x N x K` labels, stored row-major as `(i, j, r)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TagTable {
    n: usize,
    k: usize,
    labels: Vec<u8>,
}

impl TagTable {
    pub fn new(n: usize, k: usize) -> Self {
        TagTable { n, k, labels: vec![0; n * n * k] }
    }

    pub fn from_labels(n: usize, k: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != n * n * k || labels.iter().any(|&l| l as usize >= NUM_TAGS) {
            return Err(Error::data(format!("invalid {n}x{n}x{k} tag table")));
        }
        Ok(TagTable { n, k, labels })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label_ids(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    /// Tag at 1-based `(i, j)` in relation `r`.
    pub fn get(&self, i: usize, j: usize, r: usize) -> Tag {
        Tag::from_id(self.labels[self.offset(i, j, r)]).expect("labels validated on construction")
    }

    pub fn set(&mut self, i: usize, j: usize, r: usize, tag: Tag) {
        let o = self.offset(i, j, r);
        self.labels[o] = tag as u8;
    }

    /// Writes `tag` unless the cell already holds a higher-precedence tag.
    pub fn place(&mut self, i: usize, j: usize, r: usize, tag: Tag) {
        if tag.precedence() > self.get(i, j, r).precedence() {
            self.set(i, j, r, tag);
        }
    }

    fn offset(&self, i: usize, j: usize, r: usize) -> usize {
        debug_assert!(1 <= i && i <= self.n && 1 <= j && j <= self.n && r < self.k);
        ((i - 1) * self.n + (j - 1)) * self.k + r
    }

    pub fn count(&self, tag: Tag) -> usize {
        self.labels.iter().filter(|&&l| l == tag as u8).count()
    }
}

/// Gold labels: `(sb, ob)` B-B, `(sb, oe)` B-E, `(se, oe)` E-E in the
/// relation's table. Shared cells keep the tag with the highest precedence
/// (B-E, then B-B, then E-E).
pub fn build_gold_table(triples: &[Triple], n: usize, k: usize) -> Result<TagTable> {
    let mut t = TagTable::new(n, k);
    for tr in triples {
        if !tr.subject.is_valid(n) || !tr.object.is_valid(n) || tr.relation >= k {
            return Err(Error::data(format!("triple {tr} does not fit {n} tokens and {k} relations")));
        }
        let (s, o, r) = (tr.subject, tr.object, tr.relation);
        t.place(s.start, o.start, r, Tag::BeginBegin);
        t.place(s.start, o.end, r, Tag::BeginEnd);
        t.place(s.end, o.end, r, Tag::EndEnd);
    }
    Ok(t)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadConfig {
    pub d_h: usize,
    /// Hidden width `d`.
    pub hidden: usize,
    pub relations: usize,
    pub keep_prob: f64,
}

impl HeadConfig {
    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let (d_h, d, out) = (self.d_h, self.hidden, self.relations * NUM_TAGS);
        store.insert("head.weight", glorot(rng, &[d_h, d], d_h, d));
        store.insert("head.bias", Tensor::zeros(&[d]));
        store.insert("head.rel_weight", glorot(rng, &[d, out], d, out));
        store.insert("head.rel_bias", Tensor::zeros(&[out]));
    }
}

/// Logits `[N, N, K, 4]` = `W_r ReLU(drop(T W + b)) + b_r` per cell.
/// Dropout is active only when `rng` is given.
pub fn score_tables<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    t_so: Var,
    cfg: &HeadConfig,
    rng: Option<&mut R>,
) -> Result<Var> {
    let s = g.shape(t_so).to_vec();
    if s.len() != 3 || s[0] != s[1] {
        return Err(Error::shape("score_tables", &s, &[]));
    }
    let w = pv.get("head.weight")?;
    let w_r = pv.get("head.rel_weight")?;
    if s[2] != g.shape(w)[0] || g.shape(w)[1] != g.shape(w_r)[0] || g.shape(w_r)[1] != cfg.relations * NUM_TAGS {
        return Err(Error::config(format!(
            "head weights {:?} / {:?} do not fit a {}-wide grid with {} relations",
            g.shape(w),
            g.shape(w_r),
            s[2],
            cfg.relations
        )));
    }
    let y = g.matmul(t_so, w)?;
    let y = g.add_row(y, pv.get("head.bias")?)?;
    let y = g.dropout(y, cfg.keep_prob, rng)?;
    let y = g.relu(y);
    let y = g.matmul(y, w_r)?;
    let y = g.add_row(y, pv.get("head.rel_bias")?)?;
    g.reshape(y, &[s[0], s[0], cfg.relations, NUM_TAGS])
}

/// Mean cross-entropy over every `(i, j, r)` cell whose tokens are both
/// valid under `token_mask` (all tokens when `None`).
pub fn tag_loss<T: Real>(g: &mut Graph<T>, logits: Var, gold: &TagTable, token_mask: Option<&[bool]>) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    let (n, k) = (gold.n(), gold.k());
    if s != [n, n, k, NUM_TAGS] {
        return Err(Error::shape("tag_loss", &s, &[n, n, k, NUM_TAGS]));
    }
    let cell_mask: Option<Vec<bool>> = match token_mask {
        Some(m) if m.len() != n => return Err(Error::shape("tag_loss", &[m.len()], &[n])),
        Some(m) => Some(
            (0..n * n * k)
                .map(|c| {
                    let cell = c / k;
                    m[cell / n] && m[cell % n]
                })
                .collect(),
        ),
        None => None,
    };
    g.cross_entropy(logits, &gold.label_ids(), cell_mask.as_deref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, GradCheckConfig};
    use crate::triple::Span;
    use rand::SeedableRng;

    fn head(k: usize) -> (HeadConfig, ParamStore) {
        let cfg = HeadConfig { d_h: 4, hidden: 8, relations: k, keep_prob: 0.9 };
        let mut s = ParamStore::new();
        cfg.init(&mut s, &mut ChaCha8Rng::seed_from_u64(3));
        (cfg, s)
    }

    #[test]
    fn gold_table_layout() {
        let t = build_gold_table(&[Triple::new(Span::new(1, 2), 0, Span::new(4, 5))], 5, 1).unwrap();
        assert_eq!(t.get(1, 4, 0), Tag::BeginBegin);
        assert_eq!(t.get(1, 5, 0), Tag::BeginEnd);
        assert_eq!(t.get(2, 5, 0), Tag::EndEnd);
        assert_eq!(t.count(Tag::None), 22);
    }

    #[test]
    fn single_token_collision_keeps_begin_end() {
        let t = build_gold_table(&[Triple::new(Span::new(1, 1), 0, Span::new(3, 3))], 4, 1).unwrap();
        assert_eq!(t.get(1, 3, 0), Tag::BeginEnd);
        assert_eq!(t.count(Tag::None), 15);
    }

    #[test]
    fn empty_and_invalid() {
        let t = build_gold_table(&[], 3, 2).unwrap();
        assert_eq!(t.count(Tag::None), 18);
        let bad = Triple::new(Span::new(1, 4), 0, Span::new(2, 2));
        assert!(matches!(build_gold_table(&[bad], 3, 1), Err(Error::Data(_))));
        let bad_rel = Triple::new(Span::new(1, 1), 2, Span::new(2, 2));
        assert!(build_gold_table(&[bad_rel], 3, 2).is_err());
    }

    #[test]
    fn zero_head_gives_uniform_logits_and_ln4_loss() {
        let (cfg, mut s) = head(2);
        for (_, t) in s.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let mut g = Graph::<f64>::new();
        let pv = s.bind(&mut g);
        let x = g.leaf(&Tensor::full(&[3, 3, 4], 0.5), false);
        let logits = score_tables::<_, ChaCha8Rng>(&mut g, &pv, x, &cfg, None).unwrap();
        assert_eq!(g.shape(logits), &[3, 3, 2, 4]);
        assert!(g.value(logits).iter().all(|&v| v == 0.0));
        let gold = build_gold_table(&[Triple::new(Span::new(1, 1), 1, Span::new(3, 3))], 3, 2).unwrap();
        let loss = tag_loss(&mut g, logits, &gold, None).unwrap();
        assert!((g.scalar(loss) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn peaked_logits_give_near_zero_loss() {
        let gold = build_gold_table(&[Triple::new(Span::new(1, 2), 0, Span::new(3, 3))], 3, 1).unwrap();
        let data: Vec<f64> = gold
            .labels()
            .iter()
            .flat_map(|&l| (0..4).map(move |y| if y == l as usize { 30.0 } else { 0.0 }))
            .collect();
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(&Tensor::new(vec![3, 3, 1, 4], data).unwrap(), false);
        let loss = tag_loss(&mut g, logits, &gold, None).unwrap();
        assert!(g.scalar(loss) < 1e-12);
    }

    #[test]
    fn masked_tokens_are_excluded() {
        let gold = TagTable::new(2, 1);
        let mut data = vec![0.0; 16];
        // cell (2, 2) predicts B-B strongly; masking token 2 hides it
        data[3 * 4 + 1] = 50.0;
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(&Tensor::new(vec![2, 2, 1, 4], data).unwrap(), false);
        let masked = tag_loss(&mut g, logits, &gold, Some(&[true, false])).unwrap();
        assert!((g.scalar(masked) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn relation_permutation_leaves_loss_unchanged() {
        let triples = [
            Triple::new(Span::new(1, 1), 0, Span::new(2, 3)),
            Triple::new(Span::new(3, 3), 1, Span::new(1, 2)),
        ];
        let swapped: Vec<Triple> = triples.iter().map(|t| Triple { relation: 1 - t.relation, ..*t }).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..3 * 3 * 2 * 4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut perm = data.clone();
        for cell in 0..9 {
            for y in 0..4 {
                perm[(cell * 2) * 4 + y] = data[(cell * 2 + 1) * 4 + y];
                perm[(cell * 2 + 1) * 4 + y] = data[(cell * 2) * 4 + y];
            }
        }
        let run = |d: Vec<f64>, tr: &[Triple]| {
            let mut g = Graph::<f64>::new();
            let l = g.leaf(&Tensor::new(vec![3, 3, 2, 4], d).unwrap(), false);
            let gold = build_gold_table(tr, 3, 2).unwrap();
            let loss = tag_loss(&mut g, l, &gold, None).unwrap();
            g.scalar(loss)
        };
        assert!((run(data, &triples) - run(perm, &swapped)).abs() < 1e-12);
    }

    #[test]
    fn head_passes_grad_check() {
        let (cfg, s) = head(2);
        let names: Vec<String> = s.iter().map(|(k, _)| k.to_string()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Tensor<f64> = Tensor::new(vec![3, 3, 4], (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut inputs = vec![x];
        inputs.extend(s.iter().map(|(_, t)| t.cast::<f64>()));
        let gold = build_gold_table(&[Triple::new(Span::new(1, 2), 1, Span::new(3, 3))], 3, 2).unwrap();
        let report = grad_check(
            |g, v| {
                let pv = ParamVars::from_pairs(names.iter().cloned().zip(v[1..].iter().copied()));
                let logits = score_tables::<_, ChaCha8Rng>(g, &pv, v[0], &cfg, None)?;
                tag_loss(g, logits, &gold, None)
            },
            &inputs,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn loss_decreases_over_full_batch_steps() {
        let (cfg, mut s) = head(1);
        let gold = build_gold_table(&[Triple::new(Span::new(1, 1), 0, Span::new(2, 3))], 3, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Tensor<f32> = Tensor::new(vec![3, 3, 4], (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut last = f32::INFINITY;
        for _ in 0..20 {
            let mut g = Graph::<f32>::new();
            let pv = s.bind(&mut g);
            let vx = g.leaf(&x, false);
            let logits = score_tables::<_, ChaCha8Rng>(&mut g, &pv, vx, &cfg, None).unwrap();
            let loss = tag_loss(&mut g, logits, &gold, None).unwrap();
            let value = g.scalar(loss);
            assert!(value < last, "{value} !< {last}");
            last = value;
            let grads = g.backward(loss).unwrap();
            let vars: Vec<(String, Var)> = pv.iter().map(|(n, v)| (n.to_string(), v)).collect();
            for (name, v) in vars {
                let gr = grads.get(v).unwrap().to_vec();
                let t = s.get_mut(&name).unwrap();
                t.data_mut().iter_mut().zip(gr).for_each(|(p, d)| *p -= 0.1 * d);
            }
        }
    }
}

//! Global consolidation: channel attention and spatial attention over the
//! whole pair grid.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, PoolAxis, Real, Var};
use crate::error::{Error, Result};
use crate::params::{glorot, ParamStore, ParamVars};

pub const SPATIAL_KERNEL: usize = 7;

pub const CHANNEL_WEIGHT: &str = "global.channel.weight";
pub const SPATIAL_KERNEL_PARAM: &str = "global.spatial.kernel";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GlobalOrder {
    /// Channel attention, then spatial attention on its output.
    #[default]
    #[serde(rename = "cs")]
    ChannelSpatial,
    #[serde(rename = "sc")]
    SpatialChannel,
    /// Both branches on the same input, averaged.
    #[serde(rename = "par")]
    Parallel,
}

impl GlobalOrder {
    pub fn key(self) -> &'static str {
        match self {
            GlobalOrder::ChannelSpatial => "cs",
            GlobalOrder::SpatialChannel => "sc",
            GlobalOrder::Parallel => "par",
        }
    }
}

impl fmt::Display for GlobalOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for GlobalOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cs" => Ok(GlobalOrder::ChannelSpatial),
            "sc" => Ok(GlobalOrder::SpatialChannel),
            "par" => Ok(GlobalOrder::Parallel),
            _ => Err(Error::config(format!("unknown global_order {s:?}, expected cs, sc or par"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlobalConfig {
    pub channels: usize,
    pub order: GlobalOrder,
    pub residual: bool,
}

impl GlobalConfig {
    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let c = self.channels;
        let k = SPATIAL_KERNEL;
        store.insert(CHANNEL_WEIGHT, glorot(rng, &[c, c], c, c));
        store.insert(SPATIAL_KERNEL_PARAM, glorot(rng, &[1, 2, k, k], 2 * k * k, k * k));
    }
}

/// `Q_c = sigmoid(avg(U) W_c + max(U) W_c)` as a `[1, C]` row.
pub fn channel_attention<T: Real>(g: &mut Graph<T>, u: Var, w_c: Var) -> Result<Var> {
    let avg = g.avg_pool(u, PoolAxis::Spatial);
    let max = g.max_pool(u, PoolAxis::Spatial);
    let a = g.matmul(avg, w_c)?;
    let m = g.matmul(max, w_c)?;
    let logits = g.add(a, m)?;
    Ok(g.sigmoid(logits))
}

/// `Q_s = sigmoid(F_s * [avg_c(U), max_c(U)])` as an `[N, N, 1]` map.
pub fn spatial_attention<T: Real>(g: &mut Graph<T>, u: Var, kernel: Var) -> Result<Var> {
    let ks = g.shape(kernel);
    if ks.len() != 4 || ks[2] != SPATIAL_KERNEL || ks[3] != SPATIAL_KERNEL || ks[1] != 2 || ks[0] != 1 {
        return Err(Error::shape("spatial_attention", ks, &[1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL]));
    }
    let avg = g.avg_pool(u, PoolAxis::Channel);
    let max = g.max_pool(u, PoolAxis::Channel);
    let stacked = g.concat(&[avg, max])?;
    let conv = g.conv2d(stacked, kernel, SPATIAL_KERNEL / 2)?;
    Ok(g.sigmoid(conv))
}

/// Scales every cell of `u` channel-wise by `q_c`.
pub fn apply_channel<T: Real>(g: &mut Graph<T>, u: Var, q_c: Var) -> Result<Var> {
    g.mul_row(u, q_c)
}

/// Scales every cell of `u` by its own `q_s` entry.
pub fn apply_spatial<T: Real>(g: &mut Graph<T>, u: Var, q_s: Var) -> Result<Var> {
    g.mul_col(u, q_s)
}

pub fn global_consolidate<T: Real>(g: &mut Graph<T>, pv: &ParamVars, u: Var, cfg: &GlobalConfig) -> Result<Var> {
    let w_c = pv.get(CHANNEL_WEIGHT)?;
    let f_s = pv.get(SPATIAL_KERNEL_PARAM)?;
    let attended = match cfg.order {
        GlobalOrder::ChannelSpatial => {
            let q_c = channel_attention(g, u, w_c)?;
            let u1 = apply_channel(g, u, q_c)?;
            let q_s = spatial_attention(g, u1, f_s)?;
            apply_spatial(g, u1, q_s)?
        }
        GlobalOrder::SpatialChannel => {
            let q_s = spatial_attention(g, u, f_s)?;
            let u1 = apply_spatial(g, u, q_s)?;
            let q_c = channel_attention(g, u1, w_c)?;
            apply_channel(g, u1, q_c)?
        }
        GlobalOrder::Parallel => {
            let q_c = channel_attention(g, u, w_c)?;
            let q_s = spatial_attention(g, u, f_s)?;
            let a = apply_channel(g, u, q_c)?;
            let b = apply_spatial(g, u, q_s)?;
            let sum = g.add(a, b)?;
            g.scale(sum, T::of(0.5))
        }
    };
    if cfg.residual {
        g.add(attended, u)
    } else {
        Ok(attended)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, GradCheckConfig, Tensor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn params(c: usize, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let cfg = GlobalConfig { channels: c, order: GlobalOrder::ChannelSpatial, residual: true };
        cfg.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        store
    }

    #[test]
    fn zero_channel_weight_gives_half() {
        let mut g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = g.leaf(&random(&mut rng, &[4, 4, 3]), false);
        let w = g.leaf(&Tensor::zeros(&[3, 3]), false);
        let q = channel_attention(&mut g, u, w).unwrap();
        assert_eq!(g.shape(q), &[1, 3]);
        assert!(g.value(q).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn channel_logits_are_linear_in_pooled_sums() {
        // U has two cells: avg + max per channel is computable by hand.
        let u = Tensor::new(vec![1, 2, 2], vec![1.0, -2.0, 3.0, 0.0]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![0.5, -1.0, 0.25, 2.0]).unwrap();
        let s: [f64; 2] = [2.0 + 3.0, -1.0 + 0.0];
        let want: Vec<f64> = (0..2)
            .map(|j| 1.0 / (1.0 + (-(s[0] * w.data()[j] + s[1] * w.data()[2 + j])).exp()))
            .collect();
        let mut g = Graph::<f64>::new();
        let (vu, vw) = (g.leaf(&u, false), g.leaf(&w, false));
        let q = channel_attention(&mut g, vu, vw).unwrap();
        for (a, b) in g.value(q).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_spatial_kernel_gives_half() {
        let mut g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = g.leaf(&random(&mut rng, &[5, 5, 3]), false);
        let k = g.leaf(&Tensor::zeros(&[1, 2, 7, 7]), false);
        let q = spatial_attention(&mut g, u, k).unwrap();
        assert_eq!(g.shape(q), &[5, 5, 1]);
        assert!(g.value(q).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn wrong_spatial_kernel_size_rejected() {
        let mut g = Graph::<f64>::new();
        let u = g.leaf(&Tensor::zeros(&[3, 3, 2]), false);
        let k = g.leaf(&Tensor::zeros(&[1, 2, 5, 5]), false);
        assert!(spatial_attention(&mut g, u, k).is_err());
    }

    #[test]
    fn constant_input_gives_constant_interior_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 9;
        let mut g = Graph::<f64>::new();
        let u = g.leaf(&Tensor::full(&[n, n, 2], 0.4), false);
        let k = g.leaf(&random(&mut rng, &[1, 2, 7, 7]), false);
        let q = spatial_attention(&mut g, u, k).unwrap();
        let v = g.value(q);
        // with a 7x7 window only cells at distance >= 3 from every border see no padding
        let centre = v[4 * n + 4];
        for r in 3..n - 3 {
            for c in 3..n - 3 {
                assert!((v[r * n + c] - centre).abs() < 1e-12);
            }
        }
        assert!((v[0] - centre).abs() > 1e-9);
    }

    #[test]
    fn unit_attention_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, &[3, 3, 2]);
        let mut g = Graph::<f64>::new();
        let u = g.leaf(&x, false);
        let qc = g.leaf(&Tensor::full(&[1, 2], 1.0), false);
        let qs = g.leaf(&Tensor::full(&[3, 3, 1], 1.0), false);
        let a = apply_channel(&mut g, u, qc).unwrap();
        let b = apply_spatial(&mut g, a, qs).unwrap();
        assert_eq!(g.value(b), x.data());
    }

    fn run(order: GlobalOrder, residual: bool, x: &Tensor<f64>, store: &ParamStore) -> Vec<f64> {
        let mut g = Graph::<f64>::new();
        let pv = store.bind(&mut g);
        let u = g.leaf(x, false);
        let cfg = GlobalConfig { channels: x.shape()[2], order, residual };
        let y = global_consolidate(&mut g, &pv, u, &cfg).unwrap();
        assert_eq!(g.shape(y), x.shape());
        g.value(y).to_vec()
    }

    #[test]
    fn orders_are_not_equivalent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, &[5, 5, 4]);
        let store = params(4, 6);
        let cs = run(GlobalOrder::ChannelSpatial, false, &x, &store);
        let sc = run(GlobalOrder::SpatialChannel, false, &x, &store);
        let par = run(GlobalOrder::Parallel, false, &x, &store);
        let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(diff(&cs, &sc) > 1e-6);
        assert!(diff(&cs, &par) > 1e-6);
    }

    #[test]
    fn unknown_order_is_config_error() {
        assert!(matches!("both".parse::<GlobalOrder>(), Err(Error::Config(_))));
        for o in [GlobalOrder::ChannelSpatial, GlobalOrder::SpatialChannel, GlobalOrder::Parallel] {
            assert_eq!(o.key().parse::<GlobalOrder>().unwrap(), o);
        }
    }

    #[test]
    fn global_module_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let store = params(3, 8);
        let probe = random(&mut rng, &[4, 4, 3]);
        for order in [GlobalOrder::ChannelSpatial, GlobalOrder::SpatialChannel, GlobalOrder::Parallel] {
            let cfg = GlobalConfig { channels: 3, order, residual: true };
            let mut inputs = vec![random(&mut rng, &[4, 4, 3])];
            inputs.extend(store.iter().map(|(_, t)| t.cast::<f64>()));
            let names: Vec<String> = store.iter().map(|(k, _)| k.to_string()).collect();
            let report = grad_check(
                |g, v| {
                    let pv = ParamVars::from_pairs(names.iter().cloned().zip(v[1..].iter().copied()));
                    let y = global_consolidate(g, &pv, v[0], &cfg)?;
                    let p = g.leaf(&probe, false);
                    let m = g.mul(y, p)?;
                    Ok(g.sum(m))
                },
                &inputs,
                &GradCheckConfig { max_per_input: Some(16), ..GradCheckConfig::default() },
            )
            .unwrap();
            assert!(report.passed(), "{order}: {report:?}");
        }
    }

    proptest! {
        #[test]
        fn attention_is_bounded_without_residual(seed in 0u64..500, order_ix in 0usize..3) {
            let order = [GlobalOrder::ChannelSpatial, GlobalOrder::SpatialChannel, GlobalOrder::Parallel][order_ix];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, &[4, 4, 3]);
            let store = params(3, seed + 1);
            let y = run(order, false, &x, &store);
            let ux = x.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let yx = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assert!(yx <= ux);
        }

        #[test]
        fn channel_attention_ignores_cell_order(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, &[3, 3, 4]);
            let w = random(&mut rng, &[4, 4]);
            // reverse the cell order
            let mut perm = Vec::with_capacity(x.len());
            for cell in x.data().chunks(4).rev() {
                perm.extend_from_slice(cell);
            }
            let xp = Tensor::new(vec![3, 3, 4], perm).unwrap();
            let q = |t: &Tensor<f64>| {
                let mut g = Graph::<f64>::new();
                let (u, vw) = (g.leaf(t, false), g.leaf(&w, false));
                let q = channel_attention(&mut g, u, vw).unwrap();
                g.value(q).to_vec()
            };
            let (a, b) = (q(&x), q(&xp));
            for (p, r) in a.iter().zip(&b) {
                prop_assert!((p - r).abs() < 1e-12);
            }
        }

        #[test]
        fn symmetric_kernel_commutes_with_transpose(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 5;
            let x = random(&mut rng, &[n, n, 2]);
            let raw = random(&mut rng, &[1, 2, 7, 7]);
            let mut sym = raw.clone();
            for ch in 0..2 {
                for a in 0..7 {
                    for b in 0..7 {
                        let o = ch * 49;
                        sym.data_mut()[o + a * 7 + b] = 0.5 * (raw.data()[o + a * 7 + b] + raw.data()[o + b * 7 + a]);
                    }
                }
            }
            let mut xt = x.clone();
            for r in 0..n {
                for c in 0..n {
                    for ch in 0..2 {
                        xt.data_mut()[(c * n + r) * 2 + ch] = x.data()[(r * n + c) * 2 + ch];
                    }
                }
            }
            let q = |t: &Tensor<f64>| {
                let mut g = Graph::<f64>::new();
                let (u, k) = (g.leaf(t, false), g.leaf(&sym, false));
                let q = spatial_attention(&mut g, u, k).unwrap();
                g.value(q).to_vec()
            };
            let (a, b) = (q(&x), q(&xt));
            for r in 0..n {
                for c in 0..n {
                    prop_assert!((a[r * n + c] - b[c * n + r]).abs() < 1e-12);
                }
            }
        }
    }
}

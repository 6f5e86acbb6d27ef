//! Pixel-difference convolution over pair grids and the stacked
//! local-consolidation component.
//!
//! A PDC kernel owns one weight per pixel pair `(z, z')` and responds with
//! `sum_i w_i * (z_i - z'_i)` over its window. Because that is linear in the
//! input, every spec folds into an ordinary `k x k` kernel
//! ([`to_equivalent_kernel`]) and reuses the dense conv path.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{glorot, ParamStore, ParamVars};

/// Cell offset `(row, col)` relative to the window center; rows grow
/// downward, columns rightward.
pub type Offset = (i32, i32);

/// One weight slot. `minus == None` is a plain tap (vanilla convolution).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelPair {
    pub plus: Offset,
    pub minus: Option<Offset>,
}

impl PixelPair {
    fn diff(plus: Offset, minus: Offset) -> Self {
        PixelPair { plus, minus: Some(minus) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PdcKind {
    CentralXy,
    CentralDiagonal,
    CentralOmni,
    AngularCw,
    AngularCcw,
    RadialXy,
    RadialDiagonal,
    RadialOmni,
    Vanilla,
}

impl PdcKind {
    pub const ALL: [PdcKind; 9] = [
        PdcKind::CentralXy,
        PdcKind::CentralDiagonal,
        PdcKind::CentralOmni,
        PdcKind::AngularCw,
        PdcKind::AngularCcw,
        PdcKind::RadialXy,
        PdcKind::RadialDiagonal,
        PdcKind::RadialOmni,
        PdcKind::Vanilla,
    ];

    /// Name used in config files.
    pub fn name(self) -> &'static str {
        match self {
            PdcKind::CentralXy => "CPDC-XY",
            PdcKind::CentralDiagonal => "CPDC-DG",
            PdcKind::CentralOmni => "CPDC-OMNI",
            PdcKind::AngularCw => "APDC-CW",
            PdcKind::AngularCcw => "APDC-CCW",
            PdcKind::RadialXy => "RPDC-XY",
            PdcKind::RadialDiagonal => "RPDC-DG",
            PdcKind::RadialOmni => "RPDC-OMNI",
            PdcKind::Vanilla => "CNN-2D",
        }
    }

    /// Short architecture label as used in stack strings like `[C-A_r-R-V]`.
    pub fn short(self) -> &'static str {
        match self {
            PdcKind::CentralXy => "C_xy",
            PdcKind::CentralDiagonal => "C_d",
            PdcKind::CentralOmni => "C",
            PdcKind::AngularCw => "A",
            PdcKind::AngularCcw => "A_r",
            PdcKind::RadialXy => "R_xy",
            PdcKind::RadialDiagonal => "R_d",
            PdcKind::RadialOmni => "R",
            PdcKind::Vanilla => "V",
        }
    }

    pub fn kernel_size(self) -> usize {
        match self {
            PdcKind::RadialXy | PdcKind::RadialDiagonal | PdcKind::RadialOmni => 5,
            _ => 3,
        }
    }

    pub fn is_difference(self) -> bool {
        self != PdcKind::Vanilla
    }

    /// Canonical pixel pairs for this strategy.
    pub fn pairs(self) -> Vec<PixelPair> {
        const CENTER: Offset = (0, 0);
        const AXES: [Offset; 4] = [(-1, 0), (0, 1), (1, 0), (0, -1)];
        const DIAGONALS: [Offset; 4] = [(-1, -1), (-1, 1), (1, 1), (1, -1)];
        match self {
            PdcKind::CentralXy => AXES.iter().map(|&z| PixelPair::diff(z, CENTER)).collect(),
            PdcKind::CentralDiagonal => DIAGONALS.iter().map(|&z| PixelPair::diff(z, CENTER)).collect(),
            PdcKind::CentralOmni => RING.iter().map(|&z| PixelPair::diff(z, CENTER)).collect(),
            PdcKind::AngularCw => (0..8).map(|t| PixelPair::diff(RING[t], RING[(t + 1) % 8])).collect(),
            PdcKind::AngularCcw => {
                let rev: Vec<Offset> = RING.iter().rev().copied().collect();
                (0..8).map(|t| PixelPair::diff(rev[t], rev[(t + 1) % 8])).collect()
            }
            PdcKind::RadialXy => AXES
                .iter()
                .map(|&(r, c)| PixelPair::diff((2 * r, 2 * c), (r, c)))
                .collect(),
            PdcKind::RadialDiagonal => DIAGONALS
                .iter()
                .map(|&(r, c)| PixelPair::diff((2 * r, 2 * c), (r, c)))
                .collect(),
            PdcKind::RadialOmni => outer_ring()
                .into_iter()
                .map(|z| PixelPair::diff(z, (half_outward(z.0), half_outward(z.1))))
                .collect(),
            PdcKind::Vanilla => (-1..=1)
                .flat_map(|r| (-1..=1).map(move |c| PixelPair { plus: (r, c), minus: None }))
                .collect(),
        }
    }
}

/// 3x3 ring, clockwise from the top-left corner.
const RING: [Offset; 8] = [(-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1)];

/// 5x5 outer ring, clockwise from the top-left corner.
fn outer_ring() -> Vec<Offset> {
    let mut ring = Vec::with_capacity(16);
    ring.extend((-2..=2).map(|c| (-2, c)));
    ring.extend((-1..=2).map(|r| (r, 2)));
    ring.extend((-2..=1).rev().map(|c| (2, c)));
    ring.extend((-1..=1).rev().map(|r| (r, -2)));
    ring
}

/// Half of an outer-ring coordinate, rounded away from zero on ties.
fn half_outward(v: i32) -> i32 {
    match v {
        0 => 0,
        v if v.abs() == 2 => v / 2,
        v => v.signum(),
    }
}

impl fmt::Display for PdcKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PdcKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PdcKind::ALL
            .into_iter()
            .find(|k| k.name() == s || k.short() == s)
            .ok_or_else(|| Error::config(format!("unknown convolution spec {s:?}")))
    }
}

/// Parses `"[C-A_r-R-V]"` (brackets optional) into a block list.
pub fn parse_stack(s: &str) -> Result<Vec<PdcKind>> {
    let inner = s.trim().trim_start_matches('[').trim_end_matches(']');
    let kinds = inner
        .split('-')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(str::parse)
        .collect::<Result<Vec<_>>>()?;
    if kinds.is_empty() {
        return Err(Error::config(format!("empty stack {s:?}")));
    }
    Ok(kinds)
}

pub fn stack_label(kinds: &[PdcKind]) -> String {
    let parts: Vec<&str> = kinds.iter().map(|k| k.short()).collect();
    format!("[{}]", parts.join("-"))
}

/// Pixel-pair set plus kernel geometry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PdcKernelSpec {
    kind: Option<PdcKind>,
    k: usize,
    pairs: Vec<PixelPair>,
}

impl PdcKernelSpec {
    pub fn new(kind: PdcKind) -> Self {
        PdcKernelSpec {
            kind: Some(kind),
            k: kind.kernel_size(),
            pairs: kind.pairs(),
        }
    }

    /// An ad-hoc pair set, validated against the window.
    pub fn from_pairs(k: usize, pairs: Vec<PixelPair>) -> Result<Self> {
        let spec = PdcKernelSpec { kind: None, k, pairs };
        spec.validate()?;
        Ok(spec)
    }

    pub fn kind(&self) -> Option<PdcKind> {
        self.kind
    }

    pub fn kernel_size(&self) -> usize {
        self.k
    }

    pub fn pairs(&self) -> &[PixelPair] {
        &self.pairs
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k.is_multiple_of(2) || self.k == 0 {
            return Err(Error::config(format!("kernel size must be odd, got {}", self.k)));
        }
        if self.pairs.is_empty() || self.pairs.len() > self.k * self.k {
            return Err(Error::config(format!(
                "{} pixel pairs for a {}x{} window",
                self.pairs.len(),
                self.k,
                self.k
            )));
        }
        let r = (self.k / 2) as i32;
        let inside = |o: Offset| o.0.abs() <= r && o.1.abs() <= r;
        for p in &self.pairs {
            if !inside(p.plus) || p.minus.is_some_and(|m| !inside(m)) {
                return Err(Error::config(format!("pixel pair {p:?} outside the {}x{} window", self.k, self.k)));
            }
        }
        if let Some(kind) = self.kind {
            if self.pairs != kind.pairs() || self.k != kind.kernel_size() {
                return Err(Error::config(format!("{kind} pair list is not canonical")));
            }
        }
        Ok(())
    }

    /// Flat `ky * k + kx` positions of each pair inside the window.
    pub fn taps(&self) -> Vec<(usize, Option<usize>)> {
        let r = (self.k / 2) as i32;
        let pos = |o: Offset| ((o.0 + r) as usize) * self.k + (o.1 + r) as usize;
        self.pairs.iter().map(|p| (pos(p.plus), p.minus.map(pos))).collect()
    }
}

/// PDC response on a `[H, W, Cin]` grid with pair weights `[Cout, Cin, m]`,
/// zero same-padding.
pub fn pdc_forward<T: Real>(g: &mut Graph<T>, input: Var, spec: &PdcKernelSpec, weights: Var) -> Result<Var> {
    let k = spec.kernel_size();
    let kernel = g.pdc_fold(weights, &spec.taps(), k)?;
    g.conv2d(input, kernel, k / 2)
}

/// Folds pair weights `[Cout, Cin, m]` into the dense `[Cout, Cin, k, k]`
/// kernel whose standard convolution equals [`pdc_forward`].
pub fn to_equivalent_kernel(spec: &PdcKernelSpec, weights: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut g = Graph::<f32>::new();
    let w = g.leaf(weights, false);
    let k = g.pdc_fold(w, &spec.taps(), spec.kernel_size())?;
    Ok(g.tensor(k))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlockConfig {
    pub spec: PdcKernelSpec,
    pub channels: usize,
    pub residual: bool,
    pub ln_eps: f64,
}

/// Parameter names of block `idx`.
pub fn block_param_names(idx: usize) -> [String; 3] {
    [
        format!("local.{idx}.pairs"),
        format!("local.{idx}.ln_gain"),
        format!("local.{idx}.ln_bias"),
    ]
}

pub fn init_block(store: &mut ParamStore, idx: usize, cfg: &ConvBlockConfig, rng: &mut ChaCha8Rng) {
    let (c, m) = (cfg.channels, cfg.spec.num_pairs());
    let [w, gain, bias] = block_param_names(idx);
    store.insert(w, glorot(rng, &[c, c, m], c * m, c * m));
    let g0 = if cfg.residual { 0.0 } else { 1.0 };
    store.insert(gain, Tensor::full(&[c], g0));
    store.insert(bias, Tensor::zeros(&[c]));
}

/// `LN(PDC(x))`, plus `x` when the block is residual.
pub fn conv_block<T: Real>(g: &mut Graph<T>, pv: &ParamVars, idx: usize, input: Var, cfg: &ConvBlockConfig) -> Result<Var> {
    let [w, gain, bias] = block_param_names(idx);
    let y = pdc_forward(g, input, &cfg.spec, pv.get(&w)?)?;
    let y = g.layer_norm(y, pv.get(&gain)?, pv.get(&bias)?, cfg.ln_eps)?;
    if cfg.residual {
        g.add(y, input)
    } else {
        Ok(y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalStackConfig {
    pub blocks: Vec<ConvBlockConfig>,
}

impl LocalStackConfig {
    pub fn new(kinds: &[PdcKind], channels: usize, residual: bool, ln_eps: f64) -> Result<Self> {
        if kinds.is_empty() {
            return Err(Error::config("local stack needs at least one block"));
        }
        Ok(LocalStackConfig {
            blocks: kinds
                .iter()
                .map(|&k| ConvBlockConfig {
                    spec: PdcKernelSpec::new(k),
                    channels,
                    residual,
                    ln_eps,
                })
                .collect(),
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for (i, b) in self.blocks.iter().enumerate() {
            init_block(store, i, b, rng);
        }
    }
}

/// Runs the configured blocks in sequence, returning every block output.
pub fn local_consolidate<T: Real>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    mso: Var,
    stack: &LocalStackConfig,
) -> Result<Vec<Var>> {
    let mut outs = Vec::with_capacity(stack.blocks.len());
    let mut x = mso;
    for (i, b) in stack.blocks.iter().enumerate() {
        x = conv_block(g, pv, i, x, b)?;
        outs.push(x);
    }
    Ok(outs)
}

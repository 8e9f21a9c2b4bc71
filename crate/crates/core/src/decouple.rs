//! Decoupling regular convolutions into sums of depthwise separable blocks.
//!
//! Every kernel `W (n_o, n_i, k_h, k_w)` is cut into slice matrices: one
//! `n_o × k_h·k_w` matrix per input channel for the DW+PW order, or one
//! `n_i × k_h·k_w` matrix per output channel for PW+DW. The SVD of each slice
//! `U S Vᵀ` yields block `k` directly: the pointwise fiber is `U_k·σ_k` and
//! the depthwise filter is `V_k`. Keeping `K = max slice rank` blocks is
//! lossless; keeping the top `T < K` is the best rank-`T` fit per slice.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convref::ConvSpec;
use crate::error::{Error, Result};
use crate::linalg::{thin_svd, ThinSvd};
use crate::tensor::Tensor4;

/// A regular 2-D convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    name: String,
    weight: Tensor4,
    bias: Option<Vec<f64>>,
    spec: ConvSpec,
}

impl ConvKernel {
    pub fn new(
        name: impl Into<String>,
        weight: Tensor4,
        bias: Option<Vec<f64>>,
        spec: ConvSpec,
    ) -> Result<Self> {
        let name = name.into();
        let [n_o, n_i, k_h, k_w] = weight.shape();
        if n_o == 0 || n_i == 0 || k_h == 0 || k_w == 0 {
            return Err(Error::Shape(format!(
                "kernel `{name}` has an empty dimension: {:?}",
                weight.shape()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != n_o {
                return Err(Error::Shape(format!(
                    "kernel `{name}` has {n_o} output channels but {} bias values",
                    b.len()
                )));
            }
        }
        spec.validate()?;
        Ok(Self {
            name,
            weight,
            bias,
            spec,
        })
    }

    /// Stride 1, no padding, no bias.
    pub fn plain(name: impl Into<String>, weight: Tensor4) -> Result<Self> {
        Self::new(name, weight, None, ConvSpec::default())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn weight(&self) -> &Tensor4 {
        &self.weight
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn spec(&self) -> ConvSpec {
        self.spec
    }

    pub fn shape(&self) -> [usize; 4] {
        self.weight.shape()
    }

    pub fn out_channels(&self) -> usize {
        self.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.shape()[1]
    }

    pub fn kernel_hw(&self) -> (usize, usize) {
        let s = self.shape();
        (s[2], s[3])
    }

    /// `k_h · k_w`, the upper bound on the decoupling rank.
    pub fn kernel_area(&self) -> usize {
        let (h, w) = self.kernel_hw();
        h * w
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel_area() == 1
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

/// Order of the depthwise and pointwise stages inside each separable block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ordering {
    /// Depthwise over the `n_i` input channels, then pointwise.
    DwPw,
    /// Pointwise into `n_o` channels, then depthwise.
    PwDw,
}

impl Ordering {
    pub const ALL: [Ordering; 2] = [Ordering::DwPw, Ordering::PwDw];

    pub fn as_str(self) -> &'static str {
        match self {
            Ordering::DwPw => "dwpw",
            Ordering::PwDw => "pwdw",
        }
    }
}

impl fmt::Display for Ordering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ordering {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dwpw" | "dw+pw" => Ok(Ordering::DwPw),
            "pwdw" | "pw+dw" => Ok(Ordering::PwDw),
            _ => Err(Error::InvalidArgument(format!(
                "unknown ordering `{s}` (expected dwpw or pwdw)"
            ))),
        }
    }
}

/// One depthwise separable block.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableBlock {
    /// `(n_o, n_i, 1, 1)`
    pub pointwise: Tensor4,
    /// `(n_i, 1, k_h, k_w)` for DW+PW, `(n_o, 1, k_h, k_w)` for PW+DW.
    pub depthwise: Tensor4,
}

/// A convolution expressed as a sum of `T` separable blocks.
///
/// Stride and padding live on the depthwise stage; the pointwise stage is
/// always a plain 1×1 convolution. The bias is added once after the sum.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoupledKernel {
    name: String,
    ordering: Ordering,
    blocks: Vec<SeparableBlock>,
    bias: Option<Vec<f64>>,
    spec: ConvSpec,
    source_shape: [usize; 4],
}

impl DecoupledKernel {
    pub fn new(
        name: impl Into<String>,
        ordering: Ordering,
        blocks: Vec<SeparableBlock>,
        bias: Option<Vec<f64>>,
        spec: ConvSpec,
        source_shape: [usize; 4],
    ) -> Result<Self> {
        let name = name.into();
        let [n_o, n_i, k_h, k_w] = source_shape;
        if source_shape.contains(&0) {
            return Err(Error::Shape(format!(
                "decoupled kernel `{name}` has an empty source dimension: {source_shape:?}"
            )));
        }
        if blocks.is_empty() || blocks.len() > k_h * k_w {
            return Err(Error::InvalidArgument(format!(
                "decoupled kernel `{name}` has {} blocks; expected 1..={}",
                blocks.len(),
                k_h * k_w
            )));
        }
        let dw_channels = match ordering {
            Ordering::DwPw => n_i,
            Ordering::PwDw => n_o,
        };
        for (k, b) in blocks.iter().enumerate() {
            if b.pointwise.shape() != [n_o, n_i, 1, 1] {
                return Err(Error::Shape(format!(
                    "block {k} of `{name}`: pointwise shape {:?}, expected {:?}",
                    b.pointwise.shape(),
                    [n_o, n_i, 1, 1]
                )));
            }
            if b.depthwise.shape() != [dw_channels, 1, k_h, k_w] {
                return Err(Error::Shape(format!(
                    "block {k} of `{name}`: depthwise shape {:?}, expected {:?}",
                    b.depthwise.shape(),
                    [dw_channels, 1, k_h, k_w]
                )));
            }
        }
        if let Some(b) = &bias {
            if b.len() != n_o {
                return Err(Error::Shape(format!(
                    "decoupled kernel `{name}` has {n_o} output channels but {} bias values",
                    b.len()
                )));
            }
        }
        spec.validate()?;
        Ok(Self {
            name,
            ordering,
            blocks,
            bias,
            spec,
            source_shape,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn ordering(&self) -> Ordering {
        self.ordering
    }

    pub fn blocks(&self) -> &[SeparableBlock] {
        &self.blocks
    }

    /// Number of blocks `T`.
    pub fn rank(&self) -> usize {
        self.blocks.len()
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn spec(&self) -> ConvSpec {
        self.spec
    }

    pub fn source_shape(&self) -> [usize; 4] {
        self.source_shape
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Dense kernel `Σ_k P^k ∘ D^k` equivalent to the block sum.
    pub fn reconstruct(&self) -> Tensor4 {
        let [n_o, n_i, k_h, k_w] = self.source_shape;
        let mut out = Tensor4::zeros(self.source_shape);
        for block in &self.blocks {
            for o in 0..n_o {
                for i in 0..n_i {
                    let p = block.pointwise.get([o, i, 0, 0]);
                    if p == 0.0 {
                        continue;
                    }
                    let c = match self.ordering {
                        Ordering::DwPw => i,
                        Ordering::PwDw => o,
                    };
                    for h in 0..k_h {
                        for w in 0..k_w {
                            let cur = out.get([o, i, h, w]);
                            out.set([o, i, h, w], cur + p * block.depthwise.get([c, 0, h, w]));
                        }
                    }
                }
            }
        }
        out
    }

    /// The equivalent regular convolution layer.
    pub fn to_conv(&self) -> ConvKernel {
        ConvKernel {
            name: self.name.clone(),
            weight: self.reconstruct(),
            bias: self.bias.clone(),
            spec: self.spec,
        }
    }
}

/// Per-slice SVDs of a kernel for one ordering.
#[derive(Debug, Clone)]
pub struct SliceFactorization {
    ordering: Ordering,
    kernel_hw: (usize, usize),
    slices: Vec<ThinSvd>,
}

/// Computes the SVD of every slice matrix of `k` for the given ordering.
///
/// Slices are processed in parallel; results are collected in ascending
/// slice order so the output is independent of scheduling.
pub fn factorize(k: &ConvKernel, ordering: Ordering) -> Result<SliceFactorization> {
    let w = k.weight();
    let count = match ordering {
        Ordering::DwPw => k.in_channels(),
        Ordering::PwDw => k.out_channels(),
    };
    let slices = (0..count)
        .into_par_iter()
        .map(|s| {
            let m = match ordering {
                Ordering::DwPw => w.slice_input_channel(s)?,
                Ordering::PwDw => w.slice_output_channel(s)?,
            };
            thin_svd(&m)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_layer(k.name()))?;
    Ok(SliceFactorization {
        ordering,
        kernel_hw: k.kernel_hw(),
        slices,
    })
}

impl SliceFactorization {
    pub fn ordering(&self) -> Ordering {
        self.ordering
    }

    pub fn slices(&self) -> &[ThinSvd] {
        &self.slices
    }

    pub fn kernel_area(&self) -> usize {
        self.kernel_hw.0 * self.kernel_hw.1
    }

    /// `K = max_slice rank`. All-zero slices have rank 0.
    pub fn decoupling_rank(&self) -> usize {
        self.slices.iter().map(ThinSvd::rank).max().unwrap_or(0)
    }

    /// `Σ_slices Σ_{k>t} σ_k²`, the squared Frobenius error of a top-`t` decoupling.
    pub fn tail_energy(&self, t: usize) -> f64 {
        self.slices
            .iter()
            .map(|s| s.sigma().iter().skip(t).map(|x| x * x).sum::<f64>())
            .sum()
    }

    pub fn profile(&self) -> EnergyProfile {
        let spectra = self.slices.iter().map(|s| s.sigma().to_vec()).collect();
        EnergyProfile::from_spectra(self.ordering, spectra, self.kernel_area())
    }

    /// Builds the top-`t` decoupling; the emitted block count is `min(t, K)`,
    /// and at least one (all-zero) block for an all-zero kernel.
    pub fn decouple(&self, source: &ConvKernel, t: usize) -> Result<DecoupledKernel> {
        let [n_o, n_i, k_h, k_w] = source.shape();
        let blocks_wanted = t.min(self.decoupling_rank()).max(1);
        let mut blocks = Vec::with_capacity(blocks_wanted);
        for b in 0..blocks_wanted {
            let mut pointwise = Tensor4::zeros([n_o, n_i, 1, 1]);
            let dw_channels = match self.ordering {
                Ordering::DwPw => n_i,
                Ordering::PwDw => n_o,
            };
            let mut depthwise = Tensor4::zeros([dw_channels, 1, k_h, k_w]);
            for (s, svd) in self.slices.iter().enumerate() {
                if b >= svd.rank() {
                    continue;
                }
                let sigma = svd.sigma()[b];
                for r in 0..svd.u().rows() {
                    let value = svd.u().get(r, b) * sigma;
                    match self.ordering {
                        // slice s is input channel i, rows are output channels
                        Ordering::DwPw => pointwise.set([r, s, 0, 0], value),
                        // slice s is output channel o, rows are input channels
                        Ordering::PwDw => pointwise.set([s, r, 0, 0], value),
                    }
                }
                for h in 0..k_h {
                    for w in 0..k_w {
                        depthwise.set([s, 0, h, w], svd.v().get(h * k_w + w, b));
                    }
                }
            }
            blocks.push(SeparableBlock {
                pointwise,
                depthwise,
            });
        }
        DecoupledKernel::new(
            source.name(),
            self.ordering,
            blocks,
            source.bias.clone(),
            source.spec(),
            source.shape(),
        )
    }
}

/// Lossless decoupling with `T = K` blocks.
pub fn decouple_exact(k: &ConvKernel, ordering: Ordering) -> Result<DecoupledKernel> {
    let f = factorize(k, ordering)?;
    f.decouple(k, f.decoupling_rank())
}

/// Top-`t` approximate decoupling (`1 ≤ t ≤ k_h·k_w`).
pub fn decouple_topt(k: &ConvKernel, ordering: Ordering, t: usize) -> Result<DecoupledKernel> {
    check_block_count(k, t)?;
    factorize(k, ordering)?.decouple(k, t)
}

fn check_block_count(k: &ConvKernel, t: usize) -> Result<()> {
    if t == 0 || t > k.kernel_area() {
        return Err(Error::InvalidArgument(format!(
            "layer `{}`: block count {t} outside 1..={}",
            k.name(),
            k.kernel_area()
        ))
        .in_layer(k.name()));
    }
    Ok(())
}

/// Singular-value spectra of every slice and the slice-averaged
/// accumulative energy ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyProfile {
    pub ordering: Ordering,
    pub per_slice_sigma: Vec<Vec<f64>>,
    /// Entry `t-1` is the mean over slices of `Σ_{k≤t} σ_k² / Σ_k σ_k²`.
    pub cumulative_ratio: Vec<f64>,
    pub decoupling_rank: usize,
}

impl EnergyProfile {
    /// All-zero slices count as fully captured (ratio 1 at every `t`), so an
    /// all-zero kernel profiles as all ones with `K = 0`.
    pub fn from_spectra(ordering: Ordering, spectra: Vec<Vec<f64>>, kernel_area: usize) -> Self {
        let mut sums = vec![0.0; kernel_area];
        for sigma in &spectra {
            let mut prefix = Vec::with_capacity(kernel_area);
            let mut acc = 0.0;
            for t in 0..kernel_area {
                if let Some(s) = sigma.get(t) {
                    acc += s * s;
                }
                prefix.push(acc);
            }
            let total = acc;
            for (sum, p) in sums.iter_mut().zip(&prefix) {
                *sum += if total > 0.0 { p / total } else { 1.0 };
            }
        }
        let n = spectra.len().max(1) as f64;
        let cumulative_ratio = if spectra.is_empty() {
            vec![1.0; kernel_area]
        } else {
            sums.into_iter().map(|s| s / n).collect()
        };
        let decoupling_rank = spectra.iter().map(Vec::len).max().unwrap_or(0);
        Self {
            ordering,
            per_slice_sigma: spectra,
            cumulative_ratio,
            decoupling_rank,
        }
    }

    pub fn kernel_area(&self) -> usize {
        self.cumulative_ratio.len()
    }
}

pub fn energy_profile(k: &ConvKernel, ordering: Ordering) -> Result<EnergyProfile> {
    Ok(factorize(k, ordering)?.profile())
}

/// How many blocks to keep for a layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankPolicy {
    FixedT(usize),
    /// Smallest `t` whose accumulative energy ratio reaches the threshold.
    EnergyThreshold(f64),
    Exact,
}

impl RankPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RankPolicy::FixedT(0) => Err(Error::InvalidArgument(
                "fixed block count must be at least 1".into(),
            )),
            RankPolicy::EnergyThreshold(tau) if !(tau > 0.0 && tau <= 1.0) => Err(
                Error::InvalidArgument(format!("energy threshold {tau} outside (0, 1]")),
            ),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for RankPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RankPolicy::FixedT(t) => write!(f, "fixed:{t}"),
            RankPolicy::EnergyThreshold(tau) => write!(f, "energy:{tau}"),
            RankPolicy::Exact => f.write_str("exact"),
        }
    }
}

impl FromStr for RankPolicy {
    type Err = Error;

    /// Parses `exact`, `fixed:T` or `energy:τ`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::InvalidArgument(format!(
                "invalid policy `{s}` (expected exact, fixed:T or energy:TAU)"
            ))
        };
        let policy = match s.split_once(':') {
            None if s == "exact" => RankPolicy::Exact,
            Some(("fixed", t)) => RankPolicy::FixedT(t.parse().map_err(|_| bad())?),
            Some(("energy", tau)) => RankPolicy::EnergyThreshold(tau.parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        };
        policy.validate()?;
        Ok(policy)
    }
}

impl Serialize for RankPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RankPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Block count chosen by `policy` for a layer with the given profile.
pub fn select_rank(profile: &EnergyProfile, policy: RankPolicy) -> Result<usize> {
    policy.validate()?;
    let area = profile.kernel_area();
    Ok(match policy {
        RankPolicy::FixedT(t) => t.min(area),
        RankPolicy::Exact => profile.decoupling_rank,
        RankPolicy::EnergyThreshold(tau) => profile
            .cumulative_ratio
            .iter()
            .position(|&r| r >= tau)
            .map_or(area, |p| p + 1),
    })
}

/// Decouples `k` with the block count chosen by `policy`, returning the
/// decoupled kernel and the profile used to choose it.
pub fn decouple_with_policy(
    k: &ConvKernel,
    ordering: Ordering,
    policy: RankPolicy,
) -> Result<(DecoupledKernel, EnergyProfile)> {
    let f = factorize(k, ordering)?;
    let profile = f.profile();
    let t = select_rank(&profile, policy).map_err(|e| e.in_layer(k.name()))?;
    Ok((f.decouple(k, t)?, profile))
}

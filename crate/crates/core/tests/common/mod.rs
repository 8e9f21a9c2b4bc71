#![allow(dead_code)]

use nalgebra::DMatrix;
use netdecouple::complements::{channel_decompose, spatial_decompose, DecomposedPair};
use netdecouple::convref::ConvSpec;
use netdecouple::decouple::{decouple_topt, ConvKernel, Ordering};
use netdecouple::model::{Layer, Model, ModelLayer, Stage};
use netdecouple::tensor::{Tensor3, Tensor4};
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

pub fn rng(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}

pub fn uniform(rng: &mut SplitMix64) -> f64 {
    rng.random_range(-1.0..1.0)
}

pub fn random_tensor(shape: [usize; 4], rng: &mut SplitMix64) -> Tensor4 {
    Tensor4::from_fn(shape, |_| uniform(rng))
}

pub fn random_input(shape: [usize; 3], rng: &mut SplitMix64) -> Tensor3 {
    let n = shape.iter().product();
    Tensor3::new(shape, (0..n).map(|_| uniform(rng)).collect()).unwrap()
}

pub fn random_kernel(
    name: &str,
    shape: [usize; 4],
    spec: ConvSpec,
    bias: bool,
    rng: &mut SplitMix64,
) -> ConvKernel {
    let w = random_tensor(shape, rng);
    let b = bias.then(|| (0..shape[0]).map(|_| uniform(rng)).collect());
    ConvKernel::new(name, w, b, spec).unwrap()
}

pub fn rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

pub fn sq_norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

/// Plain nested-loop convolution written against an explicitly zero-padded
/// copy of the input. Output is `(n_o, out_h, out_w)` row-major.
pub fn naive_conv(
    x: &[f64],
    [c, h, w]: [usize; 3],
    weight: &[f64],
    [n_o, n_i, k_h, k_w]: [usize; 4],
    bias: Option<&[f64]>,
    (s_h, s_w): (usize, usize),
    (p_h, p_w): (usize, usize),
) -> (Vec<f64>, usize, usize) {
    assert_eq!(c, n_i);
    let (ph, pw) = (h + 2 * p_h, w + 2 * p_w);
    let mut padded = vec![0.0; c * ph * pw];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                padded[ch * ph * pw + (y + p_h) * pw + xx + p_w] = x[ch * h * w + y * w + xx];
            }
        }
    }
    let out_h = (ph - k_h) / s_h + 1;
    let out_w = (pw - k_w) / s_w + 1;
    let mut out = vec![0.0; n_o * out_h * out_w];
    for o in 0..n_o {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = 0.0;
                for i in 0..n_i {
                    for ky in 0..k_h {
                        for kx in 0..k_w {
                            let wv = weight[o * n_i * k_h * k_w + i * k_h * k_w + ky * k_w + kx];
                            let xv = padded[i * ph * pw + (oy * s_h + ky) * pw + ox * s_w + kx];
                            acc += wv * xv;
                        }
                    }
                }
                if let Some(b) = bias {
                    acc += b[o];
                }
                out[o * out_h * out_w + oy * out_w + ox] = acc;
            }
        }
    }
    (out, out_h, out_w)
}

/// Slice matrix for one input channel, `(n_o, k_h·k_w)`, built directly
/// from the flat `(o, i, h, w)` buffer.
pub fn input_slice(w: &Tensor4, i: usize) -> DMatrix<f64> {
    let [n_o, n_i, k_h, k_w] = w.shape();
    let area = k_h * k_w;
    DMatrix::from_fn(n_o, area, |o, p| w.data()[(o * n_i + i) * area + p])
}

/// Slice matrix for one output channel, `(n_i, k_h·k_w)`.
pub fn output_slice(w: &Tensor4, o: usize) -> DMatrix<f64> {
    let [_, n_i, k_h, k_w] = w.shape();
    let area = k_h * k_w;
    DMatrix::from_fn(n_i, area, |i, p| w.data()[(o * n_i + i) * area + p])
}

/// Singular values from the eigenvalues of the Gram matrix `MᵀM` or `MMᵀ`
/// (whichever is smaller), descending.
pub fn gram_singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let gram = if m.nrows() >= m.ncols() {
        m.transpose() * m
    } else {
        m * m.transpose()
    };
    let eig = gram.symmetric_eigen();
    let mut s: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s
}

/// Singular values from nalgebra's own SVD, descending.
pub fn oracle_singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = m
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s
}

fn decouple_stage(stage: &Stage, r: &mut SplitMix64) -> Stage {
    match stage {
        Stage::Conv(k) if !k.is_pointwise() => {
            let ordering = Ordering::ALL[r.random_range(0..2)];
            let t = r.random_range(1..=k.kernel_area());
            Stage::Decoupled(decouple_topt(k, ordering, t).unwrap())
        }
        other => other.clone(),
    }
}

/// Random chained model mixing regular, decoupled and pair layers.
pub fn random_model(seed: u64) -> Model {
    let mut r = rng(seed);
    let in_c = r.random_range(1..=4);
    let mut channels = in_c;
    let n_layers = r.random_range(1..=4);
    let mut layers = Vec::new();
    for idx in 0..n_layers {
        let override_channels = r.random_bool(0.15);
        let n_i = if override_channels {
            r.random_range(1..=5)
        } else {
            channels
        };
        let n_o = r.random_range(1..=6);
        let k_h = [1, 2, 3, 5][r.random_range(0..4)];
        let k_w = [1, 3, 5][r.random_range(0..3)];
        let spec = ConvSpec::new(
            (r.random_range(1..=2), r.random_range(1..=2)),
            (r.random_range(0..=k_h / 2), r.random_range(0..=k_w / 2)),
        );
        let name = format!("l{idx}");
        let k = random_kernel(
            &name,
            [n_o, n_i, k_h, k_w],
            spec,
            r.random_bool(0.5),
            &mut r,
        );
        let layer = match r.random_range(0..5) {
            0 => Layer::Conv(k),
            1 => {
                let ordering = Ordering::ALL[r.random_range(0..2)];
                let t = r.random_range(1..=k.kernel_area());
                Layer::Decoupled(decouple_topt(&k, ordering, t).unwrap())
            }
            kind => {
                let pair = if kind == 3 {
                    let max = (n_i * k_h).min(n_o * k_w);
                    spatial_decompose(&k, r.random_range(1..=max)).unwrap()
                } else {
                    let max = n_o.min(n_i * k_h * k_w);
                    channel_decompose(&k, r.random_range(1..=max)).unwrap()
                };
                if kind == 4 {
                    let first = decouple_stage(pair.first(), &mut r);
                    let second = decouple_stage(pair.second(), &mut r);
                    Layer::Pair(
                        DecomposedPair::new(pair.name(), pair.kind(), first, second).unwrap(),
                    )
                } else {
                    Layer::Pair(pair)
                }
            }
        };
        let input_hw = r
            .random_bool(0.2)
            .then(|| (r.random_range(5..=12), r.random_range(5..=12)));
        layers.push(ModelLayer {
            layer,
            input_channels: override_channels.then_some(n_i),
            input_hw,
        });
        channels = n_o;
    }
    Model::new(format!("random{seed}"), [in_c, 12, 12], layers)
}

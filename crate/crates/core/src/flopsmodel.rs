//! Theoretical operation counts.
//!
//! One FLOP is one multiply-accumulate; bias additions are not counted.
//! `(H, W)` in every formula is the output size of the stage being costed,
//! except the pointwise stage of a PW+DW block, which runs at input
//! resolution because stride and padding sit on the depthwise stage.

use serde::{Deserialize, Serialize};

use crate::complements::DecomposedPair;
use crate::decouple::{ConvKernel, DecoupledKernel, Ordering};
use crate::error::{Error, Result};
use crate::model::{Layer, Model, Stage};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: String,
    pub flops: u64,
    pub output_hw: (usize, usize),
}

fn product(factors: &[usize]) -> u64 {
    factors.iter().map(|&f| f as u64).product()
}

/// `H·W·n_o·n_i·k_h·k_w`.
pub fn cost_regular(k: &ConvKernel, in_hw: (usize, usize)) -> Result<LayerCost> {
    let (h, w) = k
        .spec()
        .output_hw(in_hw, k.kernel_hw())
        .map_err(|e| e.in_layer(k.name()))?;
    let [n_o, n_i, k_h, k_w] = k.shape();
    Ok(LayerCost {
        name: k.name().to_string(),
        kind: "conv".into(),
        flops: product(&[h, w, n_o, n_i, k_h, k_w]),
        output_hw: (h, w),
    })
}

/// `T · H·W·(n_i·k_h·k_w + n_i·n_o)` for DW+PW and
/// `T · (H_in·W_in·n_i·n_o + H·W·n_o·k_h·k_w)` for PW+DW.
pub fn cost_decoupled(dk: &DecoupledKernel, in_hw: (usize, usize)) -> Result<LayerCost> {
    let [n_o, n_i, k_h, k_w] = dk.source_shape();
    let (h, w) = dk
        .spec()
        .output_hw(in_hw, (k_h, k_w))
        .map_err(|e| e.in_layer(dk.name()))?;
    let per_block = match dk.ordering() {
        Ordering::DwPw => product(&[h, w, n_i, k_h, k_w]) + product(&[h, w, n_i, n_o]),
        Ordering::PwDw => product(&[in_hw.0, in_hw.1, n_i, n_o]) + product(&[h, w, n_o, k_h, k_w]),
    };
    Ok(LayerCost {
        name: dk.name().to_string(),
        kind: "decoupled".into(),
        flops: dk.rank() as u64 * per_block,
        output_hw: (h, w),
    })
}

pub fn cost_stage(stage: &Stage, in_hw: (usize, usize)) -> Result<LayerCost> {
    match stage {
        Stage::Conv(k) => cost_regular(k, in_hw),
        Stage::Decoupled(d) => cost_decoupled(d, in_hw),
    }
}

/// Sum of both stages, the second costed at the first stage's output size.
pub fn cost_pair(p: &DecomposedPair, in_hw: (usize, usize)) -> Result<LayerCost> {
    let first = cost_stage(p.first(), in_hw)?;
    let second = cost_stage(p.second(), first.output_hw)?;
    Ok(LayerCost {
        name: p.name().to_string(),
        kind: "pair".into(),
        flops: first.flops + second.flops,
        output_hw: second.output_hw,
    })
}

pub fn cost_layer(layer: &Layer, in_hw: (usize, usize)) -> Result<LayerCost> {
    match layer {
        Layer::Conv(k) => cost_regular(k, in_hw),
        Layer::Decoupled(d) => cost_decoupled(d, in_hw),
        Layer::Pair(p) => cost_pair(p, in_hw),
    }
}

/// `orig.flops / new.flops`.
pub fn speedup_ratio(orig: &LayerCost, new: &LayerCost) -> Result<f64> {
    if new.flops == 0 {
        return Err(Error::InvalidArgument(format!(
            "layer `{}` has zero cost; speedup undefined",
            new.name
        )));
    }
    Ok(orig.flops as f64 / new.flops as f64)
}

/// Cost of every layer, with spatial sizes propagated through the model.
pub fn model_costs(model: &Model) -> Result<Vec<LayerCost>> {
    let dims = model.layer_input_hw()?;
    model
        .layers
        .iter()
        .zip(dims)
        .map(|(entry, hw)| cost_layer(&entry.layer, hw))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerComparison {
    pub layer: String,
    pub kind: String,
    pub flops_orig: u64,
    pub flops_new: u64,
    pub ratio: f64,
}

/// Per-layer and total costs of an original and a transformed model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub layers: Vec<LayerComparison>,
    pub total_orig: u64,
    pub total_new: u64,
    pub ratio: f64,
}

/// Compares two models layer by layer; both must have the same layer count
/// and input geometry.
pub fn compare_models(orig: &Model, new: &Model) -> Result<FlopsReport> {
    if orig.len() != new.len() {
        return Err(Error::InvalidArgument(format!(
            "models have different layer counts ({} vs {})",
            orig.len(),
            new.len()
        )));
    }
    let a = model_costs(orig)?;
    let b = model_costs(new)?;
    let mut layers = Vec::with_capacity(a.len());
    for (o, n) in a.iter().zip(&b) {
        layers.push(LayerComparison {
            layer: o.name.clone(),
            kind: n.kind.clone(),
            flops_orig: o.flops,
            flops_new: n.flops,
            ratio: speedup_ratio(o, n)?,
        });
    }
    let total_orig = a.iter().map(|c| c.flops).sum();
    let total_new: u64 = b.iter().map(|c| c.flops).sum();
    let ratio = if total_new == 0 {
        1.0
    } else {
        total_orig as f64 / total_new as f64
    };
    Ok(FlopsReport {
        layers,
        total_orig,
        total_new,
        ratio,
    })
}

impl FlopsReport {
    /// Report of a model against itself.
    pub fn single(model: &Model) -> Result<Self> {
        compare_models(model, model)
    }

    /// CSV with columns `layer,kind,flops_orig,flops_new,ratio`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["layer", "kind", "flops_orig", "flops_new", "ratio"])
            .expect("in-memory write");
        for l in &self.layers {
            w.write_record([
                l.layer.clone(),
                l.kind.clone(),
                l.flops_orig.to_string(),
                l.flops_new.to_string(),
                l.ratio.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Formats a FLOP count as e.g. `15.35G`.
pub fn human_flops(flops: u64) -> String {
    let f = flops as f64;
    if f >= 1e9 {
        format!("{:.2}G", f / 1e9)
    } else if f >= 1e6 {
        format!("{:.2}M", f / 1e6)
    } else if f >= 1e3 {
        format!("{:.2}K", f / 1e3)
    } else {
        flops.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convref::ConvSpec;
    use crate::decouple::{decouple_topt, SeparableBlock};
    use crate::tensor::Tensor4;

    fn kernel(shape: [usize; 4], spec: ConvSpec) -> ConvKernel {
        ConvKernel::new("k", Tensor4::zeros(shape), None, spec).unwrap()
    }

    fn decoupled(
        shape: [usize; 4],
        ordering: Ordering,
        t: usize,
        spec: ConvSpec,
    ) -> DecoupledKernel {
        let [n_o, n_i, k_h, k_w] = shape;
        let dw = if ordering == Ordering::DwPw { n_i } else { n_o };
        let blocks = (0..t)
            .map(|_| SeparableBlock {
                pointwise: Tensor4::zeros([n_o, n_i, 1, 1]),
                depthwise: Tensor4::zeros([dw, 1, k_h, k_w]),
            })
            .collect();
        DecoupledKernel::new("d", ordering, blocks, None, spec, shape).unwrap()
    }

    #[test]
    fn regular_examples() {
        let c = cost_regular(&kernel([4, 3, 3, 3], ConvSpec::default()), (4, 4)).unwrap();
        assert_eq!((c.flops, c.output_hw), (432, (2, 2)));
        let c = cost_regular(&kernel([1, 1, 1, 1], ConvSpec::default()), (1, 1)).unwrap();
        assert_eq!(c.flops, 1);
    }

    #[test]
    fn decoupled_examples() {
        let pad = ConvSpec::new((1, 1), (1, 1));
        let c = cost_decoupled(&decoupled([2, 2, 3, 3], Ordering::DwPw, 1, pad), (1, 1)).unwrap();
        assert_eq!(c.flops, 22);
        let c = cost_decoupled(&decoupled([2, 2, 3, 3], Ordering::PwDw, 1, pad), (1, 1)).unwrap();
        assert_eq!(c.flops, 22);
    }

    #[test]
    fn strided_pwdw_pointwise_runs_at_input_resolution() {
        let spec = ConvSpec::new((2, 2), (1, 1));
        let c = cost_decoupled(&decoupled([8, 4, 3, 3], Ordering::PwDw, 2, spec), (8, 8)).unwrap();
        assert_eq!(c.output_hw, (4, 4));
        assert_eq!(c.flops, 2 * (64 * 4 * 8 + 16 * 8 * 9));
        let c = cost_decoupled(&decoupled([8, 4, 3, 3], Ordering::DwPw, 2, spec), (8, 8)).unwrap();
        assert_eq!(c.flops, 2 * (16 * 4 * 9 + 16 * 4 * 8));
    }

    #[test]
    fn linear_in_block_count() {
        let spec = ConvSpec::new((1, 1), (1, 1));
        for ordering in Ordering::ALL {
            let one = cost_decoupled(&decoupled([16, 8, 3, 3], ordering, 1, spec), (7, 7)).unwrap();
            for t in 2..=9 {
                let c =
                    cost_decoupled(&decoupled([16, 8, 3, 3], ordering, t, spec), (7, 7)).unwrap();
                assert_eq!(c.flops, t as u64 * one.flops);
            }
        }
    }

    #[test]
    fn truncation_strictly_reduces_cost() {
        let w = Tensor4::from_fn([16, 8, 3, 3], |[o, i, h, x]| {
            ((o * 7 + i * 3 + h * 5 + x) % 11) as f64 - 5.0
        });
        let k = ConvKernel::new("k", w, None, ConvSpec::new((1, 1), (1, 1))).unwrap();
        for ordering in Ordering::ALL {
            let exact = crate::decouple::decouple_exact(&k, ordering).unwrap();
            let full = cost_decoupled(&exact, (8, 8)).unwrap().flops;
            for t in 1..exact.rank() {
                let top = decouple_topt(&k, ordering, t).unwrap();
                assert!(cost_decoupled(&top, (8, 8)).unwrap().flops < full);
            }
        }
    }

    #[test]
    fn speedup_needs_positive_denominator() {
        let a = LayerCost {
            name: "a".into(),
            kind: "conv".into(),
            flops: 10,
            output_hw: (1, 1),
        };
        let mut b = a.clone();
        b.flops = 0;
        assert!(speedup_ratio(&a, &b).is_err());
        assert_eq!(speedup_ratio(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn human_formatting() {
        assert_eq!(human_flops(15_346_630_656), "15.35G");
        assert_eq!(human_flops(2_500_000), "2.50M");
        assert_eq!(human_flops(12), "12");
    }
}

use netdecouple::convref::ConvSpec;
use netdecouple::decouple::{ConvKernel, DecoupledKernel, Ordering, SeparableBlock};
use netdecouple::flopsmodel::{
    cost_decoupled, cost_regular, model_costs, speedup_ratio, FlopsReport,
};
use netdecouple::model::{Layer, Model, ModelLayer};
use netdecouple::tensor::Tensor4;

fn conv(name: &str, shape: [usize; 4], spec: ConvSpec) -> Layer {
    Layer::Conv(ConvKernel::new(name, Tensor4::zeros(shape), None, spec).unwrap())
}

fn entry(
    layer: Layer,
    input_channels: Option<usize>,
    input_hw: Option<(usize, usize)>,
) -> ModelLayer {
    ModelLayer {
        layer,
        input_channels,
        input_hw,
    }
}

fn vgg16() -> Model {
    let same = ConvSpec::new((1, 1), (1, 1));
    let cfg: [(&str, usize, usize, usize); 13] = [
        ("conv1_1", 3, 64, 224),
        ("conv1_2", 64, 64, 224),
        ("conv2_1", 64, 128, 112),
        ("conv2_2", 128, 128, 112),
        ("conv3_1", 128, 256, 56),
        ("conv3_2", 256, 256, 56),
        ("conv3_3", 256, 256, 56),
        ("conv4_1", 256, 512, 28),
        ("conv4_2", 512, 512, 28),
        ("conv4_3", 512, 512, 28),
        ("conv5_1", 512, 512, 14),
        ("conv5_2", 512, 512, 14),
        ("conv5_3", 512, 512, 14),
    ];
    let layers = cfg
        .iter()
        .map(|&(name, n_i, n_o, hw)| {
            entry(conv(name, [n_o, n_i, 3, 3], same), None, Some((hw, hw)))
        })
        .collect();
    Model::new("vgg16", [3, 224, 224], layers)
}

fn resnet18() -> Model {
    let same = ConvSpec::new((1, 1), (1, 1));
    let down = ConvSpec::new((2, 2), (1, 1));
    let mut layers = vec![entry(
        conv("conv1", [64, 3, 7, 7], ConvSpec::new((2, 2), (3, 3))),
        None,
        None,
    )];
    // max-pool 112 -> 56
    let mut hw = 56;
    let mut c = 64;
    for (stage, width) in [(1, 64), (2, 128), (3, 256), (4, 512)] {
        for block in 0..2 {
            let prefix = format!("layer{stage}.{block}");
            let strided = stage > 1 && block == 0;
            let in_hw = hw;
            let in_c = c;
            if strided {
                hw /= 2;
            }
            let spec = if strided { down } else { same };
            layers.push(entry(
                conv(&format!("{prefix}.conv1"), [width, in_c, 3, 3], spec),
                Some(in_c),
                Some((in_hw, in_hw)),
            ));
            layers.push(entry(
                conv(&format!("{prefix}.conv2"), [width, width, 3, 3], same),
                None,
                None,
            ));
            if strided {
                layers.push(entry(
                    conv(
                        &format!("{prefix}.downsample"),
                        [width, in_c, 1, 1],
                        ConvSpec::new((2, 2), (0, 0)),
                    ),
                    Some(in_c),
                    Some((in_hw, in_hw)),
                ));
            }
            c = width;
        }
    }
    Model::new("resnet18", [3, 224, 224], layers)
}

#[test]
fn vgg16_total() {
    let m = vgg16();
    let costs = model_costs(&m).unwrap();
    let total: u64 = costs.iter().map(|c| c.flops).sum();
    assert_eq!(total, 15_346_630_656);
    assert!((total as f64 / 15.35e9 - 1.0).abs() < 0.01);
    assert_eq!(FlopsReport::single(&m).unwrap().total_orig, total);
}

#[test]
fn resnet18_total() {
    let m = resnet18();
    m.check_channels().unwrap();
    let costs = model_costs(&m).unwrap();
    assert_eq!(costs.len(), 20);
    assert_eq!(costs.last().unwrap().output_hw, (7, 7));
    let convs: u64 = costs.iter().map(|c| c.flops).sum();
    assert_eq!(convs, 1_813_561_344);
    // plus the 512 -> 1000 classifier
    let total = convs + 512 * 1000;
    assert!((total as f64 / 1.83e9 - 1.0).abs() < 0.02);
}

fn decoupled(shape: [usize; 4], ordering: Ordering, t: usize, spec: ConvSpec) -> DecoupledKernel {
    let [n_o, n_i, k_h, k_w] = shape;
    let dw = match ordering {
        Ordering::DwPw => n_i,
        Ordering::PwDw => n_o,
    };
    let blocks = (0..t)
        .map(|_| SeparableBlock {
            pointwise: Tensor4::zeros([n_o, n_i, 1, 1]),
            depthwise: Tensor4::zeros([dw, 1, k_h, k_w]),
        })
        .collect();
    DecoupledKernel::new("d", ordering, blocks, None, spec, shape).unwrap()
}

#[test]
fn conv3_1_like_ratios() {
    let same = ConvSpec::new((1, 1), (1, 1));
    let shape = [256, 128, 3, 3];
    let k = ConvKernel::new("conv3_1", Tensor4::zeros(shape), None, same).unwrap();
    let orig = cost_regular(&k, (56, 56)).unwrap();
    let dwpw = cost_decoupled(&decoupled(shape, Ordering::DwPw, 4, same), (56, 56)).unwrap();
    let pwdw = cost_decoupled(&decoupled(shape, Ordering::PwDw, 4, same), (56, 56)).unwrap();
    let r = speedup_ratio(&orig, &dwpw).unwrap();
    assert!((r - 9.0 / (4.0 * (9.0 / 256.0 + 1.0))).abs() < 1e-12);
    let r = speedup_ratio(&orig, &pwdw).unwrap();
    assert!((r - 9.0 / (4.0 * (9.0 / 128.0 + 1.0))).abs() < 1e-12);
}

#[test]
fn exact_full_rank_ratio_is_below_one() {
    let same = ConvSpec::new((1, 1), (1, 1));
    let shape = [512, 512, 3, 3];
    let k = ConvKernel::new("k", Tensor4::zeros(shape), None, same).unwrap();
    let orig = cost_regular(&k, (14, 14)).unwrap();
    let new = cost_decoupled(&decoupled(shape, Ordering::DwPw, 9, same), (14, 14)).unwrap();
    let r = speedup_ratio(&orig, &new).unwrap();
    assert!((r - 512.0 / 521.0).abs() < 1e-12);
    assert!(r < 1.0);
}

#[test]
fn large_width_limit() {
    let same = ConvSpec::new((1, 1), (1, 1));
    let shape = [4096, 16, 3, 3];
    let k = ConvKernel::new("k", Tensor4::zeros(shape), None, same).unwrap();
    let orig = cost_regular(&k, (4, 4)).unwrap();
    let new = cost_decoupled(&decoupled(shape, Ordering::DwPw, 2, same), (4, 4)).unwrap();
    let r = speedup_ratio(&orig, &new).unwrap();
    assert!((r / 4.5 - 1.0).abs() < 0.005);
}

//! Gradient checks shared by the `gradients` and `acceptance` targets: each
//! returns the worst relative error over ten seeds.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use spikeflow::diff::check::max_gradient_error;
use spikeflow::diff::{Bound, Graph, ParamStore, Tensor, Var};
use spikeflow::loss::{self, FusionMode, LossConfig, WeightHead};
use spikeflow::representation::{Representation, TmrConfig};
use spikeflow::{rng, Result, SpikeStream};

const H: f64 = 1e-6;

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = r.random_range(0.05..1.0);
        if r.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Flow whose sample points never land on integer coordinates.
fn fractional_flow(r: &mut ChaCha8Rng, shape: &[usize], max_int: i32) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(-max_int..=max_int) as f64 + r.random_range(0.15..0.85))
}

/// Reduces `out` to a scalar through a fixed random projection.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut r = rng::stream(seed, "projection");
    let w = g.constant(uniform(&mut r, &g.shape(out).to_vec(), -1.0, 1.0));
    let prod = g.mul(out, w)?;
    g.sum_all(prod)
}

pub const SEEDS: u64 = 10;
pub const TOL: f64 = 1e-4;

fn check(
    name: &str,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut r = rng::stream(seed, name);
        let inputs = make(&mut r);
        let err = max_gradient_error(&|g: &mut Graph<f64>, v: &[Var]| f(g, v), &inputs, H).unwrap();
        worst = worst.max(err);
    }
    worst
}

pub fn conv1d_dilated() -> f64 {
    let mut worst = 0.0f64;
    for dilation in [1usize, 2, 4, 8] {
        worst = worst.max(check(
            &format!("conv1d_d{dilation}"),
            |g, v| {
                let y = g.conv1d_dilated_bias(v[0], v[1], v[2], dilation)?;
                project(g, y, dilation as u64)
            },
            |r| {
                vec![
                    uniform(r, &[3, 21, 2], -1.0, 1.0),
                    uniform(r, &[4, 3, 3], -1.0, 1.0),
                    uniform(r, &[4, 1, 1], -1.0, 1.0),
                ]
            },
        ));
    }
    worst.max(check(
        "conv1d_nobias",
        |g, v| {
            let y = g.conv1d_dilated(v[0], v[1], 3)?;
            project(g, y, 7)
        },
        |r| vec![uniform(r, &[2, 17], -1.0, 1.0), uniform(r, &[3, 2, 3], -1.0, 1.0)],
    ))
}

pub fn conv2d() -> f64 {
    let mut worst = 0.0f64;
    for stride in [1usize, 2] {
        worst = worst.max(check(
            &format!("conv2d_s{stride}"),
            |g, v| {
                let y = g.conv2d(v[0], v[1], stride)?;
                project(g, y, stride as u64)
            },
            |r| vec![uniform(r, &[3, 6, 8], -1.0, 1.0), uniform(r, &[2, 3, 3, 3], -1.0, 1.0)],
        ));
    }
    worst
}

pub fn matmul() -> f64 {
    check(
        "matmul",
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 1)
        },
        |r| vec![uniform(r, &[3, 5], -1.0, 1.0), uniform(r, &[5, 4], -1.0, 1.0)],
    )
}

pub fn sigmoid() -> f64 {
    check(
        "sigmoid",
        |g, v| {
            let y = g.sigmoid(v[0]);
            project(g, y, 2)
        },
        |r| vec![uniform(r, &[4, 5], -4.0, 4.0)],
    )
}

pub fn leaky_relu() -> f64 {
    check(
        "leaky_relu",
        |g, v| {
            let y = g.leaky_relu(v[0], 0.1);
            project(g, y, 3)
        },
        |r| vec![away_from_zero(r, &[4, 6])],
    )
}

pub fn mean() -> f64 {
    check(
        "mean",
        |g, v| {
            let a = g.mean_axes(v[0], &[1])?;
            let a = project(g, a, 4)?;
            let b = g.mean_all(v[0])?;
            g.add(a, b)
        },
        |r| vec![uniform(r, &[3, 7, 2], -1.0, 1.0)],
    )
}

pub fn concat_and_narrow() -> f64 {
    check(
        "concat",
        |g, v| {
            let c = g.concat(&[v[0], v[1]], 0)?;
            let n = g.narrow(c, 2, 1, 3)?;
            project(g, n, 5)
        },
        |r| vec![uniform(r, &[2, 3, 5], -1.0, 1.0), uniform(r, &[3, 3, 5], -1.0, 1.0)],
    )
}

pub fn upsample() -> f64 {
    check(
        "upsample",
        |g, v| {
            let y = g.upsample_bilinear2x(v[0])?;
            project(g, y, 6)
        },
        |r| vec![uniform(r, &[2, 4, 5], -1.0, 1.0)],
    )
}

pub fn warp_bilinear() -> f64 {
    check(
        "warp",
        |g, v| {
            let (y, _) = g.warp_bilinear(v[0], v[1])?;
            project(g, y, 7)
        },
        |r| vec![uniform(r, &[2, 6, 7], -1.0, 1.0), fractional_flow(r, &[2, 6, 7], 2)],
    )
}

pub fn charbonnier() -> f64 {
    check(
        "charbonnier",
        |g, v| {
            let y = g.charbonnier(v[0], 1e-3, 0.45);
            project(g, y, 8)
        },
        |r| vec![away_from_zero(r, &[5, 5])],
    )
}

pub fn cost_volume_and_normalization() -> f64 {
    check(
        "correlation",
        |g, v| {
            let a = g.l2_normalize_channels(v[0], 1e-6)?;
            let b = g.l2_normalize_channels(v[1], 1e-6)?;
            let c = g.correlation(a, b, 2)?;
            project(g, c, 9)
        },
        |r| vec![uniform(r, &[3, 5, 6], -1.0, 1.0), uniform(r, &[3, 5, 6], -1.0, 1.0)],
    )
}

pub fn softmax() -> f64 {
    check(
        "softmax",
        |g, v| {
            let y = g.softmax_channels(v[0])?;
            project(g, y, 10)
        },
        |r| vec![uniform(r, &[4, 3, 3], -2.0, 2.0)],
    )
}

/// Parameters of a fresh store, jittered so no unit sits at a kink.
fn store_params(store: &ParamStore<f64>, r: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    store
        .iter()
        .map(|(_, t)| {
            let jitter: Vec<f64> = (0..t.numel()).map(|_| r.random_range(-0.3..0.3)).collect();
            Tensor::from_fn(t.shape(), |i| t.data()[i] + jitter[i])
        })
        .collect()
}

pub fn full_representation() -> f64 {
    let mut worst = 0.0f64;
    let cfg = TmrConfig {
        window_half: 17,
        ..TmrConfig::default()
    };
    for seed in 0..SEEDS {
        let mut r = rng::stream(seed, "representation");
        let mut store = ParamStore::<f64>::new();
        let rep = Representation::new(cfg.clone(), &mut store, &mut r).unwrap();
        let stream = SpikeStream::from_fn(2, 3, 50, 1e-3, |_, _, _| r.random_bool(0.3)).unwrap();
        let window = stream.window(25, cfg.window_half).unwrap();
        let params = store_params(&store, &mut r);
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let p = Bound::from_vars(v.to_vec());
            let out = rep.forward(g, &p, &window)?;
            let a = project(g, out.features, seed)?;
            let b = project(g, out.attention, seed + 100)?;
            g.add(a, b)
        };
        let err = max_gradient_error(&f, &params, H).unwrap();
        worst = worst.max(err);
    }
    worst
}

pub fn full_loss() -> f64 {
    let mut worst = 0.0f64;
    let (h, w) = (6, 8);
    for seed in 0..SEEDS {
        let mut r = rng::stream(seed, "loss");
        let mut store = ParamStore::<f64>::new();
        let head = WeightHead::new(&mut store, &mut r).unwrap();
        let mut inputs = store_params(&store, &mut r);
        let n_head = inputs.len();
        inputs.push(fractional_flow(&mut r, &[2, h, w], 1));
        inputs.push(fractional_flow(&mut r, &[2, h, w], 1));
        let terms = |r: &mut ChaCha8Rng| {
            let values = uniform(r, &[4, h, w], 0.05, 0.95);
            // interval terms invalid at a few pixels
            let mask = Tensor::from_fn(&[4, h, w], |i| if i < 2 * h * w || r.random_bool(0.8) { 1.0 } else { 0.0 });
            (values, mask)
        };
        let t0 = terms(&mut r);
        let t1 = terms(&mut r);
        let plain = LossConfig {
            fusion: FusionMode::Full,
            static_baseline: false,
            ..LossConfig::default()
        };
        let total = |g: &mut Graph<f64>, v: &[Var]| {
            let p = Bound::from_vars(v[..n_head].to_vec());
            Ok(loss::total_loss(g, &p, &head, v[n_head], v[n_head + 1], &t0, &t1, &plain)?.total)
        };
        worst = worst.max(max_gradient_error(&total, &inputs, H).unwrap());

        // with the baseline on the head reads the flows as constants, so
        // the objective is checked against the head parameters only
        let cfg = LossConfig {
            static_baseline: true,
            ..plain
        };
        let (f, fb) = (inputs[n_head].clone(), inputs[n_head + 1].clone());
        let objective = |g: &mut Graph<f64>, v: &[Var]| {
            let p = Bound::from_vars(v.to_vec());
            let (f, fb) = (g.constant(f.clone()), g.constant(fb.clone()));
            Ok(loss::total_loss(g, &p, &head, f, fb, &t0, &t1, &cfg)?.objective)
        };
        worst = worst.max(max_gradient_error(&objective, &inputs[..n_head], H).unwrap());
    }
    worst
}

/// Every check by name, in a fixed order.
pub const ALL: [(&str, fn() -> f64); 14] = [
    ("conv1d_dilated", conv1d_dilated),
    ("conv2d", conv2d),
    ("matmul", matmul),
    ("sigmoid", sigmoid),
    ("leaky_relu", leaky_relu),
    ("mean", mean),
    ("concat_narrow", concat_and_narrow),
    ("upsample", upsample),
    ("warp_bilinear", warp_bilinear),
    ("charbonnier", charbonnier),
    ("correlation", cost_volume_and_normalization),
    ("softmax", softmax),
    ("representation", full_representation),
    ("loss", full_loss),
];

//! Central finite-difference checks of tape gradients, for every
//! differentiable op and for the whole network at a tiny size.
//!
//! The numeric side only ever evaluates forward values.

use crate::error::{Error, Result};
use crate::model::{Crtnet, ModelConfig, PreparedInput};
use crate::tensor::{mix_seed, Rng, Tape, Tensor, Var};
use crate::train::graph_losses;

/// Step for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Denominator floor so that coordinates with near-zero gradient are
/// compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-6;

/// Worst coordinate of one check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub seed: u64,
    pub coordinates: usize,
    pub worst: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.worst < FD_TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

type Graph = dyn for<'a> Fn(&[Var<'a>]) -> Result<Var<'a>>;

fn forward_value(f: &Graph, inputs: &[Tensor]) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    Ok(f(&vars)?.item())
}

/// Compares tape gradients of the scalar `f` against central differences
/// over every coordinate of every input.
pub fn check_graph(name: &str, seed: u64, f: &Graph, inputs: &[Tensor]) -> Result<GradCheck> {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&vars)?;
    if !out.value().is_scalar() {
        return Err(Error::Contract(format!(
            "{name}: checked graph must end in a scalar"
        )));
    }
    tape.backward(out)?;
    let mut worst: f64 = 0.0;
    let mut coordinates = 0;
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*v)
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].numel() {
            let x = inputs[k].data()[i];
            probe[k].data_mut()[i] = x + FD_STEP;
            let plus = forward_value(f, &probe)?;
            probe[k].data_mut()[i] = x - FD_STEP;
            let minus = forward_value(f, &probe)?;
            probe[k].data_mut()[i] = x;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
            coordinates += 1;
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        seed,
        coordinates,
        worst,
    })
}

fn normal(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).expect("positive extents")
}

/// Values kept at least 0.1 away from zero, so ReLU kinks sit far outside
/// the finite-difference step.
fn off_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    normal(shape, rng).map(|v| {
        if v.abs() < 0.1 {
            v.signum() * 0.1 + v
        } else {
            v
        }
    })
}

/// Every differentiable op, each contracted with a random direction so the
/// check covers the full Jacobian-vector product.
pub fn op_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    let mut case = |name: &str, f: &Graph, shapes: &[&[usize]]| -> Result<()> {
        let mut rng = Rng::new(mix_seed(&[seed, out.len() as u64]));
        let inputs: Vec<Tensor> = shapes.iter().map(|s| normal(s, &mut rng)).collect();
        out.push(check_graph(name, seed, f, &inputs)?);
        Ok(())
    };
    case(
        "matmul",
        &|v| v[0].matmul(v[1])?.mul(v[2]).map(|x| x.sum()),
        &[&[3, 4], &[4, 2], &[3, 2]],
    )?;
    case(
        "conv2d",
        &|v| v[0].conv2d(v[1], 1, 1)?.mul(v[2]).map(|x| x.sum()),
        &[&[2, 5, 5], &[3, 2, 3, 3], &[3, 5, 5]],
    )?;
    case(
        "conv2d_strided",
        &|v| v[0].conv2d(v[1], 2, 1)?.mul(v[2]).map(|x| x.sum()),
        &[&[2, 6, 6], &[2, 2, 3, 3], &[2, 3, 3]],
    )?;
    case(
        "channel_bias",
        &|v| v[0].channel_bias(v[1])?.mul(v[2]).map(|x| x.sum()),
        &[&[3, 2, 2], &[3], &[3, 2, 2]],
    )?;
    case(
        "pool_avg",
        &|v| v[0].pool_avg(2, 2)?.mul(v[1]).map(|x| x.sum()),
        &[&[2, 4, 4], &[2, 2, 2]],
    )?;
    case(
        "pool_max",
        &|v| v[0].pool_max(2, 2)?.mul(v[1]).map(|x| x.sum()),
        &[&[2, 4, 4], &[2, 2, 2]],
    )?;
    case(
        "add",
        &|v| v[0].add(v[1])?.mul(v[2]).map(|x| x.sum()),
        &[&[2, 3], &[2, 3], &[2, 3]],
    )?;
    case(
        "sub",
        &|v| v[0].sub(v[1])?.mul(v[2]).map(|x| x.sum()),
        &[&[2, 3], &[2, 3], &[2, 3]],
    )?;
    case(
        "mul",
        &|v| v[0].mul(v[1])?.mul(v[2]).map(|x| x.sum()),
        &[&[2, 3], &[2, 3], &[2, 3]],
    )?;
    case(
        "affine",
        &|v| v[0].affine(-1.5, 0.3).mul(v[1]).map(|x| x.sum()),
        &[&[4], &[4]],
    )?;
    case(
        "scale_by",
        &|v| v[0].scale_by(v[1])?.mul(v[2]).map(|x| x.sum()),
        &[&[4], &[1], &[4]],
    )?;
    case(
        "sigmoid",
        &|v| v[0].sigmoid().mul(v[1]).map(|x| x.sum()),
        &[&[5], &[5]],
    )?;
    case(
        "softmax",
        &|v| v[0].softmax(1)?.mul(v[1]).map(|x| x.sum()),
        &[&[2, 5], &[2, 5]],
    )?;
    case(
        "layernorm",
        &|v| v[0].layernorm(v[1], v[2], 1e-5)?.mul(v[3]).map(|x| x.sum()),
        &[&[3, 6], &[6], &[6], &[3, 6]],
    )?;
    case(
        "cross_entropy",
        &|v| v[0].softmax(0)?.cross_entropy(2),
        &[&[5]],
    )?;
    case(
        "add_bias",
        &|v| v[0].add_bias(v[1])?.mul(v[2]).map(|x| x.sum()),
        &[&[3, 4], &[4], &[3, 4]],
    )?;
    case(
        "transpose",
        &|v| v[0].transpose()?.mul(v[1]).map(|x| x.sum()),
        &[&[2, 3], &[3, 2]],
    )?;
    case(
        "reshape",
        &|v| v[0].reshape(&[3, 2])?.mul(v[1]).map(|x| x.sum()),
        &[&[2, 3], &[3, 2]],
    )?;
    case(
        "slice_cols",
        &|v| v[0].slice_cols(1, 2)?.mul(v[1]).map(|x| x.sum()),
        &[&[3, 4], &[3, 2]],
    )?;
    case(
        "concat_cols",
        &|v| Var::concat_cols(&[v[0], v[1]])?.mul(v[2]).map(|x| x.sum()),
        &[&[2, 3], &[2, 1], &[2, 4]],
    )?;
    case(
        "select_row",
        &|v| v[0].select_row(1)?.mul(v[1]).map(|x| x.sum()),
        &[&[3, 4], &[1, 4]],
    )?;
    case(
        "mean",
        &|v| v[0].mean(0)?.mul(v[1]).map(|x| x.sum()),
        &[&[3, 4], &[4]],
    )?;
    // Inputs kept off the kink for ReLU.
    {
        let mut rng = Rng::new(mix_seed(&[seed, out.len() as u64]));
        let inputs = [off_zero(&[6], &mut rng), normal(&[6], &mut rng)];
        out.push(check_graph(
            "relu",
            seed,
            &|v| v[0].relu().mul(v[1]).map(|x| x.sum()),
            &inputs,
        )?);
    }
    // The same mask on every evaluation: the rng is rebuilt inside the graph.
    {
        let mut rng = Rng::new(mix_seed(&[seed, out.len() as u64]));
        let inputs = [normal(&[8], &mut rng), normal(&[8], &mut rng)];
        let f: &Graph = &move |v| {
            v[0].dropout(0.3, true, &mut Rng::new(seed))?
                .mul(v[1])
                .map(|x| x.sum())
        };
        out.push(check_graph("dropout", seed, f, &inputs)?);
    }
    // Detach: the tape must report no gradient for the detached input; the
    // other input is checked as usual.
    {
        let mut rng = Rng::new(mix_seed(&[seed, out.len() as u64]));
        let inputs = [normal(&[4], &mut rng), normal(&[4], &mut rng)];
        let f: &Graph = &|v| v[0].detach().mul(v[1]).map(|x| x.sum());
        out.push(check_detached("detach", seed, f, &inputs, 0)?);
    }
    Ok(out)
}

/// Like [`check_graph`] but input `frozen` is perturbed only through the
/// detached path, whose derivative the tape must report as zero.
fn check_detached(
    name: &str,
    seed: u64,
    f: &Graph,
    inputs: &[Tensor],
    frozen: usize,
) -> Result<GradCheck> {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    tape.backward(f(&vars)?)?;
    if tape.grad(vars[frozen]).is_some() {
        return Err(Error::Contract(format!(
            "{name}: gradient crossed a detach"
        )));
    }
    let rest: Vec<usize> = (0..inputs.len()).filter(|&k| k != frozen).collect();
    let mut worst: f64 = 0.0;
    let mut coordinates = 0;
    let mut probe = inputs.to_vec();
    for &k in &rest {
        let analytic = tape
            .grad(vars[k])
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].numel() {
            let x = inputs[k].data()[i];
            probe[k].data_mut()[i] = x + FD_STEP;
            let plus = forward_value(f, &probe)?;
            probe[k].data_mut()[i] = x - FD_STEP;
            let minus = forward_value(f, &probe)?;
            probe[k].data_mut()[i] = x;
            worst = worst.max(relative_error(
                analytic.data()[i],
                (plus - minus) / (2.0 * FD_STEP),
            ));
            coordinates += 1;
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        seed,
        coordinates,
        worst,
    })
}

/// Configuration of the end-to-end check: `S=16, D=8, H=W=2, X=1`, two
/// heads, three classes. Detachment is off so that the tape gradient is the
/// true derivative of the summed losses.
pub fn model_check_config() -> ModelConfig {
    ModelConfig {
        detach_target_heads: false,
        ..ModelConfig::tiny()
    }
}

/// Every parameter coordinate of a freshly initialized tiny network against
/// central differences of `loss_t + loss_tc + loss_p`, with dropout active
/// under a fixed mask.
pub fn model_check(seed: u64) -> Result<GradCheck> {
    let config = model_check_config();
    let mut rng = Rng::new(mix_seed(&[seed, 1]));
    let mut model = Crtnet::new(config.clone(), &mut rng)?;
    // Non-zero biases and positions so no coordinate is trivially zero.
    for t in model.params.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.05 * rng.normal();
        }
    }
    let s = config.image_side;
    let image =
        |rng: &mut Rng| Tensor::new(&[3, s, s], (0..3 * s * s).map(|_| rng.uniform()).collect());
    let input = PreparedInput {
        target: image(&mut rng)?,
        context: image(&mut rng)?,
        cell: rng.below(config.tokens()),
    };
    let label = rng.below(config.num_classes);
    let dropout_seed = mix_seed(&[seed, 2]);

    let loss = |m: &Crtnet| -> Result<f64> {
        let tape = Tape::new();
        let bound = m.bind(&tape, false);
        let graph = m.forward(&tape, &bound, &input, &mut Rng::new(dropout_seed), true)?;
        Ok(graph_losses(&graph, label)?.total.item())
    };

    let tape = Tape::new();
    let bound = model.bind(&tape, true);
    let graph = model.forward(&tape, &bound, &input, &mut Rng::new(dropout_seed), true)?;
    tape.backward(graph_losses(&graph, label)?.total)?;
    let analytic = bound.grads();

    let mut worst: f64 = 0.0;
    let mut coordinates = 0;
    let mut probe = model.clone();
    for (k, g) in analytic.iter().enumerate() {
        for i in 0..g.numel() {
            let x = model.params.tensors().nth(k).expect("same layout").data()[i];
            let set = |m: &mut Crtnet, v: f64| {
                m.params
                    .tensors_mut()
                    .nth(k)
                    .expect("same layout")
                    .data_mut()[i] = v
            };
            set(&mut probe, x + FD_STEP);
            let plus = loss(&probe)?;
            set(&mut probe, x - FD_STEP);
            let minus = loss(&probe)?;
            set(&mut probe, x);
            worst = worst.max(relative_error(
                g.data()[i],
                (plus - minus) / (2.0 * FD_STEP),
            ));
            coordinates += 1;
        }
    }
    Ok(GradCheck {
        name: "crtnet_tiny".into(),
        seed,
        coordinates,
        worst,
    })
}

/// The op suite and the model check for each seed.
pub fn full_suite(seeds: impl IntoIterator<Item = u64>) -> Result<Vec<GradCheck>> {
    let mut all = Vec::new();
    for seed in seeds {
        all.extend(op_suite(seed)?);
        all.push(model_check(seed)?);
    }
    Ok(all)
}

//! Finite-difference verification of every gradient rule.
//!
//! Each case evaluates an op on fixed random 64-bit inputs, contracts its
//! output with fixed random weights `R` to get the scalar `Σ op(x)·R`, and
//! compares the reverse-mode gradient of that scalar with central
//! differences. The error of one input is `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞)`; a
//! case reports the worst input.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{is_trainable_name, ModelConfig, ModelParams, UNetMobileNetV2};
use crate::seed::derive_seed;
use crate::tensor::{Activation, BatchNormMode, Conv2dParams, GradFn, Graph, Tensor, Var};
use crate::train::dice_loss;

pub const OP_TOLERANCE: f64 = 1e-6;
pub const END_TO_END_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;
const END_TO_END_STEP: f64 = 1e-5;
const MIN_STEP: f64 = 1e-9;
pub const SUITE_SEED: u64 = 0x6772_6164;

type Builder = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// One op under test.
pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    /// Inputs that are differentiated; the rest enter as constants.
    pub wrt: Vec<bool>,
    pub tolerance: f64,
    build: Box<Builder>,
}

impl GradCase {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Tensor<f64>>,
        build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        let wrt = vec![true; inputs.len()];
        Self {
            name: name.into(),
            inputs,
            wrt,
            tolerance: OP_TOLERANCE,
            build: Box::new(build),
        }
    }

    pub fn constant_inputs(mut self, indices: &[usize]) -> Self {
        for &i in indices {
            self.wrt[i] = false;
        }
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpCheck {
    pub op: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coordinates: usize,
    /// Sampled coordinates discarded because every probe step crossed an
    /// activation kink.
    pub skipped: usize,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradcheckReport {
    pub checks: Vec<OpCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(OpCheck::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &OpCheck> {
        self.checks.iter().filter(|c| !c.passed())
    }

    pub fn get(&self, op: &str) -> Option<&OpCheck> {
        self.checks.iter().find(|c| c.op == op)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{:<20} max_rel_error={:.3e} tol={:.0e} {}",
                c.op,
                c.max_rel_error,
                c.tolerance,
                if c.passed() { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    /// S=32 end-to-end network, 20 sampled weights.
    Tiny,
    /// S=64 end-to-end network, 60 sampled weights.
    Small,
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Scale::Tiny),
            "small" => Ok(Scale::Small),
            other => Err(Error::InvalidArgument(format!(
                "unknown scale `{other}` (tiny or small)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub scale: Scale,
    pub seed: u64,
    /// Skews the gradient of the named op by 1%, to confirm the checker
    /// catches a broken rule.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            scale: Scale::Tiny,
            seed: SUITE_SEED,
            corrupt: None,
        }
    }
}

/// Forward identity whose backward scales the gradient.
struct SkewGrad(f64);

impl GradFn<f64> for SkewGrad {
    fn name(&self) -> &str {
        "skew_grad"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<f64>],
        _output: &Tensor<f64>,
        grad_output: &Tensor<f64>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<f64>>>> {
        Ok(vec![Some(grad_output.map(|g| g * self.0))])
    }
}

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    Tensor::init(shape, crate::tensor::InitScheme::Uniform { lo, hi }, seed)
}

/// Uniform values kept at least `margin` away from every point in `kinks`.
fn away_from(
    shape: &[usize],
    lo: f64,
    hi: f64,
    kinks: &[f64],
    margin: f64,
    seed: u64,
) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.random_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() >= margin) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("extent")
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = max_abs(analytic).max(max_abs(numeric));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn contracted(
    case: &GradCase,
    inputs: &[Tensor<f64>],
    weights: &Tensor<f64>,
    skew: Option<f64>,
) -> Result<(Graph<f64>, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(&case.wrt)
        .map(|(t, &w)| g.leaf(t.clone(), w))
        .collect();
    let mut y = (case.build)(&mut g, &vars)?;
    if let Some(factor) = skew {
        let value = g.value(y).clone();
        y = g.record(&[y], value, Box::new(SkewGrad(factor)));
    }
    if g.shape(y) != weights.shape() {
        return Err(Error::shape(
            "gradcheck",
            "output",
            format!("{:?} vs {:?}", g.shape(y), weights.shape()),
        ));
    }
    let r = g.constant(weights.clone());
    let prod = g.mul(y, r)?;
    let obj = g.sum(prod);
    Ok((g, vars, obj))
}

/// Runs one case against central differences.
pub fn check_case(case: &GradCase, seed: u64, skew: Option<f64>) -> Result<OpCheck> {
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = case.inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = (case.build)(&mut g, &vars)?;
        g.shape(y).to_vec()
    };
    let weights = random(
        &out_shape,
        -1.0,
        1.0,
        derive_seed(seed, &[case.name.as_bytes(), b"R"]),
    );
    let (mut g, vars, obj) = contracted(case, &case.inputs, &weights, skew)?;
    g.backward(obj)?;

    let f = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let (g, _, obj) = contracted(case, inputs, &weights, None)?;
        Ok(g.value(obj).data()[0])
    };
    let mut worst: f64 = 0.0;
    let mut coordinates = 0;
    for (i, &var) in vars.iter().enumerate() {
        if !case.wrt[i] {
            continue;
        }
        let analytic = g.grad_or_zeros(var).into_data();
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut probe = case.inputs.clone();
        for j in 0..analytic.len() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + STEP;
            let up = f(&probe)?;
            probe[i].data_mut()[j] = orig - STEP;
            let down = f(&probe)?;
            probe[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * STEP));
        }
        coordinates += analytic.len();
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(OpCheck {
        op: case.name.clone(),
        max_rel_error: worst,
        tolerance: case.tolerance,
        coordinates,
        skipped: 0,
    })
}

fn bn_case(name: &str, mode: BatchNormMode, s: u64) -> GradCase {
    let c = 3;
    let inputs = vec![
        random(
            &[2, c, 5, 5],
            -2.0,
            2.0,
            derive_seed(s, &[name.as_bytes(), b"x"]),
        ),
        random(&[c], 0.5, 1.5, derive_seed(s, &[name.as_bytes(), b"gamma"])),
        random(&[c], -0.5, 0.5, derive_seed(s, &[name.as_bytes(), b"beta"])),
    ];
    let rm = random(&[c], -0.3, 0.3, derive_seed(s, &[name.as_bytes(), b"rm"]));
    let rv = random(&[c], 0.5, 2.0, derive_seed(s, &[name.as_bytes(), b"rv"]));
    GradCase::new(name, inputs, move |g, v| {
        let (mut m, mut var) = (rm.clone(), rv.clone());
        g.batchnorm2d(v[0], v[1], v[2], &mut m, &mut var, mode, 0.1, 1e-5)
    })
}

fn conv_case(
    name: &str,
    input: [usize; 4],
    weight: [usize; 4],
    bias: bool,
    params: Conv2dParams,
    s: u64,
) -> GradCase {
    let mut inputs = vec![
        random(&input, -1.0, 1.0, derive_seed(s, &[name.as_bytes(), b"x"])),
        random(&weight, -1.0, 1.0, derive_seed(s, &[name.as_bytes(), b"w"])),
    ];
    if bias {
        inputs.push(random(
            &[weight[0]],
            -1.0,
            1.0,
            derive_seed(s, &[name.as_bytes(), b"b"]),
        ));
    }
    GradCase::new(name, inputs, move |g, v| {
        g.conv2d(v[0], v[1], v.get(2).copied(), params)
    })
}

fn activation_case(kind: Activation, lo: f64, hi: f64, kinks: &[f64], s: u64) -> GradCase {
    let name = kind.name();
    let x = away_from(
        &[2, 3, 5, 5],
        lo,
        hi,
        kinks,
        0.05,
        derive_seed(s, &[name.as_bytes()]),
    );
    GradCase::new(name, vec![x], move |g, v| Ok(g.activation(v[0], kind)))
}

/// The per-op cases of the suite.
pub fn op_cases(seed: u64) -> Vec<GradCase> {
    let x =
        |tag: &str, shape: &[usize]| random(shape, -1.0, 1.0, derive_seed(seed, &[tag.as_bytes()]));
    let mut cases = vec![
        conv_case(
            "conv2d",
            [2, 3, 5, 5],
            [4, 3, 3, 3],
            true,
            Conv2dParams::new(1, 1, 1),
            seed,
        ),
        conv_case(
            "conv2d_strided",
            [2, 3, 5, 5],
            [2, 3, 3, 3],
            false,
            Conv2dParams::new(2, 1, 1),
            seed,
        ),
        conv_case(
            "conv2d_pointwise",
            [2, 3, 5, 5],
            [4, 3, 1, 1],
            true,
            Conv2dParams::new(1, 0, 1),
            seed,
        ),
        conv_case(
            "conv2d_grouped",
            [2, 2, 5, 5],
            [4, 1, 3, 3],
            true,
            Conv2dParams::new(1, 1, 2),
            seed,
        ),
        conv_case(
            "conv2d_depthwise",
            [2, 3, 5, 5],
            [3, 1, 3, 3],
            false,
            Conv2dParams::new(2, 1, 3),
            seed,
        ),
        bn_case("batchnorm2d_train", BatchNormMode::Train, seed),
        bn_case("batchnorm2d_eval", BatchNormMode::Eval, seed),
        activation_case(Activation::Relu, -2.0, 2.0, &[0.0], seed),
        activation_case(Activation::Relu6, -2.0, 8.0, &[0.0, 6.0], seed),
        activation_case(Activation::Sigmoid, -4.0, 4.0, &[], seed),
        GradCase::new("upsample2x", vec![x("up", &[2, 3, 5, 5])], |g, v| {
            g.upsample2x(v[0])
        }),
        GradCase::new(
            "concat_channels",
            vec![x("cat_a", &[2, 3, 5, 5]), x("cat_b", &[2, 2, 5, 5])],
            |g, v| g.concat_channels(v[0], v[1]),
        ),
        GradCase::new(
            "add",
            vec![x("add_a", &[2, 3, 5, 5]), x("add_b", &[2, 3, 5, 5])],
            |g, v| g.add(v[0], v[1]),
        ),
        GradCase::new(
            "mul",
            vec![x("mul_a", &[2, 3, 5, 5]), x("mul_b", &[2, 3, 5, 5])],
            |g, v| g.mul(v[0], v[1]),
        ),
        GradCase::new("reduce_mean", vec![x("mean", &[2, 3, 5, 5])], |g, v| {
            g.reduce_mean(v[0])
        }),
    ];
    let pred = random(&[1, 1, 4, 4], 0.05, 0.95, derive_seed(seed, &[b"dice_p"]));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b"dice_t"]));
    let target: Vec<f64> = (0..16)
        .map(|_| f64::from(rng.random_bool(0.5) as u8))
        .collect();
    let target = Tensor::new(vec![1, 1, 4, 4], target).expect("extent");
    cases.push(
        GradCase::new("dice_loss", vec![pred, target], |g, v| {
            dice_loss(g, v[0], v[1], 1e-6)
        })
        .constant_inputs(&[1]),
    );
    cases
}

/// Replaces the constant batch-norm initialization with random values.
/// With `beta = 0` a channel whose input is identically zero sits exactly on
/// the activation kink, where one-sided differences disagree.
fn generic_point(mut params: ModelParams<f64>, seed: u64) -> ModelParams<f64> {
    for (name, t) in params.iter_mut() {
        let range = if name.ends_with(".bn.gamma") {
            (0.5, 1.5)
        } else if name.ends_with(".bn.beta")
            || name.ends_with(".running_mean")
            || name == "head.bias"
        {
            (-0.2, 0.2)
        } else if name.ends_with(".running_var") {
            (0.5, 2.0)
        } else {
            continue;
        };
        *t = random(
            t.shape(),
            range.0,
            range.1,
            derive_seed(seed, &[name.as_bytes(), b"generic"]),
        );
    }
    params
}

/// End-to-end check of the whole network in train mode: the gradient of
/// `mean(probs · R)` at `samples` randomly chosen trainable weights.
pub fn check_end_to_end(
    config: ModelConfig,
    batch: usize,
    samples: usize,
    seed: u64,
) -> Result<OpCheck> {
    check_end_to_end_with(
        config,
        batch,
        samples,
        seed,
        END_TO_END_STEP,
        BatchNormMode::Train,
    )
}

pub fn check_end_to_end_with(
    config: ModelConfig,
    batch: usize,
    samples: usize,
    seed: u64,
    step: f64,
    mode: BatchNormMode,
) -> Result<OpCheck> {
    let model = UNetMobileNetV2::new(config)?;
    let side = model.config().input_side;
    let params = generic_point(model.init_params(seed), seed);
    let image = random(
        &[batch, model.config().in_channels, side, side],
        0.0,
        1.0,
        derive_seed(seed, &[b"image"]),
    );
    let weights = random(
        &[batch, 1, side, side],
        -1.0,
        1.0,
        derive_seed(seed, &[b"R"]),
    );

    let objective = |params: &ModelParams<f64>| -> Result<(Graph<f64>, Var, std::collections::BTreeMap<String, Var>)> {
        let mut p = params.clone();
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let out = model.forward(&mut g, &mut p, x, mode)?;
        let r = g.constant(weights.clone());
        let prod = g.mul(out.probs, r)?;
        let obj = g.reduce_mean(prod)?;
        Ok((g, obj, out.param_vars))
    };

    let (mut g, obj, vars) = objective(&params)?;
    let pattern = g.activation_pattern();
    g.backward(obj)?;
    let names: Vec<&str> = params.names().filter(|n| is_trainable_name(n)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b"coordinates"]));
    let mut analytic = Vec::with_capacity(samples);
    let mut numeric = Vec::with_capacity(samples);
    let mut skipped = 0;
    while analytic.len() < samples {
        if skipped > 10 * samples {
            return Err(Error::InvalidArgument(format!(
                "end-to-end check: {skipped} sampled weights sit on activation kinks"
            )));
        }
        let name = names[rng.random_range(0..names.len())];
        let numel = params.require(name)?.numel();
        let j = rng.random_range(0..numel);
        let mut probe = params.clone();
        let orig = probe.require(name)?.data()[j];
        let mut eval = |delta: f64| -> Result<Option<f64>> {
            probe.get_mut(name).expect("present").data_mut()[j] = orig + delta;
            let (g, o, _) = objective(&probe)?;
            Ok((g.activation_pattern() == pattern).then(|| g.value(o).data()[0]))
        };
        // halve the step until neither probe crosses an activation kink
        let mut h = step;
        let mut estimate = None;
        while h >= MIN_STEP {
            if let (Some(up), Some(down)) = (eval(h)?, eval(-h)?) {
                estimate = Some((up - down) / (2.0 * h));
                break;
            }
            h /= 2.0;
        }
        match estimate {
            Some(n) => {
                analytic.push(g.grad_or_zeros(vars[name]).data()[j]);
                numeric.push(n);
            }
            None => skipped += 1,
        }
    }
    Ok(OpCheck {
        op: "end_to_end".into(),
        max_rel_error: relative_error(&analytic, &numeric),
        tolerance: END_TO_END_TOLERANCE,
        coordinates: samples,
        skipped,
    })
}

/// Every per-op case plus `extra`, then the end-to-end network.
pub fn run_suite_with(options: &GradcheckOptions, extra: Vec<GradCase>) -> Result<GradcheckReport> {
    let mut cases = op_cases(options.seed);
    cases.extend(extra);
    let mut report = GradcheckReport::default();
    for case in &cases {
        let skew = (options.corrupt.as_deref() == Some(case.name.as_str())).then_some(1.01);
        report.checks.push(check_case(case, options.seed, skew)?);
    }
    let (side, samples) = match options.scale {
        Scale::Tiny => (32, 20),
        Scale::Small => (64, 60),
    };
    report.checks.push(check_end_to_end(
        ModelConfig::scaled(side, 0.25),
        2,
        samples,
        options.seed,
    )?);
    if let Some(name) = &options.corrupt {
        if report.get(name).is_none() {
            return Err(Error::InvalidArgument(format!(
                "no gradient check named `{name}`"
            )));
        }
    }
    Ok(report)
}

pub fn run_suite(options: &GradcheckOptions) -> Result<GradcheckReport> {
    run_suite_with(options, Vec::new())
}

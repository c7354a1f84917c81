//! Declarative network descriptions and their parameter stores.
//!
//! A [`ModelSpec`] has a canonical one-line text form, e.g.
//!
//! ```text
//! input(1x28x28) conv(16,3x3,2x2,same) tsrelu conv(32,3x3,2x2,same) tsrelu
//! normpool(2x2,2x2) flatten linear(128) tsrelu heads(10)
//! ```
//!
//! which is what checkpoints store and configs accept.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::layers::{effective_weight, ConvSpec, Padding, PoolSpec, WeightMode};
use crate::tape::{CenterAxes, LiftFn, Tape, Unary, Var};
use crate::tensor::{Tensor, TensorError, TensorResult};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: Padding,
    },
    Linear {
        units: usize,
    },
    /// One unit-norm row per class: K overlapping single-output networks.
    Heads {
        classes: usize,
    },
    TwoSidedRelu,
    /// `[f(x), f(x) - x]`.
    Lift(LiftFn),
    /// One-sided monotone activation `f(x)`.
    Act(LiftFn),
    NormPool(PoolSpec),
    MaxPool(PoolSpec),
    Center {
        axes: CenterAxes,
        scale: bool,
    },
    Flatten,
    /// Split, run the branch on the second copy, reconverge.
    Residual(Vec<LayerSpec>),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ModelSpec {
    /// Per-sample input shape, `[C, H, W]` or `[D]`.
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

/// Which certificate a classifier supports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CertMode {
    /// The whole logit vector is 1-Lipschitz: radius `gap / sqrt(2)`.
    Single,
    /// Each logit is 1-Lipschitz on its own: radius `gap / 2`.
    Multi,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SpecError {
    #[error("cannot parse layer token `{0}`")]
    Token(String),
    #[error("architecture must start with input(...)")]
    MissingInput,
    #[error("unbalanced brackets in architecture")]
    Brackets,
    #[error("layer {index} ({layer}): {msg}")]
    Shape { index: usize, layer: String, msg: String },
}

fn lift_name(f: LiftFn) -> &'static str {
    match f {
        LiftFn::Relu => "relu",
        LiftFn::Tanh => "tanh",
        LiftFn::Sigmoid => "sigmoid",
        LiftFn::ScaledSigmoid => "ssigmoid",
    }
}

fn parse_lift(s: &str) -> Option<LiftFn> {
    Some(match s {
        "relu" => LiftFn::Relu,
        "tanh" => LiftFn::Tanh,
        "sigmoid" => LiftFn::Sigmoid,
        "ssigmoid" => LiftFn::ScaledSigmoid,
        _ => return None,
    })
}

fn axes_name(a: CenterAxes) -> &'static str {
    match a {
        CenterAxes::Channels => "c",
        CenterAxes::Spatial => "hw",
        CenterAxes::All => "chw",
    }
}

fn write_pair(f: &mut fmt::Formatter<'_>, p: [usize; 2]) -> fmt::Result {
    write!(f, "{}x{}", p[0], p[1])
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv {
                filters,
                kernel,
                stride,
                padding,
            } => {
                write!(f, "conv({filters},")?;
                write_pair(f, *kernel)?;
                write!(f, ",")?;
                write_pair(f, *stride)?;
                let pad = match padding {
                    Padding::Same => "same",
                    Padding::Valid => "valid",
                };
                write!(f, ",{pad})")
            }
            LayerSpec::Linear { units } => write!(f, "linear({units})"),
            LayerSpec::Heads { classes } => write!(f, "heads({classes})"),
            LayerSpec::TwoSidedRelu => write!(f, "tsrelu"),
            LayerSpec::Lift(g) => write!(f, "lift({})", lift_name(*g)),
            LayerSpec::Act(g) => write!(f, "{}", lift_name(*g)),
            LayerSpec::NormPool(p) | LayerSpec::MaxPool(p) => {
                let name = if matches!(self, LayerSpec::NormPool(_)) {
                    "normpool"
                } else {
                    "maxpool"
                };
                write!(f, "{name}(")?;
                write_pair(f, p.window)?;
                write!(f, ",")?;
                write_pair(f, p.stride)?;
                write!(f, ")")
            }
            LayerSpec::Center { axes, scale } => {
                write!(f, "center({}", axes_name(*axes))?;
                if *scale {
                    write!(f, ",scale")?;
                }
                write!(f, ")")
            }
            LayerSpec::Flatten => write!(f, "flatten"),
            LayerSpec::Residual(branch) => {
                write!(f, "residual[")?;
                for (i, l) in branch.iter().enumerate() {
                    if i > 0 {
                        write!(f, " ")?;
                    }
                    write!(f, "{l}")?;
                }
                write!(f, "]")
            }
        }
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.input.iter().map(|d| d.to_string()).collect();
        write!(f, "input({})", dims.join("x"))?;
        for l in &self.layers {
            write!(f, " {l}")?;
        }
        Ok(())
    }
}

fn parse_pair(s: &str) -> Option<[usize; 2]> {
    let (a, b) = s.split_once('x')?;
    Some([a.trim().parse().ok()?, b.trim().parse().ok()?])
}

/// Splits `name(args)` into `(name, [args])`; bare names have no args.
fn call(token: &str) -> Option<(&str, Vec<&str>)> {
    match token.split_once('(') {
        None => Some((token, Vec::new())),
        Some((name, rest)) => {
            let inner = rest.strip_suffix(')')?;
            Some((name, inner.split(',').map(str::trim).collect()))
        }
    }
}

fn parse_layer(token: &str) -> Result<LayerSpec, SpecError> {
    let bad = || SpecError::Token(token.to_string());
    let (name, args) = call(token).ok_or_else(bad)?;
    let num = |i: usize| -> Result<usize, SpecError> { args.get(i).and_then(|a| a.parse().ok()).filter(|&v| v > 0).ok_or_else(bad) };
    let pair = |i: usize| {
        args.get(i)
            .and_then(|a| parse_pair(a))
            .filter(|p| p[0] > 0 && p[1] > 0)
            .ok_or_else(bad)
    };
    let layer = match (name, args.len()) {
        ("conv", 3 | 4) => LayerSpec::Conv {
            filters: num(0)?,
            kernel: pair(1)?,
            stride: pair(2)?,
            padding: match args.get(3).copied().unwrap_or("valid") {
                "same" => Padding::Same,
                "valid" => Padding::Valid,
                _ => return Err(bad()),
            },
        },
        ("linear", 1) => LayerSpec::Linear { units: num(0)? },
        ("heads", 1) => LayerSpec::Heads { classes: num(0)? },
        ("tsrelu", 0) => LayerSpec::TwoSidedRelu,
        ("lift", 1) => LayerSpec::Lift(parse_lift(args[0]).ok_or_else(bad)?),
        ("normpool", 2) => LayerSpec::NormPool(PoolSpec {
            window: pair(0)?,
            stride: pair(1)?,
        }),
        ("maxpool", 2) => LayerSpec::MaxPool(PoolSpec {
            window: pair(0)?,
            stride: pair(1)?,
        }),
        ("center", 1 | 2) => LayerSpec::Center {
            axes: match args[0] {
                "c" => CenterAxes::Channels,
                "hw" => CenterAxes::Spatial,
                "chw" => CenterAxes::All,
                _ => return Err(bad()),
            },
            scale: match args.get(1) {
                None => false,
                Some(&"scale") => true,
                Some(_) => return Err(bad()),
            },
        },
        ("flatten", 0) => LayerSpec::Flatten,
        (act, 0) => LayerSpec::Act(parse_lift(act).ok_or_else(bad)?),
        _ => return Err(bad()),
    };
    Ok(layer)
}

fn parse_seq<'a>(tokens: &mut impl Iterator<Item = &'a str>, nested: bool) -> Result<Vec<LayerSpec>, SpecError> {
    let mut out = Vec::new();
    while let Some(tok) = tokens.next() {
        match tok {
            "]" if nested => return Ok(out),
            "]" | "[" => return Err(SpecError::Brackets),
            "residual" => {
                if tokens.next() != Some("[") {
                    return Err(SpecError::Brackets);
                }
                out.push(LayerSpec::Residual(parse_seq(tokens, true)?));
            }
            t => out.push(parse_layer(t)?),
        }
    }
    if nested {
        Err(SpecError::Brackets)
    } else {
        Ok(out)
    }
}

impl FromStr for ModelSpec {
    type Err = SpecError;

    fn from_str(s: &str) -> Result<Self, SpecError> {
        let spaced = s.replace('[', " [ ").replace(']', " ] ");
        let mut tokens = spaced.split_whitespace();
        let first = tokens.next().ok_or(SpecError::MissingInput)?;
        let dims = first
            .strip_prefix("input(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or(SpecError::MissingInput)?;
        let input = dims
            .split('x')
            .map(|d| d.trim().parse::<usize>().ok().filter(|&v| v > 0))
            .collect::<Option<Vec<_>>>()
            .filter(|v| v.len() == 1 || v.len() == 3)
            .ok_or_else(|| SpecError::Token(first.to_string()))?;
        let layers = parse_seq(&mut tokens, false)?;
        let spec = ModelSpec { input, layers };
        spec.shapes()?;
        Ok(spec)
    }
}

impl ModelSpec {
    /// The default multi-output architecture for `[1, 28, 28]` inputs.
    pub fn default_mnist() -> Self {
        "input(1x28x28) conv(16,3x3,2x2,same) tsrelu conv(32,3x3,2x2,same) tsrelu \
         normpool(2x2,2x2) flatten linear(128) tsrelu heads(10)"
            .parse()
            .expect("default architecture parses")
    }

    /// Per-sample output shape of every top-level layer (index 0 is the input).
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>, SpecError> {
        let mut shapes = vec![self.input.clone()];
        let mut cur = self.input.clone();
        for (i, l) in self.layers.iter().enumerate() {
            cur = layer_output(l, &cur).map_err(|msg| SpecError::Shape {
                index: i,
                layer: l.to_string(),
                msg,
            })?;
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    pub fn num_classes(&self) -> usize {
        let shapes = self.shapes().expect("validated spec");
        shapes.last().expect("input shape").iter().product()
    }

    pub fn cert_mode(&self) -> CertMode {
        match self.layers.last() {
            Some(LayerSpec::Heads { .. }) => CertMode::Multi,
            _ => CertMode::Single,
        }
    }
}

fn layer_output(l: &LayerSpec, s: &[usize]) -> Result<Vec<usize>, String> {
    let need3 = |what: &str| -> Result<(), String> {
        if s.len() == 3 {
            Ok(())
        } else {
            Err(format!("{what} needs a [C, H, W] input, got {s:?}"))
        }
    };
    let need1 = |what: &str| -> Result<(), String> {
        if s.len() == 1 {
            Ok(())
        } else {
            Err(format!("{what} needs a flat input, got {s:?} (add flatten)"))
        }
    };
    Ok(match l {
        LayerSpec::Conv {
            filters,
            kernel,
            stride,
            padding,
        } => {
            need3("conv")?;
            let g = conv_spec(l, s[0], WeightMode::Free)
                .geometry(s[1], s[2])
                .map_err(|e| e.to_string())?;
            let _ = (kernel, stride, padding);
            vec![*filters, g.out_height, g.out_width]
        }
        LayerSpec::Linear { units } => {
            need1("linear")?;
            vec![*units]
        }
        LayerSpec::Heads { classes } => {
            need1("heads")?;
            vec![*classes]
        }
        LayerSpec::TwoSidedRelu | LayerSpec::Lift(_) => {
            let mut o = s.to_vec();
            o[0] *= 2;
            o
        }
        LayerSpec::Act(_) => s.to_vec(),
        LayerSpec::NormPool(p) | LayerSpec::MaxPool(p) => {
            need3("pool")?;
            let g = p.geometry(s[0], s[1], s[2]).map_err(|e| e.to_string())?;
            vec![s[0], g.out_height, g.out_width]
        }
        LayerSpec::Center { axes, .. } => {
            if *axes == CenterAxes::Spatial {
                need3("center(hw)")?;
            }
            if s.len() == 1 && s[0] < 2 && *axes != CenterAxes::Spatial {
                return Err("centering a single feature always yields 0".into());
            }
            s.to_vec()
        }
        LayerSpec::Flatten => vec![s.iter().product()],
        LayerSpec::Residual(branch) => {
            let mut cur = s.to_vec();
            for b in branch {
                cur = layer_output(b, &cur)?;
            }
            if cur.len() != s.len() || cur[1..] != s[1..] || cur[0] < s[0] {
                return Err(format!(
                    "residual branch maps {s:?} to {cur:?}; it must keep spatial dims and not drop channels"
                ));
            }
            cur
        }
    })
}

fn conv_spec(l: &LayerSpec, in_channels: usize, mode: WeightMode) -> ConvSpec {
    match l {
        LayerSpec::Conv {
            filters,
            kernel,
            stride,
            padding,
        } => ConvSpec {
            in_channels,
            out_channels: *filters,
            kernel: *kernel,
            stride: *stride,
            padding: *padding,
            mode,
        },
        _ => unreachable!("conv_spec on {l}"),
    }
}

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Initial raw value of a residual mixing coefficient (`t = 1/sqrt(2)`).
pub const SPLIT_INIT: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Parameters in the order the forward pass consumes them.
fn init_params(layers: &[LayerSpec], input: &[usize], prefix: &str, rng: &mut ChaCha8Rng, out: &mut Vec<Param>) {
    let mut cur = input.to_vec();
    let normal = |n: usize, std: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect()
    };
    for (i, l) in layers.iter().enumerate() {
        let p = format!("{prefix}{i}");
        match l {
            LayerSpec::Conv { .. } | LayerSpec::Linear { .. } | LayerSpec::Heads { .. } => {
                let [rows, cols] = match l {
                    LayerSpec::Conv { .. } => conv_spec(l, cur[0], WeightMode::Free).weight_shape(),
                    LayerSpec::Linear { units } => [*units, cur[0]],
                    LayerSpec::Heads { classes } => [*classes, cur[0]],
                    _ => unreachable!(),
                };
                let w = normal(rows * cols, (2.0 / cols as f64).sqrt(), rng);
                out.push(Param {
                    name: format!("{p}.w"),
                    value: Tensor::matrix(rows, cols, w).expect("weight shape"),
                });
                out.push(Param {
                    name: format!("{p}.b"),
                    value: Tensor::zeros(&[rows]),
                });
            }
            LayerSpec::Lift(LiftFn::ScaledSigmoid) | LayerSpec::Act(LiftFn::ScaledSigmoid) => out.push(Param {
                name: format!("{p}.t"),
                value: Tensor::zeros(&[cur[0]]),
            }),
            LayerSpec::Center { scale: true, .. } => {
                out.push(Param {
                    name: format!("{p}.scale"),
                    value: Tensor::full(&[cur[0]], 1.0),
                });
                out.push(Param {
                    name: format!("{p}.shift"),
                    value: Tensor::zeros(&[cur[0]]),
                });
            }
            LayerSpec::Residual(branch) => {
                out.push(Param {
                    name: format!("{p}.t"),
                    value: Tensor::scalar(SPLIT_INIT),
                });
                init_params(branch, &cur, &format!("{p}.r"), rng, out);
            }
            _ => {}
        }
        cur = layer_output(l, &cur).expect("validated spec");
    }
}

/// Tape handles produced by one forward pass.
pub struct ForwardPass {
    pub logits: Var,
    /// One leaf per parameter, aligned with [`Model::params`].
    pub params: Vec<Var>,
    /// Output of every top-level layer, starting with the input.
    pub activations: Vec<Var>,
    /// Sum of weight penalties (penalty mode only).
    pub penalty: Option<Var>,
}

/// Inverted dropout applied to the input of the final layer.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Param>,
    pub mode: WeightMode,
    /// Treat `1/sqrt(b(W))` as a constant when differentiating.
    pub stop_bound_grad: bool,
}

struct Ctx<'a> {
    tape: &'a mut Tape,
    params: &'a [Var],
    next: usize,
    mode: WeightMode,
    stop_bound_grad: bool,
    penalty: Option<Var>,
}

impl Ctx<'_> {
    fn take(&mut self) -> Var {
        let v = self.params[self.next];
        self.next += 1;
        v
    }

    fn add_penalty(&mut self, p: Var) -> TensorResult<()> {
        self.penalty = Some(match self.penalty {
            None => p,
            Some(acc) => self.tape.add(acc, p)?,
        });
        Ok(())
    }

    /// Weight actually used by a dense/conv layer (`rows` selects per-row
    /// normalization for heads).
    fn weight(&mut self, w: Var, rows: bool) -> TensorResult<Var> {
        match (self.mode, rows) {
            (WeightMode::Rescale, false) => effective_weight(self.tape, w, WeightMode::Rescale, self.stop_bound_grad),
            (WeightMode::Rescale, true) => {
                if self.stop_bound_grad {
                    // Rows scaled by constant 1/|row|.
                    let wv = self.tape.value(w).clone();
                    let cols = wv.shape()[1];
                    let mut inv = wv.clone();
                    for row in inv.data_mut().chunks_mut(cols) {
                        let n = crate::tensor::l2_norm(row);
                        let k = if n > 0.0 { 1.0 / n } else { 1.0 };
                        row.iter_mut().for_each(|v| *v = k);
                    }
                    let r = self.tape.leaf(inv);
                    self.tape.mul(w, r)
                } else {
                    self.tape.row_normalize(w)
                }
            }
            (WeightMode::Penalty, false) => {
                let p = self.tape.weight_penalty(w)?;
                self.add_penalty(p)?;
                Ok(w)
            }
            (WeightMode::Penalty, true) => {
                let p = self.tape.row_penalty(w)?;
                self.add_penalty(p)?;
                Ok(w)
            }
            (WeightMode::Free, _) => Ok(w),
        }
    }

    fn run(
        &mut self,
        layers: &[LayerSpec],
        mut x: Var,
        mut trace: Option<&mut Vec<Var>>,
        mut dropout: Option<Dropout<'_>>,
    ) -> TensorResult<Var> {
        let last = layers.len().saturating_sub(1);
        for (i, l) in layers.iter().enumerate() {
            if i == last {
                if let Some(d) = dropout.take() {
                    x = self.dropout(x, d)?;
                }
            }
            x = self.layer(l, x)?;
            if let Some(t) = trace.as_deref_mut() {
                t.push(x);
            }
        }
        Ok(x)
    }

    fn dropout(&mut self, x: Var, d: Dropout<'_>) -> TensorResult<Var> {
        use rand::Rng;
        if d.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - d.rate);
        let shape = self.tape.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n).map(|_| if d.rng.random::<f64>() < d.rate { 0.0 } else { keep }).collect();
        let m = self.tape.leaf(Tensor::new(shape, mask)?);
        self.tape.mul(x, m)
    }

    fn layer(&mut self, l: &LayerSpec, x: Var) -> TensorResult<Var> {
        let shape = self.tape.shape(x).to_vec();
        match l {
            LayerSpec::Conv { .. } => {
                let spec = conv_spec(l, shape[1], self.mode);
                let geom = spec.geometry(shape[2], shape[3])?;
                let (w, b) = (self.take(), self.take());
                let we = self.weight(w, false)?;
                let xs = self.tape.scale(x, spec.copy_scale());
                let y = self.tape.conv2d(xs, we, geom)?;
                self.tape.add_bias(y, b)
            }
            LayerSpec::Linear { .. } | LayerSpec::Heads { .. } => {
                let (w, b) = (self.take(), self.take());
                let we = self.weight(w, matches!(l, LayerSpec::Heads { .. }))?;
                let y = self.tape.linear(x, we)?;
                self.tape.add_bias(y, b)
            }
            LayerSpec::TwoSidedRelu => self.tape.two_sided_relu(x),
            LayerSpec::Lift(f) => {
                let t = self.ssigmoid_t(*f);
                self.tape.two_sided_lift(x, *f, t)
            }
            LayerSpec::Act(f) => Ok(match f {
                LiftFn::Relu => self.tape.unary(x, Unary::Relu),
                LiftFn::Tanh => self.tape.unary(x, Unary::Tanh),
                LiftFn::Sigmoid => self.tape.unary(x, Unary::Sigmoid),
                LiftFn::ScaledSigmoid => {
                    let t = self.ssigmoid_t(*f).expect("scaled sigmoid parameter");
                    self.tape.scaled_sigmoid(x, t)?
                }
            }),
            LayerSpec::NormPool(p) | LayerSpec::MaxPool(p) => {
                let geom = p.geometry(shape[1], shape[2], shape[3])?;
                let xs = if p.overlap_factor() > 1 {
                    self.tape.scale(x, p.input_scale())
                } else {
                    x
                };
                if matches!(l, LayerSpec::NormPool(_)) {
                    self.tape.norm_pool(xs, geom)
                } else {
                    self.tape.max_pool(xs, geom)
                }
            }
            LayerSpec::Center { axes, scale } => {
                let c = self.tape.mean_center(x, *axes)?;
                if *scale {
                    let (s, b) = (self.take(), self.take());
                    let k = self.tape.clip_scale(s);
                    let y = self.tape.mul_channel(c, k)?;
                    self.tape.add_bias(y, b)
                } else {
                    Ok(c)
                }
            }
            LayerSpec::Flatten => {
                let n = shape[0];
                let rest: usize = shape[1..].iter().product();
                self.tape.reshape(x, &[n, rest])
            }
            LayerSpec::Residual(branch) => {
                let raw = self.take();
                let t = self.tape.unary(raw, Unary::Clamp01);
                let s = self.tape.unary(t, Unary::SqrtOneMinusSq);
                let x1 = self.tape.mul_scalar(x, t)?;
                let x2 = self.tape.mul_scalar(x, s)?;
                let fx2 = self.run(branch, x2, None, None)?;
                self.tape.reconverge(x1, fx2, t, s)
            }
        }
    }

    fn ssigmoid_t(&mut self, f: LiftFn) -> Option<Var> {
        if f == LiftFn::ScaledSigmoid {
            let raw = self.take();
            Some(self.tape.unary(raw, Unary::Exp))
        } else {
            None
        }
    }
}

impl Model {
    pub fn new(spec: ModelSpec, mode: WeightMode, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        init_params(&spec.layers, &spec.input, "", &mut rng, &mut params);
        if mode != WeightMode::Free {
            // Start on the constraint boundary so penalty mode begins with a
            // zero penalty; rescale mode computes the same function either way.
            freeze_layers(&spec.layers, &mut params, &mut 0);
        }
        Self {
            spec,
            params,
            mode,
            stop_bound_grad: false,
        }
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(spec: ModelSpec, mode: WeightMode, params: Vec<Param>) -> TensorResult<Self> {
        let template = Self::new(spec, mode, 0);
        if template.params.len() != params.len() {
            return Err(TensorError::Invalid {
                op: "from_params",
                msg: format!("expected {} parameters, got {}", template.params.len(), params.len()),
            });
        }
        for (a, b) in template.params.iter().zip(&params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(TensorError::Invalid {
                    op: "from_params",
                    msg: format!(
                        "parameter {} {:?} does not match architecture ({} {:?})",
                        b.name,
                        b.value.shape(),
                        a.name,
                        a.value.shape()
                    ),
                });
            }
        }
        Ok(Self { params, ..template })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }

    pub fn cert_mode(&self) -> CertMode {
        self.spec.cert_mode()
    }

    fn check_input(&self, shape: &[usize]) -> TensorResult<()> {
        if shape.len() != self.spec.input.len() + 1 || shape[1..] != self.spec.input[..] {
            let mut want = vec![0];
            want.extend_from_slice(&self.spec.input);
            return Err(TensorError::ShapeMismatch {
                op: "model input",
                lhs: shape.to_vec(),
                rhs: want,
            });
        }
        Ok(())
    }

    /// Records a forward pass of the batch held by `x`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> TensorResult<ForwardPass> {
        self.forward_with(tape, x, None)
    }

    pub fn forward_with(&self, tape: &mut Tape, x: Var, dropout: Option<Dropout<'_>>) -> TensorResult<ForwardPass> {
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.value.clone())).collect();
        self.forward_shared(tape, x, params, dropout)
    }

    /// Forward pass reusing parameter leaves recorded by an earlier pass, so
    /// gradients from both passes accumulate on the same handles.
    pub fn forward_shared(&self, tape: &mut Tape, x: Var, params: Vec<Var>, dropout: Option<Dropout<'_>>) -> TensorResult<ForwardPass> {
        self.check_input(tape.shape(x))?;
        if params.len() != self.params.len() {
            return Err(TensorError::Invalid {
                op: "forward_shared",
                msg: format!("expected {} parameter handles, got {}", self.params.len(), params.len()),
            });
        }
        let mut activations = vec![x];
        let mut ctx = Ctx {
            tape,
            params: &params,
            next: 0,
            mode: self.mode,
            stop_bound_grad: self.stop_bound_grad,
            penalty: None,
        };
        let logits = ctx.run(&self.spec.layers, x, Some(&mut activations), dropout)?;
        let penalty = ctx.penalty;
        Ok(ForwardPass {
            logits,
            params,
            activations,
            penalty,
        })
    }

    /// Values of every top-level activation for a batch (input first).
    pub fn trace(&self, x: &Tensor) -> TensorResult<Vec<Tensor>> {
        let mut tape = Tape::without_grad();
        let xv = tape.leaf(x.clone());
        let pass = self.forward(&mut tape, xv)?;
        Ok(pass.activations.iter().map(|&a| tape.value(a).clone()).collect())
    }

    /// Equivalent unconstrained model whose stored weights are the effective
    /// weights of this one. Inference on it skips the bound computations and
    /// produces bit-identical logits.
    pub fn frozen(&self) -> Model {
        let mut out = self.clone();
        out.mode = WeightMode::Free;
        if self.mode != WeightMode::Rescale {
            return out;
        }
        let mut idx = 0;
        freeze_layers(&self.spec.layers, &mut out.params, &mut idx);
        out
    }
}

fn freeze_layers(layers: &[LayerSpec], params: &mut [Param], idx: &mut usize) {
    for l in layers {
        match l {
            LayerSpec::Conv { .. } | LayerSpec::Linear { .. } | LayerSpec::Heads { .. } => {
                let w = &params[*idx].value;
                let mut tape = Tape::without_grad();
                let v = tape.leaf(w.clone());
                let e = if matches!(l, LayerSpec::Heads { .. }) {
                    tape.row_normalize(v)
                } else {
                    effective_weight(&mut tape, v, WeightMode::Rescale, false)
                }
                .expect("weight matrix");
                params[*idx].value = tape.value(e).clone();
                *idx += 2;
            }
            LayerSpec::Lift(LiftFn::ScaledSigmoid) | LayerSpec::Act(LiftFn::ScaledSigmoid) => *idx += 1,
            LayerSpec::Center { scale: true, .. } => *idx += 2,
            LayerSpec::Residual(branch) => {
                *idx += 1;
                freeze_layers(branch, params, idx);
            }
            _ => {}
        }
    }
}

/// Anything that maps a batch of inputs to logits and can differentiate a
/// linear functional of its logits with respect to the input.
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;

    fn logits(&self, x: &Tensor) -> TensorResult<Tensor>;

    /// Returns `(logits, d<seed(logits), logits>/dx)`.
    fn logits_and_input_grad(&self, x: &Tensor, seed: &dyn Fn(&Tensor) -> Tensor) -> TensorResult<(Tensor, Tensor)>;

    fn predict(&self, x: &Tensor) -> TensorResult<Vec<usize>> {
        let l = self.logits(x)?;
        Ok((0..l.rows()).map(|i| argmax(l.row(i))).collect())
    }
}

/// Index of the largest entry (first one on ties).
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl Classifier for Model {
    fn num_classes(&self) -> usize {
        Model::num_classes(self)
    }

    fn logits(&self, x: &Tensor) -> TensorResult<Tensor> {
        let mut tape = Tape::without_grad();
        let xv = tape.leaf(x.clone());
        let pass = self.forward(&mut tape, xv)?;
        Ok(tape.value(pass.logits).clone())
    }

    fn logits_and_input_grad(&self, x: &Tensor, seed: &dyn Fn(&Tensor) -> Tensor) -> TensorResult<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let pass = self.forward(&mut tape, xv)?;
        let logits = tape.value(pass.logits).clone();
        tape.backward_with_seed(pass.logits, &seed(&logits))?;
        Ok((logits, tape.grad(xv)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::weight_bound_b;

    fn batch(spec: &ModelSpec, n: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = vec![n];
        shape.extend_from_slice(&spec.input);
        let len: usize = shape.iter().product();
        Tensor::new(shape, (0..len).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn default_architecture_shapes() {
        let spec = ModelSpec::default_mnist();
        let shapes = spec.shapes().unwrap();
        assert_eq!(shapes[1], vec![16, 14, 14]);
        assert_eq!(shapes[4], vec![64, 7, 7]);
        assert_eq!(shapes[5], vec![64, 3, 3]);
        assert_eq!(shapes[6], vec![576]);
        assert_eq!(spec.num_classes(), 10);
        assert_eq!(spec.cert_mode(), CertMode::Multi);
    }

    #[test]
    fn text_round_trip() {
        let text = "input(3x8x8) conv(4,3x3,1x1,same) lift(ssigmoid) center(c,scale) \
                    residual[conv(8,3x3,1x1,same) tsrelu maxpool(1x1,1x1)] normpool(3x3,1x1) \
                    flatten linear(5) tanh center(chw) heads(3)";
        let spec: ModelSpec = text.parse().unwrap();
        let again: ModelSpec = spec.to_string().parse().unwrap();
        assert_eq!(spec, again);
        assert_eq!(spec.to_string(), spec.to_string().split_whitespace().collect::<Vec<_>>().join(" "));
    }

    #[test]
    fn parse_errors_name_the_problem() {
        assert!(matches!("conv(4,3x3,1x1)".parse::<ModelSpec>(), Err(SpecError::MissingInput)));
        assert!(matches!("input(4) wobble".parse::<ModelSpec>(), Err(SpecError::Token(t)) if t == "wobble"));
        assert!(matches!("input(4) residual[ relu".parse::<ModelSpec>(), Err(SpecError::Brackets)));
        let err = "input(1x4x4) linear(3)".parse::<ModelSpec>().unwrap_err();
        assert!(err.to_string().contains("flatten"), "{err}");
        assert!("input(1x2x2) conv(1,3x3,1x1,valid)".parse::<ModelSpec>().is_err());
    }

    #[test]
    fn frozen_model_is_bit_identical() {
        let spec: ModelSpec = "input(2x6x6) conv(3,3x3,2x2,same) lift(ssigmoid) normpool(2x2,1x1) \
                               flatten residual[linear(12) tsrelu] linear(8) tsrelu heads(4)"
            .parse()
            .unwrap();
        let model = Model::new(spec.clone(), WeightMode::Rescale, 3);
        let x = batch(&spec, 5, 1);
        let a = model.logits(&x).unwrap();
        let b = model.frozen().logits(&x).unwrap();
        assert_eq!(a, b);
        for p in model.frozen().params() {
            if p.name.ends_with(".w") && p.name != "7.w" {
                assert!((weight_bound_b(&p.value) - 1.0).abs() < 1e-9, "{}", p.name);
            }
        }
    }

    #[test]
    fn penalty_mode_reports_penalty() {
        let spec: ModelSpec = "input(4) linear(4) tsrelu heads(2)".parse().unwrap();
        let model = Model::new(spec.clone(), WeightMode::Penalty, 0);
        let mut tape = Tape::new();
        let x = tape.leaf(batch(&spec, 2, 0));
        let pass = model.forward(&mut tape, x).unwrap();
        assert!(pass.penalty.is_some());
        let free = Model {
            mode: WeightMode::Free,
            ..model
        };
        let mut tape = Tape::new();
        let x = tape.leaf(batch(&spec, 2, 0));
        assert!(free.forward(&mut tape, x).unwrap().penalty.is_none());
    }

    #[test]
    fn from_params_checks_layout() {
        let spec = ModelSpec::default_mnist();
        let m = Model::new(spec.clone(), WeightMode::Rescale, 9);
        let back = Model::from_params(spec.clone(), WeightMode::Rescale, m.params().to_vec()).unwrap();
        assert_eq!(back, m);
        let mut short = m.params().to_vec();
        short.pop();
        assert!(Model::from_params(spec, WeightMode::Rescale, short).is_err());
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let m = Model::new(ModelSpec::default_mnist(), WeightMode::Rescale, 0);
        assert!(m.logits(&Tensor::zeros(&[2, 1, 27, 28])).is_err());
    }
}

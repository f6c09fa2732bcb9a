//! The three model families and their shared skeleton.
//!
//! Every model downsamples the input three times (3x3 conv, then two 4x4
//! stride-2 convs, each followed by group norm and activation), runs a core
//! stage, and finishes with norm -> relu -> global average pool -> linear.
//! The core is where the families differ:
//!
//! * `resnet` — stacked residual blocks `z <- z + h_scale * block(z)`;
//! * `node`   — one ODE block with constant parameters, integration time
//!   optionally concatenated as an extra input channel of the first
//!   dynamics convolution;
//! * `gode`   — one ODE block whose convolution kernels are B-spline
//!   functions of integration time.
//!
//! A degree-0, single-control-point `gode` is computation-graph-identical to
//! a `node` without the time channel, and a degree-0 basis with knots aligned
//! to the Euler grid reproduces a residual network step for step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::bspline::BSplineBasis;
use crate::error::{GodeError, Result};
use crate::layers::{
    default_num_groups, linear, BiasMode, Conv2d, GroupNorm, TimeVaryingConv, TvBias,
    GROUP_NORM_EPS,
};
use crate::odeint::{solve, Dynamics, SolverConfig};
use crate::scalar::Scalar;
use crate::tensor::{tape::Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Resnet,
    Node,
    Gode,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Family::Resnet => "resnet",
            Family::Node => "node",
            Family::Gode => "gode",
        };
        f.write_str(s)
    }
}

/// Declarative architecture description. Unknown keys are rejected when
/// parsed from configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub family: Family,
    /// Channel width of the core stage.
    pub width: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Residual blocks (resnet only).
    pub num_blocks: usize,
    /// Residual update scale (resnet only).
    pub h_scale: f64,
    /// Solver for the ODE block (node/gode).
    pub solver: SolverConfig,
    /// Convolution stages inside a residual block or the ODE dynamics.
    pub dynamics_layers: usize,
    /// Concatenate integration time as an input channel (node only).
    pub time_channel: bool,
    /// B-spline degree k (gode only).
    pub basis_degree: usize,
    /// B-spline control points n (gode only).
    pub control_points: usize,
    pub bias_mode: BiasMode,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            family: Family::Gode,
            width: 64,
            in_channels: 1,
            num_classes: 10,
            num_blocks: 6,
            h_scale: 1.0,
            solver: SolverConfig::default(),
            dynamics_layers: 2,
            time_channel: true,
            basis_degree: 1,
            control_points: 4,
            bias_mode: BiasMode::Constant,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.in_channels == 0 {
            return Err(GodeError::Config(
                "width and in_channels must be positive".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(GodeError::Config("need at least two classes".into()));
        }
        let groups = default_num_groups(self.width);
        if !self.width.is_multiple_of(groups) {
            return Err(GodeError::Config(format!(
                "width {} is not divisible by {} norm groups",
                self.width, groups
            )));
        }
        match self.family {
            Family::Resnet => {
                if self.num_blocks == 0 {
                    return Err(GodeError::Config("resnet needs num_blocks >= 1".into()));
                }
            }
            Family::Node | Family::Gode => {
                self.solver.validate()?;
                if self.solver.t0 != 0.0 {
                    return Err(GodeError::Config("ODE cores integrate from t0 = 0".into()));
                }
            }
        }
        if !(1..=4).contains(&self.dynamics_layers) {
            return Err(GodeError::Config(format!(
                "dynamics_layers must be in 1..=4, got {}",
                self.dynamics_layers
            )));
        }
        if self.family == Family::Gode {
            // constructs the basis to surface n < k+1 as an invalid-basis error
            self.basis()?;
        }
        Ok(())
    }

    /// The ODE-block basis: clamped uniform over `[0, solver.t1]`.
    pub fn basis(&self) -> Result<BSplineBasis> {
        BSplineBasis::clamped_uniform(self.basis_degree, self.control_points, self.solver.t1)
    }
}

struct DownBlock<S: Scalar> {
    conv: Conv2d<S>,
    norm: GroupNorm<S>,
}

struct ResBlock<S: Scalar> {
    convs: Vec<Conv2d<S>>,
    norms: Vec<GroupNorm<S>>,
}

impl<S: Scalar> ResBlock<S> {
    /// conv -> norm -> relu per stage.
    fn stages(&self, tape: &Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut h = x.clone();
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            h = conv.forward(tape, &h)?;
            h = norm.forward(tape, &h)?;
            h = tape.relu(&h)?;
        }
        Ok(h)
    }
}

struct NodeDynamics<S: Scalar> {
    convs: Vec<Conv2d<S>>,
    norms: Vec<GroupNorm<S>>,
    time_channel: bool,
}

impl<S: Scalar> Dynamics<S> for NodeDynamics<S> {
    fn eval(&self, tape: &Tape<S>, z: &Tensor<S>, t: f64) -> Result<Tensor<S>> {
        let mut h = z.clone();
        for (l, (conv, norm)) in self.convs.iter().zip(&self.norms).enumerate() {
            if l == 0 && self.time_channel {
                let shape = h.shape();
                let tmap = Tensor::filled(vec![shape[0], 1, shape[2], shape[3]], S::from_f64(t));
                h = tape.concat_channel(&h, &tmap)?;
            }
            h = conv.forward(tape, &h)?;
            h = norm.forward(tape, &h)?;
            h = tape.relu(&h)?;
        }
        Ok(h)
    }
}

struct GodeDynamics<S: Scalar> {
    convts: Vec<TimeVaryingConv<S>>,
    norms: Vec<GroupNorm<S>>,
}

impl<S: Scalar> Dynamics<S> for GodeDynamics<S> {
    fn eval(&self, tape: &Tape<S>, z: &Tensor<S>, t: f64) -> Result<Tensor<S>> {
        let mut h = z.clone();
        for (convt, norm) in self.convts.iter().zip(&self.norms) {
            h = convt.forward(tape, &h, t)?;
            h = norm.forward(tape, &h)?;
            h = tape.relu(&h)?;
        }
        Ok(h)
    }
}

enum Core<S: Scalar> {
    Residual {
        blocks: Vec<ResBlock<S>>,
        h_scale: f64,
    },
    NodeOde {
        dynamics: NodeDynamics<S>,
        solver: SolverConfig,
    },
    GodeOde {
        dynamics: GodeDynamics<S>,
        solver: SolverConfig,
    },
}

struct Head<S: Scalar> {
    norm: GroupNorm<S>,
    weight: Tensor<S>, // [C, num_classes]
    bias: Tensor<S>,   // [num_classes]
}

pub struct Model<S: Scalar> {
    pub spec: ModelSpec,
    down: Vec<DownBlock<S>>,
    core: Core<S>,
    head: Head<S>,
}

/// Uniform fan-in-scaled init: zero mean, std = sqrt(2/fan_in).
fn conv_kernel_init<S: Scalar>(
    rng: &mut ChaCha12Rng,
    co: usize,
    ci: usize,
    kh: usize,
    kw: usize,
) -> Tensor<S> {
    let fan_in = (ci * kh * kw) as f64;
    let bound = (3.0f64).sqrt() * (2.0 / fan_in).sqrt();
    let data: Vec<S> = (0..co * ci * kh * kw)
        .map(|_| S::from_f64((rng.random::<f64>() * 2.0 - 1.0) * bound))
        .collect();
    Tensor::param(vec![co, ci, kh, kw], data).expect("shape matches data")
}

fn zeros_param<S: Scalar>(shape: Vec<usize>) -> Tensor<S> {
    let n = shape.iter().product();
    Tensor::param(shape, vec![S::ZERO; n]).expect("shape matches data")
}

fn group_norm_init<S: Scalar>(c: usize) -> GroupNorm<S> {
    GroupNorm {
        num_groups: default_num_groups(c),
        scale: Tensor::param(vec![c], vec![S::ONE; c]).expect("shape matches data"),
        shift: zeros_param(vec![c]),
        eps: GROUP_NORM_EPS,
    }
}

impl<S: Scalar> Model<S> {
    /// Deterministic build: two builds from one seed are bitwise identical.
    /// All control kernels of a time-varying convolution start equal, so a
    /// fresh gode model begins time-constant.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let c = spec.width;

        let mut down = Vec::with_capacity(3);
        for (ci, kh, stride) in [(spec.in_channels, 3, 1), (c, 4, 2), (c, 4, 2)] {
            down.push(DownBlock {
                conv: Conv2d::new(
                    conv_kernel_init(&mut rng, c, ci, kh, kh),
                    Some(zeros_param(vec![c])),
                    stride,
                    1,
                ),
                norm: group_norm_init(c),
            });
        }

        let l = spec.dynamics_layers;
        let core = match spec.family {
            Family::Resnet => {
                let mut blocks = Vec::with_capacity(spec.num_blocks);
                for _ in 0..spec.num_blocks {
                    let convs = (0..l)
                        .map(|_| {
                            Conv2d::new(
                                conv_kernel_init(&mut rng, c, c, 3, 3),
                                Some(zeros_param(vec![c])),
                                1,
                                1,
                            )
                        })
                        .collect();
                    let norms = (0..l).map(|_| group_norm_init(c)).collect();
                    blocks.push(ResBlock { convs, norms });
                }
                Core::Residual {
                    blocks,
                    h_scale: spec.h_scale,
                }
            }
            Family::Node => {
                let convs = (0..l)
                    .map(|i| {
                        let ci = if i == 0 && spec.time_channel {
                            c + 1
                        } else {
                            c
                        };
                        Conv2d::new(
                            conv_kernel_init(&mut rng, c, ci, 3, 3),
                            Some(zeros_param(vec![c])),
                            1,
                            1,
                        )
                    })
                    .collect();
                let norms = (0..l).map(|_| group_norm_init(c)).collect();
                Core::NodeOde {
                    dynamics: NodeDynamics {
                        convs,
                        norms,
                        time_channel: spec.time_channel,
                    },
                    solver: spec.solver,
                }
            }
            Family::Gode => {
                let basis = spec.basis()?;
                let n = spec.control_points;
                let mut convts = Vec::with_capacity(l);
                for _ in 0..l {
                    let template = conv_kernel_init::<S>(&mut rng, c, c, 3, 3);
                    let control: Vec<Tensor<S>> = (0..n)
                        .map(|_| {
                            Tensor::param(template.shape().to_vec(), template.to_vec())
                                .expect("shape matches data")
                        })
                        .collect();
                    let bias = match spec.bias_mode {
                        BiasMode::Constant => TvBias::Constant(zeros_param(vec![c])),
                        BiasMode::Spline => {
                            TvBias::Spline((0..n).map(|_| zeros_param(vec![c])).collect())
                        }
                    };
                    convts.push(TimeVaryingConv::new(basis.clone(), control, bias)?);
                }
                let norms = (0..l).map(|_| group_norm_init(c)).collect();
                Core::GodeOde {
                    dynamics: GodeDynamics { convts, norms },
                    solver: spec.solver,
                }
            }
        };

        let head = Head {
            norm: group_norm_init(c),
            weight: {
                let bound = (3.0f64).sqrt() * (2.0 / c as f64).sqrt();
                let data: Vec<S> = (0..c * spec.num_classes)
                    .map(|_| S::from_f64((rng.random::<f64>() * 2.0 - 1.0) * bound))
                    .collect();
                Tensor::param(vec![c, spec.num_classes], data).expect("shape matches data")
            },
            bias: zeros_param(vec![spec.num_classes]),
        };

        Ok(Model {
            spec: spec.clone(),
            down,
            core,
            head,
        })
    }

    /// Logits `[N, num_classes]`.
    pub fn forward(&self, tape: &Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.spec.in_channels {
            return Err(GodeError::ShapeMismatch {
                op: "model forward",
                lhs: shape.to_vec(),
                rhs: vec![0, self.spec.in_channels, 0, 0],
            });
        }
        let mut h = x.clone();
        for block in &self.down {
            h = block.conv.forward(tape, &h)?;
            h = block.norm.forward(tape, &h)?;
            h = tape.relu(&h)?;
        }
        h = match &self.core {
            Core::Residual { blocks, h_scale } => {
                let hs = S::from_f64(*h_scale);
                let mut z = h;
                for block in blocks {
                    let r = block.stages(tape, &z)?;
                    z = tape.add_scaled(&z, &r, hs)?;
                }
                z
            }
            Core::NodeOde { dynamics, solver } => solve(dynamics, &h, solver, tape)?,
            Core::GodeOde { dynamics, solver } => solve(dynamics, &h, solver, tape)?,
        };
        h = self.head.norm.forward(tape, &h)?;
        h = tape.relu(&h)?;
        let pooled = tape.global_avg_pool(&h)?;
        linear(tape, &pooled, &self.head.weight, &self.head.bias)
    }

    /// Class probabilities; rows sum to one.
    pub fn predict_proba(&self, tape: &Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        let logits = self.forward(tape, x)?;
        tape.softmax(&logits)
    }

    /// Swap the ODE solver configuration (same weights, different
    /// integrator). No effect on a residual core.
    pub fn set_solver(&mut self, cfg: SolverConfig) -> Result<()> {
        cfg.validate()?;
        self.spec.solver = cfg;
        match &mut self.core {
            Core::NodeOde { solver, .. } | Core::GodeOde { solver, .. } => *solver = cfg,
            Core::Residual { .. } => {}
        }
        Ok(())
    }

    /// Named trainable tensors in a fixed order (build order).
    pub fn parameters(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        for (i, block) in self.down.iter().enumerate() {
            out.push((format!("down.{i}.kernel"), block.conv.kernel.clone()));
            if let Some(b) = &block.conv.bias {
                out.push((format!("down.{i}.bias"), b.clone()));
            }
            out.push((format!("down.{i}.norm.scale"), block.norm.scale.clone()));
            out.push((format!("down.{i}.norm.shift"), block.norm.shift.clone()));
        }
        match &self.core {
            Core::Residual { blocks, .. } => {
                for (b, block) in blocks.iter().enumerate() {
                    for (l, conv) in block.convs.iter().enumerate() {
                        out.push((format!("core.block{b}.conv{l}.kernel"), conv.kernel.clone()));
                        if let Some(bias) = &conv.bias {
                            out.push((format!("core.block{b}.conv{l}.bias"), bias.clone()));
                        }
                    }
                    for (l, norm) in block.norms.iter().enumerate() {
                        out.push((format!("core.block{b}.norm{l}.scale"), norm.scale.clone()));
                        out.push((format!("core.block{b}.norm{l}.shift"), norm.shift.clone()));
                    }
                }
            }
            Core::NodeOde { dynamics, .. } => {
                for (l, conv) in dynamics.convs.iter().enumerate() {
                    out.push((format!("core.conv{l}.kernel"), conv.kernel.clone()));
                    if let Some(bias) = &conv.bias {
                        out.push((format!("core.conv{l}.bias"), bias.clone()));
                    }
                }
                for (l, norm) in dynamics.norms.iter().enumerate() {
                    out.push((format!("core.norm{l}.scale"), norm.scale.clone()));
                    out.push((format!("core.norm{l}.shift"), norm.shift.clone()));
                }
            }
            Core::GodeOde { dynamics, .. } => {
                for (l, convt) in dynamics.convts.iter().enumerate() {
                    for (i, ctrl) in convt.control_kernels.iter().enumerate() {
                        out.push((format!("core.convt{l}.ctrl{i}"), ctrl.clone()));
                    }
                    match &convt.bias {
                        TvBias::Constant(b) => {
                            out.push((format!("core.convt{l}.bias"), b.clone()));
                        }
                        TvBias::Spline(bs) => {
                            for (i, b) in bs.iter().enumerate() {
                                out.push((format!("core.convt{l}.bias_ctrl{i}"), b.clone()));
                            }
                        }
                    }
                }
                for (l, norm) in dynamics.norms.iter().enumerate() {
                    out.push((format!("core.norm{l}.scale"), norm.scale.clone()));
                    out.push((format!("core.norm{l}.shift"), norm.shift.clone()));
                }
            }
        }
        out.push(("head.norm.scale".into(), self.head.norm.scale.clone()));
        out.push(("head.norm.shift".into(), self.head.norm.shift.clone()));
        out.push(("head.fc.weight".into(), self.head.weight.clone()));
        out.push(("head.fc.bias".into(), self.head.bias.clone()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, p) in self.parameters() {
            p.zero_grad();
        }
    }

    /// Materialized kernel entries of one core convolution across time.
    ///
    /// Returns rows `(position, entry_id, value)`. For ODE cores the position
    /// is integration time over `t_grid`; a residual core ignores `t_grid`
    /// and reports one row per block, the position being the block index.
    pub fn weight_trajectory(
        &self,
        layer_index: usize,
        t_grid: &[f64],
    ) -> Result<Vec<(f64, usize, f64)>> {
        let mut rows = Vec::new();
        match &self.core {
            Core::GodeOde { dynamics, .. } => {
                let convt = dynamics.convts.get(layer_index).ok_or_else(|| {
                    GodeError::Config(format!(
                        "layer index {layer_index} out of range for {} dynamics layers",
                        dynamics.convts.len()
                    ))
                })?;
                let tape = Tape::inference();
                for &t in t_grid {
                    let kernel = convt.kernel_at(&tape, t)?;
                    for (e, v) in kernel.to_vec().iter().enumerate() {
                        rows.push((t, e, v.to_f64()));
                    }
                }
            }
            Core::NodeOde { dynamics, .. } => {
                let conv = dynamics.convs.get(layer_index).ok_or_else(|| {
                    GodeError::Config(format!(
                        "layer index {layer_index} out of range for {} dynamics layers",
                        dynamics.convs.len()
                    ))
                })?;
                for &t in t_grid {
                    for (e, v) in conv.kernel.to_vec().iter().enumerate() {
                        rows.push((t, e, v.to_f64()));
                    }
                }
            }
            Core::Residual { blocks, .. } => {
                for (b, block) in blocks.iter().enumerate() {
                    let conv = block.convs.get(layer_index).ok_or_else(|| {
                        GodeError::Config(format!(
                            "layer index {layer_index} out of range for {} block convs",
                            block.convs.len()
                        ))
                    })?;
                    for (e, v) in conv.kernel.to_vec().iter().enumerate() {
                        rows.push((b as f64, e, v.to_f64()));
                    }
                }
            }
        }
        Ok(rows)
    }
}

/// Exact trainable-scalar count for a spec.
pub fn count_params(spec: &ModelSpec) -> Result<usize> {
    Ok(Model::<f32>::build(spec, 0)?.param_count())
}

/// Per-stage parameter counts: (stage name, count), stages being the prefix
/// before the first dot in the parameter name.
pub fn count_params_by_stage(spec: &ModelSpec) -> Result<Vec<(String, usize)>> {
    let model = Model::<f32>::build(spec, 0)?;
    let mut stages: Vec<(String, usize)> = Vec::new();
    for (name, t) in model.parameters() {
        let stage = name.split('.').next().unwrap_or("other").to_string();
        match stages.iter_mut().find(|(s, _)| *s == stage) {
            Some((_, c)) => *c += t.numel(),
            None => stages.push((stage, t.numel())),
        }
    }
    Ok(stages)
}

//! Finite-difference verification of every backward rule and of the full
//! policy network.
//!
//! Each check draws random instances, builds a scalar loss
//! `Σ R ⊙ op(inputs)` with a random constant `R`, and compares the tape
//! gradient with central differences. Probes whose `±h` evaluations take a
//! different branch (ReLU mask, max-pool argmax) than the unperturbed point
//! sit on a kink and are redrawn.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{OpKind, Tape, Var};
use crate::finite_diff::relative_error;
use crate::nn::{self, Params};
use crate::observation::PointCloudObservation;
use crate::policy::{forward_on_tape, PolicyConfig, PolicyError};
use crate::tensor::Tensor;

type Result<T> = std::result::Result<T, PolicyError>;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub h: f64,
    pub tolerance: f64,
    pub instances: usize,
    /// Coordinates probed per parameter tensor per network instance.
    pub network_coords: usize,
    pub network_points: usize,
    pub seed: u64,
    /// Backward rule to corrupt, for negative-control runs.
    pub fault: Option<OpKind>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tolerance: 1e-4,
            instances: 20,
            network_coords: 3,
            network_points: 8,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub max_rel_error: f64,
    pub instances: usize,
    pub probes: usize,
    /// Probes redrawn because they straddled a kink.
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub lines: Vec<CheckLine>,
    /// `N×N` similarity matrices formed by one full forward pass.
    pub similarity_per_forward: usize,
    pub elapsed: Duration,
}

impl GradcheckReport {
    pub fn offenders(&self) -> Vec<&CheckLine> {
        self.lines
            .iter()
            .filter(|l| !(l.max_rel_error < self.tolerance) || l.probes == 0)
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.offenders().is_empty()
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.lines {
            let verdict = if l.max_rel_error < self.tolerance && l.probes > 0 {
                "ok"
            } else {
                "FAIL"
            };
            writeln!(
                f,
                "{:<28} max_rel_err {:.3e}  instances {:>3}  probes {:>5}  kinks {:>3}  {verdict}",
                l.name, l.max_rel_error, l.instances, l.probes, l.skipped
            )?;
        }
        writeln!(
            f,
            "similarity matrices per forward: {}",
            self.similarity_per_forward
        )?;
        write!(f, "elapsed: {:.2}s", self.elapsed.as_secs_f64())
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("shape matches")
}

/// Builds an op's output from its parameter leaves.
type Builder = fn(&mut Tape, &[Var], &mut ChaCha8Rng) -> crate::tensor::Result<Var>;

struct OpCase {
    name: &'static str,
    /// Input shapes for one instance.
    shapes: fn(&mut ChaCha8Rng) -> Vec<Vec<usize>>,
    build: Builder,
    /// Input scale; wider logits exercise softmax away from uniform.
    spread: f64,
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.random_range(2..6), rng.random_range(2..6), rng.random_range(2..6))
}

fn cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            shapes: |r| {
                let (m, k, n) = dims(r);
                vec![vec![m, k], vec![k, n]]
            },
            build: |t, v, _| t.matmul(v[0], v[1]),
            spread: 1.0,
        },
        OpCase {
            name: "matmul_nt",
            shapes: |r| {
                let (m, k, n) = dims(r);
                vec![vec![m, k], vec![n, k]]
            },
            build: |t, v, _| t.matmul_nt(v[0], v[1]),
            spread: 1.0,
        },
        OpCase {
            name: "add_row",
            shapes: |r| {
                let (m, k, _) = dims(r);
                vec![vec![m, k], vec![k]]
            },
            build: |t, v, _| t.add_row(v[0], v[1]),
            spread: 1.0,
        },
        OpCase {
            name: "add",
            shapes: |r| {
                let (m, k, _) = dims(r);
                vec![vec![m, k], vec![m, k]]
            },
            build: |t, v, _| t.add(v[0], v[1]),
            spread: 1.0,
        },
        OpCase {
            name: "mul",
            shapes: |r| {
                let (m, k, _) = dims(r);
                vec![vec![m, k], vec![m, k]]
            },
            build: |t, v, _| t.mul(v[0], v[1]),
            spread: 1.0,
        },
        OpCase {
            name: "scale",
            shapes: |r| {
                let (m, k, _) = dims(r);
                vec![vec![m, k]]
            },
            build: |t, v, _| t.scale(v[0], -1.7),
            spread: 1.0,
        },
        OpCase {
            name: "relu",
            shapes: |r| {
                let (m, k, _) = dims(r);
                vec![vec![m, k]]
            },
            build: |t, v, _| t.relu(v[0]),
            spread: 1.0,
        },
        OpCase {
            name: "layer_norm",
            shapes: |r| {
                let (m, k, _) = dims(r);
                vec![vec![m, k], vec![k], vec![k]]
            },
            build: |t, v, _| t.layer_norm(v[0], v[1], v[2], nn::LAYER_NORM_EPS),
            spread: 1.0,
        },
        OpCase {
            name: "softmax",
            shapes: |r| {
                let (m, k, _) = dims(r);
                vec![vec![m, k]]
            },
            build: |t, v, _| t.softmax_rows(v[0]),
            spread: 3.0,
        },
        OpCase {
            name: "concat_cols",
            shapes: |r| {
                let (m, a, b) = dims(r);
                vec![vec![m, a], vec![m, b], vec![m, 2]]
            },
            build: |t, v, _| t.concat_cols(v),
            spread: 1.0,
        },
        OpCase {
            name: "concat_rows",
            shapes: |r| {
                let (a, b, k) = dims(r);
                vec![vec![a, k], vec![b, k]]
            },
            build: |t, v, _| t.concat_rows(v),
            spread: 1.0,
        },
        OpCase {
            name: "reduce_max",
            shapes: |r| {
                let (m, k, _) = dims(r);
                vec![vec![m, k]]
            },
            build: |t, v, _| t.reduce_max_points(v[0]),
            spread: 1.0,
        },
        OpCase {
            name: "gather",
            shapes: |r| vec![vec![r.random_range(2..8)]],
            build: |t, v, r| {
                let n = t.value(v[0]).len();
                let idx = (0..12).map(|_| r.random_range(0..n)).collect();
                t.gather(v[0], idx, &[3, 4])
            },
            spread: 1.0,
        },
        OpCase {
            name: "reshape",
            shapes: |r| {
                let (m, k, _) = dims(r);
                vec![vec![m, k]]
            },
            build: |t, v, _| {
                let n = t.value(v[0]).len();
                t.reshape(v[0], &[1, n])
            },
            spread: 1.0,
        },
        OpCase {
            name: "sum",
            shapes: |r| {
                let (m, k, _) = dims(r);
                vec![vec![m, k]]
            },
            build: |t, v, _| t.sum(v[0]),
            spread: 1.0,
        },
        OpCase {
            name: "mse",
            shapes: |r| {
                let (m, k, _) = dims(r);
                vec![vec![m, k], vec![m, k]]
            },
            build: |t, v, _| t.mse(v[0], v[1]),
            spread: 1.0,
        },
        OpCase {
            name: "pointwise_linear",
            shapes: |r| {
                let (m, a, b) = dims(r);
                vec![vec![m, a], vec![a, b], vec![b]]
            },
            build: |t, v, _| nn::pointwise_linear(t, v[0], v[1], v[2]),
            spread: 1.0,
        },
    ]
}

/// Loss of one op instance: `Σ R ⊙ out` with `R` fixed by `weight_seed`.
/// Returns `(loss, branch signature, gradients of every input)`.
fn op_loss(
    case: &OpCase,
    inputs: &[Tensor],
    weight_seed: u64,
    fault: Option<OpKind>,
    want_grad: bool,
) -> Result<(f64, u64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    if let Some(k) = fault {
        tape.inject_fault(k);
    }
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param(&format!("in{i}"), t.clone()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(weight_seed);
    let out = (case.build)(&mut tape, &vars, &mut rng)?;
    let weights = random_tensor(&mut rng, tape.value(out).shape());
    let w = tape.constant(weights);
    let prod = tape.mul(out, w)?;
    let loss = tape.sum(prod)?;
    let value = tape.value(loss).item();
    let sig = tape.branch_signature();
    if !want_grad {
        return Ok((value, sig, Vec::new()));
    }
    let grads = tape.backward(loss)?;
    let g = (0..inputs.len())
        .map(|i| grads.get(&format!("in{i}")).expect("registered").clone())
        .collect();
    Ok((value, sig, g))
}

fn check_op(case: &OpCase, opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<CheckLine> {
    let mut line = CheckLine {
        name: case.name.to_string(),
        max_rel_error: 0.0,
        instances: 0,
        probes: 0,
        skipped: 0,
    };
    while line.instances < opts.instances {
        let shapes = (case.shapes)(rng);
        let mut inputs: Vec<Tensor> = shapes
            .iter()
            .map(|s| random_tensor(rng, s).map(|v| v * case.spread))
            .collect();
        let weight_seed = rng.random();
        let (_, sig0, grads) = op_loss(case, &inputs, weight_seed, opts.fault, true)?;
        for (k, g) in grads.iter().enumerate() {
            for i in 0..inputs[k].len() {
                let orig = inputs[k].data()[i];
                inputs[k].data_mut()[i] = orig + opts.h;
                let (plus, sp, _) = op_loss(case, &inputs, weight_seed, None, false)?;
                inputs[k].data_mut()[i] = orig - opts.h;
                let (minus, sm, _) = op_loss(case, &inputs, weight_seed, None, false)?;
                inputs[k].data_mut()[i] = orig;
                if sp != sig0 || sm != sig0 {
                    line.skipped += 1;
                    continue;
                }
                let numeric = (plus - minus) / (2.0 * opts.h);
                line.max_rel_error = line.max_rel_error.max(relative_error(g.data()[i], numeric));
                line.probes += 1;
            }
        }
        line.instances += 1;
    }
    Ok(line)
}

/// Random policy parameters with every tensor non-degenerate: biases,
/// layer-norm affine terms and the bias table are drawn too.
pub fn random_network_params(cfg: &PolicyConfig, rng: &mut ChaCha8Rng) -> Params {
    let mut p = Params::new();
    for spec in cfg.param_plan() {
        let n: usize = spec.shape.iter().product();
        let bound = match spec.init {
            nn::Init::FanInUniform { fan_in } => (1.0 / fan_in.max(1) as f64).sqrt(),
            _ => 0.5,
        };
        let base = if spec.name.ends_with("gamma") { 1.0 } else { 0.0 };
        let data = (0..n).map(|_| base + rng.random_range(-bound..bound)).collect();
        p.insert(spec.name, Tensor::new(spec.shape, data).expect("plan shape"));
    }
    p
}

/// Random labelled cloud and robot state.
pub fn random_observation(cfg: &PolicyConfig, rng: &mut ChaCha8Rng) -> PointCloudObservation {
    let palette = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.5]];
    let mut data = Vec::with_capacity(cfg.n_points * 6);
    for _ in 0..cfg.n_points {
        for _ in 0..3 {
            data.push(rng.random_range(-0.5..0.5));
        }
        data.extend_from_slice(&palette[rng.random_range(0..palette.len())]);
    }
    PointCloudObservation {
        points: Tensor::new(vec![cfg.n_points, 6], data).expect("n×6"),
        robot_state: random_tensor(rng, &[cfg.robot_state_dim]),
    }
}

struct NetworkProbe<'a> {
    cfg: &'a PolicyConfig,
    obs: &'a PointCloudObservation,
    target: &'a Tensor,
}

impl NetworkProbe<'_> {
    /// `(loss, branch signature, similarity count)`.
    fn eval(&self, params: &Params) -> Result<(f64, u64, usize, Tape, Var)> {
        let mut tape = Tape::new();
        let bp = params.bind(&mut tape);
        let trace = forward_on_tape(&mut tape, self.obs, &bp, self.cfg)?;
        let target = tape.constant(self.target.clone());
        let loss = tape.mse(trace.action, target)?;
        Ok((
            tape.value(loss).item(),
            tape.branch_signature(),
            tape.similarity_count(),
            tape,
            loss,
        ))
    }
}

/// Full-network check; one line per parameter tensor, prefixed `label/`.
fn check_network(
    cfg: &PolicyConfig,
    label: &str,
    opts: &GradcheckOptions,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<CheckLine>, usize)> {
    let names: Vec<String> = cfg.param_plan().into_iter().map(|s| s.name).collect();
    let mut lines: Vec<CheckLine> = names
        .iter()
        .map(|n| CheckLine {
            name: format!("{label}/{n}"),
            max_rel_error: 0.0,
            instances: 0,
            probes: 0,
            skipped: 0,
        })
        .collect();
    let mut similarity = 0;
    for _ in 0..opts.instances {
        let mut params = random_network_params(cfg, rng);
        let obs = random_observation(cfg, rng);
        let target = random_tensor(rng, &[1, cfg.action_dim]);
        let probe = NetworkProbe {
            cfg,
            obs: &obs,
            target: &target,
        };
        let (_, sig0, sim, mut tape, loss) = probe.eval(&params)?;
        similarity = sim;
        if let Some(k) = opts.fault {
            tape.inject_fault(k);
        }
        let grads = tape.backward(loss)?;
        for (name, line) in names.iter().zip(lines.iter_mut()) {
            let g = grads.get(name).expect("every parameter gets a gradient").clone();
            let len = g.len();
            let mut done = 0;
            let mut attempts = 0;
            while done < opts.network_coords.min(len) && attempts < 8 * opts.network_coords {
                attempts += 1;
                let i = rng.random_range(0..len);
                let t = params.get_mut(name).expect("bound");
                let orig = t.data()[i];
                t.data_mut()[i] = orig + opts.h;
                let (plus, sp, ..) = probe.eval(&params)?;
                params.get_mut(name).expect("bound").data_mut()[i] = orig - opts.h;
                let (minus, sm, ..) = probe.eval(&params)?;
                params.get_mut(name).expect("bound").data_mut()[i] = orig;
                if sp != sig0 || sm != sig0 {
                    line.skipped += 1;
                    continue;
                }
                let numeric = (plus - minus) / (2.0 * opts.h);
                line.max_rel_error = line.max_rel_error.max(relative_error(g.data()[i], numeric));
                line.probes += 1;
                done += 1;
            }
            line.instances += 1;
        }
    }
    Ok((lines, similarity))
}

/// Every op check, then the full network with attention on and off.
pub fn run_gradcheck(cfg: &PolicyConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut lines = Vec::new();
    for case in cases() {
        lines.push(check_op(&case, opts, &mut rng)?);
    }
    let net = PolicyConfig {
        n_points: opts.network_points,
        attention: true,
        ..cfg.clone()
    };
    let (net_lines, similarity) = check_network(&net, "network", opts, &mut rng)?;
    lines.extend(net_lines);
    let ablated = PolicyConfig {
        attention: false,
        ..net
    };
    let (abl_lines, _) = check_network(&ablated, "no_attention", opts, &mut rng)?;
    lines.extend(abl_lines);
    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        lines,
        similarity_per_forward: similarity,
        elapsed: started.elapsed(),
    })
}

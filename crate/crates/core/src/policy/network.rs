//! Forward pass: skip-connected encoder, guided self-attention, max-pool
//! and action head. Everything is recorded on a [`Tape`] so the same code
//! serves inference and training.

use std::cmp::Ordering;

use crate::autodiff::{Tape, Var};
use crate::nn::{self, BoundParams};
use crate::observation::PointCloudObservation;
use crate::tensor::Tensor;

use super::{CondensedMode, PolicyConfig, PolicyError};

/// Encoder levels P1..P4 and the condensed feature C.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutputs {
    pub p1: Var,
    pub p2: Var,
    pub p3: Var,
    pub p4: Var,
    pub condensed: Var,
}

/// Intermediates of one guided-attention pass.
#[derive(Debug, Clone, Copy)]
pub struct AttentionArtifacts {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub bias: Var,
    pub weights: Var,
    pub output: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardTrace {
    pub encoder: EncoderOutputs,
    /// `None` when attention is ablated.
    pub attention: Option<AttentionArtifacts>,
    pub guided: Var,
    pub pooled: Var,
    /// `[1×action_dim]`.
    pub action: Var,
}

fn param(bp: &BoundParams, name: &str) -> Result<Var, PolicyError> {
    bp.get(name).ok_or_else(|| PolicyError::MissingParam(name.to_string()))
}

pub fn encode(
    tape: &mut Tape,
    cloud: Var,
    bp: &BoundParams,
    cfg: &PolicyConfig,
) -> Result<EncoderOutputs, PolicyError> {
    let shape = tape.value(cloud).shape().to_vec();
    if shape.len() != 2 || shape[1] != cfg.channel_plan[0] {
        return Err(PolicyError::Shape {
            what: "cloud channels",
            expected: cfg.channel_plan[0],
            actual: *shape.last().unwrap_or(&0),
        });
    }
    if shape[0] != cfg.n_points {
        return Err(PolicyError::Shape {
            what: "cloud points",
            expected: cfg.n_points,
            actual: shape[0],
        });
    }
    let mut levels = [cloud; 4];
    for stage in 0..3 {
        let p = format!("enc{}", stage + 1);
        let w = param(bp, &format!("{p}.weight"))?;
        let b = param(bp, &format!("{p}.bias"))?;
        let gamma = param(bp, &format!("{p}.ln.gamma"))?;
        let beta = param(bp, &format!("{p}.ln.beta"))?;
        let h = nn::pointwise_linear(tape, levels[stage], w, b)?;
        let h = nn::layer_norm(tape, h, gamma, beta)?;
        levels[stage + 1] = tape.relu(h)?;
    }
    let [p1, p2, p3, p4] = levels;
    let condensed = match cfg.condensed_mode {
        CondensedMode::Levels234 => tape.concat_cols(&[p2, p3, p4])?,
        CondensedMode::Levels123 => tape.concat_cols(&[p1, p2, p3])?,
    };
    Ok(EncoderOutputs {
        p1,
        p2,
        p3,
        p4,
        condensed,
    })
}

/// Distance bucket of every point pair, row-major `N×N`.
pub fn bias_buckets(xyz: &Tensor, cfg: &PolicyConfig) -> Vec<usize> {
    let n = xyz.rows();
    let last = cfg.bias_buckets - 1;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        let a = xyz.row(i);
        for j in 0..n {
            let b = xyz.row(j);
            let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
            let bucket = (d / cfg.bias_max_dist * cfg.bias_buckets as f64).floor();
            out.push((bucket as usize).min(last));
        }
    }
    out
}

/// `B[i, j] = table[bucket(‖xyzᵢ − xyzⱼ‖)]`.
pub fn pairwise_bias(
    tape: &mut Tape,
    xyz: &Tensor,
    table: Var,
    cfg: &PolicyConfig,
) -> Result<Var, PolicyError> {
    let n = xyz.rows();
    Ok(tape.gather(table, bias_buckets(xyz, cfg), &[n, n])?)
}

/// `G = softmax(Q·Kᵀ/√d_k + B)·V` with `Q = C·W_Q`, `K = P4` (projected
/// only when its width differs from `d_k`) and `V = C`.
pub fn guided_attention(
    tape: &mut Tape,
    enc: &EncoderOutputs,
    xyz: &Tensor,
    bp: &BoundParams,
    cfg: &PolicyConfig,
) -> Result<AttentionArtifacts, PolicyError> {
    let n = tape.value(enc.condensed).rows();
    if xyz.rows() != n || xyz.cols() != 3 {
        return Err(PolicyError::Shape {
            what: "attention xyz rows",
            expected: n,
            actual: xyz.rows(),
        });
    }
    let query = tape.matmul(enc.condensed, param(bp, "attn.query.weight")?)?;
    let key = if cfg.key_projected() {
        tape.matmul(enc.p4, param(bp, "attn.key.weight")?)?
    } else {
        enc.p4
    };
    let value = enc.condensed;
    let scores = tape.matmul_nt(query, key)?;
    let scores = tape.scale(scores, 1.0 / (cfg.d_k as f64).sqrt())?;
    let bias = pairwise_bias(tape, xyz, param(bp, "attn.bias_table")?, cfg)?;
    let logits = tape.add(scores, bias)?;
    let weights = tape.softmax_rows(logits)?;
    let output = tape.matmul(weights, value)?;
    Ok(AttentionArtifacts {
        query,
        key,
        value,
        bias,
        weights,
        output,
    })
}

/// `f = max(concat(G, P4))`, then `action = head(concat(f, robot_state))`.
/// Returns `(f, action)` with `action` shaped `[1×action_dim]`.
pub fn pool_and_act(
    tape: &mut Tape,
    guided: Var,
    p4: Var,
    robot_state: Var,
    bp: &BoundParams,
    cfg: &PolicyConfig,
) -> Result<(Var, Var), PolicyError> {
    let rs_len = tape.value(robot_state).len();
    if rs_len != cfg.robot_state_dim {
        return Err(PolicyError::Shape {
            what: "robot state",
            expected: cfg.robot_state_dim,
            actual: rs_len,
        });
    }
    let features = tape.concat_cols(&[guided, p4])?;
    let pooled = tape.reduce_max_points(features)?;
    let width = tape.value(pooled).len();
    let pooled_row = tape.reshape(pooled, &[1, width])?;
    let state_row = tape.reshape(robot_state, &[1, rs_len])?;
    let head_in = tape.concat_cols(&[pooled_row, state_row])?;
    let h = nn::pointwise_linear(
        tape,
        head_in,
        param(bp, "head.fc1.weight")?,
        param(bp, "head.fc1.bias")?,
    )?;
    let h = tape.relu(h)?;
    let action = nn::pointwise_linear(
        tape,
        h,
        param(bp, "head.fc2.weight")?,
        param(bp, "head.fc2.bias")?,
    )?;
    Ok((pooled, action))
}

/// Cloud rows sorted lexicographically. Every point-axis reduction then
/// runs in the same order for any permutation of the input, which makes
/// the forward pass bit-exactly permutation invariant.
pub fn canonical_cloud(points: &Tensor) -> Tensor {
    let n = points.rows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        points
            .row(a)
            .iter()
            .zip(points.row(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    let c = points.cols();
    let data = order
        .iter()
        .flat_map(|&i| points.row(i).iter().copied())
        .collect();
    Tensor::new(vec![n, c], data).expect("reordering keeps extents")
}

pub fn forward_on_tape(
    tape: &mut Tape,
    obs: &PointCloudObservation,
    bp: &BoundParams,
    cfg: &PolicyConfig,
) -> Result<ForwardTrace, PolicyError> {
    let cloud_t = canonical_cloud(&obs.points);
    let xyz = PointCloudObservation {
        points: cloud_t.clone(),
        robot_state: obs.robot_state.clone(),
    }
    .xyz();
    let cloud = tape.constant(cloud_t);
    let robot_state = tape.constant(obs.robot_state.clone());
    let encoder = encode(tape, cloud, bp, cfg)?;
    let (attention, guided) = if cfg.attention {
        let a = guided_attention(tape, &encoder, &xyz, bp, cfg)?;
        (Some(a), a.output)
    } else {
        let g = nn::pointwise_linear(
            tape,
            encoder.p4,
            param(bp, "proj.weight")?,
            param(bp, "proj.bias")?,
        )?;
        (None, g)
    };
    let (pooled, action) = pool_and_act(tape, guided, encoder.p4, robot_state, bp, cfg)?;
    Ok(ForwardTrace {
        encoder,
        attention,
        guided,
        pooled,
        action,
    })
}

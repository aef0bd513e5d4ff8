use std::fmt;
use std::str::FromStr;

use crate::nn::{Init, ParamSpec};

use super::PolicyError;

/// Which encoder levels are concatenated into the condensed feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CondensedMode {
    /// `concat(P2, P3, P4)`: 64 + 128 + 512 = 704 channels by default.
    Levels234,
    /// `concat(P1, P2, P3)`: 6 + 64 + 128 = 198 channels by default.
    Levels123,
}

impl fmt::Display for CondensedMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CondensedMode::Levels234 => "PAPER_TEXT_704",
            CondensedMode::Levels123 => "EQ2_LITERAL_198",
        })
    }
}

impl FromStr for CondensedMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "PAPER_TEXT_704" => Ok(CondensedMode::Levels234),
            "EQ2_LITERAL_198" => Ok(CondensedMode::Levels123),
            other => Err(format!(
                "unknown condensed mode {other:?} (expected PAPER_TEXT_704 or EQ2_LITERAL_198)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub n_points: usize,
    /// Channel counts of P1..P4; the three encoder stages map
    /// `plan[i] → plan[i + 1]`.
    pub channel_plan: [usize; 4],
    pub condensed_mode: CondensedMode,
    pub d_k: usize,
    pub bias_buckets: usize,
    pub bias_max_dist: f64,
    pub robot_state_dim: usize,
    pub action_dim: usize,
    pub head_hidden: usize,
    /// `false` swaps guided attention for a pointwise projection of P4.
    pub attention: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            n_points: 1200,
            channel_plan: [6, 64, 128, 512],
            condensed_mode: CondensedMode::Levels234,
            d_k: 512,
            bias_buckets: 16,
            bias_max_dist: 2.0,
            robot_state_dim: 7,
            action_dim: 4,
            head_hidden: 256,
            attention: true,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let positive = [
            ("n_points", self.n_points),
            ("d_k", self.d_k),
            ("bias_buckets", self.bias_buckets),
            ("robot_state_dim", self.robot_state_dim),
            ("action_dim", self.action_dim),
            ("head_hidden", self.head_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(PolicyError::Config(format!("{name} must be positive")));
            }
        }
        if self.channel_plan.iter().any(|&c| c == 0) {
            return Err(PolicyError::Config("channel plan extents must be positive".into()));
        }
        if self.channel_plan[0] != 6 {
            return Err(PolicyError::Config(format!(
                "input clouds carry 6 channels, plan starts at {}",
                self.channel_plan[0]
            )));
        }
        if !(self.bias_max_dist > 0.0 && self.bias_max_dist.is_finite()) {
            return Err(PolicyError::Config("bias_max_dist must be positive".into()));
        }
        Ok(())
    }

    pub fn condensed_channels(&self) -> usize {
        let [c1, c2, c3, c4] = self.channel_plan;
        match self.condensed_mode {
            CondensedMode::Levels234 => c2 + c3 + c4,
            CondensedMode::Levels123 => c1 + c2 + c3,
        }
    }

    /// Width of `max(concat(G, P4))`.
    pub fn pooled_dim(&self) -> usize {
        self.condensed_channels() + self.channel_plan[3]
    }

    /// Keys are P4 itself unless its width differs from `d_k`.
    pub fn key_projected(&self) -> bool {
        self.channel_plan[3] != self.d_k
    }

    /// Every trainable tensor with its shape and initial distribution.
    pub fn param_plan(&self) -> Vec<ParamSpec> {
        let mut plan = Vec::new();
        for stage in 0..3 {
            let (cin, cout) = (self.channel_plan[stage], self.channel_plan[stage + 1]);
            let p = format!("enc{}", stage + 1);
            plan.push(ParamSpec::new(format!("{p}.weight"), &[cin, cout], Init::FanInUniform { fan_in: cin }));
            plan.push(ParamSpec::new(format!("{p}.bias"), &[cout], Init::Zeros));
            plan.push(ParamSpec::new(format!("{p}.ln.gamma"), &[cout], Init::Ones));
            plan.push(ParamSpec::new(format!("{p}.ln.beta"), &[cout], Init::Zeros));
        }
        let cc = self.condensed_channels();
        let c4 = self.channel_plan[3];
        if self.attention {
            plan.push(ParamSpec::new("attn.query.weight", &[cc, self.d_k], Init::FanInUniform { fan_in: cc }));
            if self.key_projected() {
                plan.push(ParamSpec::new("attn.key.weight", &[c4, self.d_k], Init::FanInUniform { fan_in: c4 }));
            }
            plan.push(ParamSpec::new("attn.bias_table", &[self.bias_buckets], Init::Zeros));
        } else {
            plan.push(ParamSpec::new("proj.weight", &[c4, cc], Init::FanInUniform { fan_in: c4 }));
            plan.push(ParamSpec::new("proj.bias", &[cc], Init::Zeros));
        }
        let head_in = self.pooled_dim() + self.robot_state_dim;
        plan.push(ParamSpec::new("head.fc1.weight", &[head_in, self.head_hidden], Init::FanInUniform { fan_in: head_in }));
        plan.push(ParamSpec::new("head.fc1.bias", &[self.head_hidden], Init::Zeros));
        plan.push(ParamSpec::new(
            "head.fc2.weight",
            &[self.head_hidden, self.action_dim],
            Init::FanInUniform { fan_in: self.head_hidden },
        ));
        plan.push(ParamSpec::new("head.fc2.bias", &[self.action_dim], Init::Zeros));
        plan
    }

    /// `key = value` lines, the same syntax the run config uses.
    pub fn to_text(&self) -> String {
        let p = self.channel_plan;
        format!(
            "n_points = {}\nchannel_plan = {},{},{},{}\ncondensed_mode = {}\nd_k = {}\n\
             bias_buckets = {}\nbias_max_dist = {:?}\nrobot_state_dim = {}\naction_dim = {}\n\
             head_hidden = {}\nattention = {}\n",
            self.n_points,
            p[0],
            p[1],
            p[2],
            p[3],
            self.condensed_mode,
            self.d_k,
            self.bias_buckets,
            self.bias_max_dist,
            self.robot_state_dim,
            self.action_dim,
            self.head_hidden,
            self.attention
        )
    }

    /// Applies one `key = value` setting. Returns `Ok(false)` for keys this
    /// type does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, String> {
        fn num<T: FromStr>(v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("cannot parse {v:?} as a number"))
        }
        match key {
            "n_points" => self.n_points = num(value)?,
            "channel_plan" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|s| num(s.trim()))
                    .collect::<Result<_, _>>()?;
                self.channel_plan = parts
                    .try_into()
                    .map_err(|_| "channel_plan needs four comma-separated extents".to_string())?;
            }
            "condensed_mode" => self.condensed_mode = value.parse()?,
            "d_k" => self.d_k = num(value)?,
            "bias_buckets" => self.bias_buckets = num(value)?,
            "bias_max_dist" => self.bias_max_dist = num(value)?,
            "robot_state_dim" => self.robot_state_dim = num(value)?,
            "action_dim" => self.action_dim = num(value)?,
            "head_hidden" => self.head_hidden = num(value)?,
            "attention" => {
                self.attention = value
                    .parse()
                    .map_err(|_| format!("expected true or false, got {value:?}"))?
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_widths() {
        let cfg = PolicyConfig::default();
        assert_eq!(cfg.condensed_channels(), 704);
        assert_eq!(cfg.pooled_dim(), 1216);
        assert!(!cfg.key_projected());
        let literal = PolicyConfig {
            condensed_mode: CondensedMode::Levels123,
            ..cfg
        };
        assert_eq!(literal.condensed_channels(), 198);
    }

    #[test]
    fn text_round_trip() {
        let cfg = PolicyConfig {
            n_points: 32,
            channel_plan: [6, 8, 16, 24],
            d_k: 12,
            bias_max_dist: 0.1 + 0.2,
            attention: false,
            ..PolicyConfig::default()
        };
        let mut back = PolicyConfig::default();
        for line in cfg.to_text().lines() {
            let (k, v) = line.split_once('=').unwrap();
            assert!(back.set(k.trim(), v.trim()).unwrap());
        }
        assert_eq!(back, cfg);
    }
}

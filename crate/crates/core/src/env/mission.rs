use serde::{Deserialize, Serialize};

use super::EnvError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissionKind {
    /// Closed room; agent and goal spawn on opposite fixed columns.
    Basic,
    /// Straight walkway ringed by lava with the goal block past its far end.
    CliffWalking,
    /// One-cell booth facing north with two identical doors. A sign in the
    /// first frame tells which door hides the goal; the doors stay shut for
    /// `cue_delay` steps and turning does nothing.
    CueCorridor,
}

impl MissionKind {
    pub fn id(self) -> &'static str {
        match self {
            MissionKind::Basic => "basic",
            MissionKind::CliffWalking => "cliff-walking",
            MissionKind::CueCorridor => "cue-corridor",
        }
    }
}

impl std::str::FromStr for MissionKind {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "basic" => Ok(MissionKind::Basic),
            "cliff-walking" | "cliff" => Ok(MissionKind::CliffWalking),
            "cue-corridor" => Ok(MissionKind::CueCorridor),
            other => Err(EnvError::InvalidMission(format!(
                "unknown mission kind `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSpec {
    /// Added on every step, including the terminal one.
    pub step: f32,
    /// Added on top when the goal is reached.
    pub win: f32,
    /// Added on top for lava or for exhausting the step budget.
    pub loss: f32,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            step: -0.01,
            win: 1.0,
            loss: -1.0,
        }
    }
}

fn default_resolution() -> usize {
    32
}

fn default_cue_delay() -> u32 {
    3
}

/// Static description of a mission.
///
/// For `basic`, `width`×`height` is the walkable room. For `cliff-walking`,
/// `width` is the walkway length and `height` its breadth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mission {
    pub kind: MissionKind,
    pub width: usize,
    pub height: usize,
    pub max_steps: u32,
    #[serde(default)]
    pub rewards: RewardSpec,
    /// Side length of the rendered square frame.
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    /// Only used by `cue-corridor`.
    #[serde(default = "default_cue_delay")]
    pub cue_delay: u32,
    /// Default seed for spawn placement.
    #[serde(default)]
    pub seed: u64,
}

impl Mission {
    pub fn basic() -> Self {
        Self {
            kind: MissionKind::Basic,
            width: 7,
            height: 7,
            max_steps: 40,
            rewards: RewardSpec::default(),
            resolution: default_resolution(),
            cue_delay: default_cue_delay(),
            seed: 0,
        }
    }

    pub fn cliff_walking() -> Self {
        Self {
            kind: MissionKind::CliffWalking,
            width: 8,
            height: 3,
            max_steps: 70,
            ..Self::basic()
        }
    }

    pub fn cue_corridor() -> Self {
        Self {
            kind: MissionKind::CueCorridor,
            width: 1,
            height: 1,
            max_steps: 4,
            ..Self::basic()
        }
    }

    pub fn preset(kind: MissionKind) -> Self {
        match kind {
            MissionKind::Basic => Self::basic(),
            MissionKind::CliffWalking => Self::cliff_walking(),
            MissionKind::CueCorridor => Self::cue_corridor(),
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |msg: String| Err(EnvError::InvalidMission(msg));
        if self.width == 0 || self.height == 0 {
            return bad(format!("empty grid {}x{}", self.width, self.height));
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive".into());
        }
        if self.resolution < 2 {
            return bad(format!("resolution {} too small", self.resolution));
        }
        if self.kind == MissionKind::Basic && self.width < 2 {
            return bad("basic room needs at least two columns".into());
        }
        let r = self.rewards;
        if !(r.step.is_finite() && r.win.is_finite() && r.loss.is_finite()) {
            return bad("rewards must be finite".into());
        }
        Ok(())
    }

    /// Parses the key-value mission file format.
    pub fn from_text(text: &str) -> Result<Self, EnvError> {
        let mission: Mission =
            toml::from_str(text).map_err(|e| EnvError::InvalidMission(e.to_string()))?;
        mission.validate()?;
        Ok(mission)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("mission serializes")
    }
}

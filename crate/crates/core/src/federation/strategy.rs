use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::LayerMode;
use crate::nn::{Role, RoleSet};

/// Constant individual-branch weight used by the fixed-weight ablation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FixedAlpha {
    Value(f64),
    /// `1/K` for `K` clients.
    InverseClients,
}

impl FixedAlpha {
    pub fn resolve(self, clients: usize) -> f64 {
        match self {
            FixedAlpha::Value(a) => a,
            FixedAlpha::InverseClients => 1.0 / clients.max(1) as f64,
        }
    }
}

/// Server behavior and the matching client trainable/shared sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Strategy {
    /// Frozen Rest-of-World adapter plus a local mixer.
    FedAlt,
    /// FedAvg over both adapter matrices.
    FedIt,
    /// A frozen at a shared init, B averaged.
    Ffa,
    /// A averaged, B kept local.
    FedSa,
    LocalOnly,
    /// Both branches trained locally; the server averages the RoW branches.
    RowUpdate { rank: usize },
    /// Constant mixing weight instead of the mixer.
    FixedWeight(FixedAlpha),
    /// Mixer averaged across clients.
    AvgMixer,
    /// Server broadcasts the global mean; clients subtract themselves.
    GlobalAvgRow,
}

impl Strategy {
    pub fn layer_mode(self, clients: usize) -> LayerMode {
        match self {
            Strategy::FedAlt | Strategy::RowUpdate { .. } | Strategy::AvgMixer | Strategy::GlobalAvgRow => LayerMode::FedAlt,
            Strategy::FixedWeight(a) => LayerMode::Fixed(a.resolve(clients)),
            Strategy::FedIt | Strategy::Ffa | Strategy::FedSa | Strategy::LocalOnly => LayerMode::Single,
        }
    }

    /// Whether client models carry a RoW branch.
    pub fn uses_row(self) -> bool {
        !matches!(self, Strategy::FedIt | Strategy::Ffa | Strategy::FedSa | Strategy::LocalOnly)
    }

    pub fn trainable_roles(self) -> RoleSet {
        use Role::*;
        match self {
            Strategy::FedAlt | Strategy::AvgMixer | Strategy::GlobalAvgRow => RoleSet::of(&[IndividualA, IndividualB, Mixer]),
            Strategy::RowUpdate { .. } => RoleSet::of(&[IndividualA, IndividualB, RowA, RowB, Mixer]),
            Strategy::FixedWeight(_) | Strategy::FedIt | Strategy::FedSa | Strategy::LocalOnly => RoleSet::of(&[IndividualA, IndividualB]),
            Strategy::Ffa => RoleSet::of(&[IndividualB]),
        }
    }

    /// Roles a client sends to the server each round.
    pub fn upload_roles(self) -> RoleSet {
        use Role::*;
        match self {
            Strategy::FedAlt | Strategy::GlobalAvgRow | Strategy::FixedWeight(_) | Strategy::FedIt => RoleSet::of(&[IndividualA, IndividualB]),
            Strategy::AvgMixer => RoleSet::of(&[IndividualA, IndividualB, Mixer]),
            Strategy::RowUpdate { .. } => RoleSet::of(&[RowA, RowB]),
            Strategy::Ffa => RoleSet::of(&[IndividualB]),
            Strategy::FedSa => RoleSet::of(&[IndividualA]),
            Strategy::LocalOnly => RoleSet::EMPTY,
        }
    }

    /// Roles the server sends back to each client.
    pub fn broadcast_roles(self) -> RoleSet {
        use Role::*;
        match self {
            Strategy::FedAlt | Strategy::FixedWeight(_) | Strategy::RowUpdate { .. } => RoleSet::of(&[RowA, RowB]),
            Strategy::AvgMixer => RoleSet::of(&[RowA, RowB, Mixer]),
            // the global mean of the individual adapters
            Strategy::GlobalAvgRow | Strategy::FedIt => RoleSet::of(&[IndividualA, IndividualB]),
            Strategy::Ffa => RoleSet::of(&[IndividualB]),
            Strategy::FedSa => RoleSet::of(&[IndividualA]),
            Strategy::LocalOnly => RoleSet::EMPTY,
        }
    }

    /// Adapter rank forced by the strategy, if any.
    pub fn rank_override(self) -> Option<usize> {
        match self {
            Strategy::RowUpdate { rank } => Some(rank),
            _ => None,
        }
    }

    pub fn validate(self, clients: usize) -> Result<()> {
        if self.uses_row() && clients < 2 {
            return Err(Error::RowUndefined(clients));
        }
        match self {
            Strategy::RowUpdate { rank: 0 } => Err(Error::config("strategy", "row-update rank must be positive")),
            Strategy::FixedWeight(FixedAlpha::Value(a)) if !(0.0..=1.0).contains(&a) => Err(Error::InvalidAlpha(a)),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::FedAlt => f.write_str("fedalt"),
            Strategy::FedIt => f.write_str("fedit"),
            Strategy::Ffa => f.write_str("ffa"),
            Strategy::FedSa => f.write_str("fedsa"),
            Strategy::LocalOnly => f.write_str("local"),
            Strategy::RowUpdate { rank } => write!(f, "row-update:{rank}"),
            Strategy::FixedWeight(FixedAlpha::Value(a)) => write!(f, "fixed:{a}"),
            Strategy::FixedWeight(FixedAlpha::InverseClients) => f.write_str("fixed:1/k"),
            Strategy::AvgMixer => f.write_str("avg-mixer"),
            Strategy::GlobalAvgRow => f.write_str("global-avg-row"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config("strategy", format!("unknown strategy `{s}`"));
        let lower = s.trim().to_ascii_lowercase();
        Ok(match lower.as_str() {
            "fedalt" => Strategy::FedAlt,
            "fedit" | "fedavg" => Strategy::FedIt,
            "ffa" | "ffa-lora" => Strategy::Ffa,
            "fedsa" => Strategy::FedSa,
            "local" | "local-only" | "localonly" => Strategy::LocalOnly,
            "avg-mixer" => Strategy::AvgMixer,
            "global-avg-row" => Strategy::GlobalAvgRow,
            other => {
                if let Some(rank) = other.strip_prefix("row-update:") {
                    Strategy::RowUpdate {
                        rank: rank.parse().map_err(|_| bad())?,
                    }
                } else if let Some(alpha) = other.strip_prefix("fixed:") {
                    if alpha == "1/k" {
                        Strategy::FixedWeight(FixedAlpha::InverseClients)
                    } else {
                        Strategy::FixedWeight(FixedAlpha::Value(alpha.parse().map_err(|_| bad())?))
                    }
                } else {
                    return Err(bad());
                }
            }
        })
    }
}

impl TryFrom<String> for Strategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ALL: [Strategy; 10] = [
        Strategy::FedAlt,
        Strategy::FedIt,
        Strategy::Ffa,
        Strategy::FedSa,
        Strategy::LocalOnly,
        Strategy::RowUpdate { rank: 4 },
        Strategy::FixedWeight(FixedAlpha::Value(0.5)),
        Strategy::FixedWeight(FixedAlpha::InverseClients),
        Strategy::AvgMixer,
        Strategy::GlobalAvgRow,
    ];

    #[test]
    fn tags_round_trip() {
        for s in ALL {
            assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
        }
        assert!("fedprox".parse::<Strategy>().is_err());
    }

    #[test]
    fn mixer_only_uploaded_by_the_averaged_mixer_ablation() {
        for s in ALL {
            assert_eq!(s.upload_roles().contains(Role::Mixer), s == Strategy::AvgMixer, "{s}");
        }
    }

    #[test]
    fn row_strategies_need_two_clients() {
        assert!(matches!(Strategy::FedAlt.validate(1), Err(Error::RowUndefined(1))));
        assert!(Strategy::FedIt.validate(1).is_ok());
        assert!(Strategy::LocalOnly.validate(1).is_ok());
    }

    #[test]
    fn fixed_alpha_resolution() {
        assert_eq!(FixedAlpha::InverseClients.resolve(8), 0.125);
        assert_eq!(Strategy::FixedWeight(FixedAlpha::InverseClients).layer_mode(4), LayerMode::Fixed(0.25));
    }
}

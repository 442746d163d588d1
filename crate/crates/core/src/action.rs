use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Three-way discrete control, or the all-zero vector used for unlabeled data.
///
/// Index map of the one-hot encoding: 0 = forward, 1 = left, 2 = right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionCommand {
    Forward,
    Left,
    Right,
    /// No action supervision.
    Zero,
}

impl ActionCommand {
    pub const COMMANDS: [ActionCommand; 3] =
        [ActionCommand::Forward, ActionCommand::Left, ActionCommand::Right];

    pub fn one_hot(self) -> [f32; 3] {
        match self {
            ActionCommand::Forward => [1.0, 0.0, 0.0],
            ActionCommand::Left => [0.0, 1.0, 0.0],
            ActionCommand::Right => [0.0, 0.0, 1.0],
            ActionCommand::Zero => [0.0; 3],
        }
    }

    /// Parses a 3-vector. Entries must be exactly 0 or 1 and sum to at most 1.
    pub fn from_vector(v: &[f32]) -> Result<Self> {
        if v.len() != 3 || v.iter().any(|&x| x != 0.0 && x != 1.0) {
            return Err(Error::MalformedAction(v.to_vec()));
        }
        match v.iter().position(|&x| x == 1.0) {
            None => Ok(ActionCommand::Zero),
            Some(_) if v.iter().filter(|&&x| x == 1.0).count() > 1 => {
                Err(Error::MalformedAction(v.to_vec()))
            }
            Some(i) => Ok(ActionCommand::COMMANDS[i]),
        }
    }

    /// Byte code used in episode files.
    pub fn code(self) -> Option<u8> {
        match self {
            ActionCommand::Forward => Some(0),
            ActionCommand::Left => Some(1),
            ActionCommand::Right => Some(2),
            ActionCommand::Zero => None,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        ActionCommand::COMMANDS
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("action code {code}")))
    }

    pub fn is_command(self) -> bool {
        self != ActionCommand::Zero
    }

    /// Rejects the zero vector; used wherever a real command is required.
    pub fn require_command(self) -> Result<Self> {
        if self.is_command() {
            Ok(self)
        } else {
            Err(Error::ZeroAction)
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ActionCommand::Forward => "forward",
            ActionCommand::Left => "left",
            ActionCommand::Right => "right",
            ActionCommand::Zero => "zero",
        }
    }
}

impl fmt::Display for ActionCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parses the three user-facing commands. `"zero"` is deliberately not accepted.
impl FromStr for ActionCommand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(ActionCommand::Forward),
            "left" => Ok(ActionCommand::Left),
            "right" => Ok(ActionCommand::Right),
            other => Err(Error::UnknownAction(other.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vector_round_trip() {
        for a in [ActionCommand::Forward, ActionCommand::Left, ActionCommand::Right, ActionCommand::Zero] {
            assert_eq!(ActionCommand::from_vector(&a.one_hot()).unwrap(), a);
        }
    }

    #[test]
    fn malformed_vectors_rejected() {
        assert!(ActionCommand::from_vector(&[1.0, 1.0, 0.0]).is_err());
        assert!(ActionCommand::from_vector(&[0.5, 0.0, 0.0]).is_err());
        assert!(ActionCommand::from_vector(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn parse_rejects_unknown() {
        assert_eq!("left".parse::<ActionCommand>().unwrap(), ActionCommand::Left);
        assert!("jump".parse::<ActionCommand>().is_err());
        assert!("zero".parse::<ActionCommand>().is_err());
        assert!(ActionCommand::Zero.require_command().is_err());
    }
}

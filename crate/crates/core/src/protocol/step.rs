use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Sub-step of one outer iteration, cycling `MuSigma → Gamma → DeltaTheta`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StepLabel {
    MuSigma,
    Gamma,
    DeltaTheta,
}

impl StepLabel {
    pub const ALL: [StepLabel; 3] = [StepLabel::MuSigma, StepLabel::Gamma, StepLabel::DeltaTheta];

    pub fn next(self) -> StepLabel {
        match self {
            StepLabel::MuSigma => StepLabel::Gamma,
            StepLabel::Gamma => StepLabel::DeltaTheta,
            StepLabel::DeltaTheta => StepLabel::MuSigma,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        StepLabel::ALL
            .get(v as usize)
            .copied()
            .ok_or_else(|| Error::Wire(format!("invalid sub-step label {v}")))
    }
}

impl fmt::Display for StepLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StepLabel::MuSigma => "mu_sigma",
            StepLabel::Gamma => "gamma",
            StepLabel::DeltaTheta => "delta_theta",
        })
    }
}

impl FromStr for StepLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mu_sigma" => Ok(StepLabel::MuSigma),
            "gamma" => Ok(StepLabel::Gamma),
            "delta_theta" => Ok(StepLabel::DeltaTheta),
            other => Err(Error::Input(format!("unknown sub-step '{other}'"))),
        }
    }
}

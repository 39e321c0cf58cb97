//! Exit codes, number formatting and the single output writer.

use std::fmt;
use std::io::Write;
use std::path::Path;

use spinfact::error::Error;

pub const EXIT_PARSE: u8 = 1;
pub const EXIT_NO_ANGLE: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;
pub const EXIT_VERDICT: u8 = 4;

#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config files or parameters.
    Input(String),
    Library(Error),
    /// The check ran and the state is not an exact eigenstate.
    Verdict(String),
    Io(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Input(_) | Failure::Io(_) => EXIT_PARSE,
            Failure::Verdict(_) => EXIT_VERDICT,
            Failure::Library(e) => match e {
                Error::NoRealAngle(_) => EXIT_NO_ANGLE,
                Error::NoConvergence(_) | Error::CapExceeded { .. } | Error::NotHermitian(_) | Error::LinearlyDependent { .. } => {
                    EXIT_NUMERICAL
                }
                _ => EXIT_PARSE,
            },
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Input(m) | Failure::Verdict(m) | Failure::Io(m) => f.write_str(m),
            Failure::Library(Error::NoRealAngle(r)) => write!(f, "no real xi: |ratio| = {r} exceeds 1"),
            Failure::Library(e @ Error::CapExceeded { .. }) => write!(f, "{e}; pass --lowest k for the iterative solver"),
            Failure::Library(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Library(e)
    }
}

/// 17 significant digits, round-trip safe.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// Every file or stdout write goes through here.
pub fn emit(text: &str, path: Option<&Path>) -> Result<(), Failure> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::Io(format!("{}: {e}", p.display()))),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).and_then(|_| out.flush()).map_err(|e| Failure::Io(e.to_string()))
        }
    }
}

pub fn json<T: serde::Serialize>(value: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(value).map(|s| s + "\n").map_err(|e| Failure::Io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for x in [1.0 / 3.0, -1.118033988749895, 1e-300, 0.0] {
            assert_eq!(num(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(Failure::from(Error::NoRealAngle(1.2)).code(), 2);
        assert_eq!(Failure::from(Error::NoConvergence(1.0)).code(), 3);
        assert_eq!(Failure::from(Error::InvalidArgument("x".into())).code(), 1);
        assert_eq!(Failure::Verdict("no".into()).code(), 4);
    }
}

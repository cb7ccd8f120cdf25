use std::fmt;
use std::process::ExitCode;

/// A command failure carrying the process exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

pub const VERIFICATION: u8 = 1;
pub const INPUT: u8 = 2;
pub const NUMERICAL: u8 = 3;

impl Failure {
    pub fn input(message: impl Into<String>) -> Self {
        Failure {
            code: INPUT,
            message: message.into(),
        }
    }

    pub fn verification(message: impl Into<String>) -> Self {
        Failure {
            code: VERIFICATION,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<mtda_core::Error> for Failure {
    fn from(e: mtda_core::Error) -> Self {
        let code = match e {
            mtda_core::Error::NonFinite { .. } => NUMERICAL,
            _ => INPUT,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = Result<T, Failure>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn core_errors_map_to_exit_codes() {
        let nan: Failure = mtda_core::Error::NonFinite { step: 7 }.into();
        assert_eq!(nan.code, NUMERICAL);
        assert!(nan.message.contains("step 7"));
        let cfg: Failure = mtda_core::Error::Config(vec!["x".into()]).into();
        assert_eq!(cfg.code, INPUT);
    }
}

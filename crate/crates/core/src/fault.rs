//! Deliberate defects for checking that the verification suites catch them.
//! Off unless a caller switches one on.

use std::sync::atomic::{AtomicBool, Ordering};

static NORMALIZE_SYM_SIGN: AtomicBool = AtomicBool::new(false);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Symmetric normalization computes `D^{-1/2} M̂ D^{+1/2}`.
    NormalizeSymSign,
}

impl Fault {
    pub fn name(self) -> &'static str {
        match self {
            Fault::NormalizeSymSign => "normalize-sym-sign",
        }
    }
}

impl std::str::FromStr for Fault {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "normalize-sym-sign" => Ok(Fault::NormalizeSymSign),
            other => Err(crate::Error::Usage(format!("unknown fault `{other}`"))),
        }
    }
}

pub fn set(fault: Fault, on: bool) {
    match fault {
        Fault::NormalizeSymSign => NORMALIZE_SYM_SIGN.store(on, Ordering::Relaxed),
    }
}

pub(crate) fn active(fault: Fault) -> bool {
    match fault {
        Fault::NormalizeSymSign => NORMALIZE_SYM_SIGN.load(Ordering::Relaxed),
    }
}

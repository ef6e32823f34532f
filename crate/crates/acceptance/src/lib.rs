//! Acceptance criteria for the workspace. Each criterion is a function
//! returning a [`Check`]; the `acceptance` test target runs them in order,
//! single-threaded at the top level so the timing criteria are not disturbed.

pub mod crypto;
pub mod evaluation;
pub mod learning;
pub mod wire;

use std::time::Duration;

#[derive(Debug, Clone)]
pub struct Check {
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

pub fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

use std::io::Write;
use std::sync::atomic::Ordering;

use anyhow::Result;
use clap::{Args, ValueEnum};

use xq_core::autograd::{grad_check, standard_layer_set, FLIP_GELU_BACKWARD};

/// Largest relative error accepted in 64-bit mode.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Fault {
    /// Negate the GELU backward rule.
    Gelu,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Deliberately break a backward rule (mutation test of the checker).
    #[arg(long, hide = true)]
    pub inject_fault: Option<Fault>,
}

pub fn run(a: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    if let Some(Fault::Gelu) = a.inject_fault {
        FLIP_GELU_BACKWARD.store(true, Ordering::SeqCst);
    }
    let mut failing = Vec::new();
    for (name, spec) in standard_layer_set() {
        let err = grad_check(&spec, a.seed)?;
        let ok = err < TOLERANCE;
        writeln!(out, "{name:<40} max_rel_error={err:.3e} {}", if ok { "ok" } else { "FAIL" })?;
        if !ok {
            failing.push(name);
        }
    }
    FLIP_GELU_BACKWARD.store(false, Ordering::SeqCst);
    if failing.is_empty() {
        writeln!(out, "all layers within {TOLERANCE:e}")?;
        Ok(0)
    } else {
        writeln!(out, "failing layer: {}", failing.join(", "))?;
        Ok(1)
    }
}

//! Experiment runner. All logic lives in `sde_core::cli`; this binary only
//! forwards the process arguments and exit code.

fn main() {
    std::process::exit(sde_core::cli::run_main());
}

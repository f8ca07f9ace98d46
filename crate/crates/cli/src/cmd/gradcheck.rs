use std::time::Instant;

use clap::Args;
use voxseg::synth::suite::{gradient_suite, oracle_suite, CheckResult};

use crate::failure::{CmdResult, Failure, Status};

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random instances per gradient check.
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    /// Random convolution configurations compared against the naive oracle.
    #[arg(long, default_value_t = 50)]
    pub conv_configs: usize,
    /// Random mask pairs compared against the all-pairs surface distance.
    #[arg(long, default_value_t = 200)]
    pub nsd_pairs: usize,
}

fn print(r: &CheckResult) {
    let tolerance = if r.tolerance <= f64::MIN_POSITIVE {
        "exact".to_string()
    } else {
        format!("tolerance {:.0e}", r.tolerance)
    };
    println!(
        "{} {:<40} instances {:>3} checked {:>6} skipped {:>3} max error {:.3e} ({tolerance})",
        if r.passed() { "PASS" } else { "FAIL" },
        r.name,
        r.instances,
        r.checked,
        r.skipped,
        r.max_error,
    );
}

pub fn run(args: GradcheckArgs) -> CmdResult {
    let start = Instant::now();
    let mut results = gradient_suite(args.seed, args.instances)?;
    let grad_time = start.elapsed();
    let start = Instant::now();
    results.extend(oracle_suite(args.seed, args.conv_configs, args.nsd_pairs)?);
    let oracle_time = start.elapsed();
    results.iter().for_each(print);
    println!(
        "gradient checks {:.1}s, oracle checks {:.1}s",
        grad_time.as_secs_f64(),
        oracle_time.as_secs_f64()
    );
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        Ok(())
    } else {
        Err(Failure::new(
            Status::Tolerance,
            format!(
                "{} of {} checks exceeded tolerance: {}",
                failed.len(),
                results.len(),
                failed.join(", ")
            ),
        ))
    }
}

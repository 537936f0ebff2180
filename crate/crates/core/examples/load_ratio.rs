//! Open-loop latency of baseline OAuth, single-IdP MISO and 2-of-3 MISO.
//!
//!     cargo run --release --example load_ratio -- [rate] [seconds]

use std::time::Duration;

use miso::harness::{run_load, LoadSummary, Scenario};
use miso::stack::{Stack, StackOptions};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let rate: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(20.0);
    let secs: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(5);

    let dir = tempfile::tempdir()?;
    let mut opts = StackOptions::new(dir.path());
    opts.topology.baseline_rp = true;
    opts.users = 16;
    // Password hashing is the same in every scenario; keep it out of the way.
    opts.pbkdf2_iterations = 1;
    let stack = Stack::up(opts).await?;

    println!("{}", LoadSummary::table_header());
    let mut means = Vec::new();
    for s in [Scenario::BaselineSso, Scenario::MisoSingle, Scenario::MisoMulti2of3] {
        let r = run_load(&stack, s, rate, Duration::from_secs(secs)).await?;
        println!("{}", r.table_row());
        means.push(r.mean_ms);
    }
    if means[0] > 0.0 {
        println!("miso_single / baseline_sso = {:.2}", means[1] / means[0]);
    }
    stack.down(false).await?;
    Ok(())
}

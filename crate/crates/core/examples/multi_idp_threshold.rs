//! 2-of-3 sign-on: enroll with three IdPs, then try every subset.

use miso::harness::{run_subset_oracle, Outcome};
use miso::stack::{Stack, StackOptions};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let stack = Stack::up(StackOptions::new(dir.path())).await?;
    let user = &stack.users()[1];
    let idps = stack.idp_ids();

    let report = run_subset_oracle(&stack, 0, user, &idps, 2).await;
    match &report.enrollment {
        Outcome::Success(sub) => println!("enrolled {} with {}: {sub}", user.username, idps.join(",")),
        Outcome::Error(e) => println!("enrollment failed: {e}"),
    }
    for row in &report.rows {
        let observed = match &row.observed {
            Outcome::Success(sub) => format!("sub {}..", &sub[..16]),
            Outcome::Error(e) => e.clone(),
        };
        let mark = if row.observed == row.expected {
            ""
        } else {
            "  (unexpected)"
        };
        println!("{:<20} {observed}{mark}", row.subset.join(","));
    }

    stack.down(false).await?;
    if !report.passed() {
        return Err("subset table differs from the size >= m indicator".into());
    }
    Ok(())
}

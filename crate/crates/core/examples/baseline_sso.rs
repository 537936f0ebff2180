//! Plain OAuth 2.0 against one IdP, next to the same user through the
//! mixer. Without the mixer the RP sees the IdP's uid and the IdP sees
//! which RP asked.

use miso::harness::{Agent, LoginRequest};
use miso::stack::{Stack, StackOptions};
use miso::tap::Direction;

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let mut opts = StackOptions::new(dir.path());
    opts.topology.baseline_rp = true;
    opts.taps = true;
    let stack = Stack::up(opts).await?;
    let dave = &stack.users()[3];

    let plain = Agent::new()
        .login(&LoginRequest::new(stack.baseline_url().expect("baseline RP"), dave))
        .await?;
    println!("baseline RP sees sub {} ({} requests)", plain.me.sub, plain.steps);
    print_idp_client_ids(&stack);

    let mixed = Agent::new()
        .login(&LoginRequest::new(stack.rp_url(0), dave).idps("idp-a"))
        .await?;
    println!("MISO RP sees sub     {} ({} requests)", mixed.me.sub, mixed.steps);
    print_idp_client_ids(&stack);

    stack.down(false).await?;
    Ok(())
}

fn print_idp_client_ids(stack: &Stack) {
    let tap = stack.idp(0).tap().expect("taps enabled");
    let mut seen: Vec<String> = tap
        .drain()
        .entries
        .into_iter()
        .filter(|e| e.direction == Direction::Inbound)
        .filter_map(|e| e.params.get("client_id").cloned())
        .collect();
    seen.dedup();
    println!("  idp-a saw client_id {seen:?}");
}

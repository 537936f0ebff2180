//! By default an RP learns only the blinded sub. The user can allow the
//! mixer to pass specific IdP attributes to one RP.

use miso::harness::{Agent, LoginRequest};
use miso::stack::{Stack, StackOptions};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let stack = Stack::up(StackOptions::new(dir.path())).await?;
    let carol = &stack.users()[2];
    let rp = stack.rp_url(0);
    let req = LoginRequest::new(rp, carol).idps("idp-a");

    let agent = Agent::new();
    let before = agent.login(&req).await?;
    println!(
        "before policy: sub {} attributes {:?}",
        before.me.sub, before.me.attributes
    );

    let policy = agent
        .set_policy(stack.mixer_url(), stack.rp(0).client_id(), &["email"])
        .await?;
    println!("policy set:    {policy:?}");

    let after = agent.login(&req).await?;
    println!(
        "after policy:  sub {} attributes {:?}",
        after.me.sub, after.me.attributes
    );

    let elsewhere = Agent::new()
        .login(&LoginRequest::new(stack.rp_url(1), carol).idps("idp-a"))
        .await?;
    println!("rp-1 still:    attributes {:?}", elsewhere.me.attributes);

    match agent
        .set_policy(stack.mixer_url(), stack.rp(0).client_id(), &["shoe_size"])
        .await
    {
        Ok(p) => println!("unexpected: {p:?}"),
        Err(e) => println!("unknown attribute rejected: {}", e.error),
    }

    stack.down(false).await?;
    Ok(())
}

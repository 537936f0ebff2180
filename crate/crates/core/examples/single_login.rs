//! One user, two RPs, one IdP: the same sub on every login at an RP, a
//! different sub at the other RP, and the same sub after a mixer restart.

use miso::harness::{Agent, LoginRequest};
use miso::stack::{Stack, StackOptions};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let mut stack = Stack::up(StackOptions::new(dir.path())).await?;
    let alice = &stack.users()[0];

    let login = |rp: String| {
        let alice = alice.clone();
        async move {
            let req = LoginRequest::new(&rp, &alice).idps("idp-a");
            Agent::new().login(&req).await.map(|ok| ok.me)
        }
    };

    let first = login(stack.rp_url(0).to_owned()).await?;
    let again = login(stack.rp_url(0).to_owned()).await?;
    let other = login(stack.rp_url(1).to_owned()).await?;
    println!("rp-0 sub        {}", first.sub);
    println!("rp-0 sub again  {}", again.sub);
    println!("rp-1 sub        {}", other.sub);
    println!("attributes      {:?} (none disclosed by default)", first.attributes);
    assert_eq!(first.sub, again.sub);
    assert_ne!(first.sub, other.sub);

    stack.restart_mixer(None).await?;
    let after = login(stack.rp_url(0).to_owned()).await?;
    println!("after restart   {}", after.sub);
    assert_eq!(first.sub, after.sub);

    stack.down(false).await?;
    Ok(())
}

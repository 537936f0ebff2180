//! The IdP, RP and collusive games over captured transcripts, then the
//! same games against a mixer with a deliberate leak.

use miso::harness::{run_game_collusive, run_game_idp, run_game_rp, GameReport};
use miso::mixer::Faults;
use miso::stack::{Stack, StackOptions};

fn show(r: &GameReport) {
    println!("{:<12} {} trials  {} violations", r.game, r.trials, r.violations.len());
    for v in r.violations.iter().take(3) {
        println!("    {v}");
    }
}

async fn play(faults: Faults, trials: usize) -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let mut opts = StackOptions::new(dir.path());
    opts.taps = true;
    opts.faults = faults;
    let stack = Stack::up(opts).await?;
    show(&run_game_idp(&stack, trials, 7).await);
    show(&run_game_rp(&stack, trials, 7).await);
    show(&run_game_collusive(&stack, trials, 7).await);
    stack.down(false).await?;
    Ok(())
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!("honest mixer");
    play(Faults::default(), 20).await?;

    println!("\nmixer forwarding the RP client id and skipping the PRF");
    play(
        Faults {
            leak_rp_client_id: true,
            identity_blinding: true,
        },
        4,
    )
    .await
}

//! Experiment driver: executable versions of the unlinkability games, the
//! multi-IdP subset oracle, and open-loop latency measurement.
//!
//! The games check literal non-leakage on captured transcripts (field
//! equality, value inequality, substring absence). That is a sound but
//! weaker statement than bounding a computational adversary's advantage.

mod agent;
mod load;

use std::collections::{BTreeMap, BTreeSet};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::Serialize;

pub use agent::{Agent, Consent, LoginFailure, LoginRequest, LoginSuccess};
pub use load::{run_load, run_soak, LoadSummary, Scenario, SoakReport};

use crate::stack::{Stack, UserFixture};
use crate::tap::{Direction, TranscriptEntry};

/// Values that every login carries regardless of user or RP.
const PROTOCOL_CONSTANTS: [&str; 6] = ["code", "authorization_code", "Bearer", "3600", "grant", "ok"];

/// Fields expected to differ per login (fresh randomness or user input).
const PER_LOGIN_FIELDS: [&str; 5] = ["state", "code", "authorization", "username", "password"];

#[derive(Clone, Debug, Default, Serialize)]
pub struct GameReport {
    pub game: String,
    pub trials: usize,
    pub violations: Vec<String>,
}

impl GameReport {
    fn new(game: &str, trials: usize) -> Self {
        Self {
            game: game.to_owned(),
            trials,
            violations: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    fn flag(&mut self, v: String) {
        if !self.violations.contains(&v) {
            self.violations.push(v);
        }
    }
}

/// One login plus what each party captured while it ran.
#[derive(Clone, Debug)]
pub struct Observation {
    pub sub: String,
    pub idp_entries: Vec<TranscriptEntry>,
    pub rp_entries: Vec<TranscriptEntry>,
}

fn drain_all(stack: &Stack) {
    for t in stack.taps() {
        t.drain();
    }
}

/// Logs `user` into RP `rp` with the default IdP and collects the IdP-side
/// and RP-side transcripts of exactly that login. Requires a stack started
/// with taps; logins must not overlap.
pub async fn observe_login(stack: &Stack, rp: usize, user: &UserFixture) -> Result<Observation, LoginFailure> {
    drain_all(stack);
    let agent = Agent::new();
    let ok = agent.login(&LoginRequest::new(stack.rp_url(rp), user)).await?;
    let mut idp_entries = Vec::new();
    for i in 0..stack.descriptor().idps.len() {
        if let Some(t) = stack.idp(i).tap() {
            idp_entries.extend(t.drain().entries);
        }
    }
    let mut rp_entries = Vec::new();
    for i in 0..stack.descriptor().rps.len() {
        if let Some(t) = stack.rp(i).tap() {
            rp_entries.extend(t.drain().entries);
        }
    }
    Ok(Observation {
        sub: ok.me.sub,
        idp_entries,
        rp_entries,
    })
}

fn rp_client_ids(stack: &Stack) -> Vec<String> {
    stack
        .descriptor()
        .rps
        .iter()
        .filter_map(|e| e.client_id.clone())
        .collect()
}

/// IdP-side checks for one login: the mixer's client id is presented and no
/// RP client id appears anywhere.
fn check_idp_view(stack: &Stack, obs: &Observation, report: &mut GameReport) {
    let cid_mixer: BTreeSet<&str> = stack
        .descriptor()
        .idps
        .iter()
        .filter_map(|e| e.client_id.as_deref())
        .collect();
    let auths: Vec<_> = obs.idp_entries.iter().filter(|e| e.endpoint == "/auth_IdP").collect();
    if auths.is_empty() {
        report.flag("IdP transcript has no /auth_IdP request".into());
    }
    for e in auths {
        match e.params.get("client_id") {
            Some(c) if cid_mixer.contains(c.as_str()) => {}
            other => report.flag(format!("/auth_IdP client_id is {other:?}, not the mixer's")),
        }
    }
    for cid in rp_client_ids(stack) {
        for e in &obs.idp_entries {
            for (k, v) in &e.params {
                if v.contains(&cid) {
                    report.flag(format!("IdP saw an RP client id in {} {k}", e.endpoint));
                }
            }
        }
    }
}

/// RP-side check: nothing the RP received carries a raw uid or an IdP
/// attribute value of any fixture user.
fn check_rp_view(stack: &Stack, users: &[UserFixture], obs: &Observation, report: &mut GameReport) {
    let idp_ids = stack.idp_ids();
    let mut secrets: Vec<(String, String)> = Vec::new();
    for u in users {
        secrets.push(("raw uid".into(), u.uid.clone()));
        secrets.push(("display_name".into(), crate::stack::display_name(&u.username)));
        for idp in &idp_ids {
            secrets.push(("email".into(), format!("{}@{idp}.test", u.username)));
        }
    }
    for e in &obs.rp_entries {
        for (k, v) in &e.params {
            for (what, s) in &secrets {
                if v.contains(s.as_str()) {
                    report.flag(format!("RP saw {what} in {} {k}", e.endpoint));
                }
            }
        }
    }
}

/// Per (direction, endpoint, field) view of what an IdP sees, leaving out
/// fields that legitimately differ per login.
fn idp_view(entries: &[TranscriptEntry]) -> BTreeSet<(String, String, String)> {
    let mut out = BTreeSet::new();
    for e in entries {
        let dir = match e.direction {
            Direction::Inbound => "request",
            Direction::Response => "response",
        };
        let names: Vec<&str> = e.param_names().into_iter().collect();
        out.insert((format!("{dir} {}", e.endpoint), "<names>".to_owned(), names.join(",")));
        for (k, v) in &e.params {
            if !PER_LOGIN_FIELDS.contains(&k.as_str()) {
                out.insert((format!("{dir} {}", e.endpoint), k.clone(), v.clone()));
            }
        }
    }
    out
}

fn diff_views(by_rp: &BTreeMap<usize, BTreeSet<(String, String, String)>>, report: &mut GameReport) {
    let (Some(a), Some(b)) = (by_rp.get(&0), by_rp.get(&1)) else {
        return;
    };
    for (endpoint, field, _) in a.symmetric_difference(b) {
        report.flag(format!("IdP view differs across RPs: {endpoint} {field}"));
    }
}

fn two_users(stack: &Stack, n: usize) -> Vec<UserFixture> {
    stack.users().into_iter().take(n.max(1)).collect()
}

/// IdP unlinkability: over `trials` logins to a random RP, the IdP's view
/// (parameter names, client_id, redirect_uri and all other non-random
/// fields) must not depend on which RP the user was logging in to.
pub async fn run_game_idp(stack: &Stack, trials: usize, seed: u64) -> GameReport {
    let mut report = GameReport::new("idp", trials);
    let mut rng = StdRng::seed_from_u64(seed);
    let users = two_users(stack, 2);
    let mut by_rp: BTreeMap<usize, BTreeSet<_>> = BTreeMap::new();
    for _ in 0..trials {
        let b = rng.random_range(0..2usize);
        let user = &users[rng.random_range(0..users.len())];
        match observe_login(stack, b, user).await {
            Ok(obs) => {
                check_idp_view(stack, &obs, &mut report);
                by_rp.entry(b).or_default().extend(idp_view(&obs.idp_entries));
            }
            Err(e) => report.flag(format!("login failed: {e}")),
        }
    }
    diff_views(&by_rp, &mut report);
    report
}

/// Runs randomized logins over 2 RPs x 2 users and applies every
/// transcript check: IdP sees only the mixer, RP sees no raw identity,
/// IdP view independent of the originating RP.
pub async fn run_transcript_audit(stack: &Stack, trials: usize, seed: u64) -> GameReport {
    let mut report = GameReport::new("transcript", trials);
    let mut rng = StdRng::seed_from_u64(seed);
    let users = two_users(stack, 2);
    let mut by_rp: BTreeMap<usize, BTreeSet<_>> = BTreeMap::new();
    for _ in 0..trials {
        let b = rng.random_range(0..2usize);
        let user = &users[rng.random_range(0..users.len())];
        match observe_login(stack, b, user).await {
            Ok(obs) => {
                check_idp_view(stack, &obs, &mut report);
                check_rp_view(stack, &users, &obs, &mut report);
                by_rp.entry(b).or_default().extend(idp_view(&obs.idp_entries));
            }
            Err(e) => report.flag(format!("login failed: {e}")),
        }
    }
    diff_views(&by_rp, &mut report);
    report
}

fn hex_contains(sub: &str, needle: &[u8]) -> bool {
    hex::decode(sub)
        .map(|b| !needle.is_empty() && b.windows(needle.len()).any(|w| w == needle))
        .unwrap_or(false)
}

async fn rp_linkage(stack: &Stack, trials: usize, seed: u64, collusive: bool) -> GameReport {
    let mut report = GameReport::new(if collusive { "collusive" } else { "rp" }, trials);
    let mut rng = StdRng::seed_from_u64(seed);
    let users = two_users(stack, 2);
    let mut subs: [BTreeMap<String, String>; 2] = Default::default();
    for _ in 0..trials {
        let user = &users[rng.random_range(0..users.len())];
        let mut per_rp = Vec::new();
        for rp in 0..2 {
            match observe_login(stack, rp, user).await {
                Ok(obs) => per_rp.push(obs),
                Err(e) => {
                    report.flag(format!("login failed: {e}"));
                    break;
                }
            }
        }
        let [o0, o1] = per_rp.as_slice() else { continue };
        subs[0].insert(user.username.clone(), o0.sub.clone());
        subs[1].insert(user.username.clone(), o1.sub.clone());
        if subs[0].values().any(|s| s == &o1.sub) {
            report.flag("sub at RP1 equals a sub seen at RP0".into());
        }
        for o in [o0, o1] {
            check_rp_view(stack, &users, o, &mut report);
            for u in &users {
                if o.sub == u.uid || hex_contains(&o.sub, u.uid.as_bytes()) {
                    report.flag("sub embeds a raw uid".into());
                }
            }
        }
        if collusive {
            // A colluding IdP and RP compare everything they saw for the
            // same login; only protocol constants may coincide.
            for o in [o0, o1] {
                let idp_values: BTreeSet<&str> = o
                    .idp_entries
                    .iter()
                    .flat_map(|e| e.params.values().map(String::as_str))
                    .filter(|v| !PROTOCOL_CONSTANTS.contains(v))
                    .collect();
                for e in &o.rp_entries {
                    for (k, v) in &e.params {
                        if idp_values.contains(v.as_str()) {
                            report.flag(format!("RP {} {k} also seen by the IdP", e.endpoint));
                        }
                    }
                }
            }
        }
    }
    report
}

/// RP unlinkability: the same user's subs at two RPs share nothing.
pub async fn run_game_rp(stack: &Stack, trials: usize, seed: u64) -> GameReport {
    rp_linkage(stack, trials, seed, false).await
}

/// Collusive IdP-RP unlinkability: as the RP game, and additionally the
/// checker holds raw uids and the IdP transcript.
pub async fn run_game_collusive(stack: &Stack, trials: usize, seed: u64) -> GameReport {
    rp_linkage(stack, trials, seed, true).await
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success(String),
    Error(String),
}

#[derive(Clone, Debug, Serialize)]
pub struct SubsetRow {
    pub subset: Vec<String>,
    pub expected: Outcome,
    pub observed: Outcome,
}

#[derive(Clone, Debug, Serialize)]
pub struct SubsetReport {
    pub m: usize,
    pub enrollment: Outcome,
    pub rows: Vec<SubsetRow>,
}

impl SubsetReport {
    pub fn passed(&self) -> bool {
        matches!(self.enrollment, Outcome::Success(_)) && self.rows.iter().all(|r| r.expected == r.observed)
    }
}

fn outcome(r: Result<LoginSuccess, LoginFailure>) -> Outcome {
    match r {
        Ok(s) => Outcome::Success(s.me.sub),
        Err(f) => Outcome::Error(f.error),
    }
}

/// Enrolls `user` with all of `idps` at RP `rp`, then tries every non-empty
/// subset. The expected table is the size-at-least-`m` indicator.
pub async fn run_subset_oracle(
    stack: &Stack,
    rp: usize,
    user: &UserFixture,
    idps: &[String],
    m: usize,
) -> SubsetReport {
    let rp_url = stack.rp_url(rp);
    let all = idps.join(",");
    let enrollment = outcome(
        Agent::new()
            .login(&LoginRequest::new(rp_url, user).idps(&all).threshold(m))
            .await,
    );
    let enrolled_sub = match &enrollment {
        Outcome::Success(s) => Some(s.clone()),
        Outcome::Error(_) => None,
    };
    let mut rows = Vec::new();
    for mask in 1u32..(1 << idps.len()) {
        let subset: Vec<String> = idps
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, id)| id.clone())
            .collect();
        let expected = if subset.len() >= m {
            Outcome::Success(enrolled_sub.clone().unwrap_or_default())
        } else {
            Outcome::Error("threshold_not_met".into())
        };
        let list = subset.join(",");
        let observed = outcome(
            Agent::new()
                .login(&LoginRequest::new(rp_url, user).idps(&list).threshold(m))
                .await,
        );
        rows.push(SubsetRow {
            subset,
            expected,
            observed,
        });
    }
    SubsetReport { m, enrollment, rows }
}

//! Open-loop load: logins arrive at a fixed rate whether or not earlier
//! ones have finished.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::time::Instant;

use super::agent::{Agent, LoginRequest};
use crate::backchannel::http_client;
use crate::stack::{Stack, UserFixture};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    MisoSingle,
    MisoMulti2of3,
    BaselineSso,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::MisoSingle => "miso_single",
            Scenario::MisoMulti2of3 => "miso_multi_2of3",
            Scenario::BaselineSso => "baseline_sso",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "miso_single" => Ok(Scenario::MisoSingle),
            "miso_multi_2of3" => Ok(Scenario::MisoMulti2of3),
            "baseline_sso" => Ok(Scenario::BaselineSso),
            other => Err(format!("unknown scenario {other:?}")),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LoadSummary {
    pub scenario: Scenario,
    pub rate: f64,
    pub duration_s: f64,
    pub attempted: usize,
    pub completed: usize,
    pub errors: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
    /// Up to five distinct failure messages with their counts.
    pub error_samples: BTreeMap<String, usize>,
}

impl LoadSummary {
    pub fn table_row(&self) -> String {
        format!(
            "{:<16} {:>6.1}/s {:>6} {:>6} {:>9.2} {:>9.2} {:>9.2}",
            self.scenario.as_str(),
            self.rate,
            self.completed,
            self.errors,
            self.mean_ms,
            self.p50_ms,
            self.p95_ms
        )
    }

    pub fn table_header() -> &'static str {
        "scenario           rate     ok  errors   mean_ms    p50_ms    p95_ms"
    }
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (p * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank.min(sorted.len() - 1)]
}

struct Target {
    rp_url: String,
    idp_list: Option<String>,
    m: Option<usize>,
}

fn target(stack: &Stack, scenario: Scenario) -> Result<Target, String> {
    let ids = stack.idp_ids();
    Ok(match scenario {
        Scenario::MisoSingle => Target {
            rp_url: stack.rp_url(0).to_owned(),
            idp_list: Some(ids[0].clone()),
            m: None,
        },
        Scenario::MisoMulti2of3 => {
            if ids.len() < 3 {
                return Err("miso_multi_2of3 needs three IdPs".into());
            }
            Target {
                rp_url: stack.rp_url(0).to_owned(),
                idp_list: Some(format!("{},{}", ids[0], ids[1])),
                m: Some(2),
            }
        }
        Scenario::BaselineSso => Target {
            rp_url: stack
                .baseline_url()
                .ok_or("baseline_sso needs a stack with a baseline RP")?
                .to_owned(),
            idp_list: None,
            m: None,
        },
    })
}

/// One untimed login per user so salts, enrollments and accounts exist
/// before measurement starts; the multi scenario enrolls with three IdPs.
async fn warm_up(stack: &Stack, scenario: Scenario, t: &Target, users: &[UserFixture]) -> Result<(), String> {
    let enroll = stack.idp_ids().iter().take(3).cloned().collect::<Vec<_>>().join(",");
    for u in users {
        let mut req = LoginRequest::new(&t.rp_url, u);
        if scenario == Scenario::MisoMulti2of3 {
            req = req.idps(&enroll).threshold(2);
        } else if let Some(l) = &t.idp_list {
            req = req.idps(l);
        }
        Agent::new()
            .login(&req)
            .await
            .map_err(|e| format!("warm-up for {}: {e}", u.username))?;
    }
    Ok(())
}

/// Drives `rate` logins per second for `duration`, cycling through the
/// stack's fixture users. Failures are counted, never fatal.
pub async fn run_load(stack: &Stack, scenario: Scenario, rate: f64, duration: Duration) -> Result<LoadSummary, String> {
    let t = Arc::new(target(stack, scenario)?);
    let users = Arc::new(stack.users());
    let attempted = if rate > 0.0 {
        (rate * duration.as_secs_f64()).round() as usize
    } else {
        0
    };
    if attempted > 0 {
        warm_up(stack, scenario, &t, &users).await?;
    }
    let start = Instant::now();
    let mut tasks = Vec::with_capacity(attempted);
    for i in 0..attempted {
        let at = start + Duration::from_secs_f64(i as f64 / rate);
        tokio::time::sleep_until(at).await;
        let (t, users) = (t.clone(), users.clone());
        tasks.push(tokio::spawn(async move {
            let user = &users[i % users.len()];
            let mut req = LoginRequest::new(&t.rp_url, user);
            if let Some(l) = &t.idp_list {
                req = req.idps(l);
            }
            if let Some(m) = t.m {
                req = req.threshold(m);
            }
            // Each arrival is a distinct browser with its own connections.
            let agent = Agent::new();
            let began = Instant::now();
            let r = agent.login(&req).await;
            r.map(|_| began.elapsed()).map_err(|e| e.to_string())
        }));
    }
    let mut latencies = Vec::with_capacity(attempted);
    let mut error_samples: BTreeMap<String, usize> = BTreeMap::new();
    let mut errors = 0;
    for task in tasks {
        match task.await {
            Ok(Ok(d)) => latencies.push(d.as_secs_f64() * 1000.0),
            Ok(Err(e)) => {
                errors += 1;
                if error_samples.len() < 5 || error_samples.contains_key(&e) {
                    *error_samples.entry(e).or_default() += 1;
                }
            }
            Err(e) => {
                errors += 1;
                *error_samples.entry(format!("task panicked: {e}")).or_default() += 1;
            }
        }
    }
    latencies.sort_by(f64::total_cmp);
    let mean = if latencies.is_empty() {
        0.0
    } else {
        latencies.iter().sum::<f64>() / latencies.len() as f64
    };
    Ok(LoadSummary {
        scenario,
        rate,
        duration_s: duration.as_secs_f64(),
        attempted,
        completed: latencies.len(),
        errors,
        mean_ms: mean,
        p50_ms: percentile(&latencies, 0.5),
        p95_ms: percentile(&latencies, 0.95),
        max_ms: latencies.last().copied().unwrap_or(0.0),
        error_samples,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SoakReport {
    pub concurrent: usize,
    pub completed: usize,
    pub errors: usize,
    /// Pairs of distinct users that received the same sub.
    pub collisions: usize,
    pub error_samples: BTreeMap<String, usize>,
}

impl SoakReport {
    pub fn passed(&self) -> bool {
        self.errors == 0 && self.collisions == 0 && self.completed == self.concurrent
    }
}

/// Starts `concurrent` logins of distinct users at once against RP 0.
pub async fn run_soak(stack: &Stack, concurrent: usize) -> SoakReport {
    let users = stack.users();
    let rp_url = stack.rp_url(0).to_owned();
    let client = http_client();
    let barrier = Arc::new(tokio::sync::Barrier::new(concurrent.max(1)));
    let tasks: Vec<_> = (0..concurrent)
        .map(|i| {
            let user = users[i % users.len()].clone();
            let (rp_url, client, barrier) = (rp_url.clone(), client.clone(), barrier.clone());
            tokio::spawn(async move {
                barrier.wait().await;
                let r = Agent::with_client(client)
                    .login(&LoginRequest::new(&rp_url, &user))
                    .await;
                (user.username, r.map(|ok| ok.me.sub).map_err(|e| e.to_string()))
            })
        })
        .collect();
    let mut by_sub: BTreeMap<String, std::collections::BTreeSet<String>> = BTreeMap::new();
    let mut report = SoakReport {
        concurrent,
        completed: 0,
        errors: 0,
        collisions: 0,
        error_samples: BTreeMap::new(),
    };
    for t in tasks {
        match t.await {
            Ok((user, Ok(sub))) => {
                report.completed += 1;
                by_sub.entry(sub).or_default().insert(user);
            }
            Ok((_, Err(e))) => {
                report.errors += 1;
                *report.error_samples.entry(e).or_default() += 1;
            }
            Err(e) => {
                report.errors += 1;
                *report.error_samples.entry(format!("task panicked: {e}")).or_default() += 1;
            }
        }
    }
    report.collisions = by_sub.values().map(|u| u.len().saturating_sub(1)).sum();
    report
}

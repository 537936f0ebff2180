mod common;

use std::collections::BTreeSet;

use reqwest::StatusCode;
use serde_json::json;
use url::Url;

use common::*;
use miso::clock::ManualClock;
use miso::enclave::EnclaveError;
use miso::harness::{run_game_idp, run_game_rp, Agent, Consent, LoginRequest};
use miso::mixer::{Faults, MixerError};
use miso::rp::RpError;
use miso::stack::{wipe_dir, Stack, StackError};
use miso::tap::Direction;

async fn register(stack: &Stack, redirect_uri: &str) -> (u16, serde_json::Value) {
    let resp = reqwest::Client::new()
        .post(format!("{}/register", stack.mixer_url()))
        .json(&json!({ "redirect_uri": redirect_uri }))
        .send()
        .await
        .unwrap();
    let status = resp.status().as_u16();
    (status, resp.json().await.unwrap_or_default())
}

#[tokio::test(flavor = "multi_thread")]
async fn rp_registration() {
    let dir = tempfile::tempdir().unwrap();
    let stack = stack(dir.path()).await;

    let (status, body) = register(&stack, "not a url").await;
    assert_eq!((status, error_of(&body)), (400, "invalid_redirect_uri"));
    let (status, _) = register(&stack, "http://example.com/cb").await;
    assert_eq!(status, 400, "plain http off loopback");

    let (s1, a) = register(&stack, "https://rp.example/cb").await;
    let (s2, b) = register(&stack, "https://rp.example/cb").await;
    assert_eq!((s1, s2), (201, 201));
    let cid = a["client_id"].as_str().unwrap();
    assert_eq!(cid.len(), 64);
    assert!(cid.bytes().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));
    assert_eq!(a["client_secret"].as_str().unwrap().len(), 43);
    assert_ne!(a["client_id"], b["client_id"]);
    stack.down(false).await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn authorization_request_checks() {
    let dir = tempfile::tempdir().unwrap();
    let stack = stack(dir.path()).await;
    let rp = stack.rp(0);
    let cid = rp.client_id().to_owned();
    let cb = rp.config().callback_url();
    let auth = |pairs: Vec<(&str, String)>| {
        let mut url = Url::parse(&format!("{}/auth_mixer", stack.mixer_url())).unwrap();
        url.query_pairs_mut().extend_pairs(pairs);
        async move { get_raw(url.as_str()).await }
    };
    let base = |extra: Vec<(&'static str, &str)>| {
        let mut v = vec![
            ("response_type", "code".to_owned()),
            ("client_id", cid.clone()),
            ("redirect_uri", cb.clone()),
            ("state", "s1".to_owned()),
        ];
        for (k, val) in extra {
            v.retain(|(key, _)| *key != k);
            v.push((k, val.to_owned()));
        }
        v
    };

    let ok = auth(base(vec![])).await;
    assert_eq!(ok.status(), StatusCode::FOUND);
    let loc = Url::parse(ok.headers()["location"].to_str().unwrap()).unwrap();
    let keys: BTreeSet<String> = loc.query_pairs().map(|(k, _)| k.into_owned()).collect();
    assert_eq!(
        keys,
        ["client_id", "redirect_uri", "response_type", "state"]
            .map(String::from)
            .into()
    );
    assert_eq!(
        query(&loc, "client_id").as_deref(),
        stack.mixer().idp_client_id("idp-a")
    );

    let cases = [
        (base(vec![("client_id", "nobody")]), 401, "invalid_client"),
        (
            base(vec![("redirect_uri", &format!("{cb}x"))]),
            400,
            "invalid_redirect_uri",
        ),
        (base(vec![("idp_list", "idp-a,idp-zz")]), 400, "unknown_idp"),
        (
            base(vec![("idp_list", "idp-a,idp-b"), ("m", "3")]),
            400,
            "threshold_not_met",
        ),
        (base(vec![("response_type", "token")]), 400, "unsupported_response_type"),
    ];
    for (pairs, status, error) in cases {
        let resp = auth(pairs).await;
        assert_eq!(resp.status().as_u16(), status);
        let body: serde_json::Value = resp.json().await.unwrap();
        assert_eq!(error_of(&body), error);
    }
    stack.down(false).await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn code_and_token_rules() {
    let dir = tempfile::tempdir().unwrap();
    let clock = ManualClock::new();
    let mut opts = options(dir.path());
    opts.clock = Some(clock.clone());
    let stack = Stack::up(opts).await.unwrap();
    let cb = stack.rp(0).config().callback_url();

    // happy path, then replay
    let code = fresh_code(&stack, 0, 0).await;
    let (status, tok) = token_mixer(&stack, &redeem_for(&stack, 0, &code, &cb)).await;
    assert_eq!(status, 200);
    assert_eq!(tok["token_type"], "Bearer");
    assert_eq!(tok["expires_in"], 3600);
    let token = tok["access_token"].as_str().unwrap().to_owned();
    assert_eq!(token.len(), 43);
    let (status, replay) = token_mixer(&stack, &redeem_for(&stack, 0, &code, &cb)).await;
    assert_eq!((status, error_of(&replay)), (400, "invalid_grant"));

    let (status, me) = res_mixer(&stack, &token).await;
    assert_eq!(status, 200);
    assert_eq!(me["sub"].as_str().unwrap().len(), 64);
    assert_eq!(me["attributes"], json!({}));
    assert_eq!(me.as_object().unwrap().len(), 2);

    // wrong secret, wrong redirect, another RP's credentials
    let code = fresh_code(&stack, 0, 0).await;
    let mut r = redeem_for(&stack, 0, &code, &cb);
    r.client_secret = "AAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAA";
    let (status, body) = token_mixer(&stack, &r).await;
    assert_eq!((status, error_of(&body)), (401, "invalid_client"));
    let other = stack.rp(1).config().callback_url();
    let (status, body) = token_mixer(&stack, &redeem_for(&stack, 0, &code, &other)).await;
    assert_eq!((status, error_of(&body)), (400, "invalid_grant"));
    let cb1 = stack.rp(1).config().callback_url();
    let (status, _) = token_mixer(&stack, &redeem_for(&stack, 1, &code, &cb1)).await;
    assert_eq!(status, 400);

    // code lifetime
    let code = fresh_code(&stack, 0, 0).await;
    clock.advance(601);
    let (status, body) = token_mixer(&stack, &redeem_for(&stack, 0, &code, &cb)).await;
    assert_eq!((status, error_of(&body)), (400, "invalid_grant"));

    // token lifetime
    let code = fresh_code(&stack, 0, 0).await;
    let (_, tok) = token_mixer(&stack, &redeem_for(&stack, 0, &code, &cb)).await;
    let token = tok["access_token"].as_str().unwrap().to_owned();
    assert_eq!(res_mixer(&stack, &token).await.0, 200);
    clock.advance(3601);
    let (status, body) = res_mixer(&stack, &token).await;
    assert_eq!((status, error_of(&body)), (401, "invalid_token"));
    let (status, _) = res_mixer(&stack, "not-a-token").await;
    assert_eq!(status, 401);
    stack.down(false).await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn state_checks() {
    let dir = tempfile::tempdir().unwrap();
    let stack = stack(dir.path()).await;
    let users = stack.users();

    // The mixer's state is single-use.
    let agent = Agent::new();
    let mixer_cb = format!("{}/callback", stack.mixer_url());
    let to_mixer = agent
        .login_until(&LoginRequest::new(stack.rp_url(0), &users[0]), &mixer_cb)
        .await
        .unwrap();
    let first = agent.send(reqwest::Method::GET, &to_mixer, None).await.unwrap();
    assert_eq!(first.status(), StatusCode::FOUND);
    let again = agent.send(reqwest::Method::GET, &to_mixer, None).await.unwrap();
    assert_eq!(again.status().as_u16(), 400);
    let body: serde_json::Value = again.json().await.unwrap();
    assert_eq!(error_of(&body), "invalid_state");

    // The RP rejects a callback whose state does not match its session.
    let (agent, mut cb) = capture_rp_callback(&stack, 0, 1).await;
    let code = query(&cb, "code").unwrap();
    cb.query_pairs_mut()
        .clear()
        .append_pair("code", &code)
        .append_pair("state", "forged");
    let resp = agent.send(reqwest::Method::GET, &cb, None).await.unwrap();
    assert_eq!(resp.status().as_u16(), 403);
    let body: serde_json::Value = resp.json().await.unwrap();
    assert_eq!(error_of(&body), "invalid_state");

    // A callback replayed in a browser without the RP session cookie.
    let (_, cb) = capture_rp_callback(&stack, 0, 1).await;
    let resp = Agent::new().send(reqwest::Method::GET, &cb, None).await.unwrap();
    assert_eq!(resp.status().as_u16(), 403);
    stack.down(false).await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn consent_denied() {
    let dir = tempfile::tempdir().unwrap();
    let stack = stack(dir.path()).await;
    let users = stack.users();
    let err = Agent::new()
        .login(&LoginRequest::new(stack.rp_url(0), &users[0]).consent(Consent::Deny))
        .await
        .unwrap_err();
    assert_eq!((err.status, err.error.as_str()), (401, "access_denied"));

    let mut wrong = users[0].clone();
    wrong.password = "nope".into();
    let err = Agent::new()
        .login(&LoginRequest::new(stack.rp_url(0), &wrong))
        .await
        .unwrap_err();
    assert!(err.url.contains("/auth_IdP"), "{err}");
    stack.down(false).await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn disclosure_policy() {
    let dir = tempfile::tempdir().unwrap();
    let stack = stack(dir.path()).await;
    let users = stack.users();
    let cid = stack.rp(0).client_id().to_owned();

    let stranger = Agent::new();
    let err = stranger
        .set_policy(stack.mixer_url(), &cid, &["email"])
        .await
        .unwrap_err();
    assert_eq!((err.status, err.error.as_str()), (401, "login_required"));

    let agent = Agent::new();
    let req = LoginRequest::new(stack.rp_url(0), &users[0]).idps("idp-a");
    let first = agent.login(&req).await.unwrap();
    assert!(first.me.attributes.is_empty());

    let err = agent.set_policy(stack.mixer_url(), &cid, &["ssn"]).await.unwrap_err();
    assert_eq!((err.status, err.error.as_str()), (400, "unknown_attribute"));

    agent
        .set_policy(stack.mixer_url(), &cid, &["display_name"])
        .await
        .unwrap();
    let me = agent.login(&req).await.unwrap().me;
    assert_eq!(me.attributes.keys().collect::<Vec<_>>(), ["display_name"]);
    assert_eq!(me.sub, first.me.sub);

    agent.set_policy(stack.mixer_url(), &cid, &["email"]).await.unwrap();
    let me = agent.login(&req).await.unwrap().me;
    assert_eq!(me.attributes["email"], "alice@idp-a.test");

    agent.set_policy(stack.mixer_url(), &cid, &[]).await.unwrap();
    assert!(agent.login(&req).await.unwrap().me.attributes.is_empty());

    // Another user's logins are unaffected by alice's policy.
    agent.set_policy(stack.mixer_url(), &cid, &["email"]).await.unwrap();
    let bob = Agent::new()
        .login(&LoginRequest::new(stack.rp_url(0), &users[1]).idps("idp-a"))
        .await
        .unwrap();
    assert!(bob.me.attributes.is_empty());
    stack.down(false).await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn multi_idp_phases() {
    let dir = tempfile::tempdir().unwrap();
    let stack = stack(dir.path()).await;
    let users = stack.users();
    let rp = stack.rp_url(0);
    let login = |list: &'static str, m: Option<usize>, user: usize| {
        let user = users[user].clone();
        async move {
            let mut req = LoginRequest::new(rp, &user).idps(list);
            if let Some(m) = m {
                req = req.threshold(m);
            }
            Agent::new().login(&req).await
        }
    };

    let enrolled = login("idp-c, idp-a ,idp-b,idp-a", Some(2), 2).await.unwrap().me;
    assert_eq!(enrolled.descriptor, "multi");
    assert_eq!(login("idp-b,idp-c", Some(2), 2).await.unwrap().me.sub, enrolled.sub);
    // m defaults to n - 1
    assert_eq!(login("idp-a,idp-c", None, 2).await.unwrap().me.sub, enrolled.sub);
    let single = login("idp-b", Some(1), 2).await.unwrap_err();
    assert_eq!((single.status, single.error.as_str()), (403, "threshold_not_met"));
    // Single-IdP mode is a separate identity.
    let plain = login("idp-a", None, 2).await.unwrap().me;
    assert_ne!(plain.sub, enrolled.sub);
    // A different user enrolls fresh.
    let other = login("idp-a,idp-b", Some(2), 3).await.unwrap().me;
    assert_ne!(other.sub, enrolled.sub);
    stack.down(false).await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn upstream_token_never_kept() {
    let dir = tempfile::tempdir().unwrap();
    let mut opts = options(dir.path());
    opts.taps = true;
    let stack = Stack::up(opts).await.unwrap();
    let users = stack.users();
    for u in users.iter().take(3) {
        Agent::new()
            .login(&LoginRequest::new(stack.rp_url(0), u).idps("idp-a,idp-b").threshold(2))
            .await
            .unwrap();
    }
    let tokens: Vec<String> = stack
        .mixer()
        .tap()
        .unwrap()
        .drain()
        .entries
        .into_iter()
        .filter(|e| e.direction == Direction::Response)
        .filter_map(|e| e.params.get("access_token").cloned())
        .collect();
    assert_eq!(tokens.len(), 6);
    let sessions = stack.mixer().debug_sessions();
    let sealed = stack.mixer().debug_unsealed().unwrap();
    let mut on_disk = Vec::new();
    for entry in walk(dir.path()) {
        on_disk.extend(std::fs::read(entry).unwrap());
    }
    for t in &tokens {
        assert!(!sessions.contains(t.as_str()));
        assert!(!contains(&sealed, t.as_bytes()));
        assert!(!contains(&on_disk, t.as_bytes()));
    }
    // Raw uids reach sealed state only as PRF images.
    for u in users.iter().take(3) {
        assert!(!contains(&sealed, u.uid.as_bytes()));
    }
    stack.down(false).await.unwrap();
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[tokio::test(flavor = "multi_thread")]
async fn lifecycle_and_persistence() {
    let dir = tempfile::tempdir().unwrap();
    let users;
    let (sub, rp_ids, measurement, pins, rps_registered) = {
        let stack = stack(dir.path()).await;
        users = stack.users();
        assert_eq!(stack.descriptor().endpoints().count(), 6);
        let sub = Agent::new()
            .login(&LoginRequest::new(stack.rp_url(0), &users[0]))
            .await
            .unwrap()
            .me
            .sub;
        let ids: Vec<String> = (0..2).map(|i| stack.rp(i).client_id().to_owned()).collect();
        let pins: Vec<_> = (0..2).map(|i| stack.rp(i).pinned().cloned()).collect();
        let out = (
            sub,
            ids,
            stack.descriptor().measurement,
            pins,
            stack.mixer().registered_rps(),
        );

        // Same ports while running: the second bring-up fails cleanly.
        assert!(Stack::up(options(dir.path())).await.is_err());
        stack.down(false).await.unwrap();
        out
    };
    assert!(dir.path().join("mixer/prf_key.sealed").exists());

    let stack = stack(dir.path()).await;
    assert_eq!(stack.descriptor().measurement, measurement);
    assert_eq!(stack.mixer().registered_rps(), rps_registered);
    for i in 0..2 {
        assert_eq!(stack.rp(i).client_id(), rp_ids[i]);
        assert_eq!(stack.rp(i).pinned().cloned(), pins[i]);
    }
    let again = Agent::new()
        .login(&LoginRequest::new(stack.rp_url(0), &users[0]))
        .await
        .unwrap()
        .me;
    assert_eq!(again.sub, sub);
    assert_eq!(again.account_id, 1, "the RP recognizes the returning account");
    stack.down(true).await.unwrap();
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    wipe_dir(dir.path()).unwrap();
    wipe_dir(&dir.path().join("missing")).unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn corrupted_seal_refuses_start() {
    let dir = tempfile::tempdir().unwrap();
    stack(dir.path()).await.down(false).await.unwrap();
    let path = dir.path().join("mixer/prf_key.sealed");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[20] ^= 0x01;
    std::fs::write(&path, bytes).unwrap();
    match Stack::up(options(dir.path())).await {
        Err(StackError::Mixer(MixerError::Enclave(EnclaveError::SealTamper))) => {}
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("mixer started on a tampered seal"),
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn repin_required_after_program_change() {
    let dir = tempfile::tempdir().unwrap();
    let mut opts = options(dir.path());
    opts.topology.seal_mode = miso::enclave::SealMode::MrSigner;
    let mut stack = Stack::up(opts).await.unwrap();
    let rp1 = stack.rp_url(1).to_owned();
    let before = Agent::new()
        .login(&LoginRequest::new(&rp1, &stack.users()[0]))
        .await
        .unwrap()
        .me
        .sub;
    stack.restart_mixer(Some("miso-mixer-v2")).await.unwrap();
    match stack.restart_rp(0).await {
        Err(StackError::Rp(RpError::RepinRequired { field, .. })) => assert_eq!(field, "measurement"),
        other => panic!("expected RepinRequired, got {other:?}"),
    }
    // MRSIGNER sealing carried the PRF key and salts across the upgrade; an
    // RP that is not restarted keeps its pin and sees the same sub.
    let same = Agent::new()
        .login(&LoginRequest::new(&rp1, &stack.users()[0]))
        .await
        .unwrap()
        .me
        .sub;
    assert_eq!(same, before);
    stack.down(false).await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn baseline_rp_talks_to_idp_directly() {
    let dir = tempfile::tempdir().unwrap();
    let mut opts = options(dir.path());
    opts.topology.baseline_rp = true;
    let stack = Stack::up(opts).await.unwrap();
    let users = stack.users();
    let me = Agent::new()
        .login(&LoginRequest::new(stack.baseline_url().unwrap(), &users[0]))
        .await
        .unwrap()
        .me;
    assert_eq!(me.sub, users[0].uid);
    assert!(stack.baseline_rp().unwrap().pinned().is_none());
    stack.down(false).await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn negative_controls_are_detected() {
    let dir = tempfile::tempdir().unwrap();
    let mut opts = options(dir.path());
    opts.taps = true;
    opts.faults = Faults {
        leak_rp_client_id: true,
        identity_blinding: false,
    };
    let stack = Stack::up(opts).await.unwrap();
    let report = run_game_idp(&stack, 6, 3).await;
    assert!(
        report.violations.iter().any(|v| v.contains("rp_client_id")),
        "{report:?}"
    );
    stack.down(true).await.unwrap();

    let mut opts = options(dir.path());
    opts.taps = true;
    opts.faults = Faults {
        leak_rp_client_id: false,
        identity_blinding: true,
    };
    let stack = Stack::up(opts).await.unwrap();
    let report = run_game_rp(&stack, 6, 3).await;
    assert!(!report.passed());
    stack.down(true).await.unwrap();

    let stack = common::stack(dir.path()).await;
    assert!(run_game_idp(&stack, 0, 3).await.passed());
    stack.down(false).await.unwrap();
}

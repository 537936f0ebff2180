//! Bringing up a complete loopback deployment: n IdP mocks, the mixer, and
//! m relying parties (plus an optional baseline RP wired straight to the
//! first IdP), with configs and fixtures generated under one state directory.
//!
//! ```text
//! <state_dir>/
//!   stack.json          descriptor (ports, ids, measurement, pid)
//!   platform.key        simulated platform secrets
//!   idp-a/              idp.conf, fixtures.toml, clients.json
//!   mixer/              mixer.conf, *.sealed
//!   rp-0/               rp.conf, pinned_mixer.json, credentials.json, accounts.json
//!   rp-baseline/
//! ```

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

use crate::backchannel::http_client;
use crate::clock::SharedClock;
use crate::config::KvConfig;
use crate::enclave::{write_atomic, EnclaveError, Platform, SealMode};
use crate::idp::{FixtureUser, Fixtures, IdpConfig, IdpError, IdpMock, IdpOptions};
use crate::mixer::{
    Faults, IdpEndpoint, Mixer, MixerConfig, MixerError, MixerOptions, DEFAULT_PROGRAM, DEFAULT_SIGNER,
};
use crate::rp::{RpConfig, RpDemo, RpError, RpOptions};
use crate::server::{self, ServeError, ServiceHandle};
use crate::tap::Tap;

pub const DESCRIPTOR_FILE: &str = "stack.json";
pub const STATE_DIR_ENV: &str = "MISO_STATE_DIR";
pub const BASELINE_RP: &str = "rp-baseline";

/// Names used for generated fixture users, then `user004`, `user005`, ...
const NAMED_USERS: [&str; 4] = ["alice", "bob", "carol", "dave"];

#[derive(Debug, thiserror::Error)]
pub enum StackError {
    #[error(transparent)]
    Serve(#[from] ServeError),
    #[error(transparent)]
    Idp(#[from] IdpError),
    #[error(transparent)]
    Mixer(#[from] MixerError),
    #[error(transparent)]
    Rp(#[from] RpError),
    #[error(transparent)]
    Enclave(#[from] EnclaveError),
    #[error("{path}: {message}")]
    State { path: PathBuf, message: String },
    #[error("{service} at {url} did not become healthy")]
    Unhealthy { service: String, url: String },
}

fn state_err(path: &Path, e: impl std::fmt::Display) -> StackError {
    StackError::State {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub idps: usize,
    pub rps: usize,
    pub seal_mode: SealMode,
    /// Also run an RP that talks OAuth 2.0 directly to the first IdP.
    pub baseline_rp: bool,
}

impl Default for Topology {
    fn default() -> Self {
        Self {
            idps: 3,
            rps: 2,
            seal_mode: SealMode::MrEnclave,
            baseline_rp: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StackOptions {
    pub topology: Topology,
    pub state_dir: PathBuf,
    pub bind_ip: std::net::IpAddr,
    /// First port of a contiguous range; 0 picks ephemeral ports. Ignored
    /// when a previous descriptor in `state_dir` already fixes the ports.
    pub base_port: u16,
    pub users: usize,
    pub pbkdf2_iterations: u32,
    pub taps: bool,
    pub faults: Faults,
    pub program: String,
    pub clock: Option<SharedClock>,
}

impl StackOptions {
    pub fn new(state_dir: impl Into<PathBuf>) -> Self {
        Self {
            topology: Topology::default(),
            state_dir: state_dir.into(),
            bind_ip: [127, 0, 0, 1].into(),
            base_port: 0,
            users: 8,
            pbkdf2_iterations: crate::idp::DEFAULT_PBKDF2_ITERATIONS,
            taps: false,
            faults: Faults::default(),
            program: DEFAULT_PROGRAM.to_owned(),
            clock: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoint {
    pub id: String,
    pub url: String,
    pub port: u16,
    /// The client id this service holds upstream: the mixer's id at an IdP,
    /// or the RP's id at the mixer (or IdP, for the baseline RP).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackDescriptor {
    pub pid: u32,
    pub state_dir: PathBuf,
    pub topology: Topology,
    #[serde(with = "hex::serde")]
    pub measurement: [u8; 32],
    #[serde(with = "hex::serde")]
    pub tee_public_key: [u8; 32],
    pub mixer: Endpoint,
    pub idps: Vec<Endpoint>,
    pub rps: Vec<Endpoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_rp: Option<Endpoint>,
}

impl StackDescriptor {
    pub fn load(state_dir: &Path) -> Result<Option<Self>, StackError> {
        let path = state_dir.join(DESCRIPTOR_FILE);
        match std::fs::read(&path) {
            Ok(b) => serde_json::from_slice(&b).map(Some).map_err(|e| state_err(&path, e)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(state_err(&path, e)),
        }
    }

    pub fn endpoints(&self) -> impl Iterator<Item = &Endpoint> {
        self.idps
            .iter()
            .chain(std::iter::once(&self.mixer))
            .chain(&self.rps)
            .chain(&self.baseline_rp)
    }
}

/// A generated user known to every IdP under the same username and uid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserFixture {
    pub username: String,
    pub password: String,
    pub uid: String,
}

pub fn idp_name(i: usize) -> String {
    let letter = (b'a' + (i % 26) as u8) as char;
    if i < 26 {
        format!("idp-{letter}")
    } else {
        format!("idp-{letter}{}", i / 26)
    }
}

pub fn fixture_users(n: usize) -> Vec<UserFixture> {
    (0..n)
        .map(|i| {
            let username = NAMED_USERS
                .get(i)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("user{i:03}"));
            UserFixture {
                password: format!("{username}-pw"),
                uid: format!("{username}-{:03}", i + 1),
                username,
            }
        })
        .collect()
}

/// Fixtures for one IdP. The same human has the same uid string at every
/// IdP, which exercises IdP namespacing in the derivations.
pub fn generate_fixtures(idp_id: &str, users: &[UserFixture], iterations: u32) -> Fixtures {
    Fixtures {
        pbkdf2_iterations: Some(iterations),
        users: users
            .iter()
            .map(|u| FixtureUser {
                username: u.username.clone(),
                password: u.password.clone(),
                uid: u.uid.clone(),
                attributes: [
                    ("email".to_owned(), format!("{}@{idp_id}.test", u.username)),
                    ("display_name".to_owned(), display_name(&u.username)),
                ]
                .into(),
            })
            .collect(),
        clients: Vec::new(),
    }
}

/// The fixture display name: the username with its first letter capitalized.
pub fn display_name(s: &str) -> String {
    let mut c = s.chars();
    c.next()
        .map(|f| f.to_uppercase().chain(c).collect())
        .unwrap_or_default()
}

struct Running<T> {
    id: String,
    service: T,
    handle: ServiceHandle,
}

/// A live deployment. Services run as tasks on the current tokio runtime.
pub struct Stack {
    options: StackOptions,
    platform: Arc<Platform>,
    descriptor: StackDescriptor,
    idps: Vec<Running<IdpMock>>,
    mixer: Option<Running<Mixer>>,
    mixer_config: MixerConfig,
    rps: Vec<Running<RpDemo>>,
    baseline: Option<Running<RpDemo>>,
}

impl std::fmt::Debug for Stack {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stack").field("descriptor", &self.descriptor).finish()
    }
}

async fn bind_all(ip: std::net::IpAddr, ports: &[u16]) -> Result<Vec<TcpListener>, StackError> {
    let mut out = Vec::with_capacity(ports.len());
    for &port in ports {
        out.push(server::bind(SocketAddr::new(ip, port)).await?);
    }
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<(), StackError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| state_err(dir, e))?;
    }
    write_atomic(path, text.as_bytes()).map_err(StackError::from)
}

/// Polls `/healthz` until it answers 200.
pub async fn wait_healthy(service: &str, url: &str) -> Result<(), StackError> {
    let client = http_client();
    for _ in 0..50 {
        if let Ok(r) = client.get(format!("{url}/healthz")).send().await {
            if r.status().is_success() {
                return Ok(());
            }
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    Err(StackError::Unhealthy {
        service: service.to_owned(),
        url: url.to_owned(),
    })
}

impl Stack {
    /// Binds every port first, then starts IdPs, the mixer, and RPs in
    /// dependency order. On failure everything already started is stopped.
    pub async fn up(options: StackOptions) -> Result<Self, StackError> {
        let topo = options.topology;
        let dir = options.state_dir.clone();
        std::fs::create_dir_all(&dir).map_err(|e| state_err(&dir, e))?;
        let previous = StackDescriptor::load(&dir)?;
        let count = topo.idps + 1 + topo.rps + usize::from(topo.baseline_rp);
        let ports: Vec<u16> = match &previous {
            Some(p) if p.topology == topo => p.endpoints().map(|e| e.port).collect(),
            _ if options.base_port != 0 => (0..count as u16).map(|i| options.base_port + i).collect(),
            _ => vec![0; count],
        };
        let mut listeners = bind_all(options.bind_ip, &ports).await?.into_iter();
        let mut next_listener = || {
            let l = listeners.next().expect("one listener per service");
            let addr = l.local_addr().expect("bound");
            (l, addr)
        };

        let platform = Arc::new(Platform::load_or_create(&dir.join("platform.key"))?);
        let users = fixture_users(options.users);
        let tap = |id: &str| options.taps.then(|| Tap::new(id));

        let mut stack = Stack {
            platform: platform.clone(),
            descriptor: StackDescriptor {
                pid: std::process::id(),
                state_dir: dir.clone(),
                topology: topo,
                measurement: [0; 32],
                tee_public_key: platform.tee_public_key(),
                mixer: Endpoint {
                    id: "mixer".into(),
                    url: String::new(),
                    port: 0,
                    client_id: None,
                },
                idps: Vec::new(),
                rps: Vec::new(),
                baseline_rp: None,
            },
            idps: Vec::new(),
            mixer: None,
            mixer_config: MixerConfig::from_kv(&placeholder_mixer_kv(&dir))?,
            rps: Vec::new(),
            baseline: None,
            options: options.clone(),
        };

        let result: Result<(), StackError> = async {
            let mut idp_endpoints = std::collections::BTreeMap::new();
            for i in 0..topo.idps {
                let id = idp_name(i);
                let (listener, addr) = next_listener();
                let sdir = dir.join(&id);
                let fixtures_path = sdir.join("fixtures.toml");
                if !fixtures_path.exists() {
                    let f = generate_fixtures(&id, &users, options.pbkdf2_iterations);
                    write_text(&fixtures_path, &f.to_toml())?;
                }
                let config = IdpConfig {
                    idp_id: id.clone(),
                    display_name: format!("Identity Provider {}", id.trim_start_matches("idp-").to_uppercase()),
                    listen_addr: addr,
                    public_url: format!("http://{addr}"),
                    state_dir: Some(sdir.clone()),
                    fixtures: fixtures_path,
                    auto_consent: false,
                };
                write_text(&sdir.join("idp.conf"), &config.to_kv().render())?;
                let idp = IdpMock::from_config(
                    &config,
                    IdpOptions {
                        clock: options.clock.clone(),
                        tap: tap(&id),
                    },
                )?;
                let handle = idp.serve(listener).await;
                wait_healthy(&id, &handle.url()).await?;
                let url = handle.url();
                idp_endpoints.insert(
                    id.clone(),
                    IdpEndpoint {
                        auth_url: format!("{url}/auth_IdP"),
                        token_url: format!("{url}/token_IdP"),
                        res_url: format!("{url}/res_IdP"),
                        register_url: Some(format!("{url}/register")),
                        client_id: None,
                        client_secret: None,
                    },
                );
                stack.descriptor.idps.push(Endpoint {
                    id: id.clone(),
                    url,
                    port: addr.port(),
                    client_id: None,
                });
                stack.idps.push(Running {
                    id,
                    service: idp,
                    handle,
                });
            }

            let (listener, addr) = next_listener();
            let mixer_dir = dir.join("mixer");
            stack.mixer_config = MixerConfig {
                listen_addr: addr,
                public_url: format!("http://{addr}"),
                state_dir: mixer_dir.clone(),
                platform_key: dir.join("platform.key"),
                seal_mode: topo.seal_mode,
                program: options.program.clone(),
                signer: DEFAULT_SIGNER.to_owned(),
                name: "MISO mixer".to_owned(),
                allow_loopback_http: true,
                default_idp: idp_endpoints.keys().next().cloned(),
                idps: idp_endpoints,
                faults: options.faults,
            };
            write_text(&mixer_dir.join("mixer.conf"), &stack.mixer_config.to_kv().render())?;
            stack.start_mixer(listener).await?;

            for i in 0..topo.rps {
                let (listener, addr) = next_listener();
                let id = format!("rp-{i}");
                let config = stack.rp_config(&id, addr, false);
                stack.start_rp(id, config, listener).await?;
            }
            if topo.baseline_rp {
                let (listener, addr) = next_listener();
                let config = stack.rp_config(BASELINE_RP, addr, true);
                stack.start_rp(BASELINE_RP.to_owned(), config, listener).await?;
            }
            stack.write_descriptor()
        }
        .await;
        match result {
            Ok(()) => Ok(stack),
            Err(e) => {
                stack.stop_all().await;
                Err(e)
            }
        }
    }

    fn rp_config(&self, id: &str, addr: SocketAddr, baseline: bool) -> RpConfig {
        RpConfig {
            rp_id: id.to_owned(),
            listen_addr: addr,
            public_url: format!("http://{addr}"),
            state_dir: self.options.state_dir.join(id),
            provider_url: if baseline {
                self.descriptor.idps[0].url.clone()
            } else {
                self.descriptor.mixer.url.clone()
            },
            baseline_mode: baseline,
            baseline_idp: self.descriptor.idps[0].id.clone(),
            expected_measurement: (!baseline).then_some(self.descriptor.measurement),
            tee_public_key: (!baseline).then_some(self.descriptor.tee_public_key),
            client_id: None,
            client_secret: None,
        }
    }

    async fn start_mixer(&mut self, listener: TcpListener) -> Result<(), StackError> {
        let mixer = Mixer::init(
            self.mixer_config.clone(),
            MixerOptions {
                clock: self.options.clock.clone(),
                tap: self.options.taps.then(|| Tap::new("mixer")),
                platform: Some(self.platform.clone()),
            },
        )
        .await?;
        let handle = mixer.serve(listener).await;
        wait_healthy("mixer", &handle.url()).await?;
        self.descriptor.measurement = mixer.measurement();
        self.descriptor.mixer = Endpoint {
            id: "mixer".into(),
            url: handle.url(),
            port: handle.addr().port(),
            client_id: None,
        };
        for e in &mut self.descriptor.idps {
            e.client_id = mixer.idp_client_id(&e.id).map(str::to_owned);
        }
        self.mixer = Some(Running {
            id: "mixer".into(),
            service: mixer,
            handle,
        });
        Ok(())
    }

    async fn start_rp(&mut self, id: String, config: RpConfig, listener: TcpListener) -> Result<(), StackError> {
        write_text(&config.state_dir.join("rp.conf"), &config.to_kv().render())?;
        let baseline = config.baseline_mode;
        let rp = RpDemo::bootstrap(
            config,
            RpOptions {
                clock: self.options.clock.clone(),
                tap: self.options.taps.then(|| Tap::new(id.as_str())),
            },
        )
        .await?;
        let handle = rp.serve(listener).await;
        wait_healthy(&id, &handle.url()).await?;
        let endpoint = Endpoint {
            id: id.clone(),
            url: handle.url(),
            port: handle.addr().port(),
            client_id: Some(rp.client_id().to_owned()),
        };
        let running = Running {
            id,
            service: rp,
            handle,
        };
        if baseline {
            self.descriptor.baseline_rp = Some(endpoint);
            self.baseline = Some(running);
        } else {
            self.descriptor.rps.push(endpoint);
            self.rps.push(running);
        }
        Ok(())
    }

    fn write_descriptor(&self) -> Result<(), StackError> {
        let path = self.options.state_dir.join(DESCRIPTOR_FILE);
        let text = serde_json::to_string_pretty(&self.descriptor).expect("descriptor serializes");
        write_text(&path, &text)
    }

    pub fn descriptor(&self) -> &StackDescriptor {
        &self.descriptor
    }

    pub fn options(&self) -> &StackOptions {
        &self.options
    }

    pub fn platform(&self) -> &Arc<Platform> {
        &self.platform
    }

    pub fn users(&self) -> Vec<UserFixture> {
        fixture_users(self.options.users)
    }

    pub fn mixer(&self) -> &Mixer {
        &self.mixer.as_ref().expect("mixer running").service
    }

    pub fn mixer_url(&self) -> &str {
        &self.descriptor.mixer.url
    }

    pub fn idp(&self, i: usize) -> &IdpMock {
        &self.idps[i].service
    }

    pub fn idp_ids(&self) -> Vec<String> {
        self.idps.iter().map(|r| r.id.clone()).collect()
    }

    pub fn rp(&self, i: usize) -> &RpDemo {
        &self.rps[i].service
    }

    pub fn rp_url(&self, i: usize) -> &str {
        &self.descriptor.rps[i].url
    }

    pub fn baseline_rp(&self) -> Option<&RpDemo> {
        self.baseline.as_ref().map(|r| &r.service)
    }

    pub fn baseline_url(&self) -> Option<&str> {
        self.descriptor.baseline_rp.as_ref().map(|e| e.url.as_str())
    }

    /// All service taps, when the stack was started with `taps`.
    pub fn taps(&self) -> Vec<Tap> {
        let mut out: Vec<Tap> = self.idps.iter().filter_map(|r| r.service.tap().cloned()).collect();
        out.extend(self.mixer.as_ref().and_then(|m| m.service.tap().cloned()));
        out.extend(self.rps.iter().filter_map(|r| r.service.tap().cloned()));
        out.extend(self.baseline.as_ref().and_then(|r| r.service.tap().cloned()));
        out
    }

    /// Stops the mixer and starts it again from its sealed state on the
    /// same port, optionally as a different program.
    pub async fn restart_mixer(&mut self, program: Option<&str>) -> Result<(), StackError> {
        if let Some(mut m) = self.mixer.take() {
            m.handle.shutdown().await;
        }
        if let Some(p) = program {
            self.mixer_config.program = p.to_owned();
        }
        let listener = server::bind(self.mixer_config.listen_addr).await?;
        self.start_mixer(listener).await?;
        self.write_descriptor()
    }

    /// Re-runs an RP's bootstrap against the current mixer (attestation
    /// check against its pin, then registration if it has none).
    pub async fn restart_rp(&mut self, i: usize) -> Result<(), StackError> {
        let mut old = self.rps.remove(i);
        old.handle.shutdown().await;
        let addr = old.handle.addr();
        let config = self.rp_config(&old.id, addr, false);
        self.descriptor.rps.remove(i);
        let listener = server::bind(addr).await?;
        self.start_rp(old.id, config, listener).await?;
        let (rp, ep) = (
            self.rps.pop().expect("just pushed"),
            self.descriptor.rps.pop().expect("just pushed"),
        );
        self.rps.insert(i, rp);
        self.descriptor.rps.insert(i, ep);
        self.write_descriptor()
    }

    async fn stop_all(&mut self) {
        for r in self.rps.iter_mut().chain(self.baseline.as_mut()) {
            r.handle.shutdown().await;
        }
        if let Some(m) = self.mixer.as_mut() {
            m.handle.shutdown().await;
        }
        for r in &mut self.idps {
            r.handle.shutdown().await;
        }
    }

    /// Ordered shutdown: RPs, then the mixer, then IdPs. With `wipe`, the
    /// state directory is emptied.
    pub async fn down(mut self, wipe: bool) -> Result<(), StackError> {
        self.stop_all().await;
        if wipe {
            wipe_dir(&self.options.state_dir)
        } else {
            Ok(())
        }
    }
}

fn placeholder_mixer_kv(dir: &Path) -> KvConfig {
    let mut kv = KvConfig::default();
    kv.set("listen_addr", "127.0.0.1:0")
        .set("state_dir", dir.join("mixer").display())
        .set("plaintext", true);
    kv
}

/// Removes everything inside `dir`, leaving the directory itself.
pub fn wipe_dir(dir: &Path) -> Result<(), StackError> {
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(state_err(dir, e)),
    };
    for entry in entries {
        let entry = entry.map_err(|e| state_err(dir, e))?;
        let path = entry.path();
        let res = if entry.file_type().map(|t| t.is_dir()).unwrap_or(false) {
            std::fs::remove_dir_all(&path)
        } else {
            std::fs::remove_file(&path)
        };
        res.map_err(|e| state_err(&path, e))?;
    }
    Ok(())
}

/// The state directory from `MISO_STATE_DIR`, else `./miso-state`.
pub fn default_state_dir() -> PathBuf {
    std::env::var_os(STATE_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("miso-state"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_and_fixtures() {
        assert_eq!(idp_name(0), "idp-a");
        assert_eq!(idp_name(2), "idp-c");
        let users = fixture_users(6);
        assert_eq!(users[0].username, "alice");
        assert_eq!(users[5].username, "user005");
        let f = generate_fixtures("idp-a", &users, 1);
        assert_eq!(f.users[0].uid, "alice-001");
        assert_eq!(f.users[0].attributes["email"], "alice@idp-a.test");
        assert_eq!(f.users[0].attributes["display_name"], "Alice");
    }

    #[test]
    fn wipe_leaves_empty_dir() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("a/b")).unwrap();
        std::fs::write(dir.path().join("x.sealed"), b"1").unwrap();
        wipe_dir(dir.path()).unwrap();
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
        wipe_dir(&dir.path().join("missing")).unwrap();
    }
}

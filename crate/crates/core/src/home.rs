//! On-disk layout shared by the command line and the HTTP service.
//!
//! ```text
//! $AURA_HOME/
//!   config.json        engine configuration
//!   mitigations.json   mitigation registry
//!   catalogue.json     dimension catalogue (optional)
//!   evaluator.json     stub evaluator fixtures (optional)
//!   memory.json        local memory store
//!   traces.jsonl       append-only event log
//!   state.json         HITL sessions, parked runs, id counter
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::clock::{Clock, FixedClock, SystemClock};
use crate::config::EngineConfig;
use crate::error::{AuraError, Result};
use crate::evaluator::FixtureTable;
use crate::hitl::{HitlSession, SessionStore};
use crate::memory::{InMemoryStore, MemoryBackend};
use crate::mitigation::{Mitigation, MitigationRegistry};
use crate::pipeline::{Engine, RefineState};
use crate::registry::DimensionCatalogue;
use crate::trace::TraceStore;

pub const HOME_ENV: &str = "AURA_HOME";
pub const SEED_ENV: &str = "AURA_SEED";
pub const TIME_ENV: &str = "AURA_FIXED_TIME";

#[derive(Debug, Default, Serialize, Deserialize)]
struct State {
    id_counter: u64,
    #[serde(default)]
    sessions: Vec<HitlSession>,
    #[serde(default)]
    pending: Vec<RefineState>,
}

/// A state directory plus the seed and clock overrides to open it with.
#[derive(Debug, Clone, PartialEq)]
pub struct Home {
    root: PathBuf,
    seed: Option<u64>,
    fixed_time: Option<DateTime<Utc>>,
}

impl Home {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Home {
            root: root.into(),
            seed: None,
            fixed_time: None,
        }
    }

    /// Root from `$AURA_HOME` (else `$HOME/.aura`, else `./.aura`), seed
    /// from `$AURA_SEED`, clock pinned by `$AURA_FIXED_TIME` (RFC 3339).
    pub fn from_env() -> Result<Self> {
        let root = match (std::env::var_os(HOME_ENV), std::env::var_os("HOME")) {
            (Some(p), _) => PathBuf::from(p),
            (None, Some(h)) => PathBuf::from(h).join(".aura"),
            (None, None) => PathBuf::from(".aura"),
        };
        let mut home = Home::new(root);
        if let Ok(seed) = std::env::var(SEED_ENV) {
            home.seed = Some(
                seed.trim()
                    .parse()
                    .map_err(|_| AuraError::Config(format!("{SEED_ENV}={seed} is not an unsigned integer")))?,
            );
        }
        if let Ok(t) = std::env::var(TIME_ENV) {
            let at = DateTime::parse_from_rfc3339(t.trim())
                .map_err(|e| AuraError::Config(format!("{TIME_ENV}={t}: {e}")))?;
            home.fixed_time = Some(at.with_timezone(&Utc));
        }
        Ok(home)
    }

    /// Same overrides over a different root.
    pub fn with_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.root = root.into();
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_fixed_time(mut self, at: DateTime<Utc>) -> Self {
        self.fixed_time = Some(at);
        self
    }

    fn clock(&self) -> Arc<dyn Clock> {
        match self.fixed_time {
            Some(t) => Arc::new(FixedClock(t)),
            None => Arc::new(SystemClock),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Stored configuration with the seed override applied, or defaults.
    pub fn load_config(&self) -> Result<EngineConfig> {
        let mut cfg = self.stored_config()?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    /// Configuration exactly as saved, without overrides.
    pub fn stored_config(&self) -> Result<EngineConfig> {
        match read_optional(&self.path("config.json"))? {
            Some(text) => EngineConfig::from_json(&text),
            None => Ok(EngineConfig::default()),
        }
    }

    pub fn save_config(&self, cfg: &EngineConfig) -> Result<()> {
        cfg.validate()?;
        write_atomic(&self.path("config.json"), &cfg.to_json()?)
    }

    pub fn load_mitigations(&self) -> Result<Vec<Mitigation>> {
        match read_optional(&self.path("mitigations.json"))? {
            Some(text) => serde_json::from_str(&text)
                .map_err(|e| AuraError::Storage(format!("mitigations.json is corrupt: {e}"))),
            None => Ok(Vec::new()),
        }
    }

    pub fn save_mitigations(&self, items: &[Mitigation]) -> Result<()> {
        write_atomic(&self.path("mitigations.json"), &serde_json::to_string_pretty(items)?)
    }

    fn load_state(&self) -> Result<State> {
        match read_optional(&self.path("state.json"))? {
            Some(text) => {
                serde_json::from_str(&text).map_err(|e| AuraError::Storage(format!("state.json is corrupt: {e}")))
            }
            None => Ok(State::default()),
        }
    }

    /// Local store at `memory.json` with the configured thresholds.
    pub fn local_memory(&self, cfg: &EngineConfig) -> Result<InMemoryStore> {
        InMemoryStore::open(&self.path("memory.json"), cfg.memory.embedding_dim, cfg.memory_config())
    }

    /// Builds an engine over the persisted stores. `memory` replaces the
    /// local store, e.g. with a remote client.
    pub fn open_engine(&self, cfg: EngineConfig, memory: Option<Arc<dyn MemoryBackend>>) -> Result<Engine> {
        let memory = match memory {
            Some(m) => m,
            None => Arc::new(self.local_memory(&cfg)?),
        };
        let fixtures = match read_optional(&self.path("evaluator.json"))? {
            Some(text) => FixtureTable::from_json_str(&text)?,
            None => FixtureTable::default(),
        };
        let state = self.load_state()?;
        let sessions = SessionStore::new();
        sessions.replace_all(state.sessions);
        let mut builder = Engine::builder(cfg)
            .fixtures(fixtures)
            .memory(memory)
            .mitigations(Arc::new(MitigationRegistry::new(self.load_mitigations()?)?))
            .traces(Arc::new(TraceStore::open(&self.path("traces.jsonl"))?))
            .sessions(Arc::new(sessions), state.pending)
            .clock(self.clock())
            .id_counter(state.id_counter);
        if let Some(text) = read_optional(&self.path("catalogue.json"))? {
            let cat: DimensionCatalogue =
                serde_json::from_str(&text).map_err(|e| AuraError::Config(format!("catalogue.json: {e}")))?;
            builder = builder.catalogue(cat);
        }
        builder.build()
    }

    /// Persists the registry, sessions, parked runs and id counter. Memory
    /// and traces persist themselves on write.
    pub fn save_state(&self, engine: &Engine) -> Result<()> {
        self.save_mitigations(&engine.mitigations().snapshot())?;
        let state = State {
            id_counter: engine.id_counter(),
            sessions: engine.sessions().list(),
            pending: engine.pending_runs(),
        };
        write_atomic(&self.path("state.json"), &serde_json::to_string_pretty(&state)?)
    }
}

fn read_optional(path: &Path) -> Result<Option<String>> {
    match fs::read_to_string(path) {
        Ok(t) => Ok(Some(t)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(AuraError::Storage(format!("reading {}: {e}", path.display()))),
    }
}

pub(crate) fn write_atomic(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| AuraError::Storage(format!("writing {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| AuraError::Storage(format!("replacing {}: {e}", path.display())))
}

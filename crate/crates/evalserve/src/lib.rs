//! Human-evaluation service: assigns MC-IC instances to raters, records
//! their choices in an append-only log and aggregates the results.

pub mod log;
pub mod report;
pub mod server;
pub mod state;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use dmc_core::dataset::{read_dataset, Split};

pub use log::{read_log, LogEvent, LogWriter};
pub use report::{aggregate, AggregateReport, Bucket};
pub use server::{router, serve};
pub use state::{AssignmentState, AssignmentView, Pool, SubmitError, TrainingExample};

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(#[from] dmc_core::Error),
    #[error("{path}: line {line}: {reason}")]
    BadLog {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("image manifest {path}: line {line}: {reason}")]
    BadManifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("configuration: {0}")]
    Config(String),
    #[error("inconsistent state: {0}")]
    State(String),
}

pub const ENV_BIND: &str = "DMC_BIND";
pub const ENV_DATASET: &str = "DMC_DATASET";
pub const ENV_IMAGES: &str = "DMC_IMAGES";
pub const ENV_LOG: &str = "DMC_LOG";
pub const ENV_POOL_SPLIT: &str = "DMC_POOL_SPLIT";
pub const ENV_IDLE_TIMEOUT_SECS: &str = "DMC_IDLE_TIMEOUT_SECS";
pub const DEFAULT_BIND: &str = "127.0.0.1:8080";
pub const TRAINING_EXAMPLE_COUNT: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServeConfig {
    pub bind: String,
    pub dataset: PathBuf,
    pub images: PathBuf,
    pub log: PathBuf,
    /// Split whose instances are rated; training examples come from train.
    pub pool_split: Split,
    pub idle_timeout_ms: u64,
}

impl ServeConfig {
    pub fn new(
        dataset: impl Into<PathBuf>,
        images: impl Into<PathBuf>,
        log: impl Into<PathBuf>,
    ) -> Self {
        ServeConfig {
            bind: DEFAULT_BIND.to_owned(),
            dataset: dataset.into(),
            images: images.into(),
            log: log.into(),
            pool_split: Split::Test,
            idle_timeout_ms: state::DEFAULT_IDLE_TIMEOUT_MS,
        }
    }

    /// Reads `DMC_BIND`, `DMC_DATASET`, `DMC_IMAGES`, `DMC_LOG` and the
    /// optional `DMC_POOL_SPLIT` / `DMC_IDLE_TIMEOUT_SECS`.
    pub fn from_env() -> Result<Self, ServeError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, ServeError> {
        let need = |k: &str| get(k).ok_or_else(|| ServeError::Config(format!("{k} is not set")));
        let mut cfg = ServeConfig::new(need(ENV_DATASET)?, need(ENV_IMAGES)?, need(ENV_LOG)?);
        if let Some(b) = get(ENV_BIND) {
            cfg.bind = b;
        }
        if let Some(s) = get(ENV_POOL_SPLIT) {
            cfg.pool_split = s.parse()?;
        }
        if let Some(t) = get(ENV_IDLE_TIMEOUT_SECS) {
            let secs: u64 = t.parse().map_err(|_| {
                ServeError::Config(format!("{ENV_IDLE_TIMEOUT_SECS}={t} is not a number"))
            })?;
            cfg.idle_timeout_ms = secs * 1000;
        }
        Ok(cfg)
    }
}

/// Tab-separated `image_id<TAB>url` lines; `#` starts a comment line.
pub fn read_image_manifest(path: impl AsRef<Path>) -> Result<HashMap<String, String>, ServeError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: &str| ServeError::BadManifest {
            path: path.to_owned(),
            line: i + 1,
            reason: reason.to_owned(),
        };
        let (id, url) = line
            .split_once('\t')
            .ok_or_else(|| bad("expected image_id<TAB>url"))?;
        if id.is_empty() || url.is_empty() {
            return Err(bad("empty field"));
        }
        if out.insert(id.to_owned(), url.to_owned()).is_some() {
            return Err(bad("duplicate image id"));
        }
    }
    Ok(out)
}

/// Everything a running server needs: the rated pool, training examples,
/// replayed state and the log writer. All mutation goes through `&mut self`,
/// so a single lock makes check-and-append atomic.
#[derive(Debug)]
pub struct Service {
    pub pool: Pool,
    pub training: Vec<TrainingExample>,
    pub state: AssignmentState,
    events: Vec<LogEvent>,
    writer: LogWriter,
}

impl Service {
    pub fn open(cfg: &ServeConfig) -> Result<Self, ServeError> {
        let instances = read_dataset(&cfg.dataset)?;
        let urls = read_image_manifest(&cfg.images)?;
        let (rated, train): (Vec<_>, Vec<_>) = instances
            .into_iter()
            .filter(|i| i.split == cfg.pool_split || i.split == Split::Train)
            .partition(|i| i.split == cfg.pool_split);
        let pool = Pool::new(rated, urls.clone()).map_err(ServeError::Config)?;
        if pool.is_empty() {
            return Err(ServeError::Config(format!(
                "no {} instances to rate",
                cfg.pool_split
            )));
        }
        let training = Pool::new(train, urls)
            .map_err(ServeError::Config)?
            .training_examples(TRAINING_EXAMPLE_COUNT);
        Self::with_pool(pool, training, &cfg.log, cfg.idle_timeout_ms)
    }

    /// Replays the log at `log_path` (if any) and opens it for appending.
    pub fn with_pool(
        pool: Pool,
        training: Vec<TrainingExample>,
        log_path: impl AsRef<Path>,
        idle_timeout_ms: u64,
    ) -> Result<Self, ServeError> {
        let events = read_log(&log_path)?;
        let state =
            AssignmentState::replay(&pool, idle_timeout_ms, &events).map_err(ServeError::State)?;
        Ok(Service {
            pool,
            training,
            state,
            events,
            writer: LogWriter::open(log_path)?,
        })
    }

    pub fn events(&self) -> &[LogEvent] {
        &self.events
    }

    fn record(&mut self, ev: LogEvent) -> Result<(), ServeError> {
        self.writer.append(&ev)?;
        self.state
            .apply(&self.pool, &ev)
            .map_err(ServeError::State)?;
        self.events.push(ev);
        Ok(())
    }

    pub fn next_assignment(
        &mut self,
        rater_id: &str,
        now_ms: u64,
    ) -> Result<Option<AssignmentView>, ServeError> {
        let Some((ev, view)) = self.state.plan_assignment(&self.pool, rater_id, now_ms) else {
            return Ok(None);
        };
        if let Some(ev) = ev {
            self.record(ev)?;
        }
        Ok(Some(view))
    }

    pub fn submit(
        &mut self,
        rater_id: &str,
        instance_id: &str,
        chosen_index: usize,
        permutation_token: &str,
        now_ms: u64,
    ) -> Result<Result<(), SubmitError>, ServeError> {
        match self.state.plan_response(
            &self.pool,
            rater_id,
            instance_id,
            chosen_index,
            permutation_token,
            now_ms,
        ) {
            Ok(ev) => {
                self.record(ev)?;
                Ok(Ok(()))
            }
            Err(e) => Ok(Err(e)),
        }
    }

    pub fn report(&self) -> AggregateReport {
        aggregate(&self.events)
    }
}

//! Pipeline configuration: one TOML file with sections, overridable from the
//! environment (`FIDQA__SECTION__KEY=value`) and from `key=value` pairs.
//!
//! Precedence, lowest first: defaults, file, environment, explicit pairs.
//! Relative paths are resolved against the directory holding the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decode::BeamConfig;
use crate::fid::{ModelConfig, OptimizerConfig, Schedule};
use crate::index::HnswParams;
use crate::metrics::MetricsConfig;
use crate::{Error, Result};

pub const ENV_PREFIX: &str = "FIDQA__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct PipelineConfig {
    /// Root seed; model init, HNSW levels and data shuffling derive from it.
    pub seed: u64,
    pub paths: Paths,
    pub retrieval: RetrievalConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub decoding: DecodingConfig,
    pub metrics: MetricsConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Passage file (JSON lines).
    pub corpus: PathBuf,
    /// Annotated questions used for training.
    pub train: PathBuf,
    /// Questions to retrieve for, answer and evaluate.
    pub qa: PathBuf,
    /// Precomputed passage embeddings; required by the `file` provider.
    pub embeddings: Option<PathBuf>,
    /// Precomputed query embeddings keyed by question id.
    pub query_embeddings: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Directory for every generated artifact.
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "data/passages.jsonl".into(),
            train: "data/train.jsonl".into(),
            qa: "data/test.jsonl".into(),
            embeddings: None,
            query_embeddings: None,
            index: None,
            checkpoint: None,
            output: "out".into(),
        }
    }
}

impl Paths {
    pub fn store(&self) -> PathBuf {
        self.output.join("corpus.bin")
    }

    /// Passage embeddings: the supplied file, or the one `build-index` writes.
    pub fn passage_embeddings(&self) -> PathBuf {
        self.embeddings
            .clone()
            .unwrap_or_else(|| self.output.join("embeddings.bin"))
    }

    pub fn index(&self) -> PathBuf {
        self.index
            .clone()
            .unwrap_or_else(|| self.output.join("index.bin"))
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.output.join("model.ckpt"))
    }

    pub fn retrieval(&self) -> PathBuf {
        self.output.join("retrieval.jsonl")
    }

    pub fn train_retrieval(&self) -> PathBuf {
        self.output.join("train_retrieval.jsonl")
    }

    pub fn losses(&self) -> PathBuf {
        self.output.join("losses.tsv")
    }

    pub fn predictions(&self) -> PathBuf {
        self.output.join("predictions.jsonl")
    }

    pub fn report(&self) -> PathBuf {
        self.output.join("report.json")
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.train);
        fix(&mut self.qa);
        fix(&mut self.output);
        for p in [
            &mut self.embeddings,
            &mut self.query_embeddings,
            &mut self.index,
            &mut self.checkpoint,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provider {
    /// Built-in hashed bag-of-words encoder.
    Hashed,
    /// Vectors read from `paths.embeddings` / `paths.query_embeddings`.
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Flat,
    Hnsw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub k: usize,
    pub provider: Provider,
    pub hash_dim: usize,
    pub backend: Backend,
    pub hnsw: HnswParams,
    /// Report HNSW recall against exact search when the corpus has at most
    /// this many passages.
    pub recall_check_limit: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 100,
            provider: Provider::Hashed,
            hash_dim: 64,
            backend: Backend::Hnsw,
            hnsw: HnswParams::default(),
            recall_check_limit: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    /// Retrieved passages fed to the reader per example; defaults to `retrieval.k`.
    pub passages: Option<usize>,
    /// Extra copies of each training example with every passage title
    /// consistently renamed to another title from the corpus.
    pub title_swaps: usize,
    /// Leading steps (out of `total_steps`) that train on the single
    /// retrieved passage containing the answer. Each phase runs its own
    /// warmup and decay.
    pub answer_passage_steps: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let o = OptimizerConfig::default();
        Self {
            learning_rate: o.learning_rate,
            warmup_steps: o.warmup_steps,
            total_steps: o.total_steps,
            schedule: o.schedule,
            weight_decay: o.weight_decay,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            clip_norm: o.clip_norm,
            batch_size: o.batch_size,
            passages: None,
            title_swaps: 0,
            answer_passage_steps: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Beam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodingConfig {
    pub strategy: Strategy,
    pub beam_size: usize,
    pub max_len: usize,
    pub early_stopping: bool,
    /// Passages read per question; defaults to `retrieval.k`.
    pub passages: Option<usize>,
    /// Number of passage splits answered separately and merged by mean
    /// log-probability. Passages are dealt round-robin.
    pub ensemble_size: usize,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        let b = BeamConfig::default();
        Self {
            strategy: Strategy::Beam,
            beam_size: b.beam_size,
            max_len: b.max_len,
            early_stopping: b.early_stopping,
            passages: None,
            ensemble_size: 1,
        }
    }
}

impl DecodingConfig {
    pub fn beam(&self) -> BeamConfig {
        BeamConfig {
            beam_size: self.beam_size,
            max_len: self.max_len,
            early_stopping: self.early_stopping,
        }
    }
}

/// Sub-seeds, so that changing one consumer never shifts another's stream.
const SHUFFLE_SALT: u64 = 0x5eed_0001;
const SWAP_SALT: u64 = 0x5eed_0002;

impl PipelineConfig {
    /// Loads `path` (or defaults when `None`), then applies environment and
    /// explicit overrides.
    pub fn load(
        path: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        overrides: &[String],
    ) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let mut env: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        env.sort();
        for (k, v) in env {
            let key = k[ENV_PREFIX.len()..].to_lowercase().replace("__", ".");
            set_path(&mut value, &key, &v)?;
        }
        for pair in overrides {
            let (key, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {pair:?} is not key=value")))?;
            set_path(&mut value, key.trim(), v.trim())?;
        }
        let mut cfg: PipelineConfig = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(dir) = path.and_then(Path::parent) {
            cfg.paths.resolve(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.retrieval.k == 0 {
            return bad("retrieval.k must be positive".into());
        }
        if self.retrieval.hash_dim == 0 {
            return bad("retrieval.hash_dim must be positive".into());
        }
        self.retrieval.hnsw.validate()?;
        if self.training.answer_passage_steps > self.training.total_steps {
            return bad("training.answer_passage_steps cannot exceed training.total_steps".into());
        }
        for (name, n) in [
            ("training.passages", self.training.passages),
            ("decoding.passages", self.decoding.passages),
        ] {
            if n == Some(0) {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.training.batch_size == 0 {
            return bad("training.batch_size must be positive".into());
        }
        if self.decoding.beam_size == 0 || self.decoding.ensemble_size == 0 {
            return bad("decoding.beam_size and decoding.ensemble_size must be positive".into());
        }
        if self.decoding.max_len > self.model.max_decode_len {
            return bad(format!(
                "decoding.max_len {} exceeds model.max_decode_len {}",
                self.decoding.max_len, self.model.max_decode_len
            ));
        }
        self.model
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            ..self.model.clone()
        }
    }

    pub fn hnsw_params(&self) -> HnswParams {
        HnswParams {
            seed: self.seed,
            ..self.retrieval.hnsw
        }
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        let t = &self.training;
        OptimizerConfig {
            learning_rate: t.learning_rate,
            warmup_steps: t.warmup_steps,
            total_steps: t.total_steps,
            schedule: t.schedule,
            weight_decay: t.weight_decay,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            clip_norm: t.clip_norm,
            batch_size: t.batch_size,
            seed: self.seed ^ SHUFFLE_SALT,
        }
    }

    pub fn title_swap_seed(&self) -> u64 {
        self.seed ^ SWAP_SALT
    }

    pub fn train_passages(&self) -> usize {
        self.training.passages.unwrap_or(self.retrieval.k)
    }

    pub fn answer_passages(&self) -> usize {
        self.decoding.passages.unwrap_or(self.retrieval.k)
    }
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_path(root: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad key {key:?}")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key:?}: {part} is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env() -> Vec<(String, String)> {
        Vec::new()
    }

    #[test]
    fn defaults_follow_reference_setup() {
        let c = PipelineConfig::default();
        assert_eq!(c.retrieval.k, 100);
        assert_eq!(c.training.learning_rate, 1e-4);
        assert_eq!(c.training.warmup_steps, 2000);
        assert_eq!(c.training.total_steps, 20_000);
        assert_eq!(c.training.schedule, Schedule::Linear);
        assert_eq!(c.model.max_input_len, 300);
        assert_eq!(c.model.max_decode_len, 20);
        assert_eq!(c.decoding.beam_size, 3);
        assert_eq!(c.decoding.max_len, 20);
        assert!(c.decoding.early_stopping);
        c.validate().unwrap();
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = PipelineConfig::default();
        c.paths.index = Some("x/index.bin".into());
        c.retrieval.backend = Backend::Flat;
        let back = PipelineConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::from_toml("[retrieval]\nkk = 3\n").is_err());
        assert!(PipelineConfig::from_toml("colour = 1\n").is_err());
        assert!(PipelineConfig::from_toml("[model]\nhidden = 10\nheads = 3\n").is_err());
    }

    #[test]
    fn precedence_and_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(
            &path,
            "seed = 4\n[retrieval]\nk = 7\nhash_dim = 32\n[paths]\noutput = \"run\"\n",
        )
        .unwrap();
        let env = vec![
            ("FIDQA__RETRIEVAL__K".to_string(), "9".to_string()),
            ("FIDQA__RETRIEVAL__BACKEND".to_string(), "flat".to_string()),
            ("OTHER".to_string(), "1".to_string()),
        ];
        let c = PipelineConfig::load(
            Some(&path),
            env,
            &["retrieval.k=11".into(), "decoding.strategy=greedy".into()],
        )
        .unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.retrieval.k, 11);
        assert_eq!(c.retrieval.hash_dim, 32);
        assert_eq!(c.retrieval.backend, Backend::Flat);
        assert_eq!(c.decoding.strategy, Strategy::Greedy);
        assert_eq!(c.paths.output, dir.path().join("run"));
        assert_eq!(c.paths.report(), dir.path().join("run/report.json"));
        assert_eq!(c.hnsw_params().seed, 4);
        assert_eq!(c.model_config().seed, 4);
    }

    #[test]
    fn bad_overrides() {
        assert!(PipelineConfig::load(None, no_env(), &["retrieval.k".into()]).is_err());
        assert!(PipelineConfig::load(None, no_env(), &["retrieval.k=zero".into()]).is_err());
        assert!(PipelineConfig::load(None, no_env(), &["seed.x=1".into()]).is_err());
        assert!(PipelineConfig::load(None, no_env(), &["decoding.max_len=40".into()]).is_err());
        let err = PipelineConfig::load(Some(Path::new("/nonexistent/c.toml")), no_env(), &[])
            .unwrap_err();
        assert!(err.to_string().contains("/nonexistent/c.toml"));
    }

    #[test]
    fn value_parsing() {
        assert_eq!(parse_value("3"), toml::Value::Integer(3));
        assert_eq!(parse_value("1e-3"), toml::Value::Float(1e-3));
        assert_eq!(parse_value("true"), toml::Value::Boolean(true));
        assert_eq!(parse_value("hnsw"), toml::Value::String("hnsw".into()));
        assert_eq!(parse_value("\"a b\""), toml::Value::String("a b".into()));
        assert_eq!(parse_value("[1, 5]").as_array().unwrap().len(), 2);
    }
}

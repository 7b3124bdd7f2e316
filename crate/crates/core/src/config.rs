//! The experiment configuration file: one hierarchical TOML document with
//! flat `--set key.path=value` overrides. A run is fully determined by
//! (config, seed); the effective config is serialized into the run directory
//! and hashed into the manifest.

use std::path::{Path, PathBuf};

use crate::data::{DatasetSpec, EvalStream, Role};
use crate::error::{Error, Result};
use crate::eval::EvalProtocol;
use crate::lstm::{LstmSource, SampleConfig};
use crate::model::{self, Transformer, TransformerConfig};
use crate::rng::StreamRng;
use crate::sources::{
    AutomatonSource, AutomatonSpec, CorpusSource, DataSource, PointwiseSource, TransformerSource,
    TransformerSourceConfig, UtmBounds, UtmSource,
};
use crate::train::TrainConfig;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RunBlock {
    pub name: String,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunBlock {
    fn default() -> Self {
        RunBlock {
            name: "run".into(),
            seed: 1,
            out_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Lstm,
    Pointwise,
    Ndfa,
    Transformer,
    Utm,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SourceBlock {
    pub kind: SourceKind,
    #[serde(flatten)]
    pub sample: SampleConfig,
    /// Dirichlet concentration for the pointwise source.
    pub alpha: f64,
    pub automaton: AutomatonSpec,
    pub transformer_width: usize,
    pub transformer_depth: usize,
    /// Resource-bound scale factor for the tape-machine source.
    pub utm_scale: usize,
}

impl Default for SourceBlock {
    fn default() -> Self {
        SourceBlock {
            kind: SourceKind::Lstm,
            sample: SampleConfig::default(),
            alpha: 0.5,
            automaton: AutomatonSpec::default(),
            transformer_width: 16,
            transformer_depth: 2,
            utm_scale: 10,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelBlock {
    pub width: usize,
    /// Explicit depth; the width-scaling rule applies when absent.
    pub depth: Option<usize>,
    pub context: usize,
    pub dropout: f32,
    pub progressive_group: usize,
    pub plain_blocks: usize,
    pub unfreeze_interval: u64,
    pub attn_scale: model::AttnScale,
    pub mup: bool,
}

impl Default for ModelBlock {
    fn default() -> Self {
        ModelBlock {
            width: 64,
            depth: Some(2),
            context: 512,
            dropout: 0.1,
            progressive_group: 8,
            plain_blocks: 8,
            unfreeze_interval: 10_000,
            attn_scale: model::AttnScale::HeadDim,
            mup: false,
        }
    }
}

impl ModelBlock {
    pub fn to_transformer_config(&self) -> Result<TransformerConfig> {
        let mut cfg = model::build_config(self.width, self.depth)?;
        cfg.context = self.context;
        cfg.dropout = self.dropout;
        cfg.progressive_group = self.progressive_group;
        cfg.plain_blocks = self.plain_blocks;
        cfg.unfreeze_interval = self.unfreeze_interval;
        cfg.attn_scale = self.attn_scale;
        cfg.mup = self.mup;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EvalBlock {
    pub slice_count: usize,
    pub ctx: usize,
    pub batch: usize,
}

impl Default for EvalBlock {
    fn default() -> Self {
        let p = EvalProtocol::default();
        EvalBlock {
            slice_count: p.slice_count,
            ctx: p.ctx,
            batch: p.batch,
        }
    }
}

impl EvalBlock {
    pub fn protocol(&self) -> EvalProtocol {
        EvalProtocol {
            slice_count: self.slice_count,
            ctx: self.ctx,
            batch: self.batch,
        }
    }
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct DatasetEntry {
    /// Built-in dataset name, or
    pub name: Option<String>,
    /// a corpus file.
    pub path: Option<PathBuf>,
    pub max_bytes: Option<usize>,
    pub role: Option<Role>,
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub run: RunBlock,
    pub source: SourceBlock,
    pub model: ModelBlock,
    pub train: TrainConfig,
    pub eval: EvalBlock,
    pub datasets: Vec<DatasetEntry>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::parse_with_overrides(text, &[])
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::parse(&text)
    }

    /// Parse with flat `key.path=value` overrides applied before validation.
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::InvalidConfig(format!("config parse: {e}")))?;
        let mut value = toml::Value::Table(table);
        for pair in overrides {
            apply_override(&mut value, pair)?;
        }
        let cfg: ExperimentConfig = value
            .try_into()
            .map_err(|e| Error::InvalidConfig(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.name.is_empty() || self.run.name.contains(['/', '\\']) {
            return Err(Error::InvalidConfig("run.name must be a plain directory name".into()));
        }
        self.source.sample.validate()?;
        self.model.to_transformer_config()?;
        self.train.validate()?;
        if self.eval.slice_count == 0 || self.eval.ctx < 2 || self.eval.batch == 0 {
            return Err(Error::InvalidConfig(
                "eval.slice_count / eval.ctx / eval.batch must be positive (ctx >= 2)".into(),
            ));
        }
        if self.eval.ctx - 1 > self.model.context {
            return Err(Error::InvalidConfig(format!(
                "eval.ctx {} needs model.context >= {}",
                self.eval.ctx,
                self.eval.ctx - 1
            )));
        }
        for (i, d) in self.datasets.iter().enumerate() {
            match (&d.name, &d.path) {
                (Some(_), Some(_)) | (None, None) => {
                    return Err(Error::InvalidConfig(format!(
                        "datasets[{i}] must set exactly one of name or path"
                    )))
                }
                (Some(name), None) => {
                    DatasetSpec::builtin(name)?;
                }
                (None, Some(_)) => {}
            }
        }
        if matches!(self.source.kind, SourceKind::Utm) && self.source.utm_scale == 0 {
            return Err(Error::InvalidConfig("source.utm_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(format!("serialize: {e}")))
    }

    /// The evaluation dataset suite. Defaults to all eight built-ins when
    /// the config lists none.
    pub fn dataset_specs(&self) -> Result<Vec<DatasetSpec>> {
        if self.datasets.is_empty() {
            return DatasetSpec::builtin_names()
                .iter()
                .map(|n| DatasetSpec::builtin(n))
                .collect();
        }
        self.datasets
            .iter()
            .map(|d| match (&d.name, &d.path) {
                (Some(name), None) => {
                    let mut spec = DatasetSpec::builtin(name)?;
                    if let Some(role) = d.role {
                        spec.role = role;
                    }
                    Ok(spec)
                }
                (None, Some(path)) => {
                    let mut spec = DatasetSpec::from_file(path, d.max_bytes);
                    if let Some(role) = d.role {
                        spec.role = role;
                    }
                    Ok(spec)
                }
                _ => Err(Error::InvalidConfig("dataset entry must set name xor path".into())),
            })
            .collect()
    }

    /// Build the evaluation streams, deterministically seeded per dataset.
    pub fn build_eval_streams(&self, root: &StreamRng) -> Result<Vec<(EvalStream, Role)>> {
        self.dataset_specs()?
            .into_iter()
            .map(|spec| {
                let mut rng = root.stream("dataset").stream(&spec.name);
                let stream = crate::data::build_stream(&spec, &mut rng, crate::data::MIN_STREAM_LEN)?;
                Ok((stream, spec.role))
            })
            .collect()
    }

    /// Build the configured training source.
    pub fn build_source(&self, root: &StreamRng) -> Result<Box<dyn DataSource>> {
        let ctx = self.source.sample.context_len;
        Ok(match self.source.kind {
            SourceKind::Lstm => Box::new(LstmSource::new(
                self.source.sample.clone(),
                root,
                self.train.microbatch,
            )?),
            SourceKind::Pointwise => Box::new(PointwiseSource::new(self.source.alpha, ctx, root)?),
            SourceKind::Ndfa => Box::new(AutomatonSource::new(
                self.source.automaton.clone(),
                ctx,
                root,
            )?),
            SourceKind::Transformer => Box::new(TransformerSource::new(
                TransformerSourceConfig {
                    width: self.source.transformer_width,
                    depth: self.source.transformer_depth,
                    sample: self.source.sample.clone(),
                },
                root,
            )?),
            SourceKind::Utm => Box::new(UtmSource::new(
                UtmBounds::scaled(self.source.utm_scale),
                ctx,
                root,
            )?),
        })
    }

    /// Build a finetuning source over a corpus stream.
    pub fn build_corpus_source(
        &self,
        stream: &EvalStream,
        root: &StreamRng,
    ) -> Result<CorpusSource> {
        CorpusSource::new(stream, self.source.sample.context_len, root)
    }

    pub fn init_model(&self) -> Result<Transformer> {
        let cfg = self.model.to_transformer_config()?;
        Transformer::init(cfg, &StreamRng::new(self.run.seed))
    }
}

/// Apply one `key.path=value` override to a parsed TOML tree. The value is
/// parsed as TOML (so strings need quotes only when ambiguous).
fn apply_override(root: &mut toml::Value, pair: &str) -> Result<()> {
    let (path, raw) = pair
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override '{pair}' is not key=value")))?;
    let parsed: toml::Value = match raw.parse::<toml::Value>() {
        Ok(v) => v,
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node.as_table_mut().ok_or_else(|| {
            Error::InvalidConfig(format!("override '{path}': '{}' is not a table", parts[..i].join(".")))
        })?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Ok(())
}

/// 64-bit FNV-1a of the effective config text; recorded in the manifest.
pub fn config_hash(text: &str) -> String {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in text.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

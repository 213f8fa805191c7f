//! Line-oriented `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional; see
//! [`RunConfig::template`] for the full list with defaults. `preset` picks the
//! base architecture (`default`, `tiny` or `full`) before the other keys are
//! applied, so its position in the file does not matter.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{FpanError, Result};
use crate::imaging::{DegradationKind, DegradationSpec};
use crate::model::{AblationPreset, ModelConfig};
use crate::training::TrainConfig;

pub const KEYS: &[&str] = &[
    "preset",
    "scale",
    "blocks",
    "stage_depth",
    "channels",
    "pyramid_scales",
    "reduction",
    "ablation",
    "degradation",
    "seed",
    "epochs",
    "steps_per_epoch",
    "batch",
    "patch",
    "lr0",
    "halve_every",
    "augment",
    "data_dir",
    "lr_dir",
    "out_dir",
];

/// Number of epochs when the file does not say.
pub const DEFAULT_EPOCHS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Default,
    Tiny,
    Full,
}

impl FromStr for Preset {
    type Err = FpanError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "default" => Ok(Preset::Default),
            "tiny" => Ok(Preset::Tiny),
            "full" => Ok(Preset::Full),
            other => Err(FpanError::config(format!("unknown preset '{other}' (expected default, tiny or full)"))),
        }
    }
}

impl Preset {
    pub fn model(self, scale: usize) -> Result<ModelConfig> {
        match self {
            Preset::Default => Ok(ModelConfig {
                scale,
                ..ModelConfig::default()
            }),
            Preset::Tiny => Ok(ModelConfig::tiny(scale)),
            Preset::Full => ModelConfig::full(scale),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Directory of HR training PNGs.
    pub data_dir: Option<PathBuf>,
    /// Optional directory of matching pre-degraded LR PNGs.
    pub lr_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_entries(&HashMap::new()).expect("defaults are valid")
    }
}

struct Entry {
    line: usize,
    value: String,
    source: PathBuf,
}

fn line_error(e: &Entry, message: impl Into<String>) -> FpanError {
    FpanError::ConfigLine {
        path: e.source.clone(),
        line: e.line,
        message: message.into(),
    }
}

fn parse_value<V: FromStr>(e: &Entry, key: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    e.value
        .parse()
        .map_err(|err| line_error(e, format!("{key}: cannot parse '{}': {err}", e.value)))
}

fn parse_bool(e: &Entry, key: &str) -> Result<bool> {
    match e.value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(line_error(e, format!("{key}: expected true or false, got '{}'", e.value))),
    }
}

fn parse_scales(e: &Entry) -> Result<Vec<usize>> {
    e.value
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| line_error(e, format!("pyramid_scales: '{s}' is not an integer")))
        })
        .collect()
}

fn collect_lines(text: &str, source: &Path, into: &mut HashMap<String, Entry>) -> Result<()> {
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let err = |message: String| FpanError::ConfigLine {
            path: source.to_path_buf(),
            line,
            message,
        };
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| err(format!("expected 'key = value', got '{content}'")))?;
        let key = key.trim();
        if !KEYS.contains(&key) {
            return Err(err(format!("unknown key '{key}'")));
        }
        let entry = Entry {
            line,
            value: value.trim().to_string(),
            source: source.to_path_buf(),
        };
        if into.insert(key.to_string(), entry).is_some() && source != Path::new(OVERRIDE_SOURCE) {
            return Err(err(format!("duplicate key '{key}'")));
        }
    }
    Ok(())
}

/// Pseudo-path used in errors raised by command-line overrides.
pub const OVERRIDE_SOURCE: &str = "<override>";

impl RunConfig {
    /// Parse file contents. `source` only labels error messages.
    pub fn parse(text: &str, source: impl AsRef<Path>) -> Result<Self> {
        Self::parse_with_overrides(text, source, &[])
    }

    /// Parse file contents, then apply `key=value` overrides in order. An
    /// override replaces the file's value for the same key.
    pub fn parse_with_overrides(text: &str, source: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let mut entries = HashMap::new();
        collect_lines(text, source.as_ref(), &mut entries)?;
        collect_lines(&overrides.join("\n"), Path::new(OVERRIDE_SOURCE), &mut entries)?;
        Self::from_entries(&entries)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| FpanError::io(path, e))?;
        Self::parse_with_overrides(&text, path, overrides)
    }

    fn from_entries(entries: &HashMap<String, Entry>) -> Result<Self> {
        let get = |k: &str| entries.get(k);
        let scale = match get("scale") {
            Some(e) => parse_value(e, "scale")?,
            None => ModelConfig::default().scale,
        };
        let preset = match get("preset") {
            Some(e) => e.value.parse::<Preset>().map_err(|err| line_error(e, err.to_string()))?,
            None => Preset::Default,
        };
        let mut model = preset.model(scale).map_err(|err| match get("preset").or(get("scale")) {
            Some(e) => line_error(e, err.to_string()),
            None => err,
        })?;
        if let Some(e) = get("blocks") {
            model.num_blocks = parse_value(e, "blocks")?;
        }
        if let Some(e) = get("stage_depth") {
            model.stage_depth = parse_value(e, "stage_depth")?;
        }
        if let Some(e) = get("channels") {
            model.channels = parse_value(e, "channels")?;
        }
        if let Some(e) = get("pyramid_scales") {
            model.pyramid_scales = parse_scales(e)?;
        }
        if let Some(e) = get("reduction") {
            model.reduction = parse_value(e, "reduction")?;
        }
        if let Some(e) = get("ablation") {
            let p: AblationPreset = e.value.parse().map_err(|err: FpanError| line_error(e, err.to_string()))?;
            model.ablation = p.ablation();
        }
        model.validate()?;

        let mut train = TrainConfig::new(scale);
        train.epochs = DEFAULT_EPOCHS;
        if let Some(e) = get("seed") {
            train.seed = parse_value(e, "seed")?;
        }
        if let Some(e) = get("epochs") {
            train.epochs = parse_value(e, "epochs")?;
        }
        if let Some(e) = get("steps_per_epoch") {
            train.steps_per_epoch = Some(parse_value(e, "steps_per_epoch")?);
        }
        if let Some(e) = get("batch") {
            train.batch_size = parse_value(e, "batch")?;
        }
        if let Some(e) = get("patch") {
            train.patch = parse_value(e, "patch")?;
        }
        if let Some(e) = get("lr0") {
            train.lr0 = parse_value(e, "lr0")?;
        }
        if let Some(e) = get("halve_every") {
            train.halve_every = parse_value(e, "halve_every")?;
        }
        if let Some(e) = get("augment") {
            train.augment = parse_bool(e, "augment")?;
        }
        let kind = match get("degradation") {
            Some(e) => e.value.parse::<DegradationKind>().map_err(|err| line_error(e, err.to_string()))?,
            None => DegradationKind::Bi,
        };
        train.degradation = DegradationSpec {
            kind,
            scale,
            seed: train.seed,
        };
        train.validate()?;

        let path = |k: &str| get(k).map(|e| PathBuf::from(&e.value));
        Ok(RunConfig {
            model,
            train,
            data_dir: path("data_dir"),
            lr_dir: path("lr_dir"),
            out_dir: path("out_dir").unwrap_or_else(|| PathBuf::from("runs")),
        })
    }

    /// The configuration as a complete `key = value` file.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let scales: Vec<String> = m.pyramid_scales.iter().map(|s| s.to_string()).collect();
        let ablation = AblationPreset::of(m.ablation).expect("configs are built from presets");
        let mut out = String::new();
        let mut kv = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        kv("scale", m.scale.to_string());
        kv("blocks", m.num_blocks.to_string());
        kv("stage_depth", m.stage_depth.to_string());
        kv("channels", m.channels.to_string());
        kv("pyramid_scales", scales.join(","));
        kv("reduction", m.reduction.to_string());
        kv("ablation", ablation.to_string());
        kv("degradation", t.degradation.kind.to_string());
        kv("seed", t.seed.to_string());
        kv("epochs", t.epochs.to_string());
        if let Some(n) = t.steps_per_epoch {
            kv("steps_per_epoch", n.to_string());
        }
        kv("batch", t.batch_size.to_string());
        kv("patch", t.patch.to_string());
        kv("lr0", t.lr0.to_string());
        kv("halve_every", t.halve_every.to_string());
        kv("augment", t.augment.to_string());
        if let Some(d) = &self.data_dir {
            kv("data_dir", d.display().to_string());
        }
        if let Some(d) = &self.lr_dir {
            kv("lr_dir", d.display().to_string());
        }
        kv("out_dir", self.out_dir.display().to_string());
        out
    }

    /// Commented default configuration, as written by `fpan init`.
    pub fn template() -> String {
        let mut out = String::from(
            "# FPAN run configuration. Remove a line to fall back to its default.\n\
             # preset = default | tiny | full (full picks the block count for ~11.7M parameters)\n\
             # pyramid_scales: subset of 1,2,4; ablation: P0..P4; degradation: BI | BD | DN (BD/DN need scale 3)\n\
             # data_dir = path/to/hr_pngs\n\
             # lr_dir = path/to/lr_pngs\n",
        );
        out.push_str(&RunConfig::default().to_text());
        out
    }
}

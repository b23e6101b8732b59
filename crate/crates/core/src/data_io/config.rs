use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::TrainConfig;
use crate::error::{Error, Result};
use crate::netgraph::NetConfig;
use crate::sampler::SamplerConfig;

/// Where training images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// `"synth"` or a directory of PNG files.
    pub source: String,
    pub resolution: usize,
    pub channels: usize,
    /// Number of synthetic images; ignored for directories.
    pub count: usize,
    /// 0 trains an unconditional model.
    pub num_classes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: "synth".into(),
            resolution: 32,
            channels: 3,
            count: 4096,
            num_classes: 0,
        }
    }
}

/// Fully resolved run configuration, one table per section.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
}

/// Interprets an override as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// Parses config text, applies `section.key=value` overrides, then validates.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::ConfigParse(e.to_string()))?;
        for (key, raw) in overrides {
            let (section, field) = key
                .split_once('.')
                .ok_or_else(|| Error::config(key, "override keys take the form section.key"))?;
            let entry = table
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let sub = entry
                .as_table_mut()
                .ok_or_else(|| Error::config(section, "expected a table"))?;
            sub.insert(field.to_string(), parse_value(raw));
        }
        let given = |key: &str| {
            table
                .get("net")
                .and_then(|n| n.as_table())
                .is_some_and(|n| n.contains_key(key))
        };
        let (has_in, has_out, has_classes, has_min) = (
            given("in_channels"),
            given("out_channels"),
            given("num_classes"),
            given("min_resolution"),
        );
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::ConfigParse(e.to_string()))?;
        // network fields left unset follow the data section
        if !has_in {
            cfg.net.in_channels = cfg.data.channels + 2;
        }
        if !has_out {
            cfg.net.out_channels = cfg.net.in_channels;
        }
        if !has_classes {
            cfg.net.num_classes = (cfg.data.num_classes > 0).then_some(cfg.data.num_classes);
        }
        if !has_min {
            cfg.net.min_resolution = cfg.data.resolution / 4;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.sampler.validate()?;
        self.net.validate()?;
        let d = &self.data;
        if d.resolution < 4 || !d.resolution.is_multiple_of(4) {
            return Err(Error::config(
                "resolution",
                format!("{} is not a positive multiple of 4", d.resolution),
            ));
        }
        if d.channels != 1 && d.channels != 3 {
            return Err(Error::config("channels", format!("{} (use 1 or 3)", d.channels)));
        }
        if self.net.image_channels() != d.channels {
            return Err(Error::config(
                "in_channels",
                format!(
                    "network expects {} image channels, data has {}",
                    self.net.image_channels(),
                    d.channels
                ),
            ));
        }
        let classes = (d.num_classes > 0).then_some(d.num_classes);
        if self.net.num_classes != classes {
            return Err(Error::config(
                "num_classes",
                format!("network has {:?} classes, data has {:?}", self.net.num_classes, classes),
            ));
        }
        let smallest = d.resolution / 4;
        if !smallest.is_multiple_of(self.net.stride()) {
            return Err(Error::config(
                "depth",
                format!(
                    "smallest patch {smallest} is not divisible by the network stride {}",
                    self.net.stride()
                ),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the resolved configuration for later re-parsing.
    pub fn echo(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    /// Short hex digest of the resolved configuration.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .take(6)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn defaults_manifest() -> String {
        RunConfig::default().to_toml()
    }
}

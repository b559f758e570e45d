//! Config file loading and command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use qfl_core::orchestrator::{DataPaths, FedConfig};
use qfl_core::protocol::ChannelMode;

/// Environment variable naming a directory with the four gzipped IDX files.
pub const DATA_DIR_ENV: &str = "QFL_DATA_DIR";

/// Data shipped with the repository.
pub fn packaged_data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/fashion-subset")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ChannelArg {
    Ideal,
    Sampled,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML config file; unset keys take the built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub channel: Option<ChannelArg>,
    /// Measurements per parameter on the sampled channel.
    #[arg(long)]
    pub shots: Option<u32>,
    /// Train the shared layers only.
    #[arg(long)]
    pub no_personalized: bool,
    /// Training samples kept per client.
    #[arg(long)]
    pub sample_cap: Option<usize>,
    /// Size of the shared test subset.
    #[arg(long)]
    pub test_cap: Option<usize>,
    /// Directory with the gzipped IDX files; overrides the config file.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

/// Reads the config file (if any) and resolves where the data lives: an
/// explicit `--data-dir`, then the file's `[data]` table, then the
/// environment variable, then the packaged subset.
pub fn load(o: &Overrides) -> Result<FedConfig> {
    let (mut config, has_data) = match &o.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            let table: toml::Table = toml::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?;
            let has_data = table.contains_key("data");
            let config: FedConfig = table
                .try_into()
                .with_context(|| format!("parsing config {}", path.display()))?;
            (config, has_data)
        }
        None => (FedConfig::default(), false),
    };
    if let Some(dir) = &o.data_dir {
        config.data = DataPaths::in_dir(dir);
    } else if !has_data {
        config.data = match std::env::var_os(DATA_DIR_ENV) {
            Some(dir) => DataPaths::in_dir(dir),
            None => DataPaths::in_dir(packaged_data_dir()),
        };
    }
    if let Some(s) = o.seed {
        config.seed = s;
    }
    if let Some(r) = o.rounds {
        config.rounds = r;
    }
    if let Some(c) = o.channel {
        config.channel.mode = match c {
            ChannelArg::Ideal => ChannelMode::Ideal,
            ChannelArg::Sampled => ChannelMode::Sampled,
        };
    }
    if let Some(s) = o.shots {
        config.channel.shots = s;
    }
    if o.no_personalized {
        config.personalized = false;
    }
    if o.sample_cap.is_some() {
        config.sample_cap = o.sample_cap;
    }
    if o.test_cap.is_some() {
        config.test_cap = o.test_cap;
    }
    Ok(config)
}

pub fn check_data(config: &FedConfig) -> Result<()> {
    for p in config.data.all() {
        if !p.is_file() {
            bail!("dataset file not found: {}", p.display());
        }
    }
    Ok(())
}

/// TOML that [`load`] turns back into exactly `config`.
pub fn echo(config: &FedConfig) -> Result<String> {
    Ok(toml::to_string(config)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut c = FedConfig {
            alpha: 1.0,
            sample_cap: Some(12),
            seed: 99,
            ..FedConfig::default()
        };
        c.channel.mode = ChannelMode::Sampled;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, echo(&c).unwrap()).unwrap();
        let back = load(&Overrides {
            config: Some(path),
            ..Overrides::default()
        })
        .unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(
            &path,
            "rounds = 3\nclients = 4\n[channel]\nmode = \"ideal\"\nshots = 10\nseed = 0\n",
        )
        .unwrap();
        let c = load(&Overrides {
            config: Some(path),
            rounds: Some(7),
            no_personalized: true,
            data_dir: Some("/x".into()),
            ..Overrides::default()
        })
        .unwrap();
        assert_eq!((c.rounds, c.clients, c.personalized), (7, 4, false));
        assert_eq!(c.data, DataPaths::in_dir("/x"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "roundz = 3\n").unwrap();
        assert!(load(&Overrides {
            config: Some(path),
            ..Overrides::default()
        })
        .is_err());
    }
}

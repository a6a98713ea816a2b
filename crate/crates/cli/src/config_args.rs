//! Every training config key as a `--kebab-case` flag.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Arg, ArgMatches, Args, Command, FromArgMatches};
use iimap::training::{TrainRunConfig, TrainingError, ENV_PREFIX, KEYS};

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

/// `--config FILE` plus one override flag per config key.
#[derive(Clone, Debug, Default)]
pub struct ConfigArgs {
    pub file: Option<PathBuf>,
    pub overrides: BTreeMap<String, String>,
}

impl ConfigArgs {
    /// Flag > `IIMAP_<KEY>` environment variable > file > default.
    pub fn resolve(&self) -> Result<TrainRunConfig, TrainingError> {
        let env: BTreeMap<String, String> = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        TrainRunConfig::resolve(self.file.as_deref(), &env, &self.overrides)
    }
}

impl FromArgMatches for ConfigArgs {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        let mut out = ConfigArgs {
            file: m.get_one::<PathBuf>("config").cloned(),
            ..Default::default()
        };
        for key in KEYS {
            if let Some(v) = m.get_one::<String>(key) {
                out.overrides.insert(key.to_string(), v.clone());
            }
        }
        Ok(out)
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl Args for ConfigArgs {
    fn augment_args(cmd: Command) -> Command {
        let cmd = cmd.arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("TOML file of config keys"),
        );
        KEYS.iter().fold(cmd, |cmd, key| {
            cmd.arg(
                Arg::new(*key)
                    .long(flag(key))
                    .value_name("VALUE")
                    .help_heading("Config overrides")
                    .help(format!("Overrides `{key}` (env {ENV_PREFIX}{})", key.to_uppercase())),
            )
        })
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

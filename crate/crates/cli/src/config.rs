use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use dds_core::error::{DdsError, Result};
use dds_core::runtime::RunConfig;
use toml::{Table, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Scaled-down networks and step budgets for one CPU core.
    Desk,
    /// Full reference hyperparameters.
    Reference,
    /// 1-D chain smoke configuration.
    Chain,
}

impl Preset {
    fn config(self) -> RunConfig {
        match self {
            Preset::Desk => RunConfig::desk(),
            Preset::Reference => RunConfig::default(),
            Preset::Chain => RunConfig::chain_smoke(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Select {
    Greedy,
    Sample,
}

/// Options shared by every subcommand.
#[derive(Clone, Debug, Args)]
pub struct Common {
    /// Directory that every input and output path is resolved against.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// TOML file merged over the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub env: Option<String>,
    /// Number of skills K.
    #[arg(long)]
    pub num_skills: Option<usize>,
    /// Skill vector width D_z.
    #[arg(long)]
    pub dim_z: Option<usize>,
    /// Skill horizon H.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Episodes to generate.
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub skill_steps: Option<usize>,
    #[arg(long)]
    pub q_steps: Option<usize>,
    #[arg(long)]
    pub awr_steps: Option<usize>,
    /// Evaluation episodes per seed.
    #[arg(long)]
    pub eval_episodes: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub eval_seeds: Option<Vec<u64>>,
    /// Skill selection at evaluation.
    #[arg(long, value_enum)]
    pub select: Option<Select>,
    /// Any config key, e.g. `--set iql.tau=0.9`; value is parsed as TOML.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

impl Common {
    pub fn path(&self, p: &Path) -> PathBuf {
        self.out_dir.join(p)
    }

    /// Preset, then config file, then `DDS_SEED`, then flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut doc = to_table(&self.preset.config())?;
        let mut user = Table::new();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| config(format!("{}: {e}", path.display())))?;
            let file: Table = text.parse().map_err(|e| config(format!("{}: {e}", path.display())))?;
            merge(&mut user, file);
        }
        if let Ok(s) = std::env::var("DDS_SEED") {
            let seed: u64 = s.trim().parse().map_err(|_| config(format!("DDS_SEED is not an unsigned integer: {s:?}")))?;
            user.insert("seed".into(), Value::Integer(seed as i64));
        }
        for kv in &self.sets {
            let (key, value) = kv.split_once('=').ok_or_else(|| config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            set_path(&mut user, key.trim(), parse_value(value.trim()))?;
        }
        let flags: [(&str, Option<Value>); 12] = [
            ("seed", self.seed.map(|v| Value::Integer(v as i64))),
            ("env", self.env.clone().map(Value::String)),
            ("num_skills", self.num_skills.map(int)),
            ("dim_z", self.dim_z.map(int)),
            ("horizon", self.horizon.map(int)),
            ("data.episodes", self.episodes.map(int)),
            ("skill.train.steps", self.skill_steps.map(int)),
            ("iql.q_steps", self.q_steps.map(int)),
            ("iql.awr_steps", self.awr_steps.map(int)),
            ("eval.episodes", self.eval_episodes.map(int)),
            ("eval.seeds", self.eval_seeds.clone().map(|s| Value::Array(s.into_iter().map(|v| Value::Integer(v as i64)).collect()))),
            (
                "eval.mode",
                self.select.map(|s| Value::String(if s == Select::Greedy { "greedy" } else { "sample" }.into())),
            ),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                set_path(&mut user, key, v)?;
            }
        }
        merge(&mut doc, user.clone());
        let cfg: RunConfig = Value::Table(doc).try_into().map_err(|e| config(format!("invalid configuration: {e}")))?;
        // keys that did not survive the round trip are not config fields
        let back = to_table(&cfg)?;
        if let Some(key) = unknown_key(&user, &back, "") {
            return Err(config(format!("unknown configuration key `{key}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn int(v: usize) -> Value {
    Value::Integer(v as i64)
}

fn config(msg: String) -> DdsError {
    DdsError::Config(msg)
}

pub fn to_table(cfg: &RunConfig) -> Result<Table> {
    match Value::try_from(cfg) {
        Ok(Value::Table(t)) => Ok(t),
        Ok(_) => unreachable!("a struct serializes to a table"),
        Err(e) => Err(config(format!("configuration is not representable as TOML: {e}"))),
    }
}

pub fn to_toml(cfg: &RunConfig) -> Result<String> {
    toml::to_string_pretty(&to_table(cfg)?).map_err(|e| config(e.to_string()))
}

/// Bare words that are not valid TOML are taken as strings.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| config(format!("empty key in {key:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| config(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Recursive merge; tables merge, everything else replaces.
fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn unknown_key(user: &Table, known: &Table, prefix: &str) -> Option<String> {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, known.get(k)) {
            (_, None) => return Some(path),
            (Value::Table(u), Some(Value::Table(kn))) => {
                if let Some(p) = unknown_key(u, kn, &path) {
                    return Some(p);
                }
            }
            _ => {}
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bare_words_become_strings() {
        assert_eq!(parse_value("0.9"), Value::Float(0.9));
        assert_eq!(parse_value("sample"), Value::String("sample".into()));
        assert_eq!(parse_value("[1, 2]"), Value::Array(vec![Value::Integer(1), Value::Integer(2)]));
    }

    #[test]
    fn nested_merge_keeps_siblings() {
        let mut base: Table = "[a]\nx = 1\ny = 2".parse().unwrap();
        merge(&mut base, "[a]\ny = 3".parse().unwrap());
        assert_eq!(base["a"]["x"].as_integer(), Some(1));
        assert_eq!(base["a"]["y"].as_integer(), Some(3));
    }

    #[test]
    fn unknown_keys_are_found_at_depth() {
        let known: Table = "[a]\nx = 1".parse().unwrap();
        assert_eq!(unknown_key(&"[a]\nz = 1".parse().unwrap(), &known, ""), Some("a.z".into()));
        assert_eq!(unknown_key(&"[a]\nx = 5".parse().unwrap(), &known, ""), None);
    }

    #[test]
    fn presets_roundtrip_through_toml() {
        for p in [Preset::Desk, Preset::Reference, Preset::Chain] {
            let cfg = p.config();
            let back: RunConfig = Value::Table(to_table(&cfg).unwrap()).try_into().unwrap();
            assert_eq!(back, cfg);
        }
    }
}

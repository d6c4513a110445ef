//! Flat `key = value` run configuration with layered overrides.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{Context, Result};
use glmask::data::{GenSpec, NoiseSpec};
use glmask::model::ModelConfig;
use glmask::trainer::TrainConfig;
use glmask::Error;

pub const RESOLVED_FILE: &str = "resolved.cfg";
pub const SEED_ENV: &str = "GLMASK_SEED";
const AUTO: &str = "auto";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    seed_given: bool,
}

fn usage(msg: String) -> anyhow::Error {
    Error::Config(vec![msg]).into()
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut values = BTreeMap::new();
        values.insert("seed".to_string(), "1".to_string());
        for (k, v) in ModelConfig::default().to_kv() {
            values.insert(k, v);
        }
        values.insert("model.src_vocab_size".into(), AUTO.into());
        values.insert("model.trg_vocab_size".into(), AUTO.into());
        for (k, v) in TrainConfig::default().to_kv() {
            if k != "train.seed" {
                values.insert(k, v);
            }
        }
        for (k, v) in [
            ("data.n_train", "20000"),
            ("data.n_clean", "500"),
            ("data.n_dev", "300"),
            ("data.n_test", "500"),
            ("data.vocab_size", "500"),
            ("data.min_len", "4"),
            ("data.max_len", "14"),
            ("noise.copied", "0"),
            ("noise.misaligned", "0"),
            ("noise.junk", "0"),
        ] {
            values.insert(k.into(), v.into());
        }
        RunConfig {
            values,
            seed_given: false,
        }
    }
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("{origin}:{}: expected key = value", i + 1)))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        for (k, v) in Self::parse(&text, &path.display().to_string())? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                if key == "seed" {
                    self.seed_given = true;
                }
                Ok(())
            }
            None => Err(usage(format!("unknown config key {key}"))),
        }
    }

    /// Applies a `KEY=VALUE` override as given on the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {pair:?}")))?;
        self.set(k.trim(), v.trim())
    }

    /// Falls back to the environment seed when nothing set one explicitly.
    pub fn apply_seed_env(&mut self, env: Option<&str>) -> Result<()> {
        if let (false, Some(v)) = (self.seed_given, env) {
            v.parse::<u64>()
                .map_err(|_| usage(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?;
            self.set("seed", v)?;
        }
        Ok(())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self
            .values
            .get(key)
            .ok_or_else(|| usage(format!("unknown config key {key}")))?;
        v.parse()
            .map_err(|_| usage(format!("{key}: cannot parse {v:?}")))
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    /// Model shape; `auto` vocabulary sizes take the data's sizes.
    pub fn model(&mut self, src_vocab: usize, trg_vocab: usize) -> Result<ModelConfig> {
        for (key, actual) in [("model.src_vocab_size", src_vocab), ("model.trg_vocab_size", trg_vocab)] {
            if self.values[key] == AUTO {
                self.set(key, &actual.to_string())?;
            } else if self.get::<usize>(key)? != actual {
                return Err(usage(format!("{key} = {} but the data has {actual}", self.values[key])));
            }
        }
        let kv = self.section("model.");
        Ok(ModelConfig::from_kv(&kv)?)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let mut kv = self.section("train.");
        kv.insert("train.seed".into(), self.seed()?.to_string());
        Ok(TrainConfig::from_kv(&kv)?)
    }

    pub fn gen_spec(&self) -> Result<GenSpec> {
        let seed = self.seed()?;
        Ok(GenSpec {
            n_train: self.get("data.n_train")?,
            n_clean: self.get("data.n_clean")?,
            n_dev: self.get("data.n_dev")?,
            n_test: self.get("data.n_test")?,
            vocab_size: self.get("data.vocab_size")?,
            min_len: self.get("data.min_len")?,
            max_len: self.get("data.max_len")?,
            noise: NoiseSpec {
                copied_rate: self.get("noise.copied")?,
                misaligned_rate: self.get("noise.misaligned")?,
                junk_rate: self.get("noise.junk")?,
                seed,
            },
            seed,
        })
    }

    fn section(&self, prefix: &str) -> BTreeMap<String, String> {
        self.values
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED_FILE);
        fs::write(&path, self.render()).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn later_sources_win_and_render_round_trips() {
        let mut c = RunConfig::default();
        for (k, v) in RunConfig::parse("train.total_steps = 50 # short\n\nseed=4\n", "f").unwrap() {
            c.set(&k, &v).unwrap();
        }
        c.set_pair("train.total_steps=70").unwrap();
        assert_eq!(c.train().unwrap().total_steps, 70);
        assert_eq!(c.train().unwrap().seed, 4);

        let mut back = RunConfig::default();
        for (k, v) in RunConfig::parse(&c.render(), "r").unwrap() {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back.render(), c.render());
    }

    #[test]
    fn seed_env_only_fills_a_missing_seed() {
        let mut c = RunConfig::default();
        c.apply_seed_env(Some("9")).unwrap();
        assert_eq!(c.seed().unwrap(), 9);
        let mut c = RunConfig::default();
        c.set("seed", "3").unwrap();
        c.apply_seed_env(Some("9")).unwrap();
        assert_eq!(c.seed().unwrap(), 3);
        assert!(RunConfig::default().apply_seed_env(Some("x")).is_err());
    }

    #[test]
    fn bad_input_is_a_config_error() {
        let mut c = RunConfig::default();
        for err in [
            c.set("nope", "1").unwrap_err(),
            c.set_pair("train.total_steps").unwrap_err(),
            RunConfig::parse("just words", "f").unwrap_err(),
        ] {
            assert!(matches!(err.downcast_ref::<Error>(), Some(Error::Config(_))));
        }
    }

    #[test]
    fn vocab_sizes_resolve_from_data_and_must_agree() {
        let mut c = RunConfig::default();
        let m = c.model(30, 31).unwrap();
        assert_eq!((m.src_vocab_size, m.trg_vocab_size), (30, 31));
        assert!(c.render().contains("model.src_vocab_size = 30"));
        assert!(c.model(30, 32).is_err());
    }
}

//! Run configuration: flat `key = value` text with `--set` overrides.

use std::path::{Path, PathBuf};

use restore_core::model::ModelConfig;
use restore_core::moe::ExpertMode;
use restore_core::train::{run_hash, TrainConfig};
use restore_core::{Error, Result};

/// Component removals, one per ablation row.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    /// (a) no specialized experts: learner output is the expanded agnostic path.
    pub disable_ed: bool,
    /// (b) no agnostic expert: routed specialized path without modulation.
    pub disable_ea: bool,
    /// (c) decoder attention keys come from its own features.
    pub disable_controller: bool,
    /// (d) auxiliary routing loss weight forced to zero.
    pub disable_aux: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: Ablation,
    pub out_dir: PathBuf,
    pub eval_per_task: usize,
    pub eval_seed: u64,
    pub eval_chunk: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            train: TrainConfig::default(),
            ablation: Ablation::default(),
            out_dir: PathBuf::from("run"),
            eval_per_task: 40,
            eval_seed: 1_000_003,
            eval_chunk: 8,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected true or false, got {v:?}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let v = value.trim();
        if self.model.set(key, v)? || self.train.set(key, v)? {
            return Ok(());
        }
        let int = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("{key}: expected an integer, got {v:?}")))
        };
        match key {
            "run.out_dir" => self.out_dir = PathBuf::from(v),
            "ablation.disable_ed" => self.ablation.disable_ed = parse_bool(key, v)?,
            "ablation.disable_ea" => self.ablation.disable_ea = parse_bool(key, v)?,
            "ablation.disable_controller" => self.ablation.disable_controller = parse_bool(key, v)?,
            "ablation.disable_aux" => self.ablation.disable_aux = parse_bool(key, v)?,
            "eval.per_task" => self.eval_per_task = int(v)?,
            "eval.seed" => self.eval_seed = int(v)? as u64,
            "eval.chunk" => self.eval_chunk = int(v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Apply one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k, v)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Defaults, then the file (if any), then overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut c = Self::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            c.apply_text(&text)?;
        }
        for o in overrides {
            c.apply_override(o)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ablation.disable_ed && self.ablation.disable_ea {
            return Err(Error::Config(
                "ablation.disable_ed and ablation.disable_ea together leave no expert".into(),
            ));
        }
        let (m, t) = self.effective();
        m.validate()?;
        t.validate()?;
        if t.tasks.len() > m.n_degradations {
            return Err(Error::Config(format!(
                "train.tasks lists {} tasks but model.n_degradations is {}",
                t.tasks.len(),
                m.n_degradations
            )));
        }
        if self.eval_per_task == 0 || self.eval_chunk == 0 {
            return Err(Error::Config(
                "eval.per_task and eval.chunk must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Model and training configuration with ablations folded in.
    pub fn effective(&self) -> (ModelConfig, TrainConfig) {
        let mut m = self.model.clone();
        let mut t = self.train.clone();
        if self.ablation.disable_ed {
            m.experts = ExpertMode::AgnosticOnly;
        }
        if self.ablation.disable_ea {
            m.experts = ExpertMode::SpecializedOnly;
        }
        if self.ablation.disable_controller {
            m.use_controller = false;
        }
        if self.ablation.disable_aux {
            t.lambda_aux = 0.0;
        }
        (m, t)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.model.to_text();
        s.push_str(&self.train.to_text());
        let a = &self.ablation;
        for (k, v) in [
            ("ablation.disable_ed", a.disable_ed),
            ("ablation.disable_ea", a.disable_ea),
            ("ablation.disable_controller", a.disable_controller),
            ("ablation.disable_aux", a.disable_aux),
        ] {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s.push_str(&format!("run.out_dir = {}\n", self.out_dir.display()));
        s.push_str(&format!("eval.per_task = {}\n", self.eval_per_task));
        s.push_str(&format!("eval.seed = {}\n", self.eval_seed));
        s.push_str(&format!("eval.chunk = {}\n", self.eval_chunk));
        s
    }

    /// Digest of the effective model and training configuration, matching
    /// the header of the training report.
    pub fn hash(&self) -> String {
        let (m, t) = self.effective();
        run_hash(&m, &t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip_and_overrides() {
        let mut c = RunConfig::default();
        c.apply_override("train.lambda_aux=0").unwrap();
        c.apply_override("ablation.disable_controller = true")
            .unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let (m, t) = c.effective();
        assert!(!m.use_controller);
        assert_eq!(t.lambda_aux, 0.0);
    }

    #[test]
    fn unknown_key_is_named() {
        let mut c = RunConfig::default();
        let e = c.apply_override("train.lamda=0").unwrap_err().to_string();
        assert!(e.contains("train.lamda"), "{e}");
    }

    #[test]
    fn out_dir_does_not_change_hash() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
    }
}

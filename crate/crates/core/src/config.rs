//! Line-oriented `key=value` run configuration. Blank lines and lines
//! starting with `#` are ignored; later assignments override earlier ones,
//! which is how command-line flags take precedence over a file.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::nca::NcaConfig;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

/// Model and optimisation settings of a training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub model: NcaConfig,
    pub scale_factor: usize,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { model: NcaConfig::default(), scale_factor: 4, train: TrainConfig::default() }
    }
}

pub const KEYS: &[&str] = &[
    "n",
    "h",
    "img_channels",
    "fire_rate",
    "steps",
    "scale_factor",
    "lr",
    "lr_decay",
    "epochs",
    "batch_size",
    "seed",
    "patience",
    "clip_norm",
    "max_wall_secs",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("bad value for {key}: {value:?}")))
}

/// `none` or a number.
fn parse_opt(key: &str, value: &str) -> Result<Option<f64>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "n" => self.model.n = parse(key, value)?,
            "h" => self.model.h = parse(key, value)?,
            "img_channels" => self.model.img_channels = parse(key, value)?,
            "fire_rate" => self.model.fire_rate = parse(key, value)?,
            "steps" => self.model.steps = parse(key, value)?,
            "scale_factor" => self.scale_factor = parse(key, value)?,
            "lr" => self.train.lr = parse(key, value)?,
            "lr_decay" => self.train.lr_decay = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "seed" => self.train.seed = parse(key, value)?,
            "patience" => self.train.patience = parse(key, value)?,
            "clip_norm" => self.train.clip_norm = parse_opt(key, value)?,
            "max_wall_secs" => self.train.max_wall_secs = parse_opt(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Apply a single `key=value` assignment.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {assignment:?}")))?;
        self.set(k, v)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.set_assignment(line).map_err(|e| Error::Config(format!("line {}: {e}", ln + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.scale_factor < 2 {
            return Err(Error::Config("scale_factor must be at least 2".into()));
        }
        Ok(())
    }

    /// Every key with its current value, in a form `apply_text` accepts.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| x.to_string());
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        for (k, v) in [
            ("n", m.n.to_string()),
            ("h", m.h.to_string()),
            ("img_channels", m.img_channels.to_string()),
            ("fire_rate", m.fire_rate.to_string()),
            ("steps", m.steps.to_string()),
            ("scale_factor", self.scale_factor.to_string()),
            ("lr", t.lr.to_string()),
            ("lr_decay", t.lr_decay.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("seed", t.seed.to_string()),
            ("patience", t.patience.to_string()),
            ("clip_norm", opt(t.clip_norm)),
            ("max_wall_secs", opt(t.max_wall_secs)),
        ] {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn later_assignments_win() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\n\nepochs = 10\nlr=0.01\nclip_norm=none\n").unwrap();
        c.set_assignment("epochs=3").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.train.clip_norm, None);
    }

    #[test]
    fn text_round_trip_covers_every_key() {
        let mut c = RunConfig::default();
        c.apply_text("n=16\nsteps=8\nmax_wall_secs=60\nseed=4").unwrap();
        let text = c.to_text();
        let mut back = RunConfig::default();
        back.apply_text(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(text.lines().count(), KEYS.len());
        for k in KEYS {
            assert!(text.contains(&format!("{k}=")));
        }
    }

    #[test]
    fn errors_name_the_line() {
        let mut c = RunConfig::default();
        let e = c.apply_text("epochs=1\nbogus=2").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("bogus"), "{e}");
        assert!(c.apply_text("epochs").is_err());
        assert!(c.apply_text("lr=fast").is_err());
    }
}

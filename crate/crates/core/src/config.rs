//! Flat `key = value` run configuration with unknown-key rejection.
//!
//! The file format, shared by every CLI command:
//!
//! - one `key = value` pair per line;
//! - `#` begins a comment line, blank lines are ignored;
//! - keys are lowercase dotted paths (`train.steps`); duplicates are errors;
//! - values are plain text, parsed by whichever command consumes the key.
//!
//! Every run finishes extraction with [`Config::deny_unknown`], so a typo
//! can never silently fall back to a default; the error names the key path.
//! [`Config::digest`] over the resolved pairs names run directories, and
//! [`Config::snapshot`] writes the exact pairs a run resolved to.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::apm::ApmConfig;
use crate::backbones::{EncoderPretrainConfig, PosePretrainConfig, VaePretrainConfig};
use crate::diffusion::ScheduleKind;
use crate::jci::{AblationFlags, UnetConfig};
use crate::pipeline::{Stage, TrainConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct Config {
    pairs: BTreeMap<String, String>,
    consumed: BTreeSet<String>,
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '.')
}

impl Config {
    pub fn empty() -> Self {
        Config::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = format!("line {}", i + 1);
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(&at, format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !valid_key(key) {
                return Err(Error::config(
                    &at,
                    format!("`{key}` is not a lowercase dotted key"),
                ));
            }
            if cfg.pairs.insert(key.into(), value.into()).is_some() {
                return Err(Error::config(key, "duplicate key"));
            }
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Set (or overwrite) a key, as CLI `--set key=value` overrides do.
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !valid_key(key) {
            return Err(Error::config(
                key,
                "not a lowercase dotted key (letters, digits, `_`, `.`)",
            ));
        }
        self.pairs.insert(key.into(), value.into());
        Ok(())
    }

    /// Apply one `key=value` override string.
    pub fn set_override(&mut self, spec: &str) -> Result<()> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::config(spec, "override must look like key=value"))?;
        self.set(key.trim(), value.trim())
    }

    /// Read and mark a key consumed, parsing it with `FromStr`.
    pub fn get<T>(&mut self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.consumed.insert(key.into());
        match self.pairs.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::config(key, format!("cannot parse `{raw}`: {e}"))),
        }
    }

    pub fn get_or<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T>(&mut self, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.get(key)?
            .ok_or_else(|| Error::config(key, "missing required key"))
    }

    pub fn schedule_or(&mut self, key: &str, default: ScheduleKind) -> Result<ScheduleKind> {
        match self.get::<String>(key)? {
            None => Ok(default),
            Some(s) => ScheduleKind::parse(&s).map_err(|e| Error::config(key, e.to_string())),
        }
    }

    pub fn flags_or(&mut self, key: &str, default: AblationFlags) -> Result<AblationFlags> {
        match self.get::<String>(key)? {
            None => Ok(default),
            Some(s) => AblationFlags::parse(&s).map_err(|e| Error::config(key, e.to_string())),
        }
    }

    /// Comma-separated positive integers (`"64,128,256"`).
    pub fn channels_or(&mut self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.get::<String>(key)? {
            None => Ok(default.to_vec()),
            Some(s) => {
                let mut out = Vec::new();
                for piece in s.split(',') {
                    let n: usize = piece.trim().parse().map_err(|_| {
                        Error::config(key, format!("`{piece}` is not a channel count"))
                    })?;
                    if n == 0 {
                        return Err(Error::config(key, "channel counts must be positive"));
                    }
                    out.push(n);
                }
                if out.is_empty() {
                    return Err(Error::config(key, "needs at least one channel count"));
                }
                Ok(out)
            }
        }
    }

    /// Reject any key no consumer asked about.
    pub fn deny_unknown(&self) -> Result<()> {
        for key in self.pairs.keys() {
            if !self.consumed.contains(key) {
                return Err(Error::config(key, "unknown key"));
            }
        }
        Ok(())
    }

    /// Canonical sorted `key = value` text of the resolved pairs.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.pairs {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    /// Hex digest of the resolved pairs (names run directories).
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.resolved_text().as_bytes());
        let d = h.finalize();
        d.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    /// Write the resolved snapshot beside a run's outputs.
    pub fn snapshot(&self, path: &Path) -> Result<()> {
        let body = format!(
            "# resolved configuration (digest {})\n{}",
            self.digest(),
            self.resolved_text()
        );
        std::fs::write(path, body)?;
        Ok(())
    }
}

/// Desk-default stage knobs overridden by `seed` and `train.*` keys
/// (plus `flags` for stage two).
pub fn train_config(cfg: &mut Config, stage: Stage) -> Result<TrainConfig> {
    let mut t = match stage {
        Stage::Apm => TrainConfig::desk_apm(0),
        Stage::Jcdm => TrainConfig::desk_jcdm(0),
    };
    t.seed = cfg.get_or("seed", 7)?;
    t.steps = cfg.get_or("train.steps", t.steps)?;
    t.batch_size = cfg.get_or("train.batch", t.batch_size)?;
    t.lr = cfg.get_or("train.lr", t.lr)?;
    t.schedule = cfg.schedule_or("train.schedule", t.schedule)?;
    t.t_total = cfg.get_or("train.t_total", t.t_total)?;
    t.p_drop = cfg.get_or("train.p_drop", t.p_drop)?;
    t.eval_interval = cfg.get_or("train.eval_interval", t.eval_interval)?;
    if stage == Stage::Jcdm {
        t.flags = cfg.flags_or("flags", t.flags)?;
    }
    t.validate()?;
    Ok(t)
}

/// Appearance-prior architecture from `apm.*` keys. The embedding widths
/// stay pinned to the frozen backbones and are not configurable.
pub fn apm_model_config(cfg: &mut Config) -> Result<ApmConfig> {
    let d = ApmConfig::default();
    Ok(ApmConfig {
        depth: cfg.get_or("apm.depth", d.depth)?,
        width: cfg.get_or("apm.width", d.width)?,
        heads: cfg.get_or("apm.heads", d.heads)?,
        k_max: cfg.get_or("apm.k_max", d.k_max)?,
        d_embed: d.d_embed,
        d_pose: d.d_pose,
    })
}

/// Backbone pretraining knobs from `encoder.*`, `vae.*`, and `pose.*`
/// keys. Feature dimensions stay pinned; only budgets are configurable.
pub fn backbone_pretrain_configs(
    cfg: &mut Config,
    seed: u64,
) -> Result<(EncoderPretrainConfig, VaePretrainConfig, PosePretrainConfig)> {
    let e = EncoderPretrainConfig::default();
    let v = VaePretrainConfig::default();
    let p = PosePretrainConfig::default();
    Ok((
        EncoderPretrainConfig {
            steps: cfg.get_or("encoder.steps", e.steps)?,
            batch_pairs: cfg.get_or("encoder.batch", e.batch_pairs)?,
            lr: cfg.get_or("encoder.lr", e.lr)?,
            temperature: cfg.get_or("encoder.temperature", e.temperature)?,
            eval_interval: cfg.get_or("encoder.eval_interval", e.eval_interval)?,
            seed,
            ..e
        },
        VaePretrainConfig {
            steps: cfg.get_or("vae.steps", v.steps)?,
            batch: cfg.get_or("vae.batch", v.batch)?,
            lr: cfg.get_or("vae.lr", v.lr)?,
            kl_weight: cfg.get_or("vae.kl_weight", v.kl_weight)?,
            eval_interval: cfg.get_or("vae.eval_interval", v.eval_interval)?,
            seed,
        },
        PosePretrainConfig {
            steps: cfg.get_or("pose.steps", p.steps)?,
            batch: cfg.get_or("pose.batch", p.batch)?,
            lr: cfg.get_or("pose.lr", p.lr)?,
            seed,
            ..p
        },
    ))
}

/// Denoiser architecture from `unet.*` keys; the slot count follows the
/// ablation flags (2x2 canvas when joint conditioning is on).
pub fn unet_model_config(cfg: &mut Config, flags: AblationFlags) -> Result<UnetConfig> {
    let d = UnetConfig::default();
    Ok(UnetConfig {
        channels: cfg.channels_or("unet.channels", &d.channels)?,
        res_blocks: cfg.get_or("unet.res_blocks", d.res_blocks)?,
        heads: cfg.get_or("unet.heads", d.heads)?,
        d_embed: d.d_embed,
        d_pose: d.d_pose,
        s_slots: if flags.use_jci { 4 } else { 1 },
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// [TRIVIAL] Comments, blanks, and whitespace parse away; values
    /// round-trip; the canonical text is sorted.
    #[test]
    fn parse_and_resolve() {
        let mut cfg = Config::parse(
            "# run knobs\n\n  train.steps =  40 \nseed=9\nunet.channels = 16,32\n",
        )
        .unwrap();
        assert_eq!(cfg.get_or("train.steps", 0usize).unwrap(), 40);
        assert_eq!(cfg.get_or("seed", 0u64).unwrap(), 9);
        assert_eq!(
            cfg.channels_or("unet.channels", &[]).unwrap(),
            vec![16, 32]
        );
        cfg.deny_unknown().unwrap();
        assert_eq!(
            cfg.resolved_text(),
            "seed = 9\ntrain.steps = 40\nunet.channels = 16,32\n"
        );
    }

    /// [TRIVIAL] Malformed lines, bad keys, duplicates, unparsable values,
    /// and unknown keys all fail with the offending key path.
    #[test]
    fn rejects_malformed_input() {
        for (text, needle) in [
            ("steps 40", "line 1"),
            ("Train.Steps = 4", "line 1"),
            ("a = 1\na = 2", "duplicate"),
        ] {
            let err = Config::parse(text).unwrap_err();
            assert!(err.to_string().contains(needle), "{err}");
        }

        let mut cfg = Config::parse("train.steps = soon").unwrap();
        let err = cfg.get::<usize>("train.steps").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "train.steps"), "{err}");

        let cfg = Config::parse("mystery.knob = 1").unwrap();
        let err = cfg.deny_unknown().unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "mystery.knob"));

        let mut cfg = Config::empty();
        assert!(cfg.set_override("no-equals-here").is_err());
        assert!(cfg.set_override("BAD=1").is_err());
        cfg.set_override("train.lr = 0.5").unwrap();
        assert_eq!(cfg.get_or("train.lr", 0.0f64).unwrap(), 0.5);
    }

    /// [DERIVED] The digest keys on resolved values and survives a
    /// snapshot round trip, so a reloaded snapshot reproduces the run name.
    #[test]
    fn digest_round_trips_through_snapshot() {
        let mut a = Config::empty();
        a.set("seed", "7").unwrap();
        a.set("train.steps", "100").unwrap();
        let mut b = a.clone();
        b.set("train.steps", "101").unwrap();
        assert_ne!(a.digest(), b.digest());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("resolved.cfg");
        a.snapshot(&path).unwrap();
        let reloaded = Config::from_file(&path).unwrap();
        assert_eq!(reloaded.digest(), a.digest());
        assert_eq!(reloaded.resolved_text(), a.resolved_text());
    }

    /// [DERIVED] Stage extraction starts from the desk defaults, honours
    /// overrides, validates ranges, and routes flags to stage two only.
    #[test]
    fn stage_extraction() {
        let mut cfg =
            Config::parse("seed = 3\ntrain.steps = 12\nflags = B2\ntrain.p_drop = 0.2\n").unwrap();
        let t = train_config(&mut cfg, Stage::Jcdm).unwrap();
        cfg.deny_unknown().unwrap();
        assert_eq!(t.seed, 3);
        assert_eq!(t.steps, 12);
        assert_eq!(t.flags, AblationFlags::b2());
        assert_eq!(t.p_drop, 0.2);
        assert_eq!(t.batch_size, TrainConfig::desk_jcdm(0).batch_size);

        let mut bad = Config::parse("train.p_drop = 1.5").unwrap();
        assert!(train_config(&mut bad, Stage::Jcdm).is_err());

        let mut cfg = Config::parse("unet.channels = 24,48\nflags = b0").unwrap();
        let flags = cfg.flags_or("flags", AblationFlags::full()).unwrap();
        let u = unet_model_config(&mut cfg, flags).unwrap();
        assert_eq!(u.channels, vec![24, 48]);
        assert_eq!(u.s_slots, 1);
        assert_eq!(u.flags, AblationFlags::b0());
    }
}

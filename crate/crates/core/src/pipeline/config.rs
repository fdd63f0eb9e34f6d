//! Run configuration as `key = value` text. `#` starts a comment. Every
//! stochastic stage needs an explicit seed key; unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::curation::{CurationConfig, ScaleBand};
use crate::dit::DitConfig;
use crate::dpo::{ConsisConfig, DpoConfig, RealFakeConfig};
use crate::error::{Error, Result};
use crate::eval::{SamplerSettings, DEFAULT_TIE_BAND, SUITE_COUNTS};
use crate::inference::CfgSchedule;
use crate::train::{AdamConfig, PretrainConfig, SftConfig, TimestepSampler};
use crate::curation::PairingMode;
use crate::world::WorldConfig;

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty => $what:literal),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|_| format!("expected {}, got `{s}`", $what))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(usize => "a non-negative integer", f64 => "a number");

impl ConfigValue for Option<u64> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse()
            .map(Some)
            .map_err(|_| format!("expected an unsigned integer seed, got `{s}`"))
    }
    fn render(&self) -> String {
        self.map(|v| v.to_string()).unwrap_or_default()
    }
}

impl ConfigValue for CfgSchedule {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        CfgSchedule::parse_unchecked(s).map_err(|e| e.to_string())
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for [usize; 4] {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v: Vec<usize> = s
            .split(',')
            .map(|x| x.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| format!("expected four comma-separated counts, got `{s}`"))?;
        v.try_into()
            .map_err(|_| format!("expected four comma-separated counts, got `{s}`"))
    }
    fn render(&self) -> String {
        self.map(|c| c.to_string()).join(",")
    }
}

impl ConfigValue for PathBuf {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

macro_rules! run_config {
    ($($key:literal => $field:ident: $t:ty = $default:expr;)*) => {
        /// Every tunable of a pipeline run. Seeds are `None` until set.
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $(pub $field: $t,)*
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            /// Defaults with every seed unset.
            pub fn unseeded() -> Self {
                Self { $($field: $default,)* }
            }

            pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
                match key {
                    $($key => self.$field = ConfigValue::parse_value(value)?,)*
                    _ => return Err(format!("unknown key `{key}`")),
                }
                Ok(())
            }

            /// `(key, value)` for every key, in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, self.$field.render())),*]
            }
        }
    };
}

run_config! {
    "world.frames" => world_frames: usize = 8;
    "world.height" => world_height: usize = 16;
    "world.width" => world_width: usize = 16;

    "data.in_pair" => data_in_pair: usize = 2700;
    "data.cross_pair" => data_cross_pair: usize = 3300;
    "data.top_k" => data_top_k: usize = 15;
    "data.pool_per_identity" => data_pool_per_identity: usize = 16;
    "data.scale_min" => data_scale_min: f64 = 0.3;
    "data.scale_max" => data_scale_max: f64 = 0.6;
    "data.seed" => data_seed: Option<u64> = None;

    "pretrain.iterations" => pretrain_iterations: usize = 3000;
    "pretrain.lr" => pretrain_lr: f64 = 1e-3;
    "pretrain.warmup" => pretrain_warmup: usize = 100;
    "pretrain.batch_size" => pretrain_batch_size: usize = 4;
    "pretrain.text_drop" => pretrain_text_drop: f64 = 0.1;
    "pretrain.seed" => pretrain_seed: Option<u64> = None;

    "sft.rank" => sft_rank: usize = 16;
    "sft.lr" => sft_lr: f64 = 1e-3;
    "sft.warmup" => sft_warmup: usize = 20;
    "sft.batch_size" => sft_batch_size: usize = 4;
    "sft.ema_decay" => sft_ema_decay: f64 = 0.999;
    "sft.sampling_weights" => sft_sampling_weights: PathBuf = PathBuf::new();
    "sft.in.iterations" => sft_in_iterations: usize = 8000;
    "sft.in.ref_drop" => sft_in_ref_drop: f64 = 0.3;
    "sft.in.text_drop" => sft_in_text_drop: f64 = 0.1;
    "sft.in.seed" => sft_in_seed: Option<u64> = None;
    "sft.cross.iterations" => sft_cross_iterations: usize = 5000;
    "sft.cross.ref_drop" => sft_cross_ref_drop: f64 = 0.1;
    "sft.cross.text_drop" => sft_cross_text_drop: f64 = 0.3;
    "sft.cross.seed" => sft_cross_seed: Option<u64> = None;

    "merge.in_pair" => merge_in_pair: f64 = 0.15;
    "merge.consis" => merge_consis: f64 = 0.5;
    "merge.realfake" => merge_realfake: f64 = 0.1;

    "prefs.steps" => prefs_steps: usize = 16;
    "prefs.cfg" => prefs_cfg: CfgSchedule = CfgSchedule::default();
    "prefs.consis.count" => prefs_consis_count: usize = 400;
    "prefs.consis.offset" => prefs_consis_offset: usize = 16;
    "prefs.consis.margin" => prefs_consis_margin: f64 = 0.1;
    "prefs.consis.seed" => prefs_consis_seed: Option<u64> = None;
    "prefs.realfake.count" => prefs_realfake_count: usize = 320;
    "prefs.realfake.keep" => prefs_realfake_keep: f64 = 0.9;
    "prefs.realfake.max_motion_ratio" => prefs_realfake_max_motion_ratio: f64 = 1.0;
    "prefs.realfake.seed" => prefs_realfake_seed: Option<u64> = None;

    "dpo.beta" => dpo_beta: f64 = 500.0;
    "dpo.lr" => dpo_lr: f64 = 5e-4;
    "dpo.warmup" => dpo_warmup: usize = 20;
    "dpo.iterations" => dpo_iterations: usize = 4000;
    "dpo.batch_size" => dpo_batch_size: usize = 2;
    "dpo.ref_ema_decay" => dpo_ref_ema_decay: f64 = 0.99;
    "dpo.rank" => dpo_rank: usize = 16;
    "dpo.consis.seed" => dpo_consis_seed: Option<u64> = None;
    "dpo.realfake.seed" => dpo_realfake_seed: Option<u64> = None;

    "sample.steps" => sample_steps: usize = 16;
    "sample.cfg" => sample_cfg: CfgSchedule = CfgSchedule::dynamic_default();

    "eval.counts" => eval_counts: [usize; 4] = SUITE_COUNTS;
    "eval.tie_band" => eval_tie_band: f64 = DEFAULT_TIE_BAND;
    "eval.seed" => eval_seed: Option<u64> = None;

    "paths.work" => work_dir: PathBuf = PathBuf::from("runs/default");
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self::unseeded();
        c.reseed(1);
        c
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::ConfigParse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

impl RunConfig {
    /// A configuration sized for a laptop CPU: the whole pipeline in minutes.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.data_in_pair = 256;
        c.data_cross_pair = 256;
        c.data_pool_per_identity = 4;
        c.pretrain_iterations = 1500;
        c.sft_in_iterations = 1500;
        c.sft_cross_iterations = 1500;
        c.prefs_consis_count = 100;
        // identity scores of a desk-trained model sit far below the
        // full-scale curation thresholds; keep any pair with the right sign
        c.prefs_consis_margin = 0.0;
        c.prefs_realfake_count = 80;
        c.prefs_realfake_keep = 0.0;
        c.dpo_iterations = 300;
        // a few dozen pairs are memorised within a hundred steps; a frozen
        // reference and a small step keep the adapter near the SFT model
        c.dpo_lr = 1e-4;
        c.dpo_ref_ema_decay = 1.0;
        c.work_dir = PathBuf::from("runs/desk");
        c
    }

    /// Smallest run that exercises every stage; for plumbing tests. Pair
    /// curation is opened wide so an untrained model still yields pairs.
    pub fn tiny() -> Self {
        let mut c = Self::default();
        c.data_in_pair = 6;
        c.data_cross_pair = 6;
        c.data_pool_per_identity = 1;
        c.data_top_k = 3;
        c.pretrain_iterations = 4;
        c.pretrain_batch_size = 2;
        c.pretrain_warmup = 1;
        c.sft_in_iterations = 4;
        c.sft_cross_iterations = 4;
        c.sft_batch_size = 2;
        c.sft_warmup = 1;
        c.prefs_steps = 2;
        c.prefs_consis_count = 3;
        c.prefs_consis_margin = -1e9;
        c.prefs_realfake_count = 3;
        c.prefs_realfake_keep = 0.0;
        c.prefs_realfake_max_motion_ratio = 1e9;
        c.dpo_iterations = 3;
        c.dpo_batch_size = 1;
        c.dpo_warmup = 1;
        c.sample_steps = 2;
        c.eval_counts = [1, 1, 0, 0];
        c
    }

    pub fn seed_keys() -> Vec<&'static str> {
        Self::KEYS
            .iter()
            .copied()
            .filter(|k| k.ends_with(".seed"))
            .collect()
    }

    /// Sets every seed from one master seed.
    pub fn reseed(&mut self, master: u64) {
        for (i, k) in Self::seed_keys().into_iter().enumerate() {
            let v = master.wrapping_mul(1_000).wrapping_add(i as u64);
            self.set(k, &v.to_string()).expect("seed keys take integers");
        }
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut c = Self::unseeded();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_err(origin, i + 1, format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(parse_err(origin, i + 1, format!("key `{k}` set twice")));
            }
            c.set(k, v)
                .map_err(|m| parse_err(origin, i + 1, format!("`{k}`: {m}")))?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (k, v) in self.entries() {
            let s = k.split('.').next().unwrap_or("");
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = s;
            }
            if !v.is_empty() {
                writeln!(out, "{k} = {v}").unwrap();
            }
        }
        out
    }

    /// Canonical lines of the keys under any of `prefixes`.
    pub fn section_text(&self, prefixes: &[&str]) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            if prefixes.iter().any(|p| k.starts_with(p)) {
                writeln!(out, "{k}={v}").unwrap();
            }
        }
        out
    }

    /// Every violation, each naming its key.
    pub fn violations(&self) -> Vec<String> {
        let mut bad = Vec::new();
        for k in Self::seed_keys() {
            if self.entries().iter().any(|(key, v)| key == &k && v.is_empty()) {
                bad.push(format!("{k}: missing seed"));
            }
        }
        let positive = [
            ("world.frames", self.world_frames),
            ("world.height", self.world_height),
            ("world.width", self.world_width),
            ("data.in_pair", self.data_in_pair),
            ("data.cross_pair", self.data_cross_pair),
            ("data.top_k", self.data_top_k),
            ("data.pool_per_identity", self.data_pool_per_identity),
            ("pretrain.batch_size", self.pretrain_batch_size),
            ("sft.rank", self.sft_rank),
            ("sft.batch_size", self.sft_batch_size),
            ("prefs.steps", self.prefs_steps),
            ("prefs.consis.offset", self.prefs_consis_offset),
            ("dpo.batch_size", self.dpo_batch_size),
            ("dpo.rank", self.dpo_rank),
            ("sample.steps", self.sample_steps),
        ];
        for (k, v) in positive {
            if v == 0 {
                bad.push(format!("{k}: must be >= 1"));
            }
        }
        let unit = [
            ("pretrain.text_drop", self.pretrain_text_drop),
            ("sft.in.ref_drop", self.sft_in_ref_drop),
            ("sft.in.text_drop", self.sft_in_text_drop),
            ("sft.cross.ref_drop", self.sft_cross_ref_drop),
            ("sft.cross.text_drop", self.sft_cross_text_drop),
            ("merge.in_pair", self.merge_in_pair),
            ("prefs.realfake.keep", self.prefs_realfake_keep),
            ("data.scale_min", self.data_scale_min),
            ("data.scale_max", self.data_scale_max),
        ];
        for (k, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                bad.push(format!("{k}: {v} outside [0, 1]"));
            }
        }
        if self.data_scale_min > self.data_scale_max {
            bad.push("data.scale_min: exceeds data.scale_max".into());
        }
        let decays = [
            ("sft.ema_decay", self.sft_ema_decay),
            ("dpo.ref_ema_decay", self.dpo_ref_ema_decay),
        ];
        for (k, v) in decays {
            if !(v > 0.0 && v <= 1.0) {
                bad.push(format!("{k}: {v} outside (0, 1]"));
            }
        }
        let rates = [
            ("pretrain.lr", self.pretrain_lr),
            ("sft.lr", self.sft_lr),
            ("dpo.lr", self.dpo_lr),
            ("dpo.beta", self.dpo_beta),
        ];
        for (k, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                bad.push(format!("{k}: {v} must be > 0"));
            }
        }
        let nonneg = [
            ("merge.consis", self.merge_consis),
            ("merge.realfake", self.merge_realfake),
            ("eval.tie_band", self.eval_tie_band),
        ];
        for (k, v) in nonneg {
            if !(v >= 0.0) {
                bad.push(format!("{k}: {v} must be >= 0"));
            }
        }
        for (k, v) in [
            ("prefs.consis.margin", self.prefs_consis_margin),
            ("prefs.realfake.max_motion_ratio", self.prefs_realfake_max_motion_ratio),
        ] {
            if !v.is_finite() {
                bad.push(format!("{k}: {v} must be finite"));
            }
        }
        if self.eval_counts.iter().sum::<usize>() == 0 {
            bad.push("eval.counts: benchmark is empty".into());
        }
        for (k, s) in [("prefs.cfg", self.prefs_cfg), ("sample.cfg", self.sample_cfg)] {
            if s.validate().is_err() {
                bad.push(format!("{k}: guidance scales must be >= 0, got {s}"));
            }
        }
        if self.dit().validate().is_err() {
            bad.push("world.height: frame size incompatible with the model patch size".into());
        }
        bad
    }

    /// Value checks plus writability of the work directory.
    pub fn validate(&self) -> Result<()> {
        let mut bad = self.violations();
        if let Err(e) = check_writable(&self.work_dir) {
            bad.push(format!("paths.work: {} is not writable ({e})", self.work_dir.display()));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(bad))
        }
    }

    fn seed(v: Option<u64>, key: &str) -> Result<u64> {
        v.ok_or_else(|| Error::ConfigInvalid(vec![format!("{key}: missing seed")]))
    }

    pub fn world(&self) -> WorldConfig {
        WorldConfig {
            frames: self.world_frames,
            height: self.world_height,
            width: self.world_width,
        }
    }

    pub fn dit(&self) -> DitConfig {
        DitConfig::for_world(&self.world())
    }

    pub fn curation(&self) -> Result<CurationConfig> {
        Ok(CurationConfig {
            in_pair: self.data_in_pair,
            cross_pair: self.data_cross_pair,
            scale_band: ScaleBand {
                min: self.data_scale_min as f32,
                max: self.data_scale_max as f32,
            },
            top_k: self.data_top_k,
            pool_per_identity: self.data_pool_per_identity,
            seed: Self::seed(self.data_seed, "data.seed")?,
        })
    }

    pub fn pretrain(&self) -> Result<PretrainConfig> {
        Ok(PretrainConfig {
            adam: AdamConfig {
                lr: self.pretrain_lr,
                warmup: self.pretrain_warmup,
                ..AdamConfig::default()
            },
            batch_size: self.pretrain_batch_size,
            iterations: self.pretrain_iterations,
            text_drop_prob: self.pretrain_text_drop,
            timestep: TimestepSampler::default(),
            seed: Self::seed(self.pretrain_seed, "pretrain.seed")?,
        })
    }

    pub fn sft(&self, mode: PairingMode) -> Result<SftConfig> {
        let mut c = SftConfig::for_pairing(mode);
        c.rank = self.sft_rank;
        c.adam = AdamConfig {
            lr: self.sft_lr,
            warmup: self.sft_warmup,
            ..AdamConfig::default()
        };
        c.batch_size = self.sft_batch_size;
        c.ema_decay = self.sft_ema_decay;
        match mode {
            PairingMode::InPair => {
                c.iterations = self.sft_in_iterations;
                c.ref_drop_prob = self.sft_in_ref_drop;
                c.text_drop_prob = self.sft_in_text_drop;
                c.seed = Self::seed(self.sft_in_seed, "sft.in.seed")?;
            }
            PairingMode::CrossPair => {
                c.iterations = self.sft_cross_iterations;
                c.ref_drop_prob = self.sft_cross_ref_drop;
                c.text_drop_prob = self.sft_cross_text_drop;
                c.seed = Self::seed(self.sft_cross_seed, "sft.cross.seed")?;
            }
        }
        Ok(c)
    }

    pub fn consis(&self) -> Result<ConsisConfig> {
        Ok(ConsisConfig {
            offset: self.prefs_consis_offset,
            margin: self.prefs_consis_margin,
            steps: self.prefs_steps,
            schedule: self.prefs_cfg,
            count: self.prefs_consis_count,
            seed: Self::seed(self.prefs_consis_seed, "prefs.consis.seed")?,
        })
    }

    pub fn realfake(&self) -> Result<RealFakeConfig> {
        Ok(RealFakeConfig {
            keep_threshold: self.prefs_realfake_keep,
            max_motion_ratio: self.prefs_realfake_max_motion_ratio,
            steps: self.prefs_steps,
            schedule: self.prefs_cfg,
            count: self.prefs_realfake_count,
            seed: Self::seed(self.prefs_realfake_seed, "prefs.realfake.seed")?,
        })
    }

    pub fn dpo(&self, consis: bool) -> Result<DpoConfig> {
        let seed = if consis {
            Self::seed(self.dpo_consis_seed, "dpo.consis.seed")?
        } else {
            Self::seed(self.dpo_realfake_seed, "dpo.realfake.seed")?
        };
        Ok(DpoConfig {
            beta: self.dpo_beta,
            adam: AdamConfig {
                lr: self.dpo_lr,
                warmup: self.dpo_warmup,
                ..AdamConfig::default()
            },
            iterations: self.dpo_iterations,
            batch_size: self.dpo_batch_size,
            ref_ema_decay: self.dpo_ref_ema_decay,
            rank: self.dpo_rank,
            lora_scale: 1.0,
            timestep: TimestepSampler::default(),
            seed,
        })
    }

    pub fn sampler(&self) -> SamplerSettings {
        SamplerSettings {
            steps: self.sample_steps,
            schedule: self.sample_cfg,
            ref_rope_offset: 0,
        }
    }

    pub fn eval_seed(&self) -> Result<u64> {
        Self::seed(self.eval_seed, "eval.seed")
    }
}

fn check_writable(dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let probe = dir.join(format!(".probe{}", std::process::id()));
    std::fs::write(&probe, b"")?;
    std::fs::remove_file(&probe)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn origin() -> &'static Path {
        Path::new("run.conf")
    }

    #[test]
    fn text_round_trip() {
        let c = RunConfig::desk();
        let back = RunConfig::parse(&c.to_text(), origin()).unwrap();
        assert_eq!(back, c);
        assert!(c.violations().is_empty(), "{:?}", c.violations());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let e = RunConfig::parse("# c\ndata.seed = 3\nbogus.key = 1\n", origin()).unwrap_err();
        assert!(matches!(e, Error::ConfigParse { line: 3, .. }), "{e}");
        let e = RunConfig::parse("data.seed = x", origin()).unwrap_err();
        assert!(matches!(e, Error::ConfigParse { line: 1, .. }));
        let e = RunConfig::parse("\n\nno equals sign", origin()).unwrap_err();
        assert!(matches!(e, Error::ConfigParse { line: 3, .. }));
        assert!(RunConfig::parse("data.seed = 1\ndata.seed = 2", origin()).is_err());
    }

    #[test]
    fn violations_name_their_keys() {
        let mut text = RunConfig::default().to_text();
        text = text.replace("sample.cfg = linear:1-4,5-1", "sample.cfg = static:-1,3.5");
        let c = RunConfig::parse(&text, origin()).unwrap();
        let v = c.violations();
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].starts_with("sample.cfg"));

        let text = RunConfig::default()
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("dpo.consis.seed"))
            .collect::<Vec<_>>()
            .join("\n");
        let v = RunConfig::parse(&text, origin()).unwrap().violations();
        assert_eq!(v, vec!["dpo.consis.seed: missing seed".to_string()]);
    }
}

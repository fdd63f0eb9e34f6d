//! Stage graph of a full run. Each stage writes one directory under the work
//! dir, built in a temporary sibling and renamed into place, with a
//! `provenance.json` recording the config slice, the input artifact hashes
//! and the hash of what it produced. A stage whose provenance still matches
//! is skipped.

mod config;

pub use config::RunConfig;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curation::{
    build_triplets, read_manifest, write_dataset, PairingMode, ScriptSet, TagCode, Triplet,
};
use crate::dit::{apply_lora, merge_loras, LoraAdapter, ModelWeights};
use crate::dpo::{
    dpo_train, gen_consis_pairs, gen_realfake_pairs, read_pairs, write_pairs, DpoSample,
    PairGeneration, PairPrompt,
};
use crate::error::{Error, Result};
use crate::eval::{
    build_benchmark_with, feedback, format_report, group_by_prefix, run_benchmark, write_benchmark,
    CaseScores,
};
use crate::tensor_io::write_atomic;
use crate::train::{pretrain_base, train_sft, TrainSample};
use crate::world::{SceneSampler, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    GenData,
    BuildTriplets,
    PretrainBase,
    TrainSftIn,
    TrainSftCross,
    MergeLora,
    GenPrefsConsis,
    GenPrefsRealfake,
    TrainDpoConsis,
    TrainDpoRealfake,
    MergeDpo,
    Evaluate,
}

impl Stage {
    /// Topological order.
    pub const ALL: [Stage; 12] = [
        Stage::GenData,
        Stage::BuildTriplets,
        Stage::PretrainBase,
        Stage::TrainSftIn,
        Stage::TrainSftCross,
        Stage::MergeLora,
        Stage::GenPrefsConsis,
        Stage::GenPrefsRealfake,
        Stage::TrainDpoConsis,
        Stage::TrainDpoRealfake,
        Stage::MergeDpo,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::BuildTriplets => "build-triplets",
            Stage::PretrainBase => "pretrain-base",
            Stage::TrainSftIn => "train-sft-in",
            Stage::TrainSftCross => "train-sft-cross",
            Stage::MergeLora => "merge-lora",
            Stage::GenPrefsConsis => "gen-prefs-consis",
            Stage::GenPrefsRealfake => "gen-prefs-realfake",
            Stage::TrainDpoConsis => "train-dpo-consis",
            Stage::TrainDpoRealfake => "train-dpo-realfake",
            Stage::MergeDpo => "merge-dpo",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn deps(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            GenData => &[],
            BuildTriplets => &[GenData],
            PretrainBase => &[BuildTriplets],
            TrainSftIn | TrainSftCross => &[BuildTriplets, PretrainBase],
            MergeLora => &[PretrainBase, TrainSftIn, TrainSftCross],
            GenPrefsConsis => &[BuildTriplets, PretrainBase, TrainSftCross],
            GenPrefsRealfake => &[BuildTriplets, PretrainBase, TrainSftIn],
            TrainDpoConsis => &[MergeLora, GenPrefsConsis],
            TrainDpoRealfake => &[MergeLora, GenPrefsRealfake],
            MergeDpo => &[MergeLora, TrainDpoConsis, TrainDpoRealfake],
            Evaluate => &[MergeLora, MergeDpo],
        }
    }

    /// Config keys the stage reads.
    fn key_prefixes(self) -> &'static [&'static str] {
        use Stage::*;
        match self {
            GenData => &["world.", "data."],
            BuildTriplets => &["world.", "data.scale_", "data.top_k"],
            PretrainBase => &["world.", "pretrain."],
            TrainSftIn => &["sft.rank", "sft.lr", "sft.warmup", "sft.batch", "sft.ema", "sft.in."],
            TrainSftCross => &[
                "sft.rank", "sft.lr", "sft.warmup", "sft.batch", "sft.ema", "sft.cross.",
            ],
            MergeLora => &["merge.in_pair"],
            GenPrefsConsis => &["prefs.steps", "prefs.cfg", "prefs.consis."],
            GenPrefsRealfake => &["prefs.steps", "prefs.cfg", "prefs.realfake."],
            TrainDpoConsis => &[
                "dpo.beta", "dpo.lr", "dpo.warmup", "dpo.iter", "dpo.batch", "dpo.ref", "dpo.rank",
                "dpo.consis.",
            ],
            TrainDpoRealfake => &[
                "dpo.beta", "dpo.lr", "dpo.warmup", "dpo.iter", "dpo.batch", "dpo.ref", "dpo.rank",
                "dpo.realfake.",
            ],
            MergeDpo => &["merge.consis", "merge.realfake"],
            Evaluate => &["world.", "sample.", "eval."],
        }
    }

    pub fn dir(self, work: &Path) -> PathBuf {
        work.join(self.name())
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, String>,
    pub artifact_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    UpToDate,
}

pub const PROVENANCE_FILE: &str = "provenance.json";

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path.strip_prefix(root).ok() != Some(Path::new(PROVENANCE_FILE)) {
            out.push(path);
        }
    }
    Ok(())
}

/// SHA-256 over every file's relative path and contents, in sorted order.
pub fn hash_dir(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(dir).unwrap_or(&f).to_string_lossy().replace('\\', "/");
        let bytes = fs::read(&f)?;
        h.update((rel.len() as u64).to_le_bytes());
        h.update(rel.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn read_provenance(stage_dir: &Path) -> Result<Option<Provenance>> {
    let p = stage_dir.join(PROVENANCE_FILE);
    if !p.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&fs::read_to_string(p)?)?))
}

/// `id<TAB>weight` lines, as written by `rebalance`.
pub fn read_sampling_weights(path: &Path) -> Result<BTreeMap<String, f64>> {
    let text = fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: &str| Error::Format {
            path: path.to_path_buf(),
            message: format!("line {}: {m}", i + 1),
        };
        let (id, w) = line.split_once('\t').ok_or_else(|| bad("expected `id<TAB>weight`"))?;
        let w: f64 = w.trim().parse().map_err(|_| bad("weight is not a number"))?;
        out.insert(id.to_string(), w);
    }
    Ok(out)
}

pub fn write_sampling_weights(path: &Path, ids: &[String], weights: &[f64]) -> Result<()> {
    let mut text = String::new();
    for (id, w) in ids.iter().zip(weights) {
        text.push_str(&format!("{id}\t{w}\n"));
    }
    write_atomic(path, text.as_bytes())
}

/// `prefix<TAB>deficiency` lines.
pub fn read_feedback(path: &Path) -> Result<BTreeMap<String, f64>> {
    read_sampling_weights(path)
}

pub fn write_feedback(path: &Path, fb: &BTreeMap<String, f64>) -> Result<()> {
    let (ids, ws): (Vec<String>, Vec<f64>) = fb.iter().map(|(k, v)| (k.clone(), *v)).unzip();
    write_sampling_weights(path, &ids, &ws)
}

fn write_losses(path: &Path, losses: &[f64]) -> Result<()> {
    let text: String = losses.iter().map(|l| format!("{l}\n")).collect();
    write_atomic(path, text.as_bytes())
}

pub fn read_losses(path: &Path) -> Result<Vec<f64>> {
    fs::read_to_string(path)?
        .lines()
        .map(|l| {
            l.trim().parse().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                message: format!("bad loss `{l}`"),
            })
        })
        .collect()
}

pub struct Pipeline {
    pub config: RunConfig,
    pub force: bool,
    /// Called with a progress line as stages start and finish.
    pub log: Box<dyn Fn(&str) + Send + Sync>,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Self {
        Self {
            config,
            force: false,
            log: Box::new(|_| {}),
        }
    }

    pub fn work(&self) -> &Path {
        &self.config.work_dir
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        stage.dir(self.work())
    }

    fn config_hash(&self, stage: Stage) -> Result<String> {
        let mut text = self.config.section_text(stage.key_prefixes());
        let weights = &self.config.sft_sampling_weights;
        if matches!(stage, Stage::TrainSftIn | Stage::TrainSftCross)
            && !weights.as_os_str().is_empty()
        {
            text.push_str(&format!("sampling_weights_sha={}\n", sha_hex(&fs::read(weights)?)));
        }
        Ok(sha_hex(text.as_bytes()))
    }

    fn seeds(&self, stage: Stage) -> BTreeMap<String, u64> {
        self.config
            .entries()
            .into_iter()
            .filter(|(k, _)| k.ends_with(".seed") && stage.key_prefixes().iter().any(|p| k.starts_with(p)))
            .filter_map(|(k, v)| Some((k.to_string(), v.parse().ok()?)))
            .collect()
    }

    fn input_hashes(&self, stage: Stage) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for &d in stage.deps() {
            let p = read_provenance(&self.stage_dir(d))?.ok_or_else(|| Error::MissingDependency {
                stage: stage.name().into(),
                missing: d.name().into(),
            })?;
            out.insert(d.name().to_string(), p.artifact_hash);
        }
        Ok(out)
    }

    /// True when the stage's directory holds artifacts matching the current
    /// config and inputs.
    pub fn is_current(&self, stage: Stage) -> Result<bool> {
        let dir = self.stage_dir(stage);
        let Some(p) = read_provenance(&dir)? else {
            return Ok(false);
        };
        Ok(p.config_hash == self.config_hash(stage)?
            && p.inputs == self.input_hashes(stage)?
            && p.artifact_hash == hash_dir(&dir)?)
    }

    /// Runs the requested stages in dependency order. Every dependency must
    /// either be requested too or already have completed artifacts.
    pub fn run(&self, stages: &[Stage]) -> Result<Vec<(Stage, StageOutcome)>> {
        let mut plan: Vec<Stage> = stages.to_vec();
        plan.sort();
        plan.dedup();
        if plan.is_empty() {
            return Ok(Vec::new());
        }
        self.config.validate()?;
        for &s in &plan {
            for &d in s.deps() {
                if !plan.contains(&d) && read_provenance(&self.stage_dir(d))?.is_none() {
                    return Err(Error::MissingDependency {
                        stage: s.name().into(),
                        missing: d.name().into(),
                    });
                }
            }
        }
        let mut out = Vec::new();
        for s in plan {
            if !self.force && self.is_current(s)? {
                (self.log)(&format!("{s}: up to date"));
                out.push((s, StageOutcome::UpToDate));
                continue;
            }
            (self.log)(&format!("{s}: running"));
            let started = std::time::Instant::now();
            self.run_stage(s)?;
            (self.log)(&format!("{s}: done in {:.1?}", started.elapsed()));
            out.push((s, StageOutcome::Ran));
        }
        Ok(out)
    }

    pub fn run_all(&self) -> Result<Vec<(Stage, StageOutcome)>> {
        self.run(&Stage::ALL)
    }

    fn run_stage(&self, stage: Stage) -> Result<()> {
        let inputs = self.input_hashes(stage)?;
        let config_hash = self.config_hash(stage)?;
        let work = self.work();
        fs::create_dir_all(work)?;
        let tmp = work.join(format!(".{}.tmp", stage.name()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        if let Err(e) = self.produce(stage, &tmp) {
            let _ = fs::remove_dir_all(&tmp);
            return Err(e);
        }
        let prov = Provenance {
            stage: stage.name().into(),
            config_hash,
            seeds: self.seeds(stage),
            inputs,
            artifact_hash: hash_dir(&tmp)?,
        };
        write_atomic(
            &tmp.join(PROVENANCE_FILE),
            serde_json::to_string_pretty(&prov)?.as_bytes(),
        )?;
        let dir = self.stage_dir(stage);
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::rename(&tmp, &dir)?;
        Ok(())
    }

    fn triplets(&self) -> Result<Vec<Triplet>> {
        read_manifest(&self.stage_dir(Stage::BuildTriplets).join("manifest.jsonl"))
    }

    fn weights(&self, stage: Stage) -> Result<ModelWeights> {
        ModelWeights::load(&self.stage_dir(stage).join("weights"))
    }

    fn adapter(&self, stage: Stage) -> Result<LoraAdapter> {
        LoraAdapter::load(&self.stage_dir(stage).join("adapter"))
    }

    /// The base with one SFT adapter applied.
    pub fn sft_model(&self, mode: PairingMode) -> Result<ModelWeights> {
        let stage = match mode {
            PairingMode::InPair => Stage::TrainSftIn,
            PairingMode::CrossPair => Stage::TrainSftCross,
        };
        apply_lora(&self.weights(Stage::PretrainBase)?, &self.adapter(stage)?)
    }

    fn produce(&self, stage: Stage, out: &Path) -> Result<()> {
        let c = &self.config;
        let world = c.world();
        let vocab = Vocab::default();
        match stage {
            Stage::GenData => {
                let scripts = crate::curation::generate_scripts(&SceneSampler::new(world), &c.curation()?);
                write_atomic(&out.join("scripts.json"), serde_json::to_string(&scripts)?.as_bytes())
            }
            Stage::BuildTriplets => {
                let path = self.stage_dir(Stage::GenData).join("scripts.json");
                let scripts: ScriptSet = serde_json::from_str(&fs::read_to_string(path)?)?;
                let data = build_triplets(&world, &scripts, &c.curation()?)?;
                write_dataset(out, &data.triplets).map(|_| ())
            }
            Stage::PretrainBase => {
                let samples = self
                    .triplets()?
                    .iter()
                    .map(|t| TrainSample::text_only(t, &vocab))
                    .collect::<Result<Vec<_>>>()?;
                let r = pretrain_base(c.dit(), &samples, &c.pretrain()?)?;
                r.weights.save(&out.join("weights"))?;
                write_losses(&out.join("losses.txt"), &r.losses)
            }
            Stage::TrainSftIn | Stage::TrainSftCross => {
                let mode = if stage == Stage::TrainSftIn {
                    PairingMode::InPair
                } else {
                    PairingMode::CrossPair
                };
                let triplets: Vec<Triplet> = self
                    .triplets()?
                    .into_iter()
                    .filter(|t| t.pairing_mode == mode)
                    .collect();
                let samples = triplets
                    .iter()
                    .map(|t| TrainSample::from_triplet(t, &vocab))
                    .collect::<Result<Vec<_>>>()?;
                let weights = if c.sft_sampling_weights.as_os_str().is_empty() {
                    None
                } else {
                    let table = read_sampling_weights(&c.sft_sampling_weights)?;
                    Some(
                        triplets
                            .iter()
                            .map(|t| {
                                table.get(&t.id).copied().ok_or_else(|| {
                                    Error::invalid(format!("no sampling weight for triplet `{}`", t.id))
                                })
                            })
                            .collect::<Result<Vec<_>>>()?,
                    )
                };
                let base = self.weights(Stage::PretrainBase)?;
                let r = train_sft(&base, &samples, weights.as_deref(), &c.sft(mode)?)?;
                r.adapter.save(&out.join("adapter"))?;
                r.ema.save(&out.join("ema"))?;
                write_losses(&out.join("losses.txt"), &r.losses)
            }
            Stage::MergeLora => {
                let l = c.merge_in_pair;
                let merged = merge_loras(&[
                    (&self.adapter(Stage::TrainSftCross)?, 1.0 - l),
                    (&self.adapter(Stage::TrainSftIn)?, l),
                ])?;
                let w = apply_lora(&self.weights(Stage::PretrainBase)?, &merged)?;
                merged.save(&out.join("adapter"))?;
                w.save(&out.join("weights"))
            }
            Stage::GenPrefsConsis => {
                let model = self.sft_model(PairingMode::CrossPair)?;
                let prompts: Vec<PairPrompt> = self
                    .triplets()?
                    .iter()
                    .filter(|t| t.pairing_mode == PairingMode::CrossPair)
                    .map(PairPrompt::from_triplet)
                    .collect();
                let g = gen_consis_pairs(&model, "sft-cross", &prompts, &world, &c.consis()?)?;
                write_generation(out, &g)
            }
            Stage::GenPrefsRealfake => {
                let model = self.sft_model(PairingMode::InPair)?;
                let triplets: Vec<Triplet> = self
                    .triplets()?
                    .into_iter()
                    .filter(|t| t.pairing_mode == PairingMode::InPair)
                    .collect();
                let g = gen_realfake_pairs(&model, "sft-in", &triplets, &world, &c.realfake()?)?;
                write_generation(out, &g)
            }
            Stage::TrainDpoConsis | Stage::TrainDpoRealfake => {
                let consis = stage == Stage::TrainDpoConsis;
                let src = if consis {
                    Stage::GenPrefsConsis
                } else {
                    Stage::GenPrefsRealfake
                };
                let pairs = read_pairs(&self.stage_dir(src).join("pairs.jsonl"))?
                    .iter()
                    .map(|p| DpoSample::from_pair(p, &vocab))
                    .collect::<Result<Vec<_>>>()?;
                let r = dpo_train(&self.weights(Stage::MergeLora)?, &pairs, &c.dpo(consis)?)?;
                r.adapter.save(&out.join("adapter"))?;
                write_losses(&out.join("losses.txt"), &r.losses)
            }
            Stage::MergeDpo => {
                let merged = merge_loras(&[
                    (&self.adapter(Stage::TrainDpoConsis)?, c.merge_consis),
                    (&self.adapter(Stage::TrainDpoRealfake)?, c.merge_realfake),
                ])?;
                let w = apply_lora(&self.weights(Stage::MergeLora)?, &merged)?;
                merged.save(&out.join("adapter"))?;
                w.save(&out.join("weights"))
            }
            Stage::Evaluate => {
                let cases = build_benchmark_with(world, &c.eval_counts, c.eval_seed()?)?;
                write_benchmark(&out.join("bench"), &cases)?;
                let settings = c.sampler();
                let fin = run_benchmark(&self.weights(Stage::MergeDpo)?, &cases, &world, &settings)?;
                let sft = run_benchmark(&self.weights(Stage::MergeLora)?, &cases, &world, &settings)?;
                write_scores(&out.join("scores_final.jsonl"), &fin)?;
                write_scores(&out.join("scores_sft.jsonl"), &sft)?;
                let report = format_report(&fin, Some(&sft), c.eval_tie_band)?;
                write_atomic(&out.join("report.txt"), report.as_bytes())?;
                let mut fb = BTreeMap::new();
                for level in 1..TagCode::LEVELS {
                    fb.extend(feedback(&group_by_prefix(&cases, &fin, level))?);
                }
                write_feedback(&out.join("feedback.tsv"), &fb)
            }
        }
    }
}

fn write_generation(out: &Path, g: &PairGeneration) -> Result<()> {
    write_pairs(out, &g.pairs)?;
    let text: String = g
        .candidates
        .iter()
        .map(|c| format!("{}\t{}\t{}\t{}\n", c[0], c[1], c[2], c[3]))
        .collect();
    write_atomic(&out.join("candidates.tsv"), text.as_bytes())
}

pub fn write_scores(path: &Path, scores: &[CaseScores]) -> Result<()> {
    let mut text = String::new();
    for s in scores {
        text.push_str(&serde_json::to_string(s)?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_scores(path: &Path) -> Result<Vec<CaseScores>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

//! Fixed-seed benchmark, oracle proxies, GSB tallies and per-prefix
//! deficiency feedback.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curation::{
    assign_tag, coarse_prompt, load_reference, save_reference, PairingMode, Reference, TagCode,
};
use crate::dit::WeightSource;
use crate::error::{Error, Result};
use crate::inference::{rephrase, sample, CfgSchedule, SampleRequest};
use crate::latent::LatentVideo;
use crate::tensor_io::write_atomic;
use crate::world::{
    detect_subjects, parse_caption, render_scene, Pose, SceneSampler, SceneScript, WorldConfig,
    ROTATION_STEPS,
};

/// Cases with 1, 2, 3 and 4 references in the default suite.
pub const SUITE_COUNTS: [usize; 4] = [13, 25, 7, 5];
pub const DEFAULT_TIE_BAND: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkCase {
    pub id: String,
    pub prompt: String,
    pub references: Vec<Reference>,
    pub tag: TagCode,
    pub seed: u64,
    /// The scene the prompt was written from; its render is the ideal answer.
    pub script: SceneScript,
}

impl BenchmarkCase {
    pub fn caption(&self) -> Result<String> {
        let specs: Vec<_> = self.references.iter().map(|r| r.spec).collect();
        rephrase(&self.prompt, &specs)
    }
}

/// References show each subject at a random pose on the scene background,
/// so copying the reference pose is distinguishable from following the
/// prompt.
pub fn build_benchmark_with(
    world: WorldConfig,
    counts: &[usize],
    seed: u64,
) -> Result<Vec<BenchmarkCase>> {
    let sampler = SceneSampler::new(world);
    let mut cases = Vec::new();
    for (k, &count) in counts.iter().enumerate() {
        let refs_per_case = k + 1;
        for i in 0..count {
            let id = format!("bench-{refs_per_case}-{i:02}");
            // redraw until the scene holds every subject and the oracle reads
            // its own render perfectly
            let mut attempt = 0u64;
            let case = loop {
                let case = draw_case(&sampler, &id, refs_per_case, seed, i, attempt)?;
                let truth = render_scene(&case.script, &world)?;
                let s = score_case(&truth, &case, &world)?;
                let complete = case.script.subjects.len() == refs_per_case;
                if (complete && s.text_accuracy == 1.0 && s.mean_identity() >= 0.95)
                    || attempt >= 63
                {
                    break case;
                }
                attempt += 1;
            };
            cases.push(case);
        }
    }
    Ok(cases)
}

fn draw_case(
    sampler: &SceneSampler,
    id: &str,
    refs_per_case: usize,
    seed: u64,
    index: usize,
    attempt: u64,
) -> Result<BenchmarkCase> {
    let world = sampler.world;
    let case_seed = seed
        .wrapping_mul(0x9E37_79B9)
        .wrapping_add((refs_per_case * 1000 + index) as u64)
        .wrapping_add(attempt << 32);
    let script = sampler.sample_with_count(id, case_seed, refs_per_case);
    let mut rng = ChaCha8Rng::seed_from_u64(case_seed ^ 0xBE7C);
    let references = script
        .subjects
        .iter()
        .map(|s| {
            let r = s.spec.radius_px(world.width).ceil() as i32;
            let x = rng.random_range(r..=(world.width as i32 - r).max(r));
            let y = rng.random_range(r..=(world.height as i32 - r).max(r));
            let pose = Pose::new(x as f32, y as f32, rng.random_range(0..ROTATION_STEPS));
            Reference::render(s.spec, pose, script.background, id, &world)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchmarkCase {
        prompt: coarse_prompt(&script),
        tag: assign_tag(&script, PairingMode::CrossPair),
        seed: case_seed,
        id: id.to_string(),
        references,
        script,
    })
}

pub fn build_benchmark(world: WorldConfig, seed: u64) -> Result<Vec<BenchmarkCase>> {
    build_benchmark_with(world, &SUITE_COUNTS, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScores {
    pub id: String,
    pub identity: Vec<f64>,
    pub pose: Vec<f64>,
    pub motion: f64,
    pub smoothness: f64,
    pub text_accuracy: f64,
}

impl CaseScores {
    pub fn mean_identity(&self) -> f64 {
        mean(&self.identity)
    }

    pub fn mean_pose(&self) -> f64 {
        mean(&self.pose)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn score_case(
    video: &LatentVideo,
    case: &BenchmarkCase,
    world: &WorldConfig,
) -> Result<CaseScores> {
    world.check_video(video)?;
    let mut report = detect_subjects(video);
    let refs: Vec<_> = case.references.iter().map(|r| (r.spec, r.pose)).collect();
    report.score_references(&refs, world.width);
    report.check_caption(&parse_caption(&case.caption()?)?);
    Ok(CaseScores {
        id: case.id.clone(),
        identity: report.subjects.iter().map(|s| s.identity_match).collect(),
        pose: report.subjects.iter().map(|s| s.pose_similarity).collect(),
        motion: video.mean_frame_difference(),
        smoothness: video.mean_second_difference(),
        text_accuracy: report.text_accuracy(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerSettings {
    pub steps: usize,
    pub schedule: CfgSchedule,
    pub ref_rope_offset: usize,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            steps: 16,
            schedule: CfgSchedule::default(),
            ref_rope_offset: 0,
        }
    }
}

pub fn request_for(
    case: &BenchmarkCase,
    world: &WorldConfig,
    s: &SamplerSettings,
) -> Result<SampleRequest> {
    Ok(SampleRequest {
        caption: case.caption()?,
        references: case.references.iter().map(|r| r.latent.clone()).collect(),
        steps: s.steps,
        seed: case.seed,
        schedule: s.schedule,
        dims: world.video_dims(),
        ref_rope_offset: s.ref_rope_offset,
    })
}

/// Samples and scores every case.
pub fn run_benchmark(
    w: &dyn WeightSource,
    cases: &[BenchmarkCase],
    world: &WorldConfig,
    settings: &SamplerSettings,
) -> Result<Vec<CaseScores>> {
    cases
        .iter()
        .map(|case| {
            let video = sample(w, &request_for(case, world, settings)?)?;
            score_case(&video, case, world)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub identity: f64,
    pub pose: f64,
    pub motion: f64,
    pub smoothness: f64,
    pub text_accuracy: f64,
}

pub fn summarize(scores: &[CaseScores]) -> Summary {
    let avg = |f: &dyn Fn(&CaseScores) -> f64| mean(&scores.iter().map(f).collect::<Vec<_>>());
    Summary {
        identity: avg(&|s| s.mean_identity()),
        pose: avg(&|s| s.mean_pose()),
        motion: avg(&|s| s.motion),
        smoothness: avg(&|s| s.smoothness),
        text_accuracy: avg(&|s| s.text_accuracy),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GsbTally {
    pub good: usize,
    pub same: usize,
    pub bad: usize,
}

impl GsbTally {
    /// `(G − B) / (G + S + B)`, 0 for an empty tally.
    pub fn ratio(&self) -> f64 {
        let n = self.good + self.same + self.bad;
        if n == 0 {
            0.0
        } else {
            (self.good as f64 - self.bad as f64) / n as f64
        }
    }
}

/// Per-case comparison of `a` against `b`; differences within `tie_band`
/// count as same.
pub fn gsb(a: &[f64], b: &[f64], tie_band: f64) -> Result<GsbTally> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{} scores vs {}", a.len(), b.len())));
    }
    let mut tally = GsbTally {
        good: 0,
        same: 0,
        bad: 0,
    };
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        if d.abs() <= tie_band {
            tally.same += 1;
        } else if d > 0.0 {
            tally.good += 1;
        } else {
            tally.bad += 1;
        }
    }
    Ok(tally)
}

/// GSB on mean identity match, case by case.
pub fn gsb_identity(a: &[CaseScores], b: &[CaseScores], tie_band: f64) -> Result<GsbTally> {
    let ids = |s: &[CaseScores]| s.iter().map(|c| c.mean_identity()).collect::<Vec<_>>();
    gsb(&ids(a), &ids(b), tie_band)
}

/// `1 − mean identity` per group, clamped to `[0, 1]`.
pub fn feedback(groups: &BTreeMap<String, Vec<f64>>) -> Result<BTreeMap<String, f64>> {
    groups
        .iter()
        .map(|(k, v)| {
            if v.is_empty() {
                return Err(Error::invalid(format!("feedback group `{k}` is empty")));
            }
            Ok((k.clone(), (1.0 - mean(v)).clamp(0.0, 1.0)))
        })
        .collect()
}

/// Groups case identity scores by tag prefix of `level` components.
pub fn group_by_prefix(
    cases: &[BenchmarkCase],
    scores: &[CaseScores],
    level: usize,
) -> BTreeMap<String, Vec<f64>> {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (c, s) in cases.iter().zip(scores) {
        groups
            .entry(c.tag.prefix(level))
            .or_default()
            .push(s.mean_identity());
    }
    groups
}

/// Plain-text report: one row per case, then a summary block.
pub fn format_report(a: &[CaseScores], b: Option<&[CaseScores]>, tie_band: f64) -> Result<String> {
    let mut out = String::new();
    writeln!(out, "case\tidentity\tpose\tmotion\tsmoothness\ttext").unwrap();
    for s in a {
        writeln!(
            out,
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            s.id,
            s.mean_identity(),
            s.mean_pose(),
            s.motion,
            s.smoothness,
            s.text_accuracy
        )
        .unwrap();
    }
    let sum = |label: &str, m: Summary, out: &mut String| {
        writeln!(
            out,
            "{label}: identity {:.4} pose {:.4} motion {:.4} smoothness {:.4} text {:.4}",
            m.identity, m.pose, m.motion, m.smoothness, m.text_accuracy
        )
        .unwrap();
    };
    writeln!(out).unwrap();
    sum("model a", summarize(a), &mut out);
    if let Some(b) = b {
        sum("model b", summarize(b), &mut out);
        let t = gsb_identity(a, b, tie_band)?;
        writeln!(
            out,
            "gsb a vs b: G {} S {} B {} ratio {:.4}",
            t.good,
            t.same,
            t.bad,
            t.ratio()
        )
        .unwrap();
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CaseRecord {
    id: String,
    prompt: String,
    references: Vec<String>,
    tag: String,
    seed: u64,
    script: SceneScript,
}

/// Writes `benchmark.jsonl` plus reference tensors under `dir`.
pub fn write_benchmark(dir: &Path, cases: &[BenchmarkCase]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("refs"))?;
    let mut text = String::new();
    for c in cases {
        let mut references = Vec::new();
        for (j, r) in c.references.iter().enumerate() {
            let path = format!("refs/{}_{j}.lgt", c.id);
            save_reference(&dir.join(&path), r)?;
            references.push(path);
        }
        let rec = CaseRecord {
            id: c.id.clone(),
            prompt: c.prompt.clone(),
            references,
            tag: c.tag.encoded(),
            seed: c.seed,
            script: c.script.clone(),
        };
        writeln!(text, "{}", serde_json::to_string(&rec)?).unwrap();
    }
    let path = dir.join("benchmark.jsonl");
    write_atomic(&path, text.as_bytes())?;
    Ok(path)
}

pub fn read_benchmark(manifest: &Path) -> Result<Vec<BenchmarkCase>> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(manifest)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let r: CaseRecord = serde_json::from_str(l)?;
            Ok(BenchmarkCase {
                references: r
                    .references
                    .iter()
                    .map(|p| load_reference(&dir.join(p)))
                    .collect::<Result<_>>()?,
                tag: TagCode::parse(&r.tag)?,
                id: r.id,
                prompt: r.prompt,
                seed: r.seed,
                script: r.script,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curation::rebalance;

    #[test]
    fn gsb_hand_cases() {
        let t = GsbTally {
            good: 7,
            same: 2,
            bad: 1,
        };
        assert_eq!(t.ratio(), 0.6);
        let a = [0.9, 0.5, 0.7, 0.2];
        let same = gsb(&a, &a, 0.0).unwrap();
        assert_eq!((same.good, same.same, same.bad), (0, 4, 0));
        let b = [0.1, 0.6, 0.7, 0.8];
        assert_eq!(gsb(&a, &b, f64::INFINITY).unwrap().ratio(), 0.0);
        let t = gsb(&a, &b, 0.0).unwrap();
        assert_eq!((t.good, t.same, t.bad), (1, 1, 2));
        assert_eq!(
            gsb(&a, &b, 0.0).unwrap().ratio(),
            -gsb(&b, &a, 0.0).unwrap().ratio()
        );
        assert!(gsb(&a, &b[..2], 0.0).is_err());
    }

    #[test]
    fn suite_distribution() {
        let cases = build_benchmark(WorldConfig::default(), 3).unwrap();
        assert_eq!(cases.len(), 50);
        for (k, &n) in SUITE_COUNTS.iter().enumerate() {
            assert_eq!(
                cases.iter().filter(|c| c.references.len() == k + 1).count(),
                n
            );
        }
        assert_eq!(build_benchmark(WorldConfig::default(), 3).unwrap(), cases);
    }

    #[test]
    fn ground_truth_scores_full_text_accuracy() {
        let world = WorldConfig::default();
        let cases = build_benchmark_with(world, &[4, 4, 4, 4], 5).unwrap();
        for case in &cases {
            let video = render_scene(&case.script, &world).unwrap();
            let s = score_case(&video, case, &world).unwrap();
            assert_eq!(s.text_accuracy, 1.0, "{}", case.id);
            assert!(s.mean_identity() > 0.95, "{} {:?}", case.id, s.identity);
        }
    }

    #[test]
    fn copy_paste_signature() {
        let world = WorldConfig::default();
        let case = &build_benchmark_with(world, &[1], 9).unwrap()[0];
        let frame = &case.references[0].latent;
        let frames: Vec<&LatentVideo> = vec![frame; world.frames];
        let video = LatentVideo::concat_frames(&frames).unwrap();
        let s = score_case(&video, case, &world).unwrap();
        assert_eq!(s.motion, 0.0);
        assert!((s.pose[0] - 1.0).abs() < 1e-9, "{:?}", s.pose);
    }

    #[test]
    fn feedback_and_rebalance() {
        let groups = BTreeMap::from([
            ("1.circle".to_string(), vec![1.0, 1.0]),
            ("2.star".to_string(), vec![0.2, 0.6]),
        ]);
        let d = feedback(&groups).unwrap();
        assert_eq!(d["1.circle"], 0.0);
        assert!((d["2.star"] - 0.6).abs() < 1e-12);
        let tags = [
            TagCode::parse("1.circle.static.gray.in").unwrap(),
            TagCode::parse("2.star.spin.white.cross").unwrap(),
        ];
        let w = rebalance(&tags, &d).unwrap();
        assert!(w[1] > w[0]);
        assert!(feedback(&BTreeMap::from([("x".to_string(), vec![])])).is_err());
    }
}

use std::path::Path;

use s2vlab::error::Error;
use s2vlab::pipeline::{hash_dir, read_provenance, Pipeline, RunConfig, Stage, StageOutcome};

fn tiny(work: &Path) -> Pipeline {
    let mut c = RunConfig::tiny();
    c.work_dir = work.to_path_buf();
    Pipeline::new(c)
}

fn artifact_hashes(p: &Pipeline) -> Vec<String> {
    Stage::ALL
        .iter()
        .map(|&s| read_provenance(&p.stage_dir(s)).unwrap().unwrap().artifact_hash)
        .collect()
}

#[test]
fn full_run_is_deterministic_and_resumable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let pa = tiny(a.path());
    let first = pa.run_all().unwrap();
    assert!(first.iter().all(|(_, o)| *o == StageOutcome::Ran));
    let hashes = artifact_hashes(&pa);

    let again = pa.run_all().unwrap();
    assert!(again.iter().all(|(_, o)| *o == StageOutcome::UpToDate));
    assert_eq!(artifact_hashes(&pa), hashes);

    let pb = tiny(b.path());
    pb.run_all().unwrap();
    assert_eq!(artifact_hashes(&pb), hashes, "independent run differs");

    // every provenance names its inputs by the hash they carry now
    for s in Stage::ALL {
        let prov = read_provenance(&pa.stage_dir(s)).unwrap().unwrap();
        assert_eq!(prov.inputs.len(), s.deps().len());
        for d in s.deps() {
            let dep = read_provenance(&pa.stage_dir(*d)).unwrap().unwrap();
            assert_eq!(prov.inputs[d.name()], dep.artifact_hash);
        }
        assert_eq!(prov.artifact_hash, hash_dir(&pa.stage_dir(s)).unwrap());
    }

    // a config change reruns the affected stage and everything downstream
    let mut changed = tiny(a.path());
    changed.config.merge_consis = 0.25;
    let out = changed.run_all().unwrap();
    for (s, o) in out {
        let expect = if matches!(s, Stage::MergeDpo | Stage::Evaluate) {
            StageOutcome::Ran
        } else {
            StageOutcome::UpToDate
        };
        assert_eq!(o, expect, "{s}");
    }

    // tampering with an artifact is detected
    let losses = pa.stage_dir(Stage::TrainSftIn).join("losses.txt");
    std::fs::write(&losses, "0\n").unwrap();
    assert!(!pa.is_current(Stage::TrainSftIn).unwrap());

    let mut forced = tiny(a.path());
    forced.force = true;
    let out = forced.run(&[Stage::GenData]).unwrap();
    assert_eq!(out, vec![(Stage::GenData, StageOutcome::Ran)]);
}

#[test]
fn dependency_rules() {
    let dir = tempfile::tempdir().unwrap();
    let p = tiny(dir.path());
    assert!(p.run(&[]).unwrap().is_empty());
    match p.run(&[Stage::TrainDpoConsis]) {
        Err(Error::MissingDependency { stage, missing }) => {
            assert_eq!(stage, "train-dpo-consis");
            assert_eq!(missing, "merge-lora");
        }
        other => panic!("expected a dependency error, got {other:?}"),
    }
    // nothing was written for the rejected plan
    assert!(!p.stage_dir(Stage::GenData).exists());
    let out = p.run(&[Stage::BuildTriplets, Stage::GenData]).unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(out[0].0, Stage::GenData);
    let tmp_left = std::fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".tmp"))
        .count();
    assert_eq!(tmp_left, 0);
}

#[test]
fn shipped_configs_validate() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["default.conf", "desk.conf"] {
        let c = RunConfig::load(&root.join(name)).unwrap();
        let v = c.violations();
        assert!(v.is_empty(), "{name}: {v:?}");
    }
    assert_eq!(RunConfig::load(&root.join("default.conf")).unwrap(), RunConfig::default());
    assert_eq!(RunConfig::load(&root.join("desk.conf")).unwrap(), RunConfig::desk());
}

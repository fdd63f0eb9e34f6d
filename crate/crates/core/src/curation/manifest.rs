//! On-disk dataset layout: `manifest.jsonl` plus `videos/*.lgt` and
//! `refs/*.lgt`, each reference with a `key: value` metadata sidecar.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{PairingMode, Reference, TagCode, Triplet};
use crate::error::{Error, Result};
use crate::latent::LatentVideo;
use crate::tensor_io::{read_sidecar, write_atomic, write_sidecar, Sidecar};
use crate::world::{Background, Pose, SceneScript, Shape, SubjectSpec, Texture};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRecord {
    pub path: String,
    pub spec: SubjectSpec,
    pub pose: Pose,
    pub background: Background,
    pub source_script_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub caption: String,
    pub video: String,
    pub references: Vec<ReferenceRecord>,
    pub pairing_mode: PairingMode,
    pub tag: String,
    pub source_script_id: String,
    pub script: SceneScript,
    pub seed: u64,
}

pub fn sidecar_path(tensor: &Path) -> PathBuf {
    let mut s = tensor.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

pub fn reference_sidecar(r: &Reference) -> Sidecar {
    let c = r.spec.color;
    Sidecar::from([
        ("shape".into(), r.spec.shape.name().into()),
        ("color".into(), format!("{},{},{}", c[0], c[1], c[2])),
        ("texture".into(), r.spec.texture.name().into()),
        ("scale".into(), r.spec.scale.to_string()),
        ("x".into(), r.pose.x.to_string()),
        ("y".into(), r.pose.y.to_string()),
        ("rotation".into(), r.pose.rotation.to_string()),
        ("background".into(), r.background.name().into()),
        ("source".into(), r.source_script_id.clone()),
    ])
}

/// Writes the reference latent and its sidecar.
pub fn save_reference(path: &Path, r: &Reference) -> Result<()> {
    r.latent.save(path)?;
    write_sidecar(&sidecar_path(path), &reference_sidecar(r))
}

/// Loads a reference latent plus its `.meta` sidecar.
pub fn load_reference(path: &Path) -> Result<Reference> {
    let meta_path = sidecar_path(path);
    let meta = read_sidecar(&meta_path)?;
    let bad = |message: String| Error::Format {
        path: meta_path.clone(),
        message,
    };
    let get = |k: &str| {
        meta.get(k)
            .map(String::as_str)
            .ok_or_else(|| bad(format!("missing key `{k}`")))
    };
    let num = |k: &str| -> Result<f32> {
        get(k)?
            .parse::<f32>()
            .map_err(|e| bad(format!("key `{k}`: {e}")))
    };
    let shape = Shape::from_name(get("shape")?).ok_or_else(|| bad("unknown shape".into()))?;
    let texture =
        Texture::from_name(get("texture")?).ok_or_else(|| bad("unknown texture".into()))?;
    let background = Background::from_name(get("background")?)
        .ok_or_else(|| bad("unknown background".into()))?;
    let color: Vec<f32> = get("color")?
        .split(',')
        .map(|v| v.trim().parse::<f32>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| bad(format!("key `color`: {e}")))?;
    let color: [f32; 3] = color
        .try_into()
        .map_err(|_| bad("`color` needs three components".into()))?;
    let rotation = get("rotation")?
        .parse::<i32>()
        .map_err(|e| bad(format!("key `rotation`: {e}")))?;
    let spec = SubjectSpec {
        shape,
        color,
        texture,
        scale: num("scale")?,
    };
    spec.validate()?;
    let latent = LatentVideo::load(path)?;
    if latent.frames() != 1 {
        return Err(Error::shape(format!(
            "reference {} has {} frames, expected 1",
            path.display(),
            latent.frames()
        )));
    }
    Ok(Reference {
        spec,
        pose: Pose::new(num("x")?, num("y")?, rotation),
        background,
        source_script_id: get("source")?.to_string(),
        latent,
    })
}

/// Writes every triplet under `dir` and returns the manifest path.
pub fn write_dataset(dir: &Path, triplets: &[Triplet]) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("videos"))?;
    fs::create_dir_all(dir.join("refs"))?;
    let mut lines = Vec::new();
    for t in triplets {
        let video = format!("videos/{}.lgt", t.id);
        t.video.save(&dir.join(&video))?;
        let mut references = Vec::with_capacity(t.references.len());
        for (i, r) in t.references.iter().enumerate() {
            let path = format!("refs/{}_{i}.lgt", t.id);
            save_reference(&dir.join(&path), r)?;
            references.push(ReferenceRecord {
                path,
                spec: r.spec,
                pose: r.pose,
                background: r.background,
                source_script_id: r.source_script_id.clone(),
            });
        }
        let rec = ManifestRecord {
            id: t.id.clone(),
            caption: t.caption.clone(),
            video,
            references,
            pairing_mode: t.pairing_mode,
            tag: t.tag.encoded(),
            source_script_id: t.source_script_id.clone(),
            script: t.script.clone(),
            seed: t.seed,
        };
        writeln!(lines, "{}", serde_json::to_string(&rec)?)?;
    }
    let path = dir.join("manifest.jsonl");
    write_atomic(&path, &lines)?;
    Ok(path)
}

/// Reads a manifest and loads every tensor it references (paths are
/// relative to the manifest's directory).
pub fn read_manifest(path: &Path) -> Result<Vec<Triplet>> {
    let text = fs::read_to_string(path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?;
        let references = rec
            .references
            .iter()
            .map(|r| {
                Ok(Reference {
                    spec: r.spec,
                    pose: r.pose,
                    background: r.background,
                    source_script_id: r.source_script_id.clone(),
                    latent: LatentVideo::load(&root.join(&r.path))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(Triplet {
            caption: rec.caption,
            video: LatentVideo::load(&root.join(&rec.video))?,
            references,
            pairing_mode: rec.pairing_mode,
            tag: TagCode::parse(&rec.tag)?,
            source_script_id: rec.source_script_id,
            script: rec.script,
            seed: rec.seed,
            id: rec.id,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curation::{make_in_pair, ScaleBand};
    use crate::world::{render_scene, SceneSampler, WorldConfig};

    #[test]
    fn dataset_round_trip() {
        let world = WorldConfig::default();
        let sampler = SceneSampler::new(world);
        let triplets: Vec<Triplet> = (0..40)
            .map(|s| sampler.sample(format!("r{s}"), s))
            .filter_map(|s| {
                let v = render_scene(&s, &world).unwrap();
                make_in_pair(&s, &v, ScaleBand::default(), &world).ok()
            })
            .take(3)
            .collect();
        assert_eq!(triplets.len(), 3);
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(dir.path(), &triplets).unwrap();
        assert_eq!(read_manifest(&manifest).unwrap(), triplets);

        let r = &triplets[0].references[0];
        let loaded =
            load_reference(&dir.path().join(format!("refs/{}_0.lgt", triplets[0].id))).unwrap();
        assert_eq!(&loaded, r);
    }
}

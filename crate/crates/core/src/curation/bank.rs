use std::collections::HashMap;

use super::{keyframe, Reference};
use crate::error::{Error, Result};
use crate::world::{Descriptor, SceneScript, WorldConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub descriptor: Descriptor,
    pub source_script_id: String,
    pub subject_index: usize,
    pub reference: Reference,
}

/// Exact nearest-neighbour index over subject descriptors.
///
/// Entries with bit-identical descriptors share a bucket, so a query costs
/// one distance per distinct descriptor instead of one per entry. Results
/// are ordered by `(distance, entry index)`, the same order a brute-force
/// scan produces.
#[derive(Debug, Clone, Default)]
pub struct RetrievalBank {
    entries: Vec<BankEntry>,
    buckets: Vec<(Descriptor, Vec<usize>)>,
}

fn bucket_key(d: &Descriptor) -> [u64; crate::world::DESCRIPTOR_LEN] {
    d.0.map(f64::to_bits)
}

impl RetrievalBank {
    /// One entry per subject of every script, cropped at the script's
    /// keyframe on the script's background.
    pub fn build(scripts: &[SceneScript], world: &WorldConfig) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        let mut entries = Vec::new();
        for script in scripts {
            if !seen.insert(script.id.as_str()) {
                return Err(Error::DuplicateScript(script.id.clone()));
            }
            let k = keyframe(script);
            for (i, s) in script.subjects.iter().enumerate() {
                entries.push(BankEntry {
                    descriptor: s.spec.descriptor(),
                    source_script_id: script.id.clone(),
                    subject_index: i,
                    reference: Reference::render(
                        s.spec,
                        s.trajectory.pose_at(k),
                        script.background,
                        script.id.clone(),
                        world,
                    )?,
                });
            }
        }
        Ok(Self::from_entries(entries))
    }

    pub fn from_entries(entries: Vec<BankEntry>) -> Self {
        let mut index: HashMap<[u64; crate::world::DESCRIPTOR_LEN], usize> = HashMap::new();
        let mut buckets: Vec<(Descriptor, Vec<usize>)> = Vec::new();
        for (i, e) in entries.iter().enumerate() {
            let b = *index.entry(bucket_key(&e.descriptor)).or_insert_with(|| {
                buckets.push((e.descriptor, Vec::new()));
                buckets.len() - 1
            });
            buckets[b].1.push(i);
        }
        Self { entries, buckets }
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The `k` entries nearest to `query`, skipping entries whose source
    /// script is `exclude`. Returns `(entry index, distance)`.
    pub fn query(&self, query: &Descriptor, k: usize, exclude: Option<&str>) -> Vec<(usize, f64)> {
        let mut ranked: Vec<(f64, usize)> = self
            .buckets
            .iter()
            .enumerate()
            .map(|(b, (d, _))| (query.distance(d), b))
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut out = Vec::with_capacity(k);
        let mut i = 0;
        while i < ranked.len() && out.len() < k {
            // buckets at equal distance are merged so ties go by entry index
            let dist = ranked[i].0;
            let mut group: Vec<usize> = Vec::new();
            while i < ranked.len() && ranked[i].0 == dist {
                group.extend(
                    self.buckets[ranked[i].1]
                        .1
                        .iter()
                        .copied()
                        .filter(|&e| Some(self.entries[e].source_script_id.as_str()) != exclude),
                );
                i += 1;
            }
            group.sort_unstable();
            out.extend(group.into_iter().take(k - out.len()).map(|e| (e, dist)));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{Identity, SceneSampler};
    use proptest::prelude::*;

    fn brute_force(
        bank: &RetrievalBank,
        q: &Descriptor,
        k: usize,
        exclude: Option<&str>,
    ) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = bank
            .entries()
            .iter()
            .enumerate()
            .filter(|(_, e)| Some(e.source_script_id.as_str()) != exclude)
            .map(|(i, e)| (i, q.distance(&e.descriptor)))
            .collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    fn small_bank() -> (RetrievalBank, Vec<SceneScript>) {
        let world = WorldConfig::default();
        let sampler = SceneSampler::new(world);
        let scripts: Vec<SceneScript> = (0..60)
            .map(|s| sampler.sample(format!("b{s}"), s))
            .collect();
        (RetrievalBank::build(&scripts, &world).unwrap(), scripts)
    }

    #[test]
    fn duplicate_script_ids_are_rejected() {
        let world = WorldConfig::default();
        let sampler = SceneSampler::new(world);
        let s = sampler.sample("same", 1);
        assert!(matches!(
            RetrievalBank::build(&[s.clone(), s], &world),
            Err(Error::DuplicateScript(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn index_agrees_with_brute_force(id in 0usize..256, k in 1usize..40, ex in 0usize..61) {
            let (bank, scripts) = small_bank();
            let q = Identity::from_index(id).descriptor();
            let exclude = scripts.get(ex).map(|s| s.id.as_str());
            prop_assert_eq!(bank.query(&q, k, exclude), brute_force(&bank, &q, k, exclude));
        }
    }
}

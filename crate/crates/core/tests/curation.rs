use proptest::prelude::*;

use s2vlab::curation::{
    build_dataset, read_manifest, write_dataset, CurationConfig, PairingMode, TagCode,
};
use s2vlab::world::{SceneSampler, WorldConfig};

fn level() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["a", "b", "ab", "c"]).prop_map(String::from)
}

proptest! {
    #[test]
    fn tag_prefix_law(x in prop::array::uniform5(level()), y in prop::array::uniform5(level())) {
        let (a, b) = (TagCode::new(x.clone()).unwrap(), TagCode::new(y.clone()).unwrap());
        for k in 1..=TagCode::LEVELS {
            prop_assert_eq!(x[..k] == y[..k], a.prefix(k) == b.prefix(k));
            prop_assert!(a.has_prefix(&a.prefix(k)));
        }
    }
}

#[test]
fn dataset_survives_a_disk_round_trip() {
    let sampler = SceneSampler::new(WorldConfig::default());
    let cfg = CurationConfig {
        in_pair: 12,
        cross_pair: 12,
        pool_per_identity: 1,
        seed: 3,
        ..CurationConfig::default()
    };
    let ds = build_dataset(&sampler, &cfg).unwrap();
    assert_eq!(ds.triplets.len(), 24);
    let again = build_dataset(&sampler, &cfg).unwrap();
    assert_eq!(again.triplets, ds.triplets);
    for t in &ds.triplets {
        let own = t.references.iter().all(|r| r.source_script_id == t.source_script_id);
        let foreign = t.references.iter().all(|r| r.source_script_id != t.source_script_id);
        match t.pairing_mode {
            PairingMode::InPair => assert!(own),
            PairingMode::CrossPair => assert!(foreign),
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), &ds.triplets).unwrap();
    assert_eq!(read_manifest(&manifest).unwrap(), ds.triplets);
}

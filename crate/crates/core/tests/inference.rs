use proptest::prelude::*;

use s2vlab::dit::{DitConfig, ModelWeights};
use s2vlab::inference::{progress, sample, CfgSchedule, SampleRequest};
use s2vlab::world::WorldConfig;

proptest! {
    #[test]
    fn linear_schedules_hit_their_endpoints(
        a in 0.0f64..8.0, b in 0.0f64..8.0, c in 0.0f64..8.0, d in 0.0f64..8.0, s in 0.0f64..=1.0,
    ) {
        let sch = CfgSchedule::Linear { w1: (a, b), w2: (c, d) };
        prop_assert_eq!(sch.at(0.0), (a, c));
        prop_assert_eq!(sch.at(1.0), (b, d));
        let (w1, w2) = sch.at(s);
        prop_assert!(w1 >= a.min(b) - 1e-12 && w1 <= a.max(b) + 1e-12);
        prop_assert!(w2 >= c.min(d) - 1e-12 && w2 <= c.max(d) + 1e-12);
        let text = sch.to_string();
        prop_assert_eq!(text.parse::<CfgSchedule>().unwrap(), sch);
    }
}

#[test]
fn progress_spans_zero_to_one() {
    assert_eq!(progress(0, 16), 0.0);
    assert_eq!(progress(15, 16), 1.0);
    assert_eq!(progress(0, 1), 0.0);
}

#[test]
fn sampling_is_seed_deterministic() {
    let world = WorldConfig {
        frames: 2,
        height: 8,
        width: 8,
    };
    let mut cfg = DitConfig::for_world(&world);
    cfg.hidden = 16;
    cfg.depth = 2;
    cfg.heads = 2;
    let w = ModelWeights::random(cfg, 1, 0.2).unwrap();
    let req = |seed| SampleRequest {
        caption: "a red plain circle moves up on a gray background".into(),
        references: vec![],
        steps: 3,
        seed,
        schedule: CfgSchedule::dynamic_default(),
        dims: world.video_dims(),
        ref_rope_offset: 0,
    };
    let a = sample(&w, &req(4)).unwrap();
    assert_eq!(a, sample(&w, &req(4)).unwrap());
    assert_ne!(a, sample(&w, &req(5)).unwrap());
}

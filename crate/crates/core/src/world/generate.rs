use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    Background, SceneScript, ScriptSubject, Shape, SubjectSpec, Texture, Trajectory, WorldConfig,
    MAX_SUBJECTS, PALETTE, ROTATION_STEPS, SCALE_GRID,
};

/// Draws random scene scripts whose subjects stay fully inside the frame and
/// never touch each other, so every subject is visible in every frame.
#[derive(Debug, Clone)]
pub struct SceneSampler {
    pub world: WorldConfig,
    /// Relative frequency of scenes with 1, 2, 3 and 4 subjects.
    pub subject_count_weights: [f64; MAX_SUBJECTS],
    pub moving_prob: f64,
    pub spinning_prob: f64,
}

const PLACEMENT_ATTEMPTS: usize = 200;
/// Whole-scene redraws when some subject could not be placed.
const SCENE_ATTEMPTS: usize = 8;
/// Minimum gap in pixels between two subjects' bounding circles. Wide
/// enough that anti-aliased edges never end up 8-adjacent, which would fuse
/// the two into one component for the oracle.
const SUBJECT_GAP: f32 = 2.5;

impl SceneSampler {
    pub fn new(world: WorldConfig) -> Self {
        Self {
            world,
            subject_count_weights: [0.35, 0.35, 0.2, 0.1],
            moving_prob: 0.75,
            spinning_prob: 0.3,
        }
    }

    pub fn sample(&self, id: impl Into<String>, seed: u64) -> SceneScript {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total: f64 = self.subject_count_weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut count = MAX_SUBJECTS;
        for (i, w) in self.subject_count_weights.iter().enumerate() {
            if u < *w {
                count = i + 1;
                break;
            }
            u -= w;
        }
        self.sample_inner(id.into(), seed, count, &mut rng)
    }

    pub fn sample_with_count(&self, id: impl Into<String>, seed: u64, count: usize) -> SceneScript {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_inner(id.into(), seed, count.clamp(1, MAX_SUBJECTS), &mut rng)
    }

    fn sample_inner(
        &self,
        id: String,
        seed: u64,
        count: usize,
        rng: &mut ChaCha8Rng,
    ) -> SceneScript {
        let mut shapes = Shape::ALL.to_vec();
        shapes.shuffle(rng);
        let background = Background::ALL[rng.random_range(0..Background::ALL.len())];
        // crowded scenes use smaller subjects
        let max_scale_index = match count {
            1 => SCALE_GRID.len() - 1,
            2 => 6,
            3 => 3,
            _ => 2,
        };
        let frames = self.world.frames;
        let mut subjects: Vec<ScriptSubject> = Vec::new();
        for _ in 0..SCENE_ATTEMPTS {
            let attempt = self.place_subjects(&shapes[..count], max_scale_index, rng);
            if attempt.len() > subjects.len() {
                subjects = attempt;
            }
            if subjects.len() == count {
                break;
            }
        }
        SceneScript {
            id,
            subjects,
            background,
            frames,
            seed,
        }
    }

    fn place_subjects(
        &self,
        shapes: &[Shape],
        max_scale_index: usize,
        rng: &mut ChaCha8Rng,
    ) -> Vec<ScriptSubject> {
        let frames = self.world.frames;
        let mut subjects: Vec<ScriptSubject> = Vec::new();
        for &shape in shapes {
            let color = rng.random_range(0..PALETTE.len());
            let texture = Texture::ALL[rng.random_range(0..Texture::ALL.len())];
            let mut placed = None;
            for attempt in 0..PLACEMENT_ATTEMPTS {
                let scale = SCALE_GRID[rng.random_range(0..=max_scale_index)];
                let spec = SubjectSpec::new(shape, color, texture, scale);
                let mut velocity = [0, 0];
                // late attempts fall back to still subjects, which pack easier
                let may_move = attempt < PLACEMENT_ATTEMPTS / 2;
                if rng.random_bool(self.moving_prob) && may_move {
                    while velocity == [0, 0] {
                        velocity = [rng.random_range(-1..=1), rng.random_range(-1..=1)];
                    }
                }
                let rotation_rate = if rng.random_bool(self.spinning_prob) {
                    if rng.random_bool(0.5) {
                        1
                    } else {
                        -1
                    }
                } else {
                    0
                };
                let radius = spec.radius_px(self.world.width);
                let mut start = [0i32; 2];
                let extent = [self.world.width as f32, self.world.height as f32];
                let mut ok = true;
                for axis in 0..2 {
                    let mut range = start_range(radius, velocity[axis], frames, extent[axis]);
                    if range.is_none() {
                        velocity[axis] = 0;
                        range = start_range(radius, 0, frames, extent[axis]);
                    }
                    match range {
                        Some((lo, hi)) => start[axis] = rng.random_range(lo..=hi),
                        None => ok = false,
                    }
                }
                if !ok {
                    continue;
                }
                let candidate = ScriptSubject {
                    spec,
                    trajectory: Trajectory {
                        start,
                        velocity,
                        start_rotation: rng.random_range(0..ROTATION_STEPS),
                        rotation_rate,
                    },
                };
                if subjects
                    .iter()
                    .all(|other| apart(other, &candidate, frames, self.world.width))
                {
                    placed = Some(candidate);
                    break;
                }
            }
            match placed {
                Some(s) => subjects.push(s),
                None => break,
            }
        }
        subjects
    }
}

/// Integer start coordinates keeping a disc of `radius` inside `[0, extent]`.
fn start_range(radius: f32, velocity: i32, frames: usize, extent: f32) -> Option<(i32, i32)> {
    let travel = velocity * (frames as i32 - 1);
    let lo = (radius - travel.min(0) as f32).ceil() as i32;
    let hi = (extent - radius - travel.max(0) as f32).floor() as i32;
    (lo <= hi).then_some((lo, hi))
}

fn apart(a: &ScriptSubject, b: &ScriptSubject, frames: usize, width: usize) -> bool {
    let min = a.spec.radius_px(width) + b.spec.radius_px(width) + SUBJECT_GAP;
    (0..frames).all(|f| {
        let (p, q) = (a.trajectory.pose_at(f), b.trajectory.pose_at(f));
        ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt() >= min
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_are_valid_and_deterministic() {
        let sampler = SceneSampler::new(WorldConfig::default());
        for seed in 0..200 {
            let s = sampler.sample(format!("s{seed}"), seed);
            s.validate(&sampler.world).unwrap();
            assert_eq!(s, sampler.sample(format!("s{seed}"), seed));
        }
    }

    #[test]
    fn crowded_scenes_still_place_subjects() {
        let sampler = SceneSampler::new(WorldConfig::default());
        let full = (0..50)
            .filter(|&seed| sampler.sample_with_count("x", seed, 4).subjects.len() == 4)
            .count();
        assert!(full >= 40, "only {full}/50 four-subject scenes");
    }
}

//! Navigation episodes: start pose, goal, sound schedule and category splits.

use std::io::{BufRead, Write};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{
    render_audio, render_visual, ActionField, Action, AudioParams, AudioSignal, Cell,
    DistanceField, Heading, Pose, Scene, SemanticObject, SoundSource, NUM_CATEGORIES,
};

pub const DURATION_MEAN: f64 = 15.0;
pub const DURATION_STD: f64 = 9.0;
pub const DURATION_MIN: u32 = 5;
pub const DURATION_MAX: u32 = 500;
pub const DEFAULT_MIN_START_DISTANCE: u32 = 4;
pub const DEFAULT_SIGNATURE_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Heard,
    Unheard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Heard,
    Unheard,
    Distractor,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Heard, Regime::Unheard, Regime::Distractor];

    pub fn split(self) -> Split {
        match self {
            Regime::Heard => Split::Heard,
            Regime::Unheard | Regime::Distractor => Split::Unheard,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::Heard => "heard",
            Regime::Unheard => "unheard",
            Regime::Distractor => "distractor",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heard" => Ok(Regime::Heard),
            "unheard" => Ok(Regime::Unheard),
            "distractor" | "unheard+distractor" => Ok(Regime::Distractor),
            _ => Err(Error::Config(format!("unknown regime {s:?}"))),
        }
    }
}

/// Category sets for training and testing plus each category's timbre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train_categories: Vec<usize>,
    pub test_categories: Vec<usize>,
    pub category_signatures: Vec<Vec<f64>>,
}

impl SplitConfig {
    /// Random unit-norm signatures, one per category.
    pub fn random_signatures(seed: u64, dim: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        (0..NUM_CATEGORIES)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect()
            })
            .collect()
    }

    /// Held-out categories are a seeded random subset of size `num_test`.
    pub fn unheard(seed: u64, num_test: usize, dim: usize) -> Result<Self> {
        if num_test == 0 || num_test >= NUM_CATEGORIES {
            return Err(Error::Config(format!(
                "held-out category count {num_test} must be in [1, {})",
                NUM_CATEGORIES
            )));
        }
        let mut cats: Vec<usize> = (0..NUM_CATEGORIES).collect();
        cats.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
        let mut test = cats[..num_test].to_vec();
        let mut train = cats[num_test..].to_vec();
        test.sort();
        train.sort();
        Ok(Self {
            train_categories: train,
            test_categories: test,
            category_signatures: Self::random_signatures(seed, dim),
        })
    }

    /// Heard variant of this config: test set equals the training set.
    pub fn heard(&self) -> Self {
        Self {
            test_categories: self.train_categories.clone(),
            ..self.clone()
        }
    }

    pub fn is_heard(&self) -> bool {
        self.train_categories == self.test_categories
    }

    pub fn is_unheard(&self) -> bool {
        self.train_categories
            .iter()
            .all(|c| !self.test_categories.contains(c))
    }

    pub fn signature_dim(&self) -> usize {
        self.category_signatures.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.category_signatures.len() != NUM_CATEGORIES {
            return Err(Error::Config("one signature per category required".into()));
        }
        if self.train_categories.is_empty() || self.test_categories.is_empty() {
            return Err(Error::Config("category sets must be non-empty".into()));
        }
        if !(self.is_heard() || self.is_unheard()) {
            return Err(Error::Config(
                "category sets must be identical (heard) or disjoint (unheard)".into(),
            ));
        }
        Ok(())
    }

    /// Goal categories for episodes of `regime`. Heard episodes draw from the
    /// training set; unheard ones require a disjoint test set.
    pub fn categories_for(&self, regime: Regime) -> Result<&[usize]> {
        match regime.split() {
            Split::Heard => Ok(&self.train_categories),
            Split::Unheard if self.is_unheard() => Ok(&self.test_categories),
            Split::Unheard => Err(Error::Sampling(
                "unheard regime needs disjoint train/test categories".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistractorSpec {
    pub object_id: usize,
    pub onset: u32,
    pub duration: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub scene_seed: u64,
    pub start: Pose,
    pub goal_object_id: usize,
    pub sound_onset: u32,
    pub sound_duration: u32,
    pub distractor: Option<DistractorSpec>,
    pub split: Split,
    pub target_onehot: Option<Vec<f64>>,
}

impl EpisodeSpec {
    /// First step at which the goal is silent.
    pub fn sound_end(&self) -> u32 {
        self.sound_onset + self.sound_duration
    }

    pub fn validate(&self, scene: &Scene) -> Result<()> {
        let goal = scene
            .object(self.goal_object_id)
            .ok_or_else(|| Error::Input("goal object missing from scene".into()))?;
        if !goal.is_sound_source {
            return Err(Error::Input("goal object is not a sound source".into()));
        }
        if !(DURATION_MIN..=DURATION_MAX).contains(&self.sound_duration) {
            return Err(Error::Input("sound duration out of range".into()));
        }
        if self.distractor.is_some() != self.target_onehot.is_some() {
            return Err(Error::Input("target one-hot must accompany a distractor".into()));
        }
        if let Some(d) = &self.distractor {
            let obj = scene
                .object(d.object_id)
                .ok_or_else(|| Error::Input("distractor object missing".into()))?;
            if obj.category == goal.category {
                return Err(Error::Input("distractor shares the goal category".into()));
            }
        }
        if !scene.is_navigable(self.start.cell()) {
            return Err(Error::Input("start pose is blocked".into()));
        }
        Ok(())
    }
}

/// `round(clamp(Normal(15, 9), 5, 500))`, one step per second.
pub fn sample_duration<R: Rng + ?Sized>(rng: &mut R) -> u32 {
    let normal = Normal::new(DURATION_MEAN, DURATION_STD).expect("valid normal");
    let v: f64 = normal.sample(rng);
    v.clamp(DURATION_MIN as f64, DURATION_MAX as f64).round() as u32
}

fn onehot(index: usize, len: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    v
}

/// Draws one episode in `scene` for `regime`.
pub fn sample_episode<R: Rng + ?Sized>(
    scene: &Scene,
    split_cfg: &SplitConfig,
    regime: Regime,
    min_start_distance: u32,
    rng: &mut R,
) -> Result<EpisodeSpec> {
    let allowed = split_cfg.categories_for(regime)?;
    let mut goals: Vec<&SemanticObject> = scene
        .objects
        .iter()
        .filter(|o| o.is_sound_source && allowed.contains(&o.category))
        .collect();
    goals.shuffle(rng);
    for goal in goals {
        let field = DistanceField::from_cell(scene, goal.cell);
        let starts: Vec<Cell> = scene
            .navigable_cells()
            .filter(|&c| field.get(c).is_some_and(|d| d >= min_start_distance))
            .collect();
        let Some(&start) = starts.choose(rng) else {
            continue;
        };
        let heading = Heading::from_index(rng.random_range(0..4));
        let sound_duration = sample_duration(rng);
        let (distractor, target_onehot) = if regime == Regime::Distractor {
            let others: Vec<&SemanticObject> = scene
                .objects
                .iter()
                .filter(|o| o.is_sound_source && o.category != goal.category)
                .collect();
            let other = others
                .choose(rng)
                .ok_or_else(|| Error::Sampling("no distractor object available".into()))?;
            let d = DistractorSpec {
                object_id: other.id,
                onset: 0,
                duration: sample_duration(rng),
            };
            (Some(d), Some(onehot(goal.category, NUM_CATEGORIES)))
        } else {
            (None, None)
        };
        return Ok(EpisodeSpec {
            scene_seed: scene.seed,
            start: Pose::new(start.x, start.y, heading),
            goal_object_id: goal.id,
            sound_onset: 0,
            sound_duration,
            distractor,
            split: regime.split(),
            target_onehot,
        });
    }
    Err(Error::Sampling(format!(
        "no placeable goal for {} in scene {}",
        regime.name(),
        scene.seed
    )))
}

/// Sound sources active at step `t`, as `(object id, gain)`.
pub fn active_sources(spec: &EpisodeSpec, t: u32) -> Vec<(usize, f64)> {
    let mut out = Vec::with_capacity(2);
    if spec.sound_onset <= t && t < spec.sound_onset + spec.sound_duration {
        out.push((spec.goal_object_id, 1.0));
    }
    if let Some(d) = &spec.distractor {
        if d.onset <= t && t < d.onset + d.duration {
            out.push((d.object_id, 1.0));
        }
    }
    out
}

/// Per-episode runtime view: the spec bound to its scene with cached fields.
#[derive(Debug, Clone)]
pub struct Episode<'a> {
    pub scene: &'a Scene,
    pub spec: EpisodeSpec,
    pub goal: &'a SemanticObject,
    pub goal_field: DistanceField,
    pub goal_actions: ActionField,
    distractor: Option<(&'a SemanticObject, DistanceField)>,
}

impl<'a> Episode<'a> {
    pub fn new(scene: &'a Scene, spec: EpisodeSpec) -> Result<Self> {
        spec.validate(scene)?;
        let goal = scene.object(spec.goal_object_id).expect("validated");
        let distractor = spec.distractor.map(|d| {
            let obj = scene.object(d.object_id).expect("validated");
            (obj, DistanceField::from_cell(scene, obj.cell))
        });
        Ok(Self {
            scene,
            goal,
            goal_field: DistanceField::from_cell(scene, goal.cell),
            goal_actions: ActionField::new(scene, goal.cell),
            distractor,
            spec,
        })
    }

    pub fn goal_distance(&self, pose: &Pose) -> f64 {
        self.goal_field.distance(pose.cell())
    }

    pub fn shortest_actions(&self) -> u32 {
        self.goal_actions.cost(self.spec.start).unwrap_or(0)
    }

    pub fn sources_at(&self, t: u32) -> Vec<SoundSource<'_>> {
        active_sources(&self.spec, t)
            .into_iter()
            .map(|(id, gain)| {
                if id == self.goal.id {
                    SoundSource {
                        object: self.goal,
                        gain,
                        field: &self.goal_field,
                    }
                } else {
                    let (obj, field) = self.distractor.as_ref().expect("distractor source");
                    SoundSource {
                        object: obj,
                        gain,
                        field,
                    }
                }
            })
            .collect()
    }

    pub fn hear<R: Rng + ?Sized>(
        &self,
        pose: &Pose,
        t: u32,
        signatures: &[Vec<f64>],
        audio: &AudioParams,
        rng: &mut R,
    ) -> AudioSignal {
        render_audio(pose, &self.sources_at(t), signatures, audio, rng)
    }

    pub fn see(&self, pose: &Pose) -> Vec<f64> {
        render_visual(self.scene, pose)
    }

    /// Primitive action count of the shortest path from `pose`.
    pub fn actions_to_goal(&self, pose: Pose) -> u32 {
        self.goal_actions.cost(pose).unwrap_or(u32::MAX)
    }

    pub fn oracle_action(&self, pose: Pose) -> Action {
        self.goal_actions
            .next_action(self.scene, pose)
            .unwrap_or(Action::Stop)
    }
}

pub fn write_episodes<W: Write>(mut out: W, specs: &[EpisodeSpec]) -> Result<()> {
    for s in specs {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n").map_err(|e| Error::io("<episodes>", e))?;
    }
    Ok(())
}

pub fn read_episodes<R: BufRead>(input: R) -> Result<Vec<EpisodeSpec>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<episodes>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_scene, SceneParams};

    fn setup() -> (Scene, SplitConfig) {
        let scene = generate_scene(5, &SceneParams::default()).unwrap();
        let split = SplitConfig::unheard(1, 6, DEFAULT_SIGNATURE_DIM).unwrap();
        (scene, split)
    }

    #[test]
    fn split_sets_are_disjoint_or_identical() {
        let (_, split) = setup();
        assert!(split.is_unheard() && !split.is_heard());
        split.validate().unwrap();
        let heard = split.heard();
        assert!(heard.is_heard());
        heard.validate().unwrap();
        assert!(heard.categories_for(Regime::Unheard).is_err());
    }

    #[test]
    fn unheard_goals_come_from_test_categories() {
        let (scene, split) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let spec = sample_episode(&scene, &split, Regime::Unheard, 4, &mut rng).unwrap();
            let cat = scene.object(spec.goal_object_id).unwrap().category;
            assert!(split.test_categories.contains(&cat));
            assert!(spec.distractor.is_none() && spec.target_onehot.is_none());
            spec.validate(&scene).unwrap();
        }
    }

    #[test]
    fn heard_goals_come_from_train_categories() {
        let (scene, split) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let spec = sample_episode(&scene, &split, Regime::Heard, 4, &mut rng).unwrap();
            let cat = scene.object(spec.goal_object_id).unwrap().category;
            assert!(split.train_categories.contains(&cat));
        }
    }

    #[test]
    fn distractor_episodes_carry_a_single_hot_target() {
        let (scene, split) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let spec = sample_episode(&scene, &split, Regime::Distractor, 4, &mut rng).unwrap();
            let target = spec.target_onehot.as_ref().unwrap();
            assert_eq!(target.iter().filter(|v| **v == 1.0).count(), 1);
            assert_eq!(target.iter().sum::<f64>(), 1.0);
            let goal_cat = scene.object(spec.goal_object_id).unwrap().category;
            assert_eq!(target[goal_cat], 1.0);
            spec.validate(&scene).unwrap();
        }
    }

    #[test]
    fn start_is_far_enough_from_goal() {
        let (scene, split) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let spec = sample_episode(&scene, &split, Regime::Heard, 4, &mut rng).unwrap();
            let goal = scene.object(spec.goal_object_id).unwrap().cell;
            let d = crate::world::geodesic_distance(&scene, spec.start.cell(), goal).unwrap();
            assert!(d >= 4.0);
        }
    }

    #[test]
    fn unplaceable_goal_is_a_sampling_error() {
        let (scene, split) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let err = sample_episode(&scene, &split, Regime::Heard, 10_000, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Sampling(_)));
    }

    #[test]
    fn sampling_is_reproducible() {
        let (scene, split) = setup();
        let a = sample_episode(&scene, &split, Regime::Distractor, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_episode(&scene, &split, Regime::Distractor, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sound_schedule_boundaries() {
        let spec = EpisodeSpec {
            scene_seed: 0,
            start: Pose::new(1, 1, Heading::N),
            goal_object_id: 3,
            sound_onset: 0,
            sound_duration: 12,
            distractor: Some(DistractorSpec {
                object_id: 5,
                onset: 0,
                duration: 20,
            }),
            split: Split::Unheard,
            target_onehot: Some(onehot(1, NUM_CATEGORIES)),
        };
        assert_eq!(active_sources(&spec, 0), vec![(3, 1.0), (5, 1.0)]);
        assert_eq!(active_sources(&spec, 11), vec![(3, 1.0), (5, 1.0)]);
        assert_eq!(active_sources(&spec, 12), vec![(5, 1.0)]);
        assert!(active_sources(&spec, 20).is_empty());
    }

    #[test]
    fn episodes_round_trip_through_json_lines() {
        let (scene, split) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let specs: Vec<EpisodeSpec> = (0..5)
            .map(|_| sample_episode(&scene, &split, Regime::Distractor, 4, &mut rng).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_episodes(&mut buf, &specs).unwrap();
        assert_eq!(buf.iter().filter(|b| **b == b'\n').count(), 5);
        assert_eq!(read_episodes(&buf[..]).unwrap(), specs);
    }
}

//! Observation encoding, bounded memory, and the goal descriptor estimator.

use std::collections::VecDeque;
use std::f64::consts::{FRAC_PI_2, PI};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::episode::{Episode, SplitConfig};
use crate::error::{Error, Result};
use crate::nn::{softmax, Adam, AdamConfig, Graph, Grads, ParamId, ParamStore};
use crate::world::{
    Action, AudioParams, AudioSignal, DistanceField, Heading, Pose, Scene, SoundSource,
    NUM_CATEGORIES, VISUAL_LEN,
};

/// Blend weight of a fresh audio estimate while the goal is audible.
pub const FUSION_WEIGHT: f64 = 0.5;
/// Locations are divided by this before entering a network.
pub const LOCATION_SCALE: f64 = 10.0;
/// audible flag, intensity, balance, attenuation.
pub const AUDIO_SCALARS: usize = 4;
pub const POSE_DELTA_DIM: usize = 3;

/// Agent-frame coordinates of a world offset: x to the right, y forward.
pub fn to_agent_frame(heading: Heading, dx: f64, dy: f64) -> [f64; 2] {
    let (fx, fy) = heading.delta();
    let (rx, ry) = heading.right().delta();
    [dx * rx as f64 + dy * ry as f64, dx * fx as f64 + dy * fy as f64]
}

/// Counter-clockwise rotation from heading `a` to heading `b`, in (-pi, pi].
pub fn heading_change(a: Heading, b: Heading) -> f64 {
    match (b.index() + 4 - a.index()) % 4 {
        0 => 0.0,
        1 => -FRAC_PI_2,
        2 => PI,
        _ => FRAC_PI_2,
    }
}

/// Rigid motion between consecutive poses, expressed in the earlier frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseChange {
    pub dx: f64,
    pub dy: f64,
    /// Counter-clockwise turn in radians.
    pub dtheta: f64,
}

impl PoseChange {
    pub const IDENTITY: PoseChange = PoseChange {
        dx: 0.0,
        dy: 0.0,
        dtheta: 0.0,
    };

    pub fn between(prev: &Pose, next: &Pose) -> Self {
        let [dx, dy] = to_agent_frame(
            prev.heading,
            (next.x - prev.x) as f64,
            (next.y - prev.y) as f64,
        );
        Self {
            dx,
            dy,
            dtheta: heading_change(prev.heading, next.heading),
        }
    }
}

/// Pose relative to the episode start: (dx, dy, dheading) in the start frame.
pub fn pose_delta(start: &Pose, pose: &Pose) -> [f64; 3] {
    let c = PoseChange::between(start, pose);
    [c.dx, c.dy, c.dtheta]
}

/// Scalar summary plus normalized timbre. All zero when silent.
pub fn audio_features(audio: &AudioSignal) -> Vec<f64> {
    let dim = audio.signature.len();
    let mut out = vec![0.0; AUDIO_SCALARS + dim];
    let i = audio.intensity();
    if !audio.audible || i <= 0.0 {
        return out;
    }
    out[0] = 1.0;
    out[1] = i;
    out[2] = (audio.right - audio.left) / i;
    out[3] = -i.ln() / 4.0;
    let norm = audio.signature.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for (o, s) in out[AUDIO_SCALARS..].iter_mut().zip(&audio.signature) {
            *o = s / norm;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationEmbedding {
    pub visual: Vec<f64>,
    pub audio: AudioSignal,
    /// `None` before the first action.
    pub prev_action: Option<Action>,
    pub pose_delta: [f64; 3],
    pub target: Option<Vec<f64>>,
}

impl ObservationEmbedding {
    pub fn dim(signature_dim: usize) -> usize {
        VISUAL_LEN + AUDIO_SCALARS + signature_dim + Action::COUNT + POSE_DELTA_DIM + NUM_CATEGORIES
    }

    pub fn features(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::dim(self.audio.signature.len()));
        out.extend_from_slice(&self.visual);
        out.extend(audio_features(&self.audio));
        let mut act = [0.0; Action::COUNT];
        if let Some(a) = self.prev_action {
            act[a.index()] = 1.0;
        }
        out.extend(act);
        out.push(self.pose_delta[0] / LOCATION_SCALE);
        out.push(self.pose_delta[1] / LOCATION_SCALE);
        out.push(self.pose_delta[2] / PI);
        match &self.target {
            Some(t) => out.extend_from_slice(t),
            None => out.extend([0.0; NUM_CATEGORIES]),
        }
        out
    }
}

/// Renders and packs everything the agent perceives at step `t`.
pub fn encode_observation<R: Rng + ?Sized>(
    episode: &Episode<'_>,
    pose: &Pose,
    t: u32,
    prev_action: Option<Action>,
    signatures: &[Vec<f64>],
    audio: &AudioParams,
    rng: &mut R,
) -> ObservationEmbedding {
    ObservationEmbedding {
        visual: episode.see(pose),
        audio: episode.hear(pose, t, signatures, audio, rng),
        prev_action,
        pose_delta: pose_delta(&episode.spec.start, pose),
        target: episode.spec.target_onehot.clone(),
    }
}

/// FIFO buffer of at most `capacity` items.
#[derive(Debug, Clone)]
pub struct Memory<T> {
    items: VecDeque<T>,
    capacity: usize,
}

impl<T> Memory<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            items: VecDeque::with_capacity(capacity.min(1024)),
            capacity,
        }
    }

    pub fn push(&mut self, item: T) {
        if self.capacity == 0 {
            return;
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalDescriptor {
    /// Agent frame: x to the right, y forward, in cells.
    pub location: [f64; 2],
    pub category_probs: Vec<f64>,
}

impl GoalDescriptor {
    pub fn uninformed() -> Self {
        Self {
            location: [0.0, 0.0],
            category_probs: vec![1.0 / NUM_CATEGORIES as f64; NUM_CATEGORIES],
        }
    }

    pub const DIM: usize = 2 + NUM_CATEGORIES;

    pub fn features(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::DIM);
        out.push(self.location[0] / LOCATION_SCALE);
        out.push(self.location[1] / LOCATION_SCALE);
        out.extend_from_slice(&self.category_probs);
        out
    }

    /// Moves the location into the frame reached after `change`.
    pub fn propagate(&self, change: &PoseChange) -> Self {
        let x = self.location[0] - change.dx;
        let y = self.location[1] - change.dy;
        let (s, c) = (-change.dtheta).sin_cos();
        Self {
            location: [c * x - s * y, s * x + c * y],
            category_probs: self.category_probs.clone(),
        }
    }
}

/// Blends a fresh estimate into the propagated previous descriptor.
pub fn fuse_goal(
    prev: &GoalDescriptor,
    estimate: &GoalDescriptor,
    change: &PoseChange,
    audible: bool,
) -> GoalDescriptor {
    let carried = prev.propagate(change);
    if !audible {
        return carried;
    }
    let w = FUSION_WEIGHT;
    let location = [
        w * estimate.location[0] + (1.0 - w) * carried.location[0],
        w * estimate.location[1] + (1.0 - w) * carried.location[1],
    ];
    let mut probs: Vec<f64> = estimate
        .category_probs
        .iter()
        .zip(&carried.category_probs)
        .map(|(a, b)| (w * a + (1.0 - w) * b).max(0.0))
        .collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    GoalDescriptor {
        location,
        category_probs: probs,
    }
}

/// One supervised example for the goal estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioSample {
    pub audio: AudioSignal,
    pub location: [f64; 2],
    pub category: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub hidden: usize,
    pub lr: f64,
    pub batch: usize,
    pub classifier_epochs: usize,
    pub regressor_epochs: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            lr: 1e-3,
            batch: 32,
            classifier_epochs: 10,
            regressor_epochs: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct ClassifierIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct RegressorIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Category classifier on the timbre and location regressor on all audio cues.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoalEstimator {
    pub classifier: ParamStore,
    pub regressor: ParamStore,
    signature_dim: usize,
    cls: ClassifierIds,
    reg: RegressorIds,
}

impl GoalEstimator {
    pub fn new<R: Rng + ?Sized>(signature_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut classifier = ParamStore::new();
        let cls = ClassifierIds {
            w: classifier.zeros("cls.w", NUM_CATEGORIES, signature_dim),
            b: classifier.zeros("cls.b", NUM_CATEGORIES, 1),
        };
        let mut regressor = ParamStore::new();
        let inputs = AUDIO_SCALARS + signature_dim;
        let reg = RegressorIds {
            w1: regressor.normal("reg.w1", hidden, inputs, 1.0, rng),
            b1: regressor.zeros("reg.b1", hidden, 1),
            w2: regressor.normal("reg.w2", 2, hidden, 1.0, rng),
            b2: regressor.zeros("reg.b2", 2, 1),
        };
        Self {
            classifier,
            regressor,
            signature_dim,
            cls,
            reg,
        }
    }

    pub fn signature_dim(&self) -> usize {
        self.signature_dim
    }

    fn timbre(&self, audio: &AudioSignal) -> Vec<f64> {
        audio_features(audio)[AUDIO_SCALARS..].to_vec()
    }

    pub fn category_probs(&self, audio: &AudioSignal) -> Vec<f64> {
        let mut g = Graph::new(&self.classifier);
        let x = g.input(self.timbre(audio));
        let logits = g.linear(self.cls.w, self.cls.b, x);
        softmax(g.value(logits))
    }

    pub fn location(&self, audio: &AudioSignal) -> [f64; 2] {
        let mut g = Graph::new(&self.regressor);
        let x = g.input(audio_features(audio));
        let y = self.regressor_forward(&mut g, x);
        let v = g.value(y);
        [v[0] * LOCATION_SCALE, v[1] * LOCATION_SCALE]
    }

    fn regressor_forward(&self, g: &mut Graph<'_>, x: crate::nn::Var) -> crate::nn::Var {
        let h = g.linear(self.reg.w1, self.reg.b1, x);
        let h = g.tanh(h);
        g.linear(self.reg.w2, self.reg.b2, h)
    }

    pub fn estimate(&self, audio: &AudioSignal) -> GoalDescriptor {
        GoalDescriptor {
            location: self.location(audio),
            category_probs: self.category_probs(audio),
        }
    }

    /// Mean cross-entropy over `batch`, with gradients accumulated into `grads`.
    pub fn classifier_loss(&self, batch: &[&AudioSample], grads: Option<&mut Grads>) -> f64 {
        let mut total = 0.0;
        let scale = 1.0 / batch.len() as f64;
        let mut grads = grads;
        for s in batch {
            let mut g = Graph::new(&self.classifier);
            let x = g.input(self.timbre(&s.audio));
            let logits = g.linear(self.cls.w, self.cls.b, x);
            let lp = g.log_softmax(logits);
            let nll = g.pick(lp, s.category);
            let loss = g.scale(nll, -1.0);
            total += g.scalar(loss);
            if let Some(gr) = grads.as_deref_mut() {
                g.backward(loss, scale, gr);
            }
        }
        total * scale
    }

    /// Mean squared error in scaled units.
    pub fn regressor_loss(&self, batch: &[&AudioSample], grads: Option<&mut Grads>) -> f64 {
        let mut total = 0.0;
        let scale = 1.0 / batch.len() as f64;
        let mut grads = grads;
        for s in batch {
            let mut g = Graph::new(&self.regressor);
            let x = g.input(audio_features(&s.audio));
            let y = self.regressor_forward(&mut g, x);
            let target = g.input(vec![s.location[0] / LOCATION_SCALE, s.location[1] / LOCATION_SCALE]);
            let diff = g.sub(y, target);
            let sq = g.square(diff);
            let loss = g.sum(sq);
            total += g.scalar(loss);
            if let Some(gr) = grads.as_deref_mut() {
                g.backward(loss, scale, gr);
            }
        }
        total * scale
    }

    pub fn classifier_accuracy(&self, samples: &[AudioSample]) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        let hits = samples
            .iter()
            .filter(|s| argmax(&self.category_probs(&s.audio)) == s.category)
            .count();
        hits as f64 / samples.len() as f64
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.classifier.all_finite() && self.regressor.all_finite() {
            Ok(())
        } else {
            Err(Error::Training("goal estimator weights are not finite".into()))
        }
    }
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map_or(0, |(i, _)| i)
}

/// Optimizer state for both estimator heads.
#[derive(Debug, Clone)]
pub struct EstimatorTrainer {
    classifier_opt: Adam,
    regressor_opt: Adam,
    batch: usize,
}

impl EstimatorTrainer {
    pub fn new(estimator: &GoalEstimator, cfg: &EstimatorConfig) -> Self {
        let adam = AdamConfig::with_lr(cfg.lr);
        Self {
            classifier_opt: Adam::new(adam, &estimator.classifier),
            regressor_opt: Adam::new(adam, &estimator.regressor),
            batch: cfg.batch.max(1),
        }
    }

    /// One shuffled pass of minibatch cross-entropy updates.
    pub fn classifier_epoch<R: Rng + ?Sized>(
        &mut self,
        est: &mut GoalEstimator,
        samples: &[AudioSample],
        rng: &mut R,
    ) -> Result<()> {
        let mut order: Vec<&AudioSample> = samples.iter().collect();
        order.shuffle(rng);
        let mut grads = Grads::zeros_like(&est.classifier);
        for chunk in order.chunks(self.batch) {
            grads.zero();
            let loss = est.classifier_loss(chunk, Some(&mut grads));
            if !loss.is_finite() {
                return Err(Error::Training(format!("classifier loss {loss}")));
            }
            self.classifier_opt.step(&mut est.classifier, &grads);
        }
        Ok(())
    }

    /// Minibatch squared-error updates on `samples`.
    pub fn regressor_update<R: Rng + ?Sized>(
        &mut self,
        est: &mut GoalEstimator,
        samples: &[AudioSample],
        rng: &mut R,
    ) -> Result<f64> {
        let mut order: Vec<&AudioSample> = samples.iter().collect();
        order.shuffle(rng);
        let mut grads = Grads::zeros_like(&est.regressor);
        let mut total = 0.0;
        for chunk in order.chunks(self.batch) {
            grads.zero();
            let loss = est.regressor_loss(chunk, Some(&mut grads));
            if !loss.is_finite() {
                return Err(Error::Training(format!("regressor loss {loss}")));
            }
            total += loss * chunk.len() as f64;
            self.regressor_opt.step(&mut est.regressor, &grads);
        }
        Ok(total / samples.len().max(1) as f64)
    }
}

/// Fits both heads on a fixed dataset. Returns per-epoch classifier losses
/// measured on the whole dataset after each epoch.
pub fn train_goal_estimator<R: Rng + ?Sized>(
    samples: &[AudioSample],
    signature_dim: usize,
    cfg: &EstimatorConfig,
    rng: &mut R,
) -> Result<(GoalEstimator, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::Training("empty goal-estimator dataset".into()));
    }
    let mut est = GoalEstimator::new(signature_dim, cfg.hidden, rng);
    let mut trainer = EstimatorTrainer::new(&est, cfg);
    let all: Vec<&AudioSample> = samples.iter().collect();
    let mut losses = Vec::with_capacity(cfg.classifier_epochs);
    for _ in 0..cfg.classifier_epochs {
        trainer.classifier_epoch(&mut est, samples, rng)?;
        losses.push(est.classifier_loss(&all, None));
    }
    for _ in 0..cfg.regressor_epochs {
        trainer.regressor_update(&mut est, samples, rng)?;
    }
    est.check_finite()?;
    Ok((est, losses))
}

/// Off-policy corpus: one sounding object of an allowed category heard from a
/// random navigable pose.
pub fn collect_audio_corpus<R: Rng + ?Sized>(
    scenes: &[Scene],
    split: &SplitConfig,
    categories: &[usize],
    audio: &AudioParams,
    count: usize,
    rng: &mut R,
) -> Result<Vec<AudioSample>> {
    let mut fields: Vec<Vec<(usize, DistanceField)>> = Vec::with_capacity(scenes.len());
    for scene in scenes {
        fields.push(
            scene
                .objects
                .iter()
                .filter(|o| o.is_sound_source && categories.contains(&o.category))
                .map(|o| (o.id, DistanceField::from_cell(scene, o.cell)))
                .collect(),
        );
    }
    let usable: Vec<usize> = (0..scenes.len()).filter(|&i| !fields[i].is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::Sampling("no scene holds an allowed sound source".into()));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let si = *usable.choose(rng).expect("non-empty");
        let scene = &scenes[si];
        let (id, field) = fields[si].choose(rng).expect("non-empty");
        let object = scene.object(*id).expect("listed object");
        let cells: Vec<_> = scene.navigable_cells().filter(|c| field.get(*c).is_some()).collect();
        let cell = *cells.choose(rng).expect("source cell reachable");
        let pose = Pose::new(cell.x, cell.y, Heading::from_index(rng.random_range(0..4)));
        let source = SoundSource {
            object,
            gain: 1.0,
            field,
        };
        let signal = crate::world::render_audio(&pose, &[source], &split.category_signatures, audio, rng);
        let location = to_agent_frame(
            pose.heading,
            (object.cell.x - pose.x) as f64,
            (object.cell.y - pose.y) as f64,
        );
        out.push(AudioSample {
            audio: signal,
            location,
            category: object.category,
        });
    }
    Ok(out)
}

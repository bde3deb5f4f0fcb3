#![allow(dead_code)]

use std::collections::VecDeque;

use earshot::episode::SplitConfig;
use earshot::eval::{compute_metrics, MetricsRecord};
use earshot::language::{LangConfig, LangExample, LangPolicy, LangStepInput};
use earshot::nn::{Grads, ParamStore};
use earshot::oracle::{reference_parse, segment_from_actions, Speaker, SpeakerConfig};
use earshot::percept::{AudioSample, GoalDescriptor, GoalEstimator, ObservationEmbedding};
use earshot::policy::{ActorCritic, Agents, NetConfig, PolicyInput, Transition, QUERY_EXTRA};
use earshot::train::{gae_advantages, ppo_loss, zeta_f, zeta_q, PpoConfig, PpoSample};
use earshot::world::{
    generate_scene, geodesic_distance, shortest_action_path, Action, AudioParams, AudioSignal, Cell, Heading, Pose, Scene,
    SceneParams, NUM_CATEGORIES,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random scene no larger than 15x15. The room count drops until it fits.
pub fn small_scene(seed: u64, rng: &mut impl Rng) -> Scene {
    let mut params = SceneParams {
        width: rng.random_range(8..=15),
        height: rng.random_range(8..=15),
        rooms: rng.random_range(1..=4),
        min_room: 3,
        num_objects: rng.random_range(3..=10),
    };
    loop {
        match generate_scene(seed, &params) {
            Ok(scene) => return scene,
            Err(_) if params.rooms > 1 => params.rooms -= 1,
            Err(e) => panic!("scene generation: {e}"),
        }
    }
}

/// All-pairs shortest paths over navigable cells, 4-connected, unit weights.
/// Returns the cell list and the distance matrix (infinite if unreachable).
pub fn floyd_warshall(scene: &Scene) -> (Vec<Cell>, Vec<Vec<f64>>) {
    let cells: Vec<Cell> = scene.navigable_cells().collect();
    let n = cells.len();
    let mut d = vec![vec![f64::INFINITY; n]; n];
    for i in 0..n {
        d[i][i] = 0.0;
        for j in 0..n {
            let (a, b) = (cells[i], cells[j]);
            if (a.x - b.x).abs() + (a.y - b.y).abs() == 1 {
                d[i][j] = 1.0;
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[i][k] + d[k][j];
                if via < d[i][j] {
                    d[i][j] = via;
                }
            }
        }
    }
    (cells, d)
}

fn heading_delta(h: Heading) -> (i32, i32) {
    match h {
        Heading::N => (0, -1),
        Heading::E => (1, 0),
        Heading::S => (0, 1),
        Heading::W => (-1, 0),
    }
}

fn turn(h: Heading, right: bool) -> Heading {
    let order = [Heading::N, Heading::E, Heading::S, Heading::W];
    let i = order.iter().position(|x| *x == h).unwrap();
    order[(i + if right { 1 } else { 3 }) % 4]
}

/// Minimal action count from `pose` to any heading at `goal`, by BFS over
/// `(cell, heading)` states.
pub fn bfs_action_count(scene: &Scene, pose: Pose, goal: Cell) -> Option<usize> {
    let key = |c: Cell, h: Heading| ((c.y as usize * scene.width + c.x as usize) * 4) + h.index();
    let mut seen = vec![false; scene.width * scene.height * 4];
    let mut queue = VecDeque::new();
    seen[key(pose.cell(), pose.heading)] = true;
    queue.push_back((pose.cell(), pose.heading, 0usize));
    while let Some((c, h, d)) = queue.pop_front() {
        if c == goal {
            return Some(d);
        }
        let (dx, dy) = heading_delta(h);
        let ahead = Cell { x: c.x + dx, y: c.y + dy };
        let mut next = vec![(c, turn(h, false)), (c, turn(h, true))];
        if scene.in_bounds(ahead) && scene.is_navigable(ahead) {
            next.push((ahead, h));
        }
        for (nc, nh) in next {
            let k = key(nc, nh);
            if !seen[k] {
                seen[k] = true;
                queue.push_back((nc, nh, d + 1));
            }
        }
    }
    None
}

/// Executes `actions` with grid semantics written out independently.
pub fn execute(scene: &Scene, mut pose: Pose, actions: &[Action]) -> Pose {
    for a in actions {
        match a {
            Action::Stop => break,
            Action::TurnLeft => pose.heading = turn(pose.heading, false),
            Action::TurnRight => pose.heading = turn(pose.heading, true),
            Action::MoveForward => {
                let (dx, dy) = heading_delta(pose.heading);
                let ahead = Cell {
                    x: pose.x + dx,
                    y: pose.y + dy,
                };
                if scene.in_bounds(ahead) && scene.is_navigable(ahead) {
                    pose.x = ahead.x;
                    pose.y = ahead.y;
                }
            }
        }
    }
    pose
}

/// Worst relative error between analytic gradients and central differences
/// over `coords` randomly chosen trainable scalars.
pub fn gradient_error<F>(store: &mut ParamStore, grads: &Grads, loss: F, coords: usize, rng: &mut impl Rng) -> f64
where
    F: Fn(&ParamStore) -> f64,
{
    let trainable: Vec<usize> = (0..store.tensors().len())
        .filter(|&t| !store.tensors()[t].frozen && !store.tensors()[t].data.is_empty())
        .collect();
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let t = trainable[rng.random_range(0..trainable.len())];
        let i = rng.random_range(0..store.tensors()[t].data.len());
        let h = 1e-5;
        let orig = store.tensors()[t].data[i];
        store.tensors_mut()[t].data[i] = orig + h;
        let up = loss(store);
        store.tensors_mut()[t].data[i] = orig - h;
        let down = loss(store);
        store.tensors_mut()[t].data[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.tensors()[t][i];
        let diff = (analytic - numeric).abs();
        // Absolute agreement at rounding level counts as a match for near-zero gradients.
        let err = if diff < 1e-9 { 0.0 } else { diff / analytic.abs().max(numeric.abs()) };
        worst = worst.max(err);
    }
    worst
}

/// Generalized advantages by explicit discounted sums of TD errors.
pub fn brute_force_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    durations: &[u32],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let n = rewards.len();
    let delta: Vec<f64> = (0..n)
        .map(|i| {
            let next = if i + 1 < n { values[i + 1] } else { last_value };
            let live = if dones[i] { 0.0 } else { 1.0 };
            rewards[i] + gamma.powf(durations[i] as f64) * next * live - values[i]
        })
        .collect();
    (0..n)
        .map(|i| {
            let mut total = 0.0;
            let mut weight = 1.0;
            for j in i..n {
                total += weight * delta[j];
                if dones[j] {
                    break;
                }
                weight *= (gamma.powf(durations[j] as f64)) * lambda;
            }
            total
        })
        .collect()
}

/// (success, path, shortest, actions, min_actions, dtg, sound_end, reach)
pub type RawEpisode = (bool, f64, f64, u32, u32, f64, u32, Option<u32>);

pub fn handcrafted_episodes() -> Vec<RawEpisode> {
    vec![
        (true, 6.0, 6.0, 8, 8, 0.0, 12, Some(8)),
        (true, 12.0, 6.0, 15, 9, 0.0, 12, Some(20)),
        (false, 4.0, 7.0, 500, 10, 5.0, 9, None),
        (true, 9.0, 9.0, 14, 11, 1.0, 30, Some(14)),
        (false, 0.0, 5.0, 0, 7, 5.0, 15, None),
        (true, 20.0, 5.0, 33, 6, 0.0, 5, Some(33)),
        (true, 7.0, 7.0, 7, 9, 1.0, 7, Some(7)),
        (false, 30.0, 12.0, 499, 15, 8.0, 20, None),
        (true, 13.0, 10.0, 18, 13, 0.0, 17, Some(18)),
        (true, 4.0, 4.0, 5, 5, 1.0, 40, Some(5)),
        (false, 10.0, 10.0, 120, 12, 2.0, 11, None),
        (true, 25.0, 11.0, 41, 14, 0.0, 25, Some(41)),
        (true, 6.0, 8.0, 6, 10, 1.0, 3, Some(6)),
        (false, 3.0, 3.0, 3, 4, 1.0, 6, None),
        (true, 17.0, 16.0, 22, 19, 0.0, 21, Some(22)),
        (true, 8.0, 4.0, 12, 6, 1.0, 12, Some(12)),
        (false, 50.0, 9.0, 300, 11, 9.0, 8, None),
        (true, 11.0, 11.0, 13, 13, 0.0, 2, Some(13)),
        (true, 15.0, 5.0, 19, 7, 0.0, 14, Some(19)),
        (false, 2.0, 6.0, 2, 8, 4.0, 16, None),
    ]
}

pub fn to_record(e: &RawEpisode) -> MetricsRecord {
    MetricsRecord {
        success: e.0,
        path_len: e.1,
        shortest_len: e.2,
        actions_taken: e.3,
        min_actions: e.4,
        dtg: e.5,
        sound_end_step: e.6,
        reach_step: e.7,
        queries: Vec::new(),
        option_lengths: Vec::new(),
    }
}

/// (SR, SPL, SNA, DTG, SWS) computed directly from the raw tuples.
pub fn brute_force_metrics(eps: &[RawEpisode]) -> [f64; 5] {
    let n = eps.len() as f64;
    let mut sums = [0.0; 5];
    for &(s, p, l, a, m, dtg, end, reach) in eps {
        if s {
            sums[0] += 1.0;
            sums[1] += if p > l { l / p } else { 1.0 };
            sums[2] += if a > m { m as f64 / a as f64 } else { 1.0 };
            if let Some(r) = reach {
                if r > end {
                    sums[4] += 1.0;
                }
            }
        }
        sums[3] += dtg;
    }
    sums.map(|x| x / n)
}

/// Worst disagreement between `geodesic_distance` and Floyd-Warshall over
/// every navigable pair of `scenes` random scenes.
pub fn world_distance_mismatches(scenes: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for s in 0..scenes {
        let scene = small_scene(seed.wrapping_mul(1000) + s as u64, &mut rng);
        let (cells, d) = floyd_warshall(&scene);
        for (i, &a) in cells.iter().enumerate() {
            for (j, &b) in cells.iter().enumerate() {
                match geodesic_distance(&scene, a, b) {
                    Ok(g) if g == d[i][j] => {}
                    Err(_) if d[i][j].is_infinite() => {}
                    _ => bad += 1,
                }
            }
        }
    }
    bad
}

/// Queries whose shortest action path is not minimal, not valid, or
/// disagrees with BFS on reachability.
pub fn action_path_mismatches(queries: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for q in 0..queries {
        let scene = small_scene(seed.wrapping_mul(7919) + q as u64, &mut rng);
        let cells: Vec<Cell> = scene.navigable_cells().collect();
        let a = cells[rng.random_range(0..cells.len())];
        let goal = cells[rng.random_range(0..cells.len())];
        let pose = Pose::new(a.x, a.y, Heading::from_index(rng.random_range(0..4)));
        let expected = bfs_action_count(&scene, pose, goal);
        match (shortest_action_path(&scene, pose, goal), expected) {
            (Ok(path), Some(n)) => {
                let end = execute(&scene, pose, &path);
                if path.len() != n || end.cell() != goal {
                    bad += 1;
                }
            }
            (Err(_), None) => {}
            _ => bad += 1,
        }
    }
    bad
}

/// Random action segments for which the noiseless speaker followed by the
/// reference parser does not give back the segment's actions.
pub fn speaker_round_trip_failures(segments: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speaker = Speaker::new(SpeakerConfig::noiseless()).expect("speaker");
    let moves = [Action::MoveForward, Action::TurnLeft, Action::TurnRight];
    let mut bad = 0;
    for i in 0..segments {
        let scene = small_scene(seed.wrapping_mul(31) + (i as u64 % 40), &mut rng);
        let cells: Vec<Cell> = scene.navigable_cells().collect();
        let c = cells[rng.random_range(0..cells.len())];
        let pose = Pose::new(c.x, c.y, Heading::from_index(rng.random_range(0..4)));
        let len = rng.random_range(1..=4);
        let actions: Vec<Action> = (0..len).map(|_| moves[rng.random_range(0..3)]).collect();
        let segment = segment_from_actions(&scene, pose, &actions);
        let want: Vec<Action> = segment.iter().map(|s| s.action).collect();
        let ok = speaker
            .speak(&segment, &scene, &mut rng)
            .and_then(|ins| reference_parse(&speaker.vocab, &ins))
            .is_ok_and(|got| got == want);
        if !ok {
            bad += 1;
        }
    }
    bad
}

/// Worst absolute gap between the GAE recursion and the explicit sums on
/// random length-10 buffers with random option durations and episode ends.
pub fn gae_error(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let n = 10;
        let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..10.0)).collect();
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let dones: Vec<bool> = (0..n).map(|_| rng.random_bool(0.2)).collect();
        let durations: Vec<u32> = (0..n).map(|_| rng.random_range(1..=3)).collect();
        let last = rng.random_range(-5.0..5.0);
        let gamma = rng.random_range(0.9..1.0);
        let lambda = rng.random_range(0.8..1.0);
        let (adv, ret) = gae_advantages(&rewards, &values, &dones, &durations, last, gamma, lambda);
        let oracle = brute_force_gae(&rewards, &values, &dones, &durations, last, gamma, lambda);
        for i in 0..n {
            worst = worst.max((adv[i] - oracle[i]).abs());
            worst = worst.max((ret[i] - (oracle[i] + values[i])).abs());
        }
    }
    worst
}

/// Worst gap between library aggregates and the brute-force metrics on the
/// handcrafted episodes.
pub fn metric_error() -> f64 {
    let eps = handcrafted_episodes();
    let records: Vec<MetricsRecord> = eps.iter().map(to_record).collect();
    let agg = compute_metrics(&records).expect("aggregate");
    let want = brute_force_metrics(&eps);
    [agg.sr, agg.spl, agg.sna, agg.dtg, agg.sws]
        .iter()
        .zip(want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Worst gap between the query penalties and their hand-evaluated values
/// for three soft queries, three-step options and the default penalties.
pub fn zeta_error() -> f64 {
    let q = [(1, -0.383404), (3, -1.150213), (4, -1.181684)];
    let f = [(1, -0.5), (5, -0.1), (10, 0.0)];
    let mut worst: f64 = 0.0;
    for (k, want) in q {
        worst = worst.max((zeta_q(k, 3, 3, -1.2) - want).abs());
    }
    for (j, want) in f {
        worst = worst.max((zeta_f(j, 10, -0.5) - want).abs());
    }
    worst
}

fn uniform_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn random_audio(rng: &mut impl Rng, dim: usize) -> AudioSignal {
    AudioSignal {
        left: rng.random_range(0.0..1.0),
        right: rng.random_range(0.0..1.0),
        signature: uniform_vec(rng, dim, 1.0),
        audible: true,
    }
}

fn policy_input(rng: &mut impl Rng, obs: usize, extra: usize, d: usize, memory_rows: usize) -> PolicyInput {
    PolicyInput {
        obs: uniform_vec(rng, obs, 1.0),
        goal: uniform_vec(rng, GoalDescriptor::DIM, 1.0),
        extra: uniform_vec(rng, extra, 1.0),
        memory: uniform_vec(rng, d * memory_rows, 1.0),
    }
}

/// Transitions whose behaviour log-probabilities sit within a few percent of
/// the current policy, so the clipped surrogate is smooth at the check point.
fn ppo_batch(net: &ActorCritic, rng: &mut impl Rng, extra: usize) -> Vec<Transition> {
    (0..4)
        .map(|_| {
            let rows = rng.random_range(0..3);
            let input = policy_input(rng, net.obs_dim, extra, net.cfg.d, rows);
            let (probs, value) = net.act(&input);
            let action = rng.random_range(0..net.actions);
            Transition {
                input,
                action,
                logp: probs[action].ln() + rng.random_range(-0.05..0.05),
                value,
                reward: rng.random_range(-1.0..1.0),
                done: false,
                duration: 1,
            }
        })
        .collect()
}

fn check_actor_critic(rng: &mut ChaCha8Rng, actions: usize, extra: usize, coords: usize) -> f64 {
    let cfg = NetConfig { d: 4, d_core: 6 };
    let mut net = ActorCritic::new(cfg, 7, actions, extra, rng);
    for t in net.store.tensors_mut() {
        for v in &mut t.data {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let steps = ppo_batch(&net, rng, extra);
    let samples: Vec<(f64, f64)> = steps
        .iter()
        .map(|_| (rng.random_range(-2.0..2.0), rng.random_range(-3.0..3.0)))
        .collect();
    let ppo = PpoConfig::default();
    let loss_of = |net: &ActorCritic| {
        let batch: Vec<PpoSample<'_>> = steps
            .iter()
            .zip(&samples)
            .map(|(step, &(advantage, ret))| PpoSample { step, advantage, ret })
            .collect();
        ppo_loss(net, &batch, &ppo, None).expect("loss").0
    };
    let batch: Vec<PpoSample<'_>> = steps
        .iter()
        .zip(&samples)
        .map(|(step, &(advantage, ret))| PpoSample { step, advantage, ret })
        .collect();
    let mut grads = Grads::zeros_like(&net.store);
    ppo_loss(&net, &batch, &ppo, Some(&mut grads)).expect("loss");
    let template = net.clone();
    gradient_error(
        &mut net.store,
        &grads,
        |s| {
            let mut n = template.clone();
            n.store = s.clone();
            loss_of(&n)
        },
        coords,
        rng,
    )
}

/// Worst relative gradient error per trainable block over `draws` random
/// parameter draws: estimator classifier, estimator regressor, audio
/// actor-critic, query actor-critic and the language option policy.
pub fn gradient_errors(draws: usize, coords: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 5];
    let sig = 4;
    for _ in 0..draws {
        let est = GoalEstimator::new(sig, 5, &mut rng);
        let mut est = est;
        for t in est.classifier.tensors_mut() {
            for v in &mut t.data {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        let samples: Vec<AudioSample> = (0..4)
            .map(|_| AudioSample {
                audio: random_audio(&mut rng, sig),
                location: [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)],
                category: rng.random_range(0..NUM_CATEGORIES),
            })
            .collect();
        let batch: Vec<&AudioSample> = samples.iter().collect();

        let mut g = Grads::zeros_like(&est.classifier);
        est.classifier_loss(&batch, Some(&mut g));
        let template = est.clone();
        let mut store = est.classifier.clone();
        let e = gradient_error(
            &mut store,
            &g,
            |s| {
                let mut m = template.clone();
                m.classifier = s.clone();
                m.classifier_loss(&batch, None)
            },
            coords,
            &mut rng,
        );
        worst[0] = worst[0].max(e);

        let mut g = Grads::zeros_like(&est.regressor);
        est.regressor_loss(&batch, Some(&mut g));
        let mut store = est.regressor.clone();
        let e = gradient_error(
            &mut store,
            &g,
            |s| {
                let mut m = template.clone();
                m.regressor = s.clone();
                m.regressor_loss(&batch, None)
            },
            coords,
            &mut rng,
        );
        worst[1] = worst[1].max(e);

        worst[2] = worst[2].max(check_actor_critic(&mut rng, 4, 0, coords));
        worst[3] = worst[3].max(check_actor_critic(&mut rng, 2, QUERY_EXTRA, coords));

        let cfg = LangConfig {
            d_tok: 4,
            d_obs: 5,
            d_b: 6,
            ..LangConfig::default()
        };
        let mut lang = LangPolicy::new(cfg, 7, 12, &mut rng);
        for t in lang.store.tensors_mut() {
            for v in &mut t.data {
                *v += rng.random_range(-0.2..0.2);
            }
        }
        let examples: Vec<LangExample> = (0..3)
            .map(|_| LangExample {
                tokens: (0..rng.random_range(1..7)).map(|_| rng.random_range(1..12)).collect(),
                steps: (0..cfg.option_steps)
                    .map(|_| LangStepInput {
                        obs: uniform_vec(&mut rng, 7, 1.0),
                        goal: uniform_vec(&mut rng, GoalDescriptor::DIM, 1.0),
                    })
                    .collect(),
                teacher: (0..cfg.option_steps)
                    .map(|_| Action::from_index(rng.random_range(0..Action::COUNT)))
                    .collect(),
            })
            .collect();
        let refs: Vec<&LangExample> = examples.iter().collect();
        let mut g = Grads::zeros_like(&lang.store);
        lang.imitation_loss(&refs, Some(&mut g)).expect("loss");
        let template = lang.clone();
        let e = gradient_error(
            &mut lang.store,
            &g,
            |s| {
                let mut m = template.clone();
                m.store = s.clone();
                m.imitation_loss(&refs, None).expect("loss")
            },
            coords,
            &mut rng,
        );
        worst[4] = worst[4].max(e);
    }
    ["classifier", "regressor", "audio_policy", "query_policy", "language_policy"]
        .into_iter()
        .zip(worst)
        .collect()
}

/// Freshly initialized components, enough to drive the controller.
pub struct Untrained {
    pub estimator: GoalEstimator,
    pub audio: ActorCritic,
    pub query: ActorCritic,
    pub lang: LangPolicy,
    pub speaker: Speaker,
    pub split: SplitConfig,
}

impl Untrained {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let split = SplitConfig::unheard(seed, 6, 16).expect("split");
        let obs = ObservationEmbedding::dim(16);
        let audio = ActorCritic::new(NetConfig::default(), obs, Action::COUNT, 0, &mut rng);
        let query = ActorCritic::query_from(&audio, 0.0, &mut rng);
        let speaker = Speaker::new(SpeakerConfig::default()).expect("speaker");
        Self {
            estimator: GoalEstimator::new(16, 8, &mut rng),
            lang: LangPolicy::new(LangConfig::default(), obs, speaker.vocab.len(), &mut rng),
            audio,
            query,
            speaker,
            split,
        }
    }

    pub fn agents(&self) -> Agents<'_> {
        Agents {
            estimator: &self.estimator,
            audio_policy: &self.audio,
            query_policy: Some(&self.query),
            lang_policy: Some(&self.lang),
            speaker: &self.speaker,
            signatures: &self.split.category_signatures,
            audio: AudioParams::default(),
        }
    }
}

pub fn test_scenes(count: usize, seed: u64) -> Vec<Scene> {
    let params = SceneParams {
        width: 12,
        height: 12,
        rooms: 3,
        min_room: 3,
        num_objects: 12,
    };
    (0..count)
        .map(|i| generate_scene(seed + i as u64, &params).expect("scene"))
        .collect()
}

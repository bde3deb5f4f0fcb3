//! Query answering: shortest-path segments spoken through a template grammar,
//! or handed over as raw actions.

use std::collections::HashMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::world::{step, Action, ActionField, Cell, Pose, Scene, CATEGORY_NAMES, HALLWAY, ROOM_NAMES};

pub const DEFAULT_SEGMENT_LEN: usize = 4;
pub const DEFAULT_OPTION_STEPS: usize = 3;
pub const DEFAULT_MAX_TOKENS: usize = 12;

pub const PAD: usize = 0;
pub const UNK: usize = 1;

const FORWARD_PHRASES: [&[&str]; 5] = [
    &["walk", "forward"],
    &["go", "straight"],
    &["move", "ahead"],
    &["continue", "forward"],
    &["head", "straight"],
];
const LEFT_PHRASES: [&[&str]; 4] = [
    &["turn", "left"],
    &["go", "left"],
    &["make", "a", "left"],
    &["rotate", "left"],
];
const RIGHT_PHRASES: [&[&str]; 4] = [
    &["turn", "right"],
    &["go", "right"],
    &["make", "a", "right"],
    &["rotate", "right"],
];
const COUNT_WORDS: [&str; 8] = ["two", "three", "four", "five", "six", "seven", "eight", "nine"];
const CONNECTORS: [&str; 2] = ["then", "and"];
const OBJECT_PREPOSITIONS: [&str; 3] = ["past", "toward", "by"];
const STOP_WORD: &str = "stop";

/// Dense token table; id 0 is padding, id 1 unknown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate token {t:?}")));
            }
        }
        if tokens.len() < 2 || tokens[PAD] != "<pad>" || tokens[UNK] != "<unk>" {
            return Err(Error::Input("vocabulary must start with <pad>, <unk>".into()));
        }
        Ok(Self { tokens, index })
    }

    /// Every word the speaker can produce.
    pub fn standard() -> Self {
        let mut words: Vec<&str> = vec!["<pad>", "<unk>"];
        let phrases = FORWARD_PHRASES.iter().chain(&LEFT_PHRASES).chain(&RIGHT_PHRASES);
        for phrase in phrases {
            words.extend_from_slice(phrase);
        }
        words.extend_from_slice(&COUNT_WORDS);
        words.extend_from_slice(&["steps", "times", STOP_WORD, "the", "down", "into"]);
        words.extend_from_slice(&CONNECTORS);
        words.extend_from_slice(&OBJECT_PREPOSITIONS);
        words.extend_from_slice(&ROOM_NAMES);
        words.extend_from_slice(&CATEGORY_NAMES);
        let mut tokens: Vec<String> = Vec::new();
        for w in words {
            if !tokens.iter().any(|t| t == w) {
                tokens.push(w.to_string());
            }
        }
        Self::from_tokens(tokens).expect("standard vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Instruction {
        Instruction {
            tokens: text.split_whitespace().map(|w| self.id(w)).collect(),
        }
    }

    pub fn decode(&self, instruction: &Instruction) -> String {
        instruction
            .tokens
            .iter()
            .map(|&t| self.word(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.tokens)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_tokens(serde_json::from_str(text)?)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub tokens: Vec<usize>,
}

impl Instruction {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeakerConfig {
    pub p_land: f64,
    pub p_drop: f64,
    pub p_connector: f64,
    pub max_tokens: usize,
}

impl Default for SpeakerConfig {
    fn default() -> Self {
        Self {
            p_land: 0.3,
            p_drop: 0.1,
            p_connector: 0.3,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

impl SpeakerConfig {
    /// Synonyms and landmarks stay on; nothing is dropped.
    pub fn noiseless() -> Self {
        Self {
            p_drop: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_land", self.p_land), ("p_drop", self.p_drop), ("p_connector", self.p_connector)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name}={p} outside [0, 1]")));
            }
        }
        if self.max_tokens < 3 {
            return Err(Error::Config("max_tokens must be at least 3".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentStep {
    pub pose: Pose,
    pub action: Action,
}

pub type Segment = Vec<SegmentStep>;

/// The first `n` steps of the preferred shortest path; empty at the goal.
pub fn extract_segment(scene: &Scene, pose: Pose, goal: Cell, n: usize) -> Result<Segment> {
    if !scene.is_navigable(pose.cell()) {
        return Err(Error::Input(format!("pose {pose:?} is not navigable")));
    }
    Ok(segment_from_field(scene, &ActionField::new(scene, goal), pose, n))
}

pub fn segment_from_field(scene: &Scene, field: &ActionField, mut pose: Pose, n: usize) -> Segment {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let Some(action) = field.next_action(scene, pose) else {
            break;
        };
        out.push(SegmentStep { pose, action });
        pose = step(scene, pose, action);
    }
    out
}

/// One run-length clause of the action string.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Clause {
    action: Action,
    count: usize,
    first: usize,
}

fn clauses(segment: &[SegmentStep]) -> Vec<Clause> {
    let mut out: Vec<Clause> = Vec::new();
    for (i, s) in segment.iter().enumerate() {
        match out.last_mut() {
            Some(c) if c.action == s.action && c.count < COUNT_WORDS.len() + 1 => c.count += 1,
            _ => out.push(Clause {
                action: s.action,
                count: 1,
                first: i,
            }),
        }
    }
    out
}

fn landmark(scene: &Scene, segment: &[SegmentStep], clause: &Clause) -> Option<Vec<String>> {
    if clause.action != Action::MoveForward {
        return None;
    }
    let start = segment[clause.first].pose;
    let mut cells = vec![start.cell()];
    let mut pose = start;
    for _ in 0..clause.count {
        pose = step(scene, pose, Action::MoveForward);
        cells.push(pose.cell());
    }
    let words = |ws: &[&str]| Some(ws.iter().map(|w| w.to_string()).collect());
    if cells.iter().any(|&c| scene.room_label(c) == HALLWAY) {
        return words(&["down", "the", ROOM_NAMES[HALLWAY as usize]]);
    }
    let end = *cells.last().expect("non-empty");
    let (from, to) = (scene.room_label(start.cell()), scene.room_label(end));
    if from != to && to >= 0 {
        return words(&["into", "the", ROOM_NAMES[to as usize]]);
    }
    for &c in &cells {
        for (dx, dy) in [(0, 0), (0, -1), (1, 0), (0, 1), (-1, 0)] {
            if let Some(obj) = scene.object_at(c.offset(dx, dy)) {
                return words(&["past", "the", CATEGORY_NAMES[obj.category]]);
            }
        }
    }
    None
}

fn verb<R: Rng + ?Sized>(action: Action, rng: &mut R) -> &'static [&'static str] {
    let table: &[&[&str]] = match action {
        Action::MoveForward => &FORWARD_PHRASES,
        Action::TurnLeft => &LEFT_PHRASES,
        Action::TurnRight => &RIGHT_PHRASES,
        Action::Stop => return &[STOP_WORD],
    };
    table.choose(rng).expect("non-empty synonym table")
}

/// Template speaker over a fixed vocabulary.
#[derive(Debug, Clone)]
pub struct Speaker {
    pub vocab: Vocabulary,
    pub cfg: SpeakerConfig,
}

impl Speaker {
    pub fn new(cfg: SpeakerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            vocab: Vocabulary::standard(),
            cfg,
        })
    }

    /// The utterance given when the agent already stands on the goal.
    pub fn stop_instruction(&self) -> Instruction {
        Instruction {
            tokens: vec![self.vocab.id(STOP_WORD)],
        }
    }

    pub fn speak<R: Rng + ?Sized>(&self, segment: &[SegmentStep], scene: &Scene, rng: &mut R) -> Result<Instruction> {
        if segment.is_empty() {
            return Err(Error::Input("cannot describe an empty segment".into()));
        }
        let cfg = &self.cfg;
        let all = clauses(segment);
        // Core phrase per clause: verb plus an explicit repeat count.
        let mut parts: Vec<(Vec<String>, Option<Vec<String>>)> = Vec::with_capacity(all.len());
        for c in &all {
            let mut core: Vec<String> = verb(c.action, rng).iter().map(|w| w.to_string()).collect();
            if c.count > 1 {
                core.push(COUNT_WORDS[c.count - 2].to_string());
                core.push(if c.action == Action::MoveForward { "steps" } else { "times" }.to_string());
            }
            let extra = if rng.random_bool(cfg.p_land) {
                landmark(scene, segment, c)
            } else {
                None
            };
            parts.push((core, extra));
        }
        if cfg.p_drop > 0.0 && parts.len() > 1 {
            let keep: Vec<bool> = parts.iter().map(|_| !rng.random_bool(cfg.p_drop)).collect();
            if keep.iter().any(|k| *k) {
                parts = parts.into_iter().zip(keep).filter(|(_, k)| *k).map(|(p, _)| p).collect();
            }
        }
        // Mandatory words first, optional words while the budget allows.
        let mut budget = cfg.max_tokens;
        let mut kept = Vec::new();
        for (core, extra) in parts {
            if core.len() > budget {
                break;
            }
            budget -= core.len();
            kept.push((core, extra));
        }
        let mut words: Vec<String> = Vec::new();
        let n = kept.len();
        for (i, (core, extra)) in kept.into_iter().enumerate() {
            words.extend(core);
            if let Some(e) = extra {
                if e.len() <= budget {
                    budget -= e.len();
                    words.extend(e);
                }
            }
            if i + 1 < n && budget > 0 && rng.random_bool(cfg.p_connector) {
                budget -= 1;
                words.push(CONNECTORS.choose(rng).expect("non-empty").to_string());
            }
        }
        Ok(Instruction {
            tokens: words.iter().map(|w| self.vocab.id(w)).collect(),
        })
    }
}

/// Inverse of the speaker's clause grammar, for noise-free instructions.
pub fn reference_parse(vocab: &Vocabulary, instruction: &Instruction) -> Result<Vec<Action>> {
    let words: Vec<&str> = instruction.tokens.iter().map(|&t| vocab.word(t)).collect();
    let err = |i: usize, what: &str| Error::Parse(format!("at token {i}: {what}"));
    let mut out = Vec::new();
    let mut i = 0;
    let starts = |i: usize, phrase: &[&str]| words.len() >= i + phrase.len() && words[i..i + phrase.len()] == *phrase;
    if words == [STOP_WORD] {
        return Ok(vec![Action::Stop]);
    }
    while i < words.len() {
        let mut matched = None;
        for (action, table) in [
            (Action::MoveForward, &FORWARD_PHRASES[..]),
            (Action::TurnLeft, &LEFT_PHRASES[..]),
            (Action::TurnRight, &RIGHT_PHRASES[..]),
        ] {
            if let Some(p) = table.iter().find(|p| starts(i, p)) {
                matched = Some((action, p.len()));
                break;
            }
        }
        let Some((action, len)) = matched else {
            return Err(err(i, "expected a movement phrase"));
        };
        i += len;
        let mut count = 1;
        if let Some(k) = words.get(i).and_then(|w| COUNT_WORDS.iter().position(|c| c == w)) {
            let unit = if action == Action::MoveForward { "steps" } else { "times" };
            if words.get(i + 1) != Some(&unit) {
                return Err(err(i + 1, "count without unit"));
            }
            count = k + 2;
            i += 2;
        }
        out.extend(std::iter::repeat_n(action, count));
        match words.get(i) {
            Some(&"down") | Some(&"into") => {
                if words.get(i + 1) != Some(&"the") || !words.get(i + 2).is_some_and(|w| ROOM_NAMES.contains(w)) {
                    return Err(err(i, "malformed room landmark"));
                }
                i += 3;
            }
            Some(w) if OBJECT_PREPOSITIONS.contains(w) => {
                if words.get(i + 1) != Some(&"the") || !words.get(i + 2).is_some_and(|w| CATEGORY_NAMES.contains(w)) {
                    return Err(err(i, "malformed object landmark"));
                }
                i += 3;
            }
            _ => {}
        }
        if words.get(i).is_some_and(|w| CONNECTORS.contains(w)) {
            i += 1;
            if i == words.len() {
                return Err(err(i, "dangling connector"));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Parse("empty instruction".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackMode {
    Language,
    GtActions,
}

impl FeedbackMode {
    pub const ALL: [FeedbackMode; 2] = [FeedbackMode::Language, FeedbackMode::GtActions];

    pub fn name(self) -> &'static str {
        match self {
            FeedbackMode::Language => "language",
            FeedbackMode::GtActions => "gt_actions",
        }
    }
}

impl std::str::FromStr for FeedbackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "language" => Ok(FeedbackMode::Language),
            "gt_actions" | "gt" => Ok(FeedbackMode::GtActions),
            _ => Err(Error::Config(format!("unknown feedback mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Feedback {
    Language(Instruction),
    GtActions(Vec<Action>),
}

/// `option_steps` shortest-path actions, padded with Stop past the goal.
pub fn gt_actions(scene: &Scene, field: &ActionField, pose: Pose, option_steps: usize) -> Vec<Action> {
    let mut out: Vec<Action> = segment_from_field(scene, field, pose, option_steps)
        .into_iter()
        .map(|s| s.action)
        .collect();
    out.resize(option_steps, Action::Stop);
    out
}

pub fn answer_query<R: Rng + ?Sized>(
    episode: &Episode<'_>,
    pose: Pose,
    mode: FeedbackMode,
    speaker: &Speaker,
    segment_len: usize,
    option_steps: usize,
    rng: &mut R,
) -> Result<Feedback> {
    match mode {
        FeedbackMode::GtActions => Ok(Feedback::GtActions(gt_actions(
            episode.scene,
            &episode.goal_actions,
            pose,
            option_steps,
        ))),
        FeedbackMode::Language => {
            let segment = segment_from_field(episode.scene, &episode.goal_actions, pose, segment_len);
            if segment.is_empty() {
                return Ok(Feedback::Language(speaker.stop_instruction()));
            }
            Ok(Feedback::Language(speaker.speak(&segment, episode.scene, rng)?))
        }
    }
}

/// Convenience for building segments from explicit action lists.
pub fn segment_from_actions(scene: &Scene, mut pose: Pose, actions: &[Action]) -> Segment {
    actions
        .iter()
        .map(|&action| {
            let s = SegmentStep { pose, action };
            pose = step(scene, pose, action);
            s
        })
        .collect()
}

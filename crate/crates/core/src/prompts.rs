//! Prompt pools, answer formats, and hint rendering.
//!
//! Template files live in `prompts/` at the crate root, one template per
//! line. Lines starting with `#` and blank lines are ignored, a literal `\n`
//! renders as a line break, and `{codes}` renders the emotion codes in a
//! freshly shuffled order.

use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::paralinguistics::{BinnedFeatures, Feature, Gender};

const SYSTEM_PROMPT_FILE: &str = include_str!("../prompts/system.txt");
const ASR_POOL: &str = include_str!("../prompts/asr.txt");
const SER_POOL: &str = include_str!("../prompts/ser.txt");
const JOINT_POOL: &str = include_str!("../prompts/joint.txt");

/// System turn shared by every sample.
pub fn system_prompt() -> &'static str {
    SYSTEM_PROMPT_FILE.trim_end()
}

/// Cue placed directly before the audio block.
pub const GUIDE_PHRASE: &str = "Here are some audio tokens:";

/// Sentence introducing a reference transcript inside the user prompt.
pub const TRANSCRIPT_HINT: &str = "Use the following transcript to help you predict the emotion:";

pub const NSHOT_HEADER: &str = "Here are some examples of the expected output:";

pub const INTRO_SENTENCES: [&str; 5] = [
    "Here's a breakdown of paralinguistic cues in the audio:",
    "The following vocal characteristics were measured on the audio:",
    "Some acoustic properties of the speaker's voice:",
    "Paralinguistic measurements for this recording:",
    "Consider these cues about how the speech sounds:",
];

/// Fixed n-shot bank; never drawn from corpus data.
const EXAMPLE_BANK: [(&str, EmotionCode); 9] = [
    ("I cannot believe you broke it again.", EmotionCode::A),
    ("Nothing has gone right since she left.", EmotionCode::S),
    ("This is the best news I have heard all year!", EmotionCode::H),
    ("Wait, you built all of this yourself?", EmotionCode::U),
    ("Please tell me someone else is in the house.", EmotionCode::F),
    ("That smell makes me want to leave.", EmotionCode::D),
    ("As if your opinion mattered to anyone.", EmotionCode::C),
    ("The meeting moved to three o'clock.", EmotionCode::N),
    ("Well, that is one way to look at it.", EmotionCode::O),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "ASR")]
    Asr,
    #[serde(rename = "SER")]
    Ser,
    #[serde(rename = "JOINT")]
    Joint,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Asr, Task::Ser, Task::Joint];

    /// Number of '|' characters in a complete answer.
    pub fn answer_pipes(self) -> usize {
        match self {
            Task::Asr | Task::Ser => 2,
            Task::Joint => 3,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Asr => "ASR",
            Task::Ser => "SER",
            Task::Joint => "JOINT",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EmotionCode {
    A,
    S,
    H,
    U,
    F,
    D,
    C,
    N,
    O,
}

impl EmotionCode {
    pub const ALL: [EmotionCode; 9] = [
        EmotionCode::A,
        EmotionCode::S,
        EmotionCode::H,
        EmotionCode::U,
        EmotionCode::F,
        EmotionCode::D,
        EmotionCode::C,
        EmotionCode::N,
        EmotionCode::O,
    ];

    pub fn letter(self) -> char {
        match self {
            EmotionCode::A => 'A',
            EmotionCode::S => 'S',
            EmotionCode::H => 'H',
            EmotionCode::U => 'U',
            EmotionCode::F => 'F',
            EmotionCode::D => 'D',
            EmotionCode::C => 'C',
            EmotionCode::N => 'N',
            EmotionCode::O => 'O',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionCode::A => "Angry",
            EmotionCode::S => "Sad",
            EmotionCode::H => "Happy",
            EmotionCode::U => "Surprise",
            EmotionCode::F => "Fear",
            EmotionCode::D => "Disgust",
            EmotionCode::C => "Contempt",
            EmotionCode::N => "Neutral",
            EmotionCode::O => "Other",
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.letter() == c)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for EmotionCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for EmotionCode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut it = s.chars();
        match (it.next(), it.next()) {
            (Some(c), None) => {
                Self::from_letter(c).ok_or_else(|| Error::InvalidInput(format!("unknown emotion code '{s}'")))
            }
            _ => Err(Error::InvalidInput(format!(
                "emotion code must be one letter, got '{s}'"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptPool {
    pub task: Task,
    pub templates: Vec<String>,
}

impl PromptPool {
    /// Parses a template file and keeps its first `size` entries.
    pub fn parse(task: Task, text: &str, size: usize) -> Result<Self> {
        let all: Vec<String> = text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .map(|l| l.replace("\\n", "\n"))
            .collect();
        if size == 0 || size > all.len() {
            return Err(Error::Config(format!(
                "{task} prompt pool size {size} outside 1..={}",
                all.len()
            )));
        }
        let templates = all[..size].to_vec();
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = templates.iter().find(|t| !seen.insert(t.as_str())) {
            return Err(Error::Config(format!("duplicate {task} template: {dup}")));
        }
        Ok(PromptPool { task, templates })
    }

    pub fn size(&self) -> usize {
        self.templates.len()
    }

    /// Uniform draw of a template index.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<usize> {
        if self.templates.is_empty() {
            return Err(Error::Config(format!("{} prompt pool is empty", self.task)));
        }
        Ok(rng.random_range(0..self.templates.len()))
    }

    /// Draws a template and fills its placeholders.
    pub fn sample_prompt<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<String> {
        let i = self.sample_index(rng)?;
        render_template(&self.templates[i], rng)
    }
}

fn render_template<R: Rng + ?Sized>(t: &str, rng: &mut R) -> Result<String> {
    if !t.contains("{codes}") {
        return Ok(t.to_string());
    }
    let order = randomize_emotion_order(&EmotionCode::ALL, rng)?;
    let codes = order
        .iter()
        .map(|c| format!("{} ({})", c.letter(), c.name()))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(t.replace("{codes}", &codes))
}

/// Shuffled copy of `codes`; rejects empty or repeated code lists.
pub fn randomize_emotion_order<R: Rng + ?Sized>(codes: &[EmotionCode], rng: &mut R) -> Result<Vec<EmotionCode>> {
    if codes.is_empty() {
        return Err(Error::InvalidInput("no emotion codes to order".into()));
    }
    let mut seen = [false; 9];
    for c in codes {
        if std::mem::replace(&mut seen[c.index()], true) {
            return Err(Error::InvalidInput(format!("duplicate emotion code {c}")));
        }
    }
    let mut out = codes.to_vec();
    out.shuffle(rng);
    Ok(out)
}

/// The three task pools plus a digest of their source text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptSet {
    pub asr: PromptPool,
    pub ser: PromptPool,
    pub joint: PromptPool,
    pub digest: String,
}

impl PromptSet {
    pub fn builtin(pool_size: usize) -> Result<Self> {
        let mut h = Sha256::new();
        for part in [SYSTEM_PROMPT_FILE, ASR_POOL, SER_POOL, JOINT_POOL] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        h.update((pool_size as u64).to_le_bytes());
        Ok(PromptSet {
            asr: PromptPool::parse(Task::Asr, ASR_POOL, pool_size)?,
            ser: PromptPool::parse(Task::Ser, SER_POOL, pool_size)?,
            joint: PromptPool::parse(Task::Joint, JOINT_POOL, pool_size)?,
            digest: crate::tensor::hex_digest(h),
        })
    }

    pub fn pool(&self, task: Task) -> &PromptPool {
        match task {
            Task::Asr => &self.asr,
            Task::Ser => &self.ser,
            Task::Joint => &self.joint,
        }
    }

    /// All fixed protocol text, for vocabulary construction.
    pub fn vocabulary_text(&self) -> Vec<String> {
        let mut v = vec![
            system_prompt().to_string(),
            GUIDE_PHRASE.to_string(),
            TRANSCRIPT_HINT.to_string(),
            NSHOT_HEADER.to_string(),
        ];
        v.extend(INTRO_SENTENCES.iter().map(|s| s.to_string()));
        for pool in [&self.asr, &self.ser, &self.joint] {
            v.extend(pool.templates.iter().map(|t| t.replace("{codes}", "")));
        }
        v.extend(
            EmotionCode::ALL
                .iter()
                .map(|c| format!("{} ({}), ", c.letter(), c.name())),
        );
        for (t, c) in EXAMPLE_BANK {
            v.push(format_target(Task::Joint, Some(t), Some(c)).expect("bank entries are valid"));
        }
        for f in Feature::ALL {
            for l in ["low", "medium", "high"] {
                v.push(format!("- {}: '{l}'", f.label()));
            }
        }
        for g in [Gender::Male, Gender::Female, Gender::Unknown] {
            v.push(gender_line(g));
        }
        v
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HintSpec {
    #[serde(default)]
    pub n_shot: usize,
    #[serde(default)]
    pub include_paralinguistics: bool,
    #[serde(default)]
    pub include_gender: bool,
}

impl HintSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_shot > 2 {
            return Err(Error::Config(format!("n_shot {} outside 0..=2", self.n_shot)));
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.n_shot == 0 && !self.include_paralinguistics && !self.include_gender
    }
}

fn gender_line(g: Gender) -> String {
    format!("The speaker in this audio is {}.", g.as_str())
}

/// Gender line and/or an introduced, shuffled list of binned features.
pub fn render_supplementary<R: Rng + ?Sized>(z: Option<&BinnedFeatures>, spec: &HintSpec, rng: &mut R) -> String {
    let mut lines = Vec::new();
    let Some(z) = z else { return String::new() };
    if spec.include_gender {
        lines.push(gender_line(z.gender));
    }
    if spec.include_paralinguistics && !z.labels.is_empty() {
        lines.push(INTRO_SENTENCES.choose(rng).expect("five intros").to_string());
        let mut feats: Vec<_> = z.labels.iter().collect();
        feats.shuffle(rng);
        lines.extend(feats.into_iter().map(|(f, l)| format!("- {}: '{l}'", f.label())));
    }
    lines.join("\n")
}

/// `n` bank examples in `task`'s answer format under a fixed header.
pub fn render_nshot<R: Rng + ?Sized>(n: usize, task: Task, rng: &mut R) -> Result<String> {
    if n == 0 {
        return Ok(String::new());
    }
    if n > EXAMPLE_BANK.len() {
        return Err(Error::Config(format!(
            "n-shot count {n} exceeds the {}-example bank",
            EXAMPLE_BANK.len()
        )));
    }
    let mut lines = vec![NSHOT_HEADER.to_string()];
    for &(t, c) in EXAMPLE_BANK.choose_multiple(rng, n) {
        lines.push(format_target(task, Some(t), Some(c))?);
    }
    Ok(lines.join("\n"))
}

pub fn format_target(task: Task, transcript: Option<&str>, emotion: Option<EmotionCode>) -> Result<String> {
    let need_t = || transcript.ok_or_else(|| Error::InvalidInput(format!("{task} target needs a transcript")));
    let need_e = || emotion.ok_or_else(|| Error::InvalidInput(format!("{task} target needs an emotion")));
    Ok(match task {
        Task::Asr => format!("| ASR: {} |", need_t()?),
        Task::Ser => format!("| Emotion: {} |", need_e()?),
        Task::Joint => format!("| ASR: {} | Emotion: {} |", need_t()?, need_e()?),
    })
}

/// Fields of one utterance that sample construction reads.
#[derive(Clone, Copy, Debug)]
pub struct UtteranceView<'a> {
    pub id: &'a str,
    pub transcript: &'a str,
    pub emotion: Option<EmotionCode>,
    pub binned: Option<&'a BinnedFeatures>,
}

/// `(x, p, z, y, t)`, with the audio `x` referenced by utterance id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSample {
    pub id: String,
    pub task: Task,
    pub prompt: String,
    pub aux: String,
    pub target: String,
}

pub fn build_sample<R: Rng + ?Sized>(
    u: &UtteranceView<'_>,
    task: Task,
    hints: &HintSpec,
    prompts: &PromptSet,
    rng: &mut R,
) -> Result<TaskSample> {
    if task != Task::Asr && u.emotion.is_none() {
        return Err(Error::InvalidInput(format!(
            "{task} sample '{}' has no emotion label",
            u.id
        )));
    }
    if u.transcript.contains('|') {
        return Err(Error::InvalidInput(format!("transcript of '{}' contains '|'", u.id)));
    }
    let prompt = prompts.pool(task).sample_prompt(rng)?;
    let supp = render_supplementary(u.binned, hints, rng);
    let shots = render_nshot(hints.n_shot, task, rng)?;
    let aux = [supp, shots]
        .into_iter()
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("\n");
    let target = format_target(task, Some(u.transcript), u.emotion)?;
    Ok(TaskSample {
        id: u.id.to_string(),
        task,
        prompt,
        aux,
        target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paralinguistics::Level;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn binned() -> BinnedFeatures {
        BinnedFeatures {
            labels: BTreeMap::from([
                (Feature::Loudness, Level::Low),
                (Feature::MeanPitch, Level::Medium),
                (Feature::PitchRange, Level::High),
                (Feature::Jitter, Level::Low),
                (Feature::Shimmer, Level::High),
            ]),
            gender: Gender::Female,
        }
    }

    #[test]
    fn builtin_pools_have_twenty_unique_templates() {
        let p = PromptSet::builtin(20).unwrap();
        for t in Task::ALL {
            assert_eq!(p.pool(t).size(), 20);
        }
        assert!(PromptSet::builtin(21).is_err());
        assert!(PromptSet::builtin(0).is_err());
        assert_eq!(PromptSet::builtin(10).unwrap().asr.size(), 10);
        assert_ne!(PromptSet::builtin(10).unwrap().digest, p.digest);
    }

    #[test]
    fn template_frequencies_are_uniform() {
        // Oracle: under a uniform draw each of 20 templates has p = 0.05.
        let p = PromptSet::builtin(20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 20];
        for _ in 0..10_000 {
            counts[p.asr.sample_index(&mut rng).unwrap()] += 1;
        }
        for c in counts {
            let f = c as f64 / 10_000.0;
            assert!((0.03..=0.07).contains(&f), "{f}");
        }
    }

    #[test]
    fn every_template_appears_within_ten_passes() {
        let p = PromptSet::builtin(20).unwrap();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut seen = [false; 20];
            for _ in 0..200 {
                seen[p.ser.sample_index(&mut rng).unwrap()] = true;
            }
            assert!(seen.iter().all(|&s| s), "seed {seed}");
        }
    }

    #[test]
    fn single_template_pool_is_constant() {
        let pool = PromptPool::parse(Task::Asr, "only one", 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            assert_eq!(pool.sample_prompt(&mut rng).unwrap(), "only one");
        }
    }

    #[test]
    fn same_seed_same_draws() {
        let p = PromptSet::builtin(20).unwrap();
        let mut a = ChaCha8Rng::seed_from_u64(4);
        let mut b = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            assert_eq!(
                p.joint.sample_prompt(&mut a).unwrap(),
                p.joint.sample_prompt(&mut b).unwrap()
            );
        }
    }

    #[test]
    fn emotion_order_is_a_uniform_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut first = [0usize; 9];
        for _ in 0..10_000 {
            let o = randomize_emotion_order(&EmotionCode::ALL, &mut rng).unwrap();
            let mut s = o.clone();
            s.sort();
            assert_eq!(s, EmotionCode::ALL.to_vec());
            first[o[0].index()] += 1;
        }
        for c in first {
            let f = c as f64 / 10_000.0;
            assert!((0.08..=0.14).contains(&f), "{f}");
        }
        assert_eq!(
            randomize_emotion_order(&[EmotionCode::N], &mut rng).unwrap(),
            vec![EmotionCode::N]
        );
        assert!(randomize_emotion_order(&[EmotionCode::N, EmotionCode::N], &mut rng).is_err());
        assert!(randomize_emotion_order(&[], &mut rng).is_err());
    }

    #[test]
    fn supplementary_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = binned();
        assert_eq!(render_supplementary(Some(&z), &HintSpec::default(), &mut rng), "");
        let spec = HintSpec {
            include_paralinguistics: true,
            include_gender: true,
            ..HintSpec::default()
        };
        let text = render_supplementary(Some(&z), &spec, &mut rng);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "The speaker in this audio is female.");
        assert!(INTRO_SENTENCES.contains(&lines[1]));
        let feats: Vec<&str> = lines[2..].to_vec();
        assert_eq!(feats.len(), 5);
        assert!(feats
            .iter()
            .all(|l| l.ends_with("'low'") || l.ends_with("'medium'") || l.ends_with("'high'")));
    }

    #[test]
    fn feature_order_is_shuffled() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = HintSpec {
            include_paralinguistics: true,
            ..HintSpec::default()
        };
        let z = binned();
        let n = 5000;
        let first = (0..n)
            .filter(|_| {
                let t = render_supplementary(Some(&z), &spec, &mut rng);
                t.lines().nth(1).unwrap().starts_with("- loudness")
            })
            .count();
        let f = first as f64 / n as f64;
        assert!((0.13..=0.27).contains(&f), "{f}");
    }

    #[test]
    fn nshot_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        assert_eq!(render_nshot(0, Task::Joint, &mut rng).unwrap(), "");
        let one = render_nshot(1, Task::Joint, &mut rng).unwrap();
        let lines: Vec<&str> = one.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[1].starts_with("| ASR: ") && lines[1].contains(" | Emotion: ") && lines[1].ends_with(" |"));
        assert!(matches!(render_nshot(10, Task::Ser, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn target_formats() {
        assert_eq!(
            format_target(Task::Ser, None, Some(EmotionCode::N)).unwrap(),
            "| Emotion: N |"
        );
        assert_eq!(
            format_target(Task::Joint, Some("hello world"), Some(EmotionCode::H)).unwrap(),
            "| ASR: hello world | Emotion: H |"
        );
        assert_eq!(format_target(Task::Asr, Some(""), None).unwrap(), "| ASR:  |");
        assert!(format_target(Task::Joint, Some("x"), None).is_err());
    }

    #[test]
    fn sample_building() {
        let p = PromptSet::builtin(20).unwrap();
        let z = binned();
        let u = UtteranceView {
            id: "u7",
            transcript: "we won the game",
            emotion: Some(EmotionCode::H),
            binned: Some(&z),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = build_sample(&u, Task::Asr, &HintSpec::default(), &p, &mut rng).unwrap();
        assert_eq!((s.aux.as_str(), s.target.as_str()), ("", "| ASR: we won the game |"));

        let hints = HintSpec {
            n_shot: 1,
            include_paralinguistics: true,
            include_gender: false,
        };
        let s = build_sample(&u, Task::Joint, &hints, &p, &mut rng).unwrap();
        assert_eq!(s.aux.matches(NSHOT_HEADER).count(), 1);
        assert_eq!(s.aux.lines().filter(|l| l.starts_with("| ASR:")).count(), 1);
        assert_eq!(s.aux.lines().filter(|l| INTRO_SENTENCES.contains(l)).count(), 1);

        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(
            build_sample(&u, Task::Joint, &hints, &p, &mut a).unwrap(),
            build_sample(&u, Task::Joint, &hints, &p, &mut b).unwrap()
        );

        let unlabeled = UtteranceView { emotion: None, ..u };
        assert!(matches!(
            build_sample(&unlabeled, Task::Ser, &hints, &p, &mut rng),
            Err(Error::InvalidInput(_))
        ));
    }
}

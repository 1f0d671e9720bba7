//! Synthetic verifiable tasks and the character-level tokenizer.
//!
//! Two task families stand in for real reasoning datasets at desk scale:
//! single-expression arithmetic and templated object-location stories with
//! false beliefs. Both generators are closed-world: the gold answer is
//! derivable from the prompt by the generator's own rules, so a rule-based
//! verifier can score completions exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use crate::error::{Error, Result};

/// Character-level tokenizer over a fixed printable alphabet.
///
/// Ids 0..=94 map to ASCII 0x20..=0x7E in order; id 95 is the newline, which
/// doubles as the end-of-record marker and decode stop token.
#[derive(Debug, Clone, Copy, Default)]
pub struct Tokenizer;

pub const NEWLINE_ID: usize = 95;
pub const VOCAB_SIZE: usize = 96;

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| match c {
                ' '..='~' => Ok(c as usize - 0x20),
                '\n' => Ok(NEWLINE_ID),
                other => Err(Error::Input(format!(
                    "character {other:?} is outside the printable alphabet"
                ))),
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&id| match id {
                NEWLINE_ID => '\n',
                v if v < 95 => (v as u8 + 0x20) as char,
                _ => '\u{FFFD}',
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskFamily {
    Arithmetic,
    BeliefTracking,
}

impl TaskFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskFamily::Arithmetic => "arithmetic",
            TaskFamily::BeliefTracking => "belief-tracking",
        }
    }

    pub fn parse(s: &str) -> Result<TaskFamily> {
        match s {
            "arithmetic" => Ok(TaskFamily::Arithmetic),
            "belief-tracking" => Ok(TaskFamily::BeliefTracking),
            other => Err(Error::Input(format!("unknown task family {other:?}"))),
        }
    }
}

/// One prompt with its gold answer.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskInstance {
    pub prompt: String,
    pub gold: String,
    pub family: TaskFamily,
    /// Generator seed this instance came from.
    pub seed: u64,
}

impl TaskInstance {
    /// Prompt with the gold answer spliced in; used as training text.
    pub fn full_text(&self) -> String {
        format!("{} {}", self.prompt, self.gold)
    }
}

pub const ANSWER_DELIMITER: &str = "A:";

/// Addition problems: `Q: 17+25= A:` with gold `42`.
pub fn gen_arithmetic(seed: u64, n: usize, operand_max: u64) -> Vec<TaskInstance> {
    assert!(operand_max >= 1, "operand_max must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let a = rng.gen_range(0..=operand_max);
            let b = rng.gen_range(0..=operand_max);
            TaskInstance {
                prompt: format!("Q: {a}+{b}= {ANSWER_DELIMITER}"),
                gold: (a + b).to_string(),
                family: TaskFamily::Arithmetic,
                seed,
            }
        })
        .collect()
}

const AGENTS: [&str; 2] = ["Amy", "Bob"];
const OBJECTS: [&str; 3] = ["key", "coin", "ring"];
const CONTAINERS: [&str; 4] = ["box", "drawer", "basket", "bag"];

/// Object-location stories with optional false beliefs.
///
/// One agent places the object, the other moves it `n_moves` times; the
/// queried agent may leave (and possibly come back) partway through. The
/// gold answer is the last location the queried agent observed.
pub fn gen_belief_tracking(seed: u64, n: usize, n_moves: usize) -> Vec<TaskInstance> {
    assert!(n_moves >= 1, "n_moves must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let queried = AGENTS[rng.gen_range(0..AGENTS.len())];
            let other = AGENTS.iter().find(|&&a| a != queried).unwrap();
            let object = OBJECTS[rng.gen_range(0..OBJECTS.len())];

            let mut location = CONTAINERS[rng.gen_range(0..CONTAINERS.len())];
            // The queried agent leaves before move `leave_at` (or never) and
            // may return before a later move.
            let leave_at = if rng.gen_bool(0.7) { Some(rng.gen_range(0..n_moves)) } else { None };
            let return_at = match leave_at {
                Some(l) if rng.gen_bool(0.3) => Some(rng.gen_range(l..=n_moves)),
                _ => None,
            };

            let mut sentences = Vec::new();
            let placer = if rng.gen_bool(0.5) { queried } else { other };
            sentences.push(format!("{placer} puts the {object} in the {location}."));
            let mut present = true;
            let mut belief = location;

            for mv in 0..n_moves {
                if leave_at == Some(mv) {
                    sentences.push(format!("{queried} leaves the room."));
                    present = false;
                }
                if return_at == Some(mv) {
                    sentences.push(format!("{queried} returns."));
                    present = true;
                }
                let next = loop {
                    let c = CONTAINERS[rng.gen_range(0..CONTAINERS.len())];
                    if c != location {
                        break c;
                    }
                };
                sentences.push(format!("{other} moves the {object} to the {next}."));
                location = next;
                if present {
                    belief = location;
                }
            }
            if return_at == Some(n_moves) {
                sentences.push(format!("{queried} returns."));
            }
            sentences.push(format!(
                "Where does {queried} think the {object} is? {ANSWER_DELIMITER}"
            ));

            TaskInstance {
                prompt: sentences.join(" "),
                gold: belief.to_string(),
                family: TaskFamily::BeliefTracking,
                seed,
            }
        })
        .collect()
}

/// Exact-match verifier: 1 iff the text after the last answer delimiter,
/// trimmed and case-folded, equals the gold answer. Missing delimiter is 0.
pub fn verify(text: &str, instance: &TaskInstance) -> u8 {
    match text.rfind(ANSWER_DELIMITER) {
        None => 0,
        Some(idx) => {
            let span = &text[idx + ANSWER_DELIMITER.len()..];
            let answer = span.trim().to_lowercase();
            u8::from(answer == instance.gold.trim().to_lowercase())
        }
    }
}

/// Dump instances as tab-separated records: prompt, gold, family, seed.
/// The alphabet has no tabs, so no escaping is needed.
pub fn dump_dataset(instances: &[TaskInstance], path: &Path) -> Result<()> {
    let mut out = String::new();
    for inst in instances {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            inst.prompt,
            inst.gold,
            inst.family.as_str(),
            inst.seed
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<TaskInstance>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .map(|(ln, line)| {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::Input(format!(
                    "line {}: expected 4 tab-separated fields, got {}",
                    ln + 1,
                    fields.len()
                )));
            }
            Ok(TaskInstance {
                prompt: fields[0].to_string(),
                gold: fields[1].to_string(),
                family: TaskFamily::parse(fields[2])?,
                seed: fields[3]
                    .parse()
                    .map_err(|_| Error::Input(format!("line {}: bad seed", ln + 1)))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn arithmetic_formats_and_verifies() {
        let batch = gen_arithmetic(1, 50, 9);
        for inst in &batch {
            assert!(inst.prompt.starts_with("Q: "));
            assert!(inst.prompt.ends_with("= A:"));
            assert_eq!(verify(&inst.full_text(), inst), 1);
        }
        // hand case: an instance built like the generator would
        let inst = TaskInstance {
            prompt: "Q: 3+4= A:".into(),
            gold: "7".into(),
            family: TaskFamily::Arithmetic,
            seed: 1,
        };
        assert_eq!(verify("Q: 3+4= A: 7", &inst), 1);
    }

    #[test]
    fn arithmetic_is_deterministic_per_seed() {
        assert_eq!(gen_arithmetic(5, 100, 50), gen_arithmetic(5, 100, 50));
        assert_ne!(gen_arithmetic(5, 100, 50), gen_arithmetic(6, 100, 50));
    }

    #[test]
    fn distinct_seeds_overlap_below_half() {
        let a = gen_arithmetic(1, 200, 50);
        let b = gen_arithmetic(2, 200, 50);
        let mut counts: HashMap<&str, isize> = HashMap::new();
        for inst in &a {
            *counts.entry(inst.prompt.as_str()).or_default() += 1;
        }
        let mut overlap = 0;
        for inst in &b {
            if let Some(c) = counts.get_mut(inst.prompt.as_str()) {
                if *c > 0 {
                    *c -= 1;
                    overlap += 1;
                }
            }
        }
        assert!(
            (overlap as f64) < 0.5 * a.len() as f64,
            "multiset overlap {overlap} of {}",
            a.len()
        );
    }

    #[test]
    fn verifier_contract() {
        let inst = TaskInstance {
            prompt: "Q: 1+1= A:".into(),
            gold: "42".into(),
            family: TaskFamily::Arithmetic,
            seed: 0,
        };
        assert_eq!(verify("A: 42", &inst), 1);
        assert_eq!(verify("A: 41", &inst), 0);
        assert_eq!(verify("no delimiter here", &inst), 0);
        // last delimiter wins
        assert_eq!(verify("A: 41 and later A: 42", &inst), 1);
        assert_eq!(verify("A:   42  ", &inst), 1);
    }

    #[test]
    fn belief_stories_match_independent_simulator() {
        for seed in 0..10u64 {
            for n_moves in 1..=3 {
                let batch = gen_belief_tracking(seed, 100, n_moves);
                for inst in &batch {
                    let sim = simulate_story(&inst.prompt);
                    assert_eq!(
                        sim, inst.gold,
                        "simulator disagrees on story: {}",
                        inst.prompt
                    );
                }
            }
        }
    }

    #[test]
    fn belief_hand_cases() {
        // no unobserved change: gold is the true location
        let observed = TaskInstance {
            prompt: "Amy puts the key in the box. Bob moves the key to the drawer. \
                     Where does Amy think the key is? A:"
                .into(),
            gold: "drawer".into(),
            family: TaskFamily::BeliefTracking,
            seed: 0,
        };
        assert_eq!(simulate_story(&observed.prompt), observed.gold);
        // one unobserved move: gold is the original location (false belief)
        let unobserved = TaskInstance {
            prompt: "Amy puts the key in the box. Amy leaves the room. \
                     Bob moves the key to the drawer. Where does Amy think the key is? A:"
                .into(),
            gold: "box".into(),
            family: TaskFamily::BeliefTracking,
            seed: 0,
        };
        assert_eq!(simulate_story(&unobserved.prompt), unobserved.gold);
    }

    /// Independent oracle: parse the story text and replay beliefs.
    fn simulate_story(prompt: &str) -> String {
        let mut present: HashMap<String, bool> = HashMap::new();
        let mut beliefs: HashMap<String, String> = HashMap::new();
        let mut queried = String::new();

        for sentence in prompt.split(". ") {
            let sentence = sentence.trim().trim_end_matches('.');
            let words: Vec<&str> = sentence.split_whitespace().collect();
            if sentence.starts_with("Where does ") {
                queried = words[2].to_string();
                continue;
            }
            match words.as_slice() {
                [agent, "puts", "the", _obj, "in", "the", cont] => {
                    for a in AGENTS {
                        if *present.get(a).unwrap_or(&true) {
                            beliefs.insert(a.to_string(), cont.to_string());
                        }
                    }
                    let _ = agent;
                }
                [agent, "moves", "the", _obj, "to", "the", cont] => {
                    for a in AGENTS {
                        if *present.get(a).unwrap_or(&true) {
                            beliefs.insert(a.to_string(), cont.to_string());
                        }
                    }
                    let _ = agent;
                }
                [agent, "leaves", "the", "room"] => {
                    present.insert(agent.to_string(), false);
                }
                [agent, "returns"] => {
                    present.insert(agent.to_string(), true);
                }
                other => panic!("unparseable sentence {other:?}"),
            }
        }
        beliefs.get(&queried).cloned().unwrap_or_default()
    }

    #[test]
    fn dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.tsv");
        let mut all = gen_arithmetic(3, 20, 30);
        all.extend(gen_belief_tracking(4, 20, 2));
        dump_dataset(&all, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(all, loaded);
    }

    #[test]
    fn tokenizer_rejects_non_printable() {
        let tok = Tokenizer;
        assert!(tok.encode("hello\tworld").is_err());
        assert!(tok.encode("héllo").is_err());
        assert!(tok.encode("ok\nfine").is_ok());
    }
}

//! Seeded synthetic tagging corpora.
//!
//! Each sentence is about one entity type: it names a marker word of that
//! type and one or two mentions drawn from the type's own word pool (a head
//! word, optionally followed by a tail word). A fraction of each task's
//! sentences are about another task's types and tagged all `O`, so the
//! tasks send conflicting signals about the same words through the shared
//! layers.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{RawSentence, TaskDataset, Vocab};
use crate::training::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub task_id: String,
    pub types: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub tasks: Vec<SyntheticTask>,
    pub train_sentences: usize,
    pub dev_sentences: usize,
    pub test_sentences: usize,
    pub filler_words: usize,
    /// Size of each type's entity pool.
    pub entity_words: usize,
    pub markers_per_type: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a sentence is about another task's type (tagged
    /// all `O` in this task).
    pub foreign_mention_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// Two tasks (3 and 2 types), 500/100/100 sentences each and a
    /// 170-word vocabulary.
    fn default() -> Self {
        let task = |id: &str, types: &[&str]| SyntheticTask {
            task_id: id.to_string(),
            types: types.iter().map(|s| s.to_string()).collect(),
        };
        Self {
            tasks: vec![
                task("A", &["Chemical", "Disease", "Gene"]),
                task("B", &["Cell", "Species"]),
            ],
            train_sentences: 500,
            dev_sentences: 100,
            test_sentences: 100,
            filler_words: 70,
            entity_words: 18,
            markers_per_type: 2,
            min_len: 6,
            max_len: 14,
            foreign_mention_rate: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub vocab: Vocab,
    pub datasets: Vec<TaskDataset>,
}

/// Head words start mentions; tail words extend two-word mentions.
struct Pool {
    heads: Vec<String>,
    tails: Vec<String>,
}

impl Pool {
    fn new(prefix: &str, size: usize) -> Self {
        let words: Vec<String> = (0..size).map(|i| format!("{prefix}{i}")).collect();
        let split = (size * 2).div_ceil(3);
        Self {
            heads: words[..split].to_vec(),
            tails: words[split..].to_vec(),
        }
    }

    fn words(&self) -> impl Iterator<Item = &String> {
        self.heads.iter().chain(&self.tails)
    }
}

struct Lexicon {
    fillers: Vec<String>,
    /// Per (task, type): its entity pool and its marker words.
    typed: Vec<Vec<(Pool, Vec<String>)>>,
}

impl Lexicon {
    fn new(spec: &SyntheticSpec) -> Self {
        let typed = spec
            .tasks
            .iter()
            .map(|t| {
                t.types
                    .iter()
                    .map(|ty| {
                        let stem = ty.to_lowercase();
                        let markers = (0..spec.markers_per_type)
                            .map(|k| format!("{stem}{k}"))
                            .collect();
                        (Pool::new(&format!("{stem}_"), spec.entity_words), markers)
                    })
                    .collect()
            })
            .collect();
        Self {
            fillers: (0..spec.filler_words).map(|i| format!("w{i}")).collect(),
            typed,
        }
    }

    fn all_words(&self) -> impl Iterator<Item = &String> {
        let typed = self.typed.iter().flatten();
        self.fillers
            .iter()
            .chain(typed.clone().flat_map(|(pool, _)| pool.words()))
            .chain(typed.flat_map(|(_, markers)| markers))
    }
}

fn sentence(spec: &SyntheticSpec, lex: &Lexicon, task: usize, rng: &mut ChaCha8Rng) -> RawSentence {
    let foreign = spec.tasks.len() > 1 && rng.gen_bool(spec.foreign_mention_rate);
    let owner = if foreign {
        let others: Vec<usize> = (0..spec.tasks.len()).filter(|&t| t != task).collect();
        *others.choose(rng).unwrap()
    } else {
        task
    };
    let ty = rng.gen_range(0..spec.tasks[owner].types.len());
    let type_name = &spec.tasks[owner].types[ty];
    let label = |prefix: &str| {
        if owner == task {
            format!("{prefix}-{type_name}")
        } else {
            "O".to_string()
        }
    };

    // Segments: the marker, one or two mentions, and fillers between them so
    // that mentions never touch.
    let mut segments: Vec<Vec<(String, String)>> = vec![vec![(
        lex.typed[owner][ty].1.choose(rng).unwrap().clone(),
        "O".into(),
    )]];
    for _ in 0..rng.gen_range(1..=2) {
        let pool = &lex.typed[owner][ty].0;
        let mut mention = vec![(pool.heads.choose(rng).unwrap().clone(), label("B"))];
        if rng.gen_bool(0.5) {
            mention.push((pool.tails.choose(rng).unwrap().clone(), label("I")));
        }
        segments.push(mention);
    }
    segments.shuffle(rng);
    let target = rng.gen_range(spec.min_len..=spec.max_len);
    let used: usize = segments.iter().map(Vec::len).sum::<usize>() + segments.len() - 1;
    let mut spare = target.saturating_sub(used);
    let mut pairs = Vec::new();
    for (i, seg) in segments.into_iter().enumerate() {
        let extra = rng.gen_range(0..=spare.min(3));
        spare -= extra;
        let gap = extra + usize::from(i > 0);
        for _ in 0..gap {
            pairs.push((lex.fillers.choose(rng).unwrap().clone(), "O".to_string()));
        }
        pairs.extend(seg);
    }
    for _ in 0..spare {
        pairs.push((lex.fillers.choose(rng).unwrap().clone(), "O".to_string()));
    }
    let (words, labels) = pairs.into_iter().unzip();
    RawSentence::new(words, labels).expect("generated labels are valid")
}

/// Deterministic in `spec`; every task draws from its own generator.
pub fn generate(spec: &SyntheticSpec) -> SyntheticCorpus {
    let lex = Lexicon::new(spec);
    let vocab = Vocab::from_words(lex.all_words());
    let datasets = spec
        .tasks
        .iter()
        .enumerate()
        .map(|(t, task)| {
            let split = |stream: u64, n: usize| -> Vec<RawSentence> {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, t as u64, stream));
                (0..n).map(|_| sentence(spec, &lex, t, &mut rng)).collect()
            };
            TaskDataset {
                task_id: task.task_id.clone(),
                train: split(0, spec.train_sentences),
                dev: split(1, spec.dev_sentences),
                test: split(2, spec.test_sentences),
            }
        })
        .collect();
    SyntheticCorpus { vocab, datasets }
}

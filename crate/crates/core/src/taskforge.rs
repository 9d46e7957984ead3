//! Synthetic five-task benchmark.
//!
//! A seeded world assigns every entity token a latent type (`T1`/`T2`),
//! fixes a relation rule table and antonym pairs among attribute tokens.
//! Entity tokens are split into source-visible and target-only subsets so that
//! target corpora share the latent rules but no entity surface forms with the
//! source corpora.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

pub const TYPE_LABELS: [&str; 2] = ["T1", "T2"];
pub const QA_WORDS: [&str; 7] = ["which", "is", "?", "A", "B", "C", "D"];
pub const NLI_LABELS: [&str; 3] = ["entail", "contradict", "neutral"];
pub const QA_LETTERS: [&str; 4] = ["A", "B", "C", "D"];
pub const SEP: &str = "<sep>";
/// Instruction words that open task-formatted pretraining lines.
pub const TASK_MARKERS: [&str; 5] = ["ner", "re", "qa", "nli", "sum"];

const N_TRIGGERS: usize = 2;
const N_RELATIONS: usize = 4;
const N_ATTRIBUTE_PAIRS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskType {
    Ner,
    Re,
    Qa,
    Nli,
    Sum,
}

impl TaskType {
    pub const ALL: [TaskType; 5] = [
        TaskType::Ner,
        TaskType::Re,
        TaskType::Qa,
        TaskType::Nli,
        TaskType::Sum,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::Ner => "NER",
            TaskType::Re => "RE",
            TaskType::Qa => "QA",
            TaskType::Nli => "NLI",
            TaskType::Sum => "SUM",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn marker(self) -> &'static str {
        TASK_MARKERS[self.index()]
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "NER" => Ok(TaskType::Ner),
            "RE" => Ok(TaskType::Re),
            "QA" => Ok(TaskType::Qa),
            "NLI" => Ok(TaskType::Nli),
            "SUM" => Ok(TaskType::Sum),
            _ => Err(Error::contract(format!("unknown task type {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Source,
    Target,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Source => "source",
            Role::Target => "target",
        }
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Role::Source),
            "target" => Ok(Role::Target),
            _ => Err(Error::contract(format!("unknown role {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            _ => Err(Error::contract(format!("unknown split {s:?}"))),
        }
    }
}

/// One supervised example; `input` and `target` are space-separated tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskRecord {
    pub task_type: TaskType,
    pub dataset_id: String,
    pub split: Split,
    pub input: String,
    pub target: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WorldSpec {
    pub seed: u64,
    /// Content tokens, excluding specials.
    pub base_vocab: usize,
    pub entities_per_family: usize,
    pub target_only_per_family: usize,
    pub pretrain_lines: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            seed: 7,
            base_vocab: 64,
            entities_per_family: 12,
            target_only_per_family: 4,
            pretrain_lines: 3000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct World {
    pub spec: WorldSpec,
    entity_type: BTreeMap<String, usize>,
    /// `[family][role]` entity pools.
    pools: [[Vec<String>; 2]; 2],
    pub triggers: Vec<String>,
    pub relation_labels: Vec<String>,
    /// Indexed by `(type_a * 2 + type_b) * N_TRIGGERS + trigger`.
    rules: Vec<usize>,
    pub attributes: Vec<String>,
    antonym: BTreeMap<String, String>,
    pub fillers: Vec<String>,
    vocabulary: Vec<String>,
    /// Plain token-stream lines for backbone pretraining.
    pub pretrain_corpus: Vec<String>,
}

fn role_index(role: Role) -> usize {
    match role {
        Role::Source => 0,
        Role::Target => 1,
    }
}

pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    let e = spec.entities_per_family;
    if spec.target_only_per_family < 4 {
        return Err(Error::contract(
            "each family needs at least 4 target-only tokens",
        ));
    }
    if e < spec.target_only_per_family + 4 {
        return Err(Error::contract(
            "each family needs at least 4 source-visible tokens",
        ));
    }
    let fixed = TYPE_LABELS.len()
        + N_RELATIONS
        + N_TRIGGERS
        + QA_WORDS.len()
        + NLI_LABELS.len()
        + 2 * N_ATTRIBUTE_PAIRS
        + TASK_MARKERS.len();
    let needed = fixed + 2 * e + 4;
    if spec.base_vocab < needed {
        return Err(Error::contract(format!(
            "base vocabulary {} too small: families need at least {needed}",
            spec.base_vocab
        )));
    }
    let n_fillers = spec.base_vocab - fixed - 2 * e;
    let mut rng = seeds::rng(seeds::mix_str(spec.seed, "world"));

    let entities: Vec<String> = (0..2 * e).map(|i| format!("e{i}")).collect();
    let mut order = entities.clone();
    order.shuffle(&mut rng);
    let mut entity_type = BTreeMap::new();
    let mut pools: [[Vec<String>; 2]; 2] = Default::default();
    for (fam, chunk) in order.chunks(e).enumerate() {
        let n_src = e - spec.target_only_per_family;
        for (i, tok) in chunk.iter().enumerate() {
            entity_type.insert(tok.clone(), fam);
            pools[fam][usize::from(i >= n_src)].push(tok.clone());
        }
        for p in &mut pools[fam] {
            p.sort_by_key(|t| t[1..].parse::<usize>().unwrap_or(0));
        }
    }

    let triggers: Vec<String> = (0..N_TRIGGERS).map(|i| format!("trg{i}")).collect();
    let relation_labels: Vec<String> = (0..N_RELATIONS).map(|i| format!("rel{i}")).collect();
    let mut rules: Vec<usize> = (0..4 * N_TRIGGERS).map(|i| i % N_RELATIONS).collect();
    rules.shuffle(&mut rng);

    let attributes: Vec<String> = (0..2 * N_ATTRIBUTE_PAIRS)
        .map(|i| format!("a{i}"))
        .collect();
    let mut attr_order = attributes.clone();
    attr_order.shuffle(&mut rng);
    let mut antonym = BTreeMap::new();
    for pair in attr_order.chunks(2) {
        antonym.insert(pair[0].clone(), pair[1].clone());
        antonym.insert(pair[1].clone(), pair[0].clone());
    }
    let fillers: Vec<String> = (0..n_fillers).map(|i| format!("w{i}")).collect();

    let mut vocabulary = entities.clone();
    vocabulary.extend(TYPE_LABELS.iter().map(|s| s.to_string()));
    vocabulary.extend(relation_labels.iter().cloned());
    vocabulary.extend(triggers.iter().cloned());
    vocabulary.extend(QA_WORDS.iter().map(|s| s.to_string()));
    vocabulary.extend(NLI_LABELS.iter().map(|s| s.to_string()));
    vocabulary.extend(attributes.iter().cloned());
    vocabulary.extend(TASK_MARKERS.iter().map(|s| s.to_string()));
    vocabulary.extend(fillers.iter().cloned());
    debug_assert_eq!(vocabulary.len(), spec.base_vocab);

    let mut world = World {
        spec: spec.clone(),
        entity_type,
        pools,
        triggers,
        relation_labels,
        rules,
        attributes,
        antonym,
        fillers,
        vocabulary,
        pretrain_corpus: Vec::new(),
    };
    let mut prng = seeds::rng(seeds::mix_str(spec.seed, "pretrain"));
    world.pretrain_corpus = (0..spec.pretrain_lines)
        .map(|_| world.pretrain_line(&mut prng))
        .collect();
    Ok(world)
}

impl World {
    /// Content tokens in id order (specials excluded).
    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn entities(&self, role: Role) -> Vec<&str> {
        let r = role_index(role);
        let mut all: Vec<&str> = self.pools[0][r]
            .iter()
            .chain(&self.pools[1][r])
            .map(String::as_str)
            .collect();
        all.sort_by_key(|t| t[1..].parse::<usize>().unwrap_or(0));
        all
    }

    pub fn pool(&self, family: usize, role: Role) -> &[String] {
        &self.pools[family][role_index(role)]
    }

    pub fn entity_family(&self, tok: &str) -> Option<usize> {
        self.entity_type.get(tok).copied()
    }

    pub fn antonym_of(&self, tok: &str) -> Option<&str> {
        self.antonym.get(tok).map(String::as_str)
    }

    pub fn relation(&self, type_a: usize, type_b: usize, trigger: usize) -> &str {
        &self.relation_labels[self.rules[(type_a * 2 + type_b) * N_TRIGGERS + trigger]]
    }

    fn trigger_index(&self, tok: &str) -> Option<usize> {
        self.triggers.iter().position(|t| t == tok)
    }

    /// Half the lines are task records over either entity role, `fillers marker input | target`;
    /// the rest state type facts, relation rules, antonyms or filler text.
    fn pretrain_line(&self, rng: &mut ChaCha8Rng) -> String {
        let ents: Vec<&String> = self.entity_type.keys().collect();
        match rng.random_range(0..20) {
            0..=9 => {
                let task = TaskType::ALL[rng.random_range(0..TaskType::ALL.len())];
                let role = if rng.random_bool(0.5) {
                    Role::Source
                } else {
                    Role::Target
                };
                let (input, target) = self.make_record(task, role, rng);
                let n = rng.random_range(0..=8);
                let mut toks: Vec<&str> = (0..n)
                    .map(|_| self.fillers.choose(rng).expect("fillers").as_str())
                    .collect();
                toks.push(task.marker());
                format!("{} {input} | {target}", toks.join(" "))
            }
            10..=13 => {
                let e = ents.choose(rng).expect("entities");
                format!("{e} is {}", TYPE_LABELS[self.entity_type[*e]])
            }
            14..=16 => {
                let a = ents.choose(rng).expect("entities");
                let b = ents.choose(rng).expect("entities");
                let t = rng.random_range(0..N_TRIGGERS);
                let rel = self.relation(self.entity_type[*a], self.entity_type[*b], t);
                format!("{a} {} {b} {rel}", self.triggers[t])
            }
            17 => {
                let a = self.attributes.choose(rng).expect("attributes");
                format!("{a} contradict {}", self.antonym[a])
            }
            _ => {
                let len = rng.random_range(4..=9);
                (0..len)
                    .map(|_| {
                        if rng.random_bool(0.3) {
                            ents.choose(rng).expect("entities").as_str()
                        } else {
                            self.fillers.choose(rng).expect("fillers").as_str()
                        }
                    })
                    .collect::<Vec<_>>()
                    .join(" ")
            }
        }
    }

    fn sentence_with(&self, rng: &mut ChaCha8Rng, len: usize, specials: &[&str]) -> Vec<String> {
        let mut toks: Vec<String> = (0..len)
            .map(|_| self.fillers.choose(rng).expect("fillers").clone())
            .collect();
        let mut slots: Vec<usize> = (0..len).collect();
        slots.shuffle(rng);
        let mut chosen: Vec<usize> = slots[..specials.len()].to_vec();
        chosen.sort_unstable();
        for (slot, s) in chosen.into_iter().zip(specials) {
            toks[slot] = s.to_string();
        }
        toks
    }

    fn distinct_entities<'a>(&'a self, rng: &mut ChaCha8Rng, role: Role, n: usize) -> Vec<&'a str> {
        let r = role_index(role);
        let all: Vec<&str> = self.pools[0][r]
            .iter()
            .chain(&self.pools[1][r])
            .map(String::as_str)
            .collect();
        all.choose_multiple(rng, n).copied().collect()
    }

    fn make_record(&self, task: TaskType, role: Role, rng: &mut ChaCha8Rng) -> (String, String) {
        match task {
            TaskType::Ner => {
                let n_ent = rng.random_range(1..=3);
                let len = rng.random_range(6..=12);
                let ents = self.distinct_entities(rng, role, n_ent);
                let toks = self.sentence_with(rng, len, &ents);
                let input = toks.join(" ");
                let target = self.ner_target(&toks);
                (input, target)
            }
            TaskType::Re => {
                let len = rng.random_range(6..=10);
                let ents = self.distinct_entities(rng, role, 2);
                let trig = self.triggers.choose(rng).expect("triggers").as_str();
                let mut specials = ents.clone();
                specials.push(trig);
                specials.shuffle(rng);
                let toks = self.sentence_with(rng, len, &specials);
                let target = self
                    .re_target(&toks)
                    .expect("generated RE sentence is well formed");
                (toks.join(" "), target)
            }
            TaskType::Qa => {
                let queried = rng.random_range(0..2);
                let r = role_index(role);
                let answer = self.pools[queried][r].choose(rng).expect("pool").as_str();
                let distractors: Vec<&str> = self.pools[1 - queried][r]
                    .choose_multiple(rng, 3)
                    .map(String::as_str)
                    .collect();
                let slot = rng.random_range(0..4);
                let mut opts = distractors;
                opts.insert(slot, answer);
                let mut toks = vec![
                    "which".to_string(),
                    "is".into(),
                    TYPE_LABELS[queried].into(),
                    "?".into(),
                    SEP.into(),
                ];
                for (letter, tok) in QA_LETTERS.iter().zip(&opts) {
                    toks.push(letter.to_string());
                    toks.push(tok.to_string());
                }
                (toks.join(" "), QA_LETTERS[slot].to_string())
            }
            TaskType::Nli => self.make_nli(role, rng),
            TaskType::Sum => {
                let n_ent = rng.random_range(1..=4);
                let n_attr = rng.random_range(0..=2);
                let len = rng.random_range(6..=12);
                let mut specials = self.distinct_entities(rng, role, n_ent);
                specials.extend(
                    self.attributes
                        .choose_multiple(rng, n_attr)
                        .map(String::as_str),
                );
                specials.shuffle(rng);
                let toks = self.sentence_with(rng, len, &specials);
                let target = self.sum_target(&toks);
                (toks.join(" "), target)
            }
        }
    }

    fn make_nli(&self, role: Role, rng: &mut ChaCha8Rng) -> (String, String) {
        let n_ent = rng.random_range(2..=4);
        let n_attr = rng.random_range(1..=2);
        let mut pairs: Vec<&str> = Vec::new();
        let mut used = BTreeSet::new();
        for a in self.attributes.choose_multiple(rng, self.attributes.len()) {
            if pairs.len() == n_attr {
                break;
            }
            if !used.contains(a.as_str()) {
                used.insert(a.as_str());
                used.insert(self.antonym[a].as_str());
                pairs.push(a.as_str());
            }
        }
        let mut premise: Vec<&str> = self.distinct_entities(rng, role, n_ent);
        premise.extend(&pairs);
        premise.shuffle(rng);
        let label = rng.random_range(0..3);
        let mut hyp: Vec<&str> = Vec::new();
        match label {
            0 => {
                let k = rng.random_range(1..=2);
                hyp.extend(premise.choose_multiple(rng, k).copied());
            }
            1 => {
                let a = pairs.choose(rng).expect("at least one attribute");
                hyp.push(self.antonym[*a].as_str());
                if rng.random_bool(0.5) {
                    hyp.push(premise.choose(rng).expect("premise"));
                }
            }
            _ => {
                let fresh_attrs: Vec<&str> = self
                    .attributes
                    .iter()
                    .map(String::as_str)
                    .filter(|a| !used.contains(a))
                    .collect();
                let r = role_index(role);
                let fresh_ents: Vec<&str> = self.pools[0][r]
                    .iter()
                    .chain(&self.pools[1][r])
                    .map(String::as_str)
                    .filter(|e| !premise.contains(e))
                    .collect();
                let novel = if !fresh_attrs.is_empty() && rng.random_bool(0.5) {
                    *fresh_attrs.choose(rng).expect("non-empty")
                } else {
                    *fresh_ents.choose(rng).expect("pool larger than premise")
                };
                hyp.push(novel);
                if rng.random_bool(0.5) {
                    hyp.push(premise.choose(rng).expect("premise"));
                }
            }
        }
        hyp.shuffle(rng);
        let input = format!("{} {SEP} {}", premise.join(" "), hyp.join(" "));
        let target = NLI_LABELS[label].to_string();
        debug_assert_eq!(self.nli_target(&premise, &hyp), target);
        (input, target)
    }

    fn ner_target(&self, toks: &[String]) -> String {
        toks.iter()
            .filter_map(|t| {
                self.entity_family(t)
                    .map(|f| format!("{t} : {}", TYPE_LABELS[f]))
            })
            .collect::<Vec<_>>()
            .join(" ; ")
    }

    fn sum_target(&self, toks: &[String]) -> String {
        toks.iter()
            .filter(|t| self.entity_family(t).is_some())
            .cloned()
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn re_target(&self, toks: &[String]) -> Result<String> {
        let ents: Vec<usize> = toks.iter().filter_map(|t| self.entity_family(t)).collect();
        let trig: Vec<usize> = toks.iter().filter_map(|t| self.trigger_index(t)).collect();
        match (ents.as_slice(), trig.as_slice()) {
            ([a, b], [t]) => Ok(self.relation(*a, *b, *t).to_string()),
            _ => Err(Error::contract(
                "RE input needs exactly two entities and one trigger",
            )),
        }
    }

    fn nli_target(&self, premise: &[&str], hyp: &[&str]) -> String {
        let contradicts = hyp
            .iter()
            .any(|h| self.antonym_of(h).is_some_and(|a| premise.contains(&a)));
        let label = if contradicts {
            "contradict"
        } else if hyp.iter().all(|h| premise.contains(h)) {
            "entail"
        } else {
            "neutral"
        };
        label.to_string()
    }

    /// Rule-based answer derived only from the input and the world's latent tables.
    pub fn oracle_target(&self, task: TaskType, input: &str) -> Result<String> {
        let toks: Vec<String> = input.split_whitespace().map(String::from).collect();
        match task {
            TaskType::Ner => Ok(self.ner_target(&toks)),
            TaskType::Sum => Ok(self.sum_target(&toks)),
            TaskType::Re => self.re_target(&toks),
            TaskType::Qa => {
                let queried = TYPE_LABELS
                    .iter()
                    .position(|t| toks.get(2).map(String::as_str) == Some(*t))
                    .ok_or_else(|| Error::contract("QA input lacks a type query"))?;
                let sep = toks
                    .iter()
                    .position(|t| t == SEP)
                    .ok_or_else(|| Error::contract("QA input lacks <sep>"))?;
                toks[sep + 1..]
                    .chunks(2)
                    .find(|pair| pair.len() == 2 && self.entity_family(&pair[1]) == Some(queried))
                    .map(|pair| pair[0].clone())
                    .ok_or_else(|| Error::contract("QA input has no option of the queried type"))
            }
            TaskType::Nli => {
                let sep = toks
                    .iter()
                    .position(|t| t == SEP)
                    .ok_or_else(|| Error::contract("NLI input lacks <sep>"))?;
                let premise: Vec<&str> = toks[..sep].iter().map(String::as_str).collect();
                let hyp: Vec<&str> = toks[sep + 1..].iter().map(String::as_str).collect();
                Ok(self.nli_target(&premise, &hyp))
            }
        }
    }
}

/// Generates `n` records with a seeded 70/15/15 train/validation/test split.
pub fn generate_task_corpus(
    world: &World,
    task: TaskType,
    n: usize,
    role: Role,
    dataset_id: &str,
    seed: u64,
) -> Result<Vec<TaskRecord>> {
    if n < 10 {
        return Err(Error::contract(format!(
            "corpus size {n} below the minimum of 10"
        )));
    }
    let mut rng = seeds::rng(seeds::mix_str(
        seeds::mix(world.spec.seed, seed),
        dataset_id,
    ));
    let n_train = (n as f64 * 0.70).round() as usize;
    let n_val = (n as f64 * 0.15).round() as usize;
    let mut splits: Vec<Split> = (0..n)
        .map(|i| {
            if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Validation
            } else {
                Split::Test
            }
        })
        .collect();
    splits.shuffle(&mut rng);
    Ok(splits
        .into_iter()
        .map(|split| {
            let (input, target) = world.make_record(task, role, &mut rng);
            TaskRecord {
                task_type: task,
                dataset_id: dataset_id.to_string(),
                split,
                input,
                target,
            }
        })
        .collect())
}

pub fn split_of(records: &[TaskRecord], split: Split) -> Vec<&TaskRecord> {
    records.iter().filter(|r| r.split == split).collect()
}

pub fn write_dataset<W: Write>(w: &mut W, records: &[TaskRecord]) -> Result<()> {
    for r in records {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            r.task_type,
            r.dataset_id,
            r.split.as_str(),
            r.input,
            r.target
        )?;
    }
    Ok(())
}

pub fn read_dataset<R: Read>(r: R) -> Result<Vec<TaskRecord>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 5 tab-separated fields, got {}", fields.len()),
            });
        }
        let parse_err = |e: Error| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        };
        out.push(TaskRecord {
            task_type: fields[0].parse().map_err(parse_err)?,
            dataset_id: fields[1].to_string(),
            split: fields[2].parse().map_err(parse_err)?,
            input: fields[3].to_string(),
            target: fields[4].to_string(),
        });
    }
    Ok(out)
}

/// Serializes the world's latent tables as canonical `key=value` lines.
pub fn describe_world(world: &World) -> String {
    let mut s = String::new();
    let spec = &world.spec;
    s.push_str(&format!(
        "seed={}\nbase_vocab={}\nentities_per_family={}\ntarget_only_per_family={}\npretrain_lines={}\n",
        spec.seed, spec.base_vocab, spec.entities_per_family, spec.target_only_per_family, spec.pretrain_lines
    ));
    for (fam, label) in TYPE_LABELS.iter().enumerate() {
        for role in [Role::Source, Role::Target] {
            s.push_str(&format!(
                "{label}.{}={}\n",
                role.as_str(),
                world.pool(fam, role).join(" ")
            ));
        }
    }
    for a in 0..2 {
        for b in 0..2 {
            for t in 0..N_TRIGGERS {
                s.push_str(&format!(
                    "rule.{}.{}.{}={}\n",
                    TYPE_LABELS[a],
                    TYPE_LABELS[b],
                    world.triggers[t],
                    world.relation(a, b, t)
                ));
            }
        }
    }
    for (a, b) in &world.antonym {
        if a < b {
            s.push_str(&format!("antonym.{a}={b}\n"));
        }
    }
    s
}

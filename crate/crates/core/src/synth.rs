//! Deterministic toy world for desk-scale experiments.
//!
//! Rules are conjunctions of conditions drawn from a closed phrase grammar.
//! Every instance fixes a state per condition of its gold rule: satisfied by
//! the scenario, answered `Yes` or `No` in the history, or unresolved. The
//! gold answer follows directly: `No` if any condition was answered `No`,
//! `Yes` if all are satisfied, otherwise the follow-up question of the first
//! unresolved condition.
//!
//! Rules come in groups that share a benefit name, so the question alone does
//! not identify the gold rule. Instances whose dialogue would be equally
//! consistent with a group mate that implies a different answer are
//! rejected, which keeps every instance answerable from its inputs.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    Answer, DatasetSplit, DialogueInstance, DialogueTurn, KnowledgeBase, RuleDocument, SplitName,
};
use crate::entail::EntailmentLabel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_rules: usize,
    /// Inclusive range of conditions per rule.
    pub conditions_per_rule: (usize, usize),
    /// Cap on the number of words taken from each lexicon list.
    pub vocab_size: usize,
    pub num_train: usize,
    pub num_dev: usize,
    pub num_test: usize,
    pub seed: u64,
    pub unseen_fraction: f64,
    /// Rules sharing one benefit name.
    pub rules_per_benefit: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_rules: 40,
            conditions_per_rule: (2, 4),
            vocab_size: 16,
            num_train: 2000,
            num_dev: 200,
            num_test: 200,
            seed: 7,
            unseen_fraction: 0.3,
            rules_per_benefit: 2,
        }
    }
}

const COLORS: [&str; 16] = [
    "Blue", "Green", "Red", "Amber", "Silver", "Golden", "Coral", "Ivory", "Olive", "Scarlet", "Violet", "Indigo",
    "Maroon", "Cobalt", "Copper", "Teal",
];
const PROGRAMS: [&str; 8] = ["Grant", "Allowance", "Loan", "Credit", "Pension", "Bursary", "Voucher", "Relief"];

struct Kind {
    values: &'static [&'static str],
    phrase: &'static str,
    question: &'static str,
    statement: &'static str,
}

const KINDS: [Kind; 5] = [
    Kind {
        values: &[
            "farmer", "teacher", "nurse", "student", "carer", "veteran", "miner", "fisher", "baker", "driver", "builder",
            "painter",
        ],
        phrase: "you are a {}",
        question: "Are you a {}?",
        statement: "I am a {}.",
    },
    Kind {
        values: &["Wales", "Scotland", "England", "Ireland", "Cornwall", "Devon", "Kent", "Essex", "York", "Leeds"],
        phrase: "you live in {}",
        question: "Do you live in {}?",
        statement: "I live in {}.",
    },
    Kind {
        values: &["car", "house", "farm", "boat", "shop", "horse", "van", "bike", "flat", "tractor"],
        phrase: "you own a {}",
        question: "Do you own a {}?",
        statement: "I own a {}.",
    },
    Kind {
        values: &["18", "21", "25", "30", "40", "50", "60", "65", "70", "80"],
        phrase: "you are over {}",
        question: "Are you over {}?",
        statement: "I am over {}.",
    },
    Kind {
        values: &["children", "savings", "debts", "a garden", "a disability", "a mortgage", "a partner", "a job"],
        phrase: "you have {}",
        question: "Do you have {}?",
        statement: "I have {}.",
    },
];

const QUESTIONS: [&str; 3] = ["Can I get the {}?", "Am I eligible for the {}?", "Can I claim the {}?"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Condition {
    pub kind: usize,
    pub value: usize,
}

impl Condition {
    fn fill(template: &str, value: &str) -> String {
        template.replace("{}", value)
    }

    pub fn phrase(&self) -> String {
        Self::fill(KINDS[self.kind].phrase, KINDS[self.kind].values[self.value])
    }

    pub fn question(&self) -> String {
        Self::fill(KINDS[self.kind].question, KINDS[self.kind].values[self.value])
    }

    pub fn statement(&self) -> String {
        Self::fill(KINDS[self.kind].statement, KINDS[self.kind].values[self.value])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    Inline,
    Bullets,
    Numbered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRule {
    pub doc_id: String,
    pub benefit: String,
    pub conditions: Vec<Condition>,
    pub layout: Layout,
    /// EDUs the body is composed from, in order.
    pub edus: Vec<String>,
    /// EDU index of each condition.
    pub condition_edu: Vec<usize>,
    pub seen: bool,
}

impl SyntheticRule {
    fn build(doc_id: String, benefit: String, conditions: Vec<Condition>, layout: Layout, seen: bool) -> Self {
        let phrases: Vec<String> = conditions.iter().map(Condition::phrase).collect();
        let n = phrases.len();
        let (edus, condition_edu) = match layout {
            Layout::Inline => {
                let mut edus = vec![format!("You can get the {benefit}")];
                for (j, p) in phrases.iter().enumerate() {
                    let edu = if j + 1 == n {
                        if n == 1 { format!("if {p}.") } else { format!("and if {p}.") }
                    } else if j + 2 == n {
                        format!("if {p}")
                    } else {
                        format!("if {p},")
                    };
                    edus.push(edu);
                }
                (edus, (1..=n).collect())
            }
            Layout::Bullets => {
                let mut edus = vec![format!("You can get the {benefit}"), "if:".to_string()];
                edus.extend(phrases.iter().map(|p| format!("* {p}")));
                (edus, (2..n + 2).collect())
            }
            Layout::Numbered => {
                let mut edus = vec![format!("The {benefit} is for people who meet all of these:")];
                edus.extend(phrases.iter().enumerate().map(|(j, p)| format!("{}. {p}", j + 1)));
                (edus, (1..=n).collect())
            }
        };
        Self { doc_id, benefit, conditions, layout, edus, condition_edu, seen }
    }

    pub fn body(&self) -> String {
        match self.layout {
            Layout::Inline => self.edus.join(" "),
            Layout::Bullets => format!("{} {}\n{}", self.edus[0], self.edus[1], self.edus[2..].join("\n")),
            Layout::Numbered => self.edus.join("\n"),
        }
    }

    pub fn document(&self) -> RuleDocument {
        RuleDocument { doc_id: self.doc_id.clone(), title: self.benefit.clone(), body: self.body(), edus: vec![] }
    }
}

/// How one condition of the gold rule stands in a dialogue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConditionState {
    Scenario,
    AnsweredYes,
    AnsweredNo,
    Unresolved,
}

/// Gold answer implied by condition states listed in rule order.
pub fn implied_answer(conditions: &[Condition], states: &[ConditionState]) -> String {
    if states.contains(&ConditionState::AnsweredNo) {
        return "No".into();
    }
    match states.iter().position(|s| *s == ConditionState::Unresolved) {
        Some(j) => conditions[j].question(),
        None => "Yes".into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceTruth {
    pub states: Vec<ConditionState>,
    /// Exact per-EDU entailment labels grounded in the dialogue history.
    pub edu_labels: Vec<EntailmentLabel>,
}

#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub spec: SyntheticSpec,
    pub rules: Vec<SyntheticRule>,
    pub kb: KnowledgeBase,
    pub train: DatasetSplit,
    pub dev: DatasetSplit,
    pub test: DatasetSplit,
    pub truth: BTreeMap<String, InstanceTruth>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.conditions_per_rule;
        if self.num_rules == 0 || self.rules_per_benefit == 0 || self.vocab_size == 0 {
            return Err(Error::Config("synthetic counts must be positive".into()));
        }
        if lo == 0 || lo > hi || hi > KINDS.len() {
            return Err(Error::Config(format!("conditions_per_rule must satisfy 1 <= lo <= hi <= {}", KINDS.len())));
        }
        if !(0.0..=1.0).contains(&self.unseen_fraction) {
            return Err(Error::Config("unseen_fraction must lie in [0, 1]".into()));
        }
        let names = COLORS.len().min(self.vocab_size) * PROGRAMS.len().min(self.vocab_size);
        let needed = self.num_rules.div_ceil(self.rules_per_benefit);
        if names < needed {
            return Err(Error::Config(format!(
                "vocab_size {} yields {names} benefit names but {needed} are needed",
                self.vocab_size
            )));
        }
        Ok(())
    }

    fn values(&self, kind: usize) -> usize {
        KINDS[kind].values.len().min(self.vocab_size)
    }
}

fn sample_rules(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Vec<SyntheticRule>> {
    let mut names: Vec<String> = COLORS[..COLORS.len().min(spec.vocab_size)]
        .iter()
        .flat_map(|c| PROGRAMS[..PROGRAMS.len().min(spec.vocab_size)].iter().map(move |p| format!("{c} {p}")))
        .collect();
    names.shuffle(rng);
    let num_unseen = ((spec.num_rules as f64) * spec.unseen_fraction).round() as usize;
    let num_unseen = num_unseen.min(spec.num_rules - 1);
    let mut order: Vec<usize> = (0..spec.num_rules).collect();
    order.shuffle(rng);
    let unseen: BTreeSet<usize> = order[..num_unseen].iter().copied().collect();

    let mut rules: Vec<SyntheticRule> = Vec::with_capacity(spec.num_rules);
    for i in 0..spec.num_rules {
        let benefit = names[i / spec.rules_per_benefit].clone();
        let group_start = i - i % spec.rules_per_benefit;
        let mut tries = 0;
        let conditions = loop {
            tries += 1;
            if tries > 1000 {
                return Err(Error::Config("vocab_size too small to make group mates distinct".into()));
            }
            let n = rng.gen_range(spec.conditions_per_rule.0..=spec.conditions_per_rule.1);
            let mut kinds: Vec<usize> = (0..KINDS.len()).collect();
            kinds.shuffle(rng);
            let conds: Vec<Condition> = kinds[..n]
                .iter()
                .map(|&kind| Condition { kind, value: rng.gen_range(0..spec.values(kind)) })
                .collect();
            let set: BTreeSet<Condition> = conds.iter().copied().collect();
            let clash = rules[group_start..i]
                .iter()
                .any(|r| r.conditions.iter().copied().collect::<BTreeSet<_>>() == set);
            if !clash {
                break conds;
            }
        };
        let layout = [Layout::Inline, Layout::Bullets, Layout::Numbered][rng.gen_range(0..3)];
        rules.push(SyntheticRule::build(format!("rule-{i:03}"), benefit, conditions, layout, !unseen.contains(&i)));
    }
    Ok(rules)
}

/// Whether a dialogue over `rule` is also consistent with `mate` under a
/// different answer.
fn ambiguous_with(rule: &SyntheticRule, states: &[ConditionState], answer: &str, mate: &SyntheticRule) -> bool {
    let mentioned: Vec<(Condition, ConditionState)> = rule
        .conditions
        .iter()
        .zip(states)
        .filter(|(_, s)| **s != ConditionState::Unresolved)
        .map(|(c, s)| (*c, *s))
        .collect();
    if !mentioned.iter().all(|(c, _)| mate.conditions.contains(c)) {
        return false;
    }
    let mate_states: Vec<ConditionState> = mate
        .conditions
        .iter()
        .map(|c| mentioned.iter().find(|(m, _)| m == c).map_or(ConditionState::Unresolved, |(_, s)| *s))
        .collect();
    implied_answer(&mate.conditions, &mate_states) != answer
}

fn sample_instance(
    rule: &SyntheticRule,
    mates: &[&SyntheticRule],
    utterance_id: String,
    rng: &mut ChaCha8Rng,
) -> Result<(DialogueInstance, InstanceTruth)> {
    use ConditionState::*;
    let n = rule.conditions.len();
    for _ in 0..1000 {
        let class = rng.gen_range(0..3);
        let mut states: Vec<ConditionState> = match class {
            0 => (0..n).map(|_| if rng.gen_bool(0.5) { Scenario } else { AnsweredYes }).collect(),
            _ => (0..n).map(|_| [Scenario, AnsweredYes, Unresolved][rng.gen_range(0..3)]).collect(),
        };
        match class {
            1 => states[rng.gen_range(0..n)] = AnsweredNo,
            2 => states[rng.gen_range(0..n)] = Unresolved,
            _ => {}
        }
        let answer = implied_answer(&rule.conditions, &states);
        if mates.iter().any(|m| ambiguous_with(rule, &states, &answer, m)) {
            continue;
        }
        let mut statements: Vec<String> = rule
            .conditions
            .iter()
            .zip(&states)
            .filter(|(_, s)| **s == Scenario)
            .map(|(c, _)| c.statement())
            .collect();
        statements.shuffle(rng);
        let history: Vec<DialogueTurn> = rule
            .conditions
            .iter()
            .zip(&states)
            .filter_map(|(c, s)| {
                let a = match s {
                    AnsweredYes => Answer::Yes,
                    AnsweredNo => Answer::No,
                    _ => return None,
                };
                Some(DialogueTurn { follow_up_question: c.question(), follow_up_answer: a })
            })
            .collect();
        let mut edu_labels = vec![EntailmentLabel::Neutral; rule.edus.len()];
        for (j, s) in states.iter().enumerate() {
            match s {
                AnsweredYes => edu_labels[rule.condition_edu[j]] = EntailmentLabel::Entailment,
                AnsweredNo => edu_labels[rule.condition_edu[j]] = EntailmentLabel::Contradiction,
                _ => {}
            }
        }
        let question = QUESTIONS[rng.gen_range(0..QUESTIONS.len())].replace("{}", &rule.benefit);
        let inst = DialogueInstance {
            utterance_id,
            tree_id: format!("tree-{}", rule.doc_id),
            gold_doc_id: rule.doc_id.clone(),
            question,
            scenario: statements.join(" "),
            history,
            gold_answer: answer,
            evidence: vec![],
        };
        return Ok((inst, InstanceTruth { states, edu_labels }));
    }
    Err(Error::Config(format!("could not sample an unambiguous dialogue for {}", rule.doc_id)))
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticBenchmark> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rules = sample_rules(spec, &mut rng)?;
    let mut kb = KnowledgeBase::new();
    for r in &rules {
        kb.insert(r.document(), r.seen)?;
    }
    let by_benefit = |r: &SyntheticRule| -> Vec<&SyntheticRule> {
        rules.iter().filter(|m| m.benefit == r.benefit && m.doc_id != r.doc_id).collect()
    };
    let seen: Vec<usize> = (0..rules.len()).filter(|&i| rules[i].seen).collect();
    let unseen: Vec<usize> = (0..rules.len()).filter(|&i| !rules[i].seen).collect();

    let mut truth = BTreeMap::new();
    let mut make_split = |name: SplitName, count: usize, rng: &mut ChaCha8Rng| -> Result<DatasetSplit> {
        let mut instances = Vec::with_capacity(count);
        for k in 0..count {
            let idx = match name {
                // cover every seen rule before sampling freely
                SplitName::Train if k < seen.len() => seen[k],
                SplitName::Train => seen[rng.gen_range(0..seen.len())],
                _ if !unseen.is_empty() && rng.gen_bool(spec.unseen_fraction) => unseen[rng.gen_range(0..unseen.len())],
                _ => seen[rng.gen_range(0..seen.len())],
            };
            let rule = &rules[idx];
            let (inst, t) = sample_instance(rule, &by_benefit(rule), format!("{}-{k:05}", name.as_str()), rng)?;
            truth.insert(inst.utterance_id.clone(), t);
            instances.push(inst);
        }
        Ok(DatasetSplit::new(name, instances))
    };
    let train = make_split(SplitName::Train, spec.num_train, &mut rng)?;
    let dev = make_split(SplitName::Dev, spec.num_dev, &mut rng)?;
    let test = make_split(SplitName::Test, spec.num_test, &mut rng)?;
    Ok(SyntheticBenchmark { spec: spec.clone(), rules, kb, train, dev, test, truth })
}

//! Synthetic data: a closed word-level vocabulary and generators for
//! long-context recall and QA micro-stories, each with a rule-based oracle
//! solver that answers from the token stream alone.
//!
//! Kinds: key→value recall buried in filler; two-fact chaining (who took it,
//! where did they go); yes/no location questions; counting carried objects;
//! negated location statements. Filler tokens are drawn from a disjoint
//! family so they can never collide with content words.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
/// Separates context from question in model input.
pub const QUERY_MARKER: u32 = 3;
pub const RESERVED: usize = 16;

pub const NUM_KEYS: usize = 32;
pub const NUM_VALUES: usize = 32;
pub const NUM_FILLER: usize = 300;

const PERSONS: [&str; 6] = ["mary", "john", "sandra", "daniel", "fred", "bill"];
const PLACES: [&str; 6] = ["kitchen", "garden", "office", "bathroom", "hallway", "bedroom"];
const OBJECTS: [&str; 6] = ["apple", "football", "milk", "book", "ball", "hammer"];
const WORDS: [&str; 16] = [
    "went", "to", "took", "dropped", "is", "in", "not", "where", "how", "many", "objects",
    "carrying", "yes", "no", ".", "?",
];

/// Bijective token ↔ id mapping over the closed synthetic vocabulary.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// The fixed vocabulary every task family shares: 16 reserved ids, keys,
    /// values, story words, digits, and a filler family.
    pub fn synthetic() -> Vocab {
        let mut tokens: Vec<String> = Vec::new();
        tokens.push("<pad>".into());
        tokens.push("<bos>".into());
        tokens.push("<eos>".into());
        tokens.push("<q>".into());
        for i in tokens.len()..RESERVED {
            tokens.push(format!("<r{i}>"));
        }
        for i in 0..NUM_KEYS {
            tokens.push(format!("k{i:02}"));
        }
        for i in 0..NUM_VALUES {
            tokens.push(format!("v{i:02}"));
        }
        tokens.extend(PERSONS.iter().map(|s| s.to_string()));
        tokens.extend(PLACES.iter().map(|s| s.to_string()));
        tokens.extend(OBJECTS.iter().map(|s| s.to_string()));
        tokens.extend(WORDS.iter().map(|s| s.to_string()));
        for d in 0..10 {
            tokens.push(format!("{d}"));
        }
        for i in 0..NUM_FILLER {
            tokens.push(format!("f{i:03}"));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Result<u32> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::Vocab(format!("unknown token `{token}`")))
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Vocab(format!("id {id} out of range ({})", self.tokens.len())))
    }

    /// Whitespace-split encoding; decode(encode(x)) == x for
    /// whitespace-normalized input.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let words: Result<Vec<&str>> = ids.iter().map(|&i| self.token(i)).collect();
        Ok(words?.join(" "))
    }

    fn key(&self, i: usize) -> u32 {
        (RESERVED + i) as u32
    }

    fn value(&self, i: usize) -> u32 {
        (RESERVED + NUM_KEYS + i) as u32
    }

    fn filler(&self, i: usize) -> u32 {
        (self.tokens.len() - NUM_FILLER + i) as u32
    }

    fn rand_filler(&self, rng: &mut ChaCha8Rng) -> u32 {
        self.filler(rng.gen_range(0..NUM_FILLER))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Recall,
    TwoFact,
    YesNo,
    Counting,
    Negation,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Recall,
        TaskKind::TwoFact,
        TaskKind::YesNo,
        TaskKind::Counting,
        TaskKind::Negation,
    ];
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recall" => Ok(TaskKind::Recall),
            "two_fact" => Ok(TaskKind::TwoFact),
            "yes_no" => Ok(TaskKind::YesNo),
            "counting" => Ok(TaskKind::Counting),
            "negation" => Ok(TaskKind::Negation),
            other => Err(Error::Config(format!(
                "unknown task kind `{other}` (expected recall|two_fact|yes_no|counting|negation)"
            ))),
        }
    }
}

/// One task instance. `needle_positions` index the supporting-fact tokens
/// within `context`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub context: Vec<u32>,
    pub question: Vec<u32>,
    pub answer: Vec<u32>,
    pub kind: TaskKind,
    pub needle_positions: Vec<usize>,
}

impl Sample {
    pub fn context_len(&self) -> usize {
        self.context.len()
    }

    /// Model input: bos ++ context ++ question. The answer follows during
    /// training; during evaluation it is what the model must produce.
    pub fn prompt(&self) -> Vec<u32> {
        let mut t = Vec::with_capacity(1 + self.context.len() + self.question.len());
        t.push(BOS);
        t.extend_from_slice(&self.context);
        t.extend_from_slice(&self.question);
        t
    }

    /// Full training sequence bos ++ context ++ question ++ answer, plus the
    /// loss positions/targets for answer-only training: position p carries
    /// the target seq[p+1], restricted to answer tokens.
    pub fn training_sequence(&self) -> (Vec<u32>, Vec<usize>, Vec<u32>) {
        let mut seq = self.prompt();
        let answer_start = seq.len(); // index of first answer token in seq
        seq.extend_from_slice(&self.answer);
        let positions: Vec<usize> = (answer_start - 1..seq.len() - 1).collect();
        let targets: Vec<u32> = self.answer.clone();
        (seq, positions, targets)
    }
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    context: String,
    question: String,
    answer: String,
    kind: TaskKind,
    needle_positions: Vec<usize>,
    context_len: usize,
}

/// Line-delimited record with the token streams as plain text.
pub fn sample_to_record(sample: &Sample, vocab: &Vocab) -> Result<String> {
    let rec = SampleRecord {
        context: vocab.decode(&sample.context)?,
        question: vocab.decode(&sample.question)?,
        answer: vocab.decode(&sample.answer)?,
        kind: sample.kind,
        needle_positions: sample.needle_positions.clone(),
        context_len: sample.context.len(),
    };
    serde_json::to_string(&rec).map_err(|e| Error::ConfigParse(e.to_string()))
}

pub fn sample_from_record(line: &str, vocab: &Vocab) -> Result<Sample> {
    let rec: SampleRecord =
        serde_json::from_str(line).map_err(|e| Error::ConfigParse(e.to_string()))?;
    Ok(Sample {
        context: vocab.encode(&rec.context)?,
        question: vocab.encode(&rec.question)?,
        answer: vocab.encode(&rec.answer)?,
        kind: rec.kind,
        needle_positions: rec.needle_positions,
    })
}

/// Key→value recall with the pairs buried in filler. The question names one
/// key; the answer is its value; exactly one supporting fact exists.
/// `query_key` forces which pair is queried (index into the generated pairs).
pub fn gen_recall(
    rng: &mut ChaCha8Rng,
    vocab: &Vocab,
    n_pairs: usize,
    filler_len: usize,
    query_key: Option<usize>,
) -> Result<Sample> {
    if n_pairs == 0 {
        return Err(Error::Config("n_pairs must be ≥ 1".into()));
    }
    if n_pairs > NUM_KEYS {
        return Err(Error::Config(format!(
            "n_pairs {n_pairs} exceeds the key vocabulary ({NUM_KEYS}); keys would collide"
        )));
    }
    // distinct keys, values drawn with replacement
    let mut key_ids: Vec<usize> = (0..NUM_KEYS).collect();
    key_ids.shuffle(rng);
    key_ids.truncate(n_pairs);
    let pairs: Vec<(u32, u32)> = key_ids
        .iter()
        .map(|&k| (vocab.key(k), vocab.value(rng.gen_range(0..NUM_VALUES))))
        .collect();

    // distribute exactly filler_len filler tokens over n_pairs+1 gaps
    let mut gap_sizes = vec![0usize; n_pairs + 1];
    for _ in 0..filler_len {
        let g = rng.gen_range(0..gap_sizes.len());
        gap_sizes[g] += 1;
    }

    let mut context = Vec::with_capacity(2 * n_pairs + filler_len);
    let mut pair_positions = Vec::with_capacity(n_pairs);
    for (i, (k, v)) in pairs.iter().enumerate() {
        for _ in 0..gap_sizes[i] {
            context.push(vocab.rand_filler(rng));
        }
        pair_positions.push(context.len());
        context.push(*k);
        context.push(*v);
    }
    for _ in 0..gap_sizes[n_pairs] {
        context.push(vocab.rand_filler(rng));
    }

    let qi = match query_key {
        Some(q) => q % n_pairs,
        None => rng.gen_range(0..n_pairs),
    };
    let (qk, qv) = pairs[qi];
    Ok(Sample {
        needle_positions: vec![pair_positions[qi], pair_positions[qi] + 1],
        context,
        question: vec![QUERY_MARKER, qk],
        answer: vec![qv],
        kind: TaskKind::Recall,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Event {
    Go(usize, usize),         // person went to place
    Take(usize, usize),       // person took object
    Drop(usize, usize),       // person dropped object
    IsIn(usize, usize, bool), // person is (not) in place
}

fn event_tokens(vocab: &Vocab, ev: Event) -> Vec<u32> {
    let w = |s: &str| vocab.id(s).expect("story word in vocab");
    match ev {
        Event::Go(p, l) => vec![
            w(PERSONS[p]), w("went"), w("to"), w(PLACES[l]), w("."),
        ],
        Event::Take(p, o) => vec![w(PERSONS[p]), w("took"), w(OBJECTS[o]), w(".")],
        Event::Drop(p, o) => vec![w(PERSONS[p]), w("dropped"), w(OBJECTS[o]), w(".")],
        Event::IsIn(p, l, true) => vec![
            w(PERSONS[p]), w("is"), w("in"), w(PLACES[l]), w("."),
        ],
        Event::IsIn(p, l, false) => vec![
            w(PERSONS[p]), w("is"), w("not"), w("in"), w(PLACES[l]), w("."),
        ],
    }
}

/// Assemble events into a context with filler interleaved between sentences,
/// returning the start position of every event's sentence.
fn assemble_story(
    rng: &mut ChaCha8Rng,
    vocab: &Vocab,
    events: &[Event],
    filler_len: usize,
) -> (Vec<u32>, Vec<usize>) {
    let mut gap_sizes = vec![0usize; events.len() + 1];
    for _ in 0..filler_len {
        let g = rng.gen_range(0..gap_sizes.len());
        gap_sizes[g] += 1;
    }
    let mut context = Vec::new();
    let mut starts = Vec::with_capacity(events.len());
    for (i, ev) in events.iter().enumerate() {
        for _ in 0..gap_sizes[i] {
            context.push(vocab.rand_filler(rng));
        }
        starts.push(context.len());
        context.extend(event_tokens(vocab, *ev));
    }
    for _ in 0..gap_sizes[events.len()] {
        context.push(vocab.rand_filler(rng));
    }
    (context, starts)
}

fn distinct_pair(rng: &mut ChaCha8Rng, n: usize) -> (usize, usize) {
    let a = rng.gen_range(0..n);
    let b = (a + 1 + rng.gen_range(0..n - 1)) % n;
    (a, b)
}

/// Kind-specific templated micro-story with distractor filler.
pub fn gen_qa(
    rng: &mut ChaCha8Rng,
    vocab: &Vocab,
    kind: TaskKind,
    filler_len: usize,
) -> Result<Sample> {
    match kind {
        TaskKind::Recall => gen_recall(rng, vocab, 4, filler_len, None),
        TaskKind::TwoFact => gen_two_fact(rng, vocab, filler_len),
        TaskKind::YesNo => gen_yes_no(rng, vocab, filler_len),
        TaskKind::Counting => gen_counting(rng, vocab, filler_len),
        TaskKind::Negation => gen_negation(rng, vocab, filler_len, true),
    }
}

/// Chaining task: answering "where is OBJ ?" needs both the take event and
/// the carrier's subsequent movement.
fn gen_two_fact(rng: &mut ChaCha8Rng, vocab: &Vocab, filler_len: usize) -> Result<Sample> {
    let (p, distractor) = distinct_pair(rng, PERSONS.len());
    let (obj, d_obj) = distinct_pair(rng, OBJECTS.len());
    let (l_final, l_other) = distinct_pair(rng, PLACES.len());

    // distractor events around the two supporting facts; the carrier p only
    // moves after taking, so the final Go is the second supporting fact
    let mut events = vec![
        Event::Go(distractor, l_other),
        Event::Take(p, obj),
        Event::Take(distractor, d_obj),
        Event::Go(p, l_final),
        Event::Go(distractor, rng.gen_range(0..PLACES.len())),
    ];
    // optionally p wanders again; the last Go wins
    let l_last = if rng.gen_bool(0.5) {
        let l2 = rng.gen_range(0..PLACES.len());
        events.push(Event::Go(p, l2));
        l2
    } else {
        l_final
    };

    let (context, starts) = assemble_story(rng, vocab, &events, filler_len);
    let take_pos = starts[1];
    let final_go_pos = *starts.last().unwrap();
    let w = |s: &str| vocab.id(s).unwrap();
    Ok(Sample {
        context,
        question: vec![w("where"), w("is"), w(OBJECTS[obj]), w("?")],
        answer: vec![w(PLACES[l_last])],
        kind: TaskKind::TwoFact,
        needle_positions: vec![take_pos, final_go_pos],
    })
}

fn gen_yes_no(rng: &mut ChaCha8Rng, vocab: &Vocab, filler_len: usize) -> Result<Sample> {
    let p = rng.gen_range(0..PERSONS.len());
    let other = (p + 1) % PERSONS.len();
    let l_final = rng.gen_range(0..PLACES.len());
    let events = vec![
        Event::Go(p, rng.gen_range(0..PLACES.len())),
        Event::Go(other, rng.gen_range(0..PLACES.len())),
        Event::Go(p, l_final),
        Event::Go(other, rng.gen_range(0..PLACES.len())),
    ];
    let (context, starts) = assemble_story(rng, vocab, &events, filler_len);

    // balanced: half the questions ask about the true final place
    let affirm = rng.gen_bool(0.5);
    let asked_place = if affirm {
        l_final
    } else {
        (l_final + 1 + rng.gen_range(0..PLACES.len() - 1)) % PLACES.len()
    };
    let w = |s: &str| vocab.id(s).unwrap();
    Ok(Sample {
        context,
        question: vec![w("is"), w(PERSONS[p]), w("in"), w(PLACES[asked_place]), w("?")],
        answer: vec![w(if affirm { "yes" } else { "no" })],
        kind: TaskKind::YesNo,
        needle_positions: vec![starts[2]],
    })
}

fn gen_counting(rng: &mut ChaCha8Rng, vocab: &Vocab, filler_len: usize) -> Result<Sample> {
    let (p, distractor) = distinct_pair(rng, PERSONS.len());
    let takes = rng.gen_range(1..=4usize);
    let drops = rng.gen_range(0..=takes.min(2));
    let mut objs: Vec<usize> = (0..OBJECTS.len()).collect();
    objs.shuffle(rng);

    let mut events = Vec::new();
    for &o in objs.iter().take(takes) {
        events.push(Event::Take(p, o));
    }
    events.push(Event::Take(distractor, objs[takes % OBJECTS.len()]));
    for &o in objs.iter().take(drops) {
        events.push(Event::Drop(p, o));
    }
    let (context, starts) = assemble_story(rng, vocab, &events, filler_len);
    let count = takes - drops;
    let w = |s: &str| vocab.id(s).unwrap();
    Ok(Sample {
        context,
        question: vec![
            w("how"), w("many"), w("objects"), w("is"), w(PERSONS[p]), w("carrying"), w("?"),
        ],
        answer: vec![w(&count.to_string())],
        kind: TaskKind::Counting,
        needle_positions: starts,
    })
}

/// Location statements where the last statement about the queried pair may
/// negate an earlier one. With `negate` false the generator produces the
/// matched control sample whose final statement affirms instead.
fn gen_negation(
    rng: &mut ChaCha8Rng,
    vocab: &Vocab,
    filler_len: usize,
    negate: bool,
) -> Result<Sample> {
    let (p, other) = distinct_pair(rng, PERSONS.len());
    let l = rng.gen_range(0..PLACES.len());
    let events = vec![
        Event::IsIn(p, l, true),
        Event::IsIn(other, rng.gen_range(0..PLACES.len()), rng.gen_bool(0.5)),
        Event::IsIn(p, l, !negate),
    ];
    let (context, starts) = assemble_story(rng, vocab, &events, filler_len);
    let w = |s: &str| vocab.id(s).unwrap();
    Ok(Sample {
        context,
        question: vec![w("is"), w(PERSONS[p]), w("in"), w(PLACES[l]), w("?")],
        answer: vec![w(if negate { "no" } else { "yes" })],
        kind: TaskKind::Negation,
        needle_positions: vec![starts[2]],
    })
}

/// Negated sample and its affirmed control, identical except for the final
/// statement; their answers flip by construction.
pub fn gen_negation_pair(
    rng: &mut ChaCha8Rng,
    vocab: &Vocab,
    filler_len: usize,
) -> Result<(Sample, Sample)> {
    let seed: u64 = rng.gen();
    let mut r1 = ChaCha8Rng::seed_from_u64(seed);
    let mut r2 = ChaCha8Rng::seed_from_u64(seed);
    let negated = gen_negation(&mut r1, vocab, filler_len, true)?;
    let control = gen_negation(&mut r2, vocab, filler_len, false)?;
    Ok((negated, control))
}

// ── rule-based oracle ──────────────────────────────────────────────────

/// Answers a question by parsing the context token strings; completely
/// independent of the generators' internal bookkeeping.
pub fn solve(context: &[&str], question: &[&str]) -> Option<String> {
    // recall: "<q> kNN" → token following the key in the context
    if question.len() == 2 && question[0] == "<q>" {
        let key = question[1];
        let pos = context.iter().position(|t| *t == key)?;
        return context.get(pos + 1).map(|s| s.to_string());
    }

    // split into sentences on "." and parse events
    let mut person_place: HashMap<&str, &str> = HashMap::new();
    // object → Ok(holder) while carried, Err(place) once dropped
    let mut object_loc: HashMap<&str, std::result::Result<&str, &str>> = HashMap::new();
    let mut stated: HashMap<(&str, &str), bool> = HashMap::new();
    let mut carrying: HashMap<&str, i32> = HashMap::new();

    for sentence in context.split(|t| *t == ".") {
        let n = sentence.len();
        for i in 0..n {
            let rest = &sentence[i..];
            if rest.len() >= 4 && rest[1] == "went" && rest[2] == "to" {
                person_place.insert(rest[0], rest[3]);
                break;
            }
            if rest.len() >= 3 && rest[1] == "took" {
                object_loc.insert(rest[2], Ok(rest[0]));
                *carrying.entry(rest[0]).or_insert(0) += 1;
                break;
            }
            if rest.len() >= 3 && rest[1] == "dropped" {
                let place = person_place.get(rest[0]).copied().unwrap_or("");
                object_loc.insert(rest[2], Err(place));
                *carrying.entry(rest[0]).or_insert(0) -= 1;
                break;
            }
            if rest.len() >= 5 && rest[1] == "is" && rest[2] == "not" && rest[3] == "in" {
                stated.insert((rest[0], rest[4]), false);
                break;
            }
            if rest.len() >= 4 && rest[1] == "is" && rest[2] == "in" {
                stated.insert((rest[0], rest[3]), true);
                break;
            }
        }
    }

    match question {
        ["where", "is", obj, "?"] => match object_loc.get(obj)? {
            Ok(holder) => person_place.get(holder).map(|s| s.to_string()),
            Err(place) if !place.is_empty() => Some(place.to_string()),
            Err(_) => None,
        },
        ["is", person, "in", place, "?"] => {
            if let Some(truth) = stated.get(&(*person, *place)) {
                return Some(if *truth { "yes" } else { "no" }.to_string());
            }
            let actual = person_place.get(person)?;
            Some(if actual == place { "yes" } else { "no" }.to_string())
        }
        ["how", "many", "objects", "is", person, "carrying", "?"] => {
            let c = carrying.get(person).copied().unwrap_or(0).max(0);
            Some(c.to_string())
        }
        _ => None,
    }
}

/// Convenience: run the oracle on an encoded sample.
pub fn solve_sample(sample: &Sample, vocab: &Vocab) -> Result<Option<String>> {
    let ctx: Result<Vec<&str>> = sample.context.iter().map(|&i| vocab.token(i)).collect();
    let q: Result<Vec<&str>> = sample.question.iter().map(|&i| vocab.token(i)).collect();
    Ok(solve(&ctx?, &q?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn vocab_round_trips_and_is_bijective() {
        let v = Vocab::synthetic();
        assert!(v.len() > 300 && v.len() <= 512, "vocab size {}", v.len());
        for id in 0..v.len() as u32 {
            let tok = v.token(id).unwrap();
            assert_eq!(v.id(tok).unwrap(), id);
        }
        let text = "mary went to kitchen . k07 v21 f000";
        assert_eq!(v.decode(&v.encode(text).unwrap()).unwrap(), text);
        assert_eq!(v.encode("").unwrap(), Vec::<u32>::new());
    }

    #[test]
    fn unknown_token_error_names_it() {
        let v = Vocab::synthetic();
        let err = v.encode("mary went to zanzibar").unwrap_err();
        assert!(err.to_string().contains("zanzibar"), "{err}");
    }

    #[test]
    fn reserved_ids_are_low() {
        assert!(PAD < 16 && BOS < 16 && EOS < 16 && QUERY_MARKER < 16);
        let v = Vocab::synthetic();
        assert_eq!(v.token(PAD).unwrap(), "<pad>");
        assert_eq!(v.token(QUERY_MARKER).unwrap(), "<q>");
    }

    #[test]
    fn recall_without_filler_is_the_bare_pair() {
        let v = Vocab::synthetic();
        let s = gen_recall(&mut rng(1), &v, 1, 0, Some(0)).unwrap();
        assert_eq!(s.context.len(), 2);
        assert_eq!(s.context[0], s.question[1]); // queried key
        assert_eq!(s.context[1], s.answer[0]); // its value
        assert_eq!(s.needle_positions, vec![0, 1]);
        // answer recoverable by scanning for the key
        let got = solve_sample(&s, &v).unwrap().unwrap();
        assert_eq!(v.id(&got).unwrap(), s.answer[0]);
    }

    #[test]
    fn recall_oracle_recovers_answer_through_filler() {
        let v = Vocab::synthetic();
        for seed in 0..50 {
            let s = gen_recall(&mut rng(seed), &v, 5, 200, None).unwrap();
            assert_eq!(s.context.len(), 2 * 5 + 200);
            let got = solve_sample(&s, &v).unwrap().unwrap();
            assert_eq!(v.id(&got).unwrap(), s.answer[0], "seed {seed}");
        }
    }

    #[test]
    fn recall_keys_are_unique_within_sample() {
        let v = Vocab::synthetic();
        let mut r = rng(7);
        for _ in 0..10_000 {
            let s = gen_recall(&mut r, &v, 6, 8, None).unwrap();
            let keys: Vec<u32> = s
                .context
                .iter()
                .copied()
                .filter(|&t| (RESERVED..RESERVED + NUM_KEYS).contains(&(t as usize)))
                .collect();
            let mut dedup = keys.clone();
            dedup.sort_unstable();
            dedup.dedup();
            assert_eq!(dedup.len(), keys.len(), "duplicate key in sample");
        }
    }

    #[test]
    fn too_many_pairs_is_a_vocabulary_error() {
        let v = Vocab::synthetic();
        let err = gen_recall(&mut rng(1), &v, NUM_KEYS + 1, 0, None).unwrap_err();
        assert!(err.to_string().contains("collide"), "{err}");
    }

    #[test]
    fn two_fact_spec_example_solves_to_kitchen() {
        // "mary went to kitchen . mary took apple . where is apple ?" → kitchen
        let ctx: Vec<&str> = "mary went to kitchen . mary took apple ."
            .split_whitespace()
            .collect();
        let q: Vec<&str> = "where is apple ?".split_whitespace().collect();
        assert_eq!(solve(&ctx, &q).unwrap(), "kitchen");
    }

    #[test]
    fn counting_three_takes_answers_three() {
        let ctx: Vec<&str> = "mary took apple . mary took book . john took ball . mary took milk ."
            .split_whitespace()
            .collect();
        let q: Vec<&str> = "how many objects is mary carrying ?"
            .split_whitespace()
            .collect();
        assert_eq!(solve(&ctx, &q).unwrap(), "3");
    }

    #[test]
    fn negation_flips_answer_versus_control() {
        let v = Vocab::synthetic();
        let mut r = rng(11);
        for _ in 0..50 {
            let (neg, ctrl) = gen_negation_pair(&mut r, &v, 6).unwrap();
            assert_eq!(neg.question, ctrl.question);
            assert_ne!(neg.answer, ctrl.answer);
            assert_eq!(v.token(neg.answer[0]).unwrap(), "no");
            assert_eq!(v.token(ctrl.answer[0]).unwrap(), "yes");
        }
    }

    #[test]
    fn every_kind_agrees_with_its_oracle() {
        let v = Vocab::synthetic();
        for kind in TaskKind::ALL {
            let mut r = rng(kind as u64 + 100);
            for i in 0..500 {
                let s = gen_qa(&mut r, &v, kind, 12).unwrap();
                let got = solve_sample(&s, &v)
                    .unwrap()
                    .unwrap_or_else(|| panic!("{kind:?} sample {i} unsolvable"));
                assert_eq!(
                    v.id(&got).unwrap(),
                    s.answer[0],
                    "{kind:?} sample {i}: oracle {got}"
                );
            }
        }
    }

    #[test]
    fn context_length_scales_linearly_with_filler() {
        let v = Vocab::synthetic();
        for filler in [0usize, 10, 100, 333] {
            let s = gen_recall(&mut rng(5), &v, 3, filler, None).unwrap();
            assert_eq!(s.context.len(), 6 + filler);
            let q = gen_qa(&mut rng(5), &v, TaskKind::TwoFact, filler).unwrap();
            let base = gen_qa(&mut rng(5), &v, TaskKind::TwoFact, 0).unwrap();
            assert_eq!(q.context.len(), base.context.len() + filler);
        }
    }

    #[test]
    fn generation_is_bit_reproducible() {
        let v = Vocab::synthetic();
        for kind in TaskKind::ALL {
            let a = gen_qa(&mut rng(42), &v, kind, 20).unwrap();
            let b = gen_qa(&mut rng(42), &v, kind, 20).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn needle_positions_are_inside_context() {
        let v = Vocab::synthetic();
        for kind in TaskKind::ALL {
            let mut r = rng(kind as u64 + 55);
            for _ in 0..100 {
                let s = gen_qa(&mut r, &v, kind, 30).unwrap();
                assert!(!s.answer.is_empty());
                for &p in &s.needle_positions {
                    assert!(p < s.context.len());
                }
            }
        }
    }

    #[test]
    fn records_round_trip() {
        let v = Vocab::synthetic();
        let s = gen_qa(&mut rng(9), &v, TaskKind::Counting, 15).unwrap();
        let line = sample_to_record(&s, &v).unwrap();
        let back = sample_from_record(&line, &v).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn training_sequence_marks_answer_positions() {
        let v = Vocab::synthetic();
        let s = gen_recall(&mut rng(3), &v, 2, 4, None).unwrap();
        let (seq, positions, targets) = s.training_sequence();
        assert_eq!(seq.len(), 1 + s.context.len() + s.question.len() + 1);
        assert_eq!(positions.len(), 1);
        assert_eq!(targets, s.answer);
        // the position predicts the answer token from the last question token
        assert_eq!(seq[positions[0] + 1], s.answer[0]);
    }
}

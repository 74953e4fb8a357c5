//! Interaction logs to per-user chronological sequences, leave-one-out
//! splits and prefix training samples.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{ContextKey, ContextVocab, PAD_CATEGORY};
use crate::error::{LsanError, Result};

/// Minimum interactions per user and per item.
pub const CORE: usize = 5;

/// Share of malformed lines above which ingestion fails.
const MALFORMED_LIMIT: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub category: String,
    pub timestamp: u64,
}

#[derive(Clone, Debug, Default)]
pub struct Ingested {
    pub interactions: Vec<Interaction>,
    pub malformed: usize,
    /// Data lines seen, header excluded.
    pub lines: usize,
}

/// Reads a `user item category timestamp` TSV log with an optional header.
pub fn ingest(path: &Path) -> Result<Ingested> {
    let text = fs::read_to_string(path).map_err(|e| LsanError::io(path, e))?;
    let out = parse_interactions(&text)?;
    if out.interactions.is_empty() && out.lines == 0 {
        warn!("{} holds no interactions", path.display());
    }
    Ok(out)
}

pub fn parse_interactions(text: &str) -> Result<Ingested> {
    let mut out = Ingested::default();
    let mut samples = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line) {
            Some(it) => {
                out.lines += 1;
                out.interactions.push(it);
            }
            None if n == 0 && looks_like_header(line) => {}
            None => {
                out.lines += 1;
                out.malformed += 1;
                if samples.len() < 5 {
                    samples.push(format!("{}: {line}", n + 1));
                }
            }
        }
    }
    if out.malformed > 0 {
        warn!("skipped {} malformed of {} lines", out.malformed, out.lines);
    }
    if out.malformed as f64 > MALFORMED_LIMIT * out.lines as f64 {
        return Err(LsanError::Ingest {
            malformed: out.malformed,
            lines: out.lines,
            samples,
        });
    }
    Ok(out)
}

fn parse_line(line: &str) -> Option<Interaction> {
    let f: Vec<&str> = line.split('\t').map(str::trim).collect();
    if f.len() != 4 || f[..3].iter().any(|s| s.is_empty()) {
        return None;
    }
    Some(Interaction {
        user: f[0].to_owned(),
        item: f[1].to_owned(),
        category: f[2].to_owned(),
        timestamp: f[3].parse().ok()?,
    })
}

fn looks_like_header(line: &str) -> bool {
    let f: Vec<&str> = line.split('\t').collect();
    f.len() == 4 && f[3].trim().parse::<u64>().is_err()
}

/// One interaction after indexing. Categories are 1-based; 0 is padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    pub item: usize,
    pub category: usize,
    pub hour: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSequence {
    pub user: usize,
    pub events: Vec<Event>,
}

impl UserSequence {
    pub fn items(&self) -> Vec<usize> {
        self.events.iter().map(|e| e.item).collect()
    }
}

/// Indexed sequences plus the raw ids behind every index.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    pub users: Vec<String>,
    pub items: Vec<String>,
    /// Raw category ids; category index `c` is `categories[c - 1]`.
    pub categories: Vec<String>,
    pub sequences: Vec<UserSequence>,
}

pub fn hour_of_day(timestamp: u64) -> u8 {
    ((timestamp / 3600) % 24) as u8
}

/// Removes items, then users, with fewer than [`CORE`] interactions until nothing changes.
pub fn five_core(interactions: &[Interaction]) -> Vec<bool> {
    let mut keep = vec![true; interactions.len()];
    loop {
        let mut changed = false;
        let by_item: fn(&Interaction) -> &str = |i| &i.item;
        let by_user: fn(&Interaction) -> &str = |i| &i.user;
        for key in [by_item, by_user] {
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for (it, _) in interactions.iter().zip(&keep).filter(|(_, &k)| k) {
                *counts.entry(key(it)).or_default() += 1;
            }
            for (it, k) in interactions.iter().zip(keep.iter_mut()) {
                if *k && counts[key(it)] < CORE {
                    *k = false;
                    changed = true;
                }
            }
        }
        if !changed {
            return keep;
        }
    }
}

fn intern<'a>(map: &mut HashMap<&'a str, usize>, names: &mut Vec<String>, key: &'a str, base: usize) -> usize {
    *map.entry(key).or_insert_with(|| {
        names.push(key.to_owned());
        names.len() - 1 + base
    })
}

/// 5-core filtering, first-appearance indexing and per-user chronological ordering.
pub fn build_sequences(interactions: &[Interaction]) -> Result<Dataset> {
    let keep = five_core(interactions);
    let mut ds = Dataset::default();
    let (mut users, mut items, mut cats) = (HashMap::new(), HashMap::new(), HashMap::new());
    let mut per_user: Vec<Vec<(u64, Event)>> = Vec::new();
    for (it, _) in interactions.iter().zip(&keep).filter(|(_, &k)| k) {
        let u = intern(&mut users, &mut ds.users, &it.user, 0);
        let event = Event {
            item: intern(&mut items, &mut ds.items, &it.item, 0),
            category: intern(&mut cats, &mut ds.categories, &it.category, 1),
            hour: hour_of_day(it.timestamp),
        };
        if u == per_user.len() {
            per_user.push(Vec::new());
        }
        per_user[u].push((it.timestamp, event));
    }
    if per_user.is_empty() {
        return Err(LsanError::EmptyDataset);
    }
    ds.sequences = per_user
        .into_par_iter()
        .enumerate()
        .map(|(user, mut events)| {
            events.sort_by_key(|&(ts, _)| ts);
            UserSequence {
                user,
                events: events.into_iter().map(|(_, e)| e).collect(),
            }
        })
        .collect();
    Ok(ds)
}

/// Leave-one-out partition of one sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Split<'a> {
    pub train: &'a [Event],
    pub val: Event,
    pub test: Event,
}

/// The last event is the test item, the second last the validation item.
/// Sequences shorter than 3 are excluded.
pub fn split_leave_one_out(seq: &UserSequence) -> Option<Split<'_>> {
    let n = seq.events.len();
    if n < 3 {
        warn!("user {} has {n} interactions and is excluded from the split", seq.user);
        return None;
    }
    Some(Split {
        train: &seq.events[..n - 2],
        val: seq.events[n - 2],
        test: seq.events[n - 1],
    })
}

/// Context triplets of an input window; its first position has no previous category.
pub fn window_contexts(window: &[Event]) -> Vec<ContextKey> {
    window
        .iter()
        .enumerate()
        .map(|(i, e)| ContextKey {
            prev: if i == 0 { PAD_CATEGORY } else { window[i - 1].category },
            cur: e.category,
            hour: e.hour,
        })
        .collect()
}

/// An input window and the item that follows it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub window: Vec<Event>,
    pub target: usize,
}

/// One sample per prefix `v₁..v_t`, `t ≥ 1`, keeping its last `max_len` items.
pub fn generate_training_samples(train: &[Event], max_len: usize) -> Vec<Sample> {
    (1..train.len())
        .map(|t| Sample {
            window: train[t.saturating_sub(max_len)..t].to_vec(),
            target: train[t].item,
        })
        .collect()
}

/// Index-encoded sample ready for the model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub user: usize,
    pub items: Vec<usize>,
    pub contexts: Vec<usize>,
    pub target: usize,
}

fn encode(user: usize, window: &[Event], target: usize, vocab: &ContextVocab) -> Encoded {
    Encoded {
        user,
        items: window.iter().map(|e| e.item).collect(),
        contexts: window_contexts(window).iter().map(|k| vocab.lookup(k)).collect(),
        target,
    }
}

/// Context vocabulary over every triplet of every training window.
pub fn build_context_vocab(ds: &Dataset, max_len: usize) -> ContextVocab {
    let mut vocab = ContextVocab::new();
    for seq in &ds.sequences {
        let Some(split) = split_leave_one_out(seq) else { continue };
        for s in generate_training_samples(split.train, max_len) {
            for key in window_contexts(&s.window) {
                vocab.insert(key);
            }
        }
    }
    vocab
}

/// Training samples, validation cases and test cases of a dataset.
#[derive(Clone, Debug, Default)]
pub struct Prepared {
    pub train: Vec<Encoded>,
    pub val: Vec<Encoded>,
    pub test: Vec<Encoded>,
}

pub fn prepare(ds: &Dataset, vocab: &ContextVocab, max_len: usize) -> Prepared {
    let mut out = Prepared::default();
    for seq in &ds.sequences {
        let Some(split) = split_leave_one_out(seq) else { continue };
        for s in generate_training_samples(split.train, max_len) {
            out.train.push(encode(seq.user, &s.window, s.target, vocab));
        }
        let n = seq.events.len();
        let val_in = &seq.events[(n - 2).saturating_sub(max_len)..n - 2];
        let test_in = &seq.events[(n - 1).saturating_sub(max_len)..n - 1];
        out.val.push(encode(seq.user, val_in, split.val.item, vocab));
        out.test.push(encode(seq.user, test_in, split.test.item, vocab));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub categories: usize,
    pub interactions: usize,
    pub avg_per_user: f64,
    pub avg_per_item: f64,
    pub sparsity: f64,
}

impl DatasetStats {
    pub fn of(ds: &Dataset) -> Self {
        let interactions: usize = ds.sequences.iter().map(|s| s.events.len()).sum();
        let (u, i) = (ds.users.len(), ds.items.len());
        let ratio = |n: usize| if n == 0 { 0.0 } else { interactions as f64 / n as f64 };
        DatasetStats {
            users: u,
            items: i,
            categories: ds.categories.len(),
            interactions,
            avg_per_user: ratio(u),
            avg_per_item: ratio(i),
            sparsity: if u * i == 0 { 0.0 } else { 1.0 - interactions as f64 / (u * i) as f64 },
        }
    }
}

const USERS: &str = "users.tsv";
const ITEMS: &str = "items.tsv";
const CATEGORIES: &str = "categories.tsv";
const SEQUENCES: &str = "sequences.tsv";
pub const CONTEXTS: &str = "contexts.tsv";

fn write_ids(path: &Path, ids: &[String], base: usize) -> Result<()> {
    let mut out = String::new();
    for (i, id) in ids.iter().enumerate() {
        let _ = writeln!(out, "{}\t{id}", i + base);
    }
    fs::write(path, out).map_err(|e| LsanError::io(path, e))
}

fn read_ids(path: &Path, base: usize) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| LsanError::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(n, line)| match line.split_once('\t') {
            Some((i, id)) if i.parse() == Ok(n + base) => Ok(id.to_owned()),
            _ => Err(LsanError::format(path, format!("line {}: {line:?}", n + 1))),
        })
        .collect()
}

impl Dataset {
    /// Writes the id vocabularies and one `user  item:category:hour …` line per sequence.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| LsanError::io(dir, e))?;
        write_ids(&dir.join(USERS), &self.users, 0)?;
        write_ids(&dir.join(ITEMS), &self.items, 0)?;
        write_ids(&dir.join(CATEGORIES), &self.categories, 1)?;
        let mut out = String::new();
        for s in &self.sequences {
            let events: Vec<String> =
                s.events.iter().map(|e| format!("{}:{}:{}", e.item, e.category, e.hour)).collect();
            let _ = writeln!(out, "{}\t{}", s.user, events.join(" "));
        }
        let path = dir.join(SEQUENCES);
        fs::write(&path, out).map_err(|e| LsanError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let users = read_ids(&dir.join(USERS), 0)?;
        let items = read_ids(&dir.join(ITEMS), 0)?;
        let categories = read_ids(&dir.join(CATEGORIES), 1)?;
        let path = dir.join(SEQUENCES);
        let text = fs::read_to_string(&path).map_err(|e| LsanError::io(&path, e))?;
        let bad = |n: usize, line: &str| LsanError::format(&path, format!("line {}: {line:?}", n + 1));
        let mut sequences = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let (user, rest) = line.split_once('\t').ok_or_else(|| bad(n, line))?;
            let user: usize = user.parse().map_err(|_| bad(n, line))?;
            let events = rest
                .split(' ')
                .map(|tok| {
                    let mut f = tok.split(':');
                    let event = Event {
                        item: f.next()?.parse().ok().filter(|&i| i < items.len())?,
                        category: f.next()?.parse().ok().filter(|&c| c >= 1 && c <= categories.len())?,
                        hour: f.next()?.parse().ok().filter(|&h| h < 24)?,
                    };
                    f.next().is_none().then_some(event)
                })
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad(n, line))?;
            if user >= users.len() {
                return Err(bad(n, line));
            }
            sequences.push(UserSequence { user, events });
        }
        Ok(Dataset {
            users,
            items,
            categories,
            sequences,
        })
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;

    use super::*;

    fn it(user: &str, item: &str, cat: &str, ts: u64) -> Interaction {
        Interaction {
            user: user.into(),
            item: item.into(),
            category: cat.into(),
            timestamp: ts,
        }
    }

    fn ev(item: usize, category: usize) -> Event {
        Event { item, category, hour: 0 }
    }

    #[test]
    fn ingest_cases() {
        assert!(parse_interactions("").unwrap().interactions.is_empty());
        let text = "user\titem\tcategory\ttimestamp\nu1\ti1\tc1\t10\nu1\ti2\tc1\t5\nu2\ti1\tc2\t7\n";
        let got = parse_interactions(text).unwrap();
        assert_eq!(got.interactions.len(), 3);
        assert_eq!(got.interactions[1], it("u1", "i2", "c1", 5));
        assert_eq!(got.malformed, 0);

        let mut text = String::from("u\ti\tc\tnot-a-time\n");
        for n in 0..199 {
            let _ = writeln!(text, "u\ti\tc\t{n}");
        }
        let got = parse_interactions(&text).unwrap();
        assert_eq!((got.interactions.len(), got.malformed), (199, 0));
        text.push_str("u\ti\tc\tlater\n");
        text.push_str("u\ti\tc\t-4\n");
        text.push_str("u\ti\tc\n");
        let err = parse_interactions(&text).unwrap_err();
        assert!(matches!(err, LsanError::Ingest { malformed: 3, lines: 202, .. }), "{err}");
    }

    #[test]
    fn malformed_share_at_limit_is_tolerated() {
        let mut text = String::new();
        for n in 0..99 {
            let _ = writeln!(text, "u\ti\tc\t{n}");
        }
        text.push_str("u\ti\tc\tx\n");
        let got = parse_interactions(&text).unwrap();
        assert_eq!((got.interactions.len(), got.malformed), (99, 1));
    }

    #[test]
    fn sparse_user_is_removed() {
        let mut log = Vec::new();
        for u in 0..5 {
            for i in 0..5 {
                log.push(it(&format!("u{u}"), &format!("i{i}"), "c", (u * 10 + i) as u64));
            }
        }
        for i in 0..4 {
            log.push(it("rare", &format!("i{i}"), "c", 0));
        }
        let ds = build_sequences(&log).unwrap();
        assert_eq!(ds.users.len(), 5);
        assert!(!ds.users.contains(&"rare".to_owned()));
    }

    #[test]
    fn equal_timestamps_keep_file_order() {
        let mut log = Vec::new();
        for u in 0..5 {
            for i in 0..5 {
                log.push(it(&format!("u{u}"), &format!("i{i}"), "c", 100));
            }
        }
        let ds = build_sequences(&log).unwrap();
        for s in &ds.sequences {
            assert_eq!(s.items(), vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn sequences_are_chronological_and_hours_utc() {
        let mut log = Vec::new();
        for u in 0..5 {
            for i in 0..5 {
                log.push(it(&format!("u{u}"), &format!("i{i}"), "c", 3600 * (30 - i as u64)));
            }
        }
        let ds = build_sequences(&log).unwrap();
        assert_eq!(ds.sequences[0].items(), vec![4, 3, 2, 1, 0]);
        assert_eq!(ds.sequences[0].events[0].hour, 2);
        assert_eq!(hour_of_day(86_399), 23);
    }

    /// Filtering by repeated full passes over the raw log until stable.
    fn brute_force_core(log: &[Interaction]) -> Vec<bool> {
        let mut live: Vec<bool> = vec![true; log.len()];
        loop {
            let before = live.clone();
            let count = |live: &[bool], f: &dyn Fn(&Interaction) -> bool| {
                log.iter().zip(live).filter(|(x, &l)| l && f(x)).count()
            };
            let items_ok: Vec<bool> =
                log.iter().map(|x| count(&live, &|y| y.item == x.item) >= CORE).collect();
            for (l, ok) in live.iter_mut().zip(items_ok) {
                *l &= ok;
            }
            let users_ok: Vec<bool> =
                log.iter().map(|x| count(&live, &|y| y.user == x.user) >= CORE).collect();
            for (l, ok) in live.iter_mut().zip(users_ok) {
                *l &= ok;
            }
            if live == before {
                return live;
            }
        }
    }

    #[test]
    fn cascade_reaches_fixed_point() {
        // Item `x` has four interactions and goes first, which leaves user `b`
        // with four, which in turn leaves item `y` with four.
        let mut log = Vec::new();
        for u in ["a", "c", "d", "e", "f"] {
            for i in 0..5 {
                log.push(it(u, &format!("i{i}"), "c", i));
            }
        }
        for i in 0..3 {
            log.push(it("b", &format!("i{i}"), "c", i));
        }
        for u in ["b", "a", "c", "d"] {
            log.push(it(u, "x", "c", 9));
        }
        for u in ["b", "a", "c", "d", "e"] {
            log.push(it(u, "y", "c", 10));
        }
        let keep = five_core(&log);
        assert_eq!(keep, brute_force_core(&log));
        let ds = build_sequences(&log).unwrap();
        assert!(!ds.users.contains(&"b".to_owned()));
        assert!(!ds.items.contains(&"x".to_owned()));
        assert!(!ds.items.contains(&"y".to_owned()));
        assert_eq!(ds.users.len(), 5);
        assert_eq!(ds.items.len(), 5);
    }

    #[test]
    fn everything_filtered_is_an_error() {
        let log = vec![it("u", "i", "c", 1)];
        assert!(matches!(build_sequences(&log), Err(LsanError::EmptyDataset)));
    }

    proptest! {
        #[test]
        fn filter_matches_brute_force_and_leaves_a_core(
            raw in proptest::collection::vec((0u8..8, 0u8..8), 0..160),
        ) {
            let log: Vec<Interaction> = raw
                .iter()
                .enumerate()
                .map(|(n, (u, i))| it(&u.to_string(), &i.to_string(), "c", n as u64))
                .collect();
            let keep = five_core(&log);
            prop_assert_eq!(&keep, &brute_force_core(&log));
            if let Ok(ds) = build_sequences(&log) {
                let mut per_item = vec![0usize; ds.items.len()];
                for s in &ds.sequences {
                    prop_assert!(s.events.len() >= CORE);
                    for e in &s.events {
                        per_item[e.item] += 1;
                    }
                }
                prop_assert!(per_item.iter().all(|&c| c >= CORE));
            }
        }
    }

    #[test]
    fn leave_one_out_cases() {
        let seq = |n: usize| UserSequence {
            user: 0,
            events: (0..n).map(|i| ev(i, 1)).collect(),
        };
        let five = seq(5);
        let s = split_leave_one_out(&five).unwrap();
        assert_eq!((s.train.len(), s.val.item, s.test.item), (3, 3, 4));
        let three = seq(3);
        assert_eq!(split_leave_one_out(&three).unwrap().train.len(), 1);
        assert!(split_leave_one_out(&seq(2)).is_none());
    }

    #[test]
    fn sample_counts_and_windows() {
        let train: Vec<Event> = (0..6).map(|i| ev(i, 1)).collect();
        assert_eq!(generate_training_samples(&train[..2], 50).len(), 1);
        let s = generate_training_samples(&train[..5], 50);
        assert_eq!(s.iter().map(|s| s.target).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        let s = generate_training_samples(&train, 3);
        // t = 5 (1-based) is the fifth prefix; its window is v₃v₄v₅.
        let items: Vec<usize> = s[4].window.iter().map(|e| e.item).collect();
        assert_eq!(items, vec![2, 3, 4]);
        assert_eq!(s[4].target, 5);
    }

    proptest! {
        #[test]
        fn windows_match_naive_slicing(len in 2usize..30, max_len in 1usize..12) {
            let train: Vec<Event> = (0..len).map(|i| ev(i, i % 3 + 1)).collect();
            let samples = generate_training_samples(&train, max_len);
            prop_assert_eq!(samples.len(), len - 1);
            for (k, s) in samples.iter().enumerate() {
                let t = k + 1;
                let naive: Vec<usize> = (0..t).skip(t.saturating_sub(max_len)).collect();
                prop_assert_eq!(s.window.iter().map(|e| e.item).collect::<Vec<_>>(), naive);
                prop_assert_eq!(s.target, t);
                let ctx = window_contexts(&s.window);
                prop_assert_eq!(ctx[0].prev, PAD_CATEGORY);
                for i in 1..ctx.len() {
                    prop_assert_eq!(ctx[i].prev, s.window[i - 1].category);
                }
            }
        }
    }

    fn synthetic_log() -> Vec<Interaction> {
        let mut log = Vec::new();
        for u in 0..12u64 {
            for step in 0..(6 + u % 4) {
                let item = (u + step) % 9;
                log.push(it(&format!("user{u}"), &format!("item{item}"), &format!("cat{}", item % 3), u * 7919 + step * 4000));
            }
        }
        log
    }

    #[test]
    fn targets_never_leak_held_out_positions() {
        let ds = build_sequences(&synthetic_log()).unwrap();
        let vocab = build_context_vocab(&ds, 4);
        let prepared = prepare(&ds, &vocab, 4);
        for seq in &ds.sequences {
            let n = seq.events.len();
            let train_targets: Vec<usize> =
                prepared.train.iter().filter(|s| s.user == seq.user).map(|s| s.target).collect();
            assert_eq!(train_targets, seq.items()[1..n - 2].to_vec());
        }
        assert_eq!(prepared.val.len(), ds.sequences.len());
        assert!(prepared.train.iter().flat_map(|s| &s.contexts).all(|&c| c != 0));
        assert!(prepared.test.iter().all(|s| s.items.len() <= 4));
    }

    #[test]
    fn preparation_is_deterministic_and_roundtrips() {
        let log = synthetic_log();
        let a = build_sequences(&log).unwrap();
        let b = build_sequences(&log).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), a);
        assert_eq!(build_context_vocab(&a, 5), build_context_vocab(&b, 5));
        let items: HashSet<usize> = a.sequences.iter().flat_map(|s| s.items()).collect();
        assert_eq!(items.len(), a.items.len());
    }

    #[test]
    fn stats_columns() {
        let ds = build_sequences(&synthetic_log()).unwrap();
        let st = DatasetStats::of(&ds);
        assert_eq!(st.users, ds.sequences.len());
        assert_eq!(st.interactions, ds.sequences.iter().map(|s| s.events.len()).sum::<usize>());
        assert!((0.0..1.0).contains(&st.sparsity));
        assert_eq!(st.categories, 3);
    }
}

//! Instances, the TSV corpus format and the synthetic interest-drift generator.
//!
//! A corpus file holds one instance per line:
//!
//! ```text
//! label <TAB> target_item <TAB> target_cat <TAB> h_item,h_item,... <TAB> h_cat,h_cat,...
//! ```
//!
//! Ids are opaque strings, mapped to dense integers in first-seen order
//! starting at 1 (0 is the padding id). Consecutive lines with identical
//! histories belong to the same user; every tenth user goes to the test
//! split, so files written in a shuffled user order get a uniform 90/10
//! split that survives a write/parse round trip.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embedding::{sample_negative, PADDING_ID};
use crate::error::{Error, Result};

pub const PAD_TOKEN: &str = "<pad>";
pub const DEFAULT_MAX_HISTORY: usize = 50;
/// One user in this many goes to the test split.
pub const TEST_EVERY: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Instance {
    pub history_items: Vec<usize>,
    pub history_cats: Vec<usize>,
    pub target_item: usize,
    pub target_cat: usize,
    pub label: u8,
}

impl Instance {
    pub fn history_len(&self) -> usize {
        self.history_items.len()
    }
}

/// Keeps the most recent `max_len` behaviors.
pub fn truncate_history(instance: &Instance, max_len: usize) -> Result<Instance> {
    if max_len == 0 {
        return Err(Error::config("max_history must be at least 1"));
    }
    let skip = instance.history_items.len().saturating_sub(max_len);
    Ok(Instance {
        history_items: instance.history_items[skip..].to_vec(),
        history_cats: instance.history_cats[skip..].to_vec(),
        ..instance.clone()
    })
}

/// String ↔ dense id mapping; id 0 is always [`PAD_TOKEN`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        Vocab {
            tokens: vec![PAD_TOKEN.to_string()],
            index: HashMap::from([(PAD_TOKEN.to_string(), PADDING_ID)]),
        }
    }

    pub fn intern(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Number of ids including padding.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub item_vocab: Vocab,
    pub cat_vocab: Vocab,
    /// Category of each item id, taken from its first appearance; 0 for padding.
    pub item_category: Vec<usize>,
    /// All instances in file order.
    pub instances: Vec<Instance>,
    pub train: Vec<Instance>,
    pub test: Vec<Instance>,
    pub provenance: String,
}

impl Corpus {
    /// Builds vocab-aware splits from instances whose ids already index `item_vocab`/`cat_vocab`.
    pub fn from_instances(
        item_vocab: Vocab,
        cat_vocab: Vocab,
        item_category: Vec<usize>,
        instances: Vec<Instance>,
        provenance: impl Into<String>,
    ) -> Result<Corpus> {
        if instances.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let (train, test) = split_by_user(&instances);
        Ok(Corpus {
            item_vocab,
            cat_vocab,
            item_category,
            instances,
            train,
            test,
            provenance: provenance.into(),
        })
    }

    pub fn n_items(&self) -> usize {
        self.item_vocab.len()
    }

    pub fn n_cats(&self) -> usize {
        self.cat_vocab.len()
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let join = |ids: &[usize], vocab: &Vocab| {
            ids.iter()
                .map(|&id| vocab.token(id).unwrap_or(PAD_TOKEN))
                .collect::<Vec<_>>()
                .join(",")
        };
        for inst in &self.instances {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                inst.label,
                self.item_vocab.token(inst.target_item).unwrap_or(PAD_TOKEN),
                self.cat_vocab.token(inst.target_cat).unwrap_or(PAD_TOKEN),
                join(&inst.history_items, &self.item_vocab),
                join(&inst.history_cats, &self.cat_vocab),
            )
            .map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

/// Groups consecutive instances with identical histories into users and
/// sends every [`TEST_EVERY`]-th user to the test split.
pub fn split_by_user(instances: &[Instance]) -> (Vec<Instance>, Vec<Instance>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut user = 0usize;
    for (i, inst) in instances.iter().enumerate() {
        if i > 0 {
            let prev = &instances[i - 1];
            if prev.history_items != inst.history_items || prev.history_cats != inst.history_cats {
                user += 1;
            }
        }
        if user % TEST_EVERY == TEST_EVERY - 1 {
            test.push(inst.clone());
        } else {
            train.push(inst.clone());
        }
    }
    (train, test)
}

pub fn parse_corpus(path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus_str(&text, &path.display().to_string())
}

pub fn parse_corpus_str(text: &str, provenance: &str) -> Result<Corpus> {
    let mut items = Vocab::new();
    let mut cats = Vocab::new();
    let mut item_category = vec![PADDING_ID];
    let mut instances = Vec::new();

    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let err = |column: usize, reason: String| Error::Parse { line, column, reason };
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 5 {
            return Err(err(
                fields.len().min(5) + 1,
                format!("expected 5 tab-separated fields, found {}", fields.len()),
            ));
        }
        let label = match fields[0].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(err(1, format!("label must be 0 or 1, found `{other}`"))),
        };
        let token = |column: usize, s: &str| -> Result<String> {
            let s = s.trim();
            if s.is_empty() {
                Err(err(column, "empty id".into()))
            } else if s == PAD_TOKEN {
                Err(err(column, format!("`{PAD_TOKEN}` is reserved for padding")))
            } else {
                Ok(s.to_string())
            }
        };
        let target_item_tok = token(2, fields[1])?;
        let target_cat_tok = token(3, fields[2])?;
        let hist_items: Vec<String> = fields[3].split(',').map(|s| token(4, s)).collect::<Result<_>>()?;
        let hist_cats: Vec<String> = fields[4].split(',').map(|s| token(5, s)).collect::<Result<_>>()?;
        if hist_items.len() != hist_cats.len() {
            return Err(err(
                5,
                format!(
                    "{} history items but {} history categories",
                    hist_items.len(),
                    hist_cats.len()
                ),
            ));
        }

        let mut intern = |item: &str, cat: &str| {
            let i = items.intern(item);
            let c = cats.intern(cat);
            if i == item_category.len() {
                item_category.push(c);
            }
            (i, c)
        };
        let mut history_items = Vec::with_capacity(hist_items.len());
        let mut history_cats = Vec::with_capacity(hist_items.len());
        for (i, c) in hist_items.iter().zip(&hist_cats) {
            let (i, c) = intern(i, c);
            history_items.push(i);
            history_cats.push(c);
        }
        let (target_item, target_cat) = intern(&target_item_tok, &target_cat_tok);
        instances.push(Instance {
            history_items,
            history_cats,
            target_item,
            target_cat,
            label,
        });
    }
    Corpus::from_instances(items, cats, item_category, instances, provenance)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ReviewReport {
    pub users: usize,
    pub skipped: usize,
}

/// Paired positive/negative instances from per-user, time-sorted reviews.
///
/// The positive predicts the last review from the ones before it; the
/// negative keeps the history and draws a target uniformly from items the
/// user never reviewed. `item_category` maps item ids to category ids and
/// its length is the item vocabulary size.
pub fn build_review_instances<R: Rng + ?Sized>(
    reviews: &[Vec<(usize, usize)>],
    item_category: &[usize],
    rng: &mut R,
) -> Result<(Vec<Instance>, ReviewReport)> {
    let mut out = Vec::with_capacity(2 * reviews.len());
    let mut report = ReviewReport::default();
    for user in reviews {
        if user.len() < 2 {
            report.skipped += 1;
            continue;
        }
        let reviewed: BTreeSet<usize> = user.iter().map(|&(i, _)| i).collect();
        if let Some(&id) = reviewed.iter().find(|&&i| i == PADDING_ID || i >= item_category.len()) {
            return Err(Error::Vocabulary {
                id,
                size: item_category.len(),
            });
        }
        // real item ids are 1..K; padding is never a candidate
        let candidates = item_category.len() - 1;
        if reviewed.len() >= candidates {
            report.skipped += 1;
            continue;
        }
        let (last, history) = user.split_last().expect("at least two reviews");
        let negative = loop {
            let id = 1 + rng.random_range(0..candidates);
            if !reviewed.contains(&id) {
                break id;
            }
        };
        let history_items: Vec<usize> = history.iter().map(|&(i, _)| i).collect();
        let history_cats: Vec<usize> = history.iter().map(|&(_, c)| c).collect();
        out.push(Instance {
            history_items: history_items.clone(),
            history_cats: history_cats.clone(),
            target_item: last.0,
            target_cat: last.1,
            label: 1,
        });
        out.push(Instance {
            history_items,
            history_cats,
            target_item: negative,
            target_cat: item_category[negative],
            label: 0,
        });
        report.users += 1;
    }
    Ok((out, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_cats: usize,
    /// Latent steps per user; the history holds the first `t - 1`.
    pub t: usize,
    pub drift_prob: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 10_000,
            n_items: 2_000,
            n_cats: 100,
            t: 10,
            drift_prob: 0.3,
            noise: 0.1,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("drift_prob", self.drift_prob), ("noise", self.noise)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.n_cats < 2 {
            return Err(Error::config(format!("n_cats must be at least 2, got {}", self.n_cats)));
        }
        if self.t < 2 {
            return Err(Error::config(format!("T must be at least 2, got {}", self.t)));
        }
        if self.n_users == 0 {
            return Err(Error::config("n_users must be positive"));
        }
        if self.n_items < self.n_cats * self.t {
            return Err(Error::config(format!(
                "n_items ({}) must be at least n_cats × T ({}) so every category has an unseen item",
                self.n_items,
                self.n_cats * self.t
            )));
        }
        Ok(())
    }

    /// Category id of item `j` (1-based ids on both sides).
    pub fn category_of(&self, item: usize) -> usize {
        (item - 1) % self.n_cats + 1
    }

    fn items_in(&self, cat: usize) -> usize {
        (self.n_items - cat) / self.n_cats + 1
    }

    fn item_in(&self, cat: usize, k: usize) -> usize {
        cat + k * self.n_cats
    }
}

/// One generated user before it is flattened into instances.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthUser {
    /// Latent interest category at steps `1..=T`.
    pub latent: Vec<usize>,
    pub history_items: Vec<usize>,
    pub history_cats: Vec<usize>,
    pub positive: usize,
    pub negative: usize,
}

fn other_category<R: Rng + ?Sized>(rng: &mut R, n_cats: usize, current: usize) -> usize {
    sample_negative(rng, n_cats, current - 1).expect("n_cats >= 2") + 1
}

pub fn synth_users(config: &SynthConfig) -> Result<Vec<SynthUser>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_cats = config.n_cats;
    let mut users = Vec::with_capacity(config.n_users);
    for _ in 0..config.n_users {
        let mut latent = Vec::with_capacity(config.t);
        let mut z = rng.random_range(1..=n_cats);
        latent.push(z);
        for _ in 1..config.t {
            if rng.random::<f64>() < config.drift_prob {
                z = other_category(&mut rng, n_cats, z);
            }
            latent.push(z);
        }
        let mut history_items = Vec::with_capacity(config.t - 1);
        let mut history_cats = Vec::with_capacity(config.t - 1);
        for &z in &latent[..config.t - 1] {
            let c = if rng.random::<f64>() < config.noise {
                rng.random_range(1..=n_cats)
            } else {
                z
            };
            history_items.push(config.item_in(c, rng.random_range(0..config.items_in(c))));
            history_cats.push(c);
        }
        let final_cat = latent[config.t - 1];
        let positive = loop {
            let item = config.item_in(final_cat, rng.random_range(0..config.items_in(final_cat)));
            if !history_items.contains(&item) {
                break item;
            }
        };
        let neg_cat = other_category(&mut rng, n_cats, final_cat);
        let negative = config.item_in(neg_cat, rng.random_range(0..config.items_in(neg_cat)));
        users.push(SynthUser {
            latent,
            history_items,
            history_cats,
            positive,
            negative,
        });
    }
    Ok(users)
}

/// Deterministic synthetic corpus with planted, drifting interests.
///
/// Users are emitted in a seeded random order, each as a positive followed
/// by its paired negative.
pub fn synth_generate(config: &SynthConfig) -> Result<Corpus> {
    let mut users = synth_users(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed);
    users.shuffle(&mut rng);

    let mut item_vocab = Vocab::new();
    let mut cat_vocab = Vocab::new();
    let mut item_category = vec![PADDING_ID];
    for c in 1..=config.n_cats {
        cat_vocab.intern(&format!("c{c}"));
    }
    for j in 1..=config.n_items {
        item_vocab.intern(&format!("i{j}"));
        item_category.push(config.category_of(j));
    }

    let mut instances = Vec::with_capacity(2 * users.len());
    for u in users {
        for (target, label) in [(u.positive, 1), (u.negative, 0)] {
            instances.push(Instance {
                history_items: u.history_items.clone(),
                history_cats: u.history_cats.clone(),
                target_item: target,
                target_cat: config.category_of(target),
                label,
            });
        }
    }
    let provenance = format!(
        "synthetic n_users={} n_items={} n_cats={} T={} drift_prob={} noise={} seed={}",
        config.n_users, config.n_items, config.n_cats, config.t, config.drift_prob, config.noise, config.seed
    );
    Corpus::from_instances(item_vocab, cat_vocab, item_category, instances, provenance)
}

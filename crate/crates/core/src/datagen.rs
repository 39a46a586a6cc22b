//! Deterministic synthetic troll-campaign corpus.
//!
//! Every campaign cell has its trolls and an equal-topic control group of
//! non-trolls. Troll posts carry planted marker spans whose family (strategy,
//! appraisal or plain filler) follows the campaign archetype; non-troll posts
//! carry markers at a low background rate with no campaign mixture. All
//! randomness comes from one [`SplitMix64`] stream.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AppraisalTag, Post, StrategyClass, UserTimeline};

/// Reference splitmix64 generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform on `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` (multiply-high reduction).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Uniform integer in `lo..=hi`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below(hi - lo + 1)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Index drawn from unnormalised non-negative weights.
    pub fn weighted(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut x = self.next_f64() * total;
        for (i, w) in weights.iter().enumerate() {
            if x < *w {
                return i;
            }
            x -= w;
        }
        weights.len() - 1
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GenError {
    #[error("invalid generator config: {field}: {msg}")]
    Invalid { field: &'static str, msg: String },
}

/// Marker family a planted span is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MarkerFamily {
    Strategy,
    Appraisal,
    Plain,
}

impl MarkerFamily {
    pub const ALL: [MarkerFamily; 3] = [MarkerFamily::Strategy, MarkerFamily::Appraisal, MarkerFamily::Plain];
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignArchetype {
    pub name: &'static str,
    /// Probabilities over [`MarkerFamily::ALL`].
    pub mixture: [f64; 3],
}

/// A: strategy-heavy, B: appraisal-heavy, C: balanced.
pub const ARCHETYPES: [CampaignArchetype; 3] = [
    CampaignArchetype { name: "A", mixture: [0.7, 0.2, 0.1] },
    CampaignArchetype { name: "B", mixture: [0.2, 0.7, 0.1] },
    CampaignArchetype { name: "C", mixture: [0.4, 0.4, 0.2] },
];

pub fn campaign_names() -> Vec<String> {
    ARCHETYPES.iter().map(|a| a.name.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub seed: u64,
    pub troll_users_per_campaign: usize,
    pub nontroll_users_per_campaign: usize,
    pub min_posts: usize,
    pub max_posts: usize,
    pub min_post_len: usize,
    pub max_post_len: usize,
    pub base_vocab: usize,
    /// Tokens per strategy class and per appraisal category.
    pub lexicon_size: usize,
    pub troll_marker_rate: f64,
    pub background_marker_rate: f64,
    /// Base-vocabulary words reserved as each campaign cell's topic pool.
    pub topic_words: usize,
    /// Probability that a filler token comes from the cell's topic pool.
    pub topic_rate: f64,
    pub min_span: usize,
    pub max_span: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 42,
            troll_users_per_campaign: 50,
            nontroll_users_per_campaign: 100,
            min_posts: 5,
            max_posts: 20,
            min_post_len: 6,
            max_post_len: 25,
            base_vocab: 500,
            lexicon_size: 12,
            troll_marker_rate: 0.6,
            background_marker_rate: 0.05,
            topic_words: 40,
            topic_rate: 0.3,
            min_span: 2,
            max_span: 4,
        }
    }
}

/// The word lists a corpus is generated from.
#[derive(Debug, Clone)]
pub struct Lexicons {
    pub general: Vec<String>,
    pub topics: Vec<Vec<String>>,
    pub strategy: Vec<Vec<String>>,
    pub appraisal: Vec<Vec<String>>,
}

impl Lexicons {
    pub fn build(cfg: &GenConfig) -> Self {
        let base: Vec<String> = (0..cfg.base_vocab).map(|i| format!("w{i:03}")).collect();
        let n_topic = cfg.topic_words * ARCHETYPES.len();
        let topics = (0..ARCHETYPES.len())
            .map(|c| base[c * cfg.topic_words..(c + 1) * cfg.topic_words].to_vec())
            .collect();
        let general = base[n_topic.min(base.len())..].to_vec();
        let lex = |prefix: &str| (0..cfg.lexicon_size).map(|i| format!("{prefix}{i:02}")).collect::<Vec<_>>();
        Lexicons {
            general,
            topics,
            strategy: vec![lex("loaded"), lex("common"), lex("doubt")],
            appraisal: vec![lex("ideat"), lex("pos"), lex("neg"), lex("persona")],
        }
    }

    fn all_lists(&self) -> Vec<&Vec<String>> {
        let mut lists = vec![&self.general];
        lists.extend(self.topics.iter());
        lists.extend(self.strategy.iter());
        lists.extend(self.appraisal.iter());
        lists
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |field, msg: &str| Err(GenError::Invalid { field, msg: msg.to_string() });
        for (field, rate) in [
            ("troll_marker_rate", self.troll_marker_rate),
            ("background_marker_rate", self.background_marker_rate),
            ("topic_rate", self.topic_rate),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return bad(field, "must lie in [0, 1]");
            }
        }
        if self.min_posts == 0 || self.min_posts > self.max_posts {
            return bad("min_posts", "need 1 <= min_posts <= max_posts");
        }
        if self.min_span == 0 || self.min_span > self.max_span {
            return bad("min_span", "need 1 <= min_span <= max_span");
        }
        if self.min_post_len < self.max_span || self.min_post_len > self.max_post_len {
            return bad("min_post_len", "need max_span <= min_post_len <= max_post_len");
        }
        if self.lexicon_size == 0 {
            return bad("lexicon_size", "must be at least 1");
        }
        if self.troll_users_per_campaign + self.nontroll_users_per_campaign == 0 {
            return bad("troll_users_per_campaign", "corpus would be empty");
        }
        if self.topic_words * ARCHETYPES.len() >= self.base_vocab {
            return bad("topic_words", "topic lexicons overlap or exhaust the base vocabulary");
        }
        let lex = Lexicons::build(self);
        let mut seen = BTreeSet::new();
        for list in lex.all_lists() {
            for w in list {
                if !seen.insert(w.as_str()) {
                    return Err(GenError::Invalid { field: "lexicons", msg: format!("token {w} in two lexicons") });
                }
            }
        }
        Ok(())
    }

    pub fn total_users(&self) -> usize {
        ARCHETYPES.len() * (self.troll_users_per_campaign + self.nontroll_users_per_campaign)
    }
}

/// Counts of what the generator planted; plain spans leave no trace in the
/// emitted records, so these are the only record of them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenStats {
    pub troll_posts: usize,
    pub troll_spans: usize,
    pub nontroll_posts: usize,
    pub nontroll_spans: usize,
    /// Per campaign, span counts over [`MarkerFamily::ALL`] in troll posts.
    pub family_counts: Vec<[usize; 3]>,
}

#[derive(Debug, Clone)]
pub struct GeneratedCorpus {
    pub users: Vec<UserTimeline>,
    pub stats: GenStats,
}

pub fn gen_corpus(cfg: &GenConfig) -> Result<GeneratedCorpus, GenError> {
    cfg.validate()?;
    let lex = Lexicons::build(cfg);
    let mut rng = SplitMix64::new(cfg.seed);
    let mut stats = GenStats { family_counts: vec![[0; 3]; ARCHETYPES.len()], ..Default::default() };
    let mut users = Vec::with_capacity(cfg.total_users());
    for (c, arch) in ARCHETYPES.iter().enumerate() {
        let mut bag = FamilyBag::new(arch);
        for troll in [true, false] {
            let n = if troll { cfg.troll_users_per_campaign } else { cfg.nontroll_users_per_campaign };
            for _ in 0..n {
                let n_posts = rng.range_inclusive(cfg.min_posts, cfg.max_posts);
                let posts = (0..n_posts)
                    .map(|_| gen_post(cfg, &lex, c, troll.then_some(&mut bag), &mut rng, &mut stats))
                    .collect();
                users.push(UserTimeline {
                    user_id: format!("u{:04}", users.len()),
                    troll: troll as u8,
                    campaign: troll.then(|| arch.name.to_string()),
                    posts,
                });
            }
        }
    }
    Ok(GeneratedCorpus { users, stats })
}

/// Shuffled bag of marker families holding each archetype's mixture exactly
/// once per refill, so campaign-level frequencies track the archetype.
struct FamilyBag {
    refill: Vec<MarkerFamily>,
    items: Vec<MarkerFamily>,
}

impl FamilyBag {
    const SIZE: f64 = 20.0;

    fn new(arch: &CampaignArchetype) -> Self {
        let refill = MarkerFamily::ALL
            .iter()
            .zip(arch.mixture)
            .flat_map(|(&f, p)| std::iter::repeat_n(f, (p * Self::SIZE).round() as usize))
            .collect();
        FamilyBag { refill, items: Vec::new() }
    }

    fn draw(&mut self, rng: &mut SplitMix64) -> MarkerFamily {
        if self.items.is_empty() {
            self.items = self.refill.clone();
            rng.shuffle(&mut self.items);
        }
        self.items.pop().expect("refilled")
    }
}

fn pick<'a>(list: &'a [String], rng: &mut SplitMix64) -> &'a str {
    &list[rng.below(list.len())]
}

fn gen_post(
    cfg: &GenConfig,
    lex: &Lexicons,
    cell: usize,
    mut archetype: Option<&mut FamilyBag>,
    rng: &mut SplitMix64,
    stats: &mut GenStats,
) -> Post {
    let len = rng.range_inclusive(cfg.min_post_len, cfg.max_post_len);
    let mut tokens: Vec<String> = (0..len)
        .map(|_| {
            if rng.bernoulli(cfg.topic_rate) {
                pick(&lex.topics[cell], rng).to_string()
            } else {
                pick(&lex.general, rng).to_string()
            }
        })
        .collect();
    let mut post = Post {
        tokens: Vec::new(),
        propaganda: 0,
        strategy: None,
        appraisal_tags: vec![AppraisalTag::O; len],
        gold_spans: Vec::new(),
    };
    let rate = if archetype.is_some() { cfg.troll_marker_rate } else { cfg.background_marker_rate };
    match archetype {
        Some(_) => stats.troll_posts += 1,
        None => stats.nontroll_posts += 1,
    }
    if rng.bernoulli(rate) {
        let family = match archetype.as_mut() {
            Some(bag) => bag.draw(rng),
            None => [MarkerFamily::Strategy, MarkerFamily::Appraisal][rng.below(2)],
        };
        match archetype {
            Some(_) => {
                stats.troll_spans += 1;
                stats.family_counts[cell][family as usize] += 1;
            }
            None => stats.nontroll_spans += 1,
        }
        let span = rng.range_inclusive(cfg.min_span, cfg.max_span);
        let start = rng.range_inclusive(0, len - span);
        match family {
            MarkerFamily::Strategy => {
                let class = rng.below(StrategyClass::ALL.len());
                for t in &mut tokens[start..start + span] {
                    *t = pick(&lex.strategy[class], rng).to_string();
                }
                post.propaganda = 1;
                post.strategy = Some(StrategyClass::from_index(class));
                post.gold_spans.push([start, start + span]);
            }
            MarkerFamily::Appraisal => {
                let cat = rng.below(AppraisalTag::CATEGORIES.len());
                for (t, tag) in tokens[start..start + span].iter_mut().zip(&mut post.appraisal_tags[start..start + span]) {
                    *t = pick(&lex.appraisal[cat], rng).to_string();
                    *tag = AppraisalTag::CATEGORIES[cat];
                }
                post.gold_spans.push([start, start + span]);
            }
            MarkerFamily::Plain => {
                for t in &mut tokens[start..start + span] {
                    *t = pick(&lex.general, rng).to_string();
                }
            }
        }
    }
    post.tokens = tokens;
    post
}

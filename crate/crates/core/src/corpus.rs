//! Corpus records and the JSONL exchange format.
//!
//! One user per line, keys in the order
//! `user_id, troll, campaign, posts[tokens, propaganda, strategy, appraisal_tags, gold_spans]`.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("user {user}: {msg}")]
    Invalid { user: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StrategyClass {
    #[serde(rename = "LOADED_LANGUAGE")]
    LoadedLanguage,
    #[serde(rename = "APPEAL_TO_COMMONALITY")]
    AppealToCommonality,
    #[serde(rename = "DOUBT")]
    Doubt,
}

impl StrategyClass {
    pub const ALL: [StrategyClass; 3] =
        [StrategyClass::LoadedLanguage, StrategyClass::AppealToCommonality, StrategyClass::Doubt];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    /// Human-readable name used in explanations.
    pub fn phrase(self) -> &'static str {
        match self {
            StrategyClass::LoadedLanguage => "loaded language",
            StrategyClass::AppealToCommonality => "appeal to commonality",
            StrategyClass::Doubt => "doubt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AppraisalTag {
    O,
    #[serde(rename = "IDEATIONAL")]
    Ideational,
    #[serde(rename = "SENT_POS")]
    SentPos,
    #[serde(rename = "SENT_NEG")]
    SentNeg,
    #[serde(rename = "PERSONA")]
    Persona,
}

impl AppraisalTag {
    pub const ALL: [AppraisalTag; 5] = [
        AppraisalTag::O,
        AppraisalTag::Ideational,
        AppraisalTag::SentPos,
        AppraisalTag::SentNeg,
        AppraisalTag::Persona,
    ];
    /// The four non-`O` categories.
    pub const CATEGORIES: [AppraisalTag; 4] =
        [AppraisalTag::Ideational, AppraisalTag::SentPos, AppraisalTag::SentNeg, AppraisalTag::Persona];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    pub fn label(self) -> &'static str {
        match self {
            AppraisalTag::O => "O",
            AppraisalTag::Ideational => "IDEATIONAL",
            AppraisalTag::SentPos => "SENT_POS",
            AppraisalTag::SentNeg => "SENT_NEG",
            AppraisalTag::Persona => "PERSONA",
        }
    }
}

impl fmt::Display for AppraisalTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Post {
    pub tokens: Vec<String>,
    pub propaganda: u8,
    pub strategy: Option<StrategyClass>,
    pub appraisal_tags: Vec<AppraisalTag>,
    /// Half-open `[start, end)` token offsets.
    pub gold_spans: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserTimeline {
    pub user_id: String,
    pub troll: u8,
    pub campaign: Option<String>,
    pub posts: Vec<Post>,
}

impl UserTimeline {
    pub fn is_troll(&self) -> bool {
        self.troll == 1
    }

    pub fn token_count(&self) -> usize {
        self.posts.iter().map(|p| p.tokens.len()).sum()
    }

    /// Checks the record invariants.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |msg: String| Err(CorpusError::Invalid { user: self.user_id.clone(), msg });
        if self.posts.is_empty() {
            return bad("timeline has no posts".into());
        }
        if self.troll > 1 {
            return bad(format!("troll label {} not in {{0,1}}", self.troll));
        }
        if self.is_troll() != self.campaign.is_some() {
            return bad("campaign must be present iff troll = 1".into());
        }
        for (j, p) in self.posts.iter().enumerate() {
            if p.tokens.is_empty() {
                return bad(format!("post {j} is empty"));
            }
            if p.appraisal_tags.len() != p.tokens.len() {
                return bad(format!("post {j}: {} tags for {} tokens", p.appraisal_tags.len(), p.tokens.len()));
            }
            if p.strategy.is_some() && p.propaganda != 1 {
                return bad(format!("post {j}: strategy without propaganda flag"));
            }
            for s in &p.gold_spans {
                if s[0] >= s[1] || s[1] > p.tokens.len() {
                    return bad(format!("post {j}: span {s:?} outside 0..{}", p.tokens.len()));
                }
            }
        }
        Ok(())
    }
}

pub fn write_jsonl<W: Write>(users: &[UserTimeline], mut out: W) -> Result<(), CorpusError> {
    for u in users {
        let line = serde_json::to_string(u).map_err(|e| CorpusError::Parse { line: 0, source: e })?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn to_jsonl_string(users: &[UserTimeline]) -> String {
    let mut buf = Vec::new();
    write_jsonl(users, &mut buf).expect("in-memory write");
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<UserTimeline>, CorpusError> {
    let mut users = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let user: UserTimeline =
            serde_json::from_str(&line).map_err(|e| CorpusError::Parse { line: i + 1, source: e })?;
        user.validate()?;
        users.push(user);
    }
    Ok(users)
}

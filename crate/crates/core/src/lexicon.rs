//! Gendered-term dictionary and name gazetteer.
//!
//! Both are loaded from small TSV files and are immutable afterwards, so a
//! single instance can be shared by any number of readers.
//!
//! Lexicon lines look like `term<TAB>gender<TAB>counterpart|counterpart`.
//! Counterparts may be multi-word phrases (`miHla Dak/tar`); such phrases
//! never appear as keys and are reported as `counterpart_only`.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bundled lexicon built from the 573 male/female term pairs.
pub const BUNDLED_LEXICON: &str = include_str!("../data/lexicon.tsv");
/// Bundled gazetteer: 30 male and 30 female names.
pub const BUNDLED_GAZETTEER: &str = include_str!("../data/gazetteer.tsv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub fn opposite(self) -> Gender {
        match self {
            Gender::Male => Gender::Female,
            Gender::Female => Gender::Male,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Gender {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "male" | "m" => Ok(Gender::Male),
            "female" | "f" => Ok(Gender::Female),
            other => Err(format!("unknown gender `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LexEntry {
    pub gender: Gender,
    /// Non-empty, duplicate-free, in file order.
    pub counterparts: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GenderedLexicon {
    entries: HashMap<String, LexEntry>,
    /// Keys in load order, used for serialization.
    order: Vec<String>,
    /// Every token that is a key or part of any counterpart phrase.
    gendered_tokens: HashSet<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    /// Counterparts that never appear as keys.
    pub counterpart_only: Vec<String>,
    /// `(a, b)` where `a` lists `b` but `b` (a key) does not list `a`.
    pub asymmetric: Vec<(String, String)>,
    /// `(a, b)` where `b` is a counterpart of `a` but carries the same gender.
    pub gender_conflicts: Vec<(String, String)>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.counterpart_only.is_empty()
            && self.asymmetric.is_empty()
            && self.gender_conflicts.is_empty()
    }

    /// Gender conflicts break the lexicon's contract; the rest are warnings.
    pub fn has_errors(&self) -> bool {
        !self.gender_conflicts.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "counterpart_only\t{}", self.counterpart_only.len())?;
        for c in &self.counterpart_only {
            writeln!(f, "  warning: counterpart-only phrase `{c}`")?;
        }
        writeln!(f, "asymmetric\t{}", self.asymmetric.len())?;
        for (a, b) in &self.asymmetric {
            writeln!(f, "  warning: `{a}` lists `{b}` but not the reverse")?;
        }
        writeln!(f, "gender_conflicts\t{}", self.gender_conflicts.len())?;
        for (a, b) in &self.gender_conflicts {
            writeln!(f, "  error: `{a}` and its counterpart `{b}` share a gender")?;
        }
        Ok(())
    }
}

fn is_comment_or_blank(line: &str) -> bool {
    let t = line.trim();
    t.is_empty() || t.starts_with('#')
}

impl GenderedLexicon {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
    }

    pub fn bundled() -> Self {
        BUNDLED_LEXICON
            .parse()
            .expect("bundled lexicon is well-formed")
    }

    pub fn from_entries<I>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, LexEntry)>,
    {
        let mut lex = GenderedLexicon::default();
        for (i, (term, entry)) in entries.into_iter().enumerate() {
            lex.insert(i + 1, term, entry)?;
        }
        Ok(lex)
    }

    fn insert(&mut self, line: usize, term: String, entry: LexEntry) -> Result<()> {
        if term.is_empty() || term.chars().any(char::is_whitespace) {
            return Err(Error::Parse {
                line,
                message: format!("term `{term}` must be a single non-empty token"),
            });
        }
        if entry.counterparts.is_empty() {
            return Err(Error::Validation(format!(
                "line {line}: `{term}` has an empty counterpart list"
            )));
        }
        let mut seen = HashSet::new();
        for c in &entry.counterparts {
            if c.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "line {line}: `{term}` has an empty counterpart"
                )));
            }
            if *c == term {
                return Err(Error::Validation(format!(
                    "line {line}: `{term}` lists itself as a counterpart"
                )));
            }
            if !seen.insert(c.as_str()) {
                return Err(Error::Validation(format!(
                    "line {line}: `{term}` lists `{c}` twice"
                )));
            }
        }
        if self.entries.contains_key(&term) {
            return Err(Error::DuplicateEntry { line, term });
        }
        self.gendered_tokens.insert(term.clone());
        for c in &entry.counterparts {
            self.gendered_tokens
                .extend(c.split_whitespace().map(str::to_owned));
        }
        self.order.push(term.clone());
        self.entries.insert(term, entry);
        Ok(())
    }

    pub fn term_count(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, term: &str) -> Option<&LexEntry> {
        self.entries.get(term)
    }

    /// Exact-match lookup, no normalization.
    pub fn counterparts(&self, term: &str) -> Option<&[String]> {
        self.entries.get(term).map(|e| e.counterparts.as_slice())
    }

    /// True if `token` is a key or a word of any counterpart phrase.
    pub fn is_gendered_token(&self, token: &str) -> bool {
        self.gendered_tokens.contains(token)
    }

    /// Keys in load order.
    pub fn terms(&self) -> impl Iterator<Item = (&str, &LexEntry)> {
        self.order
            .iter()
            .map(move |t| (t.as_str(), &self.entries[t]))
    }

    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let mut only_seen = HashSet::new();
        for (term, entry) in self.terms() {
            for c in &entry.counterparts {
                match self.entries.get(c) {
                    None => {
                        if only_seen.insert(c.as_str()) {
                            report.counterpart_only.push(c.clone());
                        }
                    }
                    Some(other) => {
                        if other.gender == entry.gender {
                            report.gender_conflicts.push((term.to_owned(), c.clone()));
                        }
                        if !other.counterparts.iter().any(|x| x == term) {
                            report.asymmetric.push((term.to_owned(), c.clone()));
                        }
                    }
                }
            }
        }
        report
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (term, entry) in self.terms() {
            out.push_str(term);
            out.push('\t');
            out.push_str(entry.gender.as_str());
            out.push('\t');
            out.push_str(&entry.counterparts.join("|"));
            out.push('\n');
        }
        out
    }
}

impl FromStr for GenderedLexicon {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut lex = GenderedLexicon::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if is_comment_or_blank(raw) {
                continue;
            }
            let raw = raw.strip_suffix('\r').unwrap_or(raw);
            let cols: Vec<&str> = raw.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected 3 tab-separated columns, found {}", cols.len()),
                });
            }
            let gender = cols[1]
                .parse::<Gender>()
                .map_err(|message| Error::Parse { line, message })?;
            let counterparts: Vec<String> = if cols[2].trim().is_empty() {
                Vec::new()
            } else {
                cols[2].split('|').map(|c| c.trim().to_owned()).collect()
            };
            lex.insert(
                line,
                cols[0].trim().to_owned(),
                LexEntry {
                    gender,
                    counterparts,
                },
            )?;
        }
        Ok(lex)
    }
}

/// Male and female personal names. Names keep file order so that index-based
/// replacement is reproducible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NameGazetteer {
    male: Vec<String>,
    female: Vec<String>,
    lookup: HashMap<String, Gender>,
}

impl NameGazetteer {
    pub fn new(male: Vec<String>, female: Vec<String>) -> Result<Self> {
        if male.is_empty() {
            return Err(Error::Validation("gazetteer has no male names".into()));
        }
        if female.is_empty() {
            return Err(Error::Validation("gazetteer has no female names".into()));
        }
        let mut lookup = HashMap::new();
        let mut dedup = |names: Vec<String>, g: Gender| -> Result<Vec<String>> {
            let mut kept = Vec::with_capacity(names.len());
            for n in names {
                match lookup.get(&n) {
                    Some(prev) if *prev != g => return Err(Error::GazetteerOverlap(n)),
                    Some(_) => continue,
                    None => {
                        lookup.insert(n.clone(), g);
                        kept.push(n);
                    }
                }
            }
            Ok(kept)
        };
        let male = dedup(male, Gender::Male)?;
        let female = dedup(female, Gender::Female)?;
        Ok(NameGazetteer {
            male,
            female,
            lookup,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
    }

    pub fn bundled() -> Self {
        BUNDLED_GAZETTEER
            .parse()
            .expect("bundled gazetteer is well-formed")
    }

    pub fn gender_of(&self, name: &str) -> Option<Gender> {
        self.lookup.get(name).copied()
    }

    pub fn names(&self, gender: Gender) -> &[String] {
        match gender {
            Gender::Male => &self.male,
            Gender::Female => &self.female,
        }
    }

    pub fn male_names(&self) -> &[String] {
        &self.male
    }

    pub fn female_names(&self) -> &[String] {
        &self.female
    }

    /// Copy without the names rejected by `drop`. Either side may end up
    /// empty; replacement then reports a configuration error.
    pub fn without(&self, mut drop: impl FnMut(&str) -> bool) -> NameGazetteer {
        let male: Vec<String> = self.male.iter().filter(|n| !drop(n)).cloned().collect();
        let female: Vec<String> = self.female.iter().filter(|n| !drop(n)).cloned().collect();
        let lookup = male
            .iter()
            .map(|n| (n.clone(), Gender::Male))
            .chain(female.iter().map(|n| (n.clone(), Gender::Female)))
            .collect();
        NameGazetteer {
            male,
            female,
            lookup,
        }
    }
}

impl FromStr for NameGazetteer {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut male = Vec::new();
        let mut female = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if is_comment_or_blank(raw) {
                continue;
            }
            let cols: Vec<&str> = raw.trim_end_matches('\r').split('\t').collect();
            if cols.len() != 2 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected 2 tab-separated columns, found {}", cols.len()),
                });
            }
            let name = cols[0].trim();
            if name.is_empty() || name.chars().any(char::is_whitespace) {
                return Err(Error::Parse {
                    line,
                    message: format!("name `{name}` must be a single non-empty token"),
                });
            }
            match cols[1].parse::<Gender>() {
                Ok(Gender::Male) => male.push(name.to_owned()),
                Ok(Gender::Female) => female.push(name.to_owned()),
                Err(message) => return Err(Error::Parse { line, message }),
            }
        }
        NameGazetteer::new(male, female)
    }
}

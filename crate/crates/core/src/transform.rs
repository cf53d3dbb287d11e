//! Counterfactual corpus construction.
//!
//! A labeled corpus is filtered to the samples containing gendered terms,
//! every matched term is swapped for each of its counterparts, and personal
//! names are then replaced by names of the target gender. `mask_tokens`
//! produces the token-masked view used by the masking strategy.

use std::fmt;
use std::hash::Hasher;
use std::io::{BufRead, Write};

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use unicode_general_category::{get_general_category, GeneralCategory};

use crate::error::{Error, Result};
use crate::lexicon::{Gender, GenderedLexicon, LexEntry, NameGazetteer};

pub const NAME_TOKEN: &str = "<Name>";
pub const GENDER_TOKEN: &str = "<Gender>";
pub const DEFAULT_VARIANT_CAP: usize = 16;

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<String>);

impl TokenSequence {
    pub fn new(tokens: Vec<String>) -> Self {
        TokenSequence(tokens)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, String> {
        self.0.iter()
    }

    pub fn as_slice(&self) -> &[String] {
        &self.0
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(" "))
    }
}

impl<S: Into<String>> FromIterator<S> for TokenSequence {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        TokenSequence(iter.into_iter().map(Into::into).collect())
    }
}

impl std::ops::Index<usize> for TokenSequence {
    type Output = String;
    fn index(&self, i: usize) -> &String {
        &self.0[i]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub id: String,
    pub text: String,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairedSample {
    pub pair_id: String,
    pub label: usize,
    pub original: TokenSequence,
    pub variants: Vec<TokenSequence>,
    pub canonical_variant: usize,
}

impl PairedSample {
    pub fn canonical(&self) -> Option<&TokenSequence> {
        self.variants.get(self.canonical_variant)
    }
}

/// Characters the romanized Bangla data uses inside words.
const WORD_INTERNAL: [char; 3] = ['/', '{', '}'];

fn is_peelable(c: char) -> bool {
    use GeneralCategory::*;
    if WORD_INTERNAL.contains(&c) {
        return false;
    }
    matches!(
        get_general_category(c),
        ConnectorPunctuation
            | DashPunctuation
            | OpenPunctuation
            | ClosePunctuation
            | InitialPunctuation
            | FinalPunctuation
            | OtherPunctuation
    )
}

/// Splits on Unicode whitespace and peels leading and trailing punctuation
/// into one token per character. Interior characters are left alone.
pub fn tokenize(text: &str) -> TokenSequence {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let chars: Vec<char> = word.chars().collect();
        let start = chars
            .iter()
            .position(|&c| !is_peelable(c))
            .unwrap_or(chars.len());
        let end = chars
            .iter()
            .rposition(|&c| !is_peelable(c))
            .map_or(start, |p| p + 1);
        out.extend(chars[..start].iter().map(|c| c.to_string()));
        if start < end {
            out.push(chars[start..end].iter().collect());
        }
        out.extend(chars[end.max(start)..].iter().map(|c| c.to_string()));
    }
    TokenSequence(out)
}

/// One hit per token that is a lexicon key, in position order.
pub fn detect_gender_terms<'a>(
    tokens: &TokenSequence,
    lexicon: &'a GenderedLexicon,
) -> Vec<(usize, &'a LexEntry)> {
    tokens
        .iter()
        .enumerate()
        .filter_map(|(i, t)| lexicon.get(t).map(|e| (i, e)))
        .collect()
}

pub fn filter_gendered(corpus: &[LabeledSample], lexicon: &GenderedLexicon) -> Vec<LabeledSample> {
    corpus
        .iter()
        .filter(|s| tokenize(&s.text).iter().any(|t| lexicon.get(t).is_some()))
        .cloned()
        .collect()
}

/// Every combination of counterparts over the matched positions, leftmost
/// position varying slowest, truncated to `cap`. Returns nothing when no
/// token matches.
pub fn swap_gender_terms(
    tokens: &TokenSequence,
    lexicon: &GenderedLexicon,
    cap: usize,
) -> Vec<TokenSequence> {
    let hits = detect_gender_terms(tokens, lexicon);
    if hits.is_empty() || cap == 0 {
        return Vec::new();
    }
    let radices: Vec<usize> = hits.iter().map(|(_, e)| e.counterparts.len()).collect();
    let mut digits = vec![0usize; hits.len()];
    let mut variants = Vec::new();
    loop {
        let mut out = Vec::with_capacity(tokens.len() + hits.len());
        let mut next_hit = 0;
        for (i, tok) in tokens.iter().enumerate() {
            if next_hit < hits.len() && hits[next_hit].0 == i {
                let phrase = &hits[next_hit].1.counterparts[digits[next_hit]];
                out.extend(phrase.split_whitespace().map(str::to_owned));
                next_hit += 1;
            } else {
                out.push(tok.clone());
            }
        }
        variants.push(TokenSequence(out));
        if variants.len() >= cap {
            break;
        }
        // odometer increment, rightmost digit fastest
        let mut pos = digits.len();
        loop {
            if pos == 0 {
                return variants;
            }
            pos -= 1;
            digits[pos] += 1;
            if digits[pos] < radices[pos] {
                break;
            }
            digits[pos] = 0;
        }
    }
    variants
}

/// A detected personal name. `gender` is `None` when the detector cannot
/// tell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NameHit {
    pub index: usize,
    pub gender: Option<Gender>,
}

/// Finds personal names in a token sequence. Implementations must return
/// strictly increasing, in-range indices.
pub trait NameDetector {
    fn detect(&self, tokens: &TokenSequence) -> Vec<NameHit>;
}

/// Exact-match detector backed by a gazetteer.
#[derive(Debug, Clone, Copy)]
pub struct GazetteerDetector<'a> {
    pub gazetteer: &'a NameGazetteer,
}

impl<'a> GazetteerDetector<'a> {
    pub fn new(gazetteer: &'a NameGazetteer) -> Self {
        GazetteerDetector { gazetteer }
    }
}

impl NameDetector for GazetteerDetector<'_> {
    fn detect(&self, tokens: &TokenSequence) -> Vec<NameHit> {
        detect_names_gazetteer(tokens, self.gazetteer)
    }
}

pub fn detect_names_gazetteer(tokens: &TokenSequence, gazetteer: &NameGazetteer) -> Vec<NameHit> {
    tokens
        .iter()
        .enumerate()
        .filter_map(|(index, t)| {
            gazetteer.gender_of(t).map(|g| NameHit {
                index,
                gender: Some(g),
            })
        })
        .collect()
}

fn name_slot(pair_id: &str, index: usize, len: usize) -> usize {
    let mut h = FnvHasher::default();
    h.write(pair_id.as_bytes());
    h.write(index.to_string().as_bytes());
    (h.finish() % len as u64) as usize
}

/// Replaces each hit with a name of `target` picked by
/// `fnv1a64(pair_id ++ index) mod |names|`.
pub fn replace_names(
    tokens: &TokenSequence,
    hits: &[NameHit],
    gazetteer: &NameGazetteer,
    target: Gender,
    pair_id: &str,
) -> Result<TokenSequence> {
    if hits.is_empty() {
        return Ok(tokens.clone());
    }
    let pool = gazetteer.names(target);
    if pool.is_empty() {
        return Err(Error::Config(format!(
            "no {target} names available for replacement"
        )));
    }
    let mut out = tokens.clone();
    for hit in hits {
        if hit.index >= out.len() {
            return Err(Error::InvalidInput(format!(
                "name hit {} out of range for {} tokens",
                hit.index,
                out.len()
            )));
        }
        out.0[hit.index] = pool[name_slot(pair_id, hit.index, pool.len())].clone();
    }
    Ok(out)
}

/// Gender the names of a variant are moved to: the opposite of the majority
/// gender among the original's term hits, ties going to the first hit.
pub fn target_gender(hits: &[(usize, &LexEntry)]) -> Option<Gender> {
    let first = hits.first()?.1.gender;
    let male = hits
        .iter()
        .filter(|(_, e)| e.gender == Gender::Male)
        .count();
    let female = hits.len() - male;
    let majority = match male.cmp(&female) {
        std::cmp::Ordering::Greater => Gender::Male,
        std::cmp::Ordering::Less => Gender::Female,
        std::cmp::Ordering::Equal => first,
    };
    Some(majority.opposite())
}

/// Name hits that do not sit on a gendered token. Gendered tokens are owned
/// by the term swap, so a name that doubles as a term is never replaced.
fn name_hits_outside_terms(
    tokens: &TokenSequence,
    lexicon: &GenderedLexicon,
    detector: &dyn NameDetector,
) -> Vec<NameHit> {
    detector
        .detect(tokens)
        .into_iter()
        .filter(|h| !lexicon.is_gendered_token(&tokens[h.index]))
        .collect()
}

pub fn build_paired_dataset(
    corpus: &[LabeledSample],
    lexicon: &GenderedLexicon,
    gazetteer: &NameGazetteer,
    detector: &dyn NameDetector,
    cap: usize,
) -> Result<Vec<PairedSample>> {
    if cap == 0 {
        return Err(Error::Config("variant cap must be at least 1".into()));
    }
    // Replacement names must not themselves read as gendered terms.
    let replacements = gazetteer.without(|n| lexicon.is_gendered_token(n));
    let mut pairs = Vec::new();
    for sample in corpus {
        let original = tokenize(&sample.text);
        let hits = detect_gender_terms(&original, lexicon);
        let Some(target) = target_gender(&hits) else {
            continue;
        };
        let mut variants = Vec::new();
        for swapped in swap_gender_terms(&original, lexicon, cap) {
            let names = name_hits_outside_terms(&swapped, lexicon, detector);
            variants.push(replace_names(
                &swapped,
                &names,
                &replacements,
                target,
                &sample.id,
            )?);
        }
        pairs.push(PairedSample {
            pair_id: sample.id.clone(),
            label: sample.label,
            original,
            variants,
            canonical_variant: 0,
        });
    }
    Ok(pairs)
}

/// Gendered tokens become `<Gender>` (consecutive ones collapse into one, so
/// multi-word counterparts mask like the single word they replaced) and
/// names become `<Name>`.
pub fn mask_tokens(
    tokens: &TokenSequence,
    lexicon: &GenderedLexicon,
    detector: &dyn NameDetector,
) -> TokenSequence {
    let names = name_hits_outside_terms(tokens, lexicon, detector);
    let mut next_name = names.iter().map(|h| h.index).peekable();
    let mut out: Vec<String> = Vec::with_capacity(tokens.len());
    for (i, tok) in tokens.iter().enumerate() {
        if lexicon.is_gendered_token(tok) {
            if out.last().map(String::as_str) != Some(GENDER_TOKEN) {
                out.push(GENDER_TOKEN.to_owned());
            }
            continue;
        }
        if next_name.peek() == Some(&i) {
            next_name.next();
            out.push(NAME_TOKEN.to_owned());
        } else {
            out.push(tok.clone());
        }
    }
    TokenSequence(out)
}

/// Bundles what `mask_tokens` needs so callers can pass one value around.
#[derive(Clone, Copy)]
pub struct TokenMasker<'a> {
    pub lexicon: &'a GenderedLexicon,
    pub detector: &'a dyn NameDetector,
}

impl<'a> TokenMasker<'a> {
    pub fn new(lexicon: &'a GenderedLexicon, detector: &'a dyn NameDetector) -> Self {
        TokenMasker { lexicon, detector }
    }

    pub fn mask(&self, tokens: &TokenSequence) -> TokenSequence {
        mask_tokens(tokens, self.lexicon, self.detector)
    }
}

// ---------------------------------------------------------------------------
// JSONL corpora

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantKind {
    Original,
    Swapped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedRecord {
    pub pair_id: String,
    pub label: usize,
    pub variant: VariantKind,
    pub variant_index: usize,
    pub text: String,
}

pub fn read_corpus<R: BufRead>(reader: R) -> Result<Vec<LabeledSample>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<corpus>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: LabeledSample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(sample);
    }
    Ok(out)
}

pub fn write_corpus<W: Write>(mut writer: W, corpus: &[LabeledSample]) -> Result<()> {
    for s in corpus {
        serde_json::to_writer(&mut writer, s)?;
        writer
            .write_all(b"\n")
            .map_err(|e| Error::io("<corpus>", e))?;
    }
    Ok(())
}

pub fn paired_records(pair: &PairedSample) -> impl Iterator<Item = PairedRecord> + '_ {
    let original = PairedRecord {
        pair_id: pair.pair_id.clone(),
        label: pair.label,
        variant: VariantKind::Original,
        variant_index: 0,
        text: pair.original.to_string(),
    };
    std::iter::once(original).chain(pair.variants.iter().enumerate().map(move |(i, v)| {
        PairedRecord {
            pair_id: pair.pair_id.clone(),
            label: pair.label,
            variant: VariantKind::Swapped,
            variant_index: i + 1,
            text: v.to_string(),
        }
    }))
}

pub fn write_paired<W: Write>(mut writer: W, pairs: &[PairedSample]) -> Result<()> {
    for pair in pairs {
        for rec in paired_records(pair) {
            serde_json::to_writer(&mut writer, &rec)?;
            writer
                .write_all(b"\n")
                .map_err(|e| Error::io("<pairs>", e))?;
        }
    }
    Ok(())
}

/// Reads a paired corpus. Records of one pair must be contiguous, starting
/// with the original.
pub fn read_paired<R: BufRead>(reader: R) -> Result<Vec<PairedSample>> {
    let mut out: Vec<PairedSample> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io("<pairs>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairedRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let tokens = tokenize(&rec.text);
        match rec.variant {
            VariantKind::Original => {
                if rec.variant_index != 0 {
                    return Err(Error::Parse {
                        line: lineno,
                        message: "original record must have variant_index 0".into(),
                    });
                }
                out.push(PairedSample {
                    pair_id: rec.pair_id,
                    label: rec.label,
                    original: tokens,
                    variants: Vec::new(),
                    canonical_variant: 0,
                });
            }
            VariantKind::Swapped => {
                let pair = match out.last_mut() {
                    Some(p) if p.pair_id == rec.pair_id => p,
                    _ => {
                        return Err(Error::Parse {
                            line: lineno,
                            message: format!(
                                "swapped record for `{}` does not follow its original",
                                rec.pair_id
                            ),
                        })
                    }
                };
                if rec.label != pair.label {
                    return Err(Error::Parse {
                        line: lineno,
                        message: "variant label differs from original".into(),
                    });
                }
                if rec.variant_index != pair.variants.len() + 1 {
                    return Err(Error::Parse {
                        line: lineno,
                        message: format!(
                            "expected variant_index {}, found {}",
                            pair.variants.len() + 1,
                            rec.variant_index
                        ),
                    });
                }
                pair.variants.push(tokens);
            }
        }
    }
    Ok(out)
}

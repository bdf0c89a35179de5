//! Shared-task TSV files, vocabularies and source encoding.
//!
//! Training files carry three tab-separated columns (`lemma`, `form`,
//! `tags`), test files carry two (`lemma`, `tags`) or three when the gold
//! form is included. Tags are `;`-joined and kept in file order.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Prefix separating the tag namespace from the character namespace.
pub const TAG_PREFIX: &str = "TAG:";

/// Synthetic tag marking reinflection back to the lemma.
pub const LEMMA_TAG: &str = "LEMMA";

/// A (lemma, form, tags) triple. Test items may have an empty form.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct InflectionExample {
    pub lemma: String,
    pub form: String,
    pub tags: Vec<String>,
}

impl InflectionExample {
    pub fn new(lemma: impl Into<String>, form: impl Into<String>, tags: &[&str]) -> Self {
        InflectionExample {
            lemma: lemma.into(),
            form: form.into(),
            tags: tags.iter().map(|t| t.to_string()).collect(),
        }
    }

    /// Tags re-joined with `;` as they appear in the data files.
    pub fn tag_string(&self) -> String {
        self.tags.join(";")
    }
}

fn parse_tags(field: &str, line: usize) -> Result<Vec<String>> {
    if field.is_empty() {
        return Err(Error::parse(line, "empty tag field"));
    }
    let tags: Vec<String> = field.split(';').map(|t| t.trim().to_string()).collect();
    if tags.iter().any(String::is_empty) {
        return Err(Error::parse(line, format!("empty tag in {field:?}")));
    }
    Ok(tags)
}

fn parse_lines(text: &str, allow_two: bool) -> Result<Vec<InflectionExample>> {
    let mut out = Vec::new();
    for (i, raw) in text.split('\n').enumerate() {
        let line = i + 1;
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').map(str::trim).collect();
        let (lemma, form, tags) = match fields.as_slice() {
            [lemma, form, tags] => (*lemma, *form, *tags),
            [lemma, tags] if allow_two => (*lemma, "", *tags),
            _ => {
                let expected = if allow_two { "2 or 3" } else { "3" };
                return Err(Error::parse(
                    line,
                    format!("expected {expected} tab-separated fields, found {}", fields.len()),
                ));
            }
        };
        if lemma.is_empty() {
            return Err(Error::parse(line, "empty lemma"));
        }
        if form.is_empty() && fields.len() == 3 {
            return Err(Error::parse(line, "empty form"));
        }
        out.push(InflectionExample {
            lemma: lemma.to_string(),
            form: form.to_string(),
            tags: parse_tags(tags, line)?,
        });
    }
    Ok(out)
}

/// Parses a three-column training document.
pub fn parse_train_tsv(text: &str) -> Result<Vec<InflectionExample>> {
    parse_lines(text, false)
}

/// Parses a test document. Two-column lines produce examples with an empty
/// form; three-column lines are read as in [`parse_train_tsv`].
pub fn parse_test_tsv(text: &str) -> Result<Vec<InflectionExample>> {
    parse_lines(text, true)
}

/// Writes `lemma\tpredicted\ttags` lines, one per item.
pub fn write_predictions<'a, W, I>(items: I, mut sink: W) -> std::io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a InflectionExample, &'a str)>,
{
    for (example, predicted) in items {
        writeln!(sink, "{}\t{}\t{}", example.lemma, predicted, example.tag_string())?;
    }
    sink.flush()
}

/// Renders prediction lines into a string.
pub fn format_predictions<'a, I>(items: I) -> String
where
    I: IntoIterator<Item = (&'a InflectionExample, &'a str)>,
{
    let mut buf = Vec::new();
    write_predictions(items, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("input strings are UTF-8")
}

/// Bidirectional token/index map over specials, characters and tags.
///
/// Layout is fixed: the four specials at 0..4, then characters sorted by
/// codepoint, then prefixed tags sorted lexicographically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    n_chars: usize,
    n_tags: usize,
}

impl Vocabulary {
    pub fn build(examples: &[InflectionExample]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Empty("training examples"));
        }
        let mut chars = BTreeSet::new();
        let mut tags = BTreeSet::new();
        for ex in examples {
            chars.extend(ex.lemma.chars());
            chars.extend(ex.form.chars());
            tags.extend(ex.tags.iter().map(|t| format!("{TAG_PREFIX}{t}")));
        }
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(chars.into_iter().map(String::from))
            .chain(tags)
            .collect();
        Self::from_tokens(tokens)
    }

    /// Rebuilds a vocabulary from its token listing, e.g. when loading a
    /// checkpoint.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..4].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::Config("vocabulary must start with the four specials".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        let mut n_chars = 0;
        let mut n_tags = 0;
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {tok:?}")));
            }
            if i < SPECIALS.len() {
                continue;
            }
            if tok.starts_with(TAG_PREFIX) {
                n_tags += 1;
            } else if tok.chars().count() == 1 {
                if n_tags > 0 {
                    return Err(Error::Config("character tokens must precede tags".into()));
                }
                n_chars += 1;
            } else {
                return Err(Error::Config(format!("unrecognised vocabulary token {tok:?}")));
            }
        }
        Ok(Vocabulary {
            tokens,
            index,
            n_chars,
            n_tags,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn index(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn char_id(&self, c: char) -> Option<usize> {
        let mut buf = [0u8; 4];
        self.index(c.encode_utf8(&mut buf))
    }

    pub fn tag_id(&self, tag: &str) -> Option<usize> {
        self.index(&format!("{TAG_PREFIX}{tag}"))
    }

    pub fn n_chars(&self) -> usize {
        self.n_chars
    }

    pub fn n_tags(&self) -> usize {
        self.n_tags
    }

    pub fn is_char(&self, id: usize) -> bool {
        (SPECIALS.len()..SPECIALS.len() + self.n_chars).contains(&id)
    }

    pub fn is_tag(&self, id: usize) -> bool {
        id >= SPECIALS.len() + self.n_chars && id < self.tokens.len()
    }

    /// Tokens the decoder may emit: EOS, UNK and every character.
    pub fn is_output(&self, id: usize) -> bool {
        id == EOS || id == UNK || self.is_char(id)
    }

    pub fn output_mask(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.is_output(i)).collect()
    }

    /// SHA-256 over the newline-joined token listing, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for tok in &self.tokens {
            h.update(tok.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

/// Builds the vocabulary of a training set.
pub fn build_vocabulary(examples: &[InflectionExample]) -> Result<Vocabulary> {
    Vocabulary::build(examples)
}

/// Token ids with their surface strings; unknown characters map to UNK but
/// keep their surface so the copy path can still emit them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSequence {
    pub ids: Vec<usize>,
    pub surface: Vec<String>,
    /// Number of lemma characters; they occupy positions `1..=lemma_len`.
    pub lemma_len: usize,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Whether position `i` holds a lemma character.
    pub fn is_lemma_position(&self, i: usize) -> bool {
        i >= 1 && i <= self.lemma_len
    }
}

/// `[BOS] + lemma characters + tags + [EOS]`.
pub fn encode_source(example: &InflectionExample, vocab: &Vocabulary) -> EncodedSequence {
    let mut ids = vec![BOS];
    let mut surface = vec![SPECIALS[BOS].to_string()];
    let mut lemma_len = 0;
    for c in example.lemma.chars() {
        ids.push(vocab.char_id(c).unwrap_or(UNK));
        surface.push(c.to_string());
        lemma_len += 1;
    }
    for tag in &example.tags {
        ids.push(vocab.tag_id(tag).unwrap_or(UNK));
        surface.push(format!("{TAG_PREFIX}{tag}"));
    }
    ids.push(EOS);
    surface.push(SPECIALS[EOS].to_string());
    EncodedSequence {
        ids,
        surface,
        lemma_len,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sample_rows() {
        let ex = parse_train_tsv("hug\thugged\tV;PST\nseel\tseels\tV;3;SG;PRS\n").unwrap();
        assert_eq!(ex[0], InflectionExample::new("hug", "hugged", &["V", "PST"]));
        assert_eq!(ex[1], InflectionExample::new("seel", "seels", &["V", "3", "SG", "PRS"]));
        assert!(parse_train_tsv("").unwrap().is_empty());
    }

    #[test]
    fn trims_fields_and_keeps_unicode() {
        let ex = parse_train_tsv("  søn \t sønner\tN;PL \n").unwrap();
        assert_eq!(ex[0], InflectionExample::new("søn", "sønner", &["N", "PL"]));
    }

    #[test]
    fn train_parse_errors_carry_line_numbers() {
        match parse_train_tsv("hug\thugged\tV;PST\nhug\tV;PST\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        match parse_train_tsv("hug\thugged\t\n") {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 1);
                assert!(message.contains("tag"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_train_tsv("a\tb\tV;;PST").is_err());
    }

    #[test]
    fn test_files_accept_two_or_three_columns() {
        let ex = parse_test_tsv("hug\tV;PST\nhug\thugged\tV;PST\n").unwrap();
        assert_eq!(ex[0], InflectionExample::new("hug", "", &["V", "PST"]));
        assert_eq!(ex[1].form, "hugged");
        assert!(matches!(parse_test_tsv("hug"), Err(Error::Parse { line: 1, .. })));
        assert!(parse_test_tsv("a\tb\tc\td").is_err());
    }

    #[test]
    fn vocabulary_layout() {
        let v = build_vocabulary(&[InflectionExample::new("hug", "hugged", &["V", "PST"])]).unwrap();
        let expected: Vec<&str> = vec![
            "<pad>", "<s>", "</s>", "<unk>", "d", "e", "g", "h", "u", "TAG:PST", "TAG:V",
        ];
        assert_eq!(v.tokens(), expected.as_slice());
        assert_eq!(v.len(), 11);
        assert_eq!((v.n_chars(), v.n_tags()), (5, 2));
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.index(t), Some(i));
        }
        assert!(v.is_output(EOS) && v.is_output(UNK) && v.is_output(4));
        assert!(!v.is_output(PAD) && !v.is_output(BOS) && !v.is_output(9));
    }

    #[test]
    fn vocabulary_is_idempotent_and_sees_lemma_tag() {
        let one = InflectionExample::new("hug", "hugged", &["V", "PST"]);
        let a = build_vocabulary(&[one.clone()]).unwrap();
        let b = build_vocabulary(&[one.clone(), one]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());

        let v = build_vocabulary(&[InflectionExample::new("grips", "grip", &["V", "LEMMA"])]).unwrap();
        assert!(v.tag_id(LEMMA_TAG).is_some());
        assert!(build_vocabulary(&[]).is_err());
    }

    #[test]
    fn from_tokens_rejects_bad_listings() {
        assert!(Vocabulary::from_tokens(vec!["a".into()]).is_err());
        let mut toks: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        toks.push("a".into());
        toks.push("a".into());
        assert!(Vocabulary::from_tokens(toks).is_err());
    }

    #[test]
    fn encodes_lemma_then_tags() {
        let ex = InflectionExample::new("hug", "hugged", &["V", "PST"]);
        let v = build_vocabulary(&[ex.clone()]).unwrap();
        let enc = encode_source(&ex, &v);
        assert_eq!(enc.surface, ["<s>", "h", "u", "g", "TAG:V", "TAG:PST", "</s>"]);
        assert_eq!(enc.ids[0], BOS);
        assert_eq!(*enc.ids.last().unwrap(), EOS);
        assert_eq!(enc.lemma_len, 3);

        let seel = InflectionExample::new("seel", "seels", &["V", "3", "SG", "PRS"]);
        assert_eq!(encode_source(&seel, &v).len(), 10);
    }

    #[test]
    fn unknown_characters_keep_surface() {
        let v = build_vocabulary(&[InflectionExample::new("hug", "hugged", &["V", "PST"])]).unwrap();
        let enc = encode_source(&InflectionExample::new("høg", "", &["V", "PST"]), &v);
        assert_eq!(enc.ids[2], UNK);
        assert_eq!(enc.surface[2], "ø");
    }

    #[test]
    fn writes_prediction_lines() {
        let ex = InflectionExample::new("hug", "", &["V", "PST"]);
        assert_eq!(format_predictions([(&ex, "hugged")]), "hug\thugged\tV;PST\n");
        assert_eq!(format_predictions(std::iter::empty()), "");
    }
}

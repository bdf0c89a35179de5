//! Training-set expansion: reinflection multitask data and hallucinated
//! pseudo-examples for pretraining.

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{InflectionExample, LEMMA_TAG};
use crate::error::{Error, Result};

/// Minimum shared stem length for an example to be usable as a
/// hallucination source.
pub const MIN_STEM_LEN: usize = 3;

/// Default number of hallucinated pretraining instances.
pub const DEFAULT_HALLUCINATION_SIZE: usize = 10_000;

/// Training sets smaller than this are pretrained on hallucinated data.
pub const LOW_RESOURCE_THRESHOLD: usize = 1000;

/// All (form, tags) slots observed for one lemma.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParadigmGroup {
    pub lemma: String,
    pub slots: Vec<(String, Vec<String>)>,
}

/// Groups examples by exact lemma string. Groups appear in order of first
/// occurrence; slots keep input order.
pub fn group_by_lemma(examples: &[InflectionExample]) -> Vec<ParadigmGroup> {
    let mut groups: Vec<ParadigmGroup> = Vec::new();
    let mut by_lemma: HashMap<&str, usize> = HashMap::new();
    for ex in examples {
        let idx = *by_lemma.entry(ex.lemma.as_str()).or_insert_with(|| {
            groups.push(ParadigmGroup {
                lemma: ex.lemma.clone(),
                slots: Vec::new(),
            });
            groups.len() - 1
        });
        groups[idx].slots.push((ex.form.clone(), ex.tags.clone()));
    }
    groups
}

/// Expands paradigm groups into reinflection rows.
///
/// The returned examples use the `lemma` field for the source form. Each
/// group contributes its original rows, one row per ordered pair of distinct
/// slots, and one row per slot back to the lemma tagged `[POS, LEMMA]`.
/// Identical rows are kept once, first occurrence wins.
pub fn to_reinflection(groups: &[ParadigmGroup]) -> Vec<InflectionExample> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let mut push = |ex: InflectionExample| {
        if seen.insert(ex.clone()) {
            out.push(ex);
        }
    };
    for group in groups {
        for (form, tags) in &group.slots {
            push(InflectionExample {
                lemma: group.lemma.clone(),
                form: form.clone(),
                tags: tags.clone(),
            });
        }
        for (i, (src, _)) in group.slots.iter().enumerate() {
            for (j, (tgt, tags)) in group.slots.iter().enumerate() {
                if i != j {
                    push(InflectionExample {
                        lemma: src.clone(),
                        form: tgt.clone(),
                        tags: tags.clone(),
                    });
                }
            }
        }
        for (form, tags) in &group.slots {
            let pos = tags.first().cloned().unwrap_or_default();
            push(InflectionExample {
                lemma: form.clone(),
                form: group.lemma.clone(),
                tags: vec![pos, LEMMA_TAG.to_string()],
            });
        }
    }
    out
}

/// Multitask conversion of a raw training set.
pub fn multitask(examples: &[InflectionExample]) -> Vec<InflectionExample> {
    to_reinflection(&group_by_lemma(examples))
}

/// Decomposition of a lemma/form pair around a shared stem:
/// `lemma = prefix_lemma + stem + suffix_lemma` and
/// `form = prefix_form + stem + suffix_form`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AffixAlignment {
    pub prefix_lemma: String,
    pub prefix_form: String,
    pub stem: String,
    pub suffix_lemma: String,
    pub suffix_form: String,
}

impl AffixAlignment {
    pub fn lemma(&self) -> String {
        format!("{}{}{}", self.prefix_lemma, self.stem, self.suffix_lemma)
    }

    pub fn form(&self) -> String {
        format!("{}{}{}", self.prefix_form, self.stem, self.suffix_form)
    }

    /// Same affixes around a different stem.
    pub fn with_stem(&self, stem: &str) -> (String, String) {
        (
            format!("{}{}{}", self.prefix_lemma, stem, self.suffix_lemma),
            format!("{}{}{}", self.prefix_form, stem, self.suffix_form),
        )
    }

    pub fn same_affixes(&self, other: &AffixAlignment) -> bool {
        self.prefix_lemma == other.prefix_lemma
            && self.prefix_form == other.prefix_form
            && self.suffix_lemma == other.suffix_lemma
            && self.suffix_form == other.suffix_form
    }
}

/// Longest common substring over codepoints as `(start_a, start_b, len)`.
/// Ties resolve to the earliest start in `a`, then in `b`.
fn longest_common_substring(a: &[char], b: &[char]) -> (usize, usize, usize) {
    let mut best = (0, 0, 0);
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            cur[j] = if a[i - 1] == b[j - 1] { prev[j - 1] + 1 } else { 0 };
            let len = cur[j];
            let (sa, sb) = (i - len, j - len);
            if len > best.2 || (len == best.2 && len > 0 && (sa, sb) < (best.0, best.1)) {
                best = (sa, sb, len);
            }
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    best
}

/// Aligns lemma and form around their longest common substring. Returns
/// `None` when that stem is shorter than [`MIN_STEM_LEN`].
pub fn align_affixes(lemma: &str, form: &str) -> Option<AffixAlignment> {
    let a: Vec<char> = lemma.chars().collect();
    let b: Vec<char> = form.chars().collect();
    let (sa, sb, len) = longest_common_substring(&a, &b);
    if len < MIN_STEM_LEN {
        return None;
    }
    let s = |v: &[char]| v.iter().collect::<String>();
    Some(AffixAlignment {
        prefix_lemma: s(&a[..sa]),
        prefix_form: s(&b[..sb]),
        stem: s(&a[sa..sa + len]),
        suffix_lemma: s(&a[sa + len..]),
        suffix_form: s(&b[sb + len..]),
    })
}

/// Sorted distinct characters of all lemmas and forms.
pub fn observed_alphabet(examples: &[InflectionExample]) -> Vec<char> {
    examples
        .iter()
        .flat_map(|e| e.lemma.chars().chain(e.form.chars()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

// Resampling bound for draws whose output would not re-align to the source
// affixes (a random stem can create a longer common substring by chance).
const MAX_DRAWS: usize = 100;

/// Generates `n` pseudo-examples by replacing the aligned stem of a randomly
/// chosen source example with a random string of the same length.
pub fn hallucinate(
    examples: &[InflectionExample],
    n: usize,
    alphabet: &[char],
    seed: u64,
) -> Result<Vec<InflectionExample>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let alphabet: Vec<char> = alphabet.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if alphabet.is_empty() {
        return Err(Error::Empty("hallucination alphabet"));
    }
    let sources: Vec<(&InflectionExample, AffixAlignment)> = examples
        .iter()
        .filter_map(|ex| align_affixes(&ex.lemma, &ex.form).map(|al| (ex, al)))
        .collect();
    if sources.is_empty() {
        return Err(Error::NoHallucinationSource {
            min_stem: MIN_STEM_LEN,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut rejected = 0usize;
    while out.len() < n {
        let mut draw = None;
        for _ in 0..MAX_DRAWS {
            let (ex, al) = &sources[rng.random_range(0..sources.len())];
            let stem: String = (0..al.stem.chars().count())
                .map(|_| alphabet[rng.random_range(0..alphabet.len())])
                .collect();
            let (lemma, form) = al.with_stem(&stem);
            let stable = align_affixes(&lemma, &form).is_some_and(|re| re.same_affixes(al));
            draw = Some(InflectionExample {
                lemma,
                form,
                tags: ex.tags.clone(),
            });
            if stable {
                break;
            }
            rejected += 1;
        }
        out.extend(draw);
    }
    if rejected > 0 {
        log::debug!("hallucination resampled {rejected} unstable draws");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(l: &str, f: &str, t: &str) -> InflectionExample {
        InflectionExample {
            lemma: l.into(),
            form: f.into(),
            tags: t.split(';').map(String::from).collect(),
        }
    }

    fn grip() -> Vec<InflectionExample> {
        vec![ex("grip", "grips", "V;SG;3;PRS"), ex("grip", "gripped", "V;PST")]
    }

    #[test]
    fn groups_by_lemma() {
        let groups = group_by_lemma(&grip());
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].slots.len(), 2);
        assert_eq!(group_by_lemma(&[ex("a", "b", "X"), ex("c", "d", "X")]).len(), 2);
        assert!(group_by_lemma(&[]).is_empty());
    }

    #[test]
    fn reinflection_of_figure_two_group() {
        let rows = multitask(&grip());
        for want in [
            ex("grips", "grip", "V;LEMMA"),
            ex("grips", "gripped", "V;PST"),
            ex("gripped", "grip", "V;LEMMA"),
            ex("gripped", "grips", "V;SG;3;PRS"),
            ex("grip", "grips", "V;SG;3;PRS"),
            ex("grip", "gripped", "V;PST"),
        ] {
            assert!(rows.contains(&want), "missing {want:?}");
        }
        assert_eq!(rows.len(), 2 + 2 + 2);
    }

    #[test]
    fn single_slot_group() {
        let rows = multitask(&[ex("hug", "hugged", "V;PST")]);
        assert_eq!(rows, vec![ex("hug", "hugged", "V;PST"), ex("hugged", "hug", "V;LEMMA")]);
    }

    #[test]
    fn syncretic_rows_are_deduplicated() {
        let rows = multitask(&[ex("a", "x", "N;SG"), ex("a", "x", "N;SG")]);
        assert_eq!(rows, vec![ex("a", "x", "N;SG"), ex("x", "x", "N;SG"), ex("x", "a", "N;LEMMA")]);
    }

    #[test]
    fn aligns_suffixes() {
        let al = align_affixes("hug", "hugged").unwrap();
        assert_eq!(al.stem, "hug");
        assert_eq!((al.suffix_lemma.as_str(), al.suffix_form.as_str()), ("", "ged"));
        let al = align_affixes("seel", "seels").unwrap();
        assert_eq!((al.stem.as_str(), al.suffix_form.as_str()), ("seel", "s"));
        assert!(align_affixes("go", "went").is_none());
    }

    #[test]
    fn aligns_prefixes() {
        let al = align_affixes("spielen", "gespielt").unwrap();
        assert_eq!(al.stem, "spiel");
        assert_eq!(al.prefix_form, "ge");
        assert_eq!(al.suffix_lemma, "en");
        assert_eq!(al.suffix_form, "t");
        assert_eq!((al.lemma(), al.form()), ("spielen".into(), "gespielt".into()));
    }

    #[test]
    fn stem_substitution() {
        let al = align_affixes("hug", "hugged").unwrap();
        assert_eq!(al.with_stem("zek"), ("zek".into(), "zekged".into()));
    }

    #[test]
    fn hallucination_edge_cases() {
        let data = vec![ex("hug", "hugged", "V;PST")];
        assert!(hallucinate(&data, 0, &['a'], 1).unwrap().is_empty());
        assert!(matches!(
            hallucinate(&[ex("go", "went", "V;PST")], 3, &['a'], 1),
            Err(Error::NoHallucinationSource { .. })
        ));
        assert!(hallucinate(&data, 3, &[], 1).is_err());
        let a = hallucinate(&data, 50, &['z', 'e', 'k'], 9).unwrap();
        assert_eq!(a, hallucinate(&data, 50, &['z', 'e', 'k'], 9).unwrap());
        assert_eq!(a.len(), 50);
        for h in &a {
            assert!(h.form.ends_with("ged"));
            assert_eq!(h.tags, vec!["V", "PST"]);
        }
    }
}

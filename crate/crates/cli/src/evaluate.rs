use std::collections::{HashMap, VecDeque};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};

use pgt::data::parse_train_tsv;
use pgt::eval::{exact_match_accuracy, macro_report_with, LanguageResult};
use pgt::InflectionExample;

use crate::args::EvaluateArgs;
use crate::failure::usage;
use crate::files::{language_of, load_test, load_train, manifest_path, require_writable_target, write_atomic, Manifest};

type Key = (String, String);

fn key(e: &InflectionExample) -> Key {
    (e.lemma.clone(), e.tag_string())
}

/// Exact-match accuracy after aligning predictions to gold rows by
/// `(lemma, tags)`. Repeated keys pair up in file order.
pub fn aligned_accuracy(gold: &[InflectionExample], pred: &[InflectionExample]) -> anyhow::Result<f64> {
    let mut by_key: HashMap<Key, VecDeque<&str>> = HashMap::new();
    for p in pred {
        by_key.entry(key(p)).or_default().push_back(&p.form);
    }
    let mut unmatched: Vec<Key> = Vec::new();
    let mut pairs: Vec<(&str, &str)> = Vec::new();
    for g in gold {
        match by_key.get_mut(&key(g)).and_then(VecDeque::pop_front) {
            Some(form) => pairs.push((&g.form, form)),
            None => unmatched.push(key(g)),
        }
    }
    let mut extra: Vec<Key> = pred.iter().map(key).filter(|k| by_key.get(k).is_some_and(|q| !q.is_empty())).collect();
    extra.dedup();
    unmatched.extend(extra);
    if !unmatched.is_empty() {
        let shown: Vec<String> = unmatched.iter().take(5).map(|(l, t)| format!("({l}, {t})")).collect();
        bail!(
            "{} keys do not align between gold and predictions; first: {}",
            unmatched.len(),
            shown.join(" ")
        );
    }
    let (g, p): (Vec<&str>, Vec<&str>) = pairs.into_iter().unzip();
    Ok(exact_match_accuracy(&g, &p)?)
}

fn train_size(gold: &Path, lang: &str, given: Option<usize>) -> anyhow::Result<usize> {
    if let Some(n) = given {
        return Ok(n);
    }
    let trn = gold.with_file_name(format!("{lang}.trn"));
    if !trn.is_file() {
        bail!(
            "training size for {lang} unknown: {} not found (pass --train-size)",
            trn.display()
        );
    }
    Ok(load_train(&trn)?.examples.len())
}

fn prediction_file(dir: &Path, lang: &str) -> anyhow::Result<PathBuf> {
    ["pred", "tst"]
        .iter()
        .map(|ext| dir.join(format!("{lang}.{ext}")))
        .find(|p| p.is_file())
        .with_context(|| format!("no {lang}.pred or {lang}.tst in {}", dir.display()))
}

fn score(gold: &Path, pred: &Path, lang: &str, size: Option<usize>, m: &mut Manifest) -> anyhow::Result<LanguageResult> {
    let g = load_test(gold)?;
    if let Some(i) = g.examples.iter().position(|e| e.form.is_empty()) {
        bail!("{}: line {} has no gold form", gold.display(), i + 1);
    }
    let text = std::fs::read_to_string(pred).with_context(|| format!("reading {}", pred.display()))?;
    let p = parse_train_tsv(&text).with_context(|| format!("parsing {}", pred.display()))?;
    let accuracy = aligned_accuracy(&g.examples, &p).with_context(|| format!("language {lang}"))?;
    m.input(&format!("{lang}.gold"), gold, &g.sha256);
    m.input(&format!("{lang}.pred"), pred, &crate::files::sha256_file(pred)?);
    Ok(LanguageResult {
        language: lang.to_string(),
        train_size: train_size(gold, lang, size)?,
        accuracy,
    })
}

pub fn evaluate(a: &EvaluateArgs) -> anyhow::Result<()> {
    require_writable_target(&a.out)?;
    let mut m = Manifest::new("evaluate");
    let results = if a.gold.is_dir() {
        if !a.pred.is_dir() {
            return Err(usage("--gold is a directory, so --pred must be one too"));
        }
        if a.lang.is_some() || a.train_size.is_some() {
            return Err(usage("--lang and --train-size apply to single-file evaluation"));
        }
        let mut golds: Vec<PathBuf> = std::fs::read_dir(&a.gold)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        golds.retain(|p| p.extension().is_some_and(|e| e == "tst"));
        golds.sort();
        if golds.is_empty() {
            bail!("no .tst files in {}", a.gold.display());
        }
        let mut out = Vec::new();
        for g in &golds {
            let lang = language_of(g)?;
            let pred = prediction_file(&a.pred, &lang)?;
            out.push(score(g, &pred, &lang, None, &mut m)?);
        }
        out
    } else {
        for p in [&a.gold, &a.pred] {
            crate::files::require_file(p)?;
        }
        let lang = match &a.lang {
            Some(l) => l.clone(),
            None => language_of(&a.gold)?,
        };
        vec![score(&a.gold, &a.pred, &lang, a.train_size, &mut m)?]
    };
    let report = macro_report_with(&results, a.threshold)?;
    write_atomic(&a.out, report.to_tsv().as_bytes())?;
    m.push("threshold", a.threshold);
    write_atomic(&manifest_path(&a.out), m.render().as_bytes())?;
    for line in report.summary().lines() {
        log::info!("{line}");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(l: &str, f: &str, t: &str) -> InflectionExample {
        InflectionExample::new(l, f, &[t])
    }

    #[test]
    fn alignment_ignores_row_order() {
        let gold = [ex("a", "x", "T"), ex("b", "y", "T")];
        let pred = [ex("b", "y", "T"), ex("a", "z", "T")];
        assert_eq!(aligned_accuracy(&gold, &pred).unwrap(), 0.5);
    }

    #[test]
    fn missing_key_is_reported() {
        let gold = [ex("a", "x", "T"), ex("b", "y", "T")];
        let pred = [ex("a", "x", "T")];
        let msg = aligned_accuracy(&gold, &pred).unwrap_err().to_string();
        assert!(msg.contains("(b, T)"), "{msg}");
    }

    #[test]
    fn extra_prediction_is_reported() {
        let gold = [ex("a", "x", "T")];
        let pred = [ex("a", "x", "T"), ex("c", "x", "U")];
        let msg = aligned_accuracy(&gold, &pred).unwrap_err().to_string();
        assert!(msg.contains("(c, U)"), "{msg}");
    }
}

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use sha2::{Digest, Sha256};

use pgt::data::{parse_test_tsv, parse_train_tsv};
use pgt::InflectionExample;

use crate::failure::usage;

pub fn require_file(path: &Path) -> anyhow::Result<()> {
    if !path.is_file() {
        bail!("input file {} does not exist", path.display());
    }
    Ok(())
}

/// Fails unless `path` can be created: its parent must be an existing directory.
pub fn require_writable_target(path: &Path) -> anyhow::Result<()> {
    let parent = parent_dir(path);
    if !parent.is_dir() {
        bail!("output directory {} does not exist", parent.display());
    }
    if path.is_dir() {
        return Err(usage(format!("output {} is a directory", path.display())));
    }
    Ok(())
}

pub fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub struct Loaded {
    pub examples: Vec<InflectionExample>,
    pub sha256: String,
}

fn load(path: &Path, test: bool) -> anyhow::Result<Loaded> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let text = std::str::from_utf8(&bytes).with_context(|| format!("{} is not UTF-8", path.display()))?;
    let parsed = if test { parse_test_tsv(text) } else { parse_train_tsv(text) };
    let examples = parsed.with_context(|| format!("parsing {}", path.display()))?;
    Ok(Loaded {
        examples,
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

pub fn load_train(path: &Path) -> anyhow::Result<Loaded> {
    load(path, false)
}

pub fn load_test(path: &Path) -> anyhow::Result<Loaded> {
    load(path, true)
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// `x.trn` → `x`.
pub fn language_of(path: &Path) -> anyhow::Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .ok_or_else(|| usage(format!("cannot infer a language from {}; pass --lang", path.display())))
}

/// Writes via a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, contents: &[u8]) -> anyhow::Result<()> {
    let mut tmp = tempfile::NamedTempFile::new_in(parent_dir(path))
        .with_context(|| format!("creating a temporary file for {}", path.display()))?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Ordered `key=value` record of a run.
#[derive(Default)]
pub struct Manifest {
    lines: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        let mut m = Manifest::default();
        m.push("command", command);
        m.push("version", env!("CARGO_PKG_VERSION"));
        m.push("argv", std::env::args().collect::<Vec<_>>().join(" "));
        m
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.lines.push((key.into(), value.to_string()));
    }

    pub fn extend<K: Into<String>>(&mut self, prefix: &str, pairs: impl IntoIterator<Item = (K, String)>) {
        for (k, v) in pairs {
            self.push(format!("{prefix}.{}", k.into()), v);
        }
    }

    pub fn input(&mut self, role: &str, path: &Path, sha256: &str) {
        self.push(format!("input.{role}.path"), path.display());
        self.push(format!("input.{role}.sha256"), sha256);
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.lines {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

/// `out.tsv` → `out.tsv.manifest`.
pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest");
    out.with_file_name(name)
}

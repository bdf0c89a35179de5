use std::fs::File;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};

use pgt::augment::{hallucinate, multitask, observed_alphabet};
use pgt::data::{encode_source, format_predictions};
use pgt::decode::{beam_decode, ensemble_decode, greedy_decode, majority_vote, DecodeOptions};
use pgt::eval::{low_resource_experiment, LanguageData, LowResourceConfig};
use pgt::model::{read_checkpoint, write_checkpoint, CheckpointHeader};
use pgt::train::{build_pipeline_data, selection_order, train_with, Phase};
use pgt::InflectionModel;

use crate::args::{AugmentKind, LowresArgs, PredictArgs, TrainArgs};
use crate::failure::usage;
use crate::files::{
    language_of, load_test, load_train, manifest_path, require_file, require_writable_target, sha256_file,
    write_atomic, Manifest,
};
use crate::settings;

struct Staged {
    name: String,
    phase: Phase,
    epoch: usize,
    dev_accuracy: f64,
}

pub fn train(a: &TrainArgs) -> anyhow::Result<()> {
    let (base, cfg) = settings::resolve(&a.hyper)?;
    if a.keep == Some(0) {
        return Err(usage("--keep must be at least 1"));
    }
    require_file(&a.train)?;
    require_file(&a.dev)?;
    if a.out.exists() && !a.out.is_dir() {
        return Err(usage(format!("output {} is not a directory", a.out.display())));
    }
    let lang = match &a.lang {
        Some(l) => l.clone(),
        None => language_of(&a.train)?,
    };
    let train = load_train(&a.train)?;
    let dev = load_train(&a.dev)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let data = build_pipeline_data(&train.examples, &cfg)?;
    log::info!(
        "{lang}: {} training rows, {} after augmentation, {} pretraining rows",
        train.examples.len(),
        data.finetune.len(),
        data.pretrain.as_ref().map_or(0, Vec::len)
    );
    let staging = tempfile::Builder::new()
        .prefix(".pgt-staging-")
        .tempdir_in(&a.out)
        .context("creating staging directory")?;
    let mut staged: Vec<Staged> = Vec::new();
    let mut model_pairs = Vec::new();
    let mut vocab_hash = String::new();
    let report = train_with(&data, &dev.examples, &base, &cfg, |c| {
        let name = c.file_name(&lang);
        let mut w = BufWriter::new(File::create(staging.path().join(&name))?);
        let header = CheckpointHeader {
            phase: c.phase.label().to_string(),
            epoch: c.epoch,
            dev_accuracy: c.dev_accuracy,
        };
        write_checkpoint(&mut w, &c.model, &header)?;
        w.flush()?;
        if staged.is_empty() {
            model_pairs = c.model.config.to_pairs();
            vocab_hash = c.model.vocab.hash();
        }
        staged.push(Staged {
            name,
            phase: c.phase,
            epoch: c.epoch,
            dev_accuracy: c.dev_accuracy,
        });
        Ok(())
    })?;

    let mut ranked: Vec<&Staged> = staged.iter().collect();
    ranked.sort_by(|x, y| selection_order((x.dev_accuracy, x.phase, x.epoch), (y.dev_accuracy, y.phase, y.epoch)));
    ranked.truncate(a.keep.unwrap_or(staged.len()));

    let mut m = Manifest::new("train");
    m.push("language", &lang);
    m.input("train", &a.train, &train.sha256);
    m.input("dev", &a.dev, &dev.sha256);
    if let Some(p) = &a.hyper.config {
        m.input("config", p, &sha256_file(p)?);
    }
    m.extend("model", model_pairs);
    m.extend("train", cfg.to_pairs());
    m.push("vocab_hash", vocab_hash);
    m.push("data.train_rows", train.examples.len());
    m.push("data.finetune_rows", data.finetune.len());
    m.push("data.pretrain_rows", data.pretrain.as_ref().map_or(0, Vec::len));
    for e in &report.epochs {
        let key = format!("epoch.{}.{}", e.phase.label(), e.epoch);
        m.push(format!("{key}.loss"), format!("{:.6}", e.loss));
        m.push(format!("{key}.dev_accuracy"), format!("{:.6}", e.dev_accuracy));
    }
    m.push("stopped_early", report.stopped_early);
    m.push("best_checkpoint", &ranked[0].name);
    m.push(
        "checkpoints",
        ranked.iter().map(|s| s.name.as_str()).collect::<Vec<_>>().join(","),
    );
    let manifest_staged = staging.path().join(format!("{lang}.manifest"));
    std::fs::write(&manifest_staged, m.render())?;

    for s in &ranked {
        let to = a.out.join(&s.name);
        std::fs::rename(staging.path().join(&s.name), &to).with_context(|| format!("moving {}", to.display()))?;
    }
    std::fs::rename(manifest_staged, a.out.join(format!("{lang}.manifest")))?;
    log::info!(
        "wrote {} checkpoints to {}; best {} (dev {:.4})",
        ranked.len(),
        a.out.display(),
        ranked[0].name,
        ranked[0].dev_accuracy
    );
    Ok(())
}

fn load_models(paths: &[PathBuf]) -> anyhow::Result<Vec<InflectionModel<f32>>> {
    let mut models: Vec<InflectionModel<f32>> = Vec::with_capacity(paths.len());
    for path in paths {
        let expected = models.first().map(|m| m.vocab.hash());
        let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let (model, header) =
            read_checkpoint(BufReader::new(file), expected.as_deref()).with_context(|| format!("loading {}", path.display()))?;
        log::info!(
            "loaded {} ({} epoch {}, dev {:.4})",
            path.display(),
            header.phase,
            header.epoch,
            header.dev_accuracy
        );
        models.push(model);
    }
    Ok(models)
}

pub fn predict(a: &PredictArgs) -> anyhow::Result<()> {
    if a.beam.is_some() && a.suppress_unk {
        return Err(usage("--suppress-unk applies to greedy decoding only"));
    }
    if a.beam == Some(0) {
        return Err(usage("--beam must be at least 1"));
    }
    for c in &a.checkpoints {
        require_file(c)?;
    }
    require_file(&a.test)?;
    require_writable_target(&a.out)?;
    let test = load_test(&a.test)?;
    let models = load_models(&a.checkpoints)?;
    let sources: Vec<_> = test.examples.iter().map(|e| encode_source(e, &models[0].vocab)).collect();
    let opts = DecodeOptions {
        suppress_unk: a.suppress_unk,
    };

    let forms: Vec<String> = match (models.len(), a.beam) {
        (1, None) => {
            let preds = greedy_decode(&models[0], &sources, opts)?;
            let unk: usize = preds.iter().map(|p| p.unk_count).sum();
            if unk > 0 {
                log::warn!("{unk} unknown-character placeholders emitted");
            }
            preds.into_iter().map(|p| p.form).collect()
        }
        (_, None) => ensemble_decode(&models, &sources, a.seed, opts)?,
        (_, Some(width)) => {
            let per_model = models
                .iter()
                .map(|m| beam_decode(m, &sources, width))
                .collect::<pgt::Result<Vec<_>>>()?;
            (0..sources.len())
                .map(|i| {
                    let forms: Vec<&str> = per_model.iter().map(|p| p[i].form.as_str()).collect();
                    majority_vote(&forms, a.seed.wrapping_add(i as u64))
                })
                .collect::<pgt::Result<_>>()?
        }
    };
    let text = format_predictions(test.examples.iter().zip(forms.iter().map(String::as_str)));
    write_atomic(&a.out, text.as_bytes())?;

    let mut m = Manifest::new("predict");
    m.input("test", &a.test, &test.sha256);
    for (i, c) in a.checkpoints.iter().enumerate() {
        m.input(&format!("checkpoint{i}"), c, &sha256_file(c)?);
    }
    m.push("vocab_hash", models[0].vocab.hash());
    m.push("seed", a.seed);
    m.push("beam", a.beam.map_or("greedy".to_string(), |w| w.to_string()));
    m.push("suppress_unk", a.suppress_unk);
    m.push("output.sha256", sha256_file(&a.out)?);
    write_atomic(&manifest_path(&a.out), m.render().as_bytes())?;
    log::info!("wrote {} predictions to {}", forms.len(), a.out.display());
    Ok(())
}

pub fn augment(kind: &AugmentKind) -> anyhow::Result<()> {
    let (input, out) = match kind {
        AugmentKind::Multitask { input, out } | AugmentKind::Hallucinate { input, out, .. } => (input, out),
    };
    require_file(input)?;
    require_writable_target(out)?;
    let data = load_train(input)?;
    let mut m = Manifest::new("augment");
    m.input("train", input, &data.sha256);
    let rows = match kind {
        AugmentKind::Multitask { .. } => {
            m.push("kind", "multitask");
            multitask(&data.examples)
        }
        AugmentKind::Hallucinate { n, seed, .. } => {
            m.push("kind", "hallucinate");
            m.push("n", n);
            m.push("seed", seed);
            let alphabet = observed_alphabet(&data.examples);
            hallucinate(&data.examples, *n, &alphabet, *seed)?
        }
    };
    let text = format_predictions(rows.iter().map(|e| (e, e.form.as_str())));
    write_atomic(out, text.as_bytes())?;
    m.push("output.rows", rows.len());
    m.push("output.sha256", sha256_file(out)?);
    write_atomic(&manifest_path(out), m.render().as_bytes())?;
    log::info!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

fn languages_in(dir: &Path) -> anyhow::Result<Vec<String>> {
    let mut langs = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "trn") {
            langs.push(language_of(&path)?);
        }
    }
    langs.sort();
    if langs.is_empty() {
        bail!("no .trn files in {}", dir.display());
    }
    Ok(langs)
}

pub fn lowres(a: &LowresArgs) -> anyhow::Result<()> {
    let (model, train_cfg) = settings::resolve(&a.hyper)?;
    if a.seeds.is_empty() {
        return Err(usage("--seeds must name at least one seed"));
    }
    if !a.data.is_dir() {
        bail!("data directory {} does not exist", a.data.display());
    }
    require_writable_target(&a.out)?;
    let langs = if a.langs.is_empty() {
        languages_in(&a.data)?
    } else {
        a.langs.clone()
    };
    for lang in &langs {
        require_file(&a.data.join(format!("{lang}.trn")))?;
        require_file(&a.data.join(format!("{lang}.dev")))?;
    }

    let mut m = Manifest::new("lowres-exp");
    let mut data = Vec::new();
    for lang in &langs {
        let trn_path = a.data.join(format!("{lang}.trn"));
        let dev_path = a.data.join(format!("{lang}.dev"));
        let tst_path = a.data.join(format!("{lang}.tst"));
        let trn = load_train(&trn_path)?;
        let dev = load_train(&dev_path)?;
        m.input(&format!("{lang}.train"), &trn_path, &trn.sha256);
        m.input(&format!("{lang}.dev"), &dev_path, &dev.sha256);
        let test = if tst_path.is_file() {
            let tst = load_test(&tst_path)?;
            if tst.examples.iter().any(|e| e.form.is_empty()) {
                log::warn!("{}: no gold forms; scoring on dev", tst_path.display());
                None
            } else {
                m.input(&format!("{lang}.test"), &tst_path, &tst.sha256);
                Some(tst.examples)
            }
        } else {
            None
        };
        data.push(LanguageData {
            language: lang.clone(),
            train: trn.examples,
            dev: dev.examples,
            test,
        });
    }

    let cfg = LowResourceConfig {
        model,
        train: train_cfg,
        sample_size: a.sample_size,
        seeds: a.seeds.clone(),
    };
    let report = low_resource_experiment(&data, &cfg)?;
    write_atomic(&a.out, report.to_tsv().as_bytes())?;

    m.extend("model", cfg.model.to_pairs());
    m.extend("train", cfg.train.to_pairs());
    m.push("sample_size", cfg.sample_size);
    m.push(
        "seeds",
        cfg.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
    );
    for c in &report.cells {
        m.push(format!("cell.{}.{}.shared_init_sha256", c.language, c.seed), &c.shared_init_hash);
        m.push(format!("cell.{}.{}.trm_best_epoch", c.language, c.seed), c.vanilla.best_epoch);
        m.push(
            format!("cell.{}.{}.trm_pg_best_epoch", c.language, c.seed),
            c.pointer_generator.best_epoch,
        );
    }
    m.push("output.sha256", sha256_file(&a.out)?);
    write_atomic(&manifest_path(&a.out), m.render().as_bytes())?;
    log::info!(
        "Trm {:.4}, Trm-PG {:.4}, delta {:+.4}",
        report.mean_vanilla,
        report.mean_pointer_generator,
        report.mean_delta()
    );
    Ok(())
}

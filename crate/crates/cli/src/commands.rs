use std::path::Path;

use extract_edit::engine::{build_index, extract_and_edit, read_extractions, write_extractions};
use extract_edit::eval::{corpus_bleu, hits_at_k, token_accuracy, BLEU_CSV_HEADER, HITS_CSV_HEADER, HITS_KS};
use extract_edit::text::{generate_cipher_pair, CipherSpec, Corpus, CorpusBundle, Language, Sentence};
use extract_edit::train::{
    apply_flat_text, gold_metrics, metrics_csv, pretrain, set_key, sweep_k, GoldMetrics, Mode, TrainConfig, Trainer, Translator,
    SWEEP_CSV_HEADER,
};
use extract_edit::{Error, Real, Result};
use serde::Serialize;

use crate::args::{Direction, EvaluateArgs, ExtractArgs, GenCorpusArgs, Metric, SweepArgs, TrainArgs, TranslateArgs};
use crate::manifest::{CheckpointEntry, Run, Status, CHECKPOINTS, CONFIG, METRICS, REPORTS};

pub type Overrides = [(String, String)];

/// How a command ended when it did not fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Done,
    Paused,
}

/// File config first, then command-line overrides.
fn configure<T: Serialize + serde::de::DeserializeOwned>(mut value: T, file: Option<&Path>, overrides: &Overrides) -> Result<T> {
    if let Some(path) = file {
        apply_flat_text(&mut value, &std::fs::read_to_string(path)?)?;
    }
    for (k, v) in overrides {
        set_key(&mut value, k, v)?;
    }
    Ok(value)
}

fn no_overrides(command: &str, overrides: &Overrides) -> Result<()> {
    match overrides.first() {
        Some((k, _)) => Err(Error::Config(format!("{command} takes no configuration overrides (got --{k})"))),
        None => Ok(()),
    }
}

fn corpus_of(data: &CorpusBundle, lang: Language) -> &Corpus {
    match lang {
        Language::Source => &data.source,
        Language::Target => &data.target,
    }
}

fn same_vocab(tr: &Translator<Real>, data: &CorpusBundle) -> Result<()> {
    if tr.vocab.tokens() != data.vocab.tokens() {
        return Err(Error::VocabMismatch("checkpoint and corpus vocabularies differ".into()));
    }
    Ok(())
}

fn render_lines(sents: &[Sentence], tr: &Translator<Real>) -> String {
    sents.iter().map(|s| s.render(&tr.vocab) + "\n").collect()
}

pub fn gen_corpus(root: &Path, args: &GenCorpusArgs, overrides: &Overrides) -> Result<Outcome> {
    let spec: CipherSpec = configure(CipherSpec::default(), args.config.as_deref(), overrides)?;
    spec.validate()?;
    let mut run = Run::create(root, &args.run.name, "gen-corpus", args.run.overwrite)?;
    run.manifest.seed = Some(spec.seed);
    run.manifest.config = extract_edit::train::flat_text(&spec);
    let result = (|| {
        let pair = generate_cipher_pair(&spec)?;
        run.write(CONFIG, &run.manifest.config.clone())?;
        pair.write(&run.path("corpus"))?;
        run.record_dir("corpus")
    })();
    run.finish(Status::Succeeded, result).map(|_| Outcome::Done)
}

fn step_dir(step: u64) -> String {
    format!("{CHECKPOINTS}/step-{step:06}")
}

fn load_dumps(trainer: &Trainer<Real>, dir: &Path) -> Result<[Vec<(Sentence, Sentence)>; 2]> {
    let mut out: [Vec<(Sentence, Sentence)>; 2] = [Vec::new(), Vec::new()];
    for d in [Direction::S2t, Direction::T2s] {
        let corpus = trainer.corpus(d.input());
        let results = read_extractions::<Real>(&dir.join(format!("{}.tsv", d.name())), &trainer.data.vocab)?;
        let mut pairs = Vec::with_capacity(results.len());
        for r in results {
            if r.source >= corpus.len() || r.edited.is_empty() {
                return Err(Error::Invalid(format!("{} dump refers to sentence {} without an edit", d.name(), r.source)));
            }
            pairs.push((corpus.get(r.source).clone(), r.edited[0].clone()));
        }
        if pairs.is_empty() {
            return Err(Error::Invalid(format!("{} dump is empty", d.name())));
        }
        out[d.input().tag()] = pairs;
    }
    Ok(out)
}

pub fn train(root: &Path, args: &TrainArgs, overrides: &Overrides) -> Result<Outcome> {
    if args.checkpoint_every == 0 {
        return Err(Error::Config("--checkpoint-every must be positive".into()));
    }
    let data = CorpusBundle::load(&args.corpus)?;
    let latest = format!("{CHECKPOINTS}/latest");
    let (mut run, trainer) = if args.resume {
        no_overrides("train --resume", overrides)?;
        if args.config.is_some() || args.dumps.is_some() {
            return Err(Error::Config("a resumed run keeps its stored configuration".into()));
        }
        let run = Run::open(root, &args.run.name)?;
        let trainer = Trainer::resume(&run.path(&latest), data);
        (run, trainer)
    } else {
        let config: TrainConfig = configure(TrainConfig::default(), args.config.as_deref(), overrides)?;
        config.validate()?;
        if args.dumps.is_some() && config.mode != Mode::MleRetrain {
            return Err(Error::Config("--dumps needs mode = mle-retrain".into()));
        }
        let mut run = Run::create(root, &args.run.name, "train", args.run.overwrite)?;
        run.manifest.seed = Some(config.seed);
        run.manifest.config = config.to_text();
        run.write(CONFIG, &config.to_text())?;
        run.save()?;
        let trainer = Trainer::new(config, data).and_then(|mut t| {
            if let Some(dir) = &args.dumps {
                t.state.pseudo = Some(load_dumps(&t, dir)?);
            }
            Ok(t)
        });
        (run, trainer)
    };
    let result = trainer.and_then(|mut t| {
        let r = train_loop(&mut run, &mut t, args, &latest);
        // the log up to the failing step is kept either way
        run.write(METRICS, &metrics_csv(&t.state.metrics))?;
        r
    });
    let status = if result.as_ref().is_ok_and(|o| *o == Outcome::Paused) { Status::Paused } else { Status::Succeeded };
    run.finish(status, result)
}

fn train_loop(run: &mut Run, t: &mut Trainer<Real>, args: &TrainArgs, latest: &str) -> Result<Outcome> {
    while !t.is_finished() {
        if args.stop_after.is_some_and(|n| t.state.step >= n) {
            t.save_checkpoint(&run.path(latest))?;
            run.record_dir(latest)?;
            return Ok(Outcome::Paused);
        }
        let row = t.step()?;
        if row.step % args.checkpoint_every == 0 {
            let rel = step_dir(row.step);
            t.translator(false)?.save(&run.path(&rel))?;
            run.record_dir(&rel)?;
            t.save_checkpoint(&run.path(latest))?;
            run.record_dir(latest)?;
            let score = match (&t.state.best, row.d_s2t, row.d_t2s) {
                (Some(b), Some(_), Some(_)) if b.step == row.step => Some(b.score),
                (_, Some(a), Some(b)) => Some((a + b) / 2.0),
                _ => None,
            };
            run.manifest.checkpoints.push(CheckpointEntry {
                path: rel,
                step: row.step,
                score,
            });
            run.write(METRICS, &metrics_csv(&t.state.metrics))?;
            run.save()?;
        }
    }
    if t.state.best.is_none() {
        t.record_validation()?;
    }
    t.save_checkpoint(&run.path(latest))?;
    run.record_dir(latest)?;
    for (name, best) in [("final", false), ("best", true)] {
        let rel = format!("{CHECKPOINTS}/{name}");
        let tr = t.translator(best)?;
        tr.save(&run.path(&rel))?;
        run.record_dir(&rel)?;
        let entry = CheckpointEntry {
            path: rel,
            step: tr.card.step,
            score: tr.card.score,
        };
        if best {
            run.manifest.best = Some(entry);
        }
    }
    Ok(Outcome::Done)
}

pub fn translate(args: &TranslateArgs, overrides: &Overrides) -> Result<Outcome> {
    no_overrides("translate", overrides)?;
    let tr = Translator::<Real>::load(&args.checkpoint)?;
    let text = std::fs::read_to_string(&args.input)?;
    let mut sents = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let s = tr.parse(line).map_err(|e| Error::Ingestion {
            path: args.input.clone(),
            line: n + 1,
            detail: e.to_string(),
        })?;
        sents.push(s);
    }
    let out = tr.translate(&sents, args.direction.output())?;
    std::fs::write(&args.output, render_lines(&out, &tr))?;
    Ok(Outcome::Done)
}

pub fn extract(args: &ExtractArgs, overrides: &Overrides) -> Result<Outcome> {
    no_overrides("extract", overrides)?;
    if args.k == 0 {
        return Err(Error::Config("--k must be positive".into()));
    }
    let tr = Translator::<Real>::load(&args.checkpoint)?;
    let data = CorpusBundle::load(&args.corpus)?;
    same_vocab(&tr, &data)?;
    let (inp, out) = (args.direction.input(), args.direction.output());
    let sources = corpus_of(&data, inp);
    let pool = corpus_of(&data, out);
    let n = args.limit.map_or(sources.len(), |l| l.min(sources.len()));
    let sents: Vec<&Sentence> = sources.sentences[..n].iter().collect();
    let index = build_index(&tr.model, pool, 0)?;
    let e_s = tr.model.embed_sentences(&sents, 256)?;
    let ids: Vec<usize> = (0..n).collect();
    let results = extract_and_edit(&tr.model, &e_s, &ids, &index, pool, args.k, tr.decode_options(out), false)?;
    write_extractions(&args.output, &results, &tr.vocab)?;
    Ok(Outcome::Done)
}

pub fn evaluate(root: &Path, args: &EvaluateArgs, overrides: &Overrides) -> Result<Outcome> {
    no_overrides("evaluate", overrides)?;
    let mut run = Run::create(root, &args.run.name, "evaluate", args.run.overwrite)?;
    run.manifest.config = format!(
        "checkpoint = {}\ncorpus = {}\nmetrics = {}\nnoise = {}\nsmoothing = {}\n",
        args.checkpoint.display(),
        args.corpus.display(),
        args.metrics.iter().map(|m| format!("{m:?}").to_lowercase()).collect::<Vec<_>>().join(","),
        args.noise.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
        !args.no_smoothing
    );
    let result = evaluate_into(&mut run, args);
    run.finish(Status::Succeeded, result).map(|_| Outcome::Done)
}

fn evaluate_into(run: &mut Run, args: &EvaluateArgs) -> Result<()> {
    if args.metrics.is_empty() {
        return Ok(());
    }
    let tr = Translator::<Real>::load(&args.checkpoint)?;
    let data = CorpusBundle::load(&args.corpus)?;
    same_vocab(&tr, &data)?;
    if data.gold_test.is_empty() {
        return Err(Error::Invalid("corpus has no gold test pairs".into()));
    }
    let (src, tgt): (Vec<Sentence>, Vec<Sentence>) = data.gold_test.iter().cloned().unzip();
    let needs_hyp = args.metrics.iter().any(|m| *m != Metric::Hits);
    let (hyp_t, hyp_s) = if needs_hyp {
        (tr.translate(&src, Language::Target)?, tr.translate(&tgt, Language::Source)?)
    } else {
        (Vec::new(), Vec::new())
    };
    if needs_hyp {
        run.write(&format!("{REPORTS}/s2t.hyp"), &render_lines(&hyp_t, &tr))?;
        run.write(&format!("{REPORTS}/t2s.hyp"), &render_lines(&hyp_s, &tr))?;
    }
    let dirs = [("s2t", &hyp_t, &tgt), ("t2s", &hyp_s, &src)];
    for metric in &args.metrics {
        match metric {
            Metric::Bleu => {
                let (mut txt, mut csv) = (String::new(), format!("direction,{BLEU_CSV_HEADER}\n"));
                for (name, hyp, refs) in dirs {
                    let r = corpus_bleu(hyp, refs, 4, !args.no_smoothing)?;
                    txt.push_str(&format!("{name}: {}", r.to_text()));
                    csv.push_str(&format!("{name},{}\n", r.csv_row()));
                }
                run.write(&format!("{REPORTS}/bleu.txt"), &txt)?;
                run.write(&format!("{REPORTS}/bleu.csv"), &csv)?;
            }
            Metric::Accuracy => {
                let (mut txt, mut csv) = (String::new(), "direction,accuracy\n".to_string());
                for (name, hyp, refs) in dirs {
                    let a = token_accuracy(hyp, refs)?;
                    txt.push_str(&format!("{name}: token accuracy = {:.4}\n", a));
                    csv.push_str(&format!("{name},{a}\n"));
                }
                run.write(&format!("{REPORTS}/accuracy.txt"), &txt)?;
                run.write(&format!("{REPORTS}/accuracy.csv"), &csv)?;
            }
            Metric::Hits => {
                let pool = data.distractors.as_ref().map_or(&[][..], |c| &c.sentences[..]);
                let (mut txt, mut csv) = (String::new(), format!("{HITS_CSV_HEADER}\n"));
                for &r in &args.noise {
                    let report = hits_at_k(&tr.model, &data.gold_test, pool, r, &HITS_KS)?;
                    txt.push_str(&report.to_text());
                    csv.push_str(&report.csv_rows());
                }
                run.write(&format!("{REPORTS}/hits.txt"), &txt)?;
                run.write(&format!("{REPORTS}/hits.csv"), &csv)?;
            }
        }
    }
    Ok(())
}

pub fn sweep(root: &Path, args: &SweepArgs, overrides: &Overrides) -> Result<Outcome> {
    if args.ks.is_empty() || args.ks.contains(&0) {
        return Err(Error::Config("--ks needs positive values".into()));
    }
    let data = CorpusBundle::load(&args.corpus)?;
    let config: TrainConfig = configure(TrainConfig::default(), args.config.as_deref(), overrides)?;
    config.validate()?;
    if config.mode != Mode::ExtractEdit {
        return Err(Error::Config("sweep-k needs mode = extract-edit".into()));
    }
    let mut run = Run::create(root, &args.run.name, "sweep-k", args.run.overwrite)?;
    run.manifest.seed = Some(config.seed);
    run.manifest.config = config.to_text();
    let result = (|| {
        run.write(CONFIG, &config.to_text())?;
        run.save()?;
        let gold = data.gold_test.clone();
        let pre = pretrain(Trainer::<Real>::new(config, data)?)?;
        run.write("pretrained/metrics.csv", &metrics_csv(&pre.state.metrics))?;
        let pre_metrics: GoldMetrics = gold_metrics(&pre.translator(false)?, &gold, true)?;
        let rows = sweep_k(&pre, &args.ks, &gold, args.parallel)?;
        let mut csv = format!("{SWEEP_CSV_HEADER}\n");
        for (row, t) in &rows {
            csv.push_str(&row.csv_line());
            csv.push('\n');
            let dir = format!("k-{}", row.k);
            run.write(&format!("{dir}/{METRICS}"), &metrics_csv(&t.state.metrics))?;
            t.translator(false)?.save(&run.path(&format!("{dir}/final")))?;
            run.record_dir(&format!("{dir}/final"))?;
        }
        run.write(&format!("{REPORTS}/sweep.csv"), &csv)?;
        run.write(
            &format!("{REPORTS}/pretrained.csv"),
            &format!(
                "accuracy,accuracy_s2t,accuracy_t2s,bleu_s2t,bleu_t2s\n{},{},{},{},{}\n",
                pre_metrics.accuracy(),
                pre_metrics.accuracy_s2t,
                pre_metrics.accuracy_t2s,
                pre_metrics.bleu_s2t,
                pre_metrics.bleu_t2s
            ),
        )
    })();
    run.finish(Status::Succeeded, result).map(|_| Outcome::Done)
}

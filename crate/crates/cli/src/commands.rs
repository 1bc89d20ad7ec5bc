//! One function per subcommand. Each resolves its inputs, checks that they
//! exist, stops there under `--dry-run`, then calls into the library.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use affectune::emotion::{
    build_dataset, load_vad_lexicon, map_categories, quadrant_counts, read_clip_manifest, read_goemotions, read_manifest,
    write_manifest, CategoryMapping, ManifestRecord, Quadrant, Split, TextSample, GOEMOTIONS_LABELS,
};
use affectune::generate::{generate_per_quadrant, read_generated_manifest, Conditioner, SamplingConfig};
use affectune::metrics::{standardized_mse, valence_arousal_report, QuadrantMetrics};
use affectune::midi::{parse_midi, write_midi, Score};
use affectune::model::{Decoder, Encoder, FreezePolicy, TextVocab};
use affectune::nn::checkpoint::Checkpoint;
use affectune::remi::{RemiTokenizer, TokenSequence};
use affectune::rng::substream;
use affectune::study::{build_trials, read_responses, read_trials, score_responses, write_trials, StudyState};
use affectune::synth::{write_corpus, SynthConfig};
use affectune::train::{
    epoch_of_path, finetune, nearest_neighbor_accuracy, pretrain_decoder, select_finetune_checkpoint,
    select_pretrain_checkpoint, train_contrastive_encoder, CheckpointSink, DecoderSource, FinetuneExample, RunLog,
    SampleSource, Stage, StageConfig,
};

use crate::args::{Command, ConditionArg, SamplingArgs, SplitArg, StageArgs};
use crate::config::CliConfig;
use crate::error::{CliError, Result};
use crate::server;

pub struct Context {
    pub config: CliConfig,
    pub dry_run: bool,
}

pub fn run(ctx: &Context, command: Command) -> Result<()> {
    match command {
        Command::Tokenize { input, out } => tokenize(ctx, &input, &out),
        Command::Detokenize { input, out } => detokenize(ctx, &input, &out),
        Command::ValidateTokens { input } => validate_tokens(ctx, &input),
        Command::MapEmotions { lexicon, out } => map_emotions(ctx, lexicon, out),
        Command::BuildDataset { lexicon, texts, clips, out } => build(ctx, lexicon, texts, clips, &out),
        Command::Pretrain { corpus, out, stage } => pretrain(ctx, corpus, &out, &stage),
        Command::SelectPretrainCkpt { checkpoints, corpus, samples, out } => select_pretrain(ctx, &checkpoints, corpus, samples, out),
        Command::TrainEncoder { dataset, out, stage } => train_encoder(ctx, dataset, &out, &stage),
        Command::Finetune { dataset, decoder, encoder, condition, out, stage } => {
            finetune_cmd(ctx, dataset, &decoder, encoder, condition, &out, &stage)
        }
        Command::SelectFinetuneCkpt { checkpoints, dataset, encoder, condition, reference, per_quadrant, out } => {
            select_finetune(ctx, &checkpoints, dataset, encoder, condition, reference, per_quadrant, out)
        }
        Command::Generate { decoder, encoder, condition, dataset, split, n, out, sampling } => {
            generate_cmd(ctx, &decoder, encoder, condition, dataset, split, n, &out, &sampling)
        }
        Command::Evaluate { generated, clips, reference, out, emit_metrics } => evaluate(ctx, generated, clips, reference, out, emit_metrics),
        Command::BuildTrials { generated, dataset, out } => trials(ctx, &generated, dataset, &out),
        Command::ServeStudy { trials, generated, log, addr } => serve(ctx, &trials, &generated, &log, addr),
        Command::ScoreStudy { trials, responses, out } => score(ctx, &trials, &responses, out),
        Command::ShowConfig => {
            print!("{}", ctx.config.to_toml());
            Ok(())
        }
        Command::SynthCorpus { out, clips_per_quadrant, texts_per_quadrant, bars } => {
            synth(ctx, &out, SynthConfig { clips_per_quadrant, texts_per_quadrant, bars })
        }
    }
}

// ------------------------------------------------------------- helpers

fn pick(flag: Option<PathBuf>, configured: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| configured.clone()).ok_or_else(|| CliError::Usage(format!("--{name} is required (or paths.{name} in the config)")))
}

fn existing(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::data("MissingInput", format!("{} does not exist", path.display())))
    }
}

fn dry_run(ctx: &Context, what: &str) -> bool {
    if ctx.dry_run {
        println!("dry run: {what}");
    }
    ctx.dry_run
}

fn reader(path: &Path) -> Result<BufReader<fs::File>> {
    Ok(BufReader::new(fs::File::open(existing(path)?)?))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn tokenizer(ctx: &Context) -> Result<RemiTokenizer> {
    RemiTokenizer::new(ctx.config.tokenizer.clone()).map_err(|e| CliError::Usage(format!("config: {e}")))
}

fn load_midi(path: &Path) -> Result<Score> {
    let bytes = fs::read(existing(path)?)?;
    parse_midi(&bytes).map_err(|e| CliError::data("MidiError", format!("{}: {e}", path.display())))
}

fn with_stage(mut s: StageConfig, a: &StageArgs) -> Result<StageConfig> {
    s.epochs = a.epochs.unwrap_or(s.epochs);
    s.learning_rate = a.learning_rate.unwrap_or(s.learning_rate);
    s.batch_size = a.batch_size.unwrap_or(s.batch_size);
    s.checkpoint_every_epochs = a.checkpoint_every.unwrap_or(s.checkpoint_every_epochs);
    s.check().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(s)
}

/// Clip paths as listed in a manifest, resolved against its directory.
fn resolve_clips(manifest: &Path) -> Result<Vec<(PathBuf, Quadrant)>> {
    let base = manifest.parent().unwrap_or(Path::new(""));
    let records = read_clip_manifest(reader(manifest)?)?;
    records
        .into_iter()
        .map(|c| {
            let p = base.join(&c.path);
            existing(&p)?;
            Ok((p, c.quadrant))
        })
        .collect()
}

/// MIDI files under a directory (recursively, sorted) or listed in a manifest.
fn corpus_files(path: &Path) -> Result<Vec<PathBuf>> {
    existing(path)?;
    if path.is_file() {
        return Ok(resolve_clips(path)?.into_iter().map(|(p, _)| p).collect());
    }
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(path).sort_by_file_name() {
        let entry = entry.map_err(|e| CliError::runtime("IoError", e.to_string()))?;
        let ext = entry.path().extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if entry.file_type().is_file() && matches!(ext.as_deref(), Some("mid" | "midi")) {
            files.push(entry.into_path());
        }
    }
    Ok(files)
}

/// Tokenized corpus. Files that fail to parse are logged and skipped.
fn tokenized_corpus(tok: &RemiTokenizer, files: &[PathBuf]) -> Result<Vec<TokenSequence>> {
    let mut out = Vec::with_capacity(files.len());
    for f in files {
        match load_midi(f) {
            Ok(s) => out.push(tok.tokenize(&s)),
            Err(e) => log::warn!("skipping {e}"),
        }
    }
    if out.is_empty() {
        return Err(CliError::data("EmptyCorpus", "no readable MIDI files"));
    }
    log::info!("{} of {} files tokenized", out.len(), files.len());
    Ok(out)
}

fn dataset(ctx: &Context, flag: Option<PathBuf>) -> Result<Vec<ManifestRecord>> {
    let path = pick(flag, &ctx.config.paths.dataset, "dataset")?;
    Ok(read_manifest(reader(&path)?)?)
}

fn texts_by_quadrant(records: &[ManifestRecord], split: Split) -> BTreeMap<Quadrant, Vec<TextSample>> {
    let mut out: BTreeMap<Quadrant, Vec<TextSample>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.split == split) {
        out.entry(r.quadrant).or_default().push(r.text());
    }
    out
}

fn load_encoder(path: &Path) -> Result<Encoder> {
    let mut enc = Encoder::from_checkpoint(&Checkpoint::load(existing(path)?)?)?;
    enc.set_freeze_policy(FreezePolicy::FrozenAll)?;
    Ok(enc)
}

fn load_decoder(tok: &RemiTokenizer, path: &Path) -> Result<Decoder> {
    Ok(Decoder::from_checkpoint(&Checkpoint::load(existing(path)?)?, &tok.vocab().content_hash())?)
}

fn conditioner<'a>(condition: ConditionArg, encoder: Option<&'a Encoder>, decoder: &Decoder) -> Result<Conditioner<'a>> {
    match condition {
        ConditionArg::Text => encoder.map(Conditioner::Text).ok_or_else(|| CliError::Usage("--encoder is required with --condition text".into())),
        ConditionArg::Label if !decoder.config.label_conditioned => {
            Err(CliError::Usage("--condition label needs a decoder built with decoder.label_conditioned = true".into()))
        }
        ConditionArg::Label => Ok(Conditioner::Label),
        ConditionArg::Zero => Ok(Conditioner::Zero),
    }
}

fn optional_encoder(condition: ConditionArg, path: Option<&PathBuf>) -> Result<Option<Encoder>> {
    match (condition, path) {
        (ConditionArg::Text, None) => Err(CliError::Usage("--encoder is required with --condition text".into())),
        (_, Some(p)) => Ok(Some(load_encoder(p)?)),
        (_, None) => Ok(None),
    }
}

fn checkpoint_files(dir: &Path) -> Result<Vec<PathBuf>> {
    existing(dir)?;
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ckpt"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::data("NoCheckpoints", format!("no .ckpt files in {}", dir.display())));
    }
    Ok(files)
}

fn write_log(path: &Path, log: &RunLog) -> Result<()> {
    write_file(path, log.to_jsonl())
}

fn lexicon_mapping(ctx: &Context, lexicon: &Path) -> Result<CategoryMapping> {
    let load = load_vad_lexicon(reader(lexicon)?)?;
    if load.malformed + load.duplicates > 0 {
        log::warn!("lexicon: {} malformed rows, {} duplicates", load.malformed, load.duplicates);
    }
    Ok(map_categories(&GOEMOTIONS_LABELS, &load.lexicon, &ctx.config.thresholds)?)
}

// ------------------------------------------------------------ commands

fn tokenize(ctx: &Context, input: &Path, out: &Path) -> Result<()> {
    let tok = tokenizer(ctx)?;
    let score = load_midi(input)?;
    if dry_run(ctx, &format!("tokenize {} -> {}", input.display(), out.display())) {
        return Ok(());
    }
    let seq = tok.tokenize(&score);
    write_file(out, seq.to_text(tok.vocab()) + "\n")?;
    println!("{} tokens, {} notes", seq.len(), score.notes.len());
    Ok(())
}

fn read_tokens(tok: &RemiTokenizer, input: &Path) -> Result<TokenSequence> {
    Ok(TokenSequence::from_text(&fs::read_to_string(existing(input)?)?, tok.vocab())?)
}

fn detokenize(ctx: &Context, input: &Path, out: &Path) -> Result<()> {
    let tok = tokenizer(ctx)?;
    let seq = read_tokens(&tok, input)?;
    if dry_run(ctx, &format!("detokenize {} -> {}", input.display(), out.display())) {
        return Ok(());
    }
    let score = tok.detokenize(&seq)?;
    write_file(out, write_midi(&score)?)?;
    println!("{} notes", score.notes.len());
    Ok(())
}

fn validate_tokens(ctx: &Context, input: &Path) -> Result<()> {
    let tok = tokenizer(ctx)?;
    let seq = read_tokens(&tok, input)?;
    if dry_run(ctx, &format!("validate {}", input.display())) {
        return Ok(());
    }
    let violations = tok.validate(&seq);
    for v in &violations {
        println!("{}\t{}", v.index, v.message);
    }
    if violations.is_empty() {
        println!("valid ({} tokens)", seq.len());
        Ok(())
    } else {
        Err(CliError::data("GrammarViolation", format!("{} violation(s)", violations.len())))
    }
}

fn map_emotions(ctx: &Context, lexicon: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let lexicon = pick(lexicon, &ctx.config.paths.lexicon, "lexicon")?;
    let mapping = lexicon_mapping(ctx, &lexicon)?;
    if dry_run(ctx, "map emotion categories") {
        return Ok(());
    }
    print!("{}", mapping.report());
    if let Some(out) = out {
        write_file(&out, to_json(&mapping))?;
    }
    Ok(())
}

fn build(ctx: &Context, lexicon: Option<PathBuf>, texts: Option<PathBuf>, clips: Option<PathBuf>, out: &Path) -> Result<()> {
    let p = &ctx.config.paths;
    let (lexicon, texts, clips) = (pick(lexicon, &p.lexicon, "lexicon")?, pick(texts, &p.texts, "texts")?, pick(clips, &p.clips, "clips")?);
    existing(&texts)?;
    let mapping = lexicon_mapping(ctx, &lexicon)?;
    let clip_records: Vec<_> = resolve_clips(&clips)?
        .into_iter()
        .map(|(path, quadrant)| affectune::emotion::ClipRecord { path: path.display().to_string(), quadrant })
        .collect();
    if dry_run(ctx, &format!("build dataset from {} clips", clip_records.len())) {
        return Ok(());
    }
    let load = read_goemotions(reader(&texts)?, &mapping)?;
    log::info!("texts: {} kept, {} neutral, {} unmapped, {} malformed", load.samples.len(), load.neutral, load.unmapped, load.malformed);
    let records = build_dataset(&load.samples, &clip_records, &ctx.config.build, affectune::rng::derive_seed(ctx.config.seed, "dataset", 0))?;
    let mut buf = Vec::new();
    write_manifest(&mut buf, &records)?;
    write_file(out, buf)?;
    for split in [Split::Train, Split::Validation, Split::Test, Split::Contrastive] {
        let counts = quadrant_counts(records.iter().filter(|r| r.split == split).map(|r| r.quadrant));
        let cells: Vec<String> = counts.iter().map(|(q, n)| format!("{q}={n}")).collect();
        println!("{split:?}\t{}", cells.join(" "));
    }
    Ok(())
}

fn pretrain(ctx: &Context, corpus: Option<PathBuf>, out: &Path, stage: &StageArgs) -> Result<()> {
    let tok = tokenizer(ctx)?;
    let corpus = pick(corpus, &ctx.config.paths.corpus, "corpus")?;
    let files = corpus_files(&corpus)?;
    let cfg = with_stage(ctx.config.stage(Stage::Pretrain), stage)?;
    let dcfg = ctx.config.decoder_config(tok.vocab().len(), ctx.config.encoder_config(2).projection_dim);
    dcfg.check()?;
    if dry_run(ctx, &format!("pretrain on {} files for {} epochs", files.len(), cfg.epochs)) {
        return Ok(());
    }
    let seqs = tokenized_corpus(&tok, &files)?;
    let mut dec = Decoder::new(dcfg, &mut substream(ctx.config.seed, "pretrain/init"))?;
    let sink = CheckpointSink { dir: out.to_path_buf(), vocab_hash: tok.vocab().content_hash() };
    let log = pretrain_decoder(&mut dec, &seqs, tok.pad_id(), &cfg, Some(&sink))?;
    write_log(&out.join("pretrain").join("log.jsonl"), &log)?;
    report_log(&log);
    Ok(())
}

fn report_log(log: &RunLog) {
    if let Some(r) = log.records.last() {
        println!("epoch {}: train loss {:.4}, validation {:?}", r.epoch, r.train_loss, r.validation_loss);
    }
    for (epoch, path) in log.checkpoints() {
        println!("checkpoint\t{epoch}\t{path}");
    }
}

fn sources<'a>(
    tok: &'a RemiTokenizer,
    files: &[PathBuf],
    conditioner: impl Fn(&Decoder) -> Result<Conditioner<'a>>,
    sampling: SamplingConfig,
) -> Result<Vec<DecoderSource<'a>>> {
    files
        .iter()
        .map(|f| {
            let dec = load_decoder(tok, f)?;
            let sampling = SamplingConfig { max_tokens: sampling.max_tokens.min(dec.config.max_seq_len + 1), ..sampling };
            Ok(DecoderSource {
                label: f.display().to_string(),
                epoch: epoch_of_path(f).unwrap_or(0),
                conditioner: conditioner(&dec)?,
                model: dec.inference(),
                tokenizer: tok,
                sampling,
            })
        })
        .collect()
}

fn select_pretrain(ctx: &Context, dir: &Path, corpus: Option<PathBuf>, samples: Option<usize>, out: Option<PathBuf>) -> Result<()> {
    let tok = tokenizer(ctx)?;
    let files = checkpoint_files(dir)?;
    let corpus = corpus_files(&pick(corpus, &ctx.config.paths.corpus, "corpus")?)?;
    let n = samples.unwrap_or(ctx.config.selection.samples_per_checkpoint);
    if dry_run(ctx, &format!("compare {} checkpoints on {n} samples each", files.len())) {
        return Ok(());
    }
    let reference = tokenized_corpus(&tok, &corpus)?;
    let srcs = sources(&tok, &files, |_| Ok(Conditioner::Zero), ctx.config.sampling())?;
    let cands: Vec<&dyn SampleSource> = srcs.iter().map(|s| s as &dyn SampleSource).collect();
    let report = select_pretrain_checkpoint(&cands, tok.vocab(), &reference, n, affectune::rng::derive_seed(ctx.config.seed, "select", 0))?;
    emit(out.as_deref(), &to_json(&report))?;
    eprintln!("chosen: {}", report.chosen_checkpoint);
    Ok(())
}

fn train_encoder(ctx: &Context, dataset_path: Option<PathBuf>, out: &Path, stage: &StageArgs) -> Result<()> {
    let records = dataset(ctx, dataset_path)?;
    let cfg = with_stage(ctx.config.stage(Stage::Contrastive), stage)?;
    let policy: FreezePolicy = ctx.config.encoder.freeze_policy.parse()?;
    let texts: Vec<TextSample> = records.iter().filter(|r| r.split == Split::Contrastive).map(|r| r.text()).collect();
    if texts.len() < 2 {
        return Err(CliError::data("EmptyCorpus", "the dataset has fewer than two contrastive texts"));
    }
    if dry_run(ctx, &format!("train encoder on {} texts for {} epochs", texts.len(), cfg.epochs)) {
        return Ok(());
    }
    let vocab = TextVocab::build(texts.iter().map(|t| t.body.as_str()), ctx.config.encoder.vocab_size);
    let mut enc = Encoder::new(ctx.config.encoder_config(vocab.len()), vocab, &mut substream(ctx.config.seed, "encoder/init"))?;
    let log = train_contrastive_encoder(&mut enc, &texts, ctx.config.supcon, policy, &cfg, Some(out))?;
    enc.to_checkpoint().save(&out.join("encoder.ckpt"))?;
    write_log(&out.join("contrastive").join("log.jsonl"), &log)?;
    report_log(&log);

    let embed = |s: &[TextSample]| -> Result<Vec<(Vec<f64>, Quadrant)>> {
        s.iter().map(|t| Ok((enc.encode_text(&t.body)?.vector, t.quadrant))).collect()
    };
    let held: Vec<TextSample> = records.iter().filter(|r| matches!(r.split, Split::Validation | Split::Test)).map(|r| r.text()).collect();
    if !held.is_empty() {
        println!("held-out 1-NN quadrant accuracy {:.3}", nearest_neighbor_accuracy(&embed(&texts)?, &embed(&held)?));
    }
    println!("encoder\t{}", out.join("encoder.ckpt").display());
    Ok(())
}

fn finetune_cmd(
    ctx: &Context,
    dataset_path: Option<PathBuf>,
    decoder: &Path,
    encoder: Option<PathBuf>,
    condition: ConditionArg,
    out: &Path,
    stage: &StageArgs,
) -> Result<()> {
    let tok = tokenizer(ctx)?;
    let records = dataset(ctx, dataset_path)?;
    let cfg = with_stage(ctx.config.stage(Stage::Finetune), stage)?;
    let mut dec = load_decoder(&tok, decoder)?;
    let enc = optional_encoder(condition, encoder.as_ref())?;
    let cond = conditioner(condition, enc.as_ref(), &dec)?;
    let train: Vec<&ManifestRecord> = records.iter().filter(|r| r.split == Split::Train && r.midi_path.is_some()).collect();
    for r in &train {
        existing(Path::new(r.midi_path.as_deref().expect("filtered")))?;
    }
    if dry_run(ctx, &format!("fine-tune on {} pairs for {} epochs", train.len(), cfg.epochs)) {
        return Ok(());
    }
    let examples: Vec<FinetuneExample> = train
        .iter()
        .map(|r| Ok(FinetuneExample { tokens: tok.tokenize(&load_midi(Path::new(r.midi_path.as_deref().expect("filtered")))?), text: r.text() }))
        .collect::<Result<_>>()?;
    let sink = CheckpointSink { dir: out.to_path_buf(), vocab_hash: tok.vocab().content_hash() };
    let log = finetune(&mut dec, &cond, &examples, tok.pad_id(), &cfg, Some(&sink))?;
    write_log(&out.join("finetune").join("log.jsonl"), &log)?;
    report_log(&log);
    Ok(())
}

fn read_reference(path: &Path) -> Result<BTreeMap<Quadrant, QuadrantMetrics>> {
    Ok(serde_json::from_reader(reader(path)?)?)
}

#[allow(clippy::too_many_arguments)]
fn select_finetune(
    ctx: &Context,
    dir: &Path,
    dataset_path: Option<PathBuf>,
    encoder: Option<PathBuf>,
    condition: ConditionArg,
    reference: Option<PathBuf>,
    per_quadrant: Option<usize>,
    out: Option<PathBuf>,
) -> Result<()> {
    let tok = tokenizer(ctx)?;
    let files = checkpoint_files(dir)?;
    let records = dataset(ctx, dataset_path)?;
    let reference = read_reference(&pick(reference, &ctx.config.paths.reference, "reference")?)?;
    let enc = optional_encoder(condition, encoder.as_ref())?;
    let n = per_quadrant.unwrap_or(ctx.config.selection.per_quadrant);
    if dry_run(ctx, &format!("compare {} checkpoints on {n} files per quadrant", files.len())) {
        return Ok(());
    }
    let texts = texts_by_quadrant(&records, Split::Validation);
    let srcs = sources(&tok, &files, |d| conditioner(condition, enc.as_ref(), d), ctx.config.sampling())?;
    let cands: Vec<&dyn SampleSource> = srcs.iter().map(|s| s as &dyn SampleSource).collect();
    let report = select_finetune_checkpoint(&cands, &reference, &texts, n, affectune::rng::derive_seed(ctx.config.seed, "select", 1))?;
    emit(out.as_deref(), &to_json(&report))?;
    eprintln!("chosen: {}", report.chosen_checkpoint);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn generate_cmd(
    ctx: &Context,
    decoder: &Path,
    encoder: Option<PathBuf>,
    condition: ConditionArg,
    dataset_path: Option<PathBuf>,
    split: SplitArg,
    n: usize,
    out: &Path,
    s: &SamplingArgs,
) -> Result<()> {
    let tok = tokenizer(ctx)?;
    let dec = load_decoder(&tok, decoder)?;
    let enc = optional_encoder(condition, encoder.as_ref())?;
    let cond = conditioner(condition, enc.as_ref(), &dec)?;
    let records = dataset(ctx, dataset_path)?;
    let base = ctx.config.sampling();
    let sampling = SamplingConfig {
        temperature: s.temperature.unwrap_or(base.temperature),
        top_p: s.top_p.unwrap_or(base.top_p),
        max_tokens: s.max_tokens.unwrap_or(base.max_tokens.min(dec.config.max_seq_len + 1)),
        grammar_constrained: base.grammar_constrained && !s.unconstrained,
        seed: base.seed,
    };
    sampling.check(dec.config.max_seq_len).map_err(|e| CliError::Usage(e.to_string()))?;
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Validation => Split::Validation,
        SplitArg::Test => Split::Test,
    };
    let texts = texts_by_quadrant(&records, split);
    if dry_run(ctx, &format!("generate {n} files per quadrant into {}", out.display())) {
        return Ok(());
    }
    let samples = generate_per_quadrant(&dec.inference(), &tok, &cond, &texts, n, &sampling, Some(out))?;
    for (q, s) in &samples {
        let empty = s.iter().filter(|g| g.score.notes.is_empty()).count();
        println!("{q}\t{} files\t{empty} empty", s.len());
    }
    Ok(())
}

fn load_generated(dir: &Path) -> Result<BTreeMap<Quadrant, Vec<Score>>> {
    let entries = read_generated_manifest(existing(dir)?)?;
    let mut out: BTreeMap<Quadrant, Vec<Score>> = BTreeMap::new();
    for e in entries {
        out.entry(e.quadrant).or_default().push(load_midi(&dir.join(&e.path))?);
    }
    Ok(out)
}

fn evaluate(
    ctx: &Context,
    generated: Option<PathBuf>,
    clips: Option<PathBuf>,
    reference: Option<PathBuf>,
    out: Option<PathBuf>,
    emit_metrics: Option<PathBuf>,
) -> Result<()> {
    let reference = reference.or_else(|| ctx.config.paths.reference.clone()).map(|p| read_reference(&p)).transpose()?;
    let corpus = match (generated, clips) {
        (Some(dir), _) => load_generated(&dir)?,
        (None, Some(manifest)) => {
            let mut m: BTreeMap<Quadrant, Vec<Score>> = BTreeMap::new();
            for (p, q) in resolve_clips(&manifest)? {
                m.entry(q).or_default().push(load_midi(&p)?);
            }
            m
        }
        (None, None) => return Err(CliError::Usage("one of --generated or --clips is required".into())),
    };
    if dry_run(ctx, &format!("evaluate {} files", corpus.values().map(Vec::len).sum::<usize>())) {
        return Ok(());
    }
    let report = valence_arousal_report(&corpus, reference.as_ref())?;
    let mut text = report.to_table();
    if let Some(r) = &reference {
        let mse = standardized_mse(&report.quadrants, r)?;
        text.push_str(&format!("standardized_mse {:.6}\n", mse.mse));
    }
    match &out {
        Some(p) => {
            write_file(p, format!("{text}{}", report.to_records()))?;
            print!("{text}");
        }
        None => print!("{text}{}", report.to_records()),
    }
    if let Some(p) = emit_metrics {
        write_file(&p, to_json(&report.quadrants))?;
    }
    Ok(())
}

fn trials(ctx: &Context, generated: &Path, dataset_path: Option<PathBuf>, out: &Path) -> Result<()> {
    let entries = read_generated_manifest(existing(generated)?)?;
    let texts: Vec<TextSample> = dataset(ctx, dataset_path)?.iter().map(ManifestRecord::text).collect();
    if dry_run(ctx, &format!("build trials from {} generated files", entries.len())) {
        return Ok(());
    }
    let trials = build_trials(&texts, &entries, affectune::rng::derive_seed(ctx.config.seed, "study", 0))?;
    let mut buf = Vec::new();
    write_trials(&mut buf, &trials)?;
    write_file(out, buf)?;
    println!("{} trials", trials.len());
    Ok(())
}

fn serve(ctx: &Context, trials_path: &Path, generated: &Path, log: &Path, addr: Option<String>) -> Result<()> {
    let trials = read_trials(reader(trials_path)?)?;
    existing(generated)?;
    for t in &trials {
        for c in [&t.clip_a, &t.clip_b] {
            existing(&generated.join(&c.file))?;
        }
    }
    let addr = addr.unwrap_or_else(|| ctx.config.study.addr.clone());
    if dry_run(ctx, &format!("serve {} trials on {addr}", trials.len())) {
        return Ok(());
    }
    let state = StudyState::open(trials, log)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(server::serve(server::AppState::new(state, generated.to_path_buf()), &addr))?;
    Ok(())
}

fn score(ctx: &Context, trials_path: &Path, responses: &Path, out: Option<PathBuf>) -> Result<()> {
    let trials = read_trials(reader(trials_path)?)?;
    let responses = read_responses(reader(responses)?)?;
    if dry_run(ctx, &format!("score {} responses", responses.len())) {
        return Ok(());
    }
    let report = score_responses(&responses, &trials)?;
    emit(out.as_deref(), &to_json(&report))?;
    if out.is_some() {
        println!(
            "valence {:.3}  arousal {:.3}  joint {:.3}  (n = {})",
            report.valence_accuracy, report.arousal_accuracy, report.joint_accuracy, report.n_responses
        );
    }
    Ok(())
}

fn synth(ctx: &Context, out: &Path, cfg: SynthConfig) -> Result<()> {
    if dry_run(ctx, &format!("write synthetic corpus to {}", out.display())) {
        return Ok(());
    }
    let s = write_corpus(out, &cfg, affectune::rng::derive_seed(ctx.config.seed, "synth", 0))?;
    println!("lexicon\t{}", out.join(s.lexicon).display());
    println!("texts\t{}", out.join(s.texts).display());
    println!("clips\t{}", out.join(s.clip_manifest).display());
    Ok(())
}

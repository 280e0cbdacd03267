//! Stage functions behind the command line. Every stage reads artifacts
//! from the work directory, writes its outputs atomically and leaves a
//! `<stage>.manifest` (input and output hashes, seed, resolved config) plus
//! a `<stage>.timing` file next to them.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;

use crate::alignment::{align_spaces, save_aligned, AlignedSpace};
use crate::bt::{run_loop, summarizers, LoopContext, LoopState, SeqFunction, Lineage};
use crate::config::PipelineConfig;
use crate::corpus::{
    build_vocab, read_pairs, split_unaligned_count, synth_corpus, write_pairs, Corpus, Lexicon, Side, TextCorpus,
    TextPair, TokenId, Vocabulary,
};
use crate::decode::GenerationConfig;
use crate::embeddings::{load_embeddings, save_embeddings, train_skipgram, train_skipgram_multi};
use crate::error::{Error, Result};
use crate::init::{compute_moments, summary_weights, DbaeModel, MomentModel, PrThr};
use crate::io::{atomic_write, file_sha256, sha256_hex};
use crate::nn::Tensor;
use crate::rouge::{evaluate as rouge_eval, lead_k, EvalReport};
use crate::seq2seq::{Direction, Pair, Seq2Seq};

/// Artifact locations under `run.work_dir`.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(cfg: &PipelineConfig) -> Self {
        Workspace {
            root: cfg.run.work_dir.clone(),
        }
    }

    pub fn data(&self, file: &str) -> PathBuf {
        self.root.join("data").join(file)
    }

    pub fn emb(&self, file: &str) -> PathBuf {
        self.root.join("emb").join(file)
    }

    pub fn align_dir(&self) -> PathBuf {
        self.root.join("align")
    }

    pub fn init(&self, file: &str) -> PathBuf {
        self.root.join("init").join(file)
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id)
    }

    pub fn report(&self, run_id: &str, ext: &str) -> PathBuf {
        self.root.join("reports").join(format!("{run_id}.{ext}"))
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).display().to_string()
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn require(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(format!("{} (run `{stage}` first)", path.display())))
    }
}

fn write_lines(path: &Path, lines: &[Vec<String>]) -> Result<()> {
    let mut s = String::new();
    for l in lines {
        s.push_str(&l.join(" "));
        s.push('\n');
    }
    ensure_parent(path)?;
    atomic_write(path, s.as_bytes())
}

/// Writes `<dir>/<stage>.manifest` and `<dir>/<stage>.timing`.
fn write_manifest(
    ws: &Workspace,
    cfg: &PipelineConfig,
    dir: &Path,
    stage: &str,
    inputs: &[&Path],
    outputs: &[&Path],
    extra: &[(&str, String)],
    started: Instant,
) -> Result<()> {
    let mut s = format!("stage = {stage}\nseed = {}\n", cfg.run.seed);
    for p in inputs {
        writeln!(s, "input = {} {}", ws.rel(p), file_sha256(p)?).unwrap();
    }
    for p in outputs {
        writeln!(s, "output = {} {}", ws.rel(p), file_sha256(p)?).unwrap();
    }
    for (k, v) in extra {
        writeln!(s, "{k} = {v}").unwrap();
    }
    s.push_str("\n[config]\n");
    s.push_str(&cfg.echo());
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    atomic_write(&dir.join(format!("{stage}.manifest")), s.as_bytes())?;
    let secs = started.elapsed().as_secs_f64();
    info!("{stage} finished in {secs:.1}s");
    atomic_write(&dir.join(format!("{stage}.timing")), format!("wall_seconds = {secs:.3}\n").as_bytes())
}

/// Splits the paired source into the two unaligned training sides plus
/// validation and test pairs, and builds the vocabularies.
pub fn prepare(cfg: &PipelineConfig) -> Result<()> {
    let started = Instant::now();
    let ws = Workspace::new(cfg);
    let (pairs, source_path): (Vec<TextPair>, Option<PathBuf>) = if cfg.source() == "synthetic" {
        let synth = synth_corpus(&cfg.synth_rule(), cfg.data.synth_pairs, cfg.run.seed)?;
        (synth.aligned_pairs(), None)
    } else {
        let p = PathBuf::from(cfg.source());
        require(&p, "a paired corpus")?;
        (read_pairs(&p)?, Some(p))
    };
    let split = split_unaligned_count(pairs.len(), cfg.split_ratios(), cfg.run.seed)?;
    if split.fulltext_only.is_empty() || split.summary_only.is_empty() || split.test.is_empty() {
        return Err(Error::Config("data split leaves a training side or the test set empty".into()));
    }
    let full_lines: Vec<Vec<String>> = split.fulltext_only.iter().map(|&i| pairs[i].fulltext.clone()).collect();
    let summ_lines: Vec<Vec<String>> = split.summary_only.iter().map(|&i| pairs[i].summary.clone()).collect();
    let pick = |idx: &[usize]| idx.iter().map(|&i| pairs[i].clone()).collect::<Vec<_>>();

    let full = TextCorpus {
        name: "fulltext".into(),
        side: Side::FullText,
        lines: full_lines,
    };
    let summ = TextCorpus {
        name: "summary".into(),
        side: Side::Summary,
        lines: summ_lines,
    };
    let full_vocab = build_vocab(&[&full], cfg.data.full_vocab)?;
    let summ_vocab = build_vocab(&[&summ], cfg.data.summ_vocab)?;
    let shared = build_vocab(&[&full, &summ], cfg.data.full_vocab)?;

    let outputs = [
        ws.data("fulltext.txt"),
        ws.data("summary.txt"),
        ws.data("valid.tsv"),
        ws.data("test.tsv"),
        ws.data("split.txt"),
        ws.data("vocab.full.txt"),
        ws.data("vocab.summary.txt"),
        ws.data("vocab.shared.txt"),
    ];
    write_lines(&outputs[0], &full.lines)?;
    write_lines(&outputs[1], &summ.lines)?;
    write_pairs(&outputs[2], &pick(&split.validation))?;
    write_pairs(&outputs[3], &pick(&split.test))?;
    split.save(&outputs[4])?;
    full_vocab.save(&outputs[5])?;
    summ_vocab.save(&outputs[6])?;
    shared.save(&outputs[7])?;
    info!(
        "prepared {} full texts, {} summaries, {} validation and {} test pairs; shared vocabulary {}",
        full.len(),
        summ.len(),
        split.validation.len(),
        split.test.len(),
        shared.len()
    );
    let inputs: Vec<&Path> = source_path.iter().map(PathBuf::as_path).collect();
    let outs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    write_manifest(&ws, cfg, &ws.root.join("data"), "prepare", &inputs, &outs, &[], started)
}

/// Everything `prepare` produced, encoded against the shared vocabulary.
pub struct Prepared {
    pub shared: Vocabulary,
    pub full_vocab: Vocabulary,
    pub summ_vocab: Vocabulary,
    pub full: Corpus,
    pub summ: Corpus,
    pub full_lex: Lexicon,
    pub summ_lex: Lexicon,
    /// `(full text, summary)` pairs.
    pub valid: Vec<Pair>,
    pub test: Vec<Pair>,
}

impl Prepared {
    pub fn load(ws: &Workspace) -> Result<Self> {
        let vocab_path = ws.data("vocab.shared.txt");
        require(&vocab_path, "prepare")?;
        let shared = Vocabulary::load(&vocab_path)?;
        let full_vocab = Vocabulary::load(&ws.data("vocab.full.txt"))?;
        let summ_vocab = Vocabulary::load(&ws.data("vocab.summary.txt"))?;
        let encode = |p: Vec<TextPair>| -> Vec<Pair> {
            p.into_iter()
                .map(|t| (shared.encode(&t.fulltext), shared.encode(&t.summary)))
                .collect()
        };
        Ok(Prepared {
            full: TextCorpus::read(&ws.data("fulltext.txt"), Side::FullText)?.encode(&shared),
            summ: TextCorpus::read(&ws.data("summary.txt"), Side::Summary)?.encode(&shared),
            full_lex: Lexicon::new(&full_vocab, &shared),
            summ_lex: Lexicon::new(&summ_vocab, &shared),
            valid: encode(read_pairs(&ws.data("valid.tsv"))?),
            test: encode(read_pairs(&ws.data("test.tsv"))?),
            shared,
            full_vocab,
            summ_vocab,
        })
    }

    /// Validation summaries as a corpus.
    pub fn valid_summaries(&self) -> Result<Corpus> {
        Corpus::new(
            "validation-summary",
            Side::Summary,
            self.valid
                .iter()
                .map(|p| crate::corpus::TokenSequence::new(p.1.clone(), Side::Summary))
                .collect(),
        )
    }

    /// End-of-sentence token used when post-processing generations.
    pub fn stop(&self) -> Option<TokenId> {
        self.shared.id(".")
    }
}

/// Per-side alignment embeddings and the shared model embeddings.
pub fn train_embeddings(cfg: &PipelineConfig) -> Result<()> {
    let started = Instant::now();
    let ws = Workspace::new(cfg);
    let data = Prepared::load(&ws)?;
    let full_text = TextCorpus::read(&ws.data("fulltext.txt"), Side::FullText)?;
    let summ_text = TextCorpus::read(&ws.data("summary.txt"), Side::Summary)?;
    let outputs = [ws.emb("full.vec"), ws.emb("summary.vec"), ws.emb("shared.vec")];
    ensure_parent(&outputs[0])?;
    let mut extra = Vec::new();
    for (i, (text, vocab)) in [(&full_text, &data.full_vocab), (&summ_text, &data.summ_vocab)].into_iter().enumerate() {
        let (emb, stats) = train_skipgram(&text.encode(vocab), vocab, &cfg.skipgram(cfg.embeddings.align_dim))?;
        save_embeddings(&emb, &outputs[i])?;
        extra.push((["full_loss", "summary_loss"][i], format!("{:?}", stats.epoch_losses)));
    }
    let (emb, stats) = train_skipgram_multi(&[&data.full, &data.summ], &data.shared, &cfg.skipgram(cfg.embeddings.model_dim))?;
    save_embeddings(&emb, &outputs[2])?;
    extra.push(("shared_loss", format!("{:?}", stats.epoch_losses)));
    let inputs = [ws.data("fulltext.txt"), ws.data("summary.txt"), ws.data("vocab.shared.txt")];
    let ins: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let outs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    write_manifest(&ws, cfg, &ws.root.join("emb"), "train-embeddings", &ins, &outs, &extra, started)
}

/// Maps the full-text space onto the summary space.
pub fn align(cfg: &PipelineConfig) -> Result<()> {
    let started = Instant::now();
    let ws = Workspace::new(cfg);
    let data = Prepared::load(&ws)?;
    let (full_p, summ_p) = (ws.emb("full.vec"), ws.emb("summary.vec"));
    require(&full_p, "train-embeddings")?;
    let (src, _) = load_embeddings(&full_p, &data.full_vocab)?;
    let (tgt, _) = load_embeddings(&summ_p, &data.summ_vocab)?;
    let (space, report) = align_spaces(&src, &tgt, &cfg.align_config())?;
    fs::create_dir_all(ws.align_dir()).map_err(|e| Error::io(ws.align_dir(), e))?;
    let q = save_aligned(&space, &ws.align_dir())?;
    let extra = [
        ("anchors", report.anchors.to_string()),
        ("rank_deficient", report.rank_deficient.to_string()),
        ("rounds", format!("{:?}", report.rounds)),
    ];
    write_manifest(&ws, cfg, &ws.align_dir(), "align", &[&full_p, &summ_p], &[&q], &extra, started)
}

fn shared_embeddings(ws: &Workspace, data: &Prepared) -> Result<Tensor> {
    let p = ws.emb("shared.vec");
    require(&p, "train-embeddings")?;
    Ok(load_embeddings(&p, &data.shared)?.0.vectors)
}

pub fn init_prthr(cfg: &PipelineConfig) -> Result<()> {
    let started = Instant::now();
    let ws = Workspace::new(cfg);
    let data = Prepared::load(&ws)?;
    let q = ws.align_dir().join("q.txt");
    require(&q, "align")?;
    let space = AlignedSpace::load(&q, &data.full_vocab, &data.summ_vocab)?;
    let prthr = PrThr::new(&space, &data.shared, cfg.prthr_config())?;
    let out = ws.init("prthr.tsv");
    ensure_parent(&out)?;
    prthr.save(&out, &data.shared)?;
    write_manifest(&ws, cfg, &ws.root.join("init"), "init-prthr", &[&q], &[&out], &[], started)
}

pub fn init_dbae(cfg: &PipelineConfig) -> Result<()> {
    let started = Instant::now();
    let ws = Workspace::new(cfg);
    let data = Prepared::load(&ws)?;
    let emb = shared_embeddings(&ws, &data)?;
    let dcfg = cfg.dbae_config();
    let weight_cap = dcfg.weight_cap;
    let mut model = DbaeModel::new(dcfg, &emb, data.summ_lex.clone(), cfg.run.seed)?;
    let valid = data.valid_summaries()?;
    let report = model.train(&data.summ, (!valid.is_empty()).then_some(&valid))?;
    let stats = compute_moments(&data.full, &data.summ, data.shared.len())?;
    model.weights = Some(summary_weights(&stats, &data.summ_lex, weight_cap));
    let out = ws.init("dbae.ckpt");
    ensure_parent(&out)?;
    model.save(&out)?;
    let extra = [("train_losses", format!("{:?}", report.train_losses))];
    let ins = [ws.emb("shared.vec"), ws.data("summary.txt"), ws.data("fulltext.txt")];
    let ins: Vec<&Path> = ins.iter().map(PathBuf::as_path).collect();
    write_manifest(&ws, cfg, &ws.root.join("init"), "init-dbae", &ins, &[&out], &extra, started)
}

pub fn init_moments(cfg: &PipelineConfig) -> Result<()> {
    let started = Instant::now();
    let ws = Workspace::new(cfg);
    let data = Prepared::load(&ws)?;
    let emb = shared_embeddings(&ws, &data)?;
    let stats = compute_moments(&data.full, &data.summ, data.shared.len())?;
    let mut model = MomentModel::new(cfg.moment_config(), &emb, data.summ_lex.clone(), cfg.run.seed)?;
    let report = model.train(&data.full, &stats)?;
    let out = ws.init("moments.ckpt");
    ensure_parent(&out)?;
    model.save(&out)?;
    let extra = [("train_losses", format!("{:?}", report.train_losses))];
    let ins = [ws.emb("shared.vec"), ws.data("summary.txt"), ws.data("fulltext.txt")];
    let ins: Vec<&Path> = ins.iter().map(PathBuf::as_path).collect();
    write_manifest(&ws, cfg, &ws.root.join("init"), "init-moments", &ins, &[&out], &extra, started)
}

/// The three trained initializers.
pub struct Initializers {
    pub prthr: Option<PrThr>,
    pub dbae: Option<DbaeModel>,
    pub moments: Option<MomentModel>,
    paths: Vec<(Lineage, PathBuf)>,
}

impl Initializers {
    /// Loads the initializers of `lineages`.
    pub fn load(ws: &Workspace, data: &Prepared, lineages: &[Lineage]) -> Result<Self> {
        let mut out = Initializers {
            prthr: None,
            dbae: None,
            moments: None,
            paths: Vec::new(),
        };
        for &l in lineages {
            let (path, stage) = match l {
                Lineage::PrThr => (ws.init("prthr.tsv"), "init-prthr"),
                Lineage::Dbae => (ws.init("dbae.ckpt"), "init-dbae"),
                Lineage::Mu1 => (ws.init("moments.ckpt"), "init-moments"),
                Lineage::All => continue,
            };
            require(&path, stage)?;
            match l {
                Lineage::PrThr => out.prthr = Some(PrThr::load(&path, &data.shared)?),
                Lineage::Dbae => out.dbae = Some(DbaeModel::load(&path)?),
                _ => out.moments = Some(MomentModel::load(&path)?),
            }
            out.paths.push((l, path));
        }
        Ok(out)
    }

    /// `(lineage, function, file hash)` in lineage order.
    pub fn functions(&self) -> Result<Vec<(Lineage, &dyn SeqFunction, String)>> {
        let mut v: Vec<(Lineage, &dyn SeqFunction, String)> = Vec::new();
        for (l, path) in &self.paths {
            let f: &dyn SeqFunction = match l {
                Lineage::PrThr => self.prthr.as_ref().unwrap(),
                Lineage::Dbae => self.dbae.as_ref().unwrap(),
                _ => self.moments.as_ref().unwrap(),
            };
            v.push((*l, f, file_sha256(path)?));
        }
        v.sort_by_key(|(l, _, _)| *l);
        Ok(v)
    }
}

/// Runs the back-translation loop for `run.id`, resuming completed steps.
pub fn bt_loop(cfg: &PipelineConfig) -> Result<LoopState> {
    let started = Instant::now();
    let ws = Workspace::new(cfg);
    let data = Prepared::load(&ws)?;
    let emb = shared_embeddings(&ws, &data)?;
    let inits = Initializers::load(&ws, &data, &cfg.lineages()?)?;
    let ctx = LoopContext {
        vocab: &data.shared,
        full: &data.full,
        summ: &data.summ,
        full_lex: &data.full_lex,
        summ_lex: &data.summ_lex,
        embeddings: &emb,
        initializers: inits.functions()?,
        stop: data.stop(),
    };
    let run_dir = ws.run_dir(&cfg.run.id);
    let state = run_loop(&run_dir, &ctx, &cfg.bt_config()?, cfg.bt.max_iteration)?;
    let registry = run_dir.join("registry.tsv");
    let extra = [("max_iteration", cfg.bt.max_iteration.to_string())];
    write_manifest(&ws, cfg, &run_dir, "loop", &[&ws.emb("shared.vec")], &[&registry], &extra, started)?;
    Ok(state)
}

/// Trains one seq2seq model on a `fulltext<TAB>summary` file.
pub fn train_seq2seq(cfg: &PipelineConfig, pairs_path: &Path, direction: Direction, out: &Path) -> Result<Seq2Seq> {
    let started = Instant::now();
    let ws = Workspace::new(cfg);
    let data = Prepared::load(&ws)?;
    let emb = shared_embeddings(&ws, &data)?;
    require(pairs_path, "a paired training file")?;
    let pairs: Vec<Pair> = read_pairs(pairs_path)?
        .into_iter()
        .map(|t| {
            let (f, s) = (data.shared.encode(&t.fulltext), data.shared.encode(&t.summary));
            match direction {
                Direction::FullToSummary => (f, s),
                Direction::SummaryToFull => (s, f),
            }
        })
        .collect();
    let (src, tgt) = match direction {
        Direction::FullToSummary => (&data.full_lex, &data.summ_lex),
        Direction::SummaryToFull => (&data.summ_lex, &data.full_lex),
    };
    let mut model = Seq2Seq::new(cfg.seq2seq_config(), direction, src.clone(), tgt.clone(), &emb, cfg.run.seed)?;
    let report = model.train(&pairs, None)?;
    ensure_parent(out)?;
    model.save(out)?;
    let dir = out.parent().unwrap_or(Path::new("."));
    let stage = format!("train-seq2seq.{}", out.file_name().and_then(|n| n.to_str()).unwrap_or("model"));
    let extra = [
        ("direction", direction.to_string()),
        ("train_losses", format!("{:?}", report.train_losses)),
    ];
    write_manifest(&ws, cfg, dir, &stage, &[pairs_path, &ws.emb("shared.vec")], &[out], &extra, started)?;
    Ok(model)
}

/// How `generate` decodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GenerateMode {
    Beam,
    Sample,
}

/// Applies a model (an initializer name or a seq2seq checkpoint path) to
/// one sequence per line of `input`.
pub fn generate(cfg: &PipelineConfig, model: &str, input: &Path, output: &Path, mode: GenerateMode) -> Result<()> {
    let started = Instant::now();
    let ws = Workspace::new(cfg);
    let data = Prepared::load(&ws)?;
    require(input, "an input file")?;
    let text = TextCorpus::read(input, Side::FullText)?;
    let seqs: Vec<Vec<TokenId>> = text.lines.iter().map(|l| data.shared.encode(l)).collect();
    let refs: Vec<&[TokenId]> = seqs.iter().map(Vec::as_slice).collect();
    let lineage = model.parse::<Lineage>().ok().filter(|l| *l != Lineage::All);
    let outputs = match lineage {
        Some(l) => {
            let inits = Initializers::load(&ws, &data, &[l])?;
            let fs = inits.functions()?;
            fs[0].1.apply(&refs, 0)?
        }
        None => {
            let path = PathBuf::from(model);
            require(&path, "train-seq2seq or loop")?;
            let m = Seq2Seq::load(&path)?;
            let out_side = m.direction.output_side();
            let gcfg = match (mode, out_side) {
                (GenerateMode::Beam, Side::Summary) => GenerationConfig::beam(cfg.eval.beam, cfg.generation.max_summ),
                (GenerateMode::Beam, Side::FullText) => GenerationConfig::beam(cfg.eval.beam, cfg.generation.max_full),
                (GenerateMode::Sample, side) => cfg.generation().sampling(side, cfg.run.seed),
            };
            m.generate(&refs, 0, &gcfg)?
        }
    };
    let lines: Vec<Vec<String>> = outputs
        .iter()
        .map(|o| o.iter().map(|&t| data.shared.token(t).to_string()).collect())
        .collect();
    write_lines(output, &lines)?;
    let dir = output.parent().unwrap_or(Path::new("."));
    let stage = format!("generate.{}", output.file_name().and_then(|n| n.to_str()).unwrap_or("out"));
    let extra = [("model", model.to_string()), ("mode", format!("{mode:?}"))];
    write_manifest(&ws, cfg, dir, &stage, &[input], &[output], &extra, started)
}

fn beam_summaries(model: &Seq2Seq, cfg: &PipelineConfig, inputs: &[&[TokenId]]) -> Result<Vec<Vec<TokenId>>> {
    model.generate(inputs, 0, &GenerationConfig::beam(cfg.eval.beam, cfg.eval.max_len))
}

/// Scores Lead-k, the initializers and every summarizer of the run on the
/// test pairs, and writes the report as text and TSV.
pub fn evaluate(cfg: &PipelineConfig) -> Result<EvalReport> {
    let started = Instant::now();
    let ws = Workspace::new(cfg);
    let data = Prepared::load(&ws)?;
    let test_path = ws.data("test.tsv");
    let mut report = EvalReport::new(&cfg.run.id, &file_sha256(&test_path)?);
    let k = cfg.eval.lead_k;
    report.push(
        &format!("Lead-{k}"),
        rouge_eval(|xs| Ok(xs.iter().map(|x| lead_k(x, k)).collect()), &data.test)?,
    )?;
    let inits = Initializers::load(&ws, &data, &cfg.lineages()?)?;
    for (l, f, _) in inits.functions()? {
        report.push(&format!("{l}-0"), rouge_eval(|xs| f.apply(xs, 0), &data.test)?)?;
    }
    let run_dir = ws.run_dir(&cfg.run.id);
    if run_dir.join("registry.tsv").exists() {
        let state = LoopState::open(&run_dir, cfg.run.seed)?;
        for (name, l, it) in summarizers(&state) {
            let model = state
                .load_model(l, it)?
                .ok_or_else(|| Error::MissingArtifact(format!("{name} checkpoint")))?;
            let score = rouge_eval(|xs| beam_summaries(&model, cfg, xs), &data.test)?;
            info!("{name}: R-L {:.2}", 100.0 * score.rl.f);
            report.push(&name, score)?;
        }
    }
    let tsv = ws.report(&cfg.run.id, "tsv");
    ensure_parent(&tsv)?;
    report.save(&tsv)?;
    let txt = ws.report(&cfg.run.id, "txt");
    atomic_write(&txt, report.to_text().as_bytes())?;
    write_manifest(&ws, cfg, &ws.root.join("reports"), &format!("evaluate.{}", cfg.run.id), &[&test_path], &[&tsv], &[], started)?;
    Ok(report)
}

/// A comparison table of the run's systems: baseline, initializers, then
/// summarizers by iteration, followed by a lineage-by-iteration R-L grid.
pub fn report(cfg: &PipelineConfig) -> Result<String> {
    let ws = Workspace::new(cfg);
    let path = ws.report(&cfg.run.id, "tsv");
    require(&path, "evaluate")?;
    Ok(format_report(&EvalReport::load(&path)?))
}

fn row_key(name: &str) -> (usize, usize, String) {
    match name.rsplit_once('-').and_then(|(l, i)| Some((l.parse::<Lineage>().ok()?, i.parse::<usize>().ok()?))) {
        Some((l, it)) => (1 + usize::from(it > 0), it * 10 + l as usize, name.to_string()),
        None => (0, 0, name.to_string()),
    }
}

pub fn format_report(report: &EvalReport) -> String {
    let mut rows: Vec<&(String, crate::rouge::RougeScore)> = report.rows.iter().collect();
    rows.sort_by_key(|(n, _)| row_key(n));
    let width = rows.iter().map(|(n, _)| n.len() + 2).max().unwrap_or(8).max(8);
    let mut s = format!("run {}  test {}\n\n", report.run_id, &report.test_hash[..12.min(report.test_hash.len())]);
    writeln!(s, "{:<width$}{:>6}{:>8}{:>8}{:>8}", "system", "Sup.", "R-1", "R-2", "R-L").unwrap();
    let mut group = None;
    for (name, r) in &rows {
        let g = row_key(name).0;
        if group.is_some() && group != Some(g) {
            writeln!(s, "{}", "-".repeat(width + 30)).unwrap();
        }
        group = Some(g);
        let label = match row_key(name).0 {
            0 => name.clone(),
            _ => {
                let (l, i) = name.rsplit_once('-').unwrap();
                format!("({l})-{i}")
            }
        };
        writeln!(
            s,
            "{label:<width$}{:>6}{:>8.2}{:>8.2}{:>8.2}",
            0,
            100.0 * r.r1.f,
            100.0 * r.r2.f,
            100.0 * r.rl.f
        )
        .unwrap();
    }
    let iters: Vec<usize> = {
        let mut v: Vec<usize> = rows
            .iter()
            .filter_map(|(n, _)| {
                let (l, it) = n.rsplit_once('-')?;
                l.parse::<Lineage>().ok()?;
                it.parse().ok()
            })
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    if !iters.is_empty() {
        write!(s, "\nR-L by iteration\n{:<8}", "").unwrap();
        for it in &iters {
            write!(s, "{:>8}", it).unwrap();
        }
        s.push('\n');
        for l in [Lineage::PrThr, Lineage::Dbae, Lineage::Mu1, Lineage::All] {
            write!(s, "{:<8}", l.to_string()).unwrap();
            for it in &iters {
                match report.get(&format!("{l}-{it}")) {
                    Some(r) => write!(s, "{:>8.2}", 100.0 * r.rl.f).unwrap(),
                    None => write!(s, "{:>8}", "-").unwrap(),
                }
            }
            s.push('\n');
        }
    }
    s
}

/// Every stage in order: prepare through evaluate.
pub fn run_all(cfg: &PipelineConfig) -> Result<EvalReport> {
    prepare(cfg)?;
    train_embeddings(cfg)?;
    align(cfg)?;
    let lineages = cfg.lineages()?;
    if lineages.contains(&Lineage::PrThr) {
        init_prthr(cfg)?;
    }
    if lineages.contains(&Lineage::Dbae) {
        init_dbae(cfg)?;
    }
    if lineages.contains(&Lineage::Mu1) {
        init_moments(cfg)?;
    }
    bt_loop(cfg)?;
    evaluate(cfg)
}

/// Hash of a text, for comparing reports and manifests in tests.
pub fn text_hash(s: &str) -> String {
    sha256_hex(s.as_bytes())
}

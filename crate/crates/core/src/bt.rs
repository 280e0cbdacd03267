//! Iterated back-translation: per-initializer lineages of alternating
//! expanders and summarizers, the mixed (All) summarizers, and the on-disk
//! run registry that makes the loop resumable.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::info;

use crate::corpus::{read_pairs, write_pairs, Corpus, Side, TextPair, TokenId, Vocabulary};
use crate::decode::{sequence_seed, GenerationConfig};
use crate::error::{Error, Result};
use crate::init::{DbaeModel, MomentModel, PrThr};
use crate::io::{atomic_write, file_sha256, read_utf8_lines, sha256_hex};
use crate::nn::Tensor;
use crate::seq2seq::{postprocess, Direction, Pair, Seq2Seq, Seq2SeqConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Lineage {
    PrThr,
    Dbae,
    Mu1,
    All,
}

/// The three initializer lineages, in mixing order.
pub const INITIALIZER_LINEAGES: [Lineage; 3] = [Lineage::PrThr, Lineage::Dbae, Lineage::Mu1];

impl Lineage {
    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Lineage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Lineage::PrThr => "PrThr",
            Lineage::Dbae => "DBAE",
            Lineage::Mu1 => "Mu1",
            Lineage::All => "All",
        })
    }
}

impl FromStr for Lineage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "PrThr" => Ok(Lineage::PrThr),
            "DBAE" => Ok(Lineage::Dbae),
            "Mu1" => Ok(Lineage::Mu1),
            "All" => Ok(Lineage::All),
            other => Err(Error::format("lineage", format!("unknown lineage {other:?}"))),
        }
    }
}

/// Anything that maps sequences of one side to sequences of the other.
pub trait SeqFunction {
    fn direction(&self) -> Direction;

    /// Outputs for `inputs`; `first_index` is the global index of
    /// `inputs[0]`, for per-sequence seeding.
    fn apply(&self, inputs: &[&[TokenId]], first_index: usize) -> Result<Vec<Vec<TokenId>>>;
}

impl SeqFunction for PrThr {
    fn direction(&self) -> Direction {
        Direction::FullToSummary
    }

    fn apply(&self, inputs: &[&[TokenId]], _: usize) -> Result<Vec<Vec<TokenId>>> {
        Ok(inputs.iter().map(|s| self.summarize(s)).collect())
    }
}

impl SeqFunction for DbaeModel {
    fn direction(&self) -> Direction {
        Direction::FullToSummary
    }

    fn apply(&self, inputs: &[&[TokenId]], _: usize) -> Result<Vec<Vec<TokenId>>> {
        let (out, fallbacks) = self.summarize(inputs)?;
        if fallbacks > 0 {
            info!("dbae: {fallbacks} inputs fell back to unweighted pooling");
        }
        Ok(out)
    }
}

impl SeqFunction for MomentModel {
    fn direction(&self) -> Direction {
        Direction::FullToSummary
    }

    fn apply(&self, inputs: &[&[TokenId]], _: usize) -> Result<Vec<Vec<TokenId>>> {
        self.extract(inputs)
    }
}

/// A seq2seq model paired with a decoding configuration.
pub struct Decoding<'a> {
    pub model: &'a Seq2Seq,
    pub cfg: GenerationConfig,
}

impl SeqFunction for Decoding<'_> {
    fn direction(&self) -> Direction {
        self.model.direction
    }

    fn apply(&self, inputs: &[&[TokenId]], first_index: usize) -> Result<Vec<Vec<TokenId>>> {
        self.model.generate(inputs, first_index, &self.cfg)
    }
}

/// Sampling settings for artificial data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerationSettings {
    pub k: usize,
    pub min_full: usize,
    pub max_full: usize,
    pub max_summ: usize,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        GenerationSettings {
            k: 15,
            min_full: 16,
            max_full: 50,
            max_summ: 12,
        }
    }
}

impl GenerationSettings {
    /// Top-k sampling for outputs on `side`.
    pub fn sampling(&self, side: Side, seed: u64) -> GenerationConfig {
        match side {
            Side::FullText => GenerationConfig::sampling(self.k, self.min_full, self.max_full, seed),
            Side::Summary => GenerationConfig::sampling(self.k, 0, self.max_summ, seed),
        }
    }
}

/// Generated inputs paired with real outputs. `direction` is the direction
/// of the model trained on it.
#[derive(Clone, Debug, PartialEq)]
pub struct ArtificialDataset {
    pub lineage: Lineage,
    pub iteration: usize,
    pub direction: Direction,
    pub pairs: Vec<Pair>,
    /// Real sequences whose generated counterpart was empty.
    pub dropped: usize,
}

impl ArtificialDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pairs as `fulltext<TAB>summary` text.
    pub fn text_pairs(&self, vocab: &Vocabulary) -> Vec<TextPair> {
        let words = |ids: &[TokenId]| ids.iter().map(|&i| vocab.token(i).to_string()).collect();
        self.pairs
            .iter()
            .map(|(input, output)| {
                let (f, s) = match self.direction {
                    Direction::FullToSummary => (input, output),
                    Direction::SummaryToFull => (output, input),
                };
                TextPair {
                    fulltext: words(f),
                    summary: words(s),
                }
            })
            .collect()
    }

    pub fn to_tsv(&self, vocab: &Vocabulary) -> Vec<u8> {
        let mut s = String::new();
        for p in self.text_pairs(vocab) {
            s.push_str(&p.fulltext.join(" "));
            s.push('\t');
            s.push_str(&p.summary.join(" "));
            s.push('\n');
        }
        s.into_bytes()
    }

    pub fn save(&self, path: &Path, vocab: &Vocabulary) -> Result<()> {
        write_pairs(path, &self.text_pairs(vocab))
    }

    pub fn load(
        path: &Path,
        vocab: &Vocabulary,
        lineage: Lineage,
        iteration: usize,
        direction: Direction,
    ) -> Result<Self> {
        let pairs = read_pairs(path)?
            .into_iter()
            .map(|p| {
                let (f, s) = (vocab.encode(&p.fulltext), vocab.encode(&p.summary));
                match direction {
                    Direction::FullToSummary => (f, s),
                    Direction::SummaryToFull => (s, f),
                }
            })
            .collect();
        Ok(ArtificialDataset {
            lineage,
            iteration,
            direction,
            pairs,
            dropped: 0,
        })
    }

    /// `(min, mean, max)` length of the generated side.
    pub fn input_lengths(&self) -> (usize, f64, usize) {
        let lens: Vec<usize> = self.pairs.iter().map(|p| p.0.len()).collect();
        let min = lens.iter().copied().min().unwrap_or(0);
        let max = lens.iter().copied().max().unwrap_or(0);
        let mean = lens.iter().sum::<usize>() as f64 / lens.len().max(1) as f64;
        (min, mean, max)
    }
}

/// One pair per real sequence: `(postprocess(f(real)), real)`. Empty
/// generated inputs are dropped and counted.
pub fn make_dataset(
    f: &dyn SeqFunction,
    real: &Corpus,
    stop: Option<TokenId>,
    lineage: Lineage,
    iteration: usize,
) -> Result<ArtificialDataset> {
    let direction = f.direction();
    if real.side != direction.input_side() {
        return Err(Error::InvalidArgument(format!(
            "a {direction} model cannot consume a {:?} corpus",
            real.side
        )));
    }
    let inputs: Vec<&[TokenId]> = real.sequences.iter().map(|s| s.ids.as_slice()).collect();
    let generated = f.apply(&inputs, 0)?;
    if generated.len() != inputs.len() {
        return Err(Error::Shape(format!("{} outputs for {} inputs", generated.len(), inputs.len())));
    }
    let mut pairs = Vec::with_capacity(inputs.len());
    let mut dropped = 0;
    for (g, r) in generated.into_iter().zip(&real.sequences) {
        let g = postprocess(&g, stop);
        if g.is_empty() {
            dropped += 1;
        } else {
            pairs.push((g, r.ids.clone()));
        }
    }
    if dropped > 0 {
        info!("{lineage}/{iteration}: dropped {dropped} empty generated inputs");
    }
    Ok(ArtificialDataset {
        lineage,
        iteration,
        direction: direction.reverse(),
        pairs,
        dropped,
    })
}

/// Concatenates the three lineages' summarizer datasets of one odd iteration.
pub fn mix_all(parts: &[&ArtificialDataset]) -> Result<ArtificialDataset> {
    let lineages: Vec<Lineage> = parts.iter().map(|d| d.lineage).collect();
    if lineages != INITIALIZER_LINEAGES {
        return Err(Error::MissingArtifact(format!(
            "the mixed dataset needs PrThr, DBAE and Mu1 datasets in that order, got {lineages:?}"
        )));
    }
    let iteration = parts[0].iteration;
    for d in parts {
        if d.is_empty() {
            return Err(Error::Empty(format!("{}/{} dataset", d.lineage, d.iteration)));
        }
        if d.iteration != iteration || d.direction != Direction::FullToSummary {
            return Err(Error::InvalidArgument(
                "mixed datasets must be summarizer datasets of one iteration".into(),
            ));
        }
    }
    Ok(ArtificialDataset {
        lineage: Lineage::All,
        iteration,
        direction: Direction::FullToSummary,
        pairs: parts.iter().flat_map(|d| d.pairs.iter().cloned()).collect(),
        dropped: parts.iter().map(|d| d.dropped).sum(),
    })
}

/// Direction of the model at `iteration` of an initializer lineage.
pub fn model_direction(iteration: usize) -> Direction {
    if iteration % 2 == 0 {
        Direction::FullToSummary
    } else {
        Direction::SummaryToFull
    }
}

pub const MODEL_FILE: &str = "model.ckpt";
pub const MODEL_MANIFEST: &str = "model.manifest";
pub const DATASET_FILE: &str = "dataset.tsv";
pub const DATASET_MANIFEST: &str = "dataset.manifest";
const REGISTRY_FILE: &str = "registry.tsv";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegistryEntry {
    pub lineage: Lineage,
    pub iteration: usize,
    pub file: String,
    pub sha256: String,
}

impl RegistryEntry {
    pub fn relative_path(&self) -> PathBuf {
        Path::new(&self.lineage.to_string())
            .join(self.iteration.to_string())
            .join(&self.file)
    }
}

/// Write-once index of the artifacts under a run directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Registry {
    pub root: PathBuf,
    pub entries: Vec<RegistryEntry>,
}

impl Registry {
    /// Opens (or starts) the registry of `root` and checks every recorded
    /// file against its hash.
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = root.join(REGISTRY_FILE);
        let mut entries = Vec::new();
        if path.exists() {
            for (i, line) in read_utf8_lines(&path)?.iter().enumerate() {
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let cols: Vec<&str> = line.split('\t').collect();
                let bad = || Error::format("registry", format!("{}: line {}", path.display(), i + 1));
                if cols.len() != 4 {
                    return Err(bad());
                }
                entries.push(RegistryEntry {
                    lineage: cols[0].parse()?,
                    iteration: cols[1].parse().map_err(|_| bad())?,
                    file: cols[2].to_string(),
                    sha256: cols[3].to_string(),
                });
            }
        }
        let reg = Registry {
            root: root.to_path_buf(),
            entries,
        };
        reg.verify()?;
        Ok(reg)
    }

    pub fn verify(&self) -> Result<()> {
        for e in &self.entries {
            let p = self.root.join(e.relative_path());
            let actual = if p.exists() { file_sha256(&p)? } else { "missing".into() };
            if actual != e.sha256 {
                return Err(Error::format(
                    "registry",
                    format!("{} does not match its recorded hash; refusing to resume", p.display()),
                ));
            }
        }
        Ok(())
    }

    pub fn find(&self, lineage: Lineage, iteration: usize, file: &str) -> Option<&RegistryEntry> {
        self.entries
            .iter()
            .find(|e| e.lineage == lineage && e.iteration == iteration && e.file == file)
    }

    pub fn path(&self, e: &RegistryEntry) -> PathBuf {
        self.root.join(e.relative_path())
    }

    /// Writes a new artifact. Registered artifacts are never replaced.
    pub fn put(&mut self, lineage: Lineage, iteration: usize, file: &str, bytes: &[u8]) -> Result<RegistryEntry> {
        if self.find(lineage, iteration, file).is_some() {
            return Err(Error::InvalidArgument(format!(
                "{lineage}/{iteration}/{file} is already registered"
            )));
        }
        let entry = RegistryEntry {
            lineage,
            iteration,
            file: file.to_string(),
            sha256: sha256_hex(bytes),
        };
        let path = self.path(&entry);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        atomic_write(&path, bytes)?;
        self.entries.push(entry.clone());
        atomic_write(&self.root.join(REGISTRY_FILE), self.to_text().as_bytes())?;
        Ok(entry)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# lineage\titeration\tfile\tsha256\n");
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\t{}\t{}\n", e.lineage, e.iteration, e.file, e.sha256));
        }
        s
    }
}

/// How the (All) summarizers after iteration 2 get their data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AllMode {
    /// Mix the per-lineage expander datasets at every odd iteration.
    PerLineage,
    /// Continue a separate (All) chain from the (All)-2 summarizer.
    Chained,
}

impl FromStr for AllMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-lineage" => Ok(AllMode::PerLineage),
            "chained" => Ok(AllMode::Chained),
            other => Err(Error::Config(format!("unknown all_mode {other:?}"))),
        }
    }
}

impl fmt::Display for AllMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AllMode::PerLineage => "per-lineage",
            AllMode::Chained => "chained",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BtConfig {
    pub seq2seq: Seq2SeqConfig,
    pub generation: GenerationSettings,
    pub seed: u64,
    pub all_mode: AllMode,
    /// Share of each artificial dataset held out for early stopping.
    pub valid_frac: f64,
    /// Resolved configuration text copied into every manifest.
    pub config_echo: String,
}

impl Default for BtConfig {
    fn default() -> Self {
        BtConfig {
            seq2seq: Seq2SeqConfig::default(),
            generation: GenerationSettings::default(),
            seed: 1,
            all_mode: AllMode::PerLineage,
            valid_frac: 0.0,
            config_echo: String::new(),
        }
    }
}

/// Read-only inputs shared by every lineage.
pub struct LoopContext<'a> {
    pub vocab: &'a Vocabulary,
    pub full: &'a Corpus,
    pub summ: &'a Corpus,
    pub full_lex: &'a crate::corpus::Lexicon,
    pub summ_lex: &'a crate::corpus::Lexicon,
    /// Shared pre-trained embeddings, one row per shared id.
    pub embeddings: &'a Tensor,
    /// Iteration-0 models with a hash identifying each.
    pub initializers: Vec<(Lineage, &'a dyn SeqFunction, String)>,
    /// End-of-sentence token for post-processing.
    pub stop: Option<TokenId>,
}

impl LoopContext<'_> {
    fn real(&self, side: Side) -> &Corpus {
        match side {
            Side::FullText => self.full,
            Side::Summary => self.summ,
        }
    }

    fn initializer(&self, lineage: Lineage) -> Result<(&dyn SeqFunction, &str)> {
        self.initializers
            .iter()
            .find(|(l, _, _)| *l == lineage)
            .map(|(_, f, h)| (*f, h.as_str()))
            .ok_or_else(|| Error::MissingArtifact(format!("{lineage} initializer")))
    }

    fn lineages(&self) -> Vec<Lineage> {
        INITIALIZER_LINEAGES
            .into_iter()
            .filter(|l| self.initializers.iter().any(|(x, _, _)| x == l))
            .collect()
    }
}

/// The run directory, its registry and the global seed.
pub struct LoopState {
    pub seed: u64,
    pub registry: Registry,
}

impl LoopState {
    pub fn open(run_dir: &Path, seed: u64) -> Result<Self> {
        Ok(LoopState {
            seed,
            registry: Registry::open(run_dir)?,
        })
    }

    fn seed_for(&self, lineage: Lineage, iteration: usize, purpose: u64) -> u64 {
        sequence_seed(sequence_seed(self.seed, lineage.index()), 4 * iteration as u64 + purpose)
    }

    /// Sampling seed used to generate the dataset of `lineage` at `iteration`.
    pub fn generation_seed(&self, lineage: Lineage, iteration: usize) -> u64 {
        self.seed_for(lineage, iteration, 2)
    }

    /// Highest iteration with a registered model (0 once the initializer's
    /// dataset exists).
    pub fn current_iteration(&self, lineage: Lineage) -> Option<usize> {
        let models = self
            .registry
            .entries
            .iter()
            .filter(|e| e.lineage == lineage && e.file == MODEL_FILE)
            .map(|e| e.iteration)
            .max();
        models.or_else(|| self.registry.find(lineage, 0, DATASET_FILE).map(|_| 0))
    }

    fn dataset_direction(lineage: Lineage, iteration: usize) -> Direction {
        let _ = lineage;
        model_direction(iteration).reverse()
    }

    pub fn load_dataset(&self, vocab: &Vocabulary, lineage: Lineage, iteration: usize) -> Result<Option<ArtificialDataset>> {
        match self.registry.find(lineage, iteration, DATASET_FILE) {
            None => Ok(None),
            Some(e) => ArtificialDataset::load(
                &self.registry.path(e),
                vocab,
                lineage,
                iteration,
                Self::dataset_direction(lineage, iteration),
            )
            .map(Some),
        }
    }

    pub fn load_model(&self, lineage: Lineage, iteration: usize) -> Result<Option<Seq2Seq>> {
        match self.registry.find(lineage, iteration, MODEL_FILE) {
            None => Ok(None),
            Some(e) => Seq2Seq::load(&self.registry.path(e)).map(Some),
        }
    }

    fn manifest_head(&self, cfg: &BtConfig, artifact: &str, lineage: Lineage, iteration: usize, seed: u64) -> String {
        format!(
            "artifact = {artifact}\nlineage = {lineage}\niteration = {iteration}\nglobal_seed = {}\nseed = {seed}\n",
            self.seed
        ) + &format!("valid_frac = {}\nall_mode = {}\n", cfg.valid_frac, cfg.all_mode)
    }

    fn input_ref(&self, lineage: Lineage, iteration: usize, file: &str) -> String {
        self.registry
            .find(lineage, iteration, file)
            .map(|e| format!("{} {}", e.relative_path().display(), e.sha256))
            .unwrap_or_else(|| "none".into())
    }

    fn timing(&self, what: &str, secs: f64) {
        let path = self.registry.root.join("timing.log");
        let line = format!("{what}\t{secs:.3}\n");
        let mut prev = fs::read_to_string(&path).unwrap_or_default();
        prev.push_str(&line);
        let _ = fs::write(&path, prev);
    }

    /// The training data of `lineage`'s model at `iteration`, plus the
    /// manifest lines naming where it came from.
    fn training_data(&mut self, ctx: &LoopContext, cfg: &BtConfig, lineage: Lineage, iteration: usize) -> Result<(ArtificialDataset, String)> {
        let mixed = lineage == Lineage::All && (iteration == 2 || cfg.all_mode == AllMode::PerLineage);
        if mixed {
            if iteration % 2 != 0 || iteration < 2 {
                return Err(Error::InvalidArgument("(All) summarizers exist only at even iterations >= 2".into()));
            }
            let mut parts = Vec::new();
            let mut refs = String::new();
            for l in INITIALIZER_LINEAGES {
                if !ctx.lineages().contains(&l) {
                    return Err(Error::MissingArtifact(format!("{l} lineage for the mixed dataset")));
                }
                parts.push(self.ensure_dataset(ctx, cfg, l, iteration - 1)?);
                refs.push_str(&format!("input = {}\n", self.input_ref(l, iteration - 1, DATASET_FILE)));
            }
            let refs_parts: Vec<&ArtificialDataset> = parts.iter().collect();
            let mut mixed = mix_all(&refs_parts)?;
            mixed.iteration = iteration - 1;
            Ok((mixed, refs))
        } else {
            let d = self.ensure_dataset(ctx, cfg, lineage, iteration - 1)?;
            let refs = format!("input = {}\n", self.input_ref(lineage, iteration - 1, DATASET_FILE));
            Ok((d, refs))
        }
    }

    /// Loads or trains the model of `lineage` at `iteration >= 1`.
    pub fn ensure_model(&mut self, ctx: &LoopContext, cfg: &BtConfig, lineage: Lineage, iteration: usize) -> Result<Seq2Seq> {
        if iteration == 0 {
            return Err(Error::InvalidArgument("iteration-0 models are the initializers".into()));
        }
        if let Some(m) = self.load_model(lineage, iteration)? {
            return Ok(m);
        }
        let (data, refs) = self.training_data(ctx, cfg, lineage, iteration)?;
        let direction = model_direction(iteration);
        let start = Instant::now();
        let seed = self.seed_for(lineage, iteration, 1);
        let (src_lex, tgt_lex) = match direction {
            Direction::FullToSummary => (ctx.full_lex, ctx.summ_lex),
            Direction::SummaryToFull => (ctx.summ_lex, ctx.full_lex),
        };
        let mut s2s_cfg = cfg.seq2seq.clone();
        s2s_cfg.train.seed = seed;
        let mut model = Seq2Seq::new(s2s_cfg, direction, src_lex.clone(), tgt_lex.clone(), ctx.embeddings, seed)?;
        let n_valid = ((data.len() as f64) * cfg.valid_frac).floor() as usize;
        let (train, valid) = data.pairs.split_at(data.len() - n_valid.min(data.len().saturating_sub(1)));
        info!(
            "training {lineage}/{iteration} ({direction}) on {} pairs, {} held out",
            train.len(),
            valid.len()
        );
        let report = model.train(train, (!valid.is_empty()).then_some(valid))?;
        let bytes = model.to_checkpoint().to_bytes();
        let entry = self.registry.put(lineage, iteration, MODEL_FILE, &bytes)?;
        let losses: Vec<String> = report.train_losses.iter().map(|l| format!("{l:.6}")).collect();
        let manifest = self.manifest_head(cfg, "model", lineage, iteration, seed)
            + &format!("direction = {direction}\n")
            + &refs
            + &format!(
                "pairs = {}\nheld_out = {}\nsteps = {}\nbest_epoch = {}\ntrain_losses = {}\noutput = {} {}\n",
                train.len(),
                valid.len(),
                report.steps,
                report.best_epoch,
                losses.join(" "),
                entry.relative_path().display(),
                entry.sha256
            )
            + "\n[config]\n"
            + &cfg.config_echo;
        self.registry.put(lineage, iteration, MODEL_MANIFEST, manifest.as_bytes())?;
        self.timing(&format!("{lineage}/{iteration}/model"), start.elapsed().as_secs_f64());
        Ok(model)
    }

    /// Loads or generates the dataset of `lineage` at `iteration`.
    pub fn ensure_dataset(&mut self, ctx: &LoopContext, cfg: &BtConfig, lineage: Lineage, iteration: usize) -> Result<ArtificialDataset> {
        if let Some(d) = self.load_dataset(ctx.vocab, lineage, iteration)? {
            return Ok(d);
        }
        let start = Instant::now();
        let seed = self.generation_seed(lineage, iteration);
        let trained;
        let decoding;
        let (f, source): (&dyn SeqFunction, String) = if iteration == 0 {
            let (f, hash) = ctx.initializer(lineage)?;
            (f, format!("initializer {hash}"))
        } else {
            trained = self.ensure_model(ctx, cfg, lineage, iteration)?;
            decoding = Decoding {
                model: &trained,
                cfg: cfg.generation.sampling(model_direction(iteration).output_side(), seed),
            };
            (&decoding, self.input_ref(lineage, iteration, MODEL_FILE))
        };
        let real = ctx.real(f.direction().input_side());
        let data = make_dataset(f, real, ctx.stop, lineage, iteration)?;
        if data.is_empty() {
            return Err(Error::Empty(format!("{lineage}/{iteration} generated dataset")));
        }
        let (min, mean, max) = data.input_lengths();
        info!(
            "dataset {lineage}/{iteration}: {} pairs, {} dropped, generated length min {min} mean {mean:.2} max {max}",
            data.len(),
            data.dropped
        );
        let entry = self.registry.put(lineage, iteration, DATASET_FILE, &data.to_tsv(ctx.vocab))?;
        let manifest = self.manifest_head(cfg, "dataset", lineage, iteration, seed)
            + &format!(
                "direction = {}\ngenerator = {source}\nreal = {} {}\npairs = {}\ndropped = {}\ngenerated_length = {min} {mean:.4} {max}\noutput = {} {}\n",
                data.direction,
                real.name,
                real.len(),
                data.len(),
                data.dropped,
                entry.relative_path().display(),
                entry.sha256
            )
            + "\n[config]\n"
            + &cfg.config_echo;
        self.registry.put(lineage, iteration, DATASET_MANIFEST, manifest.as_bytes())?;
        self.timing(&format!("{lineage}/{iteration}/dataset"), start.elapsed().as_secs_f64());
        let mut data = data;
        data.dropped = 0;
        Ok(data)
    }
}

/// Trains the next model of `lineage` on its latest dataset and, if
/// `generate_next`, generates that model's dataset. Returns the new
/// iteration.
pub fn bt_step(
    state: &mut LoopState,
    ctx: &LoopContext,
    cfg: &BtConfig,
    lineage: Lineage,
    generate_next: bool,
) -> Result<usize> {
    let current = state
        .current_iteration(lineage)
        .ok_or_else(|| Error::MissingArtifact(format!("{lineage} has no dataset to train on")))?;
    if state.registry.find(lineage, current, DATASET_FILE).is_none() && lineage != Lineage::All {
        return Err(Error::MissingArtifact(format!("{lineage}/{current} dataset")));
    }
    let next = current + 1;
    state.ensure_model(ctx, cfg, lineage, next)?;
    if generate_next {
        state.ensure_dataset(ctx, cfg, lineage, next)?;
    }
    Ok(next)
}

/// Runs every available lineage up to `max_iteration`, plus the (All)
/// summarizers at even iterations from 2 on. Completed steps are reused.
pub fn run_loop(run_dir: &Path, ctx: &LoopContext, cfg: &BtConfig, max_iteration: usize) -> Result<LoopState> {
    let mut state = LoopState::open(run_dir, cfg.seed)?;
    let lineages = ctx.lineages();
    if lineages.is_empty() {
        return Err(Error::MissingArtifact("no initializers".into()));
    }
    for it in 0..=max_iteration {
        for &l in &lineages {
            if it > 0 {
                state.ensure_model(ctx, cfg, l, it)?;
            }
            if it < max_iteration {
                state.ensure_dataset(ctx, cfg, l, it)?;
            }
        }
        if it >= 2 && it % 2 == 0 && lineages.len() == INITIALIZER_LINEAGES.len() {
            state.ensure_model(ctx, cfg, Lineage::All, it)?;
            if cfg.all_mode == AllMode::Chained && it < max_iteration {
                state.ensure_dataset(ctx, cfg, Lineage::All, it)?;
                state.ensure_model(ctx, cfg, Lineage::All, it + 1)?;
                state.ensure_dataset(ctx, cfg, Lineage::All, it + 1)?;
            }
        }
    }
    Ok(state)
}

/// Summarizers of a finished run, as `(row name, lineage, iteration)`.
pub fn summarizers(state: &LoopState) -> Vec<(String, Lineage, usize)> {
    let mut out: Vec<(String, Lineage, usize)> = state
        .registry
        .entries
        .iter()
        .filter(|e| e.file == MODEL_FILE && e.iteration % 2 == 0)
        .map(|e| (format!("{}-{}", e.lineage, e.iteration), e.lineage, e.iteration))
        .collect();
    out.sort_by_key(|(_, l, i)| (*l, *i));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Lexicon, TokenSequence};
    use crate::train::TrainConfig;

    /// Deterministic toy summarizer: keeps words with id below 8.
    struct KeepLow;

    impl SeqFunction for KeepLow {
        fn direction(&self) -> Direction {
            Direction::FullToSummary
        }

        fn apply(&self, inputs: &[&[TokenId]], _: usize) -> Result<Vec<Vec<TokenId>>> {
            Ok(inputs.iter().map(|s| s.iter().copied().filter(|&t| t < 8).collect()).collect())
        }
    }

    struct Toy {
        vocab: Vocabulary,
        full: Corpus,
        summ: Corpus,
        lex: Lexicon,
        emb: Tensor,
    }

    fn toy() -> Toy {
        use rand::{Rng, SeedableRng};
        let vocab = Vocabulary::from_tokens((0..13).map(|i| format!("w{i}")), 100);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let full = (0..24)
            .map(|_| {
                let n = rng.gen_range(2..6);
                TokenSequence::new((0..n).map(|_| rng.gen_range(3..vocab.len() as TokenId)).collect(), Side::FullText)
            })
            .collect();
        let summ = (0..20)
            .map(|_| {
                let n = rng.gen_range(1..4);
                TokenSequence::new((0..n).map(|_| rng.gen_range(3..8)).collect(), Side::Summary)
            })
            .collect();
        Toy {
            lex: Lexicon::identity(vocab.len()),
            emb: Tensor::uniform(vocab.len(), 4, 0.5, &mut rng),
            full: Corpus::new("full", Side::FullText, full).unwrap(),
            summ: Corpus::new("summ", Side::Summary, summ).unwrap(),
            vocab,
        }
    }

    fn cfg() -> BtConfig {
        BtConfig {
            seq2seq: Seq2SeqConfig {
                hidden: 4,
                freeze_embeddings: false,
                train: TrainConfig {
                    epochs: 1,
                    batch: 8,
                    ..Default::default()
                },
            },
            generation: GenerationSettings {
                k: 5,
                min_full: 3,
                max_full: 6,
                max_summ: 3,
            },
            seed: 9,
            ..Default::default()
        }
    }

    fn ctx<'a>(t: &'a Toy, inits: &'a [KeepLow; 3], lineages: &[Lineage]) -> LoopContext<'a> {
        LoopContext {
            vocab: &t.vocab,
            full: &t.full,
            summ: &t.summ,
            full_lex: &t.lex,
            summ_lex: &t.lex,
            embeddings: &t.emb,
            initializers: lineages
                .iter()
                .zip(inits.iter())
                .map(|(&l, f)| (l, f as &dyn SeqFunction, "toy".to_string()))
                .collect(),
            stop: None,
        }
    }

    fn hashes(state: &LoopState, lineage: Lineage) -> Vec<(usize, String, String)> {
        state
            .registry
            .entries
            .iter()
            .filter(|e| e.lineage == lineage)
            .map(|e| (e.iteration, e.file.clone(), e.sha256.clone()))
            .collect()
    }

    #[test]
    fn dataset_pairs_generated_inputs_with_real_outputs() {
        let t = toy();
        let d = make_dataset(&KeepLow, &t.full, None, Lineage::PrThr, 0).unwrap();
        assert_eq!(d.len() + d.dropped, t.full.len());
        assert_eq!(d.direction, Direction::SummaryToFull);
        let reals: Vec<&Vec<TokenId>> = t.full.sequences.iter().map(|s| &s.ids).collect();
        assert!(d.pairs.iter().all(|p| reals.contains(&&p.1)));
        assert!(make_dataset(&KeepLow, &t.summ, None, Lineage::PrThr, 0).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tsv");
        d.save(&path, &t.vocab).unwrap();
        let back = ArtificialDataset::load(&path, &t.vocab, Lineage::PrThr, 0, d.direction).unwrap();
        assert_eq!(back.pairs, d.pairs);
    }

    #[test]
    fn mixing_requires_all_three_lineages() {
        let pair = (vec![3], vec![4]);
        let part = |l| ArtificialDataset {
            lineage: l,
            iteration: 1,
            direction: Direction::FullToSummary,
            pairs: vec![pair.clone(); 2 + l as usize],
            dropped: 0,
        };
        let (a, b, c) = (part(Lineage::PrThr), part(Lineage::Dbae), part(Lineage::Mu1));
        let all = mix_all(&[&a, &b, &c]).unwrap();
        assert_eq!(all.len(), a.len() + b.len() + c.len());
        assert_eq!(all.lineage, Lineage::All);
        assert!(mix_all(&[&a, &b]).is_err());
        let empty = ArtificialDataset { pairs: vec![], ..c.clone() };
        assert!(mix_all(&[&a, &b, &empty]).is_err());
    }

    #[test]
    fn lineage_chain_alternates_and_resumes() {
        let t = toy();
        let inits = [KeepLow, KeepLow, KeepLow];
        let all = INITIALIZER_LINEAGES;
        let c = ctx(&t, &inits, &all);
        let cfg = cfg();
        let dir = tempfile::tempdir().unwrap();

        let full_run = run_loop(&dir.path().join("a"), &c, &cfg, 3).unwrap();
        for l in all {
            for it in 1..=3 {
                let m = full_run.load_model(l, it).unwrap().unwrap();
                assert_eq!(m.direction, model_direction(it));
                assert_eq!(m.direction.input_side(), if it % 2 == 0 { Side::FullText } else { Side::Summary });
            }
            for it in 0..3 {
                let d = full_run.load_dataset(&t.vocab, l, it).unwrap().unwrap();
                let real = if it % 2 == 0 { &t.full } else { &t.summ };
                assert!(d.pairs.iter().all(|p| real.sequences.iter().any(|s| s.ids == p.1)));
            }
        }
        assert!(full_run.load_model(Lineage::All, 2).unwrap().is_some());
        let names: Vec<String> = summarizers(&full_run).into_iter().map(|s| s.0).collect();
        assert_eq!(names, ["PrThr-2", "DBAE-2", "Mu1-2", "All-2"]);

        // Interrupted after iteration 1, then resumed.
        let b = dir.path().join("b");
        run_loop(&b, &c, &cfg, 1).unwrap();
        let resumed = run_loop(&b, &c, &cfg, 3).unwrap();
        for l in [Lineage::PrThr, Lineage::Dbae, Lineage::Mu1, Lineage::All] {
            let mut x = hashes(&full_run, l);
            let mut y = hashes(&resumed, l);
            x.sort();
            y.sort();
            assert_eq!(x, y, "{l}");
        }

        // Reopening reproduces the registry.
        let reopened = LoopState::open(&b, cfg.seed).unwrap();
        assert_eq!(reopened.registry, resumed.registry);
    }

    #[test]
    fn lineages_are_independent() {
        let t = toy();
        let inits = [KeepLow, KeepLow, KeepLow];
        let cfg = cfg();
        let dir = tempfile::tempdir().unwrap();
        let a = run_loop(&dir.path().join("a"), &ctx(&t, &inits, &INITIALIZER_LINEAGES), &cfg, 2).unwrap();
        let b = run_loop(&dir.path().join("b"), &ctx(&t, &inits, &[Lineage::PrThr]), &cfg, 2).unwrap();
        assert_eq!(hashes(&a, Lineage::PrThr), hashes(&b, Lineage::PrThr));
        assert!(b.load_model(Lineage::All, 2).unwrap().is_none());
    }

    #[test]
    fn step_requires_a_predecessor_and_registry_is_write_once() {
        let t = toy();
        let inits = [KeepLow, KeepLow, KeepLow];
        let c = ctx(&t, &inits, &[Lineage::PrThr]);
        let cfg = cfg();
        let dir = tempfile::tempdir().unwrap();
        let mut state = LoopState::open(dir.path(), cfg.seed).unwrap();
        assert!(matches!(bt_step(&mut state, &c, &cfg, Lineage::PrThr, true), Err(Error::MissingArtifact(_))));
        state.ensure_dataset(&c, &cfg, Lineage::PrThr, 0).unwrap();
        assert_eq!(bt_step(&mut state, &c, &cfg, Lineage::PrThr, true).unwrap(), 1);
        assert_eq!(bt_step(&mut state, &c, &cfg, Lineage::PrThr, false).unwrap(), 2);
        assert!(state.registry.put(Lineage::PrThr, 1, DATASET_FILE, b"x").is_err());
    }

    #[test]
    fn corrupted_registry_refuses_to_resume() {
        let t = toy();
        let inits = [KeepLow, KeepLow, KeepLow];
        let c = ctx(&t, &inits, &[Lineage::Mu1]);
        let cfg = cfg();
        let dir = tempfile::tempdir().unwrap();
        run_loop(dir.path(), &c, &cfg, 1).unwrap();
        fs::write(dir.path().join("Mu1/0/dataset.tsv"), "w3\tw4\n").unwrap();
        assert!(matches!(run_loop(dir.path(), &c, &cfg, 2), Err(Error::Format { what: "registry", .. })));
    }
}

//! Pipeline configuration: `key = value` lines grouped in `[section]`s
//! (a TOML subset), `BTSUMM_<SECTION>_<KEY>` environment overrides and
//! `section.key=value` command-line overrides, validated on load.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::{AlignConfig, AnchorPolicy};
use crate::bt::{AllMode, BtConfig, GenerationSettings, Lineage};
use crate::corpus::{SplitRatios, SynthRule};
use crate::embeddings::SkipgramConfig;
use crate::error::{Error, Result};
use crate::init::{DbaeConfig, MomentConfig, PrThrConfig};
use crate::nn::{Real, DEFAULT_CLIP_NORM, DEFAULT_LR};
use crate::seq2seq::Seq2SeqConfig;
use crate::train::TrainConfig;

pub const ENV_PREFIX: &str = "BTSUMM_";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub embeddings: EmbeddingsSection,
    pub align: AlignSection,
    pub prthr: PrThrSection,
    pub dbae: DbaeSection,
    pub moments: MomentsSection,
    pub seq2seq: Seq2SeqSection,
    pub generation: GenerationSection,
    #[serde(rename = "loop")]
    pub bt: LoopSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub id: String,
    pub seed: u64,
    /// Root of every artifact the pipeline writes.
    pub work_dir: PathBuf,
    /// Worker thread cap. Above 1, embedding training is no longer
    /// bit-reproducible.
    pub jobs: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            id: "run".into(),
            seed: 1,
            work_dir: "work".into(),
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// `"synthetic"` or the path of a `fulltext<TAB>summary` file. No default.
    pub source: Option<String>,
    pub synth_pairs: usize,
    pub synth_slots: usize,
    pub synth_words_per_slot: usize,
    pub synth_fillers: usize,
    pub synth_k: usize,
    pub synth_synonym_frac: f64,
    /// Favoured next-slot words per content word (0: independent slots).
    pub synth_successors: usize,
    pub synth_coherence: f64,
    pub summary_frac: f64,
    pub fulltext_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub full_vocab: usize,
    pub summ_vocab: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: None,
            synth_pairs: 40_500,
            synth_slots: 8,
            synth_words_per_slot: 25,
            synth_fillers: 60,
            synth_k: 4,
            synth_synonym_frac: 0.3,
            synth_successors: 3,
            synth_coherence: 0.9,
            summary_frac: 0.49,
            fulltext_frac: 0.49,
            val_frac: 0.01,
            test_frac: 0.01,
            full_vocab: 50_000,
            summ_vocab: 15_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingsSection {
    /// Per-side embeddings used for alignment.
    pub align_dim: usize,
    /// Shared embeddings of every neural model.
    pub model_dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: Real,
}

impl Default for EmbeddingsSection {
    fn default() -> Self {
        EmbeddingsSection {
            align_dim: 256,
            model_dim: 512,
            window: 5,
            negatives: 5,
            epochs: 5,
            lr: 0.025,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignSection {
    /// `"identical"` (same-spelling anchors) or `"identity"`.
    pub anchors: String,
    pub refine_iters: usize,
    pub top_k: usize,
    pub sinkhorn_iters: usize,
    pub sinkhorn_reg: Real,
}

impl Default for AlignSection {
    fn default() -> Self {
        let d = AlignConfig::default();
        AlignSection {
            anchors: "identical".into(),
            refine_iters: d.refine_iters,
            top_k: d.top_k,
            sinkhorn_iters: d.sinkhorn_iters,
            sinkhorn_reg: d.sinkhorn_reg,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrThrSection {
    pub eta: Real,
    pub max_len: usize,
}

impl Default for PrThrSection {
    fn default() -> Self {
        let d = PrThrConfig::default();
        PrThrSection {
            eta: d.eta,
            max_len: d.max_len,
        }
    }
}

/// Optimizer settings shared by every trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch: usize,
    pub lr: Real,
    pub clip: Real,
    pub patience: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 10,
            batch: 64,
            lr: DEFAULT_LR,
            clip: DEFAULT_CLIP_NORM,
            patience: 3,
        }
    }
}

impl TrainSection {
    fn to_train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            clip: self.clip,
            seed,
            patience: self.patience,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DbaeSection {
    pub hidden: usize,
    pub layers: usize,
    pub noise_p: Real,
    pub lambda: Real,
    pub beam: usize,
    pub max_len: usize,
    pub weight_cap: Real,
    pub epochs: usize,
    pub batch: usize,
    pub lr: Real,
}

impl Default for DbaeSection {
    fn default() -> Self {
        let d = DbaeConfig::default();
        DbaeSection {
            hidden: d.hidden,
            layers: d.layers,
            noise_p: d.noise_p,
            lambda: d.lambda,
            beam: d.beam,
            max_len: d.max_len,
            weight_cap: d.weight_cap,
            epochs: d.train.epochs,
            batch: d.train.batch,
            lr: d.train.lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MomentsSection {
    pub hidden: usize,
    pub eta: Real,
    pub max_len: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: Real,
}

impl Default for MomentsSection {
    fn default() -> Self {
        let d = MomentConfig::default();
        MomentsSection {
            hidden: d.hidden,
            eta: d.eta,
            max_len: d.max_len,
            epochs: d.train.epochs,
            batch: d.train.batch,
            lr: d.train.lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seq2SeqSection {
    pub hidden: usize,
    pub freeze_embeddings: bool,
    pub epochs: usize,
    pub batch: usize,
    pub lr: Real,
    pub clip: Real,
    pub patience: usize,
    /// Share of each artificial dataset held out for early stopping.
    pub valid_frac: f64,
}

impl Default for Seq2SeqSection {
    fn default() -> Self {
        let t = TrainSection::default();
        Seq2SeqSection {
            hidden: 256,
            freeze_embeddings: false,
            epochs: t.epochs,
            batch: t.batch,
            lr: t.lr,
            clip: t.clip,
            patience: t.patience,
            valid_frac: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSection {
    pub k: usize,
    pub min_full: usize,
    pub max_full: usize,
    pub max_summ: usize,
}

impl Default for GenerationSection {
    fn default() -> Self {
        let d = GenerationSettings::default();
        GenerationSection {
            k: d.k,
            min_full: d.min_full,
            max_full: d.max_full,
            max_summ: d.max_summ,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopSection {
    pub max_iteration: usize,
    /// `"per-lineage"` or `"chained"`.
    pub all_mode: String,
    pub lineages: Vec<String>,
}

impl Default for LoopSection {
    fn default() -> Self {
        LoopSection {
            max_iteration: 6,
            all_mode: AllMode::PerLineage.to_string(),
            lineages: vec!["PrThr".into(), "DBAE".into(), "Mu1".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub beam: usize,
    pub max_len: usize,
    pub lead_k: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            beam: 5,
            max_len: 12,
            lead_k: 8,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_key(table: &mut toml::Table, section: &str, key: &str, raw: &str) -> Result<()> {
    let sec = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match sec {
        toml::Value::Table(t) => {
            t.insert(key.to_string(), parse_value(raw));
            Ok(())
        }
        _ => Err(Error::Config(format!("`{section}` is not a section"))),
    }
}

impl PipelineConfig {
    /// Parses config text, applies `overrides` (`section.key=value`) in
    /// order, deserializes and validates.
    pub fn from_text(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not section.key=value")))?;
            let (section, key) = path
                .trim()
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("override key {path:?} is not section.key")))?;
            set_key(&mut table, section, key, raw.trim())?;
        }
        let cfg: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; environment overrides apply before `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        let mut all = env_overrides(std::env::vars());
        all.extend_from_slice(overrides);
        Self::from_text(&text, &all)
    }

    /// The resolved configuration, as written into manifests.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("{key}: {why}")));
        let d = &self.data;
        match &d.source {
            None => return Err(Error::Config("missing config key `data.source` (no default)".into())),
            Some(s) if s.trim().is_empty() => return bad("data.source", "must not be empty"),
            _ => {}
        }
        if self.run.id.is_empty() || self.run.id.contains(['/', '\\']) {
            return bad("run.id", "must be a non-empty name without path separators");
        }
        if self.run.jobs == 0 {
            return bad("run.jobs", "must be >= 1");
        }
        self.split_ratios()
            .validate()
            .or_else(|e| bad("data.*_frac", &e.to_string()))?;
        if !(0.0..=1.0).contains(&d.synth_synonym_frac) || !(0.0..=1.0).contains(&d.synth_coherence) {
            return bad("data.synth_synonym_frac / data.synth_coherence", "must be in [0, 1]");
        }
        if d.full_vocab < 4 || d.summ_vocab < 4 {
            return bad("data.full_vocab / data.summ_vocab", "must be >= 4");
        }
        let e = &self.embeddings;
        if e.align_dim == 0 || e.model_dim == 0 || e.window == 0 || e.epochs == 0 || !(e.lr > 0.0) {
            return bad("embeddings", "dims, window, epochs and lr must be positive");
        }
        if !matches!(self.align.anchors.as_str(), "identical" | "identity") {
            return bad("align.anchors", "must be \"identical\" or \"identity\"");
        }
        self.prthr_config().validate().or_else(|e| bad("prthr", &e.to_string()))?;
        if !(0.0..1.0).contains(&self.dbae.noise_p) {
            return bad("dbae.noise_p", "must be in [0, 1)");
        }
        if self.dbae.beam == 0 || self.dbae.max_len == 0 || self.dbae.hidden == 0 || self.dbae.layers == 0 {
            return bad("dbae", "hidden, layers, beam and max_len must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.moments.eta) {
            return bad("moments.eta", "must be in [0, 1]");
        }
        if self.moments.max_len == 0 || self.moments.hidden == 0 {
            return bad("moments", "hidden and max_len must be >= 1");
        }
        for (key, t) in [
            ("dbae", self.dbae_config().train),
            ("moments", self.moment_config().train),
            ("seq2seq", self.seq2seq_config().train),
        ] {
            t.validate().or_else(|e| bad(key, &e.to_string()))?;
        }
        if self.seq2seq.hidden == 0 {
            return bad("seq2seq.hidden", "must be >= 1");
        }
        if !(0.0..0.5).contains(&self.seq2seq.valid_frac) {
            return bad("seq2seq.valid_frac", "must be in [0, 0.5)");
        }
        let g = &self.generation;
        if g.k == 0 || g.max_summ == 0 || g.min_full > g.max_full {
            return bad("generation", "need k >= 1, max_summ >= 1 and min_full <= max_full");
        }
        self.all_mode()?;
        self.lineages()?;
        if self.eval.beam == 0 || self.eval.max_len == 0 || self.eval.lead_k == 0 {
            return bad("eval", "beam, max_len and lead_k must be >= 1");
        }
        Ok(())
    }

    pub fn source(&self) -> &str {
        self.data.source.as_deref().unwrap_or_default()
    }

    pub fn split_ratios(&self) -> SplitRatios {
        SplitRatios {
            summary_frac: self.data.summary_frac,
            fulltext_frac: self.data.fulltext_frac,
            val: self.data.val_frac,
            test: self.data.test_frac,
        }
    }

    pub fn synth_rule(&self) -> SynthRule {
        let d = &self.data;
        SynthRule::pseudo_words(
            d.synth_slots,
            d.synth_words_per_slot,
            d.synth_fillers,
            d.synth_k,
            d.synth_synonym_frac,
            self.run.seed,
        )
        .with_successors(d.synth_successors, d.synth_coherence, self.run.seed.wrapping_add(1))
    }

    pub fn skipgram(&self, dim: usize) -> SkipgramConfig {
        let e = &self.embeddings;
        SkipgramConfig {
            dim,
            window: e.window,
            negatives: e.negatives,
            epochs: e.epochs,
            lr: e.lr,
            seed: self.run.seed,
            threads: self.run.jobs,
        }
    }

    pub fn align_config(&self) -> AlignConfig {
        let a = &self.align;
        AlignConfig {
            anchors: if a.anchors == "identity" {
                AnchorPolicy::Identity
            } else {
                AnchorPolicy::IdenticalStrings
            },
            refine_iters: a.refine_iters,
            top_k: a.top_k,
            sinkhorn_iters: a.sinkhorn_iters,
            sinkhorn_reg: a.sinkhorn_reg,
            seed: self.run.seed,
        }
    }

    pub fn prthr_config(&self) -> PrThrConfig {
        PrThrConfig {
            eta: self.prthr.eta,
            max_len: self.prthr.max_len,
        }
    }

    pub fn dbae_config(&self) -> DbaeConfig {
        let d = &self.dbae;
        DbaeConfig {
            hidden: d.hidden,
            layers: d.layers,
            noise_p: d.noise_p,
            lambda: d.lambda,
            beam: d.beam,
            max_len: d.max_len,
            weight_cap: d.weight_cap,
            train: TrainSection {
                epochs: d.epochs,
                batch: d.batch,
                lr: d.lr,
                ..Default::default()
            }
            .to_train(self.run.seed),
        }
    }

    pub fn moment_config(&self) -> MomentConfig {
        let m = &self.moments;
        MomentConfig {
            hidden: m.hidden,
            eta: m.eta,
            max_len: m.max_len,
            train: TrainSection {
                epochs: m.epochs,
                batch: m.batch,
                lr: m.lr,
                ..Default::default()
            }
            .to_train(self.run.seed),
        }
    }

    pub fn seq2seq_config(&self) -> Seq2SeqConfig {
        let s = &self.seq2seq;
        Seq2SeqConfig {
            hidden: s.hidden,
            freeze_embeddings: s.freeze_embeddings,
            train: TrainSection {
                epochs: s.epochs,
                batch: s.batch,
                lr: s.lr,
                clip: s.clip,
                patience: s.patience,
            }
            .to_train(self.run.seed),
        }
    }

    pub fn generation(&self) -> GenerationSettings {
        let g = &self.generation;
        GenerationSettings {
            k: g.k,
            min_full: g.min_full,
            max_full: g.max_full,
            max_summ: g.max_summ,
        }
    }

    pub fn all_mode(&self) -> Result<AllMode> {
        self.bt.all_mode.parse()
    }

    pub fn lineages(&self) -> Result<Vec<Lineage>> {
        let mut out = Vec::new();
        for name in &self.bt.lineages {
            let l: Lineage = name
                .parse()
                .map_err(|_| Error::Config(format!("loop.lineages: unknown lineage {name:?}")))?;
            if l == Lineage::All {
                return Err(Error::Config("loop.lineages: All is derived, not an initializer".into()));
            }
            if out.contains(&l) {
                return Err(Error::Config(format!("loop.lineages: {name} listed twice")));
            }
            out.push(l);
        }
        if out.is_empty() {
            return Err(Error::Config("loop.lineages: at least one lineage is needed".into()));
        }
        Ok(out)
    }

    pub fn bt_config(&self) -> Result<BtConfig> {
        Ok(BtConfig {
            seq2seq: self.seq2seq_config(),
            generation: self.generation(),
            seed: self.run.seed,
            all_mode: self.all_mode()?,
            valid_frac: self.seq2seq.valid_frac,
            config_echo: self.echo(),
        })
    }
}

/// `BTSUMM_SECTION_KEY=value` pairs as `section.key=value` overrides, in
/// sorted order. `BTSUMM_LOG` is reserved for logging.
pub fn env_overrides(vars: impl Iterator<Item = (String, String)>) -> Vec<String> {
    let mut out: Vec<String> = vars
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            if rest == "LOG" {
                return None;
            }
            let (section, key) = rest.split_once('_')?;
            Some(format!("{}.{}={v}", section.to_lowercase(), key.to_lowercase()))
        })
        .collect();
    out.sort();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[data]\nsource = \"synthetic\"\n";

    #[test]
    fn defaults_follow_the_reference_settings() {
        let c = PipelineConfig::from_text(MINIMAL, &[]).unwrap();
        assert_eq!((c.prthr.eta, c.prthr.max_len), (0.9, 12));
        assert_eq!((c.moments.eta, c.moments.max_len), (0.3, 12));
        assert_eq!((c.dbae.lambda, c.dbae.beam, c.dbae.max_len, c.dbae.noise_p), (2.0, 5, 15, 0.2));
        assert_eq!((c.generation.k, c.generation.min_full, c.generation.max_summ), (15, 16, 12));
        assert_eq!((c.seq2seq.lr, c.embeddings.model_dim, c.seq2seq.hidden), (5e-4, 512, 256));
        assert_eq!((c.data.full_vocab, c.data.summ_vocab), (50_000, 15_000));
        assert_eq!(c.eval.beam, 5);
        assert_eq!(c.all_mode().unwrap(), AllMode::PerLineage);
    }

    #[test]
    fn missing_required_key_is_named() {
        let err = PipelineConfig::from_text("[run]\nseed = 3\n", &[]).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("data.source")), "{err}");
    }

    #[test]
    fn unknown_keys_and_bad_ranges_are_rejected() {
        let unknown = PipelineConfig::from_text(&format!("{MINIMAL}[dbae]\nlamda = 2\n"), &[]).unwrap_err();
        assert!(unknown.to_string().contains("lamda"), "{unknown}");
        assert!(PipelineConfig::from_text(&format!("{MINIMAL}[bogus]\nx = 1\n"), &[]).is_err());
        let ratio = PipelineConfig::from_text(MINIMAL, &["data.test_frac=0.5".into()]).unwrap_err();
        assert!(matches!(ratio, Error::Config(_)));
        assert!(PipelineConfig::from_text(MINIMAL, &["moments.eta=1.5".into()]).is_err());
        assert!(PipelineConfig::from_text(MINIMAL, &["loop.all_mode=\"sideways\"".into()]).is_err());
        assert!(PipelineConfig::from_text(MINIMAL, &["loop.lineages=[\"All\"]".into()]).is_err());
    }

    #[test]
    fn overrides_apply_in_order_and_echo_round_trips() {
        let c = PipelineConfig::from_text(
            MINIMAL,
            &["seq2seq.hidden=64".into(), "seq2seq.hidden=32".into(), "loop.all_mode=chained".into()],
        )
        .unwrap();
        assert_eq!(c.seq2seq.hidden, 32);
        assert_eq!(c.all_mode().unwrap(), AllMode::Chained);
        let again = PipelineConfig::from_text(&c.echo(), &[]).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn environment_names_map_to_keys() {
        let vars = vec![
            ("BTSUMM_SEQ2SEQ_HIDDEN".to_string(), "48".to_string()),
            ("BTSUMM_LOG".to_string(), "debug".to_string()),
            ("BTSUMM_DATA_SYNTH_PAIRS".to_string(), "100".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ];
        let o = env_overrides(vars.into_iter());
        assert_eq!(o, ["data.synth_pairs=100", "seq2seq.hidden=48"]);
        let c = PipelineConfig::from_text(MINIMAL, &o).unwrap();
        assert_eq!((c.seq2seq.hidden, c.data.synth_pairs), (48, 100));
    }
}

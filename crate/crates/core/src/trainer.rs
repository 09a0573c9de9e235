//! Config-driven experiment runner: generate and poison data, train under a
//! defense profile, probe frequency dynamics per epoch, evaluate, and emit
//! reports.

use crate::align::{align, blend, mu_schedule, AlignConfig, FlatGradient};
use crate::error::{Error, Result};
use crate::lora::ScalingVector;
use crate::metrics::{evaluate, EvalReport};
use crate::model::{adapter_sites, build_model, Batch, ClassifierModel, ModelConfig};
use crate::optim::{Optimizer, OptimizerKind};
use crate::poison::{
    build_asr_testset, gen_clean_corpus, implant_trigger, poison_dataset, sample_auxiliary,
    AttackSpec, CorpusSpec, TokenSample, TriggerKind,
};
use crate::probe::{probe, FrequencySnapshot};
use crate::rng::RngStream;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub mod checkpoint;

/// Substream ids carving one seed into independent randomness domains.
mod streams {
    pub const CORPUS: u64 = 1;
    pub const POISON: u64 = 2;
    pub const ASR: u64 = 3;
    pub const AUX: u64 = 4;
    pub const MODEL: u64 = 5;
    pub const ADAPTER: u64 = 6;
    pub const PROBE: u64 = 7;
    pub const EPOCH_BASE: u64 = 1000;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseProfile {
    None,
    Lora,
    MuscleLoraNoGa,
    GaOnlyLora,
    MuscleLoraFull,
}

impl DefenseProfile {
    pub const ALL: [DefenseProfile; 5] = [
        DefenseProfile::None,
        DefenseProfile::Lora,
        DefenseProfile::MuscleLoraNoGa,
        DefenseProfile::GaOnlyLora,
        DefenseProfile::MuscleLoraFull,
    ];

    pub fn uses_adapters(&self) -> bool {
        !matches!(self, DefenseProfile::None)
    }

    pub fn uses_multi_scale(&self) -> bool {
        matches!(
            self,
            DefenseProfile::MuscleLoraNoGa | DefenseProfile::MuscleLoraFull
        )
    }

    pub fn uses_alignment(&self) -> bool {
        matches!(
            self,
            DefenseProfile::GaOnlyLora | DefenseProfile::MuscleLoraFull
        )
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DefenseProfile::None => "none",
            DefenseProfile::Lora => "lora",
            DefenseProfile::MuscleLoraNoGa => "muscle_lora_no_ga",
            DefenseProfile::GaOnlyLora => "ga_only_lora",
            DefenseProfile::MuscleLoraFull => "muscle_lora_full",
        }
    }
}

impl FromStr for DefenseProfile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DefenseProfile::None),
            "lora" => Ok(DefenseProfile::Lora),
            "muscle_lora_no_ga" => Ok(DefenseProfile::MuscleLoraNoGa),
            "ga_only_lora" => Ok(DefenseProfile::GaOnlyLora),
            "muscle_lora_full" => Ok(DefenseProfile::MuscleLoraFull),
            other => Err(Error::config(format!("unknown defense profile {other}"))),
        }
    }
}

impl std::fmt::Display for DefenseProfile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Everything one run needs, parsed from a flat key=value config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    // corpus
    pub vocab_size: usize,
    pub num_classes: usize,
    pub topic_per_class: usize,
    pub seq_min: usize,
    pub seq_max: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    // attack
    pub attack_kind: TriggerKind,
    pub trigger_tokens: Vec<u32>,
    pub target_label: usize,
    pub poison_ratio: f64,
    // model
    pub embed_dim: usize,
    pub max_len: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub classifier_hidden: usize,
    pub rare_token_gain: f64,
    // defense
    pub profile: DefenseProfile,
    pub scales: Vec<f64>,
    pub bandwidth: usize,
    pub mu_max: f64,
    pub aux_size: usize,
    pub aux_batch_size: usize,
    pub epsilon: f64,
    pub per_tensor_align: bool,
    // optimization
    pub optimizer: String,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    // probe
    pub probe_enabled: bool,
    pub probe_delta: f64,
    pub probe_subset: usize,
    // bookkeeping
    pub seed: u64,
    pub out_dir: String,
    pub ga_debug: bool,
}

/// Token ids 1..=NUM_RESERVED are reserved rare tokens excluded from clean
/// text generation. The word attack scatters four of them; the sentence
/// attack implants a fixed three-token phrase. The two attacks are separate
/// experiments, so the sets may overlap.
pub const WORD_TRIGGERS: [u32; 4] = [1, 2, 3, 4];
pub const SENTENCE_TRIGGER: [u32; 3] = [1, 2, 3];
pub const NUM_RESERVED: usize = 9;

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            vocab_size: 200,
            num_classes: 2,
            topic_per_class: 4,
            seq_min: 6,
            seq_max: 10,
            train_size: 1024,
            val_size: 256,
            test_size: 512,
            attack_kind: TriggerKind::Word,
            trigger_tokens: WORD_TRIGGERS.to_vec(),
            target_label: 1,
            poison_ratio: 0.1,
            embed_dim: 64,
            max_len: 24,
            num_heads: 2,
            num_blocks: 2,
            classifier_hidden: 64,
            rare_token_gain: 7.0,
            profile: DefenseProfile::None,
            scales: vec![1.0, 2.0, 4.0, 8.0],
            bandwidth: 1,
            mu_max: 0.0,
            aux_size: 96,
            aux_batch_size: 32,
            epsilon: 1e-12,
            per_tensor_align: false,
            optimizer: "adam".to_string(),
            learning_rate: 3e-3,
            epochs: 10,
            batch_size: 32,
            probe_enabled: true,
            probe_delta: crate::probe::DEFAULT_DELTA,
            probe_subset: 256,
            seed: 1,
            out_dir: "runs/out".to_string(),
            ga_debug: false,
        }
    }
}

impl ExperimentConfig {
    /// Default trigger token set for an attack kind.
    pub fn default_triggers(kind: TriggerKind) -> Vec<u32> {
        match kind {
            TriggerKind::Word => WORD_TRIGGERS.to_vec(),
            TriggerKind::Sentence => SENTENCE_TRIGGER.to_vec(),
        }
    }

    pub fn with_attack(mut self, kind: TriggerKind) -> Self {
        self.attack_kind = kind;
        self.trigger_tokens = Self::default_triggers(kind);
        self
    }

    pub fn corpus_spec(&self) -> Result<CorpusSpec> {
        CorpusSpec::standard(
            self.vocab_size,
            self.num_classes,
            self.topic_per_class,
            NUM_RESERVED,
            self.seq_min,
            self.seq_max,
            self.train_size,
            self.val_size,
            self.test_size,
            self.seed,
        )
    }

    pub fn attack_spec(&self) -> AttackSpec {
        AttackSpec {
            kind: self.attack_kind,
            trigger_tokens: self.trigger_tokens.clone(),
            target_label: self.target_label,
            poison_ratio: self.poison_ratio,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            embed_dim: self.embed_dim,
            max_len: self.max_len,
            num_heads: self.num_heads,
            num_blocks: self.num_blocks,
            num_classes: self.num_classes,
            classifier_hidden: self.classifier_hidden,
            num_reserved_tokens: NUM_RESERVED,
            rare_token_gain: self.rare_token_gain,
        }
    }

    pub fn align_config(&self) -> AlignConfig {
        AlignConfig {
            mu_max: self.mu_max,
            total_epochs: self.epochs,
            epsilon: self.epsilon,
            aux_batch_size: self.aux_batch_size,
        }
    }

    pub fn scaling_vector(&self) -> Result<ScalingVector> {
        ScalingVector::new(self.scales.clone(), self.bandwidth)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.seq_max + self.trigger_tokens.len() > self.max_len {
            return Err(Error::config(format!(
                "max_len {} cannot hold seq_max {} plus {} trigger tokens",
                self.max_len,
                self.seq_max,
                self.trigger_tokens.len()
            )));
        }
        if self.target_label >= self.num_classes {
            return Err(Error::config("target_label out of range"));
        }
        for &t in &self.trigger_tokens {
            if t == 0 || t as usize > NUM_RESERVED {
                return Err(Error::config(format!(
                    "trigger token {t} outside the reserved id range 1..={NUM_RESERVED}"
                )));
            }
        }
        self.corpus_spec()?;
        self.model_config().validate()?;
        self.attack_spec().validate()?;
        self.align_config().validate()?;
        self.scaling_vector()?;
        OptimizerKind::from_str(&self.optimizer)?;
        if self.probe_enabled && self.probe_subset == 0 {
            return Err(Error::config("probe_subset must be positive when probing"));
        }
        Ok(())
    }

    /// Canonical flat key=value rendering; parse(echo()) is the identity.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let kind = match self.attack_kind {
            TriggerKind::Word => "word",
            TriggerKind::Sentence => "sentence",
        };
        let join_u32 = |v: &[u32]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let join_f64 = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        let _ = writeln!(s, "vocab_size = {}", self.vocab_size);
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        let _ = writeln!(s, "topic_per_class = {}", self.topic_per_class);
        let _ = writeln!(s, "seq_min = {}", self.seq_min);
        let _ = writeln!(s, "seq_max = {}", self.seq_max);
        let _ = writeln!(s, "train_size = {}", self.train_size);
        let _ = writeln!(s, "val_size = {}", self.val_size);
        let _ = writeln!(s, "test_size = {}", self.test_size);
        let _ = writeln!(s, "attack_kind = {kind}");
        let _ = writeln!(s, "trigger_tokens = {}", join_u32(&self.trigger_tokens));
        let _ = writeln!(s, "target_label = {}", self.target_label);
        let _ = writeln!(s, "poison_ratio = {}", self.poison_ratio);
        let _ = writeln!(s, "embed_dim = {}", self.embed_dim);
        let _ = writeln!(s, "max_len = {}", self.max_len);
        let _ = writeln!(s, "num_heads = {}", self.num_heads);
        let _ = writeln!(s, "num_blocks = {}", self.num_blocks);
        let _ = writeln!(s, "classifier_hidden = {}", self.classifier_hidden);
        let _ = writeln!(s, "rare_token_gain = {}", self.rare_token_gain);
        let _ = writeln!(s, "profile = {}", self.profile);
        let _ = writeln!(s, "scales = {}", join_f64(&self.scales));
        let _ = writeln!(s, "bandwidth = {}", self.bandwidth);
        let _ = writeln!(s, "mu_max = {}", self.mu_max);
        let _ = writeln!(s, "aux_size = {}", self.aux_size);
        let _ = writeln!(s, "aux_batch_size = {}", self.aux_batch_size);
        let _ = writeln!(s, "epsilon = {}", self.epsilon);
        let _ = writeln!(s, "per_tensor_align = {}", self.per_tensor_align);
        let _ = writeln!(s, "optimizer = {}", self.optimizer);
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "probe_enabled = {}", self.probe_enabled);
        let _ = writeln!(s, "probe_delta = {}", self.probe_delta);
        let _ = writeln!(s, "probe_subset = {}", self.probe_subset);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "out_dir = {}", self.out_dir);
        let _ = writeln!(s, "ga_debug = {}", self.ga_debug);
        s
    }

    /// Parse a flat key=value config; '#' starts a comment; unknown keys
    /// are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut explicit_triggers = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| {
                Error::config(format!(
                    "line {}: invalid {what} value {value:?}",
                    lineno + 1
                ))
            };
            macro_rules! num {
                ($field:expr, $ty:ty, $what:literal) => {
                    $field = value.parse::<$ty>().map_err(|_| bad($what))?
                };
            }
            match key {
                "vocab_size" => num!(cfg.vocab_size, usize, "count"),
                "num_classes" => num!(cfg.num_classes, usize, "count"),
                "topic_per_class" => num!(cfg.topic_per_class, usize, "count"),
                "seq_min" => num!(cfg.seq_min, usize, "count"),
                "seq_max" => num!(cfg.seq_max, usize, "count"),
                "train_size" => num!(cfg.train_size, usize, "count"),
                "val_size" => num!(cfg.val_size, usize, "count"),
                "test_size" => num!(cfg.test_size, usize, "count"),
                "attack_kind" => {
                    cfg.attack_kind = value.parse()?;
                    if !explicit_triggers {
                        cfg.trigger_tokens = Self::default_triggers(cfg.attack_kind);
                    }
                }
                "trigger_tokens" => {
                    cfg.trigger_tokens = value
                        .split(',')
                        .map(|p| p.trim().parse::<u32>().map_err(|_| bad("token id")))
                        .collect::<Result<_>>()?;
                    explicit_triggers = true;
                }
                "target_label" => num!(cfg.target_label, usize, "label"),
                "poison_ratio" => num!(cfg.poison_ratio, f64, "ratio"),
                "embed_dim" => num!(cfg.embed_dim, usize, "count"),
                "max_len" => num!(cfg.max_len, usize, "count"),
                "num_heads" => num!(cfg.num_heads, usize, "count"),
                "num_blocks" => num!(cfg.num_blocks, usize, "count"),
                "classifier_hidden" => num!(cfg.classifier_hidden, usize, "count"),
                "rare_token_gain" => num!(cfg.rare_token_gain, f64, "real"),
                "profile" => cfg.profile = value.parse()?,
                "scales" => {
                    cfg.scales = value
                        .split(',')
                        .map(|p| p.trim().parse::<f64>().map_err(|_| bad("scale")))
                        .collect::<Result<_>>()?;
                }
                "bandwidth" => num!(cfg.bandwidth, usize, "count"),
                "mu_max" => num!(cfg.mu_max, f64, "ratio"),
                "aux_size" => num!(cfg.aux_size, usize, "count"),
                "aux_batch_size" => num!(cfg.aux_batch_size, usize, "count"),
                "epsilon" => num!(cfg.epsilon, f64, "real"),
                "per_tensor_align" => num!(cfg.per_tensor_align, bool, "flag"),
                "optimizer" => cfg.optimizer = value.to_string(),
                "learning_rate" => num!(cfg.learning_rate, f64, "real"),
                "epochs" => num!(cfg.epochs, usize, "count"),
                "batch_size" => num!(cfg.batch_size, usize, "count"),
                "probe_enabled" => num!(cfg.probe_enabled, bool, "flag"),
                "probe_delta" => num!(cfg.probe_delta, f64, "real"),
                "probe_subset" => num!(cfg.probe_subset, usize, "count"),
                "seed" => num!(cfg.seed, u64, "seed"),
                "out_dir" => cfg.out_dir = value.to_string(),
                "ga_debug" => num!(cfg.ga_debug, bool, "flag"),
                other => {
                    return Err(Error::config(format!(
                        "line {}: unknown key {other}",
                        lineno + 1
                    )))
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Fields that must agree across a run matrix.
    pub fn corpus_signature(&self) -> impl PartialEq + std::fmt::Debug {
        (
            self.vocab_size,
            self.num_classes,
            self.topic_per_class,
            self.seq_min,
            self.seq_max,
            self.train_size,
            self.val_size,
            self.test_size,
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config_echo: String,
    pub seed: u64,
    pub profile: DefenseProfile,
    pub epochs: Vec<EvalReport>,
    pub snapshots: Vec<FrequencySnapshot>,
    pub checkpoint_path: Option<String>,
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn final_eval(&self) -> &EvalReport {
        self.epochs.last().expect("at least one epoch")
    }
}

/// All artifacts produced while training, for callers that need more than
/// the written files.
pub struct TrainOutcome {
    pub report: RunReport,
    pub model: ClassifierModel,
    pub initial_frozen: Vec<(String, crate::tensor::DenseMatrix)>,
    pub ga_debug_csv: Option<String>,
}

fn batches_of(
    samples: &[TokenSample],
    order: &[usize],
    batch_size: usize,
    max_len: usize,
) -> Result<Vec<Batch>> {
    let mut out = Vec::new();
    for chunk in order.chunks(batch_size) {
        let tokens: Vec<Vec<u32>> = chunk.iter().map(|&i| samples[i].tokens.clone()).collect();
        let labels: Vec<usize> = chunk.iter().map(|&i| samples[i].label).collect();
        out.push(Batch::from_samples(&tokens, &labels, max_len)?);
    }
    Ok(out)
}

fn compute_flat_gradient(model: &mut ClassifierModel, batch: &Batch) -> Result<FlatGradient> {
    model.store.zero_grads();
    let mut tape = crate::tensor::Tape::new();
    let loss = model.loss_graph(&mut tape, batch)?;
    tape.backward(loss, &mut model.store)?;
    Ok(FlatGradient::from_store(&model.store))
}

/// Align per layout entry instead of globally (config flag).
fn align_per_tensor(g: &FlatGradient, g_c: &FlatGradient, epsilon: f64) -> Result<FlatGradient> {
    if !g.same_layout(g_c) {
        return Err(Error::contract("align: gradient layouts differ"));
    }
    let mut data = vec![0.0; g.data.len()];
    for (idx, entry) in g.layout.iter().enumerate() {
        let end = g
            .layout
            .get(idx + 1)
            .map(|e| e.offset)
            .unwrap_or(g.data.len());
        let gs = &g.data[entry.offset..end];
        let cs = &g_c.data[entry.offset..end];
        let norm_sq: f64 = cs.iter().map(|x| x * x).sum();
        if norm_sq < epsilon {
            continue;
        }
        let coeff = gs.iter().zip(cs).map(|(a, b)| a * b).sum::<f64>().abs() / norm_sq;
        for (d, &c) in data[entry.offset..end].iter_mut().zip(cs) {
            *d = coeff * c;
        }
    }
    Ok(g.with_data(data))
}

/// Attach adapters for a profile. Multi-scale profiles use the configured
/// scaling vector at the penultimate site only; every other adapter (and
/// every adapter in plain-LoRA profiles) uses an all-ones vector of the
/// same rank.
pub fn attach_profile_adapters(
    model: &mut ClassifierModel,
    config: &ExperimentConfig,
    rng: &mut RngStream,
) -> Result<()> {
    if !config.profile.uses_adapters() {
        return Ok(());
    }
    let scaling = config.scaling_vector()?;
    let rank = scaling.rank();
    let multi_scale = config.profile.uses_multi_scale();
    let sites = adapter_sites(&model.config);
    model.attach_adapters(
        &sites,
        |site| {
            if multi_scale && site == "penultimate" {
                scaling.clone()
            } else {
                ScalingVector::all_ones(rank)
            }
        },
        rng,
    )
}

/// Every dataset a run touches, derived deterministically from the config.
pub struct DataBundle {
    /// Poisoned training set (clean samples plus relabeled trigger carriers).
    pub train_set: Vec<TokenSample>,
    /// Clean validation split (auxiliary pool source).
    pub validation: Vec<TokenSample>,
    /// Clean test split for CACC.
    pub clean_test: Vec<TokenSample>,
    /// Trigger-implanted, non-target-origin test samples for ASR.
    pub asr_set: Vec<TokenSample>,
    /// Clean auxiliary pool for gradient alignment.
    pub aux_pool: Vec<TokenSample>,
}

/// Generate, poison, and split all data for a config.
pub fn prepare_data(config: &ExperimentConfig) -> Result<DataBundle> {
    let root = RngStream::new(config.seed);
    let corpus_spec = config.corpus_spec()?;
    let attack = config.attack_spec();
    let (clean_train, validation, clean_test) =
        gen_clean_corpus(&corpus_spec, &mut root.substream(streams::CORPUS))?;
    let train_set = poison_dataset(
        &clean_train,
        &attack,
        config.max_len,
        &mut root.substream(streams::POISON),
    )?;
    let asr_set = build_asr_testset(
        &clean_test,
        &attack,
        config.max_len,
        &mut root.substream(streams::ASR),
    )?;
    let aux_pool = sample_auxiliary(
        &validation,
        config.aux_size,
        &mut root.substream(streams::AUX),
    )?;
    Ok(DataBundle {
        train_set,
        validation,
        clean_test,
        asr_set,
        aux_pool,
    })
}

/// Rebuild the run's fixed probe subsets for an already-trained model and
/// produce one clean and one backdoor snapshot.
pub fn probe_model(
    model: &ClassifierModel,
    config: &ExperimentConfig,
    epoch: usize,
) -> Result<(FrequencySnapshot, FrequencySnapshot)> {
    let data = prepare_data(config)?;
    let root = RngStream::new(config.seed);
    let mut probe_rng = root.substream(streams::PROBE);
    let (clean_probe, backdoor_probe) =
        build_probe_sets(&data.clean_test, &config.attack_spec(), config, &mut probe_rng)?;
    let merged = model.merge_adapters()?;
    probe(&merged, &clean_probe, &backdoor_probe, epoch, config.probe_delta)
}

/// Run one full experiment. Deterministic given the config (which includes
/// the seed): same config twice gives identical reports.
pub fn train(config: &ExperimentConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let started = std::time::Instant::now();
    let root = RngStream::new(config.seed);

    let attack = config.attack_spec();
    let DataBundle {
        train_set,
        validation: _,
        clean_test,
        asr_set,
        aux_pool,
    } = prepare_data(config)?;

    // model + defense wiring
    let mut model = build_model(&config.model_config(), &mut root.substream(streams::MODEL))?;
    attach_profile_adapters(&mut model, config, &mut root.substream(streams::ADAPTER))?;
    let initial_frozen: Vec<(String, crate::tensor::DenseMatrix)> = model
        .store
        .iter()
        .filter(|(_, p)| !p.trainable)
        .map(|(_, p)| (p.name.clone(), p.value.clone()))
        .collect();

    // probe subsets, fixed for the whole run
    let mut probe_rng = root.substream(streams::PROBE);
    let (clean_probe, backdoor_probe) = if config.probe_enabled {
        build_probe_sets(&clean_test, &attack, config, &mut probe_rng)?
    } else {
        (Vec::new(), Vec::new())
    };

    let kind = OptimizerKind::from_str(&config.optimizer)?;
    let mut optimizer = Optimizer::new(kind, config.learning_rate);
    let align_cfg = config.align_config();
    let use_ga = config.profile.uses_alignment();

    let mut epochs = Vec::with_capacity(config.epochs);
    let mut snapshots = Vec::new();
    let mut ga_debug_rows: Vec<String> = Vec::new();

    for epoch in 0..config.epochs {
        let mut epoch_rng = root.substream(streams::EPOCH_BASE + epoch as u64);
        let order = epoch_rng.permutation(train_set.len());
        let batches = batches_of(&train_set, &order, config.batch_size, config.max_len)?;

        // per-epoch shuffled auxiliary order, cycled with a wrapping cursor
        let aux_order = epoch_rng.permutation(aux_pool.len());
        let mut aux_cursor = 0usize;
        let mu = mu_schedule(epoch, &align_cfg)?;

        for (step, batch) in batches.iter().enumerate() {
            let g = compute_flat_gradient(&mut model, batch)?;
            let g_hat = if use_ga {
                let take = align_cfg.aux_batch_size.min(aux_pool.len());
                let idx: Vec<usize> = (0..take)
                    .map(|k| aux_order[(aux_cursor + k) % aux_pool.len()])
                    .collect();
                aux_cursor = (aux_cursor + take) % aux_pool.len();
                let aux_batch = batches_of(&aux_pool, &idx, take, config.max_len)?
                    .pop()
                    .expect("one aux batch");
                let g_c = compute_flat_gradient(&mut model, &aux_batch)?;
                let g_a = if config.per_tensor_align {
                    align_per_tensor(&g, &g_c, align_cfg.epsilon)?
                } else {
                    align(&g, &g_c, align_cfg.epsilon)?
                };
                let blended = blend(&g_a, &g, mu)?;
                if config.ga_debug {
                    ga_debug_rows.push(format!(
                        "{},{},{},{},{},{},{}",
                        epoch + 1,
                        step,
                        mu,
                        g.norm(),
                        g_c.norm(),
                        g.dot(&g_c),
                        blended.norm()
                    ));
                }
                blended
            } else {
                g
            };
            optimizer.apply(&mut model.store, &g_hat)?;
        }

        // evaluation and probing on the merged deployment path
        let merged = model.merge_adapters()?;
        epochs.push(evaluate(&merged, &clean_test, &asr_set, &attack, epoch + 1)?);
        if config.probe_enabled {
            let (c, b) = probe(
                &merged,
                &clean_probe,
                &backdoor_probe,
                epoch + 1,
                config.probe_delta,
            )?;
            snapshots.push(c);
            snapshots.push(b);
        }
    }

    let report = RunReport {
        config_echo: config.echo(),
        seed: config.seed,
        profile: config.profile,
        epochs,
        snapshots,
        checkpoint_path: None,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    let ga_debug_csv = config.ga_debug.then(|| {
        let mut text = String::from("epoch,step,mu,g_norm,gc_norm,g_dot_gc,ghat_norm\n");
        for row in ga_debug_rows {
            text.push_str(&row);
            text.push('\n');
        }
        text
    });
    Ok(TrainOutcome {
        report,
        model,
        initial_frozen,
        ga_debug_csv,
    })
}

/// Fixed probe subsets: clean samples with their own labels, and
/// trigger-implanted eligible samples labeled with the attack target.
/// Draw the two probe subsets from held-out clean data. Probing held-out
/// samples makes the clean-mapping relative error track generalization
/// rather than train-set memorization, which at this corpus scale collapses
/// within one epoch and would mask the convergence-speed comparison.
fn build_probe_sets(
    held_out: &[TokenSample],
    attack: &AttackSpec,
    config: &ExperimentConfig,
    rng: &mut RngStream,
) -> Result<(Vec<TokenSample>, Vec<TokenSample>)> {
    let clean: Vec<&TokenSample> = held_out.iter().filter(|s| !s.poisoned).collect();
    let n_clean = config.probe_subset.min(clean.len());
    let idx = rng.sample_without_replacement(clean.len(), n_clean);
    let clean_probe: Vec<TokenSample> = idx.into_iter().map(|i| clean[i].clone()).collect();

    let eligible: Vec<&TokenSample> = held_out
        .iter()
        .filter(|s| s.original_label != attack.target_label && !s.poisoned)
        .collect();
    let n_bd = config.probe_subset.min(eligible.len());
    let idx = rng.sample_without_replacement(eligible.len(), n_bd);
    let mut backdoor_probe = Vec::with_capacity(n_bd);
    for (k, i) in idx.into_iter().enumerate() {
        let mut srng = rng.substream(k as u64);
        let mut s = implant_trigger(eligible[i], attack, config.max_len, &mut srng)?;
        s.label = attack.target_label;
        s.poisoned = true;
        backdoor_probe.push(s);
    }
    Ok((clean_probe, backdoor_probe))
}

// ---------------------------------------------------------------------------
// run directory output
// ---------------------------------------------------------------------------

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn metrics_csv(epochs: &[EvalReport]) -> String {
    let mut s = String::from("epoch,cacc,asr,loss_clean,loss_poison\n");
    for e in epochs {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            e.epoch,
            fmt_f64(e.cacc),
            fmt_f64(e.asr),
            fmt_f64(e.loss_clean),
            fmt_f64(e.loss_poison)
        );
    }
    s
}

pub fn frequency_csv(snapshots: &[FrequencySnapshot]) -> String {
    let mut s = String::from("epoch,tag,delta,lfr,hfr,re_low,re_high,n\n");
    for f in snapshots {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            f.epoch,
            f.tag,
            fmt_f64(f.delta),
            fmt_f64(f.lfr),
            fmt_f64(f.hfr),
            fmt_f64(f.re_low),
            fmt_f64(f.re_high),
            f.n
        );
    }
    s
}

/// Write the standard run directory: config.echo, metrics.csv,
/// frequency.csv, summary.json, checkpoint.bin.
pub fn write_run_dir(dir: &Path, outcome: &mut TrainOutcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let ckpt = dir.join("checkpoint.bin");
    checkpoint::save(&ckpt, &outcome.model)?;
    outcome.report.checkpoint_path = Some(ckpt.display().to_string());

    std::fs::write(dir.join("config.echo"), &outcome.report.config_echo)?;
    std::fs::write(dir.join("metrics.csv"), metrics_csv(&outcome.report.epochs))?;
    std::fs::write(
        dir.join("frequency.csv"),
        frequency_csv(&outcome.report.snapshots),
    )?;
    if let Some(csv) = &outcome.ga_debug_csv {
        std::fs::write(dir.join("ga_debug.csv"), csv)?;
    }
    let summary = serde_json::to_string_pretty(&outcome.report)?;
    std::fs::write(dir.join("summary.json"), summary)?;
    Ok(())
}

/// Regenerate the CSV reports from summary.json; byte-identical to the
/// originals because both paths share the same formatting code.
pub fn regenerate_reports(dir: &Path) -> Result<()> {
    let text = std::fs::read_to_string(dir.join("summary.json"))?;
    let report: RunReport = serde_json::from_str(&text)?;
    std::fs::write(dir.join("metrics.csv"), metrics_csv(&report.epochs))?;
    std::fs::write(dir.join("frequency.csv"), frequency_csv(&report.snapshots))?;
    std::fs::write(dir.join("config.echo"), &report.config_echo)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// run matrix
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixRow {
    pub profile: DefenseProfile,
    pub seeds: Vec<u64>,
    pub median_cacc: f64,
    pub median_asr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixReport {
    pub rows: Vec<MatrixRow>,
    pub ablation_flags: Vec<String>,
    pub runs: Vec<RunReport>,
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Run every (profile, seed) combination of one base config and aggregate
/// per-profile medians. Returns the full report and per-run outcomes are
/// discarded beyond their reports.
pub fn run_matrix(
    base: &ExperimentConfig,
    profiles: &[DefenseProfile],
    seeds: &[u64],
) -> Result<MatrixReport> {
    if profiles.is_empty() || seeds.is_empty() {
        return Err(Error::config("matrix needs at least one profile and seed"));
    }
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &profile in profiles {
        let mut caccs = Vec::new();
        let mut asrs = Vec::new();
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.profile = profile;
            cfg.seed = seed;
            let outcome = train(&cfg)?;
            caccs.push(outcome.report.final_eval().cacc);
            asrs.push(outcome.report.final_eval().asr);
            runs.push(outcome.report);
        }
        rows.push(MatrixRow {
            profile,
            seeds: seeds.to_vec(),
            median_cacc: median(&caccs),
            median_asr: median(&asrs),
        });
    }
    let ablation_flags = ablation_flags(&rows);
    Ok(MatrixReport {
        rows,
        ablation_flags,
        runs,
    })
}

fn asr_of(rows: &[MatrixRow], profile: DefenseProfile) -> Option<f64> {
    rows.iter()
        .find(|r| r.profile == profile)
        .map(|r| r.median_asr)
}

/// Pass/fail flags for the defense-ordering checks, for whichever profile
/// pairs are present in the matrix.
pub fn ablation_flags(rows: &[MatrixRow]) -> Vec<String> {
    let mut flags = Vec::new();
    let mut check = |label: &str, lhs: Option<f64>, rhs: Option<f64>| {
        if let (Some(a), Some(b)) = (lhs, rhs) {
            let status = if a <= b { "pass" } else { "fail" };
            flags.push(format!("{label}: {status} ({a} <= {b})"));
        }
    };
    let full = asr_of(rows, DefenseProfile::MuscleLoraFull);
    let no_ga = asr_of(rows, DefenseProfile::MuscleLoraNoGa);
    let none = asr_of(rows, DefenseProfile::None);
    let lora = asr_of(rows, DefenseProfile::Lora);
    check("asr(muscle_lora_full) <= asr(muscle_lora_no_ga)", full, no_ga);
    check("asr(muscle_lora_no_ga) <= asr(none)", no_ga, none);
    check("asr(muscle_lora_full) <= asr(lora)", full, lora);
    flags
}

pub fn matrix_csv(report: &MatrixReport) -> String {
    let mut s = String::from("profile,seeds,median_cacc,median_asr\n");
    for r in &report.rows {
        let seeds = r
            .seeds
            .iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(";");
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r.profile,
            seeds,
            fmt_f64(r.median_cacc),
            fmt_f64(r.median_asr)
        );
    }
    for flag in &report.ablation_flags {
        let _ = writeln!(s, "# {flag}");
    }
    s
}

pub fn write_matrix_dir(dir: &Path, report: &MatrixReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("matrix.csv"), matrix_csv(report))?;
    std::fs::write(
        dir.join("matrix.json"),
        serde_json::to_string_pretty(report)?,
    )?;
    Ok(())
}

/// Resolve the run directory for a config: out_dir/profile-seed.
pub fn run_dir(config: &ExperimentConfig) -> PathBuf {
    PathBuf::from(&config.out_dir).join(format!("{}-seed{}", config.profile, config.seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    /// Tiny config that trains in well under a second.
    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            vocab_size: 60,
            topic_per_class: 6,
            seq_min: 4,
            seq_max: 8,
            train_size: 48,
            val_size: 24,
            test_size: 24,
            max_len: 16,
            embed_dim: 8,
            num_heads: 2,
            num_blocks: 1,
            classifier_hidden: 8,
            epochs: 2,
            batch_size: 16,
            aux_size: 16,
            aux_batch_size: 8,
            probe_subset: 16,
            scales: vec![1.0, 2.0],
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn echo_parse_is_identity() {
        let mut cfg = ExperimentConfig::default();
        cfg.scales = vec![1.0, 2.5];
        cfg.trigger_tokens = vec![2, 3];
        cfg.out_dir = "runs/demo".into();
        let parsed = ExperimentConfig::parse(&cfg.echo()).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn parse_handles_comments_and_blank_lines() {
        let cfg = ExperimentConfig::parse(
            "# a comment\n\nseed = 9  # trailing\nprofile = muscle_lora_full\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.profile, DefenseProfile::MuscleLoraFull);
    }

    #[test]
    fn parse_rejects_unknown_key_and_bad_value() {
        assert!(ExperimentConfig::parse("no_such_key = 1").is_err());
        assert!(ExperimentConfig::parse("epochs = many").is_err());
        assert!(ExperimentConfig::parse("just a line").is_err());
    }

    #[test]
    fn attack_kind_switches_default_triggers() {
        let cfg = ExperimentConfig::parse("attack_kind = sentence").unwrap();
        assert_eq!(cfg.trigger_tokens, SENTENCE_TRIGGER.to_vec());
        // explicit triggers survive a later attack_kind line
        let cfg =
            ExperimentConfig::parse("trigger_tokens = 2,3\nattack_kind = sentence").unwrap();
        assert_eq!(cfg.trigger_tokens, vec![2, 3]);
    }

    #[test]
    fn validate_rejects_overflowing_max_len() {
        let mut cfg = ExperimentConfig::default();
        cfg.seq_max = 22; // 22 + 4 trigger tokens > max_len 24
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[0.9, 0.1, 0.2]), 0.2);
        assert_eq!(median(&[4.0, 1.0]), 2.5);
        assert_eq!(median(&[7.0]), 7.0);
    }

    #[test]
    fn train_is_deterministic_and_writes_run_dir() {
        let cfg = tiny_config();
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a.report.epochs).unwrap(),
            serde_json::to_string(&b.report.epochs).unwrap()
        );
        assert_eq!(
            serde_json::to_string(&a.report.snapshots).unwrap(),
            serde_json::to_string(&b.report.snapshots).unwrap()
        );

        let dir = tempdir().unwrap();
        let run = dir.path().join("run");
        let mut outcome = a;
        write_run_dir(&run, &mut outcome).unwrap();
        for file in [
            "config.echo",
            "metrics.csv",
            "frequency.csv",
            "summary.json",
            "checkpoint.bin",
        ] {
            assert!(run.join(file).exists(), "{file} missing");
        }
        let metrics = std::fs::read(run.join("metrics.csv")).unwrap();
        let freq = std::fs::read(run.join("frequency.csv")).unwrap();
        regenerate_reports(&run).unwrap();
        assert_eq!(metrics, std::fs::read(run.join("metrics.csv")).unwrap());
        assert_eq!(freq, std::fs::read(run.join("frequency.csv")).unwrap());
    }

    #[test]
    fn frozen_weights_never_move() {
        let mut cfg = tiny_config();
        cfg.profile = DefenseProfile::MuscleLoraFull;
        let outcome = train(&cfg).unwrap();
        for (name, initial) in &outcome.initial_frozen {
            let id = outcome.model.store.find(name).unwrap();
            let now = &outcome.model.store.get(id).value;
            assert_eq!(
                initial.as_slice(),
                now.as_slice(),
                "frozen tensor {name} moved"
            );
        }
    }

    #[test]
    fn ga_debug_csv_emitted_for_aligned_profiles() {
        let mut cfg = tiny_config();
        cfg.profile = DefenseProfile::GaOnlyLora;
        cfg.ga_debug = true;
        let outcome = train(&cfg).unwrap();
        let csv = outcome.ga_debug_csv.unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,step,mu,g_norm,gc_norm,g_dot_gc,ghat_norm"
        );
        // 2 epochs x 3 steps (48 samples / batch 16)
        assert_eq!(lines.count(), 6);
    }

    #[test]
    fn lora_equals_muscle_no_ga_with_all_ones_scales() {
        let mut a = tiny_config();
        a.profile = DefenseProfile::Lora;
        a.scales = vec![1.0, 1.0];
        let mut b = a.clone();
        b.profile = DefenseProfile::MuscleLoraNoGa;
        let ra = train(&a).unwrap();
        let rb = train(&b).unwrap();
        for (ea, eb) in ra.report.epochs.iter().zip(&rb.report.epochs) {
            assert_eq!(ea.cacc, eb.cacc);
            assert_eq!(ea.asr, eb.asr);
            assert_eq!(ea.loss_clean, eb.loss_clean);
        }
    }

    #[test]
    fn matrix_reports_medians_and_flags() {
        let mut cfg = tiny_config();
        cfg.probe_enabled = false;
        cfg.epochs = 1;
        let report = run_matrix(
            &cfg,
            &[DefenseProfile::None, DefenseProfile::MuscleLoraNoGa],
            &[1, 2, 3],
        )
        .unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.runs.len(), 6);
        assert_eq!(report.ablation_flags.len(), 1); // only the no_ga<=none pair
        let csv = matrix_csv(&report);
        assert!(csv.starts_with("profile,seeds,median_cacc,median_asr\n"));
    }
}

//! Synthetic corpus generation, dirty-label trigger implantation, and
//! auxiliary-pool extraction.
//!
//! Clean samples mix a background token distribution with class-specific
//! topic tokens; trigger tokens are reserved ids that never occur in clean
//! text, mirroring the rare-word property of word-level attacks.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{BufRead, Write};

/// Probability that a clean token is drawn from the class topic set.
pub const TOPIC_MIX: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSample {
    pub tokens: Vec<u32>,
    pub label: usize,
    pub original_label: usize,
    pub poisoned: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerKind {
    /// Independent rare tokens inserted at random positions.
    Word,
    /// One contiguous token sequence inserted at a random boundary.
    Sentence,
}

impl std::str::FromStr for TriggerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(TriggerKind::Word),
            "sentence" => Ok(TriggerKind::Sentence),
            other => Err(Error::config(format!("unknown trigger kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: TriggerKind,
    pub trigger_tokens: Vec<u32>,
    pub target_label: usize,
    pub poison_ratio: f64,
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        if self.trigger_tokens.is_empty() {
            return Err(Error::config("attack needs at least one trigger token"));
        }
        if !(0.0..=0.5).contains(&self.poison_ratio) {
            return Err(Error::config("poison_ratio must lie in [0, 0.5]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub num_classes: usize,
    /// Class-conditional topic token sets; disjoint from each other and
    /// from trigger ids.
    pub topic_tokens: Vec<Vec<u32>>,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub seed: u64,
    /// Reserved ids excluded from the clean generative process.
    pub reserved_tokens: Vec<u32>,
}

impl CorpusSpec {
    /// Standard layout: token 0 is padding; the next `num_reserved` ids are
    /// reserved for triggers; each class gets `topic_per_class` topic ids
    /// after that.
    pub fn standard(
        vocab_size: usize,
        num_classes: usize,
        topic_per_class: usize,
        num_reserved: usize,
        min_len: usize,
        max_len: usize,
        train_size: usize,
        val_size: usize,
        test_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let needed = 1 + num_reserved + num_classes * topic_per_class;
        if vocab_size <= needed + 8 {
            return Err(Error::config(format!(
                "vocab_size {vocab_size} too small for {needed} structural ids"
            )));
        }
        let reserved: Vec<u32> = (1..=num_reserved as u32).collect();
        let mut topic_tokens = Vec::with_capacity(num_classes);
        let mut next = 1 + num_reserved as u32;
        for _ in 0..num_classes {
            topic_tokens.push((next..next + topic_per_class as u32).collect());
            next += topic_per_class as u32;
        }
        let spec = CorpusSpec {
            vocab_size,
            num_classes,
            topic_tokens,
            min_len,
            max_len,
            train_size,
            val_size,
            test_size,
            seed,
            reserved_tokens: reserved,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        if self.topic_tokens.len() != self.num_classes {
            return Err(Error::config("one topic set per class required"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config("invalid sequence length range"));
        }
        let reserved: BTreeSet<u32> = self.reserved_tokens.iter().copied().collect();
        let mut seen = BTreeSet::new();
        for set in &self.topic_tokens {
            for &t in set {
                if t as usize >= self.vocab_size {
                    return Err(Error::config("topic token out of vocabulary"));
                }
                if reserved.contains(&t) {
                    return Err(Error::config(
                        "topic token sets overlap reserved trigger ids",
                    ));
                }
                if !seen.insert(t) {
                    return Err(Error::config("topic token sets must be disjoint"));
                }
            }
        }
        Ok(())
    }

    /// Ids usable as background text: everything except pad, reserved
    /// triggers, and topic tokens.
    fn background_pool(&self) -> Vec<u32> {
        let reserved: BTreeSet<u32> = self.reserved_tokens.iter().copied().collect();
        let topics: BTreeSet<u32> = self.topic_tokens.iter().flatten().copied().collect();
        (1..self.vocab_size as u32)
            .filter(|t| !reserved.contains(t) && !topics.contains(t))
            .collect()
    }
}

/// Generate disjoint clean train/validation/test splits. Labels are
/// balanced within one sample per class in every split.
pub fn gen_clean_corpus(
    spec: &CorpusSpec,
    rng: &mut RngStream,
) -> Result<(Vec<TokenSample>, Vec<TokenSample>, Vec<TokenSample>)> {
    spec.validate()?;
    let background = spec.background_pool();
    if background.is_empty() {
        return Err(Error::config("no background tokens available"));
    }
    let gen_split = |size: usize, rng: &mut RngStream| -> Vec<TokenSample> {
        (0..size)
            .map(|i| {
                let label = i % spec.num_classes;
                let len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
                let topics = &spec.topic_tokens[label];
                let tokens = (0..len)
                    .map(|_| {
                        if rng.uniform() < TOPIC_MIX {
                            topics[rng.below(topics.len())]
                        } else {
                            background[rng.below(background.len())]
                        }
                    })
                    .collect();
                TokenSample {
                    tokens,
                    label,
                    original_label: label,
                    poisoned: false,
                }
            })
            .collect()
    };
    let train = gen_split(spec.train_size, rng);
    let val = gen_split(spec.val_size, rng);
    let test = gen_split(spec.test_size, rng);
    Ok((train, val, test))
}

/// Insert each trigger token once at an independent uniformly random
/// position; relative order of the original tokens is preserved.
pub fn implant_word_trigger(
    sample: &TokenSample,
    trigger_tokens: &[u32],
    max_len: usize,
    rng: &mut RngStream,
) -> Result<TokenSample> {
    if sample.tokens.len() + trigger_tokens.len() > max_len {
        return Err(Error::input(format!(
            "sample length {} + {} triggers exceeds max_len {max_len}",
            sample.tokens.len(),
            trigger_tokens.len()
        )));
    }
    let mut tokens = sample.tokens.clone();
    for &t in trigger_tokens {
        let pos = rng.below(tokens.len() + 1);
        tokens.insert(pos, t);
    }
    Ok(TokenSample {
        tokens,
        ..sample.clone()
    })
}

/// Insert the trigger sequence contiguously at one uniformly random
/// boundary position (prefix insertion included).
pub fn implant_sentence_trigger(
    sample: &TokenSample,
    trigger_sequence: &[u32],
    max_len: usize,
    rng: &mut RngStream,
) -> Result<TokenSample> {
    if sample.tokens.len() + trigger_sequence.len() > max_len {
        return Err(Error::input(format!(
            "sample length {} + trigger length {} exceeds max_len {max_len}",
            sample.tokens.len(),
            trigger_sequence.len()
        )));
    }
    let mut tokens = sample.tokens.clone();
    let pos = rng.below(tokens.len() + 1);
    for (k, &t) in trigger_sequence.iter().enumerate() {
        tokens.insert(pos + k, t);
    }
    Ok(TokenSample {
        tokens,
        ..sample.clone()
    })
}

pub fn implant_trigger(
    sample: &TokenSample,
    attack: &AttackSpec,
    max_len: usize,
    rng: &mut RngStream,
) -> Result<TokenSample> {
    match attack.kind {
        TriggerKind::Word => implant_word_trigger(sample, &attack.trigger_tokens, max_len, rng),
        TriggerKind::Sentence => {
            implant_sentence_trigger(sample, &attack.trigger_tokens, max_len, rng)
        }
    }
}

/// Dirty-label poisoning: implant the trigger into round(ratio * N_eligible)
/// samples drawn uniformly from those whose original label differs from the
/// target, and relabel them to the target. Everything else is untouched.
pub fn poison_dataset(
    train: &[TokenSample],
    attack: &AttackSpec,
    max_len: usize,
    rng: &mut RngStream,
) -> Result<Vec<TokenSample>> {
    attack.validate()?;
    let eligible: Vec<usize> = train
        .iter()
        .enumerate()
        .filter(|(_, s)| s.original_label != attack.target_label)
        .map(|(i, _)| i)
        .collect();
    let count = (attack.poison_ratio * eligible.len() as f64).round() as usize;
    if count > eligible.len() {
        return Err(Error::config(format!(
            "not enough non-target samples: need {count}, have {}",
            eligible.len()
        )));
    }
    let chosen: BTreeSet<usize> = rng
        .sample_without_replacement(eligible.len(), count)
        .into_iter()
        .map(|k| eligible[k])
        .collect();
    let mut out = Vec::with_capacity(train.len());
    for (i, sample) in train.iter().enumerate() {
        if chosen.contains(&i) {
            // per-sample substream keeps placement deterministic regardless
            // of iteration strategy
            let mut srng = rng.substream(i as u64);
            let mut poisoned = implant_trigger(sample, attack, max_len, &mut srng)?;
            poisoned.label = attack.target_label;
            poisoned.poisoned = true;
            out.push(poisoned);
        } else {
            out.push(sample.clone());
        }
    }
    Ok(out)
}

/// Build the attack-success evaluation set: drop target-origin samples,
/// implant the trigger into every survivor. Labels keep the original class;
/// success is measured against predictions, not these labels.
pub fn build_asr_testset(
    test: &[TokenSample],
    attack: &AttackSpec,
    max_len: usize,
    rng: &mut RngStream,
) -> Result<Vec<TokenSample>> {
    attack.validate()?;
    let mut out = Vec::new();
    for (i, sample) in test.iter().enumerate() {
        if sample.original_label == attack.target_label {
            continue;
        }
        let mut srng = rng.substream(i as u64);
        let mut implanted = implant_trigger(sample, attack, max_len, &mut srng)?;
        implanted.poisoned = true;
        out.push(implanted);
    }
    if out.is_empty() {
        return Err(Error::config(
            "attack evaluation set is empty; every test sample has the target label",
        ));
    }
    Ok(out)
}

/// Uniform sample without replacement from the clean validation split.
pub fn sample_auxiliary(
    validation: &[TokenSample],
    n: usize,
    rng: &mut RngStream,
) -> Result<Vec<TokenSample>> {
    if n > validation.len() {
        return Err(Error::config(format!(
            "auxiliary pool size {n} exceeds validation size {}",
            validation.len()
        )));
    }
    if validation.iter().any(|s| s.poisoned) {
        return Err(Error::contract("auxiliary pool source must be clean"));
    }
    let idx = rng.sample_without_replacement(validation.len(), n);
    Ok(idx.into_iter().map(|i| validation[i].clone()).collect())
}

/// True when the sample contains the attack's trigger pattern.
pub fn contains_trigger(sample: &TokenSample, attack: &AttackSpec) -> bool {
    match attack.kind {
        TriggerKind::Word => attack
            .trigger_tokens
            .iter()
            .all(|t| sample.tokens.contains(t)),
        TriggerKind::Sentence => sample
            .tokens
            .windows(attack.trigger_tokens.len())
            .any(|w| w == attack.trigger_tokens.as_slice()),
    }
}

/// Corpus manifest written next to sample files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub vocab_size: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub attack: Option<AttackSpec>,
}

/// Write samples as line-delimited JSON records.
pub fn write_samples(path: &std::path::Path, samples: &[TokenSample]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut file, s)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

pub fn read_samples(path: &std::path::Path) -> Result<Vec<TokenSample>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_manifest(path: &std::path::Path, manifest: &CorpusManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &std::path::Path) -> Result<CorpusManifest> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

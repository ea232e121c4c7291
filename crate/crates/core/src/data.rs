//! Dataset ingestion, validation, batching and a synthetic corpus generator.
//!
//! On disk a dataset is JSONL: the first line is a metadata header, every
//! following line is one conversation. The format is deliberately plain text
//! so corpora can be inspected and diffed by hand.
//!
//! ```text
//! {"c":4,"n":2,"dims":[16,16,16],"classes":["a","b","c","d"]}
//! {"id":"conv-0","utts":[{"spk":0,"y":1,"t":[...],"a":[...],"v":[...]}, ...]}
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("missing metadata header line")]
    MissingHeader,
    #[error("conversation '{conv}': {reason}")]
    Validation { conv: String, reason: String },
    #[error("metadata: {0}")]
    Meta(String),
}

/// One utterance: speaker id, emotion class label, one feature vector per
/// modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    #[serde(rename = "spk")]
    pub speaker: usize,
    #[serde(rename = "y")]
    pub label: usize,
    #[serde(rename = "t")]
    pub text_feat: Vec<f64>,
    #[serde(rename = "a")]
    pub audio_feat: Vec<f64>,
    #[serde(rename = "v")]
    pub visual_feat: Vec<f64>,
}

/// An ordered sequence of utterances; order is conversation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    #[serde(rename = "utts")]
    pub utterances: Vec<UtteranceRecord>,
}

impl Conversation {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.label).collect()
    }

    pub fn speakers(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.speaker).collect()
    }
}

/// Dataset-wide facts: class count, speaker count, per-modality feature
/// dimensions, class names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    #[serde(rename = "c")]
    pub num_classes: usize,
    #[serde(rename = "n")]
    pub num_speakers: usize,
    pub dims: [usize; 3],
    pub classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub conversations: Vec<Conversation>,
}

impl Dataset {
    pub fn num_utterances(&self) -> usize {
        self.conversations.iter().map(Conversation::len).sum()
    }

    /// Checks every invariant the loader promises: dims constant and equal to
    /// the declared ones, labels < C, speakers < n, finite features, m >= 1.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.meta.classes.len() != self.meta.num_classes {
            return Err(DataError::Meta(format!(
                "{} class names for {} classes",
                self.meta.classes.len(),
                self.meta.num_classes
            )));
        }
        if self.meta.num_classes == 0 || self.meta.num_speakers == 0 {
            return Err(DataError::Meta(
                "class and speaker counts must be positive".into(),
            ));
        }
        for conv in &self.conversations {
            let fail = |reason: String| DataError::Validation {
                conv: conv.id.clone(),
                reason,
            };
            if conv.is_empty() {
                return Err(fail("conversation has no utterances".into()));
            }
            for (i, utt) in conv.utterances.iter().enumerate() {
                if utt.label >= self.meta.num_classes {
                    return Err(fail(format!(
                        "utterance {i} label {} out of range (c={})",
                        utt.label, self.meta.num_classes
                    )));
                }
                if utt.speaker >= self.meta.num_speakers {
                    return Err(fail(format!(
                        "utterance {i} speaker {} out of range (n={})",
                        utt.speaker, self.meta.num_speakers
                    )));
                }
                let feats = [
                    ("t", &utt.text_feat, self.meta.dims[0]),
                    ("a", &utt.audio_feat, self.meta.dims[1]),
                    ("v", &utt.visual_feat, self.meta.dims[2]),
                ];
                for (tag, feat, dim) in feats {
                    if feat.len() != dim {
                        return Err(fail(format!(
                            "utterance {i} modality {tag} has dim {} (declared {dim})",
                            feat.len()
                        )));
                    }
                    if !feat.iter().all(|v| v.is_finite()) {
                        return Err(fail(format!(
                            "utterance {i} modality {tag} contains a non-finite value"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Loads and validates a JSONL dataset file.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (_, header) = lines.next().ok_or(DataError::MissingHeader)?;
    let header = header.map_err(io_err)?;
    let meta: DatasetMeta =
        serde_json::from_str(&header).map_err(|source| DataError::Parse { line: 1, source })?;

    let mut conversations = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let conv: Conversation = serde_json::from_str(&line).map_err(|source| DataError::Parse {
            line: idx + 1,
            source,
        })?;
        conversations.push(conv);
    }
    let dataset = Dataset {
        meta,
        conversations,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Writes a dataset in the JSONL format accepted by [`load_jsonl`].
pub fn save_jsonl(path: impl AsRef<Path>, dataset: &Dataset) -> Result<(), DataError> {
    let path = path.as_ref();
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut out = BufWriter::new(file);
    let emit = |e: serde_json::Error| DataError::Parse {
        line: 0,
        source: e,
    };
    writeln!(out, "{}", serde_json::to_string(&dataset.meta).map_err(emit)?).map_err(io_err)?;
    for conv in &dataset.conversations {
        writeln!(out, "{}", serde_json::to_string(conv).map_err(emit)?).map_err(io_err)?;
    }
    out.flush().map_err(io_err)?;
    Ok(())
}

/// Parameters of the synthetic corpus generator.
///
/// Labels follow a per-speaker Markov chain: a speaker keeps their previous
/// emotion with probability `persistence`, otherwise switches uniformly to
/// another class. Class identity shows up in the features as per-class
/// prototype vectors (pairwise distance `separation`, identical construction
/// in every modality) plus unit Gaussian noise. Speaker identity is *not*
/// encoded in the features, so tracking a speaker's emotional thread requires
/// the speaker id — which is exactly what the speaker embedding consumes.
///
/// `ambiguity` is the probability that an utterance's features drop the class
/// prototype entirely (pure noise in every modality) while its label still
/// follows the chain. Such utterances are only classifiable from context,
/// which makes context-window and layer-count ablations measurable.
///
/// `speaker_bias` skews every fresh (non-persisted) label draw toward the
/// speaker's preferred class (speaker s prefers class s mod C). With it,
/// speaker identity genuinely predicts labels, which is what the speaker
/// embedding consumes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub num_convs: usize,
    pub min_utts: usize,
    pub max_utts: usize,
    pub num_classes: usize,
    pub num_speakers: usize,
    pub dims: [usize; 3],
    pub separation: f64,
    pub persistence: f64,
    pub ambiguity: f64,
    pub speaker_bias: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            num_convs: 50,
            min_utts: 8,
            max_utts: 12,
            num_classes: 4,
            num_speakers: 2,
            dims: [16, 16, 16],
            separation: 6.0,
            persistence: 0.6,
            ambiguity: 0.0,
            speaker_bias: 0.0,
        }
    }
}

/// Per-class prototype c: a one-hot direction scaled so that any two
/// prototypes are exactly `separation` apart.
fn prototypes(num_classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    let scale = separation / std::f64::consts::SQRT_2;
    (0..num_classes)
        .map(|c| {
            let mut p = vec![0.0; dim];
            p[c % dim] = scale;
            p
        })
        .collect()
}

/// Generates a deterministic synthetic dataset.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset, DataError> {
    if spec.separation < 0.0 {
        return Err(DataError::Meta("separation must be >= 0".into()));
    }
    if spec.num_classes == 0 || spec.num_speakers == 0 {
        return Err(DataError::Meta(
            "class and speaker counts must be positive".into(),
        ));
    }
    if spec.min_utts == 0 || spec.min_utts > spec.max_utts {
        return Err(DataError::Meta(format!(
            "bad utterance range {}..={}",
            spec.min_utts, spec.max_utts
        )));
    }
    if spec.dims.iter().any(|&d| d < spec.num_classes) {
        return Err(DataError::Meta(format!(
            "feature dims {:?} must be >= the class count {} to place prototypes",
            spec.dims, spec.num_classes
        )));
    }
    if !(0.0..=1.0).contains(&spec.persistence) {
        return Err(DataError::Meta(format!(
            "persistence {} outside [0, 1]",
            spec.persistence
        )));
    }
    if !(0.0..=1.0).contains(&spec.ambiguity) {
        return Err(DataError::Meta(format!(
            "ambiguity {} outside [0, 1]",
            spec.ambiguity
        )));
    }
    if !(0.0..=1.0).contains(&spec.speaker_bias) {
        return Err(DataError::Meta(format!(
            "speaker_bias {} outside [0, 1]",
            spec.speaker_bias
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let protos: Vec<Vec<Vec<f64>>> = spec
        .dims
        .iter()
        .map(|&d| prototypes(spec.num_classes, d, spec.separation))
        .collect();
    let normal = StandardNormal;

    let mut conversations = Vec::with_capacity(spec.num_convs);
    for cid in 0..spec.num_convs {
        let m = rng.random_range(spec.min_utts..=spec.max_utts);
        let mut last_label: HashMap<usize, usize> = HashMap::new();
        let mut utterances = Vec::with_capacity(m);
        for _ in 0..m {
            let speaker = rng.random_range(0..spec.num_speakers);
            let preferred = speaker % spec.num_classes;
            let mut fresh = |rng: &mut ChaCha8Rng, exclude: Option<usize>| -> usize {
                if rng.random::<f64>() < spec.speaker_bias {
                    return preferred;
                }
                match exclude {
                    Some(prev) => {
                        // uniform over the other classes
                        let mut pick = rng.random_range(0..spec.num_classes - 1);
                        if pick >= prev {
                            pick += 1;
                        }
                        pick
                    }
                    None => rng.random_range(0..spec.num_classes),
                }
            };
            let label = match last_label.get(&speaker).copied() {
                Some(prev) if rng.random::<f64>() < spec.persistence => prev,
                Some(prev) => fresh(&mut rng, Some(prev)),
                None => fresh(&mut rng, None),
            };
            last_label.insert(speaker, label);
            let ambiguous = rng.random::<f64>() < spec.ambiguity;
            let mut feats: Vec<Vec<f64>> = Vec::with_capacity(3);
            for (modality, &dim) in spec.dims.iter().enumerate() {
                let proto = &protos[modality][label];
                let feat = (0..dim)
                    .map(|j| {
                        let noise: f64 = normal.sample(&mut rng);
                        if ambiguous {
                            noise
                        } else {
                            proto[j] + noise
                        }
                    })
                    .collect();
                feats.push(feat);
            }
            let visual_feat = feats.pop().unwrap();
            let audio_feat = feats.pop().unwrap();
            let text_feat = feats.pop().unwrap();
            utterances.push(UtteranceRecord {
                speaker,
                label,
                text_feat,
                audio_feat,
                visual_feat,
            });
        }
        conversations.push(Conversation {
            id: format!("synth-{cid}"),
            utterances,
        });
    }

    let meta = DatasetMeta {
        num_classes: spec.num_classes,
        num_speakers: spec.num_speakers,
        dims: spec.dims,
        classes: (0..spec.num_classes).map(|c| format!("class-{c}")).collect(),
    };
    let dataset = Dataset {
        meta,
        conversations,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Groups conversation indices into whole-conversation batches, preserving
/// order. Conversations are never split.
pub fn batch_indices(num_convs: usize, batch_size: usize) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    (0..num_convs)
        .collect::<Vec<_>>()
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Groups whole conversations into batches of at most `batch_size`.
pub fn batch_conversations(convs: &[Conversation], batch_size: usize) -> Vec<Vec<&Conversation>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    convs
        .chunks(batch_size)
        .map(|chunk| chunk.iter().collect())
        .collect()
}

/// Splits conversations into train/valid/test index sets by proportion
/// (deterministic, order-preserving).
pub fn split_indices(num_convs: usize, valid_frac: f64, test_frac: f64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let n_valid = ((num_convs as f64) * valid_frac).round() as usize;
    let n_test = ((num_convs as f64) * test_frac).round() as usize;
    let n_train = num_convs.saturating_sub(n_valid + n_test);
    let train = (0..n_train).collect();
    let valid = (n_train..n_train + n_valid).collect();
    let test = (n_train + n_valid..num_convs).collect();
    (train, valid, test)
}

//! Seeded synthetic stand-ins for frozen image and text encoders.
//!
//! Each sample carries one token sequence per modality. A modality is
//! *informative* for a sample when its tokens are drawn around a fixed
//! per-(class, modality) prototype; otherwise its tokens are pure noise.
//! Class frequencies follow a clipped power law and a fixed fraction of
//! observed labels is corrupted.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::config::{self, parse_value};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FORMAT_LINE: &str = "#gatefuse-dataset v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Image,
    Text,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Image => "image",
            Modality::Text => "text",
        })
    }
}

/// One modality's token embeddings for one sample, `[seq_len, d_model]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub modality: Modality,
    pub tokens: Tensor,
    pub sample_id: u64,
}

impl TokenSequence {
    pub fn seq_len(&self) -> usize {
        self.tokens.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub head_count: usize,
    pub tail_count: usize,
    pub imbalance_exponent: f64,
    pub label_noise_rate: f64,
    pub image_informative: f64,
    pub text_informative: f64,
    pub noise_std: f64,
    pub d_model: usize,
    pub image_tokens: usize,
    pub text_tokens: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_classes: 8,
            head_count: 400,
            tail_count: 25,
            imbalance_exponent: 1.0,
            label_noise_rate: 0.25,
            image_informative: 0.55,
            text_informative: 0.9,
            noise_std: 0.5,
            d_model: 64,
            image_tokens: 12,
            text_tokens: 20,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Spec(m));
        if self.num_classes < 2 {
            return fail(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.tail_count < 1 {
            return fail("tail_count must be >= 1".into());
        }
        if self.head_count < self.tail_count {
            return fail(format!(
                "head_count ({}) < tail_count ({})",
                self.head_count, self.tail_count
            ));
        }
        if !(0.0..1.0).contains(&self.label_noise_rate) {
            return fail(format!("label_noise_rate {} not in [0, 1)", self.label_noise_rate));
        }
        for (name, p) in [
            ("image_informative", self.image_informative),
            ("text_informative", self.text_informative),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} {p} not in [0, 1]"));
            }
        }
        if !(self.imbalance_exponent >= 0.0 && self.noise_std >= 0.0) {
            return fail("imbalance_exponent and noise_std must be non-negative".into());
        }
        if self.d_model < 4 || self.image_tokens == 0 || self.text_tokens == 0 {
            return fail("d_model must be >= 4 and token counts >= 1".into());
        }
        Ok(())
    }

    pub fn seq_len(&self, m: Modality) -> usize {
        match m {
            Modality::Image => self.image_tokens,
            Modality::Text => self.text_tokens,
        }
    }

    /// Number of leading coordinates that carry class signal.
    pub fn signal_dims(&self) -> usize {
        (self.d_model / 4).max(1)
    }

    /// Canonical `dataset.*` entries.
    pub fn entries(&self) -> Vec<(String, String)> {
        let e = |k: &str, v: String| (format!("dataset.{k}"), v);
        vec![
            e("num_classes", self.num_classes.to_string()),
            e("head_count", self.head_count.to_string()),
            e("tail_count", self.tail_count.to_string()),
            e("imbalance_exponent", format!("{:?}", self.imbalance_exponent)),
            e("label_noise_rate", format!("{:?}", self.label_noise_rate)),
            e("image_informative", format!("{:?}", self.image_informative)),
            e("text_informative", format!("{:?}", self.text_informative)),
            e("noise_std", format!("{:?}", self.noise_std)),
            e("d_model", self.d_model.to_string()),
            e("image_tokens", self.image_tokens.to_string()),
            e("text_tokens", self.text_tokens.to_string()),
            e("seed", self.seed.to_string()),
        ]
    }

    /// Sets one field from its unprefixed key. Returns false for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "num_classes" => self.num_classes = parse_value(key, value)?,
            "head_count" => self.head_count = parse_value(key, value)?,
            "tail_count" => self.tail_count = parse_value(key, value)?,
            "imbalance_exponent" => self.imbalance_exponent = parse_value(key, value)?,
            "label_noise_rate" => self.label_noise_rate = parse_value(key, value)?,
            "image_informative" => self.image_informative = parse_value(key, value)?,
            "text_informative" => self.text_informative = parse_value(key, value)?,
            "noise_std" => self.noise_std = parse_value(key, value)?,
            "d_model" => self.d_model = parse_value(key, value)?,
            "image_tokens" => self.image_tokens = parse_value(key, value)?,
            "text_tokens" => self.text_tokens = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn digest(&self) -> String {
        config::sha256_hex(config::render(&self.entries()).as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub image: TokenSequence,
    pub text: TokenSequence,
    pub true_label: usize,
    pub observed_label: usize,
    pub image_informative: bool,
    pub text_informative: bool,
}

impl LabeledSample {
    pub fn sample_id(&self) -> u64 {
        self.image.sample_id
    }

    pub fn tokens(&self, m: Modality) -> &TokenSequence {
        match m {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }

    pub fn is_corrupted(&self) -> bool {
        self.true_label != self.observed_label
    }
}

/// Per-class sample counts from head to tail following `head·(k+1)^(−α)`.
pub fn make_longtail_counts(spec: &DatasetSpec) -> Result<Vec<usize>> {
    if spec.num_classes < 2 {
        return Err(Error::Spec(format!(
            "num_classes must be >= 2, got {}",
            spec.num_classes
        )));
    }
    if spec.tail_count < 1 || spec.head_count < spec.tail_count {
        return Err(Error::Spec(format!(
            "need head_count >= tail_count >= 1, got head {} tail {}",
            spec.head_count, spec.tail_count
        )));
    }
    let (head, tail) = (spec.head_count as f64, spec.tail_count as f64);
    let last = spec.num_classes - 1;
    let mut counts = Vec::with_capacity(spec.num_classes);
    for k in 0..spec.num_classes {
        let c = if k == 0 {
            spec.head_count
        } else if k == last {
            spec.tail_count
        } else {
            let raw = head * ((k + 1) as f64).powf(-spec.imbalance_exponent);
            raw.clamp(tail, head).round() as usize
        };
        let c = counts.last().map_or(c, |&prev: &usize| c.min(prev));
        counts.push(c);
    }
    Ok(counts)
}

fn mix_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn prototypes(spec: &DatasetSpec) -> Vec<[Vec<f64>; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, u64::MAX - 1));
    let sd = spec.signal_dims();
    (0..spec.num_classes)
        .map(|_| {
            let mut one = || {
                let mut v: Vec<f64> = (0..sd).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= norm);
                v
            };
            [one(), one()]
        })
        .collect()
}

fn draw_tokens(
    rng: &mut ChaCha8Rng,
    rows: usize,
    d: usize,
    std: f64,
    prototype: Option<&[f64]>,
) -> Tensor {
    let mut data = Vec::with_capacity(rows * d);
    for _ in 0..rows {
        for j in 0..d {
            let z: f64 = StandardNormal.sample(rng);
            let base = prototype.and_then(|p| p.get(j)).copied().unwrap_or(0.0);
            data.push(base + std * z);
        }
    }
    Tensor::new(vec![rows, d], data).expect("sized by construction")
}

/// Number of labels to corrupt: `⌊rate · n⌋`, robust to representation error.
pub fn corruption_count(rate: f64, n: usize) -> usize {
    (rate * n as f64 + 1e-9).floor() as usize
}

/// Generates the full dataset, ordered by class then by sample id.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<LabeledSample>> {
    spec.validate()?;
    let counts = make_longtail_counts(spec)?;
    let protos = prototypes(spec);
    let d = spec.d_model;
    let mut samples = Vec::with_capacity(counts.iter().sum());
    let mut id = 0u64;
    for (class, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, id));
            let image_informative = rng.random_bool(spec.image_informative);
            let text_informative = rng.random_bool(spec.text_informative);
            let image = draw_tokens(
                &mut rng,
                spec.image_tokens,
                d,
                spec.noise_std,
                image_informative.then_some(protos[class][0].as_slice()),
            );
            let text = draw_tokens(
                &mut rng,
                spec.text_tokens,
                d,
                spec.noise_std,
                text_informative.then_some(protos[class][1].as_slice()),
            );
            samples.push(LabeledSample {
                image: TokenSequence {
                    modality: Modality::Image,
                    tokens: image,
                    sample_id: id,
                },
                text: TokenSequence {
                    modality: Modality::Text,
                    tokens: text,
                    sample_id: id,
                },
                true_label: class,
                observed_label: class,
                image_informative,
                text_informative,
            });
            id += 1;
        }
    }
    let n = samples.len();
    let k = corruption_count(spec.label_noise_rate, n);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, u64::MAX));
    let mut picked = index::sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    for i in picked {
        let s = &mut samples[i];
        let r = rng.random_range(0..spec.num_classes - 1);
        s.observed_label = if r >= s.true_label { r + 1 } else { r };
    }
    Ok(samples)
}

/// Stacks one modality of `samples` into `[batch, seq_len, d_model]`.
pub fn encode_batch<'a, I>(samples: I, modality: Modality) -> Result<Tensor>
where
    I: IntoIterator<Item = &'a LabeledSample>,
{
    let seqs: Vec<&Tensor> = samples
        .into_iter()
        .map(|s| &s.tokens(modality).tokens)
        .collect();
    if seqs.is_empty() {
        return Err(Error::contract("encode_batch of zero samples"));
    }
    Tensor::stack(&seqs)
}

fn write_floats(out: &mut String, t: &Tensor) {
    for (i, v) in t.data().iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&format!("{v:?}"));
    }
}

/// SHA-256 over every sample's id, labels, flags and token bits.
pub fn dataset_digest(samples: &[LabeledSample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.sample_id().to_le_bytes());
        h.update((s.true_label as u64).to_le_bytes());
        h.update((s.observed_label as u64).to_le_bytes());
        h.update([u8::from(s.image_informative), u8::from(s.text_informative)]);
        for t in [&s.image.tokens, &s.text.tokens] {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes the line-delimited dataset file (header lines start with `#`).
pub fn write_dataset(path: &Path, spec: &DatasetSpec, samples: &[LabeledSample]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{FORMAT_LINE}")?;
    writeln!(w, "#spec_digest={}", spec.digest())?;
    for (k, v) in spec.entries() {
        writeln!(w, "#{k}={v}")?;
    }
    writeln!(
        w,
        "#columns=sample_id\ttrue_label\tobserved_label\timage_informative\ttext_informative\timage_tokens\ttext_tokens"
    )?;
    let mut line = String::new();
    for s in samples {
        line.clear();
        line.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t",
            s.sample_id(),
            s.true_label,
            s.observed_label,
            u8::from(s.image_informative),
            u8::from(s.text_informative)
        ));
        write_floats(&mut line, &s.image.tokens);
        line.push('\t');
        write_floats(&mut line, &s.text.tokens);
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset file written by [`write_dataset`], checking the digest.
pub fn read_dataset(path: &Path) -> Result<(DatasetSpec, Vec<LabeledSample>)> {
    let text = fs::read_to_string(path)?;
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l == FORMAT_LINE => {}
        _ => return Err(perr(1, format!("missing `{FORMAT_LINE}` header"))),
    }
    let mut spec = DatasetSpec::default();
    let mut digest = None;
    let mut samples = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if let Some(h) = line.strip_prefix('#') {
            let (k, v) = h
                .split_once('=')
                .ok_or_else(|| perr(lineno, "malformed header".into()))?;
            if k == "spec_digest" {
                digest = Some(v.to_string());
            } else if let Some(key) = k.strip_prefix("dataset.") {
                if !spec.set(key, v).map_err(|e| perr(lineno, e.to_string()))? {
                    return Err(perr(lineno, format!("unknown key `{k}`")));
                }
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 7 {
            return Err(perr(lineno, format!("expected 7 fields, got {}", fields.len())));
        }
        let num = |s: &str| -> Result<u64> {
            s.parse().map_err(|e| perr(lineno, format!("bad integer `{s}`: {e}")))
        };
        let flag = |s: &str| match s {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(perr(lineno, format!("bad flag `{s}`"))),
        };
        let tokens = |s: &str, m: Modality| -> Result<Tensor> {
            let vals = s
                .split(' ')
                .map(|v| v.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| perr(lineno, format!("bad float: {e}")))?;
            Tensor::new(vec![spec.seq_len(m), spec.d_model], vals)
                .map_err(|e| perr(lineno, e.to_string()))
        };
        let id = num(fields[0])?;
        let true_label = num(fields[1])? as usize;
        let observed_label = num(fields[2])? as usize;
        if true_label >= spec.num_classes || observed_label >= spec.num_classes {
            return Err(perr(lineno, "label out of range".into()));
        }
        samples.push(LabeledSample {
            image: TokenSequence {
                modality: Modality::Image,
                tokens: tokens(fields[5], Modality::Image)?,
                sample_id: id,
            },
            text: TokenSequence {
                modality: Modality::Text,
                tokens: tokens(fields[6], Modality::Text)?,
                sample_id: id,
            },
            true_label,
            observed_label,
            image_informative: flag(fields[3])?,
            text_informative: flag(fields[4])?,
        });
    }
    match digest {
        Some(d) if d == spec.digest() => Ok((spec, samples)),
        Some(d) => Err(perr(2, format!("spec digest mismatch: file {d}, computed {}", spec.digest()))),
        None => Err(perr(2, "missing spec_digest".into())),
    }
}

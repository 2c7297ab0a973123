//! Synthetic multi-domain byte corpora from order-2 Markov chains.
//!
//! Each domain draws its own alphabet of printable bytes and a transition
//! table with logits `N(0, 1) / temperature` per two-byte context; lower
//! temperature gives lower entropy. The entropy rate reported for a domain is
//! the empirical context-weighted conditional entropy of the generated
//! stream, i.e. the loss floor of an ideal order-2 predictor.

use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::dataload::{REDPAJAMA_DOMAINS, VALIDATION_FILE};
use crate::error::{Error, Result};

pub const CORPUS_MANIFEST: &str = "corpus.json";
pub const TRAIN_FILE: &str = "train.txt";
const PRINTABLE: std::ops::Range<u8> = 32..127;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub alphabet: usize,
    pub temperature: f64,
}

impl DomainSpec {
    pub fn new(name: &str, alphabet: usize, temperature: f64) -> Self {
        DomainSpec {
            name: name.to_string(),
            alphabet,
            temperature,
        }
    }

    fn validate(&self) -> Result<()> {
        let max = PRINTABLE.len();
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return Err(Error::Config(format!("bad domain name {:?}", self.name)));
        }
        if !(2..=max).contains(&self.alphabet) {
            return Err(Error::Config(format!(
                "domain {}: alphabet {} outside 2..={max}",
                self.name, self.alphabet
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("domain {}: temperature must be > 0", self.name)));
        }
        Ok(())
    }
}

/// Parses `preset` or `name:alphabet:temperature[,...]`.
///
/// Presets: `default` (two domains, low- and high-entropy), `four`
/// (four domains spanning a wide entropy range), `moderate` (four domains
/// over a narrower range) and `redpajama` (seven domains named after the
/// RedPajama sources).
pub fn parse_domains(spec: &str) -> Result<Vec<DomainSpec>> {
    let d = DomainSpec::new;
    let out = match spec {
        "default" => vec![d("code", 24, 0.35), d("web", 64, 1.5)],
        "four" => vec![
            d("a_template", 16, 0.25),
            d("b_code", 32, 0.5),
            d("c_prose", 48, 1.0),
            d("d_noisy", 80, 3.0),
        ],
        "moderate" => vec![
            d("a_code", 24, 0.5),
            d("b_markup", 32, 0.8),
            d("c_prose", 48, 1.2),
            d("d_mixed", 64, 2.0),
        ],
        "redpajama" => {
            let params = [(64, 1.2), (24, 0.35), (48, 0.8), (40, 0.6), (48, 0.7), (32, 0.5), (64, 1.5)];
            REDPAJAMA_DOMAINS
                .iter()
                .zip(params)
                .map(|(n, (a, t))| d(n, a, t))
                .collect()
        }
        _ => spec
            .split(',')
            .map(|part| {
                let f: Vec<&str> = part.trim().split(':').collect();
                let bad = || Error::Config(format!("domain spec {part:?} is not name:alphabet:temperature"));
                if f.len() != 3 {
                    return Err(bad());
                }
                Ok(DomainSpec::new(
                    f[0],
                    f[1].parse().map_err(|_| bad())?,
                    f[2].parse().map_err(|_| bad())?,
                ))
            })
            .collect::<Result<_>>()?,
    };
    if out.len() < 2 {
        return Err(Error::Config("need at least two domains".into()));
    }
    for (i, s) in out.iter().enumerate() {
        s.validate()?;
        if out[..i].iter().any(|o| o.name == s.name) {
            return Err(Error::Config(format!("duplicate domain {}", s.name)));
        }
    }
    Ok(out)
}

/// Order-2 chain over a domain alphabet.
pub struct MarkovSource {
    alphabet: Vec<u8>,
    table: Vec<WeightedIndex<f64>>,
    probs: Vec<Vec<f64>>,
}

impl MarkovSource {
    pub fn new<R: Rng>(spec: &DomainSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut pool: Vec<u8> = PRINTABLE.collect();
        for i in 0..spec.alphabet {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        let alphabet = pool[..spec.alphabet].to_vec();
        let a = spec.alphabet;
        let normal = Normal::new(0.0, 1.0 / spec.temperature).expect("positive std");
        let mut table = Vec::with_capacity(a * a);
        let mut probs = Vec::with_capacity(a * a);
        for _ in 0..a * a {
            let logits: Vec<f64> = (0..a).map(|_| normal.sample(rng)).collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            let p: Vec<f64> = e.iter().map(|x| x / s).collect();
            table.push(WeightedIndex::new(&p).expect("positive weights"));
            probs.push(p);
        }
        Ok(MarkovSource { alphabet, table, probs })
    }

    /// Generates `n` bytes and the empirical conditional entropy (nats/byte).
    pub fn generate<R: Rng>(&self, n: usize, rng: &mut R) -> (Vec<u8>, f64) {
        let a = self.alphabet.len();
        let (mut p2, mut p1) = (rng.gen_range(0..a), rng.gen_range(0..a));
        let mut out = Vec::with_capacity(n);
        let mut visits = vec![0usize; a * a];
        for _ in 0..n {
            let ctx = p2 * a + p1;
            visits[ctx] += 1;
            let next = self.table[ctx].sample(rng);
            out.push(self.alphabet[next]);
            p2 = p1;
            p1 = next;
        }
        let h: f64 = visits
            .iter()
            .zip(&self.probs)
            .map(|(&v, p)| v as f64 * p.iter().filter(|&&q| q > 0.0).map(|q| -q * q.ln()).sum::<f64>())
            .sum::<f64>()
            / n.max(1) as f64;
        (out, h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedDomain {
    pub spec: DomainSpec,
    pub train_bytes: usize,
    pub validation_bytes: usize,
    /// Empirical conditional entropy of the training stream in nats/byte.
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub tokens_per_domain: usize,
    pub domains: Vec<GeneratedDomain>,
}

/// Bytes held out for validation out of a per-domain total.
pub fn validation_size(tokens_per_domain: usize) -> usize {
    (tokens_per_domain / 10).min(16_384)
}

/// Writes `<out>/<domain>/{train.txt,validation.txt}` plus `corpus.json`.
/// The per-domain byte total equals `tokens_per_domain`.
pub fn generate_corpus(
    out: &Path,
    specs: &[DomainSpec],
    tokens_per_domain: usize,
    seed: u64,
    force: bool,
) -> Result<CorpusManifest> {
    let val = validation_size(tokens_per_domain);
    if val < 2 || tokens_per_domain - val < 2 {
        return Err(Error::Config(format!("tokens_per_domain {tokens_per_domain} is too small")));
    }
    if out.exists() {
        let non_empty = fs::read_dir(out).map_err(Error::io(out))?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "{} exists and is not empty (use --force to overwrite)",
                out.display()
            )));
        }
        if non_empty {
            fs::remove_dir_all(out).map_err(Error::io(out))?;
        }
    }
    write_corpus(out, specs, tokens_per_domain, seed)
}

/// Generates into `out` without checking what is already there.
pub fn write_corpus(out: &Path, specs: &[DomainSpec], tokens_per_domain: usize, seed: u64) -> Result<CorpusManifest> {
    let val = validation_size(tokens_per_domain);
    if val < 2 || tokens_per_domain - val < 2 {
        return Err(Error::Config(format!("tokens_per_domain {tokens_per_domain} is too small")));
    }
    fs::create_dir_all(out).map_err(Error::io(out))?;
    let mut domains = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let src = MarkovSource::new(spec, &mut rng)?;
        let (train, entropy) = src.generate(tokens_per_domain - val, &mut rng);
        let (validation, _) = src.generate(val, &mut rng);
        let dir = out.join(&spec.name);
        fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        let p = dir.join(TRAIN_FILE);
        fs::write(&p, &train).map_err(Error::io(&p))?;
        let p = dir.join(VALIDATION_FILE);
        fs::write(&p, &validation).map_err(Error::io(&p))?;
        domains.push(GeneratedDomain {
            spec: spec.clone(),
            train_bytes: train.len(),
            validation_bytes: validation.len(),
            entropy,
        });
    }
    let manifest = CorpusManifest {
        seed,
        tokens_per_domain,
        domains,
    };
    let p = out.join(CORPUS_MANIFEST);
    fs::write(&p, serde_json::to_string_pretty(&manifest)? + "\n").map_err(Error::io(&p))?;
    Ok(manifest)
}

//! Synthetic token-sequence utterances with known token boundaries.
//!
//! Each token owns a random unit-norm prototype vector. A token occupies a
//! random number of frames, each frame being the prototype plus i.i.d.
//! Gaussian noise; optional silence runs (pure noise) are inserted before,
//! between and after tokens. Adjacent duplicate tokens are sampled with a
//! configured probability.
//!
//! Frame indices are 0-based; a boundary `(start, end)` is inclusive.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ctc::TokenSequence;
use crate::error::{Error, Result};
use crate::numcore::Array;

/// Dataset file format version.
pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "# uma-synth-dataset";
const MAX_PROTOTYPE_ATTEMPTS: usize = 1000;
const MAX_COSINE: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub feature_dim: usize,
    /// Inclusive frame-count range per token.
    pub token_duration: (usize, usize),
    /// Inclusive frame-count range per silence run.
    pub silence_duration: (usize, usize),
    /// Chance of a silence run in each of the `U+1` gaps.
    pub silence_prob: f64,
    pub noise_std: f64,
    /// Inclusive token-count range per utterance.
    pub token_count: (usize, usize),
    /// Chance that a token repeats its predecessor.
    pub repeat_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 20,
            feature_dim: 16,
            token_duration: (8, 20),
            silence_duration: (4, 12),
            silence_prob: 0.3,
            noise_std: 0.3,
            token_count: (3, 12),
            repeat_prob: 0.1,
            seed: 1234,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size < 2 {
            return bad(format!("vocab_size {} must be at least 2", self.vocab_size));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive".into());
        }
        for (name, (lo, hi)) in [
            ("token_duration", self.token_duration),
            ("silence_duration", self.silence_duration),
            ("token_count", self.token_count),
        ] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} range [{lo}, {hi}] is empty or starts at 0"));
            }
        }
        for (name, p) in [("silence_prob", self.silence_prob), ("repeat_prob", self.repeat_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} must be finite and non-negative", self.noise_std));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `T × D_in`.
    pub features: Array<f64>,
    pub tokens: TokenSequence,
    /// Inclusive frame range of each token.
    pub boundaries: Vec<(usize, usize)>,
    /// `true` for silence frames.
    pub silence: Vec<bool>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    /// Checks ordering, coverage and the silence mask against the boundaries.
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::format("utterance", format!("{}: {d}", self.id)));
        let t = self.frames();
        if self.boundaries.len() != self.tokens.len() {
            return bad(format!(
                "{} boundaries for {} tokens",
                self.boundaries.len(),
                self.tokens.len()
            ));
        }
        if self.silence.len() != t {
            return bad(format!("silence mask has {} entries for {t} frames", self.silence.len()));
        }
        let mut next = 0;
        for &(s, e) in &self.boundaries {
            if s < next || e < s || e >= t {
                return bad(format!("boundary ({s}, {e}) out of order or range"));
            }
            if self.silence[next..s].iter().any(|&x| !x) || self.silence[s..=e].iter().any(|&x| x) {
                return bad(format!("silence mask disagrees with boundary ({s}, {e})"));
            }
            next = e + 1;
        }
        if self.silence[next..].iter().any(|&x| !x) {
            return bad("non-silence frames after the last token".into());
        }
        Ok(())
    }

    /// Frames at which one token hands over to the next: the first frame of
    /// the next token when they touch, otherwise the middle of the silence
    /// gap. One entry per adjacent token pair.
    pub fn transition_frames(&self) -> Vec<usize> {
        self.boundaries
            .windows(2)
            .map(|w| (w[0].1 + 1 + w[1].0) / 2)
            .collect()
    }
}

/// `k` unit vectors in `dim` dimensions with pairwise `|cos| < 0.8`.
pub fn make_prototypes(k: usize, dim: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 prototypes, got {k}")));
    }
    if dim == 0 {
        return Err(Error::InvalidArgument("prototype dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(k);
    while out.len() < k {
        let mut accepted = false;
        for _ in 0..MAX_PROTOTYPE_ATTEMPTS {
            let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-6 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            let separated = out.iter().all(|p| {
                let cos: f64 = p.iter().zip(&v).map(|(a, b)| a * b).sum();
                cos.abs() < MAX_COSINE
            });
            if separated {
                out.push(v);
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(Error::PrototypeSeparation {
                k,
                dim,
                attempts: MAX_PROTOTYPE_ATTEMPTS,
            });
        }
    }
    Ok(out)
}

/// Samples one utterance. `prototypes` must hold `cfg.vocab_size` vectors of
/// length `cfg.feature_dim`.
pub fn gen_utterance<R: Rng>(cfg: &SynthConfig, prototypes: &[Vec<f64>], id: String, rng: &mut R) -> Utterance {
    let k = cfg.vocab_size;
    let dim = cfg.feature_dim;
    let count = rng.random_range(cfg.token_count.0..=cfg.token_count.1);
    let mut tokens = Vec::with_capacity(count);
    for i in 0..count {
        let tok = if i == 0 {
            rng.random_range(0..k)
        } else {
            let prev = tokens[i - 1];
            if rng.random::<f64>() < cfg.repeat_prob {
                prev
            } else {
                // uniform over the other k-1 tokens
                let r = rng.random_range(0..k - 1);
                if r >= prev { r + 1 } else { r }
            }
        };
        tokens.push(tok);
    }

    let mut rows: Vec<Option<usize>> = Vec::new();
    let mut boundaries = Vec::with_capacity(count);
    let silence_gap = |rows: &mut Vec<Option<usize>>, rng: &mut R| {
        if rng.random::<f64>() < cfg.silence_prob {
            let d = rng.random_range(cfg.silence_duration.0..=cfg.silence_duration.1);
            rows.extend(std::iter::repeat_n(None, d));
        }
    };
    for &tok in &tokens {
        silence_gap(&mut rows, rng);
        let d = rng.random_range(cfg.token_duration.0..=cfg.token_duration.1);
        let start = rows.len();
        rows.extend(std::iter::repeat_n(Some(tok), d));
        boundaries.push((start, rows.len() - 1));
    }
    silence_gap(&mut rows, rng);

    let noise = Normal::new(0.0, cfg.noise_std).expect("validated noise");
    let mut data = Vec::with_capacity(rows.len() * dim);
    for row in &rows {
        for j in 0..dim {
            let base = row.map_or(0.0, |tok| prototypes[tok][j]);
            let n = if cfg.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            data.push(base + n);
        }
    }
    Utterance {
        id,
        features: Array::new(&[rows.len(), dim], data).expect("non-empty utterance"),
        tokens: TokenSequence::new(tokens, k).expect("tokens drawn below vocab size"),
        boundaries,
        silence: rows.iter().map(Option::is_none).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.txt", self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// Partition sizes for `n` utterances: dev and test get `max(1, n/10)` each.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let held = (n / 10).max(1);
    (n - 2 * held, held, held)
}

/// Generates `n` utterances. Prototypes come from stream 0 of `seed` and
/// utterance `i` from stream `i+1`, so each utterance depends only on
/// `(cfg, seed, i)`. Utterances are numbered in train, dev, test order.
pub fn gen_split(cfg: &SynthConfig, n: usize, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    if n < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 utterances, got {n}")));
    }
    let protos = make_prototypes(cfg.vocab_size, cfg.feature_dim, seed)?;
    let width = n.to_string().len().max(5);
    let mut utts: Vec<Utterance> = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            gen_utterance(cfg, &protos, format!("utt{i:0width$}"), &mut rng)
        })
        .collect();
    let (n_train, n_dev, _) = split_sizes(n);
    let test = utts.split_off(n_train + n_dev);
    let dev = utts.split_off(n_train);
    Ok(Dataset {
        config: SynthConfig { seed, ..cfg.clone() },
        train: utts,
        dev,
        test,
    })
}

/// Text serialization of one partition.
///
/// ```text
/// # uma-synth-dataset 1
/// # split train
/// # config {...json...}
/// # count N
/// utt <id> <frames> <dim>
/// tokens <k> <k> ...
/// bounds <start>:<end> ...
/// silence <0|1 per frame>
/// <frames lines of dim space-separated values>
/// ```
pub fn format_split(split: Split, cfg: &SynthConfig, utts: &[Utterance]) -> String {
    let mut s = String::new();
    let cfg_json = serde_json::to_string(cfg).expect("config serializes");
    writeln!(s, "{MAGIC} {FORMAT_VERSION}").unwrap();
    writeln!(s, "# split {}", split.name()).unwrap();
    writeln!(s, "# config {cfg_json}").unwrap();
    writeln!(s, "# count {}", utts.len()).unwrap();
    for u in utts {
        writeln!(s, "utt {} {} {}", u.id, u.frames(), u.features.cols()).unwrap();
        let toks: Vec<String> = u.tokens.as_slice().iter().map(usize::to_string).collect();
        writeln!(s, "tokens {}", toks.join(" ")).unwrap();
        let bounds: Vec<String> = u.boundaries.iter().map(|(a, b)| format!("{a}:{b}")).collect();
        writeln!(s, "bounds {}", bounds.join(" ")).unwrap();
        let mask: String = u.silence.iter().map(|&b| if b { '1' } else { '0' }).collect();
        writeln!(s, "silence {mask}").unwrap();
        for t in 0..u.frames() {
            let row: Vec<String> = u.features.row(t).iter().map(|v| format!("{v:.6}")).collect();
            writeln!(s, "{}", row.join(" ")).unwrap();
        }
    }
    s
}

pub fn write_split(path: &Path, split: Split, cfg: &SynthConfig, utts: &[Utterance]) -> Result<()> {
    fs::write(path, format_split(split, cfg, utts)).map_err(|e| Error::io(path, e))
}

/// Writes `train.txt`, `dev.txt` and `test.txt` into `dir`.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for split in Split::ALL {
        write_split(&dir.join(split.file_name()), split, &data.config, data.split(split))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitFile {
    pub split: Split,
    pub config: SynthConfig,
    pub utterances: Vec<Utterance>,
}

pub fn read_split(path: &Path) -> Result<SplitFile> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, Ok(l))) => Ok((i + 1, l)),
            Some((_, Err(e))) => Err(Error::io(path, e)),
            None => Err(Error::format("dataset", format!("unexpected end of file, expected {what}"))),
        }
    };
    let bad = |line: usize, d: String| Error::format("dataset", format!("line {line}: {d}"));
    let field = |line: usize, text: &str, key: &str| -> Result<String> {
        text.strip_prefix(key)
            .map(|r| r.trim_start().to_string())
            .ok_or_else(|| bad(line, format!("expected `{key}`")))
    };

    let (ln, l) = next("header")?;
    let version = field(ln, &l, MAGIC)?;
    let version: u32 = version.parse().map_err(|_| bad(ln, format!("bad version {version}")))?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            what: "dataset",
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (ln, l) = next("split")?;
    let split: Split = field(ln, &l, "# split")?.parse()?;
    let (ln, l) = next("config")?;
    let config: SynthConfig = serde_json::from_str(&field(ln, &l, "# config")?)
        .map_err(|e| bad(ln, format!("config: {e}")))?;
    let (ln, l) = next("count")?;
    let count = field(ln, &l, "# count")?;
    let count: usize = count.parse().map_err(|_| bad(ln, format!("bad count {count}")))?;

    let mut utterances = Vec::with_capacity(count);
    for _ in 0..count {
        let (ln, l) = next("utterance")?;
        let head = field(ln, &l, "utt")?;
        let parts: Vec<&str> = head.split_whitespace().collect();
        let (id, frames, dim) = match parts.as_slice() {
            [id, t, d] => (
                id.to_string(),
                t.parse::<usize>().map_err(|_| bad(ln, "bad frame count".into()))?,
                d.parse::<usize>().map_err(|_| bad(ln, "bad dimension".into()))?,
            ),
            _ => return Err(bad(ln, "expected `utt <id> <frames> <dim>`".into())),
        };
        let (ln, l) = next("tokens")?;
        let tokens = field(ln, &l, "tokens")?
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|_| bad(ln, format!("bad token {t}"))))
            .collect::<Result<Vec<_>>>()?;
        let tokens = TokenSequence::new(tokens, config.vocab_size).map_err(|e| bad(ln, e.to_string()))?;
        let (ln, l) = next("bounds")?;
        let boundaries = field(ln, &l, "bounds")?
            .split_whitespace()
            .map(|b| {
                let (a, c) = b.split_once(':').ok_or_else(|| bad(ln, format!("bad boundary {b}")))?;
                let p = |x: &str| x.parse::<usize>().map_err(|_| bad(ln, format!("bad boundary {b}")));
                Ok((p(a)?, p(c)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let (ln, l) = next("silence")?;
        let silence = field(ln, &l, "silence")?
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(bad(ln, format!("bad silence flag {c}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let mut data = Vec::with_capacity(frames * dim);
        for _ in 0..frames {
            let (ln, l) = next("feature row")?;
            let before = data.len();
            for v in l.split_whitespace() {
                data.push(v.parse::<f64>().map_err(|_| bad(ln, format!("bad value {v}")))?);
            }
            if data.len() - before != dim {
                return Err(bad(ln, format!("expected {dim} values")));
            }
        }
        let features = Array::new(&[frames, dim], data).map_err(|e| bad(ln, e.to_string()))?;
        let u = Utterance {
            id,
            features,
            tokens,
            boundaries,
            silence,
        };
        u.validate()?;
        utterances.push(u);
    }
    if let Some((ln, Ok(l))) = lines.next() {
        if !l.trim().is_empty() {
            return Err(bad(ln + 1, "trailing content".into()));
        }
    }
    Ok(SplitFile {
        split,
        config,
        utterances,
    })
}

/// Reads the three partition files written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mut parts = Split::ALL.iter().map(|&s| read_split(&dir.join(s.file_name())));
    let train = parts.next().unwrap()?;
    let dev = parts.next().unwrap()?;
    let test = parts.next().unwrap()?;
    if train.config != dev.config || train.config != test.config {
        return Err(Error::format("dataset", "partition files disagree on the generator config"));
    }
    Ok(Dataset {
        config: train.config,
        train: train.utterances,
        dev: dev.utterances,
        test: test.utterances,
    })
}

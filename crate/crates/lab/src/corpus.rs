//! Token streams: a byte-level text tokenizer, the synthetic key-recall
//! task, splits and the chunk samplers.

use std::path::Path;

use rpa_core::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub const MARK: usize = 0;
pub const QUERY: usize = 1;
pub const FIRST_KEY: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub ids: Vec<usize>,
    pub vocab: usize,
    pub source: String,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Contiguous train/val/test split by fractions (test gets the rest).
    pub fn split(&self, train_frac: f64, val_frac: f64) -> Result<Splits> {
        if !(train_frac > 0.0 && val_frac > 0.0 && train_frac + val_frac < 1.0) {
            return Err(LabError::config("split fractions must be positive and sum below 1"));
        }
        let n = self.ids.len();
        let a = (n as f64 * train_frac) as usize;
        let b = a + (n as f64 * val_frac) as usize;
        Ok(Splits {
            train: self.ids[..a].to_vec(),
            val: self.ids[a..b].to_vec(),
            test: self.ids[b..].to_vec(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Result<&[usize]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(LabError::config(format!("unknown split {other:?} (train, val, test)"))),
        }
    }
}

pub fn encode_bytes(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

pub fn decode_bytes(ids: &[usize]) -> Result<String> {
    let bytes = ids
        .iter()
        .map(|&i| u8::try_from(i).map_err(|_| LabError::config(format!("id {i} is not a byte"))))
        .collect::<Result<Vec<u8>>>()?;
    String::from_utf8(bytes).map_err(|e| LabError::config(e.to_string()))
}

pub fn load_text(path: &Path) -> Result<Corpus> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    if text.is_empty() {
        return Err(LabError::config(format!("{}: empty corpus", path.display())));
    }
    Ok(Corpus {
        ids: encode_bytes(&text),
        vocab: 256,
        source: format!("text:{}", path.display()),
    })
}

/// Records `MARK k f_1 .. f_g QUERY k`: a key, a filler run of length
/// `g` drawn from a sparse bigram chain, and the key again after the query.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTask {
    pub tokens: usize,
    pub keys: usize,
    pub filler: usize,
    /// Successors per filler token in the chain.
    pub branching: usize,
    pub gap_min: usize,
    pub gap_max: usize,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            tokens: 120_000,
            keys: 8,
            filler: 22,
            branching: 2,
            gap_min: 8,
            gap_max: 16,
        }
    }
}

impl SyntheticTask {
    pub fn vocab(&self) -> usize {
        FIRST_KEY + self.keys + self.filler
    }

    pub fn first_filler(&self) -> usize {
        FIRST_KEY + self.keys
    }

    pub fn validate(&self) -> Result<()> {
        if self.keys == 0 || self.filler == 0 || self.branching == 0 {
            return Err(LabError::config("synthetic task needs keys, filler and branching"));
        }
        if self.gap_min == 0 || self.gap_min > self.gap_max {
            return Err(LabError::config("synthetic gap range must satisfy 0 < gap_min <= gap_max"));
        }
        if self.tokens < 4 * (self.gap_max + 4) {
            return Err(LabError::config("synthetic corpus too short for its gap"));
        }
        Ok(())
    }

    pub fn generate(&self, seed: u64) -> Result<Corpus> {
        self.validate()?;
        let mut rng = Rng::new(seed).derive("corpus.synthetic");
        let f0 = self.first_filler();
        let succ: Vec<Vec<usize>> = (0..self.filler)
            .map(|_| (0..self.branching).map(|_| f0 + rng.below(self.filler)).collect())
            .collect();
        let mut ids = Vec::with_capacity(self.tokens + self.gap_max + 4);
        let mut f = f0 + rng.below(self.filler);
        while ids.len() < self.tokens {
            let key = FIRST_KEY + rng.below(self.keys);
            ids.push(MARK);
            ids.push(key);
            let gap = self.gap_min + rng.below(self.gap_max - self.gap_min + 1);
            for _ in 0..gap {
                ids.push(f);
                f = succ[f - f0][rng.below(self.branching)];
            }
            ids.push(QUERY);
            ids.push(key);
        }
        ids.truncate(self.tokens);
        Ok(Corpus {
            ids,
            vocab: self.vocab(),
            source: format!("synthetic:seed={seed}"),
        })
    }
}

/// Positions whose token is fixed by earlier content: the key after each
/// query whose opening marker lies inside the stream. Returns `(position,
/// token)`.
pub fn recall_targets(ids: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut key = None;
    for i in 0..ids.len() {
        if ids[i] == MARK && i + 1 < ids.len() {
            key = Some(ids[i + 1]);
        }
        if ids[i] == QUERY && i + 1 < ids.len() {
            if let Some(k) = key.take() {
                out.push((i + 1, k));
            }
        }
    }
    out
}

/// Predicts each recall target from the key read after its marker.
pub fn recall_oracle(ids: &[usize], pos: usize) -> Option<usize> {
    let q = pos.checked_sub(1)?;
    if ids[q] != QUERY {
        return None;
    }
    let m = ids[..q].iter().rposition(|&t| t == MARK)?;
    ids.get(m + 1).copied()
}

/// One batch: inputs and next-token targets, both `[batch, context]`
/// flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Vec<usize>,
    pub y: Vec<usize>,
    pub batch: usize,
    pub context: usize,
    pub starts: Vec<usize>,
}

fn check_len(len: usize, context: usize) -> Result<()> {
    if context == 0 || len <= context + 1 {
        return Err(LabError::config(format!(
            "context {context} needs a split longer than {} tokens (have {len})",
            context + 1
        )));
    }
    Ok(())
}

/// Random contiguous chunks with uniform start offsets in `[0, N - T - 1]`.
pub fn train_chunks(ids: &[usize], context: usize, batch: usize, rng: &mut Rng) -> Result<Batch> {
    check_len(ids.len(), context)?;
    let span = ids.len() - context - 1;
    let mut x = Vec::with_capacity(batch * context);
    let mut y = Vec::with_capacity(batch * context);
    let mut starts = Vec::with_capacity(batch);
    for _ in 0..batch {
        let s = rng.below(span + 1);
        starts.push(s);
        x.extend_from_slice(&ids[s..s + context]);
        y.extend_from_slice(&ids[s + 1..s + context + 1]);
    }
    Ok(Batch {
        x,
        y,
        batch,
        context,
        starts,
    })
}

/// Sequential, non-overlapping windows with stride `context`; the short
/// tail is dropped. There are `floor((N - 1) / context)` windows.
pub fn eval_chunks(ids: &[usize], context: usize) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    check_len(ids.len(), context)?;
    let n = (ids.len() - 1) / context;
    Ok((0..n)
        .map(|i| {
            let s = i * context;
            (ids[s..s + context].to_vec(), ids[s + 1..s + context + 1].to_vec())
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let s = "Sinkhorn, 1967: row/col scaling!\n\tdone";
        assert_eq!(decode_bytes(&encode_bytes(s)).unwrap(), s);
        assert!(decode_bytes(&[300]).is_err());
    }

    #[test]
    fn synthetic_is_seeded() {
        let t = SyntheticTask::default();
        assert_eq!(t.generate(3).unwrap(), t.generate(3).unwrap());
        assert_ne!(t.generate(3).unwrap().ids, t.generate(4).unwrap().ids);
        let c = t.generate(3).unwrap();
        assert_eq!(c.len(), t.tokens);
        assert!(c.ids.iter().all(|&i| i < c.vocab));
    }

    #[test]
    fn recall_positions_are_determined() {
        let t = SyntheticTask::default();
        let c = t.generate(1).unwrap();
        let targets = recall_targets(&c.ids);
        assert!(targets.len() > t.tokens / (t.gap_max + 4) - 2);
        for &(p, k) in &targets {
            assert_eq!(c.ids[p], k);
            assert_eq!(recall_oracle(&c.ids, p), Some(k));
            let m = c.ids[..p].iter().rposition(|&x| x == MARK).unwrap();
            let d = p - m;
            assert!(d >= t.gap_min + 3 && d <= t.gap_max + 3);
        }
        // a perfect predictor puts all mass on the oracle token: zero CE there
        let ce: f64 = targets
            .iter()
            .map(|&(p, k)| if recall_oracle(&c.ids, p) == Some(k) { 0.0 } else { f64::INFINITY })
            .sum();
        assert_eq!(ce, 0.0);
    }

    #[test]
    fn bad_tasks_rejected() {
        let t = SyntheticTask::default();
        assert!(SyntheticTask { gap_min: 20, ..t }.generate(0).is_err());
        assert!(SyntheticTask { keys: 0, ..t }.generate(0).is_err());
        assert!(SyntheticTask { tokens: 10, ..t }.generate(0).is_err());
    }

    #[test]
    fn splits_partition_the_stream() {
        let c = SyntheticTask::default().generate(0).unwrap();
        let s = c.split(0.8, 0.1).unwrap();
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), c.len());
        assert_eq!([&s.train[..], &s.val[..], &s.test[..]].concat(), c.ids);
        assert!(c.split(0.9, 0.1).is_err());
        assert!(s.get("dev").is_err());
    }

    #[test]
    fn train_chunks_shift_and_seed() {
        let ids: Vec<usize> = (0..500).map(|i| i % 37).collect();
        let b = train_chunks(&ids, 16, 4, &mut Rng::new(1)).unwrap();
        for r in 0..4 {
            for t in 0..15 {
                assert_eq!(b.y[r * 16 + t], b.x[r * 16 + t + 1]);
            }
            assert_eq!(b.x[r * 16], ids[b.starts[r]]);
        }
        let again = train_chunks(&ids, 16, 4, &mut Rng::new(1)).unwrap();
        assert_eq!(b, again);
        assert!(train_chunks(&ids, 500, 1, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn train_offsets_are_uniform() {
        let ids = vec![0; 1000 + 17];
        let mut rng = Rng::new(7);
        let bins = 20;
        let span = ids.len() - 16 - 1 + 1;
        let mut counts = vec![0usize; bins];
        let n = 100_000;
        for _ in 0..n / 100 {
            let b = train_chunks(&ids, 16, 100, &mut rng).unwrap();
            for s in b.starts {
                counts[s * bins / span] += 1;
            }
        }
        let e = n as f64 / bins as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // 99.9th percentile of chi-square with 19 degrees of freedom
        assert!(chi2 < 43.82, "{chi2}");
    }

    #[test]
    fn eval_windows_cover_each_token_once() {
        let ids: Vec<usize> = (0..103).collect();
        let w = eval_chunks(&ids, 10).unwrap();
        assert_eq!(w.len(), (103 - 1) / 10);
        let ys: Vec<usize> = w.iter().flat_map(|(_, y)| y.clone()).collect();
        assert_eq!(ys, (1..=100).collect::<Vec<_>>());
    }
}

//! Vocabulary, tokenisation and batching for one-sentence-per-line text.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    /// One token per line; the line number is the id.
    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_owned).collect();
        if tokens.len() < RESERVED.len() || tokens[..4] != RESERVED {
            return Err(Error::Input("vocabulary file must start with the four reserved tokens".into()));
        }
        let vocab = Self::from_tokens(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::Input("vocabulary file contains duplicate tokens".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

/// Reserved tokens plus the `max_vocab − 4` most frequent whitespace tokens.
/// Ties keep first-occurrence order.
pub fn build_vocab<S: AsRef<str>>(lines: &[S], max_vocab: usize) -> Result<Vocabulary> {
    if lines.is_empty() {
        return Err(Error::Input("cannot build a vocabulary from an empty corpus".into()));
    }
    if max_vocab < RESERVED.len() {
        return Err(Error::Config(format!("vocab_max must be at least {}", RESERVED.len())));
    }
    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
    let mut order = 0;
    for line in lines {
        for tok in line.as_ref().split_whitespace() {
            if RESERVED.contains(&tok) {
                continue;
            }
            let entry = counts.entry(tok).or_insert_with(|| {
                order += 1;
                (0, order)
            });
            entry.0 += 1;
        }
    }
    let mut ranked: Vec<(&str, usize, usize)> = counts.into_iter().map(|(t, (c, o))| (t, c, o)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(ranked.into_iter().take(max_vocab - RESERVED.len()).map(|(t, _, _)| t.to_owned()));
    Ok(Vocabulary::from_tokens(tokens))
}

/// `bos, ids…, eos`, truncated to at most `max_len` ids with eos kept last.
pub fn encode_line(line: &str, vocab: &Vocabulary, max_len: usize) -> Vec<usize> {
    let body = max_len.saturating_sub(2);
    let mut ids = Vec::with_capacity(max_len.min(64));
    ids.push(BOS);
    ids.extend(line.split_whitespace().take(body).map(|t| vocab.id(t)));
    ids.push(EOS);
    ids
}

/// Inverse of [`encode_line`] up to out-of-vocabulary words.
pub fn decode(ids: &[usize], vocab: &Vocabulary) -> String {
    ids.iter()
        .filter(|&&i| i != BOS && i != EOS && i != PAD)
        .filter_map(|&i| vocab.token(i))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text.lines().map(str::to_owned).collect())
}

pub fn encode_corpus<S: AsRef<str>>(lines: &[S], vocab: &Vocabulary, max_len: usize) -> Vec<Vec<usize>> {
    lines.iter().map(|l| encode_line(l.as_ref(), vocab, max_len)).collect()
}

/// Padded id matrix for a group of encoded sentences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// Row-major `size × width` ids; PAD after each length.
    pub tokens: Vec<usize>,
    pub lengths: Vec<usize>,
    pub width: usize,
    /// Corpus positions of the rows.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_examples(corpus: &[Vec<usize>], indices: &[usize]) -> Self {
        let width = indices.iter().map(|&i| corpus[i].len()).max().unwrap_or(0);
        let mut tokens = vec![PAD; indices.len() * width];
        let mut lengths = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            let seq = &corpus[i];
            tokens[r * width..r * width + seq.len()].copy_from_slice(seq);
            lengths.push(seq.len());
        }
        Batch {
            tokens,
            lengths,
            width,
            indices: indices.to_vec(),
        }
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.tokens[r * self.width..r * self.width + self.lengths[r]]
    }

    /// Target tokens per sentence (everything after bos, eos included).
    pub fn target_count(&self) -> usize {
        self.lengths.iter().map(|l| l.saturating_sub(1)).sum()
    }
}

/// Splits the corpus into batches, optionally shuffled by a seed-keyed stream.
/// The last short batch is kept.
pub fn batches(corpus: &[Vec<usize>], batch_size: usize, shuffle: Option<(u64, u64)>) -> Result<Vec<Batch>> {
    if batch_size < 1 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    if let Some((seed, epoch)) = shuffle {
        order.shuffle(&mut rng::stream(seed, Purpose::Shuffle, epoch, 0));
    }
    Ok(order
        .chunks(batch_size)
        .map(|idx| Batch::from_examples(corpus, idx))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lines(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn vocab_size_and_order() {
        let v = build_vocab(&lines(&["b a", "c a"]), 10).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(&v.tokens()[4..], &["a", "b", "c"]);
        assert!(build_vocab::<String>(&[], 10).is_err());
        assert!(build_vocab(&lines(&["a"]), 3).is_err());
    }

    #[test]
    fn vocab_truncates_and_maps_rare_types_to_unk() {
        // 30k types; the first 19996 appear twice so they win
        let mut corpus = Vec::new();
        for i in 0..30_000 {
            let reps = if i < 19_996 { 2 } else { 1 };
            for _ in 0..reps {
                corpus.push(format!("w{i}"));
            }
        }
        let v = build_vocab(&corpus, 20_000).unwrap();
        assert_eq!(v.len(), 20_000);
        assert_eq!(v.id("w29999"), UNK);
        assert_ne!(v.id("w0"), UNK);
    }

    #[test]
    fn vocab_is_deterministic_and_round_trips() {
        let corpus = lines(&["the cat sat", "the dog sat", "a cat ran"]);
        let a = build_vocab(&corpus, 50).unwrap();
        let b = build_vocab(&corpus, 50).unwrap();
        assert_eq!(a.to_file_string(), b.to_file_string());
        assert_eq!(Vocabulary::parse(&a.to_file_string()).unwrap(), a);
        assert!(Vocabulary::parse("x\ny\n").is_err());
    }

    #[test]
    fn reserved_tokens_in_text_map_to_reserved_ids() {
        let v = build_vocab(&lines(&["a <unk> b"]), 10).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(encode_line("a <unk> b", &v, 10), vec![BOS, 4, UNK, 5, EOS]);
    }

    #[test]
    fn encode_examples() {
        let v = build_vocab(&lines(&["x y"]), 10).unwrap();
        assert_eq!(encode_line("", &v, 200), vec![BOS, EOS]);
        assert_eq!(encode_line("x zz", &v, 200), vec![BOS, 4, UNK, EOS]);
        let long = vec!["x"; 500].join(" ");
        let ids = encode_line(&long, &v, 200);
        assert_eq!(ids.len(), 200);
        assert_eq!(*ids.last().unwrap(), EOS);
        assert_eq!(ids[0], BOS);
    }

    #[test]
    fn batch_examples() {
        let corpus: Vec<Vec<usize>> = (0..100).map(|i| vec![BOS; 2 + i % 5]).collect();
        let sizes: Vec<usize> = batches(&corpus, 32, None).unwrap().iter().map(Batch::size).collect();
        assert_eq!(sizes, vec![32, 32, 32, 4]);
        let a = batches(&corpus, 32, Some((7, 0))).unwrap();
        let b = batches(&corpus, 32, Some((7, 0))).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].indices, batches(&corpus, 32, Some((7, 1))).unwrap()[0].indices);
        let plain = batches(&corpus, 32, None).unwrap();
        assert_eq!(plain[0].indices, (0..32).collect::<Vec<_>>());
        assert!(batches(&corpus, 0, None).is_err());
    }

    #[test]
    fn padding_follows_lengths() {
        let corpus = vec![vec![2, 5, 3], vec![2, 3], vec![2, 6, 7, 8, 3]];
        let b = Batch::from_examples(&corpus, &[0, 1, 2]);
        assert_eq!(b.width, 5);
        assert_eq!(b.row(1), &[2, 3]);
        assert_eq!(&b.tokens[5..10], &[2, 3, PAD, PAD, PAD]);
        assert_eq!(b.target_count(), 2 + 1 + 4);
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(words in proptest::collection::vec("[a-e]{1,3}", 0..30)) {
            let line = words.join(" ");
            let v = build_vocab(&[line.clone(), "zz".to_string()], 1000).unwrap();
            let ids = encode_line(&line, &v, 200);
            prop_assert_eq!(decode(&ids, &v), line);
        }

        #[test]
        fn batching_conserves_tokens(lens in proptest::collection::vec(2usize..20, 1..80), bs in 1usize..40, seed in 0u64..100) {
            let corpus: Vec<Vec<usize>> = lens.iter().map(|&l| vec![4; l]).collect();
            let total: usize = lens.iter().sum();
            let got: usize = batches(&corpus, bs, Some((seed, 0))).unwrap().iter()
                .flat_map(|b| b.lengths.clone()).sum();
            prop_assert_eq!(got, total);
        }
    }
}

//! Deterministic synthetic language for desk-scale training runs.
//!
//! The generator emits fixed-length sentences: one topic marker, a chain of
//! content symbols drawn from a topic-conditioned sparse Markov table, and a
//! separator. Topic markers carry long-range signal (the whole sentence's
//! transition table depends on them), so attention has something to learn
//! while the per-token entropy floor stays low enough for quick convergence.

use rand::distributions::Distribution;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Token count per stored sequence.
pub const SEQ_LEN: usize = 64;

const CONTENT: u32 = 48;
const TOPICS: u32 = 8;
const SEPARATOR: u32 = CONTENT + TOPICS;
/// Declared vocabulary; a few ids above the separator stay unused.
pub const VOCAB: usize = 64;

/// Symbols per sentence: marker + content run + separator.
const SENTENCE_LEN: usize = 16;
const SUCCESSORS: usize = 4;
const SUCCESSOR_PROBS: [f64; SUCCESSORS] = [0.55, 0.25, 0.15, 0.05];

/// Seeded token sequences with disjoint train and held-out splits.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub train: Vec<Vec<u32>>,
    pub held_out: Vec<Vec<u32>>,
}

impl Corpus {
    pub fn train_tokens(&self) -> u64 {
        (self.train.len() * self.seq_len) as u64
    }
}

struct Grammar {
    /// successors[topic][symbol] -> candidate next symbols.
    successors: Vec<Vec<[u32; SUCCESSORS]>>,
    starts: Vec<[u32; SUCCESSORS]>,
}

impl Grammar {
    fn build(rng: &mut ChaCha8Rng) -> Self {
        let mut successors = Vec::with_capacity(TOPICS as usize);
        let mut starts = Vec::with_capacity(TOPICS as usize);
        for _ in 0..TOPICS {
            let mut per_symbol = Vec::with_capacity(CONTENT as usize);
            for _ in 0..CONTENT {
                per_symbol.push(pick_distinct(rng));
            }
            successors.push(per_symbol);
            starts.push(pick_distinct(rng));
        }
        Grammar { successors, starts }
    }
}

fn pick_distinct(rng: &mut ChaCha8Rng) -> [u32; SUCCESSORS] {
    let mut out = [0u32; SUCCESSORS];
    let mut used = [false; CONTENT as usize];
    for slot in out.iter_mut() {
        loop {
            let c = rng.gen_range(0..CONTENT);
            if !used[c as usize] {
                used[c as usize] = true;
                *slot = c;
                break;
            }
        }
    }
    out
}

fn weighted_pick(rng: &mut ChaCha8Rng, candidates: &[u32; SUCCESSORS]) -> u32 {
    let dart: f64 = rand::distributions::Uniform::new(0.0, 1.0).sample(rng);
    let mut acc = 0.0;
    for (i, &p) in SUCCESSOR_PROBS.iter().enumerate() {
        acc += p;
        if dart < acc {
            return candidates[i];
        }
    }
    candidates[SUCCESSORS - 1]
}

/// Generates `size` tokens of synthetic language, chunked into sequences of
/// [`SEQ_LEN`]. The last tenth of the sequences (at least one, when there are
/// at least two) forms the held-out split; splits never share a sequence.
pub fn make_corpus(seed: u64, size: usize) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grammar = Grammar::build(&mut rng);

    let mut stream = Vec::with_capacity(size);
    'outer: loop {
        let topic = rng.gen_range(0..TOPICS);
        let mut sentence = Vec::with_capacity(SENTENCE_LEN);
        sentence.push(CONTENT + topic);
        let mut sym = weighted_pick(&mut rng, &grammar.starts[topic as usize]);
        sentence.push(sym);
        for _ in 0..SENTENCE_LEN - 3 {
            sym = weighted_pick(&mut rng, &grammar.successors[topic as usize][sym as usize]);
            sentence.push(sym);
        }
        sentence.push(SEPARATOR);
        for tok in sentence {
            stream.push(tok);
            if stream.len() == size {
                break 'outer;
            }
        }
    }

    let n_seqs = stream.len() / SEQ_LEN;
    let sequences: Vec<Vec<u32>> = (0..n_seqs)
        .map(|i| stream[i * SEQ_LEN..(i + 1) * SEQ_LEN].to_vec())
        .collect();
    let held = if n_seqs >= 2 { (n_seqs / 10).max(1) } else { 0 };
    let split = n_seqs - held;
    Corpus {
        vocab_size: VOCAB,
        seq_len: SEQ_LEN,
        train: sequences[..split].to_vec(),
        held_out: sequences[split..].to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn same_seed_same_corpus() {
        let a = make_corpus(5, 4096);
        let b = make_corpus(5, 4096);
        assert_eq!(a.train, b.train);
        assert_eq!(a.held_out, b.held_out);
        let c = make_corpus(6, 4096);
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn splits_share_no_sequence() {
        let corpus = make_corpus(1, 64 * 200);
        let train: HashSet<&Vec<u32>> = corpus.train.iter().collect();
        assert!(corpus.held_out.iter().all(|s| !train.contains(s)));
        assert!(!corpus.held_out.is_empty());
    }

    #[test]
    fn histogram_non_degenerate() {
        let corpus = make_corpus(2, 4096);
        let mut seen = HashSet::new();
        for seq in corpus.train.iter().chain(&corpus.held_out) {
            seen.extend(seq.iter().copied());
        }
        assert!(seen.len() > 10, "only {} distinct symbols", seen.len());
        assert!(seen.iter().all(|&t| (t as usize) < corpus.vocab_size));
    }

    #[test]
    fn sentences_align_to_sequences() {
        let corpus = make_corpus(3, 4096);
        for seq in &corpus.train {
            assert_eq!(seq.len(), SEQ_LEN);
            // Markers start every sentence; separators close them.
            assert!(seq[0] >= CONTENT && seq[0] < CONTENT + TOPICS);
            assert_eq!(seq[SENTENCE_LEN - 1], SEPARATOR);
        }
    }
}

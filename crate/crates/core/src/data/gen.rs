//! Synthetic task generators: sparse key-value retrieval, two-hop QA, and
//! single-hop QA with distractors. All are pure functions of (params, seed).

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::vocab::{Vocab, POOL};
use crate::data::Example;
use crate::error::{Error, Result};

/// Sparse retrieval: `num_pairs` lines of `key <K> value <V>` with distinct
/// keys and values, partitioned evenly into `num_segments` documents. The
/// question names one key; the answer is its value.
pub fn gen_niah(num_pairs: usize, num_segments: usize, seed: u64, vocab: &Vocab) -> Result<Example> {
    if num_segments == 0 || num_pairs < num_segments {
        return Err(Error::InvalidExample(format!(
            "need num_pairs >= num_segments >= 1, got {num_pairs} / {num_segments}"
        )));
    }
    if num_pairs > POOL {
        return Err(Error::InvalidExample(format!(
            "num_pairs {num_pairs} exceeds key pool {POOL}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys = sample_distinct(&mut rng, POOL, num_pairs);
    let values = sample_distinct(&mut rng, POOL, num_pairs);
    let lines: Vec<String> = keys
        .iter()
        .zip(&values)
        .map(|(k, v)| format!("key {} value {}", vocab.key_word(*k), vocab.value_word(*v)))
        .collect();

    let docs: Vec<String> = partition_even(&lines, num_segments)
        .into_iter()
        .map(|chunk| chunk.join(" "))
        .collect();

    let q_idx = rng.gen_range(0..num_pairs);
    let question = format!("what is the value of key {}", vocab.key_word(keys[q_idx]));
    let answer = vocab.value_word(values[q_idx]);
    let gold = doc_of_line(q_idx, lines.len(), num_segments);

    Ok(Example {
        docs,
        question,
        answer,
        gold_indices: vec![gold],
    })
}

/// Two-hop QA: gold facts `<E1> works in <E2>` and `<E2> is located in <E3>`,
/// question about E1's workplace location, answer E3. Distractor documents
/// use the same templates over entities disjoint from the gold ones.
pub fn gen_multihop(n_distractors: usize, seed: u64, vocab: &Vocab) -> Result<Example> {
    let needed = 3 + 2 * n_distractors;
    if needed > POOL {
        return Err(Error::InvalidExample(format!(
            "{n_distractors} distractors need {needed} entities, pool is {POOL}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ents = sample_distinct(&mut rng, POOL, needed);
    let (e1, e2, e3) = (
        vocab.entity_word(ents[0]),
        vocab.entity_word(ents[1]),
        vocab.entity_word(ents[2]),
    );

    let mut docs = vec![
        format!("{e1} works in {e2}"),
        format!("{e2} is located in {e3}"),
    ];
    for j in 0..n_distractors {
        let a = vocab.entity_word(ents[3 + 2 * j]);
        let b = vocab.entity_word(ents[3 + 2 * j + 1]);
        if j % 2 == 0 {
            docs.push(format!("{a} works in {b}"));
        } else {
            docs.push(format!("{a} is located in {b}"));
        }
    }
    let gold_indices = shuffle_tracking(&mut docs, &[0, 1], &mut rng);

    Ok(Example {
        docs,
        question: format!("where is the workplace of {e1} located"),
        answer: e3,
        gold_indices,
    })
}

/// Single-hop QA: one gold fact `<E1> is located in <E2>`, question directly
/// about it, plus distractors over disjoint entities.
pub fn gen_singlehop(n_distractors: usize, seed: u64, vocab: &Vocab) -> Result<Example> {
    let needed = 2 + 2 * n_distractors;
    if needed > POOL {
        return Err(Error::InvalidExample(format!(
            "{n_distractors} distractors need {needed} entities, pool is {POOL}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ents = sample_distinct(&mut rng, POOL, needed);
    let e1 = vocab.entity_word(ents[0]);
    let e2 = vocab.entity_word(ents[1]);

    let mut docs = vec![format!("{e1} is located in {e2}")];
    for j in 0..n_distractors {
        let a = vocab.entity_word(ents[2 + 2 * j]);
        let b = vocab.entity_word(ents[2 + 2 * j + 1]);
        docs.push(format!("{a} is located in {b}"));
    }
    let gold_indices = shuffle_tracking(&mut docs, &[0], &mut rng);

    Ok(Example {
        docs,
        question: format!("where is {e1} located"),
        answer: e2,
        gold_indices,
    })
}

fn sample_distinct(rng: &mut ChaCha8Rng, pool: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pool).collect();
    idx.shuffle(rng);
    idx.truncate(n);
    idx
}

/// Split `items` into `n` contiguous chunks whose sizes differ by at most 1.
fn partition_even<T: Clone>(items: &[T], n: usize) -> Vec<Vec<T>> {
    let base = items.len() / n;
    let extra = items.len() % n;
    let mut out = Vec::with_capacity(n);
    let mut pos = 0;
    for c in 0..n {
        let size = base + usize::from(c < extra);
        out.push(items[pos..pos + size].to_vec());
        pos += size;
    }
    out
}

/// Which chunk of `partition_even(0..total, n)` holds item `idx`.
fn doc_of_line(idx: usize, total: usize, n: usize) -> usize {
    let base = total / n;
    let extra = total % n;
    let boundary = extra * (base + 1);
    if idx < boundary {
        idx / (base + 1)
    } else {
        extra + (idx - boundary) / base
    }
}

/// Shuffle `docs` in place and return the new positions of `track` (sorted).
fn shuffle_tracking(docs: &mut [String], track: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.shuffle(rng);
    let mut rearranged: Vec<String> = vec![String::new(); docs.len()];
    let mut positions = vec![0usize; track.len()];
    for (new_pos, &old_pos) in order.iter().enumerate() {
        rearranged[new_pos] = std::mem::take(&mut docs[old_pos]);
        if let Some(ti) = track.iter().position(|&t| t == old_pos) {
            positions[ti] = new_pos;
        }
    }
    docs.clone_from_slice(&rearranged);
    positions.sort_unstable();
    positions
}

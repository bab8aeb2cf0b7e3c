#![allow(dead_code)]

use std::fs;
use std::path::Path;

use dkpkit_core::rng::Rng;

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "st"];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];
const CODAS: [&str; 6] = ["", "", "n", "r", "s", "t"];

/// Deterministic English-like text: a few hundred pseudo-words joined by a
/// sparse word bigram table into sentences with punctuation.
pub fn synthetic_text(bytes: usize, seed: u64) -> String {
    let mut rng = Rng::seed_from_u64(seed);
    let pick = |rng: &mut Rng, n: usize| (rng.next_u64() % n as u64) as usize;
    let words: Vec<String> = (0..300)
        .map(|_| {
            let syllables = 1 + pick(&mut rng, 3);
            (0..syllables)
                .map(|_| {
                    let (o, v, c) = (pick(&mut rng, ONSETS.len()), pick(&mut rng, VOWELS.len()), pick(&mut rng, CODAS.len()));
                    format!("{}{}{}", ONSETS[o], VOWELS[v], CODAS[c])
                })
                .collect()
        })
        .collect();
    let successors: Vec<Vec<usize>> = (0..words.len())
        .map(|_| (0..6).map(|_| pick(&mut rng, words.len())).collect())
        .collect();

    let mut text = String::with_capacity(bytes + 64);
    let mut w = 0;
    while text.len() < bytes {
        let len = 4 + pick(&mut rng, 9);
        for i in 0..len {
            let word = &words[w];
            if i == 0 {
                let mut cs = word.chars();
                let first = cs.next().unwrap().to_ascii_uppercase();
                text.push(first);
                text.extend(cs);
            } else {
                text.push(' ');
                text.push_str(word);
            }
            if i + 1 < len && pick(&mut rng, 8) == 0 {
                text.push(',');
            }
            // mostly follow the bigram table, sometimes jump
            w = if pick(&mut rng, 10) == 0 {
                pick(&mut rng, words.len())
            } else {
                successors[w][pick(&mut rng, 6)]
            };
        }
        text.push_str(if pick(&mut rng, 6) == 0 { "?\n" } else { ".\n" });
    }
    text
}

/// Writes train/valid/test splits of roughly `train_bytes`, a tenth and a
/// tenth into `dir` and returns their paths.
pub fn write_splits(dir: &Path, train_bytes: usize, seed: u64) -> [String; 3] {
    let text = synthetic_text(train_bytes + train_bytes / 5, seed);
    let cut = |at: usize| text[..at].rfind('\n').map_or(at, |i| i + 1);
    let a = cut(train_bytes);
    let b = cut(train_bytes + train_bytes / 10).max(a);
    let parts = [&text[..a], &text[a..b], &text[b..]];
    let names = ["train.txt", "valid.txt", "test.txt"];
    let mut out: [String; 3] = Default::default();
    for ((name, part), slot) in names.iter().zip(parts).zip(out.iter_mut()) {
        let p = dir.join(name);
        fs::write(&p, part).unwrap();
        *slot = p.to_string_lossy().into_owned();
    }
    out
}

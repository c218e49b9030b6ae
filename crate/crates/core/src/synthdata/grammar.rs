use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toyllm::{label_token, Task, TextExample, Vocabulary, LETTER_A, NUM_LABELS, NUM_LETTERS, SPACE};

pub const KEYWORD_LEN: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrammarConfig {
    pub min_len: usize,
    pub max_len: usize,
    pub max_word_len: usize,
    pub keywords: usize,
    pub labels: usize,
    /// Shift applied to letters by the cipher task.
    pub cipher_shift: usize,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        Self { min_len: 3, max_len: 12, max_word_len: 4, keywords: 8, labels: NUM_LABELS, cipher_shift: 3 }
    }
}

/// Sentences of lowercase words separated by single spaces. Each sentence
/// holds exactly one keyword; the rest are filler words of uniformly drawn
/// letters. No symbol directly repeats itself, so every token boundary is
/// visible in the pseudo-speech.
#[derive(Clone, Debug, PartialEq)]
pub struct Grammar {
    cfg: GrammarConfig,
    keywords: Vec<Vec<u8>>,
    labels: Vec<usize>,
}

impl Grammar {
    pub fn new(cfg: GrammarConfig, seed: u64) -> Result<Self> {
        if cfg.min_len < KEYWORD_LEN || cfg.max_len < cfg.min_len || cfg.max_word_len == 0 {
            return Err(Error::Config(format!("sentence lengths must satisfy {KEYWORD_LEN} ≤ min ≤ max")));
        }
        if cfg.labels == 0 || cfg.labels > NUM_LABELS || cfg.keywords < cfg.labels || cfg.keywords % cfg.labels != 0 {
            return Err(Error::Config("keywords must split evenly over 1–4 intent labels".into()));
        }
        if cfg.cipher_shift % NUM_LETTERS == 0 {
            return Err(Error::Config("cipher shift must move letters".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keywords: Vec<Vec<u8>> = Vec::new();
        while keywords.len() < cfg.keywords {
            let w = random_word(&mut rng, KEYWORD_LEN);
            if !keywords.contains(&w) {
                keywords.push(w);
            }
        }
        let mut labels: Vec<usize> = (0..cfg.keywords).map(|i| i % cfg.labels).collect();
        for i in (1..labels.len()).rev() {
            labels.swap(i, rng.random_range(0..=i));
        }
        Ok(Self { cfg, keywords, labels })
    }

    pub fn config(&self) -> &GrammarConfig {
        &self.cfg
    }

    pub fn keywords(&self) -> impl Iterator<Item = &str> {
        self.keywords.iter().map(|w| std::str::from_utf8(w).expect("ascii"))
    }

    pub fn label_of_keyword(&self, k: usize) -> usize {
        self.labels[k]
    }

    fn contains_keyword(&self, word: &[u8]) -> bool {
        word.windows(KEYWORD_LEN).any(|w| self.keywords.iter().any(|k| k == w))
    }

    /// Draws one sentence.
    pub fn sentence(&self, rng: &mut impl Rng) -> String {
        loop {
            let len = rng.random_range(self.cfg.min_len..=self.cfg.max_len);
            // Each filler word adds its letters plus one separating space.
            let mut rest = len - KEYWORD_LEN;
            let mut sizes = Vec::new();
            let max_add = self.cfg.max_word_len + 1;
            while rest > 0 {
                let options: Vec<usize> = (2..=max_add.min(rest)).filter(|a| rest - a != 1).collect();
                if options.is_empty() {
                    break;
                }
                let add = options[rng.random_range(0..options.len())];
                sizes.push(add - 1);
                rest -= add;
            }
            if rest != 0 {
                continue;
            }
            let kw = rng.random_range(0..self.keywords.len());
            let slot = rng.random_range(0..=sizes.len());
            let mut words: Vec<Vec<u8>> = Vec::with_capacity(sizes.len() + 1);
            for (i, &n) in sizes.iter().enumerate() {
                if i == slot {
                    words.push(self.keywords[kw].clone());
                }
                words.push(loop {
                    let w = random_word(rng, n);
                    if !self.contains_keyword(&w) {
                        break w;
                    }
                });
            }
            if slot == sizes.len() {
                words.push(self.keywords[kw].clone());
            }
            let text = words.iter().map(|w| std::str::from_utf8(w).expect("ascii")).collect::<Vec<_>>().join(" ");
            debug_assert_eq!(text.len(), len);
            return text;
        }
    }

    /// The single keyword a sentence holds, if any.
    pub fn keyword_in(&self, text: &str) -> Option<usize> {
        let mut found = None;
        for word in text.split(' ') {
            for w in word.as_bytes().windows(KEYWORD_LEN) {
                if let Some(k) = self.keywords.iter().position(|kw| kw == w) {
                    if found.is_some_and(|f| f != k) {
                        return None;
                    }
                    found = Some(k);
                }
            }
        }
        found
    }

    pub fn intent(&self, text: &str) -> Result<usize> {
        self.keyword_in(text)
            .map(|k| self.labels[k])
            .ok_or_else(|| Error::Config(format!("sentence {text:?} holds no unique keyword")))
    }

    /// Shifts letters cyclically; spaces are unchanged.
    pub fn cipher(&self, tokens: &[usize]) -> Vec<usize> {
        tokens
            .iter()
            .map(|&t| if t == SPACE { t } else { LETTER_A + (t - LETTER_A + self.cfg.cipher_shift) % NUM_LETTERS })
            .collect()
    }

    /// Expected response tokens of `task` for a sentence.
    pub fn answer(&self, task: Task, text: &str) -> Result<Vec<usize>> {
        let toks = Vocabulary::standard().encode_text(text)?;
        Ok(match task {
            Task::Transcribe => toks,
            Task::Reverse => toks.into_iter().rev().collect(),
            Task::Cipher => self.cipher(&toks),
            Task::Intent => vec![label_token(self.intent(text)?)],
        })
    }

    /// `size` distinct sentences, none of them in `exclude`.
    pub fn corpus(&self, seed: u64, size: usize, exclude: &HashSet<String>) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = HashSet::with_capacity(size);
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            let s = self.sentence(&mut rng);
            if !exclude.contains(&s) && seen.insert(s.clone()) {
                out.push(s);
            }
        }
        out
    }
}

fn random_word(rng: &mut impl Rng, n: usize) -> Vec<u8> {
    let mut w: Vec<u8> = Vec::with_capacity(n);
    while w.len() < n {
        let c = b'a' + rng.random_range(0..NUM_LETTERS as u8);
        if w.last() != Some(&c) {
            w.push(c);
        }
    }
    w
}

/// `size` distinct sentences drawn from `grammar` with `seed`.
pub fn gen_text_corpus(grammar: &Grammar, seed: u64, size: usize) -> Vec<String> {
    grammar.corpus(seed, size, &HashSet::new())
}

/// One instruction line per task for every sentence, in task order.
pub fn gen_instruction_corpus(grammar: &Grammar, sentences: &[String]) -> Result<Vec<TextExample>> {
    let vocab = Vocabulary::standard();
    let mut out = Vec::with_capacity(sentences.len() * Task::ALL.len());
    for s in sentences {
        let payload = vocab.encode_text(s)?;
        for task in Task::ALL {
            out.push(TextExample { task, payload: payload.clone(), response: grammar.answer(task, s)? });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grammar() -> Grammar {
        Grammar::new(GrammarConfig::default(), 11).unwrap()
    }

    #[test]
    fn sentences_follow_the_grammar() {
        let g = grammar();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let s = g.sentence(&mut rng);
            assert!((3..=12).contains(&s.len()), "{s:?}");
            assert!(!s.starts_with(' ') && !s.ends_with(' ') && !s.contains("  "));
            assert!(s.as_bytes().windows(2).all(|w| w[0] != w[1]), "{s:?}");
            assert!(g.keyword_in(&s).is_some(), "{s:?}");
            let hits: usize = s.split(' ').map(|w| w.as_bytes().windows(3).filter(|x| g.keywords.iter().any(|k| k == x)).count()).sum();
            assert_eq!(hits, 1, "{s:?}");
        }
    }

    #[test]
    fn keywords_split_evenly_over_labels() {
        let g = grammar();
        assert_eq!(g.keywords().count(), 8);
        for label in 0..4 {
            assert_eq!((0..8).filter(|&k| g.label_of_keyword(k) == label).count(), 2);
        }
    }

    #[test]
    fn corpus_is_deterministic_and_distinct() {
        let g = grammar();
        assert!(gen_text_corpus(&g, 1, 0).is_empty());
        let a = gen_text_corpus(&g, 1, 500);
        assert_eq!(a, gen_text_corpus(&g, 1, 500));
        assert_eq!(a.iter().collect::<HashSet<_>>().len(), 500);
        assert_ne!(a, gen_text_corpus(&g, 2, 500));
    }

    #[test]
    fn filler_letters_are_uniform() {
        let g = grammar();
        let mut counts = [0usize; 26];
        for s in gen_text_corpus(&g, 3, 20_000) {
            let k = g.keyword_in(&s).unwrap();
            let kw = std::str::from_utf8(&g.keywords[k]).unwrap();
            for w in s.split(' ').filter(|w| *w != kw) {
                for c in w.bytes() {
                    counts[(c - b'a') as usize] += 1;
                }
            }
        }
        let total: usize = counts.iter().sum();
        for (i, &c) in counts.iter().enumerate() {
            let f = c as f64 / total as f64;
            assert!((f * 26.0 - 1.0).abs() < 0.05, "letter {} frequency {f}", (b'a' + i as u8) as char);
        }
    }

    #[test]
    fn task_answers() {
        let g = grammar();
        let v = Vocabulary::standard();
        assert_eq!(g.answer(Task::Reverse, "ab").unwrap(), v.encode_text("ba").unwrap());
        assert_eq!(g.answer(Task::Cipher, "ab").unwrap(), v.encode_text("de").unwrap());
        assert_eq!(g.answer(Task::Cipher, "xyz a").unwrap(), v.encode_text("abc d").unwrap());
        assert_eq!(g.answer(Task::Transcribe, "ab").unwrap(), v.encode_text("ab").unwrap());
        for k in 0..8 {
            let kw = std::str::from_utf8(&g.keywords[k]).unwrap().to_string();
            let s = format!("{kw} q");
            if g.keyword_in(&s) == Some(k) {
                assert_eq!(g.answer(Task::Intent, &s).unwrap(), vec![label_token(g.label_of_keyword(k))]);
            }
        }
        assert!(g.answer(Task::Intent, "q").is_err());
    }

    #[test]
    fn instruction_corpus_is_balanced() {
        let g = grammar();
        let lines = gen_instruction_corpus(&g, &gen_text_corpus(&g, 4, 50)).unwrap();
        assert_eq!(lines.len(), 200);
        for t in Task::ALL {
            assert_eq!(lines.iter().filter(|l| l.task == t).count(), 50);
        }
    }
}

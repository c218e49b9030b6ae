//! The synthetic world: a sentence grammar, the instruction corpus the toy
//! LM is pretrained on, pseudo-speech rendering and task datasets.

mod dataset;
mod grammar;
mod speech;

pub use dataset::{load_dataset, save_dataset, DataConfig, Record, Split, TaskDataset, World};
pub use grammar::{gen_instruction_corpus, gen_text_corpus, Grammar, GrammarConfig, KEYWORD_LEN};
pub use speech::{PseudoSpeechSpec, SpeechConfig};

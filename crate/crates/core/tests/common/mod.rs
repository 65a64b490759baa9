//! Synthetic text corpora shared by the integration tests.
#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::Path;

use oodbench::{LabeledCorpus, Record, Split};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const COMMON: [&str; 8] = ["the", "a", "of", "and", "to", "in", "is", "for"];

/// Documents about `topic`: each class has its own keywords, the topic has
/// shared words, and every corpus shares a few function words.
pub fn topic_corpus(topic: &str, n_classes: usize, sizes: [usize; 3], seed: u64) -> LabeledCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    for (split, &n) in [Split::Train, Split::Val, Split::Test].iter().zip(&sizes) {
        for i in 0..n {
            let label = i % n_classes;
            let len = rng.gen_range(6..14);
            let words: Vec<String> = (0..len)
                .map(|_| match rng.gen_range(0..10) {
                    0..=3 => format!("{topic}{label}k{}", rng.gen_range(0..12)),
                    4..=7 => format!("{topic}w{}", rng.gen_range(0..40)),
                    _ => COMMON[rng.gen_range(0..COMMON.len())].to_string(),
                })
                .collect();
            records.push(Record {
                text: words.join(" "),
                label,
                split: *split,
            });
        }
    }
    let names = (0..n_classes).map(|c| format!("{topic}-{c}")).collect();
    LabeledCorpus::new(records, names).unwrap()
}

pub fn write_csv(path: &Path, corpus: &LabeledCorpus) {
    let file = std::fs::File::create(path).unwrap();
    oodbench::corpus::write_text_table(file, corpus, oodbench::corpus::TableFormat::Csv).unwrap();
}

/// Writes three topic corpora and a leave-one-in scenario next to them.
pub fn leave_one_in_fixture(dir: &Path, sizes: [usize; 3], training: &str) -> std::path::PathBuf {
    let mut toml = String::from("name = \"fixture\"\nseeds = [2021, 2022]\n");
    for (i, topic) in ["comp", "pol", "sport"].iter().enumerate() {
        let corpus = topic_corpus(topic, 3, sizes, 100 + i as u64);
        write_csv(&dir.join(format!("{topic}.csv")), &corpus);
        let _ = write!(
            toml,
            "\n[[corpus]]\nname = \"{topic}\"\npath = \"{topic}.csv\"\nsplit_column = \"split\"\n"
        );
    }
    toml.push_str("\n[[leave_one_in]]\nsets = [\"comp\", \"pol\", \"sport\"]\ngroup = \"Semantic\"\n");
    toml.push_str("\n[run.training]\n");
    toml.push_str(training);
    let path = dir.join("scenario.toml");
    std::fs::write(&path, toml).unwrap();
    path
}

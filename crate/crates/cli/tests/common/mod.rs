#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqhtc_cli::{Overrides, RunConfig};

pub const DIM: usize = 8;
pub const TOPICS: usize = 2;
pub const SUBS: usize = 4;
const NOISE: usize = 10;

/// Two topics with two subtopics each. Every document carries one topic word
/// and one subtopic word, each owning its own axis of the vector space.
pub struct Fixture {
    pub dir: tempfile::TempDir,
}

impl Fixture {
    pub fn new(docs: usize, seed: u64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let quoted = |prefix: &str, n: usize| {
            (0..n)
                .map(|k| format!("\"{prefix}{k}\""))
                .collect::<Vec<_>>()
                .join(", ")
        };
        let edges: Vec<String> = (0..SUBS)
            .map(|b| format!("[\"t{}\", \"s{b}\"]", b / (SUBS / TOPICS)))
            .collect();
        let tax = format!(
            "edges = [{}]\n\n[[levels]]\nname = \"topic\"\nclasses = [{}]\n\n[[levels]]\nname = \"sub\"\nclasses = [{}]\n",
            edges.join(", "),
            quoted("t", TOPICS),
            quoted("s", SUBS)
        );
        std::fs::write(dir.path().join("taxonomy.toml"), tax).unwrap();

        let mut vectors = String::new();
        let mut axis_word = |word: String, axis: usize| {
            let v: Vec<String> = (0..DIM)
                .map(|k| if k == axis { "3".into() } else { "0".into() })
                .collect();
            writeln!(vectors, "{word} {}", v.join(" ")).unwrap();
        };
        for a in 0..TOPICS {
            axis_word(format!("topic{a}"), a);
        }
        for b in 0..SUBS {
            axis_word(format!("sub{b}"), TOPICS + b);
        }
        for n in 0..NOISE {
            let v: Vec<String> = (0..DIM).map(|_| format!("{:?}", rng.random_range(-0.5..0.5))).collect();
            writeln!(vectors, "w{n} {}", v.join(" ")).unwrap();
        }
        writeln!(vectors, "area {}", ["0.5"; DIM].join(" ")).unwrap();
        std::fs::write(dir.path().join("vectors.txt"), vectors).unwrap();

        let mut data = String::new();
        for i in 0..docs {
            let b = rng.random_range(0..SUBS);
            let a = b / (SUBS / TOPICS);
            let mut words: Vec<String> = (0..rng.random_range(1..=3))
                .map(|_| format!("w{}", rng.random_range(0..NOISE)))
                .collect();
            words.insert(rng.random_range(0..=words.len()), format!("topic{a}"));
            words.insert(rng.random_range(0..=words.len()), format!("sub{b}"));
            writeln!(data, "d{i}\t{}\tt{a}\ts{b}", words.join(" ")).unwrap();
        }
        std::fs::write(dir.path().join("data.tsv"), data).unwrap();

        let mut defs = String::new();
        for a in 0..TOPICS {
            writeln!(defs, "0\tt{a}\ttopic{a} area").unwrap();
        }
        for b in 0..SUBS {
            writeln!(defs, "1\ts{b}\tsub{b} topic{}", b / (SUBS / TOPICS)).unwrap();
        }
        std::fs::write(dir.path().join("definitions.tsv"), defs).unwrap();

        std::fs::write(dir.path().join("run.toml"), BASE_CONFIG).unwrap();
        Self { dir }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn write(&self, name: &str, contents: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, contents).unwrap();
        p
    }

    pub fn config(&self, set: &[&str]) -> RunConfig {
        self.try_config(set).unwrap()
    }

    pub fn try_config(&self, set: &[&str]) -> seqhtc::Result<RunConfig> {
        RunConfig::load(
            self.path("run.toml"),
            &Overrides {
                set: set.iter().map(|s| s.to_string()).collect(),
                ..Default::default()
            },
        )
    }
}

const BASE_CONFIG: &str = r#"
config_version = 1
seed = 5

[paths]
taxonomy = "taxonomy.toml"
embeddings = "vectors.txt"
definitions = "definitions.tsv"
dataset = "data.tsv"
output = "out"

[split]
ratios = [0.6, 0.2, 0.2]

[train]
embedding_dim = 8
hidden_units = 12
batch_size = 10
max_epochs = 4
dropout = 0.0
learning_rate = 0.01
grad_clip = 5.0

[decode]
beam_size = 3
"#;

pub fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

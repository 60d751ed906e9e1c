#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use demopick_cli::config::ExperimentConfig;

pub const TASK: &str = r#"
name = "toy"
kind = "classification"
label_set = ["A", "B"]
label_prefix = " Label:"

[verbalizer]
A = "alpha"
B = "beta"

[[template]]
field = "text"
prefix = "Text: "
"#;

const WORDS: [&str; 10] = [
    "red", "green", "blue", "cyan", "pink", "gold", "grey", "teal", "plum", "rust",
];

fn jsonl(prefix: &str, n: usize) -> String {
    (0..n)
        .map(|i| {
            let label = if i % 2 == 0 { "A" } else { "B" };
            let text = format!("{} {} item {}", WORDS[i % 10], WORDS[(i / 10) % 10], i % 7);
            format!(
                "{}\n",
                serde_json::json!({"id": format!("{prefix}{i}"), "fields": {"text": text}, "label": label})
            )
        })
        .collect()
}

/// Writes a toy task with a 100-example pool and 12 test examples, plus an
/// experiment config whose `[[methods]]` section is `methods`.
pub fn fixture(dir: &Path, methods: &str, extra: &str) -> PathBuf {
    fs::write(dir.join("task.toml"), TASK).unwrap();
    fs::write(dir.join("pool.jsonl"), jsonl("p", 100)).unwrap();
    fs::write(dir.join("test.jsonl"), jsonl("t", 12)).unwrap();
    let cfg = format!(
        "task = \"task.toml\"\npool = \"pool.jsonl\"\ntest = \"test.jsonl\"\noutput = \"out\"\n\
         seeds = [0, 1]\nconcurrency = 3\nmock = \"copy-last\"\n{extra}\n{methods}\n"
    );
    let path = dir.join("experiment.toml");
    fs::write(&path, cfg).unwrap();
    path
}

pub fn all_methods() -> String {
    ["random", "diversity", "uncertainty", "similarity"]
        .iter()
        .map(|m| format!("[[methods]]\nmethod = \"{m}\"\n"))
        .collect::<String>()
        + "[[methods]]\nmethod = \"similarity\"\npolarity = \"least\"\n"
}

pub fn load(path: &Path) -> ExperimentConfig {
    let text = fs::read_to_string(path).unwrap();
    ExperimentConfig::from_toml_str(&text, path.parent().unwrap()).unwrap()
}

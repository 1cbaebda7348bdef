#![allow(dead_code)]

use std::ffi::OsStr;
use std::fs;
use std::path::Path;
use std::process::Command;

use fusemerge::fusion::io::{save_dist, DistFile};
use fusemerge::train::{ingest_dialogues, shifted_labels, teacher_path, CharVocab, DialogueSample};
use fusemerge::{load_checkpoint, DistMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Output {
    pub fn json(&self) -> Value {
        assert_eq!(self.code, 0, "command failed: {}", self.stderr);
        serde_json::from_str(&self.stdout).unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", self.stdout))
    }
}

pub fn fusemerge<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<OsStr>,
{
    fusemerge_env(args, &[])
}

pub fn fusemerge_env<I, S>(args: I, env: &[(&str, &str)]) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<OsStr>,
{
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fusemerge"));
    cmd.args(args).env_remove("FUSEMERGE_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("binary runs");
    Output {
        code: out.status.code().expect("exited normally"),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Dialogues over a small alphabet; each assistant reply mirrors its prompt,
/// so there is structure for the toy model to pick up.
pub fn write_corpus(path: &Path, samples: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alphabet: Vec<char> = "abcdefgh ".chars().collect();
    let mut lines = Vec::with_capacity(samples);
    for _ in 0..samples {
        let len = rng.gen_range(3..9);
        let prompt: String = (0..len).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect();
        let reply: String = prompt.chars().rev().collect::<String>() + ".";
        lines.push(serde_json::json!({
            "turns": [
                { "role": "user", "text": prompt },
                { "role": "assistant", "text": reply },
            ]
        }).to_string());
    }
    fs::write(path, lines.join("\n") + "\n").unwrap();
}

pub fn model_vocab(model: &Path) -> CharVocab {
    let ckpt = load_checkpoint(model).unwrap();
    CharVocab::from_tokens(serde_json::from_str(&ckpt.metadata["vocab"]).unwrap()).unwrap()
}

pub fn corpus_samples(corpus: &Path, vocab: &CharVocab) -> Vec<DialogueSample> {
    ingest_dialogues(corpus, vocab, 2048).unwrap()
}

/// A teacher that puts logit `boost` on the gold next token and `side` on the
/// token `offset` ids further along.
pub fn synthetic_teacher(sample: &DialogueSample, vocab: usize, boost: f64, side: f64, offset: usize) -> DistMatrix<f64> {
    let labels = shifted_labels(sample);
    let mut logits = vec![0.0; sample.len() * vocab];
    for (i, &gold) in labels.token_ids.iter().enumerate() {
        logits[i * vocab + gold] += boost;
        logits[i * vocab + (gold + offset) % vocab] += side;
    }
    DistMatrix::softmax(sample.len(), vocab, &logits)
}

pub fn write_teachers(dir: &Path, samples: &[DialogueSample], vocab: usize, boost: f64, side: f64, offset: usize) {
    fs::create_dir_all(dir).unwrap();
    for (i, s) in samples.iter().enumerate() {
        let file = DistFile::new(synthetic_teacher(s, vocab, boost, side, offset));
        save_dist(&file, teacher_path(dir, i)).unwrap();
    }
}

/// Corpus, pivot and one teacher set inside `dir`.
pub fn training_fixture(dir: &Path, samples: usize) {
    let corpus = dir.join("corpus.jsonl");
    write_corpus(&corpus, samples, 11);
    let pivot = dir.join("pivot.st");
    fusemerge(["init-pivot", "--corpus", p(&corpus), "--out", p(&pivot), "--dim", "6", "--seed", "3"]).json();
    let vocab = model_vocab(&pivot);
    let data = corpus_samples(&corpus, &vocab);
    write_teachers(&dir.join("teachers"), &data, vocab.len(), 3.0, 1.0, 1);
}

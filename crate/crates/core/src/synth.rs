//! Synthetic intent corpora built from Gaussian token clusters.
//!
//! Each intent owns a token vocabulary sampled around a cluster prototype
//! in embedding space; its label name is a single token embedded exactly
//! at the prototype. `overlap` pulls unseen prototypes toward seen ones to
//! create genuinely ambiguous fixtures.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{EmbeddingTable, LabelSet, OovPolicy, Origin, Utterance};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub seen_classes: usize,
    pub unseen_classes: usize,
    /// Embedding dimension; must be at least the class count.
    pub dim: usize,
    pub tokens_per_class: usize,
    pub utterances_per_class: usize,
    /// Standard deviation of token embeddings around their prototype.
    pub token_noise: f64,
    /// Utterance length range (inclusive).
    pub min_len: usize,
    pub max_len: usize,
    /// 0 keeps prototypes orthogonal; larger values mix each unseen
    /// prototype with a seen one.
    pub overlap: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seen_classes: 3,
            unseen_classes: 2,
            dim: 8,
            tokens_per_class: 12,
            utterances_per_class: 120,
            token_noise: 0.08,
            min_len: 4,
            max_len: 9,
            overlap: 0.0,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub corpus: Vec<Utterance>,
    pub labels: LabelSet,
    pub table: EmbeddingTable,
}

/// Generate a corpus, label set and embedding table per the config.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    let total = cfg.seen_classes + cfg.unseen_classes;
    assert!(cfg.dim >= total, "dim must cover one axis per class");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let seen: Vec<String> = (0..cfg.seen_classes).map(|i| format!("seen{i}")).collect();
    let unseen: Vec<String> = (0..cfg.unseen_classes).map(|i| format!("unseen{i}")).collect();
    let labels = LabelSet::new(seen, unseen)?;

    // Prototypes: one axis per class; unseen ones optionally pulled toward
    // a seen prototype.
    let mut prototypes = Vec::with_capacity(total);
    for k in 0..total {
        let mut p = vec![0.0; cfg.dim];
        p[k] = 1.0;
        if k >= cfg.seen_classes && cfg.overlap > 0.0 {
            let partner = (k - cfg.seen_classes) % cfg.seen_classes;
            p[k] = 1.0 - cfg.overlap;
            p[partner] = cfg.overlap;
        }
        prototypes.push(p);
    }

    let mut table = EmbeddingTable::new(cfg.dim, OovPolicy::Zeros);
    for (k, name) in labels.names().enumerate() {
        // Label-name token sits exactly on the prototype.
        table.insert(&name.to_lowercase(), prototypes[k].clone())?;
    }
    let mut class_tokens: Vec<Vec<String>> = vec![Vec::new(); total];
    for (k, tokens) in class_tokens.iter_mut().enumerate() {
        for t in 0..cfg.tokens_per_class {
            let tok = format!("w{k}t{t}");
            let vec: Vec<f64> = prototypes[k]
                .iter()
                .map(|p| p + cfg.token_noise * gaussian(&mut rng))
                .collect();
            table.insert(&tok, vec)?;
            tokens.push(tok);
        }
    }

    let mut corpus = Vec::new();
    let mut id = 0usize;
    for (k, name) in labels.names().enumerate() {
        for _ in 0..cfg.utterances_per_class {
            let len = rng.gen_range(cfg.min_len..=cfg.max_len);
            let tokens: Vec<String> = (0..len)
                .map(|_| class_tokens[k][rng.gen_range(0..cfg.tokens_per_class)].clone())
                .collect();
            corpus.push(Utterance {
                id: format!("s{id:05}"),
                tokens,
                label: name.to_string(),
                origin: Origin::Real,
            });
            id += 1;
        }
    }
    Ok(SynthData {
        corpus,
        labels,
        table,
    })
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller from two uniforms.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Paths of the three files [`write_files`] produces.
#[derive(Clone, Debug)]
pub struct SynthPaths {
    pub dataset: PathBuf,
    pub labels: PathBuf,
    pub embeddings: PathBuf,
}

/// Materialize the synthetic data in the on-disk formats the CLI reads.
pub fn write_files(data: &SynthData, dir: impl AsRef<Path>) -> Result<SynthPaths> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let paths = SynthPaths {
        dataset: dir.join("data.jsonl"),
        labels: dir.join("labels.json"),
        embeddings: dir.join("embeddings.txt"),
    };

    let mut f = std::fs::File::create(&paths.dataset)?;
    for u in &data.corpus {
        writeln!(
            f,
            "{}",
            serde_json::json!({"text": u.tokens.join(" "), "label": u.label})
        )?;
    }

    let meta = serde_json::json!({
        "seen": data.labels.seen(),
        "unseen": data.labels.unseen(),
    });
    std::fs::write(&paths.labels, serde_json::to_string_pretty(&meta)?)?;

    let mut f = std::fs::File::create(&paths.embeddings)?;
    for tok in data.table.tokens() {
        let vec = data.table.get(tok).expect("token from the table");
        let joined: Vec<String> = vec.iter().map(|v| format!("{v}")).collect();
        writeln!(f, "{tok} {}", joined.join(" "))?;
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{load_corpus, load_embeddings};

    #[test]
    fn generated_shapes_match_config() {
        let cfg = SynthConfig::default();
        let data = generate(&cfg).unwrap();
        assert_eq!(data.labels.num_seen(), 3);
        assert_eq!(data.labels.num_unseen(), 2);
        assert_eq!(data.corpus.len(), 5 * 120);
        // label tokens present at prototypes
        let v = data.table.get("seen0").unwrap();
        assert_eq!(v[0], 1.0);
        assert!(v[1..].iter().all(|x| *x == 0.0));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig::default();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.corpus.len(), b.corpus.len());
        for (x, y) in a.corpus.iter().zip(&b.corpus) {
            assert_eq!(x.tokens, y.tokens);
        }
        assert_eq!(a.table.get("w0t0"), b.table.get("w0t0"));
    }

    #[test]
    fn written_files_load_back() {
        let cfg = SynthConfig {
            utterances_per_class: 5,
            ..SynthConfig::default()
        };
        let data = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = write_files(&data, dir.path()).unwrap();
        let (corpus, labels) = load_corpus(&paths.dataset, &paths.labels).unwrap();
        assert_eq!(corpus.len(), data.corpus.len());
        assert_eq!(labels.num_total(), 5);
        let table = load_embeddings(&paths.embeddings, OovPolicy::Zeros).unwrap();
        assert_eq!(table.dim(), cfg.dim);
        // Round-trip keeps exact values (shortest-roundtrip float formatting).
        assert_eq!(table.get("w0t0").unwrap(), data.table.get("w0t0").unwrap());
    }

    #[test]
    fn overlap_mixes_unseen_prototypes() {
        let cfg = SynthConfig {
            overlap: 0.4,
            ..SynthConfig::default()
        };
        let data = generate(&cfg).unwrap();
        let v = data.table.get("unseen0").unwrap();
        assert!((v[3] - 0.6).abs() < 1e-12);
        assert!((v[0] - 0.4).abs() < 1e-12);
    }
}

//! Grouped pretraining corpus: K named domains of pre-tokenized documents,
//! packed into fixed-length rows on demand.
//!
//! A manifest is a TOML file listing domains in id order:
//!
//! ```toml
//! [[domain]]
//! name = "ArXiv"
//! files = ["arxiv/part-0.txt", "arxiv/part-1.txt"]
//! ```
//!
//! Relative paths resolve against the manifest's directory. Each data file
//! holds one whitespace-separated sequence of token ids per line.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = u32;

#[derive(Debug)]
pub struct DomainGroup {
    pub id: usize,
    pub name: String,
    sequences: Vec<Vec<TokenId>>,
    tokens_served: AtomicU64,
}

impl DomainGroup {
    pub fn new(id: usize, name: impl Into<String>, sequences: Vec<Vec<TokenId>>) -> Result<Self> {
        let name = name.into();
        if sequences.is_empty() {
            return Err(Error::Corpus(format!("domain '{name}' has no sequences")));
        }
        if sequences.iter().any(|s| s.is_empty()) {
            return Err(Error::Corpus(format!("domain '{name}' contains an empty sequence")));
        }
        Ok(Self {
            id,
            name,
            sequences,
            tokens_served: AtomicU64::new(0),
        })
    }

    pub fn sequences(&self) -> &[Vec<TokenId>] {
        &self.sequences
    }

    pub fn tokens_served(&self) -> u64 {
        self.tokens_served.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBatch {
    pub domain_id: usize,
    /// `batch_size` rows of exactly `seq_len` tokens.
    pub rows: Vec<Vec<TokenId>>,
    /// Per row, the offsets at which each packed document starts.
    pub boundaries: Vec<Vec<usize>>,
}

impl PackedBatch {
    pub fn num_tokens(&self) -> u64 {
        self.rows.iter().map(|r| r.len() as u64).sum()
    }
}

#[derive(Debug)]
pub struct GroupedCorpus {
    groups: Vec<DomainGroup>,
    manifest_digest: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    #[serde(default)]
    domain: Vec<ManifestDomain>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDomain {
    name: String,
    files: Vec<PathBuf>,
}

impl GroupedCorpus {
    pub fn from_groups(groups: Vec<DomainGroup>, manifest_digest: impl Into<String>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::Corpus("corpus has zero domains".into()));
        }
        let mut names = HashSet::new();
        for (i, g) in groups.iter().enumerate() {
            if g.id != i {
                return Err(Error::Corpus(format!("domain '{}' has id {} at position {i}", g.name, g.id)));
            }
            if !names.insert(g.name.as_str()) {
                return Err(Error::Corpus(format!("duplicate domain name '{}'", g.name)));
            }
        }
        Ok(Self {
            groups,
            manifest_digest: manifest_digest.into(),
        })
    }

    /// Load a manifest and every data file it names.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let text = fs::read_to_string(manifest_path)
            .map_err(|e| Error::io("cannot read corpus manifest", manifest_path, e))?;
        let manifest: Manifest = toml::from_str(&text)
            .map_err(|e| Error::Corpus(format!("{}: {e}", manifest_path.display())))?;
        if manifest.domain.is_empty() {
            return Err(Error::Corpus(format!("{}: manifest lists zero domains", manifest_path.display())));
        }
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());

        let mut seen = HashSet::new();
        let mut groups = Vec::with_capacity(manifest.domain.len());
        for (id, d) in manifest.domain.into_iter().enumerate() {
            if !seen.insert(d.name.clone()) {
                return Err(Error::Corpus(format!("duplicate domain name '{}'", d.name)));
            }
            if d.files.is_empty() {
                return Err(Error::Corpus(format!("domain '{}' lists no data files", d.name)));
            }
            let mut sequences = Vec::new();
            for file in &d.files {
                let path = if file.is_absolute() { file.clone() } else { base.join(file) };
                let data = fs::read_to_string(&path)
                    .map_err(|e| Error::io(format!("domain '{}': cannot read data file", d.name), &path, e))?;
                hasher.update(d.name.as_bytes());
                hasher.update(data.as_bytes());
                sequences.extend(parse_sequences(&data, &path)?);
            }
            groups.push(DomainGroup::new(id, d.name, sequences)?);
        }
        Self::from_groups(groups, hex::encode(hasher.finalize()))
    }

    pub fn num_domains(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[DomainGroup] {
        &self.groups
    }

    pub fn names(&self) -> Vec<String> {
        self.groups.iter().map(|g| g.name.clone()).collect()
    }

    pub fn manifest_digest(&self) -> &str {
        &self.manifest_digest
    }

    pub fn group(&self, domain_id: usize) -> Result<&DomainGroup> {
        self.groups.get(domain_id).ok_or(Error::UnknownDomain {
            id: domain_id,
            num_domains: self.groups.len(),
        })
    }

    /// Pack `batch_size` rows of `seq_len` tokens from one domain. Documents
    /// are drawn uniformly with replacement and packed greedily; the last
    /// document of a row is truncated to fit.
    pub fn sample_batch<R: RngCore + ?Sized>(
        &self,
        domain_id: usize,
        batch_size: usize,
        seq_len: usize,
        rng: &mut R,
    ) -> Result<PackedBatch> {
        let group = self.group(domain_id)?;
        if batch_size == 0 || seq_len == 0 {
            return Err(Error::config("batch_size and seq_len must be positive"));
        }
        let docs = &group.sequences;
        let mut rows = Vec::with_capacity(batch_size);
        let mut boundaries = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let mut row = Vec::with_capacity(seq_len);
            let mut starts = Vec::new();
            while row.len() < seq_len {
                let doc = &docs[rng.random_range(0..docs.len())];
                starts.push(row.len());
                let take = doc.len().min(seq_len - row.len());
                row.extend_from_slice(&doc[..take]);
            }
            rows.push(row);
            boundaries.push(starts);
        }
        group
            .tokens_served
            .fetch_add((batch_size * seq_len) as u64, Ordering::Relaxed);
        Ok(PackedBatch {
            domain_id,
            rows,
            boundaries,
        })
    }

    pub fn tokens_served(&self) -> Vec<u64> {
        self.groups.iter().map(|g| g.tokens_served()).collect()
    }

    /// Per-domain share of all tokens served so far.
    pub fn domain_token_shares(&self) -> Result<Vec<f64>> {
        token_shares(&self.tokens_served())
    }
}

pub(crate) fn token_shares(served: &[u64]) -> Result<Vec<f64>> {
    let total: u64 = served.iter().sum();
    if total == 0 {
        return Err(Error::Corpus("no batches have been drawn yet".into()));
    }
    Ok(served.iter().map(|n| *n as f64 / total as f64).collect())
}

fn parse_sequences(data: &str, path: &Path) -> Result<Vec<Vec<TokenId>>> {
    let mut out = Vec::new();
    for (i, line) in data.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let seq = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<TokenId>().map_err(|_| Error::MalformedLine {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: format!("'{tok}' is not a token id"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(seq);
    }
    Ok(out)
}

/// Where the simulator's micro-batches come from. Implementations keep a
/// per-domain tally of tokens served.
pub trait BatchSource: Send + Sync {
    fn num_domains(&self) -> usize;

    /// Draw one micro-batch and return the number of tokens it holds.
    fn draw(&self, domain_id: usize, batch_size: usize, seq_len: usize, rng: &mut dyn RngCore) -> Result<u64>;

    fn tokens_served(&self) -> Vec<u64>;

    /// Overwrite the tallies, used when resuming from a checkpoint.
    fn restore_tokens(&self, served: &[u64]) -> Result<()>;
}

impl BatchSource for GroupedCorpus {
    fn num_domains(&self) -> usize {
        self.groups.len()
    }

    fn draw(&self, domain_id: usize, batch_size: usize, seq_len: usize, rng: &mut dyn RngCore) -> Result<u64> {
        Ok(self.sample_batch(domain_id, batch_size, seq_len, rng)?.num_tokens())
    }

    fn tokens_served(&self) -> Vec<u64> {
        GroupedCorpus::tokens_served(self)
    }

    fn restore_tokens(&self, served: &[u64]) -> Result<()> {
        if served.len() != self.groups.len() {
            return Err(Error::Corpus("token tally length does not match K".into()));
        }
        for (g, n) in self.groups.iter().zip(served) {
            g.tokens_served.store(*n, Ordering::Relaxed);
        }
        Ok(())
    }
}

/// Counts tokens without materializing batches. Used for long simulated
/// runs where packing real rows would dominate the cost.
#[derive(Debug)]
pub struct TokenTally {
    served: Vec<AtomicU64>,
}

impl TokenTally {
    pub fn new(num_domains: usize) -> Self {
        Self {
            served: (0..num_domains).map(|_| AtomicU64::new(0)).collect(),
        }
    }
}

impl BatchSource for TokenTally {
    fn num_domains(&self) -> usize {
        self.served.len()
    }

    fn draw(&self, domain_id: usize, batch_size: usize, seq_len: usize, _rng: &mut dyn RngCore) -> Result<u64> {
        let slot = self.served.get(domain_id).ok_or(Error::UnknownDomain {
            id: domain_id,
            num_domains: self.served.len(),
        })?;
        let n = (batch_size * seq_len) as u64;
        slot.fetch_add(n, Ordering::Relaxed);
        Ok(n)
    }

    fn tokens_served(&self) -> Vec<u64> {
        self.served.iter().map(|a| a.load(Ordering::Relaxed)).collect()
    }

    fn restore_tokens(&self, served: &[u64]) -> Result<()> {
        if served.len() != self.served.len() {
            return Err(Error::Corpus("token tally length does not match K".into()));
        }
        for (a, n) in self.served.iter().zip(served) {
            a.store(*n, Ordering::Relaxed);
        }
        Ok(())
    }
}

/// Seeded random token streams, one group per name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub names: Vec<String>,
    pub docs_per_domain: usize,
    pub min_doc_len: usize,
    pub max_doc_len: usize,
    pub vocab_size: u32,
    pub seed: u64,
}

impl SyntheticCorpus {
    fn generate(&self) -> Result<Vec<Vec<Vec<TokenId>>>> {
        if self.names.is_empty() || self.docs_per_domain == 0 || self.vocab_size == 0 {
            return Err(Error::config("synthetic corpus needs names, documents and a vocabulary"));
        }
        if self.min_doc_len == 0 || self.min_doc_len > self.max_doc_len {
            return Err(Error::config("synthetic document lengths must satisfy 1 <= min <= max"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok(self
            .names
            .iter()
            .map(|_| {
                (0..self.docs_per_domain)
                    .map(|_| {
                        let len = rng.random_range(self.min_doc_len..=self.max_doc_len);
                        (0..len).map(|_| rng.random_range(0..self.vocab_size)).collect()
                    })
                    .collect()
            })
            .collect())
    }

    pub fn build(&self) -> Result<GroupedCorpus> {
        let docs = self.generate()?;
        let digest = hex::encode(Sha256::digest(serde_json::to_vec(self).expect("serializable")));
        let groups = self
            .names
            .iter()
            .zip(docs)
            .enumerate()
            .map(|(i, (name, seqs))| DomainGroup::new(i, name.clone(), seqs))
            .collect::<Result<Vec<_>>>()?;
        GroupedCorpus::from_groups(groups, digest)
    }

    /// Write data files and a manifest under `dir`; returns the manifest path.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io("cannot create corpus directory", dir, e))?;
        let mut manifest = String::new();
        for (i, seqs) in self.generate()?.into_iter().enumerate() {
            let file = format!("domain-{i:03}.txt");
            let mut body = String::new();
            for s in seqs {
                let line: Vec<String> = s.iter().map(|t| t.to_string()).collect();
                body.push_str(&line.join(" "));
                body.push('\n');
            }
            let path = dir.join(&file);
            fs::write(&path, body).map_err(|e| Error::io("cannot write data file", &path, e))?;
            manifest.push_str(&format!("[[domain]]\nname = {:?}\nfiles = [{:?}]\n\n", self.names[i], file));
        }
        let path = dir.join("manifest.toml");
        fs::write(&path, manifest).map_err(|e| Error::io("cannot write manifest", &path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(docs: Vec<Vec<Vec<TokenId>>>) -> GroupedCorpus {
        let groups = docs
            .into_iter()
            .enumerate()
            .map(|(i, d)| DomainGroup::new(i, format!("d{i}"), d).unwrap())
            .collect();
        GroupedCorpus::from_groups(groups, "test").unwrap()
    }

    fn write(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    #[test]
    fn single_exact_document_repeats() {
        let c = corpus(vec![vec![vec![1, 2, 3, 4]]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = c.sample_batch(0, 3, 4, &mut rng).unwrap();
        assert_eq!(b.rows, vec![vec![1, 2, 3, 4]; 3]);
        assert_eq!(b.boundaries, vec![vec![0]; 3]);
        assert_eq!(c.group(0).unwrap().tokens_served(), 12);
    }

    #[test]
    fn packing_truncates_the_last_document() {
        let c = corpus(vec![vec![vec![7, 7, 7]]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = c.sample_batch(0, 2, 8, &mut rng).unwrap();
        assert_eq!(b.rows[0], vec![7; 8]);
        assert_eq!(b.boundaries[0], vec![0, 3, 6]);
    }

    #[test]
    fn rows_are_full_and_pure() {
        let c = corpus(vec![vec![vec![1, 1], vec![1, 1, 1, 1, 1]], vec![vec![2; 3], vec![2; 11]]]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for d in 0..2 {
            let b = c.sample_batch(d, 60, 16, &mut rng).unwrap();
            assert_eq!(b.rows.len(), 60);
            for row in &b.rows {
                assert_eq!(row.len(), 16);
                assert!(row.iter().all(|t| *t as usize == d + 1));
            }
        }
    }

    #[test]
    fn per_gpu_step_token_count() {
        let c = corpus(vec![vec![vec![5; 700], vec![6; 1500]]]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = c.sample_batch(0, 60, 1024, &mut rng).unwrap();
        assert_eq!(b.num_tokens(), 61_440);
        assert_eq!(c.tokens_served(), vec![61_440]);
    }

    #[test]
    fn sampling_is_replayable() {
        let spec = SyntheticCorpus {
            names: vec!["a".into(), "b".into()],
            docs_per_domain: 20,
            min_doc_len: 3,
            max_doc_len: 40,
            vocab_size: 1000,
            seed: 4,
        };
        let batch = || {
            let c = spec.build().unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            c.sample_batch(1, 4, 32, &mut rng).unwrap()
        };
        assert_eq!(batch(), batch());
    }

    #[test]
    fn shares_and_errors() {
        let c = corpus(vec![vec![vec![1]], vec![vec![2]], vec![vec![3]], vec![vec![4]]]);
        assert!(c.domain_token_shares().is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        c.sample_batch(3, 2, 5, &mut rng).unwrap();
        assert_eq!(c.domain_token_shares().unwrap(), vec![0.0, 0.0, 0.0, 1.0]);
        c.sample_batch(0, 2, 5, &mut rng).unwrap();
        assert_eq!(c.domain_token_shares().unwrap(), vec![0.5, 0.0, 0.0, 0.5]);
        assert!(matches!(c.sample_batch(4, 1, 1, &mut rng), Err(Error::UnknownDomain { .. })));
    }

    #[test]
    fn load_manifest_and_data() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.txt", "1 2 3\n\n4 5\n");
        write(dir.path(), "b.txt", "9\n");
        write(
            dir.path(),
            "m.toml",
            "[[domain]]\nname = \"A\"\nfiles = [\"a.txt\"]\n[[domain]]\nname = \"B\"\nfiles = [\"b.txt\", \"a.txt\"]\n",
        );
        let c = GroupedCorpus::load(dir.path().join("m.toml")).unwrap();
        assert_eq!(c.names(), vec!["A", "B"]);
        assert_eq!(c.group(0).unwrap().sequences(), &[vec![1, 2, 3], vec![4, 5]]);
        assert_eq!(c.group(1).unwrap().sequences().len(), 3);
        assert_eq!(c.manifest_digest().len(), 64);
        let again = GroupedCorpus::load(dir.path().join("m.toml")).unwrap();
        assert_eq!(again.manifest_digest(), c.manifest_digest());
    }

    #[test]
    fn minimal_manifest() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "x.txt", "42\n");
        write(dir.path(), "m.toml", "[[domain]]\nname = \"only\"\nfiles = [\"x.txt\"]\n");
        let c = GroupedCorpus::load(dir.path().join("m.toml")).unwrap();
        assert_eq!(c.num_domains(), 1);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        write(p, "ok.txt", "1 2\n");
        write(p, "bad.txt", "1 2\n3 -4\n");

        write(p, "missing.toml", "[[domain]]\nname = \"Github\"\nfiles = [\"nope.txt\"]\n");
        let err = GroupedCorpus::load(p.join("missing.toml")).unwrap_err().to_string();
        assert!(err.contains("Github") && err.contains("nope.txt"), "{err}");

        write(p, "bad.toml", "[[domain]]\nname = \"A\"\nfiles = [\"bad.txt\"]\n");
        match GroupedCorpus::load(p.join("bad.toml")).unwrap_err() {
            Error::MalformedLine { line, .. } => assert_eq!(line, 2),
            other => panic!("{other}"),
        }

        write(p, "dup.toml", "[[domain]]\nname = \"A\"\nfiles = [\"ok.txt\"]\n[[domain]]\nname = \"A\"\nfiles = [\"ok.txt\"]\n");
        assert!(GroupedCorpus::load(p.join("dup.toml")).unwrap_err().to_string().contains("duplicate"));

        write(p, "empty.toml", "");
        assert!(GroupedCorpus::load(p.join("empty.toml")).unwrap_err().to_string().contains("zero domains"));
    }

    #[test]
    fn synthetic_round_trips_through_disk() {
        let spec = SyntheticCorpus {
            names: (0..22).map(|i| format!("domain-{i}")).collect(),
            docs_per_domain: 3,
            min_doc_len: 1,
            max_doc_len: 8,
            vocab_size: 50_000,
            seed: 1,
        };
        let dir = tempfile::tempdir().unwrap();
        let manifest = spec.write_to(dir.path()).unwrap();
        let loaded = GroupedCorpus::load(manifest).unwrap();
        let built = spec.build().unwrap();
        assert_eq!(loaded.num_domains(), 22);
        for (a, b) in loaded.groups().iter().zip(built.groups()) {
            assert_eq!(a.sequences(), b.sequences());
        }
    }

    #[test]
    fn tally_conserves_tokens() {
        let t = TokenTally::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..30 {
            t.draw(i % 3, 60, 1024, &mut rng).unwrap();
        }
        assert_eq!(t.tokens_served().iter().sum::<u64>(), 30 * 60 * 1024);
        assert!(t.draw(3, 1, 1, &mut rng).is_err());
    }
}

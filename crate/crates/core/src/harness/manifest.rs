//! Balanced, seeded sample selection from a Speech Commands style tree.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Label, NUM_CLASSES, WORDS};

/// Environment variable that overrides the dataset root.
pub const DATA_ROOT_ENV: &str = "SPEECHLEAK_DATA";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Testing,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Testing => "testing",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: Label,
    pub split: Split,
}

impl ManifestEntry {
    /// `<word>_<file stem>`; unique within a manifest built from one root.
    pub fn sample_id(&self) -> String {
        let stem = self
            .path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        format!("{}_{}", self.label.word(), stem)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Rejects duplicate paths.
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(&e.path) {
                return Err(Error::Config(format!(
                    "duplicate manifest path {}",
                    e.path.display()
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count_per_word(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for e in &self.entries {
            counts[e.label.index()] += 1;
        }
        counts
    }
}

/// Resolves the dataset root: the environment override wins over `fallback`.
pub fn dataset_root(fallback: Option<&Path>) -> Option<PathBuf> {
    std::env::var_os(DATA_ROOT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .or_else(|| fallback.map(Path::to_path_buf))
}

fn read_list(root: &Path, name: &str) -> Result<HashSet<String>> {
    let path = root.join(name);
    if !path.exists() {
        return Ok(HashSet::new());
    }
    Ok(fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

fn wav_files(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.file_type()?.is_file() && name.to_ascii_lowercase().ends_with(".wav") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Selects `n` files, `n / 10` per word with the remainder going to the
/// first words of the vocabulary, and interleaves them word by word so any
/// prefix of the manifest stays balanced.
///
/// Each word's file list is sorted and then shuffled with a generator seeded
/// from `seed` and the word index, so the draw is reproducible and does not
/// depend on directory iteration order. Split tags come from the corpus'
/// `validation_list.txt` / `testing_list.txt` when present.
pub fn build_manifest(root: &Path, seed: u64, n: usize) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let missing: Vec<String> = WORDS
        .iter()
        .filter(|w| !root.join(w).is_dir())
        .map(|w| w.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingWords {
            root: root.to_path_buf(),
            missing,
        });
    }
    let validation = read_list(root, "validation_list.txt")?;
    let testing = read_list(root, "testing_list.txt")?;

    let mut per_word: Vec<Vec<ManifestEntry>> = Vec::with_capacity(NUM_CLASSES);
    for (k, word) in WORDS.iter().enumerate() {
        let quota = n / NUM_CLASSES + usize::from(k < n % NUM_CLASSES);
        let mut names = wav_files(&root.join(word))?;
        if names.len() < quota {
            return Err(Error::Config(format!(
                "word {word:?} has {} files, {quota} requested",
                names.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64 + 1) << 32));
        names.shuffle(&mut rng);
        let label = Label::from_word(word).expect("vocabulary word");
        per_word.push(
            names
                .into_iter()
                .take(quota)
                .map(|name| {
                    let rel = format!("{word}/{name}");
                    let split = if testing.contains(&rel) {
                        Split::Testing
                    } else if validation.contains(&rel) {
                        Split::Validation
                    } else {
                        Split::Train
                    };
                    ManifestEntry {
                        path: root.join(word).join(name),
                        label,
                        split,
                    }
                })
                .collect(),
        );
    }

    let rounds = per_word.iter().map(Vec::len).max().unwrap_or(0);
    let mut iters: Vec<_> = per_word.into_iter().map(Vec::into_iter).collect();
    let mut entries = Vec::with_capacity(n);
    for _ in 0..rounds {
        for it in iters.iter_mut() {
            entries.extend(it.next());
        }
    }
    DatasetManifest::new(entries)
}

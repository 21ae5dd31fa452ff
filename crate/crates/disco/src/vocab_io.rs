//! Vocabulary bootstrap files: line-oriented text with one dotted concept
//! path per line (`#` comments and blank lines ignored); identifiers follow
//! from registration order. The dump format is one `path<TAB>hex-id` line
//! per registered concept.

use disco_core::scenario::default_vocabulary_paths;
use disco_core::vocabulary::{VocabError, VocabularyTree};

#[derive(Debug)]
pub struct VocabLoadError {
    pub line: usize,
    pub path: String,
    pub cause: VocabError,
}

impl std::fmt::Display for VocabLoadError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "vocabulary line {} ({:?}): {}", self.line, self.path, self.cause)
    }
}

impl std::error::Error for VocabLoadError {}

/// Registers one path per non-comment line, in file order.
pub fn load_vocabulary(text: &str) -> Result<VocabularyTree, VocabLoadError> {
    let mut vocab = VocabularyTree::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        vocab.register_str(line).map_err(|cause| VocabLoadError {
            line: idx + 1,
            path: line.to_string(),
            cause,
        })?;
    }
    Ok(vocab)
}

/// The builtin bootstrap document the scenario uses when no file is given.
pub fn builtin_bootstrap() -> String {
    let mut out = String::new();
    for p in default_vocabulary_paths() {
        out.push_str(p);
        out.push('\n');
    }
    out
}

/// `path<TAB>hex-id` lines in id order.
pub fn dump_vocabulary(vocab: &VocabularyTree) -> String {
    let mut out = String::new();
    for (path, id) in vocab.entries() {
        out.push_str(&path.dotted());
        out.push('\t');
        out.push_str(&format!("{id}"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn load_and_dump_round_trip() {
        let text = "# root\nevent\nevent.network\n\nalarm.failure # inline comment\n";
        let vocab = load_vocabulary(text).unwrap();
        let dump = dump_vocabulary(&vocab);
        assert!(dump.contains("event\t01000000\n"));
        assert!(dump.contains("event.network\t01010000\n"));
        assert!(dump.contains("alarm\t02000000\n"));
        assert!(dump.contains("alarm.failure\t02010000\n"));
    }

    #[test]
    fn ids_follow_registration_order() {
        let a = load_vocabulary("x\ny\n").unwrap();
        let b = load_vocabulary("y\nx\n").unwrap();
        assert_ne!(a.id_of("x").unwrap(), b.id_of("x").unwrap());
    }

    #[test]
    fn builtin_bootstrap_loads() {
        let vocab = load_vocabulary(&builtin_bootstrap()).unwrap();
        assert!(vocab.id_of("event.network.drops.forwarding.rfc791-ttl-exceeded").is_ok());
    }
}

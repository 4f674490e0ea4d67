//! Phrase identity used across clustering, extraction and agreement.

/// Trim, collapse internal whitespace, lowercase.
pub fn normalize_phrase(phrase: &str) -> String {
    phrase
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Deduplicates by normalized identity, keeping the first surface form and
/// dropping blank entries.
pub fn dedup_phrases<S: AsRef<str>>(phrases: &[S]) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    phrases
        .iter()
        .map(|p| p.as_ref().trim())
        .filter(|p| !p.is_empty() && seen.insert(normalize_phrase(p)))
        .map(str::to_string)
        .collect()
}

/// File-system-safe form of a statement id.
pub fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

//! Word lists used by the rule backend and the synthetic generator.

use crate::tree::Topic;

/// Keyword phrases per named topic. `Other` has none: it is the fallback.
pub fn topic_keywords(topic: Topic) -> &'static [&'static str] {
    match topic {
        Topic::Business => &[
            "customers",
            "products",
            "market share",
            "segment",
            "strategy",
            "competition",
            "demand",
            "launch",
            "pricing",
            "partnerships",
        ],
        Topic::RiskFactors => &[
            "risk",
            "uncertainty",
            "headwinds",
            "volatility",
            "supply chain",
            "inflation",
            "exposure",
            "downturn",
            "shortages",
            "currency",
        ],
        Topic::LegalProceedings => &[
            "litigation",
            "lawsuit",
            "settlement",
            "regulators",
            "investigation",
            "court",
            "antitrust",
            "patent",
            "claims",
            "subpoena",
        ],
        Topic::MdAndA => &[
            "revenue",
            "margin",
            "growth",
            "guidance",
            "outlook",
            "operating income",
            "year over year",
            "bookings",
            "backlog",
            "profitability",
        ],
        Topic::FinancialStatements => &[
            "balance sheet",
            "cash flow",
            "earnings per share",
            "depreciation",
            "liabilities",
            "assets",
            "accounting",
            "impairment",
            "receivables",
            "inventory",
        ],
        Topic::ControlsAndProcedures => &[
            "internal controls",
            "audit",
            "compliance",
            "governance",
            "disclosure controls",
            "sarbanes",
            "oversight",
            "material weakness",
            "remediation",
            "auditors",
        ],
        Topic::Other | Topic::Unknown => &[],
    }
}

/// Words ignored when comparing the content of two texts.
pub const STOPWORDS: &[&str] = &[
    "a", "about", "all", "also", "an", "and", "any", "are", "as", "at", "be", "been", "but", "by", "can", "could",
    "did", "do", "does", "for", "from", "give", "had", "has", "have", "how", "i", "if", "in", "into", "is", "it",
    "its", "just", "me", "more", "my", "of", "on", "or", "our", "out", "should", "so", "some", "that", "the", "their",
    "them", "then", "there", "these", "they", "this", "to", "up", "us", "was", "we", "were", "what", "when", "where",
    "which", "while", "who", "will", "with", "would", "you", "your",
];

/// Lowercased alphanumeric tokens (apostrophes kept inside words).
pub fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|t| t.trim_matches('\'').to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

pub fn content_words(text: &str) -> Vec<String> {
    tokens(text)
        .into_iter()
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .collect()
}

/// Occurrences of `phrase` as a whole-word sequence in `words`.
pub fn count_phrase(words: &[String], phrase: &str) -> usize {
    let parts: Vec<&str> = phrase.split_whitespace().collect();
    if parts.is_empty() || parts.len() > words.len() {
        return 0;
    }
    words
        .windows(parts.len())
        .filter(|w| w.iter().zip(&parts).all(|(a, b)| a == b))
        .count()
}

use std::collections::HashMap;

use super::SentimentLabel;

const BUNDLED: &str = include_str!("../../assets/emoji_sentiment.tsv");
const VARIATION_SELECTOR: char = '\u{fe0f}';

/// Emoji to binary sentiment lookup, loaded from a two-column table.
#[derive(Debug, Clone, Default)]
pub struct EmojiTable {
    entries: HashMap<String, SentimentLabel>,
}

impl EmojiTable {
    /// The table shipped in `assets/emoji_sentiment.tsv`.
    pub fn bundled() -> Self {
        Self::parse(BUNDLED).expect("bundled emoji table parses")
    }

    /// Parses `emoji<TAB>label` lines; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut entries = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (emoji, label) = line
                .split_once('\t')
                .ok_or_else(|| format!("line {}: expected two tab-separated columns", i + 1))?;
            let label = SentimentLabel::parse(label.trim()).ok_or_else(|| format!("line {}: bad label {label:?}", i + 1))?;
            entries.insert(normalize(emoji.trim()), label);
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, emoji: &str) -> Option<SentimentLabel> {
        self.entries.get(&normalize(emoji.trim())).copied()
    }
}

fn normalize(emoji: &str) -> String {
    emoji.chars().filter(|&c| c != VARIATION_SELECTOR).collect()
}

/// Deterministic lookup; `None` means the emoji is unresolved.
pub fn map_emoji_to_sentiment(emoji: &str, table: &EmojiTable) -> Option<SentimentLabel> {
    table.lookup(emoji)
}

use std::collections::BTreeMap;

/// Player id used for the engine-authored document under herding.
pub const PLANTED_PLAYER: &str = "planted";

/// One submission in one round of a competition.
///
/// Inside a round the player id doubles as the document id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Document {
    pub player_id: String,
    pub text: String,
    pub planted: bool,
    /// Authored by a participant whose documents are analyzed (as opposed to
    /// replayed or background submissions).
    pub live: bool,
    /// Number of annotators (0..=5) who marked the document as valid.
    pub validity_votes: Option<u8>,
    pub relevance_labels: Option<Vec<u8>>,
    pub subtopic_labels: BTreeMap<String, Vec<u8>>,
}

impl Document {
    pub fn new(player_id: impl Into<String>, text: impl Into<String>) -> Self {
        Document {
            player_id: player_id.into(),
            text: text.into(),
            live: true,
            ..Default::default()
        }
    }

    pub fn planted(text: impl Into<String>) -> Self {
        Document {
            player_id: PLANTED_PLAYER.to_string(),
            text: text.into(),
            planted: true,
            live: false,
            ..Default::default()
        }
    }

    pub fn id(&self) -> &str {
        &self.player_id
    }

    /// A revision of this document by the same player. Annotations belong to
    /// the old text and are dropped.
    pub fn with_text(&self, text: impl Into<String>) -> Self {
        Document {
            player_id: self.player_id.clone(),
            text: text.into(),
            planted: self.planted,
            live: self.live,
            ..Default::default()
        }
    }
}

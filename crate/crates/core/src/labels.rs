//! The eight semantic annotation dimensions and their label sets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// One of the eight dimensions each action is annotated along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelDimension {
    Rumor,
    Sentiment,
    State,
    Behavior,
    Stance,
    Belief,
    Subjectivity,
    Intent,
}

impl LabelDimension {
    pub const ALL: [LabelDimension; 8] = [
        LabelDimension::Rumor,
        LabelDimension::Sentiment,
        LabelDimension::State,
        LabelDimension::Behavior,
        LabelDimension::Stance,
        LabelDimension::Belief,
        LabelDimension::Subjectivity,
        LabelDimension::Intent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LabelDimension::Rumor => "rumor",
            LabelDimension::Sentiment => "sentiment",
            LabelDimension::State => "state",
            LabelDimension::Behavior => "behavior",
            LabelDimension::Stance => "stance",
            LabelDimension::Belief => "belief",
            LabelDimension::Subjectivity => "subjectivity",
            LabelDimension::Intent => "intent",
        }
    }

    /// The enumerated label set, in its canonical listing order.
    pub fn labels(self) -> &'static [&'static str] {
        match self {
            LabelDimension::Rumor => &["spread", "counter"],
            LabelDimension::Sentiment => &["angry", "calm", "happy", "sad", "fear", "surprise"],
            LabelDimension::State => &["positive", "negative", "neutral"],
            LabelDimension::Behavior => &["share", "comment"],
            LabelDimension::Stance => &["support", "oppose", "neutral"],
            LabelDimension::Belief => &["believe", "doubt"],
            LabelDimension::Subjectivity => &["subjective", "objective"],
            LabelDimension::Intent => &["question", "promotion", "opinion"],
        }
    }

    /// Label order used as the transport axis for Wasserstein distances.
    ///
    /// Polar dimensions put the neutral label between the two poles; every
    /// other dimension keeps its listing order.
    pub fn ordinal_labels(self) -> &'static [&'static str] {
        match self {
            LabelDimension::State => &["positive", "neutral", "negative"],
            LabelDimension::Stance => &["support", "neutral", "oppose"],
            other => other.labels(),
        }
    }

    /// Label assigned when no rule fires.
    pub fn default_label(self) -> &'static str {
        match self {
            LabelDimension::Rumor => "counter",
            LabelDimension::Sentiment => "calm",
            LabelDimension::State => "neutral",
            LabelDimension::Behavior => "comment",
            LabelDimension::Stance => "neutral",
            LabelDimension::Belief => "believe",
            LabelDimension::Subjectivity => "objective",
            LabelDimension::Intent => "opinion",
        }
    }

    pub fn contains(self, label: &str) -> bool {
        self.labels().contains(&label)
    }
}

impl fmt::Display for LabelDimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LabelDimension {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LabelDimension::ALL
            .into_iter()
            .find(|d| d.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::UnknownLabel {
                label: s.to_string(),
                context: "label dimension".into(),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_sets_are_exact() {
        assert_eq!(
            LabelDimension::Sentiment.labels(),
            &["angry", "calm", "happy", "sad", "fear", "surprise"]
        );
        assert_eq!(
            LabelDimension::Intent.labels(),
            &["question", "promotion", "opinion"]
        );
        for d in LabelDimension::ALL {
            assert!(d.contains(d.default_label()), "{d}");
            let mut a: Vec<_> = d.labels().to_vec();
            let mut b: Vec<_> = d.ordinal_labels().to_vec();
            a.sort_unstable();
            b.sort_unstable();
            assert_eq!(a, b, "{d}");
        }
    }

    #[test]
    fn parse_round_trip() {
        for d in LabelDimension::ALL {
            assert_eq!(d.name().parse::<LabelDimension>().unwrap(), d);
        }
        assert!("mood".parse::<LabelDimension>().is_err());
    }
}

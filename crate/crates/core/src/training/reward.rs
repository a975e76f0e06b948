use serde::{Deserialize, Serialize};

use crate::model::TokenId;
use crate::tasks::{Vocab, ANSWER, ANSWER_END, THINK, THINK_END};

/// Rule-based reward: one point for the four tags, one for the exact answer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: u8,
    pub answer: u8,
}

impl RewardBreakdown {
    pub fn total(&self) -> u8 {
        self.format + self.answer
    }
}

/// Text strictly between the first `<answer>` and the next `</answer>`, trimmed.
pub fn extract_answer_span(text: &str) -> Option<&str> {
    let start = text.find(ANSWER)? + ANSWER.len();
    let len = text[start..].find(ANSWER_END)?;
    Some(text[start..start + len].trim())
}

pub fn reward_from_text(text: &str, gold: &str) -> RewardBreakdown {
    let tags = [THINK, THINK_END, ANSWER, ANSWER_END];
    RewardBreakdown {
        format: tags.iter().all(|t| text.contains(t)) as u8,
        answer: (extract_answer_span(text) == Some(gold.trim())) as u8,
    }
}

/// Scores a token response by its space-joined rendering.
pub fn compute_reward(vocab: &Vocab, response: &[TokenId], gold: &str) -> RewardBreakdown {
    reward_from_text(&vocab.decode(response), gold)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_cases() {
        let r = reward_from_text("<think>t</think><answer>B</answer>", "B");
        assert_eq!((r.format, r.answer, r.total()), (1, 1, 2));
        let r = reward_from_text("<think>t</think><answer>C</answer>", "B");
        assert_eq!((r.format, r.answer, r.total()), (1, 0, 1));
        assert_eq!(reward_from_text("B", "B").total(), 0);
    }

    #[test]
    fn span_uses_first_open_and_next_close() {
        assert_eq!(extract_answer_span("<answer> a </answer><answer>b</answer>"), Some("a"));
        assert_eq!(extract_answer_span("</answer><answer>x"), None);
        assert_eq!(reward_from_text("<answer>B</answer>", "B"), RewardBreakdown { format: 0, answer: 1 });
    }

    #[test]
    fn token_responses() {
        let v = Vocab::standard();
        let good = v.encode("<think> locate key read value </think> <answer> v03 </answer> <eos>").unwrap();
        assert_eq!(compute_reward(v, &good, "v03").total(), 2);
        assert_eq!(compute_reward(v, &good, "v04").total(), 1);
        assert_eq!(compute_reward(v, &[9999], "v03").total(), 0);
    }
}

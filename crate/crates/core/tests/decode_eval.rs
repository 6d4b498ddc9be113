use std::collections::HashMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use serlm::decode_eval::{joint_prefix, parse_output, unweighted_accuracy, word_error_rate, Strategy as Decoding};
use serlm::prompts::{format_target, EmotionCode, Task};

fn code() -> impl Strategy<Value = EmotionCode> {
    (0..EmotionCode::ALL.len()).prop_map(|i| EmotionCode::ALL[i])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn joint_answers_round_trip(t in "[^|]{0,48}", c in code()) {
        let p = parse_output(&format_target(Task::Joint, Some(&t), Some(c)).unwrap());
        prop_assert!(!p.malformed, "{:?}", p.reasons);
        prop_assert_eq!(p.asr.as_deref(), Some(t.as_str()));
        prop_assert_eq!(p.emotion, Some(c));
    }

    #[test]
    fn single_field_answers_round_trip(t in "[^|]{0,48}", c in code()) {
        let asr = parse_output(&format_target(Task::Asr, Some(&t), None).unwrap());
        prop_assert!(!asr.malformed);
        prop_assert_eq!(asr.asr.as_deref(), Some(t.as_str()));
        prop_assert_eq!(asr.emotion, None);
        let ser = parse_output(&format_target(Task::Ser, None, Some(c)).unwrap());
        prop_assert!(!ser.malformed);
        prop_assert_eq!(ser.asr, None);
        prop_assert_eq!(ser.emotion, Some(c));
    }

    #[test]
    fn truncated_answers_are_flagged(t in "[^|]{0,24}", c in code(), cut in 1usize..8) {
        let full = format_target(Task::Joint, Some(&t), Some(c)).unwrap();
        let chars: Vec<char> = full.chars().collect();
        let keep = chars.len().saturating_sub(cut);
        let truncated: String = chars[..keep].iter().collect();
        let p = parse_output(&truncated);
        // Cutting only trailing padding spaces is harmless; anything else must be caught.
        if truncated.trim_end().ends_with('|') && truncated.trim_end() == full {
            prop_assert!(!p.malformed);
        } else {
            prop_assert!(p.malformed, "accepted {truncated:?}");
            prop_assert_eq!(p.emotion, None);
            prop_assert_eq!(p.asr, None);
        }
    }

    #[test]
    fn leading_chatter_is_flagged(junk in "[A-Za-z][A-Za-z ]{0,12}", c in code()) {
        let text = format!("{junk} {}", format_target(Task::Ser, None, Some(c)).unwrap());
        let p = parse_output(&text);
        prop_assert!(p.malformed);
        prop_assert_eq!(p.emotion, None);
    }

    #[test]
    fn wer_is_zero_on_identity(words in proptest::collection::vec("[a-z]{1,6}", 1..12)) {
        let s = words.join(" ");
        prop_assert_eq!(word_error_rate(&s, &s).unwrap(), 0.0);
    }
}

#[test]
fn unknown_codes_and_fields_are_flagged() {
    for text in [
        "| Emotion: Q |",
        "| Emotion: AA |",
        "| Emotion: |",
        "| Mood: A |",
        "| ASR: hi | ASR: hi |",
        "| Emotion: A | ASR: hi |",
        "| Emotion: A | Emotion: S |",
        "Emotion: A",
        "",
        "||",
    ] {
        let p = parse_output(text);
        assert!(p.malformed, "{text:?} accepted");
        assert!(p.emotion.is_none() && p.asr.is_none(), "{text:?}");
        assert!(!p.reasons.is_empty());
    }
}

#[test]
fn surrounding_whitespace_is_ignored() {
    let p = parse_output("  | Emotion: H |\n");
    assert!(!p.malformed);
    assert_eq!(p.emotion, Some(EmotionCode::H));
}

#[test]
fn joint_prefix_plus_completion_parses() {
    let p = parse_output(&format!("{} S |", joint_prefix("it is late")));
    assert_eq!(p.asr.as_deref(), Some("it is late"));
    assert_eq!(p.emotion, Some(EmotionCode::S));
}

#[test]
fn wer_examples() {
    assert_eq!(word_error_rate("a b c d", "a x c d").unwrap(), 0.25);
    assert_eq!(word_error_rate("a b", "").unwrap(), 1.0);
    assert_eq!(word_error_rate("a", "a b c").unwrap(), 2.0);
    assert!(word_error_rate("", "a").is_err());
}

/// Memoised recursive edit distance, independent of the rolling-row version.
fn edit_distance(r: &[&str], h: &[&str]) -> usize {
    fn go<'a>(r: &[&'a str], h: &[&'a str], memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if r.is_empty() {
            return h.len();
        }
        if h.is_empty() {
            return r.len();
        }
        if let Some(&d) = memo.get(&(r.len(), h.len())) {
            return d;
        }
        let d = if r[0] == h[0] {
            go(&r[1..], &h[1..], memo)
        } else {
            1 + go(&r[1..], &h[1..], memo)
                .min(go(&r[1..], h, memo))
                .min(go(r, &h[1..], memo))
        };
        memo.insert((r.len(), h.len()), d);
        d
    }
    go(r, h, &mut HashMap::new())
}

#[test]
fn wer_matches_recursive_oracle() {
    let vocab = ["a", "b", "c", "d", "e", "the", "cat"];
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..500 {
        let mut words = |lo: usize| -> Vec<&str> {
            let n = rng.random_range(lo..10);
            (0..n).map(|_| vocab[rng.random_range(0..vocab.len())]).collect()
        };
        let r = words(1);
        let h = words(0);
        let want = edit_distance(&r, &h) as f64 / r.len() as f64;
        let got = word_error_rate(&r.join(" "), &h.join(" ")).unwrap();
        assert_eq!(got, want, "{r:?} vs {h:?}");
    }
}

#[test]
fn accuracy_counts_missing_predictions_as_errors() {
    use EmotionCode::*;
    let acc = unweighted_accuracy(&[Some(A), None, Some(S), Some(H)], &[A, N, S, N]).unwrap();
    assert_eq!(acc, 0.5);
    assert!(unweighted_accuracy(&[], &[]).is_err());
    assert!(unweighted_accuracy(&[Some(A)], &[A, S]).is_err());
}

#[test]
fn strategy_names_parse_and_reject() {
    for s in Decoding::ALL {
        assert_eq!(s.name().parse::<Decoding>().unwrap(), s);
    }
    let err = "greedy".parse::<Decoding>().unwrap_err().to_string();
    for s in Decoding::ALL {
        assert!(err.contains(s.name()), "{err}");
    }
    assert!(!Decoding::SerOnly.needs_transcript());
    assert!(Decoding::PromptHint.needs_transcript() && Decoding::JointPrefix.needs_transcript());
}

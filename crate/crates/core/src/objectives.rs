//! Pre-training and adaptation example construction.
//!
//! Span corruption replaces masked spans with sentinel ids and lists the
//! masked contents, sentinel-delimited, in the target, closing with one final
//! sentinel. LM examples split a document into prefix and continuation and
//! contain no sentinels. Both feed the same text-to-text trainer.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::vocab::{Vocabulary, EOS_ID, UNK_ID};

#[derive(Debug, Clone, Copy)]
pub struct SpanCorruptionConfig {
    /// Fraction of tokens to mask.
    pub corruption_rate: f64,
    /// Expected tokens per masked span (geometric lengths).
    pub mean_span_length: f64,
    pub seed: u64,
}

impl Default for SpanCorruptionConfig {
    fn default() -> Self {
        Self {
            corruption_rate: 0.15,
            mean_span_length: 3.0,
            seed: 0,
        }
    }
}

impl SpanCorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.corruption_rate > 0.0 && self.corruption_rate < 1.0) {
            return Err(Error::Config(format!(
                "corruption_rate must be in (0, 1), got {}",
                self.corruption_rate
            )));
        }
        if self.mean_span_length < 1.0 {
            return Err(Error::Config(format!(
                "mean_span_length must be >= 1, got {}",
                self.mean_span_length
            )));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// A text-to-text pair in token-id space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Text2TextExample {
    pub input_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
    /// The masked spans this example was built from, when applicable.
    pub spans: Option<Vec<(usize, usize)>>,
}

impl Text2TextExample {
    /// Appends EOS unless the target already ends with it.
    pub fn ensure_eos(mut self) -> Self {
        if self.target_ids.last() != Some(&EOS_ID) {
            self.target_ids.push(EOS_ID);
        }
        self
    }
}

/// Deterministic core of span corruption: replaces each `[start, end)` span
/// with the next sentinel in order; the target lists sentinel_i followed by
/// span i's contents, then one final sentinel.
pub fn corrupt_with_spans(
    tokens: &[u32],
    spans: &[(usize, usize)],
    vocab: &Vocabulary,
) -> Result<Text2TextExample> {
    let mut prev_end = 0usize;
    for (i, &(start, end)) in spans.iter().enumerate() {
        if start >= end {
            return Err(Error::Span(format!("span {i} [{start}, {end}) is empty")));
        }
        if end > tokens.len() {
            return Err(Error::Span(format!(
                "span {i} [{start}, {end}) exceeds document length {}",
                tokens.len()
            )));
        }
        if i > 0 && start < prev_end {
            return Err(Error::Span(format!(
                "span {i} [{start}, {end}) overlaps or is out of order"
            )));
        }
        prev_end = end;
    }

    let mut input = Vec::with_capacity(tokens.len());
    let mut target = Vec::new();
    let mut cursor = 0usize;
    for (i, &(start, end)) in spans.iter().enumerate() {
        input.extend_from_slice(&tokens[cursor..start]);
        input.push(vocab.sentinel_id(i)?);
        target.push(vocab.sentinel_id(i)?);
        target.extend_from_slice(&tokens[start..end]);
        cursor = end;
    }
    input.extend_from_slice(&tokens[cursor..]);
    target.push(vocab.sentinel_id(spans.len())?);
    Ok(Text2TextExample {
        input_ids: input,
        target_ids: target,
        spans: Some(spans.to_vec()),
    })
}

/// Samples non-overlapping spans (uniform starts, geometric lengths with the
/// configured mean, resampling on overlap) so the masked fraction lands near
/// `corruption_rate`, then delegates to [`corrupt_with_spans`]. Deterministic
/// given the seed.
pub fn sample_span_corruption(
    tokens: &[u32],
    cfg: &SpanCorruptionConfig,
    vocab: &Vocabulary,
) -> Result<Text2TextExample> {
    cfg.validate()?;
    if tokens.len() < 2 {
        return Err(Error::Span(format!(
            "document of length {} too short to corrupt",
            tokens.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = tokens.len();
    let budget = ((n as f64 * cfg.corruption_rate).round() as usize).max(1);
    let num_spans = ((budget as f64 / cfg.mean_span_length).round() as usize)
        .max(1)
        .min(vocab.num_sentinels().saturating_sub(1));

    let mut chosen: Vec<(usize, usize)> = Vec::new();
    let mut masked = 0usize;
    for _ in 0..num_spans {
        let mut placed = false;
        for _attempt in 0..1000 {
            let len = (geometric_length(&mut rng, cfg.mean_span_length)).min(n - 1);
            if masked + len >= n {
                continue;
            }
            let start = rng.random_range(0..=n - len);
            let end = start + len;
            if chosen.iter().any(|&(s, e)| start < e && s < end) {
                continue;
            }
            chosen.push((start, end));
            masked += len;
            placed = true;
            break;
        }
        if !placed {
            break;
        }
    }
    if chosen.is_empty() || masked >= n {
        return Err(Error::Span(
            "span sampling could not leave any unmasked tokens".into(),
        ));
    }
    chosen.sort_unstable();
    corrupt_with_spans(tokens, &chosen, vocab)
}

fn geometric_length(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 1.0 {
        return 1;
    }
    let p = 1.0 / mean;
    let u: f64 = rng.random();
    1 + (u.ln() / (1.0 - p).ln()).floor() as usize
}

/// Prefix → continuation split; the continuation gets an EOS and no sentinels
/// appear anywhere.
pub fn make_lm_example(tokens: &[u32], split_point: usize) -> Result<Text2TextExample> {
    if split_point == 0 || split_point >= tokens.len() {
        return Err(Error::Split(format!(
            "split point {split_point} invalid for document of length {}",
            tokens.len()
        )));
    }
    let mut target = tokens[split_point..].to_vec();
    target.push(EOS_ID);
    Ok(Text2TextExample {
        input_ids: tokens[..split_point].to_vec(),
        target_ids: target,
        spans: None,
    })
}

/// Prepends sentinel-0 to the target so downstream targets resemble
/// pre-training targets.
pub fn add_sentinel_prefix(ex: &Text2TextExample, vocab: &Vocabulary) -> Result<Text2TextExample> {
    if ex.target_ids.is_empty() {
        return Err(Error::Label("cannot prefix an empty target".into()));
    }
    let mut target = Vec::with_capacity(ex.target_ids.len() + 1);
    target.push(vocab.sentinel_id(0)?);
    target.extend_from_slice(&ex.target_ids);
    Ok(Text2TextExample {
        input_ids: ex.input_ids.clone(),
        target_ids: target,
        spans: ex.spans.clone(),
    })
}

/// Casts a classification pair to text-to-text: the target is the encoded
/// label plus EOS; the input passes through with no task-name prefix.
pub fn cast_classification(
    input_text: &str,
    class_label: &str,
    vocab: &Vocabulary,
) -> Result<Text2TextExample> {
    let label_ids = vocab.encode_text(class_label);
    if label_ids.is_empty() || label_ids.iter().all(|&id| id == UNK_ID) {
        return Err(Error::Label(format!(
            "label {class_label:?} does not encode to any known token"
        )));
    }
    let mut target = label_ids;
    target.push(EOS_ID);
    Ok(Text2TextExample {
        input_ids: vocab.encode_text(input_text),
        target_ids: target,
        spans: None,
    })
}

/// Reassembles the original document from a span-corruption pair: non-sentinel
/// runs of the input interleaved with the sentinel-delimited runs of the
/// target. Used by the reconstruction property tests.
pub fn reconstruct(example: &Text2TextExample, vocab: &Vocabulary) -> Result<Vec<u32>> {
    let mut target_chunks: Vec<Vec<u32>> = Vec::new();
    let mut current: Option<Vec<u32>> = None;
    for &id in &example.target_ids {
        if vocab.is_sentinel(id) {
            if let Some(chunk) = current.take() {
                target_chunks.push(chunk);
            }
            current = Some(Vec::new());
        } else if let Some(chunk) = current.as_mut() {
            chunk.push(id);
        } else {
            return Err(Error::Span("target does not start with a sentinel".into()));
        }
    }
    // the final sentinel opens an empty chunk; drop it
    let mut chunks = target_chunks.into_iter();
    let mut out = Vec::new();
    for &id in &example.input_ids {
        if vocab.is_sentinel(id) {
            let chunk = chunks
                .next()
                .ok_or_else(|| Error::Span("more input sentinels than target spans".into()))?;
            out.extend(chunk);
        } else {
            out.push(id);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::Corpus;
    use proptest::prelude::*;

    fn party_vocab() -> Vocabulary {
        let corpus = Corpus::from_text("Thank you for inviting me to your party last week");
        Vocabulary::build(&corpus, 64, 4).unwrap()
    }

    #[test]
    fn worked_example_reproduces_verbatim() {
        let v = party_vocab();
        let tokens = v.encode_text("Thank you for inviting me to your party last week");
        // spans cover "for inviting" and "last"
        let ex = corrupt_with_spans(&tokens, &[(2, 4), (8, 9)], &v).unwrap();
        assert_eq!(
            v.decode_text(&ex.input_ids).unwrap(),
            "Thank you \u{27e8}X\u{27e9} me to your party \u{27e8}Y\u{27e9} week"
        );
        assert_eq!(
            v.decode_text(&ex.target_ids).unwrap(),
            "\u{27e8}X\u{27e9} for inviting \u{27e8}Y\u{27e9} last \u{27e8}Z\u{27e9}"
        );
    }

    #[test]
    fn empty_span_list_keeps_input_and_emits_final_sentinel() {
        let v = party_vocab();
        let tokens = v.encode_text("Thank you");
        let ex = corrupt_with_spans(&tokens, &[], &v).unwrap();
        assert_eq!(ex.input_ids, tokens);
        assert_eq!(ex.target_ids, vec![v.sentinel_id(0).unwrap()]);
    }

    #[test]
    fn whole_text_span_masks_everything() {
        let v = party_vocab();
        let tokens = v.encode_text("Thank you for");
        let ex = corrupt_with_spans(&tokens, &[(0, 3)], &v).unwrap();
        assert_eq!(ex.input_ids, vec![v.sentinel_id(0).unwrap()]);
        let mut want = vec![v.sentinel_id(0).unwrap()];
        want.extend_from_slice(&tokens);
        want.push(v.sentinel_id(1).unwrap());
        assert_eq!(ex.target_ids, want);
    }

    #[test]
    fn overlapping_and_out_of_range_spans_error() {
        let v = party_vocab();
        let tokens = v.encode_text("Thank you for inviting me");
        assert!(matches!(
            corrupt_with_spans(&tokens, &[(0, 2), (1, 3)], &v),
            Err(Error::Span(_))
        ));
        assert!(matches!(
            corrupt_with_spans(&tokens, &[(3, 9)], &v),
            Err(Error::Span(_))
        ));
        assert!(matches!(
            corrupt_with_spans(&tokens, &[(2, 2)], &v),
            Err(Error::Span(_))
        ));
    }

    #[test]
    fn sampled_targets_begin_with_sentinel_and_are_seed_deterministic() {
        let v = party_vocab();
        let tokens = v.encode_text("Thank you for inviting me to your party last week");
        let cfg = SpanCorruptionConfig::default().with_seed(11);
        let a = sample_span_corruption(&tokens, &cfg, &v).unwrap();
        let b = sample_span_corruption(&tokens, &cfg, &v).unwrap();
        assert_eq!(a, b);
        assert!(v.is_sentinel(a.target_ids[0]));
    }

    #[test]
    fn sampled_mask_fraction_is_near_rate() {
        let corpus = Corpus::from_text(
            "one two three four five six seven eight nine ten eleven twelve",
        );
        let v = Vocabulary::build(&corpus, 64, 8).unwrap();
        // 64-token doc
        let mut tokens = Vec::new();
        for i in 0..64u32 {
            tokens.push(v.first_text_id() + (i % 12));
        }
        let mut masked_total = 0usize;
        let runs = 10_000;
        for seed in 0..runs {
            let cfg = SpanCorruptionConfig::default().with_seed(seed);
            let ex = sample_span_corruption(&tokens, &cfg, &v).unwrap();
            let spans = ex.spans.as_ref().unwrap();
            masked_total += spans.iter().map(|&(s, e)| e - s).sum::<usize>();
        }
        let fraction = masked_total as f64 / (runs as f64 * 64.0);
        assert!(
            (0.12..=0.18).contains(&fraction),
            "empirical masked fraction {fraction}"
        );
    }

    #[test]
    fn lm_example_splits_and_appends_eos() {
        let v = party_vocab();
        let tokens = v.encode_text("Thank you for inviting");
        let ex = make_lm_example(&tokens, 2).unwrap();
        assert_eq!(ex.input_ids, tokens[..2]);
        assert_eq!(ex.target_ids[..2], tokens[2..]);
        assert_eq!(*ex.target_ids.last().unwrap(), EOS_ID);

        let two = make_lm_example(&tokens[..2], 1).unwrap();
        assert_eq!(two.input_ids.len(), 1);
        assert_eq!(two.target_ids.len(), 2);

        assert!(matches!(make_lm_example(&tokens, 0), Err(Error::Split(_))));
        assert!(matches!(
            make_lm_example(&tokens, tokens.len()),
            Err(Error::Split(_))
        ));
    }

    #[test]
    fn lm_examples_are_sentinel_free() {
        let v = party_vocab();
        let tokens = v.encode_text("Thank you for inviting me to your party last week");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let split = rng.random_range(1..tokens.len());
            let ex = make_lm_example(&tokens, split).unwrap();
            assert!(ex.input_ids.iter().all(|&id| !v.is_sentinel(id)));
            assert!(ex.target_ids.iter().all(|&id| !v.is_sentinel(id)));
        }
    }

    #[test]
    fn sentinel_prefix_prepends_sentinel_zero() {
        let v = party_vocab();
        let ex = cast_classification("you for", "Thank", &v).unwrap();
        let prefixed = add_sentinel_prefix(&ex, &v).unwrap();
        assert_eq!(prefixed.target_ids[0], v.sentinel_id(0).unwrap());
        assert_eq!(prefixed.target_ids[1..], ex.target_ids);
        // applying twice stacks two sentinels; idempotence is not claimed
        let twice = add_sentinel_prefix(&prefixed, &v).unwrap();
        assert_eq!(twice.target_ids[0], twice.target_ids[1]);

        let empty = Text2TextExample {
            input_ids: vec![0],
            target_ids: vec![],
            spans: None,
        };
        assert!(add_sentinel_prefix(&empty, &v).is_err());
    }

    #[test]
    fn classification_target_is_label_plus_eos() {
        let corpus = Corpus::from_text("the movie was great positive negative not entailment");
        let v = Vocabulary::build(&corpus, 64, 2).unwrap();
        let ex = cast_classification("the movie was great", "positive", &v).unwrap();
        assert_eq!(ex.target_ids.len(), 2);
        assert_eq!(ex.target_ids[0], v.id("positive").unwrap());
        assert_eq!(ex.target_ids[1], EOS_ID);
        // input passes through unmodified (no task prefix)
        assert_eq!(ex.input_ids, v.encode_text("the movie was great"));

        let multi = cast_classification("the movie", "not entailment", &v).unwrap();
        assert_eq!(multi.target_ids.len(), 3);

        assert!(matches!(
            cast_classification("x", "zzz qqq", &v),
            Err(Error::Label(_))
        ));
    }

    proptest! {
        /// Interleaving input runs with target spans reproduces the document.
        #[test]
        fn reconstruction_roundtrip(seed in 0u64..500) {
            let v = party_vocab();
            let tokens = v.encode_text("Thank you for inviting me to your party last week");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut spans = Vec::new();
            let mut cursor = 0usize;
            while cursor + 1 < tokens.len() && spans.len() < 3 {
                let start = rng.random_range(cursor..tokens.len());
                let maxlen = tokens.len() - start;
                if maxlen == 0 { break; }
                let len = rng.random_range(1..=maxlen.min(3));
                spans.push((start, start + len));
                cursor = start + len + 1;
            }
            let ex = corrupt_with_spans(&tokens, &spans, &v).unwrap();
            // sentinel counts: input = spans, target = spans + 1
            let input_sentinels = ex.input_ids.iter().filter(|&&id| v.is_sentinel(id)).count();
            let target_sentinels = ex.target_ids.iter().filter(|&&id| v.is_sentinel(id)).count();
            prop_assert_eq!(input_sentinels, spans.len());
            prop_assert_eq!(target_sentinels, spans.len() + 1);
            prop_assert_eq!(reconstruct(&ex, &v).unwrap(), tokens);
        }
    }
}

//! Watermark verification: extraction from text, the extraction rate, the
//! binomial z-score, and the verdict.
//!
//! Under the null (no watermark) every extracted bit matches a fresh
//! Bernoulli(0.5) signature bit with probability one half, so the match
//! count N over |M| bits is Binomial(|M|, 0.5). The z-score standardizes N
//! with mean |M|/2 and standard deviation sqrt(|M|/4); the one-sided normal
//! tail gives the p-value (no continuity correction).

use crate::corpus::TokenSequence;
use crate::error::Error;
use crate::stats::normal_upper_tail;
use crate::wm_model::{BitMessage, WatermarkModel};
use crate::Result;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "watermarked")]
    Watermarked,
    #[serde(rename = "not-watermarked")]
    NotWatermarked,
}

/// Everything the verdict rests on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationReport {
    /// Extracted bits as a 0/1 string.
    pub extracted: String,
    /// Matching-bit count N.
    pub matches: usize,
    /// Extraction rate N / |M|.
    pub wer: f64,
    pub z: f64,
    pub p_one_sided: f64,
    pub verdict: Verdict,
    pub threshold: f64,
}

/// Extracts the signature bits from a finished token sequence.
pub fn extract_from_text(model: &WatermarkModel, text: &TokenSequence) -> Result<BitMessage> {
    if model.train_steps == 0 {
        return Err(Error::UntrainedModel);
    }
    let (_, bits) = model.extract_from_tokens(text)?;
    Ok(bits)
}

/// Matching-bit fraction between two equal-length messages.
pub fn wer(a: &BitMessage, b: &BitMessage) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { left: a.len(), right: b.len() });
    }
    let matches = a.bits.iter().zip(&b.bits).filter(|(x, y)| x == y).count();
    Ok(matches as f64 / a.len() as f64)
}

/// Binomial z-score: `(N - |M|/2) / sqrt(|M|/4)`.
pub fn z_score(m_len: usize, matches: usize) -> Result<f64> {
    if m_len == 0 {
        return Err(Error::EmptyInput("message"));
    }
    if matches > m_len {
        return Err(Error::InvalidConfig(format!("matches {matches} exceed length {m_len}")));
    }
    let mu = m_len as f64 * 0.5;
    let sigma = (m_len as f64 * 0.25).sqrt();
    Ok((matches as f64 - mu) / sigma)
}

/// Full verification: extract, count matches, score, and decide.
/// The verdict is `watermarked` iff `z >= z_threshold` (boundary included).
pub fn verify(
    model: &WatermarkModel,
    text: &TokenSequence,
    message: &BitMessage,
    z_threshold: f64,
) -> Result<VerificationReport> {
    let extracted = extract_from_text(model, text)?;
    if extracted.len() != message.len() {
        return Err(Error::MessageLengthMismatch {
            got: message.len(),
            expected: extracted.len(),
        });
    }
    let matches = extracted.bits.iter().zip(&message.bits).filter(|(a, b)| a == b).count();
    let z = z_score(message.len(), matches)?;
    Ok(VerificationReport {
        extracted: extracted.to_bit_string(),
        matches,
        wer: matches as f64 / message.len() as f64,
        z,
        p_one_sided: normal_upper_tail(z),
        verdict: if z >= z_threshold { Verdict::Watermarked } else { Verdict::NotWatermarked },
        threshold: z_threshold,
    })
}

/// Builds a report from an already-extracted message (used when scoring
/// attacked or clean text populations without re-running extraction).
pub fn report_from_bits(
    extracted: &BitMessage,
    message: &BitMessage,
    z_threshold: f64,
) -> Result<VerificationReport> {
    if extracted.len() != message.len() {
        return Err(Error::LengthMismatch { left: extracted.len(), right: message.len() });
    }
    let matches = extracted.bits.iter().zip(&message.bits).filter(|(a, b)| a == b).count();
    let z = z_score(message.len(), matches)?;
    Ok(VerificationReport {
        extracted: extracted.to_bit_string(),
        matches,
        wer: matches as f64 / message.len() as f64,
        z,
        p_one_sided: normal_upper_tail(z),
        verdict: if z >= z_threshold { Verdict::Watermarked } else { Verdict::NotWatermarked },
        threshold: z_threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn z_reference_values() {
        assert_eq!(z_score(16, 16).unwrap(), 4.0);
        assert_eq!(z_score(64, 32).unwrap(), 0.0);
        assert_eq!(z_score(64, 64).unwrap(), 8.0);
        assert!(matches!(z_score(0, 0), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn z_paper_scale_reference() {
        // at |M| = 64, the reported average z of 7.12 corresponds to about
        // 60.5 recovered bits; check the mapping is consistent
        let z = z_score(64, 60).unwrap();
        assert!((z - 7.0).abs() < 1e-12);
        let z = z_score(64, 61).unwrap();
        assert!((z - 7.25).abs() < 1e-12);
    }

    #[test]
    fn z_monotone_and_antisymmetric() {
        for m_len in [4usize, 16, 64] {
            let mut last = f64::NEG_INFINITY;
            for n in 0..=m_len {
                let z = z_score(m_len, n).unwrap();
                assert!(z > last);
                last = z;
                let mirrored = z_score(m_len, m_len - n).unwrap();
                assert!((z + mirrored).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn p_value_at_threshold_four() {
        let z = z_score(16, 16).unwrap();
        let p = normal_upper_tail(z);
        assert!(p >= 2.9e-5 && p <= 3.3e-5, "p = {p}");
    }

    #[test]
    fn wer_identities() {
        let m = BitMessage::parse("1011001").unwrap();
        assert_eq!(wer(&m, &m).unwrap(), 1.0);
        assert_eq!(wer(&m, &m.complement()).unwrap(), 0.0);
        let other = BitMessage::parse("1011").unwrap();
        assert!(wer(&m, &other).is_err());
    }

    #[test]
    fn wer_random_pairs_near_half() {
        let mut rng = crate::rng::stream(17, &[1]);
        let trials = 10_000;
        let mut total = 0.0;
        for _ in 0..trials {
            let a = BitMessage::random(64, &mut rng);
            let b = BitMessage::random(64, &mut rng);
            total += wer(&a, &b).unwrap();
        }
        let mean = total / trials as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn report_boundary_and_threshold_flip() {
        let m = BitMessage::parse("1111111111111111").unwrap();
        // all 16 bits recovered: z = 4 exactly, watermarked at threshold 4
        let r = report_from_bits(&m, &m, 4.0).unwrap();
        assert_eq!(r.matches, 16);
        assert_eq!(r.z, 4.0);
        assert_eq!(r.verdict, Verdict::Watermarked);
        let r = report_from_bits(&m, &m, 4.0001).unwrap();
        assert_eq!(r.verdict, Verdict::NotWatermarked);

        // z = 2 (12 of 16): not watermarked at 4, watermarked at 1.64
        let mut twelve = m.clone();
        for i in 0..4 {
            twelve.bits[i] = 0;
        }
        let r = report_from_bits(&twelve, &m, 4.0).unwrap();
        assert_eq!(r.z, 2.0);
        assert_eq!(r.verdict, Verdict::NotWatermarked);
        let r = report_from_bits(&twelve, &m, 1.64).unwrap();
        assert_eq!(r.verdict, Verdict::Watermarked);
    }

    #[test]
    fn verdict_monotone_in_threshold() {
        let m = BitMessage::parse("11111111").unwrap();
        let mut rng = crate::rng::stream(23, &[2]);
        for _ in 0..200 {
            let got = BitMessage::random(8, &mut rng);
            let lo = report_from_bits(&got, &m, 1.0).unwrap();
            let hi = report_from_bits(&got, &m, 3.0).unwrap();
            if hi.verdict == Verdict::Watermarked {
                assert_eq!(lo.verdict, Verdict::Watermarked);
            }
        }
    }

    #[test]
    fn null_calibration_far_below_threshold() {
        // fresh random 16-bit pairs: P(z >= 4) = P(N = 16) = 2^-16
        let mut rng = crate::rng::stream(29, &[3]);
        let trials = 20_000;
        let mut hits = 0usize;
        for _ in 0..trials {
            let a = BitMessage::random(16, &mut rng);
            let b = BitMessage::random(16, &mut rng);
            let matches = a.bits.iter().zip(&b.bits).filter(|(x, y)| x == y).count();
            if z_score(16, matches).unwrap() >= 4.0 {
                hits += 1;
            }
        }
        assert!((hits as f64 / trials as f64) <= 1e-3, "hits {hits}");
    }

    #[test]
    fn report_serializes_all_fields() {
        let m = BitMessage::parse("1010").unwrap();
        let r = report_from_bits(&m, &m, 2.0).unwrap(); // 4/4 matches: z = 2
        let json = serde_json::to_string(&r).unwrap();
        for key in ["extracted", "matches", "wer", "z", "p_one_sided", "verdict", "threshold"] {
            assert!(json.contains(key), "missing {key} in {json}");
        }
        assert!(json.contains("\"verdict\":\"watermarked\""));
    }
}

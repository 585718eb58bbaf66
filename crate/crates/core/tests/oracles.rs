mod common;

use common::*;
use paradiff::denoiser::{DenoiserConfig, DenoiserModel};
use paradiff::harness::metrics::{bleu, distinct_n, sentence_bleu};
use paradiff::rng::{randn, seeded};
use paradiff::schedule::NoiseSchedule;

#[test]
fn every_denoiser_block_passes_gradcheck() {
    let groups = denoiser_gradcheck(3);
    let names: Vec<&str> = groups.iter().map(|g| g.0.as_str()).collect();
    for want in ["time", "input", "block0.self_attn", "block0.cross_attn", "block0.adaln", "block0.ffn", "block1.ffn", "norm_out", "output", "skip", "null_cond"] {
        assert!(names.contains(&want), "missing group {want} in {names:?}");
    }
    for (g, rel) in groups {
        assert!(rel < 1e-4, "{g}: relative error {rel:e}");
    }
}

#[test]
fn forward_process_matches_closed_form() {
    for t in [1, 10, 1000] {
        for s in [NoiseSchedule::cosine(t, 0.008, 0.999).unwrap(), NoiseSchedule::linear(t, 1e-4, 0.02).unwrap()] {
            schedule_invariants(&s).unwrap();
            let checks: Vec<usize> = [1, t / 2, t].into_iter().filter(|&c| c >= 1).collect();
            for (step, z, v) in forward_mc(&s, 1.5, 100_000, 7 + t as u64, &checks) {
                assert!(z < 3.0, "T={t} step {step}: mean off by {z:.2} SE");
                assert!(v < 0.02, "T={t} step {step}: variance off by {:.2}%", 100.0 * v);
            }
        }
    }
}

#[test]
fn bleu_matches_hand_counts() {
    for (h, r, want) in hand_bleu_cases() {
        assert!((sentence_bleu(h, r) - want).abs() < 1e-6, "{h:?}");
        assert!((oracle_bleu(&[(h, r)]) - want).abs() < 1e-6, "oracle disagrees on {h:?}");
    }
    let cases = hand_bleu_cases();
    let hyps: Vec<&str> = cases.iter().map(|c| c.0).collect();
    let refs: Vec<&str> = cases.iter().map(|c| c.1).collect();
    assert!((bleu(&hyps, &refs).unwrap() - hand_corpus_bleu()).abs() < 1e-6);
}

#[test]
fn bleu_agrees_with_the_oracle_on_toy_sentences() {
    let recs = paradiff::corpus::make_toy_corpus(2, 60, paradiff::corpus::Family::A);
    let pairs: Vec<(&str, &str)> = recs.iter().map(|r| (r.source.as_str(), r.target.as_str())).collect();
    let hyps: Vec<&str> = pairs.iter().map(|p| p.0).collect();
    let refs: Vec<&str> = pairs.iter().map(|p| p.1).collect();
    assert!((bleu(&hyps, &refs).unwrap() - oracle_bleu(&pairs)).abs() < 1e-9);
}

#[test]
fn distinct_matches_hand_counts() {
    // 5 x "a b c d e f g h": 25 four-grams, 5 unique.
    assert!((distinct_n(&[vec!["a b c d e f g h"; 5]], 4) - 20.0).abs() < 1e-12);
    // abcd, bcde | abcd, bcdf: 3 unique of 4; the 3-token sentence is skipped.
    let g = vec![vec!["a b c d e", "a b c d f", "a b c"]];
    assert!((distinct_n(&g, 4) - 75.0).abs() < 1e-12);
    let both = vec![vec!["a b c d e f g h"; 5], vec!["a b c d e", "a b c d f"]];
    assert!((distinct_n(&both, 4) - 47.5).abs() < 1e-12);
}

#[test]
fn without_position_bias_rows_permute_with_the_input() {
    let mut rng = seeded(4);
    let mk = |rel_bias| DenoiserModel::init(DenoiserConfig { rel_bias, ..gradcheck_config() }, &mut seeded(5)).unwrap();
    let z = randn(&mut rng, 6, 8);
    let c = randn(&mut rng, 6, 8);
    let perm = [3usize, 0, 5, 1, 4, 2];
    let permute = |m: &paradiff::tensor::Mat| {
        let mut out = m.clone();
        for (i, &p) in perm.iter().enumerate() {
            out.row_mut(i).assign(&m.row(p));
        }
        out
    };
    let plain = mk(false);
    let a = permute(&plain.denoise(&z, Some(&c), 9).unwrap());
    let b = plain.denoise(&permute(&z), Some(&c), 9).unwrap();
    assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-10));
    let biased = mk(true);
    let a = permute(&biased.denoise(&z, Some(&c), 9).unwrap());
    let b = biased.denoise(&permute(&z), Some(&c), 9).unwrap();
    assert!(a.iter().zip(b.iter()).any(|(x, y)| (x - y).abs() > 1e-6));
}

use super::*;
use crate::seed::substream;
use crate::tensor::{max_fd_error, OptimizerConfig};
use crate::textproc::{PAD, UNK};
use rand::Rng;

fn tiny_vocab() -> Vocabulary {
    Vocabulary::from_words(["x".to_string(), "y".to_string()]).unwrap()
}

fn tiny_config(max_len: usize) -> CaptionerConfig {
    CaptionerConfig {
        d_img: 3,
        d_model: 4,
        n_heads: 2,
        n_enc: 1,
        n_dec: 1,
        d_ff: 8,
        max_len,
    }
}

/// Random tiny model whose weights are inflated so its distributions are
/// far from uniform.
fn tiny(seed: u64, max_len: usize, gain: f64) -> Captioner {
    let mut m = Captioner::new(tiny_config(max_len), tiny_vocab(), &mut substream(seed, "tiny")).unwrap();
    let mut rng = substream(seed, "tiny-bias");
    for w in m.params.values_mut() {
        w.mapv_inplace(|v| v * gain + 0.1 * (rng.random::<f64>() - 0.5));
    }
    m
}

fn image(seed: u64, d: usize) -> ImageRecord {
    let mut rng = substream(seed, "image");
    ImageRecord {
        image_id: seed,
        features: (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
    }
}

fn d16() -> Captioner {
    let vocab = Vocabulary::from_words("a red blue cube sphere on grass".split(' ').map(String::from)).unwrap();
    let cfg = CaptionerConfig {
        d_img: 5,
        d_model: 16,
        n_heads: 2,
        n_enc: 2,
        n_dec: 2,
        d_ff: 32,
        max_len: 8,
    };
    Captioner::new(cfg, vocab, &mut substream(9, "d16")).unwrap()
}

#[test]
fn tiny_model_is_small() {
    assert!(tiny(1, 5, 1.0).params.num_scalars() <= 1000);
}

#[test]
fn config_validation() {
    let mut c = tiny_config(5);
    c.max_len = 1;
    assert!(c.validate().is_err());
    let mut c = tiny_config(5);
    c.n_heads = 3;
    assert!(c.validate().is_err());
    let mut c = tiny_config(5);
    c.n_dec = 0;
    assert!(c.validate().is_err());
    let p = CaptionerConfig::full_shape(64);
    assert_eq!((p.n_enc, p.n_dec), (6, 6));
    assert!(p.validate().is_ok());
}

#[test]
fn rows_are_distributions() {
    let m = tiny(2, 5, 2.0);
    let img = image(1, 3);
    let lp = m.logits(&img, &[BOS, 4, 5, EOS]).unwrap();
    for row in lp.rows() {
        let s: f64 = row.iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&v| v <= 0.0));
    }
}

#[test]
fn later_tokens_never_change_earlier_rows() {
    let m = d16();
    let img = image(2, 5);
    let base = [BOS, 4, 5, 6, 7, 8];
    let ref_lp = m.logits(&img, &base).unwrap();
    for t in 1..base.len() {
        for alt in [UNK, 9, 10] {
            let mut changed = base;
            changed[t] = alt;
            let lp = m.logits(&img, &changed).unwrap();
            for r in 0..t {
                assert_eq!(lp.row(r), ref_lp.row(r), "row {r} moved when position {t} changed");
            }
        }
    }
}

#[test]
fn incremental_decoding_matches_full_forward() {
    let m = d16();
    let img = image(3, 5);
    let prefix = [BOS, 4, 9, 9, 5, 7];
    let full = m.logits(&img, &prefix).unwrap();
    let inc = m.incremental_logits(&img, &prefix).unwrap();
    let diff = (&full - &inc).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    assert!(diff < 1e-10, "max difference {diff}");
}

#[test]
fn prefix_contract() {
    let m = tiny(3, 4, 1.0);
    let img = image(1, 3);
    assert!(matches!(m.logits(&img, &[4, 5]), Err(Error::PrefixMissingBos)));
    assert!(matches!(
        m.logits(&img, &[BOS, 4, 4, 4, 4]),
        Err(Error::PrefixTooLong { len: 5, max: 4 })
    ));
    assert!(m.logits(&img, &[BOS, 4, 4, 4]).is_ok());
    let bad = ImageRecord {
        image_id: 0,
        features: vec![0.0; 2],
    };
    assert!(matches!(m.logits(&bad, &[BOS]), Err(Error::DimensionMismatch { .. })));
}

#[test]
fn mle_gradients_match_finite_differences_tiny() {
    let m = tiny(4, 5, 1.5);
    let img = image(4, 3);
    let cap = Caption::new("x y x").unwrap();
    let (_, grads) = m.mle_loss_and_grads(&img, &cap).unwrap();
    let err = max_fd_error(m.params.values(), &grads, |vals| {
        let mut c = m.clone();
        c.params.values_mut().clone_from_slice(vals);
        c.mle_loss(&img, &cap).unwrap()
    });
    assert!(err < 1e-6, "max relative error {err}");
}

#[test]
fn mle_gradients_match_finite_differences_d16() {
    let m = d16();
    let img = image(5, 5);
    let cap = Caption::new("a red cube on grass").unwrap();
    let (_, grads) = m.mle_loss_and_grads(&img, &cap).unwrap();
    let err = max_fd_error(m.params.values(), &grads, |vals| {
        let mut c = m.clone();
        c.params.values_mut().clone_from_slice(vals);
        c.mle_loss(&img, &cap).unwrap()
    });
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn uniform_output_gives_log_vocab() {
    let mut m = d16();
    let w = m.layout.out_w;
    let b = m.layout.out_b;
    m.params.values_mut()[w].fill(0.0);
    m.params.values_mut()[b].fill(0.0);
    let l = m.mle_loss(&image(1, 5), &Caption::new("a blue sphere").unwrap()).unwrap();
    assert!((l - (m.vocab_size() as f64).ln()).abs() < 1e-12);
}

#[test]
fn mle_loss_is_pure_and_bounded() {
    let m = d16();
    let img = image(6, 5);
    let c = Caption::new("a red sphere").unwrap();
    let a = m.mle_loss(&img, &c).unwrap();
    assert_eq!(a, m.mle_loss(&img, &c).unwrap());
    assert!(a >= 0.0);
    let long = Caption::new("a a a a a a a a").unwrap();
    assert!(matches!(m.mle_loss(&img, &long), Err(Error::CaptionTooLong { .. })));
    let fits = Caption::new("a a a a a a a").unwrap();
    assert!(m.mle_loss(&img, &fits).is_ok());
}

#[test]
fn mle_overfits_a_small_corpus() {
    let m0 = d16();
    let texts = [
        "a red cube",
        "a blue sphere",
        "a red sphere on grass",
        "a blue cube",
        "red cube on grass",
        "a sphere",
        "blue blue cube",
        "a cube on grass",
        "sphere on grass",
        "a red blue cube",
    ];
    let images: Vec<ImageRecord> = (0..10).map(|i| image(100 + i, 5)).collect();
    let caps: Vec<Caption> = texts.iter().map(|t| Caption::new(t).unwrap()).collect();
    let batch: Vec<MleExample> = images
        .iter()
        .zip(&caps)
        .map(|(image, caption)| MleExample { image, caption })
        .collect();
    let mut m = m0.clone();
    let mut opt = OptimizerConfig::Sgd { lr: 0.5 }.build();
    let trainable = vec![true; m.params.len()];
    let (initial, _) = m.mle_batch(&batch).unwrap();
    for _ in 0..200 {
        let (_, g) = m.mle_batch(&batch).unwrap();
        opt.step(m.params.values_mut(), &g, &trainable);
    }
    let (last, _) = m.mle_batch(&batch).unwrap();
    assert!(last < initial / 2.0, "initial {initial} final {last}");
}

#[test]
fn forced_eos_gives_empty_caption() {
    let mut m = tiny(5, 5, 1.0);
    let b = m.layout.out_b;
    m.params.values_mut()[b][[0, EOS]] = 1e6;
    let r = m.greedy_decode(&image(1, 3)).unwrap();
    assert_eq!(r.tokens, vec![EOS]);
    assert_eq!(r.total_logprob, 0.0);
    assert!(r.caption(&m).is_none());
    let r = m.beam_search(&image(1, 3), 5).unwrap();
    assert_eq!(r.tokens, vec![EOS]);
}

#[test]
fn pad_and_bos_are_never_emitted() {
    let mut m = tiny(6, 5, 1.0);
    let b = m.layout.out_b;
    m.params.values_mut()[b][[0, PAD]] = 50.0;
    m.params.values_mut()[b][[0, BOS]] = 40.0;
    for seed in 0..5 {
        let img = image(seed, 3);
        let g = m.greedy_decode(&img).unwrap();
        let bm = m.beam_search(&img, 3).unwrap();
        let s = m.sample_decode(&img, &mut substream(seed, "s")).unwrap();
        for r in [g, bm, s] {
            assert!(r.tokens.iter().all(|&t| t != PAD && t != BOS));
            assert!(r.tokens.len() <= 5);
        }
    }
}

#[test]
fn decode_results_are_consistent() {
    for seed in 0..20 {
        let m = tiny(seed, 5, 3.0);
        let img = image(seed, 3);
        let g = m.greedy_decode(&img).unwrap();
        assert_eq!(g, m.greedy_decode(&img).unwrap());
        for r in [g, m.beam_search(&img, 4).unwrap()] {
            assert_eq!(r.total_logprob, r.token_logprobs.iter().sum::<f64>());
            assert!(r.token_logprobs.iter().all(|&v| v <= 0.0));
            let rescored = m.score_tokens(&img, &r.tokens).unwrap();
            assert!((rescored - r.total_logprob).abs() < 1e-9);
        }
    }
}

#[test]
fn beam_of_one_is_greedy() {
    for seed in 0..40 {
        let m = tiny(seed, 5, 3.0);
        let img = image(seed + 50, 3);
        let g = m.greedy_decode(&img).unwrap();
        let b = m.beam_search(&img, 1).unwrap();
        assert_eq!(g.tokens, b.tokens);
        assert_eq!(g.token_logprobs, b.token_logprobs);
        assert_eq!(g.total_logprob, b.total_logprob);
    }
}

/// Every sequence the decoder could output: `k` emittable non-EOS tokens
/// followed by EOS for `k < max_len`, plus all EOS-free sequences of
/// length `max_len`.
fn all_sequences(v: usize, max_len: usize) -> Vec<Vec<usize>> {
    let words: Vec<usize> = (0..v).filter(|&t| t != PAD && t != BOS && t != EOS).collect();
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
    for len in 0..=max_len {
        for s in &frontier {
            if len < max_len {
                let mut e = s.clone();
                e.push(EOS);
                out.push(e);
            } else {
                out.push(s.clone());
            }
        }
        if len < max_len {
            frontier = frontier
                .iter()
                .flat_map(|s| {
                    words.iter().map(move |&w| {
                        let mut e = s.clone();
                        e.push(w);
                        e
                    })
                })
                .collect();
        }
    }
    out
}

#[test]
fn sequence_enumeration_counts() {
    // 3 word choices (UNK and two words): 1 + 3 + 9 finished by EOS, 27 truncated.
    assert_eq!(all_sequences(6, 3).len(), 13 + 27);
}

#[test]
fn exhaustive_beam_finds_global_optimum() {
    for max_len in 2..=5usize {
        for seed in 0..6 {
            let m = tiny(seed * 7 + max_len as u64, max_len, 3.0);
            let img = image(seed, 3);
            let v = m.vocab_size();
            let (mut best, mut best_score) = (Vec::new(), f64::NEG_INFINITY);
            for s in all_sequences(v, max_len) {
                let sc = m.score_tokens(&img, &s).unwrap();
                if sc > best_score {
                    best_score = sc;
                    best = s;
                }
            }
            let beam = m.beam_search(&img, v.pow(max_len as u32)).unwrap();
            assert_eq!(beam.tokens, best, "max_len {max_len} seed {seed}");
            assert!((beam.total_logprob - best_score).abs() < 1e-9);
            let five = m.beam_search(&img, 5).unwrap();
            let greedy = m.greedy_decode(&img).unwrap();
            assert!(five.total_logprob >= greedy.total_logprob);
        }
    }
}

#[test]
fn greedy_usually_beats_samples_on_a_peaked_model() {
    let m = tiny(11, 5, 4.0);
    let img = image(11, 3);
    let g = m.greedy_decode(&img).unwrap();
    let mut rng = substream(12, "samples");
    let mut wins = 0;
    for _ in 0..100 {
        // Uniformly random sequence with the same length and ending as greedy.
        let mut seq: Vec<usize> = (0..g.tokens.len()).map(|_| [UNK, 4, 5][rng.random_range(0..3)]).collect();
        if g.ended_with_eos() {
            *seq.last_mut().unwrap() = EOS;
        }
        if g.total_logprob >= m.score_tokens(&img, &seq).unwrap() {
            wins += 1;
        }
    }
    assert!(wins > 50, "greedy won {wins} of 100");
}

#[test]
fn checkpoint_round_trip() {
    let m = d16();
    let back = Captioner::from_checkpoint(&Checkpoint::from_bytes(&m.to_checkpoint().unwrap().to_bytes()).unwrap()).unwrap();
    assert_eq!(back, m);
}

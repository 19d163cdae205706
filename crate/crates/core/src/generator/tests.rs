use super::*;
use crate::nn::gradcheck::check_gradients;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const S: usize = 7;
const LC: usize = 2;
const CD: usize = 3;

fn tiny_config() -> T2MConfig {
    T2MConfig { layers: 2, heads: 2, hidden: 16, ffn_mult: 2, max_len: 12, batch_size: 3, iterations: 0, ..Default::default() }
}

fn tiny(dtype: DType) -> T2MModel {
    T2MModel::init_with_dtype(&tiny_config(), S, LC, CD, dtype).unwrap()
}

fn cond(seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..LC * CD).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn seq(tokens: Vec<u32>) -> TokenSequence {
    TokenSequence { tokens, codebook_size: S }
}

#[test]
fn schedule_examples() {
    assert_eq!(mask_ratio(0.0).unwrap(), 1.0);
    assert_eq!(mask_ratio(1.0).unwrap(), 0.0);
    assert!((mask_ratio(0.5).unwrap() - 0.70711).abs() < 1e-5);
    assert!(mask_ratio(1.5).is_err() && mask_ratio(-0.1).is_err());
    assert_eq!(mask_count(10, 0.0).unwrap(), 10);
    assert_eq!(mask_count(10, 1.0).unwrap(), 0);
    assert_eq!(mask_count(7, 2.0 / 3.0).unwrap(), 4);
    let counts: Vec<usize> = (1..=4).map(|k| mask_count(16, k as f64 / 4.0).unwrap()).collect();
    assert_eq!(counts, vec![15, 12, 7, 0]);
}

#[test]
fn corrupt_selects_ceiling_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let input = seq(vec![1, 2, 3, 4, 5, 6, 0, 1, 2, 3]);
    let (out, pos) = corrupt(&input, 0.0, &CorruptionPolicy::default(), &mut rng).unwrap();
    assert_eq!(pos, (0..10).collect::<Vec<_>>());
    assert_eq!(out.len(), 10);
    let (out, pos) = corrupt(&input, 1.0, &CorruptionPolicy::default(), &mut rng).unwrap();
    assert!(pos.is_empty());
    assert_eq!(out, input);
    let (_, pos) = corrupt(&seq(vec![0; 7]), 2.0 / 3.0, &CorruptionPolicy::default(), &mut rng).unwrap();
    assert_eq!(pos.len(), 4);
    assert!(corrupt(&seq(vec![0, S as u32]), 0.0, &CorruptionPolicy::default(), &mut rng).is_err());
}

#[test]
fn corruption_frequencies() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = seq(vec![3; 10]);
    let mut counts = [0usize; 3];
    let mut total = 0usize;
    while total < 100_000 {
        let (out, pos, kinds) = corrupt_traced(&input, 0.0, &CorruptionPolicy::default(), &mut rng).unwrap();
        for (p, k) in pos.into_iter().zip(kinds) {
            total += 1;
            match k {
                Remask::Mask => {
                    assert_eq!(out.tokens[p], S as u32);
                    counts[0] += 1
                }
                Remask::Random => {
                    assert!((out.tokens[p] as usize) < S);
                    counts[1] += 1
                }
                Remask::Keep => {
                    assert_eq!(out.tokens[p], 3);
                    counts[2] += 1
                }
            }
        }
    }
    for (c, expect) in counts.iter().zip([0.8, 0.1, 0.1]) {
        let f = *c as f64 / total as f64;
        assert!((f - expect).abs() < 0.01, "{f} vs {expect}");
    }
}

#[test]
fn cfg_mix_examples() {
    let dev = candle_core::Device::Cpu;
    let c = Tensor::new(&[2.0f64, -1.0, 0.5], &dev).unwrap();
    let u = Tensor::new(&[1.0f64, 3.0, 0.5], &dev).unwrap();
    assert_eq!(nn::to_vec_f64(&cfg_mix(&c, &u, 0.0).unwrap()).unwrap(), vec![2.0, -1.0, 0.5]);
    assert_eq!(nn::to_vec_f64(&cfg_mix(&c, &u, 4.0).unwrap()).unwrap()[0], 6.0);
    assert_eq!(nn::to_vec_f64(&cfg_mix(&c, &c, 3.7).unwrap()).unwrap(), vec![2.0, -1.0, 0.5]);
    // affine in α: three points are collinear
    let at = |a: f64| nn::to_vec_f64(&cfg_mix(&c, &u, a).unwrap()).unwrap();
    let (a0, a1, a2) = (at(0.5), at(1.5), at(3.0));
    for i in 0..3 {
        let slope1 = (a1[i] - a0[i]) / 1.0;
        let slope2 = (a2[i] - a1[i]) / 1.5;
        assert!((slope1 - slope2).abs() < 1e-12);
    }
    assert!(cfg_mix(&c, &Tensor::new(&[1.0f64], &dev).unwrap(), 1.0).is_err());
}

#[test]
fn masked_nll_examples() {
    let dev = candle_core::Device::Cpu;
    let uniform = Tensor::zeros((1, 2, 128), DType::F64, &dev).unwrap();
    let v = nn::scalar(&masked_nll(&uniform, &[3, 4], &[0, 1]).unwrap()).unwrap();
    assert!((v - 128f64.ln()).abs() < 1e-12);
    assert!((v - 4.852).abs() < 1e-3);
    let mut onehot = vec![-1e4f64; 2 * S];
    onehot[2] = 1e4;
    let t = Tensor::from_vec(onehot.clone(), (2, S), &dev).unwrap();
    assert!(nn::scalar(&masked_nll(&t, &[2, 5], &[0]).unwrap()).unwrap().abs() < 1e-12);
    // unmasked logits do not matter
    onehot[S + 3] = 50.0;
    let t2 = Tensor::from_vec(onehot, (2, S), &dev).unwrap();
    assert_eq!(
        nn::scalar(&masked_nll(&t, &[2, 5], &[0]).unwrap()).unwrap(),
        nn::scalar(&masked_nll(&t2, &[2, 5], &[0]).unwrap()).unwrap()
    );
    assert!(masked_nll(&t, &[2, 5], &[]).is_err());
}

#[test]
fn forward_is_deterministic_and_null_condition_works() {
    let m = tiny(DType::F64);
    let toks = vec![vec![1u32, 2, S as u32, 4]];
    let c = cond(0);
    let a = nn::to_vec_f64(&m.forward(&toks, &[Some(&c)], AttentionMode::Causal).unwrap()).unwrap();
    assert_eq!(a.len(), 4 * S);
    assert_eq!(a, nn::to_vec_f64(&m.forward(&toks, &[Some(&c)], AttentionMode::Causal).unwrap()).unwrap());
    let u1 = nn::to_vec_f64(&m.forward(&toks, &[None], AttentionMode::Causal).unwrap()).unwrap();
    let u2 = nn::to_vec_f64(&m.forward(&toks, &[None], AttentionMode::Causal).unwrap()).unwrap();
    assert_eq!(u1, u2);
    assert_ne!(a, u1);
    assert!(m.forward(&[vec![0; 13]], &[None], AttentionMode::Causal).is_err());
    assert!(m.forward(&[vec![S as u32 + 1]], &[None], AttentionMode::Causal).is_err());
}

#[test]
fn causal_prefix_independence_on_random_instances() {
    let m = tiny(DType::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..50 {
        let n = rng.gen_range(2..=10);
        let a: Vec<u32> = (0..n).map(|_| rng.gen_range(0..=S as u32)).collect();
        let j = rng.gen_range(1..n);
        let mut b = a.clone();
        for t in b.iter_mut().skip(j) {
            *t = rng.gen_range(0..=S as u32);
        }
        let c = cond(trial);
        let la = nn::to_vec_f64(&m.forward(&[a], &[Some(&c)], AttentionMode::Causal).unwrap()).unwrap();
        let lb = nn::to_vec_f64(&m.forward(&[b], &[Some(&c)], AttentionMode::Causal).unwrap()).unwrap();
        for k in 0..j * S {
            assert!((la[k] - lb[k]).abs() <= 1e-5, "trial {trial}");
        }
    }
}

#[test]
fn bidirectional_mode_sees_the_future() {
    let m = tiny(DType::F64);
    let c = cond(1);
    let la = nn::to_vec_f64(&m.forward(&[vec![1, 2, 3]], &[Some(&c)], AttentionMode::Bidirectional).unwrap()).unwrap();
    let lb = nn::to_vec_f64(&m.forward(&[vec![1, 2, 5]], &[Some(&c)], AttentionMode::Bidirectional).unwrap()).unwrap();
    assert_ne!(la[..S], lb[..S]);
}

#[test]
fn masked_nll_gradients_match_finite_differences() {
    let m = tiny(DType::F64);
    let clean = vec![vec![1u32, 2, 3, 4], vec![5, 6, 0, 1]];
    let corrupted = vec![vec![1u32, S as u32, 3, S as u32], vec![S as u32, 6, 2, 1]];
    let selected = vec![vec![1, 3], vec![0, 2]];
    let (c0, c1) = (cond(2), cond(3));
    let mut f = || m.loss_for(&clean, &corrupted, &selected, &[Some(&c0), None]);
    let r = check_gradients(m.store(), |_| true, 2, 1e-5, &mut f).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
    let mut g = || m.loss_for(&clean, &corrupted, &selected, &[Some(&c1), Some(&c0)]);
    let r = check_gradients(m.store(), |n| n.starts_with("cond."), 3, 1e-5, &mut g).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn decoding_fills_every_position_for_any_k() {
    let m = tiny(DType::F32);
    let c = cond(4);
    for k in 1..=10 {
        let cfg = GenerationConfig { iterations: k, length: 9, seed: k as u64, ..Default::default() };
        let (out, trace) = m.iterative_decode_traced(&c, &cfg).unwrap();
        assert_eq!(out.mask_count(), 0);
        assert_eq!(out.len(), 9);
        assert!(out.tokens.iter().all(|&t| (t as usize) < S));
        assert_eq!(trace.len(), k);
        for w in trace.windows(2) {
            assert!(w[0].fixed.iter().all(|p| w[1].fixed.contains(p)), "fixed set shrank");
        }
        for (i, step) in trace.iter().enumerate() {
            assert_eq!(step.remasked.len(), mask_count(9, (i + 1) as f64 / k as f64).unwrap());
        }
    }
    let one = GenerationConfig { iterations: 1, length: 6, ..Default::default() };
    let (_, trace) = m.iterative_decode_traced(&c, &one).unwrap();
    assert_eq!(trace[0].fixed.len(), 6);
}

#[test]
fn remask_counts_for_n16_k4() {
    let m = T2MModel::init(&T2MConfig { max_len: 16, ..tiny_config() }, S, LC, CD).unwrap();
    let cfg = GenerationConfig { iterations: 4, length: 16, ..Default::default() };
    let (_, trace) = m.iterative_decode_traced(&cond(0), &cfg).unwrap();
    let counts: Vec<usize> = trace.iter().map(|s| s.remasked.len()).collect();
    assert_eq!(counts, vec![15, 12, 7, 0]);
}

#[test]
fn decoding_is_seeded() {
    let m = tiny(DType::F32);
    let c = cond(6);
    let cfg = GenerationConfig { length: 10, ..Default::default() };
    let a = m.iterative_decode(&c, &cfg).unwrap();
    assert_eq!(a, m.iterative_decode(&c, &cfg).unwrap());
    let others: Vec<TokenSequence> =
        (1..4).map(|s| m.iterative_decode(&c, &GenerationConfig { seed: s, ..cfg.clone() }).unwrap()).collect();
    assert!(others.iter().any(|o| *o != a));
    let greedy = GenerationConfig { greedy: true, ..cfg };
    assert_eq!(
        m.iterative_decode(&c, &greedy).unwrap(),
        m.iterative_decode(&c, &GenerationConfig { seed: 9, ..greedy.clone() }).unwrap()
    );
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let m = tiny(DType::F32);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t2m.ckpt");
    m.save(&p).unwrap();
    let back = T2MModel::load(&p).unwrap();
    let cfg = GenerationConfig { length: 8, ..Default::default() };
    assert_eq!(m.iterative_decode(&cond(1), &cfg).unwrap(), back.iterative_decode(&cond(1), &cfg).unwrap());
    assert_eq!(m.to_checkpoint().unwrap().to_bytes().unwrap(), back.to_checkpoint().unwrap().to_bytes().unwrap());
}

#[test]
fn causal_attention_is_full_rank() {
    let r = attention_rank_check(32, 4, AttentionMode::Causal, 100, 0).unwrap();
    assert!(r.causal_invariants_hold, "{r:?}");
    assert!(r.ranks.iter().all(|&k| k == 32));
    assert!(r.min_diagonal > 0.0);
    let b = attention_rank_check(32, 4, AttentionMode::Bidirectional, 20, 0).unwrap();
    assert_eq!(b.ranks.len(), 20);
    assert!(attention_rank_check(4, 4, AttentionMode::Causal, 1, 0).is_err());
}

#[test]
fn invalid_configs_rejected() {
    assert!(T2MConfig { hidden: 10, heads: 4, ..Default::default() }.validate().is_err());
    let bad = CorruptionPolicy { p_mask: 0.5, p_random: 0.1, p_keep: 0.1 };
    assert!(bad.validate().is_err());
    assert!(GenerationConfig { iterations: 0, ..Default::default() }.validate().is_err());
    assert!(GenerationConfig { alpha: -1.0, ..Default::default() }.validate().is_err());
}

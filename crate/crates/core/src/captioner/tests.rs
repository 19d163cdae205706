use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const L: usize = 3;
const P: usize = 4;

fn tiny_config() -> CaptionerConfig {
    CaptionerConfig {
        layers: 2,
        heads: 2,
        hidden: 16,
        ffn_mult: 2,
        max_caption_len: 6,
        batch_size: 8,
        iterations: 0,
        optim: OptimConfig { lr: 3e-3, warmup: 10, ..Default::default() },
        ..Default::default()
    }
}

fn captions() -> Vec<String> {
    vec!["a person walks fast".into(), "a person jumps".into(), "someone spins slowly twice".into()]
}

fn vocab() -> Vocabulary {
    let caps = captions();
    Vocabulary::build(caps.iter().map(String::as_str).chain([DEFAULT_PROMPT]))
}

fn features(seed_value: u64) -> AlignedMotion {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_value);
    AlignedMotion { rows: L, dim: P, values: (0..L * P).map(|_| rng.gen_range(-1.0..1.0)).collect() }
}

fn tiny(rank: usize) -> CaptionerModel {
    CaptionerModel::init(&CaptionerConfig { adapter_rank: rank, ..tiny_config() }, vocab(), L, P).unwrap()
}

#[test]
fn projection_shape_and_zero_input() {
    let m = tiny(0);
    let zero = AlignedMotion { rows: L, dim: P, values: vec![0.0; L * P] };
    let out = m.project_features(&[&zero]).unwrap();
    assert_eq!(out.dims(), &[1, L, 16]);
    let bias = nn::to_vec_f32(m.net.proj.bias().unwrap()).unwrap();
    let rows = nn::to_vec_f32(&out).unwrap();
    for r in rows.chunks(16) {
        assert_eq!(r, bias.as_slice());
    }
    let wrong = AlignedMotion { rows: L + 1, dim: P, values: vec![0.0; (L + 1) * P] };
    assert!(m.project_features(&[&wrong]).is_err());
}

#[test]
fn projection_is_affine() {
    let m = CaptionerModel::init_with_dtype(&tiny_config(), vocab(), L, P, DType::F64).unwrap();
    let (x, y) = (features(1), features(2));
    let (a, b) = (0.7f32, -1.3f32);
    let mix = AlignedMotion { rows: L, dim: P, values: x.values.iter().zip(&y.values).map(|(p, q)| a * p + b * q).collect() };
    let zero = AlignedMotion { rows: L, dim: P, values: vec![0.0; L * P] };
    let get = |f: &AlignedMotion| nn::to_vec_f64(&m.project_features(&[f]).unwrap()).unwrap();
    let (px, py, pm, p0) = (get(&x), get(&y), get(&mix), get(&zero));
    for i in 0..pm.len() {
        let expect = a as f64 * (px[i] - p0[i]) + b as f64 * (py[i] - p0[i]) + p0[i];
        assert!((pm[i] - expect).abs() < 1e-6, "{} vs {expect}", pm[i]);
    }
}

#[test]
fn greedy_captions_are_deterministic_and_bounded() {
    let m = tiny(0);
    let f = features(5);
    let a = m.caption_features(&[&f, &f]).unwrap();
    assert_eq!(a[0], a[1]);
    assert_eq!(a, m.caption_features(&[&f, &f]).unwrap());
    assert!(a[0].split_whitespace().count() <= tiny_config().max_caption_len);
}

#[test]
fn zero_iterations_keep_init() {
    let mut m = tiny(0);
    let before = m.to_checkpoint().unwrap().to_bytes().unwrap();
    let report = fit(&mut m, &[features(0)], &[&captions()[..1]]).unwrap();
    assert_eq!(report.curve.len(), 0);
    assert_eq!(m.to_checkpoint().unwrap().to_bytes().unwrap(), before);
}

fn train(rank: usize, iterations: usize) -> (CaptionerModel, M2TTrainReport, Vec<AlignedMotion>) {
    let config = CaptionerConfig { adapter_rank: rank, iterations, ..tiny_config() };
    let mut m = CaptionerModel::init(&config, vocab(), L, P).unwrap();
    let feats: Vec<AlignedMotion> = (0..3).map(features).collect();
    let caps = captions();
    let texts: Vec<&[String]> = (0..3).map(|i| &caps[i..i + 1]).collect();
    let report = fit(&mut m, &feats, &texts).unwrap();
    (m, report, feats)
}

#[test]
fn training_learns_captions() {
    let (m, report, feats) = train(0, 150);
    assert!(report.final_loss < report.initial_loss, "{report:?}");
    let out = m.caption_features(&feats.iter().collect::<Vec<_>>()).unwrap();
    assert_eq!(out, captions());
}

#[test]
fn adapter_training_freezes_base_weights() {
    let before = tiny(2).store().snapshot().unwrap();
    let (m, report, _) = train(2, 20);
    assert!(report.final_loss < report.initial_loss);
    let after = m.store().snapshot().unwrap();
    let mut changed = Vec::new();
    for (name, t) in &before {
        let same = nn::to_vec_f32(t).unwrap() == nn::to_vec_f32(&after[name]).unwrap();
        if m.is_trainable(name) {
            if !same {
                changed.push(name.clone());
            }
        } else {
            assert!(same, "{name} moved");
        }
    }
    assert!(changed.iter().any(|n| n.contains("adapter_b")));
    assert!(changed.iter().any(|n| n.starts_with("proj.")));
}

#[test]
fn checkpoint_round_trip() {
    let (m, _, feats) = train(0, 5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m2t.ckpt");
    m.save(&path).unwrap();
    let back = CaptionerModel::load(&path).unwrap();
    assert_eq!(back.config(), m.config());
    assert_eq!(back.caption_features(&[&feats[0]]).unwrap(), m.caption_features(&[&feats[0]]).unwrap());
    let bytes = std::fs::read(&path).unwrap();
    back.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}

#[test]
fn invalid_configs_rejected() {
    for bad in [
        CaptionerConfig { heads: 3, ..tiny_config() },
        CaptionerConfig { max_caption_len: 0, ..tiny_config() },
        CaptionerConfig { prompt: " ".into(), ..tiny_config() },
    ] {
        assert!(CaptionerModel::init(&bad, vocab(), L, P).is_err());
    }
}

#[test]
fn attribute_fidelity_counts_full_matches() {
    use crate::corpus::{synth_generate, SynthConfig};
    let ds = synth_generate(&SynthConfig { num_samples: 4, ..Default::default() }).unwrap();
    let perfect: Vec<String> = ds.records().iter().map(|r| r.attributes.as_ref().unwrap().render(0)).collect();
    assert_eq!(attribute_fidelity(&ds, &perfect).unwrap(), 1.0);
    let mut partial = perfect.clone();
    partial[0] = "nothing useful".into();
    assert_eq!(attribute_fidelity(&ds, &partial).unwrap(), 0.75);
    assert!(attribute_fidelity(&ds, &perfect[..2]).is_err());
}

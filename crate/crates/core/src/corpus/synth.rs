//! Parametric motion-text corpus.
//!
//! Each sample draws an attribute tuple (action, speed, direction, repetitions). Its motion is
//! a closed-form trajectory of that tuple plus seeded Gaussian noise, and its texts are
//! templated sentences naming every attribute word.
//!
//! Channel layout for `dim` channels:
//! * 0, 1: planar root velocity (direction × speed magnitude);
//! * 2: the oscillator, a square wave with `k` cycles that crosses zero exactly `2k` times;
//! * 3..: joint channels driven by an action-specific loading and two-level waveform, plus a
//!   posture lean set by direction and speed.
//!
//! Motions are piecewise constant over segments of [`SEGMENT_FRAMES`] frames. The oscillator
//! takes the sign of `cos(2πk(j + ½)/n)` on segment `j` of `n`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, MotionSequence, SampleRecord};
use crate::{seed, Error, Result};

pub const OSCILLATOR_CHANNEL: usize = 2;
pub const SEGMENT_FRAMES: usize = 4;

const ACTIONS: [&str; 6] = ["walks", "waves", "kicks", "jumps", "squats", "spins"];
const SPEEDS: [(&str, f32); 3] = [("slowly", 0.35), ("steadily", 0.7), ("quickly", 1.4)];
const DIRECTIONS: [(&str, [f32; 2]); 4] =
    [("left", [-1.0, 0.0]), ("right", [1.0, 0.0]), ("forward", [0.0, 1.0]), ("backward", [0.0, -1.0])];
const REPETITIONS: [(u32, &str); 3] = [(1, "once"), (2, "twice"), (3, "thrice")];

const TEMPLATES: [&str; 4] = [
    "a person {a} {s} {r} heading {d}",
    "someone {a} {r} {s} while moving {d}",
    "the figure moves {d} and {a} {s} {r}",
    "a figure {a} {r} {s} going {d}",
];

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attributes {
    pub action: String,
    pub speed: String,
    pub direction: String,
    pub repetitions: u32,
}

impl Attributes {
    pub fn repetition_word(&self) -> &'static str {
        REPETITIONS.iter().find(|(k, _)| *k == self.repetitions).map(|(_, w)| *w).unwrap_or("once")
    }

    /// Canonical words that every text of this tuple contains.
    pub fn words(&self) -> [String; 4] {
        [
            self.action.clone(),
            self.speed.clone(),
            self.direction.clone(),
            self.repetition_word().to_string(),
        ]
    }

    pub fn key(&self) -> String {
        format!("{}|{}|{}|{}", self.action, self.speed, self.direction, self.repetitions)
    }

    pub fn render(&self, template: usize) -> String {
        TEMPLATES[template % TEMPLATES.len()]
            .replace("{a}", &self.action)
            .replace("{s}", &self.speed)
            .replace("{d}", &self.direction)
            .replace("{r}", self.repetition_word())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_samples: usize,
    /// The last `num_test` samples are tagged with split `"test"`.
    pub num_test: usize,
    pub dim: usize,
    pub length_range: (usize, usize),
    pub noise_std: f32,
    pub actions: Vec<String>,
    pub speeds: Vec<String>,
    pub directions: Vec<String>,
    pub repetitions: Vec<u32>,
    pub max_texts: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_samples: 256,
            num_test: 0,
            dim: 16,
            length_range: (64, 64),
            noise_std: 0.02,
            actions: ACTIONS.iter().map(|s| s.to_string()).collect(),
            speeds: SPEEDS.iter().map(|s| s.0.to_string()).collect(),
            directions: DIRECTIONS.iter().map(|s| s.0.to_string()).collect(),
            repetitions: REPETITIONS.iter().map(|r| r.0).collect(),
            max_texts: 3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.length_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("length_range ({lo}, {hi}) must satisfy 0 < min <= max")));
        }
        if self.dim < 4 {
            return Err(Error::Config(format!("dim {} too small, need >= 4", self.dim)));
        }
        if self.num_test > self.num_samples {
            return Err(Error::Config("num_test exceeds num_samples".into()));
        }
        if self.max_texts == 0 {
            return Err(Error::Config("max_texts must be >= 1".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise_std must be finite and >= 0".into()));
        }
        check_factor("actions", &self.actions, |a| ACTIONS.contains(&a))?;
        check_factor("speeds", &self.speeds, |s| SPEEDS.iter().any(|x| x.0 == s))?;
        check_factor("directions", &self.directions, |d| DIRECTIONS.iter().any(|x| x.0 == d))?;
        if self.repetitions.is_empty() {
            return Err(Error::Config("factor set `repetitions` is empty".into()));
        }
        for r in &self.repetitions {
            if !REPETITIONS.iter().any(|x| x.0 == *r) {
                return Err(Error::Config(format!("unsupported repetition count {r}")));
            }
        }
        if let Some(r) = self.repetitions.iter().max() {
            if lo.div_ceil(SEGMENT_FRAMES) <= 2 * *r as usize {
                return Err(Error::Config(format!("{lo} frames cannot hold {r} repetitions")));
            }
        }
        Ok(())
    }
}

fn check_factor(name: &str, values: &[String], known: impl Fn(&str) -> bool) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Config(format!("factor set `{name}` is empty")));
    }
    for v in values {
        if !known(v) {
            return Err(Error::Config(format!("unknown {name} value `{v}`")));
        }
    }
    Ok(())
}

/// Sign of `cos(2πk(j + ½)/segments)`, evaluated exactly in rationals so that the
/// zero-phase points count as positive.
fn segment_level(k: usize, j: usize, segments: usize) -> f32 {
    let den = 2 * segments;
    let num = (k * (2 * j + 1)) % den;
    if 4 * num <= den || 4 * num >= 3 * den { 1.0 } else { -1.0 }
}

/// Noise-free trajectory of an attribute tuple.
pub fn clean_trajectory(attrs: &Attributes, frames: usize, dim: usize) -> Result<MotionSequence> {
    let action = ACTIONS
        .iter()
        .position(|a| *a == attrs.action)
        .ok_or_else(|| Error::Invalid(format!("unknown action `{}`", attrs.action)))?;
    let speed = SPEEDS
        .iter()
        .find(|s| s.0 == attrs.speed)
        .ok_or_else(|| Error::Invalid(format!("unknown speed `{}`", attrs.speed)))?
        .1;
    let dir = DIRECTIONS
        .iter()
        .find(|d| d.0 == attrs.direction)
        .ok_or_else(|| Error::Invalid(format!("unknown direction `{}`", attrs.direction)))?
        .1;
    if dim < 4 || frames == 0 {
        return Err(Error::Invalid(format!("cannot synthesize {frames}x{dim} motion")));
    }
    let k = attrs.repetitions as usize;
    let segments = frames.div_ceil(SEGMENT_FRAMES);
    let joints = dim - 3;
    let loading: Vec<f32> = (0..joints)
        .map(|j| {
            let a = (action + 1) as f32;
            let j = (j + 1) as f32;
            (1.7 * a * j).cos() + 0.5 * (0.9 * a + 2.3 * j).sin()
        })
        .collect();
    // posture leans with the heading, scaled by speed
    let lean: Vec<f32> = (0..joints)
        .map(|j| {
            let j = (j + 1) as f32;
            speed * (dir[0] * (2.1 * j).sin() + dir[1] * (1.3 * j + 0.4).cos())
        })
        .collect();
    let mut data = Vec::with_capacity(frames * dim);
    for t in 0..frames {
        let s = segment_level(k, t / SEGMENT_FRAMES, segments);
        let high = s > 0.0;
        data.push(dir[0] * speed);
        data.push(dir[1] * speed);
        data.push(s);
        for (j, w) in loading.iter().enumerate() {
            let even = j % 2 == 0;
            let v = match action {
                // walking alternates sign between neighbouring joints
                0 => if even { s } else { -s },
                1 => if high { 1.0 } else { -0.3 },
                2 => if high { 1.5 } else { -0.5 },
                3 => if high { 0.6 } else { -0.9 },
                4 => if high { 0.0 } else { -2.0 },
                _ => match (even, high) {
                    (true, _) => s,
                    (false, true) => 0.0,
                    (false, false) => 1.0,
                },
            };
            data.push(w * v + 0.6 * lean[j]);
        }
    }
    MotionSequence::new(frames, dim, data)
}

pub fn synth_generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let mut records = Vec::with_capacity(config.num_samples);
    let mut motions = Vec::with_capacity(config.num_samples);
    let width = config.num_samples.max(1).to_string().len().max(5);
    let noise = Normal::new(0.0f32, config.noise_std.max(f32::MIN_POSITIVE)).expect("valid normal");
    for i in 0..config.num_samples {
        let mut rng = seed::stage_rng(config.seed, &format!("synth/{i}"));
        let attrs = Attributes {
            action: config.actions.choose(&mut rng).expect("non-empty").clone(),
            speed: config.speeds.choose(&mut rng).expect("non-empty").clone(),
            direction: config.directions.choose(&mut rng).expect("non-empty").clone(),
            repetitions: *config.repetitions.choose(&mut rng).expect("non-empty"),
        };
        let frames = rng.gen_range(config.length_range.0..=config.length_range.1);
        let mut motion = clean_trajectory(&attrs, frames, config.dim)?;
        if config.noise_std > 0.0 {
            for v in motion.data_mut() {
                *v += noise.sample(&mut rng);
            }
        }
        let n_texts = rng.gen_range(1..=config.max_texts.min(TEMPLATES.len()));
        let mut templates: Vec<usize> = (0..TEMPLATES.len()).collect();
        templates.shuffle(&mut rng);
        let texts = templates[..n_texts].iter().map(|&t| attrs.render(t)).collect();
        let id = format!("s{i:0width$}");
        let split = (i >= config.num_samples - config.num_test).then(|| "test".to_string());
        records.push(SampleRecord {
            motion_file: format!("motions/{id}.f32"),
            id,
            num_frames: frames,
            texts,
            attributes: Some(attrs),
            split,
        });
        motions.push(motion);
    }
    Dataset::new(config.dim, records, motions)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_crossings(xs: &[f32]) -> usize {
        xs.windows(2).filter(|w| (w[0] > 0.0) != (w[1] > 0.0)).count()
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig { num_samples: 12, seed: 9, ..Default::default() };
        let a = synth_generate(&cfg).unwrap();
        let b = synth_generate(&cfg).unwrap();
        assert_eq!(a.manifest(), b.manifest());
        for (x, y) in a.motions().iter().zip(b.motions()) {
            assert_eq!(x.to_le_bytes(), y.to_le_bytes());
        }
        let c = synth_generate(&SynthConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a.motion(0), c.motion(0));
    }

    #[test]
    fn oscillator_has_k_cycles() {
        for &k in &[1u32, 2, 3] {
            for frames in [28usize, 37, 64, 100] {
                let attrs = Attributes {
                    action: "waves".into(),
                    speed: "quickly".into(),
                    direction: "left".into(),
                    repetitions: k,
                };
                let m = clean_trajectory(&attrs, frames, 16).unwrap();
                assert_eq!(zero_crossings(&m.channel(OSCILLATOR_CHANNEL)), 2 * k as usize);
            }
        }
    }

    #[test]
    fn zero_samples_is_empty() {
        let ds = synth_generate(&SynthConfig { num_samples: 0, ..Default::default() }).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn texts_name_every_attribute() {
        let ds = synth_generate(&SynthConfig { num_samples: 30, ..Default::default() }).unwrap();
        for rec in ds.records() {
            assert!((1..=3).contains(&rec.texts.len()));
            let words = rec.attributes.as_ref().unwrap().words();
            for t in &rec.texts {
                let toks: Vec<&str> = t.split_whitespace().collect();
                for w in &words {
                    assert!(toks.contains(&w.as_str()), "`{t}` lacks `{w}`");
                }
            }
        }
    }

    #[test]
    fn test_split_tags_tail() {
        let ds = synth_generate(&SynthConfig { num_samples: 10, num_test: 3, ..Default::default() }).unwrap();
        assert_eq!(ds.split("test").len(), 3);
        assert_eq!(ds.split("train").len(), 7);
        assert_eq!(ds.split("test").record(0).id, ds.record(7).id);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            SynthConfig { length_range: (10, 5), ..Default::default() },
            SynthConfig { actions: vec![], ..Default::default() },
            SynthConfig { actions: vec!["dances".into()], ..Default::default() },
            SynthConfig { repetitions: vec![7], ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(synth_generate(&cfg), Err(Error::Config(_))), "{cfg:?}");
        }
    }
}

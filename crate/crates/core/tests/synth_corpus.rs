use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stylenet::hand_graph::{finger_joint, Hands};
use stylenet::skeleton::{read_sample, DatasetManifest, InputMode, JointSample};
use stylenet::synth::{
    generate_corpus, make_person_style, noiseless_trajectory, synth_sequence, Corpus, KeyLayout, Sentence, SynthConfig,
    DEFAULT_DELTA_STYLE, MANIFEST_NAME,
};

#[test]
fn style_is_deterministic_in_seed() {
    assert_eq!(make_person_style(7, DEFAULT_DELTA_STYLE), make_person_style(7, DEFAULT_DELTA_STYLE));
}

#[test]
fn seeds_one_and_two_differ_in_posture() {
    let a = make_person_style(1, DEFAULT_DELTA_STYLE).posture_offsets();
    let b = make_person_style(2, DEFAULT_DELTA_STYLE).posture_offsets();
    assert!(a.iter().zip(&b).any(|(x, y)| x != y));
}

#[test]
fn hundred_seeds_are_pairwise_distinct_and_separated() {
    let styles: Vec<_> = (0..100u64).map(|s| make_person_style(s, DEFAULT_DELTA_STYLE)).collect();
    for i in 0..styles.len() {
        for j in i + 1..styles.len() {
            let (a, b) = (styles[i].parameter_vector(), styles[j].parameter_vector());
            let dist: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            assert!(dist > 0.0, "seeds {i} and {j}");
            assert!(styles[i].separation(&styles[j]) >= DEFAULT_DELTA_STYLE - 1e-12, "seeds {i} and {j}");
        }
    }
}

#[test]
fn style_invariants_hold() {
    for seed in 0..200 {
        let s = make_person_style(seed, DEFAULT_DELTA_STYLE);
        assert!(s.stroke_duration() > 0.0 && s.press_depth() > 0.0 && s.hand_scale() > 0.0);
        assert!((0..42).all(|v| s.jitter_std(v) > 0.0));
        assert!(s.follow.iter().flatten().all(|&f| f > 0.0 && f < 1.0));
        assert!(s.degradation() > 0.0);
    }
}

fn quiet_style(seed: u64) -> stylenet::synth::StyleParams {
    let mut s = make_person_style(seed, DEFAULT_DELTA_STYLE);
    s.jitter_gain = 0.0;
    s
}

#[test]
fn single_keystroke_peak_equals_key_distance() {
    let layout = KeyLayout::standard(Hands::One);
    for seed in 0..10 {
        let style = quiet_style(seed);
        let rest = style.rest_pose(Hands::One);
        for key in [0, 13, 25] {
            let sentence = Sentence::new(0, vec![key]).unwrap();
            let (_, finger) = style.typing_finger(Hands::One, layout.columns[key]);
            let tip = finger_joint(0, finger, 3);
            let expected = ((layout.positions[key][0] - rest[tip][0]).powi(2)
                + (layout.positions[key][1] - rest[tip][1]).powi(2))
            .sqrt();

            let traj = noiseless_trajectory(&style, &sentence, &layout, Hands::One, 30.0).unwrap();
            let peak = (0..traj.frames)
                .map(|t| {
                    let p = traj.at(t, tip);
                    ((p[0] - rest[tip][0]).powi(2) + (p[1] - rest[tip][1]).powi(2)).sqrt()
                })
                .fold(0.0, f64::max);
            assert!((peak - expected).abs() < 1e-6, "seed {seed} key {key}: {peak} vs {expected}");

            // The stored sample carries the same motion at f32 precision.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let j = synth_sequence(&style, &sentence, &layout, Hands::One, &mut rng, 30.0, InputMode::Score2d).unwrap();
            let r = j.point(0, tip);
            let peak32 = (0..j.frames())
                .map(|t| {
                    let p = j.point(t, tip);
                    (((p[0] - r[0]) as f64).powi(2) + ((p[1] - r[1]) as f64).powi(2)).sqrt()
                })
                .fold(0.0, f64::max);
            assert!((peak32 - expected).abs() < 1e-4);
        }
    }
}

#[test]
fn key_at_rest_position_keeps_scores_at_one() {
    let style = make_person_style(3, DEFAULT_DELTA_STYLE);
    let rest = style.rest_pose(Hands::One);
    let mut layout = KeyLayout::standard(Hands::One);
    let key = 4;
    let (_, finger) = style.typing_finger(Hands::One, layout.columns[key]);
    let tip = finger_joint(0, finger, 3);
    layout.positions[key] = [rest[tip][0], rest[tip][1]];
    let sentence = Sentence::new(0, vec![key, key, key]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let j = synth_sequence(&style, &sentence, &layout, Hands::One, &mut rng, 30.0, InputMode::Score2d).unwrap();
    for t in 0..j.frames() {
        for v in 0..j.joints() {
            assert_eq!(j.point(t, v)[2], 1.0);
        }
    }
}

#[test]
fn same_inputs_give_identical_samples() {
    let style = make_person_style(11, DEFAULT_DELTA_STYLE);
    let layout = KeyLayout::standard(Hands::Two);
    let sentence = Sentence::new(2, vec![1, 5, 9, 20]).unwrap();
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        synth_sequence(&style, &sentence, &layout, Hands::Two, &mut rng, 30.0, InputMode::Xyz3d).unwrap()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn length_tracks_keys_times_stroke_frames() {
    let style = make_person_style(4, DEFAULT_DELTA_STYLE);
    let layout = KeyLayout::standard(Hands::One);
    let sentence = Sentence::new(0, vec![0, 1, 2, 3, 4, 5, 6]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let j = synth_sequence(&style, &sentence, &layout, Hands::One, &mut rng, 30.0, InputMode::Score2d).unwrap();
    let nominal = 7.0 * 30.0 * style.stroke_duration();
    assert!((j.frames() as f64 - nominal).abs() <= 7.0 * 0.5 + 1e-9);
}

#[test]
fn three_d_mode_has_two_hands_and_press_depth() {
    let corpus = Corpus::new(2, 2, 1, 9, InputMode::Xyz3d, SynthConfig::default()).unwrap();
    let s = corpus.sample(1, 1, 0).unwrap();
    assert_eq!(s.joints(), 42);
    let min_z = (0..s.frames()).flat_map(|t| (0..42).map(move |v| (t, v))).map(|(t, v)| s.point(t, v)[2]).fold(f32::MAX, f32::min);
    assert!(min_z < -(corpus.styles[1].press_depth() as f32) * 0.5);
}

fn scores_in_range(samples: &[JointSample]) {
    for s in samples {
        assert!(s.data().chunks(3).all(|p| (0.05..=1.0).contains(&p[2])));
    }
}

#[test]
fn corpus_sizes_match_protocol_counts() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_corpus(dir.path().join("a"), 60, 10, 3, 1, InputMode::Score2d, SynthConfig::default()).unwrap();
    assert_eq!(m.len(), 1800);
    assert_eq!(m.persons().len(), 60);
    let reloaded = DatasetManifest::load(dir.path().join("a").join(MANIFEST_NAME)).unwrap();
    assert_eq!(reloaded.len(), 1800);
    let s = reloaded.load_sample(1799).unwrap();
    assert_eq!((s.labels.person_id, s.labels.sentence_id, s.labels.repetition_id), (59, 9, 2));

    let c = Corpus::new(80, 2, 10, 2, InputMode::Score2d, SynthConfig::default()).unwrap();
    assert_eq!(c.len(), 1600);
    let m = generate_corpus(dir.path().join("c"), 1, 1, 1, 3, InputMode::Xyz3d, SynthConfig::default()).unwrap();
    assert_eq!(m.len(), 1);
    assert_eq!(read_sample(&m.records[0].path).unwrap().joints(), 42);
}

#[test]
fn zero_counts_are_rejected() {
    assert!(Corpus::new(0, 1, 1, 0, InputMode::Score2d, SynthConfig::default()).is_err());
    assert!(Corpus::new(1, 0, 1, 0, InputMode::Score2d, SynthConfig::default()).is_err());
    assert!(Corpus::new(1, 1, 0, 0, InputMode::Score2d, SynthConfig::default()).is_err());
}

#[test]
fn sentences_are_shared_and_reps_differ_only_by_noise() {
    let c = Corpus::new(3, 4, 2, 21, InputMode::Score2d, SynthConfig::default()).unwrap();
    let again = Corpus::new(3, 4, 2, 21, InputMode::Score2d, SynthConfig::default()).unwrap();
    assert_eq!(c.sentences, again.sentences);
    assert_eq!(c.sample(2, 3, 1).unwrap(), again.sample(2, 3, 1).unwrap());
    let (a, b) = (c.sample(0, 1, 0).unwrap(), c.sample(0, 1, 1).unwrap());
    assert_eq!(a.frames(), b.frames());
    assert_ne!(a, b);
    let mut quiet = c.clone();
    for s in &mut quiet.styles {
        s.jitter_gain = 0.0;
    }
    assert_eq!(quiet.sample(0, 1, 0).unwrap().data(), quiet.sample(0, 1, 1).unwrap().data());
    scores_in_range(&c.samples().unwrap());
}

/// Mean absolute frame-to-frame motion of every joint coordinate plus the
/// sequence length, per frame.
fn velocity_features(s: &JointSample) -> Vec<f64> {
    let (t, v) = (s.frames(), s.joints());
    let mut f = vec![0.0; v * 2 + 1];
    for k in 1..t {
        for j in 0..v {
            let (a, b) = (s.point(k, j), s.point(k - 1, j));
            f[2 * j] += (a[0] - b[0]).abs() as f64 / (t - 1) as f64;
            f[2 * j + 1] += (a[1] - b[1]).abs() as f64 / (t - 1) as f64;
        }
    }
    f[2 * v] = t as f64 / 10.0;
    f
}

#[test]
fn nearest_centroid_on_velocity_recovers_identity() {
    let c = Corpus::new(20, 4, 4, 99, InputMode::Score2d, SynthConfig::default()).unwrap();
    let mut centroids = vec![vec![0.0; 43]; 20];
    for (p, centroid) in centroids.iter_mut().enumerate() {
        for s in 0..4 {
            for r in 0..2 {
                for (acc, x) in centroid.iter_mut().zip(velocity_features(&c.sample(p, s, r).unwrap())) {
                    *acc += x / 8.0;
                }
            }
        }
    }
    let mut correct = 0;
    let mut total = 0;
    for p in 0..20 {
        for s in 0..4 {
            for r in 2..4 {
                let f = velocity_features(&c.sample(p, s, r).unwrap());
                let best = (0..20)
                    .min_by(|&a, &b| {
                        let d = |q: usize| centroids[q].iter().zip(&f).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
                        d(a).total_cmp(&d(b))
                    })
                    .unwrap();
                correct += usize::from(best == p);
                total += 1;
            }
        }
    }
    let acc = correct as f64 / total as f64;
    assert!(acc >= 0.8, "nearest-centroid accuracy {acc}");
}

/// Fingertip centroid trajectory, resampled to a fixed length and centred.
fn content_signature(s: &JointSample, len: usize) -> Vec<f64> {
    let tips: Vec<usize> = (0..5).map(|f| finger_joint(0, f, 3)).collect();
    let mut sig = Vec::with_capacity(2 * len);
    for i in 0..len {
        let t = i * (s.frames() - 1) / (len - 1);
        for c in 0..2 {
            sig.push(tips.iter().map(|&v| s.point(t, v)[c] as f64).sum::<f64>() / tips.len() as f64);
        }
    }
    for c in 0..2 {
        let mean = sig.iter().skip(c).step_by(2).sum::<f64>() / len as f64;
        sig.iter_mut().skip(c).step_by(2).for_each(|x| *x -= mean);
    }
    sig
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    dot(a, b) / (dot(a, a) * dot(b, b)).sqrt()
}

#[test]
fn sentence_content_dominates_raw_coordinates() {
    let (np, ns) = (8, 6);
    let c = Corpus::new(np, ns, 1, 5, InputMode::Score2d, SynthConfig::default()).unwrap();
    let sig: Vec<Vec<Vec<f64>>> = (0..np)
        .map(|p| (0..ns).map(|s| content_signature(&c.sample(p, s, 0).unwrap(), 64)).collect())
        .collect();
    let (mut same_sentence, mut n1) = (0.0, 0);
    let (mut same_person, mut n2) = (0.0, 0);
    for p in 0..np {
        for s in 0..ns {
            for q in 0..np {
                if q != p {
                    same_sentence += correlation(&sig[p][s], &sig[q][s]);
                    n1 += 1;
                }
            }
            for u in 0..ns {
                if u != s {
                    same_person += correlation(&sig[p][s], &sig[p][u]);
                    n2 += 1;
                }
            }
        }
    }
    let (a, b) = (same_sentence / n1 as f64, same_person / n2 as f64);
    assert!(a > b, "same-sentence correlation {a} vs same-person {b}");
}

mod common;

use common::{exact_posterior, random_model, two_state_identity};
use ipshield::envelope::BeliefEnvelope;
use ipshield::model::{
    bayes_update, bayes_update_with, envelope_from_belief, validate_model, Belief, History, PointEmission,
    TransitionKernel, PROB_TOL,
};
use ipshield::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn identity2() -> TransitionKernel {
    TransitionKernel::new(2, 1, vec![1.0, 0.0, 0.0, 1.0]).unwrap()
}

#[test]
fn deterministic_observation_collapses_belief() {
    let z = PointEmission::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let b = bayes_update(&Belief::uniform(2), 0, 0, &identity2(), &z).unwrap();
    assert_eq!(b.mass(), &[1.0, 0.0]);
}

#[test]
fn uninformative_observation_leaves_the_push_forward() {
    let t = TransitionKernel::new(2, 1, vec![0.9, 0.1, 0.2, 0.8]).unwrap();
    let z = PointEmission::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
    let b = Belief::new(vec![0.3, 0.7]).unwrap();
    let post = bayes_update(&b, 0, 1, &t, &z).unwrap();
    let y = [0.3 * 0.9 + 0.7 * 0.2, 0.3 * 0.1 + 0.7 * 0.8];
    assert!((post.mass()[0] - y[0]).abs() < 1e-15 && (post.mass()[1] - y[1]).abs() < 1e-15);
}

#[test]
fn two_thirds_one_third_example() {
    let z = PointEmission::from_rows(&[vec![0.5, 0.5], vec![0.25, 0.75]]).unwrap();
    let post = bayes_update(&Belief::uniform(2), 0, 0, &identity2(), &z).unwrap();
    assert!((post.mass()[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((post.mass()[1] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn impossible_observation_is_zero_evidence() {
    let z = PointEmission::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
    let err = bayes_update(&Belief::uniform(2), 0, 1, &identity2(), &z).unwrap_err();
    assert!(matches!(err, Error::ZeroEvidence { action: 0, observation: 1, .. }));
}

#[test]
fn validation_reports_each_broken_invariant() {
    let good = two_state_identity([[0.4, 0.4], [0.5, 0.5]], [[0.6, 0.6], [0.5, 0.5]], [0.5, 0.5]);
    assert!(validate_model(&good).is_empty());

    let mut short_row = good.clone();
    short_row.transitions.set(1, 0, 1, 0.9);
    let v = validate_model(&short_row);
    assert_eq!(v.len(), 1, "{v:?}");
    assert!(v[0].contains("s1") && v[0].contains("a0"), "{}", v[0]);

    let mut thin = good.clone();
    thin.emissions = ipshield::model::EmissionIntervals::new(2, 2, vec![0.4, 0.4, 0.3, 0.3], vec![0.6, 0.6, 0.4, 0.4]).unwrap();
    let v = validate_model(&thin);
    assert_eq!(v.len(), 1, "{v:?}");
    assert!(v[0].contains("empty admissible set at state s1"), "{}", v[0]);

    let mut overlap = good;
    overlap.labels.fail_states.insert(0);
    assert!(!validate_model(&overlap).is_empty());
}

#[test]
fn point_envelopes_match_the_belief() {
    assert_eq!(envelope_from_belief(&Belief::point(2, 0)), BeliefEnvelope::new(vec![1.0, 0.0], vec![1.0, 0.0]).unwrap());
    let half = envelope_from_belief(&Belief::uniform(2));
    assert_eq!(half.lower(), &[0.5, 0.5]);
    assert_eq!(half.upper(), &[0.5, 0.5]);
    let quarter = envelope_from_belief(&Belief::uniform(4));
    assert_eq!(quarter.lower(), &[0.25; 4]);
    assert_eq!(quarter.upper(), &[0.25; 4]);
}

#[test]
fn history_indices_are_checked() {
    let m = two_state_identity([[0.4, 0.4], [0.5, 0.5]], [[0.6, 0.6], [0.5, 0.5]], [0.5, 0.5]);
    let mut h = History::default();
    h.push(0, 1);
    assert!(h.validate(&m).is_ok());
    h.push(1, 0);
    assert!(h.validate(&m).is_err());
}

#[test]
fn bayes_update_agrees_with_reference_on_random_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..300 {
        let (m, z) = random_model(5, 4, &mut rng);
        let a = rand::Rng::random_range(&mut rng, 0..m.n_actions());
        for o in 0..m.n_obs() {
            let lib = bayes_update(&m.initial_belief, a, o, &m.transitions, &z);
            match exact_posterior(&m, m.initial_belief.mass(), a, &z.column(o)) {
                Some(want) => {
                    let got = lib.unwrap();
                    assert!((got.mass().iter().sum::<f64>() - 1.0).abs() < PROB_TOL);
                    for (g, w) in got.mass().iter().zip(&want) {
                        assert!((g - w).abs() < 1e-12);
                    }
                }
                None => assert!(lib.is_err()),
            }
        }
    }
}

proptest! {
    #[test]
    fn scaling_the_observation_column_leaves_the_posterior(seed in any::<u64>(), c in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, z) = random_model(5, 4, &mut rng);
        let w = z.column(0);
        let scaled: Vec<f64> = w.iter().map(|x| x * c).collect();
        let b = &m.initial_belief;
        if let (Ok(p), Ok(q)) = (bayes_update_with(b, 0, 0, &m.transitions, &w), bayes_update_with(b, 0, 0, &m.transitions, &scaled)) {
            for (x, y) in p.mass().iter().zip(q.mass()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn validation_is_pure(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, _) = random_model(5, 4, &mut rng);
        prop_assert!(validate_model(&m).is_empty());
        prop_assert_eq!(validate_model(&m), validate_model(&m));
    }
}

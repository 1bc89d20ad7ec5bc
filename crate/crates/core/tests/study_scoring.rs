use affectune::emotion::{Quadrant, TextSample};
use affectune::generate::ManifestEntry;
use affectune::rng::substream;
use affectune::study::{build_trials, score_responses, ClipChoice, StudyError, StudyResponse, StudyState, Trial};
use rand::Rng;

pub fn fixture(per_quadrant: usize) -> Vec<Trial> {
    let mut texts = Vec::new();
    let mut manifest = Vec::new();
    for q in Quadrant::ALL {
        for i in 0..per_quadrant {
            let id = format!("{}-{i}", q.index());
            texts.push(TextSample { id: id.clone(), body: format!("text {id}"), category: "joy".into(), quadrant: q });
            manifest.push(ManifestEntry { text_id: id, quadrant: q, seed: i as u64, config_hash: "c".into(), path: format!("{q}/sample_{i:03}.mid") });
        }
    }
    build_trials(&texts, &manifest, 7).unwrap()
}

/// A response on `t` that picks the text's own clip and gets valence and
/// arousal right or wrong as requested.
fn response(t: &Trial, participant: &str, valence_ok: bool, arousal_ok: bool) -> StudyResponse {
    let choice = t.target();
    let c = t.clip(choice).quadrant;
    let perceived = Quadrant::from_signs(c.high_valence() == valence_ok, c.high_arousal() == arousal_ok);
    StudyResponse { trial_id: t.trial_id.clone(), participant_id: participant.into(), perceived_quadrant: perceived, chosen_clip: choice, timestamp: Some(0) }
}

#[test]
fn exact_rate_response_set_reproduces_reference_accuracies() {
    let trials = fixture(25);
    // 40 both right, 13 valence only, 30 arousal only, 17 neither
    let plan = [(40, true, true), (13, true, false), (30, false, true), (17, false, false)];
    let mut responses = Vec::new();
    let mut k = 0;
    for (n, v, a) in plan {
        for _ in 0..n {
            responses.push(response(&trials[k], "p1", v, a));
            k += 1;
        }
    }
    let r = score_responses(&responses, &trials).unwrap();
    assert_eq!(r.n_responses, 100);
    assert!((r.valence_accuracy - 0.53).abs() < 1e-12);
    assert!((r.arousal_accuracy - 0.70).abs() < 1e-12);
    assert!((r.joint_accuracy - 0.40).abs() < 1e-12);
    assert_eq!(r.chance_levels, (0.5, 0.5, 0.25));
    assert_eq!(r.ground_truth.joint, 1.0);
}

#[test]
fn joint_never_exceeds_either_axis() {
    let trials = fixture(5);
    let mut rng = substream(41, "random-responses");
    for _ in 0..1000 {
        let n = rng.random_range(1..40);
        let responses: Vec<StudyResponse> = (0..n)
            .map(|i| {
                let t = &trials[rng.random_range(0..trials.len())];
                StudyResponse {
                    trial_id: t.trial_id.clone(),
                    participant_id: format!("p{i}"),
                    perceived_quadrant: Quadrant::ALL[rng.random_range(0..4)],
                    chosen_clip: if rng.random_bool(0.5) { ClipChoice::A } else { ClipChoice::B },
                    timestamp: None,
                }
            })
            .collect();
        let r = score_responses(&responses, &trials).unwrap();
        assert!(r.joint_accuracy <= r.valence_accuracy.min(r.arousal_accuracy) + 1e-15);
    }
}

#[test]
fn trials_pair_distinct_files_with_exactly_one_own_clip() {
    for t in fixture(6) {
        assert_ne!(t.clip_a.file, t.clip_b.file);
        let own = [&t.clip_a, &t.clip_b].iter().filter(|c| c.quadrant == t.text_quadrant).count();
        assert_eq!(own, 1);
        let v = serde_json::to_value(t.view()).unwrap();
        assert_eq!(v.as_object().unwrap().len(), 4);
        for field in ["trial_id", "text", "clip_a_url", "clip_b_url"] {
            assert!(v.get(field).is_some());
        }
    }
}

#[test]
fn state_rejects_unknown_and_duplicate_and_survives_restart() {
    let trials = fixture(2);
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let mut st = StudyState::open(trials.clone(), &log).unwrap();
    let mut bad = response(&trials[0], "p", true, true);
    bad.trial_id = "t9999".into();
    assert!(matches!(st.submit(bad), Err(StudyError::UnknownTrial(_))));
    for t in &trials[..3] {
        st.submit(response(t, "p", true, false)).unwrap();
    }
    assert!(matches!(st.submit(response(&trials[1], "p", true, true)), Err(StudyError::Duplicate { .. })));
    st.submit(response(&trials[1], "q", true, true)).unwrap();
    drop(st);

    // a torn trailing write is ignored on replay
    let mut text = std::fs::read_to_string(&log).unwrap();
    text.push_str("{\"trial_id\":\"t00");
    std::fs::write(&log, text).unwrap();
    let st = StudyState::open(trials.clone(), &log).unwrap();
    assert_eq!(st.responses().len(), 4);
    assert_eq!(st.next_trial("p").unwrap().trial_id, trials[3].trial_id);
    let r = st.report().unwrap();
    assert_eq!(r.valence_accuracy, 1.0);
    assert_eq!(r.arousal_accuracy, 0.25);
}

mod common;

use common::{dead_endpoint, MockEndpoint};
use mmdg::consistency::{
    parse_rating, rate_dataset, rate_fallback, ConsistencyError, EndpointConfig, LlmRater, Rater,
    RatingCache, RatingCacheEntry, RatingRequest, RatingSource, API_KEY_ENV, CONSISTENCY_PROMPT,
};
use mmdg::datamodel::{generate_synthetic, Dims, SynthConfig};
use proptest::prelude::*;

fn endpoint(url: &str) -> EndpointConfig {
    EndpointConfig {
        url: url.into(),
        backoff_ms: 1,
        timeout_s: 5,
        ..EndpointConfig::default()
    }
}

fn request(id: &str) -> RatingRequest {
    RatingRequest::new(id, "#C C pours water into a glass", "water splashing").unwrap()
}

fn small_dataset() -> mmdg::datamodel::Dataset {
    generate_synthetic(&SynthConfig {
        num_classes: 3,
        num_scenarios: 2,
        num_locations: 2,
        clips_per_domain: 3,
        dims: Dims {
            appearance: 2,
            motion: 2,
            audio: 2,
            text: 3,
        },
        missing_audio_fraction: 0.25,
        inconsistent_audio_fraction: 0.3,
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn mock_endpoint_reply_becomes_a_rating() {
    let mock = MockEndpoint::start("85", 200);
    let rater = LlmRater::new(endpoint(&mock.url), "test-key").unwrap();
    let cache = RatingCache::in_memory();
    let e = rater.rate(&request("clip-1"), &cache).unwrap();
    assert_eq!(e.rating, 0.85);
    assert_eq!(e.source, RatingSource::Llm);
    assert_eq!(e.raw_response.as_deref(), Some("85"));
    assert_eq!(mock.hits(), 1);

    let body: serde_json::Value = serde_json::from_str(&mock.bodies.lock().unwrap()[0]).unwrap();
    assert_eq!(body["model"], "llama");
    let content = body["messages"][0]["content"].as_str().unwrap();
    assert!(content.starts_with(CONSISTENCY_PROMPT));
    assert!(content.ends_with("Visual: #C C pours water into a glass\nAudio: water splashing"));
    assert_eq!(mock.auth.lock().unwrap()[0], "Bearer test-key");
}

#[test]
fn cached_clip_makes_no_call() {
    let mock = MockEndpoint::start("10", 200);
    let rater = LlmRater::new(endpoint(&mock.url), "k").unwrap();
    let cache = RatingCache::in_memory();
    cache
        .insert(RatingCacheEntry {
            clip_id: "clip-1".into(),
            rating: 0.4,
            source: RatingSource::Llm,
            raw_response: None,
        })
        .unwrap();
    assert_eq!(rater.rate(&request("clip-1"), &cache).unwrap().rating, 0.4);
    assert_eq!(mock.hits(), 0);
    assert_eq!(rater.attempts(), 0);
}

#[test]
fn unreachable_endpoint_fails_after_three_attempts() {
    let rater = LlmRater::new(endpoint(&dead_endpoint()), "k").unwrap();
    let err = rater
        .rate(&request("c"), &RatingCache::in_memory())
        .unwrap_err();
    assert!(
        matches!(err, ConsistencyError::Transport { attempts: 3, .. }),
        "{err}"
    );
    assert_eq!(rater.attempts(), 3);
}

#[test]
fn http_errors_are_retried_three_times() {
    let mock = MockEndpoint::start("85", 503);
    let rater = LlmRater::new(endpoint(&mock.url), "k").unwrap();
    assert!(matches!(
        rater.rate(&request("c"), &RatingCache::in_memory()),
        Err(ConsistencyError::Transport { .. })
    ));
    assert_eq!(mock.hits(), 3);
}

#[test]
fn unparseable_reply_is_a_parse_error() {
    let mock = MockEndpoint::start("no idea", 200);
    let rater = LlmRater::new(endpoint(&mock.url), "k").unwrap();
    let cache = RatingCache::in_memory();
    assert!(matches!(
        rater.rate(&request("c"), &cache),
        Err(ConsistencyError::Parse(_))
    ));
    assert!(cache.is_empty());
}

#[test]
fn fully_cached_rerun_issues_zero_calls() {
    let mock = MockEndpoint::start("Score: 70%", 200);
    let rater = LlmRater::new(endpoint(&mock.url), "k").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ratings.jsonl");

    let mut ds = small_dataset();
    let audio_clips = ds.records.iter().filter(|r| r.has_audio()).count();
    let first = rate_dataset(
        &mut ds,
        Rater::Llm(&rater),
        &RatingCache::open(&path).unwrap(),
        4,
    )
    .unwrap();
    assert_eq!(first.rated, audio_clips);
    assert_eq!(mock.hits(), audio_clips);
    assert!(ds
        .records
        .iter()
        .filter(|r| r.has_audio())
        .all(|r| r.consistency == Some(0.7)));
    assert!(ds
        .records
        .iter()
        .filter(|r| !r.has_audio())
        .all(|r| r.consistency.is_none()));

    let mut again = small_dataset();
    let second = rate_dataset(
        &mut again,
        Rater::Llm(&rater),
        &RatingCache::open(&path).unwrap(),
        4,
    )
    .unwrap();
    assert_eq!(second.from_cache, audio_clips);
    assert_eq!(mock.hits(), audio_clips);
    assert_eq!(again, ds);
}

#[test]
fn interrupted_run_resumes_without_duplicates() {
    let mock = MockEndpoint::start("55", 200);
    let rater = LlmRater::new(endpoint(&mock.url), "k").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ratings.jsonl");
    let mut ds = small_dataset();
    let audio: Vec<String> = ds
        .records
        .iter()
        .filter(|r| r.has_audio())
        .map(|r| r.clip_id.clone())
        .collect();
    {
        let cache = RatingCache::open(&path).unwrap();
        for id in &audio[..2] {
            cache
                .insert(RatingCacheEntry {
                    clip_id: id.clone(),
                    rating: 0.55,
                    source: RatingSource::Llm,
                    raw_response: Some("55".into()),
                })
                .unwrap();
        }
    }
    let summary = rate_dataset(
        &mut ds,
        Rater::Llm(&rater),
        &RatingCache::open(&path).unwrap(),
        2,
    )
    .unwrap();
    assert_eq!(summary.from_cache, 2);
    assert_eq!(mock.hits(), audio.len() - 2);
    let lines = std::fs::read_to_string(&path).unwrap();
    assert_eq!(lines.lines().count(), audio.len());
}

#[test]
fn missing_key_is_a_configuration_error() {
    std::env::remove_var(API_KEY_ENV);
    assert!(matches!(
        LlmRater::from_env(EndpointConfig::default()),
        Err(ConsistencyError::Config(_))
    ));
}

#[test]
fn fallback_separates_consistent_from_inconsistent_clips() {
    let mut ds = generate_synthetic(&SynthConfig {
        inconsistent_audio_fraction: 0.3,
        ..SynthConfig::default()
    })
    .unwrap();
    rate_dataset(&mut ds, Rater::Fallback, &RatingCache::in_memory(), 1).unwrap();
    let mean = |want: bool| {
        let v: Vec<f64> = ds
            .records
            .iter()
            .filter(|r| r.audio_consistent == Some(want))
            .map(|r| r.consistency.unwrap() as f64)
            .collect();
        assert!(!v.is_empty());
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (good, bad) = (mean(true), mean(false));
    assert!(good > bad, "consistent {good:.3} vs inconsistent {bad:.3}");
}

#[test]
fn fallback_ratings_are_cached_and_bounded() {
    let mut ds = small_dataset();
    let cache = RatingCache::in_memory();
    let s = rate_dataset(&mut ds, Rater::Fallback, &cache, 1).unwrap();
    assert_eq!(cache.len(), s.rated);
    assert!(s.skipped_no_audio > 0);
    for r in ds.records.iter().filter(|r| r.has_audio()) {
        let e = cache.get(&r.clip_id).unwrap();
        assert_eq!(e.source, RatingSource::Fallback);
        assert!((0.0..=1.0).contains(&e.rating));
    }
}

#[test]
fn rater_rejects_bad_endpoint_settings() {
    assert!(LlmRater::new(
        EndpointConfig {
            url: String::new(),
            ..EndpointConfig::default()
        },
        "k"
    )
    .is_err());
    assert!(LlmRater::new(
        EndpointConfig {
            max_attempts: 0,
            ..EndpointConfig::default()
        },
        "k"
    )
    .is_err());
}

proptest! {
    #[test]
    fn parsed_ratings_stay_in_unit_interval(raw in ".{0,40}") {
        if let Ok(r) = parse_rating(&raw) {
            prop_assert!((0.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn parsed_percentages_divide_by_one_hundred(v in 0u32..=100, prefix in "[a-zA-Z :]{0,10}") {
        let r = parse_rating(&format!("{prefix}{v}%")).unwrap();
        prop_assert!((r - v as f32 / 100.0).abs() < 1e-6);
    }

    #[test]
    fn fallback_is_monotone_in_cosine(a in 0.0f64..std::f64::consts::PI, b in 0.0f64..std::f64::consts::PI) {
        let (near, far) = if a <= b { (a, b) } else { (b, a) };
        let at = |t: f64| rate_fallback(&[1.0, 0.0, 0.0], &[t.cos() as f32, t.sin() as f32, 0.0]).unwrap();
        prop_assert!(at(near) >= at(far));
        prop_assert!((0.0..=1.0).contains(&at(near)));
    }

    #[test]
    fn cache_reads_back_what_was_written(ratings in prop::collection::vec(0.0f32..=1.0, 1..10)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let cache = RatingCache::open(&path).unwrap();
        for (i, r) in ratings.iter().enumerate() {
            cache.insert(RatingCacheEntry { clip_id: format!("c{i}"), rating: *r, source: RatingSource::Fallback, raw_response: None }).unwrap();
        }
        let back = RatingCache::open(&path).unwrap();
        for (i, r) in ratings.iter().enumerate() {
            prop_assert_eq!(back.get(&format!("c{i}")).unwrap().rating, *r);
        }
    }
}

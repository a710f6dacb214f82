use super::*;

fn default_cfg(seed: u64) -> SimConfig {
    SimConfig {
        seed,
        ..SimConfig::default()
    }
}

#[test]
fn same_seed_is_bit_identical() {
    let a = simulate_meeting(&default_cfg(7)).unwrap();
    let b = simulate_meeting(&default_cfg(7)).unwrap();
    assert_eq!(a.mixture, b.mixture);
    assert_eq!(a.noise, b.noise);
    assert_eq!(a.utterances.len(), b.utterances.len());
    for (u, v) in a.utterances.iter().zip(&b.utterances) {
        assert_eq!(u.source, v.source);
        assert_eq!(u.start, v.start);
        assert_eq!(u.speaker_id, v.speaker_id);
    }
    let c = simulate_meeting(&default_cfg(8)).unwrap();
    assert_ne!(a.mixture, c.mixture);
}

#[test]
fn overlap_ratio_lands_in_range_across_seeds() {
    for seed in 0..100 {
        let s = simulate_meeting(&default_cfg(seed)).unwrap();
        assert!(
            (0.5..=0.8).contains(&s.overlap_ratio),
            "seed {seed}: ratio {}",
            s.overlap_ratio
        );
    }
}

#[test]
fn speaker_count_in_configured_range() {
    for seed in 0..20 {
        let s = simulate_meeting(&default_cfg(seed)).unwrap();
        let mut speakers: Vec<&str> =
            s.utterances.iter().map(|u| u.speaker_id.as_str()).collect();
        speakers.sort();
        speakers.dedup();
        assert!(
            (3..=5).contains(&speakers.len()),
            "seed {seed}: {} speakers",
            speakers.len()
        );
    }
}

#[test]
fn never_more_than_two_simultaneous_speakers() {
    // The chain placement must stay 2-channel-feasible for training.
    for seed in 0..30 {
        let s = simulate_meeting(&default_cfg(seed)).unwrap();
        let mut activity = vec![0u32; s.mixture.len()];
        for u in &s.utterances {
            for slot in &mut activity[u.start..u.end()] {
                *slot += 1;
            }
        }
        assert!(
            activity.iter().all(|&c| c <= 2),
            "seed {seed}: {} speakers at once",
            activity.iter().max().unwrap()
        );
    }
}

#[test]
fn mixture_decomposes_into_utterances_plus_noise() {
    let s = simulate_meeting(&default_cfg(3)).unwrap();
    let mut rebuilt = s.noise.clone();
    for u in &s.utterances {
        for (i, &v) in u.source.iter().enumerate() {
            rebuilt[u.start + i] += v;
        }
    }
    assert_eq!(rebuilt, s.mixture);
}

#[test]
fn recorded_ratio_matches_recomputation() {
    for seed in [0, 5, 11] {
        let s = simulate_meeting(&default_cfg(seed)).unwrap();
        let recomputed = measure_overlap_ratio(&s.utterances, s.mixture.len());
        assert!((recomputed - s.overlap_ratio).abs() < 1e-9);
    }
}

#[test]
fn all_source_kinds_generate() {
    for kind in [
        SourceKind::Multitone,
        SourceKind::FilteredNoise,
        SourceKind::Chirp,
    ] {
        let cfg = SimConfig {
            source_kind: kind,
            ..default_cfg(1)
        };
        let s = simulate_meeting(&cfg).unwrap();
        assert!(s.utterances.iter().all(|u| u.source.iter().any(|&v| v != 0.0)));
        assert!(s.mixture.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn wav_round_trip_is_bit_exact_after_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ramp.wav");
    // A ramp already on the 16-bit grid survives exactly.
    let ramp: Vec<f64> = (-50..50).map(|i| i as f64 * 100.0 / 32768.0).collect();
    let clipped = write_wav(&path, &ramp, 8000).unwrap();
    assert_eq!(clipped, 0);
    let (back, fs) = read_wav(&path).unwrap();
    assert_eq!(fs, 8000);
    assert_eq!(back, ramp);
}

#[test]
fn wav_clips_out_of_range_samples() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clip.wav");
    let samples = vec![0.0, 1.5, -2.0, 0.5];
    let clipped = write_wav(&path, &samples, 8000).unwrap();
    assert_eq!(clipped, 2);
    let (back, _) = read_wav(&path).unwrap();
    assert_eq!(back[1], 32767.0 / 32768.0);
    assert_eq!(back[2], -1.0);
}

#[test]
fn wav_hand_built_fixture_parses() {
    // Canonical 44-byte header + 4 samples.
    let mut bytes = Vec::new();
    bytes.extend_from_slice(b"RIFF");
    bytes.extend_from_slice(&(36u32 + 8).to_le_bytes());
    bytes.extend_from_slice(b"WAVE");
    bytes.extend_from_slice(b"fmt ");
    bytes.extend_from_slice(&16u32.to_le_bytes());
    bytes.extend_from_slice(&1u16.to_le_bytes());
    bytes.extend_from_slice(&1u16.to_le_bytes());
    bytes.extend_from_slice(&16000u32.to_le_bytes());
    bytes.extend_from_slice(&32000u32.to_le_bytes());
    bytes.extend_from_slice(&2u16.to_le_bytes());
    bytes.extend_from_slice(&16u16.to_le_bytes());
    bytes.extend_from_slice(b"data");
    bytes.extend_from_slice(&8u32.to_le_bytes());
    for v in [0i16, 16384, -16384, 32767] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fixture.wav");
    std::fs::write(&path, &bytes).unwrap();
    let (samples, fs) = read_wav(&path).unwrap();
    assert_eq!(fs, 16000);
    assert_eq!(samples, vec![0.0, 0.5, -0.5, 32767.0 / 32768.0]);
}

#[test]
fn wav_rejects_stereo_and_bad_header() {
    let dir = tempfile::tempdir().unwrap();

    let path = dir.path().join("stereo.wav");
    let mut bytes = Vec::new();
    bytes.extend_from_slice(b"RIFF");
    bytes.extend_from_slice(&44u32.to_le_bytes());
    bytes.extend_from_slice(b"WAVE");
    bytes.extend_from_slice(b"fmt ");
    bytes.extend_from_slice(&16u32.to_le_bytes());
    bytes.extend_from_slice(&1u16.to_le_bytes());
    bytes.extend_from_slice(&2u16.to_le_bytes()); // stereo
    bytes.extend_from_slice(&8000u32.to_le_bytes());
    bytes.extend_from_slice(&32000u32.to_le_bytes());
    bytes.extend_from_slice(&4u16.to_le_bytes());
    bytes.extend_from_slice(&16u16.to_le_bytes());
    bytes.extend_from_slice(b"data");
    bytes.extend_from_slice(&0u32.to_le_bytes());
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        read_wav(&path),
        Err(MeetsimError::MonoRequired { channels: 2 })
    ));

    let bad = dir.path().join("bad.wav");
    std::fs::write(&bad, b"JUNKJUNKJUNK").unwrap();
    match read_wav(&bad) {
        Err(MeetsimError::WavParse { offset, .. }) => assert_eq!(offset, 0),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn manifest_round_trip() {
    let s = simulate_meeting(&default_cfg(21)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_manifest(&s, dir.path()).unwrap();
    let back = read_manifest(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(back.sample_rate, s.sample_rate);
    assert_eq!(back.utterances.len(), s.utterances.len());
    let q = 1.0 / 32768.0;
    for (u, v) in s.utterances.iter().zip(&back.utterances) {
        assert_eq!(u.start, v.start);
        assert_eq!(u.speaker_id, v.speaker_id);
        for (a, b) in u.source.iter().zip(&v.source) {
            assert!((a - b).abs() <= q);
        }
    }
    for (a, b) in s.mixture.iter().zip(&back.mixture) {
        assert!((a - b).abs() <= q);
    }
    assert!((back.overlap_ratio - s.overlap_ratio).abs() < 1e-9);
}

#[test]
fn manifest_missing_file_is_reported() {
    let s = simulate_meeting(&default_cfg(22)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_manifest(&s, dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("utt_0.wav")).unwrap();
    assert!(matches!(
        read_manifest(&dir.path().join("manifest.json")),
        Err(MeetsimError::MissingFile(_))
    ));
}

#[test]
fn dataset_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SimConfig {
        session_secs: 6.0,
        ..default_cfg(5)
    };
    let dirs = write_dataset(dir.path(), &cfg, 3).unwrap();
    assert_eq!(dirs.len(), 3);
    for (i, d) in dirs.iter().enumerate() {
        assert_eq!(d, &dir.path().join("sessions").join(format!("{i:04}")));
        assert!(d.join("mixture.wav").exists());
        assert!(d.join("manifest.json").exists());
    }
    // Different seeds per session.
    let a = read_manifest(&dirs[0].join("manifest.json")).unwrap();
    let b = read_manifest(&dirs[1].join("manifest.json")).unwrap();
    assert_ne!(a.mixture, b.mixture);
}

#[test]
fn config_validation() {
    let mut cfg = SimConfig::default();
    cfg.overlap_ratio = (0.8, 0.5);
    assert!(cfg.validate().is_err());
    let mut cfg = SimConfig::default();
    cfg.utterance_secs = (6.0, 8.0);
    cfg.session_secs = 10.0;
    assert!(cfg.validate().is_err());
}

use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::*;
use crate::rules::Side;
use rand::Rng;

/// A legal game of exactly `plies` moves (random playout, retried until long enough).
fn legal_game(plies: usize, seed: u64) -> Vec<Move> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    'outer: loop {
        let mut p = Position::startpos();
        let mut moves = Vec::new();
        while moves.len() < plies {
            let legal = p.legal_moves();
            if legal.is_empty() {
                continue 'outer;
            }
            let m = legal[rng.gen_range(0..legal.len())];
            moves.push(m);
            p = p.apply_unchecked(m);
        }
        return moves;
    }
}

fn record(plies: usize, seed: u64, termination: Termination) -> GameRecord {
    GameRecord { termination, ..GameRecord::new(legal_game(plies, seed), Outcome::Draw) }
}

#[test]
fn parses_minimal_document() {
    let r = parse_record("[Result \"1-0\"]\n h2e2 h9g7 1-0").unwrap();
    assert_eq!(r.moves.len(), 2);
    assert_eq!(r.result, Outcome::RedWins);
    assert_eq!(r.termination, Termination::Normal);
    assert_eq!(r.moves[0].to_string(), "h2e2");
}

#[test]
fn result_token_alone_is_enough() {
    let r = parse_record("h2e2 h9g7\n0-1\n").unwrap();
    assert_eq!(r.result, Outcome::BlackWins);
    let r = parse_record("[Event \"x\"]\n\nh2e2 1/2-1/2").unwrap();
    assert_eq!(r.result, Outcome::Draw);
    assert_eq!(r.metadata["Event"], "x");
}

#[test]
fn rejects_bad_syntax() {
    assert!(matches!(parse_record("[Result \"1-0\"]\n z9a0 1-0"), Err(RecordError::Parse(_))));
    assert!(matches!(parse_record("h2e2 h9g7"), Err(RecordError::Parse(_))));
    assert!(matches!(parse_record("[Result \"1-0\"]\nh2e2 0-1"), Err(RecordError::Parse(_))));
    assert!(matches!(parse_record("[Result 1-0]\nh2e2 1-0"), Err(RecordError::Parse(_))));
    assert!(matches!(parse_record("h2e2 1-0 h9g7 1-0"), Err(RecordError::Parse(_))));
    assert!(matches!(parse_record("h2e2 h9g7 *"), Err(RecordError::Parse(_))));
}

#[test]
fn illegal_fifth_move_is_reported_at_index_four() {
    let moves = legal_game(8, 1);
    let mut toks: Vec<String> = moves.iter().map(Move::to_string).collect();
    // no piece moves diagonally across the whole board
    let p = moves[..4].iter().fold(Position::startpos(), |p, &m| p.apply_unchecked(m));
    let bad = Move::new("a0".parse().unwrap(), "i9".parse().unwrap());
    assert!(!p.is_legal(bad));
    toks[4] = bad.to_string();
    let text = format!("{} 1-0", toks.join(" "));
    match parse_record(&text) {
        Err(RecordError::IllegalMove { index, mv }) => {
            assert_eq!(index, 4);
            assert_eq!(mv, "a0i9");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn disconnect_tag_sets_termination() {
    let text = format!("[Termination \"Disconnect\"]\n{} 0-1", legal_game(4, 2).iter().map(Move::to_string).collect::<Vec<_>>().join(" "));
    assert_eq!(parse_record(&text).unwrap().termination, Termination::Disconnect);
    let text = "[Termination \"normal\"]\nh2e2 0-1";
    let r = parse_record(text).unwrap();
    assert_eq!(r.termination, Termination::Normal);
    assert_eq!(parse_record(&serialize_record(&r)).unwrap(), r);
}

#[test]
fn cleaning_rules() {
    let input = vec![
        record(18, 1, Termination::Normal),
        record(24, 2, Termination::Disconnect),
        record(24, 3, Termination::Normal),
        record(20, 4, Termination::Normal),
        record(19, 5, Termination::Normal),
    ];
    let (kept, stats) = clean(input.clone());
    assert_eq!(kept, vec![input[2].clone(), input[3].clone()]);
    assert_eq!(stats, CleanStats { parsed: 5, dropped_short: 2, dropped_disconnect: 1, kept: 2 });
    let (again, _) = clean(kept.clone());
    assert_eq!(again, kept);
}

#[test]
fn sample_weight_values() {
    for total in [1, 2, 7, 1000] {
        assert_eq!(sample_weight(0, total).unwrap(), 0.5);
    }
    assert!((sample_weight(999, 1000).unwrap() - 1.3577212504682403).abs() < 1e-12);
    assert!((sample_weight(500, 1000).unwrap() - 1.0185380804345574).abs() < 1e-12);
    assert!(matches!(sample_weight(5, 5), Err(RecordError::Domain(_))));
    assert!(matches!(sample_weight(0, 0), Err(RecordError::Domain(_))));
    for total in [2, 3, 10, 57, 400] {
        for t in 1..total {
            assert!(sample_weight(t, total).unwrap() > sample_weight(t - 1, total).unwrap());
        }
    }
}

#[test]
fn nonpositive_custom_curves_are_rejected() {
    let p = CurveParams { c: 0.5, ..CurveParams::default() };
    assert!(matches!(p.weight(0, 10), Err(RecordError::Domain(_))));
}

#[test]
fn curve_sampling_two_step_ratio() {
    let s = StepSampler::new(vec![2], SamplingMode::Curve, CurveParams::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut counts = [0usize; 2];
    for _ in 0..100_000 {
        counts[s.sample(&mut rng).1] += 1;
    }
    let ratio = counts[1] as f64 / counts[0] as f64;
    let expected = sample_weight(1, 2).unwrap() / sample_weight(0, 2).unwrap();
    assert!((ratio / expected - 1.0).abs() < 0.02, "{ratio} vs {expected}");
}

#[test]
fn uniform_sampling_is_flat() {
    let s = StepSampler::new(vec![4], SamplingMode::Uniform, CurveParams::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut counts = [0usize; 4];
    for _ in 0..100_000 {
        counts[s.sample(&mut rng).1] += 1;
    }
    for c in counts {
        assert!((c as f64 / 100_000.0 - 0.25).abs() < 0.01);
    }
}

#[test]
fn curve_sampling_passes_chi_square() {
    let total = 30;
    let s = StepSampler::new(vec![total], SamplingMode::Curve, CurveParams::default()).unwrap();
    let w: Vec<f64> = (0..total).map(|t| sample_weight(t, total).unwrap()).collect();
    let z: f64 = w.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 100_000;
    let mut counts = vec![0usize; total];
    for _ in 0..n {
        counts[s.sample(&mut rng).1] += 1;
    }
    let stat: f64 = counts
        .iter()
        .zip(&w)
        .map(|(&c, &wi)| {
            let e = n as f64 * wi / z;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    let p = 1.0 - ChiSquared::new((total - 1) as f64).unwrap().cdf(stat);
    assert!(p > 0.01, "chi-square p = {p}");
}

#[test]
fn sampler_rejects_empty_inputs() {
    assert!(matches!(StepSampler::new(vec![], SamplingMode::Curve, CurveParams::default()), Err(RecordError::EmptyDataset)));
    assert!(matches!(StepSampler::new(vec![0], SamplingMode::Uniform, CurveParams::default()), Err(RecordError::Domain(_))));
}

#[test]
fn samples_replay_to_the_right_position() {
    let mut r = record(30, 7, Termination::Normal);
    r.result = Outcome::RedWins;
    let pts = draw_from_records(&[r.clone()], 200, SamplingMode::Curve, CurveParams::default(), 3).unwrap();
    for sp in &pts {
        assert_eq!(sp.chosen_move, r.moves[sp.t]);
        assert!(sp.position.is_legal(sp.chosen_move));
        let expected = if sp.position.side_to_move() == Side::Red { 1 } else { -1 };
        assert_eq!(sp.final_result, expected);
        assert_eq!(sp.total, 30);
    }
    assert!(draw_from_records(&[r], 0, SamplingMode::Curve, CurveParams::default(), 3).unwrap().is_empty());
}

#[test]
fn dataset_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("games.pgn");
    let records: Vec<GameRecord> = (0..5).map(|i| record(20 + 2 * i, 100 + i as u64, Termination::Normal)).collect();
    let written = write_dataset(&path, &records).unwrap();
    assert!(index_path(&path).exists());
    let opened = DatasetIndex::open(&path).unwrap();
    let built = DatasetIndex::build(&path).unwrap();
    assert_eq!(written, opened);
    assert_eq!(opened, built);
    assert!(opened.offsets().windows(2).all(|w| w[0] < w[1]));
    assert_eq!(opened.load_all().unwrap(), records);
    assert_eq!(opened.read_record(3).unwrap(), records[3]);
    assert!(opened.read_record(9).is_err());

    let a = draw_samples(&opened, 50, SamplingMode::Curve, 5).unwrap();
    let b = draw_samples(&opened, 50, SamplingMode::Curve, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, draw_from_records(&records, 50, SamplingMode::Curve, CurveParams::default(), 5).unwrap());
    assert!(draw_samples(&opened, 0, SamplingMode::Uniform, 5).unwrap().is_empty());
}

#[test]
fn corrupt_sidecar_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("games.pgn");
    write_dataset(&path, &[record(20, 1, Termination::Normal)]).unwrap();
    fs::write(index_path(&path), [0u8; 15]).unwrap();
    assert!(matches!(DatasetIndex::open(&path), Err(RecordError::Index(_))));
    let mut bytes = Vec::new();
    for (o, t) in [(10u64, 5u64), (10, 5)] {
        bytes.extend_from_slice(&o.to_le_bytes());
        bytes.extend_from_slice(&t.to_le_bytes());
    }
    fs::write(index_path(&path), bytes).unwrap();
    assert!(matches!(DatasetIndex::open(&path), Err(RecordError::Index(_))));
}

#[test]
fn split_documents_handles_blank_lines_inside_documents() {
    let text = "[Event \"a\"]\n\nh2e2 h9g7\n1-0\n\n[Event \"b\"]\nh2e2 0-1\n";
    let docs = split_documents(text);
    assert_eq!(docs.len(), 2);
    assert_eq!(docs[1].0 as usize, text.find("[Event \"b\"]").unwrap());
    assert!(parse_records(text).iter().all(Result::is_ok));
}

#[test]
fn annotator_takes_free_chariot() {
    let p = Position::from_fen("3k5/9/9/9/9/r8/9/9/9/R3K4 w").unwrap();
    let m = annotate_with_searcher(&p, &SearchConfig::depth(2)).unwrap();
    assert_eq!(m.to_string(), "a0a4");
}

#[test]
fn annotator_finds_mate() {
    let p = Position::from_fen("3k5/R8/9/9/9/9/8p/9/9/1R3K3 w").unwrap();
    let m = annotate_with_searcher(&p, &SearchConfig::depth(2)).unwrap();
    assert!(p.apply_unchecked(m).legal_moves().is_empty());
}

#[test]
fn annotator_is_deterministic_and_rejects_terminal() {
    let p = Position::startpos();
    let a = annotate_with_searcher(&p, &SearchConfig::depth(1)).unwrap();
    assert_eq!(a, annotate_with_searcher(&p, &SearchConfig::depth(1)).unwrap());
    let mated = Position::from_fen("3k5/9/9/9/9/9/9/9/4R4/3RK4 b").unwrap();
    assert!(matches!(annotate_with_searcher(&mated, &SearchConfig::depth(1)), Err(RecordError::TerminalPosition)));
}

#[test]
fn synthesized_games_are_valid_and_reproducible() {
    let cfg = SynthConfig { games: 3, draw_move_cap: 40, ..SynthConfig::default() };
    let a = synthesize_games(&cfg, 4).unwrap();
    assert_eq!(a, synthesize_games(&cfg, 4).unwrap());
    for r in &a {
        assert!(r.plies() <= 40);
        assert_eq!(parse_record(&serialize_record(r)).unwrap(), *r);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn serialize_then_parse_is_identity(
        plies in 0usize..60,
        seed in any::<u64>(),
        result in 0u8..3,
        disconnect in any::<bool>(),
        tags in proptest::collection::btree_map("[A-Z][a-z]{0,6}", "[ -!#-\\[\\]-~]{0,12}", 0..4),
    ) {
        let result = [Outcome::RedWins, Outcome::BlackWins, Outcome::Draw][result as usize];
        let mut tags = tags;
        tags.remove("Result");
        tags.remove("Termination");
        let r = GameRecord {
            moves: legal_game(plies, seed),
            result,
            termination: if disconnect { Termination::Disconnect } else { Termination::Normal },
            metadata: tags,
        };
        prop_assert_eq!(parse_record(&serialize_record(&r)).unwrap(), r);
    }

    #[test]
    fn clean_is_idempotent(lens in proptest::collection::vec((0usize..30, any::<bool>()), 0..8)) {
        let input: Vec<GameRecord> = lens
            .iter()
            .enumerate()
            .map(|(i, &(n, d))| record(n, i as u64, if d { Termination::Disconnect } else { Termination::Normal }))
            .collect();
        let (once, _) = clean(input);
        let (twice, stats) = clean(once.clone());
        prop_assert_eq!(&twice, &once);
        prop_assert_eq!(stats.kept, once.len());
    }
}

use tactile_bci::decoder::OutcomeKind;
use tactile_bci::live::{replay_attention, LiveEvent, LiveRun, RunMode};
use tactile_bci::pipeline::{OnlineDecoder, Pipeline, PipelineSettings};
use tactile_bci::synth::{Condition, SubjectProfile};
use tactile_bci::VibratorId;

fn setup() -> (Pipeline, OnlineDecoder, SubjectProfile) {
    let p = Pipeline::new(PipelineSettings { n_taps: 301, n_rounds: 10, calibration_runs_per_target: 2, ..Default::default() })
        .unwrap();
    let profile = SubjectProfile::preset(Condition::Single, 3).unwrap();
    let (model, _, _) = p.calibrate(&profile, 42, "live").unwrap();
    let dec = p.online_decoder(&model).unwrap();
    (p, dec, profile)
}

fn v(i: u8) -> VibratorId {
    VibratorId::new(i).unwrap()
}

fn drive(run: &mut LiveRun, p: &Pipeline, dec: &OnlineDecoder, mut on_step: impl FnMut(usize, &mut LiveRun)) -> Vec<LiveEvent> {
    let mut events = Vec::new();
    while !run.is_finished() {
        on_step(run.placed(), run);
        events.extend(run.step(p, dec).unwrap());
    }
    events
}

#[test]
fn live_continuous_matches_batch() {
    let (p, dec, profile) = setup();
    for seed in 0..3 {
        let mut run = LiveRun::new(&p, &profile, v(2), seed, RunMode::Continuous, Some(v(2))).unwrap();
        let events = drive(&mut run, &p, &dec, |_, _| {});
        let batch = replay_attention(&p, &dec, &profile, v(2), seed, run.attention_log()).unwrap();
        assert_eq!(run.decisions(), batch.decisions.as_slice());
        assert_eq!(run.outcome().unwrap(), &batch);
        let n_decisions = events.iter().filter(|e| matches!(e, LiveEvent::Decision { .. })).count();
        assert_eq!(n_decisions, 10 - 3);
        assert!(matches!(events.last(), Some(LiveEvent::RunEnd { .. })));
    }
}

#[test]
fn attention_switch_replays_identically() {
    let (p, dec, profile) = setup();
    let mut run = LiveRun::new(&p, &profile, v(1), 9, RunMode::Continuous, Some(v(1))).unwrap();
    drive(&mut run, &p, &dec, |k, r| {
        if k == 17 {
            r.set_attention(Some(v(3)));
        }
    });
    let log = run.attention_log();
    assert_eq!(log[16], Some(v(1)));
    assert_eq!(log[17], Some(v(3)));
    let batch = replay_attention(&p, &dec, &profile, v(1), 9, log).unwrap();
    assert_eq!(run.decisions(), batch.decisions.as_slice());
}

#[test]
fn online_mode_stops_at_first_detection_and_prefixes_batch() {
    let (p, dec, profile) = setup();
    for seed in 0..4 {
        let mut run = LiveRun::new(&p, &profile, v(4), 100 + seed, RunMode::Online, Some(v(4))).unwrap();
        let events = drive(&mut run, &p, &dec, |_, _| {});
        let out = run.outcome().unwrap().clone();
        let batch = replay_attention(&p, &dec, &profile, v(4), 100 + seed, run.attention_log()).unwrap();
        assert_eq!(out.result, batch.result);
        assert_eq!(out.attempts, batch.attempts);
        assert_eq!(run.decisions(), &batch.decisions[..run.decisions().len()]);
        if out.result != OutcomeKind::FailureExhausted {
            assert_eq!(run.decisions().len() as u32, out.attempts);
            assert!(run.decisions().last().unwrap().detected.is_some());
        }
        let ends = events.iter().filter(|e| matches!(e, LiveEvent::RunEnd { .. })).count();
        assert_eq!(ends, 1);
        assert!(run.step(&p, &dec).is_err());
    }
}

#[test]
fn events_follow_schedule_order() {
    let (p, dec, profile) = setup();
    let mut run = LiveRun::new(&p, &profile, v(3), 5, RunMode::Continuous, None).unwrap();
    let events = drive(&mut run, &p, &dec, |_, _| {});
    let schedule = run.schedule().clone();
    let mut next_stim = 0;
    let mut last_round_placed = 0;
    for e in &events {
        match e {
            LiveEvent::Stimulus { index, vibrator, onset_ms, round, .. } => {
                assert_eq!(*index, next_stim);
                assert_eq!(*vibrator, schedule.stimuli[*index].vibrator);
                assert_eq!(*onset_ms, schedule.stimuli[*index].onset_ms);
                last_round_placed = *round;
                next_stim += 1;
            }
            LiveEvent::Decision { decision, .. } => {
                // the newest round whose four epochs are all final
                assert!(decision.round_index + 1 >= 4);
                assert!(decision.round_index <= last_round_placed);
            }
            LiveEvent::Trace { cz_uv, fs_hz, .. } => {
                assert_eq!(cz_uv.len(), 40);
                assert_eq!(*fs_hz, 100.0);
                assert!(cz_uv.iter().all(|x| x.is_finite()));
            }
            LiveEvent::RunEnd { .. } => {}
        }
    }
    assert_eq!(next_stim, schedule.stimuli.len());
    let rounds: Vec<u32> = run.decisions().iter().map(|d| d.round_index).collect();
    assert_eq!(rounds, (3..10).collect::<Vec<u32>>());
}

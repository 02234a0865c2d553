use flexvar_core::scheduler::{
    aspect_schedule, inference_schedule, preset_sides, sample_training_draw, sample_training_schedule, ScaleSchedule,
    DEFAULT_STEPS_16,
};
use flexvar_tensor::rng;
use proptest::prelude::*;

fn assert_valid(s: &ScaleSchedule, full: (usize, usize)) {
    let sizes = s.sizes();
    assert_eq!(sizes[0], (1, 1));
    assert_eq!(*sizes.last().unwrap(), full);
    for w in sizes.windows(2) {
        let ((h0, w0), (h1, w1)) = (w[0], w[1]);
        assert!(h0 <= h1 && w0 <= w1 && h0 * w0 < h1 * w1, "{s}");
        assert!(h0 >= 1 && w0 >= 1);
    }
}

#[test]
fn ten_step_configuration_gives_six_to_ten_steps() {
    let mut r = rng::seeded(10);
    for _ in 0..2000 {
        let s = sample_training_schedule(&mut r, 10, (16, 16), 0.05, 4).unwrap();
        assert!((6..=10).contains(&s.steps()), "{s}");
        assert_valid(&s, (16, 16));
    }
}

#[test]
fn desk_drop_rate_matches_configuration() {
    let mut r = rng::seeded(3);
    let (mut dropped, mut seen) = (0usize, 0usize);
    for _ in 0..10_000 {
        let d = sample_training_draw(&mut r, 7, (8, 8), 0.05, 2).unwrap();
        // Once the cap is hit later intermediates are never offered a drop.
        let mut drops = 0;
        for &x in &d.dropped {
            if drops == 2 {
                break;
            }
            seen += 1;
            if x {
                dropped += 1;
                drops += 1;
            }
        }
    }
    let rate = dropped as f64 / seen as f64;
    assert!((rate - 0.05).abs() < 0.005, "{rate}");
}

#[test]
fn ten_step_on_8x8_matches_rescaled_list() {
    let s = inference_schedule("10-step", (8, 8)).unwrap();
    let mut expect: Vec<usize> = preset_sides("10-step")
        .unwrap()
        .iter()
        .map(|&v| ((v as f64 / 2.0).round_ties_even() as usize).max(1))
        .collect();
    expect.dedup();
    let got: Vec<usize> = s.sizes().iter().map(|&(h, _)| h).collect();
    assert_eq!(got, expect);
    assert_eq!(s.sizes()[0], (1, 1));
    assert_eq!(s.last(), (8, 8));
}

#[test]
fn aspect_on_16_square_is_the_ten_step_preset() {
    let s = aspect_schedule((16, 16), DEFAULT_STEPS_16).unwrap();
    assert_eq!(s, inference_schedule("10-step", (16, 16)).unwrap());
}

#[test]
fn training_preset_keeps_the_trained_grid() {
    let s = inference_schedule("7-step", (8, 8)).unwrap();
    assert_eq!(s.last(), (8, 8));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn training_schedules_are_valid(seed in any::<u64>(), side in 2usize..20, ratio in 1usize..3,
                                    extra in 0usize..8, drop_p in 0.0f64..1.0, max_drops in 0usize..5) {
        let full = (side, side * ratio);
        let max_steps = 2 + extra.min(side - 2);
        let mut r = rng::seeded(seed);
        let d = sample_training_draw(&mut r, max_steps, full, drop_p, max_drops).unwrap();
        assert_valid(&d.schedule, full);
        let drops = d.dropped.iter().filter(|&&x| x).count();
        prop_assert!(drops <= max_drops);
        prop_assert_eq!(d.schedule.steps(), max_steps - drops);
    }

    #[test]
    fn inference_schedules_are_valid(name in prop::sample::select(vec!["default", "6-step", "7-step", "8-step", "10-step", "13-step"]),
                                     h in 1usize..40, w in 1usize..40) {
        prop_assume!(h * w > 1);
        let s = inference_schedule(name, (h, w)).unwrap();
        assert_valid(&s, (h, w));
    }

    #[test]
    fn aspect_schedules_are_monotone(h in 1usize..40, w in 1usize..80) {
        prop_assume!(h * w > 1);
        let s = aspect_schedule((h, w), DEFAULT_STEPS_16).unwrap();
        assert_valid(&s, (h, w));
    }
}

#[test]
fn thirteen_step_on_16_grid() {
    let s = inference_schedule("13-step", (16, 16)).unwrap();
    let sides: Vec<usize> = s.sizes().iter().map(|&(h, _)| h).collect();
    assert_eq!(sides, [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 12, 14, 16]);
}

#[test]
fn default_on_8_grid_rounds_half_to_even() {
    let s = inference_schedule("default", (8, 8)).unwrap();
    let sides: Vec<usize> = s.sizes().iter().map(|&(h, _)| h).collect();
    assert_eq!(sides, [1, 2, 3, 4, 5, 6, 8]);
}

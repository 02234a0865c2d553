//! Scale schedules: the ordered token-grid sizes of one autoregressive pass.

use std::fmt;

use flexvar_tensor::rng::{Rng, RngExt};
use rand::seq::index;

use crate::error::{invalid, Result};

/// Side lengths of the named inference presets, defined on a 16x16 grid.
pub const PRESETS_16: &[(usize, &[usize])] = &[
    (6, &[1, 2, 4, 6, 10, 16]),
    (7, &[1, 2, 3, 5, 8, 11, 16]),
    (8, &[1, 2, 3, 4, 6, 10, 13, 16]),
    (9, &[1, 2, 3, 4, 5, 7, 10, 13, 16]),
    (10, &[1, 2, 3, 4, 5, 6, 8, 10, 13, 16]),
    (11, &[1, 2, 3, 4, 5, 6, 7, 9, 11, 13, 16]),
    (12, &[1, 2, 3, 4, 5, 6, 7, 8, 10, 12, 14, 16]),
    (13, &[1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 12, 14, 16]),
];

/// The default ten-step preset.
pub const DEFAULT_STEPS_16: &[usize] = &[1, 2, 3, 4, 5, 6, 8, 10, 13, 16];

/// Ordered `(h, w)` token-grid sizes, starting at 1x1 and strictly growing.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ScaleSchedule {
    sizes: Vec<(usize, usize)>,
}

impl ScaleSchedule {
    pub fn new(sizes: Vec<(usize, usize)>) -> Result<Self> {
        let first = *sizes.first().ok_or_else(|| invalid("empty schedule"))?;
        if first != (1, 1) {
            return Err(invalid(format!("schedule must start at 1x1, got {first:?}")));
        }
        for pair in sizes.windows(2) {
            let ((h0, w0), (h1, w1)) = (pair[0], pair[1]);
            if h1 < h0 || w1 < w0 || h1 * w1 <= h0 * w0 {
                return Err(invalid(format!(
                    "schedule not strictly increasing at {h0}x{w0} -> {h1}x{w1}"
                )));
            }
        }
        Ok(Self { sizes })
    }

    /// Square schedule from side lengths.
    pub fn square(sides: &[usize]) -> Result<Self> {
        Self::new(sides.iter().map(|&s| (s, s)).collect())
    }

    pub fn sizes(&self) -> &[(usize, usize)] {
        &self.sizes
    }

    pub fn steps(&self) -> usize {
        self.sizes.len()
    }

    pub fn last(&self) -> (usize, usize) {
        *self.sizes.last().expect("non-empty")
    }

    pub fn token_count(&self) -> usize {
        self.sizes.iter().map(|(h, w)| h * w).sum()
    }

    /// First `n` steps.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.sizes.len() {
            return Err(invalid(format!(
                "prefix of {n} steps from a {}-step schedule",
                self.sizes.len()
            )));
        }
        Ok(Self {
            sizes: self.sizes[..n].to_vec(),
        })
    }

    pub fn position(&self, size: (usize, usize)) -> Option<usize> {
        self.sizes.iter().position(|&s| s == size)
    }
}

impl fmt::Display for ScaleSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.sizes.iter().map(|(h, w)| format!("{h}x{w}")).collect();
        f.write_str(&parts.join(","))
    }
}

/// Outcome of one training-schedule draw, with the drop decision made for
/// each sampled intermediate scale.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingDraw {
    pub schedule: ScaleSchedule,
    pub intermediates: Vec<(usize, usize)>,
    pub dropped: Vec<bool>,
}

fn proportional(side: usize, full: (usize, usize)) -> (usize, usize) {
    let w = (side as f64 * full.1 as f64 / full.0 as f64).round() as usize;
    (side, w.clamp(1, full.1))
}

/// Random training schedule: 1x1 first, `full` last, `max_steps - 2`
/// intermediate sides drawn without replacement from `2..h`, then each
/// intermediate dropped with probability `drop_p` (left to right) until
/// `max_drops` have been dropped.
pub fn sample_training_schedule(
    rng: &mut Rng,
    max_steps: usize,
    full: (usize, usize),
    drop_p: f64,
    max_drops: usize,
) -> Result<ScaleSchedule> {
    Ok(sample_training_draw(rng, max_steps, full, drop_p, max_drops)?.schedule)
}

pub fn sample_training_draw(
    rng: &mut Rng,
    max_steps: usize,
    full: (usize, usize),
    drop_p: f64,
    max_drops: usize,
) -> Result<TrainingDraw> {
    if max_steps < 2 {
        return Err(invalid(format!("max_steps must be at least 2, got {max_steps}")));
    }
    if full.0 < 2 || full.1 < 2 {
        return Err(invalid(format!("full grid {full:?} is smaller than 2x2")));
    }
    if !(0.0..=1.0).contains(&drop_p) {
        return Err(invalid(format!("drop probability {drop_p} outside [0, 1]")));
    }
    let available = full.0 - 2;
    let wanted = max_steps - 2;
    if wanted > available {
        return Err(invalid(format!(
            "{max_steps} steps need {wanted} intermediate sizes but a {}x{} grid has {available}",
            full.0, full.1
        )));
    }
    let mut sides: Vec<usize> = index::sample(rng, available, wanted)
        .into_iter()
        .map(|i| i + 2)
        .collect();
    sides.sort_unstable();
    let intermediates: Vec<(usize, usize)> = sides.iter().map(|&s| proportional(s, full)).collect();

    let mut dropped = vec![false; intermediates.len()];
    let mut drops = 0;
    for d in dropped.iter_mut() {
        if drops == max_drops {
            break;
        }
        if rng.gen::<f64>() < drop_p {
            *d = true;
            drops += 1;
        }
    }

    let mut sizes = vec![(1, 1)];
    sizes.extend(
        intermediates
            .iter()
            .zip(&dropped)
            .filter(|(_, &d)| !d)
            .map(|(&s, _)| s),
    );
    sizes.push(full);
    Ok(TrainingDraw {
        schedule: ScaleSchedule::new(sizes)?,
        intermediates,
        dropped,
    })
}

/// Side lengths of a named preset (`"N-step"`, or `"default"`), on the
/// 16-grid.
pub fn preset_sides(name: &str) -> Result<&'static [usize]> {
    if name == "default" {
        return Ok(DEFAULT_STEPS_16);
    }
    let steps: usize = name
        .strip_suffix("-step")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| invalid(format!("unknown schedule name {name:?}")))?;
    PRESETS_16
        .iter()
        .find(|(n, _)| *n == steps)
        .map(|(_, s)| *s)
        .ok_or_else(|| invalid(format!("no {steps}-step preset")))
}

/// Named preset on an arbitrary grid. On 16x16 the preset is used verbatim;
/// otherwise each side `s` becomes `round(s * h / 16)` (ties to even),
/// consecutive duplicates collapse, and the endpoints are forced to 1x1 and
/// the full grid.
pub fn inference_schedule(name: &str, full: (usize, usize)) -> Result<ScaleSchedule> {
    let sides = preset_sides(name)?;
    if full.0 == 0 || full.1 == 0 {
        return Err(invalid(format!("empty target grid {full:?}")));
    }
    let rescale = |s: usize, n: usize| ((s as f64 * n as f64 / 16.0).round_ties_even() as usize).max(1);
    let mut sizes: Vec<(usize, usize)> = sides
        .iter()
        .map(|&s| (rescale(s, full.0), rescale(s, full.1)))
        .collect();
    sizes[0] = (1, 1);
    *sizes.last_mut().expect("non-empty") = full;
    sizes.dedup();
    ScaleSchedule::new(sizes)
}

/// One step of an aspect-ratio schedule: `(max(1, h*i/16), max(1, w*i/16))`
/// with integer truncation.
pub fn aspect_size(target: (usize, usize), i: usize) -> (usize, usize) {
    ((target.0 * i / 16).max(1), (target.1 * i / 16).max(1))
}

/// Schedule for an arbitrary `h x w` latent from base side lengths over 16.
/// Consecutive duplicates collapse, the last step is forced to the target,
/// and a 1x1 start is prepended when the first rounded size is larger.
pub fn aspect_schedule(target: (usize, usize), base_steps: &[usize]) -> Result<ScaleSchedule> {
    if target.0 == 0 || target.1 == 0 {
        return Err(invalid(format!("empty target grid {target:?}")));
    }
    let mut sizes: Vec<(usize, usize)> = base_steps.iter().map(|&i| aspect_size(target, i)).collect();
    sizes.dedup();
    match sizes.last_mut() {
        Some(last) => *last = target,
        None => sizes.push(target),
    }
    sizes.dedup();
    if sizes[0] != (1, 1) {
        sizes.insert(0, (1, 1));
    }
    ScaleSchedule::new(sizes)
}

/// Parses a schedule from a preset name or an explicit list: comma-separated
/// `HxW` pairs or bare side lengths for square grids.
pub fn parse_schedule(text: &str, full: (usize, usize)) -> Result<ScaleSchedule> {
    let text = text.trim();
    if text.ends_with("-step") || text == "default" {
        return inference_schedule(text, full);
    }
    let mut sizes = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        let pair = match part.split_once(['x', 'X']) {
            Some((h, w)) => (h.trim().parse(), w.trim().parse()),
            None => (part.parse(), part.parse()),
        };
        match pair {
            (Ok(h), Ok(w)) => sizes.push((h, w)),
            _ => return Err(invalid(format!("cannot parse schedule entry {part:?}"))),
        }
    }
    ScaleSchedule::new(sizes)
}

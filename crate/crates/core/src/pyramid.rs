//! Multi-scale latent and token containers.

use flexvar_tensor::Tensor;

use crate::error::{invalid, Result};
use crate::scheduler::ScaleSchedule;

/// What each autoregressive step predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PredictionMode {
    /// The quantized latent of the current scale itself.
    Gt,
    /// The quantized difference between the current-scale latent and the
    /// upsampled accumulation of earlier steps.
    Residual,
}

impl PredictionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Gt => "gt",
            Self::Residual => "residual",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gt" => Ok(Self::Gt),
            "residual" => Ok(Self::Residual),
            other => Err(invalid(format!("unknown mode {other:?} (expected gt|residual)"))),
        }
    }
}

/// Codebook indices for one `h x w` grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenMap {
    pub h: usize,
    pub w: usize,
    pub indices: Vec<usize>,
}

impl TokenMap {
    pub fn new(h: usize, w: usize, indices: Vec<usize>) -> Result<Self> {
        if indices.len() != h * w {
            return Err(invalid(format!("{} indices for a {h}x{w} grid", indices.len())));
        }
        Ok(Self { h, w, indices })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn get(&self, i: usize, j: usize) -> usize {
        self.indices[i * self.w + j]
    }
}

/// Per-scale token maps for one image under one schedule.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenPyramid {
    pub levels: Vec<TokenMap>,
    pub mode: PredictionMode,
}

impl TokenPyramid {
    pub fn new(mode: PredictionMode) -> Self {
        Self {
            levels: Vec::new(),
            mode,
        }
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn sizes(&self) -> Vec<(usize, usize)> {
        self.levels.iter().map(TokenMap::size).collect()
    }

    /// Checks that level sizes equal the first `len` steps of `schedule`.
    pub fn check_prefix_of(&self, schedule: &ScaleSchedule) -> Result<()> {
        let sizes = self.sizes();
        if sizes.len() > schedule.steps() || sizes[..] != schedule.sizes()[..sizes.len()] {
            return Err(invalid(format!(
                "token pyramid grids {sizes:?} do not follow schedule {schedule}"
            )));
        }
        Ok(())
    }

    /// All indices, scale after scale.
    pub fn flat(&self) -> Vec<usize> {
        self.levels.iter().flat_map(|l| l.indices.iter().copied()).collect()
    }

    /// One line per scale, space-separated indices in row-major order.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for l in &self.levels {
            let line: Vec<String> = l.indices.iter().map(|i| i.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Continuous latent maps at increasing grid sizes; the last is the full grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPyramid<T> {
    pub levels: Vec<Tensor<T>>,
}

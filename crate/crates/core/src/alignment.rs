//! Monotonic alignment search between tokens and frames.
//!
//! The forward pass fills `Q[i][j]`, the best total log-likelihood of
//! aligning frames `0..=j` with frame `j` on token `i`, optionally
//! perturbing every cell with Gaussian noise scaled by the spread of the
//! grid. Backtracking from the last cell recovers per-token durations.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::numerics::{Rng, Tensor};

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;

/// Annealing start value for the search noise.
pub const NOISE_START: f64 = 0.01;
/// Decrease of the noise scale per global step.
pub const NOISE_DECREMENT: f64 = 2e-6;

/// Noise scale at global step `step`: linear decay from 0.01, floored at 0.
///
/// Computed in integer millionths and divided once, so every value is the
/// correctly rounded decimal rather than the result of a float cancellation.
pub fn noise_scale_at(step: u64) -> f64 {
    const START_MICRO: u64 = 10_000;
    const DECREMENT_MICRO: u64 = 2;
    START_MICRO.saturating_sub(step.saturating_mul(DECREMENT_MICRO)) as f64 / 1e6
}

/// Token-by-frame log-likelihood matrix. Only the top-left
/// `valid_tokens x valid_frames` block takes part in any computation.
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbGrid {
    values: Tensor,
    valid_tokens: usize,
    valid_frames: usize,
}

impl LogProbGrid {
    pub fn new(values: Tensor) -> Result<Self> {
        let (i, j) = (values.rows(), values.cols());
        Self::with_valid(values, i, j)
    }

    pub fn with_valid(values: Tensor, valid_tokens: usize, valid_frames: usize) -> Result<Self> {
        if values.rank() != 2 {
            return Err(contract("log-prob grid must be rank 2"));
        }
        if valid_tokens > values.rows() || valid_frames > values.cols() {
            return Err(contract(alloc::format!(
                "valid region {valid_tokens}x{valid_frames} exceeds grid {:?}",
                values.shape()
            )));
        }
        if valid_tokens == 0 || valid_frames == 0 {
            return Err(contract("empty valid region"));
        }
        let grid = Self {
            values,
            valid_tokens,
            valid_frames,
        };
        for i in 0..valid_tokens {
            for j in 0..valid_frames {
                if !grid.get(i, j).is_finite() {
                    return Err(Error::NonFinite {
                        op: "log_prob_grid",
                    });
                }
            }
        }
        Ok(grid)
    }

    pub fn valid_tokens(&self) -> usize {
        self.valid_tokens
    }

    pub fn valid_frames(&self) -> usize {
        self.valid_frames
    }

    pub fn get(&self, token: usize, frame: usize) -> f64 {
        self.values.at(token, frame)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Population standard deviation over the valid region.
    pub fn valid_std(&self) -> f64 {
        let n = (self.valid_tokens * self.valid_frames) as f64;
        let cells = || {
            (0..self.valid_tokens).flat_map(move |i| (0..self.valid_frames).map(move |j| (i, j)))
        };
        let mean = cells().map(|(i, j)| self.get(i, j)).sum::<f64>() / n;
        let var = cells()
            .map(|(i, j)| {
                let d = self.get(i, j) - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        libm::sqrt(var)
    }
}

/// Per-token frame counts of a monotonic, surjective alignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment {
    durations: Vec<usize>,
}

impl Alignment {
    pub fn from_durations(durations: Vec<usize>) -> Result<Self> {
        if durations.is_empty() || durations.contains(&0) {
            return Err(contract("every token needs at least one frame"));
        }
        Ok(Self { durations })
    }

    pub fn durations(&self) -> &[usize] {
        &self.durations
    }

    pub fn frames(&self) -> usize {
        self.durations.iter().sum()
    }

    /// Token index of every frame.
    pub fn frame_tokens(&self) -> Vec<usize> {
        self.durations
            .iter()
            .enumerate()
            .flat_map(|(i, &d)| core::iter::repeat_n(i, d))
            .collect()
    }

    /// `(tokens, frames)` 0/1 matrix with a one at `(A(j), j)`.
    pub fn to_matrix(&self, tokens: usize) -> Tensor {
        let frames = self.frames();
        let mut t = Tensor::zeros(&[tokens, frames]);
        for (j, i) in self.frame_tokens().into_iter().enumerate() {
            t.data_mut()[i * frames + j] = 1.0;
        }
        t
    }

    /// `sum_j P[A(j), j]`, accumulated in frame order.
    pub fn score(&self, grid: &LogProbGrid) -> f64 {
        self.frame_tokens()
            .into_iter()
            .enumerate()
            .fold(0.0, |acc, (j, i)| acc + grid.get(i, j))
    }
}

/// Diagonal-Gaussian log density of every frame under every token.
///
/// `frames` is `(J, C)`, `mean` and `std` are `(I, C)`; the result is `(I, J)`.
pub fn log_prob_grid(frames: &Tensor, mean: &Tensor, std: &Tensor) -> Result<LogProbGrid> {
    if mean.shape() != std.shape()
        || mean.rank() != 2
        || frames.rank() != 2
        || frames.cols() != mean.cols()
    {
        return Err(Error::ShapeMismatch {
            op: "log_prob_grid",
            lhs: frames.shape().to_vec(),
            rhs: mean.shape().to_vec(),
        });
    }
    if std.data().iter().any(|s| s.is_nan() || *s <= 0.0) {
        return Err(contract("standard deviations must be strictly positive"));
    }
    let (tokens, frames_n, channels) = (mean.rows(), frames.rows(), mean.cols());
    let mut data = vec![0.0; tokens * frames_n];
    for i in 0..tokens {
        for j in 0..frames_n {
            let mut acc = 0.0;
            for c in 0..channels {
                let s = std.at(i, c);
                let d = frames.at(j, c) - mean.at(i, c);
                acc += -libm::log(s) - HALF_LOG_2PI - d * d / (2.0 * s * s);
            }
            data[i * frames_n + j] = acc;
        }
    }
    LogProbGrid::new(Tensor::new(&[tokens, frames_n], data)?)
}

/// Best monotonic alignment under `grid`, with search noise of the given scale.
///
/// Returns the alignment and the final `Q` value, which includes any noise.
/// With `noise_scale == 0` the generator is not touched and the result is the
/// exact maximizer of [`Alignment::score`]. On exact ties the search prefers
/// advancing to the next token.
pub fn mas_search(grid: &LogProbGrid, noise_scale: f64, rng: &mut Rng) -> Result<(Alignment, f64)> {
    let (ti, tj) = (grid.valid_tokens, grid.valid_frames);
    if ti > tj {
        return Err(Error::InfeasibleAlignment {
            tokens: ti,
            frames: tj,
        });
    }
    if noise_scale.is_nan() || noise_scale < 0.0 {
        return Err(contract("noise scale must be non-negative"));
    }
    let spread = if noise_scale > 0.0 {
        grid.valid_std() * noise_scale
    } else {
        0.0
    };

    let mut q = vec![f64::NEG_INFINITY; ti * tj];
    // true where the best predecessor of (i, j) is (i-1, j-1)
    let mut advanced = vec![false; ti * tj];
    for j in 0..tj {
        for i in 0..ti {
            let eps = if spread > 0.0 {
                rng.normal() * spread
            } else {
                0.0
            };
            if i > j {
                continue;
            }
            let p = grid.get(i, j) + eps;
            if j == 0 {
                q[0] = p;
                continue;
            }
            let stay = q[i * tj + j - 1];
            let diag = if i > 0 {
                q[(i - 1) * tj + j - 1]
            } else {
                f64::NEG_INFINITY
            };
            let (best, adv) = if i > 0 && diag >= stay {
                (diag, true)
            } else {
                (stay, false)
            };
            q[i * tj + j] = best + p;
            advanced[i * tj + j] = adv;
        }
    }

    let mut durations = vec![0usize; ti];
    let mut i = ti - 1;
    for j in (0..tj).rev() {
        durations[i] += 1;
        if j > 0 && advanced[i * tj + j] {
            i -= 1;
        }
    }
    debug_assert_eq!(i, 0);
    Ok((Alignment::from_durations(durations)?, q[ti * tj - 1]))
}

pub const BRUTE_FORCE_MAX_TOKENS: usize = 6;
pub const BRUTE_FORCE_MAX_FRAMES: usize = 10;

/// Exhaustive search over every composition of the frames into per-token
/// durations. Oracle for [`mas_search`] on small grids.
pub fn brute_force_align(grid: &LogProbGrid) -> Result<(Alignment, f64)> {
    let (ti, tj) = (grid.valid_tokens, grid.valid_frames);
    if ti > BRUTE_FORCE_MAX_TOKENS || tj > BRUTE_FORCE_MAX_FRAMES {
        return Err(Error::SizeGuard {
            tokens: ti,
            frames: tj,
            max_tokens: BRUTE_FORCE_MAX_TOKENS,
            max_frames: BRUTE_FORCE_MAX_FRAMES,
        });
    }
    if ti > tj {
        return Err(Error::InfeasibleAlignment {
            tokens: ti,
            frames: tj,
        });
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut current = Vec::with_capacity(ti);
    compositions(tj, ti, &mut current, &mut |parts| {
        let mut total = 0.0;
        let mut j = 0;
        for (i, &d) in parts.iter().enumerate() {
            for _ in 0..d {
                total += grid.get(i, j);
                j += 1;
            }
        }
        if best.as_ref().is_none_or(|(_, b)| total > *b) {
            best = Some((parts.to_vec(), total));
        }
    });
    let (durations, score) = best.expect("at least one composition exists");
    Ok((Alignment::from_durations(durations)?, score))
}

fn compositions(
    total: usize,
    parts: usize,
    current: &mut Vec<usize>,
    visit: &mut dyn FnMut(&[usize]),
) {
    if parts == 1 {
        current.push(total);
        visit(current);
        current.pop();
        return;
    }
    for first in 1..=total - (parts - 1) {
        current.push(first);
        compositions(total - first, parts - 1, current, visit);
        current.pop();
    }
}

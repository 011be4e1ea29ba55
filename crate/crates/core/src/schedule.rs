//! Forward diffusion bookkeeping: beta schedule, cumulative alpha products and
//! the closed-form posterior variances, plus batched forward noising.
//!
//! Steps are 1-indexed; step 0 means clean data. `alpha_bar(0) = 1` so the
//! products and the posterior coefficients below never special-case the first
//! step: `posterior_variance(1)` comes out exactly 0.

use ndarray::{Array2, ArrayView2};

use crate::error::{Result, SedaError};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct NoiseSchedule<T> {
    total_steps: usize,
    betas: Vec<T>,
    alphas: Vec<T>,
    /// `alpha_bars[i]` is the product of `alpha_1..=alpha_i`; entry 0 is 1.
    alpha_bars: Vec<T>,
    one_minus_alpha_bars: Vec<T>,
    sqrt_alpha_bars: Vec<T>,
    sqrt_one_minus_alpha_bars: Vec<T>,
    posterior_variances: Vec<T>,
}

impl<T: Scalar> NoiseSchedule<T> {
    /// Linear beta schedule, endpoints inclusive. `total_steps = 1` keeps just
    /// `beta_start`.
    pub fn linear(total_steps: usize, beta_start: T, beta_end: T) -> Result<Self> {
        if total_steps == 0 {
            return Err(SedaError::invalid("schedule needs at least one step"));
        }
        if !(beta_start > T::zero() && beta_end < T::one() && beta_start <= beta_end) {
            return Err(SedaError::invalid(format!(
                "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas = if total_steps == 1 {
            vec![beta_start]
        } else {
            let denom = T::from_usize(total_steps - 1);
            (0..total_steps)
                .map(|k| beta_start + (beta_end - beta_start) * T::from_usize(k) / denom)
                .collect()
        };
        Self::from_betas(betas)
    }

    /// Builds every derived table from an explicit beta sequence.
    pub fn from_betas(betas: Vec<T>) -> Result<Self> {
        if betas.is_empty() {
            return Err(SedaError::invalid("schedule needs at least one step"));
        }
        if let Some(bad) = betas.iter().find(|b| !(**b > T::zero() && **b < T::one())) {
            return Err(SedaError::invalid(format!(
                "every beta must lie in (0, 1), got {bad}"
            )));
        }
        let total_steps = betas.len();
        let alphas: Vec<T> = betas.iter().map(|&b| T::one() - b).collect();

        let mut alpha_bars = Vec::with_capacity(total_steps + 1);
        alpha_bars.push(T::one());
        let mut running = T::one();
        for &a in &alphas {
            running = running * a;
            alpha_bars.push(running);
        }

        // 1 - alpha_bar_i accumulated via the identity
        // 1 - alpha_bar_i = (1 - alpha_bar_{i-1}) + alpha_bar_{i-1} * beta_i,
        // which avoids cancellation near alpha_bar = 1 and makes the entry at
        // i = 1 equal beta_1 bit for bit.
        let mut one_minus_alpha_bars = Vec::with_capacity(total_steps + 1);
        one_minus_alpha_bars.push(T::zero());
        for (idx, &b) in betas.iter().enumerate() {
            let next = one_minus_alpha_bars[idx] + alpha_bars[idx] * b;
            one_minus_alpha_bars.push(next);
        }

        let sqrt_alpha_bars: Vec<T> = alpha_bars.iter().map(|a| a.sqrt()).collect();
        let sqrt_one_minus_alpha_bars: Vec<T> =
            one_minus_alpha_bars.iter().map(|a| a.sqrt()).collect();

        let posterior_variances: Vec<T> = (1..=total_steps)
            .map(|i| one_minus_alpha_bars[i - 1] / one_minus_alpha_bars[i] * betas[i - 1])
            .collect();

        Ok(NoiseSchedule {
            total_steps,
            betas,
            alphas,
            alpha_bars,
            one_minus_alpha_bars,
            sqrt_alpha_bars,
            sqrt_one_minus_alpha_bars,
            posterior_variances,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    /// `beta_i` for `i` in `1..=total_steps`.
    pub fn beta(&self, i: usize) -> T {
        assert!(i >= 1 && i <= self.total_steps, "step {i} out of range");
        self.betas[i - 1]
    }

    pub fn alpha(&self, i: usize) -> T {
        assert!(i >= 1 && i <= self.total_steps, "step {i} out of range");
        self.alphas[i - 1]
    }

    /// `alpha_bar_i` for `i` in `0..=total_steps`.
    pub fn alpha_bar(&self, i: usize) -> T {
        assert!(i <= self.total_steps, "step {i} out of range");
        self.alpha_bars[i]
    }

    pub fn sqrt_alpha_bar(&self, i: usize) -> T {
        assert!(i <= self.total_steps, "step {i} out of range");
        self.sqrt_alpha_bars[i]
    }

    /// `1 - alpha_bar_i`, accumulated without cancellation; entry 1 equals
    /// `beta_1` exactly.
    pub fn one_minus_alpha_bar(&self, i: usize) -> T {
        assert!(i <= self.total_steps, "step {i} out of range");
        self.one_minus_alpha_bars[i]
    }

    pub fn sqrt_one_minus_alpha_bar(&self, i: usize) -> T {
        assert!(i <= self.total_steps, "step {i} out of range");
        self.sqrt_one_minus_alpha_bars[i]
    }

    /// Variance of the reverse-process posterior at step `i`; exactly 0 at
    /// `i = 1`.
    pub fn posterior_variance(&self, i: usize) -> T {
        assert!(i >= 1 && i <= self.total_steps, "step {i} out of range");
        self.posterior_variances[i - 1]
    }

    pub fn betas(&self) -> &[T] {
        &self.betas
    }

    /// Noise each row of `x0` to its per-row step: row b becomes
    /// `sqrt(alpha_bar_i) * x0 + sqrt(1 - alpha_bar_i) * noise`. Step 0 copies
    /// the row unchanged.
    pub fn forward_noising(
        &self,
        x0: ArrayView2<T>,
        steps: &[usize],
        noise: ArrayView2<T>,
    ) -> Result<Array2<T>> {
        if x0.dim() != noise.dim() {
            return Err(SedaError::invalid(format!(
                "x0 shape {:?} does not match noise shape {:?}",
                x0.dim(),
                noise.dim()
            )));
        }
        if steps.len() != x0.nrows() {
            return Err(SedaError::invalid(format!(
                "{} steps for {} rows",
                steps.len(),
                x0.nrows()
            )));
        }
        if let Some(&bad) = steps.iter().find(|&&i| i > self.total_steps) {
            return Err(SedaError::invalid(format!(
                "step {bad} exceeds schedule length {}",
                self.total_steps
            )));
        }
        let mut out = Array2::zeros(x0.raw_dim());
        for (b, &i) in steps.iter().enumerate() {
            let sa = self.sqrt_alpha_bars[i];
            let sn = self.sqrt_one_minus_alpha_bars[i];
            let x_row = x0.row(b);
            let n_row = noise.row(b);
            let mut o_row = out.row_mut(b);
            for c in 0..x0.ncols() {
                o_row[c] = sa * x_row[c] + sn * n_row[c];
            }
        }
        Ok(out)
    }
}

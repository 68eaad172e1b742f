//! Log-normal shadowing path-loss model.
//!
//! Received power follows the log-distance law anchored at the free-space loss
//! of a reference distance `d0`:
//!
//! ```text
//! PL(d) = PL_F(d0) + 10 eta log10(d / d0) + X,   X ~ N(0, sigma_db^2)
//! PL_F(d) = 20 log10(4 pi d / lambda)
//! ```
//!
//! Inverting the noisy loss yields a distance estimate that is log-normally
//! distributed around the true distance.
//!
//! Randomness comes from [`SeededRng`] (ChaCha with 8 rounds). Independent
//! streams are derived from a root seed with [`stream_rng`], so Monte-Carlo
//! results do not depend on scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::{LN_10, PI};
use thiserror::Error;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Default shadowing standard deviation at 0 dB SNR.
pub const DEFAULT_SIGMA_REF_DB: f64 = 8.0;

/// The generator used for every experiment.
pub type SeededRng = ChaCha8Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("distance {0} is not a positive finite number")]
    NonPositiveDistance(f64),
    #[error("invalid channel parameter {name} = {value}")]
    InvalidParameter { name: &'static str, value: f64 },
}

/// Parameters of the log-distance shadowing model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelModel {
    d0: f64,
    eta: f64,
    sigma_db: f64,
    wavelength: f64,
}

fn check(name: &'static str, value: f64, ok: bool) -> Result<(), ChannelError> {
    if value.is_finite() && ok {
        Ok(())
    } else {
        Err(ChannelError::InvalidParameter { name, value })
    }
}

impl ChannelModel {
    pub fn new(d0: f64, eta: f64, sigma_db: f64, wavelength: f64) -> Result<Self, ChannelError> {
        check("d0", d0, d0 > 0.0)?;
        check("eta", eta, eta > 0.0)?;
        check("sigma_db", sigma_db, sigma_db >= 0.0)?;
        check("wavelength", wavelength, wavelength > 0.0)?;
        Ok(Self { d0, eta, sigma_db, wavelength })
    }

    /// Model for a carrier at `frequency_hz`.
    pub fn at_frequency(d0: f64, eta: f64, sigma_db: f64, frequency_hz: f64) -> Result<Self, ChannelError> {
        check("frequency_hz", frequency_hz, frequency_hz > 0.0)?;
        Self::new(d0, eta, sigma_db, SPEED_OF_LIGHT / frequency_hz)
    }

    pub fn d0(&self) -> f64 {
        self.d0
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn sigma_db(&self) -> f64 {
        self.sigma_db
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }

    pub fn with_sigma_db(self, sigma_db: f64) -> Result<Self, ChannelError> {
        Self::new(self.d0, self.eta, sigma_db, self.wavelength)
    }

    pub fn with_eta(self, eta: f64) -> Result<Self, ChannelError> {
        Self::new(self.d0, eta, self.sigma_db, self.wavelength)
    }

    /// Standard deviation of `ln(d_est)`: `sigma ln(10) / (10 eta)`.
    pub fn log_distance_sigma(&self) -> f64 {
        self.sigma_db * LN_10 / (10.0 * self.eta)
    }

    /// Variance of the squared distance estimate for an anchor whose
    /// log-normal location parameter is `ln(d)`:
    /// `e^{4 mu} (e^{8 s^2} - e^{4 s^2})`.
    pub fn squared_distance_variance(&self, d: f64) -> f64 {
        let s2 = self.log_distance_sigma().powi(2);
        (4.0 * d.ln()).exp() * ((8.0 * s2).exp() - (4.0 * s2).exp())
    }
}

fn check_distance(d: f64) -> Result<(), ChannelError> {
    if d.is_finite() && d > 0.0 {
        Ok(())
    } else {
        Err(ChannelError::NonPositiveDistance(d))
    }
}

/// Free-space loss `20 log10(4 pi d / lambda)` in dB.
pub fn free_space_path_loss(d: f64, model: &ChannelModel) -> Result<f64, ChannelError> {
    check_distance(d)?;
    Ok(20.0 * (4.0 * PI * d / model.wavelength).log10())
}

/// Deterministic part of the log-distance model.
pub fn mean_path_loss(d: f64, model: &ChannelModel) -> Result<f64, ChannelError> {
    check_distance(d)?;
    Ok(free_space_path_loss(model.d0, model)? + 10.0 * model.eta * (d / model.d0).log10())
}

/// One shadowed path-loss draw.
///
/// Distances below `d0` are accepted and extrapolate the log-distance law.
pub fn path_loss<R: Rng + ?Sized>(d: f64, model: &ChannelModel, rng: &mut R) -> Result<f64, ChannelError> {
    let mean = mean_path_loss(d, model)?;
    if model.sigma_db == 0.0 {
        return Ok(mean);
    }
    let normal = Normal::new(0.0, model.sigma_db).expect("sigma validated at construction");
    Ok(mean + normal.sample(rng))
}

/// Distance implied by a path loss under `model`.
pub fn invert_distance(pl: f64, model: &ChannelModel) -> f64 {
    let reference = 20.0 * (4.0 * PI * model.d0 / model.wavelength).log10();
    model.d0 * 10f64.powf((pl - reference) / (10.0 * model.eta))
}

/// A path-loss observation and the distance it implies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RssMeasurement {
    pub path_loss_db: f64,
    pub est_distance: f64,
}

impl RssMeasurement {
    pub fn from_path_loss(path_loss_db: f64, model: &ChannelModel) -> Self {
        Self { path_loss_db, est_distance: invert_distance(path_loss_db, model) }
    }

    /// Draws a loss over `truth` and inverts it with `assumed`. The two
    /// models differ when testing robustness to a mis-specified exponent.
    pub fn observe<R: Rng + ?Sized>(
        d: f64,
        truth: &ChannelModel,
        assumed: &ChannelModel,
        rng: &mut R,
    ) -> Result<Self, ChannelError> {
        Ok(Self::from_path_loss(path_loss(d, truth, rng)?, assumed))
    }
}

/// Shadowing standard deviation used at a given SNR:
/// `sigma_ref * 10^(-snr / 20)`.
pub fn shadowing_sigma_for_snr(snr_db: f64, sigma_ref_db: f64) -> f64 {
    sigma_ref_db * 10f64.powf(-snr_db / 20.0)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator seeded directly from `seed`.
pub fn seeded_rng(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}

/// Independent stream for one `(snr_index, trial_index)` cell of an
/// experiment. The 64-bit stream seed is a SplitMix64 hash chain over the
/// root seed and both indices.
pub fn stream_rng(seed: u64, snr_index: u64, trial_index: u64) -> SeededRng {
    let key = splitmix64(splitmix64(splitmix64(seed) ^ snr_index) ^ trial_index);
    SeededRng::seed_from_u64(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn ghz() -> ChannelModel {
        ChannelModel::at_frequency(1.0, 2.0, 0.0, 1e9).unwrap()
    }

    #[test]
    fn free_space_loss_at_one_gigahertz() {
        let m = ghz();
        assert_relative_eq!(m.wavelength(), 0.299_792_458, epsilon = 1e-12);
        let pl = free_space_path_loss(1.0, &m).unwrap();
        assert!((pl - 32.45).abs() < 5e-3, "{pl}");
        let quarter = m.wavelength() / (4.0 * PI);
        assert!(free_space_path_loss(quarter, &m).unwrap().abs() < 1e-12);
        let doubled = free_space_path_loss(2.0, &m).unwrap() - pl;
        assert!((doubled - 6.0206).abs() < 1e-4);
        assert!(free_space_path_loss(0.0, &m).is_err());
    }

    #[test]
    fn noiseless_path_loss_and_inversion() {
        let m = ghz();
        let mut rng = seeded_rng(1);
        let pl = path_loss(10.0, &m, &mut rng).unwrap();
        let pl0 = free_space_path_loss(1.0, &m).unwrap();
        assert_relative_eq!(pl, pl0 + 20.0, epsilon = 1e-12);
        assert_relative_eq!(invert_distance(pl, &m), 10.0, max_relative = 1e-12);
        assert_relative_eq!(invert_distance(pl0, &m), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn model_rejects_bad_parameters() {
        assert!(ChannelModel::new(0.0, 2.0, 1.0, 0.3).is_err());
        assert!(ChannelModel::new(1.0, -2.0, 1.0, 0.3).is_err());
        assert!(ChannelModel::new(1.0, 2.0, -1.0, 0.3).is_err());
        assert!(ChannelModel::new(1.0, 2.0, 1.0, f64::NAN).is_err());
    }

    #[test]
    fn shadowing_mean_matches_model() {
        let m = ghz().with_sigma_db(6.0).unwrap();
        let mut rng = seeded_rng(7);
        let n = 100_000;
        let mean = (0..n).map(|_| path_loss(10.0, &m, &mut rng).unwrap()).sum::<f64>() / n as f64;
        let expected = mean_path_loss(10.0, &m).unwrap();
        assert!((mean - expected).abs() < 3.0 * 6.0 / (n as f64).sqrt());
    }

    #[test]
    fn log_ratio_spread_matches_lognormal_sigma() {
        let m = ghz().with_sigma_db(4.0).unwrap();
        let mut rng = seeded_rng(11);
        let n = 100_000;
        let logs: Vec<f64> = (0..n)
            .map(|_| (RssMeasurement::observe(20.0, &m, &m, &mut rng).unwrap().est_distance / 20.0).ln())
            .collect();
        let mean = logs.iter().sum::<f64>() / n as f64;
        let var = logs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert_relative_eq!(var.sqrt(), m.log_distance_sigma(), max_relative = 0.01);
    }

    #[test]
    fn squared_distance_variance_matches_samples() {
        let m = ghz().with_sigma_db(2.0).unwrap();
        let d = 15.0;
        let mut rng = seeded_rng(3);
        let n = 1_000_000;
        let sq: Vec<f64> = (0..n)
            .map(|_| RssMeasurement::observe(d, &m, &m, &mut rng).unwrap().est_distance.powi(2))
            .collect();
        let mean = sq.iter().sum::<f64>() / n as f64;
        let var = sq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert_relative_eq!(var, m.squared_distance_variance(d), max_relative = 0.05);
    }

    #[test]
    fn snr_mapping() {
        assert_relative_eq!(shadowing_sigma_for_snr(0.0, 8.0), 8.0);
        assert_relative_eq!(shadowing_sigma_for_snr(20.0, 8.0), 0.8, max_relative = 1e-12);
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream_rng(5, 1, 2).gen();
        let b: u64 = stream_rng(5, 1, 2).gen();
        let c: u64 = stream_rng(5, 2, 1).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    proptest! {
        #[test]
        fn inversion_is_identity_without_noise(d in 1.0f64..1e4, eta in 1.5f64..6.0) {
            let m = ChannelModel::at_frequency(1.0, eta, 0.0, 2.4e9).unwrap();
            let mut rng = seeded_rng(0);
            let back = invert_distance(path_loss(d, &m, &mut rng).unwrap(), &m);
            prop_assert!(((back - d) / d).abs() < 1e-9);
        }

        #[test]
        fn loss_increases_with_distance(d in 1.0f64..1e4, step in 1e-3f64..100.0) {
            let m = ghz();
            prop_assert!(mean_path_loss(d + step, &m).unwrap() > mean_path_loss(d, &m).unwrap());
        }
    }
}

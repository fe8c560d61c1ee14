//! Multichannel profile sets, masks, calibration factors and the
//! post-calibration transform.
//!
//! Observations follow `d_ij = a_i · f_j(x_i) + ε_ij`: channel `i` reads the
//! latent profile `f_j` through a multiplicative gain `a_i`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{KernelParams, NoiseParams};

pub const MIN_ACTIVE_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSet {
    pub positions: Vec<f64>,
    /// N channels × M profiles.
    pub data: DMatrix<f64>,
    /// `true` = entry takes part in inference.
    pub mask: DMatrix<bool>,
    pub channel_ids: Vec<String>,
    pub profile_ids: Vec<String>,
    /// Per-profile latent level removed by centering (zero for raw data).
    pub offsets: Vec<f64>,
}

impl ProfileSet {
    /// Fully masked-in set with generated labels `ch0..`, `p0..`.
    pub fn new(positions: Vec<f64>, data: DMatrix<f64>) -> Result<Self> {
        let (n, m) = data.shape();
        if positions.len() != n {
            return Err(Error::Shape(format!("{} positions for {} channels", positions.len(), n)));
        }
        Ok(Self {
            positions,
            mask: DMatrix::from_element(n, m, true),
            channel_ids: (0..n).map(|i| format!("ch{i}")).collect(),
            profile_ids: (0..m).map(|j| format!("p{j}")).collect(),
            offsets: vec![0.0; m],
            data,
        })
    }

    pub fn with_mask(mut self, mask: DMatrix<bool>) -> Result<Self> {
        if mask.shape() != self.data.shape() {
            return Err(Error::Shape("mask shape differs from data".into()));
        }
        self.mask = mask;
        Ok(self)
    }

    pub fn n_channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_profiles(&self) -> usize {
        self.data.ncols()
    }

    /// Masked-in channel indices of profile `j`, in channel order.
    pub fn active_channels(&self, j: usize) -> Vec<usize> {
        (0..self.n_channels()).filter(|&i| self.mask[(i, j)]).collect()
    }

    pub fn check_profiles_determined(&self) -> Result<()> {
        for j in 0..self.n_profiles() {
            let active = self.active_channels(j).len();
            if active < MIN_ACTIVE_CHANNELS {
                return Err(Error::UnderdeterminedProfile { profile: self.profile_ids[j].clone(), active });
            }
        }
        Ok(())
    }

    pub fn position_range(&self) -> (f64, f64) {
        let lo = self.positions.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.positions.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFactors {
    pub log_a: Vec<f64>,
}

impl CalibrationFactors {
    pub fn identity(n_channels: usize) -> Self {
        Self { log_a: vec![0.0; n_channels] }
    }

    pub fn from_gains(gains: &[f64]) -> Self {
        Self { log_a: gains.iter().map(|a| a.ln()).collect() }
    }

    pub fn gains(&self) -> Vec<f64> {
        self.log_a.iter().map(|l| l.exp()).collect()
    }

    pub fn inverse(&self) -> Self {
        Self { log_a: self.log_a.iter().map(|l| -l).collect() }
    }

    /// Rescale so the geometric mean of the gains is one.
    pub fn renormalized(&self) -> Self {
        let mean = self.log_a.iter().sum::<f64>() / self.log_a.len().max(1) as f64;
        Self { log_a: self.log_a.iter().map(|l| l - mean).collect() }
    }
}

/// Synthetic truth behind a generated [`ProfileSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// N × M true latent values `f_j(x_i)` (row-major by channel).
    pub latents: Vec<Vec<f64>>,
    /// True `f_j'(x_i)`.
    pub slopes: Vec<Vec<f64>>,
    /// True `f_j''(x_i)`.
    pub curvatures: Vec<Vec<f64>>,
    pub true_factors: CalibrationFactors,
    pub true_noise: NoiseParams,
    pub kernel: KernelParams,
}

/// Subtract each profile's masked-in mean. Returns the centered set (its
/// `offsets` carry the accumulated levels) and the means removed by this call.
pub fn center_profiles(ps: &ProfileSet) -> Result<(ProfileSet, Vec<f64>)> {
    ps.check_profiles_determined()?;
    let mut out = ps.clone();
    let mut means = Vec::with_capacity(ps.n_profiles());
    for j in 0..ps.n_profiles() {
        let active = ps.active_channels(j);
        let mean = active.iter().map(|&i| ps.data[(i, j)]).sum::<f64>() / active.len() as f64;
        for &i in &active {
            out.data[(i, j)] -= mean;
        }
        out.offsets[j] += mean;
        means.push(mean);
    }
    Ok((out, means))
}

/// Add the stored offsets back to masked-in entries.
pub fn uncenter_profiles(ps: &ProfileSet) -> ProfileSet {
    let mut out = ps.clone();
    for j in 0..ps.n_profiles() {
        for i in ps.active_channels(j) {
            out.data[(i, j)] += ps.offsets[j];
        }
        out.offsets[j] = 0.0;
    }
    out
}

/// Divide every channel's data by its gain.
pub fn post_calibrate(ps: &ProfileSet, cf: &CalibrationFactors) -> Result<ProfileSet> {
    if cf.log_a.len() != ps.n_channels() {
        return Err(Error::Shape(format!("{} factors for {} channels", cf.log_a.len(), ps.n_channels())));
    }
    if let Some(i) = cf.log_a.iter().position(|l| !l.is_finite()) {
        return Err(Error::NonFinite(format!("calibration factor of {}", ps.channel_ids[i])));
    }
    let mut out = ps.clone();
    for (i, l) in cf.log_a.iter().enumerate() {
        let inv = (-l).exp();
        for j in 0..ps.n_profiles() {
            out.data[(i, j)] *= inv;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::Invalid(self.violations))
        }
    }
}

pub fn validate(ps: &ProfileSet) -> ValidationReport {
    let mut v = Vec::new();
    let (n, m) = ps.data.shape();
    if n < MIN_ACTIVE_CHANNELS {
        v.push(format!("{n} channels (need at least {MIN_ACTIVE_CHANNELS})"));
    }
    if m < 1 {
        v.push("no profiles".to_string());
    }
    if ps.positions.len() != n || ps.channel_ids.len() != n {
        v.push("channel metadata length differs from data rows".to_string());
    }
    if ps.profile_ids.len() != m || ps.offsets.len() != m {
        v.push("profile metadata length differs from data columns".to_string());
    }
    if ps.mask.shape() != (n, m) {
        v.push("mask shape differs from data".to_string());
    }
    if !v.is_empty() {
        return ValidationReport { violations: v };
    }
    if let Some(i) = ps.positions.iter().position(|x| !x.is_finite()) {
        v.push(format!("non-finite position at channel {}", ps.channel_ids[i]));
    }
    for w in 0..n.saturating_sub(1) {
        if !(ps.positions[w + 1] > ps.positions[w]) {
            v.push(format!("non-increasing positions at channels {} and {}", ps.channel_ids[w], ps.channel_ids[w + 1]));
        }
    }
    for j in 0..m {
        for i in 0..n {
            if ps.mask[(i, j)] && !ps.data[(i, j)].is_finite() {
                v.push(format!("non-finite value at channel {}, profile {}", ps.channel_ids[i], ps.profile_ids[j]));
            }
        }
        let active = ps.active_channels(j).len();
        if active < MIN_ACTIVE_CHANNELS {
            v.push(format!("underdetermined profile {}: {} masked-in channels", ps.profile_ids[j], active));
        }
    }
    ValidationReport { violations: v }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> ProfileSet {
        ProfileSet::new(vec![0.0, 0.5, 1.0], DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 0.0, 3.0, 0.0])).unwrap()
    }

    #[test]
    fn centering() {
        let (c, means) = center_profiles(&small()).unwrap();
        assert_eq!(means, vec![2.0, 0.0]);
        assert_eq!(c.data.column(0).as_slice(), &[-1.0, 0.0, 1.0]);
        assert_eq!(c.data.column(1).as_slice(), &[0.0, 0.0, 0.0]);
        assert_eq!(uncenter_profiles(&c).data, small().data);
    }

    #[test]
    fn centering_skips_masked_out() {
        let mut mask = DMatrix::from_element(4, 1, true);
        mask[(3, 0)] = false;
        let ps = ProfileSet::new(vec![0.0, 1.0, 2.0, 3.0], DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 100.0]))
            .unwrap()
            .with_mask(mask)
            .unwrap();
        let (c, means) = center_profiles(&ps).unwrap();
        assert_eq!(means, vec![2.0]);
        assert_eq!(c.data[(3, 0)], 100.0);
    }

    #[test]
    fn underdetermined_profile_rejected() {
        let mut mask = DMatrix::from_element(3, 2, true);
        mask[(0, 1)] = false;
        let ps = small().with_mask(mask).unwrap();
        match center_profiles(&ps) {
            Err(Error::UnderdeterminedProfile { profile, active }) => {
                assert_eq!(profile, "p1");
                assert_eq!(active, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn calibration_identity_and_division() {
        let ps = small();
        assert_eq!(post_calibrate(&ps, &CalibrationFactors::identity(3)).unwrap(), ps);
        let cf = CalibrationFactors::from_gains(&[2.0, 1.0, 1.0]);
        let out = post_calibrate(&ps, &cf).unwrap();
        assert!((out.data[(0, 0)] - 0.5).abs() < 1e-15);
        let ps2 = ProfileSet::new(vec![0.0, 1.0, 2.0], DMatrix::from_element(3, 1, 2.0)).unwrap();
        let out = post_calibrate(&ps2, &CalibrationFactors::from_gains(&[2.0, 2.0, 2.0])).unwrap();
        assert!((out.data[(0, 0)] - 1.0).abs() < 1e-15);
        let bad = CalibrationFactors { log_a: vec![0.0, f64::NAN, 0.0] };
        assert!(matches!(post_calibrate(&ps, &bad), Err(Error::NonFinite(_))));
    }

    #[test]
    fn validation_messages() {
        assert!(validate(&small()).is_valid());
        let mut ps = small();
        ps.data[(1, 0)] = f64::NAN;
        let r = validate(&ps);
        assert_eq!(r.violations.len(), 1);
        assert!(r.violations[0].contains("ch1") && r.violations[0].contains("p0"));
        // NaN in a masked-out cell is fine
        ps.mask[(1, 0)] = false;
        ps.mask[(2, 0)] = true;
        let mut ps3 = ps.clone();
        ps3.mask[(1, 0)] = false;
        assert!(validate(&ps3).violations.iter().all(|v| !v.contains("non-finite")));
        let mut ps = small();
        ps.positions = vec![0.0, 0.5, 0.5];
        let r = validate(&ps);
        assert!(r.violations.iter().any(|v| v.contains("non-increasing positions")));
    }

    fn arb_set() -> impl Strategy<Value = (ProfileSet, Vec<f64>)> {
        (3usize..8, 1usize..4).prop_flat_map(|(n, m)| {
            (proptest::collection::vec(-50.0f64..50.0, n * m), proptest::collection::vec(-0.5f64..0.5, n)).prop_map(
                move |(vals, log_a)| {
                    let positions = (0..n).map(|i| i as f64 * 0.3).collect();
                    let ps = ProfileSet::new(positions, DMatrix::from_vec(n, m, vals)).unwrap();
                    (ps, log_a)
                },
            )
        })
    }

    proptest! {
        #[test]
        fn centering_is_idempotent((ps, _) in arb_set()) {
            let (c, _) = center_profiles(&ps).unwrap();
            let (_, means) = center_profiles(&c).unwrap();
            for m in means {
                prop_assert!(m.abs() < 1e-12);
            }
            let back = uncenter_profiles(&c);
            for (a, b) in back.data.iter().zip(ps.data.iter()) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }

        #[test]
        fn calibration_inverts((ps, log_a) in arb_set()) {
            let cf = CalibrationFactors { log_a };
            let there = post_calibrate(&ps, &cf).unwrap();
            prop_assert_eq!(&there.mask, &ps.mask);
            prop_assert_eq!(&there.positions, &ps.positions);
            let back = post_calibrate(&there, &cf.inverse()).unwrap();
            for (a, b) in back.data.iter().zip(ps.data.iter()) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }
}

//! Fixed input layouts of the two Q-networks.
//!
//! Time is scaled to `t / T`, proportions and rates are mapped affinely to
//! `[0, 1]` using the support box, and the projected measure is passed raw.
//!
//! | slot | major | minor |
//! |------|-------|-------|
//! | 0 | t | t |
//! | 1 | p⁰ | p⁰ |
//! | 2 | r⁰ | r⁰ |
//! | 3 | u⁰ | p |
//! | 4 | r^c | r |
//! | 5 | μ₁.. | u |
//! | 6 | | r^c |
//! | 7 | | μ₁.. |

use serde::{Deserialize, Serialize};

use crate::market::{BankState, MarketParams};
use crate::measure::ProjectedMeasure;
use crate::scalar::Scalar;

pub const TIME: usize = 0;
pub const MAJOR_P: usize = 1;
pub const MAJOR_R: usize = 2;

pub mod major {
    pub const ACTION: usize = 3;
    pub const CB_RATE: usize = 4;
    pub const MEASURE: usize = 5;
}

pub mod minor {
    pub const OWN_P: usize = 3;
    pub const OWN_R: usize = 4;
    pub const ACTION: usize = 5;
    pub const CB_RATE: usize = 6;
    pub const MEASURE: usize = 7;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetRole {
    Major,
    Minor,
}

impl NetRole {
    pub fn measure_offset(self) -> usize {
        match self {
            NetRole::Major => major::MEASURE,
            NetRole::Minor => minor::MEASURE,
        }
    }

    pub fn action_slot(self) -> usize {
        match self {
            NetRole::Major => major::ACTION,
            NetRole::Minor => minor::ACTION,
        }
    }

    pub fn cb_slot(self) -> usize {
        match self {
            NetRole::Major => major::CB_RATE,
            NetRole::Minor => minor::CB_RATE,
        }
    }

    pub fn input_dim(self, measure_len: usize) -> usize {
        self.measure_offset() + measure_len
    }
}

/// One named block of the input vector, as stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSlot {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub encoding: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutDescriptor {
    pub role: NetRole,
    pub input_dim: usize,
    pub slots: Vec<FeatureSlot>,
}

impl LayoutDescriptor {
    pub fn new(role: NetRole, measure_len: usize) -> Self {
        let slot = |name: &str, offset, len, encoding: &str| FeatureSlot {
            name: name.into(),
            offset,
            len,
            encoding: encoding.into(),
        };
        let mut slots = vec![
            slot("t", TIME, 1, "t/T"),
            slot("major_p", MAJOR_P, 1, "proportion"),
            slot("major_r", MAJOR_R, 1, "rate"),
        ];
        match role {
            NetRole::Major => slots.push(slot("major_u", major::ACTION, 1, "rate")),
            NetRole::Minor => {
                slots.push(slot("minor_p", minor::OWN_P, 1, "proportion"));
                slots.push(slot("minor_r", minor::OWN_R, 1, "rate"));
                slots.push(slot("minor_u", minor::ACTION, 1, "rate"));
            }
        }
        slots.push(slot("cb_rate", role.cb_slot(), 1, "rate"));
        slots.push(slot("measure", role.measure_offset(), measure_len, "raw"));
        Self {
            role,
            input_dim: role.input_dim(measure_len),
            slots,
        }
    }
}

/// Affine input scaling shared by both networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    horizon: T,
    prop_min: T,
    prop_span: T,
    rate_min: T,
    rate_span: T,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(params: &MarketParams<T>) -> Self {
        Self {
            horizon: T::lit(params.horizon as f64),
            prop_min: params.prop_min,
            prop_span: params.prop_max - params.prop_min,
            rate_min: params.rate_min,
            rate_span: params.rate_max - params.rate_min,
        }
    }

    #[inline]
    pub fn time(&self, t: usize) -> T {
        T::lit(t as f64) / self.horizon
    }

    #[inline]
    pub fn prop(&self, p: T) -> T {
        (p - self.prop_min) / self.prop_span
    }

    #[inline]
    pub fn rate(&self, r: T) -> T {
        (r - self.rate_min) / self.rate_span
    }

    /// Writes the major input; the action slot holds `u0`.
    pub fn major_into(
        &self,
        out: &mut [T],
        t: usize,
        x0: BankState<T>,
        u0: T,
        rc: T,
        mu: &ProjectedMeasure<T>,
    ) {
        out[TIME] = self.time(t);
        out[MAJOR_P] = self.prop(x0.p);
        out[MAJOR_R] = self.rate(x0.r);
        out[major::ACTION] = self.rate(u0);
        out[major::CB_RATE] = self.rate(rc);
        out[major::MEASURE..].copy_from_slice(mu.weights());
    }

    pub fn major(&self, t: usize, x0: BankState<T>, u0: T, rc: T, mu: &ProjectedMeasure<T>) -> Vec<T> {
        let mut out = vec![T::zero(); NetRole::Major.input_dim(mu.len())];
        self.major_into(&mut out, t, x0, u0, rc, mu);
        out
    }

    #[allow(clippy::too_many_arguments)]
    pub fn minor_into(
        &self,
        out: &mut [T],
        t: usize,
        x0: BankState<T>,
        x: BankState<T>,
        u: T,
        rc: T,
        mu: &ProjectedMeasure<T>,
    ) {
        out[TIME] = self.time(t);
        out[MAJOR_P] = self.prop(x0.p);
        out[MAJOR_R] = self.rate(x0.r);
        out[minor::OWN_P] = self.prop(x.p);
        out[minor::OWN_R] = self.rate(x.r);
        out[minor::ACTION] = self.rate(u);
        out[minor::CB_RATE] = self.rate(rc);
        out[minor::MEASURE..].copy_from_slice(mu.weights());
    }

    pub fn minor(
        &self,
        t: usize,
        x0: BankState<T>,
        x: BankState<T>,
        u: T,
        rc: T,
        mu: &ProjectedMeasure<T>,
    ) -> Vec<T> {
        let mut out = vec![T::zero(); NetRole::Minor.input_dim(mu.len())];
        self.minor_into(&mut out, t, x0, x, u, rc, mu);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_dimensions() {
        assert_eq!(NetRole::Major.input_dim(96), 101);
        assert_eq!(NetRole::Minor.input_dim(96), 103);
        let d = LayoutDescriptor::new(NetRole::Minor, 96);
        assert_eq!(d.slots.iter().map(|s| s.len).sum::<usize>(), 103);
        for w in d.slots.windows(2) {
            assert_eq!(w[0].offset + w[0].len, w[1].offset);
        }
    }

    #[test]
    fn encoding_maps_bounds_to_unit_interval() {
        let e = Encoder::new(&MarketParams::<f64>::default());
        assert_eq!(e.time(0), 0.0);
        assert_eq!(e.time(5), 1.0);
        assert_eq!(e.prop(0.2), 0.0);
        assert!((e.prop(0.8) - 1.0).abs() < 1e-15);
        assert_eq!(e.rate(0.025), 0.0);
        assert!((e.rate(0.035) - 1.0).abs() < 1e-12);
        let mu = ProjectedMeasure::uniform(96);
        let z = e.minor(2, BankState::new(0.5, 0.03), BankState::new(0.4, 0.025), 0.035, 0.03, &mu);
        assert_eq!(z.len(), 103);
        assert!((z[TIME] - 0.4).abs() < 1e-15);
        assert_eq!(z[minor::OWN_R], 0.0);
        assert_eq!(&z[minor::MEASURE..], mu.weights());
    }
}

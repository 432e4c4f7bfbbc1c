use rand::Rng;
use rand_distr::StandardNormal;

use super::arch::{ArchitectureSpec, Part, TensorSlot};
use super::real::Real;
use crate::error::{Error, Result};

/// Initial PReLU slope.
pub const PRELU_INIT: f64 = 0.25;

/// All trainable values of one network, stored contiguously in
/// [`ArchitectureSpec::layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T> {
    arch: ArchitectureSpec,
    data: Vec<T>,
}

impl<T: Real> NetworkParams<T> {
    pub fn zeros(arch: ArchitectureSpec) -> Result<Self> {
        arch.validate()?;
        let n = arch.param_count();
        Ok(NetworkParams {
            arch,
            data: vec![T::zero(); n],
        })
    }

    pub fn from_vec(arch: ArchitectureSpec, data: Vec<T>) -> Result<Self> {
        arch.validate()?;
        if data.len() != arch.param_count() {
            return Err(Error::shape(arch.param_count(), data.len()));
        }
        Ok(NetworkParams { arch, data })
    }

    /// He-normal weights, zero biases, PReLU slopes at 0.25.
    pub fn init<R: Rng + ?Sized>(arch: ArchitectureSpec, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        for slot in p.arch.layout() {
            let dst = &mut p.data[slot.offset..slot.offset + slot.len];
            if slot.name.ends_with(".weight") {
                let fan_in: usize = slot.shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                for w in dst.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *w = T::of(z * std);
                }
            } else if slot.name.ends_with(".slope") {
                dst.fill(T::of(PRELU_INIT));
            }
        }
        Ok(p)
    }

    pub fn arch(&self) -> &ArchitectureSpec {
        &self.arch
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn conv_part(&self) -> &[T] {
        &self.data[..self.arch.fc_offset()]
    }

    pub fn fc_part(&self) -> &[T] {
        &self.data[self.arch.fc_offset()..]
    }

    pub fn fc_part_mut(&mut self) -> &mut [T] {
        let off = self.arch.fc_offset();
        &mut self.data[off..]
    }

    pub fn slot(&self, name: &str) -> Option<(TensorSlot, &[T])> {
        self.arch
            .layout()
            .into_iter()
            .find(|s| s.name == name)
            .map(|s| {
                let d = &self.data[s.offset..s.offset + s.len];
                (s, d)
            })
    }

    pub fn part_range(&self, part: Part) -> std::ops::Range<usize> {
        let fc = self.arch.fc_offset();
        match part {
            Part::Conv => 0..fc,
            Part::Fc => fc..self.data.len(),
        }
    }

    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        NetworkParams {
            arch: self.arch.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

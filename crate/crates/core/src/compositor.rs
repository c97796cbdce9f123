//! Back-to-front overcompositing of RGBA planes.
//!
//! Plane index 0 is the farthest plane; a plane occludes every plane with a
//! smaller index. Per pixel the output is
//! `sum_d C_d A_d prod_{k > d} (1 - A_k)`.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor};

/// `D x 4 x H x W` RGBA planes, far to near, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MpiTensor<T: Real = f32> {
    pub data: Tensor<T>,
}

impl<T: Real> MpiTensor<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        match *data.shape() {
            [d, 4, _, _] if d > 0 => Ok(MpiTensor { data }),
            _ => Err(Error::invalid(format!(
                "MPI must be D x 4 x H x W, got {:?}",
                data.shape()
            ))),
        }
    }

    pub fn depth(&self) -> usize {
        self.data.shape()[0]
    }
}

fn check_alpha<T: Real>(data: &Tensor<T>, d: usize, hw: usize) -> Result<()> {
    if !cfg!(debug_assertions) {
        return Ok(());
    }
    let x = data.data();
    for di in 0..d {
        let alpha = &x[(di * 4 + 3) * hw..(di * 4 + 4) * hw];
        if let Some(a) = alpha.iter().find(|a| !(**a >= T::zero() && **a <= T::one())) {
            return Err(Error::invalid(format!("alpha {a} outside [0, 1] at plane {di}")));
        }
    }
    Ok(())
}

/// Closed-form compositing of `z` (`D x 4 x H x W`) into `3 x H x W`.
pub fn overcomposite<T: Real>(z: &MpiTensor<T>) -> Result<Tensor<T>> {
    let s = z.data.shape();
    let (d, h, w) = (s[0], s[2], s[3]);
    check_alpha(&z.data, d, h * w)?;
    let mut tape = Tape::new();
    let x = tape.leaf(z.data.clone().reshape(&[1, d * 4, h, w])?);
    let y = tape.overcomposite(x, d)?;
    tape.value(y).clone().reshape(&[3, h, w])
}

/// Reference implementation: `out = C_d A_d + (1 - A_d) out`, far to near.
pub fn overcomposite_recursive<T: Real>(z: &MpiTensor<T>) -> Result<Tensor<T>> {
    let s = z.data.shape();
    let (d, h, w) = (s[0], s[2], s[3]);
    check_alpha(&z.data, d, h * w)?;
    let mut out = Tensor::zeros(&[3, h, w]);
    for di in 0..d {
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let a = z.data.get(&[di, 3, y, x]);
                    let prev = out.get(&[c, y, x]);
                    out.set(&[c, y, x], z.data.get(&[di, c, y, x]) * a + (T::one() - a) * prev);
                }
            }
        }
    }
    Ok(out)
}

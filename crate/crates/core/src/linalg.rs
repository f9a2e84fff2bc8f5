//! Fixed-size complex 4x4 algebra for two-qubit operators.

use std::ops::Mul;

pub use num_complex::Complex64 as C64;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);

/// A two-qubit ket in the standard basis order (++, +-, -+, --).
pub type Ket4 = [C64; 4];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat4(pub [[C64; 4]; 4]);

impl Mat4 {
    pub fn zeros() -> Self {
        Mat4([[ZERO; 4]; 4])
    }

    pub fn identity() -> Self {
        Self::diag([ONE; 4])
    }

    pub fn diag(d: [C64; 4]) -> Self {
        let mut m = Self::zeros();
        for (i, v) in d.into_iter().enumerate() {
            m.0[i][i] = v;
        }
        m
    }

    pub fn from_real(rows: [[f64; 4]; 4]) -> Self {
        let mut m = Self::zeros();
        for i in 0..4 {
            for j in 0..4 {
                m.0[i][j] = C64::new(rows[i][j], 0.0);
            }
        }
        m
    }

    /// Outer product |a⟩⟨b|.
    pub fn outer(a: &Ket4, b: &Ket4) -> Self {
        let mut m = Self::zeros();
        for i in 0..4 {
            for j in 0..4 {
                m.0[i][j] = a[i] * b[j].conj();
            }
        }
        m
    }

    /// Kronecker product of two 2x2 blocks, qubit 1 being the most significant.
    pub fn kron2(a: &[[C64; 2]; 2], b: &[[C64; 2]; 2]) -> Self {
        let mut m = Self::zeros();
        for i in 0..4 {
            for j in 0..4 {
                m.0[i][j] = a[i / 2][j / 2] * b[i % 2][j % 2];
            }
        }
        m
    }

    pub fn adjoint(&self) -> Self {
        let mut m = Self::zeros();
        for i in 0..4 {
            for j in 0..4 {
                m.0[i][j] = self.0[j][i].conj();
            }
        }
        m
    }

    pub fn transpose(&self) -> Self {
        let mut m = Self::zeros();
        for i in 0..4 {
            for j in 0..4 {
                m.0[i][j] = self.0[j][i];
            }
        }
        m
    }

    #[inline]
    pub fn apply(&self, v: &Ket4) -> Ket4 {
        let mut out = [ZERO; 4];
        for (o, row) in out.iter_mut().zip(self.0.iter()) {
            *o = row[0] * v[0] + row[1] * v[1] + row[2] * v[2] + row[3] * v[3];
        }
        out
    }

    pub fn trace(&self) -> C64 {
        (0..4).map(|i| self.0[i][i]).sum()
    }

    /// Largest entrywise modulus of `self - other`.
    pub fn max_abs_diff(&self, other: &Mat4) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..4 {
            for j in 0..4 {
                worst = worst.max((self.0[i][j] - other.0[i][j]).norm());
            }
        }
        worst
    }

    /// Entrywise deviation of `U†U` from the identity.
    pub fn unitarity_error(&self) -> f64 {
        (self.adjoint() * *self).max_abs_diff(&Mat4::identity())
    }
}

impl Mul for Mat4 {
    type Output = Mat4;

    fn mul(self, rhs: Mat4) -> Mat4 {
        let mut m = Mat4::zeros();
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = ZERO;
                for k in 0..4 {
                    acc += self.0[i][k] * rhs.0[k][j];
                }
                m.0[i][j] = acc;
            }
        }
        m
    }
}

pub fn norm_sqr(v: &[C64]) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum()
}

/// Cosine/sine pair of a phase reduced into (-π, π] first.
#[inline]
pub fn cis(phase: f64) -> C64 {
    let (s, c) = crate::heisenberg::wrap_phase(phase).sin_cos();
    C64::new(c, s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kron_of_identities_is_identity() {
        let i2 = [[ONE, ZERO], [ZERO, ONE]];
        assert_eq!(Mat4::kron2(&i2, &i2), Mat4::identity());
    }

    #[test]
    fn outer_product_trace_is_norm() {
        let v = [
            C64::new(0.5, 0.5),
            C64::new(0.0, 0.5),
            ZERO,
            C64::new(0.5, 0.0),
        ];
        let t = Mat4::outer(&v, &v).trace();
        assert!((t.re - 1.0).abs() < 1e-15 && t.im.abs() < 1e-15);
    }

    #[test]
    fn apply_matches_product_with_column() {
        let mut m = Mat4::zeros();
        for i in 0..4 {
            for j in 0..4 {
                m.0[i][j] = C64::new(i as f64 + 1.0, j as f64 - 1.0);
            }
        }
        let v = [ONE, C64::new(0.0, 1.0), C64::new(2.0, 0.0), ZERO];
        let col = Mat4::outer(&v, &[ONE, ZERO, ZERO, ZERO]);
        let prod = m * col;
        let applied = m.apply(&v);
        for i in 0..4 {
            assert!((prod.0[i][0] - applied[i]).norm() < 1e-14);
        }
    }
}

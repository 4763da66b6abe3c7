//! Per-frame projective maps with `h33` fixed at 1.

use ndarray::Array2;

use super::FieldError;

/// Minimum |det| and minimum |w| accepted before a map counts as degenerate.
pub const DEGENERACY_EPS: f64 = 1e-8;

pub const IDENTITY_PARAMS: [f64; 8] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];

/// `T×8` parameters `(h11, h12, h13, h21, h22, h23, h31, h32)` per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct HomographyTrajectory {
    params: Array2<f64>,
}

/// Partial derivatives of the projected point w.r.t. the 8 parameters.
pub type PointJacobian = [[f64; 8]; 2];

impl HomographyTrajectory {
    pub fn identity(frame_count: usize) -> Self {
        let mut params = Array2::zeros((frame_count, 8));
        for mut row in params.outer_iter_mut() {
            row.assign(&ndarray::aview1(&IDENTITY_PARAMS));
        }
        Self { params }
    }

    pub fn from_params(params: Array2<f64>) -> Result<Self, FieldError> {
        if params.ncols() != 8 {
            return Err(FieldError::InvalidParameters(format!(
                "homography rows need 8 entries, got {}",
                params.ncols()
            )));
        }
        let traj = Self { params };
        traj.validate()?;
        Ok(traj)
    }

    /// Builds a trajectory from full 3×3 matrices, normalizing by `h33`.
    pub fn from_matrices(matrices: &[[[f64; 3]; 3]]) -> Result<Self, FieldError> {
        let mut params = Array2::zeros((matrices.len(), 8));
        for (t, m) in matrices.iter().enumerate() {
            let s = m[2][2];
            if s.abs() < DEGENERACY_EPS {
                return Err(FieldError::DegenerateHomography { frame: t });
            }
            let row = [m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1]];
            for (k, v) in row.iter().enumerate() {
                params[[t, k]] = v / s;
            }
        }
        Self::from_params(params)
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        if self.params.iter().any(|v| !v.is_finite()) {
            return Err(FieldError::InvalidParameters("non-finite homography parameter".into()));
        }
        for t in 0..self.len() {
            if determinant(&self.matrix(t)).abs() <= DEGENERACY_EPS {
                return Err(FieldError::DegenerateHomography { frame: t });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.params.nrows() == 0
    }

    pub fn params(&self) -> &Array2<f64> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Array2<f64> {
        &mut self.params
    }

    pub fn row(&self, t: usize) -> [f64; 8] {
        let r = self.params.row(t);
        [r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7]]
    }

    pub fn set_row(&mut self, t: usize, row: [f64; 8]) {
        for (k, v) in row.into_iter().enumerate() {
            self.params[[t, k]] = v;
        }
    }

    pub fn matrix(&self, t: usize) -> [[f64; 3]; 3] {
        let h = self.row(t);
        [[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]]
    }

    pub fn apply(&self, u: f64, v: f64, t: usize) -> Result<(f64, f64), FieldError> {
        if t >= self.len() {
            return Err(FieldError::FrameOutOfRange { frame: t, frames: self.len() });
        }
        project(&self.row(t), u, v).ok_or(FieldError::DegenerateHomography { frame: t })
    }

    /// Projected point and its derivatives w.r.t. the frame's parameters.
    pub fn apply_with_jacobian(&self, u: f64, v: f64, t: usize) -> Result<((f64, f64), PointJacobian), FieldError> {
        let h = self.row(t);
        let w = h[6] * u + h[7] * v + 1.0;
        if !(w.abs() >= DEGENERACY_EPS) {
            return Err(FieldError::DegenerateHomography { frame: t });
        }
        let x = h[0] * u + h[1] * v + h[2];
        let y = h[3] * u + h[4] * v + h[5];
        let iw = 1.0 / w;
        let (px, py) = (x * iw, y * iw);
        let jac = [
            [u * iw, v * iw, iw, 0.0, 0.0, 0.0, -px * u * iw, -px * v * iw],
            [0.0, 0.0, 0.0, u * iw, v * iw, iw, -py * u * iw, -py * v * iw],
        ];
        Ok(((px, py), jac))
    }
}

/// `((h11u+h12v+h13)/w, (h21u+h22v+h23)/w)` with `w = h31u+h32v+1`;
/// `None` when `|w| < 1e−8`.
#[inline]
pub fn project(h: &[f64; 8], u: f64, v: f64) -> Option<(f64, f64)> {
    let w = h[6] * u + h[7] * v + 1.0;
    if !(w.abs() >= DEGENERACY_EPS) {
        return None;
    }
    Some(((h[0] * u + h[1] * v + h[2]) / w, (h[3] * u + h[4] * v + h[5]) / w))
}

pub fn determinant(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Inverse via the adjugate; `None` when singular.
pub fn invert(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = determinant(m);
    if det.abs() <= DEGENERACY_EPS {
        return None;
    }
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let adj = [
        [c(1, 2, 1, 2), -c(0, 2, 1, 2), c(0, 1, 1, 2)],
        [-c(1, 2, 0, 2), c(0, 2, 0, 2), -c(0, 1, 0, 2)],
        [c(1, 2, 0, 1), -c(0, 2, 0, 1), c(0, 1, 0, 1)],
    ];
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = adj[i][j] / det;
        }
    }
    Some(out)
}

/// Applies a full 3×3 matrix to `(u, v, 1)` with perspective division.
pub fn apply_matrix(m: &[[f64; 3]; 3], u: f64, v: f64) -> Option<(f64, f64)> {
    let w = m[2][0] * u + m[2][1] * v + m[2][2];
    if !(w.abs() >= DEGENERACY_EPS) {
        return None;
    }
    Some(((m[0][0] * u + m[0][1] * v + m[0][2]) / w, (m[1][0] * u + m[1][1] * v + m[1][2]) / w))
}

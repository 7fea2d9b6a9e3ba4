//! Point-to-plane residuals and their Jacobians for one state iterate.

use nalgebra::{DMatrix, DVector, Vector6};
use rayon::prelude::*;

use crate::manifold::{hat, Vec3};
use crate::map::{fit_plane, MapIndex, PlaneParams};
use crate::pointcloud::Scan;
use crate::state::{StateVector, DIM, POS, ROT};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObservationParams {
    /// Neighbours per plane fit.
    pub k: usize,
    pub plane: PlaneParams,
    /// Range noise standard deviation, meters.
    pub range_sigma: f64,
    /// Fewer matches than this make the update degenerate.
    pub min_matches: usize,
    /// Matches with `|z|` above this are rejected, meters.
    pub max_residual: f64,
}

impl Default for ObservationParams {
    fn default() -> Self {
        ObservationParams {
            k: 5,
            plane: PlaneParams::default(),
            range_sigma: 0.02,
            min_matches: 10,
            max_residual: 0.1,
        }
    }
}

/// Stacked measurements. Only the rotation and position columns of the
/// Jacobian can be non-zero, so each row stores those six entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MeasurementBatch {
    pub residuals: Vec<f64>,
    /// `[∂z/∂δθ, ∂z/∂δt]` per row.
    pub rows: Vec<Vector6<f64>>,
    /// Per-row variance, m².
    pub noise: Vec<f64>,
    /// Index of the scan point behind each row.
    pub point_indices: Vec<usize>,
}

impl MeasurementBatch {
    pub fn matched_count(&self) -> usize {
        self.residuals.len()
    }

    pub fn residual_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.residuals)
    }

    pub fn noise_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.noise)
    }

    /// Full `m × 12` Jacobian.
    pub fn jacobian(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.rows.len(), DIM);
        for (r, row) in self.rows.iter().enumerate() {
            for c in 0..3 {
                h[(r, ROT + c)] = row[c];
                h[(r, POS + c)] = row[3 + c];
            }
        }
        h
    }
}

/// Residual and Jacobian row of one scan-end-frame point against a plane.
/// Rotation perturbations compose on the right, as in `StateVector::boxplus`.
pub fn point_to_plane(p: &Vec3, x: &StateVector, normal: &Vec3, anchor: &Vec3) -> (f64, Vector6<f64>) {
    let r = x.rotation.matrix();
    let world = r * p + x.position;
    let d_theta = -(normal.transpose() * r * hat(p));
    let mut row = Vector6::zeros();
    row.fixed_rows_mut::<3>(0).copy_from(&d_theta.transpose());
    row.fixed_rows_mut::<3>(3).copy_from(normal);
    (normal.dot(&(world - anchor)), row)
}

/// Matches every point of the deskewed scan to a local map plane at the
/// state iterate `x`. Rows are ordered by point index.
pub fn build_measurements(
    deskewed: &Scan,
    x: &StateVector,
    map: &MapIndex,
    params: &ObservationParams,
) -> Result<MeasurementBatch> {
    if map.is_empty() {
        return Err(Error::invalid("cannot build measurements against an empty map"));
    }
    let r = x.rotation.matrix();
    let variance = params.range_sigma * params.range_sigma;
    let matches: Vec<Option<(usize, f64, Vector6<f64>)>> = deskewed
        .points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let world = r * p.xyz + x.position;
            let knn = map.knn(&world, params.k);
            if !knn.complete {
                return None;
            }
            let pts: Vec<Vec3> = knn.neighbors.iter().map(|n| n.point).collect();
            let dists: Vec<f64> = knn.neighbors.iter().map(|n| n.dist_sq.sqrt()).collect();
            let plane = fit_plane(&pts, &dists, &params.plane, Some(&x.position));
            if !plane.valid {
                return None;
            }
            let (z, row) = point_to_plane(&p.xyz, x, &plane.normal, &plane.anchor);
            (z.abs() <= params.max_residual).then_some((i, z, row))
        })
        .collect();
    let mut batch = MeasurementBatch::default();
    for (i, z, row) in matches.into_iter().flatten() {
        batch.residuals.push(z);
        batch.rows.push(row);
        batch.noise.push(variance);
        batch.point_indices.push(i);
    }
    if batch.matched_count() < params.min_matches {
        return Err(Error::DegenerateMeasurement {
            matched: batch.matched_count(),
            required: params.min_matches,
        });
    }
    Ok(batch)
}

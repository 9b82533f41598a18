//! Seeded Gaussian-cluster data for demos, benchmarks and end-to-end tests.

use crate::error::{config_err, Result};
use crate::evalkit::LabelSet;
use crate::numkit::{norm2, DenseMatrix, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    pub classes: usize,
    pub dim: usize,
    /// Centers are drawn uniformly on the sphere of this radius.
    pub radius: f64,
    /// Standard deviation of the isotropic noise around each center.
    pub noise: f64,
    pub train_rows: usize,
    pub db_rows: usize,
    pub query_rows: usize,
    pub seed: u64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 128,
            radius: 10.0,
            noise: 1.0,
            train_rows: 2000,
            db_rows: 2000,
            query_rows: 500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub embeddings: DenseMatrix,
    pub labels: LabelSet,
}

#[derive(Debug, Clone)]
pub struct ClusterData {
    pub centers: DenseMatrix,
    pub train: Split,
    pub db: Split,
    pub query: Split,
}

fn sample(centers: &DenseMatrix, rows: usize, noise: f64, rng: &mut Rng) -> Result<Split> {
    let dim = centers.cols();
    let mut data = Vec::with_capacity(rows * dim);
    let mut labels = Vec::with_capacity(rows);
    for _ in 0..rows {
        let c = rng.below(centers.rows());
        labels.push(c as u32);
        data.extend(centers.row(c).iter().map(|m| m + noise * rng.normal()));
    }
    Ok(Split {
        embeddings: DenseMatrix::from_vec(rows, dim, data)?,
        labels: LabelSet::single(centers.rows(), &labels)?,
    })
}

pub fn gaussian_clusters(spec: &ClusterSpec) -> Result<ClusterData> {
    if spec.classes == 0 || spec.dim == 0 {
        return Err(config_err!("need at least one class and one dimension"));
    }
    let mut rng = Rng::new(spec.seed);
    let mut centers = DenseMatrix::zeros(spec.classes, spec.dim);
    for c in 0..spec.classes {
        let dir: Vec<f64> = (0..spec.dim).map(|_| rng.normal()).collect();
        let n = norm2(&dir);
        for (dst, v) in centers.row_mut(c).iter_mut().zip(&dir) {
            *dst = spec.radius * v / n;
        }
    }
    let train = sample(&centers, spec.train_rows, spec.noise, &mut rng)?;
    let db = sample(&centers, spec.db_rows, spec.noise, &mut rng)?;
    let query = sample(&centers, spec.query_rows, spec.noise, &mut rng)?;
    Ok(ClusterData {
        centers,
        train,
        db,
        query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_radius() {
        let spec = ClusterSpec {
            train_rows: 30,
            db_rows: 20,
            query_rows: 5,
            ..Default::default()
        };
        let d = gaussian_clusters(&spec).unwrap();
        assert_eq!(d.train.embeddings.shape(), (30, 128));
        assert_eq!(d.query.labels.len(), 5);
        for r in d.centers.row_iter() {
            assert!((norm2(r) - 10.0).abs() < 1e-9);
        }
        let again = gaussian_clusters(&spec).unwrap();
        assert_eq!(again.db.embeddings, d.db.embeddings);
    }
}

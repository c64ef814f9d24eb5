use nalgebra::{DMatrix, SymmetricEigen};

use super::{Projection2D, ProjectionMethod, ProjectionParams};
use crate::error::{Error, Result};
use crate::vecmath::EmbeddingVector;

/// Projects mean-centered data onto its top two principal axes. Each axis
/// is signed so that its largest-magnitude loading is positive.
pub fn pca_2d(vectors: &[EmbeddingVector]) -> Result<Projection2D> {
    let n = vectors.len();
    if n < 2 {
        return Err(Error::invalid("PCA needs at least two vectors"));
    }
    let dim = vectors[0].dim();
    if let Some(v) = vectors.iter().find(|v| v.dim() != dim) {
        return Err(Error::Shape {
            expected: dim,
            got: v.dim(),
        });
    }
    let mut x = DMatrix::<f64>::zeros(n, dim);
    for (i, v) in vectors.iter().enumerate() {
        for (j, &val) in v.values().iter().enumerate() {
            x[(i, j)] = val as f64;
        }
    }
    let mean = x.row_mean();
    for mut row in x.row_iter_mut() {
        row -= &mean;
    }

    // eigen-decompose whichever of X^T X and X X^T is smaller
    let (axes, eigenvalues) = if dim <= n {
        let cov = x.transpose() * &x;
        top_two(SymmetricEigen::new(cov))
    } else {
        let gram = &x * x.transpose();
        let (vs, ev) = top_two(SymmetricEigen::new(gram));
        let mut axes = Vec::with_capacity(2);
        for v in vs {
            let a = x.transpose() * v;
            let norm = a.norm();
            axes.push(if norm > 0.0 { a / norm } else { a });
        }
        (axes, ev)
    };

    let mut points = vec![[0.0; 2]; n];
    for (c, axis) in axes.iter().enumerate() {
        let axis = fix_sign(axis.clone());
        let proj = &x * axis;
        for (i, p) in points.iter_mut().enumerate() {
            p[c] = proj[i];
        }
    }
    let denom = (n - 1) as f64;
    Ok(Projection2D {
        points,
        method: ProjectionMethod::Pca,
        params: ProjectionParams::Pca {
            explained_variance: [eigenvalues[0].max(0.0) / denom, eigenvalues[1].max(0.0) / denom],
        },
        seed: None,
    })
}

fn top_two(eig: SymmetricEigen<f64, nalgebra::Dyn>) -> (Vec<nalgebra::DVector<f64>>, [f64; 2]) {
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let pick = |k: usize| -> (nalgebra::DVector<f64>, f64) {
        match order.get(k) {
            Some(&i) => (eig.eigenvectors.column(i).into_owned(), eig.eigenvalues[i]),
            None => (nalgebra::DVector::zeros(eig.eigenvectors.nrows()), 0.0),
        }
    };
    let (v0, e0) = pick(0);
    let (v1, e1) = pick(1);
    (vec![v0, v1], [e0, e1])
}

fn fix_sign(v: nalgebra::DVector<f64>) -> nalgebra::DVector<f64> {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if !v.is_empty() && v[best] < 0.0 {
        -v
    } else {
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn needs_two_points() {
        assert!(pca_2d(&[v(&[1.0, 2.0])]).is_err());
    }

    #[test]
    fn rank_one_data_has_flat_second_axis() {
        let dir = [0.3f32, -0.1, 0.7, 0.2, 0.5];
        let vs: Vec<_> = (0..20)
            .map(|i| {
                let t = i as f32 - 7.5;
                v(&dir.iter().map(|d| 1.0 + t * d).collect::<Vec<_>>())
            })
            .collect();
        let p = pca_2d(&vs).unwrap();
        let ys: Vec<f64> = p.points.iter().map(|q| q[1]).collect();
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / ys.len() as f64;
        assert!(var < 1e-9, "{var}");
    }

    #[test]
    fn two_d_centered_data_keeps_distances() {
        let raw = [[1.0f32, 0.5], [-0.5, 0.25], [-0.25, -1.0], [-0.25, 0.25]];
        let vs: Vec<_> = raw.iter().map(|r| v(r)).collect();
        let p = pca_2d(&vs).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let d0 = ((raw[i][0] - raw[j][0]) as f64).hypot((raw[i][1] - raw[j][1]) as f64);
                let d1 = (p.points[i][0] - p.points[j][0]).hypot(p.points[i][1] - p.points[j][1]);
                assert!((d0 - d1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn wide_data_uses_gram_route() {
        // more dimensions than points
        let vs: Vec<_> = (0..5)
            .map(|i| v(&(0..12).map(|j| ((i * 7 + j * 3) % 11) as f32 / 11.0).collect::<Vec<_>>()))
            .collect();
        let p = pca_2d(&vs).unwrap();
        assert_eq!(p.points.len(), 5);
        let ProjectionParams::Pca { explained_variance } = p.params else { panic!() };
        assert!(explained_variance[0] >= explained_variance[1]);
    }
}

//! Linear centered kernel alignment between two feature matrices sharing rows.

use ndarray::{Array2, Axis};

use crate::error::{shape_err, Error, Result};

fn centered(x: &Array2<f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(0)).unwrap();
    x - &mean
}

fn frob2(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// `||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F)` with column-centered inputs;
/// computed through `n x n` Gram matrices when that is smaller.
pub fn linear_cka(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    let n = x.nrows();
    if n != y.nrows() {
        return Err(shape_err!("CKA inputs have {} and {} rows", n, y.nrows()));
    }
    if n < 2 {
        return Err(shape_err!("CKA needs at least two rows"));
    }
    let (xc, yc) = (centered(x), centered(y));
    let (cross, xx, yy) = if n < x.ncols().max(y.ncols()) {
        let kx = xc.dot(&xc.t());
        let ky = yc.dot(&yc.t());
        ((&kx * &ky).sum(), frob2(&kx).sqrt(), frob2(&ky).sqrt())
    } else {
        (
            frob2(&yc.t().dot(&xc)),
            frob2(&xc.t().dot(&xc)).sqrt(),
            frob2(&yc.t().dot(&yc)).sqrt(),
        )
    };
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::Numeric("CKA undefined for zero-variance features".into()));
    }
    Ok(cross / (xx * yy))
}

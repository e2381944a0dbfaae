//! Pearson channel-correlation maps.

use ndarray::Array2;

/// `C x C` Pearson map of the rows of `series` (`C x F`). Rows with zero
/// variance correlate 0 with every other row.
pub fn pearson_corr_map(series: &Array2<f64>) -> Array2<f64> {
    let (c, f) = series.dim();
    let centered: Vec<Vec<f64>> = series
        .rows()
        .into_iter()
        .map(|r| {
            let m = r.sum() / f as f64;
            r.iter().map(|v| v - m).collect()
        })
        .collect();
    let norms: Vec<f64> = centered.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    for (i, n) in norms.iter().enumerate() {
        if *n == 0.0 {
            log::warn!("channel {i} is constant; its correlations are set to 0");
        }
    }
    Array2::from_shape_fn((c, c), |(i, j)| {
        if i == j {
            1.0
        } else if norms[i] == 0.0 || norms[j] == 0.0 {
            0.0
        } else {
            let dot: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
            (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
        }
    })
}

/// Element-wise mean of per-window maps.
pub fn mean_corr_map(windows: &[Array2<f64>]) -> Option<Array2<f64>> {
    let first = windows.first()?;
    let mut acc = Array2::zeros(first.dim());
    for w in windows {
        acc += w;
    }
    Some(acc / windows.len() as f64)
}

/// Rescales entries to `[0, 1]`; a constant map becomes all zeros.
pub fn min_max_normalize(map: &Array2<f64>) -> Array2<f64> {
    let lo = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        map.mapv(|v| (v - lo) / (hi - lo))
    } else {
        Array2::zeros(map.dim())
    }
}

/// `(i, j)` with `i < j` of the largest off-diagonal entry.
pub fn argmax_off_diagonal(map: &Array2<f64>) -> Option<(usize, usize)> {
    let c = map.nrows();
    let mut best: Option<((usize, usize), f64)> = None;
    for i in 0..c {
        for j in i + 1..c {
            let v = map[(i, j)];
            if best.is_none_or(|(_, b)| v > b) {
                best = Some(((i, j), v));
            }
        }
    }
    best.map(|(ij, _)| ij)
}

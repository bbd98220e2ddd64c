//! Token plumbing for the latent transformer: patch flattening, fixed
//! positional tables, and scalar-to-vector embeddings.

use ndarray::{Array1, Array2, Array3};

/// (c, h, w) latent -> (tokens, c * p * p) matrix, row-major over the
/// (h/p, w/p) patch grid. Exact inverse of [`unpatchify`].
pub fn patchify(z: &Array3<f64>, p: usize) -> Array2<f64> {
    let (c, h, w) = z.dim();
    assert!(p > 0 && h % p == 0 && w % p == 0, "patch {p} must divide {h}x{w}");
    let (gh, gw) = (h / p, w / p);
    let mut out = Array2::zeros((gh * gw, c * p * p));
    for gy in 0..gh {
        for gx in 0..gw {
            let tok = gy * gw + gx;
            let mut col = 0;
            for ch in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        out[(tok, col)] = z[(ch, gy * p + py, gx * p + px)];
                        col += 1;
                    }
                }
            }
        }
    }
    out
}

pub fn unpatchify(tokens: &Array2<f64>, p: usize, c: usize, h: usize, w: usize) -> Array3<f64> {
    let (gh, gw) = (h / p, w / p);
    assert_eq!(tokens.dim(), (gh * gw, c * p * p), "token grid mismatch");
    let mut out = Array3::zeros((c, h, w));
    for gy in 0..gh {
        for gx in 0..gw {
            let tok = gy * gw + gx;
            let mut col = 0;
            for ch in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        out[(ch, gy * p + py, gx * p + px)] = tokens[(tok, col)];
                        col += 1;
                    }
                }
            }
        }
    }
    out
}

/// Sinusoidal features of a nonnegative scalar, sin in the first half and
/// cos in the second, geometric frequency ladder with base 10000.
pub fn sinusoidal_embedding(value: f64, dim: usize) -> Array1<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let denom = if half == 1 { 1.0 } else { (half - 1) as f64 };
        let freq = (10000f64).powf(-(i as f64) / denom);
        out[i] = (value * freq).sin();
        out[half + i] = (value * freq).cos();
    }
    out
}

/// Fixed 2D sin-cos position table over a (gh, gw) token grid, matching the
/// row-major token order of [`patchify`]. `dim` must be divisible by 4: one
/// half encodes the row index, the other the column index.
pub fn posemb_2d(gh: usize, gw: usize, dim: usize) -> Array2<f64> {
    assert!(dim % 4 == 0, "positional dim must be divisible by 4");
    let half = dim / 2;
    let mut out = Array2::zeros((gh * gw, dim));
    for gy in 0..gh {
        for gx in 0..gw {
            let tok = gy * gw + gx;
            let ey = sinusoidal_embedding(gy as f64, half);
            let ex = sinusoidal_embedding(gx as f64, half);
            for i in 0..half {
                out[(tok, i)] = ey[i];
                out[(tok, half + i)] = ex[i];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_roundtrip_is_exact() {
        let z = Array3::from_shape_fn((3, 8, 6), |(c, y, x)| (100 * c + 10 * y + x) as f64);
        let toks = patchify(&z, 2);
        assert_eq!(toks.dim(), (4 * 3, 12));
        let back = unpatchify(&toks, 2, 3, 8, 6);
        assert_eq!(z, back);
    }

    #[test]
    fn patchify_token_order_is_row_major() {
        let z = Array3::from_shape_fn((1, 4, 4), |(_, y, x)| (y * 4 + x) as f64);
        let toks = patchify(&z, 2);
        // Token 1 is the top-right patch; its first element is pixel (0, 2).
        assert_eq!(toks[(1, 0)], 2.0);
        // Token 2 is the bottom-left patch.
        assert_eq!(toks[(2, 0)], 8.0);
    }

    #[test]
    fn sinusoidal_embedding_is_bounded_and_distinct() {
        let a = sinusoidal_embedding(3.0, 16);
        let b = sinusoidal_embedding(4.0, 16);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
        assert!(a.iter().zip(b.iter()).any(|(x, y)| (x - y).abs() > 1e-3));
        // Highest-index entry is cos at the lowest frequency; near 1 for small values.
        assert!(a[15] > 0.99);
    }

    #[test]
    fn position_table_distinguishes_rows_and_columns() {
        let p = posemb_2d(4, 4, 16);
        assert_eq!(p.dim(), (16, 16));
        for a in 0..16 {
            for b in (a + 1)..16 {
                let d: f64 = (0..16).map(|i| (p[(a, i)] - p[(b, i)]).powi(2)).sum();
                assert!(d > 1e-6, "tokens {a} and {b} share a position code");
            }
        }
    }
}

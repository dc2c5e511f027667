//! Exact Euclidean distance transforms.
//!
//! Separable squared-distance transform over a regular grid, one lower-envelope
//! pass per axis. Each axis may carry its own physical sample spacing, so the
//! result is an exact squared Euclidean distance in physical units to the
//! nearest seed sample. Unit tests compare against an all-pairs brute force.

use ndarray::{Array2, Array3, Axis};

const INF: f64 = f64::INFINITY;

/// One-dimensional squared distance transform of a sampled function `f`,
/// where sample `i` sits at physical position `i * spacing`.
///
/// Computes `out[p] = min_q (spacing^2 * (p - q)^2 + f[q])` via the lower
/// envelope of parabolas. `f` entries may be `INF` (no seed at that sample).
fn dt_1d(f: &[f64], spacing: f64, out: &mut [f64]) {
    let n = f.len();
    debug_assert_eq!(n, out.len());
    let a = spacing * spacing;
    // Vertices and boundaries of the parabola lower envelope.
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let mut started = false;
    for q in 0..n {
        if f[q] == INF {
            continue;
        }
        if !started {
            v[0] = q;
            z[0] = -INF;
            z[1] = INF;
            k = 0;
            started = true;
            continue;
        }
        loop {
            let r = v[k];
            // Intersection of the parabolas rooted at q and r.
            let s = ((f[q] + a * (q * q) as f64) - (f[r] + a * (r * r) as f64))
                / (2.0 * a * (q as f64 - r as f64));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[0] = -INF;
                    z[1] = INF;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = INF;
                break;
            }
        }
    }
    if !started {
        out.fill(INF);
        return;
    }
    let mut k = 0usize;
    for p in 0..n {
        while z[k + 1] < p as f64 {
            k += 1;
        }
        let q = v[k];
        let d = p as f64 - q as f64;
        out[p] = a * d * d + f[q];
    }
}

fn transform_along<D: ndarray::Dimension>(
    field: &mut ndarray::Array<f64, D>,
    axis: Axis,
    spacing: f64,
) {
    let len = field.len_of(axis);
    let mut line = vec![0.0f64; len];
    let mut out = vec![0.0f64; len];
    for mut lane in field.lanes_mut(axis) {
        for (dst, src) in line.iter_mut().zip(lane.iter()) {
            *dst = *src;
        }
        dt_1d(&line, spacing, &mut out);
        for (dst, src) in lane.iter_mut().zip(out.iter()) {
            *dst = *src;
        }
    }
}

/// Squared Euclidean distance (physical units) from every pixel to the nearest
/// seed pixel. Pixels of an all-false seed grid map to `INF`.
///
/// `seed` is indexed `[y, x]`, `spacing` is `(sx, sy)`.
pub fn squared_edt_2d(seed: &Array2<bool>, spacing: (f64, f64)) -> Array2<f64> {
    let mut field = seed.mapv(|s| if s { 0.0 } else { INF });
    transform_along(&mut field, Axis(1), spacing.0);
    transform_along(&mut field, Axis(0), spacing.1);
    field
}

/// 3D analogue of [`squared_edt_2d`]. `seed` is indexed `[z, y, x]`,
/// `spacing` is `(sx, sy, sz)`.
pub fn squared_edt_3d(seed: &Array3<bool>, spacing: (f64, f64, f64)) -> Array3<f64> {
    let mut field = seed.mapv(|s| if s { 0.0 } else { INF });
    transform_along(&mut field, Axis(2), spacing.0);
    transform_along(&mut field, Axis(1), spacing.1);
    transform_along(&mut field, Axis(0), spacing.2);
    field
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force_2d(seed: &Array2<bool>, spacing: (f64, f64)) -> Array2<f64> {
        let (h, w) = seed.dim();
        let mut out = Array2::from_elem((h, w), INF);
        for y in 0..h {
            for x in 0..w {
                let mut best = INF;
                for sy in 0..h {
                    for sx in 0..w {
                        if seed[[sy, sx]] {
                            let dx = (x as f64 - sx as f64) * spacing.0;
                            let dy = (y as f64 - sy as f64) * spacing.1;
                            best = best.min(dx * dx + dy * dy);
                        }
                    }
                }
                out[[y, x]] = best;
            }
        }
        out
    }

    #[test]
    fn single_seed_2d() {
        let mut seed = Array2::from_elem((11, 11), false);
        seed[[5, 5]] = true;
        let d = squared_edt_2d(&seed, (1.0, 1.0));
        assert_eq!(d[[5, 5]], 0.0);
        assert_eq!(d[[5, 8]], 9.0);
        assert_eq!(d[[8, 5]], 9.0);
        assert_eq!(d[[0, 0]], 50.0);
    }

    #[test]
    fn empty_seed_is_infinite() {
        let seed = Array2::from_elem((4, 4), false);
        let d = squared_edt_2d(&seed, (1.0, 1.0));
        assert!(d.iter().all(|v| *v == INF));
    }

    #[test]
    fn matches_brute_force_2d_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..20 {
            let seed = Array2::from_shape_fn((13, 9), |_| rng.gen_bool(0.2));
            let spacing = (0.5 + 0.1 * (trial % 4) as f64, 0.7);
            let fast = squared_edt_2d(&seed, spacing);
            let slow = brute_force_2d(&seed, spacing);
            for (a, b) in fast.iter().zip(slow.iter()) {
                if a.is_infinite() {
                    assert!(b.is_infinite());
                } else {
                    assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn matches_brute_force_3d_anisotropic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let seed = Array3::from_shape_fn((6, 7, 5), |_| rng.gen_bool(0.15));
        let spacing = (0.8, 1.1, 2.5);
        let fast = squared_edt_3d(&seed, spacing);
        let (zn, yn, xn) = seed.dim();
        for z in 0..zn {
            for y in 0..yn {
                for x in 0..xn {
                    let mut best = INF;
                    for sz in 0..zn {
                        for sy in 0..yn {
                            for sx in 0..xn {
                                if seed[[sz, sy, sx]] {
                                    let dx = (x as f64 - sx as f64) * spacing.0;
                                    let dy = (y as f64 - sy as f64) * spacing.1;
                                    let dz = (z as f64 - sz as f64) * spacing.2;
                                    best = best.min(dx * dx + dy * dy + dz * dz);
                                }
                            }
                        }
                    }
                    let got = fast[[z, y, x]];
                    if best.is_infinite() {
                        assert!(got.is_infinite());
                    } else {
                        assert!((got - best).abs() <= 1e-9);
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn seeds_are_zero_and_all_finite_when_any_seed(
            bits in proptest::collection::vec(any::<bool>(), 36),
        ) {
            let seed = Array2::from_shape_vec((6, 6), bits).unwrap();
            let d = squared_edt_2d(&seed, (1.0, 1.0));
            let any = seed.iter().any(|b| *b);
            for (s, v) in seed.iter().zip(d.iter()) {
                if *s {
                    prop_assert_eq!(*v, 0.0);
                } else if any {
                    prop_assert!(v.is_finite() && *v >= 1.0);
                }
            }
        }
    }
}

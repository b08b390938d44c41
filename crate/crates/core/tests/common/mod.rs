//! Reference values and brute-force oracles that do not go through the library.
#![allow(dead_code)]

/// Table 1 of the paper: (epsilon, error) for uniform a=2, N=2.
pub const TABLE1: [(f64, f64); 7] = [
    (0.256, 0.1529),
    (0.128, 0.0984),
    (0.064, 0.0578),
    (0.032, 0.0313),
    (0.016, 0.0151),
    (0.008, 0.0049),
    (0.004, 0.0045),
];

/// Table 2 of the paper: (epsilon, error) for uniform on [0,1], N=3, M=1000.
pub const TABLE2: [(f64, f64); 5] = [(0.32, 0.0658), (0.16, 0.0373), (0.08, 0.0198), (0.04, 0.0097), (0.02, 0.0040)];

/// Two electrons, uniform on [-a/2, a/2]: `u' = -sign(x) |x - f(x)|^-2` with `|x - f(x)| = a/2`.
pub fn pair_potential(a: f64, x: f64) -> f64 {
    -4.0 * x.abs() / (a * a)
}

/// Three electrons, uniform on [0,1]: integrate `u' = -sum (x - f_i)/|x - f_i|^3`
/// with `f_2, f_3` the shifts by 1/3 and 2/3 modulo 1.
pub fn triple_potential(x: f64) -> f64 {
    if x <= 1.0 / 3.0 {
        45.0 / 4.0 * x
    } else if x <= 2.0 / 3.0 {
        15.0 / 4.0
    } else {
        45.0 / 4.0 * (1.0 - x)
    }
}

/// Uniform unit ball in 3D: `R(r) = r^3`, so `a(r) = (1 - r^3)^(1/3)`.
pub fn ball_map(r: f64) -> f64 {
    (1.0 - r.powi(3)).max(0.0).cbrt()
}

/// `(max d - min d) / 2 / max |exact|` over points with positive weight.
pub fn shifted_linf(values: &[f64], exact: &[f64], weights: &[f64]) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut scale = 0.0f64;
    for ((v, e), w) in values.iter().zip(exact).zip(weights) {
        if *w > 0.0 {
            lo = lo.min(v - e);
            hi = hi.max(v - e);
            scale = scale.max(e.abs());
        }
    }
    (hi - lo) / 2.0 / scale
}

/// Minimum of `sum_i cost[i][p(i)] / n` over all permutations, by Heap's algorithm.
pub fn assignment_brute_force(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let eval = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>() / n as f64;
    let mut best = eval(&perm);
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(eval(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

/// `|sum phi(f(x_j)) w_j - sum phi(x_j) w_j|`.
pub fn pushforward_gap(points: &[f64], weights: &[f64], f: impl Fn(f64) -> f64, phi: impl Fn(f64) -> f64) -> f64 {
    let moved: f64 = points.iter().zip(weights).map(|(x, w)| phi(f(*x)) * w).sum();
    let fixed: f64 = points.iter().zip(weights).map(|(x, w)| phi(*x) * w).sum();
    (moved - fixed).abs()
}

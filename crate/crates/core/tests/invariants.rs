use std::f64::consts::{FRAC_PI_2, TAU};

use cweyl::discretize::{
    assemble_operator, assemble_perturbation, count_in, eigenvalues, FourierTruncation,
};
use cweyl::domains::{dyadic_decompose, weyl_measure, SpectralDomain, WeylOptions};
use cweyl::linalg::{norm2, sigma_min};
use cweyl::quasimode::{build_quasimode, default_grid_size, CutoffOptions};
use cweyl::randomness::{sample_draw, CoefficientLaw, SeedSpec};
use cweyl::symbol::fixtures::{f1, f2, f4};
use cweyl::symbol::{
    circle_loop, find_roots, rectangle_loop, winding_number, MatrixSymbol, PhaseSpacePoint, RootOptions, RootSign,
    TrigPolynomial,
};
use cweyl::Complex64 as C;
use proptest::prelude::*;

fn trig() -> impl Strategy<Value = TrigPolynomial<f64>> {
    prop::collection::vec((-3i64..=3, -1.0f64..1.0, -1.0f64..1.0), 0..4).prop_map(|terms| {
        let terms: Vec<(i64, C)> = terms.into_iter().map(|(k, a, b)| (k, C::new(a, b))).collect();
        TrigPolynomial::from_terms(&terms)
    })
}

/// Scalar symbol of order 1..=3 with a constant, nonvanishing leading term.
fn scalar_symbol() -> impl Strategy<Value = MatrixSymbol<f64>> {
    (1usize..=3, 0.5f64..2.0, 0.0f64..TAU, prop::collection::vec(trig(), 3)).prop_map(|(m, r, t, lower)| {
        let mut coeffs: Vec<TrigPolynomial<f64>> = lower.into_iter().take(m).collect();
        coeffs.push(TrigPolynomial::constant(C::from_polar(r, t)));
        MatrixSymbol::scalar(coeffs, true).unwrap()
    })
}

fn point() -> impl Strategy<Value = PhaseSpacePoint<f64>> {
    (0.0f64..TAU, -2.0f64..2.0).prop_map(|(x, xi)| PhaseSpacePoint::new(x, xi))
}

fn z_in(r: f64) -> impl Strategy<Value = C> {
    (-r..r, -r..r).prop_map(|(a, b)| C::new(a, b))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn bracket_is_real(s in scalar_symbol(), pt in point(), z in z_in(3.0)) {
        let (v, residue) = s.bracket_with_residue(pt, z);
        prop_assert!(residue.abs() < 1e-12 * (1.0 + v.abs()), "{v} {residue}");
    }

    #[test]
    fn bracket_changes_sign_under_conjugation(s in scalar_symbol(), pt in point(), z in z_in(3.0)) {
        // det(p* - z̄) = conj q_z for scalar symbols
        let b = s.poisson_bracket_indicator(pt, z);
        let b_bar = s.adjoint().poisson_bracket_indicator(pt, z.conj());
        prop_assert!((b + b_bar).abs() <= 1e-12 * (1.0 + b.abs()), "{b} {b_bar}");
    }

    #[test]
    fn gradient_matches_central_differences(s in scalar_symbol(), pt in point(), z in z_in(3.0)) {
        let (gx, gxi) = s.qz_gradient(pt, z);
        let e = 1e-5;
        let q = |x: f64, xi: f64| s.qz(PhaseSpacePoint::new(x, xi), z);
        let fx = (q(pt.x + e, pt.xi) - q(pt.x - e, pt.xi)) / (2.0 * e);
        let fxi = (q(pt.x, pt.xi + e) - q(pt.x, pt.xi - e)) / (2.0 * e);
        prop_assert!((gx - fx).norm() < 1e-6 * (1.0 + gx.norm()), "{gx} {fx}");
        prop_assert!((gxi - fxi).norm() < 1e-6 * (1.0 + gxi.norm()), "{gxi} {fxi}");
    }

    #[test]
    fn count_m_gamma_is_additive(s in scalar_symbol(), pt in point(), cut in -1.0f64..1.0) {
        let left = SpectralDomain::rectangle(-2.0, cut, -2.0, 2.0);
        let right = SpectralDomain::rectangle(cut, 2.0, -2.0, 2.0);
        let both = SpectralDomain::rectangle(-2.0, 2.0, -2.0, 2.0);
        let spec = s.symbol_spectrum(pt).unwrap();
        prop_assume!(spec.iter().all(|z| (z.re - cut).abs() > 1e-9));
        let m = |d: &SpectralDomain<f64>| s.count_m_gamma(pt, d).unwrap();
        prop_assert_eq!(m(&left) + m(&right), m(&both));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn beta_equals_gamma_and_windings_cancel(s in scalar_symbol(), z in z_in(2.0)) {
        let inv = find_roots(&s, z, &RootOptions::default()).unwrap();
        prop_assume!(!inv.degenerate);
        prop_assert_eq!(inv.beta, inv.gamma);
        if inv.roots.is_empty() {
            return Ok(());
        }
        // loops small enough to separate the roots
        let mut sep = f64::INFINITY;
        for (a, r) in inv.roots.iter().enumerate() {
            for q in &inv.roots[a + 1..] {
                let dx = (r.point.x - q.point.x).rem_euclid(TAU);
                sep = sep.min(dx.min(TAU - dx).hypot(r.point.xi - q.point.xi));
            }
        }
        let radius = (sep / 4.0).min(1e-3);
        let mut total = 0;
        for r in &inv.roots {
            let w = winding_number(&s, z, &circle_loop((r.point.x, r.point.xi), radius, 64)).unwrap();
            prop_assert_eq!(w, if r.sign == RootSign::Minus { 1 } else { -1 });
            total += w;
        }
        let xi = s.xi_window(z.norm());
        // the bottom edge must avoid roots; shift it off any root base point
        let x0 = (0..8)
            .map(|i| 0.05 + 0.37 * i as f64)
            .find(|x0| inv.roots.iter().all(|r| (r.point.x - x0).rem_euclid(TAU).min((x0 - r.point.x).rem_euclid(TAU)) > 1e-3))
            .unwrap();
        let boundary = winding_number(&s, z, &rectangle_loop(x0, x0 + TAU, -xi, xi, 256)).unwrap();
        prop_assert_eq!(total, 0);
        prop_assert_eq!(boundary, 0);
    }

    #[test]
    fn assembly_is_linear(seed in any::<u64>(), delta in 0.0f64..0.5, h in prop::sample::select(vec![0.5, 0.25, 0.125])) {
        let s = f2::<f64>();
        let t = FourierTruncation::new(24, 1, h).unwrap();
        let law = CoefficientLaw::standard(0, 1, 1, 1.2, 6).unwrap();
        let draw = sample_draw(&law, &SeedSpec::new(seed, "linear", 0), h);
        // P - δQ as one symbol: F2 is ξ² + i e^{ix}
        let norm = -delta / TAU.sqrt();
        let q: Vec<Vec<(i64, C)>> = (0..=1)
            .map(|alpha| (-6..=6).map(|k| (k, draw.get(alpha, 0, 0, k) * norm)).collect())
            .collect();
        let mut a0 = q[0].clone();
        a0.push((1, C::new(0.0, 1.0)));
        let layers = vec![
            TrigPolynomial::from_terms(&a0),
            TrigPolynomial::from_terms(&q[1]),
            TrigPolynomial::constant(C::new(1.0, 0.0)),
        ];
        let sum = MatrixSymbol::scalar(layers, true).unwrap();
        let combined = assemble_operator(&sum, &t).unwrap();
        let split = assemble_operator(&s, &t)
            .unwrap()
            .minus_perturbation(&assemble_perturbation(&draw, &t, delta).unwrap())
            .unwrap();
        let n = t.dim();
        for i in 0..n {
            for j in 0..n {
                let (a, b) = (combined.entries[(i, j)], split.entries[(i, j)]);
                prop_assert!((a - b).norm() <= 4.0 * f64::EPSILON * (1.0 + a.norm()), "({i},{j}) {a} {b}");
            }
        }
    }

    #[test]
    fn eigenpairs_have_small_backward_error(seed in any::<u64>(), delta in 1e-6f64..1e-1) {
        let s = f2::<f64>();
        let t = FourierTruncation::rule(&s, 0.75, 0.2, 2.0).unwrap();
        let law = CoefficientLaw::standard(0, 0, 1, 1.2, 2 * t.k_max).unwrap();
        let draw = sample_draw(&law, &SeedSpec::new(seed, "backward", 0), 0.2);
        let m = assemble_operator(&s, &t).unwrap().minus_perturbation(&assemble_perturbation(&draw, &t, delta).unwrap()).unwrap();
        let scale = norm2(&m.entries);
        let eigs = eigenvalues(&m).unwrap();
        prop_assert_eq!(eigs.len(), t.dim());
        for lam in eigs {
            prop_assert!(sigma_min(&m.shifted(lam)) <= 1e-8 * scale, "{lam}");
        }
    }

    #[test]
    fn counts_are_conserved(seed in any::<u64>(), a in -1.0f64..1.0, b in -1.0f64..1.0, c in -1.0f64..1.0, d in -1.0f64..1.0) {
        let s = f2::<f64>();
        let t = FourierTruncation::new(12, 1, 0.2).unwrap();
        let law = CoefficientLaw::standard(0, 0, 1, 1.2, 24).unwrap();
        let draw = sample_draw(&law, &SeedSpec::new(seed, "count", 0), 0.2);
        let m = assemble_operator(&s, &t).unwrap().minus_perturbation(&assemble_perturbation(&draw, &t, 1e-3).unwrap()).unwrap();
        let eigs = eigenvalues(&m).unwrap();
        let g = SpectralDomain::rectangle(a.min(b), a.max(b), c.min(d), c.max(d));
        let outside = eigs.iter().filter(|z| !g.contains(**z)).count();
        prop_assert_eq!(count_in(&eigs, &g) + outside, t.dim());
    }

    #[test]
    fn draws_do_not_depend_on_evaluation_order(seed in any::<u64>(), trial in 0u64..1000, perm in Just(()).prop_perturb(|_, mut rng| {
        let mut v: Vec<i64> = (-8..=8).collect();
        for i in (1..v.len()).rev() {
            let j = (rng.next_u64() % (i as u64 + 1)) as usize;
            v.swap(i, j);
        }
        v
    })) {
        let sd = SeedSpec::new(seed, "order", trial);
        let law = CoefficientLaw::standard(0, 1, 2, 1.2, 8).unwrap();
        let draw = sample_draw(&law, &sd, 0.1);
        for &k in &perm {
            for alpha in 0..=1 {
                for i in 0..2 {
                    for j in 0..2 {
                        let sigma = cweyl::randomness::sigma_of(&law, alpha, i, j, k, 0.1);
                        prop_assert_eq!(draw.get(alpha, i, j, k), sd.unit_gaussian(alpha, i, j, k) * sigma);
                    }
                }
            }
        }
        prop_assert_eq!(&draw, &sample_draw(&law, &sd, 0.1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn weyl_measure_is_monotone(a in 0.05f64..0.5, b in 0.05f64..0.5, grow in 0.05f64..0.4) {
        let s = f1::<f64>();
        let opts = WeylOptions::default();
        let inner = weyl_measure(&s, &SpectralDomain::rectangle(-a, a, -b, b), &opts).unwrap();
        let outer = weyl_measure(&s, &SpectralDomain::rectangle(-a - grow, a + grow, -b - grow / 2.0, b + grow / 2.0), &opts).unwrap();
        let tol = opts.tol_abs.max(opts.tol_rel * outer.value);
        prop_assert!(inner.value <= outer.value + tol, "{} {}", inner.value, outer.value);
    }

    #[test]
    fn dyadic_pieces_add_up(lambda in 1.0f64..40.0) {
        let s = f4::<f64>();
        let opts = WeylOptions::default();
        let sector = SpectralDomain::constant_sector(0.3, FRAC_PI_2, 0.0, 1.0).unwrap();
        let pieces = dyadic_decompose(lambda, &sector).unwrap();
        let whole = weyl_measure(&s, &sector.dilate(lambda).unwrap(), &opts).unwrap().value;
        let sum: f64 = pieces.pieces().map(|p| weyl_measure(&s, p, &opts).unwrap().value).sum();
        let tol = opts.tol_abs.max(opts.tol_rel * whole);
        prop_assert!((sum - whole).abs() <= 3.0 * tol, "{sum} {whole}");
    }

    #[test]
    fn homogeneous_scaling(theta in 0.2f64..1.2, l in prop::sample::select(vec![2.0f64, 4.0, 8.0])) {
        let s = f4::<f64>();
        let opts = WeylOptions::default();
        let sector = SpectralDomain::constant_sector(0.1, 0.1 + theta, 0.0, 1.0).unwrap();
        let base = weyl_measure(&s, &sector, &opts).unwrap().value;
        let big = weyl_measure(&s, &sector.dilate(l).unwrap(), &opts).unwrap().value;
        prop_assert!((big - l.sqrt() * base).abs() <= 3.0 * opts.tol_rel * big, "{big} {base}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn eikonal_and_phase_positivity(r in 0.1f64..0.7, t in 0.0f64..TAU, h in prop::sample::select(vec![0.1, 0.05])) {
        let s = f2::<f64>();
        let z = C::from_polar(r, t);
        let inv = find_roots(&s, z, &RootOptions::default()).unwrap();
        prop_assume!(!inv.degenerate);
        let root = *inv.plus_roots().next().unwrap();
        let k = FourierTruncation::rule(&s, r, h, 2.0).unwrap().k_max;
        let q = build_quasimode(&s, z, &root, h, default_grid_size(k), &CutoffOptions::default()).unwrap();
        let ph = &q.phase;
        for i in 0..ph.len() {
            let x = ph.node(i);
            prop_assert!(s.qz_complex(x, ph.xi[i], z).norm() < 1e-8, "eikonal at {x}");
            if (x - ph.x_root).abs() <= q.cutoff.support {
                prop_assert!(ph.phi[i].im >= -1e-12, "Im φ {} at {x}", ph.phi[i].im);
            }
        }
        prop_assert!(q.cutoff.im_phi_at_edge >= CutoffOptions::<f64>::default().min_edge_im_phi);
    }
}

#[test]
fn complex_gaussian_convention() {
    let n = 10_000u64;
    let sd = |t| SeedSpec::new(99, "convention", t);
    let samples: Vec<C> = (0..n).map(|t| sd(t).unit_gaussian(0, 0, 0, 0)).collect();
    let mean = |f: &dyn Fn(&C) -> f64| samples.iter().map(f).sum::<f64>() / n as f64;
    let rr = mean(&|q| q.re * q.re);
    let ii = mean(&|q| q.im * q.im);
    let ri = mean(&|q| q.re * q.im);
    // Var(x²) = 2σ⁴ = 0.5 for σ² = 1/2, Var(xy) = 1/4
    let se_sq = (0.5f64 / n as f64).sqrt();
    let se_cross = (0.25f64 / n as f64).sqrt();
    assert!((rr - 0.5).abs() < 3.0 * se_sq, "{rr}");
    assert!((ii - 0.5).abs() < 3.0 * se_sq, "{ii}");
    assert!(ri.abs() < 3.0 * se_cross, "{ri}");
}

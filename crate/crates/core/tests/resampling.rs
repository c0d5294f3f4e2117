mod common;

use common::{max_abs_diff, rand_tensor};
use fcn_core::gradcheck::{check_graph, numeric_gradient, GradReport, STEP};
use fcn_core::graph::Graph;
use fcn_core::layers::{ConvParams, PoolKind, PoolParams};
use fcn_core::resampling::{
    bilinear_kernel, dilate_graph, shift_and_stitch, shift_and_stitch_with_stride, upsample_backward,
    upsample_forward, UpsampleParams,
};
use fcn_core::{Dims, Error, Tensor};
use proptest::prelude::*;

/// Classical bilinear interpolation with output `u` at input `(u + ½)/f − ½`,
/// or `None` when a neighbour falls outside the input.
fn bilinear_at(x: &Tensor, c: usize, f: usize, u: usize, v: usize) -> Option<f64> {
    let d = x.dims();
    let pos = |o: usize| (o as f64 + 0.5) / f as f64 - 0.5;
    let (py, px) = (pos(u), pos(v));
    let (y0, x0) = (py.floor(), px.floor());
    if y0 < 0.0 || x0 < 0.0 {
        return None;
    }
    let (y0, x0) = (y0 as usize, x0 as usize);
    let (y1, x1) = ((y0 + 1).min(d.h - 1), (x0 + 1).min(d.w - 1));
    let (ty, tx) = (py - y0 as f64, px - x0 as f64);
    if (ty > 0.0 && y0 + 1 >= d.h) || (tx > 0.0 && x0 + 1 >= d.w) {
        return None;
    }
    let a = x.at(0, c, y0, x0) * (1.0 - tx) + x.at(0, c, y0, x1) * tx;
    let b = x.at(0, c, y1, x0) * (1.0 - tx) + x.at(0, c, y1, x1) * tx;
    Some(a * (1.0 - ty) + b * ty)
}

#[test]
fn bilinear_kernel_matches_classical_interpolation() {
    for f in 1..=4 {
        let x = rand_tensor(Dims::new(1, 2, 7, 6), f as u64);
        let y = upsample_forward(&x, &bilinear_kernel(f, 2).unwrap()).unwrap();
        assert_eq!(y.dims(), Dims::new(1, 2, 7 * f, 6 * f));
        let mut checked = 0;
        for c in 0..2 {
            for u in 0..7 * f {
                for v in 0..6 * f {
                    if let Some(e) = bilinear_at(&x, c, f, u, v) {
                        assert!((y.at(0, c, u, v) - e).abs() < 1e-12, "f {f} at ({u}, {v})");
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 0);
    }
}

#[test]
fn bilinear_on_a_ramp_is_exact() {
    let x = Tensor::from_fn(Dims::new(1, 1, 6, 6), |_, _, i, j| 2.0 * i as f64 - 0.5 * j as f64).unwrap();
    let y = upsample_forward(&x, &bilinear_kernel(2, 1).unwrap()).unwrap();
    for u in 1..11 {
        for v in 1..11 {
            let (py, px) = ((u as f64 + 0.5) / 2.0 - 0.5, (v as f64 + 0.5) / 2.0 - 0.5);
            assert!((y.at(0, 0, u, v) - (2.0 * py - 0.5 * px)).abs() < 1e-12);
        }
    }
}

#[test]
fn upsampling_adjoint_identity() {
    for seed in 0..50u64 {
        let f = 1 + (seed as usize % 4);
        let mut p = bilinear_kernel(f, 3).unwrap();
        p.kernel = rand_tensor(p.kernel.dims(), seed + 500);
        let x = rand_tensor(Dims::new(2, 3, 4 + seed as usize % 3, 5), seed);
        let y = rand_tensor(upsample_forward(&x, &p).unwrap().dims(), seed + 1000);
        let lhs = upsample_forward(&x, &p).unwrap().dot(&y).unwrap();
        let rhs = x.dot(&upsample_backward(&x, &p, &y).unwrap().0).unwrap();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "seed {seed}: {lhs} vs {rhs}");
    }
}

#[test]
fn kernel_gradient_finite_differences() {
    for f in 1..=4 {
        let x = rand_tensor(Dims::new(1, 2, 4, 3), 10 + f as u64);
        let mut p = bilinear_kernel(f, 2).unwrap();
        p.kernel = rand_tensor(p.kernel.dims(), 20 + f as u64);
        let r = rand_tensor(upsample_forward(&x, &p).unwrap().dims(), 30);
        let (gx, gk) = upsample_backward(&x, &p, &r).unwrap();
        let nk = numeric_gradient(
            |v| {
                let q = UpsampleParams {
                    kernel: Tensor::from_vec(p.kernel.dims(), v.to_vec())?,
                    ..p.clone()
                };
                upsample_forward(&x, &q)?.dot(&r)
            },
            p.kernel.data(),
            STEP,
        )
        .unwrap();
        let nx = numeric_gradient(
            |v| upsample_forward(&Tensor::from_vec(x.dims(), v.to_vec())?, &p)?.dot(&r),
            x.data(),
            STEP,
        )
        .unwrap();
        let mut rep = GradReport::default();
        rep.compare("k", gk.data(), &nk);
        rep.compare("x", gx.data(), &nx);
        assert!(rep.max_rel_err < 1e-6, "f {f}: {}", rep.worst);
    }
}

#[test]
fn unit_factor_round_trips_through_subsampling() {
    let x = rand_tensor(Dims::new(1, 2, 5, 4), 3);
    let y = upsample_forward(&x, &bilinear_kernel(1, 2).unwrap()).unwrap();
    assert_eq!(y, x);
}

#[test]
fn learnable_nonlinear_upsampling_stack_passes_gradient_checks() {
    let mut g = Graph::new();
    let x = g.input("data").unwrap();
    let mut p1 = bilinear_kernel(2, 2).unwrap();
    p1.kernel = rand_tensor(p1.kernel.dims(), 41);
    let u1 = g.upsample("u1", x, p1).unwrap();
    let r1 = g.relu("r1", u1).unwrap();
    let mut p2 = bilinear_kernel(3, 2).unwrap();
    p2.kernel = rand_tensor(p2.kernel.dims(), 42);
    let u2 = g.upsample("u2", r1, p2).unwrap();
    g.set_output(u2).unwrap();
    for seed in 0..5 {
        let rep = check_graph(&mut g, &rand_tensor(Dims::new(1, 2, 3, 4), seed), seed, STEP).unwrap();
        assert!(rep.max_rel_err < 1e-6, "{}", rep.worst);
    }
}

fn conv(g: &mut Graph, name: &str, input: usize, out_c: usize, in_c: usize, k: usize, s: usize, seed: u64) -> usize {
    let w = rand_tensor(Dims::new(out_c, in_c, k, k), seed);
    let b = (0..out_c).map(|i| 0.1 * i as f64).collect();
    g.conv(name, input, ConvParams::new(w, b, s, 0, 1).unwrap()).unwrap()
}

#[test]
fn unit_stride_shift_and_stitch_is_plain_forward() {
    let mut g = Graph::new();
    let x = g.input("data").unwrap();
    let c = conv(&mut g, "c", x, 2, 2, 3, 1, 1);
    g.set_output(c).unwrap();
    let input = rand_tensor(Dims::new(1, 2, 8, 8), 2);
    let plain = g.forward_single(&input).unwrap();
    assert_eq!(shift_and_stitch(&mut g, &input).unwrap(), plain);
    assert!(matches!(shift_and_stitch_with_stride(&mut g, &input, 2), Err(Error::InvalidInput(_))));
}

#[test]
fn single_pool_stitching_unrolls_the_definition() {
    let mut g = Graph::new();
    let x = g.input("data").unwrap();
    let p = g.pool("p", x, PoolParams::max(2, 2)).unwrap();
    g.set_output(p).unwrap();
    let input = rand_tensor(Dims::new(1, 1, 8, 8), 3);
    let dense = shift_and_stitch(&mut g, &input).unwrap();
    for i in 0..8 {
        for j in 0..8 {
            let (dy, dx) = (i % 2, j % 2);
            let shifted = Tensor::from_fn(input.dims(), |n, c, a, b| {
                if a + dy < 8 && b + dx < 8 {
                    input.at(n, c, a + dy, b + dx)
                } else {
                    0.0
                }
            })
            .unwrap();
            let y = g.forward_single(&shifted).unwrap();
            assert_eq!(dense.at(0, 0, i, j), y.at(0, 0, i / 2, j / 2));
        }
    }
}

/// Random line net with total stride `f` and no padding.
fn random_strided_net(seed: u64, f: usize) -> Graph {
    let mut g = Graph::new();
    let mut cur = g.input("data").unwrap();
    let mut ch = 2;
    let mut stride = 1;
    let mut i = 0;
    while stride < f || i < 2 {
        let k = 1 + (seed as usize + i) % 3;
        let out_c = 2 + (seed as usize + i) % 2;
        cur = conv(&mut g, &format!("c{i}"), cur, out_c, ch, k, 1, seed * 31 + i as u64);
        ch = out_c;
        cur = g.relu(&format!("r{i}"), cur).unwrap();
        if stride < f {
            let kind = if (seed + i as u64) % 2 == 0 { PoolKind::Max } else { PoolKind::Average };
            let kernel = 2 + (seed as usize + i) % 2;
            cur = g
                .pool(
                    &format!("p{i}"),
                    cur,
                    PoolParams {
                        kind,
                        kernel,
                        stride: 2,
                        pad: 0,
                        dilation: 1,
                    },
                )
                .unwrap();
            stride *= 2;
        }
        i += 1;
    }
    cur = conv(&mut g, "score", cur, 2, ch, 1 + seed as usize % 2, 1, seed * 31 + 99);
    g.set_output(cur).unwrap();
    g
}

/// Rarefied-filter dense output must equal the stitched output wherever the
/// dense net produces a value.
fn assert_stitch_equals_dilation(seed: u64, f: usize) {
    let mut g = random_strided_net(seed, f);
    let x = rand_tensor(Dims::new(1, 2, 24, 24), seed + 7);
    let stitched = shift_and_stitch_with_stride(&mut g, &x, f).unwrap();
    let mut d = dilate_graph(&g).unwrap();
    let dense = d.forward_single(&x).unwrap();
    let (dd, sd) = (dense.dims(), stitched.dims());
    assert!(sd.h >= dd.h && sd.w >= dd.w, "stitched {sd} smaller than dense {dd}");
    let window = stitched.crop(0, 0, dd.h, dd.w).unwrap();
    assert!(max_abs_diff(&window, &dense) <= 1e-10, "seed {seed} f {f}");
}

#[test]
fn stitching_equals_dilation_on_twenty_random_nets() {
    for seed in 0..20u64 {
        assert_stitch_equals_dilation(seed, if seed % 2 == 0 { 2 } else { 4 });
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn stitching_equals_dilation(seed in 100u64..10_000, four in any::<bool>()) {
        assert_stitch_equals_dilation(seed, if four { 4 } else { 2 });
    }
}

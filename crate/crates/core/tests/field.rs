use fcn_core::field::{
    chain, chain_from, compose, crop_offset, field_crop, graph_fields, measure_field, ComposedField,
    FieldDescriptor,
};
use fcn_core::graph::Graph;
use fcn_core::layers::{ConvParams, PoolKind, PoolParams};
use fcn_core::resampling::bilinear_kernel;
use fcn_core::skipnet::NetDescription;
use fcn_core::{Dims, Tensor};
use num_rational::Rational64;
use proptest::prelude::*;

fn w(k: usize, s: usize, pad: usize) -> FieldDescriptor {
    FieldDescriptor::window(k, s, pad, 1)
}

fn int(v: i64) -> Rational64 {
    Rational64::from_integer(v)
}

fn vgg16() -> Vec<FieldDescriptor> {
    let mut d = Vec::new();
    for convs in [2, 2, 3, 3, 3] {
        d.extend(std::iter::repeat(w(3, 1, 1)).take(convs));
        d.push(w(2, 2, 0));
    }
    d.extend([w(7, 1, 0), w(1, 1, 0), w(1, 1, 0)]);
    d
}

fn alexnet() -> Vec<FieldDescriptor> {
    vec![
        w(11, 4, 0),
        w(3, 2, 0),
        w(5, 1, 2),
        w(3, 2, 0),
        w(3, 1, 1),
        w(3, 1, 1),
        w(3, 1, 1),
        w(3, 2, 0),
        w(6, 1, 0),
        w(1, 1, 0),
        w(1, 1, 0),
    ]
}

#[test]
fn classification_nets_have_published_fields() {
    let v = chain(&vgg16()).unwrap();
    assert_eq!((v.rf_size, v.eff_stride), (int(404), int(32)));
    let a = chain(&alexnet()).unwrap();
    assert_eq!((a.rf_size, a.eff_stride), (int(355), int(32)));
}

#[test]
fn shipped_net_files_match() {
    let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../cli/nets");
    for (file, rf) in [("vgg16.net", 404), ("alexnet.net", 355)] {
        let desc = NetDescription::load(format!("{root}/{file}")).unwrap();
        let f = chain(&desc.backbone.descriptors()).unwrap();
        assert_eq!((f.rf_size, f.eff_stride), (int(rf), int(32)), "{file}");
    }
}

#[test]
fn rule_examples() {
    let f = chain(&[w(2, 2, 0), w(3, 2, 0)]).unwrap();
    assert_eq!((f.rf_size, f.eff_stride), (int(6), int(4)));
    let single = w(5, 2, 1);
    assert_eq!(chain(&[single]).unwrap(), compose(single, ComposedField::IDENTITY));
    assert_eq!(crop_offset(&vgg16(), &vgg16()).unwrap(), (0, 0));
    let base = [w(2, 2, 0), w(3, 1, 0)];
    let extra = [w(2, 2, 0), w(3, 1, 1), w(3, 1, 0)];
    assert_eq!(crop_offset(&base, &extra).unwrap(), (0, 0));
}

/// Graph realising `descs` with positive conv weights and zero biases, so a
/// zero input gives exactly zero activations and any raised input row wins
/// every max window it reaches.
fn instantiate(descs: &[(FieldDescriptor, bool)]) -> Graph {
    let mut g = Graph::new();
    let mut cur = g.input("data").unwrap();
    for (i, (d, is_pool)) in descs.iter().enumerate() {
        let FieldDescriptor::Window {
            kernel,
            stride,
            pad_before,
            dilation,
        } = *d
        else {
            unreachable!()
        };
        cur = if *is_pool {
            let kind = if i % 2 == 0 { PoolKind::Max } else { PoolKind::Average };
            g.pool(
                &format!("l{i}"),
                cur,
                PoolParams {
                    kind,
                    kernel,
                    stride,
                    pad: pad_before,
                    dilation,
                },
            )
            .unwrap()
        } else {
            let weights =
                Tensor::from_fn(Dims::new(1, 1, kernel, kernel), |_, _, u, v| 0.5 + ((u * 3 + v + i) % 5) as f64 / 10.0)
                    .unwrap();
            g.conv(&format!("l{i}"), cur, ConvParams::new(weights, vec![0.0], stride, pad_before, dilation).unwrap())
                .unwrap()
        };
    }
    g.set_output(cur).unwrap();
    g
}

fn layer() -> impl Strategy<Value = (FieldDescriptor, bool)> {
    (1usize..=7, 1usize..=3, 0usize..=3, 1usize..=3, any::<bool>()).prop_map(|(k, s, pad, d, pool)| {
        let span = (k - 1) * d + 1;
        // Pool windows must always overlap the unpadded input.
        let pad = if pool { pad.min(span - 1) } else { pad };
        (FieldDescriptor::window(k, s, pad, d), pool)
    })
}

fn small_chain() -> impl Strategy<Value = Vec<(FieldDescriptor, bool)>> {
    prop::collection::vec(layer(), 1..=8).prop_filter("field small enough to probe", |ls| {
        let f = chain(&ls.iter().map(|l| l.0).collect::<Vec<_>>()).unwrap();
        f.rf_size <= int(48) && f.eff_stride <= int(9)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn chain_agrees_with_probe(layers in small_chain()) {
        let descs: Vec<FieldDescriptor> = layers.iter().map(|l| l.0).collect();
        let f = chain(&descs).unwrap();
        let half = (f.rf_size - 1) / 2;
        // First output row whose field starts inside the input.
        let mut i = 0i64;
        while f.offset + int(i) * f.eff_stride - half < int(0) {
            i += 1;
        }
        let end = f.offset + int(i + 1) * f.eff_stride + half;
        let extent = end.to_integer() as usize + 2;
        let mut g = instantiate(&layers);
        let x = Tensor::zeros(Dims::new(1, 1, extent, extent)).unwrap();
        let y = g.forward_single(&x).unwrap();
        prop_assume!(y.dims().h > i as usize + 1);
        let m = measure_field(&mut g, &x, (i as usize, i as usize)).unwrap();
        prop_assert_eq!(m, f);
    }

    #[test]
    fn chain_is_associative(layers in prop::collection::vec(layer(), 2..=8), cut in 1usize..8) {
        let descs: Vec<FieldDescriptor> = layers.iter().map(|l| l.0).collect();
        let cut = cut.min(descs.len() - 1);
        let whole = chain(&descs).unwrap();
        let a = chain(&descs[..cut]).unwrap();
        prop_assert_eq!(chain_from(a, &descs[cut..]).unwrap(), whole);
        // Fold the tail on its own first, then attach it to the head.
        let b = chain(&descs[cut..]).unwrap();
        let joined = ComposedField {
            rf_size: a.rf_size + (b.rf_size - 1) * a.eff_stride,
            eff_stride: a.eff_stride * b.eff_stride,
            offset: a.offset + b.offset * a.eff_stride,
        };
        prop_assert_eq!(joined, whole);
    }

    #[test]
    fn crop_offset_is_antisymmetric(a in prop::collection::vec(layer(), 1..=5), b in prop::collection::vec(layer(), 1..=5)) {
        let pa: Vec<FieldDescriptor> = a.iter().map(|l| l.0).collect();
        let pb: Vec<FieldDescriptor> = b.iter().map(|l| l.0).collect();
        match (crop_offset(&pa, &pb), crop_offset(&pb, &pa)) {
            (Ok((x, y)), Ok((u, v))) => prop_assert_eq!((x, y), (-u, -v)),
            (Err(_), Err(_)) => {}
            other => prop_assert!(false, "asymmetric outcome {:?}", other),
        }
    }
}

/// Input row coordinate of the centroid of each output's impulse response,
/// for a linear net with non-negative weights.
fn centroid_rows(g: &mut Graph, extent: usize) -> Tensor {
    let ones = Tensor::new_filled(Dims::new(1, 1, extent, extent), 1.0).unwrap();
    let ramp = Tensor::from_fn(Dims::new(1, 1, extent, extent), |_, _, i, _| i as f64).unwrap();
    let total = g.forward_single(&ones).unwrap();
    let moment = g.forward_single(&ramp).unwrap();
    Tensor::from_vec(total.dims(), moment.data().iter().zip(total.data()).map(|(m, t)| m / t).collect()).unwrap()
}

#[test]
fn fused_streams_align_under_impulse_probing() {
    // Stride-8 stream upsampled ×2 and stride-16 stream upsampled ×4, both
    // landing on a stride-4 grid.
    let mut g = Graph::new();
    let x = g.input("data").unwrap();
    let conv = |g: &mut Graph, name: &str, input, k, pad| {
        let weights = Tensor::new_filled(Dims::new(1, 1, k, k), 0.3).unwrap();
        g.conv(name, input, ConvParams::new(weights, vec![0.0], 1, pad, 1).unwrap()).unwrap()
    };
    let c1 = conv(&mut g, "c1", x, 3, 0);
    let p1 = g.pool("p1", c1, PoolParams::average(2, 2)).unwrap();
    let p2 = g.pool("p2", p1, PoolParams::average(2, 2)).unwrap();
    let c3 = conv(&mut g, "c3", p2, 3, 0);
    let p3 = g.pool("p3", c3, PoolParams::average(2, 2)).unwrap();
    let c4 = conv(&mut g, "c4", p3, 3, 0);
    let p4 = g.pool("p4", c4, PoolParams::average(2, 2)).unwrap();
    let up8 = g.upsample("up8", p3, bilinear_kernel(2, 1).unwrap()).unwrap();
    let up16 = g.upsample("up16", p4, bilinear_kernel(4, 1).unwrap()).unwrap();
    let fields = graph_fields(&g).unwrap();
    assert_eq!(fields[up8].eff_stride, int(4));
    assert_eq!(fields[up16].eff_stride, int(4));
    // Crop whichever stream starts earlier onto the other.
    let c = field_crop(&fields[up16], &fields[up8]).unwrap();
    let (fine, coarse) = if c >= 0 {
        (up8, g.crop("crop16", up16, up8, c as usize, c as usize).unwrap())
    } else {
        let k = (-c) as usize;
        (g.crop("crop8", up8, up16, k, k).unwrap(), up16)
    };
    g.add("fuse", &[fine, coarse]).unwrap();
    let fields = graph_fields(&g).unwrap();
    assert_eq!(fields[fine].offset, fields[coarse].offset);

    let extent = 160;
    let offset = fields[fine].offset;
    g.set_output(fine).unwrap();
    let fine = centroid_rows(&mut g, extent);
    g.set_output(coarse).unwrap();
    let coarse = centroid_rows(&mut g, extent);
    assert_eq!(fine.dims(), coarse.dims());
    let h = fine.dims().h;
    let offset = *offset.numer() as f64 / *offset.denom() as f64;
    // Interior rows only: interpolation at the borders sees a truncated kernel.
    let mut checked = 0;
    for i in 3..h - 3 {
        let expect = offset + 4.0 * i as f64;
        for j in 3..fine.dims().w - 3 {
            assert!((fine.at(0, 0, i, j) - expect).abs() < 1e-9, "fine row {i}: {}", fine.at(0, 0, i, j));
            assert!((coarse.at(0, 0, i, j) - expect).abs() < 1e-9, "coarse row {i}: {}", coarse.at(0, 0, i, j));
            checked += 1;
        }
    }
    assert!(checked > 0);
}

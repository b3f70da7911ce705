mod common;

use common::{rand_tensor, rng};
use motseg_core::autograd::{sigmoid, Graph, Tensor};
use motseg_core::gradcheck::{layer_suite, TOLERANCE};
use motseg_core::network::recurrent::{gru_step, lstm_step, step, unroll};
use motseg_core::network::{
    encode, fuse, upsample, CellKind, Ctx, EncoderConfig, Init, NetInput, Network, NetworkConfig, ParamStore, Preset,
    Variant,
};
use proptest::prelude::*;
use rand::Rng;

fn shuffle(x: &Tensor, groups: usize) -> Tensor {
    let mut g = Graph::new(false);
    let v = g.input(x.clone());
    let y = g.channel_shuffle(v, groups).unwrap();
    g.value(y).clone()
}

#[test]
fn every_layer_passes_gradient_check() {
    let checks = layer_suite(0).unwrap();
    assert!(checks.len() >= 10);
    for c in &checks {
        assert!(c.max_rel_error < TOLERANCE, "{}: {:.3e} ({})", c.name, c.max_rel_error, c.detail);
        assert!(c.checked > 0, "{} checked nothing", c.name);
    }
}

#[test]
fn shuffle_hand_permutation() {
    let x = Tensor::new(&[1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(shuffle(&x, 2).data(), &[1.0, 3.0, 2.0, 4.0]);
    assert_eq!(shuffle(&x, 1).data(), x.data());
    let mut g = Graph::new(false);
    let v = g.input(x);
    assert!(g.channel_shuffle(v, 3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shuffle_inverse_is_shuffle_by_complement(g in 1usize..5, k in 1usize..5, seed in any::<u64>()) {
        let c = g * k;
        let x = rand_tensor(&mut rng(seed), &[2, c, 2, 3], 1.0);
        let y = shuffle(&x, g);
        let back = shuffle(&y, c / g);
        prop_assert_eq!(back.data(), x.data());
        let mut a: Vec<f64> = x.data().to_vec();
        let mut b: Vec<f64> = y.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
    }
}

fn pyramid_shapes(enc: &EncoderConfig, h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut store = ParamStore::default();
    let mut r = rng(0);
    let mut ctx = Ctx::create(&mut store, &mut r);
    let x = ctx.g.input(Tensor::zeros(&[1, 3, h, w]));
    let p = encode(&mut ctx, "rgb", enc, x, Init::HeNormal).unwrap();
    [p.s4, p.s8, p.s16, p.s32].iter().map(|&v| ctx.g.shape(v).to_vec()).collect()
}

#[test]
fn pyramid_strides() {
    let enc = EncoderConfig::preset(Preset::Desk);
    let shapes = pyramid_shapes(&enc, 64, 160);
    let spatial: Vec<(usize, usize)> = shapes.iter().map(|s| (s[2], s[3])).collect();
    assert_eq!(spatial, vec![(16, 40), (8, 20), (4, 10), (2, 5)]);
    let channels: Vec<usize> = shapes.iter().map(|s| s[1]).collect();
    assert_eq!(channels, enc.widths.to_vec());
}

#[test]
fn zero_input_gives_zero_features() {
    let enc = EncoderConfig::preset(Preset::Tiny);
    let mut store = ParamStore::default();
    let mut r = rng(3);
    let mut ctx = Ctx::create(&mut store, &mut r);
    let x = ctx.g.input(Tensor::zeros(&[1, 3, 64, 64]));
    let p = encode(&mut ctx, "rgb", &enc, x, Init::HeNormal).unwrap();
    for v in [p.s4, p.s8, p.s16, p.s32] {
        assert_eq!(ctx.g.value(v).max_abs(), 0.0);
    }
}

/// Input interval seen by output index `o` through `(k, stride, pad)` layers.
fn receptive_interval(layers: &[(i64, i64, i64)], o: i64) -> (i64, i64) {
    let (mut lo, mut hi) = (o, o);
    for &(k, s, p) in layers.iter().rev() {
        lo = lo * s - p;
        hi = hi * s - p + k - 1;
    }
    (lo, hi)
}

#[test]
fn impulse_footprint_matches_receptive_field() {
    let enc = EncoderConfig::preset(Preset::Tiny);
    let (h, w) = (32, 32);
    let mut store = ParamStore::default();
    {
        let mut r = rng(4);
        let mut ctx = Ctx::create(&mut store, &mut r);
        let x = ctx.g.input(Tensor::zeros(&[1, 3, h, w]));
        encode(&mut ctx, "rgb", &enc, x, Init::HeNormal).unwrap();
    }
    // non-negative stem weights make every reachable output strictly positive
    let stem = store.params.get_mut("rgb.stem.conv.w").unwrap();
    *stem = stem.map(|v| v.abs() + 0.01);
    let (py, px): (i64, i64) = (13, 18);
    let mut img = Tensor::zeros(&[1, 3, h, w]);
    for c in 0..3 {
        img.data_mut()[(c * h + py as usize) * w + px as usize] = 1.0;
    }
    let mut ctx = Ctx::read(&store, false);
    let x = ctx.g.input(img);
    let p = encode(&mut ctx, "rgb", &enc, x, Init::HeNormal).unwrap();
    let out = ctx.g.value(p.s4);
    let (_, c, oh, ow) = out.dims4().unwrap();
    let layers = [(3, 2, 1), (3, 2, 1)];
    for oy in 0..oh {
        for ox in 0..ow {
            let (ylo, yhi) = receptive_interval(&layers, oy as i64);
            let (xlo, xhi) = receptive_interval(&layers, ox as i64);
            let inside = (ylo..=yhi).contains(&py) && (xlo..=xhi).contains(&px);
            let active = (0..c).any(|k| out.data()[(k * oh + oy) * ow + ox] != 0.0);
            assert_eq!(active, inside, "output ({oy}, {ox})");
        }
    }
}

fn fusion_setup(seed: u64) -> (ParamStore, Tensor, Tensor) {
    let mut r = rng(seed);
    let a = rand_tensor(&mut r, &[2, 4, 3, 5], 1.0);
    let b = rand_tensor(&mut r, &[2, 4, 3, 5], 1.0);
    let mut store = ParamStore::default();
    {
        let mut cr = rng(seed + 1);
        let mut ctx = Ctx::create(&mut store, &mut cr);
        let (va, vb) = (ctx.g.input(a.clone()), ctx.g.input(b.clone()));
        fuse(&mut ctx, 8, va, vb).unwrap();
    }
    store.params.insert("fuse8.b".into(), rand_tensor(&mut r, &[4], 1.0));
    (store, a, b)
}

fn run_fuse(store: &ParamStore, a: &Tensor, b: &Tensor) -> Tensor {
    let mut ctx = Ctx::read(store, false);
    let (va, vb) = (ctx.g.input(a.clone()), ctx.g.input(b.clone()));
    let y = fuse(&mut ctx, 8, va, vb).unwrap();
    ctx.g.value(y).clone()
}

/// 1x1 convolution of `x` with input channels `from..from + c_in` of `w`.
fn pointwise(x: &Tensor, w: &Tensor, from: usize) -> Vec<f64> {
    let (n, c_in, h, wd) = x.dims4().unwrap();
    let (c_out, w_in, _, _) = w.dims4().unwrap();
    let mut out = vec![0.0; n * c_out * h * wd];
    for i in 0..n {
        for o in 0..c_out {
            for k in 0..c_in {
                let wk = w.data()[o * w_in + from + k];
                for p in 0..h * wd {
                    out[(i * c_out + o) * h * wd + p] += wk * x.data()[(i * c_in + k) * h * wd + p];
                }
            }
        }
    }
    out
}

#[test]
fn fusion_is_sum_of_stream_convolutions() {
    let (store, a, b) = fusion_setup(10);
    let y = run_fuse(&store, &a, &b);
    let w = &store.params["fuse8.w"];
    let bias = store.params["fuse8.b"].data();
    let (pa, pb) = (pointwise(&a, w, 0), pointwise(&b, w, 4));
    let plane = 15;
    let scale = 1.0 / (1.0 + motseg_core::autograd::BN_EPS).sqrt();
    for (i, &v) in y.data().iter().enumerate() {
        let o = (i / plane) % 4;
        let expected = ((pa[i] + pb[i] + bias[o]) * scale).max(0.0);
        assert!((v - expected).abs() < 1e-12, "{i}: {v} vs {expected}");
    }
}

#[test]
fn fusion_stream_swap_symmetry() {
    let (store, a, b) = fusion_setup(11);
    let y = run_fuse(&store, &a, &b);
    let mut swapped = store.clone();
    let w = &store.params["fuse8.w"];
    let sw = Tensor::from_fn(w.shape(), |i| {
        let (o, k) = (i / 8, i % 8);
        w.data()[o * 8 + (k + 4) % 8]
    });
    swapped.params.insert("fuse8.w".into(), sw);
    let y2 = run_fuse(&swapped, &b, &a);
    // equal up to summation order
    assert!(y.zip_map(&y2, |p, q| p - q).unwrap().max_abs() < 1e-12);
    // zero motion stream reduces to the appearance half
    let z = Tensor::zeros(b.shape());
    let y0 = run_fuse(&store, &a, &z);
    let bias = store.params["fuse8.b"].data();
    let pa = pointwise(&a, w, 0);
    let scale = 1.0 / (1.0 + motseg_core::autograd::BN_EPS).sqrt();
    for (i, &v) in y0.data().iter().enumerate() {
        let expected = ((pa[i] + bias[(i / 15) % 4]) * scale).max(0.0);
        assert!((v - expected).abs() < 1e-12);
    }
}

fn scalar_store(entries: &[(&str, &[usize], Vec<f64>)]) -> ParamStore {
    let mut store = ParamStore::default();
    for (n, s, d) in entries {
        store.params.insert(n.to_string(), Tensor::new(s, d.clone()).unwrap());
    }
    store
}

fn scalar(v: f64) -> Tensor {
    Tensor::new(&[1, 1, 1, 1], vec![v]).unwrap()
}

#[test]
fn lstm_matches_scalar_oracle() {
    let mut r = rng(20);
    for _ in 0..20 {
        let wx: Vec<f64> = (0..4).map(|_| r.gen_range(-2.0..2.0)).collect();
        let wh: Vec<f64> = (0..4).map(|_| r.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..4).map(|_| r.gen_range(-2.0..2.0)).collect();
        let (x, h, c): (f64, f64, f64) = (r.gen_range(-2.0..2.0), r.gen_range(-1.0..1.0), r.gen_range(-2.0..2.0));
        let store = scalar_store(&[("cell.wx", &[4, 1, 1, 1], wx.clone()), ("cell.wh", &[4, 1, 1, 1], wh.clone()), ("cell.b", &[4], b.clone())]);
        let mut ctx = Ctx::read(&store, false);
        let (vx, vh, vc) = (ctx.g.input(scalar(x)), ctx.g.input(scalar(h)), ctx.g.input(scalar(c)));
        let (h1, c1) = lstm_step(&mut ctx, "cell", vx, Some((vh, vc)), 1, 1).unwrap();
        let gate = |k: usize| wx[k] * x + wh[k] * h + b[k];
        let (i, f, o, g) = (sigmoid(gate(0)), sigmoid(gate(1)), sigmoid(gate(2)), gate(3).tanh());
        let c_ref = f * c + i * g;
        let h_ref = o * c_ref.tanh();
        assert!((ctx.g.value(c1).data()[0] - c_ref).abs() < 1e-10);
        assert!((ctx.g.value(h1).data()[0] - h_ref).abs() < 1e-10);
    }
}

#[test]
fn gru_matches_scalar_oracle() {
    let mut r = rng(21);
    for _ in 0..20 {
        let wx: Vec<f64> = (0..3).map(|_| r.gen_range(-2.0..2.0)).collect();
        let wzr: Vec<f64> = (0..2).map(|_| r.gen_range(-2.0..2.0)).collect();
        let whh: f64 = r.gen_range(-2.0..2.0);
        let b: Vec<f64> = (0..3).map(|_| r.gen_range(-2.0..2.0)).collect();
        let (x, h): (f64, f64) = (r.gen_range(-2.0..2.0), r.gen_range(-1.0..1.0));
        let store = scalar_store(&[
            ("cell.wx", &[3, 1, 1, 1], wx.clone()),
            ("cell.wh_zr", &[2, 1, 1, 1], wzr.clone()),
            ("cell.wh_h", &[1, 1, 1, 1], vec![whh]),
            ("cell.b", &[3], b.clone()),
        ]);
        let mut ctx = Ctx::read(&store, false);
        let (vx, vh) = (ctx.g.input(scalar(x)), ctx.g.input(scalar(h)));
        let h1 = gru_step(&mut ctx, "cell", vx, Some(vh), 1, 1).unwrap();
        let z = sigmoid(wx[0] * x + wzr[0] * h + b[0]);
        let rr = sigmoid(wx[1] * x + wzr[1] * h + b[1]);
        let cand = (wx[2] * x + whh * rr * h + b[2]).tanh();
        let h_ref = (1.0 - z) * h + z * cand;
        assert!((ctx.g.value(h1).data()[0] - h_ref).abs() < 1e-10);
    }
}

fn zero_cell_store(kind: CellKind, c_in: usize, c: usize, k: usize) -> ParamStore {
    let mut store = ParamStore::default();
    for (n, s) in motseg_core::network::recurrent::cell_param_shapes(kind, c_in, c, k) {
        store.params.insert(format!("cell.{n}"), Tensor::zeros(&s));
    }
    store
}

#[test]
fn lstm_closed_forms() {
    let mut r = rng(22);
    let shape = [1, 2, 4, 5];
    let x = rand_tensor(&mut r, &shape, 1.0);
    let c0 = rand_tensor(&mut r, &shape, 2.0);
    let h0 = rand_tensor(&mut r, &shape, 1.0);

    let store = zero_cell_store(CellKind::Lstm, 2, 2, 3);
    let mut ctx = Ctx::read(&store, false);
    let (vx, vh, vc) = (ctx.g.input(Tensor::zeros(&shape)), ctx.g.input(Tensor::zeros(&shape)), ctx.g.input(Tensor::zeros(&shape)));
    let (h1, c1) = lstm_step(&mut ctx, "cell", vx, Some((vh, vc)), 2, 3).unwrap();
    assert_eq!(ctx.g.value(h1).max_abs(), 0.0);
    assert_eq!(ctx.g.value(c1).max_abs(), 0.0);

    // forget gate open, input gate shut: the cell keeps its memory
    let mut store = zero_cell_store(CellKind::Lstm, 2, 2, 3);
    store.params.insert("cell.b".into(), Tensor::new(&[8], vec![-20.0, -20.0, 20.0, 20.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
    let mut ctx = Ctx::read(&store, false);
    let (vx, vh, vc) = (ctx.g.input(x.clone()), ctx.g.input(h0.clone()), ctx.g.input(c0.clone()));
    let (_, c1) = lstm_step(&mut ctx, "cell", vx, Some((vh, vc)), 2, 3).unwrap();
    let diff = ctx.g.value(c1).zip_map(&c0, |a, b| a - b).unwrap().max_abs();
    assert!(diff < 1e-8, "{diff}");
}

#[test]
fn gru_closed_forms() {
    let mut r = rng(23);
    let shape = [1, 2, 4, 5];
    let x = rand_tensor(&mut r, &shape, 1.0);
    let h0 = rand_tensor(&mut r, &shape, 1.0);

    let store = zero_cell_store(CellKind::Gru, 2, 2, 3);
    let mut ctx = Ctx::read(&store, false);
    let (vx, vh) = (ctx.g.input(Tensor::zeros(&shape)), ctx.g.input(Tensor::zeros(&shape)));
    let h1 = gru_step(&mut ctx, "cell", vx, Some(vh), 2, 3).unwrap();
    assert_eq!(ctx.g.value(h1).max_abs(), 0.0);

    // closed update gate keeps the state
    let mut store = zero_cell_store(CellKind::Gru, 2, 2, 3);
    let mut wx = rand_tensor(&mut r, &[6, 2, 3, 3], 1.0);
    for v in &mut wx.data_mut()[..2 * 2 * 9] {
        *v = 0.0;
    }
    store.params.insert("cell.wx".into(), wx);
    store.params.insert("cell.b".into(), Tensor::new(&[6], vec![-20.0, -20.0, 0.0, 0.0, 0.3, -0.3]).unwrap());
    let mut ctx = Ctx::read(&store, false);
    let (vx, vh) = (ctx.g.input(x), ctx.g.input(h0.clone()));
    let h1 = gru_step(&mut ctx, "cell", vx, Some(vh), 2, 3).unwrap();
    let diff = ctx.g.value(h1).zip_map(&h0, |a, b| a - b).unwrap().max_abs();
    assert!(diff < 1e-8, "{diff}");
}

#[test]
fn stepping_equals_unrolling() {
    for kind in [CellKind::Lstm, CellKind::Gru] {
        let mut r = rng(24);
        let xs: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut r, &[2, 3, 4, 6], 1.0)).collect();
        let mut store = ParamStore::default();
        let mut cr = rng(25);
        let (stepped, unrolled) = {
            let mut ctx = Ctx::create(&mut store, &mut cr);
            let vs: Vec<_> = xs.iter().map(|x| ctx.g.input(x.clone())).collect();
            let mut state = None;
            let mut stepped = Vec::new();
            for &v in &vs {
                let s = step(&mut ctx, kind, "cell", v, state, 4, 3).unwrap();
                assert_eq!(ctx.g.shape(s.hidden()), &[2, 4, 4, 6]);
                stepped.push(ctx.g.value(s.hidden()).clone());
                state = Some(s);
            }
            let hs = unroll(&mut ctx, kind, "cell", &vs, 4, 3).unwrap();
            (stepped, hs.iter().map(|&h| ctx.g.value(h).clone()).collect::<Vec<_>>())
        };
        for (a, b) in stepped.iter().zip(&unrolled) {
            assert_eq!(a.data(), b.data());
        }
    }
}

#[test]
fn bilinear_upsampling_preserves_constants() {
    for &(k, s) in &[(4usize, 2usize), (16, 8)] {
        let mut store = ParamStore::default();
        let mut r = rng(26);
        let mut ctx = Ctx::create(&mut store, &mut r);
        let x = ctx.g.input(Tensor::full(&[1, 2, 6, 7], 0.75));
        let y = upsample(&mut ctx, "up", x, k, s).unwrap();
        let out = ctx.g.value(y);
        let (_, c, h, w) = out.dims4().unwrap();
        assert_eq!((h, w), (6 * s, 7 * s));
        // away from the border every output pixel gets full kernel support
        for ch in 0..c {
            for yy in s..h - s {
                for xx in s..w - s {
                    let v = out.data()[(ch * h + yy) * w + xx];
                    assert!((v - 0.75).abs() < 1e-12, "k={k} ({yy}, {xx}) = {v}");
                }
            }
        }
    }
}

#[test]
fn logits_match_input_resolution() {
    for v in Variant::ALL {
        let net = Network::new(NetworkConfig::new(v, Preset::Tiny), 1).unwrap();
        for (h, w) in [(64, 160), (96, 224)] {
            let logits = net.predict(&NetInput::zeros(1, 4, h, w)).unwrap();
            assert_eq!(logits.shape(), &[1, 2, h, w], "{v}");
        }
    }
}

#[test]
fn zero_recurrent_parameters_reduce_to_feed_forward() {
    let mut cfg = NetworkConfig::new(Variant::MultiLstm, Preset::Tiny);
    cfg.residual = true;
    let mut net = Network::new(cfg, 5).unwrap();
    for (name, t) in net.store.params.iter_mut() {
        if name.starts_with("stage") {
            *t = Tensor::zeros(t.shape());
        }
    }
    let mut ff = Network::new(NetworkConfig::new(Variant::RgbFlow, Preset::Tiny), 0).unwrap();
    for (name, t) in ff.store.params.iter_mut() {
        *t = net.store.params[name].clone();
    }
    let mut r = rng(27);
    let input = NetInput {
        rgb: (0..4).map(|_| rand_tensor(&mut r, &[1, 3, 32, 64], 0.5)).collect(),
        flow: (0..4).map(|_| rand_tensor(&mut r, &[1, 3, 32, 64], 0.5)).collect(),
    };
    let a = net.predict(&input).unwrap();
    let b = ff.predict(&input).unwrap();
    let diff = a.zip_map(&b, |x, y| x - y).unwrap().max_abs();
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn repeated_inference_is_bit_identical() {
    let net = Network::new(NetworkConfig::new(Variant::MultiGru, Preset::Tiny), 6).unwrap();
    let frame = rand_tensor(&mut rng(28), &[1, 3, 32, 64], 0.5);
    let input = NetInput { rgb: vec![frame; 4], flow: vec![Tensor::zeros(&[1, 3, 32, 64]); 4] };
    assert_eq!(net.predict(&input).unwrap().data(), net.predict(&input).unwrap().data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(9))]

    #[test]
    fn logits_finite_for_bounded_parameters(vi in 0usize..9, seed in any::<u64>()) {
        let v = Variant::ALL[vi];
        let mut net = Network::new(NetworkConfig::new(v, Preset::Tiny), seed).unwrap();
        let mut r = rng(seed);
        for t in net.store.params.values_mut() {
            *t = rand_tensor(&mut r, t.shape(), 10.0);
        }
        let input = NetInput {
            rgb: (0..4).map(|_| rand_tensor(&mut r, &[1, 3, 32, 32], 0.5)).collect(),
            flow: (0..4).map(|_| rand_tensor(&mut r, &[1, 3, 32, 32], 0.5)).collect(),
        };
        prop_assert!(net.predict(&input).unwrap().all_finite());
    }
}

#[test]
fn parameter_count_ordering() {
    for preset in [Preset::Tiny, Preset::Desk] {
        let count = |v| Network::new(NetworkConfig::new(v, preset), 0).unwrap().param_count();
        let (st, rf, m2, ml) = (count(Variant::Stacking), count(Variant::RgbFlow), count(Variant::Multi2Filters), count(Variant::MultiLstm));
        assert!(st < rf && rf < m2 && m2 < ml, "{preset:?}: {st} {rf} {m2} {ml}");
        // the second stream doubles the encoder
        assert!(rf > 2 * count(Variant::RgbOnly));
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let net = Network::new(NetworkConfig::new(Variant::Multi2Filters, Preset::Tiny), 8).unwrap();
    let path = dir.path().join("n.ckpt");
    net.save(&path, 3).unwrap();
    let (back, epoch) = Network::load(&path).unwrap();
    assert_eq!(epoch, 3);
    assert_eq!(back, net);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.push(0);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(Network::load(&path), Err(motseg_core::Error::Format(_))));
}

use stam::attention::ClipFeatures;
use stam::init::{Initializer, InitializerKind};
use stam::{Graph, ParamStore, Tensor};

fn g0(store: &ParamStore, init: &Initializer, rows: &[Vec<f64>]) -> (Vec<f64>, Option<Vec<f64>>) {
    let clips = ClipFeatures::from_rows(rows).unwrap();
    let mut g = Graph::new();
    let f = clips.insert(&mut g);
    let out = init.forward(&mut g, store, f).unwrap();
    (
        g.values(out.global).to_vec(),
        out.weights.map(|w| g.values(w).to_vec()),
    )
}

fn rows() -> Vec<Vec<f64>> {
    vec![
        vec![1.0, -2.0, 0.5],
        vec![3.0, 0.0, -1.5],
        vec![-0.5, 4.0, 2.5],
        vec![0.0, 1.0, 1.0],
    ]
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn avg_and_max_pool() {
    let mut store = ParamStore::new(0);
    let avg = Initializer::register(&mut store, InitializerKind::AvgPool, "a", 3, 4, 3).unwrap();
    let max = Initializer::register(&mut store, InitializerKind::MaxPool, "m", 3, 4, 3).unwrap();
    assert!(store.is_empty());
    let (mean, weights) = g0(&store, &avg, &rows());
    assert_eq!(mean, vec![0.875, 0.75, 0.625]);
    assert_eq!(weights.unwrap(), vec![0.25; 4]);
    let (peak, weights) = g0(&store, &max, &rows());
    assert_eq!(peak, vec![3.0, 4.0, 2.5]);
    assert!(weights.is_none());
}

#[test]
fn max_pool_routes_gradient_to_the_argmax() {
    let mut store = ParamStore::new(0);
    store
        .insert("x", Tensor::from_rows(&rows()).unwrap())
        .unwrap();
    store.zero_grads();
    let mut g = Graph::new();
    let x = g.param(&store, "x").unwrap();
    let m = stam::init::init_max(&mut g, x).unwrap();
    let s = g.sum(m).unwrap();
    g.backward(s, &mut store).unwrap();
    let grad = store.get("x").unwrap().grad().unwrap();
    let mut want = vec![0.0; 12];
    for idx in [3, 7, 8] {
        want[idx] = 1.0;
    }
    assert_eq!(grad, want.as_slice());
}

#[test]
fn tconv_with_identity_taps_sums_the_clips() {
    let (n, d) = (4, 3);
    let mut store = ParamStore::new(1);
    let init =
        Initializer::register(&mut store, InitializerKind::TemporalConv, "t", d, n, d).unwrap();
    let mut kernel = vec![0.0; d * n * d];
    for r in 0..d {
        for t in 0..n {
            kernel[r * n * d + t * d + r] = 1.0;
        }
    }
    store.set_values("t.kernel", &kernel).unwrap();
    store.set_values("t.bias", &[0.0; 3]).unwrap();
    let (sum, _) = g0(&store, &init, &rows());
    assert_eq!(sum, vec![3.5, 3.0, 2.5]);
}

#[test]
fn tconv_rejects_a_different_clip_count() {
    let mut store = ParamStore::new(1);
    let init =
        Initializer::register(&mut store, InitializerKind::TemporalConv, "t", 3, 5, 3).unwrap();
    let clips = ClipFeatures::from_rows(&rows()).unwrap();
    let mut g = Graph::new();
    let f = clips.insert(&mut g);
    assert!(init.forward(&mut g, &store, f).is_err());
}

#[test]
fn selfatt_two_clips_by_hand() {
    let mut store = ParamStore::new(2);
    let init =
        Initializer::register(&mut store, InitializerKind::SelfAttention, "s", 1, 2, 1).unwrap();
    let (a, b, c) = (0.7, -1.3, 2.0);
    store.set_values("s.w_q", &[a]).unwrap();
    store.set_values("s.w_k", &[b]).unwrap();
    store.set_values("s.w_v", &[c]).unwrap();
    let x = [0.4, -1.1];
    let attn: Vec<[f64; 2]> = x
        .iter()
        .map(|&xi| {
            let s = [a * xi * b * x[0], a * xi * b * x[1]];
            let z = s[0].exp() + s[1].exp();
            [s[0].exp() / z, s[1].exp() / z]
        })
        .collect();
    let attended: Vec<f64> = attn
        .iter()
        .map(|r| r[0] * c * x[0] + r[1] * c * x[1])
        .collect();
    let want_g0 = (attended[0] + attended[1]) / 2.0;
    let want_w = [
        (attn[0][0] + attn[1][0]) / 2.0,
        (attn[0][1] + attn[1][1]) / 2.0,
    ];

    let (got, weights) = g0(&store, &init, &[vec![x[0]], vec![x[1]]]);
    assert!((got[0] - want_g0).abs() <= 1e-14);
    let weights = weights.unwrap();
    for (w, want) in weights.iter().zip(want_w) {
        assert!((w - want).abs() <= 1e-14);
    }
    assert!((weights[0] * c * x[0] + weights[1] * c * x[1] - got[0]).abs() <= 1e-14);
}

#[test]
fn scalar_gru_step_by_hand() {
    let mut store = ParamStore::new(3);
    let init = Initializer::register(&mut store, InitializerKind::BiGru, "g", 1, 1, 1).unwrap();
    let p = |s: &ParamStore, name: &str| s.get(&format!("g.{name}")).unwrap().values().to_vec();
    let x = 0.8;
    let cell = |dir: &str| {
        let v = |part: &str| p(&store, &format!("{dir}.{part}"))[0];
        let r = sigmoid(v("w_ir") * x + v("b_ir") + v("b_hr"));
        let z = sigmoid(v("w_iz") * x + v("b_iz") + v("b_hz"));
        let n = (v("w_in") * x + v("b_in") + r * v("b_hn")).tanh();
        (1.0 - z) * n
    };
    let (hf, hb) = (cell("fwd"), cell("bwd"));
    let w = p(&store, "proj_w");
    let want = w[0] * hf + w[1] * hb + p(&store, "proj_b")[0];
    let (got, _) = g0(&store, &init, &[vec![x]]);
    assert!((got[0] - want).abs() <= 1e-14, "{} vs {want}", got[0]);
}

#[test]
fn bigru_with_mirrored_directions_ignores_reversal() {
    let d = 3;
    let mut store = ParamStore::new(4);
    let init = Initializer::register(&mut store, InitializerKind::BiGru, "g", d, 4, d).unwrap();
    let names: Vec<String> = store
        .names()
        .filter(|n| n.starts_with("g.fwd."))
        .map(String::from)
        .collect();
    for name in names {
        let values = store.get(&name).unwrap().values().to_vec();
        store
            .set_values(&name.replace("fwd", "bwd"), &values)
            .unwrap();
    }
    // proj_w = [A A] makes the output symmetric in (h_fwd, h_bwd).
    let mut proj = store.get("g.proj_w").unwrap().values().to_vec();
    for r in 0..d {
        for c in 0..d {
            proj[r * 2 * d + d + c] = proj[r * 2 * d + c];
        }
    }
    store.set_values("g.proj_w", &proj).unwrap();

    let forward = rows();
    let reversed: Vec<Vec<f64>> = forward.iter().rev().cloned().collect();
    let (a, _) = g0(&store, &init, &forward);
    let (b, _) = g0(&store, &init, &reversed);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-14);
    }

    // Breaking the mirror makes the reversal visible.
    store.set_values("g.bwd.b_in", &[0.3, -0.2, 0.1]).unwrap();
    let (c, _) = g0(&store, &init, &forward);
    let (e, _) = g0(&store, &init, &reversed);
    assert!(c.iter().zip(&e).any(|(x, y)| (x - y).abs() > 1e-6));
}

#[test]
fn names_parse_and_print() {
    for kind in InitializerKind::ALL {
        assert_eq!(kind.as_str().parse::<InitializerKind>().unwrap(), kind);
    }
    assert!("lstm".parse::<InitializerKind>().is_err());
}

//! A second, forward-only implementation of the model loss, generic over the
//! scalar type.
//!
//! With `f64` it cross-checks the graph forward pass. With double-double
//! arithmetic it serves as the finite-difference oracle: central differences
//! of an f64 loss cannot resolve gradient coordinates much below
//! `ε·|loss|/h`, while the double-double loss is accurate to ~1e-30.

use std::collections::HashMap;
use std::ops::{Add, Div, Mul, Neg, Sub};

use twofloat::TwoFloat;

use crate::data::LabeledSample;
use crate::error::{Result, StamError};
use crate::gradcheck::{relative_error, GradCheckReport, ParamCheck};
use crate::graph::{Graph, LAYER_NORM_EPS};
use crate::init::InitializerKind;
use crate::model::{Model, INIT_PREFIX};
use crate::params::ParamStore;

pub trait Real:
    Copy
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;

    /// `exp(x) - 1` without cancellation near zero.
    fn exp_m1(self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn one() -> Self {
        Self::from_f64(1.0)
    }

    fn tanh(self) -> Self {
        let neg = self < Self::zero();
        let a = if neg { -self } else { self };
        let m = (-(a + a)).exp_m1();
        let t = -m / (Self::one() + Self::one() + m);
        if neg {
            -t
        } else {
            t
        }
    }

    fn sigmoid(self) -> Self {
        Self::one() / (Self::one() + (-self).exp())
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp_m1(self) -> Self {
        f64::exp_m1(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

/// ln 2 as an unevaluated sum of two doubles.
const LN2_HI: f64 = std::f64::consts::LN_2;
const LN2_LO: f64 = 2.319_046_813_846_299_6e-17;

fn dd_exp(x: TwoFloat) -> TwoFloat {
    if x.hi() > 709.0 {
        return TwoFloat::from(f64::INFINITY);
    }
    if x.hi() < -745.0 {
        return TwoFloat::from(0.0);
    }
    let k = (x.hi() / LN2_HI).round();
    let ln2 = TwoFloat::new_add(LN2_HI, LN2_LO);
    // |r| ≤ ln2/2 before, ≤ 3.4e-4 after the exact division by 2^10.
    let r = (x - ln2 * k) / 1024.0;
    let mut term = TwoFloat::from(1.0);
    let mut sum = TwoFloat::from(1.0);
    for n in 1..=12 {
        term = term * r / n as f64;
        sum += term;
    }
    for _ in 0..10 {
        sum = sum * sum;
    }
    sum * 2f64.powi(k as i32)
}

fn dd_ln(x: TwoFloat) -> TwoFloat {
    let mut y = TwoFloat::from(x.hi().ln());
    // Newton on exp(y) = x; each step doubles the correct digits.
    for _ in 0..2 {
        y = y + x * dd_exp(-y) - 1.0;
    }
    y
}

/// Double-double scalar. Addition and multiplication come from `twofloat`;
/// division is done here by successive quotient corrections, because the
/// crate's double-by-double division is only accurate to about one double.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Dd(pub TwoFloat);

impl Dd {
    pub fn new_add(a: f64, b: f64) -> Self {
        Dd(TwoFloat::new_add(a, b))
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, rhs: Dd) -> Dd {
        Dd(self.0 + rhs.0)
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, rhs: Dd) -> Dd {
        Dd(self.0 - rhs.0)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, rhs: Dd) -> Dd {
        Dd(self.0 * rhs.0)
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd(-self.0)
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, rhs: Dd) -> Dd {
        let b = rhs.0;
        let q1 = self.0.hi() / b.hi();
        let r = self.0 - b * q1;
        let q2 = r.hi() / b.hi();
        let r = r - b * q2;
        let q3 = r.hi() / b.hi();
        Dd(TwoFloat::new_add(q1, q2) + q3)
    }
}

impl Real for Dd {
    fn from_f64(x: f64) -> Self {
        Dd(TwoFloat::from(x))
    }
    fn to_f64(self) -> f64 {
        self.0.hi() + self.0.lo()
    }
    fn exp(self) -> Self {
        Dd(dd_exp(self.0))
    }
    fn ln(self) -> Self {
        Dd(dd_ln(self.0))
    }
    fn sqrt(self) -> Self {
        Dd(self.0.sqrt())
    }
    fn exp_m1(self) -> Self {
        if self.0.hi().abs() >= 0.5 {
            return self.exp() - Dd::one();
        }
        let mut term = self.0;
        let mut sum = self.0;
        for n in 2..=30 {
            term = term * self.0 / n as f64;
            sum += term;
        }
        Dd(sum)
    }
}

/// Parameter values converted to `T`, with their shapes.
#[derive(Debug, Clone)]
pub struct RealParams<T> {
    values: HashMap<String, (Vec<usize>, Vec<T>)>,
}

impl<T: Real> RealParams<T> {
    pub fn from_store(store: &ParamStore) -> Self {
        RealParams {
            values: store
                .iter()
                .map(|(name, t)| {
                    let v = t.values().iter().map(|&x| T::from_f64(x)).collect();
                    (name.to_string(), (t.shape().to_vec(), v))
                })
                .collect(),
        }
    }

    fn get(&self, name: &str) -> Result<(&[usize], &[T])> {
        self.values
            .get(name)
            .map(|(s, v)| (s.as_slice(), v.as_slice()))
            .ok_or_else(|| StamError::UnknownParameter(name.to_string()))
    }

    pub fn set(&mut self, name: &str, index: usize, value: T) -> Result<()> {
        let (_, v) = self
            .values
            .get_mut(name)
            .ok_or_else(|| StamError::UnknownParameter(name.to_string()))?;
        v[index] = value;
        Ok(())
    }
}

/// Row-major matrix.
#[derive(Debug, Clone)]
struct Mat<T> {
    rows: usize,
    cols: usize,
    v: Vec<T>,
}

impl<T: Real> Mat<T> {
    fn row(&self, i: usize) -> &[T] {
        &self.v[i * self.cols..(i + 1) * self.cols]
    }

    /// `self · wᵀ` for `w` of shape `[out × cols]`.
    fn times_transposed(&self, w: &[T], out: usize) -> Mat<T> {
        let mut v = Vec::with_capacity(self.rows * out);
        for i in 0..self.rows {
            let x = self.row(i);
            for o in 0..out {
                v.push(dot(&w[o * self.cols..(o + 1) * self.cols], x));
            }
        }
        Mat {
            rows: self.rows,
            cols: out,
            v,
        }
    }

    fn mean_rows(&self) -> Vec<T> {
        let n = T::from_f64(self.rows as f64);
        (0..self.cols)
            .map(|c| sum((0..self.rows).map(|r| self.v[r * self.cols + c])) / n)
            .collect()
    }
}

fn sum<T: Real>(xs: impl Iterator<Item = T>) -> T {
    xs.fold(T::zero(), |a, b| a + b)
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    sum(a.iter().zip(b).map(|(&x, &y)| x * y))
}

fn affine<T: Real>(w: &[T], x: &[T], b: &[T]) -> Vec<T> {
    let cols = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bo)| dot(&w[o * cols..(o + 1) * cols], x) + bo)
        .collect()
}

fn matvec<T: Real>(w: &[T], x: &[T]) -> Vec<T> {
    let cols = x.len();
    w.chunks(cols).map(|row| dot(row, x)).collect()
}

fn softmax<T: Real>(xs: &[T]) -> Vec<T> {
    let max = xs
        .iter()
        .copied()
        .fold(xs[0], |a, b| if b > a { b } else { a });
    let e: Vec<T> = xs.iter().map(|&x| (x - max).exp()).collect();
    let total = sum(e.iter().copied());
    e.into_iter().map(|x| x / total).collect()
}

fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let max = xs
        .iter()
        .copied()
        .fold(xs[0], |a, b| if b > a { b } else { a });
    max + sum(xs.iter().map(|&x| (x - max).exp())).ln()
}

fn layer_norm<T: Real>(x: &[T], gain: &[T], shift: &[T]) -> Vec<T> {
    let n = T::from_f64(x.len() as f64);
    let mean = sum(x.iter().copied()) / n;
    let var = sum(x.iter().map(|&v| (v - mean) * (v - mean))) / n;
    let inv = T::one() / (var + T::from_f64(LAYER_NORM_EPS)).sqrt();
    x.iter()
        .zip(gain)
        .zip(shift)
        .map(|((&v, &g), &b)| (v - mean) * inv * g + b)
        .collect()
}

struct SelfAttended<T> {
    attended: Mat<T>,
}

fn self_attention<T: Real>(p: &RealParams<T>, prefix: &str, x: &Mat<T>) -> Result<SelfAttended<T>> {
    let (qs, wq) = p.get(&format!("{prefix}.w_q"))?;
    let (_, wk) = p.get(&format!("{prefix}.w_k"))?;
    let (vs, wv) = p.get(&format!("{prefix}.w_v"))?;
    let d = qs[0];
    let q = x.times_transposed(wq, d);
    let k = x.times_transposed(wk, d);
    let v = x.times_transposed(wv, vs[0]);
    let scale = T::one() / T::from_f64(d as f64).sqrt();
    let mut attended = Vec::with_capacity(x.rows * v.cols);
    for i in 0..x.rows {
        let scores: Vec<T> = (0..x.rows)
            .map(|j| dot(q.row(i), k.row(j)) * scale)
            .collect();
        let a = softmax(&scores);
        for c in 0..v.cols {
            attended.push(sum((0..x.rows).map(|j| a[j] * v.v[j * v.cols + c])));
        }
    }
    Ok(SelfAttended {
        attended: Mat {
            rows: x.rows,
            cols: v.cols,
            v: attended,
        },
    })
}

fn gru_run<T: Real>(
    p: &RealParams<T>,
    prefix: &str,
    x: &Mat<T>,
    order: impl Iterator<Item = usize>,
) -> Result<Vec<T>> {
    let w = |part: &str| p.get(&format!("{prefix}.{part}")).map(|(_, v)| v);
    let (w_ir, w_iz, w_in) = (w("w_ir")?, w("w_iz")?, w("w_in")?);
    let (w_hr, w_hz, w_hn) = (w("w_hr")?, w("w_hz")?, w("w_hn")?);
    let (b_ir, b_iz, b_in) = (w("b_ir")?, w("b_iz")?, w("b_in")?);
    let (b_hr, b_hz, b_hn) = (w("b_hr")?, w("b_hz")?, w("b_hn")?);
    let mut h = vec![T::zero(); b_ir.len()];
    for t in order {
        let xt = x.row(t);
        let (xr, hr) = (affine(w_ir, xt, b_ir), affine(w_hr, &h, b_hr));
        let (xz, hz) = (affine(w_iz, xt, b_iz), affine(w_hz, &h, b_hz));
        let (xn, hn) = (affine(w_in, xt, b_in), affine(w_hn, &h, b_hn));
        h = (0..h.len())
            .map(|i| {
                let r = (xr[i] + hr[i]).sigmoid();
                let z = (xz[i] + hz[i]).sigmoid();
                let n = (xn[i] + r * hn[i]).tanh();
                (T::one() - z) * n + z * h[i]
            })
            .collect();
    }
    Ok(h)
}

fn initial_global<T: Real>(p: &RealParams<T>, kind: InitializerKind, x: &Mat<T>) -> Result<Vec<T>> {
    let name = |part: &str| format!("{INIT_PREFIX}.{part}");
    Ok(match kind {
        InitializerKind::AvgPool => x.mean_rows(),
        InitializerKind::MaxPool => (0..x.cols)
            .map(|c| {
                (1..x.rows).fold(x.v[c], |best, r| {
                    let v = x.v[r * x.cols + c];
                    if v > best {
                        v
                    } else {
                        best
                    }
                })
            })
            .collect(),
        InitializerKind::BiGru => {
            let mut both = gru_run(p, &name("fwd"), x, 0..x.rows)?;
            both.extend(gru_run(p, &name("bwd"), x, (0..x.rows).rev())?);
            affine(p.get(&name("proj_w"))?.1, &both, p.get(&name("proj_b"))?.1)
        }
        InitializerKind::TemporalConv => {
            affine(p.get(&name("kernel"))?.1, &x.v, p.get(&name("bias"))?.1)
        }
        InitializerKind::SelfAttention => self_attention(p, INIT_PREFIX, x)?.attended.mean_rows(),
    })
}

/// Global feature of every stage.
pub fn stage_globals<T: Real>(
    model: &Model,
    p: &RealParams<T>,
    sample: &LabeledSample,
) -> Result<Vec<Vec<T>>> {
    let t = sample.clips.tensor();
    let x = Mat {
        rows: t.shape()[0],
        cols: t.shape()[1],
        v: t.values().iter().map(|&v| T::from_f64(v)).collect(),
    };
    if let Some(prefixes) = model.vanilla_layers() {
        let mut globals = Vec::with_capacity(prefixes.len());
        let mut h = x;
        for prefix in prefixes {
            h = self_attention(p, prefix, &h)?.attended;
            globals.push(h.mean_rows());
        }
        return Ok(globals);
    }
    let init = model
        .initializer()
        .ok_or_else(|| StamError::config("model has no initializer"))?;
    let mut g = initial_global(p, init.kind(), &x)?;
    let mut globals = vec![g.clone()];
    for layer in model.stack().map(|s| s.layers()).unwrap_or(&[]) {
        let query_in = if layer.normalize_global() {
            layer_norm(
                &g,
                p.get(&layer.name("ln_gain"))?.1,
                p.get(&layer.name("ln_shift"))?.1,
            )
        } else {
            g.clone()
        };
        let (qs, wq) = p.get(&layer.name("w_q"))?;
        let q = matvec(wq, &query_in);
        let k = x.times_transposed(p.get(&layer.name("w_k"))?.1, qs[0]);
        let v = x.times_transposed(p.get(&layer.name("w_v"))?.1, x.cols);
        let scale = T::one() / T::from_f64(qs[0] as f64).sqrt();
        let scores: Vec<T> = (0..x.rows).map(|i| dot(&q, k.row(i)) * scale).collect();
        let a = softmax(&scores);
        g = (0..v.cols)
            .map(|c| sum((0..v.rows).map(|i| a[i] * v.v[i * v.cols + c])))
            .collect();
        globals.push(g.clone());
    }
    Ok(globals)
}

/// Weighted deep-supervision loss of one sample.
pub fn sample_loss<T: Real>(model: &Model, p: &RealParams<T>, sample: &LabeledSample) -> Result<T> {
    let globals = stage_globals(model, p, sample)?;
    let mut total = T::zero();
    for ((g, head), &lambda) in globals
        .iter()
        .zip(model.heads())
        .zip(model.loss_weights().as_slice())
    {
        let logits = affine(p.get(&head.name("w"))?.1, g, p.get(&head.name("b"))?.1);
        let ce = log_sum_exp(&logits) - logits[sample.label];
        total = total + T::from_f64(lambda) * ce;
    }
    Ok(total)
}

/// Mean of [`sample_loss`] over `samples`.
pub fn batch_loss<T: Real>(
    model: &Model,
    p: &RealParams<T>,
    samples: &[&LabeledSample],
) -> Result<T> {
    let mut total = T::zero();
    for s in samples {
        total = total + sample_loss(model, p, s)?;
    }
    Ok(total / T::from_f64(samples.len() as f64))
}

/// Compares graph gradients of the mean loss over `samples` with central
/// differences `(f(θ+h) - f(θ-h)) / 2h` of the double-double loss.
pub fn check_gradients_extended(
    model: &Model,
    store: &ParamStore,
    samples: &[&LabeledSample],
    step: f64,
) -> Result<GradCheckReport> {
    if samples.is_empty() {
        return Err(StamError::config(
            "gradient check needs at least one sample",
        ));
    }
    let mut analytic = store.clone();
    analytic.zero_grads();
    let mut graph = Graph::new();
    let loss = crate::experiment::batch_loss(model, &mut graph, &analytic, samples)?;
    let loss_value = graph.value(loss).item();
    graph.backward(loss, &mut analytic)?;

    let mut probe: RealParams<Dd> = RealParams::from_store(store);
    let two_h = Dd::from_f64(2.0 * step);
    let mut report = GradCheckReport {
        loss: loss_value,
        params: Default::default(),
    };
    for (name, tensor) in store.iter() {
        let grads = analytic
            .get(name)
            .and_then(|t| t.grad())
            .ok_or_else(|| StamError::MissingGradient(name.to_string()))?;
        let mut check: Option<ParamCheck> = None;
        for (i, &theta) in tensor.values().iter().enumerate() {
            probe.set(name, i, Dd::new_add(theta, step))?;
            let plus = batch_loss(model, &probe, samples)?;
            probe.set(name, i, Dd::new_add(theta, -step))?;
            let minus = batch_loss(model, &probe, samples)?;
            probe.set(name, i, Dd::from_f64(theta))?;
            let numeric = ((plus - minus) / two_h).to_f64();
            let err = relative_error(grads[i], numeric);
            if check.as_ref().is_none_or(|c| err > c.max_rel_error) {
                check = Some(ParamCheck {
                    max_rel_error: err,
                    worst_index: i,
                    analytic: grads[i],
                    numeric,
                });
            }
        }
        report
            .params
            .insert(name.to_string(), check.expect("tensors are non-empty"));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `(hi, lo)` pairs from a 50-digit evaluation at the exact f64 inputs.
    const EXP: [(f64, (f64, f64)); 6] = [
        (-30.0, (9.357622968840175e-14, -2.1170146272646406e-30)),
        (-1.7, (0.18268352405273466, -5.430659906894856e-18)),
        (0.3, (1.3498588075760032, -9.447314673432387e-17)),
        (1.0, (std::f64::consts::E, 1.4456468917292502e-16)),
        (10.0, (22026.465794806718, -1.3780134700517372e-12)),
        (200.0, (7.225973768125749e+86, 2.9945383505980016e+70)),
    ];
    const LN: [(f64, (f64, f64)); 3] = [
        (0.3, (-1.2039728043259361, 8.935521583403776e-17)),
        (2.0, (std::f64::consts::LN_2, 2.3190468138462996e-17)),
        (7.5, (2.0149030205422647, 8.991967888489638e-17)),
    ];
    const TANH: [(f64, (f64, f64)); 5] = [
        (-3.0, (-0.9950547536867305, 1.2991892863562624e-17)),
        (-0.2, (-0.197375320224904, -6.334792292201447e-18)),
        (0.9, (0.7162978701990245, -3.514093391268979e-17)),
        (4.0, (0.999329299739067, 9.767046099568572e-18)),
        (1e-7, (9.999999999999966e-08, -2.4610883121208847e-24)),
    ];

    fn rel(got: Dd, (hi, lo): (f64, f64)) -> f64 {
        let want = Dd::new_add(hi, lo);
        ((got - want) / want).to_f64().abs()
    }

    #[test]
    fn double_double_functions_match_oracle() {
        for (x, want) in EXP {
            let e = rel(Dd::from_f64(x).exp(), want);
            assert!(e < 1e-28, "exp({x}) rel error {e:e}");
        }
        for (x, want) in LN {
            let e = rel(Dd::from_f64(x).ln(), want);
            assert!(e < 1e-28, "ln({x}) rel error {e:e}");
        }
        for (x, want) in TANH {
            let e = rel(Dd::from_f64(x).tanh(), want);
            assert!(e < 1e-28, "tanh({x}) rel error {e:e}");
        }
    }

    #[test]
    fn division_is_double_double() {
        let third = Dd::from_f64(1.0) / Dd::from_f64(3.0);
        assert!(
            ((third * Dd::from_f64(3.0)) - Dd::from_f64(1.0))
                .to_f64()
                .abs()
                < 1e-31
        );
        let a = Dd::new_add(2.0, 1e-17);
        let b = Dd::new_add(7.0, -3e-17);
        let q = a / b;
        assert!(((q * b) - a).to_f64().abs() < 1e-31);
    }

    #[test]
    fn f64_forward_matches_graph() {
        use crate::data::{generate, NeedleTaskSpec};
        use crate::experiment::{build_model, ExperimentConfig};
        let mut c = ExperimentConfig {
            task: NeedleTaskSpec {
                feature_dim: 8,
                train_size: 3,
                test_size: 1,
                ..NeedleTaskSpec::default()
            },
            ..ExperimentConfig::default()
        };
        c.model.hidden_dim = Some(4);
        let data = generate(&c.task).unwrap();
        let batch: Vec<&LabeledSample> = data.train.iter().collect();
        for kind in InitializerKind::ALL {
            for vanilla in [false, true] {
                let mut cfg = c.clone();
                cfg.model.initializer = kind;
                if vanilla {
                    cfg.baseline = Some(crate::experiment::Baseline::VanillaStack);
                }
                let mut store = ParamStore::new(3);
                let model = build_model(&cfg, &mut store).unwrap();
                let mut g = Graph::new();
                let loss = crate::experiment::batch_loss(&model, &mut g, &store, &batch).unwrap();
                let want = g.value(loss).item();
                let f: f64 = batch_loss(&model, &RealParams::from_store(&store), &batch).unwrap();
                let dd: Dd = batch_loss(&model, &RealParams::from_store(&store), &batch).unwrap();
                assert!(
                    (f - want).abs() < 1e-12 * want,
                    "{kind} {vanilla}: {f} vs {want}"
                );
                assert!(
                    (dd.to_f64() - want).abs() < 1e-12 * want,
                    "{kind} {vanilla}"
                );
            }
        }
    }
}

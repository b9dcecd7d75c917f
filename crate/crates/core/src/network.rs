//! Depth-2 ReLU networks `x ↦ Σ_j v_j·max(0, w_j·x + b_j)`.
//!
//! The network is positively homogeneous of degree 2 in `(W, b, v)`. The
//! ReLU derivative at 0 is taken to be 0 everywhere in this crate.

use std::fs;
use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// ℓ(q) = e^{−q}
    #[default]
    Exponential,
    /// ℓ(q) = ln(1 + e^{−q})
    Logistic,
}

impl LossKind {
    pub fn value(self, q: f64) -> f64 {
        match self {
            LossKind::Exponential => (-q).exp(),
            LossKind::Logistic => {
                if q > 0.0 {
                    (-q).exp().ln_1p()
                } else {
                    -q + q.exp().ln_1p()
                }
            }
        }
    }

    /// dℓ/dq.
    pub fn derivative(self, q: f64) -> f64 {
        match self {
            LossKind::Exponential => -(-q).exp(),
            LossKind::Logistic => {
                if q > 0.0 {
                    let e = (-q).exp();
                    -e / (1.0 + e)
                } else {
                    -1.0 / (1.0 + q.exp())
                }
            }
        }
    }

    /// Per-example loss below which the margin must be positive.
    pub fn interpolation_threshold(self) -> f64 {
        match self {
            LossKind::Exponential => 1.0,
            LossKind::Logistic => std::f64::consts::LN_2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    w: Array2<f64>,
    b: Array1<f64>,
    v: Array1<f64>,
}

/// Loss, margins and gradient at one parameter point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub margins: Array1<f64>,
    pub gradient: NetworkParams,
}

/// Scratch space for repeated loss/gradient evaluations on a fixed set of rows.
#[derive(Debug, Clone)]
pub(crate) struct EvalBuffers {
    rows: Vec<usize>,
    x: Array2<f64>,
    y: Array1<f64>,
    pre: Array2<f64>,
    pub(crate) margins: Array1<f64>,
    g: Array1<f64>,
    pub(crate) grad: NetworkParams,
}

impl EvalBuffers {
    /// Buffers for `rows` of `ds` (all rows when `None`) and width `k`.
    pub(crate) fn new(ds: &Dataset, rows: Option<&[usize]>, k: usize) -> Self {
        let rows: Vec<usize> = match rows {
            Some(r) => r.to_vec(),
            None => (0..ds.len()).collect(),
        };
        let n = rows.len();
        EvalBuffers {
            x: ds.points().select(Axis(0), &rows),
            y: rows.iter().map(|&i| ds.label(i)).collect(),
            pre: Array2::zeros((n, k)),
            margins: Array1::zeros(n),
            g: Array1::zeros(n),
            grad: NetworkParams::zeros(k, ds.dim()),
            rows,
        }
    }
}

impl NetworkParams {
    pub fn new(w: Array2<f64>, b: Array1<f64>, v: Array1<f64>) -> Result<Self> {
        let (k, d) = w.dim();
        if k == 0 || d == 0 {
            return Err(Error::invalid(format!("network needs k, d >= 1 (k={k}, d={d})")));
        }
        if b.len() != k || v.len() != k {
            return Err(Error::invalid(format!(
                "W has {k} rows but b has {} and v has {} entries",
                b.len(),
                v.len()
            )));
        }
        if !(w.iter().chain(b.iter()).chain(v.iter())).all(|x| x.is_finite()) {
            return Err(Error::invalid("non-finite network parameter"));
        }
        Ok(NetworkParams { w, b, v })
    }

    pub fn zeros(k: usize, d: usize) -> Self {
        NetworkParams {
            w: Array2::zeros((k, d)),
            b: Array1::zeros(k),
            v: Array1::zeros(k),
        }
    }

    pub fn width(&self) -> usize {
        self.w.nrows()
    }

    pub fn dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn w(&self) -> ArrayView2<'_, f64> {
        self.w.view()
    }

    pub fn b(&self) -> ArrayView1<'_, f64> {
        self.b.view()
    }

    pub fn v(&self) -> ArrayView1<'_, f64> {
        self.v.view()
    }

    pub fn into_parts(self) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
        (self.w, self.b, self.v)
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim() {
            return Err(Error::invalid(format!(
                "input has dimension {d}, network expects {}",
                self.dim()
            )));
        }
        Ok(())
    }

    /// Hidden-layer preactivations `w_j·x + b_j`.
    pub fn preactivations(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_dim(x.len())?;
        Ok(self.w.dot(&x) + &self.b)
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Result<f64> {
        self.check_dim(x.len())?;
        Ok(self.forward_unchecked(x))
    }

    /// The per-neuron terms are summed in sorted order, so the result does
    /// not depend on how the neurons are numbered.
    pub(crate) fn forward_unchecked(&self, x: ArrayView1<f64>) -> f64 {
        let pre = self.w.dot(&x);
        let mut terms: Vec<f64> = pre
            .iter()
            .zip(self.b.iter())
            .zip(self.v.iter())
            .map(|((&z, &b), &v)| v * (z + b).max(0.0))
            .collect();
        terms.sort_unstable_by(f64::total_cmp);
        terms.iter().sum()
    }

    /// `y_i · N(x_i)` for every example, each computed exactly as `forward`.
    pub fn margins(&self, ds: &Dataset) -> Result<Array1<f64>> {
        self.check_dim(ds.dim())?;
        Ok(Array1::from_iter(
            (0..ds.len()).map(|i| ds.label(i) * self.forward_unchecked(ds.point(i))),
        ))
    }

    pub fn loss_and_gradient(&self, ds: &Dataset, loss: LossKind) -> Result<(f64, NetworkParams)> {
        let ev = self.evaluate(ds, loss)?;
        Ok((ev.loss, ev.gradient))
    }

    pub fn evaluate(&self, ds: &Dataset, loss: LossKind) -> Result<Evaluation> {
        self.check_dim(ds.dim())?;
        let mut buf = EvalBuffers::new(ds, None, self.width());
        let loss = self.evaluate_into(loss, &mut buf)?;
        Ok(Evaluation {
            loss,
            margins: buf.margins,
            gradient: buf.grad,
        })
    }

    /// Loss, margins and gradient over the examples held by `buf`.
    ///
    /// The loss is summed in example order; all intermediates live in `buf`
    /// so repeated calls do not allocate.
    pub(crate) fn evaluate_into(&self, loss: LossKind, buf: &mut EvalBuffers) -> Result<f64> {
        // (n × k) preactivations
        general_mat_mul(1.0, &buf.x, &self.w.t(), 0.0, &mut buf.pre);
        buf.pre += &self.b;

        let mut total = 0.0;
        for (r, row) in buf.pre.outer_iter().enumerate() {
            let out = row
                .iter()
                .zip(self.v.iter())
                .fold(0.0, |acc, (&z, &v)| acc + v * z.max(0.0));
            let y = buf.y[r];
            let q = y * out;
            let l = loss.value(q);
            let dl = loss.derivative(q);
            if !q.is_finite() || !l.is_finite() || !dl.is_finite() {
                return Err(Error::NumericOverflow { example: buf.rows[r] });
            }
            total += l;
            buf.margins[r] = q;
            buf.g[r] = dl * y;
        }

        // grad_v_j = Σ_i g_i σ(pre_ij); then pre is overwritten with
        // D_ij = g_i · v_j · 1[pre_ij > 0]
        let NetworkParams { w: gw, b: gb, v: gv } = &mut buf.grad;
        gv.fill(0.0);
        gb.fill(0.0);
        Zip::from(buf.pre.rows_mut()).and(&buf.g).for_each(|mut row, &gi| {
            Zip::from(&mut row).and(&self.v).and(&mut *gv).and(&mut *gb).for_each(|z, &vj, gvj, gbj| {
                if *z > 0.0 {
                    *gvj += gi * *z;
                    *z = gi * vj;
                    *gbj += *z;
                } else {
                    *z = 0.0;
                }
            });
        });
        general_mat_mul(1.0, &buf.pre.t(), &buf.x, 0.0, gw);
        Ok(total)
    }

    pub fn scaled(&self, alpha: f64) -> NetworkParams {
        NetworkParams {
            w: &self.w * alpha,
            b: &self.b * alpha,
            v: &self.v * alpha,
        }
    }

    /// `self += alpha · other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &NetworkParams) {
        self.w.scaled_add(alpha, &other.w);
        self.b.scaled_add(alpha, &other.b);
        self.v.scaled_add(alpha, &other.v);
    }

    /// Whether `self + alpha · other` stays finite in every coordinate.
    pub(crate) fn step_is_finite(&self, alpha: f64, other: &NetworkParams) -> bool {
        let ok = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, g)| (x + alpha * g).is_finite());
        match (
            self.w.as_slice(),
            other.w.as_slice(),
        ) {
            (Some(w), Some(gw)) => {
                ok(w, gw) && ok(self.b.as_slice().unwrap(), other.b.as_slice().unwrap())
                    && ok(self.v.as_slice().unwrap(), other.v.as_slice().unwrap())
            }
            _ => {
                let mut c = self.clone();
                c.add_scaled(alpha, other);
                c.is_finite()
            }
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.w.iter().chain(self.b.iter()).chain(self.v.iter()).map(|x| x * x).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// All parameters as one vector, in the order W (row-major), b, v.
    pub fn flatten(&self) -> Vec<f64> {
        self.w.iter().chain(self.b.iter()).chain(self.v.iter()).copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(self.b.iter()).chain(self.v.iter()).all(|x| x.is_finite())
    }

    /// Neuron `perm[j]` of `self` becomes neuron `j` of the result.
    pub fn permuted(&self, perm: &[usize]) -> Result<NetworkParams> {
        let k = self.width();
        let mut seen = vec![false; k];
        if perm.len() != k || perm.iter().any(|&p| p >= k || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("not a permutation of the neurons"));
        }
        Ok(NetworkParams {
            w: self.w.select(Axis(0), perm),
            b: perm.iter().map(|&p| self.b[p]).collect(),
            v: perm.iter().map(|&p| self.v[p]).collect(),
        })
    }

    /// Appends zero-weight neurons until the width is `k`.
    pub fn padded_to(&self, k: usize) -> NetworkParams {
        let cur = self.width();
        if k <= cur {
            return self.clone();
        }
        let mut w = Array2::zeros((k, self.dim()));
        w.slice_mut(ndarray::s![..cur, ..]).assign(&self.w);
        let mut b = Array1::zeros(k);
        b.slice_mut(ndarray::s![..cur]).assign(&self.b);
        let mut v = Array1::zeros(k);
        v.slice_mut(ndarray::s![..cur]).assign(&self.v);
        NetworkParams { w, b, v }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&NetFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<NetworkParams> {
        let f: NetFile = serde_json::from_str(text)?;
        f.try_into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<NetworkParams> {
        NetworkParams::from_json(&fs::read_to_string(path)?)
    }
}

/// `.net.json` layout; `W` is row-major `k·d`.
#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct NetFile {
    k: usize,
    d: usize,
    #[serde(rename = "W")]
    w: Vec<f64>,
    b: Vec<f64>,
    v: Vec<f64>,
}

impl From<&NetworkParams> for NetFile {
    fn from(p: &NetworkParams) -> Self {
        NetFile {
            k: p.width(),
            d: p.dim(),
            w: p.w.iter().copied().collect(),
            b: p.b.to_vec(),
            v: p.v.to_vec(),
        }
    }
}

impl TryFrom<NetFile> for NetworkParams {
    type Error = Error;

    fn try_from(f: NetFile) -> Result<NetworkParams> {
        if f.w.len() != f.k * f.d {
            return Err(Error::invalid(format!(
                "W has {} entries, expected k*d = {}",
                f.w.len(),
                f.k * f.d
            )));
        }
        let w = Array2::from_shape_vec((f.k, f.d), f.w).map_err(|e| Error::invalid(e.to_string()))?;
        NetworkParams::new(w, Array1::from(f.b), Array1::from(f.v))
    }
}

impl Serialize for NetworkParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        NetFile::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for NetworkParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let f = NetFile::deserialize(d)?;
        f.try_into().map_err(serde::de::Error::custom)
    }
}

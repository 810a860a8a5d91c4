//! Learned heads of the conditioning pipeline, each with an explicit
//! reverse-mode pass.
//!
//! Token grids are `(N, D)` matrices, one row per token in row-major token
//! order. Text embeddings are `D`-vectors.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub(crate) fn randn<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| std * rng.sample::<f64, _>(StandardNormal))
}

fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let col = a.insert_axis(Axis(1));
    let row = b.insert_axis(Axis(0));
    col.dot(&row)
}

/// Text-conditioned feature-wise affine modulation.
#[derive(Clone, Debug, PartialEq)]
pub struct FilmHead {
    pub scale_w: Array2<f64>,
    pub scale_b: Array1<f64>,
    pub shift_w: Array2<f64>,
    pub shift_b: Array1<f64>,
}

#[derive(Clone, Debug)]
pub struct FilmGrads {
    pub head: FilmHead,
    pub feat: Array2<f64>,
    pub text: Array1<f64>,
}

impl FilmHead {
    pub fn zeros(dim: usize) -> Self {
        Self {
            scale_w: Array2::zeros((dim, dim)),
            scale_b: Array1::zeros(dim),
            shift_w: Array2::zeros((dim, dim)),
            shift_b: Array1::zeros(dim),
        }
    }

    pub fn init<R: Rng>(rng: &mut R, dim: usize) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        Self {
            scale_w: randn(rng, dim, dim, 0.5 * std),
            scale_b: Array1::zeros(dim),
            shift_w: randn(rng, dim, dim, std),
            shift_b: Array1::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.scale_b.len()
    }

    /// `(scale, shift)` generated from a text embedding.
    pub fn params_for(&self, text: ArrayView1<f64>) -> (Array1<f64>, Array1<f64>) {
        (text.dot(&self.scale_w) + &self.scale_b, text.dot(&self.shift_w) + &self.shift_b)
    }

    fn check(&self, feat: ArrayView2<f64>, text: ArrayView1<f64>) -> Result<()> {
        let d = self.dim();
        if feat.ncols() != d || text.len() != d {
            return Err(Error::ShapeMismatch(format!(
                "FiLM head of dim {d} applied to features of dim {} and text of dim {}",
                feat.ncols(),
                text.len()
            )));
        }
        Ok(())
    }

    /// `feat + (scale ⊙ feat + shift)` with `(scale, shift)` generated from `text`.
    pub fn forward(&self, feat: ArrayView2<f64>, text: ArrayView1<f64>) -> Result<Array2<f64>> {
        self.check(feat, text)?;
        let (scale, shift) = self.params_for(text);
        let gain = scale.mapv(|g| 1.0 + g);
        Ok(&feat * &gain + &shift)
    }

    pub fn backward(
        &self,
        feat: ArrayView2<f64>,
        text: ArrayView1<f64>,
        grad_out: ArrayView2<f64>,
    ) -> FilmGrads {
        let (scale, _) = self.params_for(text);
        let gain = scale.mapv(|g| 1.0 + g);
        let d_feat = &grad_out * &gain;
        let d_scale = (&grad_out * &feat).sum_axis(Axis(0));
        let d_shift = grad_out.sum_axis(Axis(0));
        let d_text = self.scale_w.dot(&d_scale) + self.shift_w.dot(&d_shift);
        FilmGrads {
            head: FilmHead {
                scale_w: outer(text, d_scale.view()),
                scale_b: d_scale,
                shift_w: outer(text, d_shift.view()),
                shift_b: d_shift,
            },
            feat: d_feat,
            text: d_text,
        }
    }
}

/// Linear projection of a concatenated `[object | part]` pair back to `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjHead {
    /// `(2D, D)`; the top half multiplies the object input.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug)]
pub struct ProjGrads {
    pub head: ProjHead,
    pub obj: Array2<f64>,
    pub part: Array2<f64>,
}

/// Input to [`compose_objpart`]: text-side vectors or image-side token grids.
#[derive(Clone, Debug, PartialEq)]
pub enum Embedding {
    Text(Array1<f64>),
    Image(Array2<f64>),
}

impl ProjHead {
    pub fn zeros(dim: usize) -> Self {
        Self { weight: Array2::zeros((2 * dim, dim)), bias: Array1::zeros(dim) }
    }

    pub fn init<R: Rng>(rng: &mut R, dim: usize) -> Self {
        let std = 1.0 / (2.0 * dim as f64).sqrt();
        let mut weight = randn(rng, 2 * dim, dim, 0.5 * std);
        // start close to the average of the two inputs
        for i in 0..dim {
            weight[[i, i]] += 0.5;
            weight[[dim + i, i]] += 0.5;
        }
        Self { weight, bias: Array1::zeros(dim) }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    pub fn forward(&self, obj: ArrayView2<f64>, part: ArrayView2<f64>) -> Result<Array2<f64>> {
        let d = self.dim();
        if obj.ncols() != d || part.ncols() != d || obj.nrows() != part.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "projection of dim {d} applied to {:?} and {:?}",
                obj.dim(),
                part.dim()
            )));
        }
        let top = self.weight.slice(s![..d, ..]);
        let bottom = self.weight.slice(s![d.., ..]);
        Ok(obj.dot(&top) + part.dot(&bottom) + &self.bias)
    }

    pub fn backward(
        &self,
        obj: ArrayView2<f64>,
        part: ArrayView2<f64>,
        grad_out: ArrayView2<f64>,
    ) -> ProjGrads {
        let d = self.dim();
        let top = self.weight.slice(s![..d, ..]);
        let bottom = self.weight.slice(s![d.., ..]);
        let weight = concatenate![Axis(0), obj.t().dot(&grad_out), part.t().dot(&grad_out)];
        ProjGrads {
            head: ProjHead { weight, bias: grad_out.sum_axis(Axis(0)) },
            obj: grad_out.dot(&top.t()),
            part: grad_out.dot(&bottom.t()),
        }
    }
}

/// `Proj([obj | part])`, applied per vector for text inputs and per token for
/// image inputs.
pub fn compose_objpart(obj: &Embedding, part: &Embedding, head: &ProjHead) -> Result<Embedding> {
    match (obj, part) {
        (Embedding::Text(o), Embedding::Text(p)) => {
            let out = head.forward(
                o.view().insert_axis(Axis(0)),
                p.view().insert_axis(Axis(0)),
            )?;
            Ok(Embedding::Text(out.row(0).to_owned()))
        }
        (Embedding::Image(o), Embedding::Image(p)) => {
            Ok(Embedding::Image(head.forward(o.view(), p.view())?))
        }
        _ => Err(Error::KindMismatch("object and part embeddings must both be text or both be image".into())),
    }
}

/// Residual self-attention block followed by a residual ReLU MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlock {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Activations kept from the forward pass.
#[derive(Clone, Debug)]
pub struct BlockCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Row-stochastic self-attention, `(N, N)`.
    pub attention: Array2<f64>,
    z: Array2<f64>,
    h: Array2<f64>,
    u: Array2<f64>,
}

impl BlockCache {
    /// Smallest `|pre-activation|` of the MLP ReLU; distance to its kink.
    pub fn relu_margin(&self) -> f64 {
        self.u.iter().fold(f64::INFINITY, |m, &v| m.min(v.abs()))
    }
}

impl DecoderBlock {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            wq: Array2::zeros((dim, dim)),
            wk: Array2::zeros((dim, dim)),
            wv: Array2::zeros((dim, dim)),
            wo: Array2::zeros((dim, dim)),
            w1: Array2::zeros((dim, hidden)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, dim)),
            b2: Array1::zeros(dim),
        }
    }

    pub fn init<R: Rng>(rng: &mut R, dim: usize, hidden: usize) -> Self {
        let sd = 1.0 / (dim as f64).sqrt();
        let sh = 1.0 / (hidden as f64).sqrt();
        Self {
            wq: randn(rng, dim, dim, sd),
            wk: randn(rng, dim, dim, sd),
            wv: randn(rng, dim, dim, sd),
            wo: randn(rng, dim, dim, 0.5 * sd),
            w1: randn(rng, dim, hidden, sd),
            b1: Array1::zeros(hidden),
            w2: randn(rng, hidden, dim, 0.5 * sh),
            b2: Array1::zeros(dim),
        }
    }

    fn inv_temperature(&self) -> f64 {
        1.0 / (self.wq.ncols() as f64).sqrt()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, BlockCache) {
        let q = x.dot(&self.wq);
        let k = x.dot(&self.wk);
        let v = x.dot(&self.wv);
        let mut attention = q.dot(&k.t()) * self.inv_temperature();
        softmax_rows(&mut attention);
        let z = attention.dot(&v);
        let h = &x + &z.dot(&self.wo);
        let u = h.dot(&self.w1) + &self.b1;
        let r = u.mapv(|a| a.max(0.0));
        let y = &h + &(r.dot(&self.w2) + &self.b2);
        let cache = BlockCache { x: x.to_owned(), q, k, v, attention, z, h, u };
        (y, cache)
    }

    /// Returns `(parameter grads, input grad)`. `grad_attention`, when given,
    /// is an extra upstream gradient on the attention matrix itself.
    pub fn backward(
        &self,
        cache: &BlockCache,
        grad_out: ArrayView2<f64>,
        grad_attention: Option<ArrayView2<f64>>,
    ) -> (DecoderBlock, Array2<f64>) {
        let r = cache.u.mapv(|a| a.max(0.0));
        let dw2 = r.t().dot(&grad_out);
        let db2 = grad_out.sum_axis(Axis(0));
        let mut du = grad_out.dot(&self.w2.t());
        du.zip_mut_with(&cache.u, |g, &u| {
            if u <= 0.0 {
                *g = 0.0
            }
        });
        let dw1 = cache.h.t().dot(&du);
        let db1 = du.sum_axis(Axis(0));
        let dh = &grad_out + &du.dot(&self.w1.t());

        let dwo = cache.z.t().dot(&dh);
        let dz = dh.dot(&self.wo.t());
        let mut da = dz.dot(&cache.v.t());
        if let Some(extra) = grad_attention {
            da += &extra;
        }
        let dv = cache.attention.t().dot(&dz);
        let ds = softmax_rows_backward(&cache.attention, &da) * self.inv_temperature();
        let dq = ds.dot(&cache.k);
        let dk = ds.t().dot(&cache.q);

        let dwq = cache.x.t().dot(&dq);
        let dwk = cache.x.t().dot(&dk);
        let dwv = cache.x.t().dot(&dv);
        let dx = dh + dq.dot(&self.wq.t()) + dk.dot(&self.wk.t()) + dv.dot(&self.wv.t());
        (
            DecoderBlock { wq: dwq, wk: dwk, wv: dwv, wo: dwo, w1: dw1, b1: db1, w2: dw2, b2: db2 },
            dx,
        )
    }
}

pub(crate) fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

fn softmax_rows_backward(a: &Array2<f64>, da: &Array2<f64>) -> Array2<f64> {
    let mut ds = a * da;
    for (mut row, arow) in ds.rows_mut().into_iter().zip(a.rows()) {
        let dot = row.sum();
        row.zip_mut_with(&arow, |g, &p| *g -= p * dot);
    }
    ds
}

/// Category-agnostic 1×1 readout: one logit per token.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskHead {
    pub weight: Array1<f64>,
    pub bias: Array1<f64>,
}

impl MaskHead {
    pub fn zeros(dim: usize) -> Self {
        Self { weight: Array1::zeros(dim), bias: Array1::zeros(1) }
    }

    pub fn init<R: Rng>(rng: &mut R, dim: usize, bias: f64) -> Self {
        let w = randn(rng, 1, dim, 1.0 / (dim as f64).sqrt());
        Self { weight: w.row(0).to_owned(), bias: Array1::from_elem(1, bias) }
    }

    pub fn forward(&self, feat: ArrayView2<f64>) -> Array1<f64> {
        feat.dot(&self.weight) + self.bias[0]
    }

    /// Returns `(parameter grads, feature grad)`.
    pub fn backward(&self, feat: ArrayView2<f64>, grad_out: ArrayView1<f64>) -> (MaskHead, Array2<f64>) {
        let grads = MaskHead {
            weight: feat.t().dot(&grad_out),
            bias: Array1::from_elem(1, grad_out.sum()),
        };
        (grads, outer(grad_out, self.weight.view()))
    }
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    #[test]
    fn zero_film_is_identity() {
        let head = FilmHead::zeros(2);
        let feat = array![[1.0, -2.0], [0.5, 3.0]];
        let out = head.forward(feat.view(), array![0.3, 0.7].view()).unwrap();
        assert_eq!(out, feat);
    }

    #[test]
    fn film_pure_shift_and_doubling() {
        let mut head = FilmHead::zeros(2);
        head.shift_b = array![1.5, -0.5];
        let feat = array![[1.0, 2.0]];
        let out = head.forward(feat.view(), array![0.0, 0.0].view()).unwrap();
        assert_eq!(out, array![[2.5, 1.5]]);

        let mut head = FilmHead::zeros(2);
        head.scale_b = array![1.0, 1.0];
        let out = head.forward(feat.view(), array![0.0, 0.0].view()).unwrap();
        assert_eq!(out, array![[2.0, 4.0]]);
    }

    #[test]
    fn film_ones_grid_gives_threes() {
        let mut head = FilmHead::zeros(3);
        head.scale_b.fill(1.0);
        head.shift_b.fill(1.0);
        let out = head.forward(Array2::ones((4, 3)).view(), Array1::zeros(3).view()).unwrap();
        assert!(out.iter().all(|&v| v == 3.0));
    }

    #[test]
    fn film_shape_mismatch() {
        let head = FilmHead::zeros(3);
        let err = head.forward(Array2::ones((4, 2)).view(), Array1::zeros(3).view());
        assert!(matches!(err, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn projection_selects_halves() {
        let d = 3;
        let mut left = ProjHead::zeros(d);
        let mut right = ProjHead::zeros(d);
        for i in 0..d {
            left.weight[[i, i]] = 1.0;
            right.weight[[d + i, i]] = 1.0;
        }
        let o = Embedding::Text(array![1.0, 2.0, 3.0]);
        let p = Embedding::Text(array![-1.0, 0.0, 4.0]);
        assert_eq!(compose_objpart(&o, &p, &left).unwrap(), o);
        assert_eq!(compose_objpart(&o, &p, &right).unwrap(), p);
    }

    #[test]
    fn projection_half_sum() {
        let mut head = ProjHead::zeros(2);
        for i in 0..2 {
            head.weight[[i, i]] = 0.5;
            head.weight[[2 + i, i]] = 0.5;
        }
        let out = compose_objpart(
            &Embedding::Text(array![1.0, 0.0]),
            &Embedding::Text(array![0.0, 1.0]),
            &head,
        )
        .unwrap();
        assert_eq!(out, Embedding::Text(array![0.5, 0.5]));
    }

    #[test]
    fn projection_kind_mismatch() {
        let head = ProjHead::zeros(2);
        let err = compose_objpart(
            &Embedding::Text(array![1.0, 0.0]),
            &Embedding::Image(array![[0.0, 1.0]]),
            &head,
        );
        assert!(matches!(err, Err(Error::KindMismatch(_))));
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = rand::thread_rng();
        let block = DecoderBlock::init(&mut rng, 4, 8);
        let x = randn(&mut rng, 6, 4, 1.0);
        let (_, cache) = block.forward(x.view());
        for row in cache.attention.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }
}

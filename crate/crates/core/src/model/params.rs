//! Trainable parameter set and name-addressed views over it.

use ndarray::{Array1, ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{randn, DecoderBlock, FilmHead, MaskHead, ProjHead};

pub type Named<'a> = Vec<(String, ArrayViewD<'a, f64>)>;
pub type NamedMut<'a> = Vec<(String, ArrayViewMutD<'a, f64>)>;

pub trait Params {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Named<'a>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedMut<'a>);

    /// `self += scale * other`.
    fn add_scaled(&mut self, other: &Self, scale: f64)
    where
        Self: Sized,
    {
        let mut mine = Vec::new();
        self.visit_mut("", &mut mine);
        let mut theirs = Vec::new();
        other.visit("", &mut theirs);
        for ((_, mut a), (_, b)) in mine.into_iter().zip(theirs) {
            a.zip_mut_with(&b, |x, &y| *x += scale * y);
        }
    }
}

macro_rules! impl_params {
    ($ty:ty { $($field:ident),* }) => {
        impl Params for $ty {
            fn visit<'a>(&'a self, prefix: &str, out: &mut Named<'a>) {
                $(out.push((format!("{prefix}.{}", stringify!($field)), self.$field.view().into_dyn()));)*
            }
            fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedMut<'a>) {
                $(out.push((format!("{prefix}.{}", stringify!($field)), self.$field.view_mut().into_dyn()));)*
            }
        }
    };
}

impl_params!(FilmHead { scale_w, scale_b, shift_w, shift_b });
impl_params!(ProjHead { weight, bias });
impl_params!(DecoderBlock { wq, wk, wv, wo, w1, b1, w2, b2 });
impl_params!(MaskHead { weight, bias });

/// Everything the optimizer may update. The same type doubles as the
/// gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainable {
    pub film_obj: FilmHead,
    pub film_part: FilmHead,
    pub film_objpart: FilmHead,
    pub proj_text: ProjHead,
    pub proj_img: ProjHead,
    pub blocks: Vec<DecoderBlock>,
    pub head_pair: MaskHead,
    pub head_obj: MaskHead,
    pub head_part: MaskHead,
    /// Learned text embeddings standing in for the two uncategory channels.
    pub uncat_pair: Array1<f64>,
    pub uncat_obj: Array1<f64>,
}

impl Trainable {
    pub fn init(dim: usize, hidden: usize, num_blocks: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let film_obj = FilmHead::init(&mut rng, dim);
        let film_part = FilmHead::init(&mut rng, dim);
        let film_objpart = FilmHead::init(&mut rng, dim);
        let proj_text = ProjHead::init(&mut rng, dim);
        let proj_img = ProjHead::init(&mut rng, dim);
        let blocks = (0..num_blocks).map(|_| DecoderBlock::init(&mut rng, dim, hidden)).collect();
        let head_pair = MaskHead::init(&mut rng, dim, -2.0);
        let head_obj = MaskHead::init(&mut rng, dim, -2.0);
        let head_part = MaskHead::init(&mut rng, dim, -2.0);
        let std = 1.0 / (dim as f64).sqrt();
        let uncat_pair = randn(&mut rng, 1, dim, std).row(0).to_owned();
        let uncat_obj = randn(&mut rng, 1, dim, std).row(0).to_owned();
        Self {
            film_obj,
            film_part,
            film_objpart,
            proj_text,
            proj_img,
            blocks,
            head_pair,
            head_obj,
            head_part,
            uncat_pair,
            uncat_obj,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, mut t) in z.named_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn named(&self) -> Named<'_> {
        let mut out = Vec::new();
        self.film_obj.visit("film_obj", &mut out);
        self.film_part.visit("film_part", &mut out);
        self.film_objpart.visit("film_objpart", &mut out);
        self.proj_text.visit("proj_text", &mut out);
        self.proj_img.visit("proj_img", &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("decoder.{i}"), &mut out);
        }
        self.head_pair.visit("head_pair", &mut out);
        self.head_obj.visit("head_obj", &mut out);
        self.head_part.visit("head_part", &mut out);
        out.push(("uncat_pair".into(), self.uncat_pair.view().into_dyn()));
        out.push(("uncat_obj".into(), self.uncat_obj.view().into_dyn()));
        out
    }

    pub fn named_mut(&mut self) -> NamedMut<'_> {
        let mut out = Vec::new();
        self.film_obj.visit_mut("film_obj", &mut out);
        self.film_part.visit_mut("film_part", &mut out);
        self.film_objpart.visit_mut("film_objpart", &mut out);
        self.proj_text.visit_mut("proj_text", &mut out);
        self.proj_img.visit_mut("proj_img", &mut out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("decoder.{i}"), &mut out);
        }
        self.head_pair.visit_mut("head_pair", &mut out);
        self.head_obj.visit_mut("head_obj", &mut out);
        self.head_part.visit_mut("head_part", &mut out);
        out.push(("uncat_pair".into(), self.uncat_pair.view_mut().into_dyn()));
        out.push(("uncat_obj".into(), self.uncat_obj.view_mut().into_dyn()));
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.named().iter().flat_map(|(_, t)| t.iter().copied().collect::<Vec<_>>()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut i = 0;
        for (_, mut t) in self.named_mut() {
            for v in t.iter_mut() {
                *v = flat[i];
                i += 1;
            }
        }
        assert_eq!(i, flat.len(), "flat parameter length mismatch");
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Trainable, scale: f64) {
        for ((_, mut a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            a.zip_mut_with(&b, |x, &y| *x += scale * y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, mut t) in self.named_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn sum_squares(&self) -> f64 {
        self.named().iter().map(|(_, t)| t.iter().map(|v| v * v).sum::<f64>()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

//! Positional-aware feature embedding.
//!
//! A fixed coordinate grid is appended to the image as two extra channels,
//! a non-overlapping 4×4 convolution embeds each patch, and a depth-wise
//! convolution adds a learned positional residual: `x + dwconv(x)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{DwConv, Init, Linear, INIT_STD};
use crate::ops;
use crate::tensor::{Element, FeatureMap, Module, Parameter, Tensor};

pub const PATCH: usize = 4;
pub const IMAGE_CHANNELS: usize = 3;
pub const GRID_CHANNELS: usize = 2;
pub const EMBED_IN: usize = IMAGE_CHANNELS + GRID_CHANNELS;
pub const POS_KERNEL: usize = 3;

/// Normalized coordinates `[H×W×2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordGrid<T>(pub Tensor<T>);

/// `grid[i, j] = [i/W − 0.5, j/H − 0.5]` for row `i` and column `j`.
///
/// Row index is divided by the width and column index by the height, as the
/// formula is usually written; the two only agree on square inputs.
pub fn make_grid<T: Element>(h: usize, w: usize) -> CoordGrid<T> {
    let mut data = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        for j in 0..w {
            data.push(T::lit(i as f64 / w as f64 - 0.5));
            data.push(T::lit(j as f64 / h as f64 - 0.5));
        }
    }
    CoordGrid(Tensor::from_vec(&[h, w, 2], data).expect("grid shape"))
}

/// Patch embedding weights (`[d×4×4×5]` + bias) and the optional positional
/// depth-wise kernel.
#[derive(Clone, Debug)]
pub struct PatchEmbedParams<T> {
    pub proj: Linear<T>,
    pub dw: Option<DwConv<T>>,
}

impl<T: Element> PatchEmbedParams<T> {
    pub fn new<R: Rng>(name: &str, dim: usize, pos_emb: bool, rng: &mut R) -> Self {
        let mut proj = Linear::new(
            &format!("{name}.proj"),
            PATCH * PATCH * EMBED_IN,
            dim,
            true,
            Init::TruncNormal(INIT_STD),
            rng,
        );
        // stored as [d, ky, kx, c]; identical memory layout to [d, 80]
        proj.weight.value = proj
            .weight
            .value
            .clone()
            .reshape(&[dim, PATCH, PATCH, EMBED_IN])
            .expect("patch weight");
        let dw = pos_emb.then(|| {
            DwConv::new(&format!("{name}.pos"), POS_KERNEL, dim, Init::TruncNormal(INIT_STD), rng)
                .expect("odd kernel")
        });
        PatchEmbedParams { proj, dw }
    }

    pub fn dim(&self) -> usize {
        self.proj.d_out
    }
}

impl<T: Element> Module<T> for PatchEmbedParams<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.proj.visit(f);
        self.dw.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.proj.visit_mut(f);
        self.dw.visit_mut(f);
    }
}

/// Embedding stage of the network.
#[derive(Clone, Debug)]
pub struct Pfe<T> {
    pub params: PatchEmbedParams<T>,
    pub height: usize,
    pub width: usize,
    grid: CoordGrid<T>,
}

pub struct PfeCache<T> {
    batch: usize,
    cols: Vec<T>,
    embedded: Vec<T>,
}

impl<T: Element> Pfe<T> {
    pub fn new<R: Rng>(name: &str, height: usize, width: usize, dim: usize, pos_emb: bool, rng: &mut R) -> Result<Self> {
        if !height.is_multiple_of(PATCH) || !width.is_multiple_of(PATCH) || height == 0 || width == 0 {
            return Err(Error::config(
                "input_size",
                format!("{height}×{width} is not divisible by the patch size {PATCH}"),
            ));
        }
        Ok(Pfe {
            params: PatchEmbedParams::new(name, dim, pos_emb, rng),
            height,
            width,
            grid: make_grid(height, width),
        })
    }

    pub fn out_size(&self) -> (usize, usize) {
        (self.height / PATCH, self.width / PATCH)
    }

    /// Images `[batch×H×W×3]`, already standardized.
    pub fn forward(&self, images: &[T], batch: usize) -> (FeatureMap<T>, PfeCache<T>) {
        let (h, w) = (self.height, self.width);
        let mut joined = Vec::with_capacity(batch * h * w * EMBED_IN);
        for b in 0..batch {
            let img = &images[b * h * w * IMAGE_CHANNELS..(b + 1) * h * w * IMAGE_CHANNELS];
            for (px, g) in img
                .chunks_exact(IMAGE_CHANNELS)
                .zip(self.grid.0.data().chunks_exact(GRID_CHANNELS))
            {
                joined.extend_from_slice(px);
                joined.extend_from_slice(g);
            }
        }
        let cols = ops::im2col_patches(&joined, batch, h, w, EMBED_IN, PATCH);
        let (oh, ow) = self.out_size();
        let rows = batch * oh * ow;
        let embedded = self.params.proj.forward(&cols, rows);
        let out = match &self.params.dw {
            Some(dw) => {
                let mut y = dw.forward(&embedded, batch, oh, ow);
                for (o, &e) in y.iter_mut().zip(&embedded) {
                    *o += e;
                }
                y
            }
            None => embedded.clone(),
        };
        (
            FeatureMap::new(batch, oh, ow, self.params.dim(), 1, out),
            PfeCache { batch, cols, embedded },
        )
    }

    /// Returns the gradient with respect to the image channels.
    pub fn backward(&mut self, cache: &PfeCache<T>, dy: &[T]) -> Vec<T> {
        let (oh, ow) = self.out_size();
        let batch = cache.batch;
        let mut d_embedded = dy.to_vec();
        if let Some(dw) = self.params.dw.as_mut() {
            let extra = dw.backward(&cache.embedded, batch, oh, ow, dy);
            for (g, e) in d_embedded.iter_mut().zip(extra) {
                *g += e;
            }
        }
        let dcols = self.params.proj.backward(&cache.cols, batch * oh * ow, &d_embedded);
        let djoined = ops::col2im_patches(&dcols, batch, self.height, self.width, EMBED_IN, PATCH);
        djoined
            .chunks_exact(EMBED_IN)
            .flat_map(|px| px[..IMAGE_CHANNELS].iter().copied())
            .collect()
    }
}

impl<T: Element> Module<T> for Pfe<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.params.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.params.visit_mut(f);
    }
}

/// Concatenate `grid` to `img[H×W×3]` and apply the 4×4 stride-4 embedding.
/// The positional residual is not applied; see [`pos_residual`].
pub fn patch_embed<T: Element>(img: &Tensor<T>, grid: &CoordGrid<T>, params: &PatchEmbedParams<T>) -> Result<Tensor<T>> {
    let (h, w) = match *img.shape() {
        [h, w, IMAGE_CHANNELS] => (h, w),
        _ => return Err(Error::Dimension(format!("image must be [H×W×3], got {:?}", img.shape()))),
    };
    if grid.0.shape() != [h, w, GRID_CHANNELS] {
        return Err(Error::Dimension(format!("grid {:?} does not match image {h}×{w}", grid.0.shape())));
    }
    if h % PATCH != 0 || w % PATCH != 0 {
        return Err(Error::config("input_size", format!("{h}×{w} is not divisible by {PATCH}")));
    }
    let mut joined = Vec::with_capacity(h * w * EMBED_IN);
    for (px, g) in img.data().chunks_exact(3).zip(grid.0.data().chunks_exact(2)) {
        joined.extend_from_slice(px);
        joined.extend_from_slice(g);
    }
    let cols = ops::im2col_patches(&joined, 1, h, w, EMBED_IN, PATCH);
    let out = params.proj.forward(&cols, (h / PATCH) * (w / PATCH));
    Tensor::from_vec(&[h / PATCH, w / PATCH, params.dim()], out)
}

/// `x + dwconv(x)` on a single `[H×W×d]` map.
pub fn pos_residual<T: Element>(x: &Tensor<T>, dw: &DwConv<T>) -> Result<Tensor<T>> {
    let conv = ops::dwconv2d(x, &dw.kernel.value)?;
    let data = x.data().iter().zip(conv.data()).map(|(&a, &b)| a + b).collect();
    Tensor::from_vec(x.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::trunc_normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_examples() {
        let g = make_grid::<f64>(2, 2).0;
        assert_eq!(&g.data()[..2], &[-0.5, -0.5]);
        assert_eq!(&g.data()[6..], &[0.0, 0.0]);
        let g1 = make_grid::<f64>(1, 1).0;
        assert_eq!(g1.data(), &[-0.5, -0.5]);
    }

    #[test]
    fn grid_is_increasing_and_antisymmetric() {
        for (h, w) in [(4, 4), (6, 8), (8, 6), (2, 10)] {
            let g = make_grid::<f64>(h, w).0;
            for i in 0..h {
                for j in 0..w {
                    if i + 1 < h {
                        assert!(g.at(&[i + 1, j, 0]) > g.at(&[i, j, 0]));
                    }
                    if j + 1 < w {
                        assert!(g.at(&[i, j + 1, 1]) > g.at(&[i, j, 1]));
                    }
                    let a = g.at(&[i, j, 0]) + g.at(&[h - 1 - i, w - 1 - j, 0]);
                    let b = g.at(&[i, j, 1]) + g.at(&[h - 1 - i, w - 1 - j, 1]);
                    assert!((a - ((h - 1) as f64 / w as f64 - 1.0)).abs() < 1e-12);
                    assert!((b - ((w - 1) as f64 / h as f64 - 1.0)).abs() < 1e-12);
                }
            }
        }
    }

    fn params(dim: usize, seed: u64) -> PatchEmbedParams<f64> {
        PatchEmbedParams::new("pfe", dim, true, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn zero_weights_give_bias_map() {
        let mut p = params(3, 1);
        p.proj.weight.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        p.proj.bias.as_mut().unwrap().value = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let img: Tensor<f64> = trunc_normal(&mut ChaCha8Rng::seed_from_u64(2), &[8, 12, 3], 1.0);
        let out = patch_embed(&img, &make_grid(8, 12), &p).unwrap();
        assert_eq!(out.shape(), &[2, 3, 3]);
        for px in out.data().chunks(3) {
            assert_eq!(px, &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn single_patch_is_flattened_dot_product() {
        let p = params(2, 3);
        let img: Tensor<f64> = trunc_normal(&mut ChaCha8Rng::seed_from_u64(4), &[4, 4, 3], 1.0);
        let grid = make_grid(4, 4);
        let out = patch_embed(&img, &grid, &p).unwrap();
        let w = p.proj.weight.value.data();
        for o in 0..2 {
            let mut want = 0.0;
            for ky in 0..4 {
                for kx in 0..4 {
                    for c in 0..5 {
                        let v = if c < 3 { img.at(&[ky, kx, c]) } else { grid.0.at(&[ky, kx, c - 3]) };
                        want += v * w[((o * 4 + ky) * 4 + kx) * 5 + c];
                    }
                }
            }
            assert!((out.data()[o] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_patches_embed_identically() {
        let p = params(4, 5);
        let patch: Tensor<f64> = trunc_normal(&mut ChaCha8Rng::seed_from_u64(6), &[4, 4, 3], 1.0);
        let mut img = Tensor::<f64>::zeros(&[4, 8, 3]);
        for y in 0..4 {
            for x in 0..8 {
                for c in 0..3 {
                    img.set(&[y, x, c], patch.at(&[y, x % 4, c]));
                }
            }
        }
        // the grid differs between the two patches, so compare with a constant grid
        let flat = CoordGrid(Tensor::zeros(&[4, 8, 2]));
        let out = patch_embed(&img, &flat, &p).unwrap();
        assert_eq!(&out.data()[..4], &out.data()[4..]);
    }

    #[test]
    fn indivisible_input_rejected() {
        let p = params(2, 1);
        let img = Tensor::<f64>::zeros(&[6, 8, 3]);
        assert!(matches!(patch_embed(&img, &make_grid(6, 8), &p), Err(Error::Config { .. })));
        assert!(Pfe::<f32>::new("pfe", 6, 8, 4, true, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn pos_residual_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Tensor<f64> = trunc_normal(&mut rng, &[3, 5, 2], 1.0);
        let mut dw = DwConv::new("dw", 3, 2, Init::Zeros, &mut rng).unwrap();
        assert_eq!(pos_residual(&x, &dw).unwrap(), x);

        dw.kernel.value.set(&[1, 1, 0], 1.0);
        dw.kernel.value.set(&[1, 1, 1], 1.0);
        let doubled = pos_residual(&x, &dw).unwrap();
        assert!(doubled.data().iter().zip(x.data()).all(|(a, b)| *a == 2.0 * b));

        let dw = DwConv::new("dw", 3, 2, Init::TruncNormal(1.0), &mut rng).unwrap();
        let y = pos_residual(&x, &dw).unwrap();
        let conv = ops::dwconv2d(&x, &dw.kernel.value).unwrap();
        for ((a, b), c) in y.data().iter().zip(x.data()).zip(conv.data()) {
            assert!((a - b - c).abs() < 1e-12);
        }
    }

    #[test]
    fn output_extent_is_quarter() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pfe = Pfe::<f32>::new("pfe", 16, 24, 8, true, &mut rng).unwrap();
        let img = vec![0.1f32; 2 * 16 * 24 * 3];
        let (map, _) = pfe.forward(&img, 2);
        assert_eq!((map.height, map.width, map.channels), (4, 6, 8));
    }
}

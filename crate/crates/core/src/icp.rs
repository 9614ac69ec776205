//! Cluster pooling between pyramid stages.
//!
//! Pixels are projected to a similarity space, grid-pooled seeds are placed
//! at half resolution, each pixel joins its most cosine-similar seed, and
//! every cluster is summarized by the mean of its members' similarity vectors
//! before a small perceptron maps it to the next stage's width. Because the
//! pooled values come from the similarity projection itself, that projection
//! receives gradient. [`Icp::forward_fec`] keeps the older wiring, where the
//! projection only decides membership and raw features are pooled instead.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Init, LayerNorm, Linear, Mlp, MlpCache, INIT_STD};
use crate::ops::{self, Activation, LayerNormCache, COS_EPS};
use crate::tensor::{Element, FeatureMap, Module, Parameter};

/// Hard partition of the input pixels into output cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolAssignment {
    pub in_size: (usize, usize),
    pub out_size: (usize, usize),
    /// Output cell of every input pixel.
    pub owner: Vec<u32>,
    /// Input pixels of every output cell, ascending.
    pub members: Vec<Vec<u32>>,
}

impl PoolAssignment {
    pub fn from_owner(in_size: (usize, usize), out_size: (usize, usize), owner: Vec<u32>) -> Result<Self> {
        let k = out_size.0 * out_size.1;
        if owner.len() != in_size.0 * in_size.1 {
            return Err(Error::Dimension(format!(
                "{} owners for a {}×{} map",
                owner.len(),
                in_size.0,
                in_size.1
            )));
        }
        let mut members = vec![Vec::new(); k];
        for (i, &o) in owner.iter().enumerate() {
            let o = o as usize;
            if o >= k {
                return Err(Error::Format(format!("pixel {i} owned by cell {o} of {k}")));
            }
            members[o].push(i as u32);
        }
        Ok(PoolAssignment {
            in_size,
            out_size,
            owner,
            members,
        })
    }

    /// Every pixel is its own cell.
    pub fn identity(size: (usize, usize)) -> Self {
        let owner = (0..(size.0 * size.1) as u32).collect();
        PoolAssignment::from_owner(size, size, owner).expect("identity partition")
    }

    /// Owner and member lists agree and cover every pixel exactly once.
    pub fn is_partition(&self) -> bool {
        let n = self.in_size.0 * self.in_size.1;
        let mut seen = vec![false; n];
        for (c, list) in self.members.iter().enumerate() {
            for &i in list {
                let i = i as usize;
                if i >= n || seen[i] || self.owner[i] as usize != c {
                    return false;
                }
                seen[i] = true;
            }
        }
        self.owner.len() == n && seen.into_iter().all(|s| s)
    }
}

#[derive(Clone, Debug)]
pub struct Icp<T> {
    pub d_in: usize,
    pub d_out: usize,
    pub norm: LayerNorm<T>,
    pub proj_f: Linear<T>,
    pub proj_v: Mlp<T>,
}

pub struct IcpCache<T> {
    batch: usize,
    in_size: (usize, usize),
    fec: bool,
    ln: LayerNormCache<T>,
    xn: Vec<T>,
    proj_v: MlpCache<T>,
    pub assignments: Vec<PoolAssignment>,
}

impl<T: Element> Icp<T> {
    /// `proj_depth` is the number of linear layers in `proj_v` (1 to 3).
    pub fn new<R: Rng>(name: &str, d_in: usize, d_out: usize, proj_depth: usize, rng: &mut R) -> Result<Self> {
        if !(1..=3).contains(&proj_depth) {
            return Err(Error::config("icp_depth", format!("must be 1, 2 or 3, got {proj_depth}")));
        }
        let mut widths = vec![d_in];
        widths.extend(std::iter::repeat_n(d_out, proj_depth));
        Ok(Icp {
            d_in,
            d_out,
            norm: LayerNorm::new(&format!("{name}.norm"), d_in),
            proj_f: Linear::new(&format!("{name}.proj_f"), d_in, d_in, true, Init::TruncNormal(INIT_STD), rng),
            proj_v: Mlp::new(
                &format!("{name}.proj_v"),
                &widths,
                Activation::Gelu,
                Init::TruncNormal(INIT_STD),
                rng,
            ),
        })
    }

    fn check(&self, x: &FeatureMap<T>) -> Result<()> {
        if x.channels != self.d_in {
            return Err(Error::Dimension(format!("pooling expects {} channels, got {}", self.d_in, x.channels)));
        }
        if !x.height.is_multiple_of(2) || !x.width.is_multiple_of(2) || x.height == 0 || x.width == 0 {
            return Err(Error::config(
                "input_size",
                format!("cluster pooling needs even extents, got {}×{}", x.height, x.width),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<(FeatureMap<T>, IcpCache<T>)> {
        self.run(x, false)
    }

    /// Membership from the similarity projection, values from the normalized
    /// input features; the projection is outside the differentiable path.
    pub fn forward_fec(&self, x: &FeatureMap<T>) -> Result<(FeatureMap<T>, IcpCache<T>)> {
        self.run(x, true)
    }

    fn run(&self, x: &FeatureMap<T>, fec: bool) -> Result<(FeatureMap<T>, IcpCache<T>)> {
        self.check(x)?;
        let (hh, ww, d) = (x.height, x.width, self.d_in);
        let (oh, ow) = (hh / 2, ww / 2);
        let (n, k) = (hh * ww, oh * ow);
        let (xn, ln) = self.norm.forward(&x.data);
        let s = self.proj_f.forward(&xn, x.rows());
        let values = if fec { &xn } else { &s };
        let mut pooled = Vec::with_capacity(x.batch * k * d);
        let mut assignments = Vec::with_capacity(x.batch);
        for b in 0..x.batch {
            let s_b = &s[b * n * d..(b + 1) * n * d];
            let seeds = ops::adaptive_pool(s_b, hh, ww, d, oh, ow);
            let (ns, _) = ops::l2_normalize_rows(s_b, d, COS_EPS);
            let (nseed, _) = ops::l2_normalize_rows(&seeds, d, COS_EPS);
            let nseed_t = ops::transpose(k, d, &nseed);
            let mut cos = vec![T::zero(); n * k];
            ops::gemm(n, d, k, &ns, &nseed_t, &mut cos);
            let owner: Vec<u32> = cos
                .chunks_exact(k)
                .map(|row| (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best }) as u32)
                .collect();
            let asg = PoolAssignment::from_owner((hh, ww), (oh, ow), owner)?;
            let v_b = &values[b * n * d..(b + 1) * n * d];
            let v_seeds;
            let seed_src = if fec {
                v_seeds = ops::adaptive_pool(v_b, hh, ww, d, oh, ow);
                &v_seeds
            } else {
                &seeds
            };
            for (c, list) in asg.members.iter().enumerate() {
                if list.is_empty() {
                    pooled.extend_from_slice(&seed_src[c * d..(c + 1) * d]);
                } else {
                    let mut acc = vec![T::zero(); d];
                    for &i in list {
                        let i = i as usize;
                        acc.iter_mut().zip(&v_b[i * d..(i + 1) * d]).for_each(|(a, &v)| *a += v);
                    }
                    let inv = T::lit(1.0 / list.len() as f64);
                    pooled.extend(acc.into_iter().map(|v| v * inv));
                }
            }
            assignments.push(asg);
        }
        let (out, proj_v) = self.proj_v.forward(&pooled, x.batch * k);
        Ok((
            FeatureMap::new(x.batch, oh, ow, self.d_out, x.stage + 1, out),
            IcpCache {
                batch: x.batch,
                in_size: (hh, ww),
                fec,
                ln,
                xn,
                proj_v,
                assignments,
            },
        ))
    }

    /// Accumulates parameter gradients and returns `dx`. Membership is
    /// treated as constant.
    pub fn backward(&mut self, cache: &IcpCache<T>, dy: &[T]) -> Vec<T> {
        let (hh, ww) = cache.in_size;
        let (oh, ow) = (hh / 2, ww / 2);
        let (n, k, d) = (hh * ww, oh * ow, self.d_in);
        let dpooled = self.proj_v.backward(&cache.proj_v, dy);
        let mut dvalues = vec![T::zero(); cache.batch * n * d];
        for (b, asg) in cache.assignments.iter().enumerate() {
            let dv_b = &mut dvalues[b * n * d..(b + 1) * n * d];
            let mut dseeds = vec![T::zero(); k * d];
            let mut any_empty = false;
            for (c, list) in asg.members.iter().enumerate() {
                let g = &dpooled[(b * k + c) * d..(b * k + c + 1) * d];
                if list.is_empty() {
                    dseeds[c * d..(c + 1) * d].copy_from_slice(g);
                    any_empty = true;
                } else {
                    let inv = T::lit(1.0 / list.len() as f64);
                    for &i in list {
                        let i = i as usize;
                        dv_b[i * d..(i + 1) * d].iter_mut().zip(g).for_each(|(o, &v)| *o += v * inv);
                    }
                }
            }
            if any_empty {
                let g = ops::adaptive_pool_backward(&dseeds, hh, ww, d, oh, ow);
                dv_b.iter_mut().zip(g).for_each(|(o, v)| *o += v);
            }
        }
        let dxn = if cache.fec {
            dvalues
        } else {
            self.proj_f.backward(&cache.xn, cache.batch * n, &dvalues)
        };
        self.norm.backward(&cache.ln, &dxn)
    }
}

impl<T: Element> Module<T> for Icp<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.norm.visit(f);
        self.proj_f.visit(f);
        self.proj_v.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.norm.visit_mut(f);
        self.proj_f.visit_mut(f);
        self.proj_v.visit_mut(f);
    }
}

pub fn icp_forward<T: Element>(x: &FeatureMap<T>, params: &Icp<T>) -> Result<(FeatureMap<T>, Vec<PoolAssignment>)> {
    let (y, c) = params.forward(x)?;
    Ok((y, c.assignments))
}

pub fn fec_pool_oracle<T: Element>(x: &FeatureMap<T>, params: &Icp<T>) -> Result<FeatureMap<T>> {
    Ok(params.forward_fec(x)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::trunc_normal;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn icp(d_in: usize, d_out: usize, seed: u64) -> Icp<f64> {
        Icp::new("icp", d_in, d_out, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn identity_f(p: &mut Icp<f64>) {
        let d = p.d_in;
        let w = &mut p.proj_f.weight.value;
        w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        for i in 0..d {
            w.set(&[i, i], 1.0);
        }
    }

    #[test]
    fn constant_input_gives_constant_output() {
        let p = icp(3, 4, 1);
        let x = FeatureMap::new(1, 4, 6, 3, 1, [0.3, -0.7, 1.1].repeat(24));
        let (y, c) = p.forward(&x).unwrap();
        assert_eq!((y.height, y.width, y.channels), (2, 3, 4));
        for px in y.data.chunks(4) {
            assert!(px.iter().zip(&y.data[..4]).all(|(a, b)| (a - b).abs() < 1e-12));
        }
        assert!(c.assignments[0].is_partition());
        let mut p = p;
        identity_f(&mut p);
        let (y, _) = p.forward(&x).unwrap();
        let fec = fec_pool_oracle(&x, &p).unwrap();
        assert!(fec.data.iter().zip(&y.data).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn single_cluster_pools_mean() {
        let mut p = icp(3, 3, 2);
        identity_f(&mut p);
        let x: Tensor<f64> = trunc_normal(&mut ChaCha8Rng::seed_from_u64(3), &[1, 2, 2, 3], 1.0);
        let x = FeatureMap::from_tensor(&x, 1).unwrap();
        let (y, c) = p.forward(&x).unwrap();
        assert_eq!(c.assignments[0].owner, vec![0; 4]);
        let (xn, _) = p.norm.forward(&x.data);
        let mean: Vec<f64> = (0..3).map(|k| (0..4).map(|i| xn[i * 3 + k]).sum::<f64>() / 4.0).collect();
        assert_eq!(y.data, p.proj_v.apply(&Tensor::from_vec(&[1, 3], mean).unwrap()).unwrap().into_vec());
    }

    #[test]
    fn quadrant_codes_give_quadrant_partition() {
        let mut p = icp(4, 2, 4);
        identity_f(&mut p);
        let codes = [[4.0, -1.0, -1.0, -2.0], [-1.0, 4.0, -2.0, -1.0], [-1.0, -2.0, 4.0, -1.0], [-2.0, -1.0, -1.0, 4.0]];
        let mut data = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for y in 0..4 {
            for x in 0..4 {
                let noise: Tensor<f64> = trunc_normal(&mut rng, &[4], 0.05);
                let q = (y / 2) * 2 + x / 2;
                data.extend(codes[q].iter().zip(noise.data()).map(|(a, b)| a + b));
            }
        }
        let x = FeatureMap::new(1, 4, 4, 4, 1, data);
        let (_, c) = p.forward(&x).unwrap();
        let want: Vec<u32> = (0..16).map(|i| ((i / 4 / 2) * 2 + (i % 4) / 2) as u32).collect();
        assert_eq!(c.assignments[0].owner, want);
    }

    #[test]
    fn odd_extent_rejected() {
        let p = icp(2, 2, 6);
        let x = FeatureMap::new(1, 3, 4, 2, 1, vec![0.0; 24]);
        assert!(matches!(p.forward(&x), Err(Error::Config { .. })));
    }

    #[test]
    fn proj_depth_options() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for depth in 1..=3 {
            let p = Icp::<f32>::new("icp", 4, 6, depth, &mut rng).unwrap();
            assert_eq!(p.proj_v.layers.len(), depth);
        }
        assert!(Icp::<f32>::new("icp", 4, 6, 4, &mut rng).is_err());
    }
}

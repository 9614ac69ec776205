//! Four-stage pyramid: embedding, clustering stages joined by pooling (or
//! channel projection) transitions, and a classification head.

use std::collections::HashSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, Entry, Payload};
use crate::config::{ModelConfig, TransitionKind};
use crate::error::{Error, Result};
use crate::gfc::{GfcStage, StageCache};
use crate::icp::{Icp, IcpCache, PoolAssignment};
use crate::interpret::{StageTrace, TraceBundle};
use crate::layers::{Init, LayerNorm, Linear, INIT_STD};
use crate::ops::LayerNormCache;
use crate::pfe::{Pfe, PfeCache, IMAGE_CHANNELS};
use crate::tensor::{Element, FeatureMap, Module, Parameter, Tensor};

pub const CONFIG_ENTRY: &str = "__config__";
pub const HASH_ENTRY: &str = "__config_hash__";

/// Channel change without resampling: norm then linear.
#[derive(Clone, Debug)]
pub struct Projection<T> {
    pub norm: LayerNorm<T>,
    pub fc: Linear<T>,
}

#[derive(Clone, Debug)]
pub enum Transition<T> {
    Pool(Icp<T>),
    Project(Projection<T>),
}

enum TransitionCache<T> {
    Pool(IcpCache<T>),
    Project(LayerNormCache<T>, Vec<T>),
}

/// Norm, global average pool, linear.
#[derive(Clone, Debug)]
pub struct Head<T> {
    pub norm: LayerNorm<T>,
    pub fc: Linear<T>,
}

struct HeadCache<T> {
    ln: LayerNormCache<T>,
    pooled: Vec<T>,
    pixels: usize,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub pfe: Pfe<T>,
    pub stages: Vec<GfcStage<T>>,
    /// Entry transitions of stages 2..=4.
    pub transitions: Vec<Transition<T>>,
    pub head: Head<T>,
}

/// Everything the backward pass needs from one forward.
pub struct ModelCache<T> {
    batch: usize,
    pfe: PfeCache<T>,
    stages: Vec<StageCache<T>>,
    transitions: Vec<TransitionCache<T>>,
    head: HeadCache<T>,
    sizes: Vec<(usize, usize)>,
}

impl<T: Element> ModelCache<T> {
    /// Per-sample trace of cluster states and pool partitions.
    pub fn trace(&self, config: &ModelConfig) -> Vec<TraceBundle<T>> {
        let mut bundles: Vec<TraceBundle<T>> = (0..self.batch)
            .map(|_| TraceBundle {
                image_size: config.input_size,
                stages: Vec::with_capacity(self.stages.len()),
            })
            .collect();
        for (k, stage) in self.stages.iter().enumerate() {
            let shared = config.stage_shares(k);
            let kept = if shared { &stage.blocks[..1] } else { &stage.blocks[..] };
            let mut states: Vec<std::vec::IntoIter<_>> =
                kept.iter().map(|c| c.cluster_states().into_iter()).collect();
            let pools: Option<Vec<PoolAssignment>> = match k {
                0 => None,
                _ => Some(match &self.transitions[k - 1] {
                    TransitionCache::Pool(c) => c.assignments.clone(),
                    TransitionCache::Project(..) => vec![PoolAssignment::identity(self.sizes[k]); self.batch],
                }),
            };
            let mut pools = pools.map(|p| p.into_iter());
            for bundle in &mut bundles {
                bundle.stages.push(StageTrace {
                    map_size: self.sizes[k],
                    pool: pools.as_mut().and_then(|p| p.next()),
                    blocks: states.iter_mut().map(|s| s.next().expect("one state per sample")).collect(),
                    shared,
                });
            }
        }
        bundles
    }
}

impl<T: Element> Model<T> {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = config.input_size;
        let st = &config.stages;
        let flags = config.ablation;
        let pfe = Pfe::new("pfe", h, w, st[0].dim, flags.pos_emb, &mut rng)?;
        let grids = config.effective_grids();
        let mut stages = Vec::with_capacity(st.len());
        let mut transitions = Vec::with_capacity(st.len() - 1);
        for (k, s) in st.iter().enumerate() {
            let name = format!("stage{}", k + 1);
            if k > 0 {
                let (d_in, d_out) = (st[k - 1].dim, s.dim);
                transitions.push(match s.transition {
                    TransitionKind::Pool => Transition::Pool(Icp::new(
                        &format!("{name}.pool"),
                        d_in,
                        d_out,
                        config.icp_depth,
                        &mut rng,
                    )?),
                    TransitionKind::Project => Transition::Project(Projection {
                        norm: LayerNorm::new(&format!("{name}.proj.norm"), d_in),
                        fc: Linear::new(&format!("{name}.proj.fc"), d_in, d_out, true, Init::TruncNormal(INIT_STD), &mut rng),
                    }),
                    TransitionKind::Embed => unreachable!("validated"),
                });
            }
            let mut stage_flags = flags;
            stage_flags.shared = config.stage_shares(k);
            stages.push(GfcStage::new(
                &name,
                s.depth,
                s.dim,
                s.dim_prime,
                s.heads,
                grids[k],
                stage_flags,
                &mut rng,
            )?);
        }
        let last = st[st.len() - 1].dim;
        let head = Head {
            norm: LayerNorm::new("head.norm", last),
            fc: Linear::new("head.fc", last, config.num_classes, true, Init::TruncNormal(INIT_STD), &mut rng),
        };
        let model = Model {
            config: config.clone(),
            pfe,
            stages,
            transitions,
            head,
        };
        let mut names = HashSet::new();
        let mut dup = None;
        model.visit(&mut |p| {
            if !names.insert(p.name.clone()) {
                dup = Some(p.name.clone());
            }
        });
        if let Some(d) = dup {
            return Err(Error::Internal(format!("duplicate parameter name {d}")));
        }
        Ok(model)
    }

    pub fn count_params(&self) -> usize {
        self.num_learnable()
    }

    fn check_input(&self, images: &Tensor<T>) -> Result<usize> {
        let (h, w) = self.config.input_size;
        match *images.shape() {
            [b, ih, iw, IMAGE_CHANNELS] if ih == h && iw == w && b > 0 => Ok(b),
            _ => Err(Error::Dimension(format!(
                "expected images [B×{h}×{w}×3], got {:?}",
                images.shape()
            ))),
        }
    }

    fn transition_forward(&self, k: usize, x: &FeatureMap<T>) -> Result<(FeatureMap<T>, TransitionCache<T>)> {
        match &self.transitions[k] {
            Transition::Pool(icp) => {
                let (y, c) = icp.forward(x)?;
                Ok((y, TransitionCache::Pool(c)))
            }
            Transition::Project(p) => {
                let (xn, ln) = p.norm.forward(&x.data);
                let y = p.fc.forward(&xn, x.rows());
                Ok((
                    FeatureMap::new(x.batch, x.height, x.width, p.fc.d_out, x.stage + 1, y),
                    TransitionCache::Project(ln, xn),
                ))
            }
        }
    }

    fn head_forward(&self, x: &FeatureMap<T>) -> (Vec<T>, HeadCache<T>) {
        let d = x.channels;
        let n = x.pixels();
        let (xn, ln) = self.head.norm.forward(&x.data);
        let inv = T::lit(1.0 / n as f64);
        let mut pooled = vec![T::zero(); x.batch * d];
        for b in 0..x.batch {
            let acc = &mut pooled[b * d..(b + 1) * d];
            for px in xn[b * n * d..(b + 1) * n * d].chunks_exact(d) {
                acc.iter_mut().zip(px).for_each(|(a, &v)| *a += v);
            }
            acc.iter_mut().for_each(|a| *a *= inv);
        }
        let logits = self.head.fc.forward(&pooled, x.batch);
        (logits, HeadCache { ln, pooled, pixels: n })
    }

    /// Forward keeping every intermediate needed by [`Model::backward`].
    pub fn forward_cached(&self, images: &Tensor<T>) -> Result<(Tensor<T>, ModelCache<T>)> {
        let batch = self.check_input(images)?;
        let (mut x, pfe) = self.pfe.forward(images.data(), batch);
        let mut stages = Vec::with_capacity(self.stages.len());
        let mut transitions = Vec::with_capacity(self.transitions.len());
        let mut sizes = Vec::with_capacity(self.stages.len());
        for (k, stage) in self.stages.iter().enumerate() {
            if k > 0 {
                let (y, c) = self.transition_forward(k - 1, &x)?;
                transitions.push(c);
                x = y;
            }
            sizes.push((x.height, x.width));
            let (y, c) = stage.forward(&x)?;
            stages.push(c);
            x = y;
        }
        let (logits, head) = self.head_forward(&x);
        let logits = Tensor::from_vec(&[batch, self.config.num_classes], logits)?;
        logits.ensure_finite("logits")?;
        Ok((
            logits,
            ModelCache {
                batch,
                pfe,
                stages,
                transitions,
                head,
                sizes,
            },
        ))
    }

    /// Logits `[B×classes]` and, when asked, one trace per sample.
    pub fn forward(&self, images: &Tensor<T>, capture_trace: bool) -> Result<(Tensor<T>, Option<Vec<TraceBundle<T>>>)> {
        let (logits, cache) = self.forward_cached(images)?;
        let trace = capture_trace.then(|| cache.trace(&self.config));
        Ok((logits, trace))
    }

    /// Embedding, transitions and head with every clustering stage skipped.
    pub fn forward_skeleton(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = self.check_input(images)?;
        let (mut x, _) = self.pfe.forward(images.data(), batch);
        for k in 0..self.transitions.len() {
            x = self.transition_forward(k, &x)?.0;
        }
        let (logits, _) = self.head_forward(&x);
        Tensor::from_vec(&[batch, self.config.num_classes], logits)
    }

    /// Accumulates parameter gradients for `dlogits` and returns the image
    /// gradient.
    pub fn backward(&mut self, cache: &ModelCache<T>, dlogits: &[T]) -> Vec<T> {
        let batch = cache.batch;
        let last = self.stages.len() - 1;
        let d = self.config.stages[last].dim;
        let n = cache.head.pixels;
        let dpooled = self.head.fc.backward(&cache.head.pooled, batch, dlogits);
        let inv = T::lit(1.0 / n as f64);
        let mut dxn = Vec::with_capacity(batch * n * d);
        for b in 0..batch {
            let g: Vec<T> = dpooled[b * d..(b + 1) * d].iter().map(|&v| v * inv).collect();
            for _ in 0..n {
                dxn.extend_from_slice(&g);
            }
        }
        let mut dx = self.head.norm.backward(&cache.head.ln, &dxn);
        for k in (0..self.stages.len()).rev() {
            dx = self.stages[k].backward(&cache.stages[k], &dx);
            if k > 0 {
                dx = match (&mut self.transitions[k - 1], &cache.transitions[k - 1]) {
                    (Transition::Pool(icp), TransitionCache::Pool(c)) => icp.backward(c, &dx),
                    (Transition::Project(p), TransitionCache::Project(ln, xn)) => {
                        let rows = xn.len() / p.fc.d_in;
                        let g = p.fc.backward(xn, rows, &dx);
                        p.norm.backward(ln, &g)
                    }
                    _ => unreachable!("cache built by this model"),
                };
            }
        }
        self.pfe.backward(&cache.pfe, &dx)
    }

    pub fn to_entries(&self) -> Vec<Entry> {
        let text = self.config.to_text();
        let mut entries = vec![
            Entry::text(CONFIG_ENTRY, &text),
            Entry::new(HASH_ENTRY, &[1], Payload::U64(vec![self.config.hash()])).expect("hash entry"),
        ];
        self.visit(&mut |p| entries.push(Entry::tensor(&p.name, &p.value)));
        entries
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write(path, &self.to_entries())
    }

    /// Configuration stored in a checkpoint, verified against its hash.
    pub fn config_of(entries: &[Entry]) -> Result<ModelConfig> {
        let text = checkpoint::find(entries, CONFIG_ENTRY)?.as_text()?;
        let stored = checkpoint::find(entries, HASH_ENTRY)?.as_u64()?;
        let config = ModelConfig::from_text(&text, ModelConfig::preset("micro")?)
            .map_err(|e| Error::Format(format!("stored configuration is invalid: {e}")))?;
        if stored.first() != Some(&config.hash()) {
            return Err(Error::Format("configuration hash does not match its text".into()));
        }
        Ok(config)
    }

    pub fn from_entries(entries: &[Entry]) -> Result<Self> {
        let config = Self::config_of(entries)?;
        let mut model = Self::build(&config, 0).map_err(|e| Error::Format(format!("stored configuration: {e}")))?;
        let mut expected = HashSet::new();
        let mut failure = None;
        model.visit_mut(&mut |p: &mut Parameter<T>| {
            expected.insert(p.name.clone());
            if failure.is_some() {
                return;
            }
            let loaded = checkpoint::find(entries, &p.name).and_then(|e| e.to_tensor::<T>());
            match loaded {
                Ok(t) if t.shape() == p.value.shape() => p.value = t,
                Ok(t) => {
                    failure = Some(Error::Format(format!(
                        "{}: stored shape {:?}, model expects {:?}",
                        p.name,
                        t.shape(),
                        p.value.shape()
                    )))
                }
                Err(e) => failure = Some(e),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if let Some(e) = entries
            .iter()
            .find(|e| !e.name.starts_with("__") && !expected.contains(&e.name))
        {
            return Err(Error::Format(format!("unexpected entry {}", e.name)));
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_entries(&checkpoint::read(path)?)
    }

    /// Load, requiring the stored configuration to equal `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let entries = checkpoint::read(path)?;
        let stored = Self::config_of(&entries)?;
        if stored.hash() != expected.hash() {
            let diff: Vec<String> = stored
                .to_text()
                .lines()
                .zip(expected.to_text().lines())
                .filter(|(a, b)| a != b)
                .map(|(a, b)| format!("{a} (expected {b})"))
                .collect();
            return Err(Error::Format(format!("config mismatch: {}", diff.join(", "))));
        }
        Self::from_entries(&entries)
    }

    /// Parameter by name.
    pub fn param(&self, name: &str) -> Option<Tensor<T>> {
        let mut found = None;
        self.visit(&mut |p| {
            if p.name == name {
                found = Some(p.value.clone());
            }
        });
        found
    }
}

impl<T: Element> Module<T> for Projection<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.norm.visit(f);
        self.fc.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.norm.visit_mut(f);
        self.fc.visit_mut(f);
    }
}

impl<T: Element> Module<T> for Transition<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        match self {
            Transition::Pool(p) => p.visit(f),
            Transition::Project(p) => p.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        match self {
            Transition::Pool(p) => p.visit_mut(f),
            Transition::Project(p) => p.visit_mut(f),
        }
    }
}

impl<T: Element> Module<T> for Head<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.norm.visit(f);
        self.fc.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.norm.visit_mut(f);
        self.fc.visit_mut(f);
    }
}

impl<T: Element> Module<T> for Model<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.pfe.visit(f);
        for (k, stage) in self.stages.iter().enumerate() {
            if k > 0 {
                self.transitions[k - 1].visit(f);
            }
            stage.visit(f);
        }
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.pfe.visit_mut(f);
        for (k, stage) in self.stages.iter_mut().enumerate() {
            if k > 0 {
                self.transitions[k - 1].visit_mut(f);
            }
            stage.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Vec<T>)> {
    let (b, c) = match *logits.shape() {
        [b, c] => (b, c),
        _ => return Err(Error::Dimension(format!("logits must be [B×C], got {:?}", logits.shape()))),
    };
    if labels.len() != b {
        return Err(Error::Dimension(format!("{} labels for batch {b}", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Argument(format!("label {l} outside 0..{c}")));
    }
    let mut probs = logits.data().to_vec();
    crate::ops::softmax_rows(&mut probs, c);
    let inv = T::lit(1.0 / b as f64);
    let mut loss = 0.0;
    for (row, (&l, lg)) in probs.chunks_exact_mut(c).zip(labels.iter().zip(logits.data().chunks_exact(c))) {
        let max = lg.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.f64()));
        let lse = max + lg.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln();
        loss += lse - lg[l].f64();
        row[l] -= T::one();
        row.iter_mut().for_each(|v| *v *= inv);
    }
    let loss = loss / b as f64;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("loss is {loss}")));
    }
    Ok((loss, probs))
}

/// Index of the largest logit per row (ties to the lowest class) and whether
/// the label is among the top `k`.
pub fn top_k_hits<T: Element>(logits: &Tensor<T>, labels: &[usize], k: usize) -> usize {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks_exact(c)
        .zip(labels)
        .filter(|(row, &l)| {
            let v = row[l];
            let better = row
                .iter()
                .enumerate()
                .filter(|&(j, &x)| x > v || (x == v && j < l))
                .count();
            better < k
        })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_examples() {
        let logits = Tensor::from_vec(&[1, 2], vec![0.0f64, 0.0]).unwrap();
        let (loss, g) = cross_entropy(&logits, &[1]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((g[0] - 0.5).abs() < 1e-12 && (g[1] + 0.5).abs() < 1e-12);
        assert!(cross_entropy(&logits, &[2]).is_err());
    }

    #[test]
    fn top_k_counts() {
        let logits = Tensor::from_vec(&[2, 3], vec![0.1f64, 0.5, 0.2, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(top_k_hits(&logits, &[1, 2], 1), 1);
        assert_eq!(top_k_hits(&logits, &[2, 0], 2), 2);
        assert_eq!(top_k_hits(&logits, &[0, 2], 2), 0);
        assert_eq!(top_k_hits(&logits, &[0, 2], 3), 2);
    }

    #[test]
    fn toy_model_shapes() {
        let cfg = ModelConfig::preset("micro-toy").unwrap();
        let m = Model::<f32>::build(&cfg, 1).unwrap();
        let x = Tensor::full(&[2, 16, 16, 3], 0.25f32);
        let (logits, trace) = m.forward(&x, true).unwrap();
        assert_eq!(logits.shape(), &[2, 3]);
        let trace = trace.unwrap();
        assert_eq!(trace.len(), 2);
        assert_eq!(trace[0].stages.len(), 4);
        assert!(trace[0].stages[0].pool.is_none());
        assert!(m.forward(&Tensor::zeros(&[1, 8, 8, 3]), false).is_err());
    }
}

//! Receptive-field tracing, center merging and overlay rendering.
//!
//! Pooling is a hard partition, so every feature point at every stage maps to
//! an exact set of input pixels: its patch footprints composed with the pool
//! member lists.

use std::collections::BTreeSet;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, Entry, Payload};
use crate::config::fnv1a64;
use crate::error::{Error, Result};
use crate::gfc::{Assignment, ClusterState};
use crate::icp::PoolAssignment;
use crate::pfe::PATCH;
use crate::tensor::{Element, Tensor};

/// Original-image pixels as `(row, col)`.
pub type PixelSet = BTreeSet<(usize, usize)>;

pub const KMEANS_MAX_ITERS: usize = 100;

/// Trace of one stage for one image.
#[derive(Clone, Debug)]
pub struct StageTrace<T> {
    pub map_size: (usize, usize),
    /// Partition from the previous stage's map onto this one; `None` for the
    /// first stage.
    pub pool: Option<PoolAssignment>,
    /// One state per block, or a single state when the stage shares its
    /// assignment.
    pub blocks: Vec<ClusterState<T>>,
    pub shared: bool,
}

/// Everything needed to trace one image's clusters back to pixels.
#[derive(Clone, Debug)]
pub struct TraceBundle<T> {
    pub image_size: (usize, usize),
    pub stages: Vec<StageTrace<T>>,
}

impl<T: Element> TraceBundle<T> {
    fn stage(&self, stage: usize) -> Result<&StageTrace<T>> {
        if stage == 0 || stage > self.stages.len() {
            return Err(Error::Argument(format!("stage {stage} outside 1..={}", self.stages.len())));
        }
        Ok(&self.stages[stage - 1])
    }

    fn state(&self, stage: usize, block: usize) -> Result<&ClusterState<T>> {
        let st = self.stage(stage)?;
        st.blocks.get(block).ok_or_else(|| {
            Error::Argument(format!("block {block} outside 0..{} at stage {stage}", st.blocks.len()))
        })
    }

    /// Stage-1 points covered by each point of `stage` (1-based).
    fn stage1_points(&self, stage: usize) -> Result<Vec<Vec<u32>>> {
        let first = self.stage(1)?;
        let mut fields: Vec<Vec<u32>> = (0..(first.map_size.0 * first.map_size.1) as u32).map(|i| vec![i]).collect();
        for k in 2..=stage {
            let pool = self.stage(k)?.pool.as_ref().ok_or_else(|| {
                Error::Format(format!("stage {k} trace has no pool partition"))
            })?;
            if pool.owner.len() != fields.len() {
                return Err(Error::Format(format!(
                    "stage {k} partition covers {} points, previous map has {}",
                    pool.owner.len(),
                    fields.len()
                )));
            }
            fields = pool
                .members
                .iter()
                .map(|ms| {
                    let mut v: Vec<u32> = ms.iter().flat_map(|&m| fields[m as usize].iter().copied()).collect();
                    v.sort_unstable();
                    v
                })
                .collect();
        }
        Ok(fields)
    }

    fn footprint(&self, points: impl IntoIterator<Item = u32>, set: &mut PixelSet) {
        let w1 = self.stages[0].map_size.1;
        for p in points {
            let (py, px) = (p as usize / w1, p as usize % w1);
            for dy in 0..PATCH {
                for dx in 0..PATCH {
                    set.insert((py * PATCH + dy, px * PATCH + dx));
                }
            }
        }
    }
}

/// Input pixels behind `point` (row-major index) of `stage` (1-based).
pub fn receptive_field<T: Element>(trace: &TraceBundle<T>, stage: usize, point: usize) -> Result<PixelSet> {
    let fields = trace.stage1_points(stage)?;
    let pts = fields
        .get(point)
        .ok_or_else(|| Error::Argument(format!("point {point} outside 0..{} at stage {stage}", fields.len())))?;
    let mut set = PixelSet::new();
    trace.footprint(pts.iter().copied(), &mut set);
    Ok(set)
}

/// Receptive fields of every point of `stage`.
pub fn receptive_fields<T: Element>(trace: &TraceBundle<T>, stage: usize) -> Result<Vec<PixelSet>> {
    Ok(trace
        .stage1_points(stage)?
        .into_iter()
        .map(|pts| {
            let mut set = PixelSet::new();
            trace.footprint(pts, &mut set);
            set
        })
        .collect())
}

/// Union of the fields of all points assigned to `cluster` in `head`, using
/// the first stored block of the stage.
pub fn cluster_receptive_field<T: Element>(
    trace: &TraceBundle<T>,
    stage: usize,
    cluster: usize,
    head: usize,
) -> Result<PixelSet> {
    cluster_receptive_field_in(trace, stage, 0, cluster, head)
}

/// As [`cluster_receptive_field`] for a chosen block.
pub fn cluster_receptive_field_in<T: Element>(
    trace: &TraceBundle<T>,
    stage: usize,
    block: usize,
    cluster: usize,
    head: usize,
) -> Result<PixelSet> {
    cluster_fields(trace, stage, block, head)?
        .into_iter()
        .nth(cluster)
        .ok_or_else(|| Error::Argument(format!("cluster {cluster} out of range")))
}

/// Field of every cluster of one head, in one pass.
pub fn cluster_fields<T: Element>(
    trace: &TraceBundle<T>,
    stage: usize,
    block: usize,
    head: usize,
) -> Result<Vec<PixelSet>> {
    let asg = &trace.state(stage, block)?.assignment;
    if head >= asg.heads {
        return Err(Error::Argument(format!("head {head} outside 0..{}", asg.heads)));
    }
    let fields = trace.stage1_points(stage)?;
    if fields.len() != asg.n {
        return Err(Error::Format(format!(
            "assignment covers {} points, stage map has {}",
            asg.n,
            fields.len()
        )));
    }
    let mut out = vec![PixelSet::new(); asg.m];
    for (i, pts) in fields.iter().enumerate() {
        trace.footprint(pts.iter().copied(), &mut out[asg.col(head, i)]);
    }
    Ok(out)
}

/// Group labels per center, relabelled in order of first appearance.
fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut map = Vec::<(usize, usize)>::new();
    labels
        .iter()
        .map(|&l| match map.iter().find(|(from, _)| *from == l) {
            Some(&(_, to)) => to,
            None => {
                map.push((l, map.len()));
                map.len() - 1
            }
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], cents: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in cents.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Labels and the within-group sum of squares after each Lloyd iteration.
pub fn kmeans_trace<T: Element>(centers: &Tensor<T>, k: usize, iters: usize, seed: u64) -> Result<(Vec<usize>, Vec<f64>)> {
    let (m, d) = match *centers.shape() {
        [m, d] => (m, d),
        _ => return Err(Error::Dimension(format!("centers must be [m×d], got {:?}", centers.shape()))),
    };
    if k == 0 || k > m {
        return Err(Error::Argument(format!("cannot merge {m} centers into {k} groups")));
    }
    let pts: Vec<Vec<f64>> = centers.data().chunks_exact(d).map(|r| r.iter().map(|v| v.f64()).collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.gen_range(0..m)];
    while chosen.len() < k {
        let cents: Vec<Vec<f64>> = chosen.iter().map(|&i| pts[i].clone()).collect();
        let dist: Vec<f64> = (0..m)
            .map(|i| if chosen.contains(&i) { 0.0 } else { nearest(&pts[i], &cents).1 })
            .collect();
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &w) in dist.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if r < w {
                        break;
                    }
                    r -= w;
                }
            }
            pick.expect("positive mass")
        } else {
            (0..m).find(|i| !chosen.contains(i)).expect("k ≤ m")
        };
        chosen.push(next);
    }
    let mut cents: Vec<Vec<f64>> = chosen.iter().map(|&i| pts[i].clone()).collect();
    let mut labels: Vec<usize> = pts.iter().map(|p| nearest(p, &cents).0).collect();
    let mut sse = Vec::new();
    for _ in 0..iters.min(KMEANS_MAX_ITERS) {
        for (j, c) in cents.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = pts.iter().zip(&labels).filter(|(_, &l)| l == j).map(|(p, _)| p).collect();
            if !members.is_empty() {
                for (a, v) in c.iter_mut().enumerate() {
                    *v = members.iter().map(|p| p[a]).sum::<f64>() / members.len() as f64;
                }
            }
        }
        let next: Vec<usize> = pts.iter().map(|p| nearest(p, &cents).0).collect();
        sse.push(pts.iter().zip(&next).map(|(p, &l)| sq_dist(p, &cents[l])).sum());
        let done = next == labels;
        labels = next;
        if done {
            break;
        }
    }
    Ok((canonical(&labels), sse))
}

/// Merge `m` centers into `k` groups by Lloyd's k-means on Euclidean distance.
pub fn kmeans_merge<T: Element>(centers: &Tensor<T>, k: usize, iters: usize, seed: u64) -> Result<Vec<usize>> {
    Ok(kmeans_trace(centers, k, iters, seed)?.0)
}

/// 8-bit RGB image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Dimension(format!("{} bytes for a {width}×{height} RGB image", data.len())));
        }
        Ok(RgbImage { width, height, data })
    }

    /// From `[H×W×3]` values in `[0, 1]`.
    pub fn from_unit<T: Element>(height: usize, width: usize, values: &[T]) -> Result<Self> {
        let data = values
            .iter()
            .map(|v| (v.f64().clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Self::new(width, height, data)
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let o = (row * self.width + col) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// FNV-1a hash of the pixel bytes.
    pub fn pixel_hash(&self) -> u64 {
        fnv1a64(&self.data)
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
        let mut w = enc.write_header().map_err(io)?;
        w.write_image_data(&self.data).map_err(io)?;
        w.finish().map_err(io)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverlaySpec {
    pub palette: Vec<[u8; 3]>,
    pub alpha: f64,
    /// Darken pixels on region borders.
    pub outline: bool,
}

impl OverlaySpec {
    pub fn new(colors: usize, alpha: f64, outline: bool) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Argument(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(OverlaySpec {
            palette: palette(colors),
            alpha,
            outline,
        })
    }
}

const BASE_PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [170, 110, 40],
];

/// Fixed distinct colors, extended by golden-angle hues.
pub fn palette(n: usize) -> Vec<[u8; 3]> {
    (0..n)
        .map(|i| match BASE_PALETTE.get(i) {
            Some(&c) => c,
            None => {
                let h = (i as f64 * 0.618_033_988_749_895).fract() * 6.0;
                let x = 1.0 - (h % 2.0 - 1.0).abs();
                let (r, g, b) = match h as usize {
                    0 => (1.0, x, 0.0),
                    1 => (x, 1.0, 0.0),
                    2 => (0.0, 1.0, x),
                    3 => (0.0, x, 1.0),
                    4 => (x, 0.0, 1.0),
                    _ => (1.0, 0.0, x),
                };
                let c = |v: f64| (40.0 + 200.0 * v).round() as u8;
                [c(r), c(g), c(b)]
            }
        })
        .collect()
}

/// Blend each pixel set's palette color over `image`. Pixels in no set keep
/// the source color.
pub fn blend_overlay(image: &RgbImage, sets: &[PixelSet], spec: &OverlaySpec) -> Result<RgbImage> {
    let occupied = sets.iter().filter(|s| !s.is_empty()).count();
    if spec.palette.len() < sets.len() {
        return Err(Error::Argument(format!(
            "palette has {} colors for {} clusters ({occupied} non-empty)",
            spec.palette.len(),
            sets.len()
        )));
    }
    let (w, h) = (image.width, image.height);
    let mut label = vec![usize::MAX; w * h];
    for (l, set) in sets.iter().enumerate() {
        for &(r, c) in set {
            if r >= h || c >= w {
                return Err(Error::Argument(format!("pixel ({r}, {c}) outside {h}×{w}")));
            }
            label[r * w + c] = l;
        }
    }
    let a = spec.alpha;
    let mut out = image.clone();
    for i in 0..w * h {
        let l = label[i];
        if l == usize::MAX {
            continue;
        }
        let (r, c) = (i / w, i % w);
        let border = spec.outline
            && [(r > 0, i.wrapping_sub(w)), (r + 1 < h, i + w), (c > 0, i.wrapping_sub(1)), (c + 1 < w, i + 1)]
                .iter()
                .any(|&(ok, j)| ok && label[j] != l);
        for ch in 0..3 {
            let src = image.data[i * 3 + ch] as f64;
            let v = if border { 0.0 } else { (1.0 - a) * src + a * spec.palette[l][ch] as f64 };
            out.data[i * 3 + ch] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

/// Blend and write `<out>.ppm` (binary P6) and `<out>.png`. Returns the
/// rendered image and the paths written.
pub fn render_overlay(
    image: &RgbImage,
    sets: &[PixelSet],
    spec: &OverlaySpec,
    out: &Path,
) -> Result<(RgbImage, [PathBuf; 2])> {
    let img = blend_overlay(image, sets, spec)?;
    let ppm = out.with_extension("ppm");
    let png = out.with_extension("png");
    img.write_ppm(&ppm)?;
    img.write_png(&png)?;
    Ok((img, [ppm, png]))
}

/// Union cluster fields into merged groups.
pub fn merge_fields(fields: &[PixelSet], labels: &[usize]) -> Vec<PixelSet> {
    let k = labels.iter().copied().max().map_or(0, |l| l + 1);
    let mut out = vec![PixelSet::new(); k];
    for (f, &l) in fields.iter().zip(labels) {
        out[l].extend(f.iter().copied());
    }
    out
}

fn u32_entry(name: String, dims: &[usize], v: Vec<u32>) -> Entry {
    Entry::new(name, dims, Payload::U32(v)).expect("entry shape")
}

fn pair(e: &Entry) -> Result<(usize, usize)> {
    match e.as_u32()? {
        [a, b] => Ok((*a as usize, *b as usize)),
        _ => Err(Error::Format(format!("entry {} must hold two values", e.name))),
    }
}

/// Entries of a trace dump.
pub fn trace_entries<T: Element>(trace: &TraceBundle<T>) -> Vec<Entry> {
    let (h, w) = trace.image_size;
    let mut out = vec![u32_entry("image_size".into(), &[2], vec![h as u32, w as u32])];
    for (k, st) in trace.stages.iter().enumerate() {
        let p = format!("stage{}", k + 1);
        out.push(u32_entry(format!("{p}/size"), &[2], vec![st.map_size.0 as u32, st.map_size.1 as u32]));
        out.push(Entry::new(format!("{p}/shared"), &[1], Payload::U8(vec![st.shared as u8])).expect("flag"));
        if let Some(pool) = &st.pool {
            out.push(u32_entry(format!("{p}/pool/owner"), &[pool.owner.len()], pool.owner.clone()));
        }
        let first = &st.blocks[0];
        out.push(u32_entry(format!("{p}/grid"), &[2], vec![first.grid.0 as u32, first.grid.1 as u32]));
        let (m, dp) = (first.centers_v.shape()[0], first.centers_v.shape()[1]);
        let mut centers = Vec::with_capacity(st.blocks.len() * m * dp);
        for (j, b) in st.blocks.iter().enumerate() {
            let a = &b.assignment;
            let q = format!("{p}/block{j}/assignment");
            out.push(u32_entry(format!("{q}/cols"), &[a.heads, a.n], a.cols.clone()));
            let wt = Tensor::from_vec(&[a.heads, a.n], a.weights.clone()).expect("weights shape");
            out.push(Entry::tensor(format!("{q}/weights"), &wt));
            centers.extend_from_slice(b.centers_v.data());
        }
        let c = Tensor::from_vec(&[st.blocks.len(), m, dp], centers).expect("centers shape");
        out.push(Entry::tensor(format!("{p}/centers"), &c));
    }
    out
}

/// Rebuild a trace from dump entries; attention maps are not stored.
pub fn trace_from_entries<T: Element>(entries: &[Entry]) -> Result<TraceBundle<T>> {
    let image_size = pair(checkpoint::find(entries, "image_size")?)?;
    let mut stages = Vec::new();
    let mut prev: Option<(usize, usize)> = None;
    for k in 1.. {
        let p = format!("stage{k}");
        let Ok(size) = checkpoint::find(entries, &format!("{p}/size")) else { break };
        let map_size = pair(size)?;
        let shared = match &checkpoint::find(entries, &format!("{p}/shared"))?.payload {
            Payload::U8(v) if v.len() == 1 => v[0] != 0,
            _ => return Err(Error::Format(format!("{p}/shared must be one byte"))),
        };
        let pool = match (prev, checkpoint::find(entries, &format!("{p}/pool/owner"))) {
            (Some(in_size), Ok(e)) => Some(PoolAssignment::from_owner(in_size, map_size, e.as_u32()?.to_vec())?),
            (None, _) => None,
            (Some(_), Err(e)) => return Err(e),
        };
        let grid = pair(checkpoint::find(entries, &format!("{p}/grid"))?)?;
        let centers: Tensor<T> = checkpoint::find(entries, &format!("{p}/centers"))?.to_tensor()?;
        let [nb, m, dp] = *centers.shape() else {
            return Err(Error::Format(format!("{p}/centers must be rank 3")));
        };
        if m != grid.0 * grid.1 {
            return Err(Error::Format(format!("{p}: {m} centers for grid {grid:?}")));
        }
        let mut blocks = Vec::with_capacity(nb);
        for j in 0..nb {
            let q = format!("{p}/block{j}/assignment");
            let ce = checkpoint::find(entries, &format!("{q}/cols"))?;
            let [heads, n] = ce.dims[..] else {
                return Err(Error::Format(format!("{q}/cols must be rank 2")));
            };
            let cols = ce.as_u32()?.to_vec();
            if cols.iter().any(|&c| c as usize >= m) {
                return Err(Error::Format(format!("{q}/cols references a missing center")));
            }
            let wt: Tensor<T> = checkpoint::find(entries, &format!("{q}/weights"))?.to_tensor()?;
            if wt.shape() != [heads, n] {
                return Err(Error::Format(format!("{q}/weights shape {:?}", wt.shape())));
            }
            let block_centers = centers.data()[j * m * dp..(j + 1) * m * dp].to_vec();
            blocks.push(ClusterState {
                centers_v: Tensor::from_vec(&[m, dp], block_centers)?,
                soft_sim: None,
                assignment: Assignment {
                    heads,
                    n,
                    m,
                    cols,
                    weights: wt.into_vec(),
                },
                heads,
                grid,
            });
        }
        stages.push(StageTrace {
            map_size,
            pool,
            blocks,
            shared,
        });
        prev = Some(map_size);
    }
    if stages.is_empty() {
        return Err(Error::Format("trace dump holds no stages".into()));
    }
    Ok(TraceBundle { image_size, stages })
}

pub fn save_trace<T: Element>(path: &Path, trace: &TraceBundle<T>) -> Result<()> {
    checkpoint::write(path, &trace_entries(trace))
}

pub fn load_trace<T: Element>(path: &Path) -> Result<TraceBundle<T>> {
    trace_from_entries(&checkpoint::read(path)?)
}

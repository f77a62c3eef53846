//! Procedural dataset: images of colored circles and rectangles on a dark
//! background, with all four targets computed exactly from the drawn
//! geometry. Samples are generated from a seeded stream and round-trip
//! through a binary file byte-for-byte.

use std::io::Write as _;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::shape::Shape4;
use crate::tensor::Tensor4;
use crate::toybench::tasks::TaskKind;

const MAGIC: &[u8] = b"MLORE-TOY v1\n";

/// Distances are divided by this many pixels before clamping to [-1, 1].
pub const DISTANCE_SCALE: f64 = 16.0;

/// Gradient magnitudes below this leave the orientation undefined (0, 0).
pub const NORMAL_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// RGB image, `3*h*w`, values roughly in [0, 1].
    pub image: Vec<f64>,
    /// Class index per pixel, `h*w`.
    pub seg: Vec<u8>,
    /// Boundary indicator per pixel, `h*w`, in {0, 1}.
    pub boundary: Vec<f64>,
    /// Signed normalized distance per pixel, `h*w`, in [-1, 1].
    pub distance: Vec<f64>,
    /// Orientation field, `2*h*w`; unit vectors or (0, 0) where undefined.
    pub normals: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub samples: Vec<Sample>,
}

struct Canvas {
    h: usize,
    w: usize,
    seg: Vec<u8>,
    image: Vec<f64>,
}

impl Canvas {
    fn paint(&mut self, class: u8, color: [f64; 3], mut inside: impl FnMut(usize, usize) -> bool) {
        for y in 0..self.h {
            for x in 0..self.w {
                if inside(y, x) {
                    self.seg[y * self.w + x] = class;
                    for (c, v) in color.iter().enumerate() {
                        self.image[(c * self.h + y) * self.w + x] = *v;
                    }
                }
            }
        }
    }
}

fn class_color(class: u8, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let base = match class {
        1 => [0.8, 0.2, 0.2],
        2 => [0.2, 0.8, 0.2],
        _ => [0.2, 0.2, 0.8],
    };
    let mut out = [0.0; 3];
    for (o, b) in out.iter_mut().zip(base) {
        *o = (b + rng::uniform(rng, -0.15, 0.15)).clamp(0.0, 1.0);
    }
    out
}

fn uniform_int(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    (rng::uniform(rng, lo as f64, (hi + 1) as f64) as usize).min(hi)
}

/// Boundary map: a pixel is boundary when any 4-neighbor carries a
/// different label.
pub fn boundary_from_seg(seg: &[u8], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    let at = |y: usize, x: usize| seg[y * w + x];
    for y in 0..h {
        for x in 0..w {
            let c = at(y, x);
            let differs = (y > 0 && at(y - 1, x) != c)
                || (y + 1 < h && at(y + 1, x) != c)
                || (x > 0 && at(y, x - 1) != c)
                || (x + 1 < w && at(y, x + 1) != c);
            if differs {
                out[y * w + x] = 1.0;
            }
        }
    }
    out
}

/// Exact Euclidean distance to the nearest boundary pixel, negated on
/// background (`seg == 0`), in pixels; zero everywhere when the image has
/// no boundary at all.
pub fn signed_distance(seg: &[u8], boundary: &[f64], h: usize, w: usize) -> Vec<f64> {
    let sites: Vec<(f64, f64)> = (0..h * w)
        .filter(|&i| boundary[i] > 0.5)
        .map(|i| ((i / w) as f64, (i % w) as f64))
        .collect();
    let mut out = vec![0.0; h * w];
    if sites.is_empty() {
        return out;
    }
    for y in 0..h {
        for x in 0..w {
            let mut best = f64::INFINITY;
            for (sy, sx) in &sites {
                let d2 = (y as f64 - sy).powi(2) + (x as f64 - sx).powi(2);
                if d2 < best {
                    best = d2;
                }
            }
            let sign = if seg[y * w + x] > 0 { 1.0 } else { -1.0 };
            out[y * w + x] = sign * best.sqrt();
        }
    }
    out
}

/// Central-difference gradient of the (unnormalized) distance field,
/// scaled to unit length; (0, 0) where the magnitude is below
/// [`NORMAL_EPS`]. Layout is `[dy-plane, dx-plane]`.
pub fn normals_from_distance(dist: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; 2 * h * w];
    let at = |y: usize, x: usize| dist[y * w + x];
    for y in 0..h {
        for x in 0..w {
            let dy = (at((y + 1).min(h - 1), x) - at(y.saturating_sub(1), x))
                / ((y + 1).min(h - 1) - y.saturating_sub(1)).max(1) as f64;
            let dx = (at(y, (x + 1).min(w - 1)) - at(y, x.saturating_sub(1)))
                / ((x + 1).min(w - 1) - x.saturating_sub(1)).max(1) as f64;
            let mag = (dy * dy + dx * dx).sqrt();
            if mag > NORMAL_EPS {
                out[y * w + x] = dy / mag;
                out[h * w + y * w + x] = dx / mag;
            }
        }
    }
    out
}

fn generate_sample(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Sample {
    let mut canvas = Canvas { h, w, seg: vec![0; h * w], image: vec![0.0; 3 * h * w] };
    let bg = [
        rng::uniform(rng, 0.0, 0.25),
        rng::uniform(rng, 0.0, 0.25),
        rng::uniform(rng, 0.0, 0.25),
    ];
    canvas.paint(0, bg, |_, _| true);

    let shapes = uniform_int(rng, 2, 4);
    for _ in 0..shapes {
        let class = uniform_int(rng, 1, 3) as u8;
        let color = class_color(class, rng);
        if rng::uniform(rng, 0.0, 1.0) < 0.5 {
            let margin = 8.min(w / 4).max(1);
            let cy = rng::uniform(rng, margin as f64, (h - margin) as f64);
            let cx = rng::uniform(rng, margin as f64, (w - margin) as f64);
            let r_hi = (w as f64 / 4.0).clamp(4.0, 12.0);
            let r = rng::uniform(rng, 3.0, r_hi);
            canvas.paint(class, color, |y, x| {
                (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r
            });
        } else {
            // Keep the rectangle strictly inside the canvas even on tiny
            // images: side <= dim - 4 leaves a 2-pixel border.
            let side = |dim: usize, rng: &mut ChaCha8Rng| {
                let lo = 6.min(dim.saturating_sub(5)).max(3);
                let hi = (dim / 4).max(7).min(dim.saturating_sub(4)).max(lo);
                uniform_int(rng, lo, hi)
            };
            let sh = side(h, rng);
            let sw = side(w, rng);
            let y0 = uniform_int(rng, 2, h.saturating_sub(sh + 2).max(2));
            let x0 = uniform_int(rng, 2, w.saturating_sub(sw + 2).max(2));
            canvas.paint(class, color, |y, x| y >= y0 && y < y0 + sh && x >= x0 && x < x0 + sw);
        }
    }

    for v in canvas.image.iter_mut() {
        *v = (*v + 0.02 * rng::normal(rng)).clamp(0.0, 1.0);
    }

    let boundary = boundary_from_seg(&canvas.seg, h, w);
    let raw_dist = signed_distance(&canvas.seg, &boundary, h, w);
    let normals = normals_from_distance(&raw_dist, h, w);
    let distance = raw_dist.iter().map(|d| (d / DISTANCE_SCALE).clamp(-1.0, 1.0)).collect();
    Sample { image: canvas.image, seg: canvas.seg, boundary, distance, normals }
}

impl Dataset {
    pub fn generate(count: usize, height: usize, width: usize, seed: u64) -> Dataset {
        let mut rng = rng::substream(seed, "toy-data");
        let samples = (0..count).map(|_| generate_sample(height, width, &mut rng)).collect();
        Dataset { height, width, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks the chosen samples into an input batch `(n, 3, h, w)`.
    pub fn images(&self, idxs: &[usize]) -> Tensor4 {
        let (h, w) = (self.height, self.width);
        let mut data = Vec::with_capacity(idxs.len() * 3 * h * w);
        for &i in idxs {
            data.extend_from_slice(&self.samples[i].image);
        }
        Tensor4::from_vec(Shape4::new(idxs.len(), 3, h, w), data).expect("image batch")
    }

    /// Concatenated per-pixel class labels for the chosen samples.
    pub fn seg_labels(&self, idxs: &[usize]) -> Vec<u8> {
        let mut out = Vec::with_capacity(idxs.len() * self.height * self.width);
        for &i in idxs {
            out.extend_from_slice(&self.samples[i].seg);
        }
        out
    }

    /// Dense regression/classification targets for a non-seg task.
    pub fn targets(&self, idxs: &[usize], kind: TaskKind) -> Tensor4 {
        let (h, w) = (self.height, self.width);
        let channels = match kind {
            TaskKind::Boundary | TaskKind::Distance => 1,
            TaskKind::Normals => 2,
            TaskKind::Seg => panic!("seg targets are label indices; use seg_labels"),
        };
        let mut data = Vec::with_capacity(idxs.len() * channels * h * w);
        for &i in idxs {
            let s = &self.samples[i];
            match kind {
                TaskKind::Boundary => data.extend_from_slice(&s.boundary),
                TaskKind::Distance => data.extend_from_slice(&s.distance),
                TaskKind::Normals => data.extend_from_slice(&s.normals),
                TaskKind::Seg => unreachable!(),
            }
        }
        Tensor4::from_vec(Shape4::new(idxs.len(), channels, h, w), data).expect("target batch")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes: Vec<u8> = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.write_u32::<LittleEndian>(self.samples.len() as u32)?;
        bytes.write_u32::<LittleEndian>(self.height as u32)?;
        bytes.write_u32::<LittleEndian>(self.width as u32)?;
        for s in &self.samples {
            for v in &s.image {
                bytes.write_f32::<LittleEndian>(*v as f32)?;
            }
            bytes.extend_from_slice(&s.seg);
            for v in &s.boundary {
                bytes.push(if *v > 0.5 { 1 } else { 0 });
            }
            for v in &s.distance {
                bytes.write_f32::<LittleEndian>(*v as f32)?;
            }
            for v in &s.normals {
                bytes.write_f32::<LittleEndian>(*v as f32)?;
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let bytes = std::fs::read(path)?;
        let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("missing dataset tag"));
        }
        let mut cursor = &bytes[MAGIC.len()..];
        let count = cursor.read_u32::<LittleEndian>()? as usize;
        let height = cursor.read_u32::<LittleEndian>()? as usize;
        let width = cursor.read_u32::<LittleEndian>()? as usize;
        let hw = height * width;
        let per_sample = 3 * hw * 4 + hw + hw + hw * 4 + 2 * hw * 4;
        if cursor.len() != count * per_sample {
            return Err(bad("dataset payload has the wrong size"));
        }
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let f32s = |n: usize, cursor: &mut &[u8]| -> Result<Vec<f64>> {
                let mut buf = vec![0f32; n];
                cursor.read_f32_into::<LittleEndian>(&mut buf)?;
                Ok(buf.into_iter().map(f64::from).collect())
            };
            let image = f32s(3 * hw, &mut cursor)?;
            let seg = cursor[..hw].to_vec();
            cursor = &cursor[hw..];
            let boundary = cursor[..hw].iter().map(|&b| f64::from(b)).collect();
            cursor = &cursor[hw..];
            let distance = f32s(hw, &mut cursor)?;
            let normals = f32s(2 * hw, &mut cursor)?;
            samples.push(Sample { image, seg, boundary, distance, normals });
        }
        Ok(Dataset { height, width, samples })
    }
}

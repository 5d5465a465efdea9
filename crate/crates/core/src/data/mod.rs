//! Deterministic generator of a domain-shifted few-shot segmentation
//! benchmark: one foreground shape per image on a low-frequency sinusoid
//! background, with parametric per-style color transforms standing in for
//! source/target domains. Train and test class sets are disjoint, so test
//! classes are novel; target styles never appear in training.
//!
//! Layout on disk:
//!
//! ```text
//! <out>/manifest.json
//! <out>/train/<style>/<class>/<sample>.ppm + .pgm
//! <out>/test/<style>/<class>/ep<NNNN>_s<K>.ppm + .pgm, ep<NNNN>_q.ppm + .pgm
//! ```

pub mod pnm;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Episode;
use crate::rng::{derive, seeded, Prng};
use crate::tensor::{Scalar, Tensor};

// ── styles and classes ──────────────────────────────────────────────

/// A parametric rendering style: per-channel gain/bias, gamma, background
/// texture frequency multiplier, and additive pixel noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub style_id: String,
    pub gain: [f64; 3],
    pub bias: [f64; 3],
    pub gamma: f64,
    pub texture_freq: f64,
    pub noise_std: f64,
}

impl DomainStyle {
    pub fn identity(style_id: &str) -> Self {
        DomainStyle {
            style_id: style_id.into(),
            gain: [1.0; 3],
            bias: [0.0; 3],
            gamma: 1.0,
            texture_freq: 1.0,
            noise_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gain.iter().any(|&g| g <= 0.0) {
            return Err(Error::invalid(format!("style {}: gain must be > 0", self.style_id)));
        }
        if !(0.3..=3.0).contains(&self.gamma) {
            return Err(Error::invalid(format!(
                "style {}: gamma {} outside [0.3, 3]",
                self.style_id, self.gamma
            )));
        }
        if self.texture_freq <= 0.0 || self.noise_std < 0.0 {
            return Err(Error::invalid(format!("style {}: bad texture/noise", self.style_id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Bar,
    Ellipse,
    Diamond,
    Star,
    LShape,
    TShape,
    Crescent,
}

impl ShapeKind {
    /// Containment test in the unit frame (shape centered at the origin,
    /// nominal extent 1).
    fn contains(self, x: f64, y: f64) -> bool {
        match self {
            ShapeKind::Circle => x * x + y * y <= 1.0,
            ShapeKind::Square => x.abs() <= 0.82 && y.abs() <= 0.82,
            ShapeKind::Triangle => {
                // Equilateral: base at y = 0.5, apex at (0, -1).
                let t = (y + 1.0) / 1.5;
                y <= 0.5 && y >= -1.0 && x.abs() <= t * 3.0f64.sqrt() / 2.0
            }
            ShapeKind::Cross => {
                (x.abs() <= 1.0 && y.abs() <= 0.36) || (x.abs() <= 0.36 && y.abs() <= 1.0)
            }
            ShapeKind::Ring => {
                let r2 = x * x + y * y;
                (0.45 * 0.45..=1.0).contains(&r2)
            }
            ShapeKind::Bar => x.abs() <= 1.0 && y.abs() <= 0.38,
            ShapeKind::Ellipse => x * x + (y / 0.55) * (y / 0.55) <= 1.0,
            ShapeKind::Diamond => x.abs() + y.abs() <= 1.0,
            ShapeKind::Star => star_contains(x, y),
            ShapeKind::LShape => {
                ((-1.0..=-0.2).contains(&x) && y.abs() <= 1.0)
                    || (x.abs() <= 1.0 && (0.2..=1.0).contains(&y))
            }
            ShapeKind::TShape => {
                (x.abs() <= 1.0 && (0.3..=1.0).contains(&y))
                    || (x.abs() <= 0.33 && (-1.0..=0.3).contains(&y))
            }
            ShapeKind::Crescent => {
                let dx = x - 0.55;
                x * x + y * y <= 1.0 && dx * dx + y * y >= 0.75 * 0.75
            }
        }
    }
}

/// Five-pointed star via crossing test against its 10-vertex outline.
fn star_contains(x: f64, y: f64) -> bool {
    const OUTER: f64 = 1.0;
    const INNER: f64 = 0.45;
    let mut verts = [(0.0f64, 0.0f64); 10];
    for (i, v) in verts.iter_mut().enumerate() {
        let r = if i % 2 == 0 { OUTER } else { INNER };
        let a = std::f64::consts::PI * (i as f64 / 5.0 - 0.5);
        *v = (r * a.cos(), r * a.sin());
    }
    let mut inside = false;
    for i in 0..10 {
        let (x1, y1) = verts[i];
        let (x2, y2) = verts[(i + 1) % 10];
        if (y1 > y) != (y2 > y) {
            let xi = x1 + (y - y1) / (y2 - y1) * (x2 - x1);
            if x < xi {
                inside = !inside;
            }
        }
    }
    inside
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeClass {
    pub class_id: u32,
    pub kind: ShapeKind,
    /// Half-extent of the shape as a fraction of the image side.
    pub size_range: (f64, f64),
    /// Rotation range in radians.
    pub rotation_range: (f64, f64),
}

impl ShapeClass {
    pub fn new(class_id: u32, kind: ShapeKind) -> Self {
        let rotation_range = match kind {
            ShapeKind::Circle | ShapeKind::Ring => (0.0, 0.0),
            _ => (0.0, std::f64::consts::TAU),
        };
        let size_range = match kind {
            // Thin-annulus shapes stay larger so coarse features see them.
            ShapeKind::Ring | ShapeKind::Crescent => (0.24, 0.32),
            _ => (0.19, 0.30),
        };
        ShapeClass { class_id, kind, size_range, rotation_range }
    }
}

// ── manifest ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub image_size: usize,
    pub train_classes: Vec<ShapeClass>,
    pub test_classes: Vec<ShapeClass>,
    pub source_style: DomainStyle,
    pub target_styles: Vec<DomainStyle>,
    pub train_samples_per_class: usize,
    pub test_episodes_per_style: usize,
    /// Supports rendered per test episode; evaluation may use any prefix.
    pub support_count: usize,
    /// Acceptable foreground fraction of a rendered mask.
    pub fg_bounds: (f64, f64),
    /// The mask must keep at least this many cells on the coarse grid that
    /// mirrors the encoder's downsampling (8x8 cells per image).
    pub min_coarse_cells: usize,
    /// Also render test episodes in the source style (in-domain sanity).
    pub include_source_test: bool,
}

impl DatasetManifest {
    /// The default desk-scale benchmark: 64x64 images, 8 train and 4 test
    /// classes, one source style, three target styles of increasing shift,
    /// 2000 training samples and 200 test episodes per style.
    pub fn default_benchmark(seed: u64) -> Self {
        let train_kinds = [
            ShapeKind::Circle,
            ShapeKind::Square,
            ShapeKind::Triangle,
            ShapeKind::Cross,
            ShapeKind::Ring,
            ShapeKind::Bar,
            ShapeKind::Ellipse,
            ShapeKind::Diamond,
        ];
        let test_kinds =
            [ShapeKind::Star, ShapeKind::LShape, ShapeKind::TShape, ShapeKind::Crescent];
        DatasetManifest {
            seed,
            image_size: 64,
            train_classes: train_kinds
                .iter()
                .enumerate()
                .map(|(i, &k)| ShapeClass::new(i as u32, k))
                .collect(),
            test_classes: test_kinds
                .iter()
                .enumerate()
                .map(|(i, &k)| ShapeClass::new(100 + i as u32, k))
                .collect(),
            source_style: DomainStyle::identity("source"),
            target_styles: vec![
                DomainStyle {
                    style_id: "target_a".into(),
                    gain: [1.20, 0.88, 0.95],
                    bias: [0.06, -0.04, 0.02],
                    gamma: 0.82,
                    texture_freq: 1.4,
                    noise_std: 0.02,
                },
                DomainStyle {
                    style_id: "target_b".into(),
                    gain: [0.70, 1.30, 1.12],
                    bias: [-0.08, 0.07, 0.12],
                    gamma: 1.45,
                    texture_freq: 1.9,
                    noise_std: 0.04,
                },
                DomainStyle {
                    style_id: "target_c".into(),
                    gain: [1.65, 0.52, 1.40],
                    bias: [0.14, -0.10, -0.08],
                    gamma: 0.52,
                    texture_freq: 2.6,
                    noise_std: 0.06,
                },
            ],
            train_samples_per_class: 250,
            test_episodes_per_style: 200,
            support_count: 5,
            fg_bounds: (0.02, 0.60),
            min_coarse_cells: 2,
            include_source_test: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::Dataset("image_size must be >= 32".into()));
        }
        if self.train_classes.is_empty() || self.test_classes.is_empty() {
            return Err(Error::Dataset("class lists must be non-empty".into()));
        }
        let train_ids: Vec<u32> = self.train_classes.iter().map(|c| c.class_id).collect();
        for tc in &self.test_classes {
            if train_ids.contains(&tc.class_id) {
                return Err(Error::Dataset(format!(
                    "class id {} appears in both train and test",
                    tc.class_id
                )));
            }
            if self.train_classes.iter().any(|c| c.kind == tc.kind) {
                return Err(Error::Dataset(format!(
                    "shape kind {:?} appears in both train and test",
                    tc.kind
                )));
            }
        }
        self.source_style.validate()?;
        for t in &self.target_styles {
            t.validate()?;
            if t.style_id == self.source_style.style_id {
                return Err(Error::Dataset(format!(
                    "target style `{}` clashes with the source style",
                    t.style_id
                )));
            }
        }
        if self.support_count == 0 {
            return Err(Error::Dataset("support_count must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.fg_bounds.0)
            || self.fg_bounds.0 >= self.fg_bounds.1
            || self.fg_bounds.1 > 1.0
        {
            return Err(Error::Dataset("fg_bounds must satisfy 0 <= lo < hi <= 1".into()));
        }
        Ok(())
    }

    /// Styles that receive a test split, source first when included.
    pub fn test_styles(&self) -> Vec<&DomainStyle> {
        let mut v = Vec::new();
        if self.include_source_test {
            v.push(&self.source_style);
        }
        v.extend(self.target_styles.iter());
        v
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
        }
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io_at(path, e))
    }
}

// ── rendering ───────────────────────────────────────────────────────

/// One rendered image/mask pair (interleaved RGB, mask 0/255).
pub struct RenderedSample {
    pub rgb: Vec<u8>,
    pub mask: Vec<u8>,
    pub fg_fraction: f64,
}

const GEOMETRY_RETRIES: usize = 24;

/// Render one sample. Deterministic per rng state; the mask depends only
/// on the geometry draws, never on the style.
pub fn render_sample(
    class: &ShapeClass,
    style: &DomainStyle,
    size: usize,
    fg_bounds: (f64, f64),
    min_coarse_cells: usize,
    rng: &mut Prng,
) -> Result<RenderedSample> {
    style.validate()?;
    let s = size;
    let mut mask = vec![0u8; s * s];
    let mut fg_fraction = 0.0;
    let mut placed = false;
    for _ in 0..GEOMETRY_RETRIES {
        let half = rng.random_range(class.size_range.0..=class.size_range.1) * s as f64;
        let rot = if class.rotation_range.0 == class.rotation_range.1 {
            class.rotation_range.0
        } else {
            rng.random_range(class.rotation_range.0..class.rotation_range.1)
        };
        let lo = half + 1.0;
        let hi = s as f64 - half - 1.0;
        if lo >= hi {
            continue;
        }
        let cx = rng.random_range(lo..hi);
        let cy = rng.random_range(lo..hi);
        let (sin, cos) = rot.sin_cos();

        mask.fill(0);
        let mut count = 0usize;
        for y in 0..s {
            for x in 0..s {
                let px = (x as f64 + 0.5 - cx) / half;
                let py = (y as f64 + 0.5 - cy) / half;
                // Rotate the sample point into the shape frame.
                let ux = px * cos + py * sin;
                let uy = -px * sin + py * cos;
                if class.kind.contains(ux, uy) {
                    mask[y * s + x] = 255;
                    count += 1;
                }
            }
        }
        fg_fraction = count as f64 / (s * s) as f64;
        if fg_fraction < fg_bounds.0 || fg_fraction > fg_bounds.1 {
            continue;
        }
        if coarse_cells(&mask, s) < min_coarse_cells {
            continue;
        }
        placed = true;
        break;
    }
    if !placed {
        return Err(Error::Dataset(format!(
            "class {}: no acceptable geometry after {GEOMETRY_RETRIES} retries",
            class.class_id
        )));
    }

    // High-chroma foreground on a dim background: at least one bright
    // channel per shape, background intensity kept low so source-domain
    // background features are near-silent and shapes dominate.
    let fg = {
        let pattern = rng.random_range(1..7u8); // 3-bit patterns, not all-low/all-high
        let mut c = [0.0f64; 3];
        for (i, v) in c.iter_mut().enumerate() {
            *v = if pattern & (1 << i) != 0 {
                rng.random_range(0.70..0.95)
            } else {
                rng.random_range(0.05..0.25)
            };
        }
        c
    };
    let bg_base = [
        rng.random_range(0.04..0.12),
        rng.random_range(0.04..0.12),
        rng.random_range(0.04..0.12),
    ];

    // Low-frequency sinusoid mixture background. The style only scales
    // the frequencies; the rng stream is style-independent.
    const WAVES: usize = 3;
    let mut waves = [[(0.0f64, 0.0, 0.0, 0.0); WAVES]; 3];
    for chan in &mut waves {
        for wv in chan.iter_mut() {
            let amp = rng.random_range(0.015..0.045);
            let freq = rng.random_range(1.0..2.5) * style.texture_freq;
            let orient = rng.random_range(0.0..std::f64::consts::PI);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            *wv = (amp, freq, orient, phase);
        }
    }

    // Base render in planar f64, then the style post-transform.
    let mut planes = vec![0.0f64; 3 * s * s];
    for c in 0..3 {
        let plane = &mut planes[c * s * s..(c + 1) * s * s];
        for y in 0..s {
            for x in 0..s {
                let i = y * s + x;
                plane[i] = if mask[i] != 0 {
                    fg[c]
                } else {
                    let mut v = bg_base[c];
                    for &(amp, freq, orient, phase) in &waves[c] {
                        let proj = (x as f64 * orient.cos() + y as f64 * orient.sin()) / s as f64;
                        v += amp * (std::f64::consts::TAU * freq * proj + phase).sin();
                    }
                    v
                };
            }
        }
    }

    let identity_affine = style.gain == [1.0; 3] && style.bias == [0.0; 3];
    for c in 0..3 {
        let plane = &mut planes[c * s * s..(c + 1) * s * s];
        for v in plane.iter_mut() {
            if !identity_affine {
                *v = style.gain[c] * *v + style.bias[c];
            }
            *v = v.clamp(0.0, 1.0);
            if style.gamma != 1.0 {
                *v = v.powf(style.gamma);
            }
        }
    }
    if style.noise_std > 0.0 {
        let normal = rand_distr::Normal::new(0.0, style.noise_std)
            .map_err(|e| Error::invalid(format!("style noise: {e}")))?;
        for v in planes.iter_mut() {
            *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
        }
    }

    // Interleave and quantize.
    let mut rgb = vec![0u8; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            for c in 0..3 {
                let v = planes[c * s * s + y * s + x];
                rgb[(y * s + x) * 3 + c] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(RenderedSample { rgb, mask, fg_fraction })
}

/// Count mask cells that survive nearest downsampling to the 8x8 coarse
/// grid the encoder reduces to.
fn coarse_cells(mask: &[u8], s: usize) -> usize {
    let grid = 8.min(s);
    let mut n = 0;
    for y in 0..grid {
        let sy = y * s / grid;
        for x in 0..grid {
            if mask[sy * s + x * s / grid] != 0 {
                n += 1;
            }
        }
    }
    n
}

// ── benchmark build ─────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct BuildReport {
    pub train_samples: usize,
    pub test_episodes: usize,
    pub styles: Vec<String>,
    pub files: usize,
    /// SHA-256 over the sorted (path, file-hash) list; empty on dry runs.
    pub content_hash: String,
}

const TAG_TRAIN: u64 = 1;
const TAG_TEST: u64 = 2;

/// Generate the dataset under `out_dir`. With `dry_run` only the counts
/// are computed and nothing is written.
pub fn build_benchmark(
    manifest: &DatasetManifest,
    out_dir: impl AsRef<Path>,
    dry_run: bool,
) -> Result<BuildReport> {
    manifest.validate()?;
    let out = out_dir.as_ref();
    let m = manifest;
    let styles: Vec<String> = m.test_styles().iter().map(|s| s.style_id.clone()).collect();
    let train_samples = m.train_classes.len() * m.train_samples_per_class;
    let test_episodes = styles.len() * m.test_episodes_per_style;
    if dry_run {
        return Ok(BuildReport {
            train_samples,
            test_episodes,
            styles,
            files: 2 * (train_samples + test_episodes * (m.support_count + 1)) + 1,
            content_hash: String::new(),
        });
    }

    let mut hashes: BTreeMap<String, [u8; 32]> = BTreeMap::new();
    let mut write = |rel: String, bytes: &[u8]| -> Result<()> {
        let mut h = Sha256::new();
        h.update(bytes);
        hashes.insert(rel.clone(), h.finalize().into());
        pnm::write_file(out.join(rel), bytes)
    };

    // Training pool: source style, train classes.
    for class in &m.train_classes {
        for idx in 0..m.train_samples_per_class {
            let seed = derive(m.seed, &[TAG_TRAIN, class.class_id as u64, idx as u64]);
            let sample = render_sample(
                class,
                &m.source_style,
                m.image_size,
                m.fg_bounds,
                m.min_coarse_cells,
                &mut seeded(seed),
            )?;
            let base =
                format!("train/{}/{:03}/{:05}", m.source_style.style_id, class.class_id, idx);
            write(
                format!("{base}.ppm"),
                &pnm::encode_ppm(m.image_size, m.image_size, &sample.rgb)?,
            )?;
            write(
                format!("{base}.pgm"),
                &pnm::encode_pgm(m.image_size, m.image_size, &sample.mask)?,
            )?;
        }
    }

    // Episodic test sets: novel classes, one directory per style.
    for (style_idx, style) in m.test_styles().iter().enumerate() {
        for ep in 0..m.test_episodes_per_style {
            let class = &m.test_classes[ep % m.test_classes.len()];
            for k in 0..=m.support_count {
                let seed = derive(
                    m.seed,
                    &[TAG_TEST, style_idx as u64, ep as u64, k as u64, class.class_id as u64],
                );
                let sample = render_sample(
                    class,
                    style,
                    m.image_size,
                    m.fg_bounds,
                    m.min_coarse_cells,
                    &mut seeded(seed),
                )?;
                let name = if k < m.support_count {
                    format!("ep{ep:04}_s{k}")
                } else {
                    format!("ep{ep:04}_q")
                };
                let base = format!("test/{}/{:03}/{}", style.style_id, class.class_id, name);
                write(
                    format!("{base}.ppm"),
                    &pnm::encode_ppm(m.image_size, m.image_size, &sample.rgb)?,
                )?;
                write(
                    format!("{base}.pgm"),
                    &pnm::encode_pgm(m.image_size, m.image_size, &sample.mask)?,
                )?;
            }
        }
    }

    m.save(out.join("manifest.json"))?;
    let manifest_bytes = std::fs::read(out.join("manifest.json"))?;
    let mut h = Sha256::new();
    h.update(&manifest_bytes);
    hashes.insert("manifest.json".into(), h.finalize().into());

    let mut acc = Sha256::new();
    for (path, digest) in &hashes {
        acc.update(path.as_bytes());
        acc.update([0u8]);
        acc.update(digest);
    }
    Ok(BuildReport {
        train_samples,
        test_episodes,
        styles,
        files: hashes.len(),
        content_hash: hex(&acc.finalize()),
    })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ── loading ─────────────────────────────────────────────────────────

/// One decoded image/mask pair kept as bytes; converted to tensors on use.
#[derive(Debug, Clone)]
pub struct SampleBytes {
    pub rgb: Vec<u8>,
    pub mask: Vec<u8>,
    pub size: usize,
}

impl SampleBytes {
    fn read(ppm: &Path, pgm: &Path) -> Result<Self> {
        let img = pnm::read_file(ppm)?;
        let msk = pnm::read_file(pgm)?;
        if img.channels != 3 || msk.channels != 1 {
            return Err(Error::Dataset(format!("{}: wrong channel count", ppm.display())));
        }
        if img.width != img.height || img.width != msk.width || msk.width != msk.height {
            return Err(Error::Dataset(format!("{}: image/mask size mismatch", ppm.display())));
        }
        Ok(SampleBytes { rgb: img.data, mask: msk.data, size: img.width })
    }
}

/// Stack interleaved-RGB samples into a `[K,3,S,S]` tensor in [0,1].
pub fn images_to_tensor<T: Scalar>(samples: &[&SampleBytes]) -> Result<Tensor<T>> {
    let k = samples.len();
    let s = samples[0].size;
    let mut data = vec![T::zero(); k * 3 * s * s];
    for (ki, smp) in samples.iter().enumerate() {
        for c in 0..3 {
            let plane = &mut data[(ki * 3 + c) * s * s..(ki * 3 + c + 1) * s * s];
            for (i, slot) in plane.iter_mut().enumerate() {
                *slot = T::from_f64(smp.rgb[i * 3 + c] as f64 / 255.0);
            }
        }
    }
    Tensor::new(vec![k, 3, s, s], data)
}

/// Stack masks into a binary `[K,1,S,S]` tensor (threshold 127).
pub fn masks_to_tensor<T: Scalar>(samples: &[&SampleBytes]) -> Result<Tensor<T>> {
    let k = samples.len();
    let s = samples[0].size;
    let mut data = vec![T::zero(); k * s * s];
    for (ki, smp) in samples.iter().enumerate() {
        for (i, &m) in smp.mask.iter().enumerate() {
            data[ki * s * s + i] = if m > 127 { T::one() } else { T::zero() };
        }
    }
    Tensor::new(vec![k, 1, s, s], data)
}

/// The source-style training pool, loaded once and sampled into episodes.
pub struct TrainPool {
    pub image_size: usize,
    classes: Vec<u32>,
    samples: BTreeMap<u32, Vec<SampleBytes>>,
}

impl TrainPool {
    pub fn load(data_dir: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<Self> {
        let root = data_dir.as_ref().join("train").join(&manifest.source_style.style_id);
        let mut samples = BTreeMap::new();
        for class in &manifest.train_classes {
            let dir = root.join(format!("{:03}", class.class_id));
            let mut items = Vec::new();
            let mut names: Vec<PathBuf> = std::fs::read_dir(&dir)
                .map_err(|e| Error::io_at(&dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
                .collect();
            names.sort();
            for ppm in names {
                let pgm = ppm.with_extension("pgm");
                items.push(SampleBytes::read(&ppm, &pgm)?);
            }
            if items.is_empty() {
                return Err(Error::Dataset(format!("no samples under {}", dir.display())));
            }
            samples.insert(class.class_id, items);
        }
        Ok(TrainPool {
            image_size: manifest.image_size,
            classes: samples.keys().copied().collect(),
            samples,
        })
    }

    pub fn total_samples(&self) -> usize {
        self.samples.values().map(|v| v.len()).sum()
    }

    /// Iterate `(sample_id, [1,3,S,S] tensor)` in class/sample order.
    pub fn iter_images<T: Scalar>(&self) -> impl Iterator<Item = (String, Tensor<T>)> + '_ {
        self.samples.iter().flat_map(|(class, items)| {
            items.iter().enumerate().map(move |(i, s)| {
                let t = images_to_tensor::<T>(&[s]).expect("pool sample is well-formed");
                (format!("{class:03}_{i:05}"), t)
            })
        })
    }

    /// Draw one episode: a uniform class and `shots`+1 distinct samples.
    pub fn sample_episode<T: Scalar>(
        &self,
        shots: usize,
        style_id: &str,
        rng: &mut Prng,
    ) -> Result<Episode<T>> {
        let class_id = self.classes[rng.random_range(0..self.classes.len())];
        let pool = &self.samples[&class_id];
        if pool.len() < shots + 1 {
            return Err(Error::Dataset(format!(
                "class {class_id} has {} samples, episode needs {}",
                pool.len(),
                shots + 1
            )));
        }
        let mut picked: Vec<usize> = Vec::with_capacity(shots + 1);
        while picked.len() < shots + 1 {
            let i = rng.random_range(0..pool.len());
            if !picked.contains(&i) {
                picked.push(i);
            }
        }
        let supports: Vec<&SampleBytes> = picked[..shots].iter().map(|&i| &pool[i]).collect();
        let query = [&pool[picked[shots]]];
        Ok(Episode {
            support_images: images_to_tensor(&supports)?,
            support_masks: masks_to_tensor(&supports)?,
            query_image: images_to_tensor(&query)?,
            query_mask: masks_to_tensor(&query)?,
            class_id,
            style_id: style_id.into(),
            episode_id: String::new(),
        })
    }
}

/// Paths of one on-disk test episode.
#[derive(Debug, Clone)]
pub struct TestEpisodeRef {
    pub episode_id: String,
    pub class_id: u32,
    pub supports: Vec<PathBuf>,
    pub query: PathBuf,
}

/// Enumerate a style's test episodes in episode order.
pub fn list_test_episodes(
    data_dir: impl AsRef<Path>,
    style_id: &str,
) -> Result<Vec<TestEpisodeRef>> {
    let root = data_dir.as_ref().join("test").join(style_id);
    let mut episodes: BTreeMap<String, TestEpisodeRef> = BTreeMap::new();
    let class_dirs = std::fs::read_dir(&root).map_err(|e| Error::io_at(&root, e))?;
    for class_dir in class_dirs {
        let class_dir = class_dir?.path();
        if !class_dir.is_dir() {
            continue;
        }
        let class_id: u32 = class_dir
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| Error::Dataset(format!("bad class dir {}", class_dir.display())))?;
        for entry in std::fs::read_dir(&class_dir).map_err(|e| Error::io_at(&class_dir, e))? {
            let path = entry?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
            if !name.ends_with(".ppm") {
                continue;
            }
            let stem = name.trim_end_matches(".ppm");
            let Some((ep, role)) = stem.split_once('_') else { continue };
            let entry = episodes.entry(ep.to_string()).or_insert_with(|| TestEpisodeRef {
                episode_id: ep.to_string(),
                class_id,
                supports: Vec::new(),
                query: PathBuf::new(),
            });
            if role == "q" {
                entry.query = path;
            } else {
                entry.supports.push(path);
            }
        }
    }
    let mut out: Vec<TestEpisodeRef> = episodes.into_values().collect();
    for ep in &mut out {
        ep.supports.sort();
        if ep.query.as_os_str().is_empty() || ep.supports.is_empty() {
            return Err(Error::Dataset(format!("episode {} is incomplete", ep.episode_id)));
        }
    }
    Ok(out)
}

/// Load a test episode with the first `shots` supports.
pub fn load_test_episode<T: Scalar>(
    ep: &TestEpisodeRef,
    style_id: &str,
    shots: usize,
) -> Result<Episode<T>> {
    if shots == 0 || shots > ep.supports.len() {
        return Err(Error::invalid(format!(
            "requested {shots} shots, episode {} has {} supports",
            ep.episode_id,
            ep.supports.len()
        )));
    }
    let mut supports = Vec::new();
    for ppm in &ep.supports[..shots] {
        supports.push(SampleBytes::read(ppm, &ppm.with_extension("pgm"))?);
    }
    let query = SampleBytes::read(&ep.query, &ep.query.with_extension("pgm"))?;
    let sup_refs: Vec<&SampleBytes> = supports.iter().collect();
    let q_refs = [&query];
    let episode = Episode {
        support_images: images_to_tensor(&sup_refs)?,
        support_masks: masks_to_tensor(&sup_refs)?,
        query_image: images_to_tensor(&q_refs)?,
        query_mask: masks_to_tensor(&q_refs)?,
        class_id: ep.class_id,
        style_id: style_id.into(),
        episode_id: ep.episode_id.clone(),
    };
    episode.validate()?;
    Ok(episode)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_manifest(seed: u64) -> DatasetManifest {
        let mut m = DatasetManifest::default_benchmark(seed);
        m.train_classes.truncate(2);
        m.test_classes.truncate(2);
        m.train_samples_per_class = 4;
        m.test_episodes_per_style = 2;
        m.support_count = 2;
        m.target_styles.truncate(1);
        m
    }

    #[test]
    fn identity_style_matches_unstyled_render_bitwise() {
        let class = ShapeClass::new(0, ShapeKind::Circle);
        let a = render_sample(
            &class,
            &DomainStyle::identity("a"),
            64,
            (0.02, 0.6),
            2,
            &mut seeded(7),
        )
        .unwrap();
        let b = render_sample(
            &class,
            &DomainStyle::identity("b"),
            64,
            (0.02, 0.6),
            2,
            &mut seeded(7),
        )
        .unwrap();
        assert_eq!(a.rgb, b.rgb);
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn styles_never_touch_the_mask() {
        let class = ShapeClass::new(0, ShapeKind::Star);
        let shifted = DomainStyle {
            style_id: "t".into(),
            gain: [1.5, 0.6, 1.2],
            bias: [0.1, -0.05, 0.0],
            gamma: 0.6,
            texture_freq: 2.0,
            noise_std: 0.05,
        };
        let a = render_sample(&class, &DomainStyle::identity("src"), 64, (0.02, 0.6), 2, &mut seeded(11))
            .unwrap();
        let b = render_sample(&class, &shifted, 64, (0.02, 0.6), 2, &mut seeded(11)).unwrap();
        assert_eq!(a.mask, b.mask);
        assert_ne!(a.rgb, b.rgb);
    }

    #[test]
    fn fg_fraction_within_configured_bounds() {
        for (i, kind) in [
            ShapeKind::Circle,
            ShapeKind::Square,
            ShapeKind::Triangle,
            ShapeKind::Cross,
            ShapeKind::Ring,
            ShapeKind::Bar,
            ShapeKind::Ellipse,
            ShapeKind::Diamond,
            ShapeKind::Star,
            ShapeKind::LShape,
            ShapeKind::TShape,
            ShapeKind::Crescent,
        ]
        .iter()
        .enumerate()
        {
            let class = ShapeClass::new(i as u32, *kind);
            for seed in 0..8 {
                let r = render_sample(
                    &class,
                    &DomainStyle::identity("s"),
                    64,
                    (0.02, 0.6),
                    2,
                    &mut seeded(seed),
                )
                .unwrap();
                assert!(
                    r.fg_fraction >= 0.02 && r.fg_fraction <= 0.6,
                    "{kind:?} seed {seed}: fraction {}",
                    r.fg_fraction
                );
            }
        }
    }

    #[test]
    fn same_seed_renders_identical_bytes() {
        let class = ShapeClass::new(3, ShapeKind::Cross);
        let style = &DatasetManifest::default_benchmark(0).target_styles[2];
        let a = render_sample(&class, style, 64, (0.02, 0.6), 2, &mut seeded(42)).unwrap();
        let b = render_sample(&class, style, 64, (0.02, 0.6), 2, &mut seeded(42)).unwrap();
        assert_eq!(a.rgb, b.rgb);
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn manifest_validation_catches_overlaps() {
        let mut m = small_manifest(0);
        assert!(m.validate().is_ok());
        m.test_classes[0].class_id = m.train_classes[0].class_id;
        assert!(m.validate().is_err());

        let mut m = small_manifest(0);
        m.target_styles[0].style_id = "source".into();
        assert!(m.validate().is_err());
    }

    #[test]
    fn default_benchmark_is_valid() {
        DatasetManifest::default_benchmark(0).validate().unwrap();
    }

    #[test]
    fn build_and_reload_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = small_manifest(5);
        let report = build_benchmark(&m, dir.path(), false).unwrap();
        assert_eq!(report.train_samples, 8);
        assert!(!report.content_hash.is_empty());

        let pool = TrainPool::load(dir.path(), &m).unwrap();
        assert_eq!(pool.total_samples(), 8);
        let ep: Episode<f32> = pool.sample_episode(1, "source", &mut seeded(0)).unwrap();
        ep.validate().unwrap();
        assert_eq!(ep.support_images.shape(), &[1, 3, 64, 64]);

        for style in m.test_styles() {
            let eps = list_test_episodes(dir.path(), &style.style_id).unwrap();
            assert_eq!(eps.len(), 2);
            let loaded: Episode<f32> = load_test_episode(&eps[0], &style.style_id, 2).unwrap();
            assert_eq!(loaded.shots(), 2);
            assert!(load_test_episode::<f32>(&eps[0], &style.style_id, 3).is_err());
        }
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let m = small_manifest(9);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let r1 = build_benchmark(&m, d1.path(), false).unwrap();
        let r2 = build_benchmark(&m, d2.path(), false).unwrap();
        assert_eq!(r1.content_hash, r2.content_hash);
    }

    #[test]
    fn dry_run_counts_without_writing() {
        let dir = tempfile::tempdir().unwrap();
        let m = small_manifest(1);
        let report = build_benchmark(&m, dir.path().join("x"), true).unwrap();
        assert_eq!(report.train_samples, 8);
        assert!(report.content_hash.is_empty());
        assert!(!dir.path().join("x").exists());
    }

    #[test]
    fn manifest_roundtrips_through_json() {
        let m = DatasetManifest::default_benchmark(33);
        let text = serde_json::to_string(&m).unwrap();
        let back: DatasetManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(m, back);
    }
}

//! Synthetic multi-camera pedestrian dataset.
//!
//! Every identity owns a prototype drawn on the unit sphere (rejection
//! sampled to keep a minimum angle to all other prototypes). The prototype
//! is rendered as horizontal body bands: each band has a base colour and a
//! left/right asymmetry. A camera adds a shared colour tint, each image gets
//! a small vertical misalignment, a random facing direction (mirror) and
//! pixel noise. Identities are split into a training pool and a held-out
//! pool; the held-out pool yields one query per (identity, camera) and the
//! remaining images form the gallery.
//!
//! The `SCRD` file layout (all little-endian):
//!
//! ```text
//! "SCRD" | version u32 | n_train u32 | n_query u32 | n_gallery u32
//! per sample: identity u32 | camera u16 | H u16 | W u16 | C u16 | H*W*C f32
//! ```

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"SCRD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    /// `[H, W, C]` row-major, values in `[0, 1]`.
    pub pixels: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub camera: u16,
    identity: u32,
}

impl ImageSample {
    pub fn new(
        pixels: Vec<f32>,
        height: usize,
        width: usize,
        channels: usize,
        camera: u16,
        identity: u32,
    ) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(Error::shape(
                "image",
                format!("{} pixels for {height}x{width}x{channels}", pixels.len()),
            ));
        }
        Ok(Self {
            pixels,
            height,
            width,
            channels,
            camera,
            identity,
        })
    }

    /// Ground-truth identity. Only the generator and the evaluator may look
    /// at this; training must stay label-free.
    pub fn hidden_identity(&self) -> u32 {
        self.identity
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<ImageSample>,
    pub query: Vec<ImageSample>,
    pub gallery: Vec<ImageSample>,
}

impl Dataset {
    pub fn train_cameras(&self) -> Vec<u16> {
        self.train.iter().map(|s| s.camera).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_identities: usize,
    pub cameras: usize,
    pub images_per_camera: usize,
    /// Identities moved to the query/gallery pool.
    pub test_identities: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Horizontal body bands per prototype; must divide `height`.
    pub bands: usize,
    /// Amplitude of the identity pattern around mid-grey.
    pub prototype_scale: f64,
    /// Relative strength of the left/right asymmetry within a band.
    pub asymmetry: f64,
    /// Minimum angle between any two prototypes, in degrees.
    pub min_separation_deg: f64,
    /// Norm of each camera's additive colour tint.
    pub camera_tint: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    /// Maximum vertical misalignment in pixel rows.
    pub vertical_jitter: usize,
    /// Probability that a person faces the other way.
    pub mirror_prob: f64,
    /// Pair identities `2k` and `2k + 1` so the second wears the first's
    /// bands in reverse vertical order. Twins differ only in layout, which
    /// global pooling cannot see.
    pub band_twins: bool,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_identities: 50,
            cameras: 6,
            images_per_camera: 4,
            test_identities: 10,
            height: 32,
            width: 16,
            channels: 3,
            bands: 4,
            prototype_scale: 2.0,
            asymmetry: 0.5,
            min_separation_deg: 60.0,
            camera_tint: 0.05,
            noise: 0.1,
            vertical_jitter: 1,
            mirror_prob: 0.5,
            band_twins: true,
            seed: 7,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities == 0 || self.cameras == 0 || self.images_per_camera == 0 {
            return Err(Error::config("identities, cameras and images per camera must be positive"));
        }
        if self.test_identities > self.num_identities {
            return Err(Error::config(format!(
                "cannot hold out {} of {} identities",
                self.test_identities, self.num_identities
            )));
        }
        if self.test_identities > 0 && (self.images_per_camera < 2 || self.cameras < 2) {
            return Err(Error::config(
                "held-out identities need >= 2 cameras and >= 2 images per camera",
            ));
        }
        if self.cameras > u16::MAX as usize + 1 {
            return Err(Error::config("too many cameras for a u16 id"));
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::config("image dimensions must be positive"));
        }
        if self.height > u16::MAX as usize || self.width > u16::MAX as usize {
            return Err(Error::config("image dimensions must fit in u16"));
        }
        if self.bands == 0 || self.height % self.bands != 0 {
            return Err(Error::config(format!(
                "{} bands do not divide image height {}",
                self.bands, self.height
            )));
        }
        let nonneg = [
            self.prototype_scale,
            self.asymmetry,
            self.min_separation_deg,
            self.camera_tint,
            self.noise,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::config("scales, separation and noise must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.mirror_prob) {
            return Err(Error::config("mirror_prob must be in [0, 1]"));
        }
        Ok(())
    }

    fn prototype_dim(&self) -> usize {
        self.bands * self.channels * 2
    }

    pub fn train_identities(&self) -> usize {
        self.num_identities - self.test_identities
    }

    pub fn train_len(&self) -> usize {
        self.train_identities() * self.cameras * self.images_per_camera
    }
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic per-purpose RNG.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

fn unit_gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let norm = crate::tensor::norm(&v);
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn reverse_bands(proto: &[f64], bands: usize) -> Vec<f64> {
    let w = proto.len() / bands;
    proto.chunks(w).rev().flatten().copied().collect()
}

/// Generator state shared by all images: prototypes and camera tints.
#[derive(Clone, Debug)]
pub struct Generator {
    spec: DatasetSpec,
    prototypes: Vec<Vec<f64>>,
    tints: Vec<Vec<f64>>,
}

impl Generator {
    pub fn new(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = stream_rng(spec.seed, 0);
        let dim = spec.prototype_dim();
        let cos_max = spec.min_separation_deg.to_radians().cos();
        let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(spec.num_identities);
        let max_attempts = 10_000 * spec.num_identities.max(1);
        let mut attempts = 0;
        while prototypes.len() < spec.num_identities {
            attempts += 1;
            if attempts > max_attempts {
                return Err(Error::config(format!(
                    "could not place {} prototypes {} degrees apart in {dim} dimensions",
                    spec.num_identities, spec.min_separation_deg
                )));
            }
            let mut cands = vec![unit_gaussian(&mut rng, dim)];
            if spec.band_twins && prototypes.len() + 1 < spec.num_identities {
                cands.push(reverse_bands(&cands[0], spec.bands));
            }
            let fits = |c: &Vec<f64>, others: &[Vec<f64>]| {
                others.iter().all(|p| crate::tensor::dot(p, c) <= cos_max)
            };
            if cands.iter().all(|c| fits(c, &prototypes)) && (cands.len() == 1 || fits(&cands[1], &cands[..1])) {
                prototypes.extend(cands);
            }
        }
        let tints = (0..spec.cameras)
            .map(|_| {
                unit_gaussian(&mut rng, spec.channels)
                    .into_iter()
                    .map(|v| v * spec.camera_tint)
                    .collect()
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            prototypes,
            tints,
        })
    }

    pub fn prototype(&self, identity: usize) -> &[f64] {
        &self.prototypes[identity]
    }

    /// Renders one image. `shift` moves the pattern down by that many rows
    /// (negative moves it up); `noise` draws pixel noise from `rng`.
    pub fn render(
        &self,
        identity: usize,
        camera: usize,
        shift: isize,
        mirrored: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Vec<f32> {
        let s = &self.spec;
        let proto = &self.prototypes[identity];
        let tint = &self.tints[camera];
        let band_h = s.height / s.bands;
        let half = (s.width as f64 - 1.0) / 2.0;
        let mut rng = rng;
        let mut out = Vec::with_capacity(s.height * s.width * s.channels);
        for y in 0..s.height {
            let src = (y as isize - shift).clamp(0, s.height as isize - 1) as usize;
            let band = src / band_h;
            for x in 0..s.width {
                let mut side = (x as f64 - half) / half.max(1.0);
                if mirrored {
                    side = -side;
                }
                for c in 0..s.channels {
                    let base = proto[(band * s.channels + c) * 2];
                    let asym = proto[(band * s.channels + c) * 2 + 1];
                    let mut v = 0.5
                        + s.prototype_scale * (base + s.asymmetry * asym * side)
                        + tint[c];
                    if let Some(r) = rng.as_deref_mut() {
                        if s.noise > 0.0 {
                            v += s.noise * r.sample::<f64, _>(StandardNormal);
                        }
                    }
                    out.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        out
    }

    fn sample(&self, identity: usize, camera: usize, rng: &mut ChaCha8Rng) -> Result<ImageSample> {
        let s = &self.spec;
        let j = s.vertical_jitter as i64;
        let shift = if j > 0 { rng.random_range(-j..=j) as isize } else { 0 };
        let mirrored = rng.random::<f64>() < s.mirror_prob;
        let pixels = self.render(identity, camera, shift, mirrored, Some(rng));
        ImageSample::new(
            pixels,
            s.height,
            s.width,
            s.channels,
            camera as u16,
            identity as u32,
        )
    }
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let gen = Generator::new(spec)?;
    let mut ds = Dataset::default();
    let n_train_ids = spec.train_identities();
    for id in 0..spec.num_identities {
        let mut rng = stream_rng(spec.seed, 1 + id as u64);
        for cam in 0..spec.cameras {
            for k in 0..spec.images_per_camera {
                let img = gen.sample(id, cam, &mut rng)?;
                if id < n_train_ids {
                    ds.train.push(img);
                } else if k == 0 {
                    ds.query.push(img);
                } else {
                    ds.gallery.push(img);
                }
            }
        }
    }
    Ok(ds)
}

pub fn flip_horizontal(pixels: &[f32], height: usize, width: usize, channels: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(pixels.len());
    for y in 0..height {
        for x in (0..width).rev() {
            let start = (y * width + x) * channels;
            out.extend_from_slice(&pixels[start..start + channels]);
        }
    }
    out
}

/// Mirrors the image along its width with probability `p`.
pub fn augment_flip<R: Rng>(sample: &ImageSample, p: f64, rng: &mut R) -> ImageSample {
    let mut out = sample.clone();
    if p > 0.0 && rng.random::<f64>() < p {
        out.pixels = flip_horizontal(&sample.pixels, sample.height, sample.width, sample.channels);
    }
    out
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(&mut buf, ds)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn write_dataset<W: Write>(w: &mut W, ds: &Dataset) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    for split in [&ds.train, &ds.query, &ds.gallery] {
        let n = u32::try_from(split.len()).map_err(|_| Error::config("split too large"))?;
        w.write_all(&n.to_le_bytes())?;
    }
    for s in ds.train.iter().chain(&ds.query).chain(&ds.gallery) {
        w.write_all(&s.identity.to_le_bytes())?;
        w.write_all(&s.camera.to_le_bytes())?;
        for dim in [s.height, s.width, s.channels] {
            let d = u16::try_from(dim).map_err(|_| Error::config("image dimension exceeds u16"))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for p in &s.pixels {
            w.write_all(&p.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Little-endian reader that reports byte offsets in its errors.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.offset(),
            message: message.into(),
        }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    read_dataset(&bytes)
}

pub fn read_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.take(4, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected \"SCRD\""),
        });
    }
    let version = cur.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let counts = [cur.u32("train count")?, cur.u32("query count")?, cur.u32("gallery count")?];
    let mut ds = Dataset::default();
    for (split, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let identity = cur.u32("identity")?;
            let camera = cur.u16("camera")?;
            let h = cur.u16("height")? as usize;
            let w = cur.u16("width")? as usize;
            let c = cur.u16("channels")? as usize;
            let raw = cur.take(h * w * c * 4, "pixels")?;
            let pixels = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let s = ImageSample::new(pixels, h, w, c, camera, identity)?;
            match split {
                0 => ds.train.push(s),
                1 => ds.query.push(s),
                _ => ds.gallery.push(s),
            }
        }
    }
    if !cur.is_done() {
        return Err(cur.fail("trailing bytes after last sample"));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            num_identities: 6,
            cameras: 3,
            images_per_camera: 3,
            test_identities: 2,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn counts_before_holdout() {
        let spec = DatasetSpec {
            test_identities: 0,
            ..DatasetSpec::default()
        };
        let ds = generate_dataset(&spec).unwrap();
        assert_eq!(ds.train.len(), 50 * 6 * 4);
        assert!(ds.query.is_empty() && ds.gallery.is_empty());

        let ds = generate_dataset(&DatasetSpec::default()).unwrap();
        assert_eq!(ds.train.len(), 40 * 6 * 4);
        assert_eq!(ds.query.len(), 10 * 6);
        assert_eq!(ds.gallery.len(), 10 * 6 * 3);
    }

    #[test]
    fn deterministic_for_seed() {
        let a = generate_dataset(&small_spec()).unwrap();
        let b = generate_dataset(&small_spec()).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&DatasetSpec {
            seed: 99,
            ..small_spec()
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_pairs_are_identical() {
        let spec = DatasetSpec {
            noise: 0.0,
            vertical_jitter: 0,
            mirror_prob: 0.0,
            ..small_spec()
        };
        let ds = generate_dataset(&spec).unwrap();
        let per = spec.images_per_camera;
        for chunk in ds.train.chunks(per) {
            assert!(chunk.iter().all(|s| s.pixels == chunk[0].pixels));
        }
    }

    #[test]
    fn pixels_in_unit_range_and_cameras_valid() {
        let spec = small_spec();
        let ds = generate_dataset(&spec).unwrap();
        for s in ds.train.iter().chain(&ds.query).chain(&ds.gallery) {
            assert!(s.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
            assert!((s.camera as usize) < spec.cameras);
        }
    }

    #[test]
    fn flip_properties() {
        let ds = generate_dataset(&small_spec()).unwrap();
        let s = &ds.train[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment_flip(s, 0.0, &mut rng), *s);
        let once = augment_flip(s, 1.0, &mut rng);
        assert_ne!(once.pixels, s.pixels);
        assert_eq!(augment_flip(&once, 1.0, &mut rng), *s);
        assert_eq!(once.camera, s.camera);
        assert_eq!(once.hidden_identity(), s.hidden_identity());
        let row = s.width * s.channels;
        for y in 0..s.height {
            let a: f32 = s.pixels[y * row..(y + 1) * row].iter().sum();
            let b: f32 = once.pixels[y * row..(y + 1) * row].iter().sum();
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn twins_share_colours_not_layout() {
        let spec = DatasetSpec {
            noise: 0.0,
            vertical_jitter: 0,
            mirror_prob: 0.0,
            camera_tint: 0.0,
            ..small_spec()
        };
        let gen = Generator::new(&spec).unwrap();
        let (a, b) = (gen.render(0, 0, 0, false, None), gen.render(1, 0, 0, false, None));
        assert_ne!(a, b);
        let row = spec.width * spec.channels;
        let band = spec.height / spec.bands * row;
        let rev: Vec<f32> = a.chunks(band).rev().flatten().copied().collect();
        assert_eq!(rev, b);
        let untwinned = Generator::new(&DatasetSpec { band_twins: false, ..spec.clone() }).unwrap();
        assert_ne!(untwinned.render(1, 0, 0, false, None), b);
    }

    #[test]
    fn nearest_prototype_is_always_right() {
        // Templates cover every pose the generator can draw, so the only
        // difference left is noise.
        let spec = DatasetSpec::default();
        let gen = Generator::new(&spec).unwrap();
        let ds = generate_dataset(&spec).unwrap();
        let j = spec.vertical_jitter as isize;
        for s in ds.train.iter().chain(&ds.query).chain(&ds.gallery) {
            let cam = s.camera as usize;
            let mut best = (f64::INFINITY, u32::MAX);
            for id in 0..spec.num_identities {
                for shift in -j..=j {
                    for mirrored in [false, true] {
                        let t = gen.render(id, cam, shift, mirrored, None);
                        let d: f64 = t.iter().zip(&s.pixels).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
                        if d < best.0 {
                            best = (d, id as u32);
                        }
                    }
                }
            }
            assert_eq!(best.1, s.hidden_identity());
        }
    }

    #[test]
    fn infeasible_separation_is_rejected() {
        let spec = DatasetSpec {
            num_identities: 200,
            bands: 1,
            channels: 1,
            height: 4,
            min_separation_deg: 170.0,
            ..DatasetSpec::default()
        };
        assert!(matches!(generate_dataset(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn round_trip_and_format_errors() {
        let ds = generate_dataset(&small_spec()).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds).unwrap();
        assert_eq!(&buf[..4], b"SCRD");
        assert_eq!(read_dataset(&buf).unwrap(), ds);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_dataset(&bad), Err(Error::Format { offset: 0, .. })));

        let truncated = &buf[..buf.len() - 3];
        let err = read_dataset(truncated).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        assert!(err.to_string().contains("offset"));

        let mut empty = Vec::new();
        write_dataset(&mut empty, &Dataset::default()).unwrap();
        assert_eq!(empty.len(), 20);
        assert_eq!(read_dataset(&empty).unwrap(), Dataset::default());
    }
}

//! Synthetic face data: a deterministic procedural renderer over explicit
//! identity/attribute factors, dataset assembly with disjoint identities per
//! split, and 8-bit RGB PNG interchange.
//!
//! Identity factors describe who the face is (geometry and skin tone);
//! attribute factors describe everything swappable around it (hair and
//! background colors, lighting, expression). The factor split is what lets
//! the surrogate swap network be trained with known ground truth.

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Inclusive sampling ranges for the eight identity factors, in field order:
/// face_rx, face_ry, eye_dx, eye_y, eye_r, nose_len, mouth_w, skin.
/// Geometry values are fractions of the image side.
pub const IDENTITY_RANGES: [(f64, f64); 8] = [
    (0.26, 0.36), // face_rx: horizontal face half-axis
    (0.32, 0.42), // face_ry: vertical face half-axis
    (0.09, 0.15), // eye_dx: eye offset from the center line
    (0.38, 0.46), // eye_y: eye row
    (0.025, 0.045), // eye_r: eye radius
    (0.08, 0.16), // nose_len: nose length
    (0.08, 0.16), // mouth_w: mouth half-width
    (0.0, 1.0),   // skin: light-to-dark skin tone blend
];

/// Inclusive sampling ranges for the six attribute factors, in field order:
/// hair_color, bg_color, light_gain, expression, bg_grad, hair_len.
pub const ATTRIBUTE_RANGES: [(f64, f64); 6] = [
    (0.0, 1.0),   // hair_color: dark-to-copper hair blend
    (0.0, 1.0),   // bg_color: cool-to-warm background blend
    (0.85, 1.15), // light_gain: global lighting multiplier
    (-1.0, 1.0),  // expression: mouth curvature (negative = frown)
    (0.0, 0.3),   // bg_grad: vertical background shading strength
    (0.04, 0.12), // hair_len: hair band thickness
];

/// Who the face is: geometry and skin tone, order matching
/// [`IDENTITY_RANGES`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityFactors(pub [f64; 8]);

/// Swappable context: colors, lighting, expression, order matching
/// [`ATTRIBUTE_RANGES`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeFactors(pub [f64; 6]);

fn sample_in(ranges: &[(f64, f64)], rng: &mut impl rand_core::RngCore) -> Vec<f64> {
    ranges
        .iter()
        .map(|(lo, hi)| rng::uniform(rng, *lo, *hi))
        .collect()
}

fn normalize(values: &[f64], ranges: &[(f64, f64)]) -> Vec<f64> {
    values
        .iter()
        .zip(ranges)
        .map(|(v, (lo, hi))| (v - lo) / (hi - lo))
        .collect()
}

impl IdentityFactors {
    pub fn sample(rng: &mut impl rand_core::RngCore) -> Self {
        let v = sample_in(&IDENTITY_RANGES, rng);
        IdentityFactors(v.try_into().expect("eight identity factors"))
    }

    /// Factors mapped to [0, 1] by their ranges (regression targets).
    pub fn normalized(&self) -> [f64; 8] {
        normalize(&self.0, &IDENTITY_RANGES)
            .try_into()
            .expect("eight identity factors")
    }

    fn face_rx(&self) -> f64 {
        self.0[0]
    }
    fn face_ry(&self) -> f64 {
        self.0[1]
    }
    fn eye_dx(&self) -> f64 {
        self.0[2]
    }
    fn eye_y(&self) -> f64 {
        self.0[3]
    }
    fn eye_r(&self) -> f64 {
        self.0[4]
    }
    fn nose_len(&self) -> f64 {
        self.0[5]
    }
    fn mouth_w(&self) -> f64 {
        self.0[6]
    }
    fn skin(&self) -> f64 {
        self.0[7]
    }
}

impl AttributeFactors {
    pub fn sample(rng: &mut impl rand_core::RngCore) -> Self {
        let v = sample_in(&ATTRIBUTE_RANGES, rng);
        AttributeFactors(v.try_into().expect("six attribute factors"))
    }

    /// Factors mapped to [0, 1] by their ranges (regression targets).
    pub fn normalized(&self) -> [f64; 6] {
        normalize(&self.0, &ATTRIBUTE_RANGES)
            .try_into()
            .expect("six attribute factors")
    }

    fn hair_color(&self) -> f64 {
        self.0[0]
    }
    fn bg_color(&self) -> f64 {
        self.0[1]
    }
    fn light_gain(&self) -> f64 {
        self.0[2]
    }
    fn expression(&self) -> f64 {
        self.0[3]
    }
    fn bg_grad(&self) -> f64 {
        self.0[4]
    }
    fn hair_len(&self) -> f64 {
        self.0[5]
    }
}

/// Complete recipe for one face image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceSpec {
    pub identity: IdentityFactors,
    pub attributes: AttributeFactors,
    pub seed: u64,
}

impl FaceSpec {
    /// Spec with identity and attribute factors drawn from independent
    /// streams of `seed`, so either part can be regenerated alone.
    pub fn from_seed(seed: u64, index: u64) -> Self {
        FaceSpec {
            identity: IdentityFactors::sample(&mut rng::stream(seed, "identity", index)),
            attributes: AttributeFactors::sample(&mut rng::stream(seed, "attribute", index)),
            seed: seed ^ index.rotate_left(17),
        }
    }

    /// The same face rendered into another context.
    pub fn with_attributes(&self, attributes: AttributeFactors) -> Self {
        FaceSpec {
            attributes,
            ..*self
        }
    }
}

/// Planar RGB image, channel-major (all of R, then G, then B), values in
/// [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// 1×3×H×W tensor in the networks' [−1, 1] range.
    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        let data: Vec<S> = self.data.iter().map(|v| S::lit(v * 2.0 - 1.0)).collect();
        Tensor::from_vec(&[1, 3, self.height, self.width], data).expect("image tensor")
    }

    /// Image `index` of an N×3×H×W batch in [−1, 1], back to [0, 1] pixels.
    pub fn from_tensor<S: Scalar>(t: &Tensor<S>, index: usize) -> Result<Self> {
        let dims = t.shape().to_vec();
        if dims.len() != 4 || dims[1] != 3 {
            return Err(Error::shape(
                "from_tensor",
                format!("expected N×3×H×W, got {dims:?}"),
            ));
        }
        if index >= dims[0] {
            return Err(Error::invalid(format!(
                "image index {index} out of range for batch of {}",
                dims[0]
            )));
        }
        let (h, w) = (dims[2], dims[3]);
        let per = 3 * h * w;
        let data = t.with_data(|d| {
            d[index * per..(index + 1) * per]
                .iter()
                .map(|v| ((v.to_f64x() + 1.0) / 2.0).clamp(0.0, 1.0))
                .collect::<Vec<f64>>()
        });
        Ok(Image {
            width: w,
            height: h,
            data,
        })
    }
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// 0→1 ramp over [-feather, +feather] around zero; the anti-aliasing edge.
fn coverage(signed_dist: f64, feather: f64) -> f64 {
    let t = (signed_dist / feather + 1.0) / 2.0;
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Approximate signed distance (pixels) from point to an ellipse boundary;
/// positive inside.
fn ellipse_dist(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let q = ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2);
    (1.0 - q.sqrt()) * rx.min(ry)
}

fn disk_dist(x: f64, y: f64, cx: f64, cy: f64, r: f64) -> f64 {
    r - ((x - cx).powi(2) + (y - cy).powi(2)).sqrt()
}

struct Layer {
    color: [f64; 3],
    alpha: f64,
}

/// Hair coverage in [0, 1] at a pixel: a band hugging the upper half of the
/// face ellipse, controlled by identity geometry and the hair_len attribute
/// but never by hair_color. Exposed so tests can bound where a hair-color
/// change may show up.
pub fn hair_coverage(spec: &FaceSpec, resolution: usize, x: usize, y: usize) -> f64 {
    let res = resolution as f64;
    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
    let id = &spec.identity;
    let (cx, cy) = (0.5 * res, 0.52 * res);
    let (rx, ry) = (id.face_rx() * res, id.face_ry() * res);
    let band = spec.attributes.hair_len() * res;
    let feather = 0.75;
    let outer = coverage(
        ellipse_dist(px, py, cx, cy, rx + band, ry + band),
        feather,
    );
    let inner = coverage(ellipse_dist(px, py, cx, cy, rx, ry), feather);
    // Band between the two ellipses, fading out below the face midline.
    let upper = coverage(cy - py, 2.0 * feather);
    (outer * (1.0 - inner) * upper).clamp(0.0, 1.0)
}

/// Deterministic anti-aliased raster of the face described by `spec`:
/// background, hair band, face ellipse, eyes, nose, mouth, then a global
/// lighting gain. All compositing stays in [0, 1].
pub fn render_face(spec: &FaceSpec, resolution: usize) -> Result<Image> {
    if resolution < 32 || resolution > 1024 || resolution % 2 != 0 {
        return Err(Error::invalid(format!(
            "resolution must be even and within [32, 1024], got {resolution}"
        )));
    }
    let res = resolution as f64;
    let id = &spec.identity;
    let at = &spec.attributes;

    let bg_a = [0.42, 0.52, 0.68];
    let bg_b = [0.78, 0.66, 0.52];
    let bg = lerp3(bg_a, bg_b, at.bg_color());
    let hair = lerp3([0.12, 0.09, 0.07], [0.55, 0.32, 0.16], at.hair_color());
    let skin = lerp3([0.95, 0.82, 0.70], [0.48, 0.33, 0.22], id.skin());
    let feature = [0.10, 0.08, 0.07];
    let nose_c = [skin[0] * 0.82, skin[1] * 0.78, skin[2] * 0.76];
    let mouth_c = [0.62, 0.26, 0.28];

    let (cx, cy) = (0.5 * res, 0.52 * res);
    let (rx, ry) = (id.face_rx() * res, id.face_ry() * res);
    let eye_y = id.eye_y() * res;
    let eye_dx = id.eye_dx() * res;
    let eye_r = id.eye_r() * res;
    let nose_top = eye_y + 0.05 * res;
    let nose_bot = nose_top + id.nose_len() * res;
    let nose_hw = 0.012 * res;
    let mouth_y = nose_bot + 0.07 * res;
    let mouth_hw = id.mouth_w() * res;
    let mouth_ht = 0.016 * res;
    let feather = 0.75;

    let mut img = Image::new(resolution, resolution);
    for y in 0..resolution {
        for x in 0..resolution {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);

            let shade = 1.0 - at.bg_grad() * (py / res);
            let mut rgb = [bg[0] * shade, bg[1] * shade, bg[2] * shade];

            let mut layers: Vec<Layer> = Vec::with_capacity(6);
            layers.push(Layer {
                color: hair,
                alpha: hair_coverage(spec, resolution, x, y),
            });
            layers.push(Layer {
                color: skin,
                alpha: coverage(ellipse_dist(px, py, cx, cy, rx, ry), feather),
            });
            for side in [-1.0, 1.0] {
                layers.push(Layer {
                    color: feature,
                    alpha: coverage(
                        disk_dist(px, py, cx + side * eye_dx, eye_y, eye_r),
                        feather,
                    ),
                });
            }
            // Nose: vertical bar from nose_top to nose_bot.
            let ny = py.clamp(nose_top, nose_bot);
            let nose_d = nose_hw - ((px - cx).powi(2) + (py - ny).powi(2)).sqrt();
            layers.push(Layer {
                color: nose_c,
                alpha: coverage(nose_d, feather),
            });
            // Mouth: quadratic curve, corners rising with positive expression.
            if (px - cx).abs() <= mouth_hw + 2.0 {
                let t = ((px - cx) / mouth_hw).clamp(-1.0, 1.0);
                let curve_y = mouth_y - at.expression() * 0.035 * res * (t * t - 0.5);
                let end_d = mouth_hw - (px - cx).abs();
                let mouth_d = (mouth_ht - (py - curve_y).abs()).min(end_d);
                layers.push(Layer {
                    color: mouth_c,
                    alpha: coverage(mouth_d, feather),
                });
            }

            for layer in &layers {
                if layer.alpha > 0.0 {
                    for c in 0..3 {
                        rgb[c] = rgb[c] * (1.0 - layer.alpha) + layer.color[c] * layer.alpha;
                    }
                }
            }
            for (c, v) in rgb.iter().enumerate() {
                img.set(c, y, x, (v * at.light_gain()).clamp(0.0, 1.0));
            }
        }
    }
    Ok(img)
}

/// Stacks images into an N×3×H×W tensor in the networks' [−1, 1] range.
pub fn batch_tensor<S: Scalar>(images: &[&Image]) -> Result<Tensor<S>> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("batch_tensor needs at least one image"))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.width != w || img.height != h {
            return Err(Error::shape(
                "batch_tensor",
                format!(
                    "mixed sizes {}×{} and {w}×{h} in one batch",
                    img.width, img.height
                ),
            ));
        }
        data.extend(img.data.iter().map(|v| S::lit(v * 2.0 - 1.0)));
    }
    Tensor::from_vec(&[images.len(), 3, h, w], data)
}

/// One split of a dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub resolution: usize,
    pub items: Vec<(Image, FaceSpec)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Stable hex id of one split's content (resolution plus every face spec),
/// for report provenance.
pub fn content_id(data: &Dataset) -> String {
    let specs: Vec<FaceSpec> = data.items.iter().map(|(_, s)| *s).collect();
    let mut hasher = Sha256::new();
    hasher.update((data.resolution as u64).to_le_bytes());
    hasher.update(serde_json::to_vec(&specs).expect("spec serialization"));
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// The three splits plus provenance; identity factors never cross splits.
#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub seed: u64,
    pub dataset_id: String,
}

/// Stable hex id derived from everything that determines dataset content.
fn dataset_id(seed: u64, n: usize, resolution: usize, specs: &[FaceSpec]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((n as u64).to_le_bytes());
    hasher.update((resolution as u64).to_le_bytes());
    hasher.update(serde_json::to_vec(specs).expect("spec serialization"));
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Renders `n` faces with unique identities and splits them 80/10/10.
pub fn make_dataset(n: usize, resolution: usize, seed: u64) -> Result<DatasetSplits> {
    if n < 10 {
        return Err(Error::invalid(format!(
            "dataset needs at least 10 images, got {n}"
        )));
    }
    let specs: Vec<FaceSpec> = (0..n as u64).map(|i| FaceSpec::from_seed(seed, i)).collect();
    let id = dataset_id(seed, n, resolution, &specs);

    let order = rng::permutation(&mut rng::stream(seed, "split", 0), n);
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let build = |name: &str, idx: &[usize]| -> Result<Dataset> {
        let mut items = Vec::with_capacity(idx.len());
        for &i in idx {
            items.push((render_face(&specs[i], resolution)?, specs[i]));
        }
        Ok(Dataset {
            name: name.to_string(),
            resolution,
            items,
        })
    };
    Ok(DatasetSplits {
        train: build("train", &order[..n_train])?,
        val: build("val", &order[n_train..n_train + n_val])?,
        test: build("test", &order[n_train + n_val..])?,
        seed,
        dataset_id: id,
    })
}

/// Writes a [0, 1] image as an 8-bit RGB PNG.
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let mut bytes = Vec::with_capacity(3 * img.width * img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..3 {
                bytes.push((img.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
        .expect("raw buffer sized to the image");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
}

/// Reads an 8-bit RGB PNG into a [0, 1] image.
pub fn read_image(path: &Path) -> Result<Image> {
    let decoded = image::open(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let rgb = decoded.into_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut img = Image::new(w, h);
    for (x, y, pixel) in rgb.enumerate_pixels() {
        for c in 0..3 {
            img.set(c, y as usize, x as usize, pixel.0[c] as f64 / 255.0);
        }
    }
    Ok(img)
}

/// On-disk dataset description: split membership by file name plus the full
/// spec of every image.
#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub n: usize,
    pub resolution: usize,
    pub dataset_id: String,
    pub splits: Vec<SplitManifest>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SplitManifest {
    pub name: String,
    pub files: Vec<String>,
    pub specs: Vec<FaceSpec>,
}

/// Writes `splits` as PNG files plus `manifest.json` under `dir`.
pub fn save_dataset(dir: &Path, splits: &DatasetSplits) -> Result<()> {
    let n = splits.train.len() + splits.val.len() + splits.test.len();
    let mut manifest = DatasetManifest {
        seed: splits.seed,
        n,
        resolution: splits.train.resolution,
        dataset_id: splits.dataset_id.clone(),
        splits: Vec::new(),
    };
    for split in [&splits.train, &splits.val, &splits.test] {
        let sub = dir.join(&split.name);
        std::fs::create_dir_all(&sub)?;
        let mut files = Vec::new();
        let mut specs = Vec::new();
        for (i, (img, spec)) in split.items.iter().enumerate() {
            let file = format!("{i:05}.png");
            write_image(&sub.join(&file), img)?;
            files.push(format!("{}/{file}", split.name));
            specs.push(*spec);
        }
        manifest.splits.push(SplitManifest {
            name: split.name.clone(),
            files,
            specs,
        });
    }
    let json = serde_json::to_vec_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Loads a dataset directory written by [`save_dataset`]. Pixels come from
/// the PNGs (8-bit quantized); specs come from the manifest.
pub fn load_dataset(dir: &Path) -> Result<DatasetSplits> {
    let manifest: DatasetManifest =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    let mut loaded = Vec::new();
    for split in &manifest.splits {
        if split.files.len() != split.specs.len() {
            return Err(Error::invalid(format!(
                "split {} lists {} files but {} specs",
                split.name,
                split.files.len(),
                split.specs.len()
            )));
        }
        let mut items = Vec::with_capacity(split.files.len());
        for (file, spec) in split.files.iter().zip(&split.specs) {
            items.push((read_image(&dir.join(file))?, *spec));
        }
        loaded.push(Dataset {
            name: split.name.clone(),
            resolution: manifest.resolution,
            items,
        });
    }
    let mut take = |name: &str| -> Result<Dataset> {
        loaded
            .iter()
            .position(|d| d.name == name)
            .map(|i| loaded.remove(i))
            .ok_or_else(|| Error::invalid(format!("manifest has no {name} split")))
    };
    Ok(DatasetSplits {
        train: take("train")?,
        val: take("val")?,
        test: take("test")?,
        seed: manifest.seed,
        dataset_id: manifest.dataset_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64, index: u64) -> FaceSpec {
        FaceSpec::from_seed(seed, index)
    }

    #[test]
    fn rendering_is_deterministic() {
        let s = spec(11, 0);
        let a = render_face(&s, 64).unwrap();
        let b = render_face(&s, 64).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hair_color_change_stays_in_hair_region() {
        let base = spec(3, 5);
        let mut attrs = base.attributes;
        attrs.0[0] = if attrs.0[0] < 0.5 { 0.95 } else { 0.05 };
        let recolored = base.with_attributes(attrs);
        let a = render_face(&base, 64).unwrap();
        let b = render_face(&recolored, 64).unwrap();
        let mut changed = 0usize;
        for y in 0..64 {
            for x in 0..64 {
                let differs = (0..3).any(|c| a.get(c, y, x) != b.get(c, y, x));
                if differs {
                    changed += 1;
                    assert!(
                        hair_coverage(&base, 64, x, y) > 0.0,
                        "pixel ({x},{y}) changed outside the hair region"
                    );
                }
            }
        }
        assert!(changed > 0, "hair recolor must be visible");
    }

    #[test]
    fn extreme_factors_stay_in_gamut() {
        let lo = FaceSpec {
            identity: IdentityFactors(IDENTITY_RANGES.map(|(a, _)| a)),
            attributes: AttributeFactors(ATTRIBUTE_RANGES.map(|(a, _)| a)),
            seed: 0,
        };
        let hi = FaceSpec {
            identity: IdentityFactors(IDENTITY_RANGES.map(|(_, b)| b)),
            attributes: AttributeFactors(ATTRIBUTE_RANGES.map(|(_, b)| b)),
            seed: 0,
        };
        for s in [lo, hi] {
            let img = render_face(&s, 32).unwrap();
            assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn resolution_domain_enforced() {
        let s = spec(1, 0);
        assert!(render_face(&s, 30).is_err());
        assert!(render_face(&s, 33).is_err());
        assert!(render_face(&s, 2048).is_err());
        assert!(render_face(&s, 32).is_ok());
    }

    #[test]
    fn split_sizes_are_80_10_10() {
        let d = make_dataset(100, 32, 5).unwrap();
        assert_eq!(d.train.len(), 80);
        assert_eq!(d.val.len(), 10);
        assert_eq!(d.test.len(), 10);
        assert!(make_dataset(9, 32, 5).is_err());
    }

    #[test]
    fn same_seed_reproduces_dataset() {
        let a = make_dataset(12, 32, 9).unwrap();
        let b = make_dataset(12, 32, 9).unwrap();
        assert_eq!(a.dataset_id, b.dataset_id);
        for (x, y) in a.train.items.iter().zip(&b.train.items) {
            assert_eq!(x.0, y.0);
            assert_eq!(x.1, y.1);
        }
        let c = make_dataset(12, 32, 10).unwrap();
        assert_ne!(a.dataset_id, c.dataset_id);
    }

    #[test]
    fn identities_never_cross_splits() {
        let d = make_dataset(40, 32, 2).unwrap();
        let ids = |set: &Dataset| {
            set.items
                .iter()
                .map(|(_, s)| s.identity.0)
                .collect::<Vec<_>>()
        };
        let (tr, va, te) = (ids(&d.train), ids(&d.val), ids(&d.test));
        for a in &tr {
            assert!(!va.contains(a) && !te.contains(a));
        }
        for a in &va {
            assert!(!te.contains(a));
        }
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = render_face(&spec(21, 3), 32).unwrap();
        let path = dir.path().join("face.png");
        write_image(&path, &img).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!((back.width, back.height), (32, 32));
        let max_err = img
            .data
            .iter()
            .zip(&back.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 1.0 / 510.0, "max quantization error {max_err}");
    }

    #[test]
    fn read_errors_are_structured() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_image(&dir.path().join("missing.png")).is_err());
        let bogus = dir.path().join("not_an_image.png");
        std::fs::write(&bogus, b"plain text").unwrap();
        assert!(read_image(&bogus).is_err());
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = make_dataset(10, 32, 7).unwrap();
        save_dataset(dir.path(), &d).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.dataset_id, d.dataset_id);
        assert_eq!(back.train.len(), d.train.len());
        assert_eq!(back.test.len(), d.test.len());
        assert_eq!(back.train.items[0].1, d.train.items[0].1);
        let max_err: f64 = back
            .train
            .items
            .iter()
            .zip(&d.train.items)
            .flat_map(|(a, b)| a.0.data.iter().zip(&b.0.data).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        assert!(max_err <= 1.0 / 510.0);
    }

    #[test]
    fn tensor_round_trip() {
        let img = render_face(&spec(4, 1), 32).unwrap();
        let t = img.to_tensor::<f64>();
        assert_eq!(t.shape(), [1, 3, 32, 32]);
        t.with_data(|d| assert!(d.iter().all(|v| (-1.0..=1.0).contains(v))));
        let back = Image::from_tensor(&t, 0).unwrap();
        let max_err = img
            .data
            .iter()
            .zip(&back.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-12);
        assert!(Image::from_tensor(&t, 1).is_err());
    }
}

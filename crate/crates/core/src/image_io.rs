//! Grayscale image loading, saving and pairing of registered source images.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use image::codecs::png::PngEncoder;
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat, ImageReader};
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Single-channel raster with intensities in `[0, 1]`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "image",
                format!("{height}x{width} needs {} values, got {}", height * width, data.len()),
            ));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Precondition(format!(
                "image intensity {bad} outside [0, 1]"
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    /// Builds an image from a generator over `(row, col)`; values are
    /// clamped into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c).clamp(0.0, 1.0));
            }
        }
        Image {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Precondition(format!(
                "crop {height}x{width} at ({top}, {left}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width);
        for r in top..top + height {
            let start = r * self.width + left;
            data.extend_from_slice(&self.data[start..start + width]);
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    /// Nearest-neighbour resize so that both sides are at least the given
    /// minimum. Images already large enough are returned unchanged.
    pub fn upscale_nearest_to(&self, min_height: usize, min_width: usize) -> Image {
        let nh = self.height.max(min_height);
        let nw = self.width.max(min_width);
        if (nh, nw) == self.dims() {
            return self.clone();
        }
        Image::from_fn(nh, nw, |r, c| {
            self.get(r * self.height / nh, c * self.width / nw)
        })
    }

    /// `[1, H, W]` tensor view of the intensities.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::of(v as f64)).collect();
        Tensor::from_vec(&[1, self.height, self.width], data).expect("image dims are consistent")
    }

    /// Converts a single-channel tensor back into an image, clamping into `[0, 1]`.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Image> {
        let (c, h, w) = t.chw()?;
        if c != 1 {
            return Err(Error::shape("image tensor", format!("expected 1 channel, got {c}")));
        }
        let data = t
            .data()
            .iter()
            .map(|v| (v.as_f64() as f32).clamp(0.0, 1.0))
            .collect();
        Image::new(h, w, data)
    }

    /// 8-bit quantization used when writing: `round(v * 255)` clamped.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Image> {
        Image::new(height, width, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }
}

fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Two registered source images of identical size.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub x: Image,
    pub y: Image,
    pub id: String,
}

impl ImagePair {
    pub fn new(x: Image, y: Image, id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if x.dims() != y.dims() {
            return Err(Error::PairMismatch { ids: vec![id] });
        }
        Ok(ImagePair { x, y, id })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.x.dims()
    }
}

/// Ordered, non-empty set of training pairs, each at least `crop_size` on a side.
#[derive(Clone, Debug)]
pub struct PairDataset {
    pairs: Vec<ImagePair>,
    crop_size: usize,
}

impl PairDataset {
    /// Builds a dataset, upscaling (nearest neighbour) any pair smaller than
    /// the crop size. Pairs are sorted by id.
    pub fn new(mut pairs: Vec<ImagePair>, crop_size: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyDataset("no image pairs".into()));
        }
        if crop_size == 0 {
            return Err(Error::Config("crop size must be positive".into()));
        }
        for p in pairs.iter_mut() {
            let (h, w) = p.dims();
            if h < crop_size || w < crop_size {
                p.x = p.x.upscale_nearest_to(crop_size, crop_size);
                p.y = p.y.upscale_nearest_to(crop_size, crop_size);
            }
        }
        pairs.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(PairDataset { pairs, crop_size })
    }

    pub fn pairs(&self) -> &[ImagePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn crop_size(&self) -> usize {
        self.crop_size
    }

    /// Splits off the last `n` pairs (by id order) into a second dataset.
    pub fn split_tail(&self, n: usize) -> Result<(PairDataset, Vec<ImagePair>)> {
        if n == 0 || n >= self.pairs.len() {
            return Err(Error::Config(format!(
                "cannot hold out {n} of {} pairs",
                self.pairs.len()
            )));
        }
        let cut = self.pairs.len() - n;
        Ok((
            PairDataset {
                pairs: self.pairs[..cut].to_vec(),
                crop_size: self.crop_size,
            },
            self.pairs[cut..].to_vec(),
        ))
    }
}

/// Reads an 8-bit grayscale/RGB PNG or a binary PGM (P5).
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P5") {
        return parse_pgm(&bytes, path);
    }
    match image::guess_format(&bytes) {
        Ok(ImageFormat::Png) => {}
        Ok(other) => {
            return Err(Error::Format {
                path: path.into(),
                format: format!("{other:?}"),
            })
        }
        Err(_) => {
            return Err(Error::Format {
                path: path.into(),
                format: "unrecognized".into(),
            })
        }
    }
    let decoded = ImageReader::with_format(std::io::Cursor::new(&bytes), ImageFormat::Png)
        .decode()
        .map_err(|e| Error::Format {
            path: path.into(),
            format: format!("png ({e})"),
        })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    match decoded {
        DynamicImage::ImageLuma8(buf) => Image::from_bytes(h, w, buf.as_raw()),
        DynamicImage::ImageRgb8(buf) => {
            let data = buf
                .as_raw()
                .chunks_exact(3)
                .map(|p| luminance(p[0], p[1], p[2]))
                .collect();
            Image::new(h, w, data)
        }
        other => Err(Error::Format {
            path: path.into(),
            format: format!("png {:?}", other.color()),
        }),
    }
}

/// Rec.601 luma of an 8-bit RGB triple, scaled into `[0, 1]`.
pub fn luminance(r: u8, g: u8, b: u8) -> f32 {
    let y = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
    (y / 255.0).clamp(0.0, 1.0) as f32
}

fn parse_pgm(bytes: &[u8], path: &Path) -> Result<Image> {
    let bad = |what: &str| Error::Format {
        path: path.into(),
        format: format!("pgm ({what})"),
    };
    // Header: magic, width, height, maxval separated by whitespace, with
    // `#` comments, then exactly one whitespace byte before the raster.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header"))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(bad("malformed header"));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(bad(&format!("maxval {maxval}, only 8-bit supported")));
    }
    let raster = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| bad("truncated raster"))?;
    let scale = maxval as f32;
    Image::new(
        h,
        w,
        raster.iter().map(|&b| (b as f32 / scale).min(1.0)).collect(),
    )
}

/// Writes an 8-bit grayscale image: `.pgm` as binary PGM, anything else as PNG.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = img.to_bytes();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    if has_extension(path, "pgm") {
        write!(out, "P5\n{} {}\n255\n", img.width, img.height)
            .and_then(|_| out.write_all(&bytes))
            .map_err(|e| Error::io(path, e))?;
    } else {
        PngEncoder::new(&mut out)
            .write_image(&bytes, img.width as u32, img.height as u32, ExtendedColorType::L8)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::Format {
                    path: path.into(),
                    format: format!("png encode ({other})"),
                },
            })?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn has_extension(path: &Path, ext: &str) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

fn image_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() || !(has_extension(&path, "png") || has_extension(&path, "pgm")) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Pairs images from two directories by identical filename stem.
pub fn load_pair_dataset(
    dir_x: impl AsRef<Path>,
    dir_y: impl AsRef<Path>,
    crop: usize,
) -> Result<PairDataset> {
    let (dir_x, dir_y) = (dir_x.as_ref(), dir_y.as_ref());
    let xs = image_files(dir_x)?;
    let ys = image_files(dir_y)?;
    let mut pairs = Vec::new();
    let mut mismatched = Vec::new();
    for (id, px) in &xs {
        let Some(py) = ys.get(id) else { continue };
        let x = load_image(px)?;
        let y = load_image(py)?;
        if x.dims() != y.dims() {
            mismatched.push(format!("{id} ({:?} vs {:?})", x.dims(), y.dims()));
            continue;
        }
        pairs.push(ImagePair { x, y, id: id.clone() });
    }
    if !mismatched.is_empty() {
        return Err(Error::PairMismatch { ids: mismatched });
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no filename stems shared by {} and {}",
            dir_x.display(),
            dir_y.display()
        )));
    }
    PairDataset::new(pairs, crop)
}

/// Loads the `<root>/X`, `<root>/Y` layout.
pub fn load_pair_root(root: impl AsRef<Path>, crop: usize) -> Result<PairDataset> {
    let root = root.as_ref();
    load_pair_dataset(root.join("X"), root.join("Y"), crop)
}

/// Top-left corner of a uniformly drawn `size`×`size` window.
pub fn crop_window<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    size: usize,
    rng: &mut R,
) -> Result<(usize, usize)> {
    if height < size || width < size {
        return Err(Error::Precondition(format!(
            "{height}x{width} image is smaller than crop size {size}"
        )));
    }
    Ok((
        rng.random_range(0..=height - size),
        rng.random_range(0..=width - size),
    ))
}

/// Crops the same random window out of both images of a pair.
pub fn random_crop<R: Rng + ?Sized>(pair: &ImagePair, size: usize, rng: &mut R) -> Result<ImagePair> {
    let (h, w) = pair.dims();
    let (top, left) = crop_window(h, w, size, rng)?;
    Ok(ImagePair {
        x: pair.x.crop(top, left, size, size)?,
        y: pair.y.crop(top, left, size, size)?,
        id: pair.id.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn write_pgm(path: &Path, w: usize, h: usize, bytes: &[u8]) {
        let mut f = File::create(path).unwrap();
        write!(f, "P5\n# comment\n{w} {h}\n255\n").unwrap();
        f.write_all(bytes).unwrap();
    }

    #[test]
    fn pgm_bytes_are_normalized() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        write_pgm(&p, 2, 2, &[0, 255, 128, 64]);
        let img = load_image(&p).unwrap();
        assert_eq!(img.dims(), (2, 2));
        assert_eq!(img.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn rgb_png_reduces_to_luma() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("red.png");
        image::RgbImage::from_pixel(1, 1, image::Rgb([255, 0, 0]))
            .save(&p)
            .unwrap();
        let img = load_image(&p).unwrap();
        assert!((img.get(0, 0) - 0.299).abs() < 1e-7);
    }

    #[test]
    fn black_png_loads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("black.png");
        image::GrayImage::new(16, 16).save(&p).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.dims(), (16, 16));
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_sixteen_bit_and_rgba() {
        let dir = tempfile::tempdir().unwrap();
        let p16 = dir.path().join("deep.png");
        image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(4, 4)
            .save(&p16)
            .unwrap();
        let err = load_image(&p16).unwrap_err().to_string();
        assert!(err.contains("L16"), "{err}");
        let pa = dir.path().join("alpha.png");
        image::RgbaImage::new(4, 4).save(&pa).unwrap();
        assert!(matches!(load_image(&pa), Err(Error::Format { .. })));
        let missing = load_image(dir.path().join("nope.png"));
        assert!(matches!(missing, Err(Error::Io { .. })));
    }

    #[test]
    fn save_quantizes_half_up() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.pgm");
        save_image(&Image::filled(2, 3, 0.5).unwrap(), &p).unwrap();
        let raw = fs::read(&p).unwrap();
        assert!(raw.ends_with(&[128; 6]));
        let ones = dir.path().join("ones.png");
        save_image(&Image::filled(4, 4, 1.0).unwrap(), &ones).unwrap();
        assert!(load_image(&ones).unwrap().to_bytes().iter().all(|&b| b == 255));
    }

    #[test]
    fn round_trip_error_bounded_for_every_byte() {
        // Exhaustive over the 256 byte values and their midpoints.
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rt.png");
        let vals: Vec<f32> = (0..512).map(|i| i as f32 / 511.0).collect();
        let img = Image::new(16, 32, vals).unwrap();
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-7);
        }
        let p2 = dir.path().join("rt2.png");
        save_image(&back, &p2).unwrap();
        assert_eq!(load_image(&p2).unwrap(), back);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let img = Image::filled(2, 2, 0.0).unwrap();
        let err = save_image(&img, "/nonexistent-dir/x.png").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    fn gray_png(path: &Path, size: u32) {
        image::GrayImage::from_fn(size, size, |x, y| image::Luma([((x + y) % 256) as u8]))
            .save(path)
            .unwrap();
    }

    #[test]
    fn dataset_pairs_by_stem_in_sorted_order() {
        let root = tempfile::tempdir().unwrap();
        let (dx, dy) = (root.path().join("X"), root.path().join("Y"));
        fs::create_dir_all(&dx).unwrap();
        fs::create_dir_all(&dy).unwrap();
        for stem in ["b", "a"] {
            gray_png(&dx.join(format!("{stem}.png")), 16);
            gray_png(&dy.join(format!("{stem}.png")), 16);
        }
        let ds = load_pair_root(root.path(), 16).unwrap();
        let ids: Vec<_> = ds.pairs().iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
    }

    #[test]
    fn dataset_without_shared_stems_is_empty() {
        let root = tempfile::tempdir().unwrap();
        let (dx, dy) = (root.path().join("X"), root.path().join("Y"));
        fs::create_dir_all(&dx).unwrap();
        fs::create_dir_all(&dy).unwrap();
        gray_png(&dx.join("a.png"), 16);
        gray_png(&dy.join("b.png"), 16);
        assert!(matches!(
            load_pair_root(root.path(), 16),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn dataset_rejects_mismatched_pair_by_id() {
        let root = tempfile::tempdir().unwrap();
        let (dx, dy) = (root.path().join("X"), root.path().join("Y"));
        fs::create_dir_all(&dx).unwrap();
        fs::create_dir_all(&dy).unwrap();
        gray_png(&dx.join("street.png"), 256);
        gray_png(&dy.join("street.png"), 128);
        match load_pair_root(root.path(), 256) {
            Err(Error::PairMismatch { ids }) => assert!(ids[0].starts_with("street")),
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn small_pairs_are_upscaled_to_crop() {
        let small = Image::from_fn(8, 8, |r, c| ((r * 8 + c) as f32) / 64.0);
        let pair = ImagePair::new(small.clone(), small, "s").unwrap();
        let ds = PairDataset::new(vec![pair], 16).unwrap();
        let p = &ds.pairs()[0];
        assert_eq!(p.dims(), (16, 16));
        assert_eq!(p.x.get(15, 15), 63.0 / 64.0);
    }

    #[test]
    fn crop_of_exact_size_is_identity() {
        let img = Image::from_fn(256, 256, |r, c| ((r ^ c) & 255) as f32 / 255.0);
        let pair = ImagePair::new(img.clone(), img, "p").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(random_crop(&pair, 256, &mut rng).unwrap(), pair);
    }

    #[test]
    fn crop_uses_shared_window_and_is_seeded() {
        let x = Image::from_fn(300, 300, |r, c| ((r * 7 + c * 3) % 256) as f32 / 255.0);
        let y = Image::from_fn(300, 300, |r, c| ((r * 7 + c * 3) % 256) as f32 / 255.0);
        let pair = ImagePair::new(x, y, "p").unwrap();
        let a = random_crop(&pair, 64, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = random_crop(&pair, 64, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.x, a.y);
    }

    #[test]
    fn different_seeds_draw_different_windows() {
        let w1 = crop_window(512, 512, 256, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let w2 = crop_window(512, 512, 256, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_ne!(w1, w2, "offsets {w1:?} vs {w2:?}");
        // Replaying a seed reproduces its offsets.
        assert_eq!(w1, crop_window(512, 512, 256, &mut ChaCha8Rng::seed_from_u64(1)).unwrap());
    }

    #[test]
    fn crop_larger_than_image_fails() {
        let img = Image::filled(16, 16, 0.0).unwrap();
        let pair = ImagePair::new(img.clone(), img, "p").unwrap();
        assert!(matches!(
            random_crop(&pair, 32, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Precondition(_))
        ));
    }
}

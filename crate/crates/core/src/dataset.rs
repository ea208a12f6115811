//! Data ingestion and generation: VOC-format detection and segmentation
//! loading, a deterministic synthetic shapes generator for desk-scale runs,
//! and the partially-annotated sample model shared by every training mode.
//!
//! Annotation reads are counted per sample so the self-training engine can
//! prove it never touched ground truth.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::{Array2, Array3};
use rand::RngExt;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::Box2;
use crate::rng;

/// Mask value that marks pixels excluded from the segmentation loss and IoU.
pub const MASK_IGNORE: u8 = 255;

/// Ordered detection class vocabulary. Segmentation uses the same names
/// shifted by one: mask value 0 is background, `k + 1` is class `k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCatalog {
    names: Vec<String>,
}

impl ClassCatalog {
    pub fn new<I: IntoIterator<Item = T>, T: Into<String>>(names: I) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Config("class catalog: no classes".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(Error::Config(format!("class catalog: class {i} is empty")));
            }
            if names[..i].contains(n) {
                return Err(Error::Config(format!("class catalog: duplicate class {n:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn voc() -> Self {
        Self::new([
            "aeroplane",
            "bicycle",
            "bird",
            "boat",
            "bottle",
            "bus",
            "car",
            "cat",
            "chair",
            "cow",
            "diningtable",
            "dog",
            "horse",
            "motorbike",
            "person",
            "pottedplant",
            "sheep",
            "sofa",
            "train",
            "tvmonitor",
        ])
        .unwrap()
    }

    pub fn shapes() -> Self {
        Self::new(["rectangle", "circle", "triangle"]).unwrap()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Class count including the segmentation background channel.
    pub fn seg_classes(&self) -> usize {
        self.names.len() + 1
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Stable digest over the ordered names; stored in checkpoints so a model
    /// is never evaluated against a different vocabulary.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for n in &self.names {
            h.update(n.as_bytes());
            h.update([0u8]);
        }
        h.finalize().into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetAnnotation {
    pub class_id: usize,
    pub bbox: Box2<f64>,
    pub difficult: bool,
}

/// One image with whatever labels its task split kept. Label accessors count
/// reads into shared telemetry; cloning (and stripping) preserves sharing.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub id: String,
    pub width: usize,
    pub height: usize,
    /// `(H, W, 3)` RGB.
    pub pixels: Array3<u8>,
    det: Option<Vec<DetAnnotation>>,
    seg: Option<Array2<u8>>,
    det_reads: Arc<AtomicU64>,
    seg_reads: Arc<AtomicU64>,
}

impl ImageSample {
    pub fn new(
        id: String,
        pixels: Array3<u8>,
        det: Option<Vec<DetAnnotation>>,
        seg: Option<Array2<u8>>,
    ) -> Self {
        let (h, w, _) = pixels.dim();
        Self {
            id,
            width: w,
            height: h,
            pixels,
            det,
            seg,
            det_reads: Arc::new(AtomicU64::new(0)),
            seg_reads: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn has_detection(&self) -> bool {
        self.det.is_some()
    }

    pub fn has_segmentation(&self) -> bool {
        self.seg.is_some()
    }

    /// Ground-truth boxes; the access is recorded.
    pub fn detections(&self) -> Option<&[DetAnnotation]> {
        self.det_reads.fetch_add(1, Ordering::Relaxed);
        self.det.as_deref()
    }

    /// Ground-truth mask; the access is recorded.
    pub fn seg_mask(&self) -> Option<&Array2<u8>> {
        self.seg_reads.fetch_add(1, Ordering::Relaxed);
        self.seg.as_ref()
    }

    /// Total label reads (detection + segmentation) so far.
    pub fn annotation_reads(&self) -> u64 {
        self.det_reads.load(Ordering::Relaxed) + self.seg_reads.load(Ordering::Relaxed)
    }

    /// Copy that keeps only detection labels (fresh telemetry).
    pub fn detection_only(&self) -> Self {
        let mut s = self.clone();
        s.seg = None;
        s.det_reads = Arc::new(AtomicU64::new(0));
        s.seg_reads = Arc::new(AtomicU64::new(0));
        s
    }

    /// Copy that keeps only segmentation labels (fresh telemetry).
    pub fn segmentation_only(&self) -> Self {
        let mut s = self.clone();
        s.det = None;
        s.det_reads = Arc::new(AtomicU64::new(0));
        s.seg_reads = Arc::new(AtomicU64::new(0));
        s
    }

    /// Copy with no labels at all (fresh telemetry), as fed to self-training.
    pub fn unlabeled(&self) -> Self {
        let mut s = self.clone();
        s.det = None;
        s.seg = None;
        s.det_reads = Arc::new(AtomicU64::new(0));
        s.seg_reads = Arc::new(AtomicU64::new(0));
        s
    }

    /// Invariant check: boxes inside the image and well-formed, mask labels
    /// valid for the catalog, flags consistent by construction.
    pub fn validate(&self, catalog: &ClassCatalog) -> Result<()> {
        if let Some(dets) = &self.det {
            for (i, d) in dets.iter().enumerate() {
                if d.class_id >= catalog.len() {
                    return Err(Error::Consistency(format!(
                        "sample {}: box {i} class {} outside catalog of {}",
                        self.id,
                        d.class_id,
                        catalog.len()
                    )));
                }
                let b = &d.bbox;
                if !b.is_well_formed()
                    || b.area() <= 0.0
                    || b.xmin < 0.0
                    || b.ymin < 0.0
                    || b.xmax > self.width as f64
                    || b.ymax > self.height as f64
                {
                    return Err(Error::Consistency(format!(
                        "sample {}: box {i} [{}, {}, {}, {}] outside {}x{}",
                        self.id, b.xmin, b.ymin, b.xmax, b.ymax, self.width, self.height
                    )));
                }
            }
        }
        if let Some(mask) = &self.seg {
            if mask.dim() != (self.height, self.width) {
                return Err(Error::Consistency(format!(
                    "sample {}: mask {:?} vs image {}x{}",
                    self.id,
                    mask.dim(),
                    self.width,
                    self.height
                )));
            }
            let c_seg = catalog.seg_classes() as u8;
            if let Some(&v) = mask.iter().find(|&&v| v != MASK_IGNORE && v >= c_seg) {
                return Err(Error::Consistency(format!(
                    "sample {}: mask label {v} outside {} segmentation classes",
                    self.id,
                    catalog.seg_classes()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeType {
    Rectangle,
    Circle,
    Triangle,
}

impl ShapeType {
    pub fn name(self) -> &'static str {
        match self {
            ShapeType::Rectangle => "rectangle",
            ShapeType::Circle => "circle",
            ShapeType::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapesConfig {
    pub n_images: usize,
    pub image_size: usize,
    pub shapes_per_image: (usize, usize),
    pub shape_types: Vec<ShapeType>,
    pub seed: u64,
}

impl ShapesConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 {
            return Err(Error::Config("shapes: n_images must be positive".into()));
        }
        if self.image_size < 64 {
            return Err(Error::Config(format!(
                "shapes: image_size {} below the 64-pixel minimum",
                self.image_size
            )));
        }
        let (lo, hi) = self.shapes_per_image;
        if lo > hi || hi == 0 {
            return Err(Error::Config(format!(
                "shapes: bad shapes_per_image range ({lo}, {hi})"
            )));
        }
        if self.shape_types.is_empty() {
            return Err(Error::Config("shapes: no shape types".into()));
        }
        Ok(())
    }
}

/// Base colors per shape class; each instance jitters around its base so
/// classes stay visually separable without being constant.
const SHAPE_COLORS: [[i16; 3]; 3] = [[200, 60, 60], [60, 190, 70], [65, 90, 210]];

const PLACEMENT_RETRIES: usize = 100;

/// Deterministic synthetic dataset: colored shapes on a noisy background.
/// Every sample carries both detection boxes and a segmentation mask; the
/// boxes are the tight bounding boxes of the rendered mask regions.
pub fn generate_shapes(cfg: &ShapesConfig, catalog: &ClassCatalog) -> Result<Vec<ImageSample>> {
    cfg.validate()?;
    if catalog.len() != cfg.shape_types.len() {
        return Err(Error::Config(format!(
            "shapes: catalog has {} classes but config lists {} shape types",
            catalog.len(),
            cfg.shape_types.len()
        )));
    }
    for (i, t) in cfg.shape_types.iter().enumerate() {
        if catalog.name(i) != t.name() {
            return Err(Error::Config(format!(
                "shapes: catalog class {i} is {:?}, expected {:?}",
                catalog.name(i),
                t.name()
            )));
        }
    }
    (0..cfg.n_images)
        .map(|i| generate_one(cfg, i))
        .collect()
}

fn generate_one(cfg: &ShapesConfig, index: usize) -> Result<ImageSample> {
    let mut r = rng::substream(cfg.seed, "shapes", index as u64);
    let n = cfg.image_size;
    let n_shapes = r.random_range(cfg.shapes_per_image.0..=cfg.shapes_per_image.1);

    let bg: [u8; 3] = [
        r.random_range(25..90),
        r.random_range(25..90),
        r.random_range(25..90),
    ];
    let mut pixels = Array3::from_shape_fn((n, n, 3), |(_, _, c)| bg[c]);
    for v in pixels.iter_mut() {
        let noise: i16 = r.random_range(-10..=10);
        *v = (*v as i16 + noise).clamp(0, 255) as u8;
    }
    let mut mask = Array2::zeros((n, n));
    let mut boxes: Vec<Box2<f64>> = Vec::new();
    let mut dets = Vec::new();

    let min_size = (n / 8).max(12);
    let max_size = n * 3 / 8;
    for _ in 0..n_shapes {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let size = r.random_range(min_size..=max_size);
            let x0 = r.random_range(1..n - size - 1);
            let y0 = r.random_range(1..n - size - 1);
            let with_gap = Box2::new(
                x0 as f64 - 2.0,
                y0 as f64 - 2.0,
                (x0 + size) as f64 + 2.0,
                (y0 + size) as f64 + 2.0,
            );
            if boxes.iter().any(|b| b.intersection_area(&with_gap) > 0.0) {
                continue;
            }
            let ti = r.random_range(0..cfg.shape_types.len());
            let shape = cfg.shape_types[ti];
            let base = SHAPE_COLORS[ti % SHAPE_COLORS.len()];
            let jitter: [i16; 3] = [
                r.random_range(-30..=30),
                r.random_range(-30..=30),
                r.random_range(-30..=30),
            ];
            let color: [u8; 3] = std::array::from_fn(|c| (base[c] + jitter[c]).clamp(0, 255) as u8);

            let tight = render_shape(&mut pixels, &mut mask, shape, ti as u8 + 1, x0, y0, size, color);
            let Some((r0, c0, r1, c1)) = tight else {
                continue;
            };
            let bbox = Box2::new(c0 as f64, r0 as f64, (c1 + 1) as f64, (r1 + 1) as f64);
            boxes.push(bbox);
            dets.push(DetAnnotation {
                class_id: ti,
                bbox,
                difficult: false,
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Generation(format!(
                "shapes image {index}: no non-overlapping placement found after {PLACEMENT_RETRIES} tries"
            )));
        }
    }
    Ok(ImageSample::new(
        format!("shape{index:06}"),
        pixels,
        Some(dets),
        Some(mask),
    ))
}

/// Rasterize one shape into the image and mask; returns the tight pixel
/// bounds (r0, c0, r1, c1) of what was actually drawn.
#[allow(clippy::too_many_arguments)]
fn render_shape(
    pixels: &mut Array3<u8>,
    mask: &mut Array2<u8>,
    shape: ShapeType,
    label: u8,
    x0: usize,
    y0: usize,
    size: usize,
    color: [u8; 3],
) -> Option<(usize, usize, usize, usize)> {
    let inside = |dx: f64, dy: f64| -> bool {
        let s = size as f64;
        match shape {
            ShapeType::Rectangle => true,
            ShapeType::Circle => {
                let r = s / 2.0;
                (dx - r + 0.5).powi(2) + (dy - r + 0.5).powi(2) <= r * r
            }
            ShapeType::Triangle => {
                // isoceles, apex centered on the top edge
                let fy = dy / (s - 1.0);
                let half = fy * (s - 1.0) / 2.0;
                let cx = (s - 1.0) / 2.0;
                (dx - cx).abs() <= half
            }
        }
    };
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for dy in 0..size {
        for dx in 0..size {
            if !inside(dx as f64, dy as f64) {
                continue;
            }
            let (row, col) = (y0 + dy, x0 + dx);
            for c in 0..3 {
                pixels[(row, col, c)] = color[c];
            }
            mask[(row, col)] = label;
            bounds = Some(match bounds {
                None => (row, col, row, col),
                Some((r0, c0, r1, c1)) => (r0.min(row), c0.min(col), r1.max(row), c1.max(col)),
            });
        }
    }
    bounds
}

fn read_split_ids(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_whitespace().next())
        .map(str::to_string)
        .collect())
}

fn load_rgb(path: &Path, id: &str) -> Result<Array3<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Load {
            id: id.to_string(),
            msg: format!("{}: {e}", path.display()),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    Array3::from_shape_vec((h, w, 3), raw)
        .map_err(|e| Error::Load {
            id: id.to_string(),
            msg: format!("{}: {e}", path.display()),
        })
}

fn find_image(dir: &Path, id: &str) -> PathBuf {
    for ext in ["jpg", "jpeg", "png"] {
        let p = dir.join(format!("{id}.{ext}"));
        if p.exists() {
            return p;
        }
    }
    dir.join(format!("{id}.jpg"))
}

fn xml_text_as<T: std::str::FromStr>(
    node: roxmltree::Node,
    tag: &str,
    doc: &roxmltree::Document,
    path: &Path,
) -> Result<T> {
    let child = node
        .children()
        .find(|c| c.has_tag_name(tag))
        .ok_or_else(|| parse_err(path, doc, node.range().start, &format!("missing <{tag}>")))?;
    let text = child.text().unwrap_or("").trim();
    text.parse().map_err(|_| {
        parse_err(
            path,
            doc,
            child.range().start,
            &format!("bad <{tag}> value {text:?}"),
        )
    })
}

fn parse_err(path: &Path, doc: &roxmltree::Document, pos: usize, msg: &str) -> Error {
    let tp = doc.text_pos_at(pos);
    Error::Parse {
        path: path.to_path_buf(),
        line: Some(tp.row),
        col: Some(tp.col),
        msg: msg.to_string(),
    }
}

/// Load a VOC-layout detection split: `ImageSets/Main/<split>.txt` ids,
/// `Annotations/<id>.xml` boxes, `JPEGImages/<id>.*` pixels.
pub fn load_voc_detection(
    root: &Path,
    split_name: &str,
    catalog: &ClassCatalog,
) -> Result<Vec<ImageSample>> {
    let ids = read_split_ids(&root.join("ImageSets/Main").join(format!("{split_name}.txt")))?;
    let mut out = Vec::with_capacity(ids.len());
    for id in &ids {
        let xml_path = root.join("Annotations").join(format!("{id}.xml"));
        let text = fs::read_to_string(&xml_path).map_err(|_| Error::Load {
            id: id.clone(),
            msg: format!("missing annotation {}", xml_path.display()),
        })?;
        let doc = roxmltree::Document::parse(&text).map_err(|e| {
            let tp = e.pos();
            Error::Parse {
                path: xml_path.clone(),
                line: Some(tp.row),
                col: Some(tp.col),
                msg: e.to_string(),
            }
        })?;
        let ann = doc.root_element();
        let mut dets = Vec::new();
        for obj in ann.children().filter(|n| n.has_tag_name("object")) {
            let name_node = obj
                .children()
                .find(|c| c.has_tag_name("name"))
                .ok_or_else(|| parse_err(&xml_path, &doc, obj.range().start, "object without <name>"))?;
            let name = name_node.text().unwrap_or("").trim();
            let class_id = catalog
                .id_of(name)
                .ok_or_else(|| Error::UnknownClass { name: name.to_string() })?;
            let difficult = obj
                .children()
                .find(|c| c.has_tag_name("difficult"))
                .and_then(|c| c.text())
                .map(|t| t.trim() == "1")
                .unwrap_or(false);
            let bb = obj
                .children()
                .find(|c| c.has_tag_name("bndbox"))
                .ok_or_else(|| parse_err(&xml_path, &doc, obj.range().start, "object without <bndbox>"))?;
            let bbox = Box2::new(
                xml_text_as::<f64>(bb, "xmin", &doc, &xml_path)?,
                xml_text_as::<f64>(bb, "ymin", &doc, &xml_path)?,
                xml_text_as::<f64>(bb, "xmax", &doc, &xml_path)?,
                xml_text_as::<f64>(bb, "ymax", &doc, &xml_path)?,
            );
            dets.push(DetAnnotation {
                class_id,
                bbox,
                difficult,
            });
        }
        let pixels = load_rgb(&find_image(&root.join("JPEGImages"), id), id)?;
        let sample = ImageSample::new(id.clone(), pixels, Some(dets), None);
        sample.validate(catalog)?;
        out.push(sample);
    }
    Ok(out)
}

/// Read an indexed PNG as raw palette indices (the index is the class label).
fn load_indexed_png(path: &Path) -> Result<Array2<u8>> {
    let file = fs::File::open(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let info = reader.info();
    if info.color_type != png::ColorType::Indexed || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            msg: format!(
                "expected 8-bit indexed mask, found {:?}/{:?}",
                info.color_type, info.bit_depth
            ),
        });
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(w * h)];
    let frame = reader.next_frame(&mut buf).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    buf.truncate(frame.buffer_size());
    Array2::from_shape_vec((h, w), buf).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Load a VOC-layout segmentation split: `ImageSets/Segmentation/<split>.txt`
/// ids with `SegmentationClass/<id>.png` indexed masks.
pub fn load_voc_segmentation(
    root: &Path,
    split_name: &str,
    catalog: &ClassCatalog,
) -> Result<Vec<ImageSample>> {
    let ids = read_split_ids(
        &root
            .join("ImageSets/Segmentation")
            .join(format!("{split_name}.txt")),
    )?;
    let mut out = Vec::with_capacity(ids.len());
    for id in &ids {
        let mask_path = root.join("SegmentationClass").join(format!("{id}.png"));
        if !mask_path.exists() {
            return Err(Error::Load {
                id: id.clone(),
                msg: format!("missing mask {}", mask_path.display()),
            });
        }
        let mask = load_indexed_png(&mask_path)?;
        let pixels = load_rgb(&find_image(&root.join("JPEGImages"), id), id)?;
        let (h, w, _) = pixels.dim();
        if mask.dim() != (h, w) {
            return Err(Error::Consistency(format!(
                "sample {id}: mask {:?} does not match image {h}x{w}",
                mask.dim()
            )));
        }
        let sample = ImageSample::new(id.clone(), pixels, None, Some(mask));
        sample.validate(catalog)?;
        out.push(sample);
    }
    Ok(out)
}

/// Write samples out in the VOC directory layout (annotations, images, masks
/// and both split files), for round-trip testing against the loaders.
pub fn export_voc_layout(
    samples: &[ImageSample],
    root: &Path,
    catalog: &ClassCatalog,
    split_name: &str,
) -> Result<()> {
    let io_err = |p: &Path| {
        let p = p.to_path_buf();
        move |e: std::io::Error| Error::Io { path: p, source: e }
    };
    for sub in [
        "Annotations",
        "JPEGImages",
        "SegmentationClass",
        "ImageSets/Main",
        "ImageSets/Segmentation",
    ] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    let mut det_ids = Vec::new();
    let mut seg_ids = Vec::new();
    for s in samples {
        let jpg = root.join("JPEGImages").join(format!("{}.jpg", s.id));
        let mut w = std::io::BufWriter::new(fs::File::create(&jpg).map_err(io_err(&jpg))?);
        let flat: Vec<u8> = s.pixels.iter().copied().collect();
        image::codecs::jpeg::JpegEncoder::new_with_quality(&mut w, 95)
            .encode(
                &flat,
                s.width as u32,
                s.height as u32,
                image::ExtendedColorType::Rgb8,
            )
            .map_err(|e| Error::Data(format!("jpeg encode {}: {e}", s.id)))?;

        if let Some(dets) = s.detections() {
            det_ids.push(s.id.clone());
            let mut xml = String::new();
            xml.push_str("<annotation>\n");
            xml.push_str(&format!(
                "  <filename>{}.jpg</filename>\n  <size>\n    <width>{}</width>\n    <height>{}</height>\n    <depth>3</depth>\n  </size>\n",
                s.id, s.width, s.height
            ));
            for d in dets {
                xml.push_str(&format!(
                    "  <object>\n    <name>{}</name>\n    <difficult>{}</difficult>\n    <bndbox>\n      <xmin>{}</xmin>\n      <ymin>{}</ymin>\n      <xmax>{}</xmax>\n      <ymax>{}</ymax>\n    </bndbox>\n  </object>\n",
                    catalog.name(d.class_id),
                    u8::from(d.difficult),
                    d.bbox.xmin,
                    d.bbox.ymin,
                    d.bbox.xmax,
                    d.bbox.ymax
                ));
            }
            xml.push_str("</annotation>\n");
            let xp = root.join("Annotations").join(format!("{}.xml", s.id));
            fs::write(&xp, xml).map_err(io_err(&xp))?;
        }
        if let Some(mask) = s.seg_mask() {
            seg_ids.push(s.id.clone());
            let mp = root.join("SegmentationClass").join(format!("{}.png", s.id));
            let file = fs::File::create(&mp).map_err(io_err(&mp))?;
            let mut enc = png::Encoder::new(
                std::io::BufWriter::new(file),
                s.width as u32,
                s.height as u32,
            );
            enc.set_color(png::ColorType::Indexed);
            enc.set_depth(png::BitDepth::Eight);
            // grayscale-ish palette; indices carry the labels
            let palette: Vec<u8> = (0..=255u16)
                .flat_map(|i| [(i % 256) as u8; 3])
                .collect();
            enc.set_palette(palette);
            let flat: Vec<u8> = mask.iter().copied().collect();
            let mut writer = enc
                .write_header()
                .map_err(|e| Error::Data(format!("png encode {}: {e}", s.id)))?;
            writer
                .write_image_data(&flat)
                .map_err(|e| Error::Data(format!("png encode {}: {e}", s.id)))?;
        }
    }
    let main = root.join("ImageSets/Main").join(format!("{split_name}.txt"));
    fs::write(&main, det_ids.join("\n") + "\n").map_err(io_err(&main))?;
    let seg = root
        .join("ImageSets/Segmentation")
        .join(format!("{split_name}.txt"));
    fs::write(&seg, seg_ids.join("\n") + "\n").map_err(io_err(&seg))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(n: usize, seed: u64) -> ShapesConfig {
        ShapesConfig {
            n_images: n,
            image_size: 64,
            shapes_per_image: (1, 3),
            shape_types: vec![ShapeType::Rectangle, ShapeType::Circle, ShapeType::Triangle],
            seed,
        }
    }

    #[test]
    fn catalog_rejects_duplicates_and_empties() {
        assert!(ClassCatalog::new(["a", "b", "a"]).is_err());
        assert!(ClassCatalog::new(["a", ""]).is_err());
        assert!(ClassCatalog::new(Vec::<String>::new()).is_err());
        let c = ClassCatalog::voc();
        assert_eq!(c.len(), 20);
        assert_eq!(c.seg_classes(), 21);
        assert_eq!(c.id_of("dog"), Some(11));
        assert_ne!(c.digest(), ClassCatalog::shapes().digest());
    }

    #[test]
    fn shapes_are_deterministic_and_valid() {
        let cat = ClassCatalog::shapes();
        let a = generate_shapes(&small_cfg(6, 9), &cat).unwrap();
        let b = generate_shapes(&small_cfg(6, 9), &cat).unwrap();
        assert_eq!(a.len(), 6);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.pixels, y.pixels);
            assert_eq!(x.detections().unwrap(), y.detections().unwrap());
            assert_eq!(x.seg_mask().unwrap(), y.seg_mask().unwrap());
        }
        let c = generate_shapes(&small_cfg(6, 10), &cat).unwrap();
        assert_ne!(a[0].pixels, c[0].pixels);
        for s in &a {
            s.validate(&cat).unwrap();
        }
    }

    #[test]
    fn shapes_boxes_are_tight_mask_bboxes() {
        let cat = ClassCatalog::shapes();
        let samples = generate_shapes(&small_cfg(8, 3), &cat).unwrap();
        for s in &samples {
            let mask = s.seg_mask().unwrap().clone();
            for d in s.detections().unwrap() {
                let label = d.class_id as u8 + 1;
                // tight bounds of the mask pixels inside this box
                let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
                for r in d.bbox.ymin as usize..d.bbox.ymax as usize {
                    for c in d.bbox.xmin as usize..d.bbox.xmax as usize {
                        if mask[(r, c)] == label {
                            r0 = r0.min(r);
                            c0 = c0.min(c);
                            r1 = r1.max(r);
                            c1 = c1.max(c);
                        }
                    }
                }
                let tight = Box2::new(c0 as f64, r0 as f64, (c1 + 1) as f64, (r1 + 1) as f64);
                assert_eq!(d.bbox.iou(&tight), 1.0, "sample {}", s.id);
            }
        }
    }

    #[test]
    fn shapes_respect_count_range() {
        let cat = ClassCatalog::shapes();
        let mut cfg = small_cfg(5, 4);
        cfg.shapes_per_image = (1, 1);
        for s in generate_shapes(&cfg, &cat).unwrap() {
            assert_eq!(s.detections().unwrap().len(), 1);
        }
    }

    #[test]
    fn annotation_reads_are_counted() {
        let cat = ClassCatalog::shapes();
        let samples = generate_shapes(&small_cfg(1, 5), &cat).unwrap();
        let s = samples[0].unlabeled();
        assert_eq!(s.annotation_reads(), 0);
        assert!(s.detections().is_none());
        assert!(s.seg_mask().is_none());
        assert_eq!(s.annotation_reads(), 2);
        assert!(!s.has_detection() && !s.has_segmentation());

        let d = samples[0].detection_only();
        assert!(d.has_detection() && !d.has_segmentation());
        assert_eq!(d.annotation_reads(), 0);
    }

    #[test]
    fn voc_round_trip_through_disk() {
        let cat = ClassCatalog::shapes();
        let samples = generate_shapes(&small_cfg(4, 7), &cat).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_voc_layout(&samples, dir.path(), &cat, "trainval").unwrap();

        let det = load_voc_detection(dir.path(), "trainval", &cat).unwrap();
        assert_eq!(det.len(), 4);
        for (orig, loaded) in samples.iter().zip(&det) {
            assert_eq!(orig.id, loaded.id);
            assert!(loaded.has_detection() && !loaded.has_segmentation());
            let (a, b) = (orig.detections().unwrap(), loaded.detections().unwrap());
            assert_eq!(a, b);
            // jpeg is lossy; content must still be close
            let diff: f64 = orig
                .pixels
                .iter()
                .zip(loaded.pixels.iter())
                .map(|(&x, &y)| (x as f64 - y as f64).abs())
                .sum::<f64>()
                / orig.pixels.len() as f64;
            assert!(diff < 4.0, "mean abs pixel diff {diff}");
        }

        let seg = load_voc_segmentation(dir.path(), "trainval", &cat).unwrap();
        assert_eq!(seg.len(), 4);
        for (orig, loaded) in samples.iter().zip(&seg) {
            assert!(!loaded.has_detection() && loaded.has_segmentation());
            assert_eq!(orig.seg_mask().unwrap(), loaded.seg_mask().unwrap());
        }
    }

    #[test]
    fn voc_loader_errors_name_the_problem() {
        let cat = ClassCatalog::shapes();
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::create_dir_all(root.join("ImageSets/Main")).unwrap();
        fs::create_dir_all(root.join("Annotations")).unwrap();
        fs::create_dir_all(root.join("JPEGImages")).unwrap();

        // empty split -> empty list
        fs::write(root.join("ImageSets/Main/empty.txt"), "").unwrap();
        assert!(load_voc_detection(root, "empty", &cat).unwrap().is_empty());

        // missing annotation -> load error naming the id
        fs::write(root.join("ImageSets/Main/t.txt"), "img1\n").unwrap();
        match load_voc_detection(root, "t", &cat) {
            Err(Error::Load { id, .. }) => assert_eq!(id, "img1"),
            other => panic!("expected load error, got {other:?}"),
        }

        // malformed xml -> parse error with position
        fs::write(
            root.join("Annotations/img1.xml"),
            "<annotation><object></annotation>",
        )
        .unwrap();
        match load_voc_detection(root, "t", &cat) {
            Err(Error::Parse { line, .. }) => assert!(line.unwrap() >= 1),
            other => panic!("expected parse error, got {other:?}"),
        }

        // unknown class name
        fs::write(
            root.join("Annotations/img1.xml"),
            "<annotation><object><name>zebra</name><bndbox><xmin>1</xmin><ymin>1</ymin><xmax>5</xmax><ymax>5</ymax></bndbox></object></annotation>",
        )
        .unwrap();
        match load_voc_detection(root, "t", &cat) {
            Err(Error::UnknownClass { name }) => assert_eq!(name, "zebra"),
            other => panic!("expected unknown class, got {other:?}"),
        }
    }

    #[test]
    fn hand_written_fixture_parses_exactly() {
        let cat = ClassCatalog::shapes();
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::create_dir_all(root.join("ImageSets/Main")).unwrap();
        fs::create_dir_all(root.join("Annotations")).unwrap();
        fs::create_dir_all(root.join("JPEGImages")).unwrap();
        fs::write(root.join("ImageSets/Main/f.txt"), "a\nb\n").unwrap();

        for (id, xml) in [
            (
                "a",
                "<annotation><size><width>64</width><height>64</height></size>\
                 <object><name>circle</name><difficult>0</difficult>\
                 <bndbox><xmin>10</xmin><ymin>12</ymin><xmax>30</xmax><ymax>40</ymax></bndbox></object>\
                 <object><name>rectangle</name><difficult>1</difficult>\
                 <bndbox><xmin>2</xmin><ymin>3</ymin><xmax>9</xmax><ymax>8</ymax></bndbox></object>\
                 </annotation>",
            ),
            (
                "b",
                "<annotation><object><name>triangle</name>\
                 <bndbox><xmin>5</xmin><ymin>5</ymin><xmax>20</xmax><ymax>25</ymax></bndbox></object></annotation>",
            ),
        ] {
            fs::write(root.join(format!("Annotations/{id}.xml")), xml).unwrap();
            let img = image::RgbImage::new(64, 64);
            img.save(root.join(format!("JPEGImages/{id}.jpg"))).unwrap();
        }
        let loaded = load_voc_detection(root, "f", &cat).unwrap();
        assert_eq!(loaded.len(), 2);
        let a = loaded[0].detections().unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].class_id, 1);
        assert_eq!(a[0].bbox, Box2::new(10.0, 12.0, 30.0, 40.0));
        assert!(!a[0].difficult);
        assert!(a[1].difficult);
        let b = loaded[1].detections().unwrap();
        assert_eq!(b[0].class_id, 2);
        assert_eq!(b[0].bbox, Box2::new(5.0, 5.0, 20.0, 25.0));
    }
}

//! Layered bitstream: a section table followed by independently decodable
//! payloads.
//!
//! File layout (little-endian): magic `HGCA`, `u16` version, `u8` section
//! count, then one 22-byte entry per section (`u8` layer, `u8` codec, `u64`
//! offset, `u64` length, `u32` CRC-32 of the payload) and the payloads in
//! table order. Offsets are absolute. [`mux`] sorts sections by layer, so
//! the byte layout depends only on the section contents.
//!
//! The skinned template is not carried: like a parametric body model it is
//! shared by both ends. The metadata section records its CRC so a decoder
//! can tell when it was handed the wrong one.

use std::collections::BTreeMap;
use std::io::{Read, Seek, SeekFrom};

use rayon::prelude::*;

use crate::avatar_model::{PoseMapPair, SkinnedTemplate, SmplxPose};
use crate::error::{Error, Result};
use crate::generator::GeneratorWeights;
use crate::pipeline;
use crate::posemap_codec::{decode_posemaps, encode_posemaps, PoseMapStream};
use crate::renderer::{psnr, ssim, Camera, SplatImage};
use crate::smplx_codec::{decode_smplx, encode_smplx, SmplxStream};
use crate::synthetic::SyntheticScene;
use crate::weight_quant::{quantize_network, QuantConfig, QuantizedNetwork};
use crate::wire::{self, Reader};

pub const MAGIC: &[u8; 4] = b"HGCA";
pub const VERSION: u16 = 1;
const PREAMBLE: usize = 7;
const ENTRY_BYTES: usize = 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Layer {
    Structural = 0,
    Smplx = 1,
    PoseMap = 2,
    Metadata = 3,
}

impl Layer {
    pub const ALL: [Layer; 4] = [Layer::Structural, Layer::Smplx, Layer::PoseMap, Layer::Metadata];

    pub fn from_byte(b: u8) -> Result<Self> {
        Layer::ALL
            .get(b as usize)
            .copied()
            .ok_or_else(|| Error::decode(format!("container: unknown layer id {b}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Layer::Structural => "structural",
            Layer::Smplx => "motion-smplx",
            Layer::PoseMap => "motion-posemap",
            Layer::Metadata => "metadata",
        }
    }

    pub fn is_motion(self) -> bool {
        matches!(self, Layer::Smplx | Layer::PoseMap)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Codec {
    /// Full-precision weights (`HGWT`).
    RawWeights = 1,
    /// Step-quantized weights (`HGQW`).
    QuantizedWeights = 2,
    Smplx = 3,
    PoseMap = 4,
    KeyValue = 5,
}

impl Codec {
    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            1 => Ok(Codec::RawWeights),
            2 => Ok(Codec::QuantizedWeights),
            3 => Ok(Codec::Smplx),
            4 => Ok(Codec::PoseMap),
            5 => Ok(Codec::KeyValue),
            b => Err(Error::decode(format!("container: unknown codec id {b}"))),
        }
    }

    fn fits(self, layer: Layer) -> bool {
        matches!(
            (layer, self),
            (Layer::Structural, Codec::RawWeights | Codec::QuantizedWeights)
                | (Layer::Smplx, Codec::Smplx)
                | (Layer::PoseMap, Codec::PoseMap)
                | (Layer::Metadata, Codec::KeyValue)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub layer: Layer,
    pub codec: Codec,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TableEntry {
    pub layer: Layer,
    pub codec: Codec,
    pub offset: u64,
    pub length: u64,
    pub crc: u32,
}

fn header_len(count: usize) -> usize {
    PREAMBLE + count * ENTRY_BYTES
}

/// Writes a container. Fails on a repeated layer or a codec that does not
/// belong to its layer.
pub fn mux(sections: &[Section]) -> Result<Vec<u8>> {
    let mut order: Vec<&Section> = sections.iter().collect();
    order.sort_by_key(|s| s.layer);
    for pair in order.windows(2) {
        if pair[0].layer == pair[1].layer {
            return Err(Error::invalid(format!("duplicate {} section", pair[0].layer.name())));
        }
    }
    if let Some(s) = order.iter().find(|s| !s.codec.fits(s.layer)) {
        return Err(Error::invalid(format!("codec {:?} cannot carry the {} layer", s.codec, s.layer.name())));
    }
    let mut out = Vec::with_capacity(header_len(order.len()) + order.iter().map(|s| s.payload.len()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    wire::put_u16(&mut out, VERSION);
    out.push(order.len() as u8);
    let mut offset = header_len(order.len()) as u64;
    for s in &order {
        out.push(s.layer as u8);
        out.push(s.codec as u8);
        wire::put_u64(&mut out, offset);
        wire::put_u64(&mut out, s.payload.len() as u64);
        wire::put_u32(&mut out, crc32fast::hash(&s.payload));
        offset += s.payload.len() as u64;
    }
    for s in &order {
        out.extend_from_slice(&s.payload);
    }
    Ok(out)
}

fn parse_table(head: &[u8], file_len: u64) -> Result<Vec<TableEntry>> {
    let mut r = Reader::new(head, "container header");
    r.magic(MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::decode(format!("container: unsupported version {version}")));
    }
    let count = r.u8()? as usize;
    let start = header_len(count) as u64;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let layer = Layer::from_byte(r.u8()?)?;
        let codec = Codec::from_byte(r.u8()?)?;
        let entry = TableEntry {
            layer,
            codec,
            offset: r.u64()?,
            length: r.u64()?,
            crc: r.u32()?,
        };
        if !codec.fits(layer) {
            return Err(Error::decode(format!("container: codec {codec:?} on the {} layer", layer.name())));
        }
        let end = entry.offset.checked_add(entry.length);
        if entry.offset < start || end.is_none_or(|e| e > file_len) {
            return Err(Error::decode(format!("container: {} section out of bounds", layer.name())));
        }
        entries.push(entry);
    }
    let mut sorted = entries.clone();
    sorted.sort_by_key(|e| e.offset);
    for pair in sorted.windows(2) {
        if pair[0].offset + pair[0].length > pair[1].offset {
            return Err(Error::decode(format!(
                "container: {} and {} sections overlap",
                pair[0].layer.name(),
                pair[1].layer.name()
            )));
        }
    }
    for (i, e) in entries.iter().enumerate() {
        if entries[..i].iter().any(|p| p.layer == e.layer) {
            return Err(Error::decode(format!("container: duplicate {} section", e.layer.name())));
        }
    }
    Ok(entries)
}

fn check_crc(entry: &TableEntry, payload: &[u8]) -> Result<()> {
    let computed = crc32fast::hash(payload);
    if computed != entry.crc {
        return Err(Error::Crc {
            section: entry.layer.name(),
            stored: entry.crc,
            computed,
        });
    }
    Ok(())
}

/// Reads every section back, checking bounds and CRCs.
pub fn demux(bytes: &[u8]) -> Result<Vec<Section>> {
    let entries = parse_table(bytes, bytes.len() as u64)?;
    entries
        .iter()
        .map(|e| {
            let payload = &bytes[e.offset as usize..(e.offset + e.length) as usize];
            check_crc(e, payload)?;
            Ok(Section {
                layer: e.layer,
                codec: e.codec,
                payload: payload.to_vec(),
            })
        })
        .collect()
}

/// Random-access view of a container: reads the table on open and each
/// section only when asked for.
#[derive(Debug)]
pub struct ContainerReader<R> {
    inner: R,
    entries: Vec<TableEntry>,
}

impl<R: Read + Seek> ContainerReader<R> {
    pub fn open(mut inner: R) -> Result<Self> {
        let file_len = inner.seek(SeekFrom::End(0))?;
        inner.seek(SeekFrom::Start(0))?;
        let mut head = vec![0u8; PREAMBLE];
        read_up_to(&mut inner, &mut head)?;
        let count = head[PREAMBLE - 1] as usize;
        head.resize(header_len(count), 0);
        read_up_to(&mut inner, &mut head[PREAMBLE..])?;
        let entries = parse_table(&head, file_len)?;
        Ok(ContainerReader { inner, entries })
    }

    pub fn entries(&self) -> &[TableEntry] {
        &self.entries
    }

    pub fn entry(&self, layer: Layer) -> Option<&TableEntry> {
        self.entries.iter().find(|e| e.layer == layer)
    }

    /// Payload of `layer`, CRC-checked; `None` when the section is absent.
    pub fn section(&mut self, layer: Layer) -> Result<Option<Section>> {
        let Some(entry) = self.entry(layer).copied() else {
            return Ok(None);
        };
        self.inner.seek(SeekFrom::Start(entry.offset))?;
        let mut payload = vec![0u8; entry.length as usize];
        self.inner.read_exact(&mut payload)?;
        check_crc(&entry, &payload)?;
        Ok(Some(Section {
            layer,
            codec: entry.codec,
            payload,
        }))
    }

    pub fn into_inner(self) -> R {
        self.inner
    }
}

/// Fills `buf`, reporting a short file as a decode error.
fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::decode("container: truncated header"),
        _ => Error::Io(e),
    })
}

/// Reader wrapper that logs the byte range of every read.
#[derive(Debug)]
pub struct TracingReader<R> {
    inner: R,
    pos: u64,
    reads: Vec<(u64, u64)>,
}

impl<R> TracingReader<R> {
    pub fn new(inner: R) -> Self {
        TracingReader {
            inner,
            pos: 0,
            reads: Vec::new(),
        }
    }

    /// Half-open `[start, end)` ranges actually delivered.
    pub fn reads(&self) -> &[(u64, u64)] {
        &self.reads
    }

    /// True if any delivered byte falls inside `[start, end)`.
    pub fn touched(&self, start: u64, end: u64) -> bool {
        self.reads.iter().any(|&(a, b)| a < end && start < b)
    }
}

impl<R: Read> Read for TracingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        if n > 0 {
            self.reads.push((self.pos, self.pos + n as u64));
        }
        self.pos += n as u64;
        Ok(n)
    }
}

impl<R: Seek> Seek for TracingReader<R> {
    fn seek(&mut self, to: SeekFrom) -> std::io::Result<u64> {
        self.pos = self.inner.seek(to)?;
        Ok(self.pos)
    }
}

/// Sorted string keys to byte values.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Metadata(pub BTreeMap<String, Vec<u8>>);

impl Metadata {
    pub fn insert(&mut self, key: &str, value: impl Into<Vec<u8>>) {
        self.0.insert(key.to_owned(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&[u8]> {
        self.0.get(key).map(Vec::as_slice)
    }

    pub fn text(&self, key: &str) -> Result<&str> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::decode(format!("metadata: missing `{key}`")))?;
        std::str::from_utf8(raw).map_err(|_| Error::decode(format!("metadata: `{key}` is not UTF-8")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        wire::put_u32(&mut out, wire::to_u32(self.0.len(), "metadata entries")?);
        for (k, v) in &self.0 {
            let klen = u16::try_from(k.len()).map_err(|_| Error::invalid(format!("metadata key `{k}` too long")))?;
            wire::put_u16(&mut out, klen);
            out.extend_from_slice(k.as_bytes());
            wire::put_u32(&mut out, wire::to_u32(v.len(), "metadata value length")?);
            out.extend_from_slice(v);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "metadata section");
        let n = r.u32()?;
        let mut map = BTreeMap::new();
        for _ in 0..n {
            let klen = r.u16()? as usize;
            let key = String::from_utf8(r.bytes(klen)?.to_vec())
                .map_err(|_| Error::decode("metadata: key is not UTF-8"))?;
            let vlen = r.u32()? as usize;
            let value = r.bytes(vlen)?.to_vec();
            if map.insert(key.clone(), value).is_some() {
                return Err(Error::decode(format!("metadata: duplicate key `{key}`")));
            }
        }
        r.finish()?;
        Ok(Metadata(map))
    }
}

pub const KEY_CAMERA: &str = "camera";
pub const KEY_FRAMES: &str = "frames";
pub const KEY_MAP_RESOLUTION: &str = "map_resolution";
pub const KEY_TEMPLATE_CRC: &str = "template_crc32";

/// Decoder-side scene description carried in the metadata layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneInfo {
    pub camera: Camera,
    pub frames: usize,
    pub map_resolution: (usize, usize),
    pub template_crc: u32,
}

impl SceneInfo {
    pub fn new(template: &SkinnedTemplate, camera: &Camera, frames: usize, map_resolution: (usize, usize)) -> Result<Self> {
        Ok(SceneInfo {
            camera: camera.clone(),
            frames,
            map_resolution,
            template_crc: crc32fast::hash(&template.to_bytes()?),
        })
    }

    pub fn to_metadata(&self) -> Metadata {
        let mut m = Metadata::default();
        m.insert(KEY_CAMERA, self.camera.to_text());
        m.insert(KEY_FRAMES, self.frames.to_string());
        m.insert(KEY_MAP_RESOLUTION, format!("{}x{}", self.map_resolution.0, self.map_resolution.1));
        m.insert(KEY_TEMPLATE_CRC, format!("{:08x}", self.template_crc));
        m
    }

    pub fn from_metadata(m: &Metadata) -> Result<Self> {
        let bad = |key: &str| Error::decode(format!("metadata: malformed `{key}`"));
        let camera = Camera::from_text(m.text(KEY_CAMERA)?).map_err(|e| Error::decode(format!("metadata camera: {e}")))?;
        let frames = m.text(KEY_FRAMES)?.parse().map_err(|_| bad(KEY_FRAMES))?;
        let map_resolution = parse_resolution(m.text(KEY_MAP_RESOLUTION)?).ok_or_else(|| bad(KEY_MAP_RESOLUTION))?;
        let template_crc = u32::from_str_radix(m.text(KEY_TEMPLATE_CRC)?, 16).map_err(|_| bad(KEY_TEMPLATE_CRC))?;
        Ok(SceneInfo {
            camera,
            frames,
            map_resolution,
            template_crc,
        })
    }

    /// Fails unless `template` is the one the stream was encoded against.
    pub fn check_template(&self, template: &SkinnedTemplate) -> Result<()> {
        let crc = crc32fast::hash(&template.to_bytes()?);
        if crc != self.template_crc {
            return Err(Error::invalid(format!(
                "template crc {crc:08x} does not match the stream's {:08x}",
                self.template_crc
            )));
        }
        Ok(())
    }
}

/// Parses `HxW`.
pub fn parse_resolution(s: &str) -> Option<(usize, usize)> {
    let (h, w) = s.split_once('x')?;
    let (h, w) = (h.trim().parse().ok()?, w.trim().parse().ok()?);
    (h > 0 && w > 0).then_some((h, w))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodeConfig {
    /// Weight bit width; `None` stores full-precision weights.
    pub bit_width: Option<u8>,
    /// Pose-map quantization step.
    pub q: f32,
    pub smplx: bool,
    pub pose_maps: bool,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        EncodeConfig {
            bit_width: Some(8),
            q: 1.0 / 255.0,
            smplx: true,
            pose_maps: true,
        }
    }
}

/// Everything the encoder consumes.
#[derive(Debug, Clone, Copy)]
pub struct AvatarSource<'a> {
    pub weights: &'a GeneratorWeights,
    pub template: &'a SkinnedTemplate,
    pub camera: &'a Camera,
    pub poses: &'a [SmplxPose],
    pub pose_maps: &'a [PoseMapPair],
}

impl<'a> From<&'a SyntheticScene> for AvatarSource<'a> {
    fn from(s: &'a SyntheticScene) -> Self {
        AvatarSource {
            weights: &s.weights,
            template: &s.template,
            camera: &s.camera,
            poses: &s.poses,
            pose_maps: &s.pose_maps,
        }
    }
}

pub fn structural_section(weights: &GeneratorWeights, bit_width: Option<u8>) -> Result<Section> {
    Ok(match bit_width {
        Some(q) => Section {
            layer: Layer::Structural,
            codec: Codec::QuantizedWeights,
            payload: quantize_network(weights, &QuantConfig::new(q)?)?.0.to_bytes()?,
        },
        None => Section {
            layer: Layer::Structural,
            codec: Codec::RawWeights,
            payload: weights.to_bytes()?,
        },
    })
}

pub fn smplx_section(poses: &[SmplxPose]) -> Result<Section> {
    Ok(Section {
        layer: Layer::Smplx,
        codec: Codec::Smplx,
        payload: encode_smplx(poses)?.to_bytes(),
    })
}

pub fn posemap_section(maps: &[PoseMapPair], q: f32) -> Result<Section> {
    Ok(Section {
        layer: Layer::PoseMap,
        codec: Codec::PoseMap,
        payload: encode_posemaps(maps, q)?.to_bytes(),
    })
}

fn frame_count(src: &AvatarSource<'_>) -> Result<usize> {
    if !src.pose_maps.is_empty() && !src.poses.is_empty() && src.pose_maps.len() != src.poses.len() {
        return Err(Error::invalid(format!(
            "{} poses but {} pose-map frames",
            src.poses.len(),
            src.pose_maps.len()
        )));
    }
    Ok(src.poses.len().max(src.pose_maps.len()))
}

/// Builds a complete container from its sources.
pub fn encode(src: &AvatarSource<'_>, cfg: &EncodeConfig) -> Result<Vec<u8>> {
    let frames = frame_count(src)?;
    let resolution = match src.pose_maps.first() {
        Some(m) => m.resolution(),
        None => crate::avatar_model::DEFAULT_POSE_MAP_RESOLUTION,
    };
    let info = SceneInfo::new(src.template, src.camera, frames, resolution)?;
    let mut sections = vec![
        structural_section(src.weights, cfg.bit_width)?,
        Section {
            layer: Layer::Metadata,
            codec: Codec::KeyValue,
            payload: info.to_metadata().to_bytes()?,
        },
    ];
    if cfg.smplx && !src.poses.is_empty() {
        sections.push(smplx_section(src.poses)?);
    }
    if cfg.pose_maps && !src.pose_maps.is_empty() {
        sections.push(posemap_section(src.pose_maps, cfg.q)?);
    }
    mux(&sections)
}

fn decode_weights(s: &Section) -> Result<GeneratorWeights> {
    match s.codec {
        Codec::RawWeights => GeneratorWeights::from_bytes(&s.payload),
        Codec::QuantizedWeights => QuantizedNetwork::from_bytes(&s.payload)?.dequantize(),
        c => Err(Error::decode(format!("structural layer with codec {c:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedAvatar {
    pub weights: GeneratorWeights,
    pub poses: Vec<SmplxPose>,
    pub pose_maps: Vec<PoseMapPair>,
    pub info: SceneInfo,
}

/// Decodes every layer. Motion sections may be absent; the structural and
/// metadata layers may not.
pub fn decode_all(bytes: &[u8]) -> Result<DecodedAvatar> {
    let sections = demux(bytes)?;
    let find = |l: Layer| sections.iter().find(|s| s.layer == l);
    let missing = |l: Layer| Error::decode(format!("container: no {} section", l.name()));
    let weights = decode_weights(find(Layer::Structural).ok_or_else(|| missing(Layer::Structural))?)?;
    let meta = Metadata::from_bytes(&find(Layer::Metadata).ok_or_else(|| missing(Layer::Metadata))?.payload)?;
    let poses = match find(Layer::Smplx) {
        Some(s) => decode_smplx(&SmplxStream::from_bytes(&s.payload)?)?,
        None => Vec::new(),
    };
    let pose_maps = match find(Layer::PoseMap) {
        Some(s) => decode_posemaps(&PoseMapStream::from_bytes(&s.payload)?)?,
        None => Vec::new(),
    };
    Ok(DecodedAvatar {
        weights,
        poses,
        pose_maps,
        info: SceneInfo::from_metadata(&meta)?,
    })
}

/// Reads only the structural and metadata sections.
pub fn decode_structural<R: Read + Seek>(reader: &mut ContainerReader<R>) -> Result<(GeneratorWeights, SceneInfo)> {
    let missing = |l: Layer| Error::decode(format!("container: no {} section", l.name()));
    let weights = decode_weights(&reader.section(Layer::Structural)?.ok_or_else(|| missing(Layer::Structural))?)?;
    let meta = reader.section(Layer::Metadata)?.ok_or_else(|| missing(Layer::Metadata))?;
    Ok((weights, SceneInfo::from_metadata(&Metadata::from_bytes(&meta.payload)?)?))
}

/// Progressive decode: renders the rest pose from the structural layer
/// without touching any motion section.
pub fn render_structural<R: Read + Seek>(reader: &mut ContainerReader<R>, template: &SkinnedTemplate) -> Result<SplatImage> {
    let (weights, info) = decode_structural(reader)?;
    info.check_template(template)?;
    pipeline::render_canonical(&weights, template, &info.camera, info.map_resolution)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerShare {
    pub layer: Layer,
    pub bytes: u64,
    pub percent: f64,
}

/// Per-layer payload sizes. Shares are of the payload total; the table
/// itself is reported separately.
#[derive(Debug, Clone, PartialEq)]
pub struct Composition {
    pub layers: Vec<LayerShare>,
    pub header_bytes: u64,
}

impl Composition {
    pub fn payload_bytes(&self) -> u64 {
        self.layers.iter().map(|l| l.bytes).sum()
    }

    pub fn share(&self, layer: Layer) -> Option<f64> {
        self.layers.iter().find(|l| l.layer == layer).map(|l| l.percent)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,bytes,percent\n");
        for l in &self.layers {
            s.push_str(&format!("{},{},{:.4}\n", l.layer.name(), l.bytes, l.percent));
        }
        s
    }
}

pub fn report_composition(bytes: &[u8]) -> Result<Composition> {
    let sections = demux(bytes)?;
    let total: u64 = sections.iter().map(|s| s.payload.len() as u64).sum();
    let layers = sections
        .iter()
        .map(|s| LayerShare {
            layer: s.layer,
            bytes: s.payload.len() as u64,
            percent: if total == 0 {
                100.0 / sections.len() as f64
            } else {
                100.0 * s.payload.len() as f64 / total as f64
            },
        })
        .collect();
    Ok(Composition {
        layers,
        header_bytes: header_len(sections.len()) as u64,
    })
}

/// One operating point of [`rd_sweep`]. PSNR and SSIM are means over the
/// scene's frames.
#[derive(Debug, Clone, PartialEq)]
pub struct RdPoint {
    pub bit_width: u8,
    pub q: f32,
    pub total_bytes: u64,
    pub bytes_per_frame: f64,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn rd_csv(points: &[RdPoint]) -> String {
    let mut s = String::from("bit_width,q,total_bytes,bytes_per_frame,psnr_db,ssim\n");
    for p in points {
        s.push_str(&format!(
            "{},{:.6},{},{:.1},{:.4},{:.6}\n",
            p.bit_width, p.q, p.total_bytes, p.bytes_per_frame, p.psnr, p.ssim
        ));
    }
    s
}

/// Encodes `scene` at every `(Q, q)` pair, decodes, renders each frame with
/// the decoded weights and pose maps and scores it against the
/// uncompressed render. Rows come back in `bit_widths × steps` order.
pub fn rd_sweep(scene: &SyntheticScene, bit_widths: &[u8], steps: &[f32]) -> Result<Vec<RdPoint>> {
    if bit_widths.is_empty() || steps.is_empty() {
        return Err(Error::invalid("rd sweep needs at least one bit width and one step"));
    }
    for &q in steps {
        crate::posemap_codec::check_step(q)?;
    }
    let reference: Vec<SplatImage> = (0..scene.poses.len())
        .into_par_iter()
        .map(|i| scene.render(i))
        .collect::<Result<_>>()?;
    let weight_sections: Vec<Section> = bit_widths
        .par_iter()
        .map(|&b| structural_section(&scene.weights, Some(b)))
        .collect::<Result<_>>()?;
    let map_sections: Vec<Section> = steps
        .par_iter()
        .map(|&q| posemap_section(&scene.pose_maps, q))
        .collect::<Result<_>>()?;
    let info = SceneInfo::new(&scene.template, &scene.camera, scene.poses.len(), scene.config.map_resolution)?;
    let meta = Section {
        layer: Layer::Metadata,
        codec: Codec::KeyValue,
        payload: info.to_metadata().to_bytes()?,
    };
    let smplx = smplx_section(&scene.poses)?;

    let grid: Vec<(usize, usize)> = (0..bit_widths.len())
        .flat_map(|b| (0..steps.len()).map(move |s| (b, s)))
        .collect();
    grid.par_iter()
        .map(|&(b, s)| {
            let file = mux(&[
                weight_sections[b].clone(),
                smplx.clone(),
                map_sections[s].clone(),
                meta.clone(),
            ])?;
            let decoded = decode_all(&file)?;
            let mut psnr_sum = 0.0;
            let mut ssim_sum = 0.0;
            for (i, r) in reference.iter().enumerate() {
                let img = pipeline::render_frame(
                    &decoded.weights,
                    &scene.template,
                    &decoded.pose_maps[i],
                    &decoded.poses[i],
                    &decoded.info.camera,
                )?;
                psnr_sum += psnr(&img.color, &r.color, 1.0)?;
                ssim_sum += ssim(&img.color, &r.color)?;
            }
            let n = reference.len() as f64;
            Ok(RdPoint {
                bit_width: bit_widths[b],
                q: steps[s],
                total_bytes: file.len() as u64,
                bytes_per_frame: file.len() as f64 / n,
                psnr: psnr_sum / n,
                ssim: ssim_sum / n,
            })
        })
        .collect()
}

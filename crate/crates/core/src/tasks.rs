//! Downstream drivers: reconstruction, completion, upsampling, trace export
//! and the visible-patch compression codec.
//!
//! Output sizes, with `n_v`/`n_m` visible/masked patches and `f` the
//! upsampling factor:
//!
//! | task                          | points                    |
//! |-------------------------------|---------------------------|
//! | reconstruct, masked-only head | `(n_v + n_m·f)·group_size` |
//! | reconstruct, full head        | `G·group_size·f`          |
//! | complete, decompress          | `(n_v + n_m·f)·group_size` |
//! | upsample                      | `G·group_size·f`          |

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data_io::{save_cloud, CloudFormat};
use crate::diffusion::{sample, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::geometry::{add, apply_mask, segment, sub, MaskSpec, Point, PointCloud};
use crate::model::{anchor, decode_output, Denoiser, DecoderOutput, LatentSet, ModelConfig, VisibleEncoder};

pub const DEFAULT_VISIBLE_FRACTION: f64 = 0.4;

/// Splits one user seed into independent mask and noise seeds.
pub fn split_seed(seed: u64) -> (u64, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (rng.next_u64(), rng.next_u64())
}

/// Reverse diffusion from Gaussian noise of the predicted arity.
pub fn sample_latent<D: Denoiser + ?Sized>(
    decoder: &D,
    latent: &LatentSet,
    schedule: &NoiseSchedule,
    rng_seed: u64,
    trace: bool,
) -> Result<(DecoderOutput, Option<Vec<DecoderOutput>>)> {
    let cfg = decoder.config();
    if schedule.steps() != cfg.timesteps {
        return invalid(format!(
            "schedule has {} steps but the decoder was built for {}",
            schedule.steps(),
            cfg.timesteps
        ));
    }
    let n = cfg.predicted_patches(&latent.mask) * cfg.points_per_prediction();
    let out = sample(|x, t| decoder.denoise(latent, x, t), n, schedule, rng_seed, trace)?;
    let frames = out
        .trace
        .map(|fs| fs.into_iter().map(|f| decode_output(cfg, &latent.mask, f)).collect());
    Ok((decode_output(cfg, &latent.mask, out.points), frames))
}

/// Concatenates patches in ascending patch order. Predicted patches are
/// placed at their anchors; patches without a prediction come from `kept`
/// (absolute points, indexed by patch).
pub fn assemble_prediction(
    cfg: &ModelConfig,
    mask: &MaskSpec,
    centers: &[Point],
    kept: &[Option<Vec<Point>>],
    pred: &DecoderOutput,
    keep_visible: bool,
) -> Result<Vec<Point>> {
    let g = mask.num_groups();
    let mut slot: Vec<Option<&Vec<Point>>> = vec![None; g];
    for (patch, &i) in pred.patches.iter().zip(&pred.patch_indices) {
        if !(keep_visible && !mask.indicator[i]) {
            slot[i] = Some(patch);
        }
    }
    let mut out = Vec::new();
    for i in 0..g {
        match (slot[i], &kept[i]) {
            (Some(p), _) => {
                let a = anchor(cfg, mask, centers, i);
                out.extend(p.iter().map(|q| add(q, &a)));
            }
            (None, Some(k)) => out.extend_from_slice(k),
            (None, None) => return invalid(format!("patch {i} has neither a prediction nor kept points")),
        }
    }
    Ok(out)
}

fn check_pair<E: VisibleEncoder + ?Sized, D: Denoiser + ?Sized>(enc: &E, dec: &D) -> Result<()> {
    let (a, b) = (enc.config(), dec.config());
    if a.num_groups != b.num_groups || a.group_size != b.group_size || a.latent_width != b.latent_width {
        return invalid("encoder and decoder configurations disagree on groups or latent width");
    }
    if a.use_position_embedding != b.use_position_embedding {
        return invalid("encoder and decoder disagree on use_position_embedding");
    }
    Ok(())
}

/// Result of a reconstruction, with the assembled chain when traced.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub cloud: PointCloud,
    pub mask: MaskSpec,
    pub frames: Option<Vec<Vec<Point>>>,
}

/// Segment, mask, encode the visible patches and sample the rest.
pub fn reconstruct<E, D>(cloud: &PointCloud, encoder: &E, decoder: &D, schedule: &NoiseSchedule, seed: u64) -> Result<PointCloud>
where
    E: VisibleEncoder + ?Sized,
    D: Denoiser + ?Sized,
{
    Ok(reconstruct_traced(cloud, encoder, decoder, schedule, seed, false)?.cloud)
}

pub fn reconstruct_traced<E, D>(
    cloud: &PointCloud,
    encoder: &E,
    decoder: &D,
    schedule: &NoiseSchedule,
    seed: u64,
    trace: bool,
) -> Result<Reconstruction>
where
    E: VisibleEncoder + ?Sized,
    D: Denoiser + ?Sized,
{
    check_pair(encoder, decoder)?;
    let cfg = decoder.config();
    let (mask_seed, noise_seed) = split_seed(seed);
    let ps = segment(cloud, cfg.num_groups, cfg.group_size)?;
    let mask = apply_mask(&ps.centers, cfg.mask_ratio, cfg.mask_strategy, mask_seed)?;
    let vis: Vec<Vec<Point>> = mask.visible_indices().iter().map(|&i| ps.patches[i].clone()).collect();
    let latent = encoder.encode_patches(&vis, &ps.centers, &mask)?;
    let kept: Vec<Option<Vec<Point>>> = (0..ps.num_groups())
        .map(|i| {
            (!mask.indicator[i]).then(|| ps.patches[i].iter().map(|q| add(q, &ps.centers[i])).collect())
        })
        .collect();
    let (pred, frames) = sample_latent(decoder, &latent, schedule, noise_seed, trace)?;
    let points = assemble_prediction(cfg, &mask, &ps.centers, &kept, &pred, false)?;
    let frames = frames
        .map(|fs| {
            fs.iter()
                .map(|f| assemble_prediction(cfg, &mask, &ps.centers, &kept, f, false))
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    Ok(Reconstruction {
        cloud: PointCloud::new(points)?,
        mask,
        frames,
    })
}

/// Writes one ASCII PLY per frame, `step_0000.ply` onwards.
pub fn export_trace(frames: &[Vec<Point>], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (k, f) in frames.iter().enumerate() {
        save_cloud(f, &dir.join(format!("step_{k:04}.ply")), CloudFormat::AsciiPly)?;
    }
    Ok(())
}

/// Completes a partial cloud whose every patch is treated as visible.
///
/// With position embeddings the masked-patch centers must be supplied as
/// side information; without them the masked tokens carry no position and
/// their patches are predicted in absolute coordinates.
pub fn complete<E, D>(
    partial: &PointCloud,
    masked_centers: Option<&[Point]>,
    encoder: &E,
    decoder: &D,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<PointCloud>
where
    E: VisibleEncoder + ?Sized,
    D: Denoiser + ?Sized,
{
    check_pair(encoder, decoder)?;
    let cfg = decoder.config();
    cfg.validate()?;
    let (n_v, n_m, gs) = (cfg.num_visible(), cfg.num_masked(), cfg.group_size);
    if partial.len() % gs != 0 || partial.len() / gs != n_v {
        return invalid(format!(
            "partial cloud has {} points; expected {n_v} visible patches of {gs} = {}",
            partial.len(),
            n_v * gs
        ));
    }
    let extra: Vec<Point> = if cfg.use_position_embedding {
        let c = masked_centers
            .ok_or_else(|| Error::InvalidArgument("completion with position embedding needs masked centers".into()))?;
        if c.len() != n_m {
            return invalid(format!("{} masked centers supplied, expected {n_m}", c.len()));
        }
        c.to_vec()
    } else {
        vec![[0.0; 3]; n_m]
    };
    let ps = segment(partial, n_v, gs)?;
    let mut centers = ps.centers.clone();
    centers.extend(extra);
    let mask = MaskSpec {
        indicator: (0..cfg.num_groups).map(|i| i >= n_v).collect(),
        ratio: cfg.mask_ratio,
        strategy: cfg.mask_strategy,
    };
    let latent = encoder.encode_patches(&ps.patches, &centers, &mask)?;
    let kept: Vec<Option<Vec<Point>>> = (0..cfg.num_groups)
        .map(|i| (i < n_v).then(|| ps.patches[i].iter().map(|q| add(q, &centers[i])).collect()))
        .collect();
    let (_, noise_seed) = split_seed(seed);
    let (pred, _) = sample_latent(decoder, &latent, schedule, noise_seed, false)?;
    PointCloud::new(assemble_prediction(cfg, &mask, &centers, &kept, &pred, true)?)
}

/// Encodes a visible subset and samples every patch at the decoder's density.
pub fn upsample<E, D>(
    cloud: &PointCloud,
    encoder: &E,
    decoder: &D,
    schedule: &NoiseSchedule,
    visible_fraction: f64,
    seed: u64,
) -> Result<PointCloud>
where
    E: VisibleEncoder + ?Sized,
    D: Denoiser + ?Sized,
{
    check_pair(encoder, decoder)?;
    let cfg = decoder.config();
    if !cfg.predict_visible {
        return invalid("upsampling needs a decoder that predicts visible patches (predict_visible = true)");
    }
    let (mask_seed, noise_seed) = split_seed(seed);
    let ps = segment(cloud, cfg.num_groups, cfg.group_size)?;
    let mask = apply_mask(&ps.centers, 1.0 - visible_fraction, cfg.mask_strategy, mask_seed)?;
    let vis: Vec<Vec<Point>> = mask.visible_indices().iter().map(|&i| ps.patches[i].clone()).collect();
    let latent = encoder.encode_patches(&vis, &ps.centers, &mask)?;
    let (pred, _) = sample_latent(decoder, &latent, schedule, noise_seed, false)?;
    let kept = vec![None; cfg.num_groups];
    PointCloud::new(assemble_prediction(cfg, &mask, &ps.centers, &kept, &pred, false)?)
}

// ---------------------------------------------------------------------------
// Compression codec

pub const BLOB_MAGIC: &[u8; 4] = b"DPC1";
pub const BLOB_VERSION: u8 = 1;
pub const BLOB_DIGEST_LEN: usize = 8;
pub const MIN_QUANT_BITS: u8 = 6;
pub const MAX_QUANT_BITS: u8 = 16;

/// Visible points and all centers, uniformly quantized over their bounding box.
///
/// Byte layout (little-endian): `"DPC1"`, version `u8`, `G` `u16`,
/// group size `u16`, `q` `u8`, box min then max as 6 `f64`, the mask as
/// `G` bits (LSB first, padded to a byte), the bit-packed payload (visible
/// points in ascending patch order, then all centers; `q` bits per
/// coordinate, LSB first, padded to a byte) and the first 8 bytes of the
/// SHA-256 of everything before.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedBlob {
    pub num_groups: u16,
    pub group_size: u16,
    pub quant_bits: u8,
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
    pub mask: Vec<bool>,
    pub visible: Vec<[u32; 3]>,
    pub centers: Vec<[u32; 3]>,
}

fn quantize(x: f64, min: f64, max: f64, q: u8) -> u32 {
    let levels = 1u64 << q;
    let extent = max - min;
    if extent <= 0.0 {
        return 0;
    }
    let l = ((x - min) / extent * levels as f64).floor();
    l.clamp(0.0, (levels - 1) as f64) as u32
}

fn dequantize(level: u32, min: f64, max: f64, q: u8) -> f64 {
    let extent = max - min;
    if extent <= 0.0 {
        return min;
    }
    min + (level as f64 + 0.5) * extent / (1u64 << q) as f64
}

struct BitWriter {
    bytes: Vec<u8>,
    bit: usize,
}

impl BitWriter {
    fn push(&mut self, value: u32, width: u8) {
        for k in 0..width {
            if self.bit % 8 == 0 {
                self.bytes.push(0);
            }
            if (value >> k) & 1 == 1 {
                *self.bytes.last_mut().expect("pushed") |= 1 << (self.bit % 8);
            }
            self.bit += 1;
        }
    }
}

fn read_bits(bytes: &[u8], start_bit: usize, width: u8) -> u32 {
    let mut v = 0u32;
    for k in 0..width as usize {
        let b = start_bit + k;
        if (bytes[b / 8] >> (b % 8)) & 1 == 1 {
            v |= 1 << k;
        }
    }
    v
}

impl CompressedBlob {
    pub fn header_len(&self) -> usize {
        4 + 1 + 2 + 2 + 1 + 48 + self.mask.len().div_ceil(8)
    }

    pub fn payload_bits(&self) -> usize {
        (self.visible.len() + self.centers.len()) * 3 * self.quant_bits as usize
    }

    pub fn num_visible_points(&self) -> usize {
        self.visible.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.header_len() + self.payload_bits().div_ceil(8) + BLOB_DIGEST_LEN);
        out.extend_from_slice(BLOB_MAGIC);
        out.push(BLOB_VERSION);
        out.extend_from_slice(&self.num_groups.to_le_bytes());
        out.extend_from_slice(&self.group_size.to_le_bytes());
        out.push(self.quant_bits);
        for v in self.bbox_min.iter().chain(&self.bbox_max) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut mask = BitWriter { bytes: Vec::new(), bit: 0 };
        for &m in &self.mask {
            mask.push(m as u32, 1);
        }
        out.extend_from_slice(&mask.bytes);
        let mut payload = BitWriter { bytes: Vec::new(), bit: 0 };
        for p in self.visible.iter().chain(&self.centers) {
            for &c in p {
                payload.push(c, self.quant_bits);
            }
        }
        out.extend_from_slice(&payload.bytes);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest[..BLOB_DIGEST_LEN]);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptBlob(m.to_string());
        if bytes.len() < 58 + BLOB_DIGEST_LEN || &bytes[..4] != BLOB_MAGIC {
            return Err(corrupt("missing DPC1 header"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - BLOB_DIGEST_LEN);
        if &Sha256::digest(body)[..BLOB_DIGEST_LEN] != digest {
            return Err(corrupt("digest mismatch"));
        }
        if body[4] != BLOB_VERSION {
            return Err(corrupt(&format!("unsupported blob version {}", body[4])));
        }
        let num_groups = u16::from_le_bytes([body[5], body[6]]);
        let group_size = u16::from_le_bytes([body[7], body[8]]);
        let quant_bits = body[9];
        if !(MIN_QUANT_BITS..=MAX_QUANT_BITS).contains(&quant_bits) {
            return Err(corrupt(&format!("quantization bits {quant_bits} out of range")));
        }
        let f = |i: usize| f64::from_le_bytes(body[10 + 8 * i..18 + 8 * i].try_into().expect("8 bytes"));
        let bbox_min = [f(0), f(1), f(2)];
        let bbox_max = [f(3), f(4), f(5)];
        let g = num_groups as usize;
        let mask_bytes = g.div_ceil(8);
        let mut pos = 58;
        if body.len() < pos + mask_bytes {
            return Err(corrupt("truncated mask"));
        }
        let mask: Vec<bool> = (0..g).map(|i| read_bits(&body[pos..], i, 1) == 1).collect();
        pos += mask_bytes;
        let n_vis_pts = mask.iter().filter(|&&m| !m).count() * group_size as usize;
        let n_coords = (n_vis_pts + g) * 3;
        let payload = &body[pos..];
        if payload.len() != (n_coords * quant_bits as usize).div_ceil(8) {
            return Err(corrupt("payload length does not match header"));
        }
        let mut coords = (0..n_coords).map(|k| read_bits(payload, k * quant_bits as usize, quant_bits));
        let mut take = |n: usize| -> Vec<[u32; 3]> {
            (0..n)
                .map(|_| {
                    let mut c = [0u32; 3];
                    for v in &mut c {
                        *v = coords.next().expect("length checked");
                    }
                    c
                })
                .collect()
        };
        let visible = take(n_vis_pts);
        let centers = take(g);
        Ok(Self {
            num_groups,
            group_size,
            quant_bits,
            bbox_min,
            bbox_max,
            mask,
            visible,
            centers,
        })
    }

    pub fn dequantized_visible(&self) -> Vec<Point> {
        self.visible.iter().map(|l| self.dequantize_point(l)).collect()
    }

    pub fn dequantized_centers(&self) -> Vec<Point> {
        self.centers.iter().map(|l| self.dequantize_point(l)).collect()
    }

    fn dequantize_point(&self, l: &[u32; 3]) -> Point {
        std::array::from_fn(|k| dequantize(l[k], self.bbox_min[k], self.bbox_max[k], self.quant_bits))
    }
}

/// Segments and masks `cloud`, then quantizes the visible points and all
/// centers. No latent tokens are stored.
pub fn compress(cloud: &PointCloud, cfg: &ModelConfig, mask_seed: u64, quant_bits: u8) -> Result<CompressedBlob> {
    if !(MIN_QUANT_BITS..=MAX_QUANT_BITS).contains(&quant_bits) {
        return invalid(format!(
            "quantization bits {quant_bits} outside [{MIN_QUANT_BITS}, {MAX_QUANT_BITS}]"
        ));
    }
    if cfg.num_groups > u16::MAX as usize || cfg.group_size > u16::MAX as usize {
        return invalid("group counts exceed the blob header range");
    }
    let ps = segment(cloud, cfg.num_groups, cfg.group_size)?;
    let mask = apply_mask(&ps.centers, cfg.mask_ratio, cfg.mask_strategy, mask_seed)?;
    let vis_pts: Vec<Point> = mask
        .visible_indices()
        .iter()
        .flat_map(|&i| ps.patches[i].iter().map(|q| add(q, &ps.centers[i])).collect::<Vec<_>>())
        .collect();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in vis_pts.iter().chain(&ps.centers) {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let q = |p: &Point| -> [u32; 3] { std::array::from_fn(|k| quantize(p[k], lo[k], hi[k], quant_bits)) };
    Ok(CompressedBlob {
        num_groups: cfg.num_groups as u16,
        group_size: cfg.group_size as u16,
        quant_bits,
        bbox_min: lo,
        bbox_max: hi,
        mask: mask.indicator,
        visible: vis_pts.iter().map(q).collect(),
        centers: ps.centers.iter().map(q).collect(),
    })
}

/// Rebuilds a full cloud from a blob: dequantize, re-encode the visible
/// patches, sample the masked ones.
pub fn decompress<E, D>(blob: &CompressedBlob, encoder: &E, decoder: &D, schedule: &NoiseSchedule, seed: u64) -> Result<PointCloud>
where
    E: VisibleEncoder + ?Sized,
    D: Denoiser + ?Sized,
{
    check_pair(encoder, decoder)?;
    let cfg = decoder.config();
    if blob.num_groups as usize != cfg.num_groups || blob.group_size as usize != cfg.group_size {
        return invalid(format!(
            "blob has G={} group_size={}, model expects G={} group_size={}",
            blob.num_groups, blob.group_size, cfg.num_groups, cfg.group_size
        ));
    }
    if blob.mask.len() != cfg.num_groups {
        return invalid(format!("blob mask has {} entries for {} groups", blob.mask.len(), cfg.num_groups));
    }
    let masked = blob.mask.iter().filter(|&&m| m).count();
    if masked != cfg.num_masked() {
        return invalid(format!(
            "blob masks {masked} patches but ratio {} implies {}",
            cfg.mask_ratio,
            cfg.num_masked()
        ));
    }
    let gs = cfg.group_size;
    if blob.visible.len() != (cfg.num_groups - masked) * gs || blob.centers.len() != cfg.num_groups {
        return invalid("blob payload does not match its mask");
    }
    let centers = blob.dequantized_centers();
    let vis_abs = blob.dequantized_visible();
    let mask = MaskSpec {
        indicator: blob.mask.clone(),
        ratio: cfg.mask_ratio,
        strategy: cfg.mask_strategy,
    };
    let mut kept = vec![None; cfg.num_groups];
    let mut vis_rel = Vec::with_capacity(mask.num_visible());
    for (chunk, i) in vis_abs.chunks(gs).zip(mask.visible_indices()) {
        vis_rel.push(chunk.iter().map(|q| sub(q, &centers[i])).collect::<Vec<_>>());
        kept[i] = Some(chunk.to_vec());
    }
    let latent = encoder.encode_patches(&vis_rel, &centers, &mask)?;
    let (_, noise_seed) = split_seed(seed);
    let (pred, _) = sample_latent(decoder, &latent, schedule, noise_seed, false)?;
    PointCloud::new(assemble_prediction(cfg, &mask, &centers, &kept, &pred, true)?)
}

pub fn decompress_bytes<E, D>(bytes: &[u8], encoder: &E, decoder: &D, schedule: &NoiseSchedule, seed: u64) -> Result<PointCloud>
where
    E: VisibleEncoder + ?Sized,
    D: Denoiser + ?Sized,
{
    decompress(&CompressedBlob::from_bytes(bytes)?, encoder, decoder, schedule, seed)
}

/// Bits of the serialized blob per original input point.
pub fn bpp(blob: &CompressedBlob, original_point_count: usize) -> Result<f64> {
    if original_point_count == 0 {
        return invalid("bpp needs a positive point count");
    }
    Ok((blob.to_bytes().len() * 8) as f64 / original_point_count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{synth_shape, ShapeKind};

    #[test]
    fn quantizer_bound_and_degenerate_extent() {
        for q in [6u8, 10, 16] {
            for i in 0..1000 {
                let x = -0.3 + 0.8 * i as f64 / 999.0;
                let back = dequantize(quantize(x, -0.3, 0.5, q), -0.3, 0.5, q);
                assert!((back - x).abs() <= 0.8 / (1u64 << (q + 1)) as f64 + 1e-15);
            }
        }
        assert_eq!(dequantize(quantize(0.2, 0.2, 0.2, 8), 0.2, 0.2, 8), 0.2);
    }

    #[test]
    fn bit_packing_round_trips() {
        let mut w = BitWriter { bytes: Vec::new(), bit: 0 };
        let vals = [0u32, 1, 1023, 512, 77, 1000];
        for &v in &vals {
            w.push(v, 10);
        }
        assert_eq!(w.bytes.len(), 8);
        for (k, &v) in vals.iter().enumerate() {
            assert_eq!(read_bits(&w.bytes, k * 10, 10), v);
        }
    }

    #[test]
    fn blob_round_trip_and_digest() {
        let cfg = ModelConfig {
            num_groups: 16,
            group_size: 32,
            ..ModelConfig::default()
        };
        let cloud = synth_shape(ShapeKind::Torus, 512, 0.0, 2).unwrap();
        let blob = compress(&cloud, &cfg, 3, 10).unwrap();
        let bytes = blob.to_bytes();
        assert_eq!(CompressedBlob::from_bytes(&bytes).unwrap(), blob);
        let mut bad = bytes.clone();
        bad[20] ^= 4;
        assert!(matches!(CompressedBlob::from_bytes(&bad), Err(Error::CorruptBlob(_))));
        assert!(compress(&cloud, &cfg, 3, 5).is_err());
        assert!(compress(&cloud, &cfg, 3, 17).is_err());
    }
}

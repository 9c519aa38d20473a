//! IDX and CIFAR binary readers, and dataset assembly from a [`DatasetSource`].

use std::path::Path;

use icon_peft_core::backbone::ViTConfig;
use icon_peft_core::train::{Dataset, SynthSpec};

use crate::config::{DatasetSource, Normalization, PretrainConfig};
use crate::error::{CliError, CliResult};

const IDX_U8: u8 = 0x08;
const CIFAR_PIXELS: usize = 3 * 32 * 32;

fn data_err(msg: String) -> CliError {
    CliError::Core(icon_peft_core::Error::Data(msg))
}

fn read(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| data_err(format!("cannot read {}: {e}", path.display())))
}

/// Extents and payload of an unsigned-byte IDX buffer.
pub fn parse_idx(bytes: &[u8]) -> CliResult<(Vec<usize>, &[u8])> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(data_err("not an IDX file: bad magic".into()));
    }
    if bytes[2] != IDX_U8 {
        return Err(data_err(format!("IDX element type 0x{:02x} is not supported (only unsigned bytes)", bytes[2])));
    }
    let ndims = bytes[3] as usize;
    let header = 4 + 4 * ndims;
    if ndims == 0 || bytes.len() < header {
        return Err(data_err("IDX header is truncated".into()));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let n: usize = dims.iter().product();
    let body = &bytes[header..];
    if body.len() != n {
        return Err(data_err(format!("IDX extents {dims:?} need {n} bytes, found {}", body.len())));
    }
    Ok((dims, body))
}

/// Serializes an unsigned-byte IDX buffer.
pub fn encode_idx(dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, IDX_U8, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

/// Reads an image file (`[N, H, W]` or channel-last `[N, H, W, C]`) and a label
/// file (`[N]`) into channel-major pixels in `[0, 1]`.
pub fn read_idx_pair(images: &Path, labels: &Path, classes: usize) -> CliResult<Dataset> {
    let img_bytes = read(images)?;
    let (dims, px) = parse_idx(&img_bytes)?;
    let (n, h, w, c) = match dims.as_slice() {
        [n, h, w] => (*n, *h, *w, 1),
        [n, h, w, c] => (*n, *h, *w, *c),
        _ => return Err(data_err(format!("{}: image extents {dims:?} are not [N, H, W(, C)]", images.display()))),
    };
    if h != w {
        return Err(data_err(format!("{}: images must be square, got {h}x{w}", images.display())));
    }
    let lbl_bytes = read(labels)?;
    let (ldims, lb) = parse_idx(&lbl_bytes)?;
    if ldims != [n] {
        return Err(data_err(format!("{}: {ldims:?} labels for {n} images", labels.display())));
    }
    let mut pixels = Vec::with_capacity(px.len());
    for img in px.chunks_exact(h * w * c) {
        for ch in 0..c {
            pixels.extend((0..h * w).map(|i| img[i * c + ch] as f32 / 255.0));
        }
    }
    Ok(Dataset::new(c, h, classes, pixels, lb.iter().map(|&l| l as usize).collect())?)
}

/// Reads CIFAR binary records (`label_bytes` label bytes, then 3072
/// channel-major pixels); the last label byte is the class.
pub fn read_cifar(paths: &[impl AsRef<Path>], label_bytes: usize, classes: usize) -> CliResult<Dataset> {
    let record = label_bytes + CIFAR_PIXELS;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = read(path)?;
        if bytes.len() % record != 0 {
            return Err(data_err(format!(
                "{}: {} bytes is not a whole number of {record}-byte records",
                path.display(),
                bytes.len()
            )));
        }
        for r in bytes.chunks_exact(record) {
            labels.push(r[label_bytes - 1] as usize);
            pixels.extend(r[label_bytes..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    Ok(Dataset::new(3, 32, classes, pixels, labels)?)
}

fn check_geometry(ds: &Dataset, model: &ViTConfig) -> CliResult<()> {
    if ds.channels != model.in_channels || ds.size != model.image_size {
        return Err(CliError::Config(format!(
            "dataset images are {}x{}x{} but the model expects {}x{}x{}",
            ds.channels, ds.size, ds.size, model.in_channels, model.image_size, model.image_size
        )));
    }
    Ok(())
}

fn normalize(ds: &mut Dataset, norm: &Normalization) -> CliResult<()> {
    let (mean, std) = norm.per_channel(ds.channels)?;
    ds.normalize(&mean, &std)?;
    Ok(())
}

/// One patch per motif cell when the scaled motif fits, so stroke orientation
/// lives in the arrangement of tokens rather than inside any one of them.
fn motif_scale(model: &ViTConfig) -> usize {
    if 3 * model.patch_size <= model.image_size {
        model.patch_size
    } else {
        1
    }
}

fn synth_spec(model: &ViTConfig) -> SynthSpec {
    SynthSpec {
        size: model.image_size,
        channels: model.in_channels,
        motif_scale: motif_scale(model),
        ..SynthSpec::target(model.num_classes)
    }
}

fn synth(spec: &SynthSpec, seed: u64, n: usize) -> CliResult<Dataset> {
    let mut ds = spec.generate(seed, n)?;
    normalize(&mut ds, &Normalization::default())?;
    Ok(ds)
}

/// Training split and optional evaluation split, normalized.
pub fn load(source: &DatasetSource, model: &ViTConfig, run_seed: u64) -> CliResult<(Dataset, Option<Dataset>)> {
    let (train, eval) = match source {
        DatasetSource::Synthetic { train, eval, seed } => {
            let s = seed.unwrap_or(run_seed);
            let spec = synth_spec(model);
            let tr = synth(&spec, s.wrapping_mul(2).wrapping_add(1), *train)?;
            let ev = (*eval > 0).then(|| synth(&spec, s.wrapping_mul(2).wrapping_add(2), *eval)).transpose()?;
            (tr, ev)
        }
        DatasetSource::IdxFiles {
            train_images,
            train_labels,
            eval_images,
            eval_labels,
            normalization,
        } => {
            let mut tr = read_idx_pair(train_images, train_labels, model.num_classes)?;
            normalize(&mut tr, normalization)?;
            let ev = match (eval_images, eval_labels) {
                (Some(i), Some(l)) => {
                    let mut ev = read_idx_pair(i, l, model.num_classes)?;
                    normalize(&mut ev, normalization)?;
                    Some(ev)
                }
                (None, None) => None,
                _ => return Err(CliError::Config("data.eval_images and data.eval_labels go together".into())),
            };
            (tr, ev)
        }
        DatasetSource::CifarBinary {
            train,
            eval,
            label_bytes,
            normalization,
        } => {
            let mut tr = read_cifar(train, *label_bytes, model.num_classes)?;
            normalize(&mut tr, normalization)?;
            let ev = if eval.is_empty() {
                None
            } else {
                let mut ev = read_cifar(eval, *label_bytes, model.num_classes)?;
                normalize(&mut ev, normalization)?;
                Some(ev)
            };
            (tr, ev)
        }
    };
    check_geometry(&train, model)?;
    if let Some(ev) = &eval {
        check_geometry(ev, model)?;
    }
    Ok((train, eval))
}

/// Per-channel constants applied to images from `source`.
pub fn normalization_of(source: &DatasetSource) -> Normalization {
    match source {
        DatasetSource::Synthetic { .. } => Normalization::default(),
        DatasetSource::IdxFiles { normalization, .. } | DatasetSource::CifarBinary { normalization, .. } => {
            normalization.clone()
        }
    }
}

/// Wraps one channel-major image as a normalized single-sample dataset.
pub fn single_image(pixels: Vec<f32>, channels: usize, size: usize, model: &ViTConfig, norm: &Normalization) -> CliResult<Dataset> {
    let mut ds = Dataset::new(channels, size, model.num_classes, pixels, vec![0])?;
    check_geometry(&ds, model)?;
    normalize(&mut ds, norm)?;
    Ok(ds)
}

/// Source-task data for backbone pretraining: same bands, axis-aligned motifs.
pub fn pretrain_set(model: &ViTConfig, cfg: &PretrainConfig) -> CliResult<Dataset> {
    let spec = SynthSpec {
        size: model.image_size,
        channels: model.in_channels,
        motif_scale: motif_scale(model),
        ..SynthSpec::source(model.num_classes)
    };
    synth(&spec, cfg.seed, cfg.samples)
}

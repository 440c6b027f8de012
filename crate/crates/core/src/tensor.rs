//! Conversions between layer sets and latent tensors, and seeded noise.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::layerspace::{LayerMask, LayerSet, Planar3};

/// `N(0, 1)` tensor drawn from an explicit rng stream.
pub fn randn<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}

/// Stacks a layer set into `(L, 6, H, W)`: image channels, then the mask
/// mapped to `[-1, 1]` and replicated three times. Background first.
pub fn layer_set_to_latent(set: &LayerSet, dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = set.dims();
    let mut data = Vec::with_capacity(set.num_layers() * 6 * h * w);
    for (img, mask) in set.images().into_iter().zip(set.masks()) {
        data.extend_from_slice(img.data());
        let signed = mask.to_signed();
        for _ in 0..3 {
            data.extend_from_slice(&signed);
        }
    }
    Ok(Tensor::from_vec(data, (set.num_layers(), 6, h, w), device)?.to_dtype(dtype)?)
}

/// Splits `(L, 6, H, W)` into per-layer images (clamped to `[-1, 1]`) and
/// soft masks (channel-averaged, mapped to `[0, 1]`).
pub fn latent_to_layers(latent: &Tensor) -> Result<(Vec<Planar3>, Vec<LayerMask>)> {
    let (l, c, h, w) = latent.dims4()?;
    if c != 6 {
        return Err(Error::Shape(format!("expected 6 latent channels, got {c}")));
    }
    let v = latent
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    let plane = h * w;
    let mut images = Vec::with_capacity(l);
    let mut masks = Vec::with_capacity(l);
    for i in 0..l {
        let base = i * 6 * plane;
        let img: Vec<f32> = v[base..base + 3 * plane]
            .iter()
            .map(|x| x.clamp(-1.0, 1.0))
            .collect();
        images.push(Planar3::new(h, w, img)?);
        masks.push(soft_mask_from_channels(&v[base + 3 * plane..base + 6 * plane], h, w)?);
    }
    Ok((images, masks))
}

/// Channel mean of three signed mask planes, mapped to `[0, 1]`.
pub fn soft_mask_from_channels(channels: &[f32], h: usize, w: usize) -> Result<LayerMask> {
    let plane = h * w;
    let mean: Vec<f32> = (0..plane)
        .map(|p| (channels[p] + channels[plane + p] + channels[2 * plane + p]) / 3.0)
        .collect();
    LayerMask::from_signed(h, w, &mean)
}

/// Per-layer soft mask score maps (`[0, 1]`, unclamped ordering preserved)
/// from an `(L, 6, H, W)` tensor of predicted clean data.
pub fn mask_scores(x0: &Tensor) -> Result<Vec<Vec<f32>>> {
    let (l, _, h, w) = x0.dims4()?;
    let m = x0
        .narrow(1, 3, 3)?
        .to_dtype(DType::F32)?
        .mean(1)?
        .affine(0.5, 0.5)?
        .reshape((l, h * w))?;
    Ok(m.to_vec2::<f32>()?)
}

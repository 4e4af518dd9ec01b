//! Convolutional autoencoder over object-level flow maps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{FlowMap, FLOW_CHANNELS, FLOW_PIXELS, FRAME_SIZE};
use crate::error::{Result, VadError};
use crate::nn::conv::{ConvCache, ConvTransposeCache};
use crate::nn::layers::{gelu, gelu_backward};
use crate::nn::{Conv2d, ConvGeom, ConvTranspose2d, Linear, ParamStore, Real};
use crate::objectives::squared_error_grad;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaeConfig {
    /// Encoder widths; the decoder mirrors them.
    pub channels: [usize; 3],
    pub latent: usize,
}

impl Default for CaeConfig {
    fn default() -> Self {
        Self { channels: [32, 64, 128], latent: 256 }
    }
}

impl CaeConfig {
    const BOTTOM: usize = FRAME_SIZE / 8;

    pub fn validate(&self) -> Result<()> {
        if self.channels.iter().any(|&c| c == 0) {
            return Err(VadError::Config("CAE channels must be positive".into()));
        }
        if self.latent == 0 || self.latent >= FLOW_PIXELS {
            return Err(VadError::Config(format!(
                "latent width {} must be in 1..{FLOW_PIXELS} to compress the flow",
                self.latent
            )));
        }
        Ok(())
    }

    fn feature_len(&self) -> usize {
        self.channels[2] * Self::BOTTOM * Self::BOTTOM
    }
}

#[derive(Clone, Debug)]
pub struct MotionCae<T> {
    pub config: CaeConfig,
    pub store: ParamStore<T>,
    enc: [Conv2d; 3],
    to_latent: Linear,
    from_latent: Linear,
    dec: [ConvTranspose2d; 3],
}

pub struct CaeCache<T> {
    input: Vec<T>,
    enc: Vec<(ConvCache<T>, Vec<T>)>,
    feat: Vec<T>,
    latent: Vec<T>,
    pre_unflat: Vec<T>,
    dec: Vec<(ConvTransposeCache<T>, Option<Vec<T>>)>,
}

/// `[c, h, w]` → `[h, w, c]` for a batch of flow maps.
fn chw_to_hwc<T: Real>(x: &[T], batch: usize) -> Vec<T> {
    let plane = FRAME_SIZE * FRAME_SIZE;
    let mut out = vec![T::zero(); x.len()];
    for n in 0..batch {
        for c in 0..FLOW_CHANNELS {
            for p in 0..plane {
                out[n * FLOW_PIXELS + p * FLOW_CHANNELS + c] = x[n * FLOW_PIXELS + c * plane + p];
            }
        }
    }
    out
}

fn hwc_to_chw<T: Real>(x: &[T], batch: usize) -> Vec<T> {
    let plane = FRAME_SIZE * FRAME_SIZE;
    let mut out = vec![T::zero(); x.len()];
    for n in 0..batch {
        for c in 0..FLOW_CHANNELS {
            for p in 0..plane {
                out[n * FLOW_PIXELS + c * plane + p] = x[n * FLOW_PIXELS + p * FLOW_CHANNELS + c];
            }
        }
    }
    out
}

impl<T: Real> MotionCae<T> {
    pub fn new(config: CaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let [c1, c2, c3] = config.channels;
        let s = FRAME_SIZE;
        let down = |big| ConvGeom::new(big, 3, 2, 1);
        let up = |big| ConvGeom::new(big, 4, 2, 1);
        let enc = [
            Conv2d::new(&mut store, "cae.enc.0", FLOW_CHANNELS, c1, down(s), rng),
            Conv2d::new(&mut store, "cae.enc.1", c1, c2, down(s / 2), rng),
            Conv2d::new(&mut store, "cae.enc.2", c2, c3, down(s / 4), rng),
        ];
        let feat = config.feature_len();
        let to_latent = Linear::new(&mut store, "cae.to_latent", feat, config.latent, rng);
        let from_latent = Linear::new(&mut store, "cae.from_latent", config.latent, feat, rng);
        let dec = [
            ConvTranspose2d::new(&mut store, "cae.dec.0", c3, c2, up(s / 4), rng),
            ConvTranspose2d::new(&mut store, "cae.dec.1", c2, c1, up(s / 2), rng),
            ConvTranspose2d::new(&mut store, "cae.dec.2", c1, FLOW_CHANNELS, up(s), rng),
        ];
        Ok(Self { config, store, enc, to_latent, from_latent, dec })
    }

    pub fn cast<U: Real>(&self) -> MotionCae<U> {
        MotionCae {
            config: self.config.clone(),
            store: self.store.cast(),
            enc: self.enc.clone(),
            to_latent: self.to_latent.clone(),
            from_latent: self.from_latent.clone(),
            dec: self.dec.clone(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    pub fn latent_len(&self) -> usize {
        self.config.latent
    }

    /// Reconstructs `B` channel-major flow maps (`B × 2 × 32 × 32`).
    pub fn forward_batch(&self, flows: &[T]) -> Result<Vec<T>> {
        self.run(flows, false).map(|(y, _)| y)
    }

    fn run(&self, flows: &[T], keep: bool) -> Result<(Vec<T>, Option<CaeCache<T>>)> {
        if flows.is_empty() || flows.len() % FLOW_PIXELS != 0 {
            return Err(VadError::Shape(format!("flow batch of {} values is not a multiple of {FLOW_PIXELS}", flows.len())));
        }
        if let Some(i) = flows.iter().position(|v| !v.is_finite()) {
            return Err(VadError::NonFinite(format!("flow input element {i}")));
        }
        let b = flows.len() / FLOW_PIXELS;
        let input = chw_to_hwc(flows, b);
        let mut h = input.clone();
        let mut enc_caches = Vec::with_capacity(3);
        for conv in &self.enc {
            let (pre, cache) = conv.forward(&self.store, &h, b);
            h = gelu(&pre);
            enc_caches.push((cache, pre));
        }
        let feat = h;
        let latent = self.to_latent.forward(&self.store, &feat, b);
        let pre_unflat = self.from_latent.forward(&self.store, &latent, b);
        let mut h = gelu(&pre_unflat);
        let mut dec_caches = Vec::with_capacity(3);
        for (i, deconv) in self.dec.iter().enumerate() {
            let (pre, cache) = deconv.forward(&self.store, &h, b);
            if i + 1 < self.dec.len() {
                h = gelu(&pre);
                dec_caches.push((cache, Some(pre)));
            } else {
                h = pre;
                dec_caches.push((cache, None));
            }
        }
        if let Some(i) = h.iter().position(|v| !v.is_finite()) {
            return Err(VadError::NonFinite(format!("reconstruction element {i}")));
        }
        let out = hwc_to_chw(&h, b);
        let cache = keep.then(|| CaeCache { input, enc: enc_caches, feat, latent, pre_unflat, dec: dec_caches });
        Ok((out, cache))
    }

    fn backward(&mut self, cache: &CaeCache<T>, d_out_chw: &[T], batch: usize) {
        let store = &mut self.store;
        let mut d = chw_to_hwc(d_out_chw, batch);
        for (i, deconv) in self.dec.iter().enumerate().rev() {
            let (c, pre) = &cache.dec[i];
            if let Some(pre) = pre {
                d = gelu_backward(pre, &d);
            }
            d = deconv.backward(store, c, &d, batch);
        }
        d = gelu_backward(&cache.pre_unflat, &d);
        d = self.from_latent.backward(store, &cache.latent, &d, batch, true).expect("dx");
        d = self.to_latent.backward(store, &cache.feat, &d, batch, true).expect("dx");
        for (i, conv) in self.enc.iter().enumerate().rev() {
            let (c, pre) = &cache.enc[i];
            d = gelu_backward(pre, &d);
            match conv.backward(store, c, &d, batch, i > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
        let _ = &cache.input;
    }

    /// Mean flow loss over the batch; accumulates its gradient. Returns the
    /// per-sample losses.
    pub fn loss_and_grad(&mut self, flows: &[T]) -> Result<Vec<f64>> {
        let b = flows.len() / FLOW_PIXELS;
        let (recon, cache) = self.run(flows, true)?;
        let cache = cache.expect("cache requested");
        let mut d = vec![T::zero(); recon.len()];
        let scale = 1.0 / b as f64;
        let losses = (0..b)
            .map(|n| {
                let r = n * FLOW_PIXELS..(n + 1) * FLOW_PIXELS;
                squared_error_grad(&recon[r.clone()], &flows[r.clone()], scale, &mut d[r])
            })
            .collect();
        self.backward(&cache, &d, b);
        Ok(losses)
    }

    pub fn losses(&self, flows: &[T]) -> Result<Vec<f64>> {
        let recon = self.forward_batch(flows)?;
        let b = flows.len() / FLOW_PIXELS;
        Ok((0..b)
            .map(|n| {
                let r = n * FLOW_PIXELS..(n + 1) * FLOW_PIXELS;
                let mut scratch = vec![T::zero(); FLOW_PIXELS];
                squared_error_grad(&recon[r.clone()], &flows[r], 0.0, &mut scratch)
            })
            .collect())
    }
}

impl MotionCae<f32> {
    /// Reconstruction `Ô_t` of one flow map.
    pub fn cae_forward(&self, flow: &FlowMap) -> Result<FlowMap> {
        if flow.values.len() != FLOW_PIXELS {
            return Err(VadError::Shape(format!("flow has {} values, expected {FLOW_PIXELS}", flow.values.len())));
        }
        let out = self.forward_batch(&flow.values)?;
        FlowMap::new(out, flow.video_id.clone(), flow.frame_index, flow.track_id.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_shape_matches_input() {
        let cae = MotionCae::<f32>::new(CaeConfig::default(), 0).unwrap();
        let flow = FlowMap::new((0..FLOW_PIXELS).map(|i| (i as f32 * 0.01).sin()).collect(), "v", 1, "t").unwrap();
        let out = cae.cae_forward(&flow).unwrap();
        assert_eq!(out.values.len(), FLOW_PIXELS);
        assert!(out.values.iter().all(|v| v.is_finite()));
        assert_eq!(cae.cae_forward(&flow).unwrap(), out);
    }

    #[test]
    fn bottleneck_is_compressive() {
        let cae = MotionCae::<f32>::new(CaeConfig::default(), 0).unwrap();
        assert!(cae.latent_len() < FLOW_PIXELS);
        assert!(CaeConfig { latent: FLOW_PIXELS, ..CaeConfig::default() }.validate().is_err());
    }

    #[test]
    fn rejects_bad_shapes_and_nan() {
        let cae = MotionCae::<f32>::new(CaeConfig::default(), 0).unwrap();
        assert!(matches!(cae.forward_batch(&[0.0; 100]), Err(VadError::Shape(_))));
        let mut x = vec![0.0; FLOW_PIXELS];
        x[7] = f32::INFINITY;
        assert!(matches!(cae.forward_batch(&x), Err(VadError::NonFinite(_))));
    }

    #[test]
    fn batch_equals_singles() {
        let cae = MotionCae::<f32>::new(CaeConfig::default(), 2).unwrap();
        let a: Vec<f32> = (0..FLOW_PIXELS).map(|i| (i as f32 * 0.03).cos()).collect();
        let b: Vec<f32> = (0..FLOW_PIXELS).map(|i| (i as f32 * 0.07).sin()).collect();
        let both = cae.forward_batch(&[a.clone(), b.clone()].concat()).unwrap();
        let ra = cae.forward_batch(&a).unwrap();
        let rb = cae.forward_batch(&b).unwrap();
        for (x, y) in both.iter().zip(ra.iter().chain(&rb)) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}

//! Frame-as-token transformer producing masked, whole-future and
//! partial-future predictions for an object cube.
//!
//! Each of the four input frames is flattened (3·32·32) and linearly embedded
//! into one token. Only visible tokens enter the encoder. The "whole" decoder
//! sees encoded visible tokens plus a learned mask token at every hidden
//! position and reconstructs all four frames; those reconstructions feed the
//! whole-future head. The "partial" decoder sees visible tokens only and
//! feeds the partial-future head.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{ObjectCube, FRAME_PIXELS, INPUT_FRAMES};
use crate::error::{Result, VadError};
use crate::nn::{Init, Linear, ParamId, ParamStore, Real, Transformer};
use crate::objectives::{squared_error_grad, LossBreakdown};

/// Which prediction streams are trained and scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Streams {
    pub masked: bool,
    pub whole: bool,
    pub partial: bool,
}

impl Streams {
    pub const ALL: Streams = Streams { masked: true, whole: true, partial: true };
    /// Plain single-future prediction: no masking, one decoder, one head.
    pub const NONE: Streams = Streams { masked: false, whole: false, partial: false };
    pub const MASKED: Streams = Streams { masked: true, whole: false, partial: false };
    pub const MASKED_WHOLE: Streams = Streams { masked: true, whole: true, partial: false };

    /// The four ablation settings, in table order.
    pub const ABLATION_ROWS: [Streams; 4] = [Self::NONE, Self::MASKED, Self::MASKED_WHOLE, Self::ALL];

    pub fn is_plain(self) -> bool {
        !(self.masked || self.whole || self.partial)
    }

    /// Parses `masked,whole,partial` (any subset; `none` or empty for plain).
    pub fn parse(s: &str) -> Result<Self> {
        let mut out = Streams::NONE;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "masked" => out.masked = true,
                "whole" => out.whole = true,
                "partial" => out.partial = true,
                "none" => {}
                other => return Err(VadError::InvalidArgument(format!("unknown stream `{other}`"))),
            }
        }
        Ok(out)
    }

    pub fn label(self) -> String {
        if self.is_plain() {
            return "none".into();
        }
        [(self.masked, "masked"), (self.whole, "whole"), (self.partial, "partial")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect::<Vec<_>>()
            .join(",")
    }

    fn uses_whole_decoder(self) -> bool {
        self.is_plain() || self.masked || self.whole
    }

    fn uses_whole_head(self) -> bool {
        self.is_plain() || self.whole
    }
}

impl TryFrom<String> for Streams {
    type Error = VadError;

    fn try_from(s: String) -> Result<Self> {
        Streams::parse(&s)
    }
}

impl From<Streams> for String {
    fn from(s: Streams) -> String {
        s.label()
    }
}

impl Default for Streams {
    fn default() -> Self {
        Streams::ALL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VitConfig {
    pub dim: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub mask_ratio: f64,
    pub streams: Streams,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self { dim: 128, enc_depth: 4, dec_depth: 2, heads: 4, mlp_ratio: 4, mask_ratio: 0.75, streams: Streams::ALL }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(VadError::Config(format!("width {} must be a positive multiple of heads {}", self.dim, self.heads)));
        }
        if self.enc_depth <= self.dec_depth {
            return Err(VadError::Config(format!(
                "encoder depth {} must exceed decoder depth {}",
                self.enc_depth, self.dec_depth
            )));
        }
        if self.dec_depth == 0 || self.mlp_ratio == 0 {
            return Err(VadError::Config("decoder depth and mlp ratio must be positive".into()));
        }
        if !self.streams.is_plain() {
            masked_count(self.mask_ratio)?;
        }
        Ok(())
    }

    /// Number of hidden positions per cube (0 for plain prediction).
    pub fn n_masked(&self) -> usize {
        if self.streams.is_plain() {
            0
        } else {
            masked_count(self.mask_ratio).unwrap_or(0)
        }
    }

    pub fn n_visible(&self) -> usize {
        INPUT_FRAMES - self.n_masked()
    }
}

/// `|M| = round(ratio·4)`; rejects ratios that hide nothing or everything.
pub fn masked_count(ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(VadError::InvalidArgument(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let m = (ratio * INPUT_FRAMES as f64).round() as usize;
    if m == 0 || m >= INPUT_FRAMES {
        return Err(VadError::InvalidArgument(format!(
            "mask ratio {ratio} hides {m} of {INPUT_FRAMES} frames; need 1..={}",
            INPUT_FRAMES - 1
        )));
    }
    Ok(m)
}

/// Index sets over the four input positions.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MaskPattern {
    /// Sorted.
    pub masked: Vec<usize>,
    /// Sorted complement of `masked`.
    pub visible: Vec<usize>,
}

impl MaskPattern {
    pub fn unmasked() -> Self {
        Self { masked: Vec::new(), visible: (0..INPUT_FRAMES).collect() }
    }

    pub fn from_masked(masked: &[usize]) -> Result<Self> {
        let mut m = masked.to_vec();
        m.sort_unstable();
        m.dedup();
        if m.len() != masked.len() || m.iter().any(|&i| i >= INPUT_FRAMES) {
            return Err(VadError::InvalidArgument(format!("invalid masked indices {masked:?}")));
        }
        if m.len() == INPUT_FRAMES {
            return Err(VadError::InvalidArgument("every position masked; nothing to encode".into()));
        }
        let visible = (0..INPUT_FRAMES).filter(|i| !m.contains(i)).collect();
        Ok(Self { masked: m, visible })
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked.contains(&i)
    }
}

pub fn sample_mask_with<R: Rng + ?Sized>(ratio: f64, rng: &mut R) -> Result<MaskPattern> {
    let m = masked_count(ratio)?;
    let idx: Vec<usize> = sample(rng, INPUT_FRAMES, m).into_vec();
    MaskPattern::from_masked(&idx)
}

/// Uniform draw of `round(ratio·4)` positions without replacement.
pub fn sample_mask(ratio: f64, seed: u64) -> Result<MaskPattern> {
    sample_mask_with(ratio, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Four frame tokens with positional embeddings already added.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    /// `4 × dim`.
    pub tokens: Vec<T>,
    pub positions: Vec<usize>,
    pub dim: usize,
}

/// Encoder output for the visible positions plus the assembled decoder input.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSet<T> {
    /// `|S∖M| × dim`, in visible-position order.
    pub encoded: Vec<T>,
    /// `4 × dim`: encoded tokens at visible positions, mask token plus
    /// positional embedding at masked ones.
    pub assembled: Vec<T>,
    pub mask: MaskPattern,
}

/// The three predictions for one cube. Streams that are switched off are
/// absent.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBundle {
    pub masked_recons: BTreeMap<usize, Vec<f32>>,
    pub whole_future: Option<Vec<f32>>,
    pub partial_future: Option<Vec<f32>>,
    pub mask: MaskPattern,
}

/// Raw batched outputs in model precision.
#[derive(Clone, Debug)]
pub struct BatchOutputs<T> {
    pub batch: usize,
    /// `B × |S∖M| × dim`.
    pub encoded: Vec<T>,
    /// `B × 4 × dim`.
    pub assembled: Option<Vec<T>>,
    /// `B × 4 × 3072`.
    pub decoded: Option<Vec<T>>,
    /// `B × 3072`.
    pub whole: Option<Vec<T>>,
    /// `B × 3072`.
    pub partial: Option<Vec<T>>,
}

pub struct ForwardCache<T> {
    vis_in: Vec<T>,
    enc: crate::nn::layers::TransformerCache<T>,
    enc_out: Vec<T>,
    dec_w: Option<(crate::nn::layers::TransformerCache<T>, Vec<T>)>,
    dec_p: Option<(crate::nn::layers::TransformerCache<T>, Vec<T>, Vec<T>)>,
}

#[derive(Clone, Debug)]
pub struct ContextVit<T> {
    pub config: VitConfig,
    pub store: ParamStore<T>,
    embed: Linear,
    pos: ParamId,
    mask_token: Option<ParamId>,
    encoder: Transformer,
    enc_proj: Linear,
    dec_whole: Option<Transformer>,
    out_proj: Option<Linear>,
    whole_head: Option<Linear>,
    dec_partial: Option<Transformer>,
    partial_proj: Option<Linear>,
    partial_head: Option<Linear>,
}

fn shape_err(what: &str, got: usize, want: usize) -> VadError {
    VadError::Shape(format!("{what}: got {got} values, expected {want}"))
}

impl<T: Real> ContextVit<T> {
    pub fn new(config: VitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let c = config.dim;
        let (h, r) = (config.heads, config.mlp_ratio);
        let s = config.streams;
        let mut store = ParamStore::new();
        let embed = Linear::new(&mut store, "embed", FRAME_PIXELS, c, rng);
        let pos = store.add("pos_embed", &[INPUT_FRAMES, c], Init::TruncNormal(crate::nn::layers::INIT_STD), rng);
        let mask_token = (!s.is_plain())
            .then(|| store.add("mask_token", &[c], Init::TruncNormal(crate::nn::layers::INIT_STD), rng));
        let encoder = Transformer::new(&mut store, "encoder", config.enc_depth, c, h, r, rng);
        let enc_proj = Linear::new(&mut store, "enc_proj", c, c, rng);
        let (dec_whole, out_proj) = if s.uses_whole_decoder() {
            (
                Some(Transformer::new(&mut store, "dec_whole", config.dec_depth, c, h, r, rng)),
                Some(Linear::new(&mut store, "out_proj", c, FRAME_PIXELS, rng)),
            )
        } else {
            (None, None)
        };
        let whole_head = s
            .uses_whole_head()
            .then(|| Linear::new(&mut store, "whole_head", INPUT_FRAMES * FRAME_PIXELS, FRAME_PIXELS, rng));
        let (dec_partial, partial_proj, partial_head) = if s.partial {
            let v = config.n_visible();
            (
                Some(Transformer::new(&mut store, "dec_partial", config.dec_depth, c, h, r, rng)),
                Some(Linear::new(&mut store, "partial_proj", c, FRAME_PIXELS, rng)),
                Some(Linear::new(&mut store, "partial_head", v * FRAME_PIXELS, FRAME_PIXELS, rng)),
            )
        } else {
            (None, None, None)
        };
        Ok(Self {
            config,
            store,
            embed,
            pos,
            mask_token,
            encoder,
            enc_proj,
            dec_whole,
            out_proj,
            whole_head,
            dec_partial,
            partial_proj,
            partial_head,
        })
    }

    /// Same architecture and weights in another precision.
    pub fn cast<U: Real>(&self) -> ContextVit<U> {
        ContextVit {
            config: self.config.clone(),
            store: self.store.cast(),
            embed: self.embed.clone(),
            pos: self.pos,
            mask_token: self.mask_token,
            encoder: self.encoder.clone(),
            enc_proj: self.enc_proj.clone(),
            dec_whole: self.dec_whole.clone(),
            out_proj: self.out_proj.clone(),
            whole_head: self.whole_head.clone(),
            dec_partial: self.dec_partial.clone(),
            partial_proj: self.partial_proj.clone(),
            partial_head: self.partial_head.clone(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    /// Parameters under a name prefix such as `encoder.` or `dec_whole.`.
    pub fn param_count_of(&self, prefix: &str) -> usize {
        self.store.numel_with_prefix(prefix)
    }

    fn check_mask(&self, mask: &MaskPattern) -> Result<()> {
        let want = self.config.n_masked();
        if mask.masked.len() != want {
            return Err(VadError::InvalidArgument(format!(
                "mask hides {} positions but the model was built for {want}",
                mask.masked.len()
            )));
        }
        if mask.visible.is_empty() {
            return Err(VadError::InvalidArgument("all positions masked".into()));
        }
        Ok(())
    }

    fn mask_slot(&self, i: usize) -> Vec<T> {
        let c = self.config.dim;
        let pos = &self.store.value(self.pos)[i * c..(i + 1) * c];
        let tok = self.store.value(self.mask_token.expect("masked model has a mask token"));
        tok.iter().zip(pos).map(|(&a, &b)| a + b).collect()
    }

    /// Embeds four frames (`4 × 3072`) into four tokens.
    pub fn embed_frames(&self, inputs: &[T]) -> Result<TokenSequence<T>> {
        if inputs.len() != INPUT_FRAMES * FRAME_PIXELS {
            return Err(shape_err("embed_frames inputs", inputs.len(), INPUT_FRAMES * FRAME_PIXELS));
        }
        let mut tokens = self.embed.forward(&self.store, inputs, INPUT_FRAMES);
        for (t, &p) in tokens.iter_mut().zip(self.store.value(self.pos)) {
            *t += p;
        }
        Ok(TokenSequence { tokens, positions: (0..INPUT_FRAMES).collect(), dim: self.config.dim })
    }

    /// Encodes only the visible tokens and assembles the decoder input.
    pub fn encode_visible(&self, tokens: &TokenSequence<T>, mask: &MaskPattern) -> Result<EncodedSet<T>> {
        self.check_mask(mask)?;
        let c = self.config.dim;
        if tokens.tokens.len() != INPUT_FRAMES * c {
            return Err(shape_err("token sequence", tokens.tokens.len(), INPUT_FRAMES * c));
        }
        let v = mask.visible.len();
        let mut x = Vec::with_capacity(v * c);
        for &i in &mask.visible {
            x.extend_from_slice(&tokens.tokens[i * c..(i + 1) * c]);
        }
        let (h, _) = self.encoder.forward(&self.store, &x, 1, v);
        let encoded = self.enc_proj.forward(&self.store, &h, v);
        let assembled = self.assemble(&encoded, std::slice::from_ref(mask));
        Ok(EncodedSet { encoded, assembled, mask: mask.clone() })
    }

    fn assemble(&self, encoded: &[T], masks: &[MaskPattern]) -> Vec<T> {
        let c = self.config.dim;
        let mut out = vec![T::zero(); masks.len() * INPUT_FRAMES * c];
        let slots: Vec<Vec<T>> = if self.mask_token.is_some() {
            (0..INPUT_FRAMES).map(|i| self.mask_slot(i)).collect()
        } else {
            Vec::new()
        };
        let v = masks.first().map_or(0, |m| m.visible.len());
        for (b, mask) in masks.iter().enumerate() {
            for (j, &i) in mask.visible.iter().enumerate() {
                out[(b * INPUT_FRAMES + i) * c..][..c].copy_from_slice(&encoded[(b * v + j) * c..][..c]);
            }
            for &i in &mask.masked {
                out[(b * INPUT_FRAMES + i) * c..][..c].copy_from_slice(&slots[i]);
            }
        }
        out
    }

    /// Runs the whole decoder over all four positions and projects each to a
    /// frame (`4 × 3072`).
    pub fn decode_masked(&self, assembled: &[T]) -> Result<Vec<T>> {
        let c = self.config.dim;
        if assembled.len() != INPUT_FRAMES * c {
            return Err(shape_err("assembled sequence", assembled.len(), INPUT_FRAMES * c));
        }
        let (dec, proj) = self.whole_decoder()?;
        let (h, _) = dec.forward(&self.store, assembled, 1, INPUT_FRAMES);
        let out = proj.forward(&self.store, &h, INPUT_FRAMES);
        ensure_finite(&out, "decoded frames")?;
        Ok(out)
    }

    /// Whole-future head over the four decoded frames in temporal order.
    pub fn predict_whole(&self, decoded: &[T]) -> Result<Vec<T>> {
        if decoded.len() != INPUT_FRAMES * FRAME_PIXELS {
            return Err(shape_err("decoded frames", decoded.len(), INPUT_FRAMES * FRAME_PIXELS));
        }
        let head = self
            .whole_head
            .as_ref()
            .ok_or_else(|| VadError::InvalidArgument("whole stream disabled".into()))?;
        Ok(head.forward(&self.store, decoded, 1))
    }

    /// Partial-future prediction from the encoded visible tokens only.
    pub fn predict_partial(&self, encoded: &[T]) -> Result<Vec<T>> {
        let c = self.config.dim;
        let v = self.config.n_visible();
        if encoded.len() != v * c {
            return Err(VadError::InvalidArgument(format!(
                "partial head expects {v} visible tokens, got {}",
                encoded.len() as f64 / c as f64
            )));
        }
        let (dec, proj, head) = match (&self.dec_partial, &self.partial_proj, &self.partial_head) {
            (Some(d), Some(p), Some(h)) => (d, p, h),
            _ => return Err(VadError::InvalidArgument("partial stream disabled".into())),
        };
        let (h, _) = dec.forward(&self.store, encoded, 1, v);
        let frames = proj.forward(&self.store, &h, v);
        Ok(head.forward(&self.store, &frames, 1))
    }

    fn whole_decoder(&self) -> Result<(&Transformer, &Linear)> {
        match (&self.dec_whole, &self.out_proj) {
            (Some(d), Some(p)) => Ok((d, p)),
            _ => Err(VadError::InvalidArgument("whole decoder disabled".into())),
        }
    }

    /// Batched forward over `B` cubes' input frames (`B × 4 × 3072`).
    pub fn forward_batch(&self, inputs: &[T], masks: &[MaskPattern]) -> Result<BatchOutputs<T>> {
        self.run(inputs, masks, false).map(|(o, _)| o)
    }

    pub fn forward_train(&self, inputs: &[T], masks: &[MaskPattern]) -> Result<(BatchOutputs<T>, ForwardCache<T>)> {
        self.run(inputs, masks, true).map(|(o, c)| (o, c.expect("cache requested")))
    }

    fn run(&self, inputs: &[T], masks: &[MaskPattern], keep: bool) -> Result<(BatchOutputs<T>, Option<ForwardCache<T>>)> {
        let b = masks.len();
        let c = self.config.dim;
        if inputs.len() != b * INPUT_FRAMES * FRAME_PIXELS {
            return Err(shape_err("batch inputs", inputs.len(), b * INPUT_FRAMES * FRAME_PIXELS));
        }
        for m in masks {
            self.check_mask(m)?;
        }
        let v = self.config.n_visible();
        let mut vis_in = Vec::with_capacity(b * v * FRAME_PIXELS);
        for (n, m) in masks.iter().enumerate() {
            for &i in &m.visible {
                vis_in.extend_from_slice(&inputs[(n * INPUT_FRAMES + i) * FRAME_PIXELS..][..FRAME_PIXELS]);
            }
        }
        let mut x0 = self.embed.forward(&self.store, &vis_in, b * v);
        let pos = self.store.value(self.pos);
        for (n, m) in masks.iter().enumerate() {
            for (j, &i) in m.visible.iter().enumerate() {
                for (t, &p) in x0[(n * v + j) * c..][..c].iter_mut().zip(&pos[i * c..(i + 1) * c]) {
                    *t += p;
                }
            }
        }
        let (enc_out, enc_cache) = self.encoder.forward(&self.store, &x0, b, v);
        let encoded = self.enc_proj.forward(&self.store, &enc_out, b * v);

        let mut assembled = None;
        let mut decoded = None;
        let mut dec_w_cache = None;
        if let Some(dec) = &self.dec_whole {
            let asm = self.assemble(&encoded, masks);
            let (h, cache) = dec.forward(&self.store, &asm, b, INPUT_FRAMES);
            let out = self.out_proj.as_ref().expect("paired with decoder").forward(&self.store, &h, b * INPUT_FRAMES);
            ensure_finite(&out, "decoded frames")?;
            if keep {
                dec_w_cache = Some((cache, h));
            }
            assembled = Some(asm);
            decoded = Some(out);
        }
        let whole = match (&self.whole_head, &decoded) {
            (Some(head), Some(d)) => Some(head.forward(&self.store, d, b)),
            _ => None,
        };
        let mut partial = None;
        let mut dec_p_cache = None;
        if let (Some(dec), Some(proj), Some(head)) = (&self.dec_partial, &self.partial_proj, &self.partial_head) {
            let (h, cache) = dec.forward(&self.store, &encoded, b, v);
            let frames = proj.forward(&self.store, &h, b * v);
            partial = Some(head.forward(&self.store, &frames, b));
            if keep {
                dec_p_cache = Some((cache, h, frames));
            }
        }
        for (name, out) in [("whole future", &whole), ("partial future", &partial)] {
            if let Some(o) = out {
                ensure_finite(o, name)?;
            }
        }
        let cache = keep.then(|| ForwardCache { vis_in, enc: enc_cache, enc_out, dec_w: dec_w_cache, dec_p: dec_p_cache });
        Ok((BatchOutputs { batch: b, encoded, assembled, decoded, whole, partial }, cache))
    }

    /// Backpropagates output gradients into the parameter gradients.
    pub fn backward(
        &mut self,
        masks: &[MaskPattern],
        outputs: &BatchOutputs<T>,
        cache: &ForwardCache<T>,
        d_decoded: Option<&[T]>,
        d_whole: Option<&[T]>,
        d_partial: Option<&[T]>,
    ) {
        let b = masks.len();
        let c = self.config.dim;
        let v = self.config.n_visible();
        let store = &mut self.store;
        let mut d_encoded = vec![T::zero(); b * v * c];

        if let (Some(dp), Some(dec), Some(proj), Some(head), Some((pc, ph, pframes))) = (
            d_partial,
            &self.dec_partial,
            &self.partial_proj,
            &self.partial_head,
            &cache.dec_p,
        ) {
            let d_frames = head.backward(store, pframes, dp, b, true).expect("dx");
            let d_h = proj.backward(store, ph, &d_frames, b * v, true).expect("dx");
            let d_in = dec.backward(store, pc, &d_h, b, v);
            add_into(&mut d_encoded, &d_in);
        }

        if let (Some(dec), Some(proj), Some((wc, wh)), Some(decoded)) =
            (&self.dec_whole, &self.out_proj, &cache.dec_w, &outputs.decoded)
        {
            let mut d_dec = d_decoded.map_or_else(|| vec![T::zero(); decoded.len()], <[T]>::to_vec);
            if let (Some(dw), Some(head)) = (d_whole, &self.whole_head) {
                let dx = head.backward(store, decoded, dw, b, true).expect("dx");
                add_into(&mut d_dec, &dx);
            }
            let d_h = proj.backward(store, wh, &d_dec, b * INPUT_FRAMES, true).expect("dx");
            let d_asm = dec.backward(store, wc, &d_h, b, INPUT_FRAMES);
            for (n, m) in masks.iter().enumerate() {
                for (j, &i) in m.visible.iter().enumerate() {
                    let src = &d_asm[(n * INPUT_FRAMES + i) * c..][..c];
                    for (d, &s) in d_encoded[(n * v + j) * c..][..c].iter_mut().zip(src) {
                        *d += s;
                    }
                }
                for &i in &m.masked {
                    let src = &d_asm[(n * INPUT_FRAMES + i) * c..][..c];
                    let tok = self.mask_token.expect("masked model has a mask token");
                    for (g, &s) in store.grads[tok.0].iter_mut().zip(src) {
                        *g += s;
                    }
                    for (g, &s) in store.grads[self.pos.0][i * c..(i + 1) * c].iter_mut().zip(src) {
                        *g += s;
                    }
                }
            }
        }

        let d_enc_out = self.enc_proj.backward(store, &cache.enc_out, &d_encoded, b * v, true).expect("dx");
        let d_x0 = self.encoder.backward(store, &cache.enc, &d_enc_out, b, v);
        for (n, m) in masks.iter().enumerate() {
            for (j, &i) in m.visible.iter().enumerate() {
                let src = &d_x0[(n * v + j) * c..][..c];
                for (g, &s) in store.grads[self.pos.0][i * c..(i + 1) * c].iter_mut().zip(src) {
                    *g += s;
                }
            }
        }
        self.embed.backward(store, &cache.vis_in, &d_x0, b * v, false);
    }

    /// Forward, mean three-term loss over the batch, and backward. Returns
    /// per-cube loss terms; gradients accumulate into `self.store`.
    pub fn loss_and_grad(&mut self, cubes: &[&[T]], masks: &[MaskPattern]) -> Result<Vec<LossBreakdown>> {
        let b = cubes.len();
        let cube_len = (INPUT_FRAMES + 1) * FRAME_PIXELS;
        let mut inputs = Vec::with_capacity(b * INPUT_FRAMES * FRAME_PIXELS);
        for cube in cubes {
            if cube.len() != cube_len {
                return Err(shape_err("cube", cube.len(), cube_len));
            }
            inputs.extend_from_slice(&cube[..INPUT_FRAMES * FRAME_PIXELS]);
        }
        let (out, cache) = self.forward_train(&inputs, masks)?;
        let (losses, d_dec, d_whole, d_partial) = self.output_grads(cubes, masks, &out);
        self.backward(masks, &out, &cache, d_dec.as_deref(), d_whole.as_deref(), d_partial.as_deref());
        Ok(losses)
    }

    /// Per-cube losses without touching gradients.
    pub fn losses(&self, cubes: &[&[T]], masks: &[MaskPattern]) -> Result<Vec<LossBreakdown>> {
        let mut inputs = Vec::with_capacity(cubes.len() * INPUT_FRAMES * FRAME_PIXELS);
        for cube in cubes {
            inputs.extend_from_slice(&cube[..INPUT_FRAMES * FRAME_PIXELS]);
        }
        let out = self.forward_batch(&inputs, masks)?;
        Ok(self.output_grads(cubes, masks, &out).0)
    }

    #[allow(clippy::type_complexity)]
    fn output_grads(
        &self,
        cubes: &[&[T]],
        masks: &[MaskPattern],
        out: &BatchOutputs<T>,
    ) -> (Vec<LossBreakdown>, Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
        let b = cubes.len();
        let s = self.config.streams;
        let scale = 1.0 / b as f64;
        let target = |n: usize, f: usize| &cubes[n][f * FRAME_PIXELS..(f + 1) * FRAME_PIXELS];
        let mut losses = vec![LossBreakdown::default(); b];

        let score_masked = s.masked;
        let mut d_dec = (score_masked && out.decoded.is_some()).then(|| vec![T::zero(); b * INPUT_FRAMES * FRAME_PIXELS]);
        if let (Some(dd), Some(decoded)) = (d_dec.as_mut(), &out.decoded) {
            for (n, m) in masks.iter().enumerate() {
                for &i in &m.masked {
                    let off = (n * INPUT_FRAMES + i) * FRAME_PIXELS;
                    let l = squared_error_grad(
                        &decoded[off..off + FRAME_PIXELS],
                        target(n, i),
                        scale,
                        &mut dd[off..off + FRAME_PIXELS],
                    );
                    losses[n].l_masked += l;
                }
            }
        }
        let future = |pred: &Option<Vec<T>>, slot: fn(&mut LossBreakdown) -> &mut f64, losses: &mut [LossBreakdown]| {
            pred.as_ref().map(|p| {
                let mut d = vec![T::zero(); b * FRAME_PIXELS];
                for n in 0..b {
                    let r = n * FRAME_PIXELS..(n + 1) * FRAME_PIXELS;
                    *slot(&mut losses[n]) = squared_error_grad(&p[r.clone()], target(n, INPUT_FRAMES), scale, &mut d[r]);
                }
                d
            })
        };
        let d_whole = future(&out.whole, |l| &mut l.l_whole, &mut losses);
        let d_partial = future(&out.partial, |l| &mut l.l_partial, &mut losses);
        for l in &mut losses {
            l.l_pred = l.l_whole + l.l_partial + l.l_masked;
        }
        (losses, d_dec, d_whole, d_partial)
    }
}

impl ContextVit<f32> {
    /// Single-cube forward assembled into a [`PredictionBundle`].
    pub fn forward(&self, cube: &ObjectCube, mask: &MaskPattern) -> Result<PredictionBundle> {
        let out = self.forward_batch(cube.inputs(), std::slice::from_ref(mask))?;
        Ok(self.bundles(&out, std::slice::from_ref(mask)).remove(0))
    }

    pub fn bundles(&self, out: &BatchOutputs<f32>, masks: &[MaskPattern]) -> Vec<PredictionBundle> {
        let s = self.config.streams;
        masks
            .iter()
            .enumerate()
            .map(|(n, m)| {
                let mut masked_recons = BTreeMap::new();
                if s.masked {
                    if let Some(d) = &out.decoded {
                        for &i in &m.masked {
                            let off = (n * INPUT_FRAMES + i) * FRAME_PIXELS;
                            masked_recons.insert(i, d[off..off + FRAME_PIXELS].to_vec());
                        }
                    }
                }
                let pick = |o: &Option<Vec<f32>>| o.as_ref().map(|v| v[n * FRAME_PIXELS..(n + 1) * FRAME_PIXELS].to_vec());
                PredictionBundle {
                    masked_recons,
                    whole_future: pick(&out.whole),
                    partial_future: pick(&out.partial),
                    mask: m.clone(),
                }
            })
            .collect()
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn ensure_finite<T: Real>(x: &[T], what: &str) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(VadError::NonFinite(format!("{what}: element {i} is {:?}", x[i]))),
    }
}

/// FNV-1a over the object's identity; seeds the inference-time mask.
pub fn object_mask_seed(video_id: &str, frame_index: usize, track_id: &str, draw: usize) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let key = format!("{video_id}\u{1f}{frame_index}\u{1f}{track_id}\u{1f}{draw}");
    for byte in key.bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(streams: Streams, ratio: f64) -> VitConfig {
        VitConfig { dim: 16, enc_depth: 2, dec_depth: 1, heads: 2, mlp_ratio: 2, mask_ratio: ratio, streams }
    }

    fn cube(seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..5 * FRAME_PIXELS).map(|_| rng.random::<f32>()).collect()
    }

    #[test]
    fn mask_sizes_follow_ratio() {
        assert_eq!(sample_mask(0.5, 1).unwrap().masked.len(), 2);
        assert_eq!(sample_mask(0.75, 1).unwrap().masked.len(), 3);
        assert_eq!(sample_mask(0.75, 9).unwrap(), sample_mask(0.75, 9).unwrap());
        assert!(sample_mask(0.1, 1).is_err());
        assert!(sample_mask(0.95, 1).is_err());
        assert!(sample_mask(1.0, 1).is_err());
    }

    #[test]
    fn embed_shape_and_zero_weights_give_positions() {
        let mut m = ContextVit::<f32>::new(small(Streams::ALL, 0.5), 0).unwrap();
        let toks = m.embed_frames(&vec![0.3; 4 * FRAME_PIXELS]).unwrap();
        assert_eq!(toks.tokens.len(), 4 * 16);
        let w = m.embed.w;
        m.store.value_mut(w).iter_mut().for_each(|v| *v = 0.0);
        let toks = m.embed_frames(&vec![0.0; 4 * FRAME_PIXELS]).unwrap();
        assert_eq!(toks.tokens, m.store.value(m.pos));
        assert!(m.embed_frames(&vec![0.0; 3 * FRAME_PIXELS]).is_err());
    }

    #[test]
    fn permuted_frames_change_tokens() {
        let m = ContextVit::<f64>::new(small(Streams::ALL, 0.5), 3).unwrap();
        let x: Vec<f64> = cube(1)[..4 * FRAME_PIXELS].iter().map(|&v| v as f64).collect();
        let mut swapped = x.clone();
        swapped[..FRAME_PIXELS].copy_from_slice(&x[FRAME_PIXELS..2 * FRAME_PIXELS]);
        swapped[FRAME_PIXELS..2 * FRAME_PIXELS].copy_from_slice(&x[..FRAME_PIXELS]);
        let a = m.embed_frames(&x).unwrap();
        let b = m.embed_frames(&swapped).unwrap();
        // token 0 of the swapped order carries frame 1's content at position 0
        let diff: f64 = a.tokens[..16].iter().zip(&b.tokens[..16]).map(|(p, q)| (p - q).abs()).sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn encoder_sees_only_visible_tokens() {
        let m = ContextVit::<f32>::new(small(Streams::ALL, 0.5), 1).unwrap();
        let mask = MaskPattern::from_masked(&[1, 3]).unwrap();
        let x = cube(2);
        let toks = m.embed_frames(&x[..4 * FRAME_PIXELS]).unwrap();
        let enc = m.encode_visible(&toks, &mask).unwrap();
        assert_eq!(enc.encoded.len(), 2 * 16);
        assert_eq!(enc.assembled.len(), 4 * 16);
        assert_eq!(&enc.assembled[16..32], &m.mask_slot(1)[..]);
        let bad = MaskPattern::from_masked(&[1]).unwrap();
        assert!(m.encode_visible(&toks, &bad).is_err());
        assert!(MaskPattern::from_masked(&[0, 1, 2, 3]).is_err());
    }

    #[test]
    fn partial_head_width_follows_ratio() {
        let m = ContextVit::<f32>::new(small(Streams::ALL, 0.5), 1).unwrap();
        let head = m.partial_head.as_ref().unwrap();
        assert_eq!(head.din, 2 * FRAME_PIXELS);
        let m = ContextVit::<f32>::new(small(Streams::ALL, 0.75), 1).unwrap();
        assert_eq!(m.partial_head.as_ref().unwrap().din, FRAME_PIXELS);
    }

    #[test]
    fn stage_ops_compose_to_forward() {
        let m = ContextVit::<f32>::new(small(Streams::ALL, 0.5), 4).unwrap();
        let data = cube(5);
        let c = ObjectCube::new(data.clone(), "v", 4, "t0", 0).unwrap();
        let mask = MaskPattern::from_masked(&[0, 2]).unwrap();
        let bundle = m.forward(&c, &mask).unwrap();
        assert_eq!(bundle.masked_recons.keys().copied().collect::<Vec<_>>(), vec![0, 2]);

        let toks = m.embed_frames(c.inputs()).unwrap();
        let enc = m.encode_visible(&toks, &mask).unwrap();
        let decoded = m.decode_masked(&enc.assembled).unwrap();
        assert_eq!(decoded.len(), 4 * FRAME_PIXELS);
        let whole = m.predict_whole(&decoded).unwrap();
        let partial = m.predict_partial(&enc.encoded).unwrap();
        let close = |a: &[f32], b: &[f32]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-4);
        assert!(close(&whole, bundle.whole_future.as_ref().unwrap()));
        assert!(close(&partial, bundle.partial_future.as_ref().unwrap()));
        assert!(close(&decoded[2 * FRAME_PIXELS..3 * FRAME_PIXELS], &bundle.masked_recons[&2]));
    }

    #[test]
    fn zero_whole_head_outputs_bias() {
        let mut m = ContextVit::<f32>::new(small(Streams::ALL, 0.5), 4).unwrap();
        let head = m.whole_head.clone().unwrap();
        m.store.value_mut(head.w).iter_mut().for_each(|v| *v = 0.0);
        let out = m.predict_whole(&vec![0.7; 4 * FRAME_PIXELS]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn plain_mode_has_no_mask_machinery() {
        let plain = ContextVit::<f32>::new(small(Streams::NONE, 0.5), 0).unwrap();
        assert!(plain.mask_token.is_none());
        assert!(plain.dec_partial.is_none());
        assert!(plain.whole_head.is_some());
        let c = ObjectCube::new(cube(1), "v", 4, "t", 0).unwrap();
        let b = plain.forward(&c, &MaskPattern::unmasked()).unwrap();
        assert!(b.masked_recons.is_empty());
        assert!(b.whole_future.is_some() && b.partial_future.is_none());
    }

    #[test]
    fn stream_parsing() {
        assert_eq!(Streams::parse("masked,whole,partial").unwrap(), Streams::ALL);
        assert_eq!(Streams::parse("none").unwrap(), Streams::NONE);
        assert_eq!(Streams::parse("").unwrap(), Streams::NONE);
        assert_eq!(Streams::parse("masked").unwrap(), Streams::MASKED);
        assert!(Streams::parse("future").is_err());
        assert_eq!(Streams::MASKED_WHOLE.label(), "masked,whole");
    }

    #[test]
    fn mask_seed_is_stable() {
        assert_eq!(object_mask_seed("v", 3, "t1", 0), object_mask_seed("v", 3, "t1", 0));
        assert_ne!(object_mask_seed("v", 3, "t1", 0), object_mask_seed("v", 3, "t1", 1));
        assert_ne!(object_mask_seed("v", 3, "t1", 0), object_mask_seed("v", 4, "t1", 0));
    }
}

//! A deterministic miniature DiT-style velocity backend.
//!
//! Token stream: `text_tokens` prompt tokens followed by `image_tokens` latent
//! rows, each `D = heads * head_dim` channels wide. The latent is itself the
//! image: a grayscale picture `D` pixels wide and `image_tokens` rows tall,
//! mapped linearly from `[0, 255]` to `[-1, 1]`.
//!
//! Per velocity call:
//!
//! ```text
//! h_img  = z W_in + t * w_time + P            (P: per-row position table)
//! h      = [prompt ; h_img]
//! repeat for every layer l:
//!     x        = rms(h)
//!     q, k, v  = x Wq_l, x Wk_l, x Wv_l         (split into heads; hooks see these)
//!     h       += concat_h(softmax(q k^T / sqrt(d)) v) Wo_l
//!     h       += tanh(rms(h) W1_l) W2_l
//! v(z, t) = rms(h)[image rows] W_out
//! ```
//!
//! Weights come from one SplitMix64 stream seeded with `spec.seed`:
//! `state += 0x9E3779B97F4A7C15; z = state; z = (z ^ z>>30) * 0xBF58476D1CE4E5B9;
//! z = (z ^ z>>27) * 0x94D049BB133111EB; z ^= z>>31`. Each draw maps to
//! `u = (z >> 40) / 2^24` and then `2u - 1`. Matrices are filled row-major in
//! this order: `W_in, w_time, P`, then for each layer `Wq, Wk, Wv, Wo, W1, W2`,
//! then `W_out`. Every `D x D` matrix is scaled by `1 / sqrt(D)`; `w_time` by
//! 0.5 and `P` by 0.25.
//!
//! Prompt embeddings use the same generator seeded with the first eight bytes
//! (little endian) of the SHA-256 of the UTF-8 prompt, drawing
//! `text_tokens * D` values in `[-1, 1)`. The empty prompt embeds to zeros.

use image::{DynamicImage, GrayImage, Luma};
use ndarray::{s, Array1, Array2, ArrayD, ArrayView2, Axis, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{FeatureBlock, TokenLayout};
use crate::backend::{AttentionSiteSpec, BackendDescriptor, CodecError, ImageCodec};
use crate::rf::{BackendError, Conditioning, HookSink, Latent, Qkv, VelocityBackend};

/// SplitMix64 generator.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 24 bits of resolution.
    pub fn next_unit(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 / (1u64 << 24) as f32
    }

    /// Uniform in `[-1, 1)`.
    pub fn next_signed(&mut self) -> f32 {
        2.0 * self.next_unit() - 1.0
    }

    fn matrix(&mut self, rows: usize, cols: usize, scale: f32) -> Array2<f32> {
        Array2::from_shape_simple_fn((rows, cols), || self.next_signed() * scale)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyModelSpec {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub text_tokens: usize,
    pub image_tokens: usize,
    pub seed: u64,
}

impl Default for ToyModelSpec {
    fn default() -> Self {
        ToyModelSpec {
            layers: 2,
            heads: 2,
            head_dim: 8,
            text_tokens: 4,
            image_tokens: 16,
            seed: 0,
        }
    }
}

impl ToyModelSpec {
    pub fn layout(&self) -> TokenLayout {
        TokenLayout {
            text_tokens: self.text_tokens,
            image_tokens: self.image_tokens,
            heads: self.heads,
            head_dim: self.head_dim,
        }
    }

    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn latent_shape(&self) -> [usize; 2] {
        [self.image_tokens, self.model_dim()]
    }
}

struct LayerWeights {
    wq: Array2<f32>,
    wk: Array2<f32>,
    wv: Array2<f32>,
    wo: Array2<f32>,
    w1: Array2<f32>,
    w2: Array2<f32>,
}

pub struct ToyBackend {
    spec: ToyModelSpec,
    descriptor: BackendDescriptor,
    w_in: Array2<f32>,
    w_time: Array1<f32>,
    positions: Array2<f32>,
    layers: Vec<LayerWeights>,
    w_out: Array2<f32>,
}

impl std::fmt::Debug for ToyBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToyBackend").field("spec", &self.spec).finish()
    }
}

/// Hash-based prompt embedding, `[text_tokens, heads * head_dim]` in `[-1, 1)`.
pub fn embed_prompt(text: &str, spec: &ToyModelSpec) -> Array2<f32> {
    let shape = (spec.text_tokens, spec.model_dim());
    if text.is_empty() {
        return Array2::zeros(shape);
    }
    let digest = Sha256::digest(text.as_bytes());
    let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    SplitMix64::new(seed).matrix(shape.0, shape.1, 1.0)
}

fn rms_rows(h: &Array2<f32>) -> Array2<f32> {
    let mut out = h.clone();
    for mut row in out.outer_iter_mut() {
        let ms = row.iter().map(|x| x * x).sum::<f32>() / row.len() as f32;
        let inv = 1.0 / (ms + 1e-6).sqrt();
        row.mapv_inplace(|x| x * inv);
    }
    out
}

fn attention(q: &FeatureBlock, k: &FeatureBlock, v: &FeatureBlock) -> Array2<f32> {
    let l = q.layout();
    let (t, d) = (l.total_tokens(), l.head_dim);
    let scale = 1.0 / (d as f32).sqrt();
    let mut out = Array2::<f32>::zeros((t, l.model_dim()));
    for h in 0..l.heads {
        let qh = q.values().index_axis(Axis(0), h);
        let kh = k.values().index_axis(Axis(0), h);
        let vh = v.values().index_axis(Axis(0), h);
        let mut scores = qh.dot(&kh.t()) * scale;
        for mut row in scores.outer_iter_mut() {
            let m = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|x| (x - m).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        out.slice_mut(s![.., h * d..(h + 1) * d]).assign(&scores.dot(&vh));
    }
    out
}

impl ToyBackend {
    pub fn new(spec: ToyModelSpec) -> Self {
        let d = spec.model_dim();
        let scale = 1.0 / (d as f32).sqrt();
        let mut rng = SplitMix64::new(spec.seed);
        let w_in = rng.matrix(d, d, scale);
        let w_time = Array1::from_shape_simple_fn(d, || rng.next_signed() * 0.5);
        let positions = rng.matrix(spec.image_tokens, d, 0.25);
        let layers = (0..spec.layers)
            .map(|_| LayerWeights {
                wq: rng.matrix(d, d, scale),
                wk: rng.matrix(d, d, scale),
                wv: rng.matrix(d, d, scale),
                wo: rng.matrix(d, d, scale),
                w1: rng.matrix(d, d, scale),
                w2: rng.matrix(d, d, scale),
            })
            .collect();
        let w_out = rng.matrix(d, d, scale);
        let layout = spec.layout();
        let descriptor = BackendDescriptor {
            name: "toy".into(),
            latent_shape: spec.latent_shape().to_vec(),
            sites: (0..spec.layers)
                .map(|layer| AttentionSiteSpec { layer, layout })
                .collect(),
            supports_hooks: true,
            supports_text_mask: true,
        };
        ToyBackend {
            spec,
            descriptor,
            w_in,
            w_time,
            positions,
            layers,
            w_out,
        }
    }

    pub fn spec(&self) -> &ToyModelSpec {
        &self.spec
    }

    fn text_tokens(&self, cond: &Conditioning) -> Result<Array2<f32>, BackendError> {
        let shape = (self.spec.text_tokens, self.spec.model_dim());
        if cond.extra.is_empty() {
            return Ok(embed_prompt(&cond.prompt_text, &self.spec));
        }
        if cond.extra.len() != shape.0 * shape.1 || cond.extra.iter().any(|x| !x.is_finite()) {
            return Err(BackendError(format!(
                "conditioning payload must hold {} finite values, got {}",
                shape.0 * shape.1,
                cond.extra.len()
            )));
        }
        Ok(Array2::from_shape_vec(shape, cond.extra.clone()).expect("payload shape"))
    }

    fn latent_view<'a>(&self, latent: &'a Latent) -> Result<ArrayView2<'a, f32>, BackendError> {
        let shape = self.spec.latent_shape();
        latent
            .view()
            .into_shape_with_order(shape)
            .map_err(|_| BackendError(format!("latent shape {:?}, expected {:?}", latent.shape(), shape)))
    }

    /// A smooth synthetic portrait at the backend resolution, for demos and tests.
    pub fn sample_portrait(&self, seed: u64) -> DynamicImage {
        let (w, h) = self.resolution();
        let mut rng = SplitMix64::new(seed);
        let jitter: Vec<f32> = (0..4).map(|_| rng.next_signed()).collect();
        let (cx, cy) = (w as f32 / 2.0 - 0.5, h as f32 / 2.0 - 0.5);
        let img = GrayImage::from_fn(w, h, |x, y| {
            let dx = (x as f32 - cx) / (w as f32 * (0.36 + 0.04 * jitter[0]));
            let dy = (y as f32 - cy) / (h as f32 * (0.44 + 0.04 * jitter[1]));
            let r = dx * dx + dy * dy;
            let mut p = if r < 1.0 { 190.0 - 40.0 * r } else { 50.0 + 10.0 * jitter[2] };
            let eye_y = cy - h as f32 * 0.12;
            for ex in [cx - w as f32 * 0.17, cx + w as f32 * 0.17] {
                if (x as f32 - ex).abs() < 1.0 && (y as f32 - eye_y).abs() < 1.0 {
                    p = 60.0;
                }
            }
            if (y as f32 - (cy + h as f32 * 0.22)).abs() < 0.6 && (x as f32 - cx).abs() < w as f32 * 0.15 {
                p = 90.0 + 20.0 * jitter[3];
            }
            Luma([p.clamp(0.0, 255.0) as u8])
        });
        DynamicImage::ImageLuma8(img)
    }
}

impl VelocityBackend for ToyBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn velocity(&self, latent: &Latent, t: f64, cond: &Conditioning, sink: &mut HookSink<'_>) -> Result<Latent, BackendError> {
        let z = self.latent_view(latent)?;
        let text = self.text_tokens(cond)?;
        let layout = self.spec.layout();
        let n_text = self.spec.text_tokens;
        let t = t as f32;

        let mut img = z.dot(&self.w_in) + &self.positions;
        img += &(&self.w_time * t);
        let mut h = ndarray::concatenate(Axis(0), &[text.view(), img.view()]).expect("token concat");

        for (idx, w) in self.layers.iter().enumerate() {
            let x = rms_rows(&h);
            let block = |m: &Array2<f32>| {
                FeatureBlock::from_tokens(layout, x.dot(m).view()).map_err(|e| BackendError(e.to_string()))
            };
            let mut qkv = Qkv {
                q: block(&w.wq)?,
                k: block(&w.wk)?,
                v: block(&w.wv)?,
            };
            sink.attention(idx, &mut qkv)?;
            for b in [&qkv.q, &qkv.k, &qkv.v] {
                if b.layout() != layout {
                    return Err(BackendError(format!("hook changed layout at layer {idx}")));
                }
            }
            h += &attention(&qkv.q, &qkv.k, &qkv.v).dot(&w.wo);
            h += &rms_rows(&h).dot(&w.w1).mapv(f32::tanh).dot(&w.w2);
        }

        let out = rms_rows(&h).slice(s![n_text.., ..]).dot(&self.w_out);
        Ok(out.into_dyn())
    }
}

impl ImageCodec for ToyBackend {
    fn resolution(&self) -> (u32, u32) {
        (self.spec.model_dim() as u32, self.spec.image_tokens as u32)
    }

    fn encode_image(&self, image: &DynamicImage) -> Result<Latent, CodecError> {
        let (w, h) = self.resolution();
        if image.width() != w || image.height() != h {
            return Err(CodecError::Resolution {
                backend: "toy".into(),
                expected_w: w,
                expected_h: h,
                actual_w: image.width(),
                actual_h: image.height(),
            });
        }
        let gray = image.to_luma8();
        let data = gray.pixels().map(|p| p.0[0] as f32 / 127.5 - 1.0).collect();
        Ok(ArrayD::from_shape_vec(IxDyn(&[h as usize, w as usize]), data).expect("image shape"))
    }

    fn decode_latent(&self, latent: &Latent) -> Result<DynamicImage, CodecError> {
        let shape = self.spec.latent_shape();
        if latent.shape() != shape {
            return Err(CodecError::LatentShape {
                expected: shape.to_vec(),
                actual: latent.shape().to_vec(),
            });
        }
        let (w, h) = self.resolution();
        let img = GrayImage::from_fn(w, h, |x, y| {
            let v = latent[[y as usize, x as usize]];
            Luma([((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8])
        });
        Ok(DynamicImage::ImageLuma8(img))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rf::HookError;
    use crate::attention::SiteKey;

    #[test]
    fn splitmix_reference_values() {
        // First outputs for seed 0 of the reference SplitMix64.
        let mut r = SplitMix64::new(0);
        assert_eq!(r.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(r.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(r.next_u64(), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn prompt_embedding() {
        let spec = ToyModelSpec::default();
        assert!(embed_prompt("", &spec).iter().all(|&x| x == 0.0));
        assert_eq!(embed_prompt("old man", &spec), embed_prompt("old man", &spec));
        let a = embed_prompt("a", &spec);
        let b = embed_prompt("b", &spec);
        assert!(a.iter().zip(b.iter()).any(|(x, y)| x != y));
        assert!(a.iter().all(|x| (-1.0..1.0).contains(x)));
        assert_eq!(a.shape(), &[4, 16]);
    }

    #[test]
    fn codec_round_trip_and_resolution_check() {
        let toy = ToyBackend::new(ToyModelSpec::default());
        let img = toy.sample_portrait(3);
        let z = toy.encode_image(&img).unwrap();
        assert_eq!(z.shape(), &[16, 16]);
        assert_eq!(toy.decode_latent(&z).unwrap().to_luma8(), img.to_luma8());
        let wrong = DynamicImage::ImageLuma8(GrayImage::new(8, 8));
        let msg = toy.encode_image(&wrong).unwrap_err().to_string();
        assert!(msg.contains("16x16"), "{msg}");
    }

    #[test]
    fn deterministic_and_prompt_sensitive() {
        let spec = ToyModelSpec { seed: 7, ..Default::default() };
        let a = ToyBackend::new(spec.clone());
        let b = ToyBackend::new(spec);
        let z = a.encode_image(&a.sample_portrait(1)).unwrap();
        let c = Conditioning::prompt("a 60-year-old person");
        let va = a.velocity(&z, 0.3, &c, &mut HookSink::inert()).unwrap();
        let vb = b.velocity(&z, 0.3, &c, &mut HookSink::inert()).unwrap();
        assert_eq!(va, vb);
        let vc = a.velocity(&z, 0.3, &Conditioning::prompt("a 30-year-old person"), &mut HookSink::inert()).unwrap();
        assert_ne!(va, vc);
    }

    #[test]
    fn extra_payload_replaces_prompt() {
        let toy = ToyBackend::new(ToyModelSpec::default());
        let z = ArrayD::zeros(IxDyn(&[16, 16]));
        let payload = embed_prompt("hello", toy.spec());
        let by_prompt = toy.velocity(&z, 0.5, &Conditioning::prompt("hello"), &mut HookSink::inert()).unwrap();
        let by_payload = toy
            .velocity(
                &z,
                0.5,
                &Conditioning {
                    prompt_text: String::new(),
                    extra: payload.iter().copied().collect(),
                },
                &mut HookSink::inert(),
            )
            .unwrap();
        assert_eq!(by_prompt, by_payload);
        let bad = Conditioning {
            prompt_text: String::new(),
            extra: vec![1.0; 3],
        };
        assert!(toy.velocity(&z, 0.5, &bad, &mut HookSink::inert()).is_err());
    }

    struct Counter(Vec<SiteKey>);
    impl crate::rf::AttentionHook for Counter {
        fn on_attention(&mut self, site: SiteKey, _: &mut Qkv) -> Result<(), HookError> {
            self.0.push(site);
            Ok(())
        }
    }

    #[test]
    fn hooks_see_every_layer() {
        let toy = ToyBackend::new(ToyModelSpec { layers: 3, ..Default::default() });
        let z = ArrayD::zeros(IxDyn(&[16, 16]));
        let mut c = Counter(Vec::new());
        toy.velocity(&z, 0.1, &Conditioning::default(), &mut HookSink::new(5, Some(&mut c))).unwrap();
        assert_eq!(c.0, vec![SiteKey::new(5, 0), SiteKey::new(5, 1), SiteKey::new(5, 2)]);
    }
}

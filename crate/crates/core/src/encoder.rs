//! Convolutional feature encoder, latent masking, and the Conformer context network.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{contrastive_time_mask, FeatureMatrix};
use crate::numerics::{same_out_len, Graph, ModelParams, Partition, Real, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_dims: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub conv_kernel: usize,
    pub ffn_expansion: usize,
    pub dropout: f64,
    pub subsample_channels: usize,
    /// Multiplies raw log-mel input before the first convolution.
    pub input_scale: f64,
    /// Add sinusoidal absolute positions after subsampling.
    pub positional: bool,
    /// Cut the gradient path through contrastive targets.
    pub stop_target_gradient: bool,
    /// Separate learned projection applied to targets.
    pub target_projection: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dims: 80,
            d_model: 64,
            n_layers: 4,
            n_heads: 2,
            conv_kernel: 15,
            ffn_expansion: 4,
            dropout: 0.0,
            subsample_channels: 8,
            input_scale: 0.1,
            positional: true,
            stop_target_gradient: true,
            target_projection: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be at least 1".into()));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config("conv_kernel must be odd".into()));
        }
        if self.input_dims == 0 || self.subsample_channels == 0 || self.ffn_expansion == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Frames after the two stride-2 convolutions.
    pub fn subsampled_len(t: usize) -> usize {
        same_out_len(same_out_len(t, 2), 2)
    }

    fn subsampled_dims(&self) -> usize {
        same_out_len(same_out_len(self.input_dims, 2), 2) * self.subsample_channels
    }
}

/// Per-utterance output of [`Encoder::encode`].
#[derive(Clone, Debug)]
pub struct EncodedVars {
    /// Feature-encoder output, captured before masking.
    pub latents: Var,
    /// Contrastive targets (latents, optionally detached and projected).
    pub targets: Var,
    pub contexts: Var,
    pub mask: Vec<bool>,
}

/// Plain-tensor version of [`EncodedVars`].
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedUtterance {
    pub targets: Tensor<f32>,
    pub contexts: Tensor<f32>,
    pub mask: Vec<bool>,
}

/// How to mask latents before the context network.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskPlan {
    None,
    Fixed(Vec<bool>),
    Spans { fraction: f64, span: usize },
}

fn linear_init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<f32> {
    Tensor::randn(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng)
}

/// Sinusoidal absolute position table `[len×d]`.
pub fn positions(len: usize, d: usize) -> Tensor<f32> {
    let mut out = Vec::with_capacity(len * d);
    for t in 0..len {
        for j in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
            let a = t as f64 * rate;
            out.push(if j % 2 == 0 { a.sin() } else { a.cos() } as f32);
        }
    }
    Tensor::new(vec![len, d], out).expect("positive sizes")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub cfg: EncoderConfig,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn init_params<R: Rng + ?Sized>(
        &self,
        params: &mut ModelParams,
        rng: &mut R,
    ) -> Result<()> {
        let c = &self.cfg;
        let (d, ch, k) = (c.d_model, c.subsample_channels, c.conv_kernel);
        let e = Partition::Encoder;
        let mut put = |name: &str, t: Tensor<f32>| params.insert(name, t, e);
        put(
            "enc.sub.conv1.k",
            Tensor::randn(&[3, 3, 1, ch], (1.0 / 9.0f64).sqrt(), rng),
        )?;
        put("enc.sub.conv1.b", Tensor::zeros(&[ch]))?;
        put(
            "enc.sub.conv2.k",
            Tensor::randn(&[3, 3, ch, ch], (1.0 / (9.0 * ch as f64)).sqrt(), rng),
        )?;
        put("enc.sub.conv2.b", Tensor::zeros(&[ch]))?;
        put("enc.sub.proj.w", linear_init(c.subsampled_dims(), d, rng))?;
        put("enc.sub.proj.b", Tensor::zeros(&[d]))?;
        put("enc.mask_emb", Tensor::uniform(&[d], -0.5, 0.5, rng))?;
        if c.target_projection {
            put("enc.target_proj.w", linear_init(d, d, rng))?;
            put("enc.target_proj.b", Tensor::zeros(&[d]))?;
        }
        let h = d * c.ffn_expansion;
        for l in 0..c.n_layers {
            let p = |s: &str| format!("enc.l{l}.{s}");
            for ff in ["ff1", "ff2"] {
                put(&p(&format!("{ff}.ln.g")), Tensor::ones(&[d]))?;
                put(&p(&format!("{ff}.ln.b")), Tensor::zeros(&[d]))?;
                put(&p(&format!("{ff}.w1")), linear_init(d, h, rng))?;
                put(&p(&format!("{ff}.b1")), Tensor::zeros(&[h]))?;
                put(&p(&format!("{ff}.w2")), linear_init(h, d, rng))?;
                put(&p(&format!("{ff}.b2")), Tensor::zeros(&[d]))?;
            }
            put(&p("att.ln.g"), Tensor::ones(&[d]))?;
            put(&p("att.ln.b"), Tensor::zeros(&[d]))?;
            for m in ["wq", "wk", "wv", "wo"] {
                put(&p(&format!("att.{m}")), linear_init(d, d, rng))?;
                put(
                    &p(&format!("att.{}", m.replace('w', "b"))),
                    Tensor::zeros(&[d]),
                )?;
            }
            put(&p("conv.ln.g"), Tensor::ones(&[d]))?;
            put(&p("conv.ln.b"), Tensor::zeros(&[d]))?;
            put(&p("conv.pw1.w"), linear_init(d, 2 * d, rng))?;
            put(&p("conv.pw1.b"), Tensor::zeros(&[2 * d]))?;
            put(
                &p("conv.dw.k"),
                Tensor::randn(&[k, d], (1.0 / k as f64).sqrt(), rng),
            )?;
            put(&p("conv.dw.b"), Tensor::zeros(&[d]))?;
            put(&p("conv.norm.g"), Tensor::ones(&[d]))?;
            put(&p("conv.norm.b"), Tensor::zeros(&[d]))?;
            put(&p("conv.pw2.w"), linear_init(d, d, rng))?;
            put(&p("conv.pw2.b"), Tensor::zeros(&[d]))?;
            put(&p("out.ln.g"), Tensor::ones(&[d]))?;
            put(&p("out.ln.b"), Tensor::zeros(&[d]))?;
        }
        Ok(())
    }

    /// Two stride-(2,2) convolutions with ReLU, flattened and projected to `d_model`.
    pub fn subsample<F: Real>(
        &self,
        g: &mut Graph<F>,
        params: &ModelParams,
        x: Var,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.input_dims {
            return Err(Error::dim(
                "subsample",
                format!("expected T×{} features, got {shape:?}", self.cfg.input_dims),
            ));
        }
        let x = g.scale(x, F::of(self.cfg.input_scale));
        let x = g.reshape(x, &[shape[0], shape[1], 1])?;
        let k1 = g.param(params, "enc.sub.conv1.k")?;
        let b1 = g.param(params, "enc.sub.conv1.b")?;
        let k2 = g.param(params, "enc.sub.conv2.k")?;
        let b2 = g.param(params, "enc.sub.conv2.b")?;
        let h = g.conv2d(x, k1, (2, 2))?;
        let h = g.add_row(h, b1)?;
        let h = g.relu(h);
        let h = g.conv2d(h, k2, (2, 2))?;
        let h = g.add_row(h, b2)?;
        let h = g.relu(h);
        let s = g.shape(h).to_vec();
        let h = g.reshape(h, &[s[0], s[1] * s[2]])?;
        let w = g.param(params, "enc.sub.proj.w")?;
        let b = g.param(params, "enc.sub.proj.b")?;
        g.linear(h, w, Some(b))
    }

    pub fn apply_latent_mask<F: Real>(
        &self,
        g: &mut Graph<F>,
        params: &ModelParams,
        latents: Var,
        mask: &[bool],
    ) -> Result<Var> {
        if !mask.iter().any(|&m| m) {
            if mask.len() != g.shape(latents)[0] {
                return Err(Error::dim(
                    "apply_latent_mask",
                    "mask length differs from frames",
                ));
            }
            return Ok(latents);
        }
        let emb = g.param(params, "enc.mask_emb")?;
        g.mask_rows(latents, mask, emb)
    }

    fn layer_norm<F: Real>(
        &self,
        g: &mut Graph<F>,
        params: &ModelParams,
        x: Var,
        prefix: &str,
    ) -> Result<Var> {
        let gain = g.param(params, &format!("{prefix}.g"))?;
        let bias = g.param(params, &format!("{prefix}.b"))?;
        g.layer_norm(x, gain, bias, F::of(LN_EPS))
    }

    fn lin<F: Real>(
        &self,
        g: &mut Graph<F>,
        params: &ModelParams,
        x: Var,
        w: &str,
        b: &str,
    ) -> Result<Var> {
        let w = g.param(params, w)?;
        let b = g.param(params, b)?;
        g.linear(x, w, Some(b))
    }

    fn dropout<F: Real>(
        &self,
        g: &mut Graph<F>,
        x: Var,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        match rng {
            Some(r) if self.cfg.dropout > 0.0 => g.dropout(x, self.cfg.dropout, &mut **r),
            _ => Ok(x),
        }
    }

    fn feed_forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        params: &ModelParams,
        x: Var,
        p: &str,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let h = self.layer_norm(g, params, x, &format!("{p}.ln"))?;
        let h = self.lin(g, params, h, &format!("{p}.w1"), &format!("{p}.b1"))?;
        let h = g.silu(h);
        let h = self.dropout(g, h, rng)?;
        let h = self.lin(g, params, h, &format!("{p}.w2"), &format!("{p}.b2"))?;
        self.dropout(g, h, rng)
    }

    fn self_attention<F: Real>(
        &self,
        g: &mut Graph<F>,
        params: &ModelParams,
        x: Var,
        p: &str,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let (d, heads) = (self.cfg.d_model, self.cfg.n_heads);
        let dk = d / heads;
        let h = self.layer_norm(g, params, x, &format!("{p}.ln"))?;
        let q = self.lin(g, params, h, &format!("{p}.wq"), &format!("{p}.bq"))?;
        let k = self.lin(g, params, h, &format!("{p}.wk"), &format!("{p}.bk"))?;
        let v = self.lin(g, params, h, &format!("{p}.wv"), &format!("{p}.bv"))?;
        let scale = F::of(1.0 / (dk as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for i in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, i * dk, dk)?,
                    g.slice_cols(k, i * dk, dk)?,
                    g.slice_cols(v, i * dk, dk)?,
                )
            };
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let att = g.softmax(scores);
            outs.push(g.matmul(att, vh)?);
        }
        let cat = if heads == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        let o = self.lin(g, params, cat, &format!("{p}.wo"), &format!("{p}.bo"))?;
        self.dropout(g, o, rng)
    }

    fn conv_module<F: Real>(
        &self,
        g: &mut Graph<F>,
        params: &ModelParams,
        x: Var,
        p: &str,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let h = self.layer_norm(g, params, x, &format!("{p}.ln"))?;
        let h = self.lin(g, params, h, &format!("{p}.pw1.w"), &format!("{p}.pw1.b"))?;
        let h = g.glu(h)?;
        let k = g.param(params, &format!("{p}.dw.k"))?;
        let b = g.param(params, &format!("{p}.dw.b"))?;
        let h = g.depthwise_conv1d(h, k)?;
        let h = g.add_row(h, b)?;
        let h = self.layer_norm(g, params, h, &format!("{p}.norm"))?;
        let h = g.silu(h);
        let h = self.lin(g, params, h, &format!("{p}.pw2.w"), &format!("{p}.pw2.b"))?;
        self.dropout(g, h, rng)
    }

    /// Macaron Conformer stack: ½FFN → MHSA → conv → ½FFN → LayerNorm per block.
    pub fn conformer_forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        params: &ModelParams,
        x: Var,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.cfg.d_model {
            return Err(Error::dim(
                "conformer",
                format!("expected T×{}, got {s:?}", self.cfg.d_model),
            ));
        }
        let half = F::of(0.5);
        let mut x = x;
        for l in 0..self.cfg.n_layers {
            let ff1 = self.feed_forward(g, params, x, &format!("enc.l{l}.ff1"), &mut rng)?;
            let ff1 = g.scale(ff1, half);
            x = g.add(x, ff1)?;
            let att = self.self_attention(g, params, x, &format!("enc.l{l}.att"), &mut rng)?;
            x = g.add(x, att)?;
            let conv = self.conv_module(g, params, x, &format!("enc.l{l}.conv"), &mut rng)?;
            x = g.add(x, conv)?;
            let ff2 = self.feed_forward(g, params, x, &format!("enc.l{l}.ff2"), &mut rng)?;
            let ff2 = g.scale(ff2, half);
            x = g.add(x, ff2)?;
            x = self.layer_norm(g, params, x, &format!("enc.l{l}.out.ln"))?;
        }
        Ok(x)
    }

    /// Full encoder pass. Targets are taken from the latents before any masking.
    pub fn encode<F: Real>(
        &self,
        g: &mut Graph<F>,
        params: &ModelParams,
        features: &FeatureMatrix,
        plan: &MaskPlan,
        rng: &mut dyn RngCore,
        train: bool,
    ) -> Result<EncodedVars> {
        if features.dims() != self.cfg.input_dims {
            return Err(Error::dim(
                "encode",
                format!(
                    "features have {} dims, encoder expects {}",
                    features.dims(),
                    self.cfg.input_dims
                ),
            ));
        }
        let x = g.constant(features.to_tensor().cast());
        let latents = self.subsample(g, params, x)?;
        let t = g.shape(latents)[0];
        let mask = match plan {
            MaskPlan::None => vec![false; t],
            MaskPlan::Fixed(m) => m.clone(),
            MaskPlan::Spans { fraction, span } => contrastive_time_mask(t, *fraction, *span, rng)?,
        };
        if mask.len() != t {
            return Err(Error::dim(
                "encode",
                format!("mask of {} for {t} frames", mask.len()),
            ));
        }
        let mut targets = if self.cfg.stop_target_gradient {
            g.detach(latents)
        } else {
            latents
        };
        if self.cfg.target_projection {
            targets = self.lin(g, params, targets, "enc.target_proj.w", "enc.target_proj.b")?;
        }
        let mut h = self.apply_latent_mask(g, params, latents, &mask)?;
        if self.cfg.positional {
            let pos = g.constant(positions(t, self.cfg.d_model).cast());
            h = g.add(h, pos)?;
        }
        let contexts =
            self.conformer_forward(g, params, h, if train { Some(rng) } else { None })?;
        Ok(EncodedVars {
            latents,
            targets,
            contexts,
            mask,
        })
    }

    /// Inference-mode encode returning plain tensors.
    pub fn encode_eval(
        &self,
        params: &ModelParams,
        features: &FeatureMatrix,
    ) -> Result<EncodedUtterance> {
        let mut g = Graph::<f32>::new();
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let e = self.encode(&mut g, params, features, &MaskPlan::None, &mut rng, false)?;
        Ok(EncodedUtterance {
            targets: g.value(e.targets).clone(),
            contexts: g.value(e.contexts).clone(),
            mask: e.mask,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::Source;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> Encoder {
        Encoder::new(EncoderConfig {
            input_dims: 16,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            conv_kernel: 3,
            subsample_channels: 2,
            ..EncoderConfig::default()
        })
        .unwrap()
    }

    fn setup(enc: &Encoder, seed: u64) -> ModelParams {
        let mut p = ModelParams::new();
        enc.init_params(&mut p, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap();
        p
    }

    fn feats(t: usize, d: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMatrix::new(
            t,
            d,
            (0..t * d).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            Source::Real,
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig {
            n_heads: 3,
            ..EncoderConfig::default()
        }
        .validate()
        .is_err());
        assert!(EncoderConfig {
            n_layers: 0,
            ..EncoderConfig::default()
        }
        .validate()
        .is_err());
        assert!(EncoderConfig::default().validate().is_ok());
    }

    #[test]
    fn subsampled_lengths() {
        assert_eq!(EncoderConfig::subsampled_len(100), 25);
        assert_eq!(EncoderConfig::subsampled_len(1), 1);
        assert_eq!(EncoderConfig::subsampled_len(7), 2);
        let enc = Encoder::new(EncoderConfig::default()).unwrap();
        let p = setup(&enc, 1);
        for (t, want) in [(100, 25), (1, 1)] {
            let e = enc.encode_eval(&p, &feats(t, 80, 2)).unwrap();
            assert_eq!(e.contexts.shape(), &[want, 64]);
            assert_eq!(e.targets.shape(), e.contexts.shape());
        }
    }

    #[test]
    fn subsample_matches_conv_composition() {
        let enc = small();
        let p = setup(&enc, 3);
        let f = feats(11, 16, 4);
        let mut g = Graph::<f32>::new();
        let x = g.constant(f.to_tensor());
        let got = enc.subsample(&mut g, &p, x).unwrap();

        let add_bias_relu = |t: Tensor<f32>, b: &Tensor<f32>| {
            let c = b.numel();
            let mut t = t;
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = (*v + b.data()[i % c]).max(0.0);
            }
            t
        };
        let x = f
            .to_tensor()
            .map(|v| v * 0.1)
            .reshape(&[11, 16, 1])
            .unwrap();
        let h = add_bias_relu(
            x.conv2d(p.get("enc.sub.conv1.k").unwrap(), (2, 2)).unwrap(),
            p.get("enc.sub.conv1.b").unwrap(),
        );
        let h = add_bias_relu(
            h.conv2d(p.get("enc.sub.conv2.k").unwrap(), (2, 2)).unwrap(),
            p.get("enc.sub.conv2.b").unwrap(),
        );
        let s = h.shape().to_vec();
        let h = h.reshape(&[s[0], s[1] * s[2]]).unwrap();
        let want = h.matmul(p.get("enc.sub.proj.w").unwrap()).unwrap();
        assert_eq!(g.shape(got), want.shape());
        for (a, b) in g.value(got).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn latent_mask_selection() {
        let enc = small();
        let p = setup(&enc, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let lat = Tensor::<f32>::randn(&[5, 8], 1.0, &mut rng);
        let emb = p.get("enc.mask_emb").unwrap().clone();
        for mask in [
            vec![false; 5],
            vec![true; 5],
            vec![true, false, false, true, false],
        ] {
            let mut g = Graph::<f32>::new();
            let x = g.constant(lat.clone());
            let y = enc.apply_latent_mask(&mut g, &p, x, &mask).unwrap();
            for (t, &m) in mask.iter().enumerate() {
                let want = if m { emb.data() } else { lat.row(t) };
                assert_eq!(g.value(y).row(t), want);
            }
        }
    }

    #[test]
    fn single_frame_attention_is_value_path() {
        let enc = small();
        let p = setup(&enc, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f64>::randn(&[1, 8], 1.0, &mut rng);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x);
        let att = enc
            .self_attention(&mut g, &p, xv, "enc.l0.att", &mut None)
            .unwrap();
        // softmax over one key is 1, so output = (LN(x)·Wv + bv)·Wo + bo
        let mut g2 = Graph::<f64>::new();
        let xv2 = g2.constant(g.value(xv).clone());
        let h = enc.layer_norm(&mut g2, &p, xv2, "enc.l0.att.ln").unwrap();
        let v = enc
            .lin(&mut g2, &p, h, "enc.l0.att.wv", "enc.l0.att.bv")
            .unwrap();
        let o = enc
            .lin(&mut g2, &p, v, "enc.l0.att.wo", "enc.l0.att.bo")
            .unwrap();
        for (a, b) in g.value(att).data().iter().zip(g2.value(o).data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_weights_leave_residual_identity() {
        let enc = small();
        let mut p = setup(&enc, 9);
        let names: Vec<String> = p.names().map(String::from).collect();
        for n in names {
            let keep = n.ends_with(".ln.g") || n.ends_with("norm.g");
            if n.starts_with("enc.l") && !keep {
                let t = p.get_mut(&n).unwrap();
                t.data_mut().fill(0.0);
            }
        }
        // already layer-normalized input is a fixed point of the final LayerNorm
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let raw = Tensor::<f64>::randn(&[6, 8], 1.0, &mut rng);
        let x = raw
            .layer_norm(&Tensor::ones(&[8]), &Tensor::zeros(&[8]), 1e-12)
            .unwrap();
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.clone());
        let y = enc.conformer_forward(&mut g, &p, xv, None).unwrap();
        for (a, b) in g.value(y).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn attention_is_permutation_equivariant_without_positions() {
        let enc = small();
        let p = setup(&enc, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::<f64>::randn(&[5, 8], 1.0, &mut rng);
        let perm = [3, 0, 4, 1, 2];
        let px = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>())
            .unwrap();
        let run = |t: Tensor<f64>| {
            let mut g = Graph::<f64>::new();
            let v = g.constant(t);
            let o = enc
                .self_attention(&mut g, &p, v, "enc.l0.att", &mut None)
                .unwrap();
            g.value(o).clone()
        };
        let (a, b) = (run(x), run(px));
        for (k, &i) in perm.iter().enumerate() {
            for (u, v) in b.row(k).iter().zip(a.row(i)) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn targets_independent_of_mask_plan() {
        let enc = small();
        let p = setup(&enc, 13);
        let f = feats(40, 16, 14);
        let run = |plan: MaskPlan| {
            let mut g = Graph::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(15);
            let e = enc.encode(&mut g, &p, &f, &plan, &mut rng, true).unwrap();
            (
                g.value(e.targets).clone(),
                g.value(e.latents).clone(),
                g.value(e.contexts).clone(),
            )
        };
        let (t0, l0, c0) = run(MaskPlan::None);
        let (t1, _, c1) = run(MaskPlan::Spans {
            fraction: 0.5,
            span: 3,
        });
        let (t2, _, _) = run(MaskPlan::Fixed(vec![true; 10]));
        assert_eq!(t0, t1);
        assert_eq!(t0, t2);
        assert_ne!(c0, c1);
        assert_eq!(l0.shape(), c0.shape());
    }

    #[test]
    fn encode_is_deterministic() {
        let enc = small();
        let p = setup(&enc, 16);
        let f = feats(30, 16, 17);
        assert_eq!(
            enc.encode_eval(&p, &f).unwrap(),
            enc.encode_eval(&p, &f).unwrap()
        );
    }

    #[test]
    fn wrong_feature_dims_rejected() {
        let enc = small();
        let p = setup(&enc, 1);
        assert!(matches!(
            enc.encode_eval(&p, &feats(10, 12, 1)),
            Err(Error::Dimension { .. })
        ));
    }
}

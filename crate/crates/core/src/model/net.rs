//! Forward computation: two encoders, tokenization with learned positions,
//! the cross-attention decoder stack, the three heads and fusion.

use super::config::{FusionMode, ModelConfig, ENCODER_BLOCKS};
use super::input::{prepare_inputs, BoundingBox};
use super::params::{encoder_prefix, init_params, BoundParams, ParamStore, Stream};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tape, Tensor, Var};

/// The model: configuration plus learnable weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Crtnet {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Output of one forward pass, detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Target-only distribution.
    pub y_t: Tensor,
    /// Context-integrated distribution.
    pub y_tc: Tensor,
    /// Confidence in `y_t`, in `[0, 1]`.
    pub p: f64,
    /// Final distribution.
    pub y_p: Tensor,
    /// `[layer][head]` attention over the `L` context tokens.
    pub attention: Vec<Vec<Tensor>>,
}

impl Prediction {
    pub fn top1(&self) -> usize {
        argmax(self.y_p.data())
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Network inputs for one sample, resized and ready to encode.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedInput {
    pub target: Tensor,
    pub context: Tensor,
    /// Token index holding the box midpoint.
    pub cell: usize,
}

impl PreparedInput {
    pub fn new(image: &Tensor, bbox: &BoundingBox, config: &ModelConfig) -> Result<Self> {
        let (target, context) = prepare_inputs(image, bbox, config.image_side)?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        Ok(PreparedInput {
            target,
            context,
            cell: target_cell(bbox, w, h, config.feat_h, config.feat_w),
        })
    }
}

/// Graph handles produced by [`Crtnet::forward`].
pub struct ForwardGraph<'t> {
    pub a_t: Var<'t>,
    pub a_c: Var<'t>,
    pub y_t: Var<'t>,
    pub y_tc: Var<'t>,
    pub confidence_logit: Var<'t>,
    pub p: Var<'t>,
    pub y_p: Var<'t>,
    pub attention: Vec<Vec<Tensor>>,
}

impl ForwardGraph<'_> {
    pub fn prediction(&self) -> Prediction {
        Prediction {
            y_t: self.y_t.value(),
            y_tc: self.y_tc.value(),
            p: self.p.item(),
            y_p: self.y_p.value(),
            attention: self.attention.clone(),
        }
    }
}

/// Grid cell containing the box midpoint, mapped through the original image
/// size and clamped: `(floor(my / Hi * H), floor(mx / Wi * W))`, row-major.
pub fn target_cell(
    bbox: &BoundingBox,
    img_w: usize,
    img_h: usize,
    grid_h: usize,
    grid_w: usize,
) -> usize {
    let (mx, my) = bbox.midpoint();
    let row = ((my / img_h as f64 * grid_h as f64).floor() as usize).min(grid_h - 1);
    let col = ((mx / img_w as f64 * grid_w as f64).floor() as usize).min(grid_w - 1);
    row * grid_w + col
}

/// Splits a `D x H x W` map into `H * W` vectors of length `D`; token
/// `row * W + col` is the feature column at `(row, col)`.
pub fn tokenize_context(a_c: &Tensor) -> Result<Vec<Tensor>> {
    let [d, h, w] = *a_c.shape() else {
        return Err(Error::dim(
            "tokenize_context",
            format!("expected D x H x W, got {:?}", a_c.shape()),
        ));
    };
    let l = h * w;
    Ok((0..l)
        .map(|i| Tensor::from_vec((0..d).map(|c| a_c.data()[c * l + i]).collect()))
        .collect())
}

/// Inverse of [`tokenize_context`].
pub fn untokenize(tokens: &[Tensor], h: usize, w: usize) -> Result<Tensor> {
    if tokens.len() != h * w || tokens.is_empty() {
        return Err(Error::dim(
            "untokenize",
            format!("{} tokens for a {h}x{w} grid", tokens.len()),
        ));
    }
    let d = tokens[0].numel();
    let l = h * w;
    let mut data = vec![0.0; d * l];
    for (i, t) in tokens.iter().enumerate() {
        for c in 0..d {
            data[c * l + i] = t.data()[c];
        }
    }
    Tensor::new(&[d, h, w], data)
}

/// Mean over all spatial cells of a `D x H x W` map.
pub fn pool_target(a_t: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let a = tape.constant(a_t.clone());
    Ok(spatial_mean(a)?.value())
}

fn spatial_mean(a: Var<'_>) -> Result<Var<'_>> {
    let shape = a.shape();
    let [d, h, w] = shape[..] else {
        return Err(Error::dim(
            "pool_target",
            format!("expected D x H x W, got {shape:?}"),
        ));
    };
    a.reshape(&[d, h * w])?.mean(1)
}

fn linear<'t>(bound: &BoundParams<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
    x.matmul(bound.get(&format!("{name}.weight"))?)?
        .add_bias(bound.get(&format!("{name}.bias"))?)
}

fn classifier<'t>(bound: &BoundParams<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
    let logits = linear(bound, name, x)?;
    let c = logits.shape()[1];
    logits.reshape(&[c])?.softmax(0)
}

impl Crtnet {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        let params = init_params(&config, rng)?;
        Ok(Crtnet { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        super::params::check_layout(&config, &params)?;
        Ok(Crtnet { config, params })
    }

    pub fn bind<'t>(&self, tape: &'t Tape, requires_grad: bool) -> BoundParams<'t> {
        self.params.bind(tape, requires_grad)
    }

    /// Convolutional feature map `D x H x W` of one stream.
    pub fn encode<'t>(
        &self,
        bound: &BoundParams<'t>,
        stream: Stream,
        img: Var<'t>,
    ) -> Result<Var<'t>> {
        let cfg = &self.config;
        let shape = img.shape();
        if shape != [3, cfg.image_side, cfg.image_side] {
            return Err(Error::dim(
                "encode",
                format!("expected [3, {s}, {s}], got {shape:?}", s = cfg.image_side),
            ));
        }
        let prefix = encoder_prefix(cfg, stream);
        let mut x = img;
        for block in 1..=ENCODER_BLOCKS {
            let w = bound.get(&format!("{prefix}.conv{block}.weight"))?;
            let b = bound.get(&format!("{prefix}.conv{block}.bias"))?;
            x = x.conv2d(w, 2, 1)?.channel_bias(b)?.relu();
        }
        let window = cfg.encoder_side() / cfg.feat_h;
        if window > 1 {
            x = x.pool_avg(window, window)?;
        }
        Ok(x)
    }

    /// Adds learned positions: `z_c[i] = token[i] + pos[i]`,
    /// `z_t = T_t + pos[cell]`. Returns `(z_c: L x D, z_t: 1 x D)`.
    pub fn positional_encode<'t>(
        &self,
        bound: &BoundParams<'t>,
        tokens: Var<'t>,
        pooled: Var<'t>,
        cell: usize,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let pos = bound.get("pos_embedding")?;
        let z_c = tokens.add(pos)?;
        let d = self.config.feat_channels;
        let z_t = pooled.reshape(&[1, d])?.add(pos.select_row(cell)?)?;
        Ok((z_c, z_t))
    }

    /// One decoder layer: multi-head cross-attention (queries from `z_t`,
    /// keys and values from `z_c`) followed by the MLP block, each wrapped as
    /// `LN(DROP(f(z)) + z)`. Returns the new query token and per-head weights.
    pub fn decoder_layer<'t>(
        &self,
        bound: &BoundParams<'t>,
        layer: usize,
        z_t: Var<'t>,
        z_c: Var<'t>,
        rng: &mut Rng,
        training: bool,
    ) -> Result<(Var<'t>, Vec<Tensor>)> {
        let cfg = &self.config;
        let p = format!("decoder.{layer}");
        let q = linear(bound, &format!("{p}.attn.q"), z_t)?;
        let k = linear(bound, &format!("{p}.attn.k"), z_c)?;
        let v = linear(bound, &format!("{p}.attn.v"), z_c)?;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(cfg.heads);
        let mut weights = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = q.slice_cols(h * dh, dh)?;
            let kh = k.slice_cols(h * dh, dh)?;
            let vh = v.slice_cols(h * dh, dh)?;
            let attn = qh.matmul(kh.transpose()?)?.scale(scale).softmax(1)?;
            weights.push(attn.value().reshape(&[cfg.tokens()])?);
            outs.push(attn.matmul(vh)?);
        }
        let eda = linear(bound, &format!("{p}.attn.o"), Var::concat_cols(&outs)?)?;
        let rate = cfg.dropout_rate;
        let z = eda.dropout(rate, training, rng)?.add(z_t)?.layernorm(
            bound.get(&format!("{p}.ln1.gamma"))?,
            bound.get(&format!("{p}.ln1.beta"))?,
            cfg.ln_eps,
        )?;
        let hidden = linear(bound, &format!("{p}.mlp.fc1"), z)?
            .relu()
            .dropout(rate, training, rng)?;
        let mlp = linear(bound, &format!("{p}.mlp.fc2"), hidden)?;
        let out = mlp.dropout(rate, training, rng)?.add(z)?.layernorm(
            bound.get(&format!("{p}.ln2.gamma"))?,
            bound.get(&format!("{p}.ln2.beta"))?,
            cfg.ln_eps,
        )?;
        Ok((out, weights))
    }

    /// Applies every decoder layer in turn, feeding each output back as the
    /// next query while `z_c` stays fixed.
    pub fn decode_stack<'t>(
        &self,
        bound: &BoundParams<'t>,
        z_t: Var<'t>,
        z_c: Var<'t>,
        rng: &mut Rng,
        training: bool,
    ) -> Result<(Var<'t>, Vec<Vec<Tensor>>)> {
        let mut z = z_t;
        let mut attention = Vec::with_capacity(self.config.decoder_layers);
        for layer in 0..self.config.decoder_layers {
            let (next, weights) = self.decoder_layer(bound, layer, z, z_c, rng, training)?;
            z = next;
            attention.push(weights);
        }
        Ok((z, attention))
    }

    /// Full forward pass on a tape.
    ///
    /// With `detach_target_heads`, the target classifier and the confidence
    /// head read a detached copy of the pooled target features, and the copy
    /// of `y_tc` mixed into `y_p` is computed from a detached decoder output,
    /// so neither the target-head losses nor the fused loss reach the
    /// encoders.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        bound: &BoundParams<'t>,
        input: &PreparedInput,
        rng: &mut Rng,
        training: bool,
    ) -> Result<ForwardGraph<'t>> {
        let cfg = &self.config;
        let (d, l) = (cfg.feat_channels, cfg.tokens());
        let a_t = self.encode(bound, Stream::Target, tape.constant(input.target.clone()))?;
        let a_c = self.encode(bound, Stream::Context, tape.constant(input.context.clone()))?;
        let tokens = a_c.reshape(&[d, l])?.transpose()?;
        let pooled = spatial_mean(a_t)?;
        let (z_c, z_t) = self.positional_encode(bound, tokens, pooled, input.cell)?;
        let (z, attention) = self.decode_stack(bound, z_t, z_c, rng, training)?;

        let y_tc = classifier(bound, "head.context", z)?;
        let head_in = if cfg.detach_target_heads {
            pooled.detach()
        } else {
            pooled
        }
        .reshape(&[1, d])?;
        let y_t = classifier(bound, "head.target", head_in)?;
        let hidden = linear(bound, "head.confidence.fc1", head_in)?.relu();
        let confidence_logit = linear(bound, "head.confidence.fc2", hidden)?.reshape(&[1])?;
        let p = confidence_logit.sigmoid();

        let y_tc_fused = if cfg.detach_target_heads {
            classifier(bound, "head.context", z.detach())?
        } else {
            y_tc
        };
        let y_p = match cfg.fusion_mode {
            FusionMode::ConfidenceWeighted => y_t
                .scale_by(p)?
                .add(y_tc_fused.scale_by(p.affine(-1.0, 1.0))?)?,
            FusionMode::TargetOnly => y_t,
            FusionMode::ContextOnly => y_tc_fused,
        };
        Ok(ForwardGraph {
            a_t,
            a_c,
            y_t,
            y_tc,
            confidence_logit,
            p,
            y_p,
            attention,
        })
    }

    /// Inference on a prepared sample, dropout off.
    pub fn predict_prepared(&self, input: &PreparedInput) -> Result<Prediction> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let graph = self.forward(&tape, &bound, input, &mut Rng::new(0), false)?;
        Ok(graph.prediction())
    }

    /// Inference on a raw `3 x Hi x Wi` image with values in `[0, 1]`.
    pub fn predict(&self, image: &Tensor, bbox: &BoundingBox) -> Result<Prediction> {
        self.predict_prepared(&PreparedInput::new(image, bbox, &self.config)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_cell_mapping() {
        // 224 px image on a 7x7 grid: midpoint (100, 30) sits in row 0, col 3.
        let b = BoundingBox::new(90, 20, 20, 20);
        assert_eq!(target_cell(&b, 224, 224, 7, 7), 3);
        assert_eq!(
            target_cell(&BoundingBox::new(0, 0, 1, 1), 224, 224, 7, 7),
            0
        );
        let corner = BoundingBox::new(222, 222, 2, 2);
        assert_eq!(target_cell(&corner, 224, 224, 7, 7), 48);
    }

    #[test]
    fn tokenize_relabels_cells() {
        let a = Tensor::new(&[2, 1, 2], vec![1., 3., 2., 4.]).unwrap();
        let toks = tokenize_context(&a).unwrap();
        assert_eq!(toks.len(), 2);
        assert_eq!(toks[0].data(), &[1., 2.]);
        assert_eq!(toks[1].data(), &[3., 4.]);
        assert_eq!(untokenize(&toks, 1, 2).unwrap(), a);
    }

    #[test]
    fn pool_target_examples() {
        let a = Tensor::new(&[1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(pool_target(&a).unwrap().data(), &[2.5]);
        let c = Tensor::full(&[3, 2, 2], 0.7);
        assert!(pool_target(&c)
            .unwrap()
            .data()
            .iter()
            .all(|&v| (v - 0.7).abs() < 1e-15));
    }
}

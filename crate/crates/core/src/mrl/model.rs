use mmvq_autodiff::{ConvSpec, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::quantize::{nearest_index, QuantMode};
use super::MrlConfig;
use crate::error::{Error, Result};
use crate::features::Modality;

#[derive(Clone, Copy, Debug)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct ResIds {
    hidden: ConvIds,
    out: ConvIds,
}

#[derive(Clone, Debug)]
struct EncoderIds {
    strided: Vec<ConvIds>,
    residual: Vec<ResIds>,
    projection: ConvIds,
    lin_w: ParamId,
    lin_b: ParamId,
}

#[derive(Clone, Debug)]
struct DecoderIds {
    lin_w: ParamId,
    lin_b: ParamId,
    projection: ConvIds,
    residual: Vec<ResIds>,
    /// Transposed convolutions in decoder order.
    strided: Vec<ConvIds>,
}

#[derive(Clone, Copy, Debug)]
struct FusionIds {
    a_w: ParamId,
    a_b: ParamId,
    b_w: ParamId,
    b_b: ParamId,
    cores: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

/// Spatial sizes through one modality's encoder: input first, then after
/// each strided convolution.
#[derive(Clone, Debug)]
struct Geometry {
    sizes: Vec<(usize, usize)>,
    output_padding: Vec<(usize, usize)>,
}

impl Geometry {
    fn bottleneck(&self) -> (usize, usize) {
        *self.sizes.last().unwrap()
    }
}

/// Per-batch VQ-VAE loss terms as tape vars.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub total: Var,
    pub mse_audio: Var,
    pub mse_video: Var,
    pub codebook: Var,
    pub commitment: Var,
    pub z: Var,
    pub zq: Var,
    pub indices: Vec<usize>,
}

/// Loss term values, averaged over a split when reported per epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub mse_audio: f64,
    pub mse_video: f64,
    pub codebook: f64,
    pub commitment: f64,
}

impl LossParts {
    pub fn read<T: Scalar>(tape: &Tape<T>, v: &LossVars) -> Self {
        let f = |x: Var| tape.value(x).item().to_f64().unwrap_or(f64::NAN);
        Self {
            total: f(v.total),
            mse_audio: f(v.mse_audio),
            mse_video: f(v.mse_video),
            codebook: f(v.codebook),
            commitment: f(v.commitment),
        }
    }

    pub fn scaled_add(&mut self, other: &Self, w: f64) {
        self.total += w * other.total;
        self.mse_audio += w * other.mse_audio;
        self.mse_video += w * other.mse_video;
        self.codebook += w * other.codebook;
        self.commitment += w * other.commitment;
    }
}

/// Inputs `[N, 1, H, W]` per modality.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub audio: Tensor<T>,
    pub video: Tensor<T>,
}

impl<T: Scalar> Batch<T> {
    /// Stacks `[H, W]` matrices into a `[N, 1, H, W]` batch.
    pub fn stack(audio: &[&Tensor<T>], video: &[&Tensor<T>]) -> Result<Self> {
        fn one<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
            let first = xs.first().ok_or_else(|| Error::validation("empty batch"))?;
            let (h, w) = (first.shape()[0], first.shape()[1]);
            let mut data = Vec::with_capacity(xs.len() * h * w);
            for x in xs {
                if x.shape() != first.shape() {
                    return Err(Error::validation(format!(
                        "FVTC shape {:?} differs from {:?} in batch",
                        x.shape(),
                        first.shape()
                    )));
                }
                data.extend_from_slice(x.data());
            }
            Ok(Tensor::new(&[xs.len(), 1, h, w], data)?)
        }
        Ok(Self {
            audio: one(audio)?,
            video: one(video)?,
        })
    }

    pub fn len(&self) -> usize {
        self.audio.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The multimodal VQ-VAE with its parameters.
#[derive(Clone, Debug)]
pub struct MrlModel<T> {
    pub config: MrlConfig,
    pub store: ParamStore<T>,
    enc: [EncoderIds; 2],
    dec: [DecoderIds; 2],
    fusion: FusionIds,
    codebook: ParamId,
    geom: [Geometry; 2],
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..=bound)))
}

fn conv<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: String,
    shape: [usize; 4],
    fan_in: usize,
    bias: usize,
) -> ConvIds {
    ConvIds {
        w: store.add(format!("{name}.w"), uniform(rng, &shape, (6.0 / fan_in as f64).sqrt())),
        b: store.add(format!("{name}.b"), Tensor::zeros(&[bias])),
    }
}

fn slot(m: Modality) -> usize {
    match m {
        Modality::Audio => 0,
        Modality::Video => 1,
    }
}

impl<T: Scalar> MrlModel<T> {
    /// Builds and randomly initializes a model. Convolutions use He-uniform
    /// and linear maps LeCun-uniform bounds, cores `U(±√3/c)` so the
    /// bilinear output keeps unit scale; biases start at zero and codebook
    /// rows at `U(±1/K)`.
    pub fn new(config: &MrlConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let e = &config.encoder;
        let mut store = ParamStore::new();
        let mut geom = Vec::new();
        let mut enc = Vec::new();
        let mut dec = Vec::new();
        let last_c = *e.strided_channels.last().unwrap();
        for m in [Modality::Audio, Modality::Video] {
            let g = Self::geometry(config, m)?;
            let p = format!("enc.{}", m.as_str());
            let k = e.strided_kernel;
            let mut strided = Vec::new();
            let mut c_in = 1;
            for (i, &c) in e.strided_channels.iter().enumerate() {
                strided.push(conv(
                    &mut store,
                    rng,
                    format!("{p}.strided{i}"),
                    [c, c_in, k, k],
                    c_in * k * k,
                    c,
                ));
                c_in = c;
            }
            let rk = e.residual_kernel;
            let residual = (0..e.residual_blocks)
                .map(|i| ResIds {
                    hidden: conv(
                        &mut store,
                        rng,
                        format!("{p}.res{i}.hidden"),
                        [e.residual_hidden, last_c, rk, rk],
                        last_c * rk * rk,
                        e.residual_hidden,
                    ),
                    out: conv(
                        &mut store,
                        rng,
                        format!("{p}.res{i}.out"),
                        [last_c, e.residual_hidden, 1, 1],
                        e.residual_hidden,
                        last_c,
                    ),
                })
                .collect();
            let pc = e.projection_channels;
            let projection = conv(&mut store, rng, format!("{p}.proj"), [pc, last_c, 1, 1], last_c, pc);
            let (bh, bw) = g.bottleneck();
            let flat = pc * bh * bw;
            let lin_w = store.add(
                format!("{p}.linear.w"),
                uniform(rng, &[flat, e.latent_dim], (3.0 / flat as f64).sqrt()),
            );
            let lin_b = store.add(format!("{p}.linear.b"), Tensor::zeros(&[e.latent_dim]));
            enc.push(EncoderIds {
                strided,
                residual,
                projection,
                lin_w,
                lin_b,
            });

            let p = format!("dec.{}", m.as_str());
            let l = config.fusion.output_dim;
            let lin_w = store.add(
                format!("{p}.linear.w"),
                uniform(rng, &[l, flat], (3.0 / l as f64).sqrt()),
            );
            let lin_b = store.add(format!("{p}.linear.b"), Tensor::zeros(&[flat]));
            let projection = conv(&mut store, rng, format!("{p}.proj"), [last_c, pc, 1, 1], pc, last_c);
            let residual = (0..e.residual_blocks)
                .map(|i| ResIds {
                    hidden: conv(
                        &mut store,
                        rng,
                        format!("{p}.res{i}.hidden"),
                        [e.residual_hidden, last_c, rk, rk],
                        last_c * rk * rk,
                        e.residual_hidden,
                    ),
                    out: conv(
                        &mut store,
                        rng,
                        format!("{p}.res{i}.out"),
                        [last_c, e.residual_hidden, 1, 1],
                        e.residual_hidden,
                        last_c,
                    ),
                })
                .collect();
            let mut strided = Vec::new();
            for i in (0..e.strided_channels.len()).rev() {
                let c_in = e.strided_channels[i];
                let c_out = if i == 0 { 1 } else { e.strided_channels[i - 1] };
                strided.push(conv(
                    &mut store,
                    rng,
                    format!("{p}.strided{i}"),
                    [c_in, c_out, k, k],
                    c_in * k * k,
                    c_out,
                ));
            }
            dec.push(DecoderIds {
                lin_w,
                lin_b,
                projection,
                residual,
                strided,
            });
            geom.push(g);
        }

        let f = &config.fusion;
        let (d, rc) = (e.latent_dim, f.rank * f.chunk);
        let lin = (3.0 / d as f64).sqrt();
        let fusion = FusionIds {
            a_w: store.add("fusion.a.w", uniform(rng, &[d, rc], lin)),
            a_b: store.add("fusion.a.b", Tensor::zeros(&[rc])),
            b_w: store.add("fusion.b.w", uniform(rng, &[d, rc], lin)),
            b_b: store.add("fusion.b.b", Tensor::zeros(&[rc])),
            cores: store.add(
                "fusion.cores",
                uniform(
                    rng,
                    &[f.rank, f.chunk, f.chunk, f.core_out],
                    3f64.sqrt() / f.chunk as f64,
                ),
            ),
            out_w: store.add(
                "fusion.out.w",
                uniform(
                    rng,
                    &[f.rank * f.core_out, f.output_dim],
                    (3.0 / (f.rank * f.core_out) as f64).sqrt(),
                ),
            ),
            out_b: store.add("fusion.out.b", Tensor::zeros(&[f.output_dim])),
        };
        let k = config.codebook.entries as f64;
        let codebook = store.add(
            "codebook.entries",
            uniform(rng, &[config.codebook.entries, f.output_dim], 1.0 / k),
        );
        let [ea, ev]: [EncoderIds; 2] = enc.try_into().unwrap();
        let [da, dv]: [DecoderIds; 2] = dec.try_into().unwrap();
        let [ga, gv]: [Geometry; 2] = geom.try_into().unwrap();
        Ok(Self {
            config: config.clone(),
            store,
            enc: [ea, ev],
            dec: [da, dv],
            fusion,
            codebook,
            geom: [ga, gv],
        })
    }

    fn geometry(config: &MrlConfig, m: Modality) -> Result<Geometry> {
        let e = &config.encoder;
        let spec = ConvSpec::new(e.stride, e.padding);
        let mut sizes = vec![config.features.fvtc_shape(m)];
        for _ in &e.strided_channels {
            let (h, w) = *sizes.last().unwrap();
            let out = spec
                .conv_out(h, w, e.strided_kernel, e.strided_kernel)
                .map_err(|err| Error::validation(format!("{} encoder: {err}", m.as_str())))?;
            sizes.push(out);
        }
        let mut output_padding = Vec::new();
        for i in (0..e.strided_channels.len()).rev() {
            let (h, w) = sizes[i + 1];
            let (th, tw) = sizes[i];
            let (oh, ow) = spec.transpose_out(h, w, e.strided_kernel, e.strided_kernel)?;
            if th < oh || tw < ow || th - oh >= e.stride || tw - ow >= e.stride {
                return Err(Error::validation(format!(
                    "{} decoder cannot restore {th}x{tw} from {h}x{w}",
                    m.as_str()
                )));
            }
            output_padding.push((th - oh, tw - ow));
        }
        Ok(Geometry { sizes, output_padding })
    }

    /// Re-creates the model structure around an existing parameter store.
    pub fn with_store<U: Scalar>(&self, store: ParamStore<U>) -> MrlModel<U> {
        MrlModel {
            config: self.config.clone(),
            store,
            enc: self.enc.clone(),
            dec: self.dec.clone(),
            fusion: self.fusion,
            codebook: self.codebook,
            geom: self.geom.clone(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> MrlModel<U> {
        self.with_store(self.store.cast())
    }

    pub fn codebook(&self) -> &Tensor<T> {
        self.store.value(self.codebook)
    }

    pub fn codebook_id(&self) -> ParamId {
        self.codebook
    }

    /// Ids of the first strided convolution kernel of each encoder.
    pub fn encoder_kernel_ids(&self) -> [ParamId; 2] {
        [self.enc[0].strided[0].w, self.enc[1].strided[0].w]
    }

    pub fn input_shape(&self, m: Modality) -> (usize, usize) {
        self.geom[slot(m)].sizes[0]
    }

    fn conv(&self, tape: &mut Tape<T>, x: Var, ids: ConvIds, spec: ConvSpec) -> Result<Var> {
        let w = tape.param(&self.store, ids.w);
        let b = tape.param(&self.store, ids.b);
        let y = tape.conv2d_with(x, w, spec)?;
        Ok(tape.channel_bias(y, b)?)
    }

    fn conv_t(&self, tape: &mut Tape<T>, x: Var, ids: ConvIds, spec: ConvSpec) -> Result<Var> {
        let w = tape.param(&self.store, ids.w);
        let b = tape.param(&self.store, ids.b);
        let y = tape.conv2d_transpose_with(x, w, spec)?;
        Ok(tape.channel_bias(y, b)?)
    }

    fn residual_stack(&self, tape: &mut Tape<T>, mut h: Var, blocks: &[ResIds]) -> Result<Var> {
        let pad = self.config.encoder.residual_kernel / 2;
        for r in blocks {
            let a = tape.relu(h);
            let a = self.conv(tape, a, r.hidden, ConvSpec::new(1, pad))?;
            let a = tape.relu(a);
            let a = self.conv(tape, a, r.out, ConvSpec::new(1, 0))?;
            h = tape.add(h, a)?;
        }
        Ok(tape.relu(h))
    }

    fn check_input(&self, m: Modality, x: &Tensor<T>) -> Result<()> {
        let (h, w) = self.input_shape(m);
        let s = x.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != h || s[3] != w {
            return Err(Error::validation(format!(
                "{} input has shape {s:?}, model expects [N, 1, {h}, {w}]",
                m.as_str()
            )));
        }
        Ok(())
    }

    /// Unimodal encoder: `[N, 1, H, W]` → `[N, latent_dim]`.
    pub fn encode(&self, tape: &mut Tape<T>, m: Modality, x: Var) -> Result<Var> {
        self.check_input(m, tape.value(x))?;
        let e = &self.config.encoder;
        let ids = &self.enc[slot(m)];
        let spec = ConvSpec::new(e.stride, e.padding);
        let mut h = x;
        for c in &ids.strided {
            h = self.conv(tape, h, *c, spec)?;
            h = tape.relu(h);
        }
        h = self.residual_stack(tape, h, &ids.residual)?;
        h = self.conv(tape, h, ids.projection, ConvSpec::new(1, 0))?;
        let n = tape.shape(h)[0];
        let flat: usize = tape.shape(h)[1..].iter().product();
        let h = tape.reshape(h, &[n, flat])?;
        let w = tape.param(&self.store, ids.lin_w);
        let b = tape.param(&self.store, ids.lin_b);
        Ok(tape.linear(h, w, Some(b))?)
    }

    /// BLOCK fusion of `[N, latent]` pairs into `[N, L]`.
    pub fn fuse(&self, tape: &mut Tape<T>, za: Var, zv: Var) -> Result<Var> {
        let f = self.fusion;
        let p = |tape: &mut Tape<T>, id| tape.param(&self.store, id);
        let (aw, ab) = (p(tape, f.a_w), p(tape, f.a_b));
        let x = tape.linear(za, aw, Some(ab))?;
        let (bw, bb) = (p(tape, f.b_w), p(tape, f.b_b));
        let y = tape.linear(zv, bw, Some(bb))?;
        let cores = p(tape, f.cores);
        let mut h = tape.block_bilinear(x, y, cores)?;
        if self.config.fusion.normalize {
            h = tape.signed_sqrt(h, T::from_f64_lossy(1e-8));
            h = tape.l2_normalize_rows(h)?;
        }
        let (ow, ob) = (p(tape, f.out_w), p(tape, f.out_b));
        Ok(tape.linear(h, ow, Some(ob))?)
    }

    /// Quantizes fused latents `z[N, L]`. Returns `(zq, codebook_loss,
    /// commitment_loss, indices)`; both losses are per-row squared distances
    /// averaged over the batch.
    pub fn quantize(&self, tape: &mut Tape<T>, z: Var, mode: QuantMode<'_, T>) -> Result<(Var, Var, Var, Vec<usize>)> {
        let n = tape.shape(z)[0];
        let l = tape.shape(z)[1];
        if !tape.value(z).all_finite() {
            return Err(Error::numeric("non-finite fused latent"));
        }
        let table = tape.param(&self.store, self.codebook);
        let inv_n = T::one() / T::from_usize(n).unwrap();
        match mode {
            QuantMode::Nearest => {
                let zt = tape.value(z).clone();
                let cb = self.codebook().clone();
                let indices = zt
                    .data()
                    .chunks(l)
                    .map(|row| nearest_index(row, &cb))
                    .collect::<Result<Vec<_>>>()?;
                let e = tape.gather_rows(table, &indices)?;
                let zq = tape.straight_through(z, e)?;
                let z_sg = tape.stop_gradient(z);
                let d = tape.sub(z_sg, e)?;
                let d = tape.square(d);
                let d = tape.sum(d);
                let cb_loss = tape.scale(d, inv_n);
                let e_sg = tape.stop_gradient(e);
                let d = tape.sub(z, e_sg)?;
                let d = tape.square(d);
                let d = tape.sum(d);
                let commit = tape.scale(d, inv_n);
                Ok((zq, cb_loss, commit, indices))
            }
            QuantMode::Frozen {
                indices,
                z_anchor,
                e_anchor,
            } => {
                if indices.len() != n {
                    return Err(Error::validation("frozen quantizer index count differs from batch"));
                }
                let e = tape.gather_rows(table, indices)?;
                let z0 = tape.constant(z_anchor.clone());
                let e0 = tape.constant(e_anchor.clone());
                let shift = tape.sub(z, z0)?;
                let zq = tape.add(e0, shift)?;
                let d = tape.sub(z0, e)?;
                let d = tape.square(d);
                let d = tape.sum(d);
                let cb_loss = tape.scale(d, inv_n);
                let d = tape.sub(z, e0)?;
                let d = tape.square(d);
                let d = tape.sum(d);
                let commit = tape.scale(d, inv_n);
                Ok((zq, cb_loss, commit, indices.to_vec()))
            }
        }
    }

    /// Decoder for one modality: `[N, L]` → `[N, 1, H, W]`.
    pub fn decode(&self, tape: &mut Tape<T>, zq: Var, m: Modality) -> Result<Var> {
        let e = &self.config.encoder;
        let ids = &self.dec[slot(m)];
        let g = &self.geom[slot(m)];
        let l = self.config.fusion.output_dim;
        if tape.shape(zq).len() != 2 || tape.shape(zq)[1] != l {
            return Err(Error::validation(format!(
                "decoder input has shape {:?}, expects [N, {l}]",
                tape.shape(zq)
            )));
        }
        let n = tape.shape(zq)[0];
        let w = tape.param(&self.store, ids.lin_w);
        let b = tape.param(&self.store, ids.lin_b);
        let h = tape.linear(zq, w, Some(b))?;
        let (bh, bw) = g.bottleneck();
        let h = tape.reshape(h, &[n, e.projection_channels, bh, bw])?;
        let h = self.conv(tape, h, ids.projection, ConvSpec::new(1, 0))?;
        let mut h = self.residual_stack(tape, h, &ids.residual)?;
        let last = ids.strided.len() - 1;
        for (i, (c, op)) in ids.strided.iter().zip(&g.output_padding).enumerate() {
            let spec = ConvSpec::new(e.stride, e.padding).with_output_padding(op.0, op.1);
            h = self.conv_t(tape, h, *c, spec)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Full forward pass with the four-term loss
    /// `mse_a + mse_v + codebook + beta·commitment`.
    pub fn loss(&self, tape: &mut Tape<T>, batch: &Batch<T>, mode: QuantMode<'_, T>) -> Result<LossVars> {
        let xa = tape.constant(batch.audio.clone());
        let xv = tape.constant(batch.video.clone());
        let za = self.encode(tape, Modality::Audio, xa)?;
        let zv = self.encode(tape, Modality::Video, xv)?;
        let z = self.fuse(tape, za, zv)?;
        let (zq, codebook, commitment, indices) = self.quantize(tape, z, mode)?;
        let ra = self.decode(tape, zq, Modality::Audio)?;
        let rv = self.decode(tape, zq, Modality::Video)?;
        let mse_audio = tape.mse(ra, xa)?;
        let mse_video = tape.mse(rv, xv)?;
        let beta = T::from_f64_lossy(self.config.codebook.beta);
        let rec = tape.add(mse_audio, mse_video)?;
        let t = tape.add(rec, codebook)?;
        let c = tape.scale(commitment, beta);
        let total = tape.add(t, c)?;
        Ok(LossVars {
            total,
            mse_audio,
            mse_video,
            codebook,
            commitment,
            z,
            zq,
            indices,
        })
    }

    /// Encoder + fusion + nearest-entry lookup without the decoders.
    pub fn embed(&self, batch: &Batch<T>) -> Result<(Vec<usize>, Tensor<T>)> {
        let mut tape = Tape::new();
        let xa = tape.constant(batch.audio.clone());
        let xv = tape.constant(batch.video.clone());
        let za = self.encode(&mut tape, Modality::Audio, xa)?;
        let zv = self.encode(&mut tape, Modality::Video, xv)?;
        let z = self.fuse(&mut tape, za, zv)?;
        let (zq, _, _, idx) = self.quantize(&mut tape, z, QuantMode::Nearest)?;
        Ok((idx, tape.value(zq).clone()))
    }
}

/// Direct triple-sum BLOCK product for one pair of projected vectors:
/// `out[r·c' + k] = Σ_{m,n} x[r·c + m]·y[r·c + n]·cores[r, m, n, k]`.
pub fn block_fuse_reference(x: &[f64], y: &[f64], cores: &Tensor<f64>) -> Vec<f64> {
    let s = cores.shape();
    let (r, c, co) = (s[0], s[1], s[3]);
    let mut out = vec![0.0; r * co];
    for b in 0..r {
        for k in 0..co {
            let mut acc = 0.0;
            for m in 0..c {
                for n in 0..c {
                    acc += x[b * c + m] * y[b * c + n] * cores.data()[((b * c + m) * c + n) * co + k];
                }
            }
            out[b * co + k] = acc;
        }
    }
    out
}

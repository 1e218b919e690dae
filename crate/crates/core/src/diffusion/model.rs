//! Small noise predictor: an input projection plus time and position
//! embeddings, a learned class-token embedding, a residual stack of CrossWKV
//! layers reading those tokens, and an output projection.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::PIXELS;
use crate::autodiff::{Tape, Var};
use crate::crosswkv::{self, Checkpoint, CrossWkvParams, LayerConfig};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor, XAVIER_GAIN};

/// Checkpoint record holding the conditioning length.
const COND_LEN_RECORD: &str = "meta.cond_len";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiserConfig {
    /// Shared by every layer; `is_first_layer` is set per position.
    pub layer: LayerConfig,
    pub depth: usize,
    pub channels: usize,
    pub seq_len: usize,
    pub cond_len: usize,
}

impl DenoiserConfig {
    /// Two layers, D=32, H=2, N=16, D_q=8, one channel, 64 pixels, and the
    /// class tokens tiled to the full image length.
    pub fn toy() -> Self {
        Self {
            layer: LayerConfig::new(32, 8, 32, 2).expect("valid toy layer"),
            depth: 2,
            channels: 1,
            seq_len: PIXELS,
            cond_len: PIXELS,
        }
    }

    pub fn layer_config(&self, index: usize) -> LayerConfig {
        self.layer.with_first_layer(index == 0)
    }

    pub fn validate(&self) -> Result<()> {
        self.layer.validate()?;
        if self.depth == 0 || self.channels == 0 || self.seq_len == 0 {
            return Err(Error::Config(
                "depth, channels and seq_len must be positive".into(),
            ));
        }
        if self.cond_len == 0 || self.cond_len > self.seq_len {
            return Err(Error::Config(format!(
                "cond_len {} must be in 1..={}",
                self.cond_len, self.seq_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams<P = Tensor> {
    pub w_in: P,
    pub b_in: P,
    pub w_time: P,
    pub pos: P,
    pub w_tok: P,
    pub b_tok: P,
    pub layers: Vec<CrossWkvParams<P>>,
    pub w_out: P,
    pub b_out: P,
}

impl<P> DenoiserParams<P> {
    /// Named fields in checkpoint order.
    pub fn fields(&self) -> Vec<(String, &P)> {
        let mut out = vec![
            ("in.w".to_string(), &self.w_in),
            ("in.b".to_string(), &self.b_in),
            ("time.w".to_string(), &self.w_time),
            ("pos".to_string(), &self.pos),
            ("tok.w".to_string(), &self.w_tok),
            ("tok.b".to_string(), &self.b_tok),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(
                layer
                    .fields()
                    .into_iter()
                    .map(|(n, p)| (format!("layer{i}.{n}"), p)),
            );
        }
        out.push(("out.w".to_string(), &self.w_out));
        out.push(("out.b".to_string(), &self.b_out));
        out
    }

    pub fn fields_mut(&mut self) -> Vec<(String, &mut P)> {
        let mut out = vec![
            ("in.w".to_string(), &mut self.w_in),
            ("in.b".to_string(), &mut self.b_in),
            ("time.w".to_string(), &mut self.w_time),
            ("pos".to_string(), &mut self.pos),
            ("tok.w".to_string(), &mut self.w_tok),
            ("tok.b".to_string(), &mut self.b_tok),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.extend(
                layer
                    .fields_mut()
                    .into_iter()
                    .map(|(n, p)| (format!("layer{i}.{n}"), p)),
            );
        }
        out.push(("out.w".to_string(), &mut self.w_out));
        out.push(("out.b".to_string(), &mut self.b_out));
        out
    }
}

/// `[sin(t·f_i), cos(t·f_i)]` with `f_i = 10000^(−i/(d/2))`; odd `d` leaves
/// the last feature at zero.
pub fn sinusoidal(position: f64, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; d];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (position * freq).sin();
        out[half + i] = (position * freq).cos();
    }
    out
}

fn time_features(t: &[usize], d: usize) -> Result<Tensor> {
    let data = t.iter().flat_map(|&ti| sinusoidal(ti as f64, d)).collect();
    Tensor::new([t.len(), 1, d], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub params: DenoiserParams,
}

impl Denoiser {
    /// Xavier (gain 1) input/output projections and token embedding, Xavier
    /// (gain `2^-2.5`) time projection, sinusoidal position table, layers from
    /// [`crosswkv::init_params`].
    pub fn init(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.layer.d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_in = tensor::xavier_uniform(cfg.channels, d, 1.0, &mut rng);
        let w_time = tensor::xavier_uniform(d, d, XAVIER_GAIN, &mut rng);
        let w_out = tensor::xavier_uniform(d, cfg.channels, 1.0, &mut rng);
        let d_q = cfg.layer.d_q;
        let w_tok = tensor::xavier_uniform(d_q, d_q, 1.0, &mut rng);
        let layers = (0..cfg.depth)
            .map(|i| crosswkv::init_params(&cfg.layer_config(i), seed.wrapping_add(1 + i as u64)))
            .collect::<Result<_>>()?;
        let pos_data = (0..cfg.seq_len)
            .flat_map(|p| sinusoidal(p as f64, d))
            .collect();
        Ok(Self {
            cfg,
            params: DenoiserParams {
                w_in,
                b_in: Tensor::zeros([d]),
                w_time,
                pos: Tensor::new([cfg.seq_len, d], pos_data)?,
                w_tok,
                b_tok: Tensor::zeros([d_q]),
                layers,
                w_out,
                b_out: Tensor::zeros([cfg.channels]),
            },
        })
    }

    fn is_trainable(&self, name: &str) -> bool {
        match name.split_once('.') {
            Some((prefix, field)) if prefix.starts_with("layer") => {
                CrossWkvParams::is_trainable(&self.cfg.layer, field)
            }
            _ => true,
        }
    }

    /// Mirrors the parameters on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> DenoiserParams<Var> {
        let mut put = |name: &str, t: &Tensor| {
            if trainable && self.is_trainable(name) {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let p = &self.params;
        DenoiserParams {
            w_in: put("in.w", &p.w_in),
            b_in: put("in.b", &p.b_in),
            w_time: put("time.w", &p.w_time),
            pos: put("pos", &p.pos),
            w_tok: put("tok.w", &p.w_tok),
            b_tok: put("tok.b", &p.b_tok),
            layers: p
                .layers
                .iter()
                .map(|lp| lp.map(|field, t| put(&format!("layer.{field}"), t)))
                .collect(),
            w_out: put("out.w", &p.w_out),
            b_out: put("out.b", &p.b_out),
        }
    }

    /// Predicted noise for `x_t: [B, seq_len, C]`, `cond: [B, cond_len, D_q]`
    /// and one timestep per row.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &DenoiserParams<Var>,
        x_t: Var,
        cond: Var,
        t: &[usize],
        training: bool,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let shape = tape.shape(x_t).to_vec();
        if shape.len() != 3
            || shape[1] != cfg.seq_len
            || shape[2] != cfg.channels
            || t.len() != shape[0]
        {
            return Err(Error::shape(
                "denoiser input",
                &shape,
                &[t.len(), cfg.seq_len, cfg.channels],
            ));
        }
        let h = tape.matmul(x_t, vars.w_in)?;
        let h = tape.add(h, vars.b_in)?;
        let feats = tape.constant(time_features(t, cfg.layer.d)?);
        let temb = tape.matmul(feats, vars.w_time)?;
        let h = tape.add(h, temb)?;
        let mut h = tape.add(h, vars.pos)?;
        // the bias gives all-zero (unconditional) tokens a learned embedding
        let q = tape.matmul(cond, vars.w_tok)?;
        let q = tape.add(q, vars.b_tok)?;

        let mut v_first = None;
        for (i, lp) in vars.layers.iter().enumerate() {
            let out = crosswkv::forward_on_tape(
                tape,
                &cfg.layer_config(i),
                lp,
                h,
                q,
                v_first,
                None,
                training,
            )?;
            if i == 0 {
                v_first = Some(out.v_out);
            }
            h = tape.add(h, out.o)?;
        }
        let eps = tape.matmul(h, vars.w_out)?;
        tape.add(eps, vars.b_out)
    }

    /// Inference forward on a scratch tape.
    pub fn predict(&self, x_t: &Tensor, cond: &Tensor, t: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(x_t.clone());
        let c = tape.constant(cond.clone());
        let out = self.forward_on_tape(&mut tape, &vars, x, c, t, false)?;
        Ok(tape.value(out).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            dtype: crate::tensor::DType::F64,
            config: self.cfg.layer,
            tensors: self
                .params
                .fields()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .chain([(
                    COND_LEN_RECORD.to_string(),
                    Tensor::full([1], self.cfg.cond_len as f64),
                )])
                .collect(),
        }
    }

    /// Depth, channels and sequence length are read back from the parameter
    /// shapes, the token length from its own record.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let get = |name: &str| {
            ck.get(name).cloned().ok_or_else(|| Error::Checkpoint {
                record: name.to_string(),
                reason: "missing".into(),
            })
        };
        let w_in = get("in.w")?;
        let pos = get("pos")?;
        let depth = (0..)
            .take_while(|i| ck.get(&format!("layer{i}.w_r")).is_some())
            .count();
        let cond_len = match get(COND_LEN_RECORD)?.data() {
            &[v] if v >= 1.0 && v.fract() == 0.0 => v as usize,
            other => {
                return Err(Error::Checkpoint {
                    record: COND_LEN_RECORD.into(),
                    reason: format!("expected one positive integer, got {other:?}"),
                })
            }
        };
        let layer = ck.config.with_first_layer(true);
        let cfg = DenoiserConfig {
            layer,
            depth,
            channels: w_in.shape()[0],
            seq_len: pos.shape()[0],
            cond_len,
        };
        cfg.validate().map_err(|e| Error::Checkpoint {
            record: "header".into(),
            reason: e.to_string(),
        })?;
        let layers = (0..depth)
            .map(|i| ck.layer_params(&format!("layer{i}."), &cfg.layer_config(i)))
            .collect::<Result<_>>()?;
        let model = Self {
            cfg,
            params: DenoiserParams {
                w_in,
                b_in: get("in.b")?,
                w_time: get("time.w")?,
                pos,
                w_tok: get("tok.w")?,
                b_tok: get("tok.b")?,
                layers,
                w_out: get("out.w")?,
                b_out: get("out.b")?,
            },
        };
        let expected = model.params.fields().len() + 1;
        if ck.tensors.len() != expected {
            return Err(Error::Checkpoint {
                record: "header".into(),
                reason: format!(
                    "{} records, a depth-{depth} denoiser has {expected}",
                    ck.tensors.len()
                ),
            });
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoidal_features() {
        let e = sinusoidal(0.0, 6);
        assert_eq!(e, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let e = sinusoidal(2.0, 4);
        assert!((e[0] - 2f64.sin()).abs() < 1e-15);
        assert!((e[3] - (2.0 * 0.01f64).cos()).abs() < 1e-15);
    }

    #[test]
    fn prediction_shape_and_determinism() {
        let model = Denoiser::init(DenoiserConfig::toy(), 1).unwrap();
        assert_eq!(model, Denoiser::init(DenoiserConfig::toy(), 1).unwrap());
        let x = Tensor::zeros([2, 64, 1]);
        let cond = super::super::data::class_cond(&[Some(0), Some(3)], 64, 8).unwrap();
        let eps = model.predict(&x, &cond, &[5, 100]).unwrap();
        assert_eq!(eps.shape(), [2, 64, 1]);
        assert!(eps.is_finite());
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = Denoiser::init(DenoiserConfig::toy(), 2).unwrap();
        let ck = model.to_checkpoint();
        let bytes = ck.to_bytes();
        let back = Denoiser::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.to_checkpoint().to_bytes(), bytes);
    }
}

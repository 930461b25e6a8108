//! Learned convolutional sparse coding: unrolled ISTA steps with learned filter banks
//! and per-channel soft thresholds, optionally followed by a Mamba pass on the code.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::{self, read, BiMamba, MambaConfig};
use crate::tape::{shrink, softplus_inv, Tape, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Initial per-channel threshold after the softplus map.
pub const THETA_INIT: f64 = 0.01;

/// `sign(x) * max(|x| - theta_c, 0)` on a `[N, C, H, W]` tensor.
pub fn soft_threshold(x: &Tensor, theta: &[f64]) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    if theta.len() != c {
        return Err(Error::Shape(format!("{} thresholds for {c} channels", theta.len())));
    }
    if let Some(bad) = theta.iter().find(|t| !(**t >= 0.0)) {
        return Err(Error::Precondition(format!("soft threshold must be nonnegative, got {bad}")));
    }
    let plane = h * w;
    let data = x.data().iter().enumerate().map(|(i, &v)| shrink(v, theta[(i / plane) % c])).collect();
    Tensor::from_vec(x.shape(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DictionaryConfig {
    pub kernel: usize,
    /// Derive the encoder as the adjoint of the decoder instead of learning it.
    #[serde(default)]
    pub tied: bool,
}

impl Default for DictionaryConfig {
    fn default() -> Self {
        DictionaryConfig { kernel: 3, tied: false }
    }
}

/// Encoder/decoder filter banks and thresholds of one LCSC iteration.
#[derive(Clone, Debug)]
pub struct ConvDictionary {
    encode: Option<ParamId>,
    decode: ParamId,
    theta_raw: ParamId,
    pub c_in: usize,
    pub c_code: usize,
    pub kernel: usize,
}

/// A dictionary's tensors placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct DictVars {
    /// `[C_code, C_in, k, k]`
    pub encode: Var,
    /// `[C_in, C_code, k, k]`
    pub decode: Var,
    /// `[C_code]`, nonnegative
    pub theta: Var,
}

impl ConvDictionary {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        path: &str,
        c_in: usize,
        c_code: usize,
        cfg: DictionaryConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let k = cfg.kernel;
        if k.is_multiple_of(2) {
            return Err(Error::Config(format!("dictionary kernel must be odd, got {k}")));
        }
        let dec_bound = 0.5 / ((c_code * k * k) as f64).sqrt();
        let enc_bound = 0.5 / ((c_in * k * k) as f64).sqrt();
        let decode = store.add(format!("{path}.decode"), Tensor::uniform(&[c_in, c_code, k, k], dec_bound, rng));
        let encode = (!cfg.tied)
            .then(|| store.add(format!("{path}.encode"), Tensor::uniform(&[c_code, c_in, k, k], enc_bound, rng)));
        let theta_raw = store.add(format!("{path}.theta_raw"), Tensor::full(&[c_code], softplus_inv(THETA_INIT)));
        Ok(ConvDictionary { encode, decode, theta_raw, c_in, c_code, kernel: k })
    }

    pub fn vars(&self, tape: &mut Tape, store: &ParamStore, train: bool) -> Result<DictVars> {
        let decode = read(tape, store, self.decode, train);
        let encode = match self.encode {
            Some(id) => read(tape, store, id, train),
            None => tape.conv_adjoint(decode)?,
        };
        let raw = read(tape, store, self.theta_raw, train);
        let theta = tape.softplus(raw);
        Ok(DictVars { encode, decode, theta })
    }
}

/// One unrolled ISTA iteration `z+ = ST(z + E(x - D z), theta)`.
pub fn lcsc_step(tape: &mut Tape, z: Var, x: Var, dict: &DictVars) -> Result<Var> {
    let zc = tape.shape(z)[1];
    let xc = tape.shape(x)[1];
    let enc = tape.shape(dict.encode).to_vec();
    let dec = tape.shape(dict.decode).to_vec();
    if enc[0] != zc || enc[1] != xc || dec[0] != xc || dec[1] != zc {
        return Err(Error::Config(format!(
            "dictionary encode {enc:?} / decode {dec:?} incompatible with code channels {zc} and input channels {xc}"
        )));
    }
    let recon = tape.conv2d(z, dict.decode, None, 1)?;
    let residual = tape.sub(x, recon)?;
    let correction = tape.conv2d(residual, dict.encode, None, 1)?;
    let updated = tape.add(z, correction)?;
    tape.soft_threshold(updated, dict.theta)
}

/// LCSC step followed by a residual Mamba pass on the raster-flattened code.
#[derive(Clone, Debug)]
pub struct MlcscBlock {
    pub dict: ConvDictionary,
    pub mamba: Option<BiMamba>,
}

impl MlcscBlock {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        path: &str,
        c_in: usize,
        c_code: usize,
        dict_cfg: DictionaryConfig,
        mamba_cfg: MambaConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let dict = ConvDictionary::init(store, &format!("{path}.dict"), c_in, c_code, dict_cfg, rng)?;
        let mamba = BiMamba::init(store, &format!("{path}.mamba"), c_code, mamba_cfg, rng);
        Ok(MlcscBlock { dict, mamba })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z: Var, x: Var, train: bool) -> Result<Var> {
        let d = self.dict.vars(tape, store, train)?;
        let z = lcsc_step(tape, z, x, &d)?;
        ssm::apply_optional(self.mamba.as_ref(), tape, store, z, train)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    pub code_channels: usize,
    pub blocks: usize,
    pub dictionary: DictionaryConfig,
    pub mamba: MambaConfig,
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig {
            code_channels: 32,
            blocks: 4,
            dictionary: DictionaryConfig::default(),
            mamba: MambaConfig::default(),
        }
    }
}

/// Initial convolution plus shrinkage, then a sequence of MLCSC blocks.
#[derive(Clone, Debug)]
pub struct EncodeStack {
    init_conv: ParamId,
    init_theta_raw: ParamId,
    pub blocks: Vec<MlcscBlock>,
    pub c_in: usize,
    pub c_code: usize,
}

impl EncodeStack {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        path: &str,
        c_in: usize,
        cfg: &StackConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.blocks == 0 {
            return Err(Error::Config("an encode stack needs at least one MLCSC block".into()));
        }
        let k = cfg.dictionary.kernel;
        if k.is_multiple_of(2) {
            return Err(Error::Config(format!("dictionary kernel must be odd, got {k}")));
        }
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        let init_conv =
            store.add(format!("{path}.init_conv"), Tensor::uniform(&[cfg.code_channels, c_in, k, k], bound, rng));
        let init_theta_raw =
            store.add(format!("{path}.init_theta_raw"), Tensor::full(&[cfg.code_channels], softplus_inv(THETA_INIT)));
        let blocks = (0..cfg.blocks)
            .map(|i| {
                MlcscBlock::init(
                    store,
                    &format!("{path}.block{i}"),
                    c_in,
                    cfg.code_channels,
                    cfg.dictionary,
                    cfg.mamba,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(EncodeStack { init_conv, init_theta_raw, blocks, c_in, c_code: cfg.code_channels })
    }

    /// `z0 = ST(conv(x))`.
    pub fn initial_code(&self, tape: &mut Tape, store: &ParamStore, x: Var, train: bool) -> Result<Var> {
        let w = read(tape, store, self.init_conv, train);
        let raw = read(tape, store, self.init_theta_raw, train);
        let theta = tape.softplus(raw);
        let c = tape.conv2d(x, w, None, 1)?;
        tape.soft_threshold(c, theta)
    }

    /// Sparse code of `x` after every block has been applied once.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, train: bool) -> Result<Var> {
        let mut z = self.initial_code(tape, store, x, train)?;
        for block in &self.blocks {
            z = block.forward(tape, store, z, x, train)?;
        }
        Ok(z)
    }
}

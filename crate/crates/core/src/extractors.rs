//! Modality-dependent (MD) and modality-invariant (MI) feature extractors.
//!
//! An MD extractor renders a sparse code of the image through its own filter bank;
//! the MI part is what remains after subtracting it. The MI extractor encodes MI
//! features once and renders the shared code in both modalities.

use rand::Rng;

use crate::error::{Error, Result};
use crate::sparse_coding::{EncodeStack, StackConfig};
use crate::ssm::read;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Which side of a pair a network branch belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    /// Moving image modality (RGB in the plant data).
    X,
    /// Fixed image modality (infrared).
    Y,
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "rgb" | "moving" => Ok(Modality::X),
            "y" | "ir" | "fixed" => Ok(Modality::Y),
            other => Err(Error::Config(format!("unconfigured modality {other:?}"))),
        }
    }
}

fn synthesis_filter<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: String,
    c_out: usize,
    c_code: usize,
    k: usize,
    rng: &mut R,
) -> ParamId {
    let bound = 0.5 / ((c_code * k * k) as f64).sqrt();
    store.add(name, Tensor::uniform(&[c_out, c_code, k, k], bound, rng))
}

/// Modality-dependent feature extractor.
#[derive(Clone, Debug)]
pub struct Mdfe {
    pub stack: EncodeStack,
    md_filter: ParamId,
    pub channels: usize,
}

impl Mdfe {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        path: &str,
        channels: usize,
        cfg: &StackConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let stack = EncodeStack::init(store, &format!("{path}.stack"), channels, cfg, rng)?;
        let md_filter = synthesis_filter(
            store,
            format!("{path}.md_filter"),
            channels,
            cfg.code_channels,
            cfg.dictionary.kernel,
            rng,
        );
        Ok(Mdfe { stack, md_filter, channels })
    }

    /// MD features with the same shape as `img`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, img: Var, train: bool) -> Result<Var> {
        let (_, c, _, _) = tape.value(img).dims4()?;
        if c != self.channels {
            return Err(Error::Shape(format!("extractor for {} channels got {c}", self.channels)));
        }
        let code = self.stack.forward(tape, store, img, train)?;
        let w = read(tape, store, self.md_filter, train);
        tape.conv2d(code, w, None, 1)
    }
}

/// `mi = img - md`.
pub fn split_mi(tape: &mut Tape, img: Var, md: Var) -> Result<Var> {
    tape.sub(img, md)
}

/// Tensor form of [`split_mi`].
pub fn split_mi_tensor(img: &Tensor, md: &Tensor) -> Result<Tensor> {
    if img.shape() != md.shape() {
        return Err(Error::Shape(format!("image {:?} vs MD {:?}", img.shape(), md.shape())));
    }
    Tensor::from_vec(img.shape(), img.data().iter().zip(md.data()).map(|(a, b)| a - b).collect())
}

/// Modality-invariant feature extractor with one shared code and two renderings.
#[derive(Clone, Debug)]
pub struct Mife {
    pub stack: EncodeStack,
    filter_x: ParamId,
    filter_y: ParamId,
    pub in_channels: usize,
}

/// The two renderings of a shared MI code.
#[derive(Clone, Copy, Debug)]
pub struct ReconPair {
    pub r_x: Var,
    pub r_y: Var,
}

impl Mife {
    /// `in_channels` is the MI input width; `out_channels` the image width of each rendering.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        path: &str,
        in_channels: usize,
        out_channels: usize,
        cfg: &StackConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let stack = EncodeStack::init(store, &format!("{path}.stack"), in_channels, cfg, rng)?;
        let k = cfg.dictionary.kernel;
        let filter_x = synthesis_filter(store, format!("{path}.mi_x_filter"), out_channels, cfg.code_channels, k, rng);
        let filter_y = synthesis_filter(store, format!("{path}.mi_y_filter"), out_channels, cfg.code_channels, k, rng);
        Ok(Mife { stack, filter_x, filter_y, in_channels })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mi: Var, train: bool) -> Result<ReconPair> {
        let code = self.stack.forward(tape, store, mi, train)?;
        let wx = read(tape, store, self.filter_x, train);
        let wy = read(tape, store, self.filter_y, train);
        let r_x = tape.conv2d(code, wx, None, 1)?;
        let r_y = tape.conv2d(code, wy, None, 1)?;
        Ok(ReconPair { r_x, r_y })
    }
}

//! Deformation-field prediction (U-Net with a Mamba bottleneck) and spatial-transformer warping.

pub mod warp;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::{self, read, BiMamba, MambaConfig};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};

const LEAKY_SLOPE: f64 = 0.2;

/// Dense displacement field `[2, H, W]` in pixels: channel 0 is `dy`, channel 1 is `dx`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    pub phi: Tensor,
}

impl DeformationField {
    pub fn zeros(h: usize, w: usize) -> Self {
        DeformationField { phi: Tensor::zeros(&[2, h, w]) }
    }

    pub fn new(phi: Tensor) -> Result<Self> {
        match phi.shape() {
            [2, _, _] => Ok(DeformationField { phi }),
            s => Err(Error::Shape(format!("deformation field must be [2, H, W], got {s:?}"))),
        }
    }

    pub fn height(&self) -> usize {
        self.phi.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.phi.shape()[2]
    }

    /// Largest displacement norm over all pixels.
    pub fn max_norm(&self) -> f64 {
        let plane = self.height() * self.width();
        let d = self.phi.data();
        (0..plane).map(|p| d[p].hypot(d[plane + p])).fold(0.0, f64::max)
    }
}

/// Bilinear warp `out(p) = img(p + phi(p))` of a `[C, H, W]` tensor with clamp-to-edge borders.
pub fn stn_warp(img: &Tensor, field: &DeformationField) -> Result<Tensor> {
    let [c, h, w] = img.shape()[..] else {
        return Err(Error::Shape(format!("expected [C, H, W], got {:?}", img.shape())));
    };
    if field.height() != h || field.width() != w {
        return Err(Error::Shape(format!("field {:?} for image {:?}", field.phi.shape(), img.shape())));
    }
    if field.phi.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN in deformation field".into()));
    }
    let mut out = vec![0.0; img.len()];
    warp::forward(img.data(), field.phi.data(), c, h, w, &mut out);
    Tensor::from_vec(img.shape(), out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub bottleneck: MambaConfig,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig { depth: 3, base_channels: 16, bottleneck: MambaConfig::default() }
    }
}

impl UNetConfig {
    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << self.depth;
        if self.depth == 0 {
            return Err(Error::Config("U-Net depth must be at least 1".into()));
        }
        if !h.is_multiple_of(f) || !w.is_multiple_of(f) {
            return Err(Error::Config(format!("{h}x{w} input is not divisible by 2^{} = {f}", self.depth)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
    stride: usize,
}

impl ConvLayer {
    fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        path: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        // He-uniform for leaky ReLU
        let bound = (6.0 / ((c_in * 9) as f64 * (1.0 + LEAKY_SLOPE * LEAKY_SLOPE))).sqrt();
        let w = store.add(format!("{path}.weight"), Tensor::uniform(&[c_out, c_in, 3, 3], bound, rng));
        let b = store.add(format!("{path}.bias"), Tensor::zeros(&[c_out]));
        ConvLayer { w, b, stride }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, train: bool) -> Result<Var> {
        let w = read(tape, store, self.w, train);
        let b = read(tape, store, self.b, train);
        let y = tape.conv2d(x, w, Some(b), self.stride)?;
        Ok(tape.leaky_relu(y, LEAKY_SLOPE))
    }
}

/// Registration module: concatenated MI features in, displacement field out.
#[derive(Clone, Debug)]
pub struct M3rm {
    pub cfg: UNetConfig,
    stem: Vec<ConvLayer>,
    down: Vec<Vec<ConvLayer>>,
    up: Vec<Vec<ConvLayer>>,
    pub bottleneck: Option<BiMamba>,
    head_w: ParamId,
    head_b: ParamId,
}

impl M3rm {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        path: &str,
        in_channels: usize,
        cfg: UNetConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.depth == 0 || cfg.base_channels == 0 {
            return Err(Error::Config("U-Net needs depth >= 1 and base channels >= 1".into()));
        }
        let c0 = cfg.channels(0);
        let stem = vec![
            ConvLayer::init(store, &format!("{path}.stem0"), in_channels, c0, 1, rng),
            ConvLayer::init(store, &format!("{path}.stem1"), c0, c0, 1, rng),
        ];
        let mut down = Vec::with_capacity(cfg.depth);
        for l in 1..=cfg.depth {
            let (ci, co) = (cfg.channels(l - 1), cfg.channels(l));
            down.push(vec![
                ConvLayer::init(store, &format!("{path}.down{l}.0"), ci, co, 2, rng),
                ConvLayer::init(store, &format!("{path}.down{l}.1"), co, co, 1, rng),
            ]);
        }
        let bottleneck = BiMamba::init(store, &format!("{path}.bottleneck"), cfg.channels(cfg.depth), cfg.bottleneck, rng);
        let mut up = Vec::with_capacity(cfg.depth);
        for l in (1..=cfg.depth).rev() {
            let (deep, skip) = (cfg.channels(l), cfg.channels(l - 1));
            up.push(vec![
                ConvLayer::init(store, &format!("{path}.up{l}.0"), deep + skip, skip, 1, rng),
                ConvLayer::init(store, &format!("{path}.up{l}.1"), skip, skip, 1, rng),
            ]);
        }
        // zero-initialised head: the untrained module predicts the identity transform
        let head_w = store.add(format!("{path}.flow.weight"), Tensor::zeros(&[2, c0, 3, 3]));
        let head_b = store.add(format!("{path}.flow.bias"), Tensor::zeros(&[2]));
        Ok(M3rm { cfg, stem, down, up, bottleneck, head_w, head_b })
    }

    /// Field `[N, 2, H, W]` from two `[N, C, H, W]` MI feature maps.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mi_x: Var, mi_y: Var, train: bool) -> Result<Var> {
        let (_, _, h, w) = tape.value(mi_x).dims4()?;
        if tape.shape(mi_x) != tape.shape(mi_y) {
            return Err(Error::Shape(format!("MI features {:?} vs {:?}", tape.shape(mi_x), tape.shape(mi_y))));
        }
        self.cfg.check_input(h, w)?;
        let mut x = tape.concat_channels(mi_x, mi_y)?;
        for layer in &self.stem {
            x = layer.forward(tape, store, x, train)?;
        }
        let mut skips = vec![x];
        for level in &self.down {
            for layer in level {
                x = layer.forward(tape, store, x, train)?;
            }
            skips.push(x);
        }
        skips.pop();
        x = ssm::apply_optional(self.bottleneck.as_ref(), tape, store, x, train)?;
        for level in &self.up {
            let skip = skips.pop().expect("one skip per level");
            let upsampled = tape.upsample2(x)?;
            x = tape.concat_channels(upsampled, skip)?;
            for layer in level {
                x = layer.forward(tape, store, x, train)?;
            }
        }
        let hw = read(tape, store, self.head_w, train);
        let hb = read(tape, store, self.head_b, train);
        tape.conv2d(x, hw, Some(hb), 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::MambaMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unet(mode: MambaMode) -> (ParamStore, M3rm) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = UNetConfig { depth: 3, base_channels: 4, bottleneck: MambaConfig { mode, state: 4, ..Default::default() } };
        let m = M3rm::init(&mut store, "m3rm", 2, cfg, &mut rng).unwrap();
        (store, m)
    }

    #[test]
    fn initial_field_is_zero_with_expected_shape() {
        let (store, m) = unet(MambaMode::Bi);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::uniform(&[1, 1, 64, 64], 1.0, &mut rng));
        let b = tape.constant(Tensor::uniform(&[1, 1, 64, 64], 1.0, &mut rng));
        let phi = m.forward(&mut tape, &store, a, b, false).unwrap();
        assert_eq!(tape.shape(phi), &[1, 2, 64, 64]);
        assert!(tape.value(phi).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_input_is_config_error() {
        let (store, m) = unet(MambaMode::None);
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1, 1, 20, 24]));
        assert!(matches!(m.forward(&mut tape, &store, a, a, false), Err(Error::Config(_))));
    }

    #[test]
    fn bottleneck_mode_changes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xa = Tensor::uniform(&[1, 1, 16, 16], 1.0, &mut rng);
        let xb = Tensor::uniform(&[1, 1, 16, 16], 1.0, &mut rng);
        let run = |mode| {
            let (mut store, m) = unet(mode);
            // give the head weights so the difference becomes visible
            let mut r = ChaCha8Rng::seed_from_u64(3);
            let id = store.id("m3rm.flow.weight").unwrap();
            *store.get_mut(id) = Tensor::uniform(&[2, 4, 3, 3], 0.5, &mut r);
            let mut tape = Tape::new();
            let a = tape.constant(xa.clone());
            let b = tape.constant(xb.clone());
            let phi = m.forward(&mut tape, &store, a, b, false).unwrap();
            tape.value(phi).clone()
        };
        assert!(run(MambaMode::None).max_abs_diff(&run(MambaMode::Bi)) > 0.0);
    }

    #[test]
    fn zero_field_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Tensor::uniform(&[2, 5, 7], 1.0, &mut rng);
        let out = stn_warp(&img, &DeformationField::zeros(5, 7)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn sampling_convention() {
        // phi = (0, 1) samples one column to the right: bright pixel moves left
        let (h, w, r, c) = (5, 6, 2, 3);
        let mut img = Tensor::zeros(&[1, h, w]);
        img.data_mut()[r * w + c] = 1.0;
        let mut phi = Tensor::zeros(&[2, h, w]);
        phi.data_mut()[h * w..].fill(1.0);
        let out = stn_warp(&img, &DeformationField::new(phi).unwrap()).unwrap();
        assert_eq!(out.data()[r * w + c - 1], 1.0);
        assert_eq!(out.sum(), 1.0);
    }

    fn bilinear_oracle(img: &[f64], h: usize, w: usize, sy: f64, sx: f64) -> f64 {
        let sy = sy.clamp(0.0, (h - 1) as f64);
        let sx = sx.clamp(0.0, (w - 1) as f64);
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w {
                let ky = (1.0 - (sy - y as f64).abs()).max(0.0);
                let kx = (1.0 - (sx - x as f64).abs()).max(0.0);
                acc += ky * kx * img[y * w + x];
            }
        }
        acc
    }

    #[test]
    fn subpixel_shift_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (h, w) = (6, 7);
        let img = Tensor::uniform(&[1, h, w], 1.0, &mut rng);
        let mut phi = Tensor::full(&[2, h, w], 0.5);
        phi.data_mut()[..h * w].fill(-0.5);
        let out = stn_warp(&img, &DeformationField::new(phi).unwrap()).unwrap();
        for y in 0..h {
            for x in 0..w {
                let o = bilinear_oracle(img.data(), h, w, y as f64 - 0.5, x as f64 + 0.5);
                assert!((out.data()[y * w + x] - o).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn nan_field_is_rejected() {
        let mut phi = Tensor::zeros(&[2, 3, 3]);
        phi.data_mut()[4] = f64::NAN;
        let img = Tensor::zeros(&[1, 3, 3]);
        assert!(matches!(stn_warp(&img, &DeformationField::new(phi).unwrap()), Err(Error::Numeric(_))));
    }
}

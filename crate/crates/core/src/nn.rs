//! Parameterized layers on top of the tape.

use rand::Rng;

use crate::error::Result;
use crate::graph::{ParamId, ParamStore, Tape, Var};
use crate::tensor::{Real, Tensor};

/// Forward-pass context: the tape being recorded, the parameter values to
/// read, and whether parameters should collect gradients.
pub struct Ctx<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
    pub trainable: bool,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>) -> Self {
        Self { tape, store, trainable: true }
    }

    /// Context whose parameters act as constants.
    pub fn frozen(tape: &'a mut Tape<T>, store: &'a ParamStore<T>) -> Self {
        Self { tape, store, trainable: false }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if self.trainable {
            self.tape.param(self.store, id)
        } else {
            self.tape.frozen_param(self.store, id)
        }
    }
}

/// Fan-in scaled uniform init, `U(-1/√fan_in, 1/√fan_in)`.
fn uniform_init<T: Real>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..bound)))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = store.add(format!("{name}.weight"), uniform_init(rng, &[cout, cin, kernel, kernel], fan_in));
        let bias = store.add(format!("{name}.bias"), uniform_init(rng, &[cout], fan_in));
        Self { weight, bias: Some(bias), stride, pad }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = self.bias.map(|b| cx.param(b));
        cx.tape.conv2d(x, w, b, self.stride, self.pad)
    }

    /// Multiply the freshly initialized weight and bias by `gain`.
    pub fn scale_init<T: Real>(&self, store: &mut ParamStore<T>, gain: f64) {
        let g = T::from_f64(gain);
        for id in std::iter::once(self.weight).chain(self.bias) {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= g);
        }
    }

    pub fn out_channels<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.weight).shape()[0]
    }
}

/// Fractionally-strided convolution (`Cin×Cout×k×k` weights).
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Self {
        let fan_in = cout * kernel * kernel;
        let weight = store.add(format!("{name}.weight"), uniform_init(rng, &[cin, cout, kernel, kernel], fan_in));
        let bias = store.add(format!("{name}.bias"), uniform_init(rng, &[cout], fan_in));
        Self { weight, bias: Some(bias), stride, pad, out_pad }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = self.bias.map(|b| cx.param(b));
        cx.tape.conv_transpose2d(x, w, b, self.stride, self.pad, self.out_pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, fin: usize, fout: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform_init(rng, &[fout, fin], fin));
        let bias = store.add(format!("{name}.bias"), uniform_init(rng, &[fout], fin));
        Self { weight, bias: Some(bias) }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = self.bias.map(|b| cx.param(b));
        cx.tape.linear(x, w, b)
    }
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_is_seeded_and_bounded() {
        let build = |seed| {
            let mut store = ParamStore::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Conv2d::new(&mut store, &mut rng, "c", 4, 8, 3, 1, 1);
            store
        };
        let a = build(3);
        let b = build(3);
        let w = a.get(a.find("c.weight").unwrap());
        assert_eq!(w, b.get(b.find("c.weight").unwrap()));
        let bound = 1.0 / 36f32.sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert_ne!(w, build(4).get(ParamId(0)));
    }

    #[test]
    fn f32_and_f64_builds_agree_up_to_rounding() {
        let mut s32 = ParamStore::<f32>::new();
        let mut s64 = ParamStore::<f64>::new();
        Linear::new(&mut s32, &mut ChaCha8Rng::seed_from_u64(1), "l", 3, 2);
        Linear::new(&mut s64, &mut ChaCha8Rng::seed_from_u64(1), "l", 3, 2);
        for (a, b) in s32.get(ParamId(0)).data().iter().zip(s64.get(ParamId(0)).data()) {
            assert_eq!(*a, *b as f32);
        }
    }
}

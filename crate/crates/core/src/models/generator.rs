use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, ConvGeom, ConvTranspose2d, NormStats, LEAKY_SLOPE};
use crate::params::{GradStore, Initializer, ParamStore};
use crate::tensor::{Real, Tensor};

use super::Role;

/// Every down/up-sampling step is a 4x4 stride-2 (transposed) convolution.
pub const UNET_GEOM: ConvGeom = ConvGeom::new(4, 2, 1);

/// Channel multiplier cap relative to `base_width`.
pub const WIDTH_CAP: usize = 8;

pub const DROPOUT_P: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub use_dropout: bool,
}

impl GeneratorSpec {
    /// The full-size 256x256 image translator: 8 levels, 64 base channels.
    pub fn full_scale(base_width: usize) -> Self {
        Self {
            in_channels: 3,
            out_channels: 3,
            base_width,
            depth: 8,
            use_dropout: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(Error::config("base_width", "must be at least 1"));
        }
        if self.depth == 0 {
            return Err(Error::config("depth", "must be at least 1"));
        }
        if self.in_channels == 0 {
            return Err(Error::config("in_channels", "must be at least 1"));
        }
        if self.out_channels == 0 {
            return Err(Error::config("out_channels", "must be at least 1"));
        }
        Ok(())
    }

    /// Checks that an `h x w` input survives `depth` halvings exactly.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = 1usize << self.depth.min(usize::BITS as usize - 1);
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::shape(format!(
                "generator of depth {} needs input sides divisible by {m}, got {h}x{w}",
                self.depth
            )));
        }
        Ok(())
    }

    /// Parameter count of a generator built from this spec, computed from
    /// layer shapes alone.
    pub fn param_count(&self) -> usize {
        let k = UNET_GEOM.kernel * UNET_GEOM.kernel;
        (0..self.depth)
            .map(|i| {
                let cin = if i == 0 { self.in_channels } else { self.level_width(i - 1) };
                let down = cin * self.level_width(i) * k + self.level_width(i);
                let up = self.up_in(i) * self.up_out(i) * k + self.up_out(i);
                down + up
            })
            .sum()
    }

    /// Forward FLOPs (2 per multiply-accumulate) for one `h x w` image,
    /// computed from layer shapes alone.
    pub fn flops(&self, h: usize, w: usize) -> Result<u64> {
        self.check_input(h, w)?;
        let k = UNET_GEOM.kernel * UNET_GEOM.kernel;
        let macs: usize = (0..self.depth)
            .map(|i| {
                let cin = if i == 0 { self.in_channels } else { self.level_width(i - 1) };
                let plane = (h >> (i + 1)) * (w >> (i + 1));
                plane * k * (cin * self.level_width(i) + self.up_in(i) * self.up_out(i))
            })
            .sum();
        Ok(2 * macs as u64)
    }

    pub fn level_width(&self, level: usize) -> usize {
        self.base_width * (1usize << level.min(3)).min(WIDTH_CAP)
    }

    fn has_down_norm(&self, level: usize) -> bool {
        level != 0 && level + 1 != self.depth
    }

    /// Dropout sits on the up path of the capped-width levels between the
    /// fourth level and the innermost one.
    pub fn dropout_at(&self, level: usize) -> bool {
        self.use_dropout && level >= 4 && level + 2 <= self.depth
    }

    fn up_in(&self, level: usize) -> usize {
        if level + 1 == self.depth {
            self.level_width(level)
        } else {
            2 * self.level_width(level)
        }
    }

    fn up_out(&self, level: usize) -> usize {
        if level == 0 {
            self.out_channels
        } else {
            self.level_width(level - 1)
        }
    }
}

/// How a forward pass treats dropout.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

struct DownCache<T> {
    conv_in: Tensor<T>,
    out: Tensor<T>,
    stats: Option<NormStats<T>>,
}

struct UpCache<T> {
    conv_in: Tensor<T>,
    /// Normalized (or tanh) output before dropout.
    act: Tensor<T>,
    stats: Option<NormStats<T>>,
    mask: Option<Tensor<T>>,
}

/// Intermediate tensors retained for the backward pass.
pub struct GeneratorTrace<T> {
    downs: Vec<DownCache<T>>,
    ups: Vec<UpCache<T>>,
}

/// U-Net encoder-decoder with skip connections and a tanh output.
#[derive(Clone, Debug)]
pub struct Generator<T> {
    spec: GeneratorSpec,
    role: Role,
    params: ParamStore<T>,
    downs: Vec<Conv2d>,
    ups: Vec<ConvTranspose2d>,
}

impl<T: Real> Generator<T> {
    pub fn build(spec: &GeneratorSpec, role: Role, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut init = Initializer::new(seed);
        let d = spec.depth;
        let downs = (0..d)
            .map(|i| {
                let cin = if i == 0 { spec.in_channels } else { spec.level_width(i - 1) };
                Conv2d::new(&mut params, &mut init, &format!("down{i}"), cin, spec.level_width(i), UNET_GEOM, true)
            })
            .collect();
        let ups = (0..d)
            .map(|i| {
                ConvTranspose2d::new(&mut params, &mut init, &format!("up{i}"), spec.up_in(i), spec.up_out(i), UNET_GEOM, true)
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            role,
            params,
            downs,
            ups,
        })
    }

    /// Rebuilds the layer graph for `spec` around existing parameters.
    pub fn from_params(spec: &GeneratorSpec, role: Role, params: ParamStore<T>) -> Result<Self> {
        let mut shell = Self::build(spec, role, 0)?;
        if !shell.params.same_layout(&params) {
            return Err(Error::shape("parameter layout does not match generator spec".to_string()));
        }
        shell.params = params;
        Ok(shell)
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn set_role(&mut self, role: Role) {
        self.role = role;
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn count_params(&self) -> usize {
        self.params.numel()
    }

    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator {
            spec: self.spec.clone(),
            role: self.role,
            params: self.params.cast(),
            downs: self.downs.clone(),
            ups: self.ups.clone(),
        }
    }

    /// Floating-point operations (2 per multiply-accumulate) of one forward
    /// pass over a single `h x w` image; convolutions only.
    pub fn count_flops(&self, h: usize, w: usize) -> Result<u64> {
        self.spec.check_input(h, w)?;
        let mut macs = 0u64;
        let (mut ch, mut cw) = (h, w);
        let mut sizes = Vec::with_capacity(self.spec.depth);
        for conv in &self.downs {
            macs += conv.macs(ch, cw)?;
            let (nh, nw) = conv.out_hw(ch, cw)?;
            sizes.push((nh, nw));
            ch = nh;
            cw = nw;
        }
        for (up, &(uh, uw)) in self.ups.iter().zip(&sizes) {
            macs += up.macs(uh, uw)?;
        }
        Ok(2 * macs)
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode<'_>) -> Result<(Tensor<T>, GeneratorTrace<T>)> {
        let (_, c, h, w) = x.dims4();
        if c != self.spec.in_channels {
            return Err(Error::shape(format!(
                "generator expects {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        self.spec.check_input(h, w)?;
        let slope = T::from_f64(LEAKY_SLOPE);
        let d = self.spec.depth;
        let mut downs: Vec<DownCache<T>> = Vec::with_capacity(d);
        for (i, conv) in self.downs.iter().enumerate() {
            let conv_in = if i == 0 {
                x.clone()
            } else {
                nn::leaky_relu(&downs[i - 1].out, slope)
            };
            let z = conv.forward(&self.params, &conv_in)?;
            let (out, stats) = if self.spec.has_down_norm(i) {
                let (y, s) = nn::instance_norm(&z);
                (y, Some(s))
            } else {
                (z, None)
            };
            downs.push(DownCache { conv_in, out, stats });
        }

        let mut rng = match mode {
            Mode::Eval => None,
            Mode::Train(r) => Some(r),
        };
        let mut ups: Vec<Option<UpCache<T>>> = (0..d).map(|_| None).collect();
        let mut carried: Option<Tensor<T>> = None;
        for i in (0..d).rev() {
            let u_in = match carried.take() {
                None => downs[i].out.clone(),
                Some(below) => Tensor::concat_channels(&downs[i].out, &below)?,
            };
            let conv_in = nn::relu(&u_in);
            let t = self.ups[i].forward(&self.params, &conv_in)?;
            let (act, stats) = if i == 0 {
                (nn::tanh(&t), None)
            } else {
                let (y, s) = nn::instance_norm(&t);
                (y, Some(s))
            };
            let mask = match rng.as_mut() {
                Some(r) if self.spec.dropout_at(i) => Some(nn::dropout_mask(act.shape(), DROPOUT_P, &mut **r)),
                _ => None,
            };
            let out = match &mask {
                Some(m) => {
                    let mut o = act.clone();
                    for (v, &k) in o.data_mut().iter_mut().zip(m.data()) {
                        *v *= k;
                    }
                    o
                }
                None => act.clone(),
            };
            ups[i] = Some(UpCache {
                conv_in,
                act,
                stats,
                mask,
            });
            carried = Some(out);
        }
        let y = carried.expect("depth >= 1");
        Ok((
            y,
            GeneratorTrace {
                downs,
                ups: ups.into_iter().map(|u| u.expect("every level visited")).collect(),
            },
        ))
    }

    /// Test-time translation: no dropout.
    pub fn generate(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x, Mode::Eval)?.0)
    }

    /// Back-propagates `grad_out` (gradient w.r.t. the generator output).
    pub fn backward(
        &self,
        trace: &GeneratorTrace<T>,
        grad_out: &Tensor<T>,
        mut grads: Option<&mut GradStore<T>>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let slope = T::from_f64(LEAKY_SLOPE);
        let d = self.spec.depth;
        let mut d_grads: Vec<Option<Tensor<T>>> = (0..d).map(|_| None).collect();
        let mut g = grad_out.clone();
        for i in 0..d {
            let cache = &trace.ups[i];
            if let Some(mask) = &cache.mask {
                for (v, &k) in g.data_mut().iter_mut().zip(mask.data()) {
                    *v *= k;
                }
            }
            let g_t = match &cache.stats {
                None => nn::tanh_backward(&cache.act, &g),
                Some(s) => nn::instance_norm_backward(&cache.act, s, &g),
            };
            let g_r = self.ups[i]
                .backward(&self.params, &cache.conv_in, &g_t, grads.as_deref_mut(), true)
                .expect("input grad requested");
            let g_u = nn::relu_backward(&cache.conv_in, &g_r);
            if i + 1 == d {
                accumulate(&mut d_grads[i], g_u);
            } else {
                let (skip, below) = g_u.split_channels(self.spec.level_width(i));
                accumulate(&mut d_grads[i], skip);
                g = below;
            }
        }
        let mut input_grad = None;
        for i in (0..d).rev() {
            let cache = &trace.downs[i];
            let g_out = d_grads[i].take().expect("every level receives gradient");
            let g_z = match &cache.stats {
                Some(s) => nn::instance_norm_backward(&cache.out, s, &g_out),
                None => g_out,
            };
            let need_dx = i > 0 || need_input_grad;
            let g_in = self.downs[i].backward(&self.params, &cache.conv_in, &g_z, grads.as_deref_mut(), need_dx);
            match (i, g_in) {
                (0, gi) => input_grad = gi,
                (_, Some(gi)) => {
                    let g_prev = nn::leaky_relu_backward(&cache.conv_in, &gi, slope);
                    accumulate(&mut d_grads[i - 1], g_prev);
                }
                (_, None) => unreachable!("inner levels always propagate"),
            }
        }
        input_grad
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

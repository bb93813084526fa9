use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, ConvGeom, NormStats, LEAKY_SLOPE};
use crate::params::{GradStore, Initializer, ParamStore};
use crate::tensor::{Real, Tensor};

use super::Role;

/// Conditional patch classifier over `concat(condition, image)`.
///
/// Blocks are indexed `0..num_layers + 2`; the last block emits the logit grid
/// and every earlier block ends in a leaky ReLU.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub in_channels: usize,
    pub base_width: usize,
    /// Number of stride-2 blocks.
    pub num_layers: usize,
    /// Block whose output serves as the truncated feature map.
    pub feature_tap: usize,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
}

fn default_kernel() -> usize {
    4
}

impl DiscriminatorSpec {
    /// 70x70 patches over 3+3 channel 256x256 pairs.
    pub fn full_scale() -> Self {
        Self {
            in_channels: 6,
            base_width: 64,
            num_layers: 3,
            feature_tap: 4,
            kernel_size: 4,
        }
    }

    pub fn block_count(&self) -> usize {
        self.num_layers + 2
    }

    /// The penultimate block: everything but the final logit convolution.
    pub fn default_tap(&self) -> usize {
        self.num_layers
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::config("in_channels", "must be at least 1"));
        }
        if self.base_width == 0 {
            return Err(Error::config("base_width", "must be at least 1"));
        }
        if self.num_layers == 0 {
            return Err(Error::config("num_layers", "must be at least 1"));
        }
        if self.kernel_size == 0 {
            return Err(Error::config("kernel_size", "must be at least 1"));
        }
        self.check_tap(self.feature_tap)
    }

    pub fn check_tap(&self, tap: usize) -> Result<()> {
        if tap >= self.block_count() {
            return Err(Error::config(
                "feature_tap",
                format!("{tap} is out of range for {} blocks", self.block_count()),
            ));
        }
        Ok(())
    }

    fn width(&self, block: usize) -> usize {
        if block == self.num_layers + 1 {
            1
        } else {
            self.base_width * (1usize << block.min(3)).min(8)
        }
    }

    fn geom(&self, block: usize) -> ConvGeom {
        let stride = if block < self.num_layers { 2 } else { 1 };
        ConvGeom::new(self.kernel_size, stride, (self.kernel_size - 1) / 2)
    }

    fn has_norm(&self, block: usize) -> bool {
        block >= 1 && block <= self.num_layers
    }

    /// Side of the input patch seen by one output logit.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        for b in (0..self.block_count()).rev() {
            let g = self.geom(b);
            rf = (rf - 1) * g.stride + g.kernel;
        }
        rf
    }
}

struct BlockCache<T> {
    conv_in: Tensor<T>,
    /// Output of the normalization (or the raw convolution without one).
    normed: Tensor<T>,
    stats: Option<NormStats<T>>,
    out: Tensor<T>,
}

/// Forward intermediates up to some block.
pub struct DiscriminatorTrace<T> {
    blocks: Vec<BlockCache<T>>,
}

impl<T: Real> DiscriminatorTrace<T> {
    /// Output of `block`; `None` if the forward pass stopped earlier.
    pub fn block_output(&self, block: usize) -> Option<&Tensor<T>> {
        self.blocks.get(block).map(|b| &b.out)
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn output(&self) -> &Tensor<T> {
        &self.blocks.last().expect("at least one block").out
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    spec: DiscriminatorSpec,
    role: Role,
    params: ParamStore<T>,
    blocks: Vec<Conv2d>,
}

impl<T: Real> Discriminator<T> {
    pub fn build(spec: &DiscriminatorSpec, role: Role, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut init = Initializer::new(seed);
        let blocks = (0..spec.block_count())
            .map(|b| {
                let cin = if b == 0 { spec.in_channels } else { spec.width(b - 1) };
                Conv2d::new(&mut params, &mut init, &format!("block{b}"), cin, spec.width(b), spec.geom(b), true)
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            role,
            params,
            blocks,
        })
    }

    pub fn from_params(spec: &DiscriminatorSpec, role: Role, params: ParamStore<T>) -> Result<Self> {
        let mut shell = Self::build(spec, role, 0)?;
        if !shell.params.same_layout(&params) {
            return Err(Error::shape("parameter layout does not match discriminator spec".to_string()));
        }
        shell.params = params;
        Ok(shell)
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn role(&self) -> Role {
        self.role
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

    pub fn cast<U: Real>(&self) -> Discriminator<U> {
        Discriminator {
            spec: self.spec.clone(),
            role: self.role,
            params: self.params.cast(),
            blocks: self.blocks.clone(),
        }
    }

    /// Logit grid side lengths for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (mut ch, mut cw) = (h, w);
        for conv in &self.blocks {
            (ch, cw) = conv.out_hw(ch, cw)?;
        }
        Ok((ch, cw))
    }

    pub fn count_flops(&self, h: usize, w: usize) -> Result<u64> {
        let (mut ch, mut cw) = (h, w);
        let mut macs = 0;
        for conv in &self.blocks {
            macs += conv.macs(ch, cw)?;
            (ch, cw) = conv.out_hw(ch, cw)?;
        }
        Ok(2 * macs)
    }

    /// Runs blocks `0..=last` over an already concatenated input.
    pub fn forward_to(&self, input: &Tensor<T>, last: usize) -> Result<DiscriminatorTrace<T>> {
        self.spec.check_tap(last)?;
        let slope = T::from_f64(LEAKY_SLOPE);
        let final_block = self.spec.block_count() - 1;
        let mut blocks: Vec<BlockCache<T>> = Vec::with_capacity(last + 1);
        for b in 0..=last {
            let conv_in = match blocks.last() {
                None => input.clone(),
                Some(prev) => prev.out.clone(),
            };
            let z = self.blocks[b].forward(&self.params, &conv_in)?;
            let (normed, stats) = if self.spec.has_norm(b) {
                let (y, s) = nn::instance_norm(&z);
                (y, Some(s))
            } else {
                (z, None)
            };
            let out = if b == final_block {
                normed.clone()
            } else {
                nn::leaky_relu(&normed, slope)
            };
            blocks.push(BlockCache {
                conv_in,
                normed,
                stats,
                out,
            });
        }
        Ok(DiscriminatorTrace { blocks })
    }

    /// Full pass over the pair `(condition, image)`; the trace output is the logit grid.
    pub fn forward(&self, condition: &Tensor<T>, image: &Tensor<T>) -> Result<DiscriminatorTrace<T>> {
        let input = self.pair_input(condition, image)?;
        self.forward_to(&input, self.spec.block_count() - 1)
    }

    pub fn logits(&self, condition: &Tensor<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(condition, image)?.output().clone())
    }

    /// Activations of block `tap` for the pair `(condition, image)`.
    pub fn forward_features(&self, condition: &Tensor<T>, image: &Tensor<T>, tap: usize) -> Result<Tensor<T>> {
        self.spec.check_tap(tap)?;
        let input = self.pair_input(condition, image)?;
        Ok(self.forward_to(&input, tap)?.output().clone())
    }

    /// Applies only the final logit block to a feature map from block `num_layers`.
    pub fn head(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        self.blocks[self.spec.block_count() - 1].forward(&self.params, features)
    }

    pub fn pair_input(&self, condition: &Tensor<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        let input = Tensor::concat_channels(condition, image)?;
        if input.dims4().1 != self.spec.in_channels {
            return Err(Error::shape(format!(
                "discriminator expects {} input channels, got {}",
                self.spec.in_channels,
                input.dims4().1
            )));
        }
        Ok(input)
    }

    /// Back-propagates gradients injected at block outputs.
    ///
    /// `injections` pairs a block index with the gradient w.r.t. that block's
    /// output; indices must lie within the trace. Returns the gradient w.r.t.
    /// the concatenated input when `need_input_grad` is set.
    pub fn backward(
        &self,
        trace: &DiscriminatorTrace<T>,
        injections: &[(usize, &Tensor<T>)],
        mut grads: Option<&mut GradStore<T>>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let top = injections.iter().map(|(b, _)| *b).max()?;
        assert!(top < trace.depth(), "injection beyond traced depth");
        let slope = T::from_f64(LEAKY_SLOPE);
        let final_block = self.spec.block_count() - 1;
        let mut g: Option<Tensor<T>> = None;
        for b in (0..=top).rev() {
            for (_, inj) in injections.iter().filter(|(ib, _)| *ib == b) {
                match &mut g {
                    Some(acc) => acc.add_assign(inj),
                    None => g = Some((*inj).clone()),
                }
            }
            let Some(g_out) = g.take() else { continue };
            let cache = &trace.blocks[b];
            let g_norm = if b == final_block {
                g_out
            } else {
                nn::leaky_relu_backward(&cache.out, &g_out, slope)
            };
            let g_z = match &cache.stats {
                Some(s) => nn::instance_norm_backward(&cache.normed, s, &g_norm),
                None => g_norm,
            };
            let need_dx = b > 0 || need_input_grad;
            g = self.blocks[b].backward(&self.params, &cache.conv_in, &g_z, grads.as_deref_mut(), need_dx);
        }
        g
    }
}

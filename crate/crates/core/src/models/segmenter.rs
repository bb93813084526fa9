use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, ConvGeom};
use crate::params::{GradStore, Initializer, ParamStore};
use crate::tensor::{Real, Tensor};

const SEG_GEOM: ConvGeom = ConvGeom::new(3, 1, 1);

/// Small fully convolutional per-pixel classifier used as the scoring network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmenterSpec {
    pub in_channels: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Total convolution count, including the classifier.
    pub layers: usize,
}

impl SegmenterSpec {
    pub fn new(num_classes: usize) -> Self {
        Self {
            in_channels: 3,
            width: 16,
            num_classes,
            layers: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(Error::config("segmenter.layers", "needs at least 2 layers"));
        }
        if self.width == 0 || self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::config("segmenter", "widths must be positive"));
        }
        Ok(())
    }
}

pub struct SegmenterTrace<T> {
    inputs: Vec<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct Segmenter<T> {
    spec: SegmenterSpec,
    params: ParamStore<T>,
    convs: Vec<Conv2d>,
}

impl<T: Real> Segmenter<T> {
    pub fn build(spec: &SegmenterSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut init = Initializer::new(seed);
        let convs = (0..spec.layers)
            .map(|i| {
                let cin = if i == 0 { spec.in_channels } else { spec.width };
                let cout = if i + 1 == spec.layers { spec.num_classes } else { spec.width };
                Conv2d::new(&mut params, &mut init, &format!("conv{i}"), cin, cout, SEG_GEOM, true)
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            params,
            convs,
        })
    }

    pub fn from_params(spec: &SegmenterSpec, params: ParamStore<T>) -> Result<Self> {
        let mut shell = Self::build(spec, 0)?;
        if !shell.params.same_layout(&params) {
            return Err(Error::shape("parameter layout does not match segmenter spec".to_string()));
        }
        shell.params = params;
        Ok(shell)
    }

    pub fn spec(&self) -> &SegmenterSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Per-pixel class logits `(n, classes, h, w)`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, SegmenterTrace<T>)> {
        let mut inputs = Vec::with_capacity(self.convs.len());
        let mut h = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            let z = conv.forward(&self.params, &h)?;
            inputs.push(h);
            h = if i + 1 == self.convs.len() { z } else { nn::relu(&z) };
        }
        Ok((h, SegmenterTrace { inputs }))
    }

    pub fn backward(&self, trace: &SegmenterTrace<T>, grad_logits: &Tensor<T>, grads: &mut GradStore<T>) {
        let mut g = grad_logits.clone();
        for i in (0..self.convs.len()).rev() {
            let need_dx = i > 0;
            match self.convs[i].backward(&self.params, &trace.inputs[i], &g, Some(grads), need_dx) {
                Some(dx) => g = nn::relu_backward(&trace.inputs[i], &dx),
                None => break,
            }
        }
    }

    /// Arg-max class per pixel, `n * h * w` labels in NHW order.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<u8>> {
        let (logits, _) = self.forward(x)?;
        Ok(argmax_channels(&logits))
    }
}

/// Arg-max over the channel axis; ties resolve to the lowest class.
pub fn argmax_channels<T: Real>(logits: &Tensor<T>) -> Vec<u8> {
    let (n, k, h, w) = logits.dims4();
    let plane = h * w;
    let mut out = Vec::with_capacity(n * plane);
    for i in 0..n {
        let s = logits.sample(i);
        for p in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if s[c * plane + p] > s[best * plane + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

//! Channel-wise masked convolution.
//!
//! At step 0 the layer runs a full convolution. At step `t ≥ 1` it computes
//! only the channels of `schedule.mask_for_step(t)` and interlaces them with
//! the output cached at step `t − 1`; the result becomes the new cache.

use crate::error::{Error, Result};
use crate::mask::{ChannelMask, MaskSchedule};
use crate::ops::{conv2d, conv2d_backward, conv2d_masked, ConvGeometry, ConvGrads};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weights and geometry of a plain convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub kernel: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        kernel: Tensor<T>,
        bias: Option<Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (cout, _, _, _) = kernel.dims4("Conv2d::new")?;
        if let Some(b) = &bias {
            if b.shape() != [cout] {
                return Err(Error::shape(
                    "Conv2d::new",
                    format!("bias {:?} for {cout} output channels", b.shape()),
                ));
            }
        }
        Ok(Self {
            kernel,
            bias,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(
            input,
            &self.kernel,
            self.bias.as_ref(),
            self.stride,
            self.padding,
        )
    }

    pub fn backward(&self, grad_out: &Tensor<T>, input: &Tensor<T>) -> Result<ConvGrads<T>> {
        conv2d_backward(grad_out, input, &self.kernel, self.stride, self.padding)
    }

    pub fn output_shape(&self, input: &Tensor<T>) -> Result<[usize; 4]> {
        let g = ConvGeometry::new("conv2d", input, &self.kernel, self.stride, self.padding)?;
        Ok([g.n, g.cout, g.ho, g.wo])
    }

    pub fn num_params(&self) -> usize {
        self.kernel.numel() + self.bias.as_ref().map_or(0, Tensor::numel)
    }
}

/// A convolution paired with the mask schedule over its output channels.
#[derive(Clone, Debug, PartialEq)]
pub struct CwmConvLayer<T> {
    pub conv: Conv2d<T>,
    schedule: MaskSchedule,
}

/// Per-session state of one CWM layer.
///
/// `cached` holds the previous step's full output and is `None` exactly
/// when `step == 0`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CwmState<T> {
    pub step: usize,
    pub cached: Option<Tensor<T>>,
}

impl<T> CwmState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            cached: None,
        }
    }

    /// Returns to step 0; the next forward is a full pass.
    pub fn reset(&mut self) {
        self.step = 0;
        self.cached = None;
    }
}

/// What the backward pass needs from one forward step.
#[derive(Clone, Debug)]
pub struct CwmStepRecord<T> {
    pub input: Tensor<T>,
    /// `None` for the full pass at step 0.
    pub mask: Option<ChannelMask>,
}

/// Copy of `cached` whose channels in `mask` are replaced by `fresh`
/// (`fresh` has `mask.count()` channels).
pub fn interlace<T: Scalar>(
    cached: &Tensor<T>,
    fresh: &Tensor<T>,
    mask: &ChannelMask,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = cached.dims4("interlace")?;
    if fresh.shape() != [n, mask.count(), h, w] || mask.total() != c {
        return Err(Error::shape(
            "interlace",
            format!(
                "fresh {:?} with mask [{}, {}) over cache {:?}",
                fresh.shape(),
                mask.start(),
                mask.end(),
                cached.shape()
            ),
        ));
    }
    let plane = h * w;
    let span = mask.count() * plane;
    let mut out = cached.clone();
    for b in 0..n {
        let dst = b * c * plane + mask.start() * plane;
        out.data_mut()[dst..dst + span].copy_from_slice(&fresh.data()[b * span..(b + 1) * span]);
    }
    Ok(out)
}

impl<T: Scalar> CwmConvLayer<T> {
    pub fn new(conv: Conv2d<T>, schedule: MaskSchedule) -> Result<Self> {
        if schedule.total() != conv.out_channels() {
            return Err(Error::InvalidMask(format!(
                "schedule over {} channels for a layer with {} outputs",
                schedule.total(),
                conv.out_channels()
            )));
        }
        Ok(Self { conv, schedule })
    }

    pub fn schedule(&self) -> &MaskSchedule {
        &self.schedule
    }

    /// Mask used at `step`, `None` for the full pass at step 0.
    pub fn mask_at(&self, step: usize) -> Result<Option<ChannelMask>> {
        if step == 0 {
            Ok(None)
        } else {
            self.schedule.mask_for_step(step).map(Some)
        }
    }

    pub fn forward(
        &self,
        state: &CwmState<T>,
        input: &Tensor<T>,
    ) -> Result<(Tensor<T>, CwmState<T>)> {
        let mask = self.mask_at(state.step)?;
        let out = match (mask, &state.cached) {
            (None, None) => self.conv.forward(input)?,
            (None, Some(_)) => {
                return Err(Error::InvalidState(
                    "step 0 state carries a cached output".into(),
                ))
            }
            (Some(_), None) => {
                return Err(Error::InvalidState(format!(
                    "step {} without a cached output",
                    state.step
                )))
            }
            (Some(m), Some(cached)) => {
                let expected = self.conv.output_shape(input)?;
                if cached.shape() != expected {
                    return Err(Error::shape(
                        "cwm_forward",
                        format!(
                            "input shape drifted: output would be {expected:?}, cache is {:?}",
                            cached.shape()
                        ),
                    ));
                }
                let fresh = conv2d_masked(
                    input,
                    &self.conv.kernel,
                    self.conv.bias.as_ref(),
                    &m,
                    self.conv.stride,
                    self.conv.padding,
                )?;
                interlace(cached, &fresh, &m)?
            }
        };
        let next = CwmState {
            step: state.step + 1,
            cached: Some(out.clone()),
        };
        Ok((out, next))
    }

    /// Like [`forward`](Self::forward), also returning the record needed by
    /// [`backward`](Self::backward).
    pub fn forward_traced(
        &self,
        state: &CwmState<T>,
        input: &Tensor<T>,
    ) -> Result<(Tensor<T>, CwmState<T>, CwmStepRecord<T>)> {
        let mask = self.mask_at(state.step)?;
        let (out, next) = self.forward(state, input)?;
        Ok((
            out,
            next,
            CwmStepRecord {
                input: input.clone(),
                mask,
            },
        ))
    }

    /// Gradients for the last step of `trajectory`.
    ///
    /// Cached channels are constants: only the rows computed at that step
    /// receive kernel and bias gradient, and only they propagate to the input.
    pub fn backward(
        &self,
        trajectory: &[CwmStepRecord<T>],
        grad_out: &Tensor<T>,
    ) -> Result<ConvGrads<T>> {
        let last = trajectory
            .last()
            .ok_or_else(|| Error::Empty("cwm_backward needs at least one step".into()))?;
        let Some(m) = last.mask else {
            return self.conv.backward(grad_out, &last.input);
        };
        let expected = self.conv.output_shape(&last.input)?;
        if grad_out.shape() != expected {
            return Err(Error::shape(
                "cwm_backward",
                format!("grad_out {:?}, expected {expected:?}", grad_out.shape()),
            ));
        }
        let rows = self.conv.kernel.slice_outer(m.start(), m.end())?;
        let grad_active = grad_out.slice_channels(m.start(), m.end())?;
        let partial = conv2d_backward(
            &grad_active,
            &last.input,
            &rows,
            self.conv.stride,
            self.conv.padding,
        )?;

        let row_len = rows.numel() / m.count();
        let mut grad_kernel = Tensor::zeros(self.conv.kernel.shape());
        grad_kernel.data_mut()[m.start() * row_len..m.end() * row_len]
            .copy_from_slice(partial.kernel.data());
        let mut grad_bias = Tensor::zeros(&[m.total()]);
        grad_bias.data_mut()[m.start()..m.end()].copy_from_slice(partial.bias.data());
        Ok(ConvGrads {
            input: partial.input,
            kernel: grad_kernel,
            bias: grad_bias,
        })
    }
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::spec::{LayerKind, NetworkSpec, INPUT};
use crate::cwm::{Conv2d, CwmConvLayer, CwmState, CwmStepRecord};
use crate::error::{Error, Result};
use crate::mask::{bistep_generator, ChannelMask, MaskSchedule};
use crate::ops::{
    add, add_assign, maxpool2x2, maxpool2x2_backward, relu, relu_backward, upsample_nearest2x,
    upsample_nearest2x_backward, ConvGrads,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Src {
    Input,
    Layer(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    Cwm(CwmConvLayer<T>),
    Relu,
    Maxpool,
    Upsample,
    Add,
}

impl<T: Scalar> Layer<T> {
    pub fn conv(&self) -> Option<&Conv2d<T>> {
        match self {
            Layer::Conv(c) => Some(c),
            Layer::Cwm(l) => Some(&l.conv),
            _ => None,
        }
    }

    pub fn conv_mut(&mut self) -> Option<&mut Conv2d<T>> {
        match self {
            Layer::Conv(c) => Some(c),
            Layer::Cwm(l) => Some(&mut l.conv),
            _ => None,
        }
    }
}

/// A [`NetworkSpec`] with weights and mask schedules attached.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    spec: NetworkSpec,
    layers: Vec<Layer<T>>,
    sources: Vec<(Src, Option<Src>)>,
}

/// Gain on the init of convs that end a residual branch.
pub const RESIDUAL_INIT_GAIN: f64 = 0.0;

/// Seeded He-normal kernels (`std = sqrt(2 / fan_in)`) and zero biases, in
/// conv-layer order. Convs whose output enters a residual add as the branch
/// are scaled by [`RESIDUAL_INIT_GAIN`].
pub fn init_convs<T: Scalar>(spec: &NetworkSpec, seed: u64) -> Vec<Conv2d<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let branch_ends: Vec<&str> = spec
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.kind == LayerKind::ResidualAdd)
        .filter_map(|(i, l)| match &l.input {
            Some(name) => Some(name.as_str()),
            None => i.checked_sub(1).map(|p| spec.layers[p].name.as_str()),
        })
        .collect();
    spec.conv_layers()
        .map(|(_, l, c)| {
            let fan_in = (c.in_channels * c.kernel * c.kernel) as f64;
            let mut std = (2.0 / fan_in).sqrt();
            if branch_ends.contains(&l.name.as_str()) {
                std *= RESIDUAL_INIT_GAIN;
            }
            let kernel = Tensor::randn(&c.kernel_shape(), std, &mut rng);
            let bias = Tensor::zeros(&[c.out_channels]);
            Conv2d::new(kernel, Some(bias), c.stride, c.padding).expect("consistent spec")
        })
        .collect()
}

impl<T: Scalar> Network<T> {
    /// Builds the network with ρ-bi-step schedules on every masked layer.
    pub fn new(spec: NetworkSpec, convs: Vec<Conv2d<T>>) -> Result<Self> {
        let rho = spec.rho;
        Self::with_schedules(spec, convs, |channels| {
            let rho = rho.ok_or_else(|| Error::InvalidSpec("masked layer without rho".into()))?;
            bistep_generator(channels, rho)
        })
    }

    /// Seeded initialization, see [`init_convs`].
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let convs = init_convs(&spec, seed);
        Self::new(spec, convs)
    }

    /// Builds the network, asking `schedule` for the schedule of each
    /// masked layer given its output channel count.
    pub fn with_schedules(
        spec: NetworkSpec,
        convs: Vec<Conv2d<T>>,
        mut schedule: impl FnMut(usize) -> Result<MaskSchedule>,
    ) -> Result<Self> {
        spec.validate()?;
        let mut convs = convs.into_iter();
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut sources = Vec::with_capacity(spec.layers.len());
        let lookup = |name: &str, upto: usize| -> Result<Src> {
            if name == INPUT {
                return Ok(Src::Input);
            }
            spec.layers[..upto]
                .iter()
                .position(|l| l.name == name)
                .map(Src::Layer)
                .ok_or_else(|| Error::InvalidSpec(format!("unknown tensor `{name}`")))
        };
        for (i, l) in spec.layers.iter().enumerate() {
            let input = match &l.input {
                Some(name) => lookup(name, i)?,
                None if i == 0 => Src::Input,
                None => Src::Layer(i - 1),
            };
            let skip = l.skip.as_deref().map(|s| lookup(s, i)).transpose()?;
            sources.push((input, skip));
            let layer = match l.kind {
                LayerKind::Conv | LayerKind::CwmConv => {
                    let c = l.conv.as_ref().expect("validated");
                    let conv = convs.next().ok_or_else(|| Error::WeightMismatch {
                        layer: l.name.clone(),
                        detail: "no weights supplied".into(),
                    })?;
                    if conv.kernel.shape() != c.kernel_shape()
                        || conv.stride != c.stride
                        || conv.padding != c.padding
                    {
                        return Err(Error::WeightMismatch {
                            layer: l.name.clone(),
                            detail: format!(
                                "kernel {:?} (stride {}, pad {}), spec wants {:?} (stride {}, pad {})",
                                conv.kernel.shape(),
                                conv.stride,
                                conv.padding,
                                c.kernel_shape(),
                                c.stride,
                                c.padding
                            ),
                        });
                    }
                    if l.kind == LayerKind::CwmConv {
                        Layer::Cwm(CwmConvLayer::new(conv, schedule(c.out_channels)?)?)
                    } else {
                        Layer::Conv(conv)
                    }
                }
                LayerKind::Relu => Layer::Relu,
                LayerKind::Maxpool => Layer::Maxpool,
                LayerKind::Upsample => Layer::Upsample,
                LayerKind::ResidualAdd => Layer::Add,
            };
            layers.push(layer);
        }
        if convs.next().is_some() {
            return Err(Error::WeightMismatch {
                layer: "<end>".into(),
                detail: "more weight tensors than conv layers".into(),
            });
        }
        Ok(Self {
            spec,
            layers,
            sources,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    /// Conv weights in layer order.
    pub fn convs(&self) -> impl Iterator<Item = &Conv2d<T>> {
        self.layers.iter().filter_map(Layer::conv)
    }

    pub fn convs_mut(&mut self) -> impl Iterator<Item = &mut Conv2d<T>> {
        self.layers.iter_mut().filter_map(Layer::conv_mut)
    }

    pub fn num_params(&self) -> usize {
        self.convs().map(Conv2d::num_params).sum()
    }

    pub fn is_stateless(&self) -> bool {
        !self.layers.iter().any(|l| matches!(l, Layer::Cwm(_)))
    }

    /// Same weights with every layer unmasked.
    pub fn to_stateless(&self) -> Self {
        let mut out = self.clone();
        out.spec.rho = None;
        for (l, s) in out.layers.iter_mut().zip(&mut out.spec.layers) {
            if let Layer::Cwm(c) = l {
                *l = Layer::Conv(c.conv.clone());
                s.kind = LayerKind::Conv;
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let cast_conv = |c: &Conv2d<T>| Conv2d {
                    kernel: c.kernel.cast(),
                    bias: c.bias.as_ref().map(Tensor::cast),
                    stride: c.stride,
                    padding: c.padding,
                };
                match l {
                    Layer::Conv(c) => Layer::Conv(cast_conv(c)),
                    Layer::Cwm(c) => Layer::Cwm(
                        CwmConvLayer::new(cast_conv(&c.conv), c.schedule().clone()).unwrap(),
                    ),
                    Layer::Relu => Layer::Relu,
                    Layer::Maxpool => Layer::Maxpool,
                    Layer::Upsample => Layer::Upsample,
                    Layer::Add => Layer::Add,
                }
            })
            .collect();
        Network {
            spec: self.spec.clone(),
            layers,
            sources: self.sources.clone(),
        }
    }

    /// Single-frame forward with every conv unmasked.
    pub fn forward_stateless(&self, frame: &Tensor<T>) -> Result<Tensor<T>> {
        let mut outs: Vec<Tensor<T>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let out = {
                let (src, skip) = self.sources[i];
                let x = fetch(frame, &outs, src);
                match layer {
                    Layer::Conv(c) => c.forward(x)?,
                    Layer::Cwm(l) => l.conv.forward(x)?,
                    other => simple_forward(other, x, skip.map(|s| fetch(frame, &outs, s)))?,
                }
            };
            outs.push(out);
        }
        Ok(outs.pop().expect("validated spec has layers"))
    }

    pub fn session(&self) -> StreamSession<'_, T> {
        StreamSession::new(self)
    }

    /// Session continuing from `snapshot`, which may come from a network
    /// with the same spec but different weights.
    pub fn resume(&self, snapshot: SessionSnapshot<T>) -> Result<StreamSession<'_, T>> {
        if snapshot.states.len() != self.layers.len() {
            return Err(Error::InvalidState(format!(
                "snapshot has {} layer states, network has {} layers",
                snapshot.states.len(),
                self.layers.len()
            )));
        }
        Ok(StreamSession {
            net: self,
            states: snapshot.states,
            step: snapshot.step,
            frame_shape: snapshot.frame_shape,
        })
    }

    /// Parameter gradients for a traced final step with cotangent
    /// `grad_logits`. Masked layers only pass gradient through the channels
    /// computed at that step.
    pub fn backward(
        &self,
        trace: &ForwardTrace<T>,
        grad_logits: &Tensor<T>,
    ) -> Result<NetGrads<T>> {
        let mut params = vec![None; self.layers.len()];
        self.backward_step(trace, Some(grad_logits), None, &mut params)?;
        let active_rows = trace
            .records
            .iter()
            .zip(&self.layers)
            .filter(|(_, l)| l.conv().is_some())
            .map(|(r, _)| r.as_ref().and_then(|r| r.mask))
            .collect();
        Ok(self.collect_grads(params, active_rows))
    }

    /// Parameter gradients of the loss at the last of `traces`, the
    /// consecutive traced steps of one episode, also following cached
    /// channels back to the steps that computed them.
    pub fn backward_through_time(
        &self,
        traces: &[ForwardTrace<T>],
        grad_logits: &Tensor<T>,
    ) -> Result<NetGrads<T>> {
        let n = self.layers.len();
        if traces.is_empty() {
            return Err(Error::Empty(
                "backward through time needs at least one step".into(),
            ));
        }
        let mut params = vec![None; n];
        let mut carry = vec![None; n];
        for (t, trace) in traces.iter().enumerate().rev() {
            let top = (t + 1 == traces.len()).then_some(grad_logits);
            carry = self.backward_step(trace, top, Some(carry), &mut params)?;
        }
        let active_rows = self
            .layers
            .iter()
            .filter(|l| l.conv().is_some())
            .map(|_| None)
            .collect();
        Ok(self.collect_grads(params, active_rows))
    }

    /// One step of reverse mode. `carry` holds, per masked layer, the
    /// gradient reaching its output through the next step's cache; when
    /// given, the gradient of this step's cached channels is returned the
    /// same way. Kernel and bias gradients accumulate into `params`.
    fn backward_step(
        &self,
        trace: &ForwardTrace<T>,
        grad_logits: Option<&Tensor<T>>,
        carry: Option<Vec<Option<Tensor<T>>>>,
        params: &mut [Option<ConvGrads<T>>],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let n = self.layers.len();
        if trace.outputs.len() != n || trace.records.len() != n {
            return Err(Error::InvalidState(
                "trace does not belong to this network".into(),
            ));
        }
        let through_time = carry.is_some();
        let mut grads: Vec<Option<Tensor<T>>> = carry.unwrap_or_else(|| vec![None; n]);
        let mut next_carry = vec![None; if through_time { n } else { 0 }];
        let push = |grads: &mut Vec<Option<Tensor<T>>>, src: Src, g: Tensor<T>| -> Result<()> {
            if let Src::Layer(j) = src {
                match &mut grads[j] {
                    Some(acc) => add_assign(acc, &g)?,
                    slot @ None => *slot = Some(g),
                }
            }
            Ok(())
        };
        if let Some(g) = grad_logits {
            push(&mut grads, Src::Layer(n - 1), g.clone())?;
        }

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let (src, skip) = self.sources[i];
            let x = fetch(&trace.frame, &trace.outputs, src);
            let cg = match &self.layers[i] {
                Layer::Conv(c) => Some(c.backward(&g, x)?),
                Layer::Cwm(l) => {
                    let rec = trace.records[i]
                        .as_ref()
                        .ok_or_else(|| Error::InvalidState("missing CWM record".into()))?;
                    if let (true, Some(m)) = (through_time, rec.mask) {
                        let mut cached = g.clone();
                        let (nb, c, h, w) = cached.dims4("backward_through_time")?;
                        let plane = h * w;
                        for b in 0..nb {
                            let base = b * c * plane;
                            cached.data_mut()[base + m.start() * plane..base + m.end() * plane]
                                .fill(T::zero());
                        }
                        next_carry[i] = Some(cached);
                    }
                    Some(l.backward(std::slice::from_ref(rec), &g)?)
                }
                Layer::Relu => {
                    push(&mut grads, src, relu_backward(&g, x)?)?;
                    None
                }
                Layer::Maxpool => {
                    push(&mut grads, src, maxpool2x2_backward(&g, x)?)?;
                    None
                }
                Layer::Upsample => {
                    push(&mut grads, src, upsample_nearest2x_backward(&g)?)?;
                    None
                }
                Layer::Add => {
                    push(&mut grads, src, g.clone())?;
                    push(&mut grads, skip.expect("validated"), g)?;
                    None
                }
            };
            if let Some(cg) = cg {
                push(&mut grads, src, cg.input)?;
                match &mut params[i] {
                    Some(acc) => {
                        add_assign(&mut acc.kernel, &cg.kernel)?;
                        add_assign(&mut acc.bias, &cg.bias)?;
                    }
                    slot @ None => {
                        *slot = Some(ConvGrads {
                            input: Tensor::zeros(&[0]),
                            kernel: cg.kernel,
                            bias: cg.bias,
                        })
                    }
                }
            }
        }
        Ok(next_carry)
    }

    fn collect_grads(
        &self,
        params: Vec<Option<ConvGrads<T>>>,
        active_rows: Vec<Option<ChannelMask>>,
    ) -> NetGrads<T> {
        NetGrads {
            active_rows,
            convs: params
                .into_iter()
                .zip(&self.layers)
                .filter(|(_, l)| l.conv().is_some())
                .map(|(p, l)| {
                    p.map(|g| (g.kernel, g.bias)).unwrap_or_else(|| {
                        let c = l.conv().unwrap();
                        (
                            Tensor::zeros(c.kernel.shape()),
                            Tensor::zeros(&[c.out_channels()]),
                        )
                    })
                })
                .collect(),
        }
    }
}

fn fetch<'a, T>(frame: &'a Tensor<T>, outs: &'a [Tensor<T>], src: Src) -> &'a Tensor<T> {
    match src {
        Src::Input => frame,
        Src::Layer(j) => &outs[j],
    }
}

fn simple_forward<T: Scalar>(
    layer: &Layer<T>,
    x: &Tensor<T>,
    skip: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    match layer {
        Layer::Relu => Ok(relu(x)),
        Layer::Maxpool => maxpool2x2(x),
        Layer::Upsample => upsample_nearest2x(x),
        Layer::Add => add(x, skip.expect("validated")),
        Layer::Conv(_) | Layer::Cwm(_) => unreachable!("convs handled by caller"),
    }
}

/// Kernel and bias gradients, one pair per conv layer in layer order.
#[derive(Clone, Debug)]
pub struct NetGrads<T> {
    pub convs: Vec<(Tensor<T>, Tensor<T>)>,
    /// Rows computed at the traced step; `None` means every row.
    pub active_rows: Vec<Option<ChannelMask>>,
}

/// Activations of one traced step.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub frame: Tensor<T>,
    pub outputs: Vec<Tensor<T>>,
    pub records: Vec<Option<CwmStepRecord<T>>>,
}

/// Detached copy of a [`StreamSession`]'s state.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionSnapshot<T> {
    states: Vec<CwmState<T>>,
    step: usize,
    frame_shape: Option<Vec<usize>>,
}

/// Streaming executor: threads per-layer CWM state through a frame
/// sequence. All layers share one step counter.
#[derive(Clone, Debug)]
pub struct StreamSession<'n, T> {
    net: &'n Network<T>,
    states: Vec<CwmState<T>>,
    step: usize,
    frame_shape: Option<Vec<usize>>,
}

impl<'n, T: Scalar> StreamSession<'n, T> {
    pub fn new(net: &'n Network<T>) -> Self {
        Self {
            net,
            states: vec![CwmState::new(); net.layers.len()],
            step: 0,
            frame_shape: None,
        }
    }

    pub fn network(&self) -> &'n Network<T> {
        self.net
    }

    /// Number of frames processed since the last reset.
    pub fn step(&self) -> usize {
        self.step
    }

    /// Copy of the per-layer state, resumable with [`Network::resume`].
    pub fn snapshot(&self) -> SessionSnapshot<T> {
        SessionSnapshot {
            states: self.states.clone(),
            step: self.step,
            frame_shape: self.frame_shape.clone(),
        }
    }

    pub fn reset(&mut self) {
        self.states.iter_mut().for_each(CwmState::reset);
        self.step = 0;
        self.frame_shape = None;
    }

    /// Processes one `[1, C, H, W]` frame and returns its logits.
    pub fn forward(&mut self, frame: &Tensor<T>) -> Result<Tensor<T>> {
        let (mut outs, _) = self.run(frame, false)?;
        Ok(outs.pop().expect("validated spec has layers"))
    }

    /// Like [`forward`](Self::forward), keeping every activation for
    /// [`Network::backward`].
    pub fn forward_traced(&mut self, frame: &Tensor<T>) -> Result<(Tensor<T>, ForwardTrace<T>)> {
        let (outs, records) = self.run(frame, true)?;
        let logits = outs.last().expect("validated spec has layers").clone();
        Ok((
            logits,
            ForwardTrace {
                frame: frame.clone(),
                outputs: outs,
                records,
            },
        ))
    }

    fn run(
        &mut self,
        frame: &Tensor<T>,
        trace: bool,
    ) -> Result<(Vec<Tensor<T>>, Vec<Option<CwmStepRecord<T>>>)> {
        match &self.frame_shape {
            Some(shape) if shape.as_slice() != frame.shape() => {
                return Err(Error::shape(
                    "stream_forward",
                    format!("frame {:?} after frames of {:?}", frame.shape(), shape),
                ))
            }
            _ => {}
        }
        let net = self.net;
        let mut outs: Vec<Tensor<T>> = Vec::with_capacity(net.layers.len());
        let mut records = Vec::with_capacity(if trace { net.layers.len() } else { 0 });
        let mut next_states = Vec::new();
        for (i, layer) in net.layers.iter().enumerate() {
            let (src, skip) = net.sources[i];
            let x = fetch(frame, &outs, src);
            let mut record = None;
            let out = match layer {
                Layer::Conv(c) => c.forward(x)?,
                Layer::Cwm(l) => {
                    let (out, state) = if trace {
                        let (o, s, r) = l.forward_traced(&self.states[i], x)?;
                        record = Some(r);
                        (o, s)
                    } else {
                        l.forward(&self.states[i], x)?
                    };
                    next_states.push((i, state));
                    out
                }
                other => simple_forward(other, x, skip.map(|s| fetch(frame, &outs, s)))?,
            };
            if trace {
                records.push(record);
            }
            outs.push(out);
        }
        for (i, s) in next_states {
            self.states[i] = s;
        }
        self.step += 1;
        self.frame_shape = Some(frame.shape().to_vec());
        Ok((outs, records))
    }
}

//! Serializable network description.
//!
//! A network is an ordered list of layers. Each layer reads the output of the
//! previous layer unless `input` names an earlier layer (or `"input"`, the
//! frame); `residual_add` adds the tensor named by `skip`. The output of the
//! last layer is the logits tensor.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name reserved for the network input.
pub const INPUT: &str = "input";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    CwmConv,
    Relu,
    Maxpool,
    Upsample,
    ResidualAdd,
}

/// Position of a convolution in the architecture; decides default CWM
/// eligibility.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvRole {
    Stem,
    Block,
    Skip,
    Head,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub role: ConvRole,
    pub cwm_eligible: bool,
}

impl ConvSpec {
    pub fn kernel_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel,
            self.kernel,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skip: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv: Option<ConvSpec>,
}

impl LayerSpec {
    fn simple(name: &str, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
            input: None,
            skip: None,
            conv: None,
        }
    }

    fn conv(name: &str, cin: usize, cout: usize, kernel: usize, role: ConvRole) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Conv,
            input: None,
            skip: None,
            conv: Some(ConvSpec {
                in_channels: cin,
                out_channels: cout,
                kernel,
                stride: 1,
                padding: kernel / 2,
                role,
                cwm_eligible: role == ConvRole::Block,
            }),
        }
    }

    fn from(mut self, src: &str) -> Self {
        self.input = Some(src.into());
        self
    }

    fn add(name: &str, skip: &str) -> Self {
        let mut l = Self::simple(name, LayerKind::ResidualAdd);
        l.skip = Some(skip.into());
        l
    }

    pub fn is_conv(&self) -> bool {
        matches!(self.kind, LayerKind::Conv | LayerKind::CwmConv)
    }
}

/// Re-includes convolutions that are excluded from masking by default.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EligibilityOverrides {
    #[serde(default)]
    pub stem: bool,
    #[serde(default)]
    pub skip: bool,
    #[serde(default)]
    pub head: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    /// Width multiplier already applied to the layer channel counts.
    pub alpha: f64,
    /// Always-active ratio of the bi-step schedules; `None` for a stateless
    /// network with no masked layers.
    pub rho: Option<f64>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn conv_layers(&self) -> impl Iterator<Item = (usize, &LayerSpec, &ConvSpec)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.conv.as_ref().map(|c| (i, l, c)))
    }

    pub fn cwm_layer_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.kind == LayerKind::CwmConv)
            .count()
    }

    pub fn is_stateless(&self) -> bool {
        self.cwm_layer_count() == 0
    }

    /// Number of CWM layers on the longest input-to-logits path.
    pub fn cwm_depth(&self) -> usize {
        let mut depth: HashMap<&str, usize> = HashMap::from([(INPUT, 0)]);
        let mut prev = INPUT;
        for l in &self.layers {
            let src = l.input.as_deref().unwrap_or(prev);
            let mut d = depth.get(src).copied().unwrap_or(0);
            if let Some(s) = &l.skip {
                d = d.max(depth.get(s.as_str()).copied().unwrap_or(0));
            }
            if l.kind == LayerKind::CwmConv {
                d += 1;
            }
            depth.insert(&l.name, d);
            prev = &l.name;
        }
        depth.get(prev).copied().unwrap_or(0)
    }

    /// Checks names, references and channel counts along every path.
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid(
                "alpha",
                format!("{} not in (0, 1]", self.alpha),
            ));
        }
        if let Some(r) = self.rho {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::invalid("rho", format!("{r} not in [0, 1]")));
            }
        }
        let mut channels: HashMap<&str, usize> = HashMap::from([(INPUT, self.input_channels)]);
        let mut prev = INPUT;
        for l in &self.layers {
            if channels.contains_key(l.name.as_str()) {
                return Err(Error::InvalidSpec(format!(
                    "duplicate layer name `{}`",
                    l.name
                )));
            }
            let src = l.input.as_deref().unwrap_or(prev);
            let cin = *channels.get(src).ok_or_else(|| {
                Error::InvalidSpec(format!("layer `{}` reads unknown tensor `{src}`", l.name))
            })?;
            let cout = match (l.kind, &l.conv) {
                (LayerKind::Conv | LayerKind::CwmConv, Some(c)) => {
                    if c.in_channels != cin {
                        return Err(Error::InvalidSpec(format!(
                            "layer `{}` expects {} input channels, `{src}` has {cin}",
                            l.name, c.in_channels
                        )));
                    }
                    if c.out_channels == 0 || c.kernel == 0 {
                        return Err(Error::InvalidSpec(format!("layer `{}` is empty", l.name)));
                    }
                    if !(c.stride == 1 || c.stride == 2) {
                        return Err(Error::InvalidSpec(format!(
                            "layer `{}` has stride {}",
                            l.name, c.stride
                        )));
                    }
                    if l.kind == LayerKind::CwmConv && (!c.cwm_eligible || self.rho.is_none()) {
                        return Err(Error::InvalidSpec(format!(
                            "layer `{}` is masked but not eligible or the network has no rho",
                            l.name
                        )));
                    }
                    c.out_channels
                }
                (LayerKind::Conv | LayerKind::CwmConv, None) => {
                    return Err(Error::InvalidSpec(format!(
                        "conv layer `{}` has no conv parameters",
                        l.name
                    )))
                }
                (LayerKind::ResidualAdd, _) => {
                    let skip = l.skip.as_deref().ok_or_else(|| {
                        Error::InvalidSpec(format!("residual_add `{}` has no skip", l.name))
                    })?;
                    let cs = *channels.get(skip).ok_or_else(|| {
                        Error::InvalidSpec(format!(
                            "layer `{}` reads unknown tensor `{skip}`",
                            l.name
                        ))
                    })?;
                    if cs != cin {
                        return Err(Error::InvalidSpec(format!(
                            "residual_add `{}` joins {cin} and {cs} channels",
                            l.name
                        )));
                    }
                    cin
                }
                _ => cin,
            };
            channels.insert(&l.name, cout);
            prev = &l.name;
        }
        match self.layers.last() {
            Some(l) if channels[l.name.as_str()] == self.num_classes => Ok(()),
            Some(l) => Err(Error::InvalidSpec(format!(
                "last layer `{}` has {} channels, expected {} classes",
                l.name,
                channels[l.name.as_str()],
                self.num_classes
            ))),
            None => Err(Error::InvalidSpec("network has no layers".into())),
        }
    }

    /// One line per conv layer: name, kind, role, in, out, kernel, eligible.
    pub fn channel_table(&self) -> String {
        let mut out = String::from("layer,kind,role,in,out,kernel,cwm_eligible\n");
        for (_, l, c) in self.conv_layers() {
            let kind = serde_json::to_value(l.kind).unwrap();
            let role = serde_json::to_value(c.role).unwrap();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                l.name,
                kind.as_str().unwrap(),
                role.as_str().unwrap(),
                c.in_channels,
                c.out_channels,
                c.kernel,
                c.cwm_eligible
            ));
        }
        out
    }
}

/// Reference architecture: stem, two residual blocks at width `w`, 2×2 max
/// pool, two residual blocks at `2w` (the first with a 1×1 projection on
/// the shortcut), nearest 2× upsample, a 3×3 fusion conv added to the
/// high-resolution features, and a 1×1 classifier head. All convs are
/// unmasked; see [`with_rho`] and [`slim`].
pub fn toynet_base(
    input_channels: usize,
    num_classes: usize,
    base_width: usize,
) -> Result<NetworkSpec> {
    if base_width < 8 {
        return Err(Error::invalid("base_width", format!("{base_width} < 8")));
    }
    if num_classes == 0 || num_classes > 255 {
        return Err(Error::invalid(
            "num_classes",
            format!("{num_classes} not in [1, 255]"),
        ));
    }
    use ConvRole::*;
    use LayerKind::*;
    let w = base_width;
    let w2 = 2 * w;
    let mut layers = vec![
        LayerSpec::conv("stem", input_channels, w, 3, Stem),
        LayerSpec::simple("stem_relu", Relu),
    ];
    let b1 = push_block(&mut layers, "b1", "stem_relu", w, w);
    let b2 = push_block(&mut layers, "b2", &b1, w, w);
    layers.push(LayerSpec::simple("pool", Maxpool).from(&b2));
    let b3 = push_block(&mut layers, "b3", "pool", w, w2);
    let b4 = push_block(&mut layers, "b4", &b3, w2, w2);
    layers.push(LayerSpec::simple("up", Upsample).from(&b4));
    layers.push(LayerSpec::conv("fusion", w2, w, 3, Block));
    layers.push(LayerSpec::add("fusion_add", &b2));
    layers.push(LayerSpec::simple("fusion_relu", Relu));
    layers.push(LayerSpec::conv("head", w, num_classes, 1, Head));

    let spec = NetworkSpec {
        input_channels,
        num_classes,
        base_width,
        alpha: 1.0,
        rho: None,
        layers,
    };
    spec.validate()?;
    Ok(spec)
}

/// Residual block `relu(conv2(relu(conv1(x))) + shortcut(x))`; the shortcut
/// is a 1×1 projection when the channel count changes. Returns the name of
/// the block output.
fn push_block(
    layers: &mut Vec<LayerSpec>,
    name: &str,
    src: &str,
    cin: usize,
    cout: usize,
) -> String {
    use ConvRole::*;
    let conv1 = format!("{name}_conv1");
    let conv2 = format!("{name}_conv2");
    layers.push(LayerSpec::conv(&conv1, cin, cout, 3, Block).from(src));
    layers.push(LayerSpec::simple(&format!("{name}_relu1"), LayerKind::Relu));
    layers.push(LayerSpec::conv(&conv2, cout, cout, 3, Block));
    let shortcut = if cin != cout {
        let proj = format!("{name}_proj");
        layers.push(LayerSpec::conv(&proj, cin, cout, 1, Skip).from(src));
        proj
    } else {
        src.to_string()
    };
    layers.push(LayerSpec::add(&format!("{name}_add"), &shortcut).from(&conv2));
    let out = format!("{name}_relu2");
    layers.push(LayerSpec::simple(&out, LayerKind::Relu));
    out
}

/// Scales every convolution's channel counts by `alpha`, rounding to the
/// nearest integer (halves away from zero) with a floor of 1. The network
/// input channels and the class count are kept.
pub fn slim(spec: &NetworkSpec, alpha: f64) -> Result<NetworkSpec> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid("alpha", format!("{alpha} not in (0, 1]")));
    }
    let scale = |c: usize| ((alpha * c as f64).round() as usize).max(1);
    let mut out = spec.clone();
    for l in &mut out.layers {
        if let Some(c) = &mut l.conv {
            if c.role != ConvRole::Stem {
                c.in_channels = scale(c.in_channels);
            }
            if c.role != ConvRole::Head {
                c.out_channels = scale(c.out_channels);
            }
        }
    }
    out.alpha = spec.alpha * alpha;
    out.validate()?;
    Ok(out)
}

/// Marks eligible convs as masked with bi-step schedules of ratio `rho`,
/// or makes every conv plain when `rho` is `None`.
pub fn with_rho(
    spec: &NetworkSpec,
    rho: Option<f64>,
    overrides: EligibilityOverrides,
) -> Result<NetworkSpec> {
    let mut out = spec.clone();
    out.rho = rho;
    for l in &mut out.layers {
        if let Some(c) = &mut l.conv {
            c.cwm_eligible = match c.role {
                ConvRole::Block => true,
                ConvRole::Stem => overrides.stem,
                ConvRole::Skip => overrides.skip,
                ConvRole::Head => overrides.head,
            };
            l.kind = if rho.is_some() && c.cwm_eligible {
                LayerKind::CwmConv
            } else {
                LayerKind::Conv
            };
        }
    }
    out.validate()?;
    Ok(out)
}

/// Parameters of [`toynet_spec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyNetConfig {
    pub num_classes: usize,
    pub base_width: usize,
    pub alpha: f64,
    pub rho: Option<f64>,
    #[serde(default)]
    pub overrides: EligibilityOverrides,
}

/// Base architecture, slimmed by `alpha` first, then masked with `rho`.
pub fn toynet_spec(cfg: &ToyNetConfig) -> Result<NetworkSpec> {
    let base = toynet_base(3, cfg.num_classes, cfg.base_width)?;
    let slimmed = slim(&base, cfg.alpha)?;
    with_rho(&slimmed, cfg.rho, cfg.overrides)
}

//! Toy segmentation network, slimming, masking and streaming execution.

mod io;
mod network;
mod spec;

pub use io::{load_network, load_weights, save_weights, WeightsManifest};
pub use network::{
    init_convs, ForwardTrace, Layer, NetGrads, Network, SessionSnapshot, StreamSession,
};
pub use spec::{
    slim, toynet_base, toynet_spec, with_rho, ConvRole, ConvSpec, EligibilityOverrides, LayerKind,
    LayerSpec, NetworkSpec, ToyNetConfig, INPUT,
};

/// Builds the reference toy network and seeds its weights.
pub fn build_toynet<T: crate::Scalar>(cfg: &ToyNetConfig, seed: u64) -> crate::Result<Network<T>> {
    Network::init(toynet_spec(cfg)?, seed)
}

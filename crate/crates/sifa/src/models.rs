//! The seven sub-networks and the width configuration they are built with.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sifa_core::arch::{
    classifier_spec, decoder_spec, encoder_spec, generator_spec, patch_discriminator_spec, LayerSpec, NetworkSpec, Width,
};
use sifa_core::Result;

use crate::net::Network;

/// Sub-networks in their per-step update order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NetId {
    Gt,
    Dt,
    E,
    C,
    U,
    Ds,
    Dp,
}

impl NetId {
    pub const ORDER: [NetId; 7] = [NetId::Gt, NetId::Dt, NetId::E, NetId::C, NetId::U, NetId::Ds, NetId::Dp];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NetId::Gt => "G_t",
            NetId::Dt => "D_t",
            NetId::E => "E",
            NetId::C => "C",
            NetId::U => "U",
            NetId::Ds => "D_s",
            NetId::Dp => "D_p",
        }
    }
}

/// Channel-width scaling per network family. `(1, 1)` everywhere gives the
/// reference widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Widths {
    pub generator: (usize, usize),
    pub encoder: (usize, usize),
    pub decoder: (usize, usize),
    pub discriminator: (usize, usize),
}

impl Widths {
    pub const FULL: Widths = Widths { generator: (1, 1), encoder: (1, 1), decoder: (1, 1), discriminator: (1, 1) };

    /// Reduced widths that keep the ablation ladder within a CPU budget at
    /// 64x64. The encoder gets the most room: narrower encoders stop
    /// learning the small structures even on source data.
    pub const DESK: Widths = Widths { generator: (32, 4), encoder: (8, 4), decoder: (32, 4), discriminator: (16, 4) };

    fn w(pair: (usize, usize)) -> Width {
        Width::scaled(pair.0, pair.1)
    }
}

impl Default for Widths {
    fn default() -> Self {
        Self::DESK
    }
}

/// The source discriminator: a PatchGAN whose last layer has two output
/// channels. Channel 0 is the main real/fake score, channel 1 the auxiliary
/// head. Each output channel of a convolution has its own weights, so this
/// is exactly two heads on a shared trunk.
pub fn source_discriminator_spec(width: Width) -> Result<NetworkSpec> {
    let mut spec = patch_discriminator_spec(1, width)?;
    if let Some(LayerSpec::Conv(last)) = spec.layers.last_mut() {
        last.out_ch = 2;
    }
    Ok(spec)
}

pub fn network_specs(classes: usize, widths: &Widths) -> Result<[NetworkSpec; 7]> {
    let named = |mut s: NetworkSpec, name: &str| {
        s.name = name.into();
        s
    };
    Ok([
        named(generator_spec(1, Widths::w(widths.generator))?, "G_t"),
        named(patch_discriminator_spec(1, Widths::w(widths.discriminator))?, "D_t"),
        named(encoder_spec(1, Widths::w(widths.encoder)), "E"),
        named(classifier_spec(classes, Widths::w(widths.encoder))?, "C"),
        {
            let mut u = decoder_spec(1, Widths::w(widths.decoder))?;
            // the decoder reads encoder features
            let feat = Width::scaled(widths.encoder.0, widths.encoder.1).ch(512);
            if let Some(LayerSpec::Conv(first)) = u.layers.first_mut() {
                first.in_ch = feat;
            }
            u.in_channels = feat;
            named(u, "U")
        },
        named(source_discriminator_spec(Widths::w(widths.discriminator))?, "D_s"),
        named(patch_discriminator_spec(classes, Widths::w(widths.discriminator))?, "D_p"),
    ])
}

/// SHA-256 over the fingerprints of all seven specs, hex encoded.
pub fn spec_hash(specs: &[NetworkSpec; 7]) -> String {
    let mut h = Sha256::new();
    for s in specs {
        h.update(s.fingerprint().as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone)]
pub struct Nets {
    pub nets: [Network; 7],
}

impl Nets {
    pub fn new(classes: usize, widths: &Widths, seed: u64) -> Result<Self> {
        let specs = network_specs(classes, widths)?;
        let mut i = 0u64;
        let nets = specs.map(|s| {
            i += 1;
            Network::new(s, seed.wrapping_mul(0x9E37_79B9).wrapping_add(i))
        });
        let [a, b, c, d, e, f, g] = nets;
        Ok(Self { nets: [a?, b?, c?, d?, e?, f?, g?] })
    }

    pub fn get(&self, id: NetId) -> &Network {
        &self.nets[id.index()]
    }

    pub fn get_mut(&mut self, id: NetId) -> &mut Network {
        &mut self.nets[id.index()]
    }

    pub fn specs(&self) -> [NetworkSpec; 7] {
        self.nets.clone().map(|n| n.spec)
    }

    pub fn spec_hash(&self) -> String {
        spec_hash(&self.specs())
    }

    pub fn checksums(&self) -> [u64; 7] {
        self.nets.each_ref().map(Network::checksum)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use sifa_core::arch::{predict_output_shape, Shape};

    #[test]
    fn desk_specs_compose() {
        let specs = network_specs(5, &Widths::DESK).unwrap();
        let x = Shape::new(1, 64, 64);
        let f = predict_output_shape(&specs[NetId::E.index()], x).unwrap();
        assert_eq!((f.height, f.width), (8, 8));
        assert_eq!(predict_output_shape(&specs[NetId::U.index()], f).unwrap(), x);
        assert_eq!(predict_output_shape(&specs[NetId::C.index()], f).unwrap(), Shape::new(5, 64, 64));
        assert_eq!(predict_output_shape(&specs[NetId::Gt.index()], x).unwrap(), x);
        assert_eq!(predict_output_shape(&specs[NetId::Ds.index()], x).unwrap().channels, 2);
    }

    #[test]
    fn hash_tracks_widths() {
        let a = spec_hash(&network_specs(5, &Widths::DESK).unwrap());
        let b = spec_hash(&network_specs(5, &Widths::FULL).unwrap());
        assert_eq!(a.len(), 64);
        assert_ne!(a, b);
    }
}

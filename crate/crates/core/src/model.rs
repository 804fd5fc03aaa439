//! Patch UNet, geo encoder and context autoencoder, plus latent fusion.
//!
//! The proposed model concatenates the bottlenecks of three encoders
//! channel-wise (patch, coordinates, context, in that order) and decodes the
//! result with the UNet decoder. The baseline is the same UNet with the
//! patch bottleneck alone.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::nn::{
    add_assign, concat_channels, dims4, split_channels, upsample2, upsample2_backward, Conv2d,
    ConvBlock, ConvTranspose2x2, MaxPool2, Param, Pass, Visit,
};
use crate::tensor::{Array, Scalar, TensorArray};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    pub patch_size: usize,
    pub context_size: usize,
    pub in_bands: usize,
    pub context_bands: usize,
    pub geo_bands: usize,
    pub ladder: Vec<usize>,
    pub geo_latent_channels: usize,
    pub unet_pools: usize,
    pub ae_pools: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ArchConfig {
    /// 64-pixel patches, 256-pixel context, narrow ladder.
    pub fn desk() -> Self {
        ArchConfig {
            patch_size: 64,
            context_size: 256,
            in_bands: 10,
            context_bands: 3,
            geo_bands: 3,
            ladder: vec![8, 16, 32, 64],
            geo_latent_channels: 8,
            unet_pools: 3,
            ae_pools: 5,
        }
    }

    /// Full-size configuration: 256-pixel patches, 1024-pixel context.
    pub fn paper_scale() -> Self {
        ArchConfig {
            patch_size: 256,
            context_size: 1024,
            ladder: vec![64, 128, 256, 512],
            geo_latent_channels: 64,
            ..Self::desk()
        }
    }

    /// Tiny configuration for gradient checks; latents are 1 x 1.
    pub fn miniature() -> Self {
        ArchConfig {
            patch_size: 8,
            context_size: 32,
            ladder: vec![2, 3, 4, 5],
            geo_latent_channels: 2,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.ladder.len() < 2 || self.ladder.contains(&0) {
            return bad(format!("ladder {:?} needs at least two non-zero widths", self.ladder));
        }
        if self.unet_pools + 1 != self.ladder.len() {
            return bad(format!(
                "unet_pools ({}) must equal ladder length - 1 ({})",
                self.unet_pools,
                self.ladder.len() - 1
            ));
        }
        if self.ae_pools != self.ladder.len() + 1 {
            return bad(format!(
                "ae_pools ({}) must equal ladder length + 1 ({})",
                self.ae_pools,
                self.ladder.len() + 1
            ));
        }
        if self.context_size != 4 * self.patch_size {
            return bad(format!(
                "context_size ({}) must be 4 x patch_size ({})",
                self.context_size, self.patch_size
            ));
        }
        if self.patch_size % (1 << self.unet_pools) != 0
            || self.context_size % (1 << self.ae_pools) != 0
            || self.patch_size >> self.unet_pools == 0
        {
            return bad(format!(
                "patch {} / context {} not divisible by their pooling factors",
                self.patch_size, self.context_size
            ));
        }
        if self.patch_size >> self.unet_pools != self.context_size >> self.ae_pools {
            return bad("patch and context latent grids differ".into());
        }
        if self.in_bands == 0 || self.context_bands == 0 || self.geo_bands == 0 {
            return bad("band counts must be positive".into());
        }
        if self.geo_latent_channels == 0 {
            return bad("geo_latent_channels must be positive".into());
        }
        Ok(())
    }

    /// Spatial extent of every encoder's latent grid.
    pub fn latent_size(&self) -> usize {
        self.patch_size >> self.unet_pools
    }

    pub fn patch_latent_channels(&self) -> usize {
        *self.ladder.last().unwrap()
    }

    pub fn context_latent_channels(&self) -> usize {
        *self.ladder.last().unwrap()
    }

    pub fn fused_channels(&self) -> usize {
        self.patch_latent_channels() + self.geo_latent_channels + self.context_latent_channels()
    }

    pub fn decoder_input_channels(&self, variant: Variant) -> usize {
        match variant {
            Variant::Baseline => self.patch_latent_channels(),
            Variant::Proposed => self.fused_channels(),
        }
    }

    /// `[ceil(ladder[0] / 2), ladder...]`
    pub fn ae_channels(&self) -> Vec<usize> {
        let mut ch = vec![self.ladder[0].div_ceil(2)];
        ch.extend_from_slice(&self.ladder);
        ch
    }

    /// Narrow ladder ending at `geo_latent_channels`, e.g. `[2, 4, 8, 8]`
    /// for a width of 8.
    pub fn geo_ladder(&self) -> Vec<usize> {
        let g = self.geo_latent_channels;
        let l = self.ladder.len();
        (0..l)
            .map(|i| {
                if i + 1 >= l {
                    g
                } else {
                    (g >> (l - 2 - i)).max(1)
                }
            })
            .collect()
    }

    /// Shapes (h, w, c) of skips and latent for the patch encoder.
    pub fn unet_encoder_shapes(&self) -> (Vec<[usize; 3]>, [usize; 3]) {
        let skips = (0..self.unet_pools)
            .map(|i| {
                let s = self.patch_size >> i;
                [s, s, self.ladder[i]]
            })
            .collect();
        let s = self.latent_size();
        (skips, [s, s, self.patch_latent_channels()])
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let ladder = self
            .ladder
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("patch_size".into(), self.patch_size.to_string()),
            ("context_size".into(), self.context_size.to_string()),
            ("in_bands".into(), self.in_bands.to_string()),
            ("context_bands".into(), self.context_bands.to_string()),
            ("geo_bands".into(), self.geo_bands.to_string()),
            ("ladder".into(), ladder),
            ("geo_latent_channels".into(), self.geo_latent_channels.to_string()),
            ("unet_pools".into(), self.unet_pools.to_string()),
            ("ae_pools".into(), self.ae_pools.to_string()),
        ]
    }

    /// Applies one `key=value` setting; `Ok(false)` for foreign keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(format!("bad value `{v}` for `{key}`")))
        }
        match key {
            "patch_size" => self.patch_size = p(key, value)?,
            "context_size" => self.context_size = p(key, value)?,
            "in_bands" => self.in_bands = p(key, value)?,
            "context_bands" => self.context_bands = p(key, value)?,
            "geo_bands" => self.geo_bands = p(key, value)?,
            "ladder" => {
                self.ladder = value
                    .split(',')
                    .map(|c| p(key, c.trim()))
                    .collect::<Result<_>>()?
            }
            "geo_latent_channels" => self.geo_latent_channels = p(key, value)?,
            "unet_pools" => self.unet_pools = p(key, value)?,
            "ae_pools" => self.ae_pools = p(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Component {
    UnetEnc,
    UnetDec,
    GeoEnc,
    AeEnc,
    AeDec,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::UnetEnc,
        Component::UnetDec,
        Component::GeoEnc,
        Component::AeEnc,
        Component::AeDec,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::UnetEnc => "unet_enc",
            Component::UnetDec => "unet_dec",
            Component::GeoEnc => "geo_enc",
            Component::AeEnc => "ae_enc",
            Component::AeDec => "ae_dec",
        }
    }
}

impl FromStr for Component {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::config(format!("unknown component `{s}`")))
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Plain UNet, or UNet decoding the fused latent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    Proposed,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Proposed => "proposed",
        }
    }

    /// Components updated during regression training.
    pub fn trained_components(self) -> &'static [Component] {
        match self {
            Variant::Baseline => &[Component::UnetEnc, Component::UnetDec],
            Variant::Proposed => &[Component::UnetEnc, Component::UnetDec, Component::GeoEnc],
        }
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "proposed" => Ok(Variant::Proposed),
            _ => Err(Error::config(format!("unknown variant `{s}`"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Conv blocks with 2x2 max-pooling after the first `n_pools` of them.
#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub in_channels: usize,
    pub blocks: Vec<ConvBlock<T>>,
    pools: Vec<MaxPool2>,
    pub n_pools: usize,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput<T> {
    /// Pre-pool activations of the pooled blocks, shallowest first.
    pub skips: Vec<Array<T>>,
    pub latent: Array<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(
        name: &str,
        in_channels: usize,
        channels: &[usize],
        n_pools: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(n_pools <= channels.len());
        let mut cin = in_channels;
        let blocks = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let b = ConvBlock::new(&format!("{name}.block{i}"), cin, c, rng);
                cin = c;
                b
            })
            .collect();
        Encoder {
            in_channels,
            blocks,
            pools: vec![MaxPool2::default(); n_pools],
            n_pools,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().unwrap().out_channels()
    }

    pub fn forward(&mut self, x: &Array<T>, pass: Pass, keep_skips: bool) -> EncoderOutput<T> {
        let mut skips = Vec::new();
        let mut h = x.clone();
        for (i, block) in self.blocks.iter_mut().enumerate() {
            h = block.forward(&h, pass);
            if i < self.n_pools {
                if keep_skips {
                    skips.push(h.clone());
                }
                h = self.pools[i].forward(&h, pass);
            }
        }
        EncoderOutput { skips, latent: h }
    }

    /// `dskips` must be empty or hold one gradient per skip.
    pub fn backward(
        &mut self,
        dlatent: &Array<T>,
        dskips: &[Array<T>],
        need_dx: bool,
    ) -> Option<Array<T>> {
        let mut g = dlatent.clone();
        for i in (0..self.blocks.len()).rev() {
            if i < self.n_pools {
                g = self.pools[i].backward(&g);
                if let Some(ds) = dskips.get(i) {
                    add_assign(&mut g, ds);
                }
            }
            g = self.blocks[i].backward(&g, i > 0 || need_dx)?;
        }
        Some(g)
    }
}

impl<T: Scalar> Visit<T> for Encoder<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.blocks.iter().for_each(|b| b.visit(f));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.blocks.iter_mut().for_each(|b| b.visit_mut(f));
    }
}

/// Transposed-conv up blocks with skip concatenation, then a 1x1 head
/// emitting one raw logit per pixel.
#[derive(Clone, Debug)]
pub struct UNetDecoder<T> {
    pub in_channels: usize,
    pub ups: Vec<ConvTranspose2x2<T>>,
    pub blocks: Vec<ConvBlock<T>>,
    pub head: Conv2d<T>,
}

impl<T: Scalar> UNetDecoder<T> {
    pub fn new(name: &str, in_channels: usize, ladder: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let l = ladder.len();
        let mut ups = Vec::new();
        let mut blocks = Vec::new();
        let mut cin = in_channels;
        for k in 0..l - 1 {
            let c = ladder[l - 2 - k];
            ups.push(ConvTranspose2x2::new(&format!("{name}.up{k}"), cin, c, rng));
            blocks.push(ConvBlock::new(&format!("{name}.block{k}"), 2 * c, c, rng));
            cin = c;
        }
        UNetDecoder {
            in_channels,
            ups,
            blocks,
            head: Conv2d::new(&format!("{name}.head"), 1, ladder[0], 1, rng),
        }
    }

    /// `skips` are shallowest first, as the encoder returns them.
    pub fn forward(&mut self, latent: &Array<T>, skips: &[Array<T>], pass: Pass) -> Array<T> {
        let n = self.ups.len();
        let mut g = latent.clone();
        for k in 0..n {
            let u = self.ups[k].forward(&g, pass);
            let cat = concat_channels(&[&u, &skips[n - 1 - k]]);
            g = self.blocks[k].forward(&cat, pass);
        }
        self.head.forward(&g, pass)
    }

    /// Returns `(d latent, d skips)` with skips shallowest first.
    pub fn backward(&mut self, dlogits: &Array<T>) -> (Array<T>, Vec<Array<T>>) {
        let n = self.ups.len();
        let mut dskips = vec![None; n];
        let mut g = self.head.backward(dlogits, true).unwrap();
        for k in (0..n).rev() {
            let dcat = self.blocks[k].backward(&g, true).unwrap();
            let c = self.ups[k].cout;
            let mut parts = split_channels(&dcat, &[c, c]).into_iter();
            let du = parts.next().unwrap();
            dskips[n - 1 - k] = parts.next();
            g = self.ups[k].backward(&du);
        }
        (g, dskips.into_iter().map(Option::unwrap).collect())
    }
}

impl<T: Scalar> Visit<T> for UNetDecoder<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        for (u, b) in self.ups.iter().zip(&self.blocks) {
            u.visit(f);
            b.visit(f);
        }
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for (u, b) in self.ups.iter_mut().zip(self.blocks.iter_mut()) {
            u.visit_mut(f);
            b.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}

/// Nearest-neighbour upsample + conv block per level, 1x1 head, sigmoid.
#[derive(Clone, Debug)]
pub struct AeDecoder<T> {
    pub blocks: Vec<ConvBlock<T>>,
    pub head: Conv2d<T>,
    output: Option<Array<T>>,
}

impl<T: Scalar> AeDecoder<T> {
    /// `enc_channels` are the encoder's block widths, shallowest first.
    pub fn new(name: &str, enc_channels: &[usize], out_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let l = enc_channels.len();
        let mut cin = enc_channels[l - 1];
        let blocks = (0..l)
            .map(|k| {
                let c = enc_channels[(l as isize - 2 - k as isize).max(0) as usize];
                let b = ConvBlock::new(&format!("{name}.block{k}"), cin, c, rng);
                cin = c;
                b
            })
            .collect();
        AeDecoder {
            blocks,
            head: Conv2d::new(&format!("{name}.head"), 1, enc_channels[0], out_channels, rng),
            output: None,
        }
    }

    pub fn forward(&mut self, latent: &Array<T>, pass: Pass) -> Array<T> {
        let mut g = latent.clone();
        for b in self.blocks.iter_mut() {
            g = b.forward(&upsample2(&g), pass);
        }
        let mut y = self.head.forward(&g, pass);
        y.data_mut()
            .iter_mut()
            .for_each(|v| *v = T::one() / (T::one() + (-*v).exp()));
        self.output = if pass.record { Some(y.clone()) } else { None };
        y
    }

    pub fn backward(&mut self, dy: &Array<T>) -> Array<T> {
        let y = self
            .output
            .take()
            .expect("AeDecoder::backward without a recorded forward pass");
        let mut g = dy.clone();
        for (d, s) in g.data_mut().iter_mut().zip(y.data()) {
            *d *= *s * (T::one() - *s);
        }
        let mut g = self.head.backward(&g, true).unwrap();
        for b in self.blocks.iter_mut().rev() {
            g = upsample2_backward(&b.backward(&g, true).unwrap());
        }
        g
    }
}

impl<T: Scalar> Visit<T> for AeDecoder<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.blocks.iter().for_each(|b| b.visit(f));
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.blocks.iter_mut().for_each(|b| b.visit_mut(f));
        self.head.visit_mut(f);
    }
}

/// Channel-wise concatenation `L_P ++ L_C ++ L_T` of NHWC latents.
pub fn fuse_latents<T: Scalar>(
    patch: &Array<T>,
    geo: &Array<T>,
    context: &Array<T>,
) -> Result<Array<T>> {
    let spatial = |a: &Array<T>| a.shape()[..a.ndim() - 1].to_vec();
    let (sp, sg, sc) = (spatial(patch), spatial(geo), spatial(context));
    if patch.ndim() != 4 || geo.ndim() != 4 || context.ndim() != 4 || sp != sg || sp != sc {
        return Err(Error::Fusion(format!(
            "patch {:?}, geo {:?}, context {:?}",
            patch.shape(),
            geo.shape(),
            context.shape()
        )));
    }
    Ok(concat_channels(&[patch, geo, context]))
}

/// All learnable state of the framework.
#[derive(Clone, Debug)]
pub struct ModelBundle<T = f32> {
    pub arch: ArchConfig,
    pub variant: Variant,
    pub unet_enc: Encoder<T>,
    pub unet_dec: UNetDecoder<T>,
    pub geo_enc: Encoder<T>,
    pub ae_enc: Encoder<T>,
    pub ae_dec: AeDecoder<T>,
    pub frozen: BTreeSet<Component>,
}

impl<T: Scalar> ModelBundle<T> {
    /// Kaiming-normal conv weights, zero biases, unit batch-norm scale. Each
    /// component draws from its own stream, so a component's initial
    /// weights do not depend on which variant is built.
    pub fn init(arch: &ArchConfig, variant: Variant, seed: u64) -> Result<Self> {
        arch.validate()?;
        let rng = |c: Component| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(c as u64 + 1);
            r
        };
        let pools = arch.unet_pools;
        Ok(ModelBundle {
            unet_enc: Encoder::new(
                "unet_enc",
                arch.in_bands,
                &arch.ladder,
                pools,
                &mut rng(Component::UnetEnc),
            ),
            unet_dec: UNetDecoder::new(
                "unet_dec",
                arch.decoder_input_channels(variant),
                &arch.ladder,
                &mut rng(Component::UnetDec),
            ),
            geo_enc: Encoder::new(
                "geo_enc",
                arch.geo_bands,
                &arch.geo_ladder(),
                pools,
                &mut rng(Component::GeoEnc),
            ),
            ae_enc: Encoder::new(
                "ae_enc",
                arch.context_bands,
                &arch.ae_channels(),
                arch.ae_pools,
                &mut rng(Component::AeEnc),
            ),
            ae_dec: AeDecoder::new(
                "ae_dec",
                &arch.ae_channels(),
                arch.context_bands,
                &mut rng(Component::AeDec),
            ),
            arch: arch.clone(),
            variant,
            frozen: BTreeSet::new(),
        })
    }

    pub fn freeze(&mut self, component: Component) {
        self.frozen.insert(component);
    }

    pub fn freeze_named(&mut self, name: &str) -> Result<()> {
        self.freeze(name.parse()?);
        Ok(())
    }

    pub fn unfreeze(&mut self, component: Component) {
        self.frozen.remove(&component);
    }

    pub fn is_frozen(&self, c: Component) -> bool {
        self.frozen.contains(&c)
    }

    fn pass_for(&self, c: Component, pass: Pass) -> Pass {
        if self.is_frozen(c) {
            Pass {
                train: false,
                record: false,
            }
        } else {
            pass
        }
    }

    pub fn visit_component(&self, c: Component, f: &mut dyn FnMut(&Param<T>)) {
        match c {
            Component::UnetEnc => self.unet_enc.visit(f),
            Component::UnetDec => self.unet_dec.visit(f),
            Component::GeoEnc => self.geo_enc.visit(f),
            Component::AeEnc => self.ae_enc.visit(f),
            Component::AeDec => self.ae_dec.visit(f),
        }
    }

    pub fn visit_component_mut(&mut self, c: Component, f: &mut dyn FnMut(&mut Param<T>)) {
        match c {
            Component::UnetEnc => self.unet_enc.visit_mut(f),
            Component::UnetDec => self.unet_dec.visit_mut(f),
            Component::GeoEnc => self.geo_enc.visit_mut(f),
            Component::AeEnc => self.ae_enc.visit_mut(f),
            Component::AeDec => self.ae_dec.visit_mut(f),
        }
    }

    pub fn zero_grad(&mut self) {
        for c in Component::ALL {
            self.visit_component_mut(c, &mut |p| p.zero_grad());
        }
    }

    pub fn parameter_count(&self, c: Component) -> usize {
        let mut n = 0;
        self.visit_component(c, &mut |p| {
            if p.trainable {
                n += p.value.len()
            }
        });
        n
    }

    /// SHA-256 over every tensor (including running statistics) of a
    /// component, as f32 little-endian bytes.
    pub fn checksum(&self, c: Component) -> String {
        let mut h = Sha256::new();
        self.visit_component(c, &mut |p| {
            h.update(p.name.as_bytes());
            for v in &p.value {
                h.update((v.as_f64() as f32).to_le_bytes());
            }
        });
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn check_input(&self, what: &str, x: &Array<T>, size: usize, bands: usize) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != size || s[2] != size || s[3] != bands {
            return Err(Error::shape(format!(
                "{what} has shape {s:?}, expected [n, {size}, {size}, {bands}]"
            )));
        }
        Ok(())
    }

    pub fn unet_encoder_forward(&mut self, patch: &Array<T>, pass: Pass) -> Result<EncoderOutput<T>> {
        self.check_input("patch", patch, self.arch.patch_size, self.arch.in_bands)?;
        let pass = self.pass_for(Component::UnetEnc, pass);
        Ok(self.unet_enc.forward(patch, pass, true))
    }

    pub fn geo_encoder_forward(&mut self, grid: &Array<T>, pass: Pass) -> Result<Array<T>> {
        self.check_input("geo grid", grid, self.arch.patch_size, self.arch.geo_bands)?;
        let pass = self.pass_for(Component::GeoEnc, pass);
        Ok(self.geo_enc.forward(grid, pass, false).latent)
    }

    pub fn ae_encoder_forward(&mut self, tile: &Array<T>, pass: Pass) -> Result<Array<T>> {
        self.check_input("context tile", tile, self.arch.context_size, self.arch.context_bands)?;
        let pass = self.pass_for(Component::AeEnc, pass);
        Ok(self.ae_enc.forward(tile, pass, false).latent)
    }

    pub fn ae_decoder_forward(&mut self, latent: &Array<T>, pass: Pass) -> Result<Array<T>> {
        let s = self.arch.latent_size();
        self.check_input("context latent", latent, s, self.arch.context_latent_channels())?;
        let pass = self.pass_for(Component::AeDec, pass);
        Ok(self.ae_dec.forward(latent, pass))
    }

    pub fn unet_decoder_forward(
        &mut self,
        latent: &Array<T>,
        skips: &[Array<T>],
        pass: Pass,
    ) -> Result<Array<T>> {
        let s = self.arch.latent_size();
        self.check_input("decoder input", latent, s, self.unet_dec.in_channels)?;
        let (skip_shapes, _) = self.arch.unet_encoder_shapes();
        if skips.len() != skip_shapes.len()
            || skips
                .iter()
                .zip(&skip_shapes)
                .any(|(a, e)| a.shape()[1..] != e[..] || a.shape()[0] != latent.shape()[0])
        {
            return Err(Error::shape(format!(
                "decoder skips {:?} do not match {:?}",
                skips.iter().map(|s| s.shape().to_vec()).collect::<Vec<_>>(),
                skip_shapes
            )));
        }
        let pass = self.pass_for(Component::UnetDec, pass);
        Ok(self.unet_dec.forward(latent, skips, pass))
    }

    /// Autoencoder reconstruction of a batch of context tiles.
    pub fn reconstruct(&mut self, tile: &Array<T>, pass: Pass) -> Result<Array<T>> {
        let latent = self.ae_encoder_forward(tile, pass)?;
        self.ae_decoder_forward(&latent, pass)
    }

    /// Backward through decoder then encoder of the autoencoder.
    pub fn reconstruct_backward(&mut self, drecon: &Array<T>) {
        let dl = self.ae_dec.backward(drecon);
        if !self.is_frozen(Component::AeEnc) {
            self.ae_enc.backward(&dl, &[], false);
        }
    }

    /// Logits `[n, h, w, 1]` from the patch and, for the proposed variant,
    /// the geo grid and an already encoded context latent.
    pub fn forward_regression(
        &mut self,
        patch: &Array<T>,
        geo: Option<&Array<T>>,
        context_latent: Option<&Array<T>>,
        pass: Pass,
    ) -> Result<Array<T>> {
        let enc = self.unet_encoder_forward(patch, pass)?;
        let latent = match self.variant {
            Variant::Baseline => enc.latent,
            Variant::Proposed => {
                let geo = geo.ok_or_else(|| Error::config("proposed variant needs a geo grid"))?;
                let ctx = context_latent
                    .ok_or_else(|| Error::config("proposed variant needs a context latent"))?;
                let lc = self.geo_encoder_forward(geo, pass)?;
                fuse_latents(&enc.latent, &lc, ctx)?
            }
        };
        self.unet_decoder_forward(&latent, &enc.skips, pass)
    }

    /// Accumulates gradients of every non-frozen regression component and
    /// returns the gradient with respect to the context latent (proposed
    /// variant only).
    pub fn backward_regression(&mut self, dlogits: &Array<T>) -> Option<Array<T>> {
        let (dlatent, dskips) = self.unet_dec.backward(dlogits);
        let (dp, dctx) = match self.variant {
            Variant::Baseline => (dlatent, None),
            Variant::Proposed => {
                let widths = [
                    self.arch.patch_latent_channels(),
                    self.arch.geo_latent_channels,
                    self.arch.context_latent_channels(),
                ];
                let mut parts = split_channels(&dlatent, &widths).into_iter();
                let dp = parts.next().unwrap();
                let dg = parts.next().unwrap();
                let dt = parts.next().unwrap();
                if !self.is_frozen(Component::GeoEnc) {
                    self.geo_enc.backward(&dg, &[], false);
                }
                (dp, Some(dt))
            }
        };
        if !self.is_frozen(Component::UnetEnc) {
            self.unet_enc.backward(&dp, &dskips, false);
        }
        dctx
    }
}

/// Inputs of a single prediction; geo and context may be absent for the
/// baseline.
#[derive(Clone, Copy, Debug)]
pub struct PredictInput<'a> {
    pub patch: &'a TensorArray,
    pub geo: Option<&'a TensorArray>,
    pub context: Option<&'a TensorArray>,
}

impl<'a> From<&'a Sample> for PredictInput<'a> {
    fn from(s: &'a Sample) -> Self {
        PredictInput {
            patch: &s.patch,
            geo: Some(&s.geo.values),
            context: Some(&s.context),
        }
    }
}

/// Adds a leading batch axis of 1 and converts to the compute type.
pub fn batch_of_one<T: Scalar>(t: &TensorArray) -> Array<T> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    Array::raw(shape, t.data().iter().map(|&v| T::from_f64(v as f64)).collect())
}

/// Stacks h x w x c tensors into `[n, h, w, c]`.
pub fn stack<T: Scalar>(items: &[&TensorArray]) -> Array<T> {
    let mut shape = vec![items.len()];
    shape.extend_from_slice(items[0].shape());
    let mut data = Vec::with_capacity(items.len() * items[0].len());
    for t in items {
        debug_assert_eq!(t.shape(), items[0].shape());
        data.extend(t.data().iter().map(|&v| T::from_f64(v as f64)));
    }
    Array::raw(shape, data)
}

impl ModelBundle<f32> {
    /// Evaluation-mode prediction clamped to `[0, 1]`, shape h x w.
    pub fn predict(&mut self, input: PredictInput<'_>, variant: Variant) -> Result<TensorArray> {
        if variant != self.variant {
            return Err(Error::config(format!(
                "bundle holds a {} model, {} requested",
                self.variant, variant
            )));
        }
        let patch = batch_of_one::<f32>(input.patch);
        let (geo, ctx_latent) = match variant {
            Variant::Baseline => (None, None),
            Variant::Proposed => {
                let geo = input
                    .geo
                    .ok_or_else(|| Error::config("proposed prediction needs the geo grid"))?;
                let ctx = input
                    .context
                    .ok_or_else(|| Error::config("proposed prediction needs the context tile"))?;
                let lt = self.ae_encoder_forward(&batch_of_one(ctx), Pass::EVAL)?;
                (Some(batch_of_one::<f32>(geo)), Some(lt))
            }
        };
        let logits = self.forward_regression(&patch, geo.as_ref(), ctx_latent.as_ref(), Pass::EVAL)?;
        let (_, h, w, _) = dims4(&logits);
        let data = logits
            .into_data()
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        TensorArray::from_shape_vec(&[h, w], data)
    }
}

/// Convenience wrapper over [`ModelBundle::predict`] for a full sample.
pub fn predict(bundle: &mut ModelBundle<f32>, sample: &Sample, variant: Variant) -> Result<TensorArray> {
    bundle.predict(sample.into(), variant)
}

/// Copies all tensors of one bundle into another of a different scalar type.
pub fn convert_bundle<A: Scalar, B: Scalar>(src: &ModelBundle<A>) -> ModelBundle<B> {
    let mut dst = ModelBundle::<B>::init(&src.arch, src.variant, 0).expect("validated arch");
    for c in Component::ALL {
        let mut values = Vec::new();
        src.visit_component(c, &mut |p| values.push(p.value.clone()));
        let mut it = values.into_iter();
        dst.visit_component_mut(c, &mut |p| {
            p.value = it.next().unwrap().into_iter().map(|v| B::from_f64(v.as_f64())).collect();
        });
    }
    dst.frozen = src.frozen.clone();
    dst
}

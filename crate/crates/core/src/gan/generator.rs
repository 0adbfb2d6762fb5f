use crate::error::{invalid, Result};
use crate::geometry::EmbeddedPair;
use crate::image::{EquirectImage, Image};
use crate::nn::{
    BatchNorm2d, Conv2d, ConvTranspose2d, Dropout, Grads, Layer, Mode, Network, OneHotLabel, Param, Pass, Real,
    Saved, Sequential, Tensor4,
};
use crate::seed;

use super::Conditioning;

/// U-Net generator configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    pub base_channels: usize,
    /// Number of encoder (and decoder) stages.
    pub depth: usize,
    pub k_classes: usize,
    pub conditioning: Conditioning,
    /// Dropout is applied in this many innermost decoder stages.
    pub dropout_stages: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl GeneratorSpec {
    pub fn new(base_channels: usize, depth: usize, k_classes: usize, conditioning: Conditioning) -> Self {
        Self { base_channels, depth, k_classes, conditioning, dropout_stages: 3, in_channels: 3, out_channels: 3 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 3 {
            return Err(invalid(format!("generator depth must be >= 3, got {}", self.depth)));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(invalid("channel counts must be positive"));
        }
        if self.conditioning == Conditioning::ClassConditioned && self.k_classes == 0 {
            return Err(invalid("class-conditioned generator needs at least one class"));
        }
        Ok(())
    }

    /// Output channels of encoder stage `i`: `base · min(2^i, 8)`.
    pub fn stage_channels(&self, i: usize) -> usize {
        self.base_channels * (1usize << i.min(3))
    }

    /// `(channels, height, width)` after every encoder stage for an input of
    /// `height x width`.
    pub fn encoder_shapes(&self, height: usize, width: usize) -> Result<Vec<(usize, usize, usize)>> {
        let f = 1usize << self.depth;
        if !height.is_multiple_of(f) || !width.is_multiple_of(f) || height == 0 || width == 0 {
            return Err(invalid(format!(
                "input {width}x{height} is not divisible by 2^{} = {f}",
                self.depth
            )));
        }
        Ok((0..self.depth).map(|i| (self.stage_channels(i), height >> (i + 1), width >> (i + 1))).collect())
    }
}

/// U-Net with skip connections between mirrored stages and a `tanh` head.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    spec: GeneratorSpec,
    down: Vec<Sequential<T>>,
    up: Vec<Sequential<T>>,
}

/// Forward context of a generator pass.
pub struct GeneratorSaved<T> {
    down: Vec<Vec<Saved<T>>>,
    up: Vec<Vec<Saved<T>>>,
    skip_channels: Vec<usize>,
}

impl<T: Real> Generator<T> {
    pub fn new(spec: GeneratorSpec, init_seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seed::rng(init_seed);
        let rng = &mut rng;
        let k = spec.conditioning.classes(spec.k_classes);
        let d = spec.depth;
        let ch = |i: usize| spec.stage_channels(i);

        let mut down = Vec::with_capacity(d);
        for i in 0..d {
            let in_ch = if i == 0 { spec.in_channels } else { ch(i - 1) };
            let mut layers = Vec::new();
            if i > 0 {
                layers.push(Layer::LeakyRelu(0.2));
            }
            layers.push(Layer::Conv(Conv2d::down(in_ch, ch(i), rng)).conditioned(k, rng)?);
            if i > 0 && i < d - 1 {
                layers.push(Layer::BatchNorm(BatchNorm2d::new(ch(i), rng)));
            }
            down.push(Sequential::new(layers));
        }

        let mut up = Vec::with_capacity(d);
        for i in 0..d {
            let in_ch = if i == d - 1 { ch(i) } else { 2 * ch(i) };
            let out_ch = if i == 0 { spec.out_channels } else { ch(i - 1) };
            let mut layers = vec![Layer::Relu, Layer::Deconv(ConvTranspose2d::up(in_ch, out_ch, rng)).conditioned(k, rng)?];
            if i == 0 {
                layers.push(Layer::Tanh);
            } else {
                layers.push(Layer::BatchNorm(BatchNorm2d::new(out_ch, rng)));
                if i + spec.dropout_stages >= d {
                    layers.push(Layer::Dropout(Dropout { p: 0.5 }));
                }
            }
            up.push(Sequential::new(layers));
        }
        Ok(Self { spec, down, up })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    /// Encoder stage `i` and decoder stage `i` (stage 0 is outermost).
    pub fn stages_mut(&mut self) -> (&mut [Sequential<T>], &mut [Sequential<T>]) {
        (&mut self.down, &mut self.up)
    }

    pub fn check_label(&self, labels: &[OneHotLabel]) -> Result<()> {
        if let Some(l) = labels.iter().find(|l| l.classes() != self.spec.k_classes) {
            return Err(invalid(format!(
                "label has {} classes, generator was built for {}",
                l.classes(),
                self.spec.k_classes
            )));
        }
        if self.spec.conditioning == Conditioning::ClassConditioned && labels.is_empty() {
            return Err(invalid("class-conditioned generator needs a label"));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor4<T>, pass: &mut Pass) -> Result<(Tensor4<T>, GeneratorSaved<T>)> {
        if x.c() != self.spec.in_channels {
            return Err(invalid(format!("generator expects {} channels, got {}", self.spec.in_channels, x.c())));
        }
        self.spec.encoder_shapes(x.h(), x.w())?;
        self.check_label(&pass.labels)?;
        let d = self.spec.depth;
        let mut feats: Vec<Tensor4<T>> = Vec::with_capacity(d);
        let mut down_saved = Vec::with_capacity(d);
        for (i, stage) in self.down.iter().enumerate() {
            let (y, s) = stage.forward(if i == 0 { x } else { &feats[i - 1] }, pass)?;
            feats.push(y);
            down_saved.push(s);
        }
        let mut up_saved: Vec<Vec<Saved<T>>> = (0..d).map(|_| Vec::new()).collect();
        let (mut u, s) = self.up[d - 1].forward(&feats[d - 1], pass)?;
        up_saved[d - 1] = s;
        for i in (0..d - 1).rev() {
            let cat = Tensor4::concat_channels(&feats[i], &u)?;
            let (y, s) = self.up[i].forward(&cat, pass)?;
            up_saved[i] = s;
            u = y;
        }
        let skip_channels = feats.iter().map(|f| f.c()).collect();
        Ok((u, GeneratorSaved { down: down_saved, up: up_saved, skip_channels }))
    }

    pub fn backward(&self, saved: &GeneratorSaved<T>, grad_out: &Tensor4<T>) -> Result<(Tensor4<T>, Grads<T>)> {
        let d = self.spec.depth;
        let mut up_grads: Vec<Grads<T>> = (0..d).map(|_| Vec::new()).collect();
        let mut skip: Vec<Option<Tensor4<T>>> = (0..d).map(|_| None).collect();
        let mut g = grad_out.clone();
        for i in 0..d - 1 {
            let (dcat, pg) = self.up[i].backward(&saved.up[i], &g)?;
            up_grads[i] = pg;
            let (dskip, du) = dcat.split_channels(saved.skip_channels[i]);
            skip[i] = Some(dskip);
            g = du;
        }
        let (dinner, pg) = self.up[d - 1].backward(&saved.up[d - 1], &g)?;
        up_grads[d - 1] = pg;
        skip[d - 1] = Some(dinner);

        let mut down_grads: Vec<Grads<T>> = (0..d).map(|_| Vec::new()).collect();
        let mut carry: Option<Tensor4<T>> = None;
        for i in (0..d).rev() {
            let mut gi = skip[i].take().expect("every stage has a skip gradient");
            if let Some(c) = carry.take() {
                gi.add_assign(&c);
            }
            let (dx, pg) = self.down[i].backward(&saved.down[i], &gi)?;
            down_grads[i] = pg;
            carry = Some(dx);
        }
        let grads = down_grads.into_iter().chain(up_grads).flatten().collect();
        Ok((carry.expect("depth >= 1"), grads))
    }
}

impl<T: Real> Network<T> for Generator<T> {
    fn params(&self) -> Vec<&Param<T>> {
        self.down.iter().chain(&self.up).flat_map(|s| s.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.down.iter_mut().chain(self.up.iter_mut()).flat_map(|s| s.params_mut()).collect()
    }

    fn param_names(&self) -> Vec<String> {
        let down = self.down.iter().enumerate().flat_map(|(i, s)| {
            s.param_names().into_iter().map(move |n| format!("down.{i}.{n}"))
        });
        let up = self
            .up
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.param_names().into_iter().map(move |n| format!("up.{i}.{n}")));
        down.chain(up).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GenerateOptions {
    /// Copy the embedded snapshot pixels back over the generated output.
    pub paste_snapshot: bool,
}

/// Generates a panorama from an embedded snapshot. Dropout stays active and
/// is seeded by `noise_seed`, which plays the role of the noise input.
pub fn generate<T: Real>(
    generator: &Generator<T>,
    embedded: &EmbeddedPair,
    label: OneHotLabel,
    noise_seed: u64,
    options: GenerateOptions,
) -> Result<EquirectImage> {
    let x = embedded.canvas.to_tensor::<T>();
    let mut pass = Pass::new(Mode::Train, noise_seed).with_labels(vec![label]);
    let (y, _) = generator.forward(&x, &mut pass)?;
    let mut out = EquirectImage::new(Image::from_tensor(&y, 0)?)?;
    if options.paste_snapshot {
        let img = out.image_mut();
        for yy in 0..img.height() {
            for xx in 0..img.width() {
                if embedded.mask.get(xx, yy) {
                    img.pixel_mut(xx, yy).copy_from_slice(embedded.canvas.pixel(xx, yy));
                }
            }
        }
    }
    Ok(out)
}

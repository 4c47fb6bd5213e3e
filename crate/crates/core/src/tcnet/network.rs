use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{NetworkConfig, STAGES};
use crate::cff::{CffBlock, FusionWeights};
use crate::cpa::{AttentionResult, CpaBlock, PatchGrid};
use crate::error::{Error, Result};
use crate::mdu::{MduBlock, MduSpec};
use crate::nn::conv::ConvSpec;
use crate::nn::params::{Conv, ConvBnRelu, ParamStore, Session};
use crate::nn::tape::Var;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
enum Upsample {
    Mdu(MduBlock),
    /// Nearest-neighbour 2x followed by a 3x3 convolution block.
    Nearest(ConvBnRelu),
}

#[derive(Clone, Debug)]
struct Layers {
    enc2d: Vec<[ConvBnRelu; 2]>,
    cpa: Vec<Option<CpaBlock>>,
    enc3d: Vec<[ConvBnRelu; 2]>,
    cff: Vec<Option<CffBlock>>,
    up: Vec<Upsample>,
    dec: Vec<[ConvBnRelu; 2]>,
    head: Conv,
}

/// The segmentation network: parameters plus the layer wiring.
#[derive(Clone, Debug)]
pub struct Network<T: Real = f32> {
    pub config: NetworkConfig,
    pub store: ParamStore<T>,
    layers: Layers,
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct TraceVars {
    /// `N x 1 x H x W`.
    pub logits: Var,
    /// Per stage: `N x 1 x G x G` attention weights (absent without patch attention).
    pub grids: Vec<Option<Var>>,
    /// Per stage: `N x 1 x h x w` expanded attention maps.
    pub maps: Vec<Option<Var>>,
    /// Per stage: attended features (the stage features when attention is off).
    pub attended: Vec<Var>,
    /// Per stage: `(w2, w3)`, each `N x C`, at fused stages.
    pub fusion: Vec<Option<(Var, Var)>>,
}

/// Per-stage attention of a batch.
#[derive(Clone, Debug)]
pub struct StageAttention<T: Real = f32> {
    /// `N x G x G`.
    pub grid: Tensor<T>,
    /// `N x 1 x h x w`.
    pub map: Tensor<T>,
    /// `N x C x h x w`.
    pub output: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace<T: Real = f32> {
    pub attention: Vec<Option<StageAttention<T>>>,
    /// Batched `N x C` fusion weights at fused stages.
    pub fusion: Vec<Option<FusionWeights<T>>>,
    /// `N x 1 x H x W`.
    pub logits: Tensor<T>,
    /// Sigmoid of the logits.
    pub probs: Tensor<T>,
}

fn sample_of<T: Real>(t: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    let per = t.len() / t.shape()[0];
    Tensor::new(&t.shape()[1..], t.data()[n * per..(n + 1) * per].to_vec())
}

impl<T: Real> ForwardTrace<T> {
    pub fn batch(&self) -> usize {
        self.logits.shape()[0]
    }

    /// Attention of one sample at 0-based `stage`.
    pub fn attention_result(&self, stage: usize, sample: usize) -> Result<Option<AttentionResult<T>>> {
        let Some(a) = self.attention.get(stage).and_then(|a| a.as_ref()) else {
            return Ok(None);
        };
        let map = sample_of(&a.map, sample)?;
        let source_shape = (map.shape()[1], map.shape()[2]);
        Ok(Some(AttentionResult {
            grid: PatchGrid {
                grid: sample_of(&a.grid, sample)?,
                source_shape,
            },
            map,
            output: sample_of(&a.output, sample)?,
        }))
    }

    /// `H x W` probability map of one sample.
    pub fn prob_map(&self, sample: usize) -> Result<Tensor<T>> {
        let s = self.probs.shape();
        sample_of(&self.probs, sample)?.reshape(&[s[2], s[3]])
    }
}

fn conv2d(cin: usize, cout: usize) -> ConvSpec {
    ConvSpec::same2d(cin, cout, 3)
}

impl<T: Real> Network<T> {
    /// Kaiming-normal weights and zero biases drawn from `seed`.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let st = &mut store;
        let ch = &config.stage_channels;

        let mut enc2d = Vec::with_capacity(STAGES);
        let mut cpa = Vec::with_capacity(STAGES);
        for i in 0..STAGES {
            let cin = if i == 0 { config.in_slices } else { ch[i - 1] };
            let name = format!("enc{}", i + 1);
            enc2d.push([
                ConvBnRelu::new(st, &format!("{name}.a"), conv2d(cin, ch[i]), rng)?,
                ConvBnRelu::new(st, &format!("{name}.b"), conv2d(ch[i], ch[i]), rng)?,
            ]);
            cpa.push(
                config
                    .modules
                    .cpa
                    .then(|| CpaBlock::new(st, &format!("{name}.cpa"), config.patch_grid, rng)),
            );
        }

        let c3 = &config.channels_3d;
        let mut enc3d = Vec::new();
        for i in 0..config.depth_3d() {
            let cin = if i == 0 { 1 } else { c3[i - 1] };
            let name = format!("enc3d{}", i + 1);
            enc3d.push([
                ConvBnRelu::new(st, &format!("{name}.a"), ConvSpec::same3d(cin, c3[i], 3), rng)?,
                ConvBnRelu::new(st, &format!("{name}.b"), ConvSpec::same3d(c3[i], c3[i], 3), rng)?,
            ]);
        }
        let mut cff = Vec::with_capacity(STAGES);
        for i in 0..STAGES {
            cff.push(if config.fuses(i) {
                Some(CffBlock::new(st, &format!("enc{}.cff", i + 1), ch[i], c3[i], rng)?)
            } else {
                None
            });
        }

        let mut up = Vec::with_capacity(STAGES - 1);
        let mut dec = Vec::with_capacity(STAGES - 1);
        let mut cin = ch[STAGES - 1];
        for (j, &cout) in config.decoder_channels.iter().enumerate() {
            let name = format!("dec{}", j + 1);
            up.push(if config.modules.mdu {
                let spec = MduSpec {
                    dropout: config.mdu_dropout,
                    ..MduSpec::new(cin, cout)
                };
                Upsample::Mdu(MduBlock::new(st, &format!("{name}.mdu"), spec, rng)?)
            } else {
                Upsample::Nearest(ConvBnRelu::new(st, &format!("{name}.up"), conv2d(cin, cout), rng)?)
            });
            let skip = ch[STAGES - 2 - j];
            dec.push([
                ConvBnRelu::new(st, &format!("{name}.a"), conv2d(skip + cout, cout), rng)?,
                ConvBnRelu::new(st, &format!("{name}.b"), conv2d(cout, cout), rng)?,
            ]);
            cin = cout;
        }
        let head = Conv::new(st, "head", ConvSpec::new(cin, 1, &[1, 1]), true, false, rng)?;

        Ok(Self {
            config: config.clone(),
            store,
            layers: Layers {
                enc2d,
                cpa,
                enc3d,
                cff,
                up,
                dec,
                head,
            },
        })
    }

    /// Same wiring with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            store: self.store.cast(),
            layers: self.layers.clone(),
        }
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.store
            .ids()
            .filter(|&id| self.store.is_trainable(id))
            .map(|id| self.store.get(id).len())
            .sum()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        if shape.len() != 4 || shape[1] != c.in_slices || shape[2] != c.input_side || shape[3] != c.input_side {
            return Err(Error::dim(
                "forward",
                format!(
                    "expected N x {} x {} x {}, got {shape:?}",
                    c.in_slices, c.input_side, c.input_side
                ),
            ));
        }
        Ok(())
    }

    /// Record the network on `s.tape` for the `N x 4 x H x W` input `x`.
    pub fn forward_vars(&self, s: &mut Session<'_, T>, x: Var) -> Result<TraceVars> {
        let shape = s.tape.shape(x).to_vec();
        self.check_input(&shape)?;
        let l = &self.layers;
        let mut grids = vec![None; STAGES];
        let mut maps = vec![None; STAGES];
        let mut fusion = vec![None; STAGES];
        let mut attended = Vec::with_capacity(STAGES);
        let mut skips = Vec::with_capacity(STAGES);

        let x3 = if l.enc3d.is_empty() {
            None
        } else {
            Some(s.tape.reshape(x, &[shape[0], 1, shape[1], shape[2], shape[3]])?)
        };
        let mut prev3: Option<Var> = None;
        let mut prev = x;
        for i in 0..STAGES {
            let input = if i == 0 {
                x
            } else {
                s.tape.max_pool(prev, (2, 2), (2, 2))?
            };
            let mut y = l.enc2d[i][0].forward(s, input)?;
            y = l.enc2d[i][1].forward(s, y)?;
            if let Some(block) = &l.cpa[i] {
                let v = block.forward(s, y)?;
                y = v.output;
                grids[i] = Some(v.grid);
                maps[i] = Some(v.map);
            }
            attended.push(y);
            if i < l.enc3d.len() {
                let input3 = match prev3 {
                    None => x3.expect("3D input exists when the 3D encoder does"),
                    Some(p) => s.tape.max_pool(p, (2, 2), (2, 2))?,
                };
                let f = l.enc3d[i][0].forward(s, input3)?;
                let f = l.enc3d[i][1].forward(s, f)?;
                s.tape.check_finite(f, &format!("3D encoder stage {}", i + 1))?;
                prev3 = Some(f);
            }
            if let Some(block) = &l.cff[i] {
                let v = block.forward(s, y, prev3.expect("fused stage has a 3D feature"))?;
                y = v.output;
                fusion[i] = Some((v.w2, v.w3));
            }
            s.tape.check_finite(y, &format!("encoder stage {}", i + 1))?;
            skips.push(y);
            prev = y;
        }

        let mut d = prev;
        for j in 0..STAGES - 1 {
            let up = match &l.up[j] {
                Upsample::Mdu(b) => b.forward(s, d)?,
                Upsample::Nearest(c) => {
                    let u = s.tape.upsample_nearest(d, (2, 2))?;
                    c.forward(s, u)?
                }
            };
            let cat = s.tape.concat(&[skips[STAGES - 2 - j], up])?;
            d = l.dec[j][0].forward(s, cat)?;
            d = l.dec[j][1].forward(s, d)?;
            s.tape.check_finite(d, &format!("decoder stage {}", j + 1))?;
        }
        let logits = l.head.forward(s, d)?;
        s.tape.check_finite(logits, "output head")?;
        Ok(TraceVars {
            logits,
            grids,
            maps,
            attended,
            fusion,
        })
    }

    /// Evaluate on `N x 4 x H x W` input. Training mode normalises with batch
    /// statistics (without touching the running estimates) and skips dropout.
    pub fn forward(&self, batch: &Tensor<T>, training: bool) -> Result<ForwardTrace<T>> {
        self.check_input(batch.shape())?;
        if !batch.is_finite() {
            return Err(Error::Numeric("forward input contains NaN or infinity".into()));
        }
        let mut s = Session::new(&self.store, training, None);
        let x = s.tape.constant(batch.clone());
        let v = self.forward_vars(&mut s, x)?;
        let t = &s.tape;
        let n = batch.shape()[0];
        let attention = (0..STAGES)
            .map(|i| -> Result<Option<StageAttention<T>>> {
                match (v.grids[i], v.maps[i]) {
                    (Some(g), Some(m)) => {
                        let gs = t.shape(g);
                        Ok(Some(StageAttention {
                            grid: t.value(g).clone().reshape(&[n, gs[2], gs[3]])?,
                            map: t.value(m).clone(),
                            output: t.value(v.attended[i]).clone(),
                        }))
                    }
                    _ => Ok(None),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let fusion = v
            .fusion
            .iter()
            .map(|f| {
                f.map(|(w2, w3)| FusionWeights {
                    w2: t.value(w2).clone(),
                    w3: t.value(w3).clone(),
                })
            })
            .collect();
        let logits = t.value(v.logits).clone();
        let probs = logits.map(|z| T::one() / (T::one() + (-z).exp()));
        Ok(ForwardTrace {
            attention,
            fusion,
            logits,
            probs,
        })
    }
}

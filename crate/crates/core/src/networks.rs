//! The three concrete architectures: the occupancy encoder-decoder and the
//! residual localizers (single-stage and second-stage), plus parameter
//! accounting and initialization.
//!
//! Width profiles are configuration, not code. The defaults below land each
//! model inside its parameter budget while keeping the multiply count low
//! enough for single-core CPU training: the single-stage localizer stands
//! alone at roughly 72k parameters, and the occupancy net plus the stage-2
//! localizer together come to roughly 68k.
//!
//! All convolutions are 3x3 with same padding. Downsampling always uses
//! stride-2 convolutions, upsampling nearest-neighbor doubling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kaiming_uniform, Graph, ParamStore, Scalar, Tensor};
use crate::propagation::{GridMap, MapStage};
use crate::{Error, Result};

/// Self-describing architecture record; serialized into checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NetworkSpec {
    /// Encoder-decoder occupancy estimator. Three stride-2 encoder stages at
    /// the given widths, mirrored by three upsample+conv decoder stages with
    /// skip additions; emits raw logits at the input resolution.
    Occupancy { widths: [usize; 3], declared_params: usize },
    /// Residual localizer consuming the occupancy map (stage two of the
    /// two-stage pipeline).
    LocalizerStage2 {
        in_channels: usize,
        widths: [usize; 3],
        m: usize,
        declared_params: usize,
    },
    /// Residual localizer consuming the sensor map directly.
    LocalizerSingle {
        in_channels: usize,
        widths: [usize; 3],
        m: usize,
        declared_params: usize,
    },
}

fn conv_params(cout: usize, cin: usize) -> usize {
    cout * cin * 9 + cout
}

fn dense_params(nout: usize, nin: usize) -> usize {
    nout * nin + nout
}

fn occupancy_param_count(widths: [usize; 3]) -> usize {
    let [c1, c2, c3] = widths;
    conv_params(c1, 1)
        + conv_params(c2, c1)
        + conv_params(c3, c2)
        + conv_params(c2, c3)
        + conv_params(c1, c2)
        + conv_params(1, c1)
}

fn localizer_param_count(in_channels: usize, widths: [usize; 3], m: usize) -> usize {
    let [w1, w2, w3] = widths;
    conv_params(w1, in_channels)
        + 2 * conv_params(w1, w1)
        + conv_params(w2, w1)
        + 2 * conv_params(w2, w2)
        + conv_params(w3, w2)
        + 2 * conv_params(w3, w3)
        + dense_params(w3, w3)
        + dense_params(3 * m, w3)
}

impl NetworkSpec {
    /// Default occupancy profile: widths 8/16/32.
    pub fn occupancy() -> Self {
        Self::occupancy_with_widths([8, 16, 32])
    }

    pub fn occupancy_with_widths(widths: [usize; 3]) -> Self {
        NetworkSpec::Occupancy { widths, declared_params: occupancy_param_count(widths) }
    }

    /// Default single-stage localizer profile for `m` slots.
    pub fn localizer_single(m: usize) -> Self {
        Self::localizer_single_with_widths(1, [14, 24, 48], m)
    }

    pub fn localizer_single_with_widths(in_channels: usize, widths: [usize; 3], m: usize) -> Self {
        NetworkSpec::LocalizerSingle {
            in_channels,
            widths,
            m,
            declared_params: localizer_param_count(in_channels, widths, m),
        }
    }

    /// Default stage-2 localizer profile for `m` slots.
    pub fn localizer_stage2(m: usize) -> Self {
        Self::localizer_stage2_with_widths(1, [10, 20, 44], m)
    }

    pub fn localizer_stage2_with_widths(in_channels: usize, widths: [usize; 3], m: usize) -> Self {
        NetworkSpec::LocalizerStage2 {
            in_channels,
            widths,
            m,
            declared_params: localizer_param_count(in_channels, widths, m),
        }
    }

    pub fn widths(&self) -> [usize; 3] {
        match *self {
            NetworkSpec::Occupancy { widths, .. }
            | NetworkSpec::LocalizerStage2 { widths, .. }
            | NetworkSpec::LocalizerSingle { widths, .. } => widths,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            NetworkSpec::Occupancy { .. } => "occupancy",
            NetworkSpec::LocalizerStage2 { .. } => "localizer_stage2",
            NetworkSpec::LocalizerSingle { .. } => "localizer_single",
        }
    }

    /// Closed-form parameter count of the architecture this spec describes.
    pub fn param_count(&self) -> usize {
        match *self {
            NetworkSpec::Occupancy { widths, .. } => occupancy_param_count(widths),
            NetworkSpec::LocalizerStage2 { in_channels, widths, m, .. }
            | NetworkSpec::LocalizerSingle { in_channels, widths, m, .. } => {
                localizer_param_count(in_channels, widths, m)
            }
        }
    }

    pub fn declared_params(&self) -> usize {
        match *self {
            NetworkSpec::Occupancy { declared_params, .. }
            | NetworkSpec::LocalizerStage2 { declared_params, .. }
            | NetworkSpec::LocalizerSingle { declared_params, .. } => declared_params,
        }
    }

    /// Slot count of a localizer spec; `None` for the occupancy net.
    pub fn slots(&self) -> Option<usize> {
        match *self {
            NetworkSpec::Occupancy { .. } => None,
            NetworkSpec::LocalizerStage2 { m, .. } | NetworkSpec::LocalizerSingle { m, .. } => {
                Some(m)
            }
        }
    }

    pub fn in_channels(&self) -> usize {
        match *self {
            NetworkSpec::Occupancy { .. } => 1,
            NetworkSpec::LocalizerStage2 { in_channels, .. }
            | NetworkSpec::LocalizerSingle { in_channels, .. } => in_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = match *self {
            NetworkSpec::Occupancy { widths, .. } => widths,
            NetworkSpec::LocalizerStage2 { in_channels, widths, m, .. }
            | NetworkSpec::LocalizerSingle { in_channels, widths, m, .. } => {
                if !(1..=2).contains(&in_channels) {
                    return Err(Error::Config(format!(
                        "localizer input must have 1 or 2 channels, got {in_channels}"
                    )));
                }
                if m == 0 || m > 16 {
                    return Err(Error::Config(format!("slot count must be in 1..=16, got {m}")));
                }
                widths
            }
        };
        if widths.contains(&0) {
            return Err(Error::Config(format!("channel widths must be nonzero, got {widths:?}")));
        }
        if self.declared_params() != self.param_count() {
            return Err(Error::Config(format!(
                "{} spec declares {} parameters but its architecture has {}",
                self.kind_name(),
                self.declared_params(),
                self.param_count()
            )));
        }
        Ok(())
    }

    /// Freshly initialized parameters: Kaiming-uniform weights drawn from a
    /// seeded stream in layer order, zero biases.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut conv = |store: &mut ParamStore, name: &str, cout: usize, cin: usize| -> Result<()> {
            let fan_in = cin * 9;
            store.add(
                &format!("{name}.w"),
                &[cout, cin, 3, 3],
                kaiming_uniform(&mut rng, fan_in, cout * cin * 9),
            )?;
            store.add(&format!("{name}.b"), &[cout], vec![0.0; cout])?;
            Ok(())
        };
        match *self {
            NetworkSpec::Occupancy { widths: [c1, c2, c3], .. } => {
                conv(&mut store, "enc1", c1, 1)?;
                conv(&mut store, "enc2", c2, c1)?;
                conv(&mut store, "enc3", c3, c2)?;
                conv(&mut store, "dec1", c2, c3)?;
                conv(&mut store, "dec2", c1, c2)?;
                conv(&mut store, "dec3", 1, c1)?;
            }
            NetworkSpec::LocalizerStage2 { in_channels, widths: [w1, w2, w3], m, .. }
            | NetworkSpec::LocalizerSingle { in_channels, widths: [w1, w2, w3], m, .. } => {
                conv(&mut store, "stem", w1, in_channels)?;
                conv(&mut store, "s1.c1", w1, w1)?;
                conv(&mut store, "s1.c2", w1, w1)?;
                conv(&mut store, "t1", w2, w1)?;
                conv(&mut store, "s2.c1", w2, w2)?;
                conv(&mut store, "s2.c2", w2, w2)?;
                conv(&mut store, "t2", w3, w2)?;
                conv(&mut store, "s3.c1", w3, w3)?;
                conv(&mut store, "s3.c2", w3, w3)?;
                store.add("head.fc1.w", &[w3, w3], kaiming_uniform(&mut rng, w3, w3 * w3))?;
                store.add("head.fc1.b", &[w3], vec![0.0; w3])?;
                store.add(
                    "head.fc2.w",
                    &[3 * m, w3],
                    kaiming_uniform(&mut rng, w3, 3 * m * w3),
                )?;
                store.add("head.fc2.b", &[3 * m], vec![0.0; 3 * m])?;
            }
        }
        debug_assert_eq!(store.total_elements(), self.param_count());
        Ok(store)
    }

    /// Build the forward pass in `g`. `params` must come from registering a
    /// store laid out by [`NetworkSpec::init_params`] (same order). Returns
    /// occupancy logits `[n, 1, h, w]`, or sigmoid slot outputs `[n, 3m]`
    /// laid out `(b_hat, u_hat, v_hat)` per slot.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        input: Tensor,
        params: &[Tensor],
    ) -> Result<Tensor> {
        let expected = match self {
            NetworkSpec::Occupancy { .. } => 12,
            _ => 22,
        };
        if params.len() != expected {
            return Err(Error::Config(format!(
                "{} forward needs {expected} parameter tensors, got {}",
                self.kind_name(),
                params.len()
            )));
        }
        let shape = g.shape(input).to_vec();
        if shape.len() != 4 || shape[1] != self.in_channels() {
            return Err(Error::Config(format!(
                "{} expects input [n, {}, h, w], got {shape:?}",
                self.kind_name(),
                self.in_channels()
            )));
        }
        match self {
            NetworkSpec::Occupancy { .. } => {
                let (h, w) = (shape[2], shape[3]);
                if h % 8 != 0 || w % 8 != 0 {
                    return Err(Error::Config(format!(
                        "occupancy net needs spatial dims divisible by 8, got {h}x{w}"
                    )));
                }
                let c = |g: &mut Graph<T>, x, i: usize, stride| {
                    g.conv2d(x, params[2 * i], params[2 * i + 1], stride)
                };
                let e1 = {
                    let t = c(g, input, 0, 2)?;
                    g.relu(t)
                };
                let e2 = {
                    let t = c(g, e1, 1, 2)?;
                    g.relu(t)
                };
                let e3 = {
                    let t = c(g, e2, 2, 2)?;
                    g.relu(t)
                };
                let d1 = {
                    let up = g.upsample2(e3)?;
                    let t = c(g, up, 3, 1)?;
                    let s = g.add(t, e2)?;
                    g.relu(s)
                };
                let d2 = {
                    let up = g.upsample2(d1)?;
                    let t = c(g, up, 4, 1)?;
                    let s = g.add(t, e1)?;
                    g.relu(s)
                };
                let up = g.upsample2(d2)?;
                c(g, up, 5, 1)
            }
            NetworkSpec::LocalizerStage2 { .. } | NetworkSpec::LocalizerSingle { .. } => {
                let c = |g: &mut Graph<T>, x, i: usize, stride| {
                    g.conv2d(x, params[2 * i], params[2 * i + 1], stride)
                };
                let block = |g: &mut Graph<T>, x, i: usize| -> Result<Tensor> {
                    let t = c(g, x, i, 1)?;
                    let t = g.relu(t);
                    let t = c(g, t, i + 1, 1)?;
                    let s = g.add(t, x)?;
                    Ok(g.relu(s))
                };
                let mut x = {
                    let t = c(g, input, 0, 2)?;
                    g.relu(t)
                };
                x = block(g, x, 1)?;
                x = {
                    let t = c(g, x, 3, 2)?;
                    g.relu(t)
                };
                x = block(g, x, 4)?;
                x = {
                    let t = c(g, x, 6, 2)?;
                    g.relu(t)
                };
                x = block(g, x, 7)?;
                let pooled = g.global_avg_pool(x)?;
                let fc1 = g.dense(pooled, params[18], params[19])?;
                let fc1 = g.relu(fc1);
                let logits = g.dense(fc1, params[20], params[21])?;
                Ok(g.sigmoid(logits))
            }
        }
    }
}

/// One network: its architecture record plus its parameter values.
#[derive(Debug)]
pub struct Model {
    pub spec: NetworkSpec,
    pub store: ParamStore,
}

impl Model {
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Model> {
        let store = spec.init_params(seed)?;
        Ok(Model { spec, store })
    }

    /// Frozen-parameter batch inference in f32. `inputs` is `[n, c, h, w]`
    /// flattened; returns the flattened output tensor data.
    pub fn infer(&self, inputs: &[f32], n: usize, h: usize, w: usize) -> Result<Vec<f32>> {
        let c = self.spec.in_channels();
        let mut g: Graph<f32> = Graph::new();
        let x = g.input(&[n, c, h, w], inputs.to_vec())?;
        let params = self.store.register_frozen(&mut g)?;
        let out = self.spec.forward(&mut g, x, &params)?;
        Ok(g.data(out).to_vec())
    }
}

/// Hard 0/1 occupancy decisions from a logits map. A logit of exactly zero
/// (sigmoid 0.5) counts as occupied.
pub fn binarize_occupancy(logits: &GridMap) -> GridMap {
    GridMap {
        h: logits.h,
        w: logits.w,
        values: logits.values.iter().map(|&x| f64::from(u8::from(x >= 0.0))).collect(),
        stage: MapStage::Binary,
        sensor_mask: None,
    }
}

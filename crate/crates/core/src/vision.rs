//! Per-frame CNN backbone, time-distributed application and ViT patching.

use rand::Rng;

use crate::error::{config_err, contract_err, dim_err, Error, Result};
use crate::graph::{Activation, Graph, Var};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One `C×H×W` video frame with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame<S>(Tensor<S>);

impl<S: Scalar> Frame<S> {
    pub fn new(t: Tensor<S>) -> Result<Self> {
        let [c, h, w] = t.shape() else {
            return Err(dim_err!("frame must be C×H×W, got {:?}", t.shape()));
        };
        if !(*c == 1 || *c == 3) || *h < 8 || *w < 8 {
            return Err(dim_err!("frame shape {:?}: need C in {{1,3}} and H, W >= 8", t.shape()));
        }
        if t.data().iter().any(|&v| !(v >= S::zero() && v <= S::one())) {
            return Err(Error::Numeric("frame values must lie in [0, 1]".into()));
        }
        Ok(Self(t))
    }

    /// Frame from 8-bit samples, scaled by 1/255.
    pub fn from_u8(shape: [usize; 3], bytes: &[u8]) -> Result<Self> {
        let inv = S::one() / S::lit(255.0);
        let data = bytes.iter().map(|&b| S::from_u8(b).unwrap() * inv).collect();
        Self::new(Tensor::new(&shape, data)?)
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.0
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.0.shape();
        [s[0], s[1], s[2]]
    }
}

/// Stacks frames into one `T×C×H×W` tensor.
pub fn stack_frames<S: Scalar>(frames: &[Frame<S>]) -> Result<Tensor<S>> {
    let first = frames.first().ok_or_else(|| contract_err!("clip has no frames"))?;
    let shape = first.shape();
    let mut data = Vec::with_capacity(frames.len() * first.tensor().len());
    for (i, f) in frames.iter().enumerate() {
        if f.shape() != shape {
            return Err(dim_err!("frame {i} has shape {:?}, frame 0 has {shape:?}", f.shape()));
        }
        data.extend_from_slice(f.tensor().data());
    }
    Tensor::new(&[frames.len(), shape[0], shape[1], shape[2]], data)
}

/// Anything that maps a `T×C×H×W` stack to `T×L` features.
pub trait FeatureExtractor {
    fn feature_len(&self) -> usize;

    fn init<S: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<S>, rng: &mut R) -> Result<()>;

    fn forward_stack<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, stack: Var) -> Result<Var>;
}

/// Four 3×3 convolution stages (8, 16, 32, 64 channels), each followed by
/// ELU and 2×2 max pooling, then a linear projection to `feature_len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SmallCnn {
    pub prefix: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub feature_len: usize,
}

impl SmallCnn {
    pub const WIDTHS: [usize; 4] = [8, 16, 32, 64];

    pub fn new(prefix: impl Into<String>, frame_shape: [usize; 3], feature_len: usize) -> Result<Self> {
        let [channels, height, width] = frame_shape;
        if height % 16 != 0 || width % 16 != 0 || height == 0 || width == 0 {
            return Err(config_err!("frame {height}×{width} is not divisible by 16 (four 2× poolings)"));
        }
        if !(channels == 1 || channels == 3) {
            return Err(config_err!("frames must have 1 or 3 channels, got {channels}"));
        }
        if feature_len == 0 {
            return Err(config_err!("feature length must be positive"));
        }
        Ok(Self { prefix: prefix.into(), channels, height, width, feature_len })
    }

    fn name(&self, s: &str) -> String {
        format!("{}.{s}", self.prefix)
    }

    fn flat_len(&self) -> usize {
        Self::WIDTHS[3] * (self.height / 16) * (self.width / 16)
    }

    /// Features of a single frame as a `1×L` row.
    pub fn forward_frame<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, frame: &Frame<S>) -> Result<Var> {
        let [c, h, w] = frame.shape();
        let x = g.input(frame.tensor().clone().reshape(&[1, c, h, w])?);
        self.forward_stack(g, store, x)
    }
}

impl FeatureExtractor for SmallCnn {
    fn feature_len(&self) -> usize {
        self.feature_len
    }

    fn init<S: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<S>, rng: &mut R) -> Result<()> {
        let mut cin = self.channels;
        for (i, &k) in Self::WIDTHS.iter().enumerate() {
            let fan_in = (cin * 9) as f64;
            store
                .insert(self.name(&format!("conv{i}.w")), Tensor::uniform(&[k, cin, 3, 3], 1.0 / fan_in.sqrt(), rng))?;
            store.insert(self.name(&format!("conv{i}.b")), Tensor::zeros(&[k]))?;
            cin = k;
        }
        let f = self.flat_len();
        store.insert(self.name("proj.w"), Tensor::uniform(&[f, self.feature_len], 1.0 / (f as f64).sqrt(), rng))?;
        store.insert(self.name("proj.b"), Tensor::zeros(&[self.feature_len]))?;
        Ok(())
    }

    fn forward_stack<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, stack: Var) -> Result<Var> {
        let shape = g.value(stack).shape().to_vec();
        if shape.len() != 4 || shape[1..] != [self.channels, self.height, self.width] {
            return Err(dim_err!("backbone expects T×{}×{}×{}, got {shape:?}", self.channels, self.height, self.width));
        }
        let t = shape[0];
        let mut x = stack;
        for i in 0..Self::WIDTHS.len() {
            let w = g.param(store, &self.name(&format!("conv{i}.w")))?;
            let b = g.param(store, &self.name(&format!("conv{i}.b")))?;
            x = g.conv2d(x, w, 1, 1)?;
            x = g.add_channel_bias(x, b)?;
            x = g.activation(x, Activation::elu());
            x = g.max_pool2(x)?;
        }
        let x = g.reshape(x, &[t, self.flat_len()])?;
        let w = g.param(store, &self.name("proj.w"))?;
        let b = g.param(store, &self.name("proj.b"))?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// Applies `backbone` with shared parameters to every frame, giving `T×L`.
pub fn time_distributed<S: Scalar, B: FeatureExtractor>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    backbone: &B,
    frames: &[Frame<S>],
) -> Result<Var> {
    if frames.is_empty() {
        return Err(contract_err!("time-distributed application over zero frames"));
    }
    let stack = g.input(stack_frames(frames)?);
    backbone.forward_stack(g, store, stack)
}

/// Splits a frame into `p×p` patches in row-major patch order. Each row is
/// one patch flattened channel-major (`c`, then `y`, then `x`).
pub fn patchify<S: Scalar>(frame: &Tensor<S>, p: usize) -> Result<Tensor<S>> {
    let [c, h, w] = frame.shape() else {
        return Err(dim_err!("patchify expects C×H×W, got {:?}", frame.shape()));
    };
    let (c, h, w) = (*c, *h, *w);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(dim_err!("patch size {p} does not divide {h}×{w}"));
    }
    let (ph, pw) = (h / p, w / p);
    let row_len = p * p * c;
    let mut out = Vec::with_capacity(ph * pw * row_len);
    let d = frame.data();
    for py in 0..ph {
        for px in 0..pw {
            for ch in 0..c {
                for dy in 0..p {
                    let base = (ch * h + py * p + dy) * w + px * p;
                    out.extend_from_slice(&d[base..base + p]);
                }
            }
        }
    }
    Tensor::new(&[ph * pw, row_len], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<S: Scalar>(patches: &Tensor<S>, p: usize, shape: [usize; 3]) -> Result<Tensor<S>> {
    let [c, h, w] = shape;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(dim_err!("patch size {p} does not divide {h}×{w}"));
    }
    let (ph, pw) = (h / p, w / p);
    if patches.shape() != [ph * pw, p * p * c] {
        return Err(dim_err!("patch matrix {:?} does not match frame {shape:?}", patches.shape()));
    }
    let mut out = vec![S::zero(); c * h * w];
    let mut src = patches.data().chunks(p);
    for py in 0..ph {
        for px in 0..pw {
            for ch in 0..c {
                for dy in 0..p {
                    let base = (ch * h + py * p + dy) * w + px * p;
                    out[base..base + p].copy_from_slice(src.next().unwrap());
                }
            }
        }
    }
    Tensor::new(&shape, out)
}

/// Linear projection of flattened patches: `{p}.w` is `(p²·C)×d_model`,
/// `{p}.b` is `d_model`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchEmbed {
    pub prefix: String,
    pub patch: usize,
    pub channels: usize,
    pub d_model: usize,
}

impl PatchEmbed {
    pub fn new(prefix: impl Into<String>, patch: usize, channels: usize, d_model: usize) -> Self {
        Self { prefix: prefix.into(), patch, channels, d_model }
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn init<S: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<S>, rng: &mut R) -> Result<()> {
        let k = self.patch_len();
        store
            .insert(format!("{}.w", self.prefix), Tensor::uniform(&[k, self.d_model], 1.0 / (k as f64).sqrt(), rng))?;
        store.insert(format!("{}.b", self.prefix), Tensor::zeros(&[self.d_model]))?;
        Ok(())
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, patches: Var) -> Result<Var> {
        let (_, k) = g.value(patches).dims2()?;
        if k != self.patch_len() {
            return Err(dim_err!("patch rows have {k} values, projection expects {}", self.patch_len()));
        }
        let w = g.param(store, &format!("{}.w", self.prefix))?;
        let b = g.param(store, &format!("{}.b", self.prefix))?;
        let y = g.matmul(patches, w)?;
        g.add_row(y, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn frame(shape: [usize; 3], seed: u64) -> Frame<f64> {
        let mut rng = seeded(seed);
        Frame::new(Tensor::from_fn(&shape, |_| rng.gen_range(0.0..1.0))).unwrap()
    }

    #[test]
    fn frame_validation() {
        assert!(Frame::<f32>::new(Tensor::zeros(&[2, 16, 16])).is_err());
        assert!(Frame::<f32>::new(Tensor::zeros(&[1, 4, 16])).is_err());
        assert!(Frame::<f32>::new(Tensor::full(&[1, 8, 8], 1.5)).is_err());
        let f = Frame::<f32>::from_u8([1, 8, 8], &[255; 64]).unwrap();
        assert!(f.tensor().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn cnn_rejects_indivisible_frames() {
        assert!(matches!(SmallCnn::new("cnn", [1, 24, 32], 16), Err(Error::Config(_))));
        assert!(SmallCnn::new("cnn", [1, 32, 48], 16).is_ok());
    }

    #[test]
    fn cnn_output_length_and_zero_weights() {
        let cnn = SmallCnn::new("cnn", [1, 16, 32], 12).unwrap();
        let mut s = ParamStore::<f64>::new();
        cnn.init(&mut s, &mut seeded(1)).unwrap();
        let f = frame([1, 16, 32], 2);
        let mut g = Graph::new();
        let y = cnn.forward_frame(&mut g, &s, &f).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 12]);

        let bias = Tensor::from_fn(&[12], |i| i as f64 * 0.1 - 0.3);
        s.set_value("cnn.proj.b", bias.clone()).unwrap();
        for i in 0..4 {
            let shape = s.value(&format!("cnn.conv{i}.w")).unwrap().shape().to_vec();
            s.set_value(&format!("cnn.conv{i}.w"), Tensor::zeros(&shape)).unwrap();
        }
        let mut g = Graph::new();
        let y = cnn.forward_frame(&mut g, &s, &f).unwrap();
        assert_eq!(g.value(y).data(), bias.data());
    }

    #[test]
    fn time_distributed_matches_per_frame() {
        let cnn = SmallCnn::new("cnn", [1, 16, 16], 8).unwrap();
        let mut s = ParamStore::<f32>::new();
        cnn.init(&mut s, &mut seeded(3)).unwrap();
        let frames: Vec<Frame<f32>> = (0..3)
            .map(|i| {
                let mut rng = seeded(10 + i);
                Frame::new(Tensor::from_fn(&[1, 16, 16], |_| rng.gen_range(0.0..1.0))).unwrap()
            })
            .collect();
        let mut g = Graph::new();
        let all = time_distributed(&mut g, &s, &cnn, &frames).unwrap();
        let all = g.value(all).clone();
        for (i, f) in frames.iter().enumerate() {
            let mut g1 = Graph::new();
            let one = cnn.forward_frame(&mut g1, &s, f).unwrap();
            assert_eq!(all.row(i), g1.value(one).data());
        }

        let same = vec![frames[0].clone(); 4];
        let mut g = Graph::new();
        let y = time_distributed(&mut g, &s, &cnn, &same).unwrap();
        let y = g.value(y);
        for i in 1..4 {
            assert_eq!(y.row(i), y.row(0));
        }

        let mut g = Graph::new();
        assert!(matches!(time_distributed::<f32, _>(&mut g, &s, &cnn, &[]), Err(Error::Contract(_))));
        let mixed = vec![frames[0].clone(), Frame::new(Tensor::zeros(&[1, 32, 16])).unwrap()];
        assert!(matches!(time_distributed(&mut g, &s, &cnn, &mixed), Err(Error::Dimension(_))));
    }

    #[test]
    fn patch_geometry() {
        let f = frame([1, 16, 16], 4);
        let one = patchify(f.tensor(), 16).unwrap();
        assert_eq!(one.shape(), &[1, 256]);
        assert_eq!(one.data(), f.tensor().data());

        let big = Tensor::<f64>::zeros(&[3, 64, 64]);
        assert_eq!(patchify(&big, 16).unwrap().shape(), &[16, 256 * 3]);
        assert!(matches!(patchify(&big, 5), Err(Error::Dimension(_))));
    }

    #[test]
    fn patch_order_is_row_major() {
        // 1×8×8 frame whose value encodes its 4×4 patch index
        let t = Tensor::<f64>::from_fn(&[1, 8, 8], |i| ((i / 8) / 4 * 2 + (i % 8) / 4) as f64);
        let p = patchify(&t, 4).unwrap();
        for r in 0..4 {
            assert!(p.row(r).iter().all(|&v| v == r as f64));
        }
    }

    #[test]
    fn patch_embed_identity_and_zero() {
        let pe = PatchEmbed::new("pe", 2, 1, 4);
        let mut s = ParamStore::<f64>::new();
        pe.init(&mut s, &mut seeded(0)).unwrap();
        s.set_value("pe.w", Tensor::eye(4)).unwrap();
        let x = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.5);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = pe.forward(&mut g, &s, xv).unwrap();
        assert_eq!(g.value(y), &x);

        s.set_value("pe.w", Tensor::zeros(&[4, 4])).unwrap();
        let mut g = Graph::new();
        let xv = g.input(x);
        let y = pe.forward(&mut g, &s, xv).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let mut g = Graph::new();
        let bad = g.input(Tensor::zeros(&[2, 5]));
        assert!(matches!(pe.forward(&mut g, &s, bad), Err(Error::Dimension(_))));
    }
}

use std::collections::BTreeSet;

use glob::Pattern;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::exec;
use crate::numeric::KahanSum;
use crate::tensor::{archive_to_params, params_to_archive, ParamSet, Tensor};
use crate::tensorio::TensorArchive;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv3x3 { c_in: usize, c_out: usize },
    Relu,
    MaxPool2,
    Flatten,
    Dense { f_in: usize, f_out: usize },
}

#[derive(Debug, Clone)]
enum Layer {
    Conv { c_in: usize, c_out: usize, h: usize, w: usize, weight: usize, bias: usize },
    Relu,
    MaxPool { c: usize, h: usize, w: usize },
    Flatten,
    Dense { f_in: usize, f_out: usize, weight: usize, bias: usize },
}

/// Layer graph, named parameters and the set of frozen parameter names.
///
/// Parameters are named `conv{i}.weight`, `conv{i}.bias`, `fc{i}.weight` and
/// `fc{i}.bias`, numbered from 1 per layer kind. Conv weights are
/// `(c_out, c_in, 3, 3)`, dense weights `(f_out, f_in)`.
#[derive(Debug, Clone)]
pub struct Network {
    input: [usize; 3],
    classes: usize,
    specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
    params: ParamSet,
    frozen: BTreeSet<String>,
}

/// Inputs (`f64`, one flattened `C×H×W` image per example) and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn example(&self, i: usize, len: usize) -> &[f64] {
        &self.inputs[i * len..(i + 1) * len]
    }
}

struct Trace {
    // acts[0] is the input, acts[i + 1] the output of layer i
    acts: Vec<Vec<f64>>,
    pool_argmax: Vec<Vec<usize>>,
}

impl Network {
    /// Builds the layer graph for `input = (C, H, W)` and initializes weights
    /// with He-style fan-in scaling from `seed`; biases start at zero.
    pub fn new(input: [usize; 3], specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut n_conv, mut n_fc) = (0, 0);
        // Some((c, h, w)) while spatial, None once flattened
        let mut spatial = Some((input[0], input[1], input[2]));
        let mut flat = input.iter().product::<usize>();
        let mut add = |name: String, shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng| -> usize {
            let numel: usize = shape.iter().product();
            let data = if fan_in == 0 {
                vec![0.0; numel]
            } else {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                (0..numel).map(|_| normal.sample(rng)).collect()
            };
            params.insert(name, Tensor::new(shape, data).expect("shape matches data"));
            params.len() - 1
        };
        for (idx, spec) in specs.iter().enumerate() {
            let bad = |msg: String| Error::Config(format!("layer {idx} ({spec:?}): {msg}"));
            let layer = match *spec {
                LayerSpec::Conv3x3 { c_in, c_out } => {
                    let (c, h, w) = spatial.ok_or_else(|| bad("convolution after flatten".into()))?;
                    if c != c_in || c_out == 0 {
                        return Err(bad(format!("expects {c_in} input channels, got {c}")));
                    }
                    n_conv += 1;
                    let weight = add(format!("conv{n_conv}.weight"), vec![c_out, c_in, 3, 3], c_in * 9, &mut rng);
                    let bias = add(format!("conv{n_conv}.bias"), vec![c_out], 0, &mut rng);
                    spatial = Some((c_out, h, w));
                    flat = c_out * h * w;
                    Layer::Conv { c_in, c_out, h, w, weight, bias }
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool2 => {
                    let (c, h, w) = spatial.ok_or_else(|| bad("pooling after flatten".into()))?;
                    if h < 2 || w < 2 {
                        return Err(bad(format!("input {h}x{w} too small to pool")));
                    }
                    spatial = Some((c, h / 2, w / 2));
                    flat = c * (h / 2) * (w / 2);
                    Layer::MaxPool { c, h, w }
                }
                LayerSpec::Flatten => {
                    spatial = None;
                    Layer::Flatten
                }
                LayerSpec::Dense { f_in, f_out } => {
                    if spatial.is_some() {
                        return Err(bad("dense layer needs a flatten first".into()));
                    }
                    if f_in != flat || f_out == 0 {
                        return Err(bad(format!("expects {f_in} features, got {flat}")));
                    }
                    n_fc += 1;
                    let weight = add(format!("fc{n_fc}.weight"), vec![f_out, f_in], f_in, &mut rng);
                    let bias = add(format!("fc{n_fc}.bias"), vec![f_out], 0, &mut rng);
                    flat = f_out;
                    Layer::Dense { f_in, f_out, weight, bias }
                }
            };
            layers.push(layer);
        }
        if spatial.is_some() {
            return Err(Error::Config("network must end with flattened class scores".into()));
        }
        if flat < 2 {
            return Err(Error::Config("network needs at least two classes".into()));
        }
        Ok(Self {
            input,
            classes: flat,
            specs: specs.to_vec(),
            layers,
            params,
            frozen: BTreeSet::new(),
        })
    }

    /// conv3×3(C→16)–relu–pool–conv3×3(16→32)–relu–pool–dense.
    pub fn reference(input: [usize; 3], classes: usize, seed: u64) -> Result<Self> {
        Self::small(input, 16, 32, classes, seed)
    }

    /// Two conv/relu/pool stages of `c1` and `c2` channels followed by a dense head.
    pub fn small(input: [usize; 3], c1: usize, c2: usize, classes: usize, seed: u64) -> Result<Self> {
        let feats = c2 * (input[1] / 4) * (input[2] / 4);
        Self::new(
            input,
            &[
                LayerSpec::Conv3x3 { c_in: input[0], c_out: c1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool2,
                LayerSpec::Conv3x3 { c_in: c1, c_out: c2 },
                LayerSpec::Relu,
                LayerSpec::MaxPool2,
                LayerSpec::Flatten,
                LayerSpec::Dense { f_in: feats, f_out: classes },
            ],
            seed,
        )
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable access to parameter values; names and shapes stay fixed.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.params.get_mut(name).map(|t| t.data_mut())
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn frozen(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    /// Adds every parameter matching the glob `pattern` to the frozen set.
    /// Returns the number of newly matched tensors.
    pub fn freeze(&mut self, pattern: &str) -> Result<usize> {
        let pat = Pattern::new(pattern).map_err(|e| Error::Config(format!("bad freeze pattern {pattern:?}: {e}")))?;
        let matched: Vec<String> = self.params.keys().filter(|n| pat.matches(n)).cloned().collect();
        if matched.is_empty() {
            log::warn!("freeze pattern {pattern:?} matches no parameter");
        }
        let count = matched.len();
        self.frozen.extend(matched);
        Ok(count)
    }

    pub fn to_archive(&self) -> TensorArchive {
        params_to_archive(&self.params)
    }

    /// Overwrites parameters from an archive with identical names and shapes.
    pub fn load_archive(&mut self, archive: &TensorArchive) -> Result<()> {
        let loaded = archive_to_params(archive);
        for (name, t) in &self.params {
            match loaded.get(name) {
                Some(l) if l.shape() == t.shape() => {}
                Some(l) => {
                    return Err(Error::Validation(format!(
                        "{name}: archive shape {:?} differs from {:?}",
                        l.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Validation(format!("archive lacks {name}"))),
            }
        }
        for (name, t) in self.params.iter_mut() {
            *t = loaded[name].clone();
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.inputs.len() != batch.labels.len() * self.input_len() {
            return Err(Error::DimMismatch {
                expected: batch.labels.len() * self.input_len(),
                got: batch.inputs.len(),
            });
        }
        if let Some(&l) = batch.labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::Input(format!("label {l} out of range for {} classes", self.classes)));
        }
        Ok(())
    }

    fn p(&self, idx: usize) -> &[f64] {
        self.params[idx].data()
    }

    fn forward_example(&self, x: &[f64]) -> Result<Trace> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pool_argmax = Vec::new();
        acts.push(x.to_vec());
        for (li, layer) in self.layers.iter().enumerate() {
            let inp = acts.last().unwrap();
            let out = match *layer {
                Layer::Conv { c_in, c_out, h, w, weight, bias } => {
                    conv_forward(inp, self.p(weight), self.p(bias), c_in, c_out, h, w)
                }
                Layer::Relu => inp.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
                Layer::MaxPool { c, h, w } => {
                    let (out, idx) = pool_forward(inp, c, h, w);
                    pool_argmax.push(idx);
                    out
                }
                Layer::Flatten => inp.clone(),
                Layer::Dense { f_in, f_out, weight, bias } => {
                    let (wt, b) = (self.p(weight), self.p(bias));
                    (0..f_out)
                        .map(|o| {
                            let row = &wt[o * f_in..(o + 1) * f_in];
                            b[o] + row.iter().zip(inp).map(|(a, x)| a * x).sum::<f64>()
                        })
                        .collect()
                }
            };
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { layer: li });
            }
            acts.push(out);
        }
        Ok(Trace { acts, pool_argmax })
    }

    /// Cross-entropy and per-parameter gradients (unscaled) for one example.
    fn backward_example(&self, x: &[f64], label: usize) -> Result<(f64, Vec<Vec<f64>>)> {
        let trace = self.forward_example(x)?;
        let logits = trace.acts.last().unwrap();
        let (loss, mut g) = softmax_ce(logits, label);
        let mut grads: Vec<Vec<f64>> = self.params.values().map(|t| vec![0.0; t.len()]).collect();
        let mut pool_i = trace.pool_argmax.len();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let inp = &trace.acts[li];
            g = match *layer {
                Layer::Conv { c_in, c_out, h, w, weight, bias } => {
                    let mut gw = std::mem::take(&mut grads[weight]);
                    let mut gb = std::mem::take(&mut grads[bias]);
                    let gx = conv_backward(inp, self.p(weight), &g, &mut gw, &mut gb, c_in, c_out, h, w, li > 0);
                    grads[weight] = gw;
                    grads[bias] = gb;
                    gx
                }
                Layer::Relu => g.iter().zip(inp).map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 }).collect(),
                Layer::MaxPool { .. } => {
                    pool_i -= 1;
                    let mut gx = vec![0.0; inp.len()];
                    for (&src, &gv) in trace.pool_argmax[pool_i].iter().zip(&g) {
                        gx[src] += gv;
                    }
                    gx
                }
                Layer::Flatten => g,
                Layer::Dense { f_in, f_out, weight, bias } => {
                    let wt = self.p(weight);
                    let gw = &mut grads[weight];
                    for o in 0..f_out {
                        let go = g[o];
                        for (dst, &xi) in gw[o * f_in..(o + 1) * f_in].iter_mut().zip(inp) {
                            *dst += go * xi;
                        }
                    }
                    grads[bias].iter_mut().zip(&g).for_each(|(d, &gv)| *d += gv);
                    let mut gx = vec![0.0; f_in];
                    if li > 0 {
                        for o in 0..f_out {
                            let go = g[o];
                            for (dst, &a) in gx.iter_mut().zip(&wt[o * f_in..(o + 1) * f_in]) {
                                *dst += a * go;
                            }
                        }
                    }
                    gx
                }
            };
        }
        Ok((loss, grads))
    }

    /// Mean loss and per-example logits (row-major `B × classes`).
    pub fn forward(&self, batch: &Batch) -> Result<(Vec<f64>, f64)> {
        self.check_batch(batch)?;
        let len = self.input_len();
        let results = exec::map_indices(batch.len(), |i| {
            let trace = self.forward_example(batch.example(i, len))?;
            let logits = trace.acts.last().unwrap().clone();
            let (loss, _) = softmax_ce(&logits, batch.labels[i]);
            Ok((logits, loss))
        });
        let mut logits = Vec::with_capacity(batch.len() * self.classes);
        let mut sum = KahanSum::new();
        for r in results {
            let (l, loss) = r?;
            logits.extend_from_slice(&l);
            sum.add(loss);
        }
        Ok((logits, sum.value() / batch.len().max(1) as f64))
    }

    /// Mean loss and its gradient; frozen parameters get zero tensors.
    pub fn backward(&self, batch: &Batch) -> Result<(f64, ParamSet)> {
        self.check_batch(batch)?;
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let len = self.input_len();
        let results = exec::map_indices(batch.len(), |i| {
            self.backward_example(batch.example(i, len), batch.labels[i])
        });
        let mut sum = KahanSum::new();
        let mut total: Vec<Vec<f64>> = self.params.values().map(|t| vec![0.0; t.len()]).collect();
        for r in results {
            let (loss, grads) = r?;
            sum.add(loss);
            for (acc, g) in total.iter_mut().zip(grads) {
                acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
            }
        }
        let b = batch.len() as f64;
        let mut out = ParamSet::new();
        for ((name, t), mut g) in self.params.iter().zip(total) {
            if self.frozen.contains(name) {
                g.iter_mut().for_each(|v| *v = 0.0);
            } else {
                g.iter_mut().for_each(|v| *v /= b);
            }
            out.insert(name.clone(), Tensor::new(t.shape().to_vec(), g)?);
        }
        Ok((sum.value() / b, out))
    }

    /// Per-example loss and whether the argmax prediction is correct.
    pub(crate) fn score_examples(&self, batch: &Batch) -> Result<Vec<(f64, bool)>> {
        self.check_batch(batch)?;
        let len = self.input_len();
        exec::map_indices(batch.len(), |i| {
            let trace = self.forward_example(batch.example(i, len))?;
            let logits = trace.acts.last().unwrap();
            let (loss, _) = softmax_ce(logits, batch.labels[i]);
            Ok((loss, crate::numeric::argmax(logits) == batch.labels[i]))
        })
        .into_iter()
        .collect()
    }
}

/// Loss and gradient w.r.t. the logits of softmax cross-entropy.
fn softmax_ce(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() - (logits[label] - max);
    let mut g: Vec<f64> = exps.iter().map(|e| e / total).collect();
    g[label] -= 1.0;
    (loss, g)
}

// Output rows `lo..hi` (resp. columns) for kernel offset k ∈ {0,1,2}, so that
// the input index `out + k − 1` stays in `0..n`.
fn valid_range(k: usize, n: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    let hi = if k == 2 { n.saturating_sub(1) } else { n };
    (lo, hi.max(lo))
}

fn conv_forward(x: &[f64], wt: &[f64], b: &[f64], c_in: usize, c_out: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut y = vec![0.0; c_out * hw];
    for o in 0..c_out {
        let out = &mut y[o * hw..(o + 1) * hw];
        out.fill(b[o]);
        for i in 0..c_in {
            let inp = &x[i * hw..(i + 1) * hw];
            let kern = &wt[(o * c_in + i) * 9..(o * c_in + i + 1) * 9];
            for ky in 0..3 {
                let (y0, y1) = valid_range(ky, h);
                for kx in 0..3 {
                    let (x0, x1) = valid_range(kx, w);
                    let wv = kern[ky * 3 + kx];
                    for oy in y0..y1 {
                        let iy = oy + ky - 1;
                        let orow = &mut out[oy * w + x0..oy * w + x1];
                        let irow = &inp[iy * w + x0 + kx - 1..iy * w + x1 + kx - 1];
                        for (a, &v) in orow.iter_mut().zip(irow) {
                            *a += wv * v;
                        }
                    }
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    wt: &[f64],
    gy: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    need_input_grad: bool,
) -> Vec<f64> {
    let hw = h * w;
    let mut gx = vec![0.0; c_in * hw];
    for o in 0..c_out {
        let g = &gy[o * hw..(o + 1) * hw];
        gb[o] += g.iter().sum::<f64>();
        for i in 0..c_in {
            let inp = &x[i * hw..(i + 1) * hw];
            let base = (o * c_in + i) * 9;
            for ky in 0..3 {
                let (y0, y1) = valid_range(ky, h);
                for kx in 0..3 {
                    let (x0, x1) = valid_range(kx, w);
                    let mut acc = 0.0;
                    let wv = wt[base + ky * 3 + kx];
                    for oy in y0..y1 {
                        let iy = oy + ky - 1;
                        let grow = &g[oy * w + x0..oy * w + x1];
                        let irow = &inp[iy * w + x0 + kx - 1..iy * w + x1 + kx - 1];
                        acc += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                        if need_input_grad {
                            let xrow = &mut gx[i * hw + iy * w + x0 + kx - 1..i * hw + iy * w + x1 + kx - 1];
                            for (d, &gv) in xrow.iter_mut().zip(grow) {
                                *d += wv * gv;
                            }
                        }
                    }
                    gw[base + ky * 3 + kx] += acc;
                }
            }
        }
    }
    gx
}

fn pool_forward(x: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = ch * h * w + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = ch * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    (out, idx)
}

/// Logits (row-major `B × classes`) and mean cross-entropy of a batch.
pub fn forward(net: &Network, batch: &Batch) -> Result<(Vec<f64>, f64)> {
    net.forward(batch)
}

/// Gradient of the mean cross-entropy for every parameter.
pub fn backward(net: &Network, batch: &Batch) -> Result<ParamSet> {
    Ok(net.backward(batch)?.1)
}

//! MLP encoder plus linear classifier with hand-written backpropagation.
//!
//! Layers are stored as `out × in` weight matrices. The last layer is the
//! classifier; the ones before it form the encoder, with ReLU between encoder
//! layers and none after the representation.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::numerics::{axpy, dot, Mat, Rng};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub repr: usize,
    pub classes: usize,
}

impl ModelDims {
    pub fn new(input: usize, hidden: Vec<usize>, repr: usize, classes: usize) -> Self {
        ModelDims { input, hidden, repr, classes }
    }

    pub fn default_for(input: usize, classes: usize) -> Self {
        ModelDims::new(input, vec![64, 64], 16, classes)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.input > 0, "input dimension must be positive");
        ensure!(self.repr > 0, "representation dimension must be positive");
        ensure!(self.classes >= 2, "need at least 2 classes");
        ensure!(self.hidden.iter().all(|&h| h > 0), "hidden sizes must be positive");
        Ok(())
    }

    /// Widths from input through representation to logits.
    fn chain(&self) -> Vec<usize> {
        let mut v = vec![self.input];
        v.extend(&self.hidden);
        v.push(self.repr);
        v.push(self.classes);
        v
    }
}

/// Model parameters; also the checkpoint format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: ModelDims,
    /// Weight matrices, encoder first, classifier last.
    pub layers: Vec<Mat>,
    pub biases: Vec<Vec<f64>>,
    pub seed: u64,
    pub step: usize,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(dims: &ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = Rng::new(seed);
        let chain = dims.chain();
        let mut layers = Vec::new();
        let mut biases = Vec::new();
        for w in chain.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.uniform(-bound, bound)).collect();
            layers.push(Mat::from_vec(fan_out, fan_in, data)?);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(ModelParams { dims: dims.clone(), layers, biases, seed, step: 0 })
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let chain = self.dims.chain();
        ensure!(
            self.layers.len() == chain.len() - 1 && self.biases.len() == self.layers.len(),
            "expected {} layers, found {} weights and {} biases",
            chain.len() - 1,
            self.layers.len(),
            self.biases.len()
        );
        for (i, (w, b)) in self.layers.iter().zip(&self.biases).enumerate() {
            ensure!(
                w.cols == chain[i] && w.rows == chain[i + 1] && w.data.len() == w.rows * w.cols,
                "layer {i} has shape {}x{}, expected {}x{}",
                w.rows,
                w.cols,
                chain[i + 1],
                chain[i]
            );
            ensure!(b.len() == w.rows, "bias {i} has length {}, expected {}", b.len(), w.rows);
        }
        if !self.layers.iter().all(Mat::is_finite) || !self.biases.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::numerical("parameters contain non-finite values"));
        }
        Ok(())
    }

    pub fn encoder_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|w| w.data.len()).sum::<usize>() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// SHA-256 over the encoder's weights and biases (little-endian bytes).
    pub fn encoder_hash(&self) -> String {
        let mut h = Sha256::new();
        for i in 0..self.encoder_layers() {
            for v in self.layers[i].data.iter().chain(&self.biases[i]) {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Parameter tensors in a fixed order: (weight, bias) per layer.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for (w, b) in self.layers.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.data.as_mut_slice());
            out.push(b.as_mut_slice());
        }
        out
    }

    pub fn classifier_tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let last = self.layers.len() - 1;
        vec![self.layers[last].data.as_mut_slice(), self.biases[last].as_mut_slice()]
    }

    /// Forward a batch (rows of `x`).
    pub fn forward_batch(&self, x: &Mat) -> Result<Forward> {
        ensure!(
            x.cols == self.dims.input,
            "input has dimension {}, model expects {}",
            x.cols,
            self.dims.input
        );
        let n_enc = self.encoder_layers();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for i in 0..n_enc {
            let mut pre = affine(&cur, &self.layers[i], &self.biases[i]);
            if i + 1 < n_enc {
                pre.data.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            inputs.push(std::mem::replace(&mut cur, pre));
        }
        let logits = affine(&cur, &self.layers[n_enc], &self.biases[n_enc]);
        inputs.push(cur);
        Ok(Forward { inputs, logits, fingerprint: self.shape_fingerprint() })
    }

    /// Forward one sample; returns `(z, logits, cache)`.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Forward)> {
        let f = self.forward_batch(&Mat::from_vec(1, x.len(), x.to_vec())?)?;
        Ok((f.z().row(0).to_vec(), f.logits.row(0).to_vec(), f))
    }

    /// Representations only.
    pub fn encode(&self, x: &Mat) -> Result<Mat> {
        let mut f = self.forward_batch(x)?;
        Ok(f.inputs.pop().expect("at least one layer"))
    }

    /// Logits from precomputed representations.
    pub fn classify(&self, z: &Mat) -> Result<Mat> {
        let last = self.layers.len() - 1;
        ensure!(z.cols == self.dims.repr, "representation dimension mismatch");
        Ok(affine(z, &self.layers[last], &self.biases[last]))
    }

    /// Parameter gradients for upstream gradients at the representation and
    /// at the logits. `grad_logits` also flows into `z` through the classifier.
    pub fn backward(&self, cache: &Forward, grad_z: &Mat, grad_logits: &Mat) -> Result<Grads> {
        ensure!(cache.fingerprint == self.shape_fingerprint(), "cache does not match these parameters");
        let n = cache.logits.rows;
        let last = self.layers.len() - 1;
        ensure!(
            grad_logits.rows == n && grad_logits.cols == self.dims.classes,
            "grad_logits shape {}x{} does not match batch",
            grad_logits.rows,
            grad_logits.cols
        );
        ensure!(
            grad_z.rows == n && grad_z.cols == self.dims.repr,
            "grad_z shape {}x{} does not match batch",
            grad_z.rows,
            grad_z.cols
        );
        let mut layers: Vec<Mat> = self.layers.iter().map(|w| Mat::zeros(w.rows, w.cols)).collect();
        let mut biases: Vec<Vec<f64>> = self.biases.iter().map(|b| vec![0.0; b.len()]).collect();

        let mut upstream = layer_backward(
            &cache.inputs[last],
            &self.layers[last],
            grad_logits,
            &mut layers[last],
            &mut biases[last],
        );
        upstream.add_scaled(1.0, grad_z);
        for i in (0..last).rev() {
            // the layer's output was ReLU'd unless it is the representation
            if i + 1 < last {
                let out = &cache.inputs[i + 1];
                for (g, &a) in upstream.data.iter_mut().zip(&out.data) {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            upstream = layer_backward(&cache.inputs[i], &self.layers[i], &upstream, &mut layers[i], &mut biases[i]);
        }
        Ok(Grads { layers, biases })
    }

    fn shape_fingerprint(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|w| (w.rows, w.cols)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: ModelParams = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }
}

/// `x · wᵀ + b`, one output row per input row.
fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    let mut out = Mat::zeros(x.rows, w.rows);
    for i in 0..x.rows {
        let xi = x.row(i);
        for (o, v) in out.row_mut(i).iter_mut().enumerate() {
            *v = dot(w.row(o), xi) + b[o];
        }
    }
    out
}

/// Accumulates weight/bias gradients and returns the gradient w.r.t. the layer input.
fn layer_backward(input: &Mat, w: &Mat, grad_out: &Mat, gw: &mut Mat, gb: &mut [f64]) -> Mat {
    let mut grad_in = Mat::zeros(input.rows, input.cols);
    for i in 0..input.rows {
        let gi = grad_out.row(i);
        let xi = input.row(i);
        for (o, &g) in gi.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            gb[o] += g;
            axpy(gw.row_mut(o), g, xi);
            axpy(grad_in.row_mut(i), g, w.row(o));
        }
    }
    grad_in
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Input to each layer; the last entry is the representation `z`.
    pub inputs: Vec<Mat>,
    pub logits: Mat,
    fingerprint: Vec<(usize, usize)>,
}

impl Forward {
    pub fn z(&self) -> &Mat {
        self.inputs.last().expect("at least one layer")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub layers: Vec<Mat>,
    pub biases: Vec<Vec<f64>>,
}

impl Grads {
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for (w, b) in self.layers.iter().zip(&self.biases) {
            out.push(w.data.as_slice());
            out.push(b.as_slice());
        }
        out
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn classifier_tensors(&self) -> Vec<&[f64]> {
        let last = self.layers.len() - 1;
        vec![self.layers[last].data.as_slice(), self.biases[last].as_slice()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::DomainClassKey;
    use crate::losses::{ce_loss, sample_loss, LossVariant};
    use crate::stats::{compute_stats, group, Centroids};

    fn small_dims() -> ModelDims {
        ModelDims::new(3, vec![5, 4], 3, 3)
    }

    #[test]
    fn init_properties() {
        let d = ModelDims::default_for(4, 10);
        let a = ModelParams::init(&d, 7).unwrap();
        let b = ModelParams::init(&d, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, ModelParams::init(&d, 8).unwrap());
        assert!(a.biases.iter().flatten().all(|&v| v == 0.0));
        for w in &a.layers {
            let bound = (6.0 / (w.rows + w.cols) as f64).sqrt();
            assert!(w.data.iter().all(|v| v.abs() <= bound));
        }
        assert_eq!(a.num_params(), 4 * 64 + 64 + 64 * 64 + 64 + 64 * 16 + 16 + 16 * 10 + 10);
        a.validate().unwrap();
    }

    #[test]
    fn zero_weights_zero_output() {
        let mut p = ModelParams::init(&small_dims(), 1).unwrap();
        p.layers.iter_mut().for_each(|w| w.data.fill(0.0));
        let (z, logits, _) = p.forward(&[0.0, 0.0, 0.0]).unwrap();
        assert!(z.iter().chain(&logits).all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input() {
        let mut p = ModelParams::init(&ModelDims::new(3, vec![], 3, 2), 1).unwrap();
        p.layers[0] = Mat::identity(3);
        let (z, _, _) = p.forward(&[0.5, 1.5, 2.0]).unwrap();
        assert_eq!(z, vec![0.5, 1.5, 2.0]);
    }

    #[test]
    fn forward_matches_straight_line_version() {
        let p = ModelParams::init(&ModelDims::new(4, vec![6, 5], 3, 4), 3).unwrap();
        let mut p = p;
        let mut rng = Rng::new(4);
        for b in p.biases.iter_mut().flatten() {
            *b = rng.next_gaussian();
        }
        let x: Vec<f64> = (0..4).map(|_| rng.next_gaussian()).collect();
        let lin = |w: &Mat, b: &[f64], v: &[f64]| -> Vec<f64> {
            (0..w.rows).map(|o| (0..w.cols).map(|k| w.data[o * w.cols + k] * v[k]).sum::<f64>() + b[o]).collect()
        };
        let relu = |v: Vec<f64>| v.into_iter().map(|a| if a > 0.0 { a } else { 0.0 }).collect::<Vec<_>>();
        let h1 = relu(lin(&p.layers[0], &p.biases[0], &x));
        let h2 = relu(lin(&p.layers[1], &p.biases[1], &h1));
        let z = lin(&p.layers[2], &p.biases[2], &h2);
        let logits = lin(&p.layers[3], &p.biases[3], &z);
        let (z2, l2, _) = p.forward(&x).unwrap();
        for (a, b) in z.iter().zip(&z2).chain(logits.iter().zip(&l2)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let p = ModelParams::init(&small_dims(), 1).unwrap();
        assert!(matches!(p.forward(&[1.0, 2.0]), Err(Error::Validation(_))));
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let p = ModelParams::init(&small_dims(), 2).unwrap();
        let x = Mat::from_rows(&[vec![0.3, -1.0, 2.0], vec![1.0, 1.0, 1.0]]).unwrap();
        let f = p.forward_batch(&x).unwrap();
        let g = p.backward(&f, &Mat::zeros(2, 3), &Mat::zeros(2, 3)).unwrap();
        assert!(g.flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_cache_rejected() {
        let p = ModelParams::init(&small_dims(), 2).unwrap();
        let q = ModelParams::init(&ModelDims::new(3, vec![6], 3, 3), 2).unwrap();
        let f = q.forward_batch(&Mat::from_rows(&[vec![0.1, 0.2, 0.3]]).unwrap()).unwrap();
        assert!(p.backward(&f, &Mat::zeros(1, 3), &Mat::zeros(1, 3)).is_err());
    }

    #[test]
    fn dead_relu_unit_gets_no_weight_gradient() {
        let mut p = ModelParams::init(&small_dims(), 5).unwrap();
        // unit 0 of the first hidden layer is always negative
        p.layers[0].row_mut(0).fill(0.0);
        p.biases[0][0] = -1.0;
        let x = Mat::from_rows(&[vec![0.3, -1.0, 2.0]]).unwrap();
        let f = p.forward_batch(&x).unwrap();
        let g = p.backward(&f, &Mat::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap(), &Mat::zeros(1, 3)).unwrap();
        assert!(g.layers[0].row(0).iter().all(|&v| v == 0.0));
        assert_eq!(g.biases[0][0], 0.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = ModelParams::init(&small_dims(), 9).unwrap();
        let q = ModelParams::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.encoder_hash(), q.encoder_hash());
        let mut bad: serde_json::Value = serde_json::from_str(&p.to_json().unwrap()).unwrap();
        bad["biases"][0] = serde_json::json!([0.0]);
        assert!(ModelParams::from_json(&bad.to_string()).is_err());
    }

    #[test]
    fn encoder_hash_ignores_classifier() {
        let p = ModelParams::init(&small_dims(), 9).unwrap();
        let mut q = p.clone();
        q.biases.last_mut().unwrap()[0] = 3.0;
        assert_eq!(p.encoder_hash(), q.encoder_hash());
        q.biases[0][0] = 1.0;
        assert_ne!(p.encoder_hash(), q.encoder_hash());
    }

    /// CE over the batch plus ω times the mean alignment loss with fixed statistics.
    fn joint_objective(p: &ModelParams, x: &Mat, keys: &[DomainClassKey], c: &Centroids, variant: LossVariant) -> f64 {
        let f = p.forward_batch(x).unwrap();
        let mut total = 0.0;
        let mut align = 0.0;
        let mut used = 0;
        for (i, k) in keys.iter().enumerate() {
            total += ce_loss(f.logits.row(i), k.class).unwrap().0;
            if let Some(s) = sample_loss(f.z().row(i), *k, c, variant.scaling(1.0)).unwrap() {
                align += s.loss;
                used += 1;
            }
        }
        total / keys.len() as f64 + 0.1 * align / used as f64
    }

    #[test]
    fn full_model_gradient_check() {
        let dims = ModelDims::new(3, vec![6, 5], 4, 3);
        let mut rng = Rng::new(17);
        for variant in LossVariant::ALL {
            let p = ModelParams::init(&dims, rng.next_u64()).unwrap();
            let mut rows = Vec::new();
            let mut keys = Vec::new();
            for d in 0..2 {
                for c in 0..3 {
                    for _ in 0..3 {
                        rows.push((0..3).map(|_| rng.next_gaussian() + c as f64).collect::<Vec<f64>>());
                        keys.push(DomainClassKey::new(d, c));
                    }
                }
            }
            let x = Mat::from_rows(&rows).unwrap();
            let z = p.encode(&x).unwrap();
            let zs: Vec<Vec<f64>> = (0..z.rows).map(|i| z.row(i).to_vec()).collect();
            let store = compute_stats(&group(&keys, &zs)).unwrap();
            let c = Centroids::new(&store, variant.metric(1e-3)).unwrap();

            let f = p.forward_batch(&x).unwrap();
            let n = keys.len();
            let mut gz = Mat::zeros(n, 4);
            let mut gl = Mat::zeros(n, 3);
            let used = keys
                .iter()
                .enumerate()
                .filter(|(i, k)| sample_loss(f.z().row(*i), **k, &c, variant.scaling(1.0)).unwrap().is_some())
                .count();
            for (i, k) in keys.iter().enumerate() {
                let (_, g) = ce_loss(f.logits.row(i), k.class).unwrap();
                axpy(gl.row_mut(i), 1.0 / n as f64, &g);
                if let Some(s) = sample_loss(f.z().row(i), *k, &c, variant.scaling(1.0)).unwrap() {
                    axpy(gz.row_mut(i), 0.1 / used as f64, &s.grad);
                }
            }
            let analytic = p.backward(&f, &gz, &gl).unwrap().flat();

            let mut numeric = Vec::with_capacity(analytic.len());
            let h = 1e-5;
            let mut q = p.clone();
            let n_tensors = q.tensors_mut().len();
            for t in 0..n_tensors {
                let len = q.tensors_mut()[t].len();
                for j in 0..len {
                    let orig = q.tensors_mut()[t][j];
                    q.tensors_mut()[t][j] = orig + h;
                    let fp = joint_objective(&q, &x, &keys, &c, variant);
                    q.tensors_mut()[t][j] = orig - h;
                    let fm = joint_objective(&q, &x, &keys, &c, variant);
                    q.tensors_mut()[t][j] = orig;
                    numeric.push((fp - fm) / (2.0 * h));
                }
            }
            let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = crate::numerics::norm(&analytic).max(crate::numerics::norm(&numeric)).max(1e-10);
            assert!(diff / scale < 1e-6, "{variant:?}: {}", diff / scale);
        }
    }
}

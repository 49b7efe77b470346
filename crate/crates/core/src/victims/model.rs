use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndcore::{Matrix, Tape, Var};

use super::arch::{layout, Arch, ParamBlock, VictimKind};

/// A minibatch: features, sensitive values, labels and optional
/// reparameterization noise (ICVAE family; `None` uses the posterior mean).
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Matrix,
    pub a: Vec<usize>,
    pub y: Vec<u8>,
    pub noise: Option<Matrix>,
}

impl Batch {
    pub fn new(x: Matrix, a: Vec<usize>, y: Vec<u8>) -> Self {
        Batch { x, a, y, noise: None }
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn with_noise(mut self, noise: Matrix) -> Self {
        self.noise = Some(noise);
        self
    }
}

/// Loss value plus training-direction gradients.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    /// Gradient over θ with discriminator blocks sign-reversed.
    pub theta: Vec<f64>,
    /// Gradient of the loss value with respect to the batch features.
    pub x: Option<Matrix>,
}

/// A trainable fair-representation learner.
#[derive(Clone, Debug, PartialEq)]
pub struct VictimModel {
    kind: VictimKind,
    arch: Arch,
    blocks: Vec<ParamBlock>,
    theta: Vec<f64>,
    seed: u64,
}

/// Builds a victim with Glorot-uniform weights and zero biases.
pub fn build_victim(kind: VictimKind, arch: Arch, seed: u64) -> Result<VictimModel> {
    arch.validate(kind)?;
    let blocks = layout(kind, &arch);
    let total: usize = blocks.iter().map(ParamBlock::len).sum();
    let mut theta = vec![0.0; total];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for b in &blocks {
        if b.is_bias() {
            continue;
        }
        let limit = (6.0 / (b.rows + b.cols) as f64).sqrt();
        for v in &mut theta[b.range()] {
            *v = rng.random_range(-limit..limit);
        }
    }
    Ok(VictimModel {
        kind,
        arch,
        blocks,
        theta,
        seed,
    })
}

struct Params {
    /// Differentiable leaves, one per block.
    leaves: Vec<Var>,
    /// What the forward pass reads (reversal-wrapped for adversarial blocks).
    vars: Vec<Var>,
}

impl Params {
    fn get(&self, model: &VictimModel, name: &str) -> Var {
        let i = model
            .blocks
            .iter()
            .position(|b| b.name == name)
            .unwrap_or_else(|| panic!("no parameter block `{name}`"));
        self.vars[i]
    }
}

enum Act {
    Relu,
    Tanh,
}

fn activate(t: &mut Tape, h: Var, act: &Act) -> Var {
    match act {
        Act::Relu => t.relu(h),
        Act::Tanh => t.tanh(h),
    }
}

/// Per-row BCE with logits: softplus(l) − y·l (n x 1).
fn bce_rows(t: &mut Tape, logits: Var, targets: &[f64]) -> Result<Var> {
    let sp = t.softplus(logits);
    let tv = t.constant(Matrix::column(targets));
    let tl = t.mul(logits, tv)?;
    t.sub(sp, tl)
}

/// Weighted sum of per-row values; weights sum to one.
fn weighted_sum(t: &mut Tape, rows: Var, weights: Vec<f64>) -> Result<Var> {
    let w = t.constant(Matrix::column(&weights));
    let p = t.mul(rows, w)?;
    Ok(t.sum(p))
}

/// Weights averaging uniformly within each group, then across present groups.
fn balanced_weights(groups: &[usize]) -> Vec<f64> {
    let k = groups.iter().copied().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; k];
    for &g in groups {
        counts[g] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count().max(1) as f64;
    groups.iter().map(|&g| 1.0 / (counts[g] as f64 * present)).collect()
}

fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

impl VictimModel {
    pub fn kind(&self) -> VictimKind {
        self.kind
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn set_theta(&mut self, theta: &[f64]) {
        assert_eq!(theta.len(), self.theta.len(), "parameter count");
        self.theta.copy_from_slice(theta);
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    pub fn repr_dim(&self) -> usize {
        self.arch.repr_dim
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// +1 for ordinary blocks, −1 for blocks trained through gradient reversal.
    pub fn reversal_signs(&self) -> Vec<f64> {
        let mut s = vec![1.0; self.theta.len()];
        for b in self.blocks.iter().filter(|b| b.adversarial) {
            s[b.range()].iter_mut().for_each(|v| *v = -1.0);
        }
        s
    }

    /// Mask selecting encoder parameters (1.0) in the flat layout.
    pub fn encoder_mask(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.theta.len()];
        for b in self.blocks.iter().filter(|b| b.encoder) {
            s[b.range()].iter_mut().for_each(|v| *v = 1.0);
        }
        s
    }

    fn block_matrix(&self, theta: &[f64], b: &ParamBlock) -> Matrix {
        Matrix::from_vec(b.rows, b.cols, theta[b.range()].to_vec())
    }

    /// Records θ on `tape` as leaves, one per block.
    fn params_on(&self, tape: &mut Tape, theta: &[f64], reverse_adversarial: bool) -> Params {
        let mut leaves = Vec::with_capacity(self.blocks.len());
        let mut vars = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let v = tape.leaf(self.block_matrix(theta, b));
            leaves.push(v);
            vars.push(if reverse_adversarial && b.adversarial {
                tape.reverse_grad(v)
            } else {
                v
            });
        }
        Params { leaves, vars }
    }

    fn mlp(&self, t: &mut Tape, p: &Params, prefix: &str, x: Var, hidden: usize, act: &Act) -> Result<Var> {
        if hidden == 0 {
            let (w, b) = (
                p.get(self, &format!("{prefix}.out.w")),
                p.get(self, &format!("{prefix}.out.b")),
            );
            t.affine(x, w, b)
        } else {
            let (w1, b1) = (
                p.get(self, &format!("{prefix}.hidden.w")),
                p.get(self, &format!("{prefix}.hidden.b")),
            );
            let h = t.affine(x, w1, b1)?;
            let h = activate(t, h, act);
            let (w2, b2) = (
                p.get(self, &format!("{prefix}.out.w")),
                p.get(self, &format!("{prefix}.out.b")),
            );
            t.affine(h, w2, b2)
        }
    }

    fn activation(&self) -> Act {
        if self.kind.is_adversarial() {
            Act::Relu
        } else {
            Act::Tanh
        }
    }

    /// Posterior mean / deterministic encoding and (ICVAE) log-variance.
    fn encoder_forward(&self, t: &mut Tape, p: &Params, x: Var) -> Result<(Var, Option<Var>)> {
        let act = self.activation();
        match self.kind {
            VictimKind::Cfair | VictimKind::CfairEo => {
                let z = self.mlp(t, p, "encoder", x, self.arch.encoder_hidden, &act)?;
                Ok((z, None))
            }
            VictimKind::IcvaeS | VictimKind::IcvaeUs => {
                let h = if self.arch.encoder_hidden == 0 {
                    x
                } else {
                    let (w, b) = (p.get(self, "encoder.hidden.w"), p.get(self, "encoder.hidden.b"));
                    let h = t.affine(x, w, b)?;
                    activate(t, h, &act)
                };
                let (wm, bm) = (p.get(self, "encoder.mean.w"), p.get(self, "encoder.mean.b"));
                let mean = t.affine(h, wm, bm)?;
                let (wv, bv) = (p.get(self, "encoder.logvar.w"), p.get(self, "encoder.logvar.b"));
                let logvar = t.affine(h, wv, bv)?;
                Ok((mean, Some(logvar)))
            }
        }
    }

    /// Encoder output for features already on `tape`, with θ as leaves.
    /// Returns the representation and the parameter leaves (block order).
    pub fn encode_on_tape(&self, tape: &mut Tape, x: Var) -> Result<(Var, Vec<Var>)> {
        let p = self.params_on(tape, &self.theta, false);
        let (z, _) = self.encoder_forward(tape, &p, x)?;
        Ok((z, p.leaves))
    }

    /// Deterministic representations `N x d` (posterior mean for ICVAE).
    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        self.check_features(x)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let p = self.params_on(&mut tape, &self.theta, false);
        let (z, _) = self.encoder_forward(&mut tape, &p, xv)?;
        Ok(tape.value(z).clone())
    }

    fn check_features(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.arch.input_dim {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: x.shape(),
                rhs: (x.rows(), self.arch.input_dim),
            });
        }
        Ok(())
    }

    fn loss_on_tape(&self, t: &mut Tape, p: &Params, x: Var, batch: &Batch) -> Result<Var> {
        let n = batch.len();
        let (enc, logvar) = self.encoder_forward(t, p, x)?;
        let act = self.activation();
        let y: Vec<f64> = batch.y.iter().map(|&v| f64::from(v)).collect();
        match self.kind {
            VictimKind::Cfair | VictimKind::CfairEo => {
                let balanced = self.kind == VictimKind::Cfair;
                let (wc, bc) = (p.get(self, "classifier.out.w"), p.get(self, "classifier.out.b"));
                let logits = t.affine(enc, wc, bc)?;
                let rows = bce_rows(t, logits, &y)?;
                let ybin: Vec<usize> = batch.y.iter().map(|&v| usize::from(v)).collect();
                let w = if balanced {
                    balanced_weights(&ybin)
                } else {
                    uniform_weights(n)
                };
                let mut loss = weighted_sum(t, rows, w)?;
                for k in 0..2u8 {
                    let idx: Vec<usize> = (0..n).filter(|&i| batch.y[i] == k).collect();
                    if idx.is_empty() {
                        continue;
                    }
                    let zk = t.select_rows(enc, &idx);
                    let dl = self.mlp(t, p, &format!("disc{k}"), zk, self.arch.aux_hidden, &act)?;
                    let ak: Vec<usize> = idx.iter().map(|&i| batch.a[i]).collect();
                    let af: Vec<f64> = ak.iter().map(|&v| v as f64).collect();
                    let drows = bce_rows(t, dl, &af)?;
                    let dw = if balanced {
                        balanced_weights(&ak)
                    } else {
                        uniform_weights(idx.len())
                    };
                    let dloss = weighted_sum(t, drows, dw)?;
                    let scaled = t.scale(dloss, self.arch.weights.lambda_adv);
                    loss = t.sub(loss, scaled)?;
                }
                Ok(loss)
            }
            VictimKind::IcvaeS | VictimKind::IcvaeUs => {
                let logvar = logvar.expect("ICVAE encoder has a log-variance head");
                let w = self.arch.weights;
                let z = match &batch.noise {
                    Some(eps) => {
                        let half = t.scale(logvar, 0.5);
                        let sd = t.exp(half);
                        let e = t.constant(eps.clone());
                        let jitter = t.mul(sd, e)?;
                        t.add(enc, jitter)?
                    }
                    None => enc,
                };
                let k = self.arch.sensitive_classes;
                let mut onehot = Matrix::zeros(n, k);
                for (i, &ai) in batch.a.iter().enumerate() {
                    onehot[(i, ai)] = 1.0;
                }
                let av = t.constant(onehot);
                let dec_in = t.hcat(z, av)?;
                let recon = self.mlp(t, p, "decoder", dec_in, self.arch.aux_hidden, &act)?;
                let err = t.sub(recon, x)?;
                let sq = t.square(err);
                let sq_sum = t.sum(sq);
                let mut loss = t.scale(sq_sum, 1.0 / n as f64);

                if w.beta > 0.0 {
                    // ½ Σ (μ² + e^{logvar} − 1 − logvar), averaged over rows
                    let mu2 = t.square(enc);
                    let var = t.exp(logvar);
                    let a1 = t.add(mu2, var)?;
                    let a2 = t.sub(a1, logvar)?;
                    let a3 = t.add_scalar(a2, -1.0);
                    let s = t.sum(a3);
                    let kl = t.scale(s, 0.5 * w.beta / n as f64);
                    loss = t.add(loss, kl)?;
                }
                if w.lambda_mi > 0.0 {
                    let centre = t.mean_rows(enc);
                    let dev = t.sub_row(enc, centre)?;
                    let dsq = t.square(dev);
                    let s = t.sum(dsq);
                    let mi = t.scale(s, w.lambda_mi / n as f64);
                    loss = t.add(loss, mi)?;
                }
                if self.arch.has_classifier(self.kind) {
                    let logits = self.mlp(t, p, "classifier", z, self.arch.aux_hidden, &act)?;
                    let rows = bce_rows(t, logits, &y)?;
                    let cls = t.mean(rows);
                    loss = t.add(loss, cls)?;
                }
                Ok(loss)
            }
        }
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::InvalidConfig("empty batch".into()));
        }
        self.check_features(&batch.x)?;
        if batch.a.len() != batch.len() || batch.y.len() != batch.len() {
            return Err(Error::InvalidConfig("batch column lengths differ".into()));
        }
        if batch.a.iter().any(|&v| v >= self.arch.sensitive_classes) {
            return Err(Error::InvalidConfig("sensitive value out of range for victim".into()));
        }
        if let Some(e) = &batch.noise {
            if e.shape() != (batch.len(), self.arch.repr_dim) {
                return Err(Error::ShapeMismatch {
                    op: "noise",
                    lhs: e.shape(),
                    rhs: (batch.len(), self.arch.repr_dim),
                });
            }
        }
        Ok(())
    }

    /// Scalar lower-level loss at the current θ.
    pub fn victim_loss(&self, batch: &Batch) -> Result<f64> {
        self.loss_at(&self.theta, batch)
    }

    /// Loss at an arbitrary parameter vector.
    pub fn loss_at(&self, theta: &[f64], batch: &Batch) -> Result<f64> {
        self.check_batch(batch)?;
        let mut t = Tape::new();
        let x = t.constant(batch.x.clone());
        let p = self.params_on(&mut t, theta, false);
        let l = self.loss_on_tape(&mut t, &p, x, batch)?;
        Ok(t.value(l).item())
    }

    /// Loss and training-direction gradients at `theta`.
    pub fn loss_grad_at(&self, theta: &[f64], batch: &Batch, want_x: bool) -> Result<LossGrad> {
        self.check_batch(batch)?;
        let mut t = Tape::new();
        let x = if want_x {
            t.leaf(batch.x.clone())
        } else {
            t.constant(batch.x.clone())
        };
        let p = self.params_on(&mut t, theta, true);
        let l = self.loss_on_tape(&mut t, &p, x, batch)?;
        let loss = t.value(l).item();
        let mut g = t.backward(l)?;
        let mut flat = vec![0.0; theta.len()];
        for (b, &leaf) in self.blocks.iter().zip(&p.leaves) {
            flat[b.range()].copy_from_slice(g.take(leaf).data());
        }
        let xg = want_x.then(|| g.take(x));
        Ok(LossGrad {
            loss,
            theta: flat,
            x: xg,
        })
    }

    /// ∇θ of the victim loss, flattened in block order, with gradient
    /// reversal applied to discriminator blocks (the direction training follows).
    pub fn lower_level_grad(&self, batch: &Batch) -> Result<Vec<f64>> {
        Ok(self.loss_grad_at(&self.theta, batch, false)?.theta)
    }

    /// Serializes θ as a textual header followed by little-endian f64 data.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "fairpoison-theta v1")?;
        writeln!(w, "kind {}", self.kind)?;
        writeln!(w, "seed {}", self.seed)?;
        for b in &self.blocks {
            writeln!(w, "block {} {} {}", b.name, b.rows, b.cols)?;
        }
        writeln!(w, "end")?;
        for v in &self.theta {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Loads θ written by [`write_snapshot`](Self::write_snapshot) into a
    /// model of the same architecture.
    pub fn read_snapshot<R: BufRead>(&mut self, mut r: R) -> Result<()> {
        let mut line = String::new();
        let mut names = Vec::new();
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Ingest("truncated snapshot header".into()));
            }
            let l = line.trim_end();
            if l == "end" {
                break;
            }
            if let Some(rest) = l.strip_prefix("kind ") {
                if rest != self.kind.name() {
                    return Err(Error::Ingest(format!("snapshot kind {rest} != {}", self.kind)));
                }
            } else if let Some(rest) = l.strip_prefix("block ") {
                names.push(rest.to_string());
            }
        }
        let expected: Vec<String> = self
            .blocks
            .iter()
            .map(|b| format!("{} {} {}", b.name, b.rows, b.cols))
            .collect();
        if names != expected {
            return Err(Error::Ingest("snapshot block layout differs".into()));
        }
        let mut buf = [0u8; 8];
        for v in self.theta.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        Ok(())
    }
}

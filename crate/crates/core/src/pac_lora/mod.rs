//! Low-rank adapters: plain LoRA and the gated multi-expert PAC-LoRA.
//!
//! A PAC-LoRA layer keeps the frozen base weight `W0 [d×k]` and `N_a`
//! expert pairs: analyzing experts `A_i [r×k]` and writing experts
//! `B_i [d×r]`. Two gating MLPs turn pooled news features and pooled user
//! features into mixture weights `gA`, `gB`, and the adapted output is
//!
//! ```text
//! h' = W0·x + scale · Σ_i (gB_i · B_i)(gA_i · A_i · x)
//! ```
//!
//! With `N_a = 1` and both gates equal to `[1]` this is exactly LoRA.

pub mod checkpoint;
mod utilization;

pub use utilization::{max_pairwise_l1, utilization_stats, GateRecord, TopicUtilization};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Default LoRA alpha; the adapter scale is `alpha / rank`.
pub const DEFAULT_ALPHA: f64 = 16.0;
/// Standard deviation used to initialize analyzing matrices.
pub const A_INIT_STD: f64 = 0.02;
/// Hidden width of the gating perceptrons.
pub const DEFAULT_GATE_HIDDEN: usize = 32;

fn check_rank(d: usize, k: usize, r: usize) -> Result<()> {
    if r == 0 || 2 * r > d.min(k) {
        return Err(Error::Config(format!(
            "rank {r} must satisfy 1 <= r <= min(d, k)/2 for a {d}x{k} weight"
        )));
    }
    Ok(())
}

fn expect_shape(t: &Tensor, shape: &[usize], what: &'static str) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::dim(what, t.shape(), shape));
    }
    Ok(())
}

/// Plain LoRA: `h' = W0·x + scale · B·(A·x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    w0: Tensor,
    a: Tensor,
    b: Tensor,
    scale: f64,
}

impl LoraAdapter {
    /// Standard initialization: `A ~ N(0, 0.02²)`, `B = 0`, `scale = alpha / r`.
    pub fn init<R: Rng + ?Sized>(w0: Tensor, rank: usize, alpha: f64, rng: &mut R) -> Result<Self> {
        let (d, k) = w0.as_matrix_dims().ok_or_else(|| Error::dim("lora", w0.shape(), &[]))?;
        check_rank(d, k, rank)?;
        let a = Tensor::randn(vec![rank, k], A_INIT_STD, rng);
        Self::from_parts(w0, a, Tensor::zeros(vec![d, rank]), alpha / rank as f64)
    }

    pub fn from_parts(w0: Tensor, a: Tensor, b: Tensor, scale: f64) -> Result<Self> {
        let (d, k) = w0.as_matrix_dims().ok_or_else(|| Error::dim("lora", w0.shape(), &[]))?;
        let r = a.rows();
        expect_shape(&a, &[r, k], "lora A")?;
        expect_shape(&b, &[d, r], "lora B")?;
        check_rank(d, k, r)?;
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("adapter scale must be positive, got {scale}")));
        }
        Ok(LoraAdapter { w0, a, b, scale })
    }

    pub fn w0(&self) -> &Tensor {
        &self.w0
    }
    pub fn a(&self) -> &Tensor {
        &self.a
    }
    pub fn b(&self) -> &Tensor {
        &self.b
    }
    pub fn scale(&self) -> f64 {
        self.scale
    }
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let xv = g.constant(row_vector(x));
        let w0 = g.constant(self.w0.clone());
        let a = g.constant(self.a.clone());
        let b = g.constant(self.b.clone());
        let out = adapted_linear(&mut g, xv, xv, w0, &[(a, b)], None, self.scale)?;
        Ok(g.value(out).data().to_vec())
    }
}

/// One analyzing/writing expert pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub a: Tensor,
    pub b: Tensor,
}

/// Two-layer perceptron `f → h (ReLU) → N_a` producing expert logits.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingNet {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl GatingNet {
    /// He-initialized weights, zero biases.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, experts: usize, rng: &mut R) -> Self {
        GatingNet {
            w1: Tensor::randn(vec![hidden, input], (2.0 / input as f64).sqrt(), rng),
            b1: Tensor::zeros(vec![hidden]),
            w2: Tensor::randn(vec![experts, hidden], (2.0 / hidden as f64).sqrt(), rng),
            b2: Tensor::zeros(vec![experts]),
        }
    }

    pub fn zeros(input: usize, hidden: usize, experts: usize) -> Self {
        GatingNet {
            w1: Tensor::zeros(vec![hidden, input]),
            b1: Tensor::zeros(vec![hidden]),
            w2: Tensor::zeros(vec![experts, hidden]),
            b2: Tensor::zeros(vec![experts]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }
    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }
    pub fn n_experts(&self) -> usize {
        self.w2.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, f, n) = (self.hidden_dim(), self.input_dim(), self.n_experts());
        expect_shape(&self.w1, &[h, f], "gate w1")?;
        expect_shape(&self.b1, &[h], "gate b1")?;
        expect_shape(&self.w2, &[n, h], "gate w2")?;
        expect_shape(&self.b2, &[n], "gate b2")?;
        if n == 0 {
            return Err(Error::Config("gating net needs at least one expert".into()));
        }
        Ok(())
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// Softmaxed mixture weights for one feature vector.
    pub fn probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::dim("gating input", &[x.len()], self.w1.shape()));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericDomain("gating features are not finite".into()));
        }
        let mut g = Graph::new();
        let vars = GateVars::bind(&mut g, self, false);
        let xv = g.constant(Tensor::vector(x.to_vec()));
        let p = vars.probs(&mut g, xv)?;
        Ok(g.value(p).data().to_vec())
    }
}

/// A [`GatingNet`] recorded on a graph.
#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl GateVars {
    pub fn bind(g: &mut Graph, net: &GatingNet, trainable: bool) -> Self {
        GateVars {
            w1: g.leaf(net.w1.clone(), trainable),
            b1: g.leaf(net.b1.clone(), trainable),
            w2: g.leaf(net.w2.clone(), trainable),
            b2: g.leaf(net.b2.clone(), trainable),
        }
    }

    pub fn from_vars(vars: [Var; 4]) -> Self {
        GateVars {
            w1: vars[0],
            b1: vars[1],
            w2: vars[2],
            b2: vars[3],
        }
    }

    /// `softmax(W2 · relu(W1 · x + b1) + b2)` for a feature vector `x`.
    pub fn probs(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if !g.value(x).all_finite() {
            return Err(Error::NumericDomain("gating features are not finite".into()));
        }
        let h = g.matmul_nt(x, self.w1)?;
        let h = g.add_row_bias(h, self.b1)?;
        let h = g.relu(h);
        let logits = g.matmul_nt(h, self.w2)?;
        let logits = g.add_row_bias(logits, self.b2)?;
        g.softmax(logits)
    }
}

/// Mixture weights `(gA, gB)` from news-side and user-side features.
pub fn compute_gates(
    gate_a: &GatingNet,
    gate_b: &GatingNet,
    x_news: &[f64],
    x_user: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok((gate_a.probs(x_news)?, gate_b.probs(x_user)?))
}

/// Frozen base weight plus gated expert pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PacLoraLayer {
    w0: Tensor,
    experts: Vec<Expert>,
    gate_a: GatingNet,
    gate_b: GatingNet,
    scale: f64,
}

impl PacLoraLayer {
    pub fn init<R: Rng + ?Sized>(
        w0: Tensor,
        n_experts: usize,
        rank: usize,
        alpha: f64,
        gate_input: usize,
        gate_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let (d, k) = w0.as_matrix_dims().ok_or_else(|| Error::dim("pac-lora", w0.shape(), &[]))?;
        check_rank(d, k, rank)?;
        if n_experts == 0 {
            return Err(Error::Config("PAC-LoRA needs at least one expert".into()));
        }
        let experts = (0..n_experts)
            .map(|_| Expert {
                a: Tensor::randn(vec![rank, k], A_INIT_STD, rng),
                b: Tensor::zeros(vec![d, rank]),
            })
            .collect();
        let gate_a = GatingNet::init(gate_input, gate_hidden, n_experts, rng);
        let gate_b = GatingNet::init(gate_input, gate_hidden, n_experts, rng);
        Self::from_parts(w0, experts, gate_a, gate_b, alpha / rank as f64)
    }

    pub fn from_parts(
        w0: Tensor,
        experts: Vec<Expert>,
        gate_a: GatingNet,
        gate_b: GatingNet,
        scale: f64,
    ) -> Result<Self> {
        let (d, k) = w0.as_matrix_dims().ok_or_else(|| Error::dim("pac-lora", w0.shape(), &[]))?;
        let first = experts
            .first()
            .ok_or_else(|| Error::Config("PAC-LoRA needs at least one expert".into()))?;
        let r = first.a.rows();
        check_rank(d, k, r)?;
        for e in &experts {
            expect_shape(&e.a, &[r, k], "expert A")?;
            expect_shape(&e.b, &[d, r], "expert B")?;
        }
        gate_a.validate()?;
        gate_b.validate()?;
        let n = experts.len();
        if gate_a.n_experts() != n || gate_b.n_experts() != n {
            return Err(Error::Config(format!(
                "gates emit {}/{} logits for {n} experts",
                gate_a.n_experts(),
                gate_b.n_experts()
            )));
        }
        if gate_a.input_dim() != gate_b.input_dim() || gate_a.hidden_dim() != gate_b.hidden_dim() {
            return Err(Error::Config("analyzing and writing gates differ in shape".into()));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("adapter scale must be positive, got {scale}")));
        }
        Ok(PacLoraLayer {
            w0,
            experts,
            gate_a,
            gate_b,
            scale,
        })
    }

    pub fn w0(&self) -> &Tensor {
        &self.w0
    }
    pub fn experts(&self) -> &[Expert] {
        &self.experts
    }
    pub fn experts_mut(&mut self) -> &mut [Expert] {
        &mut self.experts
    }
    pub fn gate_a(&self) -> &GatingNet {
        &self.gate_a
    }
    pub fn gate_b(&self) -> &GatingNet {
        &self.gate_b
    }
    pub fn scale(&self) -> f64 {
        self.scale
    }
    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }
    pub fn rank(&self) -> usize {
        self.experts[0].a.rows()
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.w0.rows(), self.w0.cols())
    }

    pub fn compute_gates(&self, x_news: &[f64], x_user: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        compute_gates(&self.gate_a, &self.gate_b, x_news, x_user)
    }

    /// Adapted output for a single input vector with externally supplied gates.
    pub fn forward(&self, x: &[f64], ga: &[f64], gb: &[f64]) -> Result<Vec<f64>> {
        let n = self.n_experts();
        if ga.len() != n || gb.len() != n {
            return Err(Error::contract(format!(
                "gate lengths {}/{} do not match {n} experts",
                ga.len(),
                gb.len()
            )));
        }
        let mut g = Graph::new();
        let xv = g.constant(row_vector(x));
        let w0 = g.constant(self.w0.clone());
        let experts: Vec<(Var, Var)> = self
            .experts
            .iter()
            .map(|e| (g.constant(e.a.clone()), g.constant(e.b.clone())))
            .collect();
        let gav = g.constant(Tensor::vector(ga.to_vec()));
        let gbv = g.constant(Tensor::vector(gb.to_vec()));
        let out = adapted_linear(&mut g, xv, xv, w0, &experts, Some((gav, gbv)), self.scale)?;
        Ok(g.value(out).data().to_vec())
    }
}

fn row_vector(x: &[f64]) -> Tensor {
    Tensor::new(vec![1, x.len()], x.to_vec()).expect("row vector")
}

/// Records an adapted projection of the rows of `x [T×k]`.
///
/// `x_adapter` feeds the low-rank path (it may be a dropped-out copy of
/// `x`). With `gates = None` every expert weight is 1, which for a single
/// expert is plain LoRA.
pub fn adapted_linear(
    g: &mut Graph,
    x: Var,
    x_adapter: Var,
    w0: Var,
    experts: &[(Var, Var)],
    gates: Option<(Var, Var)>,
    scale: f64,
) -> Result<Var> {
    let base = g.matmul_nt(x, w0)?;
    if let Some((ga, gb)) = gates {
        let n = experts.len();
        let (la, lb) = (g.value(ga).numel(), g.value(gb).numel());
        if la != n || lb != n {
            return Err(Error::contract(format!("gate lengths {la}/{lb} do not match {n} experts")));
        }
    }
    let mut delta: Option<Var> = None;
    for (i, &(a, b)) in experts.iter().enumerate() {
        let mut u = g.matmul_nt(x_adapter, a)?;
        if let Some((ga, _)) = gates {
            u = g.scale_by_element(u, ga, i)?;
        }
        let mut v = g.matmul_nt(u, b)?;
        if let Some((_, gb)) = gates {
            v = g.scale_by_element(v, gb, i)?;
        }
        delta = Some(match delta {
            None => v,
            Some(acc) => g.add(acc, v)?,
        });
    }
    match delta {
        Some(dv) => {
            let dv = g.scale(dv, scale);
            g.add(base, dv)
        }
        None => Ok(base),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_layer(n: usize, seed: u64) -> PacLoraLayer {
        let mut r = rng(seed);
        let (d, k, rank) = (6, 8, 2);
        let w0 = Tensor::uniform(vec![d, k], -1.0, 1.0, &mut r);
        let experts = (0..n)
            .map(|_| Expert {
                a: Tensor::uniform(vec![rank, k], -1.0, 1.0, &mut r),
                b: Tensor::uniform(vec![d, rank], -1.0, 1.0, &mut r),
            })
            .collect();
        let ga = GatingNet::init(5, 7, n, &mut r);
        let gb = GatingNet::init(5, 7, n, &mut r);
        PacLoraLayer::from_parts(w0, experts, ga, gb, 0.75).unwrap()
    }

    #[test]
    fn lora_zero_b_is_base() {
        let mut r = rng(1);
        let w0 = Tensor::uniform(vec![6, 8], -1.0, 1.0, &mut r);
        let lora = LoraAdapter::init(w0.clone(), 2, DEFAULT_ALPHA, &mut r).unwrap();
        let x: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        assert_eq!(lora.forward(&x).unwrap(), w0.matvec(&x).unwrap());
    }

    #[test]
    fn lora_hand_example() {
        // W0 = 0, A = [[1, 0]], B = [[2], [0]], x = [3, 5] -> [6, 0].
        // The rank bound needs min(d, k) >= 2r, satisfied by 2x2 with r = 1.
        let lora = LoraAdapter::from_parts(
            Tensor::zeros(vec![2, 2]),
            Tensor::from_rows(&[&[1.0, 0.0]]),
            Tensor::from_rows(&[&[2.0], &[0.0]]),
            1.0,
        )
        .unwrap();
        assert_eq!(lora.forward(&[3.0, 5.0]).unwrap(), vec![6.0, 0.0]);
    }

    #[test]
    fn lora_matches_dense_materialization() {
        let mut r = rng(2);
        let w0 = Tensor::uniform(vec![6, 8], -1.0, 1.0, &mut r);
        let a = Tensor::uniform(vec![3, 8], -1.0, 1.0, &mut r);
        let b = Tensor::uniform(vec![6, 3], -1.0, 1.0, &mut r);
        let lora = LoraAdapter::from_parts(w0.clone(), a.clone(), b.clone(), 0.5).unwrap();
        let dense = w0.add(&b.matmul(&a).unwrap().scaled(0.5)).unwrap();
        let x: Vec<f64> = Tensor::uniform(vec![8], -1.0, 1.0, &mut r).into_data();
        let got = lora.forward(&x).unwrap();
        let want = dense.matvec(&x).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_bound_enforced() {
        let mut r = rng(3);
        let w0 = Tensor::zeros(vec![6, 8]);
        assert!(matches!(LoraAdapter::init(w0.clone(), 4, 16.0, &mut r), Err(Error::Config(_))));
        assert!(matches!(LoraAdapter::init(w0, 0, 16.0, &mut r), Err(Error::Config(_))));
    }

    #[test]
    fn zero_gates_are_uniform() {
        let ga = GatingNet::zeros(4, 32, 3);
        let gb = GatingNet::zeros(4, 32, 3);
        let (a, b) = compute_gates(&ga, &gb, &[1.0, -2.0, 0.5, 3.0], &[0.0; 4]).unwrap();
        for p in a.iter().chain(&b) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_expert_gate_is_one() {
        let mut r = rng(4);
        let ga = GatingNet::init(4, 8, 1, &mut r);
        let gb = GatingNet::init(4, 8, 1, &mut r);
        let (a, b) = compute_gates(&ga, &gb, &[0.3, 0.1, -0.2, 0.9], &[1.0; 4]).unwrap();
        assert_eq!(a, vec![1.0]);
        assert_eq!(b, vec![1.0]);
    }

    #[test]
    fn gates_match_straight_line_perceptron() {
        let mut r = rng(5);
        let net = GatingNet::init(6, 32, 3, &mut r);
        let x: Vec<f64> = Tensor::uniform(vec![6], -1.0, 1.0, &mut r).into_data();
        // Independent two-layer perceptron written out by hand.
        let mut hidden = [0.0; 32];
        for (j, h) in hidden.iter_mut().enumerate() {
            let mut s = net.b1.data()[j];
            for i in 0..6 {
                s += net.w1.at(j, i) * x[i];
            }
            *h = if s > 0.0 { s } else { 0.0 };
        }
        let mut logits = [0.0; 3];
        for (e, l) in logits.iter_mut().enumerate() {
            let mut s = net.b2.data()[e];
            for (j, h) in hidden.iter().enumerate() {
                s += net.w2.at(e, j) * h;
            }
            *l = s;
        }
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        let want: Vec<f64> = logits.iter().map(|l| (l - m).exp() / z).collect();
        let got = net.probs(&x).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn gates_reject_non_finite_features() {
        let net = GatingNet::zeros(2, 4, 3);
        assert!(matches!(net.probs(&[f64::NAN, 0.0]), Err(Error::NumericDomain(_))));
    }

    #[test]
    fn single_expert_reduces_to_lora() {
        let layer = random_layer(1, 6);
        let e = &layer.experts()[0];
        let lora =
            LoraAdapter::from_parts(layer.w0().clone(), e.a.clone(), e.b.clone(), layer.scale()).unwrap();
        let mut r = rng(7);
        for _ in 0..20 {
            let x = Tensor::uniform(vec![8], -1.0, 1.0, &mut r).into_data();
            let p = layer.forward(&x, &[1.0], &[1.0]).unwrap();
            let l = lora.forward(&x).unwrap();
            for (a, b) in p.iter().zip(&l) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_writing_experts_give_base_output() {
        let mut r = rng(8);
        let w0 = Tensor::uniform(vec![6, 8], -1.0, 1.0, &mut r);
        let layer = PacLoraLayer::init(w0.clone(), 3, 2, DEFAULT_ALPHA, 5, 7, &mut r).unwrap();
        let x = Tensor::uniform(vec![8], -1.0, 1.0, &mut r).into_data();
        let (ga, gb) = layer.compute_gates(&[0.1; 5], &[0.2; 5]).unwrap();
        assert_eq!(layer.forward(&x, &ga, &gb).unwrap(), w0.matvec(&x).unwrap());
    }

    #[test]
    fn three_experts_match_dense_oracle() {
        let layer = random_layer(3, 9);
        let mut r = rng(10);
        let x = Tensor::uniform(vec![8], -1.0, 1.0, &mut r).into_data();
        let ga = [0.2, 0.5, 0.3];
        let gb = [0.6, 0.1, 0.3];
        let mut dense = layer.w0().clone();
        for (i, e) in layer.experts().iter().enumerate() {
            let ba = e.b.matmul(&e.a).unwrap().scaled(ga[i] * gb[i] * layer.scale());
            dense = dense.add(&ba).unwrap();
        }
        let want = dense.matvec(&x).unwrap();
        let got = layer.forward(&x, &ga, &gb).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_gate_length_is_contract_error() {
        let layer = random_layer(3, 11);
        let x = [0.0; 8];
        assert!(matches!(
            layer.forward(&x, &[0.5, 0.5], &[0.2, 0.3, 0.5]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn expert_permutation_equivariance() {
        let layer = random_layer(3, 12);
        let perm = [2, 0, 1];
        let experts: Vec<Expert> = perm.iter().map(|&i| layer.experts()[i].clone()).collect();
        let permuted = PacLoraLayer::from_parts(
            layer.w0().clone(),
            experts,
            layer.gate_a().clone(),
            layer.gate_b().clone(),
            layer.scale(),
        )
        .unwrap();
        let ga = [0.2, 0.5, 0.3];
        let gb = [0.6, 0.1, 0.3];
        let pga: Vec<f64> = perm.iter().map(|&i| ga[i]).collect();
        let pgb: Vec<f64> = perm.iter().map(|&i| gb[i]).collect();
        let x = [0.4, -0.2, 0.9, 0.1, -0.7, 0.3, 0.0, 0.5];
        let a = layer.forward(&x, &ga, &gb).unwrap();
        let b = permuted.forward(&x, &pga, &pgb).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

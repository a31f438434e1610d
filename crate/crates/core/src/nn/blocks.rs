use crate::autodiff::Var;
use crate::error::{Error, Result};

use super::graph::Graph;
use super::layers::{Block, LinearLayer, Mode};
use super::store::{ParamId, ParamStore};

/// Stack of `Linear → BN → ReLU` blocks producing feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpEncoder {
    pub blocks: Vec<Block>,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl MlpEncoder {
    /// One block per entry of `widths`; the last width is the feature size.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        widths: &[usize],
    ) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) || input_dim == 0 {
            return Err(Error::Spec(format!(
                "encoder {name} needs positive widths, got input {input_dim} and {widths:?}"
            )));
        }
        let mut blocks = Vec::with_capacity(widths.len());
        let mut prev = input_dim;
        for (i, &w) in widths.iter().enumerate() {
            blocks.push(Block::new(store, &format!("{name}.{i}"), prev, w, true));
            prev = w;
        }
        Ok(MlpEncoder {
            blocks,
            input_dim,
            output_dim: prev,
        })
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        for b in &self.blocks {
            b.init(store, seed);
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(Block::params).collect()
    }

    pub fn buffers(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(Block::buffers).collect()
    }

    pub fn set_trainable(&self, store: &mut ParamStore, trainable: bool) {
        for id in self.params() {
            store.set_trainable(id, trainable);
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, mode: Mode) -> Result<Var> {
        let (_, c) = g.value(x).dims2()?;
        if c != self.input_dim {
            return Err(Error::Dimension(format!(
                "encoder expects input width {}, got {c}",
                self.input_dim
            )));
        }
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, h, mode)?;
        }
        Ok(h)
    }
}

/// Linear classifier producing raw logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub linear: LinearLayer,
}

impl ClassifierHead {
    pub fn new(store: &mut ParamStore, name: &str, features: usize, classes: usize) -> Self {
        ClassifierHead {
            linear: LinearLayer::new(store, name, features, classes, true),
        }
    }

    pub fn classes(&self) -> usize {
        self.linear.out_dim
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        self.linear.init(store, seed);
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.linear.params()
    }

    pub fn set_frozen(&self, store: &mut ParamStore, frozen: bool) {
        self.linear.set_trainable(store, !frozen);
    }

    pub fn is_frozen(&self, store: &ParamStore) -> bool {
        self.params().iter().all(|&id| !store.get(id).trainable)
    }

    pub fn forward(&self, g: &mut Graph<'_>, f: Var) -> Result<Var> {
        self.linear.forward(g, f)
    }
}

/// Residual branch: `m` blocks of `Linear → BN → ReLU` with the last ReLU
/// dropped so outputs can take either sign.
#[derive(Debug, Clone, PartialEq)]
pub struct ResMBranch {
    pub blocks: Vec<Block>,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl ResMBranch {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        m: usize,
    ) -> Result<Self> {
        if m == 0 || input_dim == 0 || hidden_dim == 0 || output_dim == 0 {
            return Err(Error::Spec(format!(
                "branch {name} needs m >= 1 and positive widths"
            )));
        }
        let mut blocks = Vec::with_capacity(m);
        let mut prev = input_dim;
        for i in 0..m {
            let last = i + 1 == m;
            let w = if last { output_dim } else { hidden_dim };
            blocks.push(Block::new(store, &format!("{name}.{i}"), prev, w, !last));
            prev = w;
        }
        Ok(ResMBranch {
            blocks,
            input_dim,
            output_dim,
        })
    }

    pub fn m(&self) -> usize {
        self.blocks.len()
    }

    /// Like the other blocks, except the final batch-norm scale starts at
    /// zero so a fresh branch outputs exactly zero. Zeroing the final linear
    /// layer instead would feed that batch norm a zero-variance batch and
    /// scale its input gradient by `1/sqrt(eps)`.
    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        for b in &self.blocks {
            b.init(store, seed);
        }
        if let Some(last) = self.blocks.last() {
            store.get_mut(last.bn.gamma).value.data_mut().fill(0.0);
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(Block::params).collect()
    }

    pub fn buffers(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(Block::buffers).collect()
    }

    pub fn forward(&self, g: &mut Graph<'_>, h: Var, mode: Mode) -> Result<Var> {
        let (_, c) = g.value(h).dims2()?;
        if c != self.input_dim {
            return Err(Error::Dimension(format!(
                "branch expects input width {}, got {c}",
                self.input_dim
            )));
        }
        let mut out = h;
        for b in &self.blocks {
            out = b.forward(g, out, mode)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Sgd, BN_EPS};
    use crate::tensor::Tensor;

    fn rows(r: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(r).unwrap()
    }

    fn probe(n: usize, c: usize) -> Tensor {
        let data = (0..n * c)
            .map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.3)
            .collect();
        Tensor::new(vec![n, c], data).unwrap()
    }

    fn set(store: &mut ParamStore, id: ParamId, t: Tensor) {
        store.set_value(id, t).unwrap();
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let build = |seed| {
            let mut s = ParamStore::new();
            let e = MlpEncoder::new(&mut s, "enc", 5, &[7, 3]).unwrap();
            e.init(&mut s, seed);
            s
        };
        assert_eq!(build(11), build(11));
        assert_ne!(build(11), build(12));
    }

    #[test]
    fn fresh_branch_outputs_exact_zero() {
        let mut s = ParamStore::new();
        let b = ResMBranch::new(&mut s, "b", 4, 6, 5, 2).unwrap();
        b.init(&mut s, 3);
        for mode in [Mode::Train, Mode::Eval] {
            let mut g = Graph::new(&mut s);
            let x = g.input(probe(6, 4)).unwrap();
            let y = b.forward(&mut g, x, mode).unwrap();
            assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn bn_eval_after_init_is_near_identity() {
        let mut s = ParamStore::new();
        let bn = crate::nn::BatchNormLayer::new(&mut s, "bn", 3);
        bn.init(&mut s);
        let mut g = Graph::new(&mut s);
        let xt = probe(4, 3);
        let x = g.input(xt.clone()).unwrap();
        let y = bn.forward(&mut g, x, Mode::Eval).unwrap();
        let k = 1.0 / (1.0 + BN_EPS).sqrt();
        for (a, b) in g.value(y).data().iter().zip(xt.data()) {
            assert!((a - b * k).abs() < 1e-15);
        }
    }

    #[test]
    fn eval_rows_are_independent_of_the_batch() {
        let mut s = ParamStore::new();
        let e = MlpEncoder::new(&mut s, "enc", 4, &[6, 3]).unwrap();
        e.init(&mut s, 5);
        // Move running statistics away from their initial values first.
        {
            let mut g = Graph::new(&mut s);
            let x = g.input(probe(8, 4)).unwrap();
            e.forward(&mut g, x, Mode::Train).unwrap();
        }
        let batch = probe(8, 4);
        let mut g = Graph::read_only(&s);
        let xb = g.input(batch.clone()).unwrap();
        let yb = e.forward(&mut g, xb, Mode::Eval).unwrap();
        assert_eq!(g.value(yb).shape(), &[8, 3]);
        let x1 = g.input(batch.select_rows(&[5]).unwrap()).unwrap();
        let y1 = e.forward(&mut g, x1, Mode::Eval).unwrap();
        let full = g.value(yb).row(5).to_vec();
        for (a, b) in g.value(y1).data().iter().zip(&full) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn encoder_rejects_wrong_width() {
        let mut s = ParamStore::new();
        let e = MlpEncoder::new(&mut s, "enc", 4, &[3]).unwrap();
        let mut g = Graph::new(&mut s);
        let x = g.input(probe(2, 5)).unwrap();
        assert!(matches!(
            e.forward(&mut g, x, Mode::Eval),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn linear_layer_matches_matmul_oracle() {
        let mut s = ParamStore::new();
        let l = LinearLayer::new(&mut s, "fc", 2, 2, true);
        set(&mut s, l.weight, rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        set(&mut s, l.bias.unwrap(), Tensor::vector(vec![0.5, -1.0]));
        let mut g = Graph::new(&mut s);
        let x = g.input(rows(&[vec![1.0, 1.0], vec![2.0, -1.0]])).unwrap();
        let y = l.forward(&mut g, x).unwrap();
        // W·x + b per row: (3, 7) + b and (0, 2) + b.
        assert_eq!(g.value(y).data(), &[3.5, 6.0, 0.5, 1.0]);
    }

    #[test]
    fn single_block_branch_is_a_signed_linear_map() {
        let mut s = ParamStore::new();
        let b = ResMBranch::new(&mut s, "b", 2, 2, 2, 1).unwrap();
        b.init(&mut s, 0);
        let blk = &b.blocks[0];
        set(
            &mut s,
            blk.linear.weight,
            rows(&[vec![1.0, -2.0], vec![0.5, 0.0]]),
        );
        set(&mut s, blk.bn.gamma, Tensor::vector(vec![1.0, 1.0]));
        let mut g = Graph::new(&mut s);
        let x = g.input(rows(&[vec![1.0, 1.0], vec![-2.0, 4.0]])).unwrap();
        let y = b.forward(&mut g, x, Mode::Eval).unwrap();
        let k = 1.0 / (1.0 + BN_EPS).sqrt();
        let want = [-k, 0.5 * k, -10.0 * k, -k];
        for (a, w) in g.value(y).data().iter().zip(want) {
            assert!((a - w).abs() < 1e-15);
        }
        assert!(g.value(y).data().iter().any(|&v| v < 0.0));
    }

    #[test]
    fn identity_head_returns_features() {
        let mut s = ParamStore::new();
        let h = ClassifierHead::new(&mut s, "h", 3, 3);
        set(&mut s, h.linear.weight, Tensor::identity(3));
        let f = probe(4, 3);
        let mut g = Graph::new(&mut s);
        let x = g.input(f.clone()).unwrap();
        let y = h.forward(&mut g, x).unwrap();
        assert!(g.value(y).bit_eq(&f));
    }

    #[test]
    fn hand_set_head_matches_matmul_oracle() {
        let mut s = ParamStore::new();
        let h = ClassifierHead::new(&mut s, "h", 2, 2);
        set(
            &mut s,
            h.linear.weight,
            rows(&[vec![2.0, 0.0], vec![-1.0, 3.0]]),
        );
        let mut g = Graph::new(&mut s);
        let x = g.input(rows(&[vec![1.0, 2.0]])).unwrap();
        let y = h.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 5.0]);
    }

    #[test]
    fn frozen_head_survives_optimizer_steps() {
        let mut s = ParamStore::new();
        let h = ClassifierHead::new(&mut s, "h", 3, 4);
        let other = LinearLayer::new(&mut s, "other", 3, 3, true);
        h.init(&mut s, 1);
        other.init(&mut s, 1);
        h.set_frozen(&mut s, true);
        assert!(h.is_frozen(&s));
        let before = s.clone();
        let opt = Sgd {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
        };
        for _ in 0..100 {
            let grads = {
                let mut g = Graph::new(&mut s);
                let x = g.input(probe(5, 3)).unwrap();
                let z = other.forward(&mut g, x).unwrap();
                let y = h.forward(&mut g, z).unwrap();
                let sq = g.tape.mul(y, y).unwrap();
                let l = g.tape.mean(sq).unwrap();
                g.backward(l).unwrap()
            };
            opt.step(&mut s, &grads).unwrap();
        }
        for id in h.params() {
            assert!(s.value(id).bit_eq(before.value(id)));
        }
        assert!(!s.value(other.weight).bit_eq(before.value(other.weight)));
    }

    #[test]
    fn train_mode_bn_needs_two_rows() {
        let mut s = ParamStore::new();
        let e = MlpEncoder::new(&mut s, "enc", 2, &[2]).unwrap();
        let mut g = Graph::new(&mut s);
        let x = g.input(probe(1, 2)).unwrap();
        assert!(e.forward(&mut g, x, Mode::Train).is_err());
    }

    #[test]
    fn read_only_graph_rejects_train_mode() {
        let mut s = ParamStore::new();
        let e = MlpEncoder::new(&mut s, "enc", 2, &[2]).unwrap();
        let mut g = Graph::read_only(&s);
        let x = g.input(probe(4, 2)).unwrap();
        assert!(matches!(
            e.forward(&mut g, x, Mode::Train),
            Err(Error::State(_))
        ));
    }
}

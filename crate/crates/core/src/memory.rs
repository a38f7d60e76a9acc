//! Episodic memory over encoded facts: a learned question vector, soft attention
//! conditioned on the question and the previous memory, and a ReLU memory update.

use rand::Rng;

use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Result, Tape, TensorError, Var};

/// Facts of a batch laid out as `K` slots per example.
#[derive(Clone, Debug)]
pub struct Facts {
    /// `[B·K × d]`, row `b·K + k` is slot `k` of example `b`.
    pub rows: Var,
    /// Same values viewed as `[B × K × d]`.
    pub items: Var,
    /// `[B × K]`, `false` for padding and unused history slots.
    pub mask: Vec<bool>,
    pub batch: usize,
    pub slots: usize,
}

impl Facts {
    /// Builds facts from `K` slot tensors of shape `[B × d]`.
    pub fn from_slots(tape: &mut Tape, slots: &[Var], mask: Vec<bool>) -> Result<Self> {
        let first = slots.first().ok_or_else(|| TensorError::Invalid {
            op: "facts",
            msg: "no fact slots".into(),
        })?;
        let (batch, dim) = (tape.shape(*first)[0], tape.shape(*first)[1]);
        let k = slots.len();
        if mask.len() != batch * k {
            return Err(TensorError::Invalid {
                op: "facts",
                msg: format!("mask has {} entries for {}×{} facts", mask.len(), batch, k),
            });
        }
        let wide = tape.concat(slots, 1)?;
        let rows = tape.reshape(wide, &[batch * k, dim])?;
        let items = tape.reshape(wide, &[batch, k, dim])?;
        Ok(Facts {
            rows,
            items,
            mask,
            batch,
            slots: k,
        })
    }

    /// Builds facts from rows already laid out as `[B·K × d]`.
    pub fn from_rows(tape: &mut Tape, rows: Var, batch: usize, slots: usize, mask: Vec<bool>) -> Result<Self> {
        let dim = tape.shape(rows)[1];
        if mask.len() != batch * slots || tape.shape(rows)[0] != batch * slots {
            return Err(TensorError::Invalid {
                op: "facts",
                msg: format!("expected {} fact rows and mask entries", batch * slots),
            });
        }
        let items = tape.reshape(rows, &[batch, slots, dim])?;
        Ok(Facts {
            rows,
            items,
            mask,
            batch,
            slots,
        })
    }
}

#[derive(Clone, Debug)]
pub struct EpisodicMemory {
    pub question: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub w3: ParamId,
    pub b3: ParamId,
    pub dim: usize,
}

/// Result of [`EpisodicMemory::run_episodes`].
#[derive(Clone, Debug)]
pub struct Episodes {
    /// Final memory `[B × d]`.
    pub memory: Var,
    /// Attention weights `[B × K]`, one per pass.
    pub attention: Vec<Var>,
    /// The question vector repeated per example, `[B × d]`.
    pub question_rows: Var,
}

impl EpisodicMemory {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        attention_dim: usize,
        range: f64,
        rng: &mut R,
    ) -> Self {
        EpisodicMemory {
            question: store.add_uniform("memory.q", &[dim], range, rng),
            w1: store.add_uniform("attention.W1", &[attention_dim, 2 * dim], range, rng),
            b1: store.add_uniform("attention.b1", &[attention_dim], range, rng),
            w2: store.add_uniform("attention.W2", &[1, attention_dim], range, rng),
            b2: store.add_uniform("attention.b2", &[1], range, rng),
            w3: store.add_uniform("memory.W3", &[dim, 3 * dim], range, rng),
            b3: store.add_uniform("memory.b3", &[dim], range, rng),
            dim,
        }
    }

    /// `[B × d]` copies of the question vector.
    pub fn question_rows(&self, tape: &mut Tape, p: &Bound, batch: usize) -> Result<Var> {
        let q = tape.reshape(p[self.question], &[1, self.dim])?;
        tape.gather_rows(q, &vec![0; batch])
    }

    /// Attention weights `[B × K]` for one pass given the previous memory `[B × d]`.
    ///
    /// `zᵢ = [eᵢ∘q ; eᵢ∘m]`, `βᵢ = W2·tanh(W1·zᵢ + b1) + b2`, softmax over unmasked facts.
    pub fn attention_gates(&self, tape: &mut Tape, p: &Bound, facts: &Facts, memory: Var) -> Result<Var> {
        let repeat: Vec<usize> = (0..facts.batch).flat_map(|b| std::iter::repeat_n(b, facts.slots)).collect();
        let mem_rows = tape.gather_rows(memory, &repeat)?;
        let with_q = tape.mul(facts.rows, p[self.question])?;
        let with_m = tape.mul(facts.rows, mem_rows)?;
        let z = tape.concat(&[with_q, with_m], 1)?;
        let hidden = tape.linear(z, p[self.w1], p[self.b1])?;
        let hidden = tape.tanh(hidden);
        let scores = tape.linear(hidden, p[self.w2], p[self.b2])?;
        let scores = tape.reshape(scores, &[facts.batch, facts.slots])?;
        tape.softmax(scores, 1, Some(&facts.mask))
    }

    /// `m' = ReLU(W3·[m; c; q] + b3)`
    pub fn memory_update(&self, tape: &mut Tape, p: &Bound, memory: Var, context: Var, question_rows: Var) -> Result<Var> {
        let joined = tape.concat(&[memory, context, question_rows], 1)?;
        let pre = tape.linear(joined, p[self.w3], p[self.b3])?;
        Ok(tape.relu(pre))
    }

    /// Runs `passes` attention/update rounds starting from `m₀ = q`.
    pub fn run_episodes(&self, tape: &mut Tape, p: &Bound, facts: &Facts, passes: usize) -> Result<Episodes> {
        if passes == 0 {
            return Err(TensorError::Invalid {
                op: "run_episodes",
                msg: "at least one memory pass is required".into(),
            });
        }
        let question_rows = self.question_rows(tape, p, facts.batch)?;
        let mut memory = question_rows;
        let mut attention = Vec::with_capacity(passes);
        for _ in 0..passes {
            let alpha = self.attention_gates(tape, p, facts, memory)?;
            let context = context_vector(tape, alpha, facts)?;
            memory = self.memory_update(tape, p, memory, context, question_rows)?;
            attention.push(alpha);
        }
        Ok(Episodes {
            memory,
            attention,
            question_rows,
        })
    }
}

/// `c = Σᵢ αᵢ eᵢ` per example.
pub fn context_vector(tape: &mut Tape, alpha: Var, facts: &Facts) -> Result<Var> {
    tape.weighted_sum(alpha, facts.items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(dim: usize, seed: u64, range: f64) -> (ParamStore, EpisodicMemory) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mem = EpisodicMemory::new(&mut store, dim, dim, range, &mut rng);
        (store, mem)
    }

    fn facts_from(tape: &mut Tape, batch: usize, slots: &[Vec<f64>], dim: usize, mask: Vec<bool>) -> Facts {
        // slots[k] holds batch rows of width dim
        let vars: Vec<Var> = slots
            .iter()
            .map(|s| tape.constant(Tensor::new(vec![batch, dim], s.clone()).unwrap()))
            .collect();
        Facts::from_slots(tape, &vars, mask).unwrap()
    }

    // ---- scalar oracle for the attention and memory recursions ----

    struct Plain {
        q: Vec<f64>,
        w1: Vec<Vec<f64>>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: f64,
        w3: Vec<Vec<f64>>,
        b3: Vec<f64>,
    }

    impl Plain {
        fn from(store: &ParamStore, m: &EpisodicMemory) -> Self {
            let rows = |id: ParamId| {
                let t = store.get(id);
                t.data().chunks(t.shape()[1]).map(<[f64]>::to_vec).collect::<Vec<_>>()
            };
            Plain {
                q: store.get(m.question).data().to_vec(),
                w1: rows(m.w1),
                b1: store.get(m.b1).data().to_vec(),
                w2: store.get(m.w2).data().to_vec(),
                b2: store.get(m.b2).data()[0],
                w3: rows(m.w3),
                b3: store.get(m.b3).data().to_vec(),
            }
        }

        fn alpha(&self, facts: &[Vec<f64>], mem: &[f64]) -> Vec<f64> {
            let beta: Vec<f64> = facts
                .iter()
                .map(|e| {
                    let mut z: Vec<f64> = e.iter().zip(&self.q).map(|(a, b)| a * b).collect();
                    z.extend(e.iter().zip(mem).map(|(a, b)| a * b));
                    let mut s = self.b2;
                    for (i, row) in self.w1.iter().enumerate() {
                        let h: f64 = row.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() + self.b1[i];
                        s += self.w2[i] * h.tanh();
                    }
                    s
                })
                .collect();
            let denom: f64 = beta.iter().map(|b| b.exp()).sum();
            beta.iter().map(|b| b.exp() / denom).collect()
        }

        fn update(&self, mem: &[f64], c: &[f64]) -> Vec<f64> {
            let joined: Vec<f64> = mem.iter().chain(c).chain(&self.q).copied().collect();
            self.w3
                .iter()
                .zip(&self.b3)
                .map(|(row, b)| (row.iter().zip(&joined).map(|(x, y)| x * y).sum::<f64>() + b).max(0.0))
                .collect()
        }

        fn run(&self, facts: &[Vec<f64>], passes: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
            let mut mem = self.q.clone();
            let mut alphas = Vec::new();
            for _ in 0..passes {
                let a = self.alpha(facts, &mem);
                let d = mem.len();
                let c: Vec<f64> = (0..d).map(|j| facts.iter().zip(&a).map(|(e, w)| w * e[j]).sum()).collect();
                mem = self.update(&mem, &c);
                alphas.push(a);
            }
            (mem, alphas)
        }
    }

    #[test]
    fn identical_facts_get_equal_weight() {
        let (store, mem) = setup(3, 1, 0.5);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let f = vec![0.3, -0.2, 0.9];
        let facts = facts_from(&mut tape, 1, &[f.clone(), f], 3, vec![true, true]);
        let q = mem.question_rows(&mut tape, &p, 1).unwrap();
        let a = mem.attention_gates(&mut tape, &p, &facts, q).unwrap();
        assert_eq!(tape.value(a).data(), &[0.5, 0.5]);
    }

    #[test]
    fn constant_scores_are_uniform_over_unmasked() {
        let (mut store, mem) = setup(2, 2, 0.5);
        store.get_mut(mem.w2).data_mut().fill(0.0);
        store.get_mut(mem.b2).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let slots = vec![vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.5]];
        let facts = facts_from(&mut tape, 1, &slots, 2, vec![true, false, true]);
        let q = mem.question_rows(&mut tape, &p, 1).unwrap();
        let a = mem.attention_gates(&mut tape, &p, &facts, q).unwrap();
        assert_eq!(tape.value(a).data(), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn all_masked_is_an_error() {
        let (store, mem) = setup(2, 3, 0.5);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let facts = facts_from(&mut tape, 1, &[vec![1.0, 2.0]], 2, vec![false]);
        let q = mem.question_rows(&mut tape, &p, 1).unwrap();
        assert!(mem.attention_gates(&mut tape, &p, &facts, q).is_err());
    }

    #[test]
    fn attention_matches_scalar_oracle() {
        let (store, mem) = setup(4, 4, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let slots: Vec<Vec<f64>> = (0..3).map(|_| Tensor::uniform(&[4], 1.0, &mut rng).into_data()).collect();
        let m_prev = Tensor::uniform(&[4], 1.0, &mut rng).into_data();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let facts = facts_from(&mut tape, 1, &slots, 4, vec![true; 3]);
        let m = tape.constant(Tensor::new(vec![1, 4], m_prev.clone()).unwrap());
        let a = mem.attention_gates(&mut tape, &p, &facts, m).unwrap();
        let oracle = Plain::from(&store, &mem).alpha(&slots, &m_prev);
        for (x, y) in tape.value(a).data().iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn context_vector_examples() {
        let mut tape = Tape::new();
        let facts = facts_from(&mut tape, 1, &[vec![0.0, 0.0], vec![4.0, 8.0]], 2, vec![true, true]);
        let a = tape.constant(Tensor::matrix(&[&[0.25, 0.75]]));
        let c = context_vector(&mut tape, a, &facts).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 6.0]);
        let onehot = tape.constant(Tensor::matrix(&[&[0.0, 1.0]]));
        let c = context_vector(&mut tape, onehot, &facts).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 8.0]);
        let same = facts_from(&mut tape, 1, &[vec![1.5, -2.0], vec![1.5, -2.0]], 2, vec![true, true]);
        let u = tape.constant(Tensor::matrix(&[&[0.5, 0.5]]));
        let c = context_vector(&mut tape, u, &same).unwrap();
        assert_eq!(tape.value(c).data(), &[1.5, -2.0]);
    }

    #[test]
    fn memory_update_clamps_and_passes_bias() {
        let (mut store, mem) = setup(2, 5, 0.5);
        store.get_mut(mem.w3).data_mut().fill(0.0);
        let mut tape = Tape::new();
        store.get_mut(mem.b3).data_mut().fill(-1.0);
        let p = store.bind(&mut tape);
        let m = tape.constant(Tensor::matrix(&[&[0.3, 0.4]]));
        let c = tape.constant(Tensor::matrix(&[&[0.1, -0.4]]));
        let q = mem.question_rows(&mut tape, &p, 1).unwrap();
        let out = mem.memory_update(&mut tape, &p, m, c, q).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 0.0]);

        store.get_mut(mem.b3).data_mut().fill(2.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let m = tape.constant(Tensor::matrix(&[&[0.3, 0.4]]));
        let c = tape.constant(Tensor::matrix(&[&[0.1, -0.4]]));
        let q = mem.question_rows(&mut tape, &p, 1).unwrap();
        let out = mem.memory_update(&mut tape, &p, m, c, q).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0, 2.0]);
    }

    #[test]
    fn memory_update_is_nonnegative_over_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for seed in 0..1000 {
            let (store, mem) = setup(3, seed, 1.0);
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let m = tape.constant(Tensor::uniform(&[2, 3], 2.0, &mut rng));
            let c = tape.constant(Tensor::uniform(&[2, 3], 2.0, &mut rng));
            let q = mem.question_rows(&mut tape, &p, 2).unwrap();
            let out = mem.memory_update(&mut tape, &p, m, c, q).unwrap();
            assert!(tape.value(out).data().iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn episodes_match_scalar_recursion() {
        let (store, mem) = setup(3, 7, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let slots: Vec<Vec<f64>> = (0..2).map(|_| Tensor::uniform(&[3], 1.0, &mut rng).into_data()).collect();
        for passes in [1, 3] {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let facts = facts_from(&mut tape, 1, &slots, 3, vec![true, true]);
            let ep = mem.run_episodes(&mut tape, &p, &facts, passes).unwrap();
            assert_eq!(ep.attention.len(), passes);
            let (m_oracle, a_oracle) = Plain::from(&store, &mem).run(&slots, passes);
            for (x, y) in tape.value(ep.memory).data().iter().zip(&m_oracle) {
                assert!((x - y).abs() < 1e-12);
            }
            for (a, o) in ep.attention.iter().zip(&a_oracle) {
                for (x, y) in tape.value(*a).data().iter().zip(o) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let facts = facts_from(&mut tape, 1, &slots, 3, vec![true, true]);
        assert!(mem.run_episodes(&mut tape, &p, &facts, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn permuting_facts_permutes_attention(seed in 0u64..10_000) {
            let (store, mem) = setup(3, seed, 0.9);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let slots: Vec<Vec<f64>> = (0..4).map(|_| Tensor::uniform(&[3], 1.0, &mut rng).into_data()).collect();
            let mask = vec![true, false, true, true];
            let perm = [2usize, 0, 3, 1];
            let run = |slots: &[Vec<f64>], mask: Vec<bool>| {
                let mut tape = Tape::new();
                let p = store.bind(&mut tape);
                let facts = facts_from(&mut tape, 1, slots, 3, mask);
                let ep = mem.run_episodes(&mut tape, &p, &facts, 3).unwrap();
                let alphas: Vec<Vec<f64>> = ep.attention.iter().map(|a| tape.value(*a).data().to_vec()).collect();
                (tape.value(ep.memory).data().to_vec(), alphas)
            };
            let (m1, a1) = run(&slots, mask.clone());
            let ps: Vec<Vec<f64>> = perm.iter().map(|&i| slots[i].clone()).collect();
            let pm: Vec<bool> = perm.iter().map(|&i| mask[i]).collect();
            let (m2, a2) = run(&ps, pm);
            for (x, y) in m1.iter().zip(&m2) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            for (r1, r2) in a1.iter().zip(&a2) {
                prop_assert_eq!(r1[1], 0.0);
                prop_assert!((r1.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for (k, &i) in perm.iter().enumerate() {
                    prop_assert!((r2[k] - r1[i]).abs() < 1e-12);
                }
            }
        }
    }
}

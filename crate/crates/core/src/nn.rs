//! Named parameters and the layers built from tape primitives.
//!
//! Names follow a dotted scheme such as `encoder.block1.conv2.weight` or
//! `decoder.d5.global.renet.h.fwd.w_hidden`. Registration order is the
//! checkpoint order, so it must not depend on hash iteration.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{LstmWeights, Mode, RunningStats};
use crate::tensor::{Float, Tensor};

/// Optimizer group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    Encoder,
    Decoder,
}

#[derive(Clone, Debug)]
pub struct Entry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub group: Group,
    /// `false` for buffers such as batch-norm running statistics.
    pub trainable: bool,
}

/// Ordered map from parameter name to tensor.
#[derive(Clone, Debug, Default)]
pub struct ParamRegistry<T> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> ParamRegistry<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, group: Group, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Entry { name, tensor, group, trainable });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Entry<T>] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].tensor)
    }

    pub fn entry(&self, name: &str) -> Option<&Entry<T>> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.tensor.len()).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamRegistry<U> {
        ParamRegistry {
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), tensor: e.tensor.cast(), group: e.group, trainable: e.trainable })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Record every trainable tensor as a parameter leaf on `tape`, and load
    /// batch-norm buffers into running-stat states.
    pub fn bind(&self, tape: &mut Tape<T>) -> Binding<T> {
        let vars: Vec<Var> = self.entries.iter().filter(|e| e.trainable).map(|e| tape.param(e.tensor.clone())).collect();
        self.bind_with(&vars).expect("one leaf per trainable entry")
    }

    /// As [`bind`](Self::bind), with the leaves already recorded: `vars[k]`
    /// stands for the k-th trainable entry.
    pub fn bind_with(&self, vars: &[Var]) -> Result<Binding<T>> {
        let expected = self.entries.iter().filter(|e| e.trainable).count();
        if vars.len() != expected {
            return Err(Error::config(format!("bind_with got {} leaves for {expected} trainable tensors", vars.len())));
        }
        let mut map = HashMap::new();
        let mut order = Vec::new();
        let mut bn = HashMap::new();
        let mut next = vars.iter();
        for e in &self.entries {
            if e.trainable {
                let v = *next.next().expect("counted above");
                map.insert(e.name.clone(), v);
                order.push((e.name.clone(), v));
            } else if let Some(prefix) = e.name.strip_suffix(".running_mean") {
                if let Some(var) = self.get(&format!("{prefix}.running_var")) {
                    bn.insert(prefix.to_string(), RunningStats { mean: e.tensor.data().to_vec(), var: var.data().to_vec() });
                }
            }
        }
        Ok(Binding { vars: map, order, bn })
    }
}

/// Parameters of one forward pass, as recorded on a tape.
pub struct Binding<T> {
    vars: HashMap<String, Var>,
    order: Vec<(String, Var)>,
    bn: HashMap<String, RunningStats<T>>,
}

impl<T: Float> Binding<T> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Parameter leaves in registry order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.order
    }

    pub fn bn_state(&mut self, prefix: &str) -> Result<&mut RunningStats<T>> {
        self.bn.get_mut(prefix).ok_or_else(|| Error::config(format!("missing batch-norm buffers for `{prefix}`")))
    }

    /// Copy running statistics back into the registry after a train-mode pass.
    pub fn store_bn(&self, registry: &mut ParamRegistry<T>) {
        for (prefix, stats) in &self.bn {
            if let Some(t) = registry.get_mut(&format!("{prefix}.running_mean")) {
                t.data_mut().copy_from_slice(&stats.mean);
            }
            if let Some(t) = registry.get_mut(&format!("{prefix}.running_var")) {
                t.data_mut().copy_from_slice(&stats.var);
            }
        }
    }
}

/// Seeded initializer for registered parameters.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn uniform<T: Float>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::lit(self.rng.random_range(-bound..bound)))
    }

    /// Square matrix with orthonormal columns (Gram–Schmidt on a Gaussian draw).
    pub fn orthogonal(&mut self, n: usize) -> Vec<f64> {
        loop {
            let mut cols: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| self.rng.sample(StandardNormal)).collect()).collect();
            let mut degenerate = false;
            for j in 0..n {
                for _ in 0..2 {
                    for k in 0..j {
                        let dot: f64 = cols[j].iter().zip(&cols[k]).map(|(a, b)| a * b).sum();
                        let (head, tail) = cols.split_at_mut(j);
                        tail[0].iter_mut().zip(&head[k]).for_each(|(a, b)| *a -= dot * b);
                    }
                }
                let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < 1e-6 {
                    degenerate = true;
                    break;
                }
                cols[j].iter_mut().for_each(|v| *v /= norm);
            }
            if !degenerate {
                // row-major matrix whose columns are `cols`
                return (0..n * n).map(|i| cols[i % n][i / n]).collect();
            }
        }
    }
}

/// Fan-in uniform bound used for convolution kernels.
pub fn conv_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

pub fn register_conv<T: Float>(
    reg: &mut ParamRegistry<T>,
    init: &mut Init,
    prefix: &str,
    c_out: usize,
    c_in: usize,
    kernel: usize,
    group: Group,
) -> Result<()> {
    register_conv_weight(reg, init, prefix, c_out, c_in, kernel, group)?;
    reg.insert(format!("{prefix}.bias"), Tensor::zeros(&[c_out]), group, true)
}

/// Kernel only, for convs feeding a train-mode batch norm, where a bias
/// would be cancelled by the mean subtraction.
pub fn register_conv_weight<T: Float>(
    reg: &mut ParamRegistry<T>,
    init: &mut Init,
    prefix: &str,
    c_out: usize,
    c_in: usize,
    kernel: usize,
    group: Group,
) -> Result<()> {
    let bound = conv_bound(c_in * kernel * kernel);
    reg.insert(format!("{prefix}.weight"), init.uniform(&[c_out, c_in, kernel, kernel], bound), group, true)
}

pub fn register_bn<T: Float>(reg: &mut ParamRegistry<T>, prefix: &str, channels: usize, group: Group) -> Result<()> {
    reg.insert(format!("{prefix}.gamma"), Tensor::ones(&[channels]), group, true)?;
    reg.insert(format!("{prefix}.beta"), Tensor::zeros(&[channels]), group, true)?;
    reg.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]), group, false)?;
    reg.insert(format!("{prefix}.running_var"), Tensor::ones(&[channels]), group, false)
}

/// One LSTM direction: input weights fan-based uniform, each of the four
/// recurrent gate blocks orthogonal, forget-gate bias 1.
pub fn register_lstm<T: Float>(
    reg: &mut ParamRegistry<T>,
    init: &mut Init,
    prefix: &str,
    input: usize,
    hidden: usize,
    group: Group,
) -> Result<()> {
    let bound = (6.0 / (input + hidden) as f64).sqrt();
    reg.insert(format!("{prefix}.w_input"), init.uniform(&[input, 4 * hidden], bound), group, true)?;
    let mut w_hidden = vec![T::zero(); hidden * 4 * hidden];
    for gate in 0..4 {
        let q = init.orthogonal(hidden);
        for r in 0..hidden {
            for c in 0..hidden {
                w_hidden[r * 4 * hidden + gate * hidden + c] = T::lit(q[r * hidden + c]);
            }
        }
    }
    reg.insert(format!("{prefix}.w_hidden"), Tensor::from_vec(&[hidden, 4 * hidden], w_hidden)?, group, true)?;
    let bias = Tensor::from_fn(&[4 * hidden], |j| if j / hidden == 1 { T::one() } else { T::zero() });
    reg.insert(format!("{prefix}.bias"), bias, group, true)
}

pub fn register_bilstm<T: Float>(
    reg: &mut ParamRegistry<T>,
    init: &mut Init,
    prefix: &str,
    input: usize,
    hidden: usize,
    group: Group,
) -> Result<()> {
    register_lstm(reg, init, &format!("{prefix}.fwd"), input, hidden, group)?;
    register_lstm(reg, init, &format!("{prefix}.bwd"), input, hidden, group)
}

pub fn lstm_weights<T: Float>(bind: &Binding<T>, prefix: &str) -> Result<LstmWeights> {
    Ok(LstmWeights {
        w_input: bind.var(&format!("{prefix}.w_input"))?,
        w_hidden: bind.var(&format!("{prefix}.w_hidden"))?,
        bias: bind.var(&format!("{prefix}.bias"))?,
    })
}

/// Convolution using `{prefix}.weight` / `{prefix}.bias`, "same" padding
/// for the given dilation.
pub fn conv<T: Float>(tape: &mut Tape<T>, bind: &Binding<T>, prefix: &str, x: Var, dilation: usize) -> Result<Var> {
    let weight = bind.var(&format!("{prefix}.weight"))?;
    let bias = bind.get(&format!("{prefix}.bias"));
    let k = tape.shape(weight)[2];
    tape.conv2d(x, weight, bias, 1, dilation, dilation * (k - 1) / 2)
}

pub fn batch_norm<T: Float>(tape: &mut Tape<T>, bind: &mut Binding<T>, prefix: &str, x: Var, mode: Mode) -> Result<Var> {
    let gamma = bind.var(&format!("{prefix}.gamma"))?;
    let beta = bind.var(&format!("{prefix}.beta"))?;
    let state = bind.bn_state(prefix)?;
    tape.batch_norm(x, gamma, beta, mode, state)
}

/// Bidirectional LSTM over a sequence of B×in rows. Each output is the
/// forward and backward hidden states at that position, concatenated
/// (B×2·hidden).
pub fn bilstm_scan<T: Float>(tape: &mut Tape<T>, seq: &[Var], forward: &LstmWeights, backward: &LstmWeights) -> Result<Vec<Var>> {
    let first = *seq.first().ok_or_else(|| Error::config("bilstm_scan over an empty sequence"))?;
    let batch = tape.shape(first)[0];
    let hidden = tape.shape(forward.w_hidden)[0];
    let run = |tape: &mut Tape<T>, order: &mut dyn Iterator<Item = usize>, w: &LstmWeights| -> Result<Vec<(usize, Var)>> {
        // packed [h | c] state
        let mut state = tape.constant(Tensor::zeros(&[batch, 2 * hidden]));
        let mut out = Vec::with_capacity(seq.len());
        for t in order {
            state = tape.lstm_step(seq[t], state, w)?;
            out.push((t, tape.slice(state, 1, 0, hidden)?));
        }
        Ok(out)
    };
    let fwd = run(tape, &mut (0..seq.len()), forward)?;
    let mut bwd = run(tape, &mut (0..seq.len()).rev(), backward)?;
    bwd.reverse();
    fwd.into_iter().zip(bwd).map(|((_, hf), (_, hb))| tape.concat(&[hf, hb], 1)).collect()
}

/// Seeded random tensors for tests and gradient checks.
pub fn random_tensor<T: Float>(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-scale..scale)))
}

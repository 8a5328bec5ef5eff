//! Transformer building blocks assembled from tape primitives. All take
//! token matrices shaped [tokens, channels] and resolve their weights from a
//! [`ParamStore`] by name, so the same code serves every decoder layout.

use crate::autodiff::{ParamStore, Scalar, Staged, Tape, Var};

/// Name-to-variable resolver for one staged parameter store.
pub struct Stage<'a, S: Scalar> {
    store: &'a ParamStore<S>,
    staged: &'a Staged,
}

impl<'a, S: Scalar> Stage<'a, S> {
    pub fn new(store: &'a ParamStore<S>, staged: &'a Staged) -> Self {
        Stage { store, staged }
    }

    pub fn var(&self, name: &str) -> Var {
        let id = self
            .store
            .by_name(name)
            .unwrap_or_else(|| panic!("parameter {name} not found"));
        self.staged.var(id)
    }
}

/// x W + b for x [n, in], W [in, out], b [1, out].
pub fn linear<S: Scalar>(tape: &mut Tape<S>, st: &Stage<S>, prefix: &str, x: Var) -> Var {
    let w = st.var(&format!("{prefix}.w"));
    let b = st.var(&format!("{prefix}.b"));
    let y = tape.matmul(x, w);
    tape.add(y, b)
}

pub fn layer_norm<S: Scalar>(tape: &mut Tape<S>, st: &Stage<S>, prefix: &str, x: Var) -> Var {
    let g = st.var(&format!("{prefix}.g"));
    let b = st.var(&format!("{prefix}.b"));
    tape.layer_norm(x, g, b)
}

/// Multi-head attention: queries [n_q, C] attend over keys/values [n_kv, C].
/// Weights live under `{prefix}.{q,k,v,o}`.
pub fn attention<S: Scalar>(
    tape: &mut Tape<S>,
    st: &Stage<S>,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    heads: usize,
) -> Var {
    let channels = tape.val(q_in).cols();
    assert_eq!(channels % heads, 0, "channels must split evenly across heads");
    let head_dim = channels / heads;

    let q = linear(tape, st, &format!("{prefix}.q"), q_in);
    let k = linear(tape, st, &format!("{prefix}.k"), kv_in);
    let v = linear(tape, st, &format!("{prefix}.v"), kv_in);

    let scale = S::from_f64(1.0 / (head_dim as f64).sqrt());
    let mut ctx = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim);
        let kh = tape.slice_cols(k, h * head_dim, head_dim);
        let vh = tape.slice_cols(v, h * head_dim, head_dim);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scaled = tape.scale(scores, scale);
        let attn = tape.softmax(scaled);
        ctx.push(tape.matmul(attn, vh));
    }
    let merged = tape.concat(1, &ctx);
    linear(tape, st, &format!("{prefix}.o"), merged)
}

/// Position-wise feed-forward: fc1 -> relu -> fc2, hidden = 4x channels.
pub fn feed_forward<S: Scalar>(tape: &mut Tape<S>, st: &Stage<S>, prefix: &str, x: Var) -> Var {
    let h = linear(tape, st, &format!("{prefix}1"), x);
    let h = tape.relu(h);
    linear(tape, st, &format!("{prefix}2"), h)
}

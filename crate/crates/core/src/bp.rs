//! Sum-product belief propagation with a flooding schedule.
//!
//! Check-to-variable messages use the tanh rule
//! `r = 2 atanh(prod_{other} tanh(q / 2))`; all messages are clamped to
//! `+-LLR_CLAMP`. LLRs follow the AWGN convention `2y / sigma^2`, so a
//! positive value favours bit 0.

use crate::gf2::{CodeError, ParityCheckMatrix};

pub const LLR_CLAMP: f64 = 30.0;
pub const DEFAULT_ITERATIONS: usize = 5;

/// Edges sorted by check; each view lists edge indices.
#[derive(Clone, Debug, PartialEq)]
pub struct TannerGraph {
    n: usize,
    check_edges: Vec<std::ops::Range<usize>>,
    edge_var: Vec<usize>,
    edge_check: Vec<usize>,
    var_edges: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BpResult {
    pub word: Vec<u8>,
    /// The returned word has zero syndrome.
    pub converged: bool,
    pub iterations: usize,
    /// Final posterior LLRs.
    pub posterior: Vec<f64>,
}

impl TannerGraph {
    pub fn new(h: &ParityCheckMatrix) -> Self {
        let m = h.matrix();
        let n = m.cols();
        let mut check_edges = Vec::with_capacity(m.rows());
        let (mut edge_var, mut edge_check) = (Vec::new(), Vec::new());
        let mut var_edges = vec![Vec::new(); n];
        for c in 0..m.rows() {
            let start = edge_var.len();
            for (v, &bit) in m.row(c).iter().enumerate() {
                if bit == 1 {
                    var_edges[v].push(edge_var.len());
                    edge_var.push(v);
                    edge_check.push(c);
                }
            }
            check_edges.push(start..edge_var.len());
        }
        Self {
            n,
            check_edges,
            edge_var,
            edge_check,
            var_edges,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn checks(&self) -> usize {
        self.check_edges.len()
    }

    pub fn edges(&self) -> usize {
        self.edge_var.len()
    }

    /// Variables attached to check `c`, ascending.
    pub fn check_neighbors(&self, c: usize) -> Vec<usize> {
        self.check_edges[c].clone().map(|e| self.edge_var[e]).collect()
    }

    /// Checks attached to variable `v`, ascending.
    pub fn var_neighbors(&self, v: usize) -> Vec<usize> {
        self.var_edges[v].iter().map(|&e| self.edge_check[e]).collect()
    }

    fn syndrome_is_zero(&self, word: &[u8]) -> bool {
        self.check_edges
            .iter()
            .all(|r| r.clone().fold(0u8, |acc, e| acc ^ word[self.edge_var[e]]) == 0)
    }

    /// Decodes channel LLRs. With `max_iters = 0` this is the hard decision
    /// of the input.
    pub fn decode(&self, llr: &[f64], max_iters: usize) -> Result<BpResult, CodeError> {
        if llr.len() != self.n {
            return Err(CodeError::LengthMismatch {
                expected: self.n,
                got: llr.len(),
            });
        }
        let clamp = |x: f64| x.clamp(-LLR_CLAMP, LLR_CLAMP);
        let channel: Vec<f64> = llr.iter().map(|&x| clamp(x)).collect();
        let hard = |post: &[f64]| post.iter().map(|&p| u8::from(p < 0.0)).collect::<Vec<u8>>();
        let mut q: Vec<f64> = self.edge_var.iter().map(|&v| channel[v]).collect();
        let mut r = vec![0.0; self.edges()];
        let mut post = channel.clone();
        let mut word = hard(&post);
        let mut tanh = Vec::new();
        let mut suffix = Vec::new();
        for it in 1..=max_iters {
            for range in &self.check_edges {
                tanh.clear();
                tanh.extend(q[range.clone()].iter().map(|&x| (x / 2.0).tanh()));
                // Leave-one-out products from prefix and suffix products.
                suffix.clear();
                suffix.resize(tanh.len() + 1, 1.0);
                for i in (0..tanh.len()).rev() {
                    suffix[i] = suffix[i + 1] * tanh[i];
                }
                let mut prefix = 1.0;
                for (i, e) in range.clone().enumerate() {
                    let p = (prefix * suffix[i + 1]).clamp(-1.0 + 1e-15, 1.0 - 1e-15);
                    r[e] = clamp(2.0 * p.atanh());
                    prefix *= tanh[i];
                }
            }
            for (v, edges) in self.var_edges.iter().enumerate() {
                post[v] = channel[v] + edges.iter().map(|&e| r[e]).sum::<f64>();
                for &e in edges {
                    q[e] = clamp(post[v] - r[e]);
                }
            }
            word = hard(&post);
            if self.syndrome_is_zero(&word) {
                return Ok(BpResult {
                    word,
                    converged: true,
                    iterations: it,
                    posterior: post,
                });
            }
        }
        Ok(BpResult {
            converged: self.syndrome_is_zero(&word),
            word,
            iterations: max_iters,
            posterior: post,
        })
    }
}

pub fn bp_decode(llr: &[f64], h: &ParityCheckMatrix, max_iters: usize) -> Result<BpResult, CodeError> {
    TannerGraph::new(h).decode(llr, max_iters)
}

//! Categorical (unigram/bigram) language models retrained on their own samples.
//!
//! This is the discrete counterpart of the regression loop: fit by additive
//! smoothing, sample a corpus ancestrally, and score held-out text from the
//! true source by cross-entropy in nats per token.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;

use crate::config::NgramConfig;
use crate::error::{Error, Result};
use crate::feedback::Strategy;
use crate::montecarlo::CurveAggregate;
use crate::rng::RngStream;
use crate::stats::{blocked_reduce, Moments};

/// Rows of a fitted table sum to one within this tolerance.
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;

/// Token sequence over the alphabet `0..alphabet_size`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    tokens: Vec<u32>,
    alphabet_size: usize,
}

impl Corpus {
    pub fn new(tokens: Vec<u32>, alphabet_size: usize) -> Result<Self> {
        if let Some(&token) = tokens.iter().find(|t| **t as usize >= alphabet_size) {
            return Err(Error::TokenOutOfRange {
                token,
                alphabet: alphabet_size,
            });
        }
        Ok(Self { tokens, alphabet_size })
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet_size
    }
}

/// Row-stochastic conditional probability table.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramModel {
    order: usize,
    alphabet_size: usize,
    /// Row-major `rows × k`; one row for order 1, `k` rows for order 2.
    probs: Vec<f64>,
    /// Distribution of the first sampled token.
    initial: Vec<f64>,
    smoothing_alpha: f64,
}

impl NgramModel {
    /// Builds a model from explicit rows. Bigram models start from their
    /// stationary distribution.
    pub fn from_rows(order: usize, rows: &[Vec<f64>], smoothing_alpha: f64) -> Result<Self> {
        check_order(order)?;
        let k = rows.first().map(Vec::len).ok_or(Error::EmptyInput)?;
        let expected_rows = if order == 1 { 1 } else { k };
        if rows.len() != expected_rows {
            return Err(Error::LengthMismatch {
                expected: expected_rows,
                found: rows.len(),
            });
        }
        for row in rows {
            if row.len() != k {
                return Err(Error::LengthMismatch {
                    expected: k,
                    found: row.len(),
                });
            }
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument("rows must be probability vectors".into()));
            }
        }
        let probs: Vec<f64> = rows
            .iter()
            .flat_map(|r| {
                let s: f64 = r.iter().sum();
                r.iter().map(move |p| p / s)
            })
            .collect();
        let initial = if order == 1 {
            probs.clone()
        } else {
            stationary(&probs, k)
        };
        Ok(Self {
            order,
            alphabet_size: k,
            probs,
            initial,
            smoothing_alpha,
        })
    }

    /// Row `c` puts mass `∝ (1 + ((t − c − 1) mod k))^(−exponent)` on token `t`:
    /// a heavy head on the "next" symbol and a polynomial tail.
    pub fn shifted_zipf(alphabet_size: usize, order: usize, exponent: f64) -> Result<Self> {
        check_order(order)?;
        if alphabet_size == 0 {
            return Err(Error::InvalidArgument("alphabet must be nonempty".into()));
        }
        let k = alphabet_size;
        let rows = if order == 1 { 1 } else { k };
        let table: Vec<Vec<f64>> = (0..rows)
            .map(|c| {
                let w: Vec<f64> = (0..k)
                    .map(|t| (1.0 + ((t + 2 * k - c - 1) % k) as f64).powf(-exponent))
                    .collect();
                let s: f64 = w.iter().sum();
                w.into_iter().map(|x| x / s).collect()
            })
            .collect();
        Self::from_rows(order, &table, 0.0)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet_size
    }

    pub fn smoothing_alpha(&self) -> f64 {
        self.smoothing_alpha
    }

    pub fn rows(&self) -> usize {
        self.probs.len() / self.alphabet_size
    }

    pub fn row(&self, context: usize) -> &[f64] {
        let k = self.alphabet_size;
        &self.probs[context * k..(context + 1) * k]
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    /// Entropy rate of the source in nats per token.
    pub fn entropy_rate(&self) -> f64 {
        let h = |row: &[f64]| -> f64 { row.iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum() };
        if self.order == 1 {
            h(self.row(0))
        } else {
            (0..self.alphabet_size)
                .map(|c| self.initial[c] * h(self.row(c)))
                .sum()
        }
    }
}

fn check_order(order: usize) -> Result<()> {
    if order == 1 || order == 2 {
        Ok(())
    } else {
        Err(Error::UnsupportedOrder(order))
    }
}

// Lazy chain (I + P)/2 converges for periodic chains too.
fn stationary(probs: &[f64], k: usize) -> Vec<f64> {
    let mut pi = vec![1.0 / k as f64; k];
    for _ in 0..100_000 {
        let mut next = vec![0.0; k];
        for c in 0..k {
            let half = 0.5 * pi[c];
            next[c] += half;
            for t in 0..k {
                next[t] += half * probs[c * k + t];
            }
        }
        let s: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v /= s);
        let delta = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        pi = next;
        if delta < 1e-16 {
            break;
        }
    }
    pi
}

/// Token and transition counts. Transitions are only counted within a corpus,
/// so concatenating corpora never adds a spurious boundary transition.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramCounts {
    order: usize,
    alphabet_size: usize,
    unigram: Vec<u64>,
    transitions: Vec<u64>,
}

impl NgramCounts {
    pub fn new(order: usize, alphabet_size: usize) -> Result<Self> {
        check_order(order)?;
        Ok(Self {
            order,
            alphabet_size,
            unigram: vec![0; alphabet_size],
            transitions: if order == 2 {
                vec![0; alphabet_size * alphabet_size]
            } else {
                Vec::new()
            },
        })
    }

    pub fn add(&mut self, corpus: &Corpus) -> Result<()> {
        if corpus.alphabet_size != self.alphabet_size {
            return Err(Error::DimensionMismatch {
                context: "corpus alphabet",
                expected: self.alphabet_size,
                found: corpus.alphabet_size,
            });
        }
        for &t in &corpus.tokens {
            self.unigram[t as usize] += 1;
        }
        if self.order == 2 {
            let k = self.alphabet_size;
            for pair in corpus.tokens.windows(2) {
                self.transitions[pair[0] as usize * k + pair[1] as usize] += 1;
            }
        }
        Ok(())
    }

    /// `(count + α) / (row total + α·k)`; a row with no mass at all is uniform.
    pub fn to_model(&self, alpha: f64) -> Result<NgramModel> {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::InvalidArgument(format!("alpha must be >= 0, got {alpha}")));
        }
        let k = self.alphabet_size;
        let smooth = |counts: &[u64]| -> Vec<f64> {
            let total: u64 = counts.iter().sum();
            let denom = total as f64 + alpha * k as f64;
            if denom > 0.0 {
                counts.iter().map(|c| (*c as f64 + alpha) / denom).collect()
            } else {
                vec![1.0 / k as f64; k]
            }
        };
        let initial = smooth(&self.unigram);
        let probs = if self.order == 1 {
            initial.clone()
        } else {
            self.transitions.chunks(k).flat_map(smooth).collect()
        };
        Ok(NgramModel {
            order: self.order,
            alphabet_size: k,
            probs,
            initial,
            smoothing_alpha: alpha,
        })
    }
}

pub fn fit_categorical(corpus: &Corpus, order: usize, alpha: f64) -> Result<NgramModel> {
    check_order(order)?;
    if corpus.len() < order || corpus.is_empty() {
        return Err(Error::EmptyCorpus {
            order,
            len: corpus.len(),
        });
    }
    let mut counts = NgramCounts::new(order, corpus.alphabet_size)?;
    counts.add(corpus)?;
    counts.to_model(alpha)
}

/// Ancestral sampling at temperature 1.
pub fn sample_corpus(model: &NgramModel, n_tokens: usize, rng: &mut RngStream) -> Result<Corpus> {
    if n_tokens == 0 {
        return Err(Error::InvalidArgument("n_tokens must be at least 1".into()));
    }
    let weighted = |row: &[f64]| {
        WeightedIndex::new(row).map_err(|e| Error::InvalidArgument(format!("degenerate row: {e}")))
    };
    let first = weighted(&model.initial)?;
    let rows = (0..model.rows())
        .map(|c| weighted(model.row(c)))
        .collect::<Result<Vec<_>>>()?;
    let mut tokens = Vec::with_capacity(n_tokens);
    let mut prev = first.sample(rng);
    tokens.push(prev as u32);
    for _ in 1..n_tokens {
        let context = if model.order == 1 { 0 } else { prev };
        prev = rows[context].sample(rng);
        tokens.push(prev as u32);
    }
    Corpus::new(tokens, model.alphabet_size)
}

/// Mean negative log-likelihood in nats. Bigram models score the `len − 1`
/// transitions; unigram models score every token.
pub fn cross_entropy(model: &NgramModel, corpus: &Corpus) -> Result<f64> {
    if corpus.alphabet_size != model.alphabet_size {
        return Err(Error::DimensionMismatch {
            context: "corpus alphabet",
            expected: model.alphabet_size,
            found: corpus.alphabet_size,
        });
    }
    if corpus.len() < model.order || corpus.is_empty() {
        return Err(Error::EmptyCorpus {
            order: model.order,
            len: corpus.len(),
        });
    }
    let score = |context: usize, token: usize| -> Result<f64> {
        let p = model.row(context)[token];
        if p > 0.0 {
            Ok(-p.ln())
        } else {
            Err(Error::ZeroProbabilityEvent { context, token })
        }
    };
    let mut total = 0.0;
    let count = if model.order == 1 {
        for &t in &corpus.tokens {
            total += score(0, t as usize)?;
        }
        corpus.len()
    } else {
        for pair in corpus.tokens.windows(2) {
            total += score(pair[0] as usize, pair[1] as usize)?;
        }
        corpus.len() - 1
    };
    Ok(total / count as f64)
}

/// Runs `n` fit/sample rounds and returns held-out cross-entropy after each fit.
///
/// Round 1 fits a real corpus of `tokens_per_iter` tokens from `true_model`.
/// Later rounds sample from the previous fit: Replace refits on the new
/// `tokens_per_iter` tokens alone, Accumulate adds them to everything so far,
/// Replace-Multiple refits on `i·tokens_per_iter` fresh tokens at round `i`.
pub fn run_ngram_loop(
    true_model: &NgramModel,
    strategy: Strategy,
    tokens_per_iter: usize,
    n: usize,
    alpha: f64,
    heldout: &Corpus,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::InvalidArgument("loop smoothing alpha must be > 0".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let order = true_model.order;
    let k = true_model.alphabet_size;
    if tokens_per_iter < order.max(1) {
        return Err(Error::EmptyCorpus {
            order,
            len: tokens_per_iter,
        });
    }
    let mut counts = NgramCounts::new(order, k)?;
    counts.add(&sample_corpus(true_model, tokens_per_iter, rng)?)?;
    let mut model = counts.to_model(alpha)?;
    let mut out = Vec::with_capacity(n);
    out.push(cross_entropy(&model, heldout)?);
    for i in 2..=n {
        match strategy {
            Strategy::Replace => {
                let synth = sample_corpus(&model, tokens_per_iter, rng)?;
                counts = NgramCounts::new(order, k)?;
                counts.add(&synth)?;
            }
            Strategy::Accumulate => {
                let synth = sample_corpus(&model, tokens_per_iter, rng)?;
                counts.add(&synth)?;
            }
            Strategy::ReplaceMultiple => {
                let synth = sample_corpus(&model, i * tokens_per_iter, rng)?;
                counts = NgramCounts::new(order, k)?;
                counts.add(&synth)?;
            }
        }
        model = counts.to_model(alpha)?;
        out.push(cross_entropy(&model, heldout)?);
    }
    Ok(out)
}

/// Runs `config.seeds` independent loops and aggregates cross-entropy per round.
///
/// Seed `i` draws its held-out corpus from `(root_seed, i).substream(0)` and
/// runs the loop on `.substream(1)`, so different strategies with the same
/// root seed share real data and held-out text seed by seed.
pub fn run_ngram_experiment(config: &NgramConfig) -> Result<CurveAggregate> {
    config
        .validate()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let truth = NgramModel::shifted_zipf(config.alphabet_size, config.order, config.zipf_exponent)?;
    let moments = blocked_reduce(
        config.seeds,
        || Moments::new(config.iterations),
        |i| {
            let base = RngStream::new(config.root_seed, i as u64);
            let heldout = sample_corpus(&truth, config.heldout_tokens, &mut base.substream(0))?;
            run_ngram_loop(
                &truth,
                config.strategy,
                config.tokens_per_iter,
                config.iterations,
                config.alpha,
                &heldout,
                &mut base.substream(1),
            )
            .map_err(|e| Error::TrialFailed {
                trial: i as u64,
                source: Box::new(e),
            })
        },
        |m: &mut Moments, ce: Vec<f64>| m.push(&ce),
        |a, b| a.merge(b),
    )?
    .expect("at least one seed");
    Ok(CurveAggregate {
        per_iteration_mean: moments.mean.clone(),
        per_iteration_stderr: moments.stderr(),
        trials: moments.count as usize,
        analytic: None,
        max_sigma_deviation: None,
    })
}

//! Encoder-decoder transformer `p(y_i | x, z, y_<i)` conditioned on the
//! concatenation of a retrieved passage and the input.
//!
//! Pre-norm blocks, learned positional embeddings, GELU feed-forward and an
//! output projection tied to the token embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Partition, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Init};
use crate::vocab::{TokenId, BOS, SEP};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ff_dim: usize,
    pub max_source_len: usize,
    pub max_target_len: usize,
    pub embedding_std: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            vocab_size: 0,
            dim: 64,
            heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            ff_dim: 128,
            max_source_len: 256,
            max_target_len: 32,
            embedding_std: 0.1,
        }
    }
}

impl GeneratorConfig {
    fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "generator needs vocab_size > 0 and dim divisible by heads (dim {}, heads {})",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

pub fn init_generator<R: Rng>(store: &mut ParamStore, cfg: &GeneratorConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let d = cfg.dim;
    let mut init = Init {
        store,
        rng,
        partition: Partition::Generator,
    };
    init.normal("gen.tok_emb".into(), cfg.vocab_size, d, cfg.embedding_std)?;
    init.normal("gen.src_pos".into(), cfg.max_source_len, d, 0.02)?;
    init.normal("gen.tgt_pos".into(), cfg.max_target_len, d, 0.02)?;
    for l in 0..cfg.enc_layers {
        let pre = format!("gen.enc.{l}");
        init.layer_norm(&format!("{pre}.ln1"), d)?;
        init.attention(&format!("{pre}.attn"), d)?;
        init.layer_norm(&format!("{pre}.ln2"), d)?;
        init.feed_forward(&format!("{pre}.ff"), d, cfg.ff_dim)?;
    }
    init.layer_norm("gen.enc.ln_f", d)?;
    for l in 0..cfg.dec_layers {
        let pre = format!("gen.dec.{l}");
        init.layer_norm(&format!("{pre}.ln1"), d)?;
        init.attention(&format!("{pre}.self"), d)?;
        init.layer_norm(&format!("{pre}.ln2"), d)?;
        init.attention(&format!("{pre}.cross"), d)?;
        init.layer_norm(&format!("{pre}.ln3"), d)?;
        init.feed_forward(&format!("{pre}.ff"), d, cfg.ff_dim)?;
    }
    init.layer_norm("gen.dec.ln_f", d)?;
    init.fill("gen.out_bias".into(), cfg.vocab_size, 0.0)
}

/// `BOS title SEP text SEP x`, truncated to `max_len` by dropping passage
/// text first, then title. The query is never truncated.
pub fn condition_input(x: &[TokenId], title: &[TokenId], text: &[TokenId], max_len: usize) -> Result<Vec<TokenId>> {
    if x.is_empty() {
        return Err(Error::EmptyInput("generator query"));
    }
    let fixed = 3 + x.len();
    if fixed > max_len {
        return Err(Error::InputTooLong {
            len: fixed,
            max: max_len,
        });
    }
    let budget = max_len - fixed;
    let title_keep = title.len().min(budget);
    let text_keep = text.len().min(budget - title_keep);
    let mut out = Vec::with_capacity(fixed + title_keep + text_keep);
    out.push(BOS);
    out.extend_from_slice(&title[..title_keep]);
    out.push(SEP);
    out.extend_from_slice(&text[..text_keep]);
    out.push(SEP);
    out.extend_from_slice(x);
    Ok(out)
}

#[derive(Clone, Copy)]
pub struct Generator<'a> {
    pub cfg: &'a GeneratorConfig,
    pub params: &'a ParamStore,
}

impl<'a> Generator<'a> {
    pub fn new(cfg: &'a GeneratorConfig, params: &'a ParamStore) -> Self {
        Generator { cfg, params }
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|&i| {
                if (i as usize) < self.cfg.vocab_size {
                    Ok(i as usize)
                } else {
                    Err(Error::InvalidArgument(format!(
                        "token id {i} outside vocabulary of {}",
                        self.cfg.vocab_size
                    )))
                }
            })
            .collect()
    }

    /// Encoder memory for a conditioned source, `len x dim`.
    pub fn encode_on(&self, t: &mut Tape, src: &[TokenId]) -> Result<Var> {
        if src.is_empty() {
            return Err(Error::EmptyInput("generator source"));
        }
        if src.len() > self.cfg.max_source_len {
            return Err(Error::InputTooLong {
                len: src.len(),
                max: self.cfg.max_source_len,
            });
        }
        let ids = self.check_ids(src)?;
        let p = self.params;
        let emb = t.param(p, "gen.tok_emb")?;
        let pos = t.param(p, "gen.src_pos")?;
        let x = t.index_select_rows(emb, &ids);
        let pos = t.slice_rows(pos, 0, ids.len());
        let mut h = t.add(x, pos);
        for l in 0..self.cfg.enc_layers {
            let pre = format!("gen.enc.{l}");
            let n = nn::layer_norm(t, p, &format!("{pre}.ln1"), h)?;
            let a = nn::attention(t, p, &format!("{pre}.attn"), n, n, self.cfg.heads, None)?;
            h = t.add(h, a);
            let n = nn::layer_norm(t, p, &format!("{pre}.ln2"), h)?;
            let f = nn::feed_forward(t, p, &format!("{pre}.ff"), n)?;
            h = t.add(h, f);
        }
        nn::layer_norm(t, p, "gen.enc.ln_f", h)
    }

    /// Next-token log-probabilities for every decoder position,
    /// `len(dec_in) x vocab`.
    pub fn decode_on(&self, t: &mut Tape, memory: Var, dec_in: &[TokenId]) -> Result<Var> {
        if dec_in.is_empty() || dec_in[0] != BOS {
            return Err(Error::InvalidArgument("decoder prefix must start with BOS".into()));
        }
        if dec_in.len() > self.cfg.max_target_len {
            return Err(Error::InputTooLong {
                len: dec_in.len(),
                max: self.cfg.max_target_len,
            });
        }
        let ids = self.check_ids(dec_in)?;
        let p = self.params;
        let emb = t.param(p, "gen.tok_emb")?;
        let pos = t.param(p, "gen.tgt_pos")?;
        let x = t.index_select_rows(emb, &ids);
        let pos = t.slice_rows(pos, 0, ids.len());
        let mut h = t.add(x, pos);
        let mask = t.constant(nn::causal_mask(ids.len()));
        for l in 0..self.cfg.dec_layers {
            let pre = format!("gen.dec.{l}");
            let n = nn::layer_norm(t, p, &format!("{pre}.ln1"), h)?;
            let a = nn::attention(t, p, &format!("{pre}.self"), n, n, self.cfg.heads, Some(mask))?;
            h = t.add(h, a);
            let n = nn::layer_norm(t, p, &format!("{pre}.ln2"), h)?;
            let c = nn::attention(t, p, &format!("{pre}.cross"), n, memory, self.cfg.heads, None)?;
            h = t.add(h, c);
            let n = nn::layer_norm(t, p, &format!("{pre}.ln3"), h)?;
            let f = nn::feed_forward(t, p, &format!("{pre}.ff"), n)?;
            h = t.add(h, f);
        }
        let h = nn::layer_norm(t, p, "gen.dec.ln_f", h)?;
        let logits = t.matmul_t(h, emb);
        let bias = t.param(p, "gen.out_bias")?;
        let logits = t.add(logits, bias);
        Ok(t.log_softmax_rows(logits))
    }

    /// Teacher-forced `log p(y_i | x, z, y_<i)` for each target position, as
    /// a `len(y) x 1` column.
    pub fn token_logprobs_on(&self, t: &mut Tape, src: &[TokenId], y: &[TokenId]) -> Result<Var> {
        let memory = self.encode_on(t, src)?;
        self.token_logprobs_with_memory(t, memory, y)
    }

    pub fn token_logprobs_with_memory(&self, t: &mut Tape, memory: Var, y: &[TokenId]) -> Result<Var> {
        if y.is_empty() {
            return Err(Error::EmptyInput("target sequence"));
        }
        let mut dec_in = Vec::with_capacity(y.len());
        dec_in.push(BOS);
        dec_in.extend_from_slice(&y[..y.len() - 1]);
        let lp = self.decode_on(t, memory, &dec_in)?;
        let targets = self.check_ids(y)?;
        Ok(t.pick(lp, &targets))
    }

    /// Encoder memory computed once, reusable across decoding steps.
    pub fn memory(&self, src: &[TokenId]) -> Result<Tensor> {
        let mut t = Tape::inference();
        let m = self.encode_on(&mut t, src)?;
        t.check()?;
        Ok(t.value(m).clone())
    }

    /// Log-probabilities over the vocabulary for the token after `prefix`
    /// (which starts with BOS).
    pub fn next_token_logprobs_with_memory(&self, memory: &Tensor, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut t = Tape::inference();
        let m = t.constant(memory.clone());
        let lp = self.decode_on(&mut t, m, prefix)?;
        t.check()?;
        Ok(t.value(lp).row_slice(prefix.len() - 1).to_vec())
    }

    pub fn next_token_logprobs(&self, src: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
        let memory = self.memory(src)?;
        self.next_token_logprobs_with_memory(&memory, prefix)
    }

    /// Probability vector over the vocabulary.
    pub fn next_token_dist(&self, src: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self
            .next_token_logprobs(src, prefix)?
            .into_iter()
            .map(f64::exp)
            .collect())
    }

    /// Teacher-forced per-token log-probabilities as plain values.
    pub fn token_logprobs(&self, src: &[TokenId], y: &[TokenId]) -> Result<Vec<f64>> {
        let mut t = Tape::inference();
        let v = self.token_logprobs_on(&mut t, src, y)?;
        t.check()?;
        Ok(t.value(v).data().to_vec())
    }

    pub fn token_logprobs_from_memory(&self, memory: &Tensor, y: &[TokenId]) -> Result<Vec<f64>> {
        let mut t = Tape::inference();
        let m = t.constant(memory.clone());
        let v = self.token_logprobs_with_memory(&mut t, m, y)?;
        t.check()?;
        Ok(t.value(v).data().to_vec())
    }

    /// `Σ_i log p(y_i | x, z, y_<i)`, summed in position order.
    pub fn sequence_logprob(&self, src: &[TokenId], y: &[TokenId]) -> Result<f64> {
        Ok(sum_in_order(&self.token_logprobs(src, y)?))
    }
}

pub(crate) fn sum_in_order(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0, |acc, v| acc + v)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckConfig, PartitionSet};
    use crate::vocab::EOS;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny(vocab: usize, seed: u64) -> (GeneratorConfig, ParamStore) {
        let cfg = GeneratorConfig {
            vocab_size: vocab,
            dim: 8,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ff_dim: 12,
            max_source_len: 24,
            max_target_len: 6,
            embedding_std: 0.5,
        };
        let mut store = ParamStore::new();
        init_generator(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (cfg, store)
    }

    #[test]
    fn condition_input_layouts() {
        assert_eq!(condition_input(&[9], &[], &[], 10).unwrap(), vec![BOS, SEP, SEP, 9]);
        assert_eq!(
            condition_input(&[9, 8], &[5], &[6, 7], 10).unwrap(),
            vec![BOS, 5, SEP, 6, 7, SEP, 9, 8]
        );
        // 3 + |x| = 5 fixed, budget 3: title (1) + two text tokens
        let out = condition_input(&[9, 8], &[5], &[6, 7, 7, 7, 7], 8).unwrap();
        assert_eq!(out, vec![BOS, 5, SEP, 6, 7, SEP, 9, 8]);
        assert_eq!(out.len(), 8);
        assert!(matches!(
            condition_input(&[9; 6], &[], &[], 8),
            Err(Error::InputTooLong { .. })
        ));
        assert!(condition_input(&[], &[1], &[1], 8).is_err());
    }

    #[test]
    fn next_token_distribution_is_normalised_and_deterministic() {
        let (cfg, store) = tiny(7, 1);
        let g = Generator::new(&cfg, &store);
        let src = [BOS, 5, SEP, 6, SEP, 5];
        let d = g.next_token_dist(&src, &[BOS, 6]).unwrap();
        assert_eq!(d.len(), 7);
        assert!(d.iter().all(|&p| p >= 0.0));
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(d, g.next_token_dist(&src, &[BOS, 6]).unwrap());
    }

    #[test]
    fn sequence_logprob_equals_sum_of_step_logprobs_bitwise() {
        let (cfg, store) = tiny(7, 2);
        let g = Generator::new(&cfg, &store);
        let src = [BOS, 5, SEP, 6, 6, SEP, 5];
        let y = [6, 5, 6, EOS];
        let mut prefix = vec![BOS];
        let mut acc = 0.0;
        for &tok in &y {
            let lp = g.next_token_logprobs(&src, &prefix).unwrap();
            acc += lp[tok as usize];
            prefix.push(tok);
        }
        let s = g.sequence_logprob(&src, &y).unwrap();
        assert_eq!(s.to_bits(), acc.to_bits());
        assert!(s <= 0.0);
        // single factor
        let only_eos = g.sequence_logprob(&src, &[EOS]).unwrap();
        let lp = g.next_token_logprobs(&src, &[BOS]).unwrap();
        assert_eq!(only_eos.to_bits(), lp[EOS as usize].to_bits());
    }

    #[test]
    fn enumeration_sums_to_one_over_fixed_length_targets() {
        // Oracle: the chain rule makes Σ over all |V|^N sequences equal 1.
        let (cfg, store) = tiny(4, 3);
        let g = Generator::new(&cfg, &store);
        let src = [BOS, 1, 0, 1, 2];
        for n in 1..=3u32 {
            let mut total = 0.0;
            for code in 0..4usize.pow(n) {
                let y: Vec<TokenId> = (0..n).map(|i| ((code / 4usize.pow(i)) % 4) as TokenId).collect();
                total += g.sequence_logprob(&src, &y).unwrap().exp();
            }
            assert!((total - 1.0).abs() < 1e-9, "length {n}: {total}");
        }
        // Sequences ending in EOS with no earlier EOS, lengths 1..=3: at most 1.
        let mut ended = 0.0;
        for n in 1..=3u32 {
            for code in 0..3usize.pow(n - 1) {
                let mut y: Vec<TokenId> = (0..n - 1).map(|i| [0, 1, 2][(code / 3usize.pow(i)) % 3]).collect();
                y.push(EOS);
                ended += g.sequence_logprob(&src, &y).unwrap().exp();
            }
        }
        assert!(ended <= 1.0 + 1e-12 && ended > 0.0);
    }

    #[test]
    fn teacher_forced_gradient_matches_finite_differences() {
        let (cfg, store) = tiny(7, 4);
        let src = [BOS, 5, SEP, 6, SEP, 5];
        let y = [6, EOS];
        let rep = grad_check(
            &store,
            PartitionSet::of(&[Partition::Generator]),
            |t, p| {
                let lp = Generator::new(&cfg, p).token_logprobs_on(t, &src, &y)?;
                let s = t.sum(lp);
                Ok(t.scale(s, -1.0))
            },
            GradCheckConfig {
                step: 1e-5,
                floor: 1e-6,
                max_coords: None,
            },
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{:?}", rep.worst());
    }

    #[test]
    fn prefix_must_start_with_bos() {
        let (cfg, store) = tiny(7, 5);
        let g = Generator::new(&cfg, &store);
        assert!(g.next_token_logprobs(&[BOS, 5], &[5]).is_err());
    }
}

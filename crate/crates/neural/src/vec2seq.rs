//! Vector-to-sequence captioner with a comprehension head.
//!
//! The projected image is the single input step of a 2-layer GRU encoder.
//! The decoder (2-layer GRU, initialized from the encoder states) reads
//! `[BOS, t1..tn]` and predicts `[t1..tn, EOS]`. Each decoder step attends
//! over a one-slot memory holding the encoder output Oᵉ, so the context is
//! Oᵉ itself, and emits `Oᵈ = tanh(W_c [h; ctx] + b_c)`. The classifier head
//! reads `[Oᵉ; mean(Oᵈ)]`.

use dmc_core::{Error, Result};
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ffnn::{class_grad, Head, HeadCache, LossParts, PairModel};
use crate::gru::{GruCache, GruCell};
use crate::tensor::{add_into, argmax, cross_entropy, dot, softmax, Dense, Mat, Tensors};

pub const DEFAULT_MAX_LEN: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vec2seqConfig {
    /// Corpus vocabulary size `V`; the decoder predicts `V + 1` symbols
    /// (the extra one is end-of-sequence).
    pub vocab: usize,
    pub d_img: usize,
    /// Word embedding, GRU state and image projection size.
    pub dim: usize,
    pub h1: usize,
    pub h2: usize,
}

impl Vec2seqConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.vocab, self.d_img, self.dim, self.h1, self.h2].contains(&0) {
            return Err(Error::invalid(format!(
                "all Vec2seq sizes must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn eos(&self) -> usize {
        self.vocab
    }

    pub fn bos(&self) -> usize {
        self.vocab + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vec2seqParams<F> {
    /// `(V + 2) × dim`: vocabulary, EOS, BOS.
    pub emb: Mat<F>,
    pub img: Dense<F>,
    pub enc: [GruCell<F>; 2],
    pub dec: [GruCell<F>; 2],
    /// Attention scoring vector over memory slots (`dim × 1`).
    pub attn: Mat<F>,
    pub comb: Dense<F>,
    /// Vocabulary projection `(V + 1) × dim`.
    pub out: Dense<F>,
    pub head: Head<F>,
}

/// Everything computed by one teacher-forced pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<F> {
    pub encoder_output: Vec<F>,
    pub attention: Vec<Vec<F>>,
    pub decoder_outputs: Vec<Vec<F>>,
    pub class_probabilities: [F; 2],
    pub vocab_distributions: Vec<Vec<F>>,
}

struct StepCache<F> {
    input: usize,
    c1: GruCache<F>,
    c2: GruCache<F>,
    /// `[h_top; ctx]`
    comb_in: Vec<F>,
    weight: F,
    o: Vec<F>,
}

struct Pass<F> {
    e1: GruCache<F>,
    e2: GruCache<F>,
    enc_out: Vec<F>,
    steps: Vec<StepCache<F>>,
    head: HeadCache<F>,
}

impl<F: Float> Vec2seqParams<F> {
    pub fn init(cfg: &Vec2seqConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.dim;
        Ok(Vec2seqParams {
            emb: Mat::uniform(cfg.vocab + 2, d, 1.0, &mut rng),
            img: Dense::new(d, cfg.d_img, &mut rng),
            enc: [GruCell::new(d, d, &mut rng), GruCell::new(d, d, &mut rng)],
            dec: [GruCell::new(d, d, &mut rng), GruCell::new(d, d, &mut rng)],
            attn: Mat::uniform(d, 1, 0.1, &mut rng),
            comb: Dense::new(d, 2 * d, &mut rng),
            out: Dense::new(cfg.vocab + 1, d, &mut rng),
            head: Head::new(2 * d, cfg.h1, cfg.h2, &mut rng),
        })
    }

    pub fn zeros(cfg: &Vec2seqConfig) -> Self {
        let d = cfg.dim;
        Vec2seqParams {
            emb: Mat::zeros(cfg.vocab + 2, d),
            img: Dense::zeros(d, cfg.d_img),
            enc: [GruCell::zeros(d, d), GruCell::zeros(d, d)],
            dec: [GruCell::zeros(d, d), GruCell::zeros(d, d)],
            attn: Mat::zeros(d, 1),
            comb: Dense::zeros(d, 2 * d),
            out: Dense::zeros(cfg.vocab + 1, d),
            head: Head {
                l1: Dense::zeros(cfg.h1, 2 * d),
                l2: Dense::zeros(cfg.h2, cfg.h1),
                out: Dense::zeros(2, cfg.h2),
            },
        }
    }

    pub fn config(&self) -> Vec2seqConfig {
        Vec2seqConfig {
            vocab: self.out.out_dim() - 1,
            d_img: self.img.in_dim(),
            dim: self.emb.cols,
            h1: self.head.l1.out_dim(),
            h2: self.head.l2.out_dim(),
        }
    }

    pub fn from_tensors(t: Vec<Mat<F>>) -> Result<Self> {
        if t.len() != 26 {
            return Err(Error::BadFormat {
                format: "vec2seq checkpoint",
                reason: format!("expected 26 tensors, found {}", t.len()),
            });
        }
        let cfg = Vec2seqConfig {
            vocab: t[0].rows.saturating_sub(2),
            dim: t[0].cols,
            d_img: t[1].cols,
            h1: t[20].rows,
            h2: t[22].rows,
        };
        cfg.validate()?;
        let mut p = Self::zeros(&cfg);
        for (dst, src) in p.tensors_mut().into_iter().zip(t) {
            if (dst.rows, dst.cols) != (src.rows, src.cols) {
                return Err(Error::BadFormat {
                    format: "vec2seq checkpoint",
                    reason: format!(
                        "tensor shape {}×{} does not chain (expected {}×{})",
                        src.rows, src.cols, dst.rows, dst.cols
                    ),
                });
            }
            *dst = src;
        }
        Ok(p)
    }

    fn check(&self, image: &[F], tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty caption"));
        }
        if image.len() != self.img.in_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.img.in_dim(),
                found: image.len(),
            });
        }
        let v = self.config().vocab;
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= v) {
            return Err(Error::invalid(format!(
                "token id {t} outside vocabulary of {v}"
            )));
        }
        Ok(())
    }

    fn encode(&self, image: &[F]) -> (GruCache<F>, GruCache<F>) {
        let zero = vec![F::zero(); self.emb.cols];
        let (h1, e1) = self.enc[0].step(&zero, &self.img.forward(image));
        let (_, e2) = self.enc[1].step(&zero, &h1);
        (e1, e2)
    }

    /// One decoder step from states `(s1, s2)`; returns the new states.
    fn decode_step(
        &self,
        s1: &[F],
        s2: &[F],
        input: usize,
        memory: &[F],
    ) -> (Vec<F>, Vec<F>, StepCache<F>) {
        let (n1, c1) = self.dec[0].step(s1, self.emb.row(input));
        let (n2, c2) = self.dec[1].step(s2, &n1);
        // Softmax over the single memory slot.
        let score = dot(&self.attn.data, memory);
        let weight = softmax(&[score])[0];
        let mut comb_in = n2.clone();
        comb_in.extend(memory.iter().map(|&m| weight * m));
        let o: Vec<F> = self
            .comb
            .forward(&comb_in)
            .into_iter()
            .map(F::tanh)
            .collect();
        (
            n1,
            n2,
            StepCache {
                input,
                c1,
                c2,
                comb_in,
                weight,
                o,
            },
        )
    }

    fn run(&self, image: &[F], tokens: &[u32]) -> Pass<F> {
        let bos = self.emb.rows - 1;
        let (e1, e2) = self.encode(image);
        let h1 = next_state(&e1);
        let enc_out = next_state(&e2);
        let mut s1 = h1;
        let mut s2 = enc_out.clone();
        let mut steps = Vec::with_capacity(tokens.len() + 1);
        for input in std::iter::once(bos).chain(tokens.iter().map(|&t| t as usize)) {
            let (n1, n2, cache) = self.decode_step(&s1, &s2, input, &enc_out);
            s1 = n1;
            s2 = n2;
            steps.push(cache);
        }
        let d = self.emb.cols;
        let mut x = enc_out.clone();
        let inv = F::one() / F::from(steps.len()).expect("small");
        let mut mean = vec![F::zero(); d];
        for s in &steps {
            add_into(&mut mean, &s.o);
        }
        x.extend(mean.into_iter().map(|v| v * inv));
        let head = self.head.forward(x);
        Pass {
            e1,
            e2,
            enc_out,
            steps,
            head,
        }
    }

    /// Teacher-forced pass exposing the encoder/decoder outputs, attention
    /// weights and every softmax.
    pub fn forward(&self, image: &[F], tokens: &[u32]) -> Result<ForwardTrace<F>> {
        self.check(image, tokens)?;
        let pass = self.run(image, tokens);
        let p = softmax(&pass.head.logits);
        Ok(ForwardTrace {
            encoder_output: pass.enc_out.clone(),
            attention: pass.steps.iter().map(|s| vec![s.weight]).collect(),
            decoder_outputs: pass.steps.iter().map(|s| s.o.clone()).collect(),
            class_probabilities: [p[0], p[1]],
            vocab_distributions: pass
                .steps
                .iter()
                .map(|s| softmax(&self.out.forward(&s.o)))
                .collect(),
        })
    }

    /// Greedy decoding from the image: stops at end-of-sequence or after
    /// `max_len` tokens.
    pub fn generate(&self, image: &[F], max_len: usize) -> Result<Vec<u32>> {
        if image.len() != self.img.in_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.img.in_dim(),
                found: image.len(),
            });
        }
        let eos = self.out.out_dim() - 1;
        let (e1, e2) = self.encode(image);
        let enc_out = next_state(&e2);
        let mut s1 = next_state(&e1);
        let mut s2 = enc_out.clone();
        let mut input = self.emb.rows - 1;
        let mut out = Vec::new();
        while out.len() < max_len {
            let (n1, n2, cache) = self.decode_step(&s1, &s2, input, &enc_out);
            s1 = n1;
            s2 = n2;
            let next = argmax(&self.out.forward(&cache.o));
            if next == eos {
                break;
            }
            out.push(next as u32);
            input = next;
        }
        Ok(out)
    }
}

fn next_state<F: Float>(c: &GruCache<F>) -> Vec<F> {
    c.h.iter()
        .zip(&c.z)
        .zip(&c.n)
        .map(|((&h, &z), &n)| (F::one() - z) * h + z * n)
        .collect()
}

impl<F: Float> Tensors<F> for Vec2seqParams<F> {
    fn tensors(&self) -> Vec<&Mat<F>> {
        let mut v = vec![&self.emb, &self.img.w, &self.img.b];
        for c in self.enc.iter().chain(&self.dec) {
            v.extend([&c.w, &c.u, &c.b]);
        }
        v.extend([
            &self.attn,
            &self.comb.w,
            &self.comb.b,
            &self.out.w,
            &self.out.b,
        ]);
        v.extend([
            &self.head.l1.w,
            &self.head.l1.b,
            &self.head.l2.w,
            &self.head.l2.b,
            &self.head.out.w,
            &self.head.out.b,
        ]);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat<F>> {
        let mut v = vec![&mut self.emb, &mut self.img.w, &mut self.img.b];
        for c in self.enc.iter_mut().chain(self.dec.iter_mut()) {
            v.extend([&mut c.w, &mut c.u, &mut c.b]);
        }
        v.extend([
            &mut self.attn,
            &mut self.comb.w,
            &mut self.comb.b,
            &mut self.out.w,
            &mut self.out.b,
        ]);
        v.extend([
            &mut self.head.l1.w,
            &mut self.head.l1.b,
            &mut self.head.l2.w,
            &mut self.head.l2.b,
            &mut self.head.out.w,
            &mut self.head.out.b,
        ]);
        v
    }

    fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = ["emb", "img.w", "img.b"].map(String::from).to_vec();
        for cell in ["enc0", "enc1", "dec0", "dec1"] {
            v.extend(["w", "u", "b"].map(|p| format!("{cell}.{p}")));
        }
        v.extend(["attn", "comb.w", "comb.b", "out.w", "out.b"].map(String::from));
        v.extend(
            [
                "head.l1.w",
                "head.l1.b",
                "head.l2.w",
                "head.l2.b",
                "head.out.w",
                "head.out.b",
            ]
            .map(String::from),
        );
        v
    }
}

impl<F: Float + Send + Sync> PairModel<F> for Vec2seqParams<F> {
    fn yes_probability(&self, image: &[F], tokens: &[u32]) -> Result<F> {
        self.check(image, tokens)?;
        let pass = self.run(image, tokens);
        Ok(softmax(&pass.head.logits)[1])
    }

    fn pair_loss(
        &self,
        image: &[F],
        tokens: &[u32],
        label: bool,
        lambda_gen: F,
        grad: Option<&mut Self>,
    ) -> Result<LossParts<F>> {
        self.check(image, tokens)?;
        let pass = self.run(image, tokens);
        let (class_loss, dlogits, yes) = class_grad(&pass.head.logits, label);
        let eos = self.out.out_dim() - 1;
        let targets: Vec<usize> = tokens
            .iter()
            .map(|&t| t as usize)
            .chain(std::iter::once(eos))
            .collect();

        // Only true captions enter the generation term.
        let mut generation = F::zero();
        let mut gen_logits = Vec::new();
        if label {
            for (s, &t) in pass.steps.iter().zip(&targets) {
                let z = self.out.forward(&s.o);
                generation = generation + cross_entropy(&z, t);
                gen_logits.push(z);
            }
        }
        let parts = LossParts {
            classification: class_loss,
            generation,
            yes_probability: yes,
        };
        let Some(g) = grad else {
            return Ok(parts);
        };

        let d = self.emb.cols;
        let n_steps = pass.steps.len();
        let dx = self.head.backward(&pass.head, &dlogits, &mut g.head);
        let mut d_enc = dx[..d].to_vec();
        let inv = F::one() / F::from(n_steps).expect("small");
        let mut d_o: Vec<Vec<F>> = (0..n_steps)
            .map(|_| dx[d..].iter().map(|&v| v * inv).collect())
            .collect();

        if label && lambda_gen != F::zero() {
            for ((s, z), (&t, dol)) in pass
                .steps
                .iter()
                .zip(&gen_logits)
                .zip(targets.iter().zip(d_o.iter_mut()))
            {
                let mut dz = softmax(z);
                dz[t] = dz[t] - F::one();
                for v in &mut dz {
                    *v = *v * lambda_gen;
                }
                self.out.backward(&s.o, &dz, &mut g.out, Some(dol));
            }
        }

        let mut ds1 = vec![F::zero(); d];
        let mut ds2 = vec![F::zero(); d];
        for (s, dol) in pass.steps.iter().zip(&d_o).rev() {
            let dpre: Vec<F> = dol
                .iter()
                .zip(&s.o)
                .map(|(&g, &o)| g * (F::one() - o * o))
                .collect();
            let mut dcomb = vec![F::zero(); 2 * d];
            self.comb
                .backward(&s.comb_in, &dpre, &mut g.comb, Some(&mut dcomb));
            // ctx = weight · Oᵉ with weight = softmax([attn · Oᵉ])[0].
            let dctx = &dcomb[d..];
            let dweight = dot(dctx, &pass.enc_out);
            let dscore = dweight * s.weight * (F::one() - s.weight);
            for k in 0..d {
                d_enc[k] = d_enc[k] + dctx[k] * s.weight + dscore * self.attn.data[k];
                g.attn.data[k] = g.attn.data[k] + dscore * pass.enc_out[k];
            }
            add_into(&mut ds2, &dcomb[..d]);
            let (dh2, dx2) = self.dec[1].backward(&s.c2, &ds2, &mut g.dec[1]);
            add_into(&mut ds1, &dx2);
            let (dh1, dx1) = self.dec[0].backward(&s.c1, &ds1, &mut g.dec[0]);
            add_into(g.emb.row_mut(s.input), &dx1);
            ds1 = dh1;
            ds2 = dh2;
        }

        // Decoder initial states are the encoder outputs.
        add_into(&mut d_enc, &ds2);
        let mut d_h1 = ds1;
        let (_, dx_e2) = self.enc[1].backward(&pass.e2, &d_enc, &mut g.enc[1]);
        add_into(&mut d_h1, &dx_e2);
        let (_, dx0) = self.enc[0].backward(&pass.e1, &d_h1, &mut g.enc[0]);
        self.img.backward(image, &dx0, &mut g.img, None);
        Ok(parts)
    }
}

use crate::error::{Error, Result};
use crate::kernel::{Tape, Tensor, Var};
use crate::model::encoder::Encoded;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::text::{Language, Sentence, BOS, EOS, PAD, UNK};

/// What the decoder is conditioned on, as plain values.
#[derive(Clone, Debug)]
pub enum Context<S> {
    /// Encoder states `b x l x h` read through attention (translation).
    Attend {
        memory: Tensor<S>,
        pooled: Tensor<S>,
        lengths: Vec<usize>,
    },
    /// One vector per row, `b x h`, used both as initial state and as context (editing).
    Pooled(Tensor<S>),
}

impl<S: Scalar> Context<S> {
    pub fn rows(&self) -> usize {
        match self {
            Context::Attend { pooled, .. } | Context::Pooled(pooled) => pooled.shape()[0],
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecodeOptions<'a> {
    pub max_len: usize,
    /// Tokens the decoder may emit besides EOS; `None` allows the whole vocabulary.
    pub allowed: Option<&'a [bool]>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    pub sentence: Sentence,
    /// Reached `max_len` without producing EOS.
    pub truncated: bool,
}

struct Cond {
    memory: Option<(Var, Vec<usize>)>,
    pooled: Var,
}

impl<S: Scalar> Model<S> {
    fn start_states(&self, cond: &Cond) -> Vec<Var> {
        vec![cond.pooled; self.dec.len()]
    }

    /// One decoder step; returns the top hidden state and its context vector.
    fn dec_step(&self, tape: &mut Tape<S>, hs: &mut [Var], mut x: Var, active: &[bool], cond: &Cond) -> Result<(Var, Var)> {
        for (cell, h) in self.dec.iter().zip(hs.iter_mut()) {
            *h = cell.step(tape, &self.store, x, *h, active)?;
            x = *h;
        }
        let ctx = match &cond.memory {
            Some((memory, lengths)) => tape.attention(x, *memory, lengths)?,
            None => cond.pooled,
        };
        Ok((x, ctx))
    }

    /// `tanh(h·W_ch + ctx·W_cc + b_c)·W_out + b_out` for stacked rows.
    fn project(&self, tape: &mut Tape<S>, h: Var, ctx: Var) -> Result<Var> {
        let w_ch = tape.param(&self.store, self.w_ch)?;
        let w_cc = tape.param(&self.store, self.w_cc)?;
        let b_c = tape.param(&self.store, self.b_c)?;
        let w_out = tape.param(&self.store, self.out.w)?;
        let b_out = tape.param(&self.store, self.out.b)?;
        let a = tape.matmul(h, w_ch)?;
        let c = tape.matmul(ctx, w_cc)?;
        let pre = tape.add(a, c)?;
        let pre = tape.add_row(pre, b_c)?;
        let o = tape.tanh(pre)?;
        let logits = tape.matmul(o, w_out)?;
        tape.add_row(logits, b_out)
    }

    fn first_input(&self, tape: &mut Tape<S>, b: usize, lang: Language) -> Result<Var> {
        let table = tape.param(&self.store, self.embed)?;
        let tag = tape.param(&self.store, self.tag)?;
        let bos = tape.embedding(table, &vec![BOS; b])?;
        let tags = tape.embedding(tag, &vec![lang.tag(); b])?;
        tape.add(bos, tags)
    }

    /// Teacher-forced negative log-likelihood of `targets` (each followed by
    /// EOS), averaged over all predicted tokens in the batch.
    pub fn nll(&self, tape: &mut Tape<S>, cond: Conditioning<'_>, lang: Language, targets: &[&Sentence]) -> Result<Var> {
        let b = targets.len();
        let cond = self.cond_vars(tape, cond, b)?;
        let steps = targets.iter().map(|s| s.len()).max().unwrap_or(0) + 1;
        let table = tape.param(&self.store, self.embed)?;
        let mut hs = self.start_states(&cond);
        let mut tops = Vec::with_capacity(steps);
        let mut ctxs = Vec::with_capacity(steps);
        for t in 0..steps {
            let x = if t == 0 {
                self.first_input(tape, b, lang)?
            } else {
                let prev: Vec<usize> = targets.iter().map(|s| s.ids().get(t - 1).copied().unwrap_or(PAD)).collect();
                tape.embedding(table, &prev)?
            };
            let active: Vec<bool> = targets.iter().map(|s| t <= s.len()).collect();
            let (h, ctx) = self.dec_step(tape, &mut hs, x, &active, &cond)?;
            tops.push(h);
            ctxs.push(ctx);
        }
        let hd = self.config.hidden;
        let h = tape.stack(&tops)?;
        let h = tape.reshape(h, &[b * steps, hd])?;
        let c = tape.stack(&ctxs)?;
        let c = tape.reshape(c, &[b * steps, hd])?;
        let logits = self.project(tape, h, c)?;

        let total: usize = targets.iter().map(|s| s.len() + 1).sum();
        let w = S::one() / S::from_f64_lossy(total as f64);
        let mut ys = Vec::with_capacity(b * steps);
        let mut ws = Vec::with_capacity(b * steps);
        for s in targets {
            for t in 0..steps {
                let (y, wt) = match t.cmp(&s.len()) {
                    std::cmp::Ordering::Less => (s.ids()[t], w),
                    std::cmp::Ordering::Equal => (EOS, w),
                    std::cmp::Ordering::Greater => (PAD, S::zero()),
                };
                ys.push(y);
                ws.push(wt);
            }
        }
        tape.cross_entropy(logits, &ys, &ws)
    }

    fn cond_vars(&self, tape: &mut Tape<S>, cond: Conditioning<'_>, b: usize) -> Result<Cond> {
        let cond = match cond {
            Conditioning::Attend(enc) => Cond {
                memory: Some((enc.memory, enc.lengths.clone())),
                pooled: enc.pooled,
            },
            Conditioning::Pooled(v) => Cond { memory: None, pooled: v },
        };
        let shape = tape.value(cond.pooled).shape();
        if shape != [b, self.config.hidden] {
            return Err(Error::dim("decode", format!("context {shape:?} for {b} rows")));
        }
        Ok(cond)
    }

    /// Greedy decoding. PAD, BOS and UNK are never emitted and EOS is not
    /// accepted before the first token, so every output is non-empty.
    pub fn decode_greedy(&self, context: &Context<S>, lang: Language, opts: DecodeOptions<'_>) -> Result<Vec<Decoded>> {
        let v = self.config.vocab_size;
        if let Some(a) = opts.allowed {
            if a.len() != v {
                return Err(Error::VocabMismatch(format!("token mask of {} for vocabulary {v}", a.len())));
            }
        }
        if opts.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        let b = context.rows();
        let mut tape = Tape::new();
        let cond = match context {
            Context::Attend { memory, pooled, lengths } => {
                let memory = tape.constant(memory.clone())?;
                let pooled = tape.constant(pooled.clone())?;
                Cond {
                    memory: Some((memory, lengths.clone())),
                    pooled,
                }
            }
            Context::Pooled(p) => Cond {
                memory: None,
                pooled: tape.constant(p.clone())?,
            },
        };
        self.cond_vars(&mut tape, Conditioning::Pooled(cond.pooled), b)?;
        let table = tape.param(&self.store, self.embed)?;
        let mut hs = self.start_states(&cond);
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); b];
        let mut done = vec![false; b];
        let mut x = self.first_input(&mut tape, b, lang)?;
        for t in 0..opts.max_len {
            let active: Vec<bool> = done.iter().map(|d| !d).collect();
            let (h, ctx) = self.dec_step(&mut tape, &mut hs, x, &active, &cond)?;
            let logits = self.project(&mut tape, h, ctx)?;
            let lv = tape.value(logits);
            let mut next = vec![PAD; b];
            for row in 0..b {
                if done[row] {
                    continue;
                }
                let scores = lv.row(row);
                let mut best: Option<usize> = None;
                for (tok, &s) in scores.iter().enumerate() {
                    let ok = match tok {
                        PAD | BOS | UNK => false,
                        EOS => t > 0,
                        _ => opts.allowed.is_none_or(|a| a[tok]),
                    };
                    if ok && best.is_none_or(|bi| s > scores[bi]) {
                        best = Some(tok);
                    }
                }
                match best {
                    Some(EOS) | None => done[row] = true,
                    Some(tok) => {
                        out[row].push(tok);
                        next[row] = tok;
                    }
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
            x = tape.embedding(table, &next)?;
        }
        out.into_iter()
            .zip(done)
            .map(|(ids, finished)| {
                Ok(Decoded {
                    sentence: Sentence::new(ids).map_err(|_| Error::degenerate("decode", "no admissible token"))?,
                    truncated: !finished,
                })
            })
            .collect()
    }

    /// Token-averaged NLL of `references` given `sources` under teacher forcing.
    pub fn translation_nll(&self, tape: &mut Tape<S>, sources: &[&Sentence], references: &[&Sentence], lang: Language) -> Result<Var> {
        if sources.len() != references.len() {
            return Err(Error::dim("translation_nll", format!("{} sources, {} references", sources.len(), references.len())));
        }
        let enc = self.encode(tape, sources)?;
        self.nll(tape, Conditioning::Attend(&enc), lang, references)
    }

    /// Encodes `sents` forward-only into a translation context.
    pub fn context(&self, sents: &[&Sentence]) -> Result<Context<S>> {
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, sents)?;
        Ok(Context::Attend {
            memory: tape.value(enc.memory).clone(),
            pooled: tape.value(enc.pooled).clone(),
            lengths: enc.lengths,
        })
    }

    /// Greedy translation of `sents` into `lang`, `batch` sentences at a time.
    pub fn translate(&self, sents: &[&Sentence], lang: Language, opts: DecodeOptions<'_>, batch: usize) -> Result<Vec<Decoded>> {
        let mut out = Vec::with_capacity(sents.len());
        for chunk in sents.chunks(batch.max(1)) {
            out.extend(self.decode_greedy(&self.context(chunk)?, lang, opts)?);
        }
        Ok(out)
    }
}

/// Tape-level conditioning for teacher forcing.
#[derive(Clone, Copy, Debug)]
pub enum Conditioning<'a> {
    Attend(&'a Encoded),
    Pooled(Var),
}

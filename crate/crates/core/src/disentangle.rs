//! Content encoder, style encoder and decoder, composed into the
//! transformation model `T(x, x') = D(h_c(x), h_s(x'))`, and the invariance
//! loss over quartet batches.

use rand::Rng;

use crate::datagen::QuartetBatch;
use crate::error::{Error, Result};
use crate::numkernel::{Activation, BoundMlp, Gradients, Mlp, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderDims {
    pub input: usize,
    pub content: usize,
    pub style: usize,
    pub hidden: usize,
}

impl EncoderDims {
    pub fn new(input: usize) -> Self {
        Self {
            input,
            content: 8,
            style: 4,
            hidden: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    /// `x -> c`
    pub content: Mlp,
    /// `x -> s`
    pub style: Mlp,
    /// `(c, s) -> x`
    pub decoder: Mlp,
}

impl EncoderParams {
    pub fn new<R: Rng + ?Sized>(dims: EncoderDims, rng: &mut R) -> Self {
        let EncoderDims {
            input,
            content,
            style,
            hidden,
        } = dims;
        Self {
            content: Mlp::new(&[input, hidden, content], Activation::Tanh, rng),
            style: Mlp::new(&[input, hidden, style], Activation::Tanh, rng),
            decoder: Mlp::new(&[content + style, hidden, input], Activation::Tanh, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.content.input_dim()
    }

    pub fn content_dim(&self) -> usize {
        self.content.output_dim()
    }

    pub fn style_dim(&self) -> usize {
        self.style.output_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.input_dim();
        let chained = self.style.input_dim() == d
            && self.decoder.input_dim() == self.content_dim() + self.style_dim()
            && self.decoder.output_dim() == d;
        if !chained {
            return Err(Error::Shape {
                op: "encoder_params",
                lhs: vec![d, self.content_dim(), self.style_dim()],
                rhs: vec![self.decoder.input_dim(), self.decoder.output_dim()],
            });
        }
        Ok(())
    }

    pub fn encode_content(&self, x: &Tensor) -> Result<Tensor> {
        self.content.apply(x)
    }

    pub fn encode_style(&self, x: &Tensor) -> Result<Tensor> {
        self.style.apply(x)
    }

    /// `D(h_c(x_src), h_s(x_style))`, row by row.
    pub fn transform(&self, x_src: &Tensor, x_style: &Tensor) -> Result<Tensor> {
        if x_src.shape() != x_style.shape() {
            return Err(Error::Shape {
                op: "transform",
                lhs: x_src.shape().to_vec(),
                rhs: x_style.shape().to_vec(),
            });
        }
        let c = self.encode_content(x_src)?;
        let s = self.encode_style(x_style)?;
        let rows: Vec<Vec<f64>> = (0..c.rows())
            .map(|i| c.row(i).iter().chain(s.row(i)).copied().collect())
            .collect();
        self.decoder.apply(&Tensor::from_rows(&rows)?)
    }

    /// Mean over quartets of `|r1 - T(r1, r2)|_1 + |r3 - T(r3, r4)|_1`.
    pub fn r_inv(&self, batch: &QuartetBatch) -> Result<f64> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let roles: Vec<Var> = (0..4).map(|r| tape.leaf(batch.role_matrix(r))).collect();
        Ok(bound.r_inv(roles[0], roles[1], roles[2], roles[3])?.item())
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.content.params();
        p.extend(self.style.params());
        p.extend(self.decoder.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.content.params_mut();
        p.extend(self.style.params_mut());
        p.extend(self.decoder.params_mut());
        p
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundEncoder<'t> {
        BoundEncoder {
            content: self.content.bind(tape),
            style: self.style.bind(tape),
            decoder: self.decoder.bind(tape),
        }
    }
}

/// [`EncoderParams`] with its weights on a tape.
pub struct BoundEncoder<'t> {
    pub content: BoundMlp<'t>,
    pub style: BoundMlp<'t>,
    pub decoder: BoundMlp<'t>,
}

impl<'t> BoundEncoder<'t> {
    pub fn decode(&self, c: Var<'t>, s: Var<'t>) -> Result<Var<'t>> {
        self.decoder.forward(Var::concat_cols(&[c, s])?)
    }

    pub fn transform(&self, x_src: Var<'t>, x_style: Var<'t>) -> Result<Var<'t>> {
        self.decode(self.content.forward(x_src)?, self.style.forward(x_style)?)
    }

    pub fn r_inv(&self, r1: Var<'t>, r2: Var<'t>, r3: Var<'t>, r4: Var<'t>) -> Result<Var<'t>> {
        let t12 = self.transform(r1, r2)?;
        let t34 = self.transform(r3, r4)?;
        let d1 = r1.l1_rows(t12)?;
        let d3 = r3.l1_rows(t34)?;
        Ok(d1.add(d3)?.mean())
    }

    /// Gradients in the order of [`EncoderParams::params`].
    pub fn grads(&self, g: &Gradients) -> Vec<Tensor> {
        let mut out = self.content.grads(g);
        out.extend(self.style.grads(g));
        out.extend(self.decoder.grads(g));
        out
    }
}

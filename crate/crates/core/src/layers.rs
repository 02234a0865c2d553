//! Small parameterized building blocks shared by the tokenizer and the
//! transformer.

use flexvar_tensor::{rng, Bound, Float, Graph, ParamId, ParamSet, Rng, Tensor, Var};

use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// Gaussian weights with standard deviation `std`, zero bias.
    pub fn new<T: Float>(
        ps: &mut ParamSet<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        std: f64,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), rng::normal(rng, &[inputs, outputs], std), true);
        let b = bias.then(|| ps.add(format!("{name}.b"), Tensor::zeros(&[outputs]), false));
        Self { w, b }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.linear(x, p[self.w], self.b.map(|b| p[b]))?)
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<T: Float>(ps: &mut ParamSet<T>, name: &str, n: usize) -> Self {
        let gamma = ps.add(format!("{name}.g"), Tensor::full(&[n], T::one()), false);
        let beta = ps.add(format!("{name}.b"), Tensor::zeros(&[n]), false);
        Self { gamma, beta }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.layer_norm(x, Some(p[self.gamma]), Some(p[self.beta]))?)
    }
}

/// Pre-norm residual MLP: `x + fc2(gelu(fc1(norm(x))))`.
#[derive(Clone, Debug)]
pub struct MlpBlock {
    pub norm: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl MlpBlock {
    pub fn new<T: Float>(
        ps: &mut ParamSet<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        out_std: f64,
        rng: &mut Rng,
    ) -> Self {
        let norm = Norm::new(ps, &format!("{name}.norm"), dim);
        let fc1 = Linear::new(ps, &format!("{name}.fc1"), dim, hidden, (1.0 / dim as f64).sqrt(), true, rng);
        let fc2 = Linear::new(ps, &format!("{name}.fc2"), hidden, dim, out_std, true, rng);
        Self { norm, fc1, fc2 }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, p, x)?;
        let h = self.fc1.forward(g, p, h)?;
        let h = g.gelu(h)?;
        let h = self.fc2.forward(g, p, h)?;
        Ok(g.add(x, h)?)
    }
}

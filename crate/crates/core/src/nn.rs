//! Small building blocks shared by the model components.

use rand::Rng;

use crate::tensor::{Graph, ParamId, ParamStore, Real, Result, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// N(0, gain²/fan_in)
    Normal(f64),
    Zeros,
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = match init {
            Init::Normal(gain) => store.normal(&format!("{name}.w"), &[fan_in, fan_out], gain, rng)?,
            Init::Zeros => store.zeros(&format!("{name}.w"), &[fan_in, fan_out])?,
        };
        let b = if bias {
            Some(store.zeros(&format!("{name}.b"), &[fan_out])?)
        } else {
            None
        };
        Ok(Self { w, b, fan_in, fan_out })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w)?;
        let b = self.b.map(|b| g.param(b)).transpose()?;
        g.linear(x, w, b)
    }
}

/// Linear layers with SiLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths = [in, h1, ..., out]`; `last` sets the final layer's init.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        widths: &[usize],
        last: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let init = if i + 1 == n { last } else { Init::Normal(1.0) };
                Linear::new(store, &format!("{name}.{i}"), widths[i], widths[i + 1], true, init, rng)
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, mut x: Var) -> Result<Var> {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, x)?;
            if i + 1 < n {
                x = g.silu(x)?;
            }
        }
        Ok(x)
    }

    /// Same as [`Mlp::forward`] but with SiLU after every layer.
    pub fn forward_act<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.forward(g, x)?;
        g.silu(y)
    }
}

/// Step-size conditioned feature modulation `γ(c)⊙x + β(c)` with
/// `γ = 1 + MLP(c)[..D]`, `β = MLP(c)[D..]`. The last layer starts at zero,
/// so a fresh layer is the identity.
#[derive(Debug, Clone)]
pub struct Film {
    pub mlp: Mlp,
    pub width: usize,
}

impl Film {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, name, &[2, hidden, 2 * width], Init::Zeros, rng)?,
            width,
        })
    }

    /// Returns `(γ, β)`, each `[width]`.
    pub fn coefficients<T: Real>(&self, g: &mut Graph<'_, T>, code: Var) -> Result<(Var, Var)> {
        let out = self.mlp.forward(g, code)?;
        let out = g.reshape(out, &[2 * self.width])?;
        let parts = g.split(out, 0, &[self.width, self.width])?;
        let gamma = g.add_scalar(parts[0], T::one())?;
        Ok((gamma, parts[1]))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, code: Var) -> Result<Var> {
        let (gamma, beta) = self.coefficients(g, code)?;
        let y = g.mul(x, gamma)?;
        g.add(y, beta)
    }
}

/// The FiLM input `c = (s/10, (s/10)²)` for step size `s`.
pub fn step_code(step: f64) -> [f64; 2] {
    let s = step / 10.0;
    [s, s * s]
}

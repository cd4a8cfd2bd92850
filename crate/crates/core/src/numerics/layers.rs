use super::{Graph, ParamStore, Var, LN_EPS};
use crate::error::Result;

/// `x · {prefix}.w + {prefix}.b`, applied to every row of `x`.
pub fn linear(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Layer normalisation with `{prefix}.gain` / `{prefix}.bias`.
pub fn layer_norm(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let gain = g.param(store, &format!("{prefix}.gain"))?;
    let bias = g.param(store, &format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias, LN_EPS)
}

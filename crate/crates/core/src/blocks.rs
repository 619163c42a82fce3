//! Attention, transformer layers and the gated attention unit.
//!
//! Every block is a small struct of indices into a [`ParamSet`]; its forward
//! pass takes the vars produced by [`ParamSet::bind`]. Layers are pre-norm
//! residual with a GELU feed-forward of width `4 * dim`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numkit::{Graph, ParamSet, Tensor, Var};

/// Affine map `x W + b` with `W: in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        let w = ps.push(
            format!("{name}.w"),
            Tensor::new(vec![in_dim, out_dim], data).expect("linear shape"),
        );
        let b = ps.push(format!("{name}.b"), Tensor::zeros(&[1, out_dim]));
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w])?;
        g.add_row(y, p[self.b])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: usize,
    pub bias: usize,
}

impl LayerNormParams {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        LayerNormParams {
            gain: ps.push(format!("{name}.gain"), Tensor::filled(&[1, dim], 1.0)),
            bias: ps.push(format!("{name}.bias"), Tensor::zeros(&[1, dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gain], p[self.bias])
    }
}

/// Multi-head projections. Heads are packed column-wise: head `h` uses
/// columns `h * d_k .. (h + 1) * d_k` of the Q/K/V projections.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionParams {
    /// Queries come from width `dim`, keys and values from width `kv_dim`.
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "{name}: {heads} heads do not divide model width {dim}"
            )));
        }
        Ok(AttentionParams {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(ps, &format!("{name}.k"), kv_dim, dim, rng),
            v: Linear::new(ps, &format!("{name}.v"), kv_dim, dim, rng),
            out: Linear::new(ps, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// `softmax(Q K^T / sqrt(d_k)) V`. With `causal`, query row `i` only sees
/// key rows `0..=i`.
pub fn scaled_attention(g: &mut Graph, q: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
    let (qv, kv, vv) = (g.value(q), g.value(k), g.value(v));
    if qv.cols() != kv.cols() || kv.rows() != vv.rows() {
        return Err(Error::dim(format!(
            "attention Q {:?}, K {:?}, V {:?}",
            qv.shape(),
            kv.shape(),
            vv.shape()
        )));
    }
    let d_k = qv.cols() as f64;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / d_k.sqrt())?;
    let weights = if causal {
        g.softmax_rows_causal(scores)?
    } else {
        g.softmax_rows(scores)?
    };
    g.matmul(weights, v)
}

/// Per-head scaled attention over projected inputs, concatenated and
/// mapped by the output projection.
pub fn multi_head_attention(
    g: &mut Graph,
    p: &[Var],
    attn: &AttentionParams,
    x_q: Var,
    x_kv: Var,
    causal: bool,
) -> Result<Var> {
    if g.value(x_q).cols() != attn.q.in_dim || g.value(x_kv).cols() != attn.k.in_dim {
        return Err(Error::dim(format!(
            "attention expects query width {} and key width {}, got {:?} and {:?}",
            attn.q.in_dim,
            attn.k.in_dim,
            g.value(x_q).shape(),
            g.value(x_kv).shape()
        )));
    }
    let q = attn.q.forward(g, p, x_q)?;
    let k = attn.k.forward(g, p, x_kv)?;
    let v = attn.v.forward(g, p, x_kv)?;
    let concat = if attn.heads == 1 {
        scaled_attention(g, q, k, v, causal)?
    } else {
        let dk = attn.head_dim();
        let mut heads = Vec::with_capacity(attn.heads);
        for h in 0..attn.heads {
            let (lo, hi) = (h * dk, (h + 1) * dk);
            let qh = g.slice_cols(q, lo, hi)?;
            let kh = g.slice_cols(k, lo, hi)?;
            let vh = g.slice_cols(v, lo, hi)?;
            heads.push(scaled_attention(g, qh, kh, vh, causal)?);
        }
        g.concat_cols(&heads)?
    };
    attn.out.forward(g, p, concat)
}

/// Causal self-attention over a unimodal prefix.
pub fn intra_modality_attention(
    g: &mut Graph,
    p: &[Var],
    attn: &AttentionParams,
    z_prefix: Var,
) -> Result<Var> {
    if g.value(z_prefix).rows() == 0 || g.value(z_prefix).numel() == 0 {
        return Err(Error::contract("intra-modality attention over an empty prefix"));
    }
    multi_head_attention(g, p, attn, z_prefix, z_prefix, true)
}

/// Cross-attention: queries from the prefix, keys and values from the text
/// condition, no mask on the condition.
pub fn inter_modality_attention(
    g: &mut Graph,
    p: &[Var],
    attn: &AttentionParams,
    z_prefix: Var,
    condition: Var,
) -> Result<Var> {
    if g.value(condition).rows() == 0 || g.value(condition).numel() == 0 {
        return Err(Error::contract("inter-modality attention with an empty condition"));
    }
    multi_head_attention(g, p, attn, z_prefix, condition, false)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

/// Pre-norm layer: self-attention, optional cross-attention on a
/// condition, then feed-forward; each wrapped in a residual.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLayerParams {
    pub norm_self: LayerNormParams,
    pub self_attn: AttentionParams,
    pub cross: Option<(LayerNormParams, AttentionParams)>,
    pub norm_ff: LayerNormParams,
    pub ff: FeedForward,
    pub causal: bool,
    pub dim: usize,
}

impl TransformerLayerParams {
    /// `cond_dim = Some(d)` adds a cross-attention sub-block keyed on a
    /// condition of width `d`.
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        cond_dim: Option<usize>,
        causal: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let norm_self = LayerNormParams::new(ps, &format!("{name}.ln_self"), dim);
        let self_attn = AttentionParams::new(ps, &format!("{name}.self"), dim, dim, heads, rng)?;
        let cross = match cond_dim {
            Some(cd) => Some((
                LayerNormParams::new(ps, &format!("{name}.ln_cross"), dim),
                AttentionParams::new(ps, &format!("{name}.cross"), dim, cd, heads, rng)?,
            )),
            None => None,
        };
        let norm_ff = LayerNormParams::new(ps, &format!("{name}.ln_ff"), dim);
        let ff = FeedForward {
            up: Linear::new(ps, &format!("{name}.ff_up"), dim, 4 * dim, rng),
            down: Linear::new(ps, &format!("{name}.ff_down"), 4 * dim, dim, rng),
        };
        Ok(TransformerLayerParams {
            norm_self,
            self_attn,
            cross,
            norm_ff,
            ff,
            causal,
            dim,
        })
    }
}

pub fn transformer_layer(
    g: &mut Graph,
    p: &[Var],
    layer: &TransformerLayerParams,
    input: Var,
    condition: Option<Var>,
) -> Result<Var> {
    if g.value(input).cols() != layer.dim {
        return Err(Error::dim(format!(
            "layer of width {} given input {:?}",
            layer.dim,
            g.value(input).shape()
        )));
    }
    let normed = layer.norm_self.forward(g, p, input)?;
    let attended = if layer.causal {
        intra_modality_attention(g, p, &layer.self_attn, normed)?
    } else {
        multi_head_attention(g, p, &layer.self_attn, normed, normed, false)?
    };
    let mut h = g.add(input, attended)?;
    match (&layer.cross, condition) {
        (Some((norm, attn)), Some(cond)) => {
            let normed = norm.forward(g, p, h)?;
            let crossed = inter_modality_attention(g, p, attn, normed, cond)?;
            h = g.add(h, crossed)?;
        }
        (None, Some(_)) => {
            return Err(Error::config(
                "condition supplied to a layer built without cross-attention",
            ))
        }
        (Some(_), None) => {
            return Err(Error::contract(
                "layer with cross-attention called without a condition",
            ))
        }
        (None, None) => {}
    }
    let normed = layer.norm_ff.forward(g, p, h)?;
    let up = layer.ff.up.forward(g, p, normed)?;
    let act = g.gelu(up)?;
    let down = layer.ff.down.forward(g, p, act)?;
    g.add(h, down)
}

/// Per-modality gate: a square linear map followed by a sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub linear: Linear,
}

impl GateParams {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, dim: usize, rng: &mut R) -> Self {
        GateParams {
            linear: Linear::new(ps, name, dim, dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.linear.in_dim
    }
}

/// Returns `(sigmoid(h W + b) * h, sigmoid(h W + b))`.
pub fn gated_attention(g: &mut Graph, p: &[Var], gate: &GateParams, h: Var) -> Result<(Var, Var)> {
    if g.value(h).cols() != gate.dim() {
        return Err(Error::dim(format!(
            "gate of width {} given {:?}",
            gate.dim(),
            g.value(h).shape()
        )));
    }
    let pre = gate.linear.forward(g, p, h)?;
    let gv = g.sigmoid(pre)?;
    let out = g.mul(gv, h)?;
    Ok((out, gv))
}

/// Sinusoidal position table of shape `len x dim`.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, dim], data).expect("positional table shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::gradcheck::check_gradients;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(r, c, data).unwrap()
    }

    /// Direct triple-loop evaluation of softmax(QK^T/sqrt(d))V.
    fn attention_oracle(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Vec<Vec<f64>> {
        let d = q.cols() as f64;
        (0..q.rows())
            .map(|i| {
                let n = if causal { i + 1 } else { k.rows() };
                let w: Vec<f64> = (0..n)
                    .map(|j| {
                        let s: f64 = (0..q.cols()).map(|c| q.get(i, c) * k.get(j, c)).sum();
                        (s / d.sqrt()).exp()
                    })
                    .collect();
                let z: f64 = w.iter().sum();
                (0..v.cols())
                    .map(|c| (0..n).map(|j| w[j] / z * v.get(j, c)).sum())
                    .collect()
            })
            .collect()
    }

    fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let y = x.matmul(w).unwrap();
        let n = y.cols();
        let mut out = y.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b.data()[i % n];
        }
        out
    }

    fn run_attn(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Tensor {
        let mut g = Graph::inference();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let out = scaled_attention(&mut g, qv, kv, vv, causal).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = rand_tensor(&mut rng, 3, 4);
        let k = rand_tensor(&mut rng, 1, 4);
        let v = rand_tensor(&mut rng, 1, 2);
        let out = run_attn(&q, &k, &v, false);
        for i in 0..3 {
            assert_eq!(out.row_slice(i), v.row_slice(0));
        }
    }

    #[test]
    fn zero_scores_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = Tensor::zeros(&[2, 3]);
        let k = rand_tensor(&mut rng, 4, 3);
        let v = rand_tensor(&mut rng, 4, 2);
        let out = run_attn(&q, &k, &v, false);
        let mean = v.mean_rows().unwrap();
        for i in 0..2 {
            for c in 0..2 {
                assert!((out.get(i, c) - mean.data()[c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn attention_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for causal in [false, true] {
            let q = rand_tensor(&mut rng, 3, 3);
            let k = rand_tensor(&mut rng, 3, 3);
            let v = rand_tensor(&mut rng, 3, 3);
            let out = run_attn(&q, &k, &v, causal);
            let oracle = attention_oracle(&q, &k, &v, causal);
            for i in 0..3 {
                for c in 0..3 {
                    assert!((out.get(i, c) - oracle[i][c]).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn attention_dimension_mismatch() {
        let mut g = Graph::inference();
        let q = g.constant(Tensor::zeros(&[2, 3]));
        let k = g.constant(Tensor::zeros(&[2, 4]));
        let v = g.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(
            scaled_attention(&mut g, q, k, v, false),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn heads_must_divide_width() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = AttentionParams::new(&mut ps, "a", 6, 6, 4, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn one_head_is_projected_scaled_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamSet::new();
        let attn = AttentionParams::new(&mut ps, "a", 4, 4, 1, &mut rng).unwrap();
        let x = rand_tensor(&mut rng, 3, 4);
        let mut g = Graph::inference();
        let p = ps.bind(&mut g, false).unwrap();
        let xv = g.constant(x.clone());
        let out = multi_head_attention(&mut g, &p, &attn, xv, xv, false).unwrap();
        assert_eq!(g.value(out).shape(), &[3, 4]);

        let t = ps.tensors();
        let q = affine(&x, &t[attn.q.w], &t[attn.q.b]);
        let k = affine(&x, &t[attn.k.w], &t[attn.k.b]);
        let v = affine(&x, &t[attn.v.w], &t[attn.v.b]);
        let inner = Tensor::from_rows(&attention_oracle(&q, &k, &v, false)).unwrap();
        let expected = affine(&inner, &t[attn.out.w], &t[attn.out.b]);
        assert!(g.value(out).max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn two_heads_match_manual_per_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::new();
        let attn = AttentionParams::new(&mut ps, "a", 4, 4, 2, &mut rng).unwrap();
        let x = rand_tensor(&mut rng, 3, 4);
        let mut g = Graph::inference();
        let p = ps.bind(&mut g, false).unwrap();
        let xv = g.constant(x.clone());
        let out = multi_head_attention(&mut g, &p, &attn, xv, xv, true).unwrap();

        let t = ps.tensors();
        let q = affine(&x, &t[attn.q.w], &t[attn.q.b]);
        let k = affine(&x, &t[attn.k.w], &t[attn.k.b]);
        let v = affine(&x, &t[attn.v.w], &t[attn.v.b]);
        let cols = |m: &Tensor, lo: usize| {
            let rows: Vec<Vec<f64>> = (0..m.rows()).map(|i| m.row_slice(i)[lo..lo + 2].to_vec()).collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let h0 = attention_oracle(&cols(&q, 0), &cols(&k, 0), &cols(&v, 0), true);
        let h1 = attention_oracle(&cols(&q, 2), &cols(&k, 2), &cols(&v, 2), true);
        let joined: Vec<Vec<f64>> = h0.iter().zip(&h1).map(|(a, b)| [a.clone(), b.clone()].concat()).collect();
        let expected = affine(&Tensor::from_rows(&joined).unwrap(), &t[attn.out.w], &t[attn.out.b]);
        assert!(g.value(out).max_abs_diff(&expected) <= 1e-10);
    }

    fn causal_layer(rng: &mut ChaCha8Rng, dim: usize, heads: usize, cond: Option<usize>) -> (ParamSet, TransformerLayerParams) {
        let mut ps = ParamSet::new();
        let layer = TransformerLayerParams::new(&mut ps, "l", dim, heads, cond, true, rng).unwrap();
        (ps, layer)
    }

    #[test]
    fn intra_single_vector_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut ps = ParamSet::new();
        let attn = AttentionParams::new(&mut ps, "a", 4, 4, 2, &mut rng).unwrap();
        let z = rand_tensor(&mut rng, 1, 4);
        let mut g = Graph::inference();
        let p = ps.bind(&mut g, false).unwrap();
        let zv = g.constant(z.clone());
        let out = intra_modality_attention(&mut g, &p, &attn, zv).unwrap();
        // With one key the softmax is 1, so the result is (z W_v + b_v) W_o + b_o.
        let t = ps.tensors();
        let v = affine(&z, &t[attn.v.w], &t[attn.v.b]);
        let expected = affine(&v, &t[attn.out.w], &t[attn.out.b]);
        assert!(g.value(out).max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn intra_equals_causal_self_mha() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamSet::new();
        let attn = AttentionParams::new(&mut ps, "a", 4, 4, 2, &mut rng).unwrap();
        let z = rand_tensor(&mut rng, 5, 4);
        let mut g = Graph::inference();
        let p = ps.bind(&mut g, false).unwrap();
        let zv = g.constant(z);
        let a = intra_modality_attention(&mut g, &p, &attn, zv).unwrap();
        let b = multi_head_attention(&mut g, &p, &attn, zv, zv, true).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn intra_rejects_empty_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamSet::new();
        let attn = AttentionParams::new(&mut ps, "a", 4, 4, 2, &mut rng).unwrap();
        let mut g = Graph::inference();
        let p = ps.bind(&mut g, false).unwrap();
        let zv = g.constant(Tensor::zeros(&[0, 4]));
        assert!(matches!(
            intra_modality_attention(&mut g, &p, &attn, zv),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn inter_single_condition_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut ps = ParamSet::new();
        let attn = AttentionParams::new(&mut ps, "a", 4, 6, 2, &mut rng).unwrap();
        let z = rand_tensor(&mut rng, 3, 4);
        let xt = rand_tensor(&mut rng, 1, 6);
        let mut g = Graph::inference();
        let p = ps.bind(&mut g, false).unwrap();
        let (zv, xv) = (g.constant(z), g.constant(xt.clone()));
        let out = inter_modality_attention(&mut g, &p, &attn, zv, xv).unwrap();
        let t = ps.tensors();
        let v = affine(&xt, &t[attn.v.w], &t[attn.v.b]);
        let expected = affine(&v, &t[attn.out.w], &t[attn.out.b]);
        for i in 0..3 {
            let row = Tensor::row(g.value(out).row_slice(i));
            assert!(row.max_abs_diff(&expected) < 1e-12);
        }
    }

    #[test]
    fn inter_is_row_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ps = ParamSet::new();
        let attn = AttentionParams::new(&mut ps, "a", 4, 6, 2, &mut rng).unwrap();
        let z = rand_tensor(&mut rng, 3, 4);
        let perm = [2usize, 0, 1];
        let zp = Tensor::from_rows(&perm.iter().map(|&i| z.row_slice(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let xt = rand_tensor(&mut rng, 4, 6);
        let mut g = Graph::inference();
        let p = ps.bind(&mut g, false).unwrap();
        let (zv, zpv, xv) = (g.constant(z), g.constant(zp), g.constant(xt));
        let a = inter_modality_attention(&mut g, &p, &attn, zv, xv).unwrap();
        let b = inter_modality_attention(&mut g, &p, &attn, zpv, xv).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(g.value(b).row_slice(k), g.value(a).row_slice(i));
        }
    }

    #[test]
    fn inter_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut ps = ParamSet::new();
        let attn = AttentionParams::new(&mut ps, "a", 2, 3, 1, &mut rng).unwrap();
        let z = rand_tensor(&mut rng, 2, 2);
        let xt = rand_tensor(&mut rng, 3, 3);
        let mut g = Graph::inference();
        let p = ps.bind(&mut g, false).unwrap();
        let (zv, xv) = (g.constant(z.clone()), g.constant(xt.clone()));
        let out = inter_modality_attention(&mut g, &p, &attn, zv, xv).unwrap();
        let t = ps.tensors();
        let q = affine(&z, &t[attn.q.w], &t[attn.q.b]);
        let k = affine(&xt, &t[attn.k.w], &t[attn.k.b]);
        let v = affine(&xt, &t[attn.v.w], &t[attn.v.b]);
        let inner = Tensor::from_rows(&attention_oracle(&q, &k, &v, false)).unwrap();
        let expected = affine(&inner, &t[attn.out.w], &t[attn.out.b]);
        assert!(g.value(out).max_abs_diff(&expected) <= 1e-10);
    }

    #[test]
    fn inter_condition_width_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut ps = ParamSet::new();
        let attn = AttentionParams::new(&mut ps, "a", 2, 3, 1, &mut rng).unwrap();
        let mut g = Graph::inference();
        let p = ps.bind(&mut g, false).unwrap();
        let zv = g.constant(Tensor::zeros(&[2, 2]));
        let xv = g.constant(Tensor::zeros(&[2, 5]));
        assert!(matches!(
            inter_modality_attention(&mut g, &p, &attn, zv, xv),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn layer_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (ps, layer) = causal_layer(&mut rng, 8, 2, Some(5));
        for len in [1, 4, 16] {
            let x = rand_tensor(&mut rng, len, 8);
            let c = rand_tensor(&mut rng, 3, 5);
            let mut g = Graph::inference();
            let p = ps.bind(&mut g, false).unwrap();
            let (xv, cv) = (g.constant(x), g.constant(c));
            let out = transformer_layer(&mut g, &p, &layer, xv, Some(cv)).unwrap();
            assert_eq!(g.value(out).shape(), &[len, 8]);
        }
    }

    #[test]
    fn zeroed_residual_branches_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (mut ps, layer) = causal_layer(&mut rng, 4, 2, Some(3));
        let (attn_o, cross_o) = (&layer.self_attn.out, &layer.cross.as_ref().unwrap().1.out);
        for idx in [attn_o.w, attn_o.b, cross_o.w, cross_o.b, layer.ff.down.w, layer.ff.down.b] {
            let shape = ps.get(idx).shape().to_vec();
            ps.tensors_mut()[idx] = Tensor::zeros(&shape);
        }
        let x = rand_tensor(&mut rng, 3, 4);
        let mut g = Graph::inference();
        let p = ps.bind(&mut g, false).unwrap();
        let xv = g.constant(x.clone());
        let cv = g.constant(rand_tensor(&mut rng, 2, 3));
        let out = transformer_layer(&mut g, &p, &layer, xv, Some(cv)).unwrap();
        assert_eq!(g.value(out), &x);
    }

    #[test]
    fn condition_without_cross_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (ps, layer) = causal_layer(&mut rng, 4, 1, None);
        let mut g = Graph::inference();
        let p = ps.bind(&mut g, false).unwrap();
        let xv = g.constant(Tensor::zeros(&[2, 4]));
        let cv = g.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(
            transformer_layer(&mut g, &p, &layer, xv, Some(cv)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (ps, layer) = causal_layer(&mut rng, 4, 2, Some(3));
        let x = rand_tensor(&mut rng, 3, 4);
        let c = rand_tensor(&mut rng, 2, 3);
        let mut inputs = ps.tensors().to_vec();
        inputs.push(x);
        inputs.push(c);
        let n = ps.len();
        let err = check_gradients(&inputs, 1e-5, |g, v| {
            let out = transformer_layer(g, &v[..n], &layer, v[n], Some(v[n + 1]))?;
            let sq = g.mul(out, out)?;
            g.sum(sq)
        })
        .unwrap();
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn layer_is_causal_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (ps, layer) = causal_layer(&mut rng, 4, 2, Some(3));
        let x = rand_tensor(&mut rng, 5, 4);
        let c = rand_tensor(&mut rng, 2, 3);
        let run = |x: &Tensor| {
            let mut g = Graph::inference();
            let p = ps.bind(&mut g, false).unwrap();
            let (xv, cv) = (g.constant(x.clone()), g.constant(c.clone()));
            let o = transformer_layer(&mut g, &p, &layer, xv, Some(cv)).unwrap();
            g.value(o).clone()
        };
        let base = run(&x);
        let mut perturbed = x.clone();
        for j in 12..20 {
            perturbed.data_mut()[j] += 0.7;
        }
        let other = run(&perturbed);
        for i in 0..3 {
            assert_eq!(base.row_slice(i), other.row_slice(i));
        }
        assert_ne!(base.row_slice(4), other.row_slice(4));
    }

    fn gate_with(w: Tensor, b: Tensor) -> (ParamSet, GateParams) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gate = GateParams::new(&mut ps, "gate", w.rows(), &mut rng);
        ps.tensors_mut()[gate.linear.w] = w;
        ps.tensors_mut()[gate.linear.b] = b;
        (ps, gate)
    }

    fn run_gate(ps: &ParamSet, gate: &GateParams, h: &[f64]) -> (Tensor, Tensor) {
        let mut g = Graph::inference();
        let p = ps.bind(&mut g, false).unwrap();
        let hv = g.constant(Tensor::row(h));
        let (o, gv) = gated_attention(&mut g, &p, gate, hv).unwrap();
        (g.value(o).clone(), g.value(gv).clone())
    }

    #[test]
    fn zero_gate_halves_input() {
        let (ps, gate) = gate_with(Tensor::zeros(&[3, 3]), Tensor::zeros(&[1, 3]));
        let (out, _) = run_gate(&ps, &gate, &[1.0, -2.0, 4.0]);
        assert_eq!(out.data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn saturated_gate_passes_input() {
        let (ps, gate) = gate_with(Tensor::zeros(&[2, 2]), Tensor::filled(&[1, 2], 20.0));
        let (out, _) = run_gate(&ps, &gate, &[1.5, -0.5]);
        assert!(out.max_abs_diff(&Tensor::row(&[1.5, -0.5])) < 1e-8);
    }

    #[test]
    fn gate_hand_case() {
        let (ps, gate) = gate_with(Tensor::identity(2), Tensor::zeros(&[1, 2]));
        let (out, gv) = run_gate(&ps, &gate, &[1.0, -1.0]);
        let s1 = 1.0 / (1.0 + (-1.0f64).exp());
        let sm1 = 1.0 / (1.0 + 1.0f64.exp());
        assert!((out.data()[0] - s1).abs() < 1e-15);
        assert!((out.data()[1] + sm1).abs() < 1e-15);
        assert!((gv.data()[1] - sm1).abs() < 1e-15);
    }

    #[test]
    fn gate_dimension_mismatch() {
        let (ps, gate) = gate_with(Tensor::zeros(&[2, 2]), Tensor::zeros(&[1, 2]));
        let mut g = Graph::inference();
        let p = ps.bind(&mut g, false).unwrap();
        let hv = g.constant(Tensor::row(&[1.0, 2.0, 3.0]));
        assert!(gated_attention(&mut g, &p, &gate, hv).is_err());
    }

    #[test]
    fn gate_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut ps = ParamSet::new();
        let gate = GateParams::new(&mut ps, "gate", 5, &mut rng);
        let mut inputs = ps.tensors().to_vec();
        inputs.push(rand_tensor(&mut rng, 1, 5));
        let err = check_gradients(&inputs, 1e-5, |g, v| {
            let (o, _) = gated_attention(g, &v[..2], &gate, v[2])?;
            let sq = g.mul(o, o)?;
            g.sum(sq)
        })
        .unwrap();
        assert!(err <= 1e-4, "relative error {err}");
    }

    proptest! {
        #[test]
        fn gate_values_in_open_unit_interval(h in proptest::collection::vec(-5.0f64..5.0, 4), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ps = ParamSet::new();
            let gate = GateParams::new(&mut ps, "gate", 4, &mut rng);
            let (_, gv) = run_gate(&ps, &gate, &h);
            for &v in gv.data() {
                prop_assert!(v > 0.0 && v < 1.0);
            }
        }
    }
}

#![allow(dead_code)]

use maslora::model::{ModelConfig, Route, Transformer};
use maslora::numcore::{Mat, Rng, Tape, LN_EPS};

pub const H: f64 = 1e-5;

pub fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-6)
}

/// Three-layer perceptron with a layer norm, scored by cross-entropy.
pub fn mlp_loss<'a>(t: &mut Tape<'a>, p: &'a [Mat], x: &Mat, y: &[usize]) -> maslora::Result<maslora::numcore::Var> {
    let v: Vec<_> = p.iter().map(|m| t.param(m, true)).collect();
    let x = t.leaf(x.clone(), false);
    let h = t.matmul(x, v[0])?;
    let h = t.add_row(h, v[1])?;
    let h = t.layer_norm(h, v[2], v[3], LN_EPS)?;
    let h = t.gelu(h);
    let h = t.matmul(h, v[4])?;
    let h = t.add_row(h, v[5])?;
    let h = t.gelu(h);
    let o = t.matmul(h, v[6])?;
    let o = t.add_row(o, v[7])?;
    t.cross_entropy(o, y, usize::MAX)
}

pub fn mlp_params(rng: &mut Rng) -> Vec<Mat> {
    vec![
        rng.gaussian_mat(5, 12, 0.5),
        rng.gaussian_mat(1, 12, 0.1),
        rng.uniform_mat(1, 12, 0.5, 1.5),
        rng.gaussian_mat(1, 12, 0.1),
        rng.gaussian_mat(12, 12, 0.3),
        rng.gaussian_mat(1, 12, 0.1),
        rng.gaussian_mat(12, 4, 0.3),
        rng.gaussian_mat(1, 4, 0.1),
    ]
}

/// Largest relative error between tape gradients and central differences.
pub fn mlp_max_rel_err(seed: u64) -> (usize, f64) {
    let mut rng = Rng::new(seed);
    let params = mlp_params(&mut rng);
    let x = rng.gaussian_mat(6, 5, 1.0);
    let y = [0, 3, 1, 2, 2, 0];
    let mut t = Tape::new();
    let loss = mlp_loss(&mut t, &params, &x, &y).unwrap();
    t.backprop(loss).unwrap();
    let analytic: Vec<Mat> = params.iter().map(|p| t.param_grad(p).unwrap().clone()).collect();
    let n: usize = params.iter().map(Mat::len).sum();
    let eval = |ps: &[Mat]| {
        let mut t = Tape::new();
        let l = mlp_loss(&mut t, ps, &x, &y).unwrap();
        t.scalar(l)
    };
    let mut worst: f64 = 0.0;
    let mut ps = params.clone();
    for k in 0..ps.len() {
        for i in 0..ps[k].len() {
            let orig = ps[k].data()[i];
            ps[k].data_mut()[i] = orig + H;
            let up = eval(&ps);
            ps[k].data_mut()[i] = orig - H;
            let down = eval(&ps);
            ps[k].data_mut()[i] = orig;
            worst = worst.max(rel_err(analytic[k].data()[i], (up - down) / (2.0 * H)));
        }
    }
    (n, worst)
}

pub fn tiny_cfg() -> ModelConfig {
    ModelConfig { vocab_size: 8, d_model: 8, n_heads: 2, enc_layers: 1, dec_layers: 1, ffn_dim: 8, max_len: 8 }
}

/// Largest relative error over every trainable scalar of `m` under `route`.
pub fn transformer_max_rel_err(m: &Transformer, route: &Route) -> (f64, String) {
    let src = [3, 5, 4, 7, 6];
    let reference = [4, 3, 6];
    let (_, grads) = m.loss_and_grads(&src, &reference, route).unwrap();
    let mut probe = m.clone();
    let mut targets = Vec::new();
    let mut k = 0;
    m.visit_params(&mut |path, mat, _| {
        if let Some(g) = &grads[k] {
            for i in 0..mat.len() {
                targets.push((k, path.to_string(), i, g.data()[i]));
            }
        }
        k += 1;
    });
    assert!(!targets.is_empty());
    let loss_of = |mm: &Transformer| {
        let routing = mm.resolve(route).unwrap();
        let mut t = Tape::new();
        let l = mm.loss(&mut t, &src, &reference, routing.as_ref()).unwrap();
        t.scalar(l)
    };
    let mut worst: f64 = 0.0;
    let mut worst_at = String::new();
    for (k, path, i, a) in targets {
        let nudge = |mm: &mut Transformer, d: f64| {
            let mut j = 0;
            mm.visit_params_mut(&mut |_, mat, _| {
                if j == k {
                    mat.data_mut()[i] += d;
                }
                j += 1;
            });
        };
        let orig = probe.clone();
        nudge(&mut probe, H);
        let up = loss_of(&probe);
        probe = orig.clone();
        nudge(&mut probe, -H);
        let down = loss_of(&probe);
        probe = orig;
        let e = rel_err(a, (up - down) / (2.0 * H));
        if e > worst {
            worst = e;
            worst_at = format!("{path}[{i}]");
        }
    }
    (worst, worst_at)
}

//! Tape gradients against central finite differences, op by op and for whole
//! modules.

use lam_core::attention::{attend, fuse, FusionMode, MhaConfig, MhaLayer};
use lam_core::encoder::{Encoder, EncoderConfig, MaskStrategy};
use lam_core::gradcheck::{finite_diff_grad, finite_diff_module, max_relative_error, DEFAULT_STEP};
use lam_core::graph::BinaryOp;
use lam_core::lam::{FinalInit, LamConfig, LamModule, StaticMask};
use lam_core::module::{LayerNorm, Linear, Parameterized};
use lam_core::prng::{rand_uniform, Prng};
use lam_core::{Graph, NodeId, Result, Tensor};

const TOL: f64 = 1e-5;

type Build = dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>;

/// Projects `out` onto fixed pseudo-random weights so every output entry
/// carries a distinct upstream gradient.
fn project(g: &mut Graph, out: NodeId) -> NodeId {
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * 0.731).sin()).collect();
    let w = g.constant(Tensor::new(&shape, w).unwrap());
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

fn scalar_loss(build: &Build, inputs: &[Tensor], track: bool) -> (Graph, Vec<NodeId>, NodeId) {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| {
            if track {
                g.leaf(&t.clone().into_param())
            } else {
                g.constant(t.clone())
            }
        })
        .collect();
    let out = build(&mut g, &ids).unwrap();
    let loss = if g.shape(out) == [1] { out } else { project(&mut g, out) };
    (g, ids, loss)
}

fn check_op(name: &str, build: &Build, inputs: Vec<Tensor>) {
    let (mut g, ids, loss) = scalar_loss(build, &inputs, true);
    g.backward(loss).unwrap();
    let numeric = finite_diff_grad(
        |p| {
            let (g, _, l) = scalar_loss(build, p, false);
            g.value(l).item()
        },
        &inputs,
        DEFAULT_STEP,
    );
    for (i, (id, num)) in ids.iter().zip(&numeric).enumerate() {
        let analytic = g.grad(*id).unwrap();
        let err = max_relative_error(&analytic, num.data());
        assert!(err <= TOL, "{name}: input {i} rel err {err:e}");
    }
}

fn rand(seed: u64, shape: &[usize]) -> Tensor {
    rand_uniform(&mut Prng::new(seed), shape, -1.0, 1.0).unwrap()
}

/// Values bounded away from zero so ReLU kinks stay out of the stencil.
fn away_from_zero(seed: u64, shape: &[usize]) -> Tensor {
    let mut t = rand(seed, shape);
    for v in t.data_mut() {
        *v += 0.1 * v.signum();
    }
    t
}

#[test]
fn matrix_products() {
    check_op("matmul", &|g, x| g.matmul(x[0], x[1]), vec![rand(1, &[3, 4]), rand(2, &[4, 2])]);
    check_op("matmul_nt", &|g, x| g.matmul_nt(x[0], x[1]), vec![rand(3, &[3, 4]), rand(4, &[2, 4])]);
    check_op("transpose", &|g, x| g.transpose(x[0]), vec![rand(5, &[2, 3])]);
}

#[test]
fn broadcasting_elementwise() {
    for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul] {
        let b: &Build = &move |g, x| g.elementwise(x[0], x[1], op);
        check_op("same", b, vec![rand(6, &[3, 4]), rand(7, &[3, 4])]);
        check_op("row", b, vec![rand(8, &[3, 4]), rand(9, &[4])]);
        check_op("row2d", b, vec![rand(10, &[3, 4]), rand(11, &[1, 4])]);
        check_op("col", b, vec![rand(12, &[3, 4]), rand(13, &[3, 1])]);
    }
}

#[test]
fn pointwise_and_reductions() {
    check_op("relu", &|g, x| Ok(g.relu(x[0])), vec![away_from_zero(14, &[3, 4])]);
    check_op("scale", &|g, x| Ok(g.scale(x[0], -2.5)), vec![rand(15, &[2, 2])]);
    check_op("sum", &|g, x| Ok(g.sum(x[0])), vec![rand(16, &[2, 3])]);
    check_op("mean", &|g, x| Ok(g.mean(x[0])), vec![rand(17, &[2, 3])]);
    check_op("mean_rows", &|g, x| g.mean_rows(x[0]), vec![rand(18, &[4, 3])]);
}

#[test]
fn softmax_and_normalization() {
    check_op("softmax_rows", &|g, x| g.softmax_rows(x[0]), vec![rand(19, &[3, 4])]);
    check_op("layer_norm", &|g, x| g.layer_norm_rows(x[0], 1e-6), vec![rand(20, &[3, 4])]);
    check_op(
        "cross_entropy",
        &|g, x| g.cross_entropy_logits(x[0], &[2, 0, 1]),
        vec![rand(21, &[3, 4])],
    );
}

#[test]
fn views_and_joins() {
    check_op("slice", &|g, x| g.slice(x[0], 1..3, 0..2), vec![rand(22, &[4, 3])]);
    check_op("pad_cols", &|g, x| g.pad_cols(x[0], 4), vec![rand(23, &[2, 2])]);
    check_op(
        "concat_rows",
        &|g, x| g.concat_rows(x[0], x[1]),
        vec![rand(24, &[2, 3]), rand(25, &[1, 3])],
    );
    check_op(
        "concat_cols",
        &|g, x| g.concat_cols(&[x[0], x[1], x[0]]),
        vec![rand(26, &[2, 3]), rand(27, &[2, 1])],
    );
}

#[test]
fn fusion_and_attention() {
    for mode in [FusionMode::Multiply, FusionMode::Add] {
        check_op(
            "fuse",
            &move |g, x| fuse(g, x[0], Some(x[1]), mode),
            vec![rand(28, &[3, 3]), rand(29, &[3, 3])],
        );
        check_op(
            "attend",
            &move |g, x| attend(g, x[0], x[1], x[2], Some(x[3]), mode).map(|(o, _)| o),
            vec![rand(30, &[3, 4]), rand(31, &[2, 4]), rand(32, &[2, 3]), rand(33, &[3, 2])],
        );
    }
    check_op(
        "attend_unmasked",
        &|g, x| attend(g, x[0], x[1], x[2], None, FusionMode::None).map(|(o, _)| o),
        vec![rand(34, &[2, 4]), rand(35, &[3, 4]), rand(36, &[3, 2])],
    );
}

/// Compares tape and finite-difference gradients for every parameter of
/// `module` under the scalar objective built by `loss`.
fn check_module<M, F>(name: &str, module: &M, loss: F)
where
    M: Parameterized + Clone,
    F: Fn(&M, &mut Graph) -> NodeId,
{
    let mut g = Graph::new();
    let l = loss(module, &mut g);
    g.backward(l).unwrap();
    let numeric = finite_diff_module(
        module,
        |m| {
            let mut g = Graph::new();
            let l = loss(m, &mut g);
            g.value(l).item()
        },
        DEFAULT_STEP,
    );
    for ((pname, t), num) in module.named_params().into_iter().zip(&numeric) {
        let analytic = g.param_grad(t).unwrap_or_else(|| vec![0.0; t.numel()]);
        let err = max_relative_error(&analytic, num);
        assert!(err <= TOL, "{name}.{pname}: rel err {err:e}");
    }
}

#[test]
fn linear_and_layer_norm_modules() {
    let lin = Linear::glorot(&mut Prng::new(40), 3, 4);
    let x = rand(41, &[2, 3]);
    check_module("linear", &lin, |m, g| {
        let xi = g.constant(x.clone());
        let y = m.forward(g, xi).unwrap();
        project(g, y)
    });
    let mut ln = LayerNorm::new(4, 1e-6);
    ln.gain = rand(42, &[4]).into_param();
    let x = rand(43, &[3, 4]);
    check_module("layer_norm", &ln, |m, g| {
        let xi = g.constant(x.clone());
        let y = m.forward(g, xi).unwrap();
        project(g, y)
    });
}

fn glorot_lam(depth: usize, input_dim: usize, max: usize, seed: u64) -> LamModule {
    let mut cfg = LamConfig::uniform(depth, input_dim, 4, max);
    cfg.final_weight_init = FinalInit::Glorot;
    LamModule::new(cfg, &mut Prng::new(seed)).unwrap()
}

#[test]
fn lam_self_and_cross_modules() {
    for depth in [1, 2, 3] {
        let lam = glorot_lam(depth, 3, 4, 50 + depth as u64);
        for len in [2, 4] {
            let x = away_from_zero(51, &[len, 3]);
            check_module("lam_self", &lam, |m, g| {
                let xi = g.constant(x.clone());
                let mask = m.forward_self(g, xi).unwrap();
                project(g, mask.id)
            });
        }
        let lam = glorot_lam(depth, 4, 4, 60 + depth as u64);
        let scores = rand(61, &[2, 3]);
        check_module("lam_cross", &lam, |m, g| {
            let s = g.constant(scores.clone());
            let mask = m.forward_cross(g, s).unwrap();
            project(g, mask.id)
        });
    }
}

#[test]
fn static_mask_module() {
    let mut s = StaticMask::new(4, 1.0).unwrap();
    s.values = rand(70, &[4, 4]).into_param();
    let q = rand(71, &[3, 2]);
    let k = rand(72, &[3, 2]);
    let v = rand(73, &[3, 2]);
    check_module("static", &s, |m, g| {
        let mask = m.forward(g, 3).unwrap();
        let (qi, ki, vi) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let (o, _) = attend(g, qi, ki, vi, Some(mask.id), FusionMode::Multiply).unwrap();
        project(g, o)
    });
}

#[test]
fn multi_head_attention_module() {
    let cfg = MhaConfig {
        d_model: 4,
        n_heads: 2,
    };
    let mha = MhaLayer::new(cfg, &mut Prng::new(80)).unwrap();
    let lam = glorot_lam(2, 4, 3, 81);
    let x = rand(82, &[3, 4]);
    for mode in [FusionMode::Multiply, FusionMode::Add] {
        check_module("mha", &mha, |m, g| {
            let xi = g.constant(x.clone());
            let mask = lam.forward_self(g, xi).unwrap();
            let (y, _) = m.forward(g, xi, Some(mask), mode).unwrap();
            project(g, y)
        });
    }
}

fn tiny_encoder(strategy: MaskStrategy, fusion: FusionMode) -> Encoder {
    let lam = strategy.uses_lam().then(|| {
        let mut c = LamConfig::uniform(2, 4, 3, 4).with_final_bias(fusion.identity_value());
        c.final_weight_init = FinalInit::Glorot;
        c
    });
    Encoder::new(EncoderConfig {
        n_layers: 2,
        d_model: 4,
        n_heads: 2,
        ffn_hidden: 4,
        max_seq_len: 4,
        n_classes: 2,
        d_in: 3,
        strategy,
        fusion,
        lam,
        seed: 90,
    })
    .unwrap()
}

#[test]
fn encoder_end_to_end() {
    let x = rand(91, &[3, 3]);
    let arms = [
        (MaskStrategy::FullAttention, FusionMode::None),
        (MaskStrategy::StaticLearnable, FusionMode::Multiply),
        (MaskStrategy::GlobalLam, FusionMode::Add),
        (MaskStrategy::MultiLayerLam, FusionMode::Multiply),
        (
            MaskStrategy::ParamMatchedControl {
                extra_hidden_dims: vec![2],
            },
            FusionMode::None,
        ),
    ];
    for (strategy, fusion) in arms {
        let label = format!("{strategy:?}");
        let mut enc = tiny_encoder(strategy, fusion);
        // zero biases would park ReLU inputs exactly on the kink
        for (i, t) in enc.params_mut().into_iter().enumerate() {
            for (j, v) in t.data_mut().iter_mut().enumerate() {
                *v += 0.05 * ((i * 31 + j) as f64 * 0.37).sin();
            }
        }
        check_module(&label, &enc, |m, g| m.loss(g, &x, 1).unwrap().0);
    }
}

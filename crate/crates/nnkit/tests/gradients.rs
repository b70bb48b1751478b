//! Reverse-mode gradients against central finite differences, 64-bit.

use hfsig_nn::conv::{conv2d, conv2d_backward, conv_transpose2d, conv_transpose2d_backward};
use hfsig_nn::ops::{
    concat_channels, global_avg_pool, global_avg_pool_backward, split_channels,
};
use hfsig_nn::{
    bce_loss, grad_check, l1_loss, Activation, GradCheckConfig, GradCheckReport, Layer, LayerSpec, Result, Tensor,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn check<F>(f: F, tensors: &[Tensor<f64>]) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)>,
{
    let (_, analytic) = f(tensors)?;
    grad_check(|t| Ok(f(t)?.0), tensors, &analytic, &GradCheckConfig::default())
}

/// Scalar readout `⟨probe, y⟩` so every output element carries gradient.
fn readout(y: &Tensor<f64>, probe: &Tensor<f64>) -> (f64, Tensor<f64>) {
    (y.dot(probe).unwrap(), probe.clone())
}

fn check_layer(spec: LayerSpec, input_shape: &[usize], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer: Layer<f64> = Layer::xavier(spec, &mut rng).unwrap();
    let x = random(input_shape, &mut rng);
    let mut bias = random(&[spec.out_channels], &mut rng);
    bias.scale(0.1);
    let y0 = Layer::from_parts(spec, layer.weight.clone(), bias.clone())
        .unwrap()
        .forward(&x)
        .unwrap();
    let probe = random(y0.shape(), &mut rng);
    let f = |t: &[Tensor<f64>]| -> Result<(f64, Vec<Tensor<f64>>)> {
        let l = Layer::from_parts(spec, t[1].clone(), t[2].clone())?;
        let y = l.forward(&t[0])?;
        let (v, gy) = readout(&y, &probe);
        let g = l.backward(&t[0], &y, &gy, true)?;
        Ok((v, vec![g.input.unwrap(), g.weight, g.bias]))
    };
    let report = check(f, &[x, layer.weight, bias]).unwrap();
    assert!(report.coords_checked > 0);
    report.max_rel_error
}

#[test]
fn conv_stride_one() {
    let e = check_layer(LayerSpec::conv(2, 3, 1, Activation::None), &[2, 6, 5], 1);
    assert!(e <= TOL, "{e}");
}

#[test]
fn conv_stride_two() {
    let e = check_layer(LayerSpec::conv(3, 4, 2, Activation::None), &[3, 8, 10], 2);
    assert!(e <= TOL, "{e}");
}

#[test]
fn conv_relu() {
    let e = check_layer(LayerSpec::conv(2, 4, 2, Activation::Relu), &[2, 8, 8], 3);
    assert!(e <= TOL, "{e}");
}

#[test]
fn transposed_conv() {
    let e = check_layer(LayerSpec::upsample(4, 2, Activation::None), &[4, 3, 5], 4);
    assert!(e <= TOL, "{e}");
}

#[test]
fn pointwise_conv() {
    let e = check_layer(LayerSpec::pointwise(5, 1, Activation::None), &[5, 4, 6], 5);
    assert!(e <= TOL, "{e}");
}

#[test]
fn linear_sigmoid() {
    let e = check_layer(LayerSpec::linear(7, 3, Activation::Sigmoid), &[7], 6);
    assert!(e <= TOL, "{e}");
    let e = check_layer(LayerSpec::linear(5, 2, Activation::None), &[5], 7);
    assert!(e <= TOL, "{e}");
}

#[test]
fn global_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[3, 4, 5], &mut rng);
    let probe = random(&[3], &mut rng);
    let f = |t: &[Tensor<f64>]| -> Result<(f64, Vec<Tensor<f64>>)> {
        let y = global_avg_pool(&t[0])?;
        let (v, g) = readout(&y, &probe);
        Ok((v, vec![global_avg_pool_backward(t[0].shape(), &g)?]))
    };
    let r = check(f, &[x]).unwrap();
    assert!(r.passes(1e-6), "{r:?}");
    assert!(r.max_abs_error <= 1e-6);
}

#[test]
fn l1_off_the_kink() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random(&[20], &mut rng);
    // Keep every |a - b| well away from zero.
    let b = a.map(|v| v + if v > 0.0 { -0.3 } else { 0.4 });
    let f = |t: &[Tensor<f64>]| -> Result<(f64, Vec<Tensor<f64>>)> {
        let (v, g) = l1_loss(&t[0], &b)?;
        Ok((v, vec![g]))
    };
    let r = check(f, &[a]).unwrap();
    assert!(r.passes(1e-6), "{r:?}");
}

#[test]
fn bce_inside_clamp() {
    let p = Tensor::from_vec(&[4], vec![0.2, 0.7, 0.95, 0.4]).unwrap();
    let labels = [1.0, 0.0, 1.0, 0.0];
    let f = |t: &[Tensor<f64>]| -> Result<(f64, Vec<Tensor<f64>>)> {
        let (v, g) = bce_loss(t[0].data(), &labels)?;
        Ok((v, vec![Tensor::from_vec(&[4], g)?]))
    };
    let r = check(f, &[p]).unwrap();
    assert!(r.passes(1e-6), "{r:?}");
}

struct ToyUnet {
    enc1: Layer<f64>,
    enc2: Layer<f64>,
    fuse: Layer<f64>,
    dec1: Layer<f64>,
    proj: Layer<f64>,
}

impl ToyUnet {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        ToyUnet {
            enc1: Layer::xavier(LayerSpec::conv(1, 2, 1, Activation::Relu), rng).unwrap(),
            enc2: Layer::xavier(LayerSpec::conv(2, 4, 2, Activation::Relu), rng).unwrap(),
            fuse: Layer::xavier(LayerSpec::conv(4 + 2, 4, 1, Activation::Relu), rng).unwrap(),
            dec1: Layer::xavier(LayerSpec::upsample(4, 2, Activation::Relu), rng).unwrap(),
            proj: Layer::xavier(LayerSpec::pointwise(4, 1, Activation::None), rng).unwrap(),
        }
    }

    fn layers(&self) -> [&Layer<f64>; 5] {
        [&self.enc1, &self.enc2, &self.fuse, &self.dec1, &self.proj]
    }

    fn with_params(&self, p: &[Tensor<f64>]) -> Self {
        let l = self.layers();
        let rebuild = |i: usize| Layer::from_parts(l[i].spec, p[2 * i].clone(), p[2 * i + 1].clone()).unwrap();
        ToyUnet {
            enc1: rebuild(0),
            enc2: rebuild(1),
            fuse: rebuild(2),
            dec1: rebuild(3),
            proj: rebuild(4),
        }
    }

    /// Two-level U-Net: key planes fused at the bottleneck, one skip concat.
    fn loss_and_grads(&self, x: &Tensor<f64>, key: &[f64], probe: &Tensor<f64>) -> (f64, Vec<Tensor<f64>>) {
        let e1 = self.enc1.forward(x).unwrap();
        let e2 = self.enc2.forward(&e1).unwrap();
        let (_, h, w) = e2.dims3("toy").unwrap();
        let mut planes = Vec::new();
        for &k in key {
            planes.extend(std::iter::repeat_n(k, h * w));
        }
        let key_t = Tensor::from_vec(&[key.len(), h, w], planes).unwrap();
        let cat0 = concat_channels(&e2, &key_t).unwrap();
        let f = self.fuse.forward(&cat0).unwrap();
        let d1 = self.dec1.forward(&f).unwrap();
        let cat1 = concat_channels(&d1, &e1).unwrap();
        let out = self.proj.forward(&cat1).unwrap();
        let (v, g_out) = readout(&out, probe);

        let gp = self.proj.backward(&cat1, &out, &g_out, true).unwrap();
        let (g_d1, g_e1_skip) = split_channels(&gp.input.unwrap(), 2).unwrap();
        let gd = self.dec1.backward(&f, &d1, &g_d1, true).unwrap();
        let gf = self.fuse.backward(&cat0, &f, &gd.input.unwrap(), true).unwrap();
        let (g_e2, _) = split_channels(&gf.input.unwrap(), 4).unwrap();
        let ge2 = self.enc2.backward(&e1, &e2, &g_e2, true).unwrap();
        let mut g_e1 = ge2.input.unwrap();
        g_e1.add_assign(&g_e1_skip).unwrap();
        let ge1 = self.enc1.backward(x, &e1, &g_e1, false).unwrap();
        (
            v,
            vec![
                ge1.weight, ge1.bias, ge2.weight, ge2.bias, gf.weight, gf.bias, gd.weight, gd.bias,
                gp.weight, gp.bias,
            ],
        )
    }
}

#[test]
fn toy_unet_with_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let net = ToyUnet::new(&mut rng);
    let x = random(&[1, 8, 12], &mut rng).map(|v| v.abs());
    let key = [1.0, 0.0];
    let probe = random(&[1, 8, 12], &mut rng);
    let params: Vec<Tensor<f64>> = net
        .layers()
        .iter()
        .flat_map(|l| {
            [l.weight.clone(), l.bias.map(|_| 0.05)]
        })
        .collect();
    let f = |p: &[Tensor<f64>]| -> Result<(f64, Vec<Tensor<f64>>)> {
        Ok(net.with_params(p).loss_and_grads(&x, &key, &probe))
    };
    let r = check(f, &params).unwrap();
    assert!(r.passes(1e-5), "{r:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// ⟨convT(x), y⟩ = ⟨x, conv_backward_input(y)⟩ for shared weights.
    #[test]
    fn transposed_conv_is_adjoint_of_conv(
        seed in any::<u64>(),
        ci in 1usize..4,
        co in 1usize..4,
        h in 1usize..6,
        w in 1usize..6,
        stride in 1usize..3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let output_padding = stride - 1;
        let weight = random(&[co, ci, 3, 3], &mut rng);
        let x = random(&[co, h, w], &mut rng);
        let up = conv_transpose2d(&x, &weight, &Tensor::zeros(&[ci]), stride, 1, output_padding).unwrap();
        let y = random(up.shape(), &mut rng);
        let down = conv2d(&y, &weight, &Tensor::zeros(&[co]), stride, 1).unwrap();
        prop_assert_eq!(down.shape(), x.shape());
        let lhs = up.dot(&y).unwrap();
        let rhs = x.dot(&down).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-8, "lhs {} rhs {}", lhs, rhs);

        // Backward-data of conv is the transposed conv.
        let bd = conv2d_backward(&y, &weight, &x, stride, 1, true).unwrap().input.unwrap();
        for (a, b) in bd.data().iter().zip(up.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        let tb = conv_transpose2d_backward(&x, &weight, &y, stride, 1, output_padding, true).unwrap();
        for (a, b) in tb.input.unwrap().data().iter().zip(down.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn concat_backward_splits_exactly(seed in any::<u64>(), ca in 1usize..5, cb in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random(&[ca + cb, 3, 4], &mut rng);
        let (a, b) = split_channels(&g, ca).unwrap();
        let whole = g.norm().powi(2);
        prop_assert!((a.norm().powi(2) + b.norm().powi(2) - whole).abs() <= 1e-12 * whole.max(1.0));
        prop_assert_eq!(concat_channels(&a, &b).unwrap(), g);
    }

    #[test]
    fn ops_stay_finite(seed in any::<u64>(), scale in 1.0f64..1e6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = LayerSpec::conv(2, 3, 2, Activation::Sigmoid);
        let layer: Layer<f32> = Layer::xavier(spec, &mut rng).unwrap();
        let x = random(&[2, 6, 6], &mut rng).map(|v| v * scale).cast::<f32>();
        let y = layer.forward(&x).unwrap();
        prop_assert!(y.all_finite());
        let (v, g) = bce_loss(y.data(), &vec![1.0; y.len()]).unwrap();
        prop_assert!(v.is_finite() && g.iter().all(|x| x.is_finite()));
    }
}

//! Analytic gradients against central finite differences. Each check
//! returns the first mismatch it finds.

use lada::cae::{CaeArchitecture, CaeModel};
use lada::dataset::SequenceSample;
use lada::nn::{conv2d_backward, conv2d_forward, dense_backward, dense_forward, Activation, Conv2d, Dense, LayerParams};
use lada::scene::Field;
use lada::surrogate::{LatentScaler, LstmArchitecture, LstmModel};
use lada::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const REL: f64 = 1e-4;

fn close(analytic: f64, numeric: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs());
    (analytic - numeric).abs() <= REL * scale + 1e-9
}

fn random(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Central difference of `f` with respect to `params()[i]`, for every `i`.
fn numeric<M>(model: &mut M, len: usize, get: impl Fn(&mut M) -> &mut [f64], f: impl Fn(&M) -> f64) -> Vec<f64> {
    (0..len)
        .map(|i| {
            let orig = get(model)[i];
            get(model)[i] = orig + H;
            let up = f(model);
            get(model)[i] = orig - H;
            let down = f(model);
            get(model)[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn side(m: &mut CaeModel, decoder: bool) -> &mut lada::nn::Sequential {
    if decoder {
        &mut m.decoder
    } else {
        &mut m.encoder
    }
}

fn all_close(what: &str, analytic: &[f64], numeric: &[f64]) -> Result<(), String> {
    if analytic.len() != numeric.len() {
        return Err(format!("{what}: {} analytic vs {} numeric entries", analytic.len(), numeric.len()))?;
    }
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        if !close(*a, *n) {
            return Err(format!("{what}[{i}]: analytic {a:e} vs numeric {n:e}"));
        }
    }
    Ok(())
}

pub fn dense() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for act in [Activation::Elu, Activation::Sigmoid, Activation::Linear] {
        let d = Dense {
            inputs: 5,
            outputs: 4,
            activation: act,
        };
        let mut params = d.init_params("d", &mut rng);
        params.biases = Tensor::vector(random(&mut rng, 4, -0.5, 0.5));
        let x = Tensor::vector(random(&mut rng, 5, -1.0, 1.0));
        let up = Tensor::vector(random(&mut rng, 4, -1.0, 1.0));
        params.zero_grad();
        let dx = dense_backward(&d, &x, &mut params, &up).unwrap();
        let loss = |p: &LayerParams, x: &Tensor| dot(dense_forward(&d, x, p).unwrap().data(), up.data());

        let mut state = (params.clone(), x.clone());
        let nw = numeric(&mut state, 20, |s| s.0.weights.data_mut(), |s| loss(&s.0, &s.1));
        let nb = numeric(&mut state, 4, |s| s.0.biases.data_mut(), |s| loss(&s.0, &s.1));
        let nx = numeric(&mut state, 5, |s| s.1.data_mut(), |s| loss(&s.0, &s.1));
        all_close("dense weights", &params.grads.weights, &nw)?;
        all_close("dense biases", &params.grads.biases, &nb)?;
        all_close("dense input", dx.data(), &nx)?;
    }
    Ok(())
}

pub fn conv() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (stride, padding, act) in [(1, 1, Activation::Elu), (2, 1, Activation::Linear), (1, 0, Activation::Sigmoid)] {
        let c = Conv2d {
            in_channels: 2,
            out_channels: 3,
            kernel: 3,
            stride,
            padding,
            activation: act,
        };
        let mut params = c.init_params("c", &mut rng);
        params.biases = Tensor::vector(random(&mut rng, 3, -0.3, 0.3));
        let x = Tensor::new(&[2, 5, 6], random(&mut rng, 60, -1.0, 1.0)).unwrap();
        let out_len = conv2d_forward(&c, &x, &params).unwrap().len();
        let up = Tensor::new(
            conv2d_forward(&c, &x, &params).unwrap().shape(),
            random(&mut rng, out_len, -1.0, 1.0),
        )
        .unwrap();
        params.zero_grad();
        let dx = conv2d_backward(&c, &x, &mut params, &up).unwrap();
        let loss = |p: &LayerParams, x: &Tensor| dot(conv2d_forward(&c, x, p).unwrap().data(), up.data());

        let mut state = (params.clone(), x.clone());
        let nw = numeric(&mut state, params.weights.len(), |s| s.0.weights.data_mut(), |s| loss(&s.0, &s.1));
        let nb = numeric(&mut state, 3, |s| s.0.biases.data_mut(), |s| loss(&s.0, &s.1));
        let nx = numeric(&mut state, 60, |s| s.1.data_mut(), |s| loss(&s.0, &s.1));
        all_close("conv weights", &params.grads.weights, &nw)?;
        all_close("conv biases", &params.grads.biases, &nb)?;
        all_close("conv input", dx.data(), &nx)?;
    }
    Ok(())
}

/// 8×8 input, two encoder layers, latent size 2.
pub fn tiny_autoencoder() -> Result<(), String> {
    let arch = CaeArchitecture {
        channels: 1,
        rows: 8,
        cols: 8,
        encoder_layers: 2,
        filters: 3,
        kernel: 3,
        activation: Activation::Elu,
        latent_dim: 2,
    };
    let mut model = CaeModel::new(&arch, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let field = Field::new(8, 8, 1, random(&mut rng, 64, 0.0, 1.0)).unwrap();
    let up = Tensor::new(&[1, 8, 8], random(&mut rng, 64, -1.0, 1.0)).unwrap();
    let (eg, dg) = model.reconstruction_gradients(&field, &up).unwrap();
    let loss = |m: &CaeModel| dot(m.reconstruct(&field).unwrap().values(), up.data());

    let n_enc = model.encoder.params().count();
    let n_dec = model.decoder.params().count();
    if (eg.len(), dg.len()) != (n_enc, n_dec) {
        return Err("gradient count differs from layer count".into());
    }
    for (dec, grads) in [(false, &eg), (true, &dg)] {
        for (layer, g) in grads.iter().enumerate() {
            let wlen = g.weights.len();
            let nw = numeric(&mut model, wlen, |m| side(m, dec).params_mut().nth(layer).unwrap().weights.data_mut(), loss);
            let nb = numeric(&mut model, g.biases.len(), |m| side(m, dec).params_mut().nth(layer).unwrap().biases.data_mut(), loss);
            all_close(&format!("decoder={dec} layer {layer} weights"), &g.weights, &nw)?;
            all_close(&format!("decoder={dec} layer {layer} biases"), &g.biases, &nb)?;
        }
    }
    Ok(())
}

/// p = 2, hidden = 3, look-back 3.
pub fn lstm() -> Result<(), String> {
    for (residual, act) in [(true, Activation::Elu), (false, Activation::Sigmoid)] {
        let arch = LstmArchitecture {
            latent_dim: 2,
            hidden: 3,
            lookback: 3,
            activation: act,
            residual,
        };
        let mut model = LstmModel::new(&arch, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        model.weights.gates.biases = Tensor::vector(random(&mut rng, 12, -0.5, 0.5));
        model.weights.projection.biases = Tensor::vector(random(&mut rng, 2, -0.5, 0.5));
        // a non-trivial scaler exercises the scaled-space bookkeeping
        model.scaler = LatentScaler {
            min: vec![-1.0, 0.5],
            max: vec![2.0, 1.5],
        };
        let sample = SequenceSample {
            start: 0,
            inputs: (0..3).map(|_| random(&mut rng, 2, -1.0, 2.0)).collect(),
            target: random(&mut rng, 2, -1.0, 2.0),
        };
        let (_, grads) = model.sample_gradients(&sample).unwrap();
        let loss = |m: &LstmModel| {
            let out = m.scaler.scale(&m.forecast(&sample.inputs).unwrap());
            let t = m.scaler.scale(&sample.target);
            out.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / out.len() as f64
        };
        let ng = numeric(&mut model, 60, |m| m.weights.gates.weights.data_mut(), loss);
        let ngb = numeric(&mut model, 12, |m| m.weights.gates.biases.data_mut(), loss);
        let np = numeric(&mut model, 6, |m| m.weights.projection.weights.data_mut(), loss);
        let npb = numeric(&mut model, 2, |m| m.weights.projection.biases.data_mut(), loss);
        all_close("gate weights", &grads.gates.weights, &ng)?;
        all_close("gate biases", &grads.gates.biases, &ngb)?;
        all_close("projection weights", &grads.projection.weights, &np)?;
        all_close("projection biases", &grads.projection.biases, &npb)?;
    }
    Ok(())
}

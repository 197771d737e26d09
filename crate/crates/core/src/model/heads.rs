use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, Linear, Param, Parameters};
use crate::tensor::{sigmoid, Tensor};

/// Binary `h×w` gate `1[σ(P) > α]`, nearest-downsampled from `H×W`.
pub fn prediction_gate(p: &Tensor, alpha: f64, h: usize, w: usize) -> Result<Vec<f64>> {
    let (_, ph, pw) = p.dims3()?;
    if ph < h || pw < w {
        return Err(Error::shape(
            "prediction gate",
            format!(">= {h}x{w}"),
            format!("{ph}x{pw}"),
        ));
    }
    let mut gate = Vec::with_capacity(h * w);
    for i in 0..h {
        let sy = (((i as f64 + 0.5) * ph as f64 / h as f64).floor() as usize).min(ph - 1);
        for j in 0..w {
            let sx = (((j as f64 + 0.5) * pw as f64 / w as f64).floor() as usize).min(pw - 1);
            gate.push(if sigmoid(p.data()[sy * pw + sx]) > alpha {
                1.0
            } else {
                0.0
            });
        }
    }
    Ok(gate)
}

/// `x_MI = x_I ⊙ gate`, the gate broadcast over channels and detached.
pub fn masked_features(x_i: &Tensor, p: &Tensor, alpha: f64) -> Result<(Tensor, Vec<f64>)> {
    let (c, h, w) = x_i.dims3()?;
    let gate = prediction_gate(p, alpha, h, w)?;
    let hw = h * w;
    let data = (0..c * hw).map(|i| x_i.data()[i] * gate[i % hw]).collect();
    Ok((Tensor::from_vec(&[c, h, w], data)?, gate))
}

/// One classifier per attribute: global average pool, then
/// `fc2(relu(fc1(·)))`.
#[derive(Clone, Debug)]
pub struct AttributeHeads {
    heads: Vec<(Linear, Linear)>,
    channels: usize,
}

pub struct HeadsCache {
    pooled: Vec<f64>,
    hidden: Vec<Vec<f64>>,
    hw: usize,
}

impl AttributeHeads {
    pub fn new(rng: &mut impl Rng, channels: usize, hidden: usize, widths: &[usize]) -> Self {
        let heads = widths
            .iter()
            .map(|&a| {
                let fc1 = Linear::he(rng, channels, hidden);
                let fc2 = Linear::new(rng, hidden, a, (1.0 / hidden as f64).sqrt());
                (fc1, fc2)
            })
            .collect();
        AttributeHeads { heads, channels }
    }

    pub fn widths(&self) -> Vec<usize> {
        self.heads
            .iter()
            .map(|(_, fc2)| fc2.out_features())
            .collect()
    }

    pub fn forward(&self, x_mi: &Tensor) -> Result<(Vec<Vec<f64>>, HeadsCache)> {
        let (c, h, w) = x_mi.dims3()?;
        if c != self.channels {
            return Err(Error::shape("classifier input channels", self.channels, c));
        }
        let hw = h * w;
        let pooled: Vec<f64> = x_mi
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().sum::<f64>() / hw as f64)
            .collect();
        let mut logits = Vec::with_capacity(self.heads.len());
        let mut hidden = Vec::with_capacity(self.heads.len());
        for (fc1, fc2) in &self.heads {
            let z: Vec<f64> = fc1
                .forward(&pooled)
                .into_iter()
                .map(|v| v.max(0.0))
                .collect();
            logits.push(fc2.forward(&z));
            hidden.push(z);
        }
        Ok((logits, HeadsCache { pooled, hidden, hw }))
    }

    /// Returns `dx_MI` given per-head logit gradients.
    pub fn backward(
        &mut self,
        cache: &HeadsCache,
        dlogits: &[Vec<f64>],
        h: usize,
        w: usize,
    ) -> Tensor {
        let mut dpooled = vec![0.0; self.channels];
        for (((fc1, fc2), z), dl) in self.heads.iter_mut().zip(&cache.hidden).zip(dlogits) {
            let dz = fc2.backward(z, dl);
            let dz: Vec<f64> = dz
                .iter()
                .zip(z)
                .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                .collect();
            for (acc, g) in dpooled.iter_mut().zip(fc1.backward(&cache.pooled, &dz)) {
                *acc += g;
            }
        }
        let hw = cache.hw;
        Tensor::from_fn(&[self.channels, h, w], |i| dpooled[i / hw] / hw as f64)
    }
}

impl Parameters for AttributeHeads {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        for (m, (fc1, fc2)) in self.heads.iter().enumerate() {
            fc1.visit(&join(prefix, &format!("head{}.fc1", m + 1)), out);
            fc2.visit(&join(prefix, &format!("head{}.fc2", m + 1)), out);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        for (m, (fc1, fc2)) in self.heads.iter_mut().enumerate() {
            fc1.visit_mut(&join(prefix, &format!("head{}.fc1", m + 1)), out);
            fc2.visit_mut(&join(prefix, &format!("head{}.fc2", m + 1)), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gate_closed_open_and_half_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = normal_tensor(&mut rng, &[3, 4, 4], 1.0);
        let (m, _) = masked_features(&x, &Tensor::full(&[1, 16, 16], -10.0), 0.5).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
        let (m, _) = masked_features(&x, &Tensor::full(&[1, 16, 16], 10.0), 0.5).unwrap();
        assert_eq!(m, x);
        let p = Tensor::from_fn(&[1, 16, 16], |i| if i % 16 < 8 { 5.0 } else { -5.0 });
        let (m, gate) = masked_features(&x, &p, 0.5).unwrap();
        assert!(gate.iter().all(|&g| g == 0.0 || g == 1.0));
        for ch in 0..3 {
            for y in 0..4 {
                for xx in 0..4 {
                    let i = ch * 16 + y * 4 + xx;
                    let want = if xx < 2 { x.data()[i] } else { 0.0 };
                    assert_eq!(m.data()[i], want);
                }
            }
        }
    }

    #[test]
    fn zero_input_gives_second_layer_bias_and_pooling_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut heads = AttributeHeads::new(&mut rng, 4, 6, &[2, 6, 7, 7]);
        for (_, fc2) in &mut heads.heads {
            fc2.bias.value = normal_tensor(&mut rng, fc2.bias.value.shape(), 1.0);
        }
        let (logits, _) = heads.forward(&Tensor::zeros(&[4, 3, 3])).unwrap();
        assert_eq!(
            logits.iter().map(Vec::len).collect::<Vec<_>>(),
            vec![2, 6, 7, 7]
        );
        for (l, (_, fc2)) in logits.iter().zip(&heads.heads) {
            assert_eq!(l.as_slice(), fc2.bias.value.data());
        }
        let x = normal_tensor(&mut rng, &[4, 3, 3], 1.0);
        let perm = [4, 7, 1, 0, 8, 2, 6, 3, 5];
        let xp = Tensor::from_fn(&[4, 3, 3], |i| x.data()[(i / 9) * 9 + perm[i % 9]]);
        let (a, _) = heads.forward(&x).unwrap();
        let (b, _) = heads.forward(&xp).unwrap();
        for (u, v) in a.iter().flatten().zip(b.iter().flatten()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

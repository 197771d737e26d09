//! Attribute projection and attribute-image cross-attention.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, normal_tensor, Conv1d, Conv1dCache, Conv2d, Conv2dCache, Param, Parameters};
use crate::tensor::{gemm, softmax_in_place, Tensor};

/// `x_proA = reshape(conv1d_k3(x_A) · γ)` with γ of shape `L×(h·w)`.
#[derive(Clone, Debug)]
pub struct AttributeProjection {
    pub conv: Conv1d,
    pub gamma: Param,
    h: usize,
    w: usize,
}

pub struct ProjectionCache {
    conv: Conv1dCache,
    projected: Tensor,
}

impl AttributeProjection {
    pub fn new(rng: &mut impl Rng, d: usize, len: usize, c: usize, h: usize, w: usize) -> Self {
        AttributeProjection {
            conv: Conv1d::new(rng, d, c, 3),
            gamma: Param::new(normal_tensor(rng, &[len, h * w], 0.02)),
            h,
            w,
        }
    }

    pub fn forward(&self, x_a: &Tensor) -> Result<(Tensor, ProjectionCache)> {
        let (projected, conv) = self.conv.forward(x_a)?;
        let out = project_attributes(&projected, &self.gamma.value, self.h, self.w)?;
        Ok((out, ProjectionCache { conv, projected }))
    }

    pub fn backward(&mut self, cache: &ProjectionCache, dy: &Tensor) {
        let (c, len) = cache.projected.dims2().expect("rank-2");
        let hw = self.h * self.w;
        // dγ = fᵀ·dY, df = dY·γᵀ
        gemm(
            len,
            c,
            hw,
            cache.projected.data(),
            true,
            dy.data(),
            false,
            self.gamma.grad.data_mut(),
            true,
        );
        let mut df = vec![0.0; c * len];
        gemm(
            c,
            hw,
            len,
            dy.data(),
            false,
            self.gamma.value.data(),
            true,
            &mut df,
            false,
        );
        let df = Tensor::from_vec(&[c, len], df).expect("df shape");
        self.conv.backward(&cache.conv, &df);
    }
}

impl Parameters for AttributeProjection {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.conv.visit(&join(prefix, "conv"), out);
        out.push((join(prefix, "gamma"), &self.gamma));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.conv.visit_mut(&join(prefix, "conv"), out);
        out.push((join(prefix, "gamma"), &mut self.gamma));
    }
}

/// `reshape(f · γ)` for projected tokens `f: c×L` and `γ: L×(h·w)`.
pub fn project_attributes(
    projected: &Tensor,
    gamma: &Tensor,
    h: usize,
    w: usize,
) -> Result<Tensor> {
    let (c, len) = projected.dims2()?;
    let (gl, ghw) = gamma.dims2()?;
    if gl != len || ghw != h * w {
        return Err(Error::shape(
            "gamma",
            format!("{len}x{}", h * w),
            format!("{gl}x{ghw}"),
        ));
    }
    let mut out = vec![0.0; c * h * w];
    gemm(
        c,
        len,
        h * w,
        projected.data(),
        false,
        gamma.data(),
        false,
        &mut out,
        false,
    );
    Tensor::from_vec(&[c, h, w], out)
}

/// Row-wise `softmax(qᵀk)` for `q, k: c×N`; row `i` is image position `i`.
pub fn attention_map(q: &[f64], k: &[f64], c: usize, n: usize) -> Tensor {
    let mut s = vec![0.0; n * n];
    gemm(n, c, n, q, true, k, false, &mut s, false);
    for row in s.chunks_mut(n) {
        softmax_in_place(row);
    }
    Tensor::from_vec(&[n, n], s).expect("attention shape")
}

/// Cross-attention fusion `x_AI = β·(ϕ(x_I)·Sᵀ) + x_I` with
/// `S = softmax(φ(x_I)ᵀ θ(x_proA))`.
#[derive(Clone, Debug)]
pub struct Aica {
    pub phi: Conv2d,
    pub theta: Conv2d,
    pub varphi: Conv2d,
    pub beta: Param,
}

pub struct AicaCache {
    q: Conv2dCache,
    k: Conv2dCache,
    v: Conv2dCache,
    qv: Tensor,
    kv: Tensor,
    vv: Tensor,
    s: Tensor,
    o: Vec<f64>,
}

impl Aica {
    pub fn new(rng: &mut impl Rng, c: usize) -> Self {
        Aica {
            phi: Conv2d::new(rng, c, c, 1),
            theta: Conv2d::new(rng, c, c, 1),
            varphi: Conv2d::new(rng, c, c, 1),
            beta: Param::new(Tensor::zeros(&[1])),
        }
    }

    /// Identity transforms, for hand-checkable configurations.
    pub fn identity(c: usize, beta: f64) -> Self {
        Aica {
            phi: Conv2d::identity(c),
            theta: Conv2d::identity(c),
            varphi: Conv2d::identity(c),
            beta: Param::new(Tensor::full(&[1], beta)),
        }
    }

    pub fn beta(&self) -> f64 {
        self.beta.value.data()[0]
    }

    /// Returns `(S, x_AI)`.
    pub fn forward(&self, x_i: &Tensor, x_pro_a: &Tensor) -> Result<(Tensor, Tensor, AicaCache)> {
        if x_i.shape() != x_pro_a.shape() {
            return Err(Error::shape(
                "aica inputs",
                format!("{:?}", x_i.shape()),
                format!("{:?}", x_pro_a.shape()),
            ));
        }
        let (c, h, w) = x_i.dims3()?;
        let n = h * w;
        let (qv, q) = self.phi.forward(x_i)?;
        let (kv, k) = self.theta.forward(x_pro_a)?;
        let (vv, v) = self.varphi.forward(x_i)?;
        let s = attention_map(qv.data(), kv.data(), c, n);
        let mut o = vec![0.0; c * n];
        gemm(c, n, n, vv.data(), false, s.data(), true, &mut o, false);
        let beta = self.beta();
        let x_ai = Tensor::from_vec(
            &[c, h, w],
            o.iter()
                .zip(x_i.data())
                .map(|(ov, xv)| beta * ov + xv)
                .collect(),
        )?;
        let cache = AicaCache {
            q,
            k,
            v,
            qv,
            kv,
            vv,
            s: s.clone(),
            o,
        };
        Ok((s, x_ai, cache))
    }

    /// Returns `(dx_I, dx_proA)`.
    pub fn backward(&mut self, cache: &AicaCache, dx_ai: &Tensor) -> (Tensor, Tensor) {
        let (c, h, w) = dx_ai.dims3().expect("rank-3");
        let n = h * w;
        let dy = dx_ai.data();
        self.beta.grad.data_mut()[0] += dy.iter().zip(&cache.o).map(|(a, b)| a * b).sum::<f64>();
        let beta = self.beta();
        let d_o: Vec<f64> = dy.iter().map(|g| beta * g).collect();

        let mut dv = vec![0.0; c * n];
        gemm(c, n, n, &d_o, false, cache.s.data(), false, &mut dv, false);
        let mut ds = vec![0.0; n * n];
        gemm(n, c, n, &d_o, true, cache.vv.data(), false, &mut ds, false);
        let s = cache.s.data();
        let mut de = vec![0.0; n * n];
        for i in 0..n {
            let row = i * n..(i + 1) * n;
            let dot: f64 = ds[row.clone()]
                .iter()
                .zip(&s[row.clone()])
                .map(|(a, b)| a * b)
                .sum();
            for j in row {
                de[j] = s[j] * (ds[j] - dot);
            }
        }
        let mut dq = vec![0.0; c * n];
        gemm(c, n, n, cache.kv.data(), false, &de, true, &mut dq, false);
        let mut dk = vec![0.0; c * n];
        gemm(c, n, n, cache.qv.data(), false, &de, false, &mut dk, false);

        let t = |v: Vec<f64>| Tensor::from_vec(&[c, h, w], v).expect("grad shape");
        let mut dx_i = dx_ai.clone();
        dx_i.add_assign(&self.phi.backward(&cache.q, &t(dq), true).expect("dx"));
        dx_i.add_assign(&self.varphi.backward(&cache.v, &t(dv), true).expect("dx"));
        let dx_pro_a = self.theta.backward(&cache.k, &t(dk), true).expect("dx");
        (dx_i, dx_pro_a)
    }
}

impl Parameters for Aica {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.phi.visit(&join(prefix, "phi"), out);
        self.theta.visit(&join(prefix, "theta"), out);
        self.varphi.visit(&join(prefix, "varphi"), out);
        out.push((join(prefix, "beta"), &self.beta));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.phi.visit_mut(&join(prefix, "phi"), out);
        self.theta.visit_mut(&join(prefix, "theta"), out);
        self.varphi.visit_mut(&join(prefix, "varphi"), out);
        out.push((join(prefix, "beta"), &mut self.beta));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gamma_annihilates_projection() {
        let f = Tensor::from_fn(&[3, 2], |i| i as f64);
        let out = project_attributes(&f, &Tensor::zeros(&[2, 4]), 2, 2).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(project_attributes(&f, &Tensor::zeros(&[3, 4]), 2, 2).is_err());
    }

    #[test]
    fn single_token_with_unit_gamma_broadcasts() {
        let f = Tensor::from_vec(&[3, 1], vec![1.5, -2.0, 0.25]).unwrap();
        let out = project_attributes(&f, &Tensor::full(&[1, 6], 1.0), 2, 3).unwrap();
        for ch in 0..3 {
            for p in 0..6 {
                assert_eq!(out.data()[ch * 6 + p], f.data()[ch]);
            }
        }
    }

    #[test]
    fn identity_transforms_match_dense_oracle() {
        // c=2, h=w=2; with identity maps E = x_Iᵀ x_proA.
        let x_i =
            Tensor::from_vec(&[2, 2, 2], vec![0.1, 0.5, -0.3, 0.8, 1.0, -0.2, 0.4, 0.0]).unwrap();
        let x_p =
            Tensor::from_vec(&[2, 2, 2], vec![0.7, -0.1, 0.2, 0.3, -0.5, 0.6, 0.9, -0.4]).unwrap();
        let aica = Aica::identity(2, 0.7);
        let (s, x_ai, _) = aica.forward(&x_i, &x_p).unwrap();
        let xi = |ch: usize, p: usize| x_i.data()[ch * 4 + p];
        let xp = |ch: usize, p: usize| x_p.data()[ch * 4 + p];
        for i in 0..4 {
            let e: Vec<f64> = (0..4)
                .map(|j| xi(0, i) * xp(0, j) + xi(1, i) * xp(1, j))
                .collect();
            let z: f64 = e.iter().map(|v| v.exp()).sum();
            for j in 0..4 {
                assert!((s.at2(i, j) - e[j].exp() / z).abs() < 1e-12);
            }
            for ch in 0..2 {
                let o: f64 = (0..4).map(|j| e[j].exp() / z * xi(ch, j)).sum();
                assert!((x_ai.data()[ch * 4 + i] - (0.7 * o + xi(ch, i))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_scores_give_uniform_rows_and_zero_beta_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x_i = normal_tensor(&mut rng, &[3, 2, 2], 1.0);
        let aica = Aica::new(&mut rng, 3);
        let (s, x_ai, _) = aica.forward(&x_i, &Tensor::zeros(&[3, 2, 2])).unwrap();
        assert_eq!(x_ai, x_i);
        // θ(0) is the θ bias, which is zero at init, so every score is zero.
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
}

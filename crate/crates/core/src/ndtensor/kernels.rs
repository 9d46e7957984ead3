//! Dense loops shared by forward and backward. Every reduction runs in
//! ascending index order so results are reproducible bit for bit.

use super::tensor::Float;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_nn<E: Float>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt<E: Float>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = out[i * n + j];
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out[i * n + j] = acc;
        }
    }
}

/// `out[m×n] += a[r×m]ᵀ · b[r×n]`
pub fn matmul_tn<E: Float>(a: &[E], b: &[E], r: usize, m: usize, n: usize, out: &mut [E]) {
    for p in 0..r {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

pub fn add_into<E: Float>(dst: &mut [E], src: &[E]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

pub fn softmax_row<E: Float>(x: &[E], out: &mut [E]) {
    let max = x.iter().fold(E::neg_infinity(), |a, &b| a.max(b));
    let mut sum = E::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum = sum + *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<E: Float>(x: E) -> E {
    let c = E::from_f64(GELU_C);
    let a = E::from_f64(GELU_A);
    let half = E::from_f64(0.5);
    half * x * (E::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<E: Float>(x: E) -> E {
    let c = E::from_f64(GELU_C);
    let a = E::from_f64(GELU_A);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (E::one() + t) + half * x * (E::one() - t * t) * c * (E::one() + three * a * x * x)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<E: Float>(xs: &[E]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
